"""Smoke test for the gcpool extension module.

Build and install first:  pip install --no-build-isolation ./crates/py
"""

import math
import os
import tempfile

import gcpool


def close(a, b, tol=1e-10):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    lam, u = gcpool.sym_eig([[2.0, 1.0], [1.0, 2.0]])
    assert close(lam[0], 3.0) and close(lam[1], 1.0), lam

    z = gcpool.matrix_sqrt([[4.0, 0.0], [0.0, 9.0]])
    assert close(z[0][0], 2.0) and close(z[1][1], 3.0), z

    x = [[1.0, 0.5], [-1.0, 0.2], [0.3, 2.0], [-0.3, -2.7]]
    vec, z = gcpool.gcp_forward(x)
    sigma = gcpool.covariance(x)
    z2 = [[sum(z[i][k] * z[k][j] for k in range(2)) for j in range(2)] for i in range(2)]
    assert all(close(z2[i][j], sigma[i][j]) for i in range(2) for j in range(2))
    dx = gcpool.gcp_backward(x, [[1.0, 0.0], [0.0, 0.0]])
    assert len(dx) == 4

    cases = gcpool.gradcheck(seed=0, cases=5)
    assert all(passed for _, _, _, passed in cases), cases

    rows = gcpool.schedule("mobilenet-norm", 3)
    assert rows[2] == (2, 0.045 * 0.98 ** 2), rows

    eta, dl, dg = gcpool.probe_quadratic([3.0, 4.0])
    assert all(close(l, 12.5 * (1 + e) ** 2, 1e-12) for e, l in zip(eta, dl))
    assert all(close(g, 5 * e, 1e-12) for e, g in zip(eta, dg))

    assert gcpool.flip_probability([0, 0, 1, 1, 0]) == 0.5

    train, test = gcpool.synthetic_task(seed=1, train_per_class=64, test_per_class=32)
    net = gcpool.Network(train.shape, train.classes, head="gcp", architecture="linear", reduce_dim=8, seed=7)
    report = net.fit(train, test, epochs=3, seed=7, probe_cadence=20)
    acc = report["epoch_accuracy"][-1]
    assert report["probes_csv"].startswith("step,loss,")
    assert not math.isnan(acc)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        net.save(path)
        again = gcpool.Network.load(path)
        assert again.predict(test.images) == net.predict(test.images)

    print(f"gcpool smoke test ok: {net.param_count} parameters, GCP test accuracy {acc:.3f}")


if __name__ == "__main__":
    main()
