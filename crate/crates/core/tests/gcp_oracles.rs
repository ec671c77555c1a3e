//! Oracle-backed checks for the eigensolver and the GCP forward/backward.
//!
//! The square-root oracle here is a Denman–Beavers iteration with a
//! Gauss–Jordan inverse, so it shares no code path with the Jacobi-based
//! implementation it checks.

use gcpool::gradcheck::{relative_error, sample_case, spectral_gap};
use gcpool::pooling::*;
use gcpool::rng::{normal, seeded};
use gcpool::tensor::*;
use proptest::prelude::*;

fn gauss_jordan_inverse(a: &Mat) -> Mat {
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = Mat::identity(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().partial_cmp(&m[(j, col)].abs()).unwrap())
            .unwrap();
        for c in 0..n {
            let t = m[(col, c)];
            m[(col, c)] = m[(pivot, c)];
            m[(pivot, c)] = t;
            let t = inv[(col, c)];
            inv[(col, c)] = inv[(pivot, c)];
            inv[(pivot, c)] = t;
        }
        let p = m[(col, col)];
        for c in 0..n {
            m[(col, c)] /= p;
            inv[(col, c)] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[(r, col)];
                for c in 0..n {
                    m[(r, c)] -= f * m[(col, c)];
                    inv[(r, c)] -= f * inv[(col, c)];
                }
            }
        }
    }
    inv
}

fn denman_beavers_sqrt(a: &Mat) -> Mat {
    let mut y = a.clone();
    let mut z = Mat::identity(a.rows());
    for _ in 0..60 {
        let y_next = y.add(&gauss_jordan_inverse(&z)).unwrap().scale(0.5);
        let z_next = z.add(&gauss_jordan_inverse(&y)).unwrap().scale(0.5);
        let delta = y_next.sub(&y).unwrap().frobenius_norm();
        y = y_next;
        z = z_next;
        if delta <= 1e-15 * y.frobenius_norm() {
            break;
        }
    }
    y
}

/// Covariance with explicit means, independent of the centering matrix.
fn covariance_oracle(x: &Mat) -> Mat {
    let (n, d) = x.shape();
    let means: Vec<f64> = (0..d)
        .map(|c| (0..n).map(|r| x[(r, c)]).sum::<f64>() / n as f64)
        .collect();
    Mat::from_fn(d, d, |i, j| {
        (0..n)
            .map(|r| (x[(r, i)] - means[i]) * (x[(r, j)] - means[j]))
            .sum::<f64>()
            / n as f64
    })
}

fn oracle_loss(x: &Mat, dz: &SymMat) -> f64 {
    denman_beavers_sqrt(&covariance_oracle(x)).dot(dz.as_mat()).unwrap()
}

fn oracle_grad(x: &Mat, dz: &SymMat, h: f64) -> Mat {
    let mut g = Mat::zeros(x.rows(), x.cols());
    let mut p = x.clone();
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let o = p[(r, c)];
            p[(r, c)] = o + h;
            let plus = oracle_loss(&p, dz);
            p[(r, c)] = o - h;
            let minus = oracle_loss(&p, dz);
            p[(r, c)] = o;
            g[(r, c)] = (plus - minus) / (2.0 * h);
        }
    }
    g
}

fn random_mat(seed: u64, rows: usize, cols: usize) -> Mat {
    let mut rng = seeded(seed);
    Mat::from_fn(rows, cols, |_, _| normal(&mut rng))
}

fn random_sym(seed: u64, d: usize) -> SymMat {
    sym_part(&random_mat(seed, d, d)).unwrap()
}

#[test]
fn gcp_backward_matches_independent_oracle() {
    let mut rng = seeded(2024);
    for _ in 0..20 {
        let (x, dz, gap) = sample_case(&mut rng, 8, 3, 0.05).unwrap();
        assert!(gap >= 0.05);
        let (_, ctx) = gcp_forward(&FeatureMatrix::new(x.clone()).unwrap()).unwrap();
        let analytic = gcp_backward(&ctx, &dz).unwrap();
        let numeric = oracle_grad(&x, &dz, 1e-5);
        let err = relative_error(analytic.values(), &numeric);
        assert!(err <= 1e-6, "relative error {err}");
    }
}

#[test]
fn gcp_forward_reconstructs_covariance() {
    let x = random_mat(5, 16, 4);
    let (pooled, ctx) = gcp_forward(&FeatureMatrix::new(x.clone()).unwrap()).unwrap();
    let z = devectorize_sym(&pooled, 4).unwrap();
    let squared = z.as_mat().matmul(z.as_mat()).unwrap();
    let sigma = covariance_oracle(&x);
    assert!(squared.sub(&sigma).unwrap().frobenius_norm() <= 1e-8 * sigma.frobenius_norm().max(1.0));
    assert!(ctx.z.as_mat().sub(&denman_beavers_sqrt(&sigma)).unwrap().max_abs() <= 1e-10);
}

#[test]
fn vectorization_preserves_inner_products() {
    for seed in 0..10 {
        let a = random_sym(seed, 5);
        let b = random_sym(seed + 100, 5);
        let va = vectorize_sym(&a);
        let vb = vectorize_sym(&b);
        let lhs: f64 = va.0.iter().zip(&vb.0).map(|(x, y)| x * y).sum();
        assert!((lhs - a.as_mat().dot(b.as_mat()).unwrap()).abs() <= 1e-12);
        // adjoint: <vec(A), g> = <A, devec_grad(g)>
        let g = PooledVector(random_mat(seed + 200, 1, 15).into_vec());
        let lhs: f64 = va.0.iter().zip(&g.0).map(|(x, y)| x * y).sum();
        let rhs = a.as_mat().dot(devectorize_grad(&g, 5).unwrap().as_mat()).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12);
    }
}

#[test]
fn trimmed_equals_full_for_simultaneously_diagonal_inputs() {
    // orthogonal columns with distinct energies and zero column means give a
    // diagonal covariance
    let x = Mat::from_rows(&[
        &[3.0, 1.0, 0.5],
        &[-3.0, 1.0, -0.5],
        &[3.0, -1.0, -0.5],
        &[-3.0, -1.0, 0.5],
    ])
    .unwrap();
    let (_, ctx) = gcp_forward(&FeatureMatrix::new(x).unwrap()).unwrap();
    let off = ctx.sigma.as_mat().sub(&diag_part(ctx.sigma.as_mat()).unwrap()).unwrap();
    assert_eq!(off.max_abs(), 0.0);
    let dz = SymMat::from_diag(&[0.3, -1.2, 2.0]);
    let full = gcp_backward(&ctx, &dz).unwrap();
    let trimmed = gcp_backward_trimmed(&ctx, &dz).unwrap();
    assert!(full.values().sub(trimmed.values()).unwrap().max_abs() <= 1e-12);
}

#[test]
fn preconditioner_reproduces_trimmed_gradient() {
    let mut rng = seeded(77);
    let (x, dz, _) = sample_case(&mut rng, 12, 4, 0.05).unwrap();
    let (_, ctx) = gcp_forward(&FeatureMatrix::new(x).unwrap()).unwrap();
    let eta = 0.37;
    let f = preconditioner_factor(&ctx, eta).unwrap();
    let lhs = f.matmul(dz.as_mat()).unwrap();
    let rhs = gcp_backward_trimmed(&ctx, &dz).unwrap().into_mat().scale(eta);
    assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12);
    let cos = trimmed_cosine(&ctx, &dz).unwrap();
    assert!((-1.0..=1.0 + 1e-12).contains(&cos));
}

#[test]
fn eigensolver_is_deterministic() {
    let a = random_sym(9, 12);
    let e1 = sym_eig(&a, EIG_TOL).unwrap();
    let e2 = sym_eig(&a, EIG_TOL).unwrap();
    assert_eq!(e1.u.as_slice(), e2.u.as_slice());
    assert_eq!(e1.lambda, e2.lambda);
}

#[test]
fn centering_matrix_scaled_idempotence() {
    for n in 1..12 {
        let j = centering_matrix(n).unwrap();
        let jj = j.matmul(&j.scale(n as f64)).unwrap();
        assert!(jj.sub(&j).unwrap().max_abs() <= 1e-15);
        assert_eq!(j, j.transpose());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigensolver_contract(seed in any::<u64>(), d in 1usize..=16) {
        let a = random_sym(seed, d);
        let e = sym_eig(&a, EIG_TOL).unwrap();
        let utu = e.u.t_matmul(&e.u).unwrap();
        prop_assert!(utu.sub(&Mat::identity(d)).unwrap().max_abs() <= 1e-10);
        let rec = e.reconstruct_with(|l| l);
        let norm = a.as_mat().frobenius_norm();
        prop_assert!(rec.sub(a.as_mat()).unwrap().frobenius_norm() <= 1e-8 * norm.max(1.0));
        prop_assert!(e.lambda.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn sym_and_diag_parts_are_idempotent(seed in any::<u64>(), d in 1usize..=8) {
        let a = random_mat(seed, d, d);
        let s = sym_part(&a).unwrap();
        prop_assert_eq!(sym_part(s.as_mat()).unwrap(), s);
        let dg = diag_part(&a).unwrap();
        prop_assert_eq!(diag_part(&dg).unwrap(), dg);
    }

    #[test]
    fn covariance_is_psd(seed in any::<u64>(), n in 1usize..=64, d in 1usize..=16) {
        let x = random_mat(seed, n, d);
        let (sigma, _) = covariance(&FeatureMatrix::new(x).unwrap()).unwrap();
        let e = sym_eig(&sigma, EIG_TOL).unwrap();
        let tr = sigma.as_mat().trace();
        prop_assert!(*e.lambda.last().unwrap() >= -1e-10 * tr);
    }

    #[test]
    fn sqrt_squares_back(seed in any::<u64>(), d in 1usize..=16) {
        let b = random_mat(seed, d + 2, d);
        let sigma = sym_part(&b.t_matmul(&b).unwrap()).unwrap();
        let (z, _) = matrix_sqrt(&sigma, 0.0).unwrap();
        let sq = z.as_mat().matmul(z.as_mat()).unwrap();
        let norm = sigma.as_mat().frobenius_norm();
        prop_assert!(sq.sub(sigma.as_mat()).unwrap().frobenius_norm() <= 1e-10 * norm.max(1.0));
    }

    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = random_mat(seed, 10, 4);
        let (_, ctx) = gcp_forward(&FeatureMatrix::new(x).unwrap()).unwrap();
        let g1 = random_sym(seed ^ 1, 4);
        let g2 = random_sym(seed ^ 2, 4);
        let combo = sym_part(&g1.as_mat().scale(a).add(&g2.as_mat().scale(b)).unwrap()).unwrap();
        let lhs = gcp_backward(&ctx, &combo).unwrap().into_mat();
        let rhs = gcp_backward(&ctx, &g1).unwrap().into_mat().scale(a)
            .add(&gcp_backward(&ctx, &g2).unwrap().into_mat().scale(b)).unwrap();
        let scale = lhs.max_abs().max(1.0);
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12 * scale);
    }

    #[test]
    fn trimmed_equals_full_at_d1(seed in any::<u64>(), n in 2usize..20, g in -5.0f64..5.0) {
        let x = random_mat(seed, n, 1);
        let (_, ctx) = gcp_forward(&FeatureMatrix::new(x).unwrap()).unwrap();
        let dz = SymMat::from_diag(&[g]);
        let full = gcp_backward(&ctx, &dz).unwrap().into_mat();
        let trimmed = gcp_backward_trimmed(&ctx, &dz).unwrap().into_mat();
        prop_assert!(full.sub(&trimmed).unwrap().max_abs() <= 1e-12);
        prop_assert_eq!(trimmed_hadamard_term(&ctx), Mat::zeros(1, 1));
    }

    #[test]
    fn backward_is_row_permutation_equivariant(seed in any::<u64>(), shift in 1usize..9) {
        let x = random_mat(seed, 9, 3);
        let perm: Vec<usize> = (0..9).map(|i| (i + shift) % 9).collect();
        let xp = Mat::from_fn(9, 3, |r, c| x[(perm[r], c)]);
        let dz = random_sym(seed ^ 7, 3);
        let (_, ctx) = gcp_forward(&FeatureMatrix::new(x).unwrap()).unwrap();
        let (_, ctxp) = gcp_forward(&FeatureMatrix::new(xp).unwrap()).unwrap();
        prop_assume!(spectral_gap(&ctx.eig.lambda) > 1e-3);
        let g = gcp_backward(&ctx, &dz).unwrap().into_mat();
        let gp = gcp_backward(&ctxp, &dz).unwrap().into_mat();
        let expected = Mat::from_fn(9, 3, |r, c| g[(perm[r], c)]);
        prop_assert!(gp.sub(&expected).unwrap().max_abs() <= 1e-9 * g.max_abs().max(1.0));
    }
}
