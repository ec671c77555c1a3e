use gcpool::data::{gen_cov_task, SyntheticCovTaskSpec};
use gcpool::tensor::Mat;

// 100 samples of 10×10 rows: 10⁴ feature vectors per class
fn spec() -> SyntheticCovTaskSpec {
    SyntheticCovTaskSpec {
        classes: 3,
        channels: 4,
        height: 10,
        width: 10,
        spectrum: vec![],
        train_per_class: 100,
        test_per_class: 1,
    }
}

#[test]
fn class_moments_match_generators() {
    let task = gen_cov_task(&spec(), 17).unwrap();
    let ds = &task.train;
    let d = 4;
    let n = 100;
    for class in 0..3 {
        let mut rows = Vec::new();
        for (i, &l) in ds.labels.iter().enumerate() {
            if l != class {
                continue;
            }
            let s = ds.images.sample(i);
            for r in 0..n {
                rows.push((0..d).map(|c| s[c * n + r]).collect::<Vec<f64>>());
            }
        }
        let m = rows.len() as f64;
        assert_eq!(rows.len(), 10_000);
        let truth = task.covariances[class].as_mat();

        for c in 0..d {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / m;
            let sampling_std = (truth[(c, c)] / m).sqrt();
            assert!(mean.abs() <= 3.0 * sampling_std, "class {class} ch {c}: mean {mean}");
        }

        // second moment about the known zero mean
        let emp = Mat::from_fn(d, d, |a, b| rows.iter().map(|r| r[a] * r[b]).sum::<f64>() / m);
        let rel = emp.sub(truth).unwrap().frobenius_norm() / truth.frobenius_norm();
        assert!(rel <= 0.05, "class {class}: rel {rel}");
    }
}
