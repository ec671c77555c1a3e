//! Central finite-difference verification of the GCP backward pass.

use rand::Rng;

use crate::error::Result;
use crate::pooling::{gcp_backward, gcp_backward_with_mask, gcp_forward, FeatureMatrix};
use crate::rng::{normal, seeded};
use crate::tensor::{sym_part, Mat, SymMat};

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Minimum spacing between sorted eigenvalues of `Σ` (and of the
    /// smallest eigenvalue from zero).
    pub min_gap: f64,
    pub n_range: (usize, usize),
    pub d_range: (usize, usize),
    /// Replace `K` by `−K` in the backward pass (mutation check).
    pub flip_k_sign: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            min_gap: 0.05,
            n_range: (8, 32),
            d_range: (3, 8),
            flip_k_sign: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub index: usize,
    pub n: usize,
    pub d: usize,
    pub min_gap: f64,
    pub rel_error: f64,
    pub passed: bool,
    /// Set when the case could not be evaluated (eigensolver failure).
    pub failure: Option<String>,
}

/// `L(X) = ⟨dZ, Z(X)⟩_F` evaluated through the forward pass.
pub fn probe_loss(x: &Mat, dz: &SymMat) -> Result<f64> {
    let (_, ctx) = gcp_forward(&FeatureMatrix::new(x.clone())?)?;
    ctx.z.as_mat().dot(dz.as_mat())
}

/// Central-difference gradient of [`probe_loss`] with respect to every
/// entry of `x`.
pub fn finite_difference_grad(x: &Mat, dz: &SymMat, step: f64) -> Result<Mat> {
    let mut grad = Mat::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let orig = probe[(r, c)];
            probe[(r, c)] = orig + step;
            let plus = probe_loss(&probe, dz)?;
            probe[(r, c)] = orig - step;
            let minus = probe_loss(&probe, dz)?;
            probe[(r, c)] = orig;
            grad[(r, c)] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(grad)
}

/// `‖a − b‖_F / max(‖a‖_F, ‖b‖_F)`, zero when both vanish.
pub fn relative_error(a: &Mat, b: &Mat) -> f64 {
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale == 0.0 {
        return 0.0;
    }
    a.sub(b).expect("same shape").frobenius_norm() / scale
}

/// Smallest spacing among the descending eigenvalues, including the
/// distance of the last one from zero.
pub fn spectral_gap(lambda: &[f64]) -> f64 {
    let mut gap = lambda.last().copied().unwrap_or(0.0);
    for w in lambda.windows(2) {
        gap = gap.min(w[0] - w[1]);
    }
    gap
}

fn random_sym(rng: &mut impl Rng, d: usize) -> SymMat {
    let raw = Mat::from_fn(d, d, |_, _| normal(rng));
    sym_part(&raw).expect("square")
}

/// Draws `(X, dZ)` with `X` of shape `n × d`, resampling `X` until the
/// covariance has the requested eigen-gap.
pub fn sample_case(rng: &mut impl Rng, n: usize, d: usize, min_gap: f64) -> Result<(Mat, SymMat, f64)> {
    loop {
        // distinct column scales spread the spectrum and make resampling rare
        let x = Mat::from_fn(n, d, |_, c| (1.0 + 0.6 * c as f64) * normal(rng));
        let (_, ctx) = gcp_forward(&FeatureMatrix::new(x.clone())?)?;
        let gap = spectral_gap(&ctx.eig.lambda);
        if gap >= min_gap {
            return Ok((x, random_sym(rng, d), gap));
        }
    }
}

/// Analytic-vs-numeric comparison for a single `(X, dZ)` pair.
pub fn check_case(x: &Mat, dz: &SymMat, opts: &GradcheckOptions) -> Result<f64> {
    let (_, ctx) = gcp_forward(&FeatureMatrix::new(x.clone())?)?;
    let analytic = if opts.flip_k_sign {
        gcp_backward_with_mask(&ctx, dz, &ctx.k.scale(-1.0))?
    } else {
        gcp_backward(&ctx, dz)?
    };
    let numeric = finite_difference_grad(x, dz, opts.step)?;
    Ok(relative_error(analytic.values(), &numeric))
}

/// Runs `cases` seeded random checks.
pub fn run_gradcheck(seed: u64, cases: usize, opts: &GradcheckOptions) -> Vec<CaseReport> {
    let mut rng = seeded(seed);
    (0..cases)
        .map(|index| {
            let n = rng.gen_range(opts.n_range.0..=opts.n_range.1);
            let d = rng.gen_range(opts.d_range.0..=opts.d_range.1);
            let outcome = sample_case(&mut rng, n, d, opts.min_gap)
                .and_then(|(x, dz, gap)| check_case(&x, &dz, opts).map(|err| (gap, err)));
            match outcome {
                Ok((gap, rel_error)) => CaseReport {
                    index,
                    n,
                    d,
                    min_gap: gap,
                    rel_error,
                    passed: rel_error <= opts.tolerance,
                    failure: None,
                },
                Err(e) => CaseReport {
                    index,
                    n,
                    d,
                    min_gap: f64::NAN,
                    rel_error: f64::NAN,
                    passed: false,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_cases_pass() {
        let reports = run_gradcheck(11, 5, &GradcheckOptions::default());
        for r in &reports {
            assert!(r.passed, "{r:?}");
            assert!(r.d >= 3 && r.d <= 8 && r.n >= 8 && r.n <= 32);
            assert!(r.min_gap >= 0.05);
        }
    }

    #[test]
    fn flipped_mask_is_caught() {
        let opts = GradcheckOptions {
            flip_k_sign: true,
            ..Default::default()
        };
        for r in run_gradcheck(11, 5, &opts) {
            assert!(!r.passed, "{r:?}");
        }
    }

    #[test]
    fn scalar_case_is_tight() {
        let x = Mat::from_rows(&[&[2.0], &[0.0], &[-1.0]]).unwrap();
        let dz = SymMat::identity(1);
        let err = check_case(&x, &dz, &GradcheckOptions::default()).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn spectral_gap_counts_distance_from_zero() {
        assert_eq!(spectral_gap(&[3.0, 2.5, 0.2]), 0.2);
        assert_eq!(spectral_gap(&[3.0, 2.9, 1.0]), 3.0 - 2.9);
    }
}
