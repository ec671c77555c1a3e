//! Global average pooling (GAP) and global covariance pooling (GCP) heads.
//!
//! GCP pools an `N × D` feature matrix `X` into `Z = Σ^{1/2}` where
//! `Σ = Xᵀ J X` and `J = (1/N)(I − (1/N)11ᵀ)`. The square root is taken
//! through the eigendecomposition `Σ = U Λ Uᵀ`, and the backward pass
//! differentiates through that decomposition exactly:
//!
//! ```text
//! ∂L/∂U = 2 (∂L/∂Z)_sym U Λ^{1/2}
//! ∂L/∂Λ = ½ (Λ^{-1/2} Uᵀ ∂L/∂Z U)_diag
//! ∂L/∂Σ = U (Kᵀ ∘ (Uᵀ ∂L/∂U) + (∂L/∂Λ)_diag) Uᵀ
//! ∂L/∂X = 2 J X (∂L/∂Σ)_sym
//! ```
//!
//! with `K[i,j] = 1/(λ_i − λ_j)` off the diagonal.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{centering_matrix, diag_part, sym_eig, sym_part, EigenPair, Mat, SymMat, EIG_TOL};

/// Spatially flattened activations: one row per spatial position, one
/// column per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Mat);

impl FeatureMatrix {
    pub fn new(values: Mat) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return shape_err(format!(
                "feature matrix needs N >= 1 and D >= 1, got {:?}",
                values.shape()
            ));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("feature matrix"));
        }
        Ok(Self(values))
    }

    /// Spatial count `N`.
    pub fn n(&self) -> usize {
        self.0.rows()
    }

    /// Channel count `D`.
    pub fn d(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector(pub Vec<f64>);

impl PooledVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Length of the vectorized upper triangle of a `d × d` symmetric matrix.
pub fn sym_vec_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Everything the GCP backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct GcpContext {
    pub x: FeatureMatrix,
    pub j: Mat,
    pub sigma: SymMat,
    pub eig: EigenPair,
    pub k: Mat,
    pub z: SymMat,
    pub eps_lambda: f64,
    /// `true` where the eigenvalue fell below `eps_lambda`.
    pub clamped: Vec<bool>,
}

impl GcpContext {
    pub fn dim(&self) -> usize {
        self.eig.dim()
    }

    /// Number of eigenvalues treated as zero.
    pub fn clamped_count(&self) -> usize {
        self.clamped.iter().filter(|&&c| c).count()
    }

    fn sqrt_lambda(&self) -> Vec<f64> {
        self.eig.lambda.iter().map(|&l| l.max(0.0).sqrt()).collect()
    }

    /// `Λ^{-1/2}` with clamped entries set to zero.
    fn inv_sqrt_lambda(&self) -> Vec<f64> {
        self.eig
            .lambda
            .iter()
            .zip(&self.clamped)
            .map(|(&l, &c)| if c { 0.0 } else { 1.0 / l.sqrt() })
            .collect()
    }

    /// `2 J X`, shared by every backward variant.
    fn two_jx(&self) -> Mat {
        self.j
            .matmul(self.x.values())
            .expect("J is N x N")
            .scale(2.0)
    }
}

pub fn gap_forward(x: &FeatureMatrix, scale: f64) -> Result<PooledVector> {
    if !(scale > 0.0) {
        return Err(Error::Domain(format!("GAP scale must be > 0, got {scale}")));
    }
    let m = x.values();
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o *= scale);
    Ok(PooledVector(out))
}

/// Jacobian-transpose of [`gap_forward`]: every spatial row receives
/// `scale · gout`.
pub fn gap_backward(gout: &PooledVector, n: usize, scale: f64) -> Result<FeatureMatrix> {
    let d = gout.dim();
    FeatureMatrix::new(Mat::from_fn(n, d, |_, c| scale * gout.0[c]))
}

/// Returns `(Σ, J)` with `Σ = Xᵀ J X`.
pub fn covariance(x: &FeatureMatrix) -> Result<(SymMat, Mat)> {
    let j = centering_matrix(x.n())?;
    let jx = j.matmul(x.values())?;
    let sigma = x.values().t_matmul(&jx)?;
    Ok((SymMat::from_mat_symmetrized(sigma), j))
}

/// Default eigenvalue floor: `1e-10 · max(λ_max, 1e-300)`.
pub fn default_eps_lambda(lambda: &[f64]) -> f64 {
    let top = lambda.first().copied().unwrap_or(0.0);
    1e-10 * top.max(1e-300)
}

/// Default eigen-gap floor for [`build_k`]: `1e-10 · (1 + λ_max)`.
pub fn default_eps_gap(lambda: &[f64]) -> f64 {
    1e-10 * (1.0 + lambda.first().copied().unwrap_or(0.0))
}

/// `Z = U · max(Λ, 0)^{1/2} · Uᵀ`, returned together with the decomposition.
///
/// `eps_lambda` is validated here but only consumed by the backward pass.
pub fn matrix_sqrt(sigma: &SymMat, eps_lambda: f64) -> Result<(SymMat, EigenPair)> {
    if !(eps_lambda >= 0.0) {
        return Err(Error::Domain(format!("eps_lambda must be >= 0, got {eps_lambda}")));
    }
    let eig = sym_eig(sigma, EIG_TOL)?;
    let z = eig.reconstruct_with(|l| l.max(0.0).sqrt());
    Ok((SymMat::from_mat_symmetrized(z), eig))
}

/// Reciprocal eigen-gap mask `K[i,j] = 1/(λ_i − λ_j)`; zero on the diagonal
/// and wherever `|λ_i − λ_j| <= eps_gap`.
pub fn build_k(lambda: &[f64], eps_gap: f64) -> Mat {
    let n = lambda.len();
    Mat::from_fn(n, n, |i, j| {
        let gap = lambda[i] - lambda[j];
        if i != j && gap.abs() > eps_gap {
            1.0 / gap
        } else {
            0.0
        }
    })
}

/// Upper triangle in row-major order, off-diagonals scaled by `√2` so that
/// `⟨vec(A), vec(B)⟩ = ⟨A, B⟩_F`.
pub fn vectorize_sym(z: &SymMat) -> PooledVector {
    let d = z.dim();
    let mut out = Vec::with_capacity(sym_vec_len(d));
    for i in 0..d {
        out.push(z[(i, i)]);
        for j in i + 1..d {
            out.push(std::f64::consts::SQRT_2 * z[(i, j)]);
        }
    }
    PooledVector(out)
}

fn check_sym_len(len: usize, d: usize) -> Result<()> {
    if len != sym_vec_len(d) {
        return shape_err(format!(
            "vectorized symmetric matrix of dim {d} needs {} entries, got {len}",
            sym_vec_len(d)
        ));
    }
    Ok(())
}

/// Inverse of [`vectorize_sym`].
pub fn devectorize_sym(v: &PooledVector, d: usize) -> Result<SymMat> {
    check_sym_len(v.dim(), d)?;
    let mut m = Mat::zeros(d, d);
    let mut it = v.0.iter();
    for i in 0..d {
        m[(i, i)] = *it.next().expect("length checked");
        for j in i + 1..d {
            let x = it.next().expect("length checked") / std::f64::consts::SQRT_2;
            m[(i, j)] = x;
            m[(j, i)] = x;
        }
    }
    Ok(SymMat::from_mat_symmetrized(m))
}

/// Adjoint of [`vectorize_sym`]: maps a gradient on the vector back to the
/// symmetric matrix gradient (off-diagonals divided by `√2`, split evenly).
pub fn devectorize_grad(g: &PooledVector, d: usize) -> Result<SymMat> {
    // With the √2 convention the adjoint and the inverse coincide.
    devectorize_sym(g, d)
}

pub fn gcp_forward(x: &FeatureMatrix) -> Result<(PooledVector, GcpContext)> {
    let (sigma, j) = covariance(x)?;
    let eig = sym_eig(&sigma, EIG_TOL)?;
    let eps_lambda = default_eps_lambda(&eig.lambda);
    let z = SymMat::from_mat_symmetrized(eig.reconstruct_with(|l| l.max(0.0).sqrt()));
    let clamped: Vec<bool> = eig.lambda.iter().map(|&l| l < eps_lambda || l <= 0.0).collect();

    let mut k = build_k(&eig.lambda, default_eps_gap(&eig.lambda));
    let d = eig.dim();
    for (i, _) in clamped.iter().enumerate().filter(|(_, &c)| c) {
        for t in 0..d {
            k[(i, t)] = 0.0;
            k[(t, i)] = 0.0;
        }
    }

    let pooled = vectorize_sym(&z);
    Ok((
        pooled,
        GcpContext {
            x: x.clone(),
            j,
            sigma,
            eig,
            k,
            z,
            eps_lambda,
            clamped,
        },
    ))
}

fn check_grad_dim(ctx: &GcpContext, dz: &SymMat) -> Result<()> {
    if dz.dim() != ctx.dim() {
        return shape_err(format!(
            "upstream gradient is {0}x{0} but the context holds D = {1}",
            dz.dim(),
            ctx.dim()
        ));
    }
    Ok(())
}

/// Exact gradient of the loss with respect to `X` given `∂L/∂Z`.
pub fn gcp_backward(ctx: &GcpContext, dz: &SymMat) -> Result<FeatureMatrix> {
    gcp_backward_with_mask(ctx, dz, &ctx.k)
}

/// [`gcp_backward`] with an explicit eigen-gap mask in place of `ctx.k`.
/// Used by the gradient checker to confirm that a wrong mask is detected.
pub fn gcp_backward_with_mask(ctx: &GcpContext, dz: &SymMat, k: &Mat) -> Result<FeatureMatrix> {
    check_grad_dim(ctx, dz)?;
    if k.shape() != (ctx.dim(), ctx.dim()) {
        return shape_err("mask does not match the context dimension");
    }
    let g = sym_part(dz.as_mat())?.into_mat();
    let u = &ctx.eig.u;
    let ut = u.transpose();

    let dl_du = g.matmul(u)?.scale_columns(&ctx.sqrt_lambda())?.scale(2.0);
    let ut_g_u = ut.matmul(&g)?.matmul(u)?;
    let inv_sqrt = ctx.inv_sqrt_lambda();
    let dl_dlambda = diag_part(&Mat::from_fn(ctx.dim(), ctx.dim(), |i, j| {
        0.5 * inv_sqrt[i] * ut_g_u[(i, j)]
    }))?;

    let inner = k
        .transpose()
        .hadamard(&ut.matmul(&dl_du)?)?
        .add(&dl_dlambda)?;
    let dl_dsigma = u.matmul(&inner)?.matmul(&ut)?;
    let dx = ctx.two_jx().matmul(sym_part(&dl_dsigma)?.as_mat())?;
    FeatureMatrix::new(dx)
}

/// The Hadamard term `2Kᵀ ∘ Λ^{1/2}` of the trimmed gradient.
///
/// `K` has a zero diagonal and `Λ^{1/2}` is diagonal, so this is the zero
/// matrix for every input; it is still evaluated literally.
pub fn trimmed_hadamard_term(ctx: &GcpContext) -> Mat {
    let sqrt_l = Mat::from_diag(&ctx.sqrt_lambda());
    ctx.k
        .transpose()
        .scale(2.0)
        .hadamard(&sqrt_l)
        .expect("K and Λ share dimensions")
}

/// `2Kᵀ ∘ Λ^{1/2} + U(½Λ^{-1/2})Uᵀ`, the `D × D` coefficient of the trimmed
/// gradient.
fn trimmed_coefficient(ctx: &GcpContext) -> Mat {
    let inv_sqrt = ctx.inv_sqrt_lambda();
    let half_inv = ctx.eig.reconstruct_with_values(&inv_sqrt, 0.5);
    trimmed_hadamard_term(ctx)
        .add(&half_inv)
        .expect("same dimensions")
}

/// Simplified gradient `2JX(2Kᵀ∘Λ^{1/2} + ½Λ^{-1/2}) ∂L/∂Z`.
///
/// Because the Hadamard term vanishes this equals `JX · U Λ^{-1/2} Uᵀ · ∂L/∂Z`;
/// it matches [`gcp_backward`] exactly only when `D = 1` or when `Σ` and
/// `∂L/∂Z` are simultaneously diagonal.
pub fn gcp_backward_trimmed(ctx: &GcpContext, dz: &SymMat) -> Result<FeatureMatrix> {
    check_grad_dim(ctx, dz)?;
    let g = sym_part(dz.as_mat())?.into_mat();
    let dx = ctx.two_jx().matmul(&trimmed_coefficient(ctx))?.matmul(&g)?;
    FeatureMatrix::new(dx)
}

/// `η · 2JX(2Kᵀ∘Λ^{1/2} + ½Λ^{-1/2})`, the `N × D` preconditioning factor
/// that maps `∂L/∂Z` to the trimmed gradient.
pub fn preconditioner_factor(ctx: &GcpContext, eta: f64) -> Result<Mat> {
    if !(eta >= 0.0) {
        return Err(Error::Domain(format!("eta must be >= 0, got {eta}")));
    }
    Ok(ctx.two_jx().matmul(&trimmed_coefficient(ctx))?.scale(eta))
}

/// Cosine similarity between the trimmed and the exact gradients.
pub fn trimmed_cosine(ctx: &GcpContext, dz: &SymMat) -> Result<f64> {
    let full = gcp_backward(ctx, dz)?.into_mat();
    let trimmed = gcp_backward_trimmed(ctx, dz)?.into_mat();
    let denom = full.frobenius_norm() * trimmed.frobenius_norm();
    if denom == 0.0 {
        return Ok(if full.frobenius_norm() == trimmed.frobenius_norm() { 1.0 } else { 0.0 });
    }
    Ok(full.dot(&trimmed)? / denom)
}

impl EigenPair {
    /// `U · diag(scale · values) · Uᵀ`.
    pub(crate) fn reconstruct_with_values(&self, values: &[f64], scale: f64) -> Mat {
        let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
        self.u
            .scale_columns(&scaled)
            .and_then(|us| us.matmul(&self.u.transpose()))
            .expect("square eigenvector matrix")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::new(Mat::from_rows(rows).unwrap()).unwrap()
    }

    fn sym(rows: &[&[f64]]) -> SymMat {
        SymMat::new(Mat::from_rows(rows).unwrap()).unwrap()
    }

    fn assert_mat_close(a: &Mat, b: &Mat, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        let err = a.sub(b).unwrap().max_abs();
        assert!(err <= tol, "max abs diff {err} > {tol}\n{a:?}\n{b:?}");
    }

    #[test]
    fn gap_forward_examples() {
        let x = fm(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(gap_forward(&x, 0.5).unwrap().0, vec![2.0, 3.0]);
        assert_eq!(gap_forward(&x, 1.0).unwrap().0, vec![4.0, 6.0]);
        let zeros = FeatureMatrix::new(Mat::zeros(3, 2)).unwrap();
        assert_eq!(gap_forward(&zeros, 1.0 / 3.0).unwrap().0, vec![0.0, 0.0]);
        assert!(gap_forward(&x, 0.0).is_err());
    }

    #[test]
    fn gap_backward_examples() {
        let dx = gap_backward(&PooledVector(vec![1.0, 0.0]), 2, 1.0).unwrap();
        assert_eq!(dx.values(), &Mat::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap());
        let dx = gap_backward(&PooledVector(vec![0.0, 0.0]), 3, 0.5).unwrap();
        assert_eq!(dx.values(), &Mat::zeros(3, 2));
    }

    #[test]
    fn gap_backward_matches_finite_differences() {
        let x = fm(&[&[0.3, -1.2, 2.0], &[1.1, 0.4, -0.7], &[0.0, 0.9, 0.25]]);
        let w = [0.7, -0.3, 1.9];
        let scale = 1.0 / 3.0;
        let loss = |m: &Mat| {
            let p = gap_forward(&FeatureMatrix::new(m.clone()).unwrap(), scale).unwrap();
            p.0.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let dx = gap_backward(&PooledVector(w.to_vec()), 3, scale).unwrap();
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..3 {
                let mut plus = x.values().clone();
                plus[(r, c)] += h;
                let mut minus = x.values().clone();
                minus[(r, c)] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!((fd - dx.values()[(r, c)]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn covariance_examples() {
        let (s, _) = covariance(&fm(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]])).unwrap();
        assert!(s.as_mat().max_abs() <= 1e-15);

        let (s, j) = covariance(&fm(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_mat_close(
            s.as_mat(),
            &Mat::from_rows(&[&[0.25, -0.25], &[-0.25, 0.25]]).unwrap(),
            1e-15,
        );
        assert_eq!(j, centering_matrix(2).unwrap());

        let (s, _) = covariance(&fm(&[&[2.0, 0.0], &[0.0, 0.0]])).unwrap();
        assert_mat_close(
            s.as_mat(),
            &Mat::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap(),
            1e-15,
        );
    }

    #[test]
    fn matrix_sqrt_examples() {
        let (z, _) = matrix_sqrt(&SymMat::identity(3), 0.0).unwrap();
        assert_mat_close(z.as_mat(), &Mat::identity(3), 1e-15);

        let (z, _) = matrix_sqrt(&SymMat::from_diag(&[4.0, 9.0]), 0.0).unwrap();
        assert_mat_close(z.as_mat(), &Mat::from_diag(&[2.0, 3.0]), 1e-15);

        let (z, _) = matrix_sqrt(&sym(&[&[2.0, 1.0], &[1.0, 2.0]]), 0.0).unwrap();
        let r3 = 3f64.sqrt();
        let expected = Mat::from_rows(&[
            &[(r3 + 1.0) / 2.0, (r3 - 1.0) / 2.0],
            &[(r3 - 1.0) / 2.0, (r3 + 1.0) / 2.0],
        ])
        .unwrap();
        assert_mat_close(z.as_mat(), &expected, 1e-14);
        let squared = z.as_mat().matmul(z.as_mat()).unwrap();
        assert_mat_close(&squared, &Mat::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap(), 1e-14);

        assert!(matrix_sqrt(&SymMat::identity(2), -1.0).is_err());
    }

    #[test]
    fn k_examples() {
        assert_eq!(
            build_k(&[3.0, 1.0], 1e-10),
            Mat::from_rows(&[&[0.0, 0.5], &[-0.5, 0.0]]).unwrap()
        );
        assert_eq!(build_k(&[2.0, 2.0], 1e-10), Mat::zeros(2, 2));
        assert_eq!(build_k(&[5.0], 1e-10), Mat::zeros(1, 1));
    }

    #[test]
    fn vectorize_examples() {
        assert_eq!(vectorize_sym(&SymMat::identity(2)).0, vec![1.0, 0.0, 1.0]);
        let v = vectorize_sym(&sym(&[&[1.0, 2.0], &[2.0, 3.0]]));
        assert_eq!(v.0, vec![1.0, 2.0 * std::f64::consts::SQRT_2, 3.0]);
        assert!(devectorize_grad(&v, 3).is_err());
    }

    #[test]
    fn gcp_forward_identity_features() {
        let (pooled, ctx) = gcp_forward(&fm(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let s = 0.5f64.sqrt() * 0.5;
        let expected = Mat::from_rows(&[&[s, -s], &[-s, s]]).unwrap();
        assert_mat_close(ctx.z.as_mat(), &expected, 1e-8);
        assert!((ctx.eig.lambda[0] - 0.5).abs() < 1e-15);
        assert_eq!(ctx.clamped, vec![false, true]);
        assert_eq!(pooled.dim(), 3);
        assert!((s - 0.35355).abs() < 1e-4);
    }

    #[test]
    fn gcp_forward_constant_rows_is_zero() {
        let (pooled, ctx) = gcp_forward(&fm(&[&[1.0, -2.0], &[1.0, -2.0]])).unwrap();
        assert!(pooled.0.iter().all(|&v| v == 0.0));
        assert_eq!(ctx.clamped_count(), 2);
        // single sample, allowed
        let (pooled, ctx) = gcp_forward(&fm(&[&[3.0, 4.0]])).unwrap();
        assert!(pooled.0.iter().all(|&v| v == 0.0));
        assert_eq!(ctx.clamped_count(), 2);
    }

    #[test]
    fn gcp_backward_scalar_case() {
        let (_, ctx) = gcp_forward(&fm(&[&[2.0], &[0.0]])).unwrap();
        let dz = SymMat::identity(1);
        let expected = Mat::from_rows(&[&[0.5], &[-0.5]]).unwrap();
        let full = gcp_backward(&ctx, &dz).unwrap();
        let trimmed = gcp_backward_trimmed(&ctx, &dz).unwrap();
        assert_mat_close(full.values(), &expected, 1e-15);
        assert_eq!(full.values(), trimmed.values());
    }

    #[test]
    fn gcp_backward_zero_and_shape_errors() {
        let (_, ctx) = gcp_forward(&fm(&[&[2.0, 1.0], &[0.0, -1.0], &[1.0, 3.0]])).unwrap();
        let zero = SymMat::new(Mat::zeros(2, 2)).unwrap();
        assert_eq!(gcp_backward(&ctx, &zero).unwrap().values(), &Mat::zeros(3, 2));
        assert_eq!(gcp_backward_trimmed(&ctx, &zero).unwrap().values(), &Mat::zeros(3, 2));
        assert!(matches!(
            gcp_backward(&ctx, &SymMat::identity(3)),
            Err(Error::Shape(_))
        ));
        assert!(gcp_backward_trimmed(&ctx, &SymMat::identity(1)).is_err());
    }

    #[test]
    fn preconditioner_scalar_and_zero() {
        let (_, ctx) = gcp_forward(&fm(&[&[2.0], &[0.0]])).unwrap();
        let f = preconditioner_factor(&ctx, 1.0).unwrap();
        assert_mat_close(&f, &Mat::from_rows(&[&[0.5], &[-0.5]]).unwrap(), 1e-15);
        assert_eq!(preconditioner_factor(&ctx, 0.0).unwrap(), Mat::zeros(2, 1));
    }

    #[test]
    fn hadamard_term_vanishes() {
        let (_, ctx) =
            gcp_forward(&fm(&[&[2.0, 1.0, 0.0], &[0.0, -1.0, 1.0], &[1.0, 3.0, 2.0], &[0.5, 0.0, -1.0]]))
                .unwrap();
        assert_eq!(trimmed_hadamard_term(&ctx), Mat::zeros(3, 3));
        for i in 0..3 {
            assert_eq!(ctx.k[(i, i)], 0.0);
        }
    }
}
