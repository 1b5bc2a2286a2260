//! Covariance kernels and whitened Gaussian process sampling.
//!
//! Both kernels use per-dimension (ARD) lengthscales: differences are scaled
//! coordinate-wise before the radial form is applied. For Matérn 5/2 the
//! radius is the Euclidean norm of the scaled differences.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SageError};

/// Stationary kernel hyperparameters. `bias` is a constant mean used by the
/// property model (zero for the segmentation latents); it does not enter the
/// covariance.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub std: f64,
    pub bias: f64,
}

impl KernelParams {
    pub fn new(lengthscales: Vec<f64>, std: f64) -> Result<Self> {
        Self::with_bias(lengthscales, std, 0.0)
    }

    pub fn with_bias(lengthscales: Vec<f64>, std: f64, bias: f64) -> Result<Self> {
        let p = KernelParams { lengthscales, std, bias };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(SageError::InvalidParameter("lengthscales must be non-empty".into()));
        }
        for (d, l) in self.lengthscales.iter().enumerate() {
            if !(l.is_finite() && *l > 0.0) {
                return Err(SageError::InvalidParameter(format!(
                    "lengthscale[{d}] must be finite and positive, got {l}"
                )));
            }
        }
        if !(self.std.is_finite() && self.std > 0.0) {
            return Err(SageError::InvalidParameter(format!(
                "std must be finite and positive, got {}",
                self.std
            )));
        }
        if !self.bias.is_finite() {
            return Err(SageError::InvalidParameter(format!("bias must be finite, got {}", self.bias)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }
}

fn check_inputs(a: &DMatrix<f64>, b: &DMatrix<f64>, params: &KernelParams) -> Result<()> {
    params.validate()?;
    if a.ncols() != params.dim() || b.ncols() != params.dim() {
        return Err(SageError::Dimension(format!(
            "kernel inputs have {} and {} columns, params expect {}",
            a.ncols(),
            b.ncols(),
            params.dim()
        )));
    }
    Ok(())
}

/// Squared scaled distance between row `i` of `a` and row `j` of `b`.
#[inline]
fn scaled_sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize, ls: &[f64]) -> f64 {
    let mut s = 0.0;
    for (d, l) in ls.iter().enumerate() {
        let z = (a[(i, d)] - b[(j, d)]) / l;
        s += z * z;
    }
    s
}

/// RBF (squared exponential): `std^2 * exp(-0.5 * sum_d ((a_d-b_d)/l_d)^2)`.
pub fn rbf_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>> {
    check_inputs(a, b, params)?;
    let var = params.std * params.std;
    let ls = &params.lengthscales;
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        var * (-0.5 * scaled_sq_dist(a, i, b, j, ls)).exp()
    }))
}

/// Matérn 5/2: `std^2 * (1 + sqrt5 r + 5r^2/3) * exp(-sqrt5 r)` with
/// `r` the Euclidean norm of per-dimension scaled differences.
pub fn matern52_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>> {
    check_inputs(a, b, params)?;
    let var = params.std * params.std;
    let ls = &params.lengthscales;
    let sqrt5 = 5.0_f64.sqrt();
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let r = scaled_sq_dist(a, i, b, j, ls).sqrt();
        var * (1.0 + sqrt5 * r + 5.0 * r * r / 3.0) * (-sqrt5 * r).exp()
    }))
}

/// Cholesky factor of a (near-)PSD matrix with escalating diagonal jitter.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    /// Lower-triangular factor of `k + jitter * I`.
    pub lower: DMatrix<f64>,
    /// Jitter actually used (0 when the plain factorization succeeds).
    pub jitter: f64,
}

/// Default jitter base: 1e-6 relative to the mean diagonal magnitude.
pub fn default_base_jitter(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows();
    if n == 0 {
        return 1e-6;
    }
    let mean_diag = (0..n).map(|i| k[(i, i)].abs()).sum::<f64>() / n as f64;
    if mean_diag > 0.0 {
        1e-6 * mean_diag
    } else {
        1e-6
    }
}

/// Attempts Cholesky of `k + eps*I` for `eps` in `{0, base*10^0, .., base*10^6}`,
/// returning the first success. `base_jitter = None` uses [`default_base_jitter`].
pub fn cholesky_with_jitter(k: &DMatrix<f64>, base_jitter: Option<f64>) -> Result<JitteredCholesky> {
    if k.nrows() != k.ncols() {
        return Err(SageError::Dimension(format!(
            "Cholesky requires a square matrix, got {}x{}",
            k.nrows(),
            k.ncols()
        )));
    }
    if k.is_empty() {
        return Err(SageError::Dimension("Cholesky requires a non-empty matrix".into()));
    }
    let base = base_jitter.unwrap_or_else(|| default_base_jitter(k));
    if !(base.is_finite() && base > 0.0) {
        return Err(SageError::InvalidParameter(format!(
            "base jitter must be finite and positive, got {base}"
        )));
    }
    let mut max_tried = 0.0_f64;
    for attempt in 0..8 {
        let eps = if attempt == 0 { 0.0 } else { base * 10f64.powi(attempt - 1) };
        max_tried = eps;
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += eps;
        }
        if let Some(chol) = nalgebra::Cholesky::new(kj) {
            return Ok(JitteredCholesky { lower: chol.unpack(), jitter: eps });
        }
    }
    Err(SageError::Cholesky { max_jitter: max_tried })
}

/// `mean + L v`: deterministic map from a whitened vector to a GP sample.
pub fn whitened_gp_sample(mean: &DVector<f64>, lower: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    let n = lower.nrows();
    if lower.ncols() != n || mean.len() != n || v.len() != n {
        return Err(SageError::Dimension(format!(
            "whitened sample dims: mean {}, chol {}x{}, v {}",
            mean.len(),
            lower.nrows(),
            lower.ncols(),
            v.len()
        )));
    }
    let mut out = mean.clone();
    // L is lower-triangular: accumulate L*v without touching the upper part.
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..=i {
            acc += lower[(i, j)] * v[j];
        }
        out[i] += acc;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn mat(rows: usize, cols: usize, vals: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, vals)
    }

    fn unit_params(d: usize) -> KernelParams {
        KernelParams::new(vec![1.0; d], 1.0).unwrap()
    }

    #[test]
    fn rbf_zero_distance_gives_variance() {
        let a = mat(1, 1, &[0.3]);
        let p = KernelParams::new(vec![0.7], 1.5).unwrap();
        let k = rbf_kernel(&a, &a, &p).unwrap();
        assert_abs_diff_eq!(k[(0, 0)], 1.5 * 1.5, epsilon = 1e-15);
    }

    #[test]
    fn rbf_unit_separation() {
        let a = mat(1, 1, &[0.0]);
        let b = mat(1, 1, &[1.0]);
        let k = rbf_kernel(&a, &b, &unit_params(1)).unwrap();
        assert_relative_eq!(k[(0, 0)], (-0.5f64).exp(), max_relative = 1e-12);
        assert_abs_diff_eq!(k[(0, 0)], 0.60653, epsilon = 1e-5);
    }

    #[test]
    fn matern52_closed_form_at_unit_radius() {
        let a = mat(1, 2, &[0.0, 0.0]);
        // scaled distance 1: per-dim offsets (0.6, 0.8) with unit lengthscales
        let b = mat(1, 2, &[0.6, 0.8]);
        let k = matern52_kernel(&a, &b, &unit_params(2)).unwrap();
        let s5 = 5.0f64.sqrt();
        let expected = (1.0 + s5 + 5.0 / 3.0) * (-s5).exp();
        assert_relative_eq!(k[(0, 0)], expected, max_relative = 1e-12);
        assert_abs_diff_eq!(k[(0, 0)], 0.52399, epsilon = 1e-5);
    }

    #[test]
    fn kernels_reject_bad_params() {
        let a = mat(1, 1, &[0.0]);
        assert!(KernelParams::new(vec![0.0], 1.0).is_err());
        assert!(KernelParams::new(vec![1.0], -1.0).is_err());
        assert!(KernelParams::new(vec![], 1.0).is_err());
        let p = unit_params(2);
        // 1-column input against 2-dim params
        assert!(rbf_kernel(&a, &a, &p).is_err());
        assert!(matern52_kernel(&a, &a, &p).is_err());
    }

    #[test]
    fn cholesky_identity_needs_no_jitter() {
        let k = DMatrix::<f64>::identity(4, 4);
        let c = cholesky_with_jitter(&k, None).unwrap();
        assert_eq!(c.jitter, 0.0);
        assert_abs_diff_eq!((c.lower.clone() - DMatrix::<f64>::identity(4, 4)).abs().max(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn cholesky_known_factor() {
        let k = mat(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let c = cholesky_with_jitter(&k, None).unwrap();
        assert_eq!(c.jitter, 0.0);
        let expected = mat(2, 2, &[2.0, 0.0, 1.0, 2.0f64.sqrt()]);
        assert_abs_diff_eq!((c.lower.clone() - expected).abs().max(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cholesky_rank_deficient_duplicate_points_roundtrip() {
        // Duplicated input points make an RBF Gram matrix exactly singular.
        let pts = mat(3, 1, &[0.2, 0.2, 0.9]);
        let k = rbf_kernel(&pts, &pts, &unit_params(1)).unwrap();
        assert!(nalgebra::Cholesky::new(k.clone()).is_none() || k[(0, 1)] < 1.0); // singular without jitter (or fp luck)
        let c = cholesky_with_jitter(&k, None).unwrap();
        let recon = &c.lower * c.lower.transpose();
        let mut target = k.clone();
        for i in 0..3 {
            target[(i, i)] += c.jitter;
        }
        assert!((recon - target).abs().max() <= 1e-8);
    }

    #[test]
    fn cholesky_roundtrip_random_psd_n200() {
        // K = A A^T + tiny ridge, n = 200: reconstruction within 1e-8 of K + eps I.
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(42);
        let n = 200;
        let a = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        let k = &a * a.transpose();
        let c = cholesky_with_jitter(&k, None).unwrap();
        let recon = &c.lower * c.lower.transpose();
        let mut target = k.clone();
        for i in 0..n {
            target[(i, i)] += c.jitter;
        }
        let scale = k.abs().max().max(1.0);
        assert!((recon - target).abs().max() / scale <= 1e-8);
    }

    #[test]
    fn cholesky_rejects_non_square_and_hopeless() {
        assert!(cholesky_with_jitter(&DMatrix::zeros(2, 3), None).is_err());
        // -I stays non-PD under any positive jitter in the ladder
        let neg = DMatrix::<f64>::identity(3, 3) * -10.0;
        let err = cholesky_with_jitter(&neg, Some(1e-6)).unwrap_err();
        assert!(matches!(err, SageError::Cholesky { .. }));
    }

    #[test]
    fn whitened_sample_zero_v_returns_mean() {
        let mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let l = DMatrix::<f64>::identity(3, 3);
        let v = DVector::zeros(3);
        let s = whitened_gp_sample(&mean, &l, &v).unwrap();
        assert_abs_diff_eq!((s - mean).abs().max(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn whitened_sample_identity_chol_returns_v_plus_mean() {
        let mean = DVector::zeros(3);
        let l = DMatrix::<f64>::identity(3, 3);
        let v = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let s = whitened_gp_sample(&mean, &l, &v).unwrap();
        assert_abs_diff_eq!((s - v).abs().max(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn whitened_sample_monte_carlo_covariance_matches_kernel() {
        // Empirical covariance of mean + L v over 1e5 standard-normal draws
        // reproduces K within 5% relative Frobenius error.
        let pts = mat(4, 1, &[0.0, 0.4, 1.1, 2.0]);
        let p = KernelParams::new(vec![0.6], 1.3).unwrap();
        let k = rbf_kernel(&pts, &pts, &p).unwrap();
        let c = cholesky_with_jitter(&k, None).unwrap();
        let mean = DVector::from_vec(vec![0.5, -0.2, 0.0, 1.0]);
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let n_draws = 100_000;
        let mut sum = DVector::<f64>::zeros(4);
        let mut sum_outer = DMatrix::<f64>::zeros(4, 4);
        for _ in 0..n_draws {
            let v = DVector::<f64>::from_fn(4, |_, _| StandardNormal.sample(&mut rng));
            let s = whitened_gp_sample(&mean, &c.lower, &v).unwrap();
            sum += &s;
            sum_outer += &s * s.transpose();
        }
        let m = sum / n_draws as f64;
        let cov = sum_outer / n_draws as f64 - &m * m.transpose();
        let diff_f = (cov - &k).norm();
        assert!(diff_f / k.norm() < 0.05, "relative Frobenius error {}", diff_f / k.norm());
    }

    proptest! {
        #[test]
        fn rbf_symmetric_and_bounded(xs in proptest::collection::vec(-5.0f64..5.0, 2..8),
                                     l in 0.1f64..3.0, s in 0.1f64..3.0) {
            let n = xs.len();
            let a = DMatrix::from_fn(n, 1, |i, _| xs[i]);
            let p = KernelParams::new(vec![l], s).unwrap();
            let k = rbf_kernel(&a, &a, &p).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((k[(i, j)] - k[(j, i)]).abs() <= 1e-12 * s * s);
                    prop_assert!(k[(i, j)] <= s * s + 1e-12);
                }
                prop_assert!((k[(i, i)] - s * s).abs() <= 1e-12 * s * s);
            }
        }

        #[test]
        fn matern_translation_invariant(x in -3.0f64..3.0, y in -3.0f64..3.0, t in -2.0f64..2.0,
                                        l in 0.2f64..2.0) {
            let p = KernelParams::new(vec![l], 1.0).unwrap();
            let a = DMatrix::from_row_slice(1, 1, &[x]);
            let b = DMatrix::from_row_slice(1, 1, &[y]);
            let at = DMatrix::from_row_slice(1, 1, &[x + t]);
            let bt = DMatrix::from_row_slice(1, 1, &[y + t]);
            let k0 = matern52_kernel(&a, &b, &p).unwrap()[(0, 0)];
            let k1 = matern52_kernel(&at, &bt, &p).unwrap()[(0, 0)];
            prop_assert!((k0 - k1).abs() <= 1e-10);
        }

        #[test]
        fn whitened_sample_linear_in_v(v1 in proptest::collection::vec(-2.0f64..2.0, 3),
                                       v2 in proptest::collection::vec(-2.0f64..2.0, 3),
                                       alpha in -2.0f64..2.0) {
            let pts = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.4]);
            let p = KernelParams::new(vec![0.8], 1.1).unwrap();
            let k = rbf_kernel(&pts, &pts, &p).unwrap();
            let c = cholesky_with_jitter(&k, None).unwrap();
            let zero = DVector::zeros(3);
            let va = DVector::from_vec(v1.clone());
            let vb = DVector::from_vec(v2.clone());
            let sa = whitened_gp_sample(&zero, &c.lower, &va).unwrap();
            let sb = whitened_gp_sample(&zero, &c.lower, &vb).unwrap();
            let combo = whitened_gp_sample(&zero, &c.lower, &(va * alpha + &vb)).unwrap();
            let direct = sa * alpha + sb;
            prop_assert!((combo - direct).abs().max() <= 1e-10);
        }

        #[test]
        fn cholesky_roundtrip_random_psd(seed in 0u64..1000, n in 2usize..24) {
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let a = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
            let k = &a * a.transpose();
            let c = cholesky_with_jitter(&k, None).unwrap();
            let recon = &c.lower * c.lower.transpose();
            let mut target = k.clone();
            for i in 0..n {
                target[(i, i)] += c.jitter;
            }
            let scale = k.abs().max().max(1.0);
            prop_assert!((recon - target).abs().max() / scale <= 1e-8);
        }
    }
}
