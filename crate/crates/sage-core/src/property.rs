//! Piecewise property model: one RBF GP per (property source, region),
//! mixed across regions by membership probabilities, observed under
//! per-source Gaussian noise.

use nalgebra::{DMatrix, DVector};

use crate::data::{PredictionGrid, PropertyDataset};
use crate::error::{Result, SageError};
use crate::kernels::{whitened_gp_sample, KernelParams};
use crate::segmentation::RegionField;

/// Parameters of one (property, region) GP: kernel hyperparameters (with the
/// constant `bias` mean) and the whitened sample vector.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PropertyRegionParams {
    pub kernel: KernelParams,
    pub whitened: Vec<f64>,
}

/// Parameters of one property source: per-region GPs plus the shared noise
/// scale (standard deviation).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PropertySourceParams {
    pub noise: f64,
    pub regions: Vec<PropertyRegionParams>,
}

/// `bias + L v` evaluated on the grid, for one (property, region) GP.
pub fn sample_region_gp(params: &PropertyRegionParams, chol_lower: &DMatrix<f64>) -> Result<DVector<f64>> {
    let g = chol_lower.nrows();
    let mean = DVector::from_element(g, params.kernel.bias);
    let v = DVector::from_column_slice(&params.whitened);
    whitened_gp_sample(&mean, chol_lower, &v)
}

/// `f(x_i) = sum_r components[r][i] * p_i(r)`: membership-weighted mixture of
/// region GPs at every grid point.
pub fn piecewise_mix(components: &[DVector<f64>], field: &RegionField) -> Result<DVector<f64>> {
    let r = field.regions();
    let g = field.len();
    if components.len() != r {
        return Err(SageError::Dimension(format!(
            "{} components for a field with {r} regions",
            components.len()
        )));
    }
    for (k, c) in components.iter().enumerate() {
        if c.len() != g {
            return Err(SageError::Dimension(format!(
                "component {k} has {} entries, grid has {g}",
                c.len()
            )));
        }
    }
    let mut out = DVector::zeros(g);
    for i in 0..g {
        let mut acc = 0.0;
        for (k, c) in components.iter().enumerate() {
            acc += c[i] * field.probs[(i, k)];
        }
        out[i] = acc;
    }
    Ok(out)
}

/// Property observations resolved to grid rows once.
#[derive(Clone, Debug)]
pub struct IndexedProperty {
    /// (grid row, observed value) per observation of one source.
    pub obs: Vec<(usize, f64)>,
}

pub fn index_property(ds: &PropertyDataset, grid: &PredictionGrid) -> Result<IndexedProperty> {
    let mut obs = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let coords: Vec<f64> = (0..ds.points.ncols()).map(|d| ds.points[(i, d)]).collect();
        let row = grid.index_of(&coords).ok_or_else(|| {
            SageError::Validation(format!(
                "property point {i} of source {} is not on the prediction grid",
                ds.source_id
            ))
        })?;
        obs.push((row, ds.values[i]));
    }
    Ok(IndexedProperty { obs })
}

const HALF_LN_2PI: f64 = 0.9189385332046727;

/// Gaussian log-likelihood of one source's observations against the mixed
/// function values: `sum_l [ -0.5 ln(2 pi n^2) - (y_l - f(x_l))^2 / (2 n^2) ]`.
pub fn property_log_likelihood_indexed(mixed: &DVector<f64>, indexed: &IndexedProperty, noise: f64) -> Result<f64> {
    if !(noise.is_finite() && noise > 0.0) {
        return Err(SageError::InvalidParameter(format!("noise must be positive, got {noise}")));
    }
    let var = noise * noise;
    let mut total = 0.0;
    for &(row, y) in &indexed.obs {
        let resid = y - mixed[row];
        total += -HALF_LN_2PI - noise.ln() - resid * resid / (2.0 * var);
    }
    Ok(total)
}

/// Piecewise property functions on the grid: per-region components and their
/// membership-weighted mixtures, one entry per property source.
#[derive(Clone, Debug)]
pub struct PiecewiseFunctions {
    /// `components[j][r]`: region-r GP of source j, length G.
    pub components: Vec<Vec<DVector<f64>>>,
    /// `mixed[j]`: mixture of source j's components under the field.
    pub mixed: Vec<DVector<f64>>,
}

impl PiecewiseFunctions {
    /// Builds all components (`bias + L v`) and mixtures for the given field.
    /// `chols[j][r]` are the per-(property, region) kernel Cholesky factors.
    pub fn assemble(
        params: &[PropertySourceParams],
        chols: &[Vec<DMatrix<f64>>],
        field: &RegionField,
    ) -> Result<Self> {
        let mut components = Vec::with_capacity(params.len());
        let mut mixed = Vec::with_capacity(params.len());
        for (j, src) in params.iter().enumerate() {
            let mut comps = Vec::with_capacity(src.regions.len());
            for (r, region) in src.regions.iter().enumerate() {
                comps.push(sample_region_gp(region, &chols[j][r])?);
            }
            mixed.push(piecewise_mix(&comps, field)?);
            components.push(comps);
        }
        Ok(PiecewiseFunctions { components, mixed })
    }
}

/// Total property log-likelihood over all sources.
pub fn property_log_likelihood(
    functions: &PiecewiseFunctions,
    params: &[PropertySourceParams],
    datasets: &[PropertyDataset],
    grid: &PredictionGrid,
) -> Result<f64> {
    if functions.mixed.len() != datasets.len() || params.len() != datasets.len() {
        return Err(SageError::Dimension(format!(
            "{} mixed functions / {} params for {} property datasets",
            functions.mixed.len(),
            params.len(),
            datasets.len()
        )));
    }
    let mut total = 0.0;
    for (j, ds) in datasets.iter().enumerate() {
        let indexed = index_property(ds, grid)?;
        total += property_log_likelihood_indexed(&functions.mixed[j], &indexed, params[j].noise)?;
    }
    Ok(total)
}

/// `L = L_s + L_p`; -inf from either side propagates (rejected sample).
pub fn total_log_likelihood(l_s: f64, l_p: f64) -> f64 {
    l_s + l_p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::kernels::{cholesky_with_jitter, rbf_kernel};
    use crate::segmentation::{region_field_1d, Changepoints1D, RegionField};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid_1d(xs: &[f64]) -> PredictionGrid {
        PredictionGrid {
            points: DMatrix::from_fn(xs.len(), 1, |i, _| xs[i]),
            resolution: vec![xs.len()],
        }
    }

    fn uniform_field(g: usize, r: usize) -> RegionField {
        RegionField { probs: DMatrix::from_element(g, r, 1.0 / r as f64) }
    }

    #[test]
    fn mix_one_hot_picks_component() {
        let dom = Domain::unit(1);
        let cp = Changepoints1D::new(vec![0.5], &dom).unwrap();
        let grid = grid_1d(&[0.25, 0.75]);
        let field = region_field_1d(&cp, &grid).unwrap();
        let c0 = DVector::from_vec(vec![1.0, 1.0]);
        let c1 = DVector::from_vec(vec![9.0, 9.0]);
        let mixed = piecewise_mix(&[c0, c1], &field).unwrap();
        assert_eq!(mixed[0], 1.0);
        assert_eq!(mixed[1], 9.0);
    }

    #[test]
    fn mix_uniform_averages() {
        let field = uniform_field(1, 2);
        let mixed = piecewise_mix(&[DVector::from_vec(vec![2.0]), DVector::from_vec(vec![4.0])], &field).unwrap();
        assert_abs_diff_eq!(mixed[0], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn mix_single_region_is_identity() {
        let field = uniform_field(3, 1);
        let c = DVector::from_vec(vec![5.0, -1.0, 0.25]);
        let mixed = piecewise_mix(std::slice::from_ref(&c), &field).unwrap();
        assert!((mixed - c).abs().max() <= 1e-15);
    }

    #[test]
    fn mix_rejects_wrong_arity() {
        let field = uniform_field(2, 2);
        assert!(piecewise_mix(&[DVector::zeros(2)], &field).is_err());
        assert!(piecewise_mix(&[DVector::zeros(3), DVector::zeros(3)], &field).is_err());
    }

    #[test]
    fn loglik_zero_residual_unit_noise() {
        let mixed = DVector::from_vec(vec![2.0]);
        let idx = IndexedProperty { obs: vec![(0, 2.0)] };
        let l = property_log_likelihood_indexed(&mixed, &idx, 1.0).unwrap();
        assert_abs_diff_eq!(l, -0.9189, epsilon = 1e-4);
        assert_abs_diff_eq!(l, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn loglik_matches_bruteforce_two_point_density() {
        // independent 2-D Gaussian density evaluated directly
        let mixed = DVector::from_vec(vec![1.0, -0.5]);
        let idx = IndexedProperty { obs: vec![(0, 1.4), (1, -0.1)] };
        let noise = 0.3;
        let l = property_log_likelihood_indexed(&mixed, &idx, noise).unwrap();
        let dens = |y: f64, m: f64| {
            (-((y - m) * (y - m)) / (2.0 * noise * noise)).exp()
                / (noise * (2.0 * std::f64::consts::PI).sqrt())
        };
        let brute = (dens(1.4, 1.0) * dens(-0.1, -0.5)).ln();
        assert_abs_diff_eq!(l, brute, epsilon = 1e-12);
    }

    #[test]
    fn loglik_decreases_with_residual() {
        let mixed = DVector::from_vec(vec![0.0]);
        let noise = 0.7;
        let mut last = f64::INFINITY;
        for resid in [0.0, 0.5, 1.0, 2.0, 5.0] {
            let idx = IndexedProperty { obs: vec![(0, resid)] };
            let l = property_log_likelihood_indexed(&mixed, &idx, noise).unwrap();
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn loglik_additive_over_source_split() {
        let xs = [0.1, 0.4, 0.8];
        let grid = grid_1d(&xs);
        let mixed = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let mk = |pts: &[f64], ys: &[f64]| {
            PropertyDataset::new(
                "p",
                DMatrix::from_fn(pts.len(), 1, |i, _| pts[i]),
                DVector::from_vec(ys.to_vec()),
            )
            .unwrap()
        };
        let noise = 0.4;
        let joint = mk(&[0.1, 0.4, 0.8], &[1.1, 2.2, 2.9]);
        let l_joint =
            property_log_likelihood_indexed(&mixed, &index_property(&joint, &grid).unwrap(), noise).unwrap();
        let a = mk(&[0.1], &[1.1]);
        let b = mk(&[0.4, 0.8], &[2.2, 2.9]);
        let l_split = property_log_likelihood_indexed(&mixed, &index_property(&a, &grid).unwrap(), noise).unwrap()
            + property_log_likelihood_indexed(&mixed, &index_property(&b, &grid).unwrap(), noise).unwrap();
        assert_abs_diff_eq!(l_joint, l_split, epsilon = 1e-10);
    }

    #[test]
    fn total_loglik_examples() {
        assert_eq!(total_log_likelihood(0.0, -3.0), -3.0);
        assert_eq!(total_log_likelihood(f64::NEG_INFINITY, -3.0), f64::NEG_INFINITY);
        assert_eq!(total_log_likelihood(-1.0, f64::NEG_INFINITY), f64::NEG_INFINITY);
    }

    #[test]
    fn region_gp_zero_whitened_is_constant_bias() {
        let xs = [0.0, 0.5, 1.0];
        let grid = grid_1d(&xs);
        let kernel = KernelParams::with_bias(vec![0.5], 1.0, 2.5).unwrap();
        let k = rbf_kernel(&grid.points, &grid.points, &kernel).unwrap();
        let chol = cholesky_with_jitter(&k, None).unwrap();
        let params = PropertyRegionParams { kernel, whitened: vec![0.0; 3] };
        let s = sample_region_gp(&params, &chol.lower).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(s[i], 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn region_gp_tiny_std_stays_near_bias() {
        let xs = [0.0, 0.5, 1.0];
        let grid = grid_1d(&xs);
        let kernel = KernelParams::with_bias(vec![0.5], 1e-6, -1.0).unwrap();
        let k = rbf_kernel(&grid.points, &grid.points, &kernel).unwrap();
        let chol = cholesky_with_jitter(&k, None).unwrap();
        let params = PropertyRegionParams { kernel, whitened: vec![3.0, -2.0, 1.0] };
        let s = sample_region_gp(&params, &chol.lower).unwrap();
        for i in 0..3 {
            assert!((s[i] + 1.0).abs() < 1e-3, "s[{i}] = {}", s[i]);
        }
    }

    #[test]
    fn single_region_likelihood_equals_plain_gp_likelihood() {
        // With R = 1 the piecewise machinery must reduce to a plain whitened
        // GP: same component, same mixture, same likelihood to 1e-10.
        let xs = [0.0, 0.3, 0.6, 1.0];
        let grid = grid_1d(&xs);
        let kernel = KernelParams::with_bias(vec![0.4], 1.2, 0.7).unwrap();
        let whitened = vec![0.5, -1.0, 2.0, 0.1];
        let k = rbf_kernel(&grid.points, &grid.points, &kernel).unwrap();
        let chol = cholesky_with_jitter(&k, None).unwrap();
        let params = vec![PropertySourceParams {
            noise: 0.25,
            regions: vec![PropertyRegionParams { kernel: kernel.clone(), whitened: whitened.clone() }],
        }];
        let field = uniform_field(4, 1);
        let funcs = PiecewiseFunctions::assemble(&params, &[vec![chol.lower.clone()]], &field).unwrap();
        let ds = PropertyDataset::new(
            "p",
            DMatrix::from_fn(4, 1, |i, _| xs[i]),
            DVector::from_vec(vec![0.9, 0.4, 1.5, 0.6]),
        )
        .unwrap();
        let l_piecewise =
            property_log_likelihood(&funcs, &params, std::slice::from_ref(&ds), &grid).unwrap();

        // independent oracle: direct bias + L v, then Gaussian log-density
        let mean = DVector::from_element(4, 0.7);
        let f = &mean + &chol.lower * DVector::from_vec(whitened);
        let mut oracle = 0.0;
        for i in 0..4 {
            let r: f64 = ds.values[i] - f[i];
            oracle += -0.5 * (2.0 * std::f64::consts::PI * 0.25f64 * 0.25).ln() - r * r / (2.0 * 0.25 * 0.25);
        }
        assert_abs_diff_eq!(l_piecewise, oracle, epsilon = 1e-10);
    }

    proptest! {
        #[test]
        fn mix_is_convex_combination(vals in proptest::collection::vec(-5.0f64..5.0, 6), w in 0.0f64..1.0) {
            let c0 = DVector::from_vec(vals[0..3].to_vec());
            let c1 = DVector::from_vec(vals[3..6].to_vec());
            let mut probs = DMatrix::zeros(3, 2);
            for i in 0..3 {
                probs[(i, 0)] = w;
                probs[(i, 1)] = 1.0 - w;
            }
            let field = RegionField { probs };
            let mixed = piecewise_mix(&[c0.clone(), c1.clone()], &field).unwrap();
            for i in 0..3 {
                let lo = c0[i].min(c1[i]);
                let hi = c0[i].max(c1[i]);
                prop_assert!(mixed[i] >= lo - 1e-12 && mixed[i] <= hi + 1e-12);
            }
        }

        #[test]
        fn loglik_additivity_random_splits(seed in 0u64..300) {
            use rand::{RngExt, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let n = 8;
            let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
            let grid = grid_1d(&xs);
            let mixed = DVector::<f64>::from_fn(n, |i, _| (i as f64).sin());
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let noise = rng.random_range(0.05..1.5);
            let cut = rng.random_range(1..n);
            let mk = |lo: usize, hi: usize| {
                PropertyDataset::new(
                    "p",
                    DMatrix::from_fn(hi - lo, 1, |i, _| xs[lo + i]),
                    DVector::from_vec(ys[lo..hi].to_vec()),
                )
                .unwrap()
            };
            let full = mk(0, n);
            let l_full = property_log_likelihood_indexed(&mixed, &index_property(&full, &grid).unwrap(), noise).unwrap();
            let l_parts = property_log_likelihood_indexed(&mixed, &index_property(&mk(0, cut), &grid).unwrap(), noise).unwrap()
                + property_log_likelihood_indexed(&mixed, &index_property(&mk(cut, n), &grid).unwrap(), noise).unwrap();
            prop_assert!((l_full - l_parts).abs() <= 1e-10);
        }
    }
}
