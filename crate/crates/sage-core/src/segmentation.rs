//! Region membership over the prediction grid.
//!
//! 1-D: R-1 sorted changepoints induce a hard (one-hot) assignment; a point
//! exactly on a changepoint belongs to the lower region, so region index =
//! number of changepoints strictly below x. N-D: R latent functions on the
//! grid pass through a row-wise softmax, giving soft memberships.

use nalgebra::{DMatrix, DVector};

use crate::data::{Domain, PredictionGrid, StructureDataset};
use crate::error::{Result, SageError};

/// Sorted 1-D changepoints (strictly increasing, inside the domain interior).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Changepoints1D {
    pub values: Vec<f64>,
}

impl Changepoints1D {
    pub fn new(values: Vec<f64>, domain: &Domain) -> Result<Self> {
        if domain.dim() != 1 {
            return Err(SageError::Validation("changepoints require a 1-D domain".into()));
        }
        let cp = Changepoints1D { values };
        cp.check(domain)?;
        Ok(cp)
    }

    /// Strictly increasing and strictly inside the domain.
    pub fn check(&self, domain: &Domain) -> Result<()> {
        let b = domain.bounds[0];
        for (i, v) in self.values.iter().enumerate() {
            if !(v.is_finite() && *v > b.lo && *v < b.hi) {
                return Err(SageError::Validation(format!(
                    "changepoint {i} = {v} outside domain interior ({}, {})",
                    b.lo, b.hi
                )));
            }
            if i > 0 && self.values[i - 1] >= *v {
                return Err(SageError::Validation(format!(
                    "changepoints must be strictly increasing, got {} then {v}",
                    self.values[i - 1]
                )));
            }
        }
        Ok(())
    }

    /// True when the ordering/interior constraints hold (proposal screening).
    pub fn is_valid(&self, domain: &Domain) -> bool {
        self.check(domain).is_ok()
    }

    pub fn regions(&self) -> usize {
        self.values.len() + 1
    }
}

/// Region index of `x`: count of changepoints strictly below x, so a point
/// exactly on a changepoint falls in the lower region.
pub fn membership_1d(cp: &Changepoints1D, x: f64) -> usize {
    cp.values.iter().filter(|&&c| c < x).count()
}

/// Per-point region probabilities on the grid (rows sum to 1).
#[derive(Clone, Debug, PartialEq)]
pub struct RegionField {
    /// G x R row-stochastic matrix.
    pub probs: DMatrix<f64>,
}

impl RegionField {
    pub fn regions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    /// Shannon entropy of row `i`, with 0 ln 0 = 0. Range [0, ln R].
    pub fn entropy(&self, i: usize) -> f64 {
        let mut h = 0.0;
        for r in 0..self.regions() {
            let p = self.probs[(i, r)];
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        h
    }
}

/// One-hot region field from 1-D changepoints.
pub fn region_field_1d(cp: &Changepoints1D, grid: &PredictionGrid) -> Result<RegionField> {
    if grid.dim() != 1 {
        return Err(SageError::Dimension(format!(
            "1-D region field on a {}-dimensional grid",
            grid.dim()
        )));
    }
    let r = cp.regions();
    let mut probs = DMatrix::zeros(grid.len(), r);
    for i in 0..grid.len() {
        probs[(i, membership_1d(cp, grid.points[(i, 0)]))] = 1.0;
    }
    Ok(RegionField { probs })
}

/// Row-wise stable softmax of latent values (G x R). Invariant to adding a
/// constant to a row; saturates without NaN for extreme inputs.
pub fn softmax_region_field(values: &DMatrix<f64>) -> RegionField {
    let (g, r) = (values.nrows(), values.ncols());
    let mut probs = DMatrix::zeros(g, r);
    for i in 0..g {
        let mut m = f64::NEG_INFINITY;
        for k in 0..r {
            m = m.max(values[(i, k)]);
        }
        let mut z = 0.0;
        for k in 0..r {
            let e = (values[(i, k)] - m).exp();
            probs[(i, k)] = e;
            z += e;
        }
        for k in 0..r {
            probs[(i, k)] /= z;
        }
    }
    RegionField { probs }
}

/// Latent values `M[:, r] = L v_r` for whitened vectors against a shared
/// Cholesky factor of the segmentation kernel.
pub fn latent_values(chol_lower: &DMatrix<f64>, whitened: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let g = chol_lower.nrows();
    let mut m = DMatrix::zeros(g, whitened.len());
    let zero = DVector::zeros(g);
    for (r, v) in whitened.iter().enumerate() {
        let col = crate::kernels::whitened_gp_sample(&zero, chol_lower, v)?;
        m.set_column(r, &col);
    }
    Ok(m)
}

/// Structure observations resolved to grid rows once, for the MCMC hot loop.
#[derive(Clone, Debug)]
pub struct IndexedStructure {
    /// (grid row, label) per observation, concatenated over sources.
    pub obs: Vec<(usize, usize)>,
}

pub fn index_structure(datasets: &[StructureDataset], grid: &PredictionGrid) -> Result<IndexedStructure> {
    let mut obs = Vec::new();
    for ds in datasets {
        for i in 0..ds.len() {
            let coords: Vec<f64> = (0..ds.points.ncols()).map(|d| ds.points[(i, d)]).collect();
            let row = grid.index_of(&coords).ok_or_else(|| {
                SageError::Validation(format!(
                    "structure point {i} of source {} is not on the prediction grid",
                    ds.source_id
                ))
            })?;
            obs.push((row, ds.labels[i]));
        }
    }
    Ok(IndexedStructure { obs })
}

/// Categorical log-likelihood of labels under the field:
/// `sum_k ln p(label_k at x_k)`. A zero probability yields -inf (Metropolis
/// rejection) unless `label_noise > 0`, in which case it contributes
/// `ln(label_noise)`. Labels >= R are an error.
pub fn structure_log_likelihood_indexed(
    field: &RegionField,
    indexed: &IndexedStructure,
    label_noise: f64,
) -> Result<f64> {
    let r = field.regions();
    let mut total = 0.0;
    for &(row, label) in &indexed.obs {
        if label >= r {
            return Err(SageError::Validation(format!(
                "label {label} out of range for {r} regions"
            )));
        }
        let p = field.probs[(row, label)];
        if p > 0.0 {
            total += p.ln();
        } else if label_noise > 0.0 {
            total += label_noise.ln();
        } else {
            return Ok(f64::NEG_INFINITY);
        }
    }
    Ok(total)
}

/// Convenience wrapper resolving dataset points against the grid first.
pub fn structure_log_likelihood(
    field: &RegionField,
    datasets: &[StructureDataset],
    grid: &PredictionGrid,
    label_noise: f64,
) -> Result<f64> {
    let indexed = index_structure(datasets, grid)?;
    structure_log_likelihood_indexed(field, &indexed, label_noise)
}
