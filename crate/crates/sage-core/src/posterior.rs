//! Post-MCMC analysis: posterior-mean phase map, entropy uncertainty,
//! property predictive distributions, and the run-directory export format.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{fmt_float, read_numeric_csv, write_numeric_csv, Domain, PredictionGrid};
use crate::error::{Result, SageError};
use crate::inference::{BlockStats, McmcSettings};
use crate::sage::{write_chain_jsonl_file, ChainSet, SegmentationParams};
use crate::segmentation::RegionField;

/// Pointwise posterior summary over the prediction grid.
///
/// `noise_hat` is one scalar per property source: the observation-noise
/// parameter does not vary over the grid, so the per-point spread
/// `sigma_hat + noise_hat` broadcasts it.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary {
    /// G x R posterior-mean membership probabilities.
    pub p_m: DMatrix<f64>,
    /// Rowwise argmax of `p_m`; ties resolve to the lowest label.
    pub phase_estimate: Vec<usize>,
    /// Shannon entropy of each `p_m` row (natural log, 0 ln 0 = 0).
    pub phase_entropy: DVector<f64>,
    /// Posterior mean of each property function, one vector per source.
    pub mu_hat: Vec<DVector<f64>>,
    /// Population (1/B) standard deviation of each property function.
    pub sigma_hat: Vec<DVector<f64>>,
    /// Posterior mean of each source's noise scale.
    pub noise_hat: Vec<f64>,
    /// Number of retained draws pooled across chains.
    pub retained: usize,
}

/// Pools every retained draw across chains into the pointwise summary.
pub fn summarize(set: &ChainSet, grid: &PredictionGrid) -> Result<PosteriorSummary> {
    let samples: Vec<_> = set.chains.iter().flat_map(|c| c.samples.iter()).collect();
    let b = samples.len();
    if b == 0 {
        return Err(SageError::Inference("no retained draws to summarize".into()));
    }
    let g = grid.len();
    let r = samples[0].field.ncols();
    let n_props = samples[0].property_values.len();
    for s in &samples {
        if s.field.nrows() != g || s.field.ncols() != r || s.property_values.len() != n_props {
            return Err(SageError::Dimension(
                "inconsistent sample shapes across chains".into(),
            ));
        }
    }

    let mut p_m = DMatrix::zeros(g, r);
    for s in &samples {
        p_m += &s.field;
    }
    p_m /= b as f64;

    let field = RegionField { probs: p_m.clone() };
    let phase_entropy = DVector::from_fn(g, |i, _| field.entropy(i));
    let phase_estimate: Vec<usize> = (0..g)
        .map(|i| {
            let mut best = 0;
            for rr in 1..r {
                if p_m[(i, rr)] > p_m[(i, best)] {
                    best = rr;
                }
            }
            best
        })
        .collect();

    let mut mu_hat = Vec::with_capacity(n_props);
    let mut sigma_hat = Vec::with_capacity(n_props);
    let mut noise_hat = Vec::with_capacity(n_props);
    for j in 0..n_props {
        let mut mu = DVector::zeros(g);
        for s in &samples {
            mu += &s.property_values[j];
        }
        mu /= b as f64;
        // two-pass population std
        let mut var = DVector::zeros(g);
        for s in &samples {
            let d = &s.property_values[j] - &mu;
            var += d.component_mul(&d);
        }
        var /= b as f64;
        sigma_hat.push(var.map(|v| v.max(0.0).sqrt()));
        mu_hat.push(mu);
        noise_hat.push(samples.iter().map(|s| s.params.property[j].noise).sum::<f64>() / b as f64);
    }

    Ok(PosteriorSummary { p_m, phase_estimate, phase_entropy, mu_hat, sigma_hat, noise_hat, retained: b })
}

/// Central Gaussian interval for a new observation of source `j`:
/// `mu_hat +- z * (sigma_hat + noise_hat)` by default, or
/// `z * sqrt(sigma_hat^2 + noise_hat^2)` when `variance_sum` is set.
pub fn predictive_interval(
    summary: &PosteriorSummary,
    j: usize,
    coverage: f64,
    variance_sum: bool,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(SageError::InvalidParameter(format!(
            "coverage must be in (0, 1), got {coverage}"
        )));
    }
    if j >= summary.mu_hat.len() {
        return Err(SageError::InvalidParameter(format!(
            "property index {j} out of range ({} sources)",
            summary.mu_hat.len()
        )));
    }
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.5 * (1.0 + coverage));
    let n = summary.noise_hat[j];
    let half = summary.sigma_hat[j].map(|s| {
        let spread = if variance_sum { (s * s + n * n).sqrt() } else { s + n };
        z * spread
    });
    Ok((&summary.mu_hat[j] - &half, &summary.mu_hat[j] + &half))
}

/// Posterior over 1-D changepoint locations: the raw draws (all changepoint
/// slots pooled) plus a fixed-width histogram over the domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangepointPosterior {
    pub samples: Vec<f64>,
    /// `bins + 1` edges spanning the domain.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn changepoint_posterior_1d(
    set: &ChainSet,
    domain: &Domain,
    bins: usize,
) -> Result<ChangepointPosterior> {
    if domain.dim() != 1 {
        return Err(SageError::Validation(
            "changepoint posterior is defined for 1-D domains only".into(),
        ));
    }
    if bins == 0 {
        return Err(SageError::InvalidParameter("need at least one histogram bin".into()));
    }
    let mut samples = Vec::new();
    for chain in &set.chains {
        for s in &chain.samples {
            match &s.params.segmentation {
                SegmentationParams::Changepoints { values } => samples.extend(values.iter().copied()),
                SegmentationParams::Latent { .. } => {
                    return Err(SageError::Validation(
                        "chain carries latent segmentation; changepoint posterior needs a 1-D model".into(),
                    ))
                }
            }
        }
    }
    let (lo, hi) = (domain.bounds[0].lo, domain.bounds[0].hi);
    let w = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in &samples {
        let k = (((x - lo) / w) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let bin_edges = (0..=bins).map(|k| lo + k as f64 * w).collect();
    Ok(ChangepointPosterior { samples, bin_edges, counts })
}

/// Per-block acceptance digest stored in run metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDigest {
    pub name: String,
    pub post_burn_in_acceptance: f64,
    pub final_step: f64,
}

impl BlockDigest {
    pub fn from_stats(stats: &BlockStats) -> Self {
        BlockDigest {
            name: stats.name.clone(),
            post_burn_in_acceptance: stats.post_rate(),
            final_step: stats.final_step,
        }
    }
}

/// `summary.json`: everything needed to interpret or re-evaluate a run
/// directory without the original inputs. Baseline fits reuse the format
/// with `settings: None` and the MLE fields populated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub model: String,
    pub regions: usize,
    pub dim: usize,
    pub retained: usize,
    pub settings: Option<McmcSettings>,
    pub rhat: Option<f64>,
    pub rhat_warning: bool,
    pub noise_hat: Vec<f64>,
    pub variance_sum: bool,
    /// Per chain, per block.
    pub block_digests: Vec<Vec<BlockDigest>>,
    /// Maximum-likelihood fits only.
    #[serde(default)]
    pub log_marginal: Option<f64>,
    /// Changepoint-kernel fits only.
    #[serde(default)]
    pub changepoint: Option<f64>,
}

fn coord_headers(dim: usize) -> Vec<String> {
    (1..=dim).map(|d| format!("x{d}")).collect()
}

/// Writes the posterior artifact set into `dir`:
/// `phase_pM.csv`, `phase_estimate.csv`, `phase_entropy.csv`,
/// `prop_{j}_mean.csv`, `prop_{j}_std.csv`, `summary.json`.
pub fn export_summary(
    dir: &Path,
    grid: &PredictionGrid,
    summary: &PosteriorSummary,
    meta: &RunMetadata,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let dim = grid.dim();
    let g = grid.len();
    let r = summary.p_m.ncols();

    let mut headers: Vec<String> = coord_headers(dim);
    headers.extend((0..r).map(|k| format!("p{k}")));
    let hdr: Vec<&str> = headers.iter().map(|s| s.as_str()).collect();
    write_numeric_csv(
        &dir.join("phase_pM.csv"),
        &hdr,
        (0..g).map(|i| {
            let mut row = grid.row(i);
            row.extend((0..r).map(|k| summary.p_m[(i, k)]));
            row
        }),
    )?;

    // integer labels get their own writer so the column stays integral
    {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("phase_estimate.csv"))?);
        let mut hdr = coord_headers(dim);
        hdr.push("label".into());
        writeln!(f, "{}", hdr.join(","))?;
        for i in 0..g {
            let mut cells: Vec<String> = grid.row(i).iter().map(|v| fmt_float(*v)).collect();
            cells.push(format!("{}", summary.phase_estimate[i]));
            writeln!(f, "{}", cells.join(","))?;
        }
    }

    let mut hdr = coord_headers(dim);
    hdr.push("entropy".into());
    let hdr_refs: Vec<&str> = hdr.iter().map(|s| s.as_str()).collect();
    write_numeric_csv(
        &dir.join("phase_entropy.csv"),
        &hdr_refs,
        (0..g).map(|i| {
            let mut row = grid.row(i);
            row.push(summary.phase_entropy[i]);
            row
        }),
    )?;

    for j in 0..summary.mu_hat.len() {
        for (name, values) in [("mean", &summary.mu_hat[j]), ("std", &summary.sigma_hat[j])] {
            let mut hdr = coord_headers(dim);
            hdr.push(name.into());
            let hdr_refs: Vec<&str> = hdr.iter().map(|s| s.as_str()).collect();
            write_numeric_csv(
                &dir.join(format!("prop_{j}_{name}.csv")),
                &hdr_refs,
                (0..g).map(|i| {
                    let mut row = grid.row(i);
                    row.push(values[i]);
                    row
                }),
            )?;
        }
    }

    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(dir.join("summary.json"), json)?;
    Ok(())
}

/// Writes `chain_{c}.jsonl` per chain.
pub fn export_chains(dir: &Path, set: &ChainSet) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for chain in &set.chains {
        write_chain_jsonl_file(&dir.join(format!("chain_{}.jsonl", chain.chain_index)), chain)?;
    }
    Ok(())
}

/// A run directory read back: grid coordinates plus every exported field.
#[derive(Clone, Debug)]
pub struct LoadedSummary {
    /// G x d grid coordinates, in export order.
    pub points: DMatrix<f64>,
    pub p_m: DMatrix<f64>,
    pub phase_estimate: Vec<usize>,
    pub phase_entropy: DVector<f64>,
    pub mu_hat: Vec<DVector<f64>>,
    pub sigma_hat: Vec<DVector<f64>>,
    pub meta: RunMetadata,
}

pub fn load_summary(dir: &Path) -> Result<LoadedSummary> {
    let meta_path = dir.join("summary.json");
    let meta_text = std::fs::read_to_string(&meta_path)
        .map_err(|e| SageError::Validation(format!("cannot read {}: {e}", meta_path.display())))?;
    let meta: RunMetadata = serde_json::from_str(&meta_text)?;
    let dim = meta.dim;

    // phase files are absent for regression-only fits, property files for
    // structure-only fits; whichever exists defines the grid coordinates
    let mut points: Option<DMatrix<f64>> = None;
    let mut take_points = |table: &crate::data::NumericTable| {
        if points.is_none() {
            let g = table.rows.len();
            points = Some(DMatrix::from_fn(g, dim, |i, d| table.rows[i][d]));
        }
    };

    let pm_path = dir.join("phase_pM.csv");
    let (p_m, phase_estimate, phase_entropy) = if pm_path.exists() {
        let pm_table = read_numeric_csv(&pm_path)?;
        let g = pm_table.rows.len();
        let r = meta.regions;
        if pm_table.headers.len() != dim + r {
            return Err(SageError::Validation(format!(
                "phase_pM.csv has {} columns, expected {dim} coordinates + {r} probabilities",
                pm_table.headers.len()
            )));
        }
        take_points(&pm_table);
        let p_m = DMatrix::from_fn(g, r, |i, k| pm_table.rows[i][dim + k]);
        let est = read_numeric_csv(&dir.join("phase_estimate.csv"))?;
        let ent = read_numeric_csv(&dir.join("phase_entropy.csv"))?;
        if est.rows.len() != g || ent.rows.len() != g {
            return Err(SageError::Validation("summary CSV row counts disagree".into()));
        }
        let estimate: Vec<usize> = est.rows.iter().map(|row| row[dim] as usize).collect();
        let entropy = DVector::from_fn(g, |i, _| ent.rows[i][dim]);
        (p_m, estimate, entropy)
    } else {
        (DMatrix::zeros(0, 0), Vec::new(), DVector::zeros(0))
    };

    let n_props = meta.noise_hat.len();
    let mut mu_hat = Vec::with_capacity(n_props);
    let mut sigma_hat = Vec::with_capacity(n_props);
    for j in 0..n_props {
        let mean = read_numeric_csv(&dir.join(format!("prop_{j}_mean.csv")))?;
        let std = read_numeric_csv(&dir.join(format!("prop_{j}_std.csv")))?;
        if mean.rows.len() != std.rows.len() {
            return Err(SageError::Validation(format!("prop_{j} CSV row counts disagree")));
        }
        take_points(&mean);
        let g = mean.rows.len();
        mu_hat.push(DVector::from_fn(g, |i, _| mean.rows[i][dim]));
        sigma_hat.push(DVector::from_fn(g, |i, _| std.rows[i][dim]));
    }

    let points = points.ok_or_else(|| {
        SageError::Validation(format!("{} holds no field CSVs to load", dir.display()))
    })?;
    if !phase_estimate.is_empty() && phase_estimate.len() != points.nrows() {
        return Err(SageError::Validation("summary CSV row counts disagree".into()));
    }
    for mu in &mu_hat {
        if mu.len() != points.nrows() {
            return Err(SageError::Validation("summary CSV row counts disagree".into()));
        }
    }
    Ok(LoadedSummary { points, p_m, phase_estimate, phase_entropy, mu_hat, sigma_hat, meta })
}
