//! SAGE model assembly: joint segmentation + property posterior wired onto
//! the blockwise Metropolis engine.
//!
//! Six model kinds share one state layout. 1-D kinds segment by sorted
//! changepoints (hard one-hot membership); N-D kinds by R whitened latent
//! functions under a Matern-5/2 kernel, softmaxed row-wise. `-pm` kinds keep
//! only the structure likelihood and carry no property parameters; `-fp`
//! kinds keep the full parameter set but score only the property likelihood.
//!
//! The sampler state caches everything derivable from the parameters
//! (Cholesky factors, latent field, per-region components, mixtures, the
//! likelihood split); each proposal clones the state and recomputes only the
//! pieces its block touches. Cached likelihoods are always recomputed whole
//! (never incrementally updated), so a from-scratch rebuild reproduces them
//! bit for bit.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Domain, Interval, PredictionGrid, PriorConfig, PropertyDataset, StructureDataset};
use crate::error::{Result, SageError};
use crate::inference::{
    run_block_chain_reduced, split_rhat, BlockSpec, BlockStats, BlockTarget, McmcSettings,
};
use crate::kernels::{cholesky_with_jitter, matern52_kernel, rbf_kernel, KernelParams};
use crate::par::{par_map, seq_map};
use crate::property::{
    index_property, piecewise_mix, property_log_likelihood_indexed, sample_region_gp,
    IndexedProperty, PropertyRegionParams, PropertySourceParams,
};
use crate::segmentation::{
    index_structure, latent_values, region_field_1d, softmax_region_field,
    structure_log_likelihood_indexed, Changepoints1D, IndexedStructure, RegionField,
};

/// Which model to fit. Names match the CLI `--model` values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "sage-1d")]
    Sage1d,
    #[serde(rename = "sage-1d-pm")]
    Sage1dPm,
    #[serde(rename = "sage-1d-fp")]
    Sage1dFp,
    #[serde(rename = "sage-nd")]
    SageNd,
    #[serde(rename = "sage-nd-pm")]
    SageNdPm,
    #[serde(rename = "sage-nd-fp")]
    SageNdFp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Sage1d,
        ModelKind::Sage1dPm,
        ModelKind::Sage1dFp,
        ModelKind::SageNd,
        ModelKind::SageNdPm,
        ModelKind::SageNdFp,
    ];

    pub fn parse(name: &str) -> Option<ModelKind> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Sage1d => "sage-1d",
            ModelKind::Sage1dPm => "sage-1d-pm",
            ModelKind::Sage1dFp => "sage-1d-fp",
            ModelKind::SageNd => "sage-nd",
            ModelKind::SageNdPm => "sage-nd-pm",
            ModelKind::SageNdFp => "sage-nd-fp",
        }
    }

    pub fn one_dimensional(self) -> bool {
        matches!(self, ModelKind::Sage1d | ModelKind::Sage1dPm | ModelKind::Sage1dFp)
    }

    /// Structure likelihood enters L (false for `-fp` kinds).
    pub fn scores_structure(self) -> bool {
        !matches!(self, ModelKind::Sage1dFp | ModelKind::SageNdFp)
    }

    /// Property likelihood enters L and property parameters are sampled
    /// (false for `-pm` kinds).
    pub fn scores_property(self) -> bool {
        !matches!(self, ModelKind::Sage1dPm | ModelKind::SageNdPm)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Segmentation half of the parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SegmentationParams {
    /// Sorted interior changepoints (1-D kinds; empty when R = 1).
    Changepoints { values: Vec<f64> },
    /// Matern-5/2 hyperparameters plus R whitened vectors of length G
    /// (N-D kinds).
    Latent { lengthscales: Vec<f64>, std: f64, whitened: Vec<Vec<f64>> },
}

/// One posterior draw, exactly what a chain JSONL line stores. The cached
/// log-likelihoods are recomputable from the parameters and the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub segmentation: SegmentationParams,
    /// Empty for `-pm` kinds.
    pub property: Vec<PropertySourceParams>,
    pub log_lik_structure: f64,
    pub log_lik_property: f64,
    /// The scored total (which terms enter depends on the model kind).
    pub log_lik: f64,
}

/// Live sampler state: parameters plus every derived quantity proposals need.
/// Cholesky factors sit behind `Arc` so unchanged factors are shared across
/// clones instead of copied.
#[derive(Clone)]
pub struct SageState {
    pub params: ParameterState,
    seg_chol: Option<Arc<DMatrix<f64>>>,
    prop_chols: Vec<Vec<Arc<DMatrix<f64>>>>,
    pub field: RegionField,
    /// `components[j][r]`: region-r GP of source j on the grid.
    components: Vec<Vec<DVector<f64>>>,
    /// Membership-weighted mixtures, one per property source.
    pub mixed: Vec<DVector<f64>>,
    /// Per-source property log-likelihood terms.
    lp_sources: Vec<f64>,
}

/// Retained chain draw: parameters plus the derived surfaces the posterior
/// summaries need. Cholesky factors are deliberately not retained.
#[derive(Clone, Debug)]
pub struct ChainSample {
    pub params: ParameterState,
    /// G x R membership probabilities.
    pub field: DMatrix<f64>,
    /// Mixed property function on the grid, one per source.
    pub property_values: Vec<DVector<f64>>,
}

#[derive(Clone, Copy, Debug)]
enum BlockKind {
    Changepoints,
    SegHyper,
    SegWhitened,
    PropHyper { j: usize, r: usize },
    PropWhitened { j: usize, r: usize },
    Noise { j: usize },
}

/// Fully validated inference problem: data resolved to grid rows, prior
/// checked against dimensions, blocks laid out for the engine.
#[derive(Debug)]
pub struct SageProblem {
    pub kind: ModelKind,
    pub domain: Domain,
    pub grid: PredictionGrid,
    pub structure: Vec<StructureDataset>,
    pub property: Vec<PropertyDataset>,
    pub prior: PriorConfig,
    indexed_structure: IndexedStructure,
    indexed_property: Vec<IndexedProperty>,
    blocks: Vec<BlockSpec>,
    kinds: Vec<BlockKind>,
    /// Per-block coordinate scales multiplying the adapted step (prior
    /// interval widths for bounded blocks).
    scales: Vec<Vec<f64>>,
}

impl SageProblem {
    pub fn new(
        kind: ModelKind,
        domain: Domain,
        grid: PredictionGrid,
        structure: Vec<StructureDataset>,
        property: Vec<PropertyDataset>,
        prior: PriorConfig,
    ) -> Result<Self> {
        let dim = domain.dim();
        if kind.one_dimensional() && dim != 1 {
            return Err(SageError::Validation(format!(
                "{kind} requires a 1-dimensional domain, got {dim} dimensions"
            )));
        }
        if grid.dim() != dim {
            return Err(SageError::Dimension(format!(
                "grid is {}-dimensional, domain is {dim}-dimensional",
                grid.dim()
            )));
        }
        if grid.len() == 0 {
            return Err(SageError::Validation("prediction grid is empty".into()));
        }
        for i in 0..grid.len() {
            if !domain.contains_row(&grid.points, i) {
                return Err(SageError::Validation(format!("grid point {i} lies outside the domain")));
            }
        }
        if !kind.scores_property() && !property.is_empty() {
            return Err(SageError::Validation(format!(
                "{kind} fits structure data only; remove the {} property source(s)",
                property.len()
            )));
        }
        if !kind.scores_structure() && !structure.is_empty() {
            return Err(SageError::Validation(format!(
                "{kind} fits property data only; remove the {} structure source(s)",
                structure.len()
            )));
        }
        prior.validate(dim, property.len())?;
        for ds in &structure {
            if ds.points.ncols() != dim {
                return Err(SageError::Dimension(format!(
                    "structure source {} is {}-dimensional, domain is {dim}-dimensional",
                    ds.source_id,
                    ds.points.ncols()
                )));
            }
            for (i, &label) in ds.labels.iter().enumerate() {
                if label >= prior.regions {
                    return Err(SageError::Validation(format!(
                        "structure source {} row {i} has label {label}, but the model has {} regions",
                        ds.source_id, prior.regions
                    )));
                }
            }
            for i in 0..ds.len() {
                if !domain.contains_row(&ds.points, i) {
                    return Err(SageError::Validation(format!(
                        "structure source {} point {i} lies outside the domain",
                        ds.source_id
                    )));
                }
            }
        }
        for ds in &property {
            if ds.points.ncols() != dim {
                return Err(SageError::Dimension(format!(
                    "property source {} is {}-dimensional, domain is {dim}-dimensional",
                    ds.source_id,
                    ds.points.ncols()
                )));
            }
            for i in 0..ds.len() {
                if !domain.contains_row(&ds.points, i) {
                    return Err(SageError::Validation(format!(
                        "property source {} point {i} lies outside the domain",
                        ds.source_id
                    )));
                }
            }
        }
        let indexed_structure = index_structure(&structure, &grid)?;
        let indexed_property =
            property.iter().map(|ds| index_property(ds, &grid)).collect::<Result<Vec<_>>>()?;

        let (blocks, kinds, scales) = build_blocks(kind, &prior, &domain, &grid);
        Ok(SageProblem {
            kind,
            domain,
            grid,
            structure,
            property,
            prior,
            indexed_structure,
            indexed_property,
            blocks,
            kinds,
            scales,
        })
    }

    pub fn regions(&self) -> usize {
        self.prior.regions
    }

    pub fn n_properties(&self) -> usize {
        self.property.len()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Property parameters are part of the state for all but `-pm` kinds.
    fn has_property_params(&self) -> bool {
        self.kind.scores_property()
    }

    fn combine(&self, l_s: f64, l_p: f64) -> f64 {
        match (self.kind.scores_structure(), self.kind.scores_property()) {
            (true, true) => l_s + l_p,
            (true, false) => l_s,
            (false, true) => l_p,
            (false, false) => unreachable!("no model kind drops both terms"),
        }
    }

    fn structure_term(&self, field: &RegionField) -> Result<f64> {
        if self.indexed_structure.obs.is_empty() {
            return Ok(0.0);
        }
        structure_log_likelihood_indexed(field, &self.indexed_structure, self.prior.label_noise)
    }

    fn property_term(&self, j: usize, mixed: &DVector<f64>, noise: f64) -> Result<f64> {
        property_log_likelihood_indexed(mixed, &self.indexed_property[j], noise)
    }

    fn build_seg_chol(&self, lengthscales: &[f64], std: f64) -> Result<Arc<DMatrix<f64>>> {
        let kp = KernelParams::new(lengthscales.to_vec(), std)?;
        let k = matern52_kernel(&self.grid.points, &self.grid.points, &kp)?;
        Ok(Arc::new(cholesky_with_jitter(&k, None)?.lower))
    }

    fn build_prop_chol(&self, kernel: &KernelParams) -> Result<Arc<DMatrix<f64>>> {
        let k = rbf_kernel(&self.grid.points, &self.grid.points, kernel)?;
        Ok(Arc::new(cholesky_with_jitter(&k, None)?.lower))
    }

    fn compute_field(
        &self,
        seg: &SegmentationParams,
        seg_chol: Option<&DMatrix<f64>>,
    ) -> Result<RegionField> {
        match seg {
            SegmentationParams::Changepoints { values } => {
                let cp = Changepoints1D { values: values.clone() };
                cp.check(&self.domain)?;
                if cp.regions() != self.regions() {
                    return Err(SageError::Validation(format!(
                        "{} changepoints imply {} regions, model has {}",
                        values.len(),
                        cp.regions(),
                        self.regions()
                    )));
                }
                region_field_1d(&cp, &self.grid)
            }
            SegmentationParams::Latent { whitened, .. } => {
                let chol = seg_chol.ok_or_else(|| {
                    SageError::Inference("latent segmentation requires a kernel factor".into())
                })?;
                if whitened.len() != self.regions() {
                    return Err(SageError::Validation(format!(
                        "{} latent vectors for {} regions",
                        whitened.len(),
                        self.regions()
                    )));
                }
                let vs: Vec<DVector<f64>> =
                    whitened.iter().map(|v| DVector::from_column_slice(v)).collect();
                let m = latent_values(chol, &vs)?;
                Ok(softmax_region_field(&m))
            }
        }
    }

    /// Builds the full cached state for a parameter vector, recomputing every
    /// derived quantity (factors, field, components, mixtures, likelihoods)
    /// from scratch. The likelihood fields of the input are ignored.
    pub fn state_from_params(
        &self,
        segmentation: SegmentationParams,
        property: Vec<PropertySourceParams>,
    ) -> Result<SageState> {
        if property.len() != if self.has_property_params() { self.n_properties() } else { 0 } {
            return Err(SageError::Validation(format!(
                "state has {} property parameter sets, model expects {}",
                property.len(),
                if self.has_property_params() { self.n_properties() } else { 0 }
            )));
        }
        let seg_chol = match &segmentation {
            SegmentationParams::Latent { lengthscales, std, .. } => {
                if self.kind.one_dimensional() {
                    return Err(SageError::Validation(
                        "latent segmentation parameters on a 1-D model".into(),
                    ));
                }
                Some(self.build_seg_chol(lengthscales, *std)?)
            }
            SegmentationParams::Changepoints { .. } => {
                if !self.kind.one_dimensional() {
                    return Err(SageError::Validation(
                        "changepoint parameters on an N-D model".into(),
                    ));
                }
                None
            }
        };
        let field = self.compute_field(&segmentation, seg_chol.as_deref())?;

        let mut prop_chols = Vec::with_capacity(property.len());
        let mut components = Vec::with_capacity(property.len());
        let mut mixed = Vec::with_capacity(property.len());
        let mut lp_sources = Vec::with_capacity(property.len());
        for (j, src) in property.iter().enumerate() {
            if src.regions.len() != self.regions() {
                return Err(SageError::Validation(format!(
                    "property {j} has {} region parameter sets for {} regions",
                    src.regions.len(),
                    self.regions()
                )));
            }
            let mut chols = Vec::with_capacity(src.regions.len());
            let mut comps = Vec::with_capacity(src.regions.len());
            for region in &src.regions {
                let chol = self.build_prop_chol(&region.kernel)?;
                comps.push(sample_region_gp(region, &chol)?);
                chols.push(chol);
            }
            let mix = piecewise_mix(&comps, &field)?;
            lp_sources.push(self.property_term(j, &mix, src.noise)?);
            prop_chols.push(chols);
            components.push(comps);
            mixed.push(mix);
        }

        let l_s = self.structure_term(&field)?;
        let l_p: f64 = lp_sources.iter().sum();
        let log_lik = self.combine(l_s, l_p);
        Ok(SageState {
            params: ParameterState {
                segmentation,
                property,
                log_lik_structure: l_s,
                log_lik_property: l_p,
                log_lik,
            },
            seg_chol,
            prop_chols,
            field,
            components,
            mixed,
            lp_sources,
        })
    }

    fn draw_segmentation(&self, rng: &mut ChaCha20Rng) -> Result<SegmentationParams> {
        let g = self.grid.len();
        let r = self.regions();
        if self.kind.one_dimensional() {
            let iv = self.domain.bounds[0];
            for _ in 0..64 {
                let mut values: Vec<f64> = (0..r - 1).map(|_| draw_uniform(&iv, rng)).collect();
                values.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let cp = Changepoints1D { values };
                if cp.is_valid(&self.domain) {
                    return Ok(SegmentationParams::Changepoints { values: cp.values });
                }
            }
            Err(SageError::Inference("could not draw distinct interior changepoints".into()))
        } else {
            let lengthscales: Vec<f64> =
                self.prior.structure.lengthscales.iter().map(|iv| draw_uniform(iv, rng)).collect();
            let std = draw_uniform(&self.prior.structure.std, rng);
            let whitened: Vec<Vec<f64>> =
                (0..r).map(|_| (0..g).map(|_| StandardNormal.sample(rng)).collect()).collect();
            Ok(SegmentationParams::Latent { lengthscales, std, whitened })
        }
    }

    fn draw_property(&self, rng: &mut ChaCha20Rng) -> Result<Vec<PropertySourceParams>> {
        if !self.has_property_params() {
            return Ok(Vec::new());
        }
        let g = self.grid.len();
        let mut out = Vec::with_capacity(self.n_properties());
        for prior in &self.prior.properties {
            let mut regions = Vec::with_capacity(prior.regions.len());
            for rb in &prior.regions {
                let lengthscales: Vec<f64> = rb.lengthscales.iter().map(|iv| draw_uniform(iv, rng)).collect();
                let std = draw_uniform(&rb.std, rng);
                let bias = if self.kind.one_dimensional() { 0.0 } else { draw_uniform(&rb.bias, rng) };
                let whitened: Vec<f64> = (0..g).map(|_| StandardNormal.sample(rng)).collect();
                regions.push(PropertyRegionParams {
                    kernel: KernelParams::with_bias(lengthscales, std, bias)?,
                    whitened,
                });
            }
            out.push(PropertySourceParams { noise: draw_uniform(&prior.noise, rng), regions });
        }
        Ok(out)
    }
}

fn draw_uniform(iv: &Interval, rng: &mut ChaCha20Rng) -> f64 {
    use rand::RngExt;
    rng.random_range(iv.lo..iv.hi)
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// pCN move: keeps the standard normal prior on whitened coordinates
/// invariant, so acceptance stays the bare likelihood ratio.
fn pcn_step(v: &[f64], beta: f64, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let keep = (1.0 - beta * beta).sqrt();
    v.iter().map(|&x| keep * x + beta * normal(rng)).collect()
}

fn build_blocks(
    kind: ModelKind,
    prior: &PriorConfig,
    domain: &Domain,
    grid: &PredictionGrid,
) -> (Vec<BlockSpec>, Vec<BlockKind>, Vec<Vec<f64>>) {
    let mut blocks = Vec::new();
    let mut kinds = Vec::new();
    let mut scales = Vec::new();
    let r = prior.regions;
    let g = grid.len();
    let dim = domain.dim();

    if kind.one_dimensional() {
        if r >= 2 {
            blocks.push(BlockSpec {
                name: "changepoints".into(),
                dim: r - 1,
                initial_step: 0.05 * domain.bounds[0].width(),
                max_step: None,
            });
            kinds.push(BlockKind::Changepoints);
            scales.push(vec![1.0; r - 1]);
        }
    } else {
        let mut sc: Vec<f64> = prior.structure.lengthscales.iter().map(|iv| iv.width()).collect();
        sc.push(prior.structure.std.width());
        blocks.push(BlockSpec {
            name: "seg-hyper".into(),
            dim: dim + 1,
            initial_step: 0.05,
            max_step: None,
        });
        kinds.push(BlockKind::SegHyper);
        scales.push(sc);
        blocks.push(BlockSpec {
            name: "seg-whitened".into(),
            dim: r * g,
            initial_step: 0.2,
            max_step: Some(0.995),
        });
        kinds.push(BlockKind::SegWhitened);
        scales.push(Vec::new());
    }

    if kind.scores_property() {
        for (j, p) in prior.properties.iter().enumerate() {
            for (rr, rb) in p.regions.iter().enumerate() {
                let mut sc: Vec<f64> = rb.lengthscales.iter().map(|iv| iv.width()).collect();
                sc.push(rb.std.width());
                let mut hdim = dim + 1;
                if !kind.one_dimensional() {
                    sc.push(rb.bias.width());
                    hdim += 1;
                }
                blocks.push(BlockSpec {
                    name: format!("prop{j}-region{rr}-hyper"),
                    dim: hdim,
                    initial_step: 0.05,
                    max_step: None,
                });
                kinds.push(BlockKind::PropHyper { j, r: rr });
                scales.push(sc);
                blocks.push(BlockSpec {
                    name: format!("prop{j}-region{rr}-whitened"),
                    dim: g,
                    initial_step: 0.2,
                    max_step: Some(0.995),
                });
                kinds.push(BlockKind::PropWhitened { j, r: rr });
                scales.push(Vec::new());
            }
            blocks.push(BlockSpec {
                name: format!("prop{j}-noise"),
                dim: 1,
                initial_step: 0.1,
                max_step: None,
            });
            kinds.push(BlockKind::Noise { j });
            scales.push(vec![p.noise.width()]);
        }
    }

    (blocks, kinds, scales)
}

impl SageState {
    /// Refreshes the likelihood fields from the cached pieces.
    fn refresh_likelihood(&mut self, problem: &SageProblem) -> Result<()> {
        let l_s = problem.structure_term(&self.field)?;
        let l_p: f64 = self.lp_sources.iter().sum();
        self.params.log_lik_structure = l_s;
        self.params.log_lik_property = l_p;
        self.params.log_lik = problem.combine(l_s, l_p);
        Ok(())
    }

    /// Re-mixes every property source after a field change and refreshes the
    /// per-source likelihood terms.
    fn remix_all(&mut self, problem: &SageProblem) -> Result<()> {
        for j in 0..self.components.len() {
            self.mixed[j] = piecewise_mix(&self.components[j], &self.field)?;
            self.lp_sources[j] =
                problem.property_term(j, &self.mixed[j], self.params.property[j].noise)?;
        }
        Ok(())
    }

    /// Re-mixes a single source after one of its components changed.
    fn remix_source(&mut self, problem: &SageProblem, j: usize) -> Result<()> {
        self.mixed[j] = piecewise_mix(&self.components[j], &self.field)?;
        self.lp_sources[j] =
            problem.property_term(j, &self.mixed[j], self.params.property[j].noise)?;
        Ok(())
    }
}

impl BlockTarget for SageProblem {
    type State = SageState;
    type Sample = ChainSample;

    fn blocks(&self) -> Vec<BlockSpec> {
        self.blocks.clone()
    }

    fn initial(&self, rng: &mut ChaCha20Rng) -> Result<(SageState, f64)> {
        let seg = self.draw_segmentation(rng)?;
        let property = self.draw_property(rng)?;
        let state = self.state_from_params(seg, property)?;
        let l = state.params.log_lik;
        Ok((state, l))
    }

    fn propose(
        &self,
        state: &SageState,
        block: usize,
        step: f64,
        rng: &mut ChaCha20Rng,
    ) -> Result<Option<(SageState, f64)>> {
        let mut cand = state.clone();
        match self.kinds[block] {
            BlockKind::Changepoints => {
                let SegmentationParams::Changepoints { values } = &mut cand.params.segmentation
                else {
                    return Err(SageError::Inference("changepoint block on latent state".into()));
                };
                for v in values.iter_mut() {
                    *v += step * normal(rng);
                }
                let cp = Changepoints1D { values: values.clone() };
                if !cp.is_valid(&self.domain) {
                    return Ok(None);
                }
                cand.field = region_field_1d(&cp, &self.grid)?;
                cand.remix_all(self)?;
            }
            BlockKind::SegHyper => {
                let SegmentationParams::Latent { lengthscales, std, whitened } =
                    &mut cand.params.segmentation
                else {
                    return Err(SageError::Inference("latent block on changepoint state".into()));
                };
                let sc = &self.scales[block];
                for (c, l) in lengthscales.iter_mut().enumerate() {
                    *l += step * sc[c] * normal(rng);
                }
                *std += step * sc[lengthscales.len()] * normal(rng);
                let in_support = lengthscales
                    .iter()
                    .zip(&self.prior.structure.lengthscales)
                    .all(|(l, iv)| iv.contains(*l))
                    && self.prior.structure.std.contains(*std);
                if !in_support {
                    return Ok(None);
                }
                let chol = match self.build_seg_chol(lengthscales, *std) {
                    Ok(c) => c,
                    Err(SageError::Cholesky { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let vs: Vec<DVector<f64>> =
                    whitened.iter().map(|v| DVector::from_column_slice(v)).collect();
                cand.field = softmax_region_field(&latent_values(&chol, &vs)?);
                cand.seg_chol = Some(chol);
                cand.remix_all(self)?;
            }
            BlockKind::SegWhitened => {
                let beta = step.min(0.995);
                let SegmentationParams::Latent { whitened, .. } = &mut cand.params.segmentation
                else {
                    return Err(SageError::Inference("latent block on changepoint state".into()));
                };
                for v in whitened.iter_mut() {
                    *v = pcn_step(v, beta, rng);
                }
                let chol = cand
                    .seg_chol
                    .as_deref()
                    .ok_or_else(|| SageError::Inference("missing segmentation factor".into()))?;
                let vs: Vec<DVector<f64>> =
                    whitened.iter().map(|v| DVector::from_column_slice(v)).collect();
                cand.field = softmax_region_field(&latent_values(chol, &vs)?);
                cand.remix_all(self)?;
            }
            BlockKind::PropHyper { j, r } => {
                let sc = &self.scales[block];
                let one_d = self.kind.one_dimensional();
                let bounds = &self.prior.properties[j].regions[r];
                let region = &mut cand.params.property[j].regions[r];
                let d = region.kernel.lengthscales.len();
                for (c, l) in region.kernel.lengthscales.iter_mut().enumerate() {
                    *l += step * sc[c] * normal(rng);
                }
                region.kernel.std += step * sc[d] * normal(rng);
                if !one_d {
                    region.kernel.bias += step * sc[d + 1] * normal(rng);
                }
                let in_support = region
                    .kernel
                    .lengthscales
                    .iter()
                    .zip(&bounds.lengthscales)
                    .all(|(l, iv)| iv.contains(*l))
                    && bounds.std.contains(region.kernel.std)
                    && (one_d || bounds.bias.contains(region.kernel.bias));
                if !in_support {
                    return Ok(None);
                }
                let chol = match self.build_prop_chol(&region.kernel) {
                    Ok(c) => c,
                    Err(SageError::Cholesky { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                };
                cand.components[j][r] = sample_region_gp(&cand.params.property[j].regions[r], &chol)?;
                cand.prop_chols[j][r] = chol;
                cand.remix_source(self, j)?;
            }
            BlockKind::PropWhitened { j, r } => {
                let beta = step.min(0.995);
                let region = &mut cand.params.property[j].regions[r];
                region.whitened = pcn_step(&region.whitened, beta, rng);
                cand.components[j][r] =
                    sample_region_gp(&cand.params.property[j].regions[r], &cand.prop_chols[j][r])?;
                cand.remix_source(self, j)?;
            }
            BlockKind::Noise { j } => {
                let noise = cand.params.property[j].noise + step * self.scales[block][0] * normal(rng);
                if !self.prior.properties[j].noise.contains(noise) {
                    return Ok(None);
                }
                cand.params.property[j].noise = noise;
                cand.lp_sources[j] = self.property_term(j, &cand.mixed[j], noise)?;
            }
        }
        cand.refresh_likelihood(self)?;
        let l = cand.params.log_lik;
        Ok(Some((cand, l)))
    }

    fn reduce(&self, state: &SageState) -> ChainSample {
        ChainSample {
            params: state.params.clone(),
            field: state.field.probs.clone(),
            property_values: state.mixed.clone(),
        }
    }
}

/// One finished chain.
#[derive(Clone, Debug)]
pub struct Chain {
    pub chain_index: usize,
    pub samples: Vec<ChainSample>,
    pub stats: Vec<BlockStats>,
}

/// All chains of one fit plus the cross-chain convergence diagnostic.
#[derive(Clone, Debug)]
pub struct ChainSet {
    pub chains: Vec<Chain>,
    /// Split potential-scale-reduction of the total log-likelihood.
    pub rhat: Option<f64>,
    pub rhat_warning: bool,
}

pub fn run_chain(problem: &SageProblem, settings: &McmcSettings, chain_index: usize) -> Result<Chain> {
    let (_, raw) = run_block_chain_reduced(problem, settings, chain_index)?;
    Ok(Chain {
        chain_index,
        samples: raw.samples.into_iter().map(|(s, _)| s).collect(),
        stats: raw.stats,
    })
}

fn finish_chains(results: Vec<Result<Chain>>) -> Result<ChainSet> {
    let chains = results.into_iter().collect::<Result<Vec<_>>>()?;
    let series: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| c.samples.iter().map(|s| s.params.log_lik).collect())
        .collect();
    let rhat = split_rhat(&series);
    let rhat_warning = rhat.is_some_and(|r| r > 1.1);
    if let (true, Some(r)) = (rhat_warning, rhat) {
        eprintln!(
            "warning: split R-hat of the log-likelihood is {r:.3} (> 1.1); \
             chains may not have mixed, consider more iterations"
        );
    }
    Ok(ChainSet { chains, rhat, rhat_warning })
}

/// Runs `settings.chains` chains (data-parallel when the `parallel` feature
/// is on). Chain RNG streams depend only on (seed, chain index), so results
/// are identical to the sequential runner.
pub fn run_chains(problem: &SageProblem, settings: &McmcSettings) -> Result<ChainSet> {
    settings.validate()?;
    let results = par_map((0..settings.chains).collect(), |c| run_chain(problem, settings, c));
    finish_chains(results)
}

/// Sequential twin of [`run_chains`].
pub fn run_chains_sequential(problem: &SageProblem, settings: &McmcSettings) -> Result<ChainSet> {
    settings.validate()?;
    let results = seq_map((0..settings.chains).collect(), |c| run_chain(problem, settings, c));
    finish_chains(results)
}

/// Highest-likelihood retained draw across all chains.
pub fn max_likelihood_sample(set: &ChainSet) -> Option<&ChainSample> {
    set.chains
        .iter()
        .flat_map(|c| c.samples.iter())
        .max_by(|a, b| a.params.log_lik.partial_cmp(&b.params.log_lik).unwrap())
}

/// Writes one chain as JSON lines, one parameter state per line.
pub fn write_chain_jsonl<W: Write>(w: W, chain: &Chain) -> Result<()> {
    let mut w = BufWriter::new(w);
    for s in &chain.samples {
        serde_json::to_writer(&mut w, &s.params)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_chain_jsonl_file(path: &Path, chain: &Chain) -> Result<()> {
    write_chain_jsonl(std::fs::File::create(path)?, chain)
}

/// Reads parameter states back from JSON lines (blank lines skipped).
pub fn read_chain_jsonl<R: Read>(r: R) -> Result<Vec<ParameterState>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let state: ParameterState = serde_json::from_str(&line).map_err(|e| {
            SageError::Serde(format!("chain line {}: {e}", i + 1))
        })?;
        out.push(state);
    }
    Ok(out)
}

pub fn read_chain_jsonl_file(path: &Path) -> Result<Vec<ParameterState>> {
    read_chain_jsonl(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_grid, Domain, GpPrior, PropertyPrior, RegionGpPrior};
    use crate::inference::chain_rng;

    fn domain_1d() -> Domain {
        Domain::unit(1)
    }

    fn region_prior_1d() -> RegionGpPrior {
        RegionGpPrior {
            lengthscales: vec![Interval::new(0.05, 2.0).unwrap()],
            std: Interval::new(0.05, 3.0).unwrap(),
            bias: Interval::new(-2.0, 2.0).unwrap(),
        }
    }

    fn prior_1d(regions: usize, n_props: usize) -> PriorConfig {
        PriorConfig {
            regions,
            structure: GpPrior {
                lengthscales: vec![Interval::new(0.05, 2.0).unwrap()],
                std: Interval::new(0.01, 10.0).unwrap(),
            },
            properties: (0..n_props)
                .map(|_| PropertyPrior::uniform(region_prior_1d(), regions, Interval::new(0.01, 0.5).unwrap()))
                .collect(),
            label_noise: 0.0,
            variance_sum: false,
        }
    }

    fn structure_points(xs: &[f64], labels: &[usize]) -> StructureDataset {
        StructureDataset {
            source_id: "s".into(),
            points: DMatrix::from_fn(xs.len(), 1, |i, _| xs[i]),
            labels: labels.to_vec(),
        }
    }

    fn property_points(xs: &[f64], ys: &[f64]) -> PropertyDataset {
        PropertyDataset {
            source_id: "p".into(),
            points: DMatrix::from_fn(xs.len(), 1, |i, _| xs[i]),
            values: DVector::from_column_slice(ys),
        }
    }

    fn problem_1d(kind: ModelKind) -> SageProblem {
        let domain = domain_1d();
        let structure = if kind.scores_structure() {
            vec![structure_points(&[0.2, 0.4, 0.8], &[0, 0, 1])]
        } else {
            vec![]
        };
        let property = if kind.scores_property() {
            vec![property_points(&[0.1, 0.3, 0.7, 0.9], &[1.0, 1.1, -0.9, -1.0])]
        } else {
            vec![]
        };
        let mut pts: Vec<f64> = structure.iter().flat_map(|d| d.points.iter().copied()).collect();
        pts.extend(property.iter().flat_map(|d| d.points.iter().copied()));
        let data = DMatrix::from_fn(pts.len(), 1, |i, _| pts[i]);
        let grid = build_grid(&domain, &[21], &[&data], None).unwrap();
        let prior = prior_1d(2, property.len());
        SageProblem::new(kind, domain, grid, structure, property, prior).unwrap()
    }

    #[test]
    fn model_kind_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(ModelKind::parse(k.name()), Some(k));
            let js = serde_json::to_string(&k).unwrap();
            assert_eq!(js, format!("\"{}\"", k.name()));
            let back: ModelKind = serde_json::from_str(&js).unwrap();
            assert_eq!(back, k);
        }
        assert_eq!(ModelKind::parse("gp-reg"), None);
        assert!(ModelKind::Sage1d.scores_structure() && ModelKind::Sage1d.scores_property());
        assert!(!ModelKind::Sage1dPm.scores_property());
        assert!(!ModelKind::SageNdFp.scores_structure());
    }

    #[test]
    fn validation_rejects_mismatched_inputs() {
        let domain = domain_1d();
        let grid = build_grid(&domain, &[11], &[], None).unwrap();
        // label out of range for R = 2
        let s = structure_points(&[0.5], &[2]);
        let err = SageProblem::new(
            ModelKind::Sage1d,
            domain.clone(),
            grid.clone(),
            vec![s],
            vec![],
            prior_1d(2, 0),
        )
        .unwrap_err();
        assert!(err.to_string().contains("label 2"), "{err}");

        // pm kind rejects property sources
        let p = property_points(&[0.5], &[1.0]);
        let err = SageProblem::new(
            ModelKind::Sage1dPm,
            domain.clone(),
            grid.clone(),
            vec![],
            vec![p.clone()],
            prior_1d(2, 1),
        )
        .unwrap_err();
        assert!(err.to_string().contains("structure data only"), "{err}");

        // fp kind rejects structure sources
        let err = SageProblem::new(
            ModelKind::Sage1dFp,
            domain.clone(),
            grid.clone(),
            vec![structure_points(&[0.5], &[0])],
            vec![p.clone()],
            prior_1d(2, 1),
        )
        .unwrap_err();
        assert!(err.to_string().contains("property data only"), "{err}");

        // 1-D kind rejects a 2-D domain
        let err = SageProblem::new(
            ModelKind::Sage1d,
            Domain::unit(2),
            build_grid(&Domain::unit(2), &[4, 4], &[], None).unwrap(),
            vec![],
            vec![],
            prior_1d(2, 0),
        )
        .unwrap_err();
        assert!(err.to_string().contains("1-dimensional"), "{err}");

        // off-grid data point
        let p_off = property_points(&[0.123456], &[1.0]);
        let err = SageProblem::new(
            ModelKind::Sage1dFp,
            domain,
            grid,
            vec![],
            vec![p_off],
            prior_1d(2, 1),
        )
        .unwrap_err();
        assert!(err.to_string().contains("not on the prediction grid"), "{err}");
    }

    #[test]
    fn block_layout_per_model_kind() {
        let p = problem_1d(ModelKind::Sage1d);
        let names: Vec<&str> = p.blocks.iter().map(|b| b.name.as_str()).collect();
        assert_eq!(
            names,
            vec!["changepoints", "prop0-region0-hyper", "prop0-region0-whitened", "prop0-region1-hyper", "prop0-region1-whitened", "prop0-noise"]
        );
        assert_eq!(p.blocks[0].dim, 1); // R = 2 -> one changepoint, scalar target

        let pm = problem_1d(ModelKind::Sage1dPm);
        assert_eq!(pm.blocks.len(), 1);

        let fp = problem_1d(ModelKind::Sage1dFp);
        assert_eq!(fp.blocks.len(), 6); // changepoints still sampled
    }

    #[test]
    fn prior_draws_respect_bounds() {
        let p = problem_1d(ModelKind::Sage1d);
        let mut rng = chain_rng(7, 0);
        for _ in 0..200 {
            let seg = p.draw_segmentation(&mut rng).unwrap();
            let SegmentationParams::Changepoints { values } = seg else { panic!() };
            assert_eq!(values.len(), 1);
            assert!(values[0] > 0.0 && values[0] < 1.0);
            let prop = p.draw_property(&mut rng).unwrap();
            assert_eq!(prop.len(), 1);
            let src = &prop[0];
            assert!(p.prior.properties[0].noise.contains(src.noise));
            for (r, region) in src.regions.iter().enumerate() {
                let b = &p.prior.properties[0].regions[r];
                assert!(b.lengthscales[0].contains(region.kernel.lengthscales[0]));
                assert!(b.std.contains(region.kernel.std));
                assert_eq!(region.kernel.bias, 0.0); // 1-D GPs are zero-mean
                assert_eq!(region.whitened.len(), p.grid.len());
            }
        }
    }

    #[test]
    fn prior_hyper_mean_matches_interval_midpoint() {
        let p = problem_1d(ModelKind::Sage1d);
        let mut rng = chain_rng(13, 0);
        let n = 4000;
        let mut sum = 0.0;
        for _ in 0..n {
            let prop = p.draw_property(&mut rng).unwrap();
            sum += prop[0].regions[0].kernel.std;
        }
        let mean = sum / n as f64;
        let iv = p.prior.properties[0].regions[0].std;
        let se = iv.width() / (12.0f64 * n as f64).sqrt();
        assert!(
            (mean - iv.midpoint()).abs() < 3.0 * se,
            "mean {mean} vs midpoint {} (se {se})",
            iv.midpoint()
        );
    }

    #[test]
    fn stored_likelihood_matches_recomputation() {
        for kind in [ModelKind::Sage1d, ModelKind::Sage1dPm, ModelKind::Sage1dFp] {
            let p = problem_1d(kind);
            let settings = McmcSettings {
                iterations: 600,
                burn_in: 300,
                thinning: 10,
                chains: 1,
                seed: 21,
                ..Default::default()
            };
            let chain = run_chain(&p, &settings, 0).unwrap();
            assert_eq!(chain.samples.len(), 30);
            for s in &chain.samples {
                let rebuilt = p
                    .state_from_params(s.params.segmentation.clone(), s.params.property.clone())
                    .unwrap();
                assert!(
                    (rebuilt.params.log_lik - s.params.log_lik).abs() <= 1e-10,
                    "{kind}: stored {} recomputed {}",
                    s.params.log_lik,
                    rebuilt.params.log_lik
                );
                assert!((rebuilt.params.log_lik_structure - s.params.log_lik_structure).abs() <= 1e-10);
                assert!((rebuilt.params.log_lik_property - s.params.log_lik_property).abs() <= 1e-10);
                // derived surfaces must match too
                assert_eq!(rebuilt.field.probs.nrows(), s.field.nrows());
                let df = (&rebuilt.field.probs - &s.field).abs().max();
                assert!(df <= 1e-10, "field drift {df}");
                for (a, b) in rebuilt.mixed.iter().zip(&s.property_values) {
                    assert!((a - b).abs().max() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn changepoint_posterior_concentrates_between_labels() {
        // labels 0 at {0.2, 0.4}, 1 at {0.8}: any changepoint in (0.4, 0.8)
        // fits perfectly, outside it at least one label has probability 0.
        let p = problem_1d(ModelKind::Sage1dPm);
        let settings = McmcSettings {
            iterations: 4_000,
            burn_in: 2_000,
            thinning: 5,
            chains: 1,
            seed: 3,
            ..Default::default()
        };
        let chain = run_chain(&p, &settings, 0).unwrap();
        for s in &chain.samples {
            let SegmentationParams::Changepoints { values } = &s.params.segmentation else {
                panic!()
            };
            assert!(values[0] > 0.4 && values[0] <= 0.8, "cp {} escaped the label gap", values[0]);
            assert_eq!(s.params.log_lik, 0.0); // perfect classification
        }
    }

    #[test]
    fn joint_fit_acceptance_rates_in_band() {
        // needs the full default budget: the adapted steps freeze at the end
        // of burn-in, so burn-in must reach the stationary regime
        let p = problem_1d(ModelKind::Sage1d);
        let settings = McmcSettings { chains: 1, seed: 5, ..Default::default() };
        let chain = run_chain(&p, &settings, 0).unwrap();
        for st in &chain.stats {
            let rate = st.post_rate();
            assert!(
                (0.1..=0.6).contains(&rate),
                "block {} post-burn-in acceptance {rate} outside [0.1, 0.6]",
                st.name
            );
        }
    }

    #[test]
    fn chains_deterministic_and_parallel_matches_sequential() {
        let p = problem_1d(ModelKind::Sage1d);
        let settings = McmcSettings {
            iterations: 400,
            burn_in: 200,
            thinning: 10,
            chains: 2,
            seed: 17,
            ..Default::default()
        };
        let a = run_chains(&p, &settings).unwrap();
        let b = run_chains_sequential(&p, &settings).unwrap();
        assert_eq!(a.chains.len(), 2);
        for (ca, cb) in a.chains.iter().zip(&b.chains) {
            assert_eq!(ca.samples.len(), cb.samples.len());
            for (sa, sb) in ca.samples.iter().zip(&cb.samples) {
                assert_eq!(sa.params, sb.params);
                assert_eq!(sa.field, sb.field);
            }
        }
        // chains differ from each other
        let s0 = &a.chains[0].samples[0].params;
        let s1 = &a.chains[1].samples[0].params;
        assert_ne!(s0, s1);
        let best = max_likelihood_sample(&a).unwrap();
        assert!(
            a.chains
                .iter()
                .flat_map(|c| &c.samples)
                .all(|s| s.params.log_lik <= best.params.log_lik)
        );
    }

    #[test]
    fn chain_jsonl_round_trips_bitwise() {
        let p = problem_1d(ModelKind::Sage1d);
        let settings = McmcSettings {
            iterations: 300,
            burn_in: 100,
            thinning: 10,
            chains: 1,
            seed: 29,
            ..Default::default()
        };
        let chain = run_chain(&p, &settings, 0).unwrap();
        let mut buf = Vec::new();
        write_chain_jsonl(&mut buf, &chain).unwrap();
        let loaded = read_chain_jsonl(&buf[..]).unwrap();
        assert_eq!(loaded.len(), chain.samples.len());
        for (l, s) in loaded.iter().zip(&chain.samples) {
            assert_eq!(l, &s.params);
            assert_eq!(l.log_lik.to_bits(), s.params.log_lik.to_bits());
        }
    }

    #[test]
    fn impossible_labels_exhaust_init_retries() {
        // same point labeled both 0 and 1 with hard membership: every
        // changepoint placement zeroes one of the two labels.
        let domain = domain_1d();
        let s = StructureDataset {
            source_id: "s".into(),
            points: DMatrix::from_fn(2, 1, |_, _| 0.5),
            labels: vec![0, 1],
        };
        let grid = build_grid(&domain, &[11], &[&s.points], None).unwrap();
        let p = SageProblem::new(ModelKind::Sage1dPm, domain, grid, vec![s], vec![], prior_1d(2, 0))
            .unwrap();
        let settings =
            McmcSettings { iterations: 100, burn_in: 50, thinning: 1, chains: 1, init_retries: 20, ..Default::default() };
        let err = run_chain(&p, &settings, 0).unwrap_err();
        assert!(err.to_string().contains("label_noise"), "{err}");

        // a label-noise floor makes the same problem feasible
        let mut prior = prior_1d(2, 0);
        prior.label_noise = 1e-3;
        let s2 = StructureDataset {
            source_id: "s".into(),
            points: DMatrix::from_fn(2, 1, |_, _| 0.5),
            labels: vec![0, 1],
        };
        let domain = domain_1d();
        let grid = build_grid(&domain, &[11], &[&s2.points], None).unwrap();
        let p2 = SageProblem::new(ModelKind::Sage1dPm, domain, grid, vec![s2], vec![], prior).unwrap();
        let chain = run_chain(&p2, &settings, 0).unwrap();
        assert!(chain.samples.iter().all(|s| s.params.log_lik.is_finite()));
    }

    #[test]
    fn nd_model_runs_and_recomputes() {
        let domain = Domain::unit(2);
        let s = StructureDataset {
            source_id: "s".into(),
            points: DMatrix::from_row_slice(2, 2, &[0.2, 0.2, 0.8, 0.8]),
            labels: vec![0, 1],
        };
        let grid = build_grid(&domain, &[6, 6], &[&s.points], None).unwrap();
        let p_data = PropertyDataset {
            source_id: "p".into(),
            points: DMatrix::from_row_slice(2, 2, &[0.2, 0.2, 0.8, 0.8]),
            values: DVector::from_column_slice(&[1.0, -1.0]),
        };
        let prior = PriorConfig {
            regions: 2,
            structure: GpPrior {
                lengthscales: vec![Interval::new(0.1, 2.0).unwrap(), Interval::new(0.1, 2.0).unwrap()],
                std: Interval::new(0.5, 8.0).unwrap(),
            },
            properties: vec![PropertyPrior::uniform(
                RegionGpPrior {
                    lengthscales: vec![Interval::new(0.1, 2.0).unwrap(), Interval::new(0.1, 2.0).unwrap()],
                    std: Interval::new(0.05, 3.0).unwrap(),
                    bias: Interval::new(-2.0, 2.0).unwrap(),
                },
                2,
                Interval::new(0.01, 0.5).unwrap(),
            )],
            label_noise: 0.0,
            variance_sum: false,
        };
        let p = SageProblem::new(ModelKind::SageNd, domain, grid, vec![s], vec![p_data], prior).unwrap();
        let names: Vec<&str> = p.blocks.iter().map(|b| b.name.as_str()).collect();
        assert_eq!(names[0], "seg-hyper");
        assert_eq!(names[1], "seg-whitened");
        assert_eq!(p.blocks[1].dim, 2 * p.grid.len());
        assert_eq!(p.blocks[1].max_step, Some(0.995));

        let settings = McmcSettings {
            iterations: 400,
            burn_in: 200,
            thinning: 20,
            chains: 1,
            seed: 41,
            ..Default::default()
        };
        let chain = run_chain(&p, &settings, 0).unwrap();
        assert_eq!(chain.samples.len(), 10);
        for s in &chain.samples {
            let SegmentationParams::Latent { whitened, .. } = &s.params.segmentation else {
                panic!()
            };
            assert_eq!(whitened.len(), 2);
            // row-stochastic field
            for i in 0..s.field.nrows() {
                let sum: f64 = s.field.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            // N-D biases are sampled, not pinned
            let rebuilt = p
                .state_from_params(s.params.segmentation.clone(), s.params.property.clone())
                .unwrap();
            assert!((rebuilt.params.log_lik - s.params.log_lik).abs() <= 1e-10);
        }
    }
}
