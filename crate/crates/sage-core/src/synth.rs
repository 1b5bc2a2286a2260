//! Seeded synthetic benchmark cases (1-D/2-D edge cases, a four-source 2-D
//! demo) and the metrics used to score fits against their ground truth.
//!
//! Each case has two smooth per-region property surfaces with a jump at the
//! region boundary. The two 1-D edge cases differ in which modality pins the
//! boundary: case 1 places structure labels tightly around it and keeps
//! property samples far away; case 2 reverses the roles. Point locations get
//! a small seeded jitter so repeated seeds give distinct draws without ever
//! breaking those placement contracts.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::{
    build_grid, fmt_float, read_numeric_csv, write_numeric_csv, write_property_csv,
    write_structure_csv, Domain, PredictionGrid, PropertyDataset, StructureDataset,
};
use crate::error::{Result, SageError};

/// Default observation noise on property values.
pub const NOISE_STD: f64 = 0.05;
/// True 1-D boundary location.
pub const CHANGEPOINT_1D: f64 = 0.7;

pub const CASE_NAMES: [&str; 5] = ["edge1d-1", "edge1d-2", "edge2d-1", "edge2d-2", "multisource-2d"];

/// Scalar facts about a generated case, serialized next to the truth tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthMeta {
    pub case: String,
    pub seed: u64,
    pub dim: usize,
    pub regions: usize,
    pub n_properties: usize,
    pub noise: f64,
    pub resolution: Vec<usize>,
    /// 1-D true boundary, when the case has one.
    pub changepoint: Option<f64>,
    /// 1-D interval between the two data points bracketing the boundary
    /// (pooled over all sources); regression metrics skip grid points inside.
    pub mask_exclude: Option<(f64, f64)>,
    pub domain: Vec<(f64, f64)>,
}

/// Noiseless truth on the evaluation grid.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub grid: PredictionGrid,
    pub labels: Vec<usize>,
    /// One noiseless surface per property source.
    pub properties: Vec<DVector<f64>>,
    pub meta: TruthMeta,
}

#[derive(Clone, Debug)]
pub struct SyntheticCase {
    pub domain: Domain,
    pub structure: Vec<StructureDataset>,
    pub property: Vec<PropertyDataset>,
    pub truth: GroundTruth,
}

/// Generates a case by name. Names: `edge1d-1`, `edge1d-2`, `edge2d-1`,
/// `edge2d-2`, `multisource-2d`.
pub fn generate(case: &str, seed: u64) -> Result<SyntheticCase> {
    match case {
        "edge1d-1" => gen_edge_case_1d(1, seed),
        "edge1d-2" => gen_edge_case_1d(2, seed),
        "edge2d-1" => gen_edge_case_2d(1, seed),
        "edge2d-2" => gen_edge_case_2d(2, seed),
        "multisource-2d" => Ok(gen_multisource_2d(seed)),
        other => Err(SageError::Validation(format!(
            "unknown synthetic case {other:?}; valid cases: {}",
            CASE_NAMES.join(", ")
        ))),
    }
}

// ---------------------------------------------------------------------------
// 1-D edge cases

// Per-region property surfaces: near-flat levels at +-0.9 with gentle,
// differently-tuned wiggles, so the boundary is visible only as the jump
// itself. Steeper in-region trends would let a property-only fit
// triangulate the boundary from the slope on each side of the sample gap.
fn f1d(region: usize, x: f64) -> f64 {
    if region == 0 {
        0.9 + 0.1 * (2.0 * x).sin()
    } else {
        -0.9 + 0.12 * (4.0 * x + 1.0).sin()
    }
}

fn label_1d(x: f64) -> usize {
    usize::from(x > CHANGEPOINT_1D)
}

fn col(xs: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(xs.len(), 1, |i, _| xs[i])
}

fn jitter(rng: &mut ChaCha20Rng, base: &[f64], amount: &[f64]) -> Vec<f64> {
    base.iter()
        .zip(amount)
        .map(|(x, a)| {
            let z: f64 = StandardNormal.sample(rng);
            (x + a * z.clamp(-2.0, 2.0) / 2.0).clamp(0.0, 1.0)
        })
        .collect()
}

fn noisy_values(rng: &mut ChaCha20Rng, xs: &[f64], f: impl Fn(f64) -> f64) -> DVector<f64> {
    DVector::from_iterator(
        xs.len(),
        xs.iter().map(|&x| {
            let z: f64 = StandardNormal.sample(rng);
            f(x) + NOISE_STD * z
        }),
    )
}

/// 1-D two-region case with the boundary at 0.7.
///
/// Variant 1: 8 structure labels whose innermost pair brackets the boundary
/// at +-0.02, 8 property samples with a wide off-center empty band around it.
/// Variant 2: the same two layouts with the modalities swapped.
pub fn gen_edge_case_1d(variant: u8, seed: u64) -> Result<SyntheticCase> {
    if !(variant == 1 || variant == 2) {
        return Err(SageError::Validation(format!("1-D edge case variant must be 1 or 2, got {variant}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let tight_base = [0.05, 0.25, 0.45, 0.62, 0.68, 0.72, 0.85, 0.97];
    let tight_amt = [0.02, 0.02, 0.02, 0.01, 0.005, 0.005, 0.02, 0.01];
    // The sparse modality leaves an empty band around the boundary. The band
    // is deliberately off-center (0.35..0.83 around a boundary at 0.70): a
    // band centered on the boundary would hand its location to any method
    // that splits the unsampled interval down the middle.
    let sparse_base = [0.04, 0.11, 0.18, 0.26, 0.32, 0.35, 0.83, 0.99];
    let sparse_amt = [0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.005];

    let tight = jitter(&mut rng, &tight_base, &tight_amt);
    let sparse = jitter(&mut rng, &sparse_base, &sparse_amt);
    let (s_xs, p_xs) = if variant == 1 { (tight, sparse) } else { (sparse, tight) };

    let labels = s_xs.iter().map(|&x| label_1d(x)).collect::<Vec<_>>();
    let values = noisy_values(&mut rng, &p_xs, |x| f1d(label_1d(x), x));
    let structure = StructureDataset::new("structure-0", col(&s_xs), labels)?;
    let property = PropertyDataset::new("property-0", col(&p_xs), values)?;

    let domain = Domain::unit(1);
    let resolution = vec![101];
    let grid = build_grid(&domain, &resolution, &[], None)?;
    let truth_labels: Vec<usize> = (0..grid.len()).map(|i| label_1d(grid.points[(i, 0)])).collect();
    let truth_props = vec![DVector::from_iterator(
        grid.len(),
        (0..grid.len()).map(|i| {
            let x = grid.points[(i, 0)];
            f1d(label_1d(x), x)
        }),
    )];
    let mask_exclude =
        exclusion_interval_1d(CHANGEPOINT_1D, std::slice::from_ref(&structure), std::slice::from_ref(&property));

    let meta = TruthMeta {
        case: format!("edge1d-{variant}"),
        seed,
        dim: 1,
        regions: 2,
        n_properties: 1,
        noise: NOISE_STD,
        resolution,
        changepoint: Some(CHANGEPOINT_1D),
        mask_exclude,
        domain: vec![(0.0, 1.0)],
    };
    Ok(SyntheticCase {
        domain,
        structure: vec![structure],
        property: vec![property],
        truth: GroundTruth { grid, labels: truth_labels, properties: truth_props, meta },
    })
}

// ---------------------------------------------------------------------------
// 2-D cases

/// Boundary curve: region 1 lies at `x1 > boundary_2d(x2)`.
pub fn boundary_2d(x2: f64) -> f64 {
    0.5 + 0.12 * (2.0 * x2).cos()
}

fn label_2d(x1: f64, x2: f64) -> usize {
    usize::from(x1 > boundary_2d(x2))
}

/// Distance from a point to the boundary curve (dense parameter sweep).
pub fn boundary_distance_2d(x1: f64, x2: f64) -> f64 {
    let mut best = f64::INFINITY;
    for k in 0..=1000 {
        let t = k as f64 / 1000.0;
        let d = ((x1 - boundary_2d(t)).powi(2) + (x2 - t).powi(2)).sqrt();
        best = best.min(d);
    }
    best
}

fn f2d(source: usize, region: usize, x1: f64, x2: f64) -> f64 {
    match (source, region) {
        (0, 0) => 0.8 + 0.3 * (2.0 * x1 + x2).sin(),
        (0, _) => -0.8 + 0.3 * (2.0 * x2 + 1.0).cos(),
        (_, 0) => 0.3 + 0.5 * (3.0 * x1).cos(),
        (_, _) => -0.6 + 0.4 * (3.0 * x1 + x2).sin(),
    }
}

fn rows(points: &[(f64, f64)]) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), 2, |i, d| if d == 0 { points[i].0 } else { points[i].1 })
}

/// Point pairs straddling the boundary curve at parameters `ts`, offset
/// `+-off` along x1 with a small seeded jitter.
fn bracket_pairs(rng: &mut ChaCha20Rng, ts: &[f64], off: f64) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(2 * ts.len());
    for &t in ts {
        let b = boundary_2d(t);
        for side in [-1.0, 1.0] {
            let z: f64 = StandardNormal.sample(rng);
            let w: f64 = StandardNormal.sample(rng);
            let x1 = b + side * off * (1.0 + 0.2 * z.clamp(-2.0, 2.0));
            let x2 = (t + 0.01 * w.clamp(-2.0, 2.0)).clamp(0.0, 1.0);
            pts.push((x1.clamp(0.0, 1.0), x2));
        }
    }
    pts
}

/// Coarse lattice staying far from the boundary curve (x1 near the domain
/// edges, all of x2), jittered.
fn far_lattice(rng: &mut ChaCha20Rng) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    for &x1 in &[0.06, 0.2, 0.8, 0.94] {
        for &x2 in &[0.08, 0.35, 0.65, 0.92] {
            let z: f64 = StandardNormal.sample(rng);
            let w: f64 = StandardNormal.sample(rng);
            pts.push((
                (x1 + 0.02 * z.clamp(-2.0, 2.0) / 2.0).clamp(0.0, 1.0),
                (x2 + 0.02 * w.clamp(-2.0, 2.0) / 2.0).clamp(0.0, 1.0),
            ));
        }
    }
    pts
}

fn truth_2d(resolution: &[usize], n_properties: usize) -> Result<(PredictionGrid, Vec<usize>, Vec<DVector<f64>>)> {
    let grid = build_grid(&Domain::unit(2), resolution, &[], None)?;
    let labels: Vec<usize> =
        (0..grid.len()).map(|i| label_2d(grid.points[(i, 0)], grid.points[(i, 1)])).collect();
    let props = (0..n_properties)
        .map(|j| {
            DVector::from_iterator(
                grid.len(),
                (0..grid.len()).map(|i| {
                    let (x1, x2) = (grid.points[(i, 0)], grid.points[(i, 1)]);
                    f2d(j, label_2d(x1, x2), x1, x2)
                }),
            )
        })
        .collect();
    Ok((grid, labels, props))
}

/// 2-D two-region case: a cosine boundary curve. Variant 1: 24 structure
/// labels bracketing the curve, 16 property samples on a far lattice near the
/// domain edges. Variant 2: 16 far structure labels, 12 bracketing property
/// samples plus 8 far ones.
pub fn gen_edge_case_2d(variant: u8, seed: u64) -> Result<SyntheticCase> {
    if !(variant == 1 || variant == 2) {
        return Err(SageError::Validation(format!("2-D edge case variant must be 1 or 2, got {variant}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (s_pts, p_pts) = if variant == 1 {
        let ts: Vec<f64> = (0..12).map(|k| 0.04 + 0.92 * k as f64 / 11.0).collect();
        let near = bracket_pairs(&mut rng, &ts, 0.03);
        let far = far_lattice(&mut rng);
        (near, far)
    } else {
        // swapped roles: property brackets the curve instead. It also keeps a
        // checkerboard of a second far lattice: a regression scored over the
        // full grid needs the far field observed by someone, and here the
        // property source is the only one carrying values.
        let ts: Vec<f64> = (0..6).map(|k| 0.04 + 0.92 * k as f64 / 5.0).collect();
        let far = far_lattice(&mut rng);
        let mut near = bracket_pairs(&mut rng, &ts, 0.03);
        let far2 = far_lattice(&mut rng);
        near.extend(far2.iter().enumerate().filter(|&(i, _)| (i / 4 + i % 4) % 2 == 0).map(|(_, &p)| p));
        (far, near)
    };

    let labels: Vec<usize> = s_pts.iter().map(|&(a, b)| label_2d(a, b)).collect();
    let structure = StructureDataset::new("structure-0", rows(&s_pts), labels)?;
    let values = DVector::from_iterator(
        p_pts.len(),
        p_pts.iter().map(|&(a, b)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            f2d(0, label_2d(a, b), a, b) + NOISE_STD * z
        }),
    );
    let property = PropertyDataset::new("property-0", rows(&p_pts), values)?;

    let resolution = vec![15, 15];
    let (grid, truth_labels, truth_props) = truth_2d(&resolution, 1)?;
    let meta = TruthMeta {
        case: format!("edge2d-{variant}"),
        seed,
        dim: 2,
        regions: 2,
        n_properties: 1,
        noise: NOISE_STD,
        resolution,
        changepoint: None,
        mask_exclude: None,
        domain: vec![(0.0, 1.0), (0.0, 1.0)],
    };
    Ok(SyntheticCase {
        domain: Domain::unit(2),
        structure: vec![structure],
        property: vec![property],
        truth: GroundTruth { grid, labels: truth_labels, properties: truth_props, meta },
    })
}

/// Four-source 2-D demo: structure source 0 brackets the upper boundary
/// segment, source 1 the lower; two property sources sample distinct
/// surfaces on jittered lattices.
pub fn gen_multisource_2d(seed: u64) -> SyntheticCase {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let upper = {
        let mut pts = bracket_pairs(&mut rng, &[0.6, 0.75, 0.9], 0.03);
        for &x2 in &[0.6, 0.8, 0.95] {
            let z: f64 = StandardNormal.sample(&mut rng);
            pts.push(((0.12 + 0.01 * z.clamp(-2.0, 2.0)).clamp(0.0, 1.0), x2));
            pts.push((1.0 - pts.last().unwrap().0, x2));
        }
        pts
    };
    let lower = {
        let mut pts = bracket_pairs(&mut rng, &[0.1, 0.25, 0.4], 0.03);
        for &x2 in &[0.05, 0.2, 0.4] {
            let z: f64 = StandardNormal.sample(&mut rng);
            pts.push(((0.12 + 0.01 * z.clamp(-2.0, 2.0)).clamp(0.0, 1.0), x2));
            pts.push((1.0 - pts.last().unwrap().0, x2));
        }
        pts
    };
    let mut structure = Vec::new();
    for (i, pts) in [(0usize, &upper), (1, &lower)] {
        let labels: Vec<usize> = pts.iter().map(|&(a, b)| label_2d(a, b)).collect();
        structure.push(
            StructureDataset::new(format!("structure-{i}"), rows(pts), labels)
                .expect("constructed points are valid"),
        );
    }

    let mut property = Vec::new();
    for j in 0..2usize {
        let pts = far_lattice(&mut rng);
        let values = DVector::from_iterator(
            pts.len(),
            pts.iter().map(|&(a, b)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                f2d(j, label_2d(a, b), a, b) + NOISE_STD * z
            }),
        );
        property.push(
            PropertyDataset::new(format!("property-{j}"), rows(&pts), values)
                .expect("constructed points are valid"),
        );
    }

    let resolution = vec![15, 15];
    let (grid, truth_labels, truth_props) =
        truth_2d(&resolution, 2).expect("fixed resolution is valid");
    let meta = TruthMeta {
        case: "multisource-2d".into(),
        seed,
        dim: 2,
        regions: 2,
        n_properties: 2,
        noise: NOISE_STD,
        resolution,
        changepoint: None,
        mask_exclude: None,
        domain: vec![(0.0, 1.0), (0.0, 1.0)],
    };
    SyntheticCase {
        domain: Domain::unit(2),
        structure,
        property,
        truth: GroundTruth { grid, labels: truth_labels, properties: truth_props, meta },
    }
}

// ---------------------------------------------------------------------------
// Metrics

/// Fraction of mask-selected points whose predicted label matches the truth.
pub fn accuracy(predicted: &[usize], truth: &[usize], mask: &[bool]) -> Result<f64> {
    if predicted.len() != truth.len() || mask.len() != truth.len() {
        return Err(SageError::Dimension(format!(
            "accuracy inputs disagree: {} predictions, {} truths, {} mask entries",
            predicted.len(),
            truth.len(),
            mask.len()
        )));
    }
    let mut kept = 0usize;
    let mut hit = 0usize;
    for i in 0..truth.len() {
        if mask[i] {
            kept += 1;
            hit += usize::from(predicted[i] == truth[i]);
        }
    }
    if kept == 0 {
        return Err(SageError::Validation("accuracy mask selects no points".into()));
    }
    Ok(hit as f64 / kept as f64)
}

/// `1 - SS_res/SS_tot` over mask-selected points, SS_tot around the masked
/// truth mean. Constant truth on the mask leaves SS_tot zero: error.
pub fn r_squared(predicted: &DVector<f64>, truth: &DVector<f64>, mask: &[bool]) -> Result<f64> {
    if predicted.len() != truth.len() || mask.len() != truth.len() {
        return Err(SageError::Dimension(format!(
            "R^2 inputs disagree: {} predictions, {} truths, {} mask entries",
            predicted.len(),
            truth.len(),
            mask.len()
        )));
    }
    let idx: Vec<usize> = (0..truth.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(SageError::Validation("R^2 mask selects no points".into()));
    }
    let mean = idx.iter().map(|&i| truth[i]).sum::<f64>() / idx.len() as f64;
    let ss_tot: f64 = idx.iter().map(|&i| (truth[i] - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(SageError::Validation("truth is constant on the mask; R^2 is undefined".into()));
    }
    let ss_res: f64 = idx.iter().map(|&i| (truth[i] - predicted[i]).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// 1-D interval between the data point nearest the boundary from below
/// (inclusive side) and from strictly above, pooled over all sources.
/// `None` when either side has no data.
pub fn exclusion_interval_1d(
    changepoint: f64,
    structure: &[StructureDataset],
    property: &[PropertyDataset],
) -> Option<(f64, f64)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut consider = |x: f64| {
        if x <= changepoint {
            lo = lo.max(x);
        } else {
            hi = hi.min(x);
        }
    };
    for ds in structure {
        for i in 0..ds.len() {
            consider(ds.points[(i, 0)]);
        }
    }
    for ds in property {
        for i in 0..ds.len() {
            consider(ds.points[(i, 0)]);
        }
    }
    (lo.is_finite() && hi.is_finite()).then_some((lo, hi))
}

/// Mask over grid points: false inside the closed exclusion interval (first
/// coordinate), true everywhere else. `None` keeps the whole grid.
pub fn grid_mask(grid: &PredictionGrid, exclude: Option<(f64, f64)>) -> Vec<bool> {
    match exclude {
        None => vec![true; grid.len()],
        Some((lo, hi)) => (0..grid.len())
            .map(|i| {
                let x = grid.points[(i, 0)];
                !(x >= lo && x <= hi)
            })
            .collect(),
    }
}

/// Wasserstein-1 distance between two empirical distributions, integrating
/// |F_a - F_b| over the merged support.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(SageError::Validation("Wasserstein distance needs non-empty samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("samples must not contain NaN"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("samples must not contain NaN"));
    let mut merged: Vec<f64> = sa.iter().chain(sb.iter()).copied().collect();
    merged.sort_by(|x, y| x.partial_cmp(y).unwrap());
    merged.dedup();
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let cdf = |sorted: &[f64], x: f64, n: f64| -> f64 {
        sorted.partition_point(|&v| v <= x) as f64 / n
    };
    let mut w = 0.0;
    for win in merged.windows(2) {
        w += (win[1] - win[0]) * (cdf(&sa, win[0], na) - cdf(&sb, win[0], nb)).abs();
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// Disk round trip

/// Writes `structure_{i}.csv`, `property_{j}.csv`, and a `truth/` directory
/// with `labels.csv`, `prop_{j}.csv`, `meta.json`.
pub fn export_case(dir: &Path, case: &SyntheticCase) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, ds) in case.structure.iter().enumerate() {
        write_structure_csv(&dir.join(format!("structure_{i}.csv")), ds)?;
    }
    for (j, ds) in case.property.iter().enumerate() {
        write_property_csv(&dir.join(format!("property_{j}.csv")), ds)?;
    }
    export_truth(&dir.join("truth"), &case.truth)
}

pub fn export_truth(dir: &Path, truth: &GroundTruth) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let dim = truth.grid.dim();
    {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("labels.csv"))?);
        let mut hdr: Vec<String> = (1..=dim).map(|d| format!("x{d}")).collect();
        hdr.push("label".into());
        writeln!(f, "{}", hdr.join(","))?;
        for i in 0..truth.grid.len() {
            let mut cells: Vec<String> = truth.grid.row(i).iter().map(|v| fmt_float(*v)).collect();
            cells.push(format!("{}", truth.labels[i]));
            writeln!(f, "{}", cells.join(","))?;
        }
    }
    for (j, values) in truth.properties.iter().enumerate() {
        let mut hdr: Vec<String> = (1..=dim).map(|d| format!("x{d}")).collect();
        hdr.push("value".into());
        let hdr_refs: Vec<&str> = hdr.iter().map(|s| s.as_str()).collect();
        write_numeric_csv(
            &dir.join(format!("prop_{j}.csv")),
            &hdr_refs,
            (0..truth.grid.len()).map(|i| {
                let mut row = truth.grid.row(i);
                row.push(values[i]);
                row
            }),
        )?;
    }
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&truth.meta)?)?;
    Ok(())
}

pub fn load_truth(dir: &Path) -> Result<GroundTruth> {
    let meta: TruthMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let table = read_numeric_csv(&dir.join("labels.csv"))?;
    let dim = meta.dim;
    if table.headers.len() != dim + 1 {
        return Err(SageError::Validation(format!(
            "labels.csv has {} columns, expected {} coordinates + label",
            table.headers.len(),
            dim
        )));
    }
    let g = table.rows.len();
    let points = DMatrix::from_fn(g, dim, |i, d| table.rows[i][d]);
    let labels: Vec<usize> = table
        .rows
        .iter()
        .map(|row| {
            let v = row[dim];
            let l = v.round();
            if (v - l).abs() > 1e-9 || l < 0.0 || l >= meta.regions as f64 {
                Err(SageError::Validation(format!("truth label {v} is not in [0, {})", meta.regions)))
            } else {
                Ok(l as usize)
            }
        })
        .collect::<Result<_>>()?;
    let mut properties = Vec::with_capacity(meta.n_properties);
    for j in 0..meta.n_properties {
        let t = read_numeric_csv(&dir.join(format!("prop_{j}.csv")))?;
        if t.rows.len() != g {
            return Err(SageError::Validation(format!(
                "truth prop_{j}.csv has {} rows, labels.csv has {g}",
                t.rows.len()
            )));
        }
        let vals: Vec<f64> = t
            .rows
            .iter()
            .map(|row| {
                row.last().copied().ok_or_else(|| {
                    SageError::Validation(format!("truth prop_{j}.csv has an empty row"))
                })
            })
            .collect::<Result<_>>()?;
        properties.push(DVector::from_column_slice(&vals));
    }
    let grid = PredictionGrid { points, resolution: meta.resolution.clone() };
    Ok(GroundTruth { grid, labels, properties, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn nearest(xs: impl Iterator<Item = f64>, target: f64) -> f64 {
        xs.map(|x| (x - target).abs()).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn generators_deterministic_per_seed() {
        for name in CASE_NAMES {
            let a = generate(name, 42).unwrap();
            let b = generate(name, 42).unwrap();
            assert_eq!(a.structure.len(), b.structure.len());
            for (x, y) in a.structure.iter().zip(&b.structure) {
                assert_eq!(x.points, y.points);
                assert_eq!(x.labels, y.labels);
            }
            for (x, y) in a.property.iter().zip(&b.property) {
                assert_eq!(x.points, y.points);
                assert!(x.values.iter().zip(y.values.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
            }
            assert_eq!(a.truth.labels, b.truth.labels);
            let c = generate(name, 43).unwrap();
            let moved = a.structure[0].points != c.structure[0].points
                || a.property[0].points != c.property[0].points;
            assert!(moved, "{name} ignored its seed");
        }
        assert!(generate("edge3d-1", 1).is_err());
    }

    #[test]
    fn edge1d_placement_contracts() {
        for seed in [0u64, 7, 99] {
            let case = generate("edge1d-1", seed).unwrap();
            let s = nearest(case.structure[0].points.column(0).iter().copied(), CHANGEPOINT_1D);
            let p = nearest(case.property[0].points.column(0).iter().copied(), CHANGEPOINT_1D);
            assert!(s < p, "variant 1 seed {seed}: structure {s} not closer than property {p}");

            let case = generate("edge1d-2", seed).unwrap();
            let s = nearest(case.structure[0].points.column(0).iter().copied(), CHANGEPOINT_1D);
            let p = nearest(case.property[0].points.column(0).iter().copied(), CHANGEPOINT_1D);
            assert!(p < s, "variant 2 seed {seed}: property {p} not closer than structure {s}");

            for ds in &case.structure {
                for i in 0..ds.len() {
                    assert_eq!(ds.labels[i], label_1d(ds.points[(i, 0)]));
                }
            }
            let (lo, hi) = case.truth.meta.mask_exclude.unwrap();
            assert!(lo <= CHANGEPOINT_1D && CHANGEPOINT_1D < hi);
        }
    }

    #[test]
    fn edge2d_placement_contracts() {
        for seed in [0u64, 5] {
            for (variant, structure_informative) in [(1u8, true), (2, false)] {
                let case = generate(&format!("edge2d-{variant}"), seed).unwrap();
                let sd = (0..case.structure[0].len())
                    .map(|i| boundary_distance_2d(case.structure[0].points[(i, 0)], case.structure[0].points[(i, 1)]))
                    .fold(f64::INFINITY, f64::min);
                let pd = (0..case.property[0].len())
                    .map(|i| boundary_distance_2d(case.property[0].points[(i, 0)], case.property[0].points[(i, 1)]))
                    .fold(f64::INFINITY, f64::min);
                if structure_informative {
                    assert!(sd < pd, "variant 1: structure {sd} vs property {pd}");
                } else {
                    assert!(pd < sd, "variant 2: property {pd} vs structure {sd}");
                }
                for ds in &case.structure {
                    for i in 0..ds.len() {
                        assert_eq!(ds.labels[i], label_2d(ds.points[(i, 0)], ds.points[(i, 1)]));
                    }
                }
            }
        }
    }

    #[test]
    fn multisource_concentration_contracts() {
        for seed in [0u64, 11] {
            let case = gen_multisource_2d(seed);
            assert_eq!(case.structure.len(), 2);
            assert_eq!(case.property.len(), 2);
            let mean_x2 = |ds: &StructureDataset| {
                (0..ds.len()).map(|i| ds.points[(i, 1)]).sum::<f64>() / ds.len() as f64
            };
            assert!(mean_x2(&case.structure[0]) > 0.55, "source 0 not concentrated upper");
            assert!(mean_x2(&case.structure[1]) < 0.45, "source 1 not concentrated lower");
            for ds in &case.structure {
                for i in 0..ds.len() {
                    assert_eq!(ds.labels[i], label_2d(ds.points[(i, 0)], ds.points[(i, 1)]));
                }
            }
            // distinct surfaces
            let diff = (&case.truth.properties[0] - &case.truth.properties[1]).norm();
            assert!(diff > 1.0, "property surfaces nearly identical: {diff}");
        }
    }

    #[test]
    fn truth_labels_in_range() {
        for name in CASE_NAMES {
            let case = generate(name, 3).unwrap();
            assert!(case.truth.labels.iter().all(|&l| l < case.truth.meta.regions));
            assert_eq!(case.truth.properties.len(), case.truth.meta.n_properties);
            for p in &case.truth.properties {
                assert_eq!(p.len(), case.truth.grid.len());
            }
        }
    }

    #[test]
    fn accuracy_examples_and_errors() {
        let t = vec![0usize, 1, 1, 0];
        assert_eq!(accuracy(&t, &t, &[true; 4]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 0, 1], &t, &[true; 4]).unwrap(), 0.5);
        // mask drops the wrong half
        assert_eq!(accuracy(&[0, 1, 0, 1], &t, &[true, true, false, false]).unwrap(), 1.0);
        assert!(accuracy(&t, &t, &[false; 4]).is_err());
        assert!(accuracy(&t[..3], &t, &[true; 4]).is_err());
    }

    #[test]
    fn r_squared_examples_and_errors() {
        let t = DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert!((r_squared(&t, &t, &[true; 4]).unwrap() - 1.0).abs() < 1e-15);
        let mean = DVector::from_element(4, 2.5);
        assert!((r_squared(&mean, &t, &[true; 4]).unwrap()).abs() < 1e-15);
        // anti-correlated prediction: worse than the mean
        let bad = DVector::from_column_slice(&[4.0, 3.0, 2.0, 1.0]);
        assert!(r_squared(&bad, &t, &[true; 4]).unwrap() < 0.0);
        let constant = DVector::from_element(4, 7.0);
        assert!(r_squared(&t, &constant, &[true; 4]).is_err());
        assert!(r_squared(&t, &t, &[false; 4]).is_err());
    }

    #[test]
    fn metric_oracle_equivalence() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for trial in 0..100 {
            let n = rng.random_range(1..40usize);
            let labels_t: Vec<usize> = (0..n).map(|_| rng.random_range(0..3usize)).collect();
            let labels_p: Vec<usize> = (0..n).map(|_| rng.random_range(0..3usize)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_range(0..2u8) == 1).collect();
            if !mask.iter().any(|&m| m) {
                mask[0] = true;
            }
            // independent oracle: explicit filtered recount
            let pairs: Vec<(usize, usize)> = labels_p
                .iter()
                .zip(&labels_t)
                .zip(&mask)
                .filter(|&(_, &m)| m)
                .map(|((&p, &t), _)| (p, t))
                .collect();
            let oracle = pairs.iter().filter(|(p, t)| p == t).count() as f64 / pairs.len() as f64;
            assert_eq!(accuracy(&labels_p, &labels_t, &mask).unwrap(), oracle, "trial {trial}");

            let truth = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let pred = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let sel: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
            let m = sel.iter().map(|&i| truth[i]).sum::<f64>() / sel.len() as f64;
            let sst: f64 = sel.iter().map(|&i| (truth[i] - m) * (truth[i] - m)).sum();
            if sst == 0.0 {
                continue;
            }
            let ssr: f64 = sel.iter().map(|&i| (truth[i] - pred[i]) * (truth[i] - pred[i])).sum();
            let oracle = 1.0 - ssr / sst;
            let got = r_squared(&pred, &truth, &mask).unwrap();
            assert!((got - oracle).abs() < 1e-12, "trial {trial}: {got} vs {oracle}");
        }
    }

    #[test]
    fn exclusion_interval_brackets_pooled_data() {
        let s = StructureDataset::new("s", col(&[0.1, 0.65]), vec![0, 0]).unwrap();
        let p = PropertyDataset::new("p", col(&[0.70, 0.74, 0.9]), DVector::zeros(3)).unwrap();
        // 0.70 sits on the inclusive side; nearest above comes from property
        let (lo, hi) = exclusion_interval_1d(0.7, &[s.clone()], &[p]).unwrap();
        assert_eq!(lo, 0.70);
        assert_eq!(hi, 0.74);
        // no data above the boundary -> no interval
        assert!(exclusion_interval_1d(0.7, &[s], &[]).is_none());
    }

    #[test]
    fn grid_mask_excludes_closed_interval() {
        let grid = build_grid(&Domain::unit(1), &[11], &[], None).unwrap();
        let mask = grid_mask(&grid, Some((0.3, 0.5)));
        for i in 0..grid.len() {
            let x = grid.points[(i, 0)];
            assert_eq!(mask[i], !(0.3..=0.5).contains(&x), "x = {x}");
        }
        assert!(grid_mask(&grid, None).iter().all(|&m| m));
    }

    #[test]
    fn wasserstein_examples() {
        let a = [0.1, 0.4, 0.7];
        assert_eq!(wasserstein_1d(&a, &a).unwrap(), 0.0);
        let shifted: Vec<f64> = a.iter().map(|x| x + 0.25).collect();
        assert!((wasserstein_1d(&a, &shifted).unwrap() - 0.25).abs() < 1e-12);
        // {0,1} vs {0.5}: |F difference| is 1/2 over an interval of length 1
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.5]).unwrap() - 0.5).abs() < 1e-12);
        assert!(wasserstein_1d(&[], &a).is_err());
    }

    #[test]
    fn wasserstein_matches_sorted_pairing_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..50 {
            let n = rng.random_range(1..30usize);
            let mut a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = wasserstein_1d(&a, &b).unwrap();
            let w_rev = wasserstein_1d(&b, &a).unwrap();
            assert!((w - w_rev).abs() < 1e-12);
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            // equal counts: optimal transport pairs order statistics
            let oracle = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
            assert!((w - oracle).abs() < 1e-12, "{w} vs {oracle}");
        }
    }

    #[test]
    fn case_export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["edge1d-1", "multisource-2d"] {
            let case = generate(name, 9).unwrap();
            let case_dir = dir.path().join(name);
            export_case(&case_dir, &case).unwrap();
            for i in 0..case.structure.len() {
                assert!(case_dir.join(format!("structure_{i}.csv")).exists());
            }
            for j in 0..case.property.len() {
                assert!(case_dir.join(format!("property_{j}.csv")).exists());
            }
            let truth = load_truth(&case_dir.join("truth")).unwrap();
            assert_eq!(truth.labels, case.truth.labels);
            assert_eq!(truth.meta, case.truth.meta);
            assert_eq!(truth.grid.points, case.truth.grid.points);
            for (x, y) in truth.properties.iter().zip(&case.truth.properties) {
                assert!(x.iter().zip(y.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
            }
        }
    }

    #[test]
    fn edge1d_noise_level_matches_declared() {
        // average squared deviation from the noiseless surface over many
        // seeds estimates NOISE_STD^2
        let mut sq = 0.0;
        let mut count = 0usize;
        for seed in 0..40u64 {
            let case = generate("edge1d-1", seed).unwrap();
            let ds = &case.property[0];
            for i in 0..ds.len() {
                let x = ds.points[(i, 0)];
                let resid = ds.values[i] - f1d(label_1d(x), x);
                sq += resid * resid;
                count += 1;
            }
        }
        let est = (sq / count as f64).sqrt();
        assert!(
            (est - NOISE_STD).abs() < 0.02,
            "estimated noise {est} vs declared {NOISE_STD}"
        );
    }
}
