//! Datasets, domains, prediction grids, prior configuration, and CSV I/O.
//!
//! CSV conventions: comma-delimited UTF-8 with a header row, `#` starts a
//! comment line. Structure files use `x1,..,xd,label` (non-negative integer
//! labels), property files `x1,..,xd,y`. Floats are written with Rust's
//! shortest round-trip formatting, so write-then-read reproduces every finite
//! value bit-exactly.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SageError};

/// Coordinate tolerance used when matching points against grid rows.
pub const POINT_MATCH_TOL: f64 = 1e-12;

/// Default cap on prediction grid size.
pub const DEFAULT_GRID_CAP: usize = 20_000;

/// Closed interval. Used both for domain bounds and uniform prior bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let iv = Interval { lo, hi };
        iv.validate("interval")?;
        Ok(iv)
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(SageError::Validation(format!(
                "{what} bounds must be finite with lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Axis-aligned box domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub bounds: Vec<Interval>,
}

impl Domain {
    pub fn new(bounds: Vec<Interval>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(SageError::Validation("domain must have at least one dimension".into()));
        }
        for (d, b) in bounds.iter().enumerate() {
            b.validate(&format!("domain dimension {d}"))?;
        }
        Ok(Domain { bounds })
    }

    pub fn unit(dim: usize) -> Self {
        Domain { bounds: vec![Interval { lo: 0.0, hi: 1.0 }; dim] }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn contains_row(&self, points: &DMatrix<f64>, row: usize) -> bool {
        self.bounds.iter().enumerate().all(|(d, b)| b.contains(points[(row, d)]))
    }
}

/// Labeled structure observations from one source.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureDataset {
    pub source_id: String,
    /// N x d point coordinates.
    pub points: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl StructureDataset {
    pub fn new(source_id: impl Into<String>, points: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if points.nrows() != labels.len() {
            return Err(SageError::Dimension(format!(
                "structure dataset: {} points but {} labels",
                points.nrows(),
                labels.len()
            )));
        }
        check_finite_points(&points, "structure")?;
        Ok(StructureDataset { source_id: source_id.into(), points, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Scalar property measurements from one source.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertyDataset {
    pub source_id: String,
    /// N x d point coordinates.
    pub points: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl PropertyDataset {
    pub fn new(source_id: impl Into<String>, points: DMatrix<f64>, values: DVector<f64>) -> Result<Self> {
        if points.nrows() != values.len() {
            return Err(SageError::Dimension(format!(
                "property dataset: {} points but {} values",
                points.nrows(),
                values.len()
            )));
        }
        check_finite_points(&points, "property")?;
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(SageError::Validation(format!("property value {bad} is not finite")));
        }
        Ok(PropertyDataset { source_id: source_id.into(), points, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }
}

fn check_finite_points(points: &DMatrix<f64>, what: &str) -> Result<()> {
    for i in 0..points.nrows() {
        for d in 0..points.ncols() {
            if !points[(i, d)].is_finite() {
                return Err(SageError::Validation(format!("{what} point {i} coordinate {d} is not finite")));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV ingestion / writing

fn expected_coord_header(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("x{i}")).collect()
}

struct CsvRows {
    dim: usize,
    /// (line number, coordinates, last-column raw text)
    rows: Vec<(u64, Vec<f64>, String)>,
}

fn read_csv_generic(path: &Path, last_col: &str) -> Result<CsvRows> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => SageError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("cannot open {}: {e}", path.display()),
            )),
            _ => SageError::CsvData { line: 1, msg: e.to_string() },
        })?;

    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| SageError::CsvData { line: 1, msg: e.to_string() })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.len() < 2 {
        return Err(SageError::CsvData {
            line: 1,
            msg: format!("expected at least 2 columns (x1,..,{last_col}), got {}", headers.len()),
        });
    }
    let d = headers.len() - 1;
    let expected = expected_coord_header(d);
    if headers[..d] != expected[..] || headers[d] != last_col {
        return Err(SageError::CsvData {
            line: 1,
            msg: format!(
                "expected header {},{last_col}, got {}",
                expected.join(","),
                headers.join(",")
            ),
        });
    }

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| SageError::CsvData {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let mut coords = Vec::with_capacity(d);
        for (i, field) in rec.iter().take(d).enumerate() {
            let v: f64 = field.parse().map_err(|_| SageError::CsvData {
                line,
                msg: format!("cannot parse coordinate x{} from {field:?}", i + 1),
            })?;
            if !v.is_finite() {
                return Err(SageError::CsvData {
                    line,
                    msg: format!("coordinate x{} must be finite, got {field:?}", i + 1),
                });
            }
            coords.push(v);
        }
        rows.push((line, coords, rec[d].to_string()));
    }
    Ok(CsvRows { dim: d, rows })
}

/// Reads a structure CSV (`x1,..,xd,label`).
pub fn read_structure_csv(path: &Path, source_id: &str) -> Result<StructureDataset> {
    let raw = read_csv_generic(path, "label")?;
    let n = raw.rows.len();
    let mut points = DMatrix::zeros(n, raw.dim);
    let mut labels = Vec::with_capacity(n);
    for (i, (line, coords, last)) in raw.rows.iter().enumerate() {
        for (d, c) in coords.iter().enumerate() {
            points[(i, d)] = *c;
        }
        let as_f: f64 = last.parse().map_err(|_| SageError::CsvData {
            line: *line,
            msg: format!("cannot parse label from {last:?}"),
        })?;
        if !as_f.is_finite() || as_f.fract() != 0.0 || as_f < 0.0 {
            return Err(SageError::CsvData {
                line: *line,
                msg: format!("non-integer label {last:?} (labels are non-negative integers)"),
            });
        }
        labels.push(as_f as usize);
    }
    StructureDataset::new(source_id, points, labels)
}

/// Reads a property CSV (`x1,..,xd,y`).
pub fn read_property_csv(path: &Path, source_id: &str) -> Result<PropertyDataset> {
    let raw = read_csv_generic(path, "y")?;
    let n = raw.rows.len();
    let mut points = DMatrix::zeros(n, raw.dim);
    let mut values = DVector::zeros(n);
    for (i, (line, coords, last)) in raw.rows.iter().enumerate() {
        for (d, c) in coords.iter().enumerate() {
            points[(i, d)] = *c;
        }
        let v: f64 = last.parse().map_err(|_| SageError::CsvData {
            line: *line,
            msg: format!("cannot parse y from {last:?}"),
        })?;
        if !v.is_finite() {
            return Err(SageError::CsvData { line: *line, msg: format!("y must be finite, got {last:?}") });
        }
        values[i] = v;
    }
    PropertyDataset::new(source_id, points, values)
}

/// Writes a numeric table with full round-trip float precision.
/// Full-precision cell format: 17 significant digits, enough to reproduce
/// any f64 bit-exactly on re-parse.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_numeric_csv(path: &Path, headers: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", headers.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| fmt_float(*v)).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}

pub fn write_structure_csv(path: &Path, ds: &StructureDataset) -> Result<()> {
    let d = ds.points.ncols();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut headers = expected_coord_header(d);
    headers.push("label".into());
    writeln!(f, "{}", headers.join(","))?;
    for i in 0..ds.len() {
        let mut cells: Vec<String> = (0..d).map(|k| fmt_float(ds.points[(i, k)])).collect();
        cells.push(format!("{}", ds.labels[i]));
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}

pub fn write_property_csv(path: &Path, ds: &PropertyDataset) -> Result<()> {
    let d = ds.points.ncols();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut headers = expected_coord_header(d);
    headers.push("y".into());
    writeln!(f, "{}", headers.join(","))?;
    for i in 0..ds.len() {
        let mut cells: Vec<String> = (0..d).map(|k| fmt_float(ds.points[(i, k)])).collect();
        cells.push(fmt_float(ds.values[i]));
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Generic numeric table (used by report/predict to read exported fields).
#[derive(Clone, Debug)]
pub struct NumericTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_numeric_csv(path: &Path) -> Result<NumericTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => SageError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("cannot open {}: {e}", path.display()),
            )),
            _ => SageError::CsvData { line: 1, msg: e.to_string() },
        })?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| SageError::CsvData { line: 1, msg: e.to_string() })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| SageError::CsvData {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let mut row = Vec::with_capacity(rec.len());
        for field in rec.iter() {
            row.push(field.parse::<f64>().map_err(|_| SageError::CsvData {
                line,
                msg: format!("cannot parse number from {field:?}"),
            })?);
        }
        rows.push(row);
    }
    Ok(NumericTable { headers, rows })
}

// ---------------------------------------------------------------------------
// Prediction grid

/// Finite evaluation grid: a tensor lattice over the domain, with every data
/// point appended (deduplicated within [`POINT_MATCH_TOL`]).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionGrid {
    /// G x d coordinates. Lattice rows first (last dimension fastest), then
    /// appended data points in input order.
    pub points: DMatrix<f64>,
    /// Lattice resolution per dimension.
    pub resolution: Vec<usize>,
}

impl PredictionGrid {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Row index of a point, matched within [`POINT_MATCH_TOL`] per coordinate.
    pub fn index_of(&self, coords: &[f64]) -> Option<usize> {
        let d = self.dim();
        if coords.len() != d {
            return None;
        }
        (0..self.len()).find(|&i| (0..d).all(|k| (self.points[(i, k)] - coords[k]).abs() <= POINT_MATCH_TOL))
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.dim()).map(|k| self.points[(i, k)]).collect()
    }
}

pub fn linspace(iv: Interval, n: usize) -> Vec<f64> {
    assert!(n >= 2, "linspace needs at least 2 points");
    (0..n).map(|i| iv.lo + iv.width() * i as f64 / (n - 1) as f64).collect()
}

/// Builds the evaluation grid: tensor lattice (resolution per dim, each >= 2)
/// plus all data points. Errors when the total exceeds `cap`
/// (default [`DEFAULT_GRID_CAP`]), advising a coarser resolution.
pub fn build_grid(
    domain: &Domain,
    resolution: &[usize],
    data_points: &[&DMatrix<f64>],
    cap: Option<usize>,
) -> Result<PredictionGrid> {
    let d = domain.dim();
    if resolution.len() != d {
        return Err(SageError::Dimension(format!(
            "resolution has {} entries for a {d}-dimensional domain",
            resolution.len()
        )));
    }
    if let Some(bad) = resolution.iter().position(|&r| r < 2) {
        return Err(SageError::Validation(format!(
            "grid resolution must be >= 2 per dimension, got {} at dimension {bad}",
            resolution[bad]
        )));
    }
    let cap = cap.unwrap_or(DEFAULT_GRID_CAP);
    let lattice_size: usize = resolution.iter().product();
    let extra: usize = data_points.iter().map(|m| m.nrows()).sum();
    if lattice_size.saturating_add(extra) > cap {
        return Err(SageError::Validation(format!(
            "grid would have up to {} points, cap is {cap}; use a coarser resolution",
            lattice_size + extra
        )));
    }

    let axes: Vec<Vec<f64>> = domain
        .bounds
        .iter()
        .zip(resolution)
        .map(|(iv, &r)| linspace(*iv, r))
        .collect();

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(lattice_size);
    let mut idx = vec![0usize; d];
    loop {
        rows.push((0..d).map(|k| axes[k][idx[k]]).collect());
        // odometer increment, last dimension fastest
        let mut k = d;
        loop {
            if k == 0 {
                break;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < resolution[k] {
                break;
            }
            idx[k] = 0;
            if k == 0 {
                idx.clear();
                break;
            }
        }
        if idx.is_empty() {
            break;
        }
    }

    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= POINT_MATCH_TOL);
    for m in data_points {
        if m.ncols() != d {
            return Err(SageError::Dimension(format!(
                "data points have {} columns, domain is {d}-dimensional",
                m.ncols()
            )));
        }
        for i in 0..m.nrows() {
            let p: Vec<f64> = (0..d).map(|k| m[(i, k)]).collect();
            if !rows.iter().any(|r| close(r, &p)) {
                rows.push(p);
            }
        }
    }
    if rows.len() > cap {
        return Err(SageError::Validation(format!(
            "grid has {} points, cap is {cap}; use a coarser resolution",
            rows.len()
        )));
    }

    let g = rows.len();
    let points = DMatrix::from_fn(g, d, |i, k| rows[i][k]);
    Ok(PredictionGrid { points, resolution: resolution.to_vec() })
}

// ---------------------------------------------------------------------------
// Prior configuration

/// Uniform prior bounds for one GP's hyperparameters (no bias: segmentation
/// latents and 1-D property GPs are zero-mean).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpPrior {
    /// Per-dimension lengthscale bounds.
    pub lengthscales: Vec<Interval>,
    pub std: Interval,
}

/// Bounds for one (property, region) GP, including its constant bias mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionGpPrior {
    pub lengthscales: Vec<Interval>,
    pub std: Interval,
    pub bias: Interval,
}

/// Bounds for one property source: per-region GP bounds plus the shared
/// noise scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyPrior {
    pub regions: Vec<RegionGpPrior>,
    pub noise: Interval,
}

impl PropertyPrior {
    /// Same GP bounds for every region.
    pub fn uniform(region: RegionGpPrior, r: usize, noise: Interval) -> Self {
        PropertyPrior { regions: vec![region; r], noise }
    }
}

/// Full prior specification. Serialized as JSON (see docs/prior-config.md).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Number of regions R (>= 1). 1-D models sample R-1 sorted changepoints.
    pub regions: usize,
    /// Segmentation latent GP bounds (N-D models only).
    pub structure: GpPrior,
    /// One entry per property source.
    pub properties: Vec<PropertyPrior>,
    /// Label-noise floor: probability-zero structure observations contribute
    /// ln(label_noise) instead of -inf when > 0.
    #[serde(default)]
    pub label_noise: f64,
    /// Predictive spread convention: false -> sigma_hat + noise_hat (default),
    /// true -> sqrt(sigma_hat^2 + noise_hat^2).
    #[serde(default)]
    pub variance_sum: bool,
}

impl PriorConfig {
    pub fn validate(&self, dim: usize, n_properties: usize) -> Result<()> {
        if self.regions == 0 {
            return Err(SageError::Validation("regions must be >= 1".into()));
        }
        validate_gp_bounds(&self.structure.lengthscales, &self.structure.std, dim, "structure")?;
        if self.properties.len() != n_properties {
            return Err(SageError::Validation(format!(
                "prior has {} property entries, data has {n_properties} property sources",
                self.properties.len()
            )));
        }
        for (j, p) in self.properties.iter().enumerate() {
            if p.regions.len() != self.regions {
                return Err(SageError::Validation(format!(
                    "property {j} prior has {} region entries, expected {}",
                    p.regions.len(),
                    self.regions
                )));
            }
            for (r, rb) in p.regions.iter().enumerate() {
                let what = format!("property {j} region {r}");
                validate_gp_bounds(&rb.lengthscales, &rb.std, dim, &what)?;
                rb.bias.validate(&format!("{what} bias"))?;
            }
            p.noise.validate(&format!("property {j} noise"))?;
            if p.noise.lo <= 0.0 {
                return Err(SageError::Validation(format!("property {j} noise bounds must be positive")));
            }
        }
        if !(self.label_noise >= 0.0 && self.label_noise < 1.0) {
            return Err(SageError::Validation(format!(
                "label_noise must be in [0, 1), got {}",
                self.label_noise
            )));
        }
        Ok(())
    }

    /// Data-driven default bounds: lengthscales [0.01, 2] x domain width per
    /// dimension, property std [0.01, 10] x data std, noise [1e-4, 1] x data
    /// std, bias data range +- 1 data std. The segmentation latent std bounds
    /// are [0.01, 10] (softmax logits are unitless).
    pub fn default_for(
        domain: &Domain,
        properties: &[PropertyDataset],
        regions: usize,
    ) -> Result<PriorConfig> {
        let ls_bounds: Vec<Interval> = domain
            .bounds
            .iter()
            .map(|iv| Interval { lo: 0.01 * iv.width(), hi: 2.0 * iv.width() })
            .collect();
        let structure = GpPrior {
            lengthscales: ls_bounds.clone(),
            std: Interval { lo: 0.01, hi: 10.0 },
        };
        let mut props = Vec::with_capacity(properties.len());
        for ds in properties {
            let n = ds.len();
            let (mut sd, mut lo, mut hi) = (1.0, 0.0, 1.0);
            if n > 0 {
                let mean = ds.values.iter().sum::<f64>() / n as f64;
                let var = ds.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                sd = var.sqrt();
                lo = ds.values.iter().cloned().fold(f64::INFINITY, f64::min);
                hi = ds.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            }
            if !(sd.is_finite()) || sd <= 0.0 {
                sd = ds.values.iter().map(|v| v.abs()).fold(1.0, f64::max) * 1e-3;
                if sd <= 0.0 {
                    sd = 1.0;
                }
            }
            let region = RegionGpPrior {
                lengthscales: ls_bounds.clone(),
                std: Interval { lo: 0.01 * sd, hi: 10.0 * sd },
                bias: Interval { lo: lo - sd, hi: hi + sd },
            };
            props.push(PropertyPrior::uniform(region, regions, Interval { lo: 1e-4 * sd, hi: sd }));
        }
        let cfg = PriorConfig {
            regions,
            structure,
            properties: props,
            label_noise: 0.0,
            variance_sum: false,
        };
        cfg.validate(domain.dim(), properties.len())?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<PriorConfig> {
        Ok(serde_json::from_str(s)?)
    }
}

fn validate_gp_bounds(ls: &[Interval], std: &Interval, dim: usize, what: &str) -> Result<()> {
    if ls.len() != dim {
        return Err(SageError::Validation(format!(
            "{what} prior has {} lengthscale bounds for a {dim}-dimensional domain",
            ls.len()
        )));
    }
    for (d, b) in ls.iter().enumerate() {
        b.validate(&format!("{what} lengthscale {d}"))?;
        if b.lo <= 0.0 {
            return Err(SageError::Validation(format!("{what} lengthscale {d} bounds must be positive")));
        }
    }
    std.validate(&format!("{what} std"))?;
    if std.lo <= 0.0 {
        return Err(SageError::Validation(format!("{what} std bounds must be positive")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Min-max normalization

/// Affine map taking the domain box to [0,1]^d: `x' = (x - offset) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn from_domain(domain: &Domain) -> Self {
        Normalization {
            offset: domain.bounds.iter().map(|b| b.lo).collect(),
            scale: domain
                .bounds
                .iter()
                .map(|b| if b.width() > 0.0 { b.width() } else { 1.0 })
                .collect(),
        }
    }

    pub fn apply_points(&self, points: &mut DMatrix<f64>) {
        for i in 0..points.nrows() {
            for d in 0..points.ncols() {
                points[(i, d)] = (points[(i, d)] - self.offset[d]) / self.scale[d];
            }
        }
    }

    pub fn invert_points(&self, points: &mut DMatrix<f64>) {
        for i in 0..points.nrows() {
            for d in 0..points.ncols() {
                points[(i, d)] = points[(i, d)] * self.scale[d] + self.offset[d];
            }
        }
    }

    pub fn normalized_domain(&self, domain: &Domain) -> Domain {
        Domain { bounds: vec![Interval { lo: 0.0, hi: 1.0 }; domain.dim()] }
    }
}
