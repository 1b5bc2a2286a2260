use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use sage_core::nalgebra::{DMatrix, DVector};

use sage_core::baselines::{
    export_changepoint_fit, export_classification_fit, export_regression_fit,
    gp_classification_mle, gp_cp_mle, gp_regression_mle,
};
use sage_core::data::{
    build_grid, fmt_float, read_numeric_csv, read_property_csv, read_structure_csv, Domain,
    Interval, Normalization, PriorConfig,
};
use sage_core::error::{Result, SageError};
use sage_core::inference::McmcSettings;
use sage_core::par::{env_thread_cap, with_thread_cap};
use sage_core::posterior::{
    changepoint_posterior_1d, export_chains, export_summary, load_summary, summarize, BlockDigest,
    LoadedSummary, RunMetadata,
};
use sage_core::sage::{run_chains, ModelKind, SageProblem};
use sage_core::synth::{self, grid_mask, GroundTruth};

/// Errors early with the offending path; downstream io errors often lack it.
fn require_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(SageError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing input: {}", path.display()),
        )))
    }
}

fn source_id(path: &Path, fallback: String) -> String {
    path.file_stem().map_or(fallback, |s| s.to_string_lossy().into_owned())
}

// ---------------------------------------------------------------------------
// synth

#[derive(Args)]
pub struct SynthArgs {
    /// Case name: edge1d-1 | edge1d-2 | edge2d-1 | edge2d-2 | multisource-2d
    #[arg(long)]
    case: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory: structure_{i}.csv, property_{j}.csv, truth/
    #[arg(long)]
    out: PathBuf,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let case = synth::generate(&args.case, args.seed)?;
    synth::export_case(&args.out, &case)?;
    println!(
        "wrote {} structure + {} property source(s) and truth/ to {}",
        case.structure.len(),
        case.property.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

#[derive(Args)]
pub struct FitArgs {
    /// sage-1d | sage-1d-pm | sage-1d-fp | sage-nd | sage-nd-pm | sage-nd-fp
    /// | gp-reg | gp-cp | gp-class
    #[arg(long)]
    model: String,
    /// Structure CSV (x1,..,xd,label); repeat per source
    #[arg(long = "structure")]
    structure: Vec<PathBuf>,
    /// Property CSV (x1,..,xd,y); repeat per source
    #[arg(long = "property")]
    property: Vec<PathBuf>,
    /// Run directory to create
    #[arg(long)]
    out: PathBuf,
    /// Prior bounds JSON (docs/prior-config.md); defaults derived from data.
    /// With --normalize, bounds are interpreted in normalized coordinates
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Region count for the default prior (ignored with --prior)
    #[arg(long, default_value_t = 2)]
    regions: usize,
    /// Per-dimension bounds lo:hi, comma-separated (default: unit cube)
    #[arg(long)]
    domain: Option<String>,
    /// Lattice resolution per dimension, comma-separated
    /// (default: 101 in 1-D, 21 per dimension otherwise)
    #[arg(long = "grid-res")]
    grid_res: Option<String>,
    #[arg(long, default_value_t = 20000)]
    iterations: usize,
    #[arg(long = "burn-in", default_value_t = 10000)]
    burn_in: usize,
    #[arg(long, default_value_t = 10)]
    thinning: usize,
    /// Independent chains (run in parallel unless SAGE_THREADS caps them)
    #[arg(long, default_value_t = 2)]
    chains: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Min-max scale inputs to the unit cube for inference; output CSVs are
    /// written back in original coordinates
    #[arg(long)]
    normalize: bool,
    /// Histogram bins for the 1-D changepoint posterior
    #[arg(long = "cp-bins", default_value_t = 50)]
    cp_bins: usize,
    /// Optimizer restarts for the maximum-likelihood baselines
    #[arg(long, default_value_t = 16)]
    restarts: usize,
}

fn parse_domain(spec: &str) -> Result<Domain> {
    let bounds = spec
        .split(',')
        .map(|part| {
            let (lo, hi) = part.split_once(':').ok_or_else(|| {
                SageError::Validation(format!("domain part {part:?} is not lo:hi"))
            })?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| {
                    SageError::Validation(format!("cannot parse domain bound {s:?}"))
                })
            };
            Interval::new(parse(lo)?, parse(hi)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Domain::new(bounds)
}

fn parse_resolution(spec: &str, dim: usize) -> Result<Vec<usize>> {
    let res = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| SageError::Validation(format!("cannot parse grid resolution {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if res.len() != dim {
        return Err(SageError::Validation(format!(
            "--grid-res has {} entries for a {dim}-dimensional domain",
            res.len()
        )));
    }
    Ok(res)
}

fn write_changepoint_csvs(
    dir: &Path,
    set: &sage_core::sage::ChainSet,
    domain: &Domain,
    bins: usize,
    norm: Option<&Normalization>,
) -> Result<()> {
    let cp = changepoint_posterior_1d(set, domain, bins)?;
    let back = |v: f64| norm.map_or(v, |n| v * n.scale[0] + n.offset[0]);
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("changepoint_hist.csv"))?);
    writeln!(f, "bin_lo,bin_hi,count")?;
    for (i, count) in cp.counts.iter().enumerate() {
        writeln!(
            f,
            "{},{},{count}",
            fmt_float(back(cp.bin_edges[i])),
            fmt_float(back(cp.bin_edges[i + 1]))
        )?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("changepoint_samples.csv"))?);
    writeln!(f, "value")?;
    for s in &cp.samples {
        writeln!(f, "{}", fmt_float(back(*s)))?;
    }
    Ok(())
}

pub fn fit(args: FitArgs) -> Result<()> {
    for p in args.structure.iter().chain(&args.property) {
        require_exists(p)?;
    }
    let mut structure = Vec::with_capacity(args.structure.len());
    for (i, p) in args.structure.iter().enumerate() {
        structure.push(read_structure_csv(p, &source_id(p, format!("structure-{i}")))?);
    }
    let mut property = Vec::with_capacity(args.property.len());
    for (j, p) in args.property.iter().enumerate() {
        property.push(read_property_csv(p, &source_id(p, format!("property-{j}")))?);
    }
    let dim = structure
        .first()
        .map(|d| d.points.ncols())
        .or_else(|| property.first().map(|d| d.points.ncols()))
        .ok_or_else(|| {
            SageError::Validation("no data: pass at least one --structure or --property".into())
        })?;

    let mut domain = match &args.domain {
        Some(spec) => parse_domain(spec)?,
        None => Domain::unit(dim),
    };
    if domain.dim() != dim {
        return Err(SageError::Dimension(format!(
            "--domain is {}-dimensional, data is {dim}-dimensional",
            domain.dim()
        )));
    }

    let norm = args.normalize.then(|| Normalization::from_domain(&domain));
    if let Some(n) = &norm {
        for ds in &mut structure {
            n.apply_points(&mut ds.points);
        }
        for ds in &mut property {
            n.apply_points(&mut ds.points);
        }
        domain = n.normalized_domain(&domain);
    }

    let resolution = match &args.grid_res {
        Some(spec) => parse_resolution(spec, dim)?,
        None => {
            if dim == 1 {
                vec![101]
            } else {
                vec![21; dim]
            }
        }
    };
    let data_mats: Vec<_> = structure
        .iter()
        .map(|d| &d.points)
        .chain(property.iter().map(|d| &d.points))
        .collect();
    let grid = build_grid(&domain, &resolution, &data_mats, None)?;
    // artifacts carry original coordinates even when inference is normalized
    let export_grid = match &norm {
        Some(n) => {
            let mut g = grid.clone();
            n.invert_points(&mut g.points);
            g
        }
        None => grid.clone(),
    };
    std::fs::create_dir_all(&args.out)?;

    match args.model.as_str() {
        "gp-reg" | "gp-cp" => {
            if property.len() != 1 || !structure.is_empty() {
                return Err(SageError::Validation(format!(
                    "{} fits exactly one property source and no structure data",
                    args.model
                )));
            }
            if args.model == "gp-reg" {
                let fit = gp_regression_mle(&property[0], &grid, args.restarts, args.seed)?;
                for w in &fit.warnings {
                    eprintln!("warning: {w}");
                }
                export_regression_fit(&args.out, &export_grid, &fit)?;
            } else {
                let mut fit = gp_cp_mle(&property[0], &grid, args.seed)?;
                for w in &fit.warnings {
                    eprintln!("warning: {w}");
                }
                if let Some(n) = &norm {
                    fit.changepoint = fit.changepoint * n.scale[0] + n.offset[0];
                }
                export_changepoint_fit(&args.out, &export_grid, &fit)?;
            }
        }
        "gp-class" => {
            if structure.is_empty() || !property.is_empty() {
                return Err(SageError::Validation(
                    "gp-class fits structure sources and no property data".into(),
                ));
            }
            let fit = gp_classification_mle(&structure, &grid, args.restarts, args.seed)?;
            for w in &fit.warnings {
                eprintln!("warning: {w}");
            }
            export_classification_fit(&args.out, &export_grid, &fit)?;
        }
        name => {
            let kind = ModelKind::parse(name).ok_or_else(|| {
                SageError::Validation(format!(
                    "unknown model {name:?}; expected one of sage-1d, sage-1d-pm, sage-1d-fp, \
                     sage-nd, sage-nd-pm, sage-nd-fp, gp-reg, gp-cp, gp-class"
                ))
            })?;
            let prior = match &args.prior {
                Some(p) => {
                    require_exists(p)?;
                    PriorConfig::from_json(&std::fs::read_to_string(p)?)?
                }
                None => PriorConfig::default_for(&domain, &property, args.regions)?,
            };
            let settings = McmcSettings {
                iterations: args.iterations,
                burn_in: args.burn_in,
                thinning: args.thinning,
                chains: args.chains,
                seed: args.seed,
                ..Default::default()
            };
            let problem = SageProblem::new(
                kind,
                domain.clone(),
                grid.clone(),
                structure,
                property,
                prior.clone(),
            )?;
            let set = with_thread_cap(env_thread_cap(), || run_chains(&problem, &settings))?;
            let summary = summarize(&set, &grid)?;
            let meta = RunMetadata {
                model: kind.name().to_string(),
                regions: prior.regions,
                dim,
                retained: summary.retained,
                settings: Some(settings),
                rhat: set.rhat,
                rhat_warning: set.rhat_warning,
                noise_hat: summary.noise_hat.clone(),
                variance_sum: prior.variance_sum,
                block_digests: set
                    .chains
                    .iter()
                    .map(|c| c.stats.iter().map(BlockDigest::from_stats).collect())
                    .collect(),
                log_marginal: None,
                changepoint: None,
            };
            export_summary(&args.out, &export_grid, &summary, &meta)?;
            export_chains(&args.out, &set)?;
            if kind.one_dimensional() && prior.regions >= 2 {
                write_changepoint_csvs(&args.out, &set, &domain, args.cp_bins, norm.as_ref())?;
            }
        }
    }
    println!("wrote run artifacts to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report

#[derive(Args)]
pub struct ReportArgs {
    /// Run directory to score; repeat per algorithm
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    /// Truth directory written by `sage synth` (the truth/ subdirectory)
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Also write the table to this CSV file
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Row index of `coords` in `points`, within an absolute tolerance that
/// absorbs normalization round-trips.
fn find_row(points: &DMatrix<f64>, coords: &[f64]) -> Option<usize> {
    (0..points.nrows())
        .find(|&i| (0..points.ncols()).all(|d| (points[(i, d)] - coords[d]).abs() <= 1e-9))
}

struct ReportRow {
    name: String,
    model: String,
    accuracy: Option<f64>,
    r2: Vec<Option<f64>>,
    retained: usize,
    rhat: Option<f64>,
    log_marginal: Option<f64>,
    changepoint: Option<f64>,
}

fn score_run(run: &LoadedSummary, truth: &GroundTruth) -> Result<(Option<f64>, Vec<Option<f64>>)> {
    let gt = truth.grid.len();
    let mut run_rows = Vec::with_capacity(gt);
    for i in 0..gt {
        let coords = truth.grid.row(i);
        match find_row(&run.points, &coords) {
            Some(r) => run_rows.push(r),
            None => {
                return Err(SageError::Validation(format!(
                    "run grid does not cover truth point {coords:?}; refit with a matching --grid-res"
                )));
            }
        }
    }
    let accuracy = if run.phase_estimate.is_empty() {
        None
    } else {
        let predicted: Vec<usize> = run_rows.iter().map(|&r| run.phase_estimate[r]).collect();
        Some(synth::accuracy(&predicted, &truth.labels, &vec![true; gt])?)
    };
    let mask = grid_mask(&truth.grid, truth.meta.mask_exclude);
    let mut r2 = Vec::new();
    for (j, truth_vals) in truth.properties.iter().enumerate() {
        if j >= run.mu_hat.len() {
            r2.push(None);
            continue;
        }
        let predicted =
            DVector::from_iterator(gt, run_rows.iter().map(|&r| run.mu_hat[j][r]));
        r2.push(Some(synth::r_squared(&predicted, truth_vals, &mask)?));
    }
    Ok((accuracy, r2))
}

pub fn report(args: ReportArgs) -> Result<()> {
    let truth = match &args.truth {
        Some(dir) => match synth::load_truth(dir) {
            Ok(t) => Some(t),
            Err(e) => {
                eprintln!(
                    "warning: cannot load truth from {}: {e}; metrics omitted",
                    dir.display()
                );
                None
            }
        },
        None => None,
    };

    let mut rows = Vec::with_capacity(args.runs.len());
    for dir in &args.runs {
        require_exists(dir)?;
        let run = load_summary(dir)?;
        let (accuracy, r2) = match &truth {
            Some(t) => score_run(&run, t)?,
            None => (None, vec![]),
        };
        rows.push(ReportRow {
            name: source_id(dir, dir.display().to_string()),
            model: run.meta.model.clone(),
            accuracy,
            r2,
            retained: run.meta.retained,
            rhat: run.meta.rhat,
            log_marginal: run.meta.log_marginal,
            changepoint: run.meta.changepoint,
        });
    }

    let n_props = rows.iter().map(|r| r.r2.len()).max().unwrap_or(0);
    let mut header = vec!["run".to_string(), "model".to_string(), "accuracy".to_string()];
    header.extend((0..n_props).map(|j| format!("r2_{j}")));
    header.extend(["retained", "rhat", "log_marginal", "changepoint"].map(String::from));

    let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let mut lines = vec![header.join(",")];
    for row in &rows {
        let mut cells = vec![row.name.clone(), row.model.clone(), fmt_opt(row.accuracy)];
        for j in 0..n_props {
            cells.push(fmt_opt(row.r2.get(j).copied().flatten()));
        }
        cells.push(row.retained.to_string());
        cells.push(fmt_opt(row.rhat));
        cells.push(fmt_opt(row.log_marginal));
        cells.push(fmt_opt(row.changepoint));
        lines.push(cells.join(","));
    }
    for line in &lines {
        println!("{line}");
    }
    if let Some(out) = &args.out {
        std::fs::write(out, lines.join("\n") + "\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// predict

#[derive(Args)]
pub struct PredictArgs {
    /// Run directory written by `sage fit`
    #[arg(long)]
    run: PathBuf,
    /// CSV of query points (one coordinate column per dimension)
    #[arg(long)]
    at: PathBuf,
    /// Output CSV (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Nearest grid row by Euclidean distance.
fn nearest_row(points: &DMatrix<f64>, coords: &[f64]) -> usize {
    let mut best = (0usize, f64::INFINITY);
    for i in 0..points.nrows() {
        let d2: f64 = (0..points.ncols()).map(|d| (points[(i, d)] - coords[d]).powi(2)).sum();
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    best.0
}

pub fn predict(args: PredictArgs) -> Result<()> {
    require_exists(&args.run)?;
    require_exists(&args.at)?;
    let run = load_summary(&args.run)?;
    let table = read_numeric_csv(&args.at)?;
    let dim = run.meta.dim;
    if table.headers.len() != dim {
        return Err(SageError::Dimension(format!(
            "query CSV has {} columns, run is {dim}-dimensional",
            table.headers.len()
        )));
    }

    let has_phase = !run.phase_estimate.is_empty();
    let mut header: Vec<String> = (1..=dim).map(|d| format!("x{d}")).collect();
    if has_phase {
        header.push("label".into());
        header.push("entropy".into());
    }
    for j in 0..run.mu_hat.len() {
        header.push(format!("mu_{j}"));
        header.push(format!("sigma_{j}"));
    }
    let mut lines = vec![header.join(",")];
    for row in &table.rows {
        let i = nearest_row(&run.points, row);
        let mut cells: Vec<String> = row.iter().map(|v| fmt_float(*v)).collect();
        if has_phase {
            cells.push(format!("{}", run.phase_estimate[i]));
            cells.push(fmt_float(run.phase_entropy[i]));
        }
        for j in 0..run.mu_hat.len() {
            cells.push(fmt_float(run.mu_hat[j][i]));
            cells.push(fmt_float(run.sigma_hat[j][i]));
        }
        lines.push(cells.join(","));
    }
    match &args.out {
        Some(out) => std::fs::write(out, lines.join("\n") + "\n")?,
        None => {
            for line in &lines {
                println!("{line}");
            }
        }
    }
    Ok(())
}
