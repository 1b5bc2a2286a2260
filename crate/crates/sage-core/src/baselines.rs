//! Maximum-likelihood GP comparators: plain regression, changepoint-kernel
//! regression, and multiclass classification.
//!
//! All three maximize a (possibly approximate) log marginal likelihood by
//! derivative-free multi-start coordinate search over log hyperparameters
//! (location parameters stay in natural units). Restarts are seeded, so every
//! fit is deterministic given (data, seed).

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::data::{fmt_float, write_numeric_csv, PredictionGrid, PropertyDataset, StructureDataset};
use crate::error::{Result, SageError};
use crate::kernels::{rbf_kernel, KernelParams};
use crate::par::par_map;
use crate::posterior::RunMetadata;
use crate::segmentation::RegionField;

const HALF_LN_2PI: f64 = 0.9189385332046727;

/// One optimizer restart: objective at the start point and at convergence.
/// Kept on the fit so the multi-start contract is observable.
#[derive(Clone, Debug)]
pub struct RestartRecord {
    pub start: Vec<f64>,
    pub start_value: f64,
    pub end_value: f64,
}

/// Plain ARD-RBF GP regression fit.
#[derive(Clone, Debug)]
pub struct GpRegressionFit {
    pub lengthscales: Vec<f64>,
    pub signal_std: f64,
    pub noise_std: f64,
    pub log_marginal: f64,
    /// Predictive mean on the grid.
    pub mean: DVector<f64>,
    /// Latent predictive standard deviation on the grid (no noise term).
    pub std: DVector<f64>,
    pub restarts: Vec<RestartRecord>,
    pub warnings: Vec<String>,
}

/// Changepoint-kernel GP fit (1-D): two RBF kernels blended by a sigmoid.
#[derive(Clone, Debug)]
pub struct GpChangepointFit {
    /// (lengthscale, signal std) active below the changepoint.
    pub low: (f64, f64),
    /// (lengthscale, signal std) active above the changepoint.
    pub high: (f64, f64),
    pub noise_std: f64,
    pub changepoint: f64,
    pub steepness: f64,
    pub log_marginal: f64,
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
    pub restarts: Vec<RestartRecord>,
    pub warnings: Vec<String>,
}

/// Multiclass Laplace-approximate GP classification fit with shared ARD-RBF
/// hyperparameters across the per-class latents.
#[derive(Clone, Debug)]
pub struct GpClassificationFit {
    pub lengthscales: Vec<f64>,
    pub signal_std: f64,
    /// Laplace evidence approximation at the optimum.
    pub log_marginal: f64,
    pub classes: usize,
    /// G x C softmax probabilities on the grid.
    pub probs: DMatrix<f64>,
    /// Fraction of training points whose argmax class matches their label.
    pub train_accuracy: f64,
    pub restarts: Vec<RestartRecord>,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Optimizer

/// Coordinate pattern search maximizing `objective` inside a box. Shrinks all
/// step sizes whenever a full sweep fails to improve; terminates when steps
/// fall below 1e-4 of the box extent.
pub fn coordinate_ascent(
    objective: &(dyn Fn(&[f64]) -> f64 + Sync),
    start: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> (Vec<f64>, f64) {
    let dim = start.len();
    let mut x: Vec<f64> = start
        .iter()
        .zip(lower.iter().zip(upper))
        .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
        .collect();
    let mut fx = objective(&x);
    let mut deltas: Vec<f64> = (0..dim).map(|c| 0.25 * (upper[c] - lower[c])).collect();
    for _ in 0..200 {
        let mut improved = false;
        for c in 0..dim {
            for dir in [1.0, -1.0] {
                let cand_c = (x[c] + dir * deltas[c]).clamp(lower[c], upper[c]);
                if cand_c == x[c] {
                    continue;
                }
                let old = x[c];
                x[c] = cand_c;
                let f = objective(&x);
                if f > fx {
                    fx = f;
                    improved = true;
                } else {
                    x[c] = old;
                }
            }
        }
        if !improved {
            for d in deltas.iter_mut() {
                *d *= 0.5;
            }
            let widest = deltas
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(d, (lo, hi))| if hi > lo { d / (hi - lo) } else { 0.0 })
                .fold(0.0f64, f64::max);
            if widest < 1e-4 {
                break;
            }
        }
    }
    (x, fx)
}

/// Runs every start (concurrently when enabled) and keeps the best end point.
fn multistart(
    objective: &(dyn Fn(&[f64]) -> f64 + Sync),
    starts: Vec<Vec<f64>>,
    lower: &[f64],
    upper: &[f64],
) -> Result<(Vec<f64>, f64, Vec<RestartRecord>)> {
    let runs = par_map(starts, |s| {
        let start_value = objective(&s);
        let (end, end_value) = coordinate_ascent(objective, &s, lower, upper);
        (RestartRecord { start: s, start_value, end_value }, end)
    });
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut records = Vec::with_capacity(runs.len());
    for (rec, end) in runs {
        if best.as_ref().is_none_or(|(_, v)| rec.end_value > *v) && rec.end_value.is_finite() {
            best = Some((end, rec.end_value));
        }
        records.push(rec);
    }
    let (x, v) =
        best.ok_or_else(|| SageError::Inference("every restart produced a degenerate fit".into()))?;
    Ok((x, v, records))
}

fn random_starts(
    n: usize,
    lower: &[f64],
    upper: &[f64],
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5157_7ab5_9ce3_1d11);
    (0..n)
        .map(|_| {
            lower
                .iter()
                .zip(upper)
                .map(|(lo, hi)| if hi > lo { rng.random_range(*lo..*hi) } else { *lo })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// GP regression pieces

/// `-1/2 y'K^{-1}y - 1/2 ln|K| - n/2 ln 2pi` with K already including noise.
/// `None` when K is not numerically positive definite.
fn gaussian_log_marginal(k_noisy: &DMatrix<f64>, y: &DVector<f64>) -> Option<f64> {
    let chol = nalgebra::Cholesky::new(k_noisy.clone())?;
    let alpha = chol.solve(y);
    let ln_det_half: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    Some(-0.5 * y.dot(&alpha) - ln_det_half - y.len() as f64 * HALF_LN_2PI)
}

/// Standard GP predictive equations for fixed kernel matrices: training
/// kernel with noise, train-to-query cross kernel, and query self-variances.
fn gp_predict(
    k_noisy: &DMatrix<f64>,
    k_cross: &DMatrix<f64>,
    k_diag: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let chol = nalgebra::Cholesky::new(k_noisy.clone()).ok_or(SageError::Cholesky { max_jitter: 0.0 })?;
    let alpha = chol.solve(y);
    let mean = k_cross.transpose() * &alpha;
    let v = chol
        .l_dirty()
        .solve_lower_triangular(k_cross)
        .ok_or(SageError::Cholesky { max_jitter: 0.0 })?;
    let mut var = DVector::zeros(k_diag.len());
    for i in 0..k_diag.len() {
        let reduction: f64 = v.column(i).iter().map(|x| x * x).sum();
        var[i] = (k_diag[i] - reduction).max(0.0);
    }
    Ok((mean, var.map(f64::sqrt)))
}

fn data_extent(points: &DMatrix<f64>) -> Vec<f64> {
    (0..points.ncols())
        .map(|d| {
            let col = points.column(d);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in col.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let w = hi - lo;
            if w > 0.0 { w } else { 1.0 }
        })
        .collect()
}

fn values_std(y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// ARD-RBF GP regression, marginal likelihood maximized over log
/// (lengthscales, signal std, noise std) from `restarts` start points.
pub fn gp_regression_mle(
    ds: &PropertyDataset,
    grid: &PredictionGrid,
    restarts: usize,
    seed: u64,
) -> Result<GpRegressionFit> {
    let n = ds.len();
    if n < 2 {
        return Err(SageError::Validation(format!(
            "GP regression needs at least 2 points, got {n}"
        )));
    }
    let dim = ds.points.ncols();
    if dim != grid.dim() {
        return Err(SageError::Dimension(format!(
            "data is {dim}-dimensional, grid is {}-dimensional",
            grid.dim()
        )));
    }
    let mut warnings = Vec::new();
    let y_mean = ds.values.sum() / n as f64;
    let y = ds.values.map(|v| v - y_mean);
    let y_std = values_std(&ds.values);
    let scale = if y_std > 0.0 {
        y_std
    } else {
        warnings.push("all property values identical; noise will sit at its lower bound".into());
        1.0
    };
    let widths = data_extent(&ds.points);
    if widths.iter().all(|w| *w == 1.0) && n >= 2 {
        let first = ds.points.row(0).iter().copied().collect::<Vec<_>>();
        let clustered = (0..n).all(|i| (0..dim).all(|d| ds.points[(i, d)] == first[d]));
        if clustered {
            warnings.push("all inputs identical; the fit degenerates to a noise model".into());
        }
    }

    // log-space box: lengthscales per dimension, then signal, then noise
    let mut lower: Vec<f64> = widths.iter().map(|w| (0.01 * w).ln()).collect();
    let mut upper: Vec<f64> = widths.iter().map(|w| (10.0 * w).ln()).collect();
    lower.push((1e-3 * scale).ln());
    upper.push((10.0 * scale).ln());
    lower.push((1e-4 * scale).ln());
    upper.push((2.0 * scale).ln());

    let objective = |theta: &[f64]| -> f64 {
        let params = match KernelParams::new(
            theta[..dim].iter().map(|l| l.exp()).collect(),
            theta[dim].exp(),
        ) {
            Ok(p) => p,
            Err(_) => return f64::NEG_INFINITY,
        };
        let noise = theta[dim + 1].exp();
        let mut k = match rbf_kernel(&ds.points, &ds.points, &params) {
            Ok(k) => k,
            Err(_) => return f64::NEG_INFINITY,
        };
        for i in 0..n {
            k[(i, i)] += noise * noise;
        }
        gaussian_log_marginal(&k, &y).unwrap_or(f64::NEG_INFINITY)
    };

    let mut starts = Vec::with_capacity(restarts.max(1));
    let mut heuristic: Vec<f64> = widths.iter().map(|w| (0.3 * w).ln()).collect();
    heuristic.push(scale.ln());
    heuristic.push((0.1 * scale).ln());
    starts.push(heuristic);
    starts.extend(random_starts(restarts.saturating_sub(1), &lower, &upper, seed));

    let (theta, log_marginal, restart_records) = multistart(&objective, starts, &lower, &upper)?;
    let lengthscales: Vec<f64> = theta[..dim].iter().map(|l| l.exp()).collect();
    let signal_std = theta[dim].exp();
    let noise_std = theta[dim + 1].exp();

    let params = KernelParams::new(lengthscales.clone(), signal_std)?;
    let mut k = rbf_kernel(&ds.points, &ds.points, &params)?;
    for i in 0..n {
        k[(i, i)] += noise_std * noise_std;
    }
    let k_cross = rbf_kernel(&ds.points, &grid.points, &params)?;
    let k_diag = DVector::from_element(grid.len(), signal_std * signal_std);
    let (mut mean, std) = gp_predict(&k, &k_cross, &k_diag, &y)?;
    mean.add_scalar_mut(y_mean);

    Ok(GpRegressionFit {
        lengthscales,
        signal_std,
        noise_std,
        log_marginal,
        mean,
        std,
        restarts: restart_records,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Changepoint kernel

/// Sigmoid weight of the low-side kernel: 1 well below `c`, 0 well above.
fn cp_sigma(x: f64, c: f64, gamma: f64) -> f64 {
    1.0 / (1.0 + (gamma * (x - c)).exp())
}

/// Changepoint-kernel parameters; `low` applies where `cp_sigma` is near 1.
#[derive(Clone, Debug)]
pub struct CpKernelParams {
    pub low: (f64, f64),
    pub high: (f64, f64),
    pub changepoint: f64,
    pub steepness: f64,
}

/// `k(x,x') = s(x)s(x') k_low + (1-s(x))(1-s(x')) k_high` on 1-D inputs.
pub fn cp_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, p: &CpKernelParams) -> Result<DMatrix<f64>> {
    if a.ncols() != 1 || b.ncols() != 1 {
        return Err(SageError::Dimension("changepoint kernel is 1-D only".into()));
    }
    let k1 = rbf_kernel(a, b, &KernelParams::new(vec![p.low.0], p.low.1)?)?;
    let k2 = rbf_kernel(a, b, &KernelParams::new(vec![p.high.0], p.high.1)?)?;
    let sa: Vec<f64> = (0..a.nrows()).map(|i| cp_sigma(a[(i, 0)], p.changepoint, p.steepness)).collect();
    let sb: Vec<f64> = (0..b.nrows()).map(|i| cp_sigma(b[(i, 0)], p.changepoint, p.steepness)).collect();
    let mut k = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            k[(i, j)] = sa[i] * sb[j] * k1[(i, j)] + (1.0 - sa[i]) * (1.0 - sb[j]) * k2[(i, j)];
        }
    }
    Ok(k)
}

fn cp_kernel_diag(points: &DMatrix<f64>, p: &CpKernelParams) -> DVector<f64> {
    DVector::from_fn(points.nrows(), |i, _| {
        let s = cp_sigma(points[(i, 0)], p.changepoint, p.steepness);
        s * s * p.low.1 * p.low.1 + (1.0 - s) * (1.0 - s) * p.high.1 * p.high.1
    })
}

/// Predictive mean/std under a fixed changepoint kernel (no optimization);
/// exposed so kernel-limit behavior is testable in isolation.
pub fn cp_predict_fixed(
    ds: &PropertyDataset,
    grid: &PredictionGrid,
    p: &CpKernelParams,
    noise_std: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = ds.len();
    let y_mean = ds.values.sum() / n as f64;
    let y = ds.values.map(|v| v - y_mean);
    let mut k = cp_kernel(&ds.points, &ds.points, p)?;
    for i in 0..n {
        k[(i, i)] += noise_std * noise_std;
    }
    let k_cross = cp_kernel(&ds.points, &grid.points, p)?;
    let (mut mean, std) = gp_predict(&k, &k_cross, &cp_kernel_diag(&grid.points, p), &y)?;
    mean.add_scalar_mut(y_mean);
    Ok((mean, std))
}

/// Changepoint-kernel GP regression (1-D). The changepoint location starts
/// at 5 data quantiles; steepness, both kernels, and noise are optimized
/// jointly in log space (the location in natural units).
pub fn gp_cp_mle(
    ds: &PropertyDataset,
    grid: &PredictionGrid,
    seed: u64,
) -> Result<GpChangepointFit> {
    let n = ds.len();
    if n < 2 {
        return Err(SageError::Validation(format!(
            "changepoint GP needs at least 2 points, got {n}"
        )));
    }
    if ds.points.ncols() != 1 || grid.dim() != 1 {
        return Err(SageError::Validation("changepoint GP is defined on 1-D domains only".into()));
    }
    let mut warnings = Vec::new();
    let y_mean = ds.values.sum() / n as f64;
    let y = ds.values.map(|v| v - y_mean);
    let y_std = values_std(&ds.values);
    let scale = if y_std > 0.0 {
        y_std
    } else {
        warnings.push("all property values identical; noise will sit at its lower bound".into());
        1.0
    };
    let width = data_extent(&ds.points)[0];
    let mut xs: Vec<f64> = ds.points.column(0).iter().copied().collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (x_lo, x_hi) = (xs[0], xs[n - 1]);

    // theta = [ln l1, ln s1, ln l2, ln s2, ln noise, c, ln gamma]
    let lower = vec![
        (0.01 * width).ln(),
        (1e-3 * scale).ln(),
        (0.01 * width).ln(),
        (1e-3 * scale).ln(),
        (1e-4 * scale).ln(),
        x_lo,
        (1.0 / width).ln(),
    ];
    let upper = vec![
        (10.0 * width).ln(),
        (10.0 * scale).ln(),
        (10.0 * width).ln(),
        (10.0 * scale).ln(),
        (2.0 * scale).ln(),
        x_hi,
        (2000.0 / width).ln(),
    ];

    let unpack = |theta: &[f64]| CpKernelParams {
        low: (theta[0].exp(), theta[1].exp()),
        high: (theta[2].exp(), theta[3].exp()),
        changepoint: theta[5],
        steepness: theta[6].exp(),
    };
    let objective = |theta: &[f64]| -> f64 {
        let p = unpack(theta);
        let noise = theta[4].exp();
        let mut k = match cp_kernel(&ds.points, &ds.points, &p) {
            Ok(k) => k,
            Err(_) => return f64::NEG_INFINITY,
        };
        for i in 0..n {
            k[(i, i)] += noise * noise;
        }
        gaussian_log_marginal(&k, &y).unwrap_or(f64::NEG_INFINITY)
    };

    // c starts at the 5 interior data quantiles; other coordinates at a
    // shared heuristic plus seeded jitter rounds
    let quantile = |p: f64| -> f64 {
        let pos = p * (n - 1) as f64;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        if i + 1 < n { xs[i] * (1.0 - frac) + xs[i + 1] * frac } else { xs[i] }
    };
    let base = vec![
        (0.3 * width).ln(),
        scale.ln(),
        (0.3 * width).ln(),
        scale.ln(),
        (0.1 * scale).ln(),
        0.0, // placeholder, replaced per start
        (40.0 / width).ln(),
    ];
    let mut starts = Vec::new();
    for i in 0..5 {
        let mut s = base.clone();
        s[5] = quantile((i + 1) as f64 / 6.0);
        starts.push(s);
    }
    for rand in random_starts(5, &lower, &upper, seed) {
        starts.push(rand);
    }

    let (theta, log_marginal, restart_records) = multistart(&objective, starts, &lower, &upper)?;
    let p = unpack(&theta);
    let noise_std = theta[4].exp();
    let (mean, std) = cp_predict_fixed(ds, grid, &p, noise_std)?;

    Ok(GpChangepointFit {
        low: p.low,
        high: p.high,
        noise_std,
        changepoint: p.changepoint,
        steepness: p.steepness,
        log_marginal,
        mean,
        std,
        restarts: restart_records,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// GP classification (multiclass Laplace)

struct LaplaceResult {
    evidence: f64,
    /// n x C latent posterior mode.
    f_hat: DMatrix<f64>,
}

fn softmax_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        let max = m.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..m.ncols() {
            let e = (m[(i, c)] - max).exp();
            out[(i, c)] = e;
            sum += e;
        }
        for c in 0..m.ncols() {
            out[(i, c)] /= sum;
        }
    }
    out
}

fn ln_det_lu(m: &DMatrix<f64>) -> Option<f64> {
    let lu = m.clone().lu();
    let mut ln_det = 0.0;
    for d in lu.u().diagonal().iter() {
        if *d <= 0.0 {
            return None;
        }
        ln_det += d.ln();
    }
    Some(ln_det)
}

/// Newton iteration for the stacked multiclass latent mode and the Laplace
/// evidence `ln p(y|f) - 1/2 f'S^{-1}f - 1/2 ln|I + SW|` with `S = I_C (x) K`.
fn laplace_mode(k: &DMatrix<f64>, labels: &[usize], classes: usize) -> Option<LaplaceResult> {
    let n = labels.len();
    let chol = nalgebra::Cholesky::new({
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += 1e-9; // numerical floor for the prior solve
        }
        kj
    })?;
    let mut f = DMatrix::<f64>::zeros(n, classes);

    let psi = |f: &DMatrix<f64>, kinv_f: &DMatrix<f64>| -> f64 {
        let mut v = 0.0;
        for c in 0..classes {
            v -= 0.5 * f.column(c).dot(&kinv_f.column(c));
        }
        for (i, &y) in labels.iter().enumerate() {
            let max = f.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + f.row(i).iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            v += f[(i, y)] - lse;
        }
        v
    };

    let kinv = |f: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, classes);
        for c in 0..classes {
            out.set_column(c, &chol.solve(&f.column(c).into_owned()));
        }
        out
    };

    let mut kinv_f = kinv(&f);
    let mut current = psi(&f, &kinv_f);
    for _ in 0..100 {
        let pi = softmax_rows(&f);
        // gradient of psi: (y - pi) - K^{-1} f, stacked as n x C
        let mut grad = -kinv_f.clone();
        for (i, &y) in labels.iter().enumerate() {
            for c in 0..classes {
                grad[(i, c)] += if c == y { 1.0 } else { 0.0 } - pi[(i, c)];
            }
        }
        // Hessian: -(K^{-1}_block + W); solve the stacked nC system densely
        let m = n * classes;
        let mut h = DMatrix::<f64>::zeros(m, m);
        for c in 0..classes {
            let kinv_block = chol.solve(&DMatrix::identity(n, n));
            for i in 0..n {
                for j in 0..n {
                    h[(c * n + i, c * n + j)] += kinv_block[(i, j)];
                }
            }
        }
        for i in 0..n {
            for c in 0..classes {
                for c2 in 0..classes {
                    let w = if c == c2 { pi[(i, c)] * (1.0 - pi[(i, c)]) } else { -pi[(i, c)] * pi[(i, c2)] };
                    h[(c * n + i, c2 * n + i)] += w;
                }
            }
        }
        let gvec = DVector::from_fn(m, |idx, _| grad[(idx % n, idx / n)]);
        let step = h.lu().solve(&gvec)?;
        // damped ascent on psi
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut cand = f.clone();
            for c in 0..classes {
                for i in 0..n {
                    cand[(i, c)] += t * step[c * n + i];
                }
            }
            let cand_kinv = kinv(&cand);
            let value = psi(&cand, &cand_kinv);
            if value > current - 1e-15 {
                let delta = (value - current).abs();
                f = cand;
                kinv_f = cand_kinv;
                current = value;
                accepted = true;
                if delta < 1e-10 {
                    // converged
                    let pi = softmax_rows(&f);
                    let mut iw = DMatrix::<f64>::identity(n * classes, n * classes);
                    // I + S W with S = blockdiag(K): rows grouped by class
                    for c in 0..classes {
                        for c2 in 0..classes {
                            for i in 0..n {
                                let w = if c == c2 {
                                    pi[(i, c)] * (1.0 - pi[(i, c)])
                                } else {
                                    -pi[(i, c)] * pi[(i, c2)]
                                };
                                for row in 0..n {
                                    iw[(c * n + row, c2 * n + i)] += k[(row, i)] * w;
                                }
                            }
                        }
                    }
                    let ln_det = ln_det_lu(&iw)?;
                    let mut evidence = current - 0.5 * ln_det;
                    // psi already holds ln p(y|f) - 1/2 f'S^{-1}f
                    if !evidence.is_finite() {
                        evidence = f64::NEG_INFINITY;
                    }
                    return Some(LaplaceResult { evidence, f_hat: f });
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    // non-converged Newton: treat as failed hyperparameter point
    None
}

/// Multiclass GP classification: shared ARD-RBF hyperparameters, softmax
/// link, Laplace-approximate evidence maximized by multi-start search.
/// Grid probabilities are the softmax of the latent predictive means.
pub fn gp_classification_mle(
    datasets: &[StructureDataset],
    grid: &PredictionGrid,
    restarts: usize,
    seed: u64,
) -> Result<GpClassificationFit> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for ds in datasets {
        for i in 0..ds.len() {
            rows.push((0..ds.points.ncols()).map(|d| ds.points[(i, d)]).collect::<Vec<_>>());
            labels.push(ds.labels[i]);
        }
    }
    let n = rows.len();
    if n == 0 {
        return Err(SageError::Validation("no structure observations to classify".into()));
    }
    let dim = rows[0].len();
    if dim != grid.dim() {
        return Err(SageError::Dimension(format!(
            "data is {dim}-dimensional, grid is {}-dimensional",
            grid.dim()
        )));
    }
    let points = DMatrix::from_fn(n, dim, |i, d| rows[i][d]);
    let classes = labels.iter().copied().max().unwrap() + 1;
    let mut warnings = Vec::new();
    for c in 0..classes {
        if !labels.contains(&c) {
            warnings.push(format!("class {c} has no observations; its probabilities stay at the prior"));
        }
    }
    if classes == 1 {
        warnings.push("single-class data; the classifier is constant".into());
        return Ok(GpClassificationFit {
            lengthscales: vec![f64::NAN; dim],
            signal_std: f64::NAN,
            log_marginal: 0.0,
            classes: 1,
            probs: DMatrix::from_element(grid.len(), 1, 1.0),
            train_accuracy: 1.0,
            restarts: vec![],
            warnings,
        });
    }

    let widths = data_extent(&points);
    let mut lower: Vec<f64> = widths.iter().map(|w| (0.02 * w).ln()).collect();
    let mut upper: Vec<f64> = widths.iter().map(|w| (5.0 * w).ln()).collect();
    lower.push(0.1f64.ln());
    upper.push(20.0f64.ln());

    let objective = |theta: &[f64]| -> f64 {
        let params = match KernelParams::new(
            theta[..dim].iter().map(|l| l.exp()).collect(),
            theta[dim].exp(),
        ) {
            Ok(p) => p,
            Err(_) => return f64::NEG_INFINITY,
        };
        let k = match rbf_kernel(&points, &points, &params) {
            Ok(k) => k,
            Err(_) => return f64::NEG_INFINITY,
        };
        laplace_mode(&k, &labels, classes).map_or(f64::NEG_INFINITY, |r| r.evidence)
    };

    let mut starts = Vec::with_capacity(restarts.max(1));
    let mut heuristic: Vec<f64> = widths.iter().map(|w| (0.3 * w).ln()).collect();
    heuristic.push(2.0f64.ln());
    starts.push(heuristic);
    starts.extend(random_starts(restarts.saturating_sub(1), &lower, &upper, seed));
    let (theta, log_marginal, restart_records) = multistart(&objective, starts, &lower, &upper)?;

    let lengthscales: Vec<f64> = theta[..dim].iter().map(|l| l.exp()).collect();
    let signal_std = theta[dim].exp();
    let params = KernelParams::new(lengthscales.clone(), signal_std)?;
    let k = rbf_kernel(&points, &points, &params)?;
    let mode = laplace_mode(&k, &labels, classes)
        .ok_or_else(|| SageError::Inference("Laplace mode search failed at the optimum".into()))?;

    let chol = nalgebra::Cholesky::new({
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += 1e-9;
        }
        kj
    })
    .ok_or(SageError::Cholesky { max_jitter: 1e-9 })?;
    let latent_at = |query: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let k_cross = rbf_kernel(&points, query, &params)?;
        let mut latent = DMatrix::zeros(query.nrows(), classes);
        for c in 0..classes {
            let alpha = chol.solve(&mode.f_hat.column(c).into_owned());
            latent.set_column(c, &(k_cross.transpose() * alpha));
        }
        Ok(latent)
    };
    let probs = softmax_rows(&latent_at(&grid.points)?);
    let train_probs = softmax_rows(&latent_at(&points)?);
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = train_probs.row(i);
            let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == y
        })
        .count();

    Ok(GpClassificationFit {
        lengthscales,
        signal_std,
        log_marginal,
        classes,
        probs,
        train_accuracy: correct as f64 / n as f64,
        restarts: restart_records,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Run-directory export (same artifact shapes as posterior runs)

fn baseline_meta(model: &str, regions: usize, dim: usize) -> RunMetadata {
    RunMetadata {
        model: model.into(),
        regions,
        dim,
        retained: 0,
        settings: None,
        rhat: None,
        rhat_warning: false,
        noise_hat: vec![],
        variance_sum: false,
        block_digests: vec![],
        log_marginal: None,
        changepoint: None,
    }
}

fn export_mean_std(
    dir: &std::path::Path,
    grid: &PredictionGrid,
    mean: &DVector<f64>,
    std: &DVector<f64>,
) -> Result<()> {
    let dim = grid.dim();
    for (name, values) in [("mean", mean), ("std", std)] {
        let mut hdr: Vec<String> = (1..=dim).map(|d| format!("x{d}")).collect();
        hdr.push(name.into());
        let hdr_refs: Vec<&str> = hdr.iter().map(|s| s.as_str()).collect();
        write_numeric_csv(
            &dir.join(format!("prop_0_{name}.csv")),
            &hdr_refs,
            (0..grid.len()).map(|i| {
                let mut row = grid.row(i);
                row.push(values[i]);
                row
            }),
        )?;
    }
    Ok(())
}

/// Writes `prop_0_mean.csv`, `prop_0_std.csv`, `summary.json`.
pub fn export_regression_fit(
    dir: &std::path::Path,
    grid: &PredictionGrid,
    fit: &GpRegressionFit,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    export_mean_std(dir, grid, &fit.mean, &fit.std)?;
    let mut meta = baseline_meta("gp-reg", 1, grid.dim());
    meta.noise_hat = vec![fit.noise_std];
    meta.log_marginal = Some(fit.log_marginal);
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Writes `prop_0_mean.csv`, `prop_0_std.csv`, `summary.json` with the
/// changepoint estimate.
pub fn export_changepoint_fit(
    dir: &std::path::Path,
    grid: &PredictionGrid,
    fit: &GpChangepointFit,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    export_mean_std(dir, grid, &fit.mean, &fit.std)?;
    let mut meta = baseline_meta("gp-cp", 1, grid.dim());
    meta.noise_hat = vec![fit.noise_std];
    meta.log_marginal = Some(fit.log_marginal);
    meta.changepoint = Some(fit.changepoint);
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Writes `phase_pM.csv`, `phase_estimate.csv`, `phase_entropy.csv`,
/// `summary.json`.
pub fn export_classification_fit(
    dir: &std::path::Path,
    grid: &PredictionGrid,
    fit: &GpClassificationFit,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let dim = grid.dim();
    let g = grid.len();
    let c = fit.classes;

    let mut headers: Vec<String> = (1..=dim).map(|d| format!("x{d}")).collect();
    headers.extend((0..c).map(|k| format!("p{k}")));
    let hdr: Vec<&str> = headers.iter().map(|s| s.as_str()).collect();
    write_numeric_csv(
        &dir.join("phase_pM.csv"),
        &hdr,
        (0..g).map(|i| {
            let mut row = grid.row(i);
            row.extend((0..c).map(|k| fit.probs[(i, k)]));
            row
        }),
    )?;

    let field = RegionField { probs: fit.probs.clone() };
    {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("phase_estimate.csv"))?);
        let mut hdr: Vec<String> = (1..=dim).map(|d| format!("x{d}")).collect();
        hdr.push("label".into());
        writeln!(f, "{}", hdr.join(","))?;
        for i in 0..g {
            let best = (0..c).fold(0, |b, k| if fit.probs[(i, k)] > fit.probs[(i, b)] { k } else { b });
            let mut cells: Vec<String> = grid.row(i).iter().map(|v| fmt_float(*v)).collect();
            cells.push(format!("{best}"));
            writeln!(f, "{}", cells.join(","))?;
        }
    }

    let mut hdr: Vec<String> = (1..=dim).map(|d| format!("x{d}")).collect();
    hdr.push("entropy".into());
    let hdr_refs: Vec<&str> = hdr.iter().map(|s| s.as_str()).collect();
    write_numeric_csv(
        &dir.join("phase_entropy.csv"),
        &hdr_refs,
        (0..g).map(|i| {
            let mut row = grid.row(i);
            row.push(field.entropy(i));
            row
        }),
    )?;

    let mut meta = baseline_meta("gp-class", c, dim);
    meta.log_marginal = Some(fit.log_marginal);
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}
