//! Blockwise adaptive Metropolis engine.
//!
//! The engine is generic over a [`BlockTarget`]: the target exposes parameter
//! blocks, draws an initial state, and builds proposals; the engine owns the
//! accept/reject loop, Robbins-Monro step adaptation during burn-in, thinning,
//! and per-block statistics. Acceptance is always `min(1, exp(L' - L))`:
//! bounded blocks propose symmetric random walks and report out-of-support
//! moves as `None`, whitened blocks use prior-preserving
//! preconditioned-Crank-Nicolson moves, so no extra prior ratio appears.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SageError};

/// Engine settings. `iterations` counts every MCMC step including burn-in;
/// retained draws number `(iterations - burn_in) / thinning`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub chains: usize,
    pub seed: u64,
    /// Robbins-Monro gain decay horizon (proposals per block).
    pub adapt_window: usize,
    /// Prior-draw retries before giving up on initialization.
    pub init_retries: usize,
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings {
            iterations: 20_000,
            burn_in: 10_000,
            thinning: 10,
            chains: 2,
            seed: 0,
            adapt_window: 50,
            init_retries: 200,
        }
    }
}

impl McmcSettings {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.burn_in >= self.iterations {
            return Err(SageError::Validation(format!(
                "need iterations > burn_in, got {} <= {}",
                self.iterations, self.burn_in
            )));
        }
        if self.thinning == 0 || self.thinning > self.iterations - self.burn_in {
            return Err(SageError::Validation(format!(
                "thinning {} must be in [1, iterations - burn_in]",
                self.thinning
            )));
        }
        if self.chains == 0 {
            return Err(SageError::Validation("chains must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of retained draws per chain.
    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thinning
    }
}

/// Static description of one parameter block.
#[derive(Clone, Debug)]
pub struct BlockSpec {
    pub name: String,
    /// Number of scalar components moved jointly; scalar blocks adapt toward
    /// acceptance 0.44, multivariate toward 0.234.
    pub dim: usize,
    pub initial_step: f64,
    /// Hard ceiling on the adapted step (pCN beta must stay below 1).
    pub max_step: Option<f64>,
}

impl BlockSpec {
    pub fn target_acceptance(&self) -> f64 {
        if self.dim <= 1 { 0.44 } else { 0.234 }
    }
}

/// A posterior the engine can sample from.
pub trait BlockTarget {
    /// Full sampler state (may carry caches; cloned on every proposal).
    type State: Clone;
    /// What gets retained in the chain (typically a cache-free reduction).
    type Sample;

    fn blocks(&self) -> Vec<BlockSpec>;

    /// Draws one state from the prior and returns it with its log-likelihood
    /// (may be `-inf`; the engine retries).
    fn initial(&self, rng: &mut ChaCha20Rng) -> Result<(Self::State, f64)>;

    /// Proposes a move of `block` at the given step size. `Ok(None)` means
    /// out of prior support (immediate rejection); numerical failures that
    /// should reject rather than abort may also map to `Ok(None)`.
    fn propose(
        &self,
        state: &Self::State,
        block: usize,
        step: f64,
        rng: &mut ChaCha20Rng,
    ) -> Result<Option<(Self::State, f64)>>;

    fn reduce(&self, state: &Self::State) -> Self::Sample;
}

/// Per-block proposal statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub name: String,
    pub proposed: usize,
    pub accepted: usize,
    /// Post-burn-in counts (step sizes frozen).
    pub post_proposed: usize,
    pub post_accepted: usize,
    pub final_step: f64,
}

impl BlockStats {
    pub fn post_rate(&self) -> f64 {
        if self.post_proposed == 0 { 0.0 } else { self.post_accepted as f64 / self.post_proposed as f64 }
    }
}

/// Output of one chain run.
#[derive(Clone, Debug)]
pub struct RawChain<S> {
    /// Retained draws with their total log-likelihood.
    pub samples: Vec<(S, f64)>,
    pub stats: Vec<BlockStats>,
    pub chain_index: usize,
}

/// Deterministic per-(seed, chain) RNG.
pub fn chain_rng(seed: u64, chain_index: usize) -> ChaCha20Rng {
    // distinct, well-separated streams per chain; stable across thread counts
    let mixed = seed ^ (chain_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha20Rng::seed_from_u64(mixed)
}

/// Runs one chain: prior-draw initialization (best finite draw of the retry
/// budget), round-robin block sweeps, burn-in-only Robbins-Monro adaptation,
/// thinned retention.
pub fn run_block_chain<T: BlockTarget>(
    target: &T,
    settings: &McmcSettings,
    chain_index: usize,
) -> Result<RawChain<T::Sample>> {
    run_block_chain_reduced(target, settings, chain_index).map(|(_, raw)| raw)
}

/// As [`run_block_chain`] but retaining reduced samples; returns both the
/// final full state and the chain of reductions.
pub fn run_block_chain_reduced<T: BlockTarget>(
    target: &T,
    settings: &McmcSettings,
    chain_index: usize,
) -> Result<(T::State, RawChain<T::Sample>)> {
    settings.validate()?;
    let blocks = target.blocks();
    if blocks.is_empty() {
        return Err(SageError::Inference("model has no free parameter blocks".into()));
    }
    let mut rng = chain_rng(settings.seed, chain_index);

    let (mut state, mut l) = {
        let mut best: Option<(T::State, f64)> = None;
        for _ in 0..=settings.init_retries {
            let drawn = target.initial(&mut rng)?;
            if drawn.1.is_finite() && best.as_ref().is_none_or(|b| drawn.1 > b.1) {
                best = Some(drawn);
            }
        }
        best.ok_or_else(|| {
            SageError::Inference(format!(
                "no finite-likelihood initial state after {} prior draws; \
                 data may contradict every segmentation (consider a label_noise floor)",
                settings.init_retries + 1
            ))
        })?
    };

    let nb = blocks.len();
    let mut log_steps: Vec<f64> = blocks.iter().map(|b| b.initial_step.ln()).collect();
    let mut stats: Vec<BlockStats> = blocks
        .iter()
        .map(|b| BlockStats {
            name: b.name.clone(),
            proposed: 0,
            accepted: 0,
            post_proposed: 0,
            post_accepted: 0,
            final_step: b.initial_step,
        })
        .collect();
    let mut samples = Vec::with_capacity(settings.retained());

    for iter in 0..settings.iterations {
        let b = iter % nb;
        let mut step = log_steps[b].exp();
        if let Some(max) = blocks[b].max_step {
            step = step.min(max);
        }
        let in_burn_in = iter < settings.burn_in;
        stats[b].proposed += 1;
        if !in_burn_in {
            stats[b].post_proposed += 1;
        }

        // alpha = attained acceptance probability, used for adaptation
        let alpha = match target.propose(&state, b, step, &mut rng)? {
            None => 0.0,
            Some((cand, l_cand)) => {
                let a = if l_cand >= l { 1.0 } else { (l_cand - l).exp() };
                let u: f64 = rng.random();
                if u < a {
                    state = cand;
                    l = l_cand;
                    stats[b].accepted += 1;
                    if !in_burn_in {
                        stats[b].post_accepted += 1;
                    }
                }
                a
            }
        };

        if in_burn_in {
            let k = stats[b].proposed as f64;
            let gain = 0.8 / (1.0 + k / settings.adapt_window as f64).powf(0.66);
            log_steps[b] += gain * (alpha - blocks[b].target_acceptance());
            // keep steps in a sane numeric range
            log_steps[b] = log_steps[b].clamp(-30.0, 30.0);
        }

        if !in_burn_in && (iter - settings.burn_in + 1) % settings.thinning == 0 {
            samples.push((target.reduce(&state), l));
        }
    }

    for (b, s) in stats.iter_mut().enumerate() {
        s.final_step = match blocks[b].max_step {
            Some(max) => log_steps[b].exp().min(max),
            None => log_steps[b].exp(),
        };
    }
    Ok((state, RawChain { samples, stats, chain_index }))
}

/// Split-chain potential scale reduction on a per-chain scalar series
/// (each chain is split in half, so 1 chain still yields a diagnostic).
/// Returns `None` when fewer than 4 values per half are available.
pub fn split_rhat(series: &[Vec<f64>]) -> Option<f64> {
    let mut halves: Vec<&[f64]> = Vec::new();
    for s in series {
        if s.len() < 8 {
            return None;
        }
        let mid = s.len() / 2;
        halves.push(&s[..mid]);
        halves.push(&s[mid..]);
    }
    let m = halves.len();
    let n = halves.iter().map(|h| h.len()).min()?;
    if n < 4 {
        return None;
    }
    let means: Vec<f64> = halves.iter().map(|h| h[..n].iter().sum::<f64>() / n as f64).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = n as f64 / (m as f64 - 1.0) * means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h[..n].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n as f64 - 1.0))
        .sum::<f64>()
        / m as f64;
    if w <= 0.0 {
        // all chains constant: converged by definition
        return Some(1.0);
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    Some((var_plus / w).sqrt())
}
