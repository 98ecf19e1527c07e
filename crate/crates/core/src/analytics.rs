//! Closed-form idle-step counts, idle-step ratios, simulation cross-checks,
//! and code-length selection from the ISR curve.
//!
//! With `T` uniform reverse steps and a sequence of `n` independently masked
//! elements, the expected number of idle steps is
//! `sum_k [1 - (alpha(1-(k+1)/T) - alpha(1-k/T))]^n`; splitting tokens into
//! `l` digits multiplies the element count and strictly shrinks every
//! summand. Powers are taken in log space so long sequences do not
//! underflow.

use rand_chacha::rand_core::SeedableRng;

use crate::diffusion::{posterior_step, CleanSeq, MaskedSeq};
use crate::error::{PrimeError, Result};
use crate::schedule::Schedule;
use crate::Rng;

/// Closed-form and simulated idle-step statistics for one configuration.
#[derive(Debug, Clone)]
pub struct IdleStats {
    /// Expected idle steps at the token level (`n = L`).
    pub eta_analytic: f64,
    /// Expected idle steps at the digit level (`n = L * l`).
    pub eta_prime_analytic: f64,
    /// `eta_prime_analytic / T`.
    pub isr: f64,
    pub eta_simulated_mean: f64,
    pub eta_simulated_var: f64,
    pub runs: usize,
}

/// Expected number of idle steps for `seq_len` independently masked
/// elements over `T` uniform reverse steps.
pub fn expected_idle_steps(sch: Schedule, num_steps: usize, seq_len: u64) -> f64 {
    assert!(num_steps >= 1 && seq_len >= 1);
    let t_of = |k: usize| 1.0 - k as f64 / num_steps as f64;
    let mut eta = 0.0;
    for k in 0..num_steps {
        let delta = sch.alpha(t_of(k + 1)) - sch.alpha(t_of(k));
        // (1 - delta)^seq_len via log1p; delta == 1 contributes zero.
        if delta < 1.0 {
            eta += (seq_len as f64 * (-delta).ln_1p()).exp();
        }
    }
    eta
}

/// Idle-step ratio: expected idle steps at the digit level over `T`.
pub fn isr(sch: Schedule, num_steps: usize, num_tokens: u64, code_len: u32) -> f64 {
    expected_idle_steps(sch, num_steps, num_tokens * code_len as u64) / num_steps as f64
}

/// Simulate the pure masking/unmasking process (no model; the revealed
/// values are irrelevant) and tally idle steps over `runs` trajectories.
pub fn simulate_idle_steps(
    sch: Schedule,
    num_steps: usize,
    num_tokens: u64,
    code_len: u32,
    runs: usize,
    rng: &mut Rng,
) -> Result<IdleStats> {
    if runs < 1 {
        return Err(PrimeError::InvalidArgument("runs must be >= 1".into()));
    }
    let seq_len = num_tokens * code_len as u64;
    let counts: Vec<f64> = (0..runs)
        .map(|_| simulate_one(sch, num_steps, seq_len as usize, rng) as f64)
        .collect();
    let mean = counts.iter().sum::<f64>() / runs as f64;
    let var = if runs > 1 {
        counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (runs as f64 - 1.0)
    } else {
        0.0
    };
    Ok(IdleStats {
        eta_analytic: expected_idle_steps(sch, num_steps, num_tokens),
        eta_prime_analytic: expected_idle_steps(sch, num_steps, seq_len),
        isr: isr(sch, num_steps, num_tokens, code_len),
        eta_simulated_mean: mean,
        eta_simulated_var: var,
        runs,
    })
}

fn simulate_one(sch: Schedule, num_steps: usize, seq_len: usize, rng: &mut Rng) -> usize {
    // A dummy single-digit alphabet: value 0, mask sentinel 1. The reverse
    // posterior kernel drives the unmasking exactly as a real run would.
    let zeros = CleanSeq::from_grid(
        &crate::codec::SubTokenCodec::new(2, 1).expect("codec"),
        vec![0; seq_len],
    )
    .expect("dummy target");
    let mut grid = MaskedSeq::from_parts(vec![1; seq_len], seq_len, 1, 1);
    let t_of = |k: usize| 1.0 - k as f64 / num_steps as f64;
    let mut idle = 0usize;
    for k in 0..num_steps {
        let before = grid.masked_entries();
        if before == 0 {
            idle += 1;
            continue;
        }
        let next = posterior_step(&grid, &zeros, t_of(k + 1), t_of(k), sch, rng)
            .expect("consistent dummy target");
        if next.masked_entries() == before {
            idle += 1;
        }
        grid = next;
    }
    idle
}

/// Convenience wrapper seeding its own RNG.
pub fn simulate_idle_steps_seeded(
    sch: Schedule,
    num_steps: usize,
    num_tokens: u64,
    code_len: u32,
    runs: usize,
    seed: u64,
) -> Result<IdleStats> {
    let mut rng = Rng::seed_from_u64(seed);
    simulate_idle_steps(sch, num_steps, num_tokens, code_len, runs, &mut rng)
}

/// Pick the code length at which the ISR curve flattens.
///
/// Both axes are normalized to `[0, 1]` and the first candidate whose
/// outgoing slope magnitude falls below half the mean slope of the whole
/// polyline is returned. A curve with no flattening point (e.g. exactly
/// linear) falls back to the smallest candidate.
pub fn isr_elbow(
    sch: Schedule,
    num_steps: usize,
    num_tokens: u64,
    candidates: &[u32],
) -> Result<u32> {
    if candidates.len() < 3 {
        return Err(PrimeError::InvalidArgument(
            "need at least 3 candidate code lengths".into(),
        ));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let values: Vec<f64> = sorted
        .iter()
        .map(|&l| isr(sch, num_steps, num_tokens, l))
        .collect();
    elbow_of_curve(&sorted, &values)
}

fn elbow_of_curve(lengths: &[u32], values: &[f64]) -> Result<u32> {
    let (x0, x1) = (lengths[0] as f64, *lengths.last().unwrap() as f64);
    let (y_min, y_max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if x1 <= x0 || y_max <= y_min {
        return Ok(lengths[0]); // degenerate curve
    }
    let xs: Vec<f64> = lengths.iter().map(|&l| (l as f64 - x0) / (x1 - x0)).collect();
    let ys: Vec<f64> = values.iter().map(|&v| (v - y_min) / (y_max - y_min)).collect();
    // Mean slope of the normalized polyline is -1; "flat" is half of that.
    let threshold = 0.5;
    for i in 0..lengths.len() - 1 {
        let slope = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
        if slope.abs() < threshold {
            return Ok(lengths[i]);
        }
    }
    Ok(lengths[0])
}
