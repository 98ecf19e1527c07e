//! Forward masking, absorbing transitions, and the reverse posterior over
//! sub-token grids.
//!
//! A grid holds `L * l` digits; a masked digit carries the sentinel value
//! `base`. All kernels consume randomness entry by entry in row-major order
//! (token-major), one uniform draw per eligible entry, so trajectories are
//! reproducible given a seeded RNG.

use rand::Rng;

use crate::codec::SubTokenCodec;
use crate::error::{PrimeError, Result};
use crate::schedule::Schedule;

/// A fully-revealed grid: every row is the encoding of some token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanSeq {
    grid: Vec<u32>,
    num_tokens: usize,
    code_len: usize,
    base: u32,
}

/// A partially-masked grid over digits plus the mask sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSeq {
    grid: Vec<u32>,
    num_tokens: usize,
    code_len: usize,
    base: u32,
}

impl CleanSeq {
    /// Encode a token sequence into a clean digit grid.
    pub fn from_tokens(codec: &SubTokenCodec, tokens: &[u32]) -> Result<Self> {
        let l = codec.code_len();
        let mut grid = vec![0u32; tokens.len() * l];
        for (i, &tok) in tokens.iter().enumerate() {
            codec.encode_into(tok, &mut grid[i * l..(i + 1) * l])?;
        }
        Ok(Self {
            grid,
            num_tokens: tokens.len(),
            code_len: l,
            base: codec.base(),
        })
    }

    /// Build directly from a digit grid, validating every row decodes.
    pub fn from_grid(codec: &SubTokenCodec, grid: Vec<u32>) -> Result<Self> {
        let l = codec.code_len();
        assert_eq!(grid.len() % l, 0, "grid length not a multiple of code_len");
        for row in grid.chunks(l) {
            codec.decode(row)?;
        }
        Ok(Self {
            num_tokens: grid.len() / l,
            grid,
            code_len: l,
            base: codec.base(),
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn code_len(&self) -> usize {
        self.code_len
    }

    pub fn grid(&self) -> &[u32] {
        &self.grid
    }

    pub fn token_row(&self, i: usize) -> &[u32] {
        &self.grid[i * self.code_len..(i + 1) * self.code_len]
    }

    /// Decode every row back to tokens.
    pub fn decode(&self, codec: &SubTokenCodec) -> Result<Vec<u32>> {
        self.grid.chunks(self.code_len).map(|row| codec.decode(row)).collect()
    }
}

impl MaskedSeq {
    /// An all-mask grid for `num_tokens` tokens.
    pub fn all_masked(codec: &SubTokenCodec, num_tokens: usize) -> Self {
        Self {
            grid: vec![codec.base(); num_tokens * codec.code_len()],
            num_tokens,
            code_len: codec.code_len(),
            base: codec.base(),
        }
    }

    /// View a clean grid as a masked grid with no masks.
    pub fn from_clean(clean: &CleanSeq) -> Self {
        Self {
            grid: clean.grid.clone(),
            num_tokens: clean.num_tokens,
            code_len: clean.code_len,
            base: clean.base,
        }
    }

    pub(crate) fn from_parts(grid: Vec<u32>, num_tokens: usize, code_len: usize, base: u32) -> Self {
        debug_assert_eq!(grid.len(), num_tokens * code_len);
        debug_assert!(grid.iter().all(|&v| v <= base));
        Self {
            grid,
            num_tokens,
            code_len,
            base,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn code_len(&self) -> usize {
        self.code_len
    }

    /// Mask sentinel (`base`).
    pub fn mask_symbol(&self) -> u32 {
        self.base
    }

    pub fn grid(&self) -> &[u32] {
        &self.grid
    }

    pub fn entry(&self, token: usize, pos: usize) -> u32 {
        self.grid[token * self.code_len + pos]
    }

    pub fn is_masked(&self, token: usize, pos: usize) -> bool {
        self.entry(token, pos) == self.base
    }

    pub fn token_row(&self, i: usize) -> &[u32] {
        &self.grid[i * self.code_len..(i + 1) * self.code_len]
    }

    /// True when no digit of token `i` is masked.
    pub fn token_unmasked(&self, i: usize) -> bool {
        self.token_row(i).iter().all(|&v| v != self.base)
    }

    pub fn masked_entries(&self) -> usize {
        self.grid.iter().filter(|&&v| v == self.base).count()
    }

    /// Interpret as a clean grid; fails if any digit is masked.
    pub fn to_clean(&self, codec: &SubTokenCodec) -> Result<CleanSeq> {
        if self.masked_entries() > 0 {
            return Err(PrimeError::InvalidArgument(
                "grid still contains masked digits".into(),
            ));
        }
        CleanSeq::from_grid(codec, self.grid.clone())
    }
}

/// Sample the forward kernel: each digit of `y0` independently survives with
/// probability `alpha(t)` and is masked otherwise.
pub fn forward_sample<R: Rng>(y0: &CleanSeq, t: f64, sch: Schedule, rng: &mut R) -> MaskedSeq {
    let alpha = sch.alpha(t);
    let mask = y0.base;
    let grid = y0
        .grid
        .iter()
        .map(|&v| if rng.random::<f64>() < alpha { v } else { mask })
        .collect();
    MaskedSeq::from_parts(grid, y0.num_tokens, y0.code_len, y0.base)
}

/// Sample the absorbing transition from time `s` to `t > s`: masked digits
/// stay masked, revealed digits are masked with probability
/// `(alpha_s - alpha_t) / alpha_s`.
pub fn transition_sample<R: Rng>(
    y_s: &MaskedSeq,
    s: f64,
    t: f64,
    sch: Schedule,
    rng: &mut R,
) -> MaskedSeq {
    assert!(s <= t, "requires s <= t");
    let (a_s, a_t) = (sch.alpha(s), sch.alpha(t));
    let p_mask = if a_s > 0.0 { (a_s - a_t) / a_s } else { 0.0 };
    let mask = y_s.base;
    let grid = y_s
        .grid
        .iter()
        .map(|&v| {
            if v == mask {
                mask
            } else if rng.random::<f64>() < p_mask {
                mask
            } else {
                v
            }
        })
        .collect();
    MaskedSeq::from_parts(grid, y_s.num_tokens, y_s.code_len, y_s.base)
}

/// Probability that a masked digit is revealed when stepping from `t` back
/// to `s < t`.
pub fn unmask_probability(s: f64, t: f64, sch: Schedule) -> f64 {
    let (a_s, a_t) = (sch.alpha(s), sch.alpha(t));
    let denom = 1.0 - a_t;
    if denom <= 0.0 {
        1.0
    } else {
        ((a_s - a_t) / denom).clamp(0.0, 1.0)
    }
}

/// Sample the reverse posterior given a denoiser target `y0_hat`.
///
/// Revealed digits of `y_t` carry over unchanged; each masked digit is set to
/// the target's value with probability `(alpha_s - alpha_t) / (1 - alpha_t)`
/// and stays masked otherwise. Fails if `y0_hat` disagrees with any revealed
/// digit.
pub fn posterior_step<R: Rng>(
    y_t: &MaskedSeq,
    y0_hat: &CleanSeq,
    s: f64,
    t: f64,
    sch: Schedule,
    rng: &mut R,
) -> Result<MaskedSeq> {
    assert!(s <= t, "requires s <= t");
    assert_eq!(y_t.grid.len(), y0_hat.grid.len(), "grid shape mismatch");
    let mask = y_t.base;
    for (idx, (&v, &w)) in y_t.grid.iter().zip(&y0_hat.grid).enumerate() {
        if v != mask && v != w {
            return Err(PrimeError::InconsistentTarget {
                token: idx / y_t.code_len,
                position: idx % y_t.code_len,
            });
        }
    }
    let p_unmask = unmask_probability(s, t, sch);
    let grid = y_t
        .grid
        .iter()
        .zip(&y0_hat.grid)
        .map(|(&v, &w)| {
            if v != mask {
                v
            } else if rng.random::<f64>() < p_unmask {
                w
            } else {
                mask
            }
        })
        .collect();
    Ok(MaskedSeq::from_parts(grid, y_t.num_tokens, y_t.code_len, y_t.base))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn codec42() -> SubTokenCodec {
        SubTokenCodec::new(4, 2).unwrap()
    }

    #[test]
    fn forward_boundaries() {
        let codec = codec42();
        let y0 = CleanSeq::from_tokens(&codec, &[0, 1, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let at0 = forward_sample(&y0, 0.0, Schedule::Linear, &mut rng);
        assert_eq!(at0.grid(), y0.grid());
        let at1 = forward_sample(&y0, 1.0, Schedule::Linear, &mut rng);
        assert_eq!(at1.masked_entries(), 8);
    }

    #[test]
    fn forward_masked_fraction_concentrates() {
        // 10^5 digits at t=0.5 under the linear schedule: fraction 0.5 +- 0.01.
        let codec = SubTokenCodec::new(32, 5).unwrap();
        let tokens: Vec<u32> = (0..20_000).map(|i| i % 32).collect();
        let y0 = CleanSeq::from_tokens(&codec, &tokens).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y_t = forward_sample(&y0, 0.5, Schedule::Linear, &mut rng);
        let frac = y_t.masked_entries() as f64 / (tokens.len() * 5) as f64;
        assert!((frac - 0.5).abs() < 0.01, "masked fraction {frac}");
    }

    #[test]
    fn posterior_carry_over_is_identity_on_unmasked() {
        let codec = codec42();
        let y0 = CleanSeq::from_tokens(&codec, &[3, 0, 1, 2]).unwrap();
        let y_t = MaskedSeq::from_clean(&y0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = posterior_step(&y_t, &y0, 0.2, 0.9, Schedule::Linear, &mut rng).unwrap();
        assert_eq!(out.grid(), y_t.grid());
    }

    #[test]
    fn posterior_no_op_when_s_equals_t() {
        let codec = codec42();
        let y0 = CleanSeq::from_tokens(&codec, &[3, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y_t = forward_sample(&y0, 0.7, Schedule::Linear, &mut rng);
        let out = posterior_step(&y_t, &y0, 0.7, 0.7, Schedule::Linear, &mut rng).unwrap();
        assert_eq!(out.grid(), y_t.grid());
    }

    #[test]
    fn posterior_unmasks_everything_at_s_zero() {
        let codec = codec42();
        let y0 = CleanSeq::from_tokens(&codec, &[1, 2, 3, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y_t = forward_sample(&y0, 0.9, Schedule::Linear, &mut rng);
        let out = posterior_step(&y_t, &y0, 0.0, 0.9, Schedule::Linear, &mut rng).unwrap();
        assert_eq!(out.grid(), y0.grid());
    }

    #[test]
    fn posterior_rejects_inconsistent_target() {
        let codec = codec42();
        let y0 = CleanSeq::from_tokens(&codec, &[3]).unwrap();
        let other = CleanSeq::from_tokens(&codec, &[0]).unwrap();
        let y_t = MaskedSeq::from_clean(&y0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let err = posterior_step(&y_t, &other, 0.1, 0.5, Schedule::Linear, &mut rng);
        assert!(matches!(err, Err(PrimeError::InconsistentTarget { .. })));
    }

    #[test]
    fn transition_is_absorbing_and_identity_at_equal_times() {
        let codec = codec42();
        let y0 = CleanSeq::from_tokens(&codec, &[0, 1, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y_s = forward_sample(&y0, 0.6, Schedule::Linear, &mut rng);
        let masked_before: Vec<usize> = (0..y_s.grid().len())
            .filter(|&k| y_s.grid()[k] == y_s.mask_symbol())
            .collect();
        let y_t = transition_sample(&y_s, 0.6, 0.9, Schedule::Linear, &mut rng);
        for &k in &masked_before {
            assert_eq!(y_t.grid()[k], y_t.mask_symbol());
        }
        let same = transition_sample(&y_s, 0.6, 0.6, Schedule::Linear, &mut rng);
        assert_eq!(same.grid(), y_s.grid());
    }

    /// Forward to s then transition s->t must match forward to t in
    /// distribution (Markov consistency); chi-square test on the per-digit
    /// masked count over 10^5 trials.
    #[test]
    fn markov_composition_matches_direct_forward() {
        let codec = codec42();
        let y0 = CleanSeq::from_tokens(&codec, &[2]).unwrap();
        let (s, t) = (0.3, 0.8);
        let sch = Schedule::Linear;
        let trials = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut masked_composed = 0usize;
        for _ in 0..trials {
            let y_s = forward_sample(&y0, s, sch, &mut rng);
            let y_t = transition_sample(&y_s, s, t, sch, &mut rng);
            masked_composed += y_t.masked_entries();
        }
        let n = (trials * 2) as f64; // two digits per trial
        let expect_masked = n * (1.0 - sch.alpha(t));
        let expect_clear = n * sch.alpha(t);
        let observed_masked = masked_composed as f64;
        let observed_clear = n - observed_masked;
        let chi2 = (observed_masked - expect_masked).powi(2) / expect_masked
            + (observed_clear - expect_clear).powi(2) / expect_clear;
        // 1 dof: chi2 < 6.63 corresponds to p > 0.01.
        assert!(chi2 < 6.63, "chi2 = {chi2}");
    }

    #[test]
    fn clean_seq_round_trip() {
        let codec = SubTokenCodec::new(7, 3).unwrap();
        let toks = [0u32, 3, 6, 1];
        let y0 = CleanSeq::from_tokens(&codec, &toks).unwrap();
        assert_eq!(y0.decode(&codec).unwrap(), toks);
        assert!(CleanSeq::from_grid(&codec, vec![1, 1, 1, 0, 0, 0]).is_err());
    }
}
