//! Carry-over constrained per-token decoding: precomputed digit filters,
//! filtered softmax over the valid-code set, marginals, and sampling.
//!
//! For a partially-masked token `y_t^i`, the valid set `V(y_t^i)` holds the
//! codes that agree with every revealed digit. Filters are stored as bitsets
//! of width `C`, one row per (position, digit-or-mask), and a query ANDs the
//! `l` selected rows. Normalizing logits over the surviving codes zeroes the
//! probability of every inconsistent prediction, which forces the marginal at
//! each revealed position onto the revealed digit.
//!
//! The factorized head (`independent_head`) is kept for comparison runs: it
//! multiplies per-position softmaxes and does not remove the probability mass
//! of invalid codes; sampling from it retries on invalid draws.

use rand::Rng;

use crate::codec::SubTokenCodec;
use crate::error::{PrimeError, Result};

/// Per-position digit filters over the valid codes, packed as 64-bit words.
#[derive(Debug, Clone)]
pub struct FilterTable {
    num_classes: usize,
    code_len: usize,
    base: u32,
    words: usize,
    /// Row for (position `j`, symbol `v`) at `[(j*(b+1)+v)*words ..]`; the
    /// mask symbol `v == b` selects every code.
    bits: Vec<u64>,
}

impl FilterTable {
    pub fn build(codec: &SubTokenCodec) -> Self {
        let c = codec.num_classes() as usize;
        let l = codec.code_len();
        let b = codec.base();
        let words = c.div_ceil(64);
        let rows = l * (b as usize + 1);
        let mut bits = vec![0u64; rows * words];
        for j in 0..l {
            for code in 0..c {
                let v = codec.digit(code as u32, j);
                let row = (j * (b as usize + 1) + v as usize) * words;
                bits[row + code / 64] |= 1u64 << (code % 64);
            }
            // Mask row: no constraint, every code survives.
            let row = (j * (b as usize + 1) + b as usize) * words;
            for (w, slot) in bits[row..row + words].iter_mut().enumerate() {
                *slot = tail_mask(c, w);
            }
        }
        Self {
            num_classes: c,
            code_len: l,
            base: b,
            words,
            bits,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn code_len(&self) -> usize {
        self.code_len
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    /// The filter row for position `j` and symbol `v` (mask when `v == b`).
    pub fn row(&self, j: usize, v: u32) -> &[u64] {
        assert!(j < self.code_len && v <= self.base);
        let start = (j * (self.base as usize + 1) + v as usize) * self.words;
        &self.bits[start..start + self.words]
    }

    /// Codes consistent with every revealed digit of `y_ti`: the bitwise AND
    /// of the selected rows.
    pub fn valid_set(&self, y_ti: &[u32]) -> SupportMask {
        assert_eq!(y_ti.len(), self.code_len, "query length mismatch");
        let mut out = vec![u64::MAX; self.words];
        for (w, slot) in out.iter_mut().enumerate() {
            *slot = tail_mask(self.num_classes, w);
        }
        for (j, &v) in y_ti.iter().enumerate() {
            if v == self.base {
                continue; // mask row is all-true
            }
            for (slot, &r) in out.iter_mut().zip(self.row(j, v)) {
                *slot &= r;
            }
        }
        SupportMask {
            bits: out,
            num_classes: self.num_classes,
        }
    }

    /// Support containing every valid code.
    pub fn full_support(&self) -> SupportMask {
        SupportMask::all(self.num_classes)
    }
}

fn tail_mask(num_classes: usize, word: usize) -> u64 {
    let remaining = num_classes.saturating_sub(word * 64);
    match remaining {
        0 => 0,
        r if r >= 64 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// A subset of the `C` valid codes, packed as bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportMask {
    bits: Vec<u64>,
    num_classes: usize,
}

impl SupportMask {
    pub fn all(num_classes: usize) -> Self {
        let words = num_classes.div_ceil(64);
        let bits = (0..words).map(|w| tail_mask(num_classes, w)).collect();
        Self { bits, num_classes }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn contains(&self, code: u32) -> bool {
        let c = code as usize;
        c < self.num_classes && (self.bits[c / 64] >> (c % 64)) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    /// Iterate the supported code indices in increasing order.
    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.bits.iter().enumerate().flat_map(|(w, &word)| {
            let mut word = word;
            std::iter::from_fn(move || {
                if word == 0 {
                    return None;
                }
                let bit = word.trailing_zeros();
                word &= word - 1;
                Some(w as u32 * 64 + bit)
            })
        })
    }
}

/// A categorical distribution over the `C` valid codes with explicit support.
///
/// Produced by [`filtered_softmax`] the probabilities sum to one; converted
/// from an [`IndependentDist`] they may sum to less (the deficit is the mass
/// the factorized head places on invalid codes).
#[derive(Debug, Clone)]
pub struct DecoderDist {
    probs: Vec<f64>,
    support: SupportMask,
}

impl DecoderDist {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support(&self) -> &SupportMask {
        &self.support
    }

    /// Sum the probabilities of codes sharing digit value at position `j`.
    pub fn marginal(&self, codec: &SubTokenCodec, j: usize) -> Vec<f64> {
        assert!(j < codec.code_len());
        let mut out = vec![0.0; codec.base() as usize];
        for (code, &p) in self.probs.iter().enumerate() {
            if p != 0.0 {
                out[codec.digit(code as u32, j) as usize] += p;
            }
        }
        out
    }

    /// Draw a code index by inverse CDF using a single uniform.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut last = 0u32;
        for code in self.support.iter() {
            cum += self.probs[code as usize];
            last = code;
            if u < cum {
                return code;
            }
        }
        last // floating-point tail; return the final supported code
    }
}

/// Softmax restricted to `support`; probabilities are zero elsewhere.
pub fn filtered_softmax(logits: &[f64], support: &SupportMask) -> Result<DecoderDist> {
    if support.is_empty() {
        return Err(PrimeError::EmptySupport);
    }
    assert_eq!(logits.len(), support.num_classes(), "logit length mismatch");
    let max = support
        .iter()
        .map(|c| logits[c as usize])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = vec![0.0; logits.len()];
    let mut z = 0.0;
    for c in support.iter() {
        let e = (logits[c as usize] - max).exp();
        probs[c as usize] = e;
        z += e;
    }
    for p in &mut probs {
        *p /= z;
    }
    Ok(DecoderDist {
        probs,
        support: support.clone(),
    })
}

/// Log-probability of `target` under the filtered softmax, computed in a
/// numerically stable form; zero whenever the support is a singleton.
pub fn filtered_log_prob(logits: &[f64], support: &SupportMask, target: u32) -> Result<f64> {
    if support.is_empty() {
        return Err(PrimeError::EmptySupport);
    }
    assert!(support.contains(target), "target {target} not in support");
    let max = support
        .iter()
        .map(|c| logits[c as usize])
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = support.iter().map(|c| (logits[c as usize] - max).exp()).sum();
    Ok(logits[target as usize] - max - z.ln())
}

/// The factorized comparison head: per-position softmaxes restricted to the
/// digits consistent with `y_ti`, multiplied as if positions were
/// independent. Mass on invalid codes is kept (not renormalized away).
#[derive(Debug, Clone)]
pub struct IndependentDist {
    /// `l` rows of `b` probabilities; a revealed position is a point mass.
    factors: Vec<Vec<f64>>,
}

/// Build an [`IndependentDist`] from `l` per-position logit rows of length
/// `b`. Revealed positions of `y_ti` become point masses on the revealed
/// digit; masked positions are softmaxed over all `b` digits.
pub fn independent_head(logitsets: &[Vec<f64>], y_ti: &[u32], base: u32) -> IndependentDist {
    assert_eq!(logitsets.len(), y_ti.len(), "one logit row per position");
    let factors = logitsets
        .iter()
        .zip(y_ti)
        .map(|(row, &v)| {
            assert_eq!(row.len(), base as usize, "logit row length mismatch");
            if v < base {
                let mut f = vec![0.0; base as usize];
                f[v as usize] = 1.0;
                f
            } else {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut f: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                let z: f64 = f.iter().sum();
                f.iter_mut().for_each(|p| *p /= z);
                f
            }
        })
        .collect();
    IndependentDist { factors }
}

impl IndependentDist {
    pub fn factors(&self) -> &[Vec<f64>] {
        &self.factors
    }

    /// Product mass of an arbitrary digit sequence (valid or not).
    pub fn code_mass(&self, digits: &[u32]) -> f64 {
        assert_eq!(digits.len(), self.factors.len());
        digits
            .iter()
            .zip(&self.factors)
            .map(|(&d, f)| f[d as usize])
            .product()
    }

    /// Project onto the `C` valid codes consistent with `y_ti`. The result
    /// sums to at most one; the deficit is invalid-code mass.
    pub fn to_decoder_dist(&self, ft: &FilterTable, y_ti: &[u32], codec: &SubTokenCodec) -> DecoderDist {
        let support = ft.valid_set(y_ti);
        let mut probs = vec![0.0; ft.num_classes()];
        let mut digits = vec![0u32; codec.code_len()];
        for c in support.iter() {
            codec.encode_into(c, &mut digits).expect("valid code");
            probs[c as usize] = self.code_mass(&digits);
        }
        DecoderDist { probs, support }
    }

    /// Draw digits per position independently, retrying on invalid codes
    /// (cap 100 tries, then argmax of product mass over valid codes).
    pub fn sample<R: Rng>(&self, codec: &SubTokenCodec, rng: &mut R) -> u32 {
        let mut digits = vec![0u32; self.factors.len()];
        for _ in 0..100 {
            for (d, f) in digits.iter_mut().zip(&self.factors) {
                let u: f64 = rng.random();
                let mut cum = 0.0;
                *d = (f.len() - 1) as u32;
                for (v, &p) in f.iter().enumerate() {
                    cum += p;
                    if u < cum {
                        *d = v as u32;
                        break;
                    }
                }
            }
            if let Ok(tok) = codec.decode(&digits) {
                return tok;
            }
        }
        let mut best = 0u32;
        let mut best_mass = f64::NEG_INFINITY;
        for c in 0..codec.num_classes() {
            codec.encode_into(c, &mut digits).expect("valid code");
            let m = self.code_mass(&digits);
            if m > best_mass {
                best_mass = m;
                best = c;
            }
        }
        best
    }
}
