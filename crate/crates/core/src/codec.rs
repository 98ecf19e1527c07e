//! Invertible base-b encoding between tokens and fixed-length digit sequences.
//!
//! A token `x` in `{0..C-1}` maps to its base-`b` representation of length
//! `l`, most-significant digit first, where `b` is the smallest integer with
//! `b^l >= C`. The inverse rejects digit sequences whose positional value is
//! `>= C` (codes outside the image of the encoder).

use crate::error::{PrimeError, Result};

/// Valid-code tables are materialized eagerly up to this many classes and
/// computed on demand above it.
pub const MATERIALIZE_CAP: u32 = 1 << 20;

/// The invertible map between tokens `{0..C-1}` and length-`l` base-`b`
/// digit sequences, plus the ordered valid-code table `f(0)..f(C-1)`.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct SubTokenCodec {
    num_classes: u32,
    code_len: usize,
    base: u32,
    /// Place value of each digit position, most-significant first.
    place: Vec<u64>,
    /// Flat `C * l` digit table; code for token `x` at `[x*l .. (x+1)*l]`.
    valid_codes: Option<Vec<u32>>,
}

impl SubTokenCodec {
    /// Build a codec for `num_classes` tokens encoded as `code_len` digits.
    pub fn new(num_classes: u32, code_len: usize) -> Result<Self> {
        Self::with_materialize_cap(num_classes, code_len, MATERIALIZE_CAP)
    }

    /// As [`SubTokenCodec::new`] with an explicit cap on eager valid-code
    /// materialization.
    pub fn with_materialize_cap(num_classes: u32, code_len: usize, cap: u32) -> Result<Self> {
        if num_classes < 2 {
            return Err(PrimeError::InvalidArgument(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        if code_len < 1 {
            return Err(PrimeError::InvalidArgument(
                "code_len must be >= 1".into(),
            ));
        }
        let base = minimal_base(num_classes, code_len)?;
        let mut place = vec![1u64; code_len];
        for j in (0..code_len.saturating_sub(1)).rev() {
            place[j] = place[j + 1]
                .checked_mul(base as u64)
                .ok_or_else(|| PrimeError::InvalidArgument("place value overflow".into()))?;
        }
        let valid_codes = if num_classes <= cap {
            let mut table = vec![0u32; num_classes as usize * code_len];
            for x in 0..num_classes {
                let row = &mut table[x as usize * code_len..(x as usize + 1) * code_len];
                encode_digits(x, &place, base, row);
            }
            Some(table)
        } else {
            None
        };
        Ok(Self {
            num_classes,
            code_len,
            base,
            place,
            valid_codes,
        })
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    /// Number of digits per token (`l`).
    pub fn code_len(&self) -> usize {
        self.code_len
    }

    /// Digit alphabet size (`b`).
    pub fn base(&self) -> u32 {
        self.base
    }

    /// Sentinel value used for a masked digit; equals `base`.
    pub fn mask_symbol(&self) -> u32 {
        self.base
    }

    /// Encode a token into its digit sequence, most-significant first.
    pub fn encode(&self, token: u32) -> Result<Vec<u32>> {
        let mut out = vec![0u32; self.code_len];
        self.encode_into(token, &mut out)?;
        Ok(out)
    }

    /// Encode into a caller-provided buffer of length `code_len`.
    pub fn encode_into(&self, token: u32, out: &mut [u32]) -> Result<()> {
        if token >= self.num_classes {
            return Err(PrimeError::InvalidArgument(format!(
                "token {token} out of range 0..{}",
                self.num_classes
            )));
        }
        assert_eq!(out.len(), self.code_len, "output buffer length mismatch");
        if let Some(table) = &self.valid_codes {
            let row = &table[token as usize * self.code_len..(token as usize + 1) * self.code_len];
            out.copy_from_slice(row);
        } else {
            encode_digits(token, &self.place, self.base, out);
        }
        Ok(())
    }

    /// Digit of `token` at position `pos` without materializing the code.
    pub fn digit(&self, token: u32, pos: usize) -> u32 {
        debug_assert!(token < self.num_classes && pos < self.code_len);
        ((token as u64 / self.place[pos]) % self.base as u64) as u32
    }

    /// Decode a digit sequence back to its token.
    ///
    /// Fails with [`PrimeError::InvalidCode`] when the positional value is
    /// `>= C`, i.e. the sequence is not the encoding of any token.
    pub fn decode(&self, digits: &[u32]) -> Result<u32> {
        assert_eq!(digits.len(), self.code_len, "digit sequence length mismatch");
        let mut value = 0u64;
        for (&d, &p) in digits.iter().zip(&self.place) {
            assert!(d < self.base, "digit {d} out of range for base {}", self.base);
            value += d as u64 * p;
        }
        if value >= self.num_classes as u64 {
            return Err(PrimeError::InvalidCode {
                digits: digits.to_vec(),
                value,
                num_classes: self.num_classes,
            });
        }
        Ok(value as u32)
    }

    /// Number of partially-masked token states: `(b+1)^l - (C+1)`.
    ///
    /// Strictly positive whenever `l > 1`.
    pub fn intermediate_state_count(&self) -> u128 {
        let total = (self.base as u128 + 1).pow(self.code_len as u32);
        total - (self.num_classes as u128 + 1)
    }

    /// Whether the full valid-code table is materialized.
    pub fn is_materialized(&self) -> bool {
        self.valid_codes.is_some()
    }
}

fn minimal_base(num_classes: u32, code_len: usize) -> Result<u32> {
    // Integer search for the smallest b with b^l >= C; float roots of large C
    // are only used as a starting guess.
    let c = num_classes as u128;
    let l = code_len as u32;
    let pow = |b: u128| -> Option<u128> { b.checked_pow(l) };
    let mut b = (num_classes as f64).powf(1.0 / code_len as f64).ceil() as u128;
    b = b.max(1);
    while b > 1 && pow(b - 1).is_some_and(|p| p >= c) {
        b -= 1;
    }
    while pow(b).is_none_or(|p| p < c) {
        b += 1;
    }
    u32::try_from(b)
        .map_err(|_| PrimeError::InvalidArgument("base does not fit in u32".into()))
}

fn encode_digits(token: u32, place: &[u64], base: u32, out: &mut [u32]) {
    let mut rem = token as u64;
    for (o, &p) in out.iter_mut().zip(place) {
        *o = (rem / p) as u32;
        rem %= p;
    }
    debug_assert!(out.iter().all(|&d| d < base));
}
