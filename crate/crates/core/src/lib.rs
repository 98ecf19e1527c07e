//! Masked discrete diffusion over base-b sub-token encodings.
//!
//! Tokens from an alphabet of `C` classes are split into length-`l` digit
//! sequences in base `b = ceil(C^(1/l))`. The forward process masks digits
//! independently, which creates partially-masked intermediate token states;
//! the reverse process denoises them with a per-token joint distribution over
//! the `C` valid codes, constrained so that already-revealed digits are
//! reproduced exactly (carry-over). The crate bundles:
//!
//! - [`codec`]: the invertible token/digit-sequence map and state counting,
//! - [`schedule`]: masking schedules, loss weights, mutual-information decay,
//! - [`diffusion`]: forward, transition, and posterior sampling kernels,
//! - [`decoder`]: filter tables, filtered softmax, marginals, sampling heads,
//! - [`net`]: a small MLP denoiser with hand-rolled reverse-mode gradients,
//! - [`trainer`]: variational-bound training and NLL/perplexity evaluation,
//! - [`sampler`]: ancestral reverse-diffusion generation and imputation,
//! - [`analytics`]: closed-form idle-step counts, ISR, and simulation checks,
//! - [`data`]: 2-D density construction, sampling, and TV-distance scoring,
//! - [`config`] / [`checkpoint`]: run configuration and model persistence.

pub mod analytics;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod decoder;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod net;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use codec::SubTokenCodec;
pub use decoder::{DecoderDist, FilterTable};
pub use diffusion::{CleanSeq, MaskedSeq};
pub use error::{PrimeError, Result};
pub use net::{Net, NetConfig};
pub use schedule::Schedule;

/// Deterministic RNG used throughout; seedable and stream-splittable.
pub type Rng = rand_chacha::ChaCha8Rng;
