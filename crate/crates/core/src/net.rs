//! The trainable denoiser: shared sub-token embedding table with additive
//! positional vectors, concatenation into a flat feature vector, an MLP trunk
//! with Swish activations, and per-token logit heads.
//!
//! Gradients are hand-derived per layer (lookup, concatenation, affine,
//! Swish) rather than taped. The network takes no time input; it conditions
//! only on the masked grid.
//!
//! Parameter layout (also the checkpoint order, little-endian f64):
//! embedding rows `(b+1) x E` row-major, positional rows `l x E`, then per
//! affine layer the weight matrix `(in x out)` row-major followed by its
//! bias.

use ndarray::{linalg::general_mat_mul, Array1, Array2};
use rand::Rng;

use crate::diffusion::MaskedSeq;
use crate::error::{PrimeError, Result};

/// Output head layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// `C` logits per token: one scalar per valid code.
    Joint,
    /// `l * b` logits per token: a factorized per-position head, kept for
    /// comparison runs.
    Independent,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "joint" => Ok(HeadKind::Joint),
            "independent" => Ok(HeadKind::Independent),
            other => Err(PrimeError::Config(format!("unknown head kind: {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Joint => "joint",
            HeadKind::Independent => "independent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    /// Token sequence length `L`.
    pub num_tokens: usize,
    /// Token alphabet size `C`.
    pub num_classes: u32,
    /// Digits per token `l`.
    pub code_len: usize,
    /// Digit alphabet size `b`; the embedding table has `b + 1` rows.
    pub base: u32,
    /// Embedding width per sub-token (`D / l`).
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Number of affine layers (>= 2).
    pub num_layers: usize,
    pub head: HeadKind,
}

impl NetConfig {
    pub fn input_dim(&self) -> usize {
        self.num_tokens * self.code_len * self.embed_dim
    }

    pub fn per_token_out(&self) -> usize {
        match self.head {
            HeadKind::Joint => self.num_classes as usize,
            HeadKind::Independent => self.code_len * self.base as usize,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.num_tokens * self.per_token_out()
    }

    /// `(fan_in, fan_out)` of each affine layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        assert!(self.num_layers >= 2, "need at least two affine layers");
        let mut dims = Vec::with_capacity(self.num_layers);
        dims.push((self.input_dim(), self.hidden_dim));
        for _ in 0..self.num_layers - 2 {
            dims.push((self.hidden_dim, self.hidden_dim));
        }
        dims.push((self.hidden_dim, self.output_dim()));
        dims
    }

    pub fn param_count(&self) -> usize {
        let emb = (self.base as usize + 1) * self.embed_dim;
        let pos = self.code_len * self.embed_dim;
        let layers: usize = self
            .layer_dims()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum();
        emb + pos + layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tokens == 0
            || self.num_classes < 2
            || self.code_len == 0
            || self.embed_dim == 0
            || self.hidden_dim == 0
        {
            return Err(PrimeError::Config("net dimensions must be positive".into()));
        }
        if self.num_layers < 2 {
            return Err(PrimeError::Config("num_layers must be >= 2".into()));
        }
        Ok(())
    }
}

/// Parameter (or gradient / moment) storage matching a [`NetConfig`].
#[derive(Debug, Clone)]
pub struct Tensors {
    pub emb: Array2<f64>,
    pub pos: Array2<f64>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Tensors {
    pub fn zeros(cfg: &NetConfig) -> Self {
        Self {
            emb: Array2::zeros((cfg.base as usize + 1, cfg.embed_dim)),
            pos: Array2::zeros((cfg.code_len, cfg.embed_dim)),
            weights: cfg
                .layer_dims()
                .iter()
                .map(|&(i, o)| Array2::zeros((i, o)))
                .collect(),
            biases: cfg
                .layer_dims()
                .iter()
                .map(|&(_, o)| Array1::zeros(o))
                .collect(),
        }
    }

    /// Flat slices in the documented parameter order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![
            self.emb.as_slice().expect("contiguous"),
            self.pos.as_slice().expect("contiguous"),
        ];
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("contiguous"));
            out.push(b.as_slice().expect("contiguous"));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.emb.as_slice_mut().expect("contiguous"),
            self.pos.as_slice_mut().expect("contiguous"),
        ];
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("contiguous"));
            out.push(b.as_slice_mut().expect("contiguous"));
        }
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for s in self.slices() {
            flat.extend_from_slice(s);
        }
        flat
    }

    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.slices().iter().map(|s| s.len()).sum();
        if flat.len() != total {
            return Err(PrimeError::Checkpoint(format!(
                "parameter count mismatch: expected {total}, got {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }
}

/// Forward-pass intermediates needed by the backward pass.
pub struct BatchCache {
    entries: Vec<u32>,
    batch: usize,
    input: Array2<f64>,
    zs: Vec<Array2<f64>>,
    acts: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct Net {
    cfg: NetConfig,
    params: Tensors,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Swish activation `x * sigmoid(x)`.
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Derivative of Swish: `sigmoid(x) * (1 + x * (1 - sigmoid(x)))`.
pub fn swish_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl Net {
    /// Initialize parameters: affine weights uniform on `(-a, a)` with
    /// `a = sqrt(3 / fan_in)` (so the variance is `1 / fan_in`), biases zero,
    /// embeddings and positional vectors uniform on `(-1, 1)`. The output
    /// layer is zeroed, which makes an untrained model predict the uniform
    /// distribution on every support.
    pub fn init<R: Rng>(cfg: NetConfig, rng: &mut R) -> Self {
        cfg.validate().expect("invalid net config");
        let mut params = Tensors::zeros(&cfg);
        for v in params.emb.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        for v in params.pos.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        let last = params.weights.len() - 1;
        for (k, w) in params.weights.iter_mut().enumerate() {
            if k == last {
                continue; // output layer stays zero
            }
            let a = (3.0 / w.nrows() as f64).sqrt();
            for v in w.iter_mut() {
                *v = (rng.random::<f64>() * 2.0 - 1.0) * a;
            }
        }
        Self { cfg, params }
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Tensors {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Tensors {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.params.to_flat()
    }

    pub fn from_flat(cfg: NetConfig, flat: &[f64]) -> Result<Self> {
        cfg.validate()?;
        let mut params = Tensors::zeros(&cfg);
        params.copy_from_flat(flat)?;
        Ok(Self { cfg, params })
    }

    fn embed_into(&self, entries: &[u32], row: &mut [f64]) {
        let e = self.cfg.embed_dim;
        let l = self.cfg.code_len;
        for (k, &entry) in entries.iter().enumerate() {
            debug_assert!(entry <= self.cfg.base, "entry out of alphabet");
            let j = k % l;
            let dst = &mut row[k * e..(k + 1) * e];
            let emb = self.params.emb.row(entry as usize);
            let pos = self.params.pos.row(j);
            for ((d, &a), &b) in dst.iter_mut().zip(emb).zip(pos) {
                *d = a + b;
            }
        }
    }

    /// Batched forward over flattened digit grids (each of length `L * l`).
    pub fn forward_batch(&self, grids: &[&[u32]]) -> (BatchCache, Array2<f64>) {
        let batch = grids.len();
        let in_dim = self.cfg.input_dim();
        let mut input = Array2::<f64>::zeros((batch, in_dim));
        let mut entries = Vec::with_capacity(batch * self.cfg.num_tokens * self.cfg.code_len);
        for (bi, grid) in grids.iter().enumerate() {
            assert_eq!(grid.len(), self.cfg.num_tokens * self.cfg.code_len);
            entries.extend_from_slice(grid);
            self.embed_into(grid, input.row_mut(bi).into_slice().expect("contiguous"));
        }

        let n_layers = self.params.weights.len();
        let mut zs = Vec::with_capacity(n_layers - 1);
        let mut acts = Vec::with_capacity(n_layers - 1);
        let mut h = input.clone();
        for k in 0..n_layers - 1 {
            let mut z = Array2::zeros((batch, self.params.weights[k].ncols()));
            general_mat_mul(1.0, &h, &self.params.weights[k], 0.0, &mut z);
            z += &self.params.biases[k];
            let act = z.mapv(swish);
            zs.push(z);
            h = act.clone();
            acts.push(act);
        }
        let mut logits = Array2::zeros((batch, self.cfg.output_dim()));
        general_mat_mul(1.0, &h, &self.params.weights[n_layers - 1], 0.0, &mut logits);
        logits += &self.params.biases[n_layers - 1];

        (
            BatchCache {
                entries,
                batch,
                input,
                zs,
                acts,
            },
            logits,
        )
    }

    /// Forward a single grid; returns per-token logits of shape
    /// `(L, per_token_out)`.
    pub fn forward(&self, y: &MaskedSeq) -> Array2<f64> {
        let (_, logits) = self.forward_batch(&[y.grid()]);
        let flat = logits.into_raw_vec_and_offset().0;
        Array2::from_shape_vec((self.cfg.num_tokens, self.cfg.per_token_out()), flat)
            .expect("shape")
    }

    /// Reverse-mode gradients of `sum(upstream * logits)` with respect to
    /// every parameter, summed over the batch.
    pub fn backward_batch(&self, cache: &BatchCache, upstream: &Array2<f64>) -> Tensors {
        assert_eq!(upstream.nrows(), cache.batch);
        assert_eq!(upstream.ncols(), self.cfg.output_dim());
        let n_layers = self.params.weights.len();
        let mut grads = Tensors::zeros(&self.cfg);

        // Output layer.
        let last_in = if n_layers >= 2 {
            &cache.acts[n_layers - 2]
        } else {
            &cache.input
        };
        general_mat_mul(
            1.0,
            &last_in.t(),
            upstream,
            0.0,
            &mut grads.weights[n_layers - 1],
        );
        grads.biases[n_layers - 1].assign(&upstream.sum_axis(ndarray::Axis(0)));
        let mut d_act = Array2::zeros((cache.batch, self.params.weights[n_layers - 1].nrows()));
        general_mat_mul(
            1.0,
            upstream,
            &self.params.weights[n_layers - 1].t(),
            0.0,
            &mut d_act,
        );

        // Hidden layers, highest first.
        for k in (0..n_layers - 1).rev() {
            let mut d_z = d_act;
            d_z.zip_mut_with(&cache.zs[k], |d, &z| *d *= swish_prime(z));
            let layer_in = if k == 0 { &cache.input } else { &cache.acts[k - 1] };
            general_mat_mul(1.0, &layer_in.t(), &d_z, 0.0, &mut grads.weights[k]);
            grads.biases[k].assign(&d_z.sum_axis(ndarray::Axis(0)));
            let mut next = Array2::zeros((cache.batch, self.params.weights[k].nrows()));
            general_mat_mul(1.0, &d_z, &self.params.weights[k].t(), 0.0, &mut next);
            d_act = next;
        }

        // Embedding and positional gradients via scatter-add.
        let e = self.cfg.embed_dim;
        let l = self.cfg.code_len;
        let per_example = self.cfg.num_tokens * l;
        for bi in 0..cache.batch {
            let d_row = d_act.row(bi);
            let d_row = d_row.as_slice().expect("contiguous");
            let ent = &cache.entries[bi * per_example..(bi + 1) * per_example];
            for (k, &entry) in ent.iter().enumerate() {
                let src = &d_row[k * e..(k + 1) * e];
                let mut emb_row = grads.emb.row_mut(entry as usize);
                let emb_row = emb_row.as_slice_mut().expect("contiguous");
                let mut pos_row = grads.pos.row_mut(k % l);
                let pos_row = pos_row.as_slice_mut().expect("contiguous");
                for ((g, p), &s) in emb_row.iter_mut().zip(pos_row.iter_mut()).zip(src) {
                    *g += s;
                    *p += s;
                }
            }
        }
        grads
    }

    /// Single-grid backward; `upstream` has shape `(L, per_token_out)`.
    pub fn backward(&self, y: &MaskedSeq, upstream: &Array2<f64>) -> Tensors {
        let (cache, _) = self.forward_batch(&[y.grid()]);
        let flat = upstream
            .to_owned()
            .into_raw_vec_and_offset()
            .0;
        let up = Array2::from_shape_vec((1, self.cfg.output_dim()), flat).expect("shape");
        self.backward_batch(&cache, &up)
    }
}
