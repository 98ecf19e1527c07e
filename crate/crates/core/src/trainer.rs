//! Monte Carlo estimation and minimization of the variational bound, plus
//! NLL/perplexity evaluation.
//!
//! Training draws one loss time per example (stratified across the batch),
//! masks the example's digits at that time, and scores each token's true code
//! under the filtered softmax. In weighted mode the per-example sum of log
//! probabilities is multiplied by the schedule's loss weight; in unweighted
//! mode by -1 (plain cross-entropy). Reported losses are nats per sequence
//! and nonnegative in expectation.
//!
//! `eval_nll` estimates the bound with `num_mc` time strata. When the token
//! count and code length allow, each token's own mask pattern is summed out
//! exactly (the per-stratum value averages all `2^l` patterns of every token,
//! weighted by their probabilities), which removes the small-`t` variance
//! blow-up of the naive estimator.

use ndarray::Array2;

use crate::codec::SubTokenCodec;
use crate::decoder::{filtered_log_prob, FilterTable, SupportMask};
use crate::diffusion::{forward_sample, CleanSeq, MaskedSeq};
use crate::error::{PrimeError, Result};
use crate::net::{HeadKind, Net, Tensors};
use crate::schedule::Schedule;
use crate::Rng;

/// Above this many per-stratum net evaluations, `eval_nll` falls back to the
/// plain single-sample estimator.
pub const RAO_BLACKWELL_CAP: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub t_min: f64,
    pub weighted_loss: bool,
    pub carryover_in_train: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4096,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 10_000,
            t_min: 1e-4,
            weighted_loss: true,
            carryover_in_train: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(PrimeError::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(PrimeError::Config("learning_rate must be >= 0".into()));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(PrimeError::Config("t_min must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Loss diagnostics for one estimate or one batch step.
#[derive(Debug, Clone)]
pub struct LossReport {
    /// Bound estimate, nats per sequence (batch mean for a step).
    pub loss: f64,
    /// Raw per-token log-probability terms (batch mean per position).
    pub per_token: Vec<f64>,
    /// Masked digits across the batch.
    pub masked_entries: usize,
    /// Mean loss time drawn.
    pub mean_t: f64,
}

/// NLL bound evaluation output.
#[derive(Debug, Clone)]
pub struct NllReport {
    /// Bound estimate in nats per token.
    pub nats_per_token: f64,
    /// `exp(nats_per_token)`.
    pub perplexity: f64,
    /// Standard error of `nats_per_token`; `None` when `num_mc == 1`.
    pub std_err: Option<f64>,
    pub num_mc: usize,
}

/// Adam moment estimates shaped like the network parameters.
pub struct AdamState {
    m: Tensors,
    v: Tensors,
    step: u64,
}

impl AdamState {
    pub fn new(net: &Net) -> Self {
        Self {
            m: Tensors::zeros(net.config()),
            v: Tensors::zeros(net.config()),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn apply_adam(net: &mut Net, grads: &Tensors, opt: &mut AdamState, cfg: &TrainConfig) {
    opt.step += 1;
    let bc1 = 1.0 - cfg.adam_beta1.powi(opt.step as i32);
    let bc2 = 1.0 - cfg.adam_beta2.powi(opt.step as i32);
    let lr = cfg.learning_rate;
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut p_slices = net.params_mut().slices_mut();
    let g_slices = grads.slices();
    let mut m_slices = opt.m.slices_mut();
    let mut v_slices = opt.v.slices_mut();
    for k in 0..p_slices.len() {
        let ps = &mut p_slices[k];
        let gs = g_slices[k];
        let ms = &mut m_slices[k];
        let vs = &mut v_slices[k];
        for i in 0..ps.len() {
            let g = gs[i];
            ms[i] = b1 * ms[i] + (1.0 - b1) * g;
            vs[i] = b2 * vs[i] + (1.0 - b2) * g * g;
            let mhat = ms[i] / bc1;
            let vhat = vs[i] / bc2;
            ps[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Per-example sign/weight multiplying the summed log probabilities.
fn loss_coefficient(sch: Schedule, t: f64, weighted: bool) -> f64 {
    if weighted {
        sch.loss_weight(t)
    } else {
        -1.0
    }
}

/// Score one joint-head token row; optionally accumulate the gradient of
/// `coef * log_prob` into the logit-row slice.
fn score_joint_token(
    logits: &[f64],
    support: &SupportMask,
    target: u32,
    coef: f64,
    upstream: Option<&mut [f64]>,
) -> Result<f64> {
    let log_prob = filtered_log_prob(logits, support, target)?;
    if let Some(up) = upstream {
        let max = support
            .iter()
            .map(|c| logits[c as usize])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in support.iter() {
            z += (logits[c as usize] - max).exp();
        }
        for c in support.iter() {
            let p = (logits[c as usize] - max).exp() / z;
            let indicator = if c == target { 1.0 } else { 0.0 };
            up[c as usize] += coef * (indicator - p);
        }
    }
    Ok(log_prob)
}

/// Score the factorized head: per-position softmax over `b` digits. With
/// carry-over, revealed positions contribute nothing.
fn score_independent_token(
    logits: &[f64],
    y_ti: &[u32],
    y0_row: &[u32],
    base: u32,
    carryover: bool,
    coef: f64,
    mut upstream: Option<&mut [f64]>,
) -> f64 {
    let b = base as usize;
    let mut log_prob = 0.0;
    for (j, (&v, &target)) in y_ti.iter().zip(y0_row).enumerate() {
        if carryover && v != base {
            continue;
        }
        let row = &logits[j * b..(j + 1) * b];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        log_prob += row[target as usize] - max - z.ln();
        if let Some(up) = upstream.as_deref_mut() {
            let slice = &mut up[j * b..(j + 1) * b];
            for (c, s) in slice.iter_mut().enumerate() {
                let p = (row[c] - max).exp() / z;
                let indicator = if c == target as usize { 1.0 } else { 0.0 };
                *s += coef * (indicator - p);
            }
        }
    }
    log_prob
}

struct BatchScore {
    loss: f64,
    per_token: Vec<f64>,
    masked_entries: usize,
    upstream: Option<Array2<f64>>,
}

/// Loss (and optionally the logit gradient) for prepared `(y0, y_t, t)`
/// triples, averaged over the batch. Logits are supplied by the caller so
/// the forward cache can be reused for the backward pass.
fn score_batch(
    net: &Net,
    codec: &SubTokenCodec,
    ft: &FilterTable,
    items: &[(&CleanSeq, &MaskedSeq, f64)],
    logits: &Array2<f64>,
    sch: Schedule,
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<BatchScore> {
    let num_tokens = items[0].0.num_tokens();
    let per_out = net.config().per_token_out();
    let mut upstream = with_grads.then(|| Array2::<f64>::zeros(logits.dim()));
    let inv_b = 1.0 / items.len() as f64;

    let mut loss = 0.0;
    let mut per_token = vec![0.0; num_tokens];
    let mut masked_entries = 0usize;
    for (bi, (y0, y_t, t)) in items.iter().enumerate() {
        let coef = loss_coefficient(sch, *t, cfg.weighted_loss);
        masked_entries += y_t.masked_entries();
        let row = logits.row(bi);
        let row = row.as_slice().expect("contiguous");
        let mut up_row = upstream.as_mut().map(|u| u.row_mut(bi));
        let mut example_logp = 0.0;
        for i in 0..num_tokens {
            let tok_logits = &row[i * per_out..(i + 1) * per_out];
            let up_slice: Option<*mut [f64]> = up_row.as_mut().map(|r| {
                let r = r.as_slice_mut().expect("contiguous");
                &mut r[i * per_out..(i + 1) * per_out] as *mut [f64]
            });
            let log_prob = match net.config().head {
                HeadKind::Joint => {
                    let target = codec.decode(y0.token_row(i)).expect("clean row decodes");
                    let support = if cfg.carryover_in_train {
                        ft.valid_set(y_t.token_row(i))
                    } else {
                        ft.full_support()
                    };
                    // Pointer round-trip keeps the borrow of the upstream row
                    // out of the closure above.
                    let up = up_slice.map(|p| unsafe { &mut *p });
                    score_joint_token(tok_logits, &support, target, coef * inv_b, up)?
                }
                HeadKind::Independent => {
                    let up = up_slice.map(|p| unsafe { &mut *p });
                    score_independent_token(
                        tok_logits,
                        y_t.token_row(i),
                        y0.token_row(i),
                        codec.base(),
                        cfg.carryover_in_train,
                        coef * inv_b,
                        up,
                    )
                }
            };
            example_logp += log_prob;
            per_token[i] += log_prob * inv_b;
        }
        loss += coef * example_logp * inv_b;
    }
    if !loss.is_finite() {
        return Err(PrimeError::NonFinite("batch loss".into()));
    }
    Ok(BatchScore {
        loss,
        per_token,
        masked_entries,
        upstream,
    })
}

/// Deterministic loss of a single prepared `(y0, y_t, t)` state.
pub fn loss_for_state(
    net: &Net,
    codec: &SubTokenCodec,
    ft: &FilterTable,
    y0: &CleanSeq,
    y_t: &MaskedSeq,
    t: f64,
    sch: Schedule,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let (_, logits) = net.forward_batch(&[y_t.grid()]);
    let score = score_batch(net, codec, ft, &[(y0, y_t, t)], &logits, sch, cfg, false)?;
    Ok(LossReport {
        loss: score.loss,
        per_token: score.per_token,
        masked_entries: score.masked_entries,
        mean_t: t,
    })
}

/// Deterministic loss and parameter gradient of a single prepared state.
pub fn loss_gradient(
    net: &Net,
    codec: &SubTokenCodec,
    ft: &FilterTable,
    y0: &CleanSeq,
    y_t: &MaskedSeq,
    t: f64,
    sch: Schedule,
    cfg: &TrainConfig,
) -> Result<(LossReport, Tensors)> {
    let (cache, logits) = net.forward_batch(&[y_t.grid()]);
    let score = score_batch(net, codec, ft, &[(y0, y_t, t)], &logits, sch, cfg, true)?;
    let grads = net.backward_batch(&cache, score.upstream.as_ref().expect("grads requested"));
    Ok((
        LossReport {
            loss: score.loss,
            per_token: score.per_token,
            masked_entries: score.masked_entries,
            mean_t: t,
        },
        grads,
    ))
}

/// Single-example Monte Carlo loss estimate: draws `t ~ U[t_min, 1]`, masks
/// `y0` at that time, and scores it.
pub fn loss_estimate(
    net: &Net,
    codec: &SubTokenCodec,
    ft: &FilterTable,
    y0: &CleanSeq,
    sch: Schedule,
    rng: &mut Rng,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    use rand::Rng as _;
    let t = cfg.t_min + (1.0 - cfg.t_min) * rng.random::<f64>();
    let y_t = forward_sample(y0, t, sch, rng);
    loss_for_state(net, codec, ft, y0, &y_t, t, sch, cfg)
}

/// One optimizer step on a batch: stratified loss times (one stratum per
/// example), masking, batched forward/backward, Adam update.
pub fn train_step(
    net: &mut Net,
    opt: &mut AdamState,
    codec: &SubTokenCodec,
    ft: &FilterTable,
    batch: &[CleanSeq],
    sch: Schedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<LossReport> {
    use rand::Rng as _;
    assert!(!batch.is_empty(), "empty batch");
    let b = batch.len() as f64;
    let mut states: Vec<(MaskedSeq, f64)> = Vec::with_capacity(batch.len());
    for (e, y0) in batch.iter().enumerate() {
        let u: f64 = rng.random();
        let t = cfg.t_min + (1.0 - cfg.t_min) * ((e as f64 + u) / b);
        let y_t = forward_sample(y0, t, sch, rng);
        states.push((y_t, t));
    }
    let items: Vec<(&CleanSeq, &MaskedSeq, f64)> = batch
        .iter()
        .zip(&states)
        .map(|(y0, (y_t, t))| (y0, y_t, *t))
        .collect();

    let grids: Vec<&[u32]> = items.iter().map(|(_, y_t, _)| y_t.grid()).collect();
    let (cache, logits) = net.forward_batch(&grids);
    let score = score_batch(net, codec, ft, &items, &logits, sch, cfg, true)?;
    let grads = net.backward_batch(&cache, score.upstream.as_ref().expect("grads requested"));
    apply_adam(net, &grads, opt, cfg);

    Ok(LossReport {
        loss: score.loss,
        per_token: score.per_token,
        masked_entries: score.masked_entries,
        mean_t: items.iter().map(|(_, _, t)| t).sum::<f64>() / b,
    })
}

/// Monte Carlo estimate of the NLL bound with `num_mc` stratified times.
///
/// `draw` supplies one data sequence per stratum. Perplexity is reported per
/// token: `exp(bound / L)`. The standard error is the (unstratified,
/// conservative) sample estimate.
pub fn eval_nll(
    net: &Net,
    codec: &SubTokenCodec,
    ft: &FilterTable,
    sch: Schedule,
    draw: &mut dyn FnMut(&mut Rng) -> CleanSeq,
    num_mc: usize,
    t_min: f64,
    rng: &mut Rng,
) -> Result<NllReport> {
    use rand::Rng as _;
    assert!(num_mc >= 1, "num_mc must be >= 1");
    let l = codec.code_len();
    let patterns = (1usize << l.min(62)) - 1;
    let mut num_tokens = None;
    let mut values = Vec::with_capacity(num_mc);
    for m in 0..num_mc {
        let u: f64 = rng.random();
        let t = t_min + (1.0 - t_min) * ((m as f64 + u) / num_mc as f64);
        let y0 = draw(rng);
        let tokens = y0.num_tokens();
        num_tokens.get_or_insert(tokens);
        let y_t = forward_sample(&y0, t, sch, rng);
        let sum_logp = if l < 62 && tokens * patterns <= RAO_BLACKWELL_CAP {
            rao_blackwell_logp(net, codec, ft, &y0, &y_t, t, sch)?
        } else {
            plain_logp(net, codec, ft, &y0, &y_t)?
        };
        values.push(sch.loss_weight(t) * sum_logp);
    }
    let tokens = num_tokens.expect("at least one stratum") as f64;
    let scale = (1.0 - t_min) / tokens;
    let mean = values.iter().sum::<f64>() / num_mc as f64;
    let nats_per_token = mean * scale;
    let std_err = (num_mc > 1).then(|| {
        let var =
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (num_mc as f64 - 1.0);
        (var / num_mc as f64).sqrt() * scale
    });
    Ok(NllReport {
        nats_per_token,
        perplexity: nats_per_token.exp(),
        std_err,
        num_mc,
    })
}

/// Sum of per-token log probabilities with each token's own mask pattern
/// summed out exactly; the other tokens keep their sampled masks.
fn rao_blackwell_logp(
    net: &Net,
    codec: &SubTokenCodec,
    ft: &FilterTable,
    y0: &CleanSeq,
    y_t: &MaskedSeq,
    t: f64,
    sch: Schedule,
) -> Result<f64> {
    let l = codec.code_len();
    let alpha = sch.alpha(t);
    let tokens = y0.num_tokens();
    let patterns = (1usize << l) - 1;
    let mask = codec.mask_symbol();

    let mut variants: Vec<Vec<u32>> = Vec::with_capacity(tokens * patterns);
    for i in 0..tokens {
        for pat in 1..=patterns {
            let mut grid = y_t.grid().to_vec();
            for j in 0..l {
                grid[i * l + j] = if pat >> j & 1 == 1 {
                    mask
                } else {
                    y0.token_row(i)[j]
                };
            }
            variants.push(grid);
        }
    }
    let grid_refs: Vec<&[u32]> = variants.iter().map(|g| g.as_slice()).collect();
    let (_, logits) = net.forward_batch(&grid_refs);
    let per_out = net.config().per_token_out();

    let mut total = 0.0;
    for i in 0..tokens {
        let target = codec.decode(y0.token_row(i)).expect("clean row decodes");
        for pat in 1..=patterns {
            let masked = (pat as u32).count_ones() as i32;
            let weight = (1.0 - alpha).powi(masked) * alpha.powi(l as i32 - masked);
            if weight == 0.0 {
                continue;
            }
            let vi = i * patterns + (pat - 1);
            let row = logits.row(vi);
            let row = row.as_slice().expect("contiguous");
            let tok_logits = &row[i * per_out..(i + 1) * per_out];
            let variant_row = &variants[vi][i * l..(i + 1) * l];
            let logp = match net.config().head {
                HeadKind::Joint => {
                    filtered_log_prob(tok_logits, &ft.valid_set(variant_row), target)?
                }
                HeadKind::Independent => score_independent_token(
                    tok_logits,
                    variant_row,
                    y0.token_row(i),
                    codec.base(),
                    true,
                    0.0,
                    None,
                ),
            };
            total += weight * logp;
        }
    }
    Ok(total)
}

/// Plain estimator: score the sampled masked grid directly.
fn plain_logp(
    net: &Net,
    codec: &SubTokenCodec,
    ft: &FilterTable,
    y0: &CleanSeq,
    y_t: &MaskedSeq,
) -> Result<f64> {
    let (_, logits) = net.forward_batch(&[y_t.grid()]);
    let per_out = net.config().per_token_out();
    let row = logits.row(0);
    let row = row.as_slice().expect("contiguous");
    let mut total = 0.0;
    for i in 0..y0.num_tokens() {
        let tok_logits = &row[i * per_out..(i + 1) * per_out];
        let logp = match net.config().head {
            HeadKind::Joint => {
                let target = codec.decode(y0.token_row(i)).expect("clean row decodes");
                filtered_log_prob(tok_logits, &ft.valid_set(y_t.token_row(i)), target)?
            }
            HeadKind::Independent => score_independent_token(
                tok_logits,
                y_t.token_row(i),
                y0.token_row(i),
                codec.base(),
                true,
                0.0,
                None,
            ),
        };
        total += logp;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use rand::SeedableRng;

    fn setup(
        c: u32,
        l: usize,
        num_tokens: usize,
        hidden: usize,
        head: HeadKind,
        seed: u64,
        random_head: bool,
    ) -> (SubTokenCodec, FilterTable, Net) {
        let codec = SubTokenCodec::new(c, l).unwrap();
        let ft = FilterTable::build(&codec);
        let cfg = NetConfig {
            num_tokens,
            num_classes: c,
            code_len: l,
            base: codec.base(),
            embed_dim: 4,
            hidden_dim: hidden,
            num_layers: 4,
            head,
        };
        let mut rng = Rng::seed_from_u64(seed);
        let mut net = Net::init(cfg, &mut rng);
        if random_head {
            use rand::Rng as _;
            for v in net.params_mut().weights.last_mut().unwrap().iter_mut() {
                *v = rng.random::<f64>() * 0.6 - 0.3;
            }
        }
        (codec, ft, net)
    }

    #[test]
    fn fully_revealed_state_has_zero_loss() {
        let (codec, ft, net) = setup(16, 2, 3, 8, HeadKind::Joint, 1, true);
        let y0 = CleanSeq::from_tokens(&codec, &[3, 7, 15]).unwrap();
        let y_t = MaskedSeq::from_clean(&y0);
        let cfg = TrainConfig::default();
        let report =
            loss_for_state(&net, &codec, &ft, &y0, &y_t, 0.5, Schedule::Linear, &cfg).unwrap();
        assert_eq!(report.loss.abs(), 0.0);
        assert!(report.per_token.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_mask_uniform_logits_gives_log_c_per_token() {
        // Zero output head: logits vanish, so each all-masked token
        // contributes -ln(4) with C=4.
        let (codec, ft, net) = setup(4, 2, 2, 8, HeadKind::Joint, 2, false);
        let y0 = CleanSeq::from_tokens(&codec, &[1, 3]).unwrap();
        let y_t = MaskedSeq::all_masked(&codec, 2);
        let cfg = TrainConfig {
            weighted_loss: false,
            ..TrainConfig::default()
        };
        let report =
            loss_for_state(&net, &codec, &ft, &y0, &y_t, 0.5, Schedule::Linear, &cfg).unwrap();
        let ln4 = 4.0f64.ln();
        for &term in &report.per_token {
            assert!((term + ln4).abs() < 1e-12, "log term {term}");
        }
        assert!((report.loss - 2.0 * ln4).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (codec, ft, mut net) = setup(16, 2, 2, 8, HeadKind::Joint, 3, true);
        let before = net.to_flat();
        let mut opt = AdamState::new(&net);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let batch: Vec<CleanSeq> = (0..4)
            .map(|k| CleanSeq::from_tokens(&codec, &[k, 15 - k]).unwrap())
            .collect();
        let mut rng = Rng::seed_from_u64(4);
        train_step(&mut net, &mut opt, &codec, &ft, &batch, Schedule::Linear, &cfg, &mut rng)
            .unwrap();
        assert_eq!(net.to_flat(), before);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let run = || {
            let (codec, ft, mut net) = setup(16, 2, 2, 8, HeadKind::Joint, 5, false);
            let mut opt = AdamState::new(&net);
            let cfg = TrainConfig {
                batch_size: 8,
                ..TrainConfig::default()
            };
            let mut rng = Rng::seed_from_u64(6);
            use rand::Rng as _;
            for _ in 0..20 {
                let batch: Vec<CleanSeq> = (0..8)
                    .map(|_| {
                        CleanSeq::from_tokens(
                            &codec,
                            &[rng.random_range(0..16), rng.random_range(0..16)],
                        )
                        .unwrap()
                    })
                    .collect();
                train_step(
                    &mut net,
                    &mut opt,
                    &codec,
                    &ft,
                    &batch,
                    Schedule::Linear,
                    &cfg,
                    &mut rng,
                )
                .unwrap();
            }
            net.to_flat()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_on_gaussian_mixture() {
        // Small two-mode density over a 64x64 grid; 500 steps with a modest
        // batch must reduce the running loss.
        let (codec, ft, mut net) = setup(64, 2, 2, 64, HeadKind::Joint, 7, false);
        let grid = crate::data::builtin_density("gaussians", 64).unwrap();
        let mut opt = AdamState::new(&net);
        let cfg = TrainConfig {
            batch_size: 128,
            ..TrainConfig::default()
        };
        let mut rng = Rng::seed_from_u64(8);
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..500 {
            let pairs = crate::data::sample_data(&grid, 128, &mut rng);
            let batch: Vec<CleanSeq> = pairs
                .iter()
                .map(|&(r, c)| CleanSeq::from_tokens(&codec, &[r, c]).unwrap())
                .collect();
            let report = train_step(
                &mut net,
                &mut opt,
                &codec,
                &ft,
                &batch,
                Schedule::Linear,
                &cfg,
                &mut rng,
            )
            .unwrap();
            if step < 50 {
                first += report.loss;
            }
            if step >= 450 {
                last += report.loss;
            }
        }
        assert!(
            last < first,
            "mean loss did not decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn gradient_matches_finite_differences_spot_check() {
        let (codec, ft, net) = setup(16, 2, 2, 8, HeadKind::Joint, 9, true);
        let y0 = CleanSeq::from_tokens(&codec, &[5, 11]).unwrap();
        let mut rng = Rng::seed_from_u64(10);
        let y_t = forward_sample(&y0, 0.6, Schedule::Linear, &mut rng);
        let cfg = TrainConfig::default();
        let (_, grads) =
            loss_gradient(&net, &codec, &ft, &y0, &y_t, 0.6, Schedule::Linear, &cfg).unwrap();
        let grads = grads.to_flat();
        let theta = net.to_flat();
        let h = 1e-6;
        for idx in (0..theta.len()).step_by(theta.len() / 7) {
            let eval = |flat: &[f64]| {
                let n = Net::from_flat(net.config().clone(), flat).unwrap();
                loss_for_state(&n, &codec, &ft, &y0, &y_t, 0.6, Schedule::Linear, &cfg)
                    .unwrap()
                    .loss
            };
            let mut plus = theta.clone();
            plus[idx] += h;
            let mut minus = theta.clone();
            minus[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = fd.abs().max(grads[idx].abs()).max(1e-8);
            assert!(
                (fd - grads[idx]).abs() / denom < 1e-4,
                "idx {idx}: fd {fd} vs {}",
                grads[idx]
            );
        }
    }

    #[test]
    fn eval_nll_uniform_model_is_log_c() {
        // l = 1: uniform logits put ln(C) nats on every token.
        let (codec, ft, net) = setup(16, 1, 8, 8, HeadKind::Joint, 11, false);
        let mut rng = Rng::seed_from_u64(12);
        use rand::Rng as _;
        let mut draw = |rng: &mut Rng| {
            let toks: Vec<u32> = (0..8).map(|_| rng.random_range(0..16)).collect();
            CleanSeq::from_tokens(&codec, &toks).unwrap()
        };
        let report = eval_nll(
            &net,
            &codec,
            &ft,
            Schedule::Linear,
            &mut draw,
            10_000,
            1e-4,
            &mut rng,
        )
        .unwrap();
        let ln_c = 16.0f64.ln();
        assert!(
            (report.nats_per_token - ln_c).abs() < 1e-3,
            "bound {} vs {ln_c}",
            report.nats_per_token
        );
        assert!((report.perplexity - 16.0).abs() < 0.02);

        // Bijective l = 2 case: still exactly ln(C) per token.
        let (codec2, ft2, net2) = setup(4, 2, 4, 8, HeadKind::Joint, 13, false);
        let mut draw2 = |rng: &mut Rng| {
            let toks: Vec<u32> = (0..4).map(|_| rng.random_range(0..4)).collect();
            CleanSeq::from_tokens(&codec2, &toks).unwrap()
        };
        let report2 = eval_nll(
            &net2,
            &codec2,
            &ft2,
            Schedule::Linear,
            &mut draw2,
            2_000,
            1e-4,
            &mut rng,
        )
        .unwrap();
        assert!((report2.nats_per_token - 4.0f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn eval_nll_std_err_shrinks_with_strata() {
        let (codec, ft, net) = setup(8, 3, 2, 16, HeadKind::Joint, 14, true);
        let run = |num_mc: usize, seed: u64| {
            let mut rng = Rng::seed_from_u64(seed);
            use rand::Rng as _;
            let mut draw = |rng: &mut Rng| {
                let toks: Vec<u32> = (0..2).map(|_| rng.random_range(0..8)).collect();
                CleanSeq::from_tokens(&codec, &toks).unwrap()
            };
            eval_nll(
                &net,
                &codec,
                &ft,
                Schedule::Linear,
                &mut draw,
                num_mc,
                1e-4,
                &mut rng,
            )
            .unwrap()
        };
        let small = run(100, 20);
        let large = run(1000, 21);
        let ratio = small.std_err.unwrap() / large.std_err.unwrap();
        assert!(
            (2.0..=5.0).contains(&ratio),
            "expected ~sqrt(10) shrink, got {ratio}"
        );
        assert!(run(1, 22).std_err.is_none());
    }

    /// The estimated bound must sit above the exact NLL of the
    /// infinite-step reverse process, computed by enumerating reveal orders,
    /// and must agree with a deterministic quadrature of the same integral.
    #[test]
    fn bound_dominates_exact_nll_on_enumerable_task() {
        let (codec, ft, net) = setup(8, 3, 1, 16, HeadKind::Joint, 15, true);
        let sch = Schedule::Linear;
        let t_min = 1e-4;
        let mask = codec.mask_symbol();

        let orders: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let mut exact_nll = 0.0;
        for tok in 0..8u32 {
            let code = codec.encode(tok).unwrap();
            let mut p_gen = 0.0;
            for order in &orders {
                let mut pattern = vec![mask; 3];
                let mut prob = 1.0;
                for &j in order {
                    let grid = MaskedSeq::from_parts(pattern.clone(), 1, 3, codec.base());
                    let logits = net.forward(&grid);
                    let row = logits.row(0);
                    let dist = crate::decoder::filtered_softmax(
                        row.as_slice().unwrap(),
                        &ft.valid_set(&pattern),
                    )
                    .unwrap();
                    let marg = dist.marginal(&codec, j);
                    prob *= marg[code[j] as usize];
                    pattern[j] = code[j];
                }
                p_gen += prob / orders.len() as f64;
            }
            exact_nll += -(p_gen.ln()) / 8.0; // uniform data over 8 tokens
        }

        let mut rng = Rng::seed_from_u64(16);
        use rand::Rng as _;
        let mut draw =
            |rng: &mut Rng| CleanSeq::from_tokens(&codec, &[rng.random_range(0..8)]).unwrap();
        let report = eval_nll(&net, &codec, &ft, sch, &mut draw, 4_000, t_min, &mut rng).unwrap();
        let bound = report.nats_per_token;
        let margin = 4.0 * report.std_err.unwrap();
        assert!(
            bound + margin >= exact_nll,
            "bound {bound} (+/- {margin}) below exact NLL {exact_nll}"
        );

        // Midpoint-rule quadrature of the truncated integral.
        let quad = {
            let nodes = 5_000;
            let mut acc = 0.0;
            for k in 0..nodes {
                let t = t_min + (1.0 - t_min) * ((k as f64 + 0.5) / nodes as f64);
                let alpha = sch.alpha(t);
                let mut expect = 0.0;
                for tok in 0..8u32 {
                    let code = codec.encode(tok).unwrap();
                    for pat in 1usize..8 {
                        let masked = (pat as u32).count_ones() as i32;
                        let w = (1.0 - alpha).powi(masked) * alpha.powi(3 - masked);
                        let pattern: Vec<u32> = (0..3)
                            .map(|j| if pat >> j & 1 == 1 { mask } else { code[j] })
                            .collect();
                        let grid = MaskedSeq::from_parts(pattern.clone(), 1, 3, codec.base());
                        let logits = net.forward(&grid);
                        let logp = filtered_log_prob(
                            logits.row(0).as_slice().unwrap(),
                            &ft.valid_set(&pattern),
                            tok,
                        )
                        .unwrap();
                        expect += w * logp / 8.0;
                    }
                }
                acc += sch.loss_weight(t) * expect * (1.0 - t_min) / nodes as f64;
            }
            acc
        };
        assert!(
            (bound - quad).abs() < margin.max(1e-3),
            "estimator {bound} vs quadrature {quad}"
        );
        assert!(quad >= exact_nll - 1e-9, "exact bound ordering violated");
    }
}
