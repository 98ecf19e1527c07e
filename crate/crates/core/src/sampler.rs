//! Ancestral reverse-diffusion sampling over sub-token grids, with idle-step
//! instrumentation, imputation, and output caching.
//!
//! A run starts from the all-mask grid at `t = 1` and walks the uniform
//! discretization `t_k = 1 - k/T`. At each step every token that still has a
//! masked digit gets a fresh denoiser draw from the filtered softmax over its
//! valid set; the posterior kernel then reveals each masked digit
//! independently. A step is idle when the grid does not change. Because the
//! denoiser is deterministic in the grid, its outputs can be cached across
//! idle steps without changing the sampled distribution; only the redraws
//! consume randomness.
//!
//! Randomness order per step: one inverse-CDF uniform per token that still
//! has masks (token order), then one uniform per masked digit (row-major).

use rand_chacha::rand_core::SeedableRng;

use crate::codec::SubTokenCodec;
use crate::decoder::{filtered_softmax, independent_head, FilterTable, IndependentDist};
use crate::diffusion::{posterior_step, CleanSeq, MaskedSeq};
use crate::error::Result;
use crate::net::{HeadKind, Net};
use crate::schedule::Schedule;
use crate::Rng;

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Number of reverse steps `T`.
    pub num_steps: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Skip denoiser evaluations while the grid is unchanged.
    pub cache_outputs: bool,
    /// Keep per-step grid snapshots in the run output.
    pub record_trajectory: bool,
    /// On idle steps, reuse the previous denoiser draws instead of redrawing.
    pub freeze_draws_on_idle: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 128,
            schedule: Schedule::Linear,
            seed: 0,
            cache_outputs: true,
            record_trajectory: false,
            freeze_draws_on_idle: false,
        }
    }
}

/// Output of a single reverse-diffusion run.
#[derive(Debug, Clone)]
pub struct SampleRun {
    /// Decoded final tokens, length `L`.
    pub tokens: Vec<u32>,
    /// Steps in which the grid did not change.
    pub idle_steps: usize,
    /// Digits revealed at each step.
    pub per_step_unmasks: Vec<usize>,
    /// Grid snapshots (initial state plus one per step) when requested.
    pub trajectory: Option<Vec<Vec<u32>>>,
    /// Denoiser forward passes performed.
    pub model_evals: usize,
}

/// Aggregate output of a batch of independent runs.
#[derive(Debug, Clone)]
pub struct BatchRuns {
    /// One decoded token row per run.
    pub token_rows: Vec<Vec<u32>>,
    pub idle_steps: Vec<usize>,
    /// Total denoiser forward passes across the batch (batched evaluations
    /// count once per run included).
    pub model_evals: usize,
}

enum TokenDist {
    Joint(crate::decoder::DecoderDist),
    Independent(IndependentDist),
}

struct Chain {
    grid: MaskedSeq,
    /// Cached per-token distributions; `None` for fully revealed tokens.
    dists: Vec<Option<TokenDist>>,
    /// Grid the cache was computed for is current.
    cache_valid: bool,
    /// Frozen denoiser draws (digit rows) for `freeze_draws_on_idle`.
    draws: Vec<Option<Vec<u32>>>,
    draws_valid: bool,
    idle_steps: usize,
    per_step_unmasks: Vec<usize>,
    model_evals: usize,
}

impl Chain {
    fn new(grid: MaskedSeq, num_tokens: usize) -> Self {
        Self {
            grid,
            dists: (0..num_tokens).map(|_| None).collect(),
            cache_valid: false,
            draws: vec![None; num_tokens],
            draws_valid: false,
            idle_steps: 0,
            per_step_unmasks: Vec::new(),
            model_evals: 0,
        }
    }

    fn needs_eval(&self, cache_outputs: bool) -> bool {
        self.grid.masked_entries() > 0 && (!self.cache_valid || !cache_outputs)
    }
}

fn dists_from_logits(
    codec: &SubTokenCodec,
    ft: &FilterTable,
    head: HeadKind,
    logits_row: &[f64],
    grid: &MaskedSeq,
) -> Result<Vec<Option<TokenDist>>> {
    let per_out = match head {
        HeadKind::Joint => codec.num_classes() as usize,
        HeadKind::Independent => codec.code_len() * codec.base() as usize,
    };
    let mut out = Vec::with_capacity(grid.num_tokens());
    for i in 0..grid.num_tokens() {
        if grid.token_unmasked(i) {
            out.push(None);
            continue;
        }
        let row = &logits_row[i * per_out..(i + 1) * per_out];
        let dist = match head {
            HeadKind::Joint => {
                let support = ft.valid_set(grid.token_row(i));
                TokenDist::Joint(filtered_softmax(row, &support)?)
            }
            HeadKind::Independent => {
                let b = codec.base() as usize;
                let rows: Vec<Vec<f64>> = (0..codec.code_len())
                    .map(|j| row[j * b..(j + 1) * b].to_vec())
                    .collect();
                TokenDist::Independent(independent_head(&rows, grid.token_row(i), codec.base()))
            }
        };
        out.push(Some(dist));
    }
    Ok(out)
}

/// Draw a full denoiser target consistent with the grid, then apply the
/// posterior kernel for `t -> s`. Returns the number of digits revealed.
fn advance_chain(
    chain: &mut Chain,
    codec: &SubTokenCodec,
    s: f64,
    t: f64,
    sch: Schedule,
    freeze_draws: bool,
    rng: &mut Rng,
) -> Result<usize> {
    let l = codec.code_len();
    let num_tokens = chain.grid.num_tokens();
    let masked_before = chain.grid.masked_entries();
    if masked_before == 0 {
        chain.idle_steps += 1;
        chain.per_step_unmasks.push(0);
        return Ok(0);
    }

    let reuse = freeze_draws && chain.draws_valid;
    let mut target = Vec::with_capacity(num_tokens * l);
    for i in 0..num_tokens {
        if chain.grid.token_unmasked(i) {
            target.extend_from_slice(chain.grid.token_row(i));
            chain.draws[i] = None;
            continue;
        }
        let row = if reuse {
            chain.draws[i].clone().expect("frozen draw present")
        } else {
            let tok = match chain.dists[i].as_ref().expect("distribution for masked token") {
                TokenDist::Joint(d) => d.sample(rng),
                TokenDist::Independent(d) => d.sample(codec, rng),
            };
            codec.encode(tok).expect("sampled token encodes")
        };
        if freeze_draws {
            chain.draws[i] = Some(row.clone());
        }
        target.extend_from_slice(&row);
    }
    chain.draws_valid = freeze_draws;

    let y0_hat = CleanSeq::from_grid(codec, target)?;
    let next = posterior_step(&chain.grid, &y0_hat, s, t, sch, rng)?;
    let revealed = masked_before - next.masked_entries();
    if revealed == 0 {
        chain.idle_steps += 1;
    } else {
        chain.grid = next;
        chain.cache_valid = false;
        chain.draws_valid = false;
    }
    chain.per_step_unmasks.push(revealed);
    Ok(revealed)
}

fn finish_chain(chain: &mut Chain, codec: &SubTokenCodec) -> Result<Vec<u32>> {
    chain
        .grid
        .to_clean(codec)
        .and_then(|clean| clean.decode(codec))
}

/// Run a single reverse-diffusion chain from the all-mask state.
pub fn generate(
    net: &Net,
    codec: &SubTokenCodec,
    ft: &FilterTable,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<SampleRun> {
    let grid = MaskedSeq::all_masked(codec, net.config().num_tokens);
    run_single(net, codec, ft, cfg, grid, rng)
}

/// Conditional generation: digits selected by `kept_mask` are fixed to the
/// condition's digits and never change; everything else is generated.
pub fn impute(
    net: &Net,
    codec: &SubTokenCodec,
    ft: &FilterTable,
    cfg: &SamplerConfig,
    kept_mask: &[bool],
    condition: &CleanSeq,
    rng: &mut Rng,
) -> Result<SampleRun> {
    let grid = impute_grid(codec, net.config().num_tokens, kept_mask, condition);
    run_single(net, codec, ft, cfg, grid, rng)
}

fn impute_grid(
    codec: &SubTokenCodec,
    num_tokens: usize,
    kept_mask: &[bool],
    condition: &CleanSeq,
) -> MaskedSeq {
    let l = codec.code_len();
    assert_eq!(kept_mask.len(), num_tokens * l, "kept mask shape mismatch");
    assert_eq!(condition.num_tokens(), num_tokens, "condition length mismatch");
    let grid: Vec<u32> = condition
        .grid()
        .iter()
        .zip(kept_mask)
        .map(|(&d, &keep)| if keep { d } else { codec.mask_symbol() })
        .collect();
    MaskedSeq::from_parts(grid, num_tokens, l, codec.base())
}

fn run_single(
    net: &Net,
    codec: &SubTokenCodec,
    ft: &FilterTable,
    cfg: &SamplerConfig,
    grid: MaskedSeq,
    rng: &mut Rng,
) -> Result<SampleRun> {
    assert!(cfg.num_steps >= 1, "num_steps must be >= 1");
    let num_tokens = grid.num_tokens();
    let mut chain = Chain::new(grid, num_tokens);
    let mut trajectory = cfg
        .record_trajectory
        .then(|| vec![chain.grid.grid().to_vec()]);

    let t_of = |k: usize| 1.0 - k as f64 / cfg.num_steps as f64;
    for k in 0..cfg.num_steps {
        let (t, s) = (t_of(k), t_of(k + 1));
        refresh_single(net, codec, ft, cfg, &mut chain)?;
        advance_chain(&mut chain, codec, s, t, cfg.schedule, cfg.freeze_draws_on_idle, rng)?;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(chain.grid.grid().to_vec());
        }
    }
    // Floating-point schedule boundaries can leave residual masks; resolve
    // them with one forced pass at s = 0 (reveal probability one).
    if chain.grid.masked_entries() > 0 {
        refresh_single(net, codec, ft, cfg, &mut chain)?;
        advance_chain(&mut chain, codec, 0.0, t_of(cfg.num_steps - 1), cfg.schedule, false, rng)?;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(chain.grid.grid().to_vec());
        }
    }

    let tokens = finish_chain(&mut chain, codec)?;
    Ok(SampleRun {
        tokens,
        idle_steps: chain.idle_steps,
        per_step_unmasks: chain.per_step_unmasks,
        trajectory,
        model_evals: chain.model_evals,
    })
}

fn refresh_single(
    net: &Net,
    codec: &SubTokenCodec,
    ft: &FilterTable,
    cfg: &SamplerConfig,
    chain: &mut Chain,
) -> Result<()> {
    if chain.needs_eval(cfg.cache_outputs) {
        let logits = net.forward(&chain.grid);
        let row = logits.as_slice().expect("contiguous");
        chain.dists = dists_from_logits(codec, ft, net.config().head, row, &chain.grid)?;
        chain.cache_valid = true;
        chain.model_evals += 1;
    }
    Ok(())
}

/// Run `n` independent chains with per-chain RNG streams (stream = chain
/// index on top of `cfg.seed`), batching denoiser evaluations across the
/// chains that need one. Results are identical to running [`generate`] (or
/// [`impute`]) chain by chain with those streams.
pub fn generate_batch(
    net: &Net,
    codec: &SubTokenCodec,
    ft: &FilterTable,
    cfg: &SamplerConfig,
    n: usize,
    condition: Option<(&[bool], &CleanSeq)>,
) -> Result<BatchRuns> {
    assert!(cfg.num_steps >= 1, "num_steps must be >= 1");
    const CHUNK: usize = 4096;
    let num_tokens = net.config().num_tokens;
    let mut token_rows = Vec::with_capacity(n);
    let mut idle_steps = Vec::with_capacity(n);
    let mut model_evals = 0usize;

    let mut start = 0usize;
    while start < n {
        let count = CHUNK.min(n - start);
        let mut chains: Vec<Chain> = (0..count)
            .map(|_| {
                let grid = match condition {
                    Some((kept, cond)) => impute_grid(codec, num_tokens, kept, cond),
                    None => MaskedSeq::all_masked(codec, num_tokens),
                };
                Chain::new(grid, num_tokens)
            })
            .collect();
        let mut rngs: Vec<Rng> = (0..count)
            .map(|i| {
                let mut r = Rng::seed_from_u64(cfg.seed);
                r.set_stream((start + i) as u64);
                r
            })
            .collect();

        let t_of = |k: usize| 1.0 - k as f64 / cfg.num_steps as f64;
        for k in 0..=cfg.num_steps {
            let final_pass = k == cfg.num_steps;
            let (t, s) = if final_pass {
                (t_of(cfg.num_steps - 1), 0.0)
            } else {
                (t_of(k), t_of(k + 1))
            };
            // Batched refresh of every chain that needs an evaluation.
            let pending: Vec<usize> = chains
                .iter()
                .enumerate()
                .filter(|(_, c)| c.needs_eval(cfg.cache_outputs))
                .map(|(i, _)| i)
                .collect();
            if !pending.is_empty() {
                let grids: Vec<&[u32]> = pending.iter().map(|&i| chains[i].grid.grid()).collect();
                let (_, logits) = net.forward_batch(&grids);
                for (row_idx, &ci) in pending.iter().enumerate() {
                    let row = logits.row(row_idx);
                    let row = row.as_slice().expect("contiguous");
                    let chain = &mut chains[ci];
                    chain.dists =
                        dists_from_logits(codec, ft, net.config().head, row, &chain.grid)?;
                    chain.cache_valid = true;
                    chain.model_evals += 1;
                }
            }
            for (chain, rng) in chains.iter_mut().zip(rngs.iter_mut()) {
                if final_pass && chain.grid.masked_entries() == 0 {
                    continue;
                }
                if final_pass {
                    advance_chain(chain, codec, s, t, cfg.schedule, false, rng)?;
                } else {
                    advance_chain(
                        chain,
                        codec,
                        s,
                        t,
                        cfg.schedule,
                        cfg.freeze_draws_on_idle,
                        rng,
                    )?;
                }
            }
        }
        for chain in chains.iter_mut() {
            token_rows.push(finish_chain(chain, codec)?);
            idle_steps.push(chain.idle_steps.min(cfg.num_steps));
            model_evals += chain.model_evals;
        }
        start += count;
    }
    Ok(BatchRuns {
        token_rows,
        idle_steps,
        model_evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    fn setup(
        c: u32,
        l: usize,
        num_tokens: usize,
        seed: u64,
        head: HeadKind,
    ) -> (SubTokenCodec, FilterTable, Net) {
        let codec = SubTokenCodec::new(c, l).unwrap();
        let ft = FilterTable::build(&codec);
        let cfg = NetConfig {
            num_tokens,
            num_classes: c,
            code_len: l,
            base: codec.base(),
            embed_dim: 4,
            hidden_dim: 16,
            num_layers: 3,
            head,
        };
        let mut rng = Rng::seed_from_u64(seed);
        let net = Net::init(cfg, &mut rng);
        (codec, ft, net)
    }

    #[test]
    fn single_step_unmasks_everything() {
        let (codec, ft, net) = setup(4, 2, 4, 1, HeadKind::Joint);
        let cfg = SamplerConfig {
            num_steps: 1,
            ..SamplerConfig::default()
        };
        let mut rng = Rng::seed_from_u64(2);
        let run = generate(&net, &codec, &ft, &cfg, &mut rng).unwrap();
        assert_eq!(run.tokens.len(), 4);
        assert_eq!(run.idle_steps, 0);
        assert_eq!(run.per_step_unmasks[0], 8);
    }

    #[test]
    fn uniform_model_produces_uniform_marginals() {
        let (codec, ft, net) = setup(4, 2, 4, 3, HeadKind::Joint);
        let cfg = SamplerConfig {
            num_steps: 8,
            seed: 40,
            ..SamplerConfig::default()
        };
        let runs = generate_batch(&net, &codec, &ft, &cfg, 4000, None).unwrap();
        let mut counts = vec![[0usize; 4]; 4];
        for row in &runs.token_rows {
            for (i, &tok) in row.iter().enumerate() {
                counts[i][tok as usize] += 1;
            }
        }
        for (i, c) in counts.iter().enumerate() {
            for (v, &k) in c.iter().enumerate() {
                let f = k as f64 / 4000.0;
                assert!((f - 0.25).abs() < 0.02, "token {i} value {v} freq {f}");
            }
        }
    }

    #[test]
    fn batch_matches_single_runs_with_same_streams() {
        let (codec, ft, net) = setup(7, 3, 3, 4, HeadKind::Joint);
        let cfg = SamplerConfig {
            num_steps: 16,
            seed: 99,
            ..SamplerConfig::default()
        };
        let batch = generate_batch(&net, &codec, &ft, &cfg, 5, None).unwrap();
        for i in 0..5 {
            let mut rng = Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let single = generate(&net, &codec, &ft, &cfg, &mut rng).unwrap();
            assert_eq!(single.tokens, batch.token_rows[i], "chain {i}");
            assert_eq!(single.idle_steps, batch.idle_steps[i], "chain {i}");
        }
    }

    #[test]
    fn caching_does_not_change_samples() {
        let (codec, ft, net) = setup(7, 3, 4, 5, HeadKind::Joint);
        let base = SamplerConfig {
            num_steps: 32,
            ..SamplerConfig::default()
        };
        let run = |cache: bool| {
            let cfg = SamplerConfig {
                cache_outputs: cache,
                ..base.clone()
            };
            let mut rng = Rng::seed_from_u64(7);
            generate(&net, &codec, &ft, &cfg, &mut rng).unwrap()
        };
        let with_cache = run(true);
        let without = run(false);
        assert_eq!(with_cache.tokens, without.tokens);
        assert_eq!(with_cache.idle_steps, without.idle_steps);
        assert!(with_cache.model_evals <= without.model_evals);
    }

    #[test]
    fn trajectory_is_monotone_and_consistent() {
        let (codec, ft, net) = setup(16, 2, 4, 8, HeadKind::Joint);
        let cfg = SamplerConfig {
            num_steps: 24,
            record_trajectory: true,
            ..SamplerConfig::default()
        };
        let mut rng = Rng::seed_from_u64(9);
        let run = generate(&net, &codec, &ft, &cfg, &mut rng).unwrap();
        let mask = codec.mask_symbol();
        let traj = run.trajectory.unwrap();
        for w in traj.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                if *a != mask {
                    assert_eq!(a, b, "revealed digit changed along the trajectory");
                }
            }
        }
        assert!(run.idle_steps <= cfg.num_steps);
        // Revealed digit count over the trajectory equals per-step unmasks.
        let total: usize = run.per_step_unmasks.iter().sum();
        assert_eq!(total, 8);
    }

    #[test]
    fn freeze_draws_still_produces_valid_samples() {
        let (codec, ft, net) = setup(7, 3, 4, 10, HeadKind::Joint);
        let cfg = SamplerConfig {
            num_steps: 32,
            freeze_draws_on_idle: true,
            ..SamplerConfig::default()
        };
        let mut rng = Rng::seed_from_u64(11);
        let run = generate(&net, &codec, &ft, &cfg, &mut rng).unwrap();
        assert_eq!(run.tokens.len(), 4);
        for &t in &run.tokens {
            assert!(t < 7);
        }
    }

    #[test]
    fn independent_head_sampler_produces_valid_tokens() {
        let (codec, ft, net) = setup(7, 3, 4, 12, HeadKind::Independent);
        let cfg = SamplerConfig {
            num_steps: 16,
            ..SamplerConfig::default()
        };
        let mut rng = Rng::seed_from_u64(13);
        let run = generate(&net, &codec, &ft, &cfg, &mut rng).unwrap();
        for &t in &run.tokens {
            assert!(t < 7, "invalid token {t}");
        }
    }

    #[test]
    fn impute_keeps_condition_digits() {
        let (codec, ft, net) = setup(256, 2, 4, 14, HeadKind::Joint);
        let condition = CleanSeq::from_tokens(&codec, &[17, 250, 3, 128]).unwrap();
        let cfg = SamplerConfig {
            num_steps: 16,
            ..SamplerConfig::default()
        };

        // Everything kept: the output is the condition.
        let mut rng = Rng::seed_from_u64(15);
        let all = vec![true; 8];
        let run = impute(&net, &codec, &ft, &cfg, &all, &condition, &mut rng).unwrap();
        assert_eq!(run.tokens, vec![17, 250, 3, 128]);

        // Nothing kept: identical to generate under the same seed.
        let none = vec![false; 8];
        let mut r1 = Rng::seed_from_u64(16);
        let run_imp = impute(&net, &codec, &ft, &cfg, &none, &condition, &mut r1).unwrap();
        let mut r2 = Rng::seed_from_u64(16);
        let run_gen = generate(&net, &codec, &ft, &cfg, &mut r2).unwrap();
        assert_eq!(run_imp.tokens, run_gen.tokens);

        // Keeping the leading digit pins each token to its 16-value bucket.
        let keep_first: Vec<bool> = (0..8).map(|k| k % 2 == 0).collect();
        let mut r3 = Rng::seed_from_u64(17);
        let run = impute(&net, &codec, &ft, &cfg, &keep_first, &condition, &mut r3).unwrap();
        for (out, cond) in run.tokens.iter().zip([17u32, 250, 3, 128]) {
            assert_eq!(out / 16, cond / 16, "leading digit changed");
        }
    }
}
