//! Command-line front end: train, sample, eval, analyze.
//!
//! Exit codes: 0 success, 1 configuration/usage/IO errors, 2 numeric
//! failures (non-finite loss).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;

use prime_core::analytics;
use prime_core::checkpoint;
use prime_core::codec::SubTokenCodec;
use prime_core::config::{RunConfig, GRID_TOKENS};
use prime_core::data::{self, DensityGrid};
use prime_core::decoder::FilterTable;
use prime_core::diffusion::CleanSeq;
use prime_core::error::PrimeError;
use prime_core::metrics::MetricsWriter;
use prime_core::net::Net;
use prime_core::sampler;
use prime_core::schedule::Schedule;
use prime_core::trainer::{self, AdamState};
use prime_core::Rng;

#[derive(Parser)]
#[command(
    name = "prime",
    about = "Masked discrete diffusion over sub-token encodings: train, sample, evaluate, analyze"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write metrics + checkpoints.
    Train {
        /// Path to the run config (sectioned key = value text).
        #[arg(long)]
        config: PathBuf,
        /// Override single keys, e.g. --set train.steps=100 (repeatable).
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        sets: Vec<String>,
        /// Override run.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override run.out_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint; optionally impute around a condition.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        num_samples: usize,
        /// Reverse steps T (defaults to the checkpoint's sampler.steps).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (created if missing).
        #[arg(long, default_value = "samples")]
        out: PathBuf,
        /// CSV file with one row of L condition tokens (enables imputation).
        #[arg(long)]
        condition: Option<PathBuf>,
        /// Comma-separated digit positions (0-based) kept from the
        /// condition in every token; requires --condition.
        #[arg(long)]
        keep_digits: Option<String>,
        /// Re-evaluate the denoiser every step even when the grid is
        /// unchanged.
        #[arg(long)]
        no_cache: bool,
        /// Reuse denoiser draws across idle steps.
        #[arg(long)]
        freeze_draws_on_idle: bool,
        /// Record and write the first run's grid trajectory.
        #[arg(long)]
        trajectory: bool,
    },
    /// Evaluate the NLL bound, perplexity, and sample TV distance.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Monte Carlo strata for the bound estimate.
        #[arg(long, default_value_t = 1000)]
        num_mc: usize,
        /// Samples drawn for the TV distance.
        #[arg(long, default_value_t = 100_000)]
        tv_samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report to this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form idle-step analytics and simulation cross-checks.
    Analyze {
        #[arg(long, default_value = "linear")]
        schedule: String,
        /// Sampling steps T.
        #[arg(long, default_value_t = 1024)]
        steps: usize,
        /// Token sequence length L.
        #[arg(long, default_value_t = 1024)]
        tokens: u64,
        /// Comma-separated code lengths to tabulate.
        #[arg(long, default_value = "1,2,3,4,6,8")]
        ells: String,
        /// Simulation runs per row (0: analytic columns only).
        #[arg(long, default_value_t = 0)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            sets,
            seed,
            out_dir,
        } => cmd_train(&config, &sets, seed, out_dir),
        Command::Sample {
            checkpoint,
            num_samples,
            steps,
            seed,
            out,
            condition,
            keep_digits,
            no_cache,
            freeze_draws_on_idle,
            trajectory,
        } => cmd_sample(
            &checkpoint,
            num_samples,
            steps,
            seed,
            &out,
            condition.as_deref(),
            keep_digits.as_deref(),
            no_cache,
            freeze_draws_on_idle,
            trajectory,
        ),
        Command::Eval {
            checkpoint,
            num_mc,
            tv_samples,
            seed,
            out,
        } => cmd_eval(&checkpoint, num_mc, tv_samples, seed, out.as_deref()),
        Command::Analyze {
            schedule,
            steps,
            tokens,
            ells,
            runs,
            seed,
            out,
        } => cmd_analyze(&schedule, steps, tokens, &ells, runs, seed, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                PrimeError::NonFinite(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

struct LoadedModel {
    cfg: RunConfig,
    codec: SubTokenCodec,
    filters: FilterTable,
    net: Net,
}

fn load_model(path: &Path) -> Result<LoadedModel, PrimeError> {
    let (cfg, net) = checkpoint::load(path)?;
    let codec = cfg.codec()?;
    let filters = FilterTable::build(&codec);
    Ok(LoadedModel {
        cfg,
        codec,
        filters,
        net,
    })
}

fn density_of(cfg: &RunConfig) -> Result<DensityGrid, PrimeError> {
    match cfg.density.as_str() {
        "gaussians" | "checkerboard" | "rings" => data::builtin_density(&cfg.density, cfg.side),
        path => data::load_density(Path::new(path), cfg.side),
    }
}

fn sample_batch(
    grid: &DensityGrid,
    codec: &SubTokenCodec,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<CleanSeq>, PrimeError> {
    data::sample_data(grid, n, rng)
        .into_iter()
        .map(|(r, c)| CleanSeq::from_tokens(codec, &[r, c]))
        .collect()
}

fn cmd_train(
    config_path: &Path,
    sets: &[String],
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
) -> Result<(), PrimeError> {
    let text = fs::read_to_string(config_path).map_err(|e| {
        PrimeError::Config(format!("cannot read config {}: {e}", config_path.display()))
    })?;
    let mut sets = sets.to_vec();
    if let Some(seed) = seed {
        sets.push(format!("run.seed={seed}"));
    }
    let mut cfg = RunConfig::build(&text, &sets, true)?;
    if let Some(dir) = out_dir {
        cfg.out_dir = dir;
    }

    let run_dir = create_run_dir(&cfg.out_dir, cfg.seed)?;
    fs::write(run_dir.join("resolved-config.txt"), cfg.to_text())?;

    let density = density_of(&cfg)?;
    let codec = cfg.codec()?;
    let filters = FilterTable::build(&codec);
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut net = Net::init(cfg.net_config(codec.base()), &mut rng);
    let mut opt = AdamState::new(&net);
    let mut metrics = MetricsWriter::create(&run_dir.join("metrics.csv"))?;
    let isr_running = analytics::isr(
        cfg.schedule,
        cfg.sampler_steps,
        GRID_TOKENS as u64,
        cfg.code_len as u32,
    );

    println!(
        "training: density={} side={} l={} b={} params={} steps={}",
        cfg.density,
        cfg.side,
        cfg.code_len,
        codec.base(),
        net.param_count(),
        cfg.train.steps
    );
    let started = Instant::now();
    for step in 0..cfg.train.steps {
        let batch = sample_batch(&density, &codec, cfg.train.batch_size, &mut rng)?;
        let report = trainer::train_step(
            &mut net,
            &mut opt,
            &codec,
            &filters,
            &batch,
            cfg.schedule,
            &cfg.train,
            &mut rng,
        )
        .map_err(|e| match e {
            PrimeError::NonFinite(what) => {
                PrimeError::NonFinite(format!("{what} at step {step}"))
            }
            other => other,
        })?;

        let nll = if cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0 {
            let mut draw = |rng: &mut Rng| {
                let (r, c) = data::sample_data(&density, 1, rng)[0];
                CleanSeq::from_tokens(&codec, &[r, c]).expect("density sample encodes")
            };
            let eval = trainer::eval_nll(
                &net,
                &codec,
                &filters,
                cfg.schedule,
                &mut draw,
                cfg.eval_num_mc,
                cfg.train.t_min,
                &mut rng,
            )?;
            Some(eval.nats_per_token)
        } else {
            None
        };
        metrics.append(
            step,
            started.elapsed().as_secs_f64(),
            report.loss,
            nll,
            isr_running,
        )?;
        if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
            checkpoint::save(&run_dir.join(format!("ckpt-{:06}.prime", step + 1)), &cfg, &net)?;
        }
    }
    metrics.flush()?;
    checkpoint::save(&run_dir.join("ckpt-final.prime"), &cfg, &net)?;

    // Final NLL report.
    let mut draw = |rng: &mut Rng| {
        let (r, c) = data::sample_data(&density, 1, rng)[0];
        CleanSeq::from_tokens(&codec, &[r, c]).expect("density sample encodes")
    };
    let eval = trainer::eval_nll(
        &net,
        &codec,
        &filters,
        cfg.schedule,
        &mut draw,
        cfg.eval_num_mc,
        cfg.train.t_min,
        &mut rng,
    )?;
    let report = format!(
        "nats_per_token = {:.6}\nperplexity_per_token = {:.4}\nstd_err = {}\nnum_mc = {}\n",
        eval.nats_per_token,
        eval.perplexity,
        eval.std_err
            .map(|s| format!("{s:.6}"))
            .unwrap_or_else(|| "N/A".into()),
        eval.num_mc
    );
    fs::write(run_dir.join("final-nll.txt"), &report)?;
    println!("run directory: {}", run_dir.display());
    print!("{report}");
    Ok(())
}

fn create_run_dir(base: &Path, seed: u64) -> Result<PathBuf, PrimeError> {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut k = 0u32;
    loop {
        let name = if k == 0 {
            format!("{stamp}-seed{seed}")
        } else {
            format!("{stamp}-seed{seed}-{k}")
        };
        let dir = base.join(name);
        if !dir.exists() {
            fs::create_dir_all(&dir)?;
            return Ok(dir);
        }
        k += 1;
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    checkpoint_path: &Path,
    num_samples: usize,
    steps: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    condition: Option<&Path>,
    keep_digits: Option<&str>,
    no_cache: bool,
    freeze_draws_on_idle: bool,
    trajectory: bool,
) -> Result<(), PrimeError> {
    let model = load_model(checkpoint_path)?;
    let mut scfg = model.cfg.sampler_config();
    if let Some(t) = steps {
        scfg.num_steps = t;
    }
    if let Some(s) = seed {
        scfg.seed = s;
    }
    scfg.cache_outputs = !no_cache;
    scfg.freeze_draws_on_idle = freeze_draws_on_idle;

    let cond = match condition {
        Some(path) => {
            let tokens = read_token_row(path, model.codec.num_classes())?;
            if tokens.len() != GRID_TOKENS {
                return Err(PrimeError::Config(format!(
                    "condition must have {GRID_TOKENS} tokens, got {}",
                    tokens.len()
                )));
            }
            let kept = parse_keep_digits(keep_digits, model.codec.code_len())?;
            let clean = CleanSeq::from_tokens(&model.codec, &tokens)?;
            Some((kept, clean))
        }
        None => {
            if keep_digits.is_some() {
                return Err(PrimeError::Config(
                    "--keep-digits requires --condition".into(),
                ));
            }
            None
        }
    };

    fs::create_dir_all(out)?;
    let runs = {
        let cond_ref = cond.as_ref().map(|(kept, clean)| (kept.as_slice(), clean));
        sampler::generate_batch(
            &model.net,
            &model.codec,
            &model.filters,
            &scfg,
            num_samples,
            cond_ref,
        )?
    };

    // Token grid CSV.
    let mut csv = String::new();
    for row in &runs.token_rows {
        let cells: Vec<String> = row.iter().map(|t| t.to_string()).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    fs::write(out.join("samples.csv"), csv)?;

    // Idle-step summary.
    let mean_idle = if num_samples > 0 {
        runs.idle_steps.iter().sum::<usize>() as f64 / num_samples as f64
    } else {
        0.0
    };
    let analytic = analytics::expected_idle_steps(
        scfg.schedule,
        scfg.num_steps,
        (GRID_TOKENS * model.codec.code_len()) as u64,
    );
    let summary = format!(
        "samples,steps,mean_idle_steps,analytic_idle_steps,empirical_isr,analytic_isr,model_evals\n{},{},{:.4},{:.4},{:.6},{:.6},{}\n",
        num_samples,
        scfg.num_steps,
        mean_idle,
        analytic,
        mean_idle / scfg.num_steps as f64,
        analytic / scfg.num_steps as f64,
        runs.model_evals
    );
    fs::write(out.join("idle-summary.csv"), summary)?;

    // 2-D histogram image.
    if model.cfg.side == model.codec.num_classes() as usize && num_samples > 0 {
        let pairs: Vec<(u32, u32)> = runs.token_rows.iter().map(|r| (r[0], r[1])).collect();
        let pixels = data::histogram_pixels(model.cfg.side, &pairs);
        data::write_pgm(
            &out.join("histogram.pgm"),
            model.cfg.side,
            model.cfg.side,
            &pixels,
        )?;
    }

    if trajectory && num_samples > 0 {
        let mut rng = Rng::seed_from_u64(scfg.seed);
        rng.set_stream(u64::MAX); // distinct from batch chain streams
        let mut tcfg = scfg.clone();
        tcfg.record_trajectory = true;
        let run = match &cond {
            Some((kept, clean)) => sampler::impute(
                &model.net,
                &model.codec,
                &model.filters,
                &tcfg,
                kept,
                clean,
                &mut rng,
            )?,
            None => sampler::generate(&model.net, &model.codec, &model.filters, &tcfg, &mut rng)?,
        };
        let mask = model.codec.mask_symbol();
        let mut text = String::new();
        for snapshot in run.trajectory.expect("trajectory recorded") {
            let cells: Vec<String> = snapshot
                .iter()
                .map(|&v| {
                    if v == mask {
                        "m".to_string()
                    } else {
                        v.to_string()
                    }
                })
                .collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        fs::write(out.join("trajectory.csv"), text)?;
    }

    println!(
        "wrote {} samples to {} (mean idle steps {:.2} of {})",
        num_samples,
        out.display(),
        mean_idle,
        scfg.num_steps
    );
    Ok(())
}

fn read_token_row(path: &Path, num_classes: u32) -> Result<Vec<u32>, PrimeError> {
    let text = fs::read_to_string(path)
        .map_err(|e| PrimeError::Config(format!("cannot read {}: {e}", path.display())))?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| PrimeError::Config("empty condition file".into()))?;
    let tokens: Result<Vec<u32>, PrimeError> = line
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| PrimeError::Config(format!("bad condition token: {t}")))
        })
        .collect();
    let tokens = tokens?;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= num_classes) {
        return Err(PrimeError::Config(format!(
            "condition token {bad} out of range 0..{num_classes}"
        )));
    }
    Ok(tokens)
}

fn parse_keep_digits(spec: Option<&str>, code_len: usize) -> Result<Vec<bool>, PrimeError> {
    let mut kept = vec![false; GRID_TOKENS * code_len];
    let Some(spec) = spec else {
        return Ok(kept); // condition given but nothing kept: plain generate
    };
    for part in spec.split(',') {
        let j: usize = part
            .trim()
            .parse()
            .map_err(|_| PrimeError::Config(format!("bad digit index: {part}")))?;
        if j >= code_len {
            return Err(PrimeError::Config(format!(
                "digit index {j} out of range 0..{code_len}"
            )));
        }
        for i in 0..GRID_TOKENS {
            kept[i * code_len + j] = true;
        }
    }
    Ok(kept)
}

fn cmd_eval(
    checkpoint_path: &Path,
    num_mc: usize,
    tv_samples: usize,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<(), PrimeError> {
    if num_mc < 1 {
        return Err(PrimeError::Config("num_mc must be >= 1".into()));
    }
    let model = load_model(checkpoint_path)?;
    let density = density_of(&model.cfg)?;
    let seed = seed.unwrap_or(model.cfg.seed);
    let mut rng = Rng::seed_from_u64(seed);

    let mut draw = |rng: &mut Rng| {
        let (r, c) = data::sample_data(&density, 1, rng)[0];
        CleanSeq::from_tokens(&model.codec, &[r, c]).expect("density sample encodes")
    };
    let eval = trainer::eval_nll(
        &model.net,
        &model.codec,
        &model.filters,
        model.cfg.schedule,
        &mut draw,
        num_mc,
        model.cfg.train.t_min,
        &mut rng,
    )?;

    let mut scfg = model.cfg.sampler_config();
    scfg.seed = seed;
    let tv = if tv_samples > 0 {
        let runs = sampler::generate_batch(
            &model.net,
            &model.codec,
            &model.filters,
            &scfg,
            tv_samples,
            None,
        )?;
        let pairs: Vec<(u32, u32)> = runs.token_rows.iter().map(|r| (r[0], r[1])).collect();
        Some(data::tv_distance(&density, &pairs))
    } else {
        None
    };

    // One 2-D sample is a (row, col) pair of tokens, so the pair perplexity
    // is exp(2 * nats/token).
    let report = format!(
        "# nats/token is the bound estimate; pair perplexity = exp(2 * nats/token)\n\
         nats_per_token = {:.6}\n\
         perplexity_per_token = {:.4}\n\
         perplexity_per_pair = {:.4}\n\
         std_err = {}\n\
         num_mc = {}\n\
         tv_distance = {}\n\
         tv_samples = {}\n",
        eval.nats_per_token,
        eval.perplexity,
        (2.0 * eval.nats_per_token).exp(),
        eval.std_err
            .map(|s| format!("{s:.6}"))
            .unwrap_or_else(|| "N/A".into()),
        eval.num_mc,
        tv.map(|v| format!("{v:.6}")).unwrap_or_else(|| "N/A".into()),
        tv_samples
    );
    print!("{report}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.txt"), &report)?;
    }
    Ok(())
}

fn cmd_analyze(
    schedule: &str,
    steps: usize,
    tokens: u64,
    ells: &str,
    runs: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), PrimeError> {
    let sch = Schedule::parse(schedule)?;
    if steps < 1 || tokens < 1 {
        return Err(PrimeError::Config("steps and tokens must be >= 1".into()));
    }
    let lengths: Result<Vec<u32>, PrimeError> = ells
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<u32>()
                .map_err(|_| PrimeError::Config(format!("bad code length: {p}")))
        })
        .collect();
    let lengths = lengths?;
    if lengths.is_empty() || lengths.iter().any(|&l| l == 0) {
        return Err(PrimeError::Config("code lengths must be >= 1".into()));
    }

    let elbow = if lengths.len() >= 3 {
        Some(analytics::isr_elbow(sch, steps, tokens, &lengths)?)
    } else {
        None
    };

    let mut csv = String::from("schedule,T,L,ell,eta,isr,sim_mean,sim_var,elbow\n");
    for &l in &lengths {
        let eta = analytics::expected_idle_steps(sch, steps, tokens * l as u64);
        let isr = eta / steps as f64;
        let (sim_mean, sim_var) = if runs > 0 {
            let stats = analytics::simulate_idle_steps_seeded(
                sch,
                steps,
                tokens,
                l,
                runs,
                seed ^ l as u64,
            )?;
            (
                format!("{:.4}", stats.eta_simulated_mean),
                format!("{:.4}", stats.eta_simulated_var),
            )
        } else {
            (String::new(), String::new())
        };
        let elbow_cell = elbow.map(|e| e.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{steps},{tokens},{l},{eta:.4},{isr:.6},{sim_mean},{sim_var},{elbow_cell}\n",
            sch.name()
        ));
    }
    match out {
        Some(path) => fs::write(path, csv)?,
        None => {
            std::io::stdout().write_all(csv.as_bytes())?;
        }
    }
    Ok(())
}
