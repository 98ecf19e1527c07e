//! Run configuration: a flat sectioned key-value text format, environment
//! overrides, and derived component configs.
//!
//! Grammar: `[section]` headers, `key = value` pairs, `#` comments, blank
//! lines ignored. Every key has a default; unknown keys are rejected.
//! Environment variables named `PRIME_<SECTION>_<KEY>` (uppercase) override
//! file values, and explicit `section.key=value` pairs override both.
//!
//! The 2-D density task fixes the sequence length at two tokens (row and
//! column) and requires `codec.classes == task.side`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::codec::SubTokenCodec;
use crate::error::{PrimeError, Result};
use crate::net::{HeadKind, NetConfig};
use crate::sampler::SamplerConfig;
use crate::schedule::Schedule;
use crate::trainer::TrainConfig;

/// Tokens per sequence for the 2-D density task: a (row, col) pair.
pub const GRID_TOKENS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Builtin density name (`gaussians`, `checkerboard`, `rings`) or a path
    /// to a PGM/CSV density file.
    pub density: String,
    pub side: usize,
    pub num_classes: u32,
    pub code_len: usize,
    pub schedule: Schedule,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub head: HeadKind,
    pub train: TrainConfig,
    /// Checkpoint every this many steps (0: final checkpoint only).
    pub checkpoint_interval: usize,
    /// Evaluate the NLL bound every this many steps (0: never).
    pub eval_interval: usize,
    pub eval_num_mc: usize,
    pub sampler_steps: usize,
    pub cache_outputs: bool,
    pub freeze_draws_on_idle: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            density: "gaussians".into(),
            side: 512,
            num_classes: 512,
            code_len: 2,
            schedule: Schedule::Linear,
            embed_dim: 16,
            hidden_dim: 512,
            num_layers: 4,
            head: HeadKind::Joint,
            train: TrainConfig::default(),
            checkpoint_interval: 0,
            eval_interval: 0,
            eval_num_mc: 1000,
            sampler_steps: 128,
            cache_outputs: true,
            freeze_draws_on_idle: false,
            seed: 0,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Parse a config file and apply `PRIME_*` environment overrides.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PrimeError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::build(&text, &[], true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::build(text, &[], false)
    }

    /// Parse with explicit `section.key=value` overrides; `use_env` also
    /// applies environment overrides (between file and explicit ones).
    pub fn build(text: &str, overrides: &[String], use_env: bool) -> Result<Self> {
        let mut map = parse_sections(text)?;
        if use_env {
            for key in KNOWN_KEYS {
                let var = format!("PRIME_{}", key.replace('.', "_").to_uppercase());
                if let Ok(v) = std::env::var(&var) {
                    map.insert((*key).to_string(), v);
                }
            }
        }
        for ov in overrides {
            let (key, value) = ov.split_once('=').ok_or_else(|| {
                PrimeError::Config(format!("override must be section.key=value: {ov}"))
            })?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(PrimeError::Config(format!("unknown config key: {key}")));
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        Self::from_map(&map)
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        for key in map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(PrimeError::Config(format!("unknown config key: {key}")));
            }
        }
        let mut cfg = Self::default();
        let get = |key: &str| map.get(key).map(|s| s.as_str());
        if let Some(v) = get("task.density") {
            cfg.density = v.to_string();
        }
        if let Some(v) = get("task.side") {
            cfg.side = parse_num(v, "task.side")?;
            cfg.num_classes = cfg.side as u32; // default unless overridden
        }
        if let Some(v) = get("codec.classes") {
            cfg.num_classes = parse_num(v, "codec.classes")?;
        }
        if let Some(v) = get("codec.length") {
            cfg.code_len = parse_num(v, "codec.length")?;
        }
        if let Some(v) = get("schedule.kind") {
            cfg.schedule = Schedule::parse(v)?;
        }
        if let Some(v) = get("net.embed_dim") {
            cfg.embed_dim = parse_num(v, "net.embed_dim")?;
        }
        if let Some(v) = get("net.hidden_dim") {
            cfg.hidden_dim = parse_num(v, "net.hidden_dim")?;
        }
        if let Some(v) = get("net.num_layers") {
            cfg.num_layers = parse_num(v, "net.num_layers")?;
        }
        if let Some(v) = get("net.head") {
            cfg.head = HeadKind::parse(v)?;
        }
        if let Some(v) = get("train.batch_size") {
            cfg.train.batch_size = parse_num(v, "train.batch_size")?;
        }
        if let Some(v) = get("train.learning_rate") {
            cfg.train.learning_rate = parse_num(v, "train.learning_rate")?;
        }
        if let Some(v) = get("train.adam_beta1") {
            cfg.train.adam_beta1 = parse_num(v, "train.adam_beta1")?;
        }
        if let Some(v) = get("train.adam_beta2") {
            cfg.train.adam_beta2 = parse_num(v, "train.adam_beta2")?;
        }
        if let Some(v) = get("train.adam_eps") {
            cfg.train.adam_eps = parse_num(v, "train.adam_eps")?;
        }
        if let Some(v) = get("train.steps") {
            cfg.train.steps = parse_num(v, "train.steps")?;
        }
        if let Some(v) = get("train.t_min") {
            cfg.train.t_min = parse_num(v, "train.t_min")?;
        }
        if let Some(v) = get("train.weighted_loss") {
            cfg.train.weighted_loss = parse_bool(v, "train.weighted_loss")?;
        }
        if let Some(v) = get("train.carryover") {
            cfg.train.carryover_in_train = parse_bool(v, "train.carryover")?;
        }
        if let Some(v) = get("train.checkpoint_interval") {
            cfg.checkpoint_interval = parse_num(v, "train.checkpoint_interval")?;
        }
        if let Some(v) = get("train.eval_interval") {
            cfg.eval_interval = parse_num(v, "train.eval_interval")?;
        }
        if let Some(v) = get("train.eval_num_mc") {
            cfg.eval_num_mc = parse_num(v, "train.eval_num_mc")?;
        }
        if let Some(v) = get("sampler.steps") {
            cfg.sampler_steps = parse_num(v, "sampler.steps")?;
        }
        if let Some(v) = get("sampler.cache_outputs") {
            cfg.cache_outputs = parse_bool(v, "sampler.cache_outputs")?;
        }
        if let Some(v) = get("sampler.freeze_draws_on_idle") {
            cfg.freeze_draws_on_idle = parse_bool(v, "sampler.freeze_draws_on_idle")?;
        }
        if let Some(v) = get("run.seed") {
            cfg.seed = parse_num(v, "run.seed")?;
            cfg.train.seed = cfg.seed;
        }
        if let Some(v) = get("run.out_dir") {
            cfg.out_dir = PathBuf::from(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; parsing it back reproduces this config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[task]");
        let _ = writeln!(s, "density = {}", self.density);
        let _ = writeln!(s, "side = {}", self.side);
        let _ = writeln!(s, "\n[codec]");
        let _ = writeln!(s, "classes = {}", self.num_classes);
        let _ = writeln!(s, "length = {}", self.code_len);
        let _ = writeln!(s, "\n[schedule]");
        let _ = writeln!(s, "kind = {}", self.schedule.name());
        let _ = writeln!(s, "\n[net]");
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "hidden_dim = {}", self.hidden_dim);
        let _ = writeln!(s, "num_layers = {}", self.num_layers);
        let _ = writeln!(s, "head = {}", self.head.name());
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.train.learning_rate);
        let _ = writeln!(s, "adam_beta1 = {}", self.train.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", self.train.adam_beta2);
        let _ = writeln!(s, "adam_eps = {}", self.train.adam_eps);
        let _ = writeln!(s, "steps = {}", self.train.steps);
        let _ = writeln!(s, "t_min = {}", self.train.t_min);
        let _ = writeln!(s, "weighted_loss = {}", self.train.weighted_loss);
        let _ = writeln!(s, "carryover = {}", self.train.carryover_in_train);
        let _ = writeln!(s, "checkpoint_interval = {}", self.checkpoint_interval);
        let _ = writeln!(s, "eval_interval = {}", self.eval_interval);
        let _ = writeln!(s, "eval_num_mc = {}", self.eval_num_mc);
        let _ = writeln!(s, "\n[sampler]");
        let _ = writeln!(s, "steps = {}", self.sampler_steps);
        let _ = writeln!(s, "cache_outputs = {}", self.cache_outputs);
        let _ = writeln!(s, "freeze_draws_on_idle = {}", self.freeze_draws_on_idle);
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 2 {
            return Err(PrimeError::Config("task.side must be >= 2".into()));
        }
        if self.num_classes as usize != self.side {
            return Err(PrimeError::Config(format!(
                "codec.classes ({}) must equal task.side ({}) for the 2-D task",
                self.num_classes, self.side
            )));
        }
        if self.code_len < 1 {
            return Err(PrimeError::Config("codec.length must be >= 1".into()));
        }
        if self.embed_dim < 1 || self.hidden_dim < 1 {
            return Err(PrimeError::Config("net dims must be positive".into()));
        }
        if self.num_layers < 2 {
            return Err(PrimeError::Config("net.num_layers must be >= 2".into()));
        }
        if self.sampler_steps < 1 {
            return Err(PrimeError::Config("sampler.steps must be >= 1".into()));
        }
        if self.eval_num_mc < 1 {
            return Err(PrimeError::Config("train.eval_num_mc must be >= 1".into()));
        }
        self.train.validate()
    }

    pub fn codec(&self) -> Result<SubTokenCodec> {
        SubTokenCodec::new(self.num_classes, self.code_len)
    }

    pub fn net_config(&self, base: u32) -> NetConfig {
        NetConfig {
            num_tokens: GRID_TOKENS,
            num_classes: self.num_classes,
            code_len: self.code_len,
            base,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            head: self.head,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            num_steps: self.sampler_steps,
            schedule: self.schedule,
            seed: self.seed,
            cache_outputs: self.cache_outputs,
            record_trajectory: false,
            freeze_draws_on_idle: self.freeze_draws_on_idle,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "task.density",
    "task.side",
    "codec.classes",
    "codec.length",
    "schedule.kind",
    "net.embed_dim",
    "net.hidden_dim",
    "net.num_layers",
    "net.head",
    "train.batch_size",
    "train.learning_rate",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "train.steps",
    "train.t_min",
    "train.weighted_loss",
    "train.carryover",
    "train.checkpoint_interval",
    "train.eval_interval",
    "train.eval_num_mc",
    "sampler.steps",
    "sampler.cache_outputs",
    "sampler.freeze_draws_on_idle",
    "run.seed",
    "run.out_dir",
];

fn parse_sections(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            PrimeError::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        if section.is_empty() {
            return Err(PrimeError::Config(format!(
                "line {}: key outside any [section]",
                lineno + 1
            )));
        }
        map.insert(
            format!("{section}.{}", key.trim()),
            value.trim().to_string(),
        );
    }
    Ok(map)
}

fn parse_num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| PrimeError::Config(format!("bad value for {key}: {v}")))
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(PrimeError::Config(format!("bad boolean for {key}: {v}"))),
    }
}
