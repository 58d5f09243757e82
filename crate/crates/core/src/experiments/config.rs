//! Flat `section.key = value` configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are
//! ignored. Booleans are `true`/`false`, lists are comma-separated and
//! floats accept `inf`. Every key has a default; unknown or repeated keys
//! are errors.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::autoencoder::{Bottleneck, NtMode};
use crate::error::{Error, Result};
use crate::synthdata::Construction;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    ReconSweep,
    Surprisal,
    Encoding,
}

/// How frame ICs become one value per note.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Max,
}

impl Aggregation {
    pub fn apply(self, frames: &[f64]) -> f64 {
        match self {
            Aggregation::Mean => frames.iter().sum::<f64>() / frames.len() as f64,
            Aggregation::Max => frames.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    pub groups: usize,
    pub input_dim: usize,
    /// Perceptual weights `w_k ∝ k^−exponent`.
    pub weight_exponent: f64,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub bottleneck: Bottleneck,
    pub schedule_m: f64,
    pub schedule_s: f64,
    pub gamma: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub lr: f64,
    pub batch: usize,
    pub draws: usize,
    pub nt_modes: Vec<NtMode>,
    pub snr: Vec<f64>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            groups: 8,
            input_dim: 64,
            weight_exponent: 1.0,
            latent_dim: 10,
            hidden: vec![64, 64],
            bottleneck: Bottleneck::LayerNorm,
            schedule_m: -1.0,
            schedule_s: 1.0,
            gamma: 1.0,
            n_train: 4096,
            n_eval: 1024,
            pretrain_steps: 3000,
            finetune_steps: 3000,
            lr: 1e-3,
            batch: 64,
            draws: 16,
            nt_modes: vec![NtMode::Ed, NtMode::D, NtMode::None],
            snr: vec![f64::INFINITY, 4.0, 1.0, 0.25],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurprisalConfig {
    pub n_pitches: usize,
    /// Concentration of the Dirichlet transition rows.
    pub dirichlet_alpha: f64,
    /// Weight of the uniform row mixed into every transition row.
    pub uniform_mix: f64,
    pub seq_len: usize,
    pub frames_per_note: usize,
    pub latent_dim: usize,
    pub pitch_dim: usize,
    pub pitch_power: f64,
    pub nuisance_power: f64,
    pub constructions: Vec<Construction>,
    pub n_train: usize,
    pub n_eval: usize,
    pub context_dim: usize,
    pub hidden: usize,
    pub time_freqs: usize,
    pub schedule_m: f64,
    pub schedule_s: f64,
    pub steps: u64,
    pub warmup: u64,
    pub lr: f64,
    pub batch: usize,
    /// Skips training; the null baseline.
    pub trained: bool,
    pub t_grid: Vec<f64>,
    pub n_draws: usize,
    pub ode_steps: usize,
    pub aggregation: Aggregation,
    pub alpha: f64,
}

impl Default for SurprisalConfig {
    fn default() -> Self {
        Self {
            n_pitches: 8,
            dirichlet_alpha: 0.5,
            uniform_mix: 0.05,
            seq_len: 32,
            frames_per_note: 1,
            latent_dim: 8,
            pitch_dim: 4,
            pitch_power: 1.0,
            nuisance_power: 0.25,
            constructions: vec![Construction::Aligned, Construction::Unaligned],
            n_train: 512,
            n_eval: 16,
            context_dim: 64,
            hidden: 64,
            time_freqs: 4,
            schedule_m: 0.0,
            schedule_s: 1.0,
            steps: 4000,
            warmup: 200,
            lr: 1e-3,
            batch: 16,
            trained: true,
            t_grid: (1..=9).map(|k| k as f64 / 10.0).collect(),
            n_draws: 8,
            ode_steps: 25,
            aggregation: Aggregation::Mean,
            alpha: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodingConfig {
    pub frame_rate: f64,
    pub oversample: usize,
    pub channels: usize,
    pub coupled: Vec<usize>,
    pub participants: usize,
    pub noise_power: f64,
    pub gain_sd: f64,
    pub lag_min_ms: f64,
    pub lag_max_ms: f64,
    pub margin_ms: f64,
    pub lambdas: Vec<f64>,
    pub inner_folds: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            frame_rate: 64.0,
            oversample: 8,
            channels: 8,
            coupled: vec![0, 1, 2, 3],
            participants: 20,
            noise_power: 1.0,
            gain_sd: 0.2,
            lag_min_ms: -100.0,
            lag_max_ms: 700.0,
            margin_ms: 50.0,
            lambdas: (-3..=6).map(|e| 10f64.powi(e)).collect(),
            inner_folds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub recon: ReconConfig,
    pub surprisal: SurprisalConfig,
    pub encoding: EncodingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Surprisal,
            seed: 0,
            recon: ReconConfig::default(),
            surprisal: SurprisalConfig::default(),
            encoding: EncodingConfig::default(),
        }
    }
}

fn cfg_err<T>(line: usize, msg: impl std::fmt::Display) -> Result<T> {
    if line == 0 {
        Err(Error::Config(msg.to_string()))
    } else {
        Err(Error::Config(format!("line {line}: {msg}")))
    }
}

fn scalar<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn float(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = scalar(v)?;
    if x.is_nan() {
        return Err("NaN is not a valid value".into());
    }
    Ok(x)
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn list<T>(v: &str, item: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| item(s.trim())).collect()
}

fn kind_name(k: ExperimentKind) -> &'static str {
    match k {
        ExperimentKind::ReconSweep => "recon_sweep",
        ExperimentKind::Surprisal => "surprisal",
        ExperimentKind::Encoding => "encoding",
    }
}

fn parse_kind(v: &str) -> std::result::Result<ExperimentKind, String> {
    match v {
        "recon_sweep" => Ok(ExperimentKind::ReconSweep),
        "surprisal" => Ok(ExperimentKind::Surprisal),
        "encoding" => Ok(ExperimentKind::Encoding),
        _ => Err(format!("unknown experiment kind {v:?}")),
    }
}

fn bottleneck_name(b: Bottleneck) -> &'static str {
    match b {
        Bottleneck::Tanh => "tanh",
        Bottleneck::LayerNorm => "layer_norm",
    }
}

fn parse_bottleneck(v: &str) -> std::result::Result<Bottleneck, String> {
    match v {
        "tanh" => Ok(Bottleneck::Tanh),
        "layer_norm" => Ok(Bottleneck::LayerNorm),
        _ => Err(format!("unknown bottleneck {v:?}")),
    }
}

fn parse_nt(v: &str) -> std::result::Result<NtMode, String> {
    match v {
        "ED" => Ok(NtMode::Ed),
        "D" => Ok(NtMode::D),
        "NONE" => Ok(NtMode::None),
        _ => Err(format!("unknown NT mode {v:?}")),
    }
}

pub fn construction_name(c: Construction) -> &'static str {
    match c {
        Construction::Aligned => "aligned",
        Construction::Unaligned => "unaligned",
    }
}

fn parse_construction(v: &str) -> std::result::Result<Construction, String> {
    match v {
        "aligned" => Ok(Construction::Aligned),
        "unaligned" => Ok(Construction::Unaligned),
        _ => Err(format!("unknown construction {v:?}")),
    }
}

fn aggregation_name(a: Aggregation) -> &'static str {
    match a {
        Aggregation::Mean => "mean",
        Aggregation::Max => "max",
    }
}

fn parse_aggregation(v: &str) -> std::result::Result<Aggregation, String> {
    match v {
        "mean" => Ok(Aggregation::Mean),
        "max" => Ok(Aggregation::Max),
        _ => Err(format!("unknown aggregation {v:?}")),
    }
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return cfg_err(line_no, "expected `section.key = value`");
            };
            let (key, value) = (key.trim(), value.trim());
            let valid_key = key.split_once('.').is_some_and(|(s, k)| {
                let ident = |x: &str| !x.is_empty() && x.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_');
                ident(s) && ident(k)
            });
            if !valid_key {
                return cfg_err(line_no, format!("malformed key {key:?}"));
            }
            if !seen.insert(key.to_string()) {
                return cfg_err(line_no, format!("duplicate key {key}"));
            }
            if let Err(msg) = cfg.set(key, value) {
                return cfg_err(line_no, format!("{key}: {msg}"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (r, s, e) = (&mut self.recon, &mut self.surprisal, &mut self.encoding);
        match key {
            "experiment.kind" => self.kind = parse_kind(v)?,
            "experiment.seed" => self.seed = scalar(v)?,

            "recon.groups" => r.groups = scalar(v)?,
            "recon.input_dim" => r.input_dim = scalar(v)?,
            "recon.weight_exponent" => r.weight_exponent = float(v)?,
            "recon.latent_dim" => r.latent_dim = scalar(v)?,
            "recon.hidden" => r.hidden = list(v, scalar)?,
            "recon.bottleneck" => r.bottleneck = parse_bottleneck(v)?,
            "recon.schedule_m" => r.schedule_m = float(v)?,
            "recon.schedule_s" => r.schedule_s = float(v)?,
            "recon.gamma" => r.gamma = float(v)?,
            "recon.n_train" => r.n_train = scalar(v)?,
            "recon.n_eval" => r.n_eval = scalar(v)?,
            "recon.pretrain_steps" => r.pretrain_steps = scalar(v)?,
            "recon.finetune_steps" => r.finetune_steps = scalar(v)?,
            "recon.lr" => r.lr = float(v)?,
            "recon.batch" => r.batch = scalar(v)?,
            "recon.draws" => r.draws = scalar(v)?,
            "recon.nt_modes" => r.nt_modes = list(v, parse_nt)?,
            "recon.snr" => r.snr = list(v, float)?,

            "surprisal.n_pitches" => s.n_pitches = scalar(v)?,
            "surprisal.dirichlet_alpha" => s.dirichlet_alpha = float(v)?,
            "surprisal.uniform_mix" => s.uniform_mix = float(v)?,
            "surprisal.seq_len" => s.seq_len = scalar(v)?,
            "surprisal.frames_per_note" => s.frames_per_note = scalar(v)?,
            "surprisal.latent_dim" => s.latent_dim = scalar(v)?,
            "surprisal.pitch_dim" => s.pitch_dim = scalar(v)?,
            "surprisal.pitch_power" => s.pitch_power = float(v)?,
            "surprisal.nuisance_power" => s.nuisance_power = float(v)?,
            "surprisal.constructions" => s.constructions = list(v, parse_construction)?,
            "surprisal.n_train" => s.n_train = scalar(v)?,
            "surprisal.n_eval" => s.n_eval = scalar(v)?,
            "surprisal.context_dim" => s.context_dim = scalar(v)?,
            "surprisal.hidden" => s.hidden = scalar(v)?,
            "surprisal.time_freqs" => s.time_freqs = scalar(v)?,
            "surprisal.schedule_m" => s.schedule_m = float(v)?,
            "surprisal.schedule_s" => s.schedule_s = float(v)?,
            "surprisal.steps" => s.steps = scalar(v)?,
            "surprisal.warmup" => s.warmup = scalar(v)?,
            "surprisal.lr" => s.lr = float(v)?,
            "surprisal.batch" => s.batch = scalar(v)?,
            "surprisal.trained" => s.trained = boolean(v)?,
            "surprisal.t_grid" => s.t_grid = list(v, float)?,
            "surprisal.n_draws" => s.n_draws = scalar(v)?,
            "surprisal.ode_steps" => s.ode_steps = scalar(v)?,
            "surprisal.aggregation" => s.aggregation = parse_aggregation(v)?,
            "surprisal.alpha" => s.alpha = float(v)?,

            "encoding.frame_rate" => e.frame_rate = float(v)?,
            "encoding.oversample" => e.oversample = scalar(v)?,
            "encoding.channels" => e.channels = scalar(v)?,
            "encoding.coupled" => e.coupled = list(v, scalar)?,
            "encoding.participants" => e.participants = scalar(v)?,
            "encoding.noise_power" => e.noise_power = float(v)?,
            "encoding.gain_sd" => e.gain_sd = float(v)?,
            "encoding.lag_min_ms" => e.lag_min_ms = float(v)?,
            "encoding.lag_max_ms" => e.lag_max_ms = float(v)?,
            "encoding.margin_ms" => e.margin_ms = float(v)?,
            "encoding.lambdas" => e.lambdas = list(v, float)?,
            "encoding.inner_folds" => e.inner_folds = scalar(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Range checks that do not need the heavier per-module validation.
    pub fn validate(&self) -> Result<()> {
        let r = &self.recon;
        let s = &self.surprisal;
        let e = &self.encoding;
        let pos = |x: f64| x > 0.0 && x.is_finite();
        let checks: [(bool, &str); 20] = [
            (r.groups > 0 && r.input_dim > 0 && r.latent_dim > 0, "recon dimensions must be positive"),
            (r.hidden.iter().all(|&h| h > 0), "recon.hidden widths must be positive"),
            (pos(r.lr) && pos(s.lr), "learning rates must be positive"),
            (r.batch > 0 && s.batch > 0, "batch sizes must be positive"),
            (r.n_train > 0 && r.n_eval > 0 && r.draws > 0, "recon sizes must be positive"),
            (!r.nt_modes.is_empty(), "recon.nt_modes is empty"),
            (!r.snr.is_empty() && r.snr.iter().all(|&x| x > 0.0), "recon.snr levels must be positive"),
            (r.weight_exponent.is_finite(), "recon.weight_exponent must be finite"),
            (s.n_train > 0 && s.n_eval > 0, "surprisal sizes must be positive"),
            (!s.constructions.is_empty(), "surprisal.constructions is empty"),
            (!s.t_grid.is_empty() && s.t_grid.iter().all(|t| (0.0..1.0).contains(t)), "t grid must lie in [0, 1)"),
            (s.n_draws > 0 && s.ode_steps > 0, "surprisal.n_draws and ode_steps must be positive"),
            (s.alpha > 0.0 && s.alpha < 1.0, "surprisal.alpha must lie in (0, 1)"),
            (s.warmup <= s.steps, "surprisal.warmup exceeds the step budget"),
            (pos(e.frame_rate) && e.oversample > 0, "encoding rates must be positive"),
            (e.channels > 0 && e.participants > 1, "encoding needs channels and at least 2 participants"),
            (e.coupled.iter().all(|&c| c < e.channels), "encoding.coupled names a missing channel"),
            (e.noise_power >= 0.0 && e.gain_sd >= 0.0, "encoding noise and gain spread must be non-negative"),
            (!e.lambdas.is_empty() && e.lambdas.iter().all(|l| *l >= 0.0 && l.is_finite()), "encoding.lambdas must be finite and non-negative"),
            (e.inner_folds != 1, "encoding.inner_folds must be 0 (leave-one-out) or at least 2"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return cfg_err(0, msg);
            }
        }
        Ok(())
    }

    /// Every key with its value, in a fixed order. Parsing this text gives
    /// back an equal config.
    pub fn canonical(&self) -> String {
        let r = &self.recon;
        let s = &self.surprisal;
        let e = &self.encoding;
        let f = |x: &f64| x.to_string();
        let u = |x: &usize| x.to_string();
        let pairs: Vec<(&str, String)> = vec![
            ("experiment.kind", kind_name(self.kind).into()),
            ("experiment.seed", self.seed.to_string()),
            ("recon.groups", r.groups.to_string()),
            ("recon.input_dim", r.input_dim.to_string()),
            ("recon.weight_exponent", f(&r.weight_exponent)),
            ("recon.latent_dim", r.latent_dim.to_string()),
            ("recon.hidden", join(&r.hidden, u)),
            ("recon.bottleneck", bottleneck_name(r.bottleneck).into()),
            ("recon.schedule_m", f(&r.schedule_m)),
            ("recon.schedule_s", f(&r.schedule_s)),
            ("recon.gamma", f(&r.gamma)),
            ("recon.n_train", r.n_train.to_string()),
            ("recon.n_eval", r.n_eval.to_string()),
            ("recon.pretrain_steps", r.pretrain_steps.to_string()),
            ("recon.finetune_steps", r.finetune_steps.to_string()),
            ("recon.lr", f(&r.lr)),
            ("recon.batch", r.batch.to_string()),
            ("recon.draws", r.draws.to_string()),
            ("recon.nt_modes", join(&r.nt_modes, |m| m.as_str().into())),
            ("recon.snr", join(&r.snr, f)),
            ("surprisal.n_pitches", s.n_pitches.to_string()),
            ("surprisal.dirichlet_alpha", f(&s.dirichlet_alpha)),
            ("surprisal.uniform_mix", f(&s.uniform_mix)),
            ("surprisal.seq_len", s.seq_len.to_string()),
            ("surprisal.frames_per_note", s.frames_per_note.to_string()),
            ("surprisal.latent_dim", s.latent_dim.to_string()),
            ("surprisal.pitch_dim", s.pitch_dim.to_string()),
            ("surprisal.pitch_power", f(&s.pitch_power)),
            ("surprisal.nuisance_power", f(&s.nuisance_power)),
            ("surprisal.constructions", join(&s.constructions, |c| construction_name(*c).into())),
            ("surprisal.n_train", s.n_train.to_string()),
            ("surprisal.n_eval", s.n_eval.to_string()),
            ("surprisal.context_dim", s.context_dim.to_string()),
            ("surprisal.hidden", s.hidden.to_string()),
            ("surprisal.time_freqs", s.time_freqs.to_string()),
            ("surprisal.schedule_m", f(&s.schedule_m)),
            ("surprisal.schedule_s", f(&s.schedule_s)),
            ("surprisal.steps", s.steps.to_string()),
            ("surprisal.warmup", s.warmup.to_string()),
            ("surprisal.lr", f(&s.lr)),
            ("surprisal.batch", s.batch.to_string()),
            ("surprisal.trained", s.trained.to_string()),
            ("surprisal.t_grid", join(&s.t_grid, f)),
            ("surprisal.n_draws", s.n_draws.to_string()),
            ("surprisal.ode_steps", s.ode_steps.to_string()),
            ("surprisal.aggregation", aggregation_name(s.aggregation).into()),
            ("surprisal.alpha", f(&s.alpha)),
            ("encoding.frame_rate", f(&e.frame_rate)),
            ("encoding.oversample", e.oversample.to_string()),
            ("encoding.channels", e.channels.to_string()),
            ("encoding.coupled", join(&e.coupled, u)),
            ("encoding.participants", e.participants.to_string()),
            ("encoding.noise_power", f(&e.noise_power)),
            ("encoding.gain_sd", f(&e.gain_sd)),
            ("encoding.lag_min_ms", f(&e.lag_min_ms)),
            ("encoding.lag_max_ms", f(&e.lag_max_ms)),
            ("encoding.margin_ms", f(&e.margin_ms)),
            ("encoding.lambdas", join(&e.lambdas, f)),
            ("encoding.inner_folds", e.inner_folds.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.canonical().as_bytes())[..8])
    }
}
