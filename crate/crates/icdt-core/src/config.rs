//! Run configuration and its flat `[section]` / `key = value` file format.
//! Unknown sections or keys are hard errors; a serialized config parses back
//! to the identical value.

use crate::codec::CodecSpec;
use crate::engine::{ScheduleSpec, TrainSetup};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamW;
use std::fmt::Write as _;
use std::path::PathBuf;

/// One training/enhancement run, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model_name: String,
    pub patch: usize,
    pub data_root: PathBuf,
    pub image_side: usize,
    pub codec: CodecSpec,
    pub codec_epochs: usize,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub batch: usize,
    pub iterations: u64,
    pub ema_decay: f64,
    pub seed: u64,
    pub vlb_weight: f64,
    pub checkpoint_every: u64,
    pub sample_steps: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    /// Paper-recipe defaults: T = 1000 with betas 1e-4..2e-2, AdamW at
    /// lr 1e-4, batch 32, EMA decay 0.9999, 250 sampling steps,
    /// bound weight 0.001.
    fn default() -> Self {
        RunConfig {
            model_name: "tiny".into(),
            patch: 4,
            data_root: "data".into(),
            image_side: 32,
            codec: CodecSpec::Identity,
            codec_epochs: 60,
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            lr: 1e-4,
            batch: 32,
            iterations: 10_000,
            ema_decay: 0.9999,
            seed: 0,
            vlb_weight: 0.001,
            checkpoint_every: 1000,
            sample_steps: 250,
            out_dir: "runs/default".into(),
        }
    }
}

impl RunConfig {
    /// Desk-scale profile: the tiny model on 16x16 images with the identity
    /// codec and a short 200-step chain; the full pipeline runs in minutes
    /// on one CPU core.
    pub fn desk_profile() -> Self {
        RunConfig {
            model_name: "tiny".into(),
            patch: 2,
            data_root: "data/synthetic".into(),
            image_side: 16,
            codec: CodecSpec::Identity,
            codec_epochs: 60,
            t_max: 200,
            beta_start: 1e-4,
            beta_end: 2e-2,
            lr: 1e-3,
            batch: 8,
            iterations: 2000,
            ema_decay: 0.99,
            seed: 7,
            vlb_weight: 0.001,
            checkpoint_every: 500,
            sample_steps: 50,
            out_dir: "runs/desk".into(),
        }
    }

    pub fn by_profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::default()),
            "desk" => Ok(Self::desk_profile()),
            other => Err(Error::Config(format!(
                "unknown profile '{other}' (paper | desk)"
            ))),
        }
    }

    /// Model geometry implied by the codec and image side.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let (latent_side, latent_channels) = self.codec.latent_geometry(self.image_side)?;
        Ok(ModelConfig::by_name(&self.model_name)?
            .with_patch(self.patch)
            .with_geometry(latent_side, latent_channels))
    }

    /// Full consistency check; runs before any output is written.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        if self.batch == 0 || self.iterations == 0 {
            return Err(Error::Config("batch and iterations must be positive".into()));
        }
        if self.sample_steps == 0 {
            return Err(Error::Config("sample steps must be positive".into()));
        }
        ScheduleSpec {
            t_max: self.t_max,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
        .build()?;
        Ok(())
    }

    pub fn to_setup(&self) -> Result<TrainSetup> {
        Ok(TrainSetup {
            model: self.model_config()?,
            schedule: ScheduleSpec {
                t_max: self.t_max,
                beta_start: self.beta_start,
                beta_end: self.beta_end,
            },
            codec: self.codec,
            optimizer: AdamW::with_lr(self.lr),
            batch: self.batch,
            vlb_weight: self.vlb_weight,
            ema_decay: self.ema_decay,
            sample_steps: self.sample_steps,
            seed: self.seed,
        })
    }

    /// Serializes to the config file format.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "name = {}", self.model_name);
        let _ = writeln!(s, "patch = {}", self.patch);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "root = {}", self.data_root.display());
        let _ = writeln!(s, "image_side = {}", self.image_side);
        let _ = writeln!(s, "codec = {}", self.codec);
        let _ = writeln!(s, "codec_epochs = {}", self.codec_epochs);
        let _ = writeln!(s, "\n[schedule]");
        let _ = writeln!(s, "t_max = {}", self.t_max);
        let _ = writeln!(s, "beta_start = {:?}", self.beta_start);
        let _ = writeln!(s, "beta_end = {:?}", self.beta_end);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "ema_decay = {:?}", self.ema_decay);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "vlb_weight = {:?}", self.vlb_weight);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "\n[sample]");
        let _ = writeln!(s, "steps = {}", self.sample_steps);
        let _ = writeln!(s, "\n[out]");
        let _ = writeln!(s, "dir = {}", self.out_dir.display());
        s
    }

    /// Parses the config file format. Every key must be known; values
    /// overwrite the paper-recipe defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Parse(format!("line {}: unclosed section", lineno + 1)))?;
                if !["model", "data", "schedule", "train", "sample", "out"].contains(&name) {
                    return Err(Error::Parse(format!(
                        "line {}: unknown section [{name}]",
                        lineno + 1
                    )));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let bad_key = || {
                Error::Parse(format!(
                    "line {}: unknown key '{key}' in section [{section}]",
                    lineno + 1
                ))
            };
            let parse_err =
                |what: &str| Error::Parse(format!("line {}: bad {what} '{value}'", lineno + 1));
            match (section.as_str(), key) {
                ("model", "name") => cfg.model_name = value.to_string(),
                ("model", "patch") => cfg.patch = value.parse().map_err(|_| parse_err("patch"))?,
                ("data", "root") => cfg.data_root = value.into(),
                ("data", "image_side") => {
                    cfg.image_side = value.parse().map_err(|_| parse_err("image side"))?
                }
                ("data", "codec") => cfg.codec = CodecSpec::parse(value)?,
                ("data", "codec_epochs") => {
                    cfg.codec_epochs = value.parse().map_err(|_| parse_err("codec epochs"))?
                }
                ("schedule", "t_max") => cfg.t_max = value.parse().map_err(|_| parse_err("t_max"))?,
                ("schedule", "beta_start") => {
                    cfg.beta_start = value.parse().map_err(|_| parse_err("beta_start"))?
                }
                ("schedule", "beta_end") => {
                    cfg.beta_end = value.parse().map_err(|_| parse_err("beta_end"))?
                }
                ("train", "lr") => cfg.lr = value.parse().map_err(|_| parse_err("lr"))?,
                ("train", "batch") => cfg.batch = value.parse().map_err(|_| parse_err("batch"))?,
                ("train", "iterations") => {
                    cfg.iterations = value.parse().map_err(|_| parse_err("iterations"))?
                }
                ("train", "ema_decay") => {
                    cfg.ema_decay = value.parse().map_err(|_| parse_err("ema_decay"))?
                }
                ("train", "seed") => cfg.seed = value.parse().map_err(|_| parse_err("seed"))?,
                ("train", "vlb_weight") => {
                    cfg.vlb_weight = value.parse().map_err(|_| parse_err("vlb_weight"))?
                }
                ("train", "checkpoint_every") => {
                    cfg.checkpoint_every = value.parse().map_err(|_| parse_err("checkpoint_every"))?
                }
                ("sample", "steps") => {
                    cfg.sample_steps = value.parse().map_err(|_| parse_err("steps"))?
                }
                ("out", "dir") => cfg.out_dir = value.into(),
                _ => return Err(bad_key()),
            }
        }
        Ok(cfg)
    }
}

/// Parses a model spec like `tiny/2`, `S/4`, or a custom `n4d256h4/2`
/// (layers, hidden, heads). The part after `/` is the patch size.
pub fn parse_model_spec(s: &str) -> Result<(String, ModelConfig)> {
    let (name, patch) = s
        .split_once('/')
        .ok_or_else(|| Error::Config(format!("model spec '{s}' needs the form name/patch")))?;
    let patch: usize = patch
        .parse()
        .map_err(|_| Error::Config(format!("bad patch in model spec '{s}'")))?;
    let cfg = if let Some(rest) = name.strip_prefix('n') {
        if let Some((layers, rest)) = rest.split_once('d') {
            if let Some((hidden, heads)) = rest.split_once('h') {
                let parse = |v: &str, what: &str| -> Result<usize> {
                    v.parse()
                        .map_err(|_| Error::Config(format!("bad {what} in model spec '{s}'")))
                };
                ModelConfig::new(
                    parse(layers, "layer count")?,
                    parse(hidden, "hidden width")?,
                    parse(heads, "head count")?,
                )
            } else {
                ModelConfig::by_name(name)?
            }
        } else {
            ModelConfig::by_name(name)?
        }
    } else {
        ModelConfig::by_name(name)?
    };
    Ok((s.to_string(), cfg.with_patch(patch)))
}
