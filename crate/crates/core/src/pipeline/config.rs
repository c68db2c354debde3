//! Run configuration in a flat `section.key = value` text format.
//!
//! Blank lines and `#` comments are ignored. `avbert.preset` and
//! `asr.preset` (`toy` or `full`) are applied before every other key, so
//! explicit fields override the preset regardless of line order. Relative
//! paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::asr::{ConformerConfig, SpecAugmentPolicy};
use crate::avbert::AvBertConfig;
use crate::error::{Error, Result};
use crate::tensor::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Tokenize,
    TrainAsr,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Tokenize => "tokenize",
            Stage::TrainAsr => "train_asr",
            Stage::Eval => "eval",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "tokenize" => Ok(Stage::Tokenize),
            "train_asr" | "train-asr" => Ok(Stage::TrainAsr),
            "eval" => Ok(Stage::Eval),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    /// Corpus directory holding `manifest.tsv`.
    pub data: PathBuf,
    /// Held-out corpus; the training corpus is used when absent.
    pub eval_data: Option<PathBuf>,
    /// Whitener, codebooks, token file and the environment cache.
    pub work: PathBuf,
    pub checkpoints: PathBuf,
    /// AV-BERT checkpoint feeding the fusion model.
    pub avbert: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenizeConfig {
    pub audio_k: usize,
    pub video_k: usize,
    pub max_iters: usize,
    pub max_vectors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub log_every: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Evaluations without improvement before training stops; 0 disables.
    pub patience: usize,
    pub stop_at_zero_wer: bool,
    pub optimizer: Adam,
    pub avbert: AvBertConfig,
    pub conformer: ConformerConfig,
    pub specaugment: SpecAugmentPolicy,
    /// SpecAugment during ASR training.
    pub augment: bool,
    pub tokenize: TokenizeConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Toy-scale defaults for a corpus at `data`.
    pub fn toy(data: impl Into<PathBuf>) -> Self {
        let avbert = AvBertConfig::toy();
        Self {
            stage: Stage::Pretrain,
            seed: 0,
            batch_size: 8,
            max_steps: 2000,
            log_every: 1,
            eval_every: 100,
            checkpoint_every: 1000,
            patience: 10,
            stop_at_zero_wer: false,
            optimizer: Adam::default(),
            tokenize: TokenizeConfig {
                audio_k: avbert.audio_vocab,
                video_k: avbert.video_vocab,
                max_iters: 50,
                max_vectors: crate::vq::MAX_TRAINING_VECTORS,
            },
            conformer: ConformerConfig {
                env_dim: avbert.model_dim,
                ..ConformerConfig::toy()
            },
            avbert,
            specaugment: SpecAugmentPolicy::default(),
            augment: true,
            paths: Paths {
                data: data.into(),
                eval_data: None,
                work: PathBuf::from("work"),
                checkpoints: PathBuf::from("checkpoints"),
                avbert: None,
                resume: None,
                log: None,
            },
        }
    }

    /// Serializes every field; [`load_config`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.avbert;
        let s = &a.schedule;
        let c = &self.conformer;
        let t = &self.tokenize;
        let sa = &self.specaugment;
        let p = &self.paths;
        let path = |p: &Path| p.display().to_string();
        let mut e = vec![
            ("run.stage", self.stage.to_string()),
            ("run.seed", self.seed.to_string()),
            ("run.batch_size", self.batch_size.to_string()),
            ("run.max_steps", self.max_steps.to_string()),
            ("run.log_every", self.log_every.to_string()),
            ("run.eval_every", self.eval_every.to_string()),
            ("run.checkpoint_every", self.checkpoint_every.to_string()),
            ("run.patience", self.patience.to_string()),
            ("run.stop_at_zero_wer", self.stop_at_zero_wer.to_string()),
            ("optim.lr", self.optimizer.lr.to_string()),
            ("optim.beta1", self.optimizer.beta1.to_string()),
            ("optim.beta2", self.optimizer.beta2.to_string()),
            ("optim.eps", self.optimizer.eps.to_string()),
            ("avbert.model_dim", a.model_dim.to_string()),
            ("avbert.num_blocks", a.num_blocks.to_string()),
            ("avbert.heads", a.heads.to_string()),
            ("avbert.ff_dim", a.ff_dim.to_string()),
            ("avbert.max_audio_positions", a.max_audio_positions.to_string()),
            ("avbert.max_video_steps", a.max_video_steps.to_string()),
            ("avbert.max_video_spatial", a.max_video_spatial.to_string()),
            ("mask.p_init", s.p_init.to_string()),
            ("mask.p_final", s.p_final.to_string()),
            ("mask.width_init", s.width_init.to_string()),
            ("mask.width_final", s.width_final.to_string()),
            ("mask.width_step", s.width_step.to_string()),
            ("mask.stage_steps", s.stage_steps.to_string()),
            ("mask.ramp_rate", s.ramp_rate.to_string()),
            ("tokenize.audio_k", t.audio_k.to_string()),
            ("tokenize.video_k", t.video_k.to_string()),
            ("tokenize.max_iters", t.max_iters.to_string()),
            ("tokenize.max_vectors", t.max_vectors.to_string()),
            ("asr.fusion_mode", c.fusion_mode.to_string()),
            ("asr.model_dim", c.model_dim.to_string()),
            ("asr.num_blocks", c.num_blocks.to_string()),
            ("asr.heads", c.heads.to_string()),
            ("asr.ff_dim", c.ff_dim.to_string()),
            ("asr.conv_kernel", c.conv_kernel.to_string()),
            ("asr.vocab", c.vocab.to_string()),
            ("asr.pred_dim", c.pred_dim.to_string()),
            ("asr.joint_dim", c.joint_dim.to_string()),
            ("specaugment.enabled", self.augment.to_string()),
            ("specaugment.freq_masks", sa.freq_masks.to_string()),
            ("specaugment.freq_width", sa.freq_width.to_string()),
            ("specaugment.time_masks", sa.time_masks.to_string()),
            ("specaugment.time_width", sa.time_width.to_string()),
            ("paths.data", path(&p.data)),
            ("paths.work", path(&p.work)),
            ("paths.checkpoints", path(&p.checkpoints)),
        ];
        for (k, v) in [
            ("paths.eval_data", &p.eval_data),
            ("paths.avbert", &p.avbert),
            ("paths.resume", &p.resume),
            ("paths.log", &p.log),
        ] {
            if let Some(v) = v {
                e.push((k, path(v)));
            }
        }
        e
    }

    fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}`: invalid value `{v}`")))
        }
        let positive = |v: &str| -> Result<usize> {
            let n: i64 = num(key, v)?;
            if n <= 0 {
                return Err(Error::Config(format!("`{key}` must be positive, got {n}")));
            }
            Ok(n as usize)
        };
        let path = |v: &str| base.join(v);
        match key {
            "run.stage" => self.stage = value.parse()?,
            "run.seed" => self.seed = num(key, value)?,
            "run.batch_size" => self.batch_size = positive(value)?,
            "run.max_steps" => self.max_steps = num(key, value)?,
            "run.log_every" => self.log_every = positive(value)? as u64,
            "run.eval_every" => self.eval_every = num(key, value)?,
            "run.checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "run.patience" => self.patience = num(key, value)?,
            "run.stop_at_zero_wer" => self.stop_at_zero_wer = num(key, value)?,
            "optim.lr" => self.optimizer.lr = num(key, value)?,
            "optim.beta1" => self.optimizer.beta1 = num(key, value)?,
            "optim.beta2" => self.optimizer.beta2 = num(key, value)?,
            "optim.eps" => self.optimizer.eps = num(key, value)?,
            "avbert.model_dim" => self.avbert.model_dim = positive(value)?,
            "avbert.num_blocks" => self.avbert.num_blocks = num(key, value)?,
            "avbert.heads" => self.avbert.heads = positive(value)?,
            "avbert.ff_dim" => self.avbert.ff_dim = positive(value)?,
            "avbert.max_audio_positions" => self.avbert.max_audio_positions = positive(value)?,
            "avbert.max_video_steps" => self.avbert.max_video_steps = positive(value)?,
            "avbert.max_video_spatial" => self.avbert.max_video_spatial = positive(value)?,
            "mask.p_init" => self.avbert.schedule.p_init = num(key, value)?,
            "mask.p_final" => self.avbert.schedule.p_final = num(key, value)?,
            "mask.width_init" => self.avbert.schedule.width_init = num(key, value)?,
            "mask.width_final" => self.avbert.schedule.width_final = num(key, value)?,
            "mask.width_step" => self.avbert.schedule.width_step = num(key, value)?,
            "mask.stage_steps" => self.avbert.schedule.stage_steps = num(key, value)?,
            "mask.ramp_rate" => self.avbert.schedule.ramp_rate = num(key, value)?,
            "tokenize.audio_k" => self.tokenize.audio_k = positive(value)?,
            "tokenize.video_k" => self.tokenize.video_k = positive(value)?,
            "tokenize.max_iters" => self.tokenize.max_iters = positive(value)?,
            "tokenize.max_vectors" => self.tokenize.max_vectors = positive(value)?,
            "asr.fusion_mode" => {
                self.conformer.fusion_mode = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "asr.model_dim" => self.conformer.model_dim = positive(value)?,
            "asr.num_blocks" => self.conformer.num_blocks = num(key, value)?,
            "asr.heads" => self.conformer.heads = positive(value)?,
            "asr.ff_dim" => self.conformer.ff_dim = positive(value)?,
            "asr.conv_kernel" => self.conformer.conv_kernel = positive(value)?,
            "asr.vocab" => self.conformer.vocab = positive(value)?,
            "asr.pred_dim" => self.conformer.pred_dim = positive(value)?,
            "asr.joint_dim" => self.conformer.joint_dim = positive(value)?,
            "specaugment.enabled" => self.augment = num(key, value)?,
            "specaugment.freq_masks" => self.specaugment.freq_masks = num(key, value)?,
            "specaugment.freq_width" => self.specaugment.freq_width = num(key, value)?,
            "specaugment.time_masks" => self.specaugment.time_masks = num(key, value)?,
            "specaugment.time_width" => self.specaugment.time_width = num(key, value)?,
            "paths.data" => self.paths.data = path(value),
            "paths.eval_data" => self.paths.eval_data = Some(path(value)),
            "paths.work" => self.paths.work = path(value),
            "paths.checkpoints" => self.paths.checkpoints = path(value),
            "paths.avbert" => self.paths.avbert = Some(path(value)),
            "paths.resume" => self.paths.resume = Some(path(value)),
            "paths.log" => self.paths.log = Some(path(value)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Checks value ranges and that every input path of `self.stage` exists.
    pub fn validate(&self) -> Result<()> {
        let bad = |e: Error| Error::Config(e.to_string());
        self.avbert.validate().map_err(bad)?;
        self.conformer.validate().map_err(bad)?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("optimizer needs lr > 0, betas in [0, 1) and eps > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("`run.batch_size` must be positive".into()));
        }
        if self.conformer.env_dim != self.avbert.model_dim {
            return Err(Error::Config("conformer env_dim must equal the AV-BERT width".into()));
        }
        let mut inputs = vec![&self.paths.data];
        inputs.extend(&self.paths.eval_data);
        inputs.extend(&self.paths.resume);
        if matches!(self.stage, Stage::TrainAsr | Stage::Eval) {
            inputs.extend(&self.paths.avbert);
        }
        if let Some(p) = inputs.into_iter().find(|p| !p.exists()) {
            return Err(Error::Config(format!("path {} does not exist", p.display())));
        }
        Ok(())
    }
}

/// Parses `text`; relative paths are joined onto `base`. Does not validate.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig> {
    let mut pairs = BTreeMap::new();
    let mut order = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if pairs.insert(k.clone(), v).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
        order.push(k);
    }
    let data = pairs
        .get("paths.data")
        .ok_or_else(|| Error::Config("missing `paths.data`".into()))?;
    let mut cfg = RunConfig::toy(base.join(data));
    cfg.paths.work = base.join(&cfg.paths.work);
    cfg.paths.checkpoints = base.join(&cfg.paths.checkpoints);
    if let Some(p) = pairs.get("avbert.preset") {
        cfg.avbert = preset(p, AvBertConfig::toy, AvBertConfig::full)?;
        cfg.tokenize.audio_k = cfg.avbert.audio_vocab;
        cfg.tokenize.video_k = cfg.avbert.video_vocab;
    }
    if let Some(p) = pairs.get("asr.preset") {
        cfg.conformer = preset(p, ConformerConfig::toy, ConformerConfig::full)?;
    }
    for k in &order {
        if k != "avbert.preset" && k != "asr.preset" {
            cfg.set(k, &pairs[k], base)?;
        }
    }
    cfg.avbert.audio_vocab = cfg.tokenize.audio_k;
    cfg.avbert.video_vocab = cfg.tokenize.video_k;
    cfg.conformer.env_dim = cfg.avbert.model_dim;
    Ok(cfg)
}

fn preset<T>(name: &str, toy: fn() -> T, full: fn() -> T) -> Result<T> {
    match name {
        "toy" => Ok(toy()),
        "full" => Ok(full()),
        other => Err(Error::Config(format!("unknown preset `{other}`"))),
    }
}

/// Reads, parses and validates a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = read(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Like [`load_config`] with the stage replaced before validation.
pub fn load_config_for(path: &Path, stage: Stage) -> Result<RunConfig> {
    let mut cfg = read(path)?;
    cfg.stage = stage;
    cfg.validate()?;
    Ok(cfg)
}

fn read(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_config(&text, base)
}
