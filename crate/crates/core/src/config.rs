//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be a
//! field of the target config; unknown and repeated keys are errors.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_KS;
use crate::model::{ModelDims, Pooling};
use crate::objective::{LossConfig, LossKind, DEFAULT_OMEGA, DEFAULT_TAU};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut entries: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
            line,
            message: format!("expected `key = value`, got '{trimmed}'"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                line,
                message: "missing key".into(),
            });
        }
        if let Some(prev) = entries.iter().find(|e| e.key == key) {
            return Err(Error::Parse {
                line,
                message: format!("key '{key}' already set on line {}", prev.line),
            });
        }
        entries.push(Entry {
            line,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(entries)
}

fn parse<T: FromStr>(e: &Entry) -> Result<T>
where
    T::Err: fmt::Display,
{
    e.value.parse().map_err(|err| Error::Parse {
        line: e.line,
        message: format!("invalid value '{}' for {}: {err}", e.value, e.key),
    })
}

fn parse_list(e: &Entry) -> Result<Vec<usize>> {
    e.value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|err| Error::Parse {
                line: e.line,
                message: format!("invalid list item '{s}' for {}: {err}", e.key),
            })
        })
        .collect()
}

fn unknown(e: &Entry) -> Error {
    Error::Config(format!("unknown key '{}' on line {}", e.key, e.line))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!(
                "unknown optimizer '{other}' (expected sgd or adam)"
            ))),
        }
    }
}

/// Floating-point width used for training arithmetic. Only double precision
/// is implemented.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("f64")
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" | "double" => Ok(Precision::F64),
            "f32" | "single" => Err(Error::Config(
                "single precision training is not supported; use f64".into(),
            )),
            other => Err(Error::Config(format!("unknown precision '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub pooling: Pooling,
    pub loss: LossKind,
    pub tau: f64,
    pub omega: f64,
    pub stop_gradient_prior: bool,
    /// Embedding width `D`.
    pub dim: usize,
    /// Attention projection width `D_p`.
    pub proj_dim: usize,
    /// Hidden width of the text and audio encoders.
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Where the CLI writes the selected checkpoint when `--out` is absent.
    pub checkpoint: Option<PathBuf>,
    pub eval_ks: Vec<usize>,
    /// Threads for evaluation tiles. Training always runs on one thread.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pooling: Pooling::Tap,
            loss: LossKind::NtXent,
            tau: DEFAULT_TAU,
            omega: DEFAULT_OMEGA,
            stop_gradient_prior: false,
            dim: 64,
            proj_dim: 64,
            hidden_dim: 64,
            batch_size: 32,
            epochs: 30,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            precision: Precision::F64,
            checkpoint: None,
            eval_ks: DEFAULT_KS.to_vec(),
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Defaults overridden by the entries in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in parse_entries(text)? {
            match e.key.as_str() {
                "pooling" => cfg.pooling = parse(&e)?,
                "loss" => cfg.loss = parse(&e)?,
                "tau" => cfg.tau = parse(&e)?,
                "omega" => cfg.omega = parse(&e)?,
                "stop_gradient_prior" => cfg.stop_gradient_prior = parse(&e)?,
                "dim" => cfg.dim = parse(&e)?,
                "proj_dim" => cfg.proj_dim = parse(&e)?,
                "hidden_dim" => cfg.hidden_dim = parse(&e)?,
                "batch_size" => cfg.batch_size = parse(&e)?,
                "epochs" => cfg.epochs = parse(&e)?,
                "optimizer" => cfg.optimizer = parse(&e)?,
                "lr" => cfg.lr = parse(&e)?,
                "beta1" => cfg.beta1 = parse(&e)?,
                "beta2" => cfg.beta2 = parse(&e)?,
                "eps" => cfg.eps = parse(&e)?,
                "weight_decay" => cfg.weight_decay = parse(&e)?,
                "seed" => cfg.seed = parse(&e)?,
                "precision" => cfg.precision = parse(&e)?,
                "checkpoint" => {
                    cfg.checkpoint = (!e.value.is_empty()).then(|| PathBuf::from(&e.value));
                }
                "eval_ks" => cfg.eval_ks = parse_list(&e)?,
                "workers" => cfg.workers = parse(&e)?,
                _ => return Err(unknown(&e)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serialises every field; `parse(to_text())` reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pooling = {}", self.pooling);
        let _ = writeln!(s, "loss = {}", self.loss);
        let _ = writeln!(s, "tau = {:?}", self.tau);
        let _ = writeln!(s, "omega = {:?}", self.omega);
        let _ = writeln!(s, "stop_gradient_prior = {}", self.stop_gradient_prior);
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "proj_dim = {}", self.proj_dim);
        let _ = writeln!(s, "hidden_dim = {}", self.hidden_dim);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "optimizer = {}", self.optimizer);
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "beta1 = {:?}", self.beta1);
        let _ = writeln!(s, "beta2 = {:?}", self.beta2);
        let _ = writeln!(s, "eps = {:?}", self.eps);
        let _ = writeln!(s, "weight_decay = {:?}", self.weight_decay);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "precision = {}", self.precision);
        let _ = writeln!(
            s,
            "checkpoint = {}",
            self.checkpoint
                .as_deref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        let ks: Vec<String> = self.eval_ks.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(s, "eval_ks = {}", ks.join(","));
        let _ = writeln!(s, "workers = {}", self.workers);
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 for contrastive training, got {}",
                self.batch_size
            )));
        }
        for (name, v) in [
            ("dim", self.dim),
            ("proj_dim", self.proj_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be finite and > 0, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::Config(
                "eval_ks must be a non-empty list of positive integers".into(),
            ));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            omega: self.omega,
            stop_gradient_prior: self.stop_gradient_prior,
        }
    }

    pub fn model_dims(&self, input_dim: usize) -> ModelDims {
        ModelDims {
            input_dim,
            hidden_dim: self.hidden_dim,
            dim: self.dim,
            proj_dim: self.proj_dim,
        }
    }
}

impl SynthConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for e in parse_entries(text)? {
            match e.key.as_str() {
                "num_events" => cfg.num_events = parse(&e)?,
                "feature_dim" => cfg.feature_dim = parse(&e)?,
                "frames_per_clip" => cfg.frames_per_clip = parse(&e)?,
                "relevant_fraction" => cfg.relevant_fraction = parse(&e)?,
                "events_per_sample" => cfg.events_per_sample = parse(&e)?,
                "distractor_events" => cfg.distractor_events = parse(&e)?,
                "noise_sigma" => cfg.noise_sigma = parse(&e)?,
                "num_train" => cfg.num_train = parse(&e)?,
                "num_val" => cfg.num_val = parse(&e)?,
                "num_test" => cfg.num_test = parse(&e)?,
                "train_captions_per_audio" => cfg.train_captions_per_audio = parse(&e)?,
                "eval_captions_per_audio" => cfg.eval_captions_per_audio = parse(&e)?,
                "seed" => cfg.seed = parse(&e)?,
                _ => return Err(unknown(&e)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = TrainConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.eval_ks, vec![1, 5, 10]);
        assert_eq!((cfg.dim, cfg.proj_dim, cfg.batch_size), (64, 64, 32));
        assert_eq!(cfg.optimizer, OptimizerKind::Adam);
        assert_eq!(
            (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay),
            (1e-3, 0.9, 0.999, 1e-8, 0.0)
        );
    }

    #[test]
    fn overrides_and_round_trip() {
        let text = "pooling = mean\nloss=pmr\n tau = 0.1 \nomega = 2.5\nstop_gradient_prior = true\n\
                    eval_ks = 1, 2\ncheckpoint = out/model.ckpt\nlr = 0.000123456789\n";
        let cfg = TrainConfig::parse(text).unwrap();
        assert_eq!(cfg.pooling, Pooling::Mean);
        assert_eq!(cfg.loss, LossKind::Pmr);
        assert_eq!(cfg.tau, 0.1);
        assert!(cfg.stop_gradient_prior);
        assert_eq!(cfg.eval_ks, vec![1, 2]);
        assert_eq!(cfg.checkpoint.as_deref(), Some(Path::new("out/model.ckpt")));
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(
            TrainConfig::parse(&TrainConfig::default().to_text()).unwrap(),
            TrainConfig::default()
        );
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = TrainConfig::parse("pooling = tap\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("learning_rate") && m.contains("line 2")));
        assert!(matches!(SynthConfig::parse("frames = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(
            TrainConfig::parse("tau 0.1"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            TrainConfig::parse("tau = abc"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            TrainConfig::parse("tau = 1\ntau = 2"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            TrainConfig::parse("pooling = attention"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn invariants_enforced() {
        assert!(TrainConfig::parse("batch_size = 1").is_err());
        assert!(TrainConfig::parse("tau = 0").is_err());
        assert!(TrainConfig::parse("eval_ks = 0,1").is_err());
        assert!(TrainConfig::parse("precision = f32").is_err());
        assert!(TrainConfig::parse("beta1 = 1.0").is_err());
    }

    #[test]
    fn synth_overrides() {
        let cfg = SynthConfig::parse("num_train = 10\nnoise_sigma = 0\nseed = 7").unwrap();
        assert_eq!((cfg.num_train, cfg.noise_sigma, cfg.seed), (10, 0.0, 7));
        assert_eq!(cfg.frames_per_clip, 20);
    }
}
