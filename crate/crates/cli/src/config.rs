//! Flat key-value run configuration (`section.key=value`, `#` comments).
//!
//! Every field has a default; unknown keys and out-of-range values are
//! rejected with the offending key named. The effective configuration is
//! snapshotted into the run manifest as a sorted key-value map, so two
//! manifests diff cleanly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use scanmix_core::datagen::AugmentationPolicy;
use scanmix_core::pretrain::ContrastiveConfig;
use scanmix_core::trainer::{Seeds, TrainConfig, TrainMode};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataKind {
    Blobs,
    Rings,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NoiseKindOpt {
    None,
    Symmetric,
    Asymmetric,
    Semantic,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub data_kind: DataKind,
    pub data_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub radius_step: f64,
    pub ring_sigma: f64,
    pub test_per_class: usize,

    pub noise_kind: NoiseKindOpt,
    pub noise_rate: f64,
    pub noise_pairs: Vec<(usize, usize)>,

    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub embedding_dim: usize,

    pub augment_sigma: f64,
    pub jitter_lo: f64,
    pub jitter_hi: f64,
    pub flip_axes: Vec<usize>,

    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub temperature: f64,
    pub pretrain_lr: f64,

    pub mode: TrainMode,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub tau: f64,
    pub k: usize,
    pub batch_size: usize,
    pub scan_batch_size: usize,
    pub class_lr: f64,
    pub lr_high: f64,
    pub lr_low: f64,
    pub noise_rate_gate: f64,
    pub lambda_u_high: f64,
    pub lambda_u_low: f64,
    pub lambda_r: f64,
    pub lambda_e: f64,
    pub alpha: f64,
    pub sharpen_t: f64,
    pub num_augments: usize,
    pub checkpoint_every: usize,

    pub seeds: Seeds,

    pub out_dir: PathBuf,
    pub dump_divider: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::new(TrainMode::ScanMix);
        RunConfig {
            data_kind: DataKind::Blobs,
            data_path: None,
            test_path: None,
            classes: 4,
            per_class: 500,
            dim: 2,
            spread: 0.5,
            radius_step: 1.0,
            ring_sigma: 0.05,
            test_per_class: 250,
            noise_kind: NoiseKindOpt::None,
            noise_rate: 0.0,
            noise_pairs: Vec::new(),
            hidden_dims: t.hidden_dims.clone(),
            feature_dim: t.feature_dim,
            embedding_dim: t.embedding_dim,
            augment_sigma: t.policy.additive_noise_sigma,
            jitter_lo: t.policy.scale_jitter.0,
            jitter_hi: t.policy.scale_jitter.1,
            flip_axes: Vec::new(),
            pretrain_epochs: t.pretrain.epochs,
            pretrain_batch_size: t.pretrain.batch_size,
            temperature: t.pretrain.temperature,
            pretrain_lr: t.pretrain.lr,
            mode: TrainMode::ScanMix,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            tau: t.tau,
            k: t.k,
            batch_size: t.batch_size,
            scan_batch_size: t.scan_batch_size,
            class_lr: t.class_lr,
            lr_high: t.lr_high,
            lr_low: t.lr_low,
            noise_rate_gate: t.noise_rate_gate,
            lambda_u_high: t.lambda_u_high,
            lambda_u_low: t.lambda_u_low,
            lambda_r: t.lambda_r,
            lambda_e: t.lambda_e,
            alpha: t.alpha,
            sharpen_t: t.sharpen_t,
            num_augments: t.num_augments,
            checkpoint_every: 0,
            seeds: Seeds {
                data: 1,
                model: 2,
                training: 3,
            },
            out_dir: PathBuf::from("run_out"),
            dump_divider: false,
        }
    }
}

fn invalid(key: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("config key `{key}`: {message}"))
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse::<T>()
        .map_err(|_| invalid(key, format!("cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|f| {
            f.trim()
                .parse::<T>()
                .map_err(|_| invalid(key, format!("cannot parse list item `{f}`")))
        })
        .collect()
}

fn parse_pairs(key: &str, value: &str) -> Result<Vec<(usize, usize)>, CliError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|pair| {
            let mut it = pair.split(':');
            let from = it
                .next()
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| invalid(key, format!("bad pair `{pair}`")))?;
            let to = it
                .next()
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| invalid(key, format!("bad pair `{pair}`")))?;
            if it.next().is_some() {
                return Err(invalid(key, format!("bad pair `{pair}`")));
            }
            Ok((from, to))
        })
        .collect()
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Runtime(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Validation(format!(
                    "config line {}: expected `key=value`, found `{line}`",
                    lineno + 1
                )));
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "data.kind" => {
                self.data_kind = match value {
                    "blobs" => DataKind::Blobs,
                    "rings" => DataKind::Rings,
                    "csv" => DataKind::Csv,
                    other => return Err(invalid(key, format!("unknown kind `{other}`"))),
                }
            }
            "data.path" => self.data_path = Some(PathBuf::from(value)),
            "data.test_path" => self.test_path = Some(PathBuf::from(value)),
            "data.classes" => self.classes = parse_as(key, value)?,
            "data.per_class" => self.per_class = parse_as(key, value)?,
            "data.dim" => self.dim = parse_as(key, value)?,
            "data.spread" => self.spread = parse_as(key, value)?,
            "data.radius_step" => self.radius_step = parse_as(key, value)?,
            "data.noise_sigma" => self.ring_sigma = parse_as(key, value)?,
            "data.test_per_class" => self.test_per_class = parse_as(key, value)?,
            "noise.kind" => {
                self.noise_kind = match value {
                    "none" => NoiseKindOpt::None,
                    "symmetric" => NoiseKindOpt::Symmetric,
                    "asymmetric" => NoiseKindOpt::Asymmetric,
                    "semantic" => NoiseKindOpt::Semantic,
                    other => return Err(invalid(key, format!("unknown kind `{other}`"))),
                }
            }
            "noise.rate" => self.noise_rate = parse_as(key, value)?,
            "noise.pairs" => self.noise_pairs = parse_pairs(key, value)?,
            "model.hidden_dims" => self.hidden_dims = parse_list(key, value)?,
            "model.feature_dim" => self.feature_dim = parse_as(key, value)?,
            "model.embedding_dim" => self.embedding_dim = parse_as(key, value)?,
            "augment.sigma" => self.augment_sigma = parse_as(key, value)?,
            "augment.jitter_lo" => self.jitter_lo = parse_as(key, value)?,
            "augment.jitter_hi" => self.jitter_hi = parse_as(key, value)?,
            "augment.flip_axes" => self.flip_axes = parse_list(key, value)?,
            "pretrain.epochs" => self.pretrain_epochs = parse_as(key, value)?,
            "pretrain.batch_size" => self.pretrain_batch_size = parse_as(key, value)?,
            "pretrain.temperature" => self.temperature = parse_as(key, value)?,
            "pretrain.lr" => self.pretrain_lr = parse_as(key, value)?,
            "train.mode" => {
                self.mode = value
                    .parse()
                    .map_err(|e: String| invalid(key, e))?
            }
            "train.epochs" => self.epochs = parse_as(key, value)?,
            "train.warmup_epochs" => self.warmup_epochs = parse_as(key, value)?,
            "train.tau" => self.tau = parse_as(key, value)?,
            "train.k" => self.k = parse_as(key, value)?,
            "train.batch_size" => self.batch_size = parse_as(key, value)?,
            "train.scan_batch_size" => self.scan_batch_size = parse_as(key, value)?,
            "train.class_lr" => self.class_lr = parse_as(key, value)?,
            "train.lr_high" => self.lr_high = parse_as(key, value)?,
            "train.lr_low" => self.lr_low = parse_as(key, value)?,
            "train.noise_rate_gate" => self.noise_rate_gate = parse_as(key, value)?,
            "train.lambda_u_high" => self.lambda_u_high = parse_as(key, value)?,
            "train.lambda_u_low" => self.lambda_u_low = parse_as(key, value)?,
            "train.lambda_r" => self.lambda_r = parse_as(key, value)?,
            "train.lambda_e" => self.lambda_e = parse_as(key, value)?,
            "train.alpha" => self.alpha = parse_as(key, value)?,
            "train.sharpen_t" => self.sharpen_t = parse_as(key, value)?,
            "train.num_augments" => self.num_augments = parse_as(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_as(key, value)?,
            "seeds.data" => self.seeds.data = parse_as(key, value)?,
            "seeds.model" => self.seeds.model = parse_as(key, value)?,
            "seeds.training" => self.seeds.training = parse_as(key, value)?,
            "out.dir" => self.out_dir = PathBuf::from(value),
            "out.dump_divider" => {
                self.dump_divider = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    other => return Err(invalid(key, format!("expected bool, found `{other}`"))),
                }
            }
            other => {
                return Err(CliError::Validation(format!(
                    "unknown config key `{other}`"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.classes < 2 {
            return Err(invalid("data.classes", "must be >= 2"));
        }
        if self.per_class == 0 {
            return Err(invalid("data.per_class", "must be >= 1"));
        }
        if self.dim == 0 {
            return Err(invalid("data.dim", "must be >= 1"));
        }
        if !(self.spread > 0.0) {
            return Err(invalid("data.spread", "must be > 0"));
        }
        if !(self.radius_step > 0.0) {
            return Err(invalid("data.radius_step", "must be > 0"));
        }
        if self.ring_sigma < 0.0 {
            return Err(invalid("data.noise_sigma", "must be >= 0"));
        }
        if self.data_kind == DataKind::Csv && self.data_path.is_none() {
            return Err(invalid("data.path", "required when data.kind=csv"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(invalid("noise.rate", "must be within [0,1]"));
        }
        if self.noise_kind == NoiseKindOpt::Asymmetric && self.noise_pairs.is_empty() {
            return Err(invalid("noise.pairs", "required for asymmetric noise"));
        }
        for &(from, to) in &self.noise_pairs {
            if from == to {
                return Err(invalid("noise.pairs", format!("pair {from}:{to} maps to itself")));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(invalid("train.tau", "must be within (0,1)"));
        }
        if !(self.noise_rate_gate > 0.0 && self.noise_rate_gate < 1.0) {
            return Err(invalid("train.noise_rate_gate", "must be within (0,1)"));
        }
        if self.epochs < self.warmup_epochs {
            return Err(invalid("train.epochs", "must be >= train.warmup_epochs"));
        }
        if self.k == 0 {
            return Err(invalid("train.k", "must be >= 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(invalid("train.alpha", "must be > 0"));
        }
        if !(self.sharpen_t > 0.0) {
            return Err(invalid("train.sharpen_t", "must be > 0"));
        }
        if self.num_augments == 0 {
            return Err(invalid("train.num_augments", "must be >= 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("pretrain.temperature", "must be > 0"));
        }
        if self.pretrain_batch_size < 2 {
            return Err(invalid("pretrain.batch_size", "must be >= 2"));
        }
        if self.batch_size < 2 {
            return Err(invalid("train.batch_size", "must be >= 2"));
        }
        if self.scan_batch_size == 0 {
            return Err(invalid("train.scan_batch_size", "must be >= 1"));
        }
        for (key, v) in [
            ("augment.sigma", self.augment_sigma),
            ("train.class_lr", self.class_lr),
            ("train.lr_high", self.lr_high),
            ("train.lr_low", self.lr_low),
            ("train.lambda_u_high", self.lambda_u_high),
            ("train.lambda_u_low", self.lambda_u_low),
            ("train.lambda_r", self.lambda_r),
            ("train.lambda_e", self.lambda_e),
            ("pretrain.lr", self.pretrain_lr),
        ] {
            if v < 0.0 {
                return Err(invalid(key, "must be >= 0"));
            }
        }
        if !(self.jitter_lo > 0.0) || self.jitter_lo > 1.0 || self.jitter_hi < 1.0 {
            return Err(invalid(
                "augment.jitter_lo",
                "jitter interval must be positive and contain 1",
            ));
        }
        Ok(())
    }

    pub fn policy(&self) -> AugmentationPolicy {
        let mut flips = vec![false; self.dim];
        for &axis in &self.flip_axes {
            if axis < flips.len() {
                flips[axis] = true;
            }
        }
        if self.flip_axes.is_empty() {
            flips.clear();
        }
        AugmentationPolicy {
            additive_noise_sigma: self.augment_sigma,
            scale_jitter: (self.jitter_lo, self.jitter_hi),
            flip_axes: flips,
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            embedding_dim: self.embedding_dim,
            lr: self.pretrain_lr,
            ..ContrastiveConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.mode);
        cfg.epochs = self.epochs;
        cfg.warmup_epochs = self.warmup_epochs;
        cfg.tau = self.tau;
        cfg.k = self.k;
        cfg.lr_high = self.lr_high;
        cfg.lr_low = self.lr_low;
        cfg.noise_rate_gate = self.noise_rate_gate;
        cfg.class_lr = self.class_lr;
        cfg.batch_size = self.batch_size;
        cfg.scan_batch_size = self.scan_batch_size;
        cfg.lambda_u_high = self.lambda_u_high;
        cfg.lambda_u_low = self.lambda_u_low;
        cfg.lambda_r = self.lambda_r;
        cfg.lambda_e = self.lambda_e;
        cfg.alpha = self.alpha;
        cfg.sharpen_t = self.sharpen_t;
        cfg.num_augments = self.num_augments;
        cfg.hidden_dims = self.hidden_dims.clone();
        cfg.feature_dim = self.feature_dim;
        cfg.embedding_dim = self.embedding_dim;
        cfg.policy = self.policy();
        cfg.pretrain = self.contrastive();
        cfg.seeds = self.seeds;
        cfg.checkpoint_every = self.checkpoint_every;
        cfg
    }

    /// The effective configuration as a sorted key-value map.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put(
            "data.kind",
            match self.data_kind {
                DataKind::Blobs => "blobs",
                DataKind::Rings => "rings",
                DataKind::Csv => "csv",
            }
            .to_string(),
        );
        if let Some(p) = &self.data_path {
            put("data.path", p.display().to_string());
        }
        if let Some(p) = &self.test_path {
            put("data.test_path", p.display().to_string());
        }
        put("data.classes", self.classes.to_string());
        put("data.per_class", self.per_class.to_string());
        put("data.dim", self.dim.to_string());
        put("data.spread", self.spread.to_string());
        put("data.radius_step", self.radius_step.to_string());
        put("data.noise_sigma", self.ring_sigma.to_string());
        put("data.test_per_class", self.test_per_class.to_string());
        put(
            "noise.kind",
            match self.noise_kind {
                NoiseKindOpt::None => "none",
                NoiseKindOpt::Symmetric => "symmetric",
                NoiseKindOpt::Asymmetric => "asymmetric",
                NoiseKindOpt::Semantic => "semantic",
            }
            .to_string(),
        );
        put("noise.rate", self.noise_rate.to_string());
        let mut pairs = String::new();
        for (i, (f, t)) in self.noise_pairs.iter().enumerate() {
            if i > 0 {
                pairs.push(',');
            }
            let _ = write!(pairs, "{f}:{t}");
        }
        put("noise.pairs", pairs);
        put(
            "model.hidden_dims",
            self.hidden_dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("model.feature_dim", self.feature_dim.to_string());
        put("model.embedding_dim", self.embedding_dim.to_string());
        put("augment.sigma", self.augment_sigma.to_string());
        put("augment.jitter_lo", self.jitter_lo.to_string());
        put("augment.jitter_hi", self.jitter_hi.to_string());
        put(
            "augment.flip_axes",
            self.flip_axes
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("pretrain.epochs", self.pretrain_epochs.to_string());
        put("pretrain.batch_size", self.pretrain_batch_size.to_string());
        put("pretrain.temperature", self.temperature.to_string());
        put("pretrain.lr", self.pretrain_lr.to_string());
        put("train.mode", self.mode.as_str().to_string());
        put("train.epochs", self.epochs.to_string());
        put("train.warmup_epochs", self.warmup_epochs.to_string());
        put("train.tau", self.tau.to_string());
        put("train.k", self.k.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.scan_batch_size", self.scan_batch_size.to_string());
        put("train.class_lr", self.class_lr.to_string());
        put("train.lr_high", self.lr_high.to_string());
        put("train.lr_low", self.lr_low.to_string());
        put("train.noise_rate_gate", self.noise_rate_gate.to_string());
        put("train.lambda_u_high", self.lambda_u_high.to_string());
        put("train.lambda_u_low", self.lambda_u_low.to_string());
        put("train.lambda_r", self.lambda_r.to_string());
        put("train.lambda_e", self.lambda_e.to_string());
        put("train.alpha", self.alpha.to_string());
        put("train.sharpen_t", self.sharpen_t.to_string());
        put("train.num_augments", self.num_augments.to_string());
        put("train.checkpoint_every", self.checkpoint_every.to_string());
        put("seeds.data", self.seeds.data.to_string());
        put("seeds.model", self.seeds.model.to_string());
        put("seeds.training", self.seeds.training.to_string());
        put("out.dir", self.out_dir.display().to_string());
        put("out.dump_divider", self.dump_divider.to_string());
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_keys_and_comments() {
        let cfg = RunConfig::from_str(
            "# experiment\nnoise.kind=symmetric\nnoise.rate=0.8 # severe\ntrain.mode=ce_only\nseeds.training=9\n",
        )
        .unwrap();
        assert_eq!(cfg.noise_kind, NoiseKindOpt::Symmetric);
        assert_eq!(cfg.noise_rate, 0.8);
        assert_eq!(cfg.mode, TrainMode::CeOnly);
        assert_eq!(cfg.seeds.training, 9);
    }

    #[test]
    fn rejects_unknown_key() {
        let err = RunConfig::from_str("bogus.key=1\n").unwrap_err();
        assert!(err.to_string().contains("bogus.key"), "{err}");
    }

    #[test]
    fn rejects_out_of_range_rate() {
        let err = RunConfig::from_str("noise.rate=1.5\n").unwrap_err();
        assert!(err.to_string().contains("noise.rate"), "{err}");
    }

    #[test]
    fn rejects_bad_tau_with_key_name() {
        let err = RunConfig::from_str("train.tau=0\n").unwrap_err();
        assert!(err.to_string().contains("train.tau"), "{err}");
    }

    #[test]
    fn asymmetric_requires_pairs() {
        let err = RunConfig::from_str("noise.kind=asymmetric\nnoise.rate=0.4\n").unwrap_err();
        assert!(err.to_string().contains("noise.pairs"), "{err}");
        let cfg =
            RunConfig::from_str("noise.kind=asymmetric\nnoise.rate=0.4\nnoise.pairs=1:0,3:2\n")
                .unwrap();
        assert_eq!(cfg.noise_pairs, vec![(1, 0), (3, 2)]);
    }

    #[test]
    fn snapshot_round_trips_through_parser() {
        let cfg = RunConfig::from_str("noise.kind=symmetric\nnoise.rate=0.5\ntrain.epochs=7\ntrain.warmup_epochs=2\n").unwrap();
        let text: String = cfg
            .snapshot()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let back = RunConfig::from_str(&text).unwrap();
        assert_eq!(back.snapshot(), cfg.snapshot());
    }
}
