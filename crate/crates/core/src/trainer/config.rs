//! `HyperConfig` and its flat `key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Unknown keys, repeated keys
//! and malformed values are errors. Keys left out take their defaults;
//! `burn_up_iters` and `lr_decay_iters` default to fixed fractions of
//! `total_iters`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::LossWeights;
use crate::model::{ArchConfig, BranchInputMask};
use crate::sampling::SamplerConfig;
use crate::synthdata::{DataConfig, StrongAugConfig};

/// `(key, description)` for every accepted key, in file order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "base seed for data, initialization and sampling"),
    ("total_iters", "training iterations"),
    ("burn_up_iters", "supervised-only iterations (default total_iters / 6)"),
    ("lr", "SGD learning rate"),
    ("weight_decay", "L2 coefficient added to the gradient"),
    ("momentum", "SGD momentum"),
    ("lr_decay_iters", "comma list of iterations where lr is multiplied by lr_decay_factor"),
    ("lr_decay_factor", "multiplier applied at each decay iteration"),
    ("warmup_iters", "linear learning-rate warmup length"),
    ("batch_labeled", "labeled images per step"),
    ("batch_unlabeled", "unlabeled images per step"),
    ("ema_momentum", "teacher EMA momentum m"),
    ("u", "foreground IoU for RoI and branch targets"),
    ("mu", "IoU above which a branch target is positive"),
    ("theta", "pseudo-label IoU-score threshold"),
    ("delta", "pseudo-label confidence threshold"),
    ("alpha", "unsupervised classification weight"),
    ("beta", "unsupervised regression weight"),
    ("gamma_iou", "unsupervised IoU-branch weight"),
    ("gamma_focal", "focal exponent of the branch loss"),
    ("branch_enabled", "build and train the IoU branch"),
    ("branch_mask", "branch inputs, e.g. shared+scores or shared+scores+deltas"),
    ("branch_hidden", "branch hidden width, or `auto` for the input width"),
    ("filter_enabled", "apply the IoU-score filter to pseudo-labels"),
    ("filter_at_eval", "apply the IoU-score filter to benchmark predictions"),
    ("shared_dim", "width of the shared RoI features"),
    ("num_classes", "object classes in the synthetic data"),
    ("image_size", "side of the square synthetic images"),
    ("max_objects", "objects per scene upper bound"),
    ("noise_std", "pixel noise of the synthetic images"),
    ("num_scenes", "training scenes (labeled plus unlabeled)"),
    ("labeled_fraction", "fraction of training scenes with visible labels"),
    ("eval_scenes", "held-out evaluation scenes"),
    ("eval_score_threshold", "score threshold for benchmark predictions"),
    ("nms_threshold", "class-wise NMS IoU for predictions"),
    ("log_interval", "iterations per metrics record"),
    ("eval_interval", "iterations between AP snapshots (multiple of log_interval)"),
    ("quality_interval", "iterations between pseudo-label quality histograms (multiple of log_interval)"),
    ("quality_scenes", "held-out scenes used for quality histograms"),
    ("quality_bins", "histogram bins over IoU"),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`")]
    Value { line: usize, key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub seed: u64,
    pub u: f64,
    pub mu: f64,
    pub theta: f64,
    pub delta: f64,
    pub weights: LossWeights,
    pub ema_momentum: f64,
    pub burn_up_iters: usize,
    pub total_iters: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_decay_iters: Vec<usize>,
    pub lr_decay_factor: f64,
    pub warmup_iters: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub branch_enabled: bool,
    pub branch_mask: BranchInputMask,
    pub branch_hidden: Option<usize>,
    pub filter_enabled: bool,
    pub filter_at_eval: bool,
    pub shared_dim: usize,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub strong_aug: StrongAugConfig,
    pub eval_score_threshold: f64,
    pub nms_threshold: f64,
    pub log_interval: usize,
    pub eval_interval: usize,
    pub quality_interval: usize,
    pub quality_scenes: usize,
    pub quality_bins: usize,
}

/// Decay points of a 180k-iteration schedule, scaled to `total`.
pub fn scaled_decay_iters(total: usize) -> Vec<usize> {
    [179_990.0, 179_995.0].iter().map(|f| (total as f64 * f / 180_000.0).round() as usize).collect()
}

impl Default for HyperConfig {
    fn default() -> Self {
        let total = 6000;
        HyperConfig {
            seed: 0,
            u: 0.5,
            mu: 0.75,
            theta: 0.4,
            delta: 0.7,
            weights: LossWeights::default(),
            ema_momentum: 0.9996,
            burn_up_iters: total / 6,
            total_iters: total,
            lr: 0.0075,
            weight_decay: 1e-4,
            momentum: 0.9,
            lr_decay_iters: scaled_decay_iters(total),
            lr_decay_factor: 0.1,
            warmup_iters: 0,
            batch_labeled: 2,
            batch_unlabeled: 2,
            branch_enabled: true,
            branch_mask: BranchInputMask::SHARED_SCORES,
            branch_hidden: None,
            filter_enabled: true,
            filter_at_eval: false,
            shared_dim: 128,
            data: DataConfig::default(),
            sampler: SamplerConfig::default(),
            strong_aug: StrongAugConfig::default(),
            eval_score_threshold: 0.05,
            nms_threshold: 0.5,
            log_interval: 50,
            eval_interval: 1000,
            quality_interval: 1000,
            quality_scenes: 100,
            quality_bins: 10,
        }
    }
}

fn unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl HyperConfig {
    /// The baseline arm: no branch, no IoU filter, no unsupervised regression.
    pub fn baseline(mut self) -> Self {
        self.branch_enabled = false;
        self.filter_enabled = false;
        self.filter_at_eval = false;
        self.weights.beta = 0.0;
        self.weights.gamma_iou = 0.0;
        self
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            image_size: self.data.image_size,
            num_classes: self.data.num_classes,
            shared_dim: self.shared_dim,
            branch_enabled: self.branch_enabled,
            branch_mask: self.branch_mask,
            branch_hidden: self.branch_hidden,
            ..ArchConfig::default()
        }
    }

    /// Learning rate in effect at 0-based iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        let decays = self.lr_decay_iters.iter().filter(|&&d| it >= d).count();
        let warm = if self.warmup_iters > 0 && it < self.warmup_iters {
            (it + 1) as f64 / self.warmup_iters as f64
        } else {
            1.0
        };
        self.lr * warm * self.lr_decay_factor.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.burn_up_iters > self.total_iters {
            return bad(format!("burn_up_iters {} exceeds total_iters {}", self.burn_up_iters, self.total_iters));
        }
        for (name, v) in [
            ("u", self.u),
            ("mu", self.mu),
            ("theta", self.theta),
            ("delta", self.delta),
            ("ema_momentum", self.ema_momentum),
            ("eval_score_threshold", self.eval_score_threshold),
            ("nms_threshold", self.nms_threshold),
        ] {
            if !unit(v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return bad("need lr > 0, weight_decay >= 0 and momentum in [0, 1)".into());
        }
        let w = &self.weights;
        if [w.alpha, w.beta, w.gamma_iou, w.gamma_focal].iter().any(|&x| !(x >= 0.0)) {
            return bad("loss weights must be non-negative".into());
        }
        if self.batch_labeled == 0 {
            return bad("batch_labeled must be positive".into());
        }
        if self.log_interval == 0
            || self.eval_interval == 0
            || self.quality_interval == 0
            || !self.eval_interval.is_multiple_of(self.log_interval)
            || !self.quality_interval.is_multiple_of(self.log_interval)
        {
            return bad("eval_interval and quality_interval must be positive multiples of log_interval".into());
        }
        if self.quality_bins == 0 {
            return bad("quality_bins must be positive".into());
        }
        self.data.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.arch().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut seen: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if !CONFIG_KEYS.iter().any(|(name, _)| *name == k) {
                return Err(ConfigError::UnknownKey { line, key: k.into() });
            }
            if seen.insert(k.to_string(), (line, v.to_string())).is_some() {
                return Err(ConfigError::Duplicate { line, key: k.into() });
            }
        }
        let mut cfg = HyperConfig::default();
        if let Some((_, v)) = seen.get("total_iters") {
            if let Ok(t) = v.parse::<usize>() {
                cfg.total_iters = t;
                cfg.burn_up_iters = t / 6;
                cfg.lr_decay_iters = scaled_decay_iters(t);
            }
        }
        for (key, (line, value)) in &seen {
            cfg.set(key, value).map_err(|_| ConfigError::Value {
                line: *line,
                key: key.clone(),
                value: value.clone(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ()> {
        fn p<T: std::str::FromStr>(v: &str) -> Result<T, ()> {
            v.parse().map_err(|_| ())
        }
        match key {
            "seed" => {
                self.seed = p(v)?;
                self.data.seed = self.seed;
            }
            "total_iters" => self.total_iters = p(v)?,
            "burn_up_iters" => self.burn_up_iters = p(v)?,
            "lr" => self.lr = p(v)?,
            "weight_decay" => self.weight_decay = p(v)?,
            "momentum" => self.momentum = p(v)?,
            "lr_decay_iters" => {
                self.lr_decay_iters = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| p(s.trim())).collect::<Result<_, _>>()?
                }
            }
            "lr_decay_factor" => self.lr_decay_factor = p(v)?,
            "warmup_iters" => self.warmup_iters = p(v)?,
            "batch_labeled" => self.batch_labeled = p(v)?,
            "batch_unlabeled" => self.batch_unlabeled = p(v)?,
            "ema_momentum" => self.ema_momentum = p(v)?,
            "u" => self.u = p(v)?,
            "mu" => self.mu = p(v)?,
            "theta" => self.theta = p(v)?,
            "delta" => self.delta = p(v)?,
            "alpha" => self.weights.alpha = p(v)?,
            "beta" => self.weights.beta = p(v)?,
            "gamma_iou" => self.weights.gamma_iou = p(v)?,
            "gamma_focal" => self.weights.gamma_focal = p(v)?,
            "branch_enabled" => self.branch_enabled = p(v)?,
            "branch_mask" => self.branch_mask = BranchInputMask::parse(v).ok_or(())?,
            "branch_hidden" => self.branch_hidden = if v == "auto" { None } else { Some(p(v)?) },
            "filter_enabled" => self.filter_enabled = p(v)?,
            "filter_at_eval" => self.filter_at_eval = p(v)?,
            "shared_dim" => self.shared_dim = p(v)?,
            "num_classes" => self.data.num_classes = p(v)?,
            "image_size" => self.data.image_size = p(v)?,
            "max_objects" => self.data.max_objects = p(v)?,
            "noise_std" => self.data.noise_std = p(v)?,
            "num_scenes" => self.data.num_scenes = p(v)?,
            "labeled_fraction" => self.data.labeled_fraction = p(v)?,
            "eval_scenes" => self.data.eval_scenes = p(v)?,
            "eval_score_threshold" => self.eval_score_threshold = p(v)?,
            "nms_threshold" => self.nms_threshold = p(v)?,
            "log_interval" => self.log_interval = p(v)?,
            "eval_interval" => self.eval_interval = p(v)?,
            "quality_interval" => self.quality_interval = p(v)?,
            "quality_scenes" => self.quality_scenes = p(v)?,
            "quality_bins" => self.quality_bins = p(v)?,
            _ => return Err(()),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "total_iters" => self.total_iters.to_string(),
            "burn_up_iters" => self.burn_up_iters.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "momentum" => self.momentum.to_string(),
            "lr_decay_iters" => {
                self.lr_decay_iters.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
            }
            "lr_decay_factor" => self.lr_decay_factor.to_string(),
            "warmup_iters" => self.warmup_iters.to_string(),
            "batch_labeled" => self.batch_labeled.to_string(),
            "batch_unlabeled" => self.batch_unlabeled.to_string(),
            "ema_momentum" => self.ema_momentum.to_string(),
            "u" => self.u.to_string(),
            "mu" => self.mu.to_string(),
            "theta" => self.theta.to_string(),
            "delta" => self.delta.to_string(),
            "alpha" => self.weights.alpha.to_string(),
            "beta" => self.weights.beta.to_string(),
            "gamma_iou" => self.weights.gamma_iou.to_string(),
            "gamma_focal" => self.weights.gamma_focal.to_string(),
            "branch_enabled" => self.branch_enabled.to_string(),
            "branch_mask" => self.branch_mask.name(),
            "branch_hidden" => self.branch_hidden.map_or("auto".into(), |h| h.to_string()),
            "filter_enabled" => self.filter_enabled.to_string(),
            "filter_at_eval" => self.filter_at_eval.to_string(),
            "shared_dim" => self.shared_dim.to_string(),
            "num_classes" => self.data.num_classes.to_string(),
            "image_size" => self.data.image_size.to_string(),
            "max_objects" => self.data.max_objects.to_string(),
            "noise_std" => self.data.noise_std.to_string(),
            "num_scenes" => self.data.num_scenes.to_string(),
            "labeled_fraction" => self.data.labeled_fraction.to_string(),
            "eval_scenes" => self.data.eval_scenes.to_string(),
            "eval_score_threshold" => self.eval_score_threshold.to_string(),
            "nms_threshold" => self.nms_threshold.to_string(),
            "log_interval" => self.log_interval.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "quality_interval" => self.quality_interval.to_string(),
            "quality_scenes" => self.quality_scenes.to_string(),
            "quality_bins" => self.quality_bins.to_string(),
            _ => unreachable!("key list and getter out of sync: {key}"),
        }
    }

    /// Every key with its resolved value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, doc) in CONFIG_KEYS {
            let _ = writeln!(s, "# {doc}\n{k} = {}", self.get(k));
        }
        s
    }

    /// Sets one key from its text form, as a config file line would.
    pub fn with_override(mut self, key: &str, value: &str) -> Result<Self, ConfigError> {
        if !CONFIG_KEYS.iter().any(|(k, _)| *k == key) {
            return Err(ConfigError::UnknownKey { line: 0, key: key.into() });
        }
        self.set(key, value).map_err(|_| ConfigError::Value { line: 0, key: key.into(), value: value.into() })?;
        self.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = HyperConfig::default();
        assert_eq!((c.total_iters, c.burn_up_iters), (6000, 1000));
        assert_eq!(c.lr_decay_iters, vec![6000, 6000]);
        assert_eq!((c.lr, c.weight_decay, c.momentum), (0.0075, 1e-4, 0.9));
        assert_eq!((c.u, c.mu, c.theta, c.delta), (0.5, 0.75, 0.4, 0.7));
        assert_eq!(c.weights, LossWeights { alpha: 4.0, beta: 1.0, gamma_iou: 1.0, gamma_focal: 1.5 });
        c.validate().unwrap();
    }

    #[test]
    fn text_roundtrip() {
        let mut c = HyperConfig::default();
        c.seed = 17;
        c.data.seed = 17;
        c.branch_mask = BranchInputMask::FULL;
        c.branch_hidden = Some(64);
        c.weights.beta = 0.5;
        assert_eq!(HyperConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn derived_defaults_follow_total() {
        let c = HyperConfig::parse("total_iters = 1200\n").unwrap();
        assert_eq!(c.burn_up_iters, 200);
        assert_eq!(c.lr_decay_iters, vec![1200, 1200]);
        let c = HyperConfig::parse("total_iters = 360000\nburn_up_iters = 5").unwrap();
        assert_eq!(c.burn_up_iters, 5);
        assert_eq!(c.lr_decay_iters, vec![359_980, 359_990]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(HyperConfig::parse("bogus = 1"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(HyperConfig::parse("lr = 1\nlr = 2"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(HyperConfig::parse("lr = fast"), Err(ConfigError::Value { .. })));
        assert!(matches!(HyperConfig::parse("no equals sign"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(HyperConfig::parse("theta = 1.5"), Err(ConfigError::Invalid(_))));
        assert!(matches!(HyperConfig::parse("total_iters = 10\nburn_up_iters = 11"), Err(ConfigError::Invalid(_))));
        assert!(matches!(HyperConfig::parse("branch_mask = none"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn comments_and_blanks() {
        let c = HyperConfig::parse("# header\n\n  beta = 2   # trailing\n").unwrap();
        assert_eq!(c.weights.beta, 2.0);
    }

    #[test]
    fn schedule() {
        let c = HyperConfig { lr_decay_iters: vec![10, 20], warmup_iters: 4, ..HyperConfig::default() };
        assert!((c.lr_at(0) - 0.0075 / 4.0).abs() < 1e-15);
        assert_eq!(c.lr_at(5), 0.0075);
        assert!((c.lr_at(10) - 0.00075).abs() < 1e-15);
        assert!((c.lr_at(25) - 0.000075).abs() < 1e-15);
    }
}
