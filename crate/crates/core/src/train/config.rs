use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{DtmConfig, DtpMetric, Pooling};
use crate::graph::StreamDims;
use crate::heads::READOUT_HIDDEN;
use crate::spatial::SpatialMode;

/// Every hyperparameter and ablation switch of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub frames: usize,
    /// Node feature width `D`.
    pub node_dim: usize,
    /// Temporal channel width `C`.
    pub channels: usize,
    /// Similarity embedding width `E`.
    pub sim_dim: usize,
    pub visual_dim: usize,
    pub num_categories: usize,
    pub subactivities: usize,
    pub affordances: usize,
    pub readout_hidden: usize,
    pub lambda: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_step: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub spatial: SpatialMode,
    pub temporal_enhancement: bool,
    pub pooling: Pooling,
    pub dtp_metric: DtpMetric,
    pub tau: usize,
    pub stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            frames: 8,
            node_dim: 64,
            channels: 32,
            sim_dim: 16,
            visual_dim: 16,
            num_categories: 6,
            subactivities: 3,
            affordances: 3,
            readout_hidden: READOUT_HIDDEN,
            lambda: 1.0,
            lr: 1e-2,
            lr_decay: 0.8,
            decay_step: 20,
            epochs: 100,
            batch_size: 1,
            seed: 0,
            spatial: SpatialMode::Gat,
            temporal_enhancement: true,
            pooling: Pooling::Dtp,
            dtp_metric: DtpMetric::Both,
            tau: 1,
            stride: 2,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "frames",
    "node_dim",
    "channels",
    "sim_dim",
    "visual_dim",
    "num_categories",
    "subactivities",
    "affordances",
    "readout_hidden",
    "lambda",
    "lr",
    "lr_decay",
    "decay_step",
    "epochs",
    "batch_size",
    "seed",
    "spatial",
    "temporal_enhancement",
    "pooling",
    "dtp_metric",
    "tau",
    "stride",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key} `{value}` not one of on, off"))),
    }
}

impl TrainConfig {
    /// Settings used for CAD-120 in the original work: 300 epochs at 2e-5.
    /// Intended for pretrained-backbone features, not the synthetic data.
    pub fn paper_preset() -> Self {
        TrainConfig {
            lr: 2e-5,
            epochs: 300,
            ..Self::default()
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "frames" => self.frames = parse_num(key, v)?,
            "node_dim" => self.node_dim = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "sim_dim" => self.sim_dim = parse_num(key, v)?,
            "visual_dim" => self.visual_dim = parse_num(key, v)?,
            "num_categories" => self.num_categories = parse_num(key, v)?,
            "subactivities" => self.subactivities = parse_num(key, v)?,
            "affordances" => self.affordances = parse_num(key, v)?,
            "readout_hidden" => self.readout_hidden = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_decay" => self.lr_decay = parse_num(key, v)?,
            "decay_step" => self.decay_step = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "spatial" => self.spatial = v.parse()?,
            "temporal_enhancement" => self.temporal_enhancement = parse_switch(key, v)?,
            "pooling" => self.pooling = v.parse()?,
            "dtp_metric" => self.dtp_metric = v.parse()?,
            "tau" => self.tau = parse_num(key, v)?,
            "stride" => self.stride = parse_num(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}`; expected one of {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_kv_str(&text)
    }

    /// The `key = value` form read by [`TrainConfig::from_kv_str`].
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("frames", self.frames.to_string());
        line("node_dim", self.node_dim.to_string());
        line("channels", self.channels.to_string());
        line("sim_dim", self.sim_dim.to_string());
        line("visual_dim", self.visual_dim.to_string());
        line("num_categories", self.num_categories.to_string());
        line("subactivities", self.subactivities.to_string());
        line("affordances", self.affordances.to_string());
        line("readout_hidden", self.readout_hidden.to_string());
        line("lambda", self.lambda.to_string());
        line("lr", self.lr.to_string());
        line("lr_decay", self.lr_decay.to_string());
        line("decay_step", self.decay_step.to_string());
        line("epochs", self.epochs.to_string());
        line("batch_size", self.batch_size.to_string());
        line("seed", self.seed.to_string());
        line("spatial", self.spatial.to_string());
        line(
            "temporal_enhancement",
            if self.temporal_enhancement {
                "on"
            } else {
                "off"
            }
            .into(),
        );
        line("pooling", self.pooling.to_string());
        line("dtp_metric", self.dtp_metric.to_string());
        line("tau", self.tau.to_string());
        line("stride", self.stride.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("node_dim", self.node_dim),
            ("channels", self.channels),
            ("sim_dim", self.sim_dim),
            ("visual_dim", self.visual_dim),
            ("num_categories", self.num_categories),
            ("readout_hidden", self.readout_hidden),
            ("decay_step", self.decay_step),
            ("batch_size", self.batch_size),
            ("tau", self.tau),
            ("stride", self.stride),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.subactivities < 2 || self.affordances < 2 {
            return Err(Error::Config(
                "subactivities and affordances need at least 2 classes".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        self.dtm().lengths(self.frames)?;
        Ok(())
    }

    /// Learning rate for a 0-based epoch: `lr · decay^(epoch / decay_step)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_step) as i32)
    }

    pub fn stream_dims(&self) -> StreamDims {
        StreamDims {
            num_categories: self.num_categories,
            visual_dim: self.visual_dim,
            node_dim: self.node_dim,
        }
    }

    pub fn dtm(&self) -> DtmConfig {
        DtmConfig {
            input_dim: self.node_dim,
            channels: self.channels,
            embed_dim: self.sim_dim,
            tau: self.tau,
            stride: self.stride,
            pooling: self.pooling,
            metric: self.dtp_metric,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.pooling = Pooling::Max;
        cfg.temporal_enhancement = false;
        cfg.lr = 0.0375;
        let back = TrainConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let mut cfg =
            TrainConfig::from_kv_str("# run\n\npooling = DTP  # default\nepochs=3\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        cfg.apply_overrides(&["pooling=AvgP"]).unwrap();
        assert_eq!(cfg.pooling, Pooling::Avg);
    }

    #[test]
    fn invalid_values_are_reported() {
        let err = TrainConfig::from_kv_str("pooling = median")
            .unwrap_err()
            .to_string();
        assert!(err.contains("DTP, AvgP, MaxP, RNN, none"), "{err}");
        let err = TrainConfig::from_kv_str("spatial = GIN")
            .unwrap_err()
            .to_string();
        assert!(err.contains("GCN-full"), "{err}");
        let err = TrainConfig::from_kv_str("temporal_enhancement = maybe")
            .unwrap_err()
            .to_string();
        assert!(err.contains("on, off"), "{err}");
        assert!(TrainConfig::from_kv_str("colour = red").is_err());
        assert!(TrainConfig::from_kv_str("lr = -1").is_err());
        // two pooling blocks cannot fit into 4 frames
        assert!(TrainConfig::from_kv_str("frames = 4").is_err());
        assert!(TrainConfig::from_kv_str("frames = 4\npooling = none").is_ok());
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = TrainConfig::default();
        for e in 0..20 {
            assert_eq!(cfg.lr_at(e), cfg.lr);
        }
        for e in 20..40 {
            assert_eq!(cfg.lr_at(e), cfg.lr * 0.8f64.powi(1));
        }
        assert_eq!(cfg.lr_at(40), cfg.lr * 0.8f64.powi(2));
        assert!((cfg.lr_at(40) - cfg.lr * 0.64).abs() < 1e-18);
    }

    #[test]
    fn paper_preset_values() {
        let p = TrainConfig::paper_preset();
        assert_eq!((p.lr, p.epochs, p.frames, p.lambda), (2e-5, 300, 8, 1.0));
        assert_eq!((p.lr_decay, p.decay_step), (0.8, 20));
    }
}
