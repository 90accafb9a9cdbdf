//! Run configuration: `key = value` lines with dotted keys.
//!
//! Every key has a default; files and `--set` overrides only change what
//! they name, and unknown keys are rejected. [`Config::to_text`] lists every
//! effective value and parses back to the same configuration.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{DemtError, Result};
use crate::model::{self, ModelConfig, TaskKind, TaskSpec, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dir: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub split: String,
    /// Trailing samples held out for validation.
    pub val_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub tasks: Vec<TaskKind>,
    pub mode: Variant,
    /// `None` means `C/4`.
    pub reduced_channels: Option<usize>,
    pub depth_d: usize,
    pub points: usize,
    pub heads: usize,
    pub scales: Vec<usize>,
    pub trunk_widths: [usize; 4],
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub semseg_weight: f64,
    pub depth_weight: f64,
    pub normal_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// `None` reuses the run seed.
    pub shuffle_seed: Option<u64>,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    /// Train on the first batch only, every step.
    pub fixed_batch: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// `train`, `val` or `all`.
    pub split: String,
    /// Existing report to compare against `--single-task-ref` instead of
    /// evaluating a checkpoint.
    pub multi_report: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// `none` or `bilinear_coord_sign`.
    pub fault: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                dir: "data".into(),
                count: 8,
                height: 64,
                width: 64,
                classes: 5,
                split: "train".into(),
                val_count: 0,
            },
            model: ModelSection {
                tasks: vec![TaskKind::Semseg, TaskKind::Depth, TaskKind::Normal],
                mode: Variant::Full,
                reduced_channels: None,
                depth_d: 1,
                points: 9,
                heads: 2,
                scales: vec![4, 8, 16, 32],
                trunk_widths: [8, 16, 24, 32],
                ln_eps: crate::nn::LAYER_NORM_EPS,
                bn_eps: crate::nn::BATCH_NORM_EPS,
                bn_momentum: crate::nn::BATCH_NORM_MOMENTUM,
            },
            loss: LossConfig {
                semseg_weight: 1.0,
                depth_weight: 1.0,
                normal_weight: 10.0,
            },
            train: TrainConfig {
                steps: 200,
                batch_size: 2,
                lr: 1e-3,
                weight_decay: 5e-4,
                momentum: 0.9,
                shuffle_seed: None,
                checkpoint_every: 100,
                fixed_batch: false,
            },
            eval: EvalConfig {
                split: "train".into(),
                multi_report: None,
            },
            gradcheck: GradcheckConfig {
                eps: 1e-5,
                tolerance: 1e-4,
                fault: "none".into(),
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DemtError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(DemtError::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn opt_string(v: &Option<impl Display>, none: &str) -> String {
    v.as_ref().map_or(none.to_string(), |v| v.to_string())
}

/// Every accepted key, in the order they are echoed.
pub const KEYS: &[&str] = &[
    "seed",
    "data.dir",
    "data.count",
    "data.height",
    "data.width",
    "data.classes",
    "data.split",
    "data.val_count",
    "model.tasks",
    "model.mode",
    "model.reduced_channels",
    "model.depth_d",
    "model.points",
    "model.heads",
    "model.scales",
    "model.trunk_widths",
    "model.ln_eps",
    "model.bn_eps",
    "model.bn_momentum",
    "loss.semseg_weight",
    "loss.depth_weight",
    "loss.normal_weight",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "train.momentum",
    "train.shuffle_seed",
    "train.checkpoint_every",
    "train.fixed_batch",
    "eval.split",
    "eval.multi_report",
    "gradcheck.eps",
    "gradcheck.tolerance",
    "gradcheck.fault",
];

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.dir" => self.data.dir = v.to_string(),
            "data.count" => self.data.count = parse(key, v)?,
            "data.height" => self.data.height = parse(key, v)?,
            "data.width" => self.data.width = parse(key, v)?,
            "data.classes" => self.data.classes = parse(key, v)?,
            "data.split" => self.data.split = v.to_string(),
            "data.val_count" => self.data.val_count = parse(key, v)?,
            "model.tasks" => self.model.tasks = parse_list(key, v)?,
            "model.mode" => self.model.mode = v.parse()?,
            "model.reduced_channels" => {
                self.model.reduced_channels = if v == "auto" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "model.depth_d" => self.model.depth_d = parse(key, v)?,
            "model.points" => self.model.points = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.scales" => self.model.scales = parse_list(key, v)?,
            "model.trunk_widths" => {
                let w: Vec<usize> = parse_list(key, v)?;
                self.model.trunk_widths = w
                    .try_into()
                    .map_err(|_| DemtError::Config(format!("{key}: expected 4 widths")))?;
            }
            "model.ln_eps" => self.model.ln_eps = parse(key, v)?,
            "model.bn_eps" => self.model.bn_eps = parse(key, v)?,
            "model.bn_momentum" => self.model.bn_momentum = parse(key, v)?,
            "loss.semseg_weight" => self.loss.semseg_weight = parse(key, v)?,
            "loss.depth_weight" => self.loss.depth_weight = parse(key, v)?,
            "loss.normal_weight" => self.loss.normal_weight = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.momentum" => self.train.momentum = parse(key, v)?,
            "train.shuffle_seed" => {
                self.train.shuffle_seed = if v == "seed" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "train.fixed_batch" => self.train.fixed_batch = parse_bool(key, v)?,
            "eval.split" => {
                if !["train", "val", "all"].contains(&v) {
                    return Err(DemtError::Config(format!(
                        "{key}: expected train, val or all"
                    )));
                }
                self.eval.split = v.to_string()
            }
            "eval.multi_report" => {
                self.eval.multi_report = if v == "none" || v.is_empty() {
                    None
                } else {
                    Some(v.to_string())
                }
            }
            "gradcheck.eps" => self.gradcheck.eps = parse(key, v)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = parse(key, v)?,
            "gradcheck.fault" => {
                if !["none", "bilinear_coord_sign"].contains(&v) {
                    return Err(DemtError::Config(format!("{key}: unknown fault {v:?}")));
                }
                self.gradcheck.fault = v.to_string()
            }
            _ => return Err(DemtError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "seed" => self.seed.to_string(),
            "data.dir" => self.data.dir.clone(),
            "data.count" => self.data.count.to_string(),
            "data.height" => self.data.height.to_string(),
            "data.width" => self.data.width.to_string(),
            "data.classes" => self.data.classes.to_string(),
            "data.split" => self.data.split.clone(),
            "data.val_count" => self.data.val_count.to_string(),
            "model.tasks" => join(&m.tasks),
            "model.mode" => m.mode.to_string(),
            "model.reduced_channels" => opt_string(&m.reduced_channels, "auto"),
            "model.depth_d" => m.depth_d.to_string(),
            "model.points" => m.points.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.scales" => join(&m.scales),
            "model.trunk_widths" => join(&m.trunk_widths),
            "model.ln_eps" => m.ln_eps.to_string(),
            "model.bn_eps" => m.bn_eps.to_string(),
            "model.bn_momentum" => m.bn_momentum.to_string(),
            "loss.semseg_weight" => self.loss.semseg_weight.to_string(),
            "loss.depth_weight" => self.loss.depth_weight.to_string(),
            "loss.normal_weight" => self.loss.normal_weight.to_string(),
            "train.steps" => self.train.steps.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.momentum" => self.train.momentum.to_string(),
            "train.shuffle_seed" => opt_string(&self.train.shuffle_seed, "seed"),
            "train.checkpoint_every" => self.train.checkpoint_every.to_string(),
            "train.fixed_batch" => self.train.fixed_batch.to_string(),
            "eval.split" => self.eval.split.clone(),
            "eval.multi_report" => opt_string(&self.eval.multi_report, "none"),
            "gradcheck.eps" => self.gradcheck.eps.to_string(),
            "gradcheck.tolerance" => self.gradcheck.tolerance.to_string(),
            "gradcheck.fault" => self.gradcheck.fault.clone(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                DemtError::Config(format!("line {}: expected key = value", i + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| DemtError::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.train.shuffle_seed.unwrap_or(self.seed)
    }

    pub fn task_specs(&self) -> Result<Vec<TaskSpec>> {
        self.model
            .tasks
            .iter()
            .map(|&k| {
                let w = match k {
                    TaskKind::Semseg => self.loss.semseg_weight,
                    TaskKind::Depth => self.loss.depth_weight,
                    TaskKind::Normal => self.loss.normal_weight,
                };
                TaskSpec::new(k, self.data.classes, w)
            })
            .collect()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let c = model::aggregated_channels(&m.trunk_widths, &m.scales)?;
        let reduced = match m.reduced_channels {
            Some(r) => r,
            None => (c / 4 / m.heads.max(1) * m.heads).max(m.heads),
        };
        let cfg = ModelConfig {
            tasks: self.task_specs()?,
            reduced_channels: reduced,
            depth: m.depth_d,
            points: m.points,
            heads: m.heads,
            scales: m.scales.clone(),
            input_hw: (self.data.height, self.data.width),
            trunk_widths: m.trunk_widths,
            variant: m.mode,
            seed: self.seed,
            ln_eps: m.ln_eps,
            bn_eps: m.bn_eps,
            bn_momentum: m.bn_momentum,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.apply_text("model.depth_d = 2\nmodel.scales = 4, 8 # two scales\n\nseed=9\n")
            .unwrap();
        assert_eq!(c.model.depth_d, 2);
        assert_eq!(c.model.scales, vec![4, 8]);
        assert_eq!(Config::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(
            Config::from_text(&Config::default().to_text()).unwrap(),
            Config::default()
        );
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::default().apply_override("model.depth = 2").is_err());
        assert!(Config::from_text("nonsense").is_err());
        assert!(Config::default()
            .apply_override("train.steps=many")
            .is_err());
    }

    #[test]
    fn every_key_is_gettable() {
        let c = Config::default();
        for k in KEYS {
            let v = c.get(k).unwrap();
            let mut d = Config::default();
            d.set(k, &v).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn default_reduced_width_is_quarter() {
        let c = Config::default();
        let m = c.model_config().unwrap();
        assert_eq!(m.aggregated_channels(), 80);
        assert_eq!(m.reduced_channels, 20);
        assert_eq!(m.tasks[2].loss_weight, 10.0);
    }
}
