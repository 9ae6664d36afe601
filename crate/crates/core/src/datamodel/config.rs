//! Run configuration and its plain-text `key = value` form.
//!
//! A config file is a list of `key = value` lines; `#` starts a comment.
//! `dataset` and `composition` select a preset, every other key overrides one
//! field of it. Keys may repeat; the last occurrence wins. [`CONFIG_KEYS`]
//! lists every key with its meaning.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    preset_schedule, Composition, DatasetName, ExpansionVariant, SelectorKind, SessionSchedule,
    SimilarityKind,
};
use crate::error::{Error, Result};

/// Feature extractor architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    /// ResNet-20 at 28 px, ResNet-18 at 224 px, MLP otherwise.
    Auto,
    Mlp,
    Conv,
    ResNet20,
    ResNet18,
}

impl BackboneKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneKind::Auto => "auto",
            BackboneKind::Mlp => "mlp",
            BackboneKind::Conv => "conv",
            BackboneKind::ResNet20 => "resnet20",
            BackboneKind::ResNet18 => "resnet18",
        }
    }

    /// Concrete architecture for an input resolution.
    pub fn resolve(self, resolution: usize) -> BackboneKind {
        match self {
            BackboneKind::Auto if resolution >= 128 => BackboneKind::ResNet18,
            BackboneKind::Auto if resolution >= 24 => BackboneKind::ResNet20,
            BackboneKind::Auto => BackboneKind::Mlp,
            other => other,
        }
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "auto" => Ok(BackboneKind::Auto),
            "mlp" => Ok(BackboneKind::Mlp),
            "conv" => Ok(BackboneKind::Conv),
            "resnet20" => Ok(BackboneKind::ResNet20),
            "resnet18" => Ok(BackboneKind::ResNet18),
            other => Err(Error::config(format!(
                "unknown backbone `{other}` (expected auto, mlp, conv, resnet20, resnet18)"
            ))),
        }
    }
}

/// Which cumulative-entropy form ranks samples for selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CumulativeRule {
    /// Mean of per-epoch entropies.
    Sum,
    /// Trapezoid area under the entropy curve, divided by the epoch count.
    Trapezoid,
}

impl FromStr for CumulativeRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sum" => Ok(CumulativeRule::Sum),
            "trapezoid" => Ok(CumulativeRule::Trapezoid),
            other => Err(Error::config(format!(
                "unknown cumulative rule `{other}` (expected sum, trapezoid)"
            ))),
        }
    }
}

impl CumulativeRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            CumulativeRule::Sum => "sum",
            CumulativeRule::Trapezoid => "trapezoid",
        }
    }
}

/// Every recognised configuration key with a short description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("dataset", "pathmnist | bloodmnist | synthetic (default synthetic)"),
    ("composition", "imbalanced | long_tailed (default imbalanced)"),
    ("schedule.num_sessions", "sessions including the base session"),
    ("schedule.base_classes", "classes in session 0"),
    ("schedule.classes_per_increment", "new classes per incremental session"),
    ("schedule.samples_per_base_class", "training samples per base class"),
    ("schedule.samples_per_increment_class", "training samples per incremental class"),
    ("schedule.memory_size", "total exemplar budget"),
    ("schedule.resolution", "square image side in pixels"),
    ("schedule.channels", "image channels"),
    ("selector", "uta | random | nme | pool | committee (default uta)"),
    ("similarity", "cos | dot | euc | mah (default cos)"),
    ("expansion_variant", "rotation | rotation2 | color_perm | color_perm3 | rot_color_perm6 | rot_color_perm12 | none"),
    ("alpha", "weight of the contrastive term (default 0.5)"),
    ("beta", "weight of the predictor's divergence term (default 1.0)"),
    ("tau", "contrastive temperature (default 0.07)"),
    ("momentum", "key-network momentum coefficient (default 0.999)"),
    ("eta", "cosine sharpness (default 16)"),
    ("lr_base", "learning rate of session 0"),
    ("lr_incremental", "learning rate of sessions 1..T"),
    ("epochs_base", "epochs in session 0"),
    ("epochs_incremental", "epochs per incremental session"),
    ("queue_length", "contrastive key queue capacity"),
    ("seed", "master random seed"),
    ("batch_size", "samples per minibatch (before expansion)"),
    ("sgd_momentum", "optimizer momentum (default 0.9)"),
    ("weight_decay", "L2 weight decay (default 5e-4)"),
    ("backbone", "auto | mlp | conv | resnet20 | resnet18"),
    ("hidden_dims", "comma-separated stage widths of the mlp/conv backbone"),
    ("projection_dim", "contrastive projector output width (default 128)"),
    ("reduce_dim", "predictor per-tap reduction width (default 128)"),
    ("cumulative_rule", "sum | trapezoid (default sum)"),
    ("reevaluate_factor", "re-evaluated candidates as a multiple of the class quota (default 2)"),
    ("intra_probe", "transformation bank used to measure intra-class distance"),
    ("class_order", "comma-separated dataset labels in session order (default ascending)"),
    ("data_dir", "directory holding MedMNIST archives (else $ESSENTIAL_DATA_DIR)"),
    ("synthetic.noise", "pixel noise std of the synthetic generator"),
    ("synthetic.test_per_class", "synthetic test samples per class"),
];

/// Full description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetName,
    pub composition: Composition,
    pub schedule: SessionSchedule,
    pub selector: SelectorKind,
    pub similarity: SimilarityKind,
    pub expansion_variant: ExpansionVariant,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub momentum: f64,
    pub eta: f64,
    pub lr_base: f64,
    pub lr_incremental: f64,
    pub epochs_base: usize,
    pub epochs_incremental: usize,
    pub queue_length: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub backbone: BackboneKind,
    pub hidden_dims: Vec<usize>,
    pub projection_dim: usize,
    pub reduce_dim: usize,
    pub cumulative_rule: CumulativeRule,
    pub reevaluate_factor: usize,
    pub intra_probe: ExpansionVariant,
    pub class_order: Option<Vec<usize>>,
    pub data_dir: Option<PathBuf>,
    pub synthetic_noise: f64,
    pub synthetic_test_per_class: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(DatasetName::Synthetic, Composition::Imbalanced)
    }
}

impl RunConfig {
    /// Defaults for a dataset/composition pair.
    pub fn preset(dataset: DatasetName, composition: Composition) -> Self {
        let schedule = preset_schedule(dataset, composition);
        let (lr_base, lr_incremental, epochs_base, epochs_incremental) = match dataset {
            DatasetName::PathMnist => (0.1, 0.001, 600, 600),
            DatasetName::BloodMnist => (0.002, 0.000005, 120, 120),
            DatasetName::Synthetic => (0.05, 0.01, 12, 10),
        };
        let expansion_variant = match (dataset, composition) {
            (DatasetName::BloodMnist, Composition::Imbalanced) => ExpansionVariant::Rotation2,
            (DatasetName::Synthetic, _) => ExpansionVariant::Rotation2,
            _ => ExpansionVariant::ColorPerm,
        };
        let synthetic = dataset == DatasetName::Synthetic;
        Self {
            dataset,
            composition,
            schedule,
            selector: SelectorKind::Uta,
            similarity: SimilarityKind::Cos,
            expansion_variant,
            alpha: 0.5,
            beta: 1.0,
            tau: 0.07,
            momentum: if synthetic { 0.99 } else { 0.999 },
            eta: 16.0,
            lr_base,
            lr_incremental,
            epochs_base,
            epochs_incremental,
            queue_length: if synthetic { 256 } else { 4096 },
            seed: 0,
            batch_size: if synthetic { 32 } else { 64 },
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            backbone: BackboneKind::Auto,
            hidden_dims: vec![64, 32],
            projection_dim: if synthetic { 32 } else { 128 },
            reduce_dim: if synthetic { 16 } else { 128 },
            cumulative_rule: CumulativeRule::Sum,
            reevaluate_factor: 2,
            intra_probe: ExpansionVariant::Rotation2,
            class_order: None,
            data_dir: None,
            synthetic_noise: 0.1,
            synthetic_test_per_class: 40,
        }
    }

    /// Parses config text, then applies `overrides` (`key=value`) on top.
    pub fn from_text_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| {
                Error::config(format!("override `{o}` is not of the form key=value"))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_text_with_overrides(text, &[])
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text_with_overrides(&text, overrides)
    }

    fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let lookup = |key: &str| {
            pairs
                .iter()
                .rev()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
        };
        let dataset = lookup("dataset")
            .map(str::parse)
            .transpose()?
            .unwrap_or(DatasetName::Synthetic);
        let composition = lookup("composition")
            .map(str::parse)
            .transpose()?
            .unwrap_or(Composition::Imbalanced);
        let mut cfg = Self::preset(dataset, composition);
        for (k, v) in pairs {
            if k == "dataset" || k == "composition" {
                continue;
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assigns one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| {
                Error::config(format!("field `{key}`: cannot parse `{value}` as a number"))
            })
        }
        fn list(key: &str, value: &str) -> Result<Vec<usize>> {
            value
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| num(key, s))
                .collect()
        }
        let field = |e: Error| match e {
            Error::Config(m) => Error::config(format!("field `{key}`: {m}")),
            other => other,
        };
        match key {
            "dataset" => self.dataset = value.parse().map_err(field)?,
            "composition" => self.composition = value.parse().map_err(field)?,
            "schedule.num_sessions" => self.schedule.num_sessions = num(key, value)?,
            "schedule.base_classes" => self.schedule.base_classes = num(key, value)?,
            "schedule.classes_per_increment" => {
                self.schedule.classes_per_increment = num(key, value)?
            }
            "schedule.samples_per_base_class" => {
                self.schedule.samples_per_base_class = num(key, value)?
            }
            "schedule.samples_per_increment_class" => {
                self.schedule.samples_per_increment_class = num(key, value)?
            }
            "schedule.memory_size" | "memory_size" => self.schedule.memory_size = num(key, value)?,
            "schedule.resolution" => self.schedule.resolution = num(key, value)?,
            "schedule.channels" => self.schedule.channels = num(key, value)?,
            "selector" => self.selector = value.parse().map_err(field)?,
            "similarity" => self.similarity = value.parse().map_err(field)?,
            "expansion_variant" => self.expansion_variant = value.parse().map_err(field)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "lr_base" => self.lr_base = num(key, value)?,
            "lr_incremental" => self.lr_incremental = num(key, value)?,
            "epochs_base" => self.epochs_base = num(key, value)?,
            "epochs_incremental" => self.epochs_incremental = num(key, value)?,
            "queue_length" => self.queue_length = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "sgd_momentum" => self.sgd_momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "backbone" => self.backbone = value.parse().map_err(field)?,
            "hidden_dims" => self.hidden_dims = list(key, value)?,
            "projection_dim" => self.projection_dim = num(key, value)?,
            "reduce_dim" => self.reduce_dim = num(key, value)?,
            "cumulative_rule" => self.cumulative_rule = value.parse().map_err(field)?,
            "reevaluate_factor" => self.reevaluate_factor = num(key, value)?,
            "intra_probe" => self.intra_probe = value.parse().map_err(field)?,
            "class_order" => {
                self.class_order = match value.trim() {
                    "" | "ascending" => None,
                    v => Some(list(key, v)?),
                }
            }
            "data_dir" => {
                self.data_dir = match value.trim() {
                    "" => None,
                    v => Some(PathBuf::from(v)),
                }
            }
            "synthetic.noise" => self.synthetic_noise = num(key, value)?,
            "synthetic.test_per_class" => self.synthetic_test_per_class = num(key, value)?,
            other => {
                return Err(Error::config(format!(
                    "unknown key `{other}` (see the key list in the README)"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad = |field: &str, why: &str, got: f64| {
            Err(Error::config(format!("field `{field}` {why} (got {got})")))
        };
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return bad("momentum", "must lie strictly between 0 and 1", self.momentum);
        }
        if !(self.tau > 0.0) {
            return bad("tau", "must be > 0", self.tau);
        }
        if !(self.eta > 0.0) {
            return bad("eta", "must be > 0", self.eta);
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha", "must be >= 0", self.alpha);
        }
        if !(self.beta >= 0.0) {
            return bad("beta", "must be >= 0", self.beta);
        }
        if !(self.lr_base >= 0.0 && self.lr_incremental >= 0.0) {
            return bad("lr_base/lr_incremental", "must be >= 0", self.lr_base.min(self.lr_incremental));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad("sgd_momentum", "must lie in [0, 1)", self.sgd_momentum);
        }
        if self.batch_size == 0 {
            return Err(Error::config("field `batch_size` must be > 0"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::config("field `hidden_dims` must list positive widths"));
        }
        if self.projection_dim == 0 || self.reduce_dim == 0 {
            return Err(Error::config("fields `projection_dim` and `reduce_dim` must be > 0"));
        }
        if self.reevaluate_factor == 0 {
            return Err(Error::config("field `reevaluate_factor` must be >= 1"));
        }
        if let Some(order) = &self.class_order {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != order.len() {
                return Err(Error::config("field `class_order` repeats a class"));
            }
            if order.len() < self.schedule.total_classes() {
                return Err(Error::config(format!(
                    "field `class_order` lists {} classes but the schedule needs {}",
                    order.len(),
                    self.schedule.total_classes()
                )));
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let s = &self.schedule;
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("dataset", self.dataset.to_string());
        line("composition", self.composition.to_string());
        line("schedule.num_sessions", s.num_sessions.to_string());
        line("schedule.base_classes", s.base_classes.to_string());
        line("schedule.classes_per_increment", s.classes_per_increment.to_string());
        line("schedule.samples_per_base_class", s.samples_per_base_class.to_string());
        line(
            "schedule.samples_per_increment_class",
            s.samples_per_increment_class.to_string(),
        );
        line("schedule.memory_size", s.memory_size.to_string());
        line("schedule.resolution", s.resolution.to_string());
        line("schedule.channels", s.channels.to_string());
        line("selector", self.selector.to_string());
        line("similarity", self.similarity.to_string());
        line("expansion_variant", self.expansion_variant.to_string());
        line("alpha", format!("{:?}", self.alpha));
        line("beta", format!("{:?}", self.beta));
        line("tau", format!("{:?}", self.tau));
        line("momentum", format!("{:?}", self.momentum));
        line("eta", format!("{:?}", self.eta));
        line("lr_base", format!("{:?}", self.lr_base));
        line("lr_incremental", format!("{:?}", self.lr_incremental));
        line("epochs_base", self.epochs_base.to_string());
        line("epochs_incremental", self.epochs_incremental.to_string());
        line("queue_length", self.queue_length.to_string());
        line("seed", self.seed.to_string());
        line("batch_size", self.batch_size.to_string());
        line("sgd_momentum", format!("{:?}", self.sgd_momentum));
        line("weight_decay", format!("{:?}", self.weight_decay));
        line("backbone", self.backbone.as_str().to_string());
        line("hidden_dims", join(&self.hidden_dims));
        line("projection_dim", self.projection_dim.to_string());
        line("reduce_dim", self.reduce_dim.to_string());
        line("cumulative_rule", self.cumulative_rule.as_str().to_string());
        line("reevaluate_factor", self.reevaluate_factor.to_string());
        line("intra_probe", self.intra_probe.to_string());
        line(
            "class_order",
            self.class_order
                .as_deref()
                .map_or_else(|| "ascending".to_string(), join),
        );
        line(
            "data_dir",
            self.data_dir
                .as_ref()
                .map_or_else(String::new, |p| p.display().to_string()),
        );
        line("synthetic.noise", format!("{:?}", self.synthetic_noise));
        line(
            "synthetic.test_per_class",
            self.synthetic_test_per_class.to_string(),
        );
        out
    }

    pub fn epochs_for(&self, session: usize) -> usize {
        if session == 0 {
            self.epochs_base
        } else {
            self.epochs_incremental
        }
    }

    pub fn lr_for(&self, session: usize) -> f64 {
        if session == 0 {
            self.lr_base
        } else {
            self.lr_incremental
        }
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}
