//! Run configuration: flat `key = value` text with dotted sections.
//!
//! ```text
//! seed = 3
//! policy = adaptformer
//! [train]
//! epochs = 5        # same as train.epochs = 5
//! ```
//!
//! A `[section]` line prefixes every following key with `section.`; `[]`
//! resets it. `#` starts a comment. Unknown keys are config errors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneSpec;
use crate::data::{AugSchedule, GroupThresholds, LongTailParams, ScheduleFn};
use crate::error::{Error, Result};
use crate::head::HeadKind;
use crate::inference::DEFAULT_EXPANDED_SIZE;
use crate::peft::FineTunePolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTag {
    Ce,
    La,
}

impl FromStr for LossTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossTag::Ce),
            "la" => Ok(LossTag::La),
            _ => Err(Error::config(format!("unknown loss {s:?}; expected ce or la"))),
        }
    }
}

impl fmt::Display for LossTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossTag::Ce => "ce",
            LossTag::La => "la",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentTag {
    Mda(ScheduleFn),
    Rrc,
    None,
}

impl FromStr for AugmentTag {
    type Err = Error;
    /// `mda` (convex schedule), `mda:<g>`, `rrc` or `none`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("mda", g)) => Ok(AugmentTag::Mda(g.parse()?)),
            None if s == "mda" => Ok(AugmentTag::Mda(ScheduleFn::Convex)),
            None if s == "rrc" => Ok(AugmentTag::Rrc),
            None if s == "none" => Ok(AugmentTag::None),
            _ => Err(Error::config(format!("unknown augmentation {s:?}; expected mda[:g], rrc or none"))),
        }
    }
}

impl fmt::Display for AugmentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentTag::Mda(g) => write!(f, "mda:{g}"),
            AugmentTag::Rrc => f.write_str("rrc"),
            AugmentTag::None => f.write_str("none"),
        }
    }
}

/// How the classifier rows are set before fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadInit {
    /// Semantic init when a prototype file is given, class means otherwise.
    Auto,
    Semantic,
    ClassMean,
    Random,
}

impl FromStr for HeadInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(HeadInit::Auto),
            "sai" | "semantic" => Ok(HeadInit::Semantic),
            "class_mean" => Ok(HeadInit::ClassMean),
            "random" => Ok(HeadInit::Random),
            _ => Err(Error::config(format!("unknown head init {s:?}; expected auto, sai, class_mean or random"))),
        }
    }
}

impl fmt::Display for HeadInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadInit::Auto => "auto",
            HeadInit::Semantic => "sai",
            HeadInit::ClassMean => "class_mean",
            HeadInit::Random => "random",
        })
    }
}

/// Optimizer and epoch budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Epoch budget `lr` was tuned for; the effective rate is `lr·base_epochs/epochs`.
    pub base_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Schedule {
    pub fn effective_lr(&self) -> f64 {
        if self.epochs == 0 || self.epochs == self.base_epochs {
            self.lr
        } else {
            self.lr * self.base_epochs as f64 / self.epochs as f64
        }
    }
}

/// Balanced source data and schedule for the foundation backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub template_seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub augment: AugmentTag,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    Synthetic(LongTailParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 picks the machine default.
    pub threads: usize,
    pub spec: BackboneSpec,
    /// Pretrained backbone checkpoint; `None` trains from the random init.
    pub backbone: Option<PathBuf>,
    pub policy: FineTunePolicy,
    pub head: HeadKind,
    pub head_init: HeadInit,
    pub prototypes: Option<PathBuf>,
    pub loss: LossTag,
    pub schedule: Schedule,
    pub augment: AugmentTag,
    pub crop_scale: (f64, f64),
    /// Five-crop ensembling at evaluation with this expanded size.
    pub tte: Option<usize>,
    pub data: DataSource,
    pub thresholds: GroupThresholds,
    pub pretrain: PretrainConfig,
}

/// `e` rescaled from 224-pixel inputs to `side`, at least 1.
pub fn scaled_expanded_size(side: usize) -> usize {
    ((DEFAULT_EXPANDED_SIZE * side) as f64 / 224.0).round().max(1.0) as usize
}

pub fn desk_spec() -> BackboneSpec {
    BackboneSpec::new(2, 32, 4, 4, 16, 3).expect("valid desk spec")
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = desk_spec();
        let mut data = LongTailParams::new(10, 500, 100.0, 20, spec.image_side, 0);
        data.template_seed = 1;
        Self {
            seed: 0,
            threads: 0,
            spec,
            backbone: None,
            policy: FineTunePolicy::adaptformer(),
            head: HeadKind::cosine(),
            head_init: HeadInit::Auto,
            prototypes: None,
            loss: LossTag::La,
            schedule: Schedule { epochs: 5, batch: 32, lr: 0.02, base_epochs: 5, momentum: 0.9, weight_decay: 5e-4 },
            augment: AugmentTag::Mda(ScheduleFn::Convex),
            crop_scale: AugSchedule::DEFAULT_SCALE,
            tte: Some(scaled_expanded_size(spec.image_side)),
            data: DataSource::Synthetic(data),
            thresholds: GroupThresholds::default(),
            pretrain: PretrainConfig {
                classes: 10,
                per_class: 100,
                test_per_class: 20,
                template_seed: 1000,
                epochs: 20,
                batch: 32,
                lr: 0.05,
                augment: AugmentTag::None,
            },
        }
    }
}

/// Raw `key → value` pairs, sorted by key.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let name = inner
                .strip_suffix(']')
                .ok_or_else(|| Error::config(format!("line {}: unterminated section header", n + 1)))?
                .trim();
            section = if name.is_empty() { String::new() } else { format!("{name}.") };
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
        let key = format!("{section}{}", k.trim());
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(format!("line {}: duplicate key {key}", n + 1)));
        }
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let pairs = parse_pairs(text)?;
        // These replace whole groups of fields, so they go first.
        const FIRST: [&str; 2] = ["model.preset", "data.path"];
        for k in FIRST {
            if let Some(v) = pairs.get(k) {
                cfg.set(k, v)?;
            }
        }
        for (k, v) in pairs.iter().filter(|(k, _)| !FIRST.contains(&k.as_str())) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; a missing file is a config error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn synthetic(&mut self, key: &str) -> Result<&mut LongTailParams> {
        match &mut self.data {
            DataSource::Synthetic(p) => Ok(p),
            DataSource::File(_) => Err(Error::config(format!("{key} has no effect when data.path is set"))),
        }
    }

    fn set_spec(&mut self, f: impl FnOnce(&mut BackboneSpec)) {
        f(&mut self.spec);
        if let DataSource::Synthetic(p) = &mut self.data {
            p.image_side = self.spec.image_side;
            p.channels = self.spec.channels;
        }
    }

    /// Applies a single `key = value` override without revalidating.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            "model.preset" => {
                let spec = match v {
                    "desk" => desk_spec(),
                    _ => BackboneSpec::preset(v).ok_or_else(|| Error::config(format!("unknown model preset {v:?}")))?,
                };
                self.set_spec(|s| *s = spec)
            }
            "model.layers" => {
                let n = num(key, v)?;
                self.set_spec(|s| s.layers = n)
            }
            "model.dim" => {
                let n = num(key, v)?;
                self.set_spec(|s| s.dim = n)
            }
            "model.heads" => {
                let n = num(key, v)?;
                self.set_spec(|s| s.heads = n)
            }
            "model.patch" => {
                let n = num(key, v)?;
                self.set_spec(|s| s.patch = n)
            }
            "model.image_side" => {
                let n = num(key, v)?;
                self.set_spec(|s| s.image_side = n)
            }
            "model.channels" => {
                let n = num(key, v)?;
                self.set_spec(|s| s.channels = n)
            }
            "model.backbone" => self.backbone = optional_path(v),
            "policy" => self.policy = v.parse()?,
            "head.kind" => self.head = v.parse()?,
            "head.init" => self.head_init = v.parse()?,
            "head.prototypes" => self.prototypes = optional_path(v),
            "loss" => self.loss = v.parse()?,
            "train.epochs" => self.schedule.epochs = num(key, v)?,
            "train.batch" => self.schedule.batch = num(key, v)?,
            "train.lr" => self.schedule.lr = num(key, v)?,
            "train.base_epochs" => self.schedule.base_epochs = num(key, v)?,
            "train.momentum" => self.schedule.momentum = num(key, v)?,
            "train.weight_decay" => self.schedule.weight_decay = num(key, v)?,
            "augment" => self.augment = v.parse()?,
            "augment.lambda0" => self.crop_scale.0 = num(key, v)?,
            "augment.lambda1" => self.crop_scale.1 = num(key, v)?,
            "tte" => {
                let on = flag(key, v)?;
                self.tte = on.then(|| self.tte.unwrap_or_else(|| scaled_expanded_size(self.spec.image_side)));
            }
            "tte.expanded" => {
                let e = if v == "auto" { scaled_expanded_size(self.spec.image_side) } else { num(key, v)? };
                if self.tte.is_some() {
                    self.tte = Some(e);
                }
            }
            "data.path" => {
                self.data = match optional_path(v) {
                    Some(p) => DataSource::File(p),
                    None => {
                        let mut p = RunConfig::default_data();
                        p.image_side = self.spec.image_side;
                        p.channels = self.spec.channels;
                        DataSource::Synthetic(p)
                    }
                }
            }
            "data.classes" => self.synthetic(key)?.classes = num(key, v)?,
            "data.n_max" => self.synthetic(key)?.n_max = num(key, v)?,
            "data.imbalance" => self.synthetic(key)?.imbalance = num(key, v)?,
            "data.test_per_class" => self.synthetic(key)?.test_per_class = num(key, v)?,
            "data.noise" => self.synthetic(key)?.noise_std = num(key, v)?,
            "data.separation" => self.synthetic(key)?.separation = num(key, v)?,
            "data.grid" => self.synthetic(key)?.grid = num(key, v)?,
            "data.seed" => self.synthetic(key)?.seed = num(key, v)?,
            "data.template_seed" => self.synthetic(key)?.template_seed = num(key, v)?,
            "groups.hi" => self.thresholds.hi = num(key, v)?,
            "groups.lo" => self.thresholds.lo = num(key, v)?,
            "pretrain.classes" => self.pretrain.classes = num(key, v)?,
            "pretrain.per_class" => self.pretrain.per_class = num(key, v)?,
            "pretrain.test_per_class" => self.pretrain.test_per_class = num(key, v)?,
            "pretrain.template_seed" => self.pretrain.template_seed = num(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = num(key, v)?,
            "pretrain.batch" => self.pretrain.batch = num(key, v)?,
            "pretrain.lr" => self.pretrain.lr = num(key, v)?,
            "pretrain.augment" => self.pretrain.augment = v.parse()?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    fn default_data() -> LongTailParams {
        match RunConfig::default().data {
            DataSource::Synthetic(p) => p,
            DataSource::File(_) => unreachable!("default data is generated"),
        }
    }

    /// Checks ranges, the spec/policy combination and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::config(other.to_string()),
        };
        self.spec.validate().map_err(cfg_err)?;
        self.policy.validate(&self.spec).map_err(cfg_err)?;
        self.head.validate().map_err(cfg_err)?;
        let s = &self.schedule;
        if s.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        if s.batch == 0 {
            return Err(Error::config("train.batch must be at least 1"));
        }
        if !(s.lr >= 0.0 && s.lr.is_finite()) || !(0.0..1.0).contains(&s.momentum) || !(s.weight_decay >= 0.0) {
            return Err(Error::config("train.lr, train.momentum or train.weight_decay out of range"));
        }
        if s.base_epochs == 0 {
            return Err(Error::config("train.base_epochs must be at least 1"));
        }
        AugSchedule::new(self.crop_scale.0, self.crop_scale.1, ScheduleFn::Convex, s.epochs)?;
        if self.thresholds.lo >= self.thresholds.hi {
            return Err(Error::config("groups.lo must be below groups.hi"));
        }
        if let DataSource::Synthetic(p) = &self.data {
            if p.image_side != self.spec.image_side || p.channels != self.spec.channels {
                return Err(Error::config(format!(
                    "generated images are {}x{}x{} but the model expects {}x{}x{}",
                    p.image_side, p.image_side, p.channels, self.spec.image_side, self.spec.image_side, self.spec.channels
                )));
            }
        }
        if self.head_init == HeadInit::Semantic && self.prototypes.is_none() {
            return Err(Error::config("head.init = sai needs head.prototypes"));
        }
        let files = [
            self.backbone.as_deref(),
            self.prototypes.as_deref(),
            match &self.data {
                DataSource::File(p) => Some(p.as_path()),
                DataSource::Synthetic(_) => None,
            },
        ];
        for p in files.into_iter().flatten() {
            if !p.exists() {
                return Err(Error::config(format!("referenced file {} does not exist", p.display())));
            }
        }
        let p = &self.pretrain;
        if p.classes < 2 || p.per_class == 0 || p.test_per_class == 0 || p.batch == 0 {
            return Err(Error::config("pretrain needs at least 2 classes and non-empty splits"));
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let s = &self.spec;
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("threads = {}", self.threads),
            format!("model.layers = {}", s.layers),
            format!("model.dim = {}", s.dim),
            format!("model.heads = {}", s.heads),
            format!("model.patch = {}", s.patch),
            format!("model.image_side = {}", s.image_side),
            format!("model.channels = {}", s.channels),
            format!("model.backbone = {}", path(&self.backbone)),
            format!("policy = {}", self.policy),
            format!("head.kind = {}", self.head),
            format!("head.init = {}", self.head_init),
            format!("head.prototypes = {}", path(&self.prototypes)),
            format!("loss = {}", self.loss),
            format!("train.epochs = {}", self.schedule.epochs),
            format!("train.batch = {}", self.schedule.batch),
            format!("train.lr = {}", self.schedule.lr),
            format!("train.base_epochs = {}", self.schedule.base_epochs),
            format!("train.momentum = {}", self.schedule.momentum),
            format!("train.weight_decay = {}", self.schedule.weight_decay),
            format!("augment = {}", self.augment),
            format!("augment.lambda0 = {}", self.crop_scale.0),
            format!("augment.lambda1 = {}", self.crop_scale.1),
            format!("tte = {}", self.tte.is_some()),
        ];
        if let Some(e) = self.tte {
            lines.push(format!("tte.expanded = {e}"));
        }
        match &self.data {
            DataSource::File(p) => lines.push(format!("data.path = {}", p.display())),
            DataSource::Synthetic(p) => lines.extend([
                format!("data.classes = {}", p.classes),
                format!("data.n_max = {}", p.n_max),
                format!("data.imbalance = {}", p.imbalance),
                format!("data.test_per_class = {}", p.test_per_class),
                format!("data.noise = {}", p.noise_std),
                format!("data.separation = {}", p.separation),
                format!("data.grid = {}", p.grid),
                format!("data.seed = {}", p.seed),
                format!("data.template_seed = {}", p.template_seed),
            ]),
        }
        let p = &self.pretrain;
        lines.extend([
            format!("groups.hi = {}", self.thresholds.hi),
            format!("groups.lo = {}", self.thresholds.lo),
            format!("pretrain.classes = {}", p.classes),
            format!("pretrain.per_class = {}", p.per_class),
            format!("pretrain.test_per_class = {}", p.test_per_class),
            format!("pretrain.template_seed = {}", p.template_seed),
            format!("pretrain.epochs = {}", p.epochs),
            format!("pretrain.batch = {}", p.batch),
            format!("pretrain.lr = {}", p.lr),
            format!("pretrain.augment = {}", p.augment),
        ]);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_prefix_keys() {
        let cfg = RunConfig::parse("seed = 4\n[train]\nepochs = 3 # short\nlr=0.01\n[]\nloss = ce\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.schedule.epochs, 3);
        assert_eq!(cfg.schedule.lr, 0.01);
        assert_eq!(cfg.loss, LossTag::Ce);
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.set("policy", "mask:0.05:9").unwrap();
        cfg.set("head.kind", "cosine:15").unwrap();
        cfg.set("augment", "mda:concave").unwrap();
        cfg.set("tte.expanded", "3").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "bogus = 1",
            "train.epochs = 0",
            "seed = x",
            "seed = 1\nseed = 2",
            "[train\nepochs = 1",
            "model.dim = 30",
            "policy = partial:9",
            "groups.lo = 200",
            "head.prototypes = /nonexistent/protos.lftp",
            "head.init = sai",
            "data.path = /nonexistent/data.lfds",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(err.is_config(), "{text}: {err}");
        }
    }

    #[test]
    fn lr_follows_epoch_rule() {
        let mut s = RunConfig::default().schedule;
        assert_eq!(s.effective_lr(), 0.02);
        s.epochs = 10;
        assert!((s.effective_lr() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn expanded_size_scales_with_resolution() {
        assert_eq!(scaled_expanded_size(224), DEFAULT_EXPANDED_SIZE);
        assert_eq!(scaled_expanded_size(16), 2);
        assert_eq!(scaled_expanded_size(4), 1);
    }

    #[test]
    fn preset_applies_before_fields() {
        let cfg = RunConfig::parse("model.layers = 1\nmodel.preset = desk\nmodel.image_side = 8").unwrap();
        assert_eq!(cfg.spec.layers, 1);
        match cfg.data {
            DataSource::Synthetic(p) => assert_eq!(p.image_side, 8),
            DataSource::File(_) => panic!("expected generated data"),
        }
    }
}
