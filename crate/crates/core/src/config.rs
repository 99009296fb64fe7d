//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! seed = 7
//! model.channels = 4,6,8,10,12,14
//! train.lr0 = 0.01
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{NetworkSpec, NUM_SCALES};
use crate::error::{Error, Result};
use crate::noisy_student::{PseudoLabelConfig, DEFAULT_THRESHOLD};
use crate::train::{LrPolicy, TrainConfig};

const DEFAULT_POLY_POWER: f64 = 0.9;
const DEFAULT_STEP_MILESTONES: [usize; 3] = [30, 60, 90];
const DEFAULT_STEP_FACTOR: f64 = 0.1;

/// Every key understood by the parser, in serialization order.
pub const KEYS: &[&str] = &[
    "seed",
    "data.train",
    "data.val",
    "data.unlabeled",
    "output.dir",
    "model.channels",
    "model.blocks",
    "model.num_classes",
    "model.head_blocks",
    "model.merge_kernel",
    "model.aux_supervision",
    "train.batch_size",
    "train.epochs",
    "train.lr0",
    "train.lr_policy",
    "train.poly_power",
    "train.step_milestones",
    "train.step_factor",
    "train.momentum",
    "train.weight_decay",
    "train.aux_weight",
    "train.log_every",
    "augment.crop",
    "augment.scale_min",
    "augment.scale_max",
    "augment.hflip_prob",
    "augment.brightness",
    "augment.contrast",
    "augment.saturation",
    "augment.cls_resize_min",
    "augment.cls_resize_max",
    "augment.cls_crop",
    "pseudo.threshold",
];

/// Everything a command needs for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Seeds parameter initialization and the training stream.
    pub seed: u64,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub unlabeled_data: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub spec: NetworkSpec,
    pub train: TrainConfig,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_data: None,
            val_data: None,
            unlabeled_data: None,
            output_dir: PathBuf::from("runs"),
            spec: NetworkSpec::default(),
            train: TrainConfig::default(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

fn config_err(line: Option<usize>, msg: impl std::fmt::Display) -> Error {
    match line {
        Some(n) => Error::Config(format!("line {n}: {msg}")),
        None => Error::Config(msg.to_string()),
    }
}

struct Entry {
    line: usize,
    value: String,
}

fn parse_value<V: FromStr>(key: &str, e: &Entry) -> Result<V> {
    e.value
        .parse()
        .map_err(|_| config_err(Some(e.line), format!("{key}: cannot parse {:?}", e.value)))
}

fn parse_list<V: FromStr>(key: &str, e: &Entry) -> Result<Vec<V>> {
    if e.value.is_empty() {
        return Ok(Vec::new());
    }
    e.value
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| config_err(Some(e.line), format!("{key}: cannot parse list item {:?}", p.trim())))
        })
        .collect()
}

fn parse_bool(key: &str, e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        v => Err(config_err(Some(e.line), format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join<V: ToString>(values: &[V]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn widths(key: &str, e: &Entry) -> Result<[usize; NUM_SCALES]> {
    let v: Vec<usize> = parse_list(key, e)?;
    v.try_into()
        .map_err(|v: Vec<usize>| config_err(Some(e.line), format!("{key}: expected {NUM_SCALES} values, got {}", v.len())))
}

impl RunConfig {
    /// Defaults for classification pretraining: step schedule and lr 0.1.
    pub fn classification() -> Self {
        Self { train: TrainConfig::classification(), ..Self::default() }
    }

    pub fn pseudo(&self) -> PseudoLabelConfig {
        PseudoLabelConfig { threshold: self.threshold, output_dir: None }
    }

    /// Parses `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::default().overlay(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::default().overlay_file(path)
    }

    pub fn overlay_file(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(None, format!("cannot read {}: {e}", path.display())))?;
        self.overlay(&text)
    }

    /// Returns a copy of `self` with every key present in `text` replaced.
    pub fn overlay(&self, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| config_err(Some(line), format!("expected `key = value`, got {content:?}")))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(config_err(Some(line), format!("unknown key {key:?}")));
            }
            let entry = Entry { line, value: value.trim().to_string() };
            if let Some(prev) = entries.insert(key.to_string(), entry) {
                return Err(config_err(Some(line), format!("duplicate key {key:?} (first set on line {})", prev.line)));
            }
        }
        self.apply(&entries)
    }

    fn apply(&self, m: &BTreeMap<String, Entry>) -> Result<Self> {
        let mut c = self.clone();
        let path = |e: &Entry| (!e.value.is_empty()).then(|| PathBuf::from(&e.value));
        for (key, e) in m {
            let k = key.as_str();
            match k {
                "seed" => c.seed = parse_value(k, e)?,
                "data.train" => c.train_data = path(e),
                "data.val" => c.val_data = path(e),
                "data.unlabeled" => c.unlabeled_data = path(e),
                "output.dir" => {
                    c.output_dir = path(e).ok_or_else(|| config_err(Some(e.line), "output.dir must not be empty"))?
                }
                "model.num_classes" => c.spec.num_classes = parse_value(k, e)?,
                "model.head_blocks" => c.spec.head_blocks_per_scale = parse_value(k, e)?,
                "model.merge_kernel" => c.spec.merge_kernel = parse_value(k, e)?,
                "model.aux_supervision" => c.spec.aux_supervision = parse_bool(k, e)?,
                "train.batch_size" => c.train.batch_size = parse_value(k, e)?,
                "train.epochs" => c.train.epochs = parse_value(k, e)?,
                "train.lr0" => c.train.lr0 = parse_value(k, e)?,
                "train.momentum" => c.train.momentum = parse_value(k, e)?,
                "train.weight_decay" => c.train.weight_decay = parse_value(k, e)?,
                "train.aux_weight" => c.train.aux_weight = parse_value(k, e)?,
                "train.log_every" => c.train.log_every = parse_value(k, e)?,
                "augment.crop" => c.train.augment.crop = parse_value(k, e)?,
                "augment.scale_min" => c.train.augment.scale_range.0 = parse_value(k, e)?,
                "augment.scale_max" => c.train.augment.scale_range.1 = parse_value(k, e)?,
                "augment.hflip_prob" => c.train.augment.hflip_prob = parse_value(k, e)?,
                "augment.brightness" => c.train.augment.jitter.brightness = parse_value(k, e)?,
                "augment.contrast" => c.train.augment.jitter.contrast = parse_value(k, e)?,
                "augment.saturation" => c.train.augment.jitter.saturation = parse_value(k, e)?,
                "augment.cls_resize_min" => c.train.augment.cls_resize_range.0 = parse_value(k, e)?,
                "augment.cls_resize_max" => c.train.augment.cls_resize_range.1 = parse_value(k, e)?,
                "augment.cls_crop" => c.train.augment.cls_crop = parse_value(k, e)?,
                "pseudo.threshold" => c.threshold = parse_value(k, e)?,
                _ => {}
            }
        }
        if m.contains_key("model.channels") || m.contains_key("model.blocks") {
            let channels = match m.get("model.channels") {
                Some(e) => widths("model.channels", e)?,
                None => c.spec.channels().try_into().expect("six scales"),
            };
            let blocks = match m.get("model.blocks") {
                Some(e) => widths("model.blocks", e)?,
                None => c.spec.blocks().try_into().expect("six scales"),
            };
            let rebuilt = NetworkSpec::from_widths(channels, blocks, c.spec.num_classes);
            c.spec.scales = rebuilt.scales;
        }
        c.train.lr_policy = self.policy(m)?;
        c.train.seed = c.seed;
        Ok(c)
    }

    fn policy(&self, m: &BTreeMap<String, Entry>) -> Result<LrPolicy> {
        let (mut power, mut milestones, mut factor) =
            (DEFAULT_POLY_POWER, DEFAULT_STEP_MILESTONES.to_vec(), DEFAULT_STEP_FACTOR);
        let mut kind = match &self.train.lr_policy {
            LrPolicy::Poly { power: p } => {
                power = *p;
                "poly"
            }
            LrPolicy::Step { milestones: ms, factor: f } => {
                milestones = ms.clone();
                factor = *f;
                "step"
            }
        };
        if let Some(e) = m.get("train.lr_policy") {
            kind = match e.value.as_str() {
                "poly" => "poly",
                "step" => "step",
                v => return Err(config_err(Some(e.line), format!("train.lr_policy: expected poly or step, got {v:?}"))),
            };
        }
        if let Some(e) = m.get("train.poly_power") {
            power = parse_value("train.poly_power", e)?;
        }
        if let Some(e) = m.get("train.step_milestones") {
            milestones = parse_list("train.step_milestones", e)?;
        }
        if let Some(e) = m.get("train.step_factor") {
            factor = parse_value("train.step_factor", e)?;
        }
        Ok(if kind == "poly" { LrPolicy::Poly { power } } else { LrPolicy::Step { milestones, factor } })
    }

    /// Writes every key; parsing the result reproduces `self`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let t = &self.train;
        let a = &t.augment;
        kv("seed", self.seed.to_string());
        kv("data.train", path(&self.train_data));
        kv("data.val", path(&self.val_data));
        kv("data.unlabeled", path(&self.unlabeled_data));
        kv("output.dir", self.output_dir.display().to_string());
        kv("model.channels", join(&self.spec.channels()));
        kv("model.blocks", join(&self.spec.blocks()));
        kv("model.num_classes", self.spec.num_classes.to_string());
        kv("model.head_blocks", self.spec.head_blocks_per_scale.to_string());
        kv("model.merge_kernel", self.spec.merge_kernel.to_string());
        kv("model.aux_supervision", self.spec.aux_supervision.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.lr0", t.lr0.to_string());
        match &t.lr_policy {
            LrPolicy::Poly { power } => {
                kv("train.lr_policy", "poly".into());
                kv("train.poly_power", power.to_string());
            }
            LrPolicy::Step { milestones, factor } => {
                kv("train.lr_policy", "step".into());
                kv("train.step_milestones", join(milestones));
                kv("train.step_factor", factor.to_string());
            }
        }
        kv("train.momentum", t.momentum.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.aux_weight", t.aux_weight.to_string());
        kv("train.log_every", t.log_every.to_string());
        kv("augment.crop", a.crop.to_string());
        kv("augment.scale_min", a.scale_range.0.to_string());
        kv("augment.scale_max", a.scale_range.1.to_string());
        kv("augment.hflip_prob", a.hflip_prob.to_string());
        kv("augment.brightness", a.jitter.brightness.to_string());
        kv("augment.contrast", a.jitter.contrast.to_string());
        kv("augment.saturation", a.jitter.saturation.to_string());
        kv("augment.cls_resize_min", a.cls_resize_range.0.to_string());
        kv("augment.cls_resize_max", a.cls_resize_range.1.to_string());
        kv("augment.cls_crop", a.cls_crop.to_string());
        kv("pseudo.threshold", self.threshold.to_string());
        out
    }

    /// Checks value ranges and that every configured input path exists.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.train.validate()?;
        self.pseudo().validate()?;
        for (key, p) in [("data.train", &self.train_data), ("data.val", &self.val_data), ("data.unlabeled", &self.unlabeled_data)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::Dataset(format!("{key}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}
