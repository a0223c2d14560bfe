//! Run configuration files.
//!
//! The format is flat `key = value` text with `#` comments and optional
//! `[section]` headers. Every key name is unique across sections, so an
//! override may name a key either bare (`epochs=10`) or qualified
//! (`schedule.epochs=10`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{self, IdxDataset, LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{self, CdaModel, ModelDims};
use crate::schedule::ScheduleConfig;
use crate::trainer::TrainConfig;

pub const OUT_DIR_ENV: &str = "CDA_OUT_DIR";

// model init draws from its own seed so the data and batch streams stay put
const MODEL_SEED_SALT: u64 = 0x6d6f_6465_6c00_0000;

/// Every recognised key and its section, in canonical order.
const KEYS: &[(&str, &str)] = &[
    ("experiment", "name"),
    ("experiment", "out_dir"),
    ("data", "dataset"),
    ("data", "data_seed"),
    ("data", "n_source"),
    ("data", "n_target"),
    ("data", "noise"),
    ("data", "source_rotation"),
    ("data", "target_rotation"),
    ("data", "target_translate_x"),
    ("data", "target_translate_y"),
    ("data", "source_images"),
    ("data", "source_labels"),
    ("data", "target_images"),
    ("data", "target_labels"),
    ("data", "limit"),
    ("data", "target_shift"),
    ("model", "generator_hidden"),
    ("model", "embed_dim"),
    ("model", "head_hidden"),
    ("model", "dropout"),
    ("train", "lr0"),
    ("train", "batch_size"),
    ("train", "tau"),
    ("train", "lr_decay"),
    ("train", "lr_period"),
    ("train", "weight_decay"),
    ("train", "adam_beta1"),
    ("train", "adam_beta2"),
    ("train", "adam_eps"),
    ("train", "seed"),
    ("train", "contrastive_enabled"),
    ("train", "adversarial_enabled"),
    ("train", "checkpoint_every"),
    ("schedule", "epochs"),
    ("schedule", "stage1_end"),
    ("schedule", "crosscl_start"),
    ("schedule", "gamma"),
    ("schedule", "alpha"),
];

fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, k)| *k == key).map(|(s, _)| *s)
}

/// Raw key/value pairs, later entries winning.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        let mut problems = Vec::new();
        let mut section: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                problems.push(format!("line {}: expected `key = value`, got `{line}`", i + 1));
                continue;
            };
            if let Err(e) = raw.set(k.trim(), v.trim(), section.as_deref()) {
                problems.push(format!("line {}: {e}", i + 1));
            }
        }
        if problems.is_empty() {
            Ok(raw)
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` or `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(vec![format!("override `{spec}` is not key=value")]))?;
        let k = k.trim();
        let (section, key) = match k.split_once('.') {
            Some((s, key)) => (Some(s), key),
            None => (None, k),
        };
        self.set(key, v.trim(), section).map_err(|e| Error::InvalidConfig(vec![e]))
    }

    fn set(&mut self, key: &str, value: &str, section: Option<&str>) -> std::result::Result<(), String> {
        let expected = section_of(key).ok_or_else(|| format!("unknown key `{key}`"))?;
        if let Some(s) = section {
            if s != expected {
                return Err(format!("key `{key}` belongs to section [{expected}], not [{s}]"));
            }
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    TwoMoons {
        n_source: usize,
        n_target: usize,
        noise: f64,
        source_rotation: f64,
        target_rotation: f64,
        target_translate: [f64; 2],
    },
    Idx {
        source_images: PathBuf,
        source_labels: PathBuf,
        target_images: PathBuf,
        target_labels: Option<PathBuf>,
        limit: usize,
        colorize_target: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub generator_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            generator_hidden: vec![64, 64],
            embed_dim: 32,
            head_hidden: nn::DEFAULT_HEAD_HIDDEN.to_vec(),
            dropout: nn::DEFAULT_DROPOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub out_dir: Option<PathBuf>,
    pub data: DataSpec,
    pub data_seed: u64,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

/// Typed field extraction that records every failure instead of stopping.
struct Reader<'a> {
    raw: &'a RawConfig,
    problems: Vec<String>,
}

impl Reader<'_> {
    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T
    where
        T::Err: std::fmt::Display,
    {
        match self.raw.get(key) {
            None => default,
            Some(v) => v.parse().unwrap_or_else(|e| {
                self.problems.push(format!("{key}: cannot parse `{v}`: {e}"));
                default
            }),
        }
    }

    fn flag(&mut self, key: &str, default: bool) -> bool {
        match self.raw.get(key) {
            None => default,
            Some("true" | "on" | "yes" | "1") => true,
            Some("false" | "off" | "no" | "0") => false,
            Some(v) => {
                self.problems.push(format!("{key}: expected a boolean, got `{v}`"));
                default
            }
        }
    }

    fn list(&mut self, key: &str, default: Vec<usize>) -> Vec<usize> {
        match self.raw.get(key) {
            None => default,
            Some(v) => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect();
                parsed.unwrap_or_else(|_| {
                    self.problems.push(format!("{key}: expected comma-separated integers, got `{v}`"));
                    default
                })
            }
        }
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.raw.get(key).map(PathBuf::from)
    }
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut raw = RawConfig::from_file(path)?;
        let mut problems = Vec::new();
        for o in overrides {
            if let Err(Error::InvalidConfig(p)) = raw.apply_override(o) {
                problems.extend(p);
            }
        }
        if !problems.is_empty() {
            return Err(Error::InvalidConfig(problems));
        }
        Self::from_raw(&raw)
    }

    /// Builds and validates a configuration, reporting every problem at once.
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut r = Reader {
            raw,
            problems: Vec::new(),
        };
        let d = TrainConfig::default();
        let dataset = raw.get("dataset").unwrap_or("two_moons").to_string();
        let data = match dataset.as_str() {
            "two_moons" | "two-moons" => DataSpec::TwoMoons {
                n_source: r.parsed("n_source", 1000),
                n_target: r.parsed("n_target", 1000),
                noise: r.parsed("noise", 0.1),
                source_rotation: r.parsed("source_rotation", 0.0),
                target_rotation: r.parsed("target_rotation", 30.0),
                target_translate: [r.parsed("target_translate_x", 0.0), r.parsed("target_translate_y", 0.0)],
            },
            "idx" => {
                let need = |r: &mut Reader, key: &str| {
                    r.path(key).unwrap_or_else(|| {
                        r.problems.push(format!("{key} is required for dataset = idx"));
                        PathBuf::new()
                    })
                };
                let source_images = need(&mut r, "source_images");
                let source_labels = need(&mut r, "source_labels");
                let target_images = need(&mut r, "target_images");
                let shift = raw.get("target_shift").unwrap_or("none");
                let colorize_target = match shift {
                    "colorize" => true,
                    "none" => false,
                    other => {
                        r.problems.push(format!("target_shift must be `colorize` or `none`, got `{other}`"));
                        false
                    }
                };
                DataSpec::Idx {
                    source_images,
                    source_labels,
                    target_images,
                    target_labels: r.path("target_labels"),
                    limit: r.parsed("limit", 2000),
                    colorize_target,
                }
            }
            other => {
                r.problems.push(format!("unknown dataset `{other}` (expected two_moons or idx)"));
                DataSpec::TwoMoons {
                    n_source: 0,
                    n_target: 0,
                    noise: 0.0,
                    source_rotation: 0.0,
                    target_rotation: 0.0,
                    target_translate: [0.0, 0.0],
                }
            }
        };
        let m = ModelSpec::default();
        let model = ModelSpec {
            generator_hidden: r.list("generator_hidden", m.generator_hidden),
            embed_dim: r.parsed("embed_dim", m.embed_dim),
            head_hidden: r.list("head_hidden", m.head_hidden),
            dropout: r.parsed("dropout", m.dropout),
        };
        let schedule = ScheduleConfig {
            epochs: r.parsed("epochs", d.schedule.epochs),
            stage1_end: r.parsed("stage1_end", d.schedule.stage1_end),
            crosscl_start: r.parsed("crosscl_start", d.schedule.crosscl_start),
            gamma: r.parsed("gamma", d.schedule.gamma),
            alpha: r.parsed("alpha", d.schedule.alpha),
        };
        let train = TrainConfig {
            lr0: r.parsed("lr0", d.lr0),
            batch_size: r.parsed("batch_size", d.batch_size),
            schedule,
            tau: r.parsed("tau", d.tau),
            lr_decay: r.parsed("lr_decay", d.lr_decay),
            lr_period: r.parsed("lr_period", d.lr_period),
            weight_decay: r.parsed("weight_decay", d.weight_decay),
            adam_beta1: r.parsed("adam_beta1", d.adam_beta1),
            adam_beta2: r.parsed("adam_beta2", d.adam_beta2),
            adam_eps: r.parsed("adam_eps", d.adam_eps),
            seed: r.parsed("seed", d.seed),
            contrastive_enabled: r.flag("contrastive_enabled", d.contrastive_enabled),
            adversarial_enabled: r.flag("adversarial_enabled", d.adversarial_enabled),
            checkpoint_every: r.parsed("checkpoint_every", d.checkpoint_every),
        };
        let cfg = RunConfig {
            name: raw.get("name").unwrap_or("experiment").to_string(),
            out_dir: r.path("out_dir"),
            data,
            data_seed: r.parsed("data_seed", 1),
            model,
            train,
        };
        let mut problems = r.problems;
        problems.extend(cfg.violations());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.train.violations();
        if self.model.embed_dim == 0 {
            v.push("embed_dim must be > 0".into());
        }
        if self.model.generator_hidden.iter().chain(&self.model.head_hidden).any(|&w| w == 0) {
            v.push("layer widths must be > 0".into());
        }
        if !(0.0..=nn::MAX_DROPOUT).contains(&self.model.dropout) {
            v.push(format!("dropout must lie in [0, {}], got {}", nn::MAX_DROPOUT, self.model.dropout));
        }
        match &self.data {
            DataSpec::TwoMoons {
                n_source,
                n_target,
                noise,
                ..
            } => {
                if *n_source < 2 || *n_target < 2 {
                    v.push("n_source and n_target must be >= 2".into());
                }
                if !(*noise >= 0.0 && noise.is_finite()) {
                    v.push(format!("noise must be >= 0, got {noise}"));
                }
            }
            DataSpec::Idx {
                source_images,
                source_labels,
                target_images,
                target_labels,
                limit,
                colorize_target,
            } => {
                for p in [Some(source_images), Some(source_labels), Some(target_images), target_labels.as_ref()]
                    .into_iter()
                    .flatten()
                {
                    if !p.as_os_str().is_empty() && !p.exists() {
                        v.push(format!("path does not exist: {}", p.display()));
                    }
                }
                if *limit == 0 {
                    v.push("limit must be > 0".into());
                }
                if *colorize_target && target_labels.is_none() {
                    v.push("target_shift = colorize needs target_labels (kept hidden during training)".into());
                }
            }
        }
        v
    }

    /// Output directory: the configured one, else `$CDA_OUT_DIR`, else `runs/<name>`.
    pub fn resolve_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    /// Every setting rendered as sorted `section.key = value` lines.
    pub fn canonical(&self) -> String {
        let mut kv: Vec<(&str, String)> = vec![
            ("experiment.name", self.name.clone()),
            ("data.data_seed", self.data_seed.to_string()),
            ("model.generator_hidden", join(&self.model.generator_hidden)),
            ("model.embed_dim", self.model.embed_dim.to_string()),
            ("model.head_hidden", join(&self.model.head_hidden)),
            ("model.dropout", format!("{:?}", self.model.dropout)),
        ];
        match &self.data {
            DataSpec::TwoMoons {
                n_source,
                n_target,
                noise,
                source_rotation,
                target_rotation,
                target_translate,
            } => kv.extend([
                ("data.dataset", "two_moons".to_string()),
                ("data.n_source", n_source.to_string()),
                ("data.n_target", n_target.to_string()),
                ("data.noise", format!("{noise:?}")),
                ("data.source_rotation", format!("{source_rotation:?}")),
                ("data.target_rotation", format!("{target_rotation:?}")),
                ("data.target_translate_x", format!("{:?}", target_translate[0])),
                ("data.target_translate_y", format!("{:?}", target_translate[1])),
            ]),
            DataSpec::Idx {
                source_images,
                source_labels,
                target_images,
                target_labels,
                limit,
                colorize_target,
            } => {
                kv.extend([
                    ("data.dataset", "idx".to_string()),
                    ("data.source_images", source_images.display().to_string()),
                    ("data.source_labels", source_labels.display().to_string()),
                    ("data.target_images", target_images.display().to_string()),
                    ("data.limit", limit.to_string()),
                    ("data.target_shift", if *colorize_target { "colorize" } else { "none" }.to_string()),
                ]);
                if let Some(p) = target_labels {
                    kv.push(("data.target_labels", p.display().to_string()));
                }
            }
        }
        let t = &self.train;
        let s = &t.schedule;
        kv.extend([
            ("train.lr0", format!("{:?}", t.lr0)),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.tau", format!("{:?}", t.tau)),
            ("train.lr_decay", format!("{:?}", t.lr_decay)),
            ("train.lr_period", t.lr_period.to_string()),
            ("train.weight_decay", format!("{:?}", t.weight_decay)),
            ("train.adam_beta1", format!("{:?}", t.adam_beta1)),
            ("train.adam_beta2", format!("{:?}", t.adam_beta2)),
            ("train.adam_eps", format!("{:?}", t.adam_eps)),
            ("train.seed", t.seed.to_string()),
            ("train.contrastive_enabled", t.contrastive_enabled.to_string()),
            ("train.adversarial_enabled", t.adversarial_enabled.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("schedule.epochs", s.epochs.to_string()),
            ("schedule.stage1_end", s.stage1_end.to_string()),
            ("schedule.crosscl_start", s.crosscl_start.to_string()),
            ("schedule.gamma", format!("{:?}", s.gamma)),
            ("schedule.alpha", format!("{:?}", s.alpha)),
        ]);
        kv.sort();
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of [`RunConfig::canonical`]; stored in checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    pub fn build_datasets(&self) -> Result<(LabeledDataset, UnlabeledDataset)> {
        match &self.data {
            DataSpec::TwoMoons {
                n_source,
                n_target,
                noise,
                source_rotation,
                target_rotation,
                target_translate,
            } => {
                let s = data::gen_two_moons(*n_source, *noise, *source_rotation, [0.0, 0.0], self.data_seed)?;
                let t = data::gen_two_moons(
                    *n_target,
                    *noise,
                    *target_rotation,
                    *target_translate,
                    self.data_seed.wrapping_add(1),
                )?;
                Ok((s, t.into_unlabeled()))
            }
            DataSpec::Idx {
                source_images,
                source_labels,
                target_images,
                target_labels,
                limit,
                colorize_target,
            } => {
                let IdxDataset::Labeled(source) = data::load_idx(source_images, Some(source_labels), *limit)? else {
                    unreachable!("labels were supplied");
                };
                let target = data::load_idx(target_images, target_labels.as_deref(), *limit)?;
                match (target, colorize_target) {
                    (IdxDataset::Labeled(t), true) => Ok((
                        data::gray_to_rgb(&source)?,
                        data::colorize_shift(&t, self.data_seed)?.into_unlabeled(),
                    )),
                    (IdxDataset::Labeled(t), false) => Ok((source, t.into_unlabeled())),
                    (IdxDataset::Unlabeled(t), false) => Ok((source, t)),
                    (IdxDataset::Unlabeled(_), true) => Err(Error::InvalidConfig(vec![
                        "target_shift = colorize needs target_labels".into(),
                    ])),
                }
            }
        }
    }

    pub fn model_dims(&self, in_dim: usize, num_classes: usize) -> ModelDims {
        let mut generator = vec![in_dim];
        generator.extend(&self.model.generator_hidden);
        ModelDims {
            generator,
            embed_dim: self.model.embed_dim,
            num_classes,
            head_hidden: self.model.head_hidden.clone(),
            dropout: self.model.dropout,
        }
    }

    pub fn init_model(&self, in_dim: usize, num_classes: usize) -> Result<CdaModel> {
        nn::init_model_with(&self.model_dims(in_dim, num_classes), self.train.seed ^ MODEL_SEED_SALT)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}
