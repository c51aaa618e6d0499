//! `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, keys are flat dotted names.
//! Unknown keys are rejected. Numeric values may be written as fractions such
//! as `8/255`. A resolved configuration can be written back with
//! [`ExperimentConfig::snapshot`]; parsing a snapshot yields the same
//! configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use rcs_core::attack::AttackConfig;
use rcs_core::data::SyntheticSpec;
use rcs_core::divergence::{Distance, DistanceKind};
use rcs_core::model::{EncoderConfig, NormMode};
use rcs_core::trainer::{LrSchedule, Mode, SelectionMethod, TrainConfig, TrainSchedule};

/// Every key with its default, in snapshot order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("output", "runs/default"),
    ("data.path", "none"),
    ("data.n", "5760"),
    ("data.dim", "16"),
    ("data.classes", "4"),
    ("data.labeled", "true"),
    ("data.separation", "3"),
    ("data.noise", "1"),
    ("data.seed", "0"),
    ("data.validation", "0.1"),
    ("model.hidden", "32"),
    ("model.embedding", "16"),
    ("model.projection", "auto"),
    ("model.head_hidden", "none"),
    ("model.norm", "none"),
    ("train.mode", "acl"),
    ("train.epochs", "100"),
    ("train.warmup", "0.1"),
    ("train.interval", "20"),
    ("train.batch_size", "512"),
    ("train.lr", "0.1"),
    ("train.lr_schedule", "cosine"),
    ("train.momentum", "0.9"),
    ("train.temperature", "0.1"),
    ("train.omega", "0"),
    ("train.strength", "1"),
    ("train.dynacl_period", "50"),
    ("train.dynacl_rate", "2/3"),
    ("train.trades_c", "6"),
    ("train.norm_momentum", "0.1"),
    ("attack.eps", "8/255"),
    ("attack.step_size", "2/255"),
    ("attack.steps", "5"),
    ("attack.clamp", "none"),
    ("attack.random_start", "false"),
    ("selection.method", "rcs"),
    ("selection.fraction", "0.1"),
    ("selection.lr", "0.01"),
    ("selection.steps", "3"),
    ("selection.distance", "kl"),
    ("selection.distance_temperature", "1"),
    ("selection.last_layer", "false"),
    ("selection.chunk", "none"),
    ("probe.test_fraction", "0.3"),
];

/// Head width used by contrastive modes when `model.projection = auto`.
pub const DEFAULT_PROJECTION: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Res<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Res<T> {
    Err(ConfigError(msg.into()))
}

pub fn valid_keys() -> String {
    KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
}

/// Accepts a decimal literal or `a/b`.
pub fn parse_number(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((a, b)) => {
            let (a, b) = (a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?);
            (b != 0.0).then_some(a / b)
        }
        None => s.parse().ok(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Dataset file; `None` generates the synthetic mixture.
    pub path: Option<PathBuf>,
    pub spec: SyntheticSpec,
    pub labeled: bool,
    /// Fraction held out as the validation set `U`.
    pub validation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataConfig,
    pub hidden: Vec<usize>,
    pub embedding: usize,
    /// `None` means: number of classes for supervised modes, otherwise
    /// [`DEFAULT_PROJECTION`].
    pub projection: Option<usize>,
    pub head_hidden: Option<usize>,
    pub norm: NormMode,
    pub train: TrainConfig,
    pub probe_test_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_pairs(&[]).expect("defaults are valid")
    }
}

/// Raw `key → value` assignments from a file and overrides.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Res<Self> {
        let mut raw = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return err(format!("line {}: expected `key = value`, got `{line}`", no + 1));
            };
            let k = k.trim();
            if raw.values.contains_key(k) {
                return err(format!("line {}: key `{k}` assigned twice", no + 1));
            }
            raw.set(k, v.trim()).map_err(|e| ConfigError(format!("line {}: {e}", no + 1)))?;
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> std::result::Result<Self, LoadError> {
        let text = std::fs::read_to_string(path).map_err(|e| LoadError::Io(path.to_path_buf(), e))?;
        Self::parse(&text).map_err(LoadError::Config)
    }

    /// Sets one key; unknown keys are rejected with the list of valid ones.
    pub fn set(&mut self, key: &str, value: &str) -> Res<()> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return err(format!("unknown key `{key}`; valid keys: {}", valid_keys()));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_assignment(&mut self, assignment: &str) -> Res<()> {
        match assignment.split_once('=') {
            Some((k, v)) => self.set(k.trim(), v.trim()),
            None => err(format!("override `{assignment}` is not of the form key=value")),
        }
    }

    pub fn resolve(&self) -> Res<ExperimentConfig> {
        let pairs: Vec<(&str, &str)> = self.values.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        ExperimentConfig::from_pairs(&pairs)
    }
}

#[derive(Debug)]
pub enum LoadError {
    Io(PathBuf, std::io::Error),
    Config(ConfigError),
}

struct Lookup<'a> {
    pairs: &'a [(&'a str, &'a str)],
}

impl Lookup<'_> {
    fn raw(&self, key: &str) -> &str {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .or_else(|| KEYS.iter().find(|(k, _)| *k == key).map(|(_, v)| *v))
            .expect("key is listed")
    }

    fn bad<T>(&self, key: &str, what: &str) -> Res<T> {
        err(format!("`{key} = {}`: expected {what}", self.raw(key)))
    }

    fn usize(&self, key: &str) -> Res<usize> {
        self.raw(key).parse().or_else(|_| self.bad(key, "a non-negative integer"))
    }

    fn u64(&self, key: &str) -> Res<u64> {
        self.raw(key).parse().or_else(|_| self.bad(key, "a non-negative integer"))
    }

    fn f64(&self, key: &str) -> Res<f64> {
        match parse_number(self.raw(key)) {
            Some(v) if v.is_finite() => Ok(v),
            _ => self.bad(key, "a finite number"),
        }
    }

    fn bool(&self, key: &str) -> Res<bool> {
        match self.raw(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => self.bad(key, "true or false"),
        }
    }

    fn opt_usize(&self, key: &str, none: &str) -> Res<Option<usize>> {
        if self.raw(key) == none {
            return Ok(None);
        }
        self.usize(key).map(Some)
    }

    fn choice<T>(&self, key: &str, parse: impl Fn(&str) -> Option<T>, options: &str) -> Res<T> {
        parse(self.raw(key)).map_or_else(|| self.bad(key, options), Ok)
    }
}

impl ExperimentConfig {
    fn from_pairs(pairs: &[(&str, &str)]) -> Res<Self> {
        let l = Lookup { pairs };
        let epochs = l.usize("train.epochs")?;
        let warmup = {
            let s = l.raw("train.warmup");
            if s.contains('.') || s.contains('/') {
                match l.f64("train.warmup")? {
                    f if (0.0..=1.0).contains(&f) => (f * epochs as f64).round() as usize,
                    _ => return l.bad("train.warmup", "an epoch count or a fraction in [0, 1]"),
                }
            } else {
                l.usize("train.warmup")?
            }
        };
        let clamp = match l.raw("attack.clamp") {
            "none" => None,
            s => {
                let parts: Vec<Option<f64>> = s.split(',').map(|p| parse_number(p.trim())).collect();
                match parts.as_slice() {
                    [Some(lo), Some(hi)] => Some((*lo, *hi)),
                    _ => return l.bad("attack.clamp", "`none` or `lo, hi`"),
                }
            }
        };
        let hidden = l
            .raw("model.hidden")
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .or_else(|_| l.bad("model.hidden", "a comma-separated list of widths"))?;
        let seed = l.u64("seed")?;
        let path = match l.raw("data.path") {
            "none" | "" => None,
            p => Some(PathBuf::from(p)),
        };
        let cfg = Self {
            seed,
            output: PathBuf::from(l.raw("output")),
            data: DataConfig {
                path,
                spec: SyntheticSpec {
                    n: l.usize("data.n")?,
                    dim: l.usize("data.dim")?,
                    classes: l.usize("data.classes")?,
                    separation: l.f64("data.separation")?,
                    noise: l.f64("data.noise")?,
                    seed: l.u64("data.seed")?,
                },
                labeled: l.bool("data.labeled")?,
                validation: l.f64("data.validation")?,
            },
            hidden,
            embedding: l.usize("model.embedding")?,
            projection: l.opt_usize("model.projection", "auto")?,
            head_hidden: l.opt_usize("model.head_hidden", "none")?,
            norm: l.choice("model.norm", NormMode::parse, "none, per-feature or dual-per-feature")?,
            train: TrainConfig {
                mode: l.choice("train.mode", Mode::parse, "acl, dynacl, sat, trades or ce")?,
                method: l.choice("selection.method", SelectionMethod::parse, "rcs, random or full")?,
                schedule: TrainSchedule {
                    epochs,
                    warmup,
                    interval: l.usize("train.interval")?,
                    fraction: l.f64("selection.fraction")?,
                    lr: l.f64("train.lr")?,
                    lr_schedule: l.choice("train.lr_schedule", LrSchedule::parse, "constant or cosine")?,
                    momentum: l.f64("train.momentum")?,
                    selection_lr: l.f64("selection.lr")?,
                },
                batch_size: l.usize("train.batch_size")?,
                temperature: l.f64("train.temperature")?,
                omega: l.f64("train.omega")?,
                strength: l.f64("train.strength")?,
                dynacl_period: l.usize("train.dynacl_period")?,
                dynacl_rate: l.f64("train.dynacl_rate")?,
                trades_c: l.f64("train.trades_c")?,
                attack: AttackConfig {
                    steps: l.usize("attack.steps")?,
                    step_size: l.f64("attack.step_size")?,
                    eps: l.f64("attack.eps")?,
                    clamp,
                    random_start: l.bool("attack.random_start")?,
                    seed: 0,
                },
                selection_steps: l.usize("selection.steps")?,
                distance: Distance {
                    kind: l.choice("selection.distance", DistanceKind::parse, "kl or js")?,
                    temperature: l.f64("selection.distance_temperature")?,
                },
                last_layer: l.bool("selection.last_layer")?,
                chunk: l.opt_usize("selection.chunk", "none")?,
                norm_momentum: l.f64("train.norm_momentum")?,
                seed,
            },
            probe_test_fraction: l.f64("probe.test_fraction")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Re-checks every constraint owned by the core modules.
    pub fn validate(&self) -> Res<()> {
        let wrap = |r: rcs_core::Result<()>| r.map_err(|e| ConfigError(e.to_string()));
        wrap(self.train.validate())?;
        wrap(self.data.spec.validate())?;
        wrap(self.encoder(self.data.spec.dim, self.data.spec.classes).validate())?;
        if !(self.data.validation > 0.0 && self.data.validation < 1.0) {
            return err("data.validation must lie in (0, 1)");
        }
        if !(self.probe_test_fraction > 0.0 && self.probe_test_fraction < 1.0) {
            return err("probe.test_fraction must lie in (0, 1)");
        }
        if self.train.mode.is_supervised() && !self.data.labeled && self.data.path.is_none() {
            return err(format!("train.mode = {} needs data.labeled = true", self.train.mode.as_str()));
        }
        Ok(())
    }

    /// Model layout for inputs of width `input_dim` and `classes` labels.
    pub fn encoder(&self, input_dim: usize, classes: usize) -> EncoderConfig {
        let projection = self.projection.unwrap_or(if self.train.mode.is_supervised() {
            classes
        } else {
            DEFAULT_PROJECTION
        });
        EncoderConfig {
            input_dim,
            hidden: self.hidden.clone(),
            embedding_dim: self.embedding,
            projection_dim: projection,
            head_hidden: self.head_hidden,
            norm: self.norm,
            seed: self.seed,
        }
    }

    /// Every key in fixed order with its resolved value.
    pub fn snapshot(&self) -> String {
        let t = &self.train;
        let s = &t.schedule;
        let opt = |v: Option<usize>, none: &str| v.map_or(none.to_string(), |x| x.to_string());
        let values: Vec<String> = vec![
            self.seed.to_string(),
            self.output.display().to_string(),
            self.data.path.as_ref().map_or("none".into(), |p| p.display().to_string()),
            self.data.spec.n.to_string(),
            self.data.spec.dim.to_string(),
            self.data.spec.classes.to_string(),
            self.data.labeled.to_string(),
            self.data.spec.separation.to_string(),
            self.data.spec.noise.to_string(),
            self.data.spec.seed.to_string(),
            self.data.validation.to_string(),
            self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
            self.embedding.to_string(),
            opt(self.projection, "auto"),
            opt(self.head_hidden, "none"),
            self.norm.as_str().into(),
            t.mode.as_str().into(),
            s.epochs.to_string(),
            s.warmup.to_string(),
            s.interval.to_string(),
            t.batch_size.to_string(),
            s.lr.to_string(),
            s.lr_schedule.as_str().into(),
            s.momentum.to_string(),
            t.temperature.to_string(),
            t.omega.to_string(),
            t.strength.to_string(),
            t.dynacl_period.to_string(),
            t.dynacl_rate.to_string(),
            t.trades_c.to_string(),
            t.norm_momentum.to_string(),
            t.attack.eps.to_string(),
            t.attack.step_size.to_string(),
            t.attack.steps.to_string(),
            t.attack.clamp.map_or("none".into(), |(lo, hi)| format!("{lo},{hi}")),
            t.attack.random_start.to_string(),
            t.method.as_str().into(),
            s.fraction.to_string(),
            s.selection_lr.to_string(),
            t.selection_steps.to_string(),
            t.distance.kind.as_str().into(),
            t.distance.temperature.to_string(),
            t.last_layer.to_string(),
            opt(t.chunk, "none"),
            self.probe_test_fraction.to_string(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        KEYS.iter().zip(values).map(|((k, _), v)| format!("{k} = {v}\n")).collect()
    }
}
