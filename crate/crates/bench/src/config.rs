//! Flat `key = value` training configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use precond_core::gradient_maker::{MakerKind, PrecondConfig};
use precond_core::network::Activation;
use precond_core::representation::Accumulation;
use thiserror::Error;

pub const SEED_ENV: &str = "PRECOND_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: {key} given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("{key}: cannot parse {value:?}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    /// Directory holding the four MNIST IDX files.
    Mnist(PathBuf),
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
    },
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dataset::Mnist(dir) => write!(f, "mnist:{}", dir.display()),
            Dataset::Synthetic {
                classes,
                dim,
                per_class,
                separation,
            } => write!(f, "synthetic:{classes},{dim},{per_class},{separation}"),
        }
    }
}

impl FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("mnist", dir)) if !dir.is_empty() => Ok(Dataset::Mnist(dir.into())),
            Some(("synthetic", params)) => {
                let parts: Vec<&str> = params.split(',').map(str::trim).collect();
                let [k, d, n, sep] = parts[..] else {
                    return Err("synthetic needs classes,dim,per_class,separation".into());
                };
                let int = |v: &str| v.parse::<usize>().map_err(|e| e.to_string());
                Ok(Dataset::Synthetic {
                    classes: int(k)?,
                    dim: int(d)?,
                    per_class: int(n)?,
                    separation: sep.parse().map_err(|e: std::num::ParseFloatError| e.to_string())?,
                })
            }
            _ => Err("expected mnist:<dir> or synthetic:<classes>,<dim>,<per_class>,<separation>".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: Dataset,
    /// Hidden layer widths.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub maker: MakerKind,
    pub precond: PrecondConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(dataset: Dataset, maker: MakerKind) -> Self {
        Self {
            dataset,
            widths: vec![128, 128],
            activation: Activation::Relu,
            maker,
            precond: PrecondConfig::for_kind(maker),
            batch_size: 128,
            epochs: 20,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 10.0,
            seed: 0,
            output: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay be ≥ 0");
        }
        if self.widths.contains(&0) {
            return bad("widths must be positive");
        }
        self.precond.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = text.parse::<Self>()?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = parse(SEED_ENV, &seed)?;
        }
        Ok(cfg)
    }

    /// The configuration as `key = value` lines that parse back to `self`.
    pub fn to_text(&self) -> String {
        let p = &self.precond;
        let widths: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        let accumulation = match p.shampoo_accumulation {
            Accumulation::Sum => "sum".to_string(),
            Accumulation::Ema(a) => format!("ema:{a}"),
        };
        let mut lines = vec![
            format!("dataset = {}", self.dataset),
            format!("widths = {}", widths.join(",")),
            format!("activation = {}", activation_name(self.activation)),
            format!("maker = {}", self.maker),
            format!("batch_size = {}", self.batch_size),
            format!("epochs = {}", self.epochs),
            format!("lr = {}", self.lr),
            format!("momentum = {}", self.momentum),
            format!("weight_decay = {}", self.weight_decay),
            format!("clip_norm = {}", self.clip_norm),
            format!("seed = {}", self.seed),
            format!("damping = {}", p.damping),
            format!("curvature_interval = {}", p.curvature_interval),
            format!("preconditioner_interval = {}", p.preconditioner_interval),
            format!("ema = {}", p.ema),
            format!("mc_samples = {}", p.mc_samples),
            format!("mc_normalize = {}", p.mc_normalize),
            format!("sketch_seed = {}", p.sketch_seed),
            format!("psgd_step = {}", p.psgd_step),
            format!("eps = {}", p.eps),
            format!("cg_tol = {}", p.cg_tol),
            format!("cg_max_iter = {}", p.cg_max_iter),
            format!("shampoo_accumulation = {accumulation}"),
            format!("damping_retries = {}", p.damping_retries),
        ];
        if let Some(out) = &self.output {
            lines.push(format!("output = {}", out.display()));
        }
        lines.join("\n") + "\n"
    }
}

const KEYS: &[&str] = &[
    "dataset",
    "widths",
    "activation",
    "maker",
    "batch_size",
    "epochs",
    "lr",
    "momentum",
    "weight_decay",
    "clip_norm",
    "seed",
    "output",
    "damping",
    "curvature_interval",
    "preconditioner_interval",
    "ema",
    "mc_samples",
    "mc_normalize",
    "sketch_seed",
    "psgd_step",
    "eps",
    "cg_tol",
    "cg_max_iter",
    "shampoo_accumulation",
    "damping_retries",
];

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
        Activation::Identity => "identity",
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_with<T>(key: &str, value: &str, f: impl FnOnce(&str) -> Result<T, String>) -> Result<T, ConfigError> {
    f(value).map_err(|reason| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason,
    })
}

/// Reads `key = value` lines. Blank lines and lines starting with `#` are
/// skipped. Unknown and repeated keys are errors.
pub(crate) fn read_pairs(text: &str, known: &[&str]) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let (k, v) = (k.trim(), v.trim());
        if !known.contains(&k) {
            return Err(ConfigError::UnknownKey {
                line: i + 1,
                key: k.into(),
            });
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(ConfigError::DuplicateKey {
                line: i + 1,
                key: k.into(),
            });
        }
    }
    Ok(map)
}

pub(crate) fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl FromStr for TrainConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let map = read_pairs(text, KEYS)?;
        let get = |k: &str| map.get(k).map(String::as_str);
        let dataset = parse::<Dataset>(
            "dataset",
            get("dataset").ok_or_else(|| ConfigError::Invalid("dataset is required".into()))?,
        )?;
        let maker = match get("maker") {
            Some(v) => parse::<MakerKind>("maker", v)?,
            None => MakerKind::Plain,
        };
        let mut cfg = TrainConfig::new(dataset, maker);
        for (key, value) in &map {
            let (k, v) = (key.as_str(), value.as_str());
            let p = &mut cfg.precond;
            match k {
                "dataset" | "maker" => {}
                "widths" => cfg.widths = parse_list(k, v)?,
                "activation" => {
                    cfg.activation = parse_with(k, v, |s| match s {
                        "relu" => Ok(Activation::Relu),
                        "tanh" => Ok(Activation::Tanh),
                        "identity" => Ok(Activation::Identity),
                        _ => Err("expected relu, tanh or identity".into()),
                    })?
                }
                "batch_size" => cfg.batch_size = parse(k, v)?,
                "epochs" => cfg.epochs = parse(k, v)?,
                "lr" => cfg.lr = parse(k, v)?,
                "momentum" => cfg.momentum = parse(k, v)?,
                "weight_decay" => cfg.weight_decay = parse(k, v)?,
                "clip_norm" => cfg.clip_norm = parse(k, v)?,
                "seed" => cfg.seed = parse(k, v)?,
                "output" => cfg.output = Some(v.into()),
                "damping" => p.damping = parse(k, v)?,
                "curvature_interval" => p.curvature_interval = parse(k, v)?,
                "preconditioner_interval" => p.preconditioner_interval = parse(k, v)?,
                "ema" => p.ema = parse(k, v)?,
                "mc_samples" => p.mc_samples = parse(k, v)?,
                "mc_normalize" => p.mc_normalize = parse(k, v)?,
                "sketch_seed" => p.sketch_seed = parse(k, v)?,
                "psgd_step" => p.psgd_step = parse(k, v)?,
                "eps" => p.eps = parse(k, v)?,
                "cg_tol" => p.cg_tol = parse(k, v)?,
                "cg_max_iter" => p.cg_max_iter = parse(k, v)?,
                "damping_retries" => p.damping_retries = parse(k, v)?,
                "shampoo_accumulation" => {
                    p.shampoo_accumulation = parse_with(k, v, |s| match s.split_once(':') {
                        None if s == "sum" => Ok(Accumulation::Sum),
                        Some(("ema", a)) => a.parse().map(Accumulation::Ema).map_err(|e| format!("{e}")),
                        _ => Err("expected sum or ema:<weight>".into()),
                    })?
                }
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
