//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; see [`RunConfig::default`] for the values used when a key is
//! absent. Unknown keys and malformed values are rejected before any mesh or
//! network is built.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use feinn::adapt::IndicatorKind;
use feinn::assembly::NormKind;
use feinn::training::{LossMode, Method};
use feinn::{Problem, Schedule};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice")]
    Duplicate(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    FeinnAdaptive,
    FemAdaptive,
    FemUniform,
    NormStudy,
    SeedStudy,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "feinn_adaptive" => Mode::FeinnAdaptive,
            "fem_adaptive" => Mode::FemAdaptive,
            "fem_uniform" => Mode::FemUniform,
            "norm_study" => Mode::NormStudy,
            "seed_study" => Mode::SeedStudy,
            _ => return Err("expected feinn_adaptive, fem_adaptive, fem_uniform, norm_study or seed_study".into()),
        })
    }
}

/// Every recognised key, in documentation order.
pub const KEYS: &[&str] = &[
    "problem",
    "mode",
    "indicator",
    "order",
    "poly_degree",
    "loss",
    "norm",
    "refine_fraction",
    "coarsen_fraction",
    "max_steps",
    "initial_levels",
    "arch",
    "seeds",
    "milestones",
    "iters",
    "iteration_cap",
    "optimizer",
    "memory",
    "last_layer",
    "compare_fem",
    "petrov",
    "uniform_steps",
    "train_iters",
    "error_every",
    "sample_density",
    "export_matrix",
    "out",
];

/// Parameter count above which dense BFGS is refused.
pub const DENSE_BFGS_LIMIT: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: String,
    pub mode: Mode,
    pub indicator: IndicatorKind,
    pub order: usize,
    /// degree of the polynomial test problems; defaults to `order`
    pub poly_degree: Option<u32>,
    pub preconditioned: bool,
    pub norm: NormKind,
    pub refine_fraction: f64,
    pub coarsen_fraction: f64,
    pub max_steps: usize,
    pub initial_levels: Option<u32>,
    pub arch: Option<Vec<usize>>,
    pub seeds: Vec<u64>,
    pub milestones: Option<Vec<usize>>,
    pub iters: Option<Vec<usize>>,
    pub iteration_cap: Option<usize>,
    pub dense_bfgs: bool,
    pub memory: usize,
    pub last_layer: bool,
    pub compare_fem: bool,
    pub petrov: bool,
    pub uniform_steps: usize,
    pub train_iters: usize,
    pub error_every: usize,
    pub sample_density: usize,
    pub export_matrix: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: "arc_wavefront".into(),
            mode: Mode::FeinnAdaptive,
            indicator: IndicatorKind::Kelly,
            order: 4,
            poly_degree: None,
            preconditioned: false,
            norm: NormKind::W11,
            refine_fraction: 0.15,
            coarsen_fraction: 0.01,
            max_steps: 7,
            initial_levels: None,
            arch: None,
            seeds: vec![0],
            milestones: None,
            iters: None,
            iteration_cap: None,
            dense_bfgs: false,
            memory: 30,
            last_layer: false,
            compare_fem: false,
            petrov: false,
            uniform_steps: 4,
            train_iters: 300,
            error_every: 10,
            sample_density: 4,
            export_matrix: false,
            out: PathBuf::from("out"),
        }
    }
}

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Value { key: key.into(), value: value.into(), reason: reason.into() }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| bad(key, value, e.to_string()))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|s| num(key, s.trim())).collect()
}

fn flag(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

/// Splits a config text into `(line, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.into() });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.into() });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_str_checked(&text)
    }

    /// Parses and validates a config text.
    pub fn from_str_checked(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (_, k, v) in parse_pairs(text)? {
            if seen.contains(&k) {
                return Err(ConfigError::Duplicate(k));
            }
            cfg.set(&k, &v)?;
            seen.push(k);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(ConfigError::Syntax { line: 0, text: kv.into() });
        };
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "problem" => self.problem = value.to_string(),
            "mode" => self.mode = value.parse().map_err(|e: String| bad(key, value, e))?,
            "indicator" => self.indicator = IndicatorKind::parse(value).ok_or_else(|| bad(key, value, "expected kelly, network or real"))?,
            "order" => self.order = num(key, value)?,
            "poly_degree" => self.poly_degree = Some(num(key, value)?),
            "loss" => {
                self.preconditioned = match value {
                    "l1" => false,
                    "preconditioned" => true,
                    _ => return Err(bad(key, value, "expected l1 or preconditioned")),
                }
            }
            "norm" => self.norm = NormKind::parse(value).ok_or_else(|| bad(key, value, "expected L1, L2, W11 or W12"))?,
            "refine_fraction" => self.refine_fraction = num(key, value)?,
            "coarsen_fraction" => self.coarsen_fraction = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "initial_levels" => self.initial_levels = Some(num(key, value)?),
            "arch" => self.arch = Some(list(key, value)?),
            "seeds" => self.seeds = list(key, value)?,
            "milestones" => self.milestones = Some(if value.is_empty() { vec![] } else { list(key, value)? }),
            "iters" => self.iters = Some(list(key, value)?),
            "iteration_cap" => self.iteration_cap = Some(num(key, value)?),
            "optimizer" => {
                self.dense_bfgs = match value {
                    "lbfgs" => false,
                    "bfgs" => true,
                    _ => return Err(bad(key, value, "expected lbfgs or bfgs")),
                }
            }
            "memory" => self.memory = num(key, value)?,
            "last_layer" => self.last_layer = flag(key, value)?,
            "compare_fem" => self.compare_fem = flag(key, value)?,
            "petrov" => self.petrov = flag(key, value)?,
            "uniform_steps" => self.uniform_steps = num(key, value)?,
            "train_iters" => self.train_iters = num(key, value)?,
            "error_every" => self.error_every = num(key, value)?,
            "sample_density" => self.sample_density = num(key, value)?,
            "export_matrix" => self.export_matrix = flag(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if Problem::by_name(&self.problem, 1).is_none() {
            return invalid(format!("unknown problem `{}` (arc_wavefront, fichera, poly_smoke, smooth)", self.problem));
        }
        if !(1..=8).contains(&self.order) {
            return invalid(format!("order must be in 1..=8, got {}", self.order));
        }
        if self.poly_degree == Some(0) {
            return invalid("poly_degree must be positive".into());
        }
        for (name, v) in [("refine_fraction", self.refine_fraction), ("coarsen_fraction", self.coarsen_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return invalid(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.seeds.is_empty() {
            return invalid("at least one seed is required".into());
        }
        if let Some(arch) = &self.arch {
            if arch.len() < 2 || arch[0] != 2 || *arch.last().unwrap() != 1 || arch.contains(&0) {
                return invalid(format!("arch must start with 2, end with 1 and have no empty layer, got {arch:?}"));
            }
        }
        match (&self.milestones, &self.iters) {
            (None, None) => {}
            (Some(m), Some(it)) => {
                if it.len() != m.len() + 1 {
                    return invalid(format!("iters needs {} entries for {} milestones", m.len() + 1, m.len()));
                }
                if !m.windows(2).all(|w| w[0] < w[1]) {
                    return invalid("milestones must be strictly increasing".into());
                }
            }
            (None, Some(it)) if it.len() == 1 => {}
            _ => return invalid("milestones and iters must be given together".into()),
        }
        if self.memory == 0 {
            return invalid("memory must be positive".into());
        }
        if self.sample_density == 0 || self.error_every == 0 {
            return invalid("sample_density and error_every must be positive".into());
        }
        if self.mode == Mode::FemUniform && self.uniform_steps == 0 {
            return invalid("uniform_steps must be positive".into());
        }
        if self.mode == Mode::FemAdaptive && self.indicator == IndicatorKind::Network {
            return invalid("the network indicator needs a network; use kelly or real with fem_adaptive".into());
        }
        if self.dense_bfgs {
            let arch = self.architecture();
            let params: usize = arch.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
            if params > DENSE_BFGS_LIMIT {
                return invalid(format!("dense bfgs is limited to {DENSE_BFGS_LIMIT} parameters, network has {params}"));
            }
        }
        Ok(())
    }

    /// The selected problem with configured overrides applied.
    pub fn build_problem(&self) -> Problem {
        let degree = self.poly_degree.unwrap_or(self.order as u32);
        let mut p = Problem::by_name(&self.problem, degree).expect("validated problem name");
        if let Some(l) = self.initial_levels {
            p.initial_levels = l;
        }
        if let Some(a) = &self.arch {
            p.arch = a.clone();
        }
        if let Some(it) = &self.iters {
            p.schedule = Schedule::new(self.milestones.clone().unwrap_or_default(), it.clone());
        }
        p
    }

    pub fn architecture(&self) -> Vec<usize> {
        self.arch.clone().unwrap_or_else(|| Problem::by_name(&self.problem, 1).map(|p| p.arch).unwrap_or_default())
    }

    pub fn loss_mode(&self) -> LossMode {
        if self.preconditioned {
            LossMode::Preconditioned(self.norm)
        } else {
            LossMode::DiscreteL1
        }
    }

    pub fn method(&self) -> Method {
        if self.dense_bfgs {
            Method::Bfgs
        } else {
            Method::Lbfgs { memory: self.memory }
        }
    }
}
