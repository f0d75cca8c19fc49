//! Flat `key = value` experiment configs.
//!
//! ```text
//! # geometric median of a 5-d Gaussian
//! objective.kind = geometric_median
//! distribution.family = gaussian
//! distribution.center = 1, 1, 1, 1, 1
//! schedule.alpha = 0.6667
//! experiment.replicates = 200
//! ```
//!
//! Lines are `key = value`; `#` starts a comment. Vectors are comma
//! separated, lists of vectors (mixture centers) are separated by `;`.
//! Unknown keys, duplicate keys and keys that do not apply to the chosen
//! objective or family are errors.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::assumptions::CheckSettings;
use crate::averaged_sgd::{ObjectiveBinding, StepSchedule, DEFAULT_ALPHA, DEFAULT_CLIP_RADIUS, DEFAULT_C_GAMMA};
use crate::datagen::DistributionSpec;
use crate::error::{Error, Result};
use crate::harness::{checkpoint_grid, hex, ExperimentConfig, TruthSpec, DEFAULT_BURN_IN, DEFAULT_POINTS_PER_DECADE};
use crate::linalg::Vector;
use crate::objectives::{CoshLogisticObjective, GeometricQuantileObjective, LogisticObjective, Objective, QuadraticObjective};
use crate::oracle::{OracleSettings, TruthMode, DEFAULT_MAX_ITER, DEFAULT_TOL};

const KEYS: &[&str] = &[
    "objective.kind",
    "objective.v",
    "objective.sigma",
    "distribution.family",
    "distribution.center",
    "distribution.scale",
    "distribution.dof",
    "distribution.radius",
    "distribution.centers",
    "distribution.weights",
    "distribution.terms",
    "distribution.teacher",
    "distribution.label_noise",
    "schedule.c_gamma",
    "schedule.alpha",
    "schedule.allow_alpha_one",
    "estimator.clip_radius",
    "experiment.n_max",
    "experiment.checkpoints_from",
    "experiment.points_per_decade",
    "experiment.replicates",
    "experiment.moments",
    "experiment.seed",
    "experiment.burn_in",
    "truth.mode",
    "truth.n_oracle",
    "truth.tol",
    "truth.max_iter",
    "check.radius",
    "check.probes",
    "check.n_mc",
    "check.moments",
];

/// Experiment-level settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSettings {
    pub n_max: u64,
    pub checkpoints_from: u64,
    pub points_per_decade: u32,
    pub replicates: usize,
    pub moments: Vec<u32>,
    pub seed: u64,
    pub burn_in: f64,
}

/// A parsed and validated config.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, (usize, String)>,
    pub binding: ObjectiveBinding,
    pub schedule: StepSchedule,
    pub clip_radius: f64,
    pub experiment: ExperimentSettings,
    pub truth: TruthSpec,
    pub check: CheckSettings,
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

struct Reader {
    entries: BTreeMap<String, (usize, String)>,
    used: Vec<String>,
}

impl Reader {
    fn raw(&mut self, key: &str) -> Option<(usize, &str)> {
        self.used.push(key.to_string());
        self.entries.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.0)
    }

    fn get<T>(&mut self, key: &str, parse: impl Fn(&str) -> Option<T>, what: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => parse(v).map(Some).ok_or_else(|| err(line, format!("{key}: expected {what}, got {v:?}"))),
        }
    }

    fn required<T>(&mut self, key: &str, parse: impl Fn(&str) -> Option<T>, what: &str) -> Result<T> {
        self.get(key, parse, what)?.ok_or_else(|| err(0, format!("missing required key {key}")))
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        Ok(self.get(key, parse_f64, "a finite number")?.unwrap_or(default))
    }

    fn u64(&mut self, key: &str, default: u64) -> Result<u64> {
        Ok(self.get(key, parse_u64, "a non-negative integer")?.unwrap_or(default))
    }

    fn vector(&mut self, key: &str) -> Result<Vector> {
        self.required(key, parse_vector, "a comma-separated vector")
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Integers may be written in scientific notation (`1e6`) when exact.
fn parse_u64(s: &str) -> Option<u64> {
    s.parse::<u64>().ok().or_else(|| {
        let x = parse_f64(s)?;
        (x >= 0.0 && x.fract() == 0.0 && x < 2f64.powi(63)).then_some(x as u64)
    })
}

fn parse_list<T>(s: &str, item: impl Fn(&str) -> Option<T>) -> Option<Vec<T>> {
    s.split(',').map(|t| item(t.trim())).collect()
}

fn parse_vector(s: &str) -> Option<Vector> {
    Vector::new(parse_list(s, parse_f64)?).ok()
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

fn parse_orders(s: &str) -> Option<Vec<u32>> {
    parse_list(s, |t| t.parse::<u32>().ok().filter(|&q| q >= 1))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| err(line, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(line, format!("unknown key {key:?}")));
            }
            if value.is_empty() {
                return Err(err(line, format!("{key}: empty value")));
            }
            if entries.insert(key.to_string(), (line, value.to_string())).is_some() {
                return Err(err(line, format!("duplicate key {key}")));
            }
        }
        let mut r = Reader { entries, used: Vec::new() };
        let cfg = Self::build(&mut r)?;
        if let Some((key, (line, _))) = r.entries.iter().find(|(k, _)| !r.used.contains(k)) {
            return Err(err(*line, format!("{key} does not apply to this objective/distribution")));
        }
        Ok(cfg)
    }

    fn build(r: &mut Reader) -> Result<Self> {
        let distribution = Self::distribution(r)?;
        let family_line = r.line("distribution.family");
        distribution.validate().map_err(|e| err(family_line, e.to_string()))?;
        let objective = Self::objective(r, &distribution)?;
        let kind_line = r.line("objective.kind");
        let binding = ObjectiveBinding::new(objective, distribution).map_err(|e| err(kind_line, e.to_string()))?;

        let allow = r.get("schedule.allow_alpha_one", parse_bool, "true or false")?.unwrap_or(false);
        let schedule = StepSchedule::new(r.f64("schedule.c_gamma", DEFAULT_C_GAMMA)?, r.f64("schedule.alpha", DEFAULT_ALPHA)?, allow)
            .map_err(|e| err(r.line("schedule.alpha"), e.to_string()))?;
        let clip_radius = r.f64("estimator.clip_radius", DEFAULT_CLIP_RADIUS)?;
        if !(clip_radius > 0.0) {
            return Err(err(r.line("estimator.clip_radius"), "clip radius must be positive"));
        }

        let n_max = r.u64("experiment.n_max", 100_000)?;
        let experiment = ExperimentSettings {
            n_max,
            checkpoints_from: r.u64("experiment.checkpoints_from", 1000.min(n_max))?,
            points_per_decade: r.u64("experiment.points_per_decade", DEFAULT_POINTS_PER_DECADE as u64)?.min(u32::MAX as u64) as u32,
            replicates: r.u64("experiment.replicates", 200)? as usize,
            moments: r.get("experiment.moments", parse_orders, "a list of positive integers")?.unwrap_or(vec![1, 2]),
            seed: r.u64("experiment.seed", 0)?,
            burn_in: r.f64("experiment.burn_in", DEFAULT_BURN_IN)?,
        };

        let mode = match r.get("truth.mode", |s| Some(s.to_string()), "")?.as_deref() {
            None | Some("analytic") => TruthMode::Analytic,
            Some("empirical") => TruthMode::Empirical,
            Some(other) => return Err(err(r.line("truth.mode"), format!("truth.mode must be analytic or empirical, got {other:?}"))),
        };
        let oracle = OracleSettings {
            n_oracle: r.u64("truth.n_oracle", 1_000_000)? as usize,
            tol: r.f64("truth.tol", DEFAULT_TOL)?,
            max_iter: r.u64("truth.max_iter", DEFAULT_MAX_ITER as u64)? as usize,
        };
        if oracle.n_oracle == 0 || !(oracle.tol > 0.0) {
            return Err(err(0, "truth.n_oracle and truth.tol must be positive"));
        }

        let defaults = CheckSettings::default();
        let check = CheckSettings {
            radius: r.f64("check.radius", defaults.radius)?,
            n_probes: r.u64("check.probes", defaults.n_probes as u64)? as usize,
            n_mc: r.u64("check.n_mc", defaults.n_mc as u64)? as usize,
            moment_orders: r.get("check.moments", parse_orders, "a list of positive integers")?.unwrap_or(defaults.moment_orders),
        };

        let cfg = Self {
            entries: BTreeMap::new(),
            binding,
            schedule,
            clip_radius,
            experiment,
            truth: TruthSpec { mode, oracle },
            check,
        };
        cfg.experiment_config().map_err(|e| match e {
            Error::Config { .. } => e,
            other => err(0, other.to_string()),
        })?;
        Ok(Self { entries: r.entries.clone(), ..cfg })
    }

    fn distribution(r: &mut Reader) -> Result<DistributionSpec> {
        let family = r.required("distribution.family", |s| Some(s.to_string()), "a family name")?;
        let scale = |r: &mut Reader| r.f64("distribution.scale", 1.0);
        Ok(match family.as_str() {
            "gaussian" => DistributionSpec::Gaussian { center: r.vector("distribution.center")?, scale: scale(r)? },
            "student_t" => DistributionSpec::StudentT {
                center: r.vector("distribution.center")?,
                scale: scale(r)?,
                dof: r.required("distribution.dof", parse_f64, "a number")?,
            },
            "mixture" => DistributionSpec::Mixture {
                centers: r.required(
                    "distribution.centers",
                    |s| s.split(';').map(|c| parse_vector(c.trim())).collect(),
                    "vectors separated by `;`",
                )?,
                weights: r.required("distribution.weights", |s| parse_list(s, parse_f64), "a comma-separated list")?,
                scale: scale(r)?,
            },
            "sphere_uniform" => DistributionSpec::SphereUniform {
                center: r.vector("distribution.center")?,
                radius: r.f64("distribution.radius", 1.0)?,
            },
            "kl_brownian" => DistributionSpec::KlBrownian {
                terms: r.required("distribution.terms", parse_u64, "a positive integer")? as usize,
            },
            "teacher_logistic" | "teacher_cosh" => {
                let teacher = r.vector("distribution.teacher")?;
                let scale = scale(r)?;
                let label_noise = r.f64("distribution.label_noise", 0.0)?;
                let dof = r.get("distribution.dof", parse_f64, "a number")?;
                if family == "teacher_cosh" {
                    DistributionSpec::TeacherCosh { teacher, scale, label_noise, dof }
                } else {
                    DistributionSpec::TeacherLogistic { teacher, scale, label_noise, dof }
                }
            }
            other => return Err(err(r.line("distribution.family"), format!("unknown distribution family {other:?}"))),
        })
    }

    fn objective(r: &mut Reader, distribution: &DistributionSpec) -> Result<Objective> {
        let kind = r.required("objective.kind", |s| Some(s.to_string()), "an objective name")?;
        let line = r.line("objective.kind");
        let d = distribution.dim();
        Ok(match kind.as_str() {
            "geometric_median" => Objective::GeometricQuantile(GeometricQuantileObjective::median(d)),
            "geometric_quantile" => {
                let v = match r.get("objective.v", parse_vector, "a comma-separated vector")? {
                    Some(v) => v,
                    None => Vector::zeros(d),
                };
                Objective::GeometricQuantile(GeometricQuantileObjective::new(v).map_err(|e| err(r.line("objective.v"), e.to_string()))?)
            }
            "cosh_logistic" => Objective::CoshLogistic(CoshLogisticObjective { dim: d }),
            "logistic" => Objective::Logistic(LogisticObjective { dim: d }),
            "quadratic" => {
                let mean = distribution
                    .mean()
                    .ok_or_else(|| err(line, format!("quadratic objective needs an unlabeled family, got {}", distribution.family())))?;
                let default_sigma = match distribution {
                    DistributionSpec::Gaussian { scale, .. } => *scale,
                    _ => 1.0,
                };
                let sigma = r.f64("objective.sigma", default_sigma)?;
                Objective::Quadratic(QuadraticObjective::new(mean, sigma).map_err(|e| err(line, e.to_string()))?)
            }
            other => return Err(err(line, format!("unknown objective kind {other:?}"))),
        })
    }

    /// Sorted `key = value` lines with comments and spacing removed.
    pub fn canonical_text(&self) -> String {
        self.entries.iter().map(|(k, (_, v))| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of `canonical_text`, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_text().as_bytes()))
    }

    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        let e = &self.experiment;
        let cfg = ExperimentConfig {
            binding: self.binding.clone(),
            schedule: self.schedule,
            clip_radius: self.clip_radius,
            n_max: e.n_max,
            checkpoints: checkpoint_grid(e.checkpoints_from, e.n_max, e.points_per_decade)?,
            replicates: e.replicates,
            moments: e.moments.clone(),
            seed: e.seed,
            burn_in: e.burn_in,
            truth: self.truth.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
