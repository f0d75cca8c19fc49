//! Deterministic batch solvers used as ground truth.
//!
//! Both solvers minimize the empirical risk `(1/N) Σ g(X_i, h)` of a frozen
//! sample, which differs from the population minimizer by `O(N^{-1/2})`;
//! experiments that rely on them use samples much larger than the stream
//! lengths they score.

use serde::{Deserialize, Serialize};

use crate::averaged_sgd::ObjectiveBinding;
use crate::datagen::{freeze_in, Sample};
use crate::error::{invalid, Error, Result};
use crate::linalg::{dist_slice, dot, norm_slice, pairwise_sum, pairwise_sum_rows, Vector};
use crate::objectives::{mean_gradient, mean_loss, Objective, DEGENERACY_THRESHOLD};
use crate::par;
use crate::rng::Domain;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100_000;

const ARMIJO_SLOPE: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MIN_STEP: f64 = 1e-30;
const MAX_STEP: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub m_hat: Vector,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub converged: bool,
    pub solver: String,
}

/// Per-chunk sums for one Weiszfeld step around `h`.
struct WeiszfeldSums {
    weighted_points: Vec<f64>,
    weights: f64,
    directions: Vec<f64>,
    coincident: usize,
    first_coincident: Option<usize>,
}

fn weiszfeld_sums(points: &[Sample], h: &[f64]) -> WeiszfeldSums {
    let d = h.len();
    let parts = par::map_chunks(points, |chunk| {
        let mut wp = vec![0.0; d];
        let mut dirs = vec![0.0; d];
        let mut weights = Vec::with_capacity(chunk.len());
        let mut coincident = 0;
        let mut first = None;
        for (i, s) in chunk.iter().enumerate() {
            let x = s.x.as_slice();
            let dist = dist_slice(x, h);
            if dist < DEGENERACY_THRESHOLD {
                coincident += 1;
                first.get_or_insert(i);
                continue;
            }
            let w = 1.0 / dist;
            weights.push(w);
            for k in 0..d {
                wp[k] += w * x[k];
                dirs[k] += w * (x[k] - h[k]);
            }
        }
        (wp, pairwise_sum(&weights), dirs, coincident, first)
    });
    let mut first_coincident = None;
    for (c, p) in parts.iter().enumerate() {
        if let Some(i) = p.4 {
            first_coincident = Some(c * par::CHUNK + i);
            break;
        }
    }
    let wp: Vec<Vec<f64>> = parts.iter().map(|p| p.0.clone()).collect();
    let dirs: Vec<Vec<f64>> = parts.iter().map(|p| p.2.clone()).collect();
    let w: Vec<f64> = parts.iter().map(|p| p.1).collect();
    WeiszfeldSums {
        weighted_points: pairwise_sum_rows(&wp, d),
        weights: pairwise_sum(&w),
        directions: pairwise_sum_rows(&dirs, d),
        coincident: parts.iter().map(|p| p.3).sum(),
        first_coincident,
    }
}

/// Weiszfeld iteration for the geometric quantile with direction `v`:
///
/// `h ← (Σ x_i/‖x_i-h‖ + N v) / Σ 1/‖x_i-h‖`.
///
/// Stops when the smallest subgradient of the empirical risk has norm below
/// `tol`. When an iterate lands on data points, optimality there is tested
/// with the subdifferential (a ball of radius `multiplicity/N`); if it fails
/// the iterate is nudged by `1e-9·(1+‖h‖)` along the descent direction.
pub fn weiszfeld(dataset: &[Sample], v: &Vector, tol: f64, max_iter: usize) -> Result<OracleResult> {
    weiszfeld_traced(dataset, v, tol, max_iter, |_| {})
}

pub(crate) fn weiszfeld_traced(
    dataset: &[Sample],
    v: &Vector,
    tol: f64,
    max_iter: usize,
    mut trace: impl FnMut(&Vector),
) -> Result<OracleResult> {
    if !(v.norm() < 1.0) {
        return Err(invalid("quantile direction must satisfy ‖v‖ < 1"));
    }
    if !(tol > 0.0) {
        return Err(invalid("tol must be positive"));
    }
    let first = dataset.first().ok_or(Error::DegenerateDataset)?;
    let d = v.dim();
    dataset.iter().try_for_each(|s| crate::error::check_dim(d, s.x.dim()))?;
    if dataset.iter().all(|s| s.x == first.x) {
        return Err(Error::DegenerateDataset);
    }
    let n = dataset.len() as f64;

    let mean: Vec<f64> = {
        let rows: Vec<Vec<f64>> = par::map_chunks(dataset, |chunk| {
            let mut acc = vec![0.0; d];
            for s in chunk {
                acc.iter_mut().zip(s.x.as_slice()).for_each(|(a, x)| *a += x);
            }
            acc
        });
        pairwise_sum_rows(&rows, d).into_iter().map(|s| s / n).collect()
    };
    let mut h = mean;
    let mut grad_norm = f64::INFINITY;

    for iter in 0..max_iter {
        trace(&Vector::from_raw(h.clone()));
        let sums = weiszfeld_sums(dataset, &h);
        // -N·∇ (away from coincident points) = Σ u_i + N v
        let pull: Vec<f64> = sums.directions.iter().zip(v.as_slice()).map(|(u, vi)| u + n * vi).collect();
        let pull_norm = norm_slice(&pull);
        grad_norm = (pull_norm - sums.coincident as f64).max(0.0) / n;
        if grad_norm <= tol {
            let m_hat = match sums.first_coincident {
                Some(i) => dataset[i].x.clone(),
                None => Vector::from_raw(h),
            };
            return Ok(OracleResult {
                m_hat,
                iterations: iter,
                final_gradient_norm: grad_norm,
                converged: true,
                solver: "weiszfeld".into(),
            });
        }
        if sums.coincident > 0 {
            let nudge = 1e-9 * (1.0 + norm_slice(&h)) / pull_norm;
            h.iter_mut().zip(&pull).for_each(|(hi, p)| *hi += nudge * p);
            continue;
        }
        let n_eff = n - sums.coincident as f64;
        for k in 0..d {
            h[k] = (sums.weighted_points[k] + n_eff * v[k]) / sums.weights;
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, residual: grad_norm })
}

/// Full-gradient descent on the empirical risk with Armijo backtracking
/// (factor 0.5, slope 1e-4).
///
/// Near the optimum the Armijo decrease falls below the rounding error of the
/// loss, so comparisons of loss values mean nothing. There a trial step is
/// accepted when the loss has not risen beyond rounding and the directional
/// derivative at the trial point satisfies the approximate-Wolfe bound
/// `<∇f(h - t g), g> ≥ -(1 - 2·1e-4)‖g‖²`.
pub fn batch_gd(objective: &Objective, dataset: &[Sample], tol: f64, max_iter: usize) -> Result<OracleResult> {
    if !(tol > 0.0) {
        return Err(invalid("tol must be positive"));
    }
    let start = match objective {
        Objective::GeometricQuantile(_) => {
            let d = objective.dim();
            let rows: Vec<Vec<f64>> = dataset.iter().map(|s| s.x.as_slice().to_vec()).collect();
            let n = dataset.len().max(1) as f64;
            Vector::from_raw(pairwise_sum_rows(&rows, d).into_iter().map(|s| s / n).collect())
        }
        _ => Vector::zeros(objective.dim()),
    };
    batch_gd_from(objective, dataset, start, tol, max_iter)
}

pub fn batch_gd_from(
    objective: &Objective,
    dataset: &[Sample],
    start: Vector,
    tol: f64,
    max_iter: usize,
) -> Result<OracleResult> {
    let mut h = start;
    let mut f = mean_loss(objective, &h, dataset)?;
    let mut g = mean_gradient(objective, &h, dataset)?.mean;
    let mut step = 1.0;
    for iter in 0..max_iter {
        let g2 = dot(g.as_slice(), g.as_slice());
        if g2.sqrt() <= tol {
            return Ok(OracleResult {
                m_hat: h,
                iterations: iter,
                final_gradient_norm: g2.sqrt(),
                converged: true,
                solver: "batch_gd".into(),
            });
        }
        let rounding = 1e-14 * (1.0 + f.abs());
        let mut t = step;
        loop {
            let trial = Vector::from_raw(h.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a - t * b).collect());
            let f_trial = mean_loss(objective, &trial, dataset)?;
            // Trust the loss only when the required decrease exceeds its rounding error.
            let armijo = f_trial <= f - ARMIJO_SLOPE * t * g2 && (ARMIJO_SLOPE * t * g2 > rounding || f_trial < f - rounding);
            let mut g_trial = None;
            let accept = armijo || {
                ARMIJO_SLOPE * t * g2 <= rounding && f_trial <= f + rounding && {
                    let gt = mean_gradient(objective, &trial, dataset)?.mean;
                    let ok = dot(gt.as_slice(), g.as_slice()) >= -(1.0 - 2.0 * ARMIJO_SLOPE) * g2;
                    g_trial = Some(gt);
                    ok
                }
            };
            if accept {
                h = trial;
                f = f_trial;
                g = match g_trial {
                    Some(gt) => gt,
                    None => mean_gradient(objective, &h, dataset)?.mean,
                };
                step = (2.0 * t).min(MAX_STEP);
                break;
            }
            t *= BACKTRACK;
            if t < MIN_STEP {
                return Err(Error::NoConvergence { iterations: iter, residual: g2.sqrt() });
            }
        }
    }
    let residual = g.norm();
    Err(Error::NoConvergence { iterations: max_iter, residual })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMode {
    Analytic,
    Empirical,
}

/// Where the reference point `m` came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub m: Vector,
    pub mode: TruthMode,
    pub n_oracle: Option<usize>,
    pub oracle_tol: Option<f64>,
    pub oracle: Option<OracleResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    pub n_oracle: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { n_oracle: 1_000_000, tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER }
    }
}

/// Closed-form minimizer, when the binding has one.
pub fn analytic_truth(binding: &ObjectiveBinding) -> Result<Vector> {
    match &binding.objective {
        Objective::Quadratic(q) => Ok(q.m_true.clone()),
        Objective::GeometricQuantile(o) if o.direction().norm() == 0.0 => {
            binding.distribution.symmetry_center().ok_or_else(|| {
                Error::GroundTruthUnavailable(format!(
                    "{} is not centrally symmetric; use empirical mode",
                    binding.distribution.family()
                ))
            })
        }
        other => Err(Error::GroundTruthUnavailable(format!(
            "no closed form for {} under {}; use empirical mode",
            other.name(),
            binding.distribution.family()
        ))),
    }
}

/// Solves the empirical problem on a dataset frozen from the oracle stream of `seed`.
pub fn empirical_truth(binding: &ObjectiveBinding, settings: &OracleSettings, seed: u64) -> Result<OracleResult> {
    let data = freeze_in(&binding.distribution, settings.n_oracle, seed, Domain::OracleDataset)?;
    solve(&binding.objective, &data.samples, settings)
}

/// Weiszfeld for geometric quantiles, gradient descent otherwise.
pub fn solve(objective: &Objective, samples: &[Sample], settings: &OracleSettings) -> Result<OracleResult> {
    match objective {
        Objective::GeometricQuantile(o) => weiszfeld(samples, o.direction(), settings.tol, settings.max_iter),
        other => batch_gd(other, samples, settings.tol, settings.max_iter),
    }
}

pub fn ground_truth(binding: &ObjectiveBinding, mode: TruthMode, settings: &OracleSettings, seed: u64) -> Result<GroundTruth> {
    match mode {
        TruthMode::Analytic => Ok(GroundTruth {
            m: analytic_truth(binding)?,
            mode,
            n_oracle: None,
            oracle_tol: None,
            oracle: None,
        }),
        TruthMode::Empirical => {
            let result = empirical_truth(binding, settings, seed)?;
            Ok(GroundTruth {
                m: result.m_hat.clone(),
                mode,
                n_oracle: Some(settings.n_oracle),
                oracle_tol: Some(settings.tol),
                oracle: Some(result),
            })
        }
    }
}
