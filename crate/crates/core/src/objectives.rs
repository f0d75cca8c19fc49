//! Stochastic objectives `G(h) = E[g(X, h)]` and their per-sample gradients.
//!
//! | objective            | `g(x, h)`                     | `∇_h g(x, h)`                     |
//! |----------------------|-------------------------------|-----------------------------------|
//! | geometric quantile   | `‖x-h‖ + <x-h, v>`            | `-(x-h)/‖x-h‖ - v`                |
//! | cosh-logistic        | `log cosh(y - <x,h>)`         | `-tanh(y - <x,h>) x`              |
//! | logistic             | `log(1 + exp(-y<x,h>))`       | `-σ(-y<x,h>) y x`                 |
//! | quadratic            | `½‖h-x‖²`                     | `h - x`                           |
//!
//! Loss values are only used by finite-difference tests and the batch
//! oracle's line search; the streaming estimators touch gradients only.

use serde::{Deserialize, Serialize};

use crate::datagen::{Label, Sample};
use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{dot, norm_slice, pairwise_sum, pairwise_sum_rows, SymOperator, Vector};
use crate::par;

/// Below this distance a geometric-quantile gradient is treated as undefined.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

/// Arguments of tanh/sigmoid are clamped to this magnitude.
const SATURATION: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricQuantileObjective {
    v: Vector,
}

impl GeometricQuantileObjective {
    pub fn new(v: Vector) -> Result<Self> {
        if !(v.norm() < 1.0) {
            return Err(invalid(format!("quantile direction must satisfy ‖v‖ < 1, got {}", v.norm())));
        }
        Ok(Self { v })
    }

    pub fn median(dim: usize) -> Self {
        Self { v: Vector::zeros(dim) }
    }

    pub fn direction(&self) -> &Vector {
        &self.v
    }

    pub fn dim(&self) -> usize {
        self.v.dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoshLogisticObjective {
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticObjective {
    pub dim: usize,
}

/// Validation objective `½‖h - x‖²` with `X = m_true + σ·noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticObjective {
    pub m_true: Vector,
    pub sigma: f64,
}

impl QuadraticObjective {
    pub fn new(m_true: Vector, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("noise scale must be positive and finite, got {sigma}")));
        }
        Ok(Self { m_true, sigma })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    GeometricQuantile(GeometricQuantileObjective),
    CoshLogistic(CoshLogisticObjective),
    Logistic(LogisticObjective),
    Quadratic(QuadraticObjective),
}

#[inline]
fn tanh_sat(t: f64) -> f64 {
    t.clamp(-SATURATION, SATURATION).tanh()
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    let t = t.clamp(-SATURATION, SATURATION);
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log cosh t` without overflow.
fn log_cosh(t: f64) -> f64 {
    let a = t.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// `log(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// `1/cosh² t`, accurate in the tails.
fn sech2(t: f64) -> f64 {
    let e = (-2.0 * t.abs()).exp();
    4.0 * e / ((1.0 + e) * (1.0 + e))
}

impl Objective {
    /// Writes `∇²_h g(x, h) a` into `out`; `false` for degenerate samples.
    pub(crate) fn hessian_vector_into(&self, x: &[f64], y: Option<Label>, h: &[f64], a: &[f64], out: &mut [f64]) -> bool {
        match self {
            Objective::GeometricQuantile(_) => {
                for ((oi, xi), hi) in out.iter_mut().zip(x).zip(h) {
                    *oi = xi - hi;
                }
                let dist = norm_slice(out);
                if dist < DEGENERACY_THRESHOLD {
                    return false;
                }
                let ua = dot(out, a) / dist;
                for (oi, ai) in out.iter_mut().zip(a) {
                    *oi = (ai - ua * *oi / dist) / dist;
                }
                true
            }
            Objective::CoshLogistic(_) | Objective::Logistic(_) => {
                let y = y.expect("label checked").value();
                let w = match self {
                    Objective::CoshLogistic(_) => sech2(y - dot(x, h)),
                    _ => {
                        let s = sigmoid(y * dot(x, h));
                        s * (1.0 - s)
                    }
                };
                let xa = w * dot(x, a);
                for (oi, xi) in out.iter_mut().zip(x) {
                    *oi = xa * xi;
                }
                true
            }
            Objective::Quadratic(_) => {
                out.copy_from_slice(a);
                true
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::GeometricQuantile(_) => "geometric_quantile",
            Objective::CoshLogistic(_) => "cosh_logistic",
            Objective::Logistic(_) => "logistic",
            Objective::Quadratic(_) => "quadratic",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Objective::GeometricQuantile(o) => o.dim(),
            Objective::CoshLogistic(o) => o.dim,
            Objective::Logistic(o) => o.dim,
            Objective::Quadratic(o) => o.m_true.dim(),
        }
    }

    pub fn needs_labels(&self) -> bool {
        matches!(self, Objective::CoshLogistic(_) | Objective::Logistic(_))
    }

    /// Checks that `sample` fits this objective.
    pub fn check_sample(&self, sample: &Sample) -> Result<()> {
        check_dim(self.dim(), sample.x.dim())?;
        if self.needs_labels() && sample.y.is_none() {
            return Err(invalid("regression objectives need labeled samples"));
        }
        Ok(())
    }

    /// Writes `∇_h g(x, h)` into `out`; returns `false` when the gradient is
    /// undefined at this sample (geometric quantile with `x ≈ h`).
    ///
    /// Dimensions and label presence are the caller's responsibility.
    #[inline]
    pub(crate) fn gradient_into(&self, x: &[f64], y: Option<Label>, h: &[f64], out: &mut [f64]) -> bool {
        match self {
            Objective::GeometricQuantile(o) => {
                for ((oi, xi), hi) in out.iter_mut().zip(x).zip(h) {
                    *oi = xi - hi;
                }
                let dist = norm_slice(out);
                if dist < DEGENERACY_THRESHOLD {
                    return false;
                }
                for (oi, vi) in out.iter_mut().zip(o.v.as_slice()) {
                    *oi = -*oi / dist - vi;
                }
                true
            }
            Objective::CoshLogistic(_) => {
                let y = y.expect("label checked").value();
                let w = -tanh_sat(y - dot(x, h));
                for (oi, xi) in out.iter_mut().zip(x) {
                    *oi = w * xi;
                }
                true
            }
            Objective::Logistic(_) => {
                let y = y.expect("label checked").value();
                let w = -sigmoid(-y * dot(x, h)) * y;
                for (oi, xi) in out.iter_mut().zip(x) {
                    *oi = w * xi;
                }
                true
            }
            Objective::Quadratic(_) => {
                for ((oi, xi), hi) in out.iter_mut().zip(x).zip(h) {
                    *oi = hi - xi;
                }
                true
            }
        }
    }

    /// `∇_h g(sample, h)`, or `None` when the gradient is undefined.
    pub fn stochastic_gradient(&self, sample: &Sample, h: &Vector) -> Result<Option<Vector>> {
        self.check_sample(sample)?;
        check_dim(self.dim(), h.dim())?;
        let mut out = vec![0.0; h.dim()];
        Ok(self
            .gradient_into(sample.x.as_slice(), sample.y, h.as_slice(), &mut out)
            .then(|| Vector::from_raw(out)))
    }

    /// `g(sample, h)`.
    pub fn loss(&self, sample: &Sample, h: &Vector) -> Result<f64> {
        self.check_sample(sample)?;
        check_dim(self.dim(), h.dim())?;
        Ok(self.loss_unchecked(sample.x.as_slice(), sample.y, h.as_slice()))
    }

    fn loss_unchecked(&self, x: &[f64], y: Option<Label>, h: &[f64]) -> f64 {
        match self {
            Objective::GeometricQuantile(o) => {
                let mut dist2 = 0.0;
                let mut lin = 0.0;
                for ((xi, hi), vi) in x.iter().zip(h).zip(o.v.as_slice()) {
                    let diff = xi - hi;
                    dist2 += diff * diff;
                    lin += diff * vi;
                }
                dist2.sqrt() + lin
            }
            Objective::CoshLogistic(_) => log_cosh(y.expect("label checked").value() - dot(x, h)),
            Objective::Logistic(_) => softplus(-y.expect("label checked").value() * dot(x, h)),
            Objective::Quadratic(_) => 0.5 * x.iter().zip(h).map(|(xi, hi)| (hi - xi).powi(2)).sum::<f64>(),
        }
    }

    /// Adds `∇²_h g(x, h)` to `acc`; returns `false` for degenerate samples.
    fn hessian_accumulate(&self, x: &[f64], y: Option<Label>, h: &[f64], acc: &mut SymOperator, scratch: &mut [f64]) -> bool {
        match self {
            Objective::GeometricQuantile(_) => {
                for ((si, xi), hi) in scratch.iter_mut().zip(x).zip(h) {
                    *si = xi - hi;
                }
                let dist = norm_slice(scratch);
                if dist < DEGENERACY_THRESHOLD {
                    return false;
                }
                scratch.iter_mut().for_each(|s| *s /= dist);
                acc.add_identity(1.0 / dist);
                acc.add_outer(-1.0 / dist, scratch);
                true
            }
            Objective::CoshLogistic(_) => {
                let t = y.expect("label checked").value() - dot(x, h);
                acc.add_outer(sech2(t), x);
                true
            }
            Objective::Logistic(_) => {
                let s = sigmoid(y.expect("label checked").value() * dot(x, h));
                acc.add_outer(s * (1.0 - s), x);
                true
            }
            Objective::Quadratic(_) => {
                acc.add_identity(1.0);
                true
            }
        }
    }

    /// `∇G(h)` in closed form, when the objective has one.
    pub fn exact_population_gradient(&self, h: &Vector) -> Option<Vector> {
        match self {
            Objective::Quadratic(q) => h.sub(&q.m_true).ok(),
            _ => None,
        }
    }

    /// `∇²G` in closed form, when the objective has one.
    pub fn exact_hessian(&self) -> Option<SymOperator> {
        match self {
            Objective::Quadratic(q) => Some(SymOperator::identity(q.m_true.dim())),
            _ => None,
        }
    }

    /// Starting point built from the first sample, clipped to the ball of
    /// radius `clip_radius`: the sample itself for location objectives, the
    /// origin for regressions.
    pub fn initial_point(&self, first: &Sample, clip_radius: f64) -> Vector {
        match self {
            Objective::GeometricQuantile(_) | Objective::Quadratic(_) if first.x.norm() <= clip_radius => {
                first.x.clone()
            }
            _ => Vector::zeros(self.dim()),
        }
    }
}

/// Empirical mean of per-sample gradients with the number of skipped
/// (degenerate) samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanGradient {
    pub mean: Vector,
    pub degenerate: usize,
}

fn check_batch(objective: &Objective, h: &Vector, samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(invalid("empty sample set"));
    }
    check_dim(objective.dim(), h.dim())?;
    samples.iter().try_for_each(|s| objective.check_sample(s))
}

/// Mean stochastic gradient over `samples`, skipping degenerate ones.
///
/// The reduction is chunked and pairwise, so the result does not depend on
/// how many threads evaluated it.
pub fn mean_gradient(objective: &Objective, h: &Vector, samples: &[Sample]) -> Result<MeanGradient> {
    check_batch(objective, h, samples)?;
    let d = h.dim();
    let partials = par::map_chunks(samples, |chunk| {
        let mut sum = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut used = 0usize;
        for s in chunk {
            if objective.gradient_into(s.x.as_slice(), s.y, h.as_slice(), &mut g) {
                used += 1;
                sum.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
        (sum, used)
    });
    let used: usize = partials.iter().map(|p| p.1).sum();
    if used == 0 {
        return Err(Error::AllDegenerate);
    }
    let sums: Vec<Vec<f64>> = partials.into_iter().map(|p| p.0).collect();
    let total = pairwise_sum_rows(&sums, d);
    Ok(MeanGradient {
        mean: Vector::from_raw(total.into_iter().map(|t| t / used as f64).collect()),
        degenerate: samples.len() - used,
    })
}

/// Mean loss over `samples`.
pub fn mean_loss(objective: &Objective, h: &Vector, samples: &[Sample]) -> Result<f64> {
    check_batch(objective, h, samples)?;
    let partials = par::map_chunks(samples, |chunk| {
        let losses: Vec<f64> = chunk
            .iter()
            .map(|s| objective.loss_unchecked(s.x.as_slice(), s.y, h.as_slice()))
            .collect();
        pairwise_sum(&losses)
    });
    Ok(pairwise_sum(&partials) / samples.len() as f64)
}

/// Monte Carlo Hessian `mean ∇²_h g(X_i, h)`, skipping degenerate samples.
pub fn hessian_mc(objective: &Objective, h: &Vector, samples: &[Sample]) -> Result<SymOperator> {
    check_batch(objective, h, samples)?;
    let d = h.dim();
    let partials = par::map_chunks(samples, |chunk| {
        let mut acc = SymOperator::zeros(d);
        let mut scratch = vec![0.0; d];
        let used = chunk
            .iter()
            .filter(|s| objective.hessian_accumulate(s.x.as_slice(), s.y, h.as_slice(), &mut acc, &mut scratch))
            .count();
        (acc, used)
    });
    let used: usize = partials.iter().map(|p| p.1).sum();
    if used == 0 {
        return Err(Error::AllDegenerate);
    }
    let rows: Vec<Vec<f64>> = partials.into_iter().map(|p| p.0.row_major().to_vec()).collect();
    let mut total = SymOperator::from_row_major(d, pairwise_sum_rows(&rows, d * d))?;
    total.scale(1.0 / used as f64);
    Ok(total)
}

/// Empirical-risk gradient `(1/N) Σ ∇_h g(X_k, h)` (degenerate samples skipped).
pub fn empirical_batch_gradient(objective: &Objective, h: &Vector, samples: &[Sample]) -> Result<Vector> {
    mean_gradient(objective, h, samples).map(|g| g.mean)
}

pub fn gq_stochastic_gradient(obj: &GeometricQuantileObjective, x: &Vector, h: &Vector) -> Result<Option<Vector>> {
    Objective::GeometricQuantile(obj.clone()).stochastic_gradient(&Sample::point(x.clone()), h)
}

/// MC estimate of `∇G_v(h) = -E[(X-h)/‖X-h‖] - v`.
pub fn gq_population_gradient_mc(obj: &GeometricQuantileObjective, h: &Vector, samples: &[Sample]) -> Result<MeanGradient> {
    mean_gradient(&Objective::GeometricQuantile(obj.clone()), h, samples)
}

/// MC estimate of `E[(I - u⊗u)/‖X-h‖]`, `u = (X-h)/‖X-h‖`.
pub fn gq_hessian_mc(obj: &GeometricQuantileObjective, h: &Vector, samples: &[Sample]) -> Result<SymOperator> {
    hessian_mc(&Objective::GeometricQuantile(obj.clone()), h, samples)
}

pub fn cosh_stochastic_gradient(obj: &CoshLogisticObjective, x: &Vector, y: Label, h: &Vector) -> Result<Vector> {
    let sample = Sample::labeled(x.clone(), y);
    Objective::CoshLogistic(obj.clone())
        .stochastic_gradient(&sample, h)
        .map(|g| g.expect("cosh-logistic gradient is always defined"))
}

pub fn logistic_stochastic_gradient(obj: &LogisticObjective, x: &Vector, y: Label, h: &Vector) -> Result<Vector> {
    let sample = Sample::labeled(x.clone(), y);
    Objective::Logistic(obj.clone())
        .stochastic_gradient(&sample, h)
        .map(|g| g.expect("logistic gradient is always defined"))
}

pub fn quadratic_stochastic_gradient(obj: &QuadraticObjective, x: &Vector, h: &Vector) -> Result<Vector> {
    Objective::Quadratic(obj.clone())
        .stochastic_gradient(&Sample::point(x.clone()), h)
        .map(|g| g.expect("quadratic gradient is always defined"))
}
