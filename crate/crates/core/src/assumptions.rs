//! Numerical checks of local strong convexity, the Taylor remainder of the
//! gradient, and gradient moment growth, for a concrete objective and
//! sampling distribution.
//!
//! Population gradients are estimated on one frozen Monte Carlo sample. The
//! convexity ratio and the remainder use common random numbers: per sample
//! they are built from `∇g(X,h) - ∇g(X,m)`, whose spread shrinks with
//! `‖h - m‖`, so probes close to `m` stay informative. The population
//! gradient at `m` vanishes, so the differenced mean estimates `∇G(h)`.
//! Objectives with closed-form gradients and Hessians skip Monte Carlo and
//! report exact values with zero standard error.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::averaged_sgd::ObjectiveBinding;
use crate::datagen::{freeze_in, Sample};
use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{dot, extreme_eigenvalues, norm_slice, pairwise_sum, pairwise_sum_rows, SymOperator, Vector};
use crate::objectives::{hessian_mc, Objective};
use crate::par;
use crate::rng::{self, Domain};

const EIGEN_TOL: f64 = 1e-10;
const EIGEN_MAX_ITER: usize = 100_000;

/// Shape of the probe set and Monte Carlo budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSettings {
    /// Largest probe distance `A` from `m`.
    pub radius: f64,
    pub n_probes: usize,
    pub n_mc: usize,
    /// Moment orders `q` for `E‖∇g(X,h)‖^{2q}`.
    pub moment_orders: Vec<u32>,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self { radius: 1.0, n_probes: 24, n_mc: 100_000, moment_orders: vec![1, 2] }
    }
}

impl CheckSettings {
    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(invalid("probe radius must be positive"));
        }
        if self.n_probes == 0 {
            return Err(invalid("need at least one probe"));
        }
        if self.n_mc < 2 {
            return Err(invalid("n_mc must be at least 2"));
        }
        if self.moment_orders.contains(&0) {
            return Err(invalid("moment order q must be >= 1"));
        }
        Ok(())
    }
}

/// Probe points around `m`: radii log-spaced over `[1e-3·A, A]`, directions
/// cycling through the coordinate frame and then through random rotations of it.
pub fn probe_points(m: &Vector, radius: f64, n_probes: usize, seed: u64) -> Vec<Vector> {
    let d = m.dim();
    let mut rng = rng::stream(seed, Domain::Probes, 0);
    let mut frame: Vec<Vec<f64>> = (0..d).map(|i| Vector::basis(d, i).into_inner()).collect();
    (0..n_probes)
        .map(|j| {
            if j > 0 && j % d == 0 {
                frame = random_orthonormal_frame(d, &mut rng);
            }
            let r = if n_probes == 1 {
                radius
            } else {
                radius * 1e-3f64.powf(1.0 - j as f64 / (n_probes - 1) as f64)
            };
            let u = &frame[j % d];
            Vector::from_raw(m.as_slice().iter().zip(u).map(|(mi, ui)| mi + r * ui).collect())
        })
        .collect()
}

fn random_orthonormal_frame(d: usize, rng: &mut rng::StreamRng) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(d);
    while frame.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for u in &frame {
            let c = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(vi, ui)| *vi -= c * ui);
        }
        let n = norm_slice(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|vi| *vi /= n);
            frame.push(v);
        }
    }
    frame
}

/// Convexity ratio and remainder at one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub distance: f64,
    pub h: Vector,
    /// `<∇G(h), h-m> / ‖h-m‖²`.
    pub ratio: f64,
    pub ratio_stderr: f64,
    /// `‖∇G(h) - Γ_m(h-m)‖ / ‖h-m‖²`.
    pub remainder: f64,
    pub remainder_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentProbe {
    pub distance: f64,
    pub moment: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub q: u32,
    pub probes: Vec<MomentProbe>,
    /// Least-squares slope of `ln moment` on `ln ‖h-m‖` over probes with `h ≠ m`.
    pub growth_exponent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub objective: String,
    pub family: String,
    pub m: Vector,
    pub exact: bool,
    pub lambda_min_hat: f64,
    pub lambda_max_hat: f64,
    pub ratio_min: f64,
    pub ratio_min_stderr: f64,
    pub remainder_max: f64,
    pub remainder_max_stderr: f64,
    pub radius: f64,
    pub n_probes: usize,
    pub n_mc: usize,
    pub profile: Vec<ProbeRecord>,
    pub moments: Vec<MomentCheck>,
}

/// Frozen Monte Carlo sample plus the Hessian estimate at `m`.
pub struct Checker<'a> {
    objective: &'a Objective,
    m: Vector,
    samples: Vec<Sample>,
    hessian: SymOperator,
    exact: bool,
}

impl<'a> Checker<'a> {
    pub fn new(binding: &'a ObjectiveBinding, m: &Vector, n_mc: usize, seed: u64) -> Result<Self> {
        check_dim(binding.dim(), m.dim())?;
        if !m.is_finite() {
            return Err(Error::NonFinite("reference point"));
        }
        let objective = &binding.objective;
        let samples = freeze_in(&binding.distribution, n_mc, seed, Domain::MonteCarlo)?.samples;
        let (hessian, exact) = match objective.exact_hessian() {
            Some(h) if objective.exact_population_gradient(m).is_some() => (h, true),
            _ => (hessian_mc(objective, m, &samples)?, false),
        };
        Ok(Self { objective, m: m.clone(), samples, hessian, exact })
    }

    pub fn hessian(&self) -> &SymOperator {
        &self.hessian
    }

    pub fn probe(&self, h: &Vector) -> Result<ProbeRecord> {
        check_dim(self.m.dim(), h.dim())?;
        let a: Vec<f64> = h.as_slice().iter().zip(self.m.as_slice()).map(|(x, y)| x - y).collect();
        let a2 = dot(&a, &a);
        if !(a2 > 0.0) {
            return Err(invalid("probe must differ from m"));
        }
        let distance = a2.sqrt();
        if self.exact {
            let g = self.objective.exact_population_gradient(h).expect("exact gradient");
            let g0 = self.objective.exact_population_gradient(&self.m).expect("exact gradient");
            let mut ga = vec![0.0; a.len()];
            self.hessian.apply_into(&a, &mut ga);
            let diff: Vec<f64> = g.as_slice().iter().zip(g0.as_slice()).map(|(x, y)| x - y).collect();
            let rem: Vec<f64> = diff.iter().zip(&ga).map(|(x, y)| x - y).collect();
            return Ok(ProbeRecord {
                distance,
                h: h.clone(),
                ratio: dot(&diff, &a) / a2,
                ratio_stderr: 0.0,
                remainder: norm_slice(&rem) / a2,
                remainder_stderr: 0.0,
            });
        }
        let d = a.len();
        let obj = self.objective;
        let (hs, ms) = (h.as_slice(), self.m.as_slice());
        // Per chunk: Σ s, Σ s², Σ w, Σ w∘w, count.
        let parts = par::map_chunks(&self.samples, |chunk| {
            let (mut gh, mut gm, mut hv) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
            let mut s = Vec::with_capacity(chunk.len());
            let mut s2 = Vec::with_capacity(chunk.len());
            let mut w = vec![0.0; d];
            let mut w2 = vec![0.0; d];
            for smp in chunk {
                let x = smp.x.as_slice();
                if !(obj.gradient_into(x, smp.y, hs, &mut gh)
                    && obj.gradient_into(x, smp.y, ms, &mut gm)
                    && obj.hessian_vector_into(x, smp.y, ms, &a, &mut hv))
                {
                    continue;
                }
                let mut si = 0.0;
                for k in 0..d {
                    let diff = gh[k] - gm[k];
                    si += diff * a[k];
                    let wk = diff - hv[k];
                    w[k] += wk;
                    w2[k] += wk * wk;
                }
                let si = si / a2;
                s.push(si);
                s2.push(si * si);
            }
            let count = s.len();
            (pairwise_sum(&s), pairwise_sum(&s2), w, w2, count)
        });
        let count: usize = parts.iter().map(|p| p.4).sum();
        if count == 0 {
            return Err(Error::AllDegenerate);
        }
        let nf = count as f64;
        let s_mean = pairwise_sum(&parts.iter().map(|p| p.0).collect::<Vec<_>>()) / nf;
        let s2_mean = pairwise_sum(&parts.iter().map(|p| p.1).collect::<Vec<_>>()) / nf;
        let w_rows: Vec<Vec<f64>> = parts.iter().map(|p| p.2.clone()).collect();
        let w2_rows: Vec<Vec<f64>> = parts.iter().map(|p| p.3.clone()).collect();
        let w_mean: Vec<f64> = pairwise_sum_rows(&w_rows, d).into_iter().map(|x| x / nf).collect();
        let w2_mean: Vec<f64> = pairwise_sum_rows(&w2_rows, d).into_iter().map(|x| x / nf).collect();
        let var_w: f64 = w_mean.iter().zip(&w2_mean).map(|(m1, m2)| (m2 - m1 * m1).max(0.0)).sum();
        Ok(ProbeRecord {
            distance,
            h: h.clone(),
            ratio: s_mean,
            ratio_stderr: sample_stderr(s_mean, s2_mean, count),
            remainder: norm_slice(&w_mean) / a2,
            remainder_stderr: (var_w * nf / (nf - 1.0).max(1.0)).sqrt() / nf.sqrt() / a2,
        })
    }

    /// `E‖∇g(X,h)‖^{2q}` at each point of `hs`. Degenerate samples are skipped.
    pub fn gradient_moments(&self, q: u32, hs: &[Vector]) -> Result<MomentCheck> {
        if q == 0 {
            return Err(invalid("moment order q must be >= 1"));
        }
        let d = self.m.dim();
        let obj = self.objective;
        let mut probes = Vec::with_capacity(hs.len());
        for h in hs {
            check_dim(d, h.dim())?;
            let parts = par::map_chunks(&self.samples, |chunk| {
                let mut g = vec![0.0; d];
                let mut vals = Vec::with_capacity(chunk.len());
                let mut sq = Vec::with_capacity(chunk.len());
                for smp in chunk {
                    if obj.gradient_into(smp.x.as_slice(), smp.y, h.as_slice(), &mut g) {
                        let v = dot(&g, &g).powi(q as i32);
                        vals.push(v);
                        sq.push(v * v);
                    }
                }
                (pairwise_sum(&vals), pairwise_sum(&sq), vals.len())
            });
            let count: usize = parts.iter().map(|p| p.2).sum();
            if count == 0 {
                return Err(Error::AllDegenerate);
            }
            let nf = count as f64;
            let mean = pairwise_sum(&parts.iter().map(|p| p.0).collect::<Vec<_>>()) / nf;
            let sq = pairwise_sum(&parts.iter().map(|p| p.1).collect::<Vec<_>>()) / nf;
            probes.push(MomentProbe { distance: h.sub(&self.m)?.norm(), moment: mean, stderr: sample_stderr(mean, sq, count) });
        }
        let pts: Vec<(f64, f64)> = probes
            .iter()
            .filter(|p| p.distance > 0.0 && p.moment > 0.0)
            .map(|p| (p.distance.ln(), p.moment.ln()))
            .collect();
        Ok(MomentCheck { q, probes, growth_exponent: ols_slope(&pts) })
    }
}

fn sample_stderr(mean: f64, mean_sq: f64, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let nf = n as f64;
    let var = (mean_sq - mean * mean).max(0.0) * nf / (nf - 1.0);
    (var / nf).sqrt()
}

fn ols_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Minimum convexity ratio over the probe set, with its standard error and
/// the full profile.
pub fn check_strong_convexity(
    binding: &ObjectiveBinding,
    m: &Vector,
    settings: &CheckSettings,
    seed: u64,
) -> Result<(f64, f64, Vec<ProbeRecord>)> {
    settings.validate()?;
    let checker = Checker::new(binding, m, settings.n_mc, seed)?;
    let profile = probe_points(m, settings.radius, settings.n_probes, seed)
        .iter()
        .map(|h| checker.probe(h))
        .collect::<Result<Vec<_>>>()?;
    let worst = argmin_by(&profile, |p| p.ratio);
    Ok((profile[worst].ratio, profile[worst].ratio_stderr, profile))
}

/// Maximum normalized Taylor remainder over the probe set, with its standard error.
pub fn check_taylor_remainder(
    binding: &ObjectiveBinding,
    m: &Vector,
    settings: &CheckSettings,
    seed: u64,
) -> Result<(f64, f64)> {
    let (_, _, profile) = check_strong_convexity(binding, m, settings, seed)?;
    let worst = argmin_by(&profile, |p| -p.remainder);
    Ok((profile[worst].remainder, profile[worst].remainder_stderr))
}

/// Gradient moments of order `2q` at the given points.
pub fn check_gradient_moments(
    binding: &ObjectiveBinding,
    m: &Vector,
    q: u32,
    n_mc: usize,
    hs: &[Vector],
    seed: u64,
) -> Result<MomentCheck> {
    Checker::new(binding, m, n_mc, seed)?.gradient_moments(q, hs)
}

fn argmin_by(profile: &[ProbeRecord], key: impl Fn(&ProbeRecord) -> f64) -> usize {
    (0..profile.len()).min_by(|&i, &j| key(&profile[i]).total_cmp(&key(&profile[j]))).expect("at least one probe")
}

/// Runs every check against one Monte Carlo sample.
pub fn convexity_report(binding: &ObjectiveBinding, m: &Vector, settings: &CheckSettings, seed: u64) -> Result<ConvexityReport> {
    settings.validate()?;
    let checker = Checker::new(binding, m, settings.n_mc, seed)?;
    let eig = extreme_eigenvalues(checker.hessian(), EIGEN_TOL, EIGEN_MAX_ITER)?;
    let hs = probe_points(m, settings.radius, settings.n_probes, seed);
    let profile = hs.iter().map(|h| checker.probe(h)).collect::<Result<Vec<_>>>()?;
    let lo = argmin_by(&profile, |p| p.ratio);
    let hi = argmin_by(&profile, |p| -p.remainder);
    let mut moment_points = vec![m.clone()];
    moment_points.extend(hs.iter().cloned());
    let moments = settings
        .moment_orders
        .iter()
        .map(|&q| checker.gradient_moments(q, &moment_points))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvexityReport {
        objective: binding.objective.name().to_string(),
        family: binding.distribution.family().to_string(),
        m: m.clone(),
        exact: checker.exact,
        lambda_min_hat: eig.lambda_min,
        lambda_max_hat: eig.lambda_max,
        ratio_min: profile[lo].ratio,
        ratio_min_stderr: profile[lo].ratio_stderr,
        remainder_max: profile[hi].remainder,
        remainder_max_stderr: profile[hi].remainder_stderr,
        radius: settings.radius,
        n_probes: settings.n_probes,
        n_mc: settings.n_mc,
        profile,
        moments,
    })
}
