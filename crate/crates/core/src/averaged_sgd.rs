//! The Robbins–Monro iterate and its running average.
//!
//! ```text
//! Z_{n+1} = Z_n - γ_n ∇_h g(X_{n+1}, Z_n)
//! Z̄_{n+1} = Z̄_n + (Z_{n+1} - Z̄_n) / (n + 1)
//! ```
//!
//! Memory is constant in `n`: the state is the pair `(Z_n, Z̄_n)` plus the
//! step counter.

use serde::{Deserialize, Serialize};

use crate::datagen::{DistributionSpec, Sample};
use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::Vector;
use crate::objectives::Objective;
use crate::rng::StreamRng;

pub const DEFAULT_C_GAMMA: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 2.0 / 3.0;
pub const DEFAULT_CLIP_RADIUS: f64 = 1e4;

/// `γ_n = c_γ n^{-α}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub c_gamma: f64,
    pub alpha: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self { c_gamma: DEFAULT_C_GAMMA, alpha: DEFAULT_ALPHA }
    }
}

impl StepSchedule {
    /// Accepts `α ∈ (1/2, 1)`; `α = 1` only when `allow_alpha_one` is set.
    pub fn new(c_gamma: f64, alpha: f64, allow_alpha_one: bool) -> Result<Self> {
        if !(c_gamma > 0.0 && c_gamma.is_finite()) {
            return Err(invalid(format!("c_gamma must be positive, got {c_gamma}")));
        }
        let inside = alpha > 0.5 && alpha < 1.0;
        if !(inside || (alpha == 1.0 && allow_alpha_one)) {
            return Err(invalid(format!(
                "alpha must lie in (1/2, 1) (alpha = 1 needs the explicit override), got {alpha}"
            )));
        }
        Ok(Self { c_gamma, alpha })
    }

    /// Non-fatal warning for configurations outside the usual regime.
    pub fn warning(&self) -> Option<&'static str> {
        (self.alpha == 1.0).then_some(
            "alpha = 1: the raw iterate only converges at rate 1/n when c_gamma exceeds 1/lambda_min",
        )
    }

    #[inline]
    pub fn step_size(&self, n: u64) -> f64 {
        debug_assert!(n >= 1);
        self.c_gamma * (n as f64).powf(-self.alpha)
    }
}

/// Objective paired with the law it is minimized under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBinding {
    pub objective: Objective,
    pub distribution: DistributionSpec,
}

impl ObjectiveBinding {
    pub fn new(objective: Objective, distribution: DistributionSpec) -> Result<Self> {
        distribution.validate()?;
        check_dim(objective.dim(), distribution.dim())?;
        if objective.needs_labels() != distribution.is_labeled() {
            return Err(invalid(format!(
                "objective {} is incompatible with distribution {}",
                objective.name(),
                distribution.family()
            )));
        }
        if let Objective::Quadratic(q) = &objective {
            if distribution.mean().as_ref() != Some(&q.m_true) {
                return Err(invalid("quadratic objective's m_true must equal the distribution mean"));
            }
        }
        Ok(Self { objective, distribution })
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }
}

/// `(n, Z_n, Z̄_n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub n: u64,
    pub z: Vector,
    pub z_bar: Vector,
    #[serde(skip)]
    grad: Vec<f64>,
}

impl EstimatorState {
    /// `Z_1 = Z̄_1 =` the objective's clipped initializer built from `first`.
    pub fn init(objective: &Objective, first: &Sample, clip_radius: f64) -> Result<Self> {
        if !(clip_radius > 0.0) {
            return Err(invalid(format!("clip radius must be positive, got {clip_radius}")));
        }
        objective.check_sample(first)?;
        Ok(Self::from_point(objective.initial_point(first, clip_radius)))
    }

    /// Starts the recursion at an explicit `Z_1`.
    pub fn from_point(z1: Vector) -> Self {
        let d = z1.dim();
        Self { n: 1, z_bar: z1.clone(), z: z1, grad: vec![0.0; d] }
    }

    /// One step of both recursions. Returns `false` if the gradient was
    /// degenerate, in which case `Z` is held but `n` and `Z̄` still advance.
    pub fn step(&mut self, sched: &StepSchedule, objective: &Objective, sample: &Sample) -> Result<bool> {
        objective.check_sample(sample)?;
        check_dim(self.z.dim(), sample.x.dim())?;
        self.step_unchecked(sched, objective, sample)
    }

    #[inline]
    pub(crate) fn step_unchecked(&mut self, sched: &StepSchedule, objective: &Objective, sample: &Sample) -> Result<bool> {
        let gamma = sched.step_size(self.n);
        let moved = objective.gradient_into(sample.x.as_slice(), sample.y, self.z.as_slice(), &mut self.grad);
        let next = self.n + 1;
        let w = 1.0 / next as f64;
        let mut finite = true;
        for ((z, zb), g) in self.z.as_mut_slice().iter_mut().zip(self.z_bar.as_mut_slice()).zip(&self.grad) {
            if moved {
                *z -= gamma * g;
            }
            *zb += (*z - *zb) * w;
            finite &= z.is_finite() && zb.is_finite();
        }
        self.n = next;
        if !finite {
            return Err(Error::NonFiniteIterate { n: next });
        }
        Ok(moved)
    }
}

/// A snapshot taken at a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub n: u64,
    pub z: Vector,
    pub z_bar: Vector,
}

/// Streams `n_max` samples from `source` through the recursions, calling
/// `visit` with the state at every checkpoint. The first sample initializes
/// `Z_1`.
#[allow(clippy::too_many_arguments)]
pub fn run_stream_with(
    objective: &Objective,
    sched: &StepSchedule,
    clip_radius: f64,
    mut source: impl FnMut(&mut Sample),
    buffer: Sample,
    n_max: u64,
    checkpoints: &[u64],
    mut visit: impl FnMut(&EstimatorState),
) -> Result<EstimatorState> {
    validate_checkpoints(checkpoints, n_max)?;
    let mut sample = buffer;
    source(&mut sample);
    let mut state = EstimatorState::init(objective, &sample, clip_radius)?;
    let mut next = checkpoints.iter().peekable();
    while let Some(&&c) = next.peek() {
        if c != 1 {
            break;
        }
        visit(&state);
        next.next();
    }
    while state.n < n_max {
        source(&mut sample);
        objective.check_sample(&sample)?;
        state.step_unchecked(sched, objective, &sample)?;
        while next.peek().is_some_and(|&&c| c == state.n) {
            visit(&state);
            next.next();
        }
    }
    Ok(state)
}

/// Snapshots of `(n, Z_n, Z̄_n)` at each checkpoint.
pub fn run_stream(
    objective: &Objective,
    sched: &StepSchedule,
    clip_radius: f64,
    distribution: &DistributionSpec,
    rng: &mut StreamRng,
    n_max: u64,
    checkpoints: &[u64],
) -> Result<Vec<Snapshot>> {
    let mut out = Vec::with_capacity(checkpoints.len());
    run_stream_with(
        objective,
        sched,
        clip_radius,
        |s| distribution.sample_into(rng, s),
        distribution.empty_sample(),
        n_max,
        checkpoints,
        |st| out.push(Snapshot { n: st.n, z: st.z.clone(), z_bar: st.z_bar.clone() }),
    )?;
    Ok(out)
}

fn validate_checkpoints(checkpoints: &[u64], n_max: u64) -> Result<()> {
    if n_max == 0 {
        return Err(invalid("n_max must be >= 1"));
    }
    if checkpoints.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid("checkpoints must be sorted"));
    }
    if checkpoints.first().is_some_and(|&c| c == 0) || checkpoints.last().is_some_and(|&c| c > n_max) {
        return Err(invalid(format!("checkpoints must lie in [1, {n_max}]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Label;
    use crate::objectives::{CoshLogisticObjective, GeometricQuantileObjective, QuadraticObjective};
    use crate::rng::{self, Domain};
    use proptest::prelude::*;

    fn v(c: &[f64]) -> Vector {
        Vector::new(c.to_vec()).unwrap()
    }

    fn quadratic(d: usize) -> Objective {
        Objective::Quadratic(QuadraticObjective::new(Vector::zeros(d), 1.0).unwrap())
    }

    #[test]
    fn step_size_examples() {
        let s = StepSchedule::new(1.0, 0.75, false).unwrap();
        assert_eq!(s.step_size(1), 1.0);
        let s = StepSchedule::new(1.0, 2.0 / 3.0, false).unwrap();
        assert!((s.step_size(8) - 0.25).abs() < 1e-15);
        let s = StepSchedule::new(2.0, 0.75, false).unwrap();
        assert!((s.step_size(16) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        assert!(StepSchedule::new(1.0, 0.5, false).is_err());
        assert!(StepSchedule::new(1.0, 1.0, false).is_err());
        assert!(StepSchedule::new(0.0, 0.7, false).is_err());
        let one = StepSchedule::new(1.0, 1.0, true).unwrap();
        assert!(one.warning().is_some());
        assert!(StepSchedule::default().warning().is_none());
    }

    #[test]
    fn step_sizes_decrease_and_square_sums_stay_bounded() {
        for alpha in [0.51, 2.0 / 3.0, 0.9] {
            let s = StepSchedule::new(1.0, alpha, false).unwrap();
            let mut prev = f64::INFINITY;
            let mut sum_sq = 0.0;
            for n in 1..=10_000_000u64 {
                let g = s.step_size(n);
                assert!(g < prev);
                prev = g;
                sum_sq += g * g;
            }
            // Σ n^{-2α} ≤ 1 + ∫_1^∞ t^{-2α} dt
            assert!(sum_sq <= 1.0 + 1.0 / (2.0 * alpha - 1.0));
        }
    }

    #[test]
    fn init_examples() {
        let median = Objective::GeometricQuantile(GeometricQuantileObjective::median(2));
        let s = EstimatorState::init(&median, &Sample::point(v(&[3.0, 4.0])), 10.0).unwrap();
        assert_eq!((s.n, &s.z, &s.z_bar), (1, &v(&[3.0, 4.0]), &v(&[3.0, 4.0])));
        let s = EstimatorState::init(&median, &Sample::point(v(&[30.0, 40.0])), 10.0).unwrap();
        assert_eq!(s.z, v(&[0.0, 0.0]));
        let cosh = Objective::CoshLogistic(CoshLogisticObjective { dim: 2 });
        let s = EstimatorState::init(&cosh, &Sample::labeled(v(&[1.0, 1.0]), Label::Neg), 10.0).unwrap();
        assert_eq!(s.z, v(&[0.0, 0.0]));
        assert!(EstimatorState::init(&median, &Sample::point(v(&[1.0, 1.0])), 0.0).is_err());
    }

    #[test]
    fn step_examples() {
        // γ_1 = 0.5 and gradient h - x = (2, 0).
        let sched = StepSchedule::new(0.5, 0.75, false).unwrap();
        let mut s = EstimatorState::from_point(v(&[0.0, 0.0]));
        s.step(&sched, &quadratic(2), &Sample::point(v(&[-2.0, 0.0]))).unwrap();
        assert_eq!((s.n, &s.z, &s.z_bar), (2, &v(&[-1.0, 0.0]), &v(&[-0.5, 0.0])));

        // Z_1 = 0, Z_2 = 2 ⇒ Z̄_2 = 1 (γ_1 = 1, gradient h - x = -2).
        let sched = StepSchedule::new(1.0, 0.75, false).unwrap();
        let mut s = EstimatorState::from_point(v(&[0.0]));
        s.step(&sched, &quadratic(1), &Sample::point(v(&[2.0]))).unwrap();
        assert_eq!((&s.z, &s.z_bar), (&v(&[2.0]), &v(&[1.0])));

        assert!(matches!(
            s.step(&sched, &quadratic(1), &Sample::point(v(&[2.0, 1.0]))),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn degenerate_gradient_holds_iterate_but_advances_average() {
        let median = Objective::GeometricQuantile(GeometricQuantileObjective::median(2));
        let sched = StepSchedule::default();
        let mut s = EstimatorState::from_point(v(&[1.0, 1.0]));
        s.step(&sched, &median, &Sample::point(v(&[3.0, 1.0]))).unwrap();
        let (z, z_bar) = (s.z.clone(), s.z_bar.clone());
        let moved = s.step(&sched, &median, &Sample::point(z.clone())).unwrap();
        assert!(!moved);
        assert_eq!(s.n, 3);
        assert_eq!(s.z, z);
        assert!((s.z_bar[0] - (z_bar[0] + (z[0] - z_bar[0]) / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_iterate_aborts() {
        let cosh = Objective::CoshLogistic(CoshLogisticObjective { dim: 1 });
        let sched = StepSchedule::new(1e300, 0.75, false).unwrap();
        let mut s = EstimatorState::from_point(v(&[0.0]));
        let r = s.step(&sched, &cosh, &Sample::labeled(v(&[1e300]), Label::Pos));
        assert!(matches!(r, Err(Error::NonFiniteIterate { n: 2 })));
    }

    #[test]
    fn run_stream_examples() {
        let spec = DistributionSpec::Gaussian { center: v(&[1.0, 2.0]), scale: 1.0 };
        let obj = quadratic(2);
        let sched = StepSchedule::default();
        let mut rng = rng::stream(1, Domain::Replicate, 0);
        let snaps = run_stream(&obj, &sched, 1e4, &spec, &mut rng, 10, &[10]).unwrap();
        assert_eq!(snaps.len(), 1);
        assert_eq!(snaps[0].n, 10);

        let snaps = run_stream(&obj, &sched, 1e4, &spec, &mut rng, 10, &[]).unwrap();
        assert!(snaps.is_empty());

        let run = |seed| {
            let mut rng = rng::stream(seed, Domain::Replicate, 3);
            run_stream(&obj, &sched, 1e4, &spec, &mut rng, 5000, &[1, 10, 100, 5000]).unwrap()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));

        assert!(run_stream(&obj, &sched, 1e4, &spec, &mut rng, 10, &[5, 3]).is_err());
        assert!(run_stream(&obj, &sched, 1e4, &spec, &mut rng, 10, &[11]).is_err());
        assert!(run_stream(&obj, &sched, 1e4, &spec, &mut rng, 10, &[0]).is_err());
    }

    #[test]
    fn run_stream_consumes_exactly_n_max_samples() {
        let obj = quadratic(1);
        let sched = StepSchedule::default();
        let mut count = 0u64;
        let state = run_stream_with(
            &obj,
            &sched,
            1e4,
            |s| {
                count += 1;
                s.x[0] = count as f64;
            },
            Sample::point(Vector::zeros(1)),
            37,
            &[],
            |_| {},
        )
        .unwrap();
        assert_eq!(count, 37);
        assert_eq!(state.n, 37);
    }

    /// Exact `E‖Z_n - m‖²` for the quadratic objective:
    /// `a_{n+1} = (1-γ_n)² a_n + γ_n² σ² d`, `a_1 = σ² d` (Z_1 = X_1).
    fn quadratic_second_moment(sched: &StepSchedule, sigma: f64, d: usize, n_max: u64) -> Vec<f64> {
        let noise = sigma * sigma * d as f64;
        let mut a = vec![0.0, noise];
        for n in 1..n_max {
            let g = sched.step_size(n);
            let next = (1.0 - g).powi(2) * a[n as usize] + g * g * noise;
            a.push(next);
        }
        a
    }

    #[test]
    fn quadratic_monte_carlo_matches_exact_recursion() {
        let d = 1;
        let sched = StepSchedule::new(1.0, 0.75, false).unwrap();
        let spec = DistributionSpec::Gaussian { center: Vector::zeros(d), scale: 1.0 };
        let obj = quadratic(d);
        let checkpoints = [2u64, 10, 100, 1000];
        let exact = quadratic_second_moment(&sched, 1.0, d, 1000);
        let reps = 1000;
        let mut sums = vec![0.0; checkpoints.len()];
        let mut sq = vec![0.0; checkpoints.len()];
        for r in 0..reps {
            let mut rng = rng::stream(2024, Domain::Replicate, r);
            let snaps = run_stream(&obj, &sched, 1e4, &spec, &mut rng, 1000, &checkpoints).unwrap();
            for (i, s) in snaps.iter().enumerate() {
                let e2 = s.z.norm().powi(2);
                sums[i] += e2;
                sq[i] += e2 * e2;
            }
        }
        for (i, &n) in checkpoints.iter().enumerate() {
            let mean = sums[i] / reps as f64;
            let var = (sq[i] / reps as f64 - mean * mean) * reps as f64 / (reps as f64 - 1.0);
            let se = (var / reps as f64).sqrt();
            let target = exact[n as usize];
            assert!((mean - target).abs() <= 3.0 * se, "n={n}: {mean} vs {target} (se {se})");
        }
    }

    proptest! {
        #[test]
        fn running_average_equals_mean_of_iterates(
            xs in prop::collection::vec(prop::collection::vec(-100f64..100.0, 3), 2..300),
            alpha in 0.51f64..0.99,
            c in 0.1f64..3.0,
        ) {
            let sched = StepSchedule::new(c, alpha, false).unwrap();
            let median = Objective::GeometricQuantile(GeometricQuantileObjective::median(3));
            let first = Sample::point(Vector::from_raw(xs[0].clone()));
            let mut s = EstimatorState::init(&median, &first, 1e4).unwrap();
            let mut sum = s.z.as_slice().to_vec();
            for x in &xs[1..] {
                s.step(&sched, &median, &Sample::point(Vector::from_raw(x.clone()))).unwrap();
                sum.iter_mut().zip(s.z.as_slice()).for_each(|(a, b)| *a += b);
            }
            for (zb, total) in s.z_bar.as_slice().iter().zip(&sum) {
                let mean = total / s.n as f64;
                prop_assert!((zb - mean).abs() <= 1e-10 * mean.abs().max(1.0));
            }
        }
    }
}
