//! Monte Carlo replication of estimator trajectories and log-log rate fits.
//!
//! Each replicate `r` draws from its own stream `rng::stream(seed, Replicate, r)`.
//! Replicates run in parallel, but per-replicate results are stored by index
//! and reduced in index order, so tables do not depend on scheduling.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;

use crate::averaged_sgd::{run_stream_with, ObjectiveBinding, StepSchedule, DEFAULT_CLIP_RADIUS};
use crate::datagen::fmt_f64;
use crate::error::{invalid, Error, Result};
use crate::linalg::{dist_slice, pairwise_sum, Vector};
use crate::oracle::{ground_truth, GroundTruth, OracleSettings, TruthMode};
use crate::par;
use crate::rng::{self, Domain, StreamRng};

pub const MIN_FIT_POINTS: usize = 8;
pub const DEFAULT_POINTS_PER_DECADE: u32 = 12;
pub const DEFAULT_BURN_IN: f64 = 0.5;

/// Geometric grid `from·10^{k/per_decade}` (rounded, deduplicated) up to `n_max`.
pub fn checkpoint_grid(from: u64, n_max: u64, per_decade: u32) -> Result<Vec<u64>> {
    if from == 0 || from > n_max {
        return Err(invalid(format!("checkpoint grid needs 1 <= from <= n_max, got {from}..{n_max}")));
    }
    if per_decade < 8 {
        return Err(invalid("checkpoint grid needs at least 8 points per decade"));
    }
    let mut grid = Vec::new();
    for k in 0.. {
        let n = (from as f64 * 10f64.powf(k as f64 / per_decade as f64)).round() as u64;
        if n > n_max {
            break;
        }
        if grid.last() != Some(&n) {
            grid.push(n);
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub mode: TruthMode,
    pub oracle: OracleSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub binding: ObjectiveBinding,
    pub schedule: StepSchedule,
    pub clip_radius: f64,
    pub n_max: u64,
    pub checkpoints: Vec<u64>,
    pub replicates: usize,
    /// Moment orders `p`: the harness estimates `E‖· - m‖^{2p}`.
    pub moments: Vec<u32>,
    pub seed: u64,
    pub burn_in: f64,
    pub truth: TruthSpec,
}

impl ExperimentConfig {
    /// Defaults: 12 checkpoints per decade from `10^3`, burn-in half the log-range,
    /// `p ∈ {1, 2}`, analytic ground truth.
    pub fn new(binding: ObjectiveBinding, schedule: StepSchedule, n_max: u64, replicates: usize, seed: u64) -> Result<Self> {
        let checkpoints = checkpoint_grid(1000.min(n_max), n_max, DEFAULT_POINTS_PER_DECADE)?;
        Ok(Self {
            binding,
            schedule,
            clip_radius: DEFAULT_CLIP_RADIUS,
            n_max,
            checkpoints,
            replicates,
            moments: vec![1, 2],
            seed,
            burn_in: DEFAULT_BURN_IN,
            truth: TruthSpec { mode: TruthMode::Analytic, oracle: OracleSettings::default() },
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(invalid("need at least 2 replicates"));
        }
        if self.moments.is_empty() || self.moments.contains(&0) {
            return Err(invalid("moment orders must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(invalid("burn-in fraction must lie in [0, 1)"));
        }
        if self.checkpoints.is_empty() || self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("checkpoints must be strictly increasing and non-empty"));
        }
        if self.checkpoints[0] == 0 || *self.checkpoints.last().unwrap() > self.n_max {
            return Err(invalid(format!("checkpoints must lie in [1, {}]", self.n_max)));
        }
        if !(self.clip_radius > 0.0) {
            return Err(invalid("clip radius must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Raw,
    Averaged,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Raw => "raw",
            Estimator::Averaged => "averaged",
        }
    }
}

/// One row of the moment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub estimator: Estimator,
    pub p: u32,
    pub n: u64,
    pub moment: f64,
    pub stderr: f64,
    pub replicates: usize,
}

/// Output of `run_replicates`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRun {
    pub rows: Vec<MomentRow>,
    pub failures: usize,
    /// `‖Z̄_{n_max} - m‖` for each surviving replicate, in replicate order.
    pub final_distances: Vec<f64>,
}

/// Squared distances `(‖Z_n - m‖², ‖Z̄_n - m‖²)` at every checkpoint of one replicate.
fn replicate_distances(config: &ExperimentConfig, m: &Vector, mut rng: StreamRng) -> Result<(Vec<(f64, f64)>, f64)> {
    let dist = &config.binding.distribution;
    let mut out = Vec::with_capacity(config.checkpoints.len());
    let last = run_stream_with(
        &config.binding.objective,
        &config.schedule,
        config.clip_radius,
        |s| dist.sample_into(&mut rng, s),
        dist.empty_sample(),
        config.n_max,
        &config.checkpoints,
        |st| {
            let raw = dist_slice(st.z.as_slice(), m.as_slice());
            let avg = dist_slice(st.z_bar.as_slice(), m.as_slice());
            out.push((raw * raw, avg * avg));
        },
    )?;
    Ok((out, dist_slice(last.z_bar.as_slice(), m.as_slice())))
}

/// Runs all replicates against the reference point `m`.
pub fn run_replicates(config: &ExperimentConfig, m: &Vector) -> Result<ReplicateRun> {
    run_replicates_with(config, m, |r| rng::stream(config.seed, Domain::Replicate, r as u64))
}

/// As `run_replicates`, with the stream of replicate `r` supplied by `stream_of`.
pub fn run_replicates_with(
    config: &ExperimentConfig,
    m: &Vector,
    stream_of: impl Fn(usize) -> StreamRng + Sync + Send,
) -> Result<ReplicateRun> {
    config.validate()?;
    crate::error::check_dim(config.binding.dim(), m.dim())?;
    let results = par::map_indexed(config.replicates, |r| replicate_distances(config, m, stream_of(r)));
    let mut ok = Vec::with_capacity(results.len());
    let mut failures = 0;
    for res in results {
        match res {
            Ok(v) => ok.push(v),
            Err(Error::NonFiniteIterate { .. }) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    if failures * 100 > config.replicates || ok.len() < 2 {
        return Err(Error::TooManyFailures { failed: failures, total: config.replicates });
    }
    let mut rows = Vec::new();
    let mut values = Vec::with_capacity(ok.len());
    let mut squares = Vec::with_capacity(ok.len());
    for estimator in [Estimator::Raw, Estimator::Averaged] {
        for &p in &config.moments {
            for (c, &n) in config.checkpoints.iter().enumerate() {
                values.clear();
                squares.clear();
                for (dists, _) in &ok {
                    let d2 = match estimator {
                        Estimator::Raw => dists[c].0,
                        Estimator::Averaged => dists[c].1,
                    };
                    let v = d2.powi(p as i32);
                    values.push(v);
                    squares.push(v * v);
                }
                let k = values.len() as f64;
                let mean = pairwise_sum(&values) / k;
                let var = ((pairwise_sum(&squares) / k - mean * mean) * k / (k - 1.0)).max(0.0);
                rows.push(MomentRow { estimator, p, n, moment: mean, stderr: (var / k).sqrt(), replicates: ok.len() });
            }
        }
    }
    Ok(ReplicateRun { rows, failures, final_distances: ok.iter().map(|o| o.1).collect() })
}

/// OLS fit of `ln moment = intercept + slope·ln n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    /// Smallest `n` kept after burn-in.
    pub cutoff: f64,
    pub points: usize,
}

/// Fits a power law to the checkpoints in the last `1 - burn_in_fraction` of
/// the table's log-range.
pub fn fit_loglog_slope(table: &[(u64, f64)], burn_in_fraction: f64) -> Result<SlopeFit> {
    if !(0.0..1.0).contains(&burn_in_fraction) {
        return Err(invalid("burn-in fraction must lie in [0, 1)"));
    }
    let (lo, hi) = match (table.iter().map(|r| r.0).min(), table.iter().map(|r| r.0).max()) {
        (Some(lo), Some(hi)) if lo > 0 => ((lo as f64).ln(), (hi as f64).ln()),
        (Some(_), _) => return Err(invalid("checkpoints must be positive")),
        _ => return Err(Error::InsufficientPoints { found: 0, required: MIN_FIT_POINTS }),
    };
    let log_cut = lo + burn_in_fraction * (hi - lo);
    let mut pts = Vec::new();
    for &(n, moment) in table {
        let x = (n as f64).ln();
        if x < log_cut - 1e-12 {
            continue;
        }
        if !(moment > 0.0) {
            return Err(Error::NonPositiveMoment { n });
        }
        pts.push((x, moment.ln()));
    }
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientPoints { found: pts.len(), required: MIN_FIT_POINTS });
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return Err(invalid("checkpoints after burn-in must span more than one n"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    Ok(SlopeFit {
        slope,
        stderr: (ssr / (k - 2.0) / sxx).sqrt(),
        intercept,
        cutoff: log_cut.exp(),
        points: pts.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentPoint {
    pub n: u64,
    pub moment: f64,
    pub stderr: f64,
}

/// Moments and fitted rate for one `(estimator, p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSeries {
    pub estimator: Estimator,
    pub p: u32,
    /// `-pα` for the raw iterate, `-p` for the average.
    pub target_slope: f64,
    pub fit: SlopeFit,
    /// `exp(intercept)`: the constant in `moment ≈ K n^{slope}`.
    pub constant: f64,
    pub points: Vec<MomentPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub config_hash: String,
    pub objective: String,
    pub family: String,
    pub dim: usize,
    pub c_gamma: f64,
    pub alpha: f64,
    pub n_max: u64,
    pub replicates: usize,
    pub seed: u64,
    pub burn_in_fraction: f64,
    pub ground_truth: GroundTruth,
    pub failures: usize,
    pub series: Vec<RateSeries>,
    pub final_distance_max: f64,
    pub final_distance_rms: f64,
}

impl RateReport {
    pub fn series(&self, estimator: Estimator, p: u32) -> Option<&RateSeries> {
        self.series.iter().find(|s| s.estimator == estimator && s.p == p)
    }
}

/// Resolves ground truth, runs the replicates and fits every `(estimator, p)`.
pub fn rate_experiment(config: &ExperimentConfig) -> Result<(RateReport, Vec<MomentRow>)> {
    config.validate()?;
    let truth = ground_truth(&config.binding, config.truth.mode, &config.truth.oracle, config.seed)?;
    let run = run_replicates(config, &truth.m)?;
    let mut series = Vec::new();
    for estimator in [Estimator::Raw, Estimator::Averaged] {
        for &p in &config.moments {
            let rows: Vec<&MomentRow> = run.rows.iter().filter(|r| r.estimator == estimator && r.p == p).collect();
            let table: Vec<(u64, f64)> = rows.iter().map(|r| (r.n, r.moment)).collect();
            let fit = fit_loglog_slope(&table, config.burn_in)?;
            let rate = match estimator {
                Estimator::Raw => p as f64 * config.schedule.alpha,
                Estimator::Averaged => p as f64,
            };
            series.push(RateSeries {
                estimator,
                p,
                target_slope: -rate,
                constant: fit.intercept.exp(),
                fit,
                points: rows.iter().map(|r| MomentPoint { n: r.n, moment: r.moment, stderr: r.stderr }).collect(),
            });
        }
    }
    let k = run.final_distances.len() as f64;
    let report = RateReport {
        config_hash: config.digest(),
        objective: config.binding.objective.name().to_string(),
        family: config.binding.distribution.family().to_string(),
        dim: config.binding.dim(),
        c_gamma: config.schedule.c_gamma,
        alpha: config.schedule.alpha,
        n_max: config.n_max,
        replicates: config.replicates,
        seed: config.seed,
        burn_in_fraction: config.burn_in,
        ground_truth: truth,
        failures: run.failures,
        series,
        final_distance_max: run.final_distances.iter().copied().fold(0.0, f64::max),
        final_distance_rms: (run.final_distances.iter().map(|d| d * d).sum::<f64>() / k).sqrt(),
    };
    Ok((report, run.rows))
}

/// Writes the moment table as CSV with 17 significant digits.
pub fn write_moments_csv<W: Write>(rows: &[MomentRow], mut w: W) -> Result<()> {
    writeln!(w, "estimator,p,n,moment,stderr,replicates")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.estimator.name(), r.p, r.n, fmt_f64(r.moment), fmt_f64(r.stderr), r.replicates)?;
    }
    Ok(())
}
