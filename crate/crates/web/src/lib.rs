//! Browser demo: planar geometric quantiles estimated online.
//!
//! Each export returns a JSON string for the page script to draw.

use asgd_core::averaged_sgd::{run_stream_with, ObjectiveBinding};
use asgd_core::datagen::freeze;
use asgd_core::harness::{checkpoint_grid, rate_experiment, Estimator, ExperimentConfig};
use asgd_core::objectives::GeometricQuantileObjective;
use asgd_core::oracle::weiszfeld;
use asgd_core::rng::{self, Domain};
use asgd_core::{DistributionSpec, Objective, StepSchedule, Vector};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const CLOUD_POINTS: usize = 600;
const TRUTH_SAMPLES: usize = 20_000;
const MAX_PATH_POINTS: usize = 400;

fn distribution(family: &str) -> Result<DistributionSpec, String> {
    let v = |xs: &[f64]| Vector::new(xs.to_vec()).map_err(|e| e.to_string());
    Ok(match family {
        "gaussian" => DistributionSpec::Gaussian { center: v(&[0.0, 0.0])?, scale: 1.0 },
        "student_t" => DistributionSpec::StudentT { center: v(&[0.0, 0.0])?, scale: 1.0, dof: 3.0 },
        "mixture" => DistributionSpec::Mixture {
            centers: vec![v(&[-1.5, -0.5])?, v(&[2.0, 1.0])?],
            weights: vec![0.35, 0.65],
            scale: 0.8,
        },
        other => return Err(format!("unknown family {other:?}")),
    })
}

fn quantile(vx: f64, vy: f64) -> Result<GeometricQuantileObjective, String> {
    GeometricQuantileObjective::new(Vector::new(vec![vx, vy]).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
}

fn pair(v: &Vector) -> [f64; 2] {
    [v[0], v[1]]
}

#[derive(Serialize)]
struct Trajectory {
    cloud: Vec<[f64; 2]>,
    n: Vec<u64>,
    raw: Vec<[f64; 2]>,
    averaged: Vec<[f64; 2]>,
    truth: [f64; 2],
}

/// Runs one stream of `n` samples and records both estimators along a
/// geometric grid, with the cloud and a batch solution for reference.
pub fn trajectory_json(family: &str, vx: f64, vy: f64, alpha: f64, n: u64, seed: u64) -> Result<String, String> {
    let spec = distribution(family)?;
    let objective = Objective::GeometricQuantile(quantile(vx, vy)?);
    let schedule = StepSchedule::new(1.0, alpha, false).map_err(|e| e.to_string())?;
    if n < 2 {
        return Err("need at least 2 samples".into());
    }
    let grid: Vec<u64> = {
        let mut g: Vec<u64> = (0..MAX_PATH_POINTS)
            .map(|k| (n as f64).powf(k as f64 / (MAX_PATH_POINTS - 1) as f64).round() as u64)
            .collect();
        g.dedup();
        g
    };
    let mut rng = rng::stream(seed, Domain::Demo, 0);
    let mut out = Trajectory { cloud: Vec::new(), n: Vec::new(), raw: Vec::new(), averaged: Vec::new(), truth: [0.0; 2] };
    let mut drawn = 0usize;
    let mut cloud = Vec::with_capacity(CLOUD_POINTS);
    run_stream_with(
        &objective,
        &schedule,
        asgd_core::averaged_sgd::DEFAULT_CLIP_RADIUS,
        |s| {
            spec.sample_into(&mut rng, s);
            if drawn < CLOUD_POINTS {
                cloud.push(pair(&s.x));
            }
            drawn += 1;
        },
        spec.empty_sample(),
        n,
        &grid,
        |st| {
            out.n.push(st.n);
            out.raw.push(pair(&st.z));
            out.averaged.push(pair(&st.z_bar));
        },
    )
    .map_err(|e| e.to_string())?;
    out.cloud = cloud;
    let Objective::GeometricQuantile(q) = &objective else { unreachable!() };
    let data = freeze(&spec, TRUTH_SAMPLES, seed).map_err(|e| e.to_string())?;
    out.truth = pair(&weiszfeld(&data.samples, q.direction(), 1e-10, 10_000).map_err(|e| e.to_string())?.m_hat);
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Curve {
    estimator: &'static str,
    target_slope: f64,
    slope: f64,
    n: Vec<u64>,
    moment: Vec<f64>,
}

/// Small replicate experiment for the planar median of a standard Gaussian:
/// mean squared error of both estimators against `n` with fitted slopes.
pub fn rate_curves_json(alpha: f64, replicates: usize, n_max: u64, seed: u64) -> Result<String, String> {
    let binding = ObjectiveBinding::new(
        Objective::GeometricQuantile(GeometricQuantileObjective::median(2)),
        distribution("gaussian")?,
    )
    .map_err(|e| e.to_string())?;
    let schedule = StepSchedule::new(1.0, alpha, false).map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::new(binding, schedule, n_max, replicates, seed).map_err(|e| e.to_string())?;
    cfg.checkpoints = checkpoint_grid(10.min(n_max), n_max, 12).map_err(|e| e.to_string())?;
    cfg.moments = vec![1];
    let (report, _) = rate_experiment(&cfg).map_err(|e| e.to_string())?;
    let curves: Vec<Curve> = [Estimator::Raw, Estimator::Averaged]
        .iter()
        .filter_map(|&e| report.series(e, 1))
        .map(|s| Curve {
            estimator: s.estimator.name(),
            target_slope: s.target_slope,
            slope: s.fit.slope,
            n: s.points.iter().map(|p| p.n).collect(),
            moment: s.points.iter().map(|p| p.moment).collect(),
        })
        .collect();
    serde_json::to_string(&curves).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Contour {
    cloud: Vec<[f64; 2]>,
    /// One closed curve per requested `‖v‖`.
    curves: Vec<Vec<[f64; 2]>>,
}

/// Batch geometric quantiles for `v = r(cos θ, sin θ)` over `directions`
/// angles, for each `r` in `norms` (comma separated, each in `[0, 1)`).
pub fn quantile_contours_json(family: &str, norms: &str, directions: usize, seed: u64) -> Result<String, String> {
    let spec = distribution(family)?;
    let norms: Vec<f64> = norms
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| format!("bad norm {s:?}")))
        .collect::<Result<_, _>>()?;
    if directions < 3 {
        return Err("need at least 3 directions".into());
    }
    let data = freeze(&spec, TRUTH_SAMPLES, seed).map_err(|e| e.to_string())?;
    let mut curves = Vec::with_capacity(norms.len());
    for r in norms {
        let mut curve = Vec::with_capacity(directions);
        for k in 0..directions {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / directions as f64;
            let q = quantile(r * theta.cos(), r * theta.sin())?;
            let m = weiszfeld(&data.samples, q.direction(), 1e-9, 10_000).map_err(|e| e.to_string())?;
            curve.push(pair(&m.m_hat));
        }
        curves.push(curve);
    }
    let cloud = data.samples.iter().take(CLOUD_POINTS).map(|s| pair(&s.x)).collect();
    serde_json::to_string(&Contour { cloud, curves }).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn trajectory(family: &str, vx: f64, vy: f64, alpha: f64, n: u32, seed: u32) -> Result<String, JsError> {
    trajectory_json(family, vx, vy, alpha, n as u64, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn rate_curves(alpha: f64, replicates: u32, n_max: u32, seed: u32) -> Result<String, JsError> {
    rate_curves_json(alpha, replicates as usize, n_max as u64, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn quantile_contours(family: &str, norms: &str, directions: u32, seed: u32) -> Result<String, JsError> {
    quantile_contours_json(family, norms, directions as usize, seed as u64).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn trajectory_ends_near_the_batch_solution() {
        let v: Value = serde_json::from_str(&trajectory_json("gaussian", 0.3, -0.2, 0.66, 20_000, 1).unwrap()).unwrap();
        let last = v["averaged"].as_array().unwrap().last().unwrap().clone();
        let truth = &v["truth"];
        let gap = ((last[0].as_f64().unwrap() - truth[0].as_f64().unwrap()).powi(2)
            + (last[1].as_f64().unwrap() - truth[1].as_f64().unwrap()).powi(2))
        .sqrt();
        assert!(gap < 0.1, "{gap}");
        assert_eq!(v["n"].as_array().unwrap().last().unwrap().as_u64(), Some(20_000));
        assert_eq!(v["cloud"].as_array().unwrap().len(), CLOUD_POINTS);
    }

    #[test]
    fn rate_curves_have_both_estimators() {
        let v: Value = serde_json::from_str(&rate_curves_json(0.66, 20, 2000, 3).unwrap()).unwrap();
        let curves = v.as_array().unwrap();
        assert_eq!(curves.len(), 2);
        assert_eq!(curves[0]["estimator"], "raw");
        assert!(curves[1]["slope"].as_f64().unwrap() < 0.0);
    }

    #[test]
    fn contours_grow_with_norm() {
        let v: Value = serde_json::from_str(&quantile_contours_json("gaussian", "0.2, 0.6", 8, 5).unwrap()).unwrap();
        let curves = v["curves"].as_array().unwrap();
        let radius = |c: &Value| {
            let p = &c.as_array().unwrap()[0];
            p[0].as_f64().unwrap().hypot(p[1].as_f64().unwrap())
        };
        assert!(radius(&curves[1]) > radius(&curves[0]));
    }

    #[test]
    fn bad_inputs_are_reported() {
        assert!(trajectory_json("cauchy", 0.0, 0.0, 0.66, 100, 1).is_err());
        assert!(trajectory_json("gaussian", 0.9, 0.9, 0.66, 100, 1).is_err());
        assert!(trajectory_json("gaussian", 0.0, 0.0, 0.4, 100, 1).is_err());
        assert!(quantile_contours_json("gaussian", "0.2, x", 8, 1).is_err());
    }
}
