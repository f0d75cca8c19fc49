//! Seeded synthetic data sources.
//!
//! Functional data (`KlBrownian`) lives in coefficient space: a draw is the
//! vector of Karhunen–Loève coefficients of standard Brownian motion on
//! [0, 1], truncated to `terms` components. The basis is orthonormal, so norms
//! and inner products of coefficient vectors equal those of the truncated
//! paths in L².

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, Vector};
use crate::rng::{self, Domain, StreamRng};

/// Binary response in {-1, +1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Neg,
    Pos,
}

impl Label {
    pub fn value(self) -> f64 {
        match self {
            Label::Neg => -1.0,
            Label::Pos => 1.0,
        }
    }

    pub fn from_value(y: f64) -> Result<Self> {
        if y == 1.0 {
            Ok(Label::Pos)
        } else if y == -1.0 {
            Ok(Label::Neg)
        } else {
            Err(invalid(format!("label must be -1 or +1, got {y}")))
        }
    }

    fn flipped(self) -> Self {
        match self {
            Label::Neg => Label::Pos,
            Label::Pos => Label::Neg,
        }
    }
}

/// One observation: a point, optionally with a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vector,
    pub y: Option<Label>,
}

impl Sample {
    pub fn point(x: Vector) -> Self {
        Self { x, y: None }
    }

    pub fn labeled(x: Vector, y: Label) -> Self {
        Self { x, y: Some(y) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DistributionSpec {
    /// `center + scale·N(0, I)`
    Gaussian { center: Vector, scale: f64 },
    /// Multivariate Student t: `center + scale·Z/sqrt(W/dof)`, `W ~ χ²(dof)`.
    StudentT { center: Vector, scale: f64, dof: f64 },
    /// Gaussian mixture with a shared isotropic scale.
    Mixture { centers: Vec<Vector>, weights: Vec<f64>, scale: f64 },
    /// Uniform on the sphere of the given radius around `center`.
    SphereUniform { center: Vector, radius: f64 },
    /// Truncated KL coefficients of Brownian motion.
    KlBrownian { terms: usize },
    /// Gaussian (or Student t when `dof` is set) covariates, label
    /// `sign(<x, teacher>)` flipped with probability `label_noise`.
    TeacherLogistic { teacher: Vector, scale: f64, label_noise: f64, dof: Option<f64> },
    /// Same generative model as `TeacherLogistic`; paired with the
    /// cosh-logistic objective by default.
    TeacherCosh { teacher: Vector, scale: f64, label_noise: f64, dof: Option<f64> },
}

/// Frozen datasets are capped at this many stored coordinates.
pub const MAX_FROZEN_COORDS: usize = 100_000_000;

impl DistributionSpec {
    pub fn family(&self) -> &'static str {
        match self {
            DistributionSpec::Gaussian { .. } => "gaussian",
            DistributionSpec::StudentT { .. } => "student_t",
            DistributionSpec::Mixture { .. } => "mixture",
            DistributionSpec::SphereUniform { .. } => "sphere_uniform",
            DistributionSpec::KlBrownian { .. } => "kl_brownian",
            DistributionSpec::TeacherLogistic { .. } => "teacher_logistic",
            DistributionSpec::TeacherCosh { .. } => "teacher_cosh",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::Gaussian { center, .. }
            | DistributionSpec::StudentT { center, .. }
            | DistributionSpec::SphereUniform { center, .. } => center.dim(),
            DistributionSpec::Mixture { centers, .. } => centers.first().map_or(0, Vector::dim),
            DistributionSpec::KlBrownian { terms } => *terms,
            DistributionSpec::TeacherLogistic { teacher, .. } | DistributionSpec::TeacherCosh { teacher, .. } => {
                teacher.dim()
            }
        }
    }

    pub fn is_labeled(&self) -> bool {
        matches!(self, DistributionSpec::TeacherLogistic { .. } | DistributionSpec::TeacherCosh { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be positive and finite, got {v}")))
            }
        };
        let dof_ok = |dof: f64| {
            if dof > 2.0 && dof.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("student_t needs dof > 2 for finite second moments, got {dof}")))
            }
        };
        match self {
            DistributionSpec::Gaussian { scale, .. } => positive("scale", *scale),
            DistributionSpec::StudentT { scale, dof, .. } => {
                positive("scale", *scale)?;
                dof_ok(*dof)
            }
            DistributionSpec::Mixture { centers, weights, scale } => {
                positive("scale", *scale)?;
                if centers.is_empty() || centers.len() != weights.len() {
                    return Err(invalid("mixture needs one weight per center and at least one center"));
                }
                let d = centers[0].dim();
                if centers.iter().any(|c| c.dim() != d) {
                    return Err(invalid("mixture centers must share a dimension"));
                }
                if weights.iter().any(|w| !(*w >= 0.0)) {
                    return Err(invalid("mixture weights must be non-negative"));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(invalid(format!("mixture weights must sum to 1, got {total}")));
                }
                Ok(())
            }
            DistributionSpec::SphereUniform { radius, .. } => positive("radius", *radius),
            DistributionSpec::KlBrownian { terms } => {
                if *terms == 0 {
                    Err(invalid("kl_brownian needs at least one term"))
                } else {
                    Ok(())
                }
            }
            DistributionSpec::TeacherLogistic { scale, label_noise, dof, .. }
            | DistributionSpec::TeacherCosh { scale, label_noise, dof, .. } => {
                positive("scale", *scale)?;
                if !(0.0..0.5).contains(label_noise) {
                    return Err(invalid(format!("label noise must lie in [0, 0.5), got {label_noise}")));
                }
                dof.map_or(Ok(()), dof_ok)
            }
        }
    }

    /// Center of symmetry, when the law of `X` is invariant under `x -> 2c - x`.
    pub fn symmetry_center(&self) -> Option<Vector> {
        match self {
            DistributionSpec::Gaussian { center, .. }
            | DistributionSpec::StudentT { center, .. }
            | DistributionSpec::SphereUniform { center, .. } => Some(center.clone()),
            DistributionSpec::KlBrownian { terms } => Some(Vector::zeros(*terms)),
            DistributionSpec::Mixture { centers, .. } if centers.len() == 1 => Some(centers[0].clone()),
            _ => None,
        }
    }

    /// `E[X]` for unlabeled families.
    pub fn mean(&self) -> Option<Vector> {
        match self {
            DistributionSpec::Mixture { centers, weights, .. } => {
                let d = centers[0].dim();
                let mut m = vec![0.0; d];
                for (c, w) in centers.iter().zip(weights) {
                    for (mi, ci) in m.iter_mut().zip(c.as_slice()) {
                        *mi += w * ci;
                    }
                }
                Some(Vector::from_raw(m))
            }
            DistributionSpec::TeacherLogistic { .. } | DistributionSpec::TeacherCosh { .. } => None,
            other => other.symmetry_center(),
        }
    }

    /// Allocation-free draw into a reusable sample.
    pub fn sample_into(&self, rng: &mut StreamRng, out: &mut Sample) {
        let x = out.x.as_mut_slice();
        out.y = None;
        match self {
            DistributionSpec::Gaussian { center, scale } => {
                for (xi, ci) in x.iter_mut().zip(center.as_slice()) {
                    *xi = ci + scale * normal(rng);
                }
            }
            DistributionSpec::StudentT { center, scale, dof } => {
                let s = scale / chi_scale(rng, *dof);
                for (xi, ci) in x.iter_mut().zip(center.as_slice()) {
                    *xi = ci + s * normal(rng);
                }
            }
            DistributionSpec::Mixture { centers, weights, scale } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = centers.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                for (xi, ci) in x.iter_mut().zip(centers[k].as_slice()) {
                    *xi = ci + scale * normal(rng);
                }
            }
            DistributionSpec::SphereUniform { center, radius } => loop {
                for xi in x.iter_mut() {
                    *xi = normal(rng);
                }
                let n = dot(x, x).sqrt();
                if n > 1e-300 {
                    for (xi, ci) in x.iter_mut().zip(center.as_slice()) {
                        *xi = ci + radius * *xi / n;
                    }
                    break;
                }
            },
            DistributionSpec::KlBrownian { .. } => {
                for (k, xi) in x.iter_mut().enumerate() {
                    *xi = normal(rng) * kl_brownian_std(k + 1);
                }
            }
            DistributionSpec::TeacherLogistic { teacher, scale, label_noise, dof }
            | DistributionSpec::TeacherCosh { teacher, scale, label_noise, dof } => {
                let s = match dof {
                    Some(dof) => scale / chi_scale(rng, *dof),
                    None => *scale,
                };
                for xi in x.iter_mut() {
                    *xi = s * normal(rng);
                }
                let mut y = if dot(x, teacher.as_slice()) >= 0.0 { Label::Pos } else { Label::Neg };
                if *label_noise > 0.0 && rng.random::<f64>() < *label_noise {
                    y = y.flipped();
                }
                out.y = Some(y);
            }
        }
    }

    /// A fresh buffer of the right shape for `sample_into`.
    pub fn empty_sample(&self) -> Sample {
        Sample { x: Vector::zeros(self.dim()), y: None }
    }

    pub fn sample(&self, rng: &mut StreamRng) -> Sample {
        let mut s = self.empty_sample();
        self.sample_into(rng, &mut s);
        s
    }
}

#[inline]
fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

/// `sqrt(W / dof)` for `W ~ χ²(dof)`.
fn chi_scale(rng: &mut StreamRng, dof: f64) -> f64 {
    let chi = ChiSquared::new(dof).expect("dof validated positive");
    (chi.sample(rng) / dof).sqrt()
}

/// Standard deviation of the k-th (1-based) KL coefficient of Brownian motion on [0, 1].
pub fn kl_brownian_std(k: usize) -> f64 {
    1.0 / ((k as f64 - 0.5) * std::f64::consts::PI)
}

/// Materialized i.i.d. draws, kept for oracles and reproducibility.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DistributionSpec,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }
}

/// Draws `n` samples from `rng` in order.
pub fn freeze_stream(spec: &DistributionSpec, n: usize, rng: &mut StreamRng) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(invalid("a frozen dataset needs n >= 1"));
    }
    if n > MAX_FROZEN_COORDS / spec.dim().max(1) {
        return Err(invalid(format!(
            "refusing to materialize {n} samples of dimension {} (limit {MAX_FROZEN_COORDS} coordinates)",
            spec.dim()
        )));
    }
    Ok((0..n).map(|_| spec.sample(rng)).collect())
}

/// `n` draws from the frozen-dataset stream of `seed`.
pub fn freeze(spec: &DistributionSpec, n: usize, seed: u64) -> Result<Dataset> {
    freeze_in(spec, n, seed, Domain::FrozenDataset)
}

pub(crate) fn freeze_in(spec: &DistributionSpec, n: usize, seed: u64, domain: Domain) -> Result<Dataset> {
    let mut rng = rng::stream(seed, domain, 0);
    let samples = freeze_stream(spec, n, &mut rng)?;
    Ok(Dataset { spec: spec.clone(), seed, samples })
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `# family=...; seed=...; params=<json>` followed by one row per
/// sample (coordinates, then the label if present).
pub fn write_csv<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    let params = serde_json::to_string(&dataset.spec)?;
    writeln!(w, "# family={}; seed={}; params={}", dataset.spec.family(), dataset.seed, params)?;
    let mut line = String::new();
    for s in &dataset.samples {
        line.clear();
        for (i, c) in s.x.as_slice().iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&fmt_f64(*c));
        }
        if let Some(y) = s.y {
            line.push_str(if y == Label::Pos { ",1" } else { ",-1" });
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| invalid("empty dataset file"))??;
    let bad_header = || invalid(format!("malformed dataset header: {header}"));
    let rest = header.strip_prefix("# family=").ok_or_else(bad_header)?;
    let mut parts = rest.splitn(3, "; ");
    let _family = parts.next().ok_or_else(bad_header)?;
    let seed = parts
        .next()
        .and_then(|s| s.strip_prefix("seed="))
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(bad_header)?;
    let params = parts.next().and_then(|s| s.strip_prefix("params=")).ok_or_else(bad_header)?;
    let spec: DistributionSpec = serde_json::from_str(params)?;
    let d = spec.dim();
    let labeled = spec.is_labeled();

    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| invalid(format!("row {}: {e}", i + 1)))?;
        let expected = d + usize::from(labeled);
        if fields.len() != expected {
            return Err(Error::DimensionMismatch { expected, found: fields.len() });
        }
        let x = Vector::new(fields[..d].to_vec())?;
        let y = if labeled { Some(Label::from_value(fields[d])?) } else { None };
        samples.push(Sample { x, y });
    }
    Ok(Dataset { spec, seed, samples })
}
