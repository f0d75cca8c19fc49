//! Dense vector and symmetric-operator kernel.
//!
//! Dimensions in this crate stay in the low hundreds, so everything is stored
//! densely in row-major `Vec<f64>`s.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A point of the (finite-dimensional or truncated) Hilbert space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting empty input and non-finite entries.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidParameter("vector must have dimension >= 1".into()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self(coords))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Self(vec![value; dim])
    }

    /// Unit vector along axis `i`.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[i] = 1.0;
        v
    }

    pub(crate) fn from_raw(coords: Vec<f64>) -> Self {
        Self(coords)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    pub fn norm(&self) -> f64 {
        norm_slice(&self.0)
    }

    pub fn scaled(&self, alpha: f64) -> Vector {
        Vector(self.0.iter().map(|c| alpha * c).collect())
    }

    /// `self - other`.
    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        axpy(-1.0, other, self)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Dense symmetric operator on R^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymOperator {
    dim: usize,
    data: Vec<f64>,
}

const SYMMETRY_RTOL: f64 = 1e-12;

impl SymOperator {
    /// Builds an operator from row-major entries; asymmetry above 1e-12
    /// (relative to the largest entry) is rejected, smaller asymmetry is averaged out.
    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("operator dimension must be >= 1".into()));
        }
        check_dim(dim * dim, data.len())?;
        if data.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("operator"));
        }
        let scale = data.iter().fold(0.0f64, |m, c| m.max(c.abs())).max(f64::MIN_POSITIVE);
        let mut op = Self { dim, data };
        for i in 0..dim {
            for j in (i + 1)..dim {
                let (a, b) = (op.data[i * dim + j], op.data[j * dim + i]);
                if (a - b).abs() > SYMMETRY_RTOL * scale {
                    return Err(Error::InvalidParameter(format!(
                        "operator not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
                let avg = 0.5 * (a + b);
                op.data[i * dim + j] = avg;
                op.data[j * dim + i] = avg;
            }
        }
        Ok(op)
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut op = Self::zeros(dim);
        for (i, d) in diag.iter().enumerate() {
            op.data[i * dim + i] = *d;
        }
        op
    }

    /// `I - u⊗u` for the given vector (a projector when `u` is a unit vector).
    pub fn identity_minus_outer(u: &Vector) -> Self {
        let mut op = Self::identity(u.dim());
        op.add_outer(-1.0, u.as_slice());
        op
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn row_major(&self) -> &[f64] {
        &self.data
    }

    /// `self += weight · u uᵀ`
    pub(crate) fn add_outer(&mut self, weight: f64, u: &[f64]) {
        let d = self.dim;
        for i in 0..d {
            let wi = weight * u[i];
            let row = &mut self.data[i * d..(i + 1) * d];
            for (r, uj) in row.iter_mut().zip(u) {
                *r += wi * uj;
            }
        }
    }

    /// `self += weight · I`
    pub(crate) fn add_identity(&mut self, weight: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += weight;
        }
    }

    pub(crate) fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub(crate) fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&self.data[i * d..(i + 1) * d], v);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm_slice(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn dist_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn inner(a: &Vector, b: &Vector) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(dot(&a.0, &b.0))
}

pub fn norm(a: &Vector) -> f64 {
    a.norm()
}

/// `y + alpha·x`
pub fn axpy(alpha: f64, x: &Vector, y: &Vector) -> Result<Vector> {
    check_dim(y.dim(), x.dim())?;
    Ok(Vector(y.0.iter().zip(&x.0).map(|(yi, xi)| yi + alpha * xi).collect()))
}

/// Matrix-vector product. Named for the Hessians in this crate, which are
/// averages of `I - u⊗u` terms.
pub fn apply_rank_one_sum(op: &SymOperator, v: &Vector) -> Result<Vector> {
    check_dim(op.dim(), v.dim())?;
    let mut out = vec![0.0; v.dim()];
    op.apply_into(v.as_slice(), &mut out);
    Ok(Vector(out))
}

/// Sum by recursive halving; error grows like log(n) instead of n.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BASE: usize = 16;
    if values.len() <= BASE {
        return values.iter().sum();
    }
    let (left, right) = values.split_at(values.len() / 2);
    pairwise_sum(left) + pairwise_sum(right)
}

/// Coordinate-wise pairwise sum of equally sized rows.
pub(crate) fn pairwise_sum_rows(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    match rows.len() {
        0 => vec![0.0; dim],
        1 => rows[0].clone(),
        n => {
            let (left, right) = rows.split_at(n / 2);
            let mut acc = pairwise_sum_rows(left, dim);
            for (a, b) in acc.iter_mut().zip(pairwise_sum_rows(right, dim)) {
                *a += b;
            }
            acc
        }
    }
}

/// Largest and smallest eigenvalue estimates of a symmetric operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremeEigenvalues {
    pub lambda_max: f64,
    pub lambda_min: f64,
}

/// Estimates both ends of the spectrum by power iteration.
///
/// The top of the spectrum comes from iterating `op + ρI`, where `ρ` is a
/// Gershgorin bound on the spectral radius so the shifted operator is PSD; the
/// bottom comes from iterating `λ_max·I - op` and shifting back. Each power
/// iteration starts from the normalized all-ones vector and is repeated from a
/// fixed scrambled start, keeping the larger Rayleigh quotient, so a start
/// orthogonal to the dominant eigenspace cannot hide it.
///
/// Convergence is declared when the eigen-residual `‖Av - λv‖` drops below
/// `tol`. When the residual stalls (nearly tied eigenvalues) the iteration
/// matrix is squared, doubling the exponent of the power applied per step.
pub fn extreme_eigenvalues(op: &SymOperator, tol: f64, max_iter: usize) -> Result<ExtremeEigenvalues> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("tol must be positive".into()));
    }
    let d = op.dim();
    let radius = (0..d)
        .map(|i| (0..d).map(|j| op.get(i, j).abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    if radius == 0.0 {
        return Ok(ExtremeEigenvalues { lambda_max: 0.0, lambda_min: 0.0 });
    }

    let mut upper = op.clone();
    upper.add_identity(radius);
    let top = dominant_eigenvalue(&upper, tol, max_iter)? - radius;

    let mut lower = op.clone();
    lower.scale(-1.0);
    lower.add_identity(top);
    let spread = dominant_eigenvalue(&lower, tol, max_iter)?;

    Ok(ExtremeEigenvalues { lambda_max: top, lambda_min: top - spread })
}

/// Largest eigenvalue of a PSD operator.
fn dominant_eigenvalue(op: &SymOperator, tol: f64, max_iter: usize) -> Result<f64> {
    let dim = op.dim();
    let ones = vec![1.0; dim];
    let scrambled: Vec<f64> = (0..dim)
        .map(|i| ((i as f64 + 1.0) * 0.618_033_988_749_895).fract() - 0.5 + 1e-3)
        .collect();

    let first = power_iteration(op, &ones, tol, max_iter);
    let second = power_iteration(op, &scrambled, tol, max_iter);
    match (first, second) {
        (Ok(a), Ok(b)) => Ok(a.max(b)),
        (Ok(a), Err(_)) | (Err(_), Ok(a)) => Ok(a),
        (Err(e), Err(_)) => Err(e),
    }
}

const STALL_WINDOW: usize = 16;
const MAX_SQUARINGS: usize = 64;

fn power_iteration(op: &SymOperator, start: &[f64], tol: f64, max_iter: usize) -> Result<f64> {
    let d = op.dim();
    let mut v = start.to_vec();
    let n0 = norm_slice(&v);
    v.iter_mut().for_each(|c| *c /= n0);

    let mut power = op.clone();
    let mut squarings = 0;
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    let mut av = vec![0.0; d];
    let mut residual = f64::INFINITY;

    for _ in 0..max_iter {
        op.apply_into(&v, &mut av);
        let lambda = dot(&v, &av) / dot(&v, &v);
        residual = av.iter().zip(&v).map(|(a, x)| (a - lambda * x).powi(2)).sum::<f64>().sqrt();
        if residual <= tol {
            return Ok(lambda);
        }
        if residual < 0.5 * best {
            best = residual;
            stalled = 0;
        } else {
            stalled += 1;
        }
        if stalled >= STALL_WINDOW && squarings < MAX_SQUARINGS {
            power = square_normalized(&power);
            squarings += 1;
            stalled = 0;
        }
        power.apply_into(&v, &mut av);
        let n = norm_slice(&av);
        if n == 0.0 {
            return Ok(lambda);
        }
        for (x, a) in v.iter_mut().zip(&av) {
            *x = a / n;
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, residual })
}

/// `A²` rescaled so its largest entry is 1.
fn square_normalized(a: &SymOperator) -> SymOperator {
    let d = a.dim();
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let x: f64 = (0..d).map(|k| a.get(i, k) * a.get(k, j)).sum();
            data[i * d + j] = x;
            data[j * d + i] = x;
        }
    }
    let scale = data.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale > 0.0 {
        data.iter_mut().for_each(|c| *c /= scale);
    }
    SymOperator { dim: d, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(c: &[f64]) -> Vector {
        Vector::new(c.to_vec()).unwrap()
    }

    #[test]
    fn inner_examples() {
        assert_eq!(inner(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(inner(&v(&[3.0, 4.0]), &v(&[3.0, 4.0])).unwrap(), 25.0);
        assert_eq!(inner(&v(&[1.0, 2.0, 3.0]), &v(&[1.0, 1.0, 1.0])).unwrap(), 6.0);
        assert!(matches!(
            inner(&v(&[1.0]), &v(&[1.0, 2.0])),
            Err(Error::DimensionMismatch { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn norm_examples() {
        assert_eq!(norm(&v(&[3.0, 4.0])), 5.0);
        assert_eq!(norm(&v(&[0.0, 0.0, 0.0])), 0.0);
        assert_eq!(norm(&v(&[1.0, 1.0, 1.0, 1.0])), 2.0);
    }

    #[test]
    fn axpy_examples() {
        assert_eq!(axpy(0.5, &v(&[2.0, 0.0]), &v(&[0.0, 0.0])).unwrap(), v(&[1.0, 0.0]));
        let (x, y) = (v(&[7.0, -1.0]), v(&[0.25, 3.0]));
        assert_eq!(axpy(0.0, &x, &y).unwrap(), y);
        assert_eq!(axpy(-1.0, &v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), v(&[0.0, 0.0]));
        assert!(axpy(1.0, &v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn apply_examples() {
        let x = v(&[0.3, -2.0, 5.0]);
        assert_eq!(apply_rank_one_sum(&SymOperator::identity(3), &x).unwrap(), x);
        let e1 = Vector::basis(2, 0);
        let p = SymOperator::identity_minus_outer(&e1);
        assert_eq!(apply_rank_one_sum(&p, &e1).unwrap(), v(&[0.0, 0.0]));
        let d = SymOperator::diagonal(&[1.0, 2.0]);
        assert_eq!(apply_rank_one_sum(&d, &v(&[1.0, 1.0])).unwrap(), v(&[1.0, 2.0]));
        assert!(apply_rank_one_sum(&d, &v(&[1.0])).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Vector::new(vec![]).is_err());
        assert!(Vector::new(vec![f64::NAN]).is_err());
        assert!(SymOperator::from_row_major(2, vec![1.0, 2.0, 2.5, 1.0]).is_err());
        assert!(SymOperator::from_row_major(2, vec![1.0, 2.0, 2.0]).is_err());
    }

    #[test]
    fn eigen_examples() {
        let e = extreme_eigenvalues(&SymOperator::identity(3), 1e-12, 1000).unwrap();
        assert_eq!((e.lambda_max, e.lambda_min), (1.0, 1.0));
        let e = extreme_eigenvalues(&SymOperator::diagonal(&[1.0, 2.0, 3.0]), 1e-12, 10_000).unwrap();
        assert!((e.lambda_max - 3.0).abs() <= 1e-10);
        assert!((e.lambda_min - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn eigen_start_orthogonal_to_extreme_vector() {
        // All-ones is an eigenvector of the swap matrix, so the bottom of the
        // spectrum is only reachable through the second start.
        let swap = SymOperator::from_row_major(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let e = extreme_eigenvalues(&swap, 1e-12, 10_000).unwrap();
        assert!((e.lambda_max - 1.0).abs() < 1e-10);
        assert!((e.lambda_min + 1.0).abs() < 1e-10);
    }

    #[test]
    fn eigen_indefinite_and_nonconvergent() {
        let op = SymOperator::diagonal(&[-5.0, 1.0, 2.0]);
        let e = extreme_eigenvalues(&op, 1e-12, 10_000).unwrap();
        assert!((e.lambda_max - 2.0).abs() < 1e-10);
        assert!((e.lambda_min + 5.0).abs() < 1e-10);
        let slow = SymOperator::diagonal(&[1.0, 0.999_999, 0.5]);
        assert!(matches!(extreme_eigenvalues(&slow, 1e-300, 3), Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn eigen_matches_dense_decomposition() {
        // Independent check against a full symmetric eigendecomposition.
        let d = 6;
        let mut entries = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let x = ((i * 7 + j * 13) as f64 * 0.37).sin();
                entries[i * d + j] = x;
                entries[j * d + i] = x;
            }
            entries[i * d + i] += 3.0 + i as f64;
        }
        let op = SymOperator::from_row_major(d, entries.clone()).unwrap();
        let e = extreme_eigenvalues(&op, 1e-12, 100_000).unwrap();
        let dense = nalgebra::DMatrix::from_row_slice(d, d, &entries).symmetric_eigen();
        let max = dense.eigenvalues.max();
        let min = dense.eigenvalues.min();
        assert!((e.lambda_max - max).abs() < 1e-9, "{} vs {max}", e.lambda_max);
        assert!((e.lambda_min - min).abs() < 1e-9, "{} vs {min}", e.lambda_min);
    }

    #[test]
    fn pairwise_sum_is_accurate() {
        let xs = vec![0.1; 1_000_000];
        assert!((pairwise_sum(&xs) - 100_000.0).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn inner_symmetric_and_cauchy_schwarz(
            pair in (1usize..12).prop_flat_map(|d| (
                prop::collection::vec(-1e3f64..1e3, d),
                prop::collection::vec(-1e3f64..1e3, d),
            ))
        ) {
            let (a, b) = (v(&pair.0), v(&pair.1));
            let ab = inner(&a, &b).unwrap();
            prop_assert_eq!(ab, inner(&b, &a).unwrap());
            let bound = norm(&a) * norm(&b);
            prop_assert!(ab.abs() <= bound * (1.0 + 1e-12) + 1e-300);
        }

        #[test]
        fn projector_annihilates_axis(raw in prop::collection::vec(-10f64..10.0, 1..10)) {
            let n = v(&raw).norm();
            prop_assume!(n > 1e-6);
            let u = v(&raw).scaled(1.0 / n);
            let out = apply_rank_one_sum(&SymOperator::identity_minus_outer(&u), &u).unwrap();
            prop_assert!(out.norm() <= 1e-12);
        }

        #[test]
        fn diagonal_spectrum_exact(diag in prop::collection::vec(-50f64..50.0, 1..8)) {
            let e = extreme_eigenvalues(&SymOperator::diagonal(&diag), 1e-12, 100_000).unwrap();
            let max = diag.iter().cloned().fold(f64::MIN, f64::max);
            let min = diag.iter().cloned().fold(f64::MAX, f64::min);
            prop_assert!((e.lambda_max - max).abs() <= 1e-10, "{} vs {}", e.lambda_max, max);
            prop_assert!((e.lambda_min - min).abs() <= 1e-10, "{} vs {}", e.lambda_min, min);
        }
    }
}
