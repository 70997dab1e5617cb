//! Fully symmetric Gaussian-weight cubature rules and local moment estimation.
//!
//! Rules are built in unit space (standard normal coordinates) and mapped onto
//! a concrete Gaussian through its symmetric square root. The precision-3 rule is the
//! unscented point set; precisions 5 and 7 place points on symmetric orbits
//! (center, axes, coordinate pairs, coordinate triples) and solve for the orbit
//! weights by matching the even Gaussian moments. Every rule is checked against
//! all monomials up to its precision before it is returned.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{symmetrize, Gaussian};

/// Exactness tolerance on every monomial of degree ≤ precision.
pub const EXACTNESS_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Precision {
    Three,
    Five,
    Seven,
}

impl Precision {
    pub fn degree(self) -> u32 {
        match self {
            Precision::Three => 3,
            Precision::Five => 5,
            Precision::Seven => 7,
        }
    }

    /// Number of points of the rule in `d` dimensions.
    pub fn point_count(self, d: usize) -> usize {
        match self {
            Precision::Three => 2 * d + 1,
            Precision::Five => 2 * d * d + 1,
            Precision::Seven => (4 * d * d * d + 8 * d + 3) / 3,
        }
    }
}

impl TryFrom<u32> for Precision {
    type Error = Error;

    fn try_from(p: u32) -> Result<Self> {
        match p {
            3 => Ok(Precision::Three),
            5 => Ok(Precision::Five),
            7 => Ok(Precision::Seven),
            other => Err(Error::UnsupportedPrecision(other)),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.degree())
    }
}

/// The usual `3 - d` heuristic, which matches the fourth moment in one dimension.
pub fn default_kappa(d: usize) -> f64 {
    3.0 - d as f64
}

#[derive(Clone, Debug)]
pub struct CubatureRule {
    dim: usize,
    precision: Precision,
    /// One column per point.
    points: DMatrix<f64>,
    weights: Vec<f64>,
}

impl CubatureRule {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Largest absolute error over all monomials of total degree ≤ precision.
    pub fn exactness_error(&self) -> f64 {
        max_monomial_error(&self.points, &self.weights, self.precision.degree())
    }

    /// Concrete points `μ + S·xⱼ` for Gaussian `g`, one column per point, with
    /// `S` the symmetric square root of the covariance. Unlike a Cholesky
    /// factor it does not depend on the order of the labels, and neither do
    /// the resulting moments, since the rules are fully symmetric.
    pub fn transform(&self, g: &Gaussian) -> Result<DMatrix<f64>> {
        if g.dim() != self.dim {
            return Err(Error::Dimension(format!(
                "rule of dimension {} applied to a {}-dimensional Gaussian",
                self.dim,
                g.dim()
            )));
        }
        if self.dim == 0 {
            return Ok(DMatrix::zeros(0, self.len()));
        }
        let mut pts = psd_sqrt(g.cov(), g.labels())? * &self.points;
        for mut col in pts.column_iter_mut() {
            col += g.mean();
        }
        Ok(pts)
    }
}

/// Symmetric square root of a PSD matrix; directions with (numerically)
/// zero variance get no spread at all.
fn psd_sqrt(m: &DMatrix<f64>, labels: &[String]) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.amax();
    if eig.eigenvalues.iter().any(|&v| v < -1e-10 * scale) || !scale.is_finite() {
        return Err(Error::Singular(labels.join(", ")));
    }
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose())
}

/// Builds a fully symmetric rule of the requested precision in `d` dimensions.
///
/// `kappa` only affects precision 3 (center weight `kappa / (d + kappa)`).
pub fn build_rule(precision: u32, d: usize, kappa: f64) -> Result<CubatureRule> {
    let precision = Precision::try_from(precision)?;
    build(precision, d, kappa)
}

pub fn build(precision: Precision, d: usize, kappa: f64) -> Result<CubatureRule> {
    let (points, weights) = match precision {
        Precision::Three => unscented(d, kappa)?,
        Precision::Five => {
            let r = 3f64.sqrt();
            moment_matched(d, &[Orbit::Axis(r), Orbit::Pair(r)], 5)?
        }
        Precision::Seven => {
            // radii of the 5-point Gauss-Hermite rule; they satisfy the
            // one-dimensional consistency condition r1²r2² - 3(r1² + r2²) + 15 = 0
            let r1 = (5.0 - 10f64.sqrt()).sqrt();
            let r2 = (5.0 + 10f64.sqrt()).sqrt();
            moment_matched(
                d,
                &[
                    Orbit::Axis(r1),
                    Orbit::Axis(r2),
                    Orbit::Pair(r1),
                    Orbit::Pair(r2),
                    Orbit::Triple(r1),
                ],
                7,
            )?
        }
    };
    let rule = CubatureRule {
        dim: d,
        precision,
        points,
        weights,
    };
    debug_assert_eq!(rule.len(), precision.point_count(d));
    let err = rule.exactness_error();
    if !(err <= EXACTNESS_TOL) {
        return Err(Error::RuleConstruction(format!(
            "precision {precision} rule in {d} dimensions misses a monomial by {err:e}"
        )));
    }
    Ok(rule)
}

fn unscented(d: usize, kappa: f64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let dk = d as f64 + kappa;
    if !(dk > 0.0) {
        return Err(Error::InvalidKappa(dk));
    }
    let n = 2 * d + 1;
    let mut points = DMatrix::zeros(d, n);
    let mut weights = vec![1.0 / (2.0 * dk); n];
    weights[0] = kappa / dk;
    let r = dk.sqrt();
    for i in 0..d {
        points[(i, 1 + 2 * i)] = r;
        points[(i, 2 + 2 * i)] = -r;
    }
    Ok((points, weights))
}

#[derive(Clone, Copy, Debug)]
enum Orbit {
    Center,
    Axis(f64),
    Pair(f64),
    Triple(f64),
}

impl Orbit {
    fn arity(self) -> usize {
        match self {
            Orbit::Center => 0,
            Orbit::Axis(_) => 1,
            Orbit::Pair(_) => 2,
            Orbit::Triple(_) => 3,
        }
    }

    fn radius(self) -> f64 {
        match self {
            Orbit::Center => 0.0,
            Orbit::Axis(r) | Orbit::Pair(r) | Orbit::Triple(r) => r,
        }
    }

    /// All points of the orbit: every choice of `arity` coordinates, every sign.
    fn points(self, d: usize) -> Vec<Vec<f64>> {
        let k = self.arity();
        let r = self.radius();
        let mut out = Vec::new();
        for coords in combinations(d, k) {
            for signs in 0..(1usize << k) {
                let mut p = vec![0.0; d];
                for (bit, &c) in coords.iter().enumerate() {
                    p[c] = if signs & (1 << bit) == 0 { r } else { -r };
                }
                out.push(p);
            }
        }
        out
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Solves for per-orbit weights matching the even moment patterns up to
/// `degree`, dropping orbits that do not fit in `d` dimensions.
fn moment_matched(d: usize, orbits: &[Orbit], degree: u32) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut used = vec![Orbit::Center];
    used.extend(orbits.iter().copied().filter(|o| o.arity() <= d));
    let orbit_points: Vec<Vec<Vec<f64>>> = used.iter().map(|o| o.points(d)).collect();

    // representative even exponent patterns, sorted descending, on the leading coordinates
    let patterns: Vec<Vec<u32>> = even_patterns(degree, d);
    let a = DMatrix::from_fn(patterns.len(), used.len(), |i, j| {
        orbit_points[j].iter().map(|p| monomial(p, &patterns[i])).sum::<f64>()
    });
    let b = DVector::from_iterator(
        patterns.len(),
        patterns
            .iter()
            .map(|pat| pat.iter().map(|&e| normal_moment(e)).product::<f64>()),
    );
    let svd = a.clone().svd(true, true);
    let w = svd
        .solve(&b, 1e-13)
        .map_err(|e| Error::RuleConstruction(e.to_string()))?;
    let resid = (&a * &w - &b).amax();
    if resid > EXACTNESS_TOL {
        return Err(Error::RuleConstruction(format!(
            "moment system for precision {degree}, d = {d} is inconsistent (residual {resid:e})"
        )));
    }

    let n: usize = orbit_points.iter().map(Vec::len).sum();
    let mut points = DMatrix::zeros(d, n);
    let mut weights = Vec::with_capacity(n);
    let mut col = 0;
    for (j, pts) in orbit_points.iter().enumerate() {
        for p in pts {
            for (i, v) in p.iter().enumerate() {
                points[(i, col)] = *v;
            }
            weights.push(w[j]);
            col += 1;
        }
    }
    Ok((points, weights))
}

fn even_patterns(degree: u32, d: usize) -> Vec<Vec<u32>> {
    fn rec(remaining: u32, max_part: u32, slots: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        out.push(cur.clone());
        if slots == 0 {
            return;
        }
        let mut e = 2;
        while e <= remaining.min(max_part) {
            cur.push(e);
            rec(remaining - e, e, slots - 1, cur, out);
            cur.pop();
            e += 2;
        }
    }
    let mut out = Vec::new();
    rec(degree - degree % 2, degree, d, &mut Vec::new(), &mut out);
    out
}

fn monomial(p: &[f64], exps: &[u32]) -> f64 {
    exps.iter().enumerate().map(|(i, &e)| p[i].powi(e as i32)).product()
}

/// `E[Z^k]` for a standard normal `Z`.
pub fn normal_moment(k: u32) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    (1..k).step_by(2).map(|v| v as f64).product()
}

/// Visits every exponent vector of length `d` with total degree ≤ `max_degree`.
pub fn for_each_monomial(d: usize, max_degree: u32, mut f: impl FnMut(&[u32])) {
    fn rec(i: usize, left: u32, exps: &mut Vec<u32>, f: &mut dyn FnMut(&[u32])) {
        if i == exps.len() {
            f(exps);
            return;
        }
        for e in 0..=left {
            exps[i] = e;
            rec(i + 1, left - e, exps, f);
        }
        exps[i] = 0;
    }
    let mut exps = vec![0; d];
    rec(0, max_degree, &mut exps, &mut f);
}

fn max_monomial_error(points: &DMatrix<f64>, weights: &[f64], degree: u32) -> f64 {
    let d = points.nrows();
    let mut worst = 0.0f64;
    for_each_monomial(d, degree, |exps| {
        let approx: f64 = points
            .column_iter()
            .zip(weights)
            .map(|(p, w)| {
                w * exps
                    .iter()
                    .enumerate()
                    .map(|(i, &e)| p[i].powi(e as i32))
                    .product::<f64>()
            })
            .sum();
        let exact: f64 = exps.iter().map(|&e| normal_moment(e)).product();
        worst = worst.max((approx - exact).abs());
    });
    worst
}

/// First two moments of `X = f(Y)` and its cross-covariance with `Y`.
#[derive(Clone, Debug)]
pub struct LocalMoments {
    pub parents: Vec<String>,
    pub children: Vec<String>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `Cov(X, Y)`: one row per child, one column per parent.
    pub cross: DMatrix<f64>,
    /// Number of times `f` was called.
    pub evaluations: usize,
}

impl LocalMoments {
    /// Joint Gaussian over (parents, children) using `parents`' own moments for
    /// the parent block.
    pub fn joint(&self, parents: &Gaussian) -> Result<Gaussian> {
        let p = parents.dim();
        let k = self.children.len();
        let mut mean = DVector::zeros(p + k);
        mean.rows_mut(0, p).copy_from(parents.mean());
        mean.rows_mut(p, k).copy_from(&self.mean);
        let mut cov = DMatrix::zeros(p + k, p + k);
        cov.view_mut((0, 0), (p, p)).copy_from(parents.cov());
        cov.view_mut((p, 0), (k, p)).copy_from(&self.cross);
        cov.view_mut((0, p), (p, k)).copy_from(&self.cross.transpose());
        cov.view_mut((p, p), (k, k)).copy_from(&self.cov);
        let mut labels = parents.labels().to_vec();
        labels.extend(self.children.iter().cloned());
        Gaussian::new(labels, mean, symmetrize(cov))
    }
}

/// Estimates `E[X]`, `Cov(X)` and `Cov(X, Y)` for `X = f(Y) + V` with
/// `Y ~ parents`, `V ~ N(0, noise_cov)`, using `rule`.
///
/// `f` writes the child vector for the parent vector it is given.
pub fn estimate_local_moments<F>(
    parents: &Gaussian,
    children: &[String],
    mut f: F,
    noise_cov: Option<&DMatrix<f64>>,
    rule: &CubatureRule,
) -> Result<LocalMoments>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let k = children.len();
    let p = parents.dim();
    let pts = rule.transform(parents)?;
    let mut outputs = DMatrix::zeros(k, rule.len());
    let mut buf = vec![0.0; k];
    let mut arg = vec![0.0; p];
    for (j, col) in pts.column_iter().enumerate() {
        arg.iter_mut().zip(col.iter()).for_each(|(a, v)| *a = *v);
        f(&arg, &mut buf)?;
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                point: j,
                values: arg.clone(),
            });
        }
        outputs.column_mut(j).copy_from_slice(&buf);
    }

    let w = rule.weights();
    let mut mean = DVector::zeros(k);
    for (j, col) in outputs.column_iter().enumerate() {
        mean.axpy(w[j], &col, 1.0);
    }
    let mut cov = DMatrix::zeros(k, k);
    let mut cross = DMatrix::zeros(k, p);
    for (j, (out, pt)) in outputs.column_iter().zip(pts.column_iter()).enumerate() {
        let dx = out - &mean;
        let dy = pt - parents.mean();
        cov.ger(w[j], &dx, &dx, 1.0);
        cross.ger(w[j], &dx, &dy, 1.0);
    }
    if let Some(q) = noise_cov {
        if q.nrows() != k || q.ncols() != k {
            return Err(Error::Dimension(format!(
                "noise covariance {}x{} for {k} children",
                q.nrows(),
                q.ncols()
            )));
        }
        cov += q;
    }
    Ok(LocalMoments {
        parents: parents.labels().to_vec(),
        children: children.to_vec(),
        mean,
        cov: symmetrize(cov),
        cross,
        evaluations: rule.len(),
    })
}

/// One row of the exactness table printed by `quadtest`.
#[derive(Clone, Debug, Serialize)]
pub struct ExactnessRow {
    pub precision: u32,
    pub dim: usize,
    pub points: usize,
    pub expected_points: usize,
    pub max_error: f64,
    pub pass: bool,
}

/// Builds every rule exercised by the exactness suite and reports its error.
pub fn exactness_table() -> Vec<ExactnessRow> {
    let mut rows = Vec::new();
    for (p, dmax) in [(Precision::Three, 5), (Precision::Five, 5), (Precision::Seven, 4)] {
        for d in 1..=dmax {
            let expected_points = p.point_count(d);
            let row = match build(p, d, default_kappa(d)) {
                Ok(rule) => {
                    let err = rule.exactness_error();
                    ExactnessRow {
                        precision: p.degree(),
                        dim: d,
                        points: rule.len(),
                        expected_points,
                        max_error: err,
                        pass: err <= EXACTNESS_TOL && rule.len() == expected_points,
                    }
                }
                Err(_) => ExactnessRow {
                    precision: p.degree(),
                    dim: d,
                    points: 0,
                    expected_points,
                    max_error: f64::INFINITY,
                    pass: false,
                },
            };
            rows.push(row);
        }
    }
    rows
}
