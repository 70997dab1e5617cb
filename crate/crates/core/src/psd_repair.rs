//! Nearest feasible covariance extension.
//!
//! Given a positive definite parent block `Σ_yy` and an estimated extension
//! `(ū, v̄)` for one more variable, finds the `(u, v)` closest in squared
//! Euclidean distance such that `uᵀ Σ_yy⁻¹ u − v + ε ≤ 0`, i.e. the extended
//! matrix stays positive definite with Schur complement at least `ε`.
//!
//! Stationarity gives `u(λ) = (I + λΣ⁻¹)⁻¹ ū` and `v(λ) = v̄ + λ/2`; the
//! multiplier is the root of a strictly decreasing scalar function, found by
//! bisection on a doubling bracket.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::gaussian::cholesky_with_jitter;

/// Bisection stops when the bracket is narrower than this (absolute, on λ).
pub const LAMBDA_TOL: f64 = 1e-12;
const MAX_DOUBLINGS: usize = 200;
/// Eigenvalues of Σ_yy below this fraction of the largest are treated as zero.
const NULL_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct RepairProblem {
    pub sigma_yy: DMatrix<f64>,
    pub u_bar: DVector<f64>,
    pub v_bar: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Repaired {
    pub u: DVector<f64>,
    pub v: f64,
    pub lambda: f64,
}

impl Repaired {
    pub fn changed(&self) -> bool {
        self.lambda > 0.0
    }
}

/// `1e-8 · max(v̄, trace(Σ_yy)/dim)`, floored at `1e-12`.
pub fn default_epsilon(sigma_yy: &DMatrix<f64>, v_bar: f64) -> f64 {
    let n = sigma_yy.nrows().max(1) as f64;
    (1e-8 * v_bar.max(sigma_yy.trace() / n)).max(1e-12)
}

impl RepairProblem {
    pub fn new(sigma_yy: DMatrix<f64>, u_bar: DVector<f64>, v_bar: f64) -> Self {
        let epsilon = default_epsilon(&sigma_yy, v_bar);
        Self {
            sigma_yy,
            u_bar,
            v_bar,
            epsilon,
        }
    }

    /// Constraint value `uᵀΣ⁻¹u − v + ε` at a candidate.
    pub fn constraint(&self, u: &DVector<f64>, v: f64) -> Result<f64> {
        let chol = cholesky_with_jitter(&self.sigma_yy).map_err(|_| Error::Singular("repair parent block".into()))?;
        Ok(u.dot(&chol.solve(u)) - v + self.epsilon)
    }

    /// Largest absolute entry of the Lagrangian gradient at `r`.
    pub fn kkt_residual(&self, r: &Repaired) -> Result<f64> {
        let chol = cholesky_with_jitter(&self.sigma_yy).map_err(|_| Error::Singular("repair parent block".into()))?;
        let grad_u = 2.0 * (&r.u - &self.u_bar) + 2.0 * r.lambda * chol.solve(&r.u);
        let grad_v = 2.0 * (r.v - self.v_bar) - r.lambda;
        Ok(grad_u.amax().max(grad_v.abs()))
    }

    pub fn objective(&self, u: &DVector<f64>, v: f64) -> f64 {
        (u - &self.u_bar).norm_squared() + (v - self.v_bar).powi(2)
    }
}

/// `v − uᵀ Σ⁺ u` with `Σ⁺` the pseudo-inverse (same null-space threshold as
/// [`repair`]).
pub fn schur_complement(sigma_yy: &DMatrix<f64>, u: &DVector<f64>, v: f64) -> Result<f64> {
    if u.is_empty() {
        return Ok(v);
    }
    if let Some(chol) = nalgebra::Cholesky::new(sigma_yy.clone()) {
        return Ok(v - u.dot(&chol.solve(u)));
    }
    let eig = SymmetricEigen::new(sigma_yy.clone());
    let scale = eig.eigenvalues.amax();
    if !scale.is_finite() {
        return Err(Error::Singular("Schur complement of a non-finite block".into()));
    }
    let ut = eig.eigenvectors.transpose() * u;
    let quad: f64 = ut
        .iter()
        .zip(eig.eigenvalues.iter())
        .filter(|(_, s)| **s > NULL_TOL * scale)
        .map(|(x, s)| x * x / s)
        .sum();
    Ok(v - quad)
}

/// Projects `(ū, v̄)` onto the feasible set; returns it unchanged (λ = 0) when
/// already feasible.
///
/// `Σ_yy` may be singular: on its null space `u` is forced to zero and the
/// inverse in the constraint becomes a pseudo-inverse.
pub fn repair(p: &RepairProblem) -> Result<Repaired> {
    if p.sigma_yy.nrows() != p.u_bar.len() {
        return Err(Error::Dimension(format!(
            "Σ_yy is {}x{} but ū has length {}",
            p.sigma_yy.nrows(),
            p.sigma_yy.ncols(),
            p.u_bar.len()
        )));
    }
    if !(p.epsilon > 0.0) {
        return Err(Error::RepairBracket(format!(
            "epsilon must be positive, got {}",
            p.epsilon
        )));
    }
    if p.u_bar.is_empty() {
        let v = p.v_bar.max(p.epsilon);
        return Ok(Repaired {
            u: p.u_bar.clone(),
            v,
            lambda: 2.0 * (v - p.v_bar),
        });
    }
    // In the eigenbasis Σ = Q diag(s) Qᵀ the constraint decouples:
    // g(λ) = Σ ũᵢ² sᵢ / (sᵢ + λ)² − v̄ − λ/2 + ε.
    // Directions with zero variance admit no covariance; ũ there is rounding.
    let eig = SymmetricEigen::new(p.sigma_yy.clone());
    let scale = eig.eigenvalues.amax();
    if !scale.is_finite() || eig.eigenvalues.iter().any(|&x| x < -NULL_TOL * scale) {
        return Err(Error::Singular(
            "repair parent block is not positive semidefinite".into(),
        ));
    }
    let s = eig.eigenvalues.map(|x| if x > NULL_TOL * scale { x } else { 0.0 });
    let mut ut = eig.eigenvectors.transpose() * &p.u_bar;
    for (u, si) in ut.iter_mut().zip(s.iter()) {
        if *si == 0.0 {
            *u = 0.0;
        }
    }
    let g = |lambda: f64| -> f64 {
        ut.iter()
            .zip(s.iter())
            .filter(|(_, si)| **si > 0.0)
            .map(|(u, si)| u * u * si / ((si + lambda) * (si + lambda)))
            .sum::<f64>()
            - p.v_bar
            - 0.5 * lambda
            + p.epsilon
    };
    let dg = |lambda: f64| -> f64 {
        -2.0 * ut
            .iter()
            .zip(s.iter())
            .filter(|(_, si)| **si > 0.0)
            .map(|(u, si)| u * u * si / (si + lambda).powi(3))
            .sum::<f64>()
            - 0.5
    };

    // a point already on the boundary (up to rounding) counts as feasible, so
    // repairing a repaired extension is a no-op
    if g(0.0) <= 1e-3 * p.epsilon {
        return Ok(Repaired {
            u: p.u_bar.clone(),
            v: p.v_bar,
            lambda: 0.0,
        });
    }

    let mut lo = 0.0;
    let mut hi = 1.0f64.max(p.v_bar.abs());
    let mut doublings = 0;
    while g(hi) >= 0.0 {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > MAX_DOUBLINGS || !hi.is_finite() {
            return Err(Error::RepairBracket(format!("g(λ) still non-negative at λ = {hi:e}")));
        }
    }
    while hi - lo > LAMBDA_TOL * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if g(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Newton polish inside the bracket; g is smooth and decreasing.
    let mut lambda = 0.5 * (lo + hi);
    for _ in 0..3 {
        let next = lambda - g(lambda) / dg(lambda);
        if next.is_finite() && next >= lo - LAMBDA_TOL && next <= hi + LAMBDA_TOL {
            lambda = next;
        } else {
            break;
        }
    }
    let lambda = lambda.max(0.0);

    let scaled = DVector::from_iterator(
        ut.len(),
        ut.iter()
            .zip(s.iter())
            .map(|(u, si)| if *si > 0.0 { u * si / (si + lambda) } else { 0.0 }),
    );
    let u = &eig.eigenvectors * scaled;
    Ok(Repaired {
        u,
        v: p.v_bar + 0.5 * lambda,
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feasible_input_is_untouched() {
        let p = RepairProblem {
            sigma_yy: DMatrix::identity(1, 1),
            u_bar: DVector::from_element(1, 0.0),
            v_bar: 1.0,
            epsilon: 0.01,
        };
        let r = repair(&p).unwrap();
        assert_eq!(r.lambda, 0.0);
        assert_eq!(r.u, p.u_bar);
        assert_eq!(r.v, 1.0);
    }

    #[test]
    fn scalar_case_lies_on_boundary_and_beats_grid() {
        let p = RepairProblem {
            sigma_yy: DMatrix::identity(1, 1),
            u_bar: DVector::from_element(1, 2.0),
            v_bar: 3.0,
            epsilon: 0.01,
        };
        let r = repair(&p).unwrap();
        assert!(r.lambda > 0.0);
        assert!((r.u[0] * r.u[0] - r.v + 0.01).abs() < 1e-12);
        let best = p.objective(&r.u, r.v);
        // boundary parameterized by u: v = u² + ε
        for i in 0..=40_000 {
            let u = -4.0 + 8.0 * i as f64 / 40_000.0;
            let cand = DVector::from_element(1, u);
            assert!(best <= p.objective(&cand, u * u + 0.01) + 1e-12);
        }
        assert!(p.kkt_residual(&r).unwrap() < 1e-8);
    }

    #[test]
    fn idempotent() {
        let p = RepairProblem {
            sigma_yy: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            u_bar: DVector::from_column_slice(&[1.5, -1.0]),
            v_bar: 0.2,
            epsilon: 1e-6,
        };
        let r = repair(&p).unwrap();
        let again = repair(&RepairProblem {
            u_bar: r.u.clone(),
            v_bar: r.v,
            ..p.clone()
        })
        .unwrap();
        assert_eq!(again.lambda, 0.0);
        assert_eq!(again.u, r.u);
        assert_eq!(again.v, r.v);
    }

    #[test]
    fn singular_parent_block_uses_range_only() {
        // y2 = y1 exactly; u along the null direction is dropped
        let p = RepairProblem {
            sigma_yy: DMatrix::from_element(2, 2, 1.0),
            u_bar: DVector::from_column_slice(&[2.0, 2.0]),
            v_bar: 1.0,
            epsilon: 1e-6,
        };
        let r = repair(&p).unwrap();
        assert!(r.lambda > 0.0);
        assert!((r.u[0] - r.u[1]).abs() < 1e-12);
        // range is (1, 1)/√2 with eigenvalue 2
        let along = (r.u[0] + r.u[1]) / 2f64.sqrt();
        assert!((along * along / 2.0 - r.v + 1e-6).abs() < 1e-10);
    }

    #[test]
    fn default_epsilon_floor() {
        assert_eq!(default_epsilon(&DMatrix::zeros(2, 2), 0.0), 1e-12);
        assert!((default_epsilon(&DMatrix::identity(2, 2), 4.0) - 4e-8).abs() < 1e-20);
    }
}
