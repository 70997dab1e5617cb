//! Labeled multivariate Gaussians.
//!
//! A [`Gaussian`] is an immutable (mean, covariance) pair whose coordinates are
//! addressed by name. The operations here are the ones a belief-state tracker
//! composes: marginalization, conditioning on observed values, and extension by
//! linear-Gaussian or implied conditional-linear-Gaussian factors.
//!
//! Results keep the first operand's label order, with appended labels after it
//! in declaration order. Every composite operation re-symmetrizes its output.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative jitter added once to the diagonal of a block that fails Cholesky.
pub const JITTER_SCALE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    labels: Vec<String>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

/// Output of [`Gaussian::condition`].
#[derive(Clone, Debug)]
pub struct Conditioned {
    pub posterior: Gaussian,
    /// Log-density of the observed values under the prior marginal.
    pub log_likelihood: f64,
}

impl Gaussian {
    pub fn new(labels: Vec<String>, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = labels.len();
        if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Dimension(format!(
                "{} labels, mean of length {}, covariance {}x{}",
                n,
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::DuplicateLabel(l.clone()));
            }
        }
        let scale = cov.amax();
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-12 * scale.max(f64::MIN_POSITIVE) && asym > 0.0 {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(Self {
            labels,
            mean,
            cov: symmetrize(cov),
        })
    }

    pub fn from_diagonal<S: AsRef<str>>(labels: &[S], mean: &[f64], var: &[f64]) -> Result<Self> {
        if var.iter().any(|v| *v < 0.0) {
            return Err(Error::NotPsd(var.iter().cloned().fold(f64::INFINITY, f64::min)));
        }
        Self::new(
            labels.iter().map(|s| s.as_ref().to_string()).collect(),
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal(&DVector::from_column_slice(var)),
        )
    }

    /// Independent standard normals over `labels`.
    pub fn standard<S: AsRef<str>>(labels: &[S]) -> Self {
        let n = labels.len();
        Self {
            labels: labels.iter().map(|s| s.as_ref().to_string()).collect(),
            mean: DVector::zeros(n),
            cov: DMatrix::identity(n, n),
        }
    }

    pub fn empty() -> Self {
        Self {
            labels: Vec::new(),
            mean: DVector::zeros(0),
            cov: DMatrix::zeros(0, 0),
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    fn require(&self, label: &str) -> Result<usize> {
        self.index_of(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn mean_of(&self, label: &str) -> Result<f64> {
        Ok(self.mean[self.require(label)?])
    }

    pub fn var_of(&self, label: &str) -> Result<f64> {
        let i = self.require(label)?;
        Ok(self.cov[(i, i)])
    }

    pub fn cov_of(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.cov[(self.require(a)?, self.require(b)?)])
    }

    /// Checks the symmetry and positive-semidefiniteness invariants.
    pub fn check_invariants(&self) -> Result<()> {
        if self.dim() == 0 {
            return Ok(());
        }
        let scale = self.cov.amax();
        let asym = (&self.cov - self.cov.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::NotSymmetric(asym));
        }
        let min_eig = min_eigenvalue(&self.cov);
        if min_eig < -1e-10 * self.cov.trace().abs() {
            return Err(Error::NotPsd(min_eig));
        }
        Ok(())
    }

    /// Renames every label through `f`.
    pub fn relabel(&self, f: impl Fn(&str) -> String) -> Result<Self> {
        Self::new(
            self.labels.iter().map(|l| f(l)).collect(),
            self.mean.clone(),
            self.cov.clone(),
        )
    }

    /// Marginal over `keep`, in this Gaussian's label order.
    pub fn marginalize<S: AsRef<str>>(&self, keep: &[S]) -> Result<Self> {
        let mut idx = Vec::with_capacity(keep.len());
        for k in keep {
            idx.push(self.require(k.as_ref())?);
        }
        idx.sort_unstable();
        idx.dedup();
        Ok(self.take(&idx))
    }

    /// Marginal over `labels`, in the order given.
    pub fn select<S: AsRef<str>>(&self, labels: &[S]) -> Result<Self> {
        let mut idx = Vec::with_capacity(labels.len());
        for k in labels {
            let i = self.require(k.as_ref())?;
            if idx.contains(&i) {
                return Err(Error::DuplicateLabel(k.as_ref().to_string()));
            }
            idx.push(i);
        }
        Ok(self.take(&idx))
    }

    /// Marginal with the given labels removed.
    pub fn drop_labels<S: AsRef<str>>(&self, remove: &[S]) -> Result<Self> {
        for r in remove {
            self.require(r.as_ref())?;
        }
        let idx: Vec<usize> = (0..self.dim())
            .filter(|&i| !remove.iter().any(|r| r.as_ref() == self.labels[i]))
            .collect();
        Ok(self.take(&idx))
    }

    fn take(&self, idx: &[usize]) -> Self {
        Self {
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
            mean: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.mean[i])),
            cov: submatrix(&self.cov, idx, idx),
        }
    }

    /// Conditions on observed values.
    ///
    /// Returns the Gaussian over the unobserved labels (original order) and the
    /// log-density of `obs` under the prior marginal of the observed block.
    pub fn condition<S: AsRef<str>>(&self, obs: &[(S, f64)]) -> Result<Conditioned> {
        if obs.is_empty() {
            return Ok(Conditioned {
                posterior: self.clone(),
                log_likelihood: 0.0,
            });
        }
        let mut b_idx = Vec::with_capacity(obs.len());
        for (label, _) in obs {
            let i = self.require(label.as_ref())?;
            if b_idx.contains(&i) {
                return Err(Error::DuplicateLabel(label.as_ref().to_string()));
            }
            b_idx.push(i);
        }
        let a_idx: Vec<usize> = (0..self.dim()).filter(|i| !b_idx.contains(i)).collect();

        let s_bb = submatrix(&self.cov, &b_idx, &b_idx);
        let s_ab = submatrix(&self.cov, &a_idx, &b_idx);
        let s_aa = submatrix(&self.cov, &a_idx, &a_idx);
        let innov = DVector::from_iterator(b_idx.len(), obs.iter().zip(&b_idx).map(|((_, v), &i)| v - self.mean[i]));

        let chol = cholesky_with_jitter(&s_bb).map_err(|_| {
            Error::Singular(
                b_idx
                    .iter()
                    .map(|&i| self.labels[i].as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            )
        })?;
        let alpha = chol.solve(&innov);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_likelihood = -0.5 * (innov.dot(&alpha) + log_det + b_idx.len() as f64 * (2.0 * PI).ln());

        // gain = S_ab S_bb^-1
        let gain = chol.solve(&s_ab.transpose()).transpose();
        let mean_a = DVector::from_iterator(a_idx.len(), a_idx.iter().map(|&i| self.mean[i])) + &s_ab * &alpha;
        let cov_a = s_aa - &gain * s_ab.transpose();

        Ok(Conditioned {
            posterior: Self {
                labels: a_idx.iter().map(|&i| self.labels[i].clone()).collect(),
                mean: mean_a,
                cov: symmetrize(cov_a),
            },
            log_likelihood,
        })
    }

    /// Adjoins `child = Σ wᵢ·parentᵢ + intercept + V`, `V ~ N(0, noise_var)`.
    pub fn extend_linear<S: AsRef<str>>(
        &self,
        child: &str,
        weights: &[(S, f64)],
        intercept: f64,
        noise_var: f64,
    ) -> Result<Self> {
        if noise_var < 0.0 || noise_var.is_nan() {
            return Err(Error::NegativeVariance(noise_var));
        }
        if self.contains(child) {
            return Err(Error::DuplicateLabel(child.to_string()));
        }
        let n = self.dim();
        let mut w = DVector::zeros(n);
        for (label, coef) in weights {
            w[self.require(label.as_ref())?] += coef;
        }
        let sw = &self.cov * &w;
        let var = w.dot(&sw) + noise_var;
        let mean = w.dot(&self.mean) + intercept;

        let mut cov = DMatrix::zeros(n + 1, n + 1);
        cov.view_mut((0, 0), (n, n)).copy_from(&self.cov);
        for i in 0..n {
            cov[(i, n)] = sw[i];
            cov[(n, i)] = sw[i];
        }
        cov[(n, n)] = var;
        let mut labels = self.labels.clone();
        labels.push(child.to_string());
        Ok(Self {
            labels,
            mean: self.mean.clone().push(mean),
            cov: symmetrize(cov),
        })
    }

    /// Extends this Gaussian by the conditional `P(children | parents)` implied
    /// by `local`.
    ///
    /// `local`'s labels that already exist here are its parents; the rest are
    /// children and are appended in `local`'s order. The marginal over the
    /// existing labels is unchanged.
    pub fn append_conditional(&self, local: &Gaussian) -> Result<Self> {
        let (p_loc, c_loc): (Vec<usize>, Vec<usize>) = (0..local.dim()).partition(|&i| self.contains(&local.labels[i]));
        if c_loc.is_empty() {
            return Ok(self.clone());
        }
        let p_self: Vec<usize> = p_loc
            .iter()
            .map(|&i| self.index_of(&local.labels[i]).unwrap())
            .collect();
        let n = self.dim();
        let k = c_loc.len();

        let s_cc = submatrix(&local.cov, &c_loc, &c_loc);
        let mu_c = DVector::from_iterator(k, c_loc.iter().map(|&i| local.mean[i]));

        let (mean_c, cross, cov_c) = if p_loc.is_empty() {
            (mu_c, DMatrix::zeros(k, n), s_cc)
        } else {
            let s_pp = submatrix(&local.cov, &p_loc, &p_loc);
            let s_cp = submatrix(&local.cov, &c_loc, &p_loc);
            let mu_p = DVector::from_iterator(p_loc.len(), p_loc.iter().map(|&i| local.mean[i]));
            let chol = cholesky_with_jitter(&s_pp).map_err(|_| {
                Error::Singular(
                    p_loc
                        .iter()
                        .map(|&i| local.labels[i].as_str())
                        .collect::<Vec<_>>()
                        .join(", "),
                )
            })?;
            // regression coefficients B = S_cp S_pp^-1
            let b = chol.solve(&s_cp.transpose()).transpose();
            let intercept = &mu_c - &b * &mu_p;
            let cond_cov = &s_cc - &b * s_cp.transpose();

            let g_pp = submatrix(&self.cov, &p_self, &p_self);
            let g_mu_p = DVector::from_iterator(p_self.len(), p_self.iter().map(|&i| self.mean[i]));
            let g_p_all = rows(&self.cov, &p_self);
            let mean_c = intercept + &b * g_mu_p;
            let cross = &b * g_p_all;
            let cov_c = &b * g_pp * b.transpose() + cond_cov;
            (mean_c, cross, cov_c)
        };

        let mut cov = DMatrix::zeros(n + k, n + k);
        cov.view_mut((0, 0), (n, n)).copy_from(&self.cov);
        cov.view_mut((n, 0), (k, n)).copy_from(&cross);
        cov.view_mut((0, n), (n, k)).copy_from(&cross.transpose());
        cov.view_mut((n, n), (k, k)).copy_from(&cov_c);
        let mut labels = self.labels.clone();
        labels.extend(c_loc.iter().map(|&i| local.labels[i].clone()));
        let mut mean = DVector::zeros(n + k);
        mean.rows_mut(0, n).copy_from(&self.mean);
        mean.rows_mut(n, k).copy_from(&mean_c);
        Ok(Self {
            labels,
            mean,
            cov: symmetrize(cov),
        })
    }

    /// Log-density at `x` (ordered as `labels`).
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let chol = cholesky_with_jitter(&self.cov).map_err(|_| Error::Singular(self.labels.join(", ")))?;
        let d = x - &self.mean;
        let alpha = chol.solve(&d);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(-0.5 * (d.dot(&alpha) + log_det + self.dim() as f64 * (2.0 * PI).ln()))
    }

    /// Returns a copy whose covariance has eigenvalues clipped from below at
    /// `floor`, plus whether any clipping happened.
    pub fn clip_eigenvalues(&self, floor: f64) -> (Self, bool) {
        if self.dim() == 0 {
            return (self.clone(), false);
        }
        let eig = SymmetricEigen::new(self.cov.clone());
        if eig.eigenvalues.iter().all(|&v| v >= floor) {
            return (self.clone(), false);
        }
        let clipped = eig.eigenvalues.map(|v| v.max(floor));
        let cov = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        (
            Self {
                labels: self.labels.clone(),
                mean: self.mean.clone(),
                cov: symmetrize(cov),
            },
            true,
        )
    }
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

pub fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Cholesky factorization with one jitter retry of `1e-9 · trace / dim`.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let jitter = JITTER_SCALE * m.trace() / n.max(1) as f64;
    if jitter > 0.0 && jitter.is_finite() {
        let mut j = m.clone();
        for i in 0..n {
            j[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(j) {
            return Ok(c);
        }
    }
    Err(Error::Singular(format!("{n}x{n} block")))
}
