//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use dbnfilter::experiment::LinearConfig;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Linear-Gaussian system `x' = A x + c + w`, `y = H x' + d + v`.
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
    pub q: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub d: DVector<f64>,
    pub r: DMatrix<f64>,
}

/// The toy linear model written out by hand, state order
/// `px, vx, py, vy, pz, vz`, sensor order `sx, sy, sz`.
pub fn linear_system(cfg: &LinearConfig) -> LinearSystem {
    let mut a = DMatrix::zeros(6, 6);
    let mut q = DMatrix::zeros(6, 6);
    let mut h = DMatrix::zeros(3, 6);
    for i in 0..3 {
        let (p, v) = (2 * i, 2 * i + 1);
        let p_next = 2 * ((i + 1) % 3);
        a[(p, p)] = 1.0;
        a[(p, v)] = cfg.dt;
        a[(v, v)] = cfg.damping;
        a[(v, p_next)] = -cfg.coupling;
        q[(p, p)] = 0.1 * cfg.process_noise_var;
        q[(v, v)] = cfg.process_noise_var;
        h[(i, p)] = 1.0;
        h[(i, v)] = 0.2;
    }
    LinearSystem {
        a,
        c: DVector::zeros(6),
        q,
        h,
        d: DVector::from_element(3, 0.1),
        r: DMatrix::identity(3, 3) * cfg.sensor_noise_var,
    }
}

/// Textbook Kalman recursion; returns the filtered (mean, cov) after each
/// observation.
pub fn kalman(
    sys: &LinearSystem,
    mut mean: DVector<f64>,
    mut cov: DMatrix<f64>,
    observations: &[DVector<f64>],
) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let n = mean.len();
    let mut out = Vec::new();
    for y in observations {
        let m = &sys.a * &mean + &sys.c;
        let p = &sys.a * &cov * sys.a.transpose() + &sys.q;
        let s = &sys.h * &p * sys.h.transpose() + &sys.r;
        let k = &p * sys.h.transpose() * s.try_inverse().unwrap();
        mean = &m + &k * (y - (&sys.h * &m + &sys.d));
        let ikh = DMatrix::identity(n, n) - &k * &sys.h;
        // Joseph form.
        cov = &ikh * &p * ikh.transpose() + &k * &sys.r * k.transpose();
        out.push((mean.clone(), cov.clone()));
    }
    out
}

/// `max|a − b| / max|b|`.
pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

/// Gauss–Hermite nodes and weights for the standard normal weight
/// (probabilists' convention, weights sum to 1), by Golub–Welsch.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64).sqrt();
        j[(i - 1, i)] = b;
        j[(i, i - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Mean and variance of `f(Y)` for `Y ~ N(mean, cov)` (2-dim) by tensor
/// Gauss–Hermite with `n` nodes per axis.
pub fn tensor_gh_2d(mean: [f64; 2], cov: [[f64; 2]; 2], n: usize, f: impl Fn(f64, f64) -> f64) -> (f64, f64) {
    let (x, w) = gauss_hermite(n);
    let l11 = cov[0][0].sqrt();
    let l21 = cov[1][0] / l11;
    let l22 = (cov[1][1] - l21 * l21).sqrt();
    let (mut m1, mut m2) = (0.0, 0.0);
    for i in 0..n {
        for k in 0..n {
            let y1 = mean[0] + l11 * x[i];
            let y2 = mean[1] + l21 * x[i] + l22 * x[k];
            let v = f(y1, y2);
            m1 += w[i] * w[k] * v;
            m2 += w[i] * w[k] * v * v;
        }
    }
    (m1, m2 - m1 * m1)
}

/// Sample mean and covariance of the rows of `samples`.
pub fn sample_moments(samples: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let e = DVector::from_column_slice(s) - &mean;
        cov += &e * e.transpose();
    }
    (mean, cov / (n - 1.0))
}

/// Standard error of a sample covariance entry, from the Gaussian fourth
/// moment `Var(x_i x_j) = Σ_ii Σ_jj + Σ_ij²`.
pub fn cov_standard_error(cov: &DMatrix<f64>, i: usize, j: usize, n: usize) -> f64 {
    ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n as f64).sqrt()
}
