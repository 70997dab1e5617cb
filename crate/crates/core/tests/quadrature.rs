mod common;

use dbnfilter::quadrature::{build, estimate_local_moments, Precision};
use dbnfilter::Gaussian;
use nalgebra::{DMatrix, DVector};

use common::{gauss_hermite, tensor_gh_2d};

const MEAN: [f64; 2] = [0.7, -1.2];
const COV: [[f64; 2]; 2] = [[1.5, 0.6], [0.6, 0.8]];

fn parents() -> Gaussian {
    Gaussian::new(
        vec!["y1".into(), "y2".into()],
        DVector::from_row_slice(&MEAN),
        DMatrix::from_row_slice(2, 2, &[COV[0][0], COV[0][1], COV[1][0], COV[1][1]]),
    )
    .unwrap()
}

fn moments(p: Precision, f: fn(f64, f64) -> f64) -> (f64, f64) {
    let rule = build(p, 2, 1.0).unwrap();
    let m = estimate_local_moments(
        &parents(),
        &["x".to_string()],
        |y, out| {
            out[0] = f(y[0], y[1]);
            Ok(())
        },
        None,
        &rule,
    )
    .unwrap();
    (m.mean[0], m.cov[(0, 0)])
}

#[test]
fn gauss_hermite_oracle_is_exact_on_polynomials() {
    let (x, w) = gauss_hermite(50);
    let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
    let m10: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
    assert!((m4 - 3.0).abs() < 1e-10);
    assert!((m10 - 945.0).abs() < 1e-7);
}

#[test]
fn quadratic_mean_exact_at_three_and_variance_exact_at_five() {
    let f = |a: f64, b: f64| a * a + a * b - b;
    let (om, ov) = tensor_gh_2d(MEAN, COV, 50, f);
    let (m3, _) = moments(Precision::Three, f);
    let (m5, v5) = moments(Precision::Five, f);
    assert!((m3 - om).abs() < 1e-9, "{m3} vs {om}");
    assert!((m5 - om).abs() < 1e-9);
    assert!((v5 - ov).abs() < 1e-9 * ov.max(1.0), "{v5} vs {ov}");
}

#[test]
fn cubic_variance_exact_at_seven() {
    let f = |a: f64, b: f64| a * a * b + 0.5 * b * b * b - a;
    let (om, ov) = tensor_gh_2d(MEAN, COV, 50, f);
    let (m7, v7) = moments(Precision::Seven, f);
    assert!((m7 - om).abs() < 1e-9);
    assert!((v7 - ov).abs() < 1e-9 * ov.max(1.0), "{v7} vs {ov}");
    // precision 5 integrates the mean (degree 3) but not the variance (degree 6)
    let (m5, v5) = moments(Precision::Five, f);
    assert!((m5 - om).abs() < 1e-9);
    assert!((v5 - ov).abs() > 1e-6);
}

#[test]
fn smooth_function_error_shrinks_with_precision() {
    let f = |a: f64, b: f64| (0.8 * a - 0.3 * b).sin() * (0.2 * b).exp();
    let (om, _) = tensor_gh_2d(MEAN, COV, 50, f);
    let e: Vec<f64> = [Precision::Three, Precision::Five, Precision::Seven]
        .iter()
        .map(|&p| (moments(p, f).0 - om).abs())
        .collect();
    assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
}
