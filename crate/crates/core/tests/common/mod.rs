#![allow(dead_code)]

use cmpsim::linalg::*;
use ndarray::{Array2, ShapeBuilder};
use ndarray_linalg::Solve;

/// Gauss-Legendre nodes and weights on [-1, 1] (Golub-Welsch).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = CMat::zeros((n, n));
    for k in 1..n {
        let b = k as f64 / ((4 * k * k - 1) as f64).sqrt();
        j[[k, k - 1]] = c(b, 0.0);
        j[[k - 1, k]] = c(b, 0.0);
    }
    let (x, v) = eigh(&j);
    let w = (0..n).map(|k| 2.0 * v[[0, k]].norm_sqr()).collect();
    (x.to_vec(), w)
}

/// Bethe-ansatz ground state of the Lieb-Liniger gas at coupling `lambda`
/// on the unit Fermi interval: returns (gamma, e).
fn love_equation(lambda: f64, x: &[f64], w: &[f64]) -> (f64, f64) {
    let n = x.len();
    let pi = std::f64::consts::PI;
    let a = Array2::from_shape_fn((n, n).f(), |(i, j)| {
        let k = 2.0 * lambda / (lambda * lambda + (x[i] - x[j]).powi(2)) * w[j] / (2.0 * pi);
        if i == j { 1.0 - k } else { -k }
    });
    let rhs = ndarray::Array1::from_elem(n, 1.0 / (2.0 * pi));
    let g = a.solve(&rhs).unwrap();
    let norm: f64 = (0..n).map(|i| w[i] * g[i]).sum();
    let second: f64 = (0..n).map(|i| w[i] * x[i] * x[i] * g[i]).sum();
    let gamma = lambda / norm;
    (gamma, (gamma / lambda).powi(3) * second)
}

/// Exact ground-state energy per particle (in units of density cubed),
/// for gamma above roughly 5e-3.
pub fn lieb_liniger_exact(gamma: f64) -> f64 {
    let (x, w) = gauss_legendre(400);
    // below lambda ~ 1e-2 the kernel is narrower than the node spacing
    let (mut lo, mut hi) = (1e-2f64, 1e6f64);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if love_equation(mid, &x, &w).0 < gamma {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-13 {
            break;
        }
    }
    love_equation((lo * hi).sqrt(), &x, &w).1
}
