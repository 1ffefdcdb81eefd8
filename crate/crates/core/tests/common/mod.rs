#![allow(dead_code)]

use mmd_forge::kernels::{Kernel, RbfConvention};
use mmd_forge::Tensor;

/// Kernel value computed from scratch, independent of the library.
pub fn kernel_oracle(k: &Kernel, a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let rbf = |s: f64, c: RbfConvention| match c {
        RbfConvention::TwoSigmaSq => (-sq / (2.0 * s * s)).exp(),
        RbfConvention::SigmaSq => (-sq / (s * s)).exp(),
        RbfConvention::Sigma => (-sq / s).exp(),
    };
    match k {
        Kernel::Gaussian { sigma, convention } => rbf(*sigma, *convention),
        Kernel::MixtureRbf { sigmas, convention } => sigmas.iter().map(|s| rbf(*s, *convention)).sum(),
        Kernel::Linear => dot,
        Kernel::Polynomial { degree, offset } => (dot + offset).powi(*degree as i32),
    }
}

/// Squared MMD by explicit double loops.
pub fn mmd_oracle(k: &Kernel, x: &Tensor, y: &Tensor, unbiased: bool) -> f64 {
    let (n, m) = (x.rows(), y.rows());
    let mut xx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if !(unbiased && i == j) {
                xx += kernel_oracle(k, x.row(i), x.row(j));
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if !(unbiased && i == j) {
                yy += kernel_oracle(k, y.row(i), y.row(j));
            }
        }
    }
    let mut xy = 0.0;
    for i in 0..n {
        for j in 0..m {
            xy += kernel_oracle(k, x.row(i), y.row(j));
        }
    }
    let (nf, mf) = (n as f64, m as f64);
    if unbiased {
        xx / (nf * (nf - 1.0)) + yy / (mf * (mf - 1.0)) - 2.0 * xy / (nf * mf)
    } else {
        xx / (nf * nf) + yy / (mf * mf) - 2.0 * xy / (nf * mf)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
