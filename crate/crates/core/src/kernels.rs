//! Positive-definite kernels and Gram matrices.
//!
//! Gaussian-family kernels share one squared-distance matrix across all
//! bandwidths; the cost of a `K`-component mixture over a single bandwidth is
//! `K` extra exponentials per entry.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::networks::{Mlp, MlpVars};
use crate::tensor::{matmul_nt, pairwise_sqdist, Tensor};

/// How a bandwidth `σ` enters the Gaussian exponent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RbfConvention {
    /// `exp(−‖x−y‖² / (2σ²))`
    #[default]
    TwoSigmaSq,
    /// `exp(−‖x−y‖² / σ²)`
    SigmaSq,
    /// `exp(−‖x−y‖² / σ)`
    Sigma,
}

impl RbfConvention {
    pub fn gamma(self, sigma: f64) -> f64 {
        match self {
            RbfConvention::TwoSigmaSq => 1.0 / (2.0 * sigma * sigma),
            RbfConvention::SigmaSq => 1.0 / (sigma * sigma),
            RbfConvention::Sigma => 1.0 / sigma,
        }
    }
}

/// A kernel acting directly on its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    Gaussian {
        sigma: f64,
        #[serde(default)]
        convention: RbfConvention,
    },
    MixtureRbf {
        sigmas: Vec<f64>,
        #[serde(default)]
        convention: RbfConvention,
    },
    Linear,
    Polynomial { degree: u32, offset: f64 },
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel::mixture(&[1.0, 2.0, 4.0, 8.0, 16.0])
    }
}

impl Kernel {
    pub fn gaussian(sigma: f64) -> Self {
        Kernel::Gaussian {
            sigma,
            convention: RbfConvention::default(),
        }
    }

    pub fn mixture(sigmas: &[f64]) -> Self {
        Kernel::MixtureRbf {
            sigmas: sigmas.to_vec(),
            convention: RbfConvention::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::Gaussian { sigma, .. } if !(*sigma > 0.0) => {
                Err(contract(format!("bandwidth must be positive, got {sigma}")))
            }
            Kernel::MixtureRbf { sigmas, .. } if sigmas.is_empty() => {
                Err(contract("mixture needs at least one bandwidth"))
            }
            Kernel::MixtureRbf { sigmas, .. } if sigmas.iter().any(|s| !(*s > 0.0)) => {
                Err(contract(format!("bandwidths must be positive, got {sigmas:?}")))
            }
            Kernel::Polynomial { degree, offset } if *degree < 1 || !(*offset >= 0.0) => Err(
                contract(format!("polynomial needs degree ≥ 1 and offset ≥ 0, got ({degree}, {offset})")),
            ),
            _ => Ok(()),
        }
    }

    /// Exponent coefficients for the Gaussian family, `None` otherwise.
    pub fn gammas(&self) -> Option<Vec<f64>> {
        match self {
            Kernel::Gaussian { sigma, convention } => Some(vec![convention.gamma(*sigma)]),
            Kernel::MixtureRbf { sigmas, convention } => {
                Some(sigmas.iter().map(|s| convention.gamma(*s)).collect())
            }
            _ => None,
        }
    }

    /// The kernel split into additive components (mixtures into their
    /// Gaussians, everything else into itself).
    pub fn components(&self) -> Vec<Kernel> {
        match self {
            Kernel::MixtureRbf { sigmas, convention } => sigmas
                .iter()
                .map(|&sigma| Kernel::Gaussian {
                    sigma,
                    convention: *convention,
                })
                .collect(),
            k => vec![k.clone()],
        }
    }

    /// Supremum of `k(x, x')` for bounded kernels.
    pub fn bound(&self) -> Option<f64> {
        self.gammas().map(|g| g.len() as f64)
    }

    /// `k(x, y)` for a single pair.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Kernel::Linear => x.iter().zip(y).map(|(a, b)| a * b).sum(),
            Kernel::Polynomial { degree, offset } => {
                let d: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                (offset + d).powi(*degree as i32)
            }
            k => {
                let d: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                k.gammas().unwrap().iter().map(|g| (-g * d).exp()).sum()
            }
        }
    }

    /// Gram matrix `G_ij = k(x_i, y_j)`.
    pub fn gram(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        self.validate()?;
        if x.cols() != y.cols() {
            return Err(Error::Dimension {
                op: "gram",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let g = match self {
            Kernel::Linear => matmul_nt(x, y),
            Kernel::Polynomial { degree, offset } => {
                let (p, c) = (*degree as i32, *offset);
                matmul_nt(x, y).map(|v| (c + v).powi(p))
            }
            k => {
                let gammas = k.gammas().unwrap();
                let d = if std::ptr::eq(x, y) {
                    pairwise_sqdist(x, x)?
                } else {
                    pairwise_sqdist(x, y)?
                };
                rbf_map(d, &gammas)
            }
        };
        if !g.is_finite() {
            return Err(Error::Numeric { op: "gram" });
        }
        Ok(g)
    }

    /// Differentiable Gram matrix between two tape nodes.
    pub fn gram_on_tape(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
        self.validate()?;
        let (sx, sy) = (tape.shape(x), tape.shape(y));
        if sx.1 != sy.1 {
            return Err(Error::Dimension {
                op: "gram",
                left: sx,
                right: sy,
            });
        }
        match self {
            Kernel::Linear => {
                let yt = tape.transpose(y)?;
                tape.matmul(x, yt)
            }
            Kernel::Polynomial { degree, offset } => {
                let yt = tape.transpose(y)?;
                let dot = tape.matmul(x, yt)?;
                let base = tape.add_scalar(dot, *offset)?;
                let mut acc = base;
                for _ in 1..*degree {
                    acc = tape.mul(acc, base)?;
                }
                Ok(acc)
            }
            k => {
                let gammas = k.gammas().unwrap();
                let d = tape.pairwise_sqdist(x, y)?;
                tape.rbf_mixture(d, &gammas)
            }
        }
    }
}

fn rbf_map(d: Tensor, gammas: &[f64]) -> Tensor {
    let plan = RbfPlan::new(gammas);
    let mut out = Tensor::zeros(d.rows(), d.cols());
    #[cfg(feature = "parallel")]
    if d.len() >= 1 << 16 {
        use rayon::prelude::*;
        const CHUNK: usize = 1 << 14;
        out.data_mut()
            .par_chunks_mut(CHUNK)
            .zip(d.data().par_chunks(CHUNK))
            .for_each(|(o, x)| plan.fill(x, o, None));
        return out;
    }
    plan.fill(d.data(), out.data_mut(), None);
    out
}

/// `exp(x)` for `x ≤ 0` (and small positive `x`), written without branches
/// or calls so loops over it vectorize. Relative error is a few ulp; results
/// below the normal range flush to zero.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_0e-10;
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52
    const FLOOR: f64 = -708.0;
    let xc = x.max(FLOOR);
    let t = xc * LOG2E + SHIFT;
    let n = t - SHIFT;
    let r = (xc - n * LN2_HI) - n * LN2_LO;
    // Taylor series of e^r to degree 12; |r| ≤ ln 2 / 2.
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let k = (t.to_bits() as i64).wrapping_sub(SHIFT.to_bits() as i64);
    let scale = f64::from_bits(((k + 1023) as u64) << 52);
    // `x − x` propagates NaN, which the clamp above would otherwise drop.
    if x < FLOOR {
        0.0
    } else {
        p * scale + (x - x)
    }
}

#[inline]
fn ipow(mut x: f64, mut n: u32) -> f64 {
    match n {
        2 => return x * x,
        4 => {
            let s = x * x;
            return s * s;
        }
        _ => {}
    }
    let mut acc = 1.0;
    while n > 0 {
        if n & 1 == 1 {
            acc *= x;
        }
        x *= x;
        n >>= 1;
    }
    acc
}

/// Evaluation schedule for `Σ_q exp(−γ_q d)`. Rates are visited in
/// increasing order; a rate that is a small integer multiple of the previous
/// one is obtained by raising that term to the integer power, so dyadic
/// bandwidth lists cost one exponential per entry.
pub(crate) struct RbfPlan {
    gammas: Vec<f64>,
    /// `Some(r)` when `gammas[q] == r · gammas[q−1]`.
    reuse: Vec<Option<u32>>,
}

impl RbfPlan {
    pub(crate) fn new(gammas: &[f64]) -> Self {
        let mut gammas = gammas.to_vec();
        gammas.sort_by(f64::total_cmp);
        let reuse = (0..gammas.len())
            .map(|q| {
                if q == 0 {
                    return None;
                }
                let r = gammas[q] / gammas[q - 1];
                (r.fract() == 0.0 && (2.0..=16.0).contains(&r) && r * gammas[q - 1] == gammas[q]).then_some(r as u32)
            })
            .collect();
        Self { gammas, reuse }
    }

    /// Writes `Σ e_q` into `out` and, when given, `Σ −γ_q e_q` into `slope`,
    /// with `e_q = exp(−γ_q d)`. Works bandwidth by bandwidth over short
    /// blocks so the inner loops vectorize.
    pub(crate) fn fill(&self, d: &[f64], out: &mut [f64], mut slope: Option<&mut [f64]>) {
        const BLOCK: usize = 256;
        let mut e = [0.0f64; BLOCK];
        for (start, dc) in (0..d.len()).step_by(BLOCK).zip(d.chunks(BLOCK)) {
            let len = dc.len();
            let oc = &mut out[start..start + len];
            oc.fill(0.0);
            let mut sc = slope.as_deref_mut().map(|s| {
                let s = &mut s[start..start + len];
                s.fill(0.0);
                s
            });
            for (g, r) in self.gammas.iter().zip(&self.reuse) {
                let e = &mut e[..len];
                match r {
                    Some(2) => e.iter_mut().for_each(|v| *v *= *v),
                    Some(4) => e.iter_mut().for_each(|v| {
                        let s = *v * *v;
                        *v = s * s;
                    }),
                    Some(r) => e.iter_mut().for_each(|v| *v = ipow(*v, *r)),
                    None => e.iter_mut().zip(dc).for_each(|(v, x)| *v = exp_nonpositive(-g * x)),
                }
                oc.iter_mut().zip(e.iter()).for_each(|(o, v)| *o += v);
                if let Some(sc) = sc.as_deref_mut() {
                    sc.iter_mut().zip(e.iter()).for_each(|(o, v)| *o -= g * v);
                }
            }
        }
    }
}

/// A kernel on raw inputs, or a base kernel evaluated on encoder outputs.
/// Composition nests at most once by construction.
#[derive(Clone, Copy, Debug)]
pub enum KernelSpec<'a> {
    Plain(&'a Kernel),
    Composed { inner: &'a Kernel, encoder: &'a Mlp },
}

impl<'a> KernelSpec<'a> {
    pub fn base(&self) -> &'a Kernel {
        match self {
            KernelSpec::Plain(k) => k,
            KernelSpec::Composed { inner, .. } => inner,
        }
    }

    pub fn is_composed(&self) -> bool {
        matches!(self, KernelSpec::Composed { .. })
    }

    /// Maps raw points into the space the base kernel sees.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            KernelSpec::Plain(_) => Ok(x.clone()),
            KernelSpec::Composed { encoder, .. } => {
                if encoder.input_dim() != x.cols() {
                    return Err(Error::Dimension {
                        op: "composed kernel",
                        left: (encoder.input_dim(), encoder.output_dim()),
                        right: x.shape(),
                    });
                }
                let f = encoder.forward(x)?;
                if !f.is_finite() {
                    return Err(Error::Numeric { op: "encoder" });
                }
                Ok(f)
            }
        }
    }

    pub fn gram(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        if x.cols() != y.cols() {
            return Err(Error::Dimension {
                op: "gram",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let (fx, fy) = (self.embed(x)?, self.embed(y)?);
        self.base().gram(&fx, &fy)
    }
}

/// Differentiable Gram matrix, optionally through a tracked encoder.
pub fn gram_tracked(
    tape: &mut Tape,
    x: Var,
    y: Var,
    kernel: &Kernel,
    encoder: Option<&MlpVars>,
) -> Result<Var> {
    match encoder {
        None => kernel.gram_on_tape(tape, x, y),
        Some(enc) => {
            let fx = enc.forward(tape, x)?;
            let fy = if x == y { fx } else { enc.forward(tape, y)? };
            kernel.gram_on_tape(tape, fx, fy)
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
pub fn check_psd(g: &Tensor) -> Result<f64> {
    let n = g.rows();
    if g.cols() != n {
        return Err(contract(format!("Gram matrix must be square, got {:?}", g.shape())));
    }
    for i in 0..n {
        for j in 0..i {
            if (g.get(i, j) - g.get(j, i)).abs() > 1e-12 {
                return Err(contract(format!("Gram matrix asymmetric at ({i},{j})")));
            }
        }
    }
    if n == 0 {
        return Err(contract("empty Gram matrix"));
    }
    let mut a: Vec<f64> = g.data().to_vec();
    let scale = a.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off.sqrt() <= 1e-15 * scale * n as f64 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    Ok((0..n).map(|i| a[i * n + i]).fold(f64::INFINITY, f64::min))
}
