//! Squared-MMD estimators, the permutation two-sample test, and the
//! polynomial-kernel moment diagnostic.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::kernels::{Kernel, KernelSpec};
use crate::rng;
use crate::tensor::{pairwise_sqdist, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Biased,
    Unbiased,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    pub estimate: f64,
    pub estimator: Estimator,
    pub kernel: Kernel,
    pub composed: bool,
    pub n: usize,
    pub m: usize,
    /// One estimate per mixture bandwidth; `None` for single kernels.
    pub per_component: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestDecision {
    pub statistic: f64,
    pub threshold: f64,
    pub alpha: f64,
    pub n_permutations: usize,
    pub reject: bool,
    pub p_value: f64,
    pub null_mean: f64,
    pub null_std: f64,
}

/// Block sums of a pooled kernel matrix.
#[derive(Clone, Copy, Debug, Default)]
struct BlockSums {
    xx: f64,
    xx_diag: f64,
    xy: f64,
    yy: f64,
    yy_diag: f64,
}

impl BlockSums {
    fn combine(&self, n: usize, m: usize, est: Estimator) -> f64 {
        let (nf, mf) = (n as f64, m as f64);
        let (a, c) = match est {
            Estimator::Biased => (self.xx / (nf * nf), self.yy / (mf * mf)),
            Estimator::Unbiased => (
                (self.xx - self.xx_diag) / (nf * (nf - 1.0)),
                (self.yy - self.yy_diag) / (mf * (mf - 1.0)),
            ),
        };
        // (a + c) is commutative, which keeps the estimate exactly
        // symmetric under swapping the samples.
        (a + c) - 2.0 * self.xy / (nf * mf)
    }
}

fn square_sums(g: &Tensor) -> (f64, f64) {
    let total = g.sum();
    let diag = (0..g.rows()).map(|i| g.get(i, i)).sum();
    (total, diag)
}

/// Total order on samples, so the cross block is always summed in the
/// same orientation regardless of argument order.
fn canonical_order(x: &Tensor, y: &Tensor) -> Ordering {
    x.shape().cmp(&y.shape()).then_with(|| {
        x.data()
            .iter()
            .map(|v| v.to_bits())
            .cmp(y.data().iter().map(|v| v.to_bits()))
    })
}

fn check_samples(x: &Tensor, y: &Tensor, min: usize) -> Result<()> {
    let smallest = x.rows().min(y.rows());
    if smallest < min {
        return Err(Error::InsufficientSamples {
            needed: min,
            got: smallest,
        });
    }
    if x.cols() != y.cols() {
        return Err(Error::Dimension {
            op: "mmd",
            left: x.shape(),
            right: y.shape(),
        });
    }
    Ok(())
}

/// Per-component block sums for kernel `k` on already-embedded samples.
fn component_sums(fx: &Tensor, fy: &Tensor, k: &Kernel) -> Result<Vec<BlockSums>> {
    let swap = canonical_order(fx, fy) == Ordering::Greater;
    match k.gammas() {
        Some(gammas) => {
            let dxx = pairwise_sqdist(fx, fx)?;
            let dyy = pairwise_sqdist(fy, fy)?;
            let dxy = if swap {
                pairwise_sqdist(fy, fx)?
            } else {
                pairwise_sqdist(fx, fy)?
            };
            Ok(gammas
                .iter()
                .map(|&g| {
                    let kmap = |d: &Tensor| d.map(|v| (-g * v).exp());
                    let (xx, xx_diag) = square_sums(&kmap(&dxx));
                    let (yy, yy_diag) = square_sums(&kmap(&dyy));
                    BlockSums {
                        xx,
                        xx_diag,
                        xy: kmap(&dxy).sum(),
                        yy,
                        yy_diag,
                    }
                })
                .collect())
        }
        None => {
            let (xx, xx_diag) = square_sums(&k.gram(fx, fx)?);
            let (yy, yy_diag) = square_sums(&k.gram(fy, fy)?);
            let xy = if swap { k.gram(fy, fx)? } else { k.gram(fx, fy)? }.sum();
            Ok(vec![BlockSums {
                xx,
                xx_diag,
                xy,
                yy,
                yy_diag,
            }])
        }
    }
}

fn mixture_sums(fx: &Tensor, fy: &Tensor, k: &Kernel) -> Result<BlockSums> {
    let swap = canonical_order(fx, fy) == Ordering::Greater;
    let (xx, xx_diag) = square_sums(&k.gram(fx, fx)?);
    let (yy, yy_diag) = square_sums(&k.gram(fy, fy)?);
    let xy = if swap { k.gram(fy, fx)? } else { k.gram(fx, fy)? }.sum();
    Ok(BlockSums {
        xx,
        xx_diag,
        xy,
        yy,
        yy_diag,
    })
}

/// Squared MMD between two samples under either estimator.
pub fn mmd2(x: &Tensor, y: &Tensor, spec: KernelSpec<'_>, estimator: Estimator) -> Result<MmdReport> {
    let min = match estimator {
        Estimator::Biased => 1,
        Estimator::Unbiased => 2,
    };
    check_samples(x, y, min)?;
    let kernel = spec.base();
    kernel.validate()?;
    let (fx, fy) = (spec.embed(x)?, spec.embed(y)?);
    let (n, m) = (x.rows(), y.rows());
    let estimate = mixture_sums(&fx, &fy, kernel)?.combine(n, m, estimator);
    let per_component = match kernel {
        Kernel::MixtureRbf { .. } => Some(
            component_sums(&fx, &fy, kernel)?
                .iter()
                .map(|s| s.combine(n, m, estimator))
                .collect(),
        ),
        _ => None,
    };
    if !estimate.is_finite() {
        return Err(Error::Numeric { op: "mmd2" });
    }
    Ok(MmdReport {
        estimate,
        estimator,
        kernel: kernel.clone(),
        composed: spec.is_composed(),
        n,
        m,
        per_component,
    })
}

/// U-statistic: `Σ_{i≠i'} k(x_i,x_i')/(n(n−1)) − 2 Σ_{i,j} k(x_i,y_j)/(nm) + Σ_{j≠j'} k(y_j,y_j')/(m(m−1))`.
pub fn mmd2_unbiased(x: &Tensor, y: &Tensor, spec: KernelSpec<'_>) -> Result<MmdReport> {
    mmd2(x, y, spec, Estimator::Unbiased)
}

/// Plug-in estimate `‖μ̂_X − μ̂_Y‖²` in the kernel's feature space.
pub fn mmd2_biased(x: &Tensor, y: &Tensor, spec: KernelSpec<'_>) -> Result<MmdReport> {
    mmd2(x, y, spec, Estimator::Biased)
}

/// Differentiable squared MMD between two tape nodes (already embedded).
pub fn mmd2_on_tape(tape: &mut Tape, fx: Var, fy: Var, kernel: &Kernel, estimator: Estimator) -> Result<Var> {
    let (n, m) = (tape.shape(fx).0, tape.shape(fy).0);
    let min = match estimator {
        Estimator::Biased => 1,
        Estimator::Unbiased => 2,
    };
    if n.min(m) < min {
        return Err(Error::InsufficientSamples {
            needed: min,
            got: n.min(m),
        });
    }
    let (nf, mf) = (n as f64, m as f64);
    let unbiased = estimator == Estimator::Unbiased;
    let (wxx, wyy) = if unbiased {
        (1.0 / (nf * (nf - 1.0)), 1.0 / (mf * (mf - 1.0)))
    } else {
        (1.0 / (nf * nf), 1.0 / (mf * mf))
    };
    let mut block = |a: Var, b: Var, drop_diagonal: bool, w: f64| -> Result<Var> {
        let g = kernel.gram_on_tape(tape, a, b)?;
        let mut s = tape.sum(g)?;
        if drop_diagonal {
            let t = tape.trace(g)?;
            s = tape.sub(s, t)?;
        }
        tape.scale(s, w)
    };
    let xx = block(fx, fx, unbiased, wxx)?;
    let yy = block(fy, fy, unbiased, wyy)?;
    let xy = block(fx, fy, false, -2.0 / (nf * mf))?;
    let within = tape.add(xx, yy)?;
    tape.add(within, xy)
}

fn permuted_statistic(gram: &Tensor, order: &[usize], n: usize, mask: &mut [f64]) -> f64 {
    let total = gram.rows();
    let m = total - n;
    mask.fill(0.0);
    for &i in &order[..n] {
        mask[i] = 1.0;
    }
    let mut s = BlockSums::default();
    for i in 0..total {
        let row = gram.row(i);
        let (mut in_x, mut all) = (0.0, 0.0);
        for (k, w) in row.iter().zip(mask.iter()) {
            in_x += k * w;
            all += k;
        }
        if mask[i] == 1.0 {
            s.xx += in_x;
            s.xy += all - in_x;
            s.xx_diag += row[i];
        } else {
            s.yy += all - in_x;
            s.yy_diag += row[i];
        }
    }
    s.combine(n, m, Estimator::Unbiased)
}

/// Empirical `q`-quantile using the `⌈q·P⌉`-th order statistic.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let p = sorted.len();
    let rank = ((q * p as f64).ceil() as usize).clamp(1, p);
    sorted[rank - 1]
}

/// Permutation test of `H₀: P = Q` with the unbiased statistic. Replicate
/// `r` shuffles with its own stream derived from `(seed, r)`, so results do
/// not depend on how replicates are scheduled.
pub fn permutation_test(
    x: &Tensor,
    y: &Tensor,
    spec: KernelSpec<'_>,
    alpha: f64,
    n_permutations: usize,
    seed: u64,
) -> Result<TestDecision> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(contract(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if n_permutations < 100 {
        return Err(contract(format!(
            "at least 100 permutations required, got {n_permutations}"
        )));
    }
    let statistic = mmd2_unbiased(x, y, spec)?.estimate;
    let pooled = spec.embed(&x.vstack(y)?)?;
    let gram = spec.base().gram(&pooled, &pooled)?;
    let n = x.rows();
    let total = pooled.rows();

    let replicate = |r: usize| {
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut rng::stream(seed, r as u64));
        let mut mask = vec![0.0; total];
        permuted_statistic(&gram, &order, n, &mut mask)
    };
    #[cfg(feature = "parallel")]
    let mut null: Vec<f64> = {
        use rayon::prelude::*;
        (0..n_permutations).into_par_iter().map(replicate).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let mut null: Vec<f64> = (0..n_permutations).map(replicate).collect();

    let p = null.len() as f64;
    let null_mean = null.iter().sum::<f64>() / p;
    let null_std = (null.iter().map(|v| (v - null_mean).powi(2)).sum::<f64>() / (p - 1.0)).sqrt();
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    null.sort_by(f64::total_cmp);
    let threshold = empirical_quantile(&null, 1.0 - alpha);
    Ok(TestDecision {
        statistic,
        threshold,
        alpha,
        n_permutations,
        reject: statistic > threshold,
        p_value: (1 + exceed) as f64 / (1.0 + p),
        null_mean,
        null_std,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    /// `‖μ̂_X − μ̂_Y‖²`
    pub first_moment_gap: f64,
    /// `‖M̂_X − M̂_Y‖_F²` with `M̂ = mean(x xᵀ)`.
    pub second_moment_gap: f64,
    /// Biased MMD² under `(1 + xᵀy)²`.
    pub poly_mmd2: f64,
}

impl MomentReport {
    /// `poly_mmd2 − (2·first + second)`; zero up to round-off.
    pub fn identity_residual(&self) -> f64 {
        self.poly_mmd2 - (2.0 * self.first_moment_gap + self.second_moment_gap)
    }
}

fn second_moment(x: &Tensor) -> Tensor {
    let d = x.cols();
    let mut m = Tensor::zeros(d, d);
    for r in x.iter_rows() {
        for i in 0..d {
            for j in 0..d {
                let v = m.get(i, j) + r[i] * r[j];
                m.set(i, j, v);
            }
        }
    }
    let n = x.rows() as f64;
    m.map(|v| v / n)
}

/// First/second moment gaps next to the degree-2 polynomial-kernel MMD they
/// decompose.
pub fn moment_diagnostic(x: &Tensor, y: &Tensor) -> Result<MomentReport> {
    check_samples(x, y, 2)?;
    let (mx, my) = (x.column_means(), y.column_means());
    let first_moment_gap = mx.zip_map(&my, |a, b| (a - b) * (a - b)).sum();
    let (sx, sy) = (second_moment(x), second_moment(y));
    let second_moment_gap = sx.zip_map(&sy, |a, b| (a - b) * (a - b)).sum();
    let poly = Kernel::Polynomial { degree: 2, offset: 1.0 };
    let poly_mmd2 = mmd2_biased(x, y, KernelSpec::Plain(&poly))?.estimate;
    Ok(MomentReport {
        first_moment_gap,
        second_moment_gap,
        poly_mmd2,
    })
}
