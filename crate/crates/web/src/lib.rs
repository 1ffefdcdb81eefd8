//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Point clouds cross the boundary as flat row-major `Float64Array`s with an
//! explicit dimension. Errors come back as strings.

use mmd_forge::data::{self, DatasetSpec, NoiseSpec};
use mmd_forge::eval::Distribution;
use mmd_forge::kernels::{Kernel, KernelSpec, RbfConvention};
use mmd_forge::networks::{init_model, ModelBundle};
use mmd_forge::training::{self, HeldOutEvaluator, Mode, ModelConfig, StepRngs, TrainConfig};
use mmd_forge::{mmd, rng, Tensor};
use wasm_bindgen::prelude::*;

type Out<T> = Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn cloud(flat: &[f64], dim: usize) -> Out<Tensor> {
    if dim == 0 || flat.len() % dim != 0 {
        return Err(format!("{} values do not form rows of width {dim}", flat.len()));
    }
    Tensor::new(flat.len() / dim, dim, flat.to_vec()).map_err(err)
}

fn mixture(sigmas: &[f64]) -> Kernel {
    Kernel::MixtureRbf {
        sigmas: sigmas.to_vec(),
        convention: RbfConvention::TwoSigmaSq,
    }
}

/// Draws `n` points from `N(0, I₂)` followed by `n` points from the
/// two-component mixture with the same mean and covariance trace, whose
/// components sit at `(±separation, 0)`. `separation` must be below √2.
#[wasm_bindgen]
pub fn matched_pair(n: usize, separation: f64, seed: u32) -> Out<Vec<f64>> {
    let q = Distribution::matched_mixture(separation);
    q.validate().map_err(err)?;
    let mut r = rng::seeded(seed as u64);
    let x = Distribution::standard(2).sample(n, &mut r);
    let y = q.sample(n, &mut r);
    Ok(x.data().iter().chain(y.data()).copied().collect())
}

/// Permutation test with a Gaussian-mixture kernel; returns the decision as
/// a JSON object.
#[wasm_bindgen]
pub fn two_sample_test(
    x: &[f64],
    y: &[f64],
    dim: usize,
    sigmas: &[f64],
    alpha: f64,
    permutations: usize,
    seed: u32,
) -> Out<String> {
    let (x, y) = (cloud(x, dim)?, cloud(y, dim)?);
    let k = mixture(sigmas);
    k.validate().map_err(err)?;
    let d = mmd::permutation_test(&x, &y, KernelSpec::Plain(&k), alpha, permutations, seed as u64).map_err(err)?;
    serde_json::to_string(&d).map_err(err)
}

/// Unbiased MMD² under a single Gaussian kernel at each bandwidth.
#[wasm_bindgen]
pub fn bandwidth_sweep(x: &[f64], y: &[f64], dim: usize, sigmas: &[f64]) -> Out<Vec<f64>> {
    let (x, y) = (cloud(x, dim)?, cloud(y, dim)?);
    sigmas
        .iter()
        .map(|&s| {
            let k = Kernel::gaussian(s);
            k.validate().map_err(err)?;
            Ok(mmd::mmd2_unbiased(&x, &y, KernelSpec::Plain(&k)).map_err(err)?.estimate)
        })
        .collect()
}

/// Incremental training on the 8-Gaussian ring, stepped from the page.
#[wasm_bindgen]
pub struct RingSession {
    bundle: ModelBundle,
    train_set: Tensor,
    cfg: TrainConfig,
    kernel: Kernel,
    evaluator: HeldOutEvaluator,
    rngs: StepRngs,
    iterations: u32,
}

#[wasm_bindgen]
impl RingSession {
    /// `mode` is `mmdgan`, `gmmn_d` or `wgan_linear`.
    #[wasm_bindgen(constructor)]
    pub fn new(mode: &str, learning_rate: f64, seed: u32) -> Out<RingSession> {
        let mode = match mode {
            "mmdgan" => Mode::Mmdgan,
            "gmmn_d" => Mode::GmmnD,
            "wgan_linear" => Mode::WganLinear,
            other => return Err(format!("unsupported mode `{other}`")),
        };
        let seed = seed as u64;
        let cfg = TrainConfig {
            mode,
            learning_rate,
            seed,
            ..TrainConfig::default()
        };
        cfg.validate().map_err(err)?;
        let spec = DatasetSpec {
            size: 4000,
            seed,
            ..DatasetSpec::default()
        };
        let all = data::materialize(&spec).map_err(err)?;
        let (train_set, held_out) = data::split(&spec, &all).map_err(err)?;
        let noise = NoiseSpec::default();
        let model = ModelConfig {
            generator_hidden: vec![32, 32],
            critic_hidden: vec![32, 32],
            code_dim: 8,
            ..ModelConfig::default()
        };
        let (g, e, d) = model.configs(noise.dim, 2);
        let bundle = init_model(&noise, &g, &e, &d, learning_rate, &mut rng::stream(seed, 1)).map_err(err)?;
        let n_eval = held_out.rows().min(200);
        let evaluator = HeldOutEvaluator {
            reference: held_out.select_rows(&(0..n_eval).collect::<Vec<_>>()),
            noise: noise.sample(n_eval, &mut rng::stream(seed, 2)).map_err(err)?,
            kernel: mmd_forge::eval::EvalConfig::default().kernel,
        };
        Ok(RingSession {
            bundle,
            train_set,
            cfg,
            kernel: Kernel::default(),
            evaluator,
            rngs: StepRngs::new(seed),
            iterations: 0,
        })
    }

    /// Runs `n` generator iterations and returns the held-out MMD².
    pub fn step(&mut self, n: u32) -> Out<f64> {
        for _ in 0..n {
            training::iteration(&mut self.bundle, &self.train_set, &self.cfg, &self.kernel, &mut self.rngs)
                .map_err(err)?;
            self.iterations += 1;
        }
        self.held_out()
    }

    pub fn held_out(&self) -> Out<f64> {
        self.evaluator.evaluate(&self.bundle).map_err(err)
    }

    pub fn iterations(&self) -> u32 {
        self.iterations
    }

    /// `count` generated points, flat `[x0, y0, x1, y1, ...]`.
    pub fn samples(&self, count: usize, seed: u32) -> Out<Vec<f64>> {
        let z = self.bundle.noise.sample(count, &mut rng::seeded(seed as u64)).map_err(err)?;
        Ok(self.bundle.generate(&z).map_err(err)?.data().to_vec())
    }

    /// The first `count` training points, flat.
    pub fn data(&self, count: usize) -> Vec<f64> {
        let n = count.min(self.train_set.rows());
        self.train_set.data()[..2 * n].to_vec()
    }
}
