//! Adversarial kernel training and its baselines.
//!
//! Every outer iteration of [`Mode::Mmdgan`] runs `critic_iters` ascent steps
//! on the critic objective
//!
//! ```text
//! M̂²(f(X), f(g(Z))) − λ_ae·recon(X ∪ g(Z)) + λ_fsr·Σ_c min(mean f(X)_c − mean f(g(Z))_c, 0) [− λ_gp·GP]
//! ```
//!
//! over the encoder `f` and decoder, followed by one descent step of the
//! generator on `M̂²(f(X), f(g(Z)))` with the critic frozen. The
//! reconstruction term never reaches the generator.

use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data;
use crate::error::{contract, Error, Result};
use crate::kernels::{Kernel, KernelSpec};
use crate::mmd::{self, mmd2_on_tape, Estimator};
use crate::networks::{gradient_penalty, init_model, reconstruction_loss, Mlp, MlpConfig, ModelBundle};
use crate::optim::{clip_params, rmsprop_step, Direction, OptimState};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Adversarially learned composition kernel.
    Mmdgan,
    /// Fixed kernel on raw data.
    GmmnD,
    /// Fixed kernel on the codes of a pretrained, frozen autoencoder.
    GmmnC,
    /// Linear kernel on critic codes: squared mean gap of `f`.
    WganLinear,
}

impl Mode {
    pub fn has_critic(self) -> bool {
        matches!(self, Mode::Mmdgan | Mode::WganLinear)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lipschitz {
    Clip,
    GradientPenalty,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lipschitz: Lipschitz,
    /// Critic weights are clamped to `[−clip, clip]` after each critic step.
    pub clip: f64,
    pub lambda_gp: f64,
    pub lambda_ae: f64,
    pub lambda_fsr: f64,
    pub batch_size: usize,
    pub critic_iters: usize,
    pub generator_iters: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Estimator inside the training objectives.
    pub estimator: Estimator,
    /// Held-out evaluation every this many generator iterations.
    pub eval_every: usize,
    /// Autoencoder pretraining for `gmmn_c`.
    pub pretrain_iters: usize,
    pub pretrain_learning_rate: f64,
    /// Write measured seconds per iteration; when false the column is 0 and
    /// the trace is bit-reproducible.
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Mmdgan,
            lipschitz: Lipschitz::Clip,
            clip: 0.01,
            lambda_gp: 1.0,
            lambda_ae: 8.0,
            lambda_fsr: 16.0,
            batch_size: 64,
            critic_iters: 5,
            generator_iters: 20_000,
            learning_rate: 0.00005,
            seed: 1,
            estimator: Estimator::Biased,
            eval_every: 100,
            pretrain_iters: 2_000,
            pretrain_learning_rate: 0.001,
            record_wallclock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(contract("batch_size must be at least 2"));
        }
        if self.critic_iters < 1 {
            return Err(contract("critic_iters must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(contract("learning_rate must be non-negative"));
        }
        if self.eval_every == 0 {
            return Err(contract("eval_every must be at least 1"));
        }
        if self.mode.has_critic() && self.lipschitz == Lipschitz::Clip && !(self.clip > 0.0) {
            return Err(contract("clip bound must be positive"));
        }
        for (name, v) in [
            ("lambda_ae", self.lambda_ae),
            ("lambda_fsr", self.lambda_fsr),
            ("lambda_gp", self.lambda_gp),
        ] {
            if !(v >= 0.0) {
                return Err(contract(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    /// The kernel actually used by `mode` (the linear mode ignores the
    /// configured kernel).
    pub fn effective_kernel(&self, kernel: &Kernel) -> Kernel {
        match self.mode {
            Mode::WganLinear => Kernel::Linear,
            _ => kernel.clone(),
        }
    }

    fn effective_estimator(&self) -> Estimator {
        match self.mode {
            Mode::WganLinear => Estimator::Biased,
            _ => self.estimator,
        }
    }
}

/// Values of the critic objective's terms on one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CriticLogs {
    pub objective: f64,
    pub mmd2: f64,
    pub ae_loss: f64,
    /// `Σ_c min(mean f(X)_c − mean f(g(Z))_c, 0)`, before scaling by λ_fsr.
    pub fsr_penalty: f64,
    pub gradient_penalty: f64,
}

/// Critic objective on a real and a generated batch, with its gradient in
/// encoder parameters followed by decoder parameters.
pub fn critic_objective(
    encoder: &Mlp,
    decoder: &Mlp,
    real: &Tensor,
    fake: &Tensor,
    cfg: &TrainConfig,
    kernel: &Kernel,
    gp_rng: &mut Rng,
) -> Result<(CriticLogs, Vec<Tensor>)> {
    let kernel = cfg.effective_kernel(kernel);
    let mut tape = Tape::new();
    let enc = encoder.on_tape(&mut tape, true);
    let dec = decoder.on_tape(&mut tape, true);
    let xv = tape.constant(real.clone());
    let gv = tape.constant(fake.clone());
    let fx = enc.forward(&mut tape, xv)?;
    let fg = enc.forward(&mut tape, gv)?;
    let mmd = mmd2_on_tape(&mut tape, fx, fg, &kernel, cfg.effective_estimator())?;
    let mut logs = CriticLogs {
        mmd2: tape.value(mmd).item(),
        ..CriticLogs::default()
    };
    let mut obj = mmd;

    if cfg.lambda_ae > 0.0 {
        let both = tape.vstack(xv, gv)?;
        let recon = reconstruction_loss(&mut tape, &enc, &dec, both)?;
        logs.ae_loss = tape.value(recon).item();
        let term = tape.scale(recon, -cfg.lambda_ae)?;
        obj = tape.add(obj, term)?;
    }

    let mx = tape.mean_cols(fx)?;
    let mg = tape.mean_cols(fg)?;
    let gap = tape.sub(mx, mg)?;
    let hinge = tape.min_scalar(gap, 0.0)?;
    let fsr = tape.sum(hinge)?;
    logs.fsr_penalty = tape.value(fsr).item();
    if cfg.lambda_fsr > 0.0 {
        let term = tape.scale(fsr, cfg.lambda_fsr)?;
        obj = tape.add(obj, term)?;
    }

    if cfg.lipschitz == Lipschitz::GradientPenalty && cfg.lambda_gp > 0.0 {
        let gp = gradient_penalty(&mut tape, &enc, real, fake, &kernel, gp_rng)?;
        logs.gradient_penalty = tape.value(gp).item();
        let term = tape.scale(gp, -cfg.lambda_gp)?;
        obj = tape.add(obj, term)?;
    }

    logs.objective = tape.value(obj).item();
    let handles: Vec<_> = enc.params().into_iter().chain(dec.params()).collect();
    let mut grads = tape.backward(obj)?;
    let grads = handles.into_iter().map(|h| grads.take(h)).collect();
    Ok((logs, grads))
}

fn finite_or(logs: &CriticLogs, iteration: usize) -> Result<()> {
    let vals = [logs.objective, logs.mmd2, logs.ae_loss, logs.fsr_penalty, logs.gradient_penalty];
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            iteration,
            reason: format!("non-finite critic objective {logs:?}"),
        })
    }
}

/// One ascent step of the critic with the generator frozen.
pub fn critic_step(
    bundle: &mut ModelBundle,
    x: &Tensor,
    z: &Tensor,
    cfg: &TrainConfig,
    kernel: &Kernel,
    rng: &mut Rng,
) -> Result<CriticLogs> {
    if !cfg.mode.has_critic() {
        return Err(contract(format!("{:?} has no critic", cfg.mode)));
    }
    let fake = bundle.generate(z)?;
    let (logs, grads) = critic_objective(&bundle.encoder, &bundle.decoder, x, &fake, cfg, kernel, rng)?;
    finite_or(&logs, 0)?;
    let mut opt = std::mem::replace(&mut bundle.critic_opt, OptimState::new(0.0));
    let result = {
        let mut params = bundle.critic_params_mut();
        rmsprop_step(&mut params, &grads, &mut opt, Direction::Ascend).and_then(|_| {
            if cfg.lipschitz == Lipschitz::Clip {
                clip_params(&mut params, cfg.clip)
            } else {
                Ok(())
            }
        })
    };
    bundle.critic_opt = opt;
    result.map(|_| logs)
}

/// Generator loss on one batch and its gradient in generator parameters.
pub fn generator_objective(
    bundle: &ModelBundle,
    x: &Tensor,
    z: &Tensor,
    cfg: &TrainConfig,
    kernel: &Kernel,
) -> Result<(f64, Vec<Tensor>)> {
    let kernel = cfg.effective_kernel(kernel);
    let mut tape = Tape::new();
    let gen = bundle.generator.on_tape(&mut tape, true);
    let xv = tape.constant(x.clone());
    let zv = tape.constant(z.clone());
    let gz = gen.forward(&mut tape, zv)?;
    let loss = match cfg.mode {
        Mode::GmmnD => mmd2_on_tape(&mut tape, xv, gz, &kernel, cfg.effective_estimator())?,
        Mode::Mmdgan | Mode::GmmnC | Mode::WganLinear => {
            let enc = bundle.encoder.on_tape(&mut tape, false);
            let fx = enc.forward(&mut tape, xv)?;
            let fg = enc.forward(&mut tape, gz)?;
            mmd2_on_tape(&mut tape, fx, fg, &kernel, cfg.effective_estimator())?
        }
    };
    let value = tape.value(loss).item();
    let handles = gen.params();
    let mut grads = tape.backward(loss)?;
    Ok((value, handles.into_iter().map(|h| grads.take(h)).collect()))
}

/// One descent step of the generator; returns the loss before the step.
pub fn generator_step(
    bundle: &mut ModelBundle,
    x: &Tensor,
    z: &Tensor,
    cfg: &TrainConfig,
    kernel: &Kernel,
) -> Result<f64> {
    let (loss, grads) = generator_objective(bundle, x, z, cfg, kernel)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            reason: "non-finite generator loss".into(),
        });
    }
    let ModelBundle {
        generator,
        generator_opt,
        ..
    } = bundle;
    rmsprop_step(&mut generator.params_mut(), &grads, generator_opt, Direction::Descend)?;
    Ok(loss)
}

/// Fits the encoder/decoder pair as a plain autoencoder on `data`.
pub fn pretrain_autoencoder(
    bundle: &mut ModelBundle,
    data: &Tensor,
    iters: usize,
    batch: usize,
    learning_rate: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let mut opt = OptimState::new(learning_rate);
    let mut last = f64::NAN;
    for _ in 0..iters {
        let y = sample_rows(data, batch, rng);
        let mut tape = Tape::new();
        let enc = bundle.encoder.on_tape(&mut tape, true);
        let dec = bundle.decoder.on_tape(&mut tape, true);
        let yv = tape.constant(y);
        let loss = reconstruction_loss(&mut tape, &enc, &dec, yv)?;
        last = tape.value(loss).item();
        let handles: Vec<_> = enc.params().into_iter().chain(dec.params()).collect();
        let mut grads = tape.backward(loss)?;
        let grads: Vec<_> = handles.into_iter().map(|h| grads.take(h)).collect();
        rmsprop_step(&mut bundle.critic_params_mut(), &grads, &mut opt, Direction::Descend)?;
    }
    Ok(last)
}

/// `|M̂²_{k∘f}(X, g(Z)) − M̂²_{k∘(−f)}(X, g(Z))|` where `−f` negates the
/// encoder's final affine layer.
pub fn sign_flip_check(bundle: &ModelBundle, x: &Tensor, z: &Tensor, kernel: &Kernel) -> Result<f64> {
    let fake = bundle.generate(z)?;
    let mut flipped = bundle.encoder.clone();
    flipped.flip_output_sign();
    let a = mmd::mmd2_biased(
        x,
        &fake,
        KernelSpec::Composed {
            inner: kernel,
            encoder: &bundle.encoder,
        },
    )?;
    let b = mmd::mmd2_biased(
        x,
        &fake,
        KernelSpec::Composed {
            inner: kernel,
            encoder: &flipped,
        },
    )?;
    Ok((a.estimate - b.estimate).abs())
}

/// Uniform draws with replacement.
pub fn sample_rows(data: &Tensor, b: usize, rng: &mut Rng) -> Tensor {
    let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.rows())).collect();
    data.select_rows(&idx)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Critic-side MMD² at the last critic step; absent without a critic.
    pub mmd2_critic: Option<f64>,
    pub ae_loss: Option<f64>,
    pub fsr_penalty: Option<f64>,
    pub held_out_mmd2: f64,
    pub secs_per_iter: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str = "iter,mmd2_critic,ae_loss,fsr_penalty,held_out_mmd2,secs_per_iter";

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:?},{:?}\n",
                r.iter,
                opt(r.mmd2_critic),
                opt(r.ae_loss),
                opt(r.fsr_penalty),
                r.held_out_mmd2,
                r.secs_per_iter
            ));
        }
        s
    }

    pub fn held_out(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.held_out_mmd2).collect()
    }

    pub fn iterations(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.iter).collect()
    }
}

/// Shape of the three networks. The decoder mirrors the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub generator_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// Code dimension `h`.
    pub code_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            generator_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            code_dim: 16,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn configs(&self, noise_dim: usize, data_dim: usize) -> (MlpConfig, MlpConfig, MlpConfig) {
        let chain = |first: usize, hidden: &[usize], last: usize| {
            let mut w = vec![first];
            w.extend_from_slice(hidden);
            w.push(last);
            MlpConfig::new(w, self.activation)
        };
        let rev: Vec<usize> = self.critic_hidden.iter().rev().copied().collect();
        (
            chain(noise_dim, &self.generator_hidden, data_dim),
            chain(data_dim, &self.critic_hidden, self.code_dim),
            chain(self.code_dim, &rev, data_dim),
        )
    }
}

pub struct TrainOutcome {
    pub trace: TrainTrace,
    pub bundle: ModelBundle,
    pub held_out: Tensor,
}

/// Fixed-noise held-out evaluation with the configured raw-data kernel.
pub struct HeldOutEvaluator {
    pub reference: Tensor,
    pub noise: Tensor,
    pub kernel: Kernel,
}

impl HeldOutEvaluator {
    pub fn evaluate(&self, bundle: &ModelBundle) -> Result<f64> {
        let g = bundle.generate(&self.noise)?;
        Ok(mmd::mmd2_unbiased(&self.reference, &g, KernelSpec::Plain(&self.kernel))?.estimate)
    }
}

// Stream indices under the run seed.
const STREAM_INIT: u64 = 10;
const STREAM_BATCH: u64 = 11;
const STREAM_NOISE: u64 = 12;
const STREAM_PENALTY: u64 = 13;
const STREAM_EVAL: u64 = 14;

/// Random streams consumed by [`iteration`].
#[derive(Clone, Debug)]
pub struct StepRngs {
    pub batch: Rng,
    pub noise: Rng,
    pub penalty: Rng,
}

impl StepRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            batch: rng::stream(seed, STREAM_BATCH),
            noise: rng::stream(seed, STREAM_NOISE),
            penalty: rng::stream(seed, STREAM_PENALTY),
        }
    }
}

/// One generator iteration of the training loop: `critic_iters` critic
/// steps (when the mode has a critic) followed by one generator step.
/// Returns the logs of the last critic step.
pub fn iteration(
    bundle: &mut ModelBundle,
    train_set: &Tensor,
    cfg: &TrainConfig,
    kernel: &Kernel,
    rngs: &mut StepRngs,
) -> Result<Option<CriticLogs>> {
    let b = cfg.batch_size;
    let mut logs = None;
    if cfg.mode.has_critic() {
        for _ in 0..cfg.critic_iters {
            let x = sample_rows(train_set, b, &mut rngs.batch);
            let z = bundle.noise.sample(b, &mut rngs.noise)?;
            logs = Some(critic_step(bundle, &x, &z, cfg, kernel, &mut rngs.penalty)?);
        }
    }
    let x = sample_rows(train_set, b, &mut rngs.batch);
    let z = bundle.noise.sample(b, &mut rngs.noise)?;
    generator_step(bundle, &x, &z, cfg, kernel)?;
    Ok(logs)
}

/// Full training run. When `out_dir` is given, writes `trace.csv` and
/// `checkpoint.bin`; on divergence the last evaluated parameters are
/// checkpointed before the error is returned.
pub fn train(run: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    run.validate()?;
    let cfg = &run.train;
    let dataset = data::materialize(&run.data)?;
    let (train_set, held_out) = data::split(&run.data, &dataset)?;
    let data_dim = dataset.cols();
    let (gcfg, ecfg, dcfg) = run.model.configs(run.noise.dim, data_dim);
    let seed = cfg.seed;
    let mut bundle = init_model(
        &run.noise,
        &gcfg,
        &ecfg,
        &dcfg,
        cfg.learning_rate,
        &mut rng::stream(seed, STREAM_INIT),
    )?;
    let mut rngs = StepRngs::new(seed);

    let n_eval = run.eval.n_eval.min(held_out.rows());
    if n_eval < 2 {
        return Err(contract("held-out split too small for evaluation"));
    }
    let evaluator = HeldOutEvaluator {
        reference: held_out.select_rows(&(0..n_eval).collect::<Vec<_>>()),
        noise: run.noise.sample(n_eval, &mut rng::stream(seed, STREAM_EVAL))?,
        kernel: run.eval.kernel.clone(),
    };

    if cfg.mode == Mode::GmmnC {
        pretrain_autoencoder(
            &mut bundle,
            &train_set,
            cfg.pretrain_iters,
            cfg.batch_size,
            cfg.pretrain_learning_rate,
            &mut rngs.batch,
        )?;
    }

    let b = cfg.batch_size;
    let mut trace = TrainTrace::default();
    let critic_row = |bundle: &ModelBundle, batch_rng: &mut Rng, noise_rng: &mut Rng, gp_rng: &mut Rng| -> Result<CriticLogs> {
        let x = sample_rows(&train_set, b, batch_rng);
        let z = bundle.noise.sample(b, noise_rng)?;
        let fake = bundle.generate(&z)?;
        Ok(critic_objective(&bundle.encoder, &bundle.decoder, &x, &fake, cfg, &run.kernel, gp_rng)?.0)
    };
    let push_row = |trace: &mut TrainTrace, iter: usize, logs: Option<CriticLogs>, held: f64, secs: f64| {
        trace.rows.push(TraceRow {
            iter,
            mmd2_critic: logs.map(|l| l.mmd2),
            ae_loss: logs.map(|l| l.ae_loss),
            fsr_penalty: logs.map(|l| l.fsr_penalty),
            held_out_mmd2: held,
            secs_per_iter: if cfg.record_wallclock { secs } else { 0.0 },
        });
    };

    let initial_logs = if cfg.mode.has_critic() {
        Some(critic_row(&bundle, &mut rngs.batch, &mut rngs.noise, &mut rngs.penalty)?)
    } else {
        None
    };
    push_row(&mut trace, 0, initial_logs, evaluator.evaluate(&bundle)?, 0.0);

    let mut last_good = bundle.clone();
    let mut clock = Instant::now();
    let mut last_logs = initial_logs;
    for it in 1..=cfg.generator_iters {
        let step = iteration(&mut bundle, &train_set, cfg, &run.kernel, &mut rngs).map(|logs| {
            if logs.is_some() {
                last_logs = logs;
            }
        });
        let step = step.map_err(|e| match e {
            Error::Divergence { reason, .. } => Error::Divergence { iteration: it, reason },
            Error::Numeric { op } => Error::Divergence {
                iteration: it,
                reason: format!("non-finite value in {op}"),
            },
            other => other,
        });
        if let Err(e) = step {
            if let Some(dir) = out_dir {
                checkpoint::save(&dir.join("checkpoint.bin"), &last_good)?;
                std::fs::write(dir.join("trace.csv"), trace.to_csv())?;
            }
            return Err(e);
        }
        if it % cfg.eval_every == 0 || it == cfg.generator_iters {
            let held = evaluator.evaluate(&bundle)?;
            if !held.is_finite() {
                return Err(Error::Divergence {
                    iteration: it,
                    reason: "non-finite held-out MMD²".into(),
                });
            }
            let since = trace.rows.last().map_or(0, |r| r.iter);
            let secs = clock.elapsed().as_secs_f64() / (it - since) as f64;
            push_row(&mut trace, it, last_logs, held, secs);
            last_good = bundle.clone();
            clock = Instant::now();
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("trace.csv"), trace.to_csv())?;
        checkpoint::save(&dir.join("checkpoint.bin"), &bundle)?;
    }
    Ok(TrainOutcome {
        trace,
        bundle,
        held_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NoiseSpec;
    use crate::networks::Dense;

    fn small_bundle(seed: u64) -> ModelBundle {
        let noise = NoiseSpec { dim: 3, ..NoiseSpec::default() };
        let (g, e, d) = ModelConfig {
            generator_hidden: vec![8],
            critic_hidden: vec![8, 8],
            code_dim: 4,
            activation: Activation::Tanh,
        }
        .configs(3, 2);
        init_model(&noise, &g, &e, &d, 1e-3, &mut rng::seeded(seed)).unwrap()
    }

    fn batch(seed: u64, b: usize) -> Tensor {
        data::sample(&data::DatasetSpec::ring(8, 2.0, 0.1), b, &mut rng::seeded(seed)).unwrap()
    }

    #[test]
    fn clipping_bounds_critic_after_step() {
        let mut bundle = small_bundle(1);
        let cfg = TrainConfig {
            lambda_ae: 0.0,
            lambda_fsr: 0.0,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let x = batch(2, 16);
        let z = bundle.noise.sample(16, &mut rng::seeded(3)).unwrap();
        critic_step(&mut bundle, &x, &z, &cfg, &Kernel::default(), &mut rng::seeded(4)).unwrap();
        for p in bundle.encoder.params().into_iter().chain(bundle.decoder.params()) {
            assert!(p.data().iter().all(|v| v.abs() <= 0.01));
        }
    }

    #[test]
    fn hinge_inactive_when_real_codes_dominate() {
        // A one-layer encoder that outputs x₀ + 10 on real data near (2, 0)
        // and the generator pinned at the origin.
        let enc = Mlp::from_layers(
            Activation::Relu,
            vec![Dense {
                weight: Tensor::new(2, 1, vec![1.0, 0.0]).unwrap(),
                bias: Tensor::scalar(0.0),
            }],
        )
        .unwrap();
        let dec = Mlp::from_layers(
            Activation::Relu,
            vec![Dense {
                weight: Tensor::new(1, 2, vec![1.0, 0.0]).unwrap(),
                bias: Tensor::zeros(1, 2),
            }],
        )
        .unwrap();
        let real = Tensor::from_rows(&[[2.0, 0.1], [2.1, -0.1]]).unwrap();
        let fake = Tensor::zeros(2, 2);
        let (logs, _) = critic_objective(&enc, &dec, &real, &fake, &TrainConfig::default(), &Kernel::default(), &mut rng::seeded(0)).unwrap();
        assert_eq!(logs.fsr_penalty, 0.0);
        // reversed roles violate the constraint
        let (logs, _) = critic_objective(&enc, &dec, &fake, &real, &TrainConfig::default(), &Kernel::default(), &mut rng::seeded(0)).unwrap();
        assert!(logs.fsr_penalty < 0.0);
    }

    #[test]
    fn small_ascent_step_increases_mmd() {
        let mut bundle = small_bundle(5);
        let cfg = TrainConfig {
            lambda_ae: 0.0,
            lambda_fsr: 0.0,
            lipschitz: Lipschitz::None,
            learning_rate: 1e-6,
            ..TrainConfig::default()
        };
        bundle.critic_opt = OptimState::new(1e-6);
        let x = batch(6, 32);
        let z = bundle.noise.sample(32, &mut rng::seeded(7)).unwrap();
        let fake = bundle.generate(&z).unwrap();
        let before = critic_objective(&bundle.encoder, &bundle.decoder, &x, &fake, &cfg, &Kernel::default(), &mut rng::seeded(0)).unwrap().0.mmd2;
        critic_step(&mut bundle, &x, &z, &cfg, &Kernel::default(), &mut rng::seeded(0)).unwrap();
        let after = critic_objective(&bundle.encoder, &bundle.decoder, &x, &fake, &cfg, &Kernel::default(), &mut rng::seeded(0)).unwrap().0.mmd2;
        assert!(after >= before, "{after} < {before}");
    }

    #[test]
    fn gmmn_has_no_critic_step() {
        let mut bundle = small_bundle(1);
        let cfg = TrainConfig {
            mode: Mode::GmmnD,
            ..TrainConfig::default()
        };
        let x = batch(1, 4);
        let z = bundle.noise.sample(4, &mut rng::seeded(1)).unwrap();
        assert!(critic_step(&mut bundle, &x, &z, &cfg, &Kernel::default(), &mut rng::seeded(1)).is_err());
    }

    #[test]
    fn gmmn_d_moves_bias_toward_data_mean() {
        // Generator: zero weight, bias only, so every sample equals the bias.
        let gen = Mlp::from_layers(
            Activation::Relu,
            vec![Dense {
                weight: Tensor::zeros(1, 1),
                bias: Tensor::scalar(-1.0),
            }],
        )
        .unwrap();
        let mut bundle = small_bundle(1);
        bundle.noise = NoiseSpec { dim: 1, ..NoiseSpec::default() };
        bundle.generator = gen;
        let cfg = TrainConfig {
            mode: Mode::GmmnD,
            ..TrainConfig::default()
        };
        let x = Tensor::new(4, 1, vec![0.9, 1.1, 1.0, 1.2]).unwrap();
        let z = Tensor::new(4, 1, vec![0.1, -0.3, 0.5, 2.0]).unwrap();
        let k = Kernel::gaussian(1.0);
        let (_, grads) = generator_objective(&bundle, &x, &z, &cfg, &k).unwrap();
        // Finite-difference sign of the bias derivative.
        let loss_at = |b: f64| {
            let mut bb = bundle.clone();
            bb.generator.layers[0].bias = Tensor::scalar(b);
            generator_objective(&bb, &x, &z, &cfg, &k).unwrap().0
        };
        let fd = (loss_at(-1.0 + 1e-6) - loss_at(-1.0 - 1e-6)) / 2e-6;
        assert!(grads[1].item() < 0.0 && fd < 0.0);
        let before = bundle.generator.layers[0].bias.item();
        generator_step(&mut bundle, &x, &z, &cfg, &k).unwrap();
        assert!(bundle.generator.layers[0].bias.item() > before);
    }

    #[test]
    fn linear_mode_loss_is_mean_gap() {
        let bundle = small_bundle(9);
        let cfg = TrainConfig {
            mode: Mode::WganLinear,
            ..TrainConfig::default()
        };
        let x = batch(3, 10);
        let z = bundle.noise.sample(10, &mut rng::seeded(4)).unwrap();
        let (loss, _) = generator_objective(&bundle, &x, &z, &cfg, &Kernel::default()).unwrap();
        let fx = bundle.encoder.forward(&x).unwrap().column_means();
        let fg = bundle.encoder.forward(&bundle.generate(&z).unwrap()).unwrap().column_means();
        let gap = fx.zip_map(&fg, |a, b| (a - b).powi(2)).sum();
        assert!((loss - gap).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_freezes_generator() {
        let mut bundle = small_bundle(2);
        bundle.generator_opt = OptimState::new(0.0);
        let before = bundle.generator.clone();
        let x = batch(3, 8);
        let z = bundle.noise.sample(8, &mut rng::seeded(4)).unwrap();
        generator_step(&mut bundle, &x, &z, &TrainConfig::default(), &Kernel::default()).unwrap();
        assert_eq!(bundle.generator, before);
    }

    #[test]
    fn sign_flip_is_exact_and_involutive() {
        let bundle = small_bundle(3);
        let x = batch(5, 20);
        let z = bundle.noise.sample(20, &mut rng::seeded(6)).unwrap();
        assert!(sign_flip_check(&bundle, &x, &z, &Kernel::default()).unwrap() <= 1e-12);
        let mut twice = bundle.clone();
        twice.encoder.flip_output_sign();
        twice.encoder.flip_output_sign();
        assert_eq!(twice.encoder, bundle.encoder);
    }

    #[test]
    fn trace_csv_layout() {
        let t = TrainTrace {
            rows: vec![TraceRow {
                iter: 0,
                mmd2_critic: None,
                ae_loss: None,
                fsr_penalty: None,
                held_out_mmd2: 0.5,
                secs_per_iter: 0.0,
            }],
        };
        assert_eq!(t.to_csv(), format!("{TRACE_HEADER}\n0,,,,0.5,0.0\n"));
    }
}
