//! Fully connected generator, encoder and decoder networks.

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::data::NoiseSpec;
use crate::error::{contract, Error, Result};
use crate::kernels::Kernel;
use crate::optim::OptimState;
use crate::rng::Rng;
use crate::tensor::{matmul_nn, Tensor};

/// Layer widths from input to output. The last layer is always affine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpConfig {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        Self { widths, activation }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(contract("an MLP needs at least one layer"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(contract(format!("layer widths must be ≥ 1, got {:?}", self.widths)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `in × out`
    pub weight: Tensor,
    /// `1 × out`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub activation: Activation,
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(cfg: &MlpConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-s, s).expect("finite bound");
                let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
                Dense {
                    weight: Tensor::new(fan_in, fan_out, data).expect("sized"),
                    bias: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self {
            activation: cfg.activation,
            layers,
        })
    }

    pub fn from_layers(activation: Activation, layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(contract("an MLP needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].weight.cols() != w[1].weight.rows() {
                return Err(contract("consecutive layer widths disagree"));
            }
        }
        for l in &layers {
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(contract("bias must be a 1×out row"));
            }
        }
        Ok(Self { activation, layers })
    }

    pub fn config(&self) -> MlpConfig {
        let mut widths = vec![self.input_dim()];
        widths.extend(self.layers.iter().map(|l| l.weight.cols()));
        MlpConfig::new(widths, self.activation)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in declaration order: `w₀, b₀, w₁, b₁, …`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "mlp forward",
                left: x.shape(),
                right: self.layers[0].weight.shape(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut a = matmul_nn(&h, &l.weight);
            let b = l.bias.data();
            for r in 0..a.rows() {
                for (v, bv) in a.row_mut(r).iter_mut().zip(b) {
                    *v += bv;
                }
            }
            if i < last {
                let act = self.activation;
                a.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            h = a;
        }
        Ok(h)
    }

    /// Negates the final affine layer, so the network computes `−f`.
    pub fn flip_output_sign(&mut self) {
        let l = self.layers.last_mut().unwrap();
        l.weight.data_mut().iter_mut().for_each(|v| *v = -*v);
        l.bias.data_mut().iter_mut().for_each(|v| *v = -*v);
    }

    /// Puts the parameters on a tape; `trainable` controls gradient tracking.
    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (w, b) = if trainable {
                (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
            } else {
                (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
            };
            weights.push(w);
            biases.push(b);
        }
        MlpVars {
            activation: self.activation,
            weights,
            biases,
        }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub activation: Activation,
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl MlpVars {
    /// Parameter handles in the same order as [`Mlp::params`].
    pub fn params(&self) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, x)?.0)
    }

    /// Forward pass that also returns every hidden pre-activation, which
    /// [`MlpVars::input_vjp`] needs.
    pub fn forward_traced(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let last = self.weights.len() - 1;
        let mut h = x;
        let mut pre = Vec::with_capacity(last);
        for (i, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = tape.matmul(h, w)?;
            let a = tape.add(z, b)?;
            h = if i < last {
                pre.push(a);
                tape.activation(a, self.activation)?
            } else {
                a
            };
        }
        Ok((h, pre))
    }

    /// Row-wise `J_f(x)ᵀ v` built from tape primitives, so the result stays
    /// differentiable in the parameters.
    pub fn input_vjp(&self, tape: &mut Tape, preacts: &[Var], v: Var) -> Result<Var> {
        let mut delta = v;
        for i in (0..self.weights.len()).rev() {
            let wt = tape.transpose(self.weights[i])?;
            delta = tape.matmul(delta, wt)?;
            if i > 0 {
                let d = tape.activation_derivative(preacts[i - 1], self.activation)?;
                delta = tape.mul(delta, d)?;
            }
        }
        Ok(delta)
    }
}

/// Generator, critic encoder/decoder and their optimizer states.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub noise: NoiseSpec,
    pub generator: Mlp,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub generator_opt: OptimState,
    pub critic_opt: OptimState,
}

impl ModelBundle {
    pub fn data_dim(&self) -> usize {
        self.generator.output_dim()
    }

    pub fn code_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        self.generator.forward(z)
    }

    pub fn critic_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }
}

/// Builds a consistent bundle. All three networks draw from one seeded
/// stream in the order generator, encoder, decoder.
pub fn init_model(
    noise: &NoiseSpec,
    gen_cfg: &MlpConfig,
    enc_cfg: &MlpConfig,
    dec_cfg: &MlpConfig,
    learning_rate: f64,
    rng: &mut Rng,
) -> Result<ModelBundle> {
    for c in [gen_cfg, enc_cfg, dec_cfg] {
        c.validate()?;
    }
    let first = |c: &MlpConfig| c.widths[0];
    let last = |c: &MlpConfig| *c.widths.last().unwrap();
    if first(gen_cfg) != noise.dim {
        return Err(contract("generator input must equal the noise dimension"));
    }
    if last(gen_cfg) != first(enc_cfg) {
        return Err(contract("generator output must equal the encoder input (data dimension)"));
    }
    if last(enc_cfg) != first(dec_cfg) {
        return Err(contract("encoder output must equal the decoder input (code dimension)"));
    }
    if last(dec_cfg) != first(enc_cfg) {
        return Err(contract("decoder output must equal the data dimension"));
    }
    Ok(ModelBundle {
        noise: noise.clone(),
        generator: Mlp::init(gen_cfg, rng)?,
        encoder: Mlp::init(enc_cfg, rng)?,
        decoder: Mlp::init(dec_cfg, rng)?,
        generator_opt: OptimState::new(learning_rate),
        critic_opt: OptimState::new(learning_rate),
    })
}

/// Mean squared reconstruction error `mean_r ‖y_r − dec(enc(y_r))‖²`.
pub fn reconstruction_loss(tape: &mut Tape, encoder: &MlpVars, decoder: &MlpVars, y: Var) -> Result<Var> {
    let code = encoder.forward(tape, y)?;
    let recon = decoder.forward(tape, code)?;
    if tape.shape(recon) != tape.shape(y) {
        return Err(Error::Dimension {
            op: "reconstruction_loss",
            left: tape.shape(recon),
            right: tape.shape(y),
        });
    }
    let diff = tape.sub(y, recon)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / tape.shape(y).0 as f64)
}

/// Gradient of the empirical witness `w(u) = mean_i k(u, a_i) − mean_j k(u, c_j)`
/// with respect to `u`, one row per row of `u`.
pub(crate) fn witness_code_gradient(
    tape: &mut Tape,
    kernel: &Kernel,
    u: Var,
    a: Var,
    c: Var,
) -> Result<Var> {
    let (n, m) = (tape.shape(a).0 as f64, tape.shape(c).0 as f64);
    match kernel {
        Kernel::Linear => {
            let ma = tape.mean_cols(a)?;
            let mc = tape.mean_cols(c)?;
            let diff = tape.sub(ma, mc)?;
            let zeros = tape.scale(u, 0.0)?;
            tape.add(zeros, diff)
        }
        Kernel::Polynomial { degree, offset } => {
            // ∇_u (o + uᵀa)^p = p (o + uᵀa)^(p−1) a
            let side = |tape: &mut Tape, pts: Var, count: f64| -> Result<Var> {
                let pt = tape.transpose(pts)?;
                let dot = tape.matmul(u, pt)?;
                let base = tape.add_scalar(dot, *offset)?;
                let mut pw = tape.scale(base, 0.0)?;
                pw = tape.add_scalar(pw, 1.0)?;
                for _ in 1..*degree {
                    pw = tape.mul(pw, base)?;
                }
                let weighted = tape.scale(pw, *degree as f64 / count)?;
                tape.matmul(weighted, pts)
            };
            let ga = side(tape, a, n)?;
            let gc = side(tape, c, m)?;
            tape.sub(ga, gc)
        }
        k => {
            // ∇_u exp(−γ‖u−a‖²) = −2γ (u − a) exp(−γ‖u−a‖²)
            let gammas = k.gammas().unwrap();
            let mut total: Option<Var> = None;
            for g in gammas {
                let side = |tape: &mut Tape, pts: Var, count: f64| -> Result<Var> {
                    let d = tape.pairwise_sqdist(u, pts)?;
                    let sd = tape.scale(d, -g)?;
                    let kq = tape.exp(sd)?;
                    let rs = tape.sum_rows(kq)?;
                    let ur = tape.mul(u, rs)?;
                    let kp = tape.matmul(kq, pts)?;
                    let diff = tape.sub(ur, kp)?;
                    tape.scale(diff, -2.0 * g / count)
                };
                let ga = side(tape, a, n)?;
                let gc = side(tape, c, m)?;
                let term = tape.sub(ga, gc)?;
                total = Some(match total {
                    None => term,
                    Some(t) => tape.add(t, term)?,
                });
            }
            Ok(total.expect("validated kernels have a bandwidth"))
        }
    }
}

/// Penalty `mean_r (‖∇_x w(x̃_r)‖ − 1)²` at random interpolates
/// `x̃ = u·x_real + (1−u)·x_fake`, where `w` is the witness of the composed
/// kernel on the current batch. Differentiable in the encoder parameters.
pub fn gradient_penalty(
    tape: &mut Tape,
    encoder: &MlpVars,
    real: &Tensor,
    fake: &Tensor,
    kernel: &Kernel,
    rng: &mut Rng,
) -> Result<Var> {
    if real.shape() != fake.shape() {
        return Err(Error::Dimension {
            op: "gradient_penalty",
            left: real.shape(),
            right: fake.shape(),
        });
    }
    let weights: Vec<f64> = (0..real.rows()).map(|_| rng.random::<f64>()).collect();
    let interp = Tensor::from_fn(real.rows(), real.cols(), |i, j| {
        weights[i] * real.get(i, j) + (1.0 - weights[i]) * fake.get(i, j)
    });
    penalty_at(tape, encoder, real, fake, &interp, kernel)
}

/// [`gradient_penalty`] at caller-chosen evaluation points.
pub fn penalty_at(
    tape: &mut Tape,
    encoder: &MlpVars,
    real: &Tensor,
    fake: &Tensor,
    points: &Tensor,
    kernel: &Kernel,
) -> Result<Var> {
    kernel.validate()?;
    let xr = tape.constant(real.clone());
    let xf = tape.constant(fake.clone());
    let xt = tape.constant(points.clone());
    let a = encoder.forward(tape, xr)?;
    let c = encoder.forward(tape, xf)?;
    let (u, pre) = encoder.forward_traced(tape, xt)?;
    let gu = witness_code_gradient(tape, kernel, u, a, c)?;
    let gx = encoder.input_vjp(tape, &pre, gu)?;
    let sq = tape.square(gx)?;
    let rows = tape.sum_rows(sq)?;
    // Offset keeps the square root differentiable at a zero gradient.
    let rows = tape.add_scalar(rows, 1e-12)?;
    let norms = tape.sqrt(rows)?;
    let dev = tape.add_scalar(norms, -1.0)?;
    let dev2 = tape.square(dev)?;
    tape.mean(dev2)
}
