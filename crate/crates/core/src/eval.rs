//! Evaluation metrics and the experiments built on them.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape};
use crate::config::RunConfig;
use crate::error::{contract, Result};
use crate::kernels::{Kernel, KernelSpec};
use crate::mmd::{self, Estimator};
use crate::networks::{init_model, Mlp, MlpConfig};
use crate::optim::{clip_params, rmsprop_step, Direction, OptimState};
use crate::rng::{self, Rng};
use crate::tensor::{pairwise_sqdist, Tensor};
use crate::training::{self, TrainTrace};

/// Settings for held-out evaluation during and after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fixed raw-data kernel for the held-out unbiased M̂².
    pub kernel: Kernel,
    /// Rows of held-out data (and generated samples) per evaluation.
    pub n_eval: usize,
    pub coverage_radius: f64,
    pub coverage_samples: usize,
    /// Moving-average window over trace rows.
    pub smoothing_window: usize,
    pub power: PowerConfig,
    pub weakstar: WeakstarConfig,
    pub timing: TimingConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::mixture(&[0.1, 0.2, 0.5, 1.0, 2.0]),
            n_eval: 500,
            coverage_radius: 0.25,
            coverage_samples: 2000,
            smoothing_window: 10,
            power: PowerConfig::default(),
            weakstar: WeakstarConfig::default(),
            timing: TimingConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.coverage_radius > 0.0) {
            return Err(contract("coverage_radius must be positive"));
        }
        if self.smoothing_window == 0 {
            return Err(contract("smoothing_window must be at least 1"));
        }
        self.power.validate()?;
        self.weakstar.validate()?;
        self.timing.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Coverage {
    pub covered: usize,
    pub modes: usize,
    /// Share of samples within `radius` of some center.
    pub high_quality: f64,
}

/// A center counts as covered when at least `N/(10M)` of the `N` samples
/// lie within `radius` of it.
pub fn mode_coverage(samples: &Tensor, centers: &Tensor, radius: f64) -> Result<Coverage> {
    if !(radius > 0.0) {
        return Err(contract("coverage radius must be positive"));
    }
    let (n, m) = (samples.rows(), centers.rows());
    let d = pairwise_sqdist(samples, centers)?;
    let r2 = radius * radius;
    let mut counts = vec![0usize; m];
    let mut near = 0usize;
    for i in 0..n {
        let row = d.row(i);
        let mut hit = false;
        for (c, &v) in row.iter().enumerate() {
            if v <= r2 {
                counts[c] += 1;
                hit = true;
            }
        }
        near += hit as usize;
    }
    let need = n as f64 / (10.0 * m as f64);
    Ok(Coverage {
        covered: counts.iter().filter(|&&c| c > 0 && c as f64 >= need).count(),
        modes: m,
        high_quality: if n == 0 { 0.0 } else { near as f64 / n as f64 },
    })
}

/// Trailing moving average; the first `window − 1` points average over what
/// is available.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveTrend {
    pub smoothed: Vec<f64>,
    pub spearman: f64,
}

pub fn curve_correlation(trace: &TrainTrace, window: usize) -> Result<CurveTrend> {
    if trace.rows.is_empty() {
        return Err(contract("trace is empty"));
    }
    if window == 0 {
        return Err(contract("window must be at least 1"));
    }
    let smoothed = moving_average(&trace.held_out(), window);
    let iters: Vec<f64> = trace.iterations().iter().map(|&i| i as f64).collect();
    let spearman = spearman(&smoothed, &iters);
    Ok(CurveTrend { smoothed, spearman })
}

/// Tabular result of an experiment: grid columns followed by metric
/// columns. A `None` cell is a failed measurement and is written as `NA`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
    pub seeds: Vec<u64>,
    pub summary: BTreeMap<String, f64>,
    /// Kept out of the written files so reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    fn new(name: &str, columns: &[&str], seeds: Vec<u64>) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            seeds,
            summary: BTreeMap::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|c| c.map_or_else(|| "NA".to_string(), |v| format!("{v:?}")))
                .collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Writes `<name>.csv` and `<name>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{}.csv", self.name)), self.to_csv())?;
        let json = serde_json::to_string_pretty(self).map_err(|e| contract(e.to_string()))?;
        std::fs::write(dir.join(format!("{}.json", self.name)), json + "\n")?;
        Ok(())
    }
}

/// Small synthetic distributions for the test-power and weak* experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    /// Isotropic Gaussian.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// Equal-weight isotropic Gaussian mixture.
    Mixture { means: Vec<Vec<f64>>, std: f64 },
}

impl Distribution {
    pub fn standard(dim: usize) -> Self {
        Distribution::Gaussian {
            mean: vec![0.0; dim],
            std: 1.0,
        }
    }

    /// `½N((−a,0), s²I) + ½N((a,0), s²I)` with `a² + 2s² = 2`: the same mean
    /// and covariance trace as `N(0, I₂)`.
    pub fn matched_mixture(a: f64) -> Self {
        Distribution::Mixture {
            means: vec![vec![-a, 0.0], vec![a, 0.0]],
            std: ((2.0 - a * a) / 2.0).sqrt(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Distribution::Gaussian { mean, .. } => mean.len(),
            Distribution::Mixture { means, .. } => means.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (std, ok) = match self {
            Distribution::Gaussian { mean, std } => (*std, !mean.is_empty()),
            Distribution::Mixture { means, std } => {
                let d = self.dim();
                (*std, d > 0 && means.iter().all(|m| m.len() == d))
            }
        };
        if !ok || !(std >= 0.0) {
            return Err(contract(format!("invalid distribution {self:?}")));
        }
        Ok(())
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Tensor {
        let d = self.dim();
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            let (mean, std) = match self {
                Distribution::Gaussian { mean, std } => (mean, *std),
                Distribution::Mixture { means, std } => (&means[rand::Rng::random_range(rng, 0..means.len())], *std),
            };
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(rng);
                *o = mean[j] + std * e;
            }
        }
        out
    }
}

/// An encoder trained to maximize `M̂²` between two samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelLearning {
    pub hidden: Vec<usize>,
    pub code_dim: usize,
    pub activation: Activation,
    pub steps: usize,
    pub learning_rate: f64,
    /// Weight clipping bound; 0 disables clipping.
    pub clip: f64,
    pub estimator: Estimator,
}

impl Default for KernelLearning {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            code_dim: 8,
            activation: Activation::Relu,
            steps: 100,
            learning_rate: 0.001,
            clip: 0.01,
            estimator: Estimator::Biased,
        }
    }
}

impl KernelLearning {
    pub fn encoder_config(&self, input_dim: usize) -> MlpConfig {
        let mut w = vec![input_dim];
        w.extend_from_slice(&self.hidden);
        w.push(self.code_dim);
        MlpConfig::new(w, self.activation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.code_dim == 0 || !(self.learning_rate >= 0.0) || !(self.clip >= 0.0) {
            return Err(contract("kernel learning needs code_dim ≥ 1, learning_rate ≥ 0, clip ≥ 0"));
        }
        Ok(())
    }
}

/// Gradient ascent on `M̂²_{k∘f}(x, y)` over the encoder parameters with
/// RMSProp, clipping after every step.
pub fn learn_encoder(x: &Tensor, y: &Tensor, init: &Mlp, kernel: &Kernel, cfg: &KernelLearning) -> Result<Mlp> {
    let mut enc = init.clone();
    let mut opt = OptimState::new(cfg.learning_rate);
    if cfg.clip > 0.0 {
        clip_params(&mut enc.params_mut(), cfg.clip)?;
    }
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let vars = enc.on_tape(&mut tape, true);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let fx = vars.forward(&mut tape, xv)?;
        let fy = vars.forward(&mut tape, yv)?;
        let loss = mmd::mmd2_on_tape(&mut tape, fx, fy, kernel, cfg.estimator)?;
        let handles = vars.params();
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = handles.into_iter().map(|h| grads.take(h)).collect();
        let mut params = enc.params_mut();
        rmsprop_step(&mut params, &grads, &mut opt, Direction::Ascend)?;
        if cfg.clip > 0.0 {
            clip_params(&mut params, cfg.clip)?;
        }
    }
    Ok(enc)
}

fn parallel_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerConfig {
    pub p: Distribution,
    pub q: Distribution,
    /// Test sample size per distribution; both arms test on these points.
    pub n: usize,
    /// Additional points per distribution used only for kernel learning.
    pub n_train: usize,
    pub trials: usize,
    pub alpha: f64,
    pub n_permutations: usize,
    pub fixed_kernel: Kernel,
    /// Base kernel on the learned codes.
    pub code_kernel: Kernel,
    pub learn: KernelLearning,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            p: Distribution::standard(2),
            q: Distribution::matched_mixture(1.0),
            n: 100,
            n_train: 100,
            trials: 100,
            alpha: 0.05,
            n_permutations: 200,
            fixed_kernel: Kernel::default(),
            code_kernel: Kernel::default(),
            // A test kernel needs no Lipschitz control, only bounded weights.
            learn: KernelLearning {
                activation: Activation::Tanh,
                clip: 1.0,
                ..KernelLearning::default()
            },
            seed: 3,
        }
    }
}

impl PowerConfig {
    pub fn validate(&self) -> Result<()> {
        self.p.validate()?;
        self.q.validate()?;
        if self.p.dim() != self.q.dim() {
            return Err(contract("P and Q must have the same dimension"));
        }
        if self.trials < 50 {
            return Err(contract(format!("power experiment needs at least 50 trials, got {}", self.trials)));
        }
        if self.n < 2 || self.n_train < 2 {
            return Err(contract("power experiment needs at least 2 points per split"));
        }
        self.fixed_kernel.validate()?;
        self.code_kernel.validate()?;
        self.learn.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PowerResult {
    pub fixed_power: f64,
    pub learned_power: f64,
}

/// Rejection rates of the fixed-kernel and learned-kernel permutation tests.
/// Each trial draws fresh training and test samples; the learned kernel never
/// sees the test points.
pub fn power_experiment(cfg: &PowerConfig) -> Result<(PowerResult, ExperimentReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let enc_cfg = cfg.learn.encoder_config(cfg.p.dim());
    let trial = |t: usize| -> Result<[f64; 5]> {
        let mut r = rng::stream(cfg.seed, t as u64);
        let x_tr = cfg.p.sample(cfg.n_train, &mut r);
        let y_tr = cfg.q.sample(cfg.n_train, &mut r);
        let x_te = cfg.p.sample(cfg.n, &mut r);
        let y_te = cfg.q.sample(cfg.n, &mut r);
        let init = Mlp::init(&enc_cfg, &mut r)?;
        let test_seed = rng::derive_seed(cfg.seed, 1_000_000 + t as u64);
        let fixed = mmd::permutation_test(&x_te, &y_te, KernelSpec::Plain(&cfg.fixed_kernel), cfg.alpha, cfg.n_permutations, test_seed)?;
        let enc = learn_encoder(&x_tr, &y_tr, &init, &cfg.code_kernel, &cfg.learn)?;
        let spec = KernelSpec::Composed {
            inner: &cfg.code_kernel,
            encoder: &enc,
        };
        let learned = mmd::permutation_test(&x_te, &y_te, spec, cfg.alpha, cfg.n_permutations, test_seed)?;
        Ok([
            t as f64,
            fixed.reject as u8 as f64,
            learned.reject as u8 as f64,
            fixed.p_value,
            learned.p_value,
        ])
    };
    let results = parallel_map(cfg.trials, trial);
    let mut report = ExperimentReport::new(
        "power",
        &["trial", "fixed_reject", "learned_reject", "fixed_p_value", "learned_p_value"],
        vec![cfg.seed],
    );
    let (mut fixed, mut learned, mut ok) = (0.0, 0.0, 0usize);
    for (t, r) in results.into_iter().enumerate() {
        match r {
            Ok(row) => {
                fixed += row[1];
                learned += row[2];
                ok += 1;
                report.rows.push(row.iter().map(|&v| Some(v)).collect());
            }
            Err(_) => report.rows.push(vec![Some(t as f64), None, None, None, None]),
        }
    }
    if ok == 0 {
        return Err(contract("every power trial failed"));
    }
    let res = PowerResult {
        fixed_power: fixed / ok as f64,
        learned_power: learned / ok as f64,
    };
    report.summary.insert("fixed_power".into(), res.fixed_power);
    report.summary.insert("learned_power".into(), res.learned_power);
    report.summary.insert("completed_trials".into(), ok as f64);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((res, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakstarConfig {
    /// Offset of the first alternative; later ones halve it.
    pub mu0: Vec<f64>,
    pub length: usize,
    /// Points per distribution in each of the learning and evaluation splits.
    pub n: usize,
    pub kernel: Kernel,
    pub learn: KernelLearning,
    /// Permutations for the null spread at the `P = Q` endpoint.
    pub n_permutations: usize,
    pub seed: u64,
}

impl Default for WeakstarConfig {
    fn default() -> Self {
        Self {
            mu0: vec![4.0, 0.0],
            length: 5,
            n: 400,
            kernel: Kernel::default(),
            learn: KernelLearning::default(),
            n_permutations: 200,
            seed: 5,
        }
    }
}

impl WeakstarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length < 3 {
            return Err(contract(format!("weak* curve needs length ≥ 3, got {}", self.length)));
        }
        if self.mu0.is_empty() || self.n < 2 {
            return Err(contract("weak* experiment needs a non-empty offset and n ≥ 2"));
        }
        self.kernel.validate()?;
        self.learn.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeakstarResult {
    pub offsets: Vec<f64>,
    pub values: Vec<f64>,
    /// Value and permutation-null standard deviation at `P = Q`.
    pub null_value: f64,
    pub null_std: f64,
}

/// `max_f M̂²(P_X, P_n)` along `P_n = N(µ_0/2ⁿ, I)` with target
/// `P_X = N(0, I)`. All alternatives share the same base draws (shifted), and
/// every encoder starts from the same initialization; values are measured on
/// a split disjoint from the one used for learning.
pub fn weakstar_experiment(cfg: &WeakstarConfig) -> Result<(WeakstarResult, ExperimentReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let d = cfg.mu0.len();
    let mut r = rng::stream(cfg.seed, 0);
    let target = Distribution::standard(d);
    let x_learn = target.sample(cfg.n, &mut r);
    let x_eval = target.sample(cfg.n, &mut r);
    let e_learn = target.sample(cfg.n, &mut r);
    let e_eval = target.sample(cfg.n, &mut r);
    let init = Mlp::init(&cfg.learn.encoder_config(d), &mut rng::stream(cfg.seed, 1))?;
    let shift = |base: &Tensor, scale: f64| {
        Tensor::from_fn(base.rows(), d, |i, j| base.get(i, j) + scale * cfg.mu0[j])
    };
    let value_at = |scale: f64| -> Result<(f64, Mlp)> {
        let enc = learn_encoder(&x_learn, &shift(&e_learn, scale), &init, &cfg.kernel, &cfg.learn)?;
        let spec = KernelSpec::Composed {
            inner: &cfg.kernel,
            encoder: &enc,
        };
        Ok((mmd::mmd2_unbiased(&x_eval, &shift(&e_eval, scale), spec)?.estimate, enc))
    };
    let norm0 = cfg.mu0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cells = parallel_map(cfg.length + 1, |k| {
        if k < cfg.length {
            value_at(0.5f64.powi(k as i32)).map(|(v, _)| (v, f64::NAN))
        } else {
            let (v, enc) = value_at(0.0)?;
            let spec = KernelSpec::Composed {
                inner: &cfg.kernel,
                encoder: &enc,
            };
            let t = mmd::permutation_test(&x_eval, &e_eval, spec, 0.05, cfg.n_permutations, rng::derive_seed(cfg.seed, 2))?;
            Ok((v, t.null_std))
        }
    });
    let mut report = ExperimentReport::new("weakstar", &["n", "offset_norm", "max_mmd2"], vec![cfg.seed]);
    let mut values = Vec::new();
    let mut offsets = Vec::new();
    let (mut null_value, mut null_std) = (f64::NAN, f64::NAN);
    for (k, cell) in cells.into_iter().enumerate() {
        let offset = if k < cfg.length { norm0 * 0.5f64.powi(k as i32) } else { 0.0 };
        let cell = cell.ok();
        if k < cfg.length {
            report.rows.push(vec![Some(k as f64), Some(offset), cell.map(|c| c.0)]);
            values.push(cell.map_or(f64::NAN, |c| c.0));
            offsets.push(offset);
        } else if let Some((v, s)) = cell {
            null_value = v;
            null_std = s;
        }
    }
    report.summary.insert("null_value".into(), null_value);
    report.summary.insert("null_std".into(), null_std);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((
        WeakstarResult {
            offsets,
            values,
            null_value,
            null_std,
        },
        report,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub batch_sizes: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            batch_sizes: vec![16, 64, 256, 1024],
            repetitions: 5,
            seed: 9,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.iter().any(|&b| b < 2) || self.batch_sizes.is_empty() {
            return Err(contract("every batch size must be at least 2"));
        }
        if self.repetitions == 0 {
            return Err(contract("timing needs at least one repetition"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingResult {
    pub batch_sizes: Vec<usize>,
    /// Median seconds per critic step plus generator step.
    pub seconds: Vec<f64>,
    /// Least-squares slope of `ln t` against `ln B`.
    pub exponent: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Least-squares slope of `y` on `x`.
pub fn fitted_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Median wall-clock of one critic step plus one generator step of the
/// model described by `run`, at each batch size. Runs sequentially so
/// measurements do not contend with each other.
pub fn timing_bench(run: &RunConfig, cfg: &TimingConfig, kernel: &Kernel) -> Result<(TimingResult, ExperimentReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let data_dim = run.data.centers().map_or(2, |c| c.cols());
    let (g, e, d) = run.model.configs(run.noise.dim, data_dim);
    let mut seconds = Vec::new();
    let mut train = run.train.clone();
    train.mode = training::Mode::Mmdgan;
    for &b in &cfg.batch_sizes {
        let mut r = rng::stream(cfg.seed, b as u64);
        let mut bundle = init_model(&run.noise, &g, &e, &d, train.learning_rate, &mut r)?;
        let x = crate::data::sample(&run.data, b, &mut r)?;
        let z = bundle.noise.sample(b, &mut r)?;
        let mut times = Vec::with_capacity(cfg.repetitions);
        // One untimed warm-up iteration.
        for rep in 0..=cfg.repetitions {
            let t = Instant::now();
            training::critic_step(&mut bundle, &x, &z, &train, kernel, &mut r)?;
            training::generator_step(&mut bundle, &x, &z, &train, kernel)?;
            if rep > 0 {
                times.push(t.elapsed().as_secs_f64());
            }
        }
        seconds.push(median(&mut times));
    }
    let lx: Vec<f64> = cfg.batch_sizes.iter().map(|&b| (b as f64).ln()).collect();
    let ly: Vec<f64> = seconds.iter().map(|s| s.ln()).collect();
    let exponent = if cfg.batch_sizes.len() >= 2 { fitted_slope(&lx, &ly) } else { f64::NAN };
    let mut report = ExperimentReport::new("timing", &["batch_size", "secs_per_iter"], vec![cfg.seed]);
    for (&b, &s) in cfg.batch_sizes.iter().zip(&seconds) {
        report.rows.push(vec![Some(b as f64), Some(s)]);
    }
    report.summary.insert("exponent".into(), exponent);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((
        TimingResult {
            batch_sizes: cfg.batch_sizes.clone(),
            seconds,
            exponent,
        },
        report,
    ))
}

/// Mode coverage of `count` generated samples at several radii around the
/// dataset's centers.
pub fn coverage_report(bundle: &crate::networks::ModelBundle, run: &RunConfig, radii: &[f64]) -> Result<ExperimentReport> {
    let centers = run
        .data
        .centers()
        .ok_or_else(|| contract("coverage needs a synthetic source with known centers"))?;
    let z = bundle.noise.sample(run.eval.coverage_samples, &mut rng::stream(run.train.seed, 20))?;
    let g = bundle.generate(&z)?;
    let mut report = ExperimentReport::new("coverage", &["radius", "covered", "modes", "high_quality"], vec![run.train.seed]);
    for &radius in radii {
        let c = mode_coverage(&g, &centers, radius)?;
        report.rows.push(vec![Some(radius), Some(c.covered as f64), Some(c.modes as f64), Some(c.high_quality)]);
        if radius == run.eval.coverage_radius {
            report.summary.insert("covered".into(), c.covered as f64);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ring_centers;
    use crate::training::TraceRow;

    fn trace(vals: &[f64]) -> TrainTrace {
        TrainTrace {
            rows: vals
                .iter()
                .enumerate()
                .map(|(i, &v)| TraceRow {
                    iter: i * 100,
                    mmd2_critic: None,
                    ae_loss: None,
                    fsr_penalty: None,
                    held_out_mmd2: v,
                    secs_per_iter: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn coverage_at_centers() {
        let c = ring_centers(8, 2.0);
        let cov = mode_coverage(&c, &c, 0.1).unwrap();
        assert_eq!((cov.covered, cov.high_quality), (8, 1.0));
    }

    #[test]
    fn coverage_detects_collapse() {
        let c = ring_centers(8, 2.0);
        let one = c.select_rows(&[3; 50]);
        assert_eq!(mode_coverage(&one, &c, 0.1).unwrap().covered, 1);
        assert!(mode_coverage(&one, &c, 0.0).is_err());
    }

    #[test]
    fn coverage_threshold_is_tenth_of_uniform_share() {
        // 80 samples over 8 modes: a mode needs one sample.
        let c = ring_centers(8, 2.0);
        let mut idx = vec![0usize; 79];
        idx.push(5);
        let cov = mode_coverage(&c.select_rows(&idx), &c, 0.1).unwrap();
        assert_eq!(cov.covered, 2);
        // 160 samples: a single stray sample no longer counts.
        let mut idx = vec![0usize; 159];
        idx.push(5);
        assert_eq!(mode_coverage(&c.select_rows(&idx), &c, 0.1).unwrap().covered, 1);
    }

    #[test]
    fn spearman_limits() {
        let dec = curve_correlation(&trace(&[5.0, 4.0, 3.0, 2.5, 1.0]), 1).unwrap();
        assert!((dec.spearman + 1.0).abs() < 1e-15);
        let flat = curve_correlation(&trace(&[2.0; 6]), 3).unwrap();
        assert_eq!(flat.spearman, 0.0);
        assert!(curve_correlation(&trace(&[]), 3).is_err());
    }

    #[test]
    fn moving_average_values() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn tied_ranks_averaged() {
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }
}
