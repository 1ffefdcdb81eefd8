//! Kernel two-sample testing and adversarial kernel learning.
//!
//! The crate provides squared-MMD estimators over fixed and learned
//! (encoder-composed) kernels, a permutation two-sample test, and a small
//! reverse-mode engine that is enough to train MLP generators and critics
//! against those estimators:
//!
//! | module | contents |
//! |--------|----------|
//! | [`tensor`], [`autodiff`], [`optim`] | dense arrays, tape, RMSProp, clipping |
//! | [`kernels`] | Gaussian, mixture-RBF, linear, polynomial kernels; Gram matrices |
//! | [`mmd`] | biased/unbiased estimators, permutation test, moment diagnostic |
//! | [`networks`] | MLPs, model bundle, reconstruction loss, witness gradient penalty |
//! | [`training`] | MMD GAN critic/generator steps, GMMN and linear-kernel baselines |
//! | [`data`] | synthetic samplers, noise, CSV datasets |
//! | [`eval`] | coverage, test power, weak* proxy, timing, trend statistics |
//! | [`config`], [`checkpoint`] | run configuration text and model files |

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod mmd;
pub mod networks;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
