//! Posterior sampling by Langevin dynamics over the final layer of an
//! amortized encoder, and the autoencoder trained with it.
//!
//! The library is organized as a stack:
//!
//! - [`tensor`]: reverse-mode automatic differentiation over dense `f64`
//!   tensors (define-by-run tape, scalar roots).
//! - [`nn`]: multilayer perceptrons and layer normalization built on the
//!   tensor ops.
//! - [`models`]: Gaussian priors and the likelihood families
//!   (linear-Gaussian, neural-Gaussian, discretized logistic), combined
//!   into a latent-variable model with a differentiable potential
//!   `U(x, z) = -log p(x, z)`.
//! - [`encoder`]: the amortized encoder `f(x) = Phi g(x)` whose final
//!   linear map `Phi` is the variable the sampler moves, plus feature-rank
//!   diagnostics.
//! - [`samplers`]: Langevin proposals, Metropolis-Hastings correction, and
//!   the chain drivers for latent-space dynamics and for dynamics over
//!   `Phi`.
//! - [`trainers`]: the Langevin autoencoder training loop and the
//!   variational / refined-sample baselines, plus importance-style ELBO
//!   evaluation.
//! - [`oracle`], [`data`], [`config`], [`checkpoint`], [`harness`]:
//!   closed-form and quadrature references, dataset handling, plain-text
//!   experiment configuration, tensor checkpoints, and the experiment
//!   driver behind the `lae` binary.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod nn;
pub mod oracle;
pub mod samplers;
pub mod selftest;
pub mod tensor;
pub mod trainers;
