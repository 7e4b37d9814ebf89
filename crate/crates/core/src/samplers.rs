//! Langevin samplers: a shared proposal/accept kernel, plain per-datapoint
//! Langevin dynamics over the latent `z`, and amortized Langevin dynamics
//! over the encoder final layer `Phi`.
//!
//! Every chain draws its proposal normals before the Metropolis uniform on
//! each step, so noise streams line up between sampler variants that share a
//! seed.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::encoder::{AmortizedEncoder, EncoderError};
use crate::linalg::{dgemm_nt, sample_covariance, sample_mean};
use crate::models::{LatentVariableModel, ModelError};
use crate::tensor::{Tensor, TensorError};

pub(crate) const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    BadConfig(&'static str),
    #[error("chain diverged at step {step}")]
    Diverged { step: usize },
    #[error("initial state has non-finite potential")]
    NonFiniteStart,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Step size, Metropolis correction switch, and inverse temperature. The
/// chain targets `exp(-beta U)`.
#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub step_size: f64,
    pub mh_correction: bool,
    pub beta: f64,
}

impl SamplerConfig {
    pub fn new(step_size: f64, mh_correction: bool) -> SamplerConfig {
        SamplerConfig { step_size, mh_correction, beta: 1.0 }
    }

    pub fn with_beta(mut self, beta: f64) -> SamplerConfig {
        self.beta = beta;
        self
    }

    pub(crate) fn validate(&self) -> Result<(), SamplerError> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(SamplerError::BadConfig("step_size must be positive and finite"));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(SamplerError::BadConfig("beta must be positive and finite"));
        }
        Ok(())
    }
}

/// Source of proposal noise and Metropolis uniforms, seedable so runs are
/// reproducible and sampler variants can share streams.
pub trait NoiseSource {
    fn normal_vec(&mut self, n: usize) -> Vec<f64>;
    fn uniform(&mut self) -> f64;
}

pub struct SeededNoise {
    rng: ChaCha8Rng,
}

impl SeededNoise {
    pub fn new(seed: u64) -> SeededNoise {
        SeededNoise { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl NoiseSource for SeededNoise {
    fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }
}

/// One Euler-Maruyama proposal: `pos - step * grad + sqrt(2 step) * noise`.
pub fn langevin_propose(position: &[f64], grad: &[f64], step: f64, noise: &[f64]) -> Vec<f64> {
    debug_assert_eq!(position.len(), grad.len());
    debug_assert_eq!(position.len(), noise.len());
    let sigma = (2.0 * step).sqrt();
    position.iter().zip(grad).zip(noise).map(|((p, g), xi)| p - step * g + sigma * xi).collect()
}

/// Log density (up to the step-dependent constant, identical in both MH
/// directions) of proposing `to` from `from` under the Langevin kernel.
pub fn gaussian_proposal_logdensity(to: &[f64], from: &[f64], grad_from: &[f64], step: f64) -> f64 {
    let mut ss = 0.0;
    for i in 0..to.len() {
        let r = to[i] - from[i] + step * grad_from[i];
        ss += r * r;
    }
    -ss / (4.0 * step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MhOutcome {
    Accepted,
    Rejected,
    /// Forced rejection: the proposal's potential, gradient, or kernel
    /// density came out non-finite.
    RejectedNonFinite,
}

/// Metropolis-Hastings decision from already-computed pieces. `log_u` is the
/// log of the uniform draw.
pub fn mh_accept(
    log_u: f64,
    current: f64,
    proposal: f64,
    logq_forward: f64,
    logq_reverse: f64,
) -> MhOutcome {
    if !proposal.is_finite() || !logq_forward.is_finite() || !logq_reverse.is_finite() {
        return MhOutcome::RejectedNonFinite;
    }
    let log_alpha = current - proposal + logq_reverse - logq_forward;
    if log_u < log_alpha {
        MhOutcome::Accepted
    } else {
        MhOutcome::Rejected
    }
}

/// Anything a chain can run on: a differentiable potential over a flat
/// parameter vector.
pub trait PotentialTarget {
    fn dim(&self) -> usize;
    fn potential_and_grad(&self, position: &[f64]) -> Result<(f64, Vec<f64>), SamplerError>;
}

/// Posterior over `z` for a single observation: `U(x, z)` as a function of
/// `z`.
pub struct ModelPosterior<'a> {
    model: &'a LatentVariableModel,
    x: Tensor,
}

impl<'a> ModelPosterior<'a> {
    pub fn new(
        model: &'a LatentVariableModel,
        x_row: &[f64],
    ) -> Result<ModelPosterior<'a>, SamplerError> {
        let x = Tensor::from_vec(&[1, x_row.len()], x_row.to_vec())?;
        Ok(ModelPosterior { model, x })
    }
}

impl PotentialTarget for ModelPosterior<'_> {
    fn dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn potential_and_grad(&self, position: &[f64]) -> Result<(f64, Vec<f64>), SamplerError> {
        let z = Tensor::param(&[1, position.len()], position.to_vec())?;
        let u = self.model.potential_sum(&self.x, &z)?;
        u.backward_into(std::slice::from_ref(&z))?;
        Ok((u.value(), z.grad().expect("leaf gradient")))
    }
}

/// Potential over the flattened final layer: `V(Phi) = sum_i U(x_i, Phi g_i)`
/// with the feature batch held fixed.
pub struct AmortizedTarget<'a> {
    model: &'a LatentVariableModel,
    features: Tensor,
    x: Tensor,
    latent_dim: usize,
}

impl<'a> AmortizedTarget<'a> {
    pub fn new(
        model: &'a LatentVariableModel,
        features: Tensor,
        x: Tensor,
        latent_dim: usize,
    ) -> AmortizedTarget<'a> {
        AmortizedTarget { model, features: features.detach(), x, latent_dim }
    }

    fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Decodes a flat `Phi` into the latent batch `G Phi^T` without touching
    /// the graph.
    pub fn latents(&self, position: &[f64]) -> Vec<f64> {
        let n = self.features.shape()[0];
        let d = self.feature_dim();
        let mut z = vec![0.0; n * self.latent_dim];
        dgemm_nt(n, d, self.latent_dim, &self.features.data(), position, 0.0, &mut z);
        z
    }
}

impl PotentialTarget for AmortizedTarget<'_> {
    fn dim(&self) -> usize {
        self.latent_dim * self.feature_dim()
    }

    fn potential_and_grad(&self, position: &[f64]) -> Result<(f64, Vec<f64>), SamplerError> {
        let phi = Tensor::param(&[self.latent_dim, self.feature_dim()], position.to_vec())?;
        let z = self.features.matmul_nt(&phi)?;
        let v = self.model.potential_sum(&self.x, &z)?;
        v.backward_into(std::slice::from_ref(&phi))?;
        Ok((v.value(), phi.grad().expect("leaf gradient")))
    }
}

/// Current chain position with its cached raw potential and gradient.
#[derive(Clone)]
pub struct ChainState {
    pub position: Vec<f64>,
    pub potential: f64,
    pub grad: Vec<f64>,
}

impl ChainState {
    pub fn init<T: PotentialTarget>(
        target: &T,
        position: Vec<f64>,
    ) -> Result<ChainState, SamplerError> {
        let (potential, grad) = target.potential_and_grad(&position)?;
        if !potential.is_finite() {
            return Err(SamplerError::NonFiniteStart);
        }
        Ok(ChainState { position, potential, grad })
    }
}

fn scaled(v: &[f64], c: f64) -> Vec<f64> {
    v.iter().map(|x| c * x).collect()
}

fn non_finite_eval(err: &SamplerError) -> bool {
    matches!(
        err,
        SamplerError::Tensor(TensorError::NonFinite { .. })
            | SamplerError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// Advances the chain `steps` steps, invoking `on_step` after each one with
/// the updated state and the step's outcome. Without the Metropolis
/// correction a non-finite proposal or a runaway position is a hard
/// `Diverged` error; with it, such proposals are rejected and the chain
/// continues in place.
pub fn drive_chain<T: PotentialTarget, N: NoiseSource>(
    target: &T,
    state: &mut ChainState,
    steps: usize,
    config: &SamplerConfig,
    noise: &mut N,
    mut on_step: impl FnMut(&ChainState, MhOutcome),
) -> Result<usize, SamplerError> {
    config.validate()?;
    let dim = state.position.len();
    let mut accepted = 0;
    for step in 0..steps {
        let xi = noise.normal_vec(dim);
        let grad_w = scaled(&state.grad, config.beta);
        let proposal = langevin_propose(&state.position, &grad_w, config.step_size, &xi);
        let eval = target.potential_and_grad(&proposal);
        let outcome = if config.mh_correction {
            let log_u = noise.uniform().ln();
            match eval {
                Ok((u_prop, g_prop)) => {
                    let logq_fwd = gaussian_proposal_logdensity(
                        &proposal,
                        &state.position,
                        &grad_w,
                        config.step_size,
                    );
                    let gw_prop = scaled(&g_prop, config.beta);
                    let logq_rev = gaussian_proposal_logdensity(
                        &state.position,
                        &proposal,
                        &gw_prop,
                        config.step_size,
                    );
                    let outcome = mh_accept(
                        log_u,
                        config.beta * state.potential,
                        config.beta * u_prop,
                        logq_fwd,
                        logq_rev,
                    );
                    if outcome == MhOutcome::Accepted {
                        state.position = proposal;
                        state.potential = u_prop;
                        state.grad = g_prop;
                    }
                    outcome
                }
                Err(err) if non_finite_eval(&err) => MhOutcome::RejectedNonFinite,
                Err(err) => return Err(err),
            }
        } else {
            match eval {
                Ok((u_prop, g_prop)) => {
                    state.position = proposal;
                    state.potential = u_prop;
                    state.grad = g_prop;
                    MhOutcome::Accepted
                }
                Err(err) if non_finite_eval(&err) => return Err(SamplerError::Diverged { step }),
                Err(err) => return Err(err),
            }
        };
        if state.position.iter().any(|v| v.abs() > DIVERGENCE_LIMIT) {
            return Err(SamplerError::Diverged { step });
        }
        if outcome == MhOutcome::Accepted {
            accepted += 1;
        }
        on_step(state, outcome);
    }
    Ok(accepted)
}

/// One recorded chain step.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub step: usize,
    pub datapoint_index: usize,
    pub z: Vec<f64>,
    pub accepted: bool,
}

/// Column-ordered record of a chain's visited latents, exportable as CSV.
pub struct SampleStore {
    dim: usize,
    rows: Vec<SampleRow>,
}

impl SampleStore {
    pub fn new(dim: usize) -> SampleStore {
        SampleStore { dim, rows: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, step: usize, datapoint_index: usize, z: &[f64], accepted: bool) {
        assert_eq!(z.len(), self.dim);
        self.rows.push(SampleRow { step, datapoint_index, z: z.to_vec(), accepted });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[SampleRow] {
        &self.rows
    }

    /// Latents after the first `burn_in` rows.
    pub fn tail(&self, burn_in: usize) -> Vec<Vec<f64>> {
        self.rows[burn_in.min(self.rows.len())..].iter().map(|r| r.z.clone()).collect()
    }

    pub fn tail_mean(&self, burn_in: usize) -> Vec<f64> {
        sample_mean(&self.tail(burn_in))
    }

    pub fn tail_covariance(&self, burn_in: usize) -> Vec<f64> {
        sample_covariance(&self.tail(burn_in))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "step,datapoint_index")?;
        for j in 0..self.dim {
            write!(w, ",z_{j}")?;
        }
        writeln!(w, ",accepted")?;
        for row in &self.rows {
            write!(w, "{},{}", row.step, row.datapoint_index)?;
            for v in &row.z {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{}", u8::from(row.accepted))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}

/// Result of a plain Langevin run over `z` for one observation.
pub struct LdRun {
    pub store: SampleStore,
    pub acceptance_rate: f64,
    pub final_state: ChainState,
}

/// Langevin dynamics on `U(x, .)` for a single observation, recording the
/// position after every step (rejected steps repeat the current position).
pub fn run_ld<N: NoiseSource>(
    model: &LatentVariableModel,
    x_row: &[f64],
    init: &[f64],
    steps: usize,
    config: &SamplerConfig,
    noise: &mut N,
    datapoint_index: usize,
) -> Result<LdRun, SamplerError> {
    let target = ModelPosterior::new(model, x_row)?;
    let mut state = ChainState::init(&target, init.to_vec())?;
    let mut store = SampleStore::new(model.latent_dim());
    let mut step = 0;
    let accepted = drive_chain(&target, &mut state, steps, config, noise, |s, outcome| {
        store.push(step, datapoint_index, &s.position, outcome == MhOutcome::Accepted);
        step += 1;
    })?;
    Ok(LdRun { store, acceptance_rate: accepted as f64 / steps.max(1) as f64, final_state: state })
}

/// Result of an amortized run: one sample store per datapoint plus the final
/// `Phi`.
pub struct AldRun {
    pub stores: Vec<SampleStore>,
    pub acceptance_rate: f64,
    pub phi_final: Vec<f64>,
}

/// Amortized Langevin dynamics: a single chain over `Phi` whose every step
/// appends `f(x_i) = Phi g(x_i)` to each datapoint's sample set. Features
/// are computed once up front and held fixed; the encoder's `Phi` is
/// overwritten with the final state.
pub fn run_ald<N: NoiseSource>(
    model: &LatentVariableModel,
    encoder: &AmortizedEncoder,
    x: &Tensor,
    steps: usize,
    config: &SamplerConfig,
    noise: &mut N,
) -> Result<AldRun, SamplerError> {
    let n = x.shape()[0];
    let features = encoder.features(x)?.detach();
    let target = AmortizedTarget::new(model, features, x.clone(), encoder.latent_dim());
    let mut state = ChainState::init(&target, encoder.phi.to_vec())?;
    let d_z = encoder.latent_dim();
    let mut stores: Vec<SampleStore> = (0..n).map(|_| SampleStore::new(d_z)).collect();
    let mut step = 0;
    let accepted = drive_chain(&target, &mut state, steps, config, noise, |s, outcome| {
        let z = target.latents(&s.position);
        let accepted = outcome == MhOutcome::Accepted;
        for (i, store) in stores.iter_mut().enumerate() {
            store.push(step, i, &z[i * d_z..(i + 1) * d_z], accepted);
        }
        step += 1;
    })?;
    encoder.phi.set_data(&state.position)?;
    Ok(AldRun {
        stores,
        acceptance_rate: accepted as f64 / steps.max(1) as f64,
        phi_final: state.position,
    })
}
