//! Training loops: the Langevin autoencoder, a reparameterized VAE
//! baseline, the warm-started Langevin baseline, and a held-out ELBO
//! evaluator.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoder::{AmortizedEncoder, EncoderError};
use crate::models::{LatentVariableModel, ModelError, LN_2PI};
use crate::samplers::{
    gaussian_proposal_logdensity, langevin_propose, mh_accept, AmortizedTarget, MhOutcome,
    NoiseSource, PotentialTarget, SamplerConfig, SamplerError, SeededNoise, DIVERGENCE_LIMIT,
};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid trainer configuration: {0}")]
    BadConfig(&'static str),
    #[error("proposal standard deviation {0} is too small to evaluate a bound")]
    DegenerateSigma(f64),
    #[error("{skipped} of {total} bound terms were non-finite")]
    NonFiniteElbo { skipped: usize, total: usize },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Whether the outer update differentiates the time average of the inner
/// potentials or only the final one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradEstimator {
    TimeAveraged,
    FinalSample,
}

/// Gradient-descent update rule over an ordered parameter list. Adam keys
/// its moments by position, so pass the same list every step.
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, t: u64, moments: Vec<(Vec<f64>, Vec<f64>)> },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Optimizer {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Optimizer {
        Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: Vec::new() }
    }

    /// Applies one update from the parameters' accumulated gradients;
    /// parameters without a gradient are left alone. Gradients are not
    /// cleared.
    pub fn step(&mut self, params: &[Tensor]) -> Result<(), TrainerError> {
        match self {
            Optimizer::Sgd { lr } => {
                for p in params {
                    if let Some(g) = p.grad() {
                        let mut data = p.to_vec();
                        for (d, gv) in data.iter_mut().zip(&g) {
                            *d -= *lr * gv;
                        }
                        p.set_data(&data)?;
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, t, moments } => {
                while moments.len() < params.len() {
                    let len = params[moments.len()].len();
                    moments.push((vec![0.0; len], vec![0.0; len]));
                }
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for (p, (m, v)) in params.iter().zip(moments.iter_mut()) {
                    let Some(g) = p.grad() else { continue };
                    let mut data = p.to_vec();
                    for i in 0..data.len() {
                        m[i] = *beta1 * m[i] + (1.0 - *beta1) * g[i];
                        v[i] = *beta2 * v[i] + (1.0 - *beta2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        data[i] -= *lr * m_hat / (v_hat.sqrt() + *eps);
                    }
                    p.set_data(&data)?;
                }
            }
        }
        Ok(())
    }
}

/// Shared outer-loop settings: minibatch size, number of optimizer steps,
/// and the seed that drives both batching and dynamics noise.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub train_steps: usize,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self, n: usize) -> Result<(), TrainerError> {
        if self.batch_size == 0 {
            return Err(TrainerError::BadConfig("batch_size must be positive"));
        }
        if n == 0 {
            return Err(TrainerError::BadConfig("dataset is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LaeConfig {
    pub train: TrainConfig,
    /// Inner chain length T.
    pub inner_steps: usize,
    pub inner: SamplerConfig,
    pub estimator: GradEstimator,
}

#[derive(Debug, Clone, Copy)]
pub struct HoffmanConfig {
    pub train: TrainConfig,
    /// Unadjusted refinement steps applied to the encoder draw before the
    /// likelihood update; zero reduces the method to the plain VAE.
    pub ld_steps: usize,
    pub ld_step_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRow {
    pub step: usize,
    pub objective: f64,
    pub acceptance: f64,
}

/// Per-step training log, exportable as CSV.
#[derive(Default)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "step,objective,acceptance")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.step, r.objective, r.acceptance)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.rows.last().map(|r| r.objective)
    }
}

/// Uniform minibatch indices; a batch covering the whole dataset is the
/// identity selection and consumes no randomness.
fn minibatch_indices(rng: &mut ChaCha8Rng, n: usize, batch_size: usize) -> Vec<usize> {
    if batch_size >= n {
        (0..n).collect()
    } else {
        (0..batch_size).map(|_| rng.gen_range(0..n)).collect()
    }
}

fn gather_rows(data: &Tensor, idx: &[usize]) -> Result<Tensor, TrainerError> {
    let d = data.shape()[1];
    let src = data.data();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&src[i * d..(i + 1) * d]);
    }
    drop(src);
    Ok(Tensor::from_vec(&[idx.len(), d], out)?)
}

fn scaled(v: &[f64], c: f64) -> Vec<f64> {
    v.iter().map(|x| c * x).collect()
}

/// What one minibatch's inner chain produced: the estimator's objective
/// value, the potentials along the kept trajectory, the accepted proposal
/// count, and the visited `Phi` states (`Phi_1 ..= Phi_T`).
pub struct InnerLoop {
    pub objective: f64,
    pub v_values: Vec<f64>,
    pub accepted: usize,
    pub phi_trajectory: Vec<Vec<f64>>,
}

/// Runs T Metropolis-corrected Langevin steps on `Phi` for one minibatch and
/// leaves the likelihood and feature-map gradients equal to the gradient of
/// the estimator's objective with the visited `Phi` states held fixed.
///
/// The first potential (at the incoming `Phi_0`) only drives the first
/// proposal; it is excluded from the time average. With the final-sample
/// estimator only the closing potential contributes. `Phi` itself is moved
/// by the chain and its leftover gradient is meaningless to callers.
pub fn lae_inner_loop<N: NoiseSource>(
    model: &LatentVariableModel,
    encoder: &AmortizedEncoder,
    x_batch: &Tensor,
    features: &Tensor,
    inner_steps: usize,
    inner: &SamplerConfig,
    estimator: GradEstimator,
    noise: &mut N,
) -> Result<InnerLoop, TrainerError> {
    if inner_steps == 0 {
        return Err(TrainerError::BadConfig("inner_steps must be positive"));
    }
    inner.validate()?;
    let mut theta_psi = model.parameters();
    theta_psi.extend(encoder.psi_parameters());
    for p in &theta_psi {
        p.zero_grad();
    }
    let phi = &encoder.phi;
    phi.zero_grad();
    let target =
        AmortizedTarget::new(model, features.clone(), x_batch.clone(), encoder.latent_dim());
    let dim = phi.len();
    let mut v_values = Vec::with_capacity(inner_steps);
    let mut phi_trajectory = Vec::with_capacity(inner_steps);
    let mut accepted = 0;
    for k in 0..inner_steps {
        let z = features.matmul_nt(phi)?;
        let v_t = model.potential_sum(x_batch, &z)?;
        v_t.backward()?;
        if k > 0 {
            v_values.push(v_t.value());
        }
        let phi_grad = phi.grad().expect("phi is a leaf of the potential");
        phi.zero_grad();
        let exclude_from_estimate = match estimator {
            GradEstimator::TimeAveraged => k == 0,
            GradEstimator::FinalSample => true,
        };
        if exclude_from_estimate {
            for p in &theta_psi {
                p.zero_grad();
            }
        }
        let position = phi.to_vec();
        let grad_w = scaled(&phi_grad, inner.beta);
        let xi = noise.normal_vec(dim);
        let proposal = langevin_propose(&position, &grad_w, inner.step_size, &xi);
        if inner.mh_correction {
            let log_u = noise.uniform().ln();
            match target.potential_and_grad(&proposal) {
                Ok((v_prop, g_prop)) => {
                    let logq_fwd = gaussian_proposal_logdensity(
                        &proposal,
                        &position,
                        &grad_w,
                        inner.step_size,
                    );
                    let gw_prop = scaled(&g_prop, inner.beta);
                    let logq_rev = gaussian_proposal_logdensity(
                        &position,
                        &proposal,
                        &gw_prop,
                        inner.step_size,
                    );
                    let outcome = mh_accept(
                        log_u,
                        inner.beta * v_t.value(),
                        inner.beta * v_prop,
                        logq_fwd,
                        logq_rev,
                    );
                    if outcome == MhOutcome::Accepted {
                        phi.set_data(&proposal)?;
                        accepted += 1;
                    }
                }
                Err(err) if is_non_finite(&err) => {}
                Err(err) => return Err(err.into()),
            }
        } else {
            phi.set_data(&proposal)?;
            accepted += 1;
        }
        if phi.data().iter().any(|v| v.abs() > DIVERGENCE_LIMIT) {
            return Err(SamplerError::Diverged { step: k }.into());
        }
        phi_trajectory.push(phi.to_vec());
    }
    let z = features.matmul_nt(phi)?;
    let v_final = model.potential_sum(x_batch, &z)?;
    v_final.backward()?;
    v_values.push(v_final.value());
    let objective = match estimator {
        GradEstimator::TimeAveraged => {
            let c = 1.0 / inner_steps as f64;
            for p in &theta_psi {
                p.scale_grad(c);
            }
            v_values.iter().sum::<f64>() * c
        }
        GradEstimator::FinalSample => *v_values.last().expect("at least one potential"),
    };
    Ok(InnerLoop { objective, v_values, accepted, phi_trajectory })
}

fn is_non_finite(err: &SamplerError) -> bool {
    matches!(
        err,
        SamplerError::Tensor(TensorError::NonFinite { .. })
            | SamplerError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// Rebuilds the inner loop's objective as a graph over the likelihood and
/// feature-map parameters, with the recorded `Phi` states as constants. Its
/// gradient is what `lae_inner_loop` leaves behind.
pub fn replay_objective(
    model: &LatentVariableModel,
    encoder: &AmortizedEncoder,
    x_batch: &Tensor,
    phi_trajectory: &[Vec<f64>],
    estimator: GradEstimator,
) -> Result<Tensor, TrainerError> {
    if phi_trajectory.is_empty() {
        return Err(TrainerError::BadConfig("empty trajectory"));
    }
    let features = encoder.features(x_batch)?;
    let shape = [encoder.latent_dim(), encoder.feature_dim()];
    let kept: &[Vec<f64>] = match estimator {
        GradEstimator::TimeAveraged => phi_trajectory,
        GradEstimator::FinalSample => &phi_trajectory[phi_trajectory.len() - 1..],
    };
    let mut total: Option<Tensor> = None;
    for phi_t in kept {
        let phi_const = Tensor::from_vec(&shape, phi_t.clone())?;
        let v = model.potential_sum(x_batch, &features.matmul_nt(&phi_const)?)?;
        total = Some(match total {
            Some(t) => t.add(&v)?,
            None => v,
        });
    }
    Ok(total.expect("non-empty trajectory").scale(1.0 / kept.len() as f64)?)
}

/// Langevin autoencoder training: per minibatch, an inner chain moves `Phi`
/// while the likelihood and feature map take one optimizer step from the
/// chosen gradient estimator (plus the model's scale penalty, if any).
pub fn train_lae(
    model: &LatentVariableModel,
    encoder: &AmortizedEncoder,
    data: &Tensor,
    config: &LaeConfig,
    optimizer: &mut Optimizer,
) -> Result<TrainReport, TrainerError> {
    let n = data.shape()[0];
    config.train.validate(n)?;
    let mut theta_psi = model.parameters();
    theta_psi.extend(encoder.psi_parameters());
    if config.inner_steps == 0 {
        theta_psi.push(encoder.phi.clone());
    }
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut noise = SeededNoise::new(config.train.seed.wrapping_add(1));
    let mut report = TrainReport::default();
    for step in 0..config.train.train_steps {
        let idx = minibatch_indices(&mut batch_rng, n, config.train.batch_size);
        let xb = gather_rows(data, &idx)?;
        let features = encoder.features(&xb)?;
        let (mut objective, acceptance) = if config.inner_steps == 0 {
            // Degenerate chain: `Phi` becomes an ordinary descent parameter
            // and the objective is the plain prior-regularized reconstruction.
            for p in &theta_psi {
                p.zero_grad();
            }
            let z = encoder.encode_features(&features)?;
            let v = model.potential_sum(&xb, &z)?;
            v.backward()?;
            (v.value(), 1.0)
        } else {
            let inner = lae_inner_loop(
                model,
                encoder,
                &xb,
                &features,
                config.inner_steps,
                &config.inner,
                config.estimator,
                &mut noise,
            )?;
            (inner.objective, inner.accepted as f64 / config.inner_steps as f64)
        };
        if let Some(reg) = model.regularizer(n)? {
            reg.backward()?;
            objective += reg.value();
        }
        optimizer.step(&theta_psi)?;
        report.rows.push(TrainRow { step, objective, acceptance });
    }
    Ok(report)
}

/// Diagonal-Gaussian recognition model: the amortized encoder provides the
/// mean and a state-independent log standard deviation vector is learned
/// alongside it.
pub struct GaussianVariationalEncoder {
    pub encoder: AmortizedEncoder,
    pub log_std: Tensor,
}

impl GaussianVariationalEncoder {
    pub fn new(
        encoder: AmortizedEncoder,
        init_log_std: f64,
    ) -> Result<GaussianVariationalEncoder, TrainerError> {
        let d = encoder.latent_dim();
        Ok(GaussianVariationalEncoder {
            encoder,
            log_std: Tensor::param(&[d], vec![init_log_std; d])?,
        })
    }

    /// Every trainable piece: feature map, final layer, and log stds.
    pub fn parameters(&self) -> Vec<Tensor> {
        let mut p = self.encoder.psi_parameters();
        p.push(self.encoder.phi.clone());
        p.push(self.log_std.clone());
        p
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut p = self.encoder.named_parameters();
        p.push(("log_std".to_string(), self.log_std.clone()));
        p
    }

    /// Reparameterized draw `z = mean(x) + sigma * xi`, attached to all
    /// encoder parameters.
    pub fn sample_batch<N: NoiseSource>(
        &self,
        x: &Tensor,
        noise: &mut N,
    ) -> Result<Tensor, TrainerError> {
        let mean = self.encoder.encode(x)?;
        let (n, d) = (mean.shape()[0], mean.shape()[1]);
        let xi = Tensor::from_vec(&[n, d], noise.normal_vec(n * d))?;
        let sigma = self.log_std.exp()?;
        Ok(mean.add(&xi.mul_row(&sigma)?)?)
    }

    /// Entropy of the recognition distribution summed over `n` rows.
    pub fn entropy_sum(&self, n: usize) -> Result<Tensor, TrainerError> {
        let d = self.log_std.len() as f64;
        Ok(self.log_std.sum()?.scale(n as f64)?.add_scalar(n as f64 * 0.5 * d * (1.0 + LN_2PI))?)
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.log_std.to_vec().iter().map(|v| v.exp()).collect()
    }
}

/// Single-sample reparameterized VAE: minimizes `U(x, z) - H(q)` summed over
/// each minibatch.
pub fn train_vae(
    model: &LatentVariableModel,
    venc: &GaussianVariationalEncoder,
    data: &Tensor,
    config: &TrainConfig,
    optimizer: &mut Optimizer,
) -> Result<TrainReport, TrainerError> {
    let n = data.shape()[0];
    config.validate(n)?;
    let mut params = model.parameters();
    params.extend(venc.parameters());
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise = SeededNoise::new(config.seed.wrapping_add(1));
    let mut report = TrainReport::default();
    for step in 0..config.train_steps {
        for p in &params {
            p.zero_grad();
        }
        let idx = minibatch_indices(&mut batch_rng, n, config.batch_size);
        let xb = gather_rows(data, &idx)?;
        let z = venc.sample_batch(&xb, &mut noise)?;
        let u = model.potential_sum(&xb, &z)?;
        let ent = venc.entropy_sum(xb.shape()[0])?;
        let mut loss = u.sub(&ent)?;
        if let Some(reg) = model.regularizer(n)? {
            loss = loss.add(&reg)?;
        }
        loss.backward()?;
        optimizer.step(&params)?;
        report.rows.push(TrainRow { step, objective: loss.value(), acceptance: 1.0 });
    }
    Ok(report)
}

/// Warm-started Langevin baseline: the encoder learns from the plain ELBO at
/// its own draw, while the likelihood learns at that draw refined by a few
/// unadjusted Langevin steps. With zero refinement steps this is exactly
/// `train_vae`, noise stream included.
pub fn train_hoffman(
    model: &LatentVariableModel,
    venc: &GaussianVariationalEncoder,
    data: &Tensor,
    config: &HoffmanConfig,
    optimizer: &mut Optimizer,
) -> Result<TrainReport, TrainerError> {
    let n = data.shape()[0];
    config.train.validate(n)?;
    if config.ld_steps > 0 && !(config.ld_step_size > 0.0) {
        return Err(TrainerError::BadConfig("ld_step_size must be positive"));
    }
    let theta = model.parameters();
    let mut params = theta.clone();
    params.extend(venc.parameters());
    let d_z = venc.encoder.latent_dim();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut noise = SeededNoise::new(config.train.seed.wrapping_add(1));
    let mut report = TrainReport::default();
    for step in 0..config.train.train_steps {
        for p in &params {
            p.zero_grad();
        }
        let idx = minibatch_indices(&mut batch_rng, n, config.train.batch_size);
        let xb = gather_rows(data, &idx)?;
        let nb = xb.shape()[0];
        let z0 = venc.sample_batch(&xb, &mut noise)?;
        let u0 = model.potential_sum(&xb, &z0)?;
        let ent = venc.entropy_sum(nb)?;
        let enc_loss = u0.sub(&ent)?;
        enc_loss.backward()?;
        // Refine the draw for the likelihood update; only the draw itself
        // collects gradients here.
        let mut z_cur = z0.to_vec();
        for s in 0..config.ld_steps {
            let zt = Tensor::param(&[nb, d_z], z_cur.clone())?;
            let ut = model.potential_sum(&xb, &zt)?;
            ut.backward_into(std::slice::from_ref(&zt))?;
            let xi = noise.normal_vec(nb * d_z);
            z_cur = langevin_propose(&z_cur, &zt.grad().expect("leaf"), config.ld_step_size, &xi);
            if z_cur.iter().any(|v| v.abs() > DIVERGENCE_LIMIT) {
                return Err(SamplerError::Diverged { step: s }.into());
            }
        }
        for t in &theta {
            t.zero_grad();
        }
        let z_t = Tensor::from_vec(&[nb, d_z], z_cur)?;
        let mut theta_loss = model.potential_sum(&xb, &z_t)?;
        let mut reg_value = 0.0;
        if let Some(reg) = model.regularizer(n)? {
            reg_value = reg.value();
            theta_loss = theta_loss.add(&reg)?;
        }
        theta_loss.backward()?;
        optimizer.step(&params)?;
        report.rows.push(TrainRow {
            step,
            objective: enc_loss.value() + reg_value,
            acceptance: 1.0,
        });
    }
    Ok(report)
}

/// Where the bound's proposal comes from: the amortized encoder mean with a
/// fixed isotropic sigma, or the recognition model's own sigmas.
pub enum ElboProposal<'a> {
    Amortized { encoder: &'a AmortizedEncoder, sigma: f64 },
    Variational(&'a GaussianVariationalEncoder),
}

const MIN_PROPOSAL_SIGMA: f64 = 1e-4;
const MAX_SKIPPED_SHARE: f64 = 0.01;

#[derive(Debug, Clone, Copy)]
pub struct ElboReport {
    /// Negative evidence lower bound per data dimension (lower is better).
    pub neg_elbo_per_dim: f64,
    /// Standard error of the per-datapoint bound, per data dimension.
    pub std_error_per_dim: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Monte Carlo evidence lower bound over a dataset: for each datapoint,
/// `k_samples` proposal draws score `log p(x, z) - log q(z | x)`. Non-finite
/// terms are skipped unless they exceed one percent of all terms.
pub fn evaluate_elbo(
    model: &LatentVariableModel,
    proposal: &ElboProposal,
    data: &Tensor,
    k_samples: usize,
    seed: u64,
) -> Result<ElboReport, TrainerError> {
    if k_samples == 0 {
        return Err(TrainerError::BadConfig("k_samples must be positive"));
    }
    let n = data.shape()[0];
    let d_x = model.obs_dim();
    let d_z = model.latent_dim();
    let (means, sigmas) = match proposal {
        ElboProposal::Amortized { encoder, sigma } => {
            if !(*sigma >= MIN_PROPOSAL_SIGMA) {
                return Err(TrainerError::DegenerateSigma(*sigma));
            }
            (encoder.encode(data)?.to_vec(), vec![*sigma; d_z])
        }
        ElboProposal::Variational(venc) => {
            let sigmas = venc.sigmas();
            if let Some(&worst) = sigmas.iter().min_by(|a, b| a.partial_cmp(b).unwrap()) {
                if !(worst >= MIN_PROPOSAL_SIGMA) {
                    return Err(TrainerError::DegenerateSigma(worst));
                }
            }
            (venc.encoder.encode(data)?.to_vec(), sigmas)
        }
    };
    let log_norm_q: f64 = sigmas.iter().map(|s| -0.5 * LN_2PI - s.ln()).sum();
    let mut noise = SeededNoise::new(seed);
    let data_values = data.data().clone();
    let mut per_point = Vec::with_capacity(n);
    let mut skipped = 0;
    for i in 0..n {
        let x_row = &data_values[i * d_x..(i + 1) * d_x];
        let x_t = Tensor::from_vec(&[1, d_x], x_row.to_vec())?;
        let mean = &means[i * d_z..(i + 1) * d_z];
        let mut terms = Vec::with_capacity(k_samples);
        for _ in 0..k_samples {
            let xi = noise.normal_vec(d_z);
            let z: Vec<f64> =
                mean.iter().zip(&sigmas).zip(&xi).map(|((m, s), e)| m + s * e).collect();
            let log_q = log_norm_q - 0.5 * xi.iter().map(|e| e * e).sum::<f64>();
            let z_t = Tensor::from_vec(&[1, d_z], z)?;
            match model.log_joint_batch(&x_t, &z_t) {
                Ok(lj) => {
                    let term = lj.value() - log_q;
                    if term.is_finite() {
                        terms.push(term);
                    } else {
                        skipped += 1;
                    }
                }
                Err(ModelError::Tensor(TensorError::NonFinite { .. })) => skipped += 1,
                Err(err) => return Err(err.into()),
            }
        }
        if !terms.is_empty() {
            per_point.push(terms.iter().sum::<f64>() / terms.len() as f64);
        }
    }
    let total = n * k_samples;
    if (skipped as f64) > MAX_SKIPPED_SHARE * total as f64 || per_point.is_empty() {
        return Err(TrainerError::NonFiniteElbo { skipped, total });
    }
    let count = per_point.len() as f64;
    let mean = per_point.iter().sum::<f64>() / count;
    let var = if per_point.len() > 1 {
        per_point.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0)
    } else {
        0.0
    };
    Ok(ElboReport {
        neg_elbo_per_dim: -mean / d_x as f64,
        std_error_per_dim: (var / count).sqrt() / d_x as f64,
        evaluated: per_point.len(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::FeatureMap;
    use crate::models::{
        DiscretizedLogisticLikelihood, GaussianLinearLikelihood, GaussianPrior, Likelihood,
        NeuralGaussianLikelihood,
    };
    use crate::nn::{Activation, Mlp, WeightInit};
    use crate::oracle::ConjugateOracle;

    fn neural_model(seed: u64) -> LatentVariableModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let decoder = Mlp::init(
            &mut rng,
            &[2, 6, 3],
            Activation::Tanh,
            false,
            false,
            WeightInit::HeNormal { gain: 1.0 },
        );
        LatentVariableModel::new(
            GaussianPrior::standard(2),
            Likelihood::NeuralGaussian(NeuralGaussianLikelihood::new(decoder, 0.5).unwrap()),
        )
        .unwrap()
    }

    fn mlp_encoder(seed: u64, d_x: usize, d_z: usize) -> AmortizedEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::init(
            &mut rng,
            &[d_x, 8, 5],
            Activation::Tanh,
            true,
            false,
            WeightInit::HeNormal { gain: 1.0 },
        );
        AmortizedEncoder::new(FeatureMap::Mlp(mlp), d_z, 0.3, &mut rng).unwrap()
    }

    fn toy_data(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::from_vec(&[n, d], vals).unwrap()
    }

    #[test]
    fn sgd_step_descends_the_gradient() {
        let x = Tensor::param(&[2], vec![1.0, -2.0]).unwrap();
        x.mul(&x).unwrap().sum().unwrap().scale(0.5).unwrap().backward().unwrap();
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&[x.clone()]).unwrap();
        assert_eq!(x.to_vec(), vec![0.9, -1.8]);
    }

    #[test]
    fn adam_matches_hand_computed_updates() {
        let x = Tensor::param(&[1], vec![0.5]).unwrap();
        let mut opt = Optimizer::adam(0.1);
        let grads = [2.0, -1.0];
        let (mut m, mut v) = (0.0, 0.0);
        let mut expect = 0.5;
        for (t, g) in grads.iter().enumerate() {
            x.zero_grad();
            let c = Tensor::from_vec(&[1], vec![*g]).unwrap();
            x.mul(&c).unwrap().sum().unwrap().backward().unwrap();
            opt.step(&[x.clone()]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let v_hat = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            expect -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((x.value() - expect).abs() < 1e-14, "step {t}");
        }
    }

    #[test]
    fn optimizer_skips_parameters_without_gradients() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let mut opt = Optimizer::adam(0.1);
        opt.step(&[x.clone()]).unwrap();
        assert_eq!(x.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn inner_loop_moves_phi_but_never_writes_theta_or_psi() {
        let model = neural_model(5);
        let encoder = mlp_encoder(6, 3, 2);
        let data = toy_data(7, 4, 3);
        let theta_before: Vec<Vec<f64>> = model.parameters().iter().map(|p| p.to_vec()).collect();
        let psi_before: Vec<Vec<f64>> =
            encoder.psi_parameters().iter().map(|p| p.to_vec()).collect();
        let phi_before = encoder.phi.to_vec();
        let features = encoder.features(&data).unwrap();
        let mut noise = SeededNoise::new(9);
        let result = lae_inner_loop(
            &model,
            &encoder,
            &data,
            &features,
            5,
            &SamplerConfig::new(0.05, true),
            GradEstimator::TimeAveraged,
            &mut noise,
        )
        .unwrap();
        assert_eq!(result.v_values.len(), 5);
        assert_eq!(result.phi_trajectory.len(), 5);
        assert!(result.accepted <= 5);
        for (p, before) in model.parameters().iter().zip(&theta_before) {
            assert_eq!(&p.to_vec(), before);
        }
        for (p, before) in encoder.psi_parameters().iter().zip(&psi_before) {
            assert_eq!(&p.to_vec(), before);
        }
        assert_ne!(encoder.phi.to_vec(), phi_before);
        assert_eq!(encoder.phi.to_vec(), *result.phi_trajectory.last().unwrap());
    }

    #[test]
    fn inner_loop_gradients_match_the_replayed_objective() {
        for estimator in [GradEstimator::TimeAveraged, GradEstimator::FinalSample] {
            let model = neural_model(11);
            let encoder = mlp_encoder(12, 3, 2);
            let data = toy_data(13, 4, 3);
            let features = encoder.features(&data).unwrap();
            let mut noise = SeededNoise::new(14);
            let result = lae_inner_loop(
                &model,
                &encoder,
                &data,
                &features,
                4,
                &SamplerConfig::new(0.02, true),
                estimator,
                &mut noise,
            )
            .unwrap();
            let mut params = model.parameters();
            params.extend(encoder.psi_parameters());
            let inner_grads: Vec<Vec<f64>> =
                params.iter().map(|p| p.grad().expect("accumulated")).collect();
            let replay = || {
                replay_objective(&model, &encoder, &data, &result.phi_trajectory, estimator)
                    .unwrap()
            };
            let objective = replay();
            assert!((objective.value() - result.objective).abs() < 1e-10);
            for p in &params {
                p.zero_grad();
            }
            objective.backward().unwrap();
            for (p, inner_g) in params.iter().zip(&inner_grads) {
                let replay_g = p.grad().expect("replay gradient");
                for (a, b) in inner_g.iter().zip(&replay_g) {
                    assert!(
                        (a - b).abs() <= 1e-9 * (1.0 + b.abs()),
                        "{estimator:?}: inner {a} vs replay {b}"
                    );
                }
            }
            // Spot-check the replay against finite differences on one
            // likelihood and one feature-map parameter.
            for p in [&params[0], &params[params.len() - 1]] {
                let base = p.to_vec();
                let grad = p.grad().unwrap();
                let h = 1e-5;
                let mut up = base.clone();
                up[0] += h;
                p.set_data(&up).unwrap();
                let plus = replay().value();
                up[0] = base[0] - h;
                p.set_data(&up).unwrap();
                let minus = replay().value();
                p.set_data(&base).unwrap();
                let fd = (plus - minus) / (2.0 * h);
                assert!(
                    (grad[0] - fd).abs() <= 1e-4 * (1.0 + fd.abs()),
                    "{estimator:?}: fd {fd} vs grad {}",
                    grad[0]
                );
            }
        }
    }

    #[test]
    fn train_lae_reports_every_step_and_learns_a_bit() {
        let model = neural_model(21);
        let encoder = mlp_encoder(22, 3, 2);
        let data = toy_data(23, 8, 3);
        let config = LaeConfig {
            train: TrainConfig { batch_size: 8, train_steps: 40, seed: 24 },
            inner_steps: 3,
            inner: SamplerConfig::new(0.02, true),
            estimator: GradEstimator::TimeAveraged,
        };
        let mut opt = Optimizer::adam(0.02);
        let report = train_lae(&model, &encoder, &data, &config, &mut opt).unwrap();
        assert_eq!(report.rows.len(), 40);
        for r in &report.rows {
            assert!(r.objective.is_finite());
            assert!((0.0..=1.0).contains(&r.acceptance));
        }
        let first: f64 = report.rows[..5].iter().map(|r| r.objective).sum::<f64>() / 5.0;
        let last: f64 = report.rows[35..].iter().map(|r| r.objective).sum::<f64>() / 5.0;
        assert!(last < first, "objective did not improve: {first} -> {last}");
    }

    #[test]
    fn zero_inner_steps_trains_phi_by_plain_descent() {
        let model = neural_model(61);
        let encoder = mlp_encoder(62, 3, 2);
        let data = toy_data(63, 6, 3);
        let lr = 0.05;

        // Expected update: one full-batch descent step on `V(theta, psi, Phi)`.
        let reference = mlp_encoder(62, 3, 2);
        let mut expected = model.parameters();
        expected.extend(reference.psi_parameters());
        expected.push(reference.phi.clone());
        for p in &expected {
            p.zero_grad();
        }
        let v = model.potential_sum(&data, &reference.encode(&data).unwrap()).unwrap();
        v.backward().unwrap();
        let stepped: Vec<Vec<f64>> = expected
            .iter()
            .map(|p| {
                let g = p.grad().unwrap();
                p.to_vec().iter().zip(&g).map(|(x, gi)| x - lr * gi).collect()
            })
            .collect();
        for p in &expected {
            p.zero_grad();
        }

        let config = LaeConfig {
            train: TrainConfig { batch_size: 6, train_steps: 1, seed: 64 },
            inner_steps: 0,
            inner: SamplerConfig::new(0.02, true),
            estimator: GradEstimator::TimeAveraged,
        };
        let mut opt = Optimizer::sgd(lr);
        let report = train_lae(&model, &encoder, &data, &config, &mut opt).unwrap();
        assert_eq!(report.rows[0].objective, v.value());
        assert_eq!(report.rows[0].acceptance, 1.0);
        let mut actual = model.parameters();
        actual.extend(encoder.psi_parameters());
        actual.push(encoder.phi.clone());
        for (p, want) in actual.iter().zip(&stepped) {
            assert_eq!(&p.to_vec(), want);
        }
    }

    #[test]
    fn vae_training_reduces_the_loss() {
        let model = neural_model(31);
        let venc = GaussianVariationalEncoder::new(mlp_encoder(32, 3, 2), -1.0).unwrap();
        let data = toy_data(33, 16, 3);
        let config = TrainConfig { batch_size: 16, train_steps: 120, seed: 34 };
        let mut opt = Optimizer::adam(0.02);
        let report = train_vae(&model, &venc, &data, &config, &mut opt).unwrap();
        assert_eq!(report.rows.len(), 120);
        let first: f64 = report.rows[..10].iter().map(|r| r.objective).sum::<f64>() / 10.0;
        let last: f64 = report.rows[110..].iter().map(|r| r.objective).sum::<f64>() / 10.0;
        assert!(last < first, "loss did not improve: {first} -> {last}");
    }

    #[test]
    fn hoffman_with_zero_refinement_equals_vae_exactly() {
        let data = toy_data(43, 6, 3);
        let config = TrainConfig { batch_size: 4, train_steps: 25, seed: 44 };

        let model_a = neural_model(41);
        let venc_a = GaussianVariationalEncoder::new(mlp_encoder(42, 3, 2), -0.5).unwrap();
        let mut opt_a = Optimizer::sgd(0.01);
        let vae = train_vae(&model_a, &venc_a, &data, &config, &mut opt_a).unwrap();

        let model_b = neural_model(41);
        let venc_b = GaussianVariationalEncoder::new(mlp_encoder(42, 3, 2), -0.5).unwrap();
        let mut opt_b = Optimizer::sgd(0.01);
        let hoffman_config = HoffmanConfig { train: config, ld_steps: 0, ld_step_size: 0.0 };
        let hoffman = train_hoffman(&model_b, &venc_b, &data, &hoffman_config, &mut opt_b).unwrap();

        for ((na, pa), (nb, pb)) in model_a
            .named_parameters()
            .iter()
            .chain(venc_a.named_parameters().iter())
            .zip(model_b.named_parameters().iter().chain(venc_b.named_parameters().iter()))
        {
            assert_eq!(na, nb);
            assert_eq!(pa.to_vec(), pb.to_vec(), "parameter {na} diverged");
        }
        assert_eq!(vae.rows, hoffman.rows);
    }

    #[test]
    fn hoffman_refinement_changes_the_likelihood_update() {
        let data = toy_data(53, 6, 3);
        let train = TrainConfig { batch_size: 6, train_steps: 10, seed: 54 };

        let model_a = neural_model(51);
        let venc_a = GaussianVariationalEncoder::new(mlp_encoder(52, 3, 2), -0.5).unwrap();
        let mut opt_a = Optimizer::sgd(0.01);
        train_hoffman(
            &model_a,
            &venc_a,
            &data,
            &HoffmanConfig { train, ld_steps: 0, ld_step_size: 0.0 },
            &mut opt_a,
        )
        .unwrap();

        let model_b = neural_model(51);
        let venc_b = GaussianVariationalEncoder::new(mlp_encoder(52, 3, 2), -0.5).unwrap();
        let mut opt_b = Optimizer::sgd(0.01);
        train_hoffman(
            &model_b,
            &venc_b,
            &data,
            &HoffmanConfig { train, ld_steps: 5, ld_step_size: 0.01 },
            &mut opt_b,
        )
        .unwrap();

        let theta_a: Vec<f64> = model_a.parameters().iter().flat_map(|p| p.to_vec()).collect();
        let theta_b: Vec<f64> = model_b.parameters().iter().flat_map(|p| p.to_vec()).collect();
        assert_ne!(theta_a, theta_b);
    }

    #[test]
    fn elbo_lower_bounds_the_conjugate_evidence() {
        let model = LatentVariableModel::new(
            GaussianPrior::standard(2),
            Likelihood::GaussianLinear(
                GaussianLinearLikelihood::new(vec![0.7, 0.6, 0.6, 0.8]).unwrap(),
            ),
        )
        .unwrap();
        let oracle = ConjugateOracle::new(&model).unwrap();
        let xs = [[0.9, -0.4], [0.2, 1.1], [-1.0, 0.5]];
        let data = Tensor::from_vec(&[3, 2], xs.concat()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let encoder = AmortizedEncoder::new(FeatureMap::OneHot { n: 3 }, 2, 0.0, &mut rng).unwrap();
        // Point the proposal means at the exact posterior means.
        let mut phi = vec![0.0; 6];
        for (i, x) in xs.iter().enumerate() {
            let mean = oracle.posterior_mean(x);
            phi[i] = mean[0];
            phi[3 + i] = mean[1];
        }
        encoder.phi.set_data(&phi).unwrap();
        let proposal = ElboProposal::Amortized { encoder: &encoder, sigma: 0.3 };
        let report = evaluate_elbo(&model, &proposal, &data, 64, 7).unwrap();
        assert_eq!(report.skipped, 0);
        assert_eq!(report.evaluated, 3);
        let true_neg_logp_per_dim =
            -xs.iter().map(|x| oracle.log_marginal(x)).sum::<f64>() / (3.0 * 2.0);
        assert!(
            report.neg_elbo_per_dim + 3.0 * report.std_error_per_dim >= true_neg_logp_per_dim,
            "bound violated: {} vs {}",
            report.neg_elbo_per_dim,
            true_neg_logp_per_dim
        );
        // With a reasonable proposal the bound should also be within one nat
        // per dimension of the truth.
        assert!(report.neg_elbo_per_dim - true_neg_logp_per_dim < 1.0);
    }

    #[test]
    fn degenerate_proposal_sigma_is_an_error() {
        let model = neural_model(61);
        let encoder = mlp_encoder(62, 3, 2);
        let data = toy_data(63, 2, 3);
        let proposal = ElboProposal::Amortized { encoder: &encoder, sigma: 1e-6 };
        assert!(matches!(
            evaluate_elbo(&model, &proposal, &data, 4, 0),
            Err(TrainerError::DegenerateSigma(_))
        ));
        let venc = GaussianVariationalEncoder::new(mlp_encoder(64, 3, 2), -12.0).unwrap();
        assert!(matches!(
            evaluate_elbo(&model, &ElboProposal::Variational(&venc), &data, 4, 0),
            Err(TrainerError::DegenerateSigma(_))
        ));
    }

    #[test]
    fn train_report_round_trips_to_csv() {
        let report = TrainReport {
            rows: vec![
                TrainRow { step: 0, objective: 12.5, acceptance: 0.8 },
                TrainRow { step: 1, objective: 11.25, acceptance: 1.0 },
            ],
        };
        assert_eq!(report.to_csv_string(), "step,objective,acceptance\n0,12.5,0.8\n1,11.25,1\n");
    }

    #[test]
    fn full_batches_consume_no_batching_randomness() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let idx = minibatch_indices(&mut rng, 5, 5);
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        let idx = minibatch_indices(&mut rng, 5, 9);
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        let mut fresh = ChaCha8Rng::seed_from_u64(77);
        assert_eq!(rng.gen::<f64>(), fresh.gen::<f64>());
    }

    #[test]
    fn scale_penalty_reaches_the_raw_scale_in_lae_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let decoder = Mlp::init(
            &mut rng,
            &[2, 5, 3],
            Activation::Tanh,
            false,
            false,
            WeightInit::HeNormal { gain: 1.0 },
        );
        let lik = DiscretizedLogisticLikelihood::new(decoder, 0.0).unwrap();
        let raw_scale = lik.raw_scale.clone();
        let model = LatentVariableModel::new(
            GaussianPrior::standard(2),
            Likelihood::DiscretizedLogistic(lik),
        )
        .unwrap();
        let encoder = mlp_encoder(72, 3, 2);
        let levels: Vec<f64> =
            (0..8 * 3).map(|k| 2.0 * ((k * 11) % 256) as f64 / 255.0 - 1.0).collect();
        let data = Tensor::from_vec(&[8, 3], levels).unwrap();
        let config = LaeConfig {
            train: TrainConfig { batch_size: 8, train_steps: 3, seed: 73 },
            inner_steps: 2,
            inner: SamplerConfig::new(0.01, true),
            estimator: GradEstimator::TimeAveraged,
        };
        let mut opt = Optimizer::sgd(0.01);
        let before = raw_scale.value();
        train_lae(&model, &encoder, &data, &config, &mut opt).unwrap();
        assert_ne!(raw_scale.value(), before);
    }
}
