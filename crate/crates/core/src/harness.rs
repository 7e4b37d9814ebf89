//! Experiment driver: builds models, encoders, and datasets from a parsed
//! config, runs the sampling and training experiments, and writes their
//! artifacts (sample CSVs, metric tables, train reports, checkpoints).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, restore_named, save_checkpoint, CheckpointError};
use crate::config::{ConfigError, ConfigFile};
use crate::data::{self, DataError};
use crate::encoder::{rank_diagnostic, AmortizedEncoder, EncoderError, FeatureMap};
use crate::linalg::{frobenius, l2_distance, spd_det};
use crate::models::{
    DiscretizedLogisticLikelihood, GaussianLinearLikelihood, GaussianPrior, LatentVariableModel,
    Likelihood, ModelError, NeuralGaussianLikelihood,
};
use crate::nn::{Activation, Mlp, WeightInit};
use crate::oracle::{ConjugateOracle, GridOracle, OracleError};
use crate::samplers::{
    run_ald, run_ld, NoiseSource, SampleStore, SamplerConfig, SamplerError, SeededNoise,
};
use crate::tensor::{Tensor, TensorError};
use crate::trainers::{
    evaluate_elbo, train_hoffman, train_lae, train_vae, ElboProposal, GaussianVariationalEncoder,
    GradEstimator, HoffmanConfig, LaeConfig, Optimizer, TrainConfig, TrainerError,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("encoder: {0}")]
    Encoder(#[from] EncoderError),
    #[error("sampler: {0}")]
    Sampler(#[from] SamplerError),
    #[error("oracle: {0}")]
    Oracle(#[from] OracleError),
    #[error("trainer: {0}")]
    Trainer(#[from] TrainerError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    SampleLd,
    SampleAld,
    AblateCapacity,
    TrainLae,
    TrainVae,
    TrainHoffman,
    EvalElbo,
}

impl ExperimentKind {
    pub fn parse(name: &str) -> Option<ExperimentKind> {
        match name {
            "sample-ld" => Some(ExperimentKind::SampleLd),
            "sample-ald" => Some(ExperimentKind::SampleAld),
            "ablate-capacity" => Some(ExperimentKind::AblateCapacity),
            "train-lae" => Some(ExperimentKind::TrainLae),
            "train-vae" => Some(ExperimentKind::TrainVae),
            "train-hoffman" => Some(ExperimentKind::TrainHoffman),
            "eval-elbo" => Some(ExperimentKind::EvalElbo),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::SampleLd => "sample-ld",
            ExperimentKind::SampleAld => "sample-ald",
            ExperimentKind::AblateCapacity => "ablate-capacity",
            ExperimentKind::TrainLae => "train-lae",
            ExperimentKind::TrainVae => "train-vae",
            ExperimentKind::TrainHoffman => "train-hoffman",
            ExperimentKind::EvalElbo => "eval-elbo",
        }
    }
}

// Distinct sub-streams derived from the experiment seed, splitmix-spread so
// no two components ever share one.
const MODEL_STREAM: u64 = 1;
const ENCODER_STREAM: u64 = 2;
const DATA_STREAM: u64 = 3;
const CHAIN_STREAM: u64 = 4;
const VI_STREAM: u64 = 5;
const TRAIN_STREAM: u64 = 6;
const EVAL_STREAM: u64 = 7;

pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut x = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^ (x >> 27)
}

const HIST_BINS: usize = 50;

fn identity(dim: usize) -> Vec<f64> {
    let mut eye = vec![0.0; dim * dim];
    for i in 0..dim {
        eye[i * dim + i] = 1.0;
    }
    eye
}

fn square_matrix(
    cfg: &ConfigFile,
    key: &str,
    dim: usize,
    default: Vec<f64>,
) -> Result<Vec<f64>, HarnessError> {
    match cfg.matrix("model", key)? {
        None => Ok(default),
        Some((width, flat)) => {
            if width != dim || flat.len() != dim * dim {
                return Err(invalid(format!("[model] {key} must be {dim}x{dim}")));
            }
            Ok(flat)
        }
    }
}

pub fn build_model(cfg: &ConfigFile, seed: u64) -> Result<LatentVariableModel, HarnessError> {
    let kind = cfg.str_or("model", "kind", "conjugate");
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, MODEL_STREAM));
    match kind {
        "conjugate" => {
            let d_z = cfg.usize_or("model", "latent_dim", 2)?;
            let mean = cfg.vec_f64("model", "prior_mean")?.unwrap_or_else(|| vec![0.0; d_z]);
            let prior_cov = square_matrix(cfg, "prior_cov", d_z, identity(d_z))?;
            let default_noise = if d_z == 2 { vec![0.7, 0.6, 0.6, 0.8] } else { identity(d_z) };
            let noise_cov = square_matrix(cfg, "noise_cov", d_z, default_noise)?;
            Ok(LatentVariableModel::new(
                GaussianPrior::new(mean, prior_cov)?,
                Likelihood::GaussianLinear(GaussianLinearLikelihood::new(noise_cov)?),
            )?)
        }
        "neural" => {
            let d_z = cfg.usize_or("model", "latent_dim", 2)?;
            let d_x = cfg.usize_or("model", "obs_dim", 2)?;
            let hidden = cfg.vec_usize("model", "hidden")?.unwrap_or_else(|| vec![128, 128, 128]);
            let mut dims = vec![d_z];
            dims.extend(&hidden);
            dims.push(d_x);
            let std_w = cfg.f64_or("model", "weight_std", 0.2f64.sqrt())?;
            let std_b = cfg.f64_or("model", "bias_std", 0.1f64.sqrt())?;
            let sigma_x = cfg.f64_or("model", "sigma_x", 0.25)?;
            let decoder = Mlp::init(
                &mut rng,
                &dims,
                Activation::Relu,
                false,
                false,
                WeightInit::Normal { std_w, std_b },
            );
            Ok(LatentVariableModel::new(
                GaussianPrior::standard(d_z),
                Likelihood::NeuralGaussian(NeuralGaussianLikelihood::new(decoder, sigma_x)?),
            )?)
        }
        "image" => {
            let d_z = cfg.usize_or("model", "latent_dim", 8)?;
            let side = cfg.usize_or("model", "side", 28)?;
            let hidden = cfg.vec_usize("model", "hidden")?.unwrap_or_else(|| vec![256, 256]);
            let mut dims = vec![d_z];
            dims.extend(&hidden);
            dims.push(side * side);
            let layer_norm = cfg.bool_or("model", "layer_norm", true)?;
            let scale_init = cfg.f64_or("model", "scale_init", 0.0)?;
            let decoder = Mlp::init(
                &mut rng,
                &dims,
                Activation::Relu,
                false,
                layer_norm,
                WeightInit::HeNormal { gain: 1.0 },
            );
            Ok(LatentVariableModel::new(
                GaussianPrior::standard(d_z),
                Likelihood::DiscretizedLogistic(DiscretizedLogisticLikelihood::new(
                    decoder, scale_init,
                )?),
            )?)
        }
        other => Err(invalid(format!("unknown model kind `{other}`"))),
    }
}

/// Feature map plus final layer; `n` is the dataset size, used only by the
/// one-hot lookup.
pub fn build_encoder(
    cfg: &ConfigFile,
    model: &LatentVariableModel,
    n: usize,
    seed: u64,
) -> Result<AmortizedEncoder, HarnessError> {
    let kind = cfg.str_or("encoder", "kind", "mlp");
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, ENCODER_STREAM));
    let phi_std = cfg.f64_or("encoder", "phi_std", 0.0)?;
    let feature_map = match kind {
        "onehot" => FeatureMap::OneHot { n },
        "mlp" => {
            let d = cfg.usize_or("encoder", "feature_dim", 128)?;
            let hidden = cfg.vec_usize("encoder", "hidden")?.unwrap_or_else(|| vec![128]);
            // Feature norms set the per-datapoint step scale, so the hidden
            // layers are normalized (uniform norms across inputs) and the
            // output gain is sized for healthy Metropolis acceptance at the
            // documented step sizes.
            let gain = cfg.f64_or("encoder", "gain", 2.0)?;
            let layer_norm = cfg.bool_or("encoder", "layer_norm", true)?;
            let mut dims = vec![model.obs_dim()];
            dims.extend(&hidden);
            dims.push(d);
            FeatureMap::Mlp(Mlp::init(
                &mut rng,
                &dims,
                Activation::Relu,
                true,
                layer_norm,
                WeightInit::HeNormal { gain },
            ))
        }
        other => return Err(invalid(format!("unknown encoder kind `{other}`"))),
    };
    Ok(AmortizedEncoder::new(feature_map, model.latent_dim(), phi_std, &mut rng)?)
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerSettings {
    pub config: SamplerConfig,
    pub steps: usize,
    pub burn_in: usize,
}

pub fn build_sampler(cfg: &ConfigFile) -> Result<SamplerSettings, HarnessError> {
    let step_size = cfg.f64_or("sampler", "step_size", 4e-4)?;
    let mh = cfg.bool_or("sampler", "mh", true)?;
    let beta = cfg.f64_or("sampler", "beta", 1.0)?;
    let steps = cfg.usize_or("sampler", "steps", 3000)?;
    let burn_in = cfg.usize_or("sampler", "burn_in", 1000)?;
    if burn_in >= steps {
        return Err(invalid(format!("burn_in {burn_in} must be below steps {steps}")));
    }
    Ok(SamplerSettings {
        config: SamplerConfig::new(step_size, mh).with_beta(beta),
        steps,
        burn_in,
    })
}

pub struct Dataset {
    pub train: Tensor,
    pub holdout: Option<Tensor>,
}

fn split_rows(full: Tensor, holdout: usize) -> Result<Dataset, HarnessError> {
    let n = full.shape()[0];
    if holdout == 0 {
        return Ok(Dataset { train: full, holdout: None });
    }
    if holdout >= n {
        return Err(invalid(format!("holdout {holdout} swallows the whole dataset of {n}")));
    }
    let d = full.shape()[1];
    let v = full.to_vec();
    let cut = (n - holdout) * d;
    Ok(Dataset {
        train: Tensor::from_vec(&[n - holdout, d], v[..cut].to_vec())?,
        holdout: Some(Tensor::from_vec(&[holdout, d], v[cut..].to_vec())?),
    })
}

pub fn load_dataset(
    cfg: &ConfigFile,
    model: &LatentVariableModel,
    seed: u64,
) -> Result<Dataset, HarnessError> {
    let kind = cfg.str_or("data", "kind", "sample");
    let holdout = cfg.usize_or("data", "holdout", 0)?;
    let full = match kind {
        "sample" => {
            let n = cfg.usize_or("data", "n", 3)?;
            data::sample_joint(model, n, sub_seed(seed, DATA_STREAM))?.0
        }
        "blobs" => {
            let count = cfg.usize_or("data", "count", 4096)?;
            let side = cfg.usize_or("data", "side", 28)?;
            if side * side != model.obs_dim() {
                return Err(invalid(format!(
                    "{side}x{side} images do not match the observation dimension {}",
                    model.obs_dim()
                )));
            }
            data::synthetic_blobs(count, side, sub_seed(seed, DATA_STREAM)).to_unit_tensor()?
        }
        "idx" => {
            let path = cfg.require("data", "path")?;
            let t = data::load_idx_images(path)?;
            if t.shape()[1] != model.obs_dim() {
                return Err(invalid(format!(
                    "IDX images have {} pixels, the model expects {}",
                    t.shape()[1],
                    model.obs_dim()
                )));
            }
            t
        }
        other => return Err(invalid(format!("unknown data kind `{other}`"))),
    };
    split_rows(full, holdout)
}

fn format_row(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn write_file(path: &Path, content: &str) -> Result<(), HarnessError> {
    fs::write(path, content)?;
    Ok(())
}

fn stores_csv(stores: &[&SampleStore]) -> String {
    let dim = stores.first().map_or(0, |s| s.dim());
    let mut out = String::from("step,datapoint_index");
    for j in 0..dim {
        let _ = write!(out, ",z{j}");
    }
    out.push_str(",accepted\n");
    for store in stores {
        for row in store.rows() {
            let _ = write!(out, "{},{}", row.step, row.datapoint_index);
            for v in &row.z {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", u8::from(row.accepted));
        }
    }
    out
}

struct MetricRow {
    method: String,
    datapoint: usize,
    mean_error: f64,
    cov_error: f64,
    hist_tv: f64,
    acceptance: f64,
}

fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("method,datapoint,mean_error,cov_error,hist_tv,acceptance\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method, r.datapoint, r.mean_error, r.cov_error, r.hist_tv, r.acceptance
        );
    }
    out
}

/// Reference posterior moments for one datapoint, from the closed form when
/// the model is conjugate, else from grid quadrature.
struct Reference {
    mean: Vec<f64>,
    cov: Vec<f64>,
    grid: Option<GridOracle>,
}

fn reference_for(
    cfg: &ConfigFile,
    model: &LatentVariableModel,
    conjugate: Option<&ConjugateOracle>,
    x_row: &[f64],
) -> Result<Reference, HarnessError> {
    let resolution = cfg.usize_or("sampler", "grid_resolution", 200)?;
    match conjugate {
        Some(oracle) => {
            let mean = oracle.posterior_mean(x_row);
            let cov = oracle.posterior_cov().to_vec();
            let grid = if model.latent_dim() == 2 {
                let d = model.latent_dim();
                let spread = (0..d).map(|j| cov[j * d + j].sqrt()).fold(0.0f64, f64::max) * 5.0;
                let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min) - spread;
                let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + spread;
                Some(GridOracle::new(model, x_row, lo, hi, resolution)?)
            } else {
                None
            };
            Ok(Reference { mean, cov, grid })
        }
        None => {
            if model.latent_dim() != 2 {
                return Err(invalid("grid references need a two-dimensional latent"));
            }
            let lo = cfg.f64_or("sampler", "grid_lo", -6.0)?;
            let hi = cfg.f64_or("sampler", "grid_hi", 6.0)?;
            let grid = GridOracle::new(model, x_row, lo, hi, resolution)?;
            Ok(Reference {
                mean: grid.mean().to_vec(),
                cov: grid.covariance().to_vec(),
                grid: Some(grid),
            })
        }
    }
}

impl Reference {
    fn score(&self, tail: &[Vec<f64>], sample_mean: &[f64], sample_cov: &[f64]) -> (f64, f64, f64) {
        let mean_error = l2_distance(sample_mean, &self.mean);
        let diff: Vec<f64> = sample_cov.iter().zip(&self.cov).map(|(a, b)| a - b).collect();
        let cov_error = frobenius(&diff);
        let hist_tv = match &self.grid {
            Some(grid) => {
                grid.sample_metrics(tail, HIST_BINS).map(|m| m.hist_tv).unwrap_or(f64::NAN)
            }
            None => f64::NAN,
        };
        (mean_error, cov_error, hist_tv)
    }
}

fn histogram_csv(
    references: &[Reference],
    tails: &[Vec<Vec<f64>>],
) -> Result<Option<String>, HarnessError> {
    let mut out = String::from("datapoint,coord,bin,oracle,sample\n");
    let mut any = false;
    for (i, (reference, tail)) in references.iter().zip(tails).enumerate() {
        let Some(grid) = &reference.grid else { continue };
        any = true;
        for coord in 0..2 {
            let oracle = grid.marginal_histogram(coord, HIST_BINS)?;
            let sample = grid.sample_histogram(tail, coord, HIST_BINS);
            for (bin, (o, s)) in oracle.iter().zip(&sample).enumerate() {
                let _ = writeln!(out, "{i},{coord},{bin},{o},{s}");
            }
        }
    }
    Ok(any.then_some(out))
}

fn initial_latents(
    cfg: &ConfigFile,
    model: &LatentVariableModel,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, HarnessError> {
    let d_z = model.latent_dim();
    match cfg.str_or("sampler", "init", "zeros") {
        "zeros" => Ok(vec![vec![0.0; d_z]; n]),
        "prior" => {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, CHAIN_STREAM) ^ 1);
            Ok((0..n).map(|_| model.prior.sample(&mut rng)).collect())
        }
        other => Err(invalid(format!("unknown chain init `{other}`"))),
    }
}

/// Gaussian fit to a single two-dimensional posterior, parameterized by its
/// mean and Cholesky factor.
pub struct GaussianFit {
    pub mean: Vec<f64>,
    /// Row-major 2x2 lower-triangular factor.
    pub chol: Vec<f64>,
}

impl GaussianFit {
    pub fn covariance(&self) -> Vec<f64> {
        let l = &self.chol;
        vec![l[0] * l[0], l[0] * l[2], l[0] * l[2], l[2] * l[2] + l[3] * l[3]]
    }

    pub fn draws(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut noise = SeededNoise::new(seed);
        (0..count)
            .map(|_| {
                let xi = noise.normal_vec(2);
                vec![
                    self.mean[0] + self.chol[0] * xi[0],
                    self.mean[1] + self.chol[2] * xi[0] + self.chol[3] * xi[1],
                ]
            })
            .collect()
    }
}

/// Reparameterized Gaussian variational fit to `p(z | x)` for one
/// observation, diagonal or full covariance; the entropy term drops additive
/// constants.
pub fn fit_gaussian_vi(
    model: &LatentVariableModel,
    x_row: &[f64],
    full_cov: bool,
    steps: usize,
    draws_per_step: usize,
    lr: f64,
    seed: u64,
) -> Result<GaussianFit, HarnessError> {
    if model.latent_dim() != 2 {
        return Err(invalid("the Gaussian fit supports two-dimensional latents only"));
    }
    let k = draws_per_step;
    let mu = Tensor::param(&[1, 2], vec![0.0; 2])?;
    let raw = Tensor::param(&[1, 3], vec![-0.5, 0.0, -0.5])?;
    let params = [mu.clone(), raw.clone()];
    let mut opt = Optimizer::adam(lr);
    let mut noise = SeededNoise::new(seed);
    let mut x_rep = Vec::with_capacity(k * 2);
    for _ in 0..k {
        x_rep.extend_from_slice(x_row);
    }
    let x_rep = Tensor::from_vec(&[k, 2], x_rep)?;
    let ones = Tensor::from_vec(&[k, 1], vec![1.0; k])?;
    for _ in 0..steps {
        for p in &params {
            p.zero_grad();
        }
        let xi = Tensor::from_vec(&[k, 2], noise.normal_vec(k * 2))?;
        let xi0 = xi.slice_cols(0..1)?;
        let xi1 = xi.slice_cols(1..2)?;
        let a = raw.slice_cols(0..1)?;
        let b = raw.slice_cols(2..3)?;
        let z0 = xi0.matmul(&a.exp()?)?;
        let mut z1 = xi1.matmul(&b.exp()?)?;
        if full_cov {
            z1 = z1.add(&xi0.matmul(&raw.slice_cols(1..2)?)?)?;
        }
        let z = Tensor::concat_cols(&[z0, z1])?.add(&ones.matmul(&mu)?)?;
        let energy = model.potential_sum(&x_rep, &z)?.scale(1.0 / k as f64)?;
        let loss = energy.sub(&a.add(&b)?.sum()?)?;
        loss.backward()?;
        opt.step(&params)?;
    }
    let m = mu.to_vec();
    let r = raw.to_vec();
    Ok(GaussianFit {
        mean: m,
        chol: vec![r[0].exp(), 0.0, if full_cov { r[1] } else { 0.0 }, r[2].exp()],
    })
}

struct ViSettings {
    steps: usize,
    draws_per_step: usize,
    lr: f64,
    sample_count: usize,
}

fn vi_settings(cfg: &ConfigFile) -> Result<ViSettings, HarnessError> {
    Ok(ViSettings {
        steps: cfg.usize_or("sampler", "vi_steps", 1500)?,
        draws_per_step: cfg.usize_or("sampler", "vi_draws", 64)?,
        lr: cfg.f64_or("sampler", "vi_lr", 0.05)?,
        sample_count: cfg.usize_or("sampler", "vi_samples", 10_000)?,
    })
}

fn fits_csv(rows: &[(String, usize, GaussianFit)]) -> String {
    let mut out = String::from("method,datapoint,mean0,mean1,cov00,cov01,cov10,cov11\n");
    for (method, datapoint, fit) in rows {
        let c = fit.covariance();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            method,
            datapoint,
            format_row(&fit.mean),
            format_row(&c[..2]),
            format_row(&c[2..])
        );
    }
    out
}

fn experiment_sample(
    kind: ExperimentKind,
    cfg: &ConfigFile,
    seed: u64,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    let model = build_model(cfg, seed)?;
    let dataset = load_dataset(cfg, &model, seed)?;
    let x = dataset.train;
    let n = x.shape()[0];
    let d_x = model.obs_dim();
    let settings = build_sampler(cfg)?;
    let conjugate = ConjugateOracle::new(&model).ok();
    let mut noise = SeededNoise::new(sub_seed(seed, CHAIN_STREAM));
    let xv = x.to_vec();

    let (stores, chain_acceptance) = match kind {
        ExperimentKind::SampleLd => {
            let inits = initial_latents(cfg, &model, n, seed)?;
            let mut stores = Vec::with_capacity(n);
            let mut acc = Vec::with_capacity(n);
            for i in 0..n {
                let row = &xv[i * d_x..(i + 1) * d_x];
                let run = run_ld(
                    &model,
                    row,
                    &inits[i],
                    settings.steps,
                    &settings.config,
                    &mut noise,
                    i,
                )?;
                acc.push(run.acceptance_rate);
                stores.push(run.store);
            }
            (stores, acc)
        }
        ExperimentKind::SampleAld => {
            let encoder = build_encoder(cfg, &model, n, seed)?;
            let rank = rank_diagnostic(&encoder.features(&x)?.detach())?;
            let mut rank_csv = String::from("index,eigenvalue\n");
            for (i, e) in rank.eigenvalues.iter().enumerate() {
                let _ = writeln!(rank_csv, "{i},{e}");
            }
            let _ = writeln!(
                rank_csv,
                "# rank {} of {}, full_row_rank {}, condition {}",
                rank.rank, n, rank.full_row_rank, rank.condition
            );
            write_file(&out_dir.join("rank.csv"), &rank_csv)?;
            if !rank.full_row_rank {
                println!("warning: feature matrix is rank deficient ({} of {n})", rank.rank);
            }
            let run = run_ald(&model, &encoder, &x, settings.steps, &settings.config, &mut noise)?;
            save_checkpoint(&out_dir.join("phi.bin"), &[("phi".to_string(), encoder.phi.clone())])?;
            let acc = vec![run.acceptance_rate; n];
            (run.stores, acc)
        }
        _ => unreachable!("experiment_sample only handles chain experiments"),
    };

    let mut references = Vec::with_capacity(n);
    let mut tails = Vec::with_capacity(n);
    let mut metric_rows = Vec::new();
    let method = if kind == ExperimentKind::SampleLd { "ld" } else { "ald" };
    for (i, store) in stores.iter().enumerate() {
        let row = &xv[i * d_x..(i + 1) * d_x];
        let reference = reference_for(cfg, &model, conjugate.as_ref(), row)?;
        let tail = store.tail(settings.burn_in);
        let (mean_error, cov_error, hist_tv) = reference.score(
            &tail,
            &store.tail_mean(settings.burn_in),
            &store.tail_covariance(settings.burn_in),
        );
        metric_rows.push(MetricRow {
            method: method.to_string(),
            datapoint: i,
            mean_error,
            cov_error,
            hist_tv,
            acceptance: chain_acceptance[i],
        });
        references.push(reference);
        tails.push(tail);
    }

    // Gaussian VI baselines make sense where the grid is the only oracle.
    if conjugate.is_none() && cfg.bool_or("sampler", "vi_baselines", true)? {
        let vi = vi_settings(cfg)?;
        let mut fit_rows = Vec::new();
        for i in 0..n {
            let row = &xv[i * d_x..(i + 1) * d_x];
            for (method, full) in [("vi-diag", false), ("vi-full", true)] {
                let fit_seed = sub_seed(seed, VI_STREAM)
                    .wrapping_add((i as u64) << 1)
                    .wrapping_add(u64::from(full));
                let fit = fit_gaussian_vi(
                    &model,
                    row,
                    full,
                    vi.steps,
                    vi.draws_per_step,
                    vi.lr,
                    fit_seed,
                )?;
                let draws = fit.draws(vi.sample_count, fit_seed ^ 0xd5a5);
                let (mean_error, cov_error, hist_tv) =
                    references[i].score(&draws, &fit.mean, &fit.covariance());
                metric_rows.push(MetricRow {
                    method: method.to_string(),
                    datapoint: i,
                    mean_error,
                    cov_error,
                    hist_tv,
                    acceptance: f64::NAN,
                });
                fit_rows.push((method.to_string(), i, fit));
            }
        }
        write_file(&out_dir.join("fits.csv"), &fits_csv(&fit_rows))?;
    }

    let store_refs: Vec<&SampleStore> = stores.iter().collect();
    write_file(&out_dir.join("samples.csv"), &stores_csv(&store_refs))?;
    write_file(&out_dir.join("metrics.csv"), &metrics_csv(&metric_rows))?;
    if let Some(hist) = histogram_csv(&references, &tails)? {
        write_file(&out_dir.join("hist.csv"), &hist)?;
    }
    for r in &metric_rows {
        println!(
            "{} datapoint {}: mean_error {:.4} cov_error {:.4} hist_tv {:.4}",
            r.method, r.datapoint, r.mean_error, r.cov_error, r.hist_tv
        );
    }
    Ok(())
}

fn experiment_ablate(cfg: &ConfigFile, seed: u64, out_dir: &Path) -> Result<(), HarnessError> {
    let model = build_model(cfg, seed)?;
    let oracle = ConjugateOracle::new(&model)?;
    let dataset = load_dataset(cfg, &model, seed)?;
    let x = dataset.train;
    let n = x.shape()[0];
    let d_x = model.obs_dim();
    let settings = build_sampler(cfg)?;
    let widths = cfg.vec_usize("encoder", "ablate_dims")?.unwrap_or_else(|| vec![2, 3, 128]);
    let true_det = spd_det(model.latent_dim(), oracle.posterior_cov()).unwrap_or(0.0);
    let xv = x.to_vec();

    let mut metrics = String::from("d,datapoint,mean_error,cov_error,det_ratio,collapsed\n");
    let mut table = String::from("d,min_det_ratio,max_det_ratio,collapsed_count,acceptance\n");
    for &d in &widths {
        let mut cfg_d = cfg.clone();
        cfg_d.set("encoder", "feature_dim", d);
        let encoder = build_encoder(&cfg_d, &model, n, seed)?;
        let mut noise = SeededNoise::new(sub_seed(seed, CHAIN_STREAM).wrapping_add(d as u64));
        let run = run_ald(&model, &encoder, &x, settings.steps, &settings.config, &mut noise)?;
        let mut min_ratio = f64::INFINITY;
        let mut max_ratio = f64::NEG_INFINITY;
        let mut collapsed_count = 0;
        for (i, store) in run.stores.iter().enumerate() {
            let row = &xv[i * d_x..(i + 1) * d_x];
            let sample_cov = store.tail_covariance(settings.burn_in);
            let det = spd_det(model.latent_dim(), &sample_cov).unwrap_or(0.0);
            let ratio = det / true_det;
            let collapsed = ratio < 0.5;
            collapsed_count += usize::from(collapsed);
            min_ratio = min_ratio.min(ratio);
            max_ratio = max_ratio.max(ratio);
            let mean_error =
                l2_distance(&store.tail_mean(settings.burn_in), &oracle.posterior_mean(row));
            let diff: Vec<f64> =
                sample_cov.iter().zip(oracle.posterior_cov()).map(|(a, b)| a - b).collect();
            let _ = writeln!(
                metrics,
                "{d},{i},{mean_error},{},{ratio},{}",
                frobenius(&diff),
                u8::from(collapsed)
            );
        }
        let _ = writeln!(
            table,
            "{d},{min_ratio},{max_ratio},{collapsed_count},{}",
            run.acceptance_rate
        );
        println!(
            "d={d}: det ratios in [{min_ratio:.3}, {max_ratio:.3}], {collapsed_count} collapsed, acceptance {:.3}",
            run.acceptance_rate
        );
    }
    write_file(&out_dir.join("metrics.csv"), &metrics)?;
    write_file(&out_dir.join("table.csv"), &table)?;
    Ok(())
}

struct TrainSettings {
    batch_size: usize,
    epochs: usize,
    steps_per_epoch: usize,
    lr: f64,
    sigma: f64,
    k_samples: usize,
}

fn train_settings(cfg: &ConfigFile, n: usize) -> Result<TrainSettings, HarnessError> {
    let batch_size = cfg.usize_or("trainer", "batch_size", 100)?.min(n.max(1));
    Ok(TrainSettings {
        batch_size,
        epochs: cfg.usize_or("trainer", "epochs", 10)?,
        steps_per_epoch: cfg.usize_or("trainer", "steps_per_epoch", n.div_ceil(batch_size))?,
        lr: cfg.f64_or("trainer", "lr", 1e-3)?,
        sigma: cfg.f64_or("trainer", "sigma", 0.05)?,
        k_samples: cfg.usize_or("trainer", "k_samples", 16)?,
    })
}

fn build_optimizer(cfg: &ConfigFile, lr: f64) -> Result<Optimizer, HarnessError> {
    match cfg.str_or("trainer", "optimizer", "adam") {
        "adam" => Ok(Optimizer::adam(lr)),
        "sgd" => Ok(Optimizer::sgd(lr)),
        other => Err(invalid(format!("unknown optimizer `{other}`"))),
    }
}

fn estimator_from(cfg: &ConfigFile) -> Result<GradEstimator, HarnessError> {
    match cfg.str_or("trainer", "estimator", "time-averaged") {
        "time-averaged" => Ok(GradEstimator::TimeAveraged),
        "final-sample" => Ok(GradEstimator::FinalSample),
        other => Err(invalid(format!("unknown estimator `{other}`"))),
    }
}

enum TrainerState {
    Lae {
        encoder: AmortizedEncoder,
        inner_steps: usize,
        inner: SamplerConfig,
        estimator: GradEstimator,
    },
    Vae {
        venc: GaussianVariationalEncoder,
    },
    Hoffman {
        venc: GaussianVariationalEncoder,
        ld_steps: usize,
        ld_step_size: f64,
    },
}

impl TrainerState {
    fn named_parameters(&self, model: &LatentVariableModel) -> Vec<(String, Tensor)> {
        let mut named = model.named_parameters();
        match self {
            TrainerState::Lae { encoder, .. } => named.extend(encoder.named_parameters()),
            TrainerState::Vae { venc } | TrainerState::Hoffman { venc, .. } => {
                named.extend(venc.named_parameters())
            }
        }
        named
    }

    /// Fixed-width Gaussian proposal centred on the amortized mean, used for
    /// held-out evaluation so every trainer reports the same bound.
    fn amortized_proposal(&self, sigma: f64) -> ElboProposal<'_> {
        match self {
            TrainerState::Lae { encoder, .. } => ElboProposal::Amortized { encoder, sigma },
            TrainerState::Vae { venc } | TrainerState::Hoffman { venc, .. } => {
                ElboProposal::Amortized { encoder: &venc.encoder, sigma }
            }
        }
    }

    fn proposal(&self, sigma: f64) -> ElboProposal<'_> {
        match self {
            TrainerState::Lae { encoder, .. } => ElboProposal::Amortized { encoder, sigma },
            TrainerState::Vae { venc } | TrainerState::Hoffman { venc, .. } => {
                ElboProposal::Variational(venc)
            }
        }
    }
}

fn build_trainer_state(
    kind: ExperimentKind,
    cfg: &ConfigFile,
    model: &LatentVariableModel,
    n: usize,
    seed: u64,
) -> Result<TrainerState, HarnessError> {
    let encoder = build_encoder(cfg, model, n, seed)?;
    match kind {
        ExperimentKind::TrainLae => Ok(TrainerState::Lae {
            encoder,
            inner_steps: cfg.usize_or("trainer", "inner_steps", 2)?,
            inner: SamplerConfig::new(
                cfg.f64_or("trainer", "inner_step_size", 1e-4)?,
                // Unadjusted by default: a joint accept decision over a full
                // minibatch rejects essentially every proposal, freezing the
                // chain. Small-data runs can switch the correction back on.
                cfg.bool_or("trainer", "inner_mh", false)?,
            ),
            estimator: estimator_from(cfg)?,
        }),
        ExperimentKind::TrainVae | ExperimentKind::EvalElbo => Ok(TrainerState::Vae {
            venc: GaussianVariationalEncoder::new(
                encoder,
                cfg.f64_or("trainer", "init_log_std", -2.3)?,
            )?,
        }),
        ExperimentKind::TrainHoffman => Ok(TrainerState::Hoffman {
            venc: GaussianVariationalEncoder::new(
                encoder,
                cfg.f64_or("trainer", "init_log_std", -2.3)?,
            )?,
            ld_steps: cfg.usize_or("trainer", "ld_steps", 2)?,
            ld_step_size: cfg.f64_or("trainer", "ld_step_size", 1e-4)?,
        }),
        _ => Err(invalid("not a training experiment")),
    }
}

fn experiment_train(
    kind: ExperimentKind,
    cfg: &ConfigFile,
    seed: u64,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    let model = build_model(cfg, seed)?;
    let dataset = load_dataset(cfg, &model, seed)?;
    let n = dataset.train.shape()[0];
    let settings = train_settings(cfg, n)?;
    let state = build_trainer_state(kind, cfg, &model, n, seed)?;
    let mut optimizer = build_optimizer(cfg, settings.lr)?;

    let mut report_csv = String::from("step,objective,acceptance\n");
    let mut epochs_csv =
        String::from("epoch,mean_objective,acceptance,neg_elbo_per_dim,elbo_std_error,seconds\n");
    for epoch in 0..settings.epochs {
        let t0 = Instant::now();
        let tc = TrainConfig {
            batch_size: settings.batch_size,
            train_steps: settings.steps_per_epoch,
            seed: sub_seed(seed, TRAIN_STREAM).wrapping_add(epoch as u64),
        };
        let report = match &state {
            TrainerState::Lae { encoder, inner_steps, inner, estimator } => {
                let config = LaeConfig {
                    train: tc,
                    inner_steps: *inner_steps,
                    inner: *inner,
                    estimator: *estimator,
                };
                train_lae(&model, encoder, &dataset.train, &config, &mut optimizer)?
            }
            TrainerState::Vae { venc } => {
                train_vae(&model, venc, &dataset.train, &tc, &mut optimizer)?
            }
            TrainerState::Hoffman { venc, ld_steps, ld_step_size } => {
                let config =
                    HoffmanConfig { train: tc, ld_steps: *ld_steps, ld_step_size: *ld_step_size };
                train_hoffman(&model, venc, &dataset.train, &config, &mut optimizer)?
            }
        };
        let steps = report.rows.len().max(1) as f64;
        let mean_objective = report.rows.iter().map(|r| r.objective).sum::<f64>() / steps;
        let acceptance = report.rows.iter().map(|r| r.acceptance).sum::<f64>() / steps;
        for row in &report.rows {
            let global = epoch * settings.steps_per_epoch + row.step;
            let _ = writeln!(report_csv, "{global},{},{}", row.objective, row.acceptance);
        }
        let (neg_elbo, std_error) = match &dataset.holdout {
            Some(holdout) => {
                let elbo = evaluate_elbo(
                    &model,
                    &state.amortized_proposal(settings.sigma),
                    holdout,
                    settings.k_samples,
                    sub_seed(seed, EVAL_STREAM).wrapping_add(epoch as u64),
                )?;
                (elbo.neg_elbo_per_dim, elbo.std_error_per_dim)
            }
            None => (f64::NAN, f64::NAN),
        };
        let seconds = t0.elapsed().as_secs_f64();
        let _ = writeln!(
            epochs_csv,
            "{epoch},{mean_objective},{acceptance},{neg_elbo},{std_error},{seconds}"
        );
        println!(
            "epoch {epoch}: objective {mean_objective:.4} acceptance {acceptance:.3} holdout nats/dim {neg_elbo:.4} ({seconds:.1}s)"
        );
    }
    write_file(&out_dir.join("report.csv"), &report_csv)?;
    write_file(&out_dir.join("epochs.csv"), &epochs_csv)?;
    save_checkpoint(&out_dir.join("checkpoint.bin"), &state.named_parameters(&model))?;
    Ok(())
}

fn experiment_eval_elbo(cfg: &ConfigFile, seed: u64, out_dir: &Path) -> Result<(), HarnessError> {
    let model = build_model(cfg, seed)?;
    let dataset = load_dataset(cfg, &model, seed)?;
    let n = dataset.train.shape()[0];
    let settings = train_settings(cfg, n)?;
    let proposal_kind = cfg.str_or("trainer", "proposal", "amortized");
    let state = match proposal_kind {
        "amortized" => {
            let encoder = build_encoder(cfg, &model, n, seed)?;
            TrainerState::Lae {
                encoder,
                inner_steps: 0,
                inner: SamplerConfig::new(1e-4, true),
                estimator: GradEstimator::TimeAveraged,
            }
        }
        "variational" => build_trainer_state(ExperimentKind::TrainVae, cfg, &model, n, seed)?,
        other => return Err(invalid(format!("unknown proposal `{other}`"))),
    };
    let default_path = out_dir.join("checkpoint.bin");
    let path = cfg.get("trainer", "checkpoint").map(Path::new).unwrap_or(default_path.as_path());
    let targets = state.named_parameters(&model);
    let mut loaded = load_checkpoint(path)?;
    // A checkpoint may carry parameters the chosen proposal does not use
    // (e.g. a variational log-std evaluated under the amortized bound).
    loaded.retain(|(name, _)| targets.iter().any(|(t, _)| t == name));
    restore_named(&loaded, &targets)?;
    let eval_set = dataset.holdout.as_ref().unwrap_or(&dataset.train);
    let elbo = evaluate_elbo(
        &model,
        &state.proposal(settings.sigma),
        eval_set,
        settings.k_samples,
        sub_seed(seed, EVAL_STREAM),
    )?;
    let mut csv = String::from("neg_elbo_per_dim,std_error_per_dim,evaluated,skipped\n");
    let _ = writeln!(
        csv,
        "{},{},{},{}",
        elbo.neg_elbo_per_dim, elbo.std_error_per_dim, elbo.evaluated, elbo.skipped
    );
    write_file(&out_dir.join("elbo.csv"), &csv)?;
    println!(
        "negative ELBO {:.6} nats/dim (std error {:.6}, {} terms, {} skipped)",
        elbo.neg_elbo_per_dim, elbo.std_error_per_dim, elbo.evaluated, elbo.skipped
    );
    Ok(())
}

/// Runs one experiment, writing all artifacts under `out_dir` (created if
/// missing) along with the exact config and seed used.
pub fn run_experiment(
    kind: ExperimentKind,
    cfg: &ConfigFile,
    seed: u64,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    fs::create_dir_all(out_dir)?;
    let mut used = cfg.clone();
    used.set("experiment", "kind", kind.name());
    used.set("experiment", "seed", seed);
    write_file(&out_dir.join("config_used.txt"), &used.to_text())?;
    match kind {
        ExperimentKind::SampleLd | ExperimentKind::SampleAld => {
            experiment_sample(kind, cfg, seed, out_dir)
        }
        ExperimentKind::AblateCapacity => experiment_ablate(cfg, seed, out_dir),
        ExperimentKind::TrainLae | ExperimentKind::TrainVae | ExperimentKind::TrainHoffman => {
            experiment_train(kind, cfg, seed, out_dir)
        }
        ExperimentKind::EvalElbo => experiment_eval_elbo(cfg, seed, out_dir),
    }
}
