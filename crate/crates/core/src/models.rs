//! Latent-variable models: Gaussian priors, three likelihood families, and
//! the differentiable potential `U(x, z) = -log p(x, z)` the samplers and
//! trainers descend.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::linalg::{chol_inverse, chol_logdet, chol_solve, cholesky};
use crate::nn::Mlp;
use crate::tensor::{log_sigmoid_scalar, sigmoid_scalar, softplus_scalar, Tensor, TensorError};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Half-width of one pixel bin on the `[-1, 1]` intensity grid.
pub const PIXEL_BIN_HALF_WIDTH: f64 = 1.0 / 255.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("covariance must be symmetric positive definite")]
    NotSpd,
    #[error("covariance is asymmetric at ({i},{j}): {a} vs {b}")]
    Asymmetric { i: usize, j: usize, a: f64, b: f64 },
    #[error("{what}: got length {got}, expected {expected}")]
    Dimension { what: &'static str, got: usize, expected: usize },
    #[error("observation noise scale must be positive, got {0}")]
    BadNoiseScale(f64),
    #[error("pixel value {value} (index {index}) is off the 256-level grid")]
    PixelOffGrid { index: usize, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn check_spd(dim: usize, cov: &[f64]) -> Result<Vec<f64>, ModelError> {
    if cov.len() != dim * dim {
        return Err(ModelError::Dimension {
            what: "covariance",
            got: cov.len(),
            expected: dim * dim,
        });
    }
    for i in 0..dim {
        for j in (i + 1)..dim {
            let (a, b) = (cov[i * dim + j], cov[j * dim + i]);
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(ModelError::Asymmetric { i, j, a, b });
            }
        }
    }
    cholesky(dim, cov).ok_or(ModelError::NotSpd)
}

/// Multivariate Gaussian with fixed mean and SPD covariance.
pub struct GaussianPrior {
    dim: usize,
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Vec<f64>,
    precision: Vec<f64>,
    log_norm: f64, // -(d/2) ln 2pi - (1/2) ln det
    precision_t: Tensor,
    neg_mean_t: Tensor,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<GaussianPrior, ModelError> {
        let dim = mean.len();
        let chol = check_spd(dim, &cov)?;
        let precision = chol_inverse(dim, &chol);
        let log_norm = -0.5 * (dim as f64 * LN_2PI + chol_logdet(dim, &chol));
        let precision_t = Tensor::from_vec(&[dim, dim], precision.clone())?;
        let neg_mean_t = Tensor::from_vec(&[dim], mean.iter().map(|v| -v).collect())?;
        Ok(GaussianPrior { dim, mean, cov, chol, precision, log_norm, precision_t, neg_mean_t })
    }

    pub fn standard(dim: usize) -> GaussianPrior {
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = 1.0;
        }
        GaussianPrior::new(vec![0.0; dim], cov).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    /// Log density of each row of `z` (`[n, d] -> [n]`), differentiable in `z`.
    pub fn log_density_batch(&self, z: &Tensor) -> Result<Tensor, ModelError> {
        if z.shape().len() != 2 || z.shape()[1] != self.dim {
            return Err(ModelError::Dimension {
                what: "latent batch",
                got: if z.shape().len() == 2 { z.shape()[1] } else { 0 },
                expected: self.dim,
            });
        }
        let diff = z.add(&self.neg_mean_t)?;
        let quad = diff.matmul(&self.precision_t)?.mul(&diff)?.row_sum()?;
        Ok(quad.scale(-0.5)?.add_scalar(self.log_norm)?)
    }

    /// Plain (graph-free) log density of a single point.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        assert_eq!(z.len(), self.dim);
        let diff: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let mut quad = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                quad += diff[i] * self.precision[i * self.dim + j] * diff[j];
            }
        }
        self.log_norm - 0.5 * quad
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let xi: Vec<f64> = (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut out = self.mean.clone();
        for i in 0..self.dim {
            for j in 0..=i {
                out[i] += self.chol[i * self.dim + j] * xi[j];
            }
        }
        out
    }

    /// Solves `cov * y = v` (used by the conjugate oracle).
    pub fn cov_solve(&self, v: &[f64]) -> Vec<f64> {
        chol_solve(self.dim, &self.chol, v)
    }
}

/// `p(x | z) = N(x; z, Sigma_x)`: observation is the latent plus correlated
/// Gaussian noise. Latent and observed dimensions coincide.
pub struct GaussianLinearLikelihood {
    noise: GaussianPrior,
}

impl GaussianLinearLikelihood {
    pub fn new(cov: Vec<f64>) -> Result<GaussianLinearLikelihood, ModelError> {
        let dim = (cov.len() as f64).sqrt().round() as usize;
        Ok(GaussianLinearLikelihood { noise: GaussianPrior::new(vec![0.0; dim], cov)? })
    }

    pub fn dim(&self) -> usize {
        self.noise.dim()
    }

    pub fn noise_cov(&self) -> &[f64] {
        self.noise.cov()
    }

    pub fn noise_precision(&self) -> &[f64] {
        self.noise.precision()
    }

    fn log_density_batch(&self, x: &Tensor, z: &Tensor) -> Result<Tensor, ModelError> {
        let diff = z.sub(x)?;
        self.noise.log_density_batch(&diff)
    }

    pub fn sample<R: Rng>(&self, z: &[f64], rng: &mut R) -> Vec<f64> {
        let noise = self.noise.sample(rng);
        z.iter().zip(noise).map(|(a, b)| a + b).collect()
    }
}

/// `p(x | z) = N(x; f(z), sigma_x^2 I)` with an MLP mean function.
pub struct NeuralGaussianLikelihood {
    pub decoder: Mlp,
    sigma_x: f64,
}

impl NeuralGaussianLikelihood {
    pub fn new(decoder: Mlp, sigma_x: f64) -> Result<NeuralGaussianLikelihood, ModelError> {
        if !(sigma_x > 0.0) || !sigma_x.is_finite() {
            return Err(ModelError::BadNoiseScale(sigma_x));
        }
        Ok(NeuralGaussianLikelihood { decoder, sigma_x })
    }

    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }

    fn log_density_batch(&self, x: &Tensor, z: &Tensor) -> Result<Tensor, ModelError> {
        let mean = self.decoder.forward(z)?;
        let diff = mean.sub(x)?;
        let d = self.decoder.output_dim() as f64;
        let log_norm = -0.5 * d * (LN_2PI + 2.0 * self.sigma_x.ln());
        let quad = diff.mul(&diff)?.row_sum()?;
        Ok(quad.scale(-0.5 / (self.sigma_x * self.sigma_x))?.add_scalar(log_norm)?)
    }

    pub fn sample<R: Rng>(&self, z: &[f64], rng: &mut R) -> Result<Vec<f64>, ModelError> {
        let zt = Tensor::from_vec(&[1, z.len()], z.to_vec())?;
        let mean = self.decoder.forward(&zt)?.to_vec();
        let dist = Normal::new(0.0, self.sigma_x).unwrap();
        Ok(mean.iter().map(|m| m + dist.sample(rng)).collect())
    }
}

/// Discretized logistic likelihood over pixels on the `[-1, 1]` grid: each
/// observed intensity is one of 256 levels, and its probability is the
/// logistic CDF mass of the surrounding bin (tails absorbed at the ends).
/// The logistic location comes from an MLP decoder; the shared scale is
/// `softplus(raw_scale)^(-1/2)`.
pub struct DiscretizedLogisticLikelihood {
    pub decoder: Mlp,
    pub raw_scale: Tensor,
}

impl DiscretizedLogisticLikelihood {
    pub fn new(
        decoder: Mlp,
        raw_scale_init: f64,
    ) -> Result<DiscretizedLogisticLikelihood, ModelError> {
        Ok(DiscretizedLogisticLikelihood {
            decoder,
            raw_scale: Tensor::param(&[1], vec![raw_scale_init])?,
        })
    }

    /// Logistic scale `s = softplus(raw_scale)^(-1/2)` as a graph node.
    pub fn scale_tensor(&self) -> Result<Tensor, ModelError> {
        Ok(self.raw_scale.softplus()?.powf(-0.5)?)
    }

    pub fn scale_value(&self) -> f64 {
        softplus_scalar(self.raw_scale.value()).powf(-0.5)
    }

    fn validate_pixels(&self, x: &Tensor) -> Result<(), ModelError> {
        for (index, &value) in x.data().iter().enumerate() {
            let level = (value + 1.0) * 127.5;
            if !(0.0..=255.0).contains(&level) || (level - level.round()).abs() > 1e-9 {
                return Err(ModelError::PixelOffGrid { index, value });
            }
        }
        Ok(())
    }

    fn log_density_batch(&self, x: &Tensor, z: &Tensor) -> Result<Tensor, ModelError> {
        self.validate_pixels(x)?;
        let mu = self.decoder.forward(z)?;
        if mu.shape() != x.shape() {
            return Err(ModelError::Dimension {
                what: "decoder output",
                got: mu.shape()[1],
                expected: x.shape()[1],
            });
        }
        let scale = self.scale_tensor()?;
        Ok(discretized_logistic_row_loglik(&mu, &scale, &x.data(), PIXEL_BIN_HALF_WIDTH)?)
    }
}

/// Per-element log bin mass and its partials with respect to the logistic
/// location and scale, all in log space so tail bins stay finite.
fn logistic_bin(xv: f64, m: f64, s: f64, half: f64) -> (f64, f64, f64) {
    if xv >= 1.0 {
        // Top bin absorbs the right tail: P = 1 - sigma(l).
        let l = (xv - half - m) / s;
        let logp = -softplus_scalar(l);
        let sl = sigmoid_scalar(l);
        (logp, sl / s, sl * l / s)
    } else if xv <= -1.0 {
        // Bottom bin absorbs the left tail: P = sigma(u).
        let u = (xv + half - m) / s;
        let logp = -softplus_scalar(-u);
        let smu = sigmoid_scalar(-u);
        (logp, -smu / s, -smu * u / s)
    } else {
        let u = (xv + half - m) / s;
        let l = (xv - half - m) / s;
        let lsu = log_sigmoid_scalar(u);
        let lsl = log_sigmoid_scalar(l);
        let delta = lsu - lsl; // > 0 since u > l
        let logp =
            if delta <= 20.0 { lsl + delta.exp_m1().ln() } else { lsu + (-(-delta).exp()).ln_1p() };
        // d logP / du = sigma'(u)/P, d logP / dl = -sigma'(l)/P, via logs.
        let dpu = (lsu + log_sigmoid_scalar(-u) - logp).exp();
        let dpl = -(lsl + log_sigmoid_scalar(-l) - logp).exp();
        let dm = -(dpu + dpl) / s;
        let ds = -(u * dpu + l * dpl) / s;
        (logp, dm, ds)
    }
}

/// Row sums of discretized-logistic log masses: `mu` is `[n, p]`, `scale` a
/// positive scalar tensor, `x` the flattened `[n, p]` pixel targets. Output
/// `[n]`, differentiable in `mu` and `scale`.
pub fn discretized_logistic_row_loglik(
    mu: &Tensor,
    scale: &Tensor,
    x: &[f64],
    half: f64,
) -> Result<Tensor, TensorError> {
    if mu.shape().len() != 2 {
        return Err(TensorError::BadShape {
            op: "discretized_logistic",
            expected: "rank-2 location matrix",
            got: mu.shape().to_vec(),
        });
    }
    let (n, p) = (mu.shape()[0], mu.shape()[1]);
    if x.len() != n * p || scale.len() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "discretized_logistic",
            lhs: mu.shape().to_vec(),
            rhs: vec![x.len()],
        });
    }
    let s = scale.value();
    if !(s > 0.0) {
        return Err(TensorError::NonFinite { op: "discretized_logistic" });
    }
    let mud = mu.data();
    let mut rows = vec![0.0; n];
    for i in 0..n {
        for j in 0..p {
            let (logp, _, _) = logistic_bin(x[i * p + j], mud[i * p + j], s, half);
            rows[i] += logp;
        }
    }
    drop(mud);
    let xc: Vec<f64> = x.to_vec();
    let backward =
        Box::new(move |dy: &[f64], parents: &[Tensor], flows: &mut crate::tensor::Flows| {
            let (mu, scale) = (&parents[0], &parents[1]);
            let mud = mu.data().clone();
            let s = scale.value();
            let mut ds_total = 0.0;
            if mu.requires_grad() {
                let buf = flows.buf(mu);
                for i in 0..n {
                    for j in 0..p {
                        let (_, dm, ds) = logistic_bin(xc[i * p + j], mud[i * p + j], s, half);
                        buf[i * p + j] += dy[i] * dm;
                        ds_total += dy[i] * ds;
                    }
                }
            } else {
                for i in 0..n {
                    for j in 0..p {
                        let (_, _, ds) = logistic_bin(xc[i * p + j], mud[i * p + j], s, half);
                        ds_total += dy[i] * ds;
                    }
                }
            }
            if scale.requires_grad() {
                flows.buf(scale)[0] += ds_total;
            }
            Ok(())
        });
    Tensor::custom("discretized_logistic", vec![n], rows, vec![mu.clone(), scale.clone()], backward)
}

/// Penalty `(b + 2 softplus(-b)) / m` keeping the learned logistic scale
/// proper; `m` is the data dimensionality it is amortized over.
pub fn scale_regularizer(raw_scale: &Tensor, m: usize) -> Result<Tensor, TensorError> {
    assert!(m > 0, "data dimensionality must be positive");
    raw_scale.add(&raw_scale.neg()?.softplus()?.scale(2.0)?)?.scale(1.0 / m as f64)
}

pub enum Likelihood {
    GaussianLinear(GaussianLinearLikelihood),
    NeuralGaussian(NeuralGaussianLikelihood),
    DiscretizedLogistic(DiscretizedLogisticLikelihood),
}

impl Likelihood {
    pub fn latent_dim(&self) -> usize {
        match self {
            Likelihood::GaussianLinear(l) => l.dim(),
            Likelihood::NeuralGaussian(l) => l.decoder.input_dim(),
            Likelihood::DiscretizedLogistic(l) => l.decoder.input_dim(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Likelihood::GaussianLinear(l) => l.dim(),
            Likelihood::NeuralGaussian(l) => l.decoder.output_dim(),
            Likelihood::DiscretizedLogistic(l) => l.decoder.output_dim(),
        }
    }

    pub fn log_density_batch(&self, x: &Tensor, z: &Tensor) -> Result<Tensor, ModelError> {
        match self {
            Likelihood::GaussianLinear(l) => l.log_density_batch(x, z),
            Likelihood::NeuralGaussian(l) => l.log_density_batch(x, z),
            Likelihood::DiscretizedLogistic(l) => l.log_density_batch(x, z),
        }
    }

    /// Trainable likelihood parameters (theta), in a stable order.
    pub fn parameters(&self) -> Vec<Tensor> {
        match self {
            Likelihood::GaussianLinear(_) => Vec::new(),
            Likelihood::NeuralGaussian(l) => l.decoder.parameters(),
            Likelihood::DiscretizedLogistic(l) => {
                let mut p = l.decoder.parameters();
                p.push(l.raw_scale.clone());
                p
            }
        }
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        match self {
            Likelihood::GaussianLinear(_) => Vec::new(),
            Likelihood::NeuralGaussian(l) => l.decoder.named_parameters("decoder"),
            Likelihood::DiscretizedLogistic(l) => {
                let mut p = l.decoder.named_parameters("decoder");
                p.push(("raw_scale".to_string(), l.raw_scale.clone()));
                p
            }
        }
    }
}

/// Prior plus likelihood, with the joint potential `U = -log p(x, z)`.
pub struct LatentVariableModel {
    pub prior: GaussianPrior,
    pub likelihood: Likelihood,
}

impl LatentVariableModel {
    pub fn new(
        prior: GaussianPrior,
        likelihood: Likelihood,
    ) -> Result<LatentVariableModel, ModelError> {
        if prior.dim() != likelihood.latent_dim() {
            return Err(ModelError::Dimension {
                what: "likelihood latent input",
                got: likelihood.latent_dim(),
                expected: prior.dim(),
            });
        }
        Ok(LatentVariableModel { prior, likelihood })
    }

    pub fn latent_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.likelihood.obs_dim()
    }

    fn check_obs(&self, x: &Tensor) -> Result<(), ModelError> {
        if x.shape().len() != 2 || x.shape()[1] != self.obs_dim() {
            return Err(ModelError::Dimension {
                what: "observation batch",
                got: if x.shape().len() == 2 { x.shape()[1] } else { 0 },
                expected: self.obs_dim(),
            });
        }
        Ok(())
    }

    /// Joint log density `log p(x, z)` per batch row.
    pub fn log_joint_batch(&self, x: &Tensor, z: &Tensor) -> Result<Tensor, ModelError> {
        self.check_obs(x)?;
        let lp = self.prior.log_density_batch(z)?;
        let ll = self.likelihood.log_density_batch(x, z)?;
        Ok(lp.add(&ll)?)
    }

    /// Potential `U(x, z) = -log p(x, z)` per batch row, shape `[n]`.
    pub fn potential_batch(&self, x: &Tensor, z: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.log_joint_batch(x, z)?.neg()?)
    }

    /// Scalar potential summed over the batch.
    pub fn potential_sum(&self, x: &Tensor, z: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.potential_batch(x, z)?.sum()?)
    }

    /// Likelihood parameters theta.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.likelihood.parameters()
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        self.likelihood.named_parameters()
    }

    /// Scale penalty added to training losses, if the likelihood has one;
    /// `examples` is the training-set size the penalty is spread over.
    pub fn regularizer(&self, examples: usize) -> Result<Option<Tensor>, ModelError> {
        match &self.likelihood {
            Likelihood::DiscretizedLogistic(l) => {
                Ok(Some(scale_regularizer(&l.raw_scale, examples)?))
            }
            _ => Ok(None),
        }
    }
}
