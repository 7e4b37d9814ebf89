//! Ground-truth references the samplers are judged against: the closed-form
//! posterior of the linear-Gaussian model and a dense-grid integration that
//! works for any two-dimensional latent.

use thiserror::Error;

use crate::linalg::{
    chol_inverse, chol_logdet, chol_solve, cholesky, l2_distance, sample_covariance, sample_mean,
};
use crate::models::{LatentVariableModel, Likelihood, ModelError, LN_2PI};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("closed-form posterior requires the linear-Gaussian likelihood")]
    NotConjugate,
    #[error("grid integration covers two-dimensional latents, model has {0}")]
    LatentDim(usize),
    #[error("grid bounds must satisfy lo < hi, got [{lo}, {hi}]")]
    BadBounds { lo: f64, hi: f64 },
    #[error("grid resolution and histogram bins must be positive")]
    BadResolution,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Exact posterior `p(z | x)` for the prior `N(mu_z, Sigma_z)` with
/// observation `x = z + noise`, `noise ~ N(0, Sigma_x)`.
pub struct ConjugateOracle {
    dim: usize,
    prior_mean: Vec<f64>,
    prior_precision: Vec<f64>,
    obs_precision: Vec<f64>,
    post_cov: Vec<f64>,
    post_chol: Vec<f64>,
    marginal_cov: Vec<f64>,
    marginal_chol: Vec<f64>,
}

impl ConjugateOracle {
    pub fn new(model: &LatentVariableModel) -> Result<ConjugateOracle, OracleError> {
        let lik = match &model.likelihood {
            Likelihood::GaussianLinear(l) => l,
            _ => return Err(OracleError::NotConjugate),
        };
        let dim = model.latent_dim();
        let prior_precision = model.prior.precision().to_vec();
        let obs_precision = lik.noise_precision().to_vec();
        let mut post_precision = vec![0.0; dim * dim];
        for i in 0..dim * dim {
            post_precision[i] = prior_precision[i] + obs_precision[i];
        }
        let prec_chol = cholesky(dim, &post_precision).ok_or(OracleError::NotConjugate)?;
        let post_cov = chol_inverse(dim, &prec_chol);
        let post_chol = cholesky(dim, &post_cov).ok_or(OracleError::NotConjugate)?;
        let mut marginal_cov = vec![0.0; dim * dim];
        for i in 0..dim * dim {
            marginal_cov[i] = model.prior.cov()[i] + lik.noise_cov()[i];
        }
        let marginal_chol = cholesky(dim, &marginal_cov).ok_or(OracleError::NotConjugate)?;
        Ok(ConjugateOracle {
            dim,
            prior_mean: model.prior.mean().to_vec(),
            prior_precision,
            obs_precision,
            post_cov,
            post_chol,
            marginal_cov,
            marginal_chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Posterior covariance `(Sigma_z^-1 + Sigma_x^-1)^-1`, independent of x.
    pub fn posterior_cov(&self) -> &[f64] {
        &self.post_cov
    }

    /// Posterior mean `Sigma_post (Sigma_z^-1 mu_z + Sigma_x^-1 x)`.
    pub fn posterior_mean(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        let mut rhs = vec![0.0; self.dim];
        for i in 0..self.dim {
            for j in 0..self.dim {
                rhs[i] += self.prior_precision[i * self.dim + j] * self.prior_mean[j]
                    + self.obs_precision[i * self.dim + j] * x[j];
            }
        }
        let mut mean = vec![0.0; self.dim];
        for i in 0..self.dim {
            for j in 0..self.dim {
                mean[i] += self.post_cov[i * self.dim + j] * rhs[j];
            }
        }
        mean
    }

    /// Log evidence `log p(x) = log N(x; mu_z, Sigma_z + Sigma_x)`.
    pub fn log_marginal(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim);
        let diff: Vec<f64> = x.iter().zip(&self.prior_mean).map(|(a, b)| a - b).collect();
        let solved = chol_solve(self.dim, &self.marginal_chol, &diff);
        let quad: f64 = diff.iter().zip(&solved).map(|(a, b)| a * b).sum();
        -0.5 * (self.dim as f64 * LN_2PI + chol_logdet(self.dim, &self.marginal_chol) + quad)
    }

    pub fn marginal_cov(&self) -> &[f64] {
        &self.marginal_cov
    }

    /// Exact posterior draw via the covariance Cholesky factor.
    pub fn sample_posterior<R: rand::Rng>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        use rand_distr::StandardNormal;
        let mut out = self.posterior_mean(x);
        let xi: Vec<f64> = (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for i in 0..self.dim {
            for j in 0..=i {
                out[i] += self.post_chol[i * self.dim + j] * xi[j];
            }
        }
        out
    }
}

/// Dense cell-centered integration of `exp(-U(x, .))` over a square window,
/// giving reference moments, marginal histograms, and the log normalizer for
/// any model with a two-dimensional latent.
pub struct GridOracle {
    lo: f64,
    hi: f64,
    resolution: usize,
    probs: Vec<f64>,
    log_marginal: f64,
    mean: Vec<f64>,
    cov: Vec<f64>,
}

impl GridOracle {
    pub fn new(
        model: &LatentVariableModel,
        x_row: &[f64],
        lo: f64,
        hi: f64,
        resolution: usize,
    ) -> Result<GridOracle, OracleError> {
        if model.latent_dim() != 2 {
            return Err(OracleError::LatentDim(model.latent_dim()));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(OracleError::BadBounds { lo, hi });
        }
        if resolution == 0 {
            return Err(OracleError::BadResolution);
        }
        let cell = (hi - lo) / resolution as f64;
        let mut coords = Vec::with_capacity(resolution * resolution * 2);
        for i in 0..resolution {
            let z1 = lo + (i as f64 + 0.5) * cell;
            for j in 0..resolution {
                let z0 = lo + (j as f64 + 0.5) * cell;
                coords.push(z0);
                coords.push(z1);
            }
        }
        let n = resolution * resolution;
        let z = Tensor::from_vec(&[n, 2], coords.clone())?;
        let x = Tensor::from_vec(&[1, x_row.len()], x_row.to_vec())?;
        // Broadcast the single observation across the grid batch.
        let x_rep = {
            let mut rep = Vec::with_capacity(n * x_row.len());
            for _ in 0..n {
                rep.extend_from_slice(x_row);
            }
            Tensor::from_vec(&[n, x_row.len()], rep)?
        };
        drop(x);
        let potential = model.potential_batch(&x_rep, &z)?;
        let u = potential.to_vec();
        let u_min = u.iter().copied().fold(f64::INFINITY, f64::min);
        let mut probs: Vec<f64> = u.iter().map(|v| (-(v - u_min)).exp()).collect();
        let total: f64 = probs.iter().sum();
        let log_marginal = total.ln() - u_min + 2.0 * cell.ln();
        for p in &mut probs {
            *p /= total;
        }
        let mut mean = vec![0.0; 2];
        for (k, p) in probs.iter().enumerate() {
            mean[0] += p * coords[2 * k];
            mean[1] += p * coords[2 * k + 1];
        }
        let mut cov = vec![0.0; 4];
        for (k, p) in probs.iter().enumerate() {
            let d0 = coords[2 * k] - mean[0];
            let d1 = coords[2 * k + 1] - mean[1];
            cov[0] += p * d0 * d0;
            cov[1] += p * d0 * d1;
            cov[3] += p * d1 * d1;
        }
        cov[2] = cov[1];
        Ok(GridOracle { lo, hi, resolution, probs, log_marginal, mean, cov })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    /// Log of the truncated normalizer `integral of exp(-U)` over the window.
    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    /// Marginal probability histogram of coordinate `coord` over `bins`
    /// equal cells spanning the window; sums to one.
    pub fn marginal_histogram(&self, coord: usize, bins: usize) -> Result<Vec<f64>, OracleError> {
        if bins == 0 {
            return Err(OracleError::BadResolution);
        }
        assert!(coord < 2);
        let mut hist = vec![0.0; bins];
        for (k, p) in self.probs.iter().enumerate() {
            let (j, i) = (k % self.resolution, k / self.resolution);
            let grid_index = if coord == 0 { j } else { i };
            let bin = grid_index * bins / self.resolution;
            hist[bin.min(bins - 1)] += p;
        }
        Ok(hist)
    }

    /// Histogram of sample values for coordinate `coord` over the same bins;
    /// values outside the window land in the edge bins.
    pub fn sample_histogram(&self, samples: &[Vec<f64>], coord: usize, bins: usize) -> Vec<f64> {
        let mut hist = vec![0.0; bins];
        if samples.is_empty() {
            return hist;
        }
        let w = (self.hi - self.lo) / bins as f64;
        for s in samples {
            let bin = ((s[coord] - self.lo) / w).floor();
            let bin = (bin.max(0.0) as usize).min(bins - 1);
            hist[bin] += 1.0;
        }
        for h in &mut hist {
            *h /= samples.len() as f64;
        }
        hist
    }

    /// Mean, covariance, and worst-coordinate histogram discrepancies of a
    /// sample set against the grid reference.
    pub fn sample_metrics(
        &self,
        samples: &[Vec<f64>],
        bins: usize,
    ) -> Result<SampleMetrics, OracleError> {
        let mean_error = l2_distance(&sample_mean(samples), &self.mean);
        let cov_error = l2_distance(&sample_covariance(samples), &self.cov);
        let mut hist_tv: f64 = 0.0;
        for coord in 0..2 {
            let reference = self.marginal_histogram(coord, bins)?;
            let got = self.sample_histogram(samples, coord, bins);
            let tv = 0.5 * reference.iter().zip(&got).map(|(a, b)| (a - b).abs()).sum::<f64>();
            hist_tv = hist_tv.max(tv);
        }
        Ok(SampleMetrics { mean_error, cov_error, hist_tv })
    }
}

/// How far a sample set sits from a reference distribution: Euclidean mean
/// error, Frobenius covariance error, and the larger of the two marginal
/// histogram total-variation distances.
#[derive(Debug, Clone, Copy)]
pub struct SampleMetrics {
    pub mean_error: f64,
    pub cov_error: f64,
    pub hist_tv: f64,
}
