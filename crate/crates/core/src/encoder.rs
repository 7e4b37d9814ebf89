//! Amortized encoder `f(x) = Phi g(x)`: a feature map `g` (one-hot lookup or
//! MLP) followed by a bias-free final layer `Phi`, the matrix the Langevin
//! samplers treat as their state.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{dgemm_nt, sym_eigenvalues};
use crate::nn::Mlp;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("one-hot features index a fixed set of {expected} datapoints, got a batch of {got}")]
    OneHotBatch { got: usize, expected: usize },
    #[error("feature batch has width {got}, encoder expects {expected}")]
    FeatureWidth { got: usize, expected: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Feature map `g`. `OneHot` ties feature `i` to datapoint `i` (the feature
/// matrix of the full dataset is the identity), so it only accepts batches
/// covering the whole dataset in order.
pub enum FeatureMap {
    OneHot { n: usize },
    Mlp(Mlp),
}

impl FeatureMap {
    pub fn feature_dim(&self) -> usize {
        match self {
            FeatureMap::OneHot { n } => *n,
            FeatureMap::Mlp(m) => m.output_dim(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, EncoderError> {
        match self {
            FeatureMap::OneHot { n } => {
                if x.shape()[0] != *n {
                    return Err(EncoderError::OneHotBatch { got: x.shape()[0], expected: *n });
                }
                let mut eye = vec![0.0; n * n];
                for i in 0..*n {
                    eye[i * n + i] = 1.0;
                }
                Ok(Tensor::from_vec(&[*n, *n], eye)?)
            }
            FeatureMap::Mlp(m) => Ok(m.forward(x)?),
        }
    }

    /// Feature-map parameters (psi); empty for the one-hot lookup.
    pub fn parameters(&self) -> Vec<Tensor> {
        match self {
            FeatureMap::OneHot { .. } => Vec::new(),
            FeatureMap::Mlp(m) => m.parameters(),
        }
    }

    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, Tensor)> {
        match self {
            FeatureMap::OneHot { .. } => Vec::new(),
            FeatureMap::Mlp(m) => m.named_parameters(prefix),
        }
    }
}

/// Encoder state: feature map plus the `[d_z, d]` final layer `Phi`.
pub struct AmortizedEncoder {
    pub feature_map: FeatureMap,
    pub phi: Tensor,
}

impl AmortizedEncoder {
    /// `phi_std = 0` starts `Phi` at zero; otherwise entries are drawn
    /// `N(0, phi_std^2)`.
    pub fn new<R: Rng>(
        feature_map: FeatureMap,
        latent_dim: usize,
        phi_std: f64,
        rng: &mut R,
    ) -> Result<AmortizedEncoder, EncoderError> {
        let d = feature_map.feature_dim();
        let data: Vec<f64> =
            (0..latent_dim * d).map(|_| phi_std * rng.sample::<f64, _>(StandardNormal)).collect();
        let phi = Tensor::param(&[latent_dim, d], data)?;
        Ok(AmortizedEncoder { feature_map, phi })
    }

    pub fn latent_dim(&self) -> usize {
        self.phi.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.phi.shape()[1]
    }

    /// `g(x)` for a batch, `[n, d_x] -> [n, d]`, attached to psi.
    pub fn features(&self, x: &Tensor) -> Result<Tensor, EncoderError> {
        self.feature_map.forward(x)
    }

    /// `z = g Phi^T` for a precomputed feature batch, `[n, d] -> [n, d_z]`.
    pub fn encode_features(&self, g: &Tensor) -> Result<Tensor, EncoderError> {
        if g.shape().len() != 2 || g.shape()[1] != self.feature_dim() {
            return Err(EncoderError::FeatureWidth {
                got: if g.shape().len() == 2 { g.shape()[1] } else { 0 },
                expected: self.feature_dim(),
            });
        }
        Ok(g.matmul_nt(&self.phi)?)
    }

    /// Full encode `f(x) = Phi g(x)` per batch row.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor, EncoderError> {
        let g = self.features(x)?;
        self.encode_features(&g)
    }

    /// Feature-map parameters (psi). `Phi` is deliberately excluded: the
    /// samplers own it.
    pub fn psi_parameters(&self) -> Vec<Tensor> {
        self.feature_map.parameters()
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut params = self.feature_map.named_parameters("features");
        params.push(("phi".to_string(), self.phi.clone()));
        params
    }
}

/// Spectrum of the feature Gram matrix `G G^T` for a feature batch. The
/// latent dynamics are exact only when the batch has full row rank.
pub struct RankReport {
    /// Gram eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub rank: usize,
    pub full_row_rank: bool,
    /// Ratio of largest to smallest eigenvalue counted toward the rank.
    pub condition: f64,
}

pub fn rank_diagnostic(features: &Tensor) -> Result<RankReport, EncoderError> {
    if features.shape().len() != 2 {
        return Err(EncoderError::Tensor(TensorError::BadShape {
            op: "rank_diagnostic",
            expected: "rank-2 feature matrix",
            got: features.shape().to_vec(),
        }));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let g = features.data();
    let mut gram = vec![0.0; n * n];
    dgemm_nt(n, d, n, &g, &g, 0.0, &mut gram);
    drop(g);
    let mut eigenvalues = sym_eigenvalues(n, &gram);
    eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let max_eig = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let tol = max_eig * (n.max(d) as f64) * 1e-12;
    let rank = eigenvalues.iter().filter(|&&e| e > tol).count();
    let min_counted = if rank > 0 { eigenvalues[rank - 1] } else { 0.0 };
    let condition = if rank > 0 { max_eig / min_counted } else { f64::INFINITY };
    Ok(RankReport { eigenvalues, rank, full_row_rank: rank == n, condition })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, WeightInit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_features_are_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = AmortizedEncoder::new(FeatureMap::OneHot { n: 4 }, 2, 0.0, &mut rng).unwrap();
        let x = Tensor::from_vec(&[4, 3], vec![0.5; 12]).unwrap();
        let g = enc.features(&x).unwrap();
        assert_eq!(g.shape(), &[4, 4]);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(g.data()[i * 4 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
        let report = rank_diagnostic(&g).unwrap();
        assert_eq!(report.rank, 4);
        assert!(report.full_row_rank);
        assert!((report.condition - 1.0).abs() < 1e-12);
        for e in &report.eigenvalues {
            assert!((e - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_rejects_partial_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = AmortizedEncoder::new(FeatureMap::OneHot { n: 4 }, 2, 0.0, &mut rng).unwrap();
        let x = Tensor::from_vec(&[3, 3], vec![0.0; 9]).unwrap();
        assert!(matches!(enc.features(&x), Err(EncoderError::OneHotBatch { got: 3, expected: 4 })));
    }

    #[test]
    fn one_hot_encoding_reads_phi_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = AmortizedEncoder::new(FeatureMap::OneHot { n: 3 }, 2, 0.0, &mut rng).unwrap();
        enc.phi.set_data(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(); // [2, 3]
        let x = Tensor::from_vec(&[3, 1], vec![0.0; 3]).unwrap();
        let z = enc.encode(&x).unwrap();
        assert_eq!(z.shape(), &[3, 2]);
        assert_eq!(z.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn mlp_features_with_duplicate_inputs_lose_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::init(
            &mut rng,
            &[2, 16, 8],
            Activation::Tanh,
            true,
            false,
            WeightInit::HeNormal { gain: 1.0 },
        );
        let enc = AmortizedEncoder::new(FeatureMap::Mlp(mlp), 2, 0.1, &mut rng).unwrap();
        let distinct = Tensor::from_vec(&[3, 2], vec![0.2, -0.4, 1.0, 0.3, -0.9, 0.8]).unwrap();
        let g = enc.features(&distinct).unwrap();
        assert!(rank_diagnostic(&g).unwrap().full_row_rank);

        let duplicated = Tensor::from_vec(&[3, 2], vec![0.2, -0.4, 0.2, -0.4, -0.9, 0.8]).unwrap();
        let g2 = enc.features(&duplicated).unwrap();
        let report = rank_diagnostic(&g2).unwrap();
        assert_eq!(report.rank, 2);
        assert!(!report.full_row_rank);
    }

    #[test]
    fn gradients_reach_phi_and_psi() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::init(
            &mut rng,
            &[2, 4, 3],
            Activation::Tanh,
            true,
            false,
            WeightInit::HeNormal { gain: 1.0 },
        );
        let enc = AmortizedEncoder::new(FeatureMap::Mlp(mlp), 2, 0.5, &mut rng).unwrap();
        let x = Tensor::from_vec(&[2, 2], vec![0.3, -0.2, 0.8, 0.1]).unwrap();
        enc.encode(&x).unwrap().sum().unwrap().backward().unwrap();
        assert!(enc.phi.grad().unwrap().iter().any(|g| g.abs() > 0.0));
        for p in enc.psi_parameters() {
            if p.shape().len() == 2 {
                assert!(p.grad().unwrap().iter().any(|g| g.abs() > 0.0));
            }
        }
    }

    #[test]
    fn encode_features_checks_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = AmortizedEncoder::new(FeatureMap::OneHot { n: 3 }, 2, 0.0, &mut rng).unwrap();
        let g = Tensor::from_vec(&[2, 4], vec![0.0; 8]).unwrap();
        assert!(matches!(
            enc.encode_features(&g),
            Err(EncoderError::FeatureWidth { got: 4, expected: 3 })
        ));
    }
}
