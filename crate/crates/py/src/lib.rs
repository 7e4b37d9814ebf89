//! Python bindings over the core crate: model construction, closed-form
//! conjugate posteriors, per-datapoint Langevin sampling, and the experiment
//! harness behind `run_experiment`.

use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use langevin_ae::config::ConfigFile;
use langevin_ae::data;
use langevin_ae::harness::{self, ExperimentKind};
use langevin_ae::models::LatentVariableModel;
use langevin_ae::oracle::ConjugateOracle;
use langevin_ae::samplers::{
    drive_chain, ChainState, ModelPosterior, PotentialTarget, SamplerConfig, SeededNoise,
};
use langevin_ae::selftest::run_selftest;
use langevin_ae::tensor::Tensor;

fn value_err(err: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let v = t.to_vec();
    (0..n).map(|i| v[i * d..(i + 1) * d].to_vec()).collect()
}

/// Latent-variable model built from the same configuration text the CLI
/// accepts (`[model]` section; empty text gives the conjugate default).
#[pyclass(module = "lae_py", unsendable)]
struct Model {
    inner: LatentVariableModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (config = "", seed = 0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let cfg = ConfigFile::parse(config).map_err(value_err)?;
        Ok(Model { inner: harness::build_model(&cfg, seed).map_err(value_err)? })
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    /// Draws `(x, z)` pairs from the generative model.
    fn sample_joint(&self, n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (xs, zs) = data::sample_joint(&self.inner, n, seed).map_err(value_err)?;
        Ok((rows(&xs), rows(&zs)))
    }

    /// Negative log joint `U(x, z)` and its gradient in `z`.
    fn potential(&self, x: Vec<f64>, z: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        let target = ModelPosterior::new(&self.inner, &x).map_err(value_err)?;
        target.potential_and_grad(&z).map_err(value_err)
    }

    /// Closed-form posterior mean and row-major covariance; only the
    /// conjugate Gaussian model has one.
    fn posterior_mean_cov(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let oracle = ConjugateOracle::new(&self.inner).map_err(value_err)?;
        Ok((oracle.posterior_mean(&x), oracle.posterior_cov().to_vec()))
    }

    /// Langevin chain over `z` for one observation, with or without the
    /// Metropolis correction; returns the post-burn-in positions.
    #[pyo3(signature = (x, steps = 3000, burn_in = 1000, step_size = 4e-4, seed = 0, mh = true))]
    fn sample_posterior(
        &self,
        x: Vec<f64>,
        steps: usize,
        burn_in: usize,
        step_size: f64,
        seed: u64,
        mh: bool,
    ) -> PyResult<Vec<Vec<f64>>> {
        if burn_in >= steps {
            return Err(PyValueError::new_err("burn_in must be below steps"));
        }
        let target = ModelPosterior::new(&self.inner, &x).map_err(value_err)?;
        let mut state =
            ChainState::init(&target, vec![0.0; self.inner.latent_dim()]).map_err(value_err)?;
        let mut noise = SeededNoise::new(seed);
        let config = SamplerConfig::new(step_size, mh);
        let mut kept = Vec::with_capacity(steps - burn_in);
        let mut step = 0usize;
        drive_chain(&target, &mut state, steps, &config, &mut noise, |s, _| {
            step += 1;
            if step > burn_in {
                kept.push(s.position.clone());
            }
        })
        .map_err(value_err)?;
        Ok(kept)
    }
}

/// Runs one named experiment with the given configuration text, writing the
/// same artifacts as the CLI under `out_dir`.
#[pyfunction]
#[pyo3(signature = (kind, config = "", seed = 0, out_dir = "out"))]
fn run_experiment(kind: &str, config: &str, seed: u64, out_dir: &str) -> PyResult<()> {
    let parsed = ExperimentKind::parse(kind)
        .ok_or_else(|| PyValueError::new_err(format!("unknown experiment `{kind}`")))?;
    let cfg = ConfigFile::parse(config).map_err(value_err)?;
    harness::run_experiment(parsed, &cfg, seed, Path::new(out_dir)).map_err(value_err)
}

/// Reruns the fixed-seed reference checks, returning `(name, passed,
/// detail)` per check; artifacts land under `out_dir`.
#[pyfunction]
fn selftest(out_dir: &str) -> PyResult<Vec<(String, bool, String)>> {
    let outcomes = run_selftest(Path::new(out_dir), false).map_err(value_err)?;
    Ok(outcomes.into_iter().map(|o| (o.name.to_string(), o.passed(), o.detail)).collect())
}

#[pymodule]
fn lae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
