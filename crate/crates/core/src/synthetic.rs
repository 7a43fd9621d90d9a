//! Regression data from a random tanh teacher network.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::io::write_csv;
use crate::linalg::DenseMatrix;
use crate::network::{forward, init_params, ActivationKind, NetworkArch};
use crate::seed::derive_seed;

/// Teacher weights are `Normal(0, (2/√fan_in)²)`.
pub const TEACHER_INIT_SCALE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig::desk()
    }
}

impl SyntheticConfig {
    /// Reduced size that runs in seconds.
    pub fn desk() -> Self {
        SyntheticConfig {
            depth: 3,
            width: 16,
            input_dim: 6,
            output_dim: 1,
            samples: 512,
            seed: 0,
        }
    }

    /// Seven tanh layers of width 50 on 5000 ten-dimensional inputs.
    pub fn full() -> Self {
        SyntheticConfig {
            depth: 7,
            width: 50,
            input_dim: 10,
            output_dim: 1,
            samples: 5000,
            seed: 0,
        }
    }

    pub fn arch(&self) -> Result<NetworkArch> {
        if self.depth == 0 || self.width == 0 || self.input_dim == 0 || self.output_dim == 0 || self.samples == 0 {
            return Err(Error::InvalidArgument(format!("synthetic data needs positive sizes, got {self:?}")));
        }
        NetworkArch::uniform(self.input_dim, vec![self.width; self.depth], self.output_dim, ActivationKind::Tanh)
    }
}

/// Standard normal inputs pushed through the teacher. Inputs and teacher
/// weights use separate streams derived from the seed.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<(DenseMatrix, DMatrix<f64>)> {
    let arch = cfg.arch()?;
    let teacher = init_params(&arch, derive_seed(cfg.seed, &[0]), TEACHER_INIT_SCALE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1]));
    let x = DenseMatrix::new(DMatrix::from_fn(cfg.samples, cfg.input_dim, |_, _| StandardNormal.sample(&mut rng)))?;
    let y = forward(&teacher, &x)?.output().inner().clone();
    Ok((x, y))
}

/// Writes `x.csv` and `y.csv` into `dir`.
pub fn write_synthetic(dir: impl AsRef<Path>, x: &DenseMatrix, y: &DMatrix<f64>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(dir.join("x.csv"), x.inner())?;
    write_csv(dir.join("y.csv"), y)
}
