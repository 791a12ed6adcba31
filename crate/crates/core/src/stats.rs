//! Sample means with standard errors.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    /// Mean and standard error of the mean (unbiased variance).
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self { mean: f64::NAN, stderr: f64::NAN, n };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { mean, stderr: 0.0, n };
        }
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            stderr: (var / n as f64).sqrt(),
            n,
        }
    }

    /// Antithetic batches: consecutive pairs are averaged first so the
    /// standard error reflects the pairing.
    pub fn from_samples_paired(samples: &[f64], paired: bool) -> Self {
        if !paired {
            return Self::from_samples(samples);
        }
        let pairs: Vec<f64> = samples.chunks(2).map(|p| p.iter().sum::<f64>() / p.len() as f64).collect();
        Self::from_samples(&pairs)
    }

    /// Binomial proportion with its standard error.
    pub fn proportion(successes: usize, n: usize) -> Self {
        let p = successes as f64 / n as f64;
        Self {
            mean: p,
            stderr: (p * (1.0 - p) / n as f64).sqrt(),
            n,
        }
    }
}
