//! Per-channel z-score normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Standard deviations below this are treated as this value.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population mean and standard deviation of every channel (last axis)
    /// over all cells of all `frames`.
    pub fn from_frames<'a, T: Real>(frames: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for f in frames {
            let c = f.last_dim();
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::dim(format!("frames with {} and {c} channels", sum.len())));
            }
            for cell in f.data().chunks(c) {
                for k in 0..c {
                    let v = cell[k].to_f64_lossy();
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            count += f.numel() / c;
        }
        if count == 0 {
            return Err(Error::contract("statistics over zero cells"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn sigma(&self, k: usize) -> f64 {
        self.std[k].max(SIGMA_FLOOR)
    }

    /// Restricts to channels `[from, from + len)`.
    pub fn slice(&self, from: usize, len: usize) -> Self {
        Self { mean: self.mean[from..from + len].to_vec(), std: self.std[from..from + len].to_vec() }
    }

    fn check(&self, t: &Tensor) -> Result<usize> {
        let c = t.last_dim();
        if c != self.channels() {
            return Err(Error::dim(format!("{c} channels against statistics for {}", self.channels())));
        }
        Ok(c)
    }

    /// `(x − μ) / max(σ, 1e-6)` per channel.
    pub fn zscore(&self, t: &Tensor) -> Result<Tensor> {
        let c = self.check(t)?;
        let mut out = t.data().to_vec();
        for cell in out.chunks_mut(c) {
            for k in 0..c {
                cell[k] = (cell[k] - self.mean[k]) / self.sigma(k);
            }
        }
        Ok(Tensor::raw(t.shape().to_vec(), out))
    }

    pub fn inverse(&self, t: &Tensor) -> Result<Tensor> {
        let c = self.check(t)?;
        let mut out = t.data().to_vec();
        for cell in out.chunks_mut(c) {
            for k in 0..c {
                cell[k] = cell[k] * self.sigma(k) + self.mean[k];
            }
        }
        Ok(Tensor::raw(t.shape().to_vec(), out))
    }

    /// Per-channel scale that converts normalized errors to physical units.
    pub fn scales(&self) -> Vec<f64> {
        (0..self.channels()).map(|k| self.sigma(k)).collect()
    }
}
