//! Two-Gaussian latent task used to compare sampler step counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::sampler::{ddim_sample, Conditioning, SamplerConfig};
use super::train::{train_denoiser, TrainConfig, TrainItem};
use super::{DropoutConfig, GuidanceConfig, MlpDenoiser, NoiseSchedule};
use crate::error::Result;
use crate::metrics::sliced_wasserstein1;
use crate::neural::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub dim: usize,
    /// Modes sit at `+offset` and `-offset` on every axis.
    pub offset: f64,
    pub std: f64,
    pub hidden: Vec<usize>,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Clamp of predicted clean samples during sampling.
    pub clip_x0: Option<f32>,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            dim: 2,
            offset: 1.0,
            std: 0.15,
            hidden: vec![64, 64],
            train_steps: 6000,
            batch_size: 64,
            lr: 1e-3,
            clip_x0: Some(2.0),
        }
    }
}

impl ToyTask {
    /// `n` points, each mode picked with probability one half.
    pub fn sample_data(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                (0..self.dim)
                    .map(|_| s * self.offset + self.std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    pub fn train(&self, sched: &NoiseSchedule, data: &[Vec<f64>], seed: u64) -> Result<(MlpDenoiser, Vec<f64>)> {
        let mut den = MlpDenoiser::new(self.dim, &self.hidden, seed)?;
        let items: Vec<TrainItem> = data
            .iter()
            .map(|x| {
                Ok(TrainItem {
                    x0: Tensor::from_f64(&[self.dim], x)?,
                    text: None,
                    cond: None,
                })
            })
            .collect::<Result<_>>()?;
        let cfg = TrainConfig {
            steps: self.train_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            dropout: DropoutConfig::none(),
            seed,
        };
        let losses = train_denoiser(&mut den, sched, &items, &cfg)?;
        Ok((den, losses))
    }

    /// Deterministic DDIM samples as points.
    pub fn sample(&self, den: &MlpDenoiser, sched: &NoiseSchedule, steps: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let cfg = SamplerConfig {
            steps,
            eta: 0.0,
            guidance: GuidanceConfig::new(1.0, 1.0)?,
            seed,
            clip_x0: self.clip_x0,
        };
        let z = ddim_sample(den, sched, &cfg, n, &Conditioning::default(), None)?;
        Ok(z.data().chunks_exact(self.dim).map(|c| c.iter().map(|&v| v as f64).collect()).collect())
    }

    /// Sliced 1-Wasserstein distance between `steps`-step samples and
    /// fresh data.
    pub fn sample_distance(
        &self,
        den: &MlpDenoiser,
        sched: &NoiseSchedule,
        steps: usize,
        n: usize,
        seed: u64,
    ) -> Result<f64> {
        let samples = self.sample(den, sched, steps, n, seed)?;
        let data = self.sample_data(n, seed ^ 0xda7a);
        sliced_wasserstein1(&samples, &data, 64, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;

    #[test]
    fn data_has_two_balanced_modes() {
        let t = ToyTask::default();
        let d = t.sample_data(4000, 1);
        let pos = d.iter().filter(|x| x[0] > 0.0).count() as f64 / 4000.0;
        assert!((pos - 0.5).abs() < 0.03);
        assert!(d.iter().all(|x| x.iter().all(|&v| v.abs() > 0.2)));
    }

    #[test]
    fn trained_sampler_lands_near_the_modes() {
        let sched = NoiseSchedule::new(1000, ScheduleKind::Cosine).unwrap();
        let task = ToyTask::default();
        let data = task.sample_data(2048, 0);
        let (den, _) = task.train(&sched, &data, 0).unwrap();
        let d50 = task.sample_distance(&den, &sched, 50, 512, 1).unwrap();
        let d5 = task.sample_distance(&den, &sched, 5, 512, 1).unwrap();
        // Two independent 512-point data draws sit about 0.1 apart.
        assert!(d50 < 0.15, "{d50}");
        assert!(d50 <= d5, "{d50} {d5}");
    }
}
