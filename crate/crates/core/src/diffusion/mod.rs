//! Latent diffusion at toy scale: schedules, forward noising, exclusive
//! conditioning dropout, dual classifier-free guidance, DDIM and Repaint.

pub mod codec;
pub mod denoiser;
pub mod sampler;
pub mod toy;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::neural::Tensor;

pub use codec::{IdentityPatchCodec, LatentCodec, LearnedCodec};
pub use denoiser::{
    text_embedding, time_features, ConvDenoiser, ConvDenoiserSpec, DenoiseBatch, Denoiser, MlpDenoiser,
    TrainableDenoiser, TEXT_DIM,
};
pub use sampler::{cfg_predict, ddim_sample, ddim_timesteps, repaint_sample, SamplerConfig};
pub use train::{diffusion_loss, train_denoiser, TrainConfig, TrainItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_beta" | "linear" => Ok(Self::LinearBeta),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Variance-preserving schedule; `alpha[t]^2 + sigma[t]^2 = 1` for t in `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    pub fn new(t_max: usize, kind: ScheduleKind) -> Result<Self> {
        if t_max == 0 {
            return param_err("a schedule needs T >= 1");
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::LinearBeta => (1..=t_max)
                .map(|t| {
                    if t_max == 1 {
                        LINEAR_BETA_START
                    } else {
                        let f = (t - 1) as f64 / (t_max - 1) as f64;
                        LINEAR_BETA_START + f * (LINEAR_BETA_END - LINEAR_BETA_START)
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=t_max)
                    .map(|t| (1.0 - f(t) / f(t - 1)).clamp(0.0, MAX_BETA))
                    .collect()
            }
        };
        let mut alpha = Vec::with_capacity(t_max + 1);
        let mut sigma = Vec::with_capacity(t_max + 1);
        let mut abar = 1.0f64;
        alpha.push(1.0);
        sigma.push(0.0);
        for b in betas {
            abar *= 1.0 - b;
            alpha.push(abar.sqrt());
            sigma.push((1.0 - abar).sqrt());
        }
        Ok(Self { kind, alpha, sigma })
    }

    pub fn t_max(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Cumulative signal fraction `alpha_t^2`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha[t] * self.alpha[t]
    }

    /// Violated schedule invariants, empty when all hold. The terminal bound
    /// `alpha_T <= 0.02` is only checked for cosine schedules: a literal
    /// linear beta range cannot reach it for short chains.
    pub fn audit(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in 0..=self.t_max() {
            let s = self.alpha[t].powi(2) + self.sigma[t].powi(2);
            if (s - 1.0).abs() > 1e-6 {
                out.push(format!("alpha^2 + sigma^2 = {s} at t = {t}"));
            }
            if t > 0 && self.alpha[t] > self.alpha[t - 1] {
                out.push(format!("alpha increases at t = {t}"));
            }
        }
        if self.alpha[0] < 0.999 {
            out.push("alpha_0 < 0.999".into());
        }
        if self.kind == ScheduleKind::Cosine && self.alpha[self.t_max()] > 0.02 {
            out.push("alpha_T > 0.02".into());
        }
        out
    }
}

/// `z_t = alpha_t x0 + sigma_t eps`.
pub fn q_sample(x0: &Tensor<f32>, t: usize, eps: &Tensor<f32>, sched: &NoiseSchedule) -> Result<Tensor<f32>> {
    if t == 0 || t > sched.t_max() {
        return param_err(format!("timestep {t} outside 1..={}", sched.t_max()));
    }
    if x0.shape() != eps.shape() {
        return param_err("noise must be shaped like the clean latent");
    }
    let (a, s) = (sched.alpha(t) as f32, sched.sigma(t) as f32);
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + s * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Classifier-free guidance weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub s_text: f64,
    pub s_image: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s_text: 7.5,
            s_image: 2.0,
        }
    }
}

impl GuidanceConfig {
    pub fn new(s_text: f64, s_image: f64) -> Result<Self> {
        if !(s_text >= 0.0 && s_image >= 0.0) {
            return param_err("guidance weights must be non-negative");
        }
        Ok(Self { s_text, s_image })
    }
}

/// Probabilities of the three mutually exclusive drop branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub p_text: f64,
    pub p_image: f64,
    pub p_both: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            p_text: 0.05,
            p_image: 0.05,
            p_both: 0.05,
        }
    }
}

impl DropoutConfig {
    pub fn new(p_text: f64, p_image: f64, p_both: f64) -> Result<Self> {
        let ps = [p_text, p_image, p_both];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || ps.iter().sum::<f64>() > 1.0 + 1e-12 {
            return param_err("dropout probabilities must lie in [0, 1] and sum to at most 1");
        }
        Ok(Self {
            p_text,
            p_image,
            p_both,
        })
    }

    pub fn none() -> Self {
        Self {
            p_text: 0.0,
            p_image: 0.0,
            p_both: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropBranch {
    KeepAll,
    DropText,
    DropImage,
    DropBoth,
}

impl DropBranch {
    pub fn keeps_text(self) -> bool {
        matches!(self, Self::KeepAll | Self::DropImage)
    }

    pub fn keeps_image(self) -> bool {
        matches!(self, Self::KeepAll | Self::DropText)
    }
}

/// Draw exactly one branch from a single uniform variate.
pub fn dropout_draw(cfg: &DropoutConfig, rng: &mut impl Rng) -> DropBranch {
    let u: f64 = rng.random();
    if u < cfg.p_text {
        DropBranch::DropText
    } else if u < cfg.p_text + cfg.p_image {
        DropBranch::DropImage
    } else if u < cfg.p_text + cfg.p_image + cfg.p_both {
        DropBranch::DropBoth
    } else {
        DropBranch::KeepAll
    }
}

/// Independent RNG streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Eta = 2,
    KnownNoise = 3,
    Resample = 4,
    Training = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_invariants() {
        let s = NoiseSchedule::new(1000, ScheduleKind::Cosine).unwrap();
        assert!(s.audit().is_empty(), "{:?}", s.audit());
        assert!(s.alpha(0) >= 0.999 && s.alpha(1000) < 0.02);
    }

    #[test]
    fn linear_schedule_matches_direct_product() {
        let s = NoiseSchedule::new(10, ScheduleKind::LinearBeta).unwrap();
        let mut prod = 1.0;
        for t in 1..=10 {
            prod *= 1.0 - (1e-4 + (t - 1) as f64 * (2e-2 - 1e-4) / 9.0);
        }
        assert!((s.alpha_bar(10) - prod).abs() < 1e-12);
        assert!(s.audit().is_empty());
        let long = NoiseSchedule::new(1000, ScheduleKind::LinearBeta).unwrap();
        assert!(long.alpha(1000) <= 0.02);
    }

    #[test]
    fn variance_preserving_everywhere() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            for t_max in [1, 2, 7, 50, 1000] {
                let s = NoiseSchedule::new(t_max, kind).unwrap();
                for t in 0..=t_max {
                    assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() <= 1e-6);
                }
            }
        }
        assert!(NoiseSchedule::new(0, ScheduleKind::Cosine).is_err());
        assert!("quadratic".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn q_sample_arithmetic() {
        let s = NoiseSchedule::new(10, ScheduleKind::Cosine).unwrap();
        let x0 = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let zero = Tensor::zeros(&[1]);
        let eps = Tensor::new(vec![1], vec![1.0f32]).unwrap();
        let z = q_sample(&zero, 3, &eps, &s).unwrap();
        assert_eq!(z.item(), s.sigma(3) as f32);
        let z = q_sample(&x0, 3, &eps, &s).unwrap();
        assert!((z.item() as f64 - (s.alpha(3) + s.sigma(3))).abs() < 1e-6);
        assert!(q_sample(&x0, 0, &eps, &s).is_err());
        assert!(q_sample(&x0, 11, &eps, &s).is_err());
        // hand-set table: alpha 0.6, sigma 0.8
        let hand = NoiseSchedule {
            kind: ScheduleKind::LinearBeta,
            alpha: vec![1.0, 0.6],
            sigma: vec![0.0, 0.8],
        };
        assert!((q_sample(&x0, 1, &eps, &hand).unwrap().item() - 1.4).abs() < 1e-6);
    }

    #[test]
    fn dropout_degenerate_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = DropoutConfig::none();
        let both = DropoutConfig::new(0.0, 0.0, 1.0).unwrap();
        for _ in 0..1000 {
            assert_eq!(dropout_draw(&none, &mut rng), DropBranch::KeepAll);
            assert_eq!(dropout_draw(&both, &mut rng), DropBranch::DropBoth);
        }
        assert!(DropoutConfig::new(0.5, 0.5, 0.5).is_err());
        assert!(DropoutConfig::new(-0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn dropout_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = DropoutConfig::default();
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[dropout_draw(&cfg, &mut rng) as usize] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), n);
        for &c in &counts[1..] {
            assert!((c as f64 / n as f64 - 0.05).abs() <= 0.005);
        }
    }

    #[test]
    fn streams_are_independent() {
        let a: u64 = stream_rng(7, Stream::Init).random();
        let b: u64 = stream_rng(7, Stream::Eta).random();
        let c: u64 = stream_rng(7, Stream::Init).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
