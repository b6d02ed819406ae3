//! Guided DDIM sampling and Repaint-style masked resampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{DenoiseBatch, Denoiser};
use super::{standard_normal, stream_rng, GuidanceConfig, NoiseSchedule, Stream};
use crate::error::{param_err, Result};
use crate::neural::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    /// Clamp predicted clean latents to `[-c, c]`.
    #[serde(default)]
    pub clip_x0: Option<f32>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            eta: 0.0,
            guidance: GuidanceConfig::default(),
            seed: 0,
            clip_x0: None,
        }
    }
}

/// Conditioning shared by every sample in a call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conditioning {
    pub text: Option<Vec<f32>>,
    /// Per-item condition latent, without the batch axis.
    pub cond: Option<Tensor<f32>>,
}

/// Ascending sub-schedule `floor(k T / S)` for `k = 1..=S`.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return param_err(format!("DDIM steps must lie in 1..={t_max}, got {steps}"));
    }
    Ok((1..=steps).map(|k| k * t_max / steps).collect())
}

fn tile(t: &Tensor<f32>, n: usize) -> Tensor<f32> {
    let mut shape = vec![n];
    shape.extend_from_slice(t.shape());
    Tensor::new(shape, t.data().repeat(n)).unwrap()
}

/// Dual classifier-free guidance over a batch `z` of `[N, ..]`:
/// `a + s_image (b - a) + s_text (c - b)` where a is unconditional, b is
/// image-only and c is fully conditioned. Arms that coincide are evaluated
/// once; the combination runs in f64.
pub fn cfg_predict<D: Denoiser + ?Sized>(
    den: &D,
    z: &Tensor<f32>,
    t: usize,
    t_max: usize,
    cond: &Conditioning,
    g: &GuidanceConfig,
) -> Result<Tensor<f32>> {
    let n = *z.shape().first().unwrap_or(&0);
    let cond_shape = den.cond_shape();
    let image = match (&cond_shape, &cond.cond) {
        (Some(s), Some(c)) => {
            if c.shape() != s.as_slice() {
                return param_err(format!("condition shape {:?}, expected {s:?}", c.shape()));
            }
            Some(tile(c, n))
        }
        _ => None,
    };
    let null_image = cond_shape.as_ref().map(|s| {
        let mut shape = vec![n];
        shape.extend_from_slice(s);
        Tensor::zeros(&shape)
    });
    let has_image = image.is_some();
    let has_text = cond.text.is_some();

    // arms: (text, image)
    let mut arms: Vec<(bool, bool)> = vec![(false, false)];
    if has_image {
        arms.push((false, true));
    }
    if has_text {
        arms.push((true, has_image));
    }
    let m = arms.len();
    let mut zs = Vec::with_capacity(m * z.len());
    let mut conds = Vec::new();
    let mut texts = Vec::with_capacity(m * n);
    for &(txt, img) in &arms {
        zs.extend_from_slice(z.data());
        if let Some(nul) = &null_image {
            let src = if img { image.as_ref().unwrap() } else { nul };
            conds.extend_from_slice(src.data());
        }
        texts.extend((0..n).map(|_| if txt { cond.text.clone() } else { None }));
    }
    let mut zshape = z.shape().to_vec();
    zshape[0] = m * n;
    let batch = DenoiseBatch {
        z: Tensor::new(zshape.clone(), zs)?,
        t: vec![t; m * n],
        t_max,
        text: texts,
        cond: null_image.as_ref().map(|nul| {
            let mut s = nul.shape().to_vec();
            s[0] = m * n;
            Tensor::new(s, conds).unwrap()
        }),
    };
    let out = den.predict(&batch)?;
    let k = z.len();
    let arm = |i: usize| &out.data()[i * k..(i + 1) * k];
    let a = arm(0);
    let b = if has_image { arm(1) } else { a };
    let c = if has_text { arm(m - 1) } else { b };
    let (si, st) = (g.s_image, g.s_text);
    let data = (0..k)
        .map(|i| {
            let (a, b, c) = (a[i] as f64, b[i] as f64, c[i] as f64);
            (a + si * (b - a) + st * (c - b)) as f32
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// One DDIM update from `t` to `s < t` given the guided noise estimate.
fn ddim_step(
    z: &Tensor<f32>,
    eps: &Tensor<f32>,
    t: usize,
    s: usize,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Tensor<f32> {
    let (at, st) = (sched.alpha(t), sched.sigma(t));
    let (a_s, s_s) = (sched.alpha(s), sched.sigma(s));
    let var = if st > 0.0 {
        (s_s * s_s / (st * st)) * (1.0 - (at * at) / (a_s * a_s))
    } else {
        0.0
    };
    let sig_eta = cfg.eta * var.max(0.0).sqrt();
    let dir = (s_s * s_s - sig_eta * sig_eta).max(0.0).sqrt();
    let noise = (sig_eta > 0.0).then(|| standard_normal(z.shape(), rng));
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&zt, &e))| {
            let mut x0 = (zt as f64 - st * e as f64) / at;
            if let Some(c) = cfg.clip_x0 {
                x0 = x0.clamp(-c as f64, c as f64);
            }
            let xi = noise.as_ref().map_or(0.0, |n| n.data()[i] as f64);
            (a_s * x0 + dir * e as f64 + sig_eta * xi) as f32
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data).unwrap()
}

fn batch_shape<D: Denoiser + ?Sized>(den: &D, n: usize) -> Vec<usize> {
    let mut shape = vec![n];
    shape.extend(den.latent_shape());
    shape
}

/// Draw `n` latents with guided DDIM. `init` replaces the seeded `z_T`.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    den: &D,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    n: usize,
    cond: &Conditioning,
    init: Option<&Tensor<f32>>,
) -> Result<Tensor<f32>> {
    let ts = ddim_timesteps(sched.t_max(), cfg.steps)?;
    let shape = batch_shape(den, n);
    let mut z = match init {
        Some(z) if z.shape() != shape.as_slice() => {
            return param_err(format!("initial latent shape {:?}, expected {shape:?}", z.shape()))
        }
        Some(z) => z.clone(),
        None => standard_normal(&shape, &mut stream_rng(cfg.seed, Stream::Init)),
    };
    let mut eta_rng = stream_rng(cfg.seed, Stream::Eta);
    for k in (0..ts.len()).rev() {
        let (t, s) = (ts[k], if k == 0 { 0 } else { ts[k - 1] });
        let eps = cfg_predict(den, &z, t, sched.t_max(), cond, &cfg.guidance)?;
        z = ddim_step(&z, &eps, t, s, sched, cfg, &mut eta_rng);
    }
    Ok(z)
}

/// Inpainting: entries with `known_mask[i]` follow the forward-noised
/// `known` latent and the rest is generated. Each step runs `resample`
/// times, re-noising from `s` back to `t` between repeats. The known
/// region of the result equals `known` exactly.
pub fn repaint_sample<D: Denoiser + ?Sized>(
    den: &D,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    known: &Tensor<f32>,
    known_mask: &[bool],
    resample: usize,
    cond: &Conditioning,
) -> Result<Tensor<f32>> {
    if resample == 0 {
        return param_err("Repaint needs at least one pass per step");
    }
    if known_mask.len() != known.len() {
        return param_err("mask must be shaped like the known latent");
    }
    let n = *known.shape().first().unwrap_or(&0);
    let shape = batch_shape(den, n);
    if known.shape() != shape.as_slice() {
        return param_err(format!("known latent shape {:?}, expected {shape:?}", known.shape()));
    }
    let ts = ddim_timesteps(sched.t_max(), cfg.steps)?;
    let mut z = standard_normal(&shape, &mut stream_rng(cfg.seed, Stream::Init));
    let mut eta_rng = stream_rng(cfg.seed, Stream::Eta);
    let mut known_rng = stream_rng(cfg.seed, Stream::KnownNoise);
    let mut resample_rng = stream_rng(cfg.seed, Stream::Resample);
    let any_known = known_mask.iter().any(|&k| k);
    for k in (0..ts.len()).rev() {
        let (t, s) = (ts[k], if k == 0 { 0 } else { ts[k - 1] });
        for pass in 0..resample {
            if any_known {
                let e = standard_normal(&shape, &mut known_rng);
                let noised = super::q_sample(known, t, &e, sched)?;
                select(&mut z, &noised, known_mask);
            }
            let eps = cfg_predict(den, &z, t, sched.t_max(), cond, &cfg.guidance)?;
            let zs = ddim_step(&z, &eps, t, s, sched, cfg, &mut eta_rng);
            if pass + 1 < resample {
                let ratio = sched.alpha(t) / sched.alpha(s);
                let sd = (sched.sigma(t).powi(2) - ratio * ratio * sched.sigma(s).powi(2)).max(0.0).sqrt();
                let xi = standard_normal(&shape, &mut resample_rng);
                let data = zs
                    .data()
                    .iter()
                    .zip(xi.data())
                    .map(|(&v, &x)| (ratio * v as f64 + sd * x as f64) as f32)
                    .collect();
                z = Tensor::new(shape.clone(), data)?;
            } else {
                z = zs;
            }
        }
    }
    select(&mut z, known, known_mask);
    Ok(z)
}

fn select(z: &mut Tensor<f32>, src: &Tensor<f32>, mask: &[bool]) {
    for ((v, &s), &m) in z.data_mut().iter_mut().zip(src.data()).zip(mask) {
        if m {
            *v = s;
        }
    }
}
