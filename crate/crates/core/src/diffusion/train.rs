//! Noise-prediction training loss and loop.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{DenoiseBatch, Denoiser, TrainableDenoiser};
use super::{dropout_draw, q_sample, standard_normal, stream_rng, DropoutConfig, NoiseSchedule, Stream};
use crate::error::{param_err, Result};
use crate::neural::{Adam, Scalar, Tape, Tensor, Var};

/// One training example; tensors carry no batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub x0: Tensor<f32>,
    pub text: Option<Vec<f32>>,
    pub cond: Option<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: DropoutConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            lr: 1e-3,
            dropout: DropoutConfig::default(),
            seed: 0,
        }
    }
}

/// Noise the items at uniform timesteps, apply exclusive dropout and
/// return the denoiser batch with its target noise.
pub fn noised_batch<D: Denoiser + ?Sized>(
    den: &D,
    items: &[&TrainItem],
    sched: &NoiseSchedule,
    dropout: &DropoutConfig,
    rng: &mut impl Rng,
) -> Result<(DenoiseBatch, Tensor<f32>)> {
    if items.is_empty() {
        return param_err("a training batch needs at least one item");
    }
    let latent = den.latent_shape();
    let cond_shape = den.cond_shape();
    let n = items.len();
    let per: usize = latent.iter().product();
    let cond_per: usize = cond_shape.as_ref().map_or(0, |s| s.iter().product());
    let mut z = Vec::with_capacity(n * per);
    let mut eps = Vec::with_capacity(n * per);
    let mut ts = Vec::with_capacity(n);
    let mut texts = Vec::with_capacity(n);
    let mut conds = Vec::with_capacity(n * cond_per);
    for item in items {
        if item.x0.shape() != latent.as_slice() {
            return param_err(format!("item latent {:?}, expected {latent:?}", item.x0.shape()));
        }
        let t = rng.random_range(1..=sched.t_max());
        let e = standard_normal(&latent, rng);
        let branch = dropout_draw(dropout, rng);
        z.extend_from_slice(q_sample(&item.x0, t, &e, sched)?.data());
        eps.extend_from_slice(e.data());
        ts.push(t);
        texts.push(if branch.keeps_text() { item.text.clone() } else { None });
        if let Some(s) = &cond_shape {
            match (&item.cond, branch.keeps_image()) {
                (Some(c), true) => {
                    if c.shape() != s.as_slice() {
                        return param_err(format!("item condition {:?}, expected {s:?}", c.shape()));
                    }
                    conds.extend_from_slice(c.data());
                }
                _ => conds.extend(std::iter::repeat_n(0.0, cond_per)),
            }
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&latent);
    let batch = DenoiseBatch {
        z: Tensor::new(shape.clone(), z)?,
        t: ts,
        t_max: sched.t_max(),
        text: texts,
        cond: cond_shape.map(|s| {
            let mut cs = vec![n];
            cs.extend(s);
            Tensor::new(cs, conds).unwrap()
        }),
    };
    Ok((batch, Tensor::new(shape, eps)?))
}

/// `mean((eps_hat - eps)^2)` recorded on a tape.
pub fn noise_mse<T: Scalar>(tape: &mut Tape<T>, pred: Var, eps: &Tensor<f32>) -> Var {
    let e = tape.leaf(eps.cast());
    let d = tape.sub(pred, e);
    let d = tape.square(d);
    tape.mean(d)
}

/// Loss value only; works for any denoiser.
pub fn diffusion_loss_value<D: Denoiser + ?Sized>(
    den: &D,
    items: &[&TrainItem],
    sched: &NoiseSchedule,
    dropout: &DropoutConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let (batch, eps) = noised_batch(den, items, sched, dropout, rng)?;
    let pred = den.predict(&batch)?;
    let se: f64 = pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&p, &e)| (p as f64 - e as f64).powi(2))
        .sum();
    Ok(se / eps.len() as f64)
}

/// Loss and gradients of trainable parameters.
pub fn diffusion_loss<D: TrainableDenoiser>(
    den: &D,
    items: &[&TrainItem],
    sched: &NoiseSchedule,
    dropout: &DropoutConfig,
    rng: &mut impl Rng,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let (batch, eps) = noised_batch(den, items, sched, dropout, rng)?;
    let mut tape = Tape::new();
    let pred = den.forward(&mut tape, den.store(), &batch)?;
    let loss = noise_mse(&mut tape, pred, &eps);
    let value = tape.value(loss).item() as f64;
    Ok((value, tape.backward(loss).params()))
}

/// Adam on random minibatches; returns per-step losses. Frozen tensors in
/// the denoiser's store are never touched.
pub fn train_denoiser<D: TrainableDenoiser>(
    den: &mut D,
    sched: &NoiseSchedule,
    items: &[TrainItem],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if items.is_empty() || cfg.batch_size == 0 {
        return param_err("training needs items and a positive batch size");
    }
    let mut rng = stream_rng(cfg.seed, Stream::Training);
    let mut opt = Adam::new(cfg.lr)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let picks: Vec<&TrainItem> = (0..cfg.batch_size)
            .map(|_| &items[rng.random_range(0..items.len())])
            .collect();
        let (loss, grads) = diffusion_loss(den, &picks, sched, &cfg.dropout, &mut rng)?;
        if !loss.is_finite() {
            return Err(crate::Error::Param(format!("training diverged at step {}", losses.len())));
        }
        losses.push(loss);
        opt.step(den.store_mut(), &grads)?;
    }
    Ok(losses)
}
