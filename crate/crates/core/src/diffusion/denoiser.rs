//! Noise predictors and their conditioning inputs.

use sha2::{Digest, Sha256};

use crate::error::{param_err, Result};
use crate::neural::layers::LEAKY_SLOPE;
use crate::neural::{Mlp, MlpSpec, ParamStore, Scalar, Tape, Tensor, Var};

pub const TEXT_DIM: usize = 64;
pub const TIME_DIM: usize = 16;

/// Hash embedding of whitespace tokens; `None` for an empty prompt.
/// Each lowercase token adds a signed unit to two buckets, then the
/// vector is normalized.
pub fn text_embedding(prompt: &str) -> Option<Vec<f32>> {
    let mut v = vec![0.0f32; TEXT_DIM];
    let mut any = false;
    for tok in prompt.split_whitespace() {
        any = true;
        let h = Sha256::digest(tok.to_lowercase().as_bytes());
        for pair in h[..4].chunks_exact(2) {
            let bucket = pair[0] as usize % TEXT_DIM;
            v[bucket] += if pair[1] & 1 == 0 { 1.0 } else { -1.0 };
        }
    }
    if !any {
        return None;
    }
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Some(v)
}

/// Sinusoidal features of `t / t_max`.
pub fn time_features(t: usize, t_max: usize) -> [f32; TIME_DIM] {
    let tau = t as f64 / t_max.max(1) as f64;
    let mut out = [0.0; TIME_DIM];
    for k in 0..TIME_DIM / 2 {
        let w = std::f64::consts::FRAC_PI_2 * (1u64 << k) as f64;
        out[2 * k] = (w * tau).sin() as f32;
        out[2 * k + 1] = (w * tau).cos() as f32;
    }
    out
}

/// One denoiser call over N items.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseBatch {
    /// `[N, ..latent]`.
    pub z: Tensor<f32>,
    pub t: Vec<usize>,
    pub t_max: usize,
    /// `None` selects the learned null embedding.
    pub text: Vec<Option<Vec<f32>>>,
    /// `[N, ..cond]`; the zero latent is the null image condition.
    pub cond: Option<Tensor<f32>>,
}

impl DenoiseBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn validate(&self, latent: &[usize], cond: Option<&[usize]>) -> Result<()> {
        let n = self.t.len();
        if self.text.len() != n || self.z.shape().first() != Some(&n) || &self.z.shape()[1..] != latent {
            return param_err(format!(
                "batch of {n} does not match latent shape {latent:?}: z {:?}",
                self.z.shape()
            ));
        }
        if let (Some(c), Some(want)) = (&self.cond, cond) {
            if c.shape()[0] != n || &c.shape()[1..] != want {
                return param_err(format!("condition shape {:?}, expected [{n}, {want:?}]", c.shape()));
            }
        }
        if self.t.iter().any(|&t| t == 0 || t > self.t_max) {
            return param_err("timestep out of range");
        }
        Ok(())
    }

    fn time_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .t
            .iter()
            .flat_map(|&t| time_features(t, self.t_max))
            .map(|x| T::of(x as f64))
            .collect();
        Tensor::new(vec![self.len(), TIME_DIM], data).unwrap()
    }

    /// Text rows with nulls zeroed, plus a mask that is 1 on null rows.
    fn text_tensors<T: Scalar>(&self) -> (Tensor<T>, Tensor<T>) {
        let n = self.len();
        let mut text = vec![T::zero(); n * TEXT_DIM];
        let mut mask = vec![T::zero(); n * TEXT_DIM];
        for (i, e) in self.text.iter().enumerate() {
            match e {
                Some(v) => {
                    for (o, &x) in text[i * TEXT_DIM..(i + 1) * TEXT_DIM].iter_mut().zip(v) {
                        *o = T::of(x as f64);
                    }
                }
                None => mask[i * TEXT_DIM..(i + 1) * TEXT_DIM].fill(T::one()),
            }
        }
        (
            Tensor::new(vec![n, TEXT_DIM], text).unwrap(),
            Tensor::new(vec![n, TEXT_DIM], mask).unwrap(),
        )
    }
}

/// Maps `(z_t, t, text, condition)` to predicted noise shaped like `z_t`.
pub trait Denoiser: Sync {
    /// Per-item latent shape.
    fn latent_shape(&self) -> Vec<usize>;
    /// Per-item condition shape, if the network consumes one.
    fn cond_shape(&self) -> Option<Vec<usize>>;
    fn predict(&self, batch: &DenoiseBatch) -> Result<Tensor<f32>>;
}

/// A denoiser whose forward pass can be recorded for training.
pub trait TrainableDenoiser: Denoiser {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &DenoiseBatch) -> Result<Var>;
}

fn predict_via_tape<D: TrainableDenoiser>(d: &D, batch: &DenoiseBatch) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let y = d.forward(&mut tape, d.store(), batch)?;
    Ok(tape.value(y).clone())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvDenoiserSpec {
    /// `[h, w, c]`; h and w must be even.
    pub latent: [usize; 3],
    /// Channels of the conditioning latent, 0 for none.
    pub cond_channels: usize,
    pub width: usize,
    pub mid_width: usize,
}

/// Small UNet-shaped conv net. Parameter groups: `encoder.conv_in`,
/// `encoder.emb_proj`, `encoder.conv_down`, `mid.attn_mix` (a 1x1 mixing
/// conv standing in for attention), `decoder.conv_up`, `decoder.conv_out`
/// and the learned `null_text` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvDenoiser {
    pub spec: ConvDenoiserSpec,
    pub params: ParamStore,
}

impl ConvDenoiser {
    pub fn new(spec: ConvDenoiserSpec, seed: u64) -> Result<Self> {
        let [h, w, c] = spec.latent;
        if h % 2 != 0 || w % 2 != 0 || c == 0 || spec.width == 0 || spec.mid_width == 0 {
            return param_err("latent extents must be even and widths positive");
        }
        let mut p = ParamStore::new(seed);
        let cin = c + spec.cond_channels;
        let (w1, w2) = (spec.width, spec.mid_width);
        let he = |fan: usize| (2.0 / fan as f64).sqrt();
        p.init_normal("encoder.conv_in.weight", &[3, 3, cin, w1], he(9 * cin));
        p.init_zeros("encoder.conv_in.bias", &[w1]);
        p.init_normal("encoder.emb_proj.weight", &[TIME_DIM + TEXT_DIM, w1], he(TIME_DIM + TEXT_DIM));
        p.init_zeros("encoder.emb_proj.bias", &[w1]);
        p.init_normal("encoder.conv_down.weight", &[3, 3, w1, w2], he(9 * w1));
        p.init_zeros("encoder.conv_down.bias", &[w2]);
        p.init_normal("mid.attn_mix.weight", &[1, 1, w2, w2], he(w2));
        p.init_zeros("mid.attn_mix.bias", &[w2]);
        p.init_normal("decoder.conv_up.weight", &[3, 3, w2, w1], he(9 * w2));
        p.init_zeros("decoder.conv_up.bias", &[w1]);
        p.init_normal("decoder.conv_out.weight", &[3, 3, w1, c], 0.1 * he(9 * w1));
        p.init_zeros("decoder.conv_out.bias", &[c]);
        p.init_normal("null_text", &[TEXT_DIM], 0.1);
        Ok(Self { spec, params: p })
    }

    /// Widen the input layer for `extra` new conditioning channels; the new
    /// weights are zero so predictions are unchanged.
    pub fn pad_condition_channels(&mut self, extra: usize) -> Result<()> {
        let name = "encoder.conv_in.weight";
        let trainable = self.params.is_trainable(name);
        let padded = crate::neural::pad_input_channels(self.params.get(name)?, extra)?;
        self.params.insert(name, padded, trainable);
        self.spec.cond_channels += extra;
        Ok(())
    }
}

impl Denoiser for ConvDenoiser {
    fn latent_shape(&self) -> Vec<usize> {
        self.spec.latent.to_vec()
    }

    fn cond_shape(&self) -> Option<Vec<usize>> {
        let [h, w, _] = self.spec.latent;
        (self.spec.cond_channels > 0).then(|| vec![h, w, self.spec.cond_channels])
    }

    fn predict(&self, batch: &DenoiseBatch) -> Result<Tensor<f32>> {
        predict_via_tape(self, batch)
    }
}

impl TrainableDenoiser for ConvDenoiser {
    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &DenoiseBatch) -> Result<Var> {
        let cond_shape = self.cond_shape();
        batch.validate(&self.spec.latent, cond_shape.as_deref())?;
        let n = batch.len();
        let slope = T::of(LEAKY_SLOPE);
        let z = tape.leaf(batch.z.cast());
        let x = match (&cond_shape, &batch.cond) {
            (Some(_), Some(c)) => {
                let c = tape.leaf(c.cast());
                tape.concat_last(&[z, c])
            }
            (Some(s), None) => {
                let c = tape.leaf(Tensor::zeros(&[n, s[0], s[1], s[2]]));
                tape.concat_last(&[z, c])
            }
            (None, _) => z,
        };
        let p = |tape: &mut Tape<T>, name: &str| tape.param(store, name);

        let w = p(tape, "encoder.conv_in.weight")?;
        let b = p(tape, "encoder.conv_in.bias")?;
        let e0 = tape.conv2d(x, w, Some(b), 1, 1);
        let e0 = tape.leaky_relu(e0, slope);

        let time = tape.leaf(batch.time_tensor());
        let (text, mask) = batch.text_tensors();
        let (text, mask) = (tape.leaf(text), tape.leaf(mask));
        let null = p(tape, "null_text")?;
        let null = tape.reshape(null, &[1, TEXT_DIM]);
        let null = tape.repeat_rows(null, n);
        let null = tape.mul(null, mask);
        let text = tape.add(text, null);
        let emb = tape.concat_last(&[time, text]);
        let w = p(tape, "encoder.emb_proj.weight")?;
        let b = p(tape, "encoder.emb_proj.bias")?;
        let emb = tape.matmul(emb, w);
        let emb = tape.add_row_bias(emb, b);
        let e0 = tape.add_sample_bias(e0, emb);

        let w = p(tape, "encoder.conv_down.weight")?;
        let b = p(tape, "encoder.conv_down.bias")?;
        let e1 = tape.conv2d(e0, w, Some(b), 2, 1);
        let e1 = tape.leaky_relu(e1, slope);

        let w = p(tape, "mid.attn_mix.weight")?;
        let b = p(tape, "mid.attn_mix.bias")?;
        let m = tape.conv2d(e1, w, Some(b), 1, 0);
        let m = tape.leaky_relu(m, slope);
        let m = tape.add(m, e1);

        let u = tape.upsample2x(m);
        let w = p(tape, "decoder.conv_up.weight")?;
        let b = p(tape, "decoder.conv_up.bias")?;
        let d = tape.conv2d(u, w, Some(b), 1, 1);
        let d = tape.leaky_relu(d, slope);
        let d = tape.add(d, e0);
        let w = p(tape, "decoder.conv_out.weight")?;
        let b = p(tape, "decoder.conv_out.bias")?;
        Ok(tape.conv2d(d, w, Some(b), 1, 1))
    }
}

/// MLP noise predictor for flat latents; ignores text and image conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    pub dim: usize,
    pub mlp: Mlp,
    pub params: ParamStore,
}

impl MlpDenoiser {
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut widths = vec![dim + TIME_DIM];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mut spec = MlpSpec::new(widths)?;
        spec.softplus_beta = 1.0;
        let mlp = Mlp::new(spec, "mlp");
        let mut params = ParamStore::new(seed);
        mlp.init(&mut params);
        Ok(Self { dim, mlp, params })
    }
}

impl Denoiser for MlpDenoiser {
    fn latent_shape(&self) -> Vec<usize> {
        vec![self.dim]
    }

    fn cond_shape(&self) -> Option<Vec<usize>> {
        None
    }

    fn predict(&self, batch: &DenoiseBatch) -> Result<Tensor<f32>> {
        predict_via_tape(self, batch)
    }
}

impl TrainableDenoiser for MlpDenoiser {
    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &DenoiseBatch) -> Result<Var> {
        batch.validate(&[self.dim], None)?;
        let z = tape.leaf(batch.z.cast());
        let time = tape.leaf(batch.time_tensor());
        let x = tape.concat_last(&[z, time]);
        self.mlp.forward(tape, store, x)
    }
}
