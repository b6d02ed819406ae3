//! Image <-> latent codecs standing in for the latent encoder.

use rand::seq::index::sample;

use super::{stream_rng, Stream};
use crate::container::TensorMap;
use crate::error::{param_err, Result};
use crate::neural::layers::LEAKY_SLOPE;
use crate::neural::{Adam, ParamStore, Tape, Tensor, Var};

/// Batched NHWC images to NHWC latents and back.
pub trait LatentCodec: Sync {
    /// Latent `[h, w, c]` for an `[H, W, C]` image.
    fn latent_shape(&self, image: [usize; 3]) -> Result<[usize; 3]>;
    fn encode(&self, images: &Tensor<f32>) -> Result<Tensor<f32>>;
    fn decode(&self, latents: &Tensor<f32>) -> Result<Tensor<f32>>;
}

fn nhwc(t: &Tensor<f32>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, h, w, c] => Ok([n, h, w, c]),
        ref s => param_err(format!("expected an NHWC tensor, got shape {s:?}")),
    }
}

/// Lossless space-to-depth: a `f x f` pixel block becomes `f * f * C`
/// channels, ordered `(dy * f + dx) * C + c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityPatchCodec {
    pub factor: usize,
}

impl Default for IdentityPatchCodec {
    fn default() -> Self {
        Self { factor: 4 }
    }
}

impl LatentCodec for IdentityPatchCodec {
    fn latent_shape(&self, [h, w, c]: [usize; 3]) -> Result<[usize; 3]> {
        let f = self.factor;
        if f == 0 || h % f != 0 || w % f != 0 {
            return param_err(format!("image {h}x{w} is not divisible by patch factor {f}"));
        }
        Ok([h / f, w / f, f * f * c])
    }

    fn encode(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [n, h, w, c] = nhwc(images)?;
        let [lh, lw, lc] = self.latent_shape([h, w, c])?;
        let f = self.factor;
        let src = images.data();
        let mut out = vec![0.0; images.len()];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let si = ((b * h + y) * w + x) * c;
                    let di = ((b * lh + y / f) * lw + x / f) * lc + ((y % f) * f + x % f) * c;
                    out[di..di + c].copy_from_slice(&src[si..si + c]);
                }
            }
        }
        Tensor::new(vec![n, lh, lw, lc], out)
    }

    fn decode(&self, latents: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [n, lh, lw, lc] = nhwc(latents)?;
        let f = self.factor;
        if f == 0 || lc % (f * f) != 0 {
            return param_err(format!("{lc} latent channels do not split into {f}x{f} patches"));
        }
        let (h, w, c) = (lh * f, lw * f, lc / (f * f));
        let src = latents.data();
        let mut out = vec![0.0; latents.len()];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let di = ((b * h + y) * w + x) * c;
                    let si = ((b * lh + y / f) * lw + x / f) * lc + ((y % f) * f + x % f) * c;
                    out[di..di + c].copy_from_slice(&src[si..si + c]);
                }
            }
        }
        Tensor::new(vec![n, h, w, c], out)
    }
}

/// Small conv autoencoder with a 4x spatial reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedCodec {
    pub image_channels: usize,
    pub latent_channels: usize,
    pub width: usize,
    pub params: ParamStore,
}

const ENC: [(&str, usize); 3] = [("enc.conv0", 1), ("enc.conv1", 2), ("enc.conv2", 2)];
const DEC: [&str; 4] = ["dec.conv0", "dec.conv1", "dec.conv2", "dec.conv3"];

impl LearnedCodec {
    pub fn new(image_channels: usize, latent_channels: usize, width: usize, seed: u64) -> Result<Self> {
        if image_channels == 0 || latent_channels == 0 || width == 0 {
            return param_err("codec channel counts must be positive");
        }
        let mut p = ParamStore::new(seed);
        let (c, l, w) = (image_channels, latent_channels, width);
        let layers = [
            ("enc.conv0", c, w),
            ("enc.conv1", w, w),
            ("enc.conv2", w, l),
            ("dec.conv0", l, w),
            ("dec.conv1", w, w),
            ("dec.conv2", w, w),
            ("dec.conv3", w, c),
        ];
        for (name, i, o) in layers {
            p.init_normal(&format!("{name}.weight"), &[3, 3, i, o], (2.0 / (9 * i) as f64).sqrt());
            p.init_zeros(&format!("{name}.bias"), &[o]);
        }
        Ok(Self {
            image_channels,
            latent_channels,
            width,
            params: p,
        })
    }

    fn conv(tape: &mut Tape<f32>, store: &ParamStore, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = tape.param(store, &format!("{name}.weight"))?;
        let b = tape.param(store, &format!("{name}.bias"))?;
        Ok(tape.conv2d(x, w, Some(b), stride, 1))
    }

    fn encode_var(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (name, stride)) in ENC.iter().enumerate() {
            h = Self::conv(tape, &self.params, name, h, *stride)?;
            if i + 1 < ENC.len() {
                h = tape.leaky_relu(h, LEAKY_SLOPE as f32);
            }
        }
        Ok(h)
    }

    fn decode_var(&self, tape: &mut Tape<f32>, z: Var) -> Result<Var> {
        let mut h = z;
        for (i, name) in DEC.iter().enumerate() {
            h = Self::conv(tape, &self.params, name, h, 1)?;
            if i + 1 < DEC.len() {
                h = tape.leaky_relu(h, LEAKY_SLOPE as f32);
            }
            if i < 2 {
                h = tape.upsample2x(h);
            }
        }
        Ok(h)
    }

    /// Minimize reconstruction MSE with Adam on random minibatches.
    /// Returns the per-step losses.
    pub fn fit(&mut self, images: &Tensor<f32>, steps: usize, batch: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
        let [n, h, w, c] = nhwc(images)?;
        self.latent_shape([h, w, c])?;
        if n == 0 || batch == 0 {
            return param_err("codec training needs images and a positive batch size");
        }
        let batch = batch.min(n);
        let per = h * w * c;
        let mut rng = stream_rng(seed, Stream::Training);
        let mut opt = Adam::new(lr)?;
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx = sample(&mut rng, n, batch);
            let mut data = Vec::with_capacity(batch * per);
            for i in idx.iter() {
                data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
            }
            let x = Tensor::new(vec![batch, h, w, c], data)?;
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let z = self.encode_var(&mut tape, xv)?;
            let y = self.decode_var(&mut tape, z)?;
            let d = tape.sub(y, xv);
            let d = tape.square(d);
            let loss = tape.mean(d);
            losses.push(tape.value(loss).item() as f64);
            let grads = tape.backward(loss).params();
            drop(tape);
            opt.step(&mut self.params, &grads)?;
        }
        Ok(losses)
    }

    pub fn to_tensors(&self) -> TensorMap {
        let mut m = self.params.to_tensors("codec.");
        m.insert(
            "codec@shape".into(),
            crate::container::Tensor::f64(
                vec![3],
                vec![self.image_channels as f64, self.latent_channels as f64, self.width as f64],
            ),
        );
        m
    }

    pub fn from_tensors(map: &TensorMap) -> Result<Self> {
        let Some(shape) = map.get("codec@shape") else {
            return param_err("container holds no learned codec");
        };
        let s = shape.to_f64_vec();
        if s.len() != 3 {
            return param_err("malformed codec shape record");
        }
        Ok(Self {
            image_channels: s[0] as usize,
            latent_channels: s[1] as usize,
            width: s[2] as usize,
            params: ParamStore::from_tensors(map, "codec.", 0),
        })
    }
}

impl LatentCodec for LearnedCodec {
    fn latent_shape(&self, [h, w, c]: [usize; 3]) -> Result<[usize; 3]> {
        if h % 4 != 0 || w % 4 != 0 || c != self.image_channels {
            return param_err(format!(
                "image {h}x{w}x{c} does not fit a codec for {} channels and 4x reduction",
                self.image_channels
            ));
        }
        Ok([h / 4, w / 4, self.latent_channels])
    }

    fn encode(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [_, h, w, c] = nhwc(images)?;
        self.latent_shape([h, w, c])?;
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let z = self.encode_var(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    fn decode(&self, latents: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [_, _, _, c] = nhwc(latents)?;
        if c != self.latent_channels {
            return param_err(format!("expected {} latent channels, got {c}", self.latent_channels));
        }
        let mut tape = Tape::new();
        let z = tape.leaf(latents.clone());
        let y = self.decode_var(&mut tape, z)?;
        Ok(tape.value(y).clone())
    }
}

/// Peak signal-to-noise ratio in dB for signals with range `peak`.
pub fn psnr(reference: &Tensor<f32>, test: &Tensor<f32>, peak: f64) -> Result<f64> {
    if reference.shape() != test.shape() || reference.is_empty() {
        return param_err("PSNR needs two non-empty tensors of equal shape");
    }
    let mse = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / reference.len() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_patch_round_trip_is_exact() {
        let img = Tensor::new(vec![2, 16, 16, 3], (0..1536).map(|i| (i as f32 * 0.731).sin()).collect()).unwrap();
        let c = IdentityPatchCodec::default();
        let z = c.encode(&img).unwrap();
        assert_eq!(z.shape(), &[2, 4, 4, 48]);
        assert_eq!(c.decode(&z).unwrap(), img);
        assert!(c.encode(&Tensor::zeros(&[1, 6, 8, 3])).is_err());
    }

    #[test]
    fn identity_patch_channel_order() {
        // pixel (y, x) = (1, 2) in the first block, channel 1 of 2
        let mut img = Tensor::zeros(&[1, 4, 4, 2]);
        img.data_mut()[(4 + 2) * 2 + 1] = 7.0;
        let z = IdentityPatchCodec::default().encode(&img).unwrap();
        assert_eq!(z.data()[(4 + 2) * 2 + 1], 7.0);
        assert_eq!(z.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn learned_codec_shapes_and_serialization() {
        let c = LearnedCodec::new(3, 8, 8, 2).unwrap();
        let img = Tensor::full(&[1, 8, 8, 3], 0.5);
        let z = c.encode(&img).unwrap();
        assert_eq!(z.shape(), &[1, 2, 2, 8]);
        assert_eq!(c.decode(&z).unwrap().shape(), img.shape());
        let back = LearnedCodec::from_tensors(&c.to_tensors()).unwrap();
        assert_eq!(back.to_tensors(), c.to_tensors());
        assert!(c.encode(&Tensor::zeros(&[1, 8, 8, 4])).is_err());
    }

    #[test]
    fn learned_codec_loss_decreases() {
        let imgs = Tensor::new(
            vec![4, 8, 8, 3],
            (0..768).map(|i| ((i / 3) % 8) as f32 / 8.0 + (i % 3) as f32 * 0.1).collect(),
        )
        .unwrap();
        let mut c = LearnedCodec::new(3, 8, 8, 1).unwrap();
        let losses = c.fit(&imgs, 60, 4, 3e-3, 0).unwrap();
        assert!(losses[59] < 0.5 * losses[0], "{} -> {}", losses[0], losses[59]);
    }

    #[test]
    fn psnr_values() {
        let a = Tensor::zeros(&[4]);
        let b = Tensor::full(&[4], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-4);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
    }
}
