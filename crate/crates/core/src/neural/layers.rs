//! MLP, strided conv encoder, positional encoding and bilinear sampling.

use super::params::ParamStore;
use super::tape::{Tape, Taps, Var};
use super::Scalar;
use crate::error::{param_err, Result};
use crate::raster::AttributeImage;

pub const SOFTPLUS_BETA: f64 = 100.0;
pub const LEAKY_SLOPE: f64 = 0.01;

/// `(x, sin(2^k x), cos(2^k x))` for k in `0..levels`; each group holds the
/// three coordinates in order.
pub fn positional_encoding<T: Scalar>(x: [T; 3], levels: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(3 + 6 * levels);
    out.extend_from_slice(&x);
    for k in 0..levels {
        let f = T::of((1u64 << k) as f64);
        out.extend(x.iter().map(|&c| (f * c).sin()));
        out.extend(x.iter().map(|&c| (f * c).cos()));
    }
    out
}

/// Derivative of [`positional_encoding`] along each input axis.
pub fn positional_encoding_jacobian<T: Scalar>(x: [T; 3], levels: usize) -> [Vec<T>; 3] {
    std::array::from_fn(|axis| {
        let mut out = vec![T::zero(); 3 + 6 * levels];
        out[axis] = T::one();
        for k in 0..levels {
            let f = T::of((1u64 << k) as f64);
            let base = 3 + 6 * k;
            out[base + axis] = f * (f * x[axis]).cos();
            out[base + 3 + axis] = -f * (f * x[axis]).sin();
        }
        out
    })
}

/// Encoding width for `levels` frequencies.
pub fn encoding_width(levels: usize) -> usize {
    3 + 6 * levels
}

fn axis_taps<T: Scalar>(p: T, n: usize) -> (usize, usize, T, bool) {
    let f = p - T::of(0.5);
    let hi = T::of((n - 1) as f64);
    let clamped = f < T::zero() || f > hi;
    let f = f.max(T::zero()).min(hi);
    let i0 = f.floor().as_f64() as usize;
    let i0 = i0.min(n.saturating_sub(2));
    let i1 = (i0 + 1).min(n - 1);
    let t = if i1 == i0 { T::zero() } else { f - T::of(i0 as f64) };
    (i0, i1, t, clamped || n == 1)
}

/// Bilinear taps into image `batch` of an `[N, h, w, C]` map at continuous
/// texel coordinates (centers at integer + 0.5), clamped to the border.
pub fn bilinear_taps<T: Scalar>(batch: usize, h: usize, w: usize, u: T, v: T) -> Taps<T> {
    let (x0, x1, tx, _) = axis_taps(u, w);
    let (y0, y1, ty, _) = axis_taps(v, h);
    let base = batch * h * w;
    let one = T::one();
    [
        (base + y0 * w + x0, (one - tx) * (one - ty)),
        (base + y0 * w + x1, tx * (one - ty)),
        (base + y1 * w + x0, (one - tx) * ty),
        (base + y1 * w + x1, tx * ty),
    ]
}

/// Taps of the directional derivative of bilinear sampling along `(du, dv)`.
/// Clamped axes contribute nothing.
pub fn bilinear_dir_taps<T: Scalar>(batch: usize, h: usize, w: usize, u: T, v: T, du: T, dv: T) -> Taps<T> {
    let (x0, x1, tx, cx) = axis_taps(u, w);
    let (y0, y1, ty, cy) = axis_taps(v, h);
    let du = if cx { T::zero() } else { du };
    let dv = if cy { T::zero() } else { dv };
    let base = batch * h * w;
    let one = T::one();
    [
        (base + y0 * w + x0, -du * (one - ty) - dv * (one - tx)),
        (base + y0 * w + x1, du * (one - ty) - dv * tx),
        (base + y1 * w + x0, -du * ty + dv * (one - tx)),
        (base + y1 * w + x1, du * ty + dv * tx),
    ]
}

/// Sample an attribute image at continuous pixel coordinates. Uncovered
/// texels hold zeros, so they contribute zero.
pub fn bilinear_sample(img: &AttributeImage, u: f32, v: f32) -> Vec<f32> {
    let taps = bilinear_taps(0, img.height, img.width, u, v);
    let c = img.channels;
    let mut out = vec![0.0; c];
    for (texel, wt) in taps {
        if wt == 0.0 {
            continue;
        }
        for (o, &x) in out.iter_mut().zip(&img.data[texel * c..(texel + 1) * c]) {
            *o += wt * x;
        }
    }
    out
}

/// Fully connected network: softplus hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    /// `[input, hidden.., output]`.
    pub widths: Vec<usize>,
    pub softplus_beta: f64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return param_err("an MLP needs at least one hidden layer");
        }
        if widths.contains(&0) {
            return param_err("MLP widths must be positive");
        }
        Ok(Self {
            widths,
            softplus_beta: SOFTPLUS_BETA,
        })
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub prefix: String,
}

impl Mlp {
    pub fn new(spec: MlpSpec, prefix: &str) -> Self {
        Self {
            spec,
            prefix: prefix.to_owned(),
        }
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.weight", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.bias", self.prefix)
    }

    /// He-normal weights, zero biases.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for l in 0..self.spec.layers() {
            let (i, o) = (self.spec.widths[l], self.spec.widths[l + 1]);
            store.init_normal(&self.weight_name(l), &[i, o], (2.0 / i as f64).sqrt());
            store.init_zeros(&self.bias_name(l), &[o]);
        }
    }

    fn check<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: Var) -> Result<()> {
        if tape.value(x).cols() != self.spec.widths[0] {
            return param_err(format!(
                "MLP expects {} inputs, got {}",
                self.spec.widths[0],
                tape.value(x).cols()
            ));
        }
        for l in 0..self.spec.layers() {
            let want = [self.spec.widths[l], self.spec.widths[l + 1]];
            if store.get(&self.weight_name(l))?.shape() != want {
                return param_err(format!("{} has the wrong shape", self.weight_name(l)));
            }
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.check(tape, store, x)?;
        let beta = T::of(self.spec.softplus_beta);
        let mut h = x;
        for l in 0..self.spec.layers() {
            let w = tape.param(store, &self.weight_name(l))?;
            let b = tape.param(store, &self.bias_name(l))?;
            let z = tape.matmul(h, w);
            let z = tape.add_row_bias(z, b);
            h = if l + 1 < self.spec.layers() { tape.softplus(z, beta) } else { z };
        }
        Ok(h)
    }

    /// Forward pass carrying tangents `tx` (`[B * N, in]` for B directions
    /// of N points). Returns the output and its tangents `[B * N, out]`.
    pub fn forward_with_tangents<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        tx: Var,
    ) -> Result<(Var, Var)> {
        self.check(tape, store, x)?;
        let n = tape.value(x).rows();
        let tn = tape.value(tx).rows();
        if n == 0 || tn % n != 0 || tape.value(tx).cols() != self.spec.widths[0] {
            return param_err("tangent rows must be a multiple of the point count");
        }
        let dirs = tn / n;
        let beta = T::of(self.spec.softplus_beta);
        let (mut h, mut t) = (x, tx);
        for l in 0..self.spec.layers() {
            let w = tape.param(store, &self.weight_name(l))?;
            let b = tape.param(store, &self.bias_name(l))?;
            let z = tape.matmul(h, w);
            let z = tape.add_row_bias(z, b);
            let tz = tape.matmul(t, w);
            if l + 1 < self.spec.layers() {
                h = tape.softplus(z, beta);
                let slope = tape.sigmoid(z, beta);
                let slope = tape.repeat_rows(slope, dirs);
                t = tape.mul(tz, slope);
            } else {
                h = z;
                t = tz;
            }
        }
        Ok((h, t))
    }
}

/// Stride-2 3x3 convolutions with leaky-ReLU.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvEncoderSpec {
    pub in_channels: usize,
    /// Output width of each stage; the last is the feature width.
    pub stages: Vec<usize>,
}

impl ConvEncoderSpec {
    pub fn new(in_channels: usize, stages: Vec<usize>) -> Result<Self> {
        if in_channels == 0 || stages.is_empty() || stages.contains(&0) {
            return param_err("encoder needs input channels and at least one stage");
        }
        Ok(Self { in_channels, stages })
    }

    pub fn stride(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn feature_channels(&self) -> usize {
        *self.stages.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder {
    pub spec: ConvEncoderSpec,
    pub prefix: String,
}

impl ConvEncoder {
    pub fn new(spec: ConvEncoderSpec, prefix: &str) -> Self {
        Self {
            spec,
            prefix: prefix.to_owned(),
        }
    }

    pub fn weight_name(&self, stage: usize) -> String {
        format!("{}.conv{stage}.weight", self.prefix)
    }

    pub fn bias_name(&self, stage: usize) -> String {
        format!("{}.conv{stage}.bias", self.prefix)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let mut cin = self.spec.in_channels;
        for (s, &cout) in self.spec.stages.iter().enumerate() {
            store.init_normal(&self.weight_name(s), &[3, 3, cin, cout], (2.0 / (9 * cin) as f64).sqrt());
            store.init_zeros(&self.bias_name(s), &[cout]);
            cin = cout;
        }
    }

    /// `[N, H, W, C_in]` to `[N, ceil(H / S), ceil(W / S), C_feat]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.value(x).shape().to_vec();
        if s.len() != 4 || s[3] != self.spec.in_channels {
            return param_err(format!(
                "encoder expects NHWC input with {} channels, got {s:?}",
                self.spec.in_channels
            ));
        }
        let slope = T::of(LEAKY_SLOPE);
        let mut h = x;
        let mut cin = self.spec.in_channels;
        for (st, &cout) in self.spec.stages.iter().enumerate() {
            let w = tape.param(store, &self.weight_name(st))?;
            if tape.value(w).shape() != [3, 3, cin, cout] {
                return param_err(format!("{} has the wrong shape", self.weight_name(st)));
            }
            let b = tape.param(store, &self.bias_name(st))?;
            let z = tape.conv2d(h, w, Some(b), 2, 1);
            h = tape.leaky_relu(z, slope);
            cin = cout;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Tensor;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn encoding_at_origin() {
        let e = positional_encoding([0.0f64; 3], 2);
        assert_eq!(e.len(), 15);
        for k in 0..2 {
            assert_eq!(&e[3 + 6 * k..6 + 6 * k], &[0.0; 3]);
            assert_eq!(&e[6 + 6 * k..9 + 6 * k], &[1.0; 3]);
        }
        assert_eq!(positional_encoding([1.0f64, 2.0, 3.0], 0), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn encoding_quarter_turn() {
        let e = positional_encoding([FRAC_PI_2, 0.0, 0.0], 1);
        assert!((e[3] - 1.0).abs() < 1e-15);
        assert!(e[6].abs() < 1e-15);
    }

    #[test]
    fn encoding_jacobian_matches_differences() {
        let x: [f64; 3] = [0.3, -0.7, 1.1];
        let j = positional_encoding_jacobian(x, 4);
        for axis in 0..3 {
            let (mut a, mut b) = (x, x);
            a[axis] += 1e-6;
            b[axis] -= 1e-6;
            let (ea, eb) = (positional_encoding(a, 4), positional_encoding(b, 4));
            for s in 0..ea.len() {
                assert!(((ea[s] - eb[s]) / 2e-6 - j[axis][s]).abs() < 1e-6);
            }
        }
    }

    fn two_texel_image() -> AttributeImage {
        AttributeImage::from_data(1, 2, 1, vec![0.0, 10.0]).unwrap()
    }

    #[test]
    fn bilinear_nodes_midpoints_and_clamp() {
        let img = two_texel_image();
        assert_eq!(bilinear_sample(&img, 1.5, 0.5), vec![10.0]);
        assert_eq!(bilinear_sample(&img, 1.0, 0.5), vec![5.0]);
        assert_eq!(bilinear_sample(&img, -3.7, -2.2), vec![0.0]);
        let mut img = AttributeImage::new(3, 3, 1);
        img.data[0] = 4.0;
        assert_eq!(bilinear_sample(&img, -3.7, -2.2), vec![4.0]);
    }

    #[test]
    fn directional_taps_match_differences() {
        let (h, w) = (4, 5);
        let feat: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.77).sin()).collect();
        let sample = |u: f64, v: f64| -> f64 {
            bilinear_taps(0, h, w, u, v).iter().map(|&(t, wt)| wt * feat[t]).sum()
        };
        for &(u, v) in &[(1.3, 2.2), (3.9, 0.7), (2.1, 3.3)] {
            let (du, dv) = (0.6, -1.3);
            let d: f64 = bilinear_dir_taps(0, h, w, u, v, du, dv)
                .iter()
                .map(|&(t, wt)| wt * feat[t])
                .sum();
            let e = 1e-7;
            let fd = (sample(u + e * du, v + e * dv) - sample(u - e * du, v - e * dv)) / (2.0 * e);
            assert!((d - fd).abs() < 1e-6, "{d} vs {fd}");
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mlp = Mlp::new(MlpSpec::new(vec![3, 4, 2]).unwrap(), "f");
        let mut store = ParamStore::<f64>::new(0);
        mlp.init(&mut store);
        for name in store.names().map(str::to_owned).collect::<Vec<_>>() {
            store.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.1, 9.0]).unwrap());
        let y = mlp.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softplus_unit_value() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.softplus(x, 100.0);
        assert!((tape.value(y).item() - std::f64::consts::LN_2 / 100.0).abs() < 1e-15);
    }

    #[test]
    fn mlp_shape_mismatch_is_an_error() {
        let mlp = Mlp::new(MlpSpec::new(vec![3, 4, 2]).unwrap(), "f");
        let mut store = ParamStore::<f64>::new(0);
        mlp.init(&mut store);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 5]));
        assert!(mlp.forward(&mut tape, &store, x).is_err());
        assert!(MlpSpec::new(vec![3, 2]).is_err());
    }

    #[test]
    fn tangents_match_finite_differences() {
        let mlp = Mlp::new(MlpSpec::new(vec![3, 8, 8, 1]).unwrap(), "f");
        let mut store = ParamStore::<f64>::new(4);
        mlp.init(&mut store);
        let mlp_b = Mlp {
            spec: MlpSpec {
                softplus_beta: 3.0,
                ..mlp.spec.clone()
            },
            ..mlp.clone()
        };
        let x = [0.2, -0.4, 0.1];
        let eval = |p: [f64; 3]| {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::new(vec![1, 3], p.to_vec()).unwrap());
            let y = mlp_b.forward(&mut tape, &store, v).unwrap();
            tape.value(y).item()
        };
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(vec![1, 3], x.to_vec()).unwrap());
        let mut eye = vec![0.0; 9];
        for k in 0..3 {
            eye[k * 3 + k] = 1.0;
        }
        let t = tape.leaf(Tensor::new(vec![3, 3], eye).unwrap());
        let (_, ty) = mlp_b.forward_with_tangents(&mut tape, &store, v, t).unwrap();
        for k in 0..3 {
            let (mut a, mut b) = (x, x);
            a[k] += 1e-6;
            b[k] -= 1e-6;
            let fd: f64 = (eval(a) - eval(b)) / 2e-6;
            assert!((tape.value(ty).data()[k] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn encoder_shapes_and_zero_input() {
        let enc = ConvEncoder::new(ConvEncoderSpec::new(6, vec![8, 16]).unwrap(), "g");
        let mut store = ParamStore::<f32>::new(0);
        enc.init(&mut store);
        assert_eq!(enc.spec.stride(), 4);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 16, 16, 6]));
        let y = enc.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 4, 16]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let bad = tape.leaf(Tensor::zeros(&[2, 16, 16, 5]));
        assert!(enc.forward(&mut tape, &store, bad).is_err());
    }
}
