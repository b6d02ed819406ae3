//! Pixel-aligned implicit field.
//!
//! A conv encoder turns the stacked input images into a stride-S feature
//! map. A point is projected into the view(s), the feature map is sampled
//! bilinearly there, and an MLP maps `features ⊕ γ(x)` to a signed distance
//! and a color.
//!
//! Inference splits the first MLP layer into a feature part and one part
//! per coordinate axis, added in a fixed order. Grid blocks cache the parts
//! per column and per axis; single points compute the same parts directly,
//! so both paths give identical bits.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mc::{GridConfig, SdfField};
use crate::error::{param_err, Error, Result};
use crate::mesh::Vec3;
use crate::neural::layers::{bilinear_dir_taps, bilinear_taps, encoding_width, positional_encoding, positional_encoding_jacobian};
use crate::neural::tape::{softplus, Taps};
use crate::neural::{ConvEncoder, ConvEncoderSpec, Mlp, MlpSpec, ParamStore, Scalar, Tape, Tensor, Var};
use crate::raster::{AttributeImage, Camera};

pub const ENCODER_PREFIX: &str = "lift.encoder";
pub const FIELD_PREFIX: &str = "lift.field";

/// How the back image reaches the field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Concatenate all images channel-wise and encode once; points sample
    /// the map at their front projection.
    #[default]
    StackChannels,
    /// Encode front and back separately with a shared encoder and sample
    /// each at the point's projection into its own camera.
    DualProjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiftingSpec {
    /// Consume the 6-channel body control image.
    pub use_control: bool,
    pub mode: FeatureMode,
    pub encoder_stages: Vec<usize>,
    pub hidden: Vec<usize>,
    pub pe_levels: usize,
    /// Radius of the sphere the untrained field approximates.
    pub init_radius: f64,
}

impl Default for LiftingSpec {
    fn default() -> Self {
        Self {
            use_control: true,
            mode: FeatureMode::StackChannels,
            encoder_stages: vec![16, 32],
            hidden: vec![64, 64, 64],
            pe_levels: 6,
            init_radius: 0.5,
        }
    }
}

impl LiftingSpec {
    pub fn views(&self) -> usize {
        match self.mode {
            FeatureMode::StackChannels => 1,
            FeatureMode::DualProjection => 2,
        }
    }

    pub fn encoder_in_channels(&self) -> usize {
        let ctrl = if self.use_control { 6 } else { 0 };
        match self.mode {
            FeatureMode::StackChannels => 6 + ctrl,
            FeatureMode::DualProjection => 3 + ctrl,
        }
    }

    pub fn encoder(&self) -> Result<ConvEncoder> {
        Ok(ConvEncoder::new(
            ConvEncoderSpec::new(self.encoder_in_channels(), self.encoder_stages.clone())?,
            ENCODER_PREFIX,
        ))
    }

    pub fn stride(&self) -> usize {
        1 << self.encoder_stages.len()
    }

    pub fn feature_width(&self) -> usize {
        self.views() * self.encoder_stages.last().copied().unwrap_or(0)
    }

    pub fn mlp_input(&self) -> usize {
        self.feature_width() + encoding_width(self.pe_levels)
    }

    pub fn mlp(&self) -> Result<Mlp> {
        let mut widths = vec![self.mlp_input()];
        widths.extend(&self.hidden);
        widths.push(4);
        Ok(Mlp::new(MlpSpec::new(widths)?, FIELD_PREFIX))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder()?;
        self.mlp()?;
        if !(self.init_radius > 0.0) {
            return param_err("init radius must be positive");
        }
        Ok(())
    }
}

/// Images and cameras for one reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftingInput {
    pub front: AttributeImage,
    pub back: AttributeImage,
    pub control: Option<AttributeImage>,
    pub front_camera: Camera,
    pub back_camera: Camera,
}

impl LiftingInput {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.front.height, self.front.width);
        let same = |img: &AttributeImage| img.height == h && img.width == w;
        if self.front.channels != 3 || self.back.channels != 3 {
            return param_err("front and back images must have 3 channels");
        }
        if !same(&self.back) {
            return param_err("front and back images differ in size");
        }
        if let Some(c) = &self.control {
            if c.channels != 6 || !same(c) {
                return param_err("control image must be 6 channels at the image size");
            }
        }
        for cam in [&self.front_camera, &self.back_camera] {
            if cam.width != w || cam.height != h {
                return param_err("camera size does not match the images");
            }
        }
        Ok(())
    }

    /// Encoder input `[views, H, W, C]` for `spec`.
    pub fn encoder_input(&self, spec: &LiftingSpec) -> Result<Tensor<f32>> {
        self.validate()?;
        let control = match (&self.control, spec.use_control) {
            (Some(c), true) => Some(c),
            (None, false) => None,
            (None, true) => return param_err("network expects a control image but none was given"),
            (Some(_), false) => return param_err("network has no control channels but a control image was given"),
        };
        let (h, w) = (self.front.height, self.front.width);
        let views: Vec<AttributeImage> = match spec.mode {
            FeatureMode::StackChannels => {
                let mut parts = vec![&self.front, &self.back];
                parts.extend(control);
                vec![AttributeImage::concat(&parts)?]
            }
            FeatureMode::DualProjection => [&self.front, &self.back]
                .into_iter()
                .map(|img| {
                    let mut parts = vec![img];
                    parts.extend(control);
                    AttributeImage::concat(&parts)
                })
                .collect::<Result<_>>()?,
        };
        let c = spec.encoder_in_channels();
        let data: Vec<f32> = views.iter().flat_map(|v| v.data.iter().copied()).collect();
        Tensor::new(vec![views.len(), h, w, c], data)
    }

    pub fn cameras(&self) -> [Camera; 2] {
        [self.front_camera, self.back_camera]
    }
}

/// Encoder and field parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftingNet {
    pub spec: LiftingSpec,
    pub params: ParamStore<f32>,
}

impl LiftingNet {
    pub fn new(spec: LiftingSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new(seed);
        init_params(&spec, &mut params)?;
        Ok(Self { spec, params })
    }
}

/// Encoder He init plus a field that starts as a sphere: raw-coordinate
/// inputs get ReLU-scale weights, encoding and feature inputs start near
/// zero, and the distance head is a positive mean readout minus the radius.
pub fn init_params<T: Scalar>(spec: &LiftingSpec, store: &mut ParamStore<T>) -> Result<()> {
    spec.encoder()?.init(store);
    let mlp = spec.mlp()?;
    mlp.init(store);
    let widths = &mlp.spec.widths;
    let f = spec.feature_width();
    let h1 = widths[1];
    let w0 = store.get_mut(&mlp.weight_name(0))?;
    let coord_std = (2.0 / h1 as f64).sqrt();
    let scale_rows = |row: usize| if row >= f && row < f + 3 { coord_std / (2.0 / widths[0] as f64).sqrt() } else { 1e-3 / (2.0 / widths[0] as f64).sqrt() };
    for row in 0..widths[0] {
        let s = T::of(scale_rows(row));
        for v in &mut w0.data_mut()[row * h1..(row + 1) * h1] {
            *v *= s;
        }
    }
    for l in 1..mlp.spec.layers() - 1 {
        let (i, o) = (widths[l], widths[l + 1]);
        let s = T::of((2.0 / o as f64).sqrt() / (2.0 / i as f64).sqrt());
        for v in store.get_mut(&mlp.weight_name(l))?.data_mut() {
            *v *= s;
        }
    }
    let last = mlp.spec.layers() - 1;
    let n_in = widths[last];
    let mean = std::f64::consts::PI.sqrt() / (n_in as f64).sqrt();
    let he = (2.0 / n_in as f64).sqrt();
    let w = store.get_mut(&mlp.weight_name(last))?;
    for r in 0..n_in {
        for c in 0..4 {
            let v = &mut w.data_mut()[r * 4 + c];
            *v = if c == 0 {
                T::of(mean + v.as_f64() / he * 1e-4)
            } else {
                T::of(v.as_f64() / he * 1e-3)
            };
        }
    }
    let b = store.get_mut(&mlp.bias_name(last))?;
    b.data_mut().copy_from_slice(&[T::of(-spec.init_radius), T::of(0.5), T::of(0.5), T::of(0.5)]);
    Ok(())
}

/// Where a point lands in a view, in feature-map texels, with its
/// derivative with respect to the world point.
fn feature_coords(cam: &Camera, stride: usize, p: &Vec3) -> (f64, f64, [[f64; 3]; 2]) {
    let s = stride as f64;
    match cam.project_with_jacobian(p) {
        Ok((q, j)) => (
            q.u / s,
            q.v / s,
            [[j[(0, 0)] / s, j[(0, 1)] / s, j[(0, 2)] / s], [j[(1, 0)] / s, j[(1, 1)] / s, j[(1, 2)] / s]],
        ),
        // behind a perspective camera: border texel, no derivative
        Err(_) => (-1.0, -1.0, [[0.0; 3]; 2]),
    }
}

/// Field values on a tape, with optional input gradients `∂d/∂x_a`.
#[derive(Debug, Clone, Copy)]
pub struct FieldOutputs {
    /// `[N, 1]`.
    pub d: Var,
    /// `[N, 3]`, unclamped.
    pub color: Var,
    /// Three `[N, 1]` components.
    pub grad: Option<[Var; 3]>,
}

/// Differentiable forward pass. `inputs` is `[B * views, H, W, C]`; each
/// point carries the index of its subject in that batch.
pub fn field_forward<T: Scalar>(
    spec: &LiftingSpec,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    inputs: Var,
    cameras: &[[Camera; 2]],
    points: &[(usize, Vec3)],
    with_grad: bool,
) -> Result<FieldOutputs> {
    let feat = spec.encoder()?.forward(tape, store, inputs)?;
    field_head(spec, tape, store, feat, cameras, points, with_grad)
}

/// Field MLP over an already encoded feature map.
pub fn field_head<T: Scalar>(
    spec: &LiftingSpec,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    feat: Var,
    cameras: &[[Camera; 2]],
    points: &[(usize, Vec3)],
    with_grad: bool,
) -> Result<FieldOutputs> {
    if points.is_empty() {
        return param_err("no points to evaluate");
    }
    let fs = tape.value(feat).shape().to_vec();
    let (h, w) = (fs[1], fs[2]);
    let views = spec.views();
    if fs[0] != cameras.len() * views {
        return param_err("camera list does not match the input batch");
    }
    let n = points.len();
    let stride = spec.stride();
    let mut parts = Vec::new();
    let mut dir_parts = Vec::new();
    for view in 0..views {
        let mut taps: Vec<Taps<T>> = Vec::with_capacity(n);
        let mut dtaps: Vec<Taps<T>> = Vec::with_capacity(if with_grad { 3 * n } else { 0 });
        let coords: Vec<_> = points
            .iter()
            .map(|(b, p)| {
                let cams = cameras.get(*b).ok_or_else(|| Error::Param("subject index out of range".into()))?;
                Ok((b * views + view, feature_coords(&cams[view], stride, p)))
            })
            .collect::<Result<_>>()?;
        for (img, (u, v, _)) in &coords {
            taps.push(bilinear_taps(*img, h, w, T::of(*u), T::of(*v)));
        }
        if with_grad {
            for a in 0..3 {
                for (img, (u, v, j)) in &coords {
                    dtaps.push(bilinear_dir_taps(*img, h, w, T::of(*u), T::of(*v), T::of(j[0][a]), T::of(j[1][a])));
                }
            }
            dir_parts.push(tape.gather4(feat, Arc::new(dtaps)));
        }
        parts.push(tape.gather4(feat, Arc::new(taps)));
    }
    let pw = encoding_width(spec.pe_levels);
    let pe: Vec<T> = points
        .iter()
        .flat_map(|(_, p)| positional_encoding([T::of(p.x), T::of(p.y), T::of(p.z)], spec.pe_levels))
        .collect();
    parts.push(tape.leaf(Tensor::new(vec![n, pw], pe)?));
    let x = tape.concat_last(&parts);
    let mlp = spec.mlp()?;
    let (out, grad) = if with_grad {
        let mut jac = vec![T::zero(); 3 * n * pw];
        for (i, (_, p)) in points.iter().enumerate() {
            let jx = positional_encoding_jacobian([T::of(p.x), T::of(p.y), T::of(p.z)], spec.pe_levels);
            for (a, col) in jx.iter().enumerate() {
                jac[(a * n + i) * pw..(a * n + i + 1) * pw].copy_from_slice(col);
            }
        }
        dir_parts.push(tape.leaf(Tensor::new(vec![3 * n, pw], jac)?));
        let tx = tape.concat_last(&dir_parts);
        let (out, t) = mlp.forward_with_tangents(tape, store, x, tx)?;
        let td = tape.slice_last(t, 0, 1);
        let flat = tape.reshape(td, &[1, 3 * n]);
        let g = [0, 1, 2].map(|a| {
            let s = tape.slice_last(flat, a * n, n);
            tape.reshape(s, &[n, 1])
        });
        (out, Some(g))
    } else {
        (mlp.forward(tape, store, x)?, None)
    };
    let d = tape.slice_last(out, 0, 1);
    let color = tape.slice_last(out, 1, 3);
    Ok(FieldOutputs { d, color, grad })
}

/// Distance and clamped color at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub d: f32,
    pub c: [f32; 3],
}

struct Dense {
    w: Vec<f32>,
    b: Vec<f32>,
    out: usize,
}

/// Field with a cached feature map, evaluated in f32.
pub struct ImplicitField {
    spec: LiftingSpec,
    cameras: [Camera; 2],
    /// `[views, h, w, C]`.
    features: Vec<f32>,
    fh: usize,
    fw: usize,
    fc: usize,
    w0_feat: Vec<f32>,
    w0_pe: Vec<f32>,
    b0: Vec<f32>,
    tail: Vec<Dense>,
    beta: f32,
    column_cache: bool,
}

impl std::fmt::Debug for ImplicitField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImplicitField")
            .field("spec", &self.spec)
            .field("feature_map", &[self.spec.views(), self.fh, self.fw, self.fc])
            .finish()
    }
}

/// Encode the input once and cache the features.
pub fn build_field(input: &LiftingInput, net: &LiftingNet) -> Result<ImplicitField> {
    let spec = &net.spec;
    let x = input.encoder_input(spec)?;
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(x);
    let feat = spec.encoder()?.forward(&mut tape, &net.params, xv)?;
    let ft = tape.value(feat).clone();
    let fs = ft.shape().to_vec();
    let mlp = spec.mlp()?;
    let widths = &mlp.spec.widths;
    let h1 = widths[1];
    let w0 = net.params.get(&mlp.weight_name(0))?.data();
    let fwid = spec.feature_width();
    let mut tail = Vec::new();
    for l in 1..mlp.spec.layers() {
        tail.push(Dense {
            w: net.params.get(&mlp.weight_name(l))?.data().to_vec(),
            b: net.params.get(&mlp.bias_name(l))?.data().to_vec(),
            out: widths[l + 1],
        });
    }
    let cameras = input.cameras();
    let column_cache = cameras[..spec.views()].iter().all(Camera::pixel_ignores_world_z);
    Ok(ImplicitField {
        spec: spec.clone(),
        cameras,
        features: ft.into_data(),
        fh: fs[1],
        fw: fs[2],
        fc: fs[3],
        w0_feat: w0[..fwid * h1].to_vec(),
        w0_pe: w0[fwid * h1..].to_vec(),
        b0: net.params.get(&mlp.bias_name(0))?.data().to_vec(),
        tail,
        beta: mlp.spec.softplus_beta as f32,
        column_cache,
    })
}

impl ImplicitField {
    pub fn spec(&self) -> &LiftingSpec {
        &self.spec
    }

    fn h1(&self) -> usize {
        self.b0.len()
    }

    /// Bias plus the feature contribution to the first layer.
    fn feature_part(&self, p: &Vec3, acc: &mut [f32]) {
        acc.copy_from_slice(&self.b0);
        let h1 = self.h1();
        let c = self.fc;
        let mut f = vec![0.0f32; c];
        for view in 0..self.spec.views() {
            let (u, v, _) = feature_coords(&self.cameras[view], self.spec.stride(), p);
            f.iter_mut().for_each(|x| *x = 0.0);
            for (texel, wt) in bilinear_taps(view, self.fh, self.fw, u as f32, v as f32) {
                if wt == 0.0 {
                    continue;
                }
                for (o, &x) in f.iter_mut().zip(&self.features[texel * c..(texel + 1) * c]) {
                    *o += wt * x;
                }
            }
            for (ci, &x) in f.iter().enumerate() {
                let row = &self.w0_feat[(view * c + ci) * h1..(view * c + ci + 1) * h1];
                for (a, &wv) in acc.iter_mut().zip(row) {
                    *a += x * wv;
                }
            }
        }
    }

    /// First-layer contribution of one coordinate.
    fn axis_part(&self, axis: usize, x: f64, acc: &mut [f32]) {
        let h1 = self.h1();
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut p = [0.0f32; 3];
        p[axis] = x as f32;
        let pe = positional_encoding(p, self.spec.pe_levels);
        let mut rows = vec![axis];
        for k in 0..self.spec.pe_levels {
            rows.push(3 + 6 * k + axis);
            rows.push(6 + 6 * k + axis);
        }
        for r in rows {
            let w = &self.w0_pe[r * h1..(r + 1) * h1];
            for (a, &wv) in acc.iter_mut().zip(w) {
                *a += pe[r] * wv;
            }
        }
    }

    fn finish(&self, pre: &[f32], scratch: &mut (Vec<f32>, Vec<f32>)) -> [f32; 4] {
        let (h, z) = scratch;
        h.clear();
        h.extend(pre.iter().map(|&x| softplus(x, self.beta)));
        for (l, layer) in self.tail.iter().enumerate() {
            z.clear();
            z.extend_from_slice(&layer.b);
            for (i, &x) in h.iter().enumerate() {
                for (o, &wv) in z.iter_mut().zip(&layer.w[i * layer.out..(i + 1) * layer.out]) {
                    *o += x * wv;
                }
            }
            if l + 1 < self.tail.len() {
                h.clear();
                h.extend(z.iter().map(|&x| softplus(x, self.beta)));
            }
        }
        [z[0], z[1], z[2], z[3]]
    }

    fn raw(&self, p: &Vec3) -> [f32; 4] {
        let h1 = self.h1();
        let mut pre = vec![0.0; h1];
        let mut part = vec![0.0; h1];
        self.feature_part(p, &mut pre);
        for (axis, x) in [p.x, p.y, p.z].into_iter().enumerate() {
            self.axis_part(axis, x, &mut part);
            pre.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
        }
        self.finish(&pre, &mut (Vec::new(), Vec::new()))
    }

    pub fn eval_point(&self, p: &Vec3) -> Result<FieldSample> {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return param_err("query point is not finite");
        }
        let r = self.raw(p);
        Ok(FieldSample {
            d: r[0],
            c: [r[1], r[2], r[3]].map(|c| c.clamp(0.0, 1.0)),
        })
    }
}

impl SdfField for ImplicitField {
    fn distance(&self, p: &Vec3) -> f32 {
        self.raw(p)[0]
    }

    fn eval_block(&self, grid: &GridConfig, lo: [usize; 3], dims: [usize; 3]) -> Vec<f32> {
        let h1 = self.h1();
        let axis = |a: usize| -> Vec<Vec<f32>> {
            (lo[a]..lo[a] + dims[a])
                .map(|i| {
                    let mut acc = vec![0.0; h1];
                    self.axis_part(a, grid.coord(a, i), &mut acc);
                    acc
                })
                .collect()
        };
        let (ax, ay, az) = (axis(0), axis(1), axis(2));
        let columns: Option<Vec<Vec<f32>>> = self.column_cache.then(|| {
            let mut out = Vec::with_capacity(dims[0] * dims[1]);
            for j in lo[1]..lo[1] + dims[1] {
                for i in lo[0]..lo[0] + dims[0] {
                    let mut acc = vec![0.0; h1];
                    self.feature_part(&grid.point(i, j, lo[2]), &mut acc);
                    out.push(acc);
                }
            }
            out
        });
        let mut scratch = (Vec::with_capacity(h1), Vec::with_capacity(h1));
        let mut pre = vec![0.0; h1];
        let mut out = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    match &columns {
                        Some(c) => pre.copy_from_slice(&c[j * dims[0] + i]),
                        None => self.feature_part(&grid.point(lo[0] + i, lo[1] + j, lo[2] + k), &mut pre),
                    }
                    for part in [&ax[i], &ay[j], &az[k]] {
                        pre.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                    }
                    out.push(self.finish(&pre, &mut scratch)[0]);
                }
            }
        }
        out
    }

    fn distances(&self, pts: &[Vec3]) -> Vec<f32> {
        pts.par_iter().map(|p| self.distance(p)).collect()
    }

    fn colors(&self, pts: &[Vec3]) -> Vec<[f32; 3]> {
        pts.par_iter()
            .map(|p| {
                let r = self.raw(p);
                [r[1], r[2], r[3]].map(|c| c.clamp(0.0, 1.0))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::mc::chunked_grid_eval;
    use crate::neural::gradcheck::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_spec(use_control: bool) -> LiftingSpec {
        LiftingSpec {
            use_control,
            encoder_stages: vec![4, 8],
            hidden: vec![16, 16],
            pe_levels: 3,
            ..LiftingSpec::default()
        }
    }

    fn random_input(seed: u64, size: usize, control: bool, perspective: bool) -> LiftingInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = |c: usize| {
            AttributeImage::from_data(size, size, c, (0..size * size * c).map(|_| rng.random_range(0.0..1.0f32)).collect()).unwrap()
        };
        let (front_camera, back_camera) = if perspective {
            (Camera::front_perspective(size, size, 1.0, 3.0).unwrap(), Camera::back_perspective(size, size, 1.0, 3.0).unwrap())
        } else {
            (Camera::front_ortho(size, size, 1.0).unwrap(), Camera::back_ortho(size, size, 1.0).unwrap())
        };
        LiftingInput {
            front: img(3),
            back: img(3),
            control: control.then(|| img(6)),
            front_camera,
            back_camera,
        }
    }

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn untrained_field_is_a_sphere() {
        for seed in 0..3 {
            let net = LiftingNet::new(LiftingSpec::default(), seed).unwrap();
            let input = random_input(seed, 32, true, false);
            let f = build_field(&input, &net).unwrap();
            assert!(f.eval_point(&Vec3::zeros()).unwrap().d < 0.0);
            for p in random_points(50, seed) {
                let p = p.normalize() * 2.0;
                assert!(f.eval_point(&p).unwrap().d > 0.0, "{p:?}");
            }
        }
    }

    #[test]
    fn empty_images_give_zero_features() {
        let net = LiftingNet::new(small_spec(true), 3).unwrap();
        let mut input = random_input(0, 16, true, false);
        for img in [&mut input.front, &mut input.back] {
            *img = AttributeImage::new(16, 16, 3);
        }
        input.control = Some(AttributeImage::new(16, 16, 6));
        let f = build_field(&input, &net).unwrap();
        assert!(f.features.iter().all(|&x| x == 0.0));
        let mut other = input.clone();
        other.front_camera = Camera::front_ortho(16, 16, 0.5).unwrap();
        let g = build_field(&other, &net).unwrap();
        for p in random_points(100, 1) {
            assert_eq!(f.eval_point(&p).unwrap(), g.eval_point(&p).unwrap());
        }
    }

    #[test]
    fn grid_and_point_paths_agree_bitwise() {
        for perspective in [false, true] {
            let net = LiftingNet::new(small_spec(true), 5).unwrap();
            let f = build_field(&random_input(1, 16, true, perspective), &net).unwrap();
            assert_eq!(f.column_cache, !perspective);
            let cfg = GridConfig::cube(12, 1.0).with_chunk(5);
            let grid = chunked_grid_eval(&f, &cfg).unwrap();
            let s = cfg.samples();
            for k in 0..s {
                for j in 0..s {
                    for i in 0..s {
                        assert_eq!(grid[(k * s + j) * s + i].to_bits(), f.distance(&cfg.point(i, j, k)).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn builds_are_deterministic_and_control_is_consumed() {
        let with = LiftingNet::new(small_spec(true), 9).unwrap();
        let without = LiftingNet::new(small_spec(false), 9).unwrap();
        let input = random_input(2, 16, true, false);
        let a = build_field(&input, &with).unwrap();
        let b = build_field(&input, &with).unwrap();
        let mut bare = input.clone();
        bare.control = None;
        let c = build_field(&bare, &without).unwrap();
        let mut differs = 0;
        for p in random_points(1000, 3) {
            let (x, y) = (a.eval_point(&p).unwrap(), b.eval_point(&p).unwrap());
            assert_eq!(x, y);
            differs += (x.d != c.eval_point(&p).unwrap().d) as usize;
        }
        assert!(differs > 900);
        assert!(build_field(&bare, &with).is_err());
        assert!(build_field(&input, &without).is_err());
    }

    #[test]
    fn inference_matches_the_tape() {
        for mode in [FeatureMode::StackChannels, FeatureMode::DualProjection] {
            let spec = LiftingSpec { mode, ..small_spec(true) };
            let net = LiftingNet::new(spec.clone(), 4).unwrap();
            let input = random_input(4, 16, true, false);
            let f = build_field(&input, &net).unwrap();
            let pts = random_points(64, 4);
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(input.encoder_input(&spec).unwrap());
            let tagged: Vec<(usize, Vec3)> = pts.iter().map(|p| (0, *p)).collect();
            let out = field_forward(&spec, &mut tape, &net.params, x, &[input.cameras()], &tagged, false).unwrap();
            for (i, p) in pts.iter().enumerate() {
                let s = f.eval_point(p).unwrap();
                assert!((tape.value(out.d).data()[i] - s.d).abs() < 1e-5);
                for c in 0..3 {
                    let raw = tape.value(out.color).data()[3 * i + c];
                    assert!((raw.clamp(0.0, 1.0) - s.c[c]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for (mode, perspective) in [(FeatureMode::StackChannels, false), (FeatureMode::DualProjection, true)] {
            let spec = LiftingSpec { mode, ..small_spec(true) };
            let mut store = ParamStore::<f64>::new(8);
            init_params(&spec, &mut store).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let names: Vec<String> = store.names().map(str::to_owned).collect();
            for n in &names {
                for v in store.get_mut(n).unwrap().data_mut() {
                    *v += rng.random_range(-0.2..0.2);
                }
            }
            let input = random_input(8, 16, true, perspective);
            let x64: Tensor<f64> = input.encoder_input(&spec).unwrap().cast();
            let cams = [input.cameras()];
            let eval = |p: &[(usize, Vec3)], grad: bool| {
                let mut tape = Tape::<f64>::new();
                let x = tape.leaf(x64.clone());
                let out = field_forward(&spec, &mut tape, &store, x, &cams, p, grad).unwrap();
                let d = tape.value(out.d).data().to_vec();
                let g = out.grad.map(|g| g.map(|c| tape.value(c).data().to_vec()));
                (d, g)
            };
            let pts: Vec<(usize, Vec3)> = random_points(100, 9).into_iter().map(|p| (0, p * 0.9)).collect();
            let (_, g) = eval(&pts, true);
            let g = g.unwrap();
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            for (i, (_, p)) in pts.iter().enumerate() {
                for a in 0..3 {
                    let mut f = |x: &[f64]| eval(&[(0, Vec3::new(x[0], x[1], x[2]))], false).0[0];
                    numeric.push(central_difference(&mut f, &[p.x, p.y, p.z], a, 1e-5));
                    analytic.push(g[a][i]);
                }
            }
            let err = relative_error(&analytic, &numeric);
            assert!(err <= 1e-5, "{mode:?}: {err}");
        }
    }

    #[test]
    fn input_validation() {
        let mut input = random_input(0, 16, true, false);
        input.back = AttributeImage::new(8, 8, 3);
        assert!(input.validate().is_err());
        let mut input = random_input(0, 16, true, false);
        input.front_camera = Camera::front_ortho(8, 8, 1.0).unwrap();
        assert!(input.validate().is_err());
        let input = random_input(0, 16, true, false);
        assert!(input.encoder_input(&small_spec(true)).unwrap().shape() == [1, 16, 16, 12]);
        let dual = LiftingSpec {
            mode: FeatureMode::DualProjection,
            ..small_spec(false)
        };
        let mut bare = input.clone();
        bare.control = None;
        assert_eq!(bare.encoder_input(&dual).unwrap().shape(), [2, 16, 16, 3]);
        assert_eq!(small_spec(false).encoder_in_channels(), 6);
    }
}
