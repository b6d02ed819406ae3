//! Training data for the implicit field and the optimization loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::field::{field_head, LiftingInput, LiftingNet, LiftingSpec};
use super::losses::{loss_color, loss_eikonal, loss_inside_outside, loss_on_surface, LossWeights};
use crate::error::{param_err, Error, Result};
use crate::mesh::{AreaSampler, TriMesh, Vec3};
use crate::neural::{Adam, ParamStore, Scalar, Tape, Tensor, Var};
use crate::raster::Camera;

pub const NEAR_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointCounts {
    pub surface: usize,
    pub near: usize,
    pub uniform: usize,
}

/// Supervision samples for one mesh.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingPoints {
    pub surface: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub colors: Vec<[f32; 3]>,
    pub near: Vec<Vec3>,
    pub inside: Vec<bool>,
    pub uniform: Vec<Vec3>,
}

/// Area-weighted surface points with face normals and interpolated vertex
/// colors (mid-grey without colors).
pub fn sample_surface_points<R: Rng + ?Sized>(
    mesh: &TriMesh,
    colors: Option<&[[f32; 3]]>,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<Vec3>, Vec<Vec3>, Vec<[f32; 3]>)> {
    if let Some(c) = colors {
        if c.len() != mesh.vertices.len() {
            return param_err("need one color per vertex");
        }
    }
    let sampler = AreaSampler::new(mesh)?;
    let mut pts = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut cols = Vec::with_capacity(n);
    for _ in 0..n {
        let s = sampler.sample(mesh, rng);
        pts.push(s.point);
        normals.push(s.normal);
        cols.push(match colors {
            Some(c) => {
                let f = mesh.faces[s.face];
                std::array::from_fn(|k| {
                    let v = (0..3).map(|i| s.bary[i] * c[f[i] as usize][k] as f64).sum::<f64>();
                    v.clamp(0.0, 1.0) as f32
                })
            }
            None => [0.5; 3],
        });
    }
    Ok((pts, normals, cols))
}

/// Surface samples, near-surface samples jittered by `N(0, 0.02^2)` per
/// axis and labeled by winding number, and uniform samples in the box.
pub fn sample_training_points<R: Rng + ?Sized>(
    mesh: &TriMesh,
    colors: Option<&[[f32; 3]]>,
    counts: PointCounts,
    lo: [f64; 3],
    hi: [f64; 3],
    rng: &mut R,
) -> Result<TrainingPoints> {
    mesh.require_watertight()
        .map_err(|e| Error::Mesh(format!("cannot label samples: {e}")))?;
    let (surface, normals, colors) = sample_surface_points(mesh, colors, counts.surface, rng)?;
    let (near_base, _, _) = sample_surface_points(mesh, None, counts.near, rng)?;
    let jitter = Normal::new(0.0, NEAR_SIGMA).unwrap();
    let near: Vec<Vec3> = near_base
        .iter()
        .map(|p| p + Vec3::new(jitter.sample(rng), jitter.sample(rng), jitter.sample(rng)))
        .collect();
    let inside = label_inside(mesh, &near);
    let uniform = uniform_points(counts.uniform, lo, hi, rng);
    Ok(TrainingPoints {
        surface,
        normals,
        colors,
        near,
        inside,
        uniform,
    })
}

/// Generalized winding number above one half.
pub fn label_inside(mesh: &TriMesh, pts: &[Vec3]) -> Vec<bool> {
    pts.par_iter().map(|p| mesh.winding_number(p) > 0.5).collect()
}

pub fn uniform_points<R: Rng + ?Sized>(n: usize, lo: [f64; 3], hi: [f64; 3], rng: &mut R) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1]), rng.random_range(lo[2]..hi[2])))
        .collect()
}

/// One training example: images plus a pool of supervision points.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSubject {
    pub input: LiftingInput,
    pub points: TrainingPoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftTrainConfig {
    pub steps: usize,
    pub subjects_per_step: usize,
    /// Points drawn per subject and step; `uniform` points are fresh each step.
    pub per_step: PointCounts,
    pub lr: f64,
    /// Learning rate at the last step as a fraction of `lr`, reached by
    /// cosine decay; 1 keeps it constant.
    #[serde(default = "one")]
    pub final_lr_fraction: f64,
    pub weights: LossWeights,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub seed: u64,
}

impl Default for LiftTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            subjects_per_step: 4,
            per_step: PointCounts {
                surface: 256,
                near: 256,
                uniform: 64,
            },
            lr: 1e-3,
            final_lr_fraction: 1.0,
            weights: LossWeights::default(),
            lo: [-1.0; 3],
            hi: [1.0; 3],
            seed: 0,
        }
    }
}

fn one() -> f64 {
    1.0
}

impl LiftTrainConfig {
    /// Learning rate of step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let f = self.final_lr_fraction;
        let progress = step as f64 / self.steps.saturating_sub(1).max(1) as f64;
        self.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Points selected for one step.
#[derive(Debug, Clone, Default)]
pub struct StepBatch {
    pub inputs: Vec<Tensor<f32>>,
    pub cameras: Vec<[Camera; 2]>,
    pub surface: Vec<(usize, Vec3)>,
    pub normals: Vec<[f64; 3]>,
    pub colors: Vec<[f32; 3]>,
    pub near: Vec<(usize, Vec3)>,
    pub inside: Vec<bool>,
    pub uniform: Vec<(usize, Vec3)>,
}

impl StepBatch {
    /// Draw subjects and points for one step.
    pub fn draw<R: Rng + ?Sized>(
        spec: &LiftingSpec,
        subjects: &[TrainingSubject],
        cfg: &LiftTrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if subjects.is_empty() {
            return param_err("no training subjects");
        }
        let mut b = StepBatch::default();
        for slot in 0..cfg.subjects_per_step.min(subjects.len()) {
            let s = &subjects[rng.random_range(0..subjects.len())];
            b.inputs.push(s.input.encoder_input(spec)?);
            b.cameras.push(s.input.cameras());
            let p = &s.points;
            if p.surface.is_empty() || p.near.is_empty() {
                return param_err("subject has an empty point pool");
            }
            for _ in 0..cfg.per_step.surface {
                let i = rng.random_range(0..p.surface.len());
                b.surface.push((slot, p.surface[i]));
                b.normals.push(p.normals[i].into());
                b.colors.push(p.colors[i]);
            }
            for _ in 0..cfg.per_step.near {
                let i = rng.random_range(0..p.near.len());
                b.near.push((slot, p.near[i]));
                b.inside.push(p.inside[i]);
            }
            for q in uniform_points(cfg.per_step.uniform, cfg.lo, cfg.hi, rng) {
                b.uniform.push((slot, q));
            }
        }
        Ok(b)
    }
}

/// Per-term values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub surface: f64,
    pub inside: f64,
    pub eikonal: f64,
    pub color: f64,
    pub total: f64,
}

/// Weighted loss of a step on a tape.
pub fn step_loss<T: Scalar>(
    spec: &LiftingSpec,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    batch: &StepBatch,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let mut shape = batch.inputs[0].shape().to_vec();
    shape[0] = batch.inputs.iter().map(|t| t.shape()[0]).sum();
    let data = batch.inputs.iter().flat_map(|t| t.data().iter().map(|&x| T::of(x as f64))).collect();
    let x = tape.leaf(Tensor::new(shape, data)?);
    let feat = spec.encoder()?.forward(tape, store, x)?;
    let mut with_grad = batch.surface.clone();
    with_grad.extend(&batch.uniform);
    let ns = batch.surface.len();
    let out = field_head(spec, tape, store, feat, &batch.cameras, &with_grad, true)?;
    let part = |tape: &mut Tape<T>, v: Var, start: usize, len: usize| {
        let cols = tape.value(v).cols();
        let flat = tape.reshape(v, &[1, tape.value(v).len()]);
        let s = tape.slice_last(flat, start * cols, len * cols);
        tape.reshape(s, &[len, cols])
    };
    let nu = batch.uniform.len();
    let g = out.grad.unwrap();
    let surf = super::field::FieldOutputs {
        d: part(tape, out.d, 0, ns),
        color: part(tape, out.color, 0, ns),
        grad: Some(g.map(|c| part(tape, c, 0, ns))),
    };
    let unif = super::field::FieldOutputs {
        d: part(tape, out.d, ns, nu),
        color: part(tape, out.color, ns, nu),
        grad: Some(g.map(|c| part(tape, c, ns, nu))),
    };
    let near = field_head(spec, tape, store, feat, &batch.cameras, &batch.near, false)?;
    let terms = [
        (loss_on_surface(tape, &surf, &batch.normals)?, weights.surface),
        (loss_inside_outside(tape, &near, &batch.inside)?, weights.inside),
        (loss_eikonal(tape, &unif)?, weights.eikonal),
        (loss_color(tape, &surf, &batch.colors)?, weights.color),
    ];
    let vals: Vec<f64> = terms.iter().map(|(v, _)| tape.value(*v).item().as_f64()).collect();
    let mut total = None;
    for (v, w) in terms {
        let s = tape.scale(v, T::of(w));
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s),
        });
    }
    let total = total.unwrap();
    let b = LossBreakdown {
        surface: vals[0],
        inside: vals[1],
        eikonal: vals[2],
        color: vals[3],
        total: tape.value(total).item().as_f64(),
    };
    Ok((total, b))
}

/// Adam on the weighted loss. `on_step` sees every step's breakdown and
/// the current network.
pub fn train_lifting(
    net: &mut LiftingNet,
    subjects: &[TrainingSubject],
    cfg: &LiftTrainConfig,
    mut on_step: impl FnMut(usize, &LossBreakdown, &LiftingNet),
) -> Result<Vec<LossBreakdown>> {
    if !(0.0..=1.0).contains(&cfg.final_lr_fraction) {
        return Err(Error::Param(format!("final_lr_fraction {} is outside [0, 1]", cfg.final_lr_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = StepBatch::draw(&net.spec, subjects, cfg, &mut rng)?;
        let mut tape = Tape::<f32>::new();
        let (loss, b) = step_loss(&net.spec, &mut tape, &net.params, &batch, &cfg.weights)?;
        if !b.total.is_finite() {
            return Err(Error::Param(format!("lifting loss diverged at step {step}")));
        }
        let grads = tape.backward(loss).params();
        adam.lr = cfg.lr_at(step);
        adam.step(&mut net.params, &grads)?;
        on_step(step, &b, net);
        history.push(b);
    }
    Ok(history)
}

/// Small random fixture for gradient checks: a tiny network, one subject
/// with random images and a few points of each kind.
pub fn gradcheck_fixture(seed: u64) -> Result<(LiftingSpec, ParamStore<f64>, StepBatch)> {
    use crate::raster::AttributeImage;
    let spec = LiftingSpec {
        use_control: true,
        encoder_stages: vec![3, 4],
        hidden: vec![8, 8],
        pe_levels: 2,
        ..LiftingSpec::default()
    };
    let mut store = ParamStore::<f64>::new(seed);
    super::field::init_params(&spec, &mut store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // break the near-zero init so every path carries signal
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for n in &names {
        for v in store.get_mut(n)?.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let (h, w) = (8, 8);
    let mut img = |c: usize| AttributeImage::from_data(h, w, c, (0..h * w * c).map(|_| rng.random_range(0.0..1.0f32)).collect());
    let input = LiftingInput {
        front: img(3)?,
        back: img(3)?,
        control: Some(img(6)?),
        front_camera: Camera::front_ortho(w, h, 1.0)?,
        back_camera: Camera::back_ortho(w, h, 1.0)?,
    };
    let subject = TrainingSubject {
        points: TrainingPoints {
            surface: uniform_points(5, [-0.8; 3], [0.8; 3], &mut rng),
            normals: (0..5).map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize()).collect(),
            colors: (0..5).map(|_| [rng.random_range(0.0..1.0); 3]).collect(),
            near: uniform_points(5, [-0.8; 3], [0.8; 3], &mut rng),
            inside: (0..5).map(|i| i % 2 == 0).collect(),
            uniform: Vec::new(),
        },
        input,
    };
    let cfg = LiftTrainConfig {
        subjects_per_step: 1,
        per_step: PointCounts {
            surface: 5,
            near: 5,
            uniform: 4,
        },
        lo: [-0.8; 3],
        hi: [0.8; 3],
        ..LiftTrainConfig::default()
    };
    let batch = StepBatch::draw(&spec, std::slice::from_ref(&subject), &cfg, &mut rng)?;
    Ok((spec, store, batch))
}

/// Parameter gradient checks of each lifting loss and of the weighted sum,
/// analytic in `T` against f64 finite differences.
pub fn loss_gradchecks<T: Scalar>(seed: u64, tolerance: f64) -> Result<Vec<crate::neural::gradcheck::GradCheck>> {
    use crate::neural::gradcheck::check_params;
    let (spec, store, batch) = gradcheck_fixture(seed)?;
    let only = |which: usize| -> LossWeights {
        let mut w = [0.0; 4];
        w[which] = 1.0;
        LossWeights {
            surface: w[0],
            inside: w[1],
            eikonal: w[2],
            color: w[3],
        }
    };
    let cases = [
        ("lifting.surface", only(0)),
        ("lifting.inside_outside", only(1)),
        ("lifting.eikonal", only(2)),
        ("lifting.color", only(3)),
        ("lifting.total", LossWeights::default()),
    ];
    let mut out = Vec::new();
    for (name, w) in cases {
        let f = |tape: &mut Tape<T>, s: &ParamStore<T>| step_loss(&spec, tape, s, &batch, &w).unwrap().0;
        let f64_ = |tape: &mut Tape<f64>, s: &ParamStore<f64>| step_loss(&spec, tape, s, &batch, &w).unwrap().0;
        out.push(check_params(name, &store, &f, &f64_, 6, tolerance));
    }
    Ok(out)
}
