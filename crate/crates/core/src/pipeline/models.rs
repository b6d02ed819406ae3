//! Checkpoints of the two generators and the two lifting nets, and the
//! routines that train them from a dataset.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::dataset::Sample;
use crate::container::{self, Tensor, TensorMap};
use crate::diffusion::{
    text_embedding, train_denoiser, ConvDenoiser, ConvDenoiserSpec, DropoutConfig, IdentityPatchCodec, LatentCodec,
    TrainConfig, TrainItem, TrainableDenoiser,
};
use crate::error::{param_err, Error, Result};
use crate::lifting::{
    sample_training_points, train_lifting, LiftTrainConfig, LiftingNet, LiftingSpec, LossBreakdown, PointCounts,
    TrainingSubject,
};
use crate::neural;
use crate::raster::{AttributeImage, Camera};

pub const FRONT_FILE: &str = "front.aptc";
pub const BACK_FILE: &str = "back.aptc";
pub const LIFT_FILE: &str = "lift.aptc";
pub const LIFT_RGB_FILE: &str = "lift_rgb.aptc";

const META: &str = "meta.spec";
const PARAMS: &str = "params.";

#[derive(Serialize, Deserialize)]
struct Meta<S> {
    spec: S,
    seed: u64,
}

fn json_tensor<T: Serialize>(value: &T) -> Result<Tensor> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Tensor::u8(vec![bytes.len()], bytes))
}

fn from_json_tensor<T: DeserializeOwned>(m: &TensorMap, path: &Path) -> Result<T> {
    let t = m.get(META).ok_or_else(|| Error::Format {
        offset: 0,
        msg: format!("{} has no {META} entry", path.display()),
    })?;
    let bytes: Vec<u8> = t.to_f64_vec().into_iter().map(|b| b as u8).collect();
    Ok(serde_json::from_slice(&bytes)?)
}

fn load_container(path: &Path) -> Result<TensorMap> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    container::load(path)
}

pub fn save_denoiser(path: &Path, d: &ConvDenoiser) -> Result<()> {
    let mut m = d.params.to_tensors(PARAMS);
    m.insert(
        META.into(),
        json_tensor(&Meta {
            spec: &d.spec,
            seed: d.params.seed,
        })?,
    );
    container::save(path, &m)
}

pub fn load_denoiser(path: &Path) -> Result<ConvDenoiser> {
    let m = load_container(path)?;
    let meta: Meta<ConvDenoiserSpec> = from_json_tensor(&m, path)?;
    let mut d = ConvDenoiser::new(meta.spec, meta.seed)?;
    let params = neural::ParamStore::from_tensors(&m, PARAMS, 0);
    for name in d.params.names().map(str::to_owned).collect::<Vec<_>>() {
        let (t, trainable) = params.entry(&name).ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("{} lacks parameter {name}", path.display()),
        })?;
        if t.shape() != d.params.get(&name)?.shape() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("{} parameter {name} has shape {:?}", path.display(), t.shape()),
            });
        }
        d.params.insert(&name, t.clone(), trainable);
    }
    Ok(d)
}

pub fn save_lifting(path: &Path, net: &LiftingNet) -> Result<()> {
    let mut m = net.params.to_tensors(PARAMS);
    m.insert(
        META.into(),
        json_tensor(&Meta {
            spec: &net.spec,
            seed: net.params.seed,
        })?,
    );
    container::save(path, &m)
}

pub fn load_lifting(path: &Path) -> Result<LiftingNet> {
    let m = load_container(path)?;
    let meta: Meta<LiftingSpec> = from_json_tensor(&m, path)?;
    let mut net = LiftingNet::new(meta.spec, meta.seed)?;
    let params = neural::ParamStore::from_tensors(&m, PARAMS, 0);
    for name in net.params.names().map(str::to_owned).collect::<Vec<_>>() {
        let (t, trainable) = params.entry(&name).ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("{} lacks parameter {name}", path.display()),
        })?;
        if t.shape() != net.params.get(&name)?.shape() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("{} parameter {name} has shape {:?}", path.display(), t.shape()),
            });
        }
        net.params.insert(&name, t.clone(), trainable);
    }
    Ok(net)
}

/// Whatever checkpoints a directory holds. Accessors fail with
/// [`Error::MissingCheckpoint`] for absent ones.
#[derive(Debug, Clone)]
pub struct Models {
    pub dir: PathBuf,
    pub front: Option<ConvDenoiser>,
    pub back: Option<ConvDenoiser>,
    pub lift: Option<LiftingNet>,
    pub lift_rgb: Option<LiftingNet>,
}

impl Models {
    pub fn load(dir: &Path) -> Result<Self> {
        let opt = |name: &str| -> Option<PathBuf> { Some(dir.join(name)).filter(|p| p.exists()) };
        Ok(Self {
            dir: dir.to_path_buf(),
            front: opt(FRONT_FILE).map(|p| load_denoiser(&p)).transpose()?,
            back: opt(BACK_FILE).map(|p| load_denoiser(&p)).transpose()?,
            lift: opt(LIFT_FILE).map(|p| load_lifting(&p)).transpose()?,
            lift_rgb: opt(LIFT_RGB_FILE).map(|p| load_lifting(&p)).transpose()?,
        })
    }

    pub fn save(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        if let Some(d) = &self.front {
            save_denoiser(&self.dir.join(FRONT_FILE), d)?;
        }
        if let Some(d) = &self.back {
            save_denoiser(&self.dir.join(BACK_FILE), d)?;
        }
        if let Some(n) = &self.lift {
            save_lifting(&self.dir.join(LIFT_FILE), n)?;
        }
        if let Some(n) = &self.lift_rgb {
            save_lifting(&self.dir.join(LIFT_RGB_FILE), n)?;
        }
        Ok(())
    }

    fn missing(&self, file: &str) -> Error {
        Error::MissingCheckpoint(self.dir.join(file))
    }

    pub fn front(&self) -> Result<&ConvDenoiser> {
        self.front.as_ref().ok_or_else(|| self.missing(FRONT_FILE))
    }

    pub fn back(&self) -> Result<&ConvDenoiser> {
        self.back.as_ref().ok_or_else(|| self.missing(BACK_FILE))
    }

    /// The lifting net with or without the control image.
    pub fn lift(&self, use_control: bool) -> Result<&LiftingNet> {
        if use_control {
            self.lift.as_ref().ok_or_else(|| self.missing(LIFT_FILE))
        } else {
            self.lift_rgb.as_ref().ok_or_else(|| self.missing(LIFT_RGB_FILE))
        }
    }

    /// Check that present checkpoints fit the configured image size.
    pub fn check(&self, cfg: &PipelineConfig) -> Result<()> {
        let mismatch = |what: &str| Err(Error::Config(format!("{what} checkpoint does not match the configured image size")));
        if let Some(d) = &self.front {
            if d.spec.latent != cfg.latent_shape(3) || d.spec.cond_channels != cfg.latent_shape(6)[2] {
                return mismatch("front generator");
            }
        }
        if let Some(d) = &self.back {
            if d.spec.latent != cfg.latent_shape(3) || d.spec.cond_channels != cfg.latent_shape(3)[2] {
                return mismatch("back generator");
            }
        }
        for (net, control) in [(&self.lift, true), (&self.lift_rgb, false)] {
            if let Some(n) = net {
                if n.spec.use_control != control || cfg.image_size % n.spec.stride() != 0 {
                    return mismatch("lifting");
                }
            }
        }
        Ok(())
    }
}

pub fn codec(cfg: &PipelineConfig) -> IdentityPatchCodec {
    IdentityPatchCodec {
        factor: cfg.patch_factor,
    }
}

/// Latent `[h, w, c]` of one image.
pub fn encode_image(codec: &dyn LatentCodec, img: &AttributeImage) -> Result<crate::neural::Tensor<f32>> {
    let t = crate::neural::Tensor::new(vec![1, img.height, img.width, img.channels], img.data.clone())?;
    let z = codec.encode(&t)?;
    let shape = z.shape()[1..].to_vec();
    z.reshape(&shape)
}

/// Decode one latent, clamp to `[0, 1]` and mark pixels that survive
/// 8-bit quantization as covered.
pub fn decode_image(codec: &dyn LatentCodec, z: &crate::neural::Tensor<f32>) -> Result<AttributeImage> {
    let mut shape = vec![1];
    shape.extend_from_slice(z.shape());
    let img = codec.decode(&z.clone().reshape(&shape)?)?;
    let &[_, h, w, c] = img.shape() else {
        return param_err("decoded image is not NHWC");
    };
    let data: Vec<f32> = img.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let mut out = AttributeImage::new(h, w, c);
    out.mask = data.chunks_exact(c).map(|px| px.iter().any(|&v| v >= 0.5 / 255.0)).collect();
    out.data = data;
    out.enforce_mask();
    Ok(out)
}

/// Which generator a training run targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    /// Front image given text and the control image.
    Front,
    /// Back image given text and the front image.
    Back,
}

/// Denoiser items for one view: the target image latent, the prompt
/// embedding and, when `with_condition`, the conditioning latent.
pub fn generator_items(samples: &[Sample], view: View, cfg: &PipelineConfig, with_condition: bool) -> Result<Vec<TrainItem>> {
    let codec = codec(cfg);
    samples
        .par_iter()
        .map(|s| {
            let (target, cond) = match view {
                View::Front => (&s.front, &s.control),
                View::Back => (&s.back, &s.front),
            };
            Ok(TrainItem {
                x0: encode_image(&codec, target)?,
                text: text_embedding(&s.record.prompt),
                cond: if with_condition { Some(encode_image(&codec, cond)?) } else { None },
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTraining {
    /// Text-only steps before the input layer is widened.
    pub pretrain_steps: usize,
    /// Conditioned steps on the parameters selected by the fine-tune globs.
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: DropoutConfig,
    pub seed: u64,
}

impl Default for GeneratorTraining {
    fn default() -> Self {
        Self {
            pretrain_steps: 300,
            finetune_steps: 300,
            batch_size: 8,
            lr: 2e-3,
            dropout: DropoutConfig::default(),
            seed: 0,
        }
    }
}

/// Restrict training to parameters matching `patterns`.
pub fn select_trainable(d: &mut ConvDenoiser, patterns: &[String]) -> Result<usize> {
    let pats: Vec<&str> = patterns.iter().map(String::as_str).collect();
    let n = d.store_mut().mark_trainable_glob(&pats)?;
    if n == 0 {
        return Err(Error::Config(format!("fine-tune globs {patterns:?} select no parameters")));
    }
    Ok(n)
}

/// Pretrain a text-to-image denoiser, pad its input layer for the
/// conditioning latent, then fine-tune the selected parameters with
/// conditioning dropout. Returns the network and the per-step losses.
pub fn train_generator(
    samples: &[Sample],
    view: View,
    cfg: &PipelineConfig,
    plan: &GeneratorTraining,
) -> Result<(ConvDenoiser, Vec<f64>)> {
    if samples.is_empty() {
        return param_err("generator training needs samples");
    }
    let sched = cfg.schedule()?;
    let latent = cfg.latent_shape(3);
    let cond_channels = match view {
        View::Front => cfg.latent_shape(6)[2],
        View::Back => latent[2],
    };
    let mut d = ConvDenoiser::new(
        ConvDenoiserSpec {
            latent,
            cond_channels: 0,
            width: cfg.denoiser_width,
            mid_width: cfg.denoiser_mid_width,
        },
        plan.seed,
    )?;
    let mut losses = Vec::new();
    if plan.pretrain_steps > 0 {
        let items = generator_items(samples, view, cfg, false)?;
        let tc = TrainConfig {
            steps: plan.pretrain_steps,
            batch_size: plan.batch_size,
            lr: plan.lr,
            dropout: DropoutConfig::new(plan.dropout.p_text + plan.dropout.p_both, 0.0, 0.0)?,
            seed: plan.seed,
        };
        losses.extend(train_denoiser(&mut d, &sched, &items, &tc)?);
    }
    d.pad_condition_channels(cond_channels)?;
    select_trainable(&mut d, &cfg.finetune_trainable)?;
    if plan.finetune_steps > 0 {
        let items = generator_items(samples, view, cfg, true)?;
        let tc = TrainConfig {
            steps: plan.finetune_steps,
            batch_size: plan.batch_size,
            lr: plan.lr,
            dropout: plan.dropout,
            seed: plan.seed ^ 0x5eed,
        };
        losses.extend(train_denoiser(&mut d, &sched, &items, &tc)?);
    }
    Ok((d, losses))
}

/// Supervision pools for lifting: surface samples with normals and colors
/// and labeled near-surface points, per subject.
pub fn lifting_subjects(
    samples: &[Sample],
    spec: &LiftingSpec,
    cameras: (Camera, Camera),
    pool: PointCounts,
    lo: [f64; 3],
    hi: [f64; 3],
    seed: u64,
) -> Result<Vec<TrainingSubject>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let points = sample_training_points(&s.mesh, Some(&s.colors), pool, lo, hi, &mut rng)?;
            Ok(TrainingSubject {
                input: s.lifting_input(spec, cameras),
                points,
            })
        })
        .collect()
}

/// Swap the images of prepared subjects to or from the control-image
/// variant without resampling their point pools.
pub fn with_control(subjects: &[TrainingSubject], samples: &[Sample], use_control: bool) -> Vec<TrainingSubject> {
    subjects
        .iter()
        .zip(samples)
        .map(|(t, s)| {
            let mut t = t.clone();
            t.input.control = use_control.then(|| s.control.clone());
            t
        })
        .collect()
}

/// Train a lifting net on prepared subjects.
pub fn train_lift(
    subjects: &[TrainingSubject],
    cfg: &PipelineConfig,
    use_control: bool,
    train: &LiftTrainConfig,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<(LiftingNet, Vec<LossBreakdown>)> {
    let spec = LiftingSpec {
        use_control,
        ..cfg.lifting.clone()
    };
    let mut net = LiftingNet::new(spec, train.seed)?;
    let hist = train_lifting(&mut net, subjects, train, |i, b, _| on_step(i, b))?;
    Ok((net, hist))
}
