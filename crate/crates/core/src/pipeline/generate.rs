//! Ancestral sampling of front view, back view and surface, plus the
//! image-only and try-on entry points.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Framing, GenerationRequest, PipelineConfig, QualityPreset};
use super::models::{codec, decode_image, encode_image, Models};
use crate::body::{make_default_body, PoseParams, ShapeParams, SkinnedBody};
use crate::diffusion::sampler::Conditioning;
use crate::diffusion::{ddim_sample, repaint_sample, text_embedding, IdentityPatchCodec, NoiseSchedule};
use crate::error::{param_err, Error, Result};
use crate::lifting::{build_field, marching_cubes, ExtractedMesh, LiftingInput};
use crate::mesh::{write_obj, write_ply};
use crate::neural::Tensor;
use crate::raster::{render_control, save_png, AttributeImage, Camera};
use crate::rigging::{anchor_to_body, AnchoredScan};

/// Results of one generation. `flagged` explains why the output should
/// not be trusted.
#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub front: AttributeImage,
    pub back: AttributeImage,
    pub control: Option<AttributeImage>,
    pub extracted: ExtractedMesh,
    pub anchored: Option<AnchoredScan>,
    pub flagged: Option<String>,
}

/// Summary written next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub seed: u64,
    pub prompt: Option<String>,
    pub preset: String,
    pub ddim_steps: usize,
    pub mc_resolution: usize,
    pub vertices: usize,
    pub faces: usize,
    pub watertight: bool,
    pub anchored: bool,
    pub flagged: Option<String>,
}

/// Decode the single item of a sampled batch.
fn decode_one(codec: &IdentityPatchCodec, z: Tensor<f32>) -> Result<AttributeImage> {
    let shape = z.shape()[1..].to_vec();
    decode_image(codec, &z.reshape(&shape)?)
}

fn back_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Loaded models plus everything derived from the configuration.
pub struct Pipeline<'a> {
    pub cfg: &'a PipelineConfig,
    pub models: &'a Models,
    pub body: SkinnedBody,
    pub framing: Framing,
    pub cameras: (Camera, Camera),
    sched: NoiseSchedule,
    codec: IdentityPatchCodec,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a PipelineConfig, models: &'a Models) -> Result<Self> {
        cfg.validate()?;
        models.check(cfg)?;
        let body = make_default_body(cfg.body_ring, cfg.num_betas)?;
        let framing = Framing::canonical(&body);
        Ok(Self {
            cameras: framing.cameras(cfg.image_size)?,
            framing,
            body,
            sched: cfg.schedule()?,
            codec: codec(cfg),
            cfg,
            models,
        })
    }

    pub fn control_image(&self, pose: &PoseParams, shape: &ShapeParams) -> Result<AttributeImage> {
        render_control(&self.body, pose, shape, &self.cameras.0)
    }

    fn check_image(&self, img: &AttributeImage, what: &str) -> Result<()> {
        let s = self.cfg.image_size;
        if img.height != s || img.width != s || img.channels != 3 {
            return Err(Error::Image(format!(
                "{what} is {}x{}x{}, expected {s}x{s}x3",
                img.height, img.width, img.channels
            )));
        }
        Ok(())
    }

    /// Sample a back view given a front view.
    pub fn sample_back(&self, front: &AttributeImage, prompt: Option<&str>, steps: usize, seed: u64) -> Result<AttributeImage> {
        let cond = Conditioning {
            text: prompt.and_then(text_embedding),
            cond: Some(encode_image(&self.codec, front)?),
        };
        let z = ddim_sample(self.models.back()?, &self.sched, &self.cfg.sampler(steps, back_seed(seed)), 1, &cond, None)?;
        decode_one(&self.codec, z)
    }

    /// Extract the surface implied by a pair of views and, optionally, the
    /// control image.
    pub fn lift(
        &self,
        front: &AttributeImage,
        back: &AttributeImage,
        control: Option<&AttributeImage>,
        resolution: usize,
    ) -> Result<ExtractedMesh> {
        let net = self.models.lift(control.is_some())?;
        let input = LiftingInput {
            front: front.clone(),
            back: back.clone(),
            control: control.cloned(),
            front_camera: self.cameras.0,
            back_camera: self.cameras.1,
        };
        let field = build_field(&input, net)?;
        marching_cubes(&field, &self.cfg.grid(resolution))
    }

    /// Everything after the front view: back view, surface and anchoring.
    fn finish(&self, req: &GenerationRequest, front: AttributeImage) -> Result<GenerationOutput> {
        let control = self.control_image(&req.pose, &req.shape)?;
        let back = self.sample_back(&front, req.prompt.as_deref(), req.preset.ddim_steps, req.seed)?;
        let extracted = self.lift(
            &front,
            &back,
            req.use_control.then_some(&control),
            req.preset.mc_resolution,
        )?;
        let (anchored, flagged) = if extracted.empty {
            (None, Some("marching cubes found no surface".to_string()))
        } else {
            let a = anchor_to_body(
                &extracted.mesh,
                Some(&extracted.colors),
                &self.body,
                &req.pose,
                &req.shape,
                self.cfg.anchor,
            )?;
            (Some(a), None)
        };
        Ok(GenerationOutput {
            front,
            back,
            control: req.use_control.then_some(control),
            extracted,
            anchored,
            flagged,
        })
    }

    fn front_conditioning(&self, req: &GenerationRequest) -> Result<Conditioning> {
        Ok(Conditioning {
            text: req.prompt.as_deref().and_then(text_embedding),
            cond: if req.use_control {
                Some(encode_image(&self.codec, &self.control_image(&req.pose, &req.shape)?)?)
            } else {
                None
            },
        })
    }

    /// Front view from the conditioning, back view from the front view,
    /// then the surface from both views and the control image.
    pub fn cascade_generate(&self, req: &GenerationRequest) -> Result<GenerationOutput> {
        req.validate()?;
        let cond = self.front_conditioning(req)?;
        let z = ddim_sample(
            self.models.front()?,
            &self.sched,
            &self.cfg.sampler(req.preset.ddim_steps, req.seed),
            1,
            &cond,
            None,
        )?;
        let front = decode_one(&self.codec, z)?;
        self.finish(req, front)
    }

    /// Surface from a single front image: sample a back view, then lift
    /// without the control image. An input with no covered pixel is
    /// processed but flagged.
    pub fn reconstruct(
        &self,
        front: &AttributeImage,
        prompt: Option<&str>,
        preset: QualityPreset,
        seed: u64,
    ) -> Result<GenerationOutput> {
        self.check_image(front, "input image")?;
        preset.validate()?;
        let back = self.sample_back(front, prompt, preset.ddim_steps, seed)?;
        let extracted = self.lift(front, &back, None, preset.mc_resolution)?;
        let flagged = if front.coverage() == 0 {
            Some("input image has no covered pixels".to_string())
        } else if extracted.empty {
            Some("marching cubes found no surface".to_string())
        } else {
            None
        };
        Ok(GenerationOutput {
            front: front.clone(),
            back,
            control: None,
            extracted,
            anchored: None,
            flagged,
        })
    }

    /// Keep the masked pixels of `source` and generate the rest for the
    /// request's prompt and body; everything downstream matches
    /// [`Pipeline::cascade_generate`]. An empty mask is a plain generation.
    pub fn tryon_edit(&self, source: &AttributeImage, head_mask: &[bool], req: &GenerationRequest) -> Result<GenerationOutput> {
        req.validate()?;
        self.check_image(source, "source image")?;
        if head_mask.len() != source.height * source.width {
            return param_err(format!(
                "mask has {} entries for a {}x{} image",
                head_mask.len(),
                source.height,
                source.width
            ));
        }
        if !head_mask.iter().any(|&m| m) {
            return self.cascade_generate(req);
        }
        let mut mask_img = AttributeImage::new(source.height, source.width, 3);
        for (px, &m) in mask_img.data.chunks_exact_mut(3).zip(head_mask) {
            px.fill(if m { 1.0 } else { 0.0 });
        }
        let known_mask: Vec<bool> = encode_image(&self.codec, &mask_img)?.data().iter().map(|&v| v > 0.5).collect();
        let known = encode_image(&self.codec, source)?;
        let mut shape = vec![1];
        shape.extend_from_slice(known.shape());
        let known = known.reshape(&shape)?;
        let cond = self.front_conditioning(req)?;
        let z = repaint_sample(
            self.models.front()?,
            &self.sched,
            &self.cfg.sampler(req.preset.ddim_steps, req.seed),
            &known,
            &known_mask,
            self.cfg.repaint_resample,
            &cond,
        )?;
        let front = decode_one(&self.codec, z)?;
        self.finish(req, front)
    }
}

impl GenerationOutput {
    pub fn report(&self, seed: u64, prompt: Option<&str>, preset: QualityPreset) -> GenerationReport {
        GenerationReport {
            seed,
            prompt: prompt.map(str::to_owned),
            preset: preset.name().into(),
            ddim_steps: preset.ddim_steps,
            mc_resolution: preset.mc_resolution,
            vertices: self.extracted.mesh.vertices.len(),
            faces: self.extracted.mesh.faces.len(),
            watertight: self.extracted.mesh.is_watertight(),
            anchored: self.anchored.is_some(),
            flagged: self.flagged.clone(),
        }
    }

    /// Write `front.png`, `back.png`, `mesh.obj`, `mesh.ply`, the anchored
    /// scan (`rig.aptc`) when present and `report.json`.
    pub fn write(&self, dir: &Path, report: &GenerationReport) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_png(&dir.join("front.png"), &self.front)?;
        save_png(&dir.join("back.png"), &self.back)?;
        let m = &self.extracted;
        write_obj(&dir.join("mesh.obj"), &m.mesh, Some(&m.colors))?;
        write_ply(&dir.join("mesh.ply"), &m.mesh, Some(&m.normals), Some(&m.colors))?;
        if let Some(a) = &self.anchored {
            crate::container::save(&dir.join("rig.aptc"), &a.to_tensors(""))?;
        }
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;
        Ok(())
    }
}
