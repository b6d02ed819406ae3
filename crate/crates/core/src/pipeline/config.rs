//! Quality presets, pipeline configuration and generation requests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::body::{PoseParams, ShapeParams, SkinnedBody};
use crate::diffusion::{GuidanceConfig, NoiseSchedule, SamplerConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::lifting::{GridConfig, LiftingSpec};
use crate::mesh::Vec3;
use crate::raster::{Camera, Projection};
use crate::rigging::AnchorMode;
use nalgebra::Matrix3;

/// DDIM step count and marching-cubes resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityPreset {
    pub ddim_steps: usize,
    pub mc_resolution: usize,
}

impl QualityPreset {
    pub const STANDARD: Self = Self {
        ddim_steps: 5,
        mc_resolution: 256,
    };
    pub const HIGH: Self = Self {
        ddim_steps: 50,
        mc_resolution: 512,
    };

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::STANDARD),
            "high" => Ok(Self::HIGH),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected standard or high"))),
        }
    }

    /// Any step count and a resolution divisible by the band block size.
    pub fn custom(ddim_steps: usize, mc_resolution: usize) -> Result<Self> {
        let p = Self {
            ddim_steps,
            mc_resolution,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ddim_steps == 0 {
            return Err(Error::Config("a preset needs at least one DDIM step".into()));
        }
        if self.mc_resolution < 8 || self.mc_resolution % 8 != 0 {
            return Err(Error::Config(format!(
                "marching-cubes resolution must be a positive multiple of 8, got {}",
                self.mc_resolution
            )));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match *self {
            Self::STANDARD => "standard",
            Self::HIGH => "high",
            _ => "custom",
        }
    }
}

impl Default for QualityPreset {
    fn default() -> Self {
        Self::STANDARD
    }
}

/// Canonical orthographic framing shared by rendering and lifting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Framing {
    /// Half of the visible world height.
    pub extent: f64,
    /// World point on the optical axis, `[x, y]`.
    pub center: [f64; 2],
    /// Fraction of the image height the rest body spans.
    pub fill: f64,
}

impl Framing {
    pub const FILL: f64 = 0.9;

    /// Fit the rest template so its height spans [`Framing::FILL`] of the image.
    pub fn canonical(body: &SkinnedBody) -> Self {
        let (lo, hi) = body.template_mesh().bounds().unwrap_or((Vec3::repeat(-1.0), Vec3::repeat(1.0)));
        Self {
            extent: (hi.y - lo.y) / (2.0 * Self::FILL),
            center: [0.0, 0.5 * (lo.y + hi.y)],
            fill: Self::FILL,
        }
    }

    /// Front camera at z = +2 and the mirrored, pixel-aligned back camera.
    pub fn cameras(&self, size: usize) -> Result<(Camera, Camera)> {
        let proj = Projection::Orthographic {
            scale: size as f64 / (2.0 * self.extent),
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
        };
        let [x, y] = self.center;
        let front = Camera::new(proj, Matrix3::identity(), Vec3::new(x, y, 2.0), size, size, false)?;
        let back = Camera::new(
            proj,
            Matrix3::from_diagonal(&Vec3::new(-1.0, 1.0, -1.0)),
            Vec3::new(x, y, -2.0),
            size,
            size,
            true,
        )?;
        Ok((front, back))
    }
}

/// Everything about the pipeline that is not a learned weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Square image side in pixels; a multiple of `4 * patch_factor`.
    pub image_size: usize,
    pub body_ring: usize,
    pub num_betas: usize,
    /// Identity-patch codec factor.
    pub patch_factor: usize,
    pub schedule_steps: usize,
    pub schedule: ScheduleKind,
    pub denoiser_width: usize,
    pub denoiser_mid_width: usize,
    pub guidance: GuidanceConfig,
    pub eta: f64,
    pub clip_x0: Option<f32>,
    /// Parameter-name globs updated when fine-tuning a generator.
    pub finetune_trainable: Vec<String>,
    pub repaint_resample: usize,
    pub lifting: LiftingSpec,
    /// Reconstruction volume `[-h, h]^3`.
    pub half_extent: f64,
    pub mc_chunk: usize,
    pub anchor: AnchorMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            body_ring: 12,
            num_betas: 8,
            patch_factor: 4,
            schedule_steps: 1000,
            schedule: ScheduleKind::Cosine,
            denoiser_width: 32,
            denoiser_mid_width: 32,
            guidance: GuidanceConfig::default(),
            eta: 0.0,
            clip_x0: Some(1.0),
            finetune_trainable: vec!["encoder.conv_*".into()],
            repaint_resample: 2,
            lifting: LiftingSpec::default(),
            half_extent: 1.0,
            mc_chunk: 32,
            anchor: AnchorMode::Surface,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        let f = self.patch_factor;
        if f == 0 || self.image_size == 0 || self.image_size % (4 * f) != 0 {
            return cfg(format!("image size {} must be a multiple of 4 x patch factor {f}", self.image_size));
        }
        if self.image_size % self.lifting.stride() != 0 {
            return cfg("image size must be divisible by the lifting encoder stride".into());
        }
        if self.schedule_steps == 0 || self.denoiser_width == 0 || self.denoiser_mid_width == 0 {
            return cfg("schedule steps and denoiser widths must be positive".into());
        }
        if !(self.eta >= 0.0) || !(self.half_extent > 0.0) || self.repaint_resample == 0 {
            return cfg("eta must be non-negative, half extent positive and resample at least 1".into());
        }
        if self.body_ring < 4 || self.num_betas == 0 {
            return cfg("body ring must be at least 4 with at least one shape coefficient".into());
        }
        GuidanceConfig::new(self.guidance.s_text, self.guidance.s_image).map_err(|e| Error::Config(e.to_string()))?;
        self.lifting.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.mc_chunk == 0 || self.mc_chunk > crate::lifting::mc::MAX_CHUNK {
            return cfg("marching-cubes chunk out of range".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule_steps, self.schedule)
    }

    /// Latent `[h, w, c]` of a `channels`-channel image.
    pub fn latent_shape(&self, channels: usize) -> [usize; 3] {
        let f = self.patch_factor;
        [self.image_size / f, self.image_size / f, f * f * channels]
    }

    pub fn sampler(&self, steps: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            steps,
            eta: self.eta,
            guidance: self.guidance,
            seed,
            clip_x0: self.clip_x0,
        }
    }

    pub fn grid(&self, resolution: usize) -> GridConfig {
        GridConfig::cube(resolution, self.half_extent)
            .with_chunk(self.mc_chunk)
            .with_default_band()
    }
}

/// Conditioning signal of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: Option<String>,
    pub pose: PoseParams,
    pub shape: ShapeParams,
    /// Feed the rendered body control image to the networks.
    pub use_control: bool,
    pub seed: u64,
    pub preset: QualityPreset,
    /// Pixel mask of the identity region kept during try-on.
    pub head_mask: Option<Vec<bool>>,
}

impl GenerationRequest {
    pub fn new(prompt: Option<&str>, pose: PoseParams, shape: ShapeParams, seed: u64) -> Self {
        Self {
            prompt: prompt.map(str::to_owned),
            pose,
            shape,
            use_control: true,
            seed,
            preset: QualityPreset::STANDARD,
            head_mask: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let has_prompt = self.prompt.as_deref().is_some_and(|p| !p.trim().is_empty());
        if !has_prompt && !self.use_control {
            return Err(Error::Config("a request needs a prompt, the body control image, or both".into()));
        }
        self.preset.validate()
    }
}

/// JSON form of a request, as read by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestFile {
    #[serde(default)]
    pub prompt: Option<String>,
    /// Axis-angle per joint; zero pose when absent.
    #[serde(default)]
    pub rotations: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub betas: Option<Vec<f64>>,
    #[serde(default = "yes")]
    pub use_control: bool,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn yes() -> bool {
    true
}

impl RequestFile {
    pub fn into_request(self, body: &SkinnedBody, seed: u64, preset: QualityPreset) -> Result<GenerationRequest> {
        let nj = body.num_joints();
        let rotations = match self.rotations {
            Some(r) => r.into_iter().map(Vec3::from).collect(),
            None => vec![Vec3::zeros(); nj],
        };
        let pose = PoseParams::new(rotations, self.translation.into())?;
        let shape = match self.betas {
            Some(b) => ShapeParams::new(b)?,
            None => ShapeParams::zero(body.num_betas),
        };
        let req = GenerationRequest {
            prompt: self.prompt,
            pose,
            shape,
            use_control: self.use_control,
            seed: self.seed.unwrap_or(seed),
            preset,
            head_mask: None,
        };
        req.validate()?;
        Ok(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{lbs_pose, make_default_body};

    #[test]
    fn presets() {
        assert_eq!(QualityPreset::named("standard").unwrap(), QualityPreset::custom(5, 256).unwrap());
        assert_eq!(QualityPreset::named("high").unwrap().mc_resolution, 512);
        assert!(QualityPreset::named("fast").is_err());
        assert!(QualityPreset::custom(0, 64).is_err());
        assert!(QualityPreset::custom(5, 100).is_err());
        assert_eq!(QualityPreset::custom(7, 64).unwrap().name(), "custom");
    }

    #[test]
    fn framing_fills_the_image_and_aligns_views() {
        let body = make_default_body(8, 4).unwrap();
        let fr = Framing::canonical(&body);
        let (front, back) = fr.cameras(64).unwrap();
        let (lo, hi) = body.template_mesh().bounds().unwrap();
        let top = front.project(&Vec3::new(0.0, hi.y, 0.0)).unwrap();
        let bottom = front.project(&Vec3::new(0.0, lo.y, 0.0)).unwrap();
        assert!(((bottom.v - top.v) / 64.0 - Framing::FILL).abs() < 1e-9);
        let m = lbs_pose(&body, &PoseParams::zero(body.num_joints()), &ShapeParams::zero(4)).unwrap();
        for v in m.vertices.iter().step_by(37) {
            let (a, b) = (front.project(v).unwrap(), back.project(v).unwrap());
            assert!((a.u - b.u).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9);
        }
        assert!(front.pixel_ignores_world_z() && back.pixel_ignores_world_z());
    }

    #[test]
    fn config_round_trips_and_validates() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: PipelineConfig = serde_json::from_str(r#"{"image_size": 32}"#).unwrap();
        assert_eq!(partial.image_size, 32);
        assert!(PipelineConfig { image_size: 30, ..c.clone() }.validate().is_err());
        assert_eq!(c.latent_shape(3), [16, 16, 48]);
    }

    #[test]
    fn request_needs_some_conditioning() {
        let body = make_default_body(8, 4).unwrap();
        let file: RequestFile = serde_json::from_str(r#"{"use_control": false}"#).unwrap();
        assert!(matches!(file.into_request(&body, 1, QualityPreset::STANDARD), Err(Error::Config(_))));
        let file: RequestFile = serde_json::from_str(r#"{"prompt": "red jacket"}"#).unwrap();
        let r = file.into_request(&body, 9, QualityPreset::STANDARD).unwrap();
        assert_eq!(r.seed, 9);
        assert!(r.use_control);
    }
}
