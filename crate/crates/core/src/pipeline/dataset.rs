//! Procedural training data: varied bodies in prompt-keyed garments,
//! rendered front/back views, control images and ground-truth meshes.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json            settings, framing, palette and every sample
//! train.json / test.json   sample ids, split by subject
//! samples/<id>/front.png   back.png
//! samples/<id>/control.aptc  f32 [H, W, 6] plus a u8 coverage mask
//! samples/<id>/mesh.obj    posed body with per-vertex garment colors
//! hashes.json              sha256 of every file above
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Framing, PipelineConfig};
use crate::body::{lbs_pose, make_default_body, BodyPart, PoseParams, ShapeParams, SkinnedBody};
use crate::container::{self, Tensor, TensorMap};
use crate::error::{param_err, Error, Result};
use crate::lifting::{LiftingInput, LiftingSpec};
use crate::mesh::{read_obj, write_obj, TriMesh, Vec3};
use crate::raster::{load_png, rasterize, render_control, save_png, AttributeImage, Camera};
use crate::rigging::PoseFrame;

pub const TEST_FRACTION: f64 = 0.2;

pub const PALETTE: [(&str, [f32; 3]); 10] = [
    ("red", [0.85, 0.12, 0.1]),
    ("blue", [0.12, 0.25, 0.85]),
    ("green", [0.1, 0.65, 0.2]),
    ("yellow", [0.95, 0.85, 0.15]),
    ("black", [0.08, 0.08, 0.08]),
    ("white", [0.95, 0.95, 0.95]),
    ("purple", [0.55, 0.15, 0.7]),
    ("orange", [0.95, 0.5, 0.1]),
    ("gray", [0.5, 0.5, 0.5]),
    ("pink", [0.95, 0.55, 0.7]),
];

pub const SKIN: [[f32; 3]; 4] = [[0.96, 0.8, 0.69], [0.87, 0.67, 0.5], [0.65, 0.45, 0.3], [0.42, 0.28, 0.18]];

const SHOES: [f32; 3] = [0.2, 0.15, 0.12];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upper {
    Shirt,
    Jacket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lower {
    Pants,
    Shorts,
}

/// Garments keyed by prompt tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outfit {
    pub upper: Upper,
    pub upper_color: usize,
    pub lower: Lower,
    pub lower_color: usize,
    pub skin: usize,
}

impl Outfit {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            upper: if rng.random_bool(0.5) { Upper::Shirt } else { Upper::Jacket },
            upper_color: rng.random_range(0..PALETTE.len()),
            lower: if rng.random_bool(0.5) { Lower::Pants } else { Lower::Shorts },
            lower_color: rng.random_range(0..PALETTE.len()),
            skin: rng.random_range(0..SKIN.len()),
        }
    }

    /// "a person in a red jacket and blue shorts"
    pub fn prompt(&self) -> String {
        let upper = match self.upper {
            Upper::Shirt => "shirt",
            Upper::Jacket => "jacket",
        };
        let lower = match self.lower {
            Lower::Pants => "pants",
            Lower::Shorts => "shorts",
        };
        format!(
            "a person in a {} {upper} and {} {lower}",
            PALETTE[self.upper_color].0, PALETTE[self.lower_color].0
        )
    }

    /// Per-vertex colors. Sleeves and legs are covered up to a fraction
    /// of the limb axis that depends on the garment.
    pub fn vertex_colors(&self, body: &SkinnedBody) -> Vec<[f32; 3]> {
        let skin = SKIN[self.skin];
        let sleeve = match self.upper {
            Upper::Shirt => 0.4,
            Upper::Jacket => 0.97,
        };
        let leg = match self.lower {
            Lower::Pants => 0.93,
            Lower::Shorts => 0.4,
        };
        body.vertex_parts
            .iter()
            .zip(&body.vertex_axial)
            .map(|(part, &t)| match part {
                BodyPart::Torso => PALETTE[self.upper_color].1,
                BodyPart::Head => skin,
                p if p.is_arm() => {
                    if t < sleeve {
                        PALETTE[self.upper_color].1
                    } else {
                        skin
                    }
                }
                _ if t >= 0.97 => SHOES,
                _ if t < leg => PALETTE[self.lower_color].1,
                _ => skin,
            })
            .collect()
    }
}

/// Random shape coefficients, each N(0, 0.8^2) clipped to [-2, 2].
pub fn random_shape<R: Rng + ?Sized>(num_betas: usize, rng: &mut R) -> Result<ShapeParams> {
    ShapeParams::new(
        (0..num_betas)
            .map(|_| (0.8 * rng.sample::<f64, _>(StandardNormal)).clamp(-2.0, 2.0))
            .collect(),
    )
}

/// Random pose: yaw of the whole body, limb swings in and out of the image
/// plane, bent elbows and knees.
pub fn random_pose<R: Rng + ?Sized>(body: &SkinnedBody, rng: &mut R) -> Result<PoseParams> {
    let mut n = |s: f64| (s * rng.sample::<f64, _>(StandardNormal)).clamp(-2.0 * s, 2.0 * s);
    let mut rot = vec![Vec3::zeros(); body.num_joints()];
    rot[0] = Vec3::new(0.0, n(0.35), 0.0);
    rot[1] = Vec3::new(n(0.12), 0.0, n(0.06));
    for (shoulder, elbow) in [(4, 5), (7, 8)] {
        rot[shoulder] = Vec3::new(n(0.45), n(0.15), n(0.25));
        rot[elbow] = Vec3::new(-n(0.5).abs(), 0.0, 0.0);
    }
    for (hip, knee) in [(10, 11), (13, 14)] {
        rot[hip] = Vec3::new(n(0.3), 0.0, n(0.08));
        rot[knee] = Vec3::new(n(0.4).abs(), 0.0, 0.0);
    }
    PoseParams::new(rot, Vec3::zeros())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub subject: usize,
    pub split: Split,
    pub prompt: String,
    pub outfit: Outfit,
    pub pose: PoseFrame,
}

impl SampleRecord {
    pub fn pose_params(&self) -> Result<PoseParams> {
        PoseParams::new(self.pose.rotations.iter().map(|&r| Vec3::from(r)).collect(), self.pose.translation.into())
    }

    pub fn shape_params(&self) -> Result<ShapeParams> {
        ShapeParams::new(self.pose.betas.clone().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub subjects: usize,
    pub image_size: usize,
    pub body_ring: usize,
    pub num_betas: usize,
    pub framing: Framing,
    pub test_fraction: f64,
    pub samples: Vec<SampleRecord>,
}

/// Everything rendered for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub record: SampleRecord,
    pub front: AttributeImage,
    pub back: AttributeImage,
    pub control: AttributeImage,
    pub mesh: TriMesh,
    pub colors: Vec<[f32; 3]>,
}

impl Sample {
    pub fn lifting_input(&self, spec: &LiftingSpec, cameras: (Camera, Camera)) -> LiftingInput {
        LiftingInput {
            front: self.front.clone(),
            back: self.back.clone(),
            control: spec.use_control.then(|| self.control.clone()),
            front_camera: cameras.0,
            back_camera: cameras.1,
        }
    }
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Render one subject: images, control image and colored mesh.
pub fn render_sample(
    body: &SkinnedBody,
    record: SampleRecord,
    cameras: (Camera, Camera),
) -> Result<Sample> {
    let pose = record.pose_params()?;
    let shape = record.shape_params()?;
    let posed = lbs_pose(body, &pose, &shape)?;
    let colors = record.outfit.vertex_colors(body);
    let flat: Vec<f32> = colors.iter().flatten().copied().collect();
    let front = rasterize(&posed.vertices, &posed.faces, &flat, 3, &cameras.0)?;
    let back = rasterize(&posed.vertices, &posed.faces, &flat, 3, &cameras.1)?;
    let control = render_control(body, &pose, &shape, &cameras.0)?;
    Ok(Sample {
        record,
        front,
        back,
        control,
        mesh: posed.to_mesh(),
        colors,
    })
}

fn control_tensors(img: &AttributeImage) -> TensorMap {
    let mut m = TensorMap::new();
    m.insert(
        "control".into(),
        Tensor::f32(vec![img.height, img.width, img.channels], img.data.clone()),
    );
    m.insert(
        "mask".into(),
        Tensor::u8(vec![img.height, img.width], img.mask.iter().map(|&b| b as u8).collect()),
    );
    m
}

fn control_from_tensors(m: &TensorMap) -> Result<AttributeImage> {
    let missing = |n: &str| Error::Format {
        offset: 0,
        msg: format!("control container lacks {n:?}"),
    };
    let c = m.get("control").ok_or_else(|| missing("control"))?;
    let mask = m.get("mask").ok_or_else(|| missing("mask"))?;
    let &[h, w, ch] = c.shape() else {
        return Err(Error::Format {
            offset: 0,
            msg: format!("control image has shape {:?}", c.shape()),
        });
    };
    let mut img = AttributeImage::new(h, w, ch);
    img.data = c.to_f32_vec();
    let mask = mask.to_f64_vec();
    if img.data.len() != h * w * ch || mask.len() != h * w {
        return param_err("control image size mismatch");
    }
    img.mask = mask.iter().map(|&m| m != 0.0).collect();
    Ok(img)
}

fn sha256_hex(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Generate `n` subjects into `dir`. The directory content is a pure
/// function of `(n, seed, cfg)`.
pub fn make_synthetic_dataset(dir: &Path, n: usize, seed: u64, cfg: &PipelineConfig) -> Result<DatasetManifest> {
    if n == 0 {
        return param_err("a dataset needs at least one subject");
    }
    cfg.validate()?;
    let body = make_default_body(cfg.body_ring, cfg.num_betas)?;
    let framing = Framing::canonical(&body);
    let cameras = framing.cameras(cfg.image_size)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut sample_rng(seed, 0));
    let n_test = if n > 1 { ((n as f64 * TEST_FRACTION).round() as usize).clamp(1, n - 1) } else { 0 };
    let mut split = vec![Split::Train; n];
    for &s in &order[..n_test] {
        split[s] = Split::Test;
    }

    let records: Vec<SampleRecord> = (0..n)
        .map(|s| {
            let mut rng = sample_rng(seed, s as u64 + 1);
            let outfit = Outfit::sample(&mut rng);
            let shape = random_shape(cfg.num_betas, &mut rng)?;
            let pose = random_pose(&body, &mut rng)?;
            Ok(SampleRecord {
                id: format!("s{s:05}"),
                subject: s,
                split: split[s],
                prompt: outfit.prompt(),
                outfit,
                pose: PoseFrame {
                    rotations: pose.rotations().iter().map(|r| [r.x, r.y, r.z]).collect(),
                    translation: pose.translation().into(),
                    betas: Some(shape.betas().to_vec()),
                },
            })
        })
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(dir.join("samples"))?;
    records.par_iter().try_for_each(|r| -> Result<()> {
        let s = render_sample(&body, r.clone(), cameras)?;
        let d = dir.join("samples").join(&r.id);
        std::fs::create_dir_all(&d)?;
        save_png(&d.join("front.png"), &s.front)?;
        save_png(&d.join("back.png"), &s.back)?;
        container::save(&d.join("control.aptc"), &control_tensors(&s.control))?;
        write_obj(&d.join("mesh.obj"), &s.mesh, Some(&s.colors))
    })?;

    let manifest = DatasetManifest {
        seed,
        subjects: n,
        image_size: cfg.image_size,
        body_ring: cfg.body_ring,
        num_betas: cfg.num_betas,
        framing,
        test_fraction: TEST_FRACTION,
        samples: records,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    for (name, which) in [("train.json", Split::Train), ("test.json", Split::Test)] {
        let ids: Vec<&str> = manifest
            .samples
            .iter()
            .filter(|r| r.split == which)
            .map(|r| r.id.as_str())
            .collect();
        write_json(&dir.join(name), &ids)?;
    }
    let mut hashes = BTreeMap::new();
    for rel in ["manifest.json", "train.json", "test.json"] {
        hashes.insert(rel.to_string(), sha256_hex(&dir.join(rel))?);
    }
    for r in &manifest.samples {
        for f in ["front.png", "back.png", "control.aptc", "mesh.obj"] {
            let rel = format!("samples/{}/{f}", r.id);
            hashes.insert(rel.clone(), sha256_hex(&dir.join(&rel))?);
        }
    }
    write_json(&dir.join("hashes.json"), &hashes)?;
    Ok(manifest)
}

/// An opened dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub body: SkinnedBody,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let body = make_default_body(manifest.body_ring, manifest.num_betas)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            body,
        })
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.manifest.samples.iter().filter(move |r| r.split == split)
    }

    pub fn cameras(&self) -> Result<(Camera, Camera)> {
        self.manifest.framing.cameras(self.manifest.image_size)
    }

    pub fn load(&self, record: &SampleRecord) -> Result<Sample> {
        let d = self.dir.join("samples").join(&record.id);
        let (mesh, colors) = read_obj(&d.join("mesh.obj"))?;
        let colors = colors.ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("{} has no vertex colors", record.id),
        })?;
        Ok(Sample {
            record: record.clone(),
            front: load_png(&d.join("front.png"))?,
            back: load_png(&d.join("back.png"))?,
            control: control_from_tensors(&container::load(&d.join("control.aptc"))?)?,
            mesh,
            colors,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        let recs: Vec<&SampleRecord> = self.records(split).collect();
        recs.par_iter().map(|r| self.load(r)).collect()
    }

    /// Recompute every file hash; returns the paths that differ.
    pub fn verify_hashes(&self) -> Result<Vec<String>> {
        let text = std::fs::read_to_string(self.dir.join("hashes.json"))?;
        let hashes: BTreeMap<String, String> = serde_json::from_str(&text)?;
        let mut bad = Vec::new();
        for (rel, h) in hashes {
            if sha256_hex(&self.dir.join(&rel)).ok().as_deref() != Some(h.as_str()) {
                bad.push(rel);
            }
        }
        Ok(bad)
    }
}

/// Largest difference between the control image's posed-position channels
/// and a fresh render of the ground-truth mesh's vertex positions, over
/// pixels both cover, and the number of pixels only one covers.
pub fn control_audit(sample: &Sample, camera: &Camera) -> Result<(f64, usize)> {
    let attrs: Vec<f32> = sample
        .mesh
        .vertices
        .iter()
        .flat_map(|v| [v.x as f32, v.y as f32, v.z as f32])
        .collect();
    let img = rasterize(&sample.mesh.vertices, &sample.mesh.faces, &attrs, 3, camera)?;
    if (img.height, img.width) != (sample.control.height, sample.control.width) {
        return param_err("control image and camera differ in size");
    }
    let mut worst = 0.0f64;
    let mut mismatched = 0;
    for p in 0..img.height * img.width {
        if img.mask[p] != sample.control.mask[p] {
            mismatched += 1;
        }
        if !(img.mask[p] && sample.control.mask[p]) {
            continue;
        }
        for c in 0..3 {
            let a = img.data[p * 3 + c] as f64;
            let b = sample.control.data[p * 6 + 3 + c] as f64;
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst, mismatched))
}
