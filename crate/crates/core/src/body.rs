//! Procedural skinned humanoid: shape blend-shapes, forward kinematics and
//! linear blend skinning, plus the 6-channel per-vertex control attributes
//! (canonical template coordinates followed by posed positions).
//!
//! Coordinates are meters, y up, the body faces +z and its left side is +x.

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion};

use crate::container::{Tensor as CTensor, TensorMap};
use crate::error::{param_err, Error, Result};
use crate::mesh::{TriMesh, Vec3};

pub const NUM_JOINTS: usize = 16;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "spine",
    "chest",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
];

/// Body segment a vertex belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum BodyPart {
    Torso = 0,
    Head = 1,
    LeftArm = 2,
    RightArm = 3,
    LeftLeg = 4,
    RightLeg = 5,
}

impl BodyPart {
    pub fn from_u8(v: u8) -> Option<Self> {
        use BodyPart::*;
        [Torso, Head, LeftArm, RightArm, LeftLeg, RightLeg]
            .get(v as usize)
            .copied()
    }

    pub fn is_arm(self) -> bool {
        matches!(self, BodyPart::LeftArm | BodyPart::RightArm)
    }

    pub fn is_leg(self) -> bool {
        matches!(self, BodyPart::LeftLeg | BodyPart::RightLeg)
    }
}

/// Parametric template with skeleton, skinning weights and shape basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinnedBody {
    pub template_vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Rest joint positions.
    pub joints: Vec<Vec3>,
    /// Parent of each joint; `None` only for the root (index 0).
    pub parents: Vec<Option<usize>>,
    /// Row-major V x J.
    pub skin_weights: Vec<f64>,
    /// Row-major V x 3 x d_beta.
    pub shape_dirs: Vec<f64>,
    pub num_betas: usize,
    pub template_coords: Vec<Vec3>,
    pub vertex_parts: Vec<BodyPart>,
    /// Normalized position of each vertex along its segment axis, in [0, 1].
    pub vertex_axial: Vec<f64>,
}

/// Per-joint axis-angle rotations and a root translation.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    rotations: Vec<Vec3>,
    translation: Vec3,
}

impl PoseParams {
    pub fn new(rotations: Vec<Vec3>, translation: Vec3) -> Result<Self> {
        for (j, r) in rotations.iter().enumerate() {
            if !r.iter().all(|x| x.is_finite()) {
                return param_err(format!("joint {j} rotation is not finite"));
            }
            if r.norm() >= std::f64::consts::PI {
                return param_err(format!(
                    "joint {j} axis-angle magnitude {} must be below pi",
                    r.norm()
                ));
            }
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return param_err("translation is not finite");
        }
        Ok(Self {
            rotations,
            translation,
        })
    }

    pub fn zero(num_joints: usize) -> Self {
        Self {
            rotations: vec![Vec3::zeros(); num_joints],
            translation: Vec3::zeros(),
        }
    }

    pub fn rotations(&self) -> &[Vec3] {
        &self.rotations
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    /// Replace one joint rotation, re-validating it.
    pub fn with_rotation(mut self, joint: usize, aa: Vec3) -> Result<Self> {
        if joint >= self.rotations.len() {
            return param_err(format!("joint {joint} out of range"));
        }
        self.rotations[joint] = aa;
        Self::new(self.rotations, self.translation)
    }

    pub fn with_translation(self, t: Vec3) -> Result<Self> {
        Self::new(self.rotations, t)
    }

    /// Pose whose result is this pose followed by the rigid motion `g`
    /// applied to the whole body (root rotation and translation adjusted).
    pub fn rigidly_moved(&self, body: &SkinnedBody, g: &Isometry3<f64>) -> Result<Self> {
        let r0 = Rotation3::new(self.rotations[0]);
        let r = g.rotation.to_rotation_matrix() * r0;
        let j0 = body.joints[0];
        let t = g.rotation * (j0 + self.translation) + g.translation.vector - j0;
        let mut rot = self.rotations.clone();
        rot[0] = r.scaled_axis();
        Self::new(rot, t)
    }
}

/// Shape coefficients, clamped to [-5, 5].
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams {
    betas: Vec<f64>,
}

pub const BETA_LIMIT: f64 = 5.0;

impl ShapeParams {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.iter().any(|b| !b.is_finite()) {
            return param_err("shape coefficients must be finite");
        }
        Ok(Self {
            betas: betas
                .into_iter()
                .map(|b| b.clamp(-BETA_LIMIT, BETA_LIMIT))
                .collect(),
        })
    }

    pub fn zero(n: usize) -> Self {
        Self { betas: vec![0.0; n] }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

/// A posed body mesh with its control attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Canonical template coordinates (attribute channels 0-2).
    pub template_coords: Vec<Vec3>,
}

impl PosedMesh {
    /// Per-vertex (template xyz, posed xyz).
    pub fn control_attributes(&self) -> Vec<[f32; 6]> {
        self.template_coords
            .iter()
            .zip(&self.vertices)
            .map(|(t, p)| {
                [
                    t.x as f32, t.y as f32, t.z as f32, p.x as f32, p.y as f32, p.z as f32,
                ]
            })
            .collect()
    }

    pub fn to_mesh(&self) -> TriMesh {
        TriMesh {
            vertices: self.vertices.clone(),
            faces: self.faces.clone(),
        }
    }
}

/// Affine map x -> a * x + b; the skinning transform of one joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub a: Matrix3<f64>,
    pub b: Vec3,
}

impl Affine {
    #[inline]
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.a * x + self.b
    }
}

impl SkinnedBody {
    pub fn num_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn weight_row(&self, v: usize) -> &[f64] {
        let j = self.num_joints();
        &self.skin_weights[v * j..(v + 1) * j]
    }

    pub fn template_mesh(&self) -> TriMesh {
        TriMesh {
            vertices: self.template_vertices.clone(),
            faces: self.faces.clone(),
        }
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let v = self.num_vertices();
        let j = self.num_joints();
        if j < 2 {
            return param_err("body needs at least 2 joints");
        }
        if self.num_betas < 1 {
            return param_err("body needs at least 1 shape coefficient");
        }
        if self.parents.len() != j || self.parents[0].is_some() {
            return param_err("joint 0 must be the unique root");
        }
        for (k, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < k => {}
                _ => return param_err(format!("joint {k} parent must precede it")),
            }
        }
        if self.skin_weights.len() != v * j
            || self.shape_dirs.len() != v * 3 * self.num_betas
            || self.template_coords.len() != v
            || self.vertex_parts.len() != v
            || self.vertex_axial.len() != v
        {
            return param_err("per-vertex table sizes disagree with vertex count");
        }
        for k in 0..v {
            let row = self.weight_row(k);
            let s: f64 = row.iter().sum();
            if row.iter().any(|w| *w < 0.0) || (s - 1.0).abs() > 1e-6 {
                return param_err(format!("skin weight row {k} is not on the simplex"));
            }
        }
        if self.faces.iter().flatten().any(|&i| i as usize >= v) {
            return param_err("face index out of range");
        }
        Ok(())
    }

    fn check_pose(&self, pose: &PoseParams) -> Result<()> {
        if pose.rotations.len() != self.num_joints() {
            return param_err(format!(
                "pose has {} joint rotations, body has {} joints",
                pose.rotations.len(),
                self.num_joints()
            ));
        }
        Ok(())
    }

    fn check_shape(&self, shape: &ShapeParams) -> Result<()> {
        if shape.betas.len() != self.num_betas {
            return param_err(format!(
                "shape has {} coefficients, body expects {}",
                shape.betas.len(),
                self.num_betas
            ));
        }
        Ok(())
    }

    /// Skinning transforms: posed = A_j x + b_j for a rest-pose point x.
    /// Identity pose yields A = I and b = 0 exactly.
    pub fn skinning_transforms(&self, pose: &PoseParams) -> Result<Vec<Affine>> {
        self.check_pose(pose)?;
        let mut out: Vec<Affine> = Vec::with_capacity(self.num_joints());
        for (k, aa) in pose.rotations.iter().enumerate() {
            let r = *Rotation3::new(*aa).matrix();
            let jk = self.joints[k];
            let t = match self.parents[k] {
                None => Affine {
                    a: r,
                    b: (jk - r * jk) + pose.translation,
                },
                Some(p) => {
                    let par = out[p];
                    Affine {
                        a: par.a * r,
                        b: par.a * (jk - r * jk) + par.b,
                    }
                }
            };
            out.push(t);
        }
        Ok(out)
    }

    /// Shaped rest-pose vertices: template + shape_dirs * beta.
    pub fn shaped_vertices(&self, shape: &ShapeParams) -> Result<Vec<Vec3>> {
        self.check_shape(shape)?;
        let d = self.num_betas;
        Ok(self
            .template_vertices
            .iter()
            .enumerate()
            .map(|(v, t)| {
                let mut off = Vec3::zeros();
                for (c, o) in off.iter_mut().enumerate() {
                    let base = (v * 3 + c) * d;
                    *o = self.shape_dirs[base..base + d]
                        .iter()
                        .zip(&shape.betas)
                        .map(|(s, b)| s * b)
                        .sum();
                }
                t + off
            })
            .collect())
    }

    pub fn to_tensors(&self, prefix: &str) -> TensorMap {
        let v = self.num_vertices();
        let flat = |pts: &[Vec3]| pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<f64>>();
        let mut m = TensorMap::new();
        let mut put = |name: &str, t: CTensor| {
            m.insert(format!("{prefix}{name}"), t);
        };
        put("template_vertices", CTensor::f64(vec![v, 3], flat(&self.template_vertices)));
        put(
            "faces",
            CTensor::f64(
                vec![self.faces.len(), 3],
                self.faces.iter().flatten().map(|&i| i as f64).collect(),
            ),
        );
        put("joints", CTensor::f64(vec![self.num_joints(), 3], flat(&self.joints)));
        put(
            "parents",
            CTensor::f64(
                vec![self.num_joints()],
                self.parents
                    .iter()
                    .map(|p| p.map_or(-1.0, |p| p as f64))
                    .collect(),
            ),
        );
        put(
            "skin_weights",
            CTensor::f64(vec![v, self.num_joints()], self.skin_weights.clone()),
        );
        put(
            "shape_dirs",
            CTensor::f64(vec![v, 3, self.num_betas], self.shape_dirs.clone()),
        );
        put("template_coords", CTensor::f64(vec![v, 3], flat(&self.template_coords)));
        put(
            "vertex_parts",
            CTensor::u8(vec![v], self.vertex_parts.iter().map(|p| *p as u8).collect()),
        );
        put("vertex_axial", CTensor::f64(vec![v], self.vertex_axial.clone()));
        m
    }

    pub fn from_tensors(m: &TensorMap, prefix: &str) -> Result<Self> {
        let get = |name: &str| -> Result<&CTensor> {
            m.get(&format!("{prefix}{name}"))
                .ok_or_else(|| Error::Param(format!("missing tensor {prefix}{name}")))
        };
        let pts = |t: &CTensor| -> Result<Vec<Vec3>> {
            let d = t.to_f64_vec();
            if d.len() % 3 != 0 {
                return param_err("point tensor length not divisible by 3");
            }
            Ok(d.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
        };
        let template_vertices = pts(get("template_vertices")?)?;
        let faces = get("faces")?
            .to_f64_vec()
            .chunks_exact(3)
            .map(|c| [c[0] as u32, c[1] as u32, c[2] as u32])
            .collect();
        let joints = pts(get("joints")?)?;
        let parents = get("parents")?
            .to_f64_vec()
            .into_iter()
            .map(|p| (p >= 0.0).then_some(p as usize))
            .collect();
        let sd = get("shape_dirs")?;
        let num_betas = *sd.shape().last().unwrap_or(&0);
        let vertex_parts = get("vertex_parts")?
            .to_f64_vec()
            .into_iter()
            .map(|p| BodyPart::from_u8(p as u8).ok_or_else(|| Error::Param("bad part id".into())))
            .collect::<Result<_>>()?;
        let body = SkinnedBody {
            template_vertices,
            faces,
            joints,
            parents,
            skin_weights: get("skin_weights")?.to_f64_vec(),
            shape_dirs: sd.to_f64_vec(),
            num_betas,
            template_coords: pts(get("template_coords")?)?,
            vertex_parts,
            vertex_axial: get("vertex_axial")?.to_f64_vec(),
        };
        body.validate()?;
        Ok(body)
    }
}

/// World-from-joint rigid transforms.
pub fn forward_kinematics(body: &SkinnedBody, pose: &PoseParams) -> Result<Vec<Isometry3<f64>>> {
    let skin = body.skinning_transforms(pose)?;
    Ok(skin
        .iter()
        .zip(&body.joints)
        .map(|(s, j)| {
            let rot = UnitQuaternion::from_matrix(&s.a);
            Isometry3::from_parts(Translation3::from(s.apply(j)), rot)
        })
        .collect())
}

/// Pose and shape the body with linear blend skinning.
pub fn lbs_pose(body: &SkinnedBody, pose: &PoseParams, shape: &ShapeParams) -> Result<PosedMesh> {
    let shaped = body.shaped_vertices(shape)?;
    let skin = body.skinning_transforms(pose)?;
    let nj = body.num_joints();
    let vertices = shaped
        .iter()
        .enumerate()
        .map(|(v, x)| {
            // x + sum_j w_j (G_j(x) - x): exact identity under the rest pose
            let w = &body.skin_weights[v * nj..(v + 1) * nj];
            let mut disp = Vec3::zeros();
            for (wj, g) in w.iter().zip(&skin) {
                if *wj != 0.0 {
                    disp += *wj * (g.apply(x) - x);
                }
            }
            x + disp
        })
        .collect();
    Ok(PosedMesh {
        vertices,
        faces: body.faces.clone(),
        template_coords: body.template_coords.clone(),
    })
}

struct Segment {
    part: BodyPart,
    start: Vec3,
    end: Vec3,
    r_start: f64,
    r_end: f64,
    /// Scale of the cross-section along world z.
    depth_scale: f64,
    /// Cap height relative to radius.
    cap_scale: f64,
    chain: Vec<usize>,
}

fn rest_joints() -> Vec<Vec3> {
    let arm = |side: f64| {
        let d = Vec3::new(side * 40f64.to_radians().sin(), -40f64.to_radians().cos(), 0.0);
        let s = Vec3::new(side * 0.17, 0.42, 0.0);
        [s, s + d * 0.27, s + d * 0.52]
    };
    let leg = |side: f64| {
        let d = Vec3::new(side * 5f64.to_radians().sin(), -5f64.to_radians().cos(), 0.0);
        let h = Vec3::new(side * 0.09, -0.08, 0.0);
        [h, h + d * 0.40, h + d * 0.78]
    };
    let (la, ra, ll, rl) = (arm(1.0), arm(-1.0), leg(1.0), leg(-1.0));
    vec![
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(0.0, 0.2, 0.0),
        Vec3::new(0.0, 0.4, 0.0),
        Vec3::new(0.0, 0.5, 0.0),
        la[0],
        la[1],
        la[2],
        ra[0],
        ra[1],
        ra[2],
        ll[0],
        ll[1],
        ll[2],
        rl[0],
        rl[1],
        rl[2],
    ]
}

const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(2),
    Some(4),
    Some(5),
    Some(2),
    Some(7),
    Some(8),
    Some(0),
    Some(10),
    Some(11),
    Some(0),
    Some(13),
    Some(14),
];

fn segments(joints: &[Vec3]) -> Vec<Segment> {
    let limb = |part, chain: [usize; 3], tip: f64, r0, r1| {
        let (a, c) = (joints[chain[0]], joints[chain[2]]);
        let dir = (c - a).normalize();
        Segment {
            part,
            start: a,
            end: c + dir * tip,
            r_start: r0,
            r_end: r1,
            depth_scale: 1.0,
            cap_scale: 1.0,
            chain: chain.to_vec(),
        }
    };
    vec![
        Segment {
            part: BodyPart::Torso,
            start: Vec3::new(0.0, -0.05, 0.0),
            end: Vec3::new(0.0, 0.38, 0.0),
            r_start: 0.15,
            r_end: 0.15,
            depth_scale: 0.65,
            cap_scale: 0.8,
            chain: vec![0, 1, 2],
        },
        Segment {
            part: BodyPart::Head,
            start: Vec3::new(0.0, 0.57, 0.0),
            end: Vec3::new(0.0, 0.70, 0.0),
            r_start: 0.09,
            r_end: 0.09,
            depth_scale: 1.0,
            cap_scale: 1.0,
            chain: vec![3],
        },
        limb(BodyPart::LeftArm, [4, 5, 6], 0.08, 0.048, 0.035),
        limb(BodyPart::RightArm, [7, 8, 9], 0.08, 0.048, 0.035),
        limb(BodyPart::LeftLeg, [10, 11, 12], 0.05, 0.075, 0.045),
        limb(BodyPart::RightLeg, [13, 14, 15], 0.05, 0.075, 0.045),
    ]
}

const BLEND_HALF_WIDTH: f64 = 0.04;

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Build the deterministic capsule-limb humanoid: 16 joints, `ring`
/// vertices per cross-section ring, `num_betas` shape directions.
pub fn make_default_body(ring: usize, num_betas: usize) -> Result<SkinnedBody> {
    if ring < 4 {
        return param_err("ring resolution must be at least 4");
    }
    if num_betas < 1 {
        return param_err("need at least one shape coefficient");
    }
    let joints = rest_joints();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut parts = Vec::new();
    let mut axial = Vec::new();
    let mut radial: Vec<Vec3> = Vec::new();

    for seg in segments(&joints) {
        let axis = seg.end - seg.start;
        let len = axis.norm();
        let d = axis / len;
        let helper = if d.x.abs() < 0.9 { Vec3::x() } else { Vec3::z() };
        let u = (helper - d * helper.dot(&d)).normalize();
        let w = d.cross(&u);
        let n_cap = (ring / 4).max(2);
        let n_body = ((len / 0.025).ceil() as usize).max(1);
        // rings: (center, radius) plus poles
        let mut rings: Vec<(Vec3, f64)> = Vec::new();
        for i in 1..n_cap {
            let phi = std::f64::consts::FRAC_PI_2 * (n_cap - i) as f64 / n_cap as f64;
            rings.push((
                seg.start - d * (seg.cap_scale * seg.r_start * phi.sin()),
                seg.r_start * phi.cos(),
            ));
        }
        for i in 0..=n_body {
            let t = i as f64 / n_body as f64;
            rings.push((seg.start + axis * t, seg.r_start + (seg.r_end - seg.r_start) * t));
        }
        for i in 1..n_cap {
            let phi = std::f64::consts::FRAC_PI_2 * i as f64 / n_cap as f64;
            rings.push((
                seg.end + d * (seg.cap_scale * seg.r_end * phi.sin()),
                seg.r_end * phi.cos(),
            ));
        }
        let base = vertices.len() as u32;
        let mut local: Vec<(Vec3, Vec3)> = Vec::new(); // (position, radial direction)
        local.push((seg.start - d * (seg.cap_scale * seg.r_start), -d));
        for (c, r) in &rings {
            for k in 0..ring {
                let th = 2.0 * std::f64::consts::PI * k as f64 / ring as f64;
                let dir = u * th.cos() + w * th.sin();
                let mut off = dir * *r;
                off.z *= seg.depth_scale;
                local.push((c + off, dir));
            }
        }
        local.push((seg.end + d * (seg.cap_scale * seg.r_end), d));
        let south = base;
        let north = base + local.len() as u32 - 1;
        let idx = |ri: usize, k: usize| base + 1 + (ri * ring + k % ring) as u32;
        let mut seg_faces = Vec::new();
        for k in 0..ring {
            seg_faces.push([south, idx(0, k + 1), idx(0, k)]);
        }
        for ri in 0..rings.len() - 1 {
            for k in 0..ring {
                let (a, b) = (idx(ri, k), idx(ri, k + 1));
                let (c, e) = (idx(ri + 1, k), idx(ri + 1, k + 1));
                seg_faces.push([a, b, e]);
                seg_faces.push([a, e, c]);
            }
        }
        let last = rings.len() - 1;
        for k in 0..ring {
            seg_faces.push([north, idx(last, k), idx(last, k + 1)]);
        }
        // orient outward: positive signed volume
        let vol: f64 = seg_faces
            .iter()
            .map(|f| {
                let p = |i: u32| local[(i - base) as usize].0;
                p(f[0]).dot(&p(f[1]).cross(&p(f[2])))
            })
            .sum();
        if vol < 0.0 {
            for f in &mut seg_faces {
                f.swap(1, 2);
            }
        }
        faces.extend(seg_faces);

        let chain_s: Vec<f64> = seg
            .chain
            .iter()
            .map(|&j| (joints[j] - seg.start).dot(&d))
            .collect();
        for (p, dir) in local {
            let s = (p - seg.start).dot(&d);
            let mut row = vec![0.0; NUM_JOINTS];
            let mut seg_idx = 0;
            while seg_idx + 1 < chain_s.len() && s >= chain_s[seg_idx + 1] {
                seg_idx += 1;
            }
            // blend toward the neighbour joint closest to s
            let (mut j0, mut j1, mut t) = (seg.chain[seg_idx], seg.chain[seg_idx], 0.0);
            if seg_idx + 1 < chain_s.len() && s > chain_s[seg_idx + 1] - BLEND_HALF_WIDTH {
                j1 = seg.chain[seg_idx + 1];
                t = smoothstep((s - (chain_s[seg_idx + 1] - BLEND_HALF_WIDTH)) / (2.0 * BLEND_HALF_WIDTH));
            } else if seg_idx > 0 && s < chain_s[seg_idx] + BLEND_HALF_WIDTH {
                j0 = seg.chain[seg_idx - 1];
                j1 = seg.chain[seg_idx];
                t = smoothstep((s - (chain_s[seg_idx] - BLEND_HALF_WIDTH)) / (2.0 * BLEND_HALF_WIDTH));
            }
            row[j0] += 1.0 - t;
            row[j1] += t;
            weights.extend(row);
            vertices.push(p);
            parts.push(seg.part);
            axial.push((s / len).clamp(0.0, 1.0));
            radial.push(dir);
        }
    }

    let nv = vertices.len();
    let mut shape_dirs = vec![0.0; nv * 3 * num_betas];
    for v in 0..nv {
        let part = parts[v];
        let r = radial[v];
        for i in 0..num_betas {
            let dir = match i {
                0 => (vertices[v] - joints[0]) * 0.02,
                1 if part != BodyPart::Head => r * 0.012,
                2 if part == BodyPart::Torso => r * 0.02,
                3 if part == BodyPart::Torso => Vec3::z() * (0.02 * r.z.max(0.0)),
                4 if part.is_arm() => r * 0.01,
                5 if part.is_leg() => r * 0.015,
                6 if part == BodyPart::Head => r * 0.015,
                7 if part.is_arm() || part.is_leg() => {
                    Vec3::x() * (0.015 * vertices[v].x.signum())
                }
                k if k >= 8 => r * (0.008 * ((k - 7) as f64 * axial[v] * std::f64::consts::PI).sin()),
                _ => Vec3::zeros(),
            };
            for c in 0..3 {
                shape_dirs[(v * 3 + c) * num_betas + i] = dir[c];
            }
        }
    }

    let body = SkinnedBody {
        template_coords: vertices.clone(),
        template_vertices: vertices,
        faces,
        joints,
        parents: PARENTS.to_vec(),
        skin_weights: weights,
        shape_dirs,
        num_betas,
        vertex_parts: parts,
        vertex_axial: axial,
    };
    body.validate()?;
    Ok(body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain_body() -> SkinnedBody {
        SkinnedBody {
            template_vertices: vec![Vec3::new(0.0, 0.5, 0.0)],
            faces: vec![],
            joints: vec![Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0)],
            parents: vec![None, Some(0)],
            skin_weights: vec![0.5, 0.5],
            shape_dirs: vec![0.0; 3],
            num_betas: 1,
            template_coords: vec![Vec3::new(0.0, 0.5, 0.0)],
            vertex_parts: vec![BodyPart::Torso],
            vertex_axial: vec![0.0],
        }
    }

    #[test]
    fn fk_zero_pose_is_pure_translation() {
        let body = make_default_body(8, 2).unwrap();
        let t = forward_kinematics(&body, &PoseParams::zero(NUM_JOINTS)).unwrap();
        for (tj, j) in t.iter().zip(&body.joints) {
            assert_eq!(tj.translation.vector, *j);
            assert_eq!(tj.rotation.angle(), 0.0);
        }
    }

    #[test]
    fn fk_child_of_rotated_root() {
        let body = chain_body();
        let pose = PoseParams::zero(2)
            .with_rotation(0, Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2))
            .unwrap();
        let t = forward_kinematics(&body, &pose).unwrap();
        assert!((t[1].translation.vector - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn fk_translation_shifts_every_joint() {
        let body = make_default_body(8, 2).unwrap();
        let pose = PoseParams::zero(NUM_JOINTS)
            .with_translation(Vec3::new(1.0, 2.0, 3.0))
            .unwrap();
        let t = forward_kinematics(&body, &pose).unwrap();
        for (tj, j) in t.iter().zip(&body.joints) {
            assert!((tj.translation.vector - j - Vec3::new(1.0, 2.0, 3.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn fk_rejects_dimension_mismatch() {
        let body = make_default_body(8, 2).unwrap();
        assert!(matches!(
            forward_kinematics(&body, &PoseParams::zero(3)),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn pose_rejects_wrapped_axis_angle() {
        assert!(PoseParams::new(vec![Vec3::new(3.2, 0.0, 0.0)], Vec3::zeros()).is_err());
        assert!(PoseParams::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)], Vec3::zeros()).is_err());
        assert!(ShapeParams::new(vec![f64::NAN]).is_err());
        assert_eq!(ShapeParams::new(vec![9.0]).unwrap().betas(), &[5.0]);
    }

    #[test]
    fn lbs_identity_is_exact() {
        let body = make_default_body(8, 2).unwrap();
        let posed = lbs_pose(&body, &PoseParams::zero(NUM_JOINTS), &ShapeParams::zero(2)).unwrap();
        assert_eq!(posed.vertices, body.template_vertices);
    }

    #[test]
    fn lbs_unit_beta_adds_blendshape() {
        let body = make_default_body(8, 2).unwrap();
        let posed =
            lbs_pose(&body, &PoseParams::zero(NUM_JOINTS), &ShapeParams::new(vec![1.0, 0.0]).unwrap())
                .unwrap();
        for (v, p) in posed.vertices.iter().enumerate() {
            let dir = Vec3::new(
                body.shape_dirs[v * 3 * 2],
                body.shape_dirs[(v * 3 + 1) * 2],
                body.shape_dirs[(v * 3 + 2) * 2],
            );
            assert!((p - (body.template_vertices[v] + dir)).norm() < 1e-15);
        }
    }

    #[test]
    fn lbs_half_weights_average_two_copies() {
        // vertex on the midpoint between the joints, joint 1 rotated 180 degrees
        // about the z axis through the midpoint between both joints: joint 1's
        // local rotation is about its own origin, so compose by hand.
        let body = chain_body();
        let pose = PoseParams::zero(2)
            .with_rotation(1, Vec3::new(0.0, 0.0, std::f64::consts::PI - 1e-9))
            .unwrap();
        let posed = lbs_pose(&body, &pose, &ShapeParams::zero(1)).unwrap();
        let x = body.template_vertices[0];
        let j1 = body.joints[1];
        let rot = Rotation3::new(Vec3::new(0.0, 0.0, std::f64::consts::PI - 1e-9));
        let copy0 = x;
        let copy1 = j1 + rot * (x - j1);
        let expect = 0.5 * copy0 + 0.5 * copy1;
        assert!((posed.vertices[0] - expect).norm() < 1e-12);
        // copy1 ~ (0, 1.5, 0), so the blend sits near (0, 1, 0)
        assert!((posed.vertices[0] - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-8);
    }

    #[test]
    fn default_body_invariants() {
        let a = make_default_body(8, 2).unwrap();
        let b = make_default_body(8, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_joints(), 16);
        let posed = lbs_pose(&a, &PoseParams::zero(16), &ShapeParams::zero(2)).unwrap();
        let audit = posed.to_mesh().edge_audit();
        assert!(audit.is_closed_manifold(), "{audit:?}");
        for v in 0..a.num_vertices() {
            let s: f64 = a.weight_row(v).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(make_default_body(3, 2).is_err());
        assert!(make_default_body(8, 0).is_err());
    }

    #[test]
    fn body_fits_unit_box() {
        let body = make_default_body(12, 8).unwrap();
        let (lo, hi) = body.template_mesh().bounds().unwrap();
        assert!(lo.iter().all(|x| *x > -1.0) && hi.iter().all(|x| *x < 1.0), "{lo} {hi}");
        for f in 0..body.faces.len() {
            assert!(body.template_mesh().face_area(f) > 1e-10);
        }
    }

    #[test]
    fn tensor_round_trip_keeps_weights_on_simplex() {
        let body = make_default_body(8, 3).unwrap();
        let back = SkinnedBody::from_tensors(&body.to_tensors("body."), "body.").unwrap();
        assert_eq!(back, body);
    }

    fn arb_pose() -> impl Strategy<Value = PoseParams> {
        (
            prop::collection::vec(prop::array::uniform3(-0.8f64..0.8), NUM_JOINTS),
            prop::array::uniform3(-0.5f64..0.5),
        )
            .prop_map(|(r, t)| {
                PoseParams::new(r.into_iter().map(Vec3::from).collect(), Vec3::from(t)).unwrap()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn lbs_commutes_with_rigid_root_motion(pose in arb_pose(), aa in prop::array::uniform3(-1.0f64..1.0), t in prop::array::uniform3(-1.0f64..1.0)) {
            let body = make_default_body(8, 2).unwrap();
            let shape = ShapeParams::new(vec![0.5, -0.3]).unwrap();
            let g = Isometry3::new(Vec3::from(t), Vec3::from(aa));
            let posed = lbs_pose(&body, &pose, &shape).unwrap();
            let moved = lbs_pose(&body, &pose.rigidly_moved(&body, &g).unwrap(), &shape).unwrap();
            for (a, b) in posed.vertices.iter().zip(&moved.vertices) {
                let d = g.transform_point(&(*a).into()).coords - b;
                prop_assert!(d.amax() <= 1e-5);
            }
        }

        #[test]
        fn canonical_channels_are_pose_invariant(p1 in arb_pose(), p2 in arb_pose()) {
            let body = make_default_body(6, 2).unwrap();
            let s = ShapeParams::zero(2);
            let a = lbs_pose(&body, &p1, &s).unwrap().control_attributes();
            let b = lbs_pose(&body, &p2, &s).unwrap().control_attributes();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(&x[..3], &y[..3]);
            }
        }
    }
}
