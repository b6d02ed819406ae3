//! Anchor a reconstructed mesh to the posed body and drive it with the
//! body's skeleton.
//!
//! Surface anchoring records, per scan vertex, the nearest body triangle,
//! the barycentric foot point, a signed distance and the offset direction
//! in that triangle's local frame. For foot points inside a triangle the
//! direction is the face normal; on edges and vertices it tilts. Reposing
//! re-emits the vertex from the moved triangle.
//!
//! Weight transfer instead interpolates skinning weights at the foot point,
//! unposes the vertex with the blended transform and skins it again.

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{lbs_pose, Affine, PoseParams, ShapeParams, SkinnedBody};
use crate::bvh::TriangleBvh;
use crate::container::{Tensor, TensorMap};
use crate::error::{param_err, Error, Result};
use crate::mesh::{TriMesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorMode {
    #[default]
    Surface,
    WeightTransfer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub face: u32,
    pub bary: [f64; 3],
    /// Distance to the foot point, negative when the vertex lies behind the
    /// face.
    pub offset: f64,
    /// Unit offset direction in the face frame `(edge, normal x edge,
    /// normal)`, pointing to the front side.
    pub direction: [f64; 3],
    /// Blended skinning weights at the foot point.
    pub weights: Vec<f64>,
    /// Rest-pose position, for weight transfer.
    pub rest: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredScan {
    pub mesh: TriMesh,
    pub colors: Option<Vec<[f32; 3]>>,
    pub anchors: Vec<Anchor>,
    pub mode: AnchorMode,
    /// Shaped rest vertices of the body at anchoring time.
    rest_body: Vec<Vec3>,
}

/// Orthonormal frame of a triangle: columns are the first edge, the
/// in-plane perpendicular and the unit normal.
fn face_frame(a: &Vec3, b: &Vec3, c: &Vec3) -> Option<Matrix3<f64>> {
    let e1 = b - a;
    let n = e1.cross(&(c - a));
    if e1.norm() == 0.0 || n.norm() == 0.0 {
        return None;
    }
    let e1 = e1.normalize();
    let n = n.normalize();
    Some(Matrix3::from_columns(&[e1, n.cross(&e1), n]))
}

fn blend(transforms: &[Affine], w: &[f64]) -> Affine {
    let mut a = Matrix3::zeros();
    let mut b = Vec3::zeros();
    for (wj, t) in w.iter().zip(transforms) {
        if *wj != 0.0 {
            a += t.a * *wj;
            b += t.b * *wj;
        }
    }
    Affine { a, b }
}

/// Anchor every scan vertex to the body posed with `pose` and `shape`.
pub fn anchor_to_body(
    scan: &TriMesh,
    colors: Option<&[[f32; 3]]>,
    body: &SkinnedBody,
    pose: &PoseParams,
    shape: &ShapeParams,
    mode: AnchorMode,
) -> Result<AnchoredScan> {
    if scan.vertices.is_empty() {
        return param_err("cannot anchor an empty scan");
    }
    if let Some(c) = colors {
        if c.len() != scan.vertices.len() {
            return param_err("need one color per scan vertex");
        }
    }
    let posed = lbs_pose(body, pose, shape)?.to_mesh();
    let bvh = TriangleBvh::build(&posed);
    let rest_body = body.shaped_vertices(shape)?;
    let skin = body.skinning_transforms(pose)?;
    let nj = body.num_joints();
    let anchors = scan
        .vertices
        .par_iter()
        .map(|p| {
            let hit = bvh
                .nearest(p)
                .ok_or_else(|| Error::Mesh("body has no triangles".into()))?;
            let f = posed.faces[hit.face];
            let [a, b, c] = posed.tri(hit.face);
            let frame = face_frame(&a, &b, &c)
                .ok_or_else(|| Error::Degenerate(format!("body face {} has zero area", hit.face)))?;
            let v = p - hit.point;
            let dist = v.norm();
            let (offset, direction) = if dist == 0.0 {
                (0.0, Vec3::z())
            } else {
                let local = frame.transpose() * v / dist;
                if local.z < 0.0 {
                    (-dist, -local)
                } else {
                    (dist, local)
                }
            };
            let mut weights = vec![0.0; nj];
            for (k, &vi) in f.iter().enumerate() {
                for (w, &r) in weights.iter_mut().zip(body.weight_row(vi as usize)) {
                    *w += hit.bary[k] * r;
                }
            }
            let m = blend(&skin, &weights);
            let rest = m
                .a
                .try_inverse()
                .map(|inv| inv * (p - m.b))
                .ok_or_else(|| Error::Degenerate("blended skinning transform is singular".into()))?;
            Ok(Anchor {
                face: hit.face as u32,
                bary: hit.bary,
                offset,
                direction: direction.into(),
                weights,
                rest,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnchoredScan {
        mesh: scan.clone(),
        colors: colors.map(<[_]>::to_vec),
        anchors,
        mode,
        rest_body,
    })
}

impl AnchoredScan {
    /// Vertex positions for a new pose and shape; faces are unchanged.
    pub fn repose(&self, body: &SkinnedBody, pose: &PoseParams, shape: &ShapeParams) -> Result<TriMesh> {
        if body.num_vertices() != self.rest_body.len() {
            return param_err("body does not match the one used for anchoring");
        }
        let vertices = match self.mode {
            AnchorMode::Surface => {
                let posed = lbs_pose(body, pose, shape)?;
                let pv = &posed.vertices;
                self.anchors
                    .par_iter()
                    .map(|an| {
                        let f = body.faces[an.face as usize].map(|i| pv[i as usize]);
                        let foot = f[0] * an.bary[0] + f[1] * an.bary[1] + f[2] * an.bary[2];
                        let frame = face_frame(&f[0], &f[1], &f[2])
                            .ok_or_else(|| Error::Degenerate("posed body face collapsed".into()))?;
                        Ok(foot + frame * Vec3::from(an.direction) * an.offset)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            AnchorMode::WeightTransfer => {
                let shaped = body.shaped_vertices(shape)?;
                let skin = body.skinning_transforms(pose)?;
                self.anchors
                    .par_iter()
                    .map(|an| {
                        let f = body.faces[an.face as usize];
                        let mut delta = Vec3::zeros();
                        for (k, &vi) in f.iter().enumerate() {
                            delta += (shaped[vi as usize] - self.rest_body[vi as usize]) * an.bary[k];
                        }
                        let x = an.rest + delta;
                        let m = blend(&skin, &an.weights);
                        Ok(m.apply(&x))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        TriMesh::new(vertices, self.mesh.faces.clone())
    }

    /// One mesh per pose.
    pub fn animate(&self, body: &SkinnedBody, frames: &[(PoseParams, ShapeParams)]) -> Result<Vec<TriMesh>> {
        frames.iter().map(|(p, s)| self.repose(body, p, s)).collect()
    }

    pub fn to_tensors(&self, prefix: &str) -> TensorMap {
        let n = self.anchors.len();
        let nj = self.anchors.first().map_or(0, |a| a.weights.len());
        let mut m = TensorMap::new();
        let mut put = |name: &str, t: Tensor| {
            m.insert(format!("{prefix}{name}"), t);
        };
        let pts = |v: &[Vec3]| v.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
        put("vertices", Tensor::f64(vec![self.mesh.vertices.len(), 3], pts(&self.mesh.vertices)));
        put(
            "faces",
            Tensor::f64(vec![self.mesh.faces.len(), 3], self.mesh.faces.iter().flatten().map(|&i| i as f64).collect()),
        );
        if let Some(c) = &self.colors {
            put("colors", Tensor::f32(vec![c.len(), 3], c.iter().flatten().copied().collect()));
        }
        put("anchor_face", Tensor::f64(vec![n], self.anchors.iter().map(|a| a.face as f64).collect()));
        put("anchor_bary", Tensor::f64(vec![n, 3], self.anchors.iter().flat_map(|a| a.bary).collect()));
        put("anchor_offset", Tensor::f64(vec![n], self.anchors.iter().map(|a| a.offset).collect()));
        put("anchor_direction", Tensor::f64(vec![n, 3], self.anchors.iter().flat_map(|a| a.direction).collect()));
        put(
            "anchor_weights",
            Tensor::f64(vec![n, nj], self.anchors.iter().flat_map(|a| a.weights.iter().copied()).collect()),
        );
        put("anchor_rest", Tensor::f64(vec![n, 3], pts(&self.anchors.iter().map(|a| a.rest).collect::<Vec<_>>())));
        put("rest_body", Tensor::f64(vec![self.rest_body.len(), 3], pts(&self.rest_body)));
        put("mode", Tensor::u8(vec![1], vec![(self.mode == AnchorMode::WeightTransfer) as u8]));
        m
    }

    pub fn from_tensors(m: &TensorMap, prefix: &str) -> Result<Self> {
        let get = |name: &str| {
            m.get(&format!("{prefix}{name}"))
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    msg: format!("missing tensor {prefix}{name}"),
                })
        };
        let rows = |name: &str, cols: usize| -> Result<Vec<Vec<f64>>> {
            let t = get(name)?;
            if t.shape().len() != 2 || t.shape()[1] != cols {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!("{prefix}{name} has shape {:?}", t.shape()),
                });
            }
            Ok(t.to_f64_vec().chunks_exact(cols).map(<[f64]>::to_vec).collect())
        };
        let v3 = |r: Vec<f64>| Vec3::new(r[0], r[1], r[2]);
        let vertices: Vec<Vec3> = rows("vertices", 3)?.into_iter().map(v3).collect();
        let faces = rows("faces", 3)?
            .into_iter()
            .map(|r| [r[0] as u32, r[1] as u32, r[2] as u32])
            .collect();
        let mesh = TriMesh::new(vertices, faces)?;
        let colors = match m.get(&format!("{prefix}colors")) {
            Some(t) => Some(t.to_f32_vec().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()),
            None => None,
        };
        let faces_a = get("anchor_face")?.to_f64_vec();
        let n = faces_a.len();
        let nj = get("anchor_weights")?.shape().get(1).copied().unwrap_or(0);
        let bary = rows("anchor_bary", 3)?;
        let offset = get("anchor_offset")?.to_f64_vec();
        let dir = rows("anchor_direction", 3)?;
        let weights = rows("anchor_weights", nj)?;
        let rest = rows("anchor_rest", 3)?;
        if [bary.len(), offset.len(), dir.len(), weights.len(), rest.len(), mesh.vertices.len()]
            .iter()
            .any(|&k| k != n)
        {
            return Err(Error::Format {
                offset: 0,
                msg: "anchor tables disagree in length".into(),
            });
        }
        let anchors = (0..n)
            .map(|i| Anchor {
                face: faces_a[i] as u32,
                bary: [bary[i][0], bary[i][1], bary[i][2]],
                offset: offset[i],
                direction: [dir[i][0], dir[i][1], dir[i][2]],
                weights: weights[i].clone(),
                rest: v3(rest[i].clone()),
            })
            .collect();
        let mode = match get("mode")?.to_f64_vec().first() {
            Some(&x) if x != 0.0 => AnchorMode::WeightTransfer,
            _ => AnchorMode::Surface,
        };
        Ok(Self {
            mesh,
            colors,
            anchors,
            mode,
            rest_body: rows("rest_body", 3)?.into_iter().map(v3).collect(),
        })
    }
}

/// One frame of a pose sequence file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    /// Axis-angle per joint.
    pub rotations: Vec<[f64; 3]>,
    #[serde(default)]
    pub translation: [f64; 3],
    /// Shape coefficients; the anchoring shape when absent.
    #[serde(default)]
    pub betas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    pub frames: Vec<PoseFrame>,
}

impl PoseSequence {
    pub fn resolve(&self, default_shape: &ShapeParams) -> Result<Vec<(PoseParams, ShapeParams)>> {
        self.frames
            .iter()
            .map(|f| {
                let pose = PoseParams::new(f.rotations.iter().map(|&r| Vec3::from(r)).collect(), f.translation.into())?;
                let shape = match &f.betas {
                    Some(b) => ShapeParams::new(b.clone())?,
                    None => default_shape.clone(),
                };
                Ok((pose, shape))
            })
            .collect()
    }
}
