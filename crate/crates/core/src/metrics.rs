//! Mesh and embedding evaluation: Chamfer, volumetric IoU, normal
//! consistency, ICP alignment and similarity aggregates.

use nalgebra::{Matrix3, SVD};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::kdtree::KdTree;
use crate::mesh::{sample_surface, TriMesh, Vec3};

/// Points with optional unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, normals: Option<Vec<Vec3>>) -> Result<Self> {
        if let Some(n) = &normals {
            if n.len() != points.len() {
                return param_err("normal count differs from point count");
            }
            if let Some(bad) = n.iter().position(|v| (v.norm() - 1.0).abs() > 1e-4) {
                return param_err(format!("normal {bad} is not unit length"));
            }
        }
        Ok(Self { points, normals })
    }

    pub fn from_points(points: Vec<Vec3>) -> Self {
        Self { points, normals: None }
    }

    /// `n` area-weighted surface samples with face normals.
    pub fn sample_mesh(mesh: &TriMesh, n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_surface(mesh, n, &mut rng)?;
        Ok(Self {
            points: s.iter().map(|x| x.point).collect(),
            normals: Some(s.iter().map(|x| x.normal).collect()),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| n.iter().map(|v| t.rotation * v).collect()),
        }
    }
}

/// `x -> scale * R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if orth > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return param_err("rotation must be orthonormal with determinant +1");
        }
        Ok(Self {
            rotation,
            translation,
            scale: 1.0,
        })
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
            scale: self.scale * other.scale,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    // atan2 form stays accurate for tiny angles
    let axis = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    (0.5 * axis.norm()).atan2(0.5 * (r.trace() - 1.0))
}

/// Angle between two rotations in radians.
pub fn rotation_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    rotation_angle(&(a.transpose() * b))
}

fn nearest_all(tree: &KdTree, queries: &[Vec3]) -> Vec<(usize, f64)> {
    queries
        .par_iter()
        .map(|q| tree.nearest(q).expect("non-empty tree"))
        .collect()
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Raw symmetric Chamfer: half the sum of both mean squared nearest
/// distances. Multiply by 1000 for the reported `x1e-3` figure.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return param_err("Chamfer distance needs two non-empty point sets");
    }
    let (ta, tb) = (KdTree::build(a), KdTree::build(b));
    let ab = mean(nearest_all(&tb, a).into_iter().map(|x| x.1), a.len());
    let ba = mean(nearest_all(&ta, b).into_iter().map(|x| x.1), b.len());
    Ok(0.5 * (ab + ba))
}

/// Quadratic-time reference for [`chamfer`].
pub fn chamfer_brute_force(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return param_err("Chamfer distance needs two non-empty point sets");
    }
    let one = |x: &[Vec3], y: &[Vec3]| {
        mean(
            x.iter()
                .map(|p| y.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min)),
            x.len(),
        )
    };
    Ok(0.5 * (one(a, b) + one(b, a)))
}

/// Symmetric mean `|cos|` between each normal and its nearest neighbour's
/// normal in the other cloud.
pub fn normal_consistency(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let (Some(na), Some(nb)) = (&a.normals, &b.normals) else {
        return param_err("normal consistency needs normals on both clouds");
    };
    if a.is_empty() || b.is_empty() {
        return param_err("normal consistency needs two non-empty clouds");
    }
    let one = |src: &[Vec3], sn: &[Vec3], dst: &[Vec3], dn: &[Vec3]| {
        let tree = KdTree::build(dst);
        let nn = nearest_all(&tree, src);
        mean(nn.iter().zip(sn).map(|(&(j, _), n)| n.dot(&dn[j]).abs()), src.len())
    };
    Ok(0.5 * (one(&a.points, na, &b.points, nb) + one(&b.points, nb, &a.points, na)))
}

/// Occupancy of an `n^3` cell-centred grid over `[lo, hi]`, x fastest.
/// A cell is inside when its winding number is at least one; for a
/// closed mesh the winding number is the signed count of surface
/// crossings along +z, which is what is evaluated here.
pub fn occupancy_grid(mesh: &TriMesh, lo: Vec3, hi: Vec3, n: usize) -> Vec<bool> {
    let step = (hi - lo) / n as f64;
    let center = |i: usize, axis: usize| lo[axis] + (i as f64 + 0.5) * step[axis];
    let xs: Vec<f64> = (0..n).map(|i| center(i, 0)).collect();
    let ys: Vec<f64> = (0..n).map(|i| center(i, 1)).collect();
    let zs: Vec<f64> = (0..n).map(|i| center(i, 2)).collect();
    // crossings[column] = (z, sign)
    let mut crossings: Vec<Vec<(f64, i32)>> = vec![Vec::new(); n * n];
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.tri(f);
        let area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
        if area == 0.0 {
            continue;
        }
        let sign = if area > 0.0 { 1 } else { -1 };
        let (a, b, c) = if area > 0.0 { (a, b, c) } else { (a, c, b) };
        let area = area.abs();
        let lo_x = a.x.min(b.x).min(c.x);
        let hi_x = a.x.max(b.x).max(c.x);
        let lo_y = a.y.min(b.y).min(c.y);
        let hi_y = a.y.max(b.y).max(c.y);
        let i0 = xs.partition_point(|&x| x < lo_x);
        let i1 = xs.partition_point(|&x| x <= hi_x);
        let j0 = ys.partition_point(|&y| y < lo_y);
        let j1 = ys.partition_point(|&y| y <= hi_y);
        let edges = [(a, b), (b, c), (c, a)];
        for j in j0..j1 {
            for i in i0..i1 {
                let (px, py) = (xs[i], ys[j]);
                let mut w = [0.0; 3];
                let mut inside = true;
                for (k, (p, q)) in edges.iter().enumerate() {
                    let e = (q.x - p.x) * (py - p.y) - (q.y - p.y) * (px - p.x);
                    // counter-clockwise top-left rule: on-edge points count
                    // for exactly one of two triangles sharing the edge
                    let (dx, dy) = (q.x - p.x, q.y - p.y);
                    let owns = dy < 0.0 || (dy == 0.0 && dx > 0.0);
                    if e < 0.0 || (e == 0.0 && !owns) {
                        inside = false;
                        break;
                    }
                    w[(k + 2) % 3] = e;
                }
                if !inside {
                    continue;
                }
                let z = (w[0] * a.z + w[1] * b.z + w[2] * c.z) / area;
                crossings[j * n + i].push((z, sign));
            }
        }
    }
    let mut occ = vec![false; n * n * n];
    occ.par_chunks_mut(n)
        .enumerate()
        .for_each(|(col, out)| {
            let (j, i) = (col / n, col % n);
            let mut cs = crossings[j * n + i].clone();
            cs.sort_by(|p, q| p.0.total_cmp(&q.0));
            // winding at z = sum of signs of crossings above z
            let mut above: i32 = cs.iter().map(|c| c.1).sum();
            let mut next = 0;
            for (k, &z) in zs.iter().enumerate() {
                while next < cs.len() && cs[next].0 <= z {
                    above -= cs[next].1;
                    next += 1;
                }
                out[k] = above >= 1;
            }
        });
    // reorder from [y][x][z] to x-fastest [z][y][x]
    let mut grid = vec![false; n * n * n];
    for j in 0..n {
        for i in 0..n {
            for k in 0..n {
                grid[(k * n + j) * n + i] = occ[(j * n + i) * n + k];
            }
        }
    }
    grid
}

/// IoU of winding-number occupancies on an `n^3` grid spanning the joint
/// bounding box enlarged by 5% of its extent per side.
pub fn volumetric_iou(a: &TriMesh, b: &TriMesh, n: usize) -> Result<f64> {
    if n == 0 {
        return param_err("voxel resolution must be positive");
    }
    a.require_watertight()?;
    b.require_watertight()?;
    let (Some((alo, ahi)), Some((blo, bhi))) = (a.bounds(), b.bounds()) else {
        return Err(Error::Mesh("IoU of an empty mesh".into()));
    };
    let (lo, hi) = (alo.inf(&blo), ahi.sup(&bhi));
    let margin = (hi - lo) * 0.05;
    let (lo, hi) = (lo - margin, hi + margin);
    let oa = occupancy_grid(a, lo, hi, n);
    let ob = occupancy_grid(b, lo, hi, n);
    let inter = oa.iter().zip(&ob).filter(|(x, y)| **x && **y).count();
    let union = oa.iter().zip(&ob).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        return Err(Error::Degenerate("both meshes enclose no voxel".into()));
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    #[serde(skip)]
    pub transform: RigidTransform,
    /// RMSE after each iteration, starting with the initial pairing.
    pub rmse_history: Vec<f64>,
    pub rmse: f64,
    pub iterations: usize,
}

/// Least-squares `scale * R * src + t ~ dst` for paired points.
pub fn procrustes(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<RigidTransform> {
    if src.len() != dst.len() || src.len() < 3 {
        return param_err("Procrustes needs at least three paired points");
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (s, d) = (s - cs, d - cd);
        h += d * s.transpose();
        var_s += s.norm_squared();
    }
    let svd = SVD::new(h, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    // rank below two means the points are collinear or coincident
    let tol = 1e-12 * sv.max().max(1e-300);
    if sv.iter().filter(|&&x| x > tol).count() < 2 {
        return Err(Error::Degenerate("points are collinear".into()));
    }
    let d = (u * vt).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let r = u * fix * vt;
    let scale = if with_scale {
        (sv[0] + sv[1] + d * sv[2]) / var_s
    } else {
        1.0
    };
    Ok(RigidTransform {
        rotation: r,
        translation: cd - r * cs * scale,
        scale,
    })
}

/// Point-to-point ICP from `src` onto `dst`.
pub fn icp_align(src: &[Vec3], dst: &[Vec3], iters: usize, with_scale: bool) -> Result<IcpResult> {
    if src.len() < 3 || dst.len() < 3 {
        return param_err("ICP needs at least three points per cloud");
    }
    let tree = KdTree::build(dst);
    let mut t = RigidTransform::identity();
    let mut moved = src.to_vec();
    let rmse_of = |nn: &[(usize, f64)]| (nn.iter().map(|x| x.1).sum::<f64>() / nn.len() as f64).sqrt();
    let mut nn = nearest_all(&tree, &moved);
    let mut history = vec![rmse_of(&nn)];
    let mut iterations = 0;
    for _ in 0..iters {
        let pairs: Vec<Vec3> = nn.iter().map(|&(j, _)| dst[j]).collect();
        let step = procrustes(&moved, &pairs, with_scale)?;
        let cand = step.compose(&t);
        let cand_moved: Vec<Vec3> = src.iter().map(|p| cand.apply(p)).collect();
        let cand_nn = nearest_all(&tree, &cand_moved);
        let r = rmse_of(&cand_nn);
        let prev = *history.last().unwrap();
        if r > prev {
            break;
        }
        t = cand;
        moved = cand_moved;
        nn = cand_nn;
        history.push(r);
        iterations += 1;
        if prev - r < 1e-9 {
            break;
        }
    }
    Ok(IcpResult {
        transform: t,
        rmse: *history.last().unwrap(),
        rmse_history: history,
        iterations,
    })
}

fn check_unit(e: &[f64], i: usize) -> Result<()> {
    let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-4 {
        return param_err(format!("embedding {i} has norm {n}, expected 1"));
    }
    Ok(())
}

/// Mean inner product over ordered pairs `i != j`.
pub fn avg_pairwise_similarity(embeddings: &[Vec<f64>]) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 {
        return param_err("pairwise similarity needs at least two embeddings");
    }
    let d = embeddings[0].len();
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != d {
            return param_err("embeddings differ in dimension");
        }
        check_unit(e, i)?;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += dot(&embeddings[i], &embeddings[j]);
        }
    }
    Ok(2.0 * s / (n * (n - 1)) as f64)
}

/// Largest inner product between `e` and any reference.
pub fn max_similarity(e: &[f64], reference: &[Vec<f64>]) -> Result<f64> {
    if reference.is_empty() {
        return param_err("maximum similarity needs a non-empty reference set");
    }
    check_unit(e, 0)?;
    for (i, r) in reference.iter().enumerate() {
        if r.len() != e.len() {
            return param_err("embeddings differ in dimension");
        }
        check_unit(r, i)?;
    }
    Ok(reference.iter().map(|r| dot(e, r)).fold(f64::NEG_INFINITY, f64::max))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub samples: usize,
    pub icp_samples: usize,
    pub icp_iters: usize,
    pub icp_scale: bool,
    pub iou_resolution: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            icp_samples: 10_000,
            icp_iters: 50,
            icp_scale: false,
            iou_resolution: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpReport {
    pub rot_deg: f64,
    pub trans: [f64; 3],
    pub scale: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub chamfer: String,
    pub nc: String,
    pub iou: String,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub chamfer_x1e3: f64,
    /// `None` when either mesh is not watertight.
    pub iou: Option<f64>,
    pub nc: f64,
    pub icp: IcpReport,
    pub conventions: Conventions,
}

/// Align `pred` to `gt` with ICP, then score it.
pub fn evaluate_meshes(pred: &TriMesh, gt: &TriMesh, cfg: &EvalConfig) -> Result<EvalReport> {
    let pc = PointCloud::sample_mesh(pred, cfg.samples, cfg.seed)?;
    let gc = PointCloud::sample_mesh(gt, cfg.samples, cfg.seed ^ 1)?;
    let k = cfg.icp_samples.min(cfg.samples).max(3);
    let stride = (cfg.samples / k).max(1);
    let sub = |c: &PointCloud| c.points.iter().step_by(stride).copied().collect::<Vec<_>>();
    let icp = icp_align(&sub(&pc), &sub(&gc), cfg.icp_iters, cfg.icp_scale)?;
    let t = icp.transform;
    let aligned = pc.transformed(&t);
    let iou = if pred.is_watertight() && gt.is_watertight() {
        let moved = pred.transformed(|p| t.apply(p));
        Some(volumetric_iou(&moved, gt, cfg.iou_resolution)?)
    } else {
        None
    };
    Ok(EvalReport {
        chamfer_x1e3: 1000.0 * chamfer(&aligned.points, &gc.points)?,
        iou,
        nc: normal_consistency(&aligned, &gc)?,
        icp: IcpReport {
            rot_deg: t.angle().to_degrees(),
            trans: [t.translation.x, t.translation.y, t.translation.z],
            scale: t.scale,
            rmse: icp.rmse,
        },
        conventions: Conventions {
            chamfer: "0.5 * (mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2), squared distances, x1000".into(),
            nc: "symmetric mean |cos| to nearest neighbour normal".into(),
            iou: format!("winding-number occupancy, {}^3 grid, joint bbox + 5% margin", cfg.iou_resolution),
            samples: cfg.samples,
        },
    })
}

/// 1-Wasserstein distance between two equally sized 1-D samples: the mean
/// gap between sorted values.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return param_err("1-D Wasserstein needs two non-empty samples of equal size");
    }
    let sorted = |x: &[f64]| {
        let mut v = x.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (a, b) = (sorted(a), sorted(b));
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Mean 1-D Wasserstein distance over `projections` random unit directions.
pub fn sliced_wasserstein1(a: &[Vec<f64>], b: &[Vec<f64>], projections: usize, seed: u64) -> Result<f64> {
    let dim = a.first().map_or(0, Vec::len);
    if dim == 0 || projections == 0 || a.iter().chain(b).any(|x| x.len() != dim) {
        return param_err("sliced Wasserstein needs non-empty points of one dimension and some projections");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..projections {
        let dir: Vec<f64> = loop {
            let d: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break d.into_iter().map(|x| x / n).collect();
            }
        };
        let proj = |p: &[Vec<f64>]| p.iter().map(|x| x.iter().zip(&dir).map(|(u, v)| u * v).sum()).collect::<Vec<f64>>();
        total += wasserstein1_1d(&proj(a), &proj(b))?;
    }
    Ok(total / projections as f64)
}

#[cfg(test)]
mod tests {
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::mesh::{cube, uv_sphere};

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn chamfer_examples() {
        let a = random_points(50, 1);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let one = chamfer(&[Vec3::zeros()], &[Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        assert_eq!(one, 1.0);
        assert!(chamfer(&[], &a).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let (a, b) = (random_points(1000, 2), random_points(1000, 3));
        let fast = chamfer(&a, &b).unwrap();
        let slow = chamfer_brute_force(&a, &b).unwrap();
        assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
    }

    #[test]
    fn iou_examples() {
        let a = cube(Vec3::zeros(), 1.0);
        assert_eq!(volumetric_iou(&a, &a, 32).unwrap(), 1.0);
        let far = cube(Vec3::new(3.0, 0.0, 0.0), 1.0);
        assert_eq!(volumetric_iou(&a, &far, 32).unwrap(), 0.0);
        let shifted = cube(Vec3::new(0.5, 0.0, 0.0), 1.0);
        let iou = volumetric_iou(&a, &shifted, 128).unwrap();
        assert!((iou - 1.0 / 3.0).abs() <= 0.01, "{iou}");
        let mut open = a.clone();
        open.faces.pop();
        assert!(volumetric_iou(&open, &a, 16).is_err());
    }

    #[test]
    fn occupancy_matches_generalized_winding() {
        let m = uv_sphere(Vec3::new(0.05, -0.03, 0.02), 0.6, 9, 13);
        let (lo, hi) = (Vec3::repeat(-0.8), Vec3::repeat(0.8));
        let n = 12;
        let grid = occupancy_grid(&m, lo, hi, n);
        let step = (hi - lo) / n as f64;
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let p = lo + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5).component_mul(&step);
                    assert_eq!(grid[(k * n + j) * n + i], m.winding_number(&p) > 0.5, "{p:?}");
                }
            }
        }
    }

    #[test]
    fn grid_aligned_boundaries_are_counted_once() {
        // with n = 8 over [-1, 1] the cube faces at +-0.5 pass through no
        // cell centre, but its edges project onto column boundaries
        let a = cube(Vec3::zeros(), 1.0);
        let g = occupancy_grid(&a, Vec3::repeat(-1.0), Vec3::repeat(1.0), 8);
        assert_eq!(g.iter().filter(|&&x| x).count(), 4 * 4 * 4);
        // a rotated copy puts diagonal edges through cell-centre columns
        let r = a.transformed(|p| Vec3::new(p.x - p.y, p.x + p.y, p.z) * std::f64::consts::FRAC_1_SQRT_2);
        let g = occupancy_grid(&r, Vec3::repeat(-1.0), Vec3::repeat(1.0), 16);
        let step = 2.0 / 16.0;
        for (idx, &occ) in g.iter().enumerate() {
            let (i, j, k) = (idx % 16, (idx / 16) % 16, idx / 256);
            let p = Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * step - Vec3::repeat(1.0);
            let w = r.winding_number(&p);
            if (w - 0.5).abs() > 0.4 {
                assert_eq!(occ, w > 0.5, "{p:?}");
            }
        }
    }

    fn plane(normal_flip: bool) -> PointCloud {
        let pts: Vec<Vec3> = (0..100).map(|i| Vec3::new((i % 10) as f64, (i / 10) as f64, 0.0)).collect();
        let n = Vec3::new(0.0, 0.0, if normal_flip { -1.0 } else { 1.0 });
        PointCloud::new(pts.clone(), Some(vec![n; pts.len()])).unwrap()
    }

    #[test]
    fn normal_consistency_examples() {
        let a = plane(false);
        assert_eq!(normal_consistency(&a, &a).unwrap(), 1.0);
        assert_eq!(normal_consistency(&a, &plane(true)).unwrap(), 1.0);
        let ortho = PointCloud::new(a.points.clone(), Some(vec![Vec3::x(); a.len()])).unwrap();
        assert!(normal_consistency(&a, &ortho).unwrap().abs() <= 1e-6);
        assert!(normal_consistency(&a, &PointCloud::from_points(a.points.clone())).is_err());
        assert!(PointCloud::new(vec![Vec3::zeros()], Some(vec![Vec3::repeat(1.0)])).is_err());
    }

    #[test]
    fn icp_recovers_known_transform() {
        let src = random_points(400, 7);
        let rot = *Rotation3::from_axis_angle(&Vec3::z_axis(), 10f64.to_radians()).matrix();
        let truth = RigidTransform::new(rot, Vec3::new(0.1, 0.0, 0.0)).unwrap();
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let r = icp_align(&src, &dst, 100, false).unwrap();
        assert!(rotation_distance(&r.transform.rotation, &rot) <= 1e-6);
        assert!((r.transform.translation - truth.translation).norm() <= 1e-7);
        assert!(r.rmse <= 1e-9);
        assert!(r.rmse_history.windows(2).all(|w| w[1] <= w[0]));

        let same = icp_align(&src, &src, 10, false).unwrap();
        assert_eq!(same.rmse, 0.0);
        assert!(same.transform.angle() <= 1e-12);
    }

    #[test]
    fn procrustes_with_scale_and_degenerate_input() {
        let src = random_points(30, 8);
        let rot = *Rotation3::from_euler_angles(0.3, -0.2, 1.1).matrix();
        let dst: Vec<Vec3> = src.iter().map(|p| rot * p * 1.7 + Vec3::new(1.0, 2.0, 3.0)).collect();
        let t = procrustes(&src, &dst, true).unwrap();
        assert!((t.scale - 1.7).abs() < 1e-12);
        assert!(rotation_distance(&t.rotation, &rot) < 1e-10);
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(procrustes(&line, &line, false), Err(Error::Degenerate(_))));
    }

    #[test]
    fn similarity_examples() {
        let e = vec![1.0, 0.0];
        assert_eq!(avg_pairwise_similarity(&[e.clone(), e.clone(), e.clone()]).unwrap(), 1.0);
        assert_eq!(avg_pairwise_similarity(&[e.clone(), vec![0.0, 1.0]]).unwrap(), 0.0);
        assert!(avg_pairwise_similarity(&[e.clone()]).is_err());
        assert!(avg_pairwise_similarity(&[e.clone(), vec![2.0, 0.0]]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set: Vec<Vec<f64>> = (0..4).map(|_| random_unit(16, &mut rng)).collect();
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    oracle += dot(&set[i], &set[j]);
                }
            }
        }
        assert!((avg_pairwise_similarity(&set).unwrap() - oracle / 12.0).abs() <= 1e-12);

        assert_eq!(max_similarity(&set[2], &set).unwrap(), dot(&set[2], &set[2]));
        assert_eq!(max_similarity(&[0.0, 1.0], &[e.clone()]).unwrap(), 0.0);
        assert!(max_similarity(&e, &[]).is_err());
        let q = random_unit(16, &mut rng);
        let scan = set.iter().map(|r| dot(&q, r)).fold(f64::MIN, f64::max);
        assert_eq!(max_similarity(&q, &set).unwrap(), scan);
    }

    #[test]
    fn evaluation_of_identical_meshes() {
        let m = uv_sphere(Vec3::zeros(), 0.5, 12, 16);
        let cfg = EvalConfig {
            samples: 4000,
            icp_samples: 500,
            iou_resolution: 32,
            ..Default::default()
        };
        let r = evaluate_meshes(&m, &m, &cfg).unwrap();
        assert!(r.chamfer_x1e3 < 0.5, "{}", r.chamfer_x1e3);
        assert!(r.iou.unwrap() > 0.97);
        assert!(r.nc > 0.97);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["icp"]["rot_deg"].is_number() && json["conventions"]["chamfer"].is_string());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn chamfer_symmetric_and_rigid_invariant(seed in 0u64..1000, angle in -3.0f64..3.0, tx in -2.0f64..2.0) {
            let a = random_points(40, seed);
            let b = random_points(30, seed + 1);
            let ab = chamfer(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - chamfer(&b, &a).unwrap()).abs() <= 1e-15);
            let rot = *Rotation3::from_axis_angle(&Vec3::y_axis(), angle).matrix();
            let t = RigidTransform::new(rot, Vec3::new(tx, 0.5, -1.0)).unwrap();
            let ta: Vec<Vec3> = a.iter().map(|p| t.apply(p)).collect();
            let tb: Vec<Vec3> = b.iter().map(|p| t.apply(p)).collect();
            prop_assert!((chamfer(&ta, &tb).unwrap() - ab).abs() <= 1e-9);
        }

        #[test]
        fn pairwise_similarity_order_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut set: Vec<Vec<f64>> = (0..6).map(|_| random_unit(8, &mut rng)).collect();
            let s = avg_pairwise_similarity(&set).unwrap();
            set.reverse();
            set.swap(0, 3);
            prop_assert!((avg_pairwise_similarity(&set).unwrap() - s).abs() <= 1e-12);
        }
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..n {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn wasserstein_matches_best_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let best = permutations(6)
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| (a[i] - b[j]).abs()).sum::<f64>() / 6.0)
                .fold(f64::INFINITY, f64::min);
            assert!((wasserstein1_1d(&a, &b).unwrap() - best).abs() < 1e-12);
        }
        assert!(wasserstein1_1d(&[1.0], &[]).is_err());
    }

    #[test]
    fn sliced_wasserstein_of_a_shift() {
        let a: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.01, 0.0]).collect();
        let b: Vec<Vec<f64>> = a.iter().map(|p| vec![p[0] + 1.0, p[1]]).collect();
        assert_eq!(sliced_wasserstein1(&a, &a, 16, 0).unwrap(), 0.0);
        let d = sliced_wasserstein1(&b, &a, 4000, 1).unwrap();
        // E|cos| over the circle is 2/pi.
        assert!((d - 2.0 / std::f64::consts::PI).abs() < 0.02, "{d}");
    }
}
