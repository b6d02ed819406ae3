//! Block-streamed grid evaluation and marching cubes.
//!
//! The triangulation table is derived from face contours: every cube face
//! is split by the sign pattern of its four corners, ambiguous faces always
//! isolate their inside corners, and the face segments are chained into
//! loops that are fanned into triangles. A face's segments depend only on
//! that face's corners, so neighbouring cells agree and closed level sets
//! give closed meshes.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::mesh::{TriMesh, Vec3};

/// Grid of `resolution` cells per axis (`resolution + 1` samples) over
/// `[lo, hi]`, evaluated in blocks of `chunk` cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub resolution: usize,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub chunk: usize,
    /// Narrow band half-width. When set, a coarse pass finds the blocks
    /// that can hold the surface and everything else is filled with
    /// `+-band`; only useful for fields that are expensive to evaluate.
    #[serde(default)]
    pub band: Option<f64>,
}

pub const MAX_CHUNK: usize = 64;
const BAND_BLOCK: usize = 8;
const COARSE_STRIDE: usize = 4;

impl GridConfig {
    pub fn cube(resolution: usize, half_extent: f64) -> Self {
        Self {
            resolution,
            lo: [-half_extent; 3],
            hi: [half_extent; 3],
            chunk: 32,
            band: None,
        }
    }

    pub fn with_chunk(mut self, chunk: usize) -> Self {
        self.chunk = chunk;
        self
    }

    /// Every sample of a band block lies within two cell diagonals of a
    /// coarse sample, so this band is safe for fields with Lipschitz
    /// constant up to 2.
    pub fn with_default_band(mut self) -> Self {
        self.band = Some(4.0 * self.cell_diagonal());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return param_err("grid resolution must be at least 8");
        }
        if (0..3).any(|a| !(self.lo[a] < self.hi[a]) || !self.lo[a].is_finite() || !self.hi[a].is_finite()) {
            return param_err("grid bounds must be finite and non-empty");
        }
        if self.chunk == 0 || self.chunk > MAX_CHUNK {
            return param_err(format!("chunk must lie in 1..={MAX_CHUNK}"));
        }
        if let Some(b) = self.band {
            if !(b > 0.0) || self.resolution % BAND_BLOCK != 0 {
                return param_err("a narrow band needs a positive width and a resolution divisible by 8");
            }
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.resolution + 1
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + (self.hi[axis] - self.lo[axis]) * (i as f64 / self.resolution as f64)
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(self.coord(0, i), self.coord(1, j), self.coord(2, k))
    }

    pub fn cell_size(&self) -> Vec3 {
        Vec3::new(
            (self.hi[0] - self.lo[0]) / self.resolution as f64,
            (self.hi[1] - self.lo[1]) / self.resolution as f64,
            (self.hi[2] - self.lo[2]) / self.resolution as f64,
        )
    }

    pub fn cell_diagonal(&self) -> f64 {
        self.cell_size().norm()
    }

    fn blocks(&self) -> Vec<[usize; 3]> {
        let n = self.resolution.div_ceil(self.chunk);
        let mut out = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    out.push([i * self.chunk, j * self.chunk, k * self.chunk]);
                }
            }
        }
        out
    }

    /// Sample extent of the block of cells starting at `lo`.
    fn block_dims(&self, lo: [usize; 3]) -> [usize; 3] {
        lo.map(|l| self.chunk.min(self.resolution - l) + 1)
    }
}

/// Signed distance (negative inside) with optional color.
pub trait SdfField: Sync {
    fn distance(&self, p: &Vec3) -> f32;

    /// Samples `lo[a] .. lo[a] + dims[a]` of `grid`, x fastest. Must agree
    /// bit-exactly with [`SdfField::distance`] at the grid points.
    fn eval_block(&self, grid: &GridConfig, lo: [usize; 3], dims: [usize; 3]) -> Vec<f32> {
        let mut out = Vec::with_capacity(dims.iter().product());
        for k in lo[2]..lo[2] + dims[2] {
            for j in lo[1]..lo[1] + dims[1] {
                for i in lo[0]..lo[0] + dims[0] {
                    out.push(self.distance(&grid.point(i, j, k)));
                }
            }
        }
        out
    }

    fn distances(&self, pts: &[Vec3]) -> Vec<f32> {
        pts.iter().map(|p| self.distance(p)).collect()
    }

    fn colors(&self, pts: &[Vec3]) -> Vec<[f32; 3]> {
        vec![[0.7; 3]; pts.len()]
    }
}

/// Exact sphere distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereSdf {
    pub center: Vec3,
    pub radius: f64,
}

impl SdfField for SphereSdf {
    fn distance(&self, p: &Vec3) -> f32 {
        ((p - self.center).norm() - self.radius) as f32
    }
}

/// Pointwise minimum of spheres.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereUnion(pub Vec<SphereSdf>);

impl SdfField for SphereUnion {
    fn distance(&self, p: &Vec3) -> f32 {
        self.0.iter().map(|s| s.distance(p)).fold(f32::INFINITY, f32::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantField(pub f32);

impl SdfField for ConstantField {
    fn distance(&self, _: &Vec3) -> f32 {
        self.0
    }
}

/// Narrow-band activity of 8-cell blocks from a stride-4 coarse pass.
struct Band {
    width: f32,
    per_axis: usize,
    active: Vec<bool>,
    /// Sign of each block's coarse samples when inactive.
    negative: Vec<bool>,
}

impl Band {
    fn new(field: &dyn SdfField, cfg: &GridConfig, width: f64) -> Self {
        let coarse = GridConfig {
            resolution: cfg.resolution / COARSE_STRIDE,
            chunk: MAX_CHUNK,
            band: None,
            ..cfg.clone()
        };
        let values = dense_grid(field, &coarse);
        let cs = coarse.samples();
        let per_axis = cfg.resolution / BAND_BLOCK;
        let r = BAND_BLOCK / COARSE_STRIDE;
        let width = width as f32;
        let mut active = vec![false; per_axis.pow(3)];
        let mut negative = vec![false; per_axis.pow(3)];
        for bk in 0..per_axis {
            for bj in 0..per_axis {
                for bi in 0..per_axis {
                    let (mut neg, mut pos, mut near) = (false, false, false);
                    for k in bk * r..=(bk + 1) * r {
                        for j in bj * r..=(bj + 1) * r {
                            for i in bi * r..=(bi + 1) * r {
                                let v = values[(k * cs + j) * cs + i];
                                neg |= v < 0.0;
                                pos |= v >= 0.0;
                                near |= v.abs() < width;
                            }
                        }
                    }
                    let b = (bk * per_axis + bj) * per_axis + bi;
                    active[b] = (neg && pos) || near;
                    negative[b] = neg;
                }
            }
        }
        Self {
            width,
            per_axis,
            active,
            negative,
        }
    }

    fn block_of(&self, i: usize, j: usize, k: usize) -> usize {
        let f = |x: usize| (x / BAND_BLOCK).min(self.per_axis - 1);
        (f(k) * self.per_axis + f(j)) * self.per_axis + f(i)
    }

    fn values(&self, field: &dyn SdfField, cfg: &GridConfig, lo: [usize; 3], dims: [usize; 3]) -> Vec<f32> {
        let mut out = vec![f32::NAN; dims.iter().product()];
        let hi = [0, 1, 2].map(|a| lo[a] + dims[a] - 1);
        let range = |a: usize| (lo[a].saturating_sub(1) / BAND_BLOCK)..=(hi[a] / BAND_BLOCK).min(self.per_axis - 1);
        for bk in range(2) {
            for bj in range(1) {
                for bi in range(0) {
                    if !self.active[(bk * self.per_axis + bj) * self.per_axis + bi] {
                        continue;
                    }
                    let b = [bi, bj, bk];
                    let s_lo = [0, 1, 2].map(|a| (b[a] * BAND_BLOCK).max(lo[a]));
                    let s_hi = [0, 1, 2].map(|a| ((b[a] + 1) * BAND_BLOCK).min(hi[a]));
                    if (0..3).any(|a| s_lo[a] > s_hi[a]) {
                        continue;
                    }
                    let sd = [0, 1, 2].map(|a| s_hi[a] - s_lo[a] + 1);
                    let vals = field.eval_block(cfg, s_lo, sd);
                    let mut it = vals.into_iter();
                    for k in s_lo[2]..=s_hi[2] {
                        for j in s_lo[1]..=s_hi[1] {
                            for i in s_lo[0]..=s_hi[0] {
                                let o = ((k - lo[2]) * dims[1] + (j - lo[1])) * dims[0] + (i - lo[0]);
                                out[o] = it.next().unwrap();
                            }
                        }
                    }
                }
            }
        }
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let o = (k * dims[1] + j) * dims[0] + i;
                    if out[o].is_nan() {
                        let b = self.block_of(lo[0] + i, lo[1] + j, lo[2] + k);
                        out[o] = if self.negative[b] { -self.width } else { self.width };
                    }
                }
            }
        }
        out
    }
}

fn block_values(field: &dyn SdfField, cfg: &GridConfig, band: Option<&Band>, lo: [usize; 3]) -> Vec<f32> {
    let dims = cfg.block_dims(lo);
    match band {
        Some(b) => b.values(field, cfg, lo, dims),
        None => field.eval_block(cfg, lo, dims),
    }
}

fn dense_grid(field: &dyn SdfField, cfg: &GridConfig) -> Vec<f32> {
    let s = cfg.samples();
    let mut grid = vec![0.0f32; s * s * s];
    let blocks: Vec<([usize; 3], Vec<f32>)> = cfg
        .blocks()
        .into_par_iter()
        .map(|lo| (lo, field.eval_block(cfg, lo, cfg.block_dims(lo))))
        .collect();
    scatter(&mut grid, s, cfg, blocks);
    grid
}

fn scatter(grid: &mut [f32], s: usize, cfg: &GridConfig, blocks: Vec<([usize; 3], Vec<f32>)>) {
    for (lo, vals) in blocks {
        let d = cfg.block_dims(lo);
        for k in 0..d[2] {
            for j in 0..d[1] {
                let src = &vals[(k * d[1] + j) * d[0]..(k * d[1] + j + 1) * d[0]];
                let dst = ((lo[2] + k) * s + lo[1] + j) * s + lo[0];
                grid[dst..dst + d[0]].copy_from_slice(src);
            }
        }
    }
}

/// Full `(N+1)^3` sample grid, x fastest, evaluated block by block.
pub fn chunked_grid_eval(field: &dyn SdfField, cfg: &GridConfig) -> Result<Vec<f32>> {
    cfg.validate()?;
    let band = cfg.band.map(|w| Band::new(field, cfg, w));
    let s = cfg.samples();
    let mut grid = vec![0.0f32; s * s * s];
    let blocks: Vec<([usize; 3], Vec<f32>)> = cfg
        .blocks()
        .into_par_iter()
        .map(|lo| (lo, block_values(field, cfg, band.as_ref(), lo)))
        .collect();
    scatter(&mut grid, s, cfg, blocks);
    Ok(grid)
}

const EDGES: [(usize, usize); 12] = {
    let mut out = [(0, 0); 12];
    let mut n = 0;
    let mut axis = 0;
    while axis < 3 {
        let mut c = 0;
        while c < 8 {
            if c & (1 << axis) == 0 {
                out[n] = (c, c | (1 << axis));
                n += 1;
            }
            c += 1;
        }
        axis += 1;
    }
    out
};

fn corner_pos(c: usize) -> Vec3 {
    Vec3::new((c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64)
}

fn edge_between(a: usize, b: usize) -> usize {
    let (a, b) = (a.min(b), a.max(b));
    EDGES.iter().position(|&e| e == (a, b)).expect("adjacent corners")
}

/// Loops and triangles for one inside mask. Triangle entries below 12 are
/// cube edges; `12 + l` is the centroid of loop `l`.
#[derive(Debug, Default)]
struct Case {
    loops: Vec<Vec<u8>>,
    tris: Vec<[u8; 3]>,
}

static TABLE: LazyLock<Vec<Case>> = LazyLock::new(|| (0..256).map(triangulate_case).collect());

fn on_face(e: usize, axis: usize, side: usize) -> bool {
    let (a, b) = EDGES[e];
    (a ^ b) != 1 << axis && (a >> axis) & 1 == side
}

fn share_face(e: usize, f: usize) -> bool {
    (0..3).any(|axis| (0..2).any(|side| on_face(e, axis, side) && on_face(f, axis, side)))
}

fn triangulate_case(mask: usize) -> Case {
    let inside = |c: usize| mask & (1 << c) != 0;
    let mid = |e: usize| (corner_pos(EDGES[e].0) + corner_pos(EDGES[e].1)) * 0.5;
    let mut next = [usize::MAX; 12];
    for axis in 0..3 {
        let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let corner = |ub: usize, uc: usize| (side << axis) | (ub << b) | (uc << c);
            let q = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            let mut normal = Vec3::zeros();
            normal[axis] = if side == 1 { 1.0 } else { -1.0 };
            let e = [0, 1, 2, 3].map(|i| edge_between(q[i], q[(i + 1) % 4]));
            let crossing: Vec<usize> = (0..4).filter(|&i| inside(q[i]) != inside(q[(i + 1) % 4])).collect();
            let mut segments: Vec<(usize, usize, usize)> = Vec::new();
            match crossing.len() {
                2 => {
                    let ins = *q.iter().find(|&&x| inside(x)).unwrap();
                    segments.push((e[crossing[0]], e[crossing[1]], ins));
                }
                4 => {
                    for i in (0..4).filter(|&i| inside(q[i])) {
                        segments.push((e[(i + 3) % 4], e[i], q[i]));
                    }
                }
                _ => {}
            }
            // inside region on the right, seen from outside the cube
            for (ea, eb, ins) in segments {
                let d = mid(eb) - mid(ea);
                let (from, to) = if d.cross(&normal).dot(&(corner_pos(ins) - mid(ea))) > 0.0 {
                    (ea, eb)
                } else {
                    (eb, ea)
                };
                next[from] = to;
            }
        }
    }
    let mut seen = [false; 12];
    let mut case = Case::default();
    for start in 0..12 {
        if next[start] == usize::MAX || seen[start] {
            continue;
        }
        let mut lp = vec![start];
        seen[start] = true;
        let mut cur = next[start];
        while cur != start {
            seen[cur] = true;
            lp.push(cur);
            cur = next[cur];
        }
        // a fan diagonal between two edges of one face could coincide with
        // a diagonal of the neighbouring cell
        let n = lp.len();
        let apex = (0..n).find(|&r| (2..n - 1).all(|i| !share_face(lp[r], lp[(r + i) % n])));
        match apex {
            Some(r) => {
                for i in 1..n - 1 {
                    case.tris.push([lp[r] as u8, lp[(r + i) % n] as u8, lp[(r + i + 1) % n] as u8]);
                }
            }
            None => {
                let c = 12 + case.loops.len() as u8;
                for i in 0..n {
                    case.tris.push([c, lp[i] as u8, lp[(i + 1) % n] as u8]);
                }
            }
        }
        case.loops.push(lp.iter().map(|&e| e as u8).collect());
    }
    case
}

/// Result of [`marching_cubes`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedMesh {
    pub mesh: TriMesh,
    pub colors: Vec<[f32; 3]>,
    pub normals: Vec<Vec3>,
    /// No zero crossing was found.
    pub empty: bool,
    pub resolution: usize,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl ExtractedMesh {
    /// Faces with area at most `1e-12`.
    pub fn degenerate_faces(&self) -> usize {
        (0..self.mesh.faces.len()).filter(|&f| self.mesh.face_area(f) <= 1e-12).count()
    }
}

type BlockTris = (Vec<(usize, [u64; 3])>, Vec<(u64, Vec3)>);

const T_MIN: f64 = 1e-3;

fn mc_block(cfg: &GridConfig, lo: [usize; 3], vals: &[f32]) -> BlockTris {
    let d = cfg.block_dims(lo);
    let n = cfg.resolution;
    let s = cfg.samples() as u64;
    let at = |i: usize, j: usize, k: usize| vals[(k * d[1] + j) * d[0] + i];
    let mut tris = Vec::new();
    let mut verts = BTreeMap::new();
    for k in 0..d[2] - 1 {
        for j in 0..d[1] - 1 {
            for i in 0..d[0] - 1 {
                let corner_val = |c: usize| at(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                let mask = (0..8).fold(0, |m, c| m | ((corner_val(c) < 0.0) as usize) << c);
                if mask == 0 || mask == 255 {
                    continue;
                }
                let (gi, gj, gk) = (lo[0] + i, lo[1] + j, lo[2] + k);
                let cell = (gk * n + gj) * n + gi;
                let edge_key = |verts: &mut BTreeMap<u64, Vec3>, e: usize| -> (u64, Vec3) {
                    let (a, b) = EDGES[e];
                    let axis = (a ^ b).trailing_zeros() as u64;
                    let (ci, cj, ck) = (gi + (a & 1), gj + ((a >> 1) & 1), gk + ((a >> 2) & 1));
                    let key = ((ck as u64 * s + cj as u64) * s + ci as u64) * 3 + axis;
                    let p = *verts.entry(key).or_insert_with(|| {
                        let (va, vb) = (corner_val(a) as f64, corner_val(b) as f64);
                        let t = (va / (va - vb)).clamp(T_MIN, 1.0 - T_MIN);
                        let pa = cfg.point(ci, cj, ck);
                        let mut pb = pa;
                        pb[axis as usize] = cfg.coord(axis as usize, [ci, cj, ck][axis as usize] + 1);
                        pa + (pb - pa) * t
                    });
                    (key, p)
                };
                let case = &TABLE[mask];
                let mut centers = Vec::with_capacity(case.loops.len());
                for (l, lp) in case.loops.iter().enumerate() {
                    let mut sum = Vec3::zeros();
                    for &e in lp {
                        sum += edge_key(&mut verts, e as usize).1;
                    }
                    centers.push((s * s * s * 3 + cell as u64 * 4 + l as u64, sum / lp.len() as f64));
                }
                for tri in &case.tris {
                    let keys = tri.map(|e| {
                        if e < 12 {
                            edge_key(&mut verts, e as usize).0
                        } else {
                            let (key, p) = centers[e as usize - 12];
                            verts.entry(key).or_insert(p);
                            key
                        }
                    });
                    tris.push((cell, keys));
                }
            }
        }
    }
    (tris, verts.into_iter().collect())
}

/// Extract the zero level set. Vertices are welded by grid edge, numbered
/// in edge order and faces are ordered by cell, so the output does not
/// depend on the chunk size. Colors come from the field at the vertices
/// and normals from central differences with a half-cell step.
pub fn marching_cubes(field: &dyn SdfField, cfg: &GridConfig) -> Result<ExtractedMesh> {
    cfg.validate()?;
    let band = cfg.band.map(|w| Band::new(field, cfg, w));
    let blocks: Vec<BlockTris> = cfg
        .blocks()
        .into_par_iter()
        .map(|lo| {
            let vals = block_values(field, cfg, band.as_ref(), lo);
            mc_block(cfg, lo, &vals)
        })
        .collect();
    let mut tris = Vec::new();
    let mut verts = BTreeMap::new();
    for (t, v) in blocks {
        tris.extend(t);
        for (key, p) in v {
            verts.entry(key).or_insert(p);
        }
    }
    tris.sort_by_key(|t| t.0);
    let index: BTreeMap<u64, u32> = verts.keys().enumerate().map(|(i, &k)| (k, i as u32)).collect();
    let vertices: Vec<Vec3> = verts.into_values().collect();
    let faces: Vec<[u32; 3]> = tris.iter().map(|(_, k)| k.map(|e| index[&e])).collect();
    let mesh = TriMesh::new(vertices, faces)?;
    let empty = mesh.faces.is_empty();
    let normals = if empty { Vec::new() } else { field_normals(field, &mesh, 0.5 * cfg.cell_size().min()) };
    let colors = field.colors(&mesh.vertices);
    Ok(ExtractedMesh {
        mesh,
        colors,
        normals,
        empty,
        resolution: cfg.resolution,
        lo: cfg.lo,
        hi: cfg.hi,
    })
}

fn field_normals(field: &dyn SdfField, mesh: &TriMesh, h: f64) -> Vec<Vec3> {
    let mut probes = Vec::with_capacity(6 * mesh.vertices.len());
    for v in &mesh.vertices {
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = h;
            probes.push(v + e);
            probes.push(v - e);
        }
    }
    let d = field.distances(&probes);
    let fallback = mesh.vertex_normals();
    (0..mesh.vertices.len())
        .map(|i| {
            let g = Vec3::new(
                d[6 * i] as f64 - d[6 * i + 1] as f64,
                d[6 * i + 2] as f64 - d[6 * i + 3] as f64,
                d[6 * i + 4] as f64 - d[6 * i + 5] as f64,
            );
            let n = g.norm();
            if n > 1e-12 && n.is_finite() {
                g / n
            } else {
                fallback[i]
            }
        })
        .collect()
}

/// Marching cubes over a precomputed `(N+1)^3` grid.
pub fn marching_cubes_grid(values: &[f32], cfg: &GridConfig) -> Result<ExtractedMesh> {
    let s = cfg.samples();
    if values.len() != s * s * s {
        return param_err(format!("grid has {} values, expected {}", values.len(), s * s * s));
    }
    struct Table<'a> {
        values: &'a [f32],
        s: usize,
    }
    impl SdfField for Table<'_> {
        fn distance(&self, _: &Vec3) -> f32 {
            f32::NAN
        }
        fn eval_block(&self, _: &GridConfig, lo: [usize; 3], dims: [usize; 3]) -> Vec<f32> {
            let mut out = Vec::with_capacity(dims.iter().product());
            for k in lo[2]..lo[2] + dims[2] {
                for j in lo[1]..lo[1] + dims[1] {
                    let row = (k * self.s + j) * self.s;
                    out.extend_from_slice(&self.values[row + lo[0]..row + lo[0] + dims[0]]);
                }
            }
            out
        }
    }
    let cfg = GridConfig { band: None, ..cfg.clone() };
    let mut out = marching_cubes(&Table { values, s }, &cfg)?;
    out.normals = out.mesh.vertex_normals();
    Ok(out)
}
