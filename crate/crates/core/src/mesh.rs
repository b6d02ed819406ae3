//! Triangle meshes: topology audits, generalized winding numbers, closest
//! points, area-weighted sampling and OBJ/PLY exchange.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Indexed triangle mesh in meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

/// Edge-incidence summary of a mesh.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EdgeAudit {
    pub edges: usize,
    /// Edges used by exactly one face.
    pub boundary: usize,
    /// Edges used by more than two faces.
    pub non_manifold: usize,
    /// Interior edges traversed in the same direction by both faces.
    pub misoriented: usize,
}

impl EdgeAudit {
    pub fn is_closed_manifold(&self) -> bool {
        self.boundary == 0 && self.non_manifold == 0 && self.misoriented == 0
    }
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::Mesh(format!("face {f:?} indexes past {n} vertices")));
        }
        Ok(Self { vertices, faces })
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    #[inline]
    pub fn tri(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Unnormalized face normal (twice the area vector).
    pub fn face_cross(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.tri(f);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * self.face_cross(f).norm()
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let n = self.face_cross(f);
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::zeros()
        }
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for (f, face) in self.faces.iter().enumerate() {
            let n = self.face_cross(f);
            for &i in face {
                acc[i as usize] += n;
            }
        }
        acc.into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    n
                }
            })
            .collect()
    }

    pub fn edge_audit(&self) -> EdgeAudit {
        // undirected edge -> (count, signed direction sum)
        let mut edges: HashMap<(u32, u32), (u32, i32)> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let (key, dir) = if a < b { ((a, b), 1) } else { ((b, a), -1) };
                let e = edges.entry(key).or_insert((0, 0));
                e.0 += 1;
                e.1 += dir;
            }
        }
        let mut audit = EdgeAudit {
            edges: edges.len(),
            ..Default::default()
        };
        for (count, dir) in edges.values() {
            match count {
                1 => audit.boundary += 1,
                2 if *dir != 0 => audit.misoriented += 1,
                2 => {}
                _ => audit.non_manifold += 1,
            }
        }
        audit
    }

    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.edge_audit().is_closed_manifold()
    }

    pub fn require_watertight(&self) -> Result<()> {
        if self.faces.is_empty() {
            return Err(Error::Mesh("mesh has no faces".into()));
        }
        let audit = self.edge_audit();
        if !audit.is_closed_manifold() {
            return Err(Error::Mesh(format!("mesh is not watertight: {audit:?}")));
        }
        Ok(())
    }

    /// V - E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &i in f {
                used[i as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_audit().edges as i64 + self.faces.len() as i64
    }

    /// Number of face-connected components (union-find over shared vertices).
    pub fn connected_components(&self) -> usize {
        let mut uf = UnionFind::new(self.vertices.len());
        for f in &self.faces {
            uf.union(f[0] as usize, f[1] as usize);
            uf.union(f[1] as usize, f[2] as usize);
        }
        let mut roots: Vec<usize> = self
            .faces
            .iter()
            .map(|f| uf.find(f[0] as usize))
            .collect();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    /// Generalized winding number at `p`; ~1 inside, ~0 outside a closed
    /// outward-oriented mesh.
    pub fn winding_number(&self, p: &Vec3) -> f64 {
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            let [a, b, c] = self.tri(f);
            total += solid_angle(&(a - p), &(b - p), &(c - p));
        }
        total / (4.0 * std::f64::consts::PI)
    }

    pub fn transformed(&self, f: impl Fn(&Vec3) -> Vec3) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Append another mesh, offsetting its indices.
    pub fn append(&mut self, other: &TriMesh) {
        let off = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
    }
}

/// Signed solid angle subtended by triangle (a, b, c) seen from the origin
/// (Van Oosterom and Strackee).
pub fn solid_angle(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
    let det = a.dot(&b.cross(c));
    let denom = la * lb * lc + a.dot(b) * lc + b.dot(c) * la + c.dot(a) * lb;
    2.0 * det.atan2(denom)
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Closest point on triangle (a, b, c) to p. Returns the point and its
/// barycentric coordinates (Ericson, Real-Time Collision Detection 5.1.5).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

/// A point drawn from a mesh surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub point: Vec3,
    pub normal: Vec3,
    pub face: usize,
    pub bary: [f64; 3],
}

/// Cumulative face areas for area-weighted sampling.
#[derive(Debug, Clone)]
pub struct AreaSampler {
    cdf: Vec<f64>,
}

impl AreaSampler {
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        let mut acc = 0.0;
        let cdf: Vec<f64> = (0..mesh.faces.len())
            .map(|f| {
                acc += mesh.face_area(f);
                acc
            })
            .collect();
        if acc <= 0.0 {
            return Err(Error::Mesh("cannot sample a mesh with zero area".into()));
        }
        Ok(Self { cdf })
    }

    pub fn sample<R: Rng + ?Sized>(&self, mesh: &TriMesh, rng: &mut R) -> SurfaceSample {
        let total = *self.cdf.last().unwrap();
        let u: f64 = rng.random::<f64>() * total;
        let face = self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let bary = [1.0 - s, s * (1.0 - r2), s * r2];
        let [a, b, c] = mesh.tri(face);
        SurfaceSample {
            point: a * bary[0] + b * bary[1] + c * bary[2],
            normal: mesh.face_normal(face),
            face,
            bary,
        }
    }
}

/// Draw `n` area-weighted surface samples.
pub fn sample_surface<R: Rng + ?Sized>(
    mesh: &TriMesh,
    n: usize,
    rng: &mut R,
) -> Result<Vec<SurfaceSample>> {
    let sampler = AreaSampler::new(mesh)?;
    Ok((0..n).map(|_| sampler.sample(mesh, rng)).collect())
}

/// Axis-aligned unit-edge cube centered at `center`, outward-oriented.
pub fn cube(center: Vec3, edge: f64) -> TriMesh {
    let h = edge * 0.5;
    let vertices = (0..8)
        .map(|i| {
            center
                + Vec3::new(
                    if i & 1 == 0 { -h } else { h },
                    if i & 2 == 0 { -h } else { h },
                    if i & 4 == 0 { -h } else { h },
                )
        })
        .collect();
    let faces = vec![
        [0, 2, 1],
        [1, 2, 3],
        [4, 5, 6],
        [5, 7, 6],
        [0, 1, 4],
        [1, 5, 4],
        [2, 6, 3],
        [3, 6, 7],
        [0, 4, 2],
        [2, 4, 6],
        [1, 3, 5],
        [3, 7, 5],
    ];
    TriMesh { vertices, faces }
}

/// UV sphere, outward-oriented and watertight.
pub fn uv_sphere(center: Vec3, radius: f64, rings: usize, segments: usize) -> TriMesh {
    let mut vertices = vec![center + Vec3::new(0.0, radius, 0.0)];
    for r in 1..rings {
        let phi = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let th = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push(
                center
                    + radius * Vec3::new(phi.sin() * th.cos(), phi.cos(), -phi.sin() * th.sin()),
            );
        }
    }
    vertices.push(center - Vec3::new(0.0, radius, 0.0));
    let south = (vertices.len() - 1) as u32;
    let ring = |r: usize, s: usize| (1 + r * segments + s % segments) as u32;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(0, s), ring(0, s + 1)]);
    }
    for r in 0..rings - 2 {
        for s in 0..segments {
            let (a, b) = (ring(r, s), ring(r, s + 1));
            let (c, d) = (ring(r + 1, s), ring(r + 1, s + 1));
            faces.push([a, c, b]);
            faces.push([b, c, d]);
        }
    }
    for s in 0..segments {
        faces.push([south, ring(rings - 2, s + 1), ring(rings - 2, s)]);
    }
    TriMesh { vertices, faces }
}

/// Write OBJ with optional per-vertex colors (`v x y z r g b`).
pub fn write_obj(path: &Path, mesh: &TriMesh, colors: Option<&[[f32; 3]]>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_obj_to(&mut w, mesh, colors)?;
    w.flush()?;
    Ok(())
}

pub fn write_obj_to<W: Write>(w: &mut W, mesh: &TriMesh, colors: Option<&[[f32; 3]]>) -> Result<()> {
    for (i, v) in mesh.vertices.iter().enumerate() {
        match colors {
            Some(c) => {
                let c = c[i];
                writeln!(w, "v {:.9} {:.9} {:.9} {:.6} {:.6} {:.6}", v.x, v.y, v.z, c[0], c[1], c[2])?
            }
            None => writeln!(w, "v {:.9} {:.9} {:.9}", v.x, v.y, v.z)?,
        }
    }
    for f in &mesh.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

/// Read a triangle (or fan-triangulated polygon) OBJ. Vertex colors, if
/// present on every vertex, are returned alongside.
pub fn read_obj(path: &Path) -> Result<(TriMesh, Option<Vec<[f32; 3]>>)> {
    let file = std::fs::File::open(path)?;
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut faces = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(file).lines() {
        let line = line?;
        let bad = |msg: &str| Error::Format {
            offset,
            msg: format!("{msg}: {line:?}"),
        };
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let vals: Vec<f64> = it
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("bad vertex"))?;
                if vals.len() < 3 {
                    return Err(bad("vertex needs 3 coordinates"));
                }
                vertices.push(Vec3::new(vals[0], vals[1], vals[2]));
                if vals.len() >= 6 {
                    colors.push([vals[3] as f32, vals[4] as f32, vals[5] as f32]);
                }
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|s| {
                        s.split('/')
                            .next()
                            .and_then(|i| i.parse::<i64>().ok())
                            .filter(|&i| i >= 1)
                            .map(|i| (i - 1) as u32)
                    })
                    .collect::<Option<_>>()
                    .ok_or_else(|| bad("bad face"))?;
                if idx.len() < 3 {
                    return Err(bad("face needs 3 indices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
        offset += line.len() as u64 + 1;
    }
    let colors = (colors.len() == vertices.len() && !colors.is_empty()).then_some(colors);
    Ok((TriMesh::new(vertices, faces)?, colors))
}

/// Write binary little-endian PLY with optional normals and 8-bit colors.
pub fn write_ply(
    path: &Path,
    mesh: &TriMesh,
    normals: Option<&[Vec3]>,
    colors: Option<&[[f32; 3]]>,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ply\nformat binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if normals.is_some() {
        writeln!(w, "property float nx\nproperty float ny\nproperty float nz")?;
    }
    if colors.is_some() {
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(w, "element face {}", mesh.faces.len())?;
    writeln!(w, "property list uchar int vertex_indices\nend_header")?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for x in [v.x, v.y, v.z] {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        if let Some(n) = normals {
            for x in [n[i].x, n[i].y, n[i].z] {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        if let Some(c) = colors {
            for x in c[i] {
                w.write_all(&[(x.clamp(0.0, 1.0) * 255.0).round() as u8])?;
            }
        }
    }
    for f in &mesh.faces {
        w.write_all(&[3u8])?;
        for &i in f {
            w.write_all(&(i as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn cube_and_sphere_are_closed_and_outward() {
        for m in [cube(Vec3::zeros(), 1.0), uv_sphere(Vec3::zeros(), 1.0, 12, 16)] {
            assert!(m.is_watertight());
            assert_eq!(m.euler_characteristic(), 2);
            for f in 0..m.faces.len() {
                let [a, b, c] = m.tri(f);
                let centroid = (a + b + c) / 3.0;
                assert!(m.face_cross(f).dot(&centroid) > 0.0);
            }
        }
    }

    #[test]
    fn winding_number_labels_containment() {
        let m = cube(Vec3::zeros(), 1.0);
        assert!((m.winding_number(&Vec3::zeros()) - 1.0).abs() < 1e-9);
        assert!(m.winding_number(&Vec3::new(2.0, 0.0, 0.0)).abs() < 1e-9);
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        );
        let (q, bary) = closest_point_on_triangle(&Vec3::new(0.2, 0.2, 1.0), &a, &b, &c);
        assert!((q - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-12);
        assert!((bary[0] - 0.6).abs() < 1e-12);
        let (q, _) = closest_point_on_triangle(&Vec3::new(-1.0, -1.0, 0.0), &a, &b, &c);
        assert_eq!(q, a);
        let (q, bary) = closest_point_on_triangle(&Vec3::new(1.0, 1.0, 0.0), &a, &b, &c);
        assert!((q - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-12);
        assert!((bary[1] - 0.5).abs() < 1e-12 && (bary[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn area_weighted_sampling_frequency() {
        // two triangles with areas 1:3
        let m = TriMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(2.0, 0.0, 0.0),
                Vec3::new(5.0, 0.0, 0.0),
                Vec3::new(2.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = sample_surface(&m, 100_000, &mut rng).unwrap();
        let frac = s.iter().filter(|x| x.face == 0).count() as f64 / s.len() as f64;
        assert!((frac - 0.25).abs() < 0.02, "{frac}");
    }

    #[test]
    fn obj_round_trip_preserves_colors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.obj");
        let m = cube(Vec3::new(0.1, 0.2, 0.3), 0.5);
        let colors: Vec<[f32; 3]> = (0..8).map(|i| [i as f32 / 8.0, 0.5, 1.0]).collect();
        write_obj(&p, &m, Some(&colors)).unwrap();
        let (back, c) = read_obj(&p).unwrap();
        assert_eq!(back.faces, m.faces);
        assert_eq!(c.unwrap(), colors);
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn components_counted() {
        let mut m = cube(Vec3::zeros(), 1.0);
        m.append(&cube(Vec3::new(3.0, 0.0, 0.0), 1.0));
        assert_eq!(m.connected_components(), 2);
    }
}
