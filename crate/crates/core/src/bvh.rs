//! Median-split AABB tree over triangles for exact closest-point queries.

use crate::mesh::{closest_point_on_triangle, TriMesh, Vec3};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: Vec3::repeat(f64::INFINITY),
            hi: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn dist2(&self, p: &Vec3) -> f64 {
        let d = (self.lo - p).sup(&(p - self.hi)).sup(&Vec3::zeros());
        d.norm_squared()
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Result of a closest-point query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest {
    pub face: usize,
    pub point: Vec3,
    pub bary: [f64; 3],
    pub dist2: f64,
}

/// Immutable triangle hierarchy. Holds its own copy of the triangles.
#[derive(Debug, Clone)]
pub struct TriangleBvh {
    tris: Vec<[Vec3; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl TriangleBvh {
    pub fn build(mesh: &TriMesh) -> Self {
        let tris: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.tri(f)).collect();
        let centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<usize> = (0..tris.len()).collect();
        let mut nodes = Vec::new();
        if !tris.is_empty() {
            build_node(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        }
        Self { tris, order, nodes }
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    /// Closest surface point. Ties in distance resolve to the lowest face index.
    pub fn nearest(&self, p: &Vec3) -> Option<Nearest> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<Nearest> = None;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if let Some(b) = &best {
                if node.bounds().dist2(p) > b.dist2 {
                    continue;
                }
            }
            match *node {
                Node::Leaf { start, end, .. } => {
                    for &f in &self.order[start..end] {
                        let [a, b, c] = &self.tris[f];
                        let (q, bary) = closest_point_on_triangle(p, a, b, c);
                        let d2 = (q - p).norm_squared();
                        let better = match &best {
                            None => true,
                            Some(cur) => d2 < cur.dist2 || (d2 == cur.dist2 && f < cur.face),
                        };
                        if better {
                            best = Some(Nearest {
                                face: f,
                                point: q,
                                bary,
                                dist2: d2,
                            });
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[left].bounds().dist2(p);
                    let dr = self.nodes[right].bounds().dist2(p);
                    // visit the nearer child first
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best
    }
}

fn build_node(
    tris: &[[Vec3; 3]],
    centroids: &[Vec3],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for &f in &order[start..end] {
        for v in &tris[f] {
            bounds.grow(v);
        }
        cbounds.grow(&centroids[f]);
    }
    let idx = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { bounds, start, end });
        return idx;
    }
    let ext = cbounds.hi - cbounds.lo;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = (start + end) / 2;
    order[start..end].sort_by(|&a, &b| {
        centroids[a][axis]
            .total_cmp(&centroids[b][axis])
            .then(a.cmp(&b))
    });
    nodes.push(Node::Leaf { bounds, start, end }); // placeholder
    let left = build_node(tris, centroids, order, start, mid, nodes);
    let right = build_node(tris, centroids, order, mid, end, nodes);
    nodes[idx] = Node::Inner {
        bounds,
        left,
        right,
    };
    idx
}

/// Exhaustive closest-point search; reference for [`TriangleBvh::nearest`].
pub fn nearest_brute_force(mesh: &TriMesh, p: &Vec3) -> Option<Nearest> {
    let mut best: Option<Nearest> = None;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.tri(f);
        let (q, bary) = closest_point_on_triangle(p, &a, &b, &c);
        let d2 = (q - p).norm_squared();
        if best.as_ref().is_none_or(|b| d2 < b.dist2) {
            best = Some(Nearest {
                face: f,
                point: q,
                bary,
                dist2: d2,
            });
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::uv_sphere;
    use rand::{Rng, SeedableRng};

    #[test]
    fn bvh_matches_brute_force() {
        let mut mesh = uv_sphere(Vec3::zeros(), 0.5, 14, 20);
        mesh.append(&uv_sphere(Vec3::new(0.8, 0.1, 0.0), 0.3, 9, 11));
        let bvh = TriangleBvh::build(&mesh);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let p = Vec3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
            );
            let a = bvh.nearest(&p).unwrap();
            let b = nearest_brute_force(&mesh, &p).unwrap();
            assert!(a.face == b.face || (a.dist2 - b.dist2).abs() <= 1e-9);
        }
    }
}
