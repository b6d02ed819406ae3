//! Exact nearest-neighbour search over 3D points.

use crate::mesh::Vec3;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

const LEAF: usize = 12;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    index: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut index: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build(points, &mut index, 0, points.len(), &mut nodes);
        }
        Self {
            points: points.to_vec(),
            index,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Vec3 {
        &self.points[i]
    }

    /// Index of and squared distance to the nearest point. Equal distances
    /// resolve to the lowest index.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, ni: usize, q: &Vec3, best: &mut (usize, f64)) {
        match self.nodes[ni] {
            Node::Leaf { start, end } => {
                for &i in &self.index[start..end] {
                    let d2 = (self.points[i] - q).norm_squared();
                    if d2 < best.1 || (d2 == best.1 && i < best.0) {
                        *best = (i, d2);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn build(points: &[Vec3], index: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if end - start <= LEAF {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &i in &index[start..end] {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let ext = hi - lo;
    let axis = ext.imax();
    let mid = (start + end) / 2;
    index[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
    });
    let value = points[index[mid]][axis];
    nodes.push(Node::Leaf { start, end });
    let left = build(points, index, start, mid, nodes);
    let right = build(points, index, mid, end, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}
