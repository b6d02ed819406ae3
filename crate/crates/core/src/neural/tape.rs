//! Reverse-mode tape.
//!
//! Ops panic on shape mismatches; model-level code validates shapes first
//! and reports [`crate::Error::Param`].

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::params::ParamStore;
use super::{matmul_acc, matmul_at_acc, matmul_bt_acc, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Up to four weighted texels of a feature map; the output row is the
/// weighted sum of those texel rows.
pub type Taps<T> = [(usize, T); 4];

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Param { name: String, trainable: bool },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRowBias(Var, Var),
    AddSampleBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Softplus(Var, T),
    Sigmoid(Var, T),
    LeakyRelu(Var, T),
    Sin(Var),
    Cos(Var),
    Square(Var),
    Abs(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    ConcatLast(Vec<Var>),
    SliceLast(Var, usize),
    RepeatRows(Var),
    SumBlocks(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    Gather4 { feat: Var, taps: Arc<Vec<Taps<T>>> },
    BceWithLogits(Var, Vec<T>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only computation record.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) {
    assert_eq!(a, b, "{what}: shape mismatch");
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    /// A constant input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Record a named parameter once per tape; later calls return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let (t, trainable) = store
            .entry(name)
            .ok_or_else(|| Error::Param(format!("missing parameter {name:?}")))?;
        let v = self.push(
            t.clone(),
            Op::Param {
                name: name.to_owned(),
                trainable,
            },
        );
        self.params.insert(name.to_owned(), v);
        Ok(v)
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap();
        self.push(out, op)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta.shape(), tb.shape(), "elementwise");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(out, op)
    }

    /// `a[.., k] @ b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-D");
        let k = *sa.last().unwrap();
        assert_eq!(k, sb[0], "matmul inner dimension");
        let m = self.value(a).len() / k.max(1);
        let n = sb[1];
        let mut c = vec![T::zero(); m * n];
        matmul_acc(self.val(a), self.val(b), &mut c, m, k, n);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, c).unwrap(), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `x[.., n] + b[n]` broadcast over leading axes.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let n = self.value(x).cols();
        assert_eq!(self.value(b).len(), n, "bias length");
        let mut out = self.value(x).clone();
        let bv = self.val(b).to_vec();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &bb) in row.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRowBias(x, b))
    }

    /// `x[N, .., C] + b[N, C]`: a per-sample channel bias.
    pub fn add_sample_bias(&mut self, x: Var, b: Var) -> Var {
        let sx = self.shape(x);
        let (n, c) = (sx[0], *sx.last().unwrap());
        assert_eq!(self.shape(b), vec![n, c], "sample bias shape");
        let per = self.value(x).len() / n.max(1);
        let mut out = self.value(x).clone();
        let bv = self.val(b).to_vec();
        for (s, chunk) in out.data_mut().chunks_exact_mut(per.max(1)).enumerate() {
            for row in chunk.chunks_exact_mut(c) {
                for (o, &bb) in row.iter_mut().zip(&bv[s * c..(s + 1) * c]) {
                    *o += bb;
                }
            }
        }
        self.push(out, Op::AddSampleBias(x, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    /// `ln(1 + exp(beta x)) / beta`.
    pub fn softplus(&mut self, a: Var, beta: T) -> Var {
        self.map(a, Op::Softplus(a, beta), |x| softplus(x, beta))
    }

    /// `1 / (1 + exp(-beta x))`.
    pub fn sigmoid(&mut self, a: Var, beta: T) -> Var {
        self.map(a, Op::Sigmoid(a, beta), |x| sigmoid(x * beta))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.map(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * slope })
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.map(a, Op::Sin(a), |x| x.sin())
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.map(a, Op::Cos(a), |x| x.cos())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), |x| x.abs())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        let lead = self.shape(parts[0]);
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[..s.len() - 1], &lead[..lead.len() - 1], "concat leading axes");
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.val(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        *shape.last_mut().unwrap() = total;
        self.push(Tensor::new(shape, data).unwrap(), Op::ConcatLast(parts.to_vec()))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let w = t.cols();
        assert!(start + len <= w, "slice out of range");
        let data = t
            .data()
            .chunks_exact(w)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push(Tensor::new(shape, data).unwrap(), Op::SliceLast(a, start))
    }

    /// Stack `times` copies along the first axis.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let t = self.value(a);
        let mut shape = t.shape().to_vec();
        shape[0] *= times;
        let data = t.data().repeat(times);
        self.push(Tensor::new(shape, data).unwrap(), Op::RepeatRows(a))
    }

    /// Sum `blocks` equal slabs along the first axis; adjoint of
    /// [`Tape::repeat_rows`].
    pub fn sum_blocks(&mut self, a: Var, blocks: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape()[0] % blocks, 0, "sum_blocks extent");
        let per = t.len() / blocks;
        let mut data = t.data()[..per].to_vec();
        for b in 1..blocks {
            for (o, &x) in data.iter_mut().zip(&t.data()[b * per..(b + 1) * per]) {
                *o += x;
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] /= blocks;
        self.push(Tensor::new(shape, data).unwrap(), Op::SumBlocks(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape");
        self.push(t, Op::Reshape(a))
    }

    /// NHWC convolution with HWIO weights `[k, k, cin, cout]` and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x);
        let sw = self.shape(w);
        assert_eq!(sx.len(), 4, "conv input must be NHWC");
        assert_eq!(sw.len(), 4, "conv weight must be HWIO");
        assert_eq!(sx[3], sw[2], "conv input channels");
        let g = ConvGeom::new(&sx, &sw, stride, pad);
        let mut out = vec![T::zero(); g.n * g.ho * g.wo * g.cout];
        if let Some(b) = b {
            let bv = self.val(b);
            assert_eq!(bv.len(), g.cout, "conv bias");
            for row in out.chunks_exact_mut(g.cout) {
                row.copy_from_slice(bv);
            }
        }
        conv_forward(&g, self.val(x), self.val(w), &mut out);
        let shape = vec![g.n, g.ho, g.wo, g.cout];
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Nearest-neighbour 2x upsampling of an NHWC tensor.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let src = self.val(a);
        let mut out = vec![T::zero(); n * 4 * h * w * c];
        for b in 0..n {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let si = ((b * h + y / 2) * w + x / 2) * c;
                    let di = ((b * 2 * h + y) * 2 * w + x) * c;
                    out[di..di + c].copy_from_slice(&src[si..si + c]);
                }
            }
        }
        self.push(Tensor::new(vec![n, 2 * h, 2 * w, c], out).unwrap(), Op::Upsample2x(a))
    }

    /// Rows `sum_k w_k * feat[texel_k, :]` where `feat` is viewed as
    /// `[texels, C]`. Linear in `feat`; tap positions are constants.
    pub fn gather4(&mut self, feat: Var, taps: Arc<Vec<Taps<T>>>) -> Var {
        let c = self.value(feat).cols();
        let f = self.val(feat);
        let mut out = vec![T::zero(); taps.len() * c];
        for (row, tap) in out.chunks_exact_mut(c).zip(taps.iter()) {
            for &(texel, wt) in tap {
                if wt == T::zero() {
                    continue;
                }
                for (o, &v) in row.iter_mut().zip(&f[texel * c..(texel + 1) * c]) {
                    *o += wt * v;
                }
            }
        }
        let rows = taps.len();
        self.push(Tensor::new(vec![rows, c], out).unwrap(), Op::Gather4 { feat, taps })
    }

    /// Elementwise binary cross-entropy with logits against constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<T>) -> Var {
        let t = self.value(logits);
        assert_eq!(t.len(), targets.len(), "bce targets");
        let data = t
            .data()
            .iter()
            .zip(&targets)
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln())
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.push(out, Op::BceWithLogits(logits, targets))
    }

    /// Gradients of a one-element output.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        self.backward_with(out, Tensor::full(self.value(out).shape(), T::one()))
            .expect("scalar cotangent")
    }

    /// Gradients for an arbitrary cotangent of `out`.
    pub fn backward_with(&self, out: Var, cotangent: Tensor<T>) -> Result<Gradients<T>> {
        if cotangent.shape() != self.value(out).shape() {
            return Err(Error::Param(format!(
                "cotangent shape {:?} does not match output {:?}",
                cotangent.shape(),
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(cotangent.into_data());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).unwrap()))
                .collect(),
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| match &n.op {
                    Op::Param { name, trainable } if *trainable && i <= out.0 => Some((name.clone(), i)),
                    _ => None,
                })
                .collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            let slot = &mut grads[v.0];
            let buf = slot.get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(buf);
        };
        let ew = |grads: &mut [Option<Vec<T>>], v: Var, d: &dyn Fn(usize) -> T| {
            acc(grads, v, &mut |buf| {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b += d(k);
                }
            })
        };
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).len() / k.max(1);
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(grads, *a, &mut |buf| matmul_bt_acc(g, bv, buf, m, k, n));
                acc(grads, *b, &mut |buf| matmul_at_acc(av, g, buf, m, k, n));
            }
            Op::Add(a, b) => {
                ew(grads, *a, &|k| g[k]);
                ew(grads, *b, &|k| g[k]);
            }
            Op::Sub(a, b) => {
                ew(grads, *a, &|k| g[k]);
                ew(grads, *b, &|k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                ew(grads, *a, &|k| g[k] * bv[k]);
                ew(grads, *b, &|k| g[k] * av[k]);
            }
            Op::Div(a, b) => {
                let bv = self.val(*b);
                ew(grads, *a, &|k| g[k] / bv[k]);
                ew(grads, *b, &|k| -g[k] * y[k] / bv[k]);
            }
            Op::AddRowBias(x, b) => {
                ew(grads, *x, &|k| g[k]);
                let n = self.value(*b).len();
                acc(grads, *b, &mut |buf| {
                    for row in g.chunks_exact(n) {
                        for (o, &v) in buf.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::AddSampleBias(x, b) => {
                ew(grads, *x, &|k| g[k]);
                let sb = self.shape(*b);
                let (n, c) = (sb[0], sb[1]);
                let per = g.len() / n.max(1);
                acc(grads, *b, &mut |buf| {
                    for (s, chunk) in g.chunks_exact(per.max(1)).enumerate() {
                        for row in chunk.chunks_exact(c) {
                            for (o, &v) in buf[s * c..(s + 1) * c].iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                });
            }
            Op::Scale(a, c) => ew(grads, *a, &|k| g[k] * *c),
            Op::AddScalar(a) => ew(grads, *a, &|k| g[k]),
            Op::Softplus(a, beta) => {
                let av = self.val(*a);
                ew(grads, *a, &|k| g[k] * sigmoid(av[k] * *beta));
            }
            Op::Sigmoid(a, beta) => ew(grads, *a, &|k| g[k] * *beta * y[k] * (T::one() - y[k])),
            Op::LeakyRelu(a, slope) => {
                let av = self.val(*a);
                ew(grads, *a, &|k| if av[k] > T::zero() { g[k] } else { g[k] * *slope });
            }
            Op::Sin(a) => {
                let av = self.val(*a);
                ew(grads, *a, &|k| g[k] * av[k].cos());
            }
            Op::Cos(a) => {
                let av = self.val(*a);
                ew(grads, *a, &|k| -g[k] * av[k].sin());
            }
            Op::Square(a) => {
                let av = self.val(*a);
                ew(grads, *a, &|k| g[k] * (av[k] + av[k]));
            }
            Op::Abs(a) => {
                let av = self.val(*a);
                ew(grads, *a, &|k| {
                    if av[k] > T::zero() {
                        g[k]
                    } else if av[k] < T::zero() {
                        -g[k]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Sqrt(a) => ew(grads, *a, &|k| g[k] / (y[k] + y[k])),
            Op::Sum(a) => ew(grads, *a, &|_| g[0]),
            Op::Mean(a) => {
                let n = T::of(self.value(*a).len() as f64);
                ew(grads, *a, &|_| g[0] / n);
            }
            Op::ConcatLast(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(grads, p, &mut |buf| {
                        for (r, row) in buf.chunks_exact_mut(w).enumerate() {
                            for (o, &v) in row.iter_mut().zip(&g[r * total + off..r * total + off + w]) {
                                *o += v;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceLast(a, start) => {
                let w = self.value(*a).cols();
                let len = node.value.cols();
                acc(grads, *a, &mut |buf| {
                    for (row, grow) in buf.chunks_exact_mut(w).zip(g.chunks_exact(len)) {
                        for (o, &v) in row[*start..*start + len].iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                });
            }
            Op::RepeatRows(a) => {
                let per = self.value(*a).len();
                acc(grads, *a, &mut |buf| {
                    for chunk in g.chunks_exact(per) {
                        for (o, &v) in buf.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SumBlocks(a) => {
                let per = g.len();
                acc(grads, *a, &mut |buf| {
                    for chunk in buf.chunks_exact_mut(per) {
                        for (o, &v) in chunk.iter_mut().zip(g) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Reshape(a) => ew(grads, *a, &|k| g[k]),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let geom = ConvGeom::new(&self.shape(*x), &self.shape(*w), *stride, *pad);
                let (xv, wv) = (self.val(*x), self.val(*w));
                acc(grads, *x, &mut |buf| conv_backward_input(&geom, g, wv, buf));
                acc(grads, *w, &mut |buf| conv_backward_weight(&geom, g, xv, buf));
                if let Some(b) = b {
                    acc(grads, *b, &mut |buf| {
                        for row in g.chunks_exact(geom.cout) {
                            for (o, &v) in buf.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                acc(grads, *a, &mut |buf| {
                    for bi in 0..n {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                let si = ((bi * h + yy / 2) * w + xx / 2) * c;
                                let di = ((bi * 2 * h + yy) * 2 * w + xx) * c;
                                for ch in 0..c {
                                    buf[si + ch] += g[di + ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::Gather4 { feat, taps } => {
                let c = self.value(*feat).cols();
                acc(grads, *feat, &mut |buf| {
                    for (grow, tap) in g.chunks_exact(c).zip(taps.iter()) {
                        for &(texel, wt) in tap {
                            if wt == T::zero() {
                                continue;
                            }
                            for (o, &v) in buf[texel * c..(texel + 1) * c].iter_mut().zip(grow) {
                                *o += wt * v;
                            }
                        }
                    }
                });
            }
            Op::BceWithLogits(a, targets) => {
                let av = self.val(*a);
                ew(grads, *a, &|k| g[k] * (sigmoid(av[k]) - targets[k]));
            }
        }
    }
}

/// Gradients from one backward pass.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded value, if it influenced the output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of trainable parameters that reached the output, by name.
    /// Frozen parameters never appear.
    pub fn params(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter_map(|(name, i)| self.grads[*i].as_ref().map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

pub(crate) fn softplus<T: Scalar>(x: T, beta: T) -> T {
    let z = x * beta;
    if z > T::of(20.0) {
        x
    } else if z < T::of(-20.0) {
        z.exp() / beta
    } else {
        z.exp().ln_1p() / beta
    }
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Self {
        let (n, h, w, cin) = (sx[0], sx[1], sx[2], sx[3]);
        let (k, cout) = (sw[0], sw[3]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            n,
            h,
            w,
            cin,
            k,
            cout,
            stride,
            pad,
            ho,
            wo,
        }
    }

    #[inline]
    fn input_pos(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + kk) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

pub(crate) fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = ((b * g.ho + oy) * g.wo + ox) * g.cout;
                let orow = &mut out[o..o + g.cout];
                for ky in 0..g.k {
                    let Some(iy) = g.input_pos(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.input_pos(ox, kx, g.w) else { continue };
                        let xi = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let wi = (ky * g.k + kx) * g.cin * g.cout;
                        for ci in 0..g.cin {
                            let xv = x[xi + ci];
                            let wrow = &w[wi + ci * g.cout..wi + (ci + 1) * g.cout];
                            for (ov, &wv) in orow.iter_mut().zip(wrow) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input<T: Scalar>(g: &ConvGeom, gout: &[T], w: &[T], gx: &mut [T]) {
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = ((b * g.ho + oy) * g.wo + ox) * g.cout;
                let grow = &gout[o..o + g.cout];
                for ky in 0..g.k {
                    let Some(iy) = g.input_pos(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.input_pos(ox, kx, g.w) else { continue };
                        let xi = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let wi = (ky * g.k + kx) * g.cin * g.cout;
                        for ci in 0..g.cin {
                            let wrow = &w[wi + ci * g.cout..wi + (ci + 1) * g.cout];
                            let mut s = T::zero();
                            for (&gv, &wv) in grow.iter().zip(wrow) {
                                s += gv * wv;
                            }
                            gx[xi + ci] += s;
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight<T: Scalar>(g: &ConvGeom, gout: &[T], x: &[T], gw: &mut [T]) {
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = ((b * g.ho + oy) * g.wo + ox) * g.cout;
                let grow = &gout[o..o + g.cout];
                for ky in 0..g.k {
                    let Some(iy) = g.input_pos(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.input_pos(ox, kx, g.w) else { continue };
                        let xi = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let wi = (ky * g.k + kx) * g.cin * g.cout;
                        for ci in 0..g.cin {
                            let xv = x[xi + ci];
                            if xv == T::zero() {
                                continue;
                            }
                            let wrow = &mut gw[wi + ci * g.cout..wi + (ci + 1) * g.cout];
                            for (wv, &gv) in wrow.iter_mut().zip(grow) {
                                *wv += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        let g = tape.backward(y);
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn frozen_params_get_no_entry() {
        let mut store = ParamStore::<f64>::new(0);
        store.insert("a", t(&[1], &[2.0]), true);
        store.insert("b", t(&[1], &[5.0]), false);
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let y = tape.mul(a, b);
        let grads = tape.backward(y).params();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["a"].item(), 5.0);
    }

    #[test]
    fn param_recorded_once() {
        let mut store = ParamStore::<f64>::new(0);
        store.insert("a", t(&[1], &[2.0]), true);
        let mut tape = Tape::new();
        let a1 = tape.param(&store, "a").unwrap();
        let a2 = tape.param(&store, "a").unwrap();
        assert_eq!(a1, a2);
        assert!(tape.param(&store, "missing").is_err());
    }

    #[test]
    fn cotangent_shape_checked() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.square(x);
        assert!(tape.backward_with(y, t(&[3], &[1.0; 3])).is_err());
        let g = tape.backward_with(y, t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 3 * 2).map(|i| i as f64 - 7.0).collect();
        let x = tape.leaf(t(&[2, 3, 3, 2], &data));
        let w = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, w, None, 1, 0);
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_matches_direct_formula() {
        let mut tape = Tape::<f64>::new();
        let xd: Vec<f64> = (0..5 * 5).map(|i| (i as f64 * 0.3).sin()).collect();
        let wd: Vec<f64> = (0..9).map(|i| i as f64 * 0.1).collect();
        let x = tape.leaf(t(&[1, 5, 5, 1], &xd));
        let w = tape.leaf(t(&[3, 3, 1, 1], &wd));
        let y = tape.conv2d(x, w, None, 2, 1);
        assert_eq!(tape.shape(y), vec![1, 3, 3, 1]);
        for oy in 0..3 {
            for ox in 0..3 {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                        if (0..5).contains(&iy) && (0..5).contains(&ix) {
                            s += xd[(iy * 5 + ix) as usize] * wd[ky * 3 + kx];
                        }
                    }
                }
                assert!((tape.value(y).data()[oy * 3 + ox] - s).abs() < 1e-12);
            }
        }
    }
}
