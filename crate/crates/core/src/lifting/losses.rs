//! Supervision for the implicit field: on-surface, inside/outside,
//! eikonal and color terms.
//!
//! Each loss reads a [`FieldOutputs`], so any differentiable field works,
//! including the analytic stubs used in tests.

use serde::{Deserialize, Serialize};

use super::field::FieldOutputs;
use crate::error::{param_err, Result};
use crate::neural::{Scalar, Tape, Tensor, Var};

pub const NORMAL_WEIGHT: f64 = 0.1;
pub const SIGMOID_SHARPNESS: f64 = 50.0;
const NORM_EPS: f64 = 1e-12;

fn rows<T: Scalar>(tape: &Tape<T>, v: Var) -> usize {
    tape.value(v).rows()
}

fn grad_of(out: &FieldOutputs) -> Result<[Var; 3]> {
    out.grad.ok_or_else(|| crate::Error::Param("loss needs input gradients".into()))
}

fn norm<T: Scalar>(tape: &mut Tape<T>, g: [Var; 3]) -> Var {
    let sq = g.map(|c| tape.square(c));
    let s = tape.add(sq[0], sq[1]);
    let s = tape.add(s, sq[2]);
    let s = tape.add_scalar(s, T::of(NORM_EPS));
    tape.sqrt(s)
}

/// `mean |d| + 0.1 mean ||∇d / |∇d| - n||_1`.
pub fn loss_on_surface<T: Scalar>(tape: &mut Tape<T>, out: &FieldOutputs, normals: &[[f64; 3]]) -> Result<Var> {
    let n = rows(tape, out.d);
    if n == 0 || normals.len() != n {
        return param_err("surface loss needs one normal per sample and at least one sample");
    }
    let g = grad_of(out)?;
    let ad = tape.abs(out.d);
    let dist = tape.mean(ad);
    let len = norm(tape, g);
    let mut l1 = None;
    for (a, &ga) in g.iter().enumerate() {
        let unit = tape.div(ga, len);
        let target = tape.leaf(Tensor::new(vec![n, 1], normals.iter().map(|v| T::of(v[a])).collect())?);
        let diff = tape.sub(unit, target);
        let abs = tape.abs(diff);
        l1 = Some(match l1 {
            None => abs,
            Some(acc) => tape.add(acc, abs),
        });
    }
    let normal = tape.mean(l1.unwrap());
    let normal = tape.scale(normal, T::of(NORMAL_WEIGHT));
    Ok(tape.add(dist, normal))
}

/// Binary cross-entropy of `sigmoid(-50 d)` against the inside labels.
pub fn loss_inside_outside<T: Scalar>(tape: &mut Tape<T>, out: &FieldOutputs, inside: &[bool]) -> Result<Var> {
    let n = rows(tape, out.d);
    if n == 0 || inside.len() != n {
        return param_err("inside/outside loss needs one label per sample and at least one sample");
    }
    let logits = tape.scale(out.d, T::of(-SIGMOID_SHARPNESS));
    let targets = inside.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    let bce = tape.bce_with_logits(logits, targets);
    Ok(tape.mean(bce))
}

/// `mean (|∇d| - 1)^2`.
pub fn loss_eikonal<T: Scalar>(tape: &mut Tape<T>, out: &FieldOutputs) -> Result<Var> {
    if rows(tape, out.d) == 0 {
        return param_err("eikonal loss needs at least one sample");
    }
    let g = grad_of(out)?;
    let len = norm(tape, g);
    let e = tape.add_scalar(len, T::of(-1.0));
    let sq = tape.square(e);
    Ok(tape.mean(sq))
}

/// Mean absolute color error over samples and channels.
pub fn loss_color<T: Scalar>(tape: &mut Tape<T>, out: &FieldOutputs, colors: &[[f32; 3]]) -> Result<Var> {
    let n = rows(tape, out.color);
    if n == 0 || colors.len() != n {
        return param_err("color loss needs one color per sample and at least one sample");
    }
    if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
        return param_err("ground-truth colors must lie in [0, 1]");
    }
    let target = tape.leaf(Tensor::new(
        vec![n, 3],
        colors.iter().flatten().map(|&c| T::of(c as f64)).collect(),
    )?);
    let diff = tape.sub(out.color, target);
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

/// Relative weights of the four terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub surface: f64,
    pub inside: f64,
    pub eikonal: f64,
    pub color: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            surface: 1.0,
            inside: 0.2,
            eikonal: 0.1,
            color: 0.5,
        }
    }
}

/// Analytic fields on the tape, for checking the losses.
pub mod stubs {
    use super::*;

    fn column<T: Scalar>(tape: &mut Tape<T>, pts: &[[f64; 3]], a: usize) -> Var {
        let data = pts.iter().map(|p| T::of(p[a])).collect();
        tape.leaf(Tensor::new(vec![pts.len(), 1], data).unwrap())
    }

    fn constant<T: Scalar>(tape: &mut Tape<T>, n: usize, cols: usize, v: f64) -> Var {
        tape.leaf(Tensor::full(&[n, cols], T::of(v)))
    }

    /// Exact sphere distance; gradient built from tape ops.
    pub fn sphere<T: Scalar>(tape: &mut Tape<T>, pts: &[[f64; 3]], center: [f64; 3], radius: f64, color: [f32; 3]) -> FieldOutputs {
        let rel = [0, 1, 2].map(|a| {
            let c = column(tape, pts, a);
            tape.add_scalar(c, T::of(-center[a]))
        });
        let len = norm(tape, rel);
        let d = tape.add_scalar(len, T::of(-radius));
        let grad = rel.map(|r| tape.div(r, len));
        let n = pts.len();
        let cdata = (0..n).flat_map(|_| color.map(|c| T::of(c as f64))).collect();
        let color = tape.leaf(Tensor::new(vec![n, 3], cdata).unwrap());
        FieldOutputs { d, color, grad: Some(grad) }
    }

    /// `d = 2 x_0`.
    pub fn slope2<T: Scalar>(tape: &mut Tape<T>, pts: &[[f64; 3]]) -> FieldOutputs {
        let n = pts.len();
        let x = column(tape, pts, 0);
        let d = tape.scale(x, T::of(2.0));
        let grad = [constant(tape, n, 1, 2.0), constant(tape, n, 1, 0.0), constant(tape, n, 1, 0.0)];
        let color = constant(tape, n, 3, 0.5);
        FieldOutputs { d, color, grad: Some(grad) }
    }

    /// `d ≡ value`, zero gradient, constant color.
    pub fn constant_field<T: Scalar>(tape: &mut Tape<T>, n: usize, value: f64, color: f64) -> FieldOutputs {
        let d = constant(tape, n, 1, value);
        let color = constant(tape, n, 3, color);
        let grad = [0, 1, 2].map(|_| constant(tape, n, 1, 0.0));
        FieldOutputs { d, color, grad: Some(grad) }
    }
}

#[cfg(test)]
mod tests {
    use super::stubs::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| loop {
                let p = [0, 1, 2].map(|_| rng.random_range(-hi..hi));
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                if r >= lo && r <= hi {
                    break p;
                }
            })
            .collect()
    }

    fn value(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn surface_loss_minimum_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| {
                let v = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0f64));
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                v.map(|x| 0.5 * x / n)
            })
            .collect();
        let normals: Vec<[f64; 3]> = pts.iter().map(|p| p.map(|x| x / 0.5)).collect();
        let mut tape = Tape::<f64>::new();
        let out = sphere(&mut tape, &pts, [0.0; 3], 0.5, [0.2; 3]);
        let l = loss_on_surface(&mut tape, &out, &normals).unwrap();
        assert!(value(&tape, l) <= 1e-5);

        let mut tape = Tape::<f64>::new();
        let out = constant_field(&mut tape, pts.len(), 1.0, 0.5);
        let d_term = {
            let ad = tape.abs(out.d);
            tape.mean(ad)
        };
        assert_eq!(value(&tape, d_term), 1.0);
        assert!(loss_on_surface(&mut tape, &out, &normals[..3]).is_err());
    }

    #[test]
    fn inside_outside_bounds() {
        let far = random_points(300, 0.6, 1.0, 2);
        let near_center = random_points(300, 0.0, 0.4, 3);
        let pts: Vec<[f64; 3]> = far.iter().chain(&near_center).copied().collect();
        let labels: Vec<bool> = (0..pts.len()).map(|i| i >= far.len()).collect();
        let mut tape = Tape::<f64>::new();
        let out = sphere(&mut tape, &pts, [0.0; 3], 0.5, [0.5; 3]);
        let good = loss_inside_outside(&mut tape, &out, &labels).unwrap();
        // |d| >= 0.1 gives ln(1 + e^-5) = 0.0067 at worst
        assert!(value(&tape, good) <= 0.01);
        let flipped: Vec<bool> = labels.iter().map(|b| !b).collect();
        let bad = loss_inside_outside(&mut tape, &out, &flipped).unwrap();
        // ln(1 + e^5) = 5.0067 at best
        assert!(value(&tape, bad) >= 4.0);

        let mut tape = Tape::<f64>::new();
        let out = constant_field(&mut tape, 4, 0.0, 0.5);
        let l = loss_inside_outside(&mut tape, &out, &[true, false, true, false]).unwrap();
        assert!((value(&tape, l) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn eikonal_values() {
        let pts = random_points(100, 0.05, 1.0, 4);
        let mut tape = Tape::<f64>::new();
        let out = sphere(&mut tape, &pts, [0.0; 3], 0.5, [0.5; 3]);
        let l = loss_eikonal(&mut tape, &out).unwrap();
        assert!(value(&tape, l) <= 1e-10);
        let mut tape = Tape::<f64>::new();
        let out = slope2(&mut tape, &pts);
        let l = loss_eikonal(&mut tape, &out).unwrap();
        assert!((value(&tape, l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn color_values() {
        let pts = random_points(10, 0.0, 1.0, 5);
        let mut tape = Tape::<f64>::new();
        let out = sphere(&mut tape, &pts, [0.0; 3], 0.5, [0.25, 0.5, 0.75]);
        let l = loss_color(&mut tape, &out, &vec![[0.25, 0.5, 0.75]; 10]).unwrap();
        assert_eq!(value(&tape, l), 0.0);
        let out = constant_field(&mut tape, 10, 0.0, 0.5);
        let l = loss_color(&mut tape, &out, &vec![[0.0; 3]; 10]).unwrap();
        assert_eq!(value(&tape, l), 0.5);
        assert!(loss_color(&mut tape, &out, &vec![[1.5, 0.0, 0.0]; 10]).is_err());
    }

    #[test]
    fn empty_sets_are_errors() {
        let mut tape = Tape::<f64>::new();
        let out = constant_field(&mut tape, 0, 0.0, 0.5);
        assert!(loss_on_surface(&mut tape, &out, &[]).is_err());
        assert!(loss_inside_outside(&mut tape, &out, &[]).is_err());
        assert!(loss_eikonal(&mut tape, &out).is_err());
        assert!(loss_color(&mut tape, &out, &[]).is_err());
    }
}
