use std::rc::Rc;

use crate::broadcast::{broadcast_shape, Layout};
use crate::error::Result;
use crate::tensor::Tensor;

/// The binary elementwise operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    #[inline]
    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        }
    }
}

/// Elementwise `a op b` with trailing-dimension broadcasting.
pub fn elementwise(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = broadcast_shape(op.name(), a.shape(), b.shape())?;
    let la = Rc::new(Layout::new(&shape, a.shape()));
    let lb = Rc::new(Layout::new(&shape, b.shape()));
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = match (&*la, &*lb) {
        (Layout::Same, Layout::Same) => ad.iter().zip(bd).map(|(&x, &y)| op.apply(x, y)).collect(),
        _ => (0..n)
            .map(|i| op.apply(ad[la.offset(i)], bd[lb.offset(i)]))
            .collect(),
    };

    let (a2, b2) = (a.clone(), b.clone());
    Ok(Tensor::from_op(data, shape, vec![a.clone(), b.clone()], move |g| {
        let (ad, bd) = (a2.data(), b2.data());
        let ga = a2.requires_grad().then(|| {
            let local: Vec<f64> = match op {
                BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                BinaryOp::Mul => g.iter().enumerate().map(|(i, gi)| gi * bd[lb.offset(i)]).collect(),
                BinaryOp::Div => g.iter().enumerate().map(|(i, gi)| gi / bd[lb.offset(i)]).collect(),
            };
            la.reduce(&local, a2.numel())
        });
        let gb = b2.requires_grad().then(|| {
            let local: Vec<f64> = match op {
                BinaryOp::Add => g.to_vec(),
                BinaryOp::Sub => g.iter().map(|v| -v).collect(),
                BinaryOp::Mul => g.iter().enumerate().map(|(i, gi)| gi * ad[la.offset(i)]).collect(),
                BinaryOp::Div => g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let y = bd[lb.offset(i)];
                        -gi * ad[la.offset(i)] / (y * y)
                    })
                    .collect(),
            };
            lb.reduce(&local, b2.numel())
        });
        vec![ga, gb]
    }))
}

/// Applies `f` elementwise; `df(x, y)` is the derivative given input and output.
fn unary(
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let out_vals = Rc::new(data.clone());
    let x2 = x.clone();
    Tensor::from_op(data, x.shape().to_vec(), vec![x.clone()], move |g| {
        let grad = g
            .iter()
            .zip(x2.data())
            .zip(out_vals.iter())
            .map(|((gi, &xi), &yi)| gi * df(xi, yi))
            .collect();
        vec![Some(grad)]
    })
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(BinaryOp::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(BinaryOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(BinaryOp::Mul, self, other)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(BinaryOp::Div, self, other)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, move |v| v + c, |_, _| 1.0)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&self) -> Tensor {
        unary(self, f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn sin(&self) -> Tensor {
        unary(self, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor {
        unary(self, f64::cos, |x, _| -x.sin())
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(
            self,
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        unary(
            self,
            |x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh()),
            |x, _| {
                let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
            },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary(
            self,
            move |v| v.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_matches_direct_arithmetic() {
        let a = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::new(vec![3.0, 4.0], &[2]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn multiplying_by_ones_is_identity() {
        let x = Tensor::new(vec![0.5, -1.25, 3.0, 7.5], &[2, 2]).unwrap();
        assert_eq!(x.mul(&x.ones_like()).unwrap().data(), x.data());
    }

    #[test]
    fn mismatch_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4]);
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn broadcast_equals_explicit_tiling() {
        let a = Tensor::new((0..6).map(|v| v as f64).collect(), &[2, 3]).unwrap();
        let b = Tensor::new(vec![10.0, 20.0, 30.0], &[3]).unwrap();
        let tiled = Tensor::new(vec![10.0, 20.0, 30.0, 10.0, 20.0, 30.0], &[2, 3]).unwrap();
        assert_eq!(a.mul(&b).unwrap().data(), a.mul(&tiled).unwrap().data());
        let col = Tensor::new(vec![1.0, 2.0], &[2, 1]).unwrap();
        let col_tiled = Tensor::new(vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0], &[2, 3]).unwrap();
        assert_eq!(a.sub(&col).unwrap().data(), a.sub(&col_tiled).unwrap().data());
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }
}
