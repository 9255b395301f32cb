//! Pointwise unary/binary ops with trailing-dimension broadcasting.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, broadcast_strides, Scalar};

/// Selector for [`Var::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Min2,
    Max2,
    Abs,
    Exp,
    Log,
    Sigmoid,
    Gelu,
    Relu,
    Clamp { min: f64, max: f64 },
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// tanh-approximated GELU and its derivative.
pub(crate) fn gelu_fwd<F: Scalar>(x: F) -> F {
    let k = F::lit(GELU_K);
    let c = F::lit(GELU_C);
    let half = F::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * x * (F::one() + t)
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let k = F::lit(GELU_K);
    let c = F::lit(GELU_C);
    let half = F::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::lit(3.0) * c * x * x)
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Visits `(out, ia, ib)` index triples of a broadcast binary op.
fn for_each_broadcast(
    sa: &[usize],
    sb: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let ta = broadcast_strides(sa, out);
    let tb = broadcast_strides(sb, out);
    let rank = out.len();
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += ta[d];
            ib += tb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= ta[d] * out[d];
            ib -= tb[d] * out[d];
            idx[d] = 0;
        }
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    /// Single entry point over [`OpKind`]; `other` is required for binary kinds.
    pub fn elementwise(&self, kind: OpKind, other: Option<Var<'t, F>>) -> Result<Var<'t, F>> {
        let need = |o: Option<Var<'t, F>>| {
            o.ok_or_else(|| Error::InvalidArgument(format!("{kind:?} needs a second operand")))
        };
        match kind {
            OpKind::Add => self.add(need(other)?),
            OpKind::Sub => self.sub(need(other)?),
            OpKind::Mul => self.mul(need(other)?),
            OpKind::Div => self.div(need(other)?),
            OpKind::Min2 => self.min2(need(other)?),
            OpKind::Max2 => self.max2(need(other)?),
            OpKind::Abs => self.abs(),
            OpKind::Exp => self.exp(),
            OpKind::Log => self.log(),
            OpKind::Sigmoid => self.sigmoid(),
            OpKind::Gelu => self.gelu(),
            OpKind::Relu => self.relu(),
            OpKind::Clamp { min, max } => self.clamp(min, max),
        }
    }

    /// Pointwise map with derivative `df(x, y)`.
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + 'static,
    ) -> Result<Var<'t, F>> {
        let x = self.value();
        let y: Vec<F> = x.iter().map(|&v| f(v)).collect();
        let yv = std::rc::Rc::new(y.clone());
        let id = self.id;
        self.tape.push_op(op, y, self.shape(), &[*self], move |g, sink| {
            if let Some(slot) = sink.slot(id) {
                for i in 0..slot.len() {
                    slot[i] = slot[i] + g[i] * df(x[i], yv[i]);
                }
            }
        })
    }

    fn binary(
        &self,
        op: &'static str,
        other: Var<'t, F>,
        f: impl Fn(F, F) -> F,
        dfa: impl Fn(F, F, F) -> F + 'static,
        dfb: impl Fn(F, F, F) -> F + 'static,
    ) -> Result<Var<'t, F>> {
        if !self.same_tape(&other) {
            return Err(Error::InvalidArgument(format!("{op}: operands on different tapes")));
        }
        let sa = self.shape();
        let sb = other.shape();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let a = self.value();
        let b = other.value();
        let n: usize = out_shape.iter().product();
        let mut y = vec![F::zero(); n];
        let same = sa == out_shape && sb == out_shape;
        if same {
            for i in 0..n {
                y[i] = f(a[i], b[i]);
            }
        } else {
            for_each_broadcast(&sa, &sb, &out_shape, |o, ia, ib| y[o] = f(a[ia], b[ib]));
        }
        let yv = std::rc::Rc::new(y.clone());
        let (ida, idb) = (self.id, other.id);
        let os = out_shape.clone();
        self.tape.push_op(op, y, out_shape, &[*self, other], move |g, sink| {
            if same {
                if let Some(slot) = sink.slot(ida) {
                    for i in 0..slot.len() {
                        slot[i] = slot[i] + g[i] * dfa(a[i], b[i], yv[i]);
                    }
                }
                if let Some(slot) = sink.slot(idb) {
                    for i in 0..slot.len() {
                        slot[i] = slot[i] + g[i] * dfb(a[i], b[i], yv[i]);
                    }
                }
            } else {
                if let Some(slot) = sink.slot(ida) {
                    for_each_broadcast(&sa, &sb, &os, |o, ia, ib| {
                        slot[ia] = slot[ia] + g[o] * dfa(a[ia], b[ib], yv[o]);
                    });
                }
                if let Some(slot) = sink.slot(idb) {
                    for_each_broadcast(&sa, &sb, &os, |o, ia, ib| {
                        slot[ib] = slot[ib] + g[o] * dfb(a[ia], b[ib], yv[o]);
                    });
                }
            }
        })
    }

    pub fn add(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary("add", other, |a, b| a + b, |_, _, _| F::one(), |_, _, _| F::one())
    }

    pub fn sub(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary("sub", other, |a, b| a - b, |_, _, _| F::one(), |_, _, _| -F::one())
    }

    pub fn mul(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary("mul", other, |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        if self.tape.is_strict() && other.value().iter().any(|v| v.is_zero()) {
            return Err(Error::DivByZero);
        }
        self.binary("div", other, |a, b| a / b, |_, b, _| F::one() / b, |_, b, y| -y / b)
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn min2(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(
            "min2",
            other,
            |a, b| if a <= b { a } else { b },
            |a, b, _| if a <= b { F::one() } else { F::zero() },
            |a, b, _| if a <= b { F::zero() } else { F::one() },
        )
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn max2(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(
            "max2",
            other,
            |a, b| if a >= b { a } else { b },
            |a, b, _| if a >= b { F::one() } else { F::zero() },
            |a, b, _| if a >= b { F::zero() } else { F::one() },
        )
    }

    pub fn neg(&self) -> Result<Var<'t, F>> {
        self.unary("neg", |x| -x, |_, _| -F::one())
    }

    pub fn abs(&self) -> Result<Var<'t, F>> {
        self.unary("abs", |x| x.abs(), |x, _| x.signum())
    }

    pub fn exp(&self) -> Result<Var<'t, F>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Result<Var<'t, F>> {
        self.unary("log", |x| x.ln(), |x, _| F::one() / x)
    }

    pub fn sqrt(&self) -> Result<Var<'t, F>> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| F::lit(0.5) / y)
    }

    pub fn sigmoid(&self) -> Result<Var<'t, F>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (F::one() - y))
    }

    pub fn gelu(&self) -> Result<Var<'t, F>> {
        self.unary("gelu", gelu_fwd, |x, _| gelu_grad(x))
    }

    pub fn relu(&self) -> Result<Var<'t, F>> {
        self.unary(
            "relu",
            |x| x.max(F::zero()),
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    /// Clamp into `[min, max]`; gradient passes inside the closed interval.
    pub fn clamp(&self, min: f64, max: f64) -> Result<Var<'t, F>> {
        let (lo, hi) = (F::lit(min), F::lit(max));
        self.unary(
            "clamp",
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { F::one() } else { F::zero() },
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t, F>> {
        let c = F::lit(c);
        self.unary("add_scalar", move |x| x + c, |_, _| F::one())
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Var<'t, F>> {
        let c = F::lit(c);
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn square(&self) -> Result<Var<'t, F>> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn recip(&self) -> Result<Var<'t, F>> {
        if self.tape.is_strict() && self.value().iter().any(|v| v.is_zero()) {
            return Err(Error::DivByZero);
        }
        self.unary("recip", |x| F::one() / x, |_, y| -y * y)
    }
}

impl<F: Scalar> Tape<F> {
    /// Scalar broadcastable against anything.
    pub fn fill(&self, value: f64) -> Var<'_, F> {
        self.scalar(F::lit(value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn add_example() {
        let tape = Tape::<f64>::new();
        let a = tape.var(Tensor::from_f64(&[2], &[1., 2.]).unwrap());
        let b = tape.var(Tensor::from_f64(&[2], &[3., 4.]).unwrap());
        assert_eq!(a.add(b).unwrap().value().as_slice(), &[4., 6.]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_f64(&[1], &[0.]).unwrap());
        let y = x.sigmoid().unwrap();
        assert_eq!(y.item(), 0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data()[0], 0.25);
    }

    #[test]
    fn broadcast_backward_sums_over_expanded_dims() {
        let tape = Tape::<f64>::new();
        let a = tape.var(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.var(Tensor::from_f64(&[3], &[10., 20., 30.]).unwrap());
        let y = a.mul(b).unwrap();
        assert_eq!(y.value().as_slice(), &[10., 40., 90., 40., 100., 180.]);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(b).data(), &[5., 7., 9.]);
        assert_eq!(g.wrt(a).data(), &[10., 20., 30., 10., 20., 30.]);
    }

    #[test]
    fn strict_div_rejects_zero() {
        let tape = Tape::<f32>::new().strict(true);
        let a = tape.var(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(a.div(b), Err(Error::DivByZero)));
        let lax = Tape::<f32>::new();
        let a = lax.var(Tensor::ones(&[2]));
        let b = lax.constant(Tensor::from_f64(&[2], &[2.0, 4.0]).unwrap());
        assert_eq!(a.div(b).unwrap().value().as_slice(), &[0.5, 0.25]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let tape = Tape::<f32>::new();
        let a = tape.var(Tensor::ones(&[2, 3]));
        let b = tape.var(Tensor::ones(&[4]));
        assert!(matches!(a.add(b), Err(Error::Shape(_))));
        assert!(a.elementwise(OpKind::Add, None).is_err());
    }

    #[test]
    fn min2_ties_go_to_first() {
        let tape = Tape::<f64>::new();
        let a = tape.var(Tensor::from_f64(&[2], &[1., 2.]).unwrap());
        let b = tape.var(Tensor::from_f64(&[2], &[1., 0.]).unwrap());
        let y = a.min2(b).unwrap();
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(a).data(), &[1., 0.]);
        assert_eq!(g.wrt(b).data(), &[0., 1.]);
    }
}
