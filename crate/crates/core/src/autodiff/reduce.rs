//! Reductions and layout ops (reshape, concat, narrow).

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Reduction selector for [`Var::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Mean,
    Sum,
    Min,
}

/// `(outer, extent, inner)` split of a shape around `dim`.
fn split(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    let outer = shape[..dim].iter().product();
    let inner = shape[dim + 1..].iter().product();
    (outer, shape[dim], inner)
}

impl<'t, F: Scalar> Var<'t, F> {
    /// `dim = None` reduces everything to shape `[1]`; otherwise the dim is kept with extent 1.
    pub fn reduce(&self, op: ReduceOp, dim: Option<usize>) -> Result<Var<'t, F>> {
        match (op, dim) {
            (ReduceOp::Sum, None) => self.sum(),
            (ReduceOp::Mean, None) => self.mean(),
            (ReduceOp::Sum, Some(d)) => self.sum_dim(d),
            (ReduceOp::Mean, Some(d)) => self.mean_dim(d),
            (ReduceOp::Min, Some(d)) => Ok(self.min_dim(d)?.0),
            (ReduceOp::Min, None) => {
                let flat = self.reshape(&[self.numel()])?;
                Ok(flat.min_dim(0)?.0)
            }
        }
    }

    pub fn sum(&self) -> Result<Var<'t, F>> {
        let x = self.value();
        if x.is_empty() {
            return Err(Error::EmptyReduction);
        }
        let s = x.iter().fold(F::zero(), |acc, &v| acc + v);
        let id = self.id;
        self.tape.push_op("sum", vec![s], vec![1], &[*self], move |g, sink| {
            if let Some(slot) = sink.slot(id) {
                for v in slot.iter_mut() {
                    *v = *v + g[0];
                }
            }
        })
    }

    pub fn mean(&self) -> Result<Var<'t, F>> {
        let n = self.numel();
        self.sum()?.mul_scalar(1.0 / n as f64)
    }

    pub fn sum_dim(&self, dim: usize) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if dim >= shape.len() {
            return Err(Error::Shape(format!("dim {dim} out of range for {shape:?}")));
        }
        let (outer, extent, inner) = split(&shape, dim);
        let x = self.value();
        let mut y = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..extent {
                let base = (o * extent + k) * inner;
                for i in 0..inner {
                    y[o * inner + i] = y[o * inner + i] + x[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[dim] = 1;
        let id = self.id;
        self.tape.push_op("sum_dim", y, out_shape, &[*self], move |g, sink| {
            if let Some(slot) = sink.slot(id) {
                for o in 0..outer {
                    for k in 0..extent {
                        let base = (o * extent + k) * inner;
                        for i in 0..inner {
                            slot[base + i] = slot[base + i] + g[o * inner + i];
                        }
                    }
                }
            }
        })
    }

    pub fn mean_dim(&self, dim: usize) -> Result<Var<'t, F>> {
        let extent = *self
            .shape()
            .get(dim)
            .ok_or_else(|| Error::Shape(format!("dim {dim} out of range")))?;
        self.sum_dim(dim)?.mul_scalar(1.0 / extent as f64)
    }

    /// Minimum along `dim` plus the winning index per output element.
    ///
    /// The subgradient goes to the argmin only; ties pick the lowest index.
    pub fn min_dim(&self, dim: usize) -> Result<(Var<'t, F>, Vec<usize>)> {
        let shape = self.shape();
        if dim >= shape.len() {
            return Err(Error::Shape(format!("dim {dim} out of range for {shape:?}")));
        }
        let (outer, extent, inner) = split(&shape, dim);
        let x = self.value();
        let mut y = vec![F::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = x[o * extent * inner + i];
                let mut bi = 0;
                for k in 1..extent {
                    let v = x[(o * extent + k) * inner + i];
                    if v < best {
                        best = v;
                        bi = k;
                    }
                }
                y[o * inner + i] = best;
                arg[o * inner + i] = bi;
            }
        }
        let mut out_shape = shape.clone();
        out_shape[dim] = 1;
        let id = self.id;
        let winners = arg.clone();
        let var = self.tape.push_op("min_dim", y, out_shape, &[*self], move |g, sink| {
            if let Some(slot) = sink.slot(id) {
                for o in 0..outer {
                    for i in 0..inner {
                        let k = winners[o * inner + i];
                        let idx = (o * extent + k) * inner + i;
                        slot[idx] = slot[idx] + g[o * inner + i];
                    }
                }
            }
        })?;
        Ok((var, arg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        let id = self.id;
        self.tape.push_op("reshape", self.value().to_vec(), shape.to_vec(), &[*self], move |g, sink| {
            sink.add(id, g)
        })
    }

    /// Contiguous sub-range `[start, start + len)` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if dim >= shape.len() || start + len > shape[dim] || len == 0 {
            return Err(Error::Shape(format!(
                "narrow({dim}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, extent, inner) = split(&shape, dim);
        let x = self.value();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            y.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[dim] = len;
        let id = self.id;
        self.tape.push_op("narrow", y, out_shape, &[*self], move |g, sink| {
            if let Some(slot) = sink.slot(id) {
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    let gb = o * len * inner;
                    for i in 0..len * inner {
                        slot[base + i] = slot[base + i] + g[gb + i];
                    }
                }
            }
        })
    }

    /// Concatenate along `dim`; all other dims must agree.
    pub fn concat(parts: &[Var<'t, F>], dim: usize) -> Result<Var<'t, F>> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base_shape = first.shape();
        if dim >= base_shape.len() {
            return Err(Error::Shape(format!("dim {dim} out of range for {base_shape:?}")));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let agrees = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(d, (a, b))| d == dim || a == b);
            if !agrees || !p.same_tape(first) {
                return Err(Error::Shape(format!("concat: {s:?} vs {base_shape:?} on dim {dim}")));
            }
            extents.push(s[dim]);
        }
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split(&base_shape, dim);
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                y.extend_from_slice(&v[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut out_shape = base_shape.clone();
        out_shape[dim] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.tape.push_op("concat", y, out_shape, parts, move |g, sink| {
            let mut offset = 0;
            for (&id, &e) in ids.iter().zip(&extents) {
                if let Some(slot) = sink.slot(id) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * e * inner;
                        for i in 0..e * inner {
                            slot[dst + i] = slot[dst + i] + g[src + i];
                        }
                    }
                }
                offset += e;
            }
        })
    }
}
