//! 2-D cross-correlation via im2col + GEMM.

use crate::autodiff::{Fault, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }
}

impl Conv2dOpts {
    pub fn same(kernel: usize) -> Self {
        Self { stride: 1, padding: kernel / 2, groups: 1 }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy)]
struct Geom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn hwo(&self) -> usize {
        self.ho * self.wo
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one (batch, group) input block into `[K, Ho*Wo]`.
fn im2col<F: Scalar>(x: &[F], g: &Geom, b: usize, grp: usize, cols: &mut [F]) {
    let hwo = g.hwo();
    for ci in 0..g.cin_g() {
        let chan = &x[((b * g.cin) + grp * g.cin_g() + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ky) * g.kw + kx) * hwo..][..hwo];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { F::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add `[K, Ho*Wo]` columns back into the input gradient.
fn col2im<F: Scalar>(cols: &[F], g: &Geom, b: usize, grp: usize, dx: &mut [F]) {
    let hwo = g.hwo();
    for ci in 0..g.cin_g() {
        let chan = &mut dx[((b * g.cin) + grp * g.cin_g() + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((ci * g.kh + ky) * g.kw + kx) * hwo..][..hwo];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    /// `input [B,Cin,H,W]` ⋆ `weight [Cout,Cin/groups,kh,kw]` (+ `bias [Cout]`).
    pub fn conv2d(
        &self,
        weight: Var<'t, F>,
        bias: Option<Var<'t, F>>,
        opts: Conv2dOpts,
    ) -> Result<Var<'t, F>> {
        let [batch, cin, h, w] = self.dims4()?;
        let [cout, cin_g, kh, kw] = weight.dims4()?;
        let Conv2dOpts { stride, padding: pad, groups } = opts;
        if groups == 0 || stride == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Shape(format!(
                "conv2d: {cin} input / {cout} output channels not divisible by {groups} groups"
            )));
        }
        if cin / groups != cin_g {
            return Err(Error::Shape(format!(
                "conv2d: weight expects {cin_g} channels per group, input gives {}",
                cin / groups
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!("conv2d: kernel {kh}x{kw} larger than padded input")));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::Shape(format!("conv2d: bias shape {:?}", b.shape())));
            }
        }
        let g = Geom {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
            groups,
        };
        let x = self.value();
        let wt = weight.value();
        let bv = bias.map(|b| b.value());
        let (k, hwo, cout_g) = (g.k(), g.hwo(), g.cout_g());
        let mut y = vec![F::zero(); batch * cout * hwo];
        let mut cols = if g.pointwise() { Vec::new() } else { vec![F::zero(); k * hwo] };
        for b in 0..batch {
            for grp in 0..groups {
                let src: &[F] = if g.pointwise() {
                    &x[(b * cin + grp * cin_g) * hwo..][..k * hwo]
                } else {
                    im2col(&x, &g, b, grp, &mut cols);
                    &cols
                };
                let wg = &wt[grp * cout_g * k..][..cout_g * k];
                let out = &mut y[(b * cout + grp * cout_g) * hwo..][..cout_g * hwo];
                F::gemm(cout_g, k, hwo, F::one(), wg, k as isize, 1, src, hwo as isize, 1, F::zero(), out, hwo as isize, 1);
            }
            if let Some(bv) = &bv {
                for co in 0..cout {
                    let out = &mut y[(b * cout + co) * hwo..][..hwo];
                    out.iter_mut().for_each(|v| *v = *v + bv[co]);
                }
            }
        }

        let mut inputs = vec![*self, weight];
        inputs.extend(bias);
        let (xid, wid, bid) = (self.id, weight.id, bias.map(|b| b.id));
        let flip = self.tape.fault() == Some(Fault::ConvInputGradSign);
        self.tape.push_op("conv2d", y, vec![batch, cout, g.ho, g.wo], &inputs, move |gy, sink| {
            let mut cols = vec![F::zero(); k * hwo];
            if sink.wants(wid) {
                let dw = sink.slot(wid).expect("weight grad slot");
                for b in 0..g.batch {
                    for grp in 0..g.groups {
                        let src: &[F] = if g.pointwise() {
                            &x[(b * g.cin + grp * g.cin_g()) * hwo..][..k * hwo]
                        } else {
                            im2col(&x, &g, b, grp, &mut cols);
                            &cols
                        };
                        let gout = &gy[(b * g.cout + grp * cout_g) * hwo..][..cout_g * hwo];
                        let dwg = &mut dw[grp * cout_g * k..][..cout_g * k];
                        // dW[co, kk] += sum_p gout[co, p] * cols[kk, p]
                        F::gemm(cout_g, hwo, k, F::one(), gout, hwo as isize, 1, src, 1, hwo as isize, F::one(), dwg, k as isize, 1);
                    }
                }
            }
            if let Some(bid) = bid {
                if let Some(db) = sink.slot(bid) {
                    for b in 0..g.batch {
                        for (co, d) in db.iter_mut().enumerate() {
                            let s = gy[(b * g.cout + co) * hwo..][..hwo]
                                .iter()
                                .fold(F::zero(), |a, &v| a + v);
                            *d = *d + s;
                        }
                    }
                }
            }
            if let Some(dx) = sink.slot(xid) {
                let sign = if flip { -F::one() } else { F::one() };
                for b in 0..g.batch {
                    for grp in 0..g.groups {
                        let gout = &gy[(b * g.cout + grp * cout_g) * hwo..][..cout_g * hwo];
                        let wg = &wt[grp * cout_g * k..][..cout_g * k];
                        if g.pointwise() {
                            let dst = &mut dx[(b * g.cin + grp * g.cin_g()) * hwo..][..k * hwo];
                            // dX[kk, p] += sum_co W[co, kk] * gout[co, p]
                            F::gemm(k, cout_g, hwo, sign, wg, 1, k as isize, gout, hwo as isize, 1, F::one(), dst, hwo as isize, 1);
                        } else {
                            F::gemm(k, cout_g, hwo, sign, wg, 1, k as isize, gout, hwo as isize, 1, F::zero(), &mut cols, hwo as isize, 1);
                            col2im(&cols, &g, b, grp, dx);
                        }
                    }
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::Tensor;

    #[test]
    fn ones_kernel_counts_neighbours() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.var(Tensor::ones(&[1, 1, 3, 3]));
        let y = x.conv2d(w, None, Conv2dOpts::same(3)).unwrap();
        let v = y.value();
        assert_eq!(v[4], 9.0);
        assert_eq!(v[0], 4.0);
        assert_eq!(v[1], 6.0);
    }

    #[test]
    fn depthwise_identity_kernel() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.var(Tensor::from_f64(&[2, 3, 4, 5], &data).unwrap());
        let mut k = vec![0.0; 3 * 9];
        for c in 0..3 {
            k[c * 9 + 4] = 1.0;
        }
        let w = tape.var(Tensor::from_f64(&[3, 1, 3, 3], &k).unwrap());
        let y = x.conv2d(w, None, Conv2dOpts::same(3).groups(3)).unwrap();
        assert_eq!(y.value().as_slice(), data.as_slice());
    }

    #[test]
    fn stride_two_output_size() {
        let tape = Tape::<f32>::new();
        let x = tape.var(Tensor::ones(&[1, 2, 8, 6]));
        let w = tape.var(Tensor::ones(&[4, 2, 3, 3]));
        let y = x.conv2d(w, None, Conv2dOpts::same(3).stride(2)).unwrap();
        assert_eq!(y.shape(), vec![1, 4, 4, 3]);
    }

    #[test]
    fn incompatible_channels() {
        let tape = Tape::<f32>::new();
        let x = tape.var(Tensor::ones(&[1, 3, 4, 4]));
        let w = tape.var(Tensor::ones(&[4, 2, 3, 3]));
        assert!(x.conv2d(w, None, Conv2dOpts::same(3)).is_err());
        let w = tape.var(Tensor::ones(&[4, 1, 3, 3]));
        assert!(x.conv2d(w, None, Conv2dOpts::same(3).groups(2)).is_err());
    }
}
