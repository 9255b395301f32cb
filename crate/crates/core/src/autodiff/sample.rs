//! Resampling ops: bilinear grid sampling, bilinear resize, 3x3 mean pooling.
//!
//! Coordinate convention everywhere: align-corners. A normalized coordinate
//! of -1 is the centre of the first pixel and +1 the centre of the last, so
//! `pixel = (g + 1) / 2 * (size - 1)`.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    /// Coordinates are clamped to the image; no gradient flows to a clamped coordinate.
    #[default]
    Border,
    /// Samples outside the image read as zero.
    Zeros,
}

/// Pixel-space position for a normalized coordinate.
pub fn unnormalize(g: f64, size: usize) -> f64 {
    (g + 1.0) * 0.5 * (size as f64 - 1.0)
}

/// Normalized coordinate for a pixel-space position.
pub fn normalize(p: f64, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        p / (size as f64 - 1.0) * 2.0 - 1.0
    }
}

struct Tap<F> {
    x0: isize,
    y0: isize,
    fx: F,
    fy: F,
    /// d(pixel x)/d(normalized x), zero when clamped
    sx: F,
    sy: F,
}

fn tap<F: Scalar>(gx: F, gy: F, h: usize, w: usize, padding: Padding) -> Tap<F> {
    let half = F::lit(0.5);
    let wm = F::lit(w as f64 - 1.0);
    let hm = F::lit(h as f64 - 1.0);
    let mut ix = (gx + F::one()) * half * wm;
    let mut iy = (gy + F::one()) * half * hm;
    let mut sx = half * wm;
    let mut sy = half * hm;
    if padding == Padding::Border {
        if ix <= F::zero() || ix >= wm {
            ix = ix.max(F::zero()).min(wm);
            sx = F::zero();
        }
        if iy <= F::zero() || iy >= hm {
            iy = iy.max(F::zero()).min(hm);
            sy = F::zero();
        }
    }
    let x0 = ix.floor();
    let y0 = iy.floor();
    Tap {
        x0: x0.to_isize().unwrap_or(isize::MIN / 4),
        y0: y0.to_isize().unwrap_or(isize::MIN / 4),
        fx: ix - x0,
        fy: iy - y0,
        sx,
        sy,
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    /// Bilinear sampling of `[B,C,H,W]` at `grid [B,Ho,Wo,2]` (x, y normalized).
    /// Differentiable w.r.t. both the image and the grid.
    pub fn grid_sample(&self, grid: Var<'t, F>, padding: Padding) -> Result<Var<'t, F>> {
        let [b, c, h, w] = self.dims4()?;
        let gs = grid.shape();
        if gs.len() != 4 || gs[0] != b || gs[3] != 2 {
            return Err(Error::Shape(format!("grid_sample: grid {gs:?} for input {:?}", self.shape())));
        }
        let (ho, wo) = (gs[1], gs[2]);
        let x = self.value();
        let gv = grid.value();
        let hw = h * w;
        let howo = ho * wo;
        let at = move |img: &[F], yy: isize, xx: isize| -> F {
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                img[yy as usize * w + xx as usize]
            } else {
                F::zero()
            }
        };
        let mut y = vec![F::zero(); b * c * howo];
        for bi in 0..b {
            for p in 0..howo {
                let t = tap(gv[(bi * howo + p) * 2], gv[(bi * howo + p) * 2 + 1], h, w, padding);
                let (w00, w01) = ((F::one() - t.fx) * (F::one() - t.fy), t.fx * (F::one() - t.fy));
                let (w10, w11) = ((F::one() - t.fx) * t.fy, t.fx * t.fy);
                for ch in 0..c {
                    let img = &x[(bi * c + ch) * hw..][..hw];
                    y[(bi * c + ch) * howo + p] = w00 * at(img, t.y0, t.x0)
                        + w01 * at(img, t.y0, t.x0 + 1)
                        + w10 * at(img, t.y0 + 1, t.x0)
                        + w11 * at(img, t.y0 + 1, t.x0 + 1);
                }
            }
        }
        let (xid, gid) = (self.id, grid.id);
        self.tape.push_op("grid_sample", y, vec![b, c, ho, wo], &[*self, grid], move |g, sink| {
            let want_x = sink.wants(xid);
            let want_g = sink.wants(gid);
            let mut dgrid = if want_g { vec![F::zero(); b * howo * 2] } else { Vec::new() };
            let mut dx = if want_x { vec![F::zero(); b * c * hw] } else { Vec::new() };
            for bi in 0..b {
                for p in 0..howo {
                    let t = tap(gv[(bi * howo + p) * 2], gv[(bi * howo + p) * 2 + 1], h, w, padding);
                    let (w00, w01) = ((F::one() - t.fx) * (F::one() - t.fy), t.fx * (F::one() - t.fy));
                    let (w10, w11) = ((F::one() - t.fx) * t.fy, t.fx * t.fy);
                    let (mut dix, mut diy) = (F::zero(), F::zero());
                    for ch in 0..c {
                        let go = g[(bi * c + ch) * howo + p];
                        if want_g {
                            let img = &x[(bi * c + ch) * hw..][..hw];
                            let v00 = at(img, t.y0, t.x0);
                            let v01 = at(img, t.y0, t.x0 + 1);
                            let v10 = at(img, t.y0 + 1, t.x0);
                            let v11 = at(img, t.y0 + 1, t.x0 + 1);
                            dix = dix + go * ((v01 - v00) * (F::one() - t.fy) + (v11 - v10) * t.fy);
                            diy = diy + go * ((v10 - v00) * (F::one() - t.fx) + (v11 - v01) * t.fx);
                        }
                        if want_x {
                            let img = &mut dx[(bi * c + ch) * hw..][..hw];
                            for (yy, xx, wt) in [
                                (t.y0, t.x0, w00),
                                (t.y0, t.x0 + 1, w01),
                                (t.y0 + 1, t.x0, w10),
                                (t.y0 + 1, t.x0 + 1, w11),
                            ] {
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                    let i = yy as usize * w + xx as usize;
                                    img[i] = img[i] + go * wt;
                                }
                            }
                        }
                    }
                    if want_g {
                        dgrid[(bi * howo + p) * 2] = dix * t.sx;
                        dgrid[(bi * howo + p) * 2 + 1] = diy * t.sy;
                    }
                }
            }
            if want_x {
                sink.add(xid, &dx);
            }
            if want_g {
                sink.add(gid, &dgrid);
            }
        })
    }

    /// Bilinear resize of `[B,C,H,W]` to `[B,C,out_h,out_w]` (align-corners).
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var<'t, F>> {
        let [b, c, h, w] = self.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Shape("upsample: output dims must be >= 1".into()));
        }
        if out_h == h && out_w == w {
            return self.reshape(&[b, c, h, w]);
        }
        let table = |n_in: usize, n_out: usize| -> Vec<(usize, usize, F)> {
            (0..n_out)
                .map(|o| {
                    let src = if n_out == 1 { 0.0 } else { o as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0) };
                    let i0 = (src.floor() as usize).min(n_in - 1);
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, F::lit(src - i0 as f64))
                })
                .collect()
        };
        let ty = table(h, out_h);
        let tx = table(w, out_w);
        let x = self.value();
        let (hw, ohw) = (h * w, out_h * out_w);
        let mut y = vec![F::zero(); b * c * ohw];
        for plane in 0..b * c {
            let src = &x[plane * hw..][..hw];
            let dst = &mut y[plane * ohw..][..ohw];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (F::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (F::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (F::one() - fy) + bot * fy;
                }
            }
        }
        let id = self.id;
        self.tape.push_op("upsample_bilinear", y, vec![b, c, out_h, out_w], &[*self], move |g, sink| {
            if let Some(dx) = sink.slot(id) {
                for plane in 0..b * c {
                    let gp = &g[plane * ohw..][..ohw];
                    let dp = &mut dx[plane * hw..][..hw];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let go = gp[oy * out_w + ox];
                            let top = go * (F::one() - fy);
                            let bot = go * fy;
                            dp[y0 * w + x0] = dp[y0 * w + x0] + top * (F::one() - fx);
                            dp[y0 * w + x1] = dp[y0 * w + x1] + top * fx;
                            dp[y1 * w + x0] = dp[y1 * w + x0] + bot * (F::one() - fx);
                            dp[y1 * w + x1] = dp[y1 * w + x1] + bot * fx;
                        }
                    }
                }
            }
        })
    }

    /// 3x3 mean filter, stride 1, reflection padding (output keeps H, W).
    pub fn avg_pool3_reflect(&self) -> Result<Var<'t, F>> {
        let [b, c, h, w] = self.dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::Shape("avg_pool3: reflection padding needs H, W >= 2".into()));
        }
        let reflect = |i: isize, n: usize| -> usize {
            if i < 0 {
                (-i) as usize
            } else if i as usize >= n {
                2 * n - 2 - i as usize
            } else {
                i as usize
            }
        };
        let hw = h * w;
        let x = self.value();
        let ninth = F::lit(1.0 / 9.0);
        let mut y = vec![F::zero(); x.len()];
        for plane in 0..b * c {
            let src = &x[plane * hw..][..hw];
            let dst = &mut y[plane * hw..][..hw];
            for yy in 0..h {
                for xx in 0..w {
                    let mut s = F::zero();
                    for dy in -1..=1isize {
                        let ry = reflect(yy as isize + dy, h);
                        for dx in -1..=1isize {
                            s = s + src[ry * w + reflect(xx as isize + dx, w)];
                        }
                    }
                    dst[yy * w + xx] = s * ninth;
                }
            }
        }
        let id = self.id;
        self.tape.push_op("avg_pool3_reflect", y, vec![b, c, h, w], &[*self], move |g, sink| {
            if let Some(dxs) = sink.slot(id) {
                for plane in 0..b * c {
                    let gp = &g[plane * hw..][..hw];
                    let dp = &mut dxs[plane * hw..][..hw];
                    for yy in 0..h {
                        for xx in 0..w {
                            let go = gp[yy * w + xx] * ninth;
                            for dy in -1..=1isize {
                                let ry = reflect(yy as isize + dy, h);
                                for dx in -1..=1isize {
                                    let i = ry * w + reflect(xx as isize + dx, w);
                                    dp[i] = dp[i] + go;
                                }
                            }
                        }
                    }
                }
            }
        })
    }
}
