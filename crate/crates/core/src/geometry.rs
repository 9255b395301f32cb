//! Pinhole cameras, rigid poses, pixel correspondence and warping.
//!
//! A pose `T_{b->a}` maps a 3-D point expressed in camera `b` into camera `a`.
//! A pixel `p_b` with depth `D_b` lands at `p_a ~ K (R D_b K^-1 p_b + t)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{normalize, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Raw pose-network outputs are multiplied by this before the exponential map.
pub const POSE_SCALE: f64 = 0.01;

/// Points closer than this to the camera plane count as behind the camera.
pub const MIN_PROJECTED_DEPTH: f64 = 1e-3;

/// Normalized grid coordinates are clamped to this magnitude (far outside
/// the image, where border sampling has no gradient anyway).
const GRID_LIMIT: f64 = 2.0;

pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Intrinsics of the same camera on a grid resampled by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self { fx: self.fx * s, fy: self.fy * s, cx: self.cx * s, cy: self.cy * s }
    }

    pub fn matrix(&self) -> Mat3 {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        [
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Viewing ray `K^-1 (u, v, 1)`.
    pub fn unproject(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

pub fn transpose(a: &Mat3) -> Mat3 {
    [0, 1, 2].map(|i| [a[0][i], a[1][i], a[2][i]])
}

fn hat(w: [f64; 3]) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

/// Rodrigues coefficients `a = sin θ/θ`, `b = (1-cos θ)/θ²` and their
/// derivatives divided by θ, with series expansions near zero.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-2 {
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            s / theta,
            (1.0 - c) / t2,
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 + 2.0 * c) / (t2 * t2),
        )
    }
}

/// Rotation matrix for axis-angle vector `w` (angle = |w|).
pub fn rodrigues(w: [f64; 3]) -> Mat3 {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b, _, _) = rodrigues_coeffs(theta);
    let k = hat(w);
    let k2 = mat_mul(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// `dR/dw_i` for each axis-angle component.
fn rodrigues_jacobian(w: [f64; 3]) -> [Mat3; 3] {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b, da, db) = rodrigues_coeffs(theta);
    let k = hat(w);
    let k2 = mat_mul(&k, &k);
    [0, 1, 2].map(|i| {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ei = hat(e);
        let eik = mat_mul(&ei, &k);
        let kei = mat_mul(&k, &ei);
        let mut d = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                d[r][c] = da * w[i] * k[r][c]
                    + a * ei[r][c]
                    + db * w[i] * k2[r][c]
                    + b * (eik[r][c] + kei[r][c]);
            }
        }
        d
    })
}

/// Rigid transform `x -> R x + t` (meters).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self { translation: t, ..Self::identity() }
    }

    pub fn from_rotation_translation(w: [f64; 3], t: [f64; 3]) -> Self {
        Self { rotation: rodrigues(w), translation: t }
    }

    /// Pose from a raw 6-vector `(axis-angle, translation)`, both scaled by
    /// [`POSE_SCALE`]; `invert` returns the inverse transform.
    pub fn from_axis_angle(v: [f64; 6], invert: bool) -> Self {
        let s = POSE_SCALE;
        let p = Self::from_rotation_translation(
            [v[0] * s, v[1] * s, v[2] * s],
            [v[3] * s, v[4] * s, v[5] * s],
        );
        if invert {
            p.inverse()
        } else {
            p
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, self.translation).map(|v| -v);
        Self { rotation: rt, translation: t }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        let r = mat_mul(&self.rotation, &other.rotation);
        let rt = mat_vec(&self.rotation, other.translation);
        Self {
            rotation: r,
            translation: [0, 1, 2].map(|i| rt[i] + self.translation[i]),
        }
    }

    pub fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.rotation, p);
        [0, 1, 2].map(|i| r[i] + self.translation[i])
    }

    /// Row-major `[R | t]`.
    pub fn to_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2],
        ]
    }

    pub fn from_3x4(m: &[f64]) -> Self {
        Self {
            rotation: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            translation: [m[3], m[7], m[11]],
        }
    }

    /// Largest deviation of `R^T R` from identity.
    pub fn orthogonality_error(&self) -> f64 {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        let mut err = 0.0f64;
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                err = err.max((v - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        err
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }
}

/// A pixel mapped into another view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub x: f64,
    pub y: f64,
    /// Depth of the point in the destination camera.
    pub depth: f64,
}

/// Where pixel `(x, y)` of view `b` with depth `depth` appears in view `a`.
pub fn correspond(
    pixel: (f64, f64),
    depth: f64,
    k: &Intrinsics,
    t_b_to_a: &Pose,
) -> Result<Correspondence> {
    if !(depth > 0.0) {
        return Err(Error::InvalidDepth(depth));
    }
    let ray = k.unproject(pixel.0, pixel.1);
    let p = t_b_to_a.transform(ray.map(|v| v * depth));
    if p[2] <= MIN_PROJECTED_DEPTH {
        return Err(Error::BehindCamera(p[2]));
    }
    let (x, y) = k.project(p);
    Ok(Correspondence { x, y, depth: p[2] })
}

/// Log-uniform depth hypotheses for the cost volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub values: Vec<f64>,
}

impl DepthBins {
    pub fn count(&self) -> usize {
        self.values.len()
    }
}

pub fn build_depth_bins(d_min: f64, d_max: f64, count: usize) -> Result<DepthBins> {
    if !(d_min > 0.0 && d_max > d_min && d_max.is_finite()) || count < 2 {
        return Err(Error::InvalidArgument(format!(
            "depth bins need 0 < d_min < d_max and count >= 2, got ({d_min}, {d_max}, {count})"
        )));
    }
    let (lo, hi) = (d_min.ln(), d_max.ln());
    let last = (count - 1) as f64;
    let mut values: Vec<f64> =
        (0..count).map(|i| (lo + i as f64 / last * (hi - lo)).exp()).collect();
    values[0] = d_min;
    values[count - 1] = d_max;
    Ok(DepthBins { d_min, d_max, values })
}

impl<F: Scalar> Tape<F> {
    /// Constant `[B,3,4]` pose tensor.
    pub fn pose_constant(&self, poses: &[Pose]) -> Result<Var<'_, F>> {
        let data: Vec<f64> = poses.iter().flat_map(|p| p.to_3x4()).collect();
        Ok(self.constant(Tensor::from_f64(&[poses.len(), 3, 4], &data)?))
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    /// Maps raw `[B,6]` pose-network outputs to `[B,3,4]` rigid transforms
    /// via [`Pose::from_axis_angle`]; differentiable.
    pub fn pose_from_axis_angle(&self, invert: bool) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[1] != 6 {
            return Err(Error::Shape(format!("pose vector must be [B,6], got {shape:?}")));
        }
        let b = shape[0];
        let v = self.value();
        let mut out = Vec::with_capacity(b * 12);
        let mut jac = Vec::with_capacity(b);
        let mut rots = Vec::with_capacity(b);
        for i in 0..b {
            let raw: [f64; 6] = std::array::from_fn(|k| v[i * 6 + k].f64());
            let w = [0, 1, 2].map(|k| raw[k] * POSE_SCALE);
            let t = [3, 4, 5].map(|k| raw[k] * POSE_SCALE);
            let r = rodrigues(w);
            let pose = if invert {
                Pose { rotation: r, translation: t }.inverse()
            } else {
                Pose { rotation: r, translation: t }
            };
            out.extend(pose.to_3x4().iter().map(|&x| F::lit(x)));
            jac.push(rodrigues_jacobian(w));
            rots.push((r, t));
        }
        let id = self.id;
        self.tape.push_op("pose_from_axis_angle", out, vec![b, 3, 4], &[*self], move |g, sink| {
            let Some(dv) = sink.slot(id) else { return };
            for i in 0..b {
                let gm: [f64; 12] = std::array::from_fn(|k| g[i * 12 + k].f64());
                let (r, t) = rots[i];
                // gradient w.r.t. the un-inverted (R, t)
                let mut g_r = [[0.0; 3]; 3];
                let mut g_t = [0.0; 3];
                if invert {
                    // R' = R^T, t' = -R^T t
                    let g_t_inv = [gm[3], gm[7], gm[11]];
                    for p in 0..3 {
                        for q in 0..3 {
                            g_r[p][q] = gm[q * 4 + p] - t[p] * g_t_inv[q];
                        }
                        g_t[p] = -(0..3).map(|q| r[p][q] * g_t_inv[q]).sum::<f64>();
                    }
                } else {
                    for p in 0..3 {
                        for q in 0..3 {
                            g_r[p][q] = gm[p * 4 + q];
                        }
                        g_t[p] = gm[p * 4 + 3];
                    }
                }
                for k in 0..3 {
                    let d = &jac[i][k];
                    let s: f64 = (0..3).flat_map(|p| (0..3).map(move |q| (p, q))).map(|(p, q)| d[p][q] * g_r[p][q]).sum();
                    dv[i * 6 + k] = dv[i * 6 + k] + F::lit(s * POSE_SCALE);
                    dv[i * 6 + 3 + k] = dv[i * 6 + 3 + k] + F::lit(g_t[k] * POSE_SCALE);
                }
            }
        })
    }

    /// Sampling grid `[B,H,W,2]` that pulls source pixels into the target
    /// view, from target depth `[B,1,H,W]` and `T_{tgt->src}` as `[B,3,4]`.
    ///
    /// The returned mask is true where the point lies in front of the source
    /// camera and projects inside the source image. Differentiable w.r.t.
    /// depth and pose.
    pub fn projection_grid(
        &self,
        pose: Var<'t, F>,
        k: &Intrinsics,
    ) -> Result<(Var<'t, F>, Vec<bool>)> {
        let [b, c, h, w] = self.dims4()?;
        if c != 1 || pose.shape() != [b, 3, 4] {
            return Err(Error::Shape(format!(
                "projection_grid: depth {:?}, pose {:?}",
                self.shape(),
                pose.shape()
            )));
        }
        let depth = self.value();
        let pv = pose.value();
        let hw = h * w;
        let mut grid = vec![F::zero(); b * hw * 2];
        let mut valid = vec![false; b * hw];
        let mut clamped = vec![false; b * hw * 2];
        // per pixel: ray, camera point X, projected point Y (for backward)
        let mut cache = vec![[0.0f64; 6]; b * hw];
        let (wm, hm) = ((w as f64 - 1.0).max(1.0), (h as f64 - 1.0).max(1.0));
        for bi in 0..b {
            let m: [f64; 12] = std::array::from_fn(|i| pv[bi * 12 + i].f64());
            let pose_b = Pose::from_3x4(&m);
            for y in 0..h {
                for x in 0..w {
                    let i = bi * hw + y * w + x;
                    let d = depth[i].f64();
                    if !(d > 0.0) {
                        return Err(Error::InvalidDepth(d));
                    }
                    let ray = k.unproject(x as f64, y as f64);
                    let p = pose_b.transform(ray.map(|v| v * d));
                    cache[i] = [ray[0], ray[1], d, p[0], p[1], p[2]];
                    let (gx, gy, ok) = if p[2] > MIN_PROJECTED_DEPTH {
                        let (u, v) = k.project(p);
                        let inside = u >= 0.0 && u <= w as f64 - 1.0 && v >= 0.0 && v <= h as f64 - 1.0;
                        (normalize(u, w), normalize(v, h), inside)
                    } else {
                        (GRID_LIMIT + 1.0, GRID_LIMIT + 1.0, false)
                    };
                    valid[i] = ok;
                    clamped[i * 2] = gx.abs() > GRID_LIMIT;
                    clamped[i * 2 + 1] = gy.abs() > GRID_LIMIT;
                    grid[i * 2] = F::lit(gx.clamp(-GRID_LIMIT, GRID_LIMIT));
                    grid[i * 2 + 1] = F::lit(gy.clamp(-GRID_LIMIT, GRID_LIMIT));
                }
            }
        }
        let (did, pid) = (self.id, pose.id);
        let (fx, fy) = (k.fx, k.fy);
        let var = self.tape.push_op("projection_grid", grid, vec![b, h, w, 2], &[*self, pose], move |g, sink| {
            let mut d_pose = vec![0.0f64; b * 12];
            let mut d_depth = vec![0.0f64; b * hw];
            for bi in 0..b {
                let r: [f64; 9] = {
                    let p = &pv[bi * 12..bi * 12 + 12];
                    [p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]].map(|v| v.f64())
                };
                for i in bi * hw..(bi + 1) * hw {
                    let [rx, ry, d, px, py, pz] = cache[i];
                    if pz <= MIN_PROJECTED_DEPTH {
                        continue;
                    }
                    let ngx = 2.0 / wm;
                    let ngy = 2.0 / hm;
                    // d grid / d projected pixel
                    let gu = if clamped[i * 2] { 0.0 } else { g[i * 2].f64() * ngx };
                    let gv = if clamped[i * 2 + 1] { 0.0 } else { g[i * 2 + 1].f64() * ngy };
                    // d pixel / d P
                    let dp = [gu * fx / pz, gv * fy / pz, -(gu * fx * px + gv * fy * py) / (pz * pz)];
                    let x_cam = [rx * d, ry * d, d];
                    for p in 0..3 {
                        for q in 0..3 {
                            d_pose[bi * 12 + p * 4 + q] += dp[p] * x_cam[q];
                        }
                        d_pose[bi * 12 + p * 4 + 3] += dp[p];
                    }
                    // dX = R^T dp, X = d * ray
                    let dx: [f64; 3] = std::array::from_fn(|q| (0..3).map(|p| r[p * 3 + q] * dp[p]).sum());
                    d_depth[i] += dx[0] * rx + dx[1] * ry + dx[2];
                }
            }
            if let Some(s) = sink.slot(did) {
                for (a, v) in s.iter_mut().zip(&d_depth) {
                    *a = *a + F::lit(*v);
                }
            }
            if let Some(s) = sink.slot(pid) {
                for (a, v) in s.iter_mut().zip(&d_pose) {
                    *a = *a + F::lit(*v);
                }
            }
        })?;
        Ok((var, valid))
    }
}

/// Sampling grid for a constant-depth plane under a fixed pose (no tape).
pub fn plane_grid(depth: f64, pose: &Pose, k: &Intrinsics, h: usize, w: usize) -> Vec<f64> {
    let mut grid = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            let ray = k.unproject(x as f64, y as f64);
            let p = pose.transform(ray.map(|v| v * depth));
            if p[2] > MIN_PROJECTED_DEPTH {
                let (u, v) = k.project(p);
                grid.push(normalize(u, w).clamp(-GRID_LIMIT, GRID_LIMIT));
                grid.push(normalize(v, h).clamp(-GRID_LIMIT, GRID_LIMIT));
            } else {
                grid.push(GRID_LIMIT);
                grid.push(GRID_LIMIT);
            }
        }
    }
    grid
}

/// Reconstructs the target view by sampling `src [B,C,H,W]` at the
/// correspondences of `depth_tgt [B,1,H,W]` under `T_{tgt->src}` (`[B,3,4]`).
/// Returns the reconstruction and the per-pixel validity mask.
pub fn warp_image<'t, F: Scalar>(
    src: Var<'t, F>,
    depth_tgt: Var<'t, F>,
    pose: Var<'t, F>,
    k: &Intrinsics,
) -> Result<(Var<'t, F>, Vec<bool>)> {
    let [_, _, h, w] = src.dims4()?;
    let [_, _, dh, dw] = depth_tgt.dims4()?;
    if (h, w) != (dh, dw) {
        return Err(Error::Shape(format!("warp: image {h}x{w} vs depth {dh}x{dw}")));
    }
    let (grid, valid) = depth_tgt.projection_grid(pose, k)?;
    Ok((src.grid_sample(grid, Padding::Border)?, valid))
}

/// Plane-sweep matching cost `[B,|bins|,h,w]`: for each hypothesized depth,
/// `f_tm1` is warped into frame t and compared with `f_t` by channel-mean L1.
/// `poses` are the (already detached) `T_{t->t-1}` per batch item.
pub fn build_cost_volume<'t, F: Scalar>(
    f_t: Var<'t, F>,
    f_tm1: Var<'t, F>,
    poses: &[Pose],
    k_feat: &Intrinsics,
    bins: &DepthBins,
) -> Result<Var<'t, F>> {
    let [b, _, h, w] = f_t.dims4()?;
    if f_tm1.shape() != f_t.shape() || poses.len() != b {
        return Err(Error::Shape(format!(
            "cost volume: features {:?} vs {:?}, {} poses",
            f_t.shape(),
            f_tm1.shape(),
            poses.len()
        )));
    }
    let tape = f_t.tape();
    let mut costs = Vec::with_capacity(bins.count());
    for &d in &bins.values {
        let grid: Vec<f64> = poses.iter().flat_map(|p| plane_grid(d, p, k_feat, h, w)).collect();
        let grid = tape.constant(Tensor::from_f64(&[b, h, w, 2], &grid)?);
        let warped = f_tm1.grid_sample(grid, Padding::Border)?;
        costs.push(warped.sub(f_t)?.abs()?.mean_dim(1)?);
    }
    Var::concat(&costs, 1)
}
