//! Ray-cast "billboard world": textured fronto-parallel rectangles standing
//! on a sloped ground plane, seen by a moving pinhole camera.
//!
//! World coordinates are the camera frame of the middle frame `t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mat_vec, rodrigues, transpose, Intrinsics, Mat3, Pose};

/// Per-variant look of a scene: haze toward `fog_color` with distance, and
/// the palette objects draw their base colors from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Appearance {
    pub fog_color: [f64; 3],
    /// Depth (m) at which haze reaches `1 − 1/e`.
    pub fog_distance: f64,
    pub palette: Vec<[f64; 3]>,
    pub ground_color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Billboard {
    /// Left/right edge in world x at frame t (m).
    pub x0: f64,
    pub x1: f64,
    /// Top/bottom edge in world y (m, y points down).
    pub y0: f64,
    pub y1: f64,
    pub depth: f64,
    pub texture_seed: u64,
    pub color: [f64; 3],
    /// Lateral image velocity at frame t (px/frame); zero for static objects.
    pub velocity_px: f64,
}

impl Billboard {
    /// World-space lateral speed (m/frame).
    pub fn velocity_world(&self, fx: f64) -> f64 {
        self.velocity_px * self.depth / fx
    }

    pub fn is_moving(&self) -> bool {
        self.velocity_px != 0.0
    }
}

/// Camera motion per frame: position `c_s = s·translation`, yaw `s·yaw`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraMotion {
    pub translation: [f64; 3],
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub intrinsics: Intrinsics,
    /// Ground depth at the bottom and top image rows of frame t.
    pub ground_near: f64,
    pub ground_far: f64,
    pub ground_seed: u64,
    pub objects: Vec<Billboard>,
    pub camera: CameraMotion,
    pub appearance: Appearance,
}

/// One rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    /// `[3,H,W]` in `[0,1]`.
    pub image: Vec<f64>,
    pub depth: Vec<f64>,
    pub motion: Vec<bool>,
}

/// Ground plane `n·X = 1` with `n = (0, ny, nz)`.
fn ground_normal(spec: &SceneSpec) -> [f64; 3] {
    let k = &spec.intrinsics;
    let top = (0.0 - k.cy) / k.fy;
    let bottom = (spec.height as f64 - 1.0 - k.cy) / k.fy;
    // 1/Z = ny·y_n + nz must hit 1/far at the top row and 1/near at the bottom
    let ny = (1.0 / spec.ground_near - 1.0 / spec.ground_far) / (bottom - top);
    let nz = 1.0 / spec.ground_far - ny * top;
    [0.0, ny, nz]
}

/// World y of the ground at depth `z` (the row where a billboard stands).
pub fn ground_y(spec: &SceneSpec, z: f64) -> f64 {
    let n = ground_normal(spec);
    (1.0 - n[2] * z) / n[1]
}

fn camera_rotation(spec: &SceneSpec, frame: i32) -> Mat3 {
    rodrigues([0.0, spec.camera.yaw * frame as f64, 0.0])
}

fn camera_center(spec: &SceneSpec, frame: i32) -> [f64; 3] {
    spec.camera.translation.map(|c| c * frame as f64)
}

/// `T_{t->s}`: maps frame-t camera coordinates into frame `s`.
pub fn pose_to_frame(spec: &SceneSpec, frame: i32) -> Pose {
    let rt = transpose(&camera_rotation(spec, frame));
    let c = camera_center(spec, frame);
    let t = mat_vec(&rt, c).map(|v| -v);
    Pose { rotation: rt, translation: t }
}

fn hash3(a: i64, b: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a as u64, b as u64] {
        h ^= v.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 31)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in `[0,1)`.
pub fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (xf, yf) = (x.floor(), y.floor());
    let (ix, iy) = (xf as i64, yf as i64);
    let (tx, ty) = (smooth(x - xf), smooth(y - yf));
    let a = hash3(ix, iy, seed);
    let b = hash3(ix + 1, iy, seed);
    let c = hash3(ix, iy + 1, seed);
    let d = hash3(ix + 1, iy + 1, seed);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * ty
}

/// Albedo at surface coordinates `(s, t)` (m): two octaves of value noise
/// plus dark speckle blobs.
fn texture(s: f64, t: f64, cell: f64, seed: u64, color: [f64; 3]) -> [f64; 3] {
    let n = 0.65 * value_noise(s / cell, t / cell, seed) + 0.35 * value_noise(2.1 * s / cell, 2.1 * t / cell, seed ^ 1);
    let speck = value_noise(1.7 * s / cell + 11.0, 1.7 * t / cell - 5.0, seed ^ 2);
    let dark = ((speck - 0.62) / 0.12).clamp(0.0, 1.0);
    let shade = (0.35 + 0.9 * n) * (1.0 - 0.55 * smooth(dark));
    color.map(|c| (c * shade).clamp(0.0, 1.0))
}

fn haze(albedo: [f64; 3], world_z: f64, look: &Appearance) -> [f64; 3] {
    let f = 1.0 - (-world_z / look.fog_distance).exp();
    std::array::from_fn(|i| albedo[i] * (1.0 - f) + look.fog_color[i] * f)
}

struct Hit {
    depth: f64,
    color: [f64; 3],
    moving: bool,
}

const GROUND_CELL: f64 = 0.7;
const OBJECT_CELL: f64 = 0.3;

fn cast(spec: &SceneSpec, normal: [f64; 3], frame: i32, rot: &Mat3, center: [f64; 3], u: f64, v: f64) -> Option<Hit> {
    let k = &spec.intrinsics;
    let dir_cam = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
    let d = mat_vec(rot, dir_cam);
    let mut best: Option<(f64, Hit)> = None;
    for obj in &spec.objects {
        if d[2].abs() < 1e-12 {
            continue;
        }
        let t = (obj.depth - center[2]) / d[2];
        if t <= 0.0 || best.as_ref().is_some_and(|(bt, _)| t >= *bt) {
            continue;
        }
        let shift = obj.velocity_world(k.fx) * frame as f64;
        let x = center[0] + t * d[0];
        let y = center[1] + t * d[1];
        let (x0, x1) = (obj.x0 + shift, obj.x1 + shift);
        if x >= x0 && x <= x1 && y >= obj.y0 && y <= obj.y1 {
            let albedo = texture(x - x0, y - obj.y0, OBJECT_CELL, obj.texture_seed, obj.color);
            let color = haze(albedo, obj.depth, &spec.appearance);
            best = Some((t, Hit { depth: t, color, moving: obj.is_moving() }));
        }
    }
    let denom = normal[1] * d[1] + normal[2] * d[2];
    if denom.abs() > 1e-12 {
        let t = (1.0 - normal[1] * center[1] - normal[2] * center[2]) / denom;
        if t > 0.0 && best.as_ref().map_or(true, |(bt, _)| t < *bt) {
            let p = [center[0] + t * d[0], center[1] + t * d[1], center[2] + t * d[2]];
            // in-plane coordinates: world x and distance along the slope
            let len = (normal[1] * normal[1] + normal[2] * normal[2]).sqrt();
            let along = (normal[2] * p[1] - normal[1] * p[2]) / len;
            let albedo = texture(p[0], along, GROUND_CELL, spec.ground_seed, spec.appearance.ground_color);
            let color = haze(albedo, p[2], &spec.appearance);
            best = Some((t, Hit { depth: t, color, moving: false }));
        }
    }
    best.map(|(_, h)| h)
}

/// Sub-pixel sample offsets used to anti-alias colors.
const SUPERSAMPLE: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];

/// Renders frame `frame` (−1, 0 or +1 relative to t). Depth is the camera
/// z of the surface under the pixel center.
pub fn render_scene(spec: &SceneSpec, frame: i32) -> Result<RenderedFrame> {
    let (h, w) = (spec.height, spec.width);
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("cannot render a zero-size image".into()));
    }
    spec.intrinsics.validate()?;
    if !(spec.ground_near > 0.0 && spec.ground_far > spec.ground_near) {
        return Err(Error::InvalidArgument("ground plane needs 0 < near < far".into()));
    }
    let normal = ground_normal(spec);
    let rot = camera_rotation(spec, frame);
    let center = camera_center(spec, frame);
    let n = h * w;
    let mut image = vec![0.0; 3 * n];
    let mut depth = vec![0.0; n];
    let mut motion = vec![false; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let hit = cast(spec, normal, frame, &rot, center, x as f64, y as f64)
                .ok_or_else(|| Error::InvalidArgument(format!("pixel ({x},{y}) hits nothing")))?;
            depth[i] = hit.depth;
            motion[i] = hit.moving;
            let mut acc = [0.0; 3];
            for (dx, dy) in SUPERSAMPLE {
                let c = cast(spec, normal, frame, &rot, center, x as f64 + dx, y as f64 + dy).map_or(hit.color, |h| h.color);
                for ch in 0..3 {
                    acc[ch] += c[ch] / SUPERSAMPLE.len() as f64;
                }
            }
            for ch in 0..3 {
                image[ch * n + i] = acc[ch];
            }
        }
    }
    Ok(RenderedFrame { image, depth, motion })
}
