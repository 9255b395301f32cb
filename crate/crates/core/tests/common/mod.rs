//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use ppea::autodiff::Tape;
use ppea::data::render::ground_y;
use ppea::data::*;
use ppea::geometry::warp_image;
use ppea::Tensor;

/// Mean photometric L1 of GT-warping both sources into t, over pixels that
/// are static in t and visible in the source. Visibility uses the source
/// view's own rendered depth: the projected point must be the surface the
/// source sees at all four bilinear neighbours.
pub fn gt_warp_error(spec: &SceneSpec, t: &FrameTriplet) -> (f64, usize) {
    let k = spec.intrinsics;
    let (h, w) = (t.height, t.width);
    let n = h * w;
    let depth: Vec<f64> = t.depth.iter().map(|&d| d as f64).collect();
    let target = t.image_values(1);
    let (mut sum, mut count) = (0.0, 0);
    for (src_idx, frame, pose) in [(0usize, -1, t.poses[0]), (2usize, 1, t.poses[1])] {
        let src_view = render_scene(spec, frame).unwrap();
        let tape = Tape::<f64>::new();
        let src = tape.constant(Tensor::new(&[1, 3, h, w], t.image_values(src_idx)).unwrap());
        let d = tape.constant(Tensor::new(&[1, 1, h, w], depth.clone()).unwrap());
        let (warped, _) = warp_image(src, d, tape.pose_constant(&[pose]).unwrap(), &k).unwrap();
        let warped = warped.value();
        for i in 0..n {
            if t.motion[i] {
                continue;
            }
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let q = pose.transform(k.unproject(x, y).map(|v| v * depth[i]));
            let (u, v) = k.project(q);
            if !(0.0..(w - 1) as f64).contains(&u) || !(0.0..(h - 1) as f64).contains(&v) {
                continue;
            }
            let (u0, v0) = (u.floor() as usize, v.floor() as usize);
            let visible = [(0, 0), (1, 0), (0, 1), (1, 1)].iter().all(|&(a, b)| {
                let j = (v0 + b) * w + u0 + a;
                (src_view.depth[j] / q[2] - 1.0).abs() < 0.03 && !src_view.motion[j]
            });
            if !visible {
                continue;
            }
            sum += (0..3).map(|c| (warped[c * n + i] - target[c * n + i]).abs()).sum::<f64>() / 3.0;
            count += 1;
        }
    }
    (sum / count.max(1) as f64, count)
}

pub fn bare_scene() -> SceneSpec {
    let cfg = SynthConfig::default();
    let mut spec = sample_scene(&cfg, Variant::Static, 1).unwrap();
    spec.objects.clear();
    spec.camera = CameraMotion { translation: [0.0; 3], yaw: 0.0 };
    spec
}

pub fn billboard(spec: &SceneSpec, depth: f64, x0: f64, x1: f64) -> Billboard {
    let y1 = ground_y(spec, depth);
    Billboard { x0, x1, y0: y1 - 2.0, y1, depth, texture_seed: 5, color: [0.9, 0.4, 0.3], velocity_px: 0.0 }
}

/// Sub-pixel horizontal shift of the billboard between frames via SSD
/// correlation of its interior, refined with a parabola.
pub fn measured_shift(a: &RenderedFrame, b: &RenderedFrame, mask: &[bool], h: usize, w: usize) -> f64 {
    let n = h * w;
    let ssd = |s: i64| -> f64 {
        let mut e = 0.0;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let xs = x as i64 + s;
                if !mask[i] || xs < 0 || xs >= w as i64 {
                    continue;
                }
                let j = y * w + xs as usize;
                e += (0..3).map(|c| (a.image[c * n + i] - b.image[c * n + j]).powi(2)).sum::<f64>();
            }
        }
        e
    };
    let best = (-25..=25).min_by(|&p, &q| ssd(p).total_cmp(&ssd(q))).unwrap();
    let (l, c, r) = (ssd(best - 1), ssd(best), ssd(best + 1));
    best as f64 + 0.5 * (l - r) / (l - 2.0 * c + r)
}

/// Straight single-loop reference.
pub fn brute_metrics(pred: &[f64], gt: &[f64]) -> [f64; 7] {
    let (mut a, mut s, mut r, mut l, mut d1, mut d2, mut d3) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let n = pred.len() as f64;
    for i in 0..pred.len() {
        let p = pred[i].max(0.1).min(80.0);
        let g = gt[i].max(0.1).min(80.0);
        a += (p - g).abs() / g;
        s += (p - g) * (p - g) / g;
        r += (p - g) * (p - g);
        l += (p.ln() - g.ln()) * (p.ln() - g.ln());
        let t = if p / g > g / p { p / g } else { g / p };
        d1 += (t < 1.25) as u8 as f64;
        d2 += (t < 1.5625) as u8 as f64;
        d3 += (t < 1.953125) as u8 as f64;
    }
    [a / n, s / n, (r / n).sqrt(), (l / n).sqrt(), d1 / n, d2 / n, d3 / n]
}
