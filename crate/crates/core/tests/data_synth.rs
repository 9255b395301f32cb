mod common;

use std::fs;

use common::{bare_scene, billboard, gt_warp_error, measured_shift};
use ppea::data::render::{ground_y, pose_to_frame};
use ppea::data::*;
use ppea::geometry::Intrinsics;

#[test]
fn gt_warp_reconstructs_static_pixels() {
    let cfg = SynthConfig::default();
    for variant in [Variant::Static, Variant::Dynamic] {
        for (spec, t) in &synthesize(&cfg, variant, 6, 3).unwrap() {
            let (err, count) = gt_warp_error(spec, t);
            assert!(count > 5000, "{count} pixels checked");
            assert!(err < 0.02, "mean photometric error {err}");
        }
    }
}

#[test]
fn empty_scene_is_the_ground_plane() {
    let spec = bare_scene();
    let f = render_scene(&spec, 0).unwrap();
    let k = spec.intrinsics;
    let (h, w) = (spec.height, spec.width);
    // inverse depth of a plane is affine in the image row; top and bottom rows hit the configured range
    let top = f.depth[0];
    let bottom = f.depth[(h - 1) * w];
    assert!((top - spec.ground_far).abs() < 1e-9 && (bottom - spec.ground_near).abs() < 1e-9);
    for y in 0..h {
        let a = y as f64 / (h - 1) as f64;
        let inv = (1.0 - a) / spec.ground_far + a / spec.ground_near;
        for x in [0, w / 2, w - 1] {
            assert!((f.depth[y * w + x] - 1.0 / inv).abs() < 1e-9 * f.depth[y * w + x]);
        }
    }
    assert!(f.motion.iter().all(|m| !m));
    let _ = k;
}

#[test]
fn billboard_pixels_carry_its_depth() {
    let mut spec = bare_scene();
    spec.objects.push(billboard(&spec, 5.0, -0.5, 0.5));
    let f = render_scene(&spec, 0).unwrap();
    let k = spec.intrinsics;
    let w = spec.width;
    let y_mid = ground_y(&spec, 5.0) - 1.0;
    let (u, v) = k.project([0.0, y_mid, 5.0]);
    assert_eq!(f.depth[v.round() as usize * w + u.round() as usize], 5.0);
}

#[test]
fn lateral_camera_motion_shifts_billboard_by_fx_t_over_d() {
    for (depth, tx) in [(5.0, 0.3), (8.0, -0.5), (12.0, 0.6)] {
        let mut spec = bare_scene();
        spec.objects.push(billboard(&spec, depth, -1.2, 1.2));
        spec.camera = CameraMotion { translation: [tx, 0.0, 0.0], yaw: 0.0 };
        let (h, w) = (spec.height, spec.width);
        let a = render_scene(&spec, 0).unwrap();
        let b = render_scene(&spec, 1).unwrap();
        // interior of the billboard in frame 0, away from its edges
        let mask: Vec<bool> = (0..h * w)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                x > 2 && y > 2 && x + 3 < w && y + 3 < h && {
                    let around = [i - 3, i + 3, i - 3 * w, i + 3 * w];
                    around.iter().all(|&j| a.depth[j] == depth)
                }
            })
            .collect();
        assert!(mask.iter().filter(|&&m| m).count() > 50);
        let expected = -spec.intrinsics.fx * tx / depth;
        let got = measured_shift(&a, &b, &mask, h, w);
        assert!((got - expected).abs() < 0.5, "shift {got} vs {expected}");
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let cfg = SynthConfig::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for v in [Variant::Static, Variant::Dynamic] {
        let ma = generate_dataset(a.path(), &cfg, v, 3, 11).unwrap();
        let mb = generate_dataset(b.path(), &cfg, v, 3, 11).unwrap();
        assert_eq!(fs::read(&ma).unwrap(), fs::read(&mb).unwrap());
        for idx in ["00000", "00001", "00002"] {
            for f in ["tm1.ppm", "t.ppm", "tp1.ppm", "depth.pfm", "motion.pfm", "meta.json"] {
                let pa = ma.parent().unwrap().join(idx).join(f);
                let pb = mb.parent().unwrap().join(idx).join(f);
                assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap(), "{idx}/{f}");
            }
        }
    }
}

#[test]
fn disk_round_trip_matches_memory() {
    let cfg = SynthConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let path = generate_dataset(dir.path(), &cfg, Variant::Dynamic, 2, 4).unwrap();
    let disk = Dataset::load(&path).unwrap();
    let mem = Dataset::from_memory(&cfg, Variant::Dynamic, 2, 4).unwrap();
    assert_eq!(disk.manifest, mem.manifest);
    for (a, b) in disk.triplets.iter().zip(&mem.triplets) {
        assert_eq!(a.images, b.images);
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.motion, b.motion);
        for (p, q) in a.poses.iter().zip(&b.poses) {
            assert_eq!(p.to_3x4(), q.to_3x4());
        }
    }
    // a corrupted file is reported, not silently accepted
    fs::write(path.parent().unwrap().join("00001").join("t.ppm"), b"P5\n1 1\n255\n\0").unwrap();
    assert!(Dataset::load(&path).is_err());
}

#[test]
fn variant_motion_statistics() {
    let cfg = SynthConfig::default();
    let stat = synthesize(&cfg, Variant::Static, 10, 8).unwrap();
    assert!(stat.iter().all(|(s, t)| t.motion.iter().all(|m| !m) && s.objects.iter().all(|o| !o.is_moving())));
    for (spec, t) in synthesize(&cfg, Variant::Dynamic, 10, 8).unwrap() {
        let moving = spec.objects.iter().filter(|o| o.is_moving()).count();
        assert!(moving as f64 >= 0.3 * spec.objects.len() as f64);
        let (h, w) = (t.height, t.width);
        // pixel-count oracle: recount mask pixels from the scene description
        let k = spec.intrinsics;
        let mut recount = 0;
        for i in 0..h * w {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let d = t.depth[i] as f64;
            let p = k.unproject(x, y).map(|v| v * d);
            let on_mover = spec.objects.iter().any(|o| {
                o.is_moving() && (o.depth - d).abs() < 1e-4 * d && p[0] >= o.x0 - 1e-6 && p[0] <= o.x1 + 1e-6
            });
            assert_eq!(on_mover, t.motion[i], "pixel {i}");
            recount += on_mover as usize;
        }
        let frac = recount as f64 / (h * w) as f64;
        assert!(frac >= cfg.motion_coverage.0 && frac <= cfg.motion_coverage.1, "coverage {frac}");
    }
}

#[test]
fn motion_mask_marks_exactly_the_pixels_breaking_rigid_correspondence() {
    let cfg = SynthConfig::default();
    for (spec, t) in synthesize(&cfg, Variant::Dynamic, 4, 21).unwrap() {
        let k = spec.intrinsics;
        let w = t.width;
        for frame in [-1, 1] {
            let pose = pose_to_frame(&spec, frame);
            for i in 0..t.depth.len() {
                let d = t.depth[i] as f64;
                let p = k.unproject((i % w) as f64, (i / w) as f64).map(|v| v * d);
                let rigid = k.project(pose.transform(p));
                // where the surface point actually is in the source frame
                let shift = spec
                    .objects
                    .iter()
                    .find(|o| (o.depth - d).abs() < 1e-4 * d && p[0] >= o.x0 - 1e-6 && p[0] <= o.x1 + 1e-6)
                    .map_or(0.0, |o| o.velocity_world(k.fx) * frame as f64);
                let actual = k.project(pose.transform([p[0] + shift, p[1], p[2]]));
                let off = ((actual.0 - rigid.0).powi(2) + (actual.1 - rigid.1).powi(2)).sqrt();
                assert_eq!(off > 0.5, t.motion[i]);
            }
        }
    }
}

#[test]
fn rejects_degenerate_specs() {
    let mut spec = bare_scene();
    spec.width = 0;
    assert!(render_scene(&spec, 0).is_err());
    let cfg = SynthConfig { height: 40, ..SynthConfig::default() };
    assert!(cfg.validate().is_err());
    assert!("foggy".parse::<Variant>().is_err());
}

#[test]
fn batch_stacks_triplets() {
    let data = Dataset::from_memory(&SynthConfig::default(), Variant::Static, 3, 2).unwrap();
    let b = data.batch::<f32>(&[2, 0]).unwrap();
    assert_eq!(b.frames[1].shape(), [2, 3, 64, 192]);
    assert_eq!(b.depth.len(), 2 * 64 * 192);
    assert_eq!(b.frames[0].data()[0], data.triplets[2].images[0][0] as f32 / 255.0);
    assert!(data.batch::<f32>(&[]).is_err());
    let _: Option<Intrinsics> = Some(data.intrinsics());
}
