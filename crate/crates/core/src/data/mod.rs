//! Deterministic synthetic monocular video with exact depth, poses and
//! moving-object masks, plus dataset files on disk.

pub mod io;
pub mod render;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::networks::params::name_hash;
use crate::tensor::{Scalar, Tensor};

pub use render::{render_scene, Appearance, Billboard, CameraMotion, RenderedFrame, SceneSpec};

pub const GENERATOR_VERSION: &str = "ppea-synth-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Static,
    Dynamic,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Static => "static",
            Variant::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Variant::Static),
            "dynamic" => Ok(Variant::Dynamic),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected static|dynamic)"))),
        }
    }
}

/// Template every scene is sampled from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub ground_near: f64,
    pub ground_far: f64,
    pub objects: (usize, usize),
    /// Billboard depth range (m); sampled log-uniformly.
    pub object_depth: (f64, f64),
    pub object_width: (f64, f64),
    pub object_height: (f64, f64),
    /// Forward camera speed (m/frame).
    pub forward_speed: (f64, f64),
    pub lateral_speed: f64,
    pub max_yaw: f64,
    /// Share of billboards that move in the dynamic variant.
    pub moving_fraction: f64,
    /// Lateral image speed of moving billboards (px/frame, either sign).
    pub velocity_px: (f64, f64),
    /// Accepted share of moving-object pixels in dynamic frames.
    pub motion_coverage: (f64, f64),
    pub static_look: Appearance,
    pub dynamic_look: Appearance,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 192,
            ground_near: 3.0,
            ground_far: 40.0,
            objects: (2, 5),
            object_depth: (4.0, 25.0),
            object_width: (1.0, 3.5),
            object_height: (1.0, 3.0),
            forward_speed: (0.4, 1.0),
            lateral_speed: 0.15,
            max_yaw: 0.01,
            moving_fraction: 0.5,
            velocity_px: (1.5, 4.0),
            motion_coverage: (0.03, 0.5),
            static_look: Appearance {
                fog_color: [0.80, 0.84, 0.90],
                fog_distance: 30.0,
                palette: vec![[0.85, 0.35, 0.25], [0.30, 0.65, 0.35], [0.90, 0.75, 0.30], [0.40, 0.45, 0.85]],
                ground_color: [0.60, 0.52, 0.42],
            },
            dynamic_look: Appearance {
                fog_color: [0.55, 0.50, 0.62],
                fog_distance: 18.0,
                palette: vec![[0.95, 0.55, 0.65], [0.35, 0.80, 0.80], [0.70, 0.70, 0.70], [0.60, 0.40, 0.20]],
                ground_color: [0.38, 0.46, 0.52],
            },
        }
    }
}

fn check_range(name: &str, r: (f64, f64), lo: f64) -> Result<()> {
    if !(r.0 >= lo && r.1 >= r.0 && r.1.is_finite()) {
        return Err(Error::Config(format!("{name}: bad range {r:?}")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::Config(format!("image size {}x{} must be positive multiples of 32", self.height, self.width)));
        }
        check_range("ground", (self.ground_near, self.ground_far), 0.5)?;
        if self.ground_far >= 80.0 || self.ground_far <= self.ground_near {
            return Err(Error::Config("ground depths must satisfy 0.5 <= near < far < 80".into()));
        }
        check_range("object_depth", self.object_depth, 0.5)?;
        if self.object_depth.1 >= self.ground_far {
            return Err(Error::Config("objects must stand in front of the far ground".into()));
        }
        check_range("object_width", self.object_width, 1e-3)?;
        check_range("object_height", self.object_height, 1e-3)?;
        check_range("forward_speed", self.forward_speed, 0.0)?;
        check_range("velocity_px", self.velocity_px, 0.0)?;
        check_range("motion_coverage", self.motion_coverage, 0.0)?;
        if self.objects.0 > self.objects.1 || !(0.3..=1.0).contains(&self.moving_fraction) {
            return Err(Error::Config("object count range or moving fraction (>= 0.3) invalid".into()));
        }
        for look in [&self.static_look, &self.dynamic_look] {
            if look.palette.is_empty() || !(look.fog_distance > 0.0) {
                return Err(Error::Config("appearance needs a palette and positive fog distance".into()));
            }
        }
        Ok(())
    }

    /// KITTI-like normalized intrinsics at this resolution.
    pub fn intrinsics(&self) -> Intrinsics {
        let (w, h) = (self.width as f64, self.height as f64);
        Intrinsics { fx: 0.58 * w, fy: 1.92 * h, cx: 0.5 * w, cy: 0.5 * h }
    }

    pub fn look(&self, variant: Variant) -> &Appearance {
        match variant {
            Variant::Static => &self.static_look,
            Variant::Dynamic => &self.dynamic_look,
        }
    }
}

/// Seed of triplet `index`, independent of how many triplets are generated.
pub fn triplet_seed(seed: u64, variant: Variant, index: usize) -> u64 {
    seed ^ name_hash(variant.name()) ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn sample_billboard(cfg: &SynthConfig, spec: &SceneSpec, rng: &mut ChaCha8Rng, look: &Appearance) -> Billboard {
    let k = &spec.intrinsics;
    let (lo, hi) = (cfg.object_depth.0.ln(), cfg.object_depth.1.ln());
    let depth = rng.gen_range(lo..=hi).exp();
    let width = rng.gen_range(cfg.object_width.0..=cfg.object_width.1);
    let height = rng.gen_range(cfg.object_height.0..=cfg.object_height.1);
    let u = rng.gen_range(0.0..cfg.width as f64);
    let xc = depth * (u - k.cx) / k.fx;
    let y1 = render::ground_y(spec, depth);
    let base = look.palette[rng.gen_range(0..look.palette.len())];
    let jitter = rng.gen_range(0.85..1.15);
    Billboard {
        x0: xc - 0.5 * width,
        x1: xc + 0.5 * width,
        y0: y1 - height,
        y1,
        depth,
        texture_seed: rng.gen(),
        color: base.map(|c| (c * jitter).min(1.0)),
        velocity_px: 0.0,
    }
}

/// Samples a scene; dynamic scenes are resampled until the moving-pixel
/// share of frame t falls inside the configured bounds.
pub fn sample_scene(cfg: &SynthConfig, variant: Variant, seed: u64) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let look = cfg.look(variant).clone();
    let mut last = None;
    for _ in 0..32 {
        let camera = CameraMotion {
            translation: [
                rng.gen_range(-cfg.lateral_speed..=cfg.lateral_speed),
                0.0,
                rng.gen_range(cfg.forward_speed.0..=cfg.forward_speed.1),
            ],
            yaw: rng.gen_range(-cfg.max_yaw..=cfg.max_yaw),
        };
        let mut spec = SceneSpec {
            seed,
            height: cfg.height,
            width: cfg.width,
            intrinsics: cfg.intrinsics(),
            ground_near: cfg.ground_near,
            ground_far: cfg.ground_far,
            ground_seed: rng.gen(),
            objects: Vec::new(),
            camera,
            appearance: look.clone(),
        };
        let n = rng.gen_range(cfg.objects.0..=cfg.objects.1);
        spec.objects = (0..n).map(|_| sample_billboard(cfg, &spec, &mut rng, &look)).collect();
        if variant == Variant::Static || n == 0 {
            return Ok(spec);
        }
        let moving = ((cfg.moving_fraction * n as f64).ceil() as usize).clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in &order[..moving] {
            let speed = rng.gen_range(cfg.velocity_px.0..=cfg.velocity_px.1);
            spec.objects[i].velocity_px = if rng.gen::<bool>() { speed } else { -speed };
        }
        let frame = render_scene(&spec, 0)?;
        let cover = frame.motion.iter().filter(|&&m| m).count() as f64 / frame.motion.len() as f64;
        if (cfg.motion_coverage.0..=cfg.motion_coverage.1).contains(&cover) {
            return Ok(spec);
        }
        last = Some(spec);
    }
    last.ok_or_else(|| Error::Config("could not sample a scene".into()))
}

/// Three consecutive frames around t with ground truth for t.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTriplet {
    pub height: usize,
    pub width: usize,
    /// `I_{t−1}, I_t, I_{t+1}` as `[3,H,W]` bytes.
    pub images: [Vec<u8>; 3],
    pub depth: Vec<f32>,
    /// True on moving-object pixels of frame t.
    pub motion: Vec<bool>,
    /// `T_{t->t−1}` and `T_{t->t+1}`.
    pub poses: [Pose; 2],
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl FrameTriplet {
    pub fn render(spec: &SceneSpec) -> Result<Self> {
        let frames = [render_scene(spec, -1)?, render_scene(spec, 0)?, render_scene(spec, 1)?];
        let [a, b, c] = frames;
        Ok(Self {
            height: spec.height,
            width: spec.width,
            images: [&a, &b, &c].map(|f| f.image.iter().map(|&v| quantize(v)).collect()),
            depth: b.depth.iter().map(|&d| d as f32).collect(),
            motion: b.motion,
            poses: [render::pose_to_frame(spec, -1), render::pose_to_frame(spec, 1)],
        })
    }

    /// Image `i` (0 = t−1, 1 = t, 2 = t+1) in `[0,1]`, shape `[3,H,W]`.
    pub fn image_values(&self, i: usize) -> Vec<f64> {
        self.images[i].iter().map(|&b| b as f64 / 255.0).collect()
    }

    pub fn motion_fraction(&self) -> f64 {
        self.motion.iter().filter(|&&m| m).count() as f64 / self.motion.len().max(1) as f64
    }

    fn chw_to_hwc(&self, i: usize) -> Vec<u8> {
        let n = self.height * self.width;
        let src = &self.images[i];
        (0..n * 3).map(|j| src[(j % 3) * n + j / 3]).collect()
    }

    fn hwc_to_chw(hwc: &[u8], n: usize) -> Vec<u8> {
        (0..n * 3).map(|j| hwc[(j % n) * 3 + j / n]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletMeta {
    pub index: usize,
    pub seed: u64,
    /// Row-major 3x4 `[R|t]` of `T_{t->t−1}` and `T_{t->t+1}`.
    pub poses: [[f64; 12]; 2],
    pub objects: usize,
    pub moving_objects: usize,
    pub motion_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub generator_version: String,
    pub variant: Variant,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub intrinsics: Intrinsics,
    /// Triplet directories relative to the manifest's directory.
    pub triplets: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Rayon pool capped by `PPEA_THREADS` when set.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("PPEA_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("PPEA_THREADS=`{v}` is not a count")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Renders `count` triplets in memory (parallel over triplets).
pub fn synthesize(cfg: &SynthConfig, variant: Variant, count: usize, seed: u64) -> Result<Vec<(SceneSpec, FrameTriplet)>> {
    cfg.validate()?;
    worker_pool()?.install(|| {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let spec = sample_scene(cfg, variant, triplet_seed(seed, variant, i))?;
                let t = FrameTriplet::render(&spec)?;
                Ok((spec, t))
            })
            .collect()
    })
}

fn write_triplet(dir: &Path, index: usize, spec: &SceneSpec, t: &FrameTriplet) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, name) in ["tm1.ppm", "t.ppm", "tp1.ppm"].iter().enumerate() {
        io::write_ppm(&dir.join(name), t.width, t.height, &t.chw_to_hwc(i))?;
    }
    io::write_pfm(&dir.join("depth.pfm"), t.width, t.height, &t.depth)?;
    let motion: Vec<f32> = t.motion.iter().map(|&m| m as u8 as f32).collect();
    io::write_pfm(&dir.join("motion.pfm"), t.width, t.height, &motion)?;
    let meta = TripletMeta {
        index,
        seed: spec.seed,
        poses: [t.poses[0].to_3x4(), t.poses[1].to_3x4()],
        objects: spec.objects.len(),
        moving_objects: spec.objects.iter().filter(|o| o.is_moving()).count(),
        motion_fraction: t.motion_fraction(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Writes `<root>/<variant>/<index>/…` plus `<root>/<variant>/manifest.json`
/// and returns the manifest path.
pub fn generate_dataset(root: &Path, cfg: &SynthConfig, variant: Variant, count: usize, seed: u64) -> Result<PathBuf> {
    let dir = root.join(variant.name());
    fs::create_dir_all(&dir)?;
    let scenes = synthesize(cfg, variant, count, seed)?;
    let names: Vec<String> = (0..count).map(|i| format!("{i:05}")).collect();
    worker_pool()?.install(|| {
        scenes
            .par_iter()
            .enumerate()
            .try_for_each(|(i, (spec, t))| write_triplet(&dir.join(&names[i]), i, spec, t))
    })?;
    let manifest = DatasetManifest {
        generator_version: GENERATOR_VERSION.into(),
        variant,
        seed,
        height: cfg.height,
        width: cfg.width,
        intrinsics: cfg.intrinsics(),
        triplets: names,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

/// An in-memory dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub triplets: Vec<FrameTriplet>,
}

fn read_triplet(dir: &Path, h: usize, w: usize) -> Result<FrameTriplet> {
    let n = h * w;
    let check = |path: &Path, gw: usize, gh: usize| -> Result<()> {
        if (gw, gh) != (w, h) {
            return Err(Error::Format { path: path.to_path_buf(), msg: format!("size {gw}x{gh}, manifest says {w}x{h}") });
        }
        Ok(())
    };
    let mut images: [Vec<u8>; 3] = Default::default();
    for (i, name) in ["tm1.ppm", "t.ppm", "tp1.ppm"].iter().enumerate() {
        let p = dir.join(name);
        let (gw, gh, rgb) = io::read_ppm(&p)?;
        check(&p, gw, gh)?;
        images[i] = FrameTriplet::hwc_to_chw(&rgb, n);
    }
    let p = dir.join("depth.pfm");
    let (gw, gh, depth) = io::read_pfm(&p)?;
    check(&p, gw, gh)?;
    if let Some(d) = depth.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(Error::Format { path: p.to_path_buf(), msg: format!("non-positive depth {d}") });
    }
    let p = dir.join("motion.pfm");
    let (gw, gh, motion) = io::read_pfm(&p)?;
    check(&p, gw, gh)?;
    let p = dir.join("meta.json");
    let meta: TripletMeta = serde_json::from_slice(&fs::read(&p)?)?;
    Ok(FrameTriplet {
        height: h,
        width: w,
        images,
        depth,
        motion: motion.iter().map(|&m| m > 0.5).collect(),
        poses: [Pose::from_3x4(&meta.poses[0]), Pose::from_3x4(&meta.poses[1])],
    })
}

impl Dataset {
    /// Loads and validates every file referenced by the manifest.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(manifest_path)?)
            .map_err(|e| Error::Format { path: manifest_path.to_path_buf(), msg: e.to_string() })?;
        manifest.intrinsics.validate()?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let (h, w) = (manifest.height, manifest.width);
        let triplets = worker_pool()?.install(|| {
            manifest.triplets.par_iter().map(|name| read_triplet(&dir.join(name), h, w)).collect::<Result<Vec<_>>>()
        })?;
        Ok(Self { manifest, triplets })
    }

    /// Accepts a manifest file or a directory containing one.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::load(&path.join(MANIFEST_FILE))
        } else {
            Self::load(path)
        }
    }

    pub fn from_memory(cfg: &SynthConfig, variant: Variant, count: usize, seed: u64) -> Result<Self> {
        let triplets = synthesize(cfg, variant, count, seed)?.into_iter().map(|(_, t)| t).collect();
        let manifest = DatasetManifest {
            generator_version: GENERATOR_VERSION.into(),
            variant,
            seed,
            height: cfg.height,
            width: cfg.width,
            intrinsics: cfg.intrinsics(),
            triplets: (0..count).map(|i| format!("{i:05}")).collect(),
        };
        Ok(Self { manifest, triplets })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.manifest.intrinsics
    }

    pub fn batch<F: Scalar>(&self, indices: &[usize]) -> Result<Batch<F>> {
        if indices.is_empty() {
            return Err(Error::InsufficientBatch);
        }
        let (h, w) = (self.manifest.height, self.manifest.width);
        let stack = |i: usize| -> Result<Tensor<F>> {
            let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
            for &j in indices {
                data.extend(self.triplets[j].images[i].iter().map(|&b| F::lit(b as f64 / 255.0)));
            }
            Tensor::new(&[indices.len(), 3, h, w], data)
        };
        Ok(Batch {
            frames: [stack(0)?, stack(1)?, stack(2)?],
            depth: indices.iter().flat_map(|&j| self.triplets[j].depth.iter().map(|&d| d as f64)).collect(),
            motion: indices.iter().flat_map(|&j| self.triplets[j].motion.iter().copied()).collect(),
            poses: indices.iter().map(|&j| self.triplets[j].poses).collect(),
        })
    }
}

/// Stacked triplets ready for a forward pass.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    /// `I_{t−1}, I_t, I_{t+1}`, each `[B,3,H,W]`.
    pub frames: [Tensor<F>; 3],
    pub depth: Vec<f64>,
    pub motion: Vec<bool>,
    pub poses: Vec<[Pose; 2]>,
}

impl<F: Scalar> Batch<F> {
    pub fn size(&self) -> usize {
        self.poses.len()
    }
}
