//! Procedural posed-scene datasets rendered by a small ray caster.
//!
//! A scene is a handful of Lambertian spheres and axis-aligned boxes inside
//! the cube `[-1, 1]^3`, lit by one directional light. Cameras move along an
//! orbit around the origin; every stored frame is an exact render of the
//! scene from its stored (32-bit) pose.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pixel_center, Intrinsics, Pose};

pub const DATASET_MAGIC: &[u8; 8] = b"SVSMDATA";
const DATASET_VERSION: u32 = 1;
/// Magic, version and four u32 counts.
pub const DATASET_HEADER_BYTES: usize = 8 + 4 + 16;

const AMBIENT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box given by its half extents.
    Cuboid { half: Vector3<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vector3<f64>,
    pub albedo: [f64; 3],
}

impl Primitive {
    /// Nearest positive hit distance along a unit ray, with the surface normal.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self.shape {
            Shape::Sphere { radius } => {
                let oc = o - self.center;
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > 1e-9 { -b - s } else { -b + s };
                (t > 1e-9).then(|| (t, (o + d * t - self.center) / radius))
            }
            Shape::Cuboid { half } => {
                let lo = self.center - half;
                let hi = self.center + half;
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis0 = 0;
                let mut axis1 = 0;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < lo[a] || o[a] > hi[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut near, mut far) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
                    if near > far {
                        std::mem::swap(&mut near, &mut far);
                    }
                    if near > t0 {
                        t0 = near;
                        axis0 = a;
                    }
                    if far < t1 {
                        t1 = far;
                        axis1 = a;
                    }
                }
                if t0 > t1 || t1 <= 1e-9 {
                    return None;
                }
                let (t, axis) = if t0 > 1e-9 { (t0, axis0) } else { (t1, axis1) };
                let mut n = Vector3::zeros();
                n[axis] = if d[axis] > 0.0 { -1.0 } else { 1.0 };
                Some((t, n))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    /// Unit vector pointing from surfaces toward the light.
    pub light: Vector3<f64>,
}

impl SceneSpec {
    pub fn empty(background: [f64; 3], light: Vector3<f64>) -> Self {
        SceneSpec {
            seed: 0,
            primitives: Vec::new(),
            background,
            light: light.normalize(),
        }
    }

    /// The same scene expressed in a world frame moved by `g` (`x' = g x`).
    ///
    /// Boxes stay axis-aligned only under translations, so a rotating `g`
    /// is rejected for scenes that contain boxes.
    pub fn reframed(&self, g: &Pose) -> Result<SceneSpec> {
        let r = g.rotation();
        let rotates = (r - nalgebra::Matrix3::identity()).abs().max() > 1e-12;
        if rotates && self.primitives.iter().any(|p| matches!(p.shape, Shape::Cuboid { .. })) {
            return Err(Error::config("boxes only admit translated reframes"));
        }
        let t = g.translation();
        Ok(SceneSpec {
            seed: self.seed,
            primitives: self
                .primitives
                .iter()
                .map(|p| Primitive {
                    center: r * p.center + t,
                    ..*p
                })
                .collect(),
            background: self.background,
            light: r * self.light,
        })
    }
}

/// Deterministic scene with 3 to 8 primitives.
pub fn generate_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(3..=8);
    let mut primitives = Vec::with_capacity(count);
    for _ in 0..count {
        let center = Vector3::from_fn(|_, _| rng.gen_range(-0.7..0.7));
        let shape = if rng.gen_bool(0.5) {
            Shape::Sphere {
                radius: rng.gen_range(0.12..0.35),
            }
        } else {
            Shape::Cuboid {
                half: Vector3::from_fn(|_, _| rng.gen_range(0.08..0.3)),
            }
        };
        let albedo = std::array::from_fn(|_| rng.gen_range(0.1..1.0));
        primitives.push(Primitive { shape, center, albedo });
    }
    let background = std::array::from_fn(|_| rng.gen_range(0.0..0.3));
    let light = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..-0.3), rng.gen_range(-1.0..1.0)).normalize();
    SceneSpec {
        seed,
        primitives,
        background,
        light,
    }
}

/// Row-major `H x W x 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::dim(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Image {
            height,
            width,
            data: (0..height * width).flat_map(|_| rgb).collect(),
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ColorType::Rgb8)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

/// Nearest-hit ray cast with Lambertian plus ambient shading.
pub fn render_view(scene: &SceneSpec, pose: &Pose, k: &Intrinsics, height: usize, width: usize) -> Result<Image> {
    k.validate()?;
    pose.validate(1e-5)?;
    let rt = pose.rotation().transpose();
    let origin = pose.camera_center();
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let d = (rt * k.unproject(pixel_center(x, width), pixel_center(y, height))).normalize();
            let hit = scene
                .primitives
                .iter()
                .filter_map(|p| p.intersect(&origin, &d).map(|(t, n)| (t, n, p)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            let rgb = match hit {
                Some((_, n, p)) => {
                    let shade = n.dot(&scene.light).max(0.0) + AMBIENT;
                    p.albedo.map(|a| (a * shade).clamp(0.0, 1.0))
                }
                None => scene.background,
            };
            data.extend(rgb.iter().map(|&c| c as f32));
        }
    }
    Image::new(height, width, data)
}

/// Camera path parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// Number of frames in the window episodes are drawn from.
    pub window: usize,
    pub radius: f64,
    pub height: f64,
    /// Total orbit sweep over the window, in degrees.
    pub arc_degrees: f64,
    /// Fractional radius reduction over the window.
    pub dolly: f64,
    pub fov_degrees: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            window: 24,
            radius: 3.0,
            height: 0.8,
            arc_degrees: 90.0,
            dolly: 0.1,
            fov_degrees: 50.0,
        }
    }
}

impl TrajectoryConfig {
    /// Long window, moderate sweep: frames far apart in index.
    pub fn stereo() -> Self {
        TrajectoryConfig {
            window: 32,
            arc_degrees: 80.0,
            ..Default::default()
        }
    }

    /// Short window with a wide sweep: wider baselines between frames.
    pub fn multiview() -> Self {
        TrajectoryConfig {
            window: 16,
            arc_degrees: 140.0,
            ..Default::default()
        }
    }
}

/// Orbit-and-dolly camera path around the origin; the starting azimuth is
/// drawn from `seed`. Poses and intrinsics are already 32-bit quantized.
pub fn orbit_trajectory(config: &TrajectoryConfig, seed: u64) -> Result<Vec<(Pose, Intrinsics)>> {
    if config.window < 2 {
        return Err(Error::config("trajectory window needs at least 2 frames"));
    }
    let k = Intrinsics::from_fov_degrees(config.fov_degrees)?.quantized();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0bb1_7a11);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let last = (config.window - 1) as f64;
    (0..config.window)
        .map(|i| {
            let s = i as f64 / last;
            let theta = phase + config.arc_degrees.to_radians() * s;
            let r = config.radius * (1.0 - config.dolly * s);
            let eye = Vector3::new(r * theta.cos(), -config.height, r * theta.sin());
            let pose = Pose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0))?;
            Ok((pose.quantized(), k))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub image: Image,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub scene_id: u64,
    pub context: Vec<CameraView>,
    pub targets: Vec<CameraView>,
    pub context_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
}

/// Uniformly drawn, pairwise distinct context and target frame indices.
pub fn sample_indices<R: Rng + ?Sized>(window: usize, vc: usize, vt: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if vc == 0 || vt == 0 {
        return Err(Error::config("episodes need at least one context and one target view"));
    }
    if window < vc + vt {
        return Err(Error::config(format!(
            "trajectory window {window} is smaller than V_C + V_T = {}",
            vc + vt
        )));
    }
    let picked = index::sample(rng, window, vc + vt).into_vec();
    Ok((picked[..vc].to_vec(), picked[vc..].to_vec()))
}

/// Renders an episode directly from a scene and its trajectory.
pub fn sample_episode<R: Rng + ?Sized>(
    scene: &SceneSpec,
    trajectory: &[(Pose, Intrinsics)],
    vc: usize,
    vt: usize,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<Episode> {
    let (ci, ti) = sample_indices(trajectory.len(), vc, vt, rng)?;
    let view = |i: usize| -> Result<CameraView> {
        let (pose, k) = trajectory[i];
        Ok(CameraView {
            image: render_view(scene, &pose, &k, height, width)?,
            pose,
            intrinsics: k,
        })
    };
    Ok(Episode {
        scene_id: scene.seed,
        context: ci.iter().map(|&i| view(i)).collect::<Result<_>>()?,
        targets: ti.iter().map(|&i| view(i)).collect::<Result<_>>()?,
        context_indices: ci,
        target_indices: ti,
    })
}

/// Pre-rendered frames of several scenes sharing one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub height: usize,
    pub width: usize,
    /// `scenes[s][f]` is frame `f` of scene `s`.
    pub scenes: Vec<Vec<CameraView>>,
}

/// Seed of scene `index` in the split starting at `base`.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Seeds of `count` scenes starting at `base`.
pub fn scene_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count).map(|i| scene_seed(base, i)).collect()
}

/// Checks that two seed sets share nothing.
pub fn assert_disjoint(a: &[u64], b: &[u64]) -> Result<()> {
    let a: HashSet<u64> = a.iter().copied().collect();
    match b.iter().find(|s| a.contains(s)) {
        Some(s) => Err(Error::config(format!("scene seed {s} appears in both splits"))),
        None => Ok(()),
    }
}

impl SceneDataset {
    /// Renders every trajectory frame of each seeded scene.
    pub fn generate(seeds: &[u64], trajectory: &TrajectoryConfig, height: usize, width: usize) -> Result<Self> {
        let mut scenes = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let scene = generate_scene(seed);
            let frames = orbit_trajectory(trajectory, seed)?
                .into_iter()
                .map(|(pose, k)| {
                    Ok(CameraView {
                        image: render_view(&scene, &pose, &k, height, width)?,
                        pose,
                        intrinsics: k,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            scenes.push(frames);
        }
        Ok(SceneDataset { height, width, scenes })
    }

    pub fn frames_per_scene(&self) -> usize {
        self.scenes.first().map_or(0, Vec::len)
    }

    /// Episode over stored frames of scene `scene`.
    pub fn episode<R: Rng + ?Sized>(&self, scene: usize, vc: usize, vt: usize, rng: &mut R) -> Result<Episode> {
        let frames = &self.scenes[scene];
        let (ci, ti) = sample_indices(frames.len(), vc, vt, rng)?;
        Ok(Episode {
            scene_id: scene as u64,
            context: ci.iter().map(|&i| frames[i].clone()).collect(),
            targets: ti.iter().map(|&i| frames[i].clone()).collect(),
            context_indices: ci,
            target_indices: ti,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let fps = self.frames_per_scene();
        let mut out = Vec::with_capacity(
            DATASET_HEADER_BYTES + self.scenes.len() * fps * (self.height * self.width * 12 + 80),
        );
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for n in [self.scenes.len(), fps, self.height, self.width] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for view in self.scenes.iter().flatten() {
            for v in &view.image.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in view.pose.to_f32_array() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in view.intrinsics.to_f32_array() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format {
            offset: offset as u64,
            message,
        };
        if bytes.len() < DATASET_HEADER_BYTES {
            return Err(fail(bytes.len(), "dataset header truncated".into()));
        }
        if &bytes[..8] != DATASET_MAGIC {
            return Err(fail(0, "bad dataset magic".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(8);
        if version != DATASET_VERSION {
            return Err(fail(8, format!("unsupported dataset version {version}")));
        }
        let [scenes, fps, height, width] = [12, 16, 20, 24].map(|at| word(at) as usize);
        let frame_bytes = height * width * 12 + 80;
        let want = DATASET_HEADER_BYTES + scenes * fps * frame_bytes;
        if bytes.len() != want {
            return Err(fail(
                bytes.len().min(want),
                format!("dataset should be {want} bytes, found {}", bytes.len()),
            ));
        }
        let floats = |start: usize, n: usize| -> Vec<f32> {
            bytes[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let mut pos = DATASET_HEADER_BYTES;
        let mut out = Vec::with_capacity(scenes);
        for _ in 0..scenes {
            let mut frames = Vec::with_capacity(fps);
            for _ in 0..fps {
                let image = Image::new(height, width, floats(pos, height * width * 3))?;
                pos += height * width * 12;
                let pose: [f32; 16] = floats(pos, 16).try_into().unwrap();
                let pose = Pose::from_f32_array(&pose);
                pose.validate(1e-5).map_err(|e| fail(pos, e.to_string()))?;
                pos += 64;
                let k: [f32; 4] = floats(pos, 4).try_into().unwrap();
                let intrinsics = Intrinsics::from_f32_array(&k);
                intrinsics.validate().map_err(|e| fail(pos, e.to_string()))?;
                pos += 16;
                frames.push(CameraView { image, pose, intrinsics });
            }
            out.push(frames);
        }
        Ok(SceneDataset {
            height,
            width,
            scenes: out,
        })
    }
}

pub fn write_dataset(path: &Path, dataset: &SceneDataset) -> Result<()> {
    if dataset.scenes.iter().any(|s| s.len() != dataset.frames_per_scene()) {
        return Err(Error::config("every scene must store the same number of frames"));
    }
    std::fs::write(path, dataset.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<SceneDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    SceneDataset::from_bytes(&bytes)
}
