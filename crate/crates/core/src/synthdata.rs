//! Procedural scenes, fisheye rendering and exact ground-truth depth.
//!
//! Scenes are spheres and axis-aligned boxes scattered around the rig with
//! uniformly distributed directions, inside either a textured cuboid room
//! or under a sky gradient. Surfaces carry solid value-noise textures and
//! are shaded Lambertian with a fixed light, so every camera observes the
//! same intensity at a surface point.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{rig_grid_hash, rig_hash, text_hash};
use crate::error::{Error, Result};
use crate::geometry::{unit_ray, FisheyeCamera, Rig, SweepGrid, UnitRay, Vec3};
use crate::io;
use crate::par;
use crate::raster::Raster;

const HIT_EPS: f64 = 1e-9;

/// Scene generation parameters. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub num_objects: usize,
    /// object center distances, meters
    pub min_distance: f64,
    pub max_distance: f64,
    /// bounding-sphere radii, meters
    pub min_size: f64,
    pub max_size: f64,
    /// minimum distance between the rig origin and any object surface
    pub clearance: f64,
    pub sky_probability: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            num_objects: 16,
            min_distance: 0.8,
            max_distance: 3.0,
            min_size: 0.12,
            max_size: 0.45,
            clearance: 0.55,
            sky_probability: 0.25,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_distance > 0.0
            && self.min_distance <= self.max_distance
            && self.min_size > 0.0
            && self.min_size <= self.max_size
            && self.clearance >= 0.0
            && (0.0..=1.0).contains(&self.sky_probability);
        if !ok {
            return Err(Error::Config(format!("inconsistent scene parameters {self:?}")));
        }
        if self.max_distance - self.min_size < self.clearance {
            return Err(Error::Config(format!(
                "clearance {} m is infeasible for objects of size >= {} m within {} m",
                self.clearance, self.min_size, self.max_distance
            )));
        }
        Ok(())
    }
}

/// Direction drawn by rejection sampling on the unit disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub v1: f64,
    pub v2: f64,
    pub direction: UnitRay,
    pub distance: f64,
}

/// `(2 v1 sqrt(1 - S), 2 v2 sqrt(1 - S), 1 - 2 S)` with `S = v1^2 + v2^2`.
pub fn disk_to_sphere(v1: f64, v2: f64) -> Vec3 {
    let s = v1 * v1 + v2 * v2;
    let k = 2.0 * (1.0 - s).sqrt();
    Vec3::new(v1 * k, v2 * k, 1.0 - 2.0 * s)
}

/// Uniform direction on the sphere (Marsaglia's method); `distance` is left
/// at 1.
pub fn marsaglia_direction<R: Rng>(rng: &mut R) -> Placement {
    loop {
        let v1: f64 = rng.gen_range(-1.0..1.0);
        let v2: f64 = rng.gen_range(-1.0..1.0);
        if v1 * v1 + v2 * v2 < 1.0 {
            let d = disk_to_sphere(v1, v2);
            // renormalize away the last-ulp drift of the closed form
            let direction = UnitRay::new(d).expect("nonzero direction");
            return Placement { v1, v2, direction, distance: 1.0 };
        }
    }
}

/// Solid value-noise texture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub seed: u64,
    /// lattice cells per meter of the coarsest octave
    pub frequency: f64,
    pub octaves: u32,
    pub base: f32,
    pub contrast: f32,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let h = splitmix(
        seed ^ (x as u64).wrapping_mul(0x8da6_b343)
            ^ (y as u64).wrapping_mul(0xd816_3841)
            ^ (z as u64).wrapping_mul(0xcb1a_b31f),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinear value noise in [0, 1].
pub fn value_noise(seed: u64, p: &Vec3) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let (tx, ty, tz) = (smooth(p.x - fx), smooth(p.y - fy), smooth(p.z - fz));
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                acc += wx * wy * wz * lattice(seed, ix + dx, iy + dy, iz + dz);
            }
        }
    }
    acc
}

impl Texture {
    fn random<R: Rng>(rng: &mut R, freq: (f64, f64)) -> Self {
        Texture {
            seed: rng.gen(),
            frequency: rng.gen_range(freq.0..freq.1),
            octaves: 2,
            base: rng.gen_range(0.35..0.65),
            contrast: rng.gen_range(0.6..1.0),
        }
    }

    /// Albedo at a world point, in [0.02, 1].
    pub fn albedo(&self, p: &Vec3) -> f32 {
        let mut sum = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        let mut f = self.frequency;
        for o in 0..self.octaves {
            sum += amp * value_noise(self.seed.wrapping_add(o as u64), &(p * f));
            norm += amp;
            amp *= 0.5;
            f *= 2.0;
        }
        (self.base + self.contrast * (sum / norm - 0.5) as f32).clamp(0.02, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// axis-aligned
    Box { center: [f64; 3], half: [f64; 3] },
}

impl Shape {
    pub fn center(&self) -> Vec3 {
        let c = match self {
            Shape::Sphere { center, .. } | Shape::Box { center, .. } => center,
        };
        Vec3::new(c[0], c[1], c[2])
    }

    pub fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Sphere { radius, .. } => *radius,
            Shape::Box { half, .. } => Vec3::new(half[0], half[1], half[2]).norm(),
        }
    }

    /// Nearest hit `(t, normal)` with `t > 0` along a unit direction.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        match self {
            Shape::Sphere { radius, .. } => {
                let c = self.center();
                let oc = o - c;
                let b = oc.dot(d);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > HIT_EPS { -b - s } else { -b + s };
                (t > HIT_EPS).then(|| (t, (o + d * t - c) / *radius))
            }
            Shape::Box { half, .. } => {
                let c = self.center();
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut n0, mut n1) = (Vec3::zeros(), Vec3::zeros());
                for a in 0..3 {
                    let lo = c[a] - half[a];
                    let hi = c[a] + half[a];
                    if d[a].abs() < 1e-300 {
                        if o[a] < lo || o[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
                    let mut na = Vec3::zeros();
                    na[a] = -1.0;
                    let mut nb = Vec3::zeros();
                    nb[a] = 1.0;
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                        std::mem::swap(&mut na, &mut nb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        n0 = na;
                    }
                    if tb < t1 {
                        t1 = tb;
                        n1 = nb;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                if t0 > HIT_EPS {
                    Some((t0, n0))
                } else if t1 > HIT_EPS {
                    Some((t1, n1))
                } else {
                    None
                }
            }
        }
    }

    /// Whether a point is inside the solid.
    pub fn contains(&self, p: &Vec3) -> bool {
        let c = self.center();
        match self {
            Shape::Sphere { radius, .. } => (p - c).norm() <= *radius,
            Shape::Box { half, .. } => (0..3).all(|a| (p[a] - c[a]).abs() <= half[a]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    /// interior of an origin-centered box
    Room { half: [f64; 3], texture: Texture },
    /// intensity `horizon + (zenith - horizon) * y` at infinity
    Sky { horizon: f32, zenith: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub objects: Vec<Object>,
    pub background: Background,
}

/// Direction towards the light.
pub fn light_direction() -> Vec3 {
    Vec3::new(0.3, 0.85, 0.45).normalize()
}

const AMBIENT: f32 = 0.35;

/// What a ray sees first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hit {
    Surface { t: f64, intensity: f32 },
    Sky { intensity: f32 },
}

impl Hit {
    pub fn distance(&self) -> f64 {
        match self {
            Hit::Surface { t, .. } => *t,
            Hit::Sky { .. } => f64::INFINITY,
        }
    }

    pub fn intensity(&self) -> f32 {
        match self {
            Hit::Surface { intensity, .. } | Hit::Sky { intensity } => *intensity,
        }
    }
}

fn shade(texture: &Texture, p: &Vec3, normal: &Vec3) -> f32 {
    let lambert = normal.dot(&light_direction()).max(0.0) as f32;
    texture.albedo(p) * (AMBIENT + (1.0 - AMBIENT) * lambert)
}

fn room_exit(half: &[f64; 3], o: &Vec3, d: &Vec3) -> (f64, Vec3) {
    let mut best = (f64::INFINITY, Vec3::zeros());
    for a in 0..3 {
        if d[a].abs() < 1e-300 {
            continue;
        }
        let wall = half[a] * d[a].signum();
        let t = (wall - o[a]) / d[a];
        if t > HIT_EPS && t < best.0 {
            let mut n = Vec3::zeros();
            n[a] = -d[a].signum();
            best = (t, n);
        }
    }
    best
}

impl Scene {
    /// Nearest object hit only.
    pub fn intersect_objects(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3, &Object)> {
        let mut best: Option<(f64, Vec3, &Object)> = None;
        for obj in &self.objects {
            if let Some((t, n)) = obj.shape.intersect(o, d) {
                if best.as_ref().is_none_or(|b| t < b.0) {
                    best = Some((t, n, obj));
                }
            }
        }
        best
    }

    /// First surface (or sky) along a unit direction from `o`.
    pub fn trace(&self, o: &Vec3, d: &Vec3) -> Hit {
        let obj = self.intersect_objects(o, d);
        match &self.background {
            Background::Room { half, texture } => {
                let (tw, nw) = room_exit(half, o, d);
                match obj {
                    Some((t, n, ob)) if t < tw => Hit::Surface { t, intensity: shade(&ob.texture, &(o + d * t), &n) },
                    _ => Hit::Surface { t: tw, intensity: shade(texture, &(o + d * tw), &nw) },
                }
            }
            Background::Sky { horizon, zenith } => match obj {
                Some((t, n, ob)) => Hit::Surface { t, intensity: shade(&ob.texture, &(o + d * t), &n) },
                None => Hit::Sky { intensity: horizon + (zenith - horizon) * d.y as f32 },
            },
        }
    }

    /// Nearest-hit distance from `o` (infinity under the sky).
    pub fn depth_along(&self, o: &Vec3, d: &Vec3) -> f64 {
        let obj = self.intersect_objects(o, d).map_or(f64::INFINITY, |h| h.0);
        match &self.background {
            Background::Room { half, .. } => obj.min(room_exit(half, o, d).0),
            Background::Sky { .. } => obj,
        }
    }
}

/// Places `params.num_objects` primitives around the origin.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let near = params.min_distance.max(params.clearance + params.min_size);
    let mut objects = Vec::with_capacity(params.num_objects);
    for _ in 0..params.num_objects {
        let dir = marsaglia_direction(&mut rng).direction;
        // uniform in inverse distance
        let inv = rng.gen_range(1.0 / params.max_distance..=1.0 / near);
        let dist = 1.0 / inv;
        let max_size = params.max_size.min(dist - params.clearance);
        let size = if max_size > params.min_size { rng.gen_range(params.min_size..max_size) } else { max_size };
        let c = dir.as_vec() * dist;
        let center = [c.x, c.y, c.z];
        let shape = if rng.gen_bool(0.5) {
            Shape::Sphere { center, radius: size }
        } else {
            // random aspect, bounding sphere radius = size
            let a = Vec3::new(rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0));
            let h = a * (size / a.norm());
            Shape::Box { center, half: [h.x, h.y, h.z] }
        };
        objects.push(Object { shape, texture: Texture::random(&mut rng, (2.0, 4.0)) });
    }
    let background = if rng.gen_bool(params.sky_probability) {
        let horizon = rng.gen_range(0.45..0.7);
        Background::Sky { horizon, zenith: horizon + rng.gen_range(0.1..0.3) }
    } else {
        let r = params.max_distance + params.max_size;
        let half = [
            r * rng.gen_range(1.1..1.8),
            r * rng.gen_range(1.05..1.4),
            r * rng.gen_range(1.1..1.8),
        ];
        Background::Room { half, texture: Texture::random(&mut rng, (0.6, 1.2)) }
    };
    Ok(Scene { seed, objects, background })
}

/// Renders one camera; pixels outside the field of view are 0.
pub fn render_fisheye(scene: &Scene, cam: &FisheyeCamera) -> Raster {
    let (rows, cols) = cam.image_size;
    let mut data = vec![0.0f32; rows * cols];
    let origin = cam.center();
    par::for_each_chunk_mut(&mut data, cols, |r, row| {
        for (c, px) in row.iter_mut().enumerate() {
            if let Some(d) = cam.unproject(c as f64, r as f64) {
                let dir = cam.direction_to_rig(&d);
                *px = scene.trace(&origin, &dir).intensity().clamp(0.0, 1.0);
            }
        }
    });
    Raster { rows, cols, data }
}

/// Distance from the rig origin to the nearest surface for every grid cell.
pub fn render_gt_depth(scene: &Scene, grid: &SweepGrid) -> Raster {
    let mut data = vec![0.0f32; grid.cells()];
    par::for_each_chunk_mut(&mut data, grid.width, |r, row| {
        for (c, px) in row.iter_mut().enumerate() {
            let d = unit_ray(grid.coord(r, c));
            *px = scene.depth_along(&Vec3::zeros(), d.as_vec()) as f32;
        }
    });
    Raster { rows: grid.height, cols: grid.width, data }
}

/// One rendered frame: 8-bit-quantized images and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub images: Vec<Raster>,
    pub gt_depth: Raster,
    /// continuous sphere index per cell
    pub gt_index: Raster,
}

pub fn render_frame(scene: &Scene, rig: &Rig, grid: &SweepGrid) -> Result<Frame> {
    let images = rig
        .cameras()
        .iter()
        .map(|cam| {
            let r = render_fisheye(scene, cam);
            Raster::from_u8(r.rows, r.cols, &r.to_u8())
        })
        .collect::<Result<Vec<_>>>()?;
    let gt_depth = render_gt_depth(scene, grid);
    let (idx, _) = crate::network::gt_index_map(&gt_depth, grid)?;
    let gt_index = Raster::from_vec(grid.height, grid.width, idx)?;
    Ok(Frame { images, gt_depth, gt_index })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub seed: u64,
    pub rig_hash: String,
    pub config_hash: String,
    pub grid: SweepGrid,
    pub cameras: usize,
    pub scene: Scene,
}

/// Hash of everything that determines a frame's content.
pub fn generation_hash(rig: &Rig, grid: &SweepGrid, params: &SceneParams) -> String {
    let text = format!(
        "{}\n{}",
        rig_grid_hash(rig, grid),
        toml::to_string(params).expect("scene params serialize")
    );
    text_hash(&text)
}

/// Writes `cam{i}.pgm`, `depth.pfm`, `index.pfm` and `frame.json`.
pub fn write_frame(dir: &Path, frame: &Frame, manifest: &FrameManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, img) in frame.images.iter().enumerate() {
        io::write_pgm(&dir.join(format!("cam{i}.pgm")), img.rows, img.cols, &img.to_u8())?;
    }
    io::write_pfm(&dir.join("depth.pfm"), &frame.gt_depth)?;
    io::write_pfm(&dir.join("index.pfm"), &frame.gt_index)?;
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("frame.json"), json + "\n")?;
    Ok(())
}

pub fn read_frame(dir: &Path) -> Result<(Frame, FrameManifest)> {
    let text = fs::read_to_string(dir.join("frame.json"))?;
    let manifest: FrameManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", dir.display())))?;
    let mut images = Vec::with_capacity(manifest.cameras);
    for i in 0..manifest.cameras {
        let (rows, cols, px) = io::read_pgm(&dir.join(format!("cam{i}.pgm")))?;
        images.push(Raster::from_u8(rows, cols, &px)?);
    }
    let gt_depth = io::read_pfm(&dir.join("depth.pfm"))?;
    let gt_index = io::read_pfm(&dir.join("index.pfm"))?;
    Ok((Frame { images, gt_depth, gt_index }, manifest))
}

/// Seed of frame `i` of a corpus.
pub fn frame_seed(master: u64, i: usize) -> u64 {
    splitmix(master ^ splitmix(i as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub frames: Vec<String>,
    pub rig_hash: String,
    pub config_hash: String,
    pub grid: SweepGrid,
    pub scene_params: SceneParams,
}

pub fn frame_dir_name(i: usize) -> String {
    format!("frame_{i:04}")
}

/// Generates `count` frames under `dir` (plus `rig.toml` and
/// `corpus.json`). Frames render in parallel; output is independent of the
/// thread count.
pub fn generate_corpus(
    dir: &Path,
    rig: &Rig,
    grid: &SweepGrid,
    params: &SceneParams,
    count: usize,
    seed: u64,
) -> Result<CorpusManifest> {
    params.validate()?;
    fs::create_dir_all(dir)?;
    crate::calib::Calibration { rig: rig.clone(), grid: grid.clone() }.save(&dir.join("rig.toml"))?;
    let config_hash = generation_hash(rig, grid, params);
    let results = par::map_range(count, |i| -> Result<String> {
        let s = frame_seed(seed, i);
        let scene = generate_scene(s, params)?;
        let frame = render_frame(&scene, rig, grid)?;
        let name = frame_dir_name(i);
        let manifest = FrameManifest {
            seed: s,
            rig_hash: rig_hash(rig),
            config_hash: config_hash.clone(),
            grid: grid.clone(),
            cameras: rig.len(),
            scene,
        };
        write_frame(&dir.join(&name), &frame, &manifest)?;
        Ok(name)
    });
    let frames = results.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = CorpusManifest {
        seed,
        frames,
        rig_hash: rig_hash(rig),
        config_hash,
        grid: grid.clone(),
        scene_params: params.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("corpus.json"), json + "\n")?;
    Ok(manifest)
}

pub fn read_corpus(dir: &Path) -> Result<(CorpusManifest, crate::calib::Calibration)> {
    let text = fs::read_to_string(dir.join("corpus.json"))?;
    let m: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", dir.display())))?;
    let calib = crate::calib::Calibration::load(&dir.join("rig.toml"))?;
    Ok((m, calib))
}

pub fn frame_paths(dir: &Path, manifest: &CorpusManifest) -> Vec<PathBuf> {
    manifest.frames.iter().map(|f| dir.join(f)).collect()
}

/// Whether camera `cam` sees the surface point `p` (or direction at
/// infinity) without occlusion, inside its raster.
pub fn camera_sees(scene: &Scene, cam: &FisheyeCamera, p: &crate::geometry::SpherePoint) -> bool {
    let Some((u, v)) = cam.project_sphere_point(p).pixel() else {
        return false;
    };
    let (rows, cols) = cam.image_size;
    if !FisheyeCamera::footprint_inside(u, v, rows, cols) {
        return false;
    }
    let o = cam.center();
    match p {
        crate::geometry::SpherePoint::Finite(x) => {
            let to = x - o;
            let dist = to.norm();
            let hit = scene.depth_along(&o, &(to / dist));
            hit >= dist * (1.0 - 1e-6) - 1e-6
        }
        crate::geometry::SpherePoint::AtInfinity(d) => scene.depth_along(&o, d.as_vec()).is_infinite(),
    }
}

/// Per camera: images sampled at each cell's ground-truth point, and
/// whether the camera sees that point unoccluded.
pub fn warp_at_ground_truth(scene: &Scene, rig: &Rig, grid: &SweepGrid, images: &[Raster], depth: &Raster) -> Vec<(Vec<f32>, Vec<bool>)> {
    rig.cameras()
        .iter()
        .zip(images)
        .map(|(cam, img)| {
            let mut vals = vec![0.0f32; grid.cells()];
            let mut vis = vec![false; grid.cells()];
            for row in 0..grid.height {
                for col in 0..grid.width {
                    let i = row * grid.width + col;
                    let ray = unit_ray(grid.coord(row, col));
                    let d = depth.data[i] as f64;
                    let p = if d.is_finite() {
                        crate::geometry::SpherePoint::Finite(ray.as_vec() * d)
                    } else {
                        crate::geometry::SpherePoint::AtInfinity(ray)
                    };
                    if camera_sees(scene, cam, &p) {
                        let (u, v) = cam.project_sphere_point(&p).pixel().unwrap();
                        vals[i] = img.bilinear(u as f32, v as f32);
                        vis[i] = true;
                    }
                }
            }
            (vals, vis)
        })
        .collect()
}

/// Outcome of warping every camera to the ground-truth depth and comparing
/// camera pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyAudit {
    /// (cell, pair) samples that are co-visible and textured in both views
    pub samples: usize,
    /// samples with ZNCC at or above the threshold
    pub consistent: usize,
    /// cells with at least one textured co-visible pair
    pub textured_cells: Vec<bool>,
    /// GT points hidden from at least one camera that frames them
    pub occluded_fraction: f64,
}

impl ConsistencyAudit {
    pub fn fraction(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.consistent as f64 / self.samples as f64
        }
    }
}

/// Pairwise `patch x patch` ZNCC of the ground-truth warps. A sample counts
/// as textured when both patches have a standard deviation of at least
/// `min_std`.
pub fn consistency_audit(
    scene: &Scene,
    rig: &Rig,
    grid: &SweepGrid,
    images: &[Raster],
    depth: &Raster,
    patch: usize,
    min_std: f64,
    min_zncc: f32,
) -> ConsistencyAudit {
    let warps = warp_at_ground_truth(scene, rig, grid, images, depth);
    let mut textured_cells = vec![false; grid.cells()];
    let (mut samples, mut consistent) = (0, 0);
    for (a, b) in crate::classic::camera_pairs(warps.len()) {
        let both: Vec<bool> = warps[a].1.iter().zip(&warps[b].1).map(|(x, y)| *x && *y).collect();
        let stats = crate::classic::patch_stats(&warps[a].0, &warps[b].0, &both, grid.height, grid.width, patch / 2, true);
        for (cell, st) in stats.iter().enumerate() {
            let Some(st) = st else { continue };
            if st.std_a < min_std || st.std_b < min_std {
                continue;
            }
            samples += 1;
            textured_cells[cell] = true;
            if st.zncc.is_some_and(|z| z >= min_zncc) {
                consistent += 1;
            }
        }
    }
    // occlusion: framed by a camera but hidden from it
    let (mut framed, mut hidden) = (0usize, 0usize);
    for cam in rig.cameras() {
        for row in 0..grid.height {
            for col in 0..grid.width {
                let d = depth.get(row, col) as f64;
                let ray = unit_ray(grid.coord(row, col));
                let p = if d.is_finite() {
                    crate::geometry::SpherePoint::Finite(ray.as_vec() * d)
                } else {
                    crate::geometry::SpherePoint::AtInfinity(ray)
                };
                let in_frame = cam
                    .project_sphere_point(&p)
                    .pixel()
                    .is_some_and(|(u, v)| FisheyeCamera::footprint_inside(u, v, cam.image_size.0, cam.image_size.1));
                if in_frame {
                    framed += 1;
                    if !camera_sees(scene, cam, &p) {
                        hidden += 1;
                    }
                }
            }
        }
    }
    ConsistencyAudit {
        samples,
        consistent,
        textured_cells,
        occluded_fraction: hidden as f64 / framed.max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marsaglia_formula_examples() {
        assert_eq!(disk_to_sphere(0.0, 0.0), Vec3::new(0.0, 0.0, 1.0));
        let e = 1e-6;
        let d = disk_to_sphere(1.0 - e, 0.0);
        let expect = Vec3::new(2.0 * (1.0 - e) * (2.0 * e - e * e).sqrt(), 0.0, 1.0 - 2.0 * (1.0 - e) * (1.0 - e));
        assert!((d - expect).norm() < 1e-12);
        assert!((d - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = marsaglia_direction(&mut rng);
            assert!(p.v1 * p.v1 + p.v2 * p.v2 < 1.0);
            assert!((disk_to_sphere(p.v1, p.v2).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scene_respects_clearance_and_is_deterministic() {
        let params = SceneParams::default();
        for seed in 0..20 {
            let s = generate_scene(seed, &params).unwrap();
            assert_eq!(s, generate_scene(seed, &params).unwrap());
            assert_eq!(s.objects.len(), 16);
            for o in &s.objects {
                let gap = o.shape.center().norm() - o.shape.bounding_radius();
                assert!(gap >= params.clearance - 1e-12, "gap {gap}");
            }
            // brute force: no point within the clearance ball lies inside an object
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for _ in 0..2000 {
                let d = *marsaglia_direction(&mut rng).direction.as_vec();
                let p = d * (params.clearance * 0.999);
                assert!(s.objects.iter().all(|o| !o.shape.contains(&p)));
            }
        }
        let bad = SceneParams { clearance: 5.0, ..params };
        assert!(matches!(generate_scene(0, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn room_and_sphere_depths() {
        let tex = Texture { seed: 1, frequency: 1.0, octaves: 1, base: 0.5, contrast: 0.5 };
        let room = Scene {
            seed: 0,
            objects: vec![],
            background: Background::Room { half: [3.0, 2.0, 4.0], texture: tex.clone() },
        };
        assert!((room.depth_along(&Vec3::zeros(), &Vec3::new(1.0, 0.0, 0.0)) - 3.0).abs() < 1e-12);
        assert!((room.depth_along(&Vec3::zeros(), &Vec3::new(0.0, 0.0, -1.0)) - 4.0).abs() < 1e-12);
        let ball = Scene {
            seed: 0,
            objects: vec![Object { shape: Shape::Sphere { center: [0.0, 0.0, 2.5], radius: 0.5 }, texture: tex }],
            background: Background::Sky { horizon: 0.5, zenith: 0.7 },
        };
        assert!((ball.depth_along(&Vec3::zeros(), &Vec3::new(0.0, 0.0, 1.0)) - 2.0).abs() < 1e-12);
        assert!(ball.depth_along(&Vec3::zeros(), &Vec3::new(1.0, 0.0, 0.0)).is_infinite());
    }

    #[test]
    fn depth_matches_fine_march() {
        let tex = Texture { seed: 1, frequency: 1.0, octaves: 1, base: 0.5, contrast: 0.5 };
        let scene = Scene {
            seed: 0,
            objects: vec![
                Object { shape: Shape::Sphere { center: [1.0, 0.2, 0.5], radius: 0.3 }, texture: tex.clone() },
                Object { shape: Shape::Box { center: [-0.8, -0.1, 1.2], half: [0.3, 0.2, 0.25] }, texture: tex.clone() },
            ],
            background: Background::Room { half: [2.5, 2.0, 3.0], texture: tex },
        };
        let inside = |p: &Vec3| {
            scene.objects.iter().any(|o| o.shape.contains(p))
                || match &scene.background {
                    Background::Room { half, .. } => (0..3).any(|a| p[a].abs() >= half[a]),
                    _ => false,
                }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let d = *marsaglia_direction(&mut rng).direction.as_vec();
            let mut t = 0.0;
            let step = 1e-3;
            while !inside(&(d * (t + step))) {
                t += step;
            }
            let (mut lo, mut hi) = (t, t + step);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if inside(&(d * mid)) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let exact = scene.depth_along(&Vec3::zeros(), &d);
            assert!((exact - hi).abs() < 1e-6, "{exact} vs {hi}");
        }
    }

    #[test]
    fn sky_render_and_sphere_disk_size() {
        let rig = Rig::default_four(128, 128, 220f64.to_radians(), 0.4);
        let cam = &rig.cameras()[0];
        let sky = Scene { seed: 0, objects: vec![], background: Background::Sky { horizon: 0.5, zenith: 0.8 } };
        let img = render_fisheye(&sky, cam);
        for r in 0..128 {
            for c in 0..128 {
                let v = img.get(r, c);
                match cam.unproject(c as f64, r as f64) {
                    Some(d) => {
                        let y = cam.direction_to_rig(&d).y as f32;
                        assert!((v - (0.5 + 0.3 * y)).abs() < 1e-6);
                    }
                    None => assert_eq!(v, 0.0),
                }
            }
        }

        // a sphere of radius 0.5 m, 2 m ahead on the optical axis
        let axis = cam.direction_to_rig(&Vec3::new(0.0, 0.0, 1.0));
        let center = cam.center() + axis * 2.0;
        let tex = Texture { seed: 3, frequency: 0.0, octaves: 1, base: 1.0, contrast: 0.0 };
        let scene = Scene {
            seed: 0,
            objects: vec![Object { shape: Shape::Sphere { center: [center.x, center.y, center.z], radius: 0.5 }, texture: tex }],
            background: Background::Sky { horizon: 0.0, zenith: 0.0 },
        };
        let img = render_fisheye(&scene, cam);
        let (u0, v0) = cam.principal_point;
        let expected = cam.focal * (0.5f64 / 2.0).asin();
        // scan along the horizontal line through the principal point
        let row = v0.round() as usize;
        let mut edge = 0.0;
        for c in (u0.ceil() as usize)..128 {
            if img.get(row, c) > 0.0 {
                edge = c as f64 - u0;
            }
        }
        assert!((edge - expected).abs() <= 1.0, "{edge} vs {expected}");
    }

    #[test]
    fn frame_round_trip_and_corpus_determinism() {
        let rig = Rig::default_four(32, 32, 220f64.to_radians(), 0.4);
        let grid = SweepGrid::cropped(8, 32, 8, 2.0);
        let params = SceneParams { num_objects: 4, ..SceneParams::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = generate_corpus(a.path(), &rig, &grid, &params, 3, 7).unwrap();
        generate_corpus(b.path(), &rig, &grid, &params, 3, 7).unwrap();
        assert_eq!(m.frames.len(), 3);
        for f in &m.frames {
            for name in ["cam0.pgm", "cam3.pgm", "depth.pfm", "index.pfm", "frame.json"] {
                let x = fs::read(a.path().join(f).join(name)).unwrap();
                let y = fs::read(b.path().join(f).join(name)).unwrap();
                assert_eq!(x, y, "{f}/{name}");
            }
        }
        let (frame, manifest) = read_frame(&a.path().join(&m.frames[0])).unwrap();
        let scene = generate_scene(manifest.seed, &params).unwrap();
        assert_eq!(frame, render_frame(&scene, &rig, &grid).unwrap());
        let other = SceneParams { num_objects: 5, ..params.clone() };
        assert_ne!(generation_hash(&rig, &grid, &params), generation_hash(&rig, &grid, &other));
        assert_eq!(generation_hash(&rig, &grid, &params), generation_hash(&rig, &grid, &params.clone()));
    }
}
