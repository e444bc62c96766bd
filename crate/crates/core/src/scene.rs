//! Procedural scenes: primitives on a floor, a ring of cameras, exact
//! depths and Lambertian images from analytic ray casts, ground-truth boxes
//! and a hard density field. Plus the on-disk dataset layout and its hash.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection::Box3D;
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{Aabb, Camera, FeatureMap, Vec3, VoxelGrid};

pub const DATASET_VERSION: u32 = 1;
const AMBIENT: f64 = 0.25;
const HIT_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Box,
    Sphere,
    Cylinder,
}

impl Primitive {
    pub const ALL: [Primitive; 3] = [Primitive::Box, Primitive::Sphere, Primitive::Cylinder];

    pub fn class_id(self) -> usize {
        self as usize
    }
}

/// `size` is `(w, h, l)` as for [`Box3D`]; spheres use `w = h = l` as the
/// diameter and cylinders `w = l` as the diameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub kind: Primitive,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub look_at: [f64; 3],
    pub fov_y: f64,
    pub image_height: usize,
    pub image_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub room: Aabb,
    pub grid_dims: [usize; 3],
    pub sigma_high: f64,
    pub light_dir: [f64; 3],
    pub objects: Vec<SceneObject>,
    pub cameras: CameraRing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 4 × 4 × 1.6 room, 40 × 40 × 16 grid, 64 × 64 images.
    #[default]
    Default,
    /// 2 × 2 × 1 room, 16 × 16 × 8 grid, 32 × 32 images.
    Small,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Profile::Default),
            "small" => Ok(Profile::Small),
            _ => Err(Error::ConfigInvalid(format!("unknown scene profile {s:?}"))),
        }
    }
}

impl Profile {
    fn layout(self) -> (f64, f64, [usize; 3], usize) {
        match self {
            Profile::Default => (4.0, 1.6, [40, 40, 16], 64),
            Profile::Small => (2.0, 1.0, [16, 16, 8], 32),
        }
    }
}

impl SceneSpec {
    /// Empty room with the profile's camera ring.
    pub fn empty(seed: u64, profile: Profile) -> Self {
        let (side, height, dims, px) = profile.layout();
        SceneSpec {
            seed,
            room: Aabb {
                min: Vec3::new(-side / 2.0, -side / 2.0, 0.0),
                max: Vec3::new(side / 2.0, side / 2.0, height),
            },
            grid_dims: dims,
            sigma_high: 4.0 * dims[0] as f64 / side,
            light_dir: [0.3, -0.4, 0.866],
            objects: Vec::new(),
            cameras: CameraRing {
                count: 8,
                radius: side * 0.95,
                height: height * 1.6,
                look_at: [0.0, 0.0, height * 0.2],
                fov_y: 0.9,
                image_height: px,
                image_width: px,
            },
        }
    }

    /// 2–4 non-overlapping primitives resting on the floor.
    pub fn random(seed: u64, profile: Profile) -> Self {
        let mut spec = SceneSpec::empty(seed, profile);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = spec.room.max.x - spec.room.min.x;
        let height = spec.room.max.z;
        let n = rng.gen_range(2..=4);
        let mut placed: Vec<Box3D> = Vec::new();
        let mut tries = 0;
        while spec.objects.len() < n && tries < 1000 {
            tries += 1;
            let kind = Primitive::ALL[rng.gen_range(0..3)];
            let d = side * rng.gen_range(0.12..0.22);
            let size = match kind {
                Primitive::Box => [d, height * rng.gen_range(0.2..0.5), side * rng.gen_range(0.12..0.22)],
                Primitive::Sphere => [d, d, d],
                Primitive::Cylinder => [d, height * rng.gen_range(0.25..0.55), d],
            };
            let yaw = if kind == Primitive::Box { rng.gen_range(-1.5..1.5) } else { 0.0 };
            let reach = side / 2.0 - 0.6 * size[0].max(size[2]) * std::f64::consts::SQRT_2;
            let center = [rng.gen_range(-reach..reach), rng.gen_range(-reach..reach), size[1] / 2.0];
            let albedo = [rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0)];
            let obj = SceneObject {
                kind,
                center,
                size,
                yaw,
                albedo,
            };
            let b = obj.gt_box();
            let (lo, hi) = b.enclosing_aabb();
            let clear = placed.iter().all(|o| {
                let (olo, ohi) = o.enclosing_aabb();
                (0..2).any(|k| lo[k] > ohi[k] + 0.05 * side || olo[k] > hi[k] + 0.05 * side)
            });
            if clear {
                placed.push(b);
                spec.objects.push(obj);
            }
        }
        spec
    }

    pub fn grid(&self) -> Result<VoxelGrid> {
        let ext = self.room.max - self.room.min;
        let s = ext.x / self.grid_dims[0] as f64;
        for a in 0..3 {
            if ((self.grid_dims[a] as f64 * s) - ext[a]).abs() > 1e-9 * ext[a].max(1.0) {
                return Err(Error::InvalidSpec("grid dims must tile the room with cubic voxels".into()));
            }
        }
        VoxelGrid::new(self.grid_dims, self.room.min, s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.cameras.count < 2 {
            return bad(format!("need at least 2 cameras, got {}", self.cameras.count));
        }
        if !(self.sigma_high > 0.0) {
            return bad("sigma_high must be positive".into());
        }
        self.grid()?;
        for (i, o) in self.objects.iter().enumerate() {
            if o.size.iter().any(|&s| !(s > 0.0)) {
                return bad(format!("object {i} has a non-positive size"));
            }
            if o.kind != Primitive::Box && o.size[0] != o.size[2] {
                return bad(format!("object {i}: round primitives need w = l"));
            }
            if o.kind == Primitive::Sphere && o.size[0] != o.size[1] {
                return bad(format!("object {i}: sphere sizes must be equal"));
            }
            let (lo, hi) = o.gt_box().enclosing_aabb();
            for k in 0..3 {
                if lo[k] < self.room.min[k] - 1e-9 || hi[k] > self.room.max[k] + 1e-9 {
                    return bad(format!("object {i} leaves the room"));
                }
            }
        }
        Ok(())
    }

    pub fn build_cameras(&self) -> Result<Vec<Camera>> {
        let r = &self.cameras;
        (0..r.count)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / r.count as f64 + 0.3;
                Camera::look_at(
                    Vec3::new(r.radius * a.cos(), r.radius * a.sin(), r.height),
                    Vec3::from(r.look_at),
                    Vec3::z(),
                    r.fov_y,
                    r.image_height,
                    r.image_width,
                )
            })
            .collect()
    }

    /// `sigma_high` inside any primitive, zero elsewhere.
    pub fn density(&self, p: &Vec3) -> f64 {
        if self.objects.iter().any(|o| o.contains(p)) {
            self.sigma_high
        } else {
            0.0
        }
    }

    /// Nearest surface hit along `origin + t·dir` with `t > 0`: distance,
    /// outward normal and object index.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3, usize)> {
        self.objects
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.intersect(origin, dir).map(|(t, n)| (t, n, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

impl SceneObject {
    pub fn gt_box(&self) -> Box3D {
        Box3D {
            center: self.center,
            size: self.size,
            yaw: self.yaw,
            class: self.kind.class_id(),
            score: None,
        }
    }

    /// World point in the object's frame (yaw undone, centered).
    fn local(&self, p: &Vec3) -> Vec3 {
        let d = p - Vec3::from(self.center);
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    fn local_dir(&self, d: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    fn world_dir(&self, d: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * d.x - s * d.y, s * d.x + c * d.y, d.z)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let q = self.local(p);
        let [w, h, l] = self.size;
        match self.kind {
            Primitive::Box => q.x.abs() <= w / 2.0 && q.y.abs() <= l / 2.0 && q.z.abs() <= h / 2.0,
            Primitive::Sphere => q.norm() <= w / 2.0,
            Primitive::Cylinder => q.x * q.x + q.y * q.y <= w * w / 4.0 && q.z.abs() <= h / 2.0,
        }
    }

    /// First entry into the solid along the ray, with `t > 0`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        let o = self.local(origin);
        let d = self.local_dir(dir);
        let [w, h, l] = self.size;
        let (t, n) = match self.kind {
            Primitive::Box => slab(&o, &d, &Vec3::new(w / 2.0, l / 2.0, h / 2.0))?,
            Primitive::Sphere => {
                let r = w / 2.0;
                let b = o.dot(&d);
                let disc = b * b - (o.norm_squared() - r * r);
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                if t <= HIT_EPS {
                    return None;
                }
                (t, (o + d * t) / r)
            }
            Primitive::Cylinder => cylinder(&o, &d, w / 2.0, h / 2.0)?,
        };
        Some((t, self.world_dir(&n)))
    }
}

fn slab(o: &Vec3, d: &Vec3, half: &Vec3) -> Option<(f64, Vec3)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis = 0;
    let mut sign = 1.0;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let ta = (-half[a] - o[a]) / d[a];
        let tb = (half[a] - o[a]) / d[a];
        let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
        if lo > t0 {
            t0 = lo;
            axis = a;
            sign = if d[a] > 0.0 { -1.0 } else { 1.0 };
        }
        t1 = t1.min(hi);
    }
    if t0 > t1 || t0 <= HIT_EPS {
        return None;
    }
    let mut n = Vec3::zeros();
    n[axis] = sign;
    Some((t0, n))
}

fn cylinder(o: &Vec3, d: &Vec3, r: f64, hh: f64) -> Option<(f64, Vec3)> {
    let mut best: Option<(f64, Vec3)> = None;
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-15 {
        let b = o.x * d.x + o.y * d.y;
        let c = o.x * o.x + o.y * o.y - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / a;
            let z = o.z + t * d.z;
            if t > HIT_EPS && z.abs() <= hh {
                let p = o + d * t;
                best = Some((t, Vec3::new(p.x / r, p.y / r, 0.0)));
            }
        }
    }
    if d.z.abs() > 1e-15 {
        for (cap, nz) in [(hh, 1.0), (-hh, -1.0)] {
            let t = (cap - o.z) / d.z;
            let p = o + d * t;
            if t > HIT_EPS && p.x * p.x + p.y * p.y <= r * r && d.z * nz < 0.0 && best.is_none_or(|b| t < b.0) {
                best = Some((t, Vec3::new(0.0, 0.0, nz)));
            }
        }
    }
    best
}

/// Generated or loaded scene. Images are 8-bit quantized and depths are
/// f32-representable so saving and loading is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub spec: SceneSpec,
    pub cameras: Vec<Camera>,
    pub images: Vec<FeatureMap>,
    /// Per view, `h·w` ray distances; `NaN` where the ray misses.
    pub depths: Vec<Vec<f64>>,
    pub boxes: Vec<Box3D>,
}

impl SceneSample {
    pub fn grid(&self) -> VoxelGrid {
        self.spec.grid().expect("validated at generation")
    }

    pub fn depth_valid(&self, view: usize) -> Vec<bool> {
        self.depths[view].iter().map(|d| d.is_finite()).collect()
    }

    pub fn density(&self, p: &Vec3) -> f64 {
        self.spec.density(p)
    }
}

fn quantize(x: f64) -> f64 {
    (x.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SceneSample> {
    spec.validate()?;
    let cameras = spec.build_cameras()?;
    let light = Vec3::from(spec.light_dir).normalize();
    let mut images = Vec::with_capacity(cameras.len());
    let mut depths = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let (h, w) = (cam.height(), cam.width());
        let origin = cam.center();
        let pixels: Vec<([f64; 3], f64)> = exec::map_range(h * w, |i| {
            let dir = cam.pixel_direction((i % w) as f64, (i / w) as f64);
            match spec.cast(&origin, &dir) {
                None => ([0.0; 3], f64::NAN),
                Some((t, n, k)) => {
                    let shade = AMBIENT + (1.0 - AMBIENT) * n.dot(&light).max(0.0);
                    let a = spec.objects[k].albedo;
                    ([quantize(a[0] * shade), quantize(a[1] * shade), quantize(a[2] * shade)], t as f32 as f64)
                }
            }
        });
        images.push(FeatureMap::new(h, w, 3, pixels.iter().flat_map(|p| p.0).collect())?);
        depths.push(pixels.iter().map(|p| p.1).collect());
    }
    Ok(SceneSample {
        spec: spec.clone(),
        cameras,
        images,
        depths,
        boxes: spec.objects.iter().map(SceneObject::gt_box).collect(),
    })
}

/// Seed of scene `index` within a dataset seeded with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

pub fn generate_dataset(seed: u64, n: usize, profile: Profile) -> Result<Vec<SceneSample>> {
    let specs: Vec<SceneSpec> = (0..n).map(|i| SceneSpec::random(scene_seed(seed, i), profile)).collect();
    exec::map_range(n, |i| generate_scene(&specs[i])).into_iter().collect()
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    format_version: u32,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize, Deserialize)]
struct BoxesFile {
    boxes: Vec<Box3D>,
}

#[derive(Serialize, Deserialize)]
struct CamerasFile {
    cameras: Vec<Camera>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub seed: u64,
    pub profile: Profile,
    pub scenes: usize,
}

fn write_json<T: Serialize>(path: &Path, body: T) -> Result<()> {
    let v = Versioned {
        format_version: DATASET_VERSION,
        body,
    };
    fs::write(path, serde_json::to_string_pretty(&v).expect("serializable"))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::corrupt(path, e.to_string()))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::corrupt(path, "missing format_version"))?;
    if found != DATASET_VERSION as u64 {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: found as u32,
            expected: DATASET_VERSION,
        });
    }
    let v: Versioned<T> = serde_json::from_value(raw).map_err(|e| Error::corrupt(path, e.to_string()))?;
    Ok(v.body)
}

pub fn save_scene(sample: &SceneSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("depths"))?;
    write_json(&dir.join("spec.json"), &sample.spec)?;
    write_json(
        &dir.join("cameras.json"),
        CamerasFile {
            cameras: sample.cameras.clone(),
        },
    )?;
    write_json(
        &dir.join("boxes.json"),
        BoxesFile {
            boxes: sample.boxes.clone(),
        },
    )?;
    for (v, (img, depth)) in sample.images.iter().zip(&sample.depths).enumerate() {
        let bytes: Vec<u8> = img.data.iter().map(|x| (x * 255.0).round() as u8).collect();
        image::save_buffer(
            dir.join(format!("images/{v:04}.png")),
            &bytes,
            img.width as u32,
            img.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let mut raw = format!("VOXDEPTH {DATASET_VERSION} {} {}\n", img.height, img.width).into_bytes();
        for &d in depth {
            raw.extend_from_slice(&(d as f32).to_le_bytes());
        }
        fs::write(dir.join(format!("depths/{v:04}.f32")), raw)?;
    }
    Ok(())
}

fn read_depth(path: &Path, h: usize, w: usize) -> Result<Vec<f64>> {
    let raw = fs::read(path).map_err(|e| Error::corrupt(path, e.to_string()))?;
    let nl = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::corrupt(path, "missing header"))?;
    let header = std::str::from_utf8(&raw[..nl]).map_err(|_| Error::corrupt(path, "bad header"))?;
    let f: Vec<&str> = header.split_whitespace().collect();
    if f.len() != 4 || f[0] != "VOXDEPTH" {
        return Err(Error::corrupt(path, "bad header"));
    }
    let version: u32 = f[1].parse().map_err(|_| Error::corrupt(path, "bad version"))?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: DATASET_VERSION,
        });
    }
    if f[2] != h.to_string() || f[3] != w.to_string() {
        return Err(Error::corrupt(path, "size differs from the camera"));
    }
    let body = &raw[nl + 1..];
    if body.len() != h * w * 4 {
        return Err(Error::corrupt(path, format!("expected {} bytes, found {}", h * w * 4, body.len())));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn load_scene(dir: &Path) -> Result<SceneSample> {
    if !dir.is_dir() {
        return Err(Error::DatasetMissing(dir.to_path_buf()));
    }
    let spec: SceneSpec = read_json(&dir.join("spec.json"))?;
    spec.validate()?;
    let cameras = read_json::<CamerasFile>(&dir.join("cameras.json"))?.cameras;
    let boxes = read_json::<BoxesFile>(&dir.join("boxes.json"))?.boxes;
    let mut images = Vec::new();
    let mut depths = Vec::new();
    for (v, cam) in cameras.iter().enumerate() {
        let path = dir.join(format!("images/{v:04}.png"));
        let img = image::open(&path).map_err(|e| Error::corrupt(&path, e.to_string()))?.to_rgb8();
        if img.height() as usize != cam.height() || img.width() as usize != cam.width() {
            return Err(Error::corrupt(&path, "size differs from the camera"));
        }
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        images.push(FeatureMap::new(cam.height(), cam.width(), 3, data)?);
        depths.push(read_depth(&dir.join(format!("depths/{v:04}.f32")), cam.height(), cam.width())?);
    }
    Ok(SceneSample {
        spec,
        cameras,
        images,
        depths,
        boxes,
    })
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:04}"))
}

pub fn save_dataset(root: &Path, info: &DatasetInfo, scenes: &[SceneSample]) -> Result<()> {
    fs::create_dir_all(root)?;
    write_json(&root.join("dataset.json"), info)?;
    for (i, s) in scenes.iter().enumerate() {
        save_scene(s, &scene_dir(root, i))?;
    }
    Ok(())
}

pub fn load_dataset(root: &Path) -> Result<(DatasetInfo, Vec<SceneSample>)> {
    let index = root.join("dataset.json");
    if !index.is_file() {
        return Err(Error::DatasetMissing(root.to_path_buf()));
    }
    let info: DatasetInfo = read_json(&index)?;
    let scenes = (0..info.scenes)
        .map(|i| load_scene(&scene_dir(root, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok((info, scenes))
}

/// SHA-256 over every file below `root`, in sorted relative-path order,
/// covering both paths and contents.
pub fn dataset_hash(root: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut rel: Vec<(String, PathBuf)> = files
        .into_iter()
        .map(|p| (p.strip_prefix(root).expect("below root").to_string_lossy().replace('\\', "/"), p))
        .collect();
    rel.sort();
    let mut h = Sha256::new();
    for (name, p) in rel {
        h.update(name.as_bytes());
        h.update([0]);
        let bytes = fs::read(&p)?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
