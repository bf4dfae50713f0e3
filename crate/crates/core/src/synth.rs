//! Procedural scenes and an exact pinhole raycaster.
//!
//! Scenes are a handful of textured planes, spheres and boxes inside a
//! bounded working volume around the origin. Rendering shoots one ray per
//! pixel centre and records the nearest hit, so depth, normals and pixel
//! correspondences are exact up to float32 storage.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    unproject_depth_to_pointmap, CameraIntrinsics, DepthMap, Frame, Mask, NormalMap, Pointmap, RigidPose, Vec3,
};
use crate::linalg::{dot, norm, scale, sub};
use crate::prelude::*;

/// Half-width of the cubic working volume primitives are placed in.
pub const WORKING_VOLUME: f64 = 1.0;
/// Radius of the ball around the origin that the first primitive always
/// intersects and that cameras aim at.
pub const TARGET_RADIUS: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Rectangle in the local xy plane.
    Plane {
        half_extents: [f64; 2],
    },
    Sphere {
        radius: f64,
    },
    Box {
        half_extents: [f64; 3],
    },
}

impl Shape {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Shape::Plane { .. } => "plane",
            Shape::Sphere { .. } => "sphere",
            Shape::Box { .. } => "box",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextureKind {
    Checker,
    ValueNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub kind: TextureKind,
    /// Cell size in object units.
    pub scale: f64,
    /// The two albedo levels the pattern blends between.
    pub albedo: [f64; 2],
    pub tint: [f64; 3],
    pub seed: u64,
}

/// Smallest allowed gap between the two albedo levels.
pub const MIN_ALBEDO_CONTRAST: f64 = 0.05;

impl Texture {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::InvalidConfig(format!("texture scale must be positive, got {}", self.scale)));
        }
        if self.albedo.iter().chain(&self.tint).any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidConfig("albedo and tint must lie in [0, 1]".into()));
        }
        if (self.albedo[0] - self.albedo[1]).abs() < MIN_ALBEDO_CONTRAST {
            return Err(Error::InvalidConfig("texture is effectively uniform; matching needs contrast".into()));
        }
        Ok(())
    }

    fn albedo_at(&self, p: Vec3) -> f64 {
        let t = match self.kind {
            TextureKind::Checker => {
                let s: i64 = p.iter().map(|c| (c / self.scale).floor() as i64).sum();
                (s.rem_euclid(2)) as f64
            }
            TextureKind::ValueNoise => {
                value_noise([p[0] / self.scale, p[1] / self.scale, p[2] / self.scale], self.seed)
            }
        };
        self.albedo[0] + (self.albedo[1] - self.albedo[0]) * t
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let h = splitmix(
        seed ^ splitmix(
            (ix as u64).wrapping_mul(73_856_093)
                ^ splitmix((iy as u64).wrapping_mul(19_349_663) ^ (iz as u64).wrapping_mul(83_492_791)),
        ),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise in [0, 1].
fn value_noise(p: Vec3, seed: u64) -> f64 {
    let f = [p[0].floor(), p[1].floor(), p[2].floor()];
    let i = [f[0] as i64, f[1] as i64, f[2] as i64];
    let t: Vec<f64> = (0..3)
        .map(|k| {
            let x = p[k] - f[k];
            x * x * (3.0 - 2.0 * x)
        })
        .collect();
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { t[0] } else { 1.0 - t[0] })
                    * (if dy == 1 { t[1] } else { 1.0 - t[1] })
                    * (if dz == 1 { t[2] } else { 1.0 - t[2] });
                acc += w * lattice(i[0] + dx, i[1] + dy, i[2] + dz, seed);
            }
        }
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    pub shape: Shape,
    /// Object-to-world transform.
    pub pose: RigidPose,
    pub texture: Texture,
}

impl ScenePrimitive {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.shape {
            Shape::Plane { half_extents } => half_extents.iter().all(|h| *h > 0.0),
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
        };
        if !ok {
            return Err(Error::InvalidConfig(format!("{} size parameters must be positive", self.shape.kind_name())));
        }
        self.texture.validate()
    }

    /// Nearest hit with `t > 0` of a world-space ray; returns distance along
    /// `dir` (unit length), the world normal and the object-frame point.
    fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3, Vec3)> {
        let inv = self.pose.inverse();
        let o = inv.apply(origin);
        let d = inv.rotate(dir);
        let (t, n_obj) = match self.shape {
            Shape::Plane { half_extents } => {
                if d[2].abs() < 1e-15 {
                    return None;
                }
                let t = -o[2] / d[2];
                let p = [o[0] + t * d[0], o[1] + t * d[1]];
                if t <= 1e-9 || p[0].abs() > half_extents[0] || p[1].abs() > half_extents[1] {
                    return None;
                }
                (t, [0.0, 0.0, 1.0])
            }
            Shape::Sphere { radius } => {
                let b = dot(o, d);
                let c = dot(o, o) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > 1e-9 {
                    -b - sq
                } else if -b + sq > 1e-9 {
                    -b + sq
                } else {
                    return None;
                };
                let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                (t, scale(p, 1.0 / radius))
            }
            Shape::Box { half_extents } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis_near = 0;
                let mut axis_far = 0;
                for k in 0..3 {
                    if d[k].abs() < 1e-15 {
                        if o[k].abs() > half_extents[k] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-half_extents[k] - o[k]) / d[k];
                    let t2 = (half_extents[k] - o[k]) / d[k];
                    let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    if lo > t_near {
                        t_near = lo;
                        axis_near = k;
                    }
                    if hi < t_far {
                        t_far = hi;
                        axis_far = k;
                    }
                }
                if t_near > t_far || t_far <= 1e-9 {
                    return None;
                }
                let (t, axis) = if t_near > 1e-9 { (t_near, axis_near) } else { (t_far, axis_far) };
                let p = o[axis] + t * d[axis];
                let mut n = [0.0; 3];
                n[axis] = if p > 0.0 { 1.0 } else { -1.0 };
                (t, n)
            }
        };
        let p_obj = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
        Some((t, self.pose.rotate(n_obj), p_obj))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<ScenePrimitive>,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub distance: f64,
    pub normal: Vec3,
    pub primitive: usize,
    pub local_point: Vec3,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.primitives.iter().try_for_each(ScenePrimitive::validate)
    }

    /// Nearest primitive hit along a unit-length world ray.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, prim) in self.primitives.iter().enumerate() {
            if let Some((t, n, p)) = prim.intersect(origin, dir) {
                if best.map_or(true, |b| t < b.distance) {
                    best = Some(Hit { distance: t, normal: n, primitive: i, local_point: p });
                }
            }
        }
        best
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(0.0..core::f64::consts::PI);
    Rotation3::new(Vector3::from(axis) * angle)
}

fn random_texture(rng: &mut ChaCha8Rng) -> Texture {
    let kind = if rng.random_bool(0.5) { TextureKind::Checker } else { TextureKind::ValueNoise };
    let scale = match kind {
        TextureKind::Checker => rng.random_range(0.12..0.3),
        TextureKind::ValueNoise => rng.random_range(0.06..0.15),
    };
    Texture {
        kind,
        scale,
        albedo: [rng.random_range(0.05..0.35), rng.random_range(0.65..1.0)],
        tint: [rng.random_range(0.4..1.0), rng.random_range(0.4..1.0), rng.random_range(0.4..1.0)],
        seed: rng.random(),
    }
}

/// Deterministic scene of `n_primitives` primitives. The first primitive is
/// centred within 0.2 of the origin so it always intersects the ball of
/// radius [`TARGET_RADIUS`] cameras aim at.
pub fn generate_scene(seed: u64, n_primitives: usize) -> Result<Scene> {
    if n_primitives == 0 {
        return Err(Error::InvalidConfig("a scene needs at least one primitive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primitives = Vec::with_capacity(n_primitives);
    for i in 0..n_primitives {
        let shape = match rng.random_range(0..3) {
            0 => Shape::Plane { half_extents: [rng.random_range(0.6..1.5), rng.random_range(0.6..1.5)] },
            1 => Shape::Sphere { radius: rng.random_range(0.3..0.7) },
            _ => Shape::Box {
                half_extents: [rng.random_range(0.2..0.6), rng.random_range(0.2..0.6), rng.random_range(0.2..0.6)],
            },
        };
        let reach = if i == 0 { 0.2 } else { WORKING_VOLUME };
        let centre = Vector3::new(
            rng.random_range(-reach..reach),
            rng.random_range(-reach..reach),
            rng.random_range(-reach..reach),
        );
        let rotation = random_rotation(&mut rng);
        primitives.push(ScenePrimitive {
            shape,
            pose: RigidPose { rotation: *rotation.matrix(), translation: centre },
            texture: random_texture(&mut rng),
        });
    }
    Ok(Scene { primitives })
}

/// Camera pair sampler settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSampler {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view range in degrees.
    pub fov_deg: (f64, f64),
    /// Distance range from the aim point.
    pub distance: (f64, f64),
    /// Largest orbit angle between the two cameras around the aim point.
    pub max_baseline_deg: f64,
    pub min_overlap: f64,
    /// Minimum fraction of view-1 pixels that must hit geometry.
    pub min_coverage: f64,
    pub max_attempts: usize,
}

impl Default for CameraSampler {
    fn default() -> Self {
        CameraSampler {
            width: 64,
            height: 64,
            fov_deg: (45.0, 60.0),
            distance: (2.6, 3.6),
            max_baseline_deg: 15.0,
            min_overlap: 0.5,
            min_coverage: 0.25,
            max_attempts: 200,
        }
    }
}

impl CameraSampler {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_overlap > 0.0 && self.min_overlap <= 1.0) {
            return Err(Error::InvalidConfig(format!("min_overlap must lie in (0, 1], got {}", self.min_overlap)));
        }
        if self.width == 0 || self.height == 0 || self.max_attempts == 0 {
            return Err(Error::InvalidConfig("camera sampler needs a non-empty image and at least one attempt".into()));
        }
        if !(self.fov_deg.0 > 0.0 && self.fov_deg.0 <= self.fov_deg.1 && self.fov_deg.1 < 180.0) {
            return Err(Error::InvalidConfig("field of view range must be increasing within (0, 180)".into()));
        }
        if !(self.distance.0 > 0.0 && self.distance.0 <= self.distance.1) {
            return Err(Error::InvalidConfig("camera distance range must be positive and increasing".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: RigidPose,
}

fn range(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 < r.1 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

fn sample_intrinsics(rng: &mut ChaCha8Rng, cfg: &CameraSampler) -> CameraIntrinsics {
    let fov = range(rng, cfg.fov_deg).to_radians();
    let f = (cfg.width as f64 / 2.0) / (fov / 2.0).tan();
    CameraIntrinsics {
        fx: f,
        fy: f,
        cx: cfg.width as f64 / 2.0,
        cy: cfg.height as f64 / 2.0,
        width: cfg.width,
        height: cfg.height,
    }
}

fn any_perpendicular(v: &Vector3<f64>) -> Vector3<f64> {
    let helper = if v.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    v.cross(&helper).normalize()
}

fn sample_candidate(rng: &mut ChaCha8Rng, cfg: &CameraSampler) -> Result<[Camera; 2]> {
    let jitter = |rng: &mut ChaCha8Rng| {
        Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2))
    };
    let target = jitter(rng);
    let dir1 = Vector3::from(UnitSphere.sample(rng));
    let dist1 = range(rng, cfg.distance);
    let eye1 = target + dir1 * dist1;
    let roll = rng.random_range(-0.25..0.25);
    let base_down = any_perpendicular(&dir1);
    let down1 = Rotation3::new(dir1 * roll) * base_down;
    let pose1 = RigidPose::look_at(eye1, target, down1)?;

    let axis = {
        let a = any_perpendicular(&dir1);
        let spin = rng.random_range(0.0..core::f64::consts::TAU);
        Rotation3::new(dir1 * spin) * a
    };
    let angle = rng.random_range(0.0..=cfg.max_baseline_deg.max(0.0)).to_radians();
    let orbit = Rotation3::new(axis * angle);
    let dist2 = dist1 * rng.random_range(0.85..1.15);
    let target2 = target + jitter(rng) * 0.5;
    let eye2 = target2 + (orbit * dir1) * dist2;
    let down2 = orbit * down1;
    let pose2 = RigidPose::look_at(eye2, target2, down2)?;

    let k1 = sample_intrinsics(rng, cfg);
    let k2 = sample_intrinsics(rng, cfg);
    Ok([Camera { intrinsics: k1, pose: pose1 }, Camera { intrinsics: k2, pose: pose2 }])
}

/// Fraction of view-1 pixels hitting geometry and, of those, the fraction
/// whose 3D point is inside view 2's frustum and unoccluded from it.
pub fn measure_overlap(scene: &Scene, cams: &[Camera; 2]) -> (f64, f64) {
    let (k1, k2) = (&cams[0].intrinsics, &cams[1].intrinsics);
    let eye2 = [cams[1].pose.translation[0], cams[1].pose.translation[1], cams[1].pose.translation[2]];
    let world_to_2 = cams[1].pose.inverse();
    let mut hits = 0usize;
    let mut visible = 0usize;
    for v in 0..k1.height {
        for u in 0..k1.width {
            let Some((point, _)) = cast_pixel(scene, &cams[0], u, v) else { continue };
            hits += 1;
            let local = world_to_2.apply(point);
            let Some((pu, pv)) = k2.project(local) else { continue };
            if !(pu >= -0.5 && pu < k2.width as f64 - 0.5 && pv >= -0.5 && pv < k2.height as f64 - 0.5) {
                continue;
            }
            let to = sub(point, eye2);
            let dist = norm(to);
            let dir = scale(to, 1.0 / dist);
            if let Some(h) = scene.intersect(eye2, dir) {
                if h.distance >= dist * (1.0 - 1e-6) - 1e-9 {
                    visible += 1;
                }
            }
        }
    }
    let n = (k1.width * k1.height) as f64;
    if hits == 0 {
        return (0.0, 0.0);
    }
    (hits as f64 / n, visible as f64 / hits as f64)
}

/// Rejection-samples two cameras whose views overlap by at least
/// `cfg.min_overlap`.
pub fn sample_camera_pair(scene: &Scene, seed: u64, cfg: &CameraSampler) -> Result<[Camera; 2]> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0xC0FF_EE00));
    for _ in 0..cfg.max_attempts {
        let Ok(cams) = sample_candidate(&mut rng, cfg) else { continue };
        let (coverage, overlap) = measure_overlap(scene, &cams);
        if coverage >= cfg.min_coverage && overlap >= cfg.min_overlap {
            return Ok(cams);
        }
    }
    Err(Error::RetryCapExceeded(cfg.max_attempts))
}

fn cast_pixel(scene: &Scene, cam: &Camera, u: usize, v: usize) -> Option<(Vec3, Hit)> {
    let ray_cam = cam.intrinsics.ray(u as f64, v as f64);
    let len = norm(ray_cam);
    let dir = cam.pose.rotate(scale(ray_cam, 1.0 / len));
    let eye = [cam.pose.translation[0], cam.pose.translation[1], cam.pose.translation[2]];
    let hit = scene.intersect(eye, dir)?;
    let p = [eye[0] + hit.distance * dir[0], eye[1] + hit.distance * dir[1], eye[2] + hit.distance * dir[2]];
    Some((p, hit))
}

/// RGB image with values in [0, 1], row-major, 3 interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape("image", width * height * 3, data.len()));
        }
        Ok(Image { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn pixel(&self, idx: usize) -> [f32; 3] {
        [self.data[3 * idx], self.data[3 * idx + 1], self.data[3 * idx + 2]]
    }
}

/// Direction towards the light (world frame) and the ambient term.
const LIGHT_DIR: Vec3 = [0.36, -0.8, -0.48];
const AMBIENT: f64 = 0.35;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub image: Image,
    pub depth: DepthMap,
    pub normals: NormalMap,
    pub pointmap: Pointmap,
}

/// Raycasts one view. Depth and normals are rounded to float32 and the
/// image to 8-bit levels so the result survives serialization bit-exactly;
/// the pointmap is rebuilt from the rounded depth.
pub fn render_view(scene: &Scene, camera: &Camera, frame: Frame) -> Result<RenderedView> {
    let k = &camera.intrinsics;
    let (w, h) = (k.width, k.height);
    let world_to_cam = camera.pose.inverse();
    let light = scale(LIGHT_DIR, 1.0 / norm(LIGHT_DIR));
    let mut image = Image::zeros(w, h);
    let mut depth = vec![0.0; w * h];
    let mut normals = vec![[0.0; 3]; w * h];
    let mut bits = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            let idx = v * w + u;
            let Some((point, hit)) = cast_pixel(scene, camera, u, v) else { continue };
            let local = world_to_cam.apply(point);
            let d = local[2] as f32 as f64;
            if !(d > 0.0) {
                continue;
            }
            let mut n_world = hit.normal;
            let eye = [camera.pose.translation[0], camera.pose.translation[1], camera.pose.translation[2]];
            if dot(n_world, sub(point, eye)) > 0.0 {
                n_world = scale(n_world, -1.0);
            }
            let n_cam = world_to_cam.rotate(n_world);
            normals[idx] = [n_cam[0] as f32 as f64, n_cam[1] as f32 as f64, n_cam[2] as f32 as f64];
            depth[idx] = d;
            bits[idx] = true;

            let prim = &scene.primitives[hit.primitive];
            let albedo = prim.texture.albedo_at(hit.local_point);
            let shade = AMBIENT + (1.0 - AMBIENT) * dot(n_world, light).max(0.0);
            for c in 0..3 {
                let value = (albedo * prim.texture.tint[c] * shade).clamp(0.0, 1.0);
                image.data[3 * idx + c] = ((value * 255.0).round() / 255.0) as f32;
            }
        }
    }
    let mask = Mask::new(w, h, bits)?;
    let depth = DepthMap::new(w, h, depth, mask.clone())?;
    let pointmap = unproject_depth_to_pointmap(&depth, k, frame)?;
    let normals = NormalMap::new(w, h, normals, frame, mask)?;
    Ok(RenderedView { image, depth, normals, pointmap })
}

/// Pixel index pairs `(idx in view 1, idx in view 2)`, row-major indexing.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(u32, u32)>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Each index occurs at most once on each side.
    pub fn is_injective(&self) -> bool {
        let mut a: Vec<u32> = self.pairs.iter().map(|p| p.0).collect();
        let mut b: Vec<u32> = self.pairs.iter().map(|p| p.1).collect();
        a.sort_unstable();
        b.sort_unstable();
        a.windows(2).all(|w| w[0] != w[1]) && b.windows(2).all(|w| w[0] != w[1])
    }

    pub fn transposed(&self) -> CorrespondenceSet {
        CorrespondenceSet { pairs: self.pairs.iter().map(|(a, b)| (*b, *a)).collect() }
    }
}

/// Relative depth tolerance for accepting a correspondence.
pub const MATCH_DEPTH_TOLERANCE: f64 = 0.01;
/// Largest reverse reprojection error for accepting a correspondence.
pub const MATCH_REPROJECTION_PX: f64 = 0.5;

/// Mutually consistent pixel correspondences between two rendered views.
pub fn ground_truth_correspondences(
    pm: [&Pointmap; 2],
    intrinsics: [&CameraIntrinsics; 2],
    poses: [&RigidPose; 2],
) -> CorrespondenceSet {
    let rel12 = poses[0].relative_to(poses[1]);
    let rel21 = poses[1].relative_to(poses[0]);
    let (k1, k2) = (intrinsics[0], intrinsics[1]);
    let w2 = pm[1].width;
    let mut taken = vec![false; pm[1].points.len()];
    let mut pairs = Vec::new();
    for i in pm[0].mask.valid_indices() {
        let q = rel12.apply(pm[0].points[i]);
        let Some((pu, pv)) = k2.project(q) else { continue };
        let (ju, jv) = (pu.round(), pv.round());
        if ju < 0.0 || jv < 0.0 || ju >= pm[1].width as f64 || jv >= pm[1].height as f64 {
            continue;
        }
        let j = jv as usize * w2 + ju as usize;
        if !pm[1].mask.get(j) {
            continue;
        }
        let dj = pm[1].points[j][2];
        if (dj - q[2]).abs() > MATCH_DEPTH_TOLERANCE * q[2] {
            continue;
        }
        let back = rel21.apply(pm[1].points[j]);
        let Some((bu, bv)) = k1.project(back) else { continue };
        let (iu, iv) = ((i % pm[0].width) as f64, (i / pm[0].width) as f64);
        if (bu - iu).hypot(bv - iv) >= MATCH_REPROJECTION_PX || taken[j] {
            continue;
        }
        taken[j] = true;
        pairs.push((i as u32, j as u32));
    }
    CorrespondenceSet { pairs }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewData {
    pub image: Image,
    pub depth: DepthMap,
    pub normals: NormalMap,
    pub pointmap: Pointmap,
    pub intrinsics: CameraIntrinsics,
    pub pose: RigidPose,
}

impl ViewData {
    pub fn from_render(render: RenderedView, camera: &Camera) -> Self {
        ViewData {
            image: render.image,
            depth: render.depth,
            normals: render.normals,
            pointmap: render.pointmap,
            intrinsics: camera.intrinsics,
            pose: camera.pose,
        }
    }

    /// Keeps every `factor`-th pixel along both axes (pixel `k` of the result
    /// is pixel `k * factor` of the source).
    pub fn subsampled(&self, factor: usize, frame: Frame) -> Result<ViewData> {
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.depth.width, self.depth.height);
        if factor == 0 || w % factor != 0 || h % factor != 0 {
            return Err(Error::shape("subsampling factor", (w, h), factor));
        }
        let (nw, nh) = (w / factor, h / factor);
        let src = |k: usize| (k / nw) * factor * w + (k % nw) * factor;
        let mut img = Vec::with_capacity(nw * nh * 3);
        for k in 0..nw * nh {
            img.extend_from_slice(&self.image.pixel(src(k)));
        }
        let bits: Vec<bool> = (0..nw * nh).map(|k| self.depth.mask.get(src(k))).collect();
        let mask = Mask::new(nw, nh, bits)?;
        let depth = DepthMap::new(nw, nh, (0..nw * nh).map(|k| self.depth.depth[src(k)]).collect(), mask.clone())?;
        let intrinsics = self.intrinsics.subsampled(factor);
        let pointmap = unproject_depth_to_pointmap(&depth, &intrinsics, frame)?;
        let normals =
            NormalMap::new(nw, nh, (0..nw * nh).map(|k| self.normals.normals[src(k)]).collect(), frame, mask)?;
        Ok(ViewData { image: Image::new(nw, nh, img)?, depth, normals, pointmap, intrinsics, pose: self.pose })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPairSample {
    pub seed: u64,
    pub views: [ViewData; 2],
    pub matches: CorrespondenceSet,
}

impl ViewPairSample {
    pub fn from_views(seed: u64, views: [ViewData; 2]) -> Self {
        let matches = ground_truth_correspondences(
            [&views[0].pointmap, &views[1].pointmap],
            [&views[0].intrinsics, &views[1].intrinsics],
            [&views[0].pose, &views[1].pose],
        );
        ViewPairSample { seed, views, matches }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.views[0].depth.width, self.views[0].depth.height)
    }

    pub fn subsampled(&self, factor: usize) -> Result<ViewPairSample> {
        if factor == 1 {
            return Ok(self.clone());
        }
        let v0 = self.views[0].subsampled(factor, Frame::View(0))?;
        let v1 = self.views[1].subsampled(factor, Frame::View(1))?;
        Ok(ViewPairSample::from_views(self.seed, [v0, v1]))
    }

    /// Ground-truth pointmap of view `v` expressed in the other view's frame.
    pub fn cross_pointmap(&self, v: usize) -> Result<Pointmap> {
        let t = 1 - v;
        crate::geometry::transform_pointmap(
            &self.views[v].pointmap,
            &crate::geometry::PosedFrame { frame: Frame::View(v as u32), pose: self.views[v].pose },
            &crate::geometry::PosedFrame { frame: Frame::View(t as u32), pose: self.views[t].pose },
        )
    }

    /// Ground-truth normals of view `v` expressed in (and facing) the other
    /// view's camera.
    pub fn cross_normals(&self, v: usize) -> Result<NormalMap> {
        let t = 1 - v;
        let rel = self.views[v].pose.relative_to(&self.views[t].pose);
        crate::geometry::transform_normals(&self.views[v].normals, &rel.rotation, &self.cross_pointmap(v)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub n_primitives: usize,
    pub cameras: CameraSampler,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { n_primitives: 4, cameras: CameraSampler::default() }
    }
}

/// Scene, cameras, both renders and correspondences from one seed.
pub fn generate_sample(seed: u64, cfg: &SampleConfig) -> Result<ViewPairSample> {
    let scene = generate_scene(seed, cfg.n_primitives)?;
    scene.validate()?;
    let cams = sample_camera_pair(&scene, seed, &cfg.cameras)?;
    let v0 = ViewData::from_render(render_view(&scene, &cams[0], Frame::View(0))?, &cams[0]);
    let v1 = ViewData::from_render(render_view(&scene, &cams[1], Frame::View(1))?, &cams[1]);
    Ok(ViewPairSample::from_views(seed, [v0, v1]))
}
