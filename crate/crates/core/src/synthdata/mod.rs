//! Procedural piecewise-planar scenes with exact depth, flow and poses.
//!
//! A scene is a textured background plane plus a few bounded rectangles,
//! optionally a rectangle rigidly attached to the camera. Frames are
//! ray-cast per pixel; textures are sums of sinusoids whose shortest
//! wavelength spans several pixels at the patch's initial depth, so bilinear
//! resampling reproduces them closely.

mod io;

pub use io::{read_dataset, write_dataset, Dataset, DatasetManifest, SequenceEntry, FORMAT_MAGIC, FORMAT_VERSION};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{DepthMap, FlowField, Frame};
use crate::geometry::{
    mat3_transpose, mat3_vec, reproject_pixels, rotation_matrix, se3_compose, se3_invert, CameraIntrinsics,
    Mat3, PixelGrid, RotationOrder, Se3, Vec3,
};
use crate::tensor::Tensor;

/// Shortest texture wavelength in pixels at the patch's initial depth.
pub const MIN_WAVELENGTH_PX: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    /// Direction of variation in patch coordinates (radians).
    pub angle: f64,
    /// Scene units.
    pub wavelength: f64,
    pub amplitude: f64,
    /// Per-channel phase.
    pub phase: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f64; 3],
    pub waves: Vec<Sinusoid>,
}

impl Texture {
    /// Colour at patch coordinates `(a, b)`, clamped to `[0, 1]`.
    pub fn color(&self, a: f64, b: f64) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = (a * w.angle.cos() + b * w.angle.sin()) * 2.0 * PI / w.wavelength;
            for (ch, ci) in c.iter_mut().enumerate() {
                *ci += w.amplitude * (s + w.phase[ch]).sin();
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }

    /// Random texture whose wavelengths are at least `min_wavelength`.
    pub fn random(rng: &mut impl Rng, min_wavelength: f64) -> Self {
        let base = [0.0; 3].map(|_: f64| rng.gen_range(0.3..0.7));
        let n = 4;
        let waves = (0..n)
            .map(|_| Sinusoid {
                angle: rng.gen_range(0.0..PI),
                wavelength: min_wavelength * rng.gen_range(1.0..6.0),
                amplitude: rng.gen_range(0.05..0.1),
                phase: [0.0; 3].map(|_: f64| rng.gen_range(0.0..2.0 * PI)),
            })
            .collect();
        Texture { base, waves }
    }
}

/// Where a patch lives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    World,
    /// Rigidly attached to the camera; coordinates are camera-frame.
    Camera,
}

/// A planar patch: `origin + a·u + b·v` with `|a| ≤ half_extent[0]`,
/// `|b| ≤ half_extent[1]`. An infinite extent makes an unbounded plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub anchor: Anchor,
    pub origin: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub half_extent: [f64; 2],
    pub texture: Texture,
}

impl Patch {
    pub fn normal(&self) -> Vec3 {
        cross(&self.u, &self.v)
    }

    fn bounded(&self) -> bool {
        self.half_extent.iter().all(|e| e.is_finite())
    }
}

/// Camera pose per frame as world→camera transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub intrinsics: CameraIntrinsics,
    pub patches: Vec<Patch>,
    pub world_to_camera: Vec<Se3>,
}

impl SceneSpec {
    pub fn frames(&self) -> usize {
        self.world_to_camera.len()
    }
}

/// Knobs of the random scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub fx: f64,
    pub fy: f64,
    #[serde(default)]
    pub camera_object: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 64,
            width: 192,
            frames: 40,
            fx: 100.0,
            fy: 100.0,
            camera_object: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 || self.frames < 2 {
            return Err(Error::invalid(format!(
                "scene needs at least 2x2 pixels and 2 frames, got {}x{} and {}",
                self.height, self.width, self.frames
            )));
        }
        self.intrinsics().validate()
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
        }
    }
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Camera-to-world rotation and centre → world→camera transform.
pub fn world_to_camera(r_cw: &Mat3, centre: &Vec3) -> Se3 {
    let r = mat3_transpose(r_cw);
    let t = mat3_vec(&r, centre);
    Se3::from_rt(&r, &[-t[0], -t[1], -t[2]])
}

fn texture_wavelength(fx: f64, depth: f64) -> f64 {
    MIN_WAVELENGTH_PX * depth / fx
}

/// A random static scene and camera path.
pub fn generate_scene(cfg: &GeneratorConfig, seed: u64) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.intrinsics();
    let fmin = cfg.fx.min(cfg.fy);
    let mut patches = Vec::new();

    let bg_depth = rng.gen_range(36.0..40.0);
    patches.push(Patch {
        anchor: Anchor::World,
        origin: [0.0, 0.0, bg_depth],
        u: [1.0, 0.0, 0.0],
        v: [0.0, 1.0, 0.0],
        half_extent: [f64::INFINITY; 2],
        texture: Texture::random(&mut rng, texture_wavelength(fmin, bg_depth)),
    });

    let n_rect = rng.gen_range(3..=5);
    for _ in 0..n_rect {
        let z = rng.gen_range(14.0..30.0);
        let half_w = z * (cfg.width as f64 / 2.0) / cfg.fx;
        let half_h = z * (cfg.height as f64 / 2.0) / cfg.fy;
        let centre = [
            rng.gen_range(-0.8..0.8) * half_w,
            rng.gen_range(-0.6..0.6) * half_h,
            z,
        ];
        let tilt = rng.gen_range(0.0..25f64.to_radians());
        let axis_angle = rng.gen_range(0.0..2.0 * PI);
        // rotate the frontal basis about an in-plane axis
        let r = rotation_matrix([tilt * axis_angle.cos(), tilt * axis_angle.sin(), 0.0], RotationOrder::Xyz);
        patches.push(Patch {
            anchor: Anchor::World,
            origin: centre,
            u: mat3_vec(&r, &[1.0, 0.0, 0.0]),
            v: mat3_vec(&r, &[0.0, 1.0, 0.0]),
            half_extent: [rng.gen_range(0.15..0.35) * half_w, rng.gen_range(0.25..0.6) * half_h],
            texture: Texture::random(&mut rng, texture_wavelength(fmin, z)),
        });
    }

    if cfg.camera_object {
        let z = rng.gen_range(8.0..11.0);
        let half_w = z * (cfg.width as f64 / 2.0) / cfg.fx;
        let half_h = z * (cfg.height as f64 / 2.0) / cfg.fy;
        patches.push(Patch {
            anchor: Anchor::Camera,
            origin: [rng.gen_range(-0.4..0.4) * half_w, rng.gen_range(-0.2..0.2) * half_h, z],
            u: [1.0, 0.0, 0.0],
            v: [0.0, 1.0, 0.0],
            half_extent: [0.2 * half_w, 0.35 * half_h],
            texture: Texture::random(&mut rng, texture_wavelength(fmin, z)),
        });
    }

    let vz = rng.gen_range(0.15..0.3);
    let vx = rng.gen_range(-0.15..0.15);
    let yaw_rate = rng.gen_range(-0.003..0.003);
    let world_to_camera = (0..cfg.frames)
        .map(|i| {
            let f = i as f64;
            let r_cw = rotation_matrix([0.0, yaw_rate * f, 0.0], RotationOrder::Xyz);
            world_to_camera(&r_cw, &[vx * f, 0.0, vz * f])
        })
        .collect();

    Ok(SceneSpec {
        height: cfg.height,
        width: cfg.width,
        intrinsics: k,
        patches,
        world_to_camera,
    })
}

/// Closest hit along the camera ray through pixel `(x, y)`:
/// `(camera depth, patch index, colour)`.
fn cast(spec: &SceneSpec, cam: &[(Vec3, Vec3, Vec3, Vec3)], x: usize, y: usize) -> Option<(f64, usize, [f64; 3])> {
    let ray = spec.intrinsics.back_project(x as f64, y as f64);
    let mut best: Option<(f64, usize, f64, f64)> = None;
    for (i, (origin, u, v, n)) in cam.iter().enumerate() {
        let denom = dot(n, &ray);
        if denom.abs() < 1e-12 {
            continue;
        }
        // ray z-component is 1, so the ray parameter is the camera depth
        let s = dot(n, origin) / denom;
        if !(s > 0.0) || best.is_some_and(|b| b.0 <= s) {
            continue;
        }
        let rel = sub(&[ray[0] * s, ray[1] * s, s], origin);
        let (a, b) = (dot(&rel, u), dot(&rel, v));
        let p = &spec.patches[i];
        if p.bounded() && (a.abs() > p.half_extent[0] || b.abs() > p.half_extent[1]) {
            continue;
        }
        best = Some((s, i, a, b));
    }
    best.map(|(s, i, a, b)| (s, i, spec.patches[i].texture.color(a, b)))
}

/// Patch geometry expressed in the camera frame of `frame`.
fn camera_patches(spec: &SceneSpec, frame: usize) -> Vec<(Vec3, Vec3, Vec3, Vec3)> {
    let t = &spec.world_to_camera[frame];
    let r = t.rotation();
    spec.patches
        .iter()
        .map(|p| match p.anchor {
            Anchor::Camera => (p.origin, p.u, p.v, p.normal()),
            Anchor::World => {
                let o = t.transform_point(&p.origin);
                let u = mat3_vec(&r, &p.u);
                let v = mat3_vec(&r, &p.v);
                (o, u, v, cross(&u, &v))
            }
        })
        .collect()
}

/// Frames, depths, flows (frame `i → i+1`), world→camera poses and
/// intrinsics of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub frames: Vec<Frame>,
    pub depths: Vec<DepthMap>,
    pub flows: Vec<FlowField>,
    pub poses: Vec<Se3>,
    pub intrinsics: CameraIntrinsics,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    /// Transform taking frame-`from` camera points to frame-`to` camera
    /// coordinates.
    pub fn relative_pose(&self, from: usize, to: usize) -> Result<Se3> {
        se3_compose(&self.poses[to], &se3_invert(&self.poses[from])?)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t == 0 || self.depths.len() != t || self.poses.len() != t || self.flows.len() + 1 != t {
            return Err(Error::invalid(format!(
                "sequence counts disagree: {} frames, {} depths, {} flows, {} poses",
                t,
                self.depths.len(),
                self.flows.len(),
                self.poses.len()
            )));
        }
        let (h, w) = (self.height(), self.width());
        let ok = self.frames.iter().all(|f| (f.height(), f.width()) == (h, w))
            && self.depths.iter().all(|d| (d.height(), d.width()) == (h, w))
            && self.flows.iter().all(|f| (f.height(), f.width()) == (h, w));
        if !ok {
            return Err(Error::invalid("sequence arrays disagree in size"));
        }
        Ok(())
    }
}

/// Per-pixel mask of pixels showing camera-anchored patches, per frame.
pub fn camera_object_mask(spec: &SceneSpec, frame: usize) -> Vec<bool> {
    let cam = camera_patches(spec, frame);
    let mut out = Vec::with_capacity(spec.height * spec.width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            out.push(cast(spec, &cam, x, y).is_some_and(|(_, i, _)| spec.patches[i].anchor == Anchor::Camera));
        }
    }
    out
}

/// `reproject(j) - j` for every pixel `j`.
pub fn rigid_flow(depth: &DepthMap, k: &CameraIntrinsics, t_rel: &Se3) -> Result<FlowField> {
    let grid = PixelGrid::new(depth.height(), depth.width());
    let coords = reproject_pixels(&grid, depth, k, t_rel)?;
    let flow = coords.zip_map(&grid.uv(), |a, b| a - b)?;
    if !flow.all_finite() {
        return Err(Error::Generation("rigid flow hits a point behind the camera".into()));
    }
    FlowField::new(flow)
}

/// Renders every frame of `spec`. All randomness lives in the spec itself
/// (textures, layout, trajectory), so rendering is a pure function of it.
pub fn render_sequence(spec: &SceneSpec) -> Result<SequenceRecord> {
    spec.intrinsics.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut frames = Vec::with_capacity(spec.frames());
    let mut depths = Vec::with_capacity(spec.frames());
    let mut objects = Vec::with_capacity(spec.frames());
    for f in 0..spec.frames() {
        let cam = camera_patches(spec, f);
        let mut rgb = Tensor::zeros(&[3, h, w]);
        let mut depth = Tensor::zeros(&[1, h, w]);
        let mut obj = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (d, i, c) = cast(spec, &cam, x, y).ok_or_else(|| {
                    Error::Generation(format!("frame {f}: pixel ({x}, {y}) sees no surface"))
                })?;
                depth.set3(0, y, x, d);
                for (ch, v) in c.iter().enumerate() {
                    rgb.set3(ch, y, x, *v);
                }
                obj[y * w + x] = spec.patches[i].anchor == Anchor::Camera;
            }
        }
        frames.push(Frame::new(rgb)?);
        depths.push(DepthMap::new(depth)?);
        objects.push(obj);
    }
    let mut flows = Vec::with_capacity(spec.frames().saturating_sub(1));
    for f in 0..spec.frames().saturating_sub(1) {
        let t_rel = se3_compose(&spec.world_to_camera[f + 1], &se3_invert(&spec.world_to_camera[f])?)?;
        let mut flow = rigid_flow(&depths[f], &spec.intrinsics, &t_rel)?.into_tensor();
        // camera-anchored surfaces do not move in the image
        for (p, &o) in objects[f].iter().enumerate() {
            if o {
                flow.data_mut()[p] = 0.0;
                flow.data_mut()[h * w + p] = 0.0;
            }
        }
        flows.push(FlowField::new(flow)?);
    }
    Ok(SequenceRecord {
        frames,
        depths,
        flows,
        poses: spec.world_to_camera.clone(),
        intrinsics: spec.intrinsics,
    })
}

/// `count` sequences from consecutive sub-seeds of `seed`.
pub fn generate_dataset(cfg: &GeneratorConfig, count: usize, seed: u64) -> Result<Vec<(SceneSpec, SequenceRecord)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let spec = generate_scene(cfg, rng.gen())?;
            let rec = render_sequence(&spec)?;
            Ok((spec, rec))
        })
        .collect()
}

/// Mean absolute error of reconstructing frame `i` from frame `i + 1` with
/// the ground-truth depth of frame `i` and the relative pose, over valid
/// pixels.
pub fn rigid_warp_error(rec: &SequenceRecord, i: usize) -> Result<f64> {
    let t_rel = rec.relative_pose(i, i + 1)?;
    let (recon, valid) = crate::geometry::inverse_warp(&rec.frames[i + 1], &rec.depths[i], &rec.intrinsics, &t_rel)?;
    let target = rec.frames[i].tensor();
    let (_, h, w) = target.dims3()?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..h * w {
        if !valid.data()[p] {
            continue;
        }
        for c in 0..3 {
            sum += (recon.data()[c * h * w + p] - target.data()[c * h * w + p]).abs();
        }
        n += 3;
    }
    if n == 0 {
        return Err(Error::Generation(format!("frame {i}: no valid pixels in the warp check")));
    }
    Ok(sum / n as f64)
}
