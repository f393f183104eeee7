//! Pinhole camera and rigid-motion kernels: pose parameterization, SE(3)
//! algebra, reprojection of target pixels into a source view, bilinear
//! sampling and inverse warping.
//!
//! Conventions: right-handed camera frame looking down +z, pixel centres at
//! integer coordinates, `u` along the width. A transform passed to
//! [`reproject_pixels`] maps 3-D points expressed in the *target* camera frame
//! into the *source* camera frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{DepthMap, Frame, Mask};
use crate::kernels;
use crate::tensor::Tensor;

/// Transformed depths at or below this are treated as behind the camera.
pub const MIN_TRANSFORMED_DEPTH: f64 = 1e-6;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive and finite, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::invalid("principal point must be finite"));
        }
        Ok(())
    }

    /// Unit-depth ray `K⁻¹ (u, v, 1)`.
    #[inline]
    pub fn back_project(&self, u: f64, v: f64) -> Vec3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    #[inline]
    pub fn project(&self, p: Vec3) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }
}

/// Order in which the three elementary rotations are multiplied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationOrder {
    /// `R = Rx(rho) · Ry(theta) · Rz(psi)`
    #[default]
    Xyz,
    /// `R = Rz(psi) · Ry(theta) · Rx(rho)`
    Zyx,
}

/// Translation plus Euler angles (radians).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose6DoF {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub rho: f64,
    pub theta: f64,
    pub psi: f64,
}

impl Pose6DoF {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match *v {
            [tx, ty, tz, rho, theta, psi] => Ok(Pose6DoF {
                tx,
                ty,
                tz,
                rho,
                theta,
                psi,
            }),
            _ => Err(Error::invalid(format!("a pose has 6 components, got {}", v.len()))),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.tx, self.ty, self.tz, self.rho, self.theta, self.psi]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn d_rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]]
}

fn d_rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]]
}

fn d_rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]]
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat3_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

fn product3(order: RotationOrder, x: Mat3, y: Mat3, z: Mat3) -> Mat3 {
    match order {
        RotationOrder::Xyz => mat3_mul(&mat3_mul(&x, &y), &z),
        RotationOrder::Zyx => mat3_mul(&mat3_mul(&z, &y), &x),
    }
}

/// Rotation from Euler angles `(rho, theta, psi)` about x, y and z.
pub fn rotation_matrix(angles: [f64; 3], order: RotationOrder) -> Mat3 {
    product3(order, rot_x(angles[0]), rot_y(angles[1]), rot_z(angles[2]))
}

/// `∂R/∂rho`, `∂R/∂theta`, `∂R/∂psi`.
pub fn rotation_partials(angles: [f64; 3], order: RotationOrder) -> [Mat3; 3] {
    let (x, y, z) = (rot_x(angles[0]), rot_y(angles[1]), rot_z(angles[2]));
    [
        product3(order, d_rot_x(angles[0]), y, z),
        product3(order, x, d_rot_y(angles[1]), z),
        product3(order, x, y, d_rot_z(angles[2])),
    ]
}

/// Euler angles of `r` in the given order, together with their partial
/// derivatives with respect to every matrix entry (`jac[angle][i][j]`).
pub fn euler_from_rotation(r: &Mat3, order: RotationOrder) -> ([f64; 3], [Mat3; 3]) {
    // atan2(y, x) and its gradient with respect to (y, x)
    fn atan2_d(y: f64, x: f64) -> (f64, f64, f64) {
        let n = x * x + y * y;
        (y.atan2(x), x / n, -y / n)
    }
    let mut jac = [[[0.0; 3]; 3]; 3];
    let angles = match order {
        RotationOrder::Xyz => {
            // r02 = sin(theta), r12 = -sin(rho)cos(theta), r22 = cos(rho)cos(theta),
            // r01 = -cos(theta)sin(psi), r00 = cos(theta)cos(psi)
            let (rho, dy, dx) = atan2_d(-r[1][2], r[2][2]);
            jac[0][1][2] = -dy;
            jac[0][2][2] = dx;
            let s = r[0][2].clamp(-1.0, 1.0);
            let theta = s.asin();
            jac[1][0][2] = 1.0 / (1.0 - s * s).max(1e-300).sqrt();
            let (psi, dy, dx) = atan2_d(-r[0][1], r[0][0]);
            jac[2][0][1] = -dy;
            jac[2][0][0] = dx;
            [rho, theta, psi]
        }
        RotationOrder::Zyx => {
            // r21 = cos(theta)sin(rho), r22 = cos(theta)cos(rho), r20 = -sin(theta),
            // r10 = sin(psi)cos(theta), r00 = cos(psi)cos(theta)
            let (rho, dy, dx) = atan2_d(r[2][1], r[2][2]);
            jac[0][2][1] = dy;
            jac[0][2][2] = dx;
            let s = (-r[2][0]).clamp(-1.0, 1.0);
            let theta = s.asin();
            jac[1][2][0] = -1.0 / (1.0 - s * s).max(1e-300).sqrt();
            let (psi, dy, dx) = atan2_d(r[1][0], r[0][0]);
            jac[2][1][0] = dy;
            jac[2][0][0] = dx;
            [rho, theta, psi]
        }
    };
    (angles, jac)
}

/// Rigid transform stored as a 4×4 homogeneous matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se3 {
    m: [[f64; 4]; 4],
}

const ORTHO_TOL: f64 = 1e-9;

impl Se3 {
    pub fn identity() -> Self {
        Se3::from_rt(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], &[0.0; 3])
    }

    /// Builds from rotation and translation without validation; callers pass
    /// rotations produced by this module.
    pub fn from_rt(r: &Mat3, t: &Vec3) -> Self {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        Se3 { m }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Se3::from_rt(&Se3::identity().rotation(), &t)
    }

    /// Validating constructor.
    pub fn from_matrix(m: [[f64; 4]; 4]) -> Result<Self> {
        let t = Se3 { m };
        t.validate()?;
        Ok(t)
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 16 {
            return Err(Error::invalid(format!("a 4×4 transform has 16 entries, got {}", v.len())));
        }
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            m[i].copy_from_slice(&v[4 * i..4 * i + 4]);
        }
        Se3::from_matrix(m)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for i in 0..4 {
            out[4 * i..4 * i + 4].copy_from_slice(&self.m[i]);
        }
        out
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    pub fn rotation(&self) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            r[i].copy_from_slice(&self.m[i][..3]);
        }
        r
    }

    pub fn translation(&self) -> Vec3 {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    /// Checks `R Rᵀ = I`, `det R = 1` (both within 1e-9) and the bottom row.
    pub fn validate(&self) -> Result<()> {
        if self.m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("transform has non-finite entries"));
        }
        if self.m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid(format!(
                "transform bottom row must be (0,0,0,1), got {:?}",
                self.m[3]
            )));
        }
        let r = self.rotation();
        let rrt = mat3_mul(&r, &mat3_transpose(&r));
        for (i, row) in rrt.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let e = if i == j { 1.0 } else { 0.0 };
                if (v - e).abs() > ORTHO_TOL {
                    return Err(Error::invalid(format!(
                        "rotation block is not orthonormal (R·Rᵀ[{i}][{j}] = {v})"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::invalid(format!("rotation determinant is {det}, expected 1")));
        }
        Ok(())
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        let r = self.rotation();
        let q = mat3_vec(&r, p);
        let t = self.translation();
        [q[0] + t[0], q[1] + t[1], q[2] + t[2]]
    }

    pub fn max_abs_diff(&self, other: &Se3) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn pose_to_matrix(p: &Pose6DoF, order: RotationOrder) -> Result<Se3> {
    if !p.is_finite() {
        return Err(Error::invalid(format!("pose has non-finite components: {p:?}")));
    }
    let r = rotation_matrix([p.rho, p.theta, p.psi], order);
    Ok(Se3::from_rt(&r, &[p.tx, p.ty, p.tz]))
}

/// Translation and Euler angles of a rigid transform.
pub fn matrix_to_pose(t: &Se3, order: RotationOrder) -> Pose6DoF {
    let ([rho, theta, psi], _) = euler_from_rotation(&t.rotation(), order);
    let [tx, ty, tz] = t.translation();
    Pose6DoF {
        tx,
        ty,
        tz,
        rho,
        theta,
        psi,
    }
}

/// `T⁻¹ = [Rᵀ | −Rᵀ t]`.
pub fn se3_invert(t: &Se3) -> Result<Se3> {
    t.validate()?;
    let rt = mat3_transpose(&t.rotation());
    let tr = mat3_vec(&rt, &t.translation());
    let inv = Se3::from_rt(&rt, &[-tr[0], -tr[1], -tr[2]]);
    inv.validate()?;
    Ok(inv)
}

/// Matrix product `a · b` (apply `b` first).
pub fn se3_compose(a: &Se3, b: &Se3) -> Result<Se3> {
    a.validate()?;
    b.validate()?;
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            m[i][j] = (0..4).map(|k| a.m[i][k] * b.m[k][j]).sum();
        }
    }
    m[3] = [0.0, 0.0, 0.0, 1.0];
    Se3::from_matrix(m)
}

/// The 6-vector of `invert(pose_to_matrix(p))` and its 6×6 Jacobian
/// (`jac[out][in]`).
pub fn invert_pose_with_jacobian(p: &Pose6DoF, order: RotationOrder) -> (Pose6DoF, [[f64; 6]; 6]) {
    let angles = [p.rho, p.theta, p.psi];
    let t = [p.tx, p.ty, p.tz];
    let r = rotation_matrix(angles, order);
    let dr = rotation_partials(angles, order);
    let rt = mat3_transpose(&r);
    let t_inv = mat3_vec(&rt, &t);
    let (ang_inv, d_euler) = euler_from_rotation(&rt, order);

    let mut jac = [[0.0; 6]; 6];
    // translation' = -Rᵀ t
    for i in 0..3 {
        for j in 0..3 {
            jac[i][j] = -rt[i][j];
        }
        for a in 0..3 {
            let drt = mat3_transpose(&dr[a]);
            jac[i][3 + a] = -(0..3).map(|k| drt[i][k] * t[k]).sum::<f64>();
        }
    }
    // angles' = euler(Rᵀ)
    for o in 0..3 {
        for a in 0..3 {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    // ∂(Rᵀ)[i][j] / ∂angle_a = ∂R[j][i] / ∂angle_a
                    s += d_euler[o][i][j] * dr[a][j][i];
                }
            }
            jac[3 + o][3 + a] = s;
        }
    }
    (
        Pose6DoF {
            tx: -t_inv[0],
            ty: -t_inv[1],
            tz: -t_inv[2],
            rho: ang_inv[0],
            theta: ang_inv[1],
            psi: ang_inv[2],
        },
        jac,
    )
}

/// Homogeneous pixel coordinates `(u, v, 1)` stored as a `[3, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrid {
    coords: Tensor,
}

impl PixelGrid {
    pub fn new(h: usize, w: usize) -> Self {
        PixelGrid {
            coords: Tensor::from_fn3(3, h, w, |c, y, x| match c {
                0 => x as f64,
                1 => y as f64,
                _ => 1.0,
            }),
        }
    }

    pub fn height(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.coords.shape()[2]
    }

    pub fn homogeneous(&self) -> &Tensor {
        &self.coords
    }

    /// The `(u, v)` channels as a `[2, H, W]` tensor.
    pub fn uv(&self) -> Tensor {
        self.coords.slice_channels(0, 2).expect("grid has 3 channels")
    }
}

/// Per-pixel intermediate values reused by the reprojection backward pass.
fn reproject_core(depth: &[f64], h: usize, w: usize, k: &CameraIntrinsics, r: &Mat3, t: &Vec3) -> Vec<f64> {
    let n = h * w;
    let mut out = vec![f64::NAN; 2 * n];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let ray = k.back_project(x as f64, y as f64);
            let d = depth[p];
            let pt = [ray[0] * d, ray[1] * d, d];
            let q = mat3_vec(r, &pt);
            let q = [q[0] + t[0], q[1] + t[1], q[2] + t[2]];
            if q[2] > MIN_TRANSFORMED_DEPTH {
                let (u, v) = k.project(q);
                out[p] = u;
                out[n + p] = v;
            }
        }
    }
    out
}

fn check_depth(depth: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = depth.dims3()?;
    if c != 1 {
        return Err(Error::invalid(format!("depth must have one channel, got {c}")));
    }
    if let Some(bad) = depth.data().iter().find(|&&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::invalid(format!("depth must be strictly positive and finite, found {bad}")));
    }
    Ok((h, w))
}

/// Source-view pixel coordinates `[2, H, W]` for every target pixel. Pixels
/// whose transformed depth is at most [`MIN_TRANSFORMED_DEPTH`] are NaN.
pub fn reproject_pixels(
    grid: &PixelGrid,
    depth: &DepthMap,
    k: &CameraIntrinsics,
    transform: &Se3,
) -> Result<Tensor> {
    k.validate()?;
    transform.validate()?;
    let (h, w) = check_depth(depth.values())?;
    if (grid.height(), grid.width()) != (h, w) {
        return Err(Error::invalid(format!(
            "pixel grid ({}, {}) does not match depth ({h}, {w})",
            grid.height(),
            grid.width()
        )));
    }
    let data = reproject_core(
        depth.values().data(),
        h,
        w,
        k,
        &transform.rotation(),
        &transform.translation(),
    );
    Tensor::from_vec(&[2, h, w], data)
}

/// Reprojection driven by a 6-DoF pose; used by the autodiff graph.
pub(crate) fn reproject_from_pose(
    depth: &Tensor,
    pose: &[f64],
    k: &CameraIntrinsics,
    order: RotationOrder,
) -> Tensor {
    let (h, w) = (depth.shape()[1], depth.shape()[2]);
    let r = rotation_matrix([pose[3], pose[4], pose[5]], order);
    let data = reproject_core(depth.data(), h, w, k, &r, &[pose[0], pose[1], pose[2]]);
    Tensor::from_vec(&[2, h, w], data).expect("coords shape")
}

/// Gradients of the reprojected coordinates with respect to depth and pose.
pub(crate) fn reproject_from_pose_backward(
    depth: &Tensor,
    pose: &[f64],
    k: &CameraIntrinsics,
    order: RotationOrder,
    grad_coords: &Tensor,
) -> (Tensor, [f64; 6]) {
    let (h, w) = (depth.shape()[1], depth.shape()[2]);
    let n = h * w;
    let angles = [pose[3], pose[4], pose[5]];
    let r = rotation_matrix(angles, order);
    let dr = rotation_partials(angles, order);
    let t = [pose[0], pose[1], pose[2]];
    let gc = grad_coords.data();
    let mut gd = vec![0.0; n];
    let mut gp = [0.0; 6];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (gu, gv) = (gc[p], gc[n + p]);
            if gu == 0.0 && gv == 0.0 {
                continue;
            }
            let ray = k.back_project(x as f64, y as f64);
            let d = depth.data()[p];
            let pt = [ray[0] * d, ray[1] * d, d];
            let rp = mat3_vec(&r, &pt);
            let q = [rp[0] + t[0], rp[1] + t[1], rp[2] + t[2]];
            if !(q[2] > MIN_TRANSFORMED_DEPTH) {
                continue;
            }
            let inv_z = 1.0 / q[2];
            let gq = [
                gu * k.fx * inv_z,
                gv * k.fy * inv_z,
                -(gu * k.fx * q[0] + gv * k.fy * q[1]) * inv_z * inv_z,
            ];
            let r_ray = mat3_vec(&r, &ray);
            gd[p] = gq[0] * r_ray[0] + gq[1] * r_ray[1] + gq[2] * r_ray[2];
            gp[0] += gq[0];
            gp[1] += gq[1];
            gp[2] += gq[2];
            for a in 0..3 {
                let dq = mat3_vec(&dr[a], &pt);
                gp[3 + a] += gq[0] * dq[0] + gq[1] * dq[1] + gq[2] * dq[2];
            }
        }
    }
    (Tensor::from_vec(depth.shape(), gd).expect("depth grad shape"), gp)
}

/// Bilinear interpolation of `image [C, H, W]` at continuous `coords
/// [2, H', W']`. Out-of-range or non-finite coordinates produce zeros and a
/// false validity entry.
pub fn bilinear_sample(image: &Tensor, coords: &Tensor) -> Result<(Tensor, Mask)> {
    image.dims3()?;
    let (cc, ho, wo) = coords.dims3()?;
    if cc != 2 {
        return Err(Error::invalid(format!("coords must have 2 channels, got {cc}")));
    }
    let (out, valid) = kernels::grid_sample_forward(image, coords);
    Ok((out, Mask::new(ho, wo, valid)))
}

/// Reconstructs the target view by sampling `source` at the reprojection of
/// every target pixel.
pub fn inverse_warp(
    source: &Frame,
    target_depth: &DepthMap,
    k: &CameraIntrinsics,
    transform: &Se3,
) -> Result<(Tensor, Mask)> {
    let (h, w) = (target_depth.height(), target_depth.width());
    let coords = reproject_pixels(&PixelGrid::new(h, w), target_depth, k, transform)?;
    bilinear_sample(source.tensor(), &coords)
}
