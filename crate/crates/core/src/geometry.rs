//! Pinhole camera, axis-angle rigid motion, and the target-to-source pixel
//! correspondence `p_s ~ K T D(p_t) K^-1 p_t` used for view synthesis.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::imaging::{bilinear_sample, ImageBuffer, SampleCoord};
use crate::{Error, Result};

/// Points whose transformed depth falls at or below this are invalid.
pub const Z_MIN: f64 = 1e-3;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::invalid("intrinsics need positive focal lengths and a finite principal point"));
        }
        if !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::invalid("focal lengths must be finite"));
        }
        Ok(())
    }

    /// Ray through a pixel, scaled to unit depth.
    pub fn ray(&self, p: SampleCoord) -> Vec3 {
        [(p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0]
    }

    pub fn backproject(&self, p: SampleCoord, depth: f64) -> Vec3 {
        let r = self.ray(p);
        [r[0] * depth, r[1] * depth, depth]
    }

    pub fn project(&self, point: Vec3) -> SampleCoord {
        SampleCoord::new(self.fx * point[0] / point[2] + self.cx, self.fy * point[1] / point[2] + self.cy)
    }
}

/// Camera motion as an axis-angle rotation followed by a translation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rot: Vec3,
    pub trans: Vec3,
}

impl RigidTransform {
    pub fn new(rot: Vec3, trans: Vec3) -> Result<Self> {
        let tf = Self { rot, trans };
        tf.validate()?;
        Ok(tf)
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rot.iter().chain(&self.trans).any(|v| !v.is_finite()) {
            return Err(Error::invalid("rigid transform parameters must be finite"));
        }
        if norm(self.rot) >= core::f64::consts::PI {
            return Err(Error::invalid("rotation angle must be below pi"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.rot == [0.0; 3] && self.trans == [0.0; 3]
    }

    /// `[rot, trans]` as one parameter vector.
    pub fn to_params(&self) -> [f64; 6] {
        let (r, t) = (self.rot, self.trans);
        [r[0], r[1], r[2], t[0], t[1], t[2]]
    }

    pub fn from_params(p: &[f64]) -> Self {
        Self { rot: [p[0], p[1], p[2]], trans: [p[3], p[4], p[5]] }
    }

    pub fn matrix(&self) -> Mat3 {
        rotation_matrix(self.rot)
    }

    pub fn apply(&self, point: Vec3) -> Vec3 {
        add(mat_vec(&self.matrix(), point), self.trans)
    }

    /// Inverse motion: rotation `R^T` and translation `-R^T t`.
    pub fn inverse(&self) -> Self {
        let r = self.matrix();
        let rt = transpose(&r);
        let t = mat_vec(&rt, self.trans);
        Self { rot: [-self.rot[0], -self.rot[1], -self.rot[2]], trans: [-t[0], -t[1], -t[2]] }
    }
}

/// Rodrigues coefficients `A = sin t / t`, `B = (1 - cos t) / t^2` and their
/// angle derivatives divided by the angle, `A'/t` and `B'/t`.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64, f64) {
    if theta < 1e-3 {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = (libm::sin(theta), libm::cos(theta));
        let t2 = theta * theta;
        (s / theta, (1.0 - c) / t2, (theta * c - s) / (t2 * theta), (theta * s - 2.0 * (1.0 - c)) / (t2 * t2))
    }
}

pub fn rotation_matrix(rot: Vec3) -> Mat3 {
    let (a, b, _, _) = rodrigues_coefficients(norm(rot));
    let k = skew(rot);
    let k2 = mat_mul(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Columns `d(R p)/d rot_i` of the rotation action Jacobian.
pub(crate) fn rotate_jacobian(rot: Vec3, p: Vec3) -> [Vec3; 3] {
    let (a, b, da, db) = rodrigues_coefficients(norm(rot));
    let wp = cross(rot, p);
    let wwp = cross(rot, wp);
    let mut cols = [[0.0; 3]; 3];
    for (i, col) in cols.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ep = cross(e, p);
        let ewp = cross(e, wp);
        let wep = cross(rot, ep);
        for k in 0..3 {
            col[k] = a * ep[k] + b * (ewp[k] + wep[k]) + rot[i] * (da * wp[k] + db * wwp[k]);
        }
    }
    cols
}

/// `R(rot) * point + trans`.
pub fn se3_apply(tf: &RigidTransform, point: Vec3) -> Vec3 {
    tf.apply(point)
}

/// Cotangents of `se3_apply` inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3Cotangent {
    pub rot: Vec3,
    pub trans: Vec3,
    pub point: Vec3,
}

pub fn se3_apply_vjp(tf: &RigidTransform, point: Vec3, cot: Vec3) -> Se3Cotangent {
    let r = tf.matrix();
    let jac = rotate_jacobian(tf.rot, point);
    let rot = [dot(jac[0], cot), dot(jac[1], cot), dot(jac[2], cot)];
    Se3Cotangent { rot, trans: cot, point: mat_vec(&transpose(&r), cot) }
}

/// Source-frame sampling positions for every target pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceField {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<SampleCoord>,
    /// In front of the source camera (`z > Z_MIN`) and inside the source grid.
    pub valid: Vec<bool>,
    /// Depth of each target point in the source frame.
    pub source_depth: Vec<f64>,
}

pub fn project_correspondence(k: &Intrinsics, tf: &RigidTransform, depth: &ImageBuffer) -> Result<CorrespondenceField> {
    if depth.channels() != 1 {
        return Err(Error::invalid("depth must be single-channel"));
    }
    correspondence_kernel(k, tf, depth.data(), depth.height(), depth.width())
}

pub(crate) fn correspondence_kernel(
    k: &Intrinsics,
    tf: &RigidTransform,
    depth: &[f64],
    height: usize,
    width: usize,
) -> Result<CorrespondenceField> {
    if depth.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
        return Err(Error::invalid("depth samples must be strictly positive"));
    }
    let identity = tf.is_identity();
    let r = tf.matrix();
    let n = height * width;
    let mut coords = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let mut source_depth = Vec::with_capacity(n);
    let (xmax, ymax) = ((width - 1) as f64, (height - 1) as f64);
    for row in 0..height {
        for col in 0..width {
            let pt = SampleCoord::new(col as f64, row as f64);
            let d = depth[row * width + col];
            if identity {
                coords.push(pt);
                valid.push(true);
                source_depth.push(d);
                continue;
            }
            let y = add(mat_vec(&r, k.backproject(pt, d)), tf.trans);
            source_depth.push(y[2]);
            if y[2] <= Z_MIN {
                coords.push(pt);
                valid.push(false);
                continue;
            }
            let ps = k.project(y);
            valid.push((0.0..=xmax).contains(&ps.x) && (0.0..=ymax).contains(&ps.y));
            coords.push(ps);
        }
    }
    Ok(CorrespondenceField { height, width, coords, valid, source_depth })
}

/// Pulls a cotangent on the sampling coordinates back to the depth map and
/// the pose parameters `[rot, trans]`.
pub fn project_correspondence_vjp(
    k: &Intrinsics,
    tf: &RigidTransform,
    depth: &ImageBuffer,
    cot: &[SampleCoord],
) -> Result<(Vec<f64>, [f64; 6])> {
    if cot.len() != depth.pixel_count() {
        return Err(Error::invalid("cotangent does not match depth grid"));
    }
    Ok(correspondence_vjp_kernel(k, tf, depth.data(), depth.width(), cot))
}

pub(crate) fn correspondence_vjp_kernel(
    k: &Intrinsics,
    tf: &RigidTransform,
    depth: &[f64],
    width: usize,
    cot: &[SampleCoord],
) -> (Vec<f64>, [f64; 6]) {
    let r = tf.matrix();
    let mut d_depth = alloc::vec![0.0; depth.len()];
    let mut d_pose = [0.0; 6];
    for (i, g) in cot.iter().enumerate() {
        if g.x == 0.0 && g.y == 0.0 {
            continue;
        }
        let pt = SampleCoord::new((i % width) as f64, (i / width) as f64);
        let ray = k.ray(pt);
        let x = [ray[0] * depth[i], ray[1] * depth[i], depth[i]];
        let y = add(mat_vec(&r, x), tf.trans);
        if y[2] <= Z_MIN {
            continue;
        }
        let iz = 1.0 / y[2];
        // Cotangent on the transformed point.
        let gy = [g.x * k.fx * iz, g.y * k.fy * iz, -(g.x * k.fx * y[0] + g.y * k.fy * y[1]) * iz * iz];
        d_depth[i] = dot(gy, mat_vec(&r, ray));
        let jac = rotate_jacobian(tf.rot, x);
        for a in 0..3 {
            d_pose[a] += dot(jac[a], gy);
            d_pose[3 + a] += gy[a];
        }
    }
    (d_depth, d_pose)
}

/// Samples `src` at the field's coordinates. The mask is the field's
/// validity combined with the sampler's in-bounds flag.
pub fn warp_view(src: &ImageBuffer, field: &CorrespondenceField) -> Result<(ImageBuffer, Vec<bool>)> {
    if field.coords.len() != field.height * field.width {
        return Err(Error::invalid("malformed correspondence field"));
    }
    if src.height() != field.height || src.width() != field.width {
        return Err(Error::invalid("source image and correspondence field differ in shape"));
    }
    let sampled = bilinear_sample(src, &field.coords, field.height, field.width)?;
    let mask = field.valid.iter().zip(&sampled.in_bounds).map(|(&a, &b)| a && b).collect();
    Ok((sampled.image, mask))
}

pub(crate) fn norm(v: Vec3) -> f64 {
    libm::sqrt(dot(v, v))
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn skew(w: Vec3) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

pub(crate) fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}
