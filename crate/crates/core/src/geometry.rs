//! Pinhole cameras, camera-to-world poses and correspondence error measures.
//!
//! Conventions: integer pixel coordinates address pixel centers; a pose maps
//! camera coordinates into the shared world frame (`X_w = R X_c + t`);
//! depth 0 marks an invalid pixel; depth lookups at fractional pixels use
//! the nearest pixel.

use nalgebra::{Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive ({}, {})",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64 && 0.0 <= self.cy && self.cy < self.height as f64) {
            return Err(Error::invalid(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Rescales to a different image size (same field of view).
    pub fn scaled_to(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }
}

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let p = Self { rotation, translation };
        p.validate()?;
        Ok(p)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(ortho <= ORTHO_TOL) {
            return Err(Error::invalid(format!(
                "rotation not orthonormal (max |RᵀR - I| = {ortho:e})"
            )));
        }
        let det = r.determinant();
        if !((det - 1.0).abs() <= ORTHO_TOL) {
            return Err(Error::invalid(format!("rotation determinant {det} != 1")));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(())
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// meters, row-major, 0 = invalid
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("depth map", &[height, width], &[data.len()]));
        }
        if data.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::invalid("depth values must be finite and >= 0"));
        }
        Ok(Self { width, height, data })
    }

    /// Nearest-pixel depth at `(u, v)`; `None` outside the image or where
    /// the depth is invalid.
    pub fn depth_at(&self, pixel: Point2<f64>) -> Option<f64> {
        let (x, y) = nearest_pixel(pixel, self.width, self.height)?;
        let d = self.data[y * self.width + x] as f64;
        (d > 0.0).then_some(d)
    }
}

pub(crate) fn nearest_pixel(pixel: Point2<f64>, width: usize, height: usize) -> Option<(usize, usize)> {
    let (x, y) = (pixel.x.round(), pixel.y.round());
    if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 || !x.is_finite() || !y.is_finite() {
        return None;
    }
    Some((x as usize, y as usize))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub depth: DepthMap,
    /// optional object mask, same size as `depth`
    pub mask: Option<Vec<bool>>,
}

impl CameraFrame {
    pub fn new(intrinsics: Intrinsics, pose: Pose, depth: DepthMap, mask: Option<Vec<bool>>) -> Result<Self> {
        intrinsics.validate()?;
        pose.validate()?;
        if let Some(m) = &mask {
            if m.len() != depth.data.len() {
                return Err(Error::shape("object mask", &[m.len()], &[depth.data.len()]));
            }
        }
        Ok(Self {
            intrinsics,
            pose,
            depth,
            mask,
        })
    }

    fn depth_or_err(&self, pixel: Point2<f64>) -> Result<f64> {
        self.depth.depth_at(pixel).ok_or(Error::InvalidDepth {
            u: pixel.x,
            v: pixel.y,
            depth: 0.0,
        })
    }

    /// World-frame point seen at `pixel`, using the depth map.
    pub fn lift(&self, pixel: Point2<f64>) -> Result<Vector3<f64>> {
        let d = self.depth_or_err(pixel)?;
        Ok(self.pose.to_world(&unproject(pixel, d, &self.intrinsics)?))
    }

    /// Mask value at the nearest pixel (true when no mask is attached).
    pub fn in_mask(&self, pixel: Point2<f64>) -> bool {
        match (&self.mask, nearest_pixel(pixel, self.depth.width, self.depth.height)) {
            (None, Some(_)) => true,
            (Some(m), Some((x, y))) => m[y * self.depth.width + x],
            (_, None) => false,
        }
    }
}

/// `((u - cx) d / fx, (v - cy) d / fy, d)`
pub fn unproject(pixel: Point2<f64>, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth {
            u: pixel.x,
            v: pixel.y,
            depth,
        });
    }
    Ok(Vector3::new(
        (pixel.x - k.cx) * depth / k.fx,
        (pixel.y - k.cy) * depth / k.fy,
        depth,
    ))
}

/// Pixel of camera-frame point `p`, or `None` when `p` is not in front of
/// the camera.
pub fn project(p: &Vector3<f64>, k: &Intrinsics) -> Option<Point2<f64>> {
    if !(p.z > 0.0) {
        return None;
    }
    Some(Point2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Geodesic angle in degrees between the two camera orientations.
pub fn relative_angle(a: &Pose, b: &Pose) -> f64 {
    let rel = b.rotation.transpose() * a.rotation;
    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reprojection {
    Pixels(f64),
    /// the point lands at or behind image B's camera plane
    BehindCamera,
}

impl Reprojection {
    pub fn below(self, threshold: f64) -> bool {
        matches!(self, Reprojection::Pixels(e) if e < threshold)
    }
}

/// Reprojects `p` (image A) into image B via A's depth and both poses, and
/// measures the pixel distance to `q`.
pub fn reprojection_error_2d(p: Point2<f64>, q: Point2<f64>, a: &CameraFrame, b: &CameraFrame) -> Result<Reprojection> {
    let world = a.lift(p)?;
    let in_b = b.pose.to_camera(&world);
    Ok(match project(&in_b, &b.intrinsics) {
        Some(pp) => Reprojection::Pixels((pp - q).norm()),
        None => Reprojection::BehindCamera,
    })
}

/// Distance in meters between the world-frame liftings of `p` and `q`.
pub fn metric_error_3d(p: Point2<f64>, q: Point2<f64>, a: &CameraFrame, b: &CameraFrame) -> Result<f64> {
    Ok((a.lift(p)? - b.lift(q)?).norm())
}
