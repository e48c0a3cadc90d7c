//! Camera models, spherical coordinates and the rig coordinate system.
//!
//! The rig frame has its y axis perpendicular to the plane of the camera
//! centers and its origin at their centroid. Cameras use the ideal
//! equidistant fisheye model `r = focal * alpha` where `alpha` is the angle
//! between the viewing ray and the optical axis (+z in the camera frame).

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Azimuth `theta` in [-pi, pi] and elevation `phi` in [-pi/2, pi/2].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoord {
    theta: f64,
    phi: f64,
}

impl SphericalCoord {
    /// Builds a coordinate, folding `phi` over the poles and wrapping `theta`.
    pub fn new(theta: f64, phi: f64) -> Self {
        let mut theta = theta;
        let mut phi = if (-FRAC_PI_2..=FRAC_PI_2).contains(&phi) {
            phi
        } else {
            // fold into [-pi, pi), then reflect over the poles
            (phi + PI).rem_euclid(2.0 * PI) - PI
        };
        if phi > FRAC_PI_2 {
            phi = PI - phi;
            theta += PI;
        } else if phi < -FRAC_PI_2 {
            phi = -PI - phi;
            theta += PI;
        }
        let theta = if (-PI..=PI).contains(&theta) {
            theta
        } else {
            (theta + PI).rem_euclid(2.0 * PI) - PI
        };
        SphericalCoord { theta, phi }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Inverse of [`unit_ray`] for any nonzero direction.
    pub fn from_direction(d: &Vec3) -> Self {
        let n = d.norm();
        let phi = (d.y / n).clamp(-1.0, 1.0).asin();
        let theta = d.z.atan2(d.x);
        SphericalCoord::new(theta, phi)
    }
}

/// A direction of unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitRay(Vec3);

impl UnitRay {
    pub fn new(v: Vec3) -> Option<Self> {
        let n = v.norm();
        (n > 0.0 && n.is_finite()).then(|| UnitRay(v / n))
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }
    pub fn y(&self) -> f64 {
        self.0.y
    }
    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn as_vec(&self) -> &Vec3 {
        &self.0
    }
}

/// `(cos phi cos theta, sin phi, cos phi sin theta)`.
pub fn unit_ray(c: SphericalCoord) -> UnitRay {
    let (st, ct) = c.theta.sin_cos();
    let (sp, cp) = c.phi.sin_cos();
    UnitRay(Vec3::new(cp * ct, sp, cp * st))
}

/// Result of projecting a point into a fisheye image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Pixel { u: f64, v: f64 },
    OutOfView,
}

impl Projection {
    pub fn pixel(self) -> Option<(f64, f64)> {
        match self {
            Projection::Pixel { u, v } => Some((u, v)),
            Projection::OutOfView => None,
        }
    }
}

/// A swept point: finite, or the direction itself on the `d = 0` sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpherePoint {
    Finite(Vec3),
    AtInfinity(UnitRay),
}

/// Equidistant fisheye camera with pose `X_cam = rotation * X_rig + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisheyeCamera {
    pub id: usize,
    pub focal: f64,
    pub principal_point: (f64, f64),
    /// (rows, cols)
    pub image_size: (usize, usize),
    pub fov: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl FisheyeCamera {
    pub fn new(
        id: usize,
        focal: f64,
        principal_point: (f64, f64),
        image_size: (usize, usize),
        fov: f64,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self> {
        let cam = FisheyeCamera {
            id,
            focal,
            principal_point,
            image_size,
            fov,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::Config(format!("camera {}: focal must be > 0", self.id)));
        }
        if !(self.fov > 0.0 && self.fov <= 2.0 * PI) {
            return Err(Error::Config(format!(
                "camera {}: fov must lie in (0, 2pi], got {}",
                self.id, self.fov
            )));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Config(format!("camera {}: empty image", self.id)));
        }
        let r = &self.rotation;
        let orth = (r.transpose() * r - Mat3::identity()).abs().max();
        if orth > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "camera {}: rotation is not a proper orthonormal matrix",
                self.id
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("camera {}: non-finite translation", self.id)));
        }
        Ok(())
    }

    /// Camera center in the rig frame.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// Projects a camera-frame direction (or point) with the equidistant model.
    pub fn project_camera_frame(&self, p: &Vec3) -> Projection {
        let t = (p.x * p.x + p.y * p.y).sqrt();
        if t == 0.0 && p.z <= 0.0 {
            // camera center, or straight behind where the azimuth is undefined
            return Projection::OutOfView;
        }
        let alpha = t.atan2(p.z);
        if alpha > 0.5 * self.fov {
            return Projection::OutOfView;
        }
        let (u0, v0) = self.principal_point;
        if t == 0.0 {
            return Projection::Pixel { u: u0, v: v0 };
        }
        let r = self.focal * alpha;
        Projection::Pixel {
            u: u0 + r * p.x / t,
            v: v0 + r * p.y / t,
        }
    }

    /// Projects a finite rig-frame point. Non-finite input is rejected.
    pub fn project(&self, x: &Vec3) -> Result<Projection> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite point {x:?}")));
        }
        Ok(self.project_camera_frame(&self.to_camera(x)))
    }

    /// Projects a rig-frame direction seen from infinitely far away.
    pub fn project_direction(&self, d: &Vec3) -> Projection {
        self.project_camera_frame(&(self.rotation * d))
    }

    pub fn project_sphere_point(&self, p: &SpherePoint) -> Projection {
        match p {
            SpherePoint::Finite(x) => self.project_camera_frame(&self.to_camera(x)),
            SpherePoint::AtInfinity(d) => self.project_direction(d.as_vec()),
        }
    }

    /// Inverts the equidistant model: pixel to unit camera-frame direction.
    /// Returns `None` beyond the field of view.
    pub fn unproject(&self, u: f64, v: f64) -> Option<Vec3> {
        let (u0, v0) = self.principal_point;
        let (dx, dy) = (u - u0, v - v0);
        let r = (dx * dx + dy * dy).sqrt();
        let alpha = r / self.focal;
        if alpha > 0.5 * self.fov {
            return None;
        }
        if r == 0.0 {
            return Some(Vec3::new(0.0, 0.0, 1.0));
        }
        let s = alpha.sin();
        Some(Vec3::new(s * dx / r, s * dy / r, alpha.cos()))
    }

    /// Rig-frame direction of a camera-frame direction.
    pub fn direction_to_rig(&self, d: &Vec3) -> Vec3 {
        self.rotation.transpose() * d
    }

    /// Whether `(u, v)` has a complete bilinear footprint in a raster of
    /// `rows x cols`.
    pub fn footprint_inside(u: f64, v: f64, rows: usize, cols: usize) -> bool {
        u >= 0.0 && v >= 0.0 && u < (cols as f64 - 1.0) && v < (rows as f64 - 1.0)
    }
}

/// Rotation about the rig y axis that maps azimuth `theta` to `theta + angle`.
pub fn yaw_matrix(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

/// Ordered set of cameras sharing the rig frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    cameras: Vec<FisheyeCamera>,
}

impl Rig {
    pub fn new(cameras: Vec<FisheyeCamera>) -> Result<Self> {
        if cameras.len() < 2 {
            return Err(Error::Config("a rig needs at least 2 cameras".into()));
        }
        for (i, a) in cameras.iter().enumerate() {
            a.validate()?;
            if cameras[..i].iter().any(|b| b.id == a.id) {
                return Err(Error::Config(format!("duplicate camera id {}", a.id)));
            }
        }
        Ok(Rig { cameras })
    }

    pub fn cameras(&self) -> &[FisheyeCamera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// The same physical rig expressed in a frame rotated by `angle` about y.
    pub fn rotated_yaw(&self, angle: f64) -> Rig {
        let inv = yaw_matrix(angle).transpose();
        let cameras = self
            .cameras
            .iter()
            .map(|c| FisheyeCamera {
                rotation: c.rotation * inv,
                ..c.clone()
            })
            .collect();
        Rig { cameras }
    }

    /// Four outward-looking cameras at the corners of a `side x side` square
    /// in the y = 0 plane, optical axes along the diagonals.
    pub fn default_four(image_rows: usize, image_cols: usize, fov: f64, side: f64) -> Rig {
        let half = 0.5 * side;
        // one full turn, starting at +x+z and rotating by +90 deg in theta
        let corners = [(half, half), (-half, half), (-half, -half), (half, -half)];
        let radius = 0.5 * (image_rows.min(image_cols) as f64) - 1.0;
        let focal = radius / (0.5 * fov);
        let principal = (0.5 * (image_cols as f64 - 1.0), 0.5 * (image_rows as f64 - 1.0));
        let cameras = corners
            .iter()
            .enumerate()
            .map(|(id, &(x, z))| {
                let center = Vec3::new(x, 0.0, z);
                let axis = center.normalize();
                let down = Vec3::new(0.0, -1.0, 0.0);
                let right = down.cross(&axis);
                let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), axis.transpose()]);
                let translation = -(rotation * center);
                FisheyeCamera {
                    id,
                    focal,
                    principal_point: principal,
                    image_size: (image_rows, image_cols),
                    fov,
                    rotation,
                    translation,
                }
            })
            .collect();
        Rig { cameras }
    }
}

/// Equirectangular output grid plus the inverse-depth sphere ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub height: usize,
    pub width: usize,
    pub phi_min: f64,
    pub phi_max: f64,
    pub num_spheres: usize,
    pub inv_depth_max: f64,
    pub stride: usize,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("grid must be non-empty".into()));
        }
        if self.num_spheres < 2 {
            return Err(Error::Config("need at least 2 spheres".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("sphere stride must be >= 1".into()));
        }
        if !(self.inv_depth_max > 0.0 && self.inv_depth_max.is_finite()) {
            return Err(Error::Config("inv_depth_max must be positive".into()));
        }
        if !(self.phi_min < self.phi_max && self.phi_min >= -FRAC_PI_2 && self.phi_max <= FRAC_PI_2)
        {
            return Err(Error::Config("phi range must satisfy -pi/2 <= min < max <= pi/2".into()));
        }
        Ok(())
    }

    /// Grid cropped to `phi` in [-pi/4, pi/4].
    pub fn cropped(height: usize, width: usize, num_spheres: usize, inv_depth_max: f64) -> Self {
        SweepGrid {
            height,
            width,
            phi_min: -FRAC_PI_4,
            phi_max: FRAC_PI_4,
            num_spheres,
            inv_depth_max,
            stride: 2,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// `d_n = n * d_max / (N - 1)`.
    pub fn inv_depth(&self, n: usize) -> f64 {
        assert!(n < self.num_spheres, "sphere index {n} out of range");
        if n == self.num_spheres - 1 {
            return self.inv_depth_max;
        }
        n as f64 * self.inv_depth_max / (self.num_spheres - 1) as f64
    }

    pub fn theta(&self, col: f64) -> f64 {
        -PI + (col + 0.5) * 2.0 * PI / self.width as f64
    }

    pub fn phi(&self, row: f64) -> f64 {
        self.phi_min + (row + 0.5) * (self.phi_max - self.phi_min) / self.height as f64
    }

    pub fn coord(&self, row: usize, col: usize) -> SphericalCoord {
        assert!(row < self.height && col < self.width, "cell ({row}, {col}) out of range");
        SphericalCoord::new(self.theta(col as f64), self.phi(row as f64))
    }

    /// Continuous (row, col) of a direction; `col` in [0, W), rows unclamped.
    pub fn cell_of(&self, c: SphericalCoord) -> (f64, f64) {
        let col = (c.theta() + PI) * self.width as f64 / (2.0 * PI) - 0.5;
        let row = (c.phi() - self.phi_min) * self.height as f64 / (self.phi_max - self.phi_min) - 0.5;
        (row, col.rem_euclid(self.width as f64))
    }

    /// Number of swept spheres after subsampling, `ceil(N / stride)`.
    pub fn num_sub(&self) -> usize {
        self.num_spheres.div_ceil(self.stride)
    }

    /// Ladder indices kept after subsampling: 0, stride, 2 * stride, ...
    pub fn sub_indices(&self) -> Vec<usize> {
        (0..self.num_sub()).map(|k| k * self.stride).collect()
    }

    pub fn sphere_point(&self, row: usize, col: usize, n: usize) -> SpherePoint {
        let ray = unit_ray(self.coord(row, col));
        if n == 0 {
            SpherePoint::AtInfinity(ray)
        } else {
            SpherePoint::Finite(ray.as_vec() / self.inv_depth(n))
        }
    }

    /// Continuous index on the ladder for a depth in meters (inf allowed).
    pub fn depth_to_index(&self, depth: f64) -> f64 {
        let d = if depth.is_infinite() { 0.0 } else { 1.0 / depth };
        (self.num_spheres - 1) as f64 * d / self.inv_depth_max
    }

    /// Depth in meters for a continuous index (index 0 is infinity).
    pub fn index_to_depth(&self, index: f64) -> f64 {
        let d = index * self.inv_depth_max / (self.num_spheres - 1) as f64;
        1.0 / d
    }
}

/// Cells (row-major, H x W) where camera `cam` sees sphere `n` with a full
/// bilinear footprint in a source raster reduced by `scale`.
pub fn validity_mask(cam: &FisheyeCamera, grid: &SweepGrid, n: usize, scale: usize) -> Vec<bool> {
    let (rows, cols) = scaled_size(cam.image_size, scale);
    let s = scale as f64;
    let mut mask = Vec::with_capacity(grid.cells());
    for row in 0..grid.height {
        for col in 0..grid.width {
            let ok = match cam.project_sphere_point(&grid.sphere_point(row, col, n)) {
                Projection::Pixel { u, v } => FisheyeCamera::footprint_inside(u / s, v / s, rows, cols),
                Projection::OutOfView => false,
            };
            mask.push(ok);
        }
    }
    mask
}

/// Raster size after reduction by `scale` (rounding up, as a strided conv does).
pub fn scaled_size(size: (usize, usize), scale: usize) -> (usize, usize) {
    (size.0.div_ceil(scale), size.1.div_ceil(scale))
}
