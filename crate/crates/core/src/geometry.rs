//! Pinhole cameras, rays, scene contraction and voxel-grid indexing.
//!
//! Conventions: right-handed world, cameras look down their local −Z axis
//! with +Y up, image rows grow downward. Normalized image coordinates are
//! `u = x_pixel / width`, `v = y_pixel / height`, so the visible frustum is
//! `[0, 1) × [0, 1)` and the pixel holding `(u, v)` is `(⌊w·u⌋, ⌊h·v⌋)`.

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Point3 = nalgebra::Point3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square-pixel intrinsics with the principal point at the image center
    /// and the given horizontal field of view.
    pub fn from_fov(width: u32, height: u32, fov_x_deg: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self {
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image size must be positive".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidCamera(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Result of projecting a world point into a camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Depth along the forward axis; `in_front` is `depth > 0`.
    pub depth: f64,
    pub in_front: bool,
}

impl Projection {
    /// Pixel holding this projection, or `None` outside the frustum.
    pub fn pixel(&self, width: u32, height: u32) -> Option<(u32, u32)> {
        if !self.in_front || !(0.0..1.0).contains(&self.u) || !(0.0..1.0).contains(&self.v) {
            return None;
        }
        let x = ((width as f64 * self.u).floor() as u32).min(width - 1);
        let y = ((height as f64 * self.v).floor() as u32).min(height - 1);
        Some((x, y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub direction: Vec3,
}

impl Ray {
    /// Builds a ray, normalizing `direction`. The direction must be nonzero.
    pub fn new(origin: Point3, direction: Vec3) -> Self {
        debug_assert!(direction.norm() > 0.0);
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Point3 {
        self.origin + self.direction * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosestPoint {
    pub t: f64,
    pub point: Point3,
    pub distance: f64,
}

/// Closest point to `point` on the ray segment `[t_lo, t_hi]`.
pub fn closest_point_on_ray(ray: &Ray, point: &Point3, t_lo: f64, t_hi: f64) -> ClosestPoint {
    debug_assert!(t_lo <= t_hi);
    let t_proj = (point - ray.origin).dot(&ray.direction);
    let t = t_proj.clamp(t_lo, t_hi);
    let closest = ray.at(t);
    ClosestPoint {
        t,
        point: closest,
        distance: (point - closest).norm(),
    }
}

/// A calibrated pinhole camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraFile", into = "CameraFile")]
pub struct Camera {
    intrinsics: Intrinsics,
    world_from_camera: Isometry3<f64>,
    camera_from_world: Isometry3<f64>,
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    #[serde(flatten)]
    intrinsics: Intrinsics,
    /// Row-major 4×4 rigid transform.
    world_from_camera: [f64; 16],
}

impl TryFrom<CameraFile> for Camera {
    type Error = Error;

    fn try_from(file: CameraFile) -> Result<Self> {
        Camera::from_matrix(file.intrinsics, file.world_from_camera)
    }
}

impl From<Camera> for CameraFile {
    fn from(camera: Camera) -> Self {
        CameraFile {
            intrinsics: camera.intrinsics,
            world_from_camera: camera.world_from_camera_matrix(),
        }
    }
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, world_from_camera: Isometry3<f64>) -> Result<Self> {
        intrinsics.validate()?;
        Ok(Self {
            intrinsics,
            camera_from_world: world_from_camera.inverse(),
            world_from_camera,
        })
    }

    /// Builds a camera from a row-major 4×4 world-from-camera matrix.
    pub fn from_matrix(intrinsics: Intrinsics, m: [f64; 16]) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidCamera("pose contains non-finite values".into()));
        }
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom
            .iter()
            .zip([0.0, 0.0, 0.0, 1.0])
            .any(|(a, b)| (a - b).abs() > ORTHONORMAL_TOL)
        {
            return Err(Error::InvalidCamera("pose bottom row must be [0 0 0 1]".into()));
        }
        let rot = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let gram = rot.transpose() * rot;
        if (gram - Matrix3::identity()).abs().max() > ORTHONORMAL_TOL {
            return Err(Error::InvalidCamera("rotation block is not orthonormal".into()));
        }
        if rot.determinant() < 0.0 {
            return Err(Error::InvalidCamera("rotation block is a reflection".into()));
        }
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
        let iso = Isometry3::from_parts(Translation3::new(m[3], m[7], m[11]), rotation);
        Self::new(intrinsics, iso)
    }

    /// Camera at `eye` aimed at `target`. Up is world +Y unless the view
    /// direction is within 1° of ±Y, in which case +X is used.
    pub fn look_at(intrinsics: Intrinsics, eye: Point3, target: Point3) -> Result<Self> {
        let forward = target - eye;
        let dist = forward.norm();
        if !(dist > 0.0) || !dist.is_finite() {
            return Err(Error::InvalidCamera("eye and target coincide".into()));
        }
        let forward = forward / dist;
        let mut up = Vec3::y();
        if forward.dot(&up).abs() > 1f64.to_radians().cos() {
            up = Vec3::x();
        }
        let right = forward.cross(&up).normalize();
        let cam_up = right.cross(&forward);
        let rot = Matrix3::from_columns(&[right, cam_up, -forward]);
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
        Self::new(
            intrinsics,
            Isometry3::from_parts(Translation3::from(eye.coords), rotation),
        )
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    pub fn world_from_camera(&self) -> &Isometry3<f64> {
        &self.world_from_camera
    }

    pub fn world_from_camera_matrix(&self) -> [f64; 16] {
        let h = self.world_from_camera.to_homogeneous();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = h[(r, c)];
            }
        }
        out
    }

    pub fn position(&self) -> Point3 {
        Point3::from(self.world_from_camera.translation.vector)
    }

    /// Unit viewing direction in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.world_from_camera.rotation * -Vec3::z()
    }

    pub fn to_camera(&self, point: &Point3) -> Point3 {
        self.camera_from_world * point
    }

    pub fn project(&self, point: &Point3) -> Projection {
        let pc = self.to_camera(point);
        let depth = -pc.z;
        let k = &self.intrinsics;
        let x = k.fx * pc.x / depth + k.cx;
        let y = -k.fy * pc.y / depth + k.cy;
        Projection {
            u: x / k.width as f64,
            v: y / k.height as f64,
            depth,
            in_front: depth > 0.0,
        }
    }

    /// Depth of `point` along the camera's forward axis.
    pub fn voxel_depth(&self, point: &Point3) -> f64 {
        -self.to_camera(point).z
    }

    /// Ray through normalized image coordinates `(u, v)`.
    pub fn uv_to_ray(&self, u: f64, v: f64) -> Ray {
        let k = &self.intrinsics;
        let x = u * k.width as f64;
        let y = v * k.height as f64;
        let dir_cam = Vec3::new((x - k.cx) / k.fx, -(y - k.cy) / k.fy, -1.0);
        Ray::new(self.position(), self.world_from_camera.rotation * dir_cam)
    }

    /// Ray through the center of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: u32, y: u32) -> Ray {
        let k = &self.intrinsics;
        self.uv_to_ray(
            (x as f64 + 0.5) / k.width as f64,
            (y as f64 + 0.5) / k.height as f64,
        )
    }

    /// Cosine between the ray through pixel `(x, y)` and the forward axis;
    /// converts ray distance to forward-axis depth.
    pub fn pixel_cos(&self, x: u32, y: u32) -> f64 {
        let k = &self.intrinsics;
        let a = (x as f64 + 0.5 - k.cx) / k.fx;
        let b = (y as f64 + 0.5 - k.cy) / k.fy;
        1.0 / (1.0 + a * a + b * b).sqrt()
    }
}

/// Axis-aligned scene box, optionally flagged as unbounded (contracted).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
    #[serde(default)]
    pub unbounded: bool,
}

impl SceneBounds {
    pub fn new(min: [f64; 3], max: [f64; 3], unbounded: bool) -> Result<Self> {
        let b = Self { min, max, unbounded };
        b.validate()?;
        Ok(b)
    }

    pub fn cube(half_extent: f64) -> Self {
        Self {
            min: [-half_extent; 3],
            max: [half_extent; 3],
            unbounded: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|i| !(self.min[i] < self.max[i])) {
            return Err(Error::InvalidScene("bounds min must be < max on every axis".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Point3 {
        Point3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    /// Isotropic normalization scale: the largest half-extent.
    pub fn scale(&self) -> f64 {
        (0..3)
            .map(|i| 0.5 * (self.max[i] - self.min[i]))
            .fold(0.0, f64::max)
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Radius-2 spherical contraction in bounds-normalized coordinates.
/// Identity for bounded scenes and inside the unit ball.
pub fn contract(point: &Point3, bounds: &SceneBounds) -> Point3 {
    if !bounds.unbounded {
        return *point;
    }
    let c = bounds.center();
    let s = bounds.scale();
    let n = (point - c) / s;
    let r = n.norm();
    if r <= 1.0 {
        return *point;
    }
    c + n * ((2.0 - 1.0 / r) / r) * s
}

/// Inverse of [`contract`]; `None` for points on or beyond the radius-2 shell.
pub fn uncontract(point: &Point3, bounds: &SceneBounds) -> Option<Point3> {
    if !bounds.unbounded {
        return Some(*point);
    }
    let c = bounds.center();
    let s = bounds.scale();
    let n = (point - c) / s;
    let r = n.norm();
    if r <= 1.0 {
        return Some(*point);
    }
    if r >= 2.0 {
        return None;
    }
    let world_r = 1.0 / (2.0 - r);
    Some(c + n * (world_r / r) * s)
}

/// Cubic voxel grid: `resolution³` voxels spanning `origin .. origin + 2·half_extent`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub origin: [f64; 3],
    pub half_extent: f64,
    pub resolution: usize,
}

impl VoxelGrid {
    pub fn new(origin: [f64; 3], half_extent: f64, resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::InvalidGrid("resolution must be positive".into()));
        }
        if !(half_extent > 0.0) || !half_extent.is_finite() {
            return Err(Error::InvalidGrid("half extent must be positive".into()));
        }
        Ok(Self {
            origin,
            half_extent,
            resolution,
        })
    }

    /// Smallest centered cube covering the scene; for unbounded scenes the
    /// cube covers the whole contracted ball.
    pub fn enclosing(bounds: &SceneBounds, resolution: usize) -> Result<Self> {
        bounds.validate()?;
        let c = bounds.center();
        let half = if bounds.unbounded {
            2.0 * bounds.scale()
        } else {
            bounds.scale()
        };
        Self::new([c.x - half, c.y - half, c.z - half], half, resolution)
    }

    pub fn voxel_size(&self) -> f64 {
        2.0 * self.half_extent / self.resolution as f64
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn min_corner(&self) -> Point3 {
        Point3::from(self.origin)
    }

    pub fn max_corner(&self) -> Point3 {
        let e = 2.0 * self.half_extent;
        Point3::new(self.origin[0] + e, self.origin[1] + e, self.origin[2] + e)
    }

    /// Linear index, x fastest.
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        let g = self.resolution;
        idx[0] + g * (idx[1] + g * idx[2])
    }

    pub fn unravel(&self, linear: usize) -> [usize; 3] {
        let g = self.resolution;
        [linear % g, (linear / g) % g, linear / (g * g)]
    }

    pub fn index_to_center(&self, idx: [usize; 3]) -> Point3 {
        let dx = self.voxel_size();
        Point3::new(
            self.origin[0] + (idx[0] as f64 + 0.5) * dx,
            self.origin[1] + (idx[1] as f64 + 0.5) * dx,
            self.origin[2] + (idx[2] as f64 + 0.5) * dx,
        )
    }

    pub fn center_of(&self, linear: usize) -> Point3 {
        self.index_to_center(self.unravel(linear))
    }

    pub fn world_to_index(&self, p: &Point3) -> Option<[usize; 3]> {
        let dx = self.voxel_size();
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / dx).floor();
            if !(f >= 0.0 && f < self.resolution as f64) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_camera() -> Camera {
        let k = Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 100,
            height: 100,
        };
        Camera::new(k, Isometry3::identity()).unwrap()
    }

    #[test]
    fn projects_on_axis_to_principal_point() {
        let cam = toy_camera();
        for z in [0.1, 1.0, 37.0] {
            let p = cam.project(&Point3::new(0.0, 0.0, -z));
            assert!(p.in_front);
            assert_abs_diff_eq!(p.u, 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(p.v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn hand_checked_pinhole() {
        // u = (fx·x/−z + cx)/width = (100·0.1/1 + 50)/100
        let p = toy_camera().project(&Point3::new(0.1, 0.0, -1.0));
        assert_abs_diff_eq!(p.u, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(p.v, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_flagged() {
        let p = toy_camera().project(&Point3::new(0.0, 0.0, 2.0));
        assert!(!p.in_front);
        assert_eq!(p.pixel(100, 100), None);
    }

    #[test]
    fn center_ray_is_forward() {
        let cam = toy_camera();
        let ray = cam.uv_to_ray(0.5, 0.5);
        assert_abs_diff_eq!((ray.direction - cam.forward()).norm(), 0.0, epsilon = 1e-12);
        assert_eq!(ray.origin, cam.position());
        assert_eq!(ray.origin, Point3::origin());
    }

    #[test]
    fn voxel_depth_cases() {
        let cam = toy_camera();
        assert_abs_diff_eq!(cam.voxel_depth(&Point3::new(0.0, 0.0, -2.0)), 2.0);
        assert_abs_diff_eq!(cam.voxel_depth(&Point3::new(0.4, -3.0, 0.0)), 0.0);
    }

    #[test]
    fn contraction_cases() {
        let unb = SceneBounds {
            unbounded: true,
            ..SceneBounds::cube(1.0)
        };
        let x = Point3::new(3.0, 0.0, 0.0);
        assert_abs_diff_eq!((contract(&x, &unb) - Point3::new(5.0 / 3.0, 0.0, 0.0)).norm(), 0.0, epsilon = 1e-12);
        let edge = Point3::new(0.0, 1.0, 0.0);
        assert_eq!(contract(&edge, &unb), edge);
        let bounded = SceneBounds::cube(1.0);
        assert_eq!(contract(&x, &bounded), x);
        let back = uncontract(&contract(&x, &unb), &unb).unwrap();
        assert_abs_diff_eq!((back - x).norm(), 0.0, epsilon = 1e-12);
        assert!(uncontract(&Point3::new(2.0, 0.0, 0.0), &unb).is_none());
    }

    #[test]
    fn closest_point_cases() {
        let ray = Ray::new(Point3::origin(), Vec3::new(0.0, 0.0, -1.0));
        let on = closest_point_on_ray(&ray, &Point3::new(0.0, 0.0, -1.5), 1.0, 2.0);
        assert_abs_diff_eq!(on.distance, 0.0);
        let off = closest_point_on_ray(&ray, &Point3::new(0.3, 0.0, -1.5), 1.0, 2.0);
        assert_abs_diff_eq!(off.distance, 0.3, epsilon = 1e-12);
        let before = closest_point_on_ray(&ray, &Point3::new(0.0, 0.0, -0.2), 1.0, 2.0);
        assert_eq!(before.t, 1.0);
    }

    #[test]
    fn camera_json_round_trip_and_validation() {
        let cam = Camera::look_at(
            Intrinsics::from_fov(64, 48, 50.0),
            Point3::new(1.0, 2.0, 3.0),
            Point3::origin(),
        )
        .unwrap();
        let text = serde_json::to_string(&cam).unwrap();
        let back: Camera = serde_json::from_str(&text).unwrap();
        let p = Point3::new(0.2, -0.1, 0.3);
        assert_abs_diff_eq!(cam.project(&p).u, back.project(&p).u, epsilon = 1e-12);

        let skewed = r#"{"fx":10,"fy":10,"cx":5,"cy":5,"width":10,"height":10,
            "world_from_camera":[1,0.1,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]}"#;
        assert!(serde_json::from_str::<Camera>(skewed).is_err());
        let bad_pp = r#"{"fx":10,"fy":10,"cx":10,"cy":5,"width":10,"height":10,
            "world_from_camera":[1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]}"#;
        assert!(serde_json::from_str::<Camera>(bad_pp).is_err());
    }

    #[test]
    fn look_at_falls_back_near_vertical() {
        let cam = Camera::look_at(
            Intrinsics::from_fov(32, 32, 60.0),
            Point3::new(0.0, 3.0, 0.0),
            Point3::origin(),
        )
        .unwrap();
        assert_abs_diff_eq!((cam.forward() - Vec3::new(0.0, -1.0, 0.0)).norm(), 0.0, epsilon = 1e-12);
        let p = cam.project(&Point3::origin());
        assert_abs_diff_eq!(p.u, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn grid_index_round_trip() {
        let grid = VoxelGrid::new([-1.0, -2.0, 0.5], 1.5, 7).unwrap();
        assert_abs_diff_eq!(grid.voxel_size(), 3.0 / 7.0);
        for lin in 0..grid.len() {
            let idx = grid.unravel(lin);
            assert_eq!(grid.linear(idx), lin);
            assert_eq!(grid.world_to_index(&grid.index_to_center(idx)), Some(idx));
        }
        assert!(grid.world_to_index(&Point3::new(-5.0, 0.0, 0.0)).is_none());
        assert!(VoxelGrid::new([0.0; 3], 0.0, 4).is_err());
        assert!(VoxelGrid::new([0.0; 3], 1.0, 0).is_err());
    }
}
