//! Analytic volumetric scenes standing in for a trained radiance field.
//!
//! A scene is a list of primitives, each with a constant density inside its
//! surface and a linear falloff to zero over `soft_edge` outside it. The
//! density at a point is the maximum over primitives; color and object id
//! follow the primitive attaining that maximum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{uncontract, Point3, Ray, SceneBounds, Vec3, VoxelGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_extents: [f64; 3] },
    Capsule { a: [f64; 3], b: [f64; 3], radius: f64 },
}

impl Shape {
    /// Signed distance to the surface, negative inside. Exact for all kinds.
    pub fn signed_distance(&self, p: &Point3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - Point3::from(*center)).norm() - radius,
            Shape::Box {
                center,
                half_extents,
            } => {
                let d = (p - Point3::from(*center)).abs() - Vec3::from(*half_extents);
                let outside = d.map(|x| x.max(0.0)).norm();
                let inside = d.x.max(d.y).max(d.z).min(0.0);
                outside + inside
            }
            Shape::Capsule { a, b, radius } => {
                let a = Point3::from(*a);
                let ba = Point3::from(*b) - a;
                let pa = p - a;
                let denom = ba.norm_squared();
                let h = if denom > 0.0 {
                    (pa.dot(&ba) / denom).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (pa - ba * h).norm() - radius
            }
        }
    }

    /// Axis-aligned bounds of the solid.
    pub fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Shape::Sphere { center, radius } => (
                center.map(|c| c - radius),
                center.map(|c| c + radius),
            ),
            Shape::Box {
                center,
                half_extents,
            } => (
                [0, 1, 2].map(|i| center[i] - half_extents[i]),
                [0, 1, 2].map(|i| center[i] + half_extents[i]),
            ),
            Shape::Capsule { a, b, radius } => (
                [0, 1, 2].map(|i| a[i].min(b[i]) - radius),
                [0, 1, 2].map(|i| a[i].max(b[i]) + radius),
            ),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Shape::Sphere { radius, .. } => *radius > 0.0,
            Shape::Box { half_extents, .. } => half_extents.iter().all(|h| *h > 0.0),
            Shape::Capsule { radius, .. } => *radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidScene("primitive sizes must be positive".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub density: f64,
    pub color: [f64; 3],
    pub object_id: u32,
    #[serde(default)]
    pub soft_edge: f64,
}

impl ScenePrimitive {
    pub fn new(shape: Shape, density: f64, color: [f64; 3], object_id: u32) -> Self {
        Self {
            shape,
            density,
            color,
            object_id,
            soft_edge: 0.0,
        }
    }

    pub fn with_soft_edge(mut self, width: f64) -> Self {
        self.soft_edge = width;
        self
    }

    pub fn density_at(&self, p: &Point3) -> f64 {
        let sd = self.shape.signed_distance(p);
        if sd <= 0.0 {
            self.density
        } else if sd < self.soft_edge {
            self.density * (1.0 - sd / self.soft_edge)
        } else {
            0.0
        }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        self.shape.signed_distance(p) <= 0.0
    }

    /// Bounds of the region with nonzero density.
    pub fn support_aabb(&self) -> ([f64; 3], [f64; 3]) {
        let (lo, hi) = self.shape.aabb();
        (lo.map(|x| x - self.soft_edge), hi.map(|x| x + self.soft_edge))
    }

    fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if !(self.density >= 0.0) || !self.density.is_finite() {
            return Err(Error::InvalidScene("density must be finite and ≥ 0".into()));
        }
        if !(self.soft_edge >= 0.0) {
            return Err(Error::InvalidScene("soft edge must be ≥ 0".into()));
        }
        if self.object_id == 0 {
            return Err(Error::InvalidScene("object ids start at 1".into()));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidScene("colors must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<ScenePrimitive>,
    pub bounds: SceneBounds,
    #[serde(default)]
    pub background: [f64; 3],
}

/// Density query result. `object_id` is 0 in empty space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensitySample {
    pub sigma: f64,
    pub color: [f64; 3],
    pub object_id: u32,
}

impl DensitySample {
    pub const EMPTY: Self = Self {
        sigma: 0.0,
        color: [0.0; 3],
        object_id: 0,
    };
}

impl Scene {
    pub fn new(primitives: Vec<ScenePrimitive>, bounds: SceneBounds) -> Result<Self> {
        let scene = Self {
            primitives,
            bounds,
            background: [0.0; 3],
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        self.primitives.iter().try_for_each(ScenePrimitive::validate)
    }

    pub fn object_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.primitives.iter().map(|p| p.object_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Nearest ray-surface hit by sphere tracing the exact signed distance.
    /// Returns the hit depth and the object id of the surface reached.
    pub fn first_hit(&self, ray: &Ray, t_max: f64) -> Option<(f64, u32)> {
        const HIT_EPS: f64 = 1e-7;
        let mut t = 0.0;
        for _ in 0..4096 {
            if t > t_max {
                return None;
            }
            let p = ray.at(t);
            let mut best = f64::INFINITY;
            let mut id = 0;
            for prim in &self.primitives {
                let d = prim.shape.signed_distance(&p);
                if d < best {
                    best = d;
                    id = prim.object_id;
                }
            }
            if best <= HIT_EPS {
                return Some((t, id));
            }
            t += best.max(HIT_EPS);
        }
        None
    }
}

/// Density, color and owning object at `point`.
pub fn scene_density(scene: &Scene, point: &Point3) -> DensitySample {
    let mut best = DensitySample::EMPTY;
    for prim in &scene.primitives {
        let sigma = prim.density_at(point);
        if sigma > best.sigma {
            best = DensitySample {
                sigma,
                color: prim.color,
                object_id: prim.object_id,
            };
        }
    }
    best
}

/// Per-voxel density sampled at voxel centers.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub grid: VoxelGrid,
    pub values: Vec<f32>,
}

impl DensityGrid {
    pub fn get(&self, idx: [usize; 3]) -> f32 {
        self.values[self.grid.linear(idx)]
    }
}

/// Samples the scene density at every voxel center (grid points are
/// uncontracted first for unbounded scenes).
pub fn bake_density_grid(scene: &Scene, grid: &VoxelGrid) -> DensityGrid {
    let values = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            uncontract(&grid.center_of(i), &scene.bounds)
                .map(|p| scene_density(scene, &p).sigma as f32)
                .unwrap_or(0.0)
        })
        .collect();
    DensityGrid { grid: *grid, values }
}

/// Binary voxel grid, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryGrid {
    pub grid: VoxelGrid,
    pub cells: Vec<bool>,
}

impl BinaryGrid {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }
}

/// Voxels whose center lies inside a primitive with one of `object_ids`.
pub fn ground_truth_voxels(scene: &Scene, grid: &VoxelGrid, object_ids: &[u32]) -> BinaryGrid {
    let prims: Vec<&ScenePrimitive> = scene
        .primitives
        .iter()
        .filter(|p| object_ids.contains(&p.object_id))
        .collect();
    let cells = (0..grid.len())
        .into_par_iter()
        .map(|i| match uncontract(&grid.center_of(i), &scene.bounds) {
            Some(p) => prims.iter().any(|prim| prim.contains(&p)),
            None => false,
        })
        .collect();
    BinaryGrid { grid: *grid, cells }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sphere(center: [f64; 3], radius: f64, id: u32) -> ScenePrimitive {
        ScenePrimitive::new(Shape::Sphere { center, radius }, 10.0, [1.0, 0.0, 0.0], id)
    }

    #[test]
    fn density_cases() {
        let scene = Scene::new(
            vec![sphere([0.0; 3], 0.5, 1).with_soft_edge(0.2)],
            SceneBounds::cube(1.0),
        )
        .unwrap();
        assert_eq!(scene_density(&scene, &Point3::new(5.0, 5.0, 5.0)).sigma, 0.0);
        let c = scene_density(&scene, &Point3::origin());
        assert_eq!(c.sigma, 10.0);
        assert_eq!(c.object_id, 1);
        let mid = scene_density(&scene, &Point3::new(0.6, 0.0, 0.0));
        assert_abs_diff_eq!(mid.sigma, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn argmax_primitive_owns_color() {
        let mut a = sphere([0.0; 3], 0.5, 1);
        a.density = 3.0;
        let mut b = sphere([0.2, 0.0, 0.0], 0.5, 2);
        b.color = [0.0, 0.0, 1.0];
        let scene = Scene::new(vec![a, b], SceneBounds::cube(1.0)).unwrap();
        let s = scene_density(&scene, &Point3::new(0.1, 0.0, 0.0));
        assert_eq!(s.object_id, 2);
        assert_eq!(s.color, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn signed_distances() {
        let b = Shape::Box {
            center: [0.0; 3],
            half_extents: [1.0, 2.0, 3.0],
        };
        assert_abs_diff_eq!(b.signed_distance(&Point3::new(2.0, 0.0, 0.0)), 1.0);
        assert_abs_diff_eq!(b.signed_distance(&Point3::origin()), -1.0);
        let c = Shape::Capsule {
            a: [0.0, 0.0, 0.0],
            b: [0.0, 1.0, 0.0],
            radius: 0.1,
        };
        assert_abs_diff_eq!(c.signed_distance(&Point3::new(0.5, 0.5, 0.0)), 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(c.signed_distance(&Point3::new(0.0, 2.0, 0.0)), 0.9, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_primitives() {
        let mut p = sphere([0.0; 3], 0.5, 1);
        p.density = -1.0;
        assert!(Scene::new(vec![p], SceneBounds::cube(1.0)).is_err());
        assert!(Scene::new(vec![sphere([0.0; 3], 0.0, 1)], SceneBounds::cube(1.0)).is_err());
        assert!(Scene::new(vec![sphere([0.0; 3], 0.5, 0)], SceneBounds::cube(1.0)).is_err());
    }

    #[test]
    fn scene_json_shape() {
        let text = r#"{
            "primitives": [
                {"kind": "sphere", "params": {"center": [0,0,0], "radius": 0.5},
                 "density": 40, "color": [1,0,0], "object_id": 1, "soft_edge": 0.01},
                {"kind": "capsule", "params": {"a": [0,0,0], "b": [0,1,0], "radius": 0.05},
                 "density": 40, "color": [0,1,0], "object_id": 2}
            ],
            "bounds": {"min": [-1,-1,-1], "max": [1,1,1], "unbounded": false}
        }"#;
        let scene = Scene::from_json(text).unwrap();
        assert_eq!(scene.primitives.len(), 2);
        assert_eq!(scene.object_ids(), vec![1, 2]);
        let again = Scene::from_json(&serde_json::to_string(&scene).unwrap()).unwrap();
        assert_eq!(again, scene);
    }

    #[test]
    fn first_hit_finds_sphere_surface() {
        let scene = Scene::new(vec![sphere([0.0, 0.0, -3.0], 1.0, 7)], SceneBounds::cube(4.0)).unwrap();
        let ray = Ray::new(Point3::origin(), Vec3::new(0.0, 0.0, -1.0));
        let (t, id) = scene.first_hit(&ray, 10.0).unwrap();
        assert_abs_diff_eq!(t, 2.0, epsilon = 1e-6);
        assert_eq!(id, 7);
        let miss = Ray::new(Point3::origin(), Vec3::new(0.0, 1.0, 0.0));
        assert!(scene.first_hit(&miss, 10.0).is_none());
    }

    #[test]
    fn empty_scene_bakes_zero() {
        let scene = Scene::new(vec![], SceneBounds::cube(1.0)).unwrap();
        let grid = VoxelGrid::enclosing(&scene.bounds, 8).unwrap();
        assert!(bake_density_grid(&scene, &grid).values.iter().all(|v| *v == 0.0));
        assert_eq!(ground_truth_voxels(&scene, &grid, &[1]).count(), 0);
    }

    #[test]
    fn octant_containment() {
        let scene = Scene::new(vec![sphere([0.5, 0.5, 0.5], 0.3, 1)], SceneBounds::cube(1.0)).unwrap();
        let grid = VoxelGrid::enclosing(&scene.bounds, 16).unwrap();
        let dens = bake_density_grid(&scene, &grid);
        for (i, v) in dens.values.iter().enumerate() {
            if *v > 0.0 {
                let c = grid.center_of(i);
                assert!(c.x > 0.0 && c.y > 0.0 && c.z > 0.0);
            }
        }
    }

    #[test]
    fn voxel_counts_match_sphere_volume() {
        let r = 0.6;
        let scene = Scene::new(vec![sphere([0.1, -0.05, 0.0], r, 1)], SceneBounds::cube(1.0)).unwrap();
        let grid = VoxelGrid::enclosing(&scene.bounds, 64).unwrap();
        let expected = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3) / grid.voxel_size().powi(3);
        let dens = bake_density_grid(&scene, &grid);
        let occupied = dens.values.iter().filter(|v| **v > 0.0).count() as f64;
        assert!((occupied - expected).abs() / expected < 0.2);
        let gt = ground_truth_voxels(&scene, &grid, &[1]).count() as f64;
        assert!((gt - expected).abs() / expected < 0.2);
        // Hard-edged: the full id set equals the nonzero-density set.
        let all = ground_truth_voxels(&scene, &grid, &scene.object_ids());
        let nonzero: Vec<bool> = dens.values.iter().map(|v| *v > 0.0).collect();
        assert_eq!(all.cells, nonzero);
        assert_eq!(ground_truth_voxels(&scene, &grid, &[]).count(), 0);
    }
}
