//! Viewpoint planning: Fibonacci-lattice candidates, geometric ranking and
//! zoomed centroid views aimed at back-projected prompts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Intrinsics, Point3, Vec3};
use crate::render::ViewGeometry;

/// Default zoom for forward-facing captures.
pub const ZOOM_FORWARD_FACING: f64 = 0.67;
/// Default zoom for 360° captures.
pub const ZOOM_360: f64 = 0.47;

const W_DIVERSITY: f64 = 0.4;
const W_COVERAGE: f64 = 0.3;
const W_PITCH: f64 = 0.3;

/// `n` cameras on a Fibonacci lattice of the given radius, all aimed at
/// `center`. The lattice pole is world +Y.
pub fn fibonacci_sample(
    n: usize,
    radius: f64,
    center: Point3,
    intrinsics: Intrinsics,
) -> Result<Vec<Camera>> {
    if n == 0 {
        return Err(Error::Empty("fibonacci sample count"));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidConfig("orbit radius must be positive".into()));
    }
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let phi = 2.0 * std::f64::consts::PI * i as f64 / golden;
            let offset = Vec3::new(r * phi.cos(), y, r * phi.sin()) * radius;
            Camera::look_at(intrinsics, center + offset, center)
        })
        .collect()
}

/// Informativeness of one candidate view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub index: usize,
    pub diversity: f64,
    pub coverage: f64,
    pub pitch: f64,
    pub total: f64,
}

fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Min-max normalization; a constant component maps to 1.0 everywhere.
fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Ranks views by `0.4·D + 0.3·C + 0.3·P`, best first, ties by index.
///
/// `D` is the mean angular separation of the view direction to all others,
/// `C` the largest cosine to one of the six world axes and `P` the absolute
/// pitch; each is min-max normalized over the candidates.
pub fn rank_views(cameras: &[Camera]) -> Result<Vec<ViewScore>> {
    if cameras.is_empty() {
        return Err(Error::Empty("candidate views"));
    }
    let dirs: Vec<Vec3> = cameras.iter().map(Camera::forward).collect();
    let diversity: Vec<f64> = dirs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            // Summed in sorted order so the value does not depend on input order.
            let mut angles: Vec<f64> = dirs
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, o)| angle_between(d, o))
                .collect();
            angles.sort_by(f64::total_cmp);
            if angles.is_empty() {
                0.0
            } else {
                angles.iter().sum::<f64>() / angles.len() as f64
            }
        })
        .collect();
    let coverage: Vec<f64> = dirs.iter().map(|d| d.abs().max()).collect();
    let pitch: Vec<f64> = dirs.iter().map(|d| d.y.clamp(-1.0, 1.0).asin().abs()).collect();

    let (dn, cn, pn) = (normalize(&diversity), normalize(&coverage), normalize(&pitch));
    let mut scores: Vec<ViewScore> = (0..cameras.len())
        .map(|i| ViewScore {
            index: i,
            diversity: dn[i],
            coverage: cn[i],
            pitch: pn[i],
            total: W_DIVERSITY * dn[i] + W_COVERAGE * cn[i] + W_PITCH * pn[i],
        })
        .collect();
    scores.sort_by(|a, b| b.total.total_cmp(&a.total).then(a.index.cmp(&b.index)));
    Ok(scores)
}

/// World point under a prompt pixel, placed at the max-weight sample depth.
pub fn back_project_prompt(view: &ViewGeometry, prompt: (u32, u32)) -> Result<Point3> {
    let (x, y) = prompt;
    let (w, h) = (view.width(), view.height());
    if x >= w || y >= h {
        return Err(Error::PromptOutOfBounds {
            x,
            y,
            width: w,
            height: h,
        });
    }
    if !view.is_valid(x, y) {
        return Err(Error::NoSurface { x, y });
    }
    let ray = view.camera.pixel_ray(x, y);
    Ok(ray.at(view.depth.get(x, y) as f64))
}

/// Moves `anchor` a fraction `1 − zoom` of the way to `target` and re-aims
/// it there. Intrinsics are kept.
pub fn make_centroid_view(anchor: &Camera, target: &Point3, zoom: f64) -> Result<Camera> {
    if !(zoom > 0.0 && zoom <= 1.0) {
        return Err(Error::InvalidConfig(format!("zoom {zoom} outside (0, 1]")));
    }
    if anchor.voxel_depth(target) <= 0.0 {
        return Err(Error::TargetBehindCamera);
    }
    let eye = anchor.position();
    let moved = eye + (target - eye) * (1.0 - zoom);
    Camera::look_at(*anchor.intrinsics(), moved, *target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidViewSpec {
    pub anchor: usize,
    pub prompt: (u32, u32),
    pub target: [f64; 3],
    pub zoom: f64,
}

/// Anchors and, per anchor, the centroid views generated from its prompts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub anchors: Vec<Camera>,
    pub centroids: Vec<Vec<CentroidViewSpec>>,
}

impl SessionPlan {
    pub fn add_anchor(&mut self, camera: Camera) -> usize {
        self.anchors.push(camera);
        self.centroids.push(Vec::new());
        self.anchors.len() - 1
    }

    /// The union of all anchors' centroid views, in anchor order.
    pub fn flattened(&self) -> Vec<&CentroidViewSpec> {
        self.centroids.iter().flatten().collect()
    }

    pub fn centroid_count(&self) -> usize {
        self.centroids.iter().map(Vec::len).sum()
    }
}
