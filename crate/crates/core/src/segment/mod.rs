//! Point-prompted 2D confidence masks and depth-guided refinement.
//!
//! [`Segmenter`] is the pluggable interface; [`RegionGrowSegmenter`] is the
//! deterministic default backend.

mod queue;

pub use queue::{MaskOutcome, MaskQueue, MaskRequest, MaskResult, BARRIER_MASK_COUNT};

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{PixelMap, ViewGeometry};

/// Per-pixel confidence in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMask {
    pub values: PixelMap<f32>,
    pub refined: bool,
}

impl ConfidenceMask {
    pub fn new(values: PixelMap<f32>) -> Result<Self> {
        if values.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("confidence outside [0, 1]".into()));
        }
        Ok(Self {
            values,
            refined: false,
        })
    }

    pub fn width(&self) -> u32 {
        self.values.width
    }

    pub fn height(&self) -> u32 {
        self.values.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values.get(x, y)
    }

    pub fn binarize(&self, threshold: f32) -> PixelMap<bool> {
        self.values.map(|v| v >= threshold)
    }
}

/// Point-prompted segmentation backend.
pub trait Segmenter: Send + Sync {
    fn segment(&self, view: &ViewGeometry, prompt: (u32, u32)) -> Result<ConfidenceMask>;
}

/// Synthetic mask corruption: boundary dilation plus salt noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImperfectMask {
    pub dilate_px: u32,
    /// Probability that a background pixel is flipped to `salt_value`.
    pub salt_fraction: f64,
    pub salt_value: f32,
    pub seed: u64,
}

impl Default for ImperfectMask {
    fn default() -> Self {
        Self {
            dilate_px: 2,
            salt_fraction: 0.03,
            salt_value: 0.9,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    /// Max RGB distance from the seed color, in `[0, √3]`.
    pub color_tolerance: f64,
    /// Max relative expected-depth step between neighbors.
    pub depth_tolerance: f64,
    /// 4 or 8.
    pub connectivity: u8,
    /// Distance in pixels over which confidence decays outside the region.
    pub falloff_px: f64,
    #[serde(default)]
    pub imperfect: Option<ImperfectMask>,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            color_tolerance: 0.2,
            depth_tolerance: 0.05,
            connectivity: 4,
            falloff_px: 2.0,
            imperfect: None,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.color_tolerance > 0.0 && self.color_tolerance <= 3f64.sqrt()) {
            return Err(Error::InvalidConfig("color tolerance must lie in (0, √3]".into()));
        }
        if !(self.depth_tolerance > 0.0) {
            return Err(Error::InvalidConfig("depth tolerance must be positive".into()));
        }
        if self.connectivity != 4 && self.connectivity != 8 {
            return Err(Error::InvalidConfig("connectivity must be 4 or 8".into()));
        }
        if !(self.falloff_px > 0.0) {
            return Err(Error::InvalidConfig("falloff must be positive".into()));
        }
        Ok(())
    }
}

/// Seeded region growing on color and expected depth.
#[derive(Clone, Debug, Default)]
pub struct RegionGrowSegmenter {
    pub config: SegmenterConfig,
}

impl RegionGrowSegmenter {
    pub fn new(config: SegmenterConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn grow(&self, view: &ViewGeometry, seed: (u32, u32)) -> Vec<bool> {
        let (w, h) = (view.width() as i64, view.height() as i64);
        let cfg = &self.config;
        let seed_rgb = view.rgb.get(seed.0, seed.1);
        let tol2 = cfg.color_tolerance * cfg.color_tolerance;
        let offsets: &[(i64, i64)] = if cfg.connectivity == 8 {
            &[(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (1, -1), (-1, 1), (1, 1)]
        } else {
            &[(-1, 0), (1, 0), (0, -1), (0, 1)]
        };
        let mut core = vec![false; (w * h) as usize];
        let mut queue = VecDeque::new();
        core[view.d_exp.index(seed.0, seed.1)] = true;
        queue.push_back(seed);
        while let Some((cx, cy)) = queue.pop_front() {
            let d_here = view.d_exp.get(cx, cy) as f64;
            for &(ox, oy) in offsets {
                let (nx, ny) = (cx as i64 + ox, cy as i64 + oy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let (nx, ny) = (nx as u32, ny as u32);
                let ni = view.d_exp.index(nx, ny);
                if core[ni] || !view.is_valid(nx, ny) {
                    continue;
                }
                let rgb = view.rgb.get(nx, ny);
                let dist2: f64 = (0..3)
                    .map(|c| (rgb[c] as f64 - seed_rgb[c] as f64).powi(2))
                    .sum();
                let d_step = (view.d_exp.get(nx, ny) as f64 - d_here).abs();
                if dist2 <= tol2 && d_step <= cfg.depth_tolerance * d_here {
                    core[ni] = true;
                    queue.push_back((nx, ny));
                }
            }
        }
        core
    }
}

fn dilate(core: &[bool], w: usize, h: usize, radius: u32) -> Vec<bool> {
    let r = radius as i64;
    let mut out = core.to_vec();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !core[(y * w as i64 + x) as usize] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 && dx * dx + dy * dy <= r * r {
                        out[(ny * w as i64 + nx) as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Confidence 1 inside `core`; outside it starts below 0.5 and decays
/// linearly with distance to the nearest core pixel, reaching 0 at `falloff`.
fn soft_confidence(core: &[bool], w: usize, h: usize, falloff: f64) -> Vec<f32> {
    let r = falloff.ceil() as i64;
    let mut out = vec![0f32; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = (y * w as i64 + x) as usize;
            if core[i] {
                out[i] = 1.0;
                continue;
            }
            let mut best = f64::INFINITY;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 && core[(ny * w as i64 + nx) as usize] {
                        best = best.min(((dx * dx + dy * dy) as f64).sqrt());
                    }
                }
            }
            out[i] = (0.5 * (1.0 - best / falloff)).max(0.0) as f32;
        }
    }
    out
}

impl Segmenter for RegionGrowSegmenter {
    fn segment(&self, view: &ViewGeometry, prompt: (u32, u32)) -> Result<ConfidenceMask> {
        let (w, h) = (view.width(), view.height());
        let (x, y) = prompt;
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
        let (wu, hu) = (w as usize, h as usize);
        let mut core = self.grow(view, prompt);
        let mut salt = None;
        if let Some(imp) = self.config.imperfect {
            if imp.dilate_px > 0 {
                core = dilate(&core, wu, hu, imp.dilate_px);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(imp.seed ^ ((x as u64) << 32 | y as u64));
            salt = Some(
                (0..wu * hu)
                    .map(|_| rng.random::<f64>() < imp.salt_fraction)
                    .collect::<Vec<bool>>(),
            );
        }
        let mut values = soft_confidence(&core, wu, hu, self.config.falloff_px);
        if let (Some(salt), Some(imp)) = (salt, self.config.imperfect) {
            for (v, s) in values.iter_mut().zip(salt) {
                if s {
                    *v = v.max(imp.salt_value.clamp(0.0, 1.0));
                }
            }
        }
        ConfidenceMask::new(PixelMap::from_vec(w, h, values)?)
    }
}

/// Weights a mask by inverse normalized depth: `M ⊙ (1 − Ẑ)`, with `Ẑ`
/// min-max normalized over the view's valid pixels. A constant depth map
/// gives `Ẑ = 0`; invalid pixels become 0.
pub fn refine_mask(mask: &ConfidenceMask, view: &ViewGeometry) -> Result<ConfidenceMask> {
    if mask.refined {
        return Err(Error::InvalidConfig("mask is already refined".into()));
    }
    if mask.width() != view.width() || mask.height() != view.height() {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs view {}x{}",
            mask.width(),
            mask.height(),
            view.width(),
            view.height()
        )));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for (z, n) in view.depth.data.iter().zip(&view.n_samples.data) {
        if *n > 0 {
            lo = lo.min(*z);
            hi = hi.max(*z);
        }
    }
    let range = hi - lo;
    let data = mask
        .values
        .data
        .iter()
        .zip(view.depth.data.iter().zip(&view.n_samples.data))
        .map(|(m, (z, n))| {
            if *n == 0 {
                return 0.0;
            }
            let z_hat = if range > 0.0 { (z - lo) / range } else { 0.0 };
            (m * (1.0 - z_hat)).clamp(0.0, 1.0)
        })
        .collect();
    Ok(ConfidenceMask {
        values: PixelMap::from_vec(mask.width(), mask.height(), data)?,
        refined: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Camera, Intrinsics, Point3, SceneBounds};
    use crate::render::{render_view, silhouette, RenderConfig};
    use crate::scene::{Scene, ScenePrimitive, Shape};

    fn backdrop(depth: f64, color: [f64; 3]) -> ScenePrimitive {
        ScenePrimitive::new(
            Shape::Box {
                center: [0.0, 0.0, -depth - 0.5],
                half_extents: [40.0, 40.0, 0.5],
            },
            1e3,
            color,
            9,
        )
    }

    fn front_camera(size: u32) -> Camera {
        Camera::look_at(
            Intrinsics::from_fov(size, size, 40.0),
            Point3::new(0.0, 0.0, 3.0),
            Point3::origin(),
        )
        .unwrap()
    }

    fn view_of(prims: Vec<ScenePrimitive>, size: u32) -> (Scene, ViewGeometry) {
        let scene = Scene::new(prims, SceneBounds::cube(3.0)).unwrap();
        let view = render_view(&scene, &front_camera(size), &RenderConfig::default());
        (scene, view)
    }

    fn iou(a: &[bool], b: &[bool]) -> f64 {
        let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
        let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count() as f64;
        inter / union
    }

    #[test]
    fn uniform_wall_is_all_ones() {
        let (_, view) = view_of(vec![backdrop(1.0, [0.5, 0.5, 0.5])], 32);
        let mask = RegionGrowSegmenter::default().segment(&view, (16, 16)).unwrap();
        assert!(mask.values.data.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn sphere_mask_matches_silhouette() {
        let sphere = ScenePrimitive::new(
            Shape::Sphere {
                center: [0.0; 3],
                radius: 0.7,
            },
            1e3,
            [0.9, 0.2, 0.1],
            1,
        );
        let (scene, view) = view_of(vec![sphere, backdrop(1.5, [0.1, 0.3, 0.8])], 96);
        let mask = RegionGrowSegmenter::default().segment(&view, (48, 48)).unwrap();
        let gt = silhouette(&scene, &view.camera, &[1], 20.0);
        let pred = mask.binarize(0.5);
        let score = iou(&pred.data, &gt.data);
        assert!(score >= 0.95, "iou {score} pred {} gt {}", pred.data.iter().filter(|p| **p).count(), gt.data.iter().filter(|p| **p).count());
    }

    #[test]
    fn only_prompted_object_is_segmented() {
        let mk = |x: f64, z: f64| {
            ScenePrimitive::new(
                Shape::Sphere {
                    center: [x, 0.0, z],
                    radius: 0.35,
                },
                1e3,
                [0.9, 0.9, 0.1],
                if x < 0.0 { 1 } else { 2 },
            )
        };
        let (scene, view) = view_of(vec![mk(-0.6, 0.0), mk(0.6, -0.8), backdrop(2.0, [0.1, 0.1, 0.6])], 96);
        let left = scene.first_hit(&view.camera.pixel_ray(30, 48), 10.0).unwrap().1;
        assert_eq!(left, 1);
        let mask = RegionGrowSegmenter::default().segment(&view, (30, 48)).unwrap();
        let gt_left = silhouette(&scene, &view.camera, &[1], 20.0);
        let gt_right = silhouette(&scene, &view.camera, &[2], 20.0);
        let pred = mask.binarize(0.5);
        assert!(iou(&pred.data, &gt_left.data) > 0.9);
        assert_eq!(
            pred.data.iter().zip(&gt_right.data).filter(|(p, g)| **p && **g).count(),
            0
        );
    }

    #[test]
    fn prompt_on_empty_pixel_fails() {
        let (_, view) = view_of(vec![], 16);
        let err = RegionGrowSegmenter::default().segment(&view, (3, 3)).unwrap_err();
        assert!(matches!(err, Error::NoSurface { .. }));
        assert!(RegionGrowSegmenter::default().segment(&view, (16, 0)).is_err());
    }

    #[test]
    fn segmentation_is_deterministic() {
        let (_, view) = view_of(vec![backdrop(1.0, [0.5, 0.5, 0.5])], 24);
        let cfg = SegmenterConfig {
            imperfect: Some(ImperfectMask::default()),
            ..SegmenterConfig::default()
        };
        let seg = RegionGrowSegmenter::new(cfg).unwrap();
        assert_eq!(seg.segment(&view, (5, 7)).unwrap(), seg.segment(&view, (5, 7)).unwrap());
    }

    fn ramp_view(depths: &[f32], valid: &[bool]) -> ViewGeometry {
        let (_, mut view) = view_of(vec![backdrop(1.0, [0.5; 3])], 2);
        view.depth.data = depths.to_vec();
        view.n_samples.data = valid.iter().map(|v| *v as u32).collect();
        view
    }

    #[test]
    fn refinement_scales_by_inverse_depth() {
        let view = ramp_view(&[1.0, 2.0, 3.0, 9.0], &[true, true, true, false]);
        let mask = ConfidenceMask::new(PixelMap::from_vec(2, 2, vec![0.8, 1.0, 0.7, 1.0]).unwrap()).unwrap();
        let out = refine_mask(&mask, &view).unwrap();
        assert!(out.refined);
        assert_eq!(out.values.data, vec![0.8, 0.5, 0.0, 0.0]);
        for (a, b) in out.values.data.iter().zip(&mask.values.data) {
            assert!(a <= b);
        }
        assert!(refine_mask(&out, &view).is_err());
    }

    #[test]
    fn constant_depth_refinement_is_identity() {
        let view = ramp_view(&[2.0; 4], &[true; 4]);
        let mask = ConfidenceMask::new(PixelMap::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        assert_eq!(refine_mask(&mask, &view).unwrap().values, mask.values);
    }

    #[test]
    fn refinement_rejects_shape_mismatch() {
        let view = ramp_view(&[2.0; 4], &[true; 4]);
        let mask = ConfidenceMask::new(PixelMap::filled(3, 2, 0.5)).unwrap();
        assert!(matches!(refine_mask(&mask, &view), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn config_validation() {
        let bad = SegmenterConfig {
            connectivity: 6,
            ..SegmenterConfig::default()
        };
        assert!(RegionGrowSegmenter::new(bad).is_err());
        let bad = SegmenterConfig {
            color_tolerance: 2.0,
            ..SegmenterConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
