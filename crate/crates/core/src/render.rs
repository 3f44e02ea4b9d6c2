//! Ray marching with the per-ray statistics consumed by the fusion kernel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Ray};
use crate::scene::{Scene, ScenePrimitive};

/// Dense row-major per-pixel map.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMap<T> {
    pub width: u32,
    pub height: u32,
    pub data: Vec<T>,
}

impl<T: Copy> PixelMap<T> {
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<T>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} map",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> T {
        self.data[self.index(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, value: T) {
        let i = self.index(x, y);
        self.data[i] = value;
    }

    pub fn same_shape<U>(&self, other: &PixelMap<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> PixelMap<U> {
        PixelMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub samples_per_ray: u32,
    pub near: f64,
    pub far: f64,
    /// Cumulative-weight cutoff where statistics sampling stops.
    pub tau_cw: f64,
    /// Cumulative weight that marks the first significant sample (`D_min`).
    pub min_weight: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 512,
            near: 0.05,
            far: 8.0,
            tau_cw: 0.75,
            min_weight: 1e-4,
        }
    }
}

impl RenderConfig {
    pub fn with_tau_cw(mut self, tau_cw: f64) -> Self {
        self.tau_cw = tau_cw;
        self
    }

    pub fn spacing(&self) -> f64 {
        (self.far - self.near) / self.samples_per_ray as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray == 0 {
            return Err(Error::InvalidConfig("samples per ray must be positive".into()));
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(Error::InvalidConfig("need 0 ≤ near < far".into()));
        }
        if !(self.tau_cw > 0.0 && self.tau_cw <= 1.0) {
            return Err(Error::InvalidConfig("tau_cw must lie in (0, 1]".into()));
        }
        if !(self.min_weight >= 0.0 && self.min_weight < 1.0) {
            return Err(Error::InvalidConfig("min weight must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Statistics of one marched ray. Depths are distances along the ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayRecord {
    pub rgb: [f64; 3],
    pub d_min: f64,
    pub d_max: f64,
    pub d_exp: f64,
    pub n_samples: u32,
    /// Depth of the highest-weight sample along the full ray.
    pub z_maxweight: f64,
    pub maxweight_object: u32,
}

impl RayRecord {
    pub fn is_valid(&self) -> bool {
        self.n_samples > 0
    }
}

/// Sample-index ranges where each primitive may have nonzero density.
fn active_spans(
    prims: &[ScenePrimitive],
    ray: &Ray,
    cfg: &RenderConfig,
    dt: f64,
) -> Vec<(u32, u32, usize)> {
    let n = cfg.samples_per_ray as i64;
    let mut spans = Vec::with_capacity(prims.len());
    for (idx, prim) in prims.iter().enumerate() {
        let (lo, hi) = prim.support_aabb();
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let o = ray.origin[a];
            let d = ray.direction[a];
            if d.abs() < 1e-300 {
                if o < lo[a] || o > hi[a] {
                    t0 = f64::INFINITY;
                    break;
                }
            } else {
                let ta = (lo[a] - o) / d;
                let tb = (hi[a] - o) / d;
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if !(t0 <= t1) {
            continue;
        }
        // Sample k sits at near + (k + 0.5)·dt; pad by one sample each side.
        let k0 = ((t0 - cfg.near) / dt - 0.5).floor() as i64 - 1;
        let k1 = ((t1 - cfg.near) / dt - 0.5).ceil() as i64 + 1;
        let k0 = k0.max(0);
        let k1 = k1.min(n - 1);
        if k0 <= k1 {
            spans.push((k0 as u32, k1 as u32, idx));
        }
    }
    spans
}

/// Marches `ray` through `scene` with uniform midpoint samples.
///
/// Sample weights follow standard transmittance accumulation. `D_min` is the
/// first sample where the cumulative weight exceeds `min_weight`; statistics
/// stop at the first sample where it reaches `tau_cw` (that sample's depth is
/// `D_max`). If the cutoff is never reached, `D_max` is the last sample with
/// nonzero weight. `D_exp` is the weight-averaged depth over `[D_min, D_max]`
/// and `N_samples` counts nonzero-weight samples up to the cutoff. Color and
/// `z_maxweight` use the full ray. A ray whose cumulative weight never exceeds
/// `min_weight` is invalid (`N_samples = 0`, depths 0).
pub fn march_ray(scene: &Scene, ray: &Ray, cfg: &RenderConfig) -> RayRecord {
    let dt = cfg.spacing();
    let prims = &scene.primitives;
    let spans = active_spans(prims, ray, cfg, dt);

    let mut ks: Vec<u32> = Vec::new();
    for &(a, b, _) in &spans {
        ks.extend(a..=b);
    }
    ks.sort_unstable();
    ks.dedup();

    let mut trans = 1.0f64;
    let mut cum = 0.0f64;
    let mut rgb = [0.0f64; 3];
    let mut stats_open = true;
    let mut d_min: Option<f64> = None;
    let mut d_max: Option<f64> = None;
    let mut last_t = 0.0;
    let mut n_samples = 0u32;
    let mut sum_w = 0.0;
    let mut sum_wt = 0.0;
    let mut best_w = 0.0;
    let mut z = 0.0;
    let mut z_id = 0;

    for k in ks {
        if !stats_open && trans < 1e-9 {
            break;
        }
        let t = cfg.near + (k as f64 + 0.5) * dt;
        let p = ray.at(t);
        let mut sigma = 0.0;
        let mut color = [0.0; 3];
        let mut id = 0;
        for &(a, b, idx) in &spans {
            if k < a || k > b {
                continue;
            }
            let s = prims[idx].density_at(&p);
            if s > sigma {
                sigma = s;
                color = prims[idx].color;
                id = prims[idx].object_id;
            }
        }
        if sigma <= 0.0 {
            continue;
        }
        let alpha = 1.0 - (-sigma * dt).exp();
        let w = trans * alpha;
        trans *= 1.0 - alpha;
        for c in 0..3 {
            rgb[c] += w * color[c];
        }
        if w > best_w {
            best_w = w;
            z = t;
            z_id = id;
        }
        if stats_open && w > 0.0 {
            cum += w;
            n_samples += 1;
            last_t = t;
            if d_min.is_none() && cum > cfg.min_weight {
                d_min = Some(t);
            }
            if d_min.is_some() {
                sum_w += w;
                sum_wt += w * t;
            }
            if cum >= cfg.tau_cw {
                d_max = Some(t);
                stats_open = false;
            }
        }
    }
    for (v, b) in rgb.iter_mut().zip(scene.background) {
        *v += trans * b;
    }

    match d_min {
        Some(d_min) => {
            let d_max = d_max.unwrap_or(last_t);
            let d_exp = (sum_wt / sum_w).clamp(d_min, d_max);
            RayRecord {
                rgb,
                d_min,
                d_max,
                d_exp,
                n_samples,
                z_maxweight: z,
                maxweight_object: z_id,
            }
        }
        None => RayRecord {
            rgb,
            d_min: 0.0,
            d_max: 0.0,
            d_exp: 0.0,
            n_samples: 0,
            z_maxweight: 0.0,
            maxweight_object: 0,
        },
    }
}

/// Rendered view with the per-pixel ray statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGeometry {
    pub camera: Camera,
    pub config: RenderConfig,
    pub rgb: PixelMap<[f32; 3]>,
    pub d_min: PixelMap<f32>,
    pub d_max: PixelMap<f32>,
    pub d_exp: PixelMap<f32>,
    pub n_samples: PixelMap<u32>,
    /// Max-weight-sample depth, used for prompt back-projection and mask refinement.
    pub depth: PixelMap<f32>,
}

impl ViewGeometry {
    pub fn width(&self) -> u32 {
        self.camera.width()
    }

    pub fn height(&self) -> u32 {
        self.camera.height()
    }

    #[inline]
    pub fn is_valid(&self, x: u32, y: u32) -> bool {
        self.n_samples.get(x, y) > 0
    }

    pub fn valid_count(&self) -> usize {
        self.n_samples.data.iter().filter(|n| **n > 0).count()
    }

    /// Checks the map invariants: shapes, depth ordering, invalid encoding.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        let shapes = [
            (self.d_min.width, self.d_min.height),
            (self.d_max.width, self.d_max.height),
            (self.d_exp.width, self.d_exp.height),
            (self.n_samples.width, self.n_samples.height),
            (self.depth.width, self.depth.height),
            (self.rgb.width, self.rgb.height),
        ];
        if shapes.iter().any(|s| *s != (w, h)) {
            return Err(Error::DimensionMismatch("view maps disagree with camera size".into()));
        }
        for i in 0..self.n_samples.data.len() {
            let (lo, mid, hi) = (self.d_min.data[i], self.d_exp.data[i], self.d_max.data[i]);
            if self.n_samples.data[i] > 0 {
                if !(lo <= mid && mid <= hi) {
                    return Err(Error::InvalidConfig(format!(
                        "pixel {i}: D_min ≤ D_exp ≤ D_max violated"
                    )));
                }
            } else if lo != 0.0 || mid != 0.0 || hi != 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "pixel {i}: invalid pixel carries depths"
                )));
            }
        }
        Ok(())
    }
}

/// Marches every pixel-center ray of `camera`.
pub fn render_view(scene: &Scene, camera: &Camera, cfg: &RenderConfig) -> ViewGeometry {
    let (w, h) = (camera.width(), camera.height());
    let rows: Vec<Vec<RayRecord>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| march_ray(scene, &camera.pixel_ray(x, y), cfg))
                .collect()
        })
        .collect();
    let n = w as usize * h as usize;
    let mut rgb = Vec::with_capacity(n);
    let mut d_min = Vec::with_capacity(n);
    let mut d_max = Vec::with_capacity(n);
    let mut d_exp = Vec::with_capacity(n);
    let mut n_samples = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    for rec in rows.iter().flatten() {
        rgb.push(rec.rgb.map(|c| c as f32));
        d_min.push(rec.d_min as f32);
        d_max.push(rec.d_max as f32);
        d_exp.push(rec.d_exp as f32);
        n_samples.push(rec.n_samples);
        depth.push(rec.z_maxweight as f32);
    }
    ViewGeometry {
        camera: camera.clone(),
        config: *cfg,
        rgb: PixelMap { width: w, height: h, data: rgb },
        d_min: PixelMap { width: w, height: h, data: d_min },
        d_max: PixelMap { width: w, height: h, data: d_max },
        d_exp: PixelMap { width: w, height: h, data: d_exp },
        n_samples: PixelMap { width: w, height: h, data: n_samples },
        depth: PixelMap { width: w, height: h, data: depth },
    }
}

/// Exact visible-object mask: pixels whose first surface hit belongs to one
/// of `object_ids`.
pub fn silhouette(scene: &Scene, camera: &Camera, object_ids: &[u32], t_max: f64) -> PixelMap<bool> {
    let (w, h) = (camera.width(), camera.height());
    let data: Vec<bool> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).map(move |x| {
                scene
                    .first_hit(&camera.pixel_ray(x, y), t_max)
                    .is_some_and(|(_, id)| object_ids.contains(&id))
            })
        })
        .collect();
    PixelMap { width: w, height: h, data }
}
