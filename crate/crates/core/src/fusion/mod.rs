//! Multi-view mask fusion into a voxel occupancy grid.

mod instance;
mod reference;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{closest_point_on_ray, contract, uncontract, Point3, SceneBounds, VoxelGrid};
use crate::render::{PixelMap, ViewGeometry};
use crate::scene::DensityGrid;
use crate::segment::ConfidenceMask;

pub use instance::{random_instance, FusionInstance};
pub use reference::fuse_reference;

/// Kernel hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionParams {
    /// Base depth tolerance in voxels (γ).
    pub gamma: f64,
    /// Depth tolerance bonus per ray sample (β).
    pub beta: f64,
    /// Cap on the per-sample bonus.
    pub b_max: f64,
    /// Spatial tolerance per unit of ray depth range (λ_range).
    pub lambda_range: f64,
    /// Minimum density for the thick path.
    pub rho_thresh: f64,
    /// Minimum density for thin-path candidates.
    pub rho_thin_thresh: f64,
    /// Footprint coverage above which a thin score takes the peak mask value.
    pub thin_cover_thresh: f64,
    /// Depth-weight falloff (α1).
    pub alpha1: f64,
    /// Thin scores below this are discarded.
    pub rho_thin: f64,
    pub eps: f64,
    pub mask_thresh: f64,
    /// Mask values must exceed this for a voxel to become a thin candidate.
    pub thin_mask_floor: f64,
    /// Sharpness of the depth-gradient confidence (κ).
    pub gradient_kappa: f64,
    pub thin_enabled: bool,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            gamma: 1.5,
            beta: 0.05,
            b_max: 2.0,
            lambda_range: 0.1,
            rho_thresh: 0.5,
            rho_thin_thresh: 2.0,
            thin_cover_thresh: 0.5,
            alpha1: 4.0,
            rho_thin: 0.6,
            eps: 1e-8,
            mask_thresh: 0.5,
            thin_mask_floor: 0.1,
            gradient_kappa: 1.0,
            thin_enabled: true,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("b_max", self.b_max),
            ("lambda_range", self.lambda_range),
            ("rho_thresh", self.rho_thresh),
            ("rho_thin_thresh", self.rho_thin_thresh),
            ("thin_cover_thresh", self.thin_cover_thresh),
            ("alpha1", self.alpha1),
            ("thin_mask_floor", self.thin_mask_floor),
            ("gradient_kappa", self.gradient_kappa),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.rho_thin > 0.0 && self.rho_thin < 1.0) {
            return Err(Error::InvalidConfig(format!("rho_thin must lie in (0, 1), got {}", self.rho_thin)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("eps must be positive".into()));
        }
        if self.mask_thresh != 0.5 {
            return Err(Error::InvalidConfig("mask threshold is fixed at 0.5".into()));
        }
        Ok(())
    }

    /// Density below which a voxel can take neither path.
    fn density_floor(&self) -> f64 {
        if self.thin_enabled {
            self.rho_thresh.min(self.rho_thin_thresh)
        } else {
            self.rho_thresh
        }
    }
}

/// A rendered view paired with its refined confidence mask.
#[derive(Clone, Debug)]
pub struct MaskedView {
    pub view: Arc<ViewGeometry>,
    pub mask: ConfidenceMask,
}

impl MaskedView {
    pub fn new(view: Arc<ViewGeometry>, mask: ConfidenceMask) -> Result<Self> {
        if mask.width() != view.width() || mask.height() != view.height() {
            return Err(Error::DimensionMismatch(format!(
                "mask {}x{} vs view {}x{}",
                mask.width(),
                mask.height(),
                view.width(),
                view.height()
            )));
        }
        Ok(Self { view, mask })
    }

    /// Stable content hash used to order views canonically.
    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.view.camera.world_from_camera_matrix() {
            v.to_bits().hash(&mut h);
        }
        let k = self.view.camera.intrinsics();
        for v in [k.fx, k.fy, k.cx, k.cy] {
            v.to_bits().hash(&mut h);
        }
        for v in &self.mask.values.data {
            v.to_bits().hash(&mut h);
        }
        for m in [&self.view.d_min, &self.view.d_max, &self.view.d_exp] {
            for v in &m.data {
                v.to_bits().hash(&mut h);
            }
        }
        self.view.n_samples.data.hash(&mut h);
        h.finish()
    }
}

/// Fused per-voxel foreground probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub grid: VoxelGrid,
    pub bounds: SceneBounds,
    pub probs: Vec<f32>,
    pub version: u64,
}

impl OccupancyGrid {
    pub fn zeros(grid: VoxelGrid, bounds: SceneBounds) -> Self {
        Self {
            grid,
            bounds,
            probs: vec![0.0; grid.len()],
            version: 0,
        }
    }

    pub fn get(&self, idx: [usize; 3]) -> f32 {
        self.probs[self.grid.linear(idx)]
    }

    /// Probability of the voxel holding world point `p`, 0 outside the grid.
    pub fn sample(&self, p: &Point3) -> f32 {
        match self.grid.world_to_index(&contract(p, &self.bounds)) {
            Some(idx) => self.get(idx),
            None => 0.0,
        }
    }

    pub fn threshold(&self, t: f32) -> Vec<bool> {
        self.probs.iter().map(|p| *p >= t).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} probabilities for {} voxels",
                self.probs.len(),
                self.grid.len()
            )));
        }
        if let Some(p) = self.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidGrid(format!("probability {p} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThickStage {
    Pass,
    SpatialFail,
    DepthFail,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThickDecision {
    pub voxel: usize,
    pub view: usize,
    pub m: f64,
    pub delta: f64,
    pub g: f64,
    pub tau_spatial: f64,
    pub tau_depth: f64,
    pub t_proj: f64,
    pub t_clamped: f64,
    pub mu: f64,
    pub h: f64,
    pub r: f64,
    pub w_depth: f64,
    pub stage: ThickStage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThinDecision {
    pub voxel: usize,
    pub view: usize,
    pub x_start: u32,
    pub x_end: u32,
    pub y_start: u32,
    pub y_end: u32,
    pub support_count: u32,
    pub n_pixels: u32,
    pub p_covered: f64,
    pub m_max: f64,
    pub t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "path", rename_all = "kebab-case")]
pub enum TraceRecord {
    Thick(ThickDecision),
    Thin(ThinDecision),
}

/// Confidence in the expected depth at `(x, y)`: near 1 on flat regions and
/// near 0 across depth discontinuities.
///
/// `G` is the largest absolute difference of expected depth to a valid
/// 4-neighbor, divided by the pixel's depth range; `g = 1 / (1 + κ·G)`,
/// clamped to `[0, 1 - ε]`.
pub fn depth_gradient(view: &ViewGeometry, x: u32, y: u32, kappa: f64, eps: f64) -> f64 {
    let (w, h) = (view.width(), view.height());
    let d = view.d_exp.get(x, y) as f64;
    let range = view.d_max.get(x, y) as f64 - view.d_min.get(x, y) as f64;
    let mut diff = 0.0f64;
    let neighbors = [
        (x.checked_sub(1), Some(y)),
        (x.checked_add(1).filter(|n| *n < w), Some(y)),
        (Some(x), y.checked_sub(1)),
        (Some(x), y.checked_add(1).filter(|n| *n < h)),
    ];
    for (nx, ny) in neighbors {
        if let (Some(nx), Some(ny)) = (nx, ny) {
            if view.is_valid(nx, ny) {
                diff = diff.max((view.d_exp.get(nx, ny) as f64 - d).abs());
            }
        }
    }
    let g = 1.0 / (1.0 + kappa * diff / (range + eps));
    g.clamp(0.0, 1.0 - eps)
}

/// Gaussian weight of a clamped ray depth relative to the center of the
/// pixel's `[d_min, d_max]` segment. Returns `(w, mu, h, r)`.
pub fn depth_weight(t_clamped: f64, d_min: f64, d_max: f64, alpha1: f64, eps: f64) -> (f64, f64, f64, f64) {
    let mu = 0.5 * (d_min + d_max);
    let h = (0.5 * (d_max - d_min)).max(eps);
    let r = (t_clamped - mu).abs() / h;
    ((-alpha1 * r * r).exp(), mu, h, r)
}

/// Per-pixel statistics needed by the thick check.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PixelStats {
    pub d_min: f64,
    pub d_max: f64,
    pub d_exp: f64,
    pub n_samples: u32,
    pub g: f64,
}

/// Depth-consistency and ray-alignment test of a voxel against one pixel.
/// `center` is the voxel center in grid coordinates, `world` in world space.
#[allow(clippy::too_many_arguments)]
pub(crate) fn thick_check(
    view: &ViewGeometry,
    bounds: &SceneBounds,
    center: &Point3,
    world: &Point3,
    u: f64,
    v: f64,
    px: PixelStats,
    m: f64,
    dx: f64,
    params: &FusionParams,
) -> ThickDecision {
    let ray = view.camera.uv_to_ray(u, v);
    let cp = closest_point_on_ray(&ray, world, px.d_min, px.d_max);
    let delta = (contract(&cp.point, bounds) - center).norm();
    let t_proj = (world - ray.origin).dot(&ray.direction);
    let tau_spatial = dx * px.g + params.lambda_range * (px.d_max - px.d_min);
    let b = (params.beta * px.n_samples as f64).min(params.b_max);
    let tau_depth = (params.gamma + b) * dx;
    let x_d = (world - ray.origin).norm();
    let (w_depth, mu, h, r) = depth_weight(cp.t, px.d_min, px.d_max, params.alpha1, params.eps);
    let stage = if delta > tau_spatial {
        ThickStage::SpatialFail
    } else if (x_d - px.d_exp).abs() > tau_depth {
        ThickStage::DepthFail
    } else {
        ThickStage::Pass
    };
    ThickDecision {
        voxel: 0,
        view: 0,
        m,
        delta,
        g: px.g,
        tau_spatial,
        tau_depth,
        t_proj,
        t_clamped: cp.t,
        mu,
        h,
        r,
        w_depth,
        stage,
    }
}

/// Footprint-coverage score of a voxel in one view. `corners` are the
/// projected corner positions in pixel units; `x_d` is the distance from the
/// camera to the voxel center.
pub(crate) fn thin_check(
    view: &ViewGeometry,
    mask: &ConfidenceMask,
    corners: &[(f64, f64); 8],
    x_d: f64,
    dx: f64,
    params: &FusionParams,
) -> ThinDecision {
    let (w, h) = (view.width(), view.height());
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(cx, cy) in corners {
        lo_x = lo_x.min(cx);
        hi_x = hi_x.max(cx);
        lo_y = lo_y.min(cy);
        hi_y = hi_y.max(cy);
    }
    let clip = |v: f64, n: u32| v.floor().clamp(0.0, (n - 1) as f64) as u32;
    let (x_start, x_end, y_start, y_end) = (clip(lo_x, w), clip(hi_x, w), clip(lo_y, h), clip(hi_y, h));
    let mut support = 0u32;
    let mut n_pixels = 0u32;
    let mut m_max = 0.0f64;
    for y in y_start..=y_end {
        for x in x_start..=x_end {
            let n = view.n_samples.get(x, y);
            if n == 0 {
                continue;
            }
            n_pixels += 1;
            let m = mask.get(x, y) as f64;
            let tol = (2.0 * params.gamma + (params.beta * n as f64).min(params.b_max)) * dx;
            if m > 0.5 && (x_d - view.d_exp.get(x, y) as f64).abs() <= tol {
                support += 1;
                m_max = m_max.max(m);
            }
        }
    }
    let p_covered = if n_pixels == 0 {
        0.0
    } else {
        support as f64 / n_pixels as f64
    };
    let t = if support > 0 && p_covered >= params.thin_cover_thresh {
        m_max
    } else {
        p_covered
    };
    ThinDecision {
        voxel: 0,
        view: 0,
        x_start,
        x_end,
        y_start,
        y_end,
        support_count: support,
        n_pixels,
        p_covered,
        m_max,
        t,
    }
}

/// Pixel-space positions of the 8 corners of the voxel centered at `center`
/// (grid coordinates); `None` if a corner falls behind the camera or outside
/// the contracted domain.
pub(crate) fn project_corners(
    view: &ViewGeometry,
    bounds: &SceneBounds,
    center: &Point3,
    dx: f64,
) -> Option<[(f64, f64); 8]> {
    let (w, h) = (view.width() as f64, view.height() as f64);
    let mut out = [(0.0, 0.0); 8];
    for (j, slot) in out.iter_mut().enumerate() {
        let s = |bit: usize| if j & bit != 0 { 0.5 } else { -0.5 };
        let c = Point3::new(center.x + s(1) * dx, center.y + s(2) * dx, center.z + s(4) * dx);
        let p = view.camera.project(&uncontract(&c, bounds)?);
        if !p.in_front {
            return None;
        }
        *slot = (p.u * w, p.v * h);
    }
    Some(out)
}

struct Prepared<'a> {
    input: &'a MaskedView,
    index: usize,
    g: PixelMap<f64>,
}

struct Kernel<'a> {
    grid: VoxelGrid,
    bounds: SceneBounds,
    density: &'a DensityGrid,
    views: Vec<Prepared<'a>>,
    params: FusionParams,
}

impl Kernel<'_> {
    fn voxel(&self, linear: usize, mut trace: Option<&mut Vec<TraceRecord>>) -> f32 {
        let rho = self.density.values[linear] as f64;
        if rho < self.params.density_floor() {
            return 0.0;
        }
        let p = &self.params;
        let dx = self.grid.voxel_size();
        let center = self.grid.center_of(linear);
        let Some(world) = uncontract(&center, &self.bounds) else {
            return 0.0;
        };
        let (mut votes, mut weight, mut thin_sum, mut thin_count) = (0.0f64, 0.0f64, 0.0f64, 0u32);
        for pv in &self.views {
            let view = &*pv.input.view;
            let (w, h) = (view.width(), view.height());
            let proj = view.camera.project(&world);
            let Some((x, y)) = proj.pixel(w, h) else {
                continue;
            };
            let n = view.n_samples.get(x, y);
            if n == 0 {
                continue;
            }
            let m = pv.input.mask.get(x, y) as f64;
            if m >= p.mask_thresh && rho >= p.rho_thresh {
                let stats = PixelStats {
                    d_min: view.d_min.get(x, y) as f64,
                    d_max: view.d_max.get(x, y) as f64,
                    d_exp: view.d_exp.get(x, y) as f64,
                    n_samples: n,
                    g: pv.g.get(x, y),
                };
                let mut d = thick_check(view, &self.bounds, &center, &world, proj.u, proj.v, stats, m, dx, p);
                if let Some(t) = trace.as_deref_mut() {
                    d.voxel = linear;
                    d.view = pv.index;
                    t.push(TraceRecord::Thick(d));
                }
                if d.stage == ThickStage::Pass {
                    votes += m * d.w_depth;
                    weight += d.w_depth;
                    continue;
                }
            }
            if !p.thin_enabled || m <= p.thin_mask_floor || rho < p.rho_thin_thresh {
                continue;
            }
            if dx * view.camera.intrinsics().fx / proj.depth < 1.0 {
                continue;
            }
            let Some(corners) = project_corners(view, &self.bounds, &center, dx) else {
                continue;
            };
            let x_d = (world - view.camera.position()).norm();
            let mut d = thin_check(view, &pv.input.mask, &corners, x_d, dx, p);
            if let Some(t) = trace.as_deref_mut() {
                d.voxel = linear;
                d.view = pv.index;
                t.push(TraceRecord::Thin(d));
            }
            if d.t >= p.rho_thin {
                thin_sum += d.t;
                thin_count += 1;
            }
        }
        let denom = weight + thin_count as f64;
        if denom > p.eps {
            ((votes + thin_sum) / denom).clamp(0.0, 1.0) as f32
        } else {
            0.0
        }
    }
}

pub(crate) fn check_inputs(
    grid: &VoxelGrid,
    density: &DensityGrid,
    views: &[MaskedView],
    params: &FusionParams,
) -> Result<()> {
    params.validate()?;
    if density.grid != *grid || density.values.len() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "density grid {}^3 does not match occupancy grid {}^3",
            density.grid.resolution, grid.resolution
        )));
    }
    for (i, mv) in views.iter().enumerate() {
        if !mv.mask.values.same_shape(&mv.view.d_exp) {
            return Err(Error::DimensionMismatch(format!("mask and view {i} differ in size")));
        }
    }
    Ok(())
}

fn build_kernel<'a>(
    grid: &VoxelGrid,
    bounds: &SceneBounds,
    density: &'a DensityGrid,
    views: &'a [MaskedView],
    params: &FusionParams,
) -> Result<Kernel<'a>> {
    check_inputs(grid, density, views, params)?;
    let mut prepared: Vec<(u64, Prepared)> = views
        .iter()
        .enumerate()
        .map(|(index, input)| {
            let v = &*input.view;
            let mut g = PixelMap::filled(v.width(), v.height(), 0f64);
            for y in 0..v.height() {
                for x in 0..v.width() {
                    if v.is_valid(x, y) {
                        g.set(x, y, depth_gradient(v, x, y, params.gradient_kappa, params.eps));
                    }
                }
            }
            (input.fingerprint(), Prepared { input, index, g })
        })
        .collect();
    // Summation order follows content, not argument order, so any permutation
    // of the views yields bit-identical results.
    prepared.sort_by_key(|(fp, _)| *fp);
    Ok(Kernel {
        grid: *grid,
        bounds: *bounds,
        density,
        views: prepared.into_iter().map(|(_, p)| p).collect(),
        params: *params,
    })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// Voxels per work unit. Each voxel is owned by exactly one unit, so the
/// result does not depend on the partition or on scheduling.
const CHUNK: usize = 4096;

/// Fuses refined masks from several views into occupancy probabilities,
/// using `workers` threads.
pub fn fuse(
    grid: &VoxelGrid,
    bounds: &SceneBounds,
    density: &DensityGrid,
    views: &[MaskedView],
    params: &FusionParams,
    workers: usize,
) -> Result<OccupancyGrid> {
    let kernel = build_kernel(grid, bounds, density, views, params)?;
    let mut out = OccupancyGrid::zeros(*grid, *bounds);
    pool(workers)?.install(|| {
        out.probs.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
            for (k, slot) in chunk.iter_mut().enumerate() {
                *slot = kernel.voxel(c * CHUNK + k, None);
            }
        })
    });
    Ok(out)
}

/// [`fuse`] that also records every path decision for voxels selected by
/// `select`, ordered by voxel then view order.
pub fn fuse_traced(
    grid: &VoxelGrid,
    bounds: &SceneBounds,
    density: &DensityGrid,
    views: &[MaskedView],
    params: &FusionParams,
    workers: usize,
    select: impl Fn(usize) -> bool + Sync,
) -> Result<(OccupancyGrid, Vec<TraceRecord>)> {
    let kernel = build_kernel(grid, bounds, density, views, params)?;
    let mut out = OccupancyGrid::zeros(*grid, *bounds);
    let traces: Vec<Vec<TraceRecord>> = pool(workers)?.install(|| {
        out.probs
            .par_chunks_mut(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut records = Vec::new();
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let i = c * CHUNK + k;
                    *slot = if select(i) {
                        kernel.voxel(i, Some(&mut records))
                    } else {
                        kernel.voxel(i, None)
                    };
                }
                records
            })
            .collect()
    });
    Ok((out, traces.into_iter().flatten().collect()))
}

/// Writes trace records as JSON lines.
pub fn write_trace(records: &[TraceRecord], mut out: impl std::io::Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Binary mask of the pixels whose ray meets a voxel with probability at
/// least `threshold`. Valid pixels are searched between their first-hit and
/// cutoff depths, padded by one voxel since both depths are quantized to ray
/// samples; other pixels are searched over the full render range.
pub fn project_grid_overlay(grid: &OccupancyGrid, view: &ViewGeometry, threshold: f32) -> PixelMap<bool> {
    let (w, h) = (view.width(), view.height());
    let step = 0.5 * grid.grid.voxel_size();
    let data = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).map(move |x| {
                let ray = view.camera.pixel_ray(x, y);
                let (t0, t1) = if view.is_valid(x, y) {
                    let pad = 2.0 * step;
                    (view.d_min.get(x, y) as f64 - pad, view.d_max.get(x, y) as f64 + pad)
                } else {
                    (view.config.near, view.config.far)
                };
                let steps = ((t1 - t0) / step).ceil().max(0.0) as usize;
                (0..=steps).any(|k| {
                    let t = (t0 + k as f64 * step).min(t1);
                    grid.sample(&ray.at(t)) >= threshold
                })
            })
        })
        .collect();
    PixelMap { width: w, height: h, data }
}
