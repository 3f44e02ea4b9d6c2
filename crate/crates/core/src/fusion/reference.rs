//! Straightforward single-threaded fusion used as a test oracle.

use super::{check_inputs, FusionParams, MaskedView, OccupancyGrid};
use crate::error::Result;
use crate::geometry::{contract, uncontract, Point3, SceneBounds, VoxelGrid};
use crate::render::ViewGeometry;
use crate::scene::DensityGrid;

fn valid(view: &ViewGeometry, x: i64, y: i64) -> bool {
    x >= 0
        && y >= 0
        && x < view.width() as i64
        && y < view.height() as i64
        && view.n_samples.data[(y as usize) * view.width() as usize + x as usize] > 0
}

fn at(map: &[f32], view: &ViewGeometry, x: i64, y: i64) -> f64 {
    map[(y as usize) * view.width() as usize + x as usize] as f64
}

fn gradient_confidence(view: &ViewGeometry, x: i64, y: i64, params: &FusionParams) -> f64 {
    let d = at(&view.d_exp.data, view, x, y);
    let range = at(&view.d_max.data, view, x, y) - at(&view.d_min.data, view, x, y);
    let mut worst = 0.0f64;
    for (nx, ny) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
        if valid(view, nx, ny) {
            let diff = (at(&view.d_exp.data, view, nx, ny) - d).abs();
            if diff > worst {
                worst = diff;
            }
        }
    }
    let g = 1.0 / (1.0 + params.gradient_kappa * worst / (range + params.eps));
    g.max(0.0).min(1.0 - params.eps)
}

struct Contribution {
    thick: Option<(f64, f64)>,
    thin: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn contribution(
    mv: &MaskedView,
    bounds: &SceneBounds,
    grid: &VoxelGrid,
    center: Point3,
    world: Point3,
    rho: f64,
    params: &FusionParams,
) -> Contribution {
    let none = Contribution { thick: None, thin: None };
    let view = &*mv.view;
    let cam = &view.camera;
    let k = cam.intrinsics();
    let dx = grid.voxel_size();

    let local = cam.to_camera(&world);
    let depth = -local.z;
    if depth <= 0.0 {
        return none;
    }
    let px = k.fx * local.x / depth + k.cx;
    let py = -k.fy * local.y / depth + k.cy;
    let (u, v) = (px / k.width as f64, py / k.height as f64);
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return none;
    }
    let x = ((u * k.width as f64).floor() as i64).min(k.width as i64 - 1);
    let y = ((v * k.height as f64).floor() as i64).min(k.height as i64 - 1);
    if !valid(view, x, y) {
        return none;
    }
    let m = at(&mv.mask.values.data, view, x, y);
    let d_min = at(&view.d_min.data, view, x, y);
    let d_max = at(&view.d_max.data, view, x, y);
    let d_exp = at(&view.d_exp.data, view, x, y);
    let n = view.n_samples.data[y as usize * k.width as usize + x as usize] as f64;
    let eye = cam.position();
    let x_d = (world - eye).norm();

    if m >= 0.5 && rho >= params.rho_thresh {
        let ray = cam.uv_to_ray(u, v);
        let along = (world - ray.origin).dot(&ray.direction);
        let t_c = along.max(d_min).min(d_max);
        let delta = (contract(&ray.at(t_c), bounds) - center).norm();
        let g = gradient_confidence(view, x, y, params);
        let tau_spatial = dx * g + params.lambda_range * (d_max - d_min);
        let bonus = (params.beta * n).min(params.b_max);
        let tau_depth = (params.gamma + bonus) * dx;
        if delta <= tau_spatial && (x_d - d_exp).abs() <= tau_depth {
            let mu = (d_min + d_max) / 2.0;
            let half = ((d_max - d_min) / 2.0).max(params.eps);
            let r = (t_c - mu).abs() / half;
            let w = (-params.alpha1 * r * r).exp();
            return Contribution {
                thick: Some((m * w, w)),
                thin: None,
            };
        }
    }

    if !params.thin_enabled || !(m > params.thin_mask_floor) || rho < params.rho_thin_thresh {
        return none;
    }
    if dx * k.fx / depth < 1.0 {
        return none;
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for sx in [-0.5, 0.5] {
        for sy in [-0.5, 0.5] {
            for sz in [-0.5, 0.5] {
                let corner = Point3::new(center.x + sx * dx, center.y + sy * dx, center.z + sz * dx);
                let Some(cw) = uncontract(&corner, bounds) else {
                    return none;
                };
                let cl = cam.to_camera(&cw);
                if -cl.z <= 0.0 {
                    return none;
                }
                xs.push(k.fx * cl.x / -cl.z + k.cx);
                ys.push(-k.fy * cl.y / -cl.z + k.cy);
            }
        }
    }
    let fold = |v: &[f64], f: fn(f64, f64) -> f64, init: f64| v.iter().fold(init, |a, b| f(a, *b));
    let clip = |v: f64, n: u32| (v.floor().max(0.0).min(n as f64 - 1.0)) as i64;
    let x0 = clip(fold(&xs, f64::min, f64::INFINITY), k.width);
    let x1 = clip(fold(&xs, f64::max, f64::NEG_INFINITY), k.width);
    let y0 = clip(fold(&ys, f64::min, f64::INFINITY), k.height);
    let y1 = clip(fold(&ys, f64::max, f64::NEG_INFINITY), k.height);

    let mut total = 0usize;
    let mut supportive = 0usize;
    let mut peak = 0.0f64;
    for yy in 0..k.height as i64 {
        for xx in 0..k.width as i64 {
            if xx < x0 || xx > x1 || yy < y0 || yy > y1 || !valid(view, xx, yy) {
                continue;
            }
            total += 1;
            let mm = at(&mv.mask.values.data, view, xx, yy);
            let nn = view.n_samples.data[yy as usize * k.width as usize + xx as usize] as f64;
            let tol = (2.0 * params.gamma + params.b_max.min(params.beta * nn)) * dx;
            if mm > 0.5 && (x_d - at(&view.d_exp.data, view, xx, yy)).abs() <= tol {
                supportive += 1;
                peak = peak.max(mm);
            }
        }
    }
    let covered = if total > 0 {
        supportive as f64 / total as f64
    } else {
        0.0
    };
    let t = if supportive > 0 && covered >= params.thin_cover_thresh {
        peak
    } else {
        covered
    };
    Contribution {
        thick: None,
        thin: Some(t),
    }
}

/// Reference fusion: visits every voxel, view and footprint pixel without
/// precomputation or parallelism. Results match [`super::fuse`] to within
/// floating-point reassociation.
pub fn fuse_reference(
    grid: &VoxelGrid,
    bounds: &SceneBounds,
    density: &DensityGrid,
    views: &[MaskedView],
    params: &FusionParams,
) -> Result<OccupancyGrid> {
    check_inputs(grid, density, views, params)?;
    let mut out = OccupancyGrid::zeros(*grid, *bounds);
    let g = grid.resolution;
    for iz in 0..g {
        for iy in 0..g {
            for ix in 0..g {
                let linear = grid.linear([ix, iy, iz]);
                let center = grid.index_to_center([ix, iy, iz]);
                let Some(world) = uncontract(&center, bounds) else {
                    continue;
                };
                let rho = density.values[linear] as f64;
                let (mut num, mut den) = (0.0, 0.0);
                for mv in views {
                    let c = contribution(mv, bounds, grid, center, world, rho, params);
                    if let Some((mw, w)) = c.thick {
                        num += mw;
                        den += w;
                    } else if let Some(t) = c.thin {
                        if t >= params.rho_thin {
                            num += t;
                            den += 1.0;
                        }
                    }
                }
                out.probs[linear] = if den > params.eps {
                    (num / den).clamp(0.0, 1.0) as f32
                } else {
                    0.0
                };
            }
        }
    }
    Ok(out)
}
