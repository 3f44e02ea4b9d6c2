//! Randomized fusion problems for oracle and property testing.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FusionParams, MaskedView};
use crate::geometry::{Camera, Intrinsics, Point3, SceneBounds, Vec3, VoxelGrid};
use crate::render::{render_view, PixelMap, RenderConfig};
use crate::scene::{bake_density_grid, DensityGrid, Scene, ScenePrimitive, Shape};
use crate::segment::{refine_mask, ConfidenceMask, RegionGrowSegmenter, Segmenter};

/// A complete, self-consistent input to the fusion kernel.
#[derive(Clone, Debug)]
pub struct FusionInstance {
    pub scene: Scene,
    pub grid: VoxelGrid,
    pub density: DensityGrid,
    pub views: Vec<MaskedView>,
    pub params: FusionParams,
}

fn random_primitive(rng: &mut ChaCha8Rng, id: u32) -> ScenePrimitive {
    let mut p3 = |s: f64| [rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s)];
    let shape = match id % 3 {
        0 => Shape::Sphere {
            center: p3(0.5),
            radius: 0.1 + 0.3 * rng.random::<f64>(),
        },
        1 => Shape::Box {
            center: p3(0.5),
            half_extents: [
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
            ],
        },
        _ => Shape::Capsule {
            a: p3(0.6),
            b: p3(0.6),
            radius: rng.random_range(0.02..0.1),
        },
    };
    let density = if rng.random_bool(0.5) {
        rng.random_range(0.3..6.0)
    } else {
        rng.random_range(20.0..200.0)
    };
    let color = [rng.random(), rng.random(), rng.random()];
    let mut prim = ScenePrimitive::new(shape, density, color, id + 1);
    if rng.random_bool(0.3) {
        prim = prim.with_soft_edge(rng.random_range(0.01..0.1));
    }
    prim
}

fn random_params(rng: &mut ChaCha8Rng) -> FusionParams {
    FusionParams {
        gamma: rng.random_range(0.5..4.0),
        beta: rng.random_range(0.0..0.2),
        b_max: rng.random_range(0.0..4.0),
        lambda_range: rng.random_range(0.0..0.3),
        rho_thresh: rng.random_range(0.0..5.0),
        rho_thin_thresh: rng.random_range(0.0..10.0),
        thin_cover_thresh: rng.random_range(0.0..1.0),
        alpha1: rng.random_range(0.5..16.0),
        rho_thin: rng.random_range(0.1..0.9),
        gradient_kappa: rng.random_range(0.5..2.0),
        thin_enabled: rng.random_bool(0.8),
        ..FusionParams::default()
    }
}

/// Random mask: the segmenter's output from a valid pixel when one exists,
/// otherwise smooth noise; refined against depth half of the time.
fn random_mask(rng: &mut ChaCha8Rng, view: &crate::render::ViewGeometry) -> ConfidenceMask {
    let (w, h) = (view.width(), view.height());
    let valid: Vec<(u32, u32)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| view.is_valid(x, y))
        .collect();
    let raw = if !valid.is_empty() && rng.random_bool(0.7) {
        let seed = valid[rng.random_range(0..valid.len())];
        RegionGrowSegmenter::default()
            .segment(view, seed)
            .expect("seed pixel is valid")
    } else {
        let (cx, cy, r) = (
            rng.random_range(0.0..w as f64),
            rng.random_range(0.0..h as f64),
            rng.random_range(1.0..w as f64),
        );
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                (1.0 - d / r).clamp(0.0, 1.0) as f32
            })
            .collect();
        ConfidenceMask::new(PixelMap::from_vec(w, h, data).expect("sized"))
            .expect("values in range")
    };
    if rng.random_bool(0.5) {
        refine_mask(&raw, view).expect("shapes match")
    } else {
        raw
    }
}

/// Builds a random scene, grid (`1..=max_res` per side), `1..=max_views`
/// rendered views with masks, and random kernel parameters.
pub fn random_instance(seed: u64, max_res: usize, max_views: usize) -> FusionInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_prims = rng.random_range(1..=3);
    let prims = (0..n_prims).map(|i| random_primitive(&mut rng, i)).collect();
    let unbounded = rng.random_bool(0.2);
    let bounds = SceneBounds::new([-1.0; 3], [1.0; 3], unbounded).expect("valid bounds");
    let scene = Scene::new(prims, bounds).expect("valid scene");
    let res = rng.random_range(1..=max_res.max(1));
    let grid = VoxelGrid::enclosing(&bounds, res).expect("valid grid");
    let density = bake_density_grid(&scene, &grid);

    let cfg = RenderConfig {
        samples_per_ray: 96,
        far: 6.0,
        tau_cw: rng.random_range(0.3..0.95),
        ..RenderConfig::default()
    };
    let n_views = rng.random_range(1..=max_views.max(1));
    let views = (0..n_views)
        .map(|_| {
            let dir = loop {
                let v = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if v.norm() > 0.2 && v.norm() <= 1.0 {
                    break v.normalize();
                }
            };
            let eye = Point3::origin() + dir * rng.random_range(1.2..3.5);
            let target = Point3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
            let size = rng.random_range(12..=28);
            let k = Intrinsics::from_fov(size, size + rng.random_range(0..4), rng.random_range(35.0..70.0));
            let cam = Camera::look_at(k, eye, target).expect("eye differs from target");
            let view = render_view(&scene, &cam, &cfg);
            let mask = random_mask(&mut rng, &view);
            MaskedView::new(Arc::new(view), mask).expect("mask sized to view")
        })
        .collect();
    FusionInstance {
        scene,
        grid,
        density,
        views,
        params: random_params(&mut rng),
    }
}
