//! Metrics, shipped benchmark scenes, a scripted-user simulator and
//! ablation runs.

mod bench;

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{fuse, project_grid_overlay, FusionParams, MaskedView, OccupancyGrid};
use crate::geometry::{uncontract, Camera, Point3, Vec3, VoxelGrid};
use crate::render::{render_view, silhouette, PixelMap, RenderConfig, ViewGeometry};
use crate::scene::{ground_truth_voxels, scene_density, Scene};
use crate::segment::{refine_mask, ConfidenceMask};
use crate::session::{replay, PlanMode, ScriptPrompt, Session, SessionConfig, SessionScript, ViewId};

pub use bench::{benchmark, benchmark_names, Benchmark};

/// Intersection over union; 1 when both sets are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} cells", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        inter += (*p && *g) as usize;
        union += (*p || *g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Fraction of cells where prediction and ground truth agree.
pub fn accuracy(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} cells", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let same = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(same as f64 / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub iou: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub iou3d: f64,
    /// Mean over held-out views.
    pub iou2d: f64,
    pub acc2d: f64,
    pub per_view: Vec<ViewMetrics>,
}

/// Held-out cameras: a small Fibonacci lattice turned about the vertical
/// axis so none coincides with a candidate view.
pub fn held_out_cameras(bench: &Benchmark, count: usize) -> Result<Vec<Camera>> {
    let cfg = &bench.profile;
    let center = bench.scene.bounds.center();
    let radius = cfg.orbit_factor * bench.scene.bounds.scale() * 1.05;
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    (0..count)
        .map(|i| {
            // Upper hemisphere only; views from below see the support.
            let y = 0.7 - 0.6 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = 0.9 + 2.0 * std::f64::consts::PI * i as f64 / golden;
            let eye = center + Vec3::new(r * phi.cos(), y, r * phi.sin()) * radius;
            Camera::look_at(cfg.intrinsics(), eye, center)
        })
        .collect()
}

/// Held-out views rendered once and reused across evaluations.
pub struct HeldOut {
    pub views: Vec<ViewGeometry>,
    pub truth: Vec<PixelMap<bool>>,
}

impl HeldOut {
    pub fn new(bench: &Benchmark, count: usize) -> Result<Self> {
        let cams = held_out_cameras(bench, count)?;
        let views: Vec<ViewGeometry> = cams
            .iter()
            .map(|c| render_view(&bench.scene, c, &bench.profile.render))
            .collect();
        let truth = cams
            .iter()
            .map(|c| silhouette(&bench.scene, c, &bench.targets, bench.profile.render.far))
            .collect();
        Ok(Self { views, truth })
    }
}

/// 3D IoU against the target's voxels and 2D IoU/accuracy of the grid's
/// projection on held-out views.
pub fn evaluate(bench: &Benchmark, grid: &OccupancyGrid, held_out: &HeldOut) -> Result<SegMetrics> {
    let gt = ground_truth_voxels(&bench.scene, &grid.grid, &bench.targets);
    let iou3d = iou(&grid.threshold(0.5), &gt.cells)?;
    let mut per_view = Vec::new();
    for (view, truth) in held_out.views.iter().zip(&held_out.truth) {
        let overlay = project_grid_overlay(grid, view, 0.5);
        per_view.push(ViewMetrics {
            iou: iou(&overlay.data, &truth.data)?,
            accuracy: accuracy(&overlay.data, &truth.data)?,
        });
    }
    let n = per_view.len().max(1) as f64;
    Ok(SegMetrics {
        iou3d,
        iou2d: per_view.iter().map(|m| m.iou).sum::<f64>() / n,
        acc2d: per_view.iter().map(|m| m.accuracy).sum::<f64>() / n,
        per_view,
    })
}

/// Visible target pixels of a view with a valid ray, eroded by `erode`
/// pixels so prompts avoid object boundaries.
fn target_pixels(scene: &Scene, view: &ViewGeometry, targets: &[u32], far: f64, erode: i64) -> Vec<(u32, u32)> {
    let sil = silhouette(scene, &view.camera, targets, far);
    let (w, h) = (view.width() as i64, view.height() as i64);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && sil.get(x as u32, y as u32) && view.is_valid(x as u32, y as u32);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let keep = (-erode..=erode).all(|dy| (-erode..=erode).all(|dx| inside(x + dx, y + dy)));
            if keep {
                out.push((x as u32, y as u32));
            }
        }
    }
    out
}

/// Scripted user: on every anchor that sees the target, clicks the visible
/// target pixel nearest the target's image centroid, then the pixels
/// farthest from those already chosen. The last click on an anchor closes
/// its group.
pub fn simulate_prompts(session: &Session, targets: &[u32], per_anchor: usize) -> Vec<ScriptPrompt> {
    let scene = session.scene();
    let far = session.config().render.far;
    let mut prompts = Vec::new();
    for (ai, &anchor) in session.anchors().iter().enumerate() {
        let view = &session.views()[anchor].geometry;
        let mut pixels = target_pixels(scene, view, targets, far, 2);
        if pixels.is_empty() {
            pixels = target_pixels(scene, view, targets, far, 0);
        }
        if pixels.is_empty() {
            continue;
        }
        let n = pixels.len() as f64;
        let cx = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let cy = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        let d2 = |a: (u32, u32), bx: f64, by: f64| (a.0 as f64 - bx).powi(2) + (a.1 as f64 - by).powi(2);
        let first = *pixels
            .iter()
            .min_by(|a, b| d2(**a, cx, cy).total_cmp(&d2(**b, cx, cy)))
            .expect("non-empty");
        let mut chosen = vec![first];
        while chosen.len() < per_anchor {
            let next = pixels
                .iter()
                .filter(|p| !chosen.contains(p))
                .max_by(|a, b| {
                    let da = chosen.iter().map(|c| d2(**a, c.0 as f64, c.1 as f64)).fold(f64::INFINITY, f64::min);
                    let db = chosen.iter().map(|c| d2(**b, c.0 as f64, c.1 as f64)).fold(f64::INFINITY, f64::min);
                    da.total_cmp(&db).then(b.cmp(a))
                });
            match next {
                Some(p) => chosen.push(*p),
                None => break,
            }
        }
        let last = chosen.len() - 1;
        for (i, (px, py)) in chosen.into_iter().enumerate() {
            prompts.push(ScriptPrompt {
                anchor: ai,
                px,
                py,
                zoom: None,
                last: i == last,
            });
        }
    }
    prompts
}

/// Pool indices of the `k` candidates showing the most target pixels,
/// standing in for a user picking views by eye.
pub fn manual_best_views(session: &Session, targets: &[u32], k: usize) -> Vec<usize> {
    let scene = session.scene();
    let far = session.config().render.far;
    let mut scored: Vec<(usize, usize)> = session
        .pool()
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let view = session.render(cam);
            (i, target_pixels(scene, &view, targets, far, 0).len())
        })
        .collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Builds the scripted session the simulated user would record.
pub fn record_script(bench: &Benchmark, mode: PlanMode, config: &SessionConfig) -> Result<SessionScript> {
    let mut cfg = config.clone();
    cfg.mode = mode;
    let mut script = SessionScript {
        scene: bench.name.clone(),
        mode,
        n_views: Some(cfg.n_views),
        k_top: Some(cfg.k_top),
        ..SessionScript::default()
    };
    if mode == PlanMode::Manual {
        cfg.n_views = bench.manual_pool;
        script.n_views = Some(bench.manual_pool);
    }
    let mut session = Session::start(Arc::new(bench.scene.clone()), cfg.clone())?;
    if mode == PlanMode::Manual {
        script.manual_anchors = manual_best_views(&session, &bench.targets, cfg.k_top);
        for i in &script.manual_anchors {
            session.add_anchor(*i)?;
        }
    }
    script.prompts = simulate_prompts(&session, &bench.targets, bench.prompts_per_anchor);
    Ok(script)
}

/// Everything upstream of fusion for one scripted run.
pub struct Recording {
    pub script: SessionScript,
    pub session: Session,
    /// Centroid views with their raw masks, in view order.
    pub centroids: Vec<(ViewId, Camera, ConfidenceMask)>,
}

impl Recording {
    pub fn new(bench: &Benchmark, mode: PlanMode, config: &SessionConfig) -> Result<Self> {
        let script = record_script(bench, mode, config)?;
        let session = replay(Arc::new(bench.scene.clone()), &script, config.clone())?;
        let centroids = session
            .raw_masks()
            .iter()
            .map(|(id, m)| (*id, session.views()[*id].geometry.camera.clone(), m.clone()))
            .collect();
        Ok(Self {
            script,
            session,
            centroids,
        })
    }

    /// SHA-256 over prompts, centroid cameras and raw masks.
    pub fn upstream_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.script.prompts).expect("serializable"));
        for (id, cam, mask) in &self.centroids {
            h.update((*id as u64).to_le_bytes());
            for v in cam.world_from_camera_matrix() {
                h.update(v.to_le_bytes());
            }
            for v in &mask.values.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fuses the recorded masks under one arm's settings. Views are
    /// re-rendered only when the render settings differ from the session's.
    pub fn fuse_arm(&self, bench: &Benchmark, arm: &ArmSettings, workers: usize) -> Result<(OccupancyGrid, f64)> {
        let start = Instant::now();
        let base = &self.session.config().render;
        let mut views = Vec::with_capacity(self.centroids.len());
        for (id, cam, raw) in &self.centroids {
            let geometry = if arm.render == *base {
                Arc::clone(&self.session.views()[*id].geometry)
            } else {
                Arc::new(render_view(&bench.scene, cam, &arm.render))
            };
            let mask = if arm.refine { refine_mask(raw, &geometry)? } else { raw.clone() };
            views.push(MaskedView::new(geometry, mask)?);
        }
        let grid = VoxelGrid::enclosing(&bench.scene.bounds, self.session.config().grid_res)?;
        let occ = fuse(&grid, &bench.scene.bounds, self.session.density(), &views, &arm.fusion, workers)?;
        Ok((occ, start.elapsed().as_secs_f64() * 1e3))
    }
}

/// The stage settings that differ between ablation arms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmSettings {
    pub render: RenderConfig,
    pub fusion: FusionParams,
    pub refine: bool,
}

impl ArmSettings {
    pub fn from_config(config: &SessionConfig) -> Self {
        Self {
            render: config.render,
            fusion: config.fusion,
            refine: config.refine_masks,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    ThinOff,
    DepthWeightOff,
    TauCwSweep,
    FibonacciVsManual,
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match self {
            Ablation::ThinOff => "thin-off",
            Ablation::DepthWeightOff => "depth-weight-off",
            Ablation::TauCwSweep => "tau_cw-sweep",
            Ablation::FibonacciVsManual => "fibonacci-vs-manual",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thin-off" => Ok(Ablation::ThinOff),
            "depth-weight-off" => Ok(Ablation::DepthWeightOff),
            "tau_cw-sweep" | "tau-cw-sweep" => Ok(Ablation::TauCwSweep),
            "fibonacci-vs-manual" => Ok(Ablation::FibonacciVsManual),
            _ => Err(Error::Unknown {
                kind: "ablation",
                name: s.to_string(),
            }),
        }
    }
}

pub const TAU_SWEEP: [f64; 6] = [0.3, 0.45, 0.6, 0.75, 0.9, 0.95];

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scene: String,
    pub ablation: String,
    pub arm: String,
    pub tau_cw: f64,
    pub iou3d: f64,
    pub iou2d_mean: f64,
    pub acc2d_mean: f64,
    pub runtime_ms: f64,
}

pub struct ArmResult {
    pub row: AblationRow,
    pub metrics: SegMetrics,
    pub grid: OccupancyGrid,
    /// Hash of the prompts, centroid cameras and raw masks the arm fused.
    pub upstream: String,
}

pub struct AblationReport {
    pub arms: Vec<ArmResult>,
}

impl AblationReport {
    pub fn rows(&self) -> Vec<AblationRow> {
        self.arms.iter().map(|a| a.row.clone()).collect()
    }

    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.row.arm == name)
    }

    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        write_csv(&self.rows(), out)
    }
}

pub fn write_csv(rows: &[AblationRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format {
            format: "csv",
            reason: e.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub const HELD_OUT_VIEWS: usize = 4;

/// Runs both arms (or every sweep value) of an ablation on a benchmark.
pub fn run_ablation(bench: &Benchmark, ablation: Ablation, config: &SessionConfig) -> Result<AblationReport> {
    let held = HeldOut::new(bench, HELD_OUT_VIEWS)?;
    let workers = config.workers;
    let make = |rec: &Recording, arm_name: &str, arm: ArmSettings| -> Result<ArmResult> {
        let (grid, ms) = rec.fuse_arm(bench, &arm, workers)?;
        let metrics = evaluate(bench, &grid, &held)?;
        Ok(ArmResult {
            row: AblationRow {
                scene: bench.name.clone(),
                ablation: ablation.name().to_string(),
                arm: arm_name.to_string(),
                tau_cw: arm.render.tau_cw,
                iou3d: metrics.iou3d,
                iou2d_mean: metrics.iou2d,
                acc2d_mean: metrics.acc2d,
                runtime_ms: ms,
            },
            metrics,
            grid,
            upstream: rec.upstream_hash(),
        })
    };
    let base = ArmSettings::from_config(config);
    let arms = match ablation {
        Ablation::ThinOff => {
            let rec = Recording::new(bench, PlanMode::Fibonacci, config)?;
            let mut off = base;
            off.fusion.thin_enabled = false;
            let mut on = base;
            on.fusion.thin_enabled = true;
            vec![make(&rec, "thin-on", on)?, make(&rec, "thin-off", off)?]
        }
        Ablation::DepthWeightOff => {
            let rec = Recording::new(bench, PlanMode::Fibonacci, config)?;
            let on = ArmSettings { refine: true, ..base };
            let off = ArmSettings { refine: false, ..base };
            vec![make(&rec, "depth-weight-on", on)?, make(&rec, "depth-weight-off", off)?]
        }
        Ablation::TauCwSweep => {
            let rec = Recording::new(bench, PlanMode::Fibonacci, config)?;
            TAU_SWEEP
                .iter()
                .map(|&tau| {
                    let arm = ArmSettings {
                        render: base.render.with_tau_cw(tau),
                        ..base
                    };
                    make(&rec, &format!("tau={tau}"), arm)
                })
                .collect::<Result<Vec<_>>>()?
        }
        Ablation::FibonacciVsManual => {
            let fib = Recording::new(bench, PlanMode::Fibonacci, config)?;
            let man = Recording::new(bench, PlanMode::Manual, config)?;
            vec![make(&fib, "fibonacci", base)?, make(&man, "manual", base)?]
        }
    };
    Ok(AblationReport { arms })
}

/// Voxels set in `grid` but outside the target, restricted to `region`.
pub fn false_positive_voxels(bench: &Benchmark, grid: &OccupancyGrid, region: impl Fn(&Point3) -> bool) -> usize {
    let gt = ground_truth_voxels(&bench.scene, &grid.grid, &bench.targets);
    (0..grid.grid.len())
        .filter(|&i| {
            grid.probs[i] >= 0.5
                && !gt.cells[i]
                && uncontract(&grid.grid.center_of(i), &bench.scene.bounds).is_some_and(|p| region(&p))
        })
        .count()
}

/// Per-object counts of fused voxels, keyed by the object id owning the
/// voxel center (0 for empty space).
pub fn voxels_by_object(scene: &Scene, grid: &OccupancyGrid) -> BTreeMap<u32, usize> {
    let mut out = BTreeMap::new();
    for i in 0..grid.grid.len() {
        if grid.probs[i] >= 0.5 {
            let id = uncontract(&grid.grid.center_of(i), &scene.bounds)
                .map(|p| scene_density(scene, &p).object_id)
                .unwrap_or(0);
            *out.entry(id).or_insert(0) += 1;
        }
    }
    out
}
