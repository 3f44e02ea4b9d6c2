//! Interactive session: anchors, prompts, centroid views, background mask
//! inference, barrier-triggered fusion and overlay feedback.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse, project_grid_overlay, FusionParams, MaskedView, OccupancyGrid};
use crate::geometry::{Camera, Intrinsics, VoxelGrid};
use crate::planner::{back_project_prompt, fibonacci_sample, make_centroid_view, rank_views, CentroidViewSpec, SessionPlan, ZOOM_360};
use crate::render::{render_view, PixelMap, RenderConfig, ViewGeometry};
use crate::scene::{bake_density_grid, DensityGrid, Scene};
use crate::segment::{refine_mask, ConfidenceMask, MaskOutcome, MaskQueue, MaskRequest, RegionGrowSegmenter, Segmenter, SegmenterConfig};

pub type ViewId = usize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    #[default]
    Fibonacci,
    Manual,
}

/// Everything a session needs besides the scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub mode: PlanMode,
    /// Candidate pool size.
    pub n_views: usize,
    /// Anchors kept in Fibonacci mode.
    pub k_top: usize,
    /// Candidate orbit radius as a multiple of the scene scale.
    pub orbit_factor: f64,
    pub image_size: u32,
    pub fov_deg: f64,
    pub render: RenderConfig,
    pub grid_res: usize,
    pub fusion: FusionParams,
    pub segmenter: SegmenterConfig,
    /// Apply depth-based mask refinement before fusion.
    pub refine_masks: bool,
    pub workers: usize,
    pub mask_workers: usize,
    pub default_zoom: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            mode: PlanMode::Fibonacci,
            n_views: 12,
            k_top: 5,
            orbit_factor: 2.6,
            image_size: 128,
            fov_deg: 50.0,
            render: RenderConfig::default(),
            grid_res: 128,
            fusion: FusionParams::default(),
            segmenter: SegmenterConfig::default(),
            refine_masks: true,
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            mask_workers: 2,
            default_zoom: ZOOM_360,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 {
            return Err(Error::Empty("candidate views"));
        }
        if self.mode == PlanMode::Fibonacci && self.n_views < self.k_top {
            return Err(Error::Infeasible(format!(
                "cannot select {} anchors from {} candidates",
                self.k_top, self.n_views
            )));
        }
        if self.grid_res == 0 {
            return Err(Error::InvalidGrid("resolution must be positive".into()));
        }
        if self.image_size == 0 || !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::InvalidConfig("image size and field of view must be positive".into()));
        }
        self.render.validate()?;
        self.fusion.validate()?;
        self.segmenter.validate()
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.image_size, self.image_size, self.fov_deg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ViewKind {
    Anchor { pool_index: usize },
    Centroid(CentroidViewSpec),
}

#[derive(Clone, Debug)]
pub struct ViewRecord {
    pub id: ViewId,
    pub kind: ViewKind,
    pub geometry: Arc<ViewGeometry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    PromptAccepted { anchor_id: ViewId, centroid_id: ViewId },
    MaskReady { view_id: ViewId },
    MaskFailed { view_id: ViewId, message: String },
    FusionComplete { version: u64, masks: usize },
    OverlayReady { version: u64, view_id: ViewId },
    Error { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// One interactive segmentation session over a scene.
pub struct Session {
    scene: Arc<Scene>,
    config: SessionConfig,
    pool: Vec<Camera>,
    plan: SessionPlan,
    views: Vec<ViewRecord>,
    anchor_views: Vec<ViewId>,
    group_of: BTreeMap<ViewId, usize>,
    density: Arc<DensityGrid>,
    queue: Arc<MaskQueue>,
    masks: BTreeMap<ViewId, MaskedView>,
    raw_masks: BTreeMap<ViewId, ConfidenceMask>,
    failed: BTreeSet<ViewId>,
    announced: BTreeSet<ViewId>,
    grid: Option<OccupancyGrid>,
    events: Vec<SessionEvent>,
}

impl Session {
    /// Samples the candidate pool and, in Fibonacci mode, renders the top
    /// ranked anchors. Manual mode starts without anchors.
    pub fn start(scene: Arc<Scene>, config: SessionConfig) -> Result<Self> {
        Self::start_with_segmenter(scene, config.clone(), Arc::new(RegionGrowSegmenter::new(config.segmenter)?))
    }

    pub fn start_with_segmenter(scene: Arc<Scene>, config: SessionConfig, segmenter: Arc<dyn Segmenter>) -> Result<Self> {
        scene.validate()?;
        config.validate()?;
        let radius = config.orbit_factor * scene.bounds.scale();
        let pool = fibonacci_sample(config.n_views, radius, scene.bounds.center(), config.intrinsics())?;
        let grid = VoxelGrid::enclosing(&scene.bounds, config.grid_res)?;
        let density = Arc::new(bake_density_grid(&scene, &grid));
        let queue = Arc::new(MaskQueue::new(segmenter, config.mask_workers));
        let mut session = Self {
            scene,
            config,
            pool,
            plan: SessionPlan::default(),
            views: Vec::new(),
            anchor_views: Vec::new(),
            group_of: BTreeMap::new(),
            density,
            queue,
            masks: BTreeMap::new(),
            raw_masks: BTreeMap::new(),
            failed: BTreeSet::new(),
            announced: BTreeSet::new(),
            grid: None,
            events: Vec::new(),
        };
        if session.config.mode == PlanMode::Fibonacci {
            let ranked = rank_views(&session.pool)?;
            for s in ranked.iter().take(session.config.k_top) {
                session.add_anchor(s.index)?;
            }
        }
        Ok(session)
    }

    /// Promotes a pool candidate to an anchor and renders it.
    pub fn add_anchor(&mut self, pool_index: usize) -> Result<ViewId> {
        let camera = self
            .pool
            .get(pool_index)
            .ok_or_else(|| Error::Unknown {
                kind: "candidate view",
                name: pool_index.to_string(),
            })?
            .clone();
        let geometry = Arc::new(render_view(&self.scene, &camera, &self.config.render));
        let group = self.plan.add_anchor(camera);
        let id = self.views.len();
        self.views.push(ViewRecord {
            id,
            kind: ViewKind::Anchor { pool_index },
            geometry,
        });
        self.anchor_views.push(id);
        self.group_of.insert(id, group);
        Ok(id)
    }

    pub fn scene(&self) -> &Arc<Scene> {
        &self.scene
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn pool(&self) -> &[Camera] {
        &self.pool
    }

    pub fn plan(&self) -> &SessionPlan {
        &self.plan
    }

    pub fn anchors(&self) -> &[ViewId] {
        &self.anchor_views
    }

    pub fn views(&self) -> &[ViewRecord] {
        &self.views
    }

    pub fn view(&self, id: ViewId) -> Result<&ViewRecord> {
        self.views.get(id).ok_or_else(|| Error::Unknown {
            kind: "view",
            name: id.to_string(),
        })
    }

    pub fn density(&self) -> &Arc<DensityGrid> {
        &self.density
    }

    pub fn version(&self) -> u64 {
        self.grid.as_ref().map_or(0, |g| g.version)
    }

    pub fn grid(&self) -> Option<&OccupancyGrid> {
        self.grid.as_ref()
    }

    /// Refined masks fused so far, by centroid view.
    pub fn masks(&self) -> &BTreeMap<ViewId, MaskedView> {
        &self.masks
    }

    /// Unrefined segmenter output for every fused mask.
    pub fn raw_masks(&self) -> &BTreeMap<ViewId, ConfidenceMask> {
        &self.raw_masks
    }

    pub fn queue(&self) -> Arc<MaskQueue> {
        Arc::clone(&self.queue)
    }

    pub fn events_after(&self, after: Option<u64>) -> Vec<SessionEvent> {
        self.events
            .iter()
            .filter(|e| after.is_none_or(|a| e.seq > a))
            .cloned()
            .collect()
    }

    pub fn last_seq(&self) -> Option<u64> {
        self.events.last().map(|e| e.seq)
    }

    fn emit(&mut self, kind: EventKind) {
        let seq = self.events.len() as u64;
        self.events.push(SessionEvent { seq, kind });
    }

    /// Back-projects a prompt on an anchor, renders the zoomed centroid view
    /// aimed at it and queues segmentation of that view's center. Returns
    /// immediately; the mask arrives later.
    pub fn submit_prompt(&mut self, anchor_id: ViewId, pixel: (u32, u32), zoom: f64, last_in_group: bool) -> Result<ViewId> {
        let group = *self.group_of.get(&anchor_id).ok_or_else(|| Error::Unknown {
            kind: "anchor",
            name: anchor_id.to_string(),
        })?;
        let anchor = &self.views[anchor_id];
        let target = back_project_prompt(&anchor.geometry, pixel)?;
        let camera = make_centroid_view(&anchor.geometry.camera, &target, zoom)?;
        let geometry = Arc::new(render_view(&self.scene, &camera, &self.config.render));
        let center = (camera.width() / 2, camera.height() / 2);
        let spec = CentroidViewSpec {
            anchor: group,
            prompt: pixel,
            target: [target.x, target.y, target.z],
            zoom,
        };
        self.plan.centroids[group].push(spec.clone());
        let id = self.views.len();
        self.views.push(ViewRecord {
            id,
            kind: ViewKind::Centroid(spec),
            geometry: Arc::clone(&geometry),
        });
        self.queue.submit(MaskRequest {
            id: id as u64,
            view: geometry,
            prompt: center,
            last_in_group,
        });
        self.emit(EventKind::PromptAccepted {
            anchor_id,
            centroid_id: id,
        });
        Ok(id)
    }

    /// Emits mask-ready events for masks finished since the last call.
    pub fn poll_masks(&mut self) {
        for id in self.queue.completed_ids() {
            let id = id as ViewId;
            if self.announced.insert(id) {
                self.emit(EventKind::MaskReady { view_id: id });
            }
        }
    }

    /// Fuses when a barrier is due (group end, or enough cached masks).
    pub fn maybe_fuse(&mut self) -> Result<Option<u64>> {
        self.poll_masks();
        if !self.queue.barrier_due() {
            return Ok(None);
        }
        self.fuse_now()
    }

    /// Waits up to `timeout` for a barrier to become due, then fuses.
    pub fn wait_and_fuse(&mut self, timeout: Duration) -> Result<Option<u64>> {
        self.queue.wait_until_due(timeout);
        self.maybe_fuse()
    }

    /// Barriers the mask queue and fuses every mask collected so far.
    /// Returns the new version, or `None` when there is nothing new to fuse.
    pub fn fuse_now(&mut self) -> Result<Option<u64>> {
        let results = self.queue.barrier();
        let mut fresh = 0usize;
        for r in results {
            let id = r.id as ViewId;
            if self.announced.insert(id) {
                match &r.outcome {
                    MaskOutcome::Ready(_) => self.emit(EventKind::MaskReady { view_id: id }),
                    MaskOutcome::Failed(m) => self.emit(EventKind::MaskFailed {
                        view_id: id,
                        message: m.clone(),
                    }),
                    MaskOutcome::Cancelled => self.emit(EventKind::MaskFailed {
                        view_id: id,
                        message: Error::Cancelled.to_string(),
                    }),
                }
            }
            let MaskOutcome::Ready(mask) = r.outcome else {
                self.failed.insert(id);
                continue;
            };
            let geometry = Arc::clone(&self.views[id].geometry);
            let fused = if self.config.refine_masks {
                refine_mask(&mask, &geometry)?
            } else {
                mask.clone()
            };
            self.raw_masks.insert(id, mask);
            let mask = fused;
            self.masks.insert(id, MaskedView::new(geometry, mask)?);
            fresh += 1;
        }
        if fresh == 0 && (self.grid.is_some() || self.masks.is_empty()) {
            return Ok(None);
        }
        let views: Vec<MaskedView> = self.masks.values().cloned().collect();
        let grid = VoxelGrid::enclosing(&self.scene.bounds, self.config.grid_res)?;
        match fuse(&grid, &self.scene.bounds, &self.density, &views, &self.config.fusion, self.config.workers) {
            Ok(mut occ) => {
                let version = self.version() + 1;
                occ.version = version;
                self.grid = Some(occ);
                self.emit(EventKind::FusionComplete {
                    version,
                    masks: views.len(),
                });
                if let Some(next) = self.next_overlay_view() {
                    self.emit(EventKind::OverlayReady { version, view_id: next });
                }
                Ok(Some(version))
            }
            Err(e) => {
                self.emit(EventKind::Error { message: e.to_string() });
                Err(e)
            }
        }
    }

    /// Earliest centroid without a finished mask, else the latest centroid.
    pub fn next_overlay_view(&self) -> Option<ViewId> {
        let centroids: Vec<ViewId> = self
            .views
            .iter()
            .filter(|v| matches!(v.kind, ViewKind::Centroid(_)))
            .map(|v| v.id)
            .collect();
        centroids
            .iter()
            .copied()
            .find(|id| !self.masks.contains_key(id) && !self.failed.contains(id))
            .or(centroids.last().copied())
    }

    /// Current grid projected onto a view.
    pub fn get_overlay(&self, view_id: ViewId) -> Result<PixelMap<bool>> {
        let grid = self.grid.as_ref().ok_or(Error::NoFusionYet)?;
        let view = self.view(view_id)?;
        Ok(project_grid_overlay(grid, &view.geometry, 0.5))
    }

    /// Renders an arbitrary camera with the session's render settings.
    pub fn render(&self, camera: &Camera) -> ViewGeometry {
        render_view(&self.scene, camera, &self.config.render)
    }
}

/// A prompt in a recorded session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptPrompt {
    /// Index into the session's anchor list.
    pub anchor: usize,
    pub px: u32,
    pub py: u32,
    #[serde(default)]
    pub zoom: Option<f64>,
    #[serde(default)]
    pub last: bool,
}

/// A recorded session, replayable headlessly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionScript {
    /// Scene name or path; resolved by the caller.
    #[serde(default)]
    pub scene: String,
    #[serde(default)]
    pub mode: PlanMode,
    #[serde(default)]
    pub n_views: Option<usize>,
    #[serde(default)]
    pub k_top: Option<usize>,
    /// Pool indices promoted to anchors in manual mode.
    #[serde(default)]
    pub manual_anchors: Vec<usize>,
    pub prompts: Vec<ScriptPrompt>,
}

impl SessionScript {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Applies the script's plan settings on top of `config`.
    pub fn configure(&self, mut config: SessionConfig) -> SessionConfig {
        config.mode = self.mode;
        if let Some(n) = self.n_views {
            config.n_views = n;
        }
        if let Some(k) = self.k_top {
            config.k_top = k;
        }
        config
    }
}

/// Replays a script and forces a final fusion over every mask. The final
/// grid depends only on the scene, configuration and script.
pub fn replay(scene: Arc<Scene>, script: &SessionScript, config: SessionConfig) -> Result<Session> {
    let config = script.configure(config);
    let zoom_default = config.default_zoom;
    let mut session = Session::start(scene, config)?;
    for idx in &script.manual_anchors {
        session.add_anchor(*idx)?;
    }
    for p in &script.prompts {
        let anchor = *session.anchors().get(p.anchor).ok_or_else(|| Error::Unknown {
            kind: "anchor",
            name: p.anchor.to_string(),
        })?;
        session.submit_prompt(anchor, (p.px, p.py), p.zoom.unwrap_or(zoom_default), p.last)?;
        session.maybe_fuse()?;
    }
    session.fuse_now()?;
    Ok(session)
}
