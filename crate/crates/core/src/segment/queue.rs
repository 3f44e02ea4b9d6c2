use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::{ConfidenceMask, Segmenter};
use crate::render::ViewGeometry;

/// Completed masks that force a synchronization barrier.
pub const BARRIER_MASK_COUNT: usize = 3;

#[derive(Clone)]
pub struct MaskRequest {
    pub id: u64,
    pub view: Arc<ViewGeometry>,
    pub prompt: (u32, u32),
    /// The request's view is the last centroid of its anchor group.
    pub last_in_group: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskOutcome {
    Ready(ConfidenceMask),
    Failed(String),
    Cancelled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskResult {
    pub id: u64,
    pub outcome: MaskOutcome,
}

#[derive(Default)]
struct State {
    pending: BTreeSet<u64>,
    cache: BTreeMap<u64, MaskResult>,
    group_end: bool,
    shutdown: bool,
}

impl State {
    fn barrier_due(&self) -> bool {
        self.group_end || self.cache.len() >= BARRIER_MASK_COUNT
    }
}

struct Shared {
    state: Mutex<State>,
    changed: Condvar,
}

/// Background mask inference with a result cache.
///
/// Requests are segmented on worker threads while the caller keeps working.
/// A barrier is due once a last-in-group request has been submitted or the
/// cache holds [`BARRIER_MASK_COUNT`] completed masks; [`MaskQueue::barrier`]
/// waits for every pending request and flushes the cache.
pub struct MaskQueue {
    shared: Arc<Shared>,
    jobs: Option<Sender<MaskRequest>>,
    workers: Vec<JoinHandle<()>>,
}

impl MaskQueue {
    pub fn new(segmenter: Arc<dyn Segmenter>, workers: usize) -> Self {
        let shared = Arc::new(Shared {
            state: Mutex::new(State::default()),
            changed: Condvar::new(),
        });
        let (tx, rx) = mpsc::channel::<MaskRequest>();
        let rx = Arc::new(Mutex::new(rx));
        let workers = (0..workers.max(1))
            .map(|_| {
                let shared = Arc::clone(&shared);
                let rx = Arc::clone(&rx);
                let segmenter = Arc::clone(&segmenter);
                std::thread::spawn(move || worker_loop(&shared, &rx, segmenter.as_ref()))
            })
            .collect();
        Self {
            shared,
            jobs: Some(tx),
            workers,
        }
    }

    pub fn submit(&self, request: MaskRequest) {
        {
            let mut st = self.shared.state.lock().unwrap();
            if st.shutdown {
                st.cache.insert(
                    request.id,
                    MaskResult {
                        id: request.id,
                        outcome: MaskOutcome::Cancelled,
                    },
                );
                return;
            }
            st.pending.insert(request.id);
            st.group_end |= request.last_in_group;
        }
        if let Some(tx) = &self.jobs {
            // Workers outlive the sender, so this only fails after shutdown.
            let _ = tx.send(request);
        }
        self.shared.changed.notify_all();
    }

    pub fn pending_count(&self) -> usize {
        self.shared.state.lock().unwrap().pending.len()
    }

    pub fn cached_count(&self) -> usize {
        self.shared.state.lock().unwrap().cache.len()
    }

    /// Ids of completed, not yet flushed results.
    pub fn completed_ids(&self) -> Vec<u64> {
        self.shared.state.lock().unwrap().cache.keys().copied().collect()
    }

    pub fn barrier_due(&self) -> bool {
        self.shared.state.lock().unwrap().barrier_due()
    }

    /// Blocks until a barrier is due or `timeout` elapses.
    pub fn wait_until_due(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.state.lock().unwrap();
        loop {
            if st.barrier_due() {
                return true;
            }
            let now = Instant::now();
            if now >= deadline || (st.pending.is_empty() && !st.group_end) {
                return st.barrier_due();
            }
            st = self.shared.changed.wait_timeout(st, deadline - now).unwrap().0;
        }
    }

    /// Waits for every pending request, then drains the cache in id order.
    pub fn barrier(&self) -> Vec<MaskResult> {
        let mut st = self.shared.state.lock().unwrap();
        while !st.pending.is_empty() {
            st = self.shared.changed.wait(st).unwrap();
        }
        st.group_end = false;
        std::mem::take(&mut st.cache).into_values().collect()
    }

    /// Stops the workers. Requests not yet started come back cancelled,
    /// together with any unflushed results.
    pub fn shutdown(mut self) -> Vec<MaskResult> {
        self.stop()
    }

    fn stop(&mut self) -> Vec<MaskResult> {
        self.shared.state.lock().unwrap().shutdown = true;
        self.jobs.take();
        for handle in self.workers.drain(..) {
            let _ = handle.join();
        }
        let mut st = self.shared.state.lock().unwrap();
        let pending = std::mem::take(&mut st.pending);
        for id in pending {
            st.cache.insert(
                id,
                MaskResult {
                    id,
                    outcome: MaskOutcome::Cancelled,
                },
            );
        }
        std::mem::take(&mut st.cache).into_values().collect()
    }
}

impl Drop for MaskQueue {
    fn drop(&mut self) {
        if self.jobs.is_some() {
            self.stop();
        }
    }
}

fn worker_loop(shared: &Shared, rx: &Mutex<Receiver<MaskRequest>>, segmenter: &dyn Segmenter) {
    loop {
        let job = match rx.lock().unwrap().recv() {
            Ok(job) => job,
            Err(_) => return,
        };
        if shared.state.lock().unwrap().shutdown {
            return;
        }
        let outcome = match segmenter.segment(&job.view, job.prompt) {
            Ok(mask) => MaskOutcome::Ready(mask),
            Err(e) => MaskOutcome::Failed(e.to_string()),
        };
        let mut st = shared.state.lock().unwrap();
        if st.pending.remove(&job.id) {
            st.cache.insert(job.id, MaskResult { id: job.id, outcome });
        }
        drop(st);
        shared.changed.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use crate::geometry::{Camera, Intrinsics, Point3, SceneBounds};
    use crate::render::{render_view, RenderConfig};
    use crate::scene::{Scene, ScenePrimitive, Shape};
    use crate::segment::RegionGrowSegmenter;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn view() -> Arc<ViewGeometry> {
        let scene = Scene::new(
            vec![ScenePrimitive::new(
                Shape::Sphere {
                    center: [0.0; 3],
                    radius: 0.5,
                },
                1e3,
                [1.0, 0.0, 0.0],
                1,
            )],
            SceneBounds::cube(1.0),
        )
        .unwrap();
        let cam = Camera::look_at(
            Intrinsics::from_fov(24, 24, 40.0),
            Point3::new(0.0, 0.0, 2.5),
            Point3::origin(),
        )
        .unwrap();
        Arc::new(render_view(&scene, &cam, &RenderConfig::default()))
    }

    /// Sleeps a request-dependent time to shuffle completion order.
    struct Jittery {
        inner: RegionGrowSegmenter,
        delays_ms: Vec<u64>,
    }

    impl Segmenter for Jittery {
        fn segment(&self, view: &ViewGeometry, prompt: (u32, u32)) -> Result<ConfidenceMask> {
            let d = self.delays_ms[(prompt.0 as usize) % self.delays_ms.len()];
            std::thread::sleep(Duration::from_millis(d));
            self.inner.segment(view, prompt)
        }
    }

    fn request(id: u64, view: &Arc<ViewGeometry>, last: bool) -> MaskRequest {
        MaskRequest {
            id,
            view: Arc::clone(view),
            prompt: (10 + (id as u32 % 4), 12),
            last_in_group: last,
        }
    }

    #[test]
    fn third_completion_makes_barrier_due() {
        let v = view();
        let q = MaskQueue::new(Arc::new(RegionGrowSegmenter::default()), 2);
        for id in 0..2 {
            q.submit(request(id, &v, false));
        }
        assert!(!q.wait_until_due(Duration::from_secs(5)));
        assert_eq!(q.cached_count(), 2);
        q.submit(request(2, &v, false));
        assert!(q.wait_until_due(Duration::from_secs(5)));
        let out = q.barrier();
        assert_eq!(out.iter().map(|r| r.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(q.cached_count(), 0);
        assert!(!q.barrier_due());
    }

    #[test]
    fn last_in_group_is_due_immediately() {
        let v = view();
        let q = MaskQueue::new(Arc::new(RegionGrowSegmenter::default()), 1);
        q.submit(request(5, &v, true));
        assert!(q.barrier_due());
        let out = q.barrier();
        assert_eq!(out.len(), 1);
        assert!(matches!(out[0].outcome, MaskOutcome::Ready(_)));
    }

    #[test]
    fn empty_barrier_returns_immediately() {
        let q = MaskQueue::new(Arc::new(RegionGrowSegmenter::default()), 1);
        assert!(q.barrier().is_empty());
    }

    #[test]
    fn failures_are_reported_per_request() {
        let v = view();
        let q = MaskQueue::new(Arc::new(RegionGrowSegmenter::default()), 1);
        q.submit(MaskRequest {
            id: 1,
            view: Arc::clone(&v),
            prompt: (0, 0),
            last_in_group: true,
        });
        let out = q.barrier();
        assert!(matches!(out[0].outcome, MaskOutcome::Failed(_)));
    }

    #[test]
    fn shutdown_cancels_pending() {
        let v = view();
        let seg = Jittery {
            inner: RegionGrowSegmenter::default(),
            delays_ms: vec![50],
        };
        let q = MaskQueue::new(Arc::new(seg), 1);
        for id in 0..6 {
            q.submit(request(id, &v, false));
        }
        let out = q.shutdown();
        assert_eq!(out.len(), 6);
        assert!(out.iter().any(|r| r.outcome == MaskOutcome::Cancelled));
    }

    #[test]
    fn exactly_one_result_per_request_under_random_scheduling() {
        let v = view();
        let reference = RegionGrowSegmenter::default();
        for seed in 0..5u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut delays: Vec<u64> = (0..4).map(|i| i * 3).collect();
            delays.shuffle(&mut rng);
            let q = MaskQueue::new(
                Arc::new(Jittery {
                    inner: reference.clone(),
                    delays_ms: delays,
                }),
                3,
            );
            let mut ids: Vec<u64> = (0..9).collect();
            ids.shuffle(&mut rng);
            for id in &ids {
                q.submit(request(*id, &v, false));
            }
            let out = q.barrier();
            assert_eq!(out.iter().map(|r| r.id).collect::<Vec<_>>(), (0..9).collect::<Vec<_>>());
            for r in out {
                let MaskOutcome::Ready(mask) = r.outcome else {
                    panic!("request {} failed", r.id)
                };
                let expect = reference.segment(&v, (10 + (r.id as u32 % 4), 12)).unwrap();
                assert_eq!(mask, expect);
            }
        }
    }
}
