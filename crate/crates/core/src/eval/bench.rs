use serde::Deserialize;

use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::session::SessionConfig;

/// A shipped benchmark: scene, target objects, and the session profile the
/// simulated user runs with.
#[derive(Clone, Debug, Deserialize)]
pub struct Benchmark {
    pub name: String,
    pub targets: Vec<u32>,
    pub prompts_per_anchor: usize,
    /// Candidate pool the manual arm picks its anchors from.
    pub manual_pool: usize,
    #[serde(default)]
    pub profile: SessionConfig,
    pub scene: Scene,
}

const SHIPPED: [(&str, &str); 4] = [
    ("sphere-on-plane", include_str!("../../benchmarks/sphere-on-plane.json")),
    ("occluder", include_str!("../../benchmarks/occluder.json")),
    ("rod-lattice", include_str!("../../benchmarks/rod-lattice.json")),
    ("two-object", include_str!("../../benchmarks/two-object.json")),
];

pub fn benchmark_names() -> Vec<&'static str> {
    SHIPPED.iter().map(|(n, _)| *n).collect()
}

impl Benchmark {
    pub fn from_json(text: &str) -> Result<Self> {
        let b: Benchmark = serde_json::from_str(text)?;
        b.scene.validate()?;
        b.profile.validate()?;
        if b.targets.is_empty() {
            return Err(Error::Empty("benchmark targets"));
        }
        Ok(b)
    }
}

pub fn benchmark(name: &str) -> Result<Benchmark> {
    let (_, text) = SHIPPED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Unknown {
            kind: "benchmark",
            name: name.to_string(),
        })?;
    Benchmark::from_json(text)
}
