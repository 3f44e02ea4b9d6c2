use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::Args;
use divas_core::eval::{benchmark, benchmark_names, Benchmark};
use divas_core::scene::Scene;
use divas_core::session::SessionConfig;
use serde_json::Value;

/// Scene selection and session-configuration overrides shared by most
/// subcommands.
#[derive(Args, Debug, Clone, Default)]
pub struct SceneArgs {
    /// Shipped benchmark name, or a path to a benchmark or scene JSON file.
    #[arg(long)]
    pub scene: Option<String>,
    /// JSON file with session-configuration overrides; missing fields keep
    /// their current values.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub grid_res: Option<usize>,
    #[arg(long)]
    pub tau_cw: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
}

pub struct Setup {
    pub scene: Arc<Scene>,
    /// Present when the scene came from a benchmark, which also names the
    /// target objects.
    pub bench: Option<Benchmark>,
    pub config: SessionConfig,
}

impl Setup {
    pub fn bench(&self) -> Result<&Benchmark> {
        self.bench
            .as_ref()
            .context("this command needs a benchmark scene (shipped name or benchmark JSON with targets)")
    }
}

fn load_scene_arg(arg: &str) -> Result<(Scene, Option<Benchmark>)> {
    if benchmark_names().contains(&arg) {
        let b = benchmark(arg)?;
        return Ok((b.scene.clone(), Some(b)));
    }
    let path = Path::new(arg);
    if !path.exists() {
        bail!("unknown scene `{arg}`: not a shipped benchmark ({}) or an existing file", benchmark_names().join(", "));
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if value.get("targets").is_some() {
        let b = Benchmark::from_json(&text)?;
        Ok((b.scene.clone(), Some(b)))
    } else {
        Ok((Scene::from_json(&text)?, None))
    }
}

/// Recursive JSON merge; objects merge key by key, anything else replaces.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

impl SceneArgs {
    /// Resolves the scene (falling back to `default_scene`, e.g. from a plan
    /// file) and the configuration: benchmark profile, then `--params`, then
    /// individual flags.
    pub fn resolve(&self, default_scene: Option<&str>) -> Result<Setup> {
        let name = self
            .scene
            .as_deref()
            .or(default_scene.filter(|s| !s.is_empty()))
            .context("no scene given (use --scene)")?;
        let (scene, bench) = load_scene_arg(name)?;
        let mut config = bench.as_ref().map(|b| b.profile.clone()).unwrap_or_default();
        if let Some(path) = &self.params {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let mut value = serde_json::to_value(&config)?;
            merge(&mut value, &patch);
            config = serde_json::from_value(value).with_context(|| format!("applying {}", path.display()))?;
        }
        if let Some(g) = self.grid_res {
            config.grid_res = g;
        }
        if let Some(t) = self.tau_cw {
            config.render = config.render.with_tau_cw(t);
        }
        if let Some(w) = self.workers {
            config.workers = w;
        }
        config.validate()?;
        Ok(Setup {
            scene: Arc::new(scene),
            bench,
            config,
        })
    }
}
