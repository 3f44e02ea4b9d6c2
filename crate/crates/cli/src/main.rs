//! `divas`: headless rendering, segmentation, fusion, session replay,
//! ablations and the HTTP service.

mod setup;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use divas_core::eval::{evaluate, record_script, run_ablation, Ablation, HeldOut, HELD_OUT_VIEWS};
use divas_core::fusion::{fuse_traced, write_trace, MaskedView, OccupancyGrid};
use divas_core::geometry::{uncontract, VoxelGrid};
use divas_core::io::{load_camera, load_fmap, load_vgrid, save_fmap, save_vgrid, camera_to_json, FloatMap};
use divas_core::render::render_view;
use divas_core::scene::bake_density_grid;
use divas_core::segment::{refine_mask, ConfidenceMask, RegionGrowSegmenter, Segmenter};
use divas_core::session::{replay, PlanMode, SessionScript};

use setup::SceneArgs;

#[derive(Parser, Debug)]
#[command(name = "divas", version, about = "Point-prompted masks fused into voxel occupancy grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Fibonacci,
    Manual,
}

impl From<Mode> for PlanMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Fibonacci => PlanMode::Fibonacci,
            Mode::Manual => PlanMode::Manual,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render views and write their ray statistics, colors and cameras.
    ///
    /// Without --camera, renders the session's ranked anchor views.
    Render {
        #[command(flatten)]
        scene: SceneArgs,
        /// Camera JSON files to render.
        #[arg(long)]
        camera: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one view from a point prompt and write the confidence mask.
    Segment {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        camera: PathBuf,
        /// Prompt pixel as `x,y`.
        #[arg(long, value_parser = parse_pixel)]
        prompt: (u32, u32),
        /// Apply depth-based refinement before writing.
        #[arg(long)]
        refine: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse masks from a directory of `<name>.camera.json` + `<name>.mask.fmap` pairs.
    Fuse {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        views: PathBuf,
        #[command(flatten)]
        trace: TraceArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a recorded session script and write the final grid.
    SessionReplay {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        trace: TraceArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Record a scripted-user session on a benchmark scene.
    RecordScript {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long, value_enum, default_value = "fibonacci")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation on a benchmark scene and write the metrics table as CSV.
    Ablate {
        #[command(flatten)]
        scene: SceneArgs,
        /// thin-off, depth-weight-off, tau_cw-sweep or fibonacci-vs-manual.
        #[arg(long)]
        ablation: String,
        /// CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a grid against a benchmark's ground truth.
    Evaluate {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        grid: PathBuf,
    },
    /// Export occupied voxels of a grid as CSV (`x,y,z,p`) or ASCII PLY.
    ExportGrid {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        /// Output path; `.ply` selects PLY, anything else CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the interactive HTTP interface.
    Serve {
        /// Listen address; defaults to $DIVAS_ADDR, then 127.0.0.1:8080.
        #[arg(long)]
        addr: Option<String>,
        /// Directory of static UI files.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug)]
struct TraceArgs {
    /// Write per-voxel path decisions as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Voxel `i,j,k` to trace; repeatable. All voxels when omitted.
    #[arg(long, value_parser = parse_voxel)]
    trace_voxel: Vec<[usize; 3]>,
}

fn parse_pixel(s: &str) -> Result<(u32, u32), String> {
    let (x, y) = s.split_once(',').ok_or("expected x,y")?;
    Ok((
        x.trim().parse().map_err(|e| format!("x: {e}"))?,
        y.trim().parse().map_err(|e| format!("y: {e}"))?,
    ))
}

fn parse_voxel(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected i,j,k".into());
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|e| format!("{e}"))?;
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Fuses `views`, tracing the selected voxels when requested.
fn fuse_with_trace(setup: &setup::Setup, views: &[MaskedView], trace: &TraceArgs) -> Result<OccupancyGrid> {
    let grid = VoxelGrid::enclosing(&setup.scene.bounds, setup.config.grid_res)?;
    let density = bake_density_grid(&setup.scene, &grid);
    let selected: Vec<usize> = trace.trace_voxel.iter().map(|&v| grid.linear(v)).collect();
    if let Some(v) = trace.trace_voxel.iter().find(|v| v.iter().any(|&c| c >= grid.resolution)) {
        bail!("trace voxel {v:?} outside {}³ grid", grid.resolution);
    }
    let select = |i: usize| trace.trace.is_some() && (selected.is_empty() || selected.contains(&i));
    let (occ, records) = fuse_traced(
        &grid,
        &setup.scene.bounds,
        &density,
        views,
        &setup.config.fusion,
        setup.config.workers,
        select,
    )?;
    if let Some(path) = &trace.trace {
        let mut w = create(path)?;
        write_trace(&records, &mut w)?;
        w.flush()?;
        eprintln!("wrote {} trace records to {}", records.len(), path.display());
    }
    Ok(occ)
}

fn occupied(grid: &OccupancyGrid, threshold: f32) -> usize {
    grid.probs.iter().filter(|p| **p >= threshold).count()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Render { scene, camera, out } => {
            let setup = scene.resolve(None)?;
            let cameras = if camera.is_empty() {
                let session = divas_core::session::Session::start(Arc::clone(&setup.scene), setup.config.clone())?;
                session.anchors().iter().map(|&a| session.views()[a].geometry.camera.clone()).collect()
            } else {
                camera.iter().map(load_camera).collect::<divas_core::Result<Vec<_>>>()?
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (i, cam) in cameras.iter().enumerate() {
                let view = render_view(&setup.scene, cam, &setup.config.render);
                save_fmap(&FloatMap::from_view_stats(&view)?, out.join(format!("view{i}.stats.fmap")))?;
                save_fmap(&FloatMap::from_rgb(&view.rgb), out.join(format!("view{i}.rgb.fmap")))?;
                std::fs::write(out.join(format!("view{i}.camera.json")), camera_to_json(cam)?)?;
                println!("view{i}: {} valid pixels of {}", view.valid_count(), view.width() * view.height());
            }
        }
        Command::Segment {
            scene,
            camera,
            prompt,
            refine,
            out,
        } => {
            let setup = scene.resolve(None)?;
            let cam = load_camera(&camera)?;
            let view = render_view(&setup.scene, &cam, &setup.config.render);
            let mut mask = RegionGrowSegmenter::new(setup.config.segmenter)?.segment(&view, prompt)?;
            if refine {
                mask = refine_mask(&mask, &view)?;
            }
            save_fmap(&FloatMap::from_scalar(&mask.values), &out)?;
            let on = mask.binarize(0.5).data.iter().filter(|b| **b).count();
            println!("mask: {on} pixels at or above 0.5");
        }
        Command::Fuse { scene, views, trace, out } => {
            let setup = scene.resolve(None)?;
            let mut names: Vec<String> = std::fs::read_dir(&views)
                .with_context(|| format!("reading {}", views.display()))?
                .filter_map(|e| e.ok()?.file_name().into_string().ok())
                .filter_map(|n| n.strip_suffix(".camera.json").map(str::to_string))
                .collect();
            names.sort();
            let mut masked = Vec::new();
            for name in &names {
                let mask_path = views.join(format!("{name}.mask.fmap"));
                if !mask_path.exists() {
                    continue;
                }
                let cam = load_camera(views.join(format!("{name}.camera.json")))?;
                let view = Arc::new(render_view(&setup.scene, &cam, &setup.config.render));
                let mask = ConfidenceMask::new(load_fmap(&mask_path)?.channel(0)?)?;
                let mask = if setup.config.refine_masks {
                    refine_mask(&mask, &view)?
                } else {
                    mask
                };
                masked.push(MaskedView::new(view, mask).with_context(|| format!("view {name}"))?);
            }
            if masked.is_empty() {
                bail!("no <name>.camera.json + <name>.mask.fmap pairs in {}", views.display());
            }
            let occ = fuse_with_trace(&setup, &masked, &trace)?;
            save_vgrid(&occ, &out)?;
            println!("fused {} views: {} occupied voxels", masked.len(), occupied(&occ, 0.5));
        }
        Command::SessionReplay { scene, plan, trace, out } => {
            let text = std::fs::read_to_string(&plan).with_context(|| format!("reading {}", plan.display()))?;
            let script = SessionScript::from_json(&text)?;
            let setup = scene.resolve(Some(&script.scene))?;
            let session = replay(Arc::clone(&setup.scene), &script, setup.config.clone())?;
            let occ = if trace.trace.is_some() {
                let views: Vec<MaskedView> = session.masks().values().cloned().collect();
                let mut occ = fuse_with_trace(&setup, &views, &trace)?;
                occ.version = session.version();
                occ
            } else {
                session.grid().context("replay produced no grid")?.clone()
            };
            save_vgrid(&occ, &out)?;
            println!(
                "replayed {} prompts: version {}, {} occupied voxels",
                script.prompts.len(),
                session.version(),
                occupied(&occ, 0.5)
            );
        }
        Command::RecordScript { scene, mode, out } => {
            let setup = scene.resolve(None)?;
            let script = record_script(setup.bench()?, mode.into(), &setup.config)?;
            let mut w = create(&out)?;
            serde_json::to_writer_pretty(&mut w, &script)?;
            w.flush()?;
            println!("recorded {} prompts", script.prompts.len());
        }
        Command::Ablate { scene, ablation, out } => {
            let setup = scene.resolve(None)?;
            let ablation: Ablation = ablation.parse()?;
            let report = run_ablation(setup.bench()?, ablation, &setup.config)?;
            match out {
                Some(path) => {
                    let mut w = create(&path)?;
                    report.write_csv(&mut w)?;
                    w.flush()?;
                    for arm in &report.arms {
                        println!("{}: iou3d {:.4} iou2d {:.4}", arm.row.arm, arm.row.iou3d, arm.row.iou2d_mean);
                    }
                }
                None => report.write_csv(std::io::stdout().lock())?,
            }
        }
        Command::Evaluate { scene, grid } => {
            let setup = scene.resolve(None)?;
            let bench = setup.bench()?;
            let occ = load_vgrid(&grid)?;
            let mut bench = bench.clone();
            bench.profile = setup.config.clone();
            let held = HeldOut::new(&bench, HELD_OUT_VIEWS)?;
            let m = evaluate(&bench, &occ, &held)?;
            println!("iou3d {:.4}", m.iou3d);
            println!("iou2d {:.4}", m.iou2d);
            println!("acc2d {:.4}", m.acc2d);
        }
        Command::ExportGrid { grid, threshold, out } => {
            let occ = load_vgrid(&grid)?;
            let points: Vec<([f64; 3], f32)> = (0..occ.grid.len())
                .filter(|&i| occ.probs[i] >= threshold)
                .filter_map(|i| {
                    let p = uncontract(&occ.grid.center_of(i), &occ.bounds)?;
                    Some(([p.x, p.y, p.z], occ.probs[i]))
                })
                .collect();
            let mut w = create(&out)?;
            if out.extension().is_some_and(|e| e == "ply") {
                writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
                writeln!(w, "property float x\nproperty float y\nproperty float z\nproperty float p\nend_header")?;
                for (p, v) in &points {
                    writeln!(w, "{} {} {} {}", p[0], p[1], p[2], v)?;
                }
            } else {
                writeln!(w, "x,y,z,p")?;
                for (p, v) in &points {
                    writeln!(w, "{},{},{},{}", p[0], p[1], p[2], v)?;
                }
            }
            w.flush()?;
            println!("exported {} voxels", points.len());
        }
        Command::Serve { addr, static_dir } => {
            let addr = divas_service::resolve_addr(addr);
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("listening on {addr}");
            rt.block_on(divas_service::serve(&addr, static_dir))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
