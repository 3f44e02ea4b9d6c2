use std::path::Path;
use std::process::{Command, Output};

fn divas(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_divas"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn divas")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_params(dir: &Path) {
    std::fs::write(dir.join("small.json"), r#"{"image_size": 40, "grid_res": 24}"#).unwrap();
}

#[test]
fn replay_is_bit_identical_across_runs_and_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_params(dir);
    ok(&divas(&["record-script", "--scene", "sphere-on-plane", "--params", "small.json", "--out", "plan.json"], dir));
    let mut grids = Vec::new();
    for (i, w) in ["1", "4", "1"].iter().enumerate() {
        let out = format!("g{i}.vgrid");
        ok(&divas(&["session-replay", "--plan", "plan.json", "--params", "small.json", "--workers", w, "--out", &out], dir));
        grids.push(std::fs::read(dir.join(out)).unwrap());
    }
    assert!(grids[0].starts_with(b"DIVASVG1"));
    assert_eq!(grids[0].len(), 8 + 4 + 24 + 1 + 4 * 24usize.pow(3));
    assert_eq!(grids[0], grids[1]);
    assert_eq!(grids[0], grids[2]);
}

#[test]
fn render_segment_fuse_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_params(dir);
    let stdout = ok(&divas(&["render", "--scene", "sphere-on-plane", "--params", "small.json", "--out", "views"], dir));
    assert_eq!(stdout.lines().count(), 5);
    let stats = std::fs::read(dir.join("views/view0.stats.fmap")).unwrap();
    assert!(stats.starts_with(b"DIVASFM1"));
    assert_eq!(&stats[16..20], &5u32.to_le_bytes());

    std::fs::create_dir(dir.join("masks")).unwrap();
    std::fs::copy(dir.join("views/view0.camera.json"), dir.join("masks/a.camera.json")).unwrap();
    ok(&divas(
        &[
            "segment", "--scene", "sphere-on-plane", "--params", "small.json", "--camera", "masks/a.camera.json", "--prompt", "20,20",
            "--out", "masks/a.mask.fmap",
        ],
        dir,
    ));
    ok(&divas(
        &[
            "fuse", "--scene", "sphere-on-plane", "--params", "small.json", "--views", "masks", "--trace", "trace.jsonl", "--trace-voxel",
            "12,12,12", "--out", "fused.vgrid",
        ],
        dir,
    ));
    let trace = std::fs::read_to_string(dir.join("trace.jsonl")).unwrap();
    assert!(trace.lines().count() >= 1);
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["voxel"], 12 + 24 * (12 + 24 * 12));
    }

    ok(&divas(&["export-grid", "--grid", "fused.vgrid", "--out", "points.csv"], dir));
    let csv = std::fs::read_to_string(dir.join("points.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x,y,z,p"));
}

#[test]
fn ablation_csv_has_fixed_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_params(dir);
    let csv = ok(&divas(&["ablate", "--scene", "rod-lattice", "--params", "small.json", "--ablation", "thin-off"], dir));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("scene,ablation,arm,tau_cw,iou3d,iou2d_mean,acc2d_mean,runtime_ms"));
    let arms: Vec<&str> = lines.map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(arms, ["thin-on", "thin-off"]);
}

#[test]
fn errors_exit_nonzero_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_params(dir);
    let cases: [&[&str]; 4] = [
        &["render", "--scene", "no-such-scene", "--out", "x"],
        &["ablate", "--scene", "sphere-on-plane", "--params", "small.json", "--ablation", "nope"],
        &["session-replay", "--scene", "sphere-on-plane", "--plan", "missing.json", "--out", "x.vgrid"],
        &["render", "--scene", "sphere-on-plane", "--grid-res", "0", "--out", "x"],
    ];
    for args in cases {
        let out = divas(args, dir);
        assert!(!out.status.success(), "{args:?} succeeded");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.starts_with("error: "), "{args:?}: {err}");
    }

    // A prompt outside the image.
    ok(&divas(&["render", "--scene", "sphere-on-plane", "--params", "small.json", "--out", "views"], dir));
    let out = divas(
        &["segment", "--scene", "sphere-on-plane", "--params", "small.json", "--camera", "views/view0.camera.json", "--prompt", "400,3", "--out", "m.fmap"],
        dir,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("outside"));
}
