use std::path::Path;
use std::process::{Command, Output};

use csm_core::io::{read_losses_csv, read_transfers_csv};
use csm_core::scenegen::{gt_file, keypoints_file, mask_file};

const BIN: &str = env!("CARGO_BIN_EXE_csm");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn csm")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "csm {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn scene(dir: &Path, views: usize) -> std::path::PathBuf {
    let s = dir.join("scene");
    ok(&["scenegen", "--out", p(&s), "--n-views", &views.to_string(), "--seed", "1"]);
    s
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["fit", "--no-such-flag"]), 2);
    assert_eq!(code(&["bogus"]), 2);
    assert_eq!(code(&["--threads", "0", "gradcheck"]), 2);
    assert_eq!(code(&["eval", "--records", "/nonexistent.csv", "--height", "8", "--width", "8", "--out", "/tmp"]), 2);
}

#[test]
fn scenegen_writes_every_view() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(dir.path(), 3);
    for k in 0..3 {
        for f in [mask_file(k), gt_file(k), keypoints_file(k)] {
            assert!(s.join(&f).exists(), "missing {f}");
        }
    }
    assert_eq!(code(&["scenegen", "--out", p(&dir.path().join("x")), "--n-views", "0"]), 2);
    assert_eq!(code(&["scenegen", "--out", p(&dir.path().join("x")), "--subdiv", "9"]), 2);
}

#[test]
fn known_pose_fit_decreases_loss_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(dir.path(), 2);
    let fit = |out: &str| {
        let o = dir.path().join(out);
        ok(&["--threads", "1", "fit", "--scene", p(&s), "--known-pose", "--lr", "1e-2", "--iterations", "30", "--out", p(&o)]);
        o
    };
    let (a, b) = (fit("a"), fit("b"));
    let losses = read_losses_csv(&a.join("losses.csv")).unwrap();
    assert_eq!(losses.len(), 31);
    assert!(losses[30].total < losses[0].total);
    for f in ["losses.csv", "map_0.csmuv", "map_1.csmuv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    for f in ["hypotheses.json", "fit_summary.json", "viz_0.ppm"] {
        assert!(a.join(f).exists());
    }
}

#[test]
fn zero_iterations_copies_the_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(dir.path(), 1);
    let o = dir.path().join("fit");
    ok(&["fit", "--scene", p(&s), "--hypotheses", "2", "--iterations", "0", "--out", p(&o)]);
    assert_eq!(read_losses_csv(&o.join("losses.csv")).unwrap().len(), 1);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(o.join("fit_summary.json")).unwrap()).unwrap();
    assert_eq!(summary[0]["best_iteration"], 0);
    assert_eq!(summary[0]["probabilities"], serde_json::json!([0.5, 0.5]));
}

#[test]
fn fit_rejects_inconsistent_options() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(dir.path(), 1);
    let o = dir.path().join("fit");
    assert_eq!(code(&["fit", "--scene", p(&s), "--known-pose", "--hypotheses", "4", "--out", p(&o)]), 2);
    assert_eq!(code(&["fit", "--scene", p(&s), "--lr", "0", "--out", p(&o)]), 2);
    assert_eq!(code(&["fit", "--scene", p(&s), "--template", "sphere", "--out", p(&o)]), 2);
}

#[test]
fn config_file_supplies_defaults_and_command_line_wins() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(dir.path(), 1);
    let cfg = dir.path().join("fit.cfg");
    std::fs::write(&cfg, format!("# short run\nscene = {}\nknown-pose = true\niterations = 3\n", p(&s))).unwrap();
    let a = dir.path().join("a");
    ok(&["--config", p(&cfg), "fit", "--out", p(&a)]);
    assert_eq!(read_losses_csv(&a.join("losses.csv")).unwrap().len(), 4);
    let b = dir.path().join("b");
    ok(&["--config", p(&cfg), "fit", "--out", p(&b), "--iterations", "1"]);
    assert_eq!(read_losses_csv(&b.join("losses.csv")).unwrap().len(), 2);
    std::fs::write(&cfg, "iterations 3\n").unwrap();
    assert_eq!(code(&["--config", p(&cfg), "fit", "--out", p(&b)]), 2);
}

#[test]
fn transfer_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(dir.path(), 2);
    let t = dir.path().join("t.csv");
    let r = dir.path().join("r.csv");
    ok(&["transfer", "--scene", p(&s), "--source", "0", "--target", "0", "--out", p(&t), "--records", p(&r)]);
    let rows = read_transfers_csv(&t).unwrap();
    assert!(!rows.is_empty());
    // Self-transfer on ground truth lands (almost) on the same template point.
    assert!(rows.iter().all(|row| row.corresponds == 1 && row.distance < 0.05));
    let e = dir.path().join("eval");
    let out = ok(&["eval", "--records", p(&r), "--height", "64", "--width", "64", "--out", p(&e)]);
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["pck"], 1.0);
    assert!(e.join("pr_curve.csv").exists() && e.join("metrics.json").exists());
    assert_eq!(code(&["transfer", "--scene", p(&s), "--source", "0", "--target", "5", "--out", p(&t)]), 2);

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "id,pred_x,pred_y,confidence,gt_x,gt_y,gt_present\n").unwrap();
    assert_eq!(code(&["eval", "--records", p(&empty), "--height", "64", "--width", "64", "--out", p(&e)]), 2);
}

#[test]
fn render_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("r");
    ok(&["render", "--template", "ellipsoid", "--subdiv", "2", "--r", "0.1,-0.4,0.3", "--height", "32", "--width", "40", "--out", p(&o)]);
    for f in ["depth.pgm", "mask.pgm", "gt.csmuv", "viz.ppm", "soft.pgm", "camera.json"] {
        assert!(o.join(f).exists(), "missing {f}");
    }
    let o2 = dir.path().join("r2");
    ok(&["render", "--template", "ellipsoid", "--subdiv", "2", "--camera", p(&o.join("camera.json")), "--height", "32", "--width", "40", "--out", p(&o2)]);
    assert_eq!(std::fs::read(o.join("gt.csmuv")).unwrap(), std::fs::read(o2.join("gt.csmuv")).unwrap());
    assert_eq!(code(&["render", "--gamma", "0", "--out", p(&o)]), 2);
    assert_eq!(code(&["render", "--r", "0.1,0.2", "--out", p(&o)]), 2);
}

#[test]
fn gradcheck_on_a_kink_fails_numerically() {
    let out = run(&["gradcheck", "--perturb-kinks"]);
    assert_eq!(out.status.code(), Some(3));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], false);
}
