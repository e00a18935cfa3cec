use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
resolution = 32
batch_size = 2
steps = 4
dataset_size = 4
val_size = 2
checkpoint_every = 2

[generator]
base_width = 4
n_residual = 1

[discriminator]
base_width = 4
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inpaint"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn files_with_ext(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    v.sort();
    v
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn gen_masks_writes_seven_files_and_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("masks");
    let o = run(&["gen-masks", "--policy", "general", "--count", "7", "--size", "64", "--seed", "1", "--out-dir", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let masks = files_with_ext(&out, "pbm");
    assert_eq!(masks.len(), 7);
    let m = manifest(&out);
    assert_eq!(m["command"], "gen-masks");
    assert_eq!(m["config"]["count"], 7);
    assert_eq!(m["config"]["size"], 64);
    assert_eq!(m["config"]["seed"], 1);
    assert_eq!(m["config"]["policy"], "general-mask");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 7);

    let again = tmp.path().join("again");
    run(&["gen-masks", "--policy", "general", "--count", "7", "--size", "64", "--seed", "1", "--out-dir", path(&again)]);
    for f in &masks {
        assert_eq!(fs::read(f).unwrap(), fs::read(again.join(f.file_name().unwrap())).unwrap());
    }
}

#[test]
fn fixed_mask_type_is_honored() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["gen-masks", "--type", "nearest-neighbor", "--count", "3", "--size", "32", "--out-dir", path(tmp.path())]);
    assert_eq!(o.status.code(), Some(0));
    let masks = files_with_ext(tmp.path(), "pbm");
    assert_eq!(masks.len(), 3);
    assert!(masks.iter().all(|p| p.to_str().unwrap().contains("NearestNeighbor")));
}

#[test]
fn usage_errors_exit_one_with_usage_text() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["gen-masks", "--bogus"],
        vec![],
        vec!["frobnicate"],
        vec!["gen-masks", "--policy", "nonsense"],
        vec!["gradcheck"],
        vec!["gradcheck", "--case", "no_such_check"],
        vec!["gen-masks", "--config", "x.toml"],
        vec!["eval"],
    ] {
        let mut full = args.clone();
        full.extend(["--out-dir", path(tmp.path())]);
        let o = run(&full);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn help_exits_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_two_with_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.ckpt");
    let o = run(&["eval", "--checkpoint", path(&missing), "--out-dir", path(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.ckpt"));

    let bad = tmp.path().join("bad.ppm");
    fs::write(&bad, b"P6\n4 4\n255\nxx").unwrap();
    let o = run(&["spectrum", path(&bad), "--out-dir", path(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_zero_steps_writes_only_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let o = run(&["train", "--config", path(&cfg), "--steps", "0", "--out-dir", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpts = files_with_ext(&out, "ckpt");
    assert_eq!(ckpts.len(), 1);
    assert!(ckpts[0].ends_with("checkpoint_0000000.ckpt"));
    assert_eq!(fs::read_to_string(out.join("metrics.ndjson")).unwrap(), "");
    let m = manifest(&out);
    assert_eq!(m["config"]["steps"], 0);
    assert_eq!(m["config"]["resolution"], 32);
}

#[test]
fn manifest_alone_reproduces_a_training_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let first = tmp.path().join("first");
    let o = run(&["train", "--config", path(&cfg), "--seed", "5", "--out-dir", path(&first)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&first);
    assert_eq!(m["config"]["seed"], 5);

    // Re-run from the manifest's resolved configuration only.
    let replay_cfg = tmp.path().join("replay.toml");
    fs::copy(first.join("config.toml"), &replay_cfg).unwrap();
    fs::remove_file(&cfg).unwrap();
    let second = tmp.path().join("second");
    let o = run(&["train", "--config", path(&replay_cfg), "--out-dir", path(&second)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(manifest(&second)["config"], m["config"]);
    let metrics = |d: &Path| fs::read(d.join("metrics.ndjson")).unwrap();
    assert_eq!(metrics(&first), metrics(&second));
    let final_ckpt = |d: &Path| fs::read(d.join("checkpoint_0000004.ckpt")).unwrap();
    assert_eq!(final_ckpt(&first), final_ckpt(&second));
}

#[test]
fn resume_from_midpoint_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let full = tmp.path().join("full");
    assert_eq!(run(&["train", "--config", path(&cfg), "--out-dir", path(&full)]).status.code(), Some(0));
    let part = tmp.path().join("part");
    assert_eq!(
        run(&["train", "--config", path(&cfg), "--steps", "2", "--out-dir", path(&part)]).status.code(),
        Some(0)
    );
    let mid = part.join("checkpoint_0000002.ckpt");
    let o = run(&["train", "--resume", path(&mid), "--steps", "4", "--out-dir", path(&part)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(full.join("metrics.ndjson")).unwrap(),
        fs::read(part.join("metrics.ndjson")).unwrap()
    );
    let o = run(&["train", "--resume", path(&mid), "--seed", "3", "--out-dir", path(&part)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_reports_seven_rows_and_baseline_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let train_dir = tmp.path().join("run");
    assert_eq!(run(&["train", "--config", path(&cfg), "--out-dir", path(&train_dir)]).status.code(), Some(0));

    let base = tmp.path().join("base");
    let o = run(&[
        "eval",
        "--checkpoint",
        path(&train_dir.join("checkpoint_0000000.ckpt")),
        "--policy",
        "general",
        "--seed",
        "2",
        "--metrics",
        "l1,psnr,ssim",
        "--out-dir",
        path(&base),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("proxy"));

    let data = tmp.path().join("images");
    assert_eq!(
        run(&["synth-data", "--count", "3", "--size", "48", "--seed", "9", "--out-dir", path(&data)]).status.code(),
        Some(0)
    );
    let cur = tmp.path().join("cur");
    let o = run(&[
        "eval",
        "--checkpoint",
        path(&train_dir.join("checkpoint_0000004.ckpt")),
        "--data",
        path(&data),
        "--seed",
        "2",
        "--metrics",
        "l1,psnr,ssim",
        "--baseline-report",
        path(&base.join("report.json")),
        "--out-dir",
        path(&cur),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(cur.join("report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 7);
    assert_eq!(report["images"], 3);
    assert!(rows.iter().all(|r| r["deltas"]["l1"].is_number()));
    assert!(fs::read_to_string(cur.join("report.txt")).unwrap().contains("delta"));
    assert_eq!(manifest(&cur)["config"]["train_config"]["resolution"], 32);
}

#[test]
fn synth_data_then_spectrum_records_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let o = run(&["synth-data", "--count", "2", "--size", "32", "--seed", "4", "--out-dir", path(&data)]);
    assert_eq!(o.status.code(), Some(0));
    let images = files_with_ext(&data, "ppm");
    assert_eq!(images.len(), 2);

    let out = tmp.path().join("spec");
    let o = run(&[
        "spectrum",
        path(&images[0]),
        path(&images[1]),
        "--reference",
        path(&images[0]),
        "--out-dir",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files_with_ext(&out, "pgm").len(), 2);
    let record: Value = serde_json::from_str(&fs::read_to_string(out.join("spectrum.json")).unwrap()).unwrap();
    let records = record["records"].as_array().unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0]["ffl"].as_f64(), Some(0.0));
    assert!(records[1]["ffl"].as_f64().unwrap() > 0.0);
    for r in records {
        let cb = r["checkerboard_score"].as_f64().unwrap();
        let rp = r["ripple_score"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&cb) && (0.0..=1.0).contains(&rp));
    }
}

#[test]
fn gradcheck_all_passes_and_prints_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--all", "--out-dir", path(tmp.path())]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}");
    for name in ["l1_masked", "ffl", "tv", "joint_total", "generator"] {
        assert!(stdout.lines().any(|l| l.starts_with(name) && l.ends_with("PASS")), "{name}\n{stdout}");
    }
    assert!(!stdout.contains("FAIL"));
    let m = manifest(tmp.path());
    assert_eq!(m["details"]["passed"], m["details"]["total"]);
}

#[test]
fn gradcheck_list_names_every_case() {
    let o = run(&["gradcheck", "--list"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 11);
}
