use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_screendelta"));
    c.env_remove("SCREENDELTA_OUT_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, change: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--patches", "4x4", "--steps", "5", "--change", change, "--seed", "7", "--out", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

#[test]
fn synth_writes_a_complete_directory() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth(&d, "0.25", &[]);
    for f in ["manifest.json", "regions.txt", "ground_truth.json", "frames/step-0005.rvr"] {
        assert!(d.join(f).exists(), "missing {f}");
    }
    let gt: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ground_truth.json")).unwrap()).unwrap();
    let changed = gt["changed"].as_array().unwrap();
    assert_eq!(changed.len(), 5);
    assert!(changed[1..].iter().all(|c| c.as_array().unwrap().len() == 4));
}

#[test]
fn analyze_identical_frames() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth(&d, "0", &[]);
    let out = ok(&["--deterministic", "analyze", "--manifest", p(&d.join("manifest.json")), "--selector", "pixel", "--tolerance", "0"]);
    let csv = String::from_utf8(out.stdout).unwrap();
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 5);
    assert!(rows[..4].iter().all(|r| r.ends_with(",16,16,1")));
    assert!(csv.contains("# selector: {\"kind\":\"pixel\",\"tolerance\":0}"));
}

#[test]
fn reports_are_byte_identical_when_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth(&d, "0.4", &[]);
    let m = d.join("manifest.json");
    for out in ["a", "b"] {
        let o = t.path().join(out);
        ok(&["--deterministic", "analyze", "--manifest", p(&m), "--selector", "cosine", "--format", "json", "--out", p(&o)]);
        ok(&["--deterministic", "budget", "--manifest", p(&m), "--selector", "no-drop", "--selector", "random", "--ks", "1,2,3", "--budget", "100", "--out", p(&o)]);
        assert!(o.join("budget-plot.csv").exists());
    }
    for f in ["redundancy.json", "budget-no-drop.csv", "budget-random.csv", "budget-plot.csv"] {
        let a = std::fs::read(t.path().join("a").join(f)).unwrap();
        let b = std::fs::read(t.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
}

#[test]
fn filter_then_verify_and_detect_tampering() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth(&d, "0.3", &[]);
    let f = t.path().join("f");
    ok(&["filter", "--manifest", p(&d.join("manifest.json")), "--selector", "random", "--drop-fraction", "0.5", "--seed", "3", "--k", "3", "--out", p(&f)]);
    ok(&["verify-masks", "--dir", p(&f)]);

    // Flip one retained patch in a stored mask: replay must catch it.
    let mask_path = f.join("masks/pair-0003.rvmk");
    let mut bytes = std::fs::read(&mask_path).unwrap();
    let last = bytes.len() - 2;
    bytes[last] ^= 0x01;
    std::fs::write(&mask_path, bytes).unwrap();
    let out = run(&["verify-masks", "--dir", p(&f)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["analyze"]).status.code(), Some(2));
    let out = run(&["analyze", "--manifest", "missing.json", "--selector", "rts"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--model"));
    assert_eq!(run(&["filter", "--manifest", "missing.json", "--selector", "pixel", "--selector", "cosine", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn validation_and_io_errors_exit_one() {
    let out = run(&["analyze", "--manifest", "definitely-missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    let t = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--change", "1.5", "--out", p(t.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("change_fraction"));
}

#[test]
fn env_var_overrides_output_directory() {
    let t = tempfile::tempdir().unwrap();
    let env_dir = t.path().join("from-env");
    let out = bin()
        .env("SCREENDELTA_OUT_DIR", &env_dir)
        .args(["synth", "--patches", "2x2", "--steps", "2", "--out", p(&t.path().join("flag"))])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(env_dir.join("manifest.json").exists());
    assert!(!t.path().join("flag").exists());
}

#[test]
fn train_then_eval_on_held_out_split() {
    let t = tempfile::tempdir().unwrap();
    let train = t.path().join("train");
    let held = t.path().join("held");
    let common = ["synth", "--patches", "8x8", "--patch-size", "12", "--steps", "6", "--change", "0.4", "--trajectories", "6", "--samples"];
    ok(&[&common[..], &["--seed", "1", "--out", p(&train)]].concat());
    ok(&[&common[..], &["--seed", "500", "--out", p(&held)]].concat());
    let m = t.path().join("m");
    ok(&["train-rts", "--samples", p(&train.join("samples.bin")), "--epochs", "20", "--seed", "1", "--out", p(&m)]);
    assert!(m.join("model.rvml").exists());
    let out = ok(&["eval-rts", "--model", p(&m.join("model.rvml")), "--samples", p(&held.join("samples.bin"))]);
    let line = String::from_utf8(out.stdout).unwrap();
    let acc: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(acc >= 0.95, "held-out accuracy {acc}");

    // The trained model drives the rts selector end to end.
    let d = t.path().join("d");
    synth(&d, "0.25", &[]);
    let f = t.path().join("f");
    let model = m.join("model.rvml");
    ok(&["filter", "--manifest", p(&d.join("manifest.json")), "--selector", "rts", "--model", p(&model), "--out", p(&f)]);
    ok(&["verify-masks", "--dir", p(&f), "--model", p(&model)]);
}

#[test]
fn png_frames_are_accepted() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    let mut a = image::RgbImage::from_pixel(56, 28, image::Rgb([10, 20, 30]));
    a.save(dir.join("a.png")).unwrap();
    for y in 0..28 {
        for x in 28..56 {
            a.put_pixel(x, y, image::Rgb([200, 0, 0]));
        }
    }
    a.save(dir.join("b.png")).unwrap();
    let manifest = serde_json::json!({
        "schema_version": 1,
        "task": "png test",
        "steps": [
            {"index": 1, "image": "a.png", "text": "one", "action": null},
            {"index": 2, "image": "b.png", "text": "two", "action": null},
        ],
    });
    std::fs::write(dir.join("m.json"), manifest.to_string()).unwrap();
    let out = ok(&["--deterministic", "analyze", "--manifest", p(&dir.join("m.json")), "--tolerance", "0"]);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(data_rows(&csv)[0], "pair,0,2,1,2,0.5");
}
