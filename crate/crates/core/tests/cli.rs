//! End-to-end runs of the `lasers` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const PLANTED: &str = "data = planted\nplanted_k = 16\nplanted_dim = 16\nplanted_n = 16\nk = 24\ns = 2\nbatch_size = 8\nlr = 1e-3\n";

fn lasers(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lasers"));
    cmd.args(args).args(["--threads", "1", "--reproducible"]).arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.conf");
    std::fs::write(&path, text).unwrap();
    path
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn one_epoch_writes_one_metrics_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{PLANTED}epochs = 1\n"));
    let out = tmp.path().join("out");
    let o = lasers(&["train"], Some(&cfg), &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], lasers::cli::METRICS_HEADER);
    assert!(lines[1].starts_with("1,"));
    for f in ["model.lsrs", "curves.svg", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn reproducible_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{PLANTED}epochs = 3\n"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&lasers(&["train", "--seed", "4"], Some(&cfg), &a)), 0);
    assert_eq!(code(&lasers(&["train", "--seed", "4"], Some(&cfg), &b)), 0);
    for f in ["metrics.csv", "model.lsrs", "curves.svg"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest = |d: &Path| {
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("manifest.json")).unwrap()).unwrap();
        // output paths differ between the two directories
        for e in v["outputs"].as_array_mut().unwrap() {
            e["path"] = serde_json::Value::Null;
        }
        v
    };
    let m = manifest(&a);
    assert_eq!(m, manifest(&b));
    assert!(m["end_time"].is_null());
    assert_eq!(m["seed"], 4);
}

#[test]
fn seed_changes_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{PLANTED}epochs = 2\n"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&lasers(&["train", "--seed", "1"], Some(&cfg), &a)), 0);
    assert_eq!(code(&lasers(&["train", "--seed", "2"], Some(&cfg), &b)), 0);
    assert_ne!(std::fs::read(a.join("model.lsrs")).unwrap(), std::fs::read(b.join("model.lsrs")).unwrap());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    let bad_key = write_config(tmp.path(), "no_such_key = 3\n");
    assert_eq!(code(&lasers(&["train"], Some(&bad_key), &out)), 1);
    assert_eq!(code(&lasers(&["train"], Some(&tmp.path().join("missing.conf")), &out)), 1);
    assert_eq!(code(&lasers(&["train", "--set", "k=abc"], None, &out)), 1);
    assert_eq!(code(&lasers(&["frobnicate"], None, &out)), 1);
    assert_eq!(code(&lasers(&["--help"], None, &out)), 0);

    let missing = tmp.path().join("no_images");
    let o = lasers(&["train", "--set", "data=images", "--set", &format!("image_dir={}", missing.display())], None, &out);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_images"));

    let eval = write_config(tmp.path(), PLANTED);
    assert_eq!(code(&lasers(&["eval"], Some(&eval), &out)), 1);

    let diverge = write_config(tmp.path(), &format!("{PLANTED}coder = affine\nl = 8\nepochs = 5\n"));
    assert_eq!(code(&lasers(&["train", "--set", "lr=1e300"], Some(&diverge), &out)), 3);
}

#[test]
fn ablation_writes_one_row_per_level() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{PLANTED}epochs = 2\n"));
    let out = tmp.path().join("out");
    assert_eq!(code(&lasers(&["ablate-sparsity", "--s-list", "1"], Some(&cfg), &out)), 0);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines, ["s,psnr,perplexity", lines[1]]);
    assert!(lines[1].starts_with("1,"));

    let out = tmp.path().join("out2");
    assert_eq!(code(&lasers(&["ablate-sparsity", "--s-list", "1,3"], Some(&cfg), &out)), 0);
    assert_eq!(std::fs::read_to_string(out.join("ablation.csv")).unwrap().lines().count(), 3);
}

#[test]
fn unmasked_eval_matches_plain_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{PLANTED}epochs = 2\n"));
    let train = tmp.path().join("train");
    assert_eq!(code(&lasers(&["train"], Some(&cfg), &train)), 0);
    let ckpt = format!("checkpoint={}", train.join("model.lsrs").display());

    let eval = tmp.path().join("eval");
    assert_eq!(code(&lasers(&["eval", "--set", &ckpt], Some(&cfg), &eval)), 0);
    let mask = tmp.path().join("mask");
    assert_eq!(code(&lasers(&["mask-eval", "--fraction", "0", "--set", &ckpt], Some(&cfg), &mask)), 0);

    let read = |p: PathBuf| -> serde_json::Value { serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap() };
    let e = read(eval.join("summary.json"));
    let m = read(mask.join("summary.json"));
    assert_eq!(m["mask_side"], 0);
    assert!(m["masked_mse"].is_null());
    let (a, b) = (e["recon_mse"].as_f64().unwrap(), m["full_mse"].as_f64().unwrap());
    assert!((a - b).abs() <= 1e-12 * (1.0 + a), "{a} vs {b}");
}

#[test]
fn compare_writes_both_models() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{PLANTED}epochs = 2\ncoder = affine\nl = 4\n"));
    let out = tmp.path().join("out");
    let o = lasers(&["compare"], Some(&cfg), &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["vq.lsrs", "dl.lsrs", "vq_ze.pgm", "vq_zhat.pgm", "dl_ze.pgm", "dl_zhat.pgm", "compare.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let s: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert!(s["latent_mse_ratio"].as_f64().unwrap().is_finite());
}
