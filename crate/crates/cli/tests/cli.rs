use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# openslot.config/1
bench.sizes.train = 40
bench.sizes.test_known = 12
bench.sizes.test_h = 12
bench.sizes.test_m = 12
pretrain.epochs = 1
pretrain.generic_images = 16
pretrain.finetune_epochs = 1
cls.epochs = 4
";

fn openslot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_openslot"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn openslot")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = openslot(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn runs(dir: &Path, prefix: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir() && p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    v.sort();
    v
}

fn prepared() -> tempfile::TempDir {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("cfg.txt"), TINY).unwrap();
    ok(t.path(), &["gen-data", "--config", "cfg.txt"]);
    ok(t.path(), &["pretrain", "--config", "cfg.txt"]);
    ok(t.path(), &["train-cls", "--config", "cfg.txt"]);
    t
}

#[test]
fn full_chain_writes_outputs_and_is_deterministic() {
    let t = prepared();
    let d = t.path();
    assert!(d.join("runs/backbone.ckpt").exists());
    assert!(d.join("runs/heads.ckpt").exists());

    let a = ok(d, &["eval-osr", "--config", "cfg.txt", "--metric", "energy", "--scheme", "all"]);
    let rows: Vec<&str> = a.lines().skip(2).collect();
    assert_eq!(rows.len(), 4, "{a}");
    for (row, (set, m)) in rows.iter().zip([("H", "auroc"), ("H", "fpr95"), ("M", "auroc"), ("M", "fpr95")]) {
        assert!(row.starts_with(&format!("synthetic,{set},energy_{m},")), "{row}");
    }
    ok(d, &["eval-osr", "--config", "cfg.txt", "--metric=energy", "--scheme=all"]);
    let evals = runs(d, "eval-osr-");
    assert_eq!(evals.len(), 2);
    let csv = |p: &Path| fs::read(p.join("metrics.csv")).unwrap();
    assert_eq!(csv(&evals[0]), csv(&evals[1]));
    assert!(String::from_utf8(csv(&evals[0])).unwrap().starts_with("# schema=openslot.metrics/1\n"));

    let closed = ok(d, &["eval-closed", "--config", "cfg.txt"]);
    assert!(closed.contains("synthetic,known,accuracy,"));

    ok(d, &["detect", "--config", "cfg.txt"]);
    let det = fs::read_to_string(runs(d, "detect-")[0].join("detections.txt")).unwrap();
    let mut lines = det.lines();
    assert_eq!(lines.next(), Some("# schema=openslot.detections/1"));
    assert_eq!(lines.next(), Some("image_id,x0,y0,x1,y1,label,score"));
    for l in lines {
        assert_eq!(l.split(',').count(), 7, "{l}");
    }

    let diag = ok(d, &["diagnose", "--config", "cfg.txt"]);
    assert!(diag.contains("fg_rate_of_maxlogit_slot"));

    let input = evals[0].join("metrics.csv");
    let out = ok(d, &["plot", "--input", input.to_str().unwrap(), "--config", "cfg.txt"]);
    let svg = fs::read_to_string(d.join(out.trim())).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<rect").count(), 4);
}

#[test]
fn every_run_snapshots_a_replayable_config() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    fs::write(d.join("cfg.txt"), TINY).unwrap();
    ok(d, &["gen-data", "--config", "cfg.txt", "--ans.alpha", "0.25"]);
    let snap = runs(d, "gen-data-")[0].join("config.txt");
    let text = fs::read_to_string(&snap).unwrap();
    assert!(text.starts_with("# openslot.config/1\n"));
    assert!(text.contains("ans.alpha = 0.25\n"));
    assert!(text.contains("bench.sizes.train = 40\n"));
    assert!(text.contains("cls.epochs = 4\n"));
    // The snapshot reproduces itself when used as the config.
    fs::write(d.join("replay.txt"), &text).unwrap();
    ok(d, &["gen-data", "--config", "replay.txt", "--paths.data_dir", "data/other"]);
    let again = fs::read_to_string(runs(d, "gen-data-")[1].join("config.txt")).unwrap();
    assert_eq!(again.replace("data/other", "data/bench"), text);
}

#[test]
fn errors_exit_nonzero_with_a_named_diagnostic() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    fs::write(d.join("cfg.txt"), TINY).unwrap();

    let out = openslot(d, &["eval-osr", "--config", "cfg.txt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing classifier heads"));

    let out = openslot(d, &["pretrain", "--config", "cfg.txt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing benchmark manifest"));

    let out = openslot(d, &["gen-data", "--config", "cfg.txt", "--no.such.key", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    let out = openslot(d, &["gen-data", "--config", "cfg.txt", "--ans.alpha", "1.5"]);
    assert!(!out.status.success());

    ok(d, &["gen-data", "--config", "cfg.txt"]);
    let out = openslot(d, &["gen-data", "--config", "cfg.txt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("already exists"));
    ok(d, &["gen-data", "--config", "cfg.txt", "--force"]);

    fs::write(d.join("data/bench/manifest.jsonl"), "{not json\n").unwrap();
    let out = openslot(d, &["pretrain", "--config", "cfg.txt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
}
