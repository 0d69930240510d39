use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.template_side=32",
    "data.search_side=64",
    "data.source_stride=1",
    "data.keyframe_stride=2",
    "tracker.widths=[4, 8, 8, 16]",
    "tracker.norm_groups=2",
    "tracker.head_width=8",
    "tracker.head_convs=1",
    "agda.d_model=16",
    "agda.n_heads=2",
    "agda.ff_width=32",
    "agda.layers=1",
    "agda.max_token_side=4",
    "csda.memory_size=64",
    "csda.refit_interval=2",
    "csda.cluster_max=4",
    "train.batch_size=4",
    "train.epochs=1",
    "train.max_steps_per_epoch=3",
    "eval.probe_samples=32",
];

fn pdat(args: &[&str], root: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pdat"));
    cmd.args(args).arg("--deterministic").env("RUST_LOG", "warn").env("PDAT_CACHE", root.join("cache"));
    for s in TINY {
        cmd.args(["--set", s]);
    }
    let src = format!("data.source_root={}", root.join("data/source").display());
    let tgt = format!("data.target_root={}", root.join("data/target").display());
    cmd.args(["--set", &src, "--set", &tgt]);
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let r = |p: &str| root.join(p).display().to_string();

    ok(&pdat(&["synth", "--out", &r("data"), "--sequences", "3", "--frames", "20"], root));
    assert!(root.join("data/source/source_000/groundtruth_rect.txt").is_file());
    assert!(root.join("data/target/target_002/img/000020.png").is_file());

    ok(&pdat(&["preprocess", "--out", &r("pairs")], root));
    assert!(root.join("pairs/pairs.json").is_file());
    ok(&pdat(&["preprocess", "--out", &r("pairs2")], root));
    let manifest = |d: &str| std::fs::read_to_string(root.join(d).join("manifest.json")).unwrap();
    assert_eq!(manifest("pairs"), manifest("pairs2"));
    let out = pdat(&["preprocess", "--out", &r("none"), "--set", "data.conf_threshold=1.0"], root);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no candidates"));

    let store = format!("data.target_pairs={}", r("pairs"));
    ok(&pdat(&["train", "--out", &r("run"), "--set", &store], root));
    let ck = root.join("run/checkpoints/epoch_001");
    for f in ["params.bin", "manifest.json", "config.snapshot", "trainer_state.json"] {
        assert!(ck.join(f).is_file(), "missing {f}");
    }
    assert_eq!(std::fs::read_to_string(root.join("run/metrics.jsonl")).unwrap().lines().count(), 3);

    let out = pdat(&["eval", "--checkpoint", &r("run/checkpoints/epoch_001"), "--dataset", &r("data/target"), "--out", &r("eval")], root);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("success"));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(rep["per_sequence"].as_array().unwrap().len(), 3);
    assert!(rep["domain_gap"]["mmd2"].as_f64().is_some());
    assert!(root.join("eval/success.csv").is_file());
    ok(&pdat(&["eval", "--checkpoint", &r("run/checkpoints/epoch_001"), "--dataset", &r("data/target"), "--out", &r("eval2")], root));
    let report = |d: &str| std::fs::read_to_string(root.join(d).join("report.json")).unwrap();
    assert_eq!(report("eval"), report("eval2"));
    std::fs::create_dir_all(root.join("empty")).unwrap();
    let out = pdat(&["eval", "--checkpoint", &r("run/checkpoints/epoch_001"), "--dataset", &r("empty"), "--out", &r("eval3")], root);
    assert_eq!(out.status.code(), Some(3));

    let csv = r("emb/embeddings.csv");
    ok(&pdat(&["export-embeddings", "--checkpoint", &r("run/checkpoints/epoch_001"), "--out", &csv], root));
    let text = std::fs::read_to_string(&csv).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(&header[..3], &["sample_id", "domain", "voted_label"]);
    assert_eq!(header.len(), 3 + 16);
    assert!(std::fs::read_dir(root.join("cache")).unwrap().count() >= 1);
    // second export is served from the cache and identical
    let csv2 = r("emb/again.csv");
    ok(&pdat(&["export-embeddings", "--checkpoint", &r("run/checkpoints/epoch_001"), "--out", &csv2], root));
    assert_eq!(std::fs::read_to_string(&csv2).unwrap(), text);

    let out = pdat(&["report", &r("eval"), "--out", &r("table.md")], root);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("| eval |"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = pdat(&["train", "--set", "train.epocs=3"], root);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epocs"));
    // source root points at a directory that does not exist
    let out = pdat(&["train", "--out", &root.join("run").display().to_string()], root);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn disable_flag_turns_modules_off() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let r = |p: &str| root.join(p).display().to_string();
    ok(&pdat(&["synth", "--out", &r("data"), "--sequences", "2", "--frames", "12"], root));
    ok(&pdat(&["train", "--out", &r("run"), "--disable", "agda,csda"], root));
    let snap = std::fs::read_to_string(root.join("run/config.snapshot")).unwrap();
    assert!(snap.contains("agda.enabled = false"));
    assert!(snap.contains("csda.enabled = false"));
    let first = std::fs::read_to_string(root.join("run/metrics.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(rec["adv_G"].as_f64(), Some(0.0));
    assert!(rec["C_selected"].is_null());
}
