use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mcae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcae")).args(args).env_remove("MCAE_DATA_DIR").output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    let base = "dataset = viewpoint\nviewpoint_per_cell = 3\nnum_caps = 4\ncaps_dim = 4\nencoder_layers = 1\nbackbone_depth = 1\nepochs = 1\nbatch_size = 8\n";
    std::fs::write(&path, format!("{base}{body}")).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pretrained(dir: &Path) -> PathBuf {
    let cfg = config(dir, "pre.cfg", "");
    let out = dir.join("pre");
    let o = mcae(&["pretrain", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    out.join("checkpoint.mcae")
}

#[test]
fn missing_config_names_the_path() {
    let o = mcae(&["pretrain", "--config", "/nonexistent/run.cfg"]);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("/nonexistent/run.cfg"));
}

#[test]
fn unknown_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "bad.cfg", "num_capsules = 4\n");
    let o = mcae(&["pretrain", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("num_capsules"));
}

#[test]
fn missing_mnist_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.cfg");
    std::fs::write(&cfg, format!("data_dir = {}\n", dir.path().join("absent").display())).unwrap();
    let o = mcae(&["finetune", "--config", s(&cfg), "--init", "none", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o.stderr));
}

#[test]
fn no_subcommand_is_a_usage_error() {
    assert_eq!(mcae(&[]).status.code(), Some(1));
}

#[test]
fn pretrain_writes_only_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let mut names: Vec<_> = std::fs::read_dir(ckpt.parent().unwrap())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["checkpoint.mcae", "metrics.csv"]);
    let csv = std::fs::read_to_string(ckpt.with_file_name("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn init_with_other_geometry_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let cfg = config(dir.path(), "wide.cfg", "num_caps = 6\n");
    let o = mcae(&["finetune", "--config", s(&cfg), "--init", s(&ckpt), "--out", s(&dir.path().join("ft"))]);
    assert!(!o.status.success());
    let err = text(&o.stderr);
    assert!(err.contains("tensor backbone.") || err.contains("tensor encoder."), "{err}");
}

#[test]
fn reconstruct_writes_pgm_triplets() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let cfg = dir.path().join("pre.cfg");
    let out = dir.path().join("recon");
    let o = mcae(&["reconstruct", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--n", "2", "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 6);
    for f in files {
        let bytes = std::fs::read(f).unwrap();
        assert!(bytes.starts_with(b"P5\n28 28\n255\n"));
        assert_eq!(bytes.len(), 13 + 28 * 28);
    }
}

#[test]
fn reconstruct_rejects_a_finetune_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "ft.cfg", "");
    let out = dir.path().join("ft");
    assert!(mcae(&["finetune", "--config", s(&cfg), "--init", "none", "--out", s(&out)]).status.success());
    let o = mcae(&["reconstruct", "--config", s(&cfg), "--checkpoint", s(&out.join("checkpoint.mcae")), "--out-dir", s(&dir.path().join("r"))]);
    assert!(!o.status.success());
}

#[test]
fn eval_is_deterministic_and_reports_the_novel_split() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let cfg = dir.path().join("pre.cfg");
    let out = dir.path().join("ft");
    let o = mcae(&["finetune", "--config", s(&cfg), "--init", s(&ckpt), "--out", s(&out)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let ft = out.join("checkpoint.mcae");
    let a = mcae(&["eval", "--config", s(&cfg), "--checkpoint", s(&ft)]);
    let b = mcae(&["eval", "--config", s(&cfg), "--checkpoint", s(&ft)]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let stdout = text(&a.stdout);
    assert!(stdout.contains("\"novel_top1\":"));
    assert!(stdout.contains("gap"));
    // a pretraining checkpoint has no class head
    assert!(!mcae(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]).status.success());
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let ok = mcae(&["gradcheck"]);
    assert!(ok.status.success(), "{}", text(&ok.stdout));
    assert!(text(&ok.stdout).contains("class_head"));
    let bad = mcae(&["gradcheck", "--inject-fault", "softmax"]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(text(&bad.stdout).contains("FAIL"));
}

#[test]
fn keys_lists_every_config_key() {
    let o = mcae(&["keys"]);
    let out = text(&o.stdout);
    for key in ["num_caps", "mask_ratio", "reconstruction_target", "ce_variant", "augment_policy"] {
        assert!(out.contains(key), "{key}");
    }
}
