use mcae_core::checkpoint::Checkpoint;
use mcae_core::config::Config;
use mcae_core::model::Phase;
use mcae_core::pipeline::{self, CHECKPOINT_FILE, METRICS_FILE};
use mcae_core::training::Sgd;
use proptest::prelude::*;

fn tiny(extra: &[(&str, &str)]) -> Config {
    let mut cfg = Config::default();
    let base = [
        ("dataset", "viewpoint"),
        ("viewpoint_per_cell", "4"),
        ("num_caps", "4"),
        ("caps_dim", "4"),
        ("encoder_layers", "1"),
        ("backbone_depth", "1"),
        ("epochs", "2"),
        ("batch_size", "8"),
    ];
    for (k, v) in base.iter().chain(extra) {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn quiet() -> impl FnMut(&str) {
    |_: &str| {}
}

#[test]
fn pretraining_is_byte_reproducible_and_seed_sensitive() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (i, d) in dirs.iter().enumerate() {
        let seed = if i == 2 { "1" } else { "0" };
        pipeline::pretrain(&tiny(&[("seed", seed)]), d.path(), &mut quiet()).unwrap();
    }
    let read = |i: usize, f: &str| std::fs::read(dirs[i].path().join(f)).unwrap();
    assert_eq!(read(0, CHECKPOINT_FILE), read(1, CHECKPOINT_FILE));
    assert_eq!(read(0, METRICS_FILE), read(1, METRICS_FILE));
    assert_ne!(read(0, CHECKPOINT_FILE), read(2, CHECKPOINT_FILE));
}

#[test]
fn metrics_have_one_row_per_epoch_and_the_checkpoint_is_the_best_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[("epochs", "3")]);
    let run = pipeline::finetune(&cfg, None, dir.path(), &mut quiet()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 5 && !l.ends_with(',')));
    let losses: Vec<f64> = run.metrics.iter().map(|m| m.val_loss).collect();
    let best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(losses[run.best_epoch], best);
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.config_value("phase"), Some("finetune"));
    for (name, t) in run.best.iter() {
        assert_eq!(ck.tensors.get(name).unwrap(), t);
    }
}

#[test]
fn pretraining_reduces_validation_loss_on_the_synthetic_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[("epochs", "3"), ("batch_size", "2"), ("viewpoint_per_cell", "6")]);
    let run = pipeline::pretrain(&cfg, dir.path(), &mut quiet()).unwrap();
    let best = run.metrics[run.best_epoch].val_loss;
    assert!(best < run.initial_val_loss, "{best} vs {}", run.initial_val_loss);
}

#[test]
fn finetune_from_pretraining_keeps_shared_tensors_and_drops_the_decoder() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    pipeline::pretrain(&cfg, dir.path(), &mut quiet()).unwrap();
    let pre = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let mut ft = pipeline::fresh_params(&cfg, Phase::Finetune).unwrap();
    pipeline::transfer_shared(&pre.tensors, &mut ft).unwrap();
    assert!(ft.names().all(|n| !n.starts_with("decoder") && !n.starts_with("projection")));
    assert!(ft.names().any(|n| n.starts_with("head.")));
    for (name, t) in pre.tensors.iter().filter(|(n, _)| n.starts_with("backbone.") || n.starts_with("encoder.")) {
        assert_eq!(ft.get(name).unwrap(), t, "{name}");
    }
}

#[test]
fn progress_reports_mask_counts_and_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    pipeline::pretrain(&tiny(&[("epochs", "1")]), dir.path(), &mut |l: &str| lines.push(l.to_string())).unwrap();
    assert!(lines.iter().any(|l| l.starts_with("initial val_loss=")));
    assert!(lines.iter().any(|l| l.contains("masked=8/16")));
    assert!(lines.iter().any(|l| l.starts_with("epoch 0:") && l.contains("val_loss=")));
}

#[test]
fn evaluation_covers_familiar_and_novel_angles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    pipeline::finetune(&cfg, None, dir.path(), &mut quiet()).unwrap();
    let summary = pipeline::eval_checkpoint(&cfg, &dir.path().join(CHECKPOINT_FILE)).unwrap();
    let novel = summary.novel.unwrap();
    assert!(summary.test.count > 0 && novel.count > summary.test.count);
    assert!((0.0..=1.0).contains(&summary.test.top1) && (0.0..=1.0).contains(&novel.top1));
}

#[test]
fn reconstructions_keep_visible_patches_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[("epochs", "1")]);
    pipeline::pretrain(&cfg, dir.path(), &mut quiet()).unwrap();
    let recons = pipeline::reconstruct(&cfg, &dir.path().join(CHECKPOINT_FILE), 3).unwrap();
    assert_eq!(recons.len(), 3);
    for r in &recons {
        let masked_pixels = r.masked_input.iter().zip(&r.original).filter(|(m, o)| m != o).count();
        assert!(masked_pixels > 0);
        // visible pixels of the composite are the ground truth
        for ((c, o), m) in r.composite.iter().zip(&r.original).zip(&r.masked_input) {
            if m == o && *o != 0.0 {
                assert_eq!(c, o);
            }
        }
    }
}

#[test]
fn sgd_without_gradients_leaves_parameters_unchanged() {
    let cfg = tiny(&[]);
    let mut store = pipeline::fresh_params(&cfg, Phase::Finetune).unwrap();
    let before = store.clone();
    Sgd::new(0.9).step(&mut store, 0.1).unwrap();
    for (name, t) in before.iter() {
        assert_eq!(store.get(name).unwrap(), t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn config_text_round_trips(seed in 0u64..1000, caps in 1usize..9, ratio in 0.0f64..0.9) {
        let cfg = tiny(&[("seed", &seed.to_string()), ("num_caps", &caps.to_string()), ("mask_ratio", &ratio.to_string())]);
        let text = cfg.to_text(Phase::Pretrain);
        let (back, phase) = Config::from_text(&text).unwrap();
        prop_assert_eq!(phase, Phase::Pretrain);
        prop_assert_eq!(back.to_text(Phase::Pretrain), text);
    }
}
