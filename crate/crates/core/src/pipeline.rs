//! File-level entry points: datasets from a config, the two training phases
//! with their artifacts, evaluation and reconstruction images.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{Config, DatasetKind};
use crate::data::{load_mnist, make_viewpoint_dataset, split_train_val, Dataset, ViewpointSpec};
use crate::error::{Error, Result};
use crate::masking::{mix_seed, patchify, sample_mask, unpatchify, ImageShape, PatchGrid};
use crate::model::{init_finetune, init_pretrain, pretrain_forward, ModelConfig, Phase, SHARED_PREFIXES};
use crate::params::ParamStore;
use crate::training::{evaluate, metrics_csv, run_finetune, run_pretrain, EvalReport, RunOutput};

pub const CHECKPOINT_FILE: &str = "checkpoint.mcae";
pub const METRICS_FILE: &str = "metrics.csv";

/// Seed of the synthetic viewpoint images; fixed so every run sees the same data.
const VIEWPOINT_DATA_SEED: u64 = 0x0917_E4A1;

#[derive(Clone, Debug)]
pub struct DataBundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Held-out angles of the viewpoint dataset.
    pub novel: Option<Dataset>,
}

/// Image shape and class count of a dataset kind.
pub fn geometry(kind: DatasetKind) -> (ImageShape, usize) {
    match kind {
        DatasetKind::Mnist => (ImageShape::new(1, 28, 28), 10),
        DatasetKind::Viewpoint => {
            let spec = ViewpointSpec::default();
            (ImageShape::new(1, spec.size, spec.size), spec.classes)
        }
    }
}

fn limit(ds: Dataset, n: usize) -> Dataset {
    if n == 0 || n >= ds.len() {
        ds
    } else {
        ds.head(n)
    }
}

/// Training pool limited to `train_samples`, split into train/validation by `seed`.
pub fn load_data(cfg: &Config) -> Result<DataBundle> {
    let (pool, test, novel) = match cfg.dataset {
        DatasetKind::Mnist => (load_mnist(&cfg.data_dir, true)?, load_mnist(&cfg.data_dir, false)?, None),
        DatasetKind::Viewpoint => {
            let (train, familiar, novel) =
                make_viewpoint_dataset(&ViewpointSpec::default(), cfg.viewpoint_per_cell, VIEWPOINT_DATA_SEED)?;
            (train, familiar, Some(novel))
        }
    };
    let pool = limit(pool, cfg.train_samples);
    let (train, val) = split_train_val(&pool, cfg.val_fraction, cfg.seed)?;
    let test = limit(test, cfg.test_samples);
    let novel = novel.map(|n| limit(n, cfg.test_samples));
    Ok(DataBundle { train, val, test, novel })
}

pub fn model_config(cfg: &Config) -> ModelConfig {
    let (image, classes) = geometry(cfg.dataset);
    cfg.model_config(image, classes)
}

/// Freshly initialized parameters of a phase; the seed depends only on `cfg.seed`.
pub fn fresh_params(cfg: &Config, phase: Phase) -> Result<ParamStore<f32>> {
    let model = model_config(cfg);
    match phase {
        Phase::Pretrain => init_pretrain(&model, &mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 10]))),
        Phase::Finetune => init_finetune(&model, &mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 11]))),
    }
}

/// Checks that `store` holds exactly the tensors of `reference`, with equal shapes.
pub fn check_layout(store: &ParamStore<f32>, reference: &ParamStore<f32>) -> Result<()> {
    for (name, t) in reference.iter() {
        let got = store.get(name).map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("tensor {name}: shape {:?}, expected {:?}", got.shape(), t.shape())));
        }
    }
    if let Some(extra) = store.names().find(|n| !reference.contains(n)) {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

/// Copies the backbone and encoder tensors of `src` over `dst`; everything
/// else in `src` (decoder, projection) is dropped.
pub fn transfer_shared(src: &ParamStore<f32>, dst: &mut ParamStore<f32>) -> Result<()> {
    let shared = |n: &str| SHARED_PREFIXES.iter().any(|p| n.starts_with(p));
    for (name, t) in dst.iter_mut().filter(|(n, _)| shared(n)) {
        let from = src.get(name).map_err(|_| Error::Checkpoint(format!("init checkpoint lacks tensor {name}")))?;
        if from.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: init checkpoint has shape {:?}, config expects {:?}",
                from.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(from.data());
    }
    Ok(())
}

/// A checkpoint with its parsed config and phase.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub config: Config,
    pub phase: Phase,
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ck = Checkpoint::load(path)?;
    let (config, phase) = Config::from_text(&ck.config)
        .map_err(|e| Error::Checkpoint(format!("{}: bad config block: {e}", path.display())))?;
    let reference = fresh_params(&config, phase)?;
    check_layout(&ck.tensors, &reference)?;
    Ok(LoadedModel { model: model_config(&config), config, phase, params: ck.tensors })
}

fn expect_phase(m: &LoadedModel, phase: Phase, path: &Path) -> Result<()> {
    if m.phase != phase {
        return Err(Error::Checkpoint(format!("{}: {} checkpoint where a {phase} one is required", path.display(), m.phase)));
    }
    Ok(())
}

fn write_artifacts(out: &Path, cfg: &Config, phase: Phase, run: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Checkpoint::new(cfg.to_text(phase), run.best.clone()).save(&out.join(CHECKPOINT_FILE))?;
    let csv = out.join(METRICS_FILE);
    std::fs::write(&csv, metrics_csv(&run.metrics)).map_err(|e| Error::io(csv, e))
}

/// Masked-patch pretraining; writes `checkpoint.mcae` and `metrics.csv` into `out`.
pub fn pretrain(cfg: &Config, out: &Path, progress: &mut dyn FnMut(&str)) -> Result<RunOutput> {
    let data = load_data(cfg)?;
    let params = fresh_params(cfg, Phase::Pretrain)?;
    let run = run_pretrain(cfg, &model_config(cfg), &data.train, &data.val, params, progress)?;
    write_artifacts(out, cfg, Phase::Pretrain, &run)?;
    Ok(run)
}

/// Finetuning from scratch (`init = None`) or from a pretraining checkpoint.
/// The class head is initialized identically in both cases.
pub fn finetune(cfg: &Config, init: Option<&Path>, out: &Path, progress: &mut dyn FnMut(&str)) -> Result<RunOutput> {
    let mut params = fresh_params(cfg, Phase::Finetune)?;
    if let Some(path) = init {
        let ck = Checkpoint::load(path)?;
        transfer_shared(&ck.tensors, &mut params)?;
    }
    let data = load_data(cfg)?;
    let run = run_finetune(cfg, &model_config(cfg), &data.train, &data.val, params, progress)?;
    write_artifacts(out, cfg, Phase::Finetune, &run)?;
    Ok(run)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub test: EvalReport,
    pub novel: Option<EvalReport>,
}

/// Test-set metrics of a finetune checkpoint on the data selected by `cfg`.
pub fn eval_checkpoint(cfg: &Config, checkpoint: &Path) -> Result<EvalSummary> {
    let m = load_model(checkpoint)?;
    expect_phase(&m, Phase::Finetune, checkpoint)?;
    if geometry(cfg.dataset) != geometry(m.config.dataset) {
        return Err(Error::Config(format!("checkpoint was trained on {}, config selects {}", m.config.dataset, cfg.dataset)));
    }
    let data = load_data(cfg)?;
    let test = evaluate(&m.params, &m.model, &data.test, cfg.batch_size, m.config.ce_variant)?;
    let novel = data
        .novel
        .as_ref()
        .map(|n| evaluate(&m.params, &m.model, n, cfg.batch_size, m.config.ce_variant))
        .transpose()?;
    Ok(EvalSummary { test, novel })
}

/// Binary PGM (`P5`, maxval 255) of one `h × w` channel with values in `[0, 1]`.
pub fn pgm_bytes(values: &[f32], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    out
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The three images of a reconstruction: masked input, composite and original, each `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub masked_input: Vec<f32>,
    pub composite: Vec<f32>,
    pub original: Vec<f32>,
    pub shape: ImageShape,
}

/// Predicted patches at masked locations and ground truth at visible ones.
pub fn compose(pred: &[f32], target: &PatchGrid<f32>, masked: &[bool]) -> Result<(Vec<f32>, Vec<f32>)> {
    let q = target.patch_dim();
    if pred.len() != target.patches.len() || masked.len() != target.len() {
        return Err(Error::shape("compose", format!("{} predictions for {} patches", pred.len(), target.len())));
    }
    let mut composite = target.clone();
    let mut hidden = target.clone();
    for (l, &m) in masked.iter().enumerate() {
        if m {
            composite.patches[l * q..(l + 1) * q].copy_from_slice(&pred[l * q..(l + 1) * q]);
            hidden.patches[l * q..(l + 1) * q].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok((unpatchify(&hidden)?.0, unpatchify(&composite)?.0))
}

/// Reconstructions of the first `n` test images with the checkpoint's mask ratio.
pub fn reconstruct(cfg: &Config, checkpoint: &Path, n: usize) -> Result<Vec<Reconstruction>> {
    let m = load_model(checkpoint)?;
    expect_phase(&m, Phase::Pretrain, checkpoint)?;
    let data = load_data(cfg)?;
    let l = m.model.backbone.locations()?;
    let shape = m.model.backbone.image;
    let mut out = Vec::with_capacity(n);
    for i in 0..n.min(data.test.len()) {
        let image = data.test.image(i);
        let plan = sample_mask(l, m.config.mask_ratio, mix_seed(&[m.config.seed, i as u64, 7]))?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[m.config.seed, i as u64, 8]));
        let (pred, _) = pretrain_forward(&m.params, &m.model, image, &plan, &mut rng)?;
        let target = patchify(image, shape, m.model.backbone.patch)?;
        let (masked_input, composite) = compose(pred.data(), &target, &plan.visibility().iter().map(|v| !v).collect::<Vec<_>>())?;
        out.push(Reconstruction { masked_input, composite, original: image.to_vec(), shape });
    }
    Ok(out)
}

/// Writes `sample{i}_{masked,recon,original}[_c{c}].pgm` into `dir` and returns the paths.
pub fn write_reconstructions(recons: &[Reconstruction], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (i, r) in recons.iter().enumerate() {
        let (c, h, w) = (r.shape.channels, r.shape.height, r.shape.width);
        for (kind, img) in [("masked", &r.masked_input), ("recon", &r.composite), ("original", &r.original)] {
            for ch in 0..c {
                let suffix = if c == 1 { String::new() } else { format!("_c{ch}") };
                let path = dir.join(format!("sample{i}_{kind}{suffix}.pgm"));
                std::fs::write(&path, pgm_bytes(&img[ch * h * w..(ch + 1) * h * w], h, w)).map_err(|e| Error::io(&path, e))?;
                paths.push(path);
            }
        }
    }
    Ok(paths)
}
