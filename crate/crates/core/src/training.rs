//! Losses, optimizer, learning-rate schedule and the two training loops.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CeVariant, Config, ReconTarget};
use crate::data::{augment, batches, Dataset};
use crate::error::{Error, Result};
use crate::masking::{mix_seed, sample_mask, MaskPlan};
use crate::model::{finetune_graph, patch_targets, pretrain_graph, ModelConfig};
use crate::numerics::{Real, Tape, Var};
use crate::params::{ForwardCtx, ParamStore};

/// Lower clamp on class scores before the logarithm.
pub const CE_EPS: f64 = 1e-7;

/// Momentum of the running normalization statistics.
pub const NORM_MOMENTUM: f64 = 0.1;

/// Per-location weights `[B, L, 1]` selecting which patches enter the loss,
/// and the number of selected locations.
fn patch_weights<T: Real>(plans: &[MaskPlan], mode: ReconTarget) -> Result<(Vec<T>, usize)> {
    let mut w = Vec::new();
    let mut count = 0;
    for plan in plans {
        for l in 0..plan.len() {
            let on = mode == ReconTarget::AllPatches || plan.is_masked(l);
            count += usize::from(on);
            w.push(if on { T::one() } else { T::zero() });
        }
    }
    if count == 0 {
        return Err(Error::Mask("masked_only reconstruction needs at least one masked patch".into()));
    }
    Ok((w, count))
}

/// Mean squared error over the pixels of the selected patches of a batch.
/// `pred: [B, L, Q]`, `target` laid out the same way.
pub fn mse_loss_tape<T: Real>(tape: &mut Tape<T>, pred: Var, target: &[T], plans: &[MaskPlan], mode: ReconTarget) -> Result<Var> {
    let s = tape.shape(pred).to_vec();
    if s.len() != 3 || s[0] != plans.len() || target.len() != s.iter().product::<usize>() {
        return Err(Error::shape("mse_loss", format!("pred {s:?}, {} targets, {} plans", target.len(), plans.len())));
    }
    if plans.iter().any(|p| p.len() != s[1]) {
        return Err(Error::shape("mse_loss", format!("plans do not cover {} locations", s[1])));
    }
    let (w, count) = patch_weights::<T>(plans, mode)?;
    let t = tape.constant(&s, target.to_vec())?;
    let w = tape.constant(&[s[0], s[1], 1], w)?;
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    let sq = tape.mul(sq, w)?;
    let total = tape.sum_all(sq)?;
    tape.scale(total, T::lit(1.0 / (count * s[2]) as f64))
}

/// Single-image form: `pred` and `target` are `[L, Q]`, row-major.
pub fn mse_loss<T: Real>(pred: &[T], target: &[T], q: usize, plan: &MaskPlan, mode: ReconTarget) -> Result<T> {
    if pred.len() != target.len() || pred.len() != plan.len() * q {
        return Err(Error::shape("mse_loss", format!("{} predictions, {} targets, {} locations x {q}", pred.len(), target.len(), plan.len())));
    }
    let mut tape = Tape::new();
    let p = tape.constant(&[1, plan.len(), q], pred.to_vec())?;
    let loss = mse_loss_tape(&mut tape, p, target, std::slice::from_ref(plan), mode)?;
    Ok(tape.value(loss)[0])
}

/// `−mean_b log clamp(ŷ[b, label_b], ε, 1)`; with the softmax variant the
/// scores are first passed through a softmax over classes.
pub fn ce_loss_tape<T: Real>(tape: &mut Tape<T>, scores: Var, labels: &[usize], variant: CeVariant) -> Result<Var> {
    let s = tape.shape(scores).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("ce_loss", format!("scores {s:?} for {} labels", labels.len())));
    }
    let (b, c) = (s[0], s[1]);
    if let Some(l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid("ce_loss", format!("label {l} outside [0, {c})")));
    }
    let probs = match variant {
        CeVariant::Average => scores,
        CeVariant::Softmax => tape.softmax(scores, 1)?,
    };
    let clamped = tape.clamp(probs, CE_EPS, 1.0)?;
    let logs = tape.log(clamped)?;
    let flat = tape.reshape(logs, &[b * c])?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * c + l).collect();
    let picked = tape.gather(flat, &idx, 0)?;
    let mean = tape.mean_all(picked)?;
    tape.scale(mean, -T::one())
}

/// Batch form on values: `scores` is `[B, C]`, row-major.
pub fn ce_loss<T: Real>(scores: &[T], classes: usize, labels: &[usize], variant: CeVariant) -> Result<T> {
    if classes == 0 || scores.len() != classes * labels.len() {
        return Err(Error::shape("ce_loss", format!("{} scores for {} labels x {classes} classes", scores.len(), labels.len())));
    }
    let mut tape = Tape::new();
    let s = tape.constant(&[labels.len(), classes], scores.to_vec())?;
    let loss = ce_loss_tape(&mut tape, s, labels, variant)?;
    Ok(tape.value(loss)[0])
}

/// `lr_init·(1 + cos(π·t/T))/2`.
pub fn cosine_lr(t: usize, total: usize, lr_init: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("cosine_lr", "total epochs must be positive"));
    }
    if t > total {
        return Err(Error::invalid("cosine_lr", format!("epoch {t} beyond {total}")));
    }
    Ok(lr_init * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()) / 2.0)
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T: Real = f32> {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Sgd { momentum, velocity: BTreeMap::new() }
    }

    /// Applies the gradients stored on every trainable tensor.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let (mu, lr) = (T::lit(self.momentum), T::lit(lr));
        for (name, t) in store.iter() {
            if t.requires_grad() && t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        for (name, t) in store.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad().map(<[T]>::to_vec) else { continue };
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for ((vi, gi), pi) in v.iter_mut().zip(&g).zip(t.data_mut()) {
                *vi = mu * *vi + *gi;
                *pi -= lr * *vi;
            }
            t.set_grad(None)?;
        }
        Ok(())
    }
}

/// Index of the smallest value; the earliest wins ties.
pub fn best_epoch(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in val_losses.iter().enumerate() {
        if best.map_or(true, |b| v < val_losses[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Empty during pretraining.
    pub val_top1: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_loss,val_top1";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let top1 = r.val_top1.map(|a| format!("{a:.6}")).unwrap_or_default();
        let _ = writeln!(out, "{},{:.8},{:.8},{:.8},{}", r.epoch, r.lr, r.train_loss, r.val_loss, top1);
    }
    out
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: ParamStore<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    /// Validation loss of the initial parameters.
    pub initial_val_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub loss: f64,
    pub count: usize,
}

fn gather_batch(ds: &Dataset, idx: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let mut images = Vec::with_capacity(idx.len() * ds.shape.numel());
    idx.iter().for_each(|&i| images.extend_from_slice(ds.image(i)));
    (images, idx.iter().map(|&i| ds.labels[i]).collect())
}

fn check_nonempty(ds: &Dataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        Err(Error::Data(format!("{what} set is empty")))
    } else {
        Ok(())
    }
}

/// One optimizer step; returns the batch loss.
fn train_step<F>(store: &mut ParamStore<f32>, sgd: &mut Sgd<f32>, lr: f64, build: F) -> Result<f64>
where
    F: FnOnce(&mut ForwardCtx<'_, f32>) -> Result<Var>,
{
    let (grads, bound, updates, loss) = {
        let mut ctx = ForwardCtx::new(store, true);
        let loss = build(&mut ctx)?;
        let value = f64::from(ctx.tape.value(loss)[0]);
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grads = ctx.tape.backward(loss)?;
        (grads, ctx.bound, ctx.updates, value)
    };
    store.collect_grads(&bound, &grads)?;
    sgd.step(store, lr)?;
    store.apply_stat_updates(&updates, NORM_MOMENTUM)?;
    Ok(loss)
}

/// Masked-patch reconstruction loss of `ds` in inference mode, with masks
/// and placeholder noise fixed by `seed` so repeated calls are comparable.
pub fn pretrain_eval_loss(store: &ParamStore<f32>, model: &ModelConfig, cfg: &Config, ds: &Dataset, seed: u64) -> Result<f64> {
    check_nonempty(ds, "validation")?;
    let l = model.backbone.locations()?;
    let (mut total, mut weight) = (0.0, 0.0);
    for (bi, idx) in batches(ds.len(), cfg.batch_size, None).iter().enumerate() {
        let (images, _) = gather_batch(ds, idx);
        let plans = idx
            .iter()
            .map(|&i| sample_mask(l, cfg.mask_ratio, mix_seed(&[seed, i as u64, 5])))
            .collect::<Result<Vec<_>>>()?;
        let mut ctx = ForwardCtx::new(store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, bi as u64, 6]));
        let pred = pretrain_graph(&mut ctx, model, &images, &plans, &mut rng)?;
        let target = patch_targets(model, &images)?;
        let loss = mse_loss_tape(&mut ctx.tape, pred, &target, &plans, cfg.reconstruction_target)?;
        let (_, n) = patch_weights::<f32>(&plans, cfg.reconstruction_target)?;
        total += f64::from(ctx.tape.value(loss)[0]) * n as f64;
        weight += n as f64;
    }
    Ok(total / weight)
}

/// Masked-patch pretraining with validation-loss model selection.
pub fn run_pretrain(
    cfg: &Config,
    model: &ModelConfig,
    train: &Dataset,
    val: &Dataset,
    mut store: ParamStore<f32>,
    progress: &mut dyn FnMut(&str),
) -> Result<RunOutput> {
    check_nonempty(train, "training")?;
    let epochs = cfg.epochs_for(crate::model::Phase::Pretrain);
    let l = model.backbone.locations()?;
    let initial_val_loss = pretrain_eval_loss(&store, model, cfg, val, cfg.seed)?;
    progress(&format!("initial val_loss={initial_val_loss:.6}"));
    let mut sgd = Sgd::new(cfg.momentum);
    let mut metrics = Vec::with_capacity(epochs);
    let mut best: Option<(f64, ParamStore<f32>, usize)> = None;
    for epoch in 0..epochs {
        let lr = cosine_lr(epoch, epochs, cfg.lr_init)?;
        let e = epoch as u64;
        let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, e, 2]));
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (bi, idx) in batches(train.len(), cfg.batch_size, Some(mix_seed(&[cfg.seed, e, 1]))).iter().enumerate() {
            let mut images = Vec::with_capacity(idx.len() * train.shape.numel());
            for &i in idx {
                images.extend(augment(train.image(i), train.shape, cfg.augment_policy, &mut aug_rng));
            }
            let plans = idx
                .iter()
                .map(|&i| sample_mask(l, cfg.mask_ratio, mix_seed(&[cfg.seed, e, i as u64, 3])))
                .collect::<Result<Vec<_>>>()?;
            let target = patch_targets(model, &images)?;
            let mut noise = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, e, bi as u64, 4]));
            let loss = train_step(&mut store, &mut sgd, lr, |ctx| {
                let pred = pretrain_graph(ctx, model, &images, &plans, &mut noise)?;
                mse_loss_tape(&mut ctx.tape, pred, &target, &plans, cfg.reconstruction_target)
            })?;
            progress(&format!("epoch {epoch} batch {bi}: masked={}/{l} loss={loss:.6}", plans[0].num_masked()));
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let val_loss = pretrain_eval_loss(&store, model, cfg, val, cfg.seed)?;
        let row = EpochMetrics { epoch, lr, train_loss: loss_sum / seen as f64, val_loss, val_top1: None };
        progress(&format!("epoch {epoch}: lr={lr:.6} train_loss={:.6} val_loss={val_loss:.6}", row.train_loss));
        metrics.push(row);
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, store.clone(), epoch));
        }
    }
    let (_, best, best_epoch) = best.ok_or_else(|| Error::Config("no epochs to run".into()))?;
    Ok(RunOutput { best, metrics, best_epoch, initial_val_loss })
}

/// Supervised training of every parameter with the class-capsule loss.
pub fn run_finetune(
    cfg: &Config,
    model: &ModelConfig,
    train: &Dataset,
    val: &Dataset,
    mut store: ParamStore<f32>,
    progress: &mut dyn FnMut(&str),
) -> Result<RunOutput> {
    check_nonempty(train, "training")?;
    let epochs = cfg.epochs_for(crate::model::Phase::Finetune);
    let initial_val_loss = evaluate(&store, model, val, cfg.batch_size, cfg.ce_variant)?.loss;
    progress(&format!("initial val_loss={initial_val_loss:.6}"));
    let mut sgd = Sgd::new(cfg.momentum);
    let mut metrics = Vec::with_capacity(epochs);
    let mut best: Option<(f64, ParamStore<f32>, usize)> = None;
    for epoch in 0..epochs {
        let lr = cosine_lr(epoch, epochs, cfg.lr_init)?;
        let e = epoch as u64;
        let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, e, 2]));
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (bi, idx) in batches(train.len(), cfg.batch_size, Some(mix_seed(&[cfg.seed, e, 1]))).iter().enumerate() {
            let mut images = Vec::with_capacity(idx.len() * train.shape.numel());
            for &i in idx {
                images.extend(augment(train.image(i), train.shape, cfg.augment_policy, &mut aug_rng));
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let loss = train_step(&mut store, &mut sgd, lr, |ctx| {
                let scores = finetune_graph(ctx, model, &images)?;
                ce_loss_tape(&mut ctx.tape, scores, &labels, cfg.ce_variant)
            })?;
            progress(&format!("epoch {epoch} batch {bi}: loss={loss:.6}"));
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let report = evaluate(&store, model, val, cfg.batch_size, cfg.ce_variant)?;
        let row = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            val_loss: report.loss,
            val_top1: Some(report.top1),
        };
        progress(&format!(
            "epoch {epoch}: lr={lr:.6} train_loss={:.6} val_loss={:.6} val_top1={:.4}",
            row.train_loss, report.loss, report.top1
        ));
        metrics.push(row);
        if best.as_ref().map_or(true, |(b, _, _)| report.loss < *b) {
            best = Some((report.loss, store.clone(), epoch));
        }
    }
    let (_, best, best_epoch) = best.ok_or_else(|| Error::Config("no epochs to run".into()))?;
    Ok(RunOutput { best, metrics, best_epoch, initial_val_loss })
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax<T: Real>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy and mean cross-entropy of precomputed scores `[N, C]`.
pub fn score_report(scores: &[f32], classes: usize, labels: &[usize], variant: CeVariant) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::Data("cannot evaluate an empty set".into()));
    }
    let correct = scores.chunks(classes).zip(labels).filter(|(s, &l)| argmax(s) == l).count();
    let loss = ce_loss(scores, classes, labels, variant)?;
    Ok(EvalReport { top1: correct as f64 / labels.len() as f64, loss: f64::from(loss), count: labels.len() })
}

/// Class scores `[N, C]` of a dataset in inference mode, no masking or augmentation.
pub fn predict(store: &ParamStore<f32>, model: &ModelConfig, ds: &Dataset, batch_size: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(ds.len() * model.classes);
    for idx in batches(ds.len(), batch_size, None) {
        let (images, _) = gather_batch(ds, &idx);
        let mut ctx = ForwardCtx::new(store, false);
        let scores = finetune_graph(&mut ctx, model, &images)?;
        out.extend_from_slice(ctx.tape.value(scores));
    }
    Ok(out)
}

pub fn evaluate(store: &ParamStore<f32>, model: &ModelConfig, ds: &Dataset, batch_size: usize, variant: CeVariant) -> Result<EvalReport> {
    check_nonempty(ds, "evaluation")?;
    let scores = predict(store, model, ds, batch_size)?;
    score_report(&scores, model.classes, &ds.labels, variant)
}
