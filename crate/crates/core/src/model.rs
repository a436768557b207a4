//! End-to-end graphs: masked-patch pretraining and class-capsule finetuning.
//!
//! Parameter names are grouped by prefix: `backbone.*`, `encoder.*`,
//! `decoder.*`, `projection.*` (pretraining only) and `head.*` (finetuning only).

use rand::Rng;

use crate::backbone::{backbone_tokens, init_backbone, primary_capsules, BackboneConfig};
use crate::capsule::{
    class_head_tape, decoder_tape, encoder_tape, pixel_projection_tape, reinsert_tape, CapsVars, DecoderParams,
    MaskTokenSpec, RoutingVars, SelfRoutingParams,
};
use crate::error::{Error, Result};
use crate::masking::{patchify, MaskPlan, PatchGrid};
use crate::numerics::{Real, Tensor, Var};
use crate::params::{ForwardCtx, ParamStore};

/// Prefixes kept when a pretrained model is handed to finetuning.
pub const SHARED_PREFIXES: [&str; 2] = ["backbone.", "encoder."];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            _ => Err(Error::Config(format!("unknown phase {s:?}"))),
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder_layers: usize,
    pub classes: usize,
    pub mask_token: MaskTokenSpec,
}

impl ModelConfig {
    pub fn types(&self) -> usize {
        self.backbone.types
    }

    pub fn dim(&self) -> usize {
        self.backbone.dim
    }

    /// Pixel values per patch, `P·P·C`.
    pub fn patch_values(&self) -> usize {
        self.backbone.patch * self.backbone.patch * self.backbone.image.channels
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.mask_token.validate()?;
        if self.classes < 2 {
            return Err(Error::Config(format!("{} classes; need at least 2", self.classes)));
        }
        Ok(())
    }
}

fn encoder_prefix(i: usize) -> String {
    format!("encoder.layer{i}")
}

fn init_shared<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    init_backbone(&cfg.backbone, store, rng)?;
    let (k, d) = (cfg.types(), cfg.dim());
    for i in 0..cfg.encoder_layers {
        SelfRoutingParams::init(k, d, k, d, rng).insert_into(store, &encoder_prefix(i));
    }
    Ok(())
}

/// Backbone, encoder, capsule decoder and pixel projection.
pub fn init_pretrain<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    init_shared(cfg, &mut store, rng)?;
    let (k, d) = (cfg.types(), cfg.dim());
    let l = cfg.backbone.locations()?;
    DecoderParams::init(l, k, d, k, d, rng).insert_into(&mut store, "decoder");
    let (fan_in, q) = (k * d, cfg.patch_values());
    let bound = 1.0 / (fan_in as f64).sqrt();
    // decoder activations sum to 1 over all L·K outputs, so the weight is
    // scaled by L·K to give the projection unit gain at initialization
    store.insert_param("projection.weight", Tensor::uniform(&[fan_in, q], bound * (l * k) as f64, rng));
    store.insert_param("projection.bias", Tensor::uniform(&[q], bound, rng));
    Ok(store)
}

/// Backbone, encoder and class-capsule head.
pub fn init_finetune<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    init_shared(cfg, &mut store, rng)?;
    init_head(cfg, &mut store, rng);
    Ok(store)
}

/// Fresh class head on top of an existing backbone and encoder.
pub fn init_head<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) {
    let (k, d) = (cfg.types(), cfg.dim());
    SelfRoutingParams::init(k, d, cfg.classes, 1, rng).insert_into(store, "head");
}

/// Backbone → primary capsules → drop masked locations → encoder.
pub fn encode<T: Real>(ctx: &mut ForwardCtx<'_, T>, cfg: &ModelConfig, images: &[T], plans: &[MaskPlan]) -> Result<CapsVars> {
    let tokens = backbone_tokens(ctx, &cfg.backbone, images, plans)?;
    let primary = primary_capsules(ctx, &cfg.backbone, tokens)?;
    let layers = (0..cfg.encoder_layers)
        .map(|i| RoutingVars::from_bound(&ctx.bound, &encoder_prefix(i)))
        .collect::<Result<Vec<_>>>()?;
    encoder_tape(&mut ctx.tape, &primary, &layers)
}

/// Predicted pixels `[B, L, P·P·C]` for every location of every image.
pub fn pretrain_graph<T: Real, R: Rng + ?Sized>(
    ctx: &mut ForwardCtx<'_, T>,
    cfg: &ModelConfig,
    images: &[T],
    plans: &[MaskPlan],
    rng: &mut R,
) -> Result<Var> {
    let visible = encode(ctx, cfg, images, plans)?;
    let full = reinsert_tape(&mut ctx.tape, &visible, plans, &cfg.mask_token, rng)?;
    let dv = RoutingVars::from_bound(&ctx.bound, "decoder")?;
    let (decoded, _) = decoder_tape(&mut ctx.tape, &full, &dv)?;
    let w = ctx.var("projection.weight")?;
    let b = ctx.var("projection.bias")?;
    pixel_projection_tape(&mut ctx.tape, &decoded, w, b)
}

/// Class scores `[B, C]` with nothing masked.
pub fn finetune_graph<T: Real>(ctx: &mut ForwardCtx<'_, T>, cfg: &ModelConfig, images: &[T]) -> Result<Var> {
    let n = cfg.backbone.image.numel();
    if n == 0 || images.len() % n != 0 {
        return Err(Error::shape("finetune", format!("{} pixels is not a whole number of images", images.len())));
    }
    let l = cfg.backbone.locations()?;
    let plans = vec![MaskPlan::none(l); images.len() / n];
    let encoded = encode(ctx, cfg, images, &plans)?;
    let head = RoutingVars::from_bound(&ctx.bound, "head")?;
    class_head_tape(&mut ctx.tape, &encoded, &head)
}

/// Target patches of a batch, `[B, L, P·P·C]`, in location order.
pub fn patch_targets<T: Real>(cfg: &ModelConfig, images: &[T]) -> Result<Vec<T>> {
    let n = cfg.backbone.image.numel();
    let mut out = Vec::with_capacity(images.len());
    for img in images.chunks(n) {
        out.extend(patchify(img, cfg.backbone.image, cfg.backbone.patch)?.patches);
    }
    Ok(out)
}

/// Inference-mode reconstruction of one image: predictions `[L, P·P·C]` and target patches.
pub fn pretrain_forward<T: Real, R: Rng + ?Sized>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    image: &[T],
    plan: &MaskPlan,
    rng: &mut R,
) -> Result<(Tensor<T>, PatchGrid<T>)> {
    let target = patchify(image, cfg.backbone.image, cfg.backbone.patch)?;
    let mut ctx = ForwardCtx::new(store, false);
    let pred = pretrain_graph(&mut ctx, cfg, image, std::slice::from_ref(plan), rng)?;
    let pred = ctx.tape.tensor(pred).reshape(&[target.len(), target.patch_dim()])?;
    Ok((pred, target))
}

/// Inference-mode class scores of one image.
pub fn finetune_forward<T: Real>(store: &ParamStore<T>, cfg: &ModelConfig, image: &[T]) -> Result<Vec<T>> {
    let mut ctx = ForwardCtx::new(store, false);
    let scores = finetune_graph(&mut ctx, cfg, image)?;
    Ok(ctx.tape.value(scores).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneKind;
    use crate::masking::{sample_mask, ImageShape};
    use crate::params::NormStyle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(kind: BackboneKind) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                kind,
                image: ImageShape::new(1, 8, 8),
                patch: 4,
                types: 2,
                dim: 2,
                depth: 1,
                kernel: 3,
                heads: 2,
                mlp_ratio: 2,
                vit_norm: NormStyle::Layer,
            },
            encoder_layers: 2,
            classes: 3,
            mask_token: MaskTokenSpec::default(),
        }
    }

    #[test]
    fn pretrain_shapes_and_determinism() {
        let cfg = tiny(BackboneKind::ConvMixer);
        let store = init_pretrain::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let image: Vec<f64> = (0..64).map(|i| (i % 7) as f64 / 7.0).collect();
        let plan = sample_mask(4, 0.5, 1).unwrap();
        let (pred, target) = pretrain_forward(&store, &cfg, &image, &plan, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(pred.shape(), &[4, 16]);
        assert_eq!(target.patches.len(), 64);
        let (again, _) = pretrain_forward(&store, &cfg, &image, &plan, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(pred, again);
        assert!(!store.contains("head.w_route"));
    }

    #[test]
    fn finetune_scores_are_in_range() {
        for kind in [BackboneKind::ConvMixer, BackboneKind::Vit] {
            let cfg = tiny(kind);
            let store = init_finetune::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let image = vec![0.5; 64];
            let scores = finetune_forward(&store, &cfg, &image).unwrap();
            assert_eq!(scores.len(), 3);
            assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
            assert!(!store.contains("decoder.w_route"));
        }
    }

    #[test]
    fn zero_routing_head_is_uniform() {
        let cfg = tiny(BackboneKind::ConvMixer);
        let mut store = init_finetune::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for name in ["head.w_route", "head.b_route"] {
            store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let scores = finetune_forward(&store, &cfg, &[0.25; 64]).unwrap();
        assert!(scores.iter().all(|s| (s - 1.0 / 3.0).abs() < 1e-7));
    }
}
