//! Layer-by-layer gradient suite: every trainable tensor of every layer,
//! and every layer input, against central finite differences in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{convmixer_tokens, init_backbone, primary_capsules, vit_tokens, BackboneConfig, BackboneKind};
use crate::capsule::{
    class_head_tape, decoder_tape, pixel_projection_tape, self_route_local_tape, CapsVars, DecoderParams, RoutingVars,
    SelfRoutingParams,
};
use crate::config::{CeVariant, ReconTarget};
use crate::error::{Error, Result};
use crate::masking::{ImageShape, MaskPlan};
use crate::numerics::{relative_error, Tensor, Var};
use crate::params::{ForwardCtx, NormStyle, ParamStore};
use crate::training::{ce_loss_tape, mse_loss_tape};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;
/// Below this magnitude on both sides a coordinate is a structural zero
/// (for example a key bias under softmax shift invariance) and counts as agreeing.
pub const ZERO_FLOOR: f64 = 1e-8;

/// Worst coordinate of one tensor of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub layer: &'static str,
    pub tensor: String,
    pub max_rel_error: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub coords: usize,
}

impl TensorCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Build = dyn Fn(&mut ForwardCtx<'_, f64>) -> Result<Vec<Var>>;

struct Case {
    layer: &'static str,
    store: ParamStore<f64>,
    build: Box<Build>,
    /// The build returns a scalar loss that is used directly.
    is_loss: bool,
}

const GRID: usize = 2;
const PATCH: usize = 2;
const L: usize = GRID * GRID;
const K: usize = 2;
const D: usize = 2;
const E: usize = K * D;
const B: usize = 2;

fn tiny_backbone(kind: BackboneKind, vit_norm: NormStyle) -> BackboneConfig {
    BackboneConfig {
        kind,
        image: ImageShape::new(1, GRID * PATCH, GRID * PATCH),
        patch: PATCH,
        types: K,
        dim: D,
        depth: 1,
        kernel: 3,
        heads: 2,
        mlp_ratio: 2,
        vit_norm,
    }
}

/// Replaces every trainable tensor by `N(0, 0.5²)` values so no layer sits in
/// a degenerate regime; normalization scales are shifted to `1 + N(0, 0.3²)`.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (name, t) in store.iter_mut() {
        if !t.requires_grad() {
            continue;
        }
        let gamma = name.ends_with(".gamma");
        for v in t.data_mut() {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *v = if gamma { 1.0 + 0.3 * z } else { 0.5 * z };
        }
    }
}

fn input(store: &mut ParamStore<f64>, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) {
    store.insert_param(name, Tensor::randn(shape, 1.0, rng));
}

/// Activations strictly inside `(0, 1)` so central differences stay in range.
fn input_acts(store: &mut ParamStore<f64>, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.2..0.8)).collect();
    store.insert_param(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
}

fn caps_input(ctx: &ForwardCtx<'_, f64>, len: usize) -> Result<CapsVars> {
    Ok(CapsVars { poses: ctx.var("input.poses")?, acts: ctx.var("input.acts")?, batch: B, len, types: K, dim: D })
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    init_backbone(&tiny_backbone(BackboneKind::ConvMixer, NormStyle::Batch), &mut s, &mut rng)?;
    s.retain_prefixes(&["backbone.embed.weight", "backbone.embed.bias"]);
    input(&mut s, "input.image", &[B, 1, GRID * PATCH, GRID * PATCH], &mut rng);
    out.push(Case {
        layer: "patch_embed",
        store: s,
        build: Box::new(|ctx| {
            let (img, w, b) = (ctx.var("input.image")?, ctx.var("backbone.embed.weight")?, ctx.var("backbone.embed.bias")?);
            Ok(vec![ctx.tape.patch_embed(img, w, b, PATCH)?])
        }),
        is_loss: false,
    });

    let mut s = ParamStore::new();
    let cm = tiny_backbone(BackboneKind::ConvMixer, NormStyle::Batch);
    init_backbone(&cm, &mut s, &mut rng)?;
    s.retain_prefixes(&["backbone.embed.norm", "backbone.block"]);
    input(&mut s, "input.tokens", &[B, L, E], &mut rng);
    out.push(Case {
        layer: "convmixer_block",
        store: s,
        build: Box::new(move |ctx| {
            // one masked slot per image exercises the visibility-weighted statistics
            let vis = [1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0];
            let t = ctx.var("input.tokens")?;
            Ok(vec![convmixer_tokens(ctx, &cm, t, &vis)?])
        }),
        is_loss: false,
    });

    for (layer, norm) in [("vit_block", NormStyle::Layer), ("vit_block_batchnorm", NormStyle::Batch)] {
        let mut s = ParamStore::new();
        let vit = tiny_backbone(BackboneKind::Vit, norm);
        init_backbone(&vit, &mut s, &mut rng)?;
        s.retain_prefixes(&["backbone.pos", "backbone.block", "backbone.final_norm"]);
        input(&mut s, "input.tokens", &[B, L, E], &mut rng);
        out.push(Case {
            layer,
            store: s,
            build: Box::new(move |ctx| {
                let (t, pos) = (ctx.var("input.tokens")?, ctx.var("backbone.pos")?);
                let t = ctx.tape.add(t, pos)?;
                let flat = ctx.tape.reshape(t, &[B * L, E])?;
                // location 2 of image 0 is dropped, as masking would
                let kept = ctx.tape.gather(flat, &[0, 1, 3, 4, 5, 6], 0)?;
                let kept = ctx.tape.reshape(kept, &[B, L - 1, E])?;
                Ok(vec![vit_tokens(ctx, &vit, kept)?])
            }),
            is_loss: false,
        });
    }

    let mut s = ParamStore::new();
    let cfg = tiny_backbone(BackboneKind::ConvMixer, NormStyle::Batch);
    init_backbone(&cfg, &mut s, &mut rng)?;
    s.retain_prefixes(&["backbone.primary"]);
    input(&mut s, "input.tokens", &[B, L, E], &mut rng);
    out.push(Case {
        layer: "primary_capsules",
        store: s,
        build: Box::new(move |ctx| {
            let t = ctx.var("input.tokens")?;
            let caps = primary_capsules(ctx, &cfg, t)?;
            Ok(vec![caps.poses, caps.acts])
        }),
        is_loss: false,
    });

    let mut s = ParamStore::new();
    SelfRoutingParams::init(K, D, 3, D, &mut rng).insert_into(&mut s, "encoder.layer0");
    input(&mut s, "input.poses", &[B, L, K, D], &mut rng);
    input_acts(&mut s, "input.acts", &[B, L, K], &mut rng);
    out.push(Case {
        layer: "self_route_local",
        store: s,
        build: Box::new(|ctx| {
            let caps = caps_input(ctx, L)?;
            let rv = RoutingVars::from_bound(&ctx.bound, "encoder.layer0")?;
            let (o, gamma) = self_route_local_tape(&mut ctx.tape, &caps, &rv)?;
            Ok(vec![o.poses, o.acts, gamma])
        }),
        is_loss: false,
    });

    let mut s = ParamStore::new();
    DecoderParams::init(L, K, D, K, D, &mut rng).insert_into(&mut s, "decoder");
    input(&mut s, "input.poses", &[B, L, K, D], &mut rng);
    input_acts(&mut s, "input.acts", &[B, L, K], &mut rng);
    out.push(Case {
        layer: "decoder_forward",
        store: s,
        build: Box::new(|ctx| {
            let caps = caps_input(ctx, L)?;
            let dv = RoutingVars::from_bound(&ctx.bound, "decoder")?;
            let (o, gamma) = decoder_tape(&mut ctx.tape, &caps, &dv)?;
            Ok(vec![o.poses, o.acts, gamma])
        }),
        is_loss: false,
    });

    let mut s = ParamStore::new();
    let q = PATCH * PATCH;
    s.insert_param("projection.weight", Tensor::randn(&[K * D, q], 1.0, &mut rng));
    s.insert_param("projection.bias", Tensor::randn(&[q], 1.0, &mut rng));
    input(&mut s, "input.poses", &[B, L, K, D], &mut rng);
    input_acts(&mut s, "input.acts", &[B, L, K], &mut rng);
    out.push(Case {
        layer: "pixel_projection",
        store: s,
        build: Box::new(|ctx| {
            let caps = caps_input(ctx, L)?;
            let (w, b) = (ctx.var("projection.weight")?, ctx.var("projection.bias")?);
            Ok(vec![pixel_projection_tape(&mut ctx.tape, &caps, w, b)?])
        }),
        is_loss: false,
    });

    let mut s = ParamStore::new();
    SelfRoutingParams::init(K, D, 3, 1, &mut rng).insert_into(&mut s, "head");
    input(&mut s, "input.poses", &[B, L, K, D], &mut rng);
    input_acts(&mut s, "input.acts", &[B, L, K], &mut rng);
    out.push(Case {
        layer: "class_head",
        store: s,
        build: Box::new(|ctx| {
            let caps = caps_input(ctx, L)?;
            let rv = RoutingVars::from_bound(&ctx.bound, "head")?;
            Ok(vec![class_head_tape(&mut ctx.tape, &caps, &rv)?])
        }),
        is_loss: false,
    });

    let mut s = ParamStore::new();
    input(&mut s, "input.pred", &[B, L, q], &mut rng);
    let target = Tensor::<f64>::randn(&[B, L, q], 1.0, &mut rng).into_data();
    for (layer, mode) in [("mse_loss", ReconTarget::MaskedOnly), ("mse_loss_all_patches", ReconTarget::AllPatches)] {
        let target = target.clone();
        out.push(Case {
            layer,
            store: s.clone(),
            build: Box::new(move |ctx| {
                let plans = [MaskPlan::new(L, vec![1, 2])?, MaskPlan::new(L, vec![0, 3])?];
                let pred = ctx.var("input.pred")?;
                Ok(vec![mse_loss_tape(&mut ctx.tape, pred, &target, &plans, mode)?])
            }),
            is_loss: true,
        });
    }

    let mut s = ParamStore::new();
    input_acts(&mut s, "input.scores", &[B, 3], &mut rng);
    for (layer, variant) in [("ce_loss", CeVariant::Average), ("ce_loss_softmax", CeVariant::Softmax)] {
        out.push(Case {
            layer,
            store: s.clone(),
            build: Box::new(move |ctx| {
                let scores = ctx.var("input.scores")?;
                Ok(vec![ce_loss_tape(&mut ctx.tape, scores, &[2, 0], variant)?])
            }),
            is_loss: true,
        });
    }

    for case in &mut out {
        if !case.is_loss {
            randomize_non_inputs(&mut case.store, &mut rng);
        }
    }
    Ok(out)
}

fn randomize_non_inputs(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let inputs: Vec<(String, Tensor<f64>)> =
        store.iter().filter(|(n, _)| n.starts_with("input.")).map(|(n, t)| (n.clone(), t.clone())).collect();
    randomize(store, rng);
    for (n, t) in inputs {
        store.insert_param(n, t);
    }
}

/// Scalar objective of a case and, when `grads` is set, its gradient per tensor.
fn objective(case: &Case, store: &ParamStore<f64>, probes: &[Tensor<f64>], grads: bool) -> Result<(f64, Vec<(String, Vec<f64>)>)> {
    let mut ctx = ForwardCtx::new(store, true);
    let outs = (case.build)(&mut ctx)?;
    let loss = if case.is_loss {
        outs[0]
    } else {
        let mut total = None;
        for (&o, p) in outs.iter().zip(probes) {
            let r = ctx.tape.leaf(p);
            let prod = ctx.tape.mul(o, r)?;
            let s = ctx.tape.sum_all(prod)?;
            total = Some(match total {
                None => s,
                Some(t) => ctx.tape.add(t, s)?,
            });
        }
        total.ok_or_else(|| Error::invalid("gradcheck", "layer produced no outputs"))?
    };
    let value = ctx.tape.value(loss)[0];
    if !grads {
        return Ok((value, Vec::new()));
    }
    let g = ctx.tape.backward(loss)?;
    let per = ctx
        .bound
        .iter()
        .map(|(name, &v)| {
            let n = ctx.tape.value(v).len();
            (name.clone(), g.get(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
        })
        .collect();
    Ok((value, per))
}

fn check_case(case: &Case, seed: u64) -> Result<Vec<TensorCheck>> {
    let probes: Vec<Tensor<f64>> = {
        let mut ctx = ForwardCtx::new(&case.store, true);
        let outs = (case.build)(&mut ctx)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37);
        outs.iter().map(|&o| Tensor::randn(ctx.tape.shape(o), 1.0, &mut rng)).collect()
    };
    let (_, analytic) = objective(case, &case.store, &probes, true)?;
    let mut checks = Vec::new();
    for (name, grad) in analytic {
        let mut store = case.store.clone();
        let mut worst = TensorCheck { layer: case.layer, tensor: name.clone(), max_rel_error: 0.0, analytic: 0.0, numeric: 0.0, coords: 0 };
        for (i, &a) in grad.iter().enumerate() {
            let orig = store.get(&name)?.data()[i];
            store.get_mut(&name)?.data_mut()[i] = orig + STEP;
            let plus = objective(case, &store, &probes, false)?.0;
            store.get_mut(&name)?.data_mut()[i] = orig - STEP;
            let minus = objective(case, &store, &probes, false)?.0;
            store.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("{} {name}[{i}] finite difference", case.layer)));
            }
            let err = if a.abs() < ZERO_FLOOR && numeric.abs() < ZERO_FLOOR { 0.0 } else { relative_error(a, numeric) };
            if err > worst.max_rel_error || worst.coords == 0 {
                (worst.max_rel_error, worst.analytic, worst.numeric) = (err, a, numeric);
            }
            worst.coords += 1;
        }
        checks.push(worst);
    }
    Ok(checks)
}

/// Runs every layer case; one entry per (layer, tensor), inputs included.
pub fn run_suite(seed: u64) -> Result<Vec<TensorCheck>> {
    let mut all = Vec::new();
    for case in cases(seed)? {
        all.extend(check_case(&case, seed)?);
    }
    Ok(all)
}

/// Names of the layers covered by [`run_suite`], in order.
pub fn layers(checks: &[TensorCheck]) -> Vec<&'static str> {
    let mut out: Vec<&'static str> = Vec::new();
    for c in checks {
        if out.last() != Some(&c.layer) {
            out.push(c.layer);
        }
    }
    out
}

/// Largest error per layer, in suite order.
pub fn per_layer_max(checks: &[TensorCheck]) -> Vec<(&'static str, f64)> {
    layers(checks)
        .into_iter()
        .map(|l| (l, checks.iter().filter(|c| c.layer == l).map(|c| c.max_rel_error).fold(0.0, f64::max)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{inject_backward_fault, FaultTarget};

    #[test]
    fn suite_passes_and_covers_every_layer() {
        let checks = run_suite(0).unwrap();
        for c in &checks {
            assert!(c.passed(), "{c:?}");
        }
        let layers = layers(&checks);
        for want in ["patch_embed", "convmixer_block", "vit_block", "primary_capsules", "self_route_local", "decoder_forward", "pixel_projection", "class_head", "mse_loss", "ce_loss"] {
            assert!(layers.contains(&want), "{want} missing");
        }
        assert!(checks.iter().any(|c| c.tensor == "backbone.block0.attn.q.weight"));
        assert!(checks.iter().any(|c| c.tensor == "decoder.w_pose"));
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        inject_backward_fault(Some(FaultTarget::Sigmoid));
        let checks = run_suite(0);
        inject_backward_fault(None);
        assert!(checks.unwrap().iter().any(|c| !c.passed()));
    }
}
