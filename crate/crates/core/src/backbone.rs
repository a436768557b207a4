//! Image stems that turn pixels into primary capsules.
//!
//! Both stems start from a patch embedding (kernel = stride), so a token
//! never sees pixels outside its own patch. The ConvMixer stem keeps the full
//! grid and holds masked slots at zero after every spatial operation; the
//! ViT stem drops masked tokens before any mixing.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::capsule::CapsVars;
use crate::error::{Error, Result};
use crate::masking::{ImageShape, MaskPlan};
use crate::numerics::{Real, Tensor, Var};
use crate::params::{insert_norm, ForwardCtx, NormStyle, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    ConvMixer,
    Vit,
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convmixer" => Ok(BackboneKind::ConvMixer),
            "vit" => Ok(BackboneKind::Vit),
            _ => Err(Error::Config(format!("unknown backbone {s:?} (expected convmixer or vit)"))),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::ConvMixer => "convmixer",
            BackboneKind::Vit => "vit",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub image: ImageShape,
    pub patch: usize,
    /// Primary capsule types `K`.
    pub types: usize,
    /// Primary capsule pose dimension `D`.
    pub dim: usize,
    pub depth: usize,
    /// Depthwise kernel side (ConvMixer).
    pub kernel: usize,
    /// Attention heads (ViT).
    pub heads: usize,
    /// Feed-forward expansion (ViT).
    pub mlp_ratio: usize,
    /// Normalization inside ViT blocks.
    pub vit_norm: NormStyle,
}

impl BackboneConfig {
    pub fn embed(&self) -> usize {
        self.types * self.dim
    }

    pub fn grid(&self) -> Result<(usize, usize)> {
        self.image.grid(self.patch)
    }

    pub fn locations(&self) -> Result<usize> {
        let (h, w) = self.grid()?;
        Ok(h * w)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.types == 0 || self.dim == 0 || self.depth == 0 {
            return Err(Error::Config("capsule types, pose dimension and depth must be positive".into()));
        }
        match self.kind {
            BackboneKind::ConvMixer if self.kernel % 2 == 0 => {
                Err(Error::Config(format!("depthwise kernel {} must be odd", self.kernel)))
            }
            BackboneKind::Vit if self.heads == 0 || self.embed() % self.heads != 0 => {
                Err(Error::Config(format!("{} heads do not divide token width {}", self.heads, self.embed())))
            }
            _ => Ok(()),
        }
    }
}

fn linear<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert_param(format!("{prefix}.weight"), Tensor::uniform(&[fan_in, fan_out], bound, rng));
    store.insert_param(format!("{prefix}.bias"), Tensor::uniform(&[fan_out], bound, rng));
}

/// Adds every `backbone.*` tensor (and the primary capsule head) to `store`.
pub fn init_backbone<T: Real, R: Rng + ?Sized>(cfg: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let e = cfg.embed();
    let c = cfg.image.channels;
    let p = cfg.patch;
    let bound = 1.0 / ((c * p * p) as f64).sqrt();
    store.insert_param("backbone.embed.weight", Tensor::uniform(&[e, c, p, p], bound, rng));
    store.insert_param("backbone.embed.bias", Tensor::uniform(&[e], bound, rng));
    match cfg.kind {
        BackboneKind::ConvMixer => {
            insert_norm(store, "backbone.embed.norm", e, NormStyle::Batch);
            let k = cfg.kernel;
            let kb = 1.0 / (k as f64);
            for i in 0..cfg.depth {
                let pre = format!("backbone.block{i}");
                store.insert_param(format!("{pre}.dw.weight"), Tensor::uniform(&[e, k, k], kb, rng));
                store.insert_param(format!("{pre}.dw.bias"), Tensor::uniform(&[e], kb, rng));
                insert_norm(store, &format!("{pre}.dw.norm"), e, NormStyle::Batch);
                linear(store, &format!("{pre}.pw"), e, e, rng);
                insert_norm(store, &format!("{pre}.pw.norm"), e, NormStyle::Batch);
            }
        }
        BackboneKind::Vit => {
            let l = cfg.locations()?;
            store.insert_param("backbone.pos", Tensor::randn(&[l, e], 0.02, rng));
            let hidden = e * cfg.mlp_ratio;
            for i in 0..cfg.depth {
                let pre = format!("backbone.block{i}");
                insert_norm(store, &format!("{pre}.ln1"), e, cfg.vit_norm);
                for proj in ["q", "k", "v", "o"] {
                    linear(store, &format!("{pre}.attn.{proj}"), e, e, rng);
                }
                insert_norm(store, &format!("{pre}.ln2"), e, cfg.vit_norm);
                linear(store, &format!("{pre}.mlp.fc1"), e, hidden, rng);
                linear(store, &format!("{pre}.mlp.fc2"), hidden, e, rng);
            }
            insert_norm(store, "backbone.final_norm", e, cfg.vit_norm);
        }
    }
    linear(store, "backbone.primary", e, cfg.types, rng);
    Ok(())
}

/// Copies `images` (`[B, C, H, W]`, row-major) with every masked patch set to zero.
pub fn zero_masked_pixels<T: Real>(images: &[T], cfg: &BackboneConfig, plans: &[MaskPlan]) -> Result<Vec<T>> {
    let n = cfg.image.numel();
    if images.len() != n * plans.len() {
        return Err(Error::shape("patch_embed", format!("{} pixels for {} images of {:?}", images.len(), plans.len(), cfg.image)));
    }
    let (_, gw) = cfg.grid()?;
    let (h, w, p) = (cfg.image.height, cfg.image.width, cfg.patch);
    let mut out = images.to_vec();
    for (b, plan) in plans.iter().enumerate() {
        for &m in plan.masked() {
            let (py, px) = (m / gw, m % gw);
            for c in 0..cfg.image.channels {
                for y in 0..p {
                    let row = b * n + (c * h + py * p + y) * w + px * p;
                    out[row..row + p].iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
    }
    Ok(out)
}

/// Runs the stem on a batch and returns the tokens of the visible locations,
/// `[B, L_v, E]`, in ascending location order.
pub fn backbone_tokens<T: Real>(ctx: &mut ForwardCtx<'_, T>, cfg: &BackboneConfig, images: &[T], plans: &[MaskPlan]) -> Result<Var> {
    let l = cfg.locations()?;
    if plans.iter().any(|p| p.len() != l) {
        return Err(Error::Mask(format!("plans must cover the {l} patch locations")));
    }
    let b = plans.len();
    let pixels = zero_masked_pixels(images, cfg, plans)?;
    let shape = [b, cfg.image.channels, cfg.image.height, cfg.image.width];
    let img = ctx.tape.constant(&shape, pixels)?;
    let w = ctx.var("backbone.embed.weight")?;
    let bias = ctx.var("backbone.embed.bias")?;
    let tokens = ctx.tape.patch_embed(img, w, bias, cfg.patch)?;
    let rows = crate::capsule::visible_rows(l, plans)?;
    let lv = rows.len() / b;
    let e = cfg.embed();
    match cfg.kind {
        BackboneKind::ConvMixer => {
            let mut vis = vec![T::zero(); b * l];
            rows.iter().for_each(|&r| vis[r] = T::one());
            let full = convmixer_tokens(ctx, cfg, tokens, &vis)?;
            let flat = ctx.tape.reshape(full, &[b * l, e])?;
            let kept = ctx.tape.gather(flat, &rows, 0)?;
            ctx.tape.reshape(kept, &[b, lv, e])
        }
        BackboneKind::Vit => {
            let pos = ctx.var("backbone.pos")?;
            let tokens = ctx.tape.add(tokens, pos)?;
            let flat = ctx.tape.reshape(tokens, &[b * l, e])?;
            let kept = ctx.tape.gather(flat, &rows, 0)?;
            let kept = ctx.tape.reshape(kept, &[b, lv, e])?;
            vit_tokens(ctx, cfg, kept)
        }
    }
}

/// ConvMixer mixing over the full grid. `tokens: [B, L, E]`; `vis[b·L + ℓ]` is 1
/// for visible and 0 for masked slots, which stay exactly zero throughout.
pub fn convmixer_tokens<T: Real>(ctx: &mut ForwardCtx<'_, T>, cfg: &BackboneConfig, tokens: Var, vis: &[T]) -> Result<Var> {
    let (gh, gw) = cfg.grid()?;
    let e = cfg.embed();
    let s = ctx.tape.shape(tokens).to_vec();
    if s.len() != 3 || s[1] != gh * gw || s[2] != e || vis.len() != s[0] * s[1] {
        return Err(Error::shape(
            "convmixer",
            format!("tokens {s:?} on a {gh}x{gw} grid with {} visibility flags", vis.len()),
        ));
    }
    let b = s[0];
    let weights = Some(vis.to_vec());
    let vmask = ctx.tape.constant(&[b, gh * gw, 1], vis.to_vec())?;

    let t = ctx.tape.mul(tokens, vmask)?;
    let t = ctx.tape.gelu(t)?;
    let t = ctx.norm("backbone.embed.norm", t, NormStyle::Batch, weights.clone())?;
    let mut t = ctx.tape.mul(t, vmask)?;
    for i in 0..cfg.depth {
        let pre = format!("backbone.block{i}");
        let grid = ctx.tape.reshape(t, &[b, gh, gw, e])?;
        let (dw, dwb) = (ctx.var(&format!("{pre}.dw.weight"))?, ctx.var(&format!("{pre}.dw.bias"))?);
        let y = ctx.tape.depthwise_conv2d(grid, dw, dwb)?;
        let y = ctx.tape.reshape(y, &[b, gh * gw, e])?;
        let y = ctx.tape.mul(y, vmask)?;
        let y = ctx.tape.gelu(y)?;
        let y = ctx.norm(&format!("{pre}.dw.norm"), y, NormStyle::Batch, weights.clone())?;
        let y = ctx.tape.mul(y, vmask)?;
        let y = ctx.tape.add(y, t)?;
        let (pw, pwb) = (ctx.var(&format!("{pre}.pw.weight"))?, ctx.var(&format!("{pre}.pw.bias"))?);
        let z = ctx.tape.matmul(y, pw)?;
        let z = ctx.tape.add(z, pwb)?;
        let z = ctx.tape.gelu(z)?;
        let z = ctx.norm(&format!("{pre}.pw.norm"), z, NormStyle::Batch, weights.clone())?;
        t = ctx.tape.mul(z, vmask)?;
    }
    Ok(t)
}

fn affine<T: Real>(ctx: &mut ForwardCtx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let w = ctx.var(&format!("{prefix}.weight"))?;
    let b = ctx.var(&format!("{prefix}.bias"))?;
    let y = ctx.tape.matmul(x, w)?;
    ctx.tape.add(y, b)
}

/// Pre-norm transformer blocks over `tokens: [B, N, E]` (positions already added).
pub fn vit_tokens<T: Real>(ctx: &mut ForwardCtx<'_, T>, cfg: &BackboneConfig, tokens: Var) -> Result<Var> {
    let s = ctx.tape.shape(tokens).to_vec();
    let e = cfg.embed();
    if s.len() != 3 || s[2] != e {
        return Err(Error::shape("vit", format!("tokens {s:?} for width {e}")));
    }
    if s[1] == 0 {
        return Err(Error::shape("vit", "empty token sequence"));
    }
    let (b, n, h) = (s[0], s[1], cfg.heads);
    let dh = e / h;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut x = tokens;
    for i in 0..cfg.depth {
        let pre = format!("backbone.block{i}");
        let y = ctx.norm(&format!("{pre}.ln1"), x, cfg.vit_norm, None)?;
        let mut heads = Vec::with_capacity(3);
        for proj in ["q", "k", "v"] {
            let p = affine(ctx, &format!("{pre}.attn.{proj}"), y)?;
            let p = ctx.tape.reshape(p, &[b, n, h, dh])?;
            heads.push(ctx.tape.transpose(p, &[0, 2, 1, 3])?);
        }
        let kt = ctx.tape.transpose(heads[1], &[0, 1, 3, 2])?;
        let scores = ctx.tape.matmul(heads[0], kt)?;
        let scores = ctx.tape.scale(scores, scale)?;
        let att = ctx.tape.softmax(scores, 3)?;
        let mixed = ctx.tape.matmul(att, heads[2])?;
        let mixed = ctx.tape.transpose(mixed, &[0, 2, 1, 3])?;
        let mixed = ctx.tape.reshape(mixed, &[b, n, e])?;
        let out = affine(ctx, &format!("{pre}.attn.o"), mixed)?;
        x = ctx.tape.add(x, out)?;

        let y = ctx.norm(&format!("{pre}.ln2"), x, cfg.vit_norm, None)?;
        let y = affine(ctx, &format!("{pre}.mlp.fc1"), y)?;
        let y = ctx.tape.gelu(y)?;
        let y = affine(ctx, &format!("{pre}.mlp.fc2"), y)?;
        x = ctx.tape.add(x, y)?;
    }
    ctx.norm("backbone.final_norm", x, cfg.vit_norm, None)
}

/// Splits each token into `K` poses of size `D` and scores each capsule with
/// a logistic head: `tokens [B, N, E]` → capsules `[B, N, K, D]`, `[B, N, K]`.
pub fn primary_capsules<T: Real>(ctx: &mut ForwardCtx<'_, T>, cfg: &BackboneConfig, tokens: Var) -> Result<CapsVars> {
    let s = ctx.tape.shape(tokens).to_vec();
    if s.len() != 3 || s[2] != cfg.embed() {
        return Err(Error::shape(
            "primary_capsules",
            format!("tokens {s:?} cannot split into {} capsules of dim {}", cfg.types, cfg.dim),
        ));
    }
    let (b, n) = (s[0], s[1]);
    let poses = ctx.tape.reshape(tokens, &[b, n, cfg.types, cfg.dim])?;
    let logits = affine(ctx, "backbone.primary", tokens)?;
    let acts = ctx.tape.sigmoid(logits)?;
    Ok(CapsVars { poses, acts, batch: b, len: n, types: cfg.types, dim: cfg.dim })
}

// ------------------------------------------------------------------ value-level API

/// Patch embedding of one image `[C, H, W]` → tokens `[L, E]`.
pub fn patch_embed<T: Real>(image: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    let ws = weight.shape();
    if s.len() != 3 || ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::shape("conv_patch_embed", format!("image {s:?}, weight {ws:?}")));
    }
    let mut tape = crate::numerics::Tape::new();
    let img = tape.constant(&[1, s[0], s[1], s[2]], image.data().to_vec())?;
    let (w, b) = (tape.leaf(weight), tape.leaf(bias));
    let out = tape.patch_embed(img, w, b, ws[2])?;
    let os = tape.shape(out).to_vec();
    tape.tensor(out).reshape(&[os[1], os[2]])
}

/// ConvMixer stack on one image's tokens `[L, E]` with visibility flags,
/// evaluated in training mode (batch statistics over the visible tokens).
pub fn convmixer_forward<T: Real>(store: &ParamStore<T>, cfg: &BackboneConfig, tokens: &Tensor<T>, visible: &[bool]) -> Result<Tensor<T>> {
    let mut ctx = ForwardCtx::new(store, true);
    let s = tokens.shape().to_vec();
    let t = ctx.tape.constant(&[1, s[0], s.get(1).copied().unwrap_or(0)], tokens.data().to_vec())?;
    let vis: Vec<T> = visible.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
    let out = convmixer_tokens(&mut ctx, cfg, t, &vis)?;
    ctx.tape.tensor(out).reshape(&s)
}

/// Transformer stack on one image's visible tokens `[L_v, E]`, with the
/// learned positional embedding of each token's original `positions` added first.
pub fn vit_forward<T: Real>(store: &ParamStore<T>, cfg: &BackboneConfig, tokens: &Tensor<T>, positions: &[usize]) -> Result<Tensor<T>> {
    let s = tokens.shape().to_vec();
    if s.len() != 2 || s[0] != positions.len() {
        return Err(Error::shape("vit", format!("tokens {s:?} with {} positions", positions.len())));
    }
    if s[0] == 0 {
        return Err(Error::shape("vit", "empty token sequence"));
    }
    let mut ctx = ForwardCtx::new(store, false);
    let t = ctx.tape.constant(&[1, s[0], s[1]], tokens.data().to_vec())?;
    let pos = ctx.var("backbone.pos")?;
    let pos = ctx.tape.gather(pos, positions, 0)?;
    let t = ctx.tape.add(t, pos)?;
    let out = vit_tokens(&mut ctx, cfg, t)?;
    ctx.tape.tensor(out).reshape(&s)
}

/// Primary capsules of one image's tokens `[L, E]`: poses `[L, K, D]`, activations `[L, K]`.
pub fn to_primary_capsules<T: Real>(
    tokens: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    types: usize,
    grid: (usize, usize),
) -> Result<crate::capsule::CapsuleMap<T>> {
    let s = tokens.shape();
    if s.len() != 2 || types == 0 || s[1] % types != 0 || weight.shape() != [s[1], types] || bias.shape() != [types] {
        return Err(Error::shape(
            "primary_capsules",
            format!("tokens {s:?}, weight {:?}, bias {:?}, {types} types", weight.shape(), bias.shape()),
        ));
    }
    let (l, e) = (s[0], s[1]);
    let mut tape = crate::numerics::Tape::new();
    let t = tape.leaf(tokens);
    let (w, b) = (tape.leaf(weight), tape.leaf(bias));
    let logits = tape.matmul(t, w)?;
    let logits = tape.add(logits, b)?;
    let acts = tape.sigmoid(logits)?;
    crate::capsule::CapsuleMap::new(tokens.clone().reshape(&[l, types, e / types])?, tape.tensor(acts), grid)
}
