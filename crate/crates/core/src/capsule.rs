//! Capsule maps and self-routing layers.
//!
//! A capsule map is a flat sequence of `L` locations, each holding `K`
//! capsules with a `D`-dimensional pose and an activation in `[0, 1]`.
//!
//! All routing in this module shares one rule. For input capsules `i`
//! (pose `uᵢ`, activation `aᵢ`) and output capsules `j`:
//!
//! ```text
//! γᵢ· = softmax_j(W_routeᵢᵀ uᵢ + b_route)
//! û_{j|i} = W_poseᵢⱼ uᵢ + b_pose
//! a_j = Σᵢ γᵢⱼ aᵢ / (Σᵢ aᵢ + ε)
//! u_j = Σᵢ γᵢⱼ aᵢ û_{j|i} / (Σᵢ γᵢⱼ aᵢ + ε)
//! ```
//!
//! The encoder applies it independently at every location (1×1 routing);
//! the decoder applies it once over all `L·K` inputs and `L·M` outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

/// Guard added to every routing denominator.
pub const ROUTING_EPS: f64 = 1e-8;

/// Standard deviation of the Gaussian used for routing weights at init.
pub const ROUTING_INIT_STD: f64 = 0.02;

/// Std of the pose transforms: `1/√D`, so each vote keeps the scale of its input pose.
pub fn pose_init_std(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleMap<T: Real = f32> {
    poses: Tensor<T>,
    activations: Tensor<T>,
    grid: (usize, usize),
}

impl<T: Real> CapsuleMap<T> {
    /// `poses: [L, K, D]`, `activations: [L, K]`, with `L = H·W`.
    pub fn new(poses: Tensor<T>, activations: Tensor<T>, grid: (usize, usize)) -> Result<Self> {
        let ps = poses.shape();
        let ac = activations.shape();
        if ps.len() != 3 || ac.len() != 2 || ps[..2] != ac[..] {
            return Err(Error::shape("capsule_map", format!("poses {ps:?}, activations {ac:?}")));
        }
        if grid.0 * grid.1 != ps[0] {
            return Err(Error::shape("capsule_map", format!("grid {grid:?} does not cover {} locations", ps[0])));
        }
        if let Some(a) = activations.data().iter().find(|a| !(**a >= T::zero() && **a <= T::one())) {
            return Err(Error::invalid("capsule_map", format!("activation {a} outside [0, 1]")));
        }
        Ok(CapsuleMap { poses, activations, grid })
    }

    pub fn len(&self) -> usize {
        self.poses.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn types(&self) -> usize {
        self.poses.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.poses.shape()[2]
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn poses(&self) -> &Tensor<T> {
        &self.poses
    }

    pub fn activations(&self) -> &Tensor<T> {
        &self.activations
    }

    pub fn pose(&self, loc: usize, ty: usize) -> &[T] {
        let d = self.dim();
        let at = (loc * self.types() + ty) * d;
        &self.poses.data()[at..at + d]
    }

    pub fn activation(&self, loc: usize, ty: usize) -> T {
        self.activations.data()[loc * self.types() + ty]
    }

    /// The single location `loc` as a 1×1 map.
    pub fn location(&self, loc: usize) -> Result<Self> {
        self.select(&[loc], (1, 1))
    }

    fn select(&self, locs: &[usize], grid: (usize, usize)) -> Result<Self> {
        let (k, d) = (self.types(), self.dim());
        let mut poses = Vec::with_capacity(locs.len() * k * d);
        let mut acts = Vec::with_capacity(locs.len() * k);
        for &l in locs {
            if l >= self.len() {
                return Err(Error::Mask(format!("location {l} out of range {}", self.len())));
            }
            poses.extend_from_slice(&self.poses.data()[l * k * d..(l + 1) * k * d]);
            acts.extend_from_slice(&self.activations.data()[l * k..(l + 1) * k]);
        }
        CapsuleMap::new(Tensor::new(vec![locs.len(), k, d], poses)?, Tensor::new(vec![locs.len(), k], acts)?, grid)
    }

    /// Records the map on a tape as a batch of one.
    pub fn to_vars(&self, tape: &mut Tape<T>) -> CapsVars {
        let poses = tape.leaf(&self.poses.clone().reshape(&[1, self.len(), self.types(), self.dim()]).expect("same numel"));
        let acts = tape.leaf(&self.activations.clone().reshape(&[1, self.len(), self.types()]).expect("same numel"));
        CapsVars { poses, acts, batch: 1, len: self.len(), types: self.types(), dim: self.dim() }
    }

    /// Reads batch element `b` of a tape capsule map back into a value.
    pub fn from_vars(tape: &Tape<T>, caps: &CapsVars, b: usize, grid: (usize, usize)) -> Result<Self> {
        let per_p = caps.len * caps.types * caps.dim;
        let per_a = caps.len * caps.types;
        let p = tape.value(caps.poses)[b * per_p..(b + 1) * per_p].to_vec();
        let a = tape.value(caps.acts)[b * per_a..(b + 1) * per_a].to_vec();
        CapsuleMap::new(
            Tensor::new(vec![caps.len, caps.types, caps.dim], p)?,
            Tensor::new(vec![caps.len, caps.types], a)?,
            grid,
        )
    }
}

/// A batch of capsule maps living on a tape:
/// `poses: [B, L, K, D]`, `acts: [B, L, K]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CapsVars {
    pub poses: Var,
    pub acts: Var,
    pub batch: usize,
    pub len: usize,
    pub types: usize,
    pub dim: usize,
}

/// Coupling coefficients of one routing call, `[L, K, M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingCoefficients<T: Real = f32> {
    pub gamma: Tensor<T>,
}

/// Per-location routing parameters for `K` input and `M` output types.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfRoutingParams<T: Real = f32> {
    /// `[K, D, M]`
    pub w_route: Tensor<T>,
    /// `[K, M]`
    pub b_route: Tensor<T>,
    /// `[K, M, D, D_out]`
    pub w_pose: Tensor<T>,
    /// `[K, M, D_out]`
    pub b_pose: Tensor<T>,
}

impl<T: Real> SelfRoutingParams<T> {
    pub fn init<R: Rng + ?Sized>(k: usize, d: usize, m: usize, d_out: usize, rng: &mut R) -> Self {
        SelfRoutingParams {
            w_route: Tensor::randn(&[k, d, m], ROUTING_INIT_STD, rng),
            b_route: Tensor::zeros(&[k, m]),
            w_pose: Tensor::randn(&[k, m, d, d_out], pose_init_std(d), rng),
            b_pose: Tensor::zeros(&[k, m, d_out]),
        }
    }

    pub fn zeros(k: usize, d: usize, m: usize, d_out: usize) -> Self {
        SelfRoutingParams {
            w_route: Tensor::zeros(&[k, d, m]),
            b_route: Tensor::zeros(&[k, m]),
            w_pose: Tensor::zeros(&[k, m, d, d_out]),
            b_pose: Tensor::zeros(&[k, m, d_out]),
        }
    }

    /// `(K, D, M, D_out)`, validated for consistency.
    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        let wr = self.w_route.shape();
        let wp = self.w_pose.shape();
        if wr.len() != 3 || wp.len() != 4 {
            return Err(Error::shape("self_route_local", format!("w_route {wr:?}, w_pose {wp:?}")));
        }
        let (k, d, m, d_out) = (wr[0], wr[1], wr[2], wp[3]);
        if wp[..3] != [k, m, d] || self.b_route.shape() != [k, m] || self.b_pose.shape() != [k, m, d_out] {
            return Err(Error::shape(
                "self_route_local",
                format!(
                    "w_route {wr:?}, b_route {:?}, w_pose {wp:?}, b_pose {:?}",
                    self.b_route.shape(),
                    self.b_pose.shape()
                ),
            ));
        }
        Ok((k, d, m, d_out))
    }

    pub fn insert_into(self, store: &mut ParamStore<T>, prefix: &str) {
        store.insert_param(format!("{prefix}.w_route"), self.w_route);
        store.insert_param(format!("{prefix}.b_route"), self.b_route);
        store.insert_param(format!("{prefix}.w_pose"), self.w_pose);
        store.insert_param(format!("{prefix}.b_pose"), self.b_pose);
    }

    pub fn from_store(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(SelfRoutingParams {
            w_route: store.get(&format!("{prefix}.w_route"))?.clone(),
            b_route: store.get(&format!("{prefix}.b_route"))?.clone(),
            w_pose: store.get(&format!("{prefix}.w_pose"))?.clone(),
            b_pose: store.get(&format!("{prefix}.b_pose"))?.clone(),
        })
    }

    /// Records the tensors as constants (value-level evaluation).
    pub fn record(&self, tape: &mut Tape<T>) -> RoutingVars {
        RoutingVars {
            w_route: tape.leaf(&self.w_route),
            b_route: tape.leaf(&self.b_route),
            w_pose: tape.leaf(&self.w_pose),
            b_pose: tape.leaf(&self.b_pose),
        }
    }
}

/// Fully-connected capsule decoder parameters over `L` locations.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T: Real = f32> {
    /// `[L·K, D, L·M]`
    pub w_route: Tensor<T>,
    /// `[L·M]`
    pub b_route: Tensor<T>,
    /// `[L·K, L·M, D, D_out]`
    pub w_pose: Tensor<T>,
    /// `[L·M, D_out]`
    pub b_pose: Tensor<T>,
}

impl<T: Real> DecoderParams<T> {
    pub fn init<R: Rng + ?Sized>(l: usize, k: usize, d: usize, m: usize, d_out: usize, rng: &mut R) -> Self {
        DecoderParams {
            w_route: Tensor::randn(&[l * k, d, l * m], ROUTING_INIT_STD, rng),
            b_route: Tensor::zeros(&[l * m]),
            w_pose: Tensor::randn(&[l * k, l * m, d, d_out], pose_init_std(d), rng),
            b_pose: Tensor::zeros(&[l * m, d_out]),
        }
    }

    /// `L·K·D·L·M + L·M + L·K·L·M·D·D_out + L·M·D_out`; quadratic in `L`.
    pub fn param_count(l: usize, k: usize, d: usize, m: usize, d_out: usize) -> usize {
        l * k * d * l * m + l * m + l * k * l * m * d * d_out + l * m * d_out
    }

    pub fn insert_into(self, store: &mut ParamStore<T>, prefix: &str) {
        store.insert_param(format!("{prefix}.w_route"), self.w_route);
        store.insert_param(format!("{prefix}.b_route"), self.b_route);
        store.insert_param(format!("{prefix}.w_pose"), self.w_pose);
        store.insert_param(format!("{prefix}.b_pose"), self.b_pose);
    }

    pub fn record(&self, tape: &mut Tape<T>) -> RoutingVars {
        RoutingVars {
            w_route: tape.leaf(&self.w_route),
            b_route: tape.leaf(&self.b_route),
            w_pose: tape.leaf(&self.w_pose),
            b_pose: tape.leaf(&self.b_pose),
        }
    }
}

/// Tape handles for one routing layer's four tensors.
#[derive(Clone, Copy, Debug)]
pub struct RoutingVars {
    pub w_route: Var,
    pub b_route: Var,
    pub w_pose: Var,
    pub b_pose: Var,
}

impl RoutingVars {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(RoutingVars {
            w_route: bound.var(&format!("{prefix}.w_route"))?,
            b_route: bound.var(&format!("{prefix}.b_route"))?,
            w_pose: bound.var(&format!("{prefix}.w_pose"))?,
            b_pose: bound.var(&format!("{prefix}.b_pose"))?,
        })
    }
}

/// Placeholder capsule inserted at masked locations before decoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskTokenSpec {
    /// Standard deviation of the Gaussian pose noise.
    pub sigma: f64,
    pub activation_fill: f64,
    /// Draw fresh noise for every forward pass; otherwise one fixed token is reused.
    pub resample_each_forward: bool,
}

impl Default for MaskTokenSpec {
    fn default() -> Self {
        MaskTokenSpec { sigma: 0.02, activation_fill: 0.0, resample_each_forward: true }
    }
}

impl MaskTokenSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.activation_fill) {
            return Err(Error::invalid("mask_token", format!("activation_fill {} outside [0, 1]", self.activation_fill)));
        }
        if self.sigma < 0.0 || (self.resample_each_forward && self.sigma <= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid("mask_token", format!("sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }
}

/// Output of a routing call on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Routed {
    /// `[G, M, D_out]`
    pub poses: Var,
    /// `[G, M]`
    pub acts: Var,
    /// `[N, G, M]`: coupling of input `n` in group `g` to output `m`.
    pub gamma: Var,
}

/// The routing rule over `G` independent groups of `N` input capsules.
///
/// `u: [G, N, D]`, `a: [G, N]`; `b_route` broadcasts to `[N, G, M]` and
/// `b_pose` to `[N, G, M, D_out]`.
fn route_core<T: Real>(tape: &mut Tape<T>, u: Var, a: Var, rv: &RoutingVars, b_route: Var, b_pose: Var) -> Result<Routed> {
    let us = tape.shape(u).to_vec();
    let (g, n, d) = (us[0], us[1], us[2]);
    let wr = tape.shape(rv.w_route).to_vec();
    let wp = tape.shape(rv.w_pose).to_vec();
    if wr.len() != 3 || wr[0] != n || wr[1] != d || wp.len() != 4 || wp[0] != n || wp[1] != wr[2] || wp[2] != d {
        return Err(Error::shape(
            "self_route_local",
            format!("inputs [{g}, {n}, {d}] with w_route {wr:?} and w_pose {wp:?}"),
        ));
    }
    let (m, d_out) = (wr[2], wp[3]);
    let eps = T::lit(ROUTING_EPS);

    let ut = tape.transpose(u, &[1, 0, 2])?;
    let logits = tape.matmul(ut, rv.w_route)?;
    let logits = tape.add(logits, b_route)?;
    let gamma = tape.softmax(logits, 2)?;

    let wpt = tape.transpose(rv.w_pose, &[0, 2, 1, 3])?;
    let wpt = tape.reshape(wpt, &[n, d, m * d_out])?;
    let votes = tape.matmul(ut, wpt)?;
    let votes = tape.reshape(votes, &[n, g, m, d_out])?;
    let votes = tape.add(votes, b_pose)?;

    let at = tape.transpose(a, &[1, 0])?;
    let at = tape.reshape(at, &[n, g, 1])?;
    let weight = tape.mul(gamma, at)?;
    let num = tape.sum(weight, &[0])?;
    let den = tape.sum(at, &[0])?;
    let den = tape.add_scalar(den, eps)?;
    let acts = tape.div(num, den)?;

    let w4 = tape.reshape(weight, &[n, g, m, 1])?;
    let weighted = tape.mul(votes, w4)?;
    let pose_num = tape.sum(weighted, &[0])?;
    let pose_den = tape.reshape(num, &[g, m, 1])?;
    let pose_den = tape.add_scalar(pose_den, eps)?;
    let poses = tape.div(pose_num, pose_den)?;
    Ok(Routed { poses, acts, gamma })
}

fn check_finite<T: Real>(tape: &Tape<T>, v: Var, what: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_unit_interval<T: Real>(tape: &Tape<T>, v: Var, what: &str) -> Result<()> {
    match tape.value(v).iter().find(|x| !(**x >= T::zero() && **x <= T::one())) {
        None => Ok(()),
        Some(x) => Err(Error::NonFinite(format!("{what}: activation {x} left [0, 1]"))),
    }
}

/// 1×1 self-routing: every location routes only to capsules at the same location.
pub fn self_route_local_tape<T: Real>(tape: &mut Tape<T>, caps: &CapsVars, rv: &RoutingVars) -> Result<(CapsVars, Var)> {
    check_finite(tape, caps.poses, "self_route_local poses")?;
    let br = tape.shape(rv.b_route).to_vec();
    let bp = tape.shape(rv.b_pose).to_vec();
    if br.len() != 2 || bp.len() != 3 {
        return Err(Error::shape("self_route_local", format!("b_route {br:?}, b_pose {bp:?}")));
    }
    let groups = caps.batch * caps.len;
    let u = tape.reshape(caps.poses, &[groups, caps.types, caps.dim])?;
    let a = tape.reshape(caps.acts, &[groups, caps.types])?;
    let b_route = tape.reshape(rv.b_route, &[br[0], 1, br[1]])?;
    let b_pose = tape.reshape(rv.b_pose, &[bp[0], 1, bp[1], bp[2]])?;
    let r = route_core(tape, u, a, rv, b_route, b_pose)?;
    check_unit_interval(tape, r.acts, "self_route_local")?;
    let ps = tape.shape(r.poses).to_vec();
    let (m, d_out) = (ps[1], ps[2]);
    let poses = tape.reshape(r.poses, &[caps.batch, caps.len, m, d_out])?;
    let acts = tape.reshape(r.acts, &[caps.batch, caps.len, m])?;
    let out = CapsVars { poses, acts, batch: caps.batch, len: caps.len, types: m, dim: d_out };
    Ok((out, r.gamma))
}

/// A stack of 1×1 self-routing layers.
pub fn encoder_tape<T: Real>(tape: &mut Tape<T>, caps: &CapsVars, layers: &[RoutingVars]) -> Result<CapsVars> {
    let mut cur = *caps;
    for rv in layers {
        cur = self_route_local_tape(tape, &cur, rv)?.0;
    }
    Ok(cur)
}

/// Routes all `L·K` input capsules of each image to all `L·M` output capsules.
pub fn decoder_tape<T: Real>(tape: &mut Tape<T>, caps: &CapsVars, dv: &RoutingVars) -> Result<(CapsVars, Var)> {
    check_finite(tape, caps.poses, "decoder poses")?;
    let (l, k) = (caps.len, caps.types);
    let wr = tape.shape(dv.w_route).to_vec();
    if wr.len() != 3 || wr[0] != l * k || wr[2] % l != 0 {
        return Err(Error::shape("decoder", format!("{l} locations x {k} types against w_route {wr:?}")));
    }
    let m = wr[2] / l;
    let br = tape.shape(dv.b_route).to_vec();
    let bp = tape.shape(dv.b_pose).to_vec();
    if br != [l * m] || bp.len() != 2 || bp[0] != l * m {
        return Err(Error::shape("decoder", format!("b_route {br:?}, b_pose {bp:?} for {l} locations")));
    }
    let u = tape.reshape(caps.poses, &[caps.batch, l * k, caps.dim])?;
    let a = tape.reshape(caps.acts, &[caps.batch, l * k])?;
    let b_route = tape.reshape(dv.b_route, &[1, 1, l * m])?;
    let b_pose = tape.reshape(dv.b_pose, &[1, 1, l * m, bp[1]])?;
    let r = route_core(tape, u, a, dv, b_route, b_pose)?;
    check_unit_interval(tape, r.acts, "decoder")?;
    let poses = tape.reshape(r.poses, &[caps.batch, l, m, bp[1]])?;
    let acts = tape.reshape(r.acts, &[caps.batch, l, m])?;
    Ok((CapsVars { poses, acts, batch: caps.batch, len: l, types: m, dim: bp[1] }, r.gamma))
}

/// Drops the masked locations of each image. Every plan must mask the same number.
pub fn mask_select_tape<T: Real>(tape: &mut Tape<T>, caps: &CapsVars, plans: &[MaskPlan]) -> Result<CapsVars> {
    if plans.len() != caps.batch {
        return Err(Error::Mask(format!("{} plans for a batch of {}", plans.len(), caps.batch)));
    }
    let rows = visible_rows(caps.len, plans)?;
    let lv = rows.len() / caps.batch;
    let p = tape.reshape(caps.poses, &[caps.batch * caps.len, caps.types, caps.dim])?;
    let a = tape.reshape(caps.acts, &[caps.batch * caps.len, caps.types])?;
    let p = tape.gather(p, &rows, 0)?;
    let a = tape.gather(a, &rows, 0)?;
    let poses = tape.reshape(p, &[caps.batch, lv, caps.types, caps.dim])?;
    let acts = tape.reshape(a, &[caps.batch, lv, caps.types])?;
    Ok(CapsVars { poses, acts, len: lv, ..*caps })
}

/// Flat row indices `b·L + ℓ` of the visible locations of every image.
pub fn visible_rows(len: usize, plans: &[MaskPlan]) -> Result<Vec<usize>> {
    let lv = plans.first().ok_or_else(|| Error::Mask("empty batch".into()))?.num_visible();
    if lv == 0 {
        return Err(Error::Mask("every location is masked; nothing to encode".into()));
    }
    let mut rows = Vec::with_capacity(plans.len() * lv);
    for (b, plan) in plans.iter().enumerate() {
        if plan.len() != len {
            return Err(Error::Mask(format!("plan covers {} locations, map has {len}", plan.len())));
        }
        if plan.num_visible() != lv {
            return Err(Error::Mask("plans in one batch must mask the same number of locations".into()));
        }
        rows.extend(plan.visible().into_iter().map(|v| b * len + v));
    }
    Ok(rows)
}

/// Restores the full location count: visible capsules return to their
/// original indices, masked slots receive the placeholder token.
pub fn reinsert_tape<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    visible: &CapsVars,
    plans: &[MaskPlan],
    spec: &MaskTokenSpec,
    rng: &mut R,
) -> Result<CapsVars> {
    spec.validate()?;
    let full_len = plans.first().map(MaskPlan::len).ok_or_else(|| Error::Mask("empty batch".into()))?;
    if plans.iter().any(|p| p.num_visible() != visible.len || p.len() != full_len) {
        return Err(Error::shape("reinsert_masked", format!("{} visible locations do not match the plans", visible.len)));
    }
    let (k, d) = (visible.types, visible.dim);
    let mut rows = Vec::with_capacity(visible.batch * visible.len);
    for (b, plan) in plans.iter().enumerate() {
        rows.extend(plan.visible().into_iter().map(|v| b * full_len + v));
    }
    let noise = Normal::new(0.0, spec.sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let fixed_token: Vec<T> = if spec.resample_each_forward {
        vec![]
    } else {
        let mut fixed = ChaCha8Rng::seed_from_u64(0x5EED_CA95);
        (0..k * d).map(|_| T::lit(noise.sample(&mut fixed))).collect()
    };
    let mut base_p = vec![T::zero(); visible.batch * full_len * k * d];
    let mut base_a = vec![T::zero(); visible.batch * full_len * k];
    let fill = T::lit(spec.activation_fill);
    for (b, plan) in plans.iter().enumerate() {
        for &mi in plan.masked() {
            let row = b * full_len + mi;
            let dst = &mut base_p[row * k * d..(row + 1) * k * d];
            if spec.resample_each_forward {
                dst.iter_mut().for_each(|x| *x = T::lit(noise.sample(rng)));
            } else {
                dst.copy_from_slice(&fixed_token);
            }
            base_a[row * k..(row + 1) * k].iter_mut().for_each(|x| *x = fill);
        }
    }
    let base_p = tape.constant(&[visible.batch * full_len, k, d], base_p)?;
    let base_a = tape.constant(&[visible.batch * full_len, k], base_a)?;
    let src_p = tape.reshape(visible.poses, &[visible.batch * visible.len, k, d])?;
    let src_a = tape.reshape(visible.acts, &[visible.batch * visible.len, k])?;
    let p = tape.scatter(base_p, src_p, &rows, 0)?;
    let a = tape.scatter(base_a, src_a, &rows, 0)?;
    let poses = tape.reshape(p, &[visible.batch, full_len, k, d])?;
    let acts = tape.reshape(a, &[visible.batch, full_len, k])?;
    Ok(CapsVars { poses, acts, len: full_len, ..*visible })
}

/// Shared affine map from the activation-scaled poses at each location to
/// pixel values: `[B, L, M·D_out] · W_px + b_px` → `[B, L, Q]`.
pub fn pixel_projection_tape<T: Real>(tape: &mut Tape<T>, caps: &CapsVars, w_px: Var, b_px: Var) -> Result<Var> {
    let md = caps.types * caps.dim;
    let ws = tape.shape(w_px).to_vec();
    if ws.len() != 2 || ws[0] != md || tape.shape(b_px) != [ws[1]] {
        return Err(Error::shape(
            "pixel_projection",
            format!("{} types x {} dims against W_px {ws:?}, b_px {:?}", caps.types, caps.dim, tape.shape(b_px)),
        ));
    }
    let a = tape.reshape(caps.acts, &[caps.batch, caps.len, caps.types, 1])?;
    let scaled = tape.mul(caps.poses, a)?;
    let flat = tape.reshape(scaled, &[caps.batch, caps.len, md])?;
    let out = tape.matmul(flat, w_px)?;
    tape.add(out, b_px)
}

/// Routes to `C` class capsules at every location and averages their
/// activations over locations: `[B, C]`.
pub fn class_head_tape<T: Real>(tape: &mut Tape<T>, caps: &CapsVars, rv: &RoutingVars) -> Result<Var> {
    let (cls, _) = self_route_local_tape(tape, caps, rv)?;
    tape.mean(cls.acts, &[1])
}

// ------------------------------------------------------------------ value-level API

/// One 1×1 routing layer applied to a single map.
pub fn self_route_local<T: Real>(caps: &CapsuleMap<T>, params: &SelfRoutingParams<T>) -> Result<CapsuleMap<T>> {
    Ok(self_route_local_with_coupling(caps, params)?.0)
}

pub fn self_route_local_with_coupling<T: Real>(
    caps: &CapsuleMap<T>,
    params: &SelfRoutingParams<T>,
) -> Result<(CapsuleMap<T>, CouplingCoefficients<T>)> {
    let (k, d, _, _) = params.dims()?;
    if caps.types() != k || caps.dim() != d {
        return Err(Error::shape(
            "self_route_local",
            format!("map has {} types of dim {}, params expect {k} of dim {d}", caps.types(), caps.dim()),
        ));
    }
    let mut tape = Tape::new();
    let cv = caps.to_vars(&mut tape);
    let rv = params.record(&mut tape);
    let (out, gamma) = self_route_local_tape(&mut tape, &cv, &rv)?;
    // gamma is [K, L, M]; present it per location
    let gt = tape.transpose(gamma, &[1, 0, 2])?;
    let gamma = tape.tensor(gt);
    Ok((CapsuleMap::from_vars(&tape, &out, 0, caps.grid())?, CouplingCoefficients { gamma }))
}

pub fn encoder_forward<T: Real>(primary: &CapsuleMap<T>, layers: &[SelfRoutingParams<T>]) -> Result<CapsuleMap<T>> {
    let mut cur = primary.clone();
    for (i, layer) in layers.iter().enumerate() {
        let (k, _, _, _) = layer.dims()?;
        if k != cur.types() {
            return Err(Error::shape("encoder", format!("layer {i} expects {k} input types, got {}", cur.types())));
        }
        cur = self_route_local(&cur, layer)?;
    }
    Ok(cur)
}

/// Keeps the unmasked locations in ascending index order; the result is a `1 × L_v` map.
pub fn mask_select<T: Real>(caps: &CapsuleMap<T>, plan: &MaskPlan) -> Result<CapsuleMap<T>> {
    if plan.len() != caps.len() {
        return Err(Error::Mask(format!("plan covers {} locations, map has {}", plan.len(), caps.len())));
    }
    let vis = plan.visible();
    if vis.is_empty() {
        return Err(Error::Mask("every location is masked; nothing to encode".into()));
    }
    if vis.len() == caps.len() {
        return Ok(caps.clone());
    }
    caps.select(&vis, (1, vis.len()))
}

/// Inverse of [`mask_select`] with placeholder tokens in the masked slots.
pub fn reinsert_masked<T: Real, R: Rng + ?Sized>(
    visible: &CapsuleMap<T>,
    plan: &MaskPlan,
    spec: &MaskTokenSpec,
    grid: (usize, usize),
    rng: &mut R,
) -> Result<CapsuleMap<T>> {
    if visible.len() + plan.num_masked() != plan.len() || grid.0 * grid.1 != plan.len() {
        return Err(Error::shape(
            "reinsert_masked",
            format!("{} visible + {} masked vs plan of {} on grid {grid:?}", visible.len(), plan.num_masked(), plan.len()),
        ));
    }
    let mut tape = Tape::new();
    let cv = visible.to_vars(&mut tape);
    let out = reinsert_tape(&mut tape, &cv, std::slice::from_ref(plan), spec, rng)?;
    CapsuleMap::from_vars(&tape, &out, 0, grid)
}

pub fn decoder_forward<T: Real>(full: &CapsuleMap<T>, params: &DecoderParams<T>) -> Result<CapsuleMap<T>> {
    let mut tape = Tape::new();
    let cv = full.to_vars(&mut tape);
    let dv = params.record(&mut tape);
    let (out, _) = decoder_tape(&mut tape, &cv, &dv)?;
    CapsuleMap::from_vars(&tape, &out, 0, full.grid())
}

/// Pixel values `[L, Q]` for every location of a decoded map.
pub fn pixel_projection<T: Real>(decoded: &CapsuleMap<T>, w_px: &Tensor<T>, b_px: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let cv = decoded.to_vars(&mut tape);
    let (w, b) = (tape.leaf(w_px), tape.leaf(b_px));
    let out = pixel_projection_tape(&mut tape, &cv, w, b)?;
    let q = tape.shape(out)[2];
    tape.tensor(out).reshape(&[decoded.len(), q])
}

/// Class scores `ŷ ∈ [0, 1]^C`.
pub fn class_head<T: Real>(encoded: &CapsuleMap<T>, params: &SelfRoutingParams<T>) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let cv = encoded.to_vars(&mut tape);
    let rv = params.record(&mut tape);
    let out = class_head_tape(&mut tape, &cv, &rv)?;
    Ok(tape.value(out).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn single_input_zero_logits_spreads_evenly() {
        let caps = CapsuleMap::new(t(&[1, 1, 2], &[0.3, -0.7]), t(&[1, 1], &[1.0]), (1, 1)).unwrap();
        let params = SelfRoutingParams::<f64>::zeros(1, 2, 4, 2);
        let (out, coupling) = self_route_local_with_coupling(&caps, &params).unwrap();
        for j in 0..4 {
            assert!(close(coupling.gamma.data()[j], 0.25, 1e-12));
            assert!(close(out.activation(0, j), 0.25, 1e-6));
        }
    }

    #[test]
    fn silent_inputs_give_silent_outputs() {
        let caps = CapsuleMap::new(t(&[2, 3, 2], &[1.0; 12]), t(&[2, 3], &[0.0; 6]), (1, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = self_route_local(&caps, &SelfRoutingParams::init(3, 2, 4, 2, &mut rng)).unwrap();
        assert!(out.activations().data().iter().all(|&a| a == 0.0));
        assert!(out.poses().all_finite());
    }

    #[test]
    fn two_capsule_fixture_matches_hand_evaluation() {
        // input 0 has logits (2u, 0); input 1 has zero logits; every vote is u itself
        let caps = CapsuleMap::new(t(&[1, 2, 1], &[1.0, -1.0]), t(&[1, 2], &[1.0, 0.5]), (1, 1)).unwrap();
        let params = SelfRoutingParams {
            w_route: t(&[2, 1, 2], &[2.0, 0.0, 0.0, 0.0]),
            b_route: Tensor::zeros(&[2, 2]),
            w_pose: Tensor::ones(&[2, 2, 1, 1]),
            b_pose: Tensor::zeros(&[2, 2, 1]),
        };
        let out = self_route_local(&caps, &params).unwrap();
        assert!(close(out.activation(0, 0), 0.7538647, 1e-6));
        assert!(close(out.activation(0, 1), 0.2461353, 1e-6));
        assert!(close(out.pose(0, 0)[0], 0.5578340, 1e-6));
        assert!(close(out.pose(0, 1)[0], -0.3542688, 1e-6));
    }

    #[test]
    fn decoder_fixture_matches_hand_evaluation() {
        // input 1 has logits (ln 3, 0) so its coupling is (3/4, 1/4); input 0 couples evenly;
        // every vote is u except input 1 to output 1, which doubles it
        let caps = CapsuleMap::new(t(&[2, 1, 1], &[1.0, 2.0]), t(&[2, 1], &[1.0, 0.5]), (1, 2)).unwrap();
        let params = DecoderParams {
            w_route: t(&[2, 1, 2], &[0.0, 0.0, 3f64.ln() / 2.0, 0.0]),
            b_route: Tensor::zeros(&[2]),
            w_pose: t(&[2, 2, 1, 1], &[1.0, 1.0, 1.0, 2.0]),
            b_pose: Tensor::zeros(&[2, 1]),
        };
        let out = decoder_forward(&caps, &params).unwrap();
        assert!(close(out.activation(0, 0), 0.875 / 1.5, 1e-7));
        assert!(close(out.activation(1, 0), 0.625 / 1.5, 1e-7));
        assert!(close(out.pose(0, 0)[0], 1.25 / 0.875, 1e-7));
        assert!(close(out.pose(1, 0)[0], 1.6, 1e-7));
    }

    #[test]
    fn shape_mismatch_and_non_finite_inputs_are_rejected() {
        let caps = CapsuleMap::new(t(&[1, 2, 2], &[0.0; 4]), t(&[1, 2], &[0.5; 2]), (1, 1)).unwrap();
        assert!(matches!(self_route_local(&caps, &SelfRoutingParams::zeros(3, 2, 2, 2)), Err(Error::Shape { .. })));
        let bad = CapsuleMap::new(t(&[1, 2, 2], &[f64::NAN, 0.0, 0.0, 0.0]), t(&[1, 2], &[0.5; 2]), (1, 1)).unwrap();
        assert!(matches!(self_route_local(&bad, &SelfRoutingParams::zeros(2, 2, 2, 2)), Err(Error::NonFinite(_))));
        assert!(CapsuleMap::new(t(&[1, 1, 1], &[0.0]), t(&[1, 1], &[1.5]), (1, 1)).is_err());
        assert!(CapsuleMap::new(t(&[2, 1, 1], &[0.0; 2]), t(&[2, 1], &[0.5; 2]), (1, 1)).is_err());
    }

    #[test]
    fn default_encoder_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let caps = CapsuleMap::new(Tensor::randn(&[4, 16, 16], 1.0, &mut rng), Tensor::full(&[4, 16], 0.5), (2, 2)).unwrap();
        let layers: Vec<_> = (0..3).map(|_| SelfRoutingParams::init(16, 16, 16, 16, &mut rng)).collect();
        let out = encoder_forward(&caps, &layers).unwrap();
        assert_eq!(out.poses().shape(), &[4, 16, 16]);
        assert_eq!(encoder_forward(&caps, &layers[..1]).unwrap(), self_route_local(&caps, &layers[0]).unwrap());
        let mismatched = vec![SelfRoutingParams::init(16, 16, 8, 16, &mut rng), SelfRoutingParams::init(16, 16, 8, 16, &mut rng)];
        assert!(encoder_forward(&caps, &mismatched).is_err());
    }

    #[test]
    fn mask_selection_examples() {
        let caps = CapsuleMap::new(t(&[4, 1, 1], &[0.0, 1.0, 2.0, 3.0]), t(&[4, 1], &[1.0; 4]), (2, 2)).unwrap();
        let vis = mask_select(&caps, &MaskPlan::new(4, vec![1, 3]).unwrap()).unwrap();
        assert_eq!(vis.poses().data(), &[0.0, 2.0]);
        assert_eq!(mask_select(&caps, &MaskPlan::none(4)).unwrap(), caps);
        assert!(mask_select(&caps, &MaskPlan::new(4, vec![0, 1, 2, 3]).unwrap()).is_err());
    }

    #[test]
    fn reinsertion_restores_visible_and_fills_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let caps: CapsuleMap<f64> = CapsuleMap::new(Tensor::randn(&[6, 2, 3], 1.0, &mut rng), Tensor::full(&[6, 2], 0.7), (2, 3)).unwrap();
        let plan = MaskPlan::new(6, vec![0, 4]).unwrap();
        let spec = MaskTokenSpec::default();
        let vis = mask_select(&caps, &plan).unwrap();
        let full = reinsert_masked(&vis, &plan, &spec, (2, 3), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for l in plan.visible() {
            for k in 0..2 {
                assert_eq!(full.pose(l, k), caps.pose(l, k));
                assert_eq!(full.activation(l, k), caps.activation(l, k));
            }
        }
        for &l in plan.masked() {
            assert_eq!(full.activation(l, 0), 0.0);
            assert!(full.pose(l, 0).iter().all(|p| p.abs() < 0.2 && *p != 0.0));
        }
        let again = reinsert_masked(&vis, &plan, &spec, (2, 3), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(full, again);
        assert!(reinsert_masked(&vis, &MaskPlan::new(6, vec![0]).unwrap(), &spec, (2, 3), &mut rng).is_err());
    }

    #[test]
    fn fixed_token_is_identical_at_every_masked_slot() {
        let caps = CapsuleMap::new(t(&[3, 1, 2], &[0.0; 6]), t(&[3, 1], &[1.0; 3]), (1, 3)).unwrap();
        let plan = MaskPlan::new(3, vec![0, 2]).unwrap();
        let spec = MaskTokenSpec { resample_each_forward: false, ..MaskTokenSpec::default() };
        let vis = mask_select(&caps, &plan).unwrap();
        let full = reinsert_masked(&vis, &plan, &spec, (1, 3), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(full.pose(0, 0), full.pose(2, 0));
        assert!(MaskTokenSpec { sigma: 0.0, ..MaskTokenSpec::default() }.validate().is_err());
        assert!(MaskTokenSpec { activation_fill: 2.0, ..MaskTokenSpec::default() }.validate().is_err());
    }

    #[test]
    fn decoder_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = DecoderParams::<f64>::init(3, 2, 4, 5, 6, &mut rng);
        let n = p.w_route.numel() + p.b_route.numel() + p.w_pose.numel() + p.b_pose.numel();
        assert_eq!(n, DecoderParams::<f64>::param_count(3, 2, 4, 5, 6));
    }

    #[test]
    fn decoder_rejects_wrong_location_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = DecoderParams::<f64>::init(3, 2, 2, 2, 2, &mut rng);
        let caps = CapsuleMap::new(t(&[2, 2, 2], &[0.0; 8]), t(&[2, 2], &[0.5; 4]), (1, 2)).unwrap();
        assert!(decoder_forward(&caps, &p).is_err());
    }

    #[test]
    fn pixel_projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let poses = Tensor::randn(&[2, 1, 4], 1.0, &mut rng);
        let b = t(&[4], &[0.1, 0.2, 0.3, 0.4]);
        let silent = CapsuleMap::new(poses.clone(), Tensor::zeros(&[2, 1]), (1, 2)).unwrap();
        let out = pixel_projection(&silent, &Tensor::randn(&[4, 4], 1.0, &mut rng), &b).unwrap();
        assert_eq!(out.data(), &[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]);

        let live = CapsuleMap::new(poses.clone(), t(&[2, 1], &[0.5, 0.25]), (1, 2)).unwrap();
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 5] = 1.0);
        let out = pixel_projection(&live, &t(&[4, 4], &eye), &b).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            let a = if i < 4 { 0.5 } else { 0.25 };
            assert!(close(*v, a * poses.data()[i] + b.data()[i % 4], 1e-12));
        }
        assert!(pixel_projection(&live, &Tensor::zeros(&[3, 4]), &b).is_err());
    }

    #[test]
    fn class_head_examples() {
        let caps = CapsuleMap::new(t(&[3, 1, 2], &[0.5; 6]), t(&[3, 1], &[1.0; 3]), (1, 3)).unwrap();
        let scores = class_head(&caps, &SelfRoutingParams::zeros(1, 2, 10, 1)).unwrap();
        assert!(scores.iter().all(|&s| close(s, 0.1, 1e-7)));

        // two locations routed to opposite classes
        let caps = CapsuleMap::new(t(&[2, 1, 1], &[50.0, -50.0]), t(&[2, 1], &[1.0; 2]), (1, 2)).unwrap();
        let params = SelfRoutingParams { w_route: t(&[1, 1, 2], &[1.0, -1.0]), ..SelfRoutingParams::zeros(1, 1, 2, 1) };
        let scores = class_head(&caps, &params).unwrap();
        assert!(close(scores[0], 0.5, 1e-7) && close(scores[1], 0.5, 1e-7));
    }
}
