//! Wengert tape: every op appends a node holding its output value, and
//! `backward` replays the nodes in reverse applying each vector-Jacobian rule.

use super::fault::{self, FaultTarget};
use super::kernels::{self, broadcast_shape, broadcast_strides, for_each_offset2, split_axis, strides};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which statistics an affine normalization uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per channel, over all rows of the batch (optionally weighted per row).
    Batch,
    /// Per row, over the channel axis.
    Layer,
    /// Per channel, with frozen running statistics.
    Running,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Sigmoid,
    Gelu,
    Relu,
    Clamp { min: f64, max: f64 },
    Softmax { axis: usize },
    Sum { axes: Vec<usize> },
    Mean { axes: Vec<usize> },
    Reshape,
    Transpose { perm: Vec<usize> },
    Concat { axis: usize },
    Gather { indices: Vec<usize>, axis: usize },
    Scatter { indices: Vec<usize>, axis: usize },
    PatchEmbed { patch: usize },
    DepthwiseConv2d { kernel: usize },
    AffineNorm(NormKind),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Softmax { .. } => "softmax",
            OpKind::Sum { .. } => "sum",
            OpKind::Mean { .. } => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Transpose { .. } => "transpose",
            OpKind::Concat { .. } => "concat",
            OpKind::Gather { .. } => "gather",
            OpKind::Scatter { .. } => "scatter",
            OpKind::PatchEmbed { .. } => "conv_patch_embed",
            OpKind::DepthwiseConv2d { .. } => "conv_depthwise",
            OpKind::AffineNorm(_) => "affine_norm",
        }
    }
}

enum Saved<T> {
    None,
    Norm { xhat: Vec<T>, inv_std: Vec<T>, weights: Option<Vec<T>>, mean: Vec<T>, var: Vec<T>, count: T },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: OpKind,
    inputs: Vec<Var>,
    requires_grad: bool,
    saved: Saved<T>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get), but a leaf the loss does not depend on yields an error.
    pub fn wrt(&self, v: Var) -> Result<&[T]> {
        self.get(v).ok_or_else(|| Error::Backward(format!("no gradient recorded for node {}", v.0)))
    }
}

/// Operation recorder for reverse-mode differentiation.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::invalid("tape", format!("node {} is not on this tape", v.0)))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn op(&self, v: Var) -> &OpKind {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    /// Batch statistics `(mean, biased variance, weight total)` of a batch-norm node.
    pub fn norm_stats(&self, v: Var) -> Option<(&[T], &[T], T)> {
        match (&self.nodes.get(v.0)?.saved, &self.nodes[v.0].op) {
            (Saved::Norm { mean, var, count, .. }, OpKind::AffineNorm(NormKind::Batch)) => {
                Some((mean, var, *count))
            }
            _ => None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: OpKind, inputs: Vec<Var>, saved: Saved<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { shape, value, op, inputs, requires_grad, saved });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        let v = self.push(tensor.shape().to_vec(), tensor.data().to_vec(), OpKind::Leaf, vec![], Saved::None);
        self.nodes[v.0].requires_grad = tensor.requires_grad();
        v
    }

    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let v = self.leaf(tensor);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        let v = self.push(t.shape().to_vec(), t.into_data(), OpKind::Leaf, vec![], Saved::None);
        Ok(v)
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.push(vec![], vec![x], OpKind::Leaf, vec![], Saved::None)
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product over the last two axes. `b` is either a plain matrix
    /// shared by every leading index of `a`, or carries the same batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        let (ra, rb) = (sa.len(), sb.len());
        let bad = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        if ra < 2 || rb < 2 || sa[ra - 1] != sb[rb - 2] {
            return Err(bad());
        }
        let k = sa[ra - 1];
        let m = sb[rb - 1];
        let mut out_shape = sa[..ra - 1].to_vec();
        out_shape.push(m);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if rb == 2 {
            let n = av.len() / k;
            kernels::gemm(av, bv, &mut out, n, k, m);
        } else {
            if ra != rb || sa[..ra - 2] != sb[..rb - 2] {
                return Err(bad());
            }
            let n = sa[ra - 2];
            let batches: usize = sa[..ra - 2].iter().product();
            for bi in 0..batches {
                kernels::gemm(
                    &av[bi * n * k..(bi + 1) * n * k],
                    &bv[bi * k * m..(bi + 1) * k * m],
                    &mut out[bi * n * m..(bi + 1) * n * m],
                    n,
                    k,
                    m,
                );
            }
        }
        Ok(self.push(out_shape, out, OpKind::MatMul, vec![a, b], Saved::None))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, op: OpKind, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (sa, sb) = (&self.node(a)?.shape, &self.node(b)?.shape);
        let out_shape = broadcast_shape(sa, sb)
            .ok_or_else(|| Error::Shape { op: op.name(), detail: format!("cannot broadcast {sa:?} with {sb:?}") })?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); out_shape.iter().product()];
            let ta = broadcast_strides(sa, &out_shape);
            let tb = broadcast_strides(sb, &out_shape);
            for_each_offset2(&out_shape, &ta, &tb, |o, ia, ib| out[o] = f(av[ia], bv[ib]));
            out
        };
        Ok(self.push(out_shape, out, op, vec![a, b], Saved::None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Div, |x, y| x / y)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    /// `a · c` for a constant scalar `c`.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    fn unary(&mut self, a: Var, op: OpKind, f: impl Fn(T) -> T) -> Result<Var> {
        let n = self.node(a)?;
        let out = n.value.iter().map(|&x| f(x)).collect();
        let shape = n.shape.clone();
        Ok(self.push(shape, out, op, vec![a], Saved::None))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, OpKind::Exp, |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, OpKind::Log, |x| x.ln())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, OpKind::Sigmoid, kernels::sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, OpKind::Gelu, kernels::gelu)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, OpKind::Relu, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn clamp(&mut self, a: Var, min: f64, max: f64) -> Result<Var> {
        if min > max {
            return Err(Error::invalid("clamp", format!("min {min} > max {max}")));
        }
        let (lo, hi) = (T::lit(min), T::lit(max));
        self.unary(a, OpKind::Clamp { min, max }, |x| x.max(lo).min(hi))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.node(a)?;
        if axis >= n.shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", n.shape)));
        }
        let (outer, len, inner) = split_axis(&n.shape, axis);
        let x = &n.value;
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(x[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let shape = n.shape.clone();
        Ok(self.push(shape, out, OpKind::Softmax { axis }, vec![a], Saved::None))
    }

    // ---------------------------------------------------------------- reductions

    fn reduce_layout(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut seen = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() || seen[ax] {
                return Err(Error::shape(op, format!("bad axes {axes:?} for {shape:?}")));
            }
            seen[ax] = true;
        }
        let keep: Vec<usize> = shape.iter().zip(&seen).map(|(&d, &r)| if r { 1 } else { d }).collect();
        let out: Vec<usize> = shape.iter().zip(&seen).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
        Ok((keep, out))
    }

    fn reduce(&mut self, a: Var, axes: Vec<usize>, mean: bool) -> Result<Var> {
        let op_name = if mean { "mean" } else { "sum" };
        let n = self.node(a)?;
        let (keep, out_shape) = Self::reduce_layout(op_name, &n.shape, &axes)?;
        let total: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); total];
        let ks = broadcast_strides(&keep, &n.shape);
        let own = strides(&n.shape);
        let x = &n.value;
        for_each_offset2(&n.shape, &own, &ks, |_, ix, io| out[io] += x[ix]);
        if mean {
            let count = T::lit((x.len() / total) as f64);
            out.iter_mut().for_each(|v| *v /= count);
        }
        let op = if mean { OpKind::Mean { axes } } else { OpKind::Sum { axes } };
        Ok(self.push(out_shape, out, op, vec![a], Saved::None))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes.to_vec(), false)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes.to_vec(), true)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let r = self.node(a)?.shape.len();
        self.sum(a, &(0..r).collect::<Vec<_>>())
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let r = self.node(a)?.shape.len();
        self.mean(a, &(0..r).collect::<Vec<_>>())
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(a)?;
        if shape.iter().product::<usize>() != n.value.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", n.shape)));
        }
        let value = n.value.clone();
        Ok(self.push(shape.to_vec(), value, OpKind::Reshape, vec![a], Saved::None))
    }

    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let n = self.node(a)?;
        let r = n.shape.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("transpose", format!("perm {perm:?} for {:?}", n.shape)));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| n.shape[p]).collect();
        let own = strides(&n.shape);
        let src: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
        let dst = strides(&out_shape);
        let x = &n.value;
        let mut out = vec![T::zero(); x.len()];
        for_each_offset2(&out_shape, &dst, &src, |o, _, ix| out[o] = x[ix]);
        Ok(self.push(out_shape, out, OpKind::Transpose { perm: perm.to_vec() }, vec![a], Saved::None))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.node(*first)?.shape.clone();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = &self.node(*p)?.shape;
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let n = &self.nodes[p.0];
                let chunk = n.shape[axis] * inner;
                out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(out_shape, out, OpKind::Concat { axis }, parts.to_vec(), Saved::None))
    }

    /// Selects `indices` along `axis` (repeats allowed).
    pub fn gather(&mut self, a: Var, indices: &[usize], axis: usize) -> Result<Var> {
        let n = self.node(a)?;
        if axis >= n.shape.len() || indices.is_empty() {
            return Err(Error::shape("gather", format!("axis {axis}, {} indices, shape {:?}", indices.len(), n.shape)));
        }
        let (outer, len, inner) = split_axis(&n.shape, axis);
        if let Some(bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::shape("gather", format!("index {bad} out of range {len}")));
        }
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let at = (o * len + i) * inner;
                out.extend_from_slice(&n.value[at..at + inner]);
            }
        }
        let mut out_shape = n.shape.clone();
        out_shape[axis] = indices.len();
        Ok(self.push(out_shape, out, OpKind::Gather { indices: indices.to_vec(), axis }, vec![a], Saved::None))
    }

    /// Copy of `base` with the slices at `indices` along `axis` replaced by `src`.
    pub fn scatter(&mut self, base: Var, src: Var, indices: &[usize], axis: usize) -> Result<Var> {
        let (sb, ss) = (self.node(base)?.shape.clone(), self.node(src)?.shape.clone());
        let ok = axis < sb.len()
            && sb.len() == ss.len()
            && ss[axis] == indices.len()
            && sb.iter().zip(&ss).enumerate().all(|(d, (x, y))| d == axis || x == y);
        if !ok {
            return Err(Error::shape("scatter", format!("base {sb:?}, src {ss:?}, {} indices on axis {axis}", indices.len())));
        }
        let (outer, len, inner) = split_axis(&sb, axis);
        let mut seen = vec![false; len];
        for &i in indices {
            if i >= len || std::mem::replace(&mut seen[i], true) {
                return Err(Error::shape("scatter", format!("index {i} duplicated or out of range {len}")));
            }
        }
        let mut out = self.nodes[base.0].value.clone();
        let sv = &self.nodes[src.0].value;
        for o in 0..outer {
            for (k, &i) in indices.iter().enumerate() {
                let dst = (o * len + i) * inner;
                let from = (o * indices.len() + k) * inner;
                out[dst..dst + inner].copy_from_slice(&sv[from..from + inner]);
            }
        }
        Ok(self.push(sb, out, OpKind::Scatter { indices: indices.to_vec(), axis }, vec![base, src], Saved::None))
    }

    // ---------------------------------------------------------------- convolutions

    /// Non-overlapping convolution with kernel = stride = `patch`.
    ///
    /// `image: [B, C, H, W]`, `weight: [E, C, P, P]`, `bias: [E]` → `[B, L, E]`
    /// with the `L = (H/P)·(W/P)` patches in row-major grid order.
    pub fn patch_embed(&mut self, image: Var, weight: Var, bias: Var, patch: usize) -> Result<Var> {
        let si = self.node(image)?.shape.clone();
        let sw = self.node(weight)?.shape.clone();
        let sbias = self.node(bias)?.shape.clone();
        let ok = si.len() == 4
            && sw.len() == 4
            && patch > 0
            && sw[1] == si[1]
            && sw[2] == patch
            && sw[3] == patch
            && sbias == [sw[0]];
        if !ok {
            return Err(Error::shape("conv_patch_embed", format!("image {si:?}, weight {sw:?}, bias {sbias:?}, patch {patch}")));
        }
        if si[2] % patch != 0 || si[3] % patch != 0 {
            return Err(Error::shape("conv_patch_embed", format!("image {}x{} not divisible by patch {patch}", si[2], si[3])));
        }
        let (b, e) = (si[0], sw[0]);
        let q = si[1] * patch * patch;
        let l = (si[2] / patch) * (si[3] / patch);
        let cols = im2patch(&self.nodes[image.0].value, &si, patch);
        let wt = transpose2(&self.nodes[weight.0].value, e, q);
        let mut out = vec![T::zero(); b * l * e];
        kernels::gemm(&cols, &wt, &mut out, b * l, q, e);
        let bv = &self.nodes[bias.0].value;
        for row in out.chunks_mut(e) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        Ok(self.push(vec![b, l, e], out, OpKind::PatchEmbed { patch }, vec![image, weight, bias], Saved::None))
    }

    /// Per-channel 2D convolution with odd `kernel` and same padding.
    ///
    /// `x: [B, H, W, E]` (channels last), `weight: [E, k, k]`, `bias: [E]`.
    pub fn depthwise_conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let sx = self.node(x)?.shape.clone();
        let sw = self.node(weight)?.shape.clone();
        let sbias = self.node(bias)?.shape.clone();
        let ok = sx.len() == 4 && sw.len() == 3 && sw[0] == sx[3] && sw[1] == sw[2] && sw[1] % 2 == 1 && sbias == [sx[3]];
        if !ok {
            return Err(Error::shape("conv_depthwise", format!("x {sx:?}, weight {sw:?}, bias {sbias:?}")));
        }
        let (b, h, w, e) = (sx[0], sx[1], sx[2], sx[3]);
        let k = sw[1];
        let wk = channel_last_kernel(&self.nodes[weight.0].value, e, k);
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut out = vec![T::zero(); xv.len()];
        let p = (k / 2) as isize;
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let o = ((bi * h + y) * w + xx) * e;
                    out[o..o + e].copy_from_slice(bv);
                    for i in 0..k {
                        let sy = y as isize + i as isize - p;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for j in 0..k {
                            let sxx = xx as isize + j as isize - p;
                            if sxx < 0 || sxx >= w as isize {
                                continue;
                            }
                            let src = ((bi * h + sy as usize) * w + sxx as usize) * e;
                            let kw = &wk[(i * k + j) * e..(i * k + j + 1) * e];
                            for c in 0..e {
                                out[o + c] += kw[c] * xv[src + c];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(sx, out, OpKind::DepthwiseConv2d { kernel: k }, vec![x, weight, bias], Saved::None))
    }

    // ---------------------------------------------------------------- normalization

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let sx = &self.node(x)?.shape;
        let (sg, sb) = (&self.node(gamma)?.shape, &self.node(beta)?.shape);
        let e = *sx.last().ok_or_else(|| Error::shape(op, "scalar input"))?;
        if sg != &[e] || sb != &[e] {
            return Err(Error::shape(op, format!("x {sx:?}, gamma {sg:?}, beta {sb:?}")));
        }
        Ok((self.nodes[x.0].value.len() / e, e))
    }

    /// Batch-style normalization over every row of `x: [.., E]` per channel.
    /// With `row_weights`, statistics are weighted means over rows (rows of
    /// weight zero are normalized but do not influence the statistics).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, row_weights: Option<Vec<T>>, eps: f64) -> Result<Var> {
        let (rows, e) = self.check_affine("affine_norm", x, gamma, beta)?;
        if let Some(w) = &row_weights {
            if w.len() != rows {
                return Err(Error::shape("affine_norm", format!("{} row weights for {rows} rows", w.len())));
            }
        }
        let count: T = match &row_weights {
            Some(w) => w.iter().copied().sum(),
            None => T::lit(rows as f64),
        };
        if count <= T::zero() {
            return Err(Error::invalid("affine_norm", "row weights sum to zero"));
        }
        let xv = &self.nodes[x.0].value;
        let mut mean = vec![T::zero(); e];
        for r in 0..rows {
            let wr = row_weights.as_ref().map_or(T::one(), |w| w[r]);
            for c in 0..e {
                mean[c] += wr * xv[r * e + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![T::zero(); e];
        for r in 0..rows {
            let wr = row_weights.as_ref().map_or(T::one(), |w| w[r]);
            for c in 0..e {
                let d = xv[r * e + c] - mean[c];
                var[c] += wr * d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        self.finish_channel_norm(x, gamma, beta, NormKind::Batch, mean, var, inv_std, row_weights, count)
    }

    /// Channel normalization with frozen statistics (evaluation mode).
    pub fn norm_running(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let (_, e) = self.check_affine("affine_norm", x, gamma, beta)?;
        if mean.len() != e || var.len() != e {
            return Err(Error::shape("affine_norm", format!("running stats of length {} / {} for {e} channels", mean.len(), var.len())));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        self.finish_channel_norm(x, gamma, beta, NormKind::Running, mean.to_vec(), var.to_vec(), inv_std, None, T::zero())
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_channel_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
        mean: Vec<T>,
        var: Vec<T>,
        inv_std: Vec<T>,
        weights: Option<Vec<T>>,
        count: T,
    ) -> Result<Var> {
        let n = &self.nodes[x.0];
        let e = mean.len();
        let (g, bta) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let mut xhat = vec![T::zero(); n.value.len()];
        let mut out = vec![T::zero(); n.value.len()];
        for (r, row) in n.value.chunks(e).enumerate() {
            for c in 0..e {
                let h = (row[c] - mean[c]) * inv_std[c];
                xhat[r * e + c] = h;
                out[r * e + c] = g[c] * h + bta[c];
            }
        }
        let shape = n.shape.clone();
        let saved = Saved::Norm { xhat, inv_std, weights, mean, var, count };
        Ok(self.push(shape, out, OpKind::AffineNorm(kind), vec![x, gamma, beta], saved))
    }

    /// Layer-style normalization of every row of `x: [.., E]` over its channels.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, e) = self.check_affine("affine_norm", x, gamma, beta)?;
        let n = &self.nodes[x.0];
        let (g, bta) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let mut xhat = vec![T::zero(); n.value.len()];
        let mut out = vec![T::zero(); n.value.len()];
        let mut inv_std = vec![T::zero(); rows];
        let et = T::lit(e as f64);
        for (r, row) in n.value.chunks(e).enumerate() {
            let mu = row.iter().copied().sum::<T>() / et;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / et;
            let s = T::one() / (var + T::lit(eps)).sqrt();
            inv_std[r] = s;
            for c in 0..e {
                let h = (row[c] - mu) * s;
                xhat[r * e + c] = h;
                out[r * e + c] = g[c] * h + bta[c];
            }
        }
        let shape = n.shape.clone();
        let saved = Saved::Norm { xhat, inv_std, weights: None, mean: vec![], var: vec![], count: T::zero() };
        Ok(self.push(shape, out, OpKind::AffineNorm(NormKind::Layer), vec![x, gamma, beta], saved))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Backward(format!("node {} has not been recorded by a forward pass", loss.0)))?;
        if root.value.len() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", root.shape)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if node.op == OpKind::Leaf {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            self.vjp(node, &g, &mut grads)?;
        }
        for (id, g) in grads.iter_mut().enumerate() {
            let n = &self.nodes[id];
            if !(n.op == OpKind::Leaf && n.requires_grad) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn vjp(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let inp = &node.inputs;
        let val = |v: Var| &self.nodes[v.0].value;
        let shp = |v: Var| &self.nodes[v.0].shape;
        match &node.op {
            OpKind::Leaf => {}
            OpKind::MatMul => {
                let (a, b) = (inp[0], inp[1]);
                let (sa, sb) = (shp(a), shp(b));
                let (ra, rb) = (sa.len(), sb.len());
                let k = sa[ra - 1];
                let m = sb[rb - 1];
                let f = fault::factor(FaultTarget::MatMul).map(T::lit);
                let scaled;
                let g = match f {
                    Some(f) => {
                        scaled = g.iter().map(|&x| x * f).collect::<Vec<_>>();
                        &scaled[..]
                    }
                    None => g,
                };
                if rb == 2 {
                    let n = val(a).len() / k;
                    if self.wants(a) {
                        let mut da = vec![T::zero(); n * k];
                        kernels::gemm_nt_acc(g, val(b), &mut da, n, k, m);
                        self.accumulate(grads, a, da);
                    }
                    if self.wants(b) {
                        let mut db = vec![T::zero(); k * m];
                        kernels::gemm_tn_acc(val(a), g, &mut db, n, k, m);
                        self.accumulate(grads, b, db);
                    }
                } else {
                    let n = sa[ra - 2];
                    let batches: usize = sa[..ra - 2].iter().product();
                    if self.wants(a) {
                        let mut da = vec![T::zero(); batches * n * k];
                        for bi in 0..batches {
                            kernels::gemm_nt_acc(
                                &g[bi * n * m..(bi + 1) * n * m],
                                &val(b)[bi * k * m..(bi + 1) * k * m],
                                &mut da[bi * n * k..(bi + 1) * n * k],
                                n,
                                k,
                                m,
                            );
                        }
                        self.accumulate(grads, a, da);
                    }
                    if self.wants(b) {
                        let mut db = vec![T::zero(); batches * k * m];
                        for bi in 0..batches {
                            kernels::gemm_tn_acc(
                                &val(a)[bi * n * k..(bi + 1) * n * k],
                                &g[bi * n * m..(bi + 1) * n * m],
                                &mut db[bi * k * m..(bi + 1) * k * m],
                                n,
                                k,
                                m,
                            );
                        }
                        self.accumulate(grads, b, db);
                    }
                }
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let (a, b) = (inp[0], inp[1]);
                let (av, bv) = (val(a), val(b));
                let (wa, wb) = (self.wants(a), self.wants(b));
                let mut ga = if wa { vec![T::zero(); av.len()] } else { vec![] };
                let mut gb = if wb { vec![T::zero(); bv.len()] } else { vec![] };
                let op = node.op.clone();
                let mut step = |o: usize, ia: usize, ib: usize| {
                    let go = g[o];
                    let (da, db) = match op {
                        OpKind::Add => (go, go),
                        OpKind::Sub => (go, -go),
                        OpKind::Mul => (go * bv[ib], go * av[ia]),
                        _ => (go / bv[ib], -go * av[ia] / (bv[ib] * bv[ib])),
                    };
                    if wa {
                        ga[ia] += da;
                    }
                    if wb {
                        gb[ib] += db;
                    }
                };
                if shp(a) == shp(b) {
                    for o in 0..g.len() {
                        step(o, o, o);
                    }
                } else {
                    let ta = broadcast_strides(shp(a), &node.shape);
                    let tb = broadcast_strides(shp(b), &node.shape);
                    for_each_offset2(&node.shape, &ta, &tb, step);
                }
                if wa {
                    self.accumulate(grads, a, ga);
                }
                if wb {
                    self.accumulate(grads, b, gb);
                }
            }
            OpKind::Exp => {
                let d = g.iter().zip(&node.value).map(|(&go, &y)| go * y).collect();
                self.accumulate(grads, inp[0], d);
            }
            OpKind::Log => {
                let d = g.iter().zip(val(inp[0])).map(|(&go, &x)| go / x).collect();
                self.accumulate(grads, inp[0], d);
            }
            OpKind::Sigmoid => {
                let f = T::lit(fault::factor(FaultTarget::Sigmoid).unwrap_or(1.0));
                let d = g.iter().zip(&node.value).map(|(&go, &y)| f * go * y * (T::one() - y)).collect();
                self.accumulate(grads, inp[0], d);
            }
            OpKind::Gelu => {
                let f = T::lit(fault::factor(FaultTarget::Gelu).unwrap_or(1.0));
                let d = g.iter().zip(val(inp[0])).map(|(&go, &x)| f * go * kernels::gelu_grad(x)).collect();
                self.accumulate(grads, inp[0], d);
            }
            OpKind::Relu => {
                let d = g
                    .iter()
                    .zip(val(inp[0]))
                    .map(|(&go, &x)| if x > T::zero() { go } else { T::zero() })
                    .collect();
                self.accumulate(grads, inp[0], d);
            }
            OpKind::Clamp { min, max } => {
                let (lo, hi) = (T::lit(*min), T::lit(*max));
                let d = g
                    .iter()
                    .zip(val(inp[0]))
                    .map(|(&go, &x)| if x >= lo && x <= hi { go } else { T::zero() })
                    .collect();
                self.accumulate(grads, inp[0], d);
            }
            OpKind::Softmax { axis } => {
                let f = T::lit(fault::factor(FaultTarget::Softmax).unwrap_or(1.0));
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            dot += g[at(j)] * y[at(j)];
                        }
                        for j in 0..len {
                            d[at(j)] = f * y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, inp[0], d);
            }
            OpKind::Sum { axes } | OpKind::Mean { axes } => {
                let sx = shp(inp[0]);
                let (keep, _) = Self::reduce_layout("sum", sx, axes)?;
                let ks = broadcast_strides(&keep, sx);
                let own = strides(sx);
                let mut d = vec![T::zero(); val(inp[0]).len()];
                let scale = match node.op {
                    OpKind::Mean { .. } => T::one() / T::lit((d.len() / g.len()) as f64),
                    _ => T::one(),
                };
                for_each_offset2(sx, &own, &ks, |_, ix, io| d[ix] = g[io] * scale);
                self.accumulate(grads, inp[0], d);
            }
            OpKind::Reshape => self.accumulate(grads, inp[0], g.to_vec()),
            OpKind::Transpose { perm } => {
                let sx = shp(inp[0]);
                let own = strides(sx);
                let src: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
                let dst = strides(&node.shape);
                let mut d = vec![T::zero(); g.len()];
                for_each_offset2(&node.shape, &dst, &src, |o, _, ix| d[ix] = g[o]);
                self.accumulate(grads, inp[0], d);
            }
            OpKind::Concat { axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                let total = node.shape[*axis] * inner;
                for &p in inp {
                    let chunk = shp(p)[*axis] * inner;
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += chunk;
                }
            }
            OpKind::Gather { indices, axis } => {
                let sx = shp(inp[0]);
                let (outer, len, inner) = split_axis(sx, *axis);
                let mut d = vec![T::zero(); val(inp[0]).len()];
                for o in 0..outer {
                    for (k, &i) in indices.iter().enumerate() {
                        let dst = (o * len + i) * inner;
                        let src = (o * indices.len() + k) * inner;
                        for t in 0..inner {
                            d[dst + t] += g[src + t];
                        }
                    }
                }
                self.accumulate(grads, inp[0], d);
            }
            OpKind::Scatter { indices, axis } => {
                let (base, src) = (inp[0], inp[1]);
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                if self.wants(base) {
                    let mut d = g.to_vec();
                    for o in 0..outer {
                        for &i in indices {
                            let at = (o * len + i) * inner;
                            d[at..at + inner].iter_mut().for_each(|v| *v = T::zero());
                        }
                    }
                    self.accumulate(grads, base, d);
                }
                if self.wants(src) {
                    let mut d = Vec::with_capacity(outer * indices.len() * inner);
                    for o in 0..outer {
                        for &i in indices {
                            let at = (o * len + i) * inner;
                            d.extend_from_slice(&g[at..at + inner]);
                        }
                    }
                    self.accumulate(grads, src, d);
                }
            }
            OpKind::PatchEmbed { patch } => {
                let (image, weight, bias) = (inp[0], inp[1], inp[2]);
                let si = shp(image);
                let e = shp(weight)[0];
                let q = si[1] * patch * patch;
                let rows = g.len() / e;
                if self.wants(bias) {
                    let mut db = vec![T::zero(); e];
                    for row in g.chunks(e) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    self.accumulate(grads, bias, db);
                }
                if self.wants(weight) {
                    let cols = im2patch(val(image), si, *patch);
                    let mut dwt = vec![T::zero(); q * e];
                    kernels::gemm_tn_acc(&cols, g, &mut dwt, rows, q, e);
                    self.accumulate(grads, weight, transpose2(&dwt, q, e));
                }
                if self.wants(image) {
                    let mut dcols = vec![T::zero(); rows * q];
                    kernels::gemm(g, val(weight), &mut dcols, rows, e, q);
                    self.accumulate(grads, image, patch2im(&dcols, si, *patch));
                }
            }
            OpKind::DepthwiseConv2d { kernel } => {
                let (x, weight, bias) = (inp[0], inp[1], inp[2]);
                let sx = shp(x);
                let (b, h, w, e) = (sx[0], sx[1], sx[2], sx[3]);
                let k = *kernel;
                let p = (k / 2) as isize;
                let xv = val(x);
                let wk = channel_last_kernel(val(weight), e, k);
                let mut dx = vec![T::zero(); if self.wants(x) { xv.len() } else { 0 }];
                let mut dwk = vec![T::zero(); k * k * e];
                let mut db = vec![T::zero(); e];
                for bi in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            let o = ((bi * h + y) * w + xx) * e;
                            let go = &g[o..o + e];
                            db.iter_mut().zip(go).for_each(|(a, &v)| *a += v);
                            for i in 0..k {
                                let sy = y as isize + i as isize - p;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for j in 0..k {
                                    let sxx = xx as isize + j as isize - p;
                                    if sxx < 0 || sxx >= w as isize {
                                        continue;
                                    }
                                    let src = ((bi * h + sy as usize) * w + sxx as usize) * e;
                                    let kidx = (i * k + j) * e;
                                    for c in 0..e {
                                        dwk[kidx + c] += go[c] * xv[src + c];
                                    }
                                    if !dx.is_empty() {
                                        for c in 0..e {
                                            dx[src + c] += go[c] * wk[kidx + c];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if self.wants(x) {
                    self.accumulate(grads, x, dx);
                }
                if self.wants(weight) {
                    let mut dw = vec![T::zero(); e * k * k];
                    for t in 0..k * k {
                        for c in 0..e {
                            dw[c * k * k + t] = dwk[t * e + c];
                        }
                    }
                    self.accumulate(grads, weight, dw);
                }
                if self.wants(bias) {
                    self.accumulate(grads, bias, db);
                }
            }
            OpKind::AffineNorm(kind) => {
                let Saved::Norm { xhat, inv_std, weights, count, .. } = &node.saved else {
                    return Err(Error::Backward("affine_norm node lost its saved statistics".into()));
                };
                let (x, gamma, beta) = (inp[0], inp[1], inp[2]);
                let gv = val(gamma);
                let e = gv.len();
                let rows = g.len() / e;
                let mut dgamma = vec![T::zero(); e];
                let mut dbeta = vec![T::zero(); e];
                for r in 0..rows {
                    for c in 0..e {
                        dgamma[c] += g[r * e + c] * xhat[r * e + c];
                        dbeta[c] += g[r * e + c];
                    }
                }
                if self.wants(x) {
                    let mut dx = vec![T::zero(); g.len()];
                    match kind {
                        NormKind::Running => {
                            for r in 0..rows {
                                for c in 0..e {
                                    dx[r * e + c] = g[r * e + c] * gv[c] * inv_std[c];
                                }
                            }
                        }
                        NormKind::Batch => {
                            let mut s1 = vec![T::zero(); e];
                            let mut s2 = vec![T::zero(); e];
                            for r in 0..rows {
                                for c in 0..e {
                                    let gh = g[r * e + c] * gv[c];
                                    s1[c] += gh;
                                    s2[c] += gh * xhat[r * e + c];
                                }
                            }
                            for r in 0..rows {
                                let wr = weights.as_ref().map_or(T::one(), |w| w[r]) / *count;
                                for c in 0..e {
                                    let gh = g[r * e + c] * gv[c];
                                    dx[r * e + c] =
                                        inv_std[c] * gh - wr * inv_std[c] * (s1[c] + xhat[r * e + c] * s2[c]);
                                }
                            }
                        }
                        NormKind::Layer => {
                            let et = T::lit(e as f64);
                            for r in 0..rows {
                                let mut m1 = T::zero();
                                let mut m2 = T::zero();
                                for c in 0..e {
                                    let gh = g[r * e + c] * gv[c];
                                    m1 += gh;
                                    m2 += gh * xhat[r * e + c];
                                }
                                m1 /= et;
                                m2 /= et;
                                for c in 0..e {
                                    let gh = g[r * e + c] * gv[c];
                                    dx[r * e + c] = inv_std[r] * (gh - m1 - xhat[r * e + c] * m2);
                                }
                            }
                        }
                    }
                    self.accumulate(grads, x, dx);
                }
                self.accumulate(grads, gamma, dgamma);
                self.accumulate(grads, beta, dbeta);
            }
        }
        Ok(())
    }
}

/// `[B, C, H, W]` → `[B·L, C·P·P]`, channel-major within each patch row.
fn im2patch<T: Real>(img: &[T], shape: &[usize], p: usize) -> Vec<T> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (gh, gw) = (h / p, w / p);
    let mut cols = Vec::with_capacity(img.len());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for y in 0..p {
                        let row = ((bi * c + ci) * h + py * p + y) * w + px * p;
                        cols.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
    }
    cols
}

fn patch2im<T: Real>(cols: &[T], shape: &[usize], p: usize) -> Vec<T> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (gh, gw) = (h / p, w / p);
    let mut img = vec![T::zero(); b * c * h * w];
    let mut at = 0;
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for y in 0..p {
                        let row = ((bi * c + ci) * h + py * p + y) * w + px * p;
                        img[row..row + p].copy_from_slice(&cols[at..at + p]);
                        at += p;
                    }
                }
            }
        }
    }
    img
}

fn transpose2<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `[E, k, k]` → `[k, k, E]`.
fn channel_last_kernel<T: Real>(w: &[T], e: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for c in 0..e {
        for t in 0..k * k {
            out[t * e + c] = w[c * k * k + t];
        }
    }
    out
}
