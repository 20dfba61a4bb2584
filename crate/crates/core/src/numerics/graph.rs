//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns [`Grads`] for
//! every node that depends on a trainable leaf.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{bail, Result};
use crate::quantize::QuantizedLinear;

use super::real::{gemm, View, ViewMut};
use super::{ParamId, ParamStore, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a batched attention call.
///
/// Queries have `batch * nq` rows and keys/values `batch * nk` rows. When
/// `key_lens` is set, item `b` attends only to its first `key_lens[b]` keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnSpec {
    pub heads: usize,
    pub batch: usize,
    pub key_lens: Option<Vec<usize>>,
}

impl AttnSpec {
    pub fn new(heads: usize, batch: usize) -> Self {
        AttnSpec { heads, batch, key_lens: None }
    }
}

/// Geometry of a square-kernel convolution on channel-last `[B*H*W, C]` maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        self.height / self.stride
    }

    pub fn out_width(&self) -> usize {
        self.width / self.stride
    }
}

/// Batched spatial extent of a channel-last feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    TileAdd(usize, usize),
    GroupMul(usize, usize),
    GroupAdd(usize, usize),
    Gelu(usize),
    Silu(usize),
    LayerNorm { x: usize, gain: Option<usize>, bias: Option<usize>, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(usize),
    Attention { q: usize, k: usize, v: usize, spec: AttnSpec, probs: Vec<T> },
    Im2Col { x: usize, geom: ConvGeom },
    Upsample2x { x: usize, geom: MapGeom },
    Gather { table: usize, ids: Vec<usize> },
    MaskedCe { logits: usize, targets: Vec<usize>, mask: Vec<bool>, norm: T, probs: Vec<T> },
    Sum(usize),
    StraightThrough(usize),
    ConcatCols(usize, usize),
    QuantLinear { x: usize, q: Arc<QuantizedLinear> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Recording of one forward computation.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    param_leaves: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, n)| self.by_node[*n].as_ref())
    }

    /// Gradients of every trainable parameter leaf that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().filter_map(|(p, n)| self.by_node[*n].as_ref().map(|g| (*p, g)))
    }
}

fn check_same(a: &Tensor<impl Real>, b: &Tensor<impl Real>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Dimension, "{what}: shapes {:?} and {:?} differ", a.shape(), b.shape());
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    T::lit(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records gradients for trainable leaves.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true, param_leaves: HashMap::new() }
    }

    /// A graph for inference: no node requires a gradient.
    pub fn no_grad() -> Self {
        Graph { grad_enabled: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let needs_grad = self.grad_enabled && requires_grad;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.param_leaves.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.leaf(p.tensor.clone(), p.trainable);
        self.nodes[v.0].param = Some(id);
        self.param_leaves.insert(id, v);
        v
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            bail!(Dimension, "matmul inner extents {} and {} differ", k, bv.rows());
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, T::one(), View::rm(av.data(), 0, k), View::rm(bv.data(), 0, n), T::zero(), ViewMut::rm(out.data_mut(), 0, n));
        Ok(self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// `x @ w^T + b` with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, din, dout) = (xv.rows(), xv.cols(), wv.rows());
        if wv.cols() != din {
            bail!(Dimension, "linear: input width {} but weight is {:?}", din, wv.shape());
        }
        let mut out = Tensor::zeros(&[n, dout]);
        gemm(n, din, dout, T::one(), View::rm(xv.data(), 0, din), View::tr(wv.data(), 0, din), T::zero(), ViewMut::rm(out.data_mut(), 0, dout));
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                bail!(Dimension, "linear: bias has {} elements, expected {}", bv.len(), dout);
            }
            for r in 0..n {
                for (o, &bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
            parents.push(b.0);
        }
        Ok(self.push(out, Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) }, &parents))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(av, bv, what)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a.0, s), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a.0), &[a.0])
    }

    /// Adds `p` (`R` rows) to every consecutive block of `R` rows of `x`.
    pub fn tile_add(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(p));
        if xv.cols() != pv.cols() || pv.rows() == 0 || xv.rows() % pv.rows() != 0 {
            bail!(Dimension, "tile_add: {:?} cannot tile {:?}", pv.shape(), xv.shape());
        }
        let plen = pv.len();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += pv.data()[i % plen];
        }
        Ok(self.push(out, Op::TileAdd(x.0, p.0), &[x.0, p.0]))
    }

    fn group_check(&self, x: Var, g: Var, what: &str) -> Result<usize> {
        let (xv, gv) = (self.value(x), self.value(g));
        if xv.cols() != gv.cols() || gv.rows() == 0 || xv.rows() % gv.rows() != 0 {
            bail!(Dimension, "{what}: {:?} cannot group {:?}", gv.shape(), xv.shape());
        }
        Ok(xv.rows() / gv.rows())
    }

    /// Multiplies each consecutive group of rows of `x` by one row of `g`.
    pub fn group_mul(&mut self, x: Var, g: Var) -> Result<Var> {
        let per = self.group_check(x, g, "group_mul")?;
        let (xv, gv) = (self.value(x), self.value(g));
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            for (o, &s) in out.row_mut(r).iter_mut().zip(gv.row(r / per)) {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::GroupMul(x.0, g.0), &[x.0, g.0]))
    }

    /// Adds one row of `g` to each consecutive group of rows of `x`.
    pub fn group_add(&mut self, x: Var, g: Var) -> Result<Var> {
        let per = self.group_check(x, g, "group_add")?;
        let (xv, gv) = (self.value(x), self.value(g));
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            for (o, &s) in out.row_mut(r).iter_mut().zip(gv.row(r / per)) {
                *o += s;
            }
        }
        Ok(self.push(out, Op::GroupAdd(x.0, g.0), &[x.0, g.0]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a.0), &[a.0])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a.0), &[a.0])
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// optional per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if d == 0 {
            bail!(Dimension, "layer_norm over an empty axis");
        }
        for (what, p) in [("gain", gain), ("bias", bias)] {
            if let Some(p) = p {
                if self.value(p).len() != d {
                    bail!(Dimension, "layer_norm {what} must have {d} elements");
                }
            }
        }
        let eps = T::lit(eps);
        let inv_d = T::lit(1.0 / d as f64);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = Tensor::new(&[n, d], xhat.clone())?;
        if let Some(g) = gain {
            let gv = self.value(g).data().to_vec();
            for r in 0..n {
                for (o, &s) in out.row_mut(r).iter_mut().zip(&gv) {
                    *o *= s;
                }
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b).data().to_vec();
            for r in 0..n {
                for (o, &s) in out.row_mut(r).iter_mut().zip(&bv) {
                    *o += s;
                }
            }
        }
        let mut parents = vec![x.0];
        parents.extend(gain.map(|v| v.0));
        parents.extend(bias.map(|v| v.0));
        let keep = self.grad_enabled;
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.map(|v| v.0),
            bias: bias.map(|v| v.0),
            xhat: if keep { xhat } else { Vec::new() },
            rstd,
        };
        Ok(self.push(out, op, &parents))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.data().iter().any(|v| v.is_nan()) {
            bail!(Numeric, "softmax input contains NaN");
        }
        let mut out = av.clone();
        let d = out.cols();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::Softmax(a.0), &[a.0]))
    }

    /// Multi-head scaled dot-product attention, `softmax(QK^T/sqrt(dh)) V`
    /// per head with heads concatenated along columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if spec.heads == 0 || d % spec.heads != 0 {
            bail!(Config, "feature width {} not divisible by {} heads", d, spec.heads);
        }
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            bail!(Dimension, "attention: q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape());
        }
        let b = spec.batch;
        if b == 0 || qv.rows() % b != 0 || kv.rows() % b != 0 {
            bail!(Dimension, "attention rows not divisible by batch {b}");
        }
        let (nq, nk) = (qv.rows() / b, kv.rows() / b);
        if let Some(lens) = &spec.key_lens {
            if lens.len() != b || lens.iter().any(|&l| l == 0 || l > nk) {
                bail!(Dimension, "attention key lengths {:?} invalid for {} keys", lens, nk);
            }
        }
        if nk == 0 {
            bail!(Dimension, "attention over zero keys");
        }
        let h = spec.heads;
        let dh = d / h;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); b * h * nq * nk];
        let mut out = Tensor::zeros(&[b * nq, d]);
        for bi in 0..b {
            let len = spec.key_lens.as_ref().map_or(nk, |l| l[bi]);
            for hi in 0..h {
                let poff = (bi * h + hi) * nq * nk;
                gemm(
                    nq,
                    dh,
                    len,
                    scale,
                    View::strided(qv.data(), bi * nq * d + hi * dh, d, 1),
                    View::strided(kv.data(), bi * nk * d + hi * dh, 1, d),
                    T::zero(),
                    ViewMut::strided(&mut probs, poff, nk, 1),
                );
                for r in 0..nq {
                    softmax_in_place(&mut probs[poff + r * nk..poff + r * nk + len]);
                }
                gemm(
                    nq,
                    len,
                    dh,
                    T::one(),
                    View::strided(&probs, poff, nk, 1),
                    View::strided(vv.data(), bi * nk * d + hi * dh, d, 1),
                    T::zero(),
                    ViewMut::strided(out.data_mut(), bi * nq * d + hi * dh, d, 1),
                );
            }
        }
        if !self.grad_enabled {
            probs = Vec::new();
        }
        Ok(self.push(out, Op::Attention { q: q.0, k: k.0, v: v.0, spec, probs }, &[q.0, k.0, v.0]))
    }

    /// Unfolds `kernel x kernel` patches (zero padded, channel-last) so a
    /// convolution becomes a matrix product.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let xv = self.value(x);
        let ConvGeom { batch, height, width, channels, kernel, stride } = geom;
        if xv.rows() != batch * height * width || xv.cols() != channels {
            bail!(Dimension, "im2col: tensor {:?} does not match {:?}", xv.shape(), geom);
        }
        if kernel % 2 == 0 || stride == 0 || height % stride != 0 || width % stride != 0 {
            bail!(Config, "im2col: unsupported kernel {kernel} / stride {stride} for {height}x{width}");
        }
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let kk = kernel * kernel * channels;
        let mut out = Tensor::zeros(&[batch * ho * wo, kk]);
        for_each_tap(geom, |orow, col, irow| {
            let src = xv.row(irow);
            out.data_mut()[orow * kk + col..orow * kk + col + channels].copy_from_slice(src);
        });
        Ok(self.push(out, Op::Im2Col { x: x.0, geom }, &[x.0]))
    }

    /// Nearest-neighbour 2x spatial upsampling of a channel-last map.
    pub fn upsample2x(&mut self, x: Var, geom: MapGeom) -> Result<Var> {
        let xv = self.value(x);
        let MapGeom { batch, height, width } = geom;
        if xv.rows() != batch * height * width {
            bail!(Dimension, "upsample2x: tensor {:?} does not match {:?}", xv.shape(), geom);
        }
        let c = xv.cols();
        let (h2, w2) = (height * 2, width * 2);
        let mut out = Tensor::zeros(&[batch * h2 * w2, c]);
        for b in 0..batch {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let src = xv.row(b * height * width + (y / 2) * width + xx / 2);
                    out.row_mut(b * h2 * w2 + y * w2 + xx).copy_from_slice(src);
                }
            }
        }
        Ok(self.push(out, Op::Upsample2x { x: x.0, geom }, &[x.0]))
    }

    /// Selects rows of `table` by index.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = (tv.rows(), tv.cols());
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            bail!(Domain, "row index {bad} out of range for table with {rows} rows");
        }
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        Ok(self.push(out, Op::Gather { table: table.0, ids: ids.to_vec() }, &[table.0]))
    }

    /// Sum over masked rows of `-log softmax(logits)[target]`, divided by
    /// `norm`. Unmasked rows contribute neither loss nor gradient.
    pub fn masked_ce(&mut self, logits: Var, targets: &[usize], mask: &[bool], norm: f64) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = (lv.rows(), lv.cols());
        if targets.len() != n || mask.len() != n {
            bail!(Dimension, "masked_ce: {} rows, {} targets, {} mask flags", n, targets.len(), mask.len());
        }
        if let Some(bad) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= vocab) {
            bail!(Domain, "target id {} out of range for vocabulary {}", bad.0, vocab);
        }
        if norm <= 0.0 && mask.iter().any(|&m| m) {
            bail!(Domain, "masked_ce normaliser must be positive");
        }
        let mut probs = vec![T::zero(); n * vocab];
        let mut total = T::zero();
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            row.copy_from_slice(lv.row(r));
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[targets[r]];
            softmax_in_place(row);
        }
        let norm_t = if norm > 0.0 { T::lit(norm) } else { T::one() };
        let out = Tensor::scalar(total / norm_t);
        let op = Op::MaskedCe { logits: logits.0, targets: targets.to_vec(), mask: mask.to_vec(), norm: norm_t, probs };
        Ok(self.push(out, op, &[logits.0]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of squared elements.
    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        Ok(self.sum(sq))
    }

    /// Forward value of `quantized`, gradient routed unchanged to `z`.
    pub fn straight_through(&mut self, z: Var, quantized: Var) -> Result<Var> {
        check_same(self.value(z), self.value(quantized), "straight_through")?;
        let out = self.value(quantized).clone();
        Ok(self.push(out, Op::StraightThrough(z.0), &[z.0]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            bail!(Dimension, "concat_cols: {} vs {} rows", av.rows(), bv.rows());
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Tensor::zeros(&[av.rows(), ca + cb]);
        for r in 0..av.rows() {
            out.row_mut(r)[..ca].copy_from_slice(av.row(r));
            out.row_mut(r)[ca..].copy_from_slice(bv.row(r));
        }
        Ok(self.push(out, Op::ConcatCols(a.0, b.0), &[a.0, b.0]))
    }

    /// `x @ dequant(q)^T` through the int8 weight path (bias not included).
    pub fn quant_linear(&mut self, x: Var, q: Arc<QuantizedLinear>) -> Result<Var> {
        let out = crate::quantize::dequant_matmul(self.value(x), &q, None)?;
        Ok(self.push(out, Op::QuantLinear { x: x.0, q }, &[x.0]))
    }

    /// 2-D convolution on channel-last maps: `im2col` followed by a linear
    /// map with `kernel` shaped `[c_out, k*k*c_in]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let cols = self.im2col(x, geom)?;
        self.linear(cols, kernel, bias)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            bail!(Dimension, "backward needs a scalar, got {:?}", self.value(loss).shape());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            for (p, contrib) in self.node_backward(i, &g)? {
                if !self.nodes[p].needs_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Grads { by_node: grads, params })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    gemm(m, n, k, T::one(), View::rm(g.data(), 0, n), View::tr(bv.data(), 0, n), T::zero(), ViewMut::rm(da.data_mut(), 0, k));
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    gemm(k, m, n, T::one(), View::tr(av.data(), 0, k), View::rm(g.data(), 0, n), T::zero(), ViewMut::rm(db.data_mut(), 0, n));
                    out.push((*b, db));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, din, dout) = (xv.rows(), xv.cols(), wv.rows());
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    gemm(n, dout, din, T::one(), View::rm(g.data(), 0, dout), View::rm(wv.data(), 0, din), T::zero(), ViewMut::rm(dx.data_mut(), 0, din));
                    out.push((*x, dx));
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    gemm(dout, n, din, T::one(), View::tr(g.data(), 0, dout), View::rm(xv.data(), 0, din), T::zero(), ViewMut::rm(dw.data_mut(), 0, din));
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = Tensor::zeros(val(*b).shape());
                        for r in 0..n {
                            for (o, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        out.push((*b, db));
                    }
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    out.push((*a, zip_with(g, bv, |x, y| x * y)));
                }
                if self.wants(*b) {
                    out.push((*b, zip_with(g, av, |x, y| x * y)));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.map(|v| v * *s))),
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::TileAdd(x, p) => {
                out.push((*x, g.clone()));
                if self.wants(*p) {
                    let mut dp = Tensor::zeros(val(*p).shape());
                    let plen = dp.len();
                    for (i, &v) in g.data().iter().enumerate() {
                        dp.data_mut()[i % plen] += v;
                    }
                    out.push((*p, dp));
                }
            }
            Op::GroupMul(x, gr) => {
                let (xv, gv) = (val(*x), val(*gr));
                let per = xv.rows() / gv.rows();
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for r in 0..xv.rows() {
                        for (o, &s) in dx.row_mut(r).iter_mut().zip(gv.row(r / per)) {
                            *o *= s;
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*gr) {
                    let mut dg = Tensor::zeros(gv.shape());
                    for r in 0..xv.rows() {
                        let dst = dg.row_mut(r / per);
                        for ((o, &a), &b) in dst.iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                            *o += a * b;
                        }
                    }
                    out.push((*gr, dg));
                }
            }
            Op::GroupAdd(x, gr) => {
                out.push((*x, g.clone()));
                if self.wants(*gr) {
                    let gv = val(*gr);
                    let per = g.rows() / gv.rows();
                    let mut dg = Tensor::zeros(gv.shape());
                    for r in 0..g.rows() {
                        for (o, &a) in dg.row_mut(r / per).iter_mut().zip(g.row(r)) {
                            *o += a;
                        }
                    }
                    out.push((*gr, dg));
                }
            }
            Op::Gelu(a) => out.push((*a, zip_with(g, val(*a), |d, x| d * gelu_grad(x)))),
            Op::Silu(a) => out.push((
                *a,
                zip_with(g, val(*a), |d, x| {
                    let s = sigmoid(x);
                    d * s * (T::one() + x * (T::one() - s))
                }),
            )),
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = g.cols();
                let n = g.rows();
                let gain_v = gain.map(|p| val(p).data().to_vec());
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut db = Tensor::zeros(val(*b).shape());
                        for r in 0..n {
                            for (o, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        out.push((*b, db));
                    }
                }
                if let Some(gn) = gain {
                    if self.wants(*gn) {
                        let mut dgn = Tensor::zeros(val(*gn).shape());
                        for r in 0..n {
                            for ((o, &v), &xh) in dgn.data_mut().iter_mut().zip(g.row(r)).zip(&xhat[r * d..(r + 1) * d]) {
                                *o += v * xh;
                            }
                        }
                        out.push((*gn, dgn));
                    }
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(g.shape());
                    let inv_d = T::lit(1.0 / d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..n {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxhat[c] = g.at(r, c) * gain_v.as_ref().map_or(T::one(), |gv| gv[c]);
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                        let m2 = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dxhat[c] - m1 - xh[c] * m2);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let d = y.cols();
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let dot: T = y.row(r).iter().zip(g.row(r)).map(|(&p, &q)| p * q).sum();
                    for c in 0..d {
                        dx.data_mut()[r * d + c] = y.at(r, c) * (g.at(r, c) - dot);
                    }
                }
                out.push((*a, dx));
            }
            Op::Attention { q, k, v, spec, probs } => {
                out.extend(self.attention_backward(g, *q, *k, *v, spec, probs));
            }
            Op::Im2Col { x, geom } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                let kk = g.cols();
                let c = geom.channels;
                for_each_tap(*geom, |orow, col, irow| {
                    let src = &g.data()[orow * kk + col..orow * kk + col + c];
                    for (o, &v) in dx.row_mut(irow).iter_mut().zip(src) {
                        *o += v;
                    }
                });
                out.push((*x, dx));
            }
            Op::Upsample2x { x, geom } => {
                let MapGeom { batch, height, width } = *geom;
                let mut dx = Tensor::zeros(val(*x).shape());
                let (h2, w2) = (height * 2, width * 2);
                for b in 0..batch {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let src = g.row(b * h2 * w2 + y * w2 + xx);
                            for (o, &v) in dx.row_mut(b * height * width + (y / 2) * width + xx / 2).iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Gather { table, ids } => {
                let mut dt = Tensor::zeros(val(*table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                out.push((*table, dt));
            }
            Op::MaskedCe { logits, targets, mask, norm, probs } => {
                let lv = val(*logits);
                let vocab = lv.cols();
                let scale = g.data()[0] / *norm;
                let mut dl = Tensor::zeros(lv.shape());
                for r in 0..lv.rows() {
                    if !mask[r] {
                        continue;
                    }
                    let dst = dl.row_mut(r);
                    for (o, &p) in dst.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                        *o = p * scale;
                    }
                    dst[targets[r]] -= scale;
                }
                out.push((*logits, dl));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(val(*a).shape(), g.data()[0]))),
            Op::StraightThrough(z) => out.push((*z, g.clone())),
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                let mut da = Tensor::zeros(val(*a).shape());
                let mut db = Tensor::zeros(val(*b).shape());
                for r in 0..g.rows() {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    db.row_mut(r).copy_from_slice(&g.row(r)[ca..ca + cb]);
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::QuantLinear { x, q } => {
                let w: Tensor<T> = q.dequantize();
                let xv = val(*x);
                let (n, din, dout) = (xv.rows(), xv.cols(), w.rows());
                let mut dx = Tensor::zeros(xv.shape());
                gemm(n, dout, din, T::one(), View::rm(g.data(), 0, dout), View::rm(w.data(), 0, din), T::zero(), ViewMut::rm(dx.data_mut(), 0, din));
                out.push((*x, dx));
            }
        }
        Ok(out)
    }

    fn attention_backward(&self, g: &Tensor<T>, q: usize, k: usize, v: usize, spec: &AttnSpec, probs: &[T]) -> Vec<(usize, Tensor<T>)> {
        let (qv, kv, vv) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let d = qv.cols();
        let (b, h) = (spec.batch, spec.heads);
        let (nq, nk) = (qv.rows() / b, kv.rows() / b);
        let dh = d / h;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut dq = Tensor::zeros(qv.shape());
        let mut dk = Tensor::zeros(kv.shape());
        let mut dv = Tensor::zeros(vv.shape());
        let mut ds = vec![T::zero(); nq * nk];
        for bi in 0..b {
            let len = spec.key_lens.as_ref().map_or(nk, |l| l[bi]);
            for hi in 0..h {
                let poff = (bi * h + hi) * nq * nk;
                let qoff = bi * nq * d + hi * dh;
                let koff = bi * nk * d + hi * dh;
                // dP = dO V^T
                gemm(nq, dh, len, T::one(), View::strided(g.data(), qoff, d, 1), View::strided(vv.data(), koff, 1, d), T::zero(), ViewMut::strided(&mut ds, 0, nk, 1));
                for r in 0..nq {
                    let p = &probs[poff + r * nk..poff + r * nk + len];
                    let row = &mut ds[r * nk..r * nk + len];
                    let dot: T = p.iter().zip(row.iter()).map(|(&a, &b)| a * b).sum();
                    for (o, &pp) in row.iter_mut().zip(p) {
                        *o = pp * (*o - dot);
                    }
                }
                gemm(len, nq, dh, T::one(), View::strided(probs, poff, 1, nk), View::strided(g.data(), qoff, d, 1), T::one(), ViewMut::strided(dv.data_mut(), koff, d, 1));
                gemm(nq, len, dh, scale, View::strided(&ds, 0, nk, 1), View::strided(kv.data(), koff, d, 1), T::one(), ViewMut::strided(dq.data_mut(), qoff, d, 1));
                gemm(len, nq, dh, scale, View::strided(&ds, 0, 1, nk), View::strided(qv.data(), qoff, d, 1), T::one(), ViewMut::strided(dk.data_mut(), koff, d, 1));
            }
        }
        vec![(q, dq), (k, dk), (v, dv)]
    }
}

fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
        .expect("zip_with on equal shapes")
}

/// Visits every in-bounds (output row, column offset, input row) triple of an
/// im2col unfolding.
fn for_each_tap(geom: ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let ConvGeom { batch, height, width, channels, kernel, stride } = geom;
    let pad = (kernel / 2) as isize;
    let (ho, wo) = (geom.out_height(), geom.out_width());
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = b * ho * wo + oy * wo + ox;
                for ky in 0..kernel {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let irow = b * height * width + iy as usize * width + ix as usize;
                        f(orow, (ky * kernel + kx) * channels, irow);
                    }
                }
            }
        }
    }
}
