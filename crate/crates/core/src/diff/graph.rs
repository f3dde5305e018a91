//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. [`Graph::backward`]
//! walks the nodes in reverse creation order, which is a valid reverse
//! topological order because inputs always precede their consumers.
//!
//! Broadcasting is limited to one form: the right operand of `add`, `sub`
//! and `mul` may have a shape equal to a suffix of the left operand's shape
//! (bias vectors, positional tables, per-task embeddings), or be a
//! one-element tensor.

use indexmap::IndexMap;

use super::params::{Gradients, ParameterStore};
use super::tensor::{split_at_axis, strides, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var, usize),
    LayerNorm(Var),
    Concat(Vec<Var>, usize),
    Mean(Var, usize),
    Sum(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Select(Var, usize, usize),
    Narrow(Var, usize, usize),
    PairwiseSqDist(Var, Var),
    DepthwiseConv1d(Var, Var),
    KernelMean(Var, Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Per-row inverse standard deviations for layer normalization.
    aux: Vec<f64>,
}

/// A single forward pass. Parameters are read from the borrowed store and
/// bound to leaf nodes on first use; repeated use shares the same node.
pub struct Graph<'s> {
    store: Option<&'s ParameterStore>,
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            params: IndexMap::new(),
        }
    }

    /// A graph without a parameter store; only inputs and
    /// [`Graph::variable`] leaves are available.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            params: IndexMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf not backed by the store, reported under `name`.
    pub fn variable(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("leaf `{name}` already bound")));
        }
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds the named store parameter, reusing the node on repeated calls.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::Contract("graph has no parameter store".into()))?;
        let mut t = store.get(name)?.clone();
        t.grad = None;
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    // ---------------------------------------------------------------------
    // forward ops
    // ---------------------------------------------------------------------

    /// `a: [..., m, k] x b: [k, n] -> [..., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape_pair("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = self.value(a).len() / k;
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), ng))
    }

    /// `a: [..., m, k] x b: [..., k, n] -> [..., m, n]` with equal leading dims.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::shape_pair("bmm", &sa, &sb));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::BatchMatMul(a, b), ng))
    }

    fn broadcast_check(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if self.value(b).len() == 1 {
            return Ok(());
        }
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape_pair(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, op: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.broadcast_check(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let nb = tb.len();
        let out = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % nb]))
            .collect();
        Tensor::new(ta.shape(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, gelu);
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        let ng = self.ng(a);
        self.push(t, Op::Exp(a), ng)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let out = softmax_along(self.value(a).data(), &shape, axis);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(a, axis), ng))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().unwrap();
        let x = self.value(a).data();
        let rows = x.len() / w;
        let mut out = vec![0.0; x.len()];
        let mut inv = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv[r] = is;
            for (o, v) in out[r * w..(r + 1) * w].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let ng = self.ng(a);
        let v = self.push(Tensor::new(&shape, out).expect("same shape"), Op::LayerNorm(a), ng);
        self.nodes[v.0].aux = inv;
        v
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape_pair("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Mean along `axis`; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("mean axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        if inner == 1 {
            for (o, row) in out.iter_mut().zip(x.chunks_exact(len)) {
                *o = row.iter().sum();
            }
        } else {
            for (dst, block) in out.chunks_exact_mut(inner).zip(x.chunks_exact(len * inner)) {
                for row in block.chunks_exact(inner) {
                    dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape: Vec<usize> = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Mean(a, axis), ng))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let map = permute_map(&shape, perm);
        let x = self.value(a).data();
        let out = map.iter().map(|&i| x[i]).collect();
        let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Permute(a, perm.to_vec()), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Shape(format!("transpose needs rank >= 2, got {:?}", self.shape(a))));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Picks `index` along `axis`, removing the axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::Shape(format!("select({axis}, {index}) out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * len + index) * inner;
            out.extend_from_slice(&x[base..base + inner]);
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Select(a, axis, index), ng))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, full, inner) = split_at_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Narrow(a, axis, start), ng))
    }

    /// `a: [..., m, w], b: [..., n, w] -> [..., m, n]` of squared Euclidean
    /// distances between rows.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 1] {
            return Err(Error::shape_pair("pairwise_sq_dist", &sa, &sb));
        }
        let (m, n, w) = (sa[r - 2], sb[r - 2], sa[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            for i in 0..m {
                let ra = &ad[(t * m + i) * w..(t * m + i + 1) * w];
                for j in 0..n {
                    let rb = &bd[(t * n + j) * w..(t * n + j + 1) * w];
                    out[(t * m + i) * n + j] = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
                }
            }
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::PairwiseSqDist(a, b), ng))
    }

    /// Per-channel 1-D convolution along the second-to-last axis with zero
    /// "same" padding. `x: [..., len, channels]`, `w: [channels, kernel]`,
    /// kernel odd.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let r = sx.len();
        if r < 2 || sw.len() != 2 || sw[0] != sx[r - 1] || sw[1] % 2 == 0 {
            return Err(Error::shape_pair("depthwise_conv1d", &sx, &sw));
        }
        let (len, ch, k) = (sx[r - 2], sx[r - 1], sw[1]);
        let half = k / 2;
        let batch = self.value(x).len() / (len * ch);
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            let base = b * len * ch;
            for l in 0..len {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for t in 0..k {
                        let src = l as isize + t as isize - half as isize;
                        if src >= 0 && (src as usize) < len {
                            acc += wd[c * k + t] * xd[base + src as usize * ch + c];
                        }
                    }
                    out[base + l * ch + c] = acc;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(Tensor::new(&sx, out)?, Op::DepthwiseConv1d(x, w), ng))
    }

    /// Mean Gaussian kernel value between row sets:
    /// `a: [..., m, w], b: [..., n, w] -> [...]` (shape `[1]` for 2-D input)
    /// with entries `mean_ij exp(-gamma ||a_i - b_j||^2)`.
    pub fn kernel_mean(&mut self, a: Var, b: Var, gamma: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 1] {
            return Err(Error::shape_pair("kernel_mean", &sa, &sb));
        }
        let (m, n, w) = (sa[r - 2], sb[r - 2], sa[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        // identical operands give a symmetric kernel matrix with a unit
        // diagonal: evaluate the strict upper triangle and mirror it
        let same = m == n && ad.iter().zip(bd).all(|(x, y)| x.to_bits() == y.to_bits());
        let mut kern = vec![0.0; batch * m * n];
        let mut out = vec![0.0; batch];
        for t in 0..batch {
            let mut acc = 0.0;
            for i in 0..m {
                let ra = &ad[(t * m + i) * w..(t * m + i + 1) * w];
                let j0 = if same { i + 1 } else { 0 };
                if same {
                    kern[(t * m + i) * n + i] = 1.0;
                }
                for j in j0..n {
                    let rb = &bd[(t * n + j) * w..(t * n + j + 1) * w];
                    let d2: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
                    let k = (-gamma * d2).exp();
                    kern[(t * m + i) * n + j] = k;
                    if same {
                        kern[(t * m + j) * n + i] = k;
                    }
                    acc += k;
                }
            }
            out[t] = if same {
                (2.0 * acc + m as f64) / (m * m) as f64
            } else {
                acc / (m * n) as f64
            };
        }
        let shape = if r == 2 { vec![1] } else { sa[..r - 2].to_vec() };
        let ng = self.ng(a) || self.ng(b);
        let v = self.push(Tensor::new(&shape, out)?, Op::KernelMean(a, b, gamma), ng);
        self.nodes[v.0].aux = kern;
        Ok(v)
    }

    // ---------------------------------------------------------------------
    // composites
    // ---------------------------------------------------------------------

    /// `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// `x * gamma + beta` over the last axis after layer normalization.
    pub fn layer_norm_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.layer_norm(x);
        let s = self.mul(n, gamma)?;
        self.add(s, beta)
    }

    // ---------------------------------------------------------------------
    // backward
    // ---------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Returns gradients for every
    /// bound parameter; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }
        let mut out = Gradients::new();
        for (name, v) in &self.params {
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.value(*v).len()]);
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let rows = ta.len() / k;
                if self.ng(*a) {
                    let ga = self.acc(grads, *a);
                    gemm(rows, n, k, g, false, tb.data(), true, ga);
                }
                if self.ng(*b) {
                    let gb = self.acc(grads, *b);
                    gemm(k, rows, n, ta.data(), true, g, false, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let r = ta.ndim();
                let (m, k, n) = (ta.shape()[r - 2], ta.shape()[r - 1], tb.shape()[r - 1]);
                let batch = ta.len() / (m * k);
                if self.ng(*a) {
                    let ga = self.acc(grads, *a);
                    for t in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &tb.data()[t * k * n..(t + 1) * k * n],
                            true,
                            &mut ga[t * m * k..(t + 1) * m * k],
                        );
                    }
                }
                if self.ng(*b) {
                    let gb = self.acc(grads, *b);
                    for t in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &ta.data()[t * m * k..(t + 1) * m * k],
                            true,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &mut gb[t * k * n..(t + 1) * k * n],
                        );
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.ng(*a) {
                    let ga = self.acc(grads, *a);
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
                }
                if self.ng(*b) {
                    let gb = self.acc(grads, *b);
                    let nb = gb.len();
                    for (j, gi) in g.iter().enumerate() {
                        gb[j % nb] += sign * gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let nb = tb.len();
                if self.ng(*a) {
                    let ga = self.acc(grads, *a);
                    for (j, gi) in g.iter().enumerate() {
                        ga[j] += gi * tb[j % nb];
                    }
                }
                if self.ng(*b) {
                    let gb = self.acc(grads, *b);
                    for (j, gi) in g.iter().enumerate() {
                        gb[j % nb] += gi * ta[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = self.acc(grads, *a);
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let ga = self.acc(grads, *a);
                for j in 0..g.len() {
                    ga[j] += g[j] * gelu_grad(x[j]);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = self.acc(grads, *a);
                for j in 0..g.len() {
                    if x[j] > 0.0 {
                        ga[j] += g[j];
                    }
                }
            }
            Op::Exp(a) => {
                let ga = self.acc(grads, *a);
                for j in 0..g.len() {
                    ga[j] += g[j] * y[j];
                }
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_at_axis(node.value.shape(), *axis);
                let ga = self.acc(grads, *a);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                        for l in 0..len {
                            ga[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm(a) => {
                let w = *node.value.shape().last().unwrap();
                let ga = self.acc(grads, *a);
                for (r, is) in node.aux.iter().enumerate() {
                    let gr = &g[r * w..(r + 1) * w];
                    let yr = &y[r * w..(r + 1) * w];
                    let mg = gr.iter().sum::<f64>() / w as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for j in 0..w {
                        ga[r * w + j] += is * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let total = node.value.shape()[*axis];
                let (outer, _, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.ng(*p) {
                        let gp = self.acc(grads, *p);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                gp[dst + j] += g[src + j];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Mean(a, axis) => {
                let (outer, len, inner) = split_at_axis(self.shape(*a), *axis);
                let inv = 1.0 / len as f64;
                let ga = self.acc(grads, *a);
                debug_assert_eq!(ga.len(), outer * len * inner);
                for (block, go) in ga.chunks_exact_mut(len * inner).zip(g.chunks_exact(inner)) {
                    for row in block.chunks_exact_mut(inner) {
                        row.iter_mut().zip(go).for_each(|(d, v)| *d += v * inv);
                    }
                }
            }
            Op::Sum(a) => {
                let ga = self.acc(grads, *a);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Permute(a, perm) => {
                let map = permute_map(self.shape(*a), perm);
                let ga = self.acc(grads, *a);
                for (o, &src) in map.iter().enumerate() {
                    ga[src] += g[o];
                }
            }
            Op::Reshape(a) => {
                let ga = self.acc(grads, *a);
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
            }
            Op::Select(a, axis, index) => {
                let (outer, len, inner) = split_at_axis(self.shape(*a), *axis);
                let ga = self.acc(grads, *a);
                for o in 0..outer {
                    let base = (o * len + index) * inner;
                    for i in 0..inner {
                        ga[base + i] += g[o * inner + i];
                    }
                }
            }
            Op::Narrow(a, axis, start) => {
                let (outer, full, inner) = split_at_axis(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                let ga = self.acc(grads, *a);
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    for j in 0..len * inner {
                        ga[base + j] += g[o * len * inner + j];
                    }
                }
            }
            Op::KernelMean(a, b, gamma) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let r = ta.ndim();
                let (m, n, w) = (ta.shape()[r - 2], tb.shape()[r - 2], ta.shape()[r - 1]);
                let batch = ta.len() / (m * w);
                let (ad, bd) = (ta.data(), tb.data());
                let kern = &node.aux;
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                for t in 0..batch {
                    let c = -2.0 * gamma * g[t] / (m * n) as f64;
                    for i in 0..m {
                        for j in 0..n {
                            let kij = c * kern[(t * m + i) * n + j];
                            for q in 0..w {
                                let ia = (t * m + i) * w + q;
                                let ib = (t * n + j) * w + q;
                                let diff = kij * (ad[ia] - bd[ib]);
                                ga[ia] += diff;
                                gb[ib] -= diff;
                            }
                        }
                    }
                }
                if self.ng(*a) {
                    let dst = self.acc(grads, *a);
                    dst.iter_mut().zip(&ga).for_each(|(x, v)| *x += v);
                }
                if self.ng(*b) {
                    let dst = self.acc(grads, *b);
                    dst.iter_mut().zip(&gb).for_each(|(x, v)| *x += v);
                }
            }
            Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let r = ta.ndim();
                let (m, n, w) = (ta.shape()[r - 2], tb.shape()[r - 2], ta.shape()[r - 1]);
                let batch = ta.len() / (m * w);
                let (ad, bd) = (ta.data(), tb.data());
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                for t in 0..batch {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = 2.0 * g[(t * m + i) * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for c in 0..w {
                                let ia = (t * m + i) * w + c;
                                let ib = (t * n + j) * w + c;
                                let diff = gij * (ad[ia] - bd[ib]);
                                ga[ia] += diff;
                                gb[ib] -= diff;
                            }
                        }
                    }
                }
                if self.ng(*a) {
                    let dst = self.acc(grads, *a);
                    dst.iter_mut().zip(&ga).for_each(|(x, v)| *x += v);
                }
                if self.ng(*b) {
                    let dst = self.acc(grads, *b);
                    dst.iter_mut().zip(&gb).for_each(|(x, v)| *x += v);
                }
            }
            Op::DepthwiseConv1d(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let r = tx.ndim();
                let (len, ch, k) = (tx.shape()[r - 2], tx.shape()[r - 1], tw.shape()[1]);
                let half = k / 2;
                let batch = tx.len() / (len * ch);
                let (xd, wd) = (tx.data(), tw.data());
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                for b in 0..batch {
                    let base = b * len * ch;
                    for l in 0..len {
                        for c in 0..ch {
                            let go = g[base + l * ch + c];
                            for t in 0..k {
                                let src = l as isize + t as isize - half as isize;
                                if src >= 0 && (src as usize) < len {
                                    let s = base + src as usize * ch + c;
                                    gw[c * k + t] += go * xd[s];
                                    gx[s] += go * wd[c * k + t];
                                }
                            }
                        }
                    }
                }
                if self.ng(*x) {
                    let dst = self.acc(grads, *x);
                    dst.iter_mut().zip(&gx).for_each(|(a, v)| *a += v);
                }
                if self.ng(*w) {
                    let dst = self.acc(grads, *w);
                    dst.iter_mut().zip(&gw).for_each(|(a, v)| *a += v);
                }
            }
        }
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softmax_along(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_at_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| x[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in 0..len {
                let e = (x[idx(l)] - max).exp();
                out[idx(l)] = e;
                z += e;
            }
            for l in 0..len {
                out[idx(l)] /= z;
            }
        }
    }
    out
}

/// For each output linear index of the permuted tensor, the source index.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides_src: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            src += out_strides_src[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= out_strides_src[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// `c += op(a) * op(b)` for row-major `op(a): m x k`, `op(b): k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
