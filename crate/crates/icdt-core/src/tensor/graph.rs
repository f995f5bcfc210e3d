//! Reverse-mode autodiff over a flat op tape.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order (ops can only reference earlier nodes). `backward` walks
//! the tape once in reverse, accumulating gradients additively, so shared
//! subexpressions receive the sum of all path contributions.
//!
//! A graph instance is confined to one logical thread for the duration of a
//! forward+backward pass; independent graphs are fully independent.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node<E> {
    value: Tensor<E>,
    grad: Option<Vec<E>>,
    needs_grad: bool,
    op: Op<E>,
}

enum Op<E> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddScalar { a: NodeId },
    MulScalar { a: NodeId, c: E },
    RowAdd { x: NodeId, v: NodeId },
    RowMul { x: NodeId, v: NodeId },
    Silu { a: NodeId },
    Gelu { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Sqrt { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    Reshape { a: NodeId },
    ConcatLast { a: NodeId, b: NodeId, a_last: usize, b_last: usize },
    SliceLast { a: NodeId, start: usize, len: usize, full: usize },
    LayerNorm { a: NodeId, xhat: Vec<E>, inv_std: Vec<E> },
    Attention { q: NodeId, k: NodeId, v: NodeId, probs: Vec<E> },
    SplitHeads { a: NodeId, heads: usize },
    MergeHeads { a: NodeId, heads: usize },
    Patchify { a: NodeId, p: usize },
    Unpatchify { a: NodeId, p: usize },
    Detach,
}

/// Raw `a[m,k] @ b[k,n]` into a fresh buffer (ikj loop order).
fn matmul_raw<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn sigmoid<E: Scalar>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

/// Tanh-approximation GELU, matching the forward used by `Graph::gelu`.
fn gelu_value<E: Scalar>(x: E) -> E {
    let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    half * x * (E::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_derivative<E: Scalar>(x: E) -> E {
    let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = E::one() - t * t;
    let d_inner = c * (E::one() + three * k * x * x);
    half * (E::one() + t) + half * x * sech2 * d_inner
}

pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf. Gradients are accumulated for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of `id`, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<E>> {
        let node = &self.nodes[id.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, op: Op<E>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data_of(&self, id: NodeId) -> &[E] {
        self.nodes[id.0].value.data()
    }

    // ── forward ops ──────────────────────────────────────────────────────

    /// `a[m,k] @ b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data_of(a), self.data_of(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(vec![m, n], data)?, needs, Op::MatMul { a, b }))
    }

    fn elementwise_pair(
        &self,
        a: NodeId,
        b: NodeId,
        op_name: &'static str,
        f: impl Fn(E, E) -> E,
    ) -> Result<Tensor<E>> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(Error::shape(op_name, sa, sb));
        }
        let data = self
            .data_of(a)
            .iter()
            .zip(self.data_of(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(sa.to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.elementwise_pair(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.elementwise_pair(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.elementwise_pair(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Mul { a, b }))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let cv = E::from_f64(c);
        let t = self.nodes[a.0].value.map(|x| x + cv);
        let needs = self.needs(a);
        self.push(t, needs, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let cv = E::from_f64(c);
        let t = self.nodes[a.0].value.map(|x| x * cv);
        let needs = self.needs(a);
        self.push(t, needs, Op::MulScalar { a, c: cv })
    }

    fn row_pair_check(&self, x: NodeId, v: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let (sx, sv) = (self.shape_of(x), self.shape_of(v));
        let cols = *sx.last().unwrap_or(&0);
        if cols == 0 || !(sv == [1, cols] || sv == [cols]) {
            return Err(Error::shape(op, sx, sv));
        }
        Ok((self.nodes[x.0].value.numel() / cols, cols))
    }

    /// `x + v` with `v` (shape `[1,c]` or `[c]`) broadcast across the rows of `x`.
    pub fn row_add(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.row_pair_check(x, v, "row_add")?;
        let t = {
            let xv = self.data_of(x);
            let vv = self.data_of(v);
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    data.push(xv[r * cols + c] + vv[c]);
                }
            }
            Tensor::from_vec(self.shape_of(x).to_vec(), data)?
        };
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(t, needs, Op::RowAdd { x, v }))
    }

    /// `x * v` with `v` broadcast across the rows of `x`.
    pub fn row_mul(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.row_pair_check(x, v, "row_mul")?;
        let t = {
            let xv = self.data_of(x);
            let vv = self.data_of(v);
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    data.push(xv[r * cols + c] * vv[c]);
                }
            }
            Tensor::from_vec(self.shape_of(x).to_vec(), data)?
        };
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(t, needs, Op::RowMul { x, v }))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(E) -> E, op: Op<E>) -> NodeId {
        let t = self.nodes[a.0].value.map(f);
        let needs = self.needs(a);
        self.push(t, needs, op)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * sigmoid(x), Op::Silu { a })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, gelu_value, Op::Gelu { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.exp(), Op::Exp { a })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.ln(), Op::Log { a })
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.sqrt(), Op::Sqrt { a })
    }

    /// Sum over all elements, shape `[1]`.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: E = self.data_of(a).iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), needs, Op::SumAll { a })
    }

    /// Mean over all elements, shape `[1]`.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.numel();
        let s: E = self.data_of(a).iter().copied().sum();
        let m = s / E::from_f64(n as f64);
        let needs = self.needs(a);
        self.push(Tensor::scalar(m), needs, Op::MeanAll { a })
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(Error::shape("reshape", self.shape_of(a), &shape));
        }
        let t = Tensor::from_vec(shape, self.data_of(a).to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(t, needs, Op::Reshape { a }))
    }

    /// Concatenate along the last axis (the channel extent for `[H,W,C]`).
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_last", &sa, &sb));
        }
        let a_last = sa[sa.len() - 1];
        let b_last = sb[sb.len() - 1];
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let t = {
            let av = self.data_of(a);
            let bv = self.data_of(b);
            let mut data = Vec::with_capacity(rows * (a_last + b_last));
            for r in 0..rows {
                data.extend_from_slice(&av[r * a_last..(r + 1) * a_last]);
                data.extend_from_slice(&bv[r * b_last..(r + 1) * b_last]);
            }
            let mut shape = sa.clone();
            shape[sa.len() - 1] = a_last + b_last;
            Tensor::from_vec(shape, data)?
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::ConcatLast { a, b, a_last, b_last }))
    }

    /// Take `[start, start+len)` along the last axis.
    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        let full = *sa.last().unwrap_or(&0);
        if sa.is_empty() || start + len > full || len == 0 {
            return Err(Error::InvalidParameter(format!(
                "slice_last [{start}, {}) out of range for shape {:?}",
                start + len,
                sa
            )));
        }
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let t = {
            let av = self.data_of(a);
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&av[r * full + start..r * full + start + len]);
            }
            let mut shape = sa.clone();
            shape[sa.len() - 1] = len;
            Tensor::from_vec(shape, data)?
        };
        let needs = self.needs(a);
        Ok(self.push(t, needs, Op::SliceLast { a, start, len, full }))
    }

    /// Per-row normalization over the last extent, no learned affine.
    pub fn layernorm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        let d = *sa.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::InvalidParameter(
                "layernorm requires a non-empty last extent".into(),
            ));
        }
        let rows = self.nodes[a.0].value.numel() / d;
        let dn = E::from_f64(d as f64);
        let epse = E::from_f64(eps);
        let mut xhat = vec![E::zero(); rows * d];
        let mut inv_std = vec![E::zero(); rows];
        {
            let av = self.data_of(a);
            for r in 0..rows {
                let row = &av[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<E>() / dn;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<E>() / dn;
                let is = E::one() / (var + epse).sqrt();
                inv_std[r] = is;
                for c in 0..d {
                    xhat[r * d + c] = (row[c] - mean) * is;
                }
            }
        }
        let t = Tensor::from_vec(sa, xhat.clone())?;
        let needs = self.needs(a);
        Ok(self.push(t, needs, Op::LayerNorm { a, xhat, inv_std }))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` all have shape `[h, S, dh]`; output matches. Attention is
    /// full (no mask); weights per row sum to 1.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        let sq = self.shape_of(q).to_vec();
        for other in [k, v] {
            if self.shape_of(other) != sq.as_slice() {
                return Err(Error::shape("attention", &sq, self.shape_of(other)));
            }
        }
        if sq.len() != 3 {
            return Err(Error::shape("attention", &sq, &sq));
        }
        let (h, s, dh) = (sq[0], sq[1], sq[2]);
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![E::zero(); h * s * s];
        let mut out = vec![E::zero(); h * s * dh];
        {
            let qv = self.data_of(q);
            let kv = self.data_of(k);
            let vv = self.data_of(v);
            for head in 0..h {
                let o = head * s * dh;
                let po = head * s * s;
                for i in 0..s {
                    let prow = &mut probs[po + i * s..po + (i + 1) * s];
                    let mut max_logit = E::neg_infinity();
                    for j in 0..s {
                        let mut dot = E::zero();
                        for c in 0..dh {
                            dot += qv[o + i * dh + c] * kv[o + j * dh + c];
                        }
                        let logit = dot * scale;
                        prow[j] = logit;
                        if logit > max_logit {
                            max_logit = logit;
                        }
                    }
                    let mut denom = E::zero();
                    for p in prow.iter_mut() {
                        *p = (*p - max_logit).exp();
                        denom += *p;
                    }
                    for p in prow.iter_mut() {
                        *p = *p / denom;
                    }
                    for j in 0..s {
                        let w = prow[j];
                        for c in 0..dh {
                            out[o + i * dh + c] += w * vv[o + j * dh + c];
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(sq, out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(t, needs, Op::Attention { q, k, v, probs }))
    }

    /// `[S, h*dh] -> [h, S, dh]`.
    pub fn split_heads(&mut self, a: NodeId, heads: usize) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        if sa.len() != 2 || heads == 0 || sa[1] % heads != 0 {
            return Err(Error::shape("split_heads", &sa, &[heads]));
        }
        let (s, d) = (sa[0], sa[1]);
        let dh = d / heads;
        let t = {
            let av = self.data_of(a);
            let mut data = vec![E::zero(); s * d];
            for head in 0..heads {
                for i in 0..s {
                    for c in 0..dh {
                        data[(head * s + i) * dh + c] = av[i * d + head * dh + c];
                    }
                }
            }
            Tensor::from_vec(vec![heads, s, dh], data)?
        };
        let needs = self.needs(a);
        Ok(self.push(t, needs, Op::SplitHeads { a, heads }))
    }

    /// `[h, S, dh] -> [S, h*dh]`. Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        if sa.len() != 3 {
            return Err(Error::shape("merge_heads", &sa, &sa));
        }
        let (heads, s, dh) = (sa[0], sa[1], sa[2]);
        let d = heads * dh;
        let t = {
            let av = self.data_of(a);
            let mut data = vec![E::zero(); s * d];
            for head in 0..heads {
                for i in 0..s {
                    for c in 0..dh {
                        data[i * d + head * dh + c] = av[(head * s + i) * dh + c];
                    }
                }
            }
            Tensor::from_vec(vec![s, d], data)?
        };
        let needs = self.needs(a);
        Ok(self.push(t, needs, Op::MergeHeads { a, heads }))
    }

    /// `[H, W, C] -> [S, p*p*C]` with `S = (H/p)*(W/p)`, grid scanned
    /// row-major, each patch flattened row-major.
    pub fn patchify(&mut self, a: NodeId, p: usize) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        if sa.len() != 3 || p == 0 || sa[0] % p != 0 || sa[1] % p != 0 {
            return Err(Error::Config(format!(
                "patchify: patch {p} does not divide spatial extents of {sa:?}"
            )));
        }
        let (h, w, c) = (sa[0], sa[1], sa[2]);
        let (gh, gw) = (h / p, w / p);
        let token = p * p * c;
        let t = {
            let av = self.data_of(a);
            let mut data = vec![E::zero(); gh * gw * token];
            for gy in 0..gh {
                for gx in 0..gw {
                    let t0 = (gy * gw + gx) * token;
                    for py in 0..p {
                        for px in 0..p {
                            let src = (((gy * p + py) * w) + gx * p + px) * c;
                            let dst = t0 + (py * p + px) * c;
                            data[dst..dst + c].copy_from_slice(&av[src..src + c]);
                        }
                    }
                }
            }
            Tensor::from_vec(vec![gh * gw, token], data)?
        };
        let needs = self.needs(a);
        Ok(self.push(t, needs, Op::Patchify { a, p }))
    }

    /// `[S, p*p*C] -> [H, W, C]`. Inverse of [`Graph::patchify`] for a square
    /// grid (`S` must be a perfect square).
    pub fn unpatchify(&mut self, a: NodeId, p: usize, channels: usize) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        if sa.len() != 2 || sa[1] != p * p * channels {
            return Err(Error::shape("unpatchify", &sa, &[p * p * channels]));
        }
        let s = sa[0];
        let grid = (s as f64).sqrt().round() as usize;
        if grid * grid != s {
            return Err(Error::Config(format!(
                "unpatchify: token count {s} is not a perfect square"
            )));
        }
        let (h, w) = (grid * p, grid * p);
        let token = p * p * channels;
        let t = {
            let av = self.data_of(a);
            let mut data = vec![E::zero(); h * w * channels];
            for gy in 0..grid {
                for gx in 0..grid {
                    let t0 = (gy * grid + gx) * token;
                    for py in 0..p {
                        for px in 0..p {
                            let dst = (((gy * p + py) * w) + gx * p + px) * channels;
                            let src = t0 + (py * p + px) * channels;
                            data[dst..dst + channels].copy_from_slice(&av[src..src + channels]);
                        }
                    }
                }
            }
            Tensor::from_vec(vec![h, w, channels], data)?
        };
        let needs = self.needs(a);
        Ok(self.push(t, needs, Op::Unpatchify { a, p }))
    }

    /// Pass-through value whose gradient is not propagated to `a`.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let t = self.nodes[a.0].value.clone();
        self.push(t, false, Op::Detach)
    }

    /// Mean squared error between two same-shape nodes, shape `[1]`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a single-element `loss` node.
    ///
    /// Each call computes one full set of gradients into a pass-local buffer
    /// and then adds it into the persistent per-node accumulators, so two
    /// backward passes through the same node sum their contributions.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::InvalidParameter(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut local: Vec<Option<Vec<E>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            local[loss.0] = Some(vec![E::one()]);
        }
        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match &local[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backward_node(i, &g, &mut local);
        }
        for (i, slot) in local.iter_mut().enumerate() {
            if let Some(g) = slot.take() {
                let numel = self.nodes[i].value.numel();
                let grad = self.nodes[i]
                    .grad
                    .get_or_insert_with(|| vec![E::zero(); numel]);
                for (acc, &c) in grad.iter_mut().zip(&g) {
                    *acc += c;
                }
            }
        }
        Ok(())
    }

    fn acc(&self, local: &mut [Option<Vec<E>>], id: NodeId, contribution: &[E]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = local[id.0].get_or_insert_with(|| vec![E::zero(); self.nodes[id.0].value.numel()]);
        for (g, &c) in slot.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    fn backward_node(&self, i: usize, g: &[E], local: &mut [Option<Vec<E>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.shape_of(a);
                let (m, k, n) = (sa[0], sa[1], self.shape_of(b)[1]);
                if self.needs(a) {
                    let bv = self.data_of(b);
                    let mut da = vec![E::zero(); m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let mut accum = E::zero();
                            for j in 0..n {
                                accum += g[r * n + j] * bv[p * n + j];
                            }
                            da[r * k + p] = accum;
                        }
                    }
                    self.acc(local, a, &da);
                }
                if self.needs(b) {
                    let av = self.data_of(a);
                    let mut db = vec![E::zero(); k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let av_rp = av[r * k + p];
                            if av_rp == E::zero() {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av_rp * g[r * n + j];
                            }
                        }
                    }
                    self.acc(local, b, &db);
                }
            }
            Op::Add { a, b } => {
                self.acc(local, *a, g);
                self.acc(local, *b, g);
            }
            Op::Sub { a, b } => {
                self.acc(local, *a, g);
                if self.needs(*b) {
                    let neg: Vec<E> = g.iter().map(|&x| -x).collect();
                    self.acc(local, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<E> = g
                        .iter()
                        .zip(self.data_of(*b))
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.acc(local, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<E> = g
                        .iter()
                        .zip(self.data_of(*a))
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.acc(local, *b, &db);
                }
            }
            Op::AddScalar { a } => {
                self.acc(local, *a, g);
            }
            Op::MulScalar { a, c } => {
                let da: Vec<E> = g.iter().map(|&gv| gv * *c).collect();
                self.acc(local, *a, &da);
            }
            Op::RowAdd { x, v } => {
                self.acc(local, *x, g);
                if self.needs(*v) {
                    let cols = self.nodes[v.0].value.numel();
                    let mut dv = vec![E::zero(); cols];
                    for (idx, &gv) in g.iter().enumerate() {
                        dv[idx % cols] += gv;
                    }
                    self.acc(local, *v, &dv);
                }
            }
            Op::RowMul { x, v } => {
                let cols = self.nodes[v.0].value.numel();
                if self.needs(*x) {
                    let vv = self.data_of(*v);
                    let dx: Vec<E> = g
                        .iter()
                        .enumerate()
                        .map(|(idx, &gv)| gv * vv[idx % cols])
                        .collect();
                    self.acc(local, *x, &dx);
                }
                if self.needs(*v) {
                    let xv = self.data_of(*x);
                    let mut dv = vec![E::zero(); cols];
                    for (idx, &gv) in g.iter().enumerate() {
                        dv[idx % cols] += gv * xv[idx];
                    }
                    self.acc(local, *v, &dv);
                }
            }
            Op::Silu { a } => {
                let da: Vec<E> = g
                    .iter()
                    .zip(self.data_of(*a))
                    .map(|(&gv, &x)| {
                        let s = sigmoid(x);
                        gv * s * (E::one() + x * (E::one() - s))
                    })
                    .collect();
                self.acc(local, *a, &da);
            }
            Op::Gelu { a } => {
                let da: Vec<E> = g
                    .iter()
                    .zip(self.data_of(*a))
                    .map(|(&gv, &x)| gv * gelu_derivative(x))
                    .collect();
                self.acc(local, *a, &da);
            }
            Op::Exp { a } => {
                let da: Vec<E> = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(&gv, &out)| gv * out)
                    .collect();
                self.acc(local, *a, &da);
            }
            Op::Log { a } => {
                let da: Vec<E> = g
                    .iter()
                    .zip(self.data_of(*a))
                    .map(|(&gv, &x)| gv / x)
                    .collect();
                self.acc(local, *a, &da);
            }
            Op::Sqrt { a } => {
                let two = E::from_f64(2.0);
                let da: Vec<E> = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(&gv, &out)| gv / (two * out))
                    .collect();
                self.acc(local, *a, &da);
            }
            Op::SumAll { a } => {
                let da = vec![g[0]; self.nodes[a.0].value.numel()];
                self.acc(local, *a, &da);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].value.numel();
                let da = vec![g[0] / E::from_f64(n as f64); n];
                self.acc(local, *a, &da);
            }
            Op::Reshape { a } => {
                self.acc(local, *a, g);
            }
            Op::ConcatLast { a, b, a_last, b_last } => {
                let (a_last, b_last) = (*a_last, *b_last);
                let rows = g.len() / (a_last + b_last);
                if self.needs(*a) {
                    let mut da = vec![E::zero(); rows * a_last];
                    for r in 0..rows {
                        da[r * a_last..(r + 1) * a_last].copy_from_slice(
                            &g[r * (a_last + b_last)..r * (a_last + b_last) + a_last],
                        );
                    }
                    self.acc(local, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![E::zero(); rows * b_last];
                    for r in 0..rows {
                        db[r * b_last..(r + 1) * b_last].copy_from_slice(
                            &g[r * (a_last + b_last) + a_last..(r + 1) * (a_last + b_last)],
                        );
                    }
                    self.acc(local, *b, &db);
                }
            }
            Op::SliceLast { a, start, len, full } => {
                let (start, len, full) = (*start, *len, *full);
                let rows = g.len() / len;
                let mut da = vec![E::zero(); rows * full];
                for r in 0..rows {
                    da[r * full + start..r * full + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.acc(local, *a, &da);
            }
            Op::LayerNorm { a, xhat, inv_std } => {
                let d = *self.shape_of(*a).last().unwrap();
                let rows = g.len() / d;
                let dn = E::from_f64(d as f64);
                let mut da = vec![E::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mean_g = gr.iter().copied().sum::<E>() / dn;
                    let mean_gx = gr.iter().zip(xr).map(|(&gv, &xv)| gv * xv).sum::<E>() / dn;
                    let is = inv_std[r];
                    for c in 0..d {
                        da[r * d + c] = is * (gr[c] - mean_g - xr[c] * mean_gx);
                    }
                }
                self.acc(local, *a, &da);
            }
            Op::Attention { q, k, v, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let shape = self.shape_of(q);
                let (h, s, dh) = (shape[0], shape[1], shape[2]);
                let scale = E::from_f64(1.0 / (dh as f64).sqrt());
                let qv = self.data_of(q);
                let kv = self.data_of(k);
                let vv = self.data_of(v);
                let mut dq = vec![E::zero(); h * s * dh];
                let mut dk = vec![E::zero(); h * s * dh];
                let mut dv = vec![E::zero(); h * s * dh];
                for head in 0..h {
                    let o = head * s * dh;
                    let po = head * s * s;
                    for iq in 0..s {
                        let prow = &probs[po + iq * s..po + (iq + 1) * s];
                        let mut dp = vec![E::zero(); s];
                        for j in 0..s {
                            let mut accum = E::zero();
                            for c in 0..dh {
                                accum += g[o + iq * dh + c] * vv[o + j * dh + c];
                            }
                            dp[j] = accum;
                        }
                        for j in 0..s {
                            let w = prow[j];
                            for c in 0..dh {
                                dv[o + j * dh + c] += w * g[o + iq * dh + c];
                            }
                        }
                        let dot: E = dp.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for j in 0..s {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            for c in 0..dh {
                                dq[o + iq * dh + c] += ds * kv[o + j * dh + c];
                                dk[o + j * dh + c] += ds * qv[o + iq * dh + c];
                            }
                        }
                    }
                }
                self.acc(local, q, &dq);
                self.acc(local, k, &dk);
                self.acc(local, v, &dv);
            }
            Op::SplitHeads { a, heads } => {
                let heads = *heads;
                let sa = self.shape_of(*a);
                let (s, d) = (sa[0], sa[1]);
                let dh = d / heads;
                let mut da = vec![E::zero(); s * d];
                for head in 0..heads {
                    for iq in 0..s {
                        for c in 0..dh {
                            da[iq * d + head * dh + c] += g[(head * s + iq) * dh + c];
                        }
                    }
                }
                self.acc(local, *a, &da);
            }
            Op::MergeHeads { a, heads } => {
                let heads = *heads;
                let sa = self.shape_of(*a);
                let (s, dh) = (sa[1], sa[2]);
                let d = heads * dh;
                let mut da = vec![E::zero(); heads * s * dh];
                for head in 0..heads {
                    for iq in 0..s {
                        for c in 0..dh {
                            da[(head * s + iq) * dh + c] += g[iq * d + head * dh + c];
                        }
                    }
                }
                self.acc(local, *a, &da);
            }
            Op::Patchify { a, p } => {
                let p = *p;
                let sa = self.shape_of(*a);
                let (h, w, c) = (sa[0], sa[1], sa[2]);
                let (gh, gw) = (h / p, w / p);
                let token = p * p * c;
                let mut da = vec![E::zero(); h * w * c];
                for gy in 0..gh {
                    for gx in 0..gw {
                        let t0 = (gy * gw + gx) * token;
                        for py in 0..p {
                            for px in 0..p {
                                let img = (((gy * p + py) * w) + gx * p + px) * c;
                                let tok = t0 + (py * p + px) * c;
                                for ch in 0..c {
                                    da[img + ch] += g[tok + ch];
                                }
                            }
                        }
                    }
                }
                self.acc(local, *a, &da);
            }
            Op::Unpatchify { a, p } => {
                let p = *p;
                let sa = self.shape_of(*a);
                let (s, token) = (sa[0], sa[1]);
                let c = token / (p * p);
                let grid = (s as f64).sqrt().round() as usize;
                let w = grid * p;
                let mut da = vec![E::zero(); s * token];
                for gy in 0..grid {
                    for gx in 0..grid {
                        let t0 = (gy * grid + gx) * token;
                        for py in 0..p {
                            for px in 0..p {
                                let img = (((gy * p + py) * w) + gx * p + px) * c;
                                let tok = t0 + (py * p + px) * c;
                                for ch in 0..c {
                                    da[tok + ch] += g[img + ch];
                                }
                            }
                        }
                    }
                }
                self.acc(local, *a, &da);
            }
        }
    }
}
