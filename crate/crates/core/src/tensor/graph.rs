use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{strides, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Deliberately wrong backward rule, used to prove the gradient checker
/// notices a broken derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    Gelu,
    Softmax,
    LayerNorm,
    Conv2d,
    MatMul,
}

impl BackwardFault {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "gelu" => BackwardFault::Gelu,
            "softmax" => BackwardFault::Softmax,
            "layer_norm" | "layernorm" => BackwardFault::LayerNorm,
            "conv2d" | "conv" => BackwardFault::Conv2d,
            "matmul" => BackwardFault::MatMul,
            _ => return None,
        })
    }
}

/// Stride, dilation, zero padding and group count of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            dilation: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Relu(NodeId),
    Gelu(NodeId),
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    AvgPool {
        x: NodeId,
        l: usize,
    },
    Upsample {
        x: NodeId,
        factor: usize,
    },
    Reshape(NodeId),
    Permute {
        x: NodeId,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<i32>,
        valid: Vec<bool>,
        probs: Vec<F>,
        count: usize,
    },
    MaskedL1 {
        pred: NodeId,
        target: Vec<F>,
        valid: Vec<bool>,
        count: usize,
    },
    Cosine {
        pred: NodeId,
        target: Vec<F>,
        valid: Vec<bool>,
        count: usize,
    },
    WeightedBce {
        logits: NodeId,
        target: Vec<F>,
        valid: Vec<bool>,
        pos_weight: F,
        neg_weight: F,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Operation tape for one forward pass.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction and [`Graph::backward`] is a single reverse sweep.
/// Leaf gradients accumulate across `backward` calls until
/// [`Graph::zero_grads`].
pub struct Graph<'p, F: Real = f32> {
    nodes: Vec<Node<F>>,
    leaf_grads: HashMap<NodeId, Vec<F>>,
    params: Option<&'p ParamStore<F>>,
    bound: HashMap<ParamId, NodeId>,
    fault: Option<BackwardFault>,
}

impl<F: Real> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<F: Real>(x: F) -> F {
    let x = x.as_f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    F::of(0.5 * x * (1.0 + u.tanh()))
}

#[inline]
fn gelu_grad<F: Real>(x: F) -> F {
    let x = x.as_f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    F::of(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x))
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            params: None,
            bound: HashMap::new(),
            fault: None,
        }
    }

    /// A graph that can bind parameters from `params`.
    pub fn with_params(params: &'p ParamStore<F>) -> Self {
        Graph {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn inject_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient on [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Binds parameter `id` from the attached store, once per graph.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.bound.get(&id) {
            return n;
        }
        let store = self.params.expect("graph has no parameter store attached");
        let node = self.variable(store.value(id).clone());
        self.bound.insert(id, node);
        node
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if it received one.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<F>> {
        self.leaf_grads
            .get(&id)
            .map(|g| Tensor::new(self.shape(id).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.clear();
    }

    /// Gradients of every bound parameter, ordered by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<F>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&pid, node)| self.leaf_grads.get(node).map(|g| (pid, g.clone())))
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }

    // ---- elementwise ----

    fn binary_shapes(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || sb.iter().product::<usize>() == 1 {
            Ok(sa.to_vec())
        } else if sa.iter().product::<usize>() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn zip_broadcast(&self, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> Vec<F> {
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if da.len() == db.len() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 {
            da.iter().map(|&x| f(x, db[0])).collect()
        } else {
            db.iter().map(|&y| f(da[0], y)).collect()
        }
    }

    /// Elementwise sum; either side may be a one-element tensor.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shapes("add", a, b)?;
        let data = self.zip_broadcast(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Elementwise product; either side may be a one-element tensor.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shapes("mul", a, b)?;
        let data = self.zip_broadcast(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let s = F::of(s);
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(F::zero()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Sum of all elements of `nodes` (each a scalar or any shape), as one scalar.
    pub fn sum_all(&mut self, nodes: &[NodeId]) -> Result<NodeId> {
        let mut it = nodes.iter();
        let first = *it.next().ok_or_else(|| Error::Invalid("sum_all of nothing".into()))?;
        let mut acc = self.sum(first);
        for &n in it {
            let s = self.sum(n);
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    // ---- linear algebra ----

    /// `a[M×K] · b[K×N]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x[N×Cin] · w[Cout×Cin]ᵀ + b[Cout]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (n, cin, cout) = (sx[0], sx[1], sw[0]);
        let mut out = vec![F::zero(); n * cout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(Error::shape("linear bias", bv.shape(), &[cout]));
            }
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::matmul_a_bt_acc(self.value(x).data(), self.value(w).data(), n, cin, cout, &mut out);
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(vec![n, cout], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_lastdim(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let c = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let inv = F::one() / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out).unwrap(), Op::Softmax(a), rg)
    }

    /// Normalizes each slice along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / c;
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        let inv_c = F::of(1.0 / c as f64);
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<F>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_c;
            let rs = F::one() / (var + F::of(eps)).sqrt();
            rstd[r] = rs;
            for i in 0..c {
                let h = (row[i] - mean) * rs;
                xhat[r * c + i] = h;
                out[r * c + i] = h * g[i] + b[i];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- spatial ----

    /// Cross-correlation of `x[Cin×H×W]` with `w[Cout×(Cin/groups)×k×k]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: Conv2dSpec) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let Conv2dSpec {
            stride,
            dilation,
            padding,
            groups,
        } = spec;
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(Error::config("conv2d stride, dilation and groups must be positive"));
        }
        let (cin, h, wd, cout, k) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
        if cin % groups != 0 || cout % groups != 0 || sw[1] != cin / groups {
            return Err(Error::shape("conv2d groups", &sx, &sw));
        }
        let (Some(ho), Some(wo)) = (
            ConvGeom::out_len(h, k, stride, dilation, padding),
            ConvGeom::out_len(wd, k, stride, dilation, padding),
        ) else {
            return Err(Error::config(format!(
                "conv2d output size is nonpositive for input {sx:?}, kernel {k}, dilation {dilation}, padding {padding}"
            )));
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            dilation,
            padding,
            groups,
            ho,
            wo,
        };
        let mut out = vec![F::zero(); cout * ho * wo];
        kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(vec![cout, ho, wo], out)?, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Non-overlapping `l×l` mean pooling of `x[C×H×W]`.
    pub fn avg_pool2d(&mut self, x: NodeId, l: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || l == 0 || s[1] % l != 0 || s[2] % l != 0 {
            return Err(Error::config(format!("avg_pool2d: spatial size {s:?} not divisible by {l}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![F::zero(); c * (h / l) * (w / l)];
        kernels::avg_pool_forward(self.value(x).data(), c, h, w, l, &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, h / l, w / l], out)?, Op::AvgPool { x, l }, rg))
    }

    /// Bilinear upsampling of `x[C×H×W]` by an integer factor (align corners off).
    pub fn upsample_bilinear(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(Error::config(format!("upsample_bilinear: bad input {s:?} or factor {factor}")));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![F::zero(); c * h * w * factor * factor];
        kernels::upsample_forward(self.value(x).data(), c, h, w, factor, &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![c, h * factor, w * factor], out)?,
            Op::Upsample { x, factor },
            rg,
        ))
    }

    // ---- layout ----

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Invalid(format!("invalid permutation {axes:?} for shape {s:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let src = permute_offsets(&s, axes);
        let xv = self.value(x).data();
        let out: Vec<F> = src.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Invalid("concat of empty list".into()))?;
        if inputs.len() == 1 {
            return Ok(*first);
        }
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &i in inputs {
            let s = self.shape(i);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in inputs {
                let chunk = self.shape(i)[axis] * inner;
                out.extend_from_slice(&self.value(i).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Invalid(format!(
                "narrow [{start}, {}) on axis {axis} out of range for {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    // ---- fused losses ----

    fn check_mask(&self, op: &'static str, plane: usize, valid: &[bool]) -> Result<usize> {
        if valid.len() != plane {
            return Err(Error::shape(op, &[plane], &[valid.len()]));
        }
        let n = valid.iter().filter(|&&v| v).count();
        if n == 0 {
            return Err(Error::EmptyEvaluation("loss mask selects no pixels"));
        }
        Ok(n)
    }

    /// Mean pixel cross-entropy of `logits[K×H×W]` against labels.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[i32], valid: &[bool]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 3 || targets.len() != s[1] * s[2] {
            return Err(Error::shape("cross_entropy", &s, &[targets.len()]));
        }
        let (k, plane) = (s[0], s[1] * s[2]);
        let count = self.check_mask("cross_entropy mask", plane, valid)?;
        let lv = self.value(logits).data();
        let mut probs = vec![F::zero(); k * plane];
        let mut loss = 0.0f64;
        for p in 0..plane {
            let m = (0..k).map(|c| lv[c * plane + p].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (lv[c * plane + p].as_f64() - m).exp()).sum();
            for c in 0..k {
                probs[c * plane + p] = F::of((lv[c * plane + p].as_f64() - m).exp() / z);
            }
            if valid[p] {
                let t = targets[p];
                if t < 0 || t as usize >= k {
                    return Err(Error::Invalid(format!("label {t} outside [0, {k})")));
                }
                loss += m + z.ln() - lv[t as usize * plane + p].as_f64();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(F::of(loss / count as f64)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean absolute error over valid pixels of every channel.
    pub fn masked_l1(&mut self, pred: NodeId, target: &Tensor<F>, valid: &[bool]) -> Result<NodeId> {
        let s = self.shape(pred).to_vec();
        if s.len() != 3 || target.shape() != s.as_slice() {
            return Err(Error::shape("masked_l1", &s, target.shape()));
        }
        let plane = s[1] * s[2];
        let count = self.check_mask("masked_l1 mask", plane, valid)? * s[0];
        let pv = self.value(pred).data();
        let mut loss = F::zero();
        for (i, (&p, &t)) in pv.iter().zip(target.data()).enumerate() {
            if valid[i % plane] {
                loss += (p - t).abs();
            }
        }
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss / F::of(count as f64)),
            Op::MaskedL1 {
                pred,
                target: target.data().to_vec(),
                valid: valid.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Mean of `1 - cos(pred, target)` over valid pixels of a 3-channel field.
    pub fn cosine_loss(&mut self, pred: NodeId, target: &Tensor<F>, valid: &[bool]) -> Result<NodeId> {
        let s = self.shape(pred).to_vec();
        if s.len() != 3 || target.shape() != s.as_slice() {
            return Err(Error::shape("cosine_loss", &s, target.shape()));
        }
        let (c, plane) = (s[0], s[1] * s[2]);
        let count = self.check_mask("cosine_loss mask", plane, valid)?;
        let (pv, tv) = (self.value(pred).data(), target.data());
        let mut loss = 0.0;
        for p in (0..plane).filter(|&p| valid[p]) {
            let (mut dot, mut nn) = (0.0, 0.0);
            for ch in 0..c {
                let a = pv[ch * plane + p].as_f64();
                dot += a * tv[ch * plane + p].as_f64();
                nn += a * a;
            }
            loss += 1.0 - dot / (nn + 1e-12).sqrt();
        }
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(F::of(loss / count as f64)),
            Op::Cosine {
                pred,
                target: tv.to_vec(),
                valid: valid.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Class-balanced binary cross-entropy on logits `[1×H×W]`. Positives are
    /// weighted by the negative fraction and vice versa; unweighted when the
    /// valid pixels are all of one class.
    pub fn weighted_bce(&mut self, logits: NodeId, target: &Tensor<F>, valid: &[bool]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 3 || s[0] != 1 || target.shape() != s.as_slice() {
            return Err(Error::shape("weighted_bce", &s, target.shape()));
        }
        let plane = s[1] * s[2];
        let count = self.check_mask("weighted_bce mask", plane, valid)?;
        let tv = target.data();
        let pos = (0..plane).filter(|&p| valid[p] && tv[p] > F::of(0.5)).count();
        // with only one class present the balanced weights degenerate to
        // zero, so fall back to the plain loss
        let (pos_w, neg_w) = if pos == 0 || pos == count {
            (1.0, 1.0)
        } else {
            ((count - pos) as f64 / count as f64, pos as f64 / count as f64)
        };
        let lv = self.value(logits).data();
        let mut loss = 0.0;
        for p in (0..plane).filter(|&p| valid[p]) {
            let z = lv[p].as_f64();
            if tv[p] > F::of(0.5) {
                loss += pos_w * softplus(-z);
            } else {
                loss += neg_w * softplus(z);
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(F::of(loss / count as f64)),
            Op::WeightedBce {
                logits,
                target: tv.to_vec(),
                valid: valid.to_vec(),
                pos_weight: F::of(pos_w),
                neg_weight: F::of(neg_w),
                count,
            },
            rg,
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match self.leaf_grads.get_mut(&NodeId(i)) {
                    Some(buf) => add_into(buf, &gy),
                    None => {
                        self.leaf_grads.insert(NodeId(i), gy);
                    }
                }
                continue;
            }
            self.backward_node(i, &gy, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gy: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let val = |id: NodeId| nodes[id.0].value.data();
        let wants = |id: NodeId| nodes[id.0].requires_grad;
        // Gradient buffer for `id`, created on first use.
        macro_rules! gbuf {
            ($id:expr) => {{
                let id: NodeId = $id;
                let n = nodes[id.0].value.numel();
                grads[id.0].get_or_insert_with(|| vec![F::zero(); n])
            }};
        }
        let fault = |f: BackwardFault| -> F {
            if self.fault == Some(f) {
                F::of(1.05)
            } else {
                F::one()
            }
        };
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                for &x in [a, b] {
                    if wants(x) {
                        let g = gbuf!(x);
                        if g.len() == gy.len() {
                            add_into(g, gy);
                        } else {
                            g[0] += gy.iter().copied().sum::<F>();
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (&x, &other) in [(a, b), (b, a)] {
                    if !wants(x) {
                        continue;
                    }
                    let ov = val(other);
                    let g = gbuf!(x);
                    if g.len() == gy.len() {
                        if ov.len() == 1 {
                            g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * ov[0]);
                        } else {
                            g.iter_mut().zip(gy).zip(ov).for_each(|((g, &d), &o)| *g += d * o);
                        }
                    } else {
                        g[0] += gy.iter().zip(ov).map(|(&d, &o)| d * o).sum::<F>();
                    }
                }
            }
            Op::Scale(a, s) => {
                let g = gbuf!(*a);
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *s);
            }
            Op::Relu(a) => {
                let xv = val(*a);
                let g = gbuf!(*a);
                for ((g, &d), &x) in g.iter_mut().zip(gy).zip(xv) {
                    if x > F::zero() {
                        *g += d;
                    }
                }
            }
            Op::Gelu(a) => {
                let k = fault(BackwardFault::Gelu);
                let xv = val(*a);
                let g = gbuf!(*a);
                for ((g, &d), &x) in g.iter_mut().zip(gy).zip(xv) {
                    *g += d * gelu_grad(x) * k;
                }
            }
            Op::MatMul(a, b) => {
                let k_f = fault(BackwardFault::MatMul);
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let gy_s: Vec<F>;
                let gy = if k_f != F::one() {
                    gy_s = gy.iter().map(|&v| v * k_f).collect();
                    &gy_s[..]
                } else {
                    gy
                };
                if wants(*a) {
                    let bv = val(*b);
                    kernels::matmul_a_bt_acc(gy, bv, m, n, k, gbuf!(*a));
                }
                if wants(*b) {
                    let av = val(*a);
                    kernels::matmul_at_b_acc(av, gy, m, k, n, gbuf!(*b));
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
                let (n, cin, cout) = (sx[0], sx[1], sw[0]);
                if wants(*x) {
                    let wv = val(*w);
                    kernels::matmul_acc(gy, wv, n, cout, cin, gbuf!(*x));
                }
                if wants(*w) {
                    let xv = val(*x);
                    kernels::matmul_at_b_acc(gy, xv, n, cout, cin, gbuf!(*w));
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let g = gbuf!(*b);
                        for row in gy.chunks(cout) {
                            add_into(g, row);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let k_f = fault(BackwardFault::Softmax);
                let y = nodes[i].value.data();
                let c = *nodes[i].value.shape().last().unwrap();
                let g = gbuf!(*a);
                for ((gr, dr), yr) in g.chunks_mut(c).zip(gy.chunks(c)).zip(y.chunks(c)) {
                    let dot: F = dr.iter().zip(yr).map(|(&d, &y)| d * y).sum();
                    for ((g, &d), &y) in gr.iter_mut().zip(dr).zip(yr) {
                        *g += y * (d - dot) * k_f;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let k_f = fault(BackwardFault::LayerNorm);
                let c = nodes[gamma.0].value.numel();
                let gv = val(*gamma);
                if wants(*gamma) {
                    let g = gbuf!(*gamma);
                    for (dr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            g[j] += dr[j] * hr[j];
                        }
                    }
                }
                if wants(*beta) {
                    let g = gbuf!(*beta);
                    for dr in gy.chunks(c) {
                        add_into(g, dr);
                    }
                }
                if wants(*x) {
                    let inv_c = F::of(1.0 / c as f64);
                    let g = gbuf!(*x);
                    for (r, ((gr, dr), hr)) in g.chunks_mut(c).zip(gy.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..c {
                            let dh = dr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let dh = dr[j] * gv[j];
                            gr[j] += rstd[r] * (dh - m1 - hr[j] * m2) * k_f;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let k_f = fault(BackwardFault::Conv2d);
                let gy_s: Vec<F>;
                let gy = if k_f != F::one() {
                    gy_s = gy.iter().map(|&v| v * k_f).collect();
                    &gy_s[..]
                } else {
                    gy
                };
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = wants(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![F::zero(); xv.len()]));
                let mut dw = wants(*w).then(|| grads[w.0].take().unwrap_or_else(|| vec![F::zero(); wv.len()]));
                let mut db = b.filter(|b| wants(*b)).map(|b| {
                    grads[b.0]
                        .take()
                        .unwrap_or_else(|| vec![F::zero(); nodes[b.0].value.numel()])
                });
                kernels::conv2d_backward(geom, xv, wv, gy, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(d) = dx {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    grads[w.0] = Some(d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    grads[b.0] = Some(d);
                }
            }
            Op::AvgPool { x, l } => {
                let s = nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                kernels::avg_pool_backward(gy, c, h, w, *l, gbuf!(*x));
            }
            Op::Upsample { x, factor } => {
                let s = nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                kernels::upsample_backward(gy, c, h, w, *factor, gbuf!(*x));
            }
            Op::Reshape(x) => add_into(gbuf!(*x), gy),
            Op::Permute { x, axes } => {
                let src = permute_offsets(nodes[x.0].value.shape(), axes);
                let g = gbuf!(*x);
                for (&s, &d) in src.iter().zip(gy) {
                    g[s] += d;
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = nodes[i].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut off = 0;
                for &inp in inputs {
                    let chunk = nodes[inp.0].value.shape()[*axis] * inner;
                    if wants(inp) {
                        let g = gbuf!(inp);
                        for o in 0..outer {
                            add_into(&mut g[o * chunk..(o + 1) * chunk], &gy[o * total + off..o * total + off + chunk]);
                        }
                    }
                    off += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = nodes[x.0].value.shape();
                let len = nodes[i].value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let full = s[*axis];
                let g = gbuf!(*x);
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    add_into(&mut g[base..base + len * inner], &gy[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Op::Sum(x) => {
                let d = gy[0];
                gbuf!(*x).iter_mut().for_each(|g| *g += d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                valid,
                probs,
                count,
            } => {
                let s = nodes[logits.0].value.shape();
                let (k, plane) = (s[0], s[1] * s[2]);
                let scale = gy[0] / F::of(*count as f64);
                let g = gbuf!(*logits);
                for p in (0..plane).filter(|&p| valid[p]) {
                    for c in 0..k {
                        let mut d = probs[c * plane + p];
                        if targets[p] as usize == c {
                            d -= F::one();
                        }
                        g[c * plane + p] += d * scale;
                    }
                }
            }
            Op::MaskedL1 {
                pred,
                target,
                valid,
                count,
            } => {
                let plane = valid.len();
                let scale = gy[0] / F::of(*count as f64);
                let pv = val(*pred);
                let g = gbuf!(*pred);
                for (j, (g, (&p, &t))) in g.iter_mut().zip(pv.iter().zip(target)).enumerate() {
                    if valid[j % plane] && p != t {
                        *g += if p > t { scale } else { -scale };
                    }
                }
            }
            Op::Cosine {
                pred,
                target,
                valid,
                count,
            } => {
                let s = nodes[pred.0].value.shape();
                let (c, plane) = (s[0], s[1] * s[2]);
                let scale = gy[0].as_f64() / *count as f64;
                let pv = val(*pred);
                let g = gbuf!(*pred);
                for p in (0..plane).filter(|&p| valid[p]) {
                    let (mut dot, mut nn) = (0.0, 0.0);
                    for ch in 0..c {
                        let a = pv[ch * plane + p].as_f64();
                        dot += a * target[ch * plane + p].as_f64();
                        nn += a * a;
                    }
                    let norm = (nn + 1e-12).sqrt();
                    for ch in 0..c {
                        let a = pv[ch * plane + p].as_f64();
                        let t = target[ch * plane + p].as_f64();
                        let dcos = t / norm - dot * a / (norm * norm * norm);
                        g[ch * plane + p] += F::of(-dcos * scale);
                    }
                }
            }
            Op::WeightedBce {
                logits,
                target,
                valid,
                pos_weight,
                neg_weight,
                count,
            } => {
                let scale = gy[0].as_f64() / *count as f64;
                let lv = val(*logits);
                let g = gbuf!(*logits);
                for p in (0..valid.len()).filter(|&p| valid[p]) {
                    let sg = sigmoid(lv[p].as_f64());
                    let d = if target[p] > F::of(0.5) {
                        pos_weight.as_f64() * (sg - 1.0)
                    } else {
                        neg_weight.as_f64() * sg
                    };
                    g[p] += F::of(d * scale);
                }
            }
        }
    }
}

/// For each output element of a permutation, the flat input offset it reads.
fn permute_offsets(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = out_shape.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}
