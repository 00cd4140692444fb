//! Reusable layers: linear projections, the LayerNorm + MLP feed-forward
//! block, convolutions, depthwise-separable dilated convolutions and the
//! hybrid dilated convolution (HDC) stack.
//!
//! Layers only hold [`ParamId`]s and shape metadata. The tensors live in a
//! [`ParamStore`], so the same layer runs against an `f32` training store or
//! an `f64` copy made with [`ParamStore::cast`].

use std::fmt::Display;

use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Graph, NodeId, ParamId, ParamStore, Real, Rng, Tensor};

pub const LN_EPS: f64 = 1e-5;
/// Hidden width multiplier of [`Ffn`].
pub const FFN_EXPANSION: usize = 2;
/// Dilation rates of the three convolutions in an [`Hdc`] block.
pub const HDC_DILATIONS: [usize; 3] = [1, 2, 5];

/// Registers parameters under a dotted name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child initializer whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: impl Display) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Kaiming-uniform: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn kaiming(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        self.store.add(self.full_name(name), t)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.store.add(self.full_name(name), Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.store.add(self.full_name(name), Tensor::ones(shape))
    }
}

fn zero_param<F: Real>(store: &mut ParamStore<F>, id: ParamId) {
    store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = F::zero());
}

/// `y = x·Wᵀ + b` over token rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, c_in: usize, c_out: usize) -> Self {
        Linear {
            weight: init.kaiming("weight", vec![c_out, c_in], c_in),
            bias: Some(init.zeros("bias", vec![c_out])),
            c_in,
            c_out,
        }
    }

    /// Projection without bias. Attention keys use this: a key bias shifts a
    /// whole score row by a constant, which the softmax cancels.
    pub fn no_bias(init: &mut Init<'_>, c_in: usize, c_out: usize) -> Self {
        Linear {
            weight: init.kaiming("weight", vec![c_out, c_in], c_in),
            bias: None,
            c_in,
            c_out,
        }
    }

    /// `x` is `N×c_in`.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn zero<F: Real>(&self, store: &mut ParamStore<F>) {
        zero_param(store, self.weight);
        if let Some(b) = self.bias {
            zero_param(store, b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, c: usize) -> Self {
        LayerNorm {
            gamma: init.ones("gamma", vec![c]),
            beta: init.zeros("beta", vec![c]),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// LayerNorm followed by a two-layer GELU MLP with hidden width 2C.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(init: &mut Init<'_>, c: usize) -> Self {
        Ffn {
            norm: LayerNorm::new(&mut init.scope("norm"), c),
            fc1: Linear::new(&mut init.scope("fc1"), c, FFN_EXPANSION * c),
            fc2: Linear::new(&mut init.scope("fc2"), FFN_EXPANSION * c, c),
        }
    }

    /// `mlp(layer_norm(x))` without the residual.
    pub fn branch<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let h = self.norm.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    /// `x + mlp(layer_norm(x))`, with `x` of shape `N×C`.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let b = self.branch(g, x)?;
        g.add(x, b)
    }

    /// Zeroes the output projection, turning `forward` into the identity.
    pub fn zero_output<F: Real>(&self, store: &mut ParamStore<F>) {
        self.fc2.zero(store);
    }
}

/// 2-D convolution over a `C×H×W` map.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv {
    pub fn new(init: &mut Init<'_>, c_in: usize, c_out: usize, k: usize, spec: Conv2dSpec, bias: bool) -> Self {
        let cin_g = c_in / spec.groups;
        Conv {
            weight: init.kaiming("weight", vec![c_out, cin_g, k, k], cin_g * k * k),
            bias: bias.then(|| init.zeros("bias", vec![c_out])),
            spec,
            c_in,
            c_out,
            k,
        }
    }

    /// 1×1 convolution with bias.
    pub fn pointwise(init: &mut Init<'_>, c_in: usize, c_out: usize) -> Self {
        Self::new(init, c_in, c_out, 1, Conv2dSpec::default(), true)
    }

    /// 3×3 convolution with "same" padding.
    pub fn same3(init: &mut Init<'_>, c_in: usize, c_out: usize) -> Self {
        Self::new(init, c_in, c_out, 3, Conv2dSpec { padding: 1, ..Default::default() }, true)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.spec)
    }

    pub fn zero<F: Real>(&self, store: &mut ParamStore<F>) {
        zero_param(store, self.weight);
        if let Some(b) = self.bias {
            zero_param(store, b);
        }
    }
}

/// Depthwise 3×3 convolution with dilation δ (padding δ) followed by a
/// pointwise projection.
#[derive(Clone, Debug)]
pub struct DwSepConv {
    pub depthwise: Conv,
    pub pointwise: Conv,
    pub dilation: usize,
}

impl DwSepConv {
    pub fn new(init: &mut Init<'_>, c_in: usize, c_out: usize, dilation: usize) -> Self {
        let spec = Conv2dSpec {
            stride: 1,
            dilation,
            padding: dilation,
            groups: c_in,
        };
        DwSepConv {
            depthwise: Conv::new(&mut init.scope("dw"), c_in, c_in, 3, spec, true),
            pointwise: Conv::pointwise(&mut init.scope("pw"), c_in, c_out),
            dilation,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let h = self.depthwise.forward(g, x)?;
        self.pointwise.forward(g, h)
    }
}

/// Three depthwise-separable convolutions with dilations 1, 2, 5, each
/// followed by GELU, plus a residual taken from `c_out` consecutive input
/// channels starting at `residual_from`.
#[derive(Clone, Debug)]
pub struct Hdc {
    pub convs: Vec<DwSepConv>,
    pub residual_from: Option<usize>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Hdc {
    /// Residual from the whole input when `c_in == c_out`, none otherwise.
    pub fn new(init: &mut Init<'_>, c_in: usize, c_out: usize) -> Self {
        let residual = (c_in == c_out).then_some(0);
        Self::with_residual(init, c_in, c_out, residual)
    }

    pub fn with_residual(init: &mut Init<'_>, c_in: usize, c_out: usize, residual_from: Option<usize>) -> Self {
        if let Some(off) = residual_from {
            assert!(off + c_out <= c_in, "residual slice exceeds input channels");
        }
        let convs = HDC_DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let cin = if i == 0 { c_in } else { c_out };
                DwSepConv::new(&mut init.scope(format!("conv{i}")), cin, c_out, d)
            })
            .collect();
        Hdc {
            convs,
            residual_from,
            c_in,
            c_out,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        if g.shape(x)[0] != self.c_in {
            return Err(Error::shape("hdc", g.shape(x), &[self.c_in]));
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, h)?;
            h = g.gelu(h);
        }
        match self.residual_from {
            Some(off) => {
                let skip = if off == 0 && self.c_in == self.c_out {
                    x
                } else {
                    g.narrow(x, 0, off, self.c_out)?
                };
                g.add(h, skip)
            }
            None => Ok(h),
        }
    }

    /// Zeroes the last pointwise projection; with a residual the block is
    /// then an exact identity on its residual slice.
    pub fn zero_output<F: Real>(&self, store: &mut ParamStore<F>) {
        self.convs.last().expect("three convs").pointwise.zero(store);
    }

    /// Side length of the receptive field: `1 + 2·Σ dilations`.
    pub fn receptive_field() -> usize {
        1 + 2 * HDC_DILATIONS.iter().sum::<usize>()
    }
}

/// Flattens `C×H×W` into token-major `(H·W)×C`.
pub fn to_tokens<F: Real>(g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<F: Real>(g: &mut Graph<'_, F>, t: NodeId, h: usize, w: usize) -> Result<NodeId> {
    let c = g.shape(t)[1];
    let ct = g.transpose(t)?;
    g.reshape(ct, &[c, h, w])
}

/// Splits `N×C` token rows into `heads` column blocks of width `C/heads`.
pub fn split_heads<F: Real>(g: &mut Graph<'_, F>, x: NodeId, heads: usize) -> Result<Vec<NodeId>> {
    let c = g.shape(x)[1];
    if heads == 0 || c % heads != 0 {
        return Err(Error::config(format!("{c} channels do not split into {heads} heads")));
    }
    let dh = c / heads;
    (0..heads).map(|i| g.narrow(x, 1, i * dh, dh)).collect()
}

/// Unnormalized attention scores `q·kᵀ / sqrt(dim)`.
pub fn attention_scores<F: Real>(g: &mut Graph<'_, F>, q: NodeId, k: NodeId, dim: usize) -> Result<NodeId> {
    let kt = g.transpose(k)?;
    let a = g.matmul(q, kt)?;
    Ok(g.scale(a, 1.0 / (dim as f64).sqrt()))
}

/// Stacks equally shaped 2-D maps into `len×rows×cols`.
pub fn stack<F: Real>(g: &mut Graph<'_, F>, maps: &[NodeId]) -> Result<NodeId> {
    let mut lifted = Vec::with_capacity(maps.len());
    for &m in maps {
        let s = g.shape(m).to_vec();
        let mut shape = vec![1];
        shape.extend_from_slice(&s);
        lifted.push(g.reshape(m, &shape)?);
    }
    g.concat(&lifted, 0)
}

/// Entry `i` of a stack as a 2-D map.
pub fn unstack<F: Real>(g: &mut Graph<'_, F>, x: NodeId, i: usize) -> Result<NodeId> {
    let s = g.shape(x)[1..].to_vec();
    let one = g.narrow(x, 0, i, 1)?;
    g.reshape(one, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::GradCheck;

    fn probe(g: &mut Graph<'_, f64>, y: NodeId) -> Result<NodeId> {
        let w = Tensor::uniform(g.shape(y).to_vec(), -1.0, 1.0, &mut Rng::new(99));
        let w = g.input(w);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    fn build<T>(f: impl FnOnce(&mut Init<'_>) -> T) -> (ParamStore<f32>, T) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(7);
        let layer = f(&mut Init::new(&mut store, &mut rng));
        (store, layer)
    }

    fn randomize_biases(store: &mut ParamStore<f32>) {
        let mut rng = Rng::new(3);
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with("bias") || store.name(id).ends_with("beta") {
                let shape = store.value(id).shape().to_vec();
                *store.value_mut(id) = Tensor::uniform(shape, -0.5, 0.5, &mut rng);
            }
        }
    }

    #[test]
    fn scoped_names_are_dotted() {
        let (store, _) = build(|i| Ffn::new(&mut i.scope("blk"), 4));
        let names: Vec<&str> = store.named_values().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            ["blk.norm.gamma", "blk.norm.beta", "blk.fc1.weight", "blk.fc1.bias", "blk.fc2.weight", "blk.fc2.bias"]
        );
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let (mut store, lin) = build(|i| Linear::new(i, 3, 3));
        *store.value_mut(lin.weight) = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let x = Tensor::<f32>::uniform(vec![5, 3], -1.0, 1.0, &mut Rng::new(1));
        let mut g = Graph::with_params(&store);
        let xn = g.input(x.clone());
        let y = lin.forward(&mut g, xn).unwrap();
        assert_eq!(g.value(y), &x);

        zero_param(&mut store, lin.weight);
        *store.value_mut(lin.bias.unwrap()) = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut g = Graph::with_params(&store);
        let xn = g.input(x);
        let y = lin.forward(&mut g, xn).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn linear_matches_matmul_oracle() {
        let (mut store, lin) = build(|i| Linear::new(i, 4, 3));
        randomize_biases(&mut store);
        let x = Tensor::<f32>::uniform(vec![6, 4], -1.0, 1.0, &mut Rng::new(2));
        let mut g = Graph::with_params(&store);
        let xn = g.input(x.clone());
        let y = lin.forward(&mut g, xn).unwrap();
        let (w, b) = (store.value(lin.weight).data(), store.value(lin.bias.unwrap()).data());
        for n in 0..6 {
            for o in 0..3 {
                let e: f32 = (0..4).map(|i| x.data()[n * 4 + i] * w[o * 4 + i]).sum::<f32>() + b[o];
                assert!((g.value(y).data()[n * 3 + o] - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ffn_zero_output_is_identity() {
        let (mut store, ffn) = build(|i| Ffn::new(i, 8));
        ffn.zero_output(&mut store);
        let x = Tensor::<f32>::uniform(vec![5, 8], -2.0, 2.0, &mut Rng::new(4));
        let mut g = Graph::with_params(&store);
        let xn = g.input(x.clone());
        let y = ffn.forward(&mut g, xn).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn ffn_preserves_shape_and_checks() {
        let (mut store, ffn) = build(|i| Ffn::new(i, 6));
        randomize_biases(&mut store);
        let store = store.cast::<f64>();
        let x = Tensor::uniform(vec![4, 6], -1.0, 1.0, &mut Rng::new(5));
        let report = GradCheck::default()
            .run(&store, &[("x", x)], true, |g, ids| {
                let y = ffn.forward(g, ids[0])?;
                assert_eq!(g.shape(y), &[4, 6]);
                probe(g, y)
            })
            .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn conv1x1_identity_channel_sum_and_per_pixel_linear() {
        let (mut store, conv) = build(|i| Conv::pointwise(i, 3, 3));
        *store.value_mut(conv.weight) = Tensor::from_fn(vec![3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let x = Tensor::<f32>::uniform(vec![3, 4, 5], -1.0, 1.0, &mut Rng::new(6));
        let mut g = Graph::with_params(&store);
        let xn = g.input(x.clone());
        let y = conv.forward(&mut g, xn).unwrap();
        assert_eq!(g.value(y), &x);

        let (mut store, sum) = build(|i| Conv::pointwise(i, 3, 1));
        *store.value_mut(sum.weight) = Tensor::ones(vec![1, 3, 1, 1]);
        let mut g = Graph::with_params(&store);
        let xn = g.input(x.clone());
        let y = sum.forward(&mut g, xn).unwrap();
        for p in 0..20 {
            let e = x.data()[p] + x.data()[20 + p] + x.data()[40 + p];
            assert!((g.value(y).data()[p] - e).abs() < 1e-6);
        }

        // a 1×1 conv equals a linear layer applied to every pixel token
        let (mut store, conv) = build(|i| Conv::pointwise(i, 3, 2));
        randomize_biases(&mut store);
        let mut g = Graph::with_params(&store);
        let xn = g.input(x);
        let y = conv.forward(&mut g, xn).unwrap();
        let tokens = to_tokens(&mut g, xn).unwrap();
        let w = g.param(conv.weight);
        let w = g.reshape(w, &[2, 3]).unwrap();
        let b = g.param(conv.bias.unwrap());
        let lin = g.linear(tokens, w, Some(b)).unwrap();
        let back = from_tokens(&mut g, lin, 4, 5).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(back)) < 1e-6);
    }

    #[test]
    fn dwsep_preserves_spatial_size() {
        for d in HDC_DILATIONS {
            let (store, conv) = build(|i| DwSepConv::new(i, 4, 6, d));
            let mut g = Graph::with_params(&store);
            let x = g.input(Tensor::ones(vec![4, 9, 7]));
            let y = conv.forward(&mut g, x).unwrap();
            assert_eq!(g.shape(y), &[6, 9, 7]);
        }
    }

    #[test]
    fn hdc_zero_output_is_identity() {
        let (mut store, hdc) = build(|i| Hdc::new(i, 4, 4));
        randomize_biases(&mut store);
        hdc.zero_output(&mut store);
        let x = Tensor::<f32>::uniform(vec![4, 8, 8], -1.0, 1.0, &mut Rng::new(8));
        let mut g = Graph::with_params(&store);
        let xn = g.input(x.clone());
        let y = hdc.forward(&mut g, xn).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn hdc_preserves_spatial_size() {
        let (store, hdc) = build(|i| Hdc::new(i, 3, 5));
        for s in [16, 32, 5] {
            let mut g = Graph::with_params(&store);
            let x = g.input(Tensor::ones(vec![3, s, s]));
            let y = hdc.forward(&mut g, x).unwrap();
            assert_eq!(g.shape(y), &[5, s, s]);
        }
    }

    #[test]
    fn hdc_receptive_field_is_seventeen() {
        assert_eq!(Hdc::receptive_field(), 17);
        let (store, hdc) = build(|i| Hdc::with_residual(i, 1, 1, None));
        let base = {
            let mut g = Graph::with_params(&store);
            let x = g.input(Tensor::zeros(vec![1, 31, 31]));
            let y = hdc.forward(&mut g, x).unwrap();
            g.value(y).clone()
        };
        let mut g = Graph::with_params(&store);
        let x = g.input(Tensor::from_fn(vec![1, 31, 31], |i| if i == 15 * 31 + 15 { 1.0 } else { 0.0 }));
        let y = hdc.forward(&mut g, x).unwrap();
        let changed: Vec<(usize, usize)> = (0..31 * 31)
            .filter(|&i| g.value(y).data()[i] != base.data()[i])
            .map(|i| (i / 31, i % 31))
            .collect();
        let rows: Vec<usize> = changed.iter().map(|p| p.0).collect();
        let span = rows.iter().max().unwrap() - rows.iter().min().unwrap() + 1;
        assert_eq!(span, 17);
    }

    #[test]
    fn hdc_checks_with_slice_residual() {
        let (mut store, hdc) = build(|i| Hdc::with_residual(i, 5, 3, Some(2)));
        randomize_biases(&mut store);
        let store = store.cast::<f64>();
        let x = Tensor::uniform(vec![5, 7, 7], -1.0, 1.0, &mut Rng::new(9));
        let report = GradCheck::default()
            .run(&store, &[("x", x)], true, |g, ids| {
                let y = hdc.forward(g, ids[0])?;
                probe(g, y)
            })
            .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn token_round_trip() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_fn(vec![3, 2, 4], |i| i as f32));
        let t = to_tokens(&mut g, x).unwrap();
        assert_eq!(g.shape(t), &[8, 3]);
        assert_eq!(&g.value(t).data()[..3], &[0.0, 8.0, 16.0]);
        let back = from_tokens(&mut g, t, 2, 4).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }
}
