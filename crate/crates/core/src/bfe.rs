//! Bridge feature extraction.
//!
//! Generic features are tokenized by a strided depthwise convolution and act
//! as queries. Every task's specific features are average pooled, flattened
//! and concatenated into one key/value token set. The cross-attention output
//! is brought back to full resolution, passed through a feed-forward branch
//! and added to the generic features, so the result carries both low-level
//! detail and every task's semantics.

use crate::error::{Error, Result};
use crate::nn::{attention_scores, from_tokens, split_heads, to_tokens, Conv, Ffn, Init, Linear};
use crate::tensor::{Conv2dSpec, Graph, NodeId, ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BfeConfig {
    /// Query downsample.
    pub d: usize,
    /// Key/value downsample of this scale.
    pub l: usize,
    pub heads: usize,
    pub c_s: usize,
    pub c_p: usize,
    pub c_a: usize,
}

impl BfeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_a != self.c_s {
            return Err(Error::config(format!(
                "attention width {} must equal generic channels {} for the residual",
                self.c_a, self.c_s
            )));
        }
        if self.heads == 0 || self.c_a % self.heads != 0 {
            return Err(Error::config(format!(
                "attention width {} not divisible by {} heads",
                self.c_a, self.heads
            )));
        }
        if self.d == 0 || self.l == 0 {
            return Err(Error::config("downsample ratios must be positive"));
        }
        Ok(())
    }

    /// `(H_s·W_s / d²) × (T·H_p·W_p / l²)`
    pub fn attention_shape(&self, num_tasks: usize, hs: usize, ws: usize, hp: usize, wp: usize) -> [usize; 2] {
        [hs * ws / (self.d * self.d), num_tasks * hp * wp / (self.l * self.l)]
    }
}

#[derive(Clone, Debug)]
pub struct Bfe {
    pub cfg: BfeConfig,
    /// Depthwise, kernel and stride `d`.
    pub tokenizer: Conv,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct BfeOutput {
    /// `C_s×H_s×W_s`.
    pub bridge: NodeId,
    /// Normalized attention per head, each `N_q×N_kv`.
    pub attention: Vec<NodeId>,
}

impl Bfe {
    pub fn new(init: &mut Init<'_>, cfg: BfeConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = Conv2dSpec {
            stride: cfg.d,
            dilation: 1,
            padding: 0,
            groups: cfg.c_s,
        };
        Ok(Bfe {
            cfg,
            tokenizer: Conv::new(&mut init.scope("tokenizer"), cfg.c_s, cfg.c_s, cfg.d, spec, true),
            q: Linear::new(&mut init.scope("q"), cfg.c_s, cfg.c_a),
            k: Linear::no_bias(&mut init.scope("k"), cfg.c_p, cfg.c_a),
            v: Linear::new(&mut init.scope("v"), cfg.c_p, cfg.c_a),
            ffn: Ffn::new(&mut init.scope("ffn"), cfg.c_a),
        })
    }

    /// `Flat(Conv(S))`: `(H·W/d²)×C_s` tokens.
    pub fn tokenize_generic<F: Real>(&self, g: &mut Graph<'_, F>, s: NodeId) -> Result<NodeId> {
        let shape = g.shape(s);
        if shape[1] % self.cfg.d != 0 || shape[2] % self.cfg.d != 0 {
            return Err(Error::config(format!(
                "generic feature {:?} not divisible by query downsample {}",
                shape, self.cfg.d
            )));
        }
        let t = self.tokenizer.forward(g, s)?;
        to_tokens(g, t)
    }

    /// `Concat_j Flat(Pool(P_j))`: `(T·H·W/l²)×C_p` tokens, task-major.
    pub fn tokenize_specific<F: Real>(&self, g: &mut Graph<'_, F>, p: &[NodeId]) -> Result<NodeId> {
        tokenize_specific(g, p, self.cfg.l)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, s: NodeId, p: &[NodeId]) -> Result<NodeId> {
        Ok(self.forward_traced(g, s, p)?.bridge)
    }

    pub fn forward_traced<F: Real>(&self, g: &mut Graph<'_, F>, s: NodeId, p: &[NodeId]) -> Result<BfeOutput> {
        let shape = g.shape(s).to_vec();
        if shape[0] != self.cfg.c_s {
            return Err(Error::shape("bfe", &shape, &[self.cfg.c_s]));
        }
        let (h, w) = (shape[1], shape[2]);
        let gen = self.tokenize_generic(g, s)?;
        let spec = self.tokenize_specific(g, p)?;
        let q = self.q.forward(g, gen)?;
        let k = self.k.forward(g, spec)?;
        let v = self.v.forward(g, spec)?;
        let qs = split_heads(g, q, self.cfg.heads)?;
        let ks = split_heads(g, k, self.cfg.heads)?;
        let vs = split_heads(g, v, self.cfg.heads)?;
        let mut attention = Vec::with_capacity(self.cfg.heads);
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for i in 0..self.cfg.heads {
            let a = attention_scores(g, qs[i], ks[i], self.cfg.c_a)?;
            let a = g.softmax_lastdim(a);
            heads.push(g.matmul(a, vs[i])?);
            attention.push(a);
        }
        let x = g.concat(&heads, 1)?;
        let x = from_tokens(g, x, h / self.cfg.d, w / self.cfg.d)?;
        let x = g.upsample_bilinear(x, self.cfg.d)?;
        let tokens = to_tokens(g, x)?;
        let branch = self.ffn.branch(g, tokens)?;
        let branch = from_tokens(g, branch, h, w)?;
        let bridge = g.add(s, branch)?;
        Ok(BfeOutput { bridge, attention })
    }

    /// Zeroes the FFN output layer so the bridge feature equals its input.
    pub fn zero_output<F: Real>(&self, store: &mut ParamStore<F>) {
        self.ffn.zero_output(store);
    }
}

/// Average pools each task map by `l`, flattens and concatenates along tokens.
pub fn tokenize_specific<F: Real>(g: &mut Graph<'_, F>, p: &[NodeId], l: usize) -> Result<NodeId> {
    let first = *p.first().ok_or_else(|| Error::config("empty task list"))?;
    let shape = g.shape(first).to_vec();
    let mut tokens = Vec::with_capacity(p.len());
    for &pj in p {
        if g.shape(pj) != shape.as_slice() {
            return Err(Error::shape("tokenize_specific", &shape, g.shape(pj)));
        }
        let pooled = g.avg_pool2d(pj, l)?;
        tokens.push(to_tokens(g, pooled)?);
    }
    g.concat(&tokens, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::GradCheck;
    use crate::tensor::{Rng, Tensor};

    fn cfg(d: usize, l: usize, c: usize) -> BfeConfig {
        BfeConfig {
            d,
            l,
            heads: 2,
            c_s: c,
            c_p: c,
            c_a: c,
        }
    }

    fn build(cfg: BfeConfig, seed: u64) -> (ParamStore<f32>, Bfe) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let bfe = Bfe::new(&mut Init::new(&mut store, &mut rng), cfg).unwrap();
        (store, bfe)
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor<f32> {
        Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn generic_tokens_flatten_with_identity_kernel() {
        let (mut store, bfe) = build(cfg(1, 1, 4), 1);
        *store.value_mut(bfe.tokenizer.weight) = Tensor::ones(vec![4, 1, 1, 1]);
        let x = rand(&[4, 3, 5], 2);
        let mut g = Graph::with_params(&store);
        let xn = g.input(x);
        let t = bfe.tokenize_generic(&mut g, xn).unwrap();
        let flat = to_tokens(&mut g, xn).unwrap();
        assert_eq!(g.value(t), g.value(flat));
    }

    #[test]
    fn generic_token_count_formula() {
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let d = [1, 2, 4][rng.below(3)];
            let (h, w) = (d * rng.int_inclusive(1, 4), d * rng.int_inclusive(1, 4));
            let (store, bfe) = build(cfg(d, 1, 4), 4);
            let mut g = Graph::with_params(&store);
            let x = g.input(Tensor::zeros(vec![4, h, w]));
            let t = bfe.tokenize_generic(&mut g, x).unwrap();
            assert_eq!(g.shape(t), &[h * w / (d * d), 4]);
        }
        let (store, bfe) = build(cfg(2, 1, 32), 5);
        let mut g = Graph::with_params(&store);
        let x = g.input(Tensor::zeros(vec![32, 8, 8]));
        let t = bfe.tokenize_generic(&mut g, x).unwrap();
        assert_eq!(g.shape(t), &[16, 32]);
        let odd = g.input(Tensor::zeros(vec![32, 7, 8]));
        assert!(bfe.tokenize_generic(&mut g, odd).is_err());
    }

    #[test]
    fn specific_tokens_shape_and_order() {
        let mut g = Graph::<f32>::new();
        let a = g.input(rand(&[4, 2, 3], 6));
        let t = tokenize_specific(&mut g, &[a], 1).unwrap();
        let flat = to_tokens(&mut g, a).unwrap();
        assert_eq!(g.value(t), g.value(flat));

        let p0 = g.input(Tensor::full(vec![32, 8, 8], 1.0));
        let p1 = g.input(Tensor::full(vec![32, 8, 8], 2.0));
        let t = tokenize_specific(&mut g, &[p0, p1], 4).unwrap();
        assert_eq!(g.shape(t), &[8, 32]);
        let v = g.value(t).data();
        assert!(v[..4 * 32].iter().all(|&x| x == 1.0));
        assert!(v[4 * 32..].iter().all(|&x| x == 2.0));

        let bad = g.input(Tensor::zeros(vec![32, 4, 8]));
        assert!(tokenize_specific(&mut g, &[p0, bad], 4).is_err());
    }

    #[test]
    fn attention_shape_matches_formula() {
        let c = cfg(2, 4, 8);
        let (store, bfe) = build(c, 7);
        let mut g = Graph::with_params(&store);
        let s = g.input(rand(&[8, 8, 8], 8));
        let p: Vec<NodeId> = (0..2).map(|j| g.input(rand(&[8, 8, 8], 9 + j))).collect();
        let out = bfe.forward_traced(&mut g, s, &p).unwrap();
        assert_eq!(c.attention_shape(2, 8, 8, 8, 8), [16, 8]);
        for &a in &out.attention {
            assert_eq!(g.shape(a), &[16, 8]);
            for row in g.value(a).data().chunks(8) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(g.shape(out.bridge), &[8, 8, 8]);
    }

    #[test]
    fn zero_output_is_identity() {
        let (mut store, bfe) = build(cfg(2, 2, 8), 10);
        bfe.zero_output(&mut store);
        let x = rand(&[8, 4, 4], 11);
        let mut g = Graph::with_params(&store);
        let s = g.input(x.clone());
        let p: Vec<NodeId> = (0..3).map(|j| g.input(rand(&[8, 4, 4], 12 + j))).collect();
        let y = bfe.forward(&mut g, s, &p).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn output_is_invariant_to_task_order() {
        let (store, bfe) = build(cfg(2, 2, 8), 13);
        let ps: Vec<Tensor<f32>> = (0..3).map(|j| rand(&[8, 4, 4], 20 + j)).collect();
        let s = rand(&[8, 4, 4], 14);
        let run = |order: &[usize]| {
            let mut g = Graph::with_params(&store);
            let sn = g.input(s.clone());
            let p: Vec<NodeId> = order.iter().map(|&j| g.input(ps[j].clone())).collect();
            let y = bfe.forward(&mut g, sn, &p).unwrap();
            g.value(y).clone()
        };
        let base = run(&[0, 1, 2]);
        assert!(run(&[2, 0, 1]).max_abs_diff(&base) < 1e-5);
        assert!(run(&[1, 2, 0]).max_abs_diff(&base) < 1e-5);
    }

    #[test]
    fn parameter_count_independent_of_tasks() {
        // the module never depends on T; only the token count grows
        let (store, bfe) = build(cfg(2, 2, 8), 15);
        let n = store.num_scalars();
        for t in 1..=4 {
            let mut g = Graph::with_params(&store);
            let s = g.input(rand(&[8, 4, 4], 16));
            let p: Vec<NodeId> = (0..t).map(|j| g.input(rand(&[8, 4, 4], 30 + j as u64))).collect();
            let out = bfe.forward_traced(&mut g, s, &p).unwrap();
            assert_eq!(g.shape(out.attention[0]), &[4, t * 4]);
            assert_eq!(store.num_scalars(), n);
        }
    }

    #[test]
    fn two_task_gradient_check() {
        let (store, bfe) = build(cfg(2, 2, 4), 17);
        let store = store.cast::<f64>();
        let mut rng = Rng::new(18);
        let xs: Vec<(&str, Tensor<f64>)> = ["s", "p0", "p1"]
            .into_iter()
            .map(|n| (n, Tensor::uniform(vec![4, 4, 4], -1.0, 1.0, &mut rng)))
            .collect();
        let report = GradCheck::default()
            .run(&store, &xs, true, |g, ids| {
                let y = bfe.forward(g, ids[0], &ids[1..])?;
                let w = g.input(Tensor::uniform(vec![4, 4, 4], -1.0, 1.0, &mut Rng::new(19)));
                let m = g.mul(y, w)?;
                Ok(g.sum(m))
            })
            .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
