//! Task pattern propagation.
//!
//! Every task computes its own multi-head self-attention scores at the
//! coarsest scale. The raw scores of all tasks are stacked as `(T·h)×N×N`
//! channels, squeezed to `h×N×N` by a shared 1×1 convolution and normalized
//! with a softmax. The shared map then aggregates each task's values, so a
//! pattern learned by one task propagates to all others.

use crate::error::{Error, Result};
use crate::nn::{attention_scores, from_tokens, split_heads, stack, to_tokens, unstack, Conv, Ffn, Init, Linear};
use crate::tensor::{Conv2dSpec, Graph, NodeId, ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TppConfig {
    pub num_tasks: usize,
    /// Channels of the task-specific features.
    pub c_p: usize,
    /// Attention width.
    pub c_a: usize,
    pub heads: usize,
}

impl TppConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::config("task pattern propagation needs at least one task"));
        }
        if self.heads == 0 || self.c_a % self.heads != 0 {
            return Err(Error::config(format!(
                "attention width {} not divisible by {} heads",
                self.c_a, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TppTask {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub merge: Linear,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct Tpp {
    pub cfg: TppConfig,
    pub tasks: Vec<TppTask>,
    /// Bias-free 1×1 convolution from `T·h` score channels to `h`; a bias
    /// would shift whole rows before the softmax and have no effect.
    pub squeeze: Conv,
}

/// Per-task raw scores and values.
#[derive(Clone, Debug)]
pub struct TaskAttention {
    /// `h×N×N`, unnormalized.
    pub scores: NodeId,
    /// One `N×(C_a/h)` value block per head.
    pub values: Vec<NodeId>,
}

/// Outputs plus the normalized shared attention, for inspection.
#[derive(Clone, Debug)]
pub struct TppOutput {
    pub features: Vec<NodeId>,
    /// `h×N×N`, softmax over the last axis.
    pub attention: NodeId,
}

impl Tpp {
    pub fn new(init: &mut Init<'_>, cfg: TppConfig) -> Result<Self> {
        cfg.validate()?;
        let tasks = (0..cfg.num_tasks)
            .map(|j| {
                let mut t = init.scope(format!("task{j}"));
                TppTask {
                    q: Linear::new(&mut t.scope("q"), cfg.c_p, cfg.c_a),
                    k: Linear::no_bias(&mut t.scope("k"), cfg.c_p, cfg.c_a),
                    v: Linear::new(&mut t.scope("v"), cfg.c_p, cfg.c_a),
                    merge: Linear::new(&mut t.scope("merge"), cfg.c_a, cfg.c_p),
                    ffn: Ffn::new(&mut t.scope("ffn"), cfg.c_p),
                }
            })
            .collect();
        let squeeze = Conv::new(
            &mut init.scope("squeeze"),
            cfg.num_tasks * cfg.heads,
            cfg.heads,
            1,
            Conv2dSpec::default(),
            false,
        );
        Ok(Tpp { cfg, tasks, squeeze })
    }

    /// Raw scores `Q_j·K_jᵀ / sqrt(C_a)` per head, and the values of task `j`.
    pub fn task_attention<F: Real>(&self, g: &mut Graph<'_, F>, p: NodeId, j: usize) -> Result<TaskAttention> {
        let task = self
            .tasks
            .get(j)
            .ok_or_else(|| Error::config(format!("task index {j} out of range for {} tasks", self.tasks.len())))?;
        let tokens = to_tokens(g, p)?;
        let q = task.q.forward(g, tokens)?;
        let k = task.k.forward(g, tokens)?;
        let v = task.v.forward(g, tokens)?;
        let qs = split_heads(g, q, self.cfg.heads)?;
        let ks = split_heads(g, k, self.cfg.heads)?;
        let values = split_heads(g, v, self.cfg.heads)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for (&qh, &kh) in qs.iter().zip(&ks) {
            heads.push(attention_scores(g, qh, kh, self.cfg.c_a)?);
        }
        Ok(TaskAttention {
            scores: stack(g, &heads)?,
            values,
        })
    }

    /// Squeezes all tasks' scores into one map and applies it to every
    /// task's values. Returns one `N×C_a` tensor per task and the map.
    pub fn propagate<F: Real>(&self, g: &mut Graph<'_, F>, attn: &[TaskAttention]) -> Result<(Vec<NodeId>, NodeId)> {
        if attn.len() != self.tasks.len() {
            return Err(Error::config(format!(
                "expected {} task attentions, got {}",
                self.tasks.len(),
                attn.len()
            )));
        }
        let scores: Vec<NodeId> = attn.iter().map(|a| a.scores).collect();
        let all = g.concat(&scores, 0)?;
        let squeezed = self.squeeze.forward(g, all)?;
        self.attend(g, squeezed, attn)
    }

    /// Normalizes the squeezed `h×N×N` scores and aggregates each task's
    /// values with them.
    pub fn attend<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        squeezed: NodeId,
        attn: &[TaskAttention],
    ) -> Result<(Vec<NodeId>, NodeId)> {
        let shared = g.softmax_lastdim(squeezed);
        let maps: Vec<NodeId> = (0..self.cfg.heads)
            .map(|i| unstack(g, shared, i))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(attn.len());
        for a in attn {
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for (&m, &v) in maps.iter().zip(&a.values) {
                heads.push(g.matmul(m, v)?);
            }
            out.push(g.concat(&heads, 1)?);
        }
        Ok((out, shared))
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, p: &[NodeId]) -> Result<Vec<NodeId>> {
        Ok(self.forward_traced(g, p)?.features)
    }

    /// Full block: attention, propagation, head merge with residual, FFN with
    /// residual, back to `C_p×H×W`.
    pub fn forward_traced<F: Real>(&self, g: &mut Graph<'_, F>, p: &[NodeId]) -> Result<TppOutput> {
        let first = *p.first().ok_or_else(|| Error::config("empty task list"))?;
        let shape = g.shape(first).to_vec();
        if let Some(&bad) = p.iter().find(|&&x| g.shape(x) != shape.as_slice()) {
            return Err(Error::shape("tpp", &shape, g.shape(bad)));
        }
        let attn: Vec<TaskAttention> = p
            .iter()
            .enumerate()
            .map(|(j, &pj)| self.task_attention(g, pj, j))
            .collect::<Result<_>>()?;
        let (xs, attention) = self.propagate(g, &attn)?;
        let mut features = Vec::with_capacity(p.len());
        for ((&pj, x), task) in p.iter().zip(xs).zip(&self.tasks) {
            let tokens = to_tokens(g, pj)?;
            let merged = task.merge.forward(g, x)?;
            let y = g.add(tokens, merged)?;
            let y = task.ffn.forward(g, y)?;
            features.push(from_tokens(g, y, shape[1], shape[2])?);
        }
        Ok(TppOutput { features, attention })
    }

    /// Zeroes each task's merge projection and FFN output layer, making the
    /// block an identity.
    pub fn zero_outputs<F: Real>(&self, store: &mut ParamStore<F>) {
        for t in &self.tasks {
            t.merge.zero(store);
            t.ffn.zero_output(store);
        }
    }
}
