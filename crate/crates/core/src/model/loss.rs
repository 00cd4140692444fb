use super::config::{TaskKind, TaskSpec, STRIDES};
use super::Outputs;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Row-major class labels.
    Labels(Vec<i32>),
    /// `C×H×W` real-valued target.
    Dense(Tensor<f32>),
}

/// Ground truth of one task at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTarget {
    pub target: Target,
    pub valid: Vec<bool>,
    pub h: usize,
    pub w: usize,
}

impl TaskTarget {
    pub fn labels(labels: Vec<i32>, valid: Vec<bool>, h: usize, w: usize) -> Result<Self> {
        if labels.len() != h * w || valid.len() != h * w {
            return Err(Error::shape("label target", &[labels.len(), valid.len()], &[h * w]));
        }
        Ok(TaskTarget {
            target: Target::Labels(labels),
            valid,
            h,
            w,
        })
    }

    pub fn dense(t: Tensor<f32>, valid: Vec<bool>) -> Result<Self> {
        let (h, w) = (t.shape()[1], t.shape()[2]);
        if t.rank() != 3 || valid.len() != h * w {
            return Err(Error::shape("dense target", t.shape(), &[valid.len()]));
        }
        Ok(TaskTarget {
            target: Target::Dense(t),
            valid,
            h,
            w,
        })
    }

    /// Ground truth for a prediction at stride `s`: nearest sampling for
    /// labels, valid-pixel box mean for depth and normals, box max for edges.
    pub fn downsample(&self, kind: TaskKind, s: usize) -> TaskTarget {
        let (h, w) = (self.h / s, self.w / s);
        let mut valid = vec![false; h * w];
        match (&self.target, kind) {
            (Target::Labels(l), _) => {
                let mut out = vec![0; h * w];
                for y in 0..h {
                    for x in 0..w {
                        let src = (y * s + s / 2) * self.w + x * s + s / 2;
                        out[y * w + x] = l[src];
                        valid[y * w + x] = self.valid[src];
                    }
                }
                TaskTarget {
                    target: Target::Labels(out),
                    valid,
                    h,
                    w,
                }
            }
            (Target::Dense(t), kind) => {
                let c = t.shape()[0];
                let plane = self.h * self.w;
                let mut out = vec![0.0f32; c * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let o = y * w + x;
                        let mut n = 0usize;
                        let mut acc = vec![0.0f64; c];
                        let mut mx = vec![f32::NEG_INFINITY; c];
                        for dy in 0..s {
                            for dx in 0..s {
                                let p = (y * s + dy) * self.w + x * s + dx;
                                if !self.valid[p] {
                                    continue;
                                }
                                n += 1;
                                for ch in 0..c {
                                    let v = t.data()[ch * plane + p];
                                    acc[ch] += v as f64;
                                    mx[ch] = mx[ch].max(v);
                                }
                            }
                        }
                        if n == 0 {
                            continue;
                        }
                        valid[o] = true;
                        match kind {
                            TaskKind::Edges => {
                                for ch in 0..c {
                                    out[ch * h * w + o] = mx[ch];
                                }
                            }
                            TaskKind::Normals => {
                                let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
                                if norm < 1e-12 {
                                    valid[o] = false;
                                    continue;
                                }
                                for ch in 0..c {
                                    out[ch * h * w + o] = (acc[ch] / norm) as f32;
                                }
                            }
                            _ => {
                                for ch in 0..c {
                                    out[ch * h * w + o] = (acc[ch] / n as f64) as f32;
                                }
                            }
                        }
                    }
                }
                TaskTarget {
                    target: Target::Dense(Tensor::new(vec![c, h, w], out).expect("downsampled shape")),
                    valid,
                    h,
                    w,
                }
            }
        }
    }
}

/// Full-resolution targets plus their deep-supervision pyramids.
#[derive(Clone, Debug)]
pub struct Supervision {
    pub full: Vec<TaskTarget>,
    /// `[task][scale]`
    pub scales: Vec<Vec<TaskTarget>>,
}

impl Supervision {
    pub fn new(tasks: &[TaskSpec], full: Vec<TaskTarget>) -> Result<Self> {
        if tasks.len() != full.len() {
            return Err(Error::config(format!("{} tasks but {} targets", tasks.len(), full.len())));
        }
        let scales = tasks
            .iter()
            .zip(&full)
            .map(|(t, f)| STRIDES.iter().map(|&s| f.downsample(t.kind, s)).collect())
            .collect();
        Ok(Supervision { full, scales })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub task: usize,
    /// `None` for the final prediction.
    pub scale: Option<usize>,
    pub node: NodeId,
}

#[derive(Clone, Debug)]
pub struct Losses {
    pub total: NodeId,
    pub terms: Vec<LossTerm>,
}

impl Losses {
    /// Sum of the final and deep-supervision terms of each task.
    pub fn per_task<F: Real>(&self, g: &Graph<'_, F>, num_tasks: usize) -> Vec<f64> {
        let mut out = vec![0.0; num_tasks];
        for t in &self.terms {
            out[t.task] += g.value(t.node).item().as_f64();
        }
        out
    }
}

fn task_loss<F: Real>(g: &mut Graph<'_, F>, kind: TaskKind, pred: NodeId, t: &TaskTarget) -> Result<NodeId> {
    match (kind, &t.target) {
        (TaskKind::Categorical { .. }, Target::Labels(l)) => g.cross_entropy(pred, l, &t.valid),
        (TaskKind::Depth, Target::Dense(d)) => g.masked_l1(pred, &d.cast(), &t.valid),
        (TaskKind::Normals, Target::Dense(d)) => g.cosine_loss(pred, &d.cast(), &t.valid),
        (TaskKind::Edges, Target::Dense(d)) => g.weighted_bce(pred, &d.cast(), &t.valid),
        (kind, _) => Err(Error::config(format!("target type does not match task kind {kind:?}"))),
    }
}

/// Sum over tasks of the final loss and one deep-supervision loss per
/// scale, all with weight one.
pub fn compute_losses<F: Real>(
    g: &mut Graph<'_, F>,
    tasks: &[TaskSpec],
    outputs: &Outputs,
    sup: &Supervision,
) -> Result<Losses> {
    if outputs.finals.len() != tasks.len() || sup.full.len() != tasks.len() {
        return Err(Error::config("predictions, targets and tasks disagree in count"));
    }
    let mut terms = Vec::new();
    for (j, task) in tasks.iter().enumerate() {
        let node = task_loss(g, task.kind, outputs.finals[j], &sup.full[j])?;
        terms.push(LossTerm { task: j, scale: None, node });
        for (i, &pred) in outputs.initials[j].iter().enumerate() {
            let node = task_loss(g, task.kind, pred, &sup.scales[j][i])?;
            terms.push(LossTerm {
                task: j,
                scale: Some(i),
                node,
            });
        }
    }
    let nodes: Vec<NodeId> = terms.iter().map(|t| t.node).collect();
    let total = g.sum_all(&nodes)?;
    Ok(Losses { total, terms })
}
