//! Per-task metric accumulation over a dataset.
//!
//! Samples are evaluated in parallel into per-sample accumulators that merge
//! in sample order, so a report does not depend on the worker count.

use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{AngleError, BoundaryCounts, Confusion, MetricsReport, SquaredError, TaskResult};
use crate::model::{Model, TaskKind, TaskSpec};
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::train::run_model;

/// Boundary tolerance for the edge task, in pixels.
pub const EDGE_RADIUS: usize = 1;

/// Ignore label marking masked-out segmentation pixels.
const IGNORE: i32 = -1;

#[derive(Clone, Debug)]
pub enum TaskAccumulator {
    Seg(Confusion),
    Depth(SquaredError),
    Normals(AngleError),
    Edges(BoundaryCounts),
}

impl TaskAccumulator {
    pub fn new(task: &TaskSpec) -> Result<Self> {
        Ok(match task.kind {
            TaskKind::Categorical { classes } => TaskAccumulator::Seg(Confusion::new(classes)?),
            TaskKind::Depth => TaskAccumulator::Depth(SquaredError::default()),
            TaskKind::Normals => TaskAccumulator::Normals(AngleError::default()),
            TaskKind::Edges => TaskAccumulator::Edges(BoundaryCounts::new(EDGE_RADIUS)),
        })
    }

    /// Adds one full-resolution prediction (logits for seg and edges).
    pub fn add(&mut self, pred: &Tensor<f32>, sample: &Sample) -> Result<()> {
        let (h, w) = (sample.height, sample.width);
        let n = h * w;
        match self {
            TaskAccumulator::Seg(c) => {
                let k = c.num_classes();
                if pred.shape() != [k, h, w] {
                    return Err(Error::shape("seg prediction", pred.shape(), &[k, h, w]));
                }
                let labels = argmax_channels(pred.data(), k, n);
                let gt: Vec<i32> = sample
                    .seg
                    .iter()
                    .zip(&sample.seg_valid)
                    .map(|(&l, &v)| if v { l } else { IGNORE })
                    .collect();
                c.add(&labels, &gt, Some(IGNORE))
            }
            TaskAccumulator::Depth(e) => e.add(pred.data(), sample.depth.data(), &sample.depth_valid),
            TaskAccumulator::Normals(e) => e.add(pred.data(), sample.normals.data(), &sample.normals_valid),
            TaskAccumulator::Edges(b) => {
                let probs: Vec<f32> = pred.data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
                b.add(&probs, &sample.edges, &sample.edges_valid, h, w)
            }
        }
    }

    pub fn merge(&mut self, other: &TaskAccumulator) -> Result<()> {
        match (self, other) {
            (TaskAccumulator::Seg(a), TaskAccumulator::Seg(b)) => a.merge(b),
            (TaskAccumulator::Depth(a), TaskAccumulator::Depth(b)) => {
                a.merge(b);
                Ok(())
            }
            (TaskAccumulator::Normals(a), TaskAccumulator::Normals(b)) => {
                a.merge(b);
                Ok(())
            }
            (TaskAccumulator::Edges(a), TaskAccumulator::Edges(b)) => a.merge(b),
            _ => Err(Error::Invalid("merging accumulators of different tasks".into())),
        }
    }

    pub fn value(&self) -> Result<f64> {
        match self {
            TaskAccumulator::Seg(c) => c.miou(),
            TaskAccumulator::Depth(e) => e.rmse(),
            TaskAccumulator::Normals(e) => e.mean(),
            TaskAccumulator::Edges(b) => Ok(b.best().0),
        }
    }
}

/// Channel index of the largest value per pixel; ties go to the lowest.
pub fn argmax_channels(data: &[f32], k: usize, n: usize) -> Vec<i32> {
    (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if data[c * n + p] > data[best * n + p] {
                    best = c;
                }
            }
            best as i32
        })
        .collect()
}

/// Metric accumulators for every task of a model.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub tasks: Vec<TaskSpec>,
    pub accs: Vec<TaskAccumulator>,
    pub samples: usize,
}

impl Evaluation {
    pub fn new(tasks: &[TaskSpec]) -> Result<Self> {
        Ok(Evaluation {
            tasks: tasks.to_vec(),
            accs: tasks.iter().map(TaskAccumulator::new).collect::<Result<_>>()?,
            samples: 0,
        })
    }

    /// Adds the final predictions of one sample, one per task.
    pub fn add(&mut self, preds: &[Tensor<f32>], sample: &Sample) -> Result<()> {
        if preds.len() != self.accs.len() {
            return Err(Error::config(format!("{} predictions for {} tasks", preds.len(), self.accs.len())));
        }
        for (acc, p) in self.accs.iter_mut().zip(preds) {
            acc.add(p, sample)?;
        }
        self.samples += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Evaluation) -> Result<()> {
        if self.tasks != other.tasks {
            return Err(Error::config("merging evaluations of different task sets"));
        }
        for (a, b) in self.accs.iter_mut().zip(&other.accs) {
            a.merge(b)?;
        }
        self.samples += other.samples;
        Ok(())
    }

    pub fn report(&self, label: &str) -> Result<MetricsReport> {
        let tasks = self
            .tasks
            .iter()
            .zip(&self.accs)
            .map(|(t, a)| Ok(TaskResult::new(&t.name, t.metric_name(), t.lower_is_better(), a.value()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsReport::new(label, tasks, self.samples))
    }
}

/// Final predictions of `model` for one image.
pub fn predict(model: &Model, store: &ParamStore<f32>, image: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let mut g = Graph::with_params(store);
    let x = g.input(image.clone());
    let out = run_model(model, &mut g, x)?;
    Ok(out.finals.iter().map(|&f| g.value(f).clone()).collect())
}

/// Evaluates `model` on `samples` and labels the report with the variant.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, samples: &[Sample]) -> Result<MetricsReport> {
    let tasks = &model.cfg.tasks;
    let parts = samples
        .par_iter()
        .map(|s| {
            let mut e = Evaluation::new(tasks)?;
            e.add(&predict(model, store, &s.image)?, s)?;
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Evaluation::new(tasks)?;
    for p in &parts {
        total.merge(p)?;
    }
    total.report(model.cfg.variant.name())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneConfig};

    fn perfect_preds(s: &Sample, tasks: &[TaskSpec]) -> Vec<Tensor<f32>> {
        let n = s.height * s.width;
        tasks
            .iter()
            .map(|t| match t.kind {
                TaskKind::Categorical { classes } => Tensor::from_fn(vec![classes, s.height, s.width], |i| {
                    if s.seg[i % n] as usize == i / n {
                        5.0
                    } else {
                        -5.0
                    }
                }),
                TaskKind::Depth => s.depth.clone(),
                TaskKind::Normals => s.normals.clone(),
                TaskKind::Edges => {
                    Tensor::from_fn(vec![1, s.height, s.width], |i| if s.edges[i] { 20.0 } else { -20.0 })
                }
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_score_perfectly() {
        let cfg = SceneConfig {
            height: 32,
            width: 32,
            ..SceneConfig::default()
        };
        let tasks = [TaskSpec::segmentation(5), TaskSpec::depth(), TaskSpec::normals(), TaskSpec::edges()];
        let mut e = Evaluation::new(&tasks).unwrap();
        for seed in 0..4 {
            let s = generate_scene(&cfg, seed).unwrap();
            e.add(&perfect_preds(&s, &tasks), &s).unwrap();
        }
        let r = e.report("oracle").unwrap();
        assert_eq!(r.task("seg").unwrap().value, 1.0);
        assert_eq!(r.task("depth").unwrap().value, 0.0);
        assert!(r.task("normals").unwrap().value < 1e-2);
        assert_eq!(r.task("edges").unwrap().value, 1.0);
        assert_eq!(r.samples, 4);
    }

    #[test]
    fn argmax_ties_take_lowest_channel() {
        assert_eq!(argmax_channels(&[1.0, 0.0, 1.0, 2.0], 2, 2), vec![0, 1]);
    }

    #[test]
    fn merged_halves_equal_whole() {
        let cfg = SceneConfig {
            height: 16,
            width: 16,
            ..SceneConfig::default()
        };
        let tasks = [TaskSpec::segmentation(5), TaskSpec::edges()];
        let samples: Vec<Sample> = (0..4).map(|s| generate_scene(&cfg, s).unwrap()).collect();
        let noisy = |s: &Sample| {
            let mut p = perfect_preds(s, &tasks);
            p.iter_mut().for_each(|t| t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v *= ((i % 7) as f32) - 2.0));
            p
        };
        let mut whole = Evaluation::new(&tasks).unwrap();
        let mut a = Evaluation::new(&tasks).unwrap();
        let mut b = Evaluation::new(&tasks).unwrap();
        for (i, s) in samples.iter().enumerate() {
            whole.add(&noisy(s), s).unwrap();
            if i < 2 { &mut a } else { &mut b }.add(&noisy(s), s).unwrap();
        }
        a.merge(&b).unwrap();
        assert_eq!(a.report("x").unwrap().to_kv(), whole.report("x").unwrap().to_kv());
    }
}
