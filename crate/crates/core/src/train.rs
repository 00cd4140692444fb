//! Minibatch training with deterministic gradient reduction and checkpoints.
//!
//! Per-sample gradients are computed in parallel, then summed in sample
//! order, so a run is bitwise reproducible for any worker count.

use std::path::Path;

use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::io::{Archive, IntTensor};
use crate::model::{compute_losses, Model, ModelConfig, Outputs, Supervision, TaskKind, TaskSpec, TaskTarget, Variant};
use crate::optim::{OptimConfig, Optimizer};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Rng, Tensor};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "BRIDGENET_THREADS";

/// Sizes the global worker pool from [`THREADS_ENV`] if set. Returns the
/// requested count; later calls after the pool exists are no-ops.
pub fn init_threads_from_env() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // the pool can only be built once per process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

/// Forward pass matching the model's variant.
pub fn run_model(model: &Model, g: &mut Graph<'_, f32>, image: NodeId) -> Result<Outputs> {
    match model.cfg.variant {
        Variant::BridgeNet => model.forward(g, image),
        Variant::MtlBaseline | Variant::Stl => model.baseline_forward(g, image),
    }
}

/// Full-resolution target of one task from a sample.
pub fn task_target(sample: &Sample, task: &TaskSpec) -> Result<TaskTarget> {
    let (h, w) = (sample.height, sample.width);
    match task.kind {
        TaskKind::Categorical { classes } => {
            if let Some(&c) = sample.seg.iter().find(|&&c| c < 0 || c as usize >= classes) {
                return Err(Error::config(format!("label {c} outside {classes} classes")));
            }
            TaskTarget::labels(sample.seg.clone(), sample.seg_valid.clone(), h, w)
        }
        TaskKind::Depth => TaskTarget::dense(sample.depth.clone(), sample.depth_valid.clone()),
        TaskKind::Normals => TaskTarget::dense(sample.normals.clone(), sample.normals_valid.clone()),
        TaskKind::Edges => {
            let e = Tensor::new(vec![1, h, w], sample.edges.iter().map(|&b| b as u8 as f32).collect())?;
            TaskTarget::dense(e, sample.edges_valid.clone())
        }
    }
}

/// An input image with its supervision pyramid.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Tensor<f32>,
    pub sup: Supervision,
}

impl Example {
    pub fn new(sample: &Sample, tasks: &[TaskSpec]) -> Result<Self> {
        let full = tasks.iter().map(|t| task_target(sample, t)).collect::<Result<Vec<_>>>()?;
        Ok(Example {
            image: sample.image.clone(),
            sup: Supervision::new(tasks, full)?,
        })
    }
}

/// Training examples, optionally with mirrored copies drawn at random.
#[derive(Clone, Debug)]
pub struct TrainSet {
    plain: Vec<Example>,
    mirrored: Option<Vec<Example>>,
}

impl TrainSet {
    pub fn new(samples: &[Sample], tasks: &[TaskSpec], hflip: bool) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let build = |s: &Sample| Example::new(s, tasks);
        let plain = samples.par_iter().map(build).collect::<Result<Vec<_>>>()?;
        let mirrored = if hflip {
            Some(samples.par_iter().map(|s| build(&s.hflip())).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(TrainSet { plain, mirrored })
    }

    pub fn len(&self) -> usize {
        self.plain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plain.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub hflip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 2000,
            batch_size: 4,
            hflip: true,
            seed: 0,
        }
    }
}

/// Losses of one optimizer step, before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub iter: usize,
    pub lr: f64,
    pub total: f64,
    pub per_task: Vec<f64>,
}

impl StepStats {
    /// `iter<TAB>lr<TAB>total<TAB>task…`
    pub fn tsv(&self) -> String {
        let mut s = format!("{}\t{:.6e}\t{:.6}", self.iter, self.lr, self.total);
        for l in &self.per_task {
            s.push_str(&format!("\t{l:.6}"));
        }
        s
    }

    pub fn tsv_header(tasks: &[TaskSpec]) -> String {
        let mut s = String::from("iter\tlr\ttotal");
        for t in tasks {
            s.push('\t');
            s.push_str(&t.name);
        }
        s
    }
}

type SampleGrad = (f64, Vec<f64>, Vec<(ParamId, Vec<f32>)>);

fn sample_grad(model: &Model, store: &ParamStore<f32>, ex: &Example) -> Result<SampleGrad> {
    let mut g = Graph::with_params(store);
    let x = g.input(ex.image.clone());
    let out = run_model(model, &mut g, x)?;
    let losses = compute_losses(&mut g, &model.cfg.tasks, &out, &ex.sup)?;
    let total = g.value(losses.total).item() as f64;
    let per_task = losses.per_task(&g, model.num_tasks());
    g.backward(losses.total)?;
    Ok((total, per_task, g.param_grads()))
}

/// Model, parameters, optimizer state and the batch schedule.
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub opt: Optimizer,
    pub cfg: TrainConfig,
    pub iter: usize,
}

impl Trainer {
    /// Fresh model from `seed`; the optimizer's schedule length is
    /// `train.iters`.
    pub fn new(model_cfg: ModelConfig, optim: OptimConfig, train: TrainConfig) -> Result<Self> {
        if train.batch_size == 0 || train.iters == 0 {
            return Err(Error::config("batch_size and iters must be positive"));
        }
        let (store, model) = Model::new(model_cfg, train.seed)?;
        let optim = OptimConfig {
            total_iters: train.iters,
            ..optim
        };
        let opt = Optimizer::new(optim, &store)?;
        Ok(Trainer {
            model,
            store,
            opt,
            cfg: train,
            iter: 0,
        })
    }

    /// Example indices and mirror flags of batch `iter`. Batches walk a
    /// per-epoch permutation drawn from the run seed.
    pub fn batch(&self, iter: usize, n: usize) -> Vec<(usize, bool)> {
        let b = self.cfg.batch_size;
        let rng = Rng::new(self.cfg.seed).fork(0xba7c);
        (iter * b..(iter + 1) * b)
            .map(|k| {
                let epoch = (k / n) as u64;
                let mut perm: Vec<usize> = (0..n).collect();
                let mut r = rng.fork(epoch);
                r.shuffle(&mut perm);
                let flip = self.cfg.hflip && r.fork(1 + (k % n) as u64).unit() < 0.5;
                (perm[k % n], flip)
            })
            .collect()
    }

    /// One optimizer step on the next batch. Fails without touching the
    /// parameters if any loss is non-finite.
    pub fn step(&mut self, data: &TrainSet) -> Result<StepStats> {
        if self.iter >= self.cfg.iters {
            return Err(Error::Invalid(format!("training already ran {} iterations", self.iter)));
        }
        let batch = self.batch(self.iter, data.len());
        let examples: Vec<&Example> = batch
            .iter()
            .map(|&(i, flip)| match (&data.mirrored, flip) {
                (Some(m), true) => &m[i],
                _ => &data.plain[i],
            })
            .collect();
        let (model, store) = (&self.model, &self.store);
        let results = examples
            .par_iter()
            .map(|ex| sample_grad(model, store, ex))
            .collect::<Result<Vec<_>>>()?;
        let b = results.len() as f64;
        let total = results.iter().map(|r| r.0).sum::<f64>() / b;
        let mut per_task = vec![0.0; self.model.num_tasks()];
        for (_, pt, _) in &results {
            per_task.iter_mut().zip(pt).for_each(|(a, v)| *a += v / b);
        }
        if !total.is_finite() || per_task.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { iter: self.iter });
        }
        self.store.zero_grad();
        for (_, _, grads) in &results {
            self.store.accumulate(grads);
        }
        self.store.scale_grads(1.0 / b as f32);
        let lr = self.opt.config().lr_at(self.iter)?;
        self.opt.step(&mut self.store, lr)?;
        let stats = StepStats {
            iter: self.iter,
            lr,
            total,
            per_task,
        };
        self.iter += 1;
        Ok(stats)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = checkpoint_archive(&self.model.cfg, &self.store)?;
        a.push_i32("__iter__", IntTensor::new(vec![1], vec![self.iter as i32])?)?;
        self.opt.save(&mut a)?;
        a.write(path)
    }

    /// Restores parameters, optimizer state and the iteration counter from a
    /// checkpoint of the same model configuration.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let a = Archive::read(path)?;
        let cfg = checkpoint_config(&a)?;
        if cfg != self.model.cfg {
            return Err(Error::config("checkpoint was written for a different model configuration"));
        }
        self.store.load_named(named_params(&a))?;
        self.opt.load(&a)?;
        let iter = a.i32("__iter__")?.data.first().copied().unwrap_or(-1);
        self.iter = usize::try_from(iter).map_err(|_| Error::Format("bad __iter__".into()))?;
        Ok(())
    }
}

const HEADER: &str = "__header__";

fn named_params(a: &Archive) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
    a.entries.iter().filter_map(|(n, r)| match r {
        crate::io::Record::F32(t) if !n.starts_with("__") && !n.starts_with("optim.") => Some((n.as_str(), t)),
        _ => None,
    })
}

/// Archive holding the config header and every parameter by name.
pub fn checkpoint_archive(cfg: &ModelConfig, store: &ParamStore<f32>) -> Result<Archive> {
    let mut a = Archive::new();
    let header: Vec<i32> = cfg.to_header().bytes().map(i32::from).collect();
    a.push_i32(HEADER, IntTensor::new(vec![header.len()], header)?)?;
    for (name, value) in store.named_values() {
        a.push_f32(name, value.clone())?;
    }
    Ok(a)
}

pub fn checkpoint_config(a: &Archive) -> Result<ModelConfig> {
    let bytes = a
        .i32(HEADER)?
        .data
        .iter()
        .map(|&v| u8::try_from(v).map_err(|_| Error::Format("header byte out of range".into())))
        .collect::<Result<Vec<u8>>>()?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    ModelConfig::from_header(&text)
}

/// Model and parameters from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, Model)> {
    let a = Archive::read(path)?;
    let cfg = checkpoint_config(&a)?;
    let (mut store, model) = Model::new(cfg, 0)?;
    store.load_named(named_params(&a))?;
    Ok((store, model))
}
