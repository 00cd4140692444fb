//! Command implementations behind the `bridgenet` binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bridgenet::check::{check_all, check_block, BlockReport, TOLERANCE};
use bridgenet::data::{build_dataset, load_manifest, Sample, Split};
use bridgenet::eval::evaluate;
use bridgenet::metrics::{reference, MetricsReport, TaskResult};
use bridgenet::tensor::BackwardFault;
use bridgenet::tfr::TfrSize;
use bridgenet::train::{init_threads_from_env, load_checkpoint, StepStats, TrainSet, Trainer};
use bridgenet::Error;

pub use config::{ConfigError, RunConfig, Settings, KEYS};

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration (exit 2).
    Usage(String),
    /// Anything that went wrong while running (exit 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(format!("invalid configuration: {m}")),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Overrides shared by the commands that build a [`RunConfig`].
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub variant: Option<String>,
    pub tfr: Option<String>,
    pub ablate: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub iters: Option<usize>,
    pub task: Option<String>,
}

impl Overrides {
    pub fn settings(&self) -> CliResult<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        if let Some(v) = &self.variant {
            s.set("model.variant", v)?;
        }
        if let Some(v) = &self.tfr {
            TfrSize::parse(v).ok_or_else(|| CliError::Usage(format!("--tfr: unknown size {v:?}")))?;
            s.set("model.tfr", v)?;
        }
        if !self.ablate.is_empty() {
            let mut all: Vec<String> = s.get("model.ablate").split(',').map(|v| v.trim().to_string()).collect();
            all.extend(self.ablate.iter().cloned());
            all.retain(|v| !v.is_empty());
            s.set("model.ablate", &all.join(","))?;
        }
        if let Some(v) = self.seed {
            s.set("seed", &v.to_string())?;
        }
        if let Some(v) = &self.out {
            s.set("out", &v.to_string_lossy())?;
        }
        if let Some(v) = &self.data {
            s.set("data_dir", &v.to_string_lossy())?;
        }
        if let Some(v) = self.iters {
            s.set("train.iters", &v.to_string())?;
        }
        if let Some(v) = &self.task {
            s.set("model.stl_task", v)?;
        }
        Ok(s)
    }

    pub fn run_config(&self) -> CliResult<RunConfig> {
        Ok(RunConfig::from_settings(&self.settings()?)?)
    }
}

/// Applies `BRIDGENET_THREADS`; a malformed value is a usage error.
pub fn init_threads() -> CliResult {
    init_threads_from_env()?;
    Ok(())
}

/// Writes the dataset and returns the manifest path.
pub fn gen_data(ov: &Overrides) -> CliResult<PathBuf> {
    let cfg = ov.run_config()?;
    let dir = ov.out.clone().unwrap_or(cfg.data_dir);
    if cfg.n_train == 0 || cfg.n_val == 0 {
        return Err(CliError::Usage("config keys data.train and data.val must be positive".into()));
    }
    Ok(build_dataset(&cfg.scene, cfg.n_train, cfg.n_val, &dir)?)
}

/// Samples of one split, checked against the configured image size.
pub fn load_split(dir: &Path, split: Split, h: usize, w: usize) -> CliResult<Vec<Sample>> {
    let manifest = dir.join(bridgenet::data::MANIFEST);
    if !manifest.exists() {
        return Err(CliError::Runtime(format!(
            "no dataset at {} (run gen-data first)",
            dir.display()
        )));
    }
    let samples = load_manifest(&manifest)?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| e.load(dir))
        .collect::<Result<Vec<_>, _>>()?;
    if samples.is_empty() {
        return Err(CliError::Runtime(format!("dataset has no {split} samples")));
    }
    if let Some(s) = samples.iter().find(|s| (s.height, s.width) != (h, w)) {
        return Err(CliError::Runtime(format!(
            "dataset images are {}x{}, model expects {h}x{w}",
            s.height, s.width
        )));
    }
    Ok(samples)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub overfit_one_batch: bool,
}

/// Summary of a finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub first: StepStats,
    pub last: StepStats,
    pub params: usize,
    pub report: MetricsReport,
    pub out: PathBuf,
}

fn checkpoint_path(out: &Path, iter: usize) -> PathBuf {
    out.join(format!("checkpoint_{iter:06}.btnr"))
}

/// Runs training, writing `train.tsv`, `eval.tsv`, checkpoints, `final.btnr`
/// and `report.kv` into the output directory.
pub fn train(ov: &Overrides, opts: &TrainOptions, log: &mut dyn Write) -> CliResult<TrainOutcome> {
    let cfg = ov.run_config()?;
    let (h, w) = (cfg.model.image_h, cfg.model.image_w);
    let mut train_samples = load_split(&cfg.data_dir, Split::Train, h, w)?;
    let mut train_cfg = cfg.train.clone();
    let val_samples = if opts.overfit_one_batch {
        train_samples.truncate(train_cfg.batch_size);
        train_cfg.batch_size = train_samples.len();
        train_cfg.hflip = false;
        train_samples.clone()
    } else {
        load_split(&cfg.data_dir, Split::Val, h, w)?
    };
    let data = TrainSet::new(&train_samples, &cfg.model.tasks, train_cfg.hflip)?;
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.optim.clone(), train_cfg)?;
    let params = trainer.store.num_scalars();
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.txt"), ov.settings()?.render())?;

    writeln!(log, "variant {} modules {} params {params}", cfg.model.variant.name(), cfg.model.active_modules())?;
    let mut tsv = fs::File::create(cfg.out.join("train.tsv"))?;
    writeln!(tsv, "{}", StepStats::tsv_header(&cfg.model.tasks))?;
    let mut eval_log = fs::File::create(cfg.out.join("eval.tsv"))?;
    writeln!(eval_log, "iter\t{}", task_columns(&cfg))?;

    let iters = cfg.train.iters;
    let mut first = None;
    let mut last = None;
    for _ in 0..iters {
        let stats = trainer.step(&data).map_err(|e| match e {
            Error::NonFiniteLoss { iter } => CliError::Runtime(format!("non-finite loss at iteration {iter}")),
            other => other.into(),
        })?;
        writeln!(tsv, "{}", stats.tsv())?;
        let done = trainer.iter;
        if cfg.log_interval > 0 && (stats.iter % cfg.log_interval == 0 || done == iters) {
            writeln!(log, "{}", stats.tsv())?;
        }
        if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < iters {
            trainer.save(&checkpoint_path(&cfg.out, done))?;
        }
        if cfg.eval_interval > 0 && done % cfg.eval_interval == 0 && done < iters {
            let r = evaluate(&trainer.model, &trainer.store, &val_samples)?;
            writeln!(eval_log, "{done}\t{}", task_values(&r))?;
        }
        first.get_or_insert_with(|| stats.clone());
        last = Some(stats);
    }
    trainer.save(&cfg.out.join("final.btnr"))?;
    let report = evaluate(&trainer.model, &trainer.store, &val_samples)?;
    writeln!(eval_log, "{iters}\t{}", task_values(&report))?;
    fs::write(cfg.out.join("report.kv"), report.to_kv())?;
    let scope = if opts.overfit_one_batch { "training batch" } else { "validation" };
    writeln!(log, "{scope} metrics after {iters} iterations:\n{}", report.to_table())?;
    Ok(TrainOutcome {
        first: first.expect("at least one iteration"),
        last: last.expect("at least one iteration"),
        params,
        report,
        out: cfg.out,
    })
}

fn task_columns(cfg: &RunConfig) -> String {
    let cols: Vec<String> = cfg.model.tasks.iter().map(|t| format!("{}.{}", t.name, t.metric_name())).collect();
    cols.join("\t")
}

fn task_values(r: &MetricsReport) -> String {
    let vals: Vec<String> = r.tasks.iter().map(|t| format!("{:.6}", t.value)).collect();
    vals.join("\t")
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub checkpoint: Option<PathBuf>,
    pub split: Option<String>,
    pub stl_refs: Vec<PathBuf>,
}

/// Combined single-task reference from one or more saved reports.
pub fn load_references(paths: &[PathBuf]) -> CliResult<Option<MetricsReport>> {
    if paths.is_empty() {
        return Ok(None);
    }
    let mut tasks: Vec<TaskResult> = Vec::new();
    let mut samples = 0;
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", p.display())))?;
        let r = MetricsReport::from_kv(&text)?;
        samples = samples.max(r.samples);
        for t in r.tasks {
            if tasks.iter().any(|u| u.task == t.task) {
                return Err(CliError::Usage(format!("task {} appears in two references", t.task)));
            }
            tasks.push(TaskResult::new(t.task, t.metric, t.lower_is_better, t.value));
        }
    }
    Ok(Some(MetricsReport::new("stl", tasks, samples)))
}

/// Recomputes every gain and ΔMTL of the embedded reference tables and
/// renders them next to the recorded values.
pub fn reference_tables() -> CliResult<String> {
    let mut out = String::new();
    let mut group = String::new();
    for (row, report) in reference::recompute(&reference::rows())? {
        if row.group != group {
            group = row.group.clone();
            out.push_str(&format!("\n[{group}]\n"));
        }
        let published = row.delta_mtl.map_or("-".to_string(), |d| format!("{d:+.2}"));
        let ours = report.delta_mtl.map_or("-".to_string(), |d| format!("{d:+.2}"));
        out.push_str(&format!("{:<28} ΔMTL {ours:>7} (recorded {published})\n", row.row));
    }
    Ok(out)
}

/// Evaluates a checkpoint; with references the gains and ΔMTL are filled in.
pub fn eval(ov: &Overrides, opts: &EvalOptions) -> CliResult<MetricsReport> {
    let ckpt = opts
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("eval needs --checkpoint (or --reference-tables)".into()))?;
    let (store, model) = load_checkpoint(ckpt).map_err(|e| CliError::Runtime(format!("{}: {e}", ckpt.display())))?;
    let settings = ov.settings()?;
    if ov.config.is_some() {
        let cfg = RunConfig::from_settings(&settings)?;
        if cfg.model != model.cfg {
            return Err(CliError::Runtime(format!(
                "checkpoint {} was trained with a different model configuration than {}",
                ckpt.display(),
                ov.config.as_ref().expect("checked").display()
            )));
        }
    }
    let data_dir = ov.data.clone().unwrap_or_else(|| PathBuf::from(settings.get("data_dir")));
    let split = match opts.split.as_deref().unwrap_or("val") {
        "train" => Split::Train,
        "val" => Split::Val,
        other => return Err(CliError::Usage(format!("--split: expected train or val, got {other:?}"))),
    };
    let samples = load_split(&data_dir, split, model.cfg.image_h, model.cfg.image_w)?;
    if let Some(k) = model.cfg.tasks.iter().find_map(|t| match t.kind {
        bridgenet::model::TaskKind::Categorical { classes } => Some(classes),
        _ => None,
    }) {
        if samples.iter().flat_map(|s| &s.seg).any(|&c| c < 0 || c as usize >= k) {
            return Err(CliError::Runtime(format!("dataset labels exceed the checkpoint's {k} classes")));
        }
    }
    let mut report = evaluate(&model, &store, &samples)?;
    if let Some(stl) = load_references(&opts.stl_refs)? {
        report = report.with_reference(&stl)?;
    }
    if let Some(out) = &ov.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.kv"), report.to_kv())?;
    }
    Ok(report)
}

/// Runs the gradient checks and fails naming every block over tolerance.
pub fn gradcheck(block: Option<&str>, fault: Option<&str>, log: &mut dyn Write) -> CliResult<Vec<BlockReport>> {
    let fault = match fault {
        Some(f) => Some(BackwardFault::parse(f).ok_or_else(|| {
            CliError::Usage(format!(
                "--inject-fault: unknown rule {f:?} (expected gelu, softmax, layer_norm, conv2d or matmul)"
            ))
        })?),
        None => None,
    };
    let reports = match block {
        Some(b) => vec![check_block(b, fault)?],
        None => check_all(fault)?,
    };
    writeln!(log, "block\tmax_rel_error\tcoords\tstatus\tworst")?;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        writeln!(
            log,
            "{}\t{:.3e}\t{}\t{status}\t{}",
            r.block, r.report.max_rel_error, r.report.coords_checked, r.report.worst
        )?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.block).collect();
    if !failed.is_empty() {
        return Err(CliError::Runtime(format!(
            "gradient check failed (tolerance {TOLERANCE:e}) in: {}",
            failed.join(", ")
        )));
    }
    Ok(reports)
}
