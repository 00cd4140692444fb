use std::fmt;

use crate::error::{Error, Result};
use crate::tfr::TfrSize;

/// Output strides of the three feature scales, finest first.
pub const STRIDES: [usize; 3] = [4, 8, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Per-pixel classification into `classes` labels.
    Categorical { classes: usize },
    /// Scalar regression (depth).
    Depth,
    /// Unit-vector regression (surface normals).
    Normals,
    /// Binary boundary map.
    Edges,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
}

impl TaskSpec {
    pub fn segmentation(classes: usize) -> Self {
        TaskSpec {
            name: "seg".into(),
            kind: TaskKind::Categorical { classes },
        }
    }

    pub fn depth() -> Self {
        TaskSpec {
            name: "depth".into(),
            kind: TaskKind::Depth,
        }
    }

    pub fn normals() -> Self {
        TaskSpec {
            name: "normals".into(),
            kind: TaskKind::Normals,
        }
    }

    pub fn edges() -> Self {
        TaskSpec {
            name: "edges".into(),
            kind: TaskKind::Edges,
        }
    }

    /// Task from its canonical name; `classes` applies to segmentation.
    pub fn by_name(name: &str, classes: usize) -> Result<Self> {
        match name {
            "seg" => Ok(Self::segmentation(classes)),
            "depth" => Ok(Self::depth()),
            "normals" => Ok(Self::normals()),
            "edges" => Ok(Self::edges()),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            TaskKind::Categorical { classes } => classes,
            TaskKind::Depth | TaskKind::Edges => 1,
            TaskKind::Normals => 3,
        }
    }

    /// Whether the evaluation metric improves downwards.
    pub fn lower_is_better(&self) -> bool {
        matches!(self.kind, TaskKind::Depth | TaskKind::Normals)
    }

    pub fn metric_name(&self) -> &'static str {
        match self.kind {
            TaskKind::Categorical { .. } => "miou",
            TaskKind::Depth => "rmse",
            TaskKind::Normals => "merr",
            TaskKind::Edges => "odsf",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// One task, no cross-task modules.
    Stl,
    /// Shared encoder with per-task decoders.
    MtlBaseline,
    BridgeNet,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stl" => Some(Variant::Stl),
            "mtl_baseline" => Some(Variant::MtlBaseline),
            "bridgenet" => Some(Variant::BridgeNet),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Stl => "stl",
            Variant::MtlBaseline => "mtl_baseline",
            Variant::BridgeNet => "bridgenet",
        }
    }
}

/// Which interaction modules are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modules {
    pub tpp: bool,
    pub bfe: bool,
    pub tfr: bool,
}

impl Modules {
    pub const ALL: Modules = Modules {
        tpp: true,
        bfe: true,
        tfr: true,
    };
    pub const NONE: Modules = Modules {
        tpp: false,
        bfe: false,
        tfr: false,
    };

    /// Modules enabled in both.
    pub fn and(self, other: Modules) -> Modules {
        Modules {
            tpp: self.tpp && other.tpp,
            bfe: self.bfe && other.bfe,
            tfr: self.tfr && other.tfr,
        }
    }

    /// Turns off the named module.
    pub fn ablate(&mut self, name: &str) -> Result<()> {
        match name {
            "tpp" => self.tpp = false,
            "bfe" => self.bfe = false,
            "tfr" => self.tfr = false,
            other => return Err(Error::config(format!("unknown module {other:?} to ablate"))),
        }
        Ok(())
    }
}

impl fmt::Display for Modules {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = [("tpp", self.tpp), ("bfe", self.bfe), ("tfr", self.tfr)]
            .iter()
            .filter(|(_, e)| *e)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join(","))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    /// Shared width of generic, specific and attention features.
    pub channels: usize,
    pub tasks: Vec<TaskSpec>,
    pub tfr_depth: usize,
    pub heads: usize,
    /// Query downsample of the bridge attention.
    pub query_down: usize,
    /// Key/value downsample per scale, finest first.
    pub kv_down: [usize; 3],
    pub variant: Variant,
    pub modules: Modules,
}

impl ModelConfig {
    /// Segmentation + depth on 64×64 images.
    pub fn toy(classes: usize) -> Self {
        ModelConfig {
            image_h: 64,
            image_w: 64,
            channels: 32,
            tasks: vec![TaskSpec::segmentation(classes), TaskSpec::depth()],
            tfr_depth: TfrSize::Base.depth(),
            heads: 2,
            query_down: 2,
            kv_down: [8, 4, 2],
            variant: Variant::BridgeNet,
            modules: Modules::ALL,
        }
    }

    /// 16×16 two-task configuration small enough for full gradient checks.
    /// The coarsest map is 1×1, so both downsamples shrink accordingly.
    pub fn tiny() -> Self {
        ModelConfig {
            image_h: 16,
            image_w: 16,
            channels: 8,
            tasks: vec![TaskSpec::segmentation(3), TaskSpec::depth()],
            tfr_depth: 2,
            heads: 2,
            query_down: 1,
            kv_down: [4, 2, 1],
            variant: Variant::BridgeNet,
            modules: Modules::ALL,
        }
    }

    /// Copy with a different variant; STL keeps only `task`.
    pub fn with_variant(&self, variant: Variant, task: Option<usize>) -> Self {
        let mut c = self.clone();
        c.variant = variant;
        match variant {
            Variant::Stl => {
                c.tasks = vec![self.tasks[task.unwrap_or(0)].clone()];
                c.modules = Modules::NONE;
            }
            Variant::MtlBaseline => c.modules = Modules::NONE,
            Variant::BridgeNet => {}
        }
        c
    }

    /// Modules that are actually built.
    pub fn active_modules(&self) -> Modules {
        match self.variant {
            Variant::BridgeNet => self.modules,
            _ => Modules::NONE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("at least one task is required"));
        }
        if self.variant == Variant::Stl && self.tasks.len() != 1 {
            return Err(Error::config("the stl variant takes exactly one task"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|u| u.name == t.name) {
                return Err(Error::config(format!("duplicate task {}", t.name)));
            }
            if let TaskKind::Categorical { classes } = t.kind {
                if classes < 2 {
                    return Err(Error::config("segmentation needs at least 2 classes"));
                }
            }
        }
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(Error::config("channels must be a positive even number"));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "channels {} not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.tfr_depth == 0 {
            return Err(Error::config("tfr_depth must be at least 1"));
        }
        for (i, &s) in STRIDES.iter().enumerate() {
            let (h, w) = (self.image_h / s, self.image_w / s);
            if self.image_h % s != 0 || self.image_w % s != 0 || h == 0 || w == 0 {
                return Err(Error::config(format!(
                    "image {}x{} not divisible by stride {s}",
                    self.image_h, self.image_w
                )));
            }
            let l = self.kv_down[i];
            if l == 0 || h % l != 0 || w % l != 0 {
                return Err(Error::config(format!(
                    "scale {i} map {h}x{w} not divisible by key/value downsample {l}"
                )));
            }
            if self.query_down == 0 || h % self.query_down != 0 || w % self.query_down != 0 {
                return Err(Error::config(format!(
                    "scale {i} map {h}x{w} not divisible by query downsample {}",
                    self.query_down
                )));
            }
        }
        Ok(())
    }

    /// `key=value` lines describing the config, for checkpoint headers.
    pub fn to_header(&self) -> String {
        let tasks: Vec<String> = self.tasks.iter().map(|t| t.name.clone()).collect();
        let classes = self
            .tasks
            .iter()
            .find_map(|t| match t.kind {
                TaskKind::Categorical { classes } => Some(classes),
                _ => None,
            })
            .unwrap_or(0);
        let kv: Vec<String> = self.kv_down.iter().map(|v| v.to_string()).collect();
        format!(
            "image_h={}\nimage_w={}\nchannels={}\ntasks={}\nclasses={}\ntfr_depth={}\nheads={}\nquery_down={}\nkv_down={}\nvariant={}\nmodules={}\n",
            self.image_h,
            self.image_w,
            self.channels,
            tasks.join(","),
            classes,
            self.tfr_depth,
            self.heads,
            self.query_down,
            kv.join(","),
            self.variant.name(),
            self.modules,
        )
    }

    pub fn from_header(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
            map.insert(k.trim(), v.trim());
        }
        let get = |k: &str| -> Result<&str> {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("header is missing {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("header field {k} is not a number")))
        };
        let classes = num("classes")?;
        let tasks = get("tasks")?
            .split(',')
            .map(|n| TaskSpec::by_name(n, classes))
            .collect::<Result<Vec<_>>>()?;
        let kv: Vec<usize> = get("kv_down")?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Format("bad kv_down".into())))
            .collect::<Result<_>>()?;
        let kv_down: [usize; 3] = kv
            .try_into()
            .map_err(|_| Error::Format("kv_down needs three values".into()))?;
        let variant = Variant::parse(get("variant")?).ok_or_else(|| Error::Format("bad variant".into()))?;
        let mut modules = Modules::NONE;
        for m in get("modules")?.split(',').filter(|m| *m != "none") {
            match m {
                "tpp" => modules.tpp = true,
                "bfe" => modules.bfe = true,
                "tfr" => modules.tfr = true,
                other => return Err(Error::Format(format!("unknown module {other}"))),
            }
        }
        let cfg = ModelConfig {
            image_h: num("image_h")?,
            image_w: num("image_w")?,
            channels: num("channels")?,
            tasks,
            tfr_depth: num("tfr_depth")?,
            heads: num("heads")?,
            query_down: num("query_down")?,
            kv_down,
            variant,
            modules,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
