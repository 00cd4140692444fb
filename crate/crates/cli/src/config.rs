//! Flat `key = value` run configuration.
//!
//! Every key has a default listed in [`KEYS`]; a file only overrides what it
//! names. Unknown keys and unparsable values are rejected with the key name.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bridgenet::data::SceneConfig;
use bridgenet::model::{ModelConfig, Modules, TaskSpec, Variant};
use bridgenet::optim::{OptimConfig, OptimKind};
use bridgenet::tfr::TfrSize;
use bridgenet::train::TrainConfig;

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seeds data generation, initialization and batch order"),
    ("out", "runs/default", "output directory of train and eval"),
    ("data_dir", "data", "dataset directory holding manifest.tsv"),
    ("scene.height", "64", "image height"),
    ("scene.width", "64", "image width"),
    ("scene.min_shapes", "2", "fewest shapes per scene"),
    ("scene.max_shapes", "4", "most shapes per scene"),
    ("scene.classes", "5", "segmentation classes including background"),
    ("scene.near", "1.0", "nearest depth"),
    ("scene.far", "2.0", "farthest depth"),
    ("scene.noise", "0.02", "pixel noise standard deviation"),
    ("scene.snap", "4", "shape bounds snap to this pixel grid"),
    ("data.train", "64", "training samples written by gen-data"),
    ("data.val", "16", "validation samples written by gen-data"),
    ("model.tasks", "seg,depth", "comma-separated tasks: seg, depth, normals, edges"),
    ("model.channels", "32", "feature width"),
    ("model.tfr", "base", "refiner size: base, large or huge"),
    ("model.heads", "2", "attention heads"),
    ("model.query_down", "2", "query downsample of the bridge attention"),
    ("model.kv_down", "8,4,2", "key/value downsample per scale, finest first"),
    ("model.variant", "bridgenet", "stl, mtl_baseline or bridgenet"),
    ("model.ablate", "", "comma-separated modules to disable: tpp, bfe, tfr"),
    ("model.stl_task", "seg", "task trained by the stl variant"),
    ("optim.kind", "adamw", "sgd, adam or adamw"),
    ("optim.lr", "0.001", "base learning rate"),
    ("optim.weight_decay", "0.05", "weight decay"),
    ("optim.power", "0.9", "polynomial decay power"),
    ("optim.momentum", "0.9", "sgd momentum"),
    ("train.iters", "2000", "optimizer steps"),
    ("train.batch_size", "4", "samples per step"),
    ("train.hflip", "true", "random horizontal flips"),
    ("train.log_interval", "50", "steps between progress lines on stdout"),
    ("train.eval_interval", "500", "steps between validation runs (0 = end only)"),
    ("train.checkpoint_interval", "500", "steps between checkpoints (0 = end only)"),
];

/// A bad key or value, always naming the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

/// Raw key-value settings over the defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            s.set(k.trim(), v.trim())?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        Settings::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(ConfigError(format!("unknown config key {key:?}"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| ConfigError(format!("config key {key}: cannot parse {v:?}: {e}")))
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    /// `key = value` lines of every setting, defaults included.
    pub fn render(&self) -> String {
        KEYS.iter().map(|(k, _, _)| format!("{k} = {}\n", self.get(k))).collect()
    }
}

/// Typed view of the settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data_dir: PathBuf,
    pub scene: SceneConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub log_interval: usize,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
}

fn wrap<T>(key: &str, r: bridgenet::Result<T>) -> Result<T> {
    r.map_err(|e| ConfigError(format!("config key {key}: {e}")))
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let seed: u64 = s.parsed("seed")?;
        let scene = SceneConfig {
            height: s.parsed("scene.height")?,
            width: s.parsed("scene.width")?,
            min_shapes: s.parsed("scene.min_shapes")?,
            max_shapes: s.parsed("scene.max_shapes")?,
            classes: s.parsed("scene.classes")?,
            near: s.parsed("scene.near")?,
            far: s.parsed("scene.far")?,
            noise: s.parsed("scene.noise")?,
            snap: s.parsed("scene.snap")?,
            seed,
        };
        wrap("scene.*", scene.validate())?;

        let tasks = s
            .list("model.tasks")
            .iter()
            .map(|t| wrap("model.tasks", TaskSpec::by_name(t, scene.classes)))
            .collect::<Result<Vec<_>>>()?;
        let tfr = s.get("model.tfr");
        let tfr = TfrSize::parse(tfr).ok_or_else(|| ConfigError(format!("config key model.tfr: unknown size {tfr:?}")))?;
        let kv: Vec<usize> = s
            .list("model.kv_down")
            .iter()
            .map(|v| v.parse().map_err(|_| ConfigError(format!("config key model.kv_down: bad value {v:?}"))))
            .collect::<Result<_>>()?;
        let kv_down: [usize; 3] = kv
            .try_into()
            .map_err(|_| ConfigError("config key model.kv_down: needs three values".into()))?;
        let variant = s.get("model.variant");
        let variant =
            Variant::parse(variant).ok_or_else(|| ConfigError(format!("config key model.variant: unknown {variant:?}")))?;
        let mut modules = Modules::ALL;
        for m in s.list("model.ablate") {
            wrap("model.ablate", modules.ablate(&m))?;
        }
        let full = ModelConfig {
            image_h: scene.height,
            image_w: scene.width,
            channels: s.parsed("model.channels")?,
            tasks,
            tfr_depth: tfr.depth(),
            heads: s.parsed("model.heads")?,
            query_down: s.parsed("model.query_down")?,
            kv_down,
            variant: Variant::BridgeNet,
            modules,
        };
        let stl_task = s.get("model.stl_task");
        let stl_index = match variant {
            Variant::Stl => Some(
                full.tasks
                    .iter()
                    .position(|t| t.name == stl_task)
                    .ok_or_else(|| ConfigError(format!("config key model.stl_task: {stl_task:?} is not in model.tasks")))?,
            ),
            _ => None,
        };
        let model = full.with_variant(variant, stl_index);
        wrap("model.*", model.validate())?;

        let iters: usize = s.parsed("train.iters")?;
        let optim = OptimConfig {
            kind: s.parsed::<OptimKind>("optim.kind")?,
            lr: s.parsed("optim.lr")?,
            weight_decay: s.parsed("optim.weight_decay")?,
            power: s.parsed("optim.power")?,
            momentum: s.parsed("optim.momentum")?,
            total_iters: iters.max(1),
            ..OptimConfig::default()
        };
        wrap("optim.*", optim.validate())?;
        let train = TrainConfig {
            iters,
            batch_size: s.parsed("train.batch_size")?,
            hflip: s.parsed("train.hflip")?,
            seed,
        };
        if train.iters == 0 || train.batch_size == 0 {
            return Err(ConfigError("config keys train.iters and train.batch_size must be positive".into()));
        }
        Ok(RunConfig {
            seed,
            out: PathBuf::from(s.get("out")),
            data_dir: PathBuf::from(s.get("data_dir")),
            scene,
            n_train: s.parsed("data.train")?,
            n_val: s.parsed("data.val")?,
            model,
            optim,
            train,
            log_interval: s.parsed("train.log_interval")?,
            eval_interval: s.parsed("train.eval_interval")?,
            checkpoint_interval: s.parsed("train.checkpoint_interval")?,
        })
    }
}
