use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::data::DataConfig;
use crate::error::{invalid_arg, MmptError, Result};
use crate::geometry::RotationAxis;
use crate::losses::LossWeights;
use crate::pretext::TaskConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

impl FromStr for Preset {
    type Err = MmptError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(MmptError::Parse(format!("unknown preset {s:?}"))),
        }
    }
}

/// Which pretext tasks contribute to the joint loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSet {
    pub tlr: bool,
    pub plr: bool,
    pub mcl: bool,
}

impl TaskSet {
    pub const ALL: TaskSet = TaskSet {
        tlr: true,
        plr: true,
        mcl: true,
    };
    pub const TLR_ONLY: TaskSet = TaskSet {
        tlr: true,
        plr: false,
        mcl: false,
    };
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.tlr, "tlr"), (self.plr, "plr"), (self.mcl, "mcl")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for TaskSet {
    type Err = MmptError;

    fn from_str(s: &str) -> Result<Self> {
        let mut t = TaskSet {
            tlr: false,
            plr: false,
            mcl: false,
        };
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "tlr" => t.tlr = true,
                "plr" => t.plr = true,
                "mcl" => t.mcl = true,
                _ => return Err(MmptError::Parse(format!("unknown task {name:?}"))),
            }
        }
        Ok(t)
    }
}

/// Every hyperparameter of a pre-training run. Serializes to flat
/// `key = value` text that parses back to an equal value.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Total optimizer steps; 0 means `epochs` passes over the train split.
    pub steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub queue_size: usize,
    pub focal: bool,
    pub tasks: TaskSet,
    pub weights: LossWeights,
    pub backbone: BackboneConfig,
    pub task: TaskConfig,
    pub data: DataConfig,
    /// Exported dataset to train on instead of generating `data`.
    pub data_dir: Option<PathBuf>,
    /// Dataset used by the probe, few-shot and reconstruction protocols.
    pub eval: DataConfig,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_l2: f64,
    /// Directory for PGM dumps of the rendered views of the first step.
    pub dump_views: Option<PathBuf>,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            seed: 42,
            steps: 200,
            epochs: 17,
            batch_size: 4,
            lr: 5e-4,
            lr_floor: 1e-6,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.99,
            queue_size: 8,
            focal: false,
            tasks: TaskSet::ALL,
            weights: LossWeights::default(),
            backbone: BackboneConfig::desk(),
            task: TaskConfig::desk(),
            data: DataConfig::default(),
            data_dir: None,
            eval: DataConfig {
                per_class: 40,
                split_fracs: (0.5, 0.0, 0.5),
                seed: 7,
                ..DataConfig::default()
            },
            probe_epochs: 300,
            probe_lr: 0.5,
            probe_l2: 1e-4,
            dump_views: None,
            log_every: 1,
        }
    }

    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            preset: Preset::Paper,
            momentum: 0.999,
            queue_size: 256,
            steps: 0,
            epochs: 100,
            backbone: BackboneConfig::paper(),
            task: TaskConfig::paper(),
            data: DataConfig {
                n_points: 1024,
                ..desk.data
            },
            eval: DataConfig {
                n_points: 1024,
                ..desk.eval
            },
            ..desk
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Selects entry `index` of the contrastive-weight ablation grid.
    pub fn with_weight_grid(mut self, index: usize) -> Result<Self> {
        let grid = LossWeights::ablation_grid();
        self.weights = *grid
            .get(index)
            .ok_or_else(|| invalid_arg!("weight grid index {index} outside 0..{}", grid.len()))?;
        Ok(self)
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * train_len.div_ceil(self.batch_size).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.lr_floor >= 0.0) || self.lr_floor > self.lr {
            return Err(invalid_arg!(
                "need lr > 0 and 0 <= lr_floor <= lr, got {} / {}",
                self.lr,
                self.lr_floor
            ));
        }
        if self.epochs == 0 {
            return Err(invalid_arg!("epochs must be at least 1"));
        }
        if self.batch_size == 0 || (self.tasks.mcl && self.batch_size < 2) {
            return Err(invalid_arg!("batch size {} too small (contrastive terms need 2)", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(invalid_arg!("Adam betas must lie in [0, 1) and eps be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid_arg!("weight decay must be non-negative"));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(invalid_arg!("momentum must lie in (0, 1)"));
        }
        if !(self.tasks.tlr || self.tasks.plr || self.tasks.mcl) {
            return Err(invalid_arg!("at least one pretext task must be enabled"));
        }
        self.weights.validate()?;
        self.backbone.validate()?;
        self.task.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let b = &self.backbone;
        let t = &self.task;
        let a = &t.view_augment;
        kv("preset", self.preset.name().into());
        kv("seed", self.seed.to_string());
        kv("steps", self.steps.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_floor", self.lr_floor.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", self.eps.to_string());
        kv("momentum", self.momentum.to_string());
        kv("queue_size", self.queue_size.to_string());
        kv("focal", self.focal.to_string());
        kv("tasks", self.tasks.to_string());
        kv("weights.alpha", self.weights.alpha.to_string());
        kv("weights.beta", self.weights.beta.to_string());
        kv("weights.contrast", self.weights.w_contrast.to_string());
        kv("backbone.depth", b.depth.to_string());
        kv("backbone.dim", b.dim.to_string());
        kv("backbone.heads", b.heads.to_string());
        kv("backbone.ffn_ratio", b.ffn_ratio.to_string());
        kv("backbone.decoder_depth", b.decoder_depth.to_string());
        kv("backbone.drop_path", b.drop_path.to_string());
        kv("task.groups", t.groups.to_string());
        kv("task.group_size", t.group_size.to_string());
        kv("task.mask_ratio", t.mask_ratio.to_string());
        kv("task.n_real", t.n_real.to_string());
        kv("task.n_fake", t.n_fake.to_string());
        kv("task.proj_dim", t.proj_dim.to_string());
        kv("task.image_size", t.image_size.to_string());
        kv("task.image_channels", join(&t.image_channels));
        kv("task.n_views", t.n_views.to_string());
        kv("task.tau", t.tau.to_string());
        kv("view.scale_min", a.scale_range.0.to_string());
        kv("view.scale_max", a.scale_range.1.to_string());
        kv(
            "view.rotation_axis",
            match a.rotation.axis {
                RotationAxis::Up => "up",
                RotationAxis::Random => "random",
            }
            .into(),
        );
        kv("view.max_angle", a.rotation.max_angle.to_string());
        kv("view.translation", a.translation_range.to_string());
        kv("view.dropout", a.dropout_prob.to_string());
        kv("view.elastic_spacing", a.elastic.0.to_string());
        kv("view.elastic_magnitude", a.elastic.1.to_string());
        kv("view.jitter", a.jitter_sigma.to_string());
        kv("view.renormalize", a.renormalize.to_string());
        for (prefix, d) in [("data", &self.data), ("eval", &self.eval)] {
            kv(&format!("{prefix}.per_class"), d.per_class.to_string());
            kv(&format!("{prefix}.n_points"), d.n_points.to_string());
            kv(&format!("{prefix}.noise"), d.noise_sigma.to_string());
            let (a, b, c) = d.split_fracs;
            kv(&format!("{prefix}.split"), format!("{a},{b},{c}"));
            kv(&format!("{prefix}.seed"), d.seed.to_string());
        }
        if let Some(p) = &self.data_dir {
            kv("data.dir", p.display().to_string());
        }
        kv("probe.epochs", self.probe_epochs.to_string());
        kv("probe.lr", self.probe_lr.to_string());
        kv("probe.l2", self.probe_l2.to_string());
        if let Some(p) = &self.dump_views {
            kv("dump_views", p.display().to_string());
        }
        kv("log_every", self.log_every.to_string());
        s
    }

    /// Parses `key = value` lines over the preset named by a `preset` line
    /// (desk when absent). Blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MmptError::Parse(format!("config line {}: expected key = value", lineno + 1)))?;
            entries.push((lineno + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let preset = entries
            .iter()
            .find(|(_, k, _)| k == "preset")
            .map(|(_, _, v)| v.parse())
            .transpose()?
            .unwrap_or(Preset::Desk);
        let mut cfg = Self::preset(preset);
        for (lineno, k, v) in &entries {
            cfg.set(k, v).map_err(|e| MmptError::Parse(format!("config line {lineno}: {e}")))?;
        }
        Ok(cfg)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let b = &mut self.backbone;
        let t = &mut self.task;
        let a = &mut t.view_augment;
        match key {
            "preset" => self.preset = value.parse()?,
            "seed" => self.seed = num(value)?,
            "steps" => self.steps = num(value)?,
            "epochs" => self.epochs = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "lr" => self.lr = num(value)?,
            "lr_floor" => self.lr_floor = num(value)?,
            "weight_decay" => self.weight_decay = num(value)?,
            "beta1" => self.beta1 = num(value)?,
            "beta2" => self.beta2 = num(value)?,
            "eps" => self.eps = num(value)?,
            "momentum" => self.momentum = num(value)?,
            "queue_size" => self.queue_size = num(value)?,
            "focal" => self.focal = num(value)?,
            "tasks" => self.tasks = value.parse()?,
            "weights.alpha" => self.weights.alpha = num(value)?,
            "weights.beta" => self.weights.beta = num(value)?,
            "weights.contrast" => self.weights.w_contrast = num(value)?,
            "weights.grid" => *self = self.clone().with_weight_grid(num(value)?)?,
            "backbone.depth" => b.depth = num(value)?,
            "backbone.dim" => b.dim = num(value)?,
            "backbone.heads" => b.heads = num(value)?,
            "backbone.ffn_ratio" => b.ffn_ratio = num(value)?,
            "backbone.decoder_depth" => b.decoder_depth = num(value)?,
            "backbone.drop_path" => b.drop_path = num(value)?,
            "task.groups" => t.groups = num(value)?,
            "task.group_size" => t.group_size = num(value)?,
            "task.mask_ratio" => t.mask_ratio = num(value)?,
            "task.n_real" => t.n_real = num(value)?,
            "task.n_fake" => t.n_fake = num(value)?,
            "task.proj_dim" => t.proj_dim = num(value)?,
            "task.image_size" => t.image_size = num(value)?,
            "task.image_channels" => t.image_channels = list(value)?,
            "task.n_views" => t.n_views = num(value)?,
            "task.tau" => t.tau = num(value)?,
            "view.scale_min" => a.scale_range.0 = num(value)?,
            "view.scale_max" => a.scale_range.1 = num(value)?,
            "view.rotation_axis" => {
                a.rotation.axis = match value {
                    "up" => RotationAxis::Up,
                    "random" => RotationAxis::Random,
                    _ => return Err(MmptError::Parse(format!("unknown rotation axis {value:?}"))),
                }
            }
            "view.max_angle" => a.rotation.max_angle = num(value)?,
            "view.translation" => a.translation_range = num(value)?,
            "view.dropout" => a.dropout_prob = num(value)?,
            "view.elastic_spacing" => a.elastic.0 = num(value)?,
            "view.elastic_magnitude" => a.elastic.1 = num(value)?,
            "view.jitter" => a.jitter_sigma = num(value)?,
            "view.renormalize" => a.renormalize = num(value)?,
            "data.dir" => self.data_dir = Some(PathBuf::from(value)),
            "probe.epochs" => self.probe_epochs = num(value)?,
            "probe.lr" => self.probe_lr = num(value)?,
            "probe.l2" => self.probe_l2 = num(value)?,
            "dump_views" => self.dump_views = Some(PathBuf::from(value)),
            "log_every" => self.log_every = num(value)?,
            _ => {
                let (prefix, field) = key
                    .split_once('.')
                    .ok_or_else(|| MmptError::Parse(format!("unknown key {key:?}")))?;
                let d = match prefix {
                    "data" => &mut self.data,
                    "eval" => &mut self.eval,
                    _ => return Err(MmptError::Parse(format!("unknown key {key:?}"))),
                };
                match field {
                    "per_class" => d.per_class = num(value)?,
                    "n_points" => d.n_points = num(value)?,
                    "noise" => d.noise_sigma = num(value)?,
                    "seed" => d.seed = num(value)?,
                    "split" => {
                        let f: Vec<f64> = list(value)?;
                        let [x, y, z] = f[..] else {
                            return Err(MmptError::Parse(format!("{key} needs three fractions")));
                        };
                        d.split_fracs = (x, y, z);
                    }
                    _ => return Err(MmptError::Parse(format!("unknown key {key:?}"))),
                }
            }
        }
        Ok(())
    }
}

fn num<T: FromStr>(v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| MmptError::Parse(format!("{v:?}: {e}")))
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|x| num(x.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
