//! Training configuration and its `key = value` text form.
//!
//! Keys are dotted (`optim.lr = 0.001`); a `[section]` line prefixes the
//! keys that follow it. `#` starts a comment. Unknown keys are errors.

use crate::error::{HarnessError, Result};
use crate::optim::{AdamConfig, StepDecay};
use cloud_transform::blocks::{BlockConfig, PoolHeadConfig};
use cloud_transform::gridnn::NormKind;
use cloud_transform::models::{ModelConfig, Task};
use cloud_transform::raster::{Aggregation, KeyMode};
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

/// Thresholds that end training early once every one relevant to the task
/// holds on the validation split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StopRule {
    pub accuracy: Option<f64>,
    pub fg_accuracy: Option<f64>,
    pub emd: Option<f64>,
    pub chamfer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub seed: u64,
    pub iterations: usize,
    pub batch: usize,
    pub points: usize,
    pub noise: f64,
    pub eval_every: usize,
    /// Clouds in each evaluation split.
    pub eval_samples: usize,
    /// Inpainting: share of the iterations, at the end, trained on Chamfer alone.
    pub finetune: f64,
    pub adam: AdamConfig,
    pub decay: StepDecay,
    pub stop: StopRule,
    pub out_dir: Option<PathBuf>,
    // model
    pub g: usize,
    pub n_stages: usize,
    pub hidden: usize,
    pub style_dim: usize,
    pub out_points: usize,
    pub heads_2d: usize,
    pub w_2d: usize,
    pub c_2d: usize,
    pub heads_3d: usize,
    pub w_3d: usize,
    pub c_3d: usize,
    pub gradient_balancing: bool,
    pub aggregation: Aggregation,
    pub key_mode: KeyMode,
    pub pool_w: usize,
    pub pool_c: usize,
    pub class_dim: usize,
}

impl TrainConfig {
    pub fn desk(task: Task) -> Self {
        let (lr, iterations) = match task {
            Task::Segment => (1e-3, 2000),
            Task::Classify | Task::Generate | Task::Inpaint => (1e-3, 3000),
        };
        // one label per cloud: a larger evaluation set keeps accuracy steps small
        let (eval_every, eval_samples) = match task {
            Task::Classify => (100, 128),
            _ => (50, 32),
        };
        Self {
            task,
            seed: 0,
            iterations,
            batch: 4,
            points: 256,
            noise: 0.01,
            eval_every,
            eval_samples,
            finetune: 0.2,
            adam: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            decay: StepDecay {
                factor: 0.5,
                interval: 1000,
            },
            stop: StopRule::default(),
            out_dir: None,
            g: 64,
            n_stages: 1,
            hidden: 64,
            style_dim: 64,
            out_points: 128,
            heads_2d: 4,
            w_2d: 16,
            c_2d: 16,
            heads_3d: 4,
            w_3d: 8,
            c_3d: 8,
            gradient_balancing: true,
            aggregation: Aggregation::Max,
            key_mode: KeyMode::ResidualRigid,
            pool_w: 8,
            pool_c: 8,
            class_dim: 64,
        }
    }

    /// The architecture described by this configuration.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::desk(self.task);
        let mut block = BlockConfig::mixed(
            self.g,
            self.heads_2d,
            self.w_2d,
            self.c_2d,
            self.heads_3d,
            self.w_3d,
            self.c_3d,
        )
        .with_aggregation(self.aggregation)
        .with_key_mode(self.key_mode);
        block.gradient_balancing = self.gradient_balancing;
        if m.block.norm_kind == NormKind::AdaptiveInstance {
            block = block.adaptive(self.style_dim);
        }
        m.block = block;
        m.n_stages = self.n_stages;
        m.hidden = self.hidden;
        m.style_dim = self.style_dim;
        m.out_points = self.out_points;
        if let Some(pool) = &mut m.pool {
            pool.g = self.g;
            pool.gradient_balancing = self.gradient_balancing;
            pool.heads = vec![
                PoolHeadConfig::new(2, self.pool_w, self.pool_c),
                PoolHeadConfig::new(3, self.pool_w, self.pool_c),
            ];
            for h in &mut pool.heads {
                h.key_mode = self.key_mode;
            }
            pool.class_dim = if self.task == Task::Inpaint {
                self.style_dim
            } else {
                self.class_dim
            };
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config { line: 0, msg });
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad(format!("optim.lr must be positive, got {}", self.adam.lr));
        }
        if !(0.0..1.0).contains(&self.adam.beta1)
            || !(0.0..1.0).contains(&self.adam.beta2)
            || self.adam.eps <= 0.0
        {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.iterations == 0 || self.batch == 0 || self.eval_samples == 0 {
            return bad("iterations, batch and eval_samples must be >= 1".into());
        }
        if !(self.decay.factor > 0.0 && self.decay.factor <= 1.0) {
            return bad(format!(
                "schedule.factor {} not in (0, 1]",
                self.decay.factor
            ));
        }
        if !(0.0..1.0).contains(&self.finetune) {
            return bad(format!("train.finetune {} not in [0, 1)", self.finetune));
        }
        self.model_config()?;
        Ok(())
    }

    /// Sets one dotted key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: FromStr>(v: &str) -> std::result::Result<T, String>
        where
            T::Err: Display,
        {
            v.parse::<T>()
                .map_err(|e| format!("cannot parse {v:?}: {e}"))
        }
        fn opt(v: &str) -> std::result::Result<Option<f64>, String> {
            if v == "none" {
                Ok(None)
            } else {
                p(v).map(Some)
            }
        }
        match key {
            "task" => self.task = p(value)?,
            "seed" => self.seed = p(value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "train.iterations" => self.iterations = p(value)?,
            "train.batch" => self.batch = p(value)?,
            "train.eval_every" => self.eval_every = p(value)?,
            "train.finetune" => self.finetune = p(value)?,
            "data.points" => self.points = p(value)?,
            "data.noise" => self.noise = p(value)?,
            "data.eval_samples" => self.eval_samples = p(value)?,
            "optim.lr" => self.adam.lr = p(value)?,
            "optim.beta1" => self.adam.beta1 = p(value)?,
            "optim.beta2" => self.adam.beta2 = p(value)?,
            "optim.eps" => self.adam.eps = p(value)?,
            "schedule.factor" => self.decay.factor = p(value)?,
            "schedule.interval" => self.decay.interval = p(value)?,
            "stop.accuracy" => self.stop.accuracy = opt(value)?,
            "stop.fg_accuracy" => self.stop.fg_accuracy = opt(value)?,
            "stop.emd" => self.stop.emd = opt(value)?,
            "stop.chamfer" => self.stop.chamfer = opt(value)?,
            "model.g" => self.g = p(value)?,
            "model.n_stages" => self.n_stages = p(value)?,
            "model.hidden" => self.hidden = p(value)?,
            "model.style_dim" => self.style_dim = p(value)?,
            "model.out_points" => self.out_points = p(value)?,
            "model.heads_2d" => self.heads_2d = p(value)?,
            "model.w_2d" => self.w_2d = p(value)?,
            "model.c_2d" => self.c_2d = p(value)?,
            "model.heads_3d" => self.heads_3d = p(value)?,
            "model.w_3d" => self.w_3d = p(value)?,
            "model.c_3d" => self.c_3d = p(value)?,
            "ct.gradient_balancing" => self.gradient_balancing = p(value)?,
            "ct.aggregation" => self.aggregation = p(value)?,
            "ct.key_mode" => self.key_mode = p(value)?,
            "pool.w" => self.pool_w = p(value)?,
            "pool.c" => self.pool_c = p(value)?,
            "pool.class_dim" => self.class_dim = p(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its current value, in echo order. The output directory
    /// is left out so that runs differing only in where they write produce
    /// identical files.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        vec![
            ("task", self.task.to_string()),
            ("seed", self.seed.to_string()),
            ("train.iterations", self.iterations.to_string()),
            ("train.batch", self.batch.to_string()),
            ("train.eval_every", self.eval_every.to_string()),
            ("train.finetune", self.finetune.to_string()),
            ("data.points", self.points.to_string()),
            ("data.noise", self.noise.to_string()),
            ("data.eval_samples", self.eval_samples.to_string()),
            ("optim.lr", self.adam.lr.to_string()),
            ("optim.beta1", self.adam.beta1.to_string()),
            ("optim.beta2", self.adam.beta2.to_string()),
            ("optim.eps", self.adam.eps.to_string()),
            ("schedule.factor", self.decay.factor.to_string()),
            ("schedule.interval", self.decay.interval.to_string()),
            ("stop.accuracy", opt(self.stop.accuracy)),
            ("stop.fg_accuracy", opt(self.stop.fg_accuracy)),
            ("stop.emd", opt(self.stop.emd)),
            ("stop.chamfer", opt(self.stop.chamfer)),
            ("model.g", self.g.to_string()),
            ("model.n_stages", self.n_stages.to_string()),
            ("model.hidden", self.hidden.to_string()),
            ("model.style_dim", self.style_dim.to_string()),
            ("model.out_points", self.out_points.to_string()),
            ("model.heads_2d", self.heads_2d.to_string()),
            ("model.w_2d", self.w_2d.to_string()),
            ("model.c_2d", self.c_2d.to_string()),
            ("model.heads_3d", self.heads_3d.to_string()),
            ("model.w_3d", self.w_3d.to_string()),
            ("model.c_3d", self.c_3d.to_string()),
            ("ct.gradient_balancing", self.gradient_balancing.to_string()),
            ("ct.aggregation", self.aggregation.to_string()),
            ("ct.key_mode", self.key_mode.to_string()),
            ("pool.w", self.pool_w.to_string()),
            ("pool.c", self.pool_c.to_string()),
            ("pool.class_dim", self.class_dim.to_string()),
        ]
    }

    /// Canonical text form; parsing it reproduces the configuration apart
    /// from `out_dir`.
    pub fn echo(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses configuration text. The `task` key, when present, must come
    /// first because it selects the defaults the other keys override.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Option<Self> = None;
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| HarnessError::Config { line: i + 1, msg };
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section {line:?}")))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let key = if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            if key == "task" {
                if cfg.is_some() {
                    return Err(err("task must be the first key".into()));
                }
                cfg = Some(Self::desk(v.parse().map_err(|e| err(format!("{e}")))?));
                continue;
            }
            cfg.get_or_insert_with(|| Self::desk(Task::Segment))
                .set(&key, v)
                .map_err(err)?;
        }
        Ok(cfg.unwrap_or_else(|| Self::desk(Task::Segment)))
    }
}
