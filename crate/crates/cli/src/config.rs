//! Experiment config file: a TOML document whose sections override a preset.

use std::path::{Path, PathBuf};

use latent_cot::nnkernel::DistillDepths;
use latent_cot::training::{Preset, TrainConfig, TrainRegime};
use latent_cot::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub theory: TheorySection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub modulus: Option<u32>,
    pub bias: Option<u32>,
    pub hops: Option<usize>,
    pub input_low: Option<u32>,
    pub input_high: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub d_model: Option<usize>,
    pub context_length: Option<usize>,
    pub latent_steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub regime: Option<TrainRegime>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub per_length: Option<usize>,
    pub test_per_length: Option<usize>,
    pub lr: Option<f64>,
    pub warmup_ratio: Option<f64>,
    pub weight_decay: Option<f64>,
    pub clip_norm: Option<f64>,
    pub teacher_ce: Option<f64>,
    pub student_ce: Option<f64>,
    pub distill: Option<f64>,
    pub distill_depths: Option<DistillDepths>,
    pub no_distill: Option<bool>,
    pub no_teacher: Option<bool>,
    pub eval_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub tools: Option<Vec<String>>,
    pub targets: Option<Vec<String>>,
    pub length: Option<usize>,
    pub examples: Option<usize>,
    pub corrupt: Option<Vec<usize>>,
    pub include_pre: Option<bool>,
    pub probe_epochs: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    pub moduli: Option<Vec<u64>>,
    pub horizons: Option<Vec<usize>>,
    pub trials: Option<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Training configuration: preset first, then the file's sections.
    pub fn train_config(&self, preset: Preset, regime: TrainRegime, modulus: u32, hops: usize) -> TrainConfig {
        let t = &self.task;
        let regime = self.train.regime.unwrap_or(regime);
        let mut cfg = TrainConfig::preset(
            self.preset.unwrap_or(preset),
            regime,
            t.modulus.unwrap_or(modulus),
            t.hops.unwrap_or(hops),
        );
        set(&mut cfg.task.bias, t.bias);
        set(&mut cfg.task.input_low, t.input_low);
        if t.modulus.is_some() && t.input_high.is_none() {
            cfg.task.input_high = cfg.task.modulus - 1;
        }
        set(&mut cfg.task.input_high, t.input_high);
        let m = &self.model;
        set(&mut cfg.model.layers, m.layers);
        set(&mut cfg.model.heads, m.heads);
        set(&mut cfg.model.d_model, m.d_model);
        set(&mut cfg.model.context_length, m.context_length);
        set(&mut cfg.model.latent_steps, m.latent_steps);
        let tr = &self.train;
        set(&mut cfg.epochs, tr.epochs);
        set(&mut cfg.batch_size, tr.batch_size);
        set(&mut cfg.per_length, tr.per_length);
        set(&mut cfg.test_per_length, tr.test_per_length);
        set(&mut cfg.optim.lr, tr.lr);
        set(&mut cfg.optim.warmup_ratio, tr.warmup_ratio);
        set(&mut cfg.optim.adamw.weight_decay, tr.weight_decay);
        set(&mut cfg.optim.clip_norm, tr.clip_norm);
        set(&mut cfg.weights.teacher_ce, tr.teacher_ce);
        set(&mut cfg.weights.student_ce, tr.student_ce);
        set(&mut cfg.weights.distill, tr.distill);
        set(&mut cfg.distill_depths, tr.distill_depths);
        set(&mut cfg.ablation.no_distill, tr.no_distill);
        set(&mut cfg.ablation.no_teacher, tr.no_teacher);
        set(&mut cfg.eval_every, tr.eval_every);
        set(&mut cfg.checkpoint_every, tr.checkpoint_every);
        set(&mut cfg.seed, self.seed);
        cfg
    }
}

pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
