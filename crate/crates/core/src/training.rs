//! End-to-end training for the CODI, full-CoT and non-CoT regimes, plus
//! answer-accuracy evaluation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkernel::ops::argmax;
use crate::nnkernel::{
    checkpoint, clip_global_norm, loss_and_grads, predict_answers, AdamW, AdamWConfig,
    DistillDepths, DistillNormalizer, ForwardOptions, LossBreakdown, LossConfig, LossWeights,
    LrSchedule, Model, ModelConfig, PairedBatch, SeqBatch, TokenBatch,
};
use crate::taskgen::{
    make_curriculum, serialize, serialized_len, Curriculum, Regime, SerializedExample,
    TaskInstance, TaskSpec, Vocabulary,
};

/// Which objective is optimized and how answers are produced at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainRegime {
    /// Shared-backbone teacher and latent student, jointly trained.
    Codi,
    /// Explicit trace supervision; answers come from a greedy rollout.
    FullCot,
    /// Answer supervision directly after the inputs.
    NonCot,
}

impl TrainRegime {
    pub const ALL: [TrainRegime; 3] = [TrainRegime::Codi, TrainRegime::FullCot, TrainRegime::NonCot];

    pub fn name(self) -> &'static str {
        match self {
            TrainRegime::Codi => "codi",
            TrainRegime::FullCot => "full-cot",
            TrainRegime::NonCot => "non-cot",
        }
    }
}

impl std::str::FromStr for TrainRegime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TrainRegime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime {s:?} (codi, full-cot, non-cot)")))
    }
}

impl std::fmt::Display for TrainRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_distill: bool,
    pub no_teacher: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub clip_norm: f64,
    pub adamw: AdamWConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-4,
            warmup_ratio: 0.03,
            clip_norm: 2.0,
            adamw: AdamWConfig::default(),
        }
    }
}

/// Named hyperparameter bundles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Published configuration: width 256, 1000 epochs.
    Paper,
    /// CPU-sized configuration used by the acceptance suite.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?} (paper, desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub regime: TrainRegime,
    pub epochs: usize,
    pub batch_size: usize,
    pub per_length: usize,
    pub test_per_length: usize,
    pub weights: LossWeights,
    pub distill_depths: DistillDepths,
    pub ablation: Ablation,
    pub optim: OptimConfig,
    /// Evaluate on the test split every this many epochs (and after the last).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn preset(preset: Preset, regime: TrainRegime, modulus: u32, hops: usize) -> Self {
        match preset {
            Preset::Paper => TrainConfig {
                task: TaskSpec::new(modulus, 1, hops),
                model: ModelConfig {
                    context_length: 66,
                    ..ModelConfig::default()
                },
                regime,
                epochs: 1000,
                batch_size: 256,
                per_length: 2500,
                test_per_length: 500,
                weights: LossWeights::default(),
                distill_depths: DistillDepths::All,
                ablation: Ablation::default(),
                optim: OptimConfig::default(),
                eval_every: 50,
                checkpoint_every: 100,
                seed: 0,
            },
            Preset::Desk => TrainConfig {
                model: ModelConfig {
                    d_model: 64,
                    context_length: 24,
                    ..ModelConfig::default()
                },
                epochs: 200,
                per_length: 2500,
                test_per_length: 500,
                eval_every: 20,
                checkpoint_every: 0,
                // Five times fewer epochs than `Preset::Paper`; the larger
                // step and decay keep the latent solution reachable in that budget.
                optim: OptimConfig {
                    lr: 1e-3,
                    adamw: AdamWConfig {
                        weight_decay: 1.0,
                        ..AdamWConfig::default()
                    },
                    ..OptimConfig::default()
                },
                ..TrainConfig::preset(Preset::Paper, regime, modulus, hops)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        let w = &self.weights;
        if [w.teacher_ce, w.student_ce, w.distill].iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.ablation.no_teacher && !self.ablation.no_distill {
            return Err(Error::Config("no_teacher requires no_distill".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.per_length == 0 {
            return Err(Error::Config("epochs, batch_size and per_length must be positive".into()));
        }
        if self.model.vocab_size < Vocabulary::SIZE || self.task.modulus > crate::taskgen::NUM_VALUES {
            return Err(Error::Config("modulus exceeds the value vocabulary".into()));
        }
        if self.regime == TrainRegime::Codi && self.model.latent_steps == 0 {
            return Err(Error::Config("CODI needs at least one latent step".into()));
        }
        let longest = self
            .serializations()
            .iter()
            .map(|&r| serialized_len(self.task.num_inputs(), r, self.model.latent_steps))
            .max()
            .unwrap_or(0);
        if longest > self.model.context_length {
            return Err(Error::Config(format!(
                "longest serialized example ({longest} tokens) exceeds context_length {}",
                self.model.context_length
            )));
        }
        if !(self.optim.lr > 0.0) || !(0.0..1.0).contains(&self.optim.warmup_ratio) {
            return Err(Error::Config("lr must be positive and warmup_ratio in [0, 1)".into()));
        }
        Ok(())
    }

    /// Weights after applying the regime and ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        match self.regime {
            TrainRegime::Codi => {}
            TrainRegime::FullCot => {
                w.student_ce = 0.0;
                w.distill = 0.0;
            }
            TrainRegime::NonCot => {
                w.teacher_ce = 0.0;
                w.distill = 0.0;
            }
        }
        if self.ablation.no_distill {
            w.distill = 0.0;
        }
        if self.ablation.no_teacher {
            w.teacher_ce = 0.0;
            w.distill = 0.0;
        }
        w
    }

    fn serializations(&self) -> Vec<Regime> {
        match self.regime {
            TrainRegime::Codi => vec![Regime::Teacher, Regime::Student],
            TrainRegime::FullCot => vec![Regime::Teacher],
            TrainRegime::NonCot => vec![Regime::NonCot],
        }
    }

    /// The deterministic train/test data for this configuration.
    pub fn curriculum(&self) -> Result<Curriculum> {
        make_curriculum(&self.task, self.per_length, self.test_per_length, &mut stream(self.seed, 0))
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.per_length * self.task.num_inputs()).div_ceil(self.batch_size)
    }

    /// Stable FNV-1a hash of the JSON form, used to key runs.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Independent deterministic random stream `k` of a run seed.
fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthAccuracy {
    pub length: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_length: Vec<LengthAccuracy>,
    /// Count-weighted over lengths.
    pub aggregate: f64,
    /// Unweighted mean of per-length accuracies.
    pub length_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub eval: Option<EvalReport>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub normalizer: DistillNormalizer,
    pub metrics: Vec<EpochMetrics>,
    /// Loss components of every optimizer step.
    pub step_losses: Vec<LossBreakdown>,
    pub final_eval: EvalReport,
}

/// Files of a run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn checkpoint(&self, tag: &str) -> PathBuf {
        self.root.join(format!("ckpt_{tag}.bin"))
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoint("final")
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config: &'a TrainConfig,
    epoch: usize,
    step: u64,
    normalizer: &'a DistillNormalizer,
    eval: Option<&'a EvalReport>,
}

fn save_checkpoint(
    dir: &RunDir,
    tag: &str,
    model: &Model<f32>,
    cfg: &TrainConfig,
    epoch: usize,
    step: u64,
    normalizer: &DistillNormalizer,
    eval: Option<&EvalReport>,
) -> Result<()> {
    let path = dir.checkpoint(tag);
    checkpoint::save(&path, model, step)?;
    let side = Sidecar {
        config: cfg,
        epoch,
        step,
        normalizer,
        eval,
    };
    let json_path = path.with_extension("json");
    fs::write(&json_path, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&json_path, e))
}

struct Prepared {
    teacher: Vec<Option<SerializedExample>>,
    student: Vec<Option<SerializedExample>>,
    lengths: Vec<usize>,
}

fn prepare(cfg: &TrainConfig, instances: &[&TaskInstance]) -> Result<Prepared> {
    let ctx = cfg.model.context_length;
    let p = cfg.model.latent_steps;
    let w = cfg.effective_weights();
    let need_teacher = w.teacher_ce > 0.0 || w.distill > 0.0;
    let student_regime = match cfg.regime {
        TrainRegime::Codi => Some(Regime::Student),
        TrainRegime::NonCot => Some(Regime::NonCot),
        TrainRegime::FullCot => None,
    };
    let mut out = Prepared {
        teacher: Vec::with_capacity(instances.len()),
        student: Vec::with_capacity(instances.len()),
        lengths: Vec::with_capacity(instances.len()),
    };
    for inst in instances {
        out.teacher.push(if need_teacher {
            Some(serialize(inst, Regime::Teacher, p, ctx)?)
        } else {
            None
        });
        out.student.push(match student_regime {
            Some(r) => Some(serialize(inst, r, p, ctx)?),
            None => None,
        });
        out.lengths.push(inst.len());
    }
    Ok(out)
}

/// Splits a mixed-length batch into per-length groups.
fn group_batch(prep: &Prepared, indices: &[usize]) -> Result<Vec<PairedBatch>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_len.entry(prep.lengths[i]).or_default().push(i);
    }
    by_len
        .values()
        .map(|idx| {
            let side = |v: &Vec<Option<SerializedExample>>| -> Result<Option<SeqBatch>> {
                let ex: Option<Vec<&SerializedExample>> = idx.iter().map(|&i| v[i].as_ref()).collect();
                ex.map(|ex| SeqBatch::from_examples(&ex)).transpose()
            };
            Ok(PairedBatch {
                teacher: side(&prep.teacher)?,
                student: side(&prep.student)?,
            })
        })
        .collect()
}

/// Trains a model from scratch. When `run_dir` is given, writes
/// `config.json`, `metrics.jsonl` and checkpoints there. `on_epoch` sees
/// every epoch's metrics as they are produced.
pub fn train(
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let dir = match run_dir {
        Some(p) => {
            fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
            let dir = RunDir { root: p.to_path_buf() };
            fs::write(dir.config(), serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(dir.config(), e))?;
            Some(dir)
        }
        None => None,
    };
    let mut metrics_out = match &dir {
        Some(d) => Some(BufWriter::new(File::create(d.metrics()).map_err(|e| Error::io(d.metrics(), e))?)),
        None => None,
    };

    let curriculum = cfg.curriculum()?;
    let train_set: Vec<&TaskInstance> = curriculum.train.values().flatten().collect();
    let prep = prepare(cfg, &train_set)?;
    let mut model = Model::<f32>::init(&cfg.model, &mut stream(cfg.seed, 1))?;
    let mut shuffle_rng = stream(cfg.seed, 2);

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;
    let schedule = LrSchedule::new(cfg.optim.lr, cfg.optim.warmup_ratio, total_steps);
    let mut opt = AdamW::new(cfg.optim.adamw, model.layout.decay_mask());
    let loss_cfg = LossConfig {
        weights: cfg.effective_weights(),
        depths: cfg.distill_depths,
    };
    let mut normalizer = DistillNormalizer::default();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total_steps as usize);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut last_eval = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        let mut norm_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let groups = group_batch(&prep, chunk)?;
            let (loss, mut grads) = match loss_and_grads(&model, &groups, &loss_cfg, &mut normalizer) {
                Ok(x) => x,
                Err(e) => {
                    if let Some(d) = &dir {
                        save_checkpoint(d, "last_good", &model, cfg, epoch, opt.step, &normalizer, None)?;
                    }
                    return Err(e);
                }
            };
            norm_sum += clip_global_norm(&mut grads, cfg.optim.clip_norm);
            lr = schedule.at(opt.step);
            let before = dir.as_ref().map(|_| model.params.clone());
            opt.update(&mut model.params, &grads, lr);
            if !model.all_finite() {
                if let (Some(d), Some(p)) = (&dir, before) {
                    let good = Model::from_params(&cfg.model, p)?;
                    save_checkpoint(d, "last_good", &good, cfg, epoch, opt.step - 1, &normalizer, None)?;
                }
                return Err(Error::Numerical(format!("non-finite parameters after step {}", opt.step)));
            }
            sum.teacher_ce += loss.teacher_ce;
            sum.student_ce += loss.student_ce;
            sum.distill += loss.distill;
            sum.total += loss.total;
            step_losses.push(loss);
        }
        let k = steps_per_epoch as f64;
        let mean = LossBreakdown {
            teacher_ce: sum.teacher_ce / k,
            student_ce: sum.student_ce / k,
            distill: sum.distill / k,
            total: sum.total / k,
        };
        let eval = if epoch % cfg.eval_every.max(1) == 0 || epoch == cfg.epochs {
            Some(evaluate(&model, cfg.regime, &curriculum.test)?)
        } else {
            None
        };
        if eval.is_some() {
            last_eval = eval.clone();
        }
        let m = EpochMetrics {
            epoch,
            step: opt.step,
            lr,
            loss: mean,
            grad_norm: norm_sum / k,
            eval,
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = metrics_out.as_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            w.write_all(b"\n").map_err(|e| Error::io("metrics.jsonl", e))?;
            w.flush().map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        if let Some(d) = &dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(d, &format!("{epoch:05}"), &model, cfg, epoch, opt.step, &normalizer, m.eval.as_ref())?;
            }
        }
        on_epoch(&m);
        metrics.push(m);
    }
    let final_eval = last_eval.expect("final epoch is always evaluated");
    if let Some(d) = &dir {
        save_checkpoint(d, "final", &model, cfg, cfg.epochs, opt.step, &normalizer, Some(&final_eval))?;
    }
    Ok(TrainOutcome {
        model,
        normalizer,
        metrics,
        step_losses,
        final_eval,
    })
}

/// Loads `config.json` and the final checkpoint of a run directory.
pub fn load_run(root: &Path) -> Result<(TrainConfig, Model<f32>)> {
    let dir = RunDir { root: root.to_path_buf() };
    let text = fs::read_to_string(dir.config()).map_err(|e| Error::io(dir.config(), e))?;
    let cfg: TrainConfig = serde_json::from_str(&text)?;
    let (model, _) = checkpoint::load(&dir.final_checkpoint())?;
    if model.config != cfg.model {
        return Err(Error::Checkpoint("checkpoint model config differs from config.json".into()));
    }
    Ok((cfg, model))
}

const EVAL_BATCH: usize = 512;

/// Greedy answers for instances of one length.
fn predict_same_length(model: &Model<f32>, regime: TrainRegime, insts: &[&TaskInstance]) -> Result<Vec<u32>> {
    let ctx = model.config.context_length;
    let p = model.config.latent_steps;
    match regime {
        TrainRegime::Codi | TrainRegime::NonCot => {
            let r = if regime == TrainRegime::Codi { Regime::Student } else { Regime::NonCot };
            let ex: Vec<_> = insts.iter().map(|i| serialize(i, r, p, ctx)).collect::<Result<_>>()?;
            let seq = SeqBatch::from_examples(&ex.iter().collect::<Vec<_>>())?;
            predict_answers(model, &seq, &[])
        }
        TrainRegime::FullCot => {
            let full = serialized_len(insts[0].len(), Regime::Teacher, p);
            if full > ctx {
                return Err(Error::ContextOverflow { len: full, context: ctx });
            }
            let mut rows: Vec<Vec<u32>> = insts
                .iter()
                .map(|i| {
                    let mut r: Vec<u32> = i.inputs.iter().map(|&x| Vocabulary::value(x)).collect();
                    r.push(Vocabulary::EOI);
                    r
                })
                .collect();
            let next_tokens = |rows: &Vec<Vec<u32>>| -> Result<Vec<u32>> {
                let tokens = TokenBatch::new(rows)?;
                let out = model.forward(&tokens, ForwardOptions::plain())?;
                Ok((0..rows.len()).map(|b| argmax(out.logits_at(b, tokens.len - 1)) as u32).collect())
            };
            // Trace tokens s_1..s_{T-1} are generated, then ANS is forced.
            for _ in 1..insts[0].len() {
                let next = next_tokens(&rows)?;
                for (row, t) in rows.iter_mut().zip(next) {
                    row.push(t);
                }
            }
            for row in rows.iter_mut() {
                row.push(Vocabulary::ANS);
            }
            next_tokens(&rows)
        }
    }
}

/// Greedy answers for arbitrary instances, in input order.
pub fn predict(model: &Model<f32>, regime: TrainRegime, instances: &[TaskInstance]) -> Result<Vec<u32>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        by_len.entry(inst.len()).or_default().push(i);
    }
    let mut out = vec![0u32; instances.len()];
    for idx in by_len.values() {
        for chunk in idx.chunks(EVAL_BATCH) {
            let insts: Vec<&TaskInstance> = chunk.iter().map(|&i| &instances[i]).collect();
            for (&i, a) in chunk.iter().zip(predict_same_length(model, regime, &insts)?) {
                out[i] = a;
            }
        }
    }
    Ok(out)
}

/// Exact-match answer accuracy per length and aggregated.
pub fn evaluate(
    model: &Model<f32>,
    regime: TrainRegime,
    data: &BTreeMap<usize, Vec<TaskInstance>>,
) -> Result<EvalReport> {
    let mut per_length = Vec::new();
    let (mut correct, mut total) = (0, 0);
    for (&length, insts) in data {
        if insts.is_empty() {
            continue;
        }
        let answers = predict(model, regime, insts)?;
        let c = answers.iter().zip(insts).filter(|(a, i)| **a == i.answer()).count();
        correct += c;
        total += insts.len();
        per_length.push(LengthAccuracy {
            length,
            correct: c,
            total: insts.len(),
            accuracy: c as f64 / insts.len() as f64,
        });
    }
    let length_mean = per_length.iter().map(|l| l.accuracy).sum::<f64>() / per_length.len().max(1) as f64;
    Ok(EvalReport {
        per_length,
        aggregate: correct as f64 / total.max(1) as f64,
        length_mean,
    })
}
