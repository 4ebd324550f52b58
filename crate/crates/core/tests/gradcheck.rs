//! Finite-difference checks of the hand-written gradients in f64.

use latent_cot::nnkernel::{
    loss_and_grads, loss_value, DistillDepths, DistillNormalizer, ForwardOptions, LossConfig,
    LossWeights, Model, ModelConfig, PairedBatch, SeqBatch,
};
use latent_cot::taskgen::{serialize, Regime, TaskInstance, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Step of the five-point stencil; its O(h^4) truncation error is negligible
/// here and the larger step keeps roundoff well under the tolerance.
pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
/// The running scale never divides by less than this.
const SIGMA_FLOOR: f64 = 1.0;

pub fn config(layers: usize) -> ModelConfig {
    ModelConfig {
        layers,
        heads: 2,
        d_model: 8,
        context_length: 16,
        vocab_size: 55,
        latent_steps: 2,
    }
}

/// Init with a larger scale so every path carries signal.
pub fn model(cfg: &ModelConfig, seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::<f64>::init(cfg, &mut rng).unwrap();
    let n = Normal::new(0.0, 0.4).unwrap();
    for p in &mut m.params {
        *p += n.sample(&mut rng);
    }
    m
}

pub fn instances(len: usize, count: usize, seed: u64) -> Vec<TaskInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let xs = (0..len).map(|_| rng.random_range(1..50)).collect();
            TaskInstance::from_inputs(TaskSpec::default(), xs).unwrap()
        })
        .collect()
}

pub fn group(insts: &[TaskInstance], cfg: &ModelConfig, teacher: bool, student: Option<Regime>) -> PairedBatch {
    let make = |regime| {
        let ex: Vec<_> = insts
            .iter()
            .map(|i| serialize(i, regime, cfg.latent_steps, cfg.context_length).unwrap())
            .collect();
        SeqBatch::from_examples(&ex.iter().collect::<Vec<_>>()).unwrap()
    };
    PairedBatch {
        teacher: teacher.then(|| make(Regime::Teacher)),
        student: student.map(make),
    }
}

/// Independent L1 distillation term: student residuals at `ANS` against a
/// frozen teacher cache, each depth divided by a frozen scale.
struct FrozenDistill {
    depths: Vec<usize>,
    sigma: Vec<f64>,
    /// Per group: teacher residuals `[depth][b][d]` at the teacher `ANS`.
    targets: Vec<Vec<Vec<Vec<f64>>>>,
    examples: usize,
}

impl FrozenDistill {
    fn new(m: &Model<f64>, batches: &[PairedBatch], depths: Vec<usize>) -> Self {
        let d = m.config.d_model;
        let mut targets = Vec::new();
        let mut all: Vec<Vec<f64>> = vec![Vec::new(); depths.len()];
        let mut examples = 0;
        for pb in batches {
            let t = pb.teacher.as_ref().unwrap();
            let out = m.forward(&t.tokens, ForwardOptions::plain().with_capture()).unwrap();
            let cache = out.cache.unwrap();
            let per: Vec<Vec<Vec<f64>>> = depths
                .iter()
                .enumerate()
                .map(|(k, &l)| {
                    (0..t.batch())
                        .map(|b| {
                            let r = cache.residual(l, t.ans_position, b).to_vec();
                            all[k].extend_from_slice(&r);
                            r
                        })
                        .collect()
                })
                .collect();
            assert_eq!(per[0][0].len(), d);
            examples += t.batch();
            targets.push(per);
        }
        let sigma = all
            .iter()
            .map(|xs| {
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
            })
            .collect();
        FrozenDistill {
            depths,
            sigma,
            targets,
            examples,
        }
    }

    fn value(&self, m: &Model<f64>, batches: &[PairedBatch]) -> f64 {
        let d = m.config.d_model as f64;
        let mut total = 0.0;
        for (g, pb) in batches.iter().enumerate() {
            let s = pb.student.as_ref().unwrap();
            let opts = ForwardOptions { mode: s.mode, capture: true, patches: &[] };
            let cache = m.forward(&s.tokens, opts).unwrap().cache.unwrap();
            for (k, &l) in self.depths.iter().enumerate() {
                for b in 0..s.batch() {
                    let r = cache.residual(l, s.ans_position, b);
                    let l1: f64 = r.iter().zip(&self.targets[g][k][b]).map(|(x, y)| (x - y).abs()).sum();
                    total += l1 / (d * self.sigma[k].max(SIGMA_FLOOR));
                }
            }
        }
        total / self.examples as f64
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst relative error between analytic and central-difference gradients,
/// with the offending parameter.
pub fn max_rel_error(cfg: &ModelConfig, batches: &[PairedBatch], loss_cfg: LossConfig, seed: u64) -> (f64, String) {
    let mut m = model(cfg, seed);
    let mut norm = DistillNormalizer::default();
    let (_, grads) = loss_and_grads(&m, batches, &loss_cfg, &mut norm).unwrap();

    let depths = match loss_cfg.depths {
        DistillDepths::All => (1..=cfg.layers).collect(),
        DistillDepths::Last => vec![cfg.layers],
    };
    let distill_on = loss_cfg.weights.distill > 0.0;
    let frozen = distill_on.then(|| FrozenDistill::new(&m, batches, depths));
    if let Some(f) = &frozen {
        for (a, b) in f.sigma.iter().zip(&norm.sigma) {
            assert!((a - b).abs() < 1e-9 * a.max(1.0), "normalizer {b} vs oracle {a}");
        }
    }
    let mut ce_only = loss_cfg;
    ce_only.weights.distill = 0.0;
    let objective = |m: &Model<f64>| {
        let base = loss_value(m, batches, &ce_only, &DistillNormalizer::default()).unwrap().total;
        base + frozen.as_ref().map_or(0.0, |f| loss_cfg.weights.distill * f.value(m, batches))
    };

    let mut worst = (0.0, String::new());
    for i in 0..m.params.len() {
        let orig = m.params[i];
        let mut at = |k: f64| {
            m.params[i] = orig + k * H;
            objective(&m)
        };
        let num = (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * H);
        m.params[i] = orig;
        let e = rel_err(grads[i], num);
        if e > worst.0 {
            let name = m.layout.entries.iter().find(|e| e.range().contains(&i)).unwrap().name.clone();
            worst = (e, format!("{name}[{}]: analytic {} numeric {num}", i, grads[i]));
        }
    }
    worst
}

fn check(cfg: &ModelConfig, batches: &[PairedBatch], loss_cfg: LossConfig, seed: u64) {
    let (err, at) = max_rel_error(cfg, batches, loss_cfg, seed);
    assert!(err <= TOL, "max relative error {err} at {at}");
}

#[test]
fn teacher_cross_entropy() {
    let cfg = config(2);
    let w = LossWeights { teacher_ce: 1.0, student_ce: 0.0, distill: 0.0 };
    let batches = vec![
        group(&instances(2, 2, 1), &cfg, true, None),
        group(&instances(3, 3, 2), &cfg, true, None),
    ];
    check(&cfg, &batches, LossConfig { weights: w, depths: DistillDepths::All }, 11);
}

#[test]
fn student_latent_cross_entropy() {
    let cfg = config(2);
    let w = LossWeights { teacher_ce: 0.0, student_ce: 1.0, distill: 0.0 };
    let batches = vec![
        group(&instances(2, 2, 3), &cfg, false, Some(Regime::Student)),
        group(&instances(3, 2, 4), &cfg, false, Some(Regime::Student)),
    ];
    check(&cfg, &batches, LossConfig { weights: w, depths: DistillDepths::All }, 12);
}

#[test]
fn non_cot_cross_entropy() {
    let cfg = config(1);
    let w = LossWeights { teacher_ce: 0.0, student_ce: 1.0, distill: 0.0 };
    let batches = vec![group(&instances(3, 3, 5), &cfg, false, Some(Regime::NonCot))];
    check(&cfg, &batches, LossConfig { weights: w, depths: DistillDepths::All }, 13);
}

#[test]
fn full_codi_objective() {
    let cfg = config(2);
    let w = LossWeights { teacher_ce: 1.0, student_ce: 1.0, distill: 0.7 };
    let batches = vec![
        group(&instances(2, 2, 6), &cfg, true, Some(Regime::Student)),
        group(&instances(3, 2, 7), &cfg, true, Some(Regime::Student)),
    ];
    check(&cfg, &batches, LossConfig { weights: w, depths: DistillDepths::All }, 14);
}

#[test]
fn distillation_only_last_depth() {
    let cfg = config(2);
    let w = LossWeights { teacher_ce: 0.0, student_ce: 0.0, distill: 1.0 };
    let batches = vec![group(&instances(3, 3, 8), &cfg, true, Some(Regime::Student))];
    check(&cfg, &batches, LossConfig { weights: w, depths: DistillDepths::Last }, 15);
}

#[test]
fn distillation_does_not_reach_teacher_only_tokens() {
    // EOI only ever appears in teacher sequences, so under a pure distillation
    // objective its embedding row must receive exactly zero gradient.
    let cfg = config(2);
    let w = LossWeights { teacher_ce: 0.0, student_ce: 0.0, distill: 1.0 };
    let batches = vec![group(&instances(3, 3, 9), &cfg, true, Some(Regime::Student))];
    let m = model(&cfg, 16);
    let (loss, grads) = loss_and_grads(
        &m,
        &batches,
        &LossConfig { weights: w, depths: DistillDepths::All },
        &mut DistillNormalizer::default(),
    )
    .unwrap();
    assert!(loss.distill > 0.0);
    let d = cfg.d_model;
    let eoi = latent_cot::taskgen::Vocabulary::EOI as usize;
    let row = &grads[m.layout.tok_emb.start + eoi * d..m.layout.tok_emb.start + (eoi + 1) * d];
    assert!(row.iter().all(|&g| g == 0.0));
    assert!(grads.iter().any(|&g| g != 0.0));
}
