use latent_cot::training::{evaluate, load_run, train, Preset, TrainConfig, TrainRegime};
use latent_cot::nnkernel::Model;
use latent_cot::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(regime: TrainRegime) -> TrainConfig {
    let mut cfg = TrainConfig::preset(Preset::Desk, regime, 7, 1);
    cfg.model.layers = 2;
    cfg.model.heads = 2;
    cfg.model.d_model = 16;
    cfg.model.latent_steps = 2;
    cfg.epochs = 4;
    cfg.batch_size = 16;
    cfg.per_length = 24;
    cfg.test_per_length = 8;
    cfg.eval_every = 2;
    cfg
}

fn run(cfg: &TrainConfig) -> latent_cot::training::TrainOutcome {
    train(cfg, None, &mut |_| {}).unwrap()
}

#[test]
fn loss_goes_down_on_every_regime() {
    for regime in TrainRegime::ALL {
        let mut cfg = tiny(regime);
        cfg.epochs = 12;
        let out = run(&cfg);
        let first = out.metrics.first().unwrap().loss.total;
        let last = out.metrics.last().unwrap().loss.total;
        assert!(last < first, "{regime}: {first} -> {last}");
    }
}

#[test]
fn ablations_zero_their_terms() {
    let mut cfg = tiny(TrainRegime::Codi);
    cfg.ablation.no_distill = true;
    let out = run(&cfg);
    assert!(out.step_losses.iter().all(|l| l.distill == 0.0 && l.teacher_ce > 0.0));

    cfg.ablation.no_teacher = true;
    let out = run(&cfg);
    assert!(out.step_losses.iter().all(|l| l.distill == 0.0 && l.teacher_ce == 0.0 && l.student_ce > 0.0));

    let out = run(&tiny(TrainRegime::Codi));
    assert!(out.step_losses.iter().all(|l| l.distill > 0.0));
}

#[test]
fn regimes_train_only_their_terms() {
    let out = run(&tiny(TrainRegime::FullCot));
    assert!(out.step_losses.iter().all(|l| l.student_ce == 0.0 && l.distill == 0.0));
    let out = run(&tiny(TrainRegime::NonCot));
    assert!(out.step_losses.iter().all(|l| l.teacher_ce == 0.0 && l.distill == 0.0));
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny(TrainRegime::Codi);
    let a = run(&cfg);
    let b = run(&cfg);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.final_eval, b.final_eval);
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!((x.loss, x.grad_norm, &x.eval), (y.loss, y.grad_norm, &y.eval));
    }
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(run(&other).model.params, a.model.params);
}

#[test]
fn untrained_models_sit_near_chance() {
    let mut cfg = TrainConfig::preset(Preset::Desk, TrainRegime::Codi, 50, 2);
    cfg.model.d_model = 16;
    cfg.test_per_length = 300;
    let model = Model::<f32>::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let data = cfg.curriculum().unwrap();
    let report = evaluate(&model, TrainRegime::Codi, &data.test).unwrap();
    assert!(report.aggregate < 0.1, "{}", report.aggregate);
    assert_eq!(report.per_length.iter().map(|l| l.total).sum::<usize>(), 900);
}

#[test]
fn run_directories_reload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(TrainRegime::Codi);
    let out = train(&cfg, Some(dir.path()), &mut |_| {}).unwrap();
    let (loaded_cfg, model) = load_run(dir.path()).unwrap();
    assert_eq!(loaded_cfg, cfg);
    assert_eq!(model.params, out.model.params);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), cfg.epochs);
    let again = evaluate(&model, cfg.regime, &cfg.curriculum().unwrap().test).unwrap();
    assert_eq!(again, out.final_eval);
}

#[test]
fn missing_runs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_run(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = tiny(TrainRegime::Codi);
    cfg.ablation.no_teacher = true;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));

    let mut cfg = tiny(TrainRegime::Codi);
    cfg.model.latent_steps = 0;
    assert!(cfg.validate().is_err());

    let mut cfg = tiny(TrainRegime::FullCot);
    cfg.task.hops = 20;
    assert!(cfg.validate().is_err());

    let mut cfg = tiny(TrainRegime::Codi);
    cfg.weights.distill = -1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn config_hash_tracks_content() {
    let a = tiny(TrainRegime::Codi);
    let mut b = a.clone();
    assert_eq!(a.hash_hex(), b.hash_hex());
    b.seed = 9;
    assert_ne!(a.hash_hex(), b.hash_hex());
}
