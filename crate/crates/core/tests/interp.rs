use latent_cot::interp::export::{attention_grid, lens_grid, ColorScale};
use latent_cot::interp::{
    build_activation_store, build_probe_dataset, collect_attention, logit_lens, patch_sites,
    run_patching, shuffle_labels, train_probe, ActivationStore, ProbeConfig, ProbeDataset, Symbol,
};
use latent_cot::nnkernel::{Model, ModelConfig};
use latent_cot::taskgen::{serialize, Regime, Role, TaskInstance, TaskSpec, Vocabulary};
use latent_cot::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> Model<f32> {
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 16,
        context_length: 24,
        vocab_size: Vocabulary::SIZE,
        latent_steps: 3,
    };
    Model::init(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
}

fn instances(n: usize, len: usize) -> Vec<TaskInstance> {
    let spec = TaskSpec::new(50, 1, len - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    (0..n)
        .map(|_| TaskInstance::from_inputs(spec, (0..len).map(|_| rng.random_range(1..50)).collect()).unwrap())
        .collect()
}

/// Marks every example as correctly answered so analyses keep them all.
fn all_correct(mut store: ActivationStore) -> ActivationStore {
    store.predictions = store.instances.iter().map(|i| i.answer()).collect();
    store
}

#[test]
fn store_shapes_and_round_trip() {
    let m = model();
    let store = build_activation_store(&m, &instances(20, 3), Regime::Student).unwrap();
    assert_eq!(store.len(), 20);
    assert_eq!(store.depths, 3);
    assert_eq!(store.positions(), 3 + 3 + 3);
    assert_eq!(store.residuals.len(), 20 * 3 * 9 * 16);
    assert_eq!(store.position_of(Role::Ans), Some(8));

    let dir = tempfile::tempdir().unwrap();
    store.save(dir.path()).unwrap();
    assert_eq!(ActivationStore::load(dir.path()).unwrap(), store);
}

#[test]
fn corrupt_store_files_are_rejected() {
    let m = model();
    let store = build_activation_store(&m, &instances(4, 2), Regime::NonCot).unwrap();
    let dir = tempfile::tempdir().unwrap();
    store.save(dir.path()).unwrap();
    let bin = dir.path().join("activations.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&bin, bytes).unwrap();
    assert!(ActivationStore::load(dir.path()).is_err());
}

#[test]
fn store_matches_a_fresh_forward_pass() {
    let m = model();
    let insts = instances(6, 2);
    let store = build_activation_store(&m, &insts, Regime::Teacher).unwrap();
    let ex = serialize(&insts[3], Regime::Teacher, 3, 24).unwrap();
    let seq = latent_cot::nnkernel::SeqBatch::from_examples(&[&ex]).unwrap();
    let out = m
        .forward(&seq.tokens, latent_cot::nnkernel::ForwardOptions { mode: seq.mode, ..latent_cot::nnkernel::ForwardOptions::plain() }.with_capture())
        .unwrap();
    let cache = out.cache.unwrap();
    for depth in 0..store.depths {
        for pos in 0..store.positions() {
            assert_eq!(store.residual(3, depth, pos), cache.residual(depth, pos, 0));
        }
    }
}

#[test]
fn lens_needs_correct_examples() {
    let m = model();
    let mut store = build_activation_store(&m, &instances(10, 2), Regime::Student).unwrap();
    store.predictions = store.instances.iter().map(|i| (i.answer() + 1) % 50).collect();
    assert!(matches!(
        logit_lens(&m, &store, &[Symbol::State(2)], false),
        Err(Error::NoCorrectRuns(_))
    ));
}

#[test]
fn lens_grids_are_probabilities() {
    let m = model();
    let store = all_correct(build_activation_store(&m, &instances(12, 3), Regime::Student).unwrap());
    let targets = Symbol::all(3);
    let with_pre = logit_lens(&m, &store, &targets, true).unwrap();
    let post = logit_lens(&m, &store, &targets, false).unwrap();
    assert_eq!(with_pre.len(), targets.len());
    assert_eq!(with_pre[0].depths.len(), 3);
    // The pre-layer row stays in the grid; only the per-position summary drops it.
    assert_eq!(post[0].mean, with_pre[0].mean);
    assert_ne!(post[0].per_position, with_pre[0].per_position);
    for g in &with_pre {
        assert_eq!(g.samples, 12);
        for row in &g.mean {
            assert_eq!(row.len(), store.positions());
            assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
    let grid = lens_grid(&with_pre[0]);
    let csv = grid.to_csv();
    // Header, one row per depth, then the per-position mean.
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
    assert!(grid.to_svg(ColorScale::UNIT).starts_with("<svg"));
}

#[test]
fn attention_rows_sum_to_one() {
    let m = model();
    let ex: Vec<_> = instances(8, 3)
        .iter()
        .map(|i| serialize(i, Regime::Student, 3, 24).unwrap())
        .collect();
    let a = collect_attention(&m, &ex).unwrap();
    assert_eq!((a.layers, a.heads, a.samples), (2, 2, 8));
    assert!(a.row_sum_error() < 1e-5);
    for q in 0..a.len() {
        for k in q + 1..a.len() {
            assert_eq!(a.weight(1, 1, q, k), 0.0);
        }
    }
    let csv = attention_grid(&a, 0, 1).to_csv();
    assert_eq!(csv.lines().count(), 1 + a.len());
}

fn synthetic(n: usize, d: usize, classes: u32, seed: u64) -> ProbeDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..classes);
        for j in 0..d {
            let signal = if j as u32 == y { 3.0 } else { 0.0 };
            features.push(signal + rng.random_range(-0.5f32..0.5));
        }
        labels.push(y);
    }
    let idx: Vec<usize> = (0..n).collect();
    let (a, b, _) = latent_cot::interp::split_sizes(n);
    ProbeDataset {
        target: Symbol::State(1),
        role: Role::Ans,
        position: 0,
        depth: 0,
        d,
        features,
        labels,
        train: idx[..a].to_vec(),
        val: idx[a..a + b].to_vec(),
        test: idx[a + b..].to_vec(),
        warning: None,
    }
}

#[test]
fn probes_separate_signal_from_shuffled_labels() {
    let ds = synthetic(600, 10, 10, 1);
    let cfg = ProbeConfig { epochs: 40, lr: 1e-2, batch_size: 32, classes: 10, seed: 0 };
    let real = train_probe(&ds, &cfg).unwrap();
    let shuffled = train_probe(&shuffle_labels(&ds, 2), &cfg).unwrap();
    assert!(real.accuracy > 0.95, "{}", real.accuracy);
    assert!(shuffled.accuracy < 0.3, "{}", shuffled.accuracy);
    assert_eq!(real.train_size + real.val_size + real.test_size, 600);
}

#[test]
fn probe_training_is_seeded() {
    let ds = synthetic(200, 6, 6, 3);
    let cfg = ProbeConfig { epochs: 5, lr: 1e-2, batch_size: 16, classes: 6, seed: 9 };
    assert_eq!(train_probe(&ds, &cfg).unwrap(), train_probe(&ds, &cfg).unwrap());
}

#[test]
fn probe_datasets_follow_the_store() {
    let m = model();
    let store = all_correct(build_activation_store(&m, &instances(50, 2), Regime::Student).unwrap());
    let ds = build_probe_dataset(&store, 1, 2, Symbol::Input(2), 0).unwrap();
    assert_eq!(ds.len(), 50);
    assert_eq!(ds.train.len() + ds.val.len() + ds.test.len(), 50);
    for (i, inst) in store.instances.iter().enumerate() {
        assert_eq!(ds.labels[i], inst.input(2));
        assert_eq!(&ds.features[i * 16..(i + 1) * 16], store.residual(i, 2, 1));
    }
    assert!(build_probe_dataset(&store, 99, 0, Symbol::Input(1), 0).is_err());
    let bad = ProbeConfig { classes: 3, ..ProbeConfig::default() };
    assert!(train_probe(&ds, &bad).is_err());
}

#[test]
fn patching_covers_every_site() {
    let m = model();
    let insts = instances(16, 3);
    let sites = patch_sites(m.config.depths(), 9);
    assert_eq!(sites.len(), 3 * 9);
    // An untrained model may answer nothing correctly; both outcomes are valid.
    match run_patching(&m, &insts, Regime::Student, 1, &sites) {
        Ok(results) => {
            assert_eq!(results.len(), sites.len());
            for r in &results {
                assert!((0.0..=1.0).contains(&r.patched) && (0.0..=1.0).contains(&r.baseline));
            }
        }
        Err(e) => assert!(matches!(e, Error::NoCorrectRuns(_)), "{e}"),
    }
    assert!(run_patching(&m, &insts, Regime::Student, 1, &[latent_cot::interp::PatchSite { depth: 9, position: 0 }]).is_err());
}
