use latent_cot::taskgen::{
    closed_form_answer, corrupt_input, is_test_tuple, make_curriculum, read_jsonl, sample_split,
    serialize, serialized_len, write_jsonl, Regime, Role, TaskInstance, TaskSpec, Vocabulary,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec_and_inputs() -> impl Strategy<Value = (TaskSpec, Vec<u32>)> {
    (2u32..=50, 0u32..50, 1usize..12).prop_flat_map(|(m, b, len)| {
        let spec = TaskSpec::new(m, b % m, 1);
        (Just(spec), proptest::collection::vec(0..m, len))
    })
}

/// Straight iteration, written independently of the library.
fn iterate(m: u32, b: u32, xs: &[u32]) -> Vec<u32> {
    let mut s = xs[0] % m;
    let mut out = vec![s];
    for &x in &xs[1..] {
        s = ((s as u64 * x as u64 + b as u64) % m as u64) as u32;
        out.push(s);
    }
    out
}

proptest! {
    #[test]
    fn states_follow_the_recurrence((spec, xs) in spec_and_inputs()) {
        let inst = TaskInstance::from_inputs(spec, xs.clone()).unwrap();
        let expect = iterate(spec.modulus, spec.bias, &xs);
        prop_assert_eq!(&inst.states, &expect);
        prop_assert_eq!(inst.answer(), *expect.last().unwrap());
        prop_assert_eq!(closed_form_answer(&inst), inst.answer());
        prop_assert!(inst.states.iter().all(|&s| s < spec.modulus));
    }

    #[test]
    fn serialization_round_trips((spec, xs) in spec_and_inputs(), p in 1usize..8) {
        let inst = TaskInstance::from_inputs(spec, xs.clone()).unwrap();
        let t = xs.len();
        for regime in [Regime::Teacher, Regime::Student, Regime::NonCot] {
            let ex = serialize(&inst, regime, p, 64).unwrap();
            prop_assert_eq!(ex.len(), serialized_len(t, regime, p));
            prop_assert_eq!(ex.roles.len(), ex.len());
            let (inputs, trace) = ex.decode();
            let values: Vec<u32> = xs.iter().map(|&x| Vocabulary::value(x)).collect();
            prop_assert_eq!(inputs, values);
            if regime == Regime::Teacher {
                let states: Vec<u32> = inst.states[..t - 1].iter().map(|&s| Vocabulary::value(s)).collect();
                prop_assert_eq!(trace, states);
            } else {
                prop_assert!(trace.is_empty());
            }
            // Inputs are never supervised and the ANS position always predicts the answer.
            let targets = ex.targets();
            for (i, role) in ex.roles.iter().enumerate() {
                if matches!(role, Role::Input(_)) {
                    prop_assert!(!ex.loss_mask[i]);
                }
            }
            prop_assert_eq!(targets[ex.ans_position()], Some(Vocabulary::value(inst.answer())));
            let supervised = ex.loss_mask.iter().filter(|&&m| m).count();
            match regime {
                Regime::Teacher => prop_assert_eq!(supervised, t + 1),
                _ => prop_assert_eq!(supervised, 1),
            }
            // The student never sees the trace or the answer as tokens.
            if regime != Regime::Teacher {
                prop_assert!(ex.roles.iter().all(|r| !matches!(r, Role::Trace(_) | Role::AnswerTarget)));
            }
        }
    }

    #[test]
    fn jsonl_round_trips((spec, xs) in spec_and_inputs(), p in 1usize..4) {
        let inst = TaskInstance::from_inputs(spec, xs).unwrap();
        let exs: Vec<_> = [Regime::Teacher, Regime::Student, Regime::NonCot]
            .iter()
            .map(|&r| serialize(&inst, r, p, 64).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &exs).unwrap();
        prop_assert_eq!(read_jsonl(&buf[..]).unwrap(), exs);
    }

    #[test]
    fn corruption_changes_only_one_input((spec, xs) in spec_and_inputs(), pick in 0usize..100) {
        let inst = TaskInstance::from_inputs(spec, xs.clone()).unwrap();
        let pos = 1 + pick % xs.len();
        let c = corrupt_input(&inst, pos).unwrap();
        for i in 1..=xs.len() {
            if i == pos {
                prop_assert_eq!(c.input(i), (2 * inst.input(i)) % spec.modulus);
            } else {
                prop_assert_eq!(c.input(i), inst.input(i));
            }
        }
        prop_assert_eq!(&c.states, &iterate(spec.modulus, spec.bias, &c.inputs));
    }

    #[test]
    fn splits_are_disjoint(m in 5u32..=50, len in 1usize..5, seed in any::<u64>()) {
        let spec = TaskSpec::new(m, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let split = sample_split(&spec, len, 40, 10, &mut rng);
        // Tiny input spaces may have an empty held-out side.
        prop_assume!(split.is_ok());
        let (train, test) = split.unwrap();
        for i in &train {
            prop_assert_eq!(i.len(), len);
            prop_assert!(!is_test_tuple(&spec, &i.inputs));
        }
        for i in &test {
            prop_assert!(is_test_tuple(&spec, &i.inputs));
        }
        prop_assert!(train.iter().chain(&test).flat_map(|i| &i.inputs).all(|&x| (1..m).contains(&x)));
    }
}

#[test]
fn curriculum_is_seed_deterministic() {
    let spec = TaskSpec::new(50, 1, 3);
    let a = make_curriculum(&spec, 30, 10, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let b = make_curriculum(&spec, 30, 10, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let c = make_curriculum(&spec, 30, 10, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lengths().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(a.train.values().all(|v| v.len() == 30));
}
