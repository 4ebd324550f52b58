//! Affine maps `s -> s*x + b` over Z_m: bijectivity, contraction, the
//! probability that a random multiplier is a unit, and the law of the
//! trailing all-unit suffix of a random input sequence.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::taskgen::{TaskInstance, TaskSpec};

pub fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub fn is_unit(x: u64, m: u64) -> bool {
    gcd(x, m) == 1
}

/// Euler's totient by trial-division factorization.
pub fn totient(m: u64) -> u64 {
    let (mut n, mut phi, mut p) = (m, m, 2);
    while p * p <= n {
        if n % p == 0 {
            while n % p == 0 {
                n /= p;
            }
            phi -= phi / p;
        }
        p += 1;
    }
    if n > 1 {
        phi -= phi / n;
    }
    phi
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractionProfile {
    pub d: u64,
    pub image_size: u64,
    pub fiber_size: u64,
}

/// Predicted shape of `s -> s*x + b`: image of size `m/d`, every fiber of
/// size `d = gcd(x, m)`.
pub fn contraction_profile(x: u64, m: u64) -> ContractionProfile {
    let d = gcd(x, m);
    ContractionProfile {
        d,
        image_size: m / d,
        fiber_size: d,
    }
}

/// Exhaustive enumeration of the fibers of `s -> s*x + b` on Z_m.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiberCensus {
    pub image_size: u64,
    /// Fiber size -> number of outputs with that many preimages.
    pub sizes: BTreeMap<u64, u64>,
}

impl FiberCensus {
    pub fn uniform_size(&self) -> Option<u64> {
        (self.sizes.len() == 1).then(|| *self.sizes.keys().next().unwrap())
    }
}

pub fn brute_force_fibers(x: u64, b: u64, m: u64) -> FiberCensus {
    let mut hits = vec![0u64; m as usize];
    for s in 0..m {
        hits[((s * x + b) % m) as usize] += 1;
    }
    let mut sizes = BTreeMap::new();
    for &h in hits.iter().filter(|&&h| h > 0) {
        *sizes.entry(h).or_insert(0) += 1;
    }
    FiberCensus {
        image_size: hits.iter().filter(|&&h| h > 0).count() as u64,
        sizes,
    }
}

/// Outcome of the exhaustive bijection/fiber checks.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub maps_checked: u64,
    pub violations: Vec<String>,
}

/// For every `m` in `moduli`, `x` in `[0, m)` and `b` in `biases` (reduced
/// mod m): the map is a bijection exactly when `x` is a unit, and every
/// nonempty fiber has `gcd(x, m)` elements.
pub fn verify_lemmas(moduli: impl IntoIterator<Item = u64>, biases: &[u64]) -> LemmaReport {
    let mut report = LemmaReport::default();
    for m in moduli {
        for x in 0..m {
            for &b in biases {
                let census = brute_force_fibers(x, b % m, m);
                let profile = contraction_profile(x, m);
                report.maps_checked += 1;
                let bijective = census.image_size == m;
                if bijective != is_unit(x, m) {
                    report
                        .violations
                        .push(format!("m={m} x={x} b={b}: bijective={bijective} but gcd={}", profile.d));
                }
                if census.uniform_size() != Some(profile.fiber_size) || census.image_size != profile.image_size {
                    report
                        .violations
                        .push(format!("m={m} x={x} b={b}: fibers {:?}, expected size {}", census.sizes, profile.d));
                }
            }
        }
    }
    report
}

fn ratio(n: u64, d: u64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// `phi(m) / (m - 1)`: probability that a uniform multiplier in `[1, m-1]`
/// is a unit.
pub fn unit_probability(m: u64) -> BigRational {
    assert!(m >= 2, "modulus must be at least 2");
    ratio(totient(m), m - 1)
}

/// Exact law of the trailing all-unit suffix length `L` over `T` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct SuffixLaw {
    pub modulus: u64,
    pub horizon: usize,
    pub u: BigRational,
    /// `Pr(L >= k)` for `k = 0..=T`.
    pub tail: Vec<BigRational>,
    pub expected: BigRational,
}

impl SuffixLaw {
    pub fn u_f64(&self) -> f64 {
        self.u.to_f64().unwrap()
    }

    pub fn expected_f64(&self) -> f64 {
        self.expected.to_f64().unwrap()
    }

    pub fn tail_f64(&self) -> Vec<f64> {
        self.tail.iter().map(|t| t.to_f64().unwrap()).collect()
    }
}

pub fn suffix_law(m: u64, horizon: usize) -> SuffixLaw {
    let u = unit_probability(m);
    let mut tail = Vec::with_capacity(horizon + 1);
    let mut pow = BigRational::one();
    for _ in 0..=horizon {
        tail.push(pow.clone());
        pow *= &u;
    }
    let expected = if u.is_one() {
        BigRational::from_integer(BigInt::from(horizon))
    } else {
        // u (1 - u^T) / (1 - u), with pow = u^(T+1) here
        let u_t = &tail[horizon];
        &u * (BigRational::one() - u_t) / (BigRational::one() - &u)
    };
    SuffixLaw {
        modulus: m,
        horizon,
        u,
        tail,
        expected,
    }
}

/// `L` for one multiplier sequence: steps after the last non-unit.
pub fn suffix_length(xs: &[u64], m: u64) -> usize {
    xs.iter().rev().take_while(|&&x| is_unit(x, m)).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuffixSample {
    pub trials: u64,
    /// Empirical `Pr(L >= k)` for `k = 0..=T`.
    pub tail: Vec<f64>,
    pub mean: f64,
}

/// Monte Carlo estimate of the suffix law with `x_t` uniform on `[1, m-1]`.
pub fn simulate_suffix<R: Rng + ?Sized>(m: u64, horizon: usize, trials: u64, rng: &mut R) -> SuffixSample {
    assert!(trials >= 1 && m >= 2);
    let mut counts = vec![0u64; horizon + 1];
    let mut xs = vec![0u64; horizon];
    let mut total = 0u64;
    for _ in 0..trials {
        for x in xs.iter_mut() {
            *x = rng.random_range(1..m);
        }
        let l = suffix_length(&xs, m);
        counts[l] += 1;
        total += l as u64;
    }
    let mut tail = vec![0.0; horizon + 1];
    let mut at_least = 0u64;
    for k in (0..=horizon).rev() {
        at_least += counts[k];
        tail[k] = at_least as f64 / trials as f64;
    }
    SuffixSample {
        trials,
        tail,
        mean: total as f64 / trials as f64,
    }
}

/// Fraction of random instances whose answer changes when the input at
/// `position` (1-indexed) is redrawn to a different value. A diagnostic of
/// how much the label depends on early history.
pub fn answer_sensitivity<R: Rng + ?Sized>(
    spec: &TaskSpec,
    position: usize,
    trials: u64,
    rng: &mut R,
) -> crate::Result<f64> {
    spec.validate()?;
    let len = spec.num_inputs();
    if position == 0 || position > len {
        return Err(crate::Error::Index {
            what: "position",
            index: position,
            range: format!("1..={len}"),
        });
    }
    if spec.input_high == spec.input_low {
        return Ok(0.0);
    }
    let mut changed = 0u64;
    for _ in 0..trials {
        let inst = crate::taskgen::generate_instance(spec, rng)?;
        let mut xs = inst.inputs.clone();
        let old = xs[position - 1];
        while xs[position - 1] == old {
            xs[position - 1] = rng.random_range(spec.input_low..=spec.input_high);
        }
        let other = TaskInstance::from_inputs(*spec, xs)?;
        changed += (other.answer() != inst.answer()) as u64;
    }
    Ok(changed as f64 / trials as f64)
}

/// One row of the per-modulus compressibility table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub modulus: u64,
    pub totient: u64,
    pub u: f64,
    pub q: f64,
    /// `(T, E[L])` pairs.
    pub expected_suffix: Vec<(usize, f64)>,
}

pub fn theory_table(moduli: &[u64], horizons: &[usize]) -> Vec<TheoryRow> {
    moduli
        .iter()
        .map(|&m| {
            let u = unit_probability(m);
            TheoryRow {
                modulus: m,
                totient: totient(m),
                u: u.to_f64().unwrap(),
                q: (BigRational::one() - &u).to_f64().unwrap(),
                expected_suffix: horizons.iter().map(|&t| (t, suffix_law(m, t).expected_f64())).collect(),
            }
        })
        .collect()
}

/// Checks `E[L] = sum_{k>=1} Pr(L >= k)` exactly.
pub fn expectation_identity_holds(law: &SuffixLaw) -> bool {
    let sum = law.tail[1..].iter().fold(BigRational::zero(), |acc, t| acc + t);
    sum == law.expected
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn profiles() {
        assert_eq!(
            contraction_profile(10, 50),
            ContractionProfile { d: 10, image_size: 5, fiber_size: 10 }
        );
        assert_eq!(contraction_profile(1, 37).d, 1);
        assert!((1..47).all(|x| is_unit(x, 47)));
    }

    #[test]
    fn fibers_by_enumeration() {
        let c = brute_force_fibers(10, 1, 50);
        assert_eq!(c.image_size, 5);
        assert_eq!(c.sizes, BTreeMap::from([(10, 5)]));
        let c = brute_force_fibers(3, 7, 50);
        assert_eq!(c.sizes, BTreeMap::from([(1, 50)]));
        for b in 0..12 {
            assert_eq!(brute_force_fibers(8, b, 12).sizes, brute_force_fibers(8, 0, 12).sizes);
        }
    }

    #[test]
    fn totients() {
        // counted directly
        for m in 2..200u64 {
            let direct = (1..=m).filter(|&x| gcd(x, m) == 1).count() as u64;
            assert_eq!(totient(m), direct, "m={m}");
        }
        assert_eq!(totient(50), 20);
        assert_eq!(totient(48), 16);
    }

    #[test]
    fn unit_probabilities() {
        assert_eq!(unit_probability(50), ratio(20, 49));
        assert_eq!(unit_probability(48), ratio(16, 47));
        assert!(unit_probability(41).is_one());
        let law = suffix_law(41, 7);
        assert_eq!(law.expected, BigRational::from_integer(7.into()));
        assert!(law.tail.iter().all(|t| t.is_one()));
    }

    #[test]
    fn expectation_matches_tail_sum() {
        for m in 2..=60 {
            for t in [1, 5, 31] {
                assert!(expectation_identity_holds(&suffix_law(m, t)), "m={m} T={t}");
            }
        }
        assert!((suffix_law(50, 31).expected_f64() - 0.6897).abs() < 1e-3);
    }

    #[test]
    fn suffix_length_counts_trailing_units() {
        assert_eq!(suffix_length(&[3, 10, 3, 7], 50), 2);
        assert_eq!(suffix_length(&[3, 7], 50), 2);
        assert_eq!(suffix_length(&[3, 10], 50), 0);
    }

    #[test]
    fn prime_suffix_is_full_length() {
        let s = simulate_suffix(47, 9, 2000, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(s.mean, 9.0);
        assert!(s.tail.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn short_horizon_tail() {
        let s = simulate_suffix(50, 5, 100_000, &mut ChaCha8Rng::seed_from_u64(2));
        assert!((s.tail[2] - (20.0f64 / 49.0).powi(2)).abs() < 0.01);
    }

    #[test]
    fn lemma_sweep_small() {
        let r = verify_lemmas(2..=20, &[0, 1, 3, 4]);
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        assert_eq!(r.maps_checked, (2..=20u64).sum::<u64>() * 4);
    }

    #[test]
    fn sensitivity_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prime = answer_sensitivity(&TaskSpec::new(47, 1, 5), 1, 2000, &mut rng).unwrap();
        let comp = answer_sensitivity(&TaskSpec::new(48, 1, 5), 1, 2000, &mut rng).unwrap();
        assert!(prime > 0.9);
        assert!(comp < prime);
        assert!(answer_sensitivity(&TaskSpec::new(47, 1, 5), 9, 10, &mut rng).is_err());
    }
}
