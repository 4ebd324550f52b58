//! Polynomial-iteration task: instance generation, serialization for the three
//! training regimes, length curricula, and counterfactual corruption.
//!
//! An `n`-hop instance has inputs `x_1..x_{n+1}` and states
//! `s_1 = x_1`, `s_t = s_{t-1} * x_t + b (mod m)`; the answer is `s_{n+1}`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Number of value tokens. Fixed even for moduli below 50 so one embedding
/// table serves every modulus in the sweep.
pub const NUM_VALUES: u32 = 50;

/// Token vocabulary: value `v` is id `v`, specials follow.
pub struct Vocabulary;

impl Vocabulary {
    pub const PAD: u32 = NUM_VALUES;
    pub const EOI: u32 = NUM_VALUES + 1;
    pub const BOT: u32 = NUM_VALUES + 2;
    pub const EOT: u32 = NUM_VALUES + 3;
    pub const ANS: u32 = NUM_VALUES + 4;
    /// Embedding/unembedding rows.
    pub const SIZE: usize = NUM_VALUES as usize + 5;
    /// Reserved placeholder serialized at latent-thought positions. It has no
    /// embedding row: its input vector is produced at run time by latent feedback.
    pub const LATENT: u32 = Self::SIZE as u32;

    pub fn value(v: u32) -> u32 {
        debug_assert!(v < NUM_VALUES);
        v
    }

    pub fn is_value(id: u32) -> bool {
        id < NUM_VALUES
    }

    pub fn name(id: u32) -> String {
        match id {
            Self::PAD => "PAD".into(),
            Self::EOI => "EOI".into(),
            Self::BOT => "BOT".into(),
            Self::EOT => "EOT".into(),
            Self::ANS => "ANS".into(),
            Self::LATENT => "LAT".into(),
            v => v.to_string(),
        }
    }
}

/// Parameters of the recurrence and the input distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub modulus: u32,
    pub bias: u32,
    pub hops: usize,
    pub input_low: u32,
    pub input_high: u32,
}

impl TaskSpec {
    /// Spec with the default input range `[1, m-1]`.
    pub fn new(modulus: u32, bias: u32, hops: usize) -> Self {
        TaskSpec {
            modulus,
            bias,
            hops,
            input_low: 1,
            input_high: modulus.saturating_sub(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hops < 1 {
            return Err(Error::Config("hops must be >= 1".into()));
        }
        self.validate_ranges()
    }

    /// Checks modulus, bias and input range; allows the 0-hop (single input)
    /// sequences used at the bottom of a curriculum.
    pub fn validate_ranges(&self) -> Result<()> {
        if self.modulus < 2 {
            return Err(Error::Config(format!("modulus {} < 2", self.modulus)));
        }
        if self.modulus > NUM_VALUES {
            return Err(Error::Config(format!(
                "modulus {} exceeds the {NUM_VALUES} value tokens",
                self.modulus
            )));
        }
        if self.bias >= self.modulus {
            return Err(Error::Config(format!(
                "bias {} not in [0, {})",
                self.bias, self.modulus
            )));
        }
        if self.input_low < 1 || self.input_low > self.input_high || self.input_high >= self.modulus
        {
            return Err(Error::Config(format!(
                "input range [{}, {}] must satisfy 1 <= low <= high <= m-1 = {}",
                self.input_low,
                self.input_high,
                self.modulus - 1
            )));
        }
        Ok(())
    }

    /// Number of inputs `T = n + 1`.
    pub fn num_inputs(&self) -> usize {
        self.hops + 1
    }

    /// Same task with a different sequence length (number of inputs).
    pub fn with_inputs(&self, len: usize) -> Self {
        TaskSpec {
            hops: len.saturating_sub(1),
            ..*self
        }
    }

    /// One update `s * x + b (mod m)`.
    pub fn step(&self, s: u32, x: u32) -> u32 {
        let m = self.modulus as u64;
        ((s as u64 * x as u64 + self.bias as u64) % m) as u32
    }
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::new(50, 1, 1)
    }
}

/// One sequence of the task. `spec.hops + 1 == inputs.len()`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub spec: TaskSpec,
    pub inputs: Vec<u32>,
    pub states: Vec<u32>,
}

impl TaskInstance {
    /// Builds an instance from explicit inputs, computing the states.
    ///
    /// Inputs only need to lie in `[0, m)`; corrupted instances may leave the
    /// sampling range.
    pub fn from_inputs(spec: TaskSpec, inputs: Vec<u32>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Config("instance needs at least one input".into()));
        }
        if let Some(&bad) = inputs.iter().find(|&&x| x >= spec.modulus) {
            return Err(Error::Config(format!(
                "input {bad} not in [0, {})",
                spec.modulus
            )));
        }
        let spec = spec.with_inputs(inputs.len());
        let mut states = Vec::with_capacity(inputs.len());
        states.push(inputs[0] % spec.modulus);
        for &x in &inputs[1..] {
            let prev = *states.last().unwrap();
            states.push(spec.step(prev, x));
        }
        Ok(TaskInstance {
            spec,
            inputs,
            states,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn answer(&self) -> u32 {
        *self.states.last().expect("instance has at least one state")
    }

    /// 1-indexed input `x_i`.
    pub fn input(&self, i: usize) -> u32 {
        self.inputs[i - 1]
    }

    /// 1-indexed state `s_t`.
    pub fn state(&self, t: usize) -> u32 {
        self.states[t - 1]
    }
}

/// Samples a fresh instance with `spec.hops + 1` inputs.
pub fn generate_instance<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Result<TaskInstance> {
    spec.validate_ranges()?;
    let inputs = (0..spec.num_inputs())
        .map(|_| rng.random_range(spec.input_low..=spec.input_high))
        .collect();
    TaskInstance::from_inputs(*spec, inputs)
}

/// Unrolled form of the recurrence:
/// `x_1 * prod_{i=2..T} x_i + b * sum_{t=2..T} prod_{i=t+1..T} x_i (mod m)`.
pub fn closed_form_answer(instance: &TaskInstance) -> u32 {
    let m = instance.spec.modulus as u64;
    let b = instance.spec.bias as u64;
    let x = &instance.inputs;
    let t_len = x.len();
    // suffix[t] = prod_{i=t..T-1} x_i (0-indexed), suffix[T] = 1
    let mut suffix = vec![1u64; t_len + 1];
    for i in (0..t_len).rev() {
        suffix[i] = suffix[i + 1] * (x[i] as u64 % m) % m;
    }
    let mut acc = suffix[0];
    for t in 1..t_len {
        acc = (acc + b * suffix[t + 1]) % m;
    }
    (acc % m) as u32
}

/// Returns a copy with `x_i` (1-indexed) replaced by `2 * x_i mod m` and the
/// states recomputed. The corrupted value is used even if it leaves the
/// sampling range.
pub fn corrupt_input(instance: &TaskInstance, position: usize) -> Result<TaskInstance> {
    if position < 1 || position > instance.len() {
        return Err(Error::Index {
            what: "corrupted input position",
            index: position,
            range: format!("1..={}", instance.len()),
        });
    }
    let mut inputs = instance.inputs.clone();
    inputs[position - 1] = (2 * inputs[position - 1]) % instance.spec.modulus;
    let mut corrupted = TaskInstance::from_inputs(instance.spec, inputs)?;
    corrupted.spec.input_low = instance.spec.input_low;
    corrupted.spec.input_high = instance.spec.input_high;
    Ok(corrupted)
}

/// Training regime of a serialized example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Explicit trace: inputs, EOI, s_1..s_n, ANS, s_{n+1}.
    Teacher,
    /// Latent thoughts: inputs, BOT, p latents, EOT, ANS.
    Student,
    /// Inputs then ANS.
    NonCot,
}

/// Role of one position in a serialized sequence. Indices are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Input(usize),
    Eoi,
    Trace(usize),
    Bot,
    Latent(usize),
    Eot,
    Ans,
    AnswerTarget,
    Pad,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Input(i) => write!(f, "x{i}"),
            Role::Eoi => f.write_str("EOI"),
            Role::Trace(t) => write!(f, "s{t}"),
            Role::Bot => f.write_str("BOT"),
            Role::Latent(j) => write!(f, "l{j}"),
            Role::Eot => f.write_str("EOT"),
            Role::Ans => f.write_str("ANS"),
            Role::AnswerTarget => f.write_str("Y"),
            Role::Pad => f.write_str("PAD"),
        }
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let indexed = |rest: &str| {
            rest.parse::<usize>()
                .ok()
                .filter(|&i| i >= 1)
                .ok_or_else(|| Error::Config(format!("bad role '{s}'")))
        };
        Ok(match s {
            "EOI" => Role::Eoi,
            "BOT" => Role::Bot,
            "EOT" => Role::Eot,
            "ANS" => Role::Ans,
            "Y" => Role::AnswerTarget,
            "PAD" => Role::Pad,
            _ if s.starts_with('x') => Role::Input(indexed(&s[1..])?),
            _ if s.starts_with('s') => Role::Trace(indexed(&s[1..])?),
            _ if s.starts_with('l') => Role::Latent(indexed(&s[1..])?),
            _ => return Err(Error::Config(format!("bad role '{s}'"))),
        })
    }
}

impl Serialize for Role {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Role {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A tokenized sequence ready for the model.
///
/// `loss_mask[i]` marks positions whose next-token prediction is supervised.
/// The target at position `i` is `token_ids[i + 1]`, or `answer` when `i` is
/// the last position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedExample {
    pub token_ids: Vec<u32>,
    pub roles: Vec<Role>,
    pub loss_mask: Vec<bool>,
    pub answer: u32,
    pub regime: Regime,
    pub spec: TaskSpec,
}

impl SerializedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Supervised target token per position.
    pub fn targets(&self) -> Vec<Option<u32>> {
        (0..self.len())
            .map(|i| {
                self.loss_mask[i].then(|| self.token_ids.get(i + 1).copied().unwrap_or(self.answer))
            })
            .collect()
    }

    pub fn position_of(&self, role: Role) -> Option<usize> {
        self.roles.iter().position(|&r| r == role)
    }

    /// Position of the ANS token.
    pub fn ans_position(&self) -> usize {
        self.position_of(Role::Ans).expect("every example has one ANS")
    }

    /// Decodes value tokens back to (inputs, trace).
    pub fn decode(&self) -> (Vec<u32>, Vec<u32>) {
        let mut inputs = Vec::new();
        let mut trace = Vec::new();
        for (&id, role) in self.token_ids.iter().zip(&self.roles) {
            match role {
                Role::Input(_) => inputs.push(id),
                Role::Trace(_) => trace.push(id),
                _ => {}
            }
        }
        (inputs, trace)
    }
}

/// Serializes an instance for one regime. `latent_steps` is only used by
/// [`Regime::Student`]. Fails when the sequence would not fit `context_length`.
pub fn serialize(
    instance: &TaskInstance,
    regime: Regime,
    latent_steps: usize,
    context_length: usize,
) -> Result<SerializedExample> {
    let t_len = instance.len();
    let mut ids = Vec::new();
    let mut roles = Vec::new();
    let mut mask = Vec::new();
    let mut push = |id: u32, role: Role, supervised: bool| {
        ids.push(id);
        roles.push(role);
        mask.push(supervised);
    };
    for (i, &x) in instance.inputs.iter().enumerate() {
        push(Vocabulary::value(x), Role::Input(i + 1), false);
    }
    match regime {
        Regime::Teacher => {
            // EOI predicts s_1, s_t predicts s_{t+1}, s_n predicts ANS, ANS predicts the answer.
            push(Vocabulary::EOI, Role::Eoi, true);
            for t in 1..t_len {
                push(Vocabulary::value(instance.state(t)), Role::Trace(t), true);
            }
            push(Vocabulary::ANS, Role::Ans, true);
            push(
                Vocabulary::value(instance.answer()),
                Role::AnswerTarget,
                false,
            );
        }
        Regime::Student => {
            if latent_steps == 0 {
                return Err(Error::Config("student serialization needs latent_steps >= 1".into()));
            }
            push(Vocabulary::BOT, Role::Bot, false);
            for j in 1..=latent_steps {
                push(Vocabulary::LATENT, Role::Latent(j), false);
            }
            push(Vocabulary::EOT, Role::Eot, false);
            push(Vocabulary::ANS, Role::Ans, true);
        }
        Regime::NonCot => {
            push(Vocabulary::ANS, Role::Ans, true);
        }
    }
    if ids.len() > context_length {
        return Err(Error::Config(format!(
            "{regime:?} sequence of length {} exceeds context length {context_length}",
            ids.len()
        )));
    }
    Ok(SerializedExample {
        token_ids: ids,
        roles,
        loss_mask: mask,
        answer: instance.answer(),
        regime,
        spec: instance.spec,
    })
}

/// Length of a serialized sequence without building it.
pub fn serialized_len(num_inputs: usize, regime: Regime, latent_steps: usize) -> usize {
    match regime {
        Regime::Teacher => 2 * num_inputs + 2,
        Regime::Student => num_inputs + latent_steps + 3,
        Regime::NonCot => num_inputs + 1,
    }
}

/// Salt mixed into the train/test hash.
const SPLIT_SALT: u64 = 0x6c61_7465_6e74_636f;

/// Deterministic FNV-1a hash of an input tuple.
fn tuple_hash(spec: &TaskSpec, inputs: &[u32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ SPLIT_SALT;
    let mut eat = |v: u64| {
        for byte in v.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(spec.modulus as u64);
    eat(spec.bias as u64);
    eat(inputs.len() as u64);
    for &x in inputs {
        eat(x as u64);
    }
    h
}

/// Fraction of the input-tuple space reserved for testing.
pub const TEST_FRACTION: f64 = 0.2;

/// Whether an input tuple belongs to the held-out side of the split.
pub fn is_test_tuple(spec: &TaskSpec, inputs: &[u32]) -> bool {
    let h = tuple_hash(spec, inputs);
    // top 53 bits -> uniform in [0, 1)
    ((h >> 11) as f64 / (1u64 << 53) as f64) < TEST_FRACTION
}

/// Instances grouped by number of inputs, with train and test drawn from
/// disjoint halves of the input-tuple space.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Curriculum {
    pub spec: TaskSpec,
    pub train: BTreeMap<usize, Vec<TaskInstance>>,
    pub test: BTreeMap<usize, Vec<TaskInstance>>,
}

impl Curriculum {
    pub fn train_len(&self) -> usize {
        self.train.values().map(Vec::len).sum()
    }

    pub fn test_len(&self) -> usize {
        self.test.values().map(Vec::len).sum()
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.train.keys().copied()
    }
}

/// Builds `per_length` training and `test_per_length` test instances for
/// every sequence length `1..=spec.hops + 1`.
pub fn make_curriculum<R: Rng + ?Sized>(
    spec: &TaskSpec,
    per_length: usize,
    test_per_length: usize,
    rng: &mut R,
) -> Result<Curriculum> {
    spec.validate()?;
    if per_length == 0 {
        return Err(Error::Config("per_length must be >= 1".into()));
    }
    let mut curriculum = Curriculum {
        spec: *spec,
        ..Default::default()
    };
    for len in 1..=spec.num_inputs() {
        let (train, test) = sample_split(spec, len, per_length, test_per_length, rng)?;
        curriculum.train.insert(len, train);
        curriculum.test.insert(len, test);
    }
    Ok(curriculum)
}

/// Draws `n_train` instances of exactly `len` inputs from the training side
/// of the split and `n_test` from the held-out side.
pub fn sample_split<R: Rng + ?Sized>(
    spec: &TaskSpec,
    len: usize,
    n_train: usize,
    n_test: usize,
    rng: &mut R,
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    spec.validate_ranges()?;
    if len == 0 {
        return Err(Error::Config("instances need at least one input".into()));
    }
    let len_spec = spec.with_inputs(len);
    let range = (spec.input_high - spec.input_low + 1) as f64;
    if range.powi(len as i32) <= 200_000.0 {
        sample_enumerated(&len_spec, n_train, n_test, rng)
    } else {
        sample_rejection(&len_spec, n_train, n_test, rng)
    }
}

fn sample_enumerated<R: Rng + ?Sized>(
    spec: &TaskSpec,
    n_train: usize,
    n_test: usize,
    rng: &mut R,
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    let len = spec.num_inputs();
    let mut train_side = Vec::new();
    let mut test_side = Vec::new();
    let mut tuple = vec![spec.input_low; len];
    'enumerate: loop {
        if is_test_tuple(spec, &tuple) {
            test_side.push(tuple.clone());
        } else {
            train_side.push(tuple.clone());
        }
        // odometer increment, last digit fastest
        for k in (0..len).rev() {
            if tuple[k] < spec.input_high {
                tuple[k] += 1;
                continue 'enumerate;
            }
            tuple[k] = spec.input_low;
        }
        break;
    }
    if train_side.is_empty() || (n_test > 0 && test_side.is_empty()) {
        return Err(Error::Config(format!(
            "input space for length {len} too small to split into train and test"
        )));
    }
    let draw = |side: &Vec<Vec<u32>>, count: usize, rng: &mut R| -> Result<Vec<TaskInstance>> {
        (0..count)
            .map(|_| {
                let inputs = side[rng.random_range(0..side.len())].clone();
                TaskInstance::from_inputs(*spec, inputs).map(|mut inst| {
                    inst.spec = *spec;
                    inst
                })
            })
            .collect()
    };
    let train = draw(&train_side, n_train, rng)?;
    let test = draw(&test_side, n_test, rng)?;
    Ok((train, test))
}

fn sample_rejection<R: Rng + ?Sized>(
    spec: &TaskSpec,
    n_train: usize,
    n_test: usize,
    rng: &mut R,
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    let budget = 1000 * (n_train + n_test) + 10_000;
    for _ in 0..budget {
        if train.len() == n_train && test.len() == n_test {
            break;
        }
        let inst = generate_instance(spec, rng)?;
        if is_test_tuple(spec, &inst.inputs) {
            if test.len() < n_test {
                test.push(inst);
            }
        } else if train.len() < n_train {
            train.push(inst);
        }
    }
    if train.len() < n_train || test.len() < n_test {
        return Err(Error::Config("could not fill train/test splits".into()));
    }
    Ok((train, test))
}

/// Writes serialized examples as JSON lines.
pub fn write_jsonl<W: std::io::Write>(mut out: W, examples: &[SerializedExample]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

/// Reads serialized examples from JSON lines.
pub fn read_jsonl<R: std::io::BufRead>(input: R) -> Result<Vec<SerializedExample>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
