//! Interpretability tools over trained models: logit lens, attention
//! averaging, linear probes on cached residuals, and activation patching.

mod attention;
pub mod export;
mod lens;
mod patching;
mod probe;
mod store;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkernel::{Model, SeqBatch};
use crate::taskgen::{serialize, Regime, Role, SerializedExample, TaskInstance};

pub use attention::{collect_attention, AttentionSummary};
pub use lens::{logit_lens, LogitLensGrid};
pub use patching::{lift, patch_sites, run_patching, PatchResult, PatchSite};
pub use probe::{
    build_probe_dataset, shuffle_labels, split_sizes, train_probe, ProbeConfig, ProbeDataset,
    ProbeResult,
};
pub use store::{build_activation_store, ActivationStore};

/// A task variable read out of the model: an input `x_i` or a state `s_t`
/// (1-indexed). The answer of a length-`T` instance is `s_T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Input(usize),
    State(usize),
}

impl Symbol {
    pub fn value(self, inst: &TaskInstance) -> Result<u32> {
        let (what, i) = match self {
            Symbol::Input(i) => ("input", i),
            Symbol::State(i) => ("state", i),
        };
        if i == 0 || i > inst.len() {
            return Err(Error::Index {
                what,
                index: i,
                range: format!("1..={}", inst.len()),
            });
        }
        Ok(match self {
            Symbol::Input(i) => inst.input(i),
            Symbol::State(t) => inst.state(t),
        })
    }

    /// Every input and state of a length-`len` instance.
    pub fn all(len: usize) -> Vec<Symbol> {
        (1..=len)
            .map(Symbol::Input)
            .chain((1..=len).map(Symbol::State))
            .collect()
    }
}

impl std::fmt::Display for Symbol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Symbol::Input(i) => write!(f, "x{i}"),
            Symbol::State(t) => write!(f, "s{t}"),
        }
    }
}

impl std::str::FromStr for Symbol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad symbol {s:?}, expected x<i> or s<t>"));
        let (kind, idx) = s.split_at(s.len().min(1));
        let i: usize = idx.parse().map_err(|_| bad())?;
        if i == 0 {
            return Err(bad());
        }
        match kind {
            "x" => Ok(Symbol::Input(i)),
            "s" => Ok(Symbol::State(i)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Symbol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Symbol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Serializes same-length instances in the analysis layout.
pub(crate) fn layout_batch(
    model: &Model<f32>,
    instances: &[TaskInstance],
    regime: Regime,
) -> Result<(Vec<SerializedExample>, SeqBatch)> {
    let first = instances
        .first()
        .ok_or_else(|| Error::Layout("no examples".into()))?;
    if instances.iter().any(|i| i.len() != first.len()) {
        return Err(Error::Layout("analysis examples must share one length".into()));
    }
    let ex: Vec<_> = instances
        .iter()
        .map(|i| serialize(i, regime, model.config.latent_steps, model.config.context_length))
        .collect::<Result<_>>()?;
    let seq = SeqBatch::from_examples(&ex.iter().collect::<Vec<_>>())?;
    Ok((ex, seq))
}

/// Role labels of the layout, for axis annotation.
pub fn role_labels(roles: &[Role]) -> Vec<String> {
    roles.iter().map(|r| r.to_string()).collect()
}

/// Depth labels `L1-Pre, L1-Post, ...`.
pub fn depth_labels(depths: usize) -> Vec<String> {
    (0..depths).map(|d| crate::nnkernel::Depth(d).to_string()).collect()
}

pub(crate) const ANALYSIS_BATCH: usize = 256;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbols_parse_and_print() {
        for s in ["x1", "x12", "s3"] {
            assert_eq!(s.parse::<Symbol>().unwrap().to_string(), s);
        }
        for s in ["", "x", "s0", "y2", "x-1"] {
            assert!(s.parse::<Symbol>().is_err(), "{s}");
        }
        let inst = TaskInstance::from_inputs(Default::default(), vec![3, 4, 5]).unwrap();
        assert_eq!(Symbol::State(2).value(&inst).unwrap(), 13);
        assert_eq!(Symbol::Input(3).value(&inst).unwrap(), 5);
        assert!(Symbol::State(4).value(&inst).is_err());
    }
}
