//! Deterministic trace-driven simulators with decomposed rewards.

mod abr;
mod cc;

use std::fmt::Debug;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::Trace;

pub use abr::{AbrConfig, AbrEnv, AbrState};
pub use cc::{CcConfig, CcEnv, CcState, MonitorRecord};

/// Ordered reward components and the weights that fold them into the scalar
/// reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSet {
    pub names: Vec<String>,
    pub weights: Vec<f64>,
}

pub const ABR_COMPONENTS: [&str; 3] = ["quality", "quality_change", "stalling"];
pub const CC_COMPONENTS: [&str; 3] = ["throughput", "latency", "loss"];

impl ComponentSet {
    fn new(names: &[&str], weights: [f64; 3]) -> Self {
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            weights: weights.to_vec(),
        }
    }

    pub fn abr(weights: [f64; 3]) -> Self {
        Self::new(&ABR_COMPONENTS, weights)
    }

    pub fn cc(weights: [f64; 3]) -> Self {
        Self::new(&CC_COMPONENTS, weights)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn weighted_sum(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Same component names in the same order; weights may differ.
    pub fn same_components(&self, other: &ComponentSet) -> bool {
        self.names == other.names
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome<S> {
    pub state: S,
    pub reward_components: Vec<f64>,
    pub reward_total: f64,
    pub done: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum ActionSpace {
    Discrete { n: usize },
    Continuous { low: f64, high: f64 },
}

impl ActionSpace {
    /// Width of the action encoding fed to the predictor.
    pub fn encoding_len(&self) -> usize {
        match self {
            ActionSpace::Discrete { n } => *n,
            ActionSpace::Continuous { .. } => 1,
        }
    }
}

/// A trace-driven simulator. Implementations are plain values: cloning one
/// yields an independent environment at the same point of the episode.
pub trait Env: Clone + Debug + Send + Sync + Serialize + DeserializeOwned {
    type State: Clone + Debug + PartialEq + Send + Sync;
    type Action: Copy + Debug + PartialEq + Send + Sync;

    fn components(&self) -> &ComponentSet;
    fn action_space(&self) -> ActionSpace;
    fn state(&self) -> &Self::State;
    fn is_done(&self) -> bool;
    fn step(&mut self, action: Self::Action) -> Result<StepOutcome<Self::State>>;

    fn trace(&self) -> &Trace;
    /// Seconds into the bound trace.
    fn cursor(&self) -> f64;
    /// Typical trace time consumed by one step.
    fn nominal_step_s(&self) -> f64;

    /// Returns a copy of this environment whose future bandwidth lookups read
    /// from `trace` starting at `offset` seconds.
    fn graft_future(&self, trace: Arc<Trace>, offset: f64) -> Result<Self>;

    /// Scaled raw features of `state`, each within [-1, 1].
    fn raw_features(&self, state: &Self::State) -> Vec<f64>;
    /// Recent observed throughput samples in Mbps, oldest first; padding
    /// entries from the episode start are omitted.
    fn observed_throughputs(&self) -> Vec<f64>;

    fn encode_action(&self, action: Self::Action) -> Vec<f64>;
    fn action_from_f64(&self, value: f64) -> Result<Self::Action>;
    fn action_to_f64(&self, action: Self::Action) -> f64;

    /// Checks internal invariants; used when restoring snapshots.
    fn check_invariants(&self) -> Result<()>;
}

/// Complete, serializable copy of an environment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "E: Env")]
pub struct EnvSnapshot<E: Env> {
    env: E,
}

impl<E: Env> EnvSnapshot<E> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::CorruptedSnapshot(e.to_string()))
    }

    pub fn env(&self) -> &E {
        &self.env
    }
}

pub fn snapshot<E: Env>(env: &E) -> EnvSnapshot<E> {
    EnvSnapshot { env: env.clone() }
}

pub fn restore<E: Env>(snapshot: &EnvSnapshot<E>) -> Result<E> {
    snapshot
        .env
        .check_invariants()
        .map_err(|e| Error::CorruptedSnapshot(e.to_string()))?;
    Ok(snapshot.env.clone())
}

pub fn graft_future<E: Env>(snapshot: &EnvSnapshot<E>, trace: Arc<Trace>, offset: f64) -> Result<E> {
    restore(snapshot)?.graft_future(trace, offset)
}

fn check_weights(weights: &[f64; 3]) -> Result<()> {
    if weights.iter().all(|w| w.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidConfig("reward weights must be finite".into()))
    }
}

fn check_offset(trace: &Trace, offset: f64) -> Result<()> {
    let limit = trace.duration();
    if offset.is_finite() && offset >= 0.0 && offset < limit {
        Ok(())
    } else {
        Err(Error::OffsetOutOfRange { offset, limit })
    }
}
