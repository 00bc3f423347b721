//! Fixed policies under explanation and state featurization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{records_to_net, LayerRecord};
use crate::env::{AbrEnv, ActionSpace, CcEnv, Env};
use crate::error::{Error, Result};
use crate::nn::DenseNet;

/// A deterministic controller. `env` supplies static context such as the
/// action space or reward weights; the action depends only on `state`.
pub trait Policy<E: Env>: Send + Sync {
    fn id(&self) -> &str;
    fn evaluate(&self, env: &E, state: &E::State) -> E::Action;
    fn embed(&self, _env: &E, _state: &E::State) -> Option<Vec<f64>> {
        None
    }
}

/// Buffer-based bitrate selection: lowest quality below the reservoir, top
/// quality above the cushion, linear in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BufferBasedPolicy {
    pub reservoir_s: f64,
    pub cushion_s: f64,
}

impl Default for BufferBasedPolicy {
    fn default() -> Self {
        Self {
            reservoir_s: 5.0,
            cushion_s: 10.0,
        }
    }
}

impl BufferBasedPolicy {
    pub fn choose(&self, buffer_s: f64, levels: usize) -> usize {
        let top = levels - 1;
        if buffer_s <= self.reservoir_s {
            0
        } else if buffer_s >= self.cushion_s {
            top
        } else {
            let frac = (buffer_s - self.reservoir_s) / (self.cushion_s - self.reservoir_s);
            ((frac * top as f64).floor() as usize).min(top)
        }
    }
}

impl Policy<AbrEnv> for BufferBasedPolicy {
    fn id(&self) -> &str {
        "abr-bba"
    }

    fn evaluate(&self, env: &AbrEnv, state: &crate::env::AbrState) -> usize {
        self.choose(state.buffer_s, env.config().levels())
    }
}

/// Fixed-bitrate lookahead: scores holding each quality for `horizon`
/// chunks with the environment's own reward weights, simulating the buffer
/// for the first `stall_chunks` of them against the harmonic mean of recent
/// throughput. Raising the stall weight makes it drop bitrate more readily.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LookaheadPolicy {
    pub forecast_window: usize,
    pub horizon: usize,
    pub stall_chunks: usize,
}

impl Default for LookaheadPolicy {
    fn default() -> Self {
        Self {
            forecast_window: 5,
            horizon: 5,
            stall_chunks: 5,
        }
    }
}

impl Policy<AbrEnv> for LookaheadPolicy {
    fn id(&self) -> &str {
        "abr-lookahead"
    }

    fn evaluate(&self, env: &AbrEnv, state: &crate::env::AbrState) -> usize {
        let cfg = env.config();
        let observed: Vec<f64> = state
            .chunk_sizes_mb
            .iter()
            .zip(&state.transmission_times_s)
            .filter(|(_, &t)| t > 0.0)
            .map(|(s, t)| s / t)
            .collect();
        let recent = &observed[observed.len().saturating_sub(self.forecast_window)..];
        let forecast = if recent.is_empty() {
            cfg.chunk_sizes_mb[0] / cfg.chunk_duration_s
        } else {
            recent.len() as f64 / recent.iter().map(|t| 1.0 / t).sum::<f64>()
        };
        let [w_quality, w_change, w_stall] = cfg.weights;
        let last_q = cfg.quality(state.last_quality);
        let mut best = (0, f64::NEG_INFINITY);
        for (a, size) in cfg.chunk_sizes_mb.iter().enumerate() {
            let q = cfg.quality(a);
            let download = size / forecast;
            let mut buffer = state.buffer_s;
            let mut stall = 0.0;
            for _ in 0..self.stall_chunks {
                stall += (download - buffer).max(0.0);
                buffer = ((buffer - download).max(0.0) + cfg.chunk_duration_s).min(cfg.buffer_max_s);
            }
            let score = w_quality * q * self.horizon as f64 - w_change * (q - last_q).abs() - w_stall * stall;
            if score > best.1 {
                best = (a, score);
            }
        }
        best.0
    }
}

/// Additive-increase, multiplicative-decrease rate control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AimdPolicy {
    /// Loss fractions at or below this are not treated as congestion.
    pub loss_tolerance: f64,
    pub latency_threshold: f64,
    pub increase: f64,
    pub decrease: f64,
}

impl Default for AimdPolicy {
    fn default() -> Self {
        Self {
            loss_tolerance: 0.025,
            latency_threshold: 1.1,
            increase: 0.1,
            decrease: -0.3,
        }
    }
}

impl AimdPolicy {
    pub fn choose(&self, loss: f64, latency_ratio: f64) -> f64 {
        if loss > self.loss_tolerance || latency_ratio > self.latency_threshold {
            self.decrease
        } else {
            self.increase
        }
    }
}

impl Policy<CcEnv> for AimdPolicy {
    fn id(&self) -> &str {
        "cc-aimd"
    }

    fn evaluate(&self, _env: &CcEnv, state: &crate::env::CcState) -> f64 {
        let last = state.last();
        self.choose(last.loss, last.latency_ratio)
    }
}

/// A user-supplied network over raw features. Discrete spaces take the
/// argmax output; continuous spaces take `tanh` of the first output scaled to
/// the interval. The embedding is the last hidden layer's activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalPolicy {
    id: String,
    net: DenseNet<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExternalPolicyFile {
    magic: String,
    id: String,
    layers: Vec<LayerRecord<f64>>,
}

pub const EXTERNAL_POLICY_MAGIC: &str = "cbx1-policy";

impl ExternalPolicy {
    pub fn new(id: impl Into<String>, net: DenseNet<f64>) -> Self {
        Self { id: id.into(), net }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ExternalPolicyFile = serde_json::from_str(&text)?;
        if file.magic != EXTERNAL_POLICY_MAGIC {
            return Err(Error::Checkpoint(format!("bad policy magic `{}`", file.magic)));
        }
        Ok(Self::new(file.id, records_to_net(&file.layers)?))
    }

    fn outputs<E: Env>(&self, env: &E, state: &E::State) -> Vec<Vec<f64>> {
        let features = env.raw_features(state);
        self.net
            .activations(&features)
            .expect("external policy input width must match the environment's raw features")
    }
}

impl<E: Env> Policy<E> for ExternalPolicy {
    fn id(&self) -> &str {
        &self.id
    }

    fn evaluate(&self, env: &E, state: &E::State) -> E::Action {
        let acts = self.outputs(env, state);
        let out = acts.last().expect("network has an output layer");
        let value = match env.action_space() {
            ActionSpace::Discrete { n } => out
                .iter()
                .take(n)
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0 as f64,
            ActionSpace::Continuous { low, high } => {
                let unit = out[0].tanh();
                low + (unit + 1.0) * 0.5 * (high - low)
            }
        };
        env.action_from_f64(value).expect("external policy output mapped into the action space")
    }

    fn embed(&self, env: &E, state: &E::State) -> Option<Vec<f64>> {
        let acts = self.outputs(env, state);
        (acts.len() >= 2).then(|| acts[acts.len() - 2].clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Raw,
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub mode: FeatureMode,
}

pub fn featurize<E: Env, P: Policy<E> + ?Sized>(
    env: &E,
    policy: &P,
    state: &E::State,
    mode: FeatureMode,
) -> Result<FeatureVector> {
    let values = match mode {
        FeatureMode::Raw => env.raw_features(state),
        FeatureMode::Embedding => policy.embed(env, state).ok_or(Error::EmbeddingUnavailable)?,
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature vector".into()));
    }
    Ok(FeatureVector { values, mode })
}
