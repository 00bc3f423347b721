//! Immutable index of held-out anchor states plus everything needed to
//! explain an action in any of them.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use crystalbox::env::{snapshot, ActionSpace, ComponentSet, Env};
use crystalbox::eval::{Method, ThresholdSpec};
use crystalbox::policy::{featurize, FeatureMode, Policy};
use crystalbox::rollout::{substream, CONTINUOUS_GRID};
use crystalbox::sampling::{distribution_aware_estimate, fit_clusters, naive_estimate, ClusterModel, SamplerConfig, TracePool};
use crystalbox::trace::TraceSet;
use crystalbox::{Error, Predictor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Factory, ToolEnv};

/// Why a request could not be answered.
#[derive(Debug, Clone, PartialEq)]
pub enum StoreError {
    UnknownState(String),
    InvalidAction(String),
    Unavailable(String),
    Internal(String),
}

impl fmt::Display for StoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoreError::UnknownState(id) => write!(f, "unknown state id {id:?}"),
            StoreError::InvalidAction(m) => write!(f, "invalid action: {m}"),
            StoreError::Unavailable(m) => write!(f, "method unavailable: {m}"),
            StoreError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for StoreError {}

impl From<Error> for StoreError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidAction(m) => StoreError::InvalidAction(m),
            other => StoreError::Internal(other.to_string()),
        }
    }
}

pub struct StateEntry<E> {
    pub id: usize,
    pub trace_id: String,
    pub anchor: usize,
    pub time_s: f64,
    pub env: E,
    pub features: Vec<f64>,
    pub policy_action: f64,
    pub history: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub id: usize,
    pub trace_id: String,
    pub anchor: usize,
    pub time_s: f64,
    pub history: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateDetail {
    #[serde(flatten)]
    pub summary: StateSummary,
    pub policy_action: f64,
    /// Actions worth asking about: every discrete action, or the
    /// counterfactual grid plus the policy's own choice.
    pub actions: Vec<f64>,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentValue {
    pub name: String,
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub state_id: usize,
    pub action: f64,
    pub method: Method,
    pub components: Vec<ComponentValue>,
    /// Weighted sum of the component means.
    pub total: f64,
    pub flags: Vec<bool>,
    pub latency_ms: f64,
}

pub struct StoreConfig {
    pub spacing: usize,
    pub gamma: f64,
    pub t_max: usize,
    pub feature_mode: FeatureMode,
    pub sampler: SamplerConfig,
    pub clusters: usize,
    pub thresholds: ThresholdSpec,
    pub seed: u64,
}

impl StoreConfig {
    pub fn new<E: ToolEnv>(seed: u64) -> Self {
        Self {
            spacing: 5,
            gamma: 0.9,
            t_max: 5,
            feature_mode: FeatureMode::Raw,
            sampler: SamplerConfig::default(),
            clusters: 8,
            thresholds: E::thresholds(),
            seed,
        }
    }
}

pub struct SessionStore<E: Env> {
    pub components: ComponentSet,
    pub action_space: ActionSpace,
    pub model: Predictor,
    pub policy: Arc<dyn Policy<E>>,
    pub pool: Option<TracePool>,
    pub clusters: Option<ClusterModel>,
    pub states: Vec<StateEntry<E>>,
    pub sampler: SamplerConfig,
    pub thresholds: ThresholdSpec,
}

impl<E: ToolEnv> SessionStore<E> {
    /// Walks every held-out trace under the policy and records a state at
    /// each anchor. Samplers are available only when `train` is given.
    pub fn build(
        holdout: &TraceSet,
        train: Option<&TraceSet>,
        make_env: &Factory<E>,
        policy: Arc<dyn Policy<E>>,
        model: Predictor,
        cfg: StoreConfig,
    ) -> crystalbox::Result<Self> {
        if holdout.is_empty() {
            return Err(Error::Empty("held-out traces"));
        }
        if cfg.spacing == 0 {
            return Err(Error::InvalidConfig("spacing must be at least 1".into()));
        }
        let mut states = Vec::new();
        let mut components = None;
        let mut action_space = None;
        for trace in &holdout.traces {
            let mut env = make_env(Arc::new(trace.clone()))?;
            components.get_or_insert_with(|| env.components().clone());
            action_space.get_or_insert(env.action_space());
            let window = env_window(&env);
            let mut gauge = VecDeque::with_capacity(window);
            let mut step = 0;
            while !env.is_done() {
                if gauge.len() == window {
                    gauge.pop_front();
                }
                gauge.push_back(env.gauge());
                let action = policy.evaluate(&env, env.state());
                if step % cfg.spacing == 0 {
                    let series: Vec<f64> = gauge.iter().copied().collect();
                    states.push(StateEntry {
                        id: states.len(),
                        trace_id: trace.id.clone(),
                        anchor: step,
                        time_s: env.cursor(),
                        features: featurize(&env, &*policy, env.state(), cfg.feature_mode)?.values,
                        policy_action: env.action_to_f64(action),
                        history: env.history(&series),
                        env: env.clone(),
                    });
                }
                env.step(action)?;
                step += 1;
            }
        }
        let components = components.expect("holdout is not empty");
        if !model.components.same_components(&components) {
            return Err(Error::ComponentMismatch("model and environment disagree on components".into()));
        }
        let (pool, clusters) = match train {
            Some(set) if !set.is_empty() => (
                Some(TracePool::new(set)),
                Some(fit_clusters(set, cfg.clusters.clamp(1, set.len()), cfg.seed)?),
            ),
            _ => (None, None),
        };
        Ok(Self {
            components,
            action_space: action_space.expect("holdout is not empty"),
            model,
            policy,
            pool,
            clusters,
            states,
            sampler: SamplerConfig {
                gamma: cfg.gamma,
                t_max: cfg.t_max,
                seed: cfg.seed,
                ..cfg.sampler
            },
            thresholds: cfg.thresholds,
        })
    }
}

/// Chart length: as many entries as the state keeps of its own history.
fn env_window<E: ToolEnv>(env: &E) -> usize {
    env.history(&[]).values().map(Vec::len).max().unwrap_or(1).max(1)
}

impl<E: Env> SessionStore<E> {
    pub fn methods(&self) -> Vec<Method> {
        let mut m = vec![Method::Predictor];
        if self.pool.is_some() {
            m.push(Method::Naive);
        }
        if self.clusters.is_some() {
            m.push(Method::DistributionAware);
        }
        m
    }

    pub fn state(&self, id: usize) -> Result<&StateEntry<E>, StoreError> {
        self.states.get(id).ok_or_else(|| StoreError::UnknownState(id.to_string()))
    }

    pub fn summary(&self, s: &StateEntry<E>) -> StateSummary {
        StateSummary {
            id: s.id,
            trace_id: s.trace_id.clone(),
            anchor: s.anchor,
            time_s: s.time_s,
            history: s.history.clone(),
        }
    }

    pub fn detail(&self, id: usize) -> Result<StateDetail, StoreError> {
        let s = self.state(id)?;
        let actions = match self.action_space {
            ActionSpace::Discrete { n } => (0..n).map(|a| a as f64).collect(),
            ActionSpace::Continuous { .. } => {
                let mut v = CONTINUOUS_GRID.to_vec();
                if !v.contains(&s.policy_action) {
                    v.push(s.policy_action);
                }
                v
            }
        };
        Ok(StateDetail {
            summary: self.summary(s),
            policy_action: s.policy_action,
            actions,
            features: s.features.clone(),
        })
    }

    /// Explains `action` in state `id`. Sampler draws depend only on the
    /// state, so repeated requests give identical answers.
    pub fn explain(&self, id: usize, action: f64, method: Method) -> Result<ExplainResponse, StoreError> {
        let s = self.state(id)?;
        if !action.is_finite() {
            return Err(StoreError::InvalidAction(format!("{action} is not finite")));
        }
        let typed = s.env.action_from_f64(action)?;
        let start = Instant::now();
        let (means, stds): (Vec<f64>, Vec<f64>) = match method {
            Method::Predictor => {
                let e = self.model.predict(&s.features, &s.env.encode_action(typed))?;
                (e.means(), e.denormalized.iter().map(|g| g.std).collect())
            }
            Method::Naive | Method::DistributionAware => {
                let pool = self
                    .pool
                    .as_ref()
                    .ok_or_else(|| StoreError::Unavailable(format!("{method} needs training traces")))?;
                let config = SamplerConfig {
                    seed: substream(self.sampler.seed, id as u64).gen(),
                    ..self.sampler.clone()
                };
                let snap = snapshot(&s.env);
                let est = if method == Method::Naive {
                    naive_estimate(&snap, &*self.policy, pool, typed, &config)?
                } else {
                    let clusters = self
                        .clusters
                        .as_ref()
                        .ok_or_else(|| StoreError::Unavailable(format!("{method} needs a cluster model")))?;
                    distribution_aware_estimate(&snap, &*self.policy, clusters, pool, typed, &config)?
                };
                let stds = (0..est.mean.values.len())
                    .map(|c| {
                        let m = est.mean.values[c];
                        let var = est.individuals.iter().map(|v| (v[c] - m).powi(2)).sum::<f64>() / est.individuals.len() as f64;
                        var.sqrt()
                    })
                    .collect();
                (est.mean.values, stds)
            }
        };
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        let flags = self.thresholds.flags(&means, self.sampler.gamma, self.sampler.t_max)?;
        let components = self
            .components
            .names
            .iter()
            .zip(&self.components.weights)
            .zip(means.iter().zip(&stds))
            .map(|((name, &weight), (&mean, &std))| ComponentValue {
                name: name.clone(),
                weight,
                mean,
                std,
            })
            .collect();
        Ok(ExplainResponse {
            state_id: id,
            action,
            method,
            components,
            total: self.components.weighted_sum(&means),
            flags,
            latency_ms,
        })
    }
}
