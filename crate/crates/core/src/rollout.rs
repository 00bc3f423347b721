//! Monte Carlo samples of truncated decomposed returns.
//!
//! Each trace is replayed under the policy. Every `spacing` steps an anchor
//! is taken: the environment is cloned, the branch takes either the policy's
//! action (on-policy) or an explorative one, then follows the policy for the
//! rest of the horizon. The main trajectory always follows the policy, so an
//! explorative action never leaks into any other anchor's return.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{ActionSpace, ComponentSet, Env};
use crate::error::{Error, Result};
use crate::policy::{featurize, FeatureMode, Policy};
use crate::scalar::Scalar;
use crate::trace::{Trace, TraceSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DecomposedReturn<T> {
    pub values: Vec<T>,
    pub gamma: T,
    pub t_max: usize,
}

/// `sum_{k < min(t_max, len)} gamma^k * r_c[k]` for every component `c`.
pub fn truncated_decomposed_return<T: Scalar>(
    rewards: &[Vec<T>],
    gamma: T,
    t_max: usize,
) -> Result<DecomposedReturn<T>> {
    let first = rewards.first().ok_or(Error::Empty("reward sequence"))?;
    if t_max == 0 {
        return Err(Error::InvalidConfig("t_max must be at least 1".into()));
    }
    let mut values = vec![T::zero(); first.len()];
    let mut discount = T::one();
    for r in rewards.iter().take(t_max) {
        if r.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: values.len(),
                got: r.len(),
            });
        }
        for (v, &x) in values.iter_mut().zip(r) {
            *v += discount * x;
        }
        discount *= gamma;
    }
    Ok(DecomposedReturn { values, gamma, t_max })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub gamma: f64,
    pub t_max: usize,
    pub spacing: usize,
    pub exploratory_fraction: f64,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            t_max: 5,
            spacing: 5,
            exploratory_fraction: 0.5,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!("gamma {} not in [0,1]", self.gamma)));
        }
        if self.t_max < 1 {
            return Err(Error::InvalidConfig("t_max must be at least 1".into()));
        }
        if self.spacing < self.t_max {
            return Err(Error::InvalidConfig(format!(
                "spacing {} must be >= t_max {}",
                self.spacing, self.t_max
            )));
        }
        if !(0.0..=1.0).contains(&self.exploratory_fraction) {
            return Err(Error::InvalidConfig("exploratory_fraction not in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    OnPolicy,
    Exploratory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutSample {
    pub features: Vec<f64>,
    pub action: Vec<f64>,
    pub target: Vec<f64>,
    pub flavor: Flavor,
    pub trace: String,
    /// Step index of the anchor within its episode.
    pub anchor: usize,
}

/// Draws explorative actions.
pub trait ActionSampler<E: Env>: Sync {
    fn sample(&self, env: &E, rng: &mut ChaCha8Rng) -> E::Action;
}

impl<E: Env, F> ActionSampler<E> for F
where
    F: Fn(&E, &mut ChaCha8Rng) -> E::Action + Sync,
{
    fn sample(&self, env: &E, rng: &mut ChaCha8Rng) -> E::Action {
        self(env, rng)
    }
}

/// Uniform over discrete actions. For continuous spaces, half the draws come
/// from the grid {-0.5, 0, 0.5} and half uniformly from the interval.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformExploration;

pub const CONTINUOUS_GRID: [f64; 3] = [-0.5, 0.0, 0.5];

impl<E: Env> ActionSampler<E> for UniformExploration {
    fn sample(&self, env: &E, rng: &mut ChaCha8Rng) -> E::Action {
        let value = match env.action_space() {
            ActionSpace::Discrete { n } => rng.gen_range(0..n) as f64,
            ActionSpace::Continuous { low, high } => {
                if rng.gen_bool(0.5) {
                    CONTINUOUS_GRID[rng.gen_range(0..CONTINUOUS_GRID.len())].clamp(low, high)
                } else {
                    rng.gen_range(low..=high)
                }
            }
        };
        env.action_from_f64(value).expect("sampled action lies in the action space")
    }
}

/// Result of one branch rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub rewards: Vec<Vec<f64>>,
    pub totals: Vec<f64>,
}

impl Branch {
    pub fn decomposed(&self, gamma: f64, t_max: usize) -> Result<DecomposedReturn<f64>> {
        truncated_decomposed_return(&self.rewards, gamma, t_max)
    }

    /// Truncated return of the scalar reward.
    pub fn total(&self, gamma: f64, t_max: usize) -> f64 {
        let mut discount = 1.0;
        let mut sum = 0.0;
        for r in self.totals.iter().take(t_max) {
            sum += discount * r;
            discount *= gamma;
        }
        sum
    }
}

/// Takes `first` in `env`, then follows `policy` until `t_max` steps are taken
/// or the episode ends.
pub fn run_branch<E: Env, P: Policy<E> + ?Sized>(
    env: &mut E,
    policy: &P,
    first: E::Action,
    t_max: usize,
) -> Result<Branch> {
    let mut branch = Branch {
        rewards: Vec::with_capacity(t_max),
        totals: Vec::with_capacity(t_max),
    };
    let mut action = first;
    for step in 0..t_max {
        if step > 0 {
            if env.is_done() {
                break;
            }
            action = policy.evaluate(env, env.state());
        }
        let out = env.step(action)?;
        branch.rewards.push(out.reward_components);
        branch.totals.push(out.reward_total);
    }
    Ok(branch)
}

/// Deterministic per-index random stream derived from `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Builds an environment for one trace.
pub type EnvFactory<'a, E> = dyn Fn(Arc<Trace>) -> Result<E> + Sync + 'a;

/// Visits every anchor of one episode: `visit(env_at_anchor, step_index)`.
pub fn for_each_anchor<E: Env, P: Policy<E> + ?Sized>(
    mut env: E,
    policy: &P,
    spacing: usize,
    mut visit: impl FnMut(&E, usize) -> Result<()>,
) -> Result<()> {
    let mut step = 0;
    while !env.is_done() {
        if step % spacing == 0 {
            visit(&env, step)?;
        }
        let action = policy.evaluate(&env, env.state());
        env.step(action)?;
        step += 1;
    }
    Ok(())
}

/// Collects anchors over every trace. Each anchor is exploratory with
/// probability `exploratory_fraction`. Output is ordered by trace id, then
/// anchor.
pub fn collect<E, P, X>(
    traces: &TraceSet,
    make_env: &EnvFactory<'_, E>,
    policy: &P,
    explorer: &X,
    config: &RolloutConfig,
    mode: FeatureMode,
) -> Result<Vec<RolloutSample>>
where
    E: Env,
    P: Policy<E> + ?Sized,
    X: ActionSampler<E> + ?Sized,
{
    config.validate()?;
    let mut per_trace: Vec<(String, Vec<RolloutSample>)> = traces
        .traces
        .par_iter()
        .enumerate()
        .map(|(i, trace)| {
            let mut rng = substream(config.seed, i as u64);
            let env = make_env(Arc::new(trace.clone()))?;
            let mut samples = Vec::new();
            for_each_anchor(env, policy, config.spacing, |env, step| {
                let exploratory = rng.gen::<f64>() < config.exploratory_fraction;
                let action = if exploratory {
                    explorer.sample(env, &mut rng)
                } else {
                    policy.evaluate(env, env.state())
                };
                let features = featurize(env, policy, env.state(), mode)?;
                let mut branch_env = env.clone();
                let branch = run_branch(&mut branch_env, policy, action, config.t_max)?;
                samples.push(RolloutSample {
                    features: features.values,
                    action: env.encode_action(action),
                    target: branch.decomposed(config.gamma, config.t_max)?.values,
                    flavor: if exploratory { Flavor::Exploratory } else { Flavor::OnPolicy },
                    trace: trace.id.clone(),
                    anchor: step,
                });
                Ok(())
            })?;
            Ok((trace.id.clone(), samples))
        })
        .collect::<Result<_>>()?;
    per_trace.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(per_trace.into_iter().flat_map(|(_, s)| s).collect())
}

pub fn collect_onpolicy<E: Env, P: Policy<E> + ?Sized>(
    traces: &TraceSet,
    make_env: &EnvFactory<'_, E>,
    policy: &P,
    config: &RolloutConfig,
    mode: FeatureMode,
) -> Result<Vec<RolloutSample>> {
    let config = RolloutConfig {
        exploratory_fraction: 0.0,
        ..config.clone()
    };
    collect(traces, make_env, policy, &UniformExploration, &config, mode)
}

pub fn collect_exploratory<E, P, X>(
    traces: &TraceSet,
    make_env: &EnvFactory<'_, E>,
    policy: &P,
    explorer: &X,
    config: &RolloutConfig,
    mode: FeatureMode,
) -> Result<Vec<RolloutSample>>
where
    E: Env,
    P: Policy<E> + ?Sized,
    X: ActionSampler<E> + ?Sized,
{
    let config = RolloutConfig {
        exploratory_fraction: 1.0,
        ..config.clone()
    };
    collect(traces, make_env, policy, explorer, &config, mode)
}

/// Per-component affine map of returns onto [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NormalizationSpec<T> {
    pub min: Vec<T>,
    pub max: Vec<T>,
    /// Components whose training values were all equal; they map to 0.5.
    pub degenerate: Vec<bool>,
}

impl<T: Scalar> NormalizationSpec<T> {
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a [T]>) -> Result<Self> {
        let mut iter = values.into_iter();
        let first = iter.next().ok_or(Error::Empty("returns to normalize"))?;
        let mut min = first.to_vec();
        let mut max = first.to_vec();
        for v in iter {
            if v.len() != min.len() {
                return Err(Error::DimensionMismatch {
                    expected: min.len(),
                    got: v.len(),
                });
            }
            for ((lo, hi), &x) in min.iter_mut().zip(max.iter_mut()).zip(v) {
                *lo = lo.min(x);
                *hi = hi.max(x);
            }
        }
        let degenerate = min.iter().zip(&max).map(|(lo, hi)| lo == hi).collect();
        Ok(Self { min, max, degenerate })
    }

    pub fn len(&self) -> usize {
        self.min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }

    pub fn normalize(&self, values: &[T]) -> Vec<T> {
        values
            .iter()
            .enumerate()
            .map(|(c, &v)| {
                if self.degenerate[c] {
                    T::of(0.5)
                } else {
                    (v - self.min[c]) / (self.max[c] - self.min[c])
                }
            })
            .collect()
    }

    /// Inverse of [`normalize`](Self::normalize); degenerate components
    /// return their single observed value.
    pub fn denormalize(&self, values: &[T]) -> Vec<T> {
        values
            .iter()
            .enumerate()
            .map(|(c, &v)| self.denormalize_component(c, v))
            .collect()
    }

    pub fn denormalize_component(&self, c: usize, v: T) -> T {
        if self.degenerate[c] {
            self.min[c]
        } else {
            self.min[c] + v * (self.max[c] - self.min[c])
        }
    }

    /// Scale factor from normalized to raw units (1 for degenerate components).
    pub fn range(&self, c: usize) -> T {
        if self.degenerate[c] {
            T::one()
        } else {
            self.max[c] - self.min[c]
        }
    }
}

pub fn normalize_returns(samples: &[RolloutSample]) -> Result<(Vec<RolloutSample>, NormalizationSpec<f64>)> {
    let spec = NormalizationSpec::fit(samples.iter().map(|s| s.target.as_slice()))?;
    let normalized = samples
        .iter()
        .map(|s| RolloutSample {
            target: spec.normalize(&s.target),
            ..s.clone()
        })
        .collect();
    Ok((normalized, spec))
}

/// Everything a dataset file records besides its samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub normalization: NormalizationSpec<f64>,
    pub rollout: RolloutConfig,
    pub components: ComponentSet,
    pub action_space: ActionSpace,
    pub feature_mode: FeatureMode,
    pub feature_len: usize,
    pub policy: String,
}

/// Normalized training samples plus their header.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<RolloutSample>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: DatasetHeader,
}

impl Dataset {
    /// Normalizes raw-return samples and wraps them with a header.
    pub fn build(
        raw: &[RolloutSample],
        rollout: RolloutConfig,
        components: ComponentSet,
        action_space: ActionSpace,
        feature_mode: FeatureMode,
        policy: &str,
    ) -> Result<Self> {
        let (samples, normalization) = normalize_returns(raw)?;
        Ok(Self {
            header: DatasetHeader {
                normalization,
                rollout,
                components,
                action_space,
                feature_mode,
                feature_len: samples[0].features.len(),
                policy: policy.to_string(),
            },
            samples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = serde_json::to_vec(&HeaderLine {
            header: self.header.clone(),
        })?;
        out.push(b'\n');
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.push(b'\n');
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
            line,
            message: e.to_string(),
        };
        let header = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                serde_json::from_str::<HeaderLine>(&line).map_err(|e| parse_err(1, e))?.header
            }
            None => return Err(Error::Empty("dataset file")),
        };
        let mut samples = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e))?);
        }
        Ok(Self { header, samples })
    }
}
