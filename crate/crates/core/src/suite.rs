//! End-to-end evaluation run: synthesize traces, split, collect rollouts on
//! the training part, train the predictor, fit clusters, and score all
//! methods on the held-out part.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{AbrConfig, AbrEnv, ComponentSet, Env};
use crate::error::{Error, Result};
use crate::eval::{analyze_drops, DropAnalysis, build_queries, evaluate_method, latency_benchmark, LatencyStats, Method, MethodReport, PredictorEstimator, Query, QueryFlavor, QueryPlan, SamplerEstimator, Estimator};
use crate::policy::{featurize, FeatureMode, LookaheadPolicy, Policy};
use crate::predictor::{train, PredictorModel, TrainConfig, TrainReport};
use crate::rollout::{collect, Dataset, EnvFactory, RolloutConfig, UniformExploration};
use crate::sampling::{fit_clusters, ClusterModel, SamplerConfig, TracePool};
use crate::trace::{generate_traces, split_holdout, CcTraceSpec, TraceKind, TraceSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub n_traces: usize,
    pub holdout_fraction: f64,
    pub traces: CcTraceSpec,
    pub rollout: RolloutConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub clusters: usize,
    pub feature_mode: FeatureMode,
    /// Queries timed per method.
    pub latency_queries: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_traces: 200,
            holdout_fraction: 0.2,
            traces: CcTraceSpec::default(),
            rollout: RolloutConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            clusters: 8,
            feature_mode: FeatureMode::Raw,
            latency_queries: 50,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    /// Desk-scale defaults for one environment.
    pub fn for_kind(kind: TraceKind) -> Self {
        match kind {
            TraceKind::Abr => Self {
                traces: CcTraceSpec::abr_desk(),
                train: TrainConfig {
                    stage1_epochs: 100,
                    ..TrainConfig::default()
                },
                ..Self::default()
            },
            TraceKind::Cc => Self::default(),
        }
    }
}

/// Everything the methods are built from.
pub struct Artifacts {
    pub train_set: TraceSet,
    pub holdout: TraceSet,
    pub dataset: Dataset,
    pub model: PredictorModel<f64>,
    pub report: TrainReport,
    pub clusters: ClusterModel,
    pub pool: TracePool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteResult {
    pub components: ComponentSet,
    pub samples: usize,
    pub reports: Vec<MethodReport>,
    pub latency: Vec<(Method, LatencyStats)>,
}

impl SuiteResult {
    pub fn report(&self, method: Method, flavor: QueryFlavor) -> Option<&MethodReport> {
        self.reports.iter().find(|r| r.method == method && r.flavor == flavor)
    }

    pub fn latency(&self, method: Method) -> Option<&LatencyStats> {
        self.latency.iter().find(|(m, _)| *m == method).map(|(_, l)| l)
    }
}

/// Synthesizes traces and trains every method.
pub fn prepare<E, P>(cfg: &SuiteConfig, kind: TraceKind, make_env: &EnvFactory<'_, E>, policy: &P) -> Result<Artifacts>
where
    E: Env,
    P: Policy<E> + ?Sized,
{
    let all = generate_traces(&cfg.traces, kind, cfg.n_traces, cfg.seed)?;
    let (train_set, holdout) = split_holdout(&all, cfg.holdout_fraction, cfg.seed)?;
    let rollout = RolloutConfig {
        seed: cfg.seed,
        ..cfg.rollout.clone()
    };
    let raw = collect(&train_set, make_env, policy, &UniformExploration, &rollout, cfg.feature_mode)?;
    if raw.is_empty() {
        return Err(Error::Empty("rollout samples"));
    }
    let probe = make_env(std::sync::Arc::new(train_set.traces[0].clone()))?;
    let dataset = Dataset::build(&raw, rollout, probe.components().clone(), probe.action_space(), cfg.feature_mode, policy.id())?;
    let (model, report) = train::<f64>(&dataset, cfg.train.clone())?;
    let clusters = fit_clusters(&train_set, cfg.clusters.min(train_set.len()), cfg.seed)?;
    let pool = TracePool::new(&train_set);
    Ok(Artifacts {
        train_set,
        holdout,
        dataset,
        model,
        report,
        clusters,
        pool,
    })
}

/// Scores all methods under both query flavors and times them.
pub fn evaluate_all<E, P>(cfg: &SuiteConfig, art: &Artifacts, make_env: &EnvFactory<'_, E>, policy: &P) -> Result<SuiteResult>
where
    E: Env,
    P: Policy<E> + ?Sized,
{
    let predictor = PredictorEstimator { model: &art.model };
    let sampler = |clusters| SamplerEstimator {
        policy,
        pool: &art.pool,
        clusters,
        config: SamplerConfig {
            gamma: art.dataset.header.rollout.gamma,
            t_max: art.dataset.header.rollout.t_max,
            ..cfg.sampler.clone()
        },
    };
    let naive = sampler(None);
    let aware = sampler(Some(&art.clusters));
    let estimators: [&dyn Estimator<E>; 3] = [&predictor, &naive, &aware];

    let components = &art.dataset.header.components;
    let spec = &art.dataset.header.normalization;
    let mut reports = Vec::new();
    let mut factual: Vec<Query<E>> = Vec::new();
    for flavor in [QueryFlavor::Factual, QueryFlavor::Counterfactual] {
        let plan = QueryPlan::new(&art.dataset.header.rollout, cfg.feature_mode, flavor);
        let queries = build_queries(&art.holdout, make_env, policy, plan)?;
        for est in estimators {
            reports.push(evaluate_method(est, &queries, components, spec)?);
        }
        if flavor == QueryFlavor::Factual {
            factual = queries;
        }
    }

    let timed = &factual[..factual.len().min(cfg.latency_queries.max(1))];
    let mut latency = Vec::new();
    for est in estimators {
        let stats = latency_benchmark(|i| est.estimate(&timed[i % timed.len()], i), timed.len())?;
        latency.push((est.method(), stats));
    }
    Ok(SuiteResult {
        components: components.clone(),
        samples: art.dataset.samples.len(),
        reports,
        latency,
    })
}

pub fn run_suite<E, P>(cfg: &SuiteConfig, kind: TraceKind, make_env: &EnvFactory<'_, E>, policy: &P) -> Result<SuiteResult>
where
    E: Env,
    P: Policy<E> + ?Sized,
{
    let art = prepare(cfg, kind, make_env, policy)?;
    evaluate_all(cfg, &art, make_env, policy)
}

/// Stall-weight sweep over the weight-aware ABR policy. Each weight gets
/// its own rollouts and predictor; drop states on the held-out traces are
/// explained with that predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Stall weights, highest first.
    pub stall_weights: Vec<f64>,
    pub n_traces: usize,
    pub holdout_fraction: f64,
    pub traces: CcTraceSpec,
    pub rollout: RolloutConfig,
    pub train: TrainConfig,
    pub policy: LookaheadPolicy,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            stall_weights: vec![100.0, 25.0, 10.0],
            n_traces: 200,
            holdout_fraction: 0.5,
            traces: CcTraceSpec {
                duration_s: 400.0,
                ..CcTraceSpec::abr_desk()
            },
            rollout: RolloutConfig::default(),
            train: TrainConfig::default(),
            policy: LookaheadPolicy::default(),
            seed: 0,
        }
    }
}

pub fn stall_weight_sweep(cfg: &SweepConfig) -> Result<Vec<DropAnalysis>> {
    let all = generate_traces(&cfg.traces, TraceKind::Abr, cfg.n_traces, cfg.seed)?;
    let (train_set, holdout) = split_holdout(&all, cfg.holdout_fraction, cfg.seed)?;
    let rollout = RolloutConfig {
        seed: cfg.seed,
        ..cfg.rollout.clone()
    };
    let policy = &cfg.policy;
    let mut out = Vec::with_capacity(cfg.stall_weights.len());
    for &w in &cfg.stall_weights {
        let config = Arc::new(AbrConfig {
            weights: [1.0, 1.0, w],
            ..AbrConfig::default()
        });
        let make_env = |t| AbrEnv::reset(t, config.clone());
        let raw = collect(&train_set, &make_env, policy, &UniformExploration, &rollout, FeatureMode::Raw)?;
        let probe = make_env(Arc::new(train_set.traces[0].clone()))?;
        let dataset = Dataset::build(&raw, rollout.clone(), probe.components().clone(), probe.action_space(), FeatureMode::Raw, policy.id())?;
        let (model, _) = train::<f64>(&dataset, cfg.train.clone())?;
        let explain = |env: &AbrEnv, action: usize| {
            let features = featurize(env, policy, env.state(), FeatureMode::Raw)?;
            Ok(model.predict(&features.values, &env.encode_action(action))?.means())
        };
        out.push(analyze_drops(&holdout, &make_env, policy, &explain)?);
    }
    Ok(out)
}
