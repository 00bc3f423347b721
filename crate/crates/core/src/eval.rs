//! Scoring explanations against held-out ground truth: fidelity, threshold
//! events, dominant components and query latency.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{snapshot, AbrEnv, ActionSpace, ComponentSet, Env};
use crate::error::{Error, Result};
use crate::policy::{featurize, FeatureMode, Policy};
use crate::predictor::PredictorModel;
use crate::rollout::{for_each_anchor, run_branch, substream, EnvFactory, NormalizationSpec, CONTINUOUS_GRID};
use crate::sampling::{distribution_aware_estimate, naive_estimate, ClusterModel, SamplerConfig, TracePool};
use crate::trace::TraceSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "predictor")]
    Predictor,
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "dist-aware")]
    DistributionAware,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Predictor, Method::Naive, Method::DistributionAware];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Predictor => "predictor",
            Method::Naive => "naive",
            Method::DistributionAware => "dist-aware",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryFlavor {
    Factual,
    Counterfactual,
}

impl fmt::Display for QueryFlavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryFlavor::Factual => "factual",
            QueryFlavor::Counterfactual => "counterfactual",
        })
    }
}

/// Per-component squared errors in normalized space. Components the
/// normalization marks degenerate are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityRecord {
    pub errors: Vec<Option<f64>>,
    pub flavor: QueryFlavor,
    pub method: Method,
}

/// Squared error of two raw-unit returns after mapping both through `spec`.
pub fn fidelity(predicted: &[f64], truth: &[f64], spec: &NormalizationSpec<f64>) -> Result<Vec<Option<f64>>> {
    if predicted.len() != spec.len() || truth.len() != spec.len() {
        return Err(Error::ComponentMismatch(format!(
            "{} predicted and {} true components for {} normalized ones",
            predicted.len(),
            truth.len(),
            spec.len()
        )));
    }
    let p = spec.normalize(predicted);
    let t = spec.normalize(truth);
    Ok((0..spec.len())
        .map(|c| (!spec.degenerate[c]).then(|| (p[c] - t[c]).powi(2)))
        .collect())
}

/// One held-out question: the anchor state, the action asked about and the
/// return actually realized after taking it.
#[derive(Clone, Debug)]
pub struct Query<E: Env> {
    pub env: E,
    pub features: Vec<f64>,
    pub action: E::Action,
    pub policy_action: E::Action,
    pub truth: Vec<f64>,
    pub flavor: QueryFlavor,
    pub trace: String,
    pub anchor: usize,
}

/// Alternatives asked about when the policy chose `chosen`.
pub fn counterfactual_actions<E: Env>(env: &E, chosen: E::Action) -> Result<Vec<E::Action>> {
    match env.action_space() {
        ActionSpace::Discrete { n } => (0..n)
            .map(|i| env.action_from_f64(i as f64))
            .filter(|a| a.as_ref().map_or(true, |a| *a != chosen))
            .collect(),
        ActionSpace::Continuous { .. } => {
            let v = env.action_to_f64(chosen);
            let mut nearest = 0;
            for (i, g) in CONTINUOUS_GRID.iter().enumerate() {
                if (g - v).abs() < (CONTINUOUS_GRID[nearest] - v).abs() {
                    nearest = i;
                }
            }
            CONTINUOUS_GRID
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != nearest)
                .map(|(_, &g)| env.action_from_f64(g))
                .collect()
        }
    }
}

/// Where to anchor queries and how to score them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryPlan {
    pub spacing: usize,
    pub gamma: f64,
    pub t_max: usize,
    pub mode: FeatureMode,
    pub flavor: QueryFlavor,
}

impl QueryPlan {
    pub fn new(rollout: &crate::rollout::RolloutConfig, mode: FeatureMode, flavor: QueryFlavor) -> Self {
        Self {
            spacing: rollout.spacing,
            gamma: rollout.gamma,
            t_max: rollout.t_max,
            mode,
            flavor,
        }
    }
}

/// Anchors of every held-out trace, placed exactly as during rollout
/// collection, with single-sample ground truth for each queried action.
pub fn build_queries<E, P>(
    holdout: &TraceSet,
    make_env: &EnvFactory<'_, E>,
    policy: &P,
    plan: QueryPlan,
) -> Result<Vec<Query<E>>>
where
    E: Env,
    P: Policy<E> + ?Sized,
{
    if holdout.is_empty() {
        return Err(Error::Empty("held-out traces"));
    }
    let QueryPlan { spacing, gamma, t_max, mode, flavor } = plan;
    let per_trace: Vec<Vec<Query<E>>> = holdout
        .traces
        .par_iter()
        .map(|trace| {
            let env = make_env(Arc::new(trace.clone()))?;
            let mut queries = Vec::new();
            for_each_anchor(env, policy, spacing, |env, step| {
                let chosen = policy.evaluate(env, env.state());
                let actions = match flavor {
                    QueryFlavor::Factual => vec![chosen],
                    QueryFlavor::Counterfactual => counterfactual_actions(env, chosen)?,
                };
                let features = featurize(env, policy, env.state(), mode)?.values;
                for action in actions {
                    let mut branch_env = env.clone();
                    let truth = run_branch(&mut branch_env, policy, action, t_max)?.decomposed(gamma, t_max)?;
                    queries.push(Query {
                        env: env.clone(),
                        features: features.clone(),
                        action,
                        policy_action: chosen,
                        truth: truth.values,
                        flavor,
                        trace: trace.id.clone(),
                        anchor: step,
                    });
                }
                Ok(())
            })?;
            Ok(queries)
        })
        .collect::<Result<_>>()?;
    Ok(per_trace.into_iter().flatten().collect())
}

/// Something that predicts raw-unit decomposed returns for a query.
pub trait Estimator<E: Env>: Sync {
    fn method(&self) -> Method;
    /// `index` identifies the query for seeding stochastic estimators.
    fn estimate(&self, query: &Query<E>, index: usize) -> Result<Vec<f64>>;
}

pub struct PredictorEstimator<'a> {
    pub model: &'a PredictorModel<f64>,
}

impl<E: Env> Estimator<E> for PredictorEstimator<'_> {
    fn method(&self) -> Method {
        Method::Predictor
    }

    fn estimate(&self, query: &Query<E>, _: usize) -> Result<Vec<f64>> {
        Ok(self.model.predict(&query.features, &query.env.encode_action(query.action))?.means())
    }
}

pub struct SamplerEstimator<'a, P: ?Sized> {
    pub policy: &'a P,
    pub pool: &'a TracePool,
    /// `None` samples uniformly; `Some` conditions on the nearest cluster.
    pub clusters: Option<&'a ClusterModel>,
    pub config: SamplerConfig,
}

impl<P: ?Sized> SamplerEstimator<'_, P> {
    fn config_for(&self, index: usize) -> SamplerConfig {
        SamplerConfig {
            seed: substream(self.config.seed, index as u64).gen(),
            ..self.config.clone()
        }
    }
}

impl<E: Env, P: Policy<E> + ?Sized> Estimator<E> for SamplerEstimator<'_, P> {
    fn method(&self) -> Method {
        if self.clusters.is_some() {
            Method::DistributionAware
        } else {
            Method::Naive
        }
    }

    fn estimate(&self, query: &Query<E>, index: usize) -> Result<Vec<f64>> {
        let snap = snapshot(&query.env);
        let cfg = self.config_for(index);
        let est = match self.clusters {
            None => naive_estimate(&snap, self.policy, self.pool, query.action, &cfg)?,
            Some(model) => distribution_aware_estimate(&snap, self.policy, model, self.pool, query.action, &cfg)?,
        };
        Ok(est.mean.values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

/// Linearly interpolated quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            p25: quantile(&sorted, 0.25),
            p50: quantile(&sorted, 0.5),
            p75: quantile(&sorted, 0.75),
            p95: quantile(&sorted, 0.95),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub component: String,
    /// `None` when the component is degenerate.
    pub quantiles: Option<Quantiles>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub flavor: QueryFlavor,
    pub queries: usize,
    pub summary: Vec<ComponentSummary>,
    #[serde(skip)]
    pub records: Vec<FidelityRecord>,
}

impl MethodReport {
    pub fn median(&self, component: usize) -> Option<f64> {
        self.summary[component].quantiles.map(|q| q.p50)
    }
}

/// Scores `estimator` on every query.
pub fn evaluate_method<E: Env, X: Estimator<E> + ?Sized>(
    estimator: &X,
    queries: &[Query<E>],
    components: &ComponentSet,
    spec: &NormalizationSpec<f64>,
) -> Result<MethodReport> {
    let flavor = queries.first().ok_or(Error::Empty("queries"))?.flavor;
    let records: Vec<FidelityRecord> = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let predicted = estimator.estimate(q, i)?;
            Ok(FidelityRecord {
                errors: fidelity(&predicted, &q.truth, spec)?,
                flavor: q.flavor,
                method: estimator.method(),
            })
        })
        .collect::<Result<_>>()?;
    let summary = components
        .names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let errs: Vec<f64> = records.iter().filter_map(|r| r.errors[c]).collect();
            ComponentSummary {
                component: name.clone(),
                quantiles: Quantiles::of(&errs),
            }
        })
        .collect();
    Ok(MethodReport {
        method: estimator.method(),
        flavor,
        queries: records.len(),
        summary,
        records,
    })
}

/// Writes `method,component,flavor,sq_error` rows, one per query and
/// component. Degenerate components leave `sq_error` empty.
pub fn write_fidelity_csv<W: Write>(out: &mut W, components: &ComponentSet, records: &[FidelityRecord], header: bool) -> Result<()> {
    let io = |e| Error::io("fidelity csv", e);
    if header {
        writeln!(out, "method,component,flavor,sq_error").map_err(io)?;
    }
    for r in records {
        for (name, e) in components.names.iter().zip(&r.errors) {
            let value = e.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", r.method, name, r.flavor, value).map_err(io)?;
        }
    }
    Ok(())
}

/// Tab-separated `lo hi count` rows over `bins` equal-width bins, for plotting.
pub fn histogram_table(values: &[f64], bins: usize) -> String {
    let mut out = String::from("# lo\thi\tcount\n");
    if values.is_empty() || bins == 0 {
        return out;
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    for (i, c) in counts.iter().enumerate() {
        let a = lo + i as f64 * width;
        out.push_str(&format!("{a}\t{}\t{c}\n", a + width));
    }
    out
}

/// Event boundaries, one per component: an event fires when the scaled
/// return is strictly below its threshold.
///
/// Returns are compared after scaling by `(1 - gamma) / (1 - gamma^t_max)`,
/// which turns a truncated discounted sum into a discount-weighted per-step
/// average, so thresholds read in per-step reward units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSpec {
    pub thresholds: Vec<f64>,
}

impl ThresholdSpec {
    pub fn abr_default() -> Self {
        Self {
            thresholds: vec![0.55, -0.1, -0.25],
        }
    }

    pub fn cc_default() -> Self {
        Self {
            thresholds: vec![0.3, -0.075, -0.1],
        }
    }

    /// Per-step scaling factor for a horizon.
    pub fn scale(gamma: f64, t_max: usize) -> f64 {
        if gamma == 1.0 {
            1.0 / t_max as f64
        } else {
            (1.0 - gamma) / (1.0 - gamma.powi(t_max as i32))
        }
    }

    /// Flags for raw-unit truncated returns.
    pub fn flags(&self, returns: &[f64], gamma: f64, t_max: usize) -> Result<Vec<bool>> {
        let k = Self::scale(gamma, t_max);
        let scaled: Vec<f64> = returns.iter().map(|r| r * k).collect();
        detect_events(&scaled, self)
    }
}

/// `value_c < threshold_c` for every component.
pub fn detect_events(values: &[f64], spec: &ThresholdSpec) -> Result<Vec<bool>> {
    if values.len() != spec.thresholds.len() {
        return Err(Error::ComponentMismatch(format!(
            "{} values for {} thresholds",
            values.len(),
            spec.thresholds.len()
        )));
    }
    Ok(values.iter().zip(&spec.thresholds).map(|(v, t)| v < t).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub recall: f64,
    pub fpr: f64,
}

pub fn event_metrics(predicted: &[bool], truth: &[bool]) -> Result<EventMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    let mut m = EventMetrics::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, false) => m.tn += 1,
            (false, true) => m.fn_ += 1,
        }
    }
    m.recall = if m.tp + m.fn_ == 0 { 1.0 } else { m.tp as f64 / (m.tp + m.fn_) as f64 };
    m.fpr = if m.fp + m.tn == 0 { 0.0 } else { m.fp as f64 / (m.fp + m.tn) as f64 };
    Ok(m)
}

/// Per-component metrics over rows of per-query flags.
pub fn component_event_metrics(predicted: &[Vec<bool>], truth: &[Vec<bool>], components: usize) -> Result<Vec<EventMetrics>> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    (0..components)
        .map(|c| {
            let p: Vec<bool> = predicted.iter().map(|r| r[c]).collect();
            let t: Vec<bool> = truth.iter().map(|r| r[c]).collect();
            event_metrics(&p, &t)
        })
        .collect()
}

/// Component with the largest absolute difference in weighted contribution
/// between two return vectors; the first wins ties.
pub fn dominant_component_values(a: &[f64], b: &[f64], weights: &[f64]) -> Result<usize> {
    if a.len() != b.len() || a.len() != weights.len() || a.is_empty() {
        return Err(Error::ComponentMismatch(format!(
            "{} vs {} components with {} weights",
            a.len(),
            b.len(),
            weights.len()
        )));
    }
    let mut best = 0;
    let mut best_diff = f64::NEG_INFINITY;
    for c in 0..a.len() {
        let d = (weights[c] * a[c] - weights[c] * b[c]).abs();
        if d > best_diff {
            best = c;
            best_diff = d;
        }
    }
    Ok(best)
}

pub fn dominant_component(a: &crate::predictor::Explanation, b: &crate::predictor::Explanation) -> Result<usize> {
    if a.components != b.components {
        return Err(Error::ComponentMismatch("explanations use different component sets".into()));
    }
    dominant_component_values(&a.means(), &b.means(), &a.components.weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
}

pub const LATENCY_WARMUP: usize = 10;

/// Times `n` calls of `f` after [`LATENCY_WARMUP`] untimed ones.
pub fn latency_benchmark<R>(mut f: impl FnMut(usize) -> R, n: usize) -> Result<LatencyStats> {
    if n < 1 {
        return Err(Error::InvalidConfig("latency benchmark needs at least one query".into()));
    }
    for i in 0..LATENCY_WARMUP {
        std::hint::black_box(f(i));
    }
    let mut times = Vec::with_capacity(n);
    for i in 0..n {
        let start = Instant::now();
        std::hint::black_box(f(i));
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let q = Quantiles::of(&times).expect("non-empty");
    Ok(LatencyStats {
        n,
        p50_ms: q.p50,
        p95_ms: q.p95,
        mean_ms: times.iter().sum::<f64>() / n as f64,
    })
}

/// Result of explaining every bitrate drop of an ABR policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropAnalysis {
    pub stall_weight: f64,
    pub steps: usize,
    pub drop_states: usize,
    /// How often each component dominated the drop-versus-steady comparison.
    pub dominant_counts: Vec<usize>,
}

impl DropAnalysis {
    pub fn share(&self, component: usize) -> f64 {
        if self.drop_states == 0 {
            0.0
        } else {
            self.dominant_counts[component] as f64 / self.drop_states as f64
        }
    }
}

/// Walks every trace under `policy`. At each step where the policy lowers
/// the bitrate, compares the explanation of its action with
/// that of keeping the previous bitrate.
pub fn analyze_drops<P: Policy<AbrEnv> + ?Sized>(
    traces: &TraceSet,
    make_env: &EnvFactory<'_, AbrEnv>,
    policy: &P,
    explain: &(dyn Fn(&AbrEnv, usize) -> Result<Vec<f64>> + Sync),
) -> Result<DropAnalysis> {
    let per_trace: Vec<(usize, Vec<usize>)> = traces
        .traces
        .par_iter()
        .map(|trace| {
            let env = make_env(Arc::new(trace.clone()))?;
            let weights = env.components().weights.clone();
            let mut steps = 0;
            let mut dominant = Vec::new();
            for_each_anchor(env, policy, 1, |env, _| {
                steps += 1;
                let chosen = policy.evaluate(env, env.state());
                let steady = env.state().last_quality;
                if chosen < steady {
                    let a = explain(env, chosen)?;
                    let b = explain(env, steady)?;
                    dominant.push(dominant_component_values(&a, &b, &weights)?);
                }
                Ok(())
            })?;
            Ok((steps, dominant))
        })
        .collect::<Result<_>>()?;
    let stall_weight = make_env(Arc::new(traces.traces.first().ok_or(Error::Empty("traces"))?.clone()))?
        .components()
        .weights[2];
    let mut counts = vec![0; 3];
    let mut steps = 0;
    let mut drops = 0;
    for (s, d) in per_trace {
        steps += s;
        drops += d.len();
        d.into_iter().for_each(|c| counts[c] += 1);
    }
    Ok(DropAnalysis {
        stall_weight,
        steps,
        drop_states: drops,
        dominant_counts: counts,
    })
}
