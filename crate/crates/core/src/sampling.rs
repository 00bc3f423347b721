//! Monte Carlo estimators that replace the unknown future with sampled
//! training traces: uniformly (naive) or from the cluster nearest to the
//! throughput the state has observed (distribution-aware).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{graft_future, Env, EnvSnapshot};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::rollout::{run_branch, substream, DecomposedReturn};
use crate::trace::{mean_cov, trace_stats, Trace, TraceSet};

/// Shared, cheaply cloned traces to graft from.
#[derive(Clone, Debug)]
pub struct TracePool {
    traces: Vec<Arc<Trace>>,
    index: BTreeMap<String, usize>,
}

impl TracePool {
    pub fn new(set: &TraceSet) -> Self {
        let traces: Vec<_> = set.traces.iter().cloned().map(Arc::new).collect();
        let index = traces.iter().enumerate().map(|(i, t)| (t.id.clone(), i)).collect();
        Self { traces, index }
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Arc<Trace>> {
        self.index.get(id).map(|&i| &self.traces[i])
    }

    pub fn traces(&self) -> &[Arc<Trace>] {
        &self.traces
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [f64; 2],
    /// Population standard deviation; features with zero spread use 1.
    pub std: [f64; 2],
}

impl Standardization {
    fn fit(points: &[[f64; 2]]) -> Self {
        let n = points.len() as f64;
        let mut mean = [0.0; 2];
        let mut std = [0.0; 2];
        for d in 0..2 {
            mean[d] = points.iter().map(|p| p[d]).sum::<f64>() / n;
            let var = points.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / n;
            std[d] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, point: [f64; 2]) -> [f64; 2] {
        [
            (point[0] - self.mean[0]) / self.std[0],
            (point[1] - self.mean[1]) / self.std[1],
        ]
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(centroids: &[[f64; 2]], p: [f64; 2]) -> usize {
    let mut best = 0;
    for (i, c) in centroids.iter().enumerate().skip(1) {
        if dist2(*c, p) < dist2(centroids[best], p) {
            best = i;
        }
    }
    best
}

/// k-means over standardized (mean, cov) bandwidth statistics of traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<[f64; 2]>,
    pub standardization: Standardization,
    /// Cluster of every training trace, keyed by trace id.
    pub assignments: BTreeMap<String, usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia_history: Vec<f64>,
}

pub const KMEANS_MAX_ITER: usize = 100;

pub fn fit_clusters(set: &TraceSet, k: usize, seed: u64) -> Result<ClusterModel> {
    if k < 1 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if k > set.len() {
        return Err(Error::InvalidConfig(format!("k = {k} exceeds {} traces", set.len())));
    }
    let raw: Vec<[f64; 2]> = set
        .traces
        .iter()
        .map(|t| trace_stats(t).map(|s| [s.mean_bw, s.cov_bw]))
        .collect::<Result<_>>()?;
    let standardization = Standardization::fit(&raw);
    let points: Vec<[f64; 2]> = raw.iter().map(|&p| standardization.apply(p)).collect();

    let mut rng = substream(seed, 0);
    let mut centroids = seed_centroids(&points, k, &mut rng);
    let mut labels = vec![usize::MAX; points.len()];
    let mut inertia_history = Vec::new();
    for iter in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        let mut inertia = 0.0;
        for (label, &p) in labels.iter_mut().zip(&points) {
            let c = nearest(&centroids, p);
            inertia += dist2(centroids[c], p);
            changed |= *label != c;
            *label = c;
        }
        inertia_history.push(inertia);
        if !changed || iter + 1 == KMEANS_MAX_ITER {
            break;
        }
        let mut sums = vec![[0.0; 2]; k];
        let mut counts = vec![0usize; k];
        for (&label, p) in labels.iter().zip(&points) {
            sums[label][0] += p[0];
            sums[label][1] += p[1];
            counts[label] += 1;
        }
        for ((c, s), &n) in centroids.iter_mut().zip(&sums).zip(&counts) {
            if n > 0 {
                *c = [s[0] / n as f64, s[1] / n as f64];
            }
        }
    }
    let assignments = set.traces.iter().zip(&labels).map(|(t, &l)| (t.id.clone(), l)).collect();
    Ok(ClusterModel {
        centroids,
        standardization,
        assignments,
        inertia_history,
    })
}

/// k-means++ seeding: each next centroid drawn with probability proportional
/// to squared distance from the nearest chosen one.
fn seed_centroids(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut chosen = vec![rng.gen_range(0..points.len())];
    while chosen.len() < k {
        let d: Vec<f64> = points
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                if chosen.contains(&i) {
                    0.0
                } else {
                    chosen.iter().map(|&c| dist2(points[c], p)).fold(f64::INFINITY, f64::min)
                }
            })
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if r < w {
                        break;
                    }
                    r -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // Remaining points coincide with chosen ones.
            let free: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
    }
    chosen.into_iter().map(|i| points[i]).collect()
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Cluster nearest to raw (mean, cov) statistics.
    pub fn nearest(&self, mean: f64, cov: f64) -> usize {
        nearest(&self.centroids, self.standardization.apply([mean, cov]))
    }

    pub fn members(&self, cluster: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &c)| c == cluster)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let model: Self = serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?;
        if model.centroids.is_empty() || model.assignments.values().any(|&c| c >= model.k()) {
            return Err(Error::Sampling("cluster model has invalid assignments".into()));
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_samples: usize,
    pub gamma: f64,
    pub t_max: usize,
    /// Recent steps summarized to pick a cluster.
    pub window: usize,
    pub seed: u64,
    /// Redraws allowed per sample when a trace is too short for the horizon.
    pub max_retries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_samples: 20,
            gamma: 0.9,
            t_max: 5,
            window: 4,
            seed: 0,
            max_retries: 16,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 1 || self.window < 1 || self.t_max < 1 {
            return Err(Error::InvalidConfig("n_samples, window and t_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// Averaged estimate together with the rollouts it was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: DecomposedReturn<f64>,
    pub individuals: Vec<Vec<f64>>,
    pub sampled: Vec<(String, f64)>,
}

fn estimate_from<E, P>(
    snap: &EnvSnapshot<E>,
    policy: &P,
    pool: &[&Arc<Trace>],
    action: E::Action,
    config: &SamplerConfig,
) -> Result<Estimate>
where
    E: Env,
    P: Policy<E> + ?Sized,
{
    config.validate()?;
    if pool.is_empty() {
        return Err(Error::Sampling("no traces to sample from".into()));
    }
    let horizon = config.t_max as f64 * snap.env().nominal_step_s();
    let draws = (0..config.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(config.seed, i as u64);
            for _ in 0..=config.max_retries {
                let trace = pool[rng.gen_range(0..pool.len())];
                let upper = trace.duration() - horizon;
                if upper < 0.0 {
                    continue;
                }
                let offset = if upper > 0.0 { rng.gen_range(0.0..upper) } else { 0.0 };
                let mut env = graft_future(snap, Arc::clone(trace), offset)?;
                let branch = run_branch(&mut env, policy, action, config.t_max)?;
                let ret = branch.decomposed(config.gamma, config.t_max)?;
                return Ok((ret.values, (trace.id.clone(), offset)));
            }
            Err(Error::Sampling(format!(
                "no trace long enough for a {horizon} s horizon after {} draws",
                config.max_retries + 1
            )))
        })
        .collect::<Result<Vec<_>>>()?;
    let (individuals, sampled): (Vec<_>, Vec<_>) = draws.into_iter().unzip();
    let n = individuals.len() as f64;
    let mut mean = vec![0.0; individuals[0].len()];
    for v in &individuals {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(Estimate {
        mean: DecomposedReturn {
            values: mean,
            gamma: config.gamma,
            t_max: config.t_max,
        },
        individuals,
        sampled,
    })
}

/// Averages rollouts over futures drawn uniformly from `pool`.
pub fn naive_estimate<E: Env, P: Policy<E> + ?Sized>(
    snap: &EnvSnapshot<E>,
    policy: &P,
    pool: &TracePool,
    action: E::Action,
    config: &SamplerConfig,
) -> Result<Estimate> {
    let all: Vec<&Arc<Trace>> = pool.traces.iter().collect();
    estimate_from(snap, policy, &all, action, config)
}

/// Cluster matching the throughput observed over the last `window` steps.
pub fn observed_cluster<E: Env>(env: &E, model: &ClusterModel, window: usize) -> Result<usize> {
    let observed = env.observed_throughputs();
    let recent = &observed[observed.len().saturating_sub(window)..];
    let (mean, cov) = mean_cov(recent).ok_or_else(|| Error::Sampling("state has no observed throughput yet".into()))?;
    Ok(model.nearest(mean, cov))
}

/// Like [`naive_estimate`], restricted to the cluster nearest to the state's
/// recent throughput. Empty clusters fall back to the nearest populated one.
/// A state that has observed nothing yet samples from the whole pool.
pub fn distribution_aware_estimate<E: Env, P: Policy<E> + ?Sized>(
    snap: &EnvSnapshot<E>,
    policy: &P,
    model: &ClusterModel,
    pool: &TracePool,
    action: E::Action,
    config: &SamplerConfig,
) -> Result<Estimate> {
    if snap.env().observed_throughputs().is_empty() {
        return naive_estimate(snap, policy, pool, action, config);
    }
    let target = observed_cluster(snap.env(), model, config.window)?;
    let centre = model.centroids[target];
    let mut order: Vec<usize> = (0..model.k()).collect();
    order.sort_by(|&a, &b| dist2(model.centroids[a], centre).total_cmp(&dist2(model.centroids[b], centre)));
    for cluster in order {
        let members: Vec<&Arc<Trace>> = model.members(cluster).into_iter().filter_map(|id| pool.get(id)).collect();
        if members.is_empty() {
            log::warn!("cluster {cluster} has no traces in the pool, trying the next nearest");
            continue;
        }
        return estimate_from(snap, policy, &members, action, config);
    }
    Err(Error::Sampling("no cluster has traces in the pool".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{snapshot, AbrConfig, AbrEnv, CcConfig, CcEnv};
    use crate::policy::{AimdPolicy, BufferBasedPolicy};
    use crate::trace::{generate_traces, CcTraceSpec, Provenance, TraceKind, TraceSample};

    fn constant(id: &str, bw: f64, secs: usize) -> Trace {
        Trace {
            id: id.into(),
            kind: TraceKind::Abr,
            samples: (0..secs)
                .map(|i| TraceSample {
                    t: i as f64,
                    bandwidth_mbps: bw,
                })
                .collect(),
            link: None,
        }
    }

    /// Two groups of 6 constant traces near 1 and 50 Mbps.
    fn two_groups() -> TraceSet {
        let mut traces = Vec::new();
        for (g, base) in [(0, 1.0), (1, 50.0)] {
            for i in 0..6 {
                traces.push(constant(&format!("g{g}-{i}"), base * (1.0 + 0.01 * i as f64), 200));
            }
        }
        TraceSet::new(TraceKind::Abr, Provenance::Synthetic, traces).unwrap()
    }

    fn abr_env_on(trace: &Trace) -> AbrEnv {
        AbrEnv::reset(Arc::new(trace.clone()), Arc::new(AbrConfig::default())).unwrap()
    }

    #[test]
    fn kmeans_basic_cases() {
        let set = two_groups();
        let one = fit_clusters(&set, 1, 0).unwrap();
        assert!(one.centroids[0][0].abs() < 1e-12 && one.centroids[0][1].abs() < 1e-12);

        let two = fit_clusters(&set, 2, 5).unwrap();
        let label = |id: &str| two.assignments[id];
        for i in 0..6 {
            assert_eq!(label(&format!("g0-{i}")), label("g0-0"));
            assert_eq!(label(&format!("g1-{i}")), label("g1-0"));
        }
        assert_ne!(label("g0-0"), label("g1-0"));

        let generated = generate_traces(&CcTraceSpec::default(), TraceKind::Abr, 9, 2).unwrap();
        let all = fit_clusters(&generated, 9, 1).unwrap();
        assert_eq!(*all.inertia_history.last().unwrap(), 0.0);
        assert!(fit_clusters(&set, 0, 0).is_err());
        assert!(fit_clusters(&set, 13, 0).is_err());
    }

    #[test]
    fn cluster_model_roundtrip() {
        let model = fit_clusters(&two_groups(), 2, 5).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        model.save(f.path()).unwrap();
        assert_eq!(ClusterModel::load(f.path()).unwrap(), model);
    }

    #[test]
    fn naive_single_sample_and_mean() {
        let set = generate_traces(&CcTraceSpec::default(), TraceKind::Abr, 6, 11).unwrap();
        let pool = TracePool::new(&set);
        let mut env = abr_env_on(&set.traces[0]);
        for _ in 0..3 {
            env.step(1).unwrap();
        }
        let snap = snapshot(&env);
        let p = BufferBasedPolicy::default();
        let cfg = SamplerConfig { n_samples: 1, seed: 4, ..SamplerConfig::default() };
        let est = naive_estimate(&snap, &p, &pool, 2, &cfg).unwrap();
        let (id, offset) = &est.sampled[0];
        let mut grafted = graft_future(&snap, pool.get(id).unwrap().clone(), *offset).unwrap();
        let expected = run_branch(&mut grafted, &p, 2, 5).unwrap().decomposed(0.9, 5).unwrap();
        assert_eq!(est.mean.values, expected.values);

        let cfg = SamplerConfig { n_samples: 7, ..cfg };
        let a = naive_estimate(&snap, &p, &pool, 2, &cfg).unwrap();
        assert_eq!(a, naive_estimate(&snap, &p, &pool, 2, &cfg).unwrap());
        for c in 0..3 {
            let m = a.individuals.iter().map(|v| v[c]).sum::<f64>() / 7.0;
            assert_eq!(a.mean.values[c], m);
        }
    }

    #[test]
    fn constant_pool_gives_deterministic_future() {
        let set = TraceSet::new(TraceKind::Abr, Provenance::Synthetic, vec![constant("c", 3.0, 300)]).unwrap();
        let pool = TracePool::new(&set);
        let mut env = abr_env_on(&set.traces[0]);
        env.step(0).unwrap();
        let snap = snapshot(&env);
        let p = BufferBasedPolicy::default();
        // Constant bandwidth: every offset sees the same future.
        let mut grafted = graft_future(&snap, pool.get("c").unwrap().clone(), 0.0).unwrap();
        let expected = run_branch(&mut grafted, &p, 3, 5).unwrap().decomposed(0.9, 5).unwrap();
        for n in [1, 5, 13] {
            let est = naive_estimate(&snap, &p, &pool, 3, &SamplerConfig { n_samples: n, ..Default::default() }).unwrap();
            for (a, b) in est.mean.values.iter().zip(&expected.values) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distribution_aware_picks_matching_group() {
        let set = two_groups();
        let pool = TracePool::new(&set);
        let model = fit_clusters(&set, 2, 5).unwrap();
        // The env observes ~2 Mbps: closest to the 1 Mbps group.
        let mut env = abr_env_on(&constant("obs", 2.0, 300));
        for _ in 0..10 {
            env.step(0).unwrap();
        }
        let snap = snapshot(&env);
        let cfg = SamplerConfig { n_samples: 30, window: 100, ..Default::default() };
        let est = distribution_aware_estimate(&snap, &BufferBasedPolicy::default(), &model, &pool, 1, &cfg).unwrap();
        assert!(est.sampled.iter().all(|(id, _)| id.starts_with("g0-")));

        // With one cluster it samples exactly like the naive estimator.
        let single = fit_clusters(&set, 1, 5).unwrap();
        let aware = distribution_aware_estimate(&snap, &BufferBasedPolicy::default(), &single, &pool, 1, &cfg).unwrap();
        let naive = naive_estimate(&snap, &BufferBasedPolicy::default(), &pool, 1, &cfg).unwrap();
        let ids = |e: &Estimate| e.sampled.iter().map(|(i, _)| i.clone()).collect::<std::collections::BTreeSet<_>>();
        assert!(ids(&aware).iter().any(|i| i.starts_with("g1-")));
        assert_eq!(aware.individuals.len(), naive.individuals.len());
    }

    #[test]
    fn fresh_state_without_history_samples_everything() {
        let set = two_groups();
        let model = fit_clusters(&set, 2, 5).unwrap();
        let pool = TracePool::new(&set);
        let env = abr_env_on(&set.traces[0]);
        assert!(matches!(observed_cluster(&env, &model, 4), Err(Error::Sampling(_))));
        let snap = snapshot(&env);
        let p = BufferBasedPolicy::default();
        let cfg = SamplerConfig::default();
        let aware = distribution_aware_estimate(&snap, &p, &model, &pool, 1, &cfg).unwrap();
        assert_eq!(aware, naive_estimate(&snap, &p, &pool, 1, &cfg).unwrap());
    }

    #[test]
    fn too_short_pool_errors() {
        let set = TraceSet::new(TraceKind::Abr, Provenance::Synthetic, vec![constant("short", 3.0, 5)]).unwrap();
        let env = abr_env_on(&constant("long", 3.0, 100));
        let err = naive_estimate(&snapshot(&env), &BufferBasedPolicy::default(), &TracePool::new(&set), 1, &SamplerConfig::default());
        assert!(matches!(err, Err(Error::Sampling(_))));
    }

    #[test]
    fn cc_estimators_run() {
        let set = generate_traces(&CcTraceSpec::default(), TraceKind::Cc, 8, 3).unwrap();
        let pool = TracePool::new(&set);
        let model = fit_clusters(&set, 3, 1).unwrap();
        let mut env = CcEnv::reset(Arc::new(set.traces[0].clone()), Arc::new(CcConfig::default())).unwrap();
        for _ in 0..6 {
            env.step(0.0).unwrap();
        }
        let snap = snapshot(&env);
        let est = distribution_aware_estimate(&snap, &AimdPolicy::default(), &model, &pool, 0.5, &SamplerConfig::default()).unwrap();
        assert_eq!(est.individuals.len(), 20);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn inertia_non_increasing(seed in 0u64..1000, k in 1usize..6) {
                let set = generate_traces(&CcTraceSpec::default(), TraceKind::Abr, 12, seed).unwrap();
                let model = fit_clusters(&set, k, seed).unwrap();
                for w in model.inertia_history.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-12);
                }
                for (id, &c) in &model.assignments {
                    let s = trace_stats(set.get(id).unwrap()).unwrap();
                    let p = model.standardization.apply([s.mean_bw, s.cov_bw]);
                    let d = dist2(model.centroids[c], p);
                    prop_assert!(model.centroids.iter().all(|&o| d <= dist2(o, p) + 1e-12));
                }
            }
        }
    }
}
