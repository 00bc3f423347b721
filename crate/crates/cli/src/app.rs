//! `cbx` subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use crystalbox::env::AbrEnv;
use crystalbox::env::CcEnv;
use crystalbox::eval::{build_queries, evaluate_method, latency_benchmark, write_fidelity_csv, Estimator, Method, PredictorEstimator, QueryFlavor, QueryPlan, SamplerEstimator};
use crystalbox::policy::FeatureMode;
use crystalbox::predictor::{train, TrainConfig};
use crystalbox::rollout::{collect, Dataset, RolloutConfig, UniformExploration};
use crystalbox::sampling::{fit_clusters, SamplerConfig, TracePool};
use crystalbox::trace::{generate_traces, load_traces, split_holdout, CcTraceSpec, TraceKind, TraceSet};
use crystalbox::{Error, Predictor};
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::envs::{PolicyName, ToolEnv};
use crate::store::{SessionStore, StoreConfig, StoreError};

/// Failure with its process exit code: 1 for bad input, 2 for internal faults.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::EpisodeDone | Error::CorruptedSnapshot(_) | Error::NonFinite(_) | Error::Sampling(_) => 2,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        let code = if matches!(e, StoreError::Internal(_)) { 2 } else { 1 };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "cbx", version, about = "Decomposed future-return explanations for network controllers")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Abr,
    Cc,
}

impl From<Kind> for TraceKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Abr => TraceKind::Abr,
            Kind::Cc => TraceKind::Cc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Predictor,
    Naive,
    DistAware,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Predictor => Method::Predictor,
            MethodArg::Naive => Method::Naive,
            MethodArg::DistAware => Method::DistributionAware,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FlavorArg {
    Factual,
    Counterfactual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeatureArg {
    Raw,
    Embedding,
}

impl From<FeatureArg> for FeatureMode {
    fn from(f: FeatureArg) -> Self {
        match f {
            FeatureArg::Raw => FeatureMode::Raw,
            FeatureArg::Embedding => FeatureMode::Embedding,
        }
    }
}

/// Environment and policy selection shared by most subcommands.
#[derive(Args, Debug, Clone)]
pub struct EnvArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    /// Defaults to abr-bba or cc-aimd.
    #[arg(long, value_enum)]
    pub policy: Option<PolicyName>,
    /// Network file for `--policy external`.
    #[arg(long)]
    pub policy_file: Option<PathBuf>,
    /// JSON environment config overriding the defaults.
    #[arg(long)]
    pub env_config: Option<PathBuf>,
}

/// Anchor placement used to index held-out states.
#[derive(Args, Debug, Clone)]
pub struct AnchorArgs {
    #[arg(long, default_value_t = 5)]
    pub spacing: usize,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    #[arg(long, default_value_t = 5)]
    pub t_max: usize,
    #[arg(long, value_enum, default_value_t = FeatureArg::Raw)]
    pub feature_mode: FeatureArg,
}

/// Inputs for building a state index.
#[derive(Args, Debug, Clone)]
pub struct StoreArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub anchors: AnchorArgs,
    /// Held-out traces whose anchors are explained.
    #[arg(long)]
    pub holdout: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Training traces; required by the sampling methods.
    #[arg(long)]
    pub train_traces: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[arg(long, default_value_t = 20)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a trace set.
    GenTraces {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON generator spec overriding the defaults for the kind.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Split a trace set into training and held-out parts.
    Split {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        holdout_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        holdout_out: PathBuf,
    },
    /// Collect a training dataset of truncated decomposed returns.
    Rollout {
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long)]
        traces: PathBuf,
        /// JSON rollout config overriding the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FeatureArg::Raw)]
        feature_mode: FeatureArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train a predictor on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON training config overriding the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one method against held-out ground truth; writes CSV rows.
    Evaluate {
        #[command(flatten)]
        env: EnvArgs,
        #[command(flatten)]
        anchors: AnchorArgs,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        holdout: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train_traces: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FlavorArg::Factual)]
        flavor: FlavorArg,
        #[arg(long, default_value_t = 8)]
        clusters: usize,
        #[arg(long, default_value_t = 20)]
        n_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; standard output when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Explain one action in one held-out state.
    Explain {
        #[command(flatten)]
        store: StoreArgs,
        /// Defaults to the first trace.
        #[arg(long)]
        trace_id: Option<String>,
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Defaults to the policy's own action.
        #[arg(long, allow_hyphen_values = true)]
        action: Option<f64>,
        #[arg(long, value_enum, default_value_t = MethodArg::Predictor)]
        method: MethodArg,
    },
    /// Time every available method on held-out states.
    Bench {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long, default_value_t = 50)]
        n: usize,
    },
    /// Serve the state index and explanations over HTTP.
    Serve {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", path.display())))
}

fn print(json: bool, value: serde_json::Value, text: impl FnOnce() -> String) {
    if json {
        println!("{value}");
    } else {
        println!("{}", text());
    }
}

pub fn run(cli: Cli) -> CliResult {
    let json = cli.json;
    match cli.command {
        Command::GenTraces { kind, n, seed, spec, out } => {
            let spec: CcTraceSpec = match spec {
                Some(p) => read_json(&p)?,
                None => match kind {
                    Kind::Abr => AbrEnv::trace_spec(),
                    Kind::Cc => CcEnv::trace_spec(),
                },
            };
            let set = generate_traces(&spec, kind.into(), n, seed)?;
            set.save(&out)?;
            print(json, json!({ "traces": set.len(), "out": out }), || format!("wrote {} traces to {}", set.len(), out.display()));
        }
        Command::Split { kind, input, holdout_fraction, seed, train_out, holdout_out } => {
            let set = load_traces(&input, kind.into())?;
            let (train, holdout) = split_holdout(&set, holdout_fraction, seed)?;
            train.save(&train_out)?;
            holdout.save(&holdout_out)?;
            print(json, json!({ "train": train.len(), "holdout": holdout.len() }), || {
                format!("{} training traces, {} held out", train.len(), holdout.len())
            });
        }
        Command::Rollout { env, traces, config, feature_mode, seed, out } => {
            let rollout = RolloutConfig {
                seed,
                ..config.map(|p| read_json(&p)).transpose()?.unwrap_or_default()
            };
            let n = match env.kind {
                Kind::Abr => rollout_for::<AbrEnv>(&env, &traces, rollout, feature_mode.into(), &out)?,
                Kind::Cc => rollout_for::<CcEnv>(&env, &traces, rollout, feature_mode.into(), &out)?,
            };
            print(json, json!({ "samples": n, "out": out }), || format!("wrote {n} samples to {}", out.display()));
        }
        Command::Train { data, config, epochs, seed, out } => {
            let dataset = Dataset::load(&data)?;
            let mut config: TrainConfig = config.map(|p| read_json(&p)).transpose()?.unwrap_or_default();
            config.seed = seed;
            if let Some(e) = epochs {
                config.stage1_epochs = e;
            }
            let (model, report) = train::<f64>(&dataset, config)?;
            model.save(&out)?;
            let last = |v: &[f64]| v.last().copied();
            print(
                json,
                json!({ "samples": dataset.samples.len(), "stage1_loss": last(&report.stage1), "stage2_loss": last(&report.stage2), "out": out }),
                || format!("trained on {} samples, final loss {:?} / {:?}", dataset.samples.len(), last(&report.stage1), last(&report.stage2)),
            );
        }
        Command::Evaluate { env, anchors, method, holdout, model, train_traces, flavor, clusters, n_samples, seed, out } => {
            let args = EvalArgs { anchors, method: method.into(), holdout, model, train_traces, flavor, clusters, n_samples, seed, out, json };
            match env.kind {
                Kind::Abr => evaluate_for::<AbrEnv>(&env, args)?,
                Kind::Cc => evaluate_for::<CcEnv>(&env, args)?,
            }
        }
        Command::Explain { store, trace_id, step, action, method } => match store.env.kind {
            Kind::Abr => explain_for::<AbrEnv>(&store, trace_id, step, action, method.into(), json)?,
            Kind::Cc => explain_for::<CcEnv>(&store, trace_id, step, action, method.into(), json)?,
        },
        Command::Bench { store, n } => match store.env.kind {
            Kind::Abr => bench_for::<AbrEnv>(&store, n, json)?,
            Kind::Cc => bench_for::<CcEnv>(&store, n, json)?,
        },
        Command::Serve { store, bind } => {
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError { code: 2, message: e.to_string() })?;
            let result = match store.env.kind {
                Kind::Abr => runtime.block_on(crate::service::serve(build_store::<AbrEnv>(&store)?, &bind)),
                Kind::Cc => runtime.block_on(crate::service::serve(build_store::<CcEnv>(&store)?, &bind)),
            };
            result.map_err(|e| CliError::user(format!("serve on {bind}: {e}")))?;
        }
    }
    Ok(())
}

fn rollout_for<E: ToolEnv>(env: &EnvArgs, traces: &Path, rollout: RolloutConfig, mode: FeatureMode, out: &Path) -> CliResult<usize> {
    let set = load_traces(traces, E::KIND)?;
    let make_env = E::factory(env.env_config.as_deref())?;
    let policy = E::policy(env.policy, env.policy_file.as_deref())?;
    let raw = collect(&set, &*make_env, &*policy, &UniformExploration, &rollout, mode)?;
    let probe = make_env(std::sync::Arc::new(set.traces[0].clone()))?;
    let dataset = Dataset::build(&raw, rollout, probe.components().clone(), probe.action_space(), mode, policy.id())?;
    dataset.save(out)?;
    Ok(dataset.samples.len())
}

struct EvalArgs {
    anchors: AnchorArgs,
    method: Method,
    holdout: PathBuf,
    model: PathBuf,
    train_traces: Option<PathBuf>,
    flavor: FlavorArg,
    clusters: usize,
    n_samples: usize,
    seed: u64,
    out: Option<PathBuf>,
    json: bool,
}

fn load_train(path: Option<&Path>, kind: TraceKind, method: Method) -> CliResult<Option<TraceSet>> {
    match (path, method) {
        (Some(p), _) => Ok(Some(load_traces(p, kind)?)),
        (None, Method::Predictor) => Ok(None),
        (None, m) => Err(CliError::user(format!("method {m} needs --train-traces"))),
    }
}

fn evaluate_for<E: ToolEnv>(env: &EnvArgs, a: EvalArgs) -> CliResult {
    let holdout = load_traces(&a.holdout, E::KIND)?;
    let train_set = load_train(a.train_traces.as_deref(), E::KIND, a.method)?;
    let model = Predictor::load(&a.model)?;
    let make_env = E::factory(env.env_config.as_deref())?;
    let policy = E::policy(env.policy, env.policy_file.as_deref())?;
    let flavor = match a.flavor {
        FlavorArg::Factual => QueryFlavor::Factual,
        FlavorArg::Counterfactual => QueryFlavor::Counterfactual,
    };
    let plan = QueryPlan {
        spacing: a.anchors.spacing,
        gamma: a.anchors.gamma,
        t_max: a.anchors.t_max,
        mode: a.anchors.feature_mode.into(),
        flavor,
    };
    let queries = build_queries(&holdout, &*make_env, &*policy, plan)?;
    if queries.is_empty() {
        return Err(CliError::user("held-out traces produced no anchors"));
    }
    let pool = train_set.as_ref().map(TracePool::new);
    let clusters = match (&train_set, a.method) {
        (Some(t), Method::DistributionAware) => Some(fit_clusters(t, a.clusters.clamp(1, t.len()), a.seed)?),
        _ => None,
    };
    let sampler_config = SamplerConfig {
        n_samples: a.n_samples,
        gamma: a.anchors.gamma,
        t_max: a.anchors.t_max,
        seed: a.seed,
        ..SamplerConfig::default()
    };
    let predictor = PredictorEstimator { model: &model };
    let report = match (a.method, &pool) {
        (Method::Predictor, _) => evaluate_method(&predictor, &queries, &model.components, &model.normalization)?,
        (_, Some(pool)) => {
            let sampler = SamplerEstimator {
                policy: &*policy,
                pool,
                clusters: clusters.as_ref(),
                config: sampler_config,
            };
            evaluate_method(&sampler as &dyn Estimator<E>, &queries, &model.components, &model.normalization)?
        }
        (m, None) => return Err(CliError::user(format!("method {m} needs --train-traces"))),
    };
    let mut csv = Vec::new();
    write_fidelity_csv(&mut csv, &model.components, &report.records, true)?;
    match &a.out {
        Some(path) => fs::write(path, &csv).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?,
        None => std::io::stdout().write_all(&csv).map_err(|e| CliError { code: 2, message: e.to_string() })?,
    }
    if a.out.is_some() {
        let medians: Vec<Option<f64>> = (0..model.components.len()).map(|c| report.median(c)).collect();
        print(a.json, serde_json::to_value(&report).map_err(Error::from)?, || {
            let parts: Vec<String> = model
                .components
                .names
                .iter()
                .zip(&medians)
                .map(|(n, m)| format!("{n}={}", m.map_or("-".into(), |m| format!("{m:.3e}"))))
                .collect();
            format!("{} {} queries, median squared error {}", report.method, report.queries, parts.join(" "))
        });
    }
    Ok(())
}

fn build_store<E: ToolEnv>(args: &StoreArgs) -> CliResult<SessionStore<E>> {
    let holdout = load_traces(&args.holdout, E::KIND)?;
    let train_set = args.train_traces.as_deref().map(|p| load_traces(p, E::KIND)).transpose()?;
    let model = Predictor::load(&args.model)?;
    let make_env = E::factory(args.env.env_config.as_deref())?;
    let policy = E::policy(args.env.policy, args.env.policy_file.as_deref())?;
    let mut cfg = StoreConfig::new::<E>(args.seed);
    cfg.spacing = args.anchors.spacing;
    cfg.gamma = args.anchors.gamma;
    cfg.t_max = args.anchors.t_max;
    cfg.feature_mode = args.anchors.feature_mode.into();
    cfg.clusters = args.clusters;
    cfg.sampler.n_samples = args.n_samples;
    Ok(SessionStore::build(&holdout, train_set.as_ref(), &make_env, policy, model, cfg)?)
}

fn explain_for<E: ToolEnv>(args: &StoreArgs, trace_id: Option<String>, step: usize, action: Option<f64>, method: Method, json: bool) -> CliResult {
    let store = build_store::<E>(args)?;
    let trace_id = trace_id.unwrap_or_else(|| store.states[0].trace_id.clone());
    let state = store
        .states
        .iter()
        .find(|s| s.trace_id == trace_id && s.anchor == step)
        .ok_or_else(|| CliError::user(format!("no anchor at step {step} of trace {trace_id:?}")))?;
    let r = store.explain(state.id, action.unwrap_or(state.policy_action), method)?;
    print(json, serde_json::to_value(&r).map_err(Error::from)?, || {
        let mut lines = vec![format!("trace {trace_id} step {step} action {} ({})", r.action, r.method)];
        for (c, flag) in r.components.iter().zip(&r.flags) {
            lines.push(format!("  {:<16} {:>10.4} ± {:.4}{}", c.name, c.mean, c.std, if *flag { "  [event]" } else { "" }));
        }
        lines.push(format!("  {:<16} {:>10.4}", "total", r.total));
        lines.join("\n")
    });
    Ok(())
}

fn bench_for<E: ToolEnv>(args: &StoreArgs, n: usize, json: bool) -> CliResult {
    let store = build_store::<E>(args)?;
    let n = n.clamp(1, store.states.len());
    let mut results = Vec::new();
    for method in store.methods() {
        let stats = latency_benchmark(
            |i| {
                let s = &store.states[i % n];
                store.explain(s.id, s.policy_action, method)
            },
            n,
        )?;
        results.push((method, stats));
    }
    print(json, json!(results.iter().map(|(m, s)| json!({ "method": m, "latency": s })).collect::<Vec<_>>()), || {
        results
            .iter()
            .map(|(m, s)| format!("{m:<11} p50 {:.3} ms  p95 {:.3} ms  mean {:.3} ms", s.p50_ms, s.p95_ms, s.mean_ms))
            .collect::<Vec<_>>()
            .join("\n")
    });
    Ok(())
}
