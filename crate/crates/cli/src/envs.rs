//! Per-environment glue: factories, policy selection, alert thresholds and
//! chart series.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crystalbox::env::{AbrConfig, AbrEnv, CcConfig, CcEnv, Env};
use crystalbox::eval::ThresholdSpec;
use crystalbox::policy::{AimdPolicy, BufferBasedPolicy, ExternalPolicy, LookaheadPolicy, Policy};
use crystalbox::rollout::EnvFactory;
use crystalbox::trace::{CcTraceSpec, TraceKind};
use crystalbox::{Error, Result};
use serde::de::DeserializeOwned;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PolicyName {
    AbrBba,
    AbrLookahead,
    CcAimd,
    External,
}

pub type Factory<E> = Box<EnvFactory<'static, E>>;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub trait ToolEnv: Env + 'static {
    const KIND: TraceKind;

    fn factory(config: Option<&Path>) -> Result<Factory<Self>>;
    fn policy(name: Option<PolicyName>, file: Option<&Path>) -> Result<Arc<dyn Policy<Self>>>;
    fn thresholds() -> ThresholdSpec;
    fn trace_spec() -> CcTraceSpec;
    /// Scalar recorded every step so charts can show its recent history.
    fn gauge(&self) -> f64;
    fn history(&self, gauge: &[f64]) -> BTreeMap<String, Vec<f64>>;
}

fn external<E: Env>(file: Option<&Path>) -> Result<Arc<dyn Policy<E>>> {
    let file = file.ok_or_else(|| Error::InvalidConfig("--policy external needs --policy-file".into()))?;
    Ok(Arc::new(ExternalPolicy::load(file)?))
}

fn wrong_policy(name: PolicyName, kind: TraceKind) -> Error {
    Error::InvalidConfig(format!("policy {name:?} does not drive {kind} environments"))
}

impl ToolEnv for AbrEnv {
    const KIND: TraceKind = TraceKind::Abr;

    fn factory(config: Option<&Path>) -> Result<Factory<Self>> {
        let config: AbrConfig = config.map(read_json).transpose()?.unwrap_or_default();
        config.validate()?;
        let config = Arc::new(config);
        Ok(Box::new(move |t| AbrEnv::reset(t, config.clone())))
    }

    fn policy(name: Option<PolicyName>, file: Option<&Path>) -> Result<Arc<dyn Policy<Self>>> {
        match name.unwrap_or(PolicyName::AbrBba) {
            PolicyName::AbrBba => Ok(Arc::new(BufferBasedPolicy::default())),
            PolicyName::AbrLookahead => Ok(Arc::new(LookaheadPolicy::default())),
            PolicyName::External => external(file),
            other => Err(wrong_policy(other, Self::KIND)),
        }
    }

    fn thresholds() -> ThresholdSpec {
        ThresholdSpec::abr_default()
    }

    fn trace_spec() -> CcTraceSpec {
        CcTraceSpec::abr_desk()
    }

    fn gauge(&self) -> f64 {
        self.state().buffer_s
    }

    fn history(&self, gauge: &[f64]) -> BTreeMap<String, Vec<f64>> {
        let s = self.state();
        BTreeMap::from([
            ("chunk_sizes_mb".to_string(), s.chunk_sizes_mb.clone()),
            ("transmission_times_s".to_string(), s.transmission_times_s.clone()),
            ("buffer_s".to_string(), gauge.to_vec()),
        ])
    }
}

impl ToolEnv for CcEnv {
    const KIND: TraceKind = TraceKind::Cc;

    fn factory(config: Option<&Path>) -> Result<Factory<Self>> {
        let config: CcConfig = config.map(read_json).transpose()?.unwrap_or_default();
        config.validate()?;
        let config = Arc::new(config);
        Ok(Box::new(move |t| CcEnv::reset(t, config.clone())))
    }

    fn policy(name: Option<PolicyName>, file: Option<&Path>) -> Result<Arc<dyn Policy<Self>>> {
        match name.unwrap_or(PolicyName::CcAimd) {
            PolicyName::CcAimd => Ok(Arc::new(AimdPolicy::default())),
            PolicyName::External => external(file),
            other => Err(wrong_policy(other, Self::KIND)),
        }
    }

    fn thresholds() -> ThresholdSpec {
        ThresholdSpec::cc_default()
    }

    fn trace_spec() -> CcTraceSpec {
        CcTraceSpec::default()
    }

    fn gauge(&self) -> f64 {
        self.state().rate_mbps
    }

    fn history(&self, gauge: &[f64]) -> BTreeMap<String, Vec<f64>> {
        let h = &self.state().history;
        let series = |f: fn(&crystalbox::env::MonitorRecord) -> f64| h.iter().map(f).collect::<Vec<_>>();
        BTreeMap::from([
            ("rate_mbps".to_string(), gauge.to_vec()),
            ("delivered_mbps".to_string(), series(|r| r.delivered_mbps)),
            ("latency_ratio".to_string(), series(|r| r.latency_ratio)),
            ("loss".to_string(), series(|r| r.loss)),
        ])
    }
}
