use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{check_offset, check_weights, ActionSpace, ComponentSet, Env, StepOutcome};
use crate::error::{Error, Result};
use crate::trace::{CcLink, Trace, TraceKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CcConfig {
    pub history_len: usize,
    pub min_rate_mbps: f64,
    pub max_rate_mbps: f64,
    pub start_rate_mbps: f64,
    /// Reference capacity dividing delivered rate in the throughput component.
    pub bw_cap_ref_mbps: f64,
    pub packet_size_bytes: f64,
    /// Weights for (throughput, latency, loss).
    pub weights: [f64; 3],
}

impl Default for CcConfig {
    fn default() -> Self {
        Self {
            history_len: 8,
            min_rate_mbps: 0.1,
            max_rate_mbps: 50.0,
            start_rate_mbps: 1.0,
            bw_cap_ref_mbps: 10.0,
            packet_size_bytes: 1500.0,
            weights: [1.0, 1.0, 1.0],
        }
    }
}

impl CcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.history_len == 0 {
            return bad("history_len must be positive");
        }
        if !(self.min_rate_mbps > 0.0 && self.min_rate_mbps <= self.max_rate_mbps && self.max_rate_mbps.is_finite()) {
            return bad("rate bounds must satisfy 0 < min <= max");
        }
        if !(self.min_rate_mbps..=self.max_rate_mbps).contains(&self.start_rate_mbps) {
            return bad("start_rate_mbps must lie within the rate bounds");
        }
        if !(self.bw_cap_ref_mbps > 0.0 && self.packet_size_bytes > 0.0) {
            return bad("bw_cap_ref_mbps and packet_size_bytes must be positive");
        }
        check_weights(&self.weights)
    }
}

/// Observations of one monitor interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorRecord {
    pub sent_mbps: f64,
    pub delivered_mbps: f64,
    /// Measured RTT over base RTT, at least 1.
    pub latency_ratio: f64,
    pub loss: f64,
}

impl MonitorRecord {
    const EMPTY: MonitorRecord = MonitorRecord {
        sent_mbps: 0.0,
        delivered_mbps: 0.0,
        latency_ratio: 1.0,
        loss: 0.0,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcState {
    /// Last `k` monitor intervals, oldest first.
    pub history: VecDeque<MonitorRecord>,
    pub rate_mbps: f64,
    pub cursor_s: f64,
}

impl CcState {
    pub fn last(&self) -> &MonitorRecord {
        self.history.back().expect("history is never empty")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CcEnv {
    config: Arc<CcConfig>,
    components: ComponentSet,
    trace: Arc<Trace>,
    link: CcLink,
    state: CcState,
    queue_mb: f64,
    /// Number of real intervals observed since reset (capped at `k`).
    observed: usize,
    done: bool,
}

impl CcEnv {
    pub fn reset(trace: Arc<Trace>, config: Arc<CcConfig>) -> Result<Self> {
        config.validate()?;
        trace.validate()?;
        let link = trace.link.ok_or_else(|| Error::InvalidTrace {
            id: trace.id.clone(),
            reason: "missing cc link parameters".into(),
        })?;
        Ok(Self {
            components: ComponentSet::cc(config.weights),
            state: CcState {
                history: std::iter::repeat_n(MonitorRecord::EMPTY, config.history_len).collect(),
                rate_mbps: config.start_rate_mbps,
                cursor_s: 0.0,
            },
            config,
            trace,
            link,
            queue_mb: 0.0,
            observed: 0,
            done: false,
        })
    }

    pub fn config(&self) -> &CcConfig {
        &self.config
    }

    pub fn link(&self) -> &CcLink {
        &self.link
    }

    /// Monitor interval length in seconds (one base RTT).
    pub fn interval_s(&self) -> f64 {
        self.link.base_rtt_ms / 1000.0
    }

    pub fn queue_mb(&self) -> f64 {
        self.queue_mb
    }

    pub fn queue_capacity_mb(&self) -> f64 {
        self.link.queue_pkts as f64 * self.config.packet_size_bytes * 8.0 / 1e6
    }

    /// Overrides the sending rate; intended for constructing scenarios.
    pub fn set_rate(&mut self, rate_mbps: f64) -> Result<()> {
        if !(self.config.min_rate_mbps..=self.config.max_rate_mbps).contains(&rate_mbps) {
            return Err(Error::InvalidConfig(format!("rate {rate_mbps} outside bounds")));
        }
        self.state.rate_mbps = rate_mbps;
        Ok(())
    }
}

impl Env for CcEnv {
    type State = CcState;
    type Action = f64;

    fn components(&self) -> &ComponentSet {
        &self.components
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous { low: -1.0, high: 1.0 }
    }

    fn state(&self) -> &CcState {
        &self.state
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn step(&mut self, delta: f64) -> Result<StepOutcome<CcState>> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if !(-1.0..=1.0).contains(&delta) {
            return Err(Error::InvalidAction(format!("rate delta {delta} not in [-1, 1]")));
        }
        let cfg = &self.config;
        let interval = self.interval_s();
        let capacity = self.queue_capacity_mb();
        let bw = self.trace.bandwidth_at(self.state.cursor_s);

        let rate = (self.state.rate_mbps * (1.0 + delta)).clamp(cfg.min_rate_mbps, cfg.max_rate_mbps);
        let sent = rate * interval;
        let mut queue = (self.queue_mb + (rate - bw) * interval).max(0.0);
        let overflow = (queue - capacity).max(0.0);
        queue -= overflow;
        let loss = (overflow / sent + self.link.loss_rate).min(1.0);
        let delivered = rate.min(bw);
        let latency_ratio = 1.0 + queue / (bw * interval);

        self.queue_mb = queue;
        let st = &mut self.state;
        st.rate_mbps = rate;
        st.cursor_s += interval;
        st.history.pop_front();
        st.history.push_back(MonitorRecord {
            sent_mbps: rate,
            delivered_mbps: delivered,
            latency_ratio,
            loss,
        });
        self.observed = (self.observed + 1).min(cfg.history_len);

        let reward_components = vec![delivered / cfg.bw_cap_ref_mbps, -(latency_ratio - 1.0), -loss];
        let reward_total = self.components.weighted_sum(&reward_components);
        self.done = st.cursor_s >= self.trace.duration();
        Ok(StepOutcome {
            state: st.clone(),
            reward_components,
            reward_total,
            done: self.done,
        })
    }

    fn trace(&self) -> &Trace {
        &self.trace
    }

    fn cursor(&self) -> f64 {
        self.state.cursor_s
    }

    fn nominal_step_s(&self) -> f64 {
        self.interval_s()
    }

    fn graft_future(&self, trace: Arc<Trace>, offset: f64) -> Result<Self> {
        if trace.kind != TraceKind::Cc {
            return Err(Error::KindMismatch {
                expected: TraceKind::Cc.to_string(),
                found: trace.kind.to_string(),
            });
        }
        trace.validate()?;
        check_offset(&trace, offset)?;
        let mut env = self.clone();
        env.trace = trace;
        env.state.cursor_s = offset;
        env.done = false;
        Ok(env)
    }

    fn raw_features(&self, state: &CcState) -> Vec<f64> {
        let r_max = self.config.max_rate_mbps;
        let mut features = Vec::with_capacity(4 * state.history.len() + 1);
        for rec in &state.history {
            features.push(rec.sent_mbps / r_max);
            features.push(rec.delivered_mbps / r_max);
            features.push((rec.latency_ratio.clamp(1.0, 5.0) - 1.0) / 4.0);
            features.push(rec.loss);
        }
        features.push(state.rate_mbps / r_max);
        features
    }

    fn observed_throughputs(&self) -> Vec<f64> {
        let h = &self.state.history;
        h.iter().skip(h.len() - self.observed).map(|r| r.delivered_mbps).collect()
    }

    fn encode_action(&self, delta: f64) -> Vec<f64> {
        vec![delta]
    }

    fn action_from_f64(&self, value: f64) -> Result<f64> {
        if (-1.0..=1.0).contains(&value) {
            Ok(value)
        } else {
            Err(Error::InvalidAction(format!("rate delta {value} not in [-1, 1]")))
        }
    }

    fn action_to_f64(&self, delta: f64) -> f64 {
        delta
    }

    fn check_invariants(&self) -> Result<()> {
        self.config.validate()?;
        self.trace.validate()?;
        let st = &self.state;
        let bad = |m: String| Err(Error::CorruptedSnapshot(m));
        if st.history.len() != self.config.history_len || self.observed > self.config.history_len {
            return bad(format!("history length must be {}", self.config.history_len));
        }
        if !(self.config.min_rate_mbps..=self.config.max_rate_mbps).contains(&st.rate_mbps) {
            return bad(format!("rate {} out of bounds", st.rate_mbps));
        }
        for rec in &st.history {
            if !(0.0..=1.0).contains(&rec.loss) || !(rec.latency_ratio >= 1.0) {
                return bad("monitor record out of range".into());
            }
        }
        if !(self.queue_mb >= 0.0 && self.queue_mb <= self.queue_capacity_mb() + 1e-12) {
            return bad(format!("queue {} out of range", self.queue_mb));
        }
        if !(st.cursor_s.is_finite() && st.cursor_s >= 0.0) {
            return bad(format!("cursor {} invalid", st.cursor_s));
        }
        if self.components != ComponentSet::cc(self.config.weights) {
            return bad("component set does not match config".into());
        }
        Ok(())
    }
}
