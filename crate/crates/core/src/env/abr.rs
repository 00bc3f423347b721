use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{check_offset, check_weights, ActionSpace, ComponentSet, Env, StepOutcome};
use crate::error::{Error, Result};
use crate::trace::Trace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbrConfig {
    /// Chunk size in megabits for each quality level, lowest first.
    pub chunk_sizes_mb: Vec<f64>,
    pub chunk_duration_s: f64,
    pub buffer_max_s: f64,
    pub history_len: usize,
    /// Weights for (quality, quality_change, stalling).
    pub weights: [f64; 3],
}

impl Default for AbrConfig {
    fn default() -> Self {
        Self {
            chunk_sizes_mb: vec![1.0, 2.5, 5.0, 8.0, 16.0],
            chunk_duration_s: 4.0,
            buffer_max_s: 15.0,
            history_len: 8,
            weights: [1.0, 1.0, 4.0],
        }
    }
}

impl AbrConfig {
    pub fn levels(&self) -> usize {
        self.chunk_sizes_mb.len()
    }

    /// Normalized quality of level `index`, in [0, 1].
    pub fn quality(&self, index: usize) -> f64 {
        let top = self.levels() - 1;
        if top == 0 {
            1.0
        } else {
            index as f64 / top as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.chunk_sizes_mb.is_empty() {
            return bad("chunk_sizes_mb must not be empty");
        }
        if self.chunk_sizes_mb.iter().any(|&c| !(c.is_finite() && c > 0.0)) {
            return bad("chunk sizes must be positive");
        }
        if !(self.chunk_duration_s > 0.0) {
            return bad("chunk_duration_s must be positive");
        }
        if !(self.buffer_max_s >= self.chunk_duration_s) {
            return bad("buffer_max_s must hold at least one chunk");
        }
        if self.history_len == 0 {
            return bad("history_len must be positive");
        }
        check_weights(&self.weights)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbrState {
    /// Sizes of the last `k` downloaded chunks (Mb), oldest first, zero padded.
    pub chunk_sizes_mb: Vec<f64>,
    /// Matching transmission times in seconds.
    pub transmission_times_s: Vec<f64>,
    pub buffer_s: f64,
    pub last_quality: usize,
    pub cursor_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AbrEnv {
    config: Arc<AbrConfig>,
    components: ComponentSet,
    trace: Arc<Trace>,
    state: AbrState,
    done: bool,
}

impl AbrEnv {
    /// Starts an episode on `trace`. Traces of either kind are accepted; link
    /// parameters are ignored.
    pub fn reset(trace: Arc<Trace>, config: Arc<AbrConfig>) -> Result<Self> {
        config.validate()?;
        trace.validate()?;
        let smallest = config.chunk_sizes_mb.iter().cloned().fold(f64::INFINITY, f64::min);
        if trace.transfer_time(0.0, smallest) > trace.duration() {
            return Err(Error::InvalidTrace {
                id: trace.id.clone(),
                reason: "shorter than one chunk download at the lowest quality".into(),
            });
        }
        let k = config.history_len;
        Ok(Self {
            components: ComponentSet::abr(config.weights),
            state: AbrState {
                chunk_sizes_mb: vec![0.0; k],
                transmission_times_s: vec![0.0; k],
                buffer_s: 0.0,
                last_quality: 0,
                cursor_s: 0.0,
            },
            config,
            trace,
            done: false,
        })
    }

    pub fn config(&self) -> &AbrConfig {
        &self.config
    }

    /// Overrides the playback buffer; intended for constructing scenarios.
    pub fn set_buffer(&mut self, buffer_s: f64) -> Result<()> {
        if !(0.0..=self.config.buffer_max_s).contains(&buffer_s) {
            return Err(Error::InvalidConfig(format!("buffer {buffer_s} outside [0, B_max]")));
        }
        self.state.buffer_s = buffer_s;
        Ok(())
    }
}

fn push_window(window: &mut [f64], value: f64) {
    window.rotate_left(1);
    if let Some(last) = window.last_mut() {
        *last = value;
    }
}

impl Env for AbrEnv {
    type State = AbrState;
    type Action = usize;

    fn components(&self) -> &ComponentSet {
        &self.components
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete {
            n: self.config.levels(),
        }
    }

    fn state(&self) -> &AbrState {
        &self.state
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome<AbrState>> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let levels = self.config.levels();
        if action >= levels {
            return Err(Error::InvalidAction(format!("quality index {action} not in [0, {levels})")));
        }
        let cfg = &self.config;
        let size = cfg.chunk_sizes_mb[action];
        let st = &mut self.state;

        let download = self.trace.transfer_time(st.cursor_s, size);
        let stall = (download - st.buffer_s).max(0.0);
        let filled = (st.buffer_s - download).max(0.0) + cfg.chunk_duration_s;
        // the player idles until the buffer has room again
        let wait = (filled - cfg.buffer_max_s).max(0.0);
        st.buffer_s = filled.min(cfg.buffer_max_s);
        st.cursor_s += download + wait;

        let quality = cfg.quality(action);
        let change = -(quality - cfg.quality(st.last_quality)).abs();
        st.last_quality = action;
        push_window(&mut st.chunk_sizes_mb, size);
        push_window(&mut st.transmission_times_s, download);

        let reward_components = vec![quality, change, -stall];
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
        self.config.chunk_duration_s
    }

    fn graft_future(&self, trace: Arc<Trace>, offset: f64) -> Result<Self> {
        trace.validate()?;
        check_offset(&trace, offset)?;
        let mut env = self.clone();
        env.trace = trace;
        env.state.cursor_s = offset;
        env.done = false;
        Ok(env)
    }

    fn raw_features(&self, state: &AbrState) -> Vec<f64> {
        let cfg = &self.config;
        let top_chunk = cfg.chunk_sizes_mb.iter().cloned().fold(0.0, f64::max);
        let mut features = Vec::with_capacity(2 * cfg.history_len + 2);
        features.extend(state.chunk_sizes_mb.iter().map(|s| s / top_chunk));
        features.extend(state.transmission_times_s.iter().map(|t| (t / 10.0).min(1.0)));
        features.push(state.buffer_s / cfg.buffer_max_s);
        let top = cfg.levels().saturating_sub(1).max(1);
        features.push(state.last_quality as f64 / top as f64);
        features
    }

    fn observed_throughputs(&self) -> Vec<f64> {
        self.state
            .chunk_sizes_mb
            .iter()
            .zip(&self.state.transmission_times_s)
            .filter(|(_, &t)| t > 0.0)
            .map(|(s, t)| s / t)
            .collect()
    }

    fn encode_action(&self, action: usize) -> Vec<f64> {
        let mut one_hot = vec![0.0; self.config.levels()];
        if let Some(slot) = one_hot.get_mut(action) {
            *slot = 1.0;
        }
        one_hot
    }

    fn action_from_f64(&self, value: f64) -> Result<usize> {
        let levels = self.config.levels();
        if value.fract() != 0.0 || value < 0.0 || value >= levels as f64 {
            return Err(Error::InvalidAction(format!("quality index {value} not in [0, {levels})")));
        }
        Ok(value as usize)
    }

    fn action_to_f64(&self, action: usize) -> f64 {
        action as f64
    }

    fn check_invariants(&self) -> Result<()> {
        self.config.validate()?;
        self.trace.validate()?;
        let st = &self.state;
        let k = self.config.history_len;
        let bad = |m: String| Err(Error::CorruptedSnapshot(m));
        if st.chunk_sizes_mb.len() != k || st.transmission_times_s.len() != k {
            return bad(format!("history length must be {k}"));
        }
        if !(0.0..=self.config.buffer_max_s).contains(&st.buffer_s) {
            return bad(format!("buffer {} out of range", st.buffer_s));
        }
        if st.last_quality >= self.config.levels() {
            return bad(format!("last quality {} out of range", st.last_quality));
        }
        if !(st.cursor_s.is_finite() && st.cursor_s >= 0.0) {
            return bad(format!("cursor {} invalid", st.cursor_s));
        }
        if self.components != ComponentSet::abr(self.config.weights) {
            return bad("component set does not match config".into());
        }
        Ok(())
    }
}
