//! Exogenous network traces: loading, synthesis, summary statistics and
//! held-out splitting.
//!
//! A trace is a piecewise-constant bandwidth signal. Sample `i` holds from
//! its timestamp until the next sample; the final sample holds for the same
//! interval as the one before it (one second for single-sample traces).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    Abr,
    Cc,
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceKind::Abr => "abr",
            TraceKind::Cc => "cc",
        })
    }
}

impl std::str::FromStr for TraceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abr" => Ok(TraceKind::Abr),
            "cc" => Ok(TraceKind::Cc),
            other => Err(Error::InvalidConfig(format!("unknown trace kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    /// Seconds from trace start.
    pub t: f64,
    #[serde(rename = "bw_mbps")]
    pub bandwidth_mbps: f64,
}

/// Link parameters carried only by congestion-control traces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcLink {
    #[serde(rename = "base_rtt_ms")]
    pub base_rtt_ms: f64,
    #[serde(rename = "queue_pkts")]
    pub queue_pkts: u32,
    #[serde(rename = "loss_rate")]
    pub loss_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub id: String,
    pub kind: TraceKind,
    pub samples: Vec<TraceSample>,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub link: Option<CcLink>,
}

impl Trace {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidTrace {
            id: self.id.clone(),
            reason,
        };
        if self.samples.is_empty() {
            return Err(bad("no samples".into()));
        }
        let mut prev: Option<f64> = None;
        for (i, s) in self.samples.iter().enumerate() {
            if !(s.t.is_finite() && s.t >= 0.0) {
                return Err(bad(format!("sample {i}: negative or non-finite timestamp {}", s.t)));
            }
            if !(s.bandwidth_mbps.is_finite() && s.bandwidth_mbps > 0.0) {
                return Err(bad(format!(
                    "sample {i}: bandwidth must be positive, got {}",
                    s.bandwidth_mbps
                )));
            }
            if let Some(p) = prev {
                if s.t <= p {
                    return Err(bad(format!("sample {i}: timestamps not strictly increasing")));
                }
            }
            prev = Some(s.t);
        }
        match (self.kind, &self.link) {
            (TraceKind::Cc, None) => Err(bad("cc trace without link parameters".into())),
            (TraceKind::Abr, Some(_)) => Err(bad("abr trace with cc link parameters".into())),
            (TraceKind::Cc, Some(link)) => {
                if !(link.base_rtt_ms.is_finite() && link.base_rtt_ms > 0.0) {
                    return Err(bad(format!("base_rtt_ms must be positive, got {}", link.base_rtt_ms)));
                }
                if !(0.0..=1.0).contains(&link.loss_rate) {
                    return Err(bad(format!("loss_rate must be in [0,1], got {}", link.loss_rate)));
                }
                Ok(())
            }
            (TraceKind::Abr, None) => Ok(()),
        }
    }

    /// End of the last sample's holding interval.
    pub fn duration(&self) -> f64 {
        match self.samples.len() {
            0 => 0.0,
            1 => self.samples[0].t + 1.0,
            n => {
                let last = self.samples[n - 1].t;
                last + (last - self.samples[n - 2].t)
            }
        }
    }

    fn segment_index(&self, t: f64) -> usize {
        // index of the last sample with timestamp <= t, or 0 before the first
        self.samples.partition_point(|s| s.t <= t).saturating_sub(1)
    }

    /// Bandwidth in effect at time `t`; the final sample extends forever.
    pub fn bandwidth_at(&self, t: f64) -> f64 {
        self.samples[self.segment_index(t)].bandwidth_mbps
    }

    /// Seconds needed to move `megabits` starting at `start`, integrating the
    /// piecewise-constant bandwidth.
    pub fn transfer_time(&self, start: f64, megabits: f64) -> f64 {
        let mut remaining = megabits;
        let mut now = start;
        let mut idx = self.segment_index(start);
        loop {
            let bw = self.samples[idx].bandwidth_mbps;
            let end = self.samples.get(idx + 1).map(|s| s.t);
            match end {
                Some(end) if end > now => {
                    let capacity = bw * (end - now);
                    if capacity >= remaining {
                        return now + remaining / bw - start;
                    }
                    remaining -= capacity;
                    now = end;
                    idx += 1;
                }
                Some(_) => idx += 1,
                None => return now + remaining / bw - start,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Ingested,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceSet {
    pub kind: TraceKind,
    pub provenance: Provenance,
    pub traces: Vec<Trace>,
}

impl TraceSet {
    pub fn new(kind: TraceKind, provenance: Provenance, traces: Vec<Trace>) -> Result<Self> {
        let mut seen = HashSet::new();
        for trace in &traces {
            if trace.kind != kind {
                return Err(Error::KindMismatch {
                    expected: kind.to_string(),
                    found: trace.kind.to_string(),
                });
            }
            if !seen.insert(trace.id.as_str()) {
                return Err(Error::InvalidTrace {
                    id: trace.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
        }
        Ok(Self {
            kind,
            provenance,
            traces,
        })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Trace> {
        self.traces.iter().find(|t| t.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.traces.iter().map(|t| t.id.as_str())
    }

    /// Writes the set as JSON Lines, one trace per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for trace in &self.traces {
            serde_json::to_writer(&mut out, trace)?;
            out.push(b'\n');
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

pub fn load_traces(path: impl AsRef<Path>, kind: TraceKind) -> Result<TraceSet> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut traces = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: Trace = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if trace.kind != kind {
            return Err(Error::Parse {
                line: line_no,
                message: Error::KindMismatch {
                    expected: kind.to_string(),
                    found: trace.kind.to_string(),
                }
                .to_string(),
            });
        }
        trace.validate().map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        traces.push(trace);
    }
    if traces.is_empty() {
        return Err(Error::NoTraces(path.to_path_buf()));
    }
    TraceSet::new(kind, Provenance::Ingested, traces)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub mean_bw: f64,
    pub cov_bw: f64,
    pub duration: f64,
}

/// Mean and coefficient of variation (population std / mean) of the sample
/// bandwidths.
pub fn trace_stats(trace: &Trace) -> Result<TraceStats> {
    let bws: Vec<f64> = trace.samples.iter().map(|s| s.bandwidth_mbps).collect();
    let (mean_bw, cov_bw) = mean_cov(&bws).ok_or(Error::Empty("trace samples"))?;
    Ok(TraceStats {
        mean_bw,
        cov_bw,
        duration: trace.duration(),
    })
}

/// Mean and population coefficient of variation of a non-empty slice.
pub fn mean_cov(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    if values.iter().all(|&v| v == values[0]) {
        return Some((values[0], 0.0));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let cov = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    Some((mean, cov))
}

/// Ranges for synthesizing traces from four key values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcTraceSpec {
    pub mean_bw_mbps: (f64, f64),
    pub base_rtt_ms: (f64, f64),
    pub queue_pkts: (u32, u32),
    pub loss_rate: (f64, f64),
    pub segment_length_s: f64,
    /// Bound on the fractional deviation of any segment from the trace mean.
    pub wander: f64,
    pub duration_s: f64,
}

impl Default for CcTraceSpec {
    fn default() -> Self {
        Self {
            mean_bw_mbps: (1.0, 10.0),
            base_rtt_ms: (20.0, 200.0),
            queue_pkts: (10, 200),
            loss_rate: (0.0, 0.02),
            segment_length_s: 5.0,
            wander: 0.2,
            duration_s: 60.0,
        }
    }
}

impl CcTraceSpec {
    /// Bandwidths around the ABR bitrate ladder with volatile segments and
    /// long sessions, so that stalls and bitrate switches occur.
    pub fn abr_desk() -> Self {
        Self {
            mean_bw_mbps: (0.5, 5.0),
            wander: 0.6,
            duration_s: 2000.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.mean_bw_mbps) || self.mean_bw_mbps.0 <= 0.0 {
            return bad("mean_bw_mbps must be a positive ordered range");
        }
        if !ordered(self.base_rtt_ms) || self.base_rtt_ms.0 <= 0.0 {
            return bad("base_rtt_ms must be a positive ordered range");
        }
        if self.queue_pkts.0 > self.queue_pkts.1 || self.queue_pkts.0 == 0 {
            return bad("queue_pkts must be a positive ordered range");
        }
        if !ordered(self.loss_rate) || self.loss_rate.0 < 0.0 || self.loss_rate.1 > 1.0 {
            return bad("loss_rate must be an ordered range within [0,1]");
        }
        if !(self.segment_length_s > 0.0) {
            return bad("segment_length_s must be positive");
        }
        if !(0.0..1.0).contains(&self.wander) {
            return bad("wander must be in [0,1)");
        }
        if !(self.duration_s >= self.segment_length_s) {
            return bad("duration_s must cover at least one segment");
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Synthesizes `n` congestion-control traces.
pub fn generate_cc_traces(spec: &CcTraceSpec, n: usize, seed: u64) -> Result<TraceSet> {
    generate_traces(spec, TraceKind::Cc, n, seed)
}

/// Synthesizes `n` traces of the given kind from `spec`. Abr traces share the
/// generator and drop the link parameters.
///
/// Each trace draws its volatility uniformly from `[0, wander]`; segment
/// levels then follow a bounded random walk so that every segment stays
/// within `mean * (1 ± volatility)`.
pub fn generate_traces(spec: &CcTraceSpec, kind: TraceKind, n: usize, seed: u64) -> Result<TraceSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segments = (spec.duration_s / spec.segment_length_s).ceil() as usize;
    let mut traces = Vec::with_capacity(n);
    for i in 0..n {
        let mean = uniform(&mut rng, spec.mean_bw_mbps);
        let base_rtt_ms = uniform(&mut rng, spec.base_rtt_ms);
        let queue_pkts = rng.gen_range(spec.queue_pkts.0..=spec.queue_pkts.1);
        let loss_rate = uniform(&mut rng, spec.loss_rate);
        let volatility = uniform(&mut rng, (0.0, spec.wander));
        let mut level = uniform(&mut rng, (-volatility, volatility));
        let mut samples = Vec::with_capacity(segments);
        for s in 0..segments {
            if s > 0 {
                let step = uniform(&mut rng, (-volatility, volatility));
                level = (level + step).clamp(-volatility, volatility);
            }
            samples.push(TraceSample {
                t: s as f64 * spec.segment_length_s,
                bandwidth_mbps: mean * (1.0 + level),
            });
        }
        let link = (kind == TraceKind::Cc).then_some(CcLink {
            base_rtt_ms,
            queue_pkts,
            loss_rate,
        });
        traces.push(Trace {
            id: format!("{kind}-{i:04}"),
            kind,
            samples,
            link,
        });
    }
    TraceSet::new(kind, Provenance::Synthetic, traces)
}

/// Partitions `set` into (train, holdout) with `round(fraction * n)` traces
/// held out, at least one on each side. Original order is kept within each
/// side.
pub fn split_holdout(set: &TraceSet, holdout_fraction: f64, seed: u64) -> Result<(TraceSet, TraceSet)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "holdout fraction must be in (0,1), got {holdout_fraction}"
        )));
    }
    let n = set.len();
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 traces to split, got {n}")));
    }
    let holdout_n = ((holdout_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_holdout = vec![false; n];
    for &i in &order[..holdout_n] {
        is_holdout[i] = true;
    }
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for (trace, held) in set.traces.iter().zip(is_holdout) {
        if held {
            holdout.push(trace.clone());
        } else {
            train.push(trace.clone());
        }
    }
    Ok((
        TraceSet::new(set.kind, set.provenance, train)?,
        TraceSet::new(set.kind, set.provenance, holdout)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abr_trace(id: &str, bws: &[f64]) -> Trace {
        Trace {
            id: id.into(),
            kind: TraceKind::Abr,
            samples: bws
                .iter()
                .enumerate()
                .map(|(i, &bw)| TraceSample {
                    t: i as f64,
                    bandwidth_mbps: bw,
                })
                .collect(),
            link: None,
        }
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_two_abr_records() {
        let f = write(concat!(
            r#"{"id":"t-001","kind":"abr","samples":[{"t":0.0,"bw_mbps":3.2},{"t":1.0,"bw_mbps":2.0}]}"#,
            "\n",
            r#"{"id":"t-002","kind":"abr","samples":[{"t":0.0,"bw_mbps":1.5}]}"#,
            "\n"
        ));
        let set = load_traces(f.path(), TraceKind::Abr).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.kind, TraceKind::Abr);
        assert_eq!(set.traces[0].id, "t-001");
        assert_eq!(set.traces[1].samples[0].bandwidth_mbps, 1.5);
    }

    #[test]
    fn negative_bandwidth_names_line() {
        let f = write(concat!(
            r#"{"id":"a","kind":"abr","samples":[{"t":0.0,"bw_mbps":3.2}]}"#,
            "\n",
            r#"{"id":"b","kind":"abr","samples":[{"t":0.0,"bw_mbps":-1.0}]}"#,
            "\n"
        ));
        let err = load_traces(f.path(), TraceKind::Abr).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("positive"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_rejected() {
        let f = write("");
        let err = load_traces(f.path(), TraceKind::Abr).unwrap_err();
        assert!(err.to_string().contains("no traces"));
    }

    #[test]
    fn missing_file_and_kind_mismatch() {
        assert!(matches!(
            load_traces("/nonexistent/traces.jsonl", TraceKind::Abr),
            Err(Error::Io { .. })
        ));
        let f = write(concat!(
            r#"{"id":"c","kind":"cc","samples":[{"t":0.0,"bw_mbps":3.2}],"base_rtt_ms":50,"queue_pkts":100,"loss_rate":0.0}"#,
            "\n"
        ));
        assert!(load_traces(f.path(), TraceKind::Cc).is_ok());
        let err = load_traces(f.path(), TraceKind::Abr).unwrap_err();
        assert!(err.to_string().contains("mismatch"));
    }

    #[test]
    fn malformed_record_reports_line() {
        let f = write("\n{\"id\": oops}\n");
        match load_traces(f.path(), TraceKind::Abr).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_key_names_are_exact() {
        let set = generate_cc_traces(&CcTraceSpec::default(), 1, 3).unwrap();
        let line = serde_json::to_string(&set.traces[0]).unwrap();
        for key in ["\"id\"", "\"kind\":\"cc\"", "\"samples\"", "\"t\"", "\"bw_mbps\"", "\"base_rtt_ms\"", "\"queue_pkts\"", "\"loss_rate\""] {
            assert!(line.contains(key), "missing {key} in {line}");
        }
    }

    #[test]
    fn save_then_load_preserves_order() {
        let set = generate_traces(&CcTraceSpec::default(), TraceKind::Abr, 5, 11).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        set.save(f.path()).unwrap();
        let back = load_traces(f.path(), TraceKind::Abr).unwrap();
        assert_eq!(back.traces, set.traces);
    }

    #[test]
    fn generation_degenerate_and_deterministic() {
        let spec = CcTraceSpec::default();
        assert!(generate_cc_traces(&spec, 0, 7).unwrap().is_empty());
        let a = generate_cc_traces(&spec, 10, 7).unwrap();
        let b = generate_cc_traces(&spec, 10, 7).unwrap();
        assert_eq!(a, b);
        for t in &a.traces {
            t.validate().unwrap();
        }
    }

    #[test]
    fn unit_mean_segments_stay_within_wander() {
        let spec = CcTraceSpec {
            mean_bw_mbps: (1.0, 1.0),
            ..CcTraceSpec::default()
        };
        let set = generate_cc_traces(&spec, 50, 1).unwrap();
        let (lo, hi) = (1.0 * (1.0 - spec.wander), 1.0 * (1.0 + spec.wander));
        for s in set.traces.iter().flat_map(|t| &t.samples) {
            assert!(s.bandwidth_mbps >= lo - 1e-12 && s.bandwidth_mbps <= hi + 1e-12);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = CcTraceSpec {
            base_rtt_ms: (200.0, 20.0),
            ..CcTraceSpec::default()
        };
        assert!(matches!(generate_cc_traces(&spec, 3, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn stats_examples() {
        let s = trace_stats(&abr_trace("a", &[2.0, 2.0, 2.0])).unwrap();
        assert_eq!((s.mean_bw, s.cov_bw), (2.0, 0.0));
        let s = trace_stats(&abr_trace("b", &[1.0, 3.0])).unwrap();
        assert!((s.mean_bw - 2.0).abs() < 1e-15 && (s.cov_bw - 0.5).abs() < 1e-15);
        let s = trace_stats(&abr_trace("c", &[5.0])).unwrap();
        assert_eq!((s.mean_bw, s.cov_bw), (5.0, 0.0));
        assert!(trace_stats(&abr_trace("d", &[])).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let set = generate_traces(&CcTraceSpec::default(), TraceKind::Abr, 10, 2).unwrap();
        let (train, hold) = split_holdout(&set, 0.2, 9).unwrap();
        assert_eq!((train.len(), hold.len()), (8, 2));
        let train_ids: HashSet<_> = train.ids().collect();
        assert!(hold.ids().all(|id| !train_ids.contains(id)));
        assert_eq!(split_holdout(&set, 0.2, 9).unwrap(), (train, hold));

        let one = TraceSet::new(TraceKind::Abr, Provenance::Ingested, vec![abr_trace("x", &[1.0])]).unwrap();
        assert!(split_holdout(&one, 0.5, 0).is_err());
        assert!(split_holdout(&set, 1.0, 0).is_err());
        assert!(split_holdout(&set, 0.0, 0).is_err());
    }

    #[test]
    fn transfer_time_crosses_segments() {
        // 2 Mbps for 1 s then 4 Mbps: 6 Mb from t=0 takes 1 + 4/4 = 2 s
        let t = abr_trace("x", &[2.0, 4.0]);
        assert!((t.transfer_time(0.0, 6.0) - 2.0).abs() < 1e-12);
        assert!((t.transfer_time(0.5, 1.0) - 0.5).abs() < 1e-12);
        // past the end the last sample extends
        assert!((t.transfer_time(10.0, 8.0) - 2.0).abs() < 1e-12);
        assert_eq!(t.duration(), 2.0);
        assert_eq!(t.bandwidth_at(1.5), 4.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_is_a_partition(n in 2usize..40, frac in 0.05f64..0.95, seed in any::<u64>()) {
                let set = generate_traces(&CcTraceSpec::default(), TraceKind::Abr, n, 5).unwrap();
                let (train, hold) = split_holdout(&set, frac, seed).unwrap();
                let mut ids: Vec<&str> = train.ids().chain(hold.ids()).collect();
                ids.sort_unstable();
                let mut all: Vec<&str> = set.ids().collect();
                all.sort_unstable();
                prop_assert_eq!(ids, all);
                prop_assert!(!train.is_empty() && !hold.is_empty());
            }

            #[test]
            fn constant_trace_has_zero_cov(bw in 0.01f64..1000.0, n in 1usize..50) {
                let samples = vec![bw; n];
                let s = trace_stats(&abr_trace("c", &samples)).unwrap();
                prop_assert_eq!(s.cov_bw, 0.0);
            }
        }
    }
}
