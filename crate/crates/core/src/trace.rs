//! Per-step metrics, transition records and their file formats.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Drift state behind a snapshot. Not part of the serialized record: it is
/// what a monitor on the real cluster would measure per device and link.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Compute slowdown per device, by rank.
    pub device_slowdown: Vec<f64>,
    /// Bandwidth divisor for intra- and inter-node links.
    pub link_slowdown: [f64; 2],
    pub headroom_fraction: f64,
    /// Throughput was clipped by the data loader.
    pub input_bound: bool,
}

impl Default for Observation {
    fn default() -> Self {
        Observation {
            device_slowdown: Vec::new(),
            link_slowdown: [1.0, 1.0],
            headroom_fraction: 0.0,
            input_bound: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub step: u64,
    pub iteration_time_s: f64,
    pub throughput_samples_s: f64,
    pub gpu_utilization: f64,
    pub memory_used_bytes: f64,
    pub comm_fraction: f64,
    pub stage_imbalance: f64,
    pub convergence_rate: f64,
    pub config_id: String,
    #[serde(skip)]
    pub observation: Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub event: String,
    /// Last step run under the old configuration.
    pub step: u64,
    pub from: String,
    pub to: String,
    pub bytes_moved: f64,
    pub pause_s: f64,
    /// Bottleneck flags that triggered the change.
    pub flags: Vec<String>,
}

impl TransitionRecord {
    pub fn new(step: u64, from: String, to: String, bytes_moved: f64, pause_s: f64, flags: Vec<String>) -> Self {
        TransitionRecord {
            event: "transition".to_string(),
            step,
            from,
            to,
            bytes_moved,
            pause_s,
            flags,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceRecord {
    Step(MetricsSnapshot),
    Transition(TransitionRecord),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub steps: u64,
    pub wall_clock_s: f64,
    pub mean_throughput: f64,
    pub transitions: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push_step(&mut self, s: MetricsSnapshot) {
        if let Some(prev) = self.snapshots().last() {
            assert!(s.step > prev.step, "trace steps must increase");
        }
        self.records.push(TraceRecord::Step(s));
    }

    pub fn push_transition(&mut self, t: TransitionRecord) {
        self.records.push(TraceRecord::Transition(t));
    }

    pub fn snapshots(&self) -> impl DoubleEndedIterator<Item = &MetricsSnapshot> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn transitions(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Transition(t) => Some(t),
            _ => None,
        })
    }

    /// Folds the records; never cached, so it cannot drift from them.
    pub fn summary(&self) -> TraceSummary {
        let (mut steps, mut wall, mut tput) = (0u64, 0.0, 0.0);
        for s in self.snapshots() {
            steps += 1;
            wall += s.iteration_time_s;
            tput += s.throughput_samples_s;
        }
        TraceSummary {
            steps,
            wall_clock_s: wall,
            mean_throughput: if steps > 0 { tput / steps as f64 } else { 0.0 },
            transitions: self.transitions().count(),
        }
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            let line = match r {
                TraceRecord::Step(s) => serde_json::to_string(s)?,
                TraceRecord::Transition(t) => serde_json::to_string(t)?,
            };
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Step records only, one column per snapshot field.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in self.snapshots() {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(step: u64, t: f64) -> MetricsSnapshot {
        MetricsSnapshot {
            step,
            iteration_time_s: t,
            throughput_samples_s: 8.0 / t,
            gpu_utilization: 0.9,
            memory_used_bytes: 1e9,
            comm_fraction: 0.1,
            stage_imbalance: 0.0,
            convergence_rate: 0.01,
            config_id: "c".into(),
            observation: Observation::default(),
        }
    }

    #[test]
    fn summary_folds_records() {
        let mut t = Trace::default();
        t.push_step(snap(1, 1.0));
        t.push_transition(TransitionRecord::new(1, "a".into(), "b".into(), 10.0, 0.5, vec![]));
        t.push_step(snap(2, 2.0));
        let s = t.summary();
        assert_eq!(s.steps, 2);
        assert_eq!(s.wall_clock_s, 3.0);
        assert_eq!(s.mean_throughput, 6.0);
        assert_eq!(s.transitions, 1);
    }

    #[test]
    #[should_panic]
    fn steps_must_increase() {
        let mut t = Trace::default();
        t.push_step(snap(2, 1.0));
        t.push_step(snap(2, 1.0));
    }

    #[test]
    fn record_formats() {
        let mut t = Trace::default();
        t.push_step(snap(1, 0.5));
        t.push_transition(TransitionRecord::new(1, "a".into(), "b".into(), 10.0, 0.5, vec!["comm_bound".into()]));
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let keys: Vec<&str> = lines[0].as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = vec![
            "step",
            "iteration_time_s",
            "throughput_samples_s",
            "gpu_utilization",
            "memory_used_bytes",
            "comm_fraction",
            "stage_imbalance",
            "convergence_rate",
            "config_id",
        ];
        let mut sorted = keys.clone();
        sorted.sort();
        expected.sort();
        assert_eq!(sorted, expected);
        assert_eq!(lines[1]["event"], "transition");
        assert_eq!(lines[1]["from"], "a");

        let mut csv_buf = Vec::new();
        t.write_csv(&mut csv_buf).unwrap();
        let csv_text = String::from_utf8(csv_buf).unwrap();
        assert!(csv_text.starts_with("step,iteration_time_s,throughput_samples_s,"));
        assert_eq!(csv_text.lines().count(), 2);
    }
}
