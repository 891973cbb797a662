//! Declarative cluster, model and job documents.
//!
//! All three documents are JSON. Unknown keys are rejected so that a typo in
//! a field name fails loudly instead of silently falling back to a default.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selector::SelectorConfig;

/// Loader throughput used when a job does not state one. Finite so that it
/// still compares against simulated throughput.
pub const DEFAULT_LOADER_MAX_THROUGHPUT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub bandwidth_bps: f64,
    pub latency_s: f64,
}

impl LinkSpec {
    pub fn new(bandwidth_bps: f64, latency_s: f64) -> Self {
        LinkSpec {
            bandwidth_bps,
            latency_s,
        }
    }

    fn check(&self, field: &str) -> Result<()> {
        if !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite()) {
            return Err(Error::validation(
                format!("{field}.bandwidth_bps"),
                "bandwidth must be > 0",
            ));
        }
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite()) {
            return Err(Error::validation(
                format!("{field}.latency_s"),
                "latency must be >= 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub node_count: u32,
    pub gpus_per_node: u32,
    pub device_memory_bytes: f64,
    pub device_peak_flops: f64,
    pub device_efficiency: f64,
    pub intra_node: LinkSpec,
    pub inter_node: LinkSpec,
}

impl ClusterSpec {
    pub fn total_gpus(&self) -> usize {
        self.node_count as usize * self.gpus_per_node as usize
    }

    pub fn check(&self) -> Result<()> {
        if self.node_count < 1 {
            return Err(Error::validation("node_count", "node_count ≥ 1"));
        }
        if self.gpus_per_node < 1 {
            return Err(Error::validation("gpus_per_node", "gpus_per_node ≥ 1"));
        }
        if !(self.device_memory_bytes > 0.0 && self.device_memory_bytes.is_finite()) {
            return Err(Error::validation("device_memory_bytes", "must be > 0"));
        }
        if !(self.device_peak_flops > 0.0 && self.device_peak_flops.is_finite()) {
            return Err(Error::validation("device_peak_flops", "must be > 0"));
        }
        if !(self.device_efficiency > 0.0 && self.device_efficiency <= 1.0) {
            return Err(Error::validation(
                "device_efficiency",
                "efficiency must be in (0, 1]",
            ));
        }
        self.intra_node.check("intra_node")?;
        self.inter_node.check("inter_node")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Attention,
    Mlp,
    Embedding,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(with = "count")]
    pub param_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops_fwd_per_sample: Option<f64>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "opt_count"
    )]
    pub activation_bytes_per_sample: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<u64>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, param_count: u64) -> Self {
        LayerSpec {
            kind,
            param_count,
            flops_fwd_per_sample: None,
            activation_bytes_per_sample: None,
            hidden_size: None,
            seq_len: None,
        }
    }

    pub fn with_flops(mut self, flops: f64) -> Self {
        self.flops_fwd_per_sample = Some(flops);
        self
    }

    pub fn with_activation(mut self, bytes: u64) -> Self {
        self.activation_bytes_per_sample = Some(bytes);
        self
    }

    pub fn with_shape(mut self, hidden: u64, seq: u64) -> Self {
        self.hidden_size = Some(hidden);
        self.seq_len = Some(seq);
        self
    }

    fn check(&self, index: usize) -> Result<()> {
        if let Some(f) = self.flops_fwd_per_sample {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(Error::Layer {
                    index,
                    message: "flops_fwd_per_sample must be >= 0".into(),
                });
            }
        }
        crate::profile::layer_flops(self).map_err(|message| Error::Layer { index, message })?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.param_count).sum()
    }

    pub fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::validation("layers", "model needs at least one layer"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.check(i)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    StageSlowdown,
    BandwidthDrop,
    Restore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkId {
    Intra,
    Inter,
}

/// What a scenario event acts on: a pipeline stage (by index in the
/// configuration active when the event fires) or a link class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventTarget {
    Stage(usize),
    Link(LinkId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEvent {
    pub at_step: u64,
    pub kind: EventKind,
    pub target: EventTarget,
    #[serde(default = "one")]
    pub multiplier: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    #[serde(with = "count")]
    pub global_batch_size: u64,
    #[serde(with = "count")]
    pub target_steps: u64,
    #[serde(default = "default_precision")]
    pub precision_bytes: u32,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub zero_stage_allowed: u8,
    #[serde(default = "default_loader")]
    pub loader_max_throughput: f64,
    #[serde(default)]
    pub scenario_events: Vec<ScenarioEvent>,
    #[serde(default = "yes")]
    pub adaptation_enabled: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selector: Option<SelectorConfig>,
}

fn default_precision() -> u32 {
    2
}

fn default_loader() -> f64 {
    DEFAULT_LOADER_MAX_THROUGHPUT
}

fn yes() -> bool {
    true
}

impl JobSpec {
    pub fn new(global_batch_size: u64, target_steps: u64) -> Self {
        JobSpec {
            global_batch_size,
            target_steps,
            precision_bytes: 2,
            optimizer: Optimizer::Adam,
            zero_stage_allowed: 0,
            loader_max_throughput: DEFAULT_LOADER_MAX_THROUGHPUT,
            scenario_events: Vec::new(),
            adaptation_enabled: true,
            seed: 0,
            selector: None,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.global_batch_size < 1 {
            return Err(Error::validation("global_batch_size", "global_batch_size ≥ 1"));
        }
        if self.target_steps < 1 {
            return Err(Error::validation("target_steps", "target_steps ≥ 1"));
        }
        if self.precision_bytes < 1 {
            return Err(Error::validation("precision_bytes", "precision_bytes ≥ 1"));
        }
        if self.zero_stage_allowed > 3 {
            return Err(Error::validation(
                "zero_stage_allowed",
                "zero_stage_allowed ∈ {0,1,2,3}",
            ));
        }
        if !(self.loader_max_throughput > 0.0) {
            return Err(Error::validation(
                "loader_max_throughput",
                "loader_max_throughput must be > 0",
            ));
        }
        for (i, ev) in self.scenario_events.iter().enumerate() {
            let field = |f: &str| format!("scenario_events[{i}].{f}");
            if ev.at_step > self.target_steps {
                return Err(Error::validation(
                    field("at_step"),
                    format!("at_step {} exceeds target_steps {}", ev.at_step, self.target_steps),
                ));
            }
            if !(ev.multiplier > 0.0 && ev.multiplier.is_finite()) {
                return Err(Error::validation(field("multiplier"), "multiplier must be > 0"));
            }
            match (ev.kind, ev.target) {
                (EventKind::StageSlowdown, EventTarget::Link(_)) => {
                    return Err(Error::validation(
                        field("target"),
                        "stage_slowdown needs a stage index",
                    ))
                }
                (EventKind::BandwidthDrop, EventTarget::Stage(_)) => {
                    return Err(Error::validation(
                        field("target"),
                        "bandwidth_drop needs a link id (\"intra\" or \"inter\")",
                    ))
                }
                _ => {}
            }
        }
        if let Some(sel) = &self.selector {
            sel.check()?;
        }
        Ok(())
    }
}

pub fn parse_cluster_spec(text: &str) -> Result<ClusterSpec> {
    let spec: ClusterSpec = serde_json::from_str(text)?;
    spec.check()?;
    Ok(spec)
}

pub fn parse_model_spec(text: &str) -> Result<ModelSpec> {
    let spec: ModelSpec = serde_json::from_str(text)?;
    spec.check()?;
    Ok(spec)
}

pub fn parse_job_spec(text: &str) -> Result<JobSpec> {
    let spec: JobSpec = serde_json::from_str(text)?;
    spec.check()?;
    Ok(spec)
}

/// Integer counts that may be written in float notation (`6e8`).
mod count {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(*v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let n = serde_json::Number::deserialize(d)?;
        if let Some(v) = n.as_u64() {
            return Ok(v);
        }
        match n.as_f64() {
            Some(f) if f >= 0.0 && f.fract() == 0.0 && f < u64::MAX as f64 => Ok(f as u64),
            _ => Err(de::Error::custom(format!(
                "expected a non-negative integer, found {n}"
            ))),
        }
    }
}

mod opt_count {
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => s.serialize_u64(*v),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
        super::count::deserialize(d).map(Some)
    }
}
