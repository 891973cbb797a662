//! Hardware, model and dataset profiles derived from the input documents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spec::{ClusterSpec, JobSpec, LayerKind, LayerSpec, LinkId, LinkSpec, ModelSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct HardwareProfile {
    pub total_gpus: usize,
    pub gpus_per_node: usize,
    pub device_memory: f64,
    pub effective_flops: f64,
    pub intra_node: LinkSpec,
    pub inter_node: LinkSpec,
}

impl HardwareProfile {
    pub fn node_of(&self, device: usize) -> usize {
        device / self.gpus_per_node
    }

    /// Link between two devices: intra-node iff both sit on the same node.
    pub fn link(&self, a: usize, b: usize) -> LinkSpec {
        self.link_class(a, b).pick(self)
    }

    pub fn link_class(&self, a: usize, b: usize) -> LinkId {
        if self.node_of(a) == self.node_of(b) {
            LinkId::Intra
        } else {
            LinkId::Inter
        }
    }

    /// Slowest link class a collective over `devices` has to cross.
    pub fn group_link(&self, devices: impl IntoIterator<Item = usize>) -> LinkSpec {
        let mut it = devices.into_iter();
        let Some(first) = it.next() else {
            return self.intra_node;
        };
        let node = self.node_of(first);
        if it.any(|d| self.node_of(d) != node) {
            self.inter_node
        } else {
            self.intra_node
        }
    }

    pub fn link_spec(&self, id: LinkId) -> LinkSpec {
        id.pick(self)
    }

    /// Copy with each link class' bandwidth divided by its slowdown factor.
    pub fn with_link_slowdown(&self, intra: f64, inter: f64) -> HardwareProfile {
        let mut hw = self.clone();
        hw.intra_node.bandwidth_bps /= intra;
        hw.inter_node.bandwidth_bps /= inter;
        hw
    }
}

impl LinkId {
    fn pick(self, hw: &HardwareProfile) -> LinkSpec {
        match self {
            LinkId::Intra => hw.intra_node,
            LinkId::Inter => hw.inter_node,
        }
    }
}

pub fn profile_hardware(cluster: &ClusterSpec) -> HardwareProfile {
    HardwareProfile {
        total_gpus: cluster.total_gpus(),
        gpus_per_node: cluster.gpus_per_node as usize,
        device_memory: cluster.device_memory_bytes,
        effective_flops: cluster.device_peak_flops * cluster.device_efficiency,
        intra_node: cluster.intra_node,
        inter_node: cluster.inter_node,
    }
}

/// Forward FLOPs per sample for one layer.
///
/// An explicit value always wins. Otherwise attention costs
/// `8·s·h² + 4·s²·h` and an MLP with a 4h expansion costs `16·s·h²`.
/// Embedding lookups without an explicit value count as zero.
pub fn layer_flops(layer: &LayerSpec) -> Result<f64, String> {
    if let Some(f) = layer.flops_fwd_per_sample {
        return Ok(f);
    }
    let shape = layer.hidden_size.zip(layer.seq_len);
    match (layer.kind, shape) {
        (LayerKind::Attention, Some((h, s))) => {
            let (h, s) = (h as f64, s as f64);
            Ok(8.0 * s * h * h + 4.0 * s * s * h)
        }
        (LayerKind::Mlp, Some((h, s))) => {
            let (h, s) = (h as f64, s as f64);
            Ok(16.0 * s * h * h)
        }
        (LayerKind::Embedding, _) => Ok(0.0),
        (LayerKind::Attention | LayerKind::Mlp, None) => Err(
            "needs flops_fwd_per_sample or both hidden_size and seq_len".to_string(),
        ),
        (LayerKind::Other, _) => Err("layers of kind other need flops_fwd_per_sample".to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub index: usize,
    pub kind: LayerKind,
    pub param_count: u64,
    pub flops_fwd: f64,
    pub flops_bwd: f64,
    pub activation_bytes: f64,
    pub tp_shardable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelProfile {
    pub layers: Vec<LayerProfile>,
    pub total_params: u64,
    pub total_flops_fwd: f64,
}

impl ModelProfile {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

pub fn profile_model(model: &ModelSpec, precision_bytes: u32) -> Result<ModelProfile> {
    let mut layers = Vec::with_capacity(model.layers.len());
    for (index, spec) in model.layers.iter().enumerate() {
        let flops_fwd = layer_flops(spec).map_err(|message| Error::Layer { index, message })?;
        let activation_bytes = match spec.activation_bytes_per_sample {
            Some(b) => b as f64,
            None => match spec.hidden_size.zip(spec.seq_len) {
                Some((h, s)) => (s * h) as f64 * precision_bytes as f64,
                None => 0.0,
            },
        };
        layers.push(LayerProfile {
            index,
            kind: spec.kind,
            param_count: spec.param_count,
            flops_fwd,
            flops_bwd: 2.0 * flops_fwd,
            activation_bytes,
            tp_shardable: matches!(
                spec.kind,
                LayerKind::Attention | LayerKind::Mlp | LayerKind::Embedding
            ),
        });
    }
    Ok(ModelProfile {
        total_params: layers.iter().map(|l| l.param_count).sum(),
        total_flops_fwd: layers.iter().map(|l| l.flops_fwd).sum(),
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetProfile {
    pub max_input_throughput: f64,
    pub global_batch_size: u64,
}

pub fn profile_dataset(job: &JobSpec) -> DatasetProfile {
    DatasetProfile {
        max_input_throughput: job.loader_max_throughput,
        global_batch_size: job.global_batch_size,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cluster(nodes: u32, per_node: u32) -> ClusterSpec {
        ClusterSpec {
            node_count: nodes,
            gpus_per_node: per_node,
            device_memory_bytes: 40e9,
            device_peak_flops: 100e12,
            device_efficiency: 0.5,
            intra_node: LinkSpec::new(300e9, 1e-6),
            inter_node: LinkSpec::new(25e9, 5e-6),
        }
    }

    #[test]
    fn hardware_links() {
        let hw = profile_hardware(&cluster(2, 8));
        assert_eq!(hw.total_gpus, 16);
        assert_eq!(hw.link(0, 7), hw.intra_node);
        assert_eq!(hw.link(0, 8), hw.inter_node);
        assert_eq!(hw.effective_flops, 50e12);
        assert_eq!(hw.group_link([8, 9, 15]), hw.intra_node);
        assert_eq!(hw.group_link([6, 7, 8]), hw.inter_node);

        let one = profile_hardware(&cluster(1, 1));
        assert_eq!(one.total_gpus, 1);
    }

    #[test]
    fn flops_formulas() {
        let explicit = LayerSpec::new(LayerKind::Other, 1).with_flops(3e9);
        assert_eq!(layer_flops(&explicit), Ok(3e9));
        let attn = LayerSpec::new(LayerKind::Attention, 1).with_shape(1024, 512);
        assert_eq!(layer_flops(&attn), Ok(5.36870912e9));
        let mlp = LayerSpec::new(LayerKind::Mlp, 1).with_shape(1024, 512);
        assert_eq!(layer_flops(&mlp), Ok(8.589934592e9));
        assert!(layer_flops(&LayerSpec::new(LayerKind::Mlp, 1)).is_err());
        assert!(layer_flops(&LayerSpec::new(LayerKind::Other, 1)).is_err());
        assert_eq!(layer_flops(&LayerSpec::new(LayerKind::Embedding, 1)), Ok(0.0));
    }

    #[test]
    fn model_profile_rules() {
        let model = ModelSpec {
            layers: vec![
                LayerSpec::new(LayerKind::Attention, 600_000_000).with_shape(1024, 512),
                LayerSpec::new(LayerKind::Other, 600_000_000)
                    .with_flops(1e9)
                    .with_activation(1_000_000),
            ],
        };
        let p = profile_model(&model, 2).unwrap();
        assert_eq!(p.total_params, 1_200_000_000);
        assert!(p.total_params as f64 > 1e9);
        assert!(p.layers[0].tp_shardable);
        assert!(!p.layers[1].tp_shardable);
        assert_eq!(p.layers[0].activation_bytes, 512.0 * 1024.0 * 2.0);
        assert_eq!(p.layers[1].activation_bytes, 1e6);
        assert_eq!(p.total_flops_fwd, 5.36870912e9 + 1e9);
    }

    #[test]
    fn dataset_profile() {
        let mut job = JobSpec::new(64, 10);
        assert_eq!(profile_dataset(&job).max_input_throughput, 1e12);
        job.loader_max_throughput = 10000.0;
        let d = profile_dataset(&job);
        assert_eq!(d.max_input_throughput, 10000.0);
        assert_eq!(d.global_batch_size, 64);
    }

    proptest! {
        #[test]
        fn link_symmetric(nodes in 1u32..8, per in 1u32..9, a in 0usize..64, b in 0usize..64) {
            let hw = profile_hardware(&cluster(nodes, per));
            let (a, b) = (a % hw.total_gpus, b % hw.total_gpus);
            prop_assert_eq!(hw.link(a, b), hw.link(b, a));
        }

        #[test]
        fn profile_totals(flops in proptest::collection::vec(0f64..1e12, 1..40)) {
            let model = ModelSpec {
                layers: flops.iter().map(|&f| LayerSpec::new(LayerKind::Other, 7).with_flops(f)).collect(),
            };
            let p = profile_model(&model, 2).unwrap();
            let sum: f64 = p.layers.iter().map(|l| l.flops_fwd).sum();
            prop_assert_eq!(sum, p.total_flops_fwd);
            for l in &p.layers {
                prop_assert_eq!(l.flops_bwd, 2.0 * l.flops_fwd);
            }
        }
    }
}
