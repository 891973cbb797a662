//! Cross-document consistency checks.

use crate::comm::CommPlan;
use crate::error::Error;
use crate::search::{discover, plan_for_degrees, power_of_two_triples, SearchOptions};
use crate::spec::{ClusterSpec, JobSpec, ModelSpec};

/// Every reason the documents cannot be planned; empty when they can.
///
/// The final check runs the planner itself, so an empty list guarantees
/// that planning succeeds.
pub fn validate(cluster: &ClusterSpec, model: &ModelSpec, job: &JobSpec, opts: &SearchOptions) -> Vec<String> {
    let mut out = Vec::new();
    for r in [cluster.check(), model.check(), job.check()] {
        if let Err(e) = r {
            out.push(e.to_string());
        }
    }
    if !model.layers.is_empty() && model.total_params() == 0 {
        out.push("empty model: total_params is 0".to_string());
    }
    if !out.is_empty() {
        return out;
    }
    let w = match crate::workload(cluster, model, job, CommPlan::default()) {
        Ok(w) => w,
        Err(e) => return vec![e.to_string()],
    };
    let triples = power_of_two_triples(w.hw.total_gpus);
    if triples.is_empty() {
        return vec![format!(
            "no power-of-two triple: {} GPUs is not a power of two",
            w.hw.total_gpus
        )];
    }

    // Memory fit does not depend on the global batch, so probe each
    // (degrees, micro-batch) with a batch that splits exactly.
    let gb = w.global_batch();
    let mut fits_memory = false;
    let mut fits_and_divides = false;
    for d in &triples {
        if d.tp > w.hw.gpus_per_node || d.pp > w.model.len() {
            continue;
        }
        let mut mb = 1;
        while mb <= opts.max_micro_batch {
            let mut probe = w.clone();
            probe.dataset.global_batch_size = d.dp as u64 * mb;
            if plan_for_degrees(&probe, *d, mb, None).is_some() {
                fits_memory = true;
                if gb % (d.dp as u64 * mb) == 0 {
                    fits_and_divides = true;
                }
            }
            mb *= 2;
        }
    }
    if !fits_memory {
        return vec![format!(
            "model does not fit: no configuration stays within {:.4e} bytes per device",
            w.hw.device_memory
        )];
    }
    if !fits_and_divides {
        return vec![format!(
            "no feasible micro-batching: global batch {gb} is not divisible by dp·micro_batch for any configuration that fits in memory"
        )];
    }
    match discover(&w, opts) {
        Ok(_) => Vec::new(),
        Err(e @ Error::NoFeasibleStrategy(_)) => vec![e.to_string()],
        Err(e) => vec![e.to_string()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{LayerKind, LayerSpec, LinkSpec};

    fn cluster(per_node: u32, memory: f64) -> ClusterSpec {
        ClusterSpec {
            node_count: 2,
            gpus_per_node: per_node,
            device_memory_bytes: memory,
            device_peak_flops: 100e12,
            device_efficiency: 0.5,
            intra_node: LinkSpec::new(300e9, 1e-6),
            inter_node: LinkSpec::new(25e9, 5e-6),
        }
    }

    fn model(params: u64, layers: usize) -> ModelSpec {
        ModelSpec {
            layers: (0..layers)
                .map(|_| LayerSpec::new(LayerKind::Mlp, params).with_flops(1e9).with_activation(1_000_000))
                .collect(),
        }
    }

    #[test]
    fn consistent_specs_pass() {
        let v = validate(&cluster(8, 40e9), &model(1_000_000, 4), &JobSpec::new(64, 10), &SearchOptions::default());
        assert_eq!(v, Vec::<String>::new());
    }

    #[test]
    fn empty_model() {
        let v = validate(&cluster(8, 40e9), &model(0, 1), &JobSpec::new(64, 10), &SearchOptions::default());
        assert!(v[0].starts_with("empty model"), "{v:?}");
    }

    #[test]
    fn odd_batch_with_memory_forcing_dp() {
        // 16 GPUs, one layer (so pp = 1), no tensor-shardable layers: only
        // dp = 16 remains, and a batch of 7 cannot be split across it.
        let mut m = model(1_000_000, 1);
        m.layers[0].kind = LayerKind::Other;
        let v = validate(&cluster(8, 40e9), &m, &JobSpec::new(7, 10), &SearchOptions::default());
        assert!(v[0].starts_with("no feasible micro-batching"), "{v:?}");
    }

    #[test]
    fn model_too_large() {
        let v = validate(&cluster(8, 1e6), &model(1_000_000_000, 2), &JobSpec::new(64, 10), &SearchOptions::default());
        assert!(v[0].starts_with("model does not fit"), "{v:?}");
    }

    #[test]
    fn not_a_power_of_two() {
        let mut c = cluster(3, 40e9);
        c.node_count = 1;
        let v = validate(&c, &model(1000, 2), &JobSpec::new(64, 10), &SearchOptions::default());
        assert!(v[0].starts_with("no power-of-two triple"), "{v:?}");
    }

    #[test]
    fn field_errors_are_reported() {
        let mut c = cluster(8, 40e9);
        c.node_count = 0;
        let v = validate(&c, &model(1000, 2), &JobSpec::new(0, 10), &SearchOptions::default());
        assert_eq!(v.len(), 2);
    }
}
