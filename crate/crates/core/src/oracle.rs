//! Randomized cross-check of [`discover`](crate::search::discover) against
//! the brute-force [`exhaustive_plan`](crate::search::exhaustive_plan).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comm::{comm_optimize, CommFlags};
use crate::error::{Error, Result};
use crate::search::{exhaustive_plan, SearchOptions, SearchResult, ORACLE_MAX_GPUS, ORACLE_MAX_LAYERS};
use crate::spec::{ClusterSpec, JobSpec, LayerKind, LayerSpec, LinkSpec, ModelSpec};
use crate::{workload, Workload};

/// A self-contained planning problem, dumpable as a reproduction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub cluster: ClusterSpec,
    pub model: ModelSpec,
    pub job: JobSpec,
    pub comm: CommFlags,
}

impl Instance {
    pub fn workload(&self) -> Result<Workload> {
        workload(&self.cluster, &self.model, &self.job, comm_optimize(self.comm))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceBounds {
    pub max_gpus: usize,
    pub max_layers: usize,
    /// Largest global batch; with power-of-two batches this bounds the
    /// micro-batch menu to `log2(max_global_batch) + 1` entries.
    pub max_global_batch: u64,
}

impl Default for InstanceBounds {
    fn default() -> Self {
        InstanceBounds {
            max_gpus: 8,
            max_layers: 6,
            max_global_batch: 8,
        }
    }
}

/// Total parameter budget for generated models. Kept at the pipeline
/// threshold so the large-model rule never fires: that rule is a policy
/// choice the brute force deliberately ignores.
const MAX_TOTAL_PARAMS: u64 = 1_000_000_000;

pub fn random_cluster(rng: &mut impl Rng, max_gpus: usize) -> ClusterSpec {
    let max_exp = (max_gpus.max(1) as f64).log2().floor() as u32;
    let total = 1usize << rng.gen_range(0..=max_exp);
    let per_node = 1usize << rng.gen_range(0..=total.trailing_zeros());
    ClusterSpec {
        node_count: (total / per_node) as u32,
        gpus_per_node: per_node as u32,
        device_memory_bytes: 1e9,
        device_peak_flops: rng.gen_range(50e12..300e12),
        device_efficiency: rng.gen_range(0.3..0.7),
        intra_node: LinkSpec::new(rng.gen_range(50e9..600e9), rng.gen_range(1e-6..1e-5)),
        inter_node: LinkSpec::new(rng.gen_range(5e9..50e9), rng.gen_range(2e-6..2e-5)),
    }
}

pub fn random_instance(rng: &mut impl Rng, bounds: InstanceBounds, cluster: Option<&ClusterSpec>) -> Instance {
    let mut cluster = cluster.cloned().unwrap_or_else(|| random_cluster(rng, bounds.max_gpus));
    let n_layers = rng.gen_range(1..=bounds.max_layers);
    let per_layer_cap = MAX_TOTAL_PARAMS / n_layers as u64;
    let kinds = [LayerKind::Attention, LayerKind::Mlp, LayerKind::Embedding, LayerKind::Other];
    let layers: Vec<LayerSpec> = (0..n_layers)
        .map(|_| {
            let kind = *kinds.choose(rng).unwrap();
            LayerSpec::new(kind, rng.gen_range(1_000_000..=per_layer_cap.max(1_000_000)))
                .with_flops(rng.gen_range(1e8..1e11))
                .with_activation(rng.gen_range(10_000..10_000_000))
        })
        .collect();
    let model = ModelSpec { layers };

    let batch_exp = (bounds.max_global_batch.max(1) as f64).log2().floor() as u32;
    let mut job = JobSpec::new(1 << rng.gen_range(0..=batch_exp), 100);
    job.zero_stage_allowed = rng.gen_range(0..=3);

    // Memory anywhere from "only heavily sharded layouts fit" to "anything fits".
    let replicated = model.total_params() as f64 * 16.0;
    let activations: f64 = model
        .layers
        .iter()
        .map(|l| l.activation_bytes_per_sample.unwrap_or(0) as f64)
        .sum();
    let scale = [0.3, 0.6, 1.0, 1.5, 3.0].choose(rng).copied().unwrap();
    cluster.device_memory_bytes = ((replicated + activations) * scale * rng.gen_range(0.8..1.2)).max(1e6);

    let comm = CommFlags {
        enable_fusion: rng.gen_bool(0.5),
        enable_overlap: rng.gen_bool(0.5),
    };
    Instance {
        cluster,
        model,
        job,
        comm,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub trial: usize,
    pub instance: Instance,
    pub search_total_s: Option<f64>,
    pub oracle_total_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub trials: usize,
    pub infeasible: usize,
    pub mismatches: Vec<Mismatch>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Runs `trials` random instances through `planner` and the brute force and
/// records every instance where the best costs differ.
pub fn run_trials<P>(
    trials: usize,
    seed: u64,
    bounds: InstanceBounds,
    cluster: Option<&ClusterSpec>,
    planner: P,
) -> Result<OracleReport>
where
    P: Fn(&Workload, &SearchOptions) -> Result<SearchResult> + Sync,
{
    if let Some(c) = cluster {
        if c.total_gpus() > ORACLE_MAX_GPUS {
            return Err(Error::OracleGuard(format!(
                "cluster has {} GPUs, the oracle handles at most {ORACLE_MAX_GPUS}",
                c.total_gpus()
            )));
        }
    }
    if bounds.max_gpus > ORACLE_MAX_GPUS || bounds.max_layers > ORACLE_MAX_LAYERS {
        return Err(Error::OracleGuard(format!(
            "bounds {} GPUs / {} layers exceed {ORACLE_MAX_GPUS} / {ORACLE_MAX_LAYERS}",
            bounds.max_gpus, bounds.max_layers
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances: Vec<Instance> = (0..trials).map(|_| random_instance(&mut rng, bounds, cluster)).collect();
    let opts = SearchOptions::default();
    let outcomes: Vec<Result<(Option<f64>, Option<f64>)>> = instances
        .par_iter()
        .map(|inst| {
            let w = inst.workload()?;
            let total = |r: Result<SearchResult>| match r {
                Ok(r) => Ok(Some(r.best_cost.total_s)),
                Err(Error::NoFeasibleStrategy(_)) => Ok(None),
                Err(e) => Err(e),
            };
            Ok((total(planner(&w, &opts))?, total(exhaustive_plan(&w, &opts))?))
        })
        .collect();
    let mut report = OracleReport {
        trials,
        infeasible: 0,
        mismatches: Vec::new(),
    };
    for (trial, (inst, outcome)) in instances.into_iter().zip(outcomes).enumerate() {
        let (search, oracle) = outcome?;
        if search.is_none() && oracle.is_none() {
            report.infeasible += 1;
        }
        if search != oracle {
            report.mismatches.push(Mismatch {
                trial,
                instance: inst,
                search_total_s: search,
                oracle_total_s: oracle,
            });
        }
    }
    Ok(report)
}
