//! Analytic iteration-time and memory model.
//!
//! Communication follows the latency-bandwidth model. Pipelines are
//! accounted GPipe style: every stage is charged at the pace of the slowest
//! one, and `pp - 1` slots of fill/drain are idle.
//!
//! Devices are ranked tensor-parallel innermost, then data-parallel, then
//! pipeline stage: `rank = stage·dp·tp + replica·tp + shard`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::comm::CommPlan;
use crate::error::{Error, Result};
use crate::profile::{DatasetProfile, HardwareProfile, LayerProfile, ModelProfile};
use crate::spec::{LayerKind, LinkSpec};

/// Bytes of optimizer state per parameter for Adam (fp32 master weights,
/// momentum and variance).
pub const OPTIMIZER_BYTES_PER_PARAM: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerStrategy {
    // Declaration order doubles as the tie-break order: replicated first.
    DataReplicated,
    TensorParallel,
}

impl LayerStrategy {
    pub const BOTH: [LayerStrategy; 2] = [LayerStrategy::DataReplicated, LayerStrategy::TensorParallel];

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelismConfig {
    pub dp: usize,
    pub tp: usize,
    pub pp: usize,
    pub micro_batch_size: u64,
    pub num_micro_batches: u64,
    pub stage_boundaries: Vec<usize>,
    pub layer_strategies: Vec<LayerStrategy>,
    pub zero_stage: u8,
}

impl ParallelismConfig {
    /// Single-device configuration: one stage, everything replicated.
    pub fn single_device(layers: usize, global_batch: u64) -> Self {
        ParallelismConfig {
            dp: 1,
            tp: 1,
            pp: 1,
            micro_batch_size: global_batch,
            num_micro_batches: 1,
            stage_boundaries: vec![0, layers],
            layer_strategies: vec![LayerStrategy::DataReplicated; layers],
            zero_stage: 0,
        }
    }

    pub fn stage_of(&self, layer: usize) -> usize {
        self.stage_boundaries[1..].partition_point(|&b| b <= layer)
    }

    pub fn stage_layers(&self, stage: usize) -> std::ops::Range<usize> {
        self.stage_boundaries[stage]..self.stage_boundaries[stage + 1]
    }

    pub fn devices_per_stage(&self) -> usize {
        self.dp * self.tp
    }

    pub fn stage_devices(&self, stage: usize) -> std::ops::Range<usize> {
        let n = self.devices_per_stage();
        stage * n..(stage + 1) * n
    }

    /// Short, stable identifier used in traces.
    pub fn id(&self) -> String {
        let mut s = format!(
            "dp{}-tp{}-pp{}-mb{}-z{}-b",
            self.dp, self.tp, self.pp, self.micro_batch_size, self.zero_stage
        );
        let bounds: Vec<String> = self.stage_boundaries.iter().map(|b| b.to_string()).collect();
        s.push_str(&bounds.join("."));
        s.push_str("-s");
        let mut it = self.layer_strategies.iter().peekable();
        while let Some(&cur) = it.next() {
            let mut run = 1;
            while it.peek() == Some(&&cur) {
                it.next();
                run += 1;
            }
            let tag = match cur {
                LayerStrategy::DataReplicated => 'D',
                LayerStrategy::TensorParallel => 'T',
            };
            let _ = write!(s, "{tag}{run}");
        }
        s
    }

    /// Checks every structural invariant against the workload.
    pub fn check(&self, total_gpus: usize, model: &ModelProfile, global_batch: u64) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dp == 0 || self.tp == 0 || self.pp == 0 {
            return fail("degrees must be ≥ 1".into());
        }
        if self.dp * self.tp * self.pp != total_gpus {
            return fail(format!(
                "dp·tp·pp = {} but the cluster has {} GPUs",
                self.dp * self.tp * self.pp,
                total_gpus
            ));
        }
        if self.micro_batch_size == 0 {
            return fail("micro_batch_size must be ≥ 1".into());
        }
        let per_step = self.dp as u64 * self.micro_batch_size;
        if global_batch % per_step != 0 {
            return fail(format!(
                "dp·micro_batch_size = {per_step} does not divide global batch {global_batch}"
            ));
        }
        if self.num_micro_batches != global_batch / per_step {
            return fail(format!(
                "num_micro_batches = {} but global_batch/(dp·micro_batch_size) = {}",
                self.num_micro_batches,
                global_batch / per_step
            ));
        }
        let n = model.len();
        let b = &self.stage_boundaries;
        if b.len() != self.pp + 1 || b[0] != 0 || b[self.pp] != n {
            return fail(format!("stage_boundaries must be pp+1 indices from 0 to {n}"));
        }
        if b.windows(2).any(|w| w[0] >= w[1]) {
            return fail("stage_boundaries must be strictly increasing".into());
        }
        if self.layer_strategies.len() != n {
            return fail(format!("expected {n} layer strategies"));
        }
        for (layer, s) in model.layers.iter().zip(&self.layer_strategies) {
            if *s == LayerStrategy::TensorParallel {
                if self.tp == 1 {
                    return fail(format!("layer {} is tensor_parallel but tp = 1", layer.index));
                }
                if !layer.tp_shardable {
                    return fail(format!("layer {} cannot be tensor-sharded", layer.index));
                }
            }
        }
        if self.zero_stage > 3 {
            return fail("zero_stage must be 0–3".into());
        }
        Ok(())
    }
}

/// Everything the cost model needs besides the configuration itself.
#[derive(Debug, Clone)]
pub struct Workload {
    pub hw: HardwareProfile,
    pub model: ModelProfile,
    pub dataset: DatasetProfile,
    pub precision_bytes: u32,
    pub zero_stage_allowed: u8,
    pub comm: CommPlan,
}

impl Workload {
    pub fn global_batch(&self) -> u64 {
        self.dataset.global_batch_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub compute_s: f64,
    pub tp_comm_s: f64,
    pub dp_sync_s: f64,
    pub p2p_s: f64,
    pub bubble_s: f64,
    pub transition_s: f64,
    pub total_s: f64,
    pub throughput: f64,
    pub comm_fraction: f64,
    /// Per-micro-batch time of every stage, slowdowns included.
    pub stage_times_s: Vec<f64>,
    pub bottleneck_stage: usize,
}

impl CostBreakdown {
    pub fn stage_imbalance(&self) -> f64 {
        let max = self.stage_times_s[self.bottleneck_stage];
        let mean = self.stage_times_s.iter().sum::<f64>() / self.stage_times_s.len() as f64;
        if mean > 0.0 {
            (max / mean - 1.0).max(0.0)
        } else {
            0.0
        }
    }

    pub fn gpu_utilization(&self) -> f64 {
        if self.total_s > 0.0 {
            (self.compute_s / self.total_s).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub model_state_bytes: f64,
    pub activation_bytes: f64,
    pub total_bytes: f64,
    pub headroom_fraction: f64,
}

impl MemoryFootprint {
    pub fn fits(&self) -> bool {
        self.headroom_fraction >= 0.0
    }
}

pub fn ring_allreduce_time(bytes: f64, n: usize, link: LinkSpec) -> f64 {
    allreduce_time(bytes, n, link, 1.0)
}

fn allreduce_time(bytes: f64, n: usize, link: LinkSpec, messages: f64) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let n = n as f64;
    2.0 * (n - 1.0) / n * bytes / link.bandwidth_bps + messages * 2.0 * (n - 1.0) * link.latency_s
}

pub fn p2p_time(bytes: f64, link: LinkSpec) -> f64 {
    bytes / link.bandwidth_bps + link.latency_s
}

/// Forward plus backward time of one layer for one micro-batch.
pub fn layer_compute_time(
    layer: &LayerProfile,
    strategy: LayerStrategy,
    tp: usize,
    micro_batch: u64,
    hw: &HardwareProfile,
) -> f64 {
    let divisor = match strategy {
        LayerStrategy::TensorParallel => tp as f64,
        LayerStrategy::DataReplicated => 1.0,
    };
    (layer.flops_fwd + layer.flops_bwd) * micro_batch as f64 / (hw.effective_flops * divisor)
}

/// Activation all-reduces a tensor-parallel layer needs per micro-batch:
/// two in the forward pass and two in the backward pass.
pub fn tp_activation_comm_time(
    layer: &LayerProfile,
    strategy: LayerStrategy,
    tp: usize,
    micro_batch: u64,
    link: LinkSpec,
) -> f64 {
    if tp <= 1 || strategy == LayerStrategy::DataReplicated || layer.kind == LayerKind::Embedding {
        return 0.0;
    }
    4.0 * ring_allreduce_time(layer.activation_bytes * micro_batch as f64, tp, link)
}

/// Cost of re-laying out the activation leaving `layer` when the next layer
/// uses the other strategy: one all-gather, modeled as half an all-reduce.
pub fn strategy_conversion_time(layer: &LayerProfile, tp: usize, micro_batch: u64, link: LinkSpec) -> f64 {
    ring_allreduce_time(layer.activation_bytes * micro_batch as f64, tp, link) / 2.0
}

/// Exposed gradient all-reduce time for one stage's data-parallel group.
pub fn dp_gradient_sync_time(
    grad_bytes: f64,
    grad_tensors: usize,
    dp: usize,
    link: LinkSpec,
    comm: &CommPlan,
    backward_s: f64,
) -> f64 {
    let raw = dp_raw_time(grad_bytes, grad_tensors, dp, link, comm);
    (raw - comm.overlap_factor * backward_s).max(0.0)
}

/// Gradient all-reduce time before any overlap with compute.
pub(crate) fn dp_raw_time(grad_bytes: f64, grad_tensors: usize, dp: usize, link: LinkSpec, comm: &CommPlan) -> f64 {
    if dp <= 1 {
        return 0.0;
    }
    let messages = comm.message_count(grad_tensors, grad_bytes);
    allreduce_time(grad_bytes, dp, link, messages)
}

pub fn pipeline_bubble_fraction(pp: usize, num_micro_batches: u64) -> f64 {
    let (p, m) = (pp as f64, num_micro_batches as f64);
    (p - 1.0) / (m + p - 1.0)
}

/// Model-state bytes per parameter under mixed precision with Adam.
pub fn bytes_per_param(zero_stage: u8, dp: usize, precision_bytes: u32) -> f64 {
    let p = precision_bytes as f64;
    let n = dp as f64;
    let opt = OPTIMIZER_BYTES_PER_PARAM;
    match zero_stage {
        0 => 2.0 * p + opt,
        1 => 2.0 * p + opt / n,
        2 => p + (p + opt) / n,
        _ => (2.0 * p + opt) / n,
    }
}

/// Per-layer quantities for a fixed (tp, micro-batch, tensor-parallel link).
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerTerms {
    pub compute: [f64; 2],
    pub comm: [f64; 2],
    pub params: [f64; 2],
    /// Charged on the next layer when it switches strategy.
    pub conv_out: f64,
    pub activation: f64,
    pub has_params: bool,
}

impl LayerTerms {
    pub fn allows(&self, s: LayerStrategy, shardable: bool, tp: usize) -> bool {
        s == LayerStrategy::DataReplicated || (tp > 1 && shardable)
    }
}

pub(crate) fn layer_terms(
    model: &ModelProfile,
    hw: &HardwareProfile,
    tp: usize,
    micro_batch: u64,
    tp_link: LinkSpec,
) -> Vec<LayerTerms> {
    model
        .layers
        .iter()
        .map(|l| {
            let both = |f: &dyn Fn(LayerStrategy) -> f64| {
                [f(LayerStrategy::DataReplicated), f(LayerStrategy::TensorParallel)]
            };
            LayerTerms {
                compute: both(&|s| layer_compute_time(l, s, tp, micro_batch, hw)),
                comm: both(&|s| tp_activation_comm_time(l, s, tp, micro_batch, tp_link)),
                params: both(&|s| match s {
                    LayerStrategy::DataReplicated => l.param_count as f64,
                    LayerStrategy::TensorParallel => l.param_count as f64 / tp as f64,
                }),
                conv_out: strategy_conversion_time(l, tp, micro_batch, tp_link),
                activation: l.activation_bytes,
                has_params: l.param_count > 0,
            }
        })
        .collect()
}

/// Running totals for one stage. Layers must be pushed in model order so
/// that the search and the estimator round identically.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct StageAcc {
    pub compute: f64,
    pub comm: f64,
    pub params: f64,
    pub activation: f64,
    pub tensors: usize,
    pub last: Option<(LayerStrategy, f64)>,
}

impl StageAcc {
    pub fn push(&mut self, t: &LayerTerms, s: LayerStrategy) {
        if let Some((prev, conv)) = self.last {
            if prev != s {
                self.comm += conv;
            }
        }
        self.compute += t.compute[s.slot()];
        self.comm += t.comm[s.slot()];
        self.params += t.params[s.slot()];
        self.activation += t.activation;
        self.tensors += t.has_params as usize;
        self.last = Some((s, t.conv_out));
    }

    /// Per-micro-batch stage time under a compute slowdown factor.
    pub fn time(&self, slowdown: f64) -> f64 {
        slowdown * self.compute + self.comm
    }
}

/// Links used by each stage's collectives for one (dp, tp, pp) layout.
#[derive(Debug, Clone)]
pub(crate) struct StageLinks {
    pub tp: Vec<LinkSpec>,
    pub dp: Vec<LinkSpec>,
    /// `p2p[k]` joins stage k and k+1.
    pub p2p: Vec<LinkSpec>,
}

impl StageLinks {
    pub fn new(hw: &HardwareProfile, dp: usize, tp: usize, pp: usize) -> Self {
        let per_stage = dp * tp;
        let worst = |groups: &mut dyn Iterator<Item = LinkSpec>| {
            groups
                .min_by(|a, b| a.bandwidth_bps.total_cmp(&b.bandwidth_bps))
                .unwrap_or(hw.intra_node)
        };
        let mut tp_links = Vec::with_capacity(pp);
        let mut dp_links = Vec::with_capacity(pp);
        let mut p2p = Vec::with_capacity(pp.saturating_sub(1));
        for k in 0..pp {
            let base = k * per_stage;
            tp_links.push(if tp > 1 {
                worst(&mut (0..dp).map(|d| hw.group_link((0..tp).map(|t| base + d * tp + t))))
            } else {
                hw.intra_node
            });
            dp_links.push(if dp > 1 {
                worst(&mut (0..tp).map(|t| hw.group_link((0..dp).map(|d| base + d * tp + t))))
            } else {
                hw.intra_node
            });
            if k + 1 < pp {
                p2p.push(worst(
                    &mut (0..per_stage).map(|r| hw.link(base + r, base + r + per_stage)),
                ));
            }
        }
        StageLinks {
            tp: tp_links,
            dp: dp_links,
            p2p,
        }
    }
}

/// Per-stage compute slowdowns; `None` means every stage runs at nominal speed.
pub type StageSlowdown<'a> = Option<&'a [f64]>;

fn slowdown_of(s: StageSlowdown<'_>, stage: usize) -> f64 {
    s.map_or(1.0, |v| v[stage])
}

pub(crate) fn stage_memory(
    acc: &StageAcc,
    zero_stage: u8,
    dp: usize,
    pp: usize,
    micro_batch: u64,
    precision_bytes: u32,
    device_memory: f64,
) -> MemoryFootprint {
    let model_state = acc.params * bytes_per_param(zero_stage, dp, precision_bytes);
    let activation = micro_batch as f64 * acc.activation * pp as f64;
    let total = model_state + activation;
    MemoryFootprint {
        model_state_bytes: model_state,
        activation_bytes: activation,
        total_bytes: total,
        headroom_fraction: (device_memory - total) / device_memory,
    }
}

fn accumulate_stages(config: &ParallelismConfig, w: &Workload, links: &StageLinks) -> Vec<StageAcc> {
    let mut terms_by_link: Vec<(LinkSpec, Vec<LayerTerms>)> = Vec::new();
    (0..config.pp)
        .map(|k| {
            let link = links.tp[k];
            let idx = match terms_by_link.iter().position(|(l, _)| *l == link) {
                Some(i) => i,
                None => {
                    let terms = layer_terms(&w.model, &w.hw, config.tp, config.micro_batch_size, link);
                    terms_by_link.push((link, terms));
                    terms_by_link.len() - 1
                }
            };
            let terms = &terms_by_link[idx].1;
            let mut acc = StageAcc::default();
            for i in config.stage_layers(k) {
                acc.push(&terms[i], config.layer_strategies[i]);
            }
            acc
        })
        .collect()
}

/// Footprint of the most loaded device.
pub fn memory_footprint(config: &ParallelismConfig, w: &Workload) -> MemoryFootprint {
    let links = StageLinks::new(&w.hw, config.dp, config.tp, config.pp);
    accumulate_stages(config, w, &links)
        .iter()
        .map(|acc| {
            stage_memory(
                acc,
                config.zero_stage,
                config.dp,
                config.pp,
                config.micro_batch_size,
                w.precision_bytes,
                w.hw.device_memory,
            )
        })
        .fold(None, |best: Option<MemoryFootprint>, m| match best {
            Some(b) if b.total_bytes >= m.total_bytes => Some(b),
            _ => Some(m),
        })
        .expect("pp ≥ 1")
}

pub fn estimate_iteration(config: &ParallelismConfig, w: &Workload) -> Result<CostBreakdown> {
    estimate_with_slowdown(config, w, None)
}

pub fn estimate_with_slowdown(
    config: &ParallelismConfig,
    w: &Workload,
    slowdown: StageSlowdown<'_>,
) -> Result<CostBreakdown> {
    config.check(w.hw.total_gpus, &w.model, w.global_batch())?;
    if let Some(s) = slowdown {
        if s.len() != config.pp {
            return Err(Error::Config(format!(
                "{} stage slowdowns for {} stages",
                s.len(),
                config.pp
            )));
        }
    }
    let links = StageLinks::new(&w.hw, config.dp, config.tp, config.pp);
    let stages = accumulate_stages(config, w, &links);
    Ok(combine_stages(config, w, &links, &stages, slowdown))
}

pub(crate) fn combine_stages(
    config: &ParallelismConfig,
    w: &Workload,
    links: &StageLinks,
    stages: &[StageAcc],
    slowdown: StageSlowdown<'_>,
) -> CostBreakdown {
    let m = config.num_micro_batches as f64;
    let stage_times: Vec<f64> = stages
        .iter()
        .enumerate()
        .map(|(k, a)| a.time(slowdown_of(slowdown, k)))
        .collect();
    let mut b = 0;
    for (k, &t) in stage_times.iter().enumerate() {
        if t > stage_times[b] {
            b = k;
        }
    }
    let bottleneck = stage_times[b];
    // The last micro-batch's backward pass on the slowest stage; backward
    // is two thirds of forward+backward compute.
    let backward_window = bottleneck * 2.0 / 3.0;

    let mut dp_sync = 0.0f64;
    for (k, acc) in stages.iter().enumerate() {
        let grad_bytes = acc.params * w.precision_bytes as f64;
        let t = dp_gradient_sync_time(grad_bytes, acc.tensors, config.dp, links.dp[k], &w.comm, backward_window);
        dp_sync = dp_sync.max(t);
    }

    let mut p2p_one_way = 0.0;
    for k in 0..config.pp.saturating_sub(1) {
        let last = config.stage_boundaries[k + 1] - 1;
        let bytes = w.model.layers[last].activation_bytes * config.micro_batch_size as f64;
        p2p_one_way += p2p_time(bytes, links.p2p[k]);
    }

    let compute_s = m * (slowdown_of(slowdown, b) * stages[b].compute);
    let tp_comm_s = m * stages[b].comm;
    let bubble_s = (config.pp - 1) as f64 * bottleneck;
    let p2p_s = 2.0 * p2p_one_way;
    let transition_s = 0.0;
    let total_s = compute_s + tp_comm_s + dp_sync + p2p_s + bubble_s + transition_s;

    let comm = tp_comm_s + dp_sync + p2p_s;
    let throughput = (w.global_batch() as f64 / total_s).min(w.dataset.max_input_throughput);
    CostBreakdown {
        compute_s,
        tp_comm_s,
        dp_sync_s: dp_sync,
        p2p_s,
        bubble_s,
        transition_s,
        total_s,
        throughput,
        comm_fraction: if total_s > 0.0 { comm / total_s } else { 0.0 },
        stage_times_s: stage_times,
        bottleneck_stage: b,
    }
}

impl CostBreakdown {
    /// Adds a one-off transition pause to this iteration.
    pub fn with_transition(mut self, pause_s: f64, global_batch: u64, loader_cap: f64) -> Self {
        self.transition_s = pause_s;
        self.total_s = self.compute_s + self.tp_comm_s + self.dp_sync_s + self.p2p_s + self.bubble_s + self.transition_s;
        let comm = self.tp_comm_s + self.dp_sync_s + self.p2p_s;
        self.throughput = (global_batch as f64 / self.total_s).min(loader_cap);
        self.comm_fraction = if self.total_s > 0.0 { comm / self.total_s } else { 0.0 };
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{profile_hardware, profile_model};
    use crate::spec::{ClusterSpec, LayerSpec, ModelSpec};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    fn hw(nodes: u32, per: u32) -> HardwareProfile {
        profile_hardware(&ClusterSpec {
            node_count: nodes,
            gpus_per_node: per,
            device_memory_bytes: 80e9,
            device_peak_flops: 100e12,
            device_efficiency: 0.5,
            intra_node: LinkSpec::new(300e9, 1e-6),
            inter_node: LinkSpec::new(25e9, 5e-6),
        })
    }

    #[test]
    fn ring_allreduce_examples() {
        let t = ring_allreduce_time(1e9, 4, LinkSpec::new(100e9, 5e-6));
        assert!(close(t, 0.01503, 1e-12), "{t}");
        assert_eq!(ring_allreduce_time(123.0, 1, LinkSpec::new(1.0, 1.0)), 0.0);
        let t = ring_allreduce_time(2e9, 8, LinkSpec::new(25e9, 5e-6));
        assert!(close(t, 0.14007, 1e-12), "{t}");
    }

    #[test]
    fn p2p_examples() {
        assert!(close(p2p_time(1e8, LinkSpec::new(300e9, 1e-6)), 3.34333333e-4, 1e-8));
        assert_eq!(p2p_time(0.0, LinkSpec::new(300e9, 1e-6)), 1e-6);
        assert!(close(p2p_time(3e8, LinkSpec::new(25e9, 5e-6)), 0.012005, 1e-12));
    }

    fn layer(flops_fwd: f64, act: f64) -> LayerProfile {
        LayerProfile {
            index: 0,
            kind: LayerKind::Attention,
            param_count: 1,
            flops_fwd,
            flops_bwd: 2.0 * flops_fwd,
            activation_bytes: act,
            tp_shardable: true,
        }
    }

    #[test]
    fn compute_time_examples() {
        let hw = hw(1, 2);
        let l = layer(1e12, 0.0);
        let dr = layer_compute_time(&l, LayerStrategy::DataReplicated, 2, 1, &hw);
        assert!(close(dr, 0.06, 1e-12));
        let tp = layer_compute_time(&l, LayerStrategy::TensorParallel, 2, 1, &hw);
        assert!(close(tp, 0.03, 1e-12));
        assert_eq!(layer_compute_time(&layer(0.0, 0.0), LayerStrategy::DataReplicated, 1, 8, &hw), 0.0);
    }

    #[test]
    fn tp_comm_examples() {
        let link = LinkSpec::new(300e9, 1e-6);
        let l = layer(1.0, 1e6);
        assert_eq!(tp_activation_comm_time(&l, LayerStrategy::TensorParallel, 1, 8, link), 0.0);
        let t = tp_activation_comm_time(&l, LayerStrategy::TensorParallel, 2, 8, link);
        assert!(close(t, 1.146666667e-4, 1e-8), "{t}");
        assert_eq!(tp_activation_comm_time(&l, LayerStrategy::DataReplicated, 8, 8, link), 0.0);
        let mut emb = l.clone();
        emb.kind = LayerKind::Embedding;
        assert_eq!(tp_activation_comm_time(&emb, LayerStrategy::TensorParallel, 2, 8, link), 0.0);
    }

    #[test]
    fn dp_sync_examples() {
        let link = LinkSpec::new(25e9, 5e-6);
        let plain = CommPlan::unoptimized();
        assert_eq!(dp_gradient_sync_time(2e9, 1, 1, link, &plain, 0.0), 0.0);
        let t = dp_gradient_sync_time(2e9, 1, 4, link, &plain, 0.1);
        assert!(close(t, 0.12003, 1e-12), "{t}");
        let overlap = CommPlan {
            overlap_enabled: true,
            overlap_factor: 0.8,
            ..plain
        };
        let t = dp_gradient_sync_time(2e9, 1, 4, link, &overlap, 0.1);
        assert!(close(t, 0.04003, 1e-10), "{t}");
    }

    #[test]
    fn bubble_examples() {
        assert_eq!(pipeline_bubble_fraction(1, 17), 0.0);
        assert!(close(pipeline_bubble_fraction(4, 32), 3.0 / 35.0, 1e-15));
        assert_eq!(pipeline_bubble_fraction(4, 1), 0.75);
        for pp in 2..6 {
            for m in 1..50 {
                assert!(pipeline_bubble_fraction(pp, m + 1) < pipeline_bubble_fraction(pp, m));
            }
        }
    }

    #[test]
    fn zero_bytes_per_param() {
        assert_eq!(1e9 * bytes_per_param(0, 4, 2), 16e9);
        assert_eq!(1e9 * bytes_per_param(1, 4, 2), 7e9);
        assert_eq!(1e9 * bytes_per_param(3, 8, 2), 2e9);
        assert_eq!(bytes_per_param(2, 4, 2), 2.0 + 14.0 / 4.0);
        for dp in [1, 2, 4, 8, 16] {
            assert_eq!(1e9 * bytes_per_param(3, dp, 2), 16e9 / dp as f64);
        }
    }

    fn workload(hw: HardwareProfile, layers: Vec<LayerSpec>, global_batch: u64, comm: CommPlan) -> Workload {
        let model = profile_model(&ModelSpec { layers }, 2).unwrap();
        Workload {
            hw,
            model,
            dataset: DatasetProfile {
                max_input_throughput: 1e12,
                global_batch_size: global_batch,
            },
            precision_bytes: 2,
            zero_stage_allowed: 3,
            comm,
        }
    }

    #[test]
    fn single_gpu_is_compute_only() {
        let w = workload(
            hw(1, 1),
            vec![LayerSpec::new(LayerKind::Mlp, 1000).with_flops(1e9).with_activation(10)],
            4,
            CommPlan::default(),
        );
        let cfg = ParallelismConfig::single_device(1, 4);
        let c = estimate_iteration(&cfg, &w).unwrap();
        assert_eq!(c.total_s, c.compute_s);
        assert_eq!(c.comm_fraction, 0.0);
        assert_eq!(c.bubble_s, 0.0);
        assert!(close(c.compute_s, 3e9 * 4.0 / 50e12, 1e-12));
    }

    #[test]
    fn config_invariants_rejected() {
        let w = workload(
            hw(1, 4),
            vec![LayerSpec::new(LayerKind::Other, 10).with_flops(1.0); 4],
            8,
            CommPlan::default(),
        );
        let good = ParallelismConfig {
            dp: 2,
            tp: 1,
            pp: 2,
            micro_batch_size: 2,
            num_micro_batches: 2,
            stage_boundaries: vec![0, 2, 4],
            layer_strategies: vec![LayerStrategy::DataReplicated; 4],
            zero_stage: 0,
        };
        estimate_iteration(&good, &w).unwrap();
        let mut bad = good.clone();
        bad.dp = 4;
        assert!(estimate_iteration(&bad, &w).is_err());
        let mut bad = good.clone();
        bad.stage_boundaries = vec![0, 0, 4];
        assert!(estimate_iteration(&bad, &w).is_err());
        let mut bad = good.clone();
        bad.micro_batch_size = 3;
        assert!(estimate_iteration(&bad, &w).is_err());
        let mut bad = good.clone();
        bad.layer_strategies[0] = LayerStrategy::TensorParallel;
        assert!(estimate_iteration(&bad, &w).is_err());
    }

    #[test]
    fn stage_lookup_and_id() {
        let cfg = ParallelismConfig {
            dp: 1,
            tp: 2,
            pp: 3,
            micro_batch_size: 1,
            num_micro_batches: 1,
            stage_boundaries: vec![0, 2, 3, 6],
            layer_strategies: vec![
                LayerStrategy::TensorParallel,
                LayerStrategy::TensorParallel,
                LayerStrategy::DataReplicated,
                LayerStrategy::DataReplicated,
                LayerStrategy::DataReplicated,
                LayerStrategy::TensorParallel,
            ],
            zero_stage: 1,
        };
        let stages: Vec<usize> = (0..6).map(|i| cfg.stage_of(i)).collect();
        assert_eq!(stages, vec![0, 0, 1, 2, 2, 2]);
        assert_eq!(cfg.id(), "dp1-tp2-pp3-mb1-z1-b0.2.3.6-sT2D3T1");
        assert_eq!(cfg.stage_devices(2), 4..6);
    }
}
