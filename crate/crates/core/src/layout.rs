//! Parameter shard placement and resharding between configurations.

use serde::{Deserialize, Serialize};

use crate::cost::{LayerStrategy, ParallelismConfig, Workload};
use crate::profile::{HardwareProfile, ModelProfile};
use crate::spec::LinkId;

/// Iterations of stall charged for checkpoint save and restore.
pub const DEFAULT_CHECKPOINT_ITERATIONS: f64 = 2.0;

/// A contiguous run of one layer's parameter elements held by a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub layer: usize,
    pub start: u64,
    pub end: u64,
    /// Replicated layers sit on every tensor-parallel rank of a stage; only
    /// rank 0 owns the primary copy that counts towards coverage.
    pub primary: bool,
}

impl Shard {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardLayout {
    pub devices: Vec<Vec<Shard>>,
    /// One group per data-parallel replica: the pp·tp devices that together
    /// hold one full copy of the model.
    pub replica_groups: Vec<Vec<usize>>,
    pub layer_params: Vec<u64>,
    /// Optimizer-state partitioning across each replica set; memory only.
    pub zero_stage: u8,
}

/// Element range of tensor-parallel shard `t` out of `tp`.
pub fn tp_range(params: u64, t: usize, tp: usize) -> (u64, u64) {
    let cut = |i: usize| ((params as u128 * i as u128) / tp as u128) as u64;
    (cut(t), cut(t + 1))
}

impl ShardLayout {
    pub fn build(config: &ParallelismConfig, model: &ModelProfile) -> ShardLayout {
        let (dp, tp) = (config.dp, config.tp);
        let total = dp * tp * config.pp;
        let mut devices = vec![Vec::new(); total];
        for stage in 0..config.pp {
            for layer in config.stage_layers(stage) {
                let params = model.layers[layer].param_count;
                for r in 0..dp {
                    for t in 0..tp {
                        let dev = stage * dp * tp + r * tp + t;
                        let shard = match config.layer_strategies[layer] {
                            LayerStrategy::TensorParallel => {
                                let (start, end) = tp_range(params, t, tp);
                                Shard { layer, start, end, primary: true }
                            }
                            LayerStrategy::DataReplicated => Shard {
                                layer,
                                start: 0,
                                end: params,
                                primary: t == 0,
                            },
                        };
                        devices[dev].push(shard);
                    }
                }
            }
        }
        let replica_groups = (0..dp)
            .map(|r| {
                (0..config.pp)
                    .flat_map(|s| (0..tp).map(move |t| s * dp * tp + r * tp + t))
                    .collect()
            })
            .collect();
        ShardLayout {
            devices,
            replica_groups,
            layer_params: model.layers.iter().map(|l| l.param_count).collect(),
            zero_stage: config.zero_stage,
        }
    }

    pub fn total_params(&self) -> u64 {
        self.layer_params.iter().sum()
    }

    /// Checks that every replica group's primary shards tile the model
    /// exactly once.
    pub fn audit(&self) -> Result<(), String> {
        let mut seen = vec![false; self.devices.len()];
        for g in &self.replica_groups {
            for &d in g {
                if d >= self.devices.len() || std::mem::replace(&mut seen[d], true) {
                    return Err(format!("device {d} is missing or in two replica groups"));
                }
            }
        }
        if let Some(d) = seen.iter().position(|s| !s) {
            return Err(format!("device {d} belongs to no replica group"));
        }
        for (gi, g) in self.replica_groups.iter().enumerate() {
            let mut per_layer: Vec<Vec<(u64, u64)>> = vec![Vec::new(); self.layer_params.len()];
            for &d in g {
                for s in self.devices[d].iter().filter(|s| s.primary) {
                    if s.layer >= per_layer.len() || s.start > s.end || s.end > self.layer_params[s.layer] {
                        return Err(format!("device {d} holds out-of-range shard {s:?}"));
                    }
                    per_layer[s.layer].push((s.start, s.end));
                }
            }
            let mut covered = 0u64;
            for (layer, ranges) in per_layer.iter_mut().enumerate() {
                ranges.sort_unstable();
                let mut next = 0;
                for &(a, b) in ranges.iter() {
                    if a != next {
                        return Err(format!(
                            "replica group {gi}, layer {layer}: {} at element {next}",
                            if a < next { "overlap" } else { "gap" }
                        ));
                    }
                    next = b;
                }
                if next != self.layer_params[layer] {
                    return Err(format!("replica group {gi}, layer {layer}: covers {next} of {}", self.layer_params[layer]));
                }
                covered += next;
            }
            if covered != self.total_params() {
                return Err(format!("replica group {gi} covers {covered} elements"));
            }
        }
        Ok(())
    }

    /// Per-layer merged element ranges held by one device.
    fn holdings(&self, device: usize) -> Vec<Vec<(u64, u64)>> {
        let mut out = vec![Vec::new(); self.layer_params.len()];
        for s in &self.devices[device] {
            out[s.layer].push((s.start, s.end));
        }
        for r in &mut out {
            merge(r);
        }
        out
    }
}

fn merge(r: &mut Vec<(u64, u64)>) {
    r.retain(|(a, b)| a < b);
    r.sort_unstable();
    let mut out: Vec<(u64, u64)> = Vec::with_capacity(r.len());
    for &(a, b) in r.iter() {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    *r = out;
}

/// `a \ b` for merged, sorted range lists.
fn subtract(a: &[(u64, u64)], b: &[(u64, u64)]) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    for &(mut s, e) in a {
        for &(bs, be) in b {
            if be <= s || bs >= e {
                continue;
            }
            if bs > s {
                out.push((s, bs));
            }
            s = s.max(be);
            if s >= e {
                break;
            }
        }
        if s < e {
            out.push((s, e));
        }
    }
    out
}

fn total_len(r: &[(u64, u64)]) -> u64 {
    r.iter().map(|(a, b)| b - a).sum()
}

/// Elements each device must receive to go from `old` to `new`, and the
/// slowest link class any of them has to cross.
pub fn movement(old: &ShardLayout, new: &ShardLayout, hw: &HardwareProfile) -> (u64, LinkId) {
    let old_h: Vec<_> = (0..old.devices.len()).map(|d| old.holdings(d)).collect();
    let layers = new.layer_params.len();
    let nodes = old.devices.len().div_ceil(hw.gpus_per_node);
    // What each node already holds, per layer.
    let mut node_h = vec![vec![Vec::new(); layers]; nodes];
    for (d, h) in old_h.iter().enumerate() {
        for (l, r) in h.iter().enumerate() {
            node_h[hw.node_of(d)][l].extend_from_slice(r);
        }
    }
    for n in &mut node_h {
        for r in n.iter_mut() {
            merge(r);
        }
    }
    let mut moved = 0u64;
    let mut class = LinkId::Intra;
    for d in 0..new.devices.len() {
        let want = new.holdings(d);
        for (l, w) in want.iter().enumerate() {
            let missing = subtract(w, &old_h[d][l]);
            let n = total_len(&missing);
            if n == 0 {
                continue;
            }
            moved += n;
            if total_len(&subtract(&missing, &node_h[hw.node_of(d)][l])) > 0 {
                class = LinkId::Inter;
            }
        }
    }
    (moved, class)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionPlan {
    pub from_config: ParallelismConfig,
    pub to_config: ParallelismConfig,
    pub bytes_moved: f64,
    pub pause_s: f64,
    pub safe_point_step: u64,
}

/// Resharding cost of switching configurations at `step`.
///
/// `iteration_s` is the current iteration time; the checkpoint surcharge is
/// `checkpoint_iterations` of it. Identical configurations cost nothing.
pub fn plan_transition(
    from: &ParallelismConfig,
    to: &ParallelismConfig,
    w: &Workload,
    iteration_s: f64,
    checkpoint_iterations: f64,
    step: u64,
) -> TransitionPlan {
    let mut plan = TransitionPlan {
        from_config: from.clone(),
        to_config: to.clone(),
        bytes_moved: 0.0,
        pause_s: 0.0,
        safe_point_step: step,
    };
    if from == to {
        return plan;
    }
    let old = ShardLayout::build(from, &w.model);
    let new = ShardLayout::build(to, &w.model);
    let (elements, class) = movement(&old, &new, &w.hw);
    plan.bytes_moved = elements as f64 * w.precision_bytes as f64;
    plan.pause_s = plan.bytes_moved / w.hw.link_spec(class).bandwidth_bps + checkpoint_iterations * iteration_s;
    plan
}
