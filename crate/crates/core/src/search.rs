//! Discovery-phase strategy search.
//!
//! The degree space (dp, tp, pp) is enumerated over powers of two and pruned
//! by a short rule list. For every surviving (degrees, micro-batch) pair a
//! dynamic program picks stage cuts and per-layer strategies. Stage cuts
//! move more than the pipeline's slowest stage: they also decide which
//! activations cross stage boundaries and how many gradients each
//! data-parallel group reduces. The program therefore keeps, per prefix, the
//! Pareto front over (slowest stage time, largest gradient all-reduce,
//! boundary traffic). Iteration time is monotone in each of the three, so
//! the front always contains the optimum.
//!
//! [`exhaustive_plan`] enumerates the same space by brute force and is used
//! to check the search.

use std::cmp::Ordering;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{
    bytes_per_param, dp_raw_time, estimate_with_slowdown, layer_terms, p2p_time,
    stage_memory, CostBreakdown, LayerStrategy, LayerTerms, MemoryFootprint, ParallelismConfig,
    StageAcc, StageLinks, Workload,
};
use crate::error::{Error, Result};
use crate::spec::LinkSpec;

pub const ORACLE_MAX_GPUS: usize = 16;
pub const ORACLE_MAX_LAYERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Largest micro-batch size considered.
    pub max_micro_batch: u64,
    /// Models above this many parameters are never planned without a
    /// pipeline on multi-GPU clusters.
    pub pipeline_param_threshold: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            max_micro_batch: 64,
            pipeline_param_threshold: 1e9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PruneRule {
    /// Tensor-parallel group would span nodes.
    R1TpExceedsNode,
    /// Pure data parallelism cannot hold the model states.
    R2ReplicatedStatesExceedMemory,
    /// Large model on several GPUs without a pipeline.
    R3LargeModelNeedsPipeline,
    /// More stages than layers.
    R4StagesExceedLayers,
    /// No power-of-two micro-batch splits the per-replica batch.
    NoMicroBatch,
}

impl PruneRule {
    pub fn name(self) -> &'static str {
        match self {
            PruneRule::R1TpExceedsNode => "R1",
            PruneRule::R2ReplicatedStatesExceedMemory => "R2",
            PruneRule::R3LargeModelNeedsPipeline => "R3",
            PruneRule::R4StagesExceedLayers => "R4",
            PruneRule::NoMicroBatch => "no-micro-batch",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            PruneRule::R1TpExceedsNode => "tp > gpus_per_node",
            PruneRule::R2ReplicatedStatesExceedMemory => "replicated model states exceed device memory",
            PruneRule::R3LargeModelNeedsPipeline => "total params above threshold require pp > 1",
            PruneRule::R4StagesExceedLayers => "pp > layer count",
            PruneRule::NoMicroBatch => "global batch not divisible into power-of-two micro-batches",
        }
    }

    /// Rules that only remove configurations that cannot run at all.
    fn is_hard(self) -> bool {
        matches!(
            self,
            PruneRule::R1TpExceedsNode | PruneRule::R4StagesExceedLayers | PruneRule::NoMicroBatch
        )
    }
}

impl fmt::Display for PruneRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.name(), self.describe())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Degrees {
    pub dp: usize,
    pub tp: usize,
    pub pp: usize,
}

impl fmt::Display for Degrees {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(dp={}, tp={}, pp={})", self.dp, self.tp, self.pp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub degrees: Degrees,
    pub micro_batch_options: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub pruning_log: Vec<(Degrees, PruneRule)>,
}

impl CandidateSet {
    pub fn degree_triples(&self) -> Vec<Degrees> {
        self.candidates.iter().map(|c| c.degrees).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: ParallelismConfig,
    pub best_cost: CostBreakdown,
    pub memory: MemoryFootprint,
    pub evaluated_count: usize,
    pub pruning_log: Vec<(Degrees, PruneRule)>,
}

/// All `(dp, tp, pp)` powers of two whose product is `total`, in
/// lexicographic (pp, tp, dp) order. Empty when `total` is not a power of two.
pub fn power_of_two_triples(total: usize) -> Vec<Degrees> {
    if total == 0 || !total.is_power_of_two() {
        return Vec::new();
    }
    let e = total.trailing_zeros();
    let mut out = Vec::new();
    for pe in 0..=e {
        for te in 0..=e - pe {
            let de = e - pe - te;
            out.push(Degrees {
                dp: 1 << de,
                tp: 1 << te,
                pp: 1 << pe,
            });
        }
    }
    out
}

/// Power-of-two micro-batch sizes ≤ `cap` that divide `per_replica`.
pub fn micro_batch_options(per_replica: u64, cap: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut mb = 1;
    while mb <= cap && mb <= per_replica {
        if per_replica % mb == 0 {
            out.push(mb);
        }
        mb *= 2;
    }
    out
}

fn rules_for(d: Degrees, w: &Workload, opts: &SearchOptions, hard_only: bool) -> Option<PruneRule> {
    let hw = &w.hw;
    let gb = w.global_batch();
    let checks: [(PruneRule, bool); 5] = [
        (PruneRule::R1TpExceedsNode, d.tp > hw.gpus_per_node),
        (
            PruneRule::R3LargeModelNeedsPipeline,
            d.pp == 1 && hw.total_gpus > 1 && w.model.total_params as f64 > opts.pipeline_param_threshold,
        ),
        (PruneRule::R4StagesExceedLayers, d.pp > w.model.len()),
        (
            PruneRule::R2ReplicatedStatesExceedMemory,
            d.tp == 1
                && d.pp == 1
                && w.model.total_params as f64 * bytes_per_param(w.zero_stage_allowed, d.dp, w.precision_bytes)
                    > hw.device_memory,
        ),
        (
            PruneRule::NoMicroBatch,
            gb % d.dp as u64 != 0 || micro_batch_options(gb / d.dp as u64, opts.max_micro_batch).is_empty(),
        ),
    ];
    checks
        .into_iter()
        .find(|&(rule, hit)| hit && (!hard_only || rule.is_hard()))
        .map(|(rule, _)| rule)
}

fn enumerate(w: &Workload, opts: &SearchOptions, hard_only: bool) -> CandidateSet {
    let mut candidates = Vec::new();
    let mut pruning_log = Vec::new();
    for d in power_of_two_triples(w.hw.total_gpus) {
        match rules_for(d, w, opts, hard_only) {
            Some(rule) => pruning_log.push((d, rule)),
            None => candidates.push(Candidate {
                degrees: d,
                micro_batch_options: micro_batch_options(w.global_batch() / d.dp as u64, opts.max_micro_batch),
            }),
        }
    }
    CandidateSet {
        candidates,
        pruning_log,
    }
}

/// Prunes the degree space with rules R1–R4 and attaches micro-batch options.
pub fn enumerate_degree_candidates(w: &Workload, opts: &SearchOptions) -> Result<CandidateSet> {
    let set = enumerate(w, opts, false);
    if set.candidates.is_empty() {
        return Err(Error::NoFeasibleStrategy(format!(
            "every degree triple for {} GPUs was pruned",
            w.hw.total_gpus
        )));
    }
    Ok(set)
}

/// Contiguous split of `layer_costs` into `pp` stages minimising the
/// largest stage load. Among optimal splits the one with the earliest
/// boundaries wins.
pub fn partition_stages(layer_costs: &[f64], pp: usize) -> Result<Vec<usize>> {
    partition_stages_weighted(layer_costs, &vec![1.0; pp])
}

/// As [`partition_stages`], with stage `k`'s load multiplied by `stage_scale[k]`.
pub fn partition_stages_weighted(layer_costs: &[f64], stage_scale: &[f64]) -> Result<Vec<usize>> {
    let n = layer_costs.len();
    let pp = stage_scale.len();
    if pp == 0 || pp > n {
        return Err(Error::Config(format!("cannot split {n} layers into {pp} stages")));
    }
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + layer_costs[i];
    }
    let load = |k: usize, a: usize, b: usize| stage_scale[k] * (prefix[b] - prefix[a]);

    // suffix[k][i]: best max-load for layers i.. split into stages k..pp.
    let mut suffix = vec![vec![f64::INFINITY; n + 1]; pp + 1];
    suffix[pp][n] = 0.0;
    for k in (0..pp).rev() {
        for i in k..n {
            let mut best = f64::INFINITY;
            for j in i + 1..=n - (pp - 1 - k) {
                let v = load(k, i, j).max(suffix[k + 1][j]);
                if v < best {
                    best = v;
                }
            }
            suffix[k][i] = best;
        }
    }
    let target = suffix[0][0];
    let mut bounds = vec![0];
    let mut cur = 0;
    for k in 0..pp {
        let next = (cur + 1..=n - (pp - 1 - k))
            .find(|&j| load(k, cur, j).max(suffix[k + 1][j]) <= target)
            .expect("an optimal continuation exists");
        bounds.push(next);
        cur = next;
    }
    Ok(bounds)
}

/// Two-state dynamic program over a chain of layers.
///
/// `cost[i][s]` is layer i's cost under strategy s (indexed like
/// [`LayerStrategy::BOTH`]), `switch[i]` the cost paid when layer i uses a
/// different strategy from layer i-1, and `allowed[i][s]` masks choices.
/// Ties go to `DataReplicated`.
pub fn assign_chain(cost: &[[f64; 2]], switch: &[f64], allowed: &[[bool; 2]]) -> (Vec<LayerStrategy>, f64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let mut best = vec![[f64::INFINITY; 2]; n];
    let mut from = vec![[0usize; 2]; n];
    for s in 0..2 {
        if allowed[0][s] {
            best[0][s] = cost[0][s];
        }
    }
    for i in 1..n {
        for s in 0..2 {
            if !allowed[i][s] {
                continue;
            }
            let mut pick = 0;
            let mut val = f64::INFINITY;
            for p in 0..2 {
                let v = best[i - 1][p] + if p == s { 0.0 } else { switch[i] };
                if v < val {
                    val = v;
                    pick = p;
                }
            }
            best[i][s] = val + cost[i][s];
            from[i][s] = pick;
        }
    }
    let mut s = if best[n - 1][1] < best[n - 1][0] { 1 } else { 0 };
    let total = best[n - 1][s];
    let mut out = vec![LayerStrategy::DataReplicated; n];
    for i in (0..n).rev() {
        out[i] = LayerStrategy::BOTH[s];
        s = from[i][s];
    }
    (out, total)
}

/// Per-layer strategies minimising each stage's time for fixed stage cuts.
pub fn assign_layer_strategies(
    w: &Workload,
    degrees: Degrees,
    stage_boundaries: &[usize],
    micro_batch: u64,
) -> Vec<LayerStrategy> {
    let links = StageLinks::new(&w.hw, degrees.dp, degrees.tp, degrees.pp);
    let mut out = Vec::with_capacity(w.model.len());
    for k in 0..degrees.pp {
        let terms = layer_terms(&w.model, &w.hw, degrees.tp, micro_batch, links.tp[k]);
        let range = stage_boundaries[k]..stage_boundaries[k + 1];
        let cost: Vec<[f64; 2]> = range.clone().map(|i| [0, 1].map(|s| terms[i].compute[s] + terms[i].comm[s])).collect();
        let switch: Vec<f64> = range
            .clone()
            .map(|i| if i == range.start { 0.0 } else { terms[i - 1].conv_out })
            .collect();
        let allowed: Vec<[bool; 2]> = range
            .clone()
            .map(|i| LayerStrategy::BOTH.map(|s| terms[i].allows(s, w.model.layers[i].tp_shardable, degrees.tp)))
            .collect();
        out.extend(assign_chain(&cost, &switch, &allowed).0);
    }
    out
}

/// Slowdown of each stage given per-device slowdowns: a stage runs at the
/// pace of its slowest device.
pub fn stage_slowdown_from_devices(device_slowdown: &[f64], d: Degrees) -> Vec<f64> {
    let per = d.dp * d.tp;
    (0..d.pp)
        .map(|k| device_slowdown[k * per..(k + 1) * per].iter().copied().fold(1.0f64, f64::max))
        .collect()
}

/// One way to fill a stage with a contiguous run of layers.
#[derive(Debug, Clone)]
struct SegmentOption {
    time: f64,
    raw_sync: f64,
    strategies: Vec<LayerStrategy>,
}

#[derive(Debug, Clone)]
struct Partial {
    acc: StageAcc,
    time: f64,
    strategies: Vec<LayerStrategy>,
}

fn dominates_tp(a: &Partial, b: &Partial) -> bool {
    a.time <= b.time && a.acc.params <= b.acc.params
}

fn insert_partial(front: &mut Vec<Partial>, cand: Partial) {
    if front.iter().any(|p| dominates_tp(p, &cand)) {
        return;
    }
    front.retain(|p| !dominates_tp(&cand, p));
    front.push(cand);
}

struct StageContext<'a> {
    terms: &'a [LayerTerms],
    slowdown: f64,
    dp_link: LinkSpec,
    /// Largest per-device parameter count that still fits at the most
    /// aggressive ZeRO stage, given the segment's activation bytes.
    memory: MemoryLimit,
}

#[derive(Clone, Copy)]
struct MemoryLimit {
    zero_stage: u8,
    dp: usize,
    pp: usize,
    micro_batch: u64,
    precision: u32,
    device_memory: f64,
}

impl MemoryLimit {
    fn fits(&self, acc: &StageAcc) -> bool {
        stage_memory(acc, self.zero_stage, self.dp, self.pp, self.micro_batch, self.precision, self.device_memory)
            .fits()
    }
}

/// Pareto options for every segment starting at `start`, indexed by end.
fn segment_options(
    w: &Workload,
    ctx: &StageContext<'_>,
    tp: usize,
    start: usize,
    max_end: usize,
) -> Vec<Vec<SegmentOption>> {
    let n = w.model.len();
    let mut by_end: Vec<Vec<SegmentOption>> = vec![Vec::new(); n + 1];
    // fronts[s]: partial assignments whose last layer uses strategy s.
    let mut fronts: [Vec<Partial>; 2] = [vec![Partial {
        acc: StageAcc::default(),
        time: 0.0,
        strategies: Vec::new(),
    }], Vec::new()];
    let mut first = true;
    for i in start..max_end {
        let t = &ctx.terms[i];
        let shardable = w.model.layers[i].tp_shardable;
        let mut next: [Vec<Partial>; 2] = [Vec::new(), Vec::new()];
        let sources: Vec<&Partial> = if first {
            vec![&fronts[0][0]]
        } else {
            fronts[0].iter().chain(fronts[1].iter()).collect()
        };
        for (slot, s) in LayerStrategy::BOTH.into_iter().enumerate() {
            if !t.allows(s, shardable, tp) {
                continue;
            }
            for p in &sources {
                let mut acc = p.acc;
                acc.push(t, s);
                if !ctx.memory.fits(&acc) {
                    continue;
                }
                let mut strategies = p.strategies.clone();
                strategies.push(s);
                insert_partial(
                    &mut next[slot],
                    Partial {
                        time: acc.time(ctx.slowdown),
                        acc,
                        strategies,
                    },
                );
            }
        }
        first = false;
        fronts = next;
        if fronts[0].is_empty() && fronts[1].is_empty() {
            break;
        }
        // Segment [start, i+1) ends here; merge both fronts.
        let mut merged: Vec<Partial> = Vec::new();
        for p in fronts[0].iter().chain(fronts[1].iter()) {
            insert_partial(&mut merged, p.clone());
        }
        by_end[i + 1] = merged
            .into_iter()
            .map(|p| SegmentOption {
                time: p.time,
                raw_sync: dp_raw_time(
                    p.acc.params * w.precision_bytes as f64,
                    p.acc.tensors,
                    ctx.memory.dp,
                    ctx.dp_link,
                    &w.comm,
                ),
                strategies: p.strategies,
            })
            .collect();
    }
    by_end
}

#[derive(Debug, Clone, Copy)]
struct PrefixState {
    slowest: f64,
    max_sync: f64,
    p2p: f64,
    /// (previous prefix end, index into that front, segment option index)
    back: Option<(usize, usize, usize)>,
}

fn dominates_prefix(a: &PrefixState, b: &PrefixState) -> bool {
    a.slowest <= b.slowest && a.max_sync <= b.max_sync && a.p2p <= b.p2p
}

/// Best stage cuts and layer strategies for fixed degrees and micro-batch.
/// Returns `None` when no layout fits in memory.
fn best_layout(
    w: &Workload,
    d: Degrees,
    micro_batch: u64,
    stage_slowdown: Option<&[f64]>,
) -> Option<(ParallelismConfig, CostBreakdown)> {
    let n = w.model.len();
    let gb = w.global_batch();
    if d.pp > n || gb % (d.dp as u64 * micro_batch) != 0 {
        return None;
    }
    let m = gb / (d.dp as u64 * micro_batch);
    let links = StageLinks::new(&w.hw, d.dp, d.tp, d.pp);
    let slow = |k: usize| stage_slowdown.map_or(1.0, |s| s[k]);
    let limit = MemoryLimit {
        zero_stage: w.zero_stage_allowed,
        dp: d.dp,
        pp: d.pp,
        micro_batch,
        precision: w.precision_bytes,
        device_memory: w.hw.device_memory,
    };

    // Stages sharing links and slowdown share segment options.
    let mut term_cache: Vec<(LinkSpec, Vec<LayerTerms>)> = Vec::new();
    let mut stage_class: Vec<usize> = Vec::with_capacity(d.pp);
    let mut classes: Vec<(LinkSpec, LinkSpec, f64)> = Vec::new();
    for k in 0..d.pp {
        let key = (links.tp[k], links.dp[k], slow(k));
        let idx = classes.iter().position(|c| *c == key).unwrap_or_else(|| {
            classes.push(key);
            classes.len() - 1
        });
        stage_class.push(idx);
        if !term_cache.iter().any(|(l, _)| *l == links.tp[k]) {
            term_cache.push((links.tp[k], layer_terms(&w.model, &w.hw, d.tp, micro_batch, links.tp[k])));
        }
    }
    // options[class][start][end]
    let options: Vec<Vec<Vec<Vec<SegmentOption>>>> = classes
        .iter()
        .map(|&(tp_link, dp_link, slowdown)| {
            let terms = &term_cache.iter().find(|(l, _)| *l == tp_link).unwrap().1;
            let ctx = StageContext {
                terms,
                slowdown,
                dp_link,
                memory: limit,
            };
            (0..n).map(|a| segment_options(w, &ctx, d.tp, a, n)).collect()
        })
        .collect();

    // Pipeline terms are bounded below by (m + pp - 1) x slowest stage, so
    // a feasible incumbent lets the search drop hopeless prefixes.
    let span_factor = (m + d.pp as u64 - 1) as f64;
    let incumbent = incumbent_total(w, d, micro_batch, m, stage_slowdown);

    // fronts[k][i]: prefixes of i layers split into k stages.
    let mut fronts: Vec<Vec<Vec<PrefixState>>> = vec![vec![Vec::new(); n + 1]; d.pp + 1];
    fronts[0][0].push(PrefixState {
        slowest: 0.0,
        max_sync: 0.0,
        p2p: 0.0,
        back: None,
    });
    for k in 0..d.pp {
        let class = stage_class[k];
        let remaining = d.pp - 1 - k;
        let (done, rest) = fronts.split_at_mut(k + 1);
        let (current, next) = (&done[k], &mut rest[0]);
        for j in k..=n - remaining - 1 {
            if current[j].is_empty() {
                continue;
            }
            let boundary_p2p = if k > 0 {
                p2p_time(w.model.layers[j - 1].activation_bytes * micro_batch as f64, links.p2p[k - 1])
            } else {
                0.0
            };
            let ends = if remaining == 0 { n..=n } else { j + 1..=n - remaining };
            for e in ends {
                for (oi, opt) in options[class][j][e].iter().enumerate() {
                    for (si, st) in current[j].iter().enumerate() {
                        let cand = PrefixState {
                            slowest: st.slowest.max(opt.time),
                            max_sync: st.max_sync.max(opt.raw_sync),
                            p2p: if k > 0 { st.p2p + boundary_p2p } else { st.p2p },
                            back: Some((j, si, oi)),
                        };
                        if span_factor * cand.slowest + 2.0 * cand.p2p > incumbent * (1.0 + 1e-9) {
                            continue;
                        }
                        let front = &mut next[e];
                        if front.iter().any(|p| dominates_prefix(p, &cand)) {
                            continue;
                        }
                        front.retain(|p| !dominates_prefix(&cand, p));
                        front.push(cand);
                    }
                }
            }
        }
    }

    let mut best: Option<(ParallelismConfig, CostBreakdown)> = None;
    for idx in 0..fronts[d.pp][n].len() {
        let mut bounds = vec![n];
        let mut strategies: Vec<Vec<LayerStrategy>> = Vec::with_capacity(d.pp);
        let (mut k, mut e, mut si) = (d.pp, n, idx);
        while let Some((j, prev, oi)) = fronts[k][e][si].back {
            strategies.push(options[stage_class[k - 1]][j][e][oi].strategies.clone());
            bounds.push(j);
            k -= 1;
            e = j;
            si = prev;
        }
        bounds.reverse();
        strategies.reverse();
        let config = ParallelismConfig {
            dp: d.dp,
            tp: d.tp,
            pp: d.pp,
            micro_batch_size: micro_batch,
            num_micro_batches: m,
            stage_boundaries: bounds,
            layer_strategies: strategies.concat(),
            zero_stage: w.zero_stage_allowed,
        };
        let Some(config) = with_lowest_zero_stage(config, w) else {
            continue;
        };
        let cost = estimate_with_slowdown(&config, w, stage_slowdown).expect("search builds valid configs");
        if best.as_ref().map_or(true, |b| better(&config, &cost, &b.0, &b.1)) {
            best = Some((config, cost));
        }
    }
    best
}

/// Upper bound from a plain balanced split with per-stage greedy strategies.
fn incumbent_total(w: &Workload, d: Degrees, micro_batch: u64, m: u64, stage_slowdown: Option<&[f64]>) -> f64 {
    let costs: Vec<f64> = w.model.layers.iter().map(|l| l.flops_fwd + l.flops_bwd).collect();
    let scale = stage_slowdown.map_or_else(|| vec![1.0; d.pp], |s| s.to_vec());
    let Ok(bounds) = partition_stages_weighted(&costs, &scale) else {
        return f64::INFINITY;
    };
    let config = ParallelismConfig {
        dp: d.dp,
        tp: d.tp,
        pp: d.pp,
        micro_batch_size: micro_batch,
        num_micro_batches: m,
        layer_strategies: assign_layer_strategies(w, d, &bounds, micro_batch),
        stage_boundaries: bounds,
        zero_stage: w.zero_stage_allowed,
    };
    match with_lowest_zero_stage(config, w) {
        Some(c) => estimate_with_slowdown(&c, w, stage_slowdown).map_or(f64::INFINITY, |c| c.total_s),
        None => f64::INFINITY,
    }
}

/// Lowest ZeRO stage (≤ the job's limit) at which every stage fits.
pub(crate) fn with_lowest_zero_stage(mut config: ParallelismConfig, w: &Workload) -> Option<ParallelismConfig> {
    let links = StageLinks::new(&w.hw, config.dp, config.tp, config.pp);
    let stages = stage_accumulators(&config, w, &links);
    for z in 0..=w.zero_stage_allowed {
        let fits = stages.iter().all(|acc| {
            stage_memory(acc, z, config.dp, config.pp, config.micro_batch_size, w.precision_bytes, w.hw.device_memory)
                .fits()
        });
        if fits {
            config.zero_stage = z;
            return Some(config);
        }
    }
    None
}

fn stage_accumulators(config: &ParallelismConfig, w: &Workload, links: &StageLinks) -> Vec<StageAcc> {
    (0..config.pp)
        .map(|k| {
            let terms = layer_terms(&w.model, &w.hw, config.tp, config.micro_batch_size, links.tp[k]);
            let mut acc = StageAcc::default();
            for i in config.stage_layers(k) {
                acc.push(&terms[i], config.layer_strategies[i]);
            }
            acc
        })
        .collect()
}

/// Deterministic ranking: cheaper first, then smaller (pp, tp, dp), then
/// larger micro-batch, then earlier cuts, then replicated-first strategies.
pub fn compare_plans(a: &ParallelismConfig, ac: &CostBreakdown, b: &ParallelismConfig, bc: &CostBreakdown) -> Ordering {
    ac.total_s
        .total_cmp(&bc.total_s)
        .then(a.pp.cmp(&b.pp))
        .then(a.tp.cmp(&b.tp))
        .then(a.dp.cmp(&b.dp))
        .then(b.micro_batch_size.cmp(&a.micro_batch_size))
        .then(a.stage_boundaries.cmp(&b.stage_boundaries))
        .then(a.layer_strategies.cmp(&b.layer_strategies))
}

fn better(a: &ParallelismConfig, ac: &CostBreakdown, b: &ParallelismConfig, bc: &CostBreakdown) -> bool {
    compare_plans(a, ac, b, bc) == Ordering::Less
}

fn reduce_best(
    found: Vec<Option<(ParallelismConfig, CostBreakdown)>>,
) -> Option<(ParallelismConfig, CostBreakdown)> {
    found
        .into_iter()
        .flatten()
        .min_by(|(a, ac), (b, bc)| compare_plans(a, ac, b, bc))
}

/// Discovery phase: prune, then solve each candidate exactly.
pub fn discover(w: &Workload, opts: &SearchOptions) -> Result<SearchResult> {
    discover_with_slowdown(w, opts, None)
}

/// As [`discover`], with per-device compute slowdowns (length `total_gpus`).
pub fn discover_with_slowdown(
    w: &Workload,
    opts: &SearchOptions,
    device_slowdown: Option<&[f64]>,
) -> Result<SearchResult> {
    let set = enumerate_degree_candidates(w, opts)?;
    let jobs: Vec<(Degrees, u64)> = set
        .candidates
        .iter()
        .flat_map(|c| c.micro_batch_options.iter().map(move |&mb| (c.degrees, mb)))
        .collect();
    let found: Vec<_> = jobs
        .par_iter()
        .map(|&(d, mb)| {
            let slow = device_slowdown.map(|s| stage_slowdown_from_devices(s, d));
            best_layout(w, d, mb, slow.as_deref())
        })
        .collect();
    let (best, best_cost) = reduce_best(found).ok_or_else(|| {
        Error::NoFeasibleStrategy(format!(
            "none of {} candidate configurations fits in {:.3e} bytes of device memory",
            jobs.len(),
            w.hw.device_memory
        ))
    })?;
    Ok(SearchResult {
        memory: crate::cost::memory_footprint(&best, w),
        best,
        best_cost,
        evaluated_count: jobs.len(),
        pruning_log: set.pruning_log,
    })
}

/// Best layout for one fixed (degrees, micro-batch), or `None` if nothing fits.
pub fn plan_for_degrees(
    w: &Workload,
    d: Degrees,
    micro_batch: u64,
    device_slowdown: Option<&[f64]>,
) -> Option<(ParallelismConfig, CostBreakdown)> {
    if d.dp * d.tp * d.pp != w.hw.total_gpus {
        return None;
    }
    let slow = device_slowdown.map(|s| stage_slowdown_from_devices(s, d));
    best_layout(w, d, micro_batch, slow.as_deref())
}

/// Brute force over every degree triple (hard rules only), micro-batch,
/// stage cut and layer-strategy assignment.
pub fn exhaustive_plan(w: &Workload, opts: &SearchOptions) -> Result<SearchResult> {
    if w.hw.total_gpus > ORACLE_MAX_GPUS || w.model.len() > ORACLE_MAX_LAYERS {
        return Err(Error::OracleGuard(format!(
            "{} GPUs / {} layers exceeds the {ORACLE_MAX_GPUS} GPU / {ORACLE_MAX_LAYERS} layer limit",
            w.hw.total_gpus,
            w.model.len()
        )));
    }
    let set = enumerate(w, opts, true);
    let n = w.model.len();
    let gb = w.global_batch();
    let mut evaluated = 0;
    let mut best: Option<(ParallelismConfig, CostBreakdown)> = None;
    for c in &set.candidates {
        let d = c.degrees;
        let shardable: Vec<usize> = if d.tp > 1 {
            (0..n).filter(|&i| w.model.layers[i].tp_shardable).collect()
        } else {
            Vec::new()
        };
        for &mb in &c.micro_batch_options {
            for bounds in all_cuts(n, d.pp) {
                for mask in 0u64..(1u64 << shardable.len()) {
                    let mut strategies = vec![LayerStrategy::DataReplicated; n];
                    for (bit, &i) in shardable.iter().enumerate() {
                        if mask >> bit & 1 == 1 {
                            strategies[i] = LayerStrategy::TensorParallel;
                        }
                    }
                    evaluated += 1;
                    let config = ParallelismConfig {
                        dp: d.dp,
                        tp: d.tp,
                        pp: d.pp,
                        micro_batch_size: mb,
                        num_micro_batches: gb / (d.dp as u64 * mb),
                        stage_boundaries: bounds.clone(),
                        layer_strategies: strategies,
                        zero_stage: 0,
                    };
                    let Some(config) = with_lowest_zero_stage(config, w) else {
                        continue;
                    };
                    let cost = crate::cost::estimate_iteration(&config, w)?;
                    if best.as_ref().map_or(true, |b| better(&config, &cost, &b.0, &b.1)) {
                        best = Some((config, cost));
                    }
                }
            }
        }
    }
    let (best, best_cost) =
        best.ok_or_else(|| Error::NoFeasibleStrategy("no configuration fits in device memory".into()))?;
    Ok(SearchResult {
        memory: crate::cost::memory_footprint(&best, w),
        best,
        best_cost,
        evaluated_count: evaluated,
        pruning_log: set.pruning_log,
    })
}

/// Every strictly increasing boundary vector `[0, .., n]` with `pp` stages.
pub fn all_cuts(n: usize, pp: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, left: usize, n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 1 {
            cur.push(n);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for next in start + 1..=n - (left - 1) {
            cur.push(next);
            rec(next, left - 1, n, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if pp == 0 || pp > n {
        return out;
    }
    let mut cur = vec![0];
    rec(0, pp, n, &mut cur, &mut out);
    out
}
