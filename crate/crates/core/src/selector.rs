//! Runtime controller: diagnoses bottlenecks over a metrics window and
//! decides whether switching configuration pays for its pause.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cost::{estimate_with_slowdown, memory_footprint, ParallelismConfig, Workload};
use crate::error::{Error, Result};
use crate::layout::{plan_transition, TransitionPlan};
use crate::search::{
    discover_with_slowdown, enumerate_degree_candidates, micro_batch_options, plan_for_degrees,
    stage_slowdown_from_devices, Degrees, SearchOptions,
};
use crate::trace::{MetricsSnapshot, Observation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    pub comm_threshold: f64,
    pub util_threshold: f64,
    pub headroom_threshold: f64,
    pub imbalance_threshold: f64,
    /// Minimum steps between transitions, counted from step 0.
    pub hysteresis_steps: u64,
    pub monitor_interval: u64,
    pub window: usize,
    pub min_relative_gain: f64,
    /// The amortized gain must beat the pause by this margin.
    pub amortization_margin: f64,
    /// Re-run the full search instead of targeted candidates.
    pub full_search: bool,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            comm_threshold: 0.30,
            util_threshold: 0.60,
            headroom_threshold: 0.40,
            imbalance_threshold: 0.15,
            hysteresis_steps: 200,
            monitor_interval: 50,
            window: 50,
            min_relative_gain: 0.05,
            amortization_margin: 0.05,
            full_search: false,
        }
    }
}

impl SelectorConfig {
    pub fn check(&self) -> Result<()> {
        let fraction = [
            ("selector.comm_threshold", self.comm_threshold),
            ("selector.util_threshold", self.util_threshold),
            ("selector.headroom_threshold", self.headroom_threshold),
        ];
        for (field, v) in fraction {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(field, "must be within [0, 1]"));
            }
        }
        for (field, v) in [
            ("selector.imbalance_threshold", self.imbalance_threshold),
            ("selector.min_relative_gain", self.min_relative_gain),
            ("selector.amortization_margin", self.amortization_margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(field, "must be ≥ 0"));
            }
        }
        if self.monitor_interval == 0 {
            return Err(Error::validation("selector.monitor_interval", "must be ≥ 1"));
        }
        if self.window == 0 {
            return Err(Error::validation("selector.window", "must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    CommBound,
    Underutilized,
    MemoryHeadroom,
    StageImbalanced,
    InputBound,
}

impl Bottleneck {
    pub fn name(self) -> &'static str {
        match self {
            Bottleneck::CommBound => "comm_bound",
            Bottleneck::Underutilized => "underutilized",
            Bottleneck::MemoryHeadroom => "memory_headroom",
            Bottleneck::StageImbalanced => "stage_imbalanced",
            Bottleneck::InputBound => "input_bound",
        }
    }
}

impl fmt::Display for Bottleneck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckReport {
    pub flags: BTreeSet<Bottleneck>,
    pub mean_comm_fraction: f64,
    pub mean_gpu_utilization: f64,
    pub mean_headroom_fraction: f64,
    pub mean_stage_imbalance: f64,
    /// Drift seen in the most recent snapshot.
    pub latest: Observation,
}

impl BottleneckReport {
    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn flag_names(&self) -> Vec<String> {
        self.flags.iter().map(|f| f.name().to_string()).collect()
    }
}

pub fn observe<'a, I>(window: I, cfg: &SelectorConfig) -> Result<BottleneckReport>
where
    I: IntoIterator<Item = &'a MetricsSnapshot>,
{
    let (mut n, mut comm, mut util, mut head, mut imb) = (0usize, 0.0, 0.0, 0.0, 0.0);
    let mut input_bound = true;
    let mut latest = None;
    for s in window {
        n += 1;
        comm += s.comm_fraction;
        util += s.gpu_utilization;
        head += s.observation.headroom_fraction;
        imb += s.stage_imbalance;
        input_bound &= s.observation.input_bound;
        latest = Some(s);
    }
    let Some(latest) = latest else {
        return Err(Error::Simulation("cannot observe an empty window".into()));
    };
    let k = n as f64;
    let report = BottleneckReport {
        flags: BTreeSet::new(),
        mean_comm_fraction: comm / k,
        mean_gpu_utilization: util / k,
        mean_headroom_fraction: head / k,
        mean_stage_imbalance: imb / k,
        latest: latest.observation.clone(),
    };
    let mut flags = BTreeSet::new();
    if report.mean_comm_fraction > cfg.comm_threshold {
        flags.insert(Bottleneck::CommBound);
    }
    if report.mean_gpu_utilization < cfg.util_threshold {
        flags.insert(Bottleneck::Underutilized);
    }
    if report.mean_headroom_fraction > cfg.headroom_threshold {
        flags.insert(Bottleneck::MemoryHeadroom);
    }
    if report.mean_stage_imbalance > cfg.imbalance_threshold {
        flags.insert(Bottleneck::StageImbalanced);
    }
    if input_bound {
        flags.insert(Bottleneck::InputBound);
    }
    Ok(BottleneckReport { flags, ..report })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorState {
    pub config: SelectorConfig,
    pub last_transition_step: u64,
    pub window: VecDeque<MetricsSnapshot>,
    /// Configurations switched away from, with the step of leaving.
    pub left: Vec<(String, u64)>,
}

impl SelectorState {
    pub fn new(config: SelectorConfig) -> Self {
        SelectorState {
            config,
            last_transition_step: 0,
            window: VecDeque::new(),
            left: Vec::new(),
        }
    }

    /// Records that the run switched away from `config_id` at `step`.
    pub fn record_transition(&mut self, config_id: String, step: u64) {
        self.last_transition_step = step;
        self.left.push((config_id, step));
    }
}

/// What the selector needs to know about the run beyond the metrics.
#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    /// Nominal, undrifted workload.
    pub workload: &'a Workload,
    pub search: &'a SearchOptions,
    pub step: u64,
    pub remaining_steps: u64,
    pub iteration_s: f64,
    pub checkpoint_iterations: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Keep,
    Transition {
        plan: TransitionPlan,
        expected_gain_s_per_step: f64,
        flags: Vec<String>,
    },
}

impl Decision {
    pub fn is_keep(&self) -> bool {
        matches!(self, Decision::Keep)
    }
}

/// The workload with observed link drift and per-stage compute slowdowns.
fn drifted(w: &Workload, obs: &Observation) -> Workload {
    let mut d = w.clone();
    d.hw = w.hw.with_link_slowdown(obs.link_slowdown[0], obs.link_slowdown[1]);
    d
}

fn device_slowdown(w: &Workload, obs: &Observation) -> Vec<f64> {
    if obs.device_slowdown.len() == w.hw.total_gpus {
        obs.device_slowdown.clone()
    } else {
        vec![1.0; w.hw.total_gpus]
    }
}

fn degrees_of(c: &ParallelismConfig) -> Degrees {
    Degrees {
        dp: c.dp,
        tp: c.tp,
        pp: c.pp,
    }
}

/// Targeted (degrees, micro-batch) candidates for the flagged bottlenecks.
fn candidates(report: &BottleneckReport, current: &ParallelismConfig, gb: u64, opts: &SearchOptions) -> Vec<(Degrees, u64)> {
    let d = degrees_of(current);
    let mb = current.micro_batch_size;
    let mut out: Vec<(Degrees, u64)> = Vec::new();
    let with_all_mb = |d: Degrees, out: &mut Vec<(Degrees, u64)>| {
        if gb % d.dp as u64 == 0 {
            for m in micro_batch_options(gb / d.dp as u64, opts.max_micro_batch) {
                out.push((d, m));
            }
        }
    };
    for flag in &report.flags {
        match flag {
            Bottleneck::CommBound if d.dp >= 2 => {
                with_all_mb(Degrees { dp: d.dp / 2, tp: d.tp * 2, pp: d.pp }, &mut out);
                with_all_mb(Degrees { dp: d.dp / 2, tp: d.tp, pp: d.pp * 2 }, &mut out);
            }
            Bottleneck::StageImbalanced => {
                out.push((d, mb));
                // One stage fewer keeps the device count only if pp - 1
                // divides it; halving always does.
                if d.pp >= 2 {
                    with_all_mb(Degrees { pp: d.pp - 1, ..d }, &mut out);
                    if d.pp % 2 == 0 {
                        with_all_mb(Degrees { dp: d.dp * 2, tp: d.tp, pp: d.pp / 2 }, &mut out);
                        with_all_mb(Degrees { dp: d.dp, tp: d.tp * 2, pp: d.pp / 2 }, &mut out);
                    }
                }
            }
            Bottleneck::MemoryHeadroom => out.push((d, mb * 2)),
            Bottleneck::Underutilized if mb >= 2 => out.push((d, mb / 2)),
            _ => {}
        }
    }
    out.sort();
    out.dedup();
    out
}

pub fn decide(
    report: &BottleneckReport,
    current: &ParallelismConfig,
    state: &SelectorState,
    ctx: &DecisionContext<'_>,
) -> Result<Decision> {
    let cfg = &state.config;
    if report.is_empty() || ctx.step.saturating_sub(state.last_transition_step) < cfg.hysteresis_steps {
        return Ok(Decision::Keep);
    }
    let w = drifted(ctx.workload, &report.latest);
    let slow = device_slowdown(ctx.workload, &report.latest);
    let cur_stage_slow = stage_slowdown_from_devices(&slow, degrees_of(current));
    let cur_cost = estimate_with_slowdown(current, &w, Some(&cur_stage_slow))?;

    let recently_left = |id: &str| {
        state
            .left
            .iter()
            .any(|(l, at)| l == id && ctx.step.saturating_sub(*at) < 2 * cfg.hysteresis_steps)
    };

    let mut evaluated = Vec::new();
    if cfg.full_search {
        if let Ok(r) = discover_with_slowdown(&w, ctx.search, Some(&slow)) {
            evaluated.push((r.best, r.best_cost));
        }
    } else {
        let allowed = enumerate_degree_candidates(&w, ctx.search)?.degree_triples();
        for (d, mb) in candidates(report, current, w.global_batch(), ctx.search) {
            if !allowed.contains(&d) {
                continue;
            }
            if let Some(found) = plan_for_degrees(&w, d, mb, Some(&slow)) {
                evaluated.push(found);
            }
        }
    }
    let best = evaluated
        .into_iter()
        .filter(|(c, _)| c != current && !recently_left(&c.id()) && memory_footprint(c, &w).fits())
        .min_by(|(a, ac), (b, bc)| crate::search::compare_plans(a, ac, b, bc));
    let Some((to, to_cost)) = best else {
        return Ok(Decision::Keep);
    };
    let gain = cur_cost.total_s - to_cost.total_s;
    if !(gain > 0.0 && gain >= cfg.min_relative_gain * cur_cost.total_s) {
        return Ok(Decision::Keep);
    }
    let plan = plan_transition(current, &to, &w, ctx.iteration_s, ctx.checkpoint_iterations, ctx.step);
    if gain * ctx.remaining_steps as f64 <= plan.pause_s * (1.0 + cfg.amortization_margin) {
        return Ok(Decision::Keep);
    }
    Ok(Decision::Transition {
        plan,
        expected_gain_s_per_step: gain,
        flags: report.flag_names(),
    })
}

/// Feeds one snapshot; evaluates only every `monitor_interval` steps.
pub fn selector_step(
    state: &mut SelectorState,
    snapshot: &MetricsSnapshot,
    current: &ParallelismConfig,
    ctx: &DecisionContext<'_>,
) -> Result<Decision> {
    state.window.push_back(snapshot.clone());
    while state.window.len() > state.config.window {
        state.window.pop_front();
    }
    if snapshot.step % state.config.monitor_interval != 0 {
        return Ok(Decision::Keep);
    }
    let report = observe(&state.window, &state.config)?;
    decide(&report, current, state, ctx)
}
