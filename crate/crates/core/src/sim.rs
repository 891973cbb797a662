//! Deterministic step-level training simulator.
//!
//! Each step re-evaluates the analytic cost model under the current drift
//! (per-device compute slowdowns, per-link-class bandwidth drops) and
//! perturbs it with seeded multiplicative noise. The loss curve is
//! synthetic: `l0 · (1 + step/tau)^(-gamma)`.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::{estimate_with_slowdown, memory_footprint, CostBreakdown, ParallelismConfig, Workload};
use crate::error::{Error, Result};
use crate::layout::{ShardLayout, TransitionPlan, DEFAULT_CHECKPOINT_ITERATIONS};
use crate::search::{stage_slowdown_from_devices, Degrees, SearchOptions};
use crate::selector::{selector_step, Decision, DecisionContext, SelectorConfig, SelectorState};
use crate::spec::{EventKind, EventTarget, JobSpec, LinkId, ScenarioEvent};
use crate::trace::{MetricsSnapshot, Observation, Trace, TransitionRecord};

pub const DEFAULT_NOISE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCurve {
    pub l0: f64,
    pub tau: f64,
    pub gamma: f64,
}

impl Default for LossCurve {
    fn default() -> Self {
        LossCurve {
            l0: 10.0,
            tau: 1000.0,
            gamma: 0.5,
        }
    }
}

impl LossCurve {
    pub fn at(&self, step: u64) -> f64 {
        self.l0 * (1.0 + step as f64 / self.tau).powf(-self.gamma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    /// Half-width of the uniform multiplicative noise on iteration time.
    pub noise: f64,
    pub loss: LossCurve,
    /// Steps over which the convergence rate is measured.
    pub convergence_window: u64,
    pub checkpoint_iterations: f64,
    pub search: SearchOptions,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            noise: DEFAULT_NOISE,
            loss: LossCurve::default(),
            convergence_window: 50,
            checkpoint_iterations: DEFAULT_CHECKPOINT_ITERATIONS,
            search: SearchOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Static,
    Adaptive(SelectorConfig),
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub step: u64,
    pub target_steps: u64,
    pub config: ParallelismConfig,
    pub layout: ShardLayout,
    pub device_slowdown: Vec<f64>,
    /// Bandwidth divisors for intra- and inter-node links.
    pub link_slowdown: [f64; 2],
    pub loss: f64,
    /// Events not yet applied, in firing order.
    pub pending: VecDeque<ScenarioEvent>,
    pub rng: ChaCha8Rng,
    pub trace: Trace,
    /// Pause to charge on the next snapshot.
    pub pending_transition_s: f64,
    pub workload: Workload,
    pub options: SimOptions,
}

pub fn init_run(config: &ParallelismConfig, w: &Workload, job: &JobSpec, options: SimOptions) -> Result<SimState> {
    config.check(w.hw.total_gpus, &w.model, w.global_batch())?;
    let mem = memory_footprint(config, w);
    if !mem.fits() {
        return Err(Error::Config(format!(
            "needs {:.4e} bytes per device, {:.4e} available",
            mem.total_bytes, w.hw.device_memory
        )));
    }
    if !(options.noise >= 0.0 && options.noise < 1.0) {
        return Err(Error::Simulation(format!("noise {} must be in [0, 1)", options.noise)));
    }
    let mut pending: Vec<ScenarioEvent> = job.scenario_events.clone();
    // Stable: events at the same step fire in document order.
    pending.sort_by_key(|e| e.at_step);
    let layout = ShardLayout::build(config, &w.model);
    debug_assert!(layout.audit().is_ok());
    Ok(SimState {
        step: 0,
        target_steps: job.target_steps,
        config: config.clone(),
        layout,
        device_slowdown: vec![1.0; w.hw.total_gpus],
        link_slowdown: [1.0, 1.0],
        loss: options.loss.l0,
        pending: pending.into(),
        rng: ChaCha8Rng::seed_from_u64(job.seed),
        trace: Trace::default(),
        pending_transition_s: 0.0,
        workload: w.clone(),
        options,
    })
}

fn link_slot(l: LinkId) -> usize {
    match l {
        LinkId::Intra => 0,
        LinkId::Inter => 1,
    }
}

impl SimState {
    fn degrees(&self) -> Degrees {
        Degrees {
            dp: self.config.dp,
            tp: self.config.tp,
            pp: self.config.pp,
        }
    }

    fn apply(&mut self, ev: &ScenarioEvent) -> Result<()> {
        match ev.target {
            EventTarget::Stage(k) => {
                if k >= self.config.pp {
                    return Err(Error::Simulation(format!(
                        "event at step {} targets stage {k} but the run has {} stages",
                        ev.at_step, self.config.pp
                    )));
                }
                let value = if ev.kind == EventKind::Restore { 1.0 } else { ev.multiplier };
                for d in self.config.stage_devices(k) {
                    self.device_slowdown[d] = value;
                }
            }
            EventTarget::Link(l) => {
                self.link_slowdown[link_slot(l)] = if ev.kind == EventKind::Restore { 1.0 } else { ev.multiplier };
            }
        }
        Ok(())
    }

    /// Workload as currently degraded by link drift.
    pub fn drifted_workload(&self) -> Workload {
        let mut w = self.workload.clone();
        w.hw = w.hw.with_link_slowdown(self.link_slowdown[0], self.link_slowdown[1]);
        w
    }

    /// Noise-free cost of the current step under the current drift.
    pub fn modeled_cost(&self) -> Result<CostBreakdown> {
        let stage_slow = stage_slowdown_from_devices(&self.device_slowdown, self.degrees());
        estimate_with_slowdown(&self.config, &self.drifted_workload(), Some(&stage_slow))
    }

    /// Advances one step and records its snapshot.
    pub fn step(&mut self) -> Result<MetricsSnapshot> {
        if self.step >= self.target_steps {
            return Err(Error::Simulation(format!("already at target step {}", self.target_steps)));
        }
        let n = self.step + 1;
        while self.pending.front().is_some_and(|e| e.at_step <= n) {
            let ev = self.pending.pop_front().expect("front exists");
            self.apply(&ev)?;
        }
        let w = &self.workload;
        let mut cost = self.modeled_cost()?;
        if self.pending_transition_s > 0.0 {
            cost = cost.with_transition(self.pending_transition_s, w.global_batch(), w.dataset.max_input_throughput);
            self.pending_transition_s = 0.0;
        }
        let u: f64 = self.rng.gen();
        let eps = self.options.noise * (2.0 * u - 1.0);
        let iteration_time_s = cost.total_s * (1.0 + eps);
        let uncapped = w.global_batch() as f64 / iteration_time_s;
        let cap = w.dataset.max_input_throughput;
        let mem = memory_footprint(&self.config, w);

        let loss = &self.options.loss;
        self.loss = loss.at(n);
        let span = self.options.convergence_window.min(n);
        let convergence_rate = (loss.at(n - span) - self.loss) / span as f64;

        let snap = MetricsSnapshot {
            step: n,
            iteration_time_s,
            throughput_samples_s: uncapped.min(cap),
            gpu_utilization: cost.gpu_utilization(),
            memory_used_bytes: mem.total_bytes,
            comm_fraction: cost.comm_fraction,
            stage_imbalance: cost.stage_imbalance(),
            convergence_rate,
            config_id: self.config.id(),
            observation: Observation {
                device_slowdown: self.device_slowdown.clone(),
                link_slowdown: self.link_slowdown,
                headroom_fraction: mem.headroom_fraction,
                input_bound: uncapped >= cap,
            },
        };
        self.step = n;
        self.trace.push_step(snap.clone());
        Ok(snap)
    }

    /// Switches to `plan.to_config`; the pause lands on the next snapshot.
    pub fn execute_transition(&mut self, plan: &TransitionPlan, flags: Vec<String>) -> Result<()> {
        if plan.safe_point_step != self.step {
            return Err(Error::Simulation(format!(
                "transition planned for step {} applied at step {}",
                plan.safe_point_step, self.step
            )));
        }
        if plan.from_config != self.config {
            return Err(Error::Simulation("transition does not start from the current config".into()));
        }
        if plan.to_config == self.config {
            return Ok(());
        }
        let w = &self.workload;
        plan.to_config.check(w.hw.total_gpus, &w.model, w.global_batch())?;
        let layout = ShardLayout::build(&plan.to_config, &w.model);
        if let Err(e) = layout.audit() {
            panic!("resharding broke the layout: {e}");
        }
        assert_eq!(
            layout.total_params(),
            self.layout.total_params(),
            "resharding changed the parameter count"
        );
        self.trace.push_transition(TransitionRecord::new(
            self.step,
            plan.from_config.id(),
            plan.to_config.id(),
            plan.bytes_moved,
            plan.pause_s,
            flags,
        ));
        self.config = plan.to_config.clone();
        self.layout = layout;
        self.pending_transition_s += plan.pause_s;
        Ok(())
    }
}

/// Simulates a whole run. Adaptive policies are ignored when the job
/// disables adaptation.
pub fn run(
    initial: &ParallelismConfig,
    w: &Workload,
    job: &JobSpec,
    policy: &Policy,
    options: SimOptions,
) -> Result<Trace> {
    let mut state = init_run(initial, w, job, options)?;
    let mut selector = match policy {
        Policy::Adaptive(cfg) if job.adaptation_enabled => Some(SelectorState::new(cfg.clone())),
        _ => None,
    };
    while state.step < state.target_steps {
        let snap = state.step()?;
        let Some(sel) = selector.as_mut() else {
            continue;
        };
        if state.step == state.target_steps {
            break;
        }
        let ctx = DecisionContext {
            workload: &state.workload,
            search: &state.options.search,
            step: state.step,
            remaining_steps: state.target_steps - state.step,
            iteration_s: snap.iteration_time_s,
            checkpoint_iterations: state.options.checkpoint_iterations,
        };
        let current = state.config.clone();
        if let Decision::Transition { plan, flags, .. } = selector_step(sel, &snap, &current, &ctx)? {
            state.execute_transition(&plan, flags)?;
            sel.record_transition(current.id(), state.step);
        }
    }
    Ok(state.trace)
}
