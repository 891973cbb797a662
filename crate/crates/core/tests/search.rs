use parplan_core::cost::{estimate_iteration, LayerStrategy};
use parplan_core::search::*;
use parplan_core::spec::{ClusterSpec, JobSpec, LayerKind, LayerSpec, LinkSpec, ModelSpec};
use parplan_core::{discover, exhaustive_plan, workload, CommPlan, Workload};
use proptest::prelude::*;

const DR: LayerStrategy = LayerStrategy::DataReplicated;
const TP: LayerStrategy = LayerStrategy::TensorParallel;

fn cluster(nodes: u32, per: u32, memory: f64) -> ClusterSpec {
    ClusterSpec {
        node_count: nodes,
        gpus_per_node: per,
        device_memory_bytes: memory,
        device_peak_flops: 100e12,
        device_efficiency: 0.5,
        intra_node: LinkSpec::new(300e9, 1e-6),
        inter_node: LinkSpec::new(25e9, 5e-6),
    }
}

fn uniform_model(layers: usize, params: u64) -> ModelSpec {
    ModelSpec {
        layers: (0..layers)
            .map(|_| LayerSpec::new(LayerKind::Mlp, params).with_flops(1e10).with_activation(100_000))
            .collect(),
    }
}

fn wl(c: &ClusterSpec, m: &ModelSpec, j: &JobSpec) -> Workload {
    workload(c, m, j, CommPlan::default()).unwrap()
}

#[test]
fn partition_examples() {
    assert_eq!(partition_stages(&[1.0; 24], 4).unwrap(), vec![0, 6, 12, 18, 24]);
    assert_eq!(partition_stages(&[4.0, 1.0, 1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1, 5]);
    assert_eq!(partition_stages(&[3.0, 1.0, 2.0], 1).unwrap(), vec![0, 3]);
    assert!(partition_stages(&[1.0; 3], 4).is_err());
}

fn brute_partition(costs: &[f64], pp: usize) -> f64 {
    all_cuts(costs.len(), pp)
        .iter()
        .map(|b| {
            b.windows(2)
                .map(|w| costs[w[0]..w[1]].iter().sum::<f64>())
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #[test]
    fn partition_is_optimal(costs in proptest::collection::vec(0u32..100, 1..10), pp in 1usize..5) {
        let costs: Vec<f64> = costs.into_iter().map(f64::from).collect();
        prop_assume!(pp <= costs.len());
        let b = partition_stages(&costs, pp).unwrap();
        prop_assert_eq!(b.len(), pp + 1);
        let max = b.windows(2).map(|w| costs[w[0]..w[1]].iter().sum::<f64>()).fold(0.0, f64::max);
        prop_assert_eq!(max, brute_partition(&costs, pp));
    }
}

#[test]
fn chain_three_layer_example() {
    // Columns: [data_replicated, tensor_parallel].
    let cost = [[3.0, 1.0], [2.0, 5.0], [3.0, 1.0]];
    let switch = [0.0, 0.5, 0.5];
    let allowed = [[true, true]; 3];
    let (s, total) = assign_chain(&cost, &switch, &allowed);
    assert_eq!(s, vec![TP, DR, TP]);
    assert_eq!(total, 5.0);

    let mut best = f64::INFINITY;
    for mask in 0..8u32 {
        let pick = |i: usize| (mask >> i & 1) as usize;
        let mut t = 0.0;
        for i in 0..3 {
            t += cost[i][pick(i)];
            if i > 0 && pick(i) != pick(i - 1) {
                t += switch[i];
            }
        }
        best = f64::min(best, t);
    }
    assert_eq!(best, 5.0);
}

#[test]
fn chain_uniform_and_masked() {
    let (s, _) = assign_chain(&[[2.0, 1.0]; 4], &[0.1; 4], &[[true, true]; 4]);
    assert_eq!(s, vec![TP; 4]);
    let (s, total) = assign_chain(&[[2.0, 1.0]; 2], &[0.0; 2], &[[true, false]; 2]);
    assert_eq!(s, vec![DR; 2]);
    assert_eq!(total, 4.0);
    // Equal costs go to data_replicated.
    let (s, _) = assign_chain(&[[1.0, 1.0]], &[0.0], &[[true, true]]);
    assert_eq!(s, vec![DR]);
}

#[test]
fn candidate_counts() {
    let w = wl(&cluster(2, 8, 80e9), &uniform_model(24, 1_000_000), &JobSpec::new(512, 10));
    let set = enumerate_degree_candidates(&w, &SearchOptions::default()).unwrap();
    assert_eq!(power_of_two_triples(16).len(), 15);
    assert_eq!(set.candidates.len(), 14);
    assert_eq!(set.pruning_log.len(), 1);
    assert_eq!(set.pruning_log[0].0, Degrees { dp: 1, tp: 16, pp: 1 });
    assert_eq!(set.pruning_log[0].1.name(), "R1");
    for c in &set.candidates {
        let d = c.degrees;
        assert_eq!(d.dp * d.tp * d.pp, 16);
        assert!(d.dp.is_power_of_two() && d.tp.is_power_of_two() && d.pp.is_power_of_two());
        assert!(c.micro_batch_options.iter().all(|&m| m <= 64 && (512 / d.dp as u64) % m == 0));
    }

    let one = wl(&cluster(1, 1, 80e9), &uniform_model(2, 1000), &JobSpec::new(8, 10));
    let set = enumerate_degree_candidates(&one, &SearchOptions::default()).unwrap();
    assert_eq!(set.degree_triples(), vec![Degrees { dp: 1, tp: 1, pp: 1 }]);
}

#[test]
fn micro_batch_menu() {
    assert_eq!(micro_batch_options(256, 64), vec![1, 2, 4, 8, 16, 32, 64]);
    assert_eq!(micro_batch_options(12, 64), vec![1, 2, 4]);
    assert_eq!(micro_batch_options(7, 64), vec![1]);
}

/// 1.2e9 parameters in two layers on one 8-GPU node with 3 GB per device.
fn large_model() -> Workload {
    let mut c = cluster(1, 8, 3e9);
    c.intra_node.latency_s = 2.5e-5;
    let m = ModelSpec {
        layers: (0..2)
            .map(|_| LayerSpec::new(LayerKind::Mlp, 600_000_000).with_flops(1e10).with_activation(100_000))
            .collect(),
    };
    wl(&c, &m, &JobSpec::new(256, 10))
}

#[test]
fn large_model_needs_pipeline() {
    let w = large_model();
    assert_eq!(w.model.total_params, 1_200_000_000);
    let r = discover(&w, &SearchOptions::default()).unwrap();
    assert!(r.best.pp > 1);
    for d in power_of_two_triples(8).into_iter().filter(|d| d.pp == 1) {
        assert!(r.pruning_log.iter().any(|(p, rule)| *p == d && rule.name() == "R3"), "{d}");
    }
    // The chosen micro-batch is the cost-minimal one; here that is 32.
    let per_mb: Vec<(u64, f64)> = micro_batch_options(256, 64)
        .into_iter()
        .filter_map(|mb| {
            enumerate_degree_candidates(&w, &SearchOptions::default())
                .unwrap()
                .degree_triples()
                .into_iter()
                .filter_map(|d| plan_for_degrees(&w, d, mb, None))
                .map(|(_, c)| c.total_s)
                .reduce(f64::min)
                .map(|t| (mb, t))
        })
        .collect();
    let cheapest = per_mb.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert_eq!(r.best.micro_batch_size, cheapest.0);
    assert_eq!(r.best.micro_batch_size, 32);
}

#[test]
fn single_gpu_plan() {
    let w = wl(&cluster(1, 1, 80e9), &uniform_model(3, 1000), &JobSpec::new(16, 10));
    let r = discover(&w, &SearchOptions::default()).unwrap();
    assert_eq!((r.best.dp, r.best.tp, r.best.pp), (1, 1, 1));
    assert_eq!(r.best.micro_batch_size, 16);
    assert_eq!(r.best_cost.total_s, r.best_cost.compute_s);
    let e = exhaustive_plan(&w, &SearchOptions::default()).unwrap();
    assert_eq!(e.best, r.best);
}

#[test]
fn oracle_guard() {
    let w = wl(&cluster(1, 17, 80e9), &uniform_model(2, 1000), &JobSpec::new(16, 10));
    assert!(matches!(
        exhaustive_plan(&w, &SearchOptions::default()),
        Err(parplan_core::Error::OracleGuard(_))
    ));
    let w = wl(&cluster(1, 2, 80e9), &uniform_model(11, 1000), &JobSpec::new(16, 10));
    assert!(exhaustive_plan(&w, &SearchOptions::default()).is_err());
}

#[test]
fn result_matches_estimate() {
    let w = wl(&cluster(2, 4, 20e9), &uniform_model(12, 50_000_000), &JobSpec::new(64, 10));
    let r = discover(&w, &SearchOptions::default()).unwrap();
    r.best.check(8, &w.model, 64).unwrap();
    assert_eq!(estimate_iteration(&r.best, &w).unwrap(), r.best_cost);
    assert!(r.memory.fits());
    assert_eq!(discover(&w, &SearchOptions::default()).unwrap(), r);
}

#[test]
fn pruned_candidates_never_win() {
    // R2 and R3 are the only rules that drop runnable configurations; the
    // brute force ignores both, so comparing it with discover covers them.
    for (mem, params) in [(3e9, 600_000_000u64), (5e9, 100_000_000), (40e9, 10_000_000)] {
        let m = uniform_model(4, params);
        let w = wl(&cluster(1, 4, mem), &m, &JobSpec::new(32, 10));
        let d = discover(&w, &SearchOptions::default());
        let e = exhaustive_plan(&w, &SearchOptions::default());
        match (d, e) {
            (Ok(d), Ok(e)) => assert_eq!(d.best_cost.total_s, e.best_cost.total_s),
            (Err(_), Err(_)) => {}
            (d, e) => panic!("discover {:?} vs brute force {:?}", d.map(|r| r.best), e.map(|r| r.best)),
        }
    }
}

/// Attention: heavy compute, tiny activations. MLP: light compute, large
/// activations. One node of two GPUs and a global batch of 1 forces dp = 1.
fn mixing_fixture() -> Workload {
    let mut c = cluster(1, 2, 80e9);
    c.intra_node = LinkSpec::new(100e9, 0.0);
    let attn = LayerSpec::new(LayerKind::Attention, 1_000_000).with_flops(1e12).with_activation(1_000);
    let mlp = LayerSpec::new(LayerKind::Mlp, 1_000_000).with_flops(1e9).with_activation(100_000_000);
    let m = ModelSpec {
        layers: vec![attn.clone(), mlp.clone(), attn, mlp],
    };
    wl(&c, &m, &JobSpec::new(1, 10))
}

#[test]
fn layer_wise_mixing() {
    let w = mixing_fixture();
    let r = discover(&w, &SearchOptions::default()).unwrap();
    assert_eq!((r.best.tp, r.best.pp), (2, 1));
    assert_eq!(r.best.layer_strategies, vec![TP, DR, TP, DR]);
    let e = exhaustive_plan(&w, &SearchOptions::default()).unwrap();
    assert_eq!(e.best.layer_strategies, vec![TP, DR, TP, DR]);
    assert_eq!(e.best_cost.total_s, r.best_cost.total_s);
}

#[test]
fn slowdown_rebalances_partition() {
    let w = wl(&cluster(1, 4, 80e9), &uniform_model(24, 1_000_000), &JobSpec::new(64, 10));
    let d = Degrees { dp: 1, tp: 1, pp: 4 };
    let (even, _) = plan_for_degrees(&w, d, 1, None).unwrap();
    assert_eq!(even.stage_boundaries, vec![0, 6, 12, 18, 24]);
    let (skewed, cost) = plan_for_degrees(&w, d, 1, Some(&[1.0, 1.0, 1.3, 1.0])).unwrap();
    assert_eq!(skewed.stage_boundaries[3] - skewed.stage_boundaries[2], 5);
    let slow_even = parplan_core::estimate_with_slowdown(&even, &w, Some(&[1.0, 1.0, 1.3, 1.0])).unwrap();
    assert!(cost.total_s < slow_even.total_s);
}
