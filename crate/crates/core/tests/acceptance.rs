//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines for passing criteria too.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pruneplan::engine::{
    build_flops_groups, run_with_inputs, ConstraintKind, PruneConfig, PruneState, SolverKind,
};
use pruneplan::grouping::{build_groups, GroupedInstance, GroupingOptions};
use pruneplan::importance::{neuron_importance, rank_layer, LayerRanking};
use pruneplan::knapsack::{
    brute_force, is_prefix_closed, solve_exact, solve_itemwise, to_int_cost, to_int_costs, Item,
};
use pruneplan::latency::{
    network_latency_scaled, staircase_table, LatencyTable, StaircaseConfig, StaircaseParams,
};
use pruneplan::netmodel::{
    builtin_resnet50, builtin_resnet50_step_sizes, network_flops, total_neurons,
    ChannelAssignment, JoinRule, LayerId, LayerKind, LayerSpec, NetworkSpec,
};
use pruneplan::trace_gen::{gen_trace, toy_grads, toy_loss_delta, ToyNet, TraceGenOptions};

fn chain_spec(widths: &[u32], input: u32) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut c_in = input;
    for (i, &w) in widths.iter().enumerate() {
        layers.push(LayerSpec {
            layer_id: i as LayerId,
            name: format!("l{i}"),
            kind: LayerKind::Conv,
            kernel_size: 3,
            in_channels: c_in,
            out_channels: w,
            out_spatial: (8, 8),
            predecessor_ids: if i == 0 { vec![] } else { vec![i as LayerId - 1] },
            prunable: true,
            min_keep: None,
            join: JoinRule::Add,
        });
        c_in = w;
    }
    NetworkSpec {
        input_channels: input,
        layers,
        couplings: vec![],
    }
}

/// Random instance in the oracle regime: up to 4 chains of up to 6 items,
/// integer costs in [0, 20].
fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Item>, i64) {
    let n_chains = rng.gen_range(1..=4);
    let mut items = Vec::new();
    let mut next_id = 0u64;
    for chain_id in 0..n_chains {
        let len = rng.gen_range(1..=6);
        let mut prev = None;
        for rank in 1..=len {
            items.push(Item {
                item_id: next_id,
                importance: rng.gen_range(0.0..10.0),
                cost: rng.gen_range(0..=20),
                chain_id,
                rank_position: rank,
                preceding_item_id: prev,
            });
            prev = Some(next_id);
            next_id += 1;
        }
    }
    let total: i64 = items.iter().map(|i| i.cost).sum();
    let budget = rng.gen_range(0..=total.max(1));
    (items, budget)
}

#[test]
fn criterion_01_solver_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0001);
    for case in 0..500 {
        let (items, budget) = random_instance(&mut rng);
        let exact = solve_exact(&items, budget).unwrap();
        let brute = brute_force(&items, budget).unwrap();
        assert!(
            (exact.total_importance - brute.total_importance).abs() <= 1e-9,
            "case {case}: exact {} vs brute {}",
            exact.total_importance,
            brute.total_importance
        );
        assert_eq!(exact.kept_item_ids, brute.kept_item_ids, "case {case}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!("criterion 01 (solver-oracle equivalence, 500 instances in {elapsed:?}): PASS");
}

#[test]
fn criterion_02_itemwise_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0001);
    let mut gaps = Vec::new();
    let mut ranked_gaps = Vec::new();
    for case in 0..500 {
        let (mut items, budget) = random_instance(&mut rng);
        let exact = solve_exact(&items, budget).unwrap();
        let approx = solve_itemwise(&items, budget).unwrap();
        assert!(is_prefix_closed(&items, &approx), "case {case}");
        let true_cost: i64 = items
            .iter()
            .filter(|i| approx.kept_item_ids.contains(&i.item_id))
            .map(|i| i.cost)
            .sum();
        assert!(true_cost <= budget, "case {case}: {true_cost} > {budget}");
        assert!(
            approx.total_importance <= exact.total_importance + 1e-9,
            "case {case}"
        );
        if exact.total_importance > 0.0 {
            gaps.push((exact.total_importance - approx.total_importance) / exact.total_importance);
        }

        // The same instance with importances sorted to descend along each
        // chain: the regime real grouped rankings produce.
        let mut by_chain: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for item in &items {
            by_chain.entry(item.chain_id).or_default().push(item.importance);
        }
        for imps in by_chain.values_mut() {
            imps.sort_by(|a, b| b.partial_cmp(a).unwrap());
        }
        for item in items.iter_mut() {
            item.importance = by_chain.get_mut(&item.chain_id).unwrap().remove(0);
        }
        let exact = solve_exact(&items, budget).unwrap();
        let approx = solve_itemwise(&items, budget).unwrap();
        assert!(is_prefix_closed(&items, &approx));
        assert!(approx.total_importance <= exact.total_importance + 1e-9);
        if exact.total_importance > 0.0 {
            ranked_gaps
                .push((exact.total_importance - approx.total_importance) / exact.total_importance);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "criterion 02 (itemwise fidelity; mean optimality gap {:.2}% raw, {:.2}% with \
         descending within-chain importances, over {} instances): PASS",
        mean(&gaps) * 100.0,
        mean(&ranked_gaps) * 100.0,
        gaps.len()
    );
}

fn resnet50_reference_table(spec: &NetworkSpec) -> LatencyTable {
    let steps = builtin_resnet50_step_sizes();
    let per_layer: BTreeMap<LayerId, StaircaseParams> = steps
        .into_iter()
        .map(|(layer, step)| {
            (
                layer,
                StaircaseParams {
                    step_in: step,
                    step_out: step,
                    ..StaircaseParams::default()
                },
            )
        })
        .collect();
    staircase_table(
        spec,
        &StaircaseConfig {
            default: StaircaseParams::default(),
            per_layer,
        },
    )
    .unwrap()
}

fn uniform_rankings(spec: &NetworkSpec) -> BTreeMap<LayerId, LayerRanking> {
    spec.layers
        .iter()
        .map(|l| {
            let scores: Vec<f64> = (0..l.out_channels)
                .map(|c| f64::from(l.out_channels - c))
                .collect();
            (l.layer_id, rank_layer(&scores).unwrap())
        })
        .collect()
}

#[test]
fn criterion_03_resnet50_structural_facts() {
    let spec = builtin_resnet50();
    assert_eq!(total_neurons(&spec), 26_560);

    let dense = ChannelAssignment::dense(&spec);
    let macs = network_flops(&spec, &dense).unwrap() as f64;
    assert!(
        (macs - 4.1e9).abs() <= 0.02 * 4.1e9,
        "dense MACs {macs} outside 4.1e9 +/- 2%"
    );

    let steps = builtin_resnet50_step_sizes();
    let count = |s: u32| steps.values().filter(|&&v| v == s).count();
    assert_eq!((count(32), count(64), count(128)), (23, 20, 10));

    let table = resnet50_reference_table(&spec);
    // Every layer wider than its step exposes its step size to detection;
    // the 64-wide stem at step 64 shows a single jump, so its size is
    // pinned explicitly along with the rest of the reference sizes.
    for layer in &spec.layers {
        if layer.layer_id == 0 {
            continue;
        }
        let p_in = pruneplan::netmodel::resolved_in_count(&spec, &dense, layer).unwrap();
        assert_eq!(
            table.step_size(layer.layer_id, p_in, 0).unwrap(),
            steps[&layer.layer_id],
            "layer {}",
            layer.layer_id
        );
    }
    let opts = GroupingOptions {
        step_overrides: steps,
        ..GroupingOptions::default()
    };
    let rankings = uniform_rankings(&spec);
    let groups = build_groups(&spec, &rankings, &table, &dense, &opts).unwrap();
    assert_eq!(groups.total_group_count(), 215);
    println!(
        "criterion 03 (reference net: 26560 neurons, {:.3} GMACs, 215 groups): PASS",
        macs / 1e9
    );
}

#[test]
fn criterion_04_telescoping_identity() {
    let spec = chain_spec(&[48, 32, 24], 6);
    let table = staircase_table(
        &spec,
        &StaircaseConfig {
            default: StaircaseParams {
                base_ms: 0.15,
                slope_ms: 0.05,
                step_in: 8,
                step_out: 8,
                noise_amplitude_ms: 0.04,
                noise_seed: 0xC4,
            },
            per_layer: BTreeMap::new(),
        },
    )
    .unwrap();
    let dense = ChannelAssignment::dense(&spec);
    for layer in &spec.layers {
        let p_in = pruneplan::netmodel::resolved_in_count(&spec, &dense, layer).unwrap();
        let id = layer.layer_id;
        let mut running = 0i64;
        for prefix in 1..=layer.out_channels {
            running += table.scaled_contribution(id, p_in, prefix).unwrap();
            let direct = to_int_cost(table.query(id, p_in, prefix).unwrap()).unwrap()
                - to_int_cost(table.query(id, p_in, 0).unwrap()).unwrap();
            assert_eq!(running, direct, "layer {id} prefix {prefix}");
        }
    }
    println!("criterion 04 (scaled-integer telescoping, every layer and prefix): PASS");
}

#[test]
fn criterion_05_monotonicity_and_scaling_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0005);
    for case in 0..120 {
        let (items, budget) = random_instance(&mut rng);
        let extra = rng.gen_range(0..=20);
        let lo = solve_exact(&items, budget).unwrap();
        let hi = solve_exact(&items, budget + extra).unwrap();
        assert!(
            hi.total_importance >= lo.total_importance - 1e-12,
            "case {case}: budget monotonicity"
        );

        let scaled_items: Vec<Item> = items
            .iter()
            .map(|i| Item {
                importance: i.importance * 7.3,
                ..i.clone()
            })
            .collect();
        let scaled = solve_exact(&scaled_items, budget).unwrap();
        assert_eq!(lo.kept_item_ids, scaled.kept_item_ids, "case {case}: scaling");
    }
    println!("criterion 05 (budget monotonicity + 7.3x scaling invariance, 120 instances): PASS");
}

/// Directly recompute a solution's scaled table cost from kept prefix
/// lengths, bypassing all solver bookkeeping.
fn direct_scaled_cost(
    spec: &NetworkSpec,
    assign: &ChannelAssignment,
    table: &LatencyTable,
    groups: &GroupedInstance,
    kept: &[u64],
) -> i64 {
    let kept: std::collections::BTreeSet<u64> = kept.iter().copied().collect();
    let mut total = 0i64;
    for (&chain_id, group_ids) in &groups.chains {
        let layers = groups.chain_layers(chain_id);
        let mut channels = 0u32;
        for &gid in group_ids {
            let group = groups.group(gid);
            if group.mandatory || kept.contains(&gid) {
                channels += (group.members.len() / layers.len()) as u32;
            }
        }
        for &layer in &layers {
            let p_in = pruneplan::netmodel::resolved_in_count(
                spec,
                assign,
                spec.layer(layer).unwrap(),
            )
            .unwrap();
            total += to_int_cost(table.query(layer, p_in, channels).unwrap()).unwrap();
        }
    }
    total
}

#[test]
fn criterion_06_negative_cost_handling() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0006);
    let mut with_negatives = 0;
    for seed in 0..300u64 {
        let spec = chain_spec(&[24, 18, 30], 5);
        let table = staircase_table(
            &spec,
            &StaircaseConfig {
                default: StaircaseParams {
                    base_ms: 0.1,
                    slope_ms: 0.05,
                    step_in: 8,
                    step_out: 8,
                    noise_amplitude_ms: 0.06,
                    noise_seed: seed,
                },
                per_layer: BTreeMap::new(),
            },
        )
        .unwrap();
        let rankings: BTreeMap<LayerId, LayerRanking> = spec
            .layers
            .iter()
            .map(|l| {
                let scores: Vec<f64> = (0..l.out_channels)
                    .map(|_| rng.gen_range(0.0..5.0))
                    .collect();
                (l.layer_id, rank_layer(&scores).unwrap())
            })
            .collect();
        let dense = ChannelAssignment::dense(&spec);
        let groups =
            build_groups(&spec, &rankings, &table, &dense, &GroupingOptions::default()).unwrap();
        if !groups.groups.iter().any(|g| g.cost_scaled < 0) {
            continue;
        }
        with_negatives += 1;
        let dense_scaled = network_latency_scaled(&spec, &dense, &table).unwrap();
        let budget = (rng.gen_range(0.2..0.9) * dense_scaled as f64) as i64
            - groups.mandatory_cost_scaled();
        let items = groups.solver_items();
        for (name, solution) in [
            ("exact", solve_exact(&items, budget).unwrap()),
            ("itemwise", solve_itemwise(&items, budget).unwrap()),
        ] {
            let direct =
                direct_scaled_cost(&spec, &dense, &table, &groups, &solution.kept_item_ids);
            let full_budget = budget + groups.mandatory_cost_scaled();
            assert!(
                direct <= full_budget,
                "seed {seed}: {name} direct cost {direct} > budget {full_budget}"
            );
        }
        if with_negatives >= 50 {
            break;
        }
    }
    assert!(
        with_negatives >= 50,
        "only {with_negatives} seeds produced a negative group cost"
    );
    println!(
        "criterion 06 (negative-cost instances; {with_negatives} seeds, both solvers under \
         directly-recomputed budget): PASS"
    );
}

#[test]
fn criterion_07_end_to_end_regime() {
    let start = Instant::now();
    let spec = chain_spec(&[20, 28, 16, 12], 4);
    let table = staircase_table(
        &spec,
        &StaircaseConfig {
            default: StaircaseParams {
                base_ms: 0.2,
                slope_ms: 0.05,
                step_in: 8,
                step_out: 8,
                ..StaircaseParams::default()
            },
            per_layer: BTreeMap::new(),
        },
    )
    .unwrap();
    let trace = gen_trace(
        &spec,
        &TraceGenOptions {
            seed: 0x5EED_0007,
            steps: 40,
            samples: 16,
            ..TraceGenOptions::default()
        },
    )
    .unwrap();
    let config = PruneConfig {
        constraint_kind: ConstraintKind::Latency,
        target_fraction: 0.5,
        steps: 10,
        window: 4,
        group_size_override: None,
        seed: 0x5EED_0007,
        solver: SolverKind::Exact,
        spec_path: std::path::PathBuf::new(),
        lut_path: None,
        trace_path: None,
    };
    let report = run_with_inputs(&config, &spec, Some(&table), &trace).unwrap();

    let dense = PruneState::dense(&spec).assignment();
    let c0 = network_latency_scaled(&spec, &dense, &table).unwrap() as f64 / 1000.0;
    let target = 0.5 * c0;

    assert_eq!(report.milestones.len(), 10);
    let budgets: Vec<f64> = report.milestones.iter().map(|m| m.budget_ms).collect();
    assert!(budgets.windows(2).all(|w| w[1] < w[0]), "strictly decreasing");
    assert_eq!(*budgets.last().unwrap(), target, "last milestone == target");
    for record in &report.milestones {
        let achieved = record.achieved_ms.unwrap();
        assert!(
            achieved <= record.budget_ms + 1e-9,
            "achieved {achieved} > milestone {}",
            record.budget_ms
        );
    }
    let final_latency = report.final_.latency_ms.unwrap();
    assert!(final_latency <= target + 1e-9);
    let macs: Vec<u64> = report.milestones.iter().map(|m| m.macs).collect();
    assert!(macs.windows(2).all(|w| w[1] <= w[0]), "MACs non-increasing");

    let again = run_with_inputs(&config, &spec, Some(&table), &trace).unwrap();
    assert_eq!(
        report.to_json_pretty().unwrap(),
        again.to_json_pretty().unwrap(),
        "byte-identical reports"
    );

    // Hyperparameter defaults come from the config layer.
    let defaults =
        PruneConfig::from_json(r#"{"target_fraction": 0.5, "spec_path": "spec.json"}"#).unwrap();
    assert_eq!((defaults.steps, defaults.window), (30, 320));

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!(
        "criterion 07 (end-to-end: 10 milestones respected, final {:.3} <= {:.3} ms, \
         deterministic, defaults 30/320, {elapsed:?}): PASS",
        final_latency, target
    );
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < values.len() {
        let mut j = i;
        while j + 1 < values.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let mean_a = ra.iter().sum::<f64>() / n;
    let mean_b = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean_a) * (y - mean_b);
        var_a += (x - mean_a) * (x - mean_a);
        var_b += (y - mean_b) * (y - mean_b);
    }
    cov / (var_a.sqrt() * var_b.sqrt())
}

#[test]
fn criterion_08_first_order_taylor_check() {
    let spec = chain_spec(&[24, 10], 6);
    let net = ToyNet::from_spec(&spec, 0, 96).unwrap();
    let snapshot = toy_grads(&net);

    // Central finite differences over every scale/shift parameter.
    let h = 1e-4;
    for (&layer, snap) in &snapshot.layers {
        for c in 0..snap.gamma.len() as u32 {
            let plus = net.with_gamma_shifted(layer, c, h).unwrap().loss();
            let minus = net.with_gamma_shifted(layer, c, -h).unwrap().loss();
            let fd = (plus - minus) / (2.0 * h);
            let grad = snap.grad_gamma[c as usize];
            assert!(
                (grad - fd).abs() <= 1e-5 * grad.abs().max(1e-6),
                "gamma l{layer} c{c}: grad {grad} fd {fd}"
            );
            let plus = net.with_beta_shifted(layer, c, h).unwrap().loss();
            let minus = net.with_beta_shifted(layer, c, -h).unwrap().loss();
            let fd = (plus - minus) / (2.0 * h);
            let grad = snap.grad_beta[c as usize];
            assert!(
                (grad - fd).abs() <= 1e-5 * grad.abs().max(1e-6),
                "beta l{layer} c{c}: grad {grad} fd {fd}"
            );
        }
    }

    // First-order scores rank channels like exact loss deltas do.
    let snap = &snapshot.layers[&0];
    let mut scores = Vec::new();
    let mut deltas = Vec::new();
    for c in 0..24u32 {
        scores.push(
            neuron_importance(
                snap.gamma[c as usize],
                snap.beta[c as usize],
                snap.grad_gamma[c as usize],
                snap.grad_beta[c as usize],
            )
            .unwrap(),
        );
        deltas.push(toy_loss_delta(&net, 0, c).unwrap().abs());
    }
    let rho = spearman(&scores, &deltas);
    assert!(rho >= 0.8, "Spearman {rho} < 0.8");
    println!(
        "criterion 08 (finite differences <= 1e-5 rel.; Spearman {:.3} >= 0.8): PASS",
        rho
    );
}

#[test]
fn criterion_09_flops_mode_matches_oracle() {
    let spec = chain_spec(&[8, 6, 4], 4);
    assert!(total_neurons(&spec) <= 20);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0009);
    let rankings: BTreeMap<LayerId, LayerRanking> = spec
        .layers
        .iter()
        .map(|l| {
            let scores: Vec<f64> = (0..l.out_channels)
                .map(|_| rng.gen_range(0.0..5.0))
                .collect();
            (l.layer_id, rank_layer(&scores).unwrap())
        })
        .collect();
    let dense = ChannelAssignment::dense(&spec);
    let groups = build_flops_groups(&spec, &rankings, &dense, 1).unwrap();

    // Within every layer (= chain here) all per-channel costs are equal
    // and match the per-layer cost table.
    let layer_costs = pruneplan::engine::flops_costs(&spec, &dense).unwrap();
    for group_ids in groups.chains.values() {
        let costs: Vec<i64> = group_ids
            .iter()
            .map(|&g| groups.group(g).cost_scaled)
            .collect();
        assert!(costs.windows(2).all(|w| w[0] == w[1]));
        let layer = groups.group(group_ids[0]).members[0].0;
        assert_eq!(costs[0], layer_costs[&layer] as i64);
    }

    let dense_macs = network_flops(&spec, &dense).unwrap() as i64;
    let items = groups.solver_items();
    for frac in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
        let budget = (frac * dense_macs as f64) as i64;
        let exact = solve_exact(&items, budget).unwrap();
        let brute = brute_force(&items, budget).unwrap();
        assert_eq!(exact.kept_item_ids, brute.kept_item_ids, "fraction {frac}");
        assert_eq!(exact.total_importance, brute.total_importance);
    }
    println!("criterion 09 (FLOPs mode: uniform per-layer costs, exact == brute force): PASS");
}

#[test]
fn criterion_10_integer_scaling_rule() {
    let cases: [(f64, i64); 20] = [
        (0.0, 0),
        (0.3, 300),
        (0.0004, 0),
        (-0.0004, 0),
        (0.2996, 300),
        (0.0625, 63),   // exactly 62.5 milli-units
        (-0.0625, -63), // exactly -62.5
        (0.1875, 188),  // exactly 187.5
        (-0.1875, -188),
        (1.4375, 1438), // exactly 1437.5
        (-1.4375, -1438),
        (2.8125, 2813), // exactly 2812.5
        (-2.8125, -2813),
        (1.0, 1000),
        (-1.0, -1000),
        (0.001, 1),
        (12.345, 12345),
        (0.9999, 1000),
        (5.0, 5000),
        (0.51, 510),
    ];
    let values: Vec<f64> = cases.iter().map(|c| c.0).collect();
    let expected: Vec<i64> = cases.iter().map(|c| c.1).collect();
    assert_eq!(to_int_costs(&values).unwrap(), expected);
    println!("criterion 10 (latency scaling: x1000, round half away from zero): PASS");
}
