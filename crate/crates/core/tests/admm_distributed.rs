mod common;

use common::gen::{random_instance, rng, Instance};
use microgrid_reconfig::admm::{self, partition, AdmmSettings, Party};
use microgrid_reconfig::grid::NodeId;
use microgrid_reconfig::reconfig::{default_settings, solve};
use rand::Rng;

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    d / b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12)
}

/// One local area made of a random nonempty subset of the non-PCC nodes.
fn random_split(inst: &Instance, r: &mut rand_chacha::ChaCha8Rng) -> Vec<(String, Vec<NodeId>)> {
    let ids: Vec<NodeId> = inst
        .model
        .nodes()
        .iter()
        .map(|n| n.id)
        .filter(|&n| n != inst.model.pcc())
        .collect();
    let mut chosen: Vec<NodeId> = ids.iter().copied().filter(|_| r.random_bool(0.5)).collect();
    if chosen.is_empty() {
        chosen.push(ids[0]);
    }
    vec![("a".into(), chosen)]
}

#[test]
fn distributed_matches_centralized_on_random_feeders() {
    let mut r = rng(300);
    let mut checked = 0;
    for case in 0..40 {
        let inst = random_instance(&mut r, 4);
        let Ok(central) = solve(
            &inst.model,
            &inst.bounds,
            &inst.cost,
            inst.lambda,
            &default_settings(),
        ) else {
            continue;
        };
        let split = random_split(&inst, &mut r);
        let part = partition(&inst.model, &split, true).unwrap();
        if part.ties.is_empty() {
            continue;
        }
        let settings = AdmmSettings {
            kappa: 1.0,
            max_iters: 5000,
            ..AdmmSettings::default()
        };
        let out = admm::run(
            &inst.model,
            &inst.bounds,
            &inst.cost,
            inst.lambda,
            &part,
            &settings,
            Some(&central.xi),
        )
        .unwrap_or_else(|e| panic!("case {case}: {e}"));
        let d = rel(&out.solution.xi, &central.xi);
        eprintln!(
            "case {case}: iters {} converged {} dist {d:.2e} obj {} vs {}",
            out.iterations, out.converged, out.solution.objective, central.objective
        );
        assert!(out.converged, "case {case}");
        assert!(d <= 1e-4, "case {case}: distance {d}");
        assert!(
            out.dual_sum_max
                <= 1e-12
                    * (1.0
                        + out
                            .state
                            .mu
                            .iter()
                            .flatten()
                            .fold(0.0f64, |m, v| m.max(v.abs())))
        );
        checked += 1;
    }
    assert!(checked >= 10, "{checked}");
}

#[test]
fn message_pattern_follows_the_exchange() {
    let mut r = rng(301);
    let inst = loop {
        let inst = random_instance(&mut r, 4);
        if solve(
            &inst.model,
            &inst.bounds,
            &inst.cost,
            inst.lambda,
            &default_settings(),
        )
        .is_ok()
        {
            break inst;
        }
    };
    let ids: Vec<NodeId> = inst.model.nodes().iter().map(|n| n.id).skip(1).collect();
    let part = partition(&inst.model, &[("a".into(), ids)], true).unwrap();
    let settings = AdmmSettings {
        max_iters: 5,
        ..AdmmSettings::default()
    };
    let out = admm::run(
        &inst.model,
        &inst.bounds,
        &inst.cost,
        inst.lambda,
        &part,
        &settings,
        None,
    )
    .unwrap();
    let lacs = part.lac_count();
    for i in 1..=out.iterations {
        for a in 0..lacs {
            let n = part.neighbors(a).len();
            let up: Vec<_> = out
                .messages
                .log
                .iter()
                .filter(|m| m.iter == i && m.sender == Party::Lac(a))
                .collect();
            let down: Vec<_> = out
                .messages
                .log
                .iter()
                .filter(|m| m.iter == i && m.receiver == Party::Lac(a))
                .collect();
            assert_eq!(up.len(), n);
            assert_eq!(down.len(), n);
            assert!(up
                .iter()
                .all(|m| m.vectors == 1 && m.receiver == Party::Mgm));
            assert!(down
                .iter()
                .all(|m| m.vectors == 2 && m.sender == Party::Mgm && m.bytes == 2 * up[0].bytes));
        }
    }
}

fn feasible_instance(seed: u64) -> (Instance, Vec<f64>) {
    let mut r = rng(seed);
    loop {
        let inst = random_instance(&mut r, 4);
        if inst.model.nodes().len() < 4 {
            continue;
        }
        if let Ok(c) = solve(
            &inst.model,
            &inst.bounds,
            &inst.cost,
            inst.lambda,
            &default_settings(),
        ) {
            return (inst, c.xi);
        }
    }
}

fn two_areas(inst: &Instance) -> microgrid_reconfig::admm::AreaPartition {
    let ids: Vec<NodeId> = inst.model.nodes().iter().map(|n| n.id).collect();
    let half = ids.len() / 2;
    partition(&inst.model, &[("a".into(), ids[1..=half].to_vec())], true).unwrap()
}

#[test]
fn local_update_matches_qp_oracle() {
    for seed in 310..316 {
        let (inst, _) = feasible_instance(seed);
        let part = two_areas(&inst);
        let settings = AdmmSettings::default();
        let mut a = admm::Admm::new(
            &inst.model,
            &inst.bounds,
            &inst.cost,
            inst.lambda,
            &part,
            &settings,
        )
        .unwrap();
        let mut state = a.initial_state();
        let mut ch = admm::SimChannel::default();
        for _ in 0..3 {
            a.step(&mut state, &mut ch).unwrap();
        }
        let next = a.local_update(&state).unwrap();
        for k in 0..part.areas.len() {
            let prog = a.local_program(k, &state);
            let xo = common::barrier_solve(&prog).expect("local program feasible");
            let (fo, fs) = (prog.objective(&xo), prog.objective(&next[k]));
            assert!(
                (fo - fs).abs() <= 1e-6 * (1.0 + fo.abs()),
                "seed {seed} area {k}: {fs} vs {fo}"
            );
            // Currents are unique (strictly convex loss plus ridge); setpoints need not be.
            let prob = a.area_problem(k);
            let scale = 1.0 + xo.amax();
            for (&l, &off) in &prob.line_offset {
                for i in off..off + 2 * inst.model.lines()[l].phases.len() {
                    assert!(
                        (xo[i] - next[k][i]).abs() <= 1e-6 * scale,
                        "seed {seed} area {k} coord {i}"
                    );
                }
            }
        }
    }
}

#[test]
fn simplified_updates_match_unsimplified() {
    for seed in 320..324 {
        let (inst, _) = feasible_instance(seed);
        let part = two_areas(&inst);
        let settings = AdmmSettings {
            kappa: 2.0,
            ..AdmmSettings::default()
        };
        let mut a = admm::Admm::new(
            &inst.model,
            &inst.bounds,
            &inst.cost,
            inst.lambda,
            &part,
            &settings,
        )
        .unwrap();
        let mut state = a.initial_state();
        let mut ch = admm::SimChannel::default();
        for _ in 0..25 {
            a.step(&mut state, &mut ch).unwrap();
        }
        let mut b = admm::Admm::new(
            &inst.model,
            &inst.bounds,
            &inst.cost,
            inst.lambda,
            &part,
            &settings,
        )
        .unwrap();
        let (_, other) = b.run_unsimplified(25).unwrap();
        for t in 0..part.ties.len() {
            let scale = 1.0 + state.chi[t].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for k in 0..state.chi[t].len() {
                assert!(
                    (state.chi[t][k] - other.chi[t][k]).abs() <= 1e-6 * scale,
                    "seed {seed} chi"
                );
                assert!(
                    (state.mu[t][k] - other.mu[t][k]).abs() <= 1e-6 * (1.0 + state.mu[t][k].abs()),
                    "seed {seed} mu"
                );
                for s in 0..2 {
                    let d = (state.gamma[t][s][k] - other.gamma[t][s][k]).abs();
                    assert!(
                        d <= 1e-6 * (1.0 + state.gamma[t][s][k].abs()),
                        "seed {seed} gamma"
                    );
                }
            }
            for s in 0..2 {
                let (p, q) = (a.copy(&state.x, t, s), a.copy(&other.x, t, s));
                for k in 0..p.len() {
                    assert!((p[k] - q[k]).abs() <= 1e-6 * scale, "seed {seed} copy");
                }
            }
        }
        // The unsimplified form has independent multipliers; their sum stays zero.
        assert!(other.dual_sum_residual() <= 1e-9);
    }
}

#[test]
fn parallel_schedule_is_bit_identical() {
    let (inst, central) = feasible_instance(330);
    let ids: Vec<NodeId> = inst.model.nodes().iter().map(|n| n.id).collect();
    let part = partition(
        &inst.model,
        &[("a".into(), vec![ids[1]]), ("b".into(), ids[2..].to_vec())],
        true,
    )
    .unwrap();
    let seq = AdmmSettings {
        max_iters: 60,
        ..AdmmSettings::default()
    };
    let par = AdmmSettings {
        parallel: true,
        ..seq.clone()
    };
    let a = admm::run(
        &inst.model,
        &inst.bounds,
        &inst.cost,
        inst.lambda,
        &part,
        &seq,
        Some(&central),
    )
    .unwrap();
    let b = admm::run(
        &inst.model,
        &inst.bounds,
        &inst.cost,
        inst.lambda,
        &part,
        &par,
        Some(&central),
    )
    .unwrap();
    assert_eq!(a.trace.rows.len(), b.trace.rows.len());
    for (x, y) in a.trace.rows.iter().zip(&b.trace.rows) {
        assert_eq!(x.gap.to_bits(), y.gap.to_bits());
        assert_eq!(x.objective.to_bits(), y.objective.to_bits());
    }
    assert_eq!(a.messages.log, b.messages.log);
}

#[test]
fn single_area_degenerates_to_centralized() {
    let (inst, central) = feasible_instance(340);
    let ids: Vec<NodeId> = inst.model.nodes().iter().map(|n| n.id).collect();
    let part = partition(&inst.model, &[("all".into(), ids)], false).unwrap();
    assert!(part.ties.is_empty() && part.mgm_nodes.is_empty());
    let out = admm::run(
        &inst.model,
        &inst.bounds,
        &inst.cost,
        inst.lambda,
        &part,
        &AdmmSettings::default(),
        Some(&central),
    )
    .unwrap();
    assert!(out.converged);
    assert!(out.iterations <= 2);
    assert!(rel(&out.solution.xi, &central) <= 1e-6);
    assert!(out.messages.log.is_empty());
    let base = admm::subgradient_baseline(
        &inst.model,
        &inst.bounds,
        &inst.cost,
        inst.lambda,
        &part,
        &AdmmSettings {
            max_iters: 2,
            ..AdmmSettings::default()
        },
        0.1,
        Some(&central),
    )
    .unwrap();
    assert!(base
        .rows
        .iter()
        .all(|r| r.gap == 0.0 && r.dist_to_central.unwrap() <= 1e-6));
}

#[test]
fn zero_step_baseline_makes_no_progress() {
    let (inst, _) = feasible_instance(350);
    let part = two_areas(&inst);
    let settings = AdmmSettings {
        max_iters: 8,
        ..AdmmSettings::default()
    };
    let t = admm::subgradient_baseline(
        &inst.model,
        &inst.bounds,
        &inst.cost,
        inst.lambda,
        &part,
        &settings,
        0.0,
        None,
    )
    .unwrap();
    let gaps = t.max_gaps();
    for (_, g) in &gaps {
        assert!(
            (g - gaps[0].1).abs() <= 1e-6 * (1.0 + gaps[0].1),
            "{gaps:?}"
        );
    }
}

#[test]
fn dual_sum_identity_holds_every_iteration() {
    let (inst, _) = feasible_instance(360);
    let part = two_areas(&inst);
    let settings = AdmmSettings {
        kappa: 0.5,
        max_iters: 1,
        ..AdmmSettings::default()
    };
    let mut a = admm::Admm::new(
        &inst.model,
        &inst.bounds,
        &inst.cost,
        inst.lambda,
        &part,
        &settings,
    )
    .unwrap();
    let mut state = a.initial_state();
    let mut ch = admm::SimChannel::default();
    for _ in 0..50 {
        a.step(&mut state, &mut ch).unwrap();
        assert!(
            state.dual_sum_residual() <= 1e-12,
            "{}",
            state.dual_sum_residual()
        );
    }
}
