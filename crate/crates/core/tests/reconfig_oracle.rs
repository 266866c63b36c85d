mod common;

use common::enumerate::{compare, oracle_fixed};
use common::gen::{random_instance, rng};
use microgrid_reconfig::reconfig::{default_settings, solve, sweep_lambda, CostSpec};

#[test]
fn matches_topology_enumeration() {
    let mut r = rng(100);
    let (mut feasible, mut with_open) = (0, 0);
    for case in 0..30 {
        let inst = random_instance(&mut r, 4);
        let c = compare(&inst).unwrap_or_else(|e| panic!("case {case}: {e}"));
        feasible += c.feasible as usize;
        with_open += (c.open > 0) as usize;
    }
    assert!(feasible >= 20, "{feasible}");
    assert!(with_open >= 5, "{with_open}");
}

#[test]
fn used_lines_are_locally_necessary() {
    let mut r = rng(101);
    let mut checked = 0;
    for _ in 0..20 {
        let inst = random_instance(&mut r, 4);
        let Ok(s) = solve(
            &inst.model,
            &inst.bounds,
            &inst.cost,
            inst.lambda,
            &default_settings(),
        ) else {
            continue;
        };
        let Some(base) = oracle_fixed(&inst, &s.open_lines, 0.0) else {
            continue;
        };
        for l in inst.model.switchable_lines() {
            if !s.used[l] {
                continue;
            }
            let mut open = s.open_lines.clone();
            open.push(l);
            if let Some(v) = oracle_fixed(&inst, &open, 0.0) {
                assert!(v >= base * (1.0 - 1e-7), "dropping line {l}: {v} < {base}");
            }
            checked += 1;
        }
    }
    assert!(checked > 10);
}

#[test]
fn warm_sweep_matches_cold_solves() {
    let mut r = rng(102);
    let lambdas = [0.0, 5.0, 50.0, 500.0];
    for _ in 0..5 {
        let inst = random_instance(&mut r, 4);
        let cost = CostSpec::loss();
        let sweep = sweep_lambda(
            &inst.model,
            &inst.bounds,
            &cost,
            &lambdas,
            &default_settings(),
        )
        .unwrap();
        for p in &sweep {
            let cold = solve(
                &inst.model,
                &inst.bounds,
                &cost,
                p.lambda,
                &default_settings(),
            );
            match (&p.outcome, cold) {
                (Ok(w), Ok(c)) => {
                    assert!((w.objective - c.objective).abs() <= 1e-5 * (1.0 + c.objective.abs()));
                    assert_eq!(w.open_lines, c.open_lines);
                }
                (Err(_), Err(_)) => {}
                (w, c) => panic!(
                    "lambda {}: warm {:?} cold {:?}",
                    p.lambda,
                    w.is_ok(),
                    c.is_ok()
                ),
            }
        }
    }
}
