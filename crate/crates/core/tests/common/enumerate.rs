//! Brute-force topology enumeration with the barrier oracle.

use super::barrier_solve;
use super::gen::Instance;
use microgrid_reconfig::reconfig::{default_settings, solve, Assembler, ReconfigError};

/// Best objective over all topologies (switchable subsets), each solved by the
/// oracle with the group terms of its remaining switchable lines. `None` when
/// every topology is infeasible.
pub fn enumerate_best(inst: &Instance) -> Option<(f64, Vec<usize>)> {
    let sw = inst.model.switchable_lines();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << sw.len()) {
        let open: Vec<usize> = (0..sw.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| sw[i])
            .collect();
        if let Some(v) = oracle_fixed(inst, &open, inst.lambda) {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, open));
            }
        }
    }
    best
}

/// Oracle objective with `open` removed; groups kept on the rest when `lambda > 0`.
pub fn oracle_fixed(inst: &Instance, open: &[usize], lambda: f64) -> Option<f64> {
    let a = Assembler::new(&inst.model, &inst.bounds, &inst.cost).ok()?;
    let mut scope = a.full_scope();
    scope.lines.retain(|l| !open.contains(l));
    let p = a.assemble(&scope, lambda).ok()?;
    let x = barrier_solve(&p.program)?;
    // The barrier path stays strictly interior, so a large violation means
    // phase I ended on a point that is not actually feasible.
    if p.program.max_violation(&x) > 1e-6 {
        return None;
    }
    Some(p.program.objective(&x))
}

pub struct Comparison {
    pub feasible: bool,
    pub open: usize,
}

/// Solves the regularized program and checks it against enumeration.
pub fn compare(inst: &Instance) -> Result<Comparison, String> {
    let ours = solve(
        &inst.model,
        &inst.bounds,
        &inst.cost,
        inst.lambda,
        &default_settings(),
    );
    let best = enumerate_best(inst);
    match (ours, best) {
        (Err(ReconfigError::Infeasible(_)), None) => Ok(Comparison {
            feasible: false,
            open: 0,
        }),
        (Err(e), b) => Err(format!(
            "solver error {e}; oracle best {:?}",
            b.map(|b| b.0)
        )),
        (Ok(s), None) => Err(format!(
            "solver feasible ({}) but every topology is infeasible for the oracle",
            s.objective
        )),
        (Ok(s), Some((best, best_open))) => {
            let tol = 1e-3 * best.abs().max(1e-6);
            if (s.objective - best).abs() > tol {
                return Err(format!(
                    "objective {} vs enumeration {best} (open {best_open:?})",
                    s.objective
                ));
            }
            let fixed = oracle_fixed(inst, &s.open_lines, inst.lambda).ok_or_else(|| {
                format!(
                    "extracted topology {:?} infeasible for the oracle",
                    s.open_lines
                )
            })?;
            if fixed > best + tol {
                return Err(format!(
                    "extracted topology {:?} re-solved to {fixed}, enumeration {best}",
                    s.open_lines
                ));
            }
            Ok(Comparison {
                feasible: true,
                open: s.open_lines.len(),
            })
        }
    }
}
