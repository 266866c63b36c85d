//! Assembly of the scenario-constrained group-sparse reconfiguration program,
//! its centralized solution, topology extraction and out-of-sample checks.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{
    build_incidence, is_radial, loss_matrix, nominal_injection_map, CurrentIndexing, FeederModel,
    IncidenceOperator, InjectionMap, LossForm, NodeId, Phase,
};
use crate::scenario::{
    CorrelationModel, ForecastErrorSpec, NetInjectionBounds, ScenarioError, ScenarioSampler,
};
use crate::socp::{
    Ball, Group, GroupSparseProgram, SocpError, SolveStatus, SolverResult, SolverSettings,
    SplittingSolver,
};

/// Relative objective slack within which two topologies count as tied.
pub const TIE_TOL: f64 = 1e-6;

/// Largest accepted constraint violation in the audit, amperes (power rows
/// are converted at nominal voltage).
pub const AUDIT_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ReconfigError {
    #[error("bounds do not match the demand set of the model: {0}")]
    BoundsMismatch(String),
    #[error("no node/phase hosts load or generation")]
    EmptyDemand,
    #[error("problem is infeasible{0}")]
    Infeasible(String),
    #[error("solver did not converge after {iterations} iterations")]
    NotConverged {
        iterations: usize,
        solution: Box<ReconfigSolution>,
    },
    #[error("audit failed: {what} violated by {amount:.3e}")]
    Audit { what: String, amount: f64 },
    #[error(transparent)]
    Socp(#[from] SocpError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("invalid cost: {0}")]
    Cost(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    Loss,
    Operation,
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub kind: CostKind,
    #[serde(default = "one")]
    pub loss_weight: f64,
    #[serde(default = "one")]
    pub op_weight: f64,
    /// Overrides the model's pcc price.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pcc_coeff: Option<f64>,
    /// Overrides per-node dg cost coefficients.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub dg_coeffs: BTreeMap<u32, f64>,
    /// Per-line coefficient on Σ_φ |I^φ|, keyed by line position.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub line_terms: BTreeMap<usize, f64>,
}

fn one() -> f64 {
    1.0
}

impl CostSpec {
    pub fn loss() -> Self {
        CostSpec {
            kind: CostKind::Loss,
            loss_weight: 1.0,
            op_weight: 1.0,
            pcc_coeff: None,
            dg_coeffs: BTreeMap::new(),
            line_terms: BTreeMap::new(),
        }
    }

    pub fn operation() -> Self {
        CostSpec {
            kind: CostKind::Operation,
            ..Self::loss()
        }
    }

    pub fn weighted(loss_weight: f64, op_weight: f64) -> Self {
        CostSpec {
            kind: CostKind::Weighted,
            loss_weight,
            op_weight,
            ..Self::loss()
        }
    }

    /// (loss weight, operation weight) actually applied.
    pub fn weights(&self) -> (f64, f64) {
        match self.kind {
            CostKind::Loss => (1.0, 0.0),
            CostKind::Operation => (0.0, 1.0),
            CostKind::Weighted => (self.loss_weight, self.op_weight),
        }
    }

    fn validate(&self, model: &FeederModel) -> Result<(), ReconfigError> {
        let (lw, ow) = self.weights();
        if !(lw >= 0.0 && ow >= 0.0 && lw.is_finite() && ow.is_finite()) || (lw == 0.0 && ow == 0.0)
        {
            return Err(ReconfigError::Cost(
                "weights must be nonnegative and not all zero".into(),
            ));
        }
        for (&l, &a) in &self.line_terms {
            if l >= model.lines().len() || !(a.is_finite() && a >= 0.0) {
                return Err(ReconfigError::Cost(format!(
                    "line term {l}: bad line or coefficient"
                )));
            }
        }
        for (&n, &c) in &self.dg_coeffs {
            if model.node(NodeId(n)).and_then(|n| n.dg.as_ref()).is_none() || !c.is_finite() {
                return Err(ReconfigError::Cost(format!(
                    "dg coefficient for node {n}: no dg there"
                )));
            }
        }
        Ok(())
    }

    fn pcc_price(&self, model: &FeederModel) -> f64 {
        self.pcc_coeff.unwrap_or(model.price_pcc())
    }

    fn dg_price(&self, model: &FeederModel, node: NodeId) -> f64 {
        self.dg_coeffs.get(&node.0).copied().unwrap_or_else(|| {
            model
                .node(node)
                .and_then(|n| n.dg.as_ref())
                .map(|d| d.cost_coeff)
                .unwrap_or(0.0)
        })
    }
}

/// Dispatchable-generator variables of one (node, phase); powers are scaled
/// by the nominal voltage inside the program.
#[derive(Debug, Clone, PartialEq)]
pub struct DgVar {
    pub node: NodeId,
    pub phase: Phase,
    pub p: usize,
    pub q: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemandRow {
    pub node: NodeId,
    pub phase: Phase,
    pub p_bound: f64,
    pub q_bound: f64,
}

/// Shared precomputation for assembling programs on subsets of a feeder.
pub struct Assembler<'a> {
    pub model: &'a FeederModel,
    pub idx: CurrentIndexing,
    pub inc: IncidenceOperator,
    pub inj: InjectionMap,
    pub loss: LossForm,
    bounds: BTreeMap<(NodeId, Phase), (f64, f64)>,
    pub cost: CostSpec,
}

/// What to include when assembling a program.
#[derive(Debug, Clone)]
pub struct Scope {
    /// Lines carrying variables, in variable order.
    pub lines: Vec<usize>,
    /// Nodes whose Kirchhoff / loss-of-load rows and dg variables are included.
    pub nodes: BTreeSet<NodeId>,
    /// Lines whose currents form a group.
    pub grouped: BTreeSet<usize>,
    /// Lines whose loss and magnitude terms enter the cost.
    pub costed: BTreeSet<usize>,
}

impl<'a> Assembler<'a> {
    pub fn new(
        model: &'a FeederModel,
        bounds: &NetInjectionBounds,
        cost: &CostSpec,
    ) -> Result<Self, ReconfigError> {
        cost.validate(model)?;
        let demand = model.demand_pairs();
        if demand.is_empty() {
            return Err(ReconfigError::EmptyDemand);
        }
        if bounds.pairs != demand
            || bounds.p_bound.len() != demand.len()
            || bounds.q_bound.len() != demand.len()
        {
            return Err(ReconfigError::BoundsMismatch(format!(
                "expected {} pairs in model order, got {}",
                demand.len(),
                bounds.pairs.len()
            )));
        }
        if bounds
            .p_bound
            .iter()
            .chain(&bounds.q_bound)
            .any(|v| !v.is_finite())
        {
            return Err(ReconfigError::BoundsMismatch("non-finite bound".into()));
        }
        let (idx, inc) = build_incidence(model);
        let loss = loss_matrix(model, &idx);
        let inj = nominal_injection_map(model);
        let bounds = demand
            .iter()
            .enumerate()
            .map(|(i, p)| (*p, (bounds.p_bound[i], bounds.q_bound[i])))
            .collect();
        Ok(Assembler {
            model,
            idx,
            inc,
            inj,
            loss,
            bounds,
            cost: cost.clone(),
        })
    }

    pub fn full_scope(&self) -> Scope {
        let lines: Vec<usize> = (0..self.model.lines().len()).collect();
        Scope {
            grouped: self.model.switchable_lines().into_iter().collect(),
            costed: lines.iter().copied().collect(),
            nodes: self.model.nodes().iter().map(|n| n.id).collect(),
            lines,
        }
    }

    fn omegas(&self, grouped: &[usize]) -> Vec<f64> {
        grouped
            .iter()
            .map(|&l| self.model.lines()[l].weight)
            .collect()
    }

    pub fn assemble(&self, scope: &Scope, lambda: f64) -> Result<ReconfigProblem, ReconfigError> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(ReconfigError::Cost(
                "lambda must be finite and nonnegative".into(),
            ));
        }
        let model = self.model;
        let m_n = model.nominal_voltage();
        let (lw, ow) = self.cost.weights();

        let mut line_offset = BTreeMap::new();
        let mut n = 0;
        for &l in &scope.lines {
            line_offset.insert(l, n);
            n += 2 * model.lines()[l].phases.len();
        }
        let mut dg_vars = Vec::new();
        for node in model.nodes() {
            if !scope.nodes.contains(&node.id) || node.id == model.pcc() {
                continue;
            }
            if let Some(dg) = &node.dg {
                for &ph in &node.phases {
                    let p = n;
                    n += 1;
                    let q = if dg.unity_pf {
                        None
                    } else {
                        n += 1;
                        Some(n - 1)
                    };
                    dg_vars.push(DgVar {
                        node: node.id,
                        phase: ph,
                        p,
                        q,
                    });
                }
            }
        }

        let mut prog = GroupSparseProgram::new(n);
        // Loss ξᵀLξ enters as ½ξᵀ(2L)ξ.
        if lw > 0.0 {
            for &l in scope.lines.iter().filter(|l| scope.costed.contains(l)) {
                let off = line_offset[&l];
                let r = self.loss.line_resistance(l);
                for i in 0..r.nrows() {
                    for j in 0..r.ncols() {
                        prog.q[(off + 2 * i, off + 2 * j)] += 2.0 * lw * r[(i, j)];
                        prog.q[(off + 2 * i + 1, off + 2 * j + 1)] += 2.0 * lw * r[(i, j)];
                    }
                }
            }
        }
        if ow > 0.0 {
            if scope.nodes.contains(&model.pcc()) {
                let c1 = self.cost.pcc_price(model);
                let pcc = model.node(model.pcc()).expect("validated");
                for &ph in &pcc.phases {
                    let phi = self.inj.phase(ph).phi;
                    for &(s, sign) in self.inc.entries(pcc.id, ph) {
                        let line = self.idx.slots()[s].line;
                        let Some(&off) = line_offset.get(&line) else {
                            continue;
                        };
                        let k = s - self.idx.line_slots(line).start;
                        prog.c[off + 2 * k] += ow * c1 * sign * phi[0];
                        prog.c[off + 2 * k + 1] += ow * c1 * sign * phi[1];
                    }
                }
            }
            for v in &dg_vars {
                prog.c[v.p] += ow * self.cost.dg_price(model, v.node) * m_n;
            }
        }
        for v in &dg_vars {
            let dg = model
                .node(v.node)
                .and_then(|n| n.dg.as_ref())
                .expect("dg var");
            prog.lower[v.p] = dg.p_min / m_n;
            prog.upper[v.p] = dg.p_max / m_n;
            if let Some(q) = v.q {
                prog.lower[q] = dg.q_min / m_n;
                prog.upper[q] = dg.q_max / m_n;
            }
        }

        // Ampacity disks with optional magnitude cost.
        for &l in &scope.lines {
            let off = line_offset[&l];
            let line = &model.lines()[l];
            let alpha = if scope.costed.contains(&l) {
                self.cost.line_terms.get(&l).copied().unwrap_or(0.0)
            } else {
                0.0
            };
            for k in 0..line.phases.len() {
                prog.balls.push(Ball {
                    re: off + 2 * k,
                    im: off + 2 * k + 1,
                    radius: line.i_max,
                    alpha,
                });
            }
        }

        let group_lines: Vec<usize> = scope
            .lines
            .iter()
            .copied()
            .filter(|l| scope.grouped.contains(l))
            .collect();
        let omega = self.omegas(&group_lines);
        for (&l, w) in group_lines.iter().zip(&omega) {
            let off = line_offset[&l];
            let len = 2 * model.lines()[l].phases.len();
            prog.groups.push(Group {
                indices: (off..off + len).collect(),
                weight: lambda * w,
            });
        }

        let mut eq_rows: Vec<(Vec<f64>, f64)> = Vec::new();
        let mut in_rows: Vec<(Vec<f64>, f64)> = Vec::new();
        let mut demand_rows = Vec::new();
        for node in model.nodes() {
            if !scope.nodes.contains(&node.id) || node.id == model.pcc() {
                continue;
            }
            for &ph in &node.phases {
                let mut re = vec![0.0; n];
                let mut im = vec![0.0; n];
                for &(s, sign) in self.inc.entries(node.id, ph) {
                    let line = self.idx.slots()[s].line;
                    let Some(&off) = line_offset.get(&line) else {
                        continue;
                    };
                    let k = s - self.idx.line_slots(line).start;
                    re[off + 2 * k] += sign;
                    im[off + 2 * k + 1] += sign;
                }
                match self.bounds.get(&(node.id, ph)) {
                    None => {
                        eq_rows.push((re, 0.0));
                        eq_rows.push((im, 0.0));
                    }
                    Some(&(pb, qb)) => {
                        let inj = self.inj.phase(ph);
                        // Rows in ampere-equivalents: (φ/M_N)ᵀ A ξ − P̂_G ≤ P_min/M_N.
                        let mut prow = vec![0.0; n];
                        let mut qrow = vec![0.0; n];
                        for j in 0..n {
                            prow[j] = (inj.phi[0] * re[j] + inj.phi[1] * im[j]) / m_n;
                            qrow[j] = (inj.phi_bar[0] * re[j] + inj.phi_bar[1] * im[j]) / m_n;
                        }
                        if let Some(v) = dg_vars.iter().find(|v| v.node == node.id && v.phase == ph)
                        {
                            prow[v.p] = -1.0;
                            if let Some(q) = v.q {
                                qrow[q] = -1.0;
                            }
                        }
                        in_rows.push((prow, pb / m_n));
                        in_rows.push((qrow, qb / m_n));
                        demand_rows.push(DemandRow {
                            node: node.id,
                            phase: ph,
                            p_bound: pb,
                            q_bound: qb,
                        });
                    }
                }
            }
        }
        // Rows without variables are either vacuous or certify infeasibility.
        let mut keep_eq = Vec::new();
        for (row, b) in eq_rows {
            if row.iter().all(|v| *v == 0.0) {
                if b != 0.0 {
                    return Err(ReconfigError::Infeasible(": isolated equality".into()));
                }
            } else {
                keep_eq.push((row, b));
            }
        }
        let mut keep_in = Vec::new();
        for (row, h) in in_rows {
            if row.iter().all(|v| *v == 0.0) {
                if h < 0.0 {
                    return Err(ReconfigError::Infeasible(
                        ": demand at an isolated node".into(),
                    ));
                }
            } else {
                keep_in.push((row, h));
            }
        }
        prog.a_eq = DMatrix::from_fn(keep_eq.len(), n, |i, j| keep_eq[i].0[j]);
        prog.b_eq = DVector::from_iterator(keep_eq.len(), keep_eq.iter().map(|r| r.1));
        prog.a_in = DMatrix::from_fn(keep_in.len(), n, |i, j| keep_in[i].0[j]);
        prog.b_in = DVector::from_iterator(keep_in.len(), keep_in.iter().map(|r| r.1));

        Ok(ReconfigProblem {
            program: prog,
            lambda,
            lines: scope.lines.clone(),
            line_offset,
            group_lines,
            omega,
            dg_vars,
            demand_rows,
        })
    }
}

/// An assembled program plus the bookkeeping to map its variables back.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconfigProblem {
    pub program: GroupSparseProgram,
    pub lambda: f64,
    pub lines: Vec<usize>,
    pub line_offset: BTreeMap<usize, usize>,
    pub group_lines: Vec<usize>,
    pub omega: Vec<f64>,
    pub dg_vars: Vec<DgVar>,
    pub demand_rows: Vec<DemandRow>,
}

impl ReconfigProblem {
    pub fn group_weights(&self, lambda: f64) -> Vec<f64> {
        self.omega.iter().map(|w| lambda * w).collect()
    }

    /// Full stacked current vector (zeros on lines outside the program).
    pub fn currents(&self, x: &DVector<f64>, idx: &CurrentIndexing) -> Vec<f64> {
        let mut xi = vec![0.0; idx.dim()];
        for (&l, &off) in &self.line_offset {
            let r = idx.line_coords(l);
            xi[r.clone()].copy_from_slice(&x.as_slice()[off..off + r.len()]);
        }
        xi
    }

    /// DG setpoints in W/var per (node, phase).
    pub fn setpoints(&self, x: &DVector<f64>, m_n: f64) -> Vec<DgSetpoint> {
        self.dg_vars
            .iter()
            .map(|v| DgSetpoint {
                node: v.node,
                phase: v.phase,
                p_w: x[v.p] * m_n,
                q_var: v.q.map(|q| x[q] * m_n).unwrap_or(0.0),
            })
            .collect()
    }
}

/// Convenience: assemble over the whole feeder.
pub fn assemble(
    model: &FeederModel,
    bounds: &NetInjectionBounds,
    cost: &CostSpec,
    lambda: f64,
) -> Result<ReconfigProblem, ReconfigError> {
    let a = Assembler::new(model, bounds, cost)?;
    a.assemble(&a.full_scope(), lambda)
}

/// Whole-feeder program at a fixed topology: `open` lines carry no current
/// and no group terms are present.
pub fn assemble_fixed(
    model: &FeederModel,
    bounds: &NetInjectionBounds,
    cost: &CostSpec,
    open: &[usize],
) -> Result<ReconfigProblem, ReconfigError> {
    let a = Assembler::new(model, bounds, cost)?;
    let mut scope = a.full_scope();
    scope.lines.retain(|l| !open.contains(l));
    scope.grouped.clear();
    a.assemble(&scope, 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgSetpoint {
    pub node: NodeId,
    pub phase: Phase,
    pub p_w: f64,
    pub q_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LolMargin {
    pub node: NodeId,
    pub phase: Phase,
    /// Bound minus the power drawn into the network, W (nonnegative when satisfied).
    pub p_margin_w: f64,
    pub q_margin_var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconfigSolution {
    pub xi: Vec<f64>,
    pub dg_setpoints: Vec<DgSetpoint>,
    /// Per line: in use.
    pub used: Vec<bool>,
    /// Switchable lines found open.
    pub open_lines: Vec<usize>,
    /// Regularized objective.
    pub objective: f64,
    /// Cost without the group terms (loss and operation parts per `CostSpec`).
    pub cost: f64,
    /// Σ_φ |I^φ| per line, A.
    pub line_current_mag: Vec<f64>,
    pub lol_margin: Vec<LolMargin>,
    pub max_violation: f64,
    pub radial: bool,
    pub iterations: usize,
    pub status: SolveStatus,
    pub lambda: f64,
}

impl ReconfigSolution {
    pub fn open_count(&self) -> usize {
        self.open_lines.len()
    }
}

/// Unregularized cost of (ξ, dg) computed from physical quantities.
pub fn evaluate_cost(model: &FeederModel, cost: &CostSpec, xi: &[f64], dg: &[DgSetpoint]) -> f64 {
    let (idx, inc) = build_incidence(model);
    let loss = loss_matrix(model, &idx);
    let inj = nominal_injection_map(model);
    let (lw, ow) = cost.weights();
    let mut total = lw * loss.value(xi);
    if ow > 0.0 {
        let pcc = model.node(model.pcc()).expect("validated");
        let p_pcc: f64 = pcc
            .phases
            .iter()
            .map(|&ph| {
                let i = inc.apply(pcc.id, ph, xi);
                let phi = inj.phase(ph).phi;
                phi[0] * i[0] + phi[1] * i[1]
            })
            .sum();
        total += ow * cost.pcc_price(model) * p_pcc;
        total += ow
            * dg.iter()
                .map(|d| cost.dg_price(model, d.node) * d.p_w)
                .sum::<f64>();
    }
    for (&l, &a) in &cost.line_terms {
        let r = idx.line_slots(l);
        total += a * r.map(|s| idx.current(xi, s).norm()).sum::<f64>();
    }
    total
}

/// Re-checks every constraint from the model and bounds, independently of the
/// program. Returns the largest violation (A or A-equivalent) and its label.
pub fn audit(
    model: &FeederModel,
    bounds: &NetInjectionBounds,
    xi: &[f64],
    dg: &[DgSetpoint],
) -> (f64, String, Vec<LolMargin>) {
    let (idx, inc) = build_incidence(model);
    let inj = nominal_injection_map(model);
    let m_n = model.nominal_voltage();
    let mut worst = (0.0f64, String::from("none"));
    let mut bump = |v: f64, what: &dyn Fn() -> String| {
        if v > worst.0 {
            worst = (v, what());
        }
    };
    let demand: BTreeMap<_, _> = bounds
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (*p, i))
        .collect();
    let mut margins = Vec::new();
    for node in model.nodes() {
        if node.id == model.pcc() {
            continue;
        }
        for &ph in &node.phases {
            let i = inc.apply(node.id, ph, xi);
            match demand.get(&(node.id, ph)) {
                None => bump(i[0].abs().max(i[1].abs()), &|| {
                    format!("kirchhoff ({},{})", node.id, ph)
                }),
                Some(&k) => {
                    let sp = dg.iter().find(|d| d.node == node.id && d.phase == ph);
                    let (pg, qg) = sp.map(|d| (d.p_w, d.q_var)).unwrap_or((0.0, 0.0));
                    let e = inj.phase(ph);
                    let p_out = e.phi[0] * i[0] + e.phi[1] * i[1] - pg;
                    let q_out = e.phi_bar[0] * i[0] + e.phi_bar[1] * i[1] - qg;
                    let mp = bounds.p_bound[k] - p_out;
                    let mq = bounds.q_bound[k] - q_out;
                    bump(-mp / m_n, &|| {
                        format!("active loss-of-load ({},{})", node.id, ph)
                    });
                    bump(-mq / m_n, &|| {
                        format!("reactive loss-of-load ({},{})", node.id, ph)
                    });
                    margins.push(LolMargin {
                        node: node.id,
                        phase: ph,
                        p_margin_w: mp,
                        q_margin_var: mq,
                    });
                }
            }
        }
    }
    for (s, slot) in idx.slots().iter().enumerate() {
        let line = &model.lines()[slot.line];
        bump(idx.current(xi, s).norm() - line.i_max, &|| {
            format!("ampacity {} {}", line.label(), slot.phase)
        });
    }
    for d in dg {
        let spec = model.node(d.node).and_then(|n| n.dg.as_ref());
        if let Some(g) = spec {
            let v = (g.p_min - d.p_w)
                .max(d.p_w - g.p_max)
                .max(g.q_min - d.q_var)
                .max(d.q_var - g.q_max);
            bump(v / m_n, &|| format!("dg limits {}", d.node));
        }
    }
    (worst.0, worst.1, margins)
}

/// Default settings for reconfiguration programs: the audit measures
/// absolute violations, so feasibility is tightened.
pub fn default_settings() -> SolverSettings {
    SolverSettings {
        tol_feas: 1e-9,
        ..SolverSettings::default()
    }
}

pub(crate) fn build_solution(
    model: &FeederModel,
    bounds: &NetInjectionBounds,
    cost: &CostSpec,
    problem: &ReconfigProblem,
    result: &SolverResult,
) -> ReconfigSolution {
    let idx = CurrentIndexing::new(model);
    let xi = problem.currents(&result.x, &idx);
    let dg = problem.setpoints(&result.x, model.nominal_voltage());
    let mut used = vec![false; model.lines().len()];
    for &l in &problem.lines {
        used[l] = true;
    }
    for (g, &l) in problem.group_lines.iter().enumerate() {
        if result.zero_groups[g] {
            used[l] = false;
        }
    }
    let grouped: Vec<(usize, f64)> = problem
        .group_lines
        .iter()
        .copied()
        .zip(problem.group_weights(problem.lambda))
        .collect();
    finish_solution(
        model,
        bounds,
        cost,
        problem.lambda,
        &grouped,
        xi,
        dg,
        used,
        result.iterations,
        result.status,
    )
}

/// Derived quantities of a solution given its currents, setpoints and the
/// lines in service. `grouped` lists (line, group weight) pairs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn finish_solution(
    model: &FeederModel,
    bounds: &NetInjectionBounds,
    cost: &CostSpec,
    lambda: f64,
    grouped: &[(usize, f64)],
    xi: Vec<f64>,
    dg: Vec<DgSetpoint>,
    used: Vec<bool>,
    iterations: usize,
    status: SolveStatus,
) -> ReconfigSolution {
    let idx = CurrentIndexing::new(model);
    let open_lines: Vec<usize> = model
        .switchable_lines()
        .into_iter()
        .filter(|&l| !used[l])
        .collect();
    let line_current_mag = (0..model.lines().len())
        .map(|l| idx.line_slots(l).map(|s| idx.current(&xi, s).norm()).sum())
        .collect();
    let (max_violation, _, lol_margin) = audit(model, bounds, &xi, &dg);
    let c = evaluate_cost(model, cost, &xi, &dg);
    let reg: f64 = grouped
        .iter()
        .map(|&(l, w)| {
            w * idx
                .line_coords(l)
                .map(|i| xi[i] * xi[i])
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    ReconfigSolution {
        radial: is_radial(model, &used),
        xi,
        dg_setpoints: dg,
        used,
        open_lines,
        objective: c + reg,
        cost: c,
        line_current_mag,
        lol_margin,
        max_violation,
        iterations,
        status,
        lambda,
    }
}

fn classify(solution: ReconfigSolution) -> Result<ReconfigSolution, ReconfigError> {
    match solution.status {
        SolveStatus::Infeasible => Err(ReconfigError::Infeasible(format!(
            " at lambda {}",
            solution.lambda
        ))),
        SolveStatus::MaxIters => Err(ReconfigError::NotConverged {
            iterations: solution.iterations,
            solution: Box::new(solution),
        }),
        SolveStatus::Optimal => {
            if solution.max_violation > AUDIT_TOL {
                let (amount, what, _) = (solution.max_violation, String::from("constraint"), ());
                return Err(ReconfigError::Audit { what, amount });
            }
            Ok(solution)
        }
    }
}

pub fn solve_centralized(
    model: &FeederModel,
    bounds: &NetInjectionBounds,
    cost: &CostSpec,
    problem: &ReconfigProblem,
    settings: &SolverSettings,
) -> Result<ReconfigSolution, ReconfigError> {
    let mut solver = SplittingSolver::new(problem.program.clone(), settings.clone())?;
    let result = solver.solve();
    classify(build_solution(model, bounds, cost, problem, &result))
}

/// Assemble and solve over the whole feeder.
pub fn solve(
    model: &FeederModel,
    bounds: &NetInjectionBounds,
    cost: &CostSpec,
    lambda: f64,
    settings: &SolverSettings,
) -> Result<ReconfigSolution, ReconfigError> {
    let p = assemble(model, bounds, cost, lambda)?;
    solve_centralized(model, bounds, cost, &p, settings)
}

/// Fixed-topology solve with the given switchable lines open.
pub fn solve_fixed(
    model: &FeederModel,
    bounds: &NetInjectionBounds,
    cost: &CostSpec,
    open: &[usize],
    settings: &SolverSettings,
) -> Result<ReconfigSolution, ReconfigError> {
    let p = assemble_fixed(model, bounds, cost, open)?;
    let mut s = solve_centralized(model, bounds, cost, &p, settings)?;
    s.open_lines = open.to_vec();
    Ok(s)
}

/// Deterministic tie-breaking among optimal topologies: used switchable lines
/// are tentatively opened from the highest slot down, and an opening is kept
/// when the regularized objective does not rise by more than `TIE_TOL`.
pub fn resolve_ties(
    model: &FeederModel,
    bounds: &NetInjectionBounds,
    cost: &CostSpec,
    solution: ReconfigSolution,
    settings: &SolverSettings,
) -> Result<ReconfigSolution, ReconfigError> {
    let a = Assembler::new(model, bounds, cost)?;
    let mut scope = a.full_scope();
    scope
        .lines
        .retain(|&l| solution.used[l] || !model.lines()[l].switchable);
    let mut best = solution;
    let candidates: Vec<usize> = model
        .switchable_lines()
        .into_iter()
        .rev()
        .filter(|&l| best.used[l])
        .collect();
    for l in candidates {
        let mut trial = scope.clone();
        trial.lines.retain(|&x| x != l);
        let Ok(p) = a.assemble(&trial, best.lambda) else {
            continue;
        };
        let Ok(s) = solve_centralized(model, bounds, cost, &p, settings) else {
            continue;
        };
        if s.objective <= best.objective + TIE_TOL * (1.0 + best.objective.abs()) {
            scope = trial;
            best = s;
        }
    }
    Ok(best)
}

#[derive(Debug)]
pub struct SweepPoint {
    pub lambda: f64,
    pub outcome: Result<ReconfigSolution, ReconfigError>,
    /// Index of the last feasible point at or before this one.
    pub last_feasible: Option<usize>,
}

/// Solves for each λ (ascending), warm-starting from the previous point.
pub fn sweep_lambda(
    model: &FeederModel,
    bounds: &NetInjectionBounds,
    cost: &CostSpec,
    lambdas: &[f64],
    settings: &SolverSettings,
) -> Result<Vec<SweepPoint>, ReconfigError> {
    if lambdas.windows(2).any(|w| w[1] < w[0]) {
        return Err(ReconfigError::Cost("lambda list must be ascending".into()));
    }
    let first = lambdas.first().copied().unwrap_or(0.0);
    let problem = assemble(model, bounds, cost, first)?;
    let mut solver = SplittingSolver::new(problem.program.clone(), settings.clone())?;
    let mut out: Vec<SweepPoint> = Vec::with_capacity(lambdas.len());
    let mut last_x: Option<DVector<f64>> = None;
    let mut last_feasible = None;
    for (i, &lambda) in lambdas.iter().enumerate() {
        let mut p = problem.clone();
        p.lambda = lambda;
        let w = p.group_weights(lambda);
        for (g, wi) in p.program.groups.iter_mut().zip(&w) {
            g.weight = *wi;
        }
        solver.set_group_weights(&w);
        match &last_x {
            Some(x) => solver.warm_start(x),
            None => solver.reset(),
        }
        let result = solver.solve();
        if result.status == SolveStatus::Optimal {
            last_x = Some(result.x.clone());
        } else {
            solver.reset();
        }
        let outcome = classify(build_solution(model, bounds, cost, &p, &result));
        if outcome.is_ok() {
            last_feasible = Some(i);
        }
        out.push(SweepPoint {
            lambda,
            outcome,
            last_feasible,
        });
    }
    Ok(out)
}

/// CSV matrix: one row per switchable line, one column per λ, entries
/// Σ_φ|I^φ| (0 for an open switch, `INF` where the point is infeasible).
pub fn write_sweep_csv<W: Write>(
    model: &FeederModel,
    points: &[SweepPoint],
    w: W,
) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["line".to_string()];
    header.extend(points.iter().map(|p| format!("{}", p.lambda)));
    wr.write_record(&header)?;
    for l in model.switchable_lines() {
        let line = &model.lines()[l];
        let mut row = vec![format!("{}-{}", line.from, line.to)];
        for p in points {
            row.push(match &p.outcome {
                Ok(s) => format!("{}", s.line_current_mag[l]),
                Err(_) => "INF".to_string(),
            });
        }
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LolReport {
    pub joint_rate: f64,
    pub marginal: Vec<((NodeId, Phase), f64)>,
    /// Pairs whose marginal rate is below one.
    pub violated: Vec<(NodeId, Phase)>,
}

/// Empirical probability, over `k_out` fresh scenarios, that the fixed
/// (ξ, dg) operating point covers every demand pair.
pub fn validate_lol(
    solution: &ReconfigSolution,
    model: &FeederModel,
    spec: &ForecastErrorSpec,
    corr: &CorrelationModel,
    k_out: usize,
    seed: u64,
) -> Result<LolReport, ReconfigError> {
    let (_, inc) = build_incidence(model);
    let inj = nominal_injection_map(model);
    let mut sampler = ScenarioSampler::new(model, spec, corr, seed)?;
    let pairs = sampler.pairs().to_vec();
    let drawn: Vec<(f64, f64)> = pairs
        .iter()
        .map(|&(n, ph)| {
            let i = inc.apply(n, ph, &solution.xi);
            let e = inj.phase(ph);
            let sp = solution
                .dg_setpoints
                .iter()
                .find(|d| d.node == n && d.phase == ph);
            let (pg, qg) = sp.map(|d| (d.p_w, d.q_var)).unwrap_or((0.0, 0.0));
            (
                e.phi[0] * i[0] + e.phi[1] * i[1] - pg,
                e.phi_bar[0] * i[0] + e.phi_bar[1] * i[1] - qg,
            )
        })
        .collect();
    let d = pairs.len();
    let (mut p, mut q) = (vec![0.0; d], vec![0.0; d]);
    let mut ok_pair = vec![0usize; d];
    let mut ok_joint = 0usize;
    for _ in 0..k_out {
        sampler.next_into(&mut p, &mut q);
        let mut all = true;
        for i in 0..d {
            let (dp, dq) = drawn[i];
            let tol = 1e-6 * (1.0 + dp.abs().max(dq.abs()));
            let ok = dp <= p[i] + tol && dq <= q[i] + tol;
            if ok {
                ok_pair[i] += 1;
            }
            all &= ok;
        }
        if all {
            ok_joint += 1;
        }
    }
    let k = k_out.max(1) as f64;
    let marginal: Vec<_> = pairs
        .iter()
        .zip(&ok_pair)
        .map(|(p, c)| (*p, *c as f64 / k))
        .collect();
    let violated = marginal
        .iter()
        .filter(|(_, r)| *r < 1.0)
        .map(|(p, _)| *p)
        .collect();
    Ok(LolReport {
        joint_rate: ok_joint as f64 / k,
        marginal,
        violated,
    })
}
