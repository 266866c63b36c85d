//! Consensus ADMM over a partition of the feeder into local areas. Each tie
//! line has one copy per adjacent area plus a copy held by the manager (MGM);
//! nodes claimed by no area form one extra area solved by the manager.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{FeederModel, NodeId};
use crate::reconfig::{
    finish_solution, Assembler, CostSpec, ReconfigError, ReconfigProblem, ReconfigSolution, Scope,
};
use crate::scenario::NetInjectionBounds;
use crate::socp::{
    msto_blocks, msto_quadratic, MstoBlock, SocpError, SolveStatus, SolverSettings, SplittingSolver,
};

/// Name of the pseudo-area made of the nodes no area claims.
pub const MGM_AREA: &str = "mgm";

#[derive(Debug, Error)]
pub enum AdmmError {
    #[error("node {0} appears in more than one area")]
    Overlap(NodeId),
    #[error("area {area}: unknown node {node}")]
    UnknownNode { area: String, node: NodeId },
    #[error("area {0} is empty")]
    EmptyArea(String),
    #[error("area name {0} is reserved or repeated")]
    BadName(String),
    #[error("tie line {line} ({label}) is not switchable")]
    FixedTie { line: usize, label: String },
    #[error("tie line {line} has a magnitude cost term and a non-scalar resistance block")]
    TieLineTerm { line: usize },
    #[error("area {area}: local subproblem is infeasible")]
    LocalInfeasible { area: String },
    #[error("invalid settings: {0}")]
    Settings(String),
    #[error("partition document: {0}")]
    Parse(String),
    #[error(transparent)]
    Reconfig(#[from] ReconfigError),
    #[error(transparent)]
    Socp(#[from] SocpError),
}

/// Partition file contents: area name → node ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionDoc {
    pub areas: BTreeMap<String, Vec<u32>>,
    /// Accept tie lines without a switch; they then carry no group term.
    #[serde(default)]
    pub allow_fixed_ties: bool,
}

impl PartitionDoc {
    pub fn parse(src: &str) -> Result<Self, AdmmError> {
        toml::from_str(src).map_err(|e| AdmmError::Parse(e.to_string()))
    }

    pub fn to_partition(&self, model: &FeederModel) -> Result<AreaPartition, AdmmError> {
        let areas: Vec<(String, Vec<NodeId>)> = self
            .areas
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|&n| NodeId(n)).collect()))
            .collect();
        partition(model, &areas, self.allow_fixed_ties)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Area {
    pub name: String,
    pub nodes: BTreeSet<NodeId>,
    /// Lines with both ends in the area.
    pub internal: Vec<usize>,
    /// Tie lines incident to the area.
    pub ties: Vec<usize>,
    /// Switchable internal lines.
    pub switchable: Vec<usize>,
    pub is_mgm: bool,
}

impl Area {
    /// Internal plus incident tie lines, in line order.
    pub fn edges(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self.internal.iter().chain(&self.ties).copied().collect();
        e.sort_unstable();
        e
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TieLine {
    pub line: usize,
    /// Adjacent areas, lower index first.
    pub areas: (usize, usize),
    /// Index into `AreaPartition::pairs`.
    pub pair: usize,
}

/// All tie lines between one pair of neighboring areas.
#[derive(Debug, Clone, PartialEq)]
pub struct TiePair {
    pub areas: (usize, usize),
    /// Indices into `AreaPartition::ties`.
    pub ties: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaPartition {
    /// Local areas first, then the manager's own area when it owns any node.
    pub areas: Vec<Area>,
    pub mgm_nodes: BTreeSet<NodeId>,
    pub ties: Vec<TieLine>,
    pub pairs: Vec<TiePair>,
    pub allow_fixed_ties: bool,
}

impl AreaPartition {
    pub fn lac_count(&self) -> usize {
        self.areas.iter().filter(|a| !a.is_mgm).count()
    }

    /// Neighboring areas of `area`.
    pub fn neighbors(&self, area: usize) -> Vec<usize> {
        self.pairs
            .iter()
            .filter_map(|p| match p.areas {
                (a, b) if a == area => Some(b),
                (a, b) if b == area => Some(a),
                _ => None,
            })
            .collect()
    }

    pub fn tie_lines(&self) -> Vec<usize> {
        self.ties.iter().map(|t| t.line).collect()
    }

    pub fn pair_label(&self, pair: usize) -> String {
        let (a, b) = self.pairs[pair].areas;
        format!("{}-{}", self.areas[a].name, self.areas[b].name)
    }
}

/// Splits the feeder into the given areas plus the manager's remainder.
pub fn partition(
    model: &FeederModel,
    areas: &[(String, Vec<NodeId>)],
    allow_fixed_ties: bool,
) -> Result<AreaPartition, AdmmError> {
    let mut owner: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut names = BTreeSet::new();
    for (k, (name, nodes)) in areas.iter().enumerate() {
        if name == MGM_AREA || !names.insert(name.clone()) {
            return Err(AdmmError::BadName(name.clone()));
        }
        if nodes.is_empty() {
            return Err(AdmmError::EmptyArea(name.clone()));
        }
        for &n in nodes {
            if model.node(n).is_none() {
                return Err(AdmmError::UnknownNode {
                    area: name.clone(),
                    node: n,
                });
            }
            if owner.insert(n, k).is_some() {
                return Err(AdmmError::Overlap(n));
            }
        }
    }
    let mgm_nodes: BTreeSet<NodeId> = model
        .nodes()
        .iter()
        .map(|n| n.id)
        .filter(|n| !owner.contains_key(n))
        .collect();
    let mut out: Vec<Area> = areas
        .iter()
        .map(|(name, nodes)| Area {
            name: name.clone(),
            nodes: nodes.iter().copied().collect(),
            internal: vec![],
            ties: vec![],
            switchable: vec![],
            is_mgm: false,
        })
        .collect();
    if !mgm_nodes.is_empty() {
        let k = out.len();
        for &n in &mgm_nodes {
            owner.insert(n, k);
        }
        out.push(Area {
            name: MGM_AREA.into(),
            nodes: mgm_nodes.clone(),
            internal: vec![],
            ties: vec![],
            switchable: vec![],
            is_mgm: true,
        });
    }

    let mut ties = Vec::new();
    let mut pair_of: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut pairs: Vec<TiePair> = Vec::new();
    for (l, line) in model.lines().iter().enumerate() {
        let (a, b) = (owner[&line.from], owner[&line.to]);
        if a == b {
            out[a].internal.push(l);
            if line.switchable {
                out[a].switchable.push(l);
            }
            continue;
        }
        if !line.switchable && !allow_fixed_ties {
            return Err(AdmmError::FixedTie {
                line: l,
                label: line.label(),
            });
        }
        let key = (a.min(b), a.max(b));
        let p = *pair_of.entry(key).or_insert_with(|| {
            pairs.push(TiePair {
                areas: key,
                ties: vec![],
            });
            pairs.len() - 1
        });
        pairs[p].ties.push(ties.len());
        ties.push(TieLine {
            line: l,
            areas: key,
            pair: p,
        });
        out[a].ties.push(l);
        out[b].ties.push(l);
    }
    Ok(AreaPartition {
        areas: out,
        mgm_nodes,
        ties,
        pairs,
        allow_fixed_ties,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmSettings {
    pub kappa: f64,
    pub max_iters: usize,
    /// Stop when every copy of every tie current agrees within `tol` (A) and
    /// the consensus point moves by at most `tol / κ`.
    pub tol: f64,
    pub local: SolverSettings,
    /// Solve the area subproblems of one iteration on separate threads.
    pub parallel: bool,
    /// Simulated delivery delay per message.
    pub latency: Duration,
    /// Iteration cap of the accelerated solver for tie lines whose loss
    /// block is not a multiple of the identity.
    pub line_iters: usize,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        AdmmSettings {
            kappa: 1.0,
            max_iters: 3000,
            tol: 1e-6,
            local: SolverSettings {
                tol_primal: 1e-9,
                tol_dual: 1e-9,
                tol_feas: 1e-10,
                record_trace: false,
                ..SolverSettings::default()
            },
            parallel: false,
            latency: Duration::ZERO,
            line_iters: 20_000,
        }
    }
}

impl AdmmSettings {
    pub fn validate(&self) -> Result<(), AdmmError> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(AdmmError::Settings("kappa must be positive".into()));
        }
        if self.max_iters == 0 || !(self.tol > 0.0) || self.line_iters == 0 {
            return Err(AdmmError::Settings(
                "iteration limits and tolerance must be positive".into(),
            ));
        }
        self.local.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Party {
    Mgm,
    Lac(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub iter: usize,
    pub sender: Party,
    pub receiver: Party,
    /// Tie-current vectors carried.
    pub vectors: usize,
    pub bytes: usize,
}

/// In-process lockstep transport that records every message.
#[derive(Debug, Clone, Default)]
pub struct SimChannel {
    pub latency: Duration,
    pub log: Vec<Message>,
}

impl SimChannel {
    pub fn new(latency: Duration) -> Self {
        SimChannel {
            latency,
            log: Vec::new(),
        }
    }

    pub fn send(&mut self, iter: usize, sender: Party, receiver: Party, payload: &[&[f64]]) {
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let bytes = payload.iter().map(|v| std::mem::size_of_val(*v)).sum();
        self.log.push(Message {
            iter,
            sender,
            receiver,
            vectors: payload.len(),
            bytes,
        });
    }

    pub fn write_csv<W: Write>(&self, partition: &AreaPartition, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iter", "sender", "receiver", "bytes"])?;
        let name = |p: Party| match p {
            Party::Mgm => MGM_AREA.to_string(),
            Party::Lac(a) => partition.areas[a].name.clone(),
        };
        for m in &self.log {
            wr.write_record([
                m.iter.to_string(),
                name(m.sender),
                name(m.receiver),
                m.bytes.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub tie_id: String,
    pub gap: f64,
    pub objective: f64,
    pub dist_to_central: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
}

impl ConvergenceTrace {
    /// Largest gap per iteration, in iteration order.
    pub fn max_gaps(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some((i, g)) if *i == r.iter => *g = g.max(r.gap),
                _ => out.push((r.iter, r.gap)),
            }
        }
        out
    }

    /// First iteration from which the largest gap stays at or below `tol`.
    pub fn iterations_to(&self, tol: f64) -> Option<usize> {
        let gaps = self.max_gaps();
        let mut first = None;
        for (i, g) in gaps {
            if g <= tol {
                first.get_or_insert(i);
            } else {
                first = None;
            }
        }
        first
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iter", "tie_id", "gap", "objective", "dist_to_central"])?;
        for r in &self.rows {
            wr.write_record([
                r.iter.to_string(),
                r.tie_id.clone(),
                r.gap.to_string(),
                r.objective.to_string(),
                r.dist_to_central.map(|d| d.to_string()).unwrap_or_default(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Iterates of the simplified scheme. Tie quantities are indexed like
/// `AreaPartition::ties`; `gamma[t]` holds the duals of the lower and higher
/// area's copies.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub iter: usize,
    pub x: Vec<DVector<f64>>,
    pub chi: Vec<Vec<f64>>,
    pub gamma: Vec<[Vec<f64>; 2]>,
    pub mu: Vec<Vec<f64>>,
    /// Rounding error carried by (γ⁽ˡ⁾, γ⁽ʲ⁾, μ), so that the duals behave as
    /// exact sums of their increments.
    pub dual_lo: Vec<[Vec<f64>; 3]>,
}

impl AdmmState {
    /// Largest |γ⁽ˡ⁾ + γ⁽ʲ⁾ − μ| over all tie coordinates.
    pub fn dual_sum_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (t, (g, m)) in self.gamma.iter().zip(&self.mu).enumerate() {
            let lo = self.dual_lo.get(t);
            for k in 0..m.len() {
                let tail = lo.map_or(0.0, |l| l[0][k] + l[1][k] - l[2][k]);
                worst = worst.max(((g[0][k] - m[k]) + g[1][k] + tail).abs());
            }
        }
        worst
    }
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Adds `d + d_lo` to the compensated pair `(hi, lo)`.
fn accumulate(hi: &mut f64, lo: &mut f64, d: f64, d_lo: f64) {
    let (s, e) = two_sum(*hi, d);
    let (h, l) = two_sum(s, *lo + e + d_lo);
    *hi = h;
    *lo = l;
}

/// `γ += (κ/3)(2a − b − c)` for the copy `a` against the other copy `b` and
/// the manager's copy `c`.
pub fn gamma_update(kappa: f64, gamma: &mut [f64], a: &[f64], b: &[f64], c: &[f64]) {
    for k in 0..gamma.len() {
        gamma[k] += kappa / 3.0 * (2.0 * a[k] - b[k] - c[k]);
    }
}

/// `μ += (κ/3)(a + b − 2c)`.
pub fn mu_update(kappa: f64, mu: &mut [f64], a: &[f64], b: &[f64], c: &[f64]) {
    for k in 0..mu.len() {
        mu[k] += kappa / 3.0 * (a[k] + b[k] - 2.0 * c[k]);
    }
}

/// The manager's subproblem for one tie line:
/// `argmin ½χᵀHχ − vᵀχ + λ‖χ‖ + Σ α‖χ_φ‖` over per-phase disks.
#[derive(Debug, Clone)]
enum LineProx {
    Scalar { a: f64, blocks: Vec<MstoBlock> },
    Dense { h: DMatrix<f64>, radii: Vec<f64> },
}

#[derive(Debug, Clone)]
struct LineOp {
    /// Quadratic part without the κ ridge.
    base: DMatrix<f64>,
    radii: Vec<f64>,
    alpha: f64,
    lambda: f64,
}

impl LineOp {
    fn prox(&self, ridge: f64) -> Result<LineProx, usize> {
        let n = self.base.nrows();
        let d = self.base[(0, 0)];
        let scalar = (0..n).all(|i| {
            (0..n).all(|j| {
                if i == j {
                    self.base[(i, j)] == d
                } else {
                    self.base[(i, j)] == 0.0
                }
            })
        });
        if scalar {
            let blocks = self
                .radii
                .iter()
                .enumerate()
                .map(|(k, &r)| MstoBlock {
                    coords: vec![2 * k, 2 * k + 1],
                    radius: r,
                    alpha: self.alpha,
                })
                .collect();
            Ok(LineProx::Scalar {
                a: d + ridge,
                blocks,
            })
        } else if self.alpha > 0.0 {
            Err(0)
        } else {
            let h = &self.base + DMatrix::identity(n, n) * ridge;
            Ok(LineProx::Dense {
                h,
                radii: self.radii.clone(),
            })
        }
    }
}

fn apply_prox(p: &LineProx, v: &[f64], lambda: f64, iters: usize) -> Vec<f64> {
    match p {
        LineProx::Scalar { a, blocks } => msto_blocks(*a, v, lambda, blocks, 200),
        LineProx::Dense { h, radii } => msto_quadratic(h, v, lambda, radii, 1e-13, iters),
    }
}

struct LocalArea {
    problem: ReconfigProblem,
    solver: SplittingSolver,
    c0: DVector<f64>,
    /// (tie index, side, coordinates of this copy in the area's variables)
    copies: Vec<(usize, usize, Vec<usize>)>,
    zero_groups: Vec<bool>,
}

impl LocalArea {
    /// Solves with `extra[k]` added to the linear cost of copy `k`.
    fn solve(&mut self, extra: &[Vec<f64>], cold: bool) -> (DVector<f64>, Vec<bool>, SolveStatus) {
        let mut c = self.c0.clone();
        for ((_, _, coords), e) in self.copies.iter().zip(extra) {
            for (&i, v) in coords.iter().zip(e) {
                c[i] += v;
            }
        }
        self.solver.set_linear(&c);
        if cold {
            self.solver.reset();
        }
        let r = self.solver.solve();
        (r.x, r.zero_groups, r.status)
    }
}

/// Result of a distributed run.
#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    pub solution: ReconfigSolution,
    pub trace: ConvergenceTrace,
    pub messages: SimChannel,
    pub converged: bool,
    pub iterations: usize,
    /// Largest dual-sum residual seen over all iterations.
    pub dual_sum_max: f64,
    pub state: AdmmState,
}

/// Runner holding the per-area solvers and the manager's line operators.
pub struct Admm<'a> {
    model: &'a FeederModel,
    bounds: NetInjectionBounds,
    cost: CostSpec,
    lambda: f64,
    partition: AreaPartition,
    settings: AdmmSettings,
    areas: Vec<LocalArea>,
    lines: Vec<LineOp>,
    /// Coordinates of each tie line's copy in each adjacent area.
    tie_coords: Vec<[Vec<usize>; 2]>,
}

impl<'a> Admm<'a> {
    pub fn new(
        model: &'a FeederModel,
        bounds: &NetInjectionBounds,
        cost: &CostSpec,
        lambda: f64,
        partition: &AreaPartition,
        settings: &AdmmSettings,
    ) -> Result<Self, AdmmError> {
        Self::with_ridge(
            model,
            bounds,
            cost,
            lambda,
            partition,
            settings,
            settings.kappa,
            0.0,
        )
    }

    /// `ridge` is the proximal weight on tie copies (κ for ADMM, a numerical
    /// floor for dual ascent); each area copy of a tie carries `share` of the
    /// line's loss and the manager's copy the rest.
    #[allow(clippy::too_many_arguments)]
    fn with_ridge(
        model: &'a FeederModel,
        bounds: &NetInjectionBounds,
        cost: &CostSpec,
        lambda: f64,
        partition: &AreaPartition,
        settings: &AdmmSettings,
        ridge: f64,
        share: f64,
    ) -> Result<Self, AdmmError> {
        settings.validate()?;
        let asm = Assembler::new(model, bounds, cost)?;
        let (lw, _) = cost.weights();
        let tie_set: BTreeSet<usize> = partition.tie_lines().into_iter().collect();

        let mut lines = Vec::new();
        for t in &partition.ties {
            let line = &model.lines()[t.line];
            let r = asm.loss.line_resistance(t.line);
            let np = line.phases.len();
            let mut base = DMatrix::zeros(2 * np, 2 * np);
            for i in 0..np {
                for j in 0..np {
                    base[(2 * i, 2 * j)] = 2.0 * lw * r[(i, j)];
                    base[(2 * i + 1, 2 * j + 1)] = 2.0 * lw * r[(i, j)];
                }
            }
            let op = LineOp {
                base: base * (1.0 - 2.0 * share),
                radii: vec![line.i_max; np],
                alpha: cost.line_terms.get(&t.line).copied().unwrap_or(0.0),
                lambda: if line.switchable {
                    lambda * line.weight
                } else {
                    0.0
                },
            };
            op.prox(ridge)
                .map_err(|_| AdmmError::TieLineTerm { line: t.line })?;
            lines.push(op);
        }

        let mut areas = Vec::new();
        let mut tie_coords: Vec<[Vec<usize>; 2]> = vec![[vec![], vec![]]; partition.ties.len()];
        for (k, area) in partition.areas.iter().enumerate() {
            let scope = Scope {
                lines: area.edges(),
                nodes: area.nodes.clone(),
                grouped: area.switchable.iter().copied().collect(),
                costed: area
                    .internal
                    .iter()
                    .copied()
                    .filter(|l| !tie_set.contains(l))
                    .collect(),
            };
            let problem = asm.assemble(&scope, lambda).map_err(|e| match e {
                ReconfigError::Infeasible(_) => AdmmError::LocalInfeasible {
                    area: area.name.clone(),
                },
                e => e.into(),
            })?;
            let mut prog = problem.program.clone();
            let mut copies = Vec::new();
            for (t, tie) in partition.ties.iter().enumerate() {
                let side = if tie.areas.0 == k {
                    0
                } else if tie.areas.1 == k {
                    1
                } else {
                    continue;
                };
                let off = problem.line_offset[&tie.line];
                let len = 2 * model.lines()[tie.line].phases.len();
                let coords: Vec<usize> = (off..off + len).collect();
                let r = asm.loss.line_resistance(tie.line);
                let np = len / 2;
                for i in 0..np {
                    for j in 0..np {
                        let v = 2.0 * lw * share * r[(i, j)];
                        prog.q[(off + 2 * i, off + 2 * j)] += v;
                        prog.q[(off + 2 * i + 1, off + 2 * j + 1)] += v;
                    }
                }
                for &i in &coords {
                    prog.q[(i, i)] += ridge;
                }
                tie_coords[t][side] = coords.clone();
                copies.push((t, side, coords));
            }
            let c0 = prog.c.clone();
            let ng = prog.groups.len();
            let solver = SplittingSolver::new(prog, settings.local.clone())?;
            areas.push(LocalArea {
                problem,
                solver,
                c0,
                copies,
                zero_groups: vec![false; ng],
            });
        }
        Ok(Admm {
            model,
            bounds: bounds.clone(),
            cost: cost.clone(),
            lambda,
            partition: partition.clone(),
            settings: settings.clone(),
            areas,
            lines,
            tie_coords,
        })
    }

    pub fn partition(&self) -> &AreaPartition {
        &self.partition
    }

    pub fn initial_state(&self) -> AdmmState {
        let n = |t: usize| 2 * self.model.lines()[self.partition.ties[t].line].phases.len();
        let nt = self.partition.ties.len();
        AdmmState {
            iter: 0,
            x: self
                .areas
                .iter()
                .map(|a| DVector::zeros(a.problem.program.n))
                .collect(),
            chi: (0..nt).map(|t| vec![0.0; n(t)]).collect(),
            gamma: (0..nt)
                .map(|t| [vec![0.0; n(t)], vec![0.0; n(t)]])
                .collect(),
            mu: (0..nt).map(|t| vec![0.0; n(t)]).collect(),
            dual_lo: (0..nt)
                .map(|t| [vec![0.0; n(t)], vec![0.0; n(t)], vec![0.0; n(t)]])
                .collect(),
        }
    }

    /// Copy of tie `t` held by its `side` area in the iterate `x`.
    pub fn copy(&self, x: &[DVector<f64>], t: usize, side: usize) -> Vec<f64> {
        let a = if side == 0 {
            self.partition.ties[t].areas.0
        } else {
            self.partition.ties[t].areas.1
        };
        self.tie_coords[t][side].iter().map(|&i| x[a][i]).collect()
    }

    /// Solves every area with the given linear terms on its tie copies;
    /// `extra(t, side)` returns the term for one copy.
    fn local_round(
        &mut self,
        extra: &dyn Fn(usize, usize) -> Vec<f64>,
        cold: bool,
    ) -> Result<Vec<(DVector<f64>, Vec<bool>, SolveStatus)>, AdmmError> {
        let inputs: Vec<Vec<Vec<f64>>> = self
            .areas
            .iter()
            .map(|a| a.copies.iter().map(|(t, s, _)| extra(*t, *s)).collect())
            .collect();
        let results: Vec<_> = if self.settings.parallel && self.areas.len() > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .areas
                    .iter_mut()
                    .zip(&inputs)
                    .map(|(area, e)| s.spawn(move || area.solve(e, cold)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("area solver panicked"))
                    .collect()
            })
        } else {
            self.areas
                .iter_mut()
                .zip(&inputs)
                .map(|(area, e)| area.solve(e, cold))
                .collect()
        };
        for (k, r) in results.iter().enumerate() {
            if r.2 == SolveStatus::Infeasible {
                return Err(AdmmError::LocalInfeasible {
                    area: self.partition.areas[k].name.clone(),
                });
            }
        }
        Ok(results)
    }

    /// Assembled (pre-coupling) program of area `area`.
    pub fn area_problem(&self, area: usize) -> &ReconfigProblem {
        &self.areas[area].problem
    }

    /// The program area `area` solves at the next local step from `state`.
    pub fn local_program(&self, area: usize, state: &AdmmState) -> crate::socp::GroupSparseProgram {
        let k3 = self.settings.kappa / 3.0;
        let sums = self.copy_sums(state);
        let la = &self.areas[area];
        let mut p = la.solver.program().clone();
        p.c = la.c0.clone();
        for (t, s, coords) in &la.copies {
            for (k, &i) in coords.iter().enumerate() {
                p.c[i] += state.gamma[*t][*s][k] - k3 * sums[*t][k];
            }
        }
        p
    }

    /// Area step: returns the new local iterate of every area.
    pub fn local_update(&mut self, state: &AdmmState) -> Result<Vec<DVector<f64>>, AdmmError> {
        let k3 = self.settings.kappa / 3.0;
        let sums = self.copy_sums(state);
        let res = self.local_round(
            &|t, s| {
                state.gamma[t][s]
                    .iter()
                    .zip(&sums[t])
                    .map(|(g, v)| g - k3 * v)
                    .collect()
            },
            false,
        )?;
        Ok(self.store_groups(res))
    }

    fn store_groups(
        &mut self,
        res: Vec<(DVector<f64>, Vec<bool>, SolveStatus)>,
    ) -> Vec<DVector<f64>> {
        res.into_iter()
            .zip(&mut self.areas)
            .map(|((x, z, _), a)| {
                a.zero_groups = z;
                x
            })
            .collect()
    }

    /// ξ⁽ˡ⁾ + ξ⁽ʲ⁾ + χ per tie at the current state.
    fn copy_sums(&self, state: &AdmmState) -> Vec<Vec<f64>> {
        (0..self.partition.ties.len())
            .map(|t| {
                let a = self.copy(&state.x, t, 0);
                let b = self.copy(&state.x, t, 1);
                (0..a.len())
                    .map(|k| a[k] + b[k] + state.chi[t][k])
                    .collect()
            })
            .collect()
    }

    /// Manager step for tie `t`.
    pub fn line_update(&self, t: usize, state: &AdmmState) -> Vec<f64> {
        let k3 = self.settings.kappa / 3.0;
        let a = self.copy(&state.x, t, 0);
        let b = self.copy(&state.x, t, 1);
        let v: Vec<f64> = (0..a.len())
            .map(|k| state.mu[t][k] + k3 * (a[k] + b[k] + state.chi[t][k]))
            .collect();
        self.line_prox(t, &v, self.settings.kappa)
    }

    fn line_prox(&self, t: usize, v: &[f64], ridge: f64) -> Vec<f64> {
        let op = &self.lines[t];
        let p = op.prox(ridge).expect("checked at construction");
        apply_prox(&p, v, op.lambda, self.settings.line_iters)
    }

    /// One full iteration: local and line steps from the same snapshot, then
    /// the messages of the exchange, then the dual step.
    pub fn step(
        &mut self,
        state: &mut AdmmState,
        channel: &mut SimChannel,
    ) -> Result<(), AdmmError> {
        let x_new = self.local_update(state)?;
        let chi_new: Vec<Vec<f64>> = (0..self.partition.ties.len())
            .map(|t| self.line_update(t, state))
            .collect();
        state.iter += 1;
        self.exchange(state.iter, &x_new, &chi_new, channel);
        let kappa = self.settings.kappa;
        for t in 0..self.partition.ties.len() {
            let a = self.copy(&x_new, t, 0);
            let b = self.copy(&x_new, t, 1);
            let c = &chi_new[t];
            let k3 = kappa / 3.0;
            let lo = &mut state.dual_lo[t];
            for k in 0..a.len() {
                // μ's increment is the exact sum of the two γ increments.
                let da = k3 * (2.0 * a[k] - b[k] - c[k]);
                let db = k3 * (2.0 * b[k] - a[k] - c[k]);
                let (dm, dm_lo) = two_sum(da, db);
                accumulate(&mut state.gamma[t][0][k], &mut lo[0][k], da, 0.0);
                accumulate(&mut state.gamma[t][1][k], &mut lo[1][k], db, 0.0);
                accumulate(&mut state.mu[t][k], &mut lo[2][k], dm, dm_lo);
            }
        }
        state.x = x_new;
        state.chi = chi_new;
        Ok(())
    }

    fn exchange(
        &self,
        iter: usize,
        x: &[DVector<f64>],
        chi: &[Vec<f64>],
        channel: &mut SimChannel,
    ) {
        let p = &self.partition;
        let party = |a: usize| {
            if p.areas[a].is_mgm {
                Party::Mgm
            } else {
                Party::Lac(a)
            }
        };
        let stacked = |pair: usize, side: Option<usize>| -> Vec<f64> {
            p.pairs[pair]
                .ties
                .iter()
                .flat_map(|&t| match side {
                    Some(s) => self.copy(x, t, s),
                    None => chi[t].clone(),
                })
                .collect()
        };
        let mut down = Vec::new();
        for (a, area) in p.areas.iter().enumerate() {
            if area.is_mgm {
                continue;
            }
            for (k, pair) in p.pairs.iter().enumerate() {
                let side = if pair.areas.0 == a {
                    0
                } else if pair.areas.1 == a {
                    1
                } else {
                    continue;
                };
                let own = stacked(k, Some(side));
                channel.send(iter, party(a), Party::Mgm, &[&own]);
                down.push((a, k, side));
            }
        }
        for (a, k, side) in down {
            let c = stacked(k, None);
            let other = stacked(k, Some(1 - side));
            channel.send(iter, Party::Mgm, party(a), &[&c, &other]);
        }
    }

    /// Whole-feeder currents and setpoints: area lines from their owners,
    /// tie lines from the manager's copies.
    pub fn merge(
        &self,
        x: &[DVector<f64>],
        chi: &[Vec<f64>],
    ) -> (Vec<f64>, Vec<crate::reconfig::DgSetpoint>) {
        let asm_idx = crate::grid::CurrentIndexing::new(self.model);
        let mut xi = vec![0.0; asm_idx.dim()];
        let mut dg = Vec::new();
        for (k, (area, la)) in self.partition.areas.iter().zip(&self.areas).enumerate() {
            for &l in &area.internal {
                let off = la.problem.line_offset[&l];
                let r = asm_idx.line_coords(l);
                xi[r.clone()].copy_from_slice(&x[k].as_slice()[off..off + r.len()]);
            }
            dg.extend(la.problem.setpoints(&x[k], self.model.nominal_voltage()));
        }
        for (t, tie) in self.partition.ties.iter().enumerate() {
            let r = asm_idx.line_coords(tie.line);
            xi[r].copy_from_slice(&chi[t]);
        }
        dg.sort_by_key(|d| (d.node, d.phase));
        (xi, dg)
    }

    fn grouped(&self) -> Vec<(usize, f64)> {
        self.model
            .switchable_lines()
            .into_iter()
            .map(|l| (l, self.lambda * self.model.lines()[l].weight))
            .collect()
    }

    fn objective(&self, xi: &[f64], dg: &[crate::reconfig::DgSetpoint]) -> f64 {
        let c = crate::reconfig::evaluate_cost(self.model, &self.cost, xi, dg);
        let idx = crate::grid::CurrentIndexing::new(self.model);
        c + self
            .grouped()
            .iter()
            .map(|&(l, w)| {
                w * idx
                    .line_coords(l)
                    .map(|i| xi[i] * xi[i])
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
    }

    fn record(
        &self,
        trace: &mut ConvergenceTrace,
        iter: usize,
        x: &[DVector<f64>],
        chi: &[Vec<f64>],
        central: Option<&[f64]>,
    ) {
        let (xi, dg) = self.merge(x, chi);
        let objective = self.objective(&xi, &dg);
        let dist = central.map(|c| relative_distance(&xi, c));
        if self.partition.pairs.is_empty() {
            trace.rows.push(TraceRow {
                iter,
                tie_id: "none".into(),
                gap: 0.0,
                objective,
                dist_to_central: dist,
            });
        }
        for (k, pair) in self.partition.pairs.iter().enumerate() {
            let mut g2 = 0.0;
            for &t in &pair.ties {
                let a = self.copy(x, t, 0);
                let b = self.copy(x, t, 1);
                g2 += a
                    .iter()
                    .zip(&b)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>();
            }
            trace.rows.push(TraceRow {
                iter,
                tie_id: self.partition.pair_label(k),
                gap: g2.sqrt(),
                objective,
                dist_to_central: dist,
            });
        }
    }

    /// Largest disagreement among the three copies of any tie, per pair norm.
    fn consensus_residual(&self, x: &[DVector<f64>], chi: &[Vec<f64>]) -> f64 {
        let mut worst: f64 = 0.0;
        for pair in &self.partition.pairs {
            let (mut ab, mut ac, mut bc) = (0.0, 0.0, 0.0);
            for &t in &pair.ties {
                let a = self.copy(x, t, 0);
                let b = self.copy(x, t, 1);
                for k in 0..a.len() {
                    ab += (a[k] - b[k]).powi(2);
                    ac += (a[k] - chi[t][k]).powi(2);
                    bc += (b[k] - chi[t][k]).powi(2);
                }
            }
            worst = worst
                .max(f64::sqrt(ab))
                .max(f64::sqrt(ac))
                .max(f64::sqrt(bc));
        }
        worst
    }

    /// Movement of the consensus average between two iterates, per pair norm.
    fn average_shift(
        &self,
        x0: &[DVector<f64>],
        c0: &[Vec<f64>],
        x1: &[DVector<f64>],
        c1: &[Vec<f64>],
    ) -> f64 {
        let mut worst: f64 = 0.0;
        for pair in &self.partition.pairs {
            let mut d = 0.0;
            for &t in &pair.ties {
                let (a0, b0, a1, b1) = (
                    self.copy(x0, t, 0),
                    self.copy(x0, t, 1),
                    self.copy(x1, t, 0),
                    self.copy(x1, t, 1),
                );
                for k in 0..a0.len() {
                    let z0 = (a0[k] + b0[k] + c0[t][k]) / 3.0;
                    let z1 = (a1[k] + b1[k] + c1[t][k]) / 3.0;
                    d += (z1 - z0).powi(2);
                }
            }
            worst = worst.max(d.sqrt());
        }
        worst
    }

    fn finish(
        &self,
        x: &[DVector<f64>],
        chi: &[Vec<f64>],
        iterations: usize,
        converged: bool,
    ) -> ReconfigSolution {
        let (xi, dg) = self.merge(x, chi);
        let mut used = vec![true; self.model.lines().len()];
        for la in &self.areas {
            for (g, &l) in la.problem.group_lines.iter().enumerate() {
                if la.zero_groups[g] {
                    used[l] = false;
                }
            }
        }
        for (t, tie) in self.partition.ties.iter().enumerate() {
            if self.model.lines()[tie.line].switchable && chi[t].iter().all(|v| *v == 0.0) {
                used[tie.line] = false;
            }
        }
        let status = if converged {
            SolveStatus::Optimal
        } else {
            SolveStatus::MaxIters
        };
        finish_solution(
            self.model,
            &self.bounds,
            &self.cost,
            self.lambda,
            &self.grouped(),
            xi,
            dg,
            used,
            iterations,
            status,
        )
    }

    /// Iterates the simplified scheme from zero until consensus or the
    /// iteration cap. `central` (whole-feeder currents) fills the distance
    /// column of the trace.
    pub fn run(&mut self, central: Option<&[f64]>) -> Result<AdmmOutcome, AdmmError> {
        let mut state = self.initial_state();
        let mut channel = SimChannel::new(self.settings.latency);
        let mut trace = ConvergenceTrace::default();
        let mut dual_sum_max: f64 = 0.0;
        let mut converged = false;
        while state.iter < self.settings.max_iters {
            let (x_old, c_old) = (state.x.clone(), state.chi.clone());
            self.step(&mut state, &mut channel)?;
            dual_sum_max = dual_sum_max.max(state.dual_sum_residual());
            self.record(&mut trace, state.iter, &state.x, &state.chi, central);
            let r = self.consensus_residual(&state.x, &state.chi);
            let s = self.settings.kappa * self.average_shift(&x_old, &c_old, &state.x, &state.chi);
            if r <= self.settings.tol && s <= self.settings.tol {
                converged = true;
                break;
            }
        }
        let solution = self.finish(&state.x, &state.chi, state.iter, converged);
        Ok(AdmmOutcome {
            solution,
            trace,
            messages: channel,
            converged,
            iterations: state.iter,
            dual_sum_max,
            state,
        })
    }

    /// The same iteration written with the auxiliary consensus variable and
    /// three independent multipliers, as obtained directly from the augmented
    /// Lagrangian. Used to cross-check the simplified updates.
    pub fn run_unsimplified(
        &mut self,
        iters: usize,
    ) -> Result<(ConvergenceTrace, AdmmState), AdmmError> {
        let kappa = self.settings.kappa;
        let mut state = self.initial_state();
        let mut z: Vec<Vec<f64>> = state.mu.clone();
        let mut trace = ConvergenceTrace::default();
        for _ in 0..iters {
            let res = {
                let (st, zz) = (&state, &z);
                self.local_round(
                    &|t, s| {
                        st.gamma[t][s]
                            .iter()
                            .zip(&zz[t])
                            .map(|(g, zv)| g - kappa * zv)
                            .collect()
                    },
                    false,
                )?
            };
            let x_new = self.store_groups(res);
            let chi_new: Vec<Vec<f64>> = (0..self.partition.ties.len())
                .map(|t| {
                    let v: Vec<f64> = state.mu[t]
                        .iter()
                        .zip(&z[t])
                        .map(|(m, zv)| m + kappa * zv)
                        .collect();
                    self.line_prox(t, &v, kappa)
                })
                .collect();
            for t in 0..self.partition.ties.len() {
                let a = self.copy(&x_new, t, 0);
                let b = self.copy(&x_new, t, 1);
                let c = &chi_new[t];
                for k in 0..a.len() {
                    let g = &state.gamma[t];
                    z[t][k] = (a[k] + b[k] + c[k]) / 3.0
                        + (g[0][k] + g[1][k] - state.mu[t][k]) / (3.0 * kappa);
                }
                for k in 0..a.len() {
                    state.gamma[t][0][k] += kappa * (a[k] - z[t][k]);
                    state.gamma[t][1][k] += kappa * (b[k] - z[t][k]);
                    state.mu[t][k] += kappa * (z[t][k] - c[k]);
                }
            }
            state.iter += 1;
            state.x = x_new;
            state.chi = chi_new;
            self.record(&mut trace, state.iter, &state.x, &state.chi, None);
        }
        Ok((trace, state))
    }
}

fn relative_distance(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt();
    let n: f64 = b.iter().map(|q| q * q).sum::<f64>().sqrt();
    d / n.max(f64::MIN_POSITIVE)
}

/// Convenience wrapper around `Admm::new` and `Admm::run`.
pub fn run(
    model: &FeederModel,
    bounds: &NetInjectionBounds,
    cost: &CostSpec,
    lambda: f64,
    partition: &AreaPartition,
    settings: &AdmmSettings,
    central: Option<&[f64]>,
) -> Result<AdmmOutcome, AdmmError> {
    Admm::new(model, bounds, cost, lambda, partition, settings)?.run(central)
}

/// Dual ascent on the same decomposition: each area and the manager minimize
/// their Lagrangian pieces for fixed prices, the prices move along the
/// consensus residual with a constant step, and the gap is measured on the
/// running averages of the primal iterates.
pub fn subgradient_baseline(
    model: &FeederModel,
    bounds: &NetInjectionBounds,
    cost: &CostSpec,
    lambda: f64,
    partition: &AreaPartition,
    settings: &AdmmSettings,
    step: f64,
    central: Option<&[f64]>,
) -> Result<ConvergenceTrace, AdmmError> {
    if !(step >= 0.0 && step.is_finite()) {
        return Err(AdmmError::Settings(
            "step must be finite and nonnegative".into(),
        ));
    }
    // Each copy of a tie line carries a third of its loss, which leaves the
    // objective unchanged at consensus and makes every piece of the
    // Lagrangian strictly convex in the tie currents. A vanishing ridge
    // covers costs without a loss term.
    let ridge = 1e-9;
    let mut admm = Admm::with_ridge(
        model,
        bounds,
        cost,
        lambda,
        partition,
        settings,
        ridge,
        1.0 / 3.0,
    )?;
    let nt = partition.ties.len();
    let mut y = admm.initial_state();
    let mut x_avg: Vec<DVector<f64>> = y.x.clone();
    let mut chi_avg: Vec<Vec<f64>> = y.chi.clone();
    let mut trace = ConvergenceTrace::default();
    for i in 1..=settings.max_iters {
        let res = {
            let g = &y.gamma;
            // Without a proximal term the area problems are not strictly
            // convex in the tie copies; cold starts keep the iterates a
            // function of the prices alone.
            admm.local_round(&|t, s| g[t][s].clone(), true)?
        };
        let x = admm.store_groups(res);
        let chi: Vec<Vec<f64>> = (0..nt)
            .map(|t| {
                let v: Vec<f64> = (0..y.gamma[t][0].len())
                    .map(|k| y.gamma[t][0][k] + y.gamma[t][1][k])
                    .collect();
                admm.line_prox(t, &v, ridge)
            })
            .collect();
        for t in 0..nt {
            let a = admm.copy(&x, t, 0);
            let b = admm.copy(&x, t, 1);
            for k in 0..a.len() {
                y.gamma[t][0][k] += step * (a[k] - chi[t][k]);
                y.gamma[t][1][k] += step * (b[k] - chi[t][k]);
            }
        }
        let w = 1.0 / i as f64;
        for (avg, cur) in x_avg.iter_mut().zip(&x) {
            *avg += (cur - &*avg) * w;
        }
        for (avg, cur) in chi_avg.iter_mut().zip(&chi) {
            for k in 0..avg.len() {
                avg[k] += (cur[k] - avg[k]) * w;
            }
        }
        admm.record(&mut trace, i, &x_avg, &chi_avg, central);
    }
    Ok(trace)
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Mgm => write!(f, "{MGM_AREA}"),
            Party::Lac(a) => write!(f, "lac{a}"),
        }
    }
}
