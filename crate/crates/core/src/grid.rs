//! Multi-phase feeder model: nodes, lines, the stacked current coordinates and
//! the Kirchhoff incidence operators built on top of them.
//!
//! Everything is in SI units (volts, amperes, ohms, watts, vars). Models are
//! validated on construction and immutable afterwards.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Complex, DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Phase::A => "a",
            Phase::B => "b",
            Phase::C => "c",
        }
    }

    /// Balanced nominal angle in radians: a → 0, b → −2π/3, c → +2π/3.
    pub fn nominal_angle(self) -> f64 {
        match self {
            Phase::A => 0.0,
            Phase::B => -2.0 * PI / 3.0,
            Phase::C => 2.0 * PI / 3.0,
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s {
            "a" | "A" => Some(Phase::A),
            "b" | "B" => Some(Phase::B),
            "c" | "C" => Some(Phase::C),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Dispatchable generator limits, applied per phase of the hosting node.
#[derive(Debug, Clone, PartialEq)]
pub struct DgSpec {
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Currency per watt.
    pub cost_coeff: f64,
    /// Unity power factor units have their reactive output pinned to zero.
    pub unity_pf: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResKind {
    Pv,
    Wind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResUnit {
    pub phase: Phase,
    pub kind: ResKind,
    pub capacity_w: f64,
    /// Forecast active output; units run at unity power factor.
    pub forecast_w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub phases: Vec<Phase>,
    /// Forecast load per phase (indexed by `Phase::index`), zero on absent phases.
    pub load: [Complex<f64>; 3],
    pub dg: Option<DgSpec>,
    pub res: Vec<ResUnit>,
    /// Optional planar coordinates, used for spatial correlation of forecast errors.
    pub coords: Option<[f64; 2]>,
}

impl NodeSpec {
    pub fn new(id: u32, phases: &[Phase]) -> Self {
        NodeSpec {
            id: NodeId(id),
            phases: phases.to_vec(),
            load: [Complex::new(0.0, 0.0); 3],
            dg: None,
            res: Vec::new(),
            coords: None,
        }
    }

    pub fn with_load(mut self, phase: Phase, p_w: f64, q_var: f64) -> Self {
        self.load[phase.index()] = Complex::new(p_w, q_var);
        self
    }

    pub fn with_dg(mut self, dg: DgSpec) -> Self {
        self.dg = Some(dg);
        self
    }

    pub fn with_res(mut self, unit: ResUnit) -> Self {
        self.res.push(unit);
        self
    }

    pub fn has_phase(&self, phase: Phase) -> bool {
        self.phases.contains(&phase)
    }

    pub fn load_on(&self, phase: Phase) -> Complex<f64> {
        self.load[phase.index()]
    }

    pub fn res_on(&self, phase: Phase) -> impl Iterator<Item = &ResUnit> {
        self.res.iter().filter(move |u| u.phase == phase)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSpec {
    pub from: NodeId,
    pub to: NodeId,
    pub phases: Vec<Phase>,
    /// Phase impedance matrix, ohms, `|phases| × |phases|`.
    pub z: DMatrix<Complex<f64>>,
    /// Diagonal shunt admittance, siemens.
    pub y_shunt: Option<Vec<Complex<f64>>>,
    pub i_max: f64,
    pub switchable: bool,
    pub weight: f64,
}

impl LineSpec {
    pub fn new(from: u32, to: u32, phases: &[Phase], z: DMatrix<Complex<f64>>, i_max: f64) -> Self {
        LineSpec {
            from: NodeId(from),
            to: NodeId(to),
            phases: phases.to_vec(),
            z,
            y_shunt: None,
            i_max,
            switchable: false,
            weight: 1.0,
        }
    }

    /// Uncoupled line with the same series impedance on every phase.
    pub fn uniform(from: u32, to: u32, phases: &[Phase], r: f64, x: f64, i_max: f64) -> Self {
        let n = phases.len();
        let mut z = DMatrix::from_element(n, n, Complex::new(0.0, 0.0));
        for i in 0..n {
            z[(i, i)] = Complex::new(r, x);
        }
        Self::new(from, to, phases, z, i_max)
    }

    pub fn switchable(mut self, weight: f64) -> Self {
        self.switchable = true;
        self.weight = weight;
        self
    }

    pub fn resistance(&self) -> DMatrix<f64> {
        self.z.map(|c| c.re)
    }

    pub fn label(&self) -> String {
        format!("({},{})", self.from, self.to)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("pcc node {0} not present")]
    MissingPcc(NodeId),
    #[error("node {node}: {msg}")]
    InvalidNode { node: NodeId, msg: String },
    #[error("line {line} {label}: {msg}")]
    InvalidLine {
        line: usize,
        label: String,
        msg: String,
    },
    #[error("line {line} {label}: singular impedance")]
    SingularImpedance { line: usize, label: String },
    #[error("line {line} references unknown node {node}")]
    DanglingNode { line: usize, node: NodeId },
    #[error("duplicate edge ({0},{1})")]
    DuplicateEdge(NodeId, NodeId),
    #[error("phase {phase} of node {node} is not reachable from the pcc")]
    Unreachable { node: NodeId, phase: Phase },
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// Validated feeder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    nodes: Vec<NodeSpec>,
    lines: Vec<LineSpec>,
    nominal_voltage: f64,
    pcc: NodeId,
    price_pcc: f64,
    phase_angles: [f64; 3],
    node_index: BTreeMap<NodeId, usize>,
}

impl FeederModel {
    pub fn new(
        nodes: Vec<NodeSpec>,
        lines: Vec<LineSpec>,
        nominal_voltage: f64,
        pcc: NodeId,
        price_pcc: f64,
    ) -> Result<Self, GridError> {
        let angles = [Phase::A, Phase::B, Phase::C].map(Phase::nominal_angle);
        Self::with_angles(nodes, lines, nominal_voltage, pcc, price_pcc, angles)
    }

    pub fn with_angles(
        nodes: Vec<NodeSpec>,
        lines: Vec<LineSpec>,
        nominal_voltage: f64,
        pcc: NodeId,
        price_pcc: f64,
        phase_angles: [f64; 3],
    ) -> Result<Self, GridError> {
        let mut node_index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if node_index.insert(n.id, i).is_some() {
                return Err(GridError::DuplicateNode(n.id));
            }
        }
        let model = FeederModel {
            nodes,
            lines,
            nominal_voltage,
            pcc,
            price_pcc,
            phase_angles,
            node_index,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), GridError> {
        if !(self.nominal_voltage.is_finite() && self.nominal_voltage > 0.0) {
            return Err(GridError::Invalid(
                "nominal voltage must be positive".into(),
            ));
        }
        if !self.price_pcc.is_finite() {
            return Err(GridError::Invalid("pcc price must be finite".into()));
        }
        if self.phase_angles.iter().any(|a| !a.is_finite()) {
            return Err(GridError::Invalid("phase angles must be finite".into()));
        }
        if !self.node_index.contains_key(&self.pcc) {
            return Err(GridError::MissingPcc(self.pcc));
        }
        for n in &self.nodes {
            validate_node(n)?;
        }
        let mut edges = BTreeSet::new();
        for (i, l) in self.lines.iter().enumerate() {
            self.validate_line(i, l)?;
            if !edges.insert((l.from, l.to)) {
                return Err(GridError::DuplicateEdge(l.from, l.to));
            }
        }
        self.check_reachability()
    }

    fn validate_line(&self, i: usize, l: &LineSpec) -> Result<(), GridError> {
        let bad = |msg: &str| GridError::InvalidLine {
            line: i,
            label: l.label(),
            msg: msg.to_string(),
        };
        let from = self.node(l.from).ok_or(GridError::DanglingNode {
            line: i,
            node: l.from,
        })?;
        let to = self.node(l.to).ok_or(GridError::DanglingNode {
            line: i,
            node: l.to,
        })?;
        if l.from == l.to {
            return Err(bad("self loop"));
        }
        if l.phases.is_empty() {
            return Err(bad("no phases"));
        }
        if !strictly_ordered(&l.phases) {
            return Err(bad("phases must be listed once each in a<b<c order"));
        }
        for p in &l.phases {
            if !from.has_phase(*p) || !to.has_phase(*p) {
                return Err(bad(&format!("phase {p} missing at an endpoint")));
            }
        }
        let k = l.phases.len();
        if l.z.nrows() != k || l.z.ncols() != k {
            return Err(bad("impedance matrix dimension does not match phases"));
        }
        if l.z.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(bad("non-finite impedance"));
        }
        let scale = l.z.iter().map(|c| c.norm()).fold(0.0, f64::max);
        for r in 0..k {
            for c in (r + 1)..k {
                if (l.z[(r, c)] - l.z[(c, r)]).norm() > 1e-9 * scale.max(1e-300) {
                    return Err(bad("impedance matrix not symmetric"));
                }
            }
        }
        let singular = scale == 0.0 || {
            let lu = l.z.clone().lu();
            let det = lu.determinant();
            det.norm() <= 1e-12 * scale.powi(k as i32)
        };
        if singular {
            return Err(GridError::SingularImpedance {
                line: i,
                label: l.label(),
            });
        }
        if !linalg::is_psd(&l.resistance()) {
            return Err(bad("resistance matrix not positive semidefinite"));
        }
        if !(l.i_max.is_finite() && l.i_max > 0.0) {
            return Err(bad("i_max must be positive"));
        }
        if !(l.weight.is_finite() && l.weight >= 0.0) || (l.switchable && l.weight <= 0.0) {
            return Err(bad("weight must be positive for switchable lines"));
        }
        if let Some(y) = &l.y_shunt {
            if y.len() != k {
                return Err(bad("shunt admittance length does not match phases"));
            }
        }
        Ok(())
    }

    fn check_reachability(&self) -> Result<(), GridError> {
        for phase in Phase::ALL {
            let mut adj: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
            for l in self.lines.iter().filter(|l| l.phases.contains(&phase)) {
                adj.entry(l.from).or_default().push(l.to);
                adj.entry(l.to).or_default().push(l.from);
            }
            let mut seen = BTreeSet::new();
            let mut queue = VecDeque::new();
            if self
                .node(self.pcc)
                .map(|n| n.has_phase(phase))
                .unwrap_or(false)
            {
                seen.insert(self.pcc);
                queue.push_back(self.pcc);
            }
            while let Some(n) = queue.pop_front() {
                for m in adj.get(&n).into_iter().flatten() {
                    if seen.insert(*m) {
                        queue.push_back(*m);
                    }
                }
            }
            for n in &self.nodes {
                if n.has_phase(phase) && !seen.contains(&n.id) {
                    return Err(GridError::Unreachable { node: n.id, phase });
                }
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn lines(&self) -> &[LineSpec] {
        &self.lines
    }

    pub fn nominal_voltage(&self) -> f64 {
        self.nominal_voltage
    }

    pub fn pcc(&self) -> NodeId {
        self.pcc
    }

    pub fn price_pcc(&self) -> f64 {
        self.price_pcc
    }

    pub fn phase_angles(&self) -> [f64; 3] {
        self.phase_angles
    }

    pub fn phase_angle(&self, phase: Phase) -> f64 {
        self.phase_angles[phase.index()]
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.node_index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn node_position(&self, id: NodeId) -> Option<usize> {
        self.node_index.get(&id).copied()
    }

    pub fn line_position(&self, from: u32, to: u32) -> Option<usize> {
        self.lines
            .iter()
            .position(|l| l.from.0 == from && l.to.0 == to)
    }

    pub fn switchable_lines(&self) -> Vec<usize> {
        (0..self.lines.len())
            .filter(|&i| self.lines[i].switchable)
            .collect()
    }

    pub fn dg_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.dg.is_some()).count()
    }

    /// Σ over lines of the number of phases.
    pub fn line_phase_count(&self) -> usize {
        self.lines.iter().map(|l| l.phases.len()).sum()
    }

    /// Node/phase pairs that host load, renewable or dispatchable generation
    /// (the pcc excluded). These carry the loss-of-load constraints.
    pub fn demand_pairs(&self) -> Vec<(NodeId, Phase)> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if n.id == self.pcc {
                continue;
            }
            for &p in &n.phases {
                let has_load = n.load_on(p).norm() != 0.0;
                let has_res = n.res_on(p).next().is_some();
                if has_load || has_res || n.dg.is_some() {
                    out.push((n.id, p));
                }
            }
        }
        out
    }

    /// Remaining node/phase pairs (the pcc excluded); their injected current is zero.
    pub fn zero_injection_pairs(&self) -> Vec<(NodeId, Phase)> {
        let demand: BTreeSet<_> = self.demand_pairs().into_iter().collect();
        let mut out = Vec::new();
        for n in &self.nodes {
            if n.id == self.pcc {
                continue;
            }
            for &p in &n.phases {
                if !demand.contains(&(n.id, p)) {
                    out.push((n.id, p));
                }
            }
        }
        out
    }

    /// Same nodes and lines, with the set of lines replaced (used to build
    /// fixed-topology variants). Fails if the result no longer validates.
    pub fn with_lines(&self, lines: Vec<LineSpec>) -> Result<FeederModel, GridError> {
        FeederModel::with_angles(
            self.nodes.clone(),
            lines,
            self.nominal_voltage,
            self.pcc,
            self.price_pcc,
            self.phase_angles,
        )
    }

    pub fn with_nodes(&self, nodes: Vec<NodeSpec>) -> Result<FeederModel, GridError> {
        FeederModel::with_angles(
            nodes,
            self.lines.clone(),
            self.nominal_voltage,
            self.pcc,
            self.price_pcc,
            self.phase_angles,
        )
    }

    /// Breadth-first hop distance between two nodes over all lines.
    pub fn hop_distances(&self) -> DMatrix<f64> {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for l in &self.lines {
            let a = self.node_index[&l.from];
            let b = self.node_index[&l.to];
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut d = DMatrix::from_element(n, n, f64::INFINITY);
        for s in 0..n {
            d[(s, s)] = 0.0;
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for &v in &adj[u] {
                    if d[(s, v)].is_infinite() {
                        d[(s, v)] = d[(s, u)] + 1.0;
                        q.push_back(v);
                    }
                }
            }
        }
        d
    }
}

fn strictly_ordered(phases: &[Phase]) -> bool {
    phases.windows(2).all(|w| w[0] < w[1])
}

fn validate_node(n: &NodeSpec) -> Result<(), GridError> {
    let bad = |msg: String| GridError::InvalidNode { node: n.id, msg };
    if n.phases.is_empty() {
        return Err(bad("no phases".into()));
    }
    if !strictly_ordered(&n.phases) {
        return Err(bad("phases must be listed once each in a<b<c order".into()));
    }
    for p in Phase::ALL {
        let s = n.load_on(p);
        if !s.re.is_finite() || !s.im.is_finite() {
            return Err(bad(format!("non-finite load on phase {p}")));
        }
        if s.norm() != 0.0 && !n.has_phase(p) {
            return Err(bad(format!("load on undeclared phase {p}")));
        }
    }
    if let Some(dg) = &n.dg {
        let vals = [dg.p_min, dg.p_max, dg.q_min, dg.q_max, dg.cost_coeff];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite dg data".into()));
        }
        if dg.p_min > dg.p_max || dg.q_min > dg.q_max {
            return Err(bad("dg limits out of order".into()));
        }
        if dg.unity_pf && (dg.q_min != 0.0 || dg.q_max != 0.0) {
            return Err(bad(
                "unity power factor dg must have zero reactive limits".into()
            ));
        }
    }
    for u in &n.res {
        if !n.has_phase(u.phase) {
            return Err(bad(format!(
                "renewable unit on undeclared phase {}",
                u.phase
            )));
        }
        if !(u.capacity_w.is_finite()
            && u.forecast_w.is_finite()
            && u.capacity_w >= 0.0
            && u.forecast_w >= 0.0)
        {
            return Err(bad("renewable capacity/forecast must be nonnegative".into()));
        }
    }
    Ok(())
}

/// One (line, phase) slot of the stacked current vector. Slot `s` owns the
/// coordinates `2s` (real part) and `2s + 1` (imaginary part).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub line: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurrentIndexing {
    slots: Vec<Slot>,
    line_first: Vec<usize>,
}

impl CurrentIndexing {
    pub fn new(model: &FeederModel) -> Self {
        let mut slots = Vec::new();
        let mut line_first = Vec::with_capacity(model.lines().len());
        for (i, l) in model.lines().iter().enumerate() {
            line_first.push(slots.len());
            for &p in &l.phases {
                slots.push(Slot { line: i, phase: p });
            }
        }
        CurrentIndexing { slots, line_first }
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn dim(&self) -> usize {
        2 * self.slots.len()
    }

    pub fn line_slots(&self, line: usize) -> std::ops::Range<usize> {
        let start = self.line_first[line];
        let end = self
            .line_first
            .get(line + 1)
            .copied()
            .unwrap_or(self.slots.len());
        start..end
    }

    /// Coordinates (Re, Im pairs) of every phase of a line.
    pub fn line_coords(&self, line: usize) -> std::ops::Range<usize> {
        let r = self.line_slots(line);
        2 * r.start..2 * r.end
    }

    pub fn slot_of(&self, line: usize, phase: Phase) -> Option<usize> {
        self.line_slots(line)
            .find(|&s| self.slots[s].phase == phase)
    }

    pub fn current(&self, xi: &[f64], slot: usize) -> Complex<f64> {
        Complex::new(xi[2 * slot], xi[2 * slot + 1])
    }
}

/// Per (node, phase): the line slots entering the injected current with
/// sign +1 (outgoing line) or −1 (incoming line).
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceOperator {
    rows: BTreeMap<(NodeId, Phase), Vec<(usize, f64)>>,
}

impl IncidenceOperator {
    pub fn entries(&self, node: NodeId, phase: Phase) -> &[(usize, f64)] {
        self.rows
            .get(&(node, phase))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Injected current (Re, Im) implied by the line currents.
    pub fn apply(&self, node: NodeId, phase: Phase, xi: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for &(s, sign) in self.entries(node, phase) {
            out[0] += sign * xi[2 * s];
            out[1] += sign * xi[2 * s + 1];
        }
        out
    }

    /// Dense 2 × dim row pair.
    pub fn row_pair(&self, node: NodeId, phase: Phase, dim: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(2, dim);
        for &(s, sign) in self.entries(node, phase) {
            m[(0, 2 * s)] += sign;
            m[(1, 2 * s + 1)] += sign;
        }
        m
    }

    pub fn keys(&self) -> impl Iterator<Item = &(NodeId, Phase)> {
        self.rows.keys()
    }
}

pub fn build_incidence(model: &FeederModel) -> (CurrentIndexing, IncidenceOperator) {
    let idx = CurrentIndexing::new(model);
    let mut rows: BTreeMap<(NodeId, Phase), Vec<(usize, f64)>> = BTreeMap::new();
    for n in model.nodes() {
        for &p in &n.phases {
            rows.insert((n.id, p), Vec::new());
        }
    }
    for (s, slot) in idx.slots().iter().enumerate() {
        let line = &model.lines()[slot.line];
        rows.get_mut(&(line.from, slot.phase))
            .expect("validated")
            .push((s, 1.0));
        rows.get_mut(&(line.to, slot.phase))
            .expect("validated")
            .push((s, -1.0));
    }
    (idx, IncidenceOperator { rows })
}

/// Active power loss as a quadratic form in the stacked currents:
/// Σ_lines aᵀ R a + bᵀ R b with a, b the real/imaginary phase-current blocks
/// and R = Re Z.
#[derive(Debug, Clone, PartialEq)]
pub struct LossForm {
    blocks: Vec<(usize, DMatrix<f64>)>,
    dim: usize,
}

impl LossForm {
    pub fn value(&self, xi: &[f64]) -> f64 {
        self.blocks
            .iter()
            .map(|(first, r)| block_loss(r, &xi[2 * first..2 * (first + r.nrows())]))
            .sum()
    }

    pub fn line_value(&self, line: usize, xi_line: &[f64]) -> f64 {
        block_loss(&self.blocks[line].1, xi_line)
    }

    pub fn line_resistance(&self, line: usize) -> &DMatrix<f64> {
        &self.blocks[line].1
    }

    /// Symmetric matrix `L` with `ξᵀ L ξ` equal to the loss.
    pub fn dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (first, r) in &self.blocks {
            for i in 0..r.nrows() {
                for j in 0..r.ncols() {
                    m[(2 * (first + i), 2 * (first + j))] += r[(i, j)];
                    m[(2 * (first + i) + 1, 2 * (first + j) + 1)] += r[(i, j)];
                }
            }
        }
        m
    }
}

fn block_loss(r: &DMatrix<f64>, xs: &[f64]) -> f64 {
    let k = r.nrows();
    let mut v = 0.0;
    for i in 0..k {
        for j in 0..k {
            v += r[(i, j)] * (xs[2 * i] * xs[2 * j] + xs[2 * i + 1] * xs[2 * j + 1]);
        }
    }
    v
}

pub fn loss_matrix(model: &FeederModel, idx: &CurrentIndexing) -> LossForm {
    let blocks = model
        .lines()
        .iter()
        .enumerate()
        .map(|(i, l)| (idx.line_slots(i).start, l.resistance()))
        .collect();
    LossForm {
        blocks,
        dim: idx.dim(),
    }
}

/// Replaces line shunt admittances by constant loads at both endpoints:
/// each endpoint phase absorbs `|M_N|² · conj(y/2)`.
pub fn shunt_to_loads(model: &FeederModel) -> FeederModel {
    if model.lines().iter().all(|l| l.y_shunt.is_none()) {
        return model.clone();
    }
    let v2 = model.nominal_voltage() * model.nominal_voltage();
    let mut nodes = model.nodes().to_vec();
    let mut lines = model.lines().to_vec();
    for l in &mut lines {
        if let Some(y) = l.y_shunt.take() {
            for (k, &p) in l.phases.iter().enumerate() {
                let s = (y[k] / 2.0).conj() * v2;
                for end in [l.from, l.to] {
                    let pos = model.node_position(end).expect("validated");
                    nodes[pos].load[p.index()] += s;
                }
            }
        }
    }
    FeederModel::with_angles(
        nodes,
        lines,
        model.nominal_voltage(),
        model.pcc(),
        model.price_pcc(),
        model.phase_angles(),
    )
    .expect("adding loads on existing phases keeps the model valid")
}

/// Linear current/power map at nominal voltage for one phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NominalInjection {
    /// Maps (P, Q) to the (Re, Im) injected current.
    pub phi_mat: Matrix2<f64>,
    /// `phiᵀ ι` is the active power of injected current ι.
    pub phi: Vector2<f64>,
    /// `phi_barᵀ ι` is the reactive power of injected current ι.
    pub phi_bar: Vector2<f64>,
}

impl NominalInjection {
    pub fn new(magnitude: f64, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let phi_mat = Matrix2::new(c, s, s, -c) / magnitude;
        NominalInjection {
            phi_mat,
            phi: Vector2::new(c, s) * magnitude,
            phi_bar: Vector2::new(s, -c) * magnitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionMap {
    per_phase: [NominalInjection; 3],
}

impl InjectionMap {
    /// The map depends only on the phase (all nodes share the nominal voltage).
    pub fn get(&self, _node: NodeId, phase: Phase) -> &NominalInjection {
        &self.per_phase[phase.index()]
    }

    pub fn phase(&self, phase: Phase) -> &NominalInjection {
        &self.per_phase[phase.index()]
    }
}

pub fn nominal_injection_map(model: &FeederModel) -> InjectionMap {
    let m = model.nominal_voltage();
    InjectionMap {
        per_phase: Phase::ALL.map(|p| NominalInjection::new(m, model.phase_angle(p))),
    }
}

/// True when the used lines form a spanning tree over all nodes.
pub fn is_radial(model: &FeederModel, used: &[bool]) -> bool {
    let n = model.nodes().len();
    let count = used.iter().filter(|&&u| u).count();
    if count + 1 != n {
        return false;
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (i, l) in model.lines().iter().enumerate() {
        if !used[i] {
            continue;
        }
        let a = find(&mut parent, model.node_position(l.from).unwrap());
        let b = find(&mut parent, model.node_position(l.to).unwrap());
        if a == b {
            return false;
        }
        parent[a] = b;
    }
    true
}
