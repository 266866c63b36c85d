//! Group-sparse conic programs and an operator-splitting solver for them.
//!
//! The problem class is
//!
//! ```text
//! minimize   ½ xᵀQx + cᵀx + Σ_g λ_g ‖x_g‖₂ + Σ_b α_b ‖x_b‖₂
//! subject to A_eq x = b_eq,  A_in x ≤ b_in,  ‖x_b‖₂ ≤ r_b,  lo ≤ x ≤ hi
//! ```
//!
//! where every ball `b` is a (Re, Im) coordinate pair. The solver is a
//! relaxed ADMM on the splitting `x = z₁`, `A_in x = z₂` with the equality
//! rows kept in the linear-system step, so every nonsmooth piece is handled
//! by a closed-form (or bisection) proximal step.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use thiserror::Error;

use crate::linalg;

/// `v · max(0, 1 − τ/‖v‖)`.
pub fn block_soft_threshold(v: &[f64], tau: f64) -> Vec<f64> {
    let n = linalg::norm2(v);
    if n <= tau || n == 0.0 {
        return vec![0.0; v.len()];
    }
    let s = 1.0 - tau / n;
    v.iter().map(|x| x * s).collect()
}

pub fn project_disk(v: [f64; 2], r: f64) -> [f64; 2] {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if n <= r {
        v
    } else {
        let s = r / n;
        [v[0] * s, v[1] * s]
    }
}

/// One block of coordinates inside a shrinkage problem: a disk-capped
/// sub-vector with its own magnitude penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct MstoBlock {
    pub coords: Vec<usize>,
    pub radius: f64,
    pub alpha: f64,
}

/// `argmin_χ (a/2)‖χ‖² − vᵀχ + λ‖χ‖ + Σ_b α_b‖χ_b‖` subject to
/// `‖χ_b‖ ≤ r_b`, where the blocks partition the coordinates of `v`.
///
/// The minimizer keeps the direction of each `v_b`; the magnitudes solve a
/// one-dimensional monotone equation in the group multiplier, found in closed
/// form when no cap is active and by bisection otherwise.
pub fn msto_blocks(
    a: f64,
    v: &[f64],
    lambda: f64,
    blocks: &[MstoBlock],
    max_bisect: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let norms: Vec<f64> = blocks
        .iter()
        .map(|b| b.coords.iter().map(|&i| v[i] * v[i]).sum::<f64>().sqrt())
        .collect();
    let eff: Vec<f64> = blocks
        .iter()
        .zip(&norms)
        .map(|(b, n)| (n - b.alpha).max(0.0))
        .collect();
    let eff_norm = linalg::norm2(&eff);
    if eff_norm <= lambda || eff_norm == 0.0 {
        return out;
    }
    let mags = |theta: f64| -> Vec<f64> {
        blocks
            .iter()
            .zip(&eff)
            .map(|(b, e)| (e / (a + theta)).min(b.radius))
            .collect()
    };
    let mag = if lambda == 0.0 {
        mags(0.0)
    } else {
        let theta0 = a * lambda / (eff_norm - lambda);
        let m0 = mags(theta0);
        let capped = blocks
            .iter()
            .zip(&eff)
            .any(|(b, e)| e / (a + theta0) > b.radius);
        if !capped {
            m0
        } else {
            // θ·‖m(θ)‖ is increasing in θ; the root lies above the uncapped one.
            let f = |theta: f64| theta * linalg::norm2(&mags(theta)) - lambda;
            let mut lo = theta0;
            let mut hi = theta0.max(1e-300) * 2.0;
            while f(hi) < 0.0 {
                lo = hi;
                hi *= 2.0;
            }
            for _ in 0..max_bisect {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if f(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            mags(hi)
        }
    };
    for ((b, n), m) in blocks.iter().zip(&norms).zip(&mag) {
        if *m > 0.0 && *n > 0.0 {
            for &i in &b.coords {
                out[i] = v[i] * (m / n);
            }
        }
    }
    out
}

/// Constrained shrinkage on consecutive (Re, Im) phase pairs:
/// `argmin (a/2)‖χ‖² − vᵀχ + λ‖χ‖` with `‖χ_φ‖ ≤ radii[φ]`.
pub fn msto_subproblem(a: f64, v: &[f64], lambda: f64, radii: &[f64]) -> Vec<f64> {
    assert_eq!(v.len(), 2 * radii.len(), "one radius per coordinate pair");
    let blocks: Vec<MstoBlock> = radii
        .iter()
        .enumerate()
        .map(|(k, &r)| MstoBlock {
            coords: vec![2 * k, 2 * k + 1],
            radius: r,
            alpha: 0.0,
        })
        .collect();
    msto_blocks(a, v, lambda, &blocks, 200)
}

/// Same problem with a full PSD quadratic `½χᵀHχ` in place of `(a/2)‖χ‖²`,
/// solved by accelerated proximal gradient over `msto_subproblem`.
pub fn msto_quadratic(
    h: &DMatrix<f64>,
    v: &[f64],
    lambda: f64,
    radii: &[f64],
    tol: f64,
    max_iters: usize,
) -> Vec<f64> {
    let n = v.len();
    let (_, lmax) = linalg::sym_eig_range(h);
    let l = lmax.max(1e-12);
    let vv = DVector::from_column_slice(v);
    let mut x = DVector::zeros(n);
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..max_iters {
        let grad = h * &y - &vv;
        let step: Vec<f64> = (0..n).map(|i| l * y[i] - grad[i]).collect();
        let x_new = DVector::from_vec(msto_subproblem(l, &step, lambda, radii));
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let diff = (&x_new - &x).norm();
        y = &x_new + (&x_new - &x) * ((t - 1.0) / t_new);
        x = x_new;
        t = t_new;
        if diff <= tol * (1.0 + x.norm()) {
            break;
        }
    }
    x.as_slice().to_vec()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub indices: Vec<usize>,
    pub weight: f64,
}

/// Disk constraint `‖(x_re, x_im)‖ ≤ radius` with an optional magnitude
/// penalty `alpha · ‖(x_re, x_im)‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    pub re: usize,
    pub im: usize,
    pub radius: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSparseProgram {
    pub n: usize,
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub groups: Vec<Group>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub balls: Vec<Ball>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SocpError {
    #[error("invalid program: {0}")]
    Invalid(String),
    #[error("quadratic form is not positive semidefinite")]
    NotPsd,
    #[error("invalid settings: {0}")]
    Settings(String),
}

impl GroupSparseProgram {
    pub fn new(n: usize) -> Self {
        GroupSparseProgram {
            n,
            q: DMatrix::zeros(n, n),
            c: DVector::zeros(n),
            groups: Vec::new(),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            balls: Vec::new(),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn validate(&self) -> Result<(), SocpError> {
        let n = self.n;
        let bad = |m: &str| Err(SocpError::Invalid(m.to_string()));
        if self.q.nrows() != n || self.q.ncols() != n || self.c.len() != n {
            return bad("q/c dimension mismatch");
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return bad("equality dimension mismatch");
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return bad("inequality dimension mismatch");
        }
        if self.lower.len() != n || self.upper.len() != n {
            return bad("bound dimension mismatch");
        }
        let finite = self
            .q
            .iter()
            .chain(self.c.iter())
            .chain(self.a_eq.iter())
            .chain(self.b_eq.iter());
        if finite
            .chain(self.a_in.iter())
            .chain(self.b_in.iter())
            .any(|v| !v.is_finite())
        {
            return bad("non-finite data");
        }
        let mut owner = vec![None::<usize>; n];
        for (g, grp) in self.groups.iter().enumerate() {
            if !(grp.weight.is_finite() && grp.weight >= 0.0) {
                return bad("group weights must be nonnegative");
            }
            if grp.indices.is_empty() {
                return bad("empty group");
            }
            for &i in &grp.indices {
                if i >= n {
                    return bad("group index out of range");
                }
                if owner[i].is_some() {
                    return bad("groups must be disjoint");
                }
                owner[i] = Some(g);
            }
        }
        let mut in_ball = vec![false; n];
        for b in &self.balls {
            if b.re >= n || b.im >= n || b.re == b.im {
                return bad("ball index out of range");
            }
            if !(b.radius > 0.0) || !(b.alpha.is_finite() && b.alpha >= 0.0) {
                return bad("ball radius must be positive and alpha nonnegative");
            }
            if in_ball[b.re] || in_ball[b.im] {
                return bad("balls must be disjoint");
            }
            in_ball[b.re] = true;
            in_ball[b.im] = true;
            if owner[b.re] != owner[b.im] {
                return bad("a ball must lie inside a single group or outside all groups");
            }
        }
        for i in 0..n {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return bad("bounds out of order");
            }
            if (lo.is_finite() || hi.is_finite()) && (owner[i].is_some() || in_ball[i]) {
                return bad("bounded variables cannot be grouped or disk-constrained");
            }
        }
        if !linalg::is_symmetric(&self.q, 1e-9) || linalg::psd_cholesky(&self.q, 1e-10).is_none() {
            return Err(SocpError::NotPsd);
        }
        Ok(())
    }

    pub fn smooth_objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.c.dot(x)
    }

    pub fn penalty(&self, x: &DVector<f64>) -> f64 {
        let g: f64 = self
            .groups
            .iter()
            .map(|g| g.weight * g.indices.iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt())
            .sum();
        let b: f64 = self
            .balls
            .iter()
            .map(|b| b.alpha * (x[b.re].powi(2) + x[b.im].powi(2)).sqrt())
            .sum();
        g + b
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        self.smooth_objective(x) + self.penalty(x)
    }

    /// Largest violation over equalities, inequalities, balls and bounds.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        if self.a_eq.nrows() > 0 {
            v = v.max((&self.a_eq * x - &self.b_eq).amax());
        }
        if self.a_in.nrows() > 0 {
            v = (&self.a_in * x - &self.b_in)
                .iter()
                .fold(v, |m, r| m.max(*r));
        }
        for b in &self.balls {
            v = v.max((x[b.re].powi(2) + x[b.im].powi(2)).sqrt() - b.radius);
        }
        for i in 0..self.n {
            v = v.max(self.lower[i] - x[i]).max(x[i] - self.upper[i]);
        }
        v.max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    /// Initial augmented-Lagrangian penalty.
    pub kappa: f64,
    pub max_iters: usize,
    pub tol_primal: f64,
    pub tol_dual: f64,
    /// Largest accepted violation of the row-normalized linear constraints,
    /// relative to `1 + ‖x‖∞`.
    pub tol_feas: f64,
    /// Bisection steps inside the constrained shrinkage step.
    pub inner_iters: usize,
    pub relaxation: f64,
    /// Rebalance the penalty every this many iterations (0 disables).
    pub adapt_interval: usize,
    pub record_trace: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            kappa: 1.0,
            max_iters: 50_000,
            tol_primal: 1e-7,
            tol_dual: 1e-7,
            tol_feas: 1e-7,
            inner_iters: 200,
            relaxation: 1.6,
            adapt_interval: 25,
            record_trace: true,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), SocpError> {
        let ok = self.kappa > 0.0
            && self.kappa.is_finite()
            && self.max_iters > 0
            && self.tol_primal > 0.0
            && self.tol_dual > 0.0
            && self.tol_feas > 0.0
            && self.inner_iters > 0
            && self.relaxation > 0.0
            && self.relaxation < 2.0;
        if ok {
            Ok(())
        } else {
            Err(SocpError::Settings(
                "kappa, iteration limits and tolerances must be positive; relaxation in (0, 2)"
                    .into(),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIters,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub r_primal: f64,
    pub r_dual: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult {
    pub x: DVector<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub residuals: Vec<IterRecord>,
    pub objective: f64,
    /// Multipliers of `A_eq x = b_eq`.
    pub y_eq: DVector<f64>,
    /// Multipliers of `A_in x ≤ b_in` (nonnegative at optimum).
    pub y_in: DVector<f64>,
    /// Subgradient of the nonsmooth part at `x`.
    pub y_prox: DVector<f64>,
    /// Per group: block returned exactly zero.
    pub zero_groups: Vec<bool>,
}

impl SolverResult {
    pub fn write_trace_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iter", "r_primal", "r_dual", "objective"])?;
        for r in &self.residuals {
            wr.write_record([
                r.iter.to_string(),
                r.r_primal.to_string(),
                r.r_dual.to_string(),
                r.objective.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum ProxItem {
    Group {
        blocks: Vec<MstoBlock>,
        coords: Vec<usize>,
        group: usize,
    },
    Ball {
        re: usize,
        im: usize,
        radius: f64,
        alpha: f64,
    },
    Bounds {
        idx: usize,
        lo: f64,
        hi: f64,
    },
}

fn prox_plan(p: &GroupSparseProgram) -> Vec<ProxItem> {
    let mut items = Vec::new();
    let mut grouped = vec![false; p.n];
    for (g, grp) in p.groups.iter().enumerate() {
        let mut coords = grp.indices.clone();
        coords.sort_unstable();
        let local = |i: usize| coords.binary_search(&i).ok();
        let mut blocks = Vec::new();
        let mut covered = vec![false; coords.len()];
        for b in &p.balls {
            if let (Some(r), Some(i)) = (local(b.re), local(b.im)) {
                covered[r] = true;
                covered[i] = true;
                blocks.push(MstoBlock {
                    coords: vec![r, i],
                    radius: b.radius,
                    alpha: b.alpha,
                });
            }
        }
        for (k, c) in covered.iter().enumerate() {
            if !c {
                blocks.push(MstoBlock {
                    coords: vec![k],
                    radius: f64::INFINITY,
                    alpha: 0.0,
                });
            }
        }
        for &i in &coords {
            grouped[i] = true;
        }
        items.push(ProxItem::Group {
            blocks,
            coords,
            group: g,
        });
    }
    for b in &p.balls {
        if !grouped[b.re] {
            items.push(ProxItem::Ball {
                re: b.re,
                im: b.im,
                radius: b.radius,
                alpha: b.alpha,
            });
        }
    }
    for i in 0..p.n {
        if p.lower[i].is_finite() || p.upper[i].is_finite() {
            items.push(ProxItem::Bounds {
                idx: i,
                lo: p.lower[i],
                hi: p.upper[i],
            });
        }
    }
    items
}

/// Reusable solver workspace. Keeps its iterates between calls so that
/// re-solving after `set_linear` / `set_group_weights` warm starts.
pub struct SplittingSolver {
    prog: GroupSparseProgram,
    settings: SolverSettings,
    d_eq: DVector<f64>,
    d_in: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    gtg: DMatrix<f64>,
    plan: Vec<ProxItem>,
    weights: Vec<f64>,
    rho: f64,
    kkt: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
    x: DVector<f64>,
    z1: DVector<f64>,
    z2: DVector<f64>,
    u1: DVector<f64>,
    u2: DVector<f64>,
    nu: DVector<f64>,
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
/// Relative tolerance of the infeasibility certificate.
const EPS_INFEAS: f64 = 1e-5;
/// Consecutive iterations the certificate must hold.
const INFEAS_HOLD: usize = 25;

impl SplittingSolver {
    pub fn new(prog: GroupSparseProgram, settings: SolverSettings) -> Result<Self, SocpError> {
        prog.validate()?;
        settings.validate()?;
        let n = prog.n;
        let row_scale = |m: &DMatrix<f64>| {
            DVector::from_iterator(
                m.nrows(),
                (0..m.nrows()).map(|i| {
                    let nr = m.row(i).norm();
                    if nr > 0.0 {
                        1.0 / nr
                    } else {
                        1.0
                    }
                }),
            )
        };
        let d_eq = row_scale(&prog.a_eq);
        let d_in = row_scale(&prog.a_in);
        let a = DMatrix::from_fn(prog.a_eq.nrows(), n, |i, j| prog.a_eq[(i, j)] * d_eq[i]);
        let b = prog.b_eq.component_mul(&d_eq);
        let g = DMatrix::from_fn(prog.a_in.nrows(), n, |i, j| prog.a_in[(i, j)] * d_in[i]);
        let h = prog.b_in.component_mul(&d_in);
        let gtg = g.transpose() * &g;
        let plan = prox_plan(&prog);
        let weights = prog.groups.iter().map(|g| g.weight).collect();
        let rho = settings.kappa;
        let (kkt, lu) = factor(&prog.q, &gtg, &a, rho);
        let m_in = g.nrows();
        let m_eq = a.nrows();
        let mut s = SplittingSolver {
            prog,
            settings,
            d_eq,
            d_in,
            a,
            b,
            g,
            h,
            gtg,
            plan,
            weights,
            rho,
            kkt,
            lu,
            x: DVector::zeros(n),
            z1: DVector::zeros(n),
            z2: DVector::zeros(m_in),
            u1: DVector::zeros(n),
            u2: DVector::zeros(m_in),
            nu: DVector::zeros(m_eq),
        };
        s.reset();
        Ok(s)
    }

    pub fn program(&self) -> &GroupSparseProgram {
        &self.prog
    }

    /// Zeroes all iterates and restores the initial penalty (cold start).
    pub fn reset(&mut self) {
        if self.rho != self.settings.kappa {
            self.set_rho(self.settings.kappa);
        }
        self.x.fill(0.0);
        self.z1 = self.prox(&DVector::zeros(self.prog.n));
        self.z2 = (&self.g * &self.z1).zip_map(&self.h, f64::min);
        self.u1.fill(0.0);
        self.u2.fill(0.0);
        self.nu.fill(0.0);
    }

    /// Uses `x0` as the initial primal point, keeping the current multipliers.
    pub fn warm_start(&mut self, x0: &DVector<f64>) {
        self.x.copy_from(x0);
        self.z1 = self.prox(x0);
        self.z2 = (&self.g * x0).zip_map(&self.h, f64::min);
    }

    pub fn set_linear(&mut self, c: &DVector<f64>) {
        assert_eq!(c.len(), self.prog.n);
        self.prog.c.copy_from(c);
    }

    pub fn set_group_weights(&mut self, w: &[f64]) {
        assert_eq!(w.len(), self.weights.len());
        self.weights.copy_from_slice(w);
        for (g, &wi) in self.prog.groups.iter_mut().zip(w) {
            g.weight = wi;
        }
    }

    pub fn set_settings(&mut self, settings: SolverSettings) -> Result<(), SocpError> {
        settings.validate()?;
        self.settings = settings;
        Ok(())
    }

    fn prox(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut z = v.clone();
        let rho = self.rho;
        for item in &self.plan {
            match item {
                ProxItem::Group {
                    blocks,
                    coords,
                    group,
                } => {
                    let local: Vec<f64> = coords.iter().map(|&i| rho * v[i]).collect();
                    let out = msto_blocks(
                        rho,
                        &local,
                        self.weights[*group],
                        blocks,
                        self.settings.inner_iters,
                    );
                    for (k, &i) in coords.iter().enumerate() {
                        z[i] = out[k];
                    }
                }
                ProxItem::Ball {
                    re,
                    im,
                    radius,
                    alpha,
                } => {
                    let s = block_soft_threshold(&[v[*re], v[*im]], alpha / rho);
                    let p = project_disk([s[0], s[1]], *radius);
                    z[*re] = p[0];
                    z[*im] = p[1];
                }
                ProxItem::Bounds { idx, lo, hi } => z[*idx] = v[*idx].clamp(*lo, *hi),
            }
        }
        z
    }

    fn solve_kkt(&self, rhs1: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.prog.n;
        let m = self.a.nrows();
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(rhs1);
        rhs.rows_mut(n, m).copy_from(&self.b);
        let mut sol = self
            .lu
            .solve(&rhs)
            .expect("quasi-definite system is nonsingular");
        if m > 0 {
            // Refine against the unregularized system.
            for _ in 0..3 {
                let r = &rhs - &self.kkt * &sol;
                if r.amax() <= 1e-14 * (1.0 + rhs.amax()) {
                    break;
                }
                sol += self.lu.solve(&r).expect("nonsingular");
            }
        }
        (sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned())
    }

    fn set_rho(&mut self, rho: f64) {
        let ratio = self.rho / rho;
        self.u1 *= ratio;
        self.u2 *= ratio;
        self.rho = rho;
        let (kkt, lu) = factor(&self.prog.q, &self.gtg, &self.a, rho);
        self.kkt = kkt;
        self.lu = lu;
    }

    /// Constraint violation of `x` on the row-normalized linear constraints.
    fn scaled_violation(&self, x: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        if self.a.nrows() > 0 {
            v = (&self.a * x - &self.b).amax();
        }
        if self.g.nrows() > 0 {
            v = (&self.g * x - &self.h).iter().fold(v, |m, r| m.max(*r));
        }
        v
    }

    pub fn solve(&mut self) -> SolverResult {
        let n = self.prog.n;
        let s = self.settings.clone();
        let alpha = s.relaxation;
        let dim_p = ((n + self.g.nrows() + self.a.nrows()) as f64).sqrt();
        let dim_d = (n as f64).sqrt();
        let mut trace = Vec::new();
        let mut status = SolveStatus::MaxIters;
        let mut iters = 0;
        let mut hold = 0;
        for it in 1..=s.max_iters {
            iters = it;
            let y1_prev = &self.u1 * self.rho;
            let w_prev = &self.u2 * self.rho;
            let nu_prev = self.nu.clone();
            let rhs1 = -&self.prog.c
                + (&self.z1 - &self.u1) * self.rho
                + self.g.tr_mul(&(&self.z2 - &self.u2)) * self.rho;
            let (xt, nu) = self.solve_kkt(&rhs1);
            let gx = &self.g * &xt;
            let xh1 = &xt * alpha + &self.z1 * (1.0 - alpha);
            let xh2 = &gx * alpha + &self.z2 * (1.0 - alpha);
            self.z1 = self.prox(&(&xh1 + &self.u1));
            self.z2 = (&xh2 + &self.u2).zip_map(&self.h, f64::min);
            self.u1 += &xh1 - &self.z1;
            self.u2 += &xh2 - &self.z2;
            self.x = xt;
            self.nu = nu;

            let ax = &self.a * &self.x;
            let r_p = ((&self.x - &self.z1).norm_squared()
                + (&gx - &self.z2).norm_squared()
                + (&ax - &self.b).norm_squared())
            .sqrt();
            let y1 = &self.u1 * self.rho;
            let w = &self.u2 * self.rho;
            let qx = &self.prog.q * &self.x;
            let atnu = self.a.tr_mul(&self.nu);
            let gtw = self.g.tr_mul(&w);
            let r_d = (&qx + &self.prog.c + &atnu + &gtw + &y1).norm();
            let scale_p = self
                .x
                .norm()
                .max(self.z1.norm())
                .max(gx.norm())
                .max(self.z2.norm())
                .max(self.b.norm());
            let scale_d = qx
                .norm()
                .max(self.prog.c.norm())
                .max(atnu.norm())
                .max(gtw.norm())
                .max(y1.norm());
            let eps_p = s.tol_primal * dim_p + s.tol_primal * scale_p;
            let eps_d = s.tol_dual * dim_d + s.tol_dual * scale_d;
            if s.record_trace {
                trace.push(IterRecord {
                    iter: it,
                    r_primal: r_p,
                    r_dual: r_d,
                    objective: self.prog.objective(&self.z1),
                });
            }
            if r_p <= eps_p
                && r_d <= eps_d
                && self.scaled_violation(&self.z1) <= s.tol_feas * (1.0 + self.z1.amax())
            {
                status = SolveStatus::Optimal;
                break;
            }

            let d1 = &y1 - &y1_prev;
            let dw = &w - &w_prev;
            let dnu = &self.nu - &nu_prev;
            if self.certifies_infeasible(&d1, &dw, &dnu) {
                hold += 1;
                if hold >= INFEAS_HOLD {
                    status = SolveStatus::Infeasible;
                    break;
                }
            } else {
                hold = 0;
            }

            if s.adapt_interval > 0 && it % s.adapt_interval == 0 {
                let rel_p = r_p / scale_p.max(1e-12);
                let rel_d = r_d / scale_d.max(1e-12);
                if rel_p > 0.0 && rel_d > 0.0 {
                    let new_rho = (self.rho * (rel_p / rel_d).sqrt()).clamp(RHO_MIN, RHO_MAX);
                    let f = new_rho / self.rho;
                    if !(0.2..=5.0).contains(&f) {
                        self.set_rho(new_rho);
                    }
                }
            }
        }
        self.finish(status, iters, trace)
    }

    /// Farkas test on a dual increment `(d1, dw, dnu)`: it proves the
    /// constraints empty when `d1 + Gᵀdw + Aᵀdnu = 0`, `dw >= 0` and
    /// `σ_C(d1) + hᵀdw + bᵀdnu < 0`, with `C` the prox domain.
    fn certifies_infeasible(
        &self,
        d1: &DVector<f64>,
        dw: &DVector<f64>,
        dnu: &DVector<f64>,
    ) -> bool {
        let scale = d1.amax().max(dw.amax()).max(dnu.amax());
        if !(scale > 0.0) {
            return false;
        }
        let tol = EPS_INFEAS * scale;
        if dw.iter().any(|&v| v < -tol) {
            return false;
        }
        let stat = d1 + self.g.tr_mul(dw) + self.a.tr_mul(dnu);
        if stat.amax() > tol {
            return false;
        }
        let mut free = vec![true; self.prog.n];
        let mut sigma = 0.0;
        for item in &self.plan {
            match item {
                ProxItem::Group { blocks, coords, .. } => {
                    for b in blocks.iter().filter(|b| b.radius.is_finite()) {
                        let nb = b.coords.iter().map(|&k| d1[coords[k]].powi(2)).sum::<f64>();
                        sigma += b.radius * nb.sqrt();
                        for &k in &b.coords {
                            free[coords[k]] = false;
                        }
                    }
                }
                ProxItem::Ball { re, im, radius, .. } => {
                    sigma += radius * d1[*re].hypot(d1[*im]);
                    free[*re] = false;
                    free[*im] = false;
                }
                ProxItem::Bounds { idx, lo, hi } => {
                    let v = d1[*idx];
                    let bound = if v > 0.0 { *hi } else { *lo };
                    if bound.is_finite() {
                        sigma += bound * v;
                        free[*idx] = false;
                    }
                }
            }
        }
        if (0..self.prog.n).any(|i| free[i] && d1[i].abs() > tol) {
            return false;
        }
        sigma + self.h.dot(dw) + self.b.dot(dnu) < -tol
    }

    fn finish(
        &self,
        status: SolveStatus,
        iterations: usize,
        residuals: Vec<IterRecord>,
    ) -> SolverResult {
        let mut x = self.z1.clone();
        let y1 = &self.u1 * self.rho;
        let xn = x.norm();
        let mut zero_groups = Vec::with_capacity(self.prog.groups.len());
        for item in &self.plan {
            if let ProxItem::Group {
                blocks,
                coords,
                group,
            } = item
            {
                let block_norm = coords.iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt();
                let zero = block_norm == 0.0
                    || (block_norm <= 1e-6 * (1.0 + xn) && {
                        let eff: Vec<f64> = blocks
                            .iter()
                            .map(|b| {
                                let nb = b
                                    .coords
                                    .iter()
                                    .map(|&k| y1[coords[k]].powi(2))
                                    .sum::<f64>()
                                    .sqrt();
                                (nb - b.alpha).max(0.0)
                            })
                            .collect();
                        let w = self.weights[*group];
                        linalg::norm2(&eff) <= w + 1e-6 * (1.0 + w)
                    });
                if zero {
                    for &i in coords {
                        x[i] = 0.0;
                    }
                }
                zero_groups.push(zero);
            }
        }
        SolverResult {
            objective: self.prog.objective(&x),
            x,
            status,
            iterations,
            residuals,
            y_eq: self.nu.component_mul(&self.d_eq),
            y_in: (&self.u2 * self.rho).component_mul(&self.d_in),
            y_prox: y1,
            zero_groups,
        }
    }
}

const KKT_DELTA: f64 = 1e-9;

fn factor(
    q: &DMatrix<f64>,
    gtg: &DMatrix<f64>,
    a: &DMatrix<f64>,
    rho: f64,
) -> (DMatrix<f64>, LU<f64, Dyn, Dyn>) {
    let n = q.nrows();
    let m = a.nrows();
    let mut k = DMatrix::zeros(n + m, n + m);
    {
        let mut top = k.view_mut((0, 0), (n, n));
        top.copy_from(&(q + gtg * rho));
        for i in 0..n {
            top[(i, i)] += rho;
        }
    }
    k.view_mut((n, 0), (m, n)).copy_from(a);
    k.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    let kkt = k.clone();
    for i in 0..m {
        k[(n + i, n + i)] = -KKT_DELTA;
    }
    (kkt, k.lu())
}

/// One-shot solve from a cold start.
pub fn solve(p: &GroupSparseProgram, s: &SolverSettings) -> Result<SolverResult, SocpError> {
    let mut solver = SplittingSolver::new(p.clone(), s.clone())?;
    Ok(solver.solve())
}
