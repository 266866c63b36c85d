//! Test-only reference solver: a primal log-barrier interior-point method for
//! `GroupSparseProgram`, sharing no code with the splitting solver.
#![allow(dead_code)]

pub mod enumerate;
pub mod gen;
pub mod tables;

use microgrid_reconfig::socp::GroupSparseProgram;
use nalgebra::{DMatrix, DVector};

/// `f(y) = k + pᵀy + Σ w_j y_{i_j}²`, barrier `−log f`.
#[derive(Clone)]
struct Term {
    k: f64,
    p: Vec<(usize, f64)>,
    sq: Vec<(usize, f64)>,
}

impl Term {
    fn value(&self, y: &DVector<f64>) -> f64 {
        self.k
            + self.p.iter().map(|(i, a)| a * y[*i]).sum::<f64>()
            + self.sq.iter().map(|(i, w)| w * y[*i] * y[*i]).sum::<f64>()
    }

    fn grad(&self, y: &DVector<f64>, n: usize) -> DVector<f64> {
        let mut g = DVector::zeros(n);
        for (i, a) in &self.p {
            g[*i] += a;
        }
        for (i, w) in &self.sq {
            g[*i] += 2.0 * w * y[*i];
        }
        g
    }
}

struct Barrier {
    n: usize,
    cost_q: DMatrix<f64>,
    cost_c: DVector<f64>,
    terms: Vec<Term>,
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl Barrier {
    fn feasible(&self, y: &DVector<f64>) -> bool {
        self.terms.iter().all(|t| t.value(y) > 0.0)
    }

    fn merit(&self, y: &DVector<f64>, tau: f64) -> f64 {
        let obj = 0.5 * y.dot(&(&self.cost_q * y)) + self.cost_c.dot(y);
        tau * obj - self.terms.iter().map(|t| t.value(y).ln()).sum::<f64>()
    }

    fn newton(&self, y: &mut DVector<f64>, tau: f64, stop: impl Fn(&DVector<f64>) -> bool) -> bool {
        let n = self.n;
        let m = self.a.nrows();
        for _ in 0..2000 {
            if stop(y) {
                return true;
            }
            let mut g = (&self.cost_q * &*y + &self.cost_c) * tau;
            let mut h = &self.cost_q * tau;
            for t in &self.terms {
                let f = t.value(y);
                let gf = t.grad(y, n);
                g -= &gf / f;
                h += &gf * gf.transpose() / (f * f);
                for (i, w) in &t.sq {
                    h[(*i, *i)] -= 2.0 * w / f;
                }
            }
            let mut k = DMatrix::zeros(n + m, n + m);
            k.view_mut((0, 0), (n, n)).copy_from(&h);
            k.view_mut((n, 0), (m, n)).copy_from(&self.a);
            k.view_mut((0, n), (n, m)).copy_from(&self.a.transpose());
            for i in 0..n {
                k[(i, i)] += 1e-12;
            }
            let mut rhs = DVector::zeros(n + m);
            rhs.rows_mut(0, n).copy_from(&(-&g));
            let r_eq = &self.b - &self.a * &*y;
            rhs.rows_mut(n, m).copy_from(&r_eq);
            let sol = match k.clone().lu().solve(&rhs) {
                Some(s) => s,
                None => return false,
            };
            let dy = sol.rows(0, n).into_owned();
            let decrement = -g.dot(&dy);
            // Below the rounding floor of the merit no further progress is measurable.
            let floor = 1e-13 * (1.0 + self.merit(y, tau).abs());
            if decrement < 2e-10_f64.max(floor) && r_eq.amax() < 1e-12 {
                return true;
            }
            let f0 = self.merit(y, tau);
            let mut step = 1.0;
            loop {
                let cand = &*y + &dy * step;
                if self.feasible(&cand)
                    && self.merit(&cand, tau) <= f0 - 0.25 * step * decrement.max(0.0)
                {
                    *y = cand;
                    break;
                }
                step *= 0.5;
                if step < 1e-16 {
                    return true;
                }
            }
        }
        true
    }

    fn solve(&self, mut y: DVector<f64>, m_eff: f64) -> DVector<f64> {
        // Start where the cost and barrier terms have comparable weight.
        let mut tau = 1.0 / (1.0 + self.cost_c.amax() + self.cost_q.amax());
        loop {
            self.newton(&mut y, tau, |_| false);
            let obj = 0.5 * y.dot(&(&self.cost_q * &y)) + self.cost_c.dot(&y);
            if m_eff / tau <= 1e-11 * (1.0 + obj.abs()) {
                return y;
            }
            tau *= 8.0;
        }
    }
}

/// Solves the program; returns `None` when no strictly feasible point exists.
pub fn barrier_solve(p: &GroupSparseProgram) -> Option<DVector<f64>> {
    let n = p.n;
    // Zero-weight groups contribute nothing; an epigraph variable without cost
    // would make the barrier problem unbounded.
    let groups: Vec<_> = p.groups.iter().filter(|g| g.weight > 0.0).collect();
    let ng = groups.len();
    let alpha_balls: Vec<usize> = (0..p.balls.len())
        .filter(|&b| p.balls[b].alpha > 0.0)
        .collect();
    let nv = n + ng + alpha_balls.len();

    // Least-norm point on the equality constraints.
    let mut x0 = DVector::zeros(n);
    if p.a_eq.nrows() > 0 {
        let svd = p.a_eq.clone().svd(true, true);
        x0 = svd.solve(&p.b_eq, 1e-12).ok()?;
    }
    for i in 0..n {
        let (lo, hi) = (p.lower[i], p.upper[i]);
        if lo.is_finite() && hi.is_finite() {
            x0[i] = 0.5 * (lo + hi);
        } else if lo.is_finite() {
            x0[i] = x0[i].max(lo + 1.0);
        } else if hi.is_finite() {
            x0[i] = x0[i].min(hi - 1.0);
        }
    }
    if p.a_eq.nrows() > 0 {
        // Re-project (bounded variables are assumed not to appear in equalities
        // with unbounded ones in a way that makes this inconsistent).
        let r = &p.b_eq - &p.a_eq * &x0;
        let svd = p.a_eq.clone().svd(true, true);
        x0 += svd.solve(&r, 1e-12).ok()?;
    }

    // Constraint terms on x; phase I relaxes them all by one extra variable.
    let constraint_terms = |relax: Option<usize>| -> Vec<Term> {
        let mut terms = Vec::new();
        let rel = |mut p: Vec<(usize, f64)>| {
            if let Some(s) = relax {
                p.push((s, 1.0));
            }
            p
        };
        for i in 0..p.a_in.nrows() {
            let lin: Vec<(usize, f64)> = (0..n)
                .filter(|&j| p.a_in[(i, j)] != 0.0)
                .map(|j| (j, -p.a_in[(i, j)]))
                .collect();
            terms.push(Term {
                k: p.b_in[i],
                p: rel(lin),
                sq: vec![],
            });
        }
        for b in &p.balls {
            terms.push(Term {
                k: b.radius * b.radius,
                p: rel(vec![]),
                sq: vec![(b.re, -1.0), (b.im, -1.0)],
            });
        }
        for i in 0..n {
            if p.lower[i].is_finite() {
                terms.push(Term {
                    k: -p.lower[i],
                    p: rel(vec![(i, 1.0)]),
                    sq: vec![],
                });
            }
            if p.upper[i].is_finite() {
                terms.push(Term {
                    k: p.upper[i],
                    p: rel(vec![(i, -1.0)]),
                    sq: vec![],
                });
            }
        }
        terms
    };
    // Epigraph cones for the norm terms of the objective.
    let mut strict = constraint_terms(None);
    for (g, grp) in groups.iter().enumerate() {
        let t = n + g;
        let mut sq = vec![(t, 1.0)];
        sq.extend(grp.indices.iter().map(|&i| (i, -1.0)));
        strict.push(Term {
            k: 0.0,
            p: vec![],
            sq,
        });
        strict.push(Term {
            k: 0.0,
            p: vec![(t, 1.0)],
            sq: vec![],
        });
    }
    for (k, &bi) in alpha_balls.iter().enumerate() {
        let t = n + ng + k;
        let b = &p.balls[bi];
        strict.push(Term {
            k: 0.0,
            p: vec![],
            sq: vec![(t, 1.0), (b.re, -1.0), (b.im, -1.0)],
        });
        strict.push(Term {
            k: 0.0,
            p: vec![(t, 1.0)],
            sq: vec![],
        });
    }

    let x_feasible = |x: &DVector<f64>| constraint_terms(None).iter().all(|t| t.value(x) > 0.0);
    if !x_feasible(&x0) {
        // Phase I over (x, s): minimize s with every constraint relaxed by s.
        let s_idx = n;
        let mut terms = constraint_terms(Some(s_idx));
        let mut z = DVector::zeros(n + 1);
        z.rows_mut(0, n).copy_from(&x0);
        let worst = terms
            .iter()
            .map(|t| t.value(&z))
            .fold(f64::INFINITY, f64::min);
        z[s_idx] = (-worst).max(0.0) + 1.0;
        // Keep s bounded below so the phase-I problem has a minimizer.
        terms.push(Term {
            k: 1.0,
            p: vec![(s_idx, 1.0)],
            sq: vec![],
        });
        let mut c = DVector::zeros(n + 1);
        c[s_idx] = 1.0;
        let mut a1 = DMatrix::zeros(p.a_eq.nrows(), n + 1);
        a1.view_mut((0, 0), (p.a_eq.nrows(), n)).copy_from(&p.a_eq);
        let ph1 = Barrier {
            n: n + 1,
            cost_q: DMatrix::zeros(n + 1, n + 1),
            cost_c: c,
            terms,
            a: a1,
            b: p.b_eq.clone(),
        };
        let m1 = ph1.terms.len() as f64;
        let mut tau = 1.0;
        let mut found = false;
        for _ in 0..60 {
            ph1.newton(&mut z, tau, |z| z[s_idx] < -1e-9);
            if z[s_idx] < -1e-9 {
                found = true;
                break;
            }
            // On the central path s exceeds the phase-I optimum by at most m/τ.
            if z[s_idx] - m1 / tau > 1e-9 {
                break;
            }
            tau *= 4.0;
        }
        x0 = z.rows(0, n).into_owned();
        if !found || !x_feasible(&x0) {
            return None;
        }
    }

    let mut y = DVector::zeros(nv);
    y.rows_mut(0, n).copy_from(&x0);
    for (g, grp) in groups.iter().enumerate() {
        y[n + g] = grp
            .indices
            .iter()
            .map(|&i| x0[i] * x0[i])
            .sum::<f64>()
            .sqrt()
            + 1.0;
    }
    for (k, &bi) in alpha_balls.iter().enumerate() {
        let b = &p.balls[bi];
        y[n + ng + k] = (x0[b.re].powi(2) + x0[b.im].powi(2)).sqrt() + 1.0;
    }
    let mut a_eq = DMatrix::zeros(p.a_eq.nrows(), nv);
    a_eq.view_mut((0, 0), (p.a_eq.nrows(), n))
        .copy_from(&p.a_eq);

    let mut q = DMatrix::zeros(nv, nv);
    q.view_mut((0, 0), (n, n)).copy_from(&p.q);
    let mut c = DVector::zeros(nv);
    c.rows_mut(0, n).copy_from(&p.c);
    for (g, grp) in groups.iter().enumerate() {
        c[n + g] = grp.weight;
    }
    for (k, &bi) in alpha_balls.iter().enumerate() {
        c[n + ng + k] = p.balls[bi].alpha;
    }
    let m_eff = strict.len() as f64;
    let bar = Barrier {
        n: nv,
        cost_q: q,
        cost_c: c,
        terms: strict,
        a: a_eq,
        b: p.b_eq.clone(),
    };
    let y = bar.solve(y, m_eff);
    Some(y.rows(0, n).into_owned())
}
