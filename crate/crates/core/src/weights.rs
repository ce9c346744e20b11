//! Minimum-variance approximate balancing weights on the control units.
//!
//! The QP `min sum (w_i - 1/n)^2` over the simplex with box constraints on
//! `sum w_i B_q(X_i)` is solved through its dual: with multipliers `nu`, the
//! inner minimizer is `w(nu) = Proj_simplex(1/n - C' nu / 2)`, and the dual is
//! maximized by accelerated proximal gradient. The active set read off the
//! dual iterate is then polished by solving the reduced KKT system exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balance::BalanceFunctionSet;
use crate::model::{DesignView, WeightSolution};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightProblem {
    /// Frame indices of the control units.
    pub controls: Vec<usize>,
    pub names: Vec<String>,
    /// `values[q][k]` is balance function `q` of control `k`.
    pub values: Vec<Vec<f64>>,
    /// Treated means of each balance function.
    pub targets: Vec<f64>,
    pub tolerances: Vec<f64>,
}

pub const DEFAULT_KKT_TOLERANCE: f64 = 1e-8;

impl WeightProblem {
    pub fn from_view(view: &DesignView, treated: &[usize], controls: &[usize], functions: &BalanceFunctionSet) -> Result<Self> {
        if treated.is_empty() {
            return Err(Error::InsufficientData("balancing weights need at least one treated unit".into()));
        }
        let all = functions.evaluate(view)?;
        let p = WeightProblem {
            controls: controls.to_vec(),
            names: functions.names(),
            values: all.iter().map(|v| controls.iter().map(|&i| v[i]).collect()).collect(),
            targets: all
                .iter()
                .map(|v| treated.iter().map(|&i| v[i]).sum::<f64>() / treated.len() as f64)
                .collect(),
            tolerances: functions.tolerances(),
        };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        let q = self.targets.len();
        if self.controls.is_empty() {
            return Err(Error::InsufficientData("balancing weights need at least one control".into()));
        }
        if self.values.len() != q || self.tolerances.len() != q || self.names.len() != q {
            return Err(Error::InvalidArgument("names, values, targets and tolerances differ in length".into()));
        }
        if self.values.iter().any(|v| v.len() != self.controls.len() || v.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidArgument("balance values must be finite, one per control".into()));
        }
        if self.tolerances.iter().any(|t| !(*t >= 0.0)) || self.targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("tolerances must be nonnegative and targets finite".into()));
        }
        Ok(())
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, x) in s.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Constraints centred on their targets and scaled to unit max-abs, so each
/// reads `-d_q <= sum_k c[q][k] w_k <= d_q`.
struct Scaled {
    rows: Vec<usize>,
    c: Vec<Vec<f64>>,
    d: Vec<f64>,
    scale: Vec<f64>,
}

impl Scaled {
    fn new(p: &WeightProblem) -> Self {
        let mut out = Scaled {
            rows: Vec::new(),
            c: Vec::new(),
            d: Vec::new(),
            scale: Vec::new(),
        };
        for q in 0..p.targets.len() {
            if !p.tolerances[q].is_finite() {
                continue;
            }
            let centered: Vec<f64> = p.values[q].iter().map(|x| x - p.targets[q]).collect();
            let s = centered.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let s = if s > 0.0 { s } else { 1.0 };
            out.rows.push(q);
            out.c.push(centered.iter().map(|x| x / s).collect());
            out.d.push(p.tolerances[q] / s);
            out.scale.push(s);
        }
        out
    }

    fn apply(&self, w: &[f64]) -> Vec<f64> {
        self.c.iter().map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum()).collect()
    }

    fn unclipped(&self, u: f64, mu: &[f64], eta: f64, k: usize) -> f64 {
        u - (self.c.iter().zip(mu).map(|(row, m)| row[k] * m).sum::<f64>() + eta) / 2.0
    }
}

fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[derive(Clone)]
struct Candidate {
    w: Vec<f64>,
    mu: Vec<f64>,
    residual: f64,
}

/// KKT residual of `(w, mu, eta)` in the scaled problem: primal feasibility,
/// stationarity on the support, dual feasibility off it, multiplier signs and
/// complementary slackness.
fn kkt_residual(sc: &Scaled, u: f64, w: &[f64], mu: &[f64]) -> f64 {
    let n = w.len();
    let support: Vec<usize> = (0..n).filter(|&k| w[k] > 0.0).collect();
    if support.is_empty() {
        return f64::INFINITY;
    }
    // eta from the stationarity equations on the support (least squares).
    let grad = |k: usize| 2.0 * (w[k] - u) + sc.c.iter().zip(mu).map(|(row, m)| row[k] * m).sum::<f64>();
    let eta = -support.iter().map(|&k| grad(k)).sum::<f64>() / support.len() as f64;
    let mut r = (w.iter().sum::<f64>() - 1.0).abs();
    r = r.max(w.iter().fold(0.0f64, |m, &x| m.max(-x)));
    for &k in &support {
        r = r.max((grad(k) + eta).abs());
    }
    for k in (0..n).filter(|&k| w[k] <= 0.0) {
        r = r.max((-(grad(k) + eta)).max(0.0));
    }
    let cw = sc.apply(w);
    for q in 0..cw.len() {
        r = r.max((cw[q].abs() - sc.d[q]).max(0.0));
        // mu > 0 pairs with the upper side, mu < 0 with the lower side.
        let slack = if mu[q] > 0.0 {
            sc.d[q] - cw[q]
        } else if mu[q] < 0.0 {
            sc.d[q] + cw[q]
        } else {
            0.0
        };
        r = r.max((mu[q] * slack).abs());
    }
    r
}

/// Given the active constraints (with sides) and a starting support, iterate
/// `S <- {k : unclipped_k > 0}` with the reduced KKT system solved on `S`.
fn polish(sc: &Scaled, u: f64, n: usize, mut active: Vec<(usize, f64)>, mut support: Vec<bool>) -> Option<Candidate> {
    let mut best: Option<Candidate> = None;
    for _ in 0..60 {
        let s: Vec<usize> = (0..n).filter(|&k| support[k]).collect();
        if s.is_empty() {
            return best;
        }
        let a = active.len();
        // Unknowns: mu_active (a) then eta. From w_k = u - (C'mu + eta)/2 on S.
        let m = a + 1;
        let mut mat = DMatrix::<f64>::zeros(m, m);
        let mut rhs = DVector::<f64>::zeros(m);
        let sum_c: Vec<f64> = active.iter().map(|&(q, _)| s.iter().map(|&k| sc.c[q][k]).sum()).collect();
        // sum_S w = 1
        for (j, sc_j) in sum_c.iter().enumerate() {
            mat[(0, j)] = sc_j / 2.0;
        }
        mat[(0, a)] = s.len() as f64 / 2.0;
        rhs[0] = s.len() as f64 * u - 1.0;
        // sum_S c_p w = side_p * d_p
        for (i, &(p, side)) in active.iter().enumerate() {
            for (j, &(q, _)) in active.iter().enumerate() {
                mat[(i + 1, j)] = s.iter().map(|&k| sc.c[p][k] * sc.c[q][k]).sum::<f64>() / 2.0;
            }
            mat[(i + 1, a)] = sum_c[i] / 2.0;
            rhs[i + 1] = u * sum_c[i] - side * sc.d[p];
        }
        // Equation order: row 0 pairs with eta's column; reorder to put eta first.
        let sol = mat.clone().svd(true, true).solve(&rhs, 1e-13).ok()?;
        let mut mu = vec![0.0; sc.c.len()];
        for (j, &(q, _)) in active.iter().enumerate() {
            mu[q] = sol[j];
        }
        let eta = sol[a];
        let raw: Vec<f64> = (0..n).map(|k| sc.unclipped(u, &mu, eta, k)).collect();
        let w: Vec<f64> = (0..n).map(|k| if support[k] { raw[k] } else { 0.0 }).collect();

        let mut changed = false;
        // Support update.
        let new_support: Vec<bool> = raw.iter().map(|&x| x > 1e-15).collect();
        if new_support != support {
            support = new_support;
            changed = true;
        }
        // Multiplier signs: drop active constraints whose multiplier points the wrong way.
        let before = active.len();
        active.retain(|&(q, side)| mu[q] * side >= -1e-14);
        changed |= active.len() != before;
        if !changed {
            let cw = sc.apply(&w);
            let mut worst: Option<(f64, usize, f64)> = None;
            for q in 0..cw.len() {
                if active.iter().any(|&(p, _)| p == q) {
                    continue;
                }
                let v = cw[q].abs() - sc.d[q];
                if v > 1e-13 && worst.is_none_or(|x| v > x.0) {
                    worst = Some((v, q, cw[q].signum()));
                }
            }
            if let Some((_, q, side)) = worst {
                active.push((q, side));
                changed = true;
            }
        }
        let w_clean: Vec<f64> = w.iter().map(|&x| x.max(0.0)).collect();
        let residual = kkt_residual(sc, u, &w_clean, &mu);
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            best = Some(Candidate {
                w: w_clean,
                mu: mu.clone(),
                residual,
            });
        }
        if !changed {
            break;
        }
    }
    best
}

const MAX_ITERS: usize = 20_000;
const POLISH_EVERY: usize = 25;
const FEASIBILITY_CHECK: usize = 1_000;

/// Minimum-variance weights on the controls whose weighted means of every
/// balance function lie within tolerance of the treated means.
pub fn balancing_weights(problem: &WeightProblem, eps: f64) -> Result<WeightSolution> {
    problem.check()?;
    let n = problem.controls.len();
    let u = 1.0 / n as f64;
    let sc = Scaled::new(problem);
    let qn = sc.c.len();

    let finish = |cand: Candidate, iterations: usize| -> WeightSolution {
        let mut w = cand.w;
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let slacks = (0..problem.targets.len())
            .map(|q| {
                let m: f64 = problem.values[q].iter().zip(&w).map(|(a, b)| a * b).sum();
                problem.tolerances[q] - (m - problem.targets[q]).abs()
            })
            .collect();
        let mut multipliers = vec![0.0; problem.targets.len()];
        for (j, &q) in sc.rows.iter().enumerate() {
            multipliers[q] = cand.mu[j] / sc.scale[j];
        }
        let objective = w.iter().map(|x| (x - u).powi(2)).sum();
        let kkt = kkt_residual(&sc, u, &w, &cand.mu);
        WeightSolution {
            controls: problem.controls.clone(),
            weights: w,
            objective,
            slacks,
            multipliers,
            kkt_residual: kkt,
            iterations,
        }
    };

    if qn == 0 {
        let cand = Candidate {
            w: vec![u; n],
            mu: Vec::new(),
            residual: 0.0,
        };
        return Ok(finish(cand, 0));
    }

    // Lipschitz constant of the dual gradient: ||C||^2 / 2.
    let cm = DMatrix::from_fn(qn, n, |q, k| sc.c[q][k]);
    let lip = (&cm * cm.transpose()).symmetric_eigenvalues().max().max(1e-300) / 2.0;
    let step = 1.0 / lip;
    let w_of = |nu: &[f64]| {
        let v: Vec<f64> = (0..n)
            .map(|k| u - sc.c.iter().zip(nu).map(|(row, m)| row[k] * m).sum::<f64>() / 2.0)
            .collect();
        project_simplex(&v)
    };

    let mut nu = vec![0.0; qn];
    let mut y = nu.clone();
    let mut t = 1.0f64;
    let mut best: Option<Candidate> = None;
    let mut iterations = 0;
    for it in 0..MAX_ITERS {
        iterations = it + 1;
        let w = w_of(&y);
        let g = sc.apply(&w);
        let next: Vec<f64> = (0..qn).map(|q| soft(y[q] + step * g[q], step * sc.d[q])).collect();
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        // Restart the momentum when the step points against it.
        let restart = (0..qn).map(|q| (next[q] - nu[q]) * (y[q] - next[q])).sum::<f64>() > 0.0;
        if restart {
            y = next.clone();
            t = 1.0;
        } else {
            y = (0..qn).map(|q| next[q] + (t - 1.0) / t_next * (next[q] - nu[q])).collect();
            t = t_next;
        }
        nu = next;

        if it % POLISH_EVERY == 0 || it + 1 == MAX_ITERS {
            let w = w_of(&nu);
            let active: Vec<(usize, f64)> = (0..qn).filter(|&q| nu[q] != 0.0).map(|q| (q, nu[q].signum())).collect();
            let support: Vec<bool> = w.iter().map(|&x| x > 0.0).collect();
            if let Some(c) = polish(&sc, u, n, active, support) {
                if best.as_ref().is_none_or(|b| c.residual < b.residual) {
                    best = Some(c);
                }
            }
            if best.as_ref().is_some_and(|b| b.residual <= eps) {
                break;
            }
        }
        if it + 1 == FEASIBILITY_CHECK {
            if let Some(cert) = infeasibility(problem, &sc, n) {
                return Err(cert);
            }
        }
    }
    if let Some(b) = best.as_ref().filter(|b| b.residual <= eps) {
        return Ok(finish(b.clone(), iterations));
    }
    if iterations < FEASIBILITY_CHECK {
        if let Some(cert) = infeasibility(problem, &sc, n) {
            return Err(cert);
        }
    }
    let b = best.unwrap_or(Candidate {
        w: w_of(&nu),
        mu: nu.clone(),
        residual: f64::INFINITY,
    });
    Ok(finish(b, iterations))
}

/// Feasibility phase: minimize the squared constraint violation over the
/// simplex. Returns a certificate when the minimum is positive.
fn infeasibility(problem: &WeightProblem, sc: &Scaled, n: usize) -> Option<Error> {
    let qn = sc.c.len();
    let viol = |cw: &[f64]| -> Vec<f64> { (0..qn).map(|q| cw[q].signum() * (cw[q].abs() - sc.d[q]).max(0.0)).collect() };
    let cm = DMatrix::from_fn(qn, n, |q, k| sc.c[q][k]);
    let lip = 2.0 * (&cm * cm.transpose()).symmetric_eigenvalues().max().max(1e-300);
    let mut w = vec![1.0 / n as f64; n];
    let mut y = w.clone();
    let mut t = 1.0f64;
    let mut last = f64::INFINITY;
    for it in 0..MAX_ITERS {
        let v = viol(&sc.apply(&y));
        let grad: Vec<f64> = (0..n).map(|k| 2.0 * (0..qn).map(|q| v[q] * sc.c[q][k]).sum::<f64>()).collect();
        let next = project_simplex(&(0..n).map(|k| y[k] - grad[k] / lip).collect::<Vec<_>>());
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = (0..n).map(|k| next[k] + (t - 1.0) / t_next * (next[k] - w[k])).collect();
        t = t_next;
        w = next;
        let vw = viol(&sc.apply(&w));
        if vw.iter().all(|x| x.abs() <= 1e-12) {
            return None;
        }
        if it % 200 == 199 {
            let f: f64 = vw.iter().map(|x| x * x).sum();
            if last - f <= 1e-10 * f {
                break;
            }
            last = f;
        }
    }
    let v = viol(&sc.apply(&w));
    let violated: Vec<(String, f64)> = (0..qn)
        .filter(|&j| v[j].abs() > 1e-9)
        .map(|j| (problem.names[sc.rows[j]].clone(), v[j].abs() * sc.scale[j]))
        .collect();
    if violated.is_empty() {
        return None;
    }
    let max_violation = violated.iter().map(|x| x.1).fold(0.0, f64::max);
    Some(Error::Infeasible {
        violated: violated.into_iter().map(|x| x.0).collect(),
        max_violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;
    use proptest::prelude::*;
    use rand::Rng;

    fn problem(values: Vec<Vec<f64>>, targets: Vec<f64>, tolerances: Vec<f64>) -> WeightProblem {
        let n = values[0].len();
        WeightProblem {
            controls: (0..n).collect(),
            names: (0..targets.len()).map(|q| format!("b{q}")).collect(),
            values,
            targets,
            tolerances,
        }
    }

    /// Optimum by enumerating supports and constraint-activity patterns and
    /// solving each equality-constrained QP in closed form.
    fn oracle(p: &WeightProblem) -> Option<f64> {
        let n = p.controls.len();
        let q = p.targets.len();
        let u = 1.0 / n as f64;
        let mut best: Option<f64> = None;
        for mask in 1u32..(1 << n) {
            let s: Vec<usize> = (0..n).filter(|&k| mask >> k & 1 == 1).collect();
            for pattern in 0..3usize.pow(q as u32) {
                let mut rows: Vec<(Vec<f64>, f64)> = vec![(vec![1.0; s.len()], 1.0)];
                let mut code = pattern;
                for j in 0..q {
                    let side = code % 3;
                    code /= 3;
                    if side > 0 {
                        let b = p.targets[j] + if side == 1 { p.tolerances[j] } else { -p.tolerances[j] };
                        rows.push((s.iter().map(|&k| p.values[j][k]).collect(), b));
                    }
                }
                // Projection of u onto {A w = b}: w = u + A'(AA')^+ (b - A u).
                let a = DMatrix::from_fn(rows.len(), s.len(), |r, c| rows[r].0[c]);
                let b = DVector::from_fn(rows.len(), |r, _| rows[r].1);
                let uu = DVector::from_element(s.len(), u);
                let gram = &a * a.transpose();
                let Ok(z) = gram.svd(true, true).solve(&(&b - &a * &uu), 1e-12) else { continue };
                let ws = &uu + a.transpose() * z;
                if (&a * &ws - &b).amax() > 1e-9 || ws.iter().any(|&x| x < -1e-12) {
                    continue;
                }
                let mut w = vec![0.0; n];
                for (i, &k) in s.iter().enumerate() {
                    w[k] = ws[i];
                }
                let ok = (0..q).all(|j| {
                    let m: f64 = p.values[j].iter().zip(&w).map(|(a, b)| a * b).sum();
                    (m - p.targets[j]).abs() <= p.tolerances[j] + 1e-9
                });
                if ok {
                    let obj: f64 = w.iter().map(|x| (x - u).powi(2)).sum();
                    if best.is_none_or(|b| obj < b) {
                        best = Some(obj);
                    }
                }
            }
        }
        best
    }

    #[test]
    fn identical_controls_get_uniform_weights() {
        let p = problem(vec![vec![2.0; 4]], vec![2.0], vec![0.0]);
        let s = balancing_weights(&p, DEFAULT_KKT_TOLERANCE).unwrap();
        for w in &s.weights {
            assert!((w - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn equality_pins_weights() {
        let p = problem(vec![vec![0.0, 1.0]], vec![0.8], vec![0.0]);
        let s = balancing_weights(&p, DEFAULT_KKT_TOLERANCE).unwrap();
        assert!((s.weights[0] - 0.2).abs() < 1e-10 && (s.weights[1] - 0.8).abs() < 1e-10);
        assert!(s.kkt_residual <= 1e-8);
    }

    #[test]
    fn infeasible_problem_returns_certificate() {
        let p = problem(vec![vec![0.0, 1.0, 0.5], vec![1.0, 1.0, 1.0]], vec![2.0, 1.0], vec![0.1, 0.0]);
        match balancing_weights(&p, DEFAULT_KKT_TOLERANCE) {
            Err(Error::Infeasible { violated, max_violation }) => {
                assert_eq!(violated, vec!["b0".to_string()]);
                assert!((max_violation - 0.9).abs() < 1e-6);
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn agrees_with_active_set_enumeration() {
        let mut rng = stats::stream_rng(21, 0);
        let mut feasible = 0;
        for _ in 0..120 {
            let q = rng.random_range(1..=2);
            let values: Vec<Vec<f64>> = (0..q).map(|_| (0..5).map(|_| rng.random::<f64>() * 2.0).collect()).collect();
            let targets: Vec<f64> = (0..q).map(|_| 0.3 + rng.random::<f64>() * 1.4).collect();
            let tolerances: Vec<f64> = (0..q).map(|_| rng.random::<f64>() * 0.2).collect();
            let p = problem(values, targets, tolerances);
            match (oracle(&p), balancing_weights(&p, DEFAULT_KKT_TOLERANCE)) {
                (Some(o), Ok(s)) => {
                    feasible += 1;
                    assert!((s.objective - o).abs() < 1e-6, "{} vs {o}", s.objective);
                    assert!(s.kkt_residual <= 1e-8, "residual {}", s.kkt_residual);
                    assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                    assert!((s.recomputed_objective() - s.objective).abs() < 1e-10);
                    assert!(s.slacks.iter().all(|&x| x >= -1e-9));
                }
                (None, Err(Error::Infeasible { .. })) => {}
                (o, s) => panic!("oracle {o:?} vs solver {s:?}"),
            }
        }
        assert!(feasible > 40);
    }

    #[test]
    fn larger_problem_converges() {
        let mut rng = stats::stream_rng(5, 0);
        let n = 800;
        let values: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
        let p = problem(values, vec![0.55, 0.45, 0.52, 0.5], vec![0.005; 4]);
        let s = balancing_weights(&p, DEFAULT_KKT_TOLERANCE).unwrap();
        assert!(s.kkt_residual <= 1e-8);
        assert!(s.slacks.iter().all(|&x| x >= -1e-9));
        let uniform = 1.0 / n as f64;
        assert!(s.objective > 0.0 && s.weights.iter().any(|&w| (w - uniform).abs() > 1e-6));
    }

    proptest! {
        #[test]
        fn simplex_projection_is_on_simplex(v in prop::collection::vec(-5.0f64..5.0, 1..20)) {
            let w = project_simplex(&v);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn uniform_feasible_means_uniform_optimal(vals in prop::collection::vec(0.0f64..1.0, 2..8), slack in 0.0f64..0.5) {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let p = problem(vec![vals.clone()], vec![m], vec![slack]);
            let s = balancing_weights(&p, DEFAULT_KKT_TOLERANCE).unwrap();
            prop_assert!(s.objective < 1e-20);
        }
    }
}
