//! Cardinality matching: the largest pair matching, exact on the stratum
//! keys, whose matched groups satisfy mean-balance constraints. Also the
//! distance-minimizing re-pairing and the target-population variant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::balance::{BalanceFunctionSet, DistanceMatrix};
use crate::model::{BalanceEntry, BalanceSide, DesignView, MatchedPair, MatchedSample, SolveStatus};
use crate::{Error, Result};

/// What the matched-group means are balanced against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "means", rename_all = "snake_case")]
pub enum BalanceReference {
    /// Mean over all treated and control units of the problem.
    PooledMean,
    /// Means of a target population.
    TargetMean(Vec<f64>),
    /// Matched treated mean minus matched control mean.
    GroupDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchProblem {
    pub treated: Vec<usize>,
    pub controls: Vec<usize>,
    /// Exact-match key of every unit, indexed like the frame.
    pub keys: Vec<String>,
    pub names: Vec<String>,
    /// `values[q][i]` is balance function `q` of frame unit `i`.
    pub values: Vec<Vec<f64>>,
    pub tolerances: Vec<f64>,
    pub reference: BalanceReference,
    /// Instances with more decision variables are solved heuristically.
    pub exact_threshold: usize,
    pub node_limit: usize,
}

pub const DEFAULT_EXACT_THRESHOLD: usize = 5000;
pub const DEFAULT_NODE_LIMIT: usize = 2000;

impl MatchProblem {
    pub fn from_view(
        view: &DesignView,
        treated: Vec<usize>,
        controls: Vec<usize>,
        functions: &BalanceFunctionSet,
        reference: BalanceReference,
    ) -> Result<Self> {
        let p = MatchProblem {
            treated,
            controls,
            keys: (0..view.len()).map(|i| view.exact_key(i)).collect(),
            names: functions.names(),
            values: functions.evaluate(view)?,
            tolerances: functions.tolerances(),
            reference,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
            node_limit: DEFAULT_NODE_LIMIT,
        };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.keys.len();
        if self.values.len() != self.tolerances.len() || self.names.len() != self.tolerances.len() {
            return Err(Error::InvalidArgument("balance names, values and tolerances differ in length".into()));
        }
        if self.values.iter().any(|v| v.len() != n) {
            return Err(Error::InvalidArgument("balance values must cover every unit".into()));
        }
        if self.tolerances.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::InvalidArgument("tolerances must be nonnegative".into()));
        }
        let mut seen = vec![0u8; n];
        for (&i, side) in self.treated.iter().map(|i| (i, 1)).chain(self.controls.iter().map(|i| (i, 2))) {
            if i >= n {
                return Err(Error::InvalidArgument(format!("unit index {i} out of range")));
            }
            if seen[i] != 0 {
                return Err(Error::InvalidArgument(format!(
                    "unit {i} listed twice{}",
                    if seen[i] != side { " (treated and control)" } else { "" }
                )));
            }
            seen[i] = side;
        }
        if let BalanceReference::TargetMean(m) = &self.reference {
            if m.len() != self.tolerances.len() || m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument("target means must be finite, one per function".into()));
            }
        }
        Ok(())
    }

    fn reference_means(&self) -> Option<Vec<f64>> {
        match &self.reference {
            BalanceReference::PooledMean => {
                let all: Vec<usize> = self.treated.iter().chain(&self.controls).copied().collect();
                Some(
                    self.values
                        .iter()
                        .map(|v| all.iter().map(|&i| v[i]).sum::<f64>() / all.len().max(1) as f64)
                        .collect(),
                )
            }
            BalanceReference::TargetMean(m) => Some(m.clone()),
            BalanceReference::GroupDifference => None,
        }
    }

    /// Achieved imbalance of every constraint for the given matched groups.
    pub fn balance_report(&self, treated: &[usize], controls: &[usize]) -> Vec<BalanceEntry> {
        let mean = |v: &[f64], idx: &[usize]| {
            if idx.is_empty() {
                None
            } else {
                Some(idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64)
            }
        };
        let mut out = Vec::new();
        let refs = self.reference_means();
        for q in 0..self.values.len() {
            let (mt, mc) = (mean(&self.values[q], treated), mean(&self.values[q], controls));
            let entry = |side, imbalance: f64| BalanceEntry {
                function: self.names[q].clone(),
                side,
                imbalance,
                tolerance: self.tolerances[q],
            };
            match &refs {
                Some(r) => {
                    out.push(entry(BalanceSide::Treated, mt.map_or(0.0, |m| (m - r[q]).abs())));
                    out.push(entry(BalanceSide::Control, mc.map_or(0.0, |m| (m - r[q]).abs())));
                }
                None => out.push(entry(
                    BalanceSide::Difference,
                    match (mt, mc) {
                        (Some(a), Some(b)) => (a - b).abs(),
                        _ => 0.0,
                    },
                )),
            }
        }
        out
    }

    fn is_balanced(&self, treated: &[usize], controls: &[usize]) -> bool {
        self.balance_report(treated, controls)
            .iter()
            .all(|b| b.imbalance <= b.tolerance + BALANCE_EPS)
    }
}

const BALANCE_EPS: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Linear form: every balance constraint becomes `sum_v a[r][v] x_v <= 0` over
// the selected treated and control units, with per-stratum equal counts.

struct Linear {
    treated: Vec<bool>,
    unit: Vec<usize>,
    /// `coef[v * rows + r]`, rows scaled to unit max-abs.
    coef: Vec<f64>,
    rows: usize,
    strata: Vec<(Vec<usize>, Vec<usize>)>,
    stratum_keys: Vec<String>,
}

impl Linear {
    fn new(p: &MatchProblem) -> Self {
        let mut by_key: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for &t in &p.treated {
            by_key.entry(&p.keys[t]).or_default().0.push(t);
        }
        for &c in &p.controls {
            by_key.entry(&p.keys[c]).or_default().1.push(c);
        }
        let mut treated = Vec::new();
        let mut unit = Vec::new();
        let mut strata = Vec::new();
        let mut stratum_keys = Vec::new();
        for (key, (ts, cs)) in by_key {
            if ts.is_empty() || cs.is_empty() {
                continue;
            }
            let mut tv = Vec::new();
            let mut cv = Vec::new();
            for &t in &ts {
                tv.push(unit.len());
                treated.push(true);
                unit.push(t);
            }
            for &c in &cs {
                cv.push(unit.len());
                treated.push(false);
                unit.push(c);
            }
            strata.push((tv, cv));
            stratum_keys.push(key.to_string());
        }

        // Columns of coefficients for treated / control variables per row.
        let refs = p.reference_means();
        let mut rows_t: Vec<Box<dyn Fn(usize) -> f64 + '_>> = Vec::new();
        let mut rows_c: Vec<Box<dyn Fn(usize) -> f64 + '_>> = Vec::new();
        for q in 0..p.values.len() {
            let d = p.tolerances[q];
            if !d.is_finite() {
                continue;
            }
            let v = &p.values[q];
            match &refs {
                Some(r) => {
                    let r = r[q];
                    rows_t.push(Box::new(move |i| v[i] - r - d));
                    rows_c.push(Box::new(|_| 0.0));
                    rows_t.push(Box::new(move |i| r - d - v[i]));
                    rows_c.push(Box::new(|_| 0.0));
                    rows_t.push(Box::new(|_| 0.0));
                    rows_c.push(Box::new(move |i| v[i] - r - d));
                    rows_t.push(Box::new(|_| 0.0));
                    rows_c.push(Box::new(move |i| r - d - v[i]));
                }
                None => {
                    rows_t.push(Box::new(move |i| v[i] - d));
                    rows_c.push(Box::new(move |i| -v[i]));
                    rows_t.push(Box::new(move |i| -v[i] - d));
                    rows_c.push(Box::new(move |i| v[i]));
                }
            }
        }
        let rows = rows_t.len();
        let nv = unit.len();
        let mut coef = vec![0.0; nv * rows];
        for v in 0..nv {
            for r in 0..rows {
                coef[v * rows + r] = if treated[v] { rows_t[r](unit[v]) } else { rows_c[r](unit[v]) };
            }
        }
        for r in 0..rows {
            let m = (0..nv).map(|v| coef[v * rows + r].abs()).fold(0.0, f64::max);
            if m > 0.0 {
                for v in 0..nv {
                    coef[v * rows + r] /= m;
                }
            }
        }
        Linear {
            treated,
            unit,
            coef,
            rows,
            strata,
            stratum_keys,
        }
    }

    fn nvars(&self) -> usize {
        self.unit.len()
    }

    fn a(&self, v: usize) -> &[f64] {
        &self.coef[v * self.rows..(v + 1) * self.rows]
    }

    fn lhs(&self, x: &[bool]) -> Vec<f64> {
        let mut g = vec![0.0; self.rows];
        for v in (0..self.nvars()).filter(|&v| x[v]) {
            for (gr, a) in g.iter_mut().zip(self.a(v)) {
                *gr += a;
            }
        }
        g
    }

    fn cardinality(&self, x: &[bool]) -> usize {
        (0..self.nvars()).filter(|&v| x[v] && self.treated[v]).count()
    }

    fn groups(&self, x: &[bool]) -> (Vec<usize>, Vec<usize>) {
        let t = (0..self.nvars()).filter(|&v| x[v] && self.treated[v]).map(|v| self.unit[v]).collect();
        let c = (0..self.nvars()).filter(|&v| x[v] && !self.treated[v]).map(|v| self.unit[v]).collect();
        (t, c)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Fix {
    Free,
    In,
    Out,
}

struct Inner {
    value: f64,
    x: Vec<bool>,
    g: Vec<f64>,
}

/// Lagrangian relaxation: with multipliers `lambda`, the problem separates by
/// stratum into choosing `k` and the `k` best-scoring units on each side.
fn lagrangian(lin: &Linear, lambda: &[f64], fix: &[Fix]) -> Option<Inner> {
    let nv = lin.nvars();
    let score: Vec<f64> = (0..nv)
        .map(|v| {
            let base = if lin.treated[v] { 1.0 } else { 0.0 };
            base - lin.a(v).iter().zip(lambda).map(|(a, l)| a * l).sum::<f64>()
        })
        .collect();
    let mut x = vec![false; nv];
    let mut value = 0.0;
    for (ts, cs) in &lin.strata {
        let side = |vars: &[usize]| {
            let forced: Vec<usize> = vars.iter().copied().filter(|&v| fix[v] == Fix::In).collect();
            let mut free: Vec<usize> = vars.iter().copied().filter(|&v| fix[v] == Fix::Free).collect();
            free.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
            (forced, free)
        };
        let (ft, free_t) = side(ts);
        let (fc, free_c) = side(cs);
        let lo = ft.len().max(fc.len());
        let hi = (ft.len() + free_t.len()).min(fc.len() + free_c.len());
        if lo > hi {
            return None;
        }
        let base: f64 = ft.iter().chain(&fc).map(|&v| score[v]).sum();
        let mut acc = base;
        for &v in free_t.iter().take(lo - ft.len()).chain(free_c.iter().take(lo - fc.len())) {
            acc += score[v];
        }
        let (mut best, mut best_k) = (acc, lo);
        for k in lo + 1..=hi {
            acc += score[free_t[k - 1 - ft.len()]] + score[free_c[k - 1 - fc.len()]];
            if acc >= best - 1e-12 {
                best = acc;
                best_k = k;
            }
        }
        value += best;
        for &v in ft.iter().chain(&fc) {
            x[v] = true;
        }
        for &v in free_t.iter().take(best_k - ft.len()).chain(free_c.iter().take(best_k - fc.len())) {
            x[v] = true;
        }
    }
    let g = lin.lhs(&x);
    Some(Inner { value, x, g })
}

/// Subgradient descent on the Lagrangian dual; returns the best bound, its
/// multipliers and inner solution, or `None` when the fixings are infeasible.
fn dual_bound(lin: &Linear, lambda0: &[f64], fix: &[Fix], target: f64, iters: usize) -> Option<(f64, Vec<f64>, Inner)> {
    let mut lambda = lambda0.to_vec();
    let mut inner = lagrangian(lin, &lambda, fix)?;
    let mut best = (inner.value, lambda.clone());
    let mut best_inner = None;
    let mut theta = 1.0;
    let mut stall = 0;
    for _ in 0..iters {
        if best.0 < target || lin.rows == 0 {
            break;
        }
        let norm2: f64 = inner
            .g
            .iter()
            .zip(&lambda)
            .map(|(g, l)| if *l <= 0.0 && *g < 0.0 { 0.0 } else { g * g })
            .sum();
        if norm2 <= 1e-18 {
            break;
        }
        let step = theta * (inner.value - target).max(1e-3) / norm2;
        for (l, g) in lambda.iter_mut().zip(&inner.g) {
            *l = (*l + step * g).max(0.0);
        }
        let next = lagrangian(lin, &lambda, fix)?;
        if next.value < best.0 - 1e-9 {
            best = (next.value, lambda.clone());
            best_inner = None;
            stall = 0;
        } else {
            stall += 1;
            if stall >= 5 {
                theta *= 0.5;
                stall = 0;
                if theta < 1e-4 {
                    break;
                }
            }
        }
        inner = next;
        if best_inner.is_none() && (inner.value - best.0).abs() <= 1e-9 {
            best_inner = Some(Inner {
                value: inner.value,
                x: inner.x.clone(),
                g: inner.g.clone(),
            });
        }
    }
    let inner = match best_inner {
        Some(i) => i,
        None => lagrangian(lin, &best.1, fix)?,
    };
    Some((best.0, best.1, inner))
}

/// Greedy repair: drop pairs until balanced, then add back pairs that keep
/// balance.
fn repair(lin: &Linear, p: &MatchProblem, mut x: Vec<bool>) -> Vec<bool> {
    // Equalize per-stratum counts by dropping the worst-scoring extras.
    for (ts, cs) in &lin.strata {
        let nt = ts.iter().filter(|&&v| x[v]).count();
        let nc = cs.iter().filter(|&&v| x[v]).count();
        let (extra, vars) = if nt > nc { (nt - nc, ts) } else { (nc - nt, cs) };
        for &v in vars.iter().filter(|&&v| x[v]).take(extra).collect::<Vec<_>>().iter() {
            x[*v] = false;
        }
    }
    let violation = |g: &[f64]| g.iter().map(|v| v.max(0.0)).sum::<f64>();
    let mut g = lin.lhs(&x);
    loop {
        let (t, c) = lin.groups(&x);
        if t.is_empty() || p.is_balanced(&t, &c) {
            break;
        }
        let v0 = violation(&g);
        let push = |v: usize, sign: f64, g: &[f64]| -> f64 { lin.a(v).iter().zip(g).filter(|(_, g)| **g > 0.0).map(|(a, _)| sign * a).sum() };
        // Best swap within a side of a stratum, over a short candidate list.
        let mut best_swap: Option<(f64, usize, usize)> = None;
        for (ts, cs) in &lin.strata {
            for vars in [ts, cs] {
                let mut sel: Vec<usize> = vars.iter().copied().filter(|&v| x[v]).collect();
                let mut uns: Vec<usize> = vars.iter().copied().filter(|&v| !x[v]).collect();
                if sel.is_empty() || uns.is_empty() {
                    continue;
                }
                sel.sort_by(|&a, &b| push(b, 1.0, &g).total_cmp(&push(a, 1.0, &g)).then(a.cmp(&b)));
                uns.sort_by(|&a, &b| push(a, 1.0, &g).total_cmp(&push(b, 1.0, &g)).then(a.cmp(&b)));
                for &u in sel.iter().take(SWAP_POOL) {
                    for &w in uns.iter().take(SWAP_POOL) {
                        let after: Vec<f64> = (0..lin.rows).map(|r| g[r] - lin.a(u)[r] + lin.a(w)[r]).collect();
                        let gain = v0 - violation(&after);
                        if gain > 1e-12 && best_swap.is_none_or(|b| gain > b.0) {
                            best_swap = Some((gain, u, w));
                        }
                    }
                }
            }
        }
        if let Some((_, u, w)) = best_swap {
            x[u] = false;
            x[w] = true;
            for r in 0..lin.rows {
                g[r] += lin.a(w)[r] - lin.a(u)[r];
            }
            continue;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for (ts, cs) in &lin.strata {
            let pick = |vars: &[usize]| {
                vars.iter()
                    .copied()
                    .filter(|&v| x[v])
                    .max_by(|&a, &b| push(a, 1.0, &g).total_cmp(&push(b, 1.0, &g)).then(b.cmp(&a)))
            };
            if let (Some(tv), Some(cv)) = (pick(ts), pick(cs)) {
                let after: Vec<f64> = (0..lin.rows).map(|r| g[r] - lin.a(tv)[r] - lin.a(cv)[r]).collect();
                let gain = v0 - violation(&after);
                if best.is_none_or(|b| gain > b.0 + 1e-15) {
                    best = Some((gain, tv, cv));
                }
            }
        }
        let Some((_, tv, cv)) = best else { break };
        x[tv] = false;
        x[cv] = false;
        for r in 0..lin.rows {
            g[r] -= lin.a(tv)[r] + lin.a(cv)[r];
        }
    }
    // Add phase.
    loop {
        let mut added = false;
        for (ts, cs) in &lin.strata {
            loop {
                let cand = |vars: &[usize], g: &[f64]| {
                    vars.iter().copied().filter(|&v| !x[v]).min_by(|&a, &b| {
                        let fa: f64 = (0..lin.rows).map(|r| (g[r] + lin.a(a)[r]).max(0.0)).sum();
                        let fb: f64 = (0..lin.rows).map(|r| (g[r] + lin.a(b)[r]).max(0.0)).sum();
                        fa.total_cmp(&fb).then(a.cmp(&b))
                    })
                };
                let Some(tv) = cand(ts, &g) else { break };
                let gt: Vec<f64> = (0..lin.rows).map(|r| g[r] + lin.a(tv)[r]).collect();
                let Some(cv) = cand(cs, &gt) else { break };
                x[tv] = true;
                x[cv] = true;
                let (t, c) = lin.groups(&x);
                if p.is_balanced(&t, &c) {
                    for r in 0..lin.rows {
                        g[r] = gt[r] + lin.a(cv)[r];
                    }
                    added = true;
                } else {
                    x[tv] = false;
                    x[cv] = false;
                    break;
                }
            }
        }
        if !added {
            break;
        }
    }
    x
}

fn pairs_from_selection(lin: &Linear, x: &[bool]) -> Vec<MatchedPair> {
    let mut pairs = Vec::new();
    for (s, (ts, cs)) in lin.strata.iter().enumerate() {
        let t: Vec<usize> = ts.iter().filter(|&&v| x[v]).map(|&v| lin.unit[v]).collect();
        let c: Vec<usize> = cs.iter().filter(|&&v| x[v]).map(|&v| lin.unit[v]).collect();
        for (a, b) in t.into_iter().zip(c) {
            pairs.push(MatchedPair {
                treated: a,
                control: b,
                stratum: lin.stratum_keys[s].clone(),
            });
        }
    }
    pairs
}

const SWAP_POOL: usize = 6;
const ROOT_ITERS: usize = 300;
const NODE_ITERS: usize = 25;

/// Maximum-cardinality pair matching, exact on the stratum keys, subject to
/// the mean-balance constraints of `problem`.
pub fn cardinality_match(problem: &MatchProblem) -> Result<MatchedSample> {
    problem.check()?;
    if problem.treated.is_empty() || problem.controls.is_empty() {
        return Err(Error::InsufficientData("matching needs at least one treated and one control unit".into()));
    }
    let lin = Linear::new(problem);
    let nv = lin.nvars();
    let mut notes = Vec::new();
    if lin.strata.is_empty() {
        notes.push("no exact-match stratum contains both treated and control units".to_string());
        return Ok(MatchedSample {
            pairs: Vec::new(),
            balance: problem.balance_report(&[], &[]),
            status: SolveStatus::Optimal,
            gap: 0.0,
            upper_bound: 0.0,
            nodes: 0,
            notes,
        });
    }

    let free = vec![Fix::Free; nv];
    let zero = vec![0.0; lin.rows];
    let mut best_x = vec![false; nv];
    let mut best_card = 0usize;
    let consider = |x: Vec<bool>, best_x: &mut Vec<bool>, best_card: &mut usize| {
        let card = lin.cardinality(&x);
        if card > *best_card {
            let (t, c) = lin.groups(&x);
            if p_balanced(problem, &t, &c) {
                *best_card = card;
                *best_x = x;
            }
        }
    };
    fn p_balanced(p: &MatchProblem, t: &[usize], c: &[usize]) -> bool {
        p.is_balanced(t, c)
    }

    let all = lagrangian(&lin, &zero, &free).expect("unfixed problem is feasible");
    consider(repair(&lin, problem, all.x.clone()), &mut best_x, &mut best_card);
    let (root_bound, root_lambda, root_inner) =
        dual_bound(&lin, &zero, &free, best_card as f64 + 1.0 - 1e-9, ROOT_ITERS).expect("root feasible");
    consider(root_inner.x.clone(), &mut best_x, &mut best_card);
    consider(repair(&lin, problem, root_inner.x.clone()), &mut best_x, &mut best_card);
    let root_ub = (root_bound + 1e-7).floor().min(all.value.round()).max(best_card as f64);

    let mut nodes = 1usize;
    let mut global_ub = root_ub;
    let mut limit_hit = false;

    if (best_card as f64) < root_ub {
        if nv > problem.exact_threshold {
            limit_hit = true;
            notes.push(format!(
                "{nv} decision variables exceed the exact threshold {}; returning the heuristic incumbent",
                problem.exact_threshold
            ));
        } else {
            // Depth-first branch and bound.
            struct Node {
                fix: Vec<Fix>,
                lambda: Vec<f64>,
            }
            let mut stack = vec![Node {
                fix: free.clone(),
                lambda: root_lambda.clone(),
            }];
            let mut open_bounds: Vec<f64> = Vec::new();
            while let Some(node) = stack.pop() {
                if nodes >= problem.node_limit {
                    limit_hit = true;
                    open_bounds.push(global_ub);
                    break;
                }
                nodes += 1;
                let target = best_card as f64 + 1.0 - 1e-9;
                let Some((bound, lambda, inner)) = dual_bound(&lin, &node.lambda, &node.fix, target, NODE_ITERS) else {
                    continue;
                };
                consider(inner.x.clone(), &mut best_x, &mut best_card);
                if nodes % 64 == 0 {
                    consider(repair(&lin, problem, inner.x.clone()), &mut best_x, &mut best_card);
                }
                if bound < best_card as f64 + 1.0 - 1e-9 {
                    continue;
                }
                // Branch variable: the free selected unit contributing most to
                // the most violated row, else the free unit with the largest
                // weighted coefficient.
                let worst = (0..lin.rows).max_by(|&a, &b| inner.g[a].total_cmp(&inner.g[b]));
                let pick = match worst {
                    Some(r) if inner.g[r] > 1e-12 => (0..nv)
                        .filter(|&v| node.fix[v] == Fix::Free && inner.x[v])
                        .max_by(|&a, &b| lin.a(a)[r].total_cmp(&lin.a(b)[r]).then(b.cmp(&a))),
                    _ => (0..nv).filter(|&v| node.fix[v] == Fix::Free).max_by(|&a, &b| {
                        let wa: f64 = lin.a(a).iter().zip(&lambda).map(|(x, l)| (x * l).abs()).sum();
                        let wb: f64 = lin.a(b).iter().zip(&lambda).map(|(x, l)| (x * l).abs()).sum();
                        wa.total_cmp(&wb).then(b.cmp(&a))
                    }),
                };
                let Some(v) = pick else { continue };
                let mut fin = node.fix.clone();
                fin[v] = Fix::In;
                let mut fout = node.fix;
                fout[v] = Fix::Out;
                stack.push(Node {
                    fix: fin,
                    lambda: lambda.clone(),
                });
                stack.push(Node { fix: fout, lambda });
            }
            if limit_hit {
                notes.push(format!("node limit {} reached", problem.node_limit));
            } else {
                global_ub = best_card as f64;
            }
        }
    }
    if !limit_hit {
        global_ub = global_ub.min(best_card as f64).max(best_card as f64);
    }
    let pairs = pairs_from_selection(&lin, &best_x);
    let (t, c) = lin.groups(&best_x);
    let gap = (global_ub - best_card as f64).max(0.0);
    Ok(MatchedSample {
        balance: problem.balance_report(&t, &c),
        pairs,
        status: if gap == 0.0 { SolveStatus::Optimal } else { SolveStatus::Feasible },
        gap,
        upper_bound: global_ub,
        nodes,
        notes,
    })
}

/// Target-population summary for representative matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPopulation {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl TargetPopulation {
    /// Means and SDs of every balance function over `units`.
    pub fn from_units(values: &[Vec<f64>], units: &[usize]) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::InsufficientData("target population is empty".into()));
        }
        let cols: Vec<Vec<f64>> = values.iter().map(|v| units.iter().map(|&i| v[i]).collect()).collect();
        Ok(TargetPopulation {
            means: cols.iter().map(|c| crate::stats::mean(c)).collect(),
            sds: cols.iter().map(|c| crate::stats::sd(c)).collect(),
        })
    }
}

pub const DEFAULT_TARGET_CAP: f64 = 0.05;

/// Cardinality matching balanced around a target population: each matched
/// group's mean within `cap` target SDs of the target mean.
pub fn representative_match(problem: &MatchProblem, target: &TargetPopulation, cap: f64) -> Result<MatchedSample> {
    if target.means.len() != problem.values.len() || target.sds.len() != problem.values.len() {
        return Err(Error::InvalidArgument("target summary must have one entry per balance function".into()));
    }
    let mut p = problem.clone();
    p.reference = BalanceReference::TargetMean(target.means.clone());
    p.tolerances = target.sds.iter().map(|s| cap * s).collect();
    cardinality_match(&p)
}

/// Minimum-cost assignment on a square cost matrix; `result[i]` is the column
/// assigned to row `i`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut ans = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}

/// Total distance of the pairs; `units[k]` is the frame index of row `k` of `d`.
pub fn total_distance(sample: &MatchedSample, units: &[usize], d: &DistanceMatrix) -> Result<f64> {
    let pos = position_map(units, d)?;
    sample
        .pairs
        .iter()
        .map(|p| match (pos.get(&p.treated), pos.get(&p.control)) {
            (Some(&a), Some(&b)) => Ok(d.get(a, b)),
            _ => Err(Error::InvalidArgument("distance matrix lacks a matched unit".into())),
        })
        .sum()
}

fn position_map(units: &[usize], d: &DistanceMatrix) -> Result<std::collections::HashMap<usize, usize>> {
    if units.len() != d.len() {
        return Err(Error::InvalidArgument("unit list and distance matrix differ in size".into()));
    }
    Ok(units.iter().enumerate().map(|(k, &u)| (u, k)).collect())
}

/// Re-pairs the matched treated and control units within each stratum to
/// minimize total distance. Matched sets, and hence balance, are unchanged.
pub fn rematch_min_distance(sample: &MatchedSample, units: &[usize], d: &DistanceMatrix) -> Result<MatchedSample> {
    if sample.pairs.is_empty() {
        return Err(Error::InsufficientData("nothing to re-match".into()));
    }
    let pos = position_map(units, d)?;
    let mut by_stratum: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for p in &sample.pairs {
        if !pos.contains_key(&p.treated) || !pos.contains_key(&p.control) {
            return Err(Error::InvalidArgument("distance matrix lacks a matched unit".into()));
        }
        let e = by_stratum.entry(&p.stratum).or_default();
        e.0.push(p.treated);
        e.1.push(p.control);
    }
    let mut pairs = Vec::with_capacity(sample.pairs.len());
    for (key, (ts, cs)) in by_stratum {
        let cost: Vec<Vec<f64>> = ts
            .iter()
            .map(|t| cs.iter().map(|c| d.get(pos[t], pos[c])).collect())
            .collect();
        let assign = hungarian(&cost);
        for (i, &j) in assign.iter().enumerate() {
            pairs.push(MatchedPair {
                treated: ts[i],
                control: cs[j],
                stratum: key.to_string(),
            });
        }
    }
    Ok(MatchedSample {
        pairs,
        ..sample.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;
    use proptest::prelude::*;
    use rand::Rng;

    fn problem(keys: Vec<&str>, t: Vec<usize>, c: Vec<usize>, values: Vec<Vec<f64>>, tol: Vec<f64>, r: BalanceReference) -> MatchProblem {
        MatchProblem {
            treated: t,
            controls: c,
            keys: keys.into_iter().map(String::from).collect(),
            names: (0..tol.len()).map(|q| format!("b{q}")).collect(),
            values,
            tolerances: tol,
            reference: r,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
            node_limit: 1_000_000,
        }
    }

    /// Largest balanced selection by enumerating every subset of both groups.
    fn brute(p: &MatchProblem) -> usize {
        let (nt, nc) = (p.treated.len(), p.controls.len());
        let mut best = 0;
        for mt in 0u32..(1 << nt) {
            let ts: Vec<usize> = (0..nt).filter(|&i| mt >> i & 1 == 1).map(|i| p.treated[i]).collect();
            if ts.len() <= best {
                continue;
            }
            for mc in 0u32..(1 << nc) {
                let cs: Vec<usize> = (0..nc).filter(|&i| mc >> i & 1 == 1).map(|i| p.controls[i]).collect();
                if cs.len() != ts.len() {
                    continue;
                }
                let mut counts: BTreeMap<&str, i32> = BTreeMap::new();
                for &i in &ts {
                    *counts.entry(&p.keys[i]).or_default() += 1;
                }
                for &i in &cs {
                    *counts.entry(&p.keys[i]).or_default() -= 1;
                }
                if counts.values().all(|&v| v == 0) && p.is_balanced(&ts, &cs) {
                    best = ts.len();
                }
            }
        }
        best
    }

    #[test]
    fn unconstrained_is_min_group_size() {
        let p = problem(
            vec!["a"; 4],
            vec![0, 1],
            vec![2, 3],
            vec![vec![1.0, 2.0, 3.0, 4.0]],
            vec![f64::INFINITY],
            BalanceReference::PooledMean,
        );
        let m = cardinality_match(&p).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.status, SolveStatus::Optimal);
    }

    #[test]
    fn tight_target_keeps_zero_units() {
        let p = problem(
            vec!["a"; 4],
            vec![0, 1],
            vec![2, 3],
            vec![vec![0.0, 10.0, 0.0, 10.0]],
            vec![0.5],
            BalanceReference::TargetMean(vec![0.0]),
        );
        let m = cardinality_match(&p).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!((m.pairs[0].treated, m.pairs[0].control), (0, 2));
    }

    #[test]
    fn pinned_target_keeps_matching_value() {
        // Target pinned to the value 3 of control unit 3 with zero tolerance.
        let p = problem(
            vec!["a"; 4],
            vec![0, 1],
            vec![2, 3],
            vec![vec![3.0, 5.0, 1.0, 3.0]],
            vec![0.0],
            BalanceReference::TargetMean(vec![3.0]),
        );
        let m = cardinality_match(&p).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!((m.pairs[0].treated, m.pairs[0].control), (0, 3));
    }

    #[test]
    fn disjoint_strata_give_empty_match() {
        let p = problem(
            vec!["a", "a", "b", "b"],
            vec![0, 1],
            vec![2, 3],
            vec![vec![0.0; 4]],
            vec![1.0],
            BalanceReference::PooledMean,
        );
        let m = cardinality_match(&p).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.notes.len(), 1);
    }

    fn random_problem(seed: u64) -> MatchProblem {
        let mut rng = stats::stream_rng(seed, 0);
        let nt = rng.random_range(1..=6);
        let nc = rng.random_range(1..=6);
        let n = nt + nc;
        let nkeys = rng.random_range(1..=2);
        let keys: Vec<String> = (0..n).map(|_| format!("k{}", rng.random_range(0..nkeys))).collect();
        let q = rng.random_range(1..=2);
        let values: Vec<Vec<f64>> = (0..q).map(|_| (0..n).map(|_| rng.random_range(0..5) as f64).collect()).collect();
        let tol: Vec<f64> = (0..q).map(|_| rng.random_range(0..4) as f64 * 0.25).collect();
        let reference = match rng.random_range(0..3) {
            0 => BalanceReference::PooledMean,
            1 => BalanceReference::GroupDifference,
            _ => BalanceReference::TargetMean((0..q).map(|_| rng.random_range(0..5) as f64 * 0.5).collect()),
        };
        MatchProblem {
            treated: (0..nt).collect(),
            controls: (nt..n).collect(),
            keys,
            names: (0..q).map(|i| format!("b{i}")).collect(),
            values,
            tolerances: tol,
            reference,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
            node_limit: 1_000_000,
        }
    }

    #[test]
    fn agrees_with_enumeration() {
        for seed in 0..200 {
            let p = random_problem(seed);
            let m = cardinality_match(&p).unwrap();
            assert_eq!(m.len(), brute(&p), "seed {seed}");
            assert_eq!(m.status, SolveStatus::Optimal);
            let (t, c) = (m.treated(), m.controls());
            assert!(p.is_balanced(&t, &c));
            for pair in &m.pairs {
                assert_eq!(p.keys[pair.treated], p.keys[pair.control]);
            }
        }
    }

    #[test]
    fn relaxing_tolerances_never_shrinks() {
        for seed in 0..60 {
            let p = random_problem(seed + 1000);
            let mut loose = p.clone();
            loose.tolerances.iter_mut().for_each(|t| *t += 0.5);
            assert!(cardinality_match(&loose).unwrap().len() >= cardinality_match(&p).unwrap().len());
        }
    }

    #[test]
    fn larger_instance_is_balanced() {
        let mut rng = stats::stream_rng(42, 0);
        let n = 400;
        let keys: Vec<String> = (0..n).map(|_| format!("s{}", rng.random_range(0..6))).collect();
        let treated: Vec<usize> = (0..n).filter(|i| i % 3 == 0).collect();
        let controls: Vec<usize> = (0..n).filter(|i| i % 3 != 0).collect();
        let values: Vec<Vec<f64>> = (0..3)
            .map(|q| {
                (0..n)
                    .map(|i| rng.random::<f64>() + if i % 3 == 0 { 0.05 * q as f64 } else { 0.0 })
                    .collect()
            })
            .collect();
        let p = MatchProblem {
            treated,
            controls,
            keys,
            names: vec!["a".into(), "b".into(), "c".into()],
            values,
            tolerances: vec![0.02; 3],
            reference: BalanceReference::PooledMean,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
            node_limit: 200,
        };
        let m = cardinality_match(&p).unwrap();
        assert!(m.upper_bound >= m.len() as f64);
        assert!(m.len() as f64 >= 0.9 * m.upper_bound, "{} of {}", m.len(), m.upper_bound);
        assert_eq!(m.status == SolveStatus::Optimal, m.gap == 0.0);
        let t: Vec<String> = m.pairs.iter().map(|p| p.stratum.clone()).collect();
        assert_eq!(t.len(), m.len());
        assert!(p.is_balanced(&m.treated(), &m.controls()));
    }

    fn perm_brute(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cost.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + rec(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost.len()])
    }

    #[test]
    fn hungarian_matches_enumeration() {
        let mut rng = stats::stream_rng(8, 0);
        for _ in 0..100 {
            let n = rng.random_range(1..=7);
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
            let a = hungarian(&cost);
            let got: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            assert!((got - perm_brute(&cost)).abs() < 1e-12);
        }
    }

    #[test]
    fn rematch_swaps_crossed_pairs() {
        let sample = MatchedSample {
            pairs: vec![
                MatchedPair { treated: 0, control: 3, stratum: "a".into() },
                MatchedPair { treated: 1, control: 2, stratum: "a".into() },
            ],
            balance: vec![],
            status: SolveStatus::Optimal,
            gap: 0.0,
            upper_bound: 2.0,
            nodes: 1,
            notes: vec![],
        };
        let pts = [0.0f64, 10.0, 0.5, 10.5];
        let d = DistanceMatrix::from_fn(4, |i, j| (pts[i] - pts[j]).abs()).unwrap();
        let units = [0, 1, 2, 3];
        let before = total_distance(&sample, &units, &d).unwrap();
        let r = rematch_min_distance(&sample, &units, &d).unwrap();
        let after = total_distance(&r, &units, &d).unwrap();
        assert_eq!(before, 20.0);
        assert_eq!(after, 1.0);
        let again = rematch_min_distance(&r, &units, &d).unwrap();
        assert_eq!(total_distance(&again, &units, &d).unwrap(), after);
        assert!(rematch_min_distance(&sample, &units[..3], &DistanceMatrix::from_fn(3, |_, _| 1.0).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn problem_round_trips(seed in 0u64..500) {
            let p = random_problem(seed);
            let s = serde_json::to_string(&p).unwrap();
            let back: MatchProblem = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn rematch_preserves_units(seed in 0u64..200) {
            let mut rng = stats::stream_rng(seed, 0);
            let k = rng.random_range(1..6);
            let pairs: Vec<MatchedPair> = (0..k)
                .map(|i| MatchedPair { treated: i, control: k + i, stratum: format!("s{}", i % 2) })
                .collect();
            let sample = MatchedSample { pairs, balance: vec![], status: SolveStatus::Optimal, gap: 0.0, upper_bound: k as f64, nodes: 1, notes: vec![] };
            let pts: Vec<f64> = (0..2 * k).map(|_| rng.random::<f64>()).collect();
            let d = DistanceMatrix::from_fn(2 * k, |i, j| (pts[i] - pts[j]).abs()).unwrap();
            let units: Vec<usize> = (0..2 * k).collect();
            let r = rematch_min_distance(&sample, &units, &d).unwrap();
            let mut a = sample.treated(); a.sort();
            let mut b = r.treated(); b.sort();
            prop_assert_eq!(a, b);
            let mut a = sample.controls(); a.sort();
            let mut b = r.controls(); b.sort();
            prop_assert_eq!(a, b);
            prop_assert!(total_distance(&r, &units, &d).unwrap() <= total_distance(&sample, &units, &d).unwrap() + 1e-12);
        }
    }
}
