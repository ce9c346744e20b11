//! Neighborhood selection: nested candidate sequences, design-based balance
//! testing of `X^test` on matched samples, the parametric regression test and
//! the split-sample variant that uses outcomes in a planning sample.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::balance::{cross_match_test, mahalanobis_distances, permutational_t_test, BalanceFunctionSet};
use crate::matching::{cardinality_match, rematch_min_distance, BalanceReference, MatchProblem, DEFAULT_EXACT_THRESHOLD, DEFAULT_NODE_LIMIT};
use crate::model::{strip_outcomes, CovariateValues, DesignView, HalfWidths, MatchedSample, NeighborhoodSpec, RuleSet, StudyFrame};
use crate::rules;
use crate::stats;
use crate::{Error, Result};

/// Growth of one clause's interval per policy step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClauseGrowth {
    pub rule: usize,
    pub clause: usize,
    pub lower: bool,
    pub upper: bool,
}

/// Candidate `t` is the initial neighborhood grown by the first `t` steps;
/// every step widens its clauses by `step` on the chosen sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPolicy {
    pub initial: NeighborhoodSpec,
    pub step: f64,
    pub steps: Vec<Vec<ClauseGrowth>>,
}

impl ExpansionPolicy {
    /// Symmetric growth of the clauses whose running variable belongs to a
    /// single rule (`subject_steps` times), then of the shared ones.
    pub fn subject_first(rules: &RuleSet, initial: NeighborhoodSpec, step: f64, subject_steps: usize, shared_steps: usize) -> Result<Self> {
        initial.check(rules)?;
        let shared = rules.shared_variables();
        let mut own = Vec::new();
        let mut common = Vec::new();
        for (j, rule) in rules.rules.iter().enumerate() {
            for (k, c) in rule.clauses.iter().enumerate() {
                let g = ClauseGrowth {
                    rule: j,
                    clause: k,
                    lower: true,
                    upper: true,
                };
                if shared.get(&c.variable).is_some_and(|r| r.len() > 1) {
                    common.push(g);
                } else {
                    own.push(g);
                }
            }
        }
        let mut steps = vec![own; subject_steps];
        steps.extend(std::iter::repeat_n(common, shared_steps));
        let p = ExpansionPolicy { initial, step, steps };
        p.check(rules)?;
        Ok(p)
    }

    pub fn check(&self, rules: &RuleSet) -> Result<()> {
        self.initial.check(rules)?;
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidNeighborhood("expansion step must be positive".into()));
        }
        for s in &self.steps {
            for g in s {
                if g.rule >= rules.rules.len() || g.clause >= rules.rules[g.rule].clauses.len() {
                    return Err(Error::InvalidNeighborhood(format!("growth refers to missing clause {}.{}", g.rule + 1, g.clause + 1)));
                }
            }
        }
        Ok(())
    }

    fn apply(spec: &mut NeighborhoodSpec, growth: &[ClauseGrowth], delta: f64) {
        for g in growth {
            let w = &mut spec.widths[g.rule][g.clause];
            if g.lower {
                w.lower = round_width(w.lower + delta);
            }
            if g.upper {
                w.upper = round_width(w.upper + delta);
            }
        }
    }

    /// Initial neighborhood followed by each expansion.
    pub fn candidates(&self) -> Vec<NeighborhoodSpec> {
        let mut out = vec![self.initial.clone()];
        let mut cur = self.initial.clone();
        for s in &self.steps {
            Self::apply(&mut cur, s, self.step);
            out.push(cur.clone());
        }
        out
    }

    /// Neighborhood shrunk by `times` copies of the first step, or `None`
    /// once a width would turn negative.
    pub fn shrunk(&self, times: usize) -> Option<NeighborhoodSpec> {
        let first = self.steps.first()?;
        let mut cur = self.initial.clone();
        for _ in 0..times {
            Self::apply(&mut cur, first, -self.step);
        }
        let ok = cur.widths.iter().flatten().all(|w| w.lower >= 0.0 && w.upper >= 0.0);
        ok.then_some(cur)
    }
}

fn round_width(w: f64) -> f64 {
    (w * 1e9).round() / 1e9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Minimum p-value a candidate must reach.
    pub p_star: f64,
    /// Balance tolerance in SDs over the whole view, fixed across candidates.
    pub tolerance_sd: f64,
    /// Explicit balance functions; defaults derived from the view otherwise.
    #[serde(default)]
    pub functions: Option<BalanceFunctionSet>,
    /// `X^test` columns; all test columns of the view when empty.
    #[serde(default)]
    pub test_columns: Vec<String>,
    pub draws: usize,
    pub seed: u64,
    /// Multiply per-column t-test p-values by the number of columns.
    #[serde(default)]
    pub bonferroni: bool,
    /// Re-pair matched units to minimize covariate distance before testing.
    #[serde(default = "default_rematch")]
    pub rematch: bool,
    pub exact_threshold: usize,
    pub node_limit: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            p_star: 0.1,
            tolerance_sd: 0.05,
            functions: None,
            test_columns: Vec::new(),
            draws: 2000,
            seed: 0,
            bonferroni: false,
            rematch: false,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
            node_limit: DEFAULT_NODE_LIMIT,
        }
    }
}

fn default_rematch() -> bool {
    false
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    /// Position along the sequence; negative for shrunk candidates.
    pub index: i64,
    pub spec: NeighborhoodSpec,
    pub treated_in: usize,
    pub controls_in: usize,
    pub pairs: usize,
    pub crossmatch_p: Option<f64>,
    pub ttest_p: Vec<(String, f64)>,
    pub min_p: Option<f64>,
    pub pass: bool,
    #[serde(skip)]
    pub sample: Option<MatchedSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub p_star: f64,
    pub candidates: Vec<CandidateResult>,
}

impl SelectionTrace {
    /// Index into `candidates` of the selected neighborhood.
    pub fn selected(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (k, c) in self.candidates.iter().enumerate() {
            if c.pass && best.is_none_or(|b| self.candidates[b].index < c.index) {
                best = Some(k);
            }
        }
        best
    }

    /// One row per candidate: intervals per rule, matched sizes, p-values and verdict.
    pub fn write_csv<W: Write>(&self, rules: &RuleSet, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = vec!["candidate".into()];
        header.extend(rules.rules.iter().enumerate().map(|(j, r)| if r.name.is_empty() { format!("rule_{}", j + 1) } else { r.name.clone() }));
        header.extend(
            [
                "treated_in",
                "controls_in",
                "matched_treated",
                "matched_controls",
                "crossmatch_p",
                "min_ttest_p",
                "min_p",
                "verdict",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        w.write_record(&header)?;
        let fmt = |p: Option<f64>| p.map(|v| format!("{v:.4}")).unwrap_or_default();
        for c in &self.candidates {
            let mut row = vec![c.index.to_string()];
            for (j, rule) in rules.rules.iter().enumerate() {
                let parts: Vec<String> = (0..rule.clauses.len())
                    .map(|k| {
                        let (lo, hi) = c.spec.interval(rules, j, k);
                        format!("[{}, {}]", fmt_grid(lo), fmt_grid(hi))
                    })
                    .collect();
                row.push(parts.join(" x "));
            }
            let min_t = c.ttest_p.iter().map(|x| x.1).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
            row.extend([
                c.treated_in.to_string(),
                c.controls_in.to_string(),
                c.pairs.to_string(),
                c.pairs.to_string(),
                fmt(c.crossmatch_p),
                fmt(min_t),
                fmt(c.min_p),
                if c.pass { "pass".into() } else { "fail".into() },
            ]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_grid(x: f64) -> String {
    let r = (x * 1e6).round() / 1e6;
    format!("{r}")
}

/// Treated and control units of the view inside `spec` (respecting the
/// view's sample mask).
pub fn neighborhood_units(view: &DesignView, rules: &RuleSet, spec: &NeighborhoodSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let t = rules::assignment_table(view, rules, spec)?;
    let z = t.z_overall();
    let n = t.n_overall();
    let keep = |i: usize| n[i] && view.sample().is_none_or(|s| s[i]);
    Ok((
        (0..view.len()).filter(|&i| keep(i) && z[i]).collect(),
        (0..view.len()).filter(|&i| keep(i) && !z[i]).collect(),
    ))
}

fn balance_functions(view: &DesignView, cfg: &SelectionConfig) -> Result<BalanceFunctionSet> {
    match &cfg.functions {
        Some(f) => Ok(f.clone()),
        None => BalanceFunctionSet::from_view(view, cfg.tolerance_sd, &[]),
    }
}

fn test_columns<'a>(view: &'a DesignView, cfg: &SelectionConfig) -> Result<Vec<(String, &'a [f64])>> {
    if cfg.test_columns.is_empty() {
        if view.tests().is_empty() {
            return Err(Error::InvalidArgument("neighborhood selection needs at least one X^test column".into()));
        }
        return Ok(view.tests().iter().map(|c| (c.name.clone(), c.values.as_slice())).collect());
    }
    cfg.test_columns.iter().map(|c| Ok((c.clone(), view.test_values(c)?))).collect()
}

/// Match inside one candidate and test `X^test` balance on the matched sample.
pub fn evaluate_candidate(
    view: &DesignView,
    rules: &RuleSet,
    spec: &NeighborhoodSpec,
    functions: &BalanceFunctionSet,
    cfg: &SelectionConfig,
    index: i64,
) -> Result<CandidateResult> {
    let (treated, controls) = neighborhood_units(view, rules, spec)?;
    let mut out = CandidateResult {
        index,
        spec: spec.clone(),
        treated_in: treated.len(),
        controls_in: controls.len(),
        pairs: 0,
        crossmatch_p: None,
        ttest_p: Vec::new(),
        min_p: None,
        pass: false,
        sample: None,
    };
    if treated.is_empty() || controls.is_empty() {
        return Ok(out);
    }
    let mut problem = MatchProblem::from_view(view, treated, controls, functions, BalanceReference::GroupDifference)?;
    problem.exact_threshold = cfg.exact_threshold;
    problem.node_limit = cfg.node_limit;
    let mut sample = cardinality_match(&problem)?;
    if cfg.rematch && !sample.is_empty() {
        sample = rematch_numeric(view, &sample)?;
    }
    out.pairs = sample.len();
    if sample.len() < 2 {
        out.sample = Some(sample);
        return Ok(out);
    }
    let cols = test_columns(view, cfg)?;
    let units: Vec<usize> = sample.treated().into_iter().chain(sample.controls()).collect();
    let rows: Vec<Vec<f64>> = units.iter().map(|&i| cols.iter().map(|c| c.1[i]).collect()).collect();
    let labels: Vec<bool> = (0..units.len()).map(|k| k < sample.len()).collect();
    let cm = cross_match_test(&rows, &labels)?;
    out.crossmatch_p = Some(cm.pvalue);
    let mut min_p = cm.pvalue;
    let ncol = cols.len() as f64;
    for (c, (name, values)) in cols.iter().enumerate() {
        let diffs: Vec<f64> = sample.pairs.iter().map(|p| values[p.treated] - values[p.control]).collect();
        let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((index + 1_000) as u64 * 64 + c as u64);
        let mut p = permutational_t_test(&diffs, cfg.draws, seed)?;
        if cfg.bonferroni {
            p = (p * ncol).min(1.0);
        }
        min_p = min_p.min(p);
        out.ttest_p.push((name.clone(), p));
    }
    out.min_p = Some(min_p);
    out.pass = min_p >= cfg.p_star;
    out.sample = Some(sample);
    Ok(out)
}

/// Minimum-distance re-pairing on the numeric covariates (rank-based
/// Mahalanobis distance).
pub fn rematch_numeric(view: &DesignView, sample: &MatchedSample) -> Result<MatchedSample> {
    let numeric: Vec<&[f64]> = view
        .covariates()
        .iter()
        .filter_map(|c| match &c.values {
            CovariateValues::Numeric(v) => Some(v.as_slice()),
            CovariateValues::Categorical { .. } => None,
        })
        .collect();
    if numeric.is_empty() {
        return Ok(sample.clone());
    }
    let units: Vec<usize> = sample.treated().into_iter().chain(sample.controls()).collect();
    let rows: Vec<Vec<f64>> = units.iter().map(|&i| numeric.iter().map(|v| v[i]).collect()).collect();
    let (d, _) = mahalanobis_distances(&rows)?;
    rematch_min_distance(sample, &units, &d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub selected: NeighborhoodSpec,
    pub sample: MatchedSample,
    pub trace: SelectionTrace,
}

/// Shrink from the initial candidate until one passes, or expand from a
/// passing initial candidate until one fails; keep the last passing one.
pub fn select_neighborhood(view: &DesignView, rules: &RuleSet, policy: &ExpansionPolicy, cfg: &SelectionConfig) -> Result<(Selection, SelectionTrace)> {
    policy.check(rules)?;
    let functions = balance_functions(view, cfg)?;
    test_columns(view, cfg)?;
    let mut trace = SelectionTrace {
        p_star: cfg.p_star,
        candidates: Vec::new(),
    };
    let candidates = policy.candidates();
    let first = evaluate_candidate(view, rules, &candidates[0], &functions, cfg, 0)?;
    let initial_pass = first.pass;
    trace.candidates.push(first);
    if initial_pass {
        for (t, spec) in candidates.iter().enumerate().skip(1) {
            let r = evaluate_candidate(view, rules, spec, &functions, cfg, t as i64)?;
            let pass = r.pass;
            trace.candidates.push(r);
            if !pass {
                break;
            }
        }
    } else {
        let mut k = 1;
        while let Some(spec) = policy.shrunk(k) {
            let r = evaluate_candidate(view, rules, &spec, &functions, cfg, -(k as i64))?;
            let pass = r.pass;
            trace.candidates.push(r);
            if pass {
                break;
            }
            k += 1;
        }
    }
    match trace.selected() {
        Some(s) => {
            let c = &trace.candidates[s];
            let selection = Selection {
                selected: c.spec.clone(),
                sample: c.sample.clone().expect("passing candidates carry their sample"),
                trace: trace.clone(),
            };
            Ok((selection, trace))
        }
        None => Err(Error::NoPassingNeighborhood),
    }
}

/// Like [`select_neighborhood`] but returns the trace on failure as well.
pub fn select_with_trace(view: &DesignView, rules: &RuleSet, policy: &ExpansionPolicy, cfg: &SelectionConfig) -> Result<(Option<Selection>, SelectionTrace)> {
    policy.check(rules)?;
    let functions = balance_functions(view, cfg)?;
    let mut c = cfg.clone();
    // Evaluate once with the stopping rule and retain every row.
    c.functions = Some(functions);
    match select_neighborhood(view, rules, policy, &c) {
        Ok((s, t)) => Ok((Some(s), t)),
        Err(Error::NoPassingNeighborhood) => {
            let functions = c.functions.clone().unwrap_or_else(|| unreachable!());
            let mut trace = SelectionTrace {
                p_star: c.p_star,
                candidates: vec![evaluate_candidate(view, rules, &policy.initial, &functions, &c, 0)?],
            };
            let mut k = 1;
            while let Some(spec) = policy.shrunk(k) {
                trace.candidates.push(evaluate_candidate(view, rules, &spec, &functions, &c, -(k as i64))?);
                k += 1;
            }
            Ok((None, trace))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricTest {
    pub f: f64,
    pub df1: usize,
    pub df2: usize,
    pub pvalue: f64,
    pub n: usize,
    /// Design columns removed for collinearity or zero variance.
    pub dropped: Vec<String>,
}

fn covariate_design(view: &DesignView, units: &[usize]) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut names = Vec::new();
    let mut cols = Vec::new();
    for cov in view.covariates() {
        match &cov.values {
            CovariateValues::Numeric(v) => {
                names.push(cov.name.clone());
                cols.push(units.iter().map(|&i| v[i]).collect());
            }
            CovariateValues::Categorical { levels, codes } => {
                for (l, level) in levels.iter().enumerate().skip(1) {
                    names.push(format!("{}={}", cov.name, level));
                    cols.push(units.iter().map(|&i| f64::from(u8::from(codes[i] == Some(l)))).collect());
                }
            }
        }
    }
    (names, cols)
}

fn rss(y: &DVector<f64>, x: &DMatrix<f64>) -> f64 {
    if x.ncols() == 0 {
        return y.norm_squared();
    }
    let beta = (x.transpose() * x).svd(true, true).solve(&(x.transpose() * y), 1e-12).unwrap_or_else(|_| DVector::zeros(x.ncols()));
    (y - x * beta).norm_squared()
}

/// OLS of `response` on an intercept, the covariates and the running
/// variables over neighborhood units (optionally restricted by `filter`);
/// joint F-test that the running-variable coefficients vanish.
pub fn parametric_balance_test(
    view: &DesignView,
    rules: &RuleSet,
    spec: &NeighborhoodSpec,
    response: &[f64],
    filter: Option<&[bool]>,
) -> Result<ParametricTest> {
    if response.len() != view.len() {
        return Err(Error::InvalidArgument("response length differs from the view".into()));
    }
    let (t, c) = neighborhood_units(view, rules, spec)?;
    let mut units: Vec<usize> = t.into_iter().chain(c).filter(|&i| filter.is_none_or(|f| f[i])).collect();
    units.sort_unstable();
    let (mut names, mut cols) = covariate_design(view, &units);
    let n_cov = names.len();
    let mut running_ids: Vec<String> = Vec::new();
    for r in &rules.rules {
        for cl in &r.clauses {
            if !running_ids.contains(&cl.variable) {
                running_ids.push(cl.variable.clone());
            }
        }
    }
    for id in &running_ids {
        let v = view.running_values(id)?;
        names.push(id.clone());
        cols.push(units.iter().map(|&i| v[i]).collect());
    }
    let n = units.len();
    // Intercept first, covariates, then running variables.
    let all = DMatrix::from_fn(n, cols.len() + 1, |i, j| if j == 0 { 1.0 } else { cols[j - 1][i] });
    let keep = stats::independent_columns(&all);
    let dropped: Vec<String> = (1..=cols.len()).filter(|j| !keep.contains(j)).map(|j| names[j - 1].clone()).collect();
    let full_cols: Vec<usize> = keep.clone();
    let restricted: Vec<usize> = keep.iter().copied().filter(|&j| j <= n_cov).collect();
    let df1 = full_cols.len() - restricted.len();
    if n < full_cols.len() + 2 {
        return Err(Error::InsufficientData(format!(
            "parametric balance test needs at least {} units, found {n}",
            full_cols.len() + 2
        )));
    }
    let df2 = n - full_cols.len();
    let y = DVector::from_fn(n, |i, _| response[units[i]]);
    let pick = |idx: &[usize]| DMatrix::from_fn(n, idx.len(), |i, c| all[(i, idx[c])]);
    let rss_full = rss(&y, &pick(&full_cols));
    let rss_restricted = rss(&y, &pick(&restricted));
    if df1 == 0 {
        return Ok(ParametricTest {
            f: 0.0,
            df1,
            df2,
            pvalue: 1.0,
            n,
            dropped,
        });
    }
    let f = if rss_full > 0.0 {
        ((rss_restricted - rss_full).max(0.0) / df1 as f64) / (rss_full / df2 as f64)
    } else if rss_restricted > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(ParametricTest {
        f,
        df1,
        df2,
        pvalue: stats::f_sf(f, df1 as f64, df2 as f64),
        n,
        dropped,
    })
}

/// Random split into a planning frame of `round(fraction * n)` units and an
/// analysis frame with the rest, both in original row order.
pub fn split_sample(frame: &StudyFrame, fraction: f64, seed: u64) -> Result<(StudyFrame, StudyFrame)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("planning fraction must lie in (0, 1), got {fraction}")));
    }
    let n = frame.len();
    let np = (fraction * n as f64).round() as usize;
    if np == 0 || np >= n {
        return Err(Error::InsufficientData(format!("a {fraction} split of {n} units leaves an empty part")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stats::stream_rng(seed, 0));
    let mut plan = idx[..np].to_vec();
    let mut rest = idx[np..].to_vec();
    plan.sort_unstable();
    rest.sort_unstable();
    Ok((frame.subset(&plan), frame.subset(&rest)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiDesignRow {
    pub index: i64,
    pub spec: NeighborhoodSpec,
    pub treated: Option<ParametricTest>,
    pub control: Option<ParametricTest>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiDesignSelection {
    pub selected: Option<NeighborhoodSpec>,
    pub rows: Vec<SemiDesignRow>,
    /// Untouched analysis frame for estimation.
    pub analysis: StudyFrame,
}

fn semi_row(view: &DesignView, rules: &RuleSet, spec: &NeighborhoodSpec, y: &[f64], z: &[bool], p_star: f64, index: i64) -> Result<SemiDesignRow> {
    let arm = |treated: bool| -> Option<ParametricTest> {
        let f: Vec<bool> = z.iter().map(|&v| v == treated).collect();
        parametric_balance_test(view, rules, spec, y, Some(&f)).ok()
    };
    let treated = arm(true);
    let control = arm(false);
    let pass = matches!((&treated, &control), (Some(a), Some(b)) if a.pvalue >= p_star && b.pvalue >= p_star);
    Ok(SemiDesignRow {
        index,
        spec: spec.clone(),
        treated,
        control,
        pass,
    })
}

impl SemiDesignSelection {
    /// One row per candidate: intervals per rule, F-test p-values per arm and verdict.
    pub fn write_csv<W: Write>(&self, rules: &RuleSet, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = vec!["candidate".into()];
        header.extend(rules.rules.iter().enumerate().map(|(j, r)| if r.name.is_empty() { format!("rule_{}", j + 1) } else { r.name.clone() }));
        header.extend(["n_treated", "n_control", "treated_f_p", "control_f_p", "verdict"].iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut row = vec![r.index.to_string()];
            for (j, rule) in rules.rules.iter().enumerate() {
                let parts: Vec<String> = (0..rule.clauses.len())
                    .map(|k| {
                        let (lo, hi) = r.spec.interval(rules, j, k);
                        format!("[{}, {}]", fmt_grid(lo), fmt_grid(hi))
                    })
                    .collect();
                row.push(parts.join(" x "));
            }
            let n = |t: &Option<ParametricTest>| t.as_ref().map(|t| t.n.to_string()).unwrap_or_default();
            let p = |t: &Option<ParametricTest>| t.as_ref().map(|t| format!("{:.4}", t.pvalue)).unwrap_or_default();
            row.extend([n(&r.treated), n(&r.control), p(&r.treated), p(&r.control), if r.pass { "pass".into() } else { "fail".into() }]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Neighborhood selection on a planning split using `outcome`, tested
/// separately within each treatment arm.
pub fn semi_design_select(
    frame: &StudyFrame,
    rules: &RuleSet,
    policy: &ExpansionPolicy,
    p_star: f64,
    fraction: f64,
    seed: u64,
    outcome: &str,
) -> Result<SemiDesignSelection> {
    policy.check(rules)?;
    let (plan, analysis) = split_sample(frame, fraction, seed)?;
    let y = plan.outcome(outcome)?.values.clone();
    let view = strip_outcomes(&plan);
    let z = rules::assign(&view, rules)?.z_overall();
    let candidates = policy.candidates();
    let mut rows = vec![semi_row(&view, rules, &candidates[0], &y, &z, p_star, 0)?];
    if rows[0].pass {
        for (t, spec) in candidates.iter().enumerate().skip(1) {
            let r = semi_row(&view, rules, spec, &y, &z, p_star, t as i64)?;
            let pass = r.pass;
            rows.push(r);
            if !pass {
                break;
            }
        }
    } else {
        let mut k = 1;
        while let Some(spec) = policy.shrunk(k) {
            let r = semi_row(&view, rules, &spec, &y, &z, p_star, -(k as i64))?;
            let pass = r.pass;
            rows.push(r);
            if pass {
                break;
            }
            k += 1;
        }
    }
    let selected = rows.iter().filter(|r| r.pass).max_by_key(|r| r.index).map(|r| r.spec.clone());
    Ok(SemiDesignSelection { selected, rows, analysis })
}

/// Largest half-width in a neighborhood.
pub fn max_half_width(spec: &NeighborhoodSpec) -> f64 {
    spec.widths.iter().flatten().map(|w: &HalfWidths| w.lower.max(w.upper)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Covariate, CovariateRole, NumericColumn};
    use crate::synth::{self, DgpConfig};
    use rand_distr::{Distribution, StandardNormal};

    fn policy(rules: &RuleSet, steps: usize) -> ExpansionPolicy {
        ExpansionPolicy::subject_first(rules, NeighborhoodSpec::uniform(rules, HalfWidths::symmetric(0.1)), 0.1, steps, 0).unwrap()
    }

    #[test]
    fn candidates_are_nested() {
        let rules = DgpConfig::default().rules();
        let p = ExpansionPolicy::subject_first(&rules, NeighborhoodSpec::uniform(&rules, HalfWidths::symmetric(0.1)), 0.1, 3, 2).unwrap();
        let c = p.candidates();
        assert_eq!(c.len(), 6);
        for w in c.windows(2) {
            assert!(w[1].contains(&w[0]) && w[1] != w[0]);
        }
        // Average grade is shared by both rules, so it only grows in the last two steps.
        assert_eq!(c[3].widths[0][1], HalfWidths::symmetric(0.1));
        assert_eq!(c[5].widths[0][1], HalfWidths::symmetric(0.3));
        assert_eq!(c[3].widths[1][0], HalfWidths::symmetric(0.4));
        assert!(p.shrunk(1).is_some_and(|s| s.widths[0][0] == HalfWidths::symmetric(0.0)));
        assert!(p.shrunk(2).is_none());
    }

    #[test]
    fn zero_threshold_runs_to_the_end() {
        let cfg = DgpConfig {
            n: 3000,
            seed: 3,
            ..DgpConfig::default()
        };
        let (frame, _) = synth::generate(&cfg).unwrap();
        let view = strip_outcomes(&frame);
        let rules = cfg.rules();
        let p = policy(&rules, 3);
        let sc = SelectionConfig {
            p_star: 0.0,
            draws: 200,
            ..SelectionConfig::default()
        };
        let (sel, trace) = select_neighborhood(&view, &rules, &p, &sc).unwrap();
        assert_eq!(sel.selected, *p.candidates().last().unwrap());
        assert_eq!(trace.candidates.len(), 4);
        for w in trace.candidates.windows(2) {
            assert!(w[1].pairs >= w[0].pairs);
            assert!(w[1].spec.contains(&w[0].spec));
        }
        for c in &trace.candidates {
            assert_eq!(c.pass, c.min_p.is_some_and(|p| p >= 0.0));
        }
        sel.sample.verify(&view).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&rules, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(1).unwrap().contains("[3.8, 4] x [4.3, 4.5]"), "{text}");
    }

    #[test]
    fn failing_everything_reports_no_neighborhood() {
        let cfg = DgpConfig {
            n: 1500,
            ..DgpConfig::default()
        };
        let (frame, _) = synth::generate(&cfg).unwrap();
        let view = strip_outcomes(&frame);
        let rules = cfg.rules();
        let sc = SelectionConfig {
            p_star: 1.1,
            draws: 100,
            ..SelectionConfig::default()
        };
        assert!(matches!(select_neighborhood(&view, &rules, &policy(&rules, 2), &sc), Err(Error::NoPassingNeighborhood)));
        let (sel, trace) = select_with_trace(&view, &rules, &policy(&rules, 2), &sc).unwrap();
        assert!(sel.is_none());
        assert_eq!(trace.candidates.len(), 2);
        assert_eq!(trace.candidates[1].index, -1);
    }

    fn regression_frame(n: usize, slope: f64, seed: u64) -> (StudyFrame, RuleSet, NeighborhoodSpec) {
        let cfg = DgpConfig::default();
        let rules = cfg.rules();
        let mut rng = stats::stream_rng(seed, 0);
        let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
        let x: Vec<f64> = (0..n).map(|_| z()).collect();
        let snap = |v: f64| (v * 10.0).round() / 10.0;
        let low: Vec<f64> = x.iter().map(|&xi| snap(3.9 + 0.3 * xi + 0.3 * z())).collect();
        let second: Vec<f64> = low.iter().map(|&l| snap(l + 0.5 + 0.2 * z().abs())).collect();
        let avg: Vec<f64> = (0..n).map(|_| snap(4.4 + 0.05 * z())).collect();
        let test: Vec<f64> = (0..n).map(|i| 0.8 * x[i] + slope * (low[i] - 3.9) + z()).collect();
        let frame = StudyFrame {
            unit_ids: (0..n).map(|i| i.to_string()).collect(),
            running: vec![
                NumericColumn {
                    name: synth::LOWEST.into(),
                    values: low,
                },
                NumericColumn {
                    name: synth::SECOND.into(),
                    values: second,
                },
                NumericColumn {
                    name: synth::AVERAGE.into(),
                    values: avg,
                },
            ],
            covariates: vec![Covariate {
                name: "x".into(),
                role: CovariateRole::MeanBalance,
                values: CovariateValues::Numeric(x),
            }],
            tests: vec![NumericColumn {
                name: "lagged".into(),
                values: test,
            }],
            outcomes: Vec::new(),
            sample: None,
        };
        let wide = NeighborhoodSpec::uniform(&rules, HalfWidths::symmetric(10.0));
        (frame, rules, wide)
    }

    #[test]
    fn parametric_test_is_calibrated_and_powerful() {
        let mut ps = Vec::new();
        for seed in 0..200 {
            let (f, rules, spec) = regression_frame(300, 0.0, seed);
            let v = strip_outcomes(&f);
            let r = parametric_balance_test(&v, &rules, &spec, &f.tests[0].values, None).unwrap();
            ps.push(r.pvalue);
        }
        ps.sort_by(f64::total_cmp);
        // Kolmogorov-Smirnov distance against U(0, 1); 1% critical value ~ 1.63 / sqrt(n).
        let d = ps
            .iter()
            .enumerate()
            .map(|(i, &p)| ((i + 1) as f64 / 200.0 - p).abs().max((p - i as f64 / 200.0).abs()))
            .fold(0.0, f64::max);
        assert!(d < 1.63 / 200f64.sqrt(), "KS distance {d}");
        let (f, rules, spec) = regression_frame(500, 1.0, 7);
        let v = strip_outcomes(&f);
        let r = parametric_balance_test(&v, &rules, &spec, &f.tests[0].values, None).unwrap();
        assert!(r.pvalue < 1e-3, "{}", r.pvalue);
    }

    #[test]
    fn parametric_test_drops_degenerate_running_variable() {
        let (mut f, rules, spec) = regression_frame(200, 0.0, 1);
        f.running[2].values = vec![4.4; 200];
        let v = strip_outcomes(&f);
        let r = parametric_balance_test(&v, &rules, &spec, &f.tests[0].values, None).unwrap();
        assert_eq!(r.dropped, vec![synth::AVERAGE.to_string()]);
        assert_eq!(r.df1, 2);
    }

    #[test]
    fn split_is_a_partition() {
        let (f, _) = synth::generate(&DgpConfig {
            n: 1000,
            ..DgpConfig::default()
        })
        .unwrap();
        let (a, b) = split_sample(&f, 0.2, 9).unwrap();
        assert_eq!((a.len(), b.len()), (200, 800));
        let mut ids: Vec<&String> = a.unit_ids.iter().chain(&b.unit_ids).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 1000);
        let (a2, _) = split_sample(&f, 0.2, 9).unwrap();
        assert_eq!(a.unit_ids, a2.unit_ids);
        assert!(split_sample(&f, 1.0, 9).is_err());
        assert!(split_sample(&f, 0.9999, 9).is_err());
    }

    #[test]
    fn semi_design_follows_the_stopping_rule() {
        let cfg = DgpConfig {
            n: 6000,
            outcome_confounding: 0.0,
            seed: 11,
            ..DgpConfig::default()
        };
        let (frame, _) = synth::generate(&cfg).unwrap();
        let rules = cfg.rules();
        let p = policy(&rules, 3);
        // Test columns are not outcomes.
        assert!(semi_design_select(&frame, &rules, &p, 0.0, 0.4, 0, synth::LAGGED).is_err());
        let all = semi_design_select(&frame, &rules, &p, 0.0, 0.4, 0, synth::RETENTION).unwrap();
        assert_eq!(all.selected.as_ref(), p.candidates().last());
        assert_eq!(all.rows.len(), 4);
        for seed in 0..10 {
            let s = semi_design_select(&frame, &rules, &p, 0.1, 0.4, seed, synth::RETENTION).unwrap();
            assert_eq!(s.analysis.len(), 3600);
            for r in &s.rows {
                let ok = |t: &Option<ParametricTest>| t.as_ref().is_some_and(|t| t.pvalue >= 0.1);
                assert_eq!(r.pass, ok(&r.treated) && ok(&r.control));
            }
            if s.rows[0].pass {
                let (last, head) = s.rows.split_last().unwrap();
                assert!(head.iter().all(|r| r.pass && r.index >= 0));
                assert!(!last.pass || s.rows.len() == 4);
            }
            let best = s.rows.iter().filter(|r| r.pass).max_by_key(|r| r.index).map(|r| &r.spec);
            assert_eq!(s.selected.as_ref(), best);
        }
    }
}
