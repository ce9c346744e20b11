//! End-to-end analysis: selection, matching, weighting, estimation,
//! sensitivity and generalization, with stage-tagged failures and the
//! report bundle written by the command-line tool.

use std::fmt::{self, Write as _};
use std::io::Read;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::balance::{standardized_difference, BalanceFunctionSet, StandardizedDifference};
use crate::estimate::{
    difference_in_means, mcnemar_test, pair_table, raw_estimate, ram_estimate, risk_difference, subgroup_estimates, EffectEstimate, Estimand,
    EstimateMethod, PairTable, Side, SubgroupEstimate,
};
use crate::io::{read_frame, AnalysisConfig, FilterCondition, SelectionMethod, SCHEMA_VERSION};
use crate::matching::{cardinality_match, representative_match, BalanceReference, MatchProblem, TargetPopulation};
use crate::model::{strip_outcomes, validate_frame, CovariateValues, DesignView, HalfWidths, MatchedSample, NeighborhoodSpec, OutcomeKind, StudyFrame, WeightSolution};
use crate::neighborhood::{neighborhood_units, rematch_numeric, select_with_trace, semi_design_select, split_sample, ExpansionPolicy, SelectionConfig};
use crate::ridge::{ridge_fit, DEFAULT_FOLDS};
use crate::sensitivity::{equivalence_sensitivity, gamma_star, gamma_sweep, EquivalenceResult, GammaBound};
use crate::stats;
use crate::weights::{balancing_weights, WeightProblem, DEFAULT_KKT_TOLERANCE};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Input,
    Select,
    Match,
    Weigh,
    Estimate,
    Sensitivity,
    Generalize,
    Output,
}

impl Stage {
    /// Process exit code for a failure in this stage.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Input => 3,
            Stage::Select => 4,
            Stage::Match => 5,
            Stage::Weigh => 6,
            Stage::Estimate => 7,
            Stage::Sensitivity => 8,
            Stage::Generalize => 9,
            Stage::Output => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Input => "input",
            Stage::Select => "select",
            Stage::Match => "match",
            Stage::Weigh => "weigh",
            Stage::Estimate => "estimate",
            Stage::Sensitivity => "sensitivity",
            Stage::Generalize => "generalize",
            Stage::Output => "output",
        }
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage.name(), self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

/// Independent seed for a named sub-task.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    stats::stream_rng(seed, tag).next_u64()
}

const SEED_SELECT: u64 = 1;
const SEED_SPLIT: u64 = 2;
const SEED_ESTIMATE: u64 = 100;

/// Reads the data CSV named by the config and validates it against the rules.
pub fn load_frame<R: Read>(config: &AnalysisConfig, data: R) -> Result<StudyFrame> {
    let frame = read_frame(data, &config.columns)?;
    validate_frame(&frame, &config.rules).into_result()?;
    Ok(frame)
}

/// Reads config and data from disk; `data` overrides the config's path.
pub fn load(config_path: &Path, data: Option<&Path>) -> std::result::Result<(AnalysisConfig, StudyFrame), StageError> {
    let text = std::fs::read_to_string(config_path).map_err(Error::from).at(Stage::Config)?;
    let config = AnalysisConfig::from_json(&text).at(Stage::Config)?;
    let path = match (data, &config.data) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => config_path.parent().unwrap_or(Path::new(".")).join(p),
        (None, None) => {
            return Err(Error::InvalidArgument("no data file given in the config or on the command line".into())).at(Stage::Config);
        }
    };
    let file = std::fs::File::open(&path).map_err(Error::from).at(Stage::Input)?;
    let frame = load_frame(&config, std::io::BufReader::new(file)).at(Stage::Input)?;
    Ok((config, frame))
}

pub fn balance_functions(config: &AnalysisConfig, view: &DesignView) -> Result<BalanceFunctionSet> {
    let s = &config.selection;
    if s.second_moments {
        BalanceFunctionSet::second_moments(view, s.tolerance_sd, &[])
    } else {
        BalanceFunctionSet::from_view(view, s.tolerance_sd, &[])
    }
}

pub fn expansion_policy(config: &AnalysisConfig) -> Result<ExpansionPolicy> {
    let s = &config.selection;
    if let Some(p) = &s.policy {
        p.check(&config.rules)?;
        return Ok(p.clone());
    }
    let step = s.step.or(config.rules.grid).unwrap_or(0.1);
    let initial = NeighborhoodSpec::uniform(&config.rules, HalfWidths::symmetric(s.initial_half_width));
    ExpansionPolicy::subject_first(&config.rules, initial, step, s.subject_steps, s.shared_steps)
}

pub fn selection_config(config: &AnalysisConfig, view: &DesignView) -> Result<SelectionConfig> {
    let s = &config.selection;
    Ok(SelectionConfig {
        p_star: s.p_star,
        tolerance_sd: s.tolerance_sd,
        functions: Some(balance_functions(config, view)?),
        test_columns: s.test_columns.clone(),
        draws: s.draws,
        seed: sub_seed(config.seed, SEED_SELECT),
        bonferroni: s.bonferroni,
        rematch: s.rematch,
        ..SelectionConfig::default()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    /// `None` when no candidate passed.
    pub selected: Option<NeighborhoodSpec>,
    pub trace_csv: String,
    pub candidates: usize,
}

/// Runs the configured selection method. The trace is returned even when
/// nothing passes.
pub fn run_selection(config: &AnalysisConfig, frame: &StudyFrame) -> Result<SelectionOutcome> {
    let mut buf = Vec::new();
    let rules = &config.rules;
    let (selected, candidates) = match config.selection.method {
        SelectionMethod::Design => {
            let view = strip_outcomes(frame);
            let policy = expansion_policy(config)?;
            let sc = selection_config(config, &view)?;
            let (sel, trace) = select_with_trace(&view, rules, &policy, &sc)?;
            trace.write_csv(rules, &mut buf)?;
            (sel.map(|s| s.selected), trace.candidates.len())
        }
        SelectionMethod::SemiDesign => {
            let s = &config.selection;
            let outcome = s.planning_outcome.as_deref().expect("checked by the config");
            let policy = expansion_policy(config)?;
            let r = semi_design_select(frame, rules, &policy, s.p_star, s.planning_fraction, sub_seed(config.seed, SEED_SPLIT), outcome)?;
            r.write_csv(rules, &mut buf)?;
            (r.selected, r.rows.len())
        }
        SelectionMethod::Fixed => {
            let spec = config.selection.fixed.clone().expect("checked by the config");
            spec.check(rules)?;
            let view = strip_outcomes(frame);
            let sc = selection_config(config, &view)?;
            let functions = sc.functions.clone().expect("set above");
            let mut r = crate::neighborhood::evaluate_candidate(&view, rules, &spec, &functions, &sc, 0)?;
            // A fixed neighborhood is used whatever the tests say.
            r.pass = true;
            let trace = crate::neighborhood::SelectionTrace {
                p_star: sc.p_star,
                candidates: vec![r],
            };
            trace.write_csv(rules, &mut buf)?;
            (Some(spec), 1)
        }
    };
    Ok(SelectionOutcome {
        selected,
        trace_csv: String::from_utf8(buf).expect("csv output is UTF-8"),
        candidates,
    })
}

/// Frame used after selection: the analysis split for the semi-design
/// method, the whole frame otherwise.
pub fn analysis_frame(config: &AnalysisConfig, frame: &StudyFrame) -> Result<StudyFrame> {
    match config.selection.method {
        SelectionMethod::SemiDesign => Ok(split_sample(frame, config.selection.planning_fraction, sub_seed(config.seed, SEED_SPLIT))?.1),
        _ => Ok(frame.clone()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutput {
    pub schema_version: u32,
    pub neighborhood: NeighborhoodSpec,
    pub treated_in: Vec<usize>,
    pub controls_in: Vec<usize>,
    pub sample: MatchedSample,
}

pub fn run_matching(config: &AnalysisConfig, frame: &StudyFrame, spec: &NeighborhoodSpec) -> Result<MatchOutput> {
    spec.check(&config.rules)?;
    let view = strip_outcomes(frame);
    let (treated, controls) = neighborhood_units(&view, &config.rules, spec)?;
    if treated.is_empty() || controls.is_empty() {
        return Err(Error::InsufficientData("the neighborhood has no treated or no control units".into()));
    }
    let functions = balance_functions(config, &view)?;
    let problem = MatchProblem::from_view(&view, treated.clone(), controls.clone(), &functions, BalanceReference::GroupDifference)?;
    let mut sample = cardinality_match(&problem)?;
    if sample.is_empty() {
        return Err(Error::InsufficientData("no pair satisfies the balance constraints".into()));
    }
    if config.matching.rematch {
        sample = rematch_numeric(&view, &sample)?;
    }
    Ok(MatchOutput {
        schema_version: SCHEMA_VERSION,
        neighborhood: spec.clone(),
        treated_in: treated,
        controls_in: controls,
        sample,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightOutput {
    pub schema_version: u32,
    pub treated_in: Vec<usize>,
    pub solution: WeightSolution,
}

/// Minimum-variance weights on the neighborhood controls toward the
/// neighborhood treated means.
pub fn run_weighting(config: &AnalysisConfig, frame: &StudyFrame, spec: &NeighborhoodSpec) -> Result<WeightOutput> {
    let settings = config.weighting.clone().unwrap_or_default();
    let view = strip_outcomes(frame);
    let (treated, controls) = neighborhood_units(&view, &config.rules, spec)?;
    let functions = BalanceFunctionSet::from_view(&view, settings.tolerance_sd, &[])?;
    let problem = WeightProblem::from_view(&view, &treated, &controls, &functions)?;
    let solution = balancing_weights(&problem, DEFAULT_KKT_TOLERANCE)?;
    Ok(WeightOutput {
        schema_version: SCHEMA_VERSION,
        treated_in: treated,
        solution,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub name: String,
    /// `covariate` or `test`.
    pub group: String,
    pub sd: f64,
    pub before: StandardizedDifference,
    pub matched: Option<StandardizedDifference>,
    pub weighted: Option<StandardizedDifference>,
}

fn std_diff(name: &str, t: &[f64], c: &[f64], w: Option<&[f64]>, sd: f64) -> StandardizedDifference {
    let cm = match w {
        None => stats::mean(c),
        Some(w) => c.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>(),
    };
    StandardizedDifference {
        name: name.to_string(),
        treated_mean: stats::mean(t),
        control_mean: cm,
        value: standardized_difference(t, c, w, sd),
    }
}

/// Standardized differences of every balance function and secondary
/// covariate, before and after matching and weighting, scaled by the
/// pre-matching pooled SD.
pub fn balance_rows(
    config: &AnalysisConfig,
    frame: &StudyFrame,
    treated_in: &[usize],
    controls_in: &[usize],
    matched: Option<&MatchedSample>,
    weights: Option<&WeightSolution>,
) -> Result<Vec<BalanceRow>> {
    let view = strip_outcomes(frame);
    let functions = BalanceFunctionSet::from_view(&view, config.selection.tolerance_sd, &[])?;
    let mut columns: Vec<(String, &str, Vec<f64>)> = functions.names().into_iter().zip(functions.evaluate(&view)?).map(|(n, v)| (n, "covariate", v)).collect();
    columns.extend(view.tests().iter().map(|c| (c.name.clone(), "test", c.values.clone())));
    let pick = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    Ok(columns
        .into_iter()
        .map(|(name, group, v)| {
            let (t, c) = (pick(&v, treated_in), pick(&v, controls_in));
            let sd = crate::balance::pooled_sd(&t, &c);
            BalanceRow {
                before: std_diff(&name, &t, &c, None, sd),
                matched: matched.map(|m| std_diff(&name, &pick(&v, &m.treated()), &pick(&v, &m.controls()), None, sd)),
                weighted: weights.map(|w| std_diff(&name, &t, &pick(&v, &w.controls), Some(&w.weights), sd)),
                name,
                group: group.to_string(),
                sd,
            }
        })
        .collect())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_default()
}

pub fn balance_csv(rows: &[BalanceRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "variable",
        "group",
        "pooled_sd",
        "treated_mean_before",
        "control_mean_before",
        "std_diff_before",
        "treated_mean_matched",
        "control_mean_matched",
        "std_diff_matched",
        "control_mean_weighted",
        "std_diff_weighted",
    ])?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.group.clone(),
            format!("{:.4}", r.sd),
            format!("{:.4}", r.before.treated_mean),
            format!("{:.4}", r.before.control_mean),
            fmt_opt(r.before.value),
            fmt_opt(r.matched.as_ref().map(|m| m.treated_mean)),
            fmt_opt(r.matched.as_ref().map(|m| m.control_mean)),
            fmt_opt(r.matched.as_ref().and_then(|m| m.value)),
            fmt_opt(r.weighted.as_ref().map(|m| m.control_mean)),
            fmt_opt(r.weighted.as_ref().and_then(|m| m.value)),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv output is UTF-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeEstimates {
    pub outcome: String,
    pub kind: OutcomeKind,
    pub table: Option<PairTable>,
    pub estimates: Vec<EffectEstimate>,
    pub subgroups: Vec<SubgroupEstimate>,
}

/// Covariate rows (balance-function values) indexed by frame unit.
pub fn covariate_rows(config: &AnalysisConfig, view: &DesignView) -> Result<Vec<Vec<f64>>> {
    let functions = BalanceFunctionSet::from_view(view, config.selection.tolerance_sd, &[])?;
    let cols = functions.evaluate(view)?;
    Ok((0..view.len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
}

fn estimation_outcomes(config: &AnalysisConfig, frame: &StudyFrame) -> Vec<String> {
    if config.estimation.outcomes.is_empty() {
        frame.outcomes.iter().map(|o| o.name.clone()).collect()
    } else {
        config.estimation.outcomes.clone()
    }
}

fn subgroup_labels(view: &DesignView, column: &str) -> Result<Vec<String>> {
    let c = view.covariate(column)?;
    Ok((0..view.len()).map(|i| c.values.key(i)).collect())
}

pub fn run_estimation(config: &AnalysisConfig, frame: &StudyFrame, sample: &MatchedSample, weights: Option<&WeightOutput>) -> Result<Vec<OutcomeEstimates>> {
    let e = &config.estimation;
    let view = strip_outcomes(frame);
    let rows = covariate_rows(config, &view)?;
    let labels = e.subgroup.as_deref().map(|g| subgroup_labels(&view, g)).transpose()?;
    let mut out = Vec::new();
    for (k, name) in estimation_outcomes(config, frame).iter().enumerate() {
        let outcome = frame.outcome(name)?;
        let y = &outcome.values;
        let seed = sub_seed(config.seed, SEED_ESTIMATE + k as u64);
        let mut r = OutcomeEstimates {
            outcome: name.clone(),
            kind: outcome.kind,
            table: None,
            estimates: Vec::new(),
            subgroups: Vec::new(),
        };
        if outcome.kind == OutcomeKind::Binary {
            let table = pair_table(sample, y)?;
            r.table = Some(table);
            if e.methods.contains(&EstimateMethod::Mcnemar) {
                let mut est = risk_difference(&table, e.level)?;
                let m = mcnemar_test(&table, e.side);
                est.pvalue = Some(m.pvalue);
                if m.degenerate {
                    est.notes.push("no discordant pairs".into());
                }
                r.estimates.push(est);
            }
            if let Some(labels) = &labels {
                r.subgroups = subgroup_estimates(sample, y, labels, e.side, e.level)?;
            }
        }
        if e.methods.contains(&EstimateMethod::DiffMeans) {
            r.estimates.push(difference_in_means(sample, y, e.draws, seed, e.level)?);
        }
        if e.methods.contains(&EstimateMethod::Ram) && sample.len() >= 2 {
            r.estimates.push(ram_estimate(sample, y, &rows, e.bootstrap, seed ^ 1, e.level)?);
        }
        if let Some(w) = weights {
            let folds = config.weighting.as_ref().map_or(DEFAULT_FOLDS, |s| s.folds);
            let pick_rows = |idx: &[usize]| idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
            let pick_y = |idx: &[usize]| idx.iter().map(|&i| y[i]).collect::<Vec<_>>();
            let (tr, ty) = (pick_rows(&w.treated_in), pick_y(&w.treated_in));
            let (cr, cy) = (pick_rows(&w.solution.controls), pick_y(&w.solution.controls));
            let ft = ridge_fit(&tr, &ty, None, folds.min(tr.len()).max(2))?;
            let fc = ridge_fit(&cr, &cy, None, folds.min(cr.len()).max(2))?;
            r.estimates.push(raw_estimate(&tr, &ty, &cr, &cy, &w.solution, &ft, &fc, e.level)?);
        }
        out.push(r);
    }
    Ok(out)
}

pub fn pair_tables_csv(estimates: &[OutcomeEstimates]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["outcome", "group", "pairs", "n00", "n01", "n10", "n11", "risk_difference"])?;
    for o in estimates {
        let mut rows: Vec<(String, PairTable)> = o.table.iter().map(|t| ("all".to_string(), *t)).collect();
        rows.extend(o.subgroups.iter().map(|s| (s.level.clone(), s.table)));
        for (g, t) in rows {
            let rd = (t.n10 as f64 - t.n01 as f64) / t.total().max(1) as f64;
            w.write_record([
                o.outcome.clone(),
                g,
                t.total().to_string(),
                t.n00.to_string(),
                t.n01.to_string(),
                t.n10.to_string(),
                t.n11.to_string(),
                format!("{rd:.4}"),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv output is UTF-8"))
}

/// Boxplot-ready summary of outcomes that carry a period, by matched group.
pub fn outcome_summary_csv(frame: &StudyFrame, sample: &MatchedSample) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["outcome", "period", "group", "n", "mean", "sd", "min", "q1", "median", "q3", "max"])?;
    for o in frame.outcomes.iter().filter(|o| o.period.is_some()) {
        for (g, units) in [("treated", sample.treated()), ("control", sample.controls())] {
            let v: Vec<f64> = units.iter().map(|&i| o.values[i]).filter(|x| x.is_finite()).collect();
            let f = |x: f64| format!("{x:.4}");
            w.write_record([
                o.name.clone(),
                o.period.clone().unwrap_or_default(),
                g.to_string(),
                v.len().to_string(),
                f(stats::mean(&v)),
                f(stats::sd(&v)),
                f(stats::quantile(&v, 0.0)),
                f(stats::quantile(&v, 0.25)),
                f(stats::quantile(&v, 0.5)),
                f(stats::quantile(&v, 0.75)),
                f(stats::quantile(&v, 1.0)),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv output is UTF-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSensitivity {
    pub outcome: String,
    pub table: PairTable,
    pub side: Side,
    /// Zero when the test does not reject at `gamma = 1`.
    pub gamma_star: f64,
    pub sweep: Vec<GammaBound>,
    pub equivalence: Vec<EquivalenceResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub schema_version: u32,
    pub alpha: f64,
    pub outcomes: Vec<OutcomeSensitivity>,
}

pub fn run_sensitivity(config: &AnalysisConfig, tables: &[(String, PairTable)]) -> Result<SensitivityReport> {
    let s = &config.sensitivity;
    let mut outcomes = Vec::new();
    for (name, table) in tables {
        if !s.outcomes.is_empty() && !s.outcomes.contains(name) {
            continue;
        }
        let side = s.side.unwrap_or(if table.n10 < table.n01 { Side::Less } else { Side::Greater });
        let mut equivalence = Vec::new();
        for &d in &s.delta0 {
            for &g in &s.equivalence_gamma {
                equivalence.push(equivalence_sensitivity(table, d, s.direction, g, s.alpha)?);
            }
        }
        outcomes.push(OutcomeSensitivity {
            outcome: name.clone(),
            table: *table,
            side,
            gamma_star: gamma_star(table, side, s.alpha)?,
            sweep: gamma_sweep(table, side, &s.gamma_grid)?,
            equivalence,
        });
    }
    Ok(SensitivityReport {
        schema_version: SCHEMA_VERSION,
        alpha: s.alpha,
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub target_size: usize,
    pub pairs: usize,
    /// Matched treated and control means against the target, in target SDs.
    pub treated_vs_target: Vec<StandardizedDifference>,
    pub control_vs_target: Vec<StandardizedDifference>,
    pub max_abs_std_diff: f64,
    pub estimates: Vec<(String, EffectEstimate)>,
    #[serde(skip)]
    pub sample: Option<MatchedSample>,
}

fn matches_filter(view: &DesignView, f: &FilterCondition, i: usize) -> Result<bool> {
    let numeric_ok = |x: f64| f.min.is_none_or(|m| x >= m) && f.max.is_none_or(|m| x <= m);
    if let Ok(v) = view.running_values(&f.column) {
        return Ok(numeric_ok(v[i]));
    }
    let c = view.covariate(&f.column)?;
    Ok(match &c.values {
        CovariateValues::Numeric(v) => numeric_ok(v[i]) && f.equals.as_ref().is_none_or(|e| e.parse::<f64>().is_ok_and(|e| e == v[i])),
        CovariateValues::Categorical { .. } => f.equals.as_ref().is_none_or(|e| &c.values.key(i) == e),
    })
}

/// Units of the target population defined by the generalization filter.
pub fn target_units(config: &AnalysisConfig, view: &DesignView) -> Result<Vec<usize>> {
    let filter = config.generalization.as_ref().map(|g| g.target.as_slice()).unwrap_or(&[]);
    let mut out = Vec::new();
    for i in 0..view.len() {
        let mut keep = true;
        for f in filter {
            keep &= matches_filter(view, f, i)?;
        }
        if keep {
            out.push(i);
        }
    }
    Ok(out)
}

/// Representative matching inside the neighborhood toward the target
/// population, then TATE estimates on the matched pairs.
pub fn run_generalization(config: &AnalysisConfig, frame: &StudyFrame, spec: &NeighborhoodSpec) -> Result<GeneralizationReport> {
    let g = config.generalization.clone().unwrap_or_default();
    let view = strip_outcomes(frame);
    let target = target_units(config, &view)?;
    let (treated, controls) = neighborhood_units(&view, &config.rules, spec)?;
    let functions = BalanceFunctionSet::from_view(&view, config.selection.tolerance_sd, &[])?;
    let problem = MatchProblem::from_view(&view, treated, controls, &functions, BalanceReference::GroupDifference)?;
    let summary = TargetPopulation::from_units(&problem.values, &target)?;
    let sample = representative_match(&problem, &summary, g.cap)?;
    if sample.is_empty() {
        return Err(Error::InsufficientData("no pair is representative of the target population".into()));
    }
    let names = functions.names();
    let versus = |units: Vec<usize>| -> Vec<StandardizedDifference> {
        problem
            .values
            .iter()
            .enumerate()
            .map(|(q, v)| {
                let m = units.iter().map(|&i| v[i]).sum::<f64>() / units.len() as f64;
                let sd = summary.sds[q];
                StandardizedDifference {
                    name: names[q].clone(),
                    treated_mean: m,
                    control_mean: summary.means[q],
                    value: if sd > 0.0 { Some((m - summary.means[q]) / sd) } else { Some(0.0).filter(|_| (m - summary.means[q]).abs() < 1e-12) },
                }
            })
            .collect()
    };
    let treated_vs_target = versus(sample.treated());
    let control_vs_target = versus(sample.controls());
    let max_abs_std_diff = treated_vs_target.iter().chain(&control_vs_target).map(|d| d.value.map_or(f64::INFINITY, f64::abs)).fold(0.0, f64::max);
    let outcomes = if g.outcomes.is_empty() {
        frame.outcomes.iter().filter(|o| o.kind == OutcomeKind::Binary).map(|o| o.name.clone()).collect()
    } else {
        g.outcomes.clone()
    };
    let mut estimates = Vec::new();
    for name in outcomes {
        let o = frame.outcome(&name)?;
        let mut est = match o.kind {
            OutcomeKind::Binary => {
                let t = pair_table(&sample, &o.values)?;
                let mut est = risk_difference(&t, config.estimation.level)?;
                est.pvalue = Some(mcnemar_test(&t, config.estimation.side).pvalue);
                est
            }
            OutcomeKind::Real => difference_in_means(&sample, &o.values, config.estimation.draws, sub_seed(config.seed, SEED_ESTIMATE - 1), config.estimation.level)?,
        };
        est.estimand = Estimand::Tate;
        estimates.push((name, est));
    }
    Ok(GeneralizationReport {
        target_size: target.len(),
        pairs: sample.len(),
        treated_vs_target,
        control_vs_target,
        max_abs_std_diff,
        estimates,
        sample: Some(sample),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub seed: u64,
    pub neighborhood: NeighborhoodSpec,
    pub treated_in_neighborhood: usize,
    pub controls_in_neighborhood: usize,
    pub pairs: usize,
    pub outcomes: Vec<OutcomeEstimates>,
    #[serde(default)]
    pub weighting: Option<WeightSummary>,
    #[serde(default)]
    pub generalization: Option<GeneralizationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub controls: usize,
    pub effective_sample_size: f64,
    pub objective: f64,
    pub kkt_residual: f64,
}

impl WeightSummary {
    pub fn of(w: &WeightSolution) -> Self {
        let s2: f64 = w.weights.iter().map(|x| x * x).sum();
        WeightSummary {
            controls: w.weights.len(),
            effective_sample_size: if s2 > 0.0 { 1.0 / s2 } else { 0.0 },
            objective: w.objective,
            kkt_residual: w.kkt_residual,
        }
    }
}

/// File names of the complete bundle.
pub const ARTIFACTS: [&str; 7] = [
    "selection_trace.csv",
    "balance.csv",
    "pair_tables.csv",
    "estimates.json",
    "sensitivity.json",
    "outcome_summary.csv",
    "summary.txt",
];

pub const FAILED_MARKER: &str = "FAILED";

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: Vec<u8>,
}

#[derive(Debug)]
pub struct ReportBundle {
    pub artifacts: Vec<Artifact>,
    pub failure: Option<StageError>,
}

impl ReportBundle {
    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.artifacts.iter().find(|a| a.name == name).map(|a| a.contents.as_slice())
    }

    pub fn exit_code(&self) -> i32 {
        self.failure.as_ref().map_or(0, |f| f.stage.exit_code())
    }

    /// Writes every artifact into `dir`, plus the failure marker when a
    /// stage failed.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let marker = dir.join(FAILED_MARKER);
        if marker.exists() {
            std::fs::remove_file(&marker)?;
        }
        for a in &self.artifacts {
            std::fs::write(dir.join(&a.name), &a.contents)?;
        }
        if let Some(f) = &self.failure {
            std::fs::write(marker, format!("stage: {}\nerror: {}\n", f.stage.name(), f.error))?;
        }
        Ok(())
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

#[derive(Default)]
struct Progress {
    trace: Option<String>,
    selected: Option<NeighborhoodSpec>,
    analysis: Option<StudyFrame>,
    matched: Option<MatchOutput>,
    weights: Option<WeightOutput>,
    balance: Option<String>,
    estimates: Option<Vec<OutcomeEstimates>>,
    sensitivity: Option<SensitivityReport>,
    generalization: Option<GeneralizationReport>,
}

fn summary_text(config: &AnalysisConfig, p: &Progress, failure: Option<&StageError>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Complex discontinuity design analysis (seed {})", config.seed);
    if let Some(spec) = &p.selected {
        let _ = writeln!(s, "\nSelected neighborhood:");
        for (j, rule) in config.rules.rules.iter().enumerate() {
            let parts: Vec<String> = (0..rule.clauses.len())
                .map(|k| {
                    let (lo, hi) = spec.interval(&config.rules, j, k);
                    format!("{} in [{lo:.2}, {hi:.2}]", rule.clauses[k].variable)
                })
                .collect();
            let name = if rule.name.is_empty() { format!("rule {}", j + 1) } else { rule.name.clone() };
            let _ = writeln!(s, "  {name}: {}", parts.join(", "));
        }
    }
    if let Some(m) = &p.matched {
        let _ = writeln!(
            s,
            "\nNeighborhood: {} treated, {} controls; matched pairs: {}",
            m.treated_in.len(),
            m.controls_in.len(),
            m.sample.len()
        );
    }
    if let Some(w) = &p.weights {
        let ws = WeightSummary::of(&w.solution);
        let _ = writeln!(s, "Balancing weights: {} controls, effective sample size {:.1}", ws.controls, ws.effective_sample_size);
    }
    if let Some(est) = &p.estimates {
        let _ = writeln!(s, "\nEffect estimates:");
        for o in est {
            for e in &o.estimates {
                let ci = e.ci.map(|(a, b)| format!(" [{a:.4}, {b:.4}]")).unwrap_or_default();
                let pv = e.pvalue.map(|p| format!(" p={p:.4}")).unwrap_or_default();
                let _ = writeln!(s, "  {:<24} {:<10} {:>8.4}{ci}{pv}", o.outcome, format!("{:?}", e.method).to_lowercase(), e.point);
            }
        }
    }
    if let Some(sens) = &p.sensitivity {
        let _ = writeln!(s, "\nSensitivity (alpha {}):", sens.alpha);
        for o in &sens.outcomes {
            let g = if o.gamma_star > 0.0 { format!("{:.4}", o.gamma_star) } else { "not significant at gamma = 1".into() };
            let _ = writeln!(s, "  {:<24} gamma* {g}", o.outcome);
        }
    }
    if let Some(g) = &p.generalization {
        let _ = writeln!(s, "\nGeneralization: target of {} units, {} representative pairs, max |std diff| {:.3}", g.target_size, g.pairs, g.max_abs_std_diff);
        for (name, e) in &g.estimates {
            let _ = writeln!(s, "  TATE {name:<19} {:>8.4}", e.point);
        }
    }
    match failure {
        Some(f) => {
            let _ = writeln!(s, "\nFAILED at stage {}: {}", f.stage.name(), f.error);
        }
        None => {
            let _ = writeln!(s, "\nCompleted.");
        }
    }
    s
}

fn pipeline_stages(config: &AnalysisConfig, frame: &StudyFrame, p: &mut Progress) -> std::result::Result<(), StageError> {
    let sel = run_selection(config, frame).at(Stage::Select)?;
    p.trace = Some(sel.trace_csv);
    let spec = sel.selected.ok_or(Error::NoPassingNeighborhood).at(Stage::Select)?;
    p.selected = Some(spec.clone());
    let analysis = analysis_frame(config, frame).at(Stage::Select)?;

    let matched = run_matching(config, &analysis, &spec).at(Stage::Match)?;
    p.balance = Some(balance_csv(&balance_rows(config, &analysis, &matched.treated_in, &matched.controls_in, Some(&matched.sample), None).at(Stage::Match)?).at(Stage::Match)?);
    p.matched = Some(matched);

    if config.weighting.is_some() {
        let w = run_weighting(config, &analysis, &spec).at(Stage::Weigh)?;
        let m = p.matched.as_ref().expect("set above");
        p.balance = Some(balance_csv(&balance_rows(config, &analysis, &m.treated_in, &m.controls_in, Some(&m.sample), Some(&w.solution)).at(Stage::Weigh)?).at(Stage::Weigh)?);
        p.weights = Some(w);
    }

    let m = p.matched.as_ref().expect("set above");
    p.estimates = Some(run_estimation(config, &analysis, &m.sample, p.weights.as_ref()).at(Stage::Estimate)?);

    let tables: Vec<(String, PairTable)> = p.estimates.iter().flatten().filter_map(|o| o.table.map(|t| (o.outcome.clone(), t))).collect();
    p.sensitivity = Some(run_sensitivity(config, &tables).at(Stage::Sensitivity)?);

    if config.generalization.is_some() {
        p.generalization = Some(run_generalization(config, &analysis, &spec).at(Stage::Generalize)?);
    }
    p.analysis = Some(analysis);
    Ok(())
}

fn assemble(config: &AnalysisConfig, frame: &StudyFrame, p: &Progress, failure: Option<&StageError>) -> Result<Vec<Artifact>> {
    let mut out = Vec::new();
    let mut push = |name: &str, contents: Vec<u8>| {
        out.push(Artifact {
            name: name.to_string(),
            contents,
        })
    };
    if let Some(t) = &p.trace {
        push(ARTIFACTS[0], t.clone().into_bytes());
    }
    if let Some(b) = &p.balance {
        push(ARTIFACTS[1], b.clone().into_bytes());
    }
    if let (Some(est), Some(m)) = (&p.estimates, &p.matched) {
        push(ARTIFACTS[2], pair_tables_csv(est)?.into_bytes());
        let report = EstimateReport {
            schema_version: SCHEMA_VERSION,
            seed: config.seed,
            neighborhood: m.neighborhood.clone(),
            treated_in_neighborhood: m.treated_in.len(),
            controls_in_neighborhood: m.controls_in.len(),
            pairs: m.sample.len(),
            outcomes: est.clone(),
            weighting: p.weights.as_ref().map(|w| WeightSummary::of(&w.solution)),
            generalization: p.generalization.clone(),
        };
        push(ARTIFACTS[3], to_json(&report)?);
    }
    if let Some(s) = &p.sensitivity {
        push(ARTIFACTS[4], to_json(s)?);
    }
    if let Some(m) = &p.matched {
        let analysis = p.analysis.as_ref().unwrap_or(frame);
        push(ARTIFACTS[5], outcome_summary_csv(analysis, &m.sample)?.into_bytes());
    }
    push(ARTIFACTS[6], summary_text(config, p, failure).into_bytes());
    Ok(out)
}

/// Runs every configured stage on a validated frame. Artifacts of the
/// stages that completed are kept when a later stage fails.
pub fn run_pipeline(config: &AnalysisConfig, frame: &StudyFrame) -> ReportBundle {
    let mut p = Progress::default();
    let failure = pipeline_stages(config, frame, &mut p).err();
    if failure.is_some() && p.analysis.is_none() {
        p.analysis = analysis_frame(config, frame).ok();
    }
    match assemble(config, frame, &p, failure.as_ref()) {
        Ok(artifacts) => ReportBundle { artifacts, failure },
        Err(e) => ReportBundle {
            artifacts: Vec::new(),
            failure: Some(failure.unwrap_or(StageError { stage: Stage::Output, error: e })),
        },
    }
}
