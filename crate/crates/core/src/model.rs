//! Shared data model: running variables, treatment rules, neighborhoods,
//! study frames and the outcome-free design view, matched samples and
//! balancing-weight solutions.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningVariableDef {
    pub id: String,
    #[serde(default)]
    pub description: String,
}

/// How a running value is compared against its cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    /// `R < c`
    StrictlyBelow,
    /// `R <= c`
    #[default]
    AtOrBelow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub variable: String,
    pub cutoff: f64,
    #[serde(default)]
    pub comparator: Comparator,
}

/// A conjunction of cutoff clauses. A unit is assigned by the rule when
/// every clause holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentRule {
    #[serde(default)]
    pub name: String,
    pub clauses: Vec<Clause>,
}

/// Rules composed by OR into a single treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub variables: Vec<RunningVariableDef>,
    pub rules: Vec<TreatmentRule>,
    /// Resolution of the running-variable grid (e.g. 0.1 for grades). When
    /// set, running values are snapped to the grid before any comparison.
    #[serde(default)]
    pub grid: Option<f64>,
}

impl RuleSet {
    pub fn new(
        variables: Vec<RunningVariableDef>,
        rules: Vec<TreatmentRule>,
        grid: Option<f64>,
    ) -> Result<Self> {
        let set = RuleSet {
            variables,
            rules,
            grid,
        };
        set.check()?;
        Ok(set)
    }

    pub fn check(&self) -> Result<()> {
        if self.rules.is_empty() {
            return Err(Error::InvalidRules("at least one rule is required".into()));
        }
        let mut seen = HashMap::new();
        for v in &self.variables {
            if seen.insert(v.id.as_str(), ()).is_some() {
                return Err(Error::InvalidRules(format!(
                    "running variable `{}` declared twice",
                    v.id
                )));
            }
        }
        for (j, rule) in self.rules.iter().enumerate() {
            if rule.clauses.is_empty() {
                return Err(Error::InvalidRules(format!("rule {} has no clauses", j + 1)));
            }
            for clause in &rule.clauses {
                if !clause.cutoff.is_finite() {
                    return Err(Error::InvalidRules(format!(
                        "rule {} has a non-finite cutoff",
                        j + 1
                    )));
                }
                if !seen.contains_key(clause.variable.as_str()) {
                    return Err(Error::InvalidRules(format!(
                        "rule {} references undeclared running variable `{}`",
                        j + 1,
                        clause.variable
                    )));
                }
            }
        }
        if let Some(g) = self.grid {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::InvalidRules("grid resolution must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn num_rules(&self) -> usize {
        self.rules.len()
    }

    /// Map from running variable id to the indices of the rules that use it.
    pub fn shared_variables(&self) -> BTreeMap<String, Vec<usize>> {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for v in &self.variables {
            map.entry(v.id.clone()).or_default();
        }
        for (j, rule) in self.rules.iter().enumerate() {
            for clause in &rule.clauses {
                let e = map.entry(clause.variable.clone()).or_default();
                if !e.contains(&j) {
                    e.push(j);
                }
            }
        }
        map
    }
}

/// Lower and upper half-widths around one cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfWidths {
    pub lower: f64,
    pub upper: f64,
}

impl HalfWidths {
    pub fn symmetric(w: f64) -> Self {
        HalfWidths { lower: w, upper: w }
    }
}

/// Half-widths for every (rule, clause) pair; `widths[j][k]` belongs to
/// clause `k` of rule `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    pub widths: Vec<Vec<HalfWidths>>,
}

impl NeighborhoodSpec {
    pub fn uniform(rules: &RuleSet, w: HalfWidths) -> Self {
        NeighborhoodSpec {
            widths: rules.rules.iter().map(|r| vec![w; r.clauses.len()]).collect(),
        }
    }

    pub fn check(&self, rules: &RuleSet) -> Result<()> {
        if self.widths.len() != rules.rules.len() {
            return Err(Error::InvalidNeighborhood(format!(
                "expected widths for {} rules, found {}",
                rules.rules.len(),
                self.widths.len()
            )));
        }
        for (j, (row, rule)) in self.widths.iter().zip(&rules.rules).enumerate() {
            if row.len() != rule.clauses.len() {
                return Err(Error::InvalidNeighborhood(format!(
                    "rule {} has {} clauses but {} half-widths",
                    j + 1,
                    rule.clauses.len(),
                    row.len()
                )));
            }
            for hw in row {
                if !(hw.lower >= 0.0 && hw.upper >= 0.0) || !hw.lower.is_finite() || !hw.upper.is_finite() {
                    return Err(Error::InvalidNeighborhood(format!(
                        "rule {} has a negative or non-finite half-width",
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Closed interval `[c - lower, c + upper]` for clause `k` of rule `j`.
    pub fn interval(&self, rules: &RuleSet, j: usize, k: usize) -> (f64, f64) {
        let c = rules.rules[j].clauses[k].cutoff;
        let hw = self.widths[j][k];
        (c - hw.lower, c + hw.upper)
    }

    /// True when every interval of `self` contains the matching interval of `other`.
    pub fn contains(&self, other: &NeighborhoodSpec) -> bool {
        self.widths.len() == other.widths.len()
            && self.widths.iter().zip(&other.widths).all(|(a, b)| {
                a.len() == b.len()
                    && a
                        .iter()
                        .zip(b)
                        .all(|(x, y)| x.lower >= y.lower - 1e-12 && x.upper >= y.upper - 1e-12)
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateRole {
    /// Matched exactly; never enters mean-balance constraints.
    ExactMatch,
    /// Balanced in means.
    MeanBalance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateValues {
    Numeric(Vec<f64>),
    /// `codes[i]` indexes `levels`; `None` marks a missing value.
    Categorical {
        levels: Vec<String>,
        codes: Vec<Option<usize>>,
    },
}

impl CovariateValues {
    pub fn len(&self) -> usize {
        match self {
            CovariateValues::Numeric(v) => v.len(),
            CovariateValues::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value as a string key, used for exact-match strata.
    pub fn key(&self, i: usize) -> String {
        match self {
            CovariateValues::Numeric(v) => format!("{}", v[i]),
            CovariateValues::Categorical { levels, codes } => match codes[i] {
                Some(c) => levels[c].clone(),
                None => String::from("<missing>"),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub role: CovariateRole,
    pub values: CovariateValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericColumn {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Binary,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub name: String,
    pub kind: OutcomeKind,
    /// Measurement period, e.g. a calendar year.
    #[serde(default)]
    pub period: Option<String>,
    pub values: Vec<f64>,
}

/// Unit-level study table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyFrame {
    pub unit_ids: Vec<String>,
    /// Running variables by id, in declaration order.
    pub running: Vec<NumericColumn>,
    /// Primary covariates `X`.
    pub covariates: Vec<Covariate>,
    /// Secondary covariates `X^test`.
    pub tests: Vec<NumericColumn>,
    pub outcomes: Vec<Outcome>,
    #[serde(default)]
    pub sample: Option<Vec<bool>>,
}

impl StudyFrame {
    pub fn len(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_ids.is_empty()
    }

    pub fn outcome(&self, name: &str) -> Result<&Outcome> {
        self.outcomes
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// Rows `idx` of the frame, in the given order.
    pub fn subset(&self, idx: &[usize]) -> StudyFrame {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        StudyFrame {
            unit_ids: idx.iter().map(|&i| self.unit_ids[i].clone()).collect(),
            running: self
                .running
                .iter()
                .map(|c| NumericColumn {
                    name: c.name.clone(),
                    values: pick(&c.values),
                })
                .collect(),
            covariates: self
                .covariates
                .iter()
                .map(|c| Covariate {
                    name: c.name.clone(),
                    role: c.role,
                    values: match &c.values {
                        CovariateValues::Numeric(v) => CovariateValues::Numeric(pick(v)),
                        CovariateValues::Categorical { levels, codes } => CovariateValues::Categorical {
                            levels: levels.clone(),
                            codes: idx.iter().map(|&i| codes[i]).collect(),
                        },
                    },
                })
                .collect(),
            tests: self
                .tests
                .iter()
                .map(|c| NumericColumn {
                    name: c.name.clone(),
                    values: pick(&c.values),
                })
                .collect(),
            outcomes: self
                .outcomes
                .iter()
                .map(|o| Outcome {
                    name: o.name.clone(),
                    kind: o.kind,
                    period: o.period.clone(),
                    values: pick(&o.values),
                })
                .collect(),
            sample: self.sample.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
        }
    }
}

/// Outcome-free view of a [`StudyFrame`]. Design-stage operations take this
/// type, so they cannot read outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignView {
    unit_ids: Vec<String>,
    running: Vec<NumericColumn>,
    covariates: Vec<Covariate>,
    tests: Vec<NumericColumn>,
    sample: Option<Vec<bool>>,
}

impl DesignView {
    pub fn len(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_ids.is_empty()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn running(&self) -> &[NumericColumn] {
        &self.running
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn tests(&self) -> &[NumericColumn] {
        &self.tests
    }

    pub fn sample(&self) -> Option<&[bool]> {
        self.sample.as_deref()
    }

    pub fn running_values(&self, id: &str) -> Result<&[f64]> {
        self.running
            .iter()
            .find(|c| c.name == id)
            .map(|c| c.values.as_slice())
            .ok_or_else(|| Error::UnknownColumn(id.to_string()))
    }

    pub fn covariate(&self, name: &str) -> Result<&Covariate> {
        self.covariates
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn test_values(&self, name: &str) -> Result<&[f64]> {
        self.tests
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// Names of every column visible through the view.
    pub fn column_names(&self) -> Vec<String> {
        self.running
            .iter()
            .map(|c| c.name.clone())
            .chain(self.covariates.iter().map(|c| c.name.clone()))
            .chain(self.tests.iter().map(|c| c.name.clone()))
            .collect()
    }

    pub fn exact_columns(&self) -> impl Iterator<Item = &Covariate> {
        self.covariates.iter().filter(|c| c.role == CovariateRole::ExactMatch)
    }

    pub fn balance_columns(&self) -> impl Iterator<Item = &Covariate> {
        self.covariates.iter().filter(|c| c.role == CovariateRole::MeanBalance)
    }

    /// Exact-match stratum key of unit `i`; empty when no exact columns exist.
    pub fn exact_key(&self, i: usize) -> String {
        let parts: Vec<String> = self.exact_columns().map(|c| c.values.key(i)).collect();
        parts.join("|")
    }
}

/// Returns the outcome-free view of `frame`.
pub fn strip_outcomes(frame: &StudyFrame) -> DesignView {
    DesignView {
        unit_ids: frame.unit_ids.clone(),
        running: frame.running.clone(),
        covariates: frame.covariates.clone(),
        tests: frame.tests.clone(),
        sample: frame.sample.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    DuplicateUnitId { id: String, rows: Vec<usize> },
    MissingRunningVariable { variable: String },
    NonFiniteRunningValue { variable: String, row: usize },
    LengthMismatch { column: String, expected: usize, found: usize },
    MissingCovariate { column: String, row: usize },
    EmptyLevelSet { column: String },
    UndeclaredLevel { column: String, row: usize, code: usize },
    MissingTestValue { column: String, row: usize },
    NonBinaryOutcome { column: String, row: usize, value: f64 },
    DuplicateColumn { column: String },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::DuplicateUnitId { id, rows } => {
                write!(f, "unit id `{id}` appears in rows {rows:?}")
            }
            ValidationIssue::MissingRunningVariable { variable } => {
                write!(f, "running variable `{variable}` is declared by the rules but absent")
            }
            ValidationIssue::NonFiniteRunningValue { variable, row } => {
                write!(f, "running variable `{variable}` is missing or non-finite at row {row}")
            }
            ValidationIssue::LengthMismatch { column, expected, found } => {
                write!(f, "column `{column}` has {found} values, expected {expected}")
            }
            ValidationIssue::MissingCovariate { column, row } => {
                write!(f, "covariate `{column}` is missing at row {row}")
            }
            ValidationIssue::EmptyLevelSet { column } => {
                write!(f, "categorical column `{column}` has no declared levels")
            }
            ValidationIssue::UndeclaredLevel { column, row, code } => {
                write!(f, "categorical column `{column}` has undeclared level code {code} at row {row}")
            }
            ValidationIssue::MissingTestValue { column, row } => {
                write!(f, "secondary covariate `{column}` is missing at row {row}")
            }
            ValidationIssue::NonBinaryOutcome { column, row, value } => {
                write!(f, "binary outcome `{column}` has value {value} at row {row}")
            }
            ValidationIssue::DuplicateColumn { column } => write!(f, "column `{column}` declared twice"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidFrame(self.issues))
        }
    }
}

/// Checks every frame invariant against `rules`; the frame is acceptable
/// iff the returned report is empty.
pub fn validate_frame(frame: &StudyFrame, rules: &RuleSet) -> ValidationReport {
    let mut issues = Vec::new();
    let n = frame.unit_ids.len();

    let mut rows_by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (row, id) in frame.unit_ids.iter().enumerate() {
        rows_by_id.entry(id.as_str()).or_default().push(row);
    }
    for (id, rows) in rows_by_id {
        if rows.len() > 1 {
            issues.push(ValidationIssue::DuplicateUnitId {
                id: id.to_string(),
                rows,
            });
        }
    }

    let mut names: BTreeMap<&str, usize> = BTreeMap::new();
    let all_names = frame
        .running
        .iter()
        .map(|c| c.name.as_str())
        .chain(frame.covariates.iter().map(|c| c.name.as_str()))
        .chain(frame.tests.iter().map(|c| c.name.as_str()))
        .chain(frame.outcomes.iter().map(|c| c.name.as_str()));
    for name in all_names {
        *names.entry(name).or_default() += 1;
    }
    for (name, count) in names {
        if count > 1 {
            issues.push(ValidationIssue::DuplicateColumn {
                column: name.to_string(),
            });
        }
    }

    for v in &rules.variables {
        match frame.running.iter().find(|c| c.name == v.id) {
            None => issues.push(ValidationIssue::MissingRunningVariable {
                variable: v.id.clone(),
            }),
            Some(col) => {
                if col.values.len() != n {
                    issues.push(ValidationIssue::LengthMismatch {
                        column: col.name.clone(),
                        expected: n,
                        found: col.values.len(),
                    });
                    continue;
                }
                for (row, x) in col.values.iter().enumerate() {
                    if !x.is_finite() {
                        issues.push(ValidationIssue::NonFiniteRunningValue {
                            variable: v.id.clone(),
                            row,
                        });
                    }
                }
            }
        }
    }

    for cov in &frame.covariates {
        if cov.values.len() != n {
            issues.push(ValidationIssue::LengthMismatch {
                column: cov.name.clone(),
                expected: n,
                found: cov.values.len(),
            });
            continue;
        }
        match &cov.values {
            CovariateValues::Numeric(v) => {
                for (row, x) in v.iter().enumerate() {
                    if !x.is_finite() {
                        issues.push(ValidationIssue::MissingCovariate {
                            column: cov.name.clone(),
                            row,
                        });
                    }
                }
            }
            CovariateValues::Categorical { levels, codes } => {
                if levels.is_empty() {
                    issues.push(ValidationIssue::EmptyLevelSet {
                        column: cov.name.clone(),
                    });
                }
                for (row, code) in codes.iter().enumerate() {
                    match code {
                        None => issues.push(ValidationIssue::MissingCovariate {
                            column: cov.name.clone(),
                            row,
                        }),
                        Some(c) if *c >= levels.len() => issues.push(ValidationIssue::UndeclaredLevel {
                            column: cov.name.clone(),
                            row,
                            code: *c,
                        }),
                        _ => {}
                    }
                }
            }
        }
    }

    for t in &frame.tests {
        if t.values.len() != n {
            issues.push(ValidationIssue::LengthMismatch {
                column: t.name.clone(),
                expected: n,
                found: t.values.len(),
            });
            continue;
        }
        for (row, x) in t.values.iter().enumerate() {
            if !x.is_finite() {
                issues.push(ValidationIssue::MissingTestValue {
                    column: t.name.clone(),
                    row,
                });
            }
        }
    }

    for o in &frame.outcomes {
        if o.values.len() != n {
            issues.push(ValidationIssue::LengthMismatch {
                column: o.name.clone(),
                expected: n,
                found: o.values.len(),
            });
            continue;
        }
        if o.kind == OutcomeKind::Binary {
            for (row, &y) in o.values.iter().enumerate() {
                if y.is_finite() && y != 0.0 && y != 1.0 {
                    issues.push(ValidationIssue::NonBinaryOutcome {
                        column: o.name.clone(),
                        row,
                        value: y,
                    });
                }
            }
        }
    }

    if let Some(s) = &frame.sample {
        if s.len() != n {
            issues.push(ValidationIssue::LengthMismatch {
                column: "sample".into(),
                expected: n,
                found: s.len(),
            });
        }
    }

    ValidationReport { issues }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceSide {
    Treated,
    Control,
    Difference,
}

/// Achieved imbalance for one balance function and one side of the match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceEntry {
    pub function: String,
    pub side: BalanceSide,
    pub imbalance: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// Upper bound equals the incumbent.
    Optimal,
    /// Search stopped at a limit; see `gap`.
    Feasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    /// Row index (into the frame the match was computed on) of the treated unit.
    pub treated: usize,
    pub control: usize,
    pub stratum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSample {
    pub pairs: Vec<MatchedPair>,
    pub balance: Vec<BalanceEntry>,
    pub status: SolveStatus,
    /// Upper bound on the optimal cardinality minus the returned cardinality.
    pub gap: f64,
    pub upper_bound: f64,
    pub nodes: usize,
    /// Solver diagnostics.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl MatchedSample {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn treated(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.treated).collect()
    }

    pub fn controls(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.control).collect()
    }

    /// Disjointness, exact-key agreement and tolerance checks, in O(pairs).
    pub fn verify(&self, view: &DesignView) -> std::result::Result<(), String> {
        let mut used = std::collections::HashSet::with_capacity(2 * self.pairs.len());
        for (k, p) in self.pairs.iter().enumerate() {
            if !used.insert(p.treated) || !used.insert(p.control) {
                return Err(format!("pair {k} reuses a unit"));
            }
            if view.exact_key(p.treated) != view.exact_key(p.control) {
                return Err(format!("pair {k} disagrees on exact-match columns"));
            }
        }
        for b in &self.balance {
            if b.imbalance > b.tolerance + 1e-9 {
                return Err(format!(
                    "balance function `{}` ({:?}) has imbalance {} above tolerance {}",
                    b.function, b.side, b.imbalance, b.tolerance
                ));
            }
        }
        Ok(())
    }
}

/// Minimum-variance balancing weights over the control units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSolution {
    /// Row indices of the control units, aligned with `weights`.
    pub controls: Vec<usize>,
    pub weights: Vec<f64>,
    /// `sum (w_i - 1/n)^2`.
    pub objective: f64,
    /// Per balance function: `tolerance - |achieved - target|`.
    pub slacks: Vec<f64>,
    /// Multipliers of the balance constraints (signed by the active side).
    pub multipliers: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl WeightSolution {
    pub fn recomputed_objective(&self) -> f64 {
        let n = self.weights.len() as f64;
        self.weights.iter().map(|w| (w - 1.0 / n).powi(2)).sum()
    }
}
