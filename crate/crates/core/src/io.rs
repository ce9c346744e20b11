//! CSV ingestion and export of study frames, and the JSON analysis config.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::estimate::{EstimateMethod, Side, DEFAULT_BOOTSTRAP, DEFAULT_LEVEL};
use crate::model::{Covariate, CovariateRole, CovariateValues, NeighborhoodSpec, NumericColumn, Outcome, OutcomeKind, RuleSet, StudyFrame};
use crate::neighborhood::ExpansionPolicy;
use crate::sensitivity::AttributionDirection;
use crate::{Error, Result};

/// Version stamped into every JSON report and config.
pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeColumn {
    pub name: String,
    pub kind: OutcomeKind,
    #[serde(default)]
    pub period: Option<String>,
}

/// Role of every CSV column used by an analysis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    #[serde(default = "default_id")]
    pub id: String,
    pub running: Vec<String>,
    /// Categorical columns matched exactly.
    #[serde(default)]
    pub exact: Vec<String>,
    /// Numeric columns balanced in means.
    #[serde(default)]
    pub balance: Vec<String>,
    /// Categorical columns balanced through level indicators.
    #[serde(default)]
    pub balance_categorical: Vec<String>,
    /// Secondary covariates used only to test balance.
    #[serde(default)]
    pub tests: Vec<String>,
    #[serde(default)]
    pub outcomes: Vec<OutcomeColumn>,
}

fn default_id() -> String {
    "unit_id".into()
}

impl ColumnMap {
    /// Roles of the columns of an existing frame.
    pub fn of_frame(frame: &StudyFrame) -> Self {
        let numeric = |c: &&Covariate| matches!(c.values, CovariateValues::Numeric(_));
        ColumnMap {
            id: default_id(),
            running: frame.running.iter().map(|c| c.name.clone()).collect(),
            exact: frame.covariates.iter().filter(|c| c.role == CovariateRole::ExactMatch).map(|c| c.name.clone()).collect(),
            balance: frame
                .covariates
                .iter()
                .filter(|c| c.role == CovariateRole::MeanBalance)
                .filter(numeric)
                .map(|c| c.name.clone())
                .collect(),
            balance_categorical: frame
                .covariates
                .iter()
                .filter(|c| c.role == CovariateRole::MeanBalance)
                .filter(|c| !numeric(c))
                .map(|c| c.name.clone())
                .collect(),
            tests: frame.tests.iter().map(|c| c.name.clone()).collect(),
            outcomes: frame
                .outcomes
                .iter()
                .map(|o| OutcomeColumn {
                    name: o.name.clone(),
                    kind: o.kind,
                    period: o.period.clone(),
                })
                .collect(),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        let mut v = vec![self.id.as_str()];
        v.extend(self.running.iter().map(String::as_str));
        v.extend(self.exact.iter().map(String::as_str));
        v.extend(self.balance.iter().map(String::as_str));
        v.extend(self.balance_categorical.iter().map(String::as_str));
        v.extend(self.tests.iter().map(String::as_str));
        v.extend(self.outcomes.iter().map(|o| o.name.as_str()));
        v
    }

    fn check(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for n in self.names() {
            if !seen.insert(n) {
                return Err(Error::InvalidArgument(format!("column `{n}` is assigned more than one role")));
            }
        }
        if self.running.is_empty() {
            return Err(Error::InvalidArgument("at least one running variable column is required".into()));
        }
        Ok(())
    }
}

fn parse_number(s: &str, row: usize, column: &str) -> Result<f64> {
    let t = s.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    t.parse::<f64>().map_err(|e| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("`{t}`: {e}"),
    })
}

fn categorical(values: Vec<String>) -> CovariateValues {
    let levels: Vec<String> = values.iter().filter(|v| !v.is_empty()).cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let index: BTreeMap<&str, usize> = levels.iter().enumerate().map(|(k, l)| (l.as_str(), k)).collect();
    let codes = values.iter().map(|v| index.get(v.as_str()).copied()).collect();
    CovariateValues::Categorical { levels, codes }
}

/// Reads a UTF-8 CSV with a header row. Rows are data rows counted from 1.
/// Empty cells become missing values; categorical levels are sorted.
pub fn read_frame<R: Read>(input: R, columns: &ColumnMap) -> Result<StudyFrame> {
    columns.check()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let position = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| Error::UnknownColumn(name.to_string()));
    let wanted: Vec<(String, usize)> = columns.names().into_iter().map(|n| Ok((n.to_string(), position(n)?))).collect::<Result<_>>()?;
    let mut cells: BTreeMap<String, Vec<String>> = wanted.iter().map(|(n, _)| (n.clone(), Vec::new())).collect();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (name, idx) in &wanted {
            let v = rec.get(*idx).ok_or_else(|| Error::Parse {
                row: r + 1,
                column: name.clone(),
                message: "row is shorter than the header".into(),
            })?;
            cells.get_mut(name).expect("declared column").push(v.trim().to_string());
        }
    }
    let mut take = |name: &str| cells.remove(name).unwrap_or_default();
    let numeric = |name: &str, raw: Vec<String>| -> Result<Vec<f64>> { raw.iter().enumerate().map(|(r, s)| parse_number(s, r + 1, name)).collect() };

    let unit_ids = take(&columns.id);
    let mut running = Vec::new();
    for n in &columns.running {
        running.push(NumericColumn {
            name: n.clone(),
            values: numeric(n, take(n))?,
        });
    }
    let mut covariates = Vec::new();
    for n in &columns.exact {
        covariates.push(Covariate {
            name: n.clone(),
            role: CovariateRole::ExactMatch,
            values: categorical(take(n)),
        });
    }
    for n in &columns.balance {
        let v = numeric(n, take(n))?;
        covariates.push(Covariate {
            name: n.clone(),
            role: CovariateRole::MeanBalance,
            values: CovariateValues::Numeric(v),
        });
    }
    for n in &columns.balance_categorical {
        covariates.push(Covariate {
            name: n.clone(),
            role: CovariateRole::MeanBalance,
            values: categorical(take(n)),
        });
    }
    let mut tests = Vec::new();
    for n in &columns.tests {
        tests.push(NumericColumn {
            name: n.clone(),
            values: numeric(n, take(n))?,
        });
    }
    let mut outcomes = Vec::new();
    for o in &columns.outcomes {
        outcomes.push(Outcome {
            name: o.name.clone(),
            kind: o.kind,
            period: o.period.clone(),
            values: numeric(&o.name, take(&o.name))?,
        });
    }
    Ok(StudyFrame {
        unit_ids,
        running,
        covariates,
        tests,
        outcomes,
        sample: None,
    })
}

fn fmt_number(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

/// Writes `frame` as CSV in the column order id, running, covariates,
/// tests, outcomes.
pub fn write_frame<W: Write>(frame: &StudyFrame, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![default_id()];
    header.extend(frame.running.iter().map(|c| c.name.clone()));
    header.extend(frame.covariates.iter().map(|c| c.name.clone()));
    header.extend(frame.tests.iter().map(|c| c.name.clone()));
    header.extend(frame.outcomes.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for i in 0..frame.len() {
        let mut row = vec![frame.unit_ids[i].clone()];
        row.extend(frame.running.iter().map(|c| fmt_number(c.values[i])));
        row.extend(frame.covariates.iter().map(|c| match &c.values {
            CovariateValues::Numeric(v) => fmt_number(v[i]),
            CovariateValues::Categorical { levels, codes } => codes[i].map(|k| levels[k].clone()).unwrap_or_default(),
        }));
        row.extend(frame.tests.iter().map(|c| fmt_number(c.values[i])));
        row.extend(frame.outcomes.iter().map(|c| fmt_number(c.values[i])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    /// Matching plus balance tests on `X^test`.
    #[default]
    Design,
    /// Regression tests of a planning-sample outcome.
    SemiDesign,
    /// Use `fixed` as given.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSettings {
    pub method: SelectionMethod,
    /// Symmetric starting half-width for every clause.
    pub initial_half_width: f64,
    /// Growth per step; the rule grid resolution when absent.
    pub step: Option<f64>,
    pub subject_steps: usize,
    pub shared_steps: usize,
    /// Explicit policy, overriding the four fields above.
    pub policy: Option<ExpansionPolicy>,
    pub fixed: Option<NeighborhoodSpec>,
    pub p_star: f64,
    pub tolerance_sd: f64,
    /// Also balance squares and pairwise products of numeric covariates.
    pub second_moments: bool,
    pub test_columns: Vec<String>,
    pub draws: usize,
    pub bonferroni: bool,
    pub rematch: bool,
    pub planning_fraction: f64,
    pub planning_outcome: Option<String>,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        SelectionSettings {
            method: SelectionMethod::Design,
            initial_half_width: 0.1,
            step: None,
            subject_steps: 5,
            shared_steps: 0,
            policy: None,
            fixed: None,
            p_star: 0.1,
            tolerance_sd: 0.05,
            second_moments: false,
            test_columns: Vec::new(),
            draws: 2000,
            bonferroni: false,
            rematch: false,
            planning_fraction: 0.2,
            planning_outcome: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingSettings {
    /// Re-pair the analysis sample to minimize covariate distance.
    pub rematch: bool,
}

impl Default for MatchingSettings {
    fn default() -> Self {
        MatchingSettings { rematch: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightingSettings {
    pub tolerance_sd: f64,
    pub folds: usize,
}

impl Default for WeightingSettings {
    fn default() -> Self {
        WeightingSettings { tolerance_sd: 0.05, folds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationSettings {
    /// Outcome columns to analyse; all when empty.
    pub outcomes: Vec<String>,
    pub methods: Vec<EstimateMethod>,
    pub level: f64,
    pub draws: usize,
    pub bootstrap: usize,
    pub side: Side,
    /// Exact-match column whose levels define subgroups.
    pub subgroup: Option<String>,
}

impl Default for EstimationSettings {
    fn default() -> Self {
        EstimationSettings {
            outcomes: Vec::new(),
            methods: vec![EstimateMethod::DiffMeans, EstimateMethod::Mcnemar, EstimateMethod::Ram],
            level: DEFAULT_LEVEL,
            draws: 2000,
            bootstrap: DEFAULT_BOOTSTRAP,
            side: Side::TwoSided,
            subgroup: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivitySettings {
    /// Binary outcomes to analyse; every binary estimation outcome when empty.
    pub outcomes: Vec<String>,
    pub gamma_grid: Vec<f64>,
    pub alpha: f64,
    /// Alternative for the hidden-bias bounds; follows the sign of the
    /// estimate when absent.
    pub side: Option<Side>,
    pub delta0: Vec<u64>,
    pub equivalence_gamma: Vec<f64>,
    pub direction: AttributionDirection,
}

impl Default for SensitivitySettings {
    fn default() -> Self {
        SensitivitySettings {
            outcomes: Vec::new(),
            gamma_grid: (0..=10).map(|k| 1.0 + 0.1 * k as f64).collect(),
            alpha: 0.05,
            side: None,
            delta0: Vec::new(),
            equivalence_gamma: vec![1.0],
            direction: AttributionDirection::Treated,
        }
    }
}

/// Condition on one column; categorical columns use `equals`, numeric ones
/// `min`/`max` (inclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterCondition {
    pub column: String,
    #[serde(default)]
    pub equals: Option<String>,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralizationSettings {
    /// Conjunction defining the target population; everyone when empty.
    pub target: Vec<FilterCondition>,
    pub cap: f64,
    pub outcomes: Vec<String>,
}

impl Default for GeneralizationSettings {
    fn default() -> Self {
        GeneralizationSettings {
            target: Vec::new(),
            cap: crate::matching::DEFAULT_TARGET_CAP,
            outcomes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Data CSV, relative to the config file.
    #[serde(default)]
    pub data: Option<String>,
    #[serde(default)]
    pub output: Option<String>,
    pub columns: ColumnMap,
    pub rules: RuleSet,
    #[serde(default)]
    pub selection: SelectionSettings,
    #[serde(default)]
    pub matching: MatchingSettings,
    #[serde(default)]
    pub weighting: Option<WeightingSettings>,
    #[serde(default)]
    pub estimation: EstimationSettings,
    #[serde(default)]
    pub sensitivity: SensitivitySettings,
    #[serde(default)]
    pub generalization: Option<GeneralizationSettings>,
    #[serde(default)]
    pub seed: u64,
}

impl AnalysisConfig {
    /// Default settings for an in-memory frame.
    pub fn for_frame(frame: &StudyFrame, rules: RuleSet, seed: u64) -> Self {
        AnalysisConfig {
            schema_version: SCHEMA_VERSION,
            data: None,
            output: None,
            columns: ColumnMap::of_frame(frame),
            rules,
            selection: SelectionSettings::default(),
            matching: MatchingSettings::default(),
            weighting: None,
            estimation: EstimationSettings::default(),
            sensitivity: SensitivitySettings::default(),
            generalization: None,
            seed,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: AnalysisConfig = serde_json::from_str(text)?;
        c.check()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Range checks and cross-references that do not need the data.
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }
        self.columns.check()?;
        self.rules.check()?;
        for v in &self.rules.variables {
            if !self.columns.running.contains(&v.id) {
                return Err(Error::UnknownColumn(v.id.clone()));
            }
        }
        let s = &self.selection;
        if !(0.0..=1.0).contains(&s.p_star) {
            return bad(format!("p_star must lie in [0, 1], got {}", s.p_star));
        }
        if !(s.tolerance_sd >= 0.0) || !(s.initial_half_width >= 0.0) {
            return bad("selection tolerance and initial half-width must be nonnegative".into());
        }
        if s.step.is_some_and(|x| !(x > 0.0)) {
            return bad("selection step must be positive".into());
        }
        if s.method == SelectionMethod::Fixed && s.fixed.is_none() {
            return bad("fixed selection needs a `fixed` neighborhood".into());
        }
        if s.method == SelectionMethod::SemiDesign {
            if s.planning_outcome.is_none() {
                return bad("semi-design selection needs a `planning_outcome`".into());
            }
            if !(s.planning_fraction > 0.0 && s.planning_fraction < 1.0) {
                return bad(format!("planning_fraction must lie in (0, 1), got {}", s.planning_fraction));
            }
        }
        for c in &s.test_columns {
            if !self.columns.tests.contains(c) {
                return Err(Error::UnknownColumn(c.clone()));
            }
        }
        let e = &self.estimation;
        if !(e.level > 0.0 && e.level < 1.0) {
            return bad(format!("confidence level must lie in (0, 1), got {}", e.level));
        }
        if e.bootstrap == 0 || e.draws == 0 {
            return bad("bootstrap and permutation draws must be positive".into());
        }
        let outcome_names: Vec<&str> = self.columns.outcomes.iter().map(|o| o.name.as_str()).collect();
        let outcome_lists = [e.outcomes.as_slice(), self.sensitivity.outcomes.as_slice()]
            .into_iter()
            .chain(self.generalization.as_ref().map(|g| g.outcomes.as_slice()))
            .chain(s.planning_outcome.as_ref().map(std::slice::from_ref));
        for list in outcome_lists {
            for o in list {
                if !outcome_names.contains(&o.as_str()) {
                    return Err(Error::UnknownColumn(o.clone()));
                }
            }
        }
        if let Some(g) = &e.subgroup {
            if !self.columns.exact.contains(g) {
                return bad(format!("subgroup column `{g}` must be an exact-match column"));
            }
        }
        let sens = &self.sensitivity;
        if sens.gamma_grid.iter().chain(&sens.equivalence_gamma).any(|g| !(*g >= 1.0)) {
            return bad("gamma values must be at least 1".into());
        }
        if !(sens.alpha > 0.0 && sens.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", sens.alpha));
        }
        if let Some(g) = &self.generalization {
            if !(g.cap > 0.0) {
                return bad("generalization cap must be positive".into());
            }
            for f in &g.target {
                let known = self.columns.exact.contains(&f.column)
                    || self.columns.balance.contains(&f.column)
                    || self.columns.balance_categorical.contains(&f.column)
                    || self.columns.running.contains(&f.column);
                if !known {
                    return Err(Error::UnknownColumn(f.column.clone()));
                }
            }
        }
        if let Some(w) = &self.weighting {
            if !(w.tolerance_sd >= 0.0) || w.folds < 2 {
                return bad("weighting needs a nonnegative tolerance and at least two folds".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, DgpConfig};

    #[test]
    fn csv_round_trip() {
        let (frame, _) = synth::generate(&DgpConfig {
            n: 300,
            ..DgpConfig::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_frame(&frame, &mut buf).unwrap();
        let back = read_frame(buf.as_slice(), &ColumnMap::of_frame(&frame)).unwrap();
        assert_eq!(back, frame);
        let mut again = Vec::new();
        write_frame(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn missing_column_and_bad_cell() {
        let map = ColumnMap {
            id: "id".into(),
            running: vec!["r".into()],
            exact: vec!["g".into()],
            balance: vec!["x".into()],
            balance_categorical: Vec::new(),
            tests: Vec::new(),
            outcomes: Vec::new(),
        };
        let text = "id,r,g,x\na,3.9,f,1\nb,4.0,,2.5\n";
        let f = read_frame(text.as_bytes(), &map).unwrap();
        assert_eq!(f.len(), 2);
        match &f.covariates[0].values {
            CovariateValues::Categorical { levels, codes } => {
                assert_eq!(levels, &vec!["f".to_string()]);
                assert_eq!(codes, &vec![Some(0), None]);
            }
            _ => panic!(),
        }
        assert!(matches!(read_frame("id,r,g\na,1,f\n".as_bytes(), &map), Err(Error::UnknownColumn(c)) if c == "x"));
        let err = read_frame("id,r,g,x\na,1,f,oops\n".as_bytes(), &map).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, ref column, .. } if column == "x"));
    }

    #[test]
    fn config_validation() {
        let cfg = DgpConfig::default();
        let (frame, _) = synth::generate(&DgpConfig {
            n: 10,
            ..cfg.clone()
        })
        .unwrap();
        let mut c = AnalysisConfig {
            schema_version: SCHEMA_VERSION,
            data: None,
            output: None,
            columns: ColumnMap::of_frame(&frame),
            rules: cfg.rules(),
            selection: SelectionSettings::default(),
            matching: MatchingSettings::default(),
            weighting: None,
            estimation: EstimationSettings::default(),
            sensitivity: SensitivitySettings::default(),
            generalization: None,
            seed: 0,
        };
        c.check().unwrap();
        let back = AnalysisConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        c.estimation.outcomes = vec!["nope".into()];
        assert!(matches!(c.check(), Err(Error::UnknownColumn(_))));
        c.estimation.outcomes.clear();
        c.selection.p_star = 2.0;
        assert!(c.check().is_err());
        assert!(AnalysisConfig::from_json(r#"{"columns": {"running": ["r"]}, "rules": {}, "bogus": 1}"#).is_err());
    }
}
