//! Synthetic grade-retention study with known effects.
//!
//! Subject grades on a 0.1 grid are driven by school, test scores and an
//! unobserved ability. Two rules assign retention: fail one subject with an
//! average at most 4.4, or fail two with an average at most 4.9. Inside the
//! honest zone (uniform half-width `h` around every cutoff) the lagged score
//! and the outcomes depend on covariates only; outside it both also depend
//! on the lowest grade, which confounds any comparison that reaches there.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{
    strip_outcomes, Clause, Comparator, Covariate, CovariateRole, CovariateValues, HalfWidths, NeighborhoodSpec, NumericColumn, Outcome,
    OutcomeKind, RuleSet, RunningVariableDef, StudyFrame, TreatmentRule,
};
use crate::rules;
use crate::stats;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub n: usize,
    pub grid: f64,
    pub subjects: usize,
    pub schools: usize,
    pub rule1_low: f64,
    pub rule1_avg: f64,
    pub rule2_second: f64,
    pub rule2_avg: f64,
    /// Honest half-width; `None` means the whole frame is honest.
    pub honest_half_width: Option<f64>,
    /// Constant part of the effect on the binary outcome.
    pub tau: f64,
    /// Effect change per SD of the math score.
    pub tau_modifier: f64,
    /// Lagged-score shift per grade point of the lowest grade outside the zone.
    pub test_confounding: f64,
    /// Outcome-probability shift per grade point outside the zone.
    pub outcome_confounding: f64,
    pub grade_mean: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n: 5000,
            grid: 0.1,
            subjects: 6,
            schools: 12,
            rule1_low: 3.9,
            rule1_avg: 4.4,
            rule2_second: 3.9,
            rule2_avg: 4.9,
            honest_half_width: None,
            tau: -0.10,
            tau_modifier: 0.0,
            test_confounding: 4.0,
            outcome_confounding: 0.4,
            grade_mean: 5.3,
            seed: 1,
        }
    }
}

impl DgpConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic config: {m}")));
        if self.n < 2 {
            return bad("need at least two units");
        }
        if !(self.grid > 0.0) || self.subjects < 2 || self.schools == 0 {
            return bad("grid must be positive, with at least two subjects and one school");
        }
        if self.honest_half_width.is_some_and(|h| !(h >= 0.0)) {
            return bad("honest half-width must be nonnegative");
        }
        if self.tau.abs() + 2.0 * self.tau_modifier.abs() > 0.25 {
            return bad("effects must stay within the outcome probability margins");
        }
        Ok(())
    }

    pub fn rules(&self) -> RuleSet {
        let var = |id: &str, d: &str| RunningVariableDef {
            id: id.into(),
            description: d.into(),
        };
        let clause = |v: &str, c: f64| Clause {
            variable: v.into(),
            cutoff: c,
            comparator: Comparator::AtOrBelow,
        };
        RuleSet {
            variables: vec![
                var(LOWEST, "lowest subject grade"),
                var(SECOND, "second lowest subject grade"),
                var(AVERAGE, "average grade"),
            ],
            rules: vec![
                TreatmentRule {
                    name: "fail one".into(),
                    clauses: vec![clause(LOWEST, self.rule1_low), clause(AVERAGE, self.rule1_avg)],
                },
                TreatmentRule {
                    name: "fail two".into(),
                    clauses: vec![clause(SECOND, self.rule2_second), clause(AVERAGE, self.rule2_avg)],
                },
            ],
            grid: Some(self.grid),
        }
    }
}

pub const LOWEST: &str = "grade_lowest";
pub const SECOND: &str = "grade_second";
pub const AVERAGE: &str = "grade_average";
pub const SCHOOL: &str = "school";
pub const GENDER: &str = "gender";
pub const MATH: &str = "score_math";
pub const LANGUAGE: &str = "score_language";
pub const LAGGED: &str = "lagged_grade";
pub const PARENT: &str = "parent_schooling";
pub const RETENTION: &str = "future_retention";
pub const CRIME: &str = "crime";
pub const GPA_YEARS: [&str; 4] = ["2008", "2009", "2010", "2011"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: DgpConfig,
    /// Expected effect of every unit on the binary outcome.
    pub unit_effects: Vec<f64>,
    /// Membership of the honest zone.
    pub honest: Vec<bool>,
    /// Mean unit effect over the whole frame.
    pub population_effect: f64,
}

impl GroundTruth {
    /// Mean unit effect over `members`.
    pub fn nate(&self, members: &[bool]) -> f64 {
        let v: Vec<f64> = self.unit_effects.iter().zip(members).filter(|(_, &m)| m).map(|(e, _)| *e).collect();
        stats::mean(&v)
    }

    /// Mean unit effect over a list of units.
    pub fn mean_effect(&self, units: &[usize]) -> f64 {
        units.iter().map(|&i| self.unit_effects[i]).sum::<f64>() / units.len() as f64
    }
}

fn snap(x: f64, grid: f64) -> f64 {
    let k = (x / grid).round();
    // Nearest representable multiple, printed without drift.
    let digits = (-grid.log10()).ceil().max(0.0) as i32;
    let p = 10f64.powi(digits);
    (k * grid * p).round() / p
}

struct Draw {
    gender: usize,
    math: f64,
    language: f64,
    grades: Vec<f64>,
    lagged_noise: f64,
    parent_noise: f64,
    u_retention: f64,
    u_crime: f64,
    gpa_noise: [f64; 4],
}

/// Synthetic frame plus its ground truth; identical for identical configs.
pub fn generate(config: &DgpConfig) -> Result<(StudyFrame, GroundTruth)> {
    config.check()?;
    let n = config.n;
    let mut srng = stats::stream_rng(config.seed, u64::MAX);
    let school_effect: Vec<f64> = (0..config.schools)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut srng);
            0.5 * v
        })
        .collect();
    let school_ses: Vec<[f64; 2]> = (0..config.schools).map(|_| [StandardNormal.sample(&mut srng), StandardNormal.sample(&mut srng)]).collect();
    let school_of = |i: usize| i % config.schools;

    let draw = |i: usize| -> Draw {
        let mut rng = stats::stream_rng(config.seed, i as u64);
        let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
        let s = school_effect[school_of(i)];
        let math = s + 0.85 * z();
        let language = 0.5 * s + 0.4 * math + 0.75 * z();
        let ability = z();
        let base = config.grade_mean + 0.35 * (math + language) / 2.0 + 0.45 * ability;
        let grades: Vec<f64> = (0..config.subjects).map(|_| snap((base + 0.55 * z()).clamp(1.0, 7.0), config.grid)).collect();
        let lagged_noise = 0.3 * z();
        let parent_noise = 0.4 * z();
        let gpa_noise = [z(), z(), z(), z()];
        let gender = usize::from(rng.random::<bool>());
        Draw {
            gender,
            math,
            language,
            grades,
            lagged_noise,
            parent_noise,
            u_retention: rng.random::<f64>(),
            u_crime: rng.random::<f64>(),
            gpa_noise,
        }
    };
    #[cfg(feature = "parallel")]
    let draws: Vec<Draw> = {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(draw).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let draws: Vec<Draw> = (0..n).map(draw).collect();

    let mut lowest = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    let mut average = Vec::with_capacity(n);
    for d in &draws {
        let mut g = d.grades.clone();
        g.sort_by(f64::total_cmp);
        lowest.push(g[0]);
        second.push(g[1]);
        average.push(snap(g.iter().sum::<f64>() / g.len() as f64, config.grid));
    }
    let math_sd = stats::sd(&draws.iter().map(|d| d.math).collect::<Vec<_>>()).max(1e-12);
    let math_mean = stats::mean(&draws.iter().map(|d| d.math).collect::<Vec<_>>());

    let mut frame = StudyFrame {
        unit_ids: (0..n).map(|i| format!("u{i:06}")).collect(),
        running: vec![
            NumericColumn {
                name: LOWEST.into(),
                values: lowest.clone(),
            },
            NumericColumn {
                name: SECOND.into(),
                values: second,
            },
            NumericColumn {
                name: AVERAGE.into(),
                values: average,
            },
        ],
        covariates: vec![
            Covariate {
                name: SCHOOL.into(),
                role: CovariateRole::ExactMatch,
                values: CovariateValues::Categorical {
                    levels: (0..config.schools).map(|s| format!("s{s:02}")).collect(),
                    codes: (0..n).map(|i| Some(school_of(i))).collect(),
                },
            },
            Covariate {
                name: GENDER.into(),
                role: CovariateRole::ExactMatch,
                values: CovariateValues::Categorical {
                    levels: vec!["female".into(), "male".into()],
                    codes: draws.iter().map(|d| Some(d.gender)).collect(),
                },
            },
            Covariate {
                name: MATH.into(),
                role: CovariateRole::MeanBalance,
                values: CovariateValues::Numeric(draws.iter().map(|d| d.math).collect()),
            },
            Covariate {
                name: LANGUAGE.into(),
                role: CovariateRole::MeanBalance,
                values: CovariateValues::Numeric(draws.iter().map(|d| d.language).collect()),
            },
        ],
        tests: Vec::new(),
        outcomes: Vec::new(),
        sample: None,
    };
    let rules = config.rules();
    let view = strip_outcomes(&frame);
    let z = rules::assign(&view, &rules)?.z_overall();
    let honest = match config.honest_half_width {
        None => vec![true; n],
        Some(h) => rules::neighborhood_membership(&view, &rules, &NeighborhoodSpec::uniform(&rules, HalfWidths::symmetric(h)))?.n_overall(),
    };
    let distortion: Vec<f64> = (0..n).map(|i| if honest[i] { 0.0 } else { lowest[i] - config.rule1_low }).collect();

    let mut lagged = Vec::with_capacity(n);
    let mut retention = Vec::with_capacity(n);
    let mut crime = Vec::with_capacity(n);
    let mut gpa: Vec<Vec<f64>> = vec![Vec::with_capacity(n); GPA_YEARS.len()];
    let mut unit_effects = Vec::with_capacity(n);
    for (i, d) in draws.iter().enumerate() {
        let s = school_effect[school_of(i)];
        let xbar = (d.math + d.language) / 2.0;
        lagged.push(4.5 + 0.4 * s + 1.5 * school_ses[school_of(i)][0] + 0.5 * xbar + d.lagged_noise + config.test_confounding * distortion[i]);

        let p0 = (0.5 + 0.08 * s - 0.06 * xbar - config.outcome_confounding * distortion[i]).clamp(0.2, 0.8);
        let effect = config.tau + config.tau_modifier * (d.math - math_mean) / math_sd;
        unit_effects.push(effect);
        let p1 = (p0 + effect).clamp(0.0, 1.0);
        let y0 = d.u_retention < p0;
        let y1 = d.u_retention < p1;
        retention.push(f64::from(u8::from(if z[i] { y1 } else { y0 })));

        let c0 = (0.06 + 0.02 * s - 0.01 * xbar).clamp(0.01, 0.2);
        crime.push(f64::from(u8::from(d.u_crime < c0)));

        for (t, col) in gpa.iter_mut().enumerate() {
            let shift = if z[i] { 0.1 * (t as f64 + 1.0) } else { 0.0 };
            col.push(snap((4.8 + 0.3 * xbar + shift + 0.5 * d.gpa_noise[t]).clamp(1.0, 7.0), config.grid));
        }
    }
    frame.tests = vec![
        NumericColumn {
            name: LAGGED.into(),
            values: lagged,
        },
        NumericColumn {
            name: PARENT.into(),
            values: draws.iter().enumerate().map(|(i, d)| 10.0 + 2.0 * school_effect[school_of(i)] + 3.0 * school_ses[school_of(i)][1] + 1.5 * (d.math + d.language) / 2.0 + d.parent_noise).collect(),
        },
    ];
    frame.outcomes.push(Outcome {
        name: RETENTION.into(),
        kind: OutcomeKind::Binary,
        period: None,
        values: retention,
    });
    frame.outcomes.push(Outcome {
        name: CRIME.into(),
        kind: OutcomeKind::Binary,
        period: None,
        values: crime,
    });
    for (t, col) in gpa.into_iter().enumerate() {
        frame.outcomes.push(Outcome {
            name: format!("gpa_{}", GPA_YEARS[t]),
            kind: OutcomeKind::Real,
            period: Some(GPA_YEARS[t].into()),
            values: col,
        });
    }
    let population_effect = stats::mean(&unit_effects);
    Ok((
        frame,
        GroundTruth {
            config: config.clone(),
            unit_effects,
            honest,
            population_effect,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grades_lie_on_the_grid() {
        let (f, _) = generate(&DgpConfig {
            n: 800,
            ..DgpConfig::default()
        })
        .unwrap();
        for c in &f.running {
            for &v in &c.values {
                assert!((v * 10.0 - (v * 10.0).round()).abs() < 1e-9, "{v}");
                assert_eq!(format!("{v}").len() <= 3, true, "{v}");
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = DgpConfig {
            n: 300,
            ..DgpConfig::default()
        };
        let a = serde_json::to_string(&generate(&cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&generate(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&generate(&DgpConfig { seed: 2, ..cfg }).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn retention_rate_is_small() {
        let cfg = DgpConfig {
            n: 20_000,
            ..DgpConfig::default()
        };
        let (f, _) = generate(&cfg).unwrap();
        let z = rules::assign(&strip_outcomes(&f), &cfg.rules()).unwrap().z_overall();
        let rate = z.iter().filter(|&&b| b).count() as f64 / z.len() as f64;
        assert!((0.02..0.08).contains(&rate), "{rate}");
    }

    #[test]
    fn honest_zone_flags() {
        let cfg = DgpConfig {
            n: 2000,
            honest_half_width: Some(0.2),
            ..DgpConfig::default()
        };
        let (f, t) = generate(&cfg).unwrap();
        let h = t.honest.iter().filter(|&&b| b).count();
        assert!(h > 0 && h < f.len());
        assert!(generate(&DgpConfig {
            honest_half_width: Some(-1.0),
            ..cfg
        })
        .is_err());
    }

    #[test]
    fn effect_modifier_moves_population_effect_only_through_scores() {
        let (_, t) = generate(&DgpConfig {
            n: 4000,
            tau_modifier: 0.05,
            ..DgpConfig::default()
        })
        .unwrap();
        assert!((t.population_effect + 0.10).abs() < 1e-9);
        assert!(t.unit_effects.iter().any(|&e| e > -0.05));
    }
}

/// Analysis config for a generated frame, written next to the CSV by the
/// `generate` command.
pub fn analysis_config(config: &DgpConfig, frame: &StudyFrame) -> crate::io::AnalysisConfig {
    let mut a = crate::io::AnalysisConfig::for_frame(frame, config.rules(), config.seed);
    a.data = Some("data.csv".into());
    a.selection.subject_steps = 3;
    a.selection.step = Some(config.grid);
    a
}
