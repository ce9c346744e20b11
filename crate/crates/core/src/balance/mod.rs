//! Balance functions, standardized differences, and the two balance tests
//! used during neighborhood selection: the permutational t-test on pair
//! differences and the exact cross-match test.

mod blossom;
mod crossmatch;

pub use crossmatch::{
    cross_match_null, cross_match_test, mahalanobis_distances, optimal_nonbipartite_matching, CrossMatchResult,
    DistanceMatrix, PerfectMatching,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{CovariateRole, CovariateValues, DesignView};
use crate::stats;
use crate::{Error, Result};

/// Transformation of the primary covariates entering a balance constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Column { column: String },
    Indicator { column: String, level: String },
    Product { left: String, right: String },
    Square { column: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceFunction {
    pub name: String,
    pub transform: Transform,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceFunctionSet {
    pub functions: Vec<BalanceFunction>,
}

fn numeric_column<'a>(view: &'a DesignView, name: &str) -> Result<&'a [f64]> {
    let cov = view.covariate(name)?;
    if cov.role == CovariateRole::ExactMatch {
        return Err(Error::InvalidArgument(format!(
            "exact-match column `{name}` cannot enter a balance function"
        )));
    }
    match &cov.values {
        CovariateValues::Numeric(v) => Ok(v),
        CovariateValues::Categorical { .. } => Err(Error::InvalidArgument(format!(
            "categorical column `{name}` must enter through indicators"
        ))),
    }
}

impl Transform {
    pub fn evaluate(&self, view: &DesignView) -> Result<Vec<f64>> {
        match self {
            Transform::Column { column } => Ok(numeric_column(view, column)?.to_vec()),
            Transform::Square { column } => Ok(numeric_column(view, column)?.iter().map(|x| x * x).collect()),
            Transform::Product { left, right } => {
                let (a, b) = (numeric_column(view, left)?, numeric_column(view, right)?);
                Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
            }
            Transform::Indicator { column, level } => {
                let cov = view.covariate(column)?;
                if cov.role == CovariateRole::ExactMatch {
                    return Err(Error::InvalidArgument(format!(
                        "exact-match column `{column}` cannot enter a balance function"
                    )));
                }
                match &cov.values {
                    CovariateValues::Categorical { levels, codes } => {
                        let l = levels.iter().position(|x| x == level).ok_or_else(|| {
                            Error::InvalidArgument(format!("level `{level}` not declared for `{column}`"))
                        })?;
                        Ok(codes.iter().map(|c| if *c == Some(l) { 1.0 } else { 0.0 }).collect())
                    }
                    CovariateValues::Numeric(v) => {
                        let target: f64 = level.parse().map_err(|_| {
                            Error::InvalidArgument(format!("level `{level}` is not numeric for `{column}`"))
                        })?;
                        Ok(v.iter().map(|x| if *x == target { 1.0 } else { 0.0 }).collect())
                    }
                }
            }
        }
    }
}

impl BalanceFunctionSet {
    pub fn new(functions: Vec<BalanceFunction>) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::InvalidArgument("at least one balance function is required".into()));
        }
        if let Some(f) = functions.iter().find(|f| !(f.tolerance >= 0.0)) {
            return Err(Error::InvalidArgument(format!("tolerance of `{}` must be nonnegative", f.name)));
        }
        Ok(Self { functions })
    }

    /// Raw numeric columns and one indicator per level of every categorical
    /// mean-balance covariate. Tolerances are `tolerance_sd` times the SD of
    /// each function over `units` (all units when empty).
    pub fn from_view(view: &DesignView, tolerance_sd: f64, units: &[usize]) -> Result<Self> {
        let mut functions = Vec::new();
        for cov in view.balance_columns() {
            match &cov.values {
                CovariateValues::Numeric(_) => functions.push(BalanceFunction {
                    name: cov.name.clone(),
                    transform: Transform::Column { column: cov.name.clone() },
                    tolerance: 0.0,
                }),
                CovariateValues::Categorical { levels, .. } => {
                    for level in levels {
                        functions.push(BalanceFunction {
                            name: format!("{}={}", cov.name, level),
                            transform: Transform::Indicator {
                                column: cov.name.clone(),
                                level: level.clone(),
                            },
                            tolerance: 0.0,
                        })
                    }
                }
            }
        }
        let mut set = Self::new(functions)?;
        set.set_tolerance_sd(view, tolerance_sd, units)?;
        Ok(set)
    }

    /// [`Self::from_view`] plus squares and pairwise products of the
    /// numeric balance columns.
    pub fn second_moments(view: &DesignView, tolerance_sd: f64, units: &[usize]) -> Result<Self> {
        let mut set = Self::from_view(view, tolerance_sd, units)?;
        let numeric: Vec<String> = view
            .balance_columns()
            .into_iter()
            .filter(|c| matches!(c.values, CovariateValues::Numeric(_)))
            .map(|c| c.name.clone())
            .collect();
        for (a, left) in numeric.iter().enumerate() {
            set.functions.push(BalanceFunction {
                name: format!("{left}^2"),
                transform: Transform::Square { column: left.clone() },
                tolerance: 0.0,
            });
            for right in &numeric[a + 1..] {
                set.functions.push(BalanceFunction {
                    name: format!("{left}*{right}"),
                    transform: Transform::Product {
                        left: left.clone(),
                        right: right.clone(),
                    },
                    tolerance: 0.0,
                });
            }
        }
        set.set_tolerance_sd(view, tolerance_sd, units)?;
        Ok(set)
    }

    pub fn set_tolerance_sd(&mut self, view: &DesignView, tolerance_sd: f64, units: &[usize]) -> Result<()> {
        let all: Vec<usize>;
        let units = if units.is_empty() {
            all = (0..view.len()).collect();
            &all
        } else {
            units
        };
        for f in &mut self.functions {
            let v = f.transform.evaluate(view)?;
            let sub: Vec<f64> = units.iter().map(|&i| v[i]).collect();
            f.tolerance = tolerance_sd * stats::sd(&sub);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.functions.iter().map(|f| f.name.clone()).collect()
    }

    pub fn tolerances(&self) -> Vec<f64> {
        self.functions.iter().map(|f| f.tolerance).collect()
    }

    pub fn check(&self, view: &DesignView) -> Result<()> {
        self.evaluate(view).map(|_| ())
    }

    /// `Q x n` matrix of function values.
    pub fn evaluate(&self, view: &DesignView) -> Result<Vec<Vec<f64>>> {
        self.functions.iter().map(|f| f.transform.evaluate(view)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizedDifference {
    pub name: String,
    pub treated_mean: f64,
    pub control_mean: f64,
    /// `None` when the pooled SD is zero but the means differ.
    pub value: Option<f64>,
}

/// `sqrt((var_T + var_C) / 2)` on the pre-matching groups.
pub fn pooled_sd(treated: &[f64], controls: &[f64]) -> f64 {
    ((stats::variance(treated) + stats::variance(controls)) / 2.0).sqrt()
}

fn weighted_mean(x: &[f64], w: Option<&[f64]>) -> f64 {
    match w {
        None => stats::mean(x),
        Some(w) => {
            let s: f64 = w.iter().sum();
            x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / s
        }
    }
}

/// `(mean_T - mean_C) / sd`; control mean optionally weighted.
pub fn standardized_difference(treated: &[f64], controls: &[f64], control_weights: Option<&[f64]>, sd: f64) -> Option<f64> {
    let diff = stats::mean(treated) - weighted_mean(controls, control_weights);
    if sd > 0.0 {
        Some(diff / sd)
    } else if diff.abs() <= 1e-12 {
        Some(0.0)
    } else {
        None
    }
}

/// Standardized differences of every balance function between the given
/// groups, scaled by the pooled SD of the pre-matching groups.
pub fn standardized_differences(
    values: &[Vec<f64>],
    names: &[String],
    pre: (&[usize], &[usize]),
    post: (&[usize], &[usize]),
    control_weights: Option<&[f64]>,
) -> Result<Vec<StandardizedDifference>> {
    if pre.0.len() < 2 || pre.1.len() < 2 {
        return Err(Error::InsufficientData("standardized differences need two units per group".into()));
    }
    if post.0.is_empty() || post.1.is_empty() {
        return Err(Error::InsufficientData("empty comparison group".into()));
    }
    let pick = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    Ok(values
        .iter()
        .zip(names)
        .map(|(v, name)| {
            let sd = pooled_sd(&pick(v, pre.0), &pick(v, pre.1));
            let (t, c) = (pick(v, post.0), pick(v, post.1));
            StandardizedDifference {
                name: name.clone(),
                treated_mean: stats::mean(&t),
                control_mean: weighted_mean(&c, control_weights),
                value: standardized_difference(&t, &c, control_weights, sd),
            }
        })
        .collect())
}

pub const EXACT_SIGN_FLIP_LIMIT: usize = 20;

fn tie_tol(diffs: &[f64]) -> f64 {
    1e-10 * diffs.iter().map(|d| d.abs()).sum::<f64>().max(1e-300)
}

/// Two-sided p-value of `|mean difference|` under random sign flips of the
/// pair differences: exact for at most 20 pairs, otherwise Monte Carlo with
/// the add-one estimator.
pub fn permutational_t_test(diffs: &[f64], draws: usize, seed: u64) -> Result<f64> {
    if diffs.is_empty() {
        return Err(Error::InsufficientData("permutational t-test needs at least one pair".into()));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument("pair differences must be finite".into()));
    }
    let observed = diffs.iter().sum::<f64>().abs();
    let tol = tie_tol(diffs);
    if diffs.len() <= EXACT_SIGN_FLIP_LIMIT {
        let n = diffs.len();
        let total = 1u64 << n;
        let count = (0..total)
            .filter(|mask| {
                let s: f64 = diffs
                    .iter()
                    .enumerate()
                    .map(|(i, d)| if mask >> i & 1 == 1 { -d } else { *d })
                    .sum();
                s.abs() >= observed - tol
            })
            .count();
        return Ok(count as f64 / total as f64);
    }
    if draws == 0 {
        return Err(Error::InvalidArgument(
            "Monte Carlo sign-flip test needs at least one draw".into(),
        ));
    }
    let hits = sign_flip_hits(diffs, observed - tol, draws, seed);
    Ok((hits as f64 + 1.0) / (draws as f64 + 1.0))
}

const DRAWS_PER_STREAM: usize = 1024;

fn sign_flip_hits(diffs: &[f64], threshold: f64, draws: usize, seed: u64) -> usize {
    let chunks = draws.div_ceil(DRAWS_PER_STREAM);
    let run = |c: usize| {
        let mut rng = stats::stream_rng(seed, c as u64);
        let m = DRAWS_PER_STREAM.min(draws - c * DRAWS_PER_STREAM);
        (0..m)
            .filter(|_| {
                let s: f64 = diffs.iter().map(|d| if rng.random::<bool>() { -d } else { *d }).sum();
                s.abs() >= threshold
            })
            .count()
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..chunks).into_par_iter().map(run).sum()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..chunks).map(run).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn standardized_difference_hand_value() {
        assert_eq!(standardized_difference(&[0.0, 2.0], &[0.0, 0.0], None, 1.0), Some(1.0));
        assert_eq!(standardized_difference(&[1.0, 2.0], &[1.0, 2.0], None, 0.7), Some(0.0));
        assert_eq!(standardized_difference(&[1.0, 1.0], &[2.0, 2.0], None, 0.0), None);
        assert_eq!(standardized_difference(&[1.0, 1.0], &[1.0, 1.0], None, 0.0), Some(0.0));
    }

    #[test]
    fn standardized_difference_against_direct_formula() {
        let mut rng = stats::stream_rng(3, 0);
        for _ in 0..100 {
            let t: Vec<f64> = (0..7).map(|_| rng.random::<f64>() * 4.0).collect();
            let c: Vec<f64> = (0..9).map(|_| rng.random::<f64>() * 3.0).collect();
            let mt = t.iter().sum::<f64>() / 7.0;
            let mc = c.iter().sum::<f64>() / 9.0;
            let vt = t.iter().map(|x| (x - mt).powi(2)).sum::<f64>() / 6.0;
            let vc = c.iter().map(|x| (x - mc).powi(2)).sum::<f64>() / 8.0;
            let oracle = (mt - mc) / ((vt + vc) / 2.0).sqrt();
            let got = standardized_difference(&t, &c, None, pooled_sd(&t, &c)).unwrap();
            assert!((got - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn sign_flip_small_cases() {
        assert_eq!(permutational_t_test(&[0.0, 0.0, 0.0], 0, 1).unwrap(), 1.0);
        assert_eq!(permutational_t_test(&[1.0, 1.0, 1.0], 0, 1).unwrap(), 0.25);
        assert!(permutational_t_test(&[0.5; 25], 0, 1).is_err());
        assert!(permutational_t_test(&[], 10, 1).is_err());
    }

    #[test]
    fn monte_carlo_close_to_exact() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = stats::stream_rng(11, 0);
        let d: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
        let exact = permutational_t_test(&d, 0, 0).unwrap();
        let b = 20_000;
        let hits = sign_flip_hits(&d, d.iter().sum::<f64>().abs() - tie_tol(&d), b, 5);
        let mc = (hits as f64 + 1.0) / (b as f64 + 1.0);
        let se = (exact * (1.0 - exact) / b as f64).sqrt();
        assert!((mc - exact).abs() <= 3.0 * se + 1.0 / b as f64, "{mc} vs {exact}");
    }

    proptest! {
        #[test]
        fn exact_test_invariant_to_order(mut d in prop::collection::vec(-3.0f64..3.0, 1..10), seed in 0u64..50) {
            let p = permutational_t_test(&d, 0, 0).unwrap();
            let n = d.len();
            d.rotate_left((seed as usize) % n);
            d.reverse();
            let q = permutational_t_test(&d, 0, 0).unwrap();
            prop_assert_eq!(p, q);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn transform_round_trip(name in "[a-z]{1,6}", level in "[a-z0-9]{1,4}") {
            let t = Transform::Indicator { column: name, level };
            let s = serde_json::to_string(&t).unwrap();
            prop_assert_eq!(serde_json::from_str::<Transform>(&s).unwrap(), t);
        }
    }
}
