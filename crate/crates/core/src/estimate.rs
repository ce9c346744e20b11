//! Effect estimation and randomization inference on matched pairs and
//! weighted samples.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{MatchedSample, WeightSolution};
use crate::ridge::RidgeFit;
use crate::stats;
use crate::{Error, Result};

/// Pair counts by (treated outcome, control outcome).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairTable {
    pub n00: u64,
    pub n01: u64,
    pub n10: u64,
    pub n11: u64,
}

impl PairTable {
    pub fn new(n00: u64, n01: u64, n10: u64, n11: u64) -> Self {
        PairTable { n00, n01, n10, n11 }
    }

    pub fn total(&self) -> u64 {
        self.n00 + self.n01 + self.n10 + self.n11
    }

    pub fn discordant(&self) -> u64 {
        self.n01 + self.n10
    }

    pub fn treated_mean(&self) -> f64 {
        (self.n10 + self.n11) as f64 / self.total() as f64
    }

    pub fn control_mean(&self) -> f64 {
        (self.n01 + self.n11) as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "level", rename_all = "snake_case")]
pub enum Estimand {
    Nate,
    Tate,
    Subgroup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    DiffMeans,
    Mcnemar,
    Ram,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Alternative: treated outcomes larger.
    Greater,
    Less,
    TwoSided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub estimand: Estimand,
    pub method: EstimateMethod,
    pub point: f64,
    pub pvalue: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub level: f64,
    pub n: usize,
    #[serde(default)]
    pub notes: Vec<String>,
}

pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_BOOTSTRAP: usize = 2000;

fn binary(y: f64, unit: usize) -> Result<bool> {
    if y == 0.0 {
        Ok(false)
    } else if y == 1.0 {
        Ok(true)
    } else {
        Err(Error::InvalidArgument(format!("outcome of unit {unit} is {y}, not binary")))
    }
}

/// Cross-tabulate a binary outcome (indexed by frame row) over matched pairs.
pub fn pair_table(sample: &MatchedSample, outcome: &[f64]) -> Result<PairTable> {
    let mut t = PairTable::default();
    for p in &sample.pairs {
        let get = |i: usize| {
            outcome
                .get(i)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("outcome missing for unit {i}")))
                .and_then(|y| binary(y, i))
        };
        match (get(p.treated)?, get(p.control)?) {
            (false, false) => t.n00 += 1,
            (false, true) => t.n01 += 1,
            (true, false) => t.n10 += 1,
            (true, true) => t.n11 += 1,
        }
    }
    Ok(t)
}

/// Paired risk difference `(n10 - n01) / I`, with a Wald interval.
pub fn risk_difference(table: &PairTable, level: f64) -> Result<EffectEstimate> {
    let i = table.total();
    if i == 0 {
        return Err(Error::InsufficientData("risk difference needs at least one pair".into()));
    }
    let n = i as f64;
    let point = (table.n10 as f64 - table.n01 as f64) / n;
    let var = ((table.discordant() as f64) / n - point * point).max(0.0) / n;
    let z = stats::normal_quantile(0.5 + level / 2.0);
    Ok(EffectEstimate {
        estimand: Estimand::Nate,
        method: EstimateMethod::Mcnemar,
        point,
        pvalue: None,
        ci: Some((point - z * var.sqrt(), point + z * var.sqrt())),
        level,
        n: i as usize,
        notes: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    pub pvalue: f64,
    /// No discordant pairs.
    pub degenerate: bool,
}

/// Tail of `Binomial(d, pi)` at `k` for a one-sided alternative.
pub(crate) fn binomial_tail(d: u64, k: u64, pi: f64, side: Side) -> f64 {
    match side {
        Side::Greater => stats::binom_upper_tail(d, k, pi),
        Side::Less => stats::binom_lower_tail(d, k, pi),
        Side::TwoSided => unreachable!("two-sided tails are combined by the caller"),
    }
}

/// Exact McNemar test on the discordant pairs.
pub fn mcnemar_test(table: &PairTable, side: Side) -> McNemarResult {
    let d = table.discordant();
    if d == 0 {
        return McNemarResult {
            pvalue: 1.0,
            degenerate: true,
        };
    }
    let k = table.n10;
    let pvalue = match side {
        Side::TwoSided => (2.0 * binomial_tail(d, k, 0.5, Side::Greater).min(binomial_tail(d, k, 0.5, Side::Less))).min(1.0),
        s => binomial_tail(d, k, 0.5, s),
    };
    McNemarResult { pvalue, degenerate: false }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub observed: f64,
    /// Enumerated (2^I values) or sampled statistic values.
    pub distribution: Vec<f64>,
    /// `P(T >= observed)`; add-one estimate when sampled.
    pub pvalue: f64,
    pub exact: bool,
}

pub const EXACT_PAIR_LIMIT: usize = 20;
const CHUNK: usize = 1024;

fn flipped(pairs: &[(f64, f64)], mask: impl Fn(usize) -> bool) -> Vec<(f64, f64)> {
    pairs.iter().enumerate().map(|(i, &(a, b))| if mask(i) { (b, a) } else { (a, b) }).collect()
}

/// Randomization distribution of a statistic of `(treated, control)` pair
/// values under independent within-pair swaps. Exact for at most
/// [`EXACT_PAIR_LIMIT`] pairs, otherwise `draws` Monte Carlo swaps.
pub fn permutation_distribution<F>(pairs: &[(f64, f64)], statistic: F, draws: usize, seed: u64) -> Result<PermutationResult>
where
    F: Fn(&[(f64, f64)]) -> f64 + Sync,
{
    let observed = statistic(pairs);
    let tol = 1e-10 * observed.abs().max(1.0);
    let n = pairs.len();
    if n <= EXACT_PAIR_LIMIT {
        let distribution: Vec<f64> = (0..1u64 << n).map(|m| statistic(&flipped(pairs, |i| m >> i & 1 == 1))).collect();
        let hits = distribution.iter().filter(|&&t| t >= observed - tol).count();
        return Ok(PermutationResult {
            observed,
            pvalue: hits as f64 / distribution.len() as f64,
            distribution,
            exact: true,
        });
    }
    if draws == 0 {
        return Err(Error::InvalidArgument("Monte Carlo permutation needs at least one draw".into()));
    }
    let chunk = |c: usize| -> Vec<f64> {
        let mut rng = stats::stream_rng(seed, c as u64);
        let len = CHUNK.min(draws - c * CHUNK);
        (0..len)
            .map(|_| {
                let mask: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
                statistic(&flipped(pairs, |i| mask[i]))
            })
            .collect()
    };
    let chunks = draws.div_ceil(CHUNK);
    #[cfg(feature = "parallel")]
    let distribution: Vec<f64> = {
        use rayon::prelude::*;
        (0..chunks).into_par_iter().flat_map_iter(chunk).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let distribution: Vec<f64> = (0..chunks).flat_map(chunk).collect();
    let hits = distribution.iter().filter(|&&t| t >= observed - tol).count();
    Ok(PermutationResult {
        observed,
        pvalue: (hits + 1) as f64 / (draws + 1) as f64,
        distribution,
        exact: false,
    })
}

fn paired_values(sample: &MatchedSample, outcome: &[f64]) -> Result<Vec<(f64, f64)>> {
    sample
        .pairs
        .iter()
        .map(|p| match (outcome.get(p.treated), outcome.get(p.control)) {
            (Some(&a), Some(&b)) if a.is_finite() && b.is_finite() => Ok((a, b)),
            _ => Err(Error::InvalidArgument(format!(
                "outcome missing or non-finite for pair ({}, {})",
                p.treated, p.control
            ))),
        })
        .collect()
}

/// Mean paired difference with a sign-flip p-value (two-sided) and a
/// normal-theory interval from the paired standard error.
pub fn difference_in_means(sample: &MatchedSample, outcome: &[f64], draws: usize, seed: u64, level: f64) -> Result<EffectEstimate> {
    let pairs = paired_values(sample, outcome)?;
    if pairs.len() < 2 {
        return Err(Error::InsufficientData("difference in means needs at least two pairs".into()));
    }
    let d: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    let point = stats::mean(&d);
    let se = stats::sd(&d) / (d.len() as f64).sqrt();
    let z = stats::normal_quantile(0.5 + level / 2.0);
    let pvalue = crate::balance::permutational_t_test(&d, draws, seed)?;
    Ok(EffectEstimate {
        estimand: Estimand::Nate,
        method: EstimateMethod::DiffMeans,
        point,
        pvalue: Some(pvalue),
        ci: Some((point - z * se, point + z * se)),
        level,
        n: d.len(),
        notes: Vec::new(),
    })
}

fn ram_point(dy: &[f64], dx: &[Vec<f64>], cols: &[usize]) -> f64 {
    let n = dy.len();
    let mean_dy = stats::mean(dy);
    if cols.is_empty() {
        return mean_dy;
    }
    let means: Vec<f64> = cols.iter().map(|&j| dx.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, cols.len(), |i, c| dx[i][cols[c]] - means[c]);
    let y = DVector::from_fn(n, |i, _| dy[i] - mean_dy);
    let beta = match (x.transpose() * &x).svd(true, true).solve(&(x.transpose() * y), 1e-12) {
        Ok(b) => b,
        Err(_) => return mean_dy,
    };
    let adj: f64 = (0..cols.len()).map(|c| beta[c] * means[c]).sum();
    mean_dy - adj
}

/// Regression-assisted matching: mean paired difference minus the
/// covariate-gap adjustment from a regression of outcome differences on
/// covariate differences (slopes from centred differences). Interval from the pair bootstrap.
/// `covariates[i]` is the covariate row of frame unit `i`.
pub fn ram_estimate(
    sample: &MatchedSample,
    outcome: &[f64],
    covariates: &[Vec<f64>],
    bootstrap: usize,
    seed: u64,
    level: f64,
) -> Result<EffectEstimate> {
    let pairs = paired_values(sample, outcome)?;
    let n = pairs.len();
    if n < 2 {
        return Err(Error::InsufficientData("RAM needs at least two pairs".into()));
    }
    let dy: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    let dx: Vec<Vec<f64>> = sample
        .pairs
        .iter()
        .map(|p| match (covariates.get(p.treated), covariates.get(p.control)) {
            (Some(a), Some(b)) if a.len() == b.len() => Ok(a.iter().zip(b).map(|(u, v)| u - v).collect()),
            _ => Err(Error::InvalidArgument("covariate rows missing for a matched unit".into())),
        })
        .collect::<Result<_>>()?;
    let p = dx[0].len();
    let centred: Vec<f64> = (0..p).map(|j| dx.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let full = DMatrix::from_fn(n, p, |i, j| dx[i][j] - centred[j]);
    let cols = stats::independent_columns(&full);
    let mut notes = Vec::new();
    if cols.len() < p {
        notes.push(format!("dropped {} collinear covariate difference column(s)", p - cols.len()));
    }
    let point = ram_point(&dy, &dx, &cols);
    if bootstrap == 0 {
        return Err(Error::InvalidArgument("bootstrap needs at least one resample".into()));
    }
    let rep = |r: usize| -> f64 {
        let mut rng = stats::stream_rng(seed, r as u64);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let by: Vec<f64> = idx.iter().map(|&i| dy[i]).collect();
        let bx: Vec<Vec<f64>> = idx.iter().map(|&i| dx[i].clone()).collect();
        ram_point(&by, &bx, &cols)
    };
    #[cfg(feature = "parallel")]
    let reps: Vec<f64> = {
        use rayon::prelude::*;
        (0..bootstrap).into_par_iter().map(rep).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let reps: Vec<f64> = (0..bootstrap).map(rep).collect();
    let se = stats::sd(&reps);
    let z = stats::normal_quantile(0.5 + level / 2.0);
    let pvalue = if se > 0.0 {
        2.0 * (1.0 - stats::normal_cdf((point / se).abs()))
    } else if point == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(EffectEstimate {
        estimand: Estimand::Nate,
        method: EstimateMethod::Ram,
        point,
        pvalue: Some(pvalue),
        ci: Some((point - z * se, point + z * se)),
        level,
        n,
        notes,
    })
}

/// Regression-assisted weighting. `weights` is aligned with `control_rows`.
pub fn raw_estimate(
    treated_rows: &[Vec<f64>],
    treated_y: &[f64],
    control_rows: &[Vec<f64>],
    control_y: &[f64],
    weights: &WeightSolution,
    fit_treated: &RidgeFit,
    fit_control: &RidgeFit,
    level: f64,
) -> Result<EffectEstimate> {
    let nt = treated_rows.len();
    if nt == 0 || nt != treated_y.len() {
        return Err(Error::InsufficientData("RAW needs treated rows with outcomes".into()));
    }
    if control_rows.len() != control_y.len() || control_rows.len() != weights.weights.len() {
        return Err(Error::InvalidArgument("control rows, outcomes and weights differ in length".into()));
    }
    if weights.weights.iter().any(|&w| w < 0.0 || !w.is_finite()) || (weights.weights.iter().sum::<f64>() - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidArgument("weights must be nonnegative and sum to one".into()));
    }
    let p = treated_rows[0].len();
    let xbar: Vec<f64> = (0..p).map(|j| treated_rows.iter().map(|r| r[j]).sum::<f64>() / nt as f64).collect();
    let mu_t = fit_treated.predict(&xbar);
    let resid_c: Vec<f64> = control_rows.iter().zip(control_y).map(|(x, y)| y - fit_control.predict(x)).collect();
    let mu_c = fit_control.predict(&xbar) + weights.weights.iter().zip(&resid_c).map(|(w, r)| w * r).sum::<f64>();
    let point = mu_t - mu_c;
    let var_c: f64 = weights.weights.iter().zip(&resid_c).map(|(w, r)| (w * r).powi(2)).sum();
    let var_t: f64 = treated_rows
        .iter()
        .zip(treated_y)
        .map(|(x, y)| ((y - fit_treated.predict(x)) / nt as f64).powi(2))
        .sum();
    let se = (var_c + var_t).sqrt();
    let z = stats::normal_quantile(0.5 + level / 2.0);
    let pvalue = if se > 0.0 {
        2.0 * (1.0 - stats::normal_cdf((point / se).abs()))
    } else if point == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(EffectEstimate {
        estimand: Estimand::Nate,
        method: EstimateMethod::Raw,
        point,
        pvalue: Some(pvalue),
        ci: Some((point - z * se, point + z * se)),
        level,
        n: nt + control_rows.len(),
        notes: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupEstimate {
    pub level: String,
    pub table: PairTable,
    pub estimate: EffectEstimate,
}

/// Per-level risk differences and McNemar tests; `levels[i]` is the subgroup
/// of frame unit `i` and must agree within every pair.
pub fn subgroup_estimates(sample: &MatchedSample, outcome: &[f64], levels: &[String], side: Side, level: f64) -> Result<Vec<SubgroupEstimate>> {
    let mut groups: BTreeMap<String, MatchedSample> = BTreeMap::new();
    for p in &sample.pairs {
        let (a, b) = match (levels.get(p.treated), levels.get(p.control)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::InvalidArgument("subgroup label missing for a matched unit".into())),
        };
        if a != b {
            return Err(Error::InvalidArgument(format!(
                "subgroup differs within pair ({}, {}): {a} vs {b}",
                p.treated, p.control
            )));
        }
        groups
            .entry(a.clone())
            .or_insert_with(|| MatchedSample {
                pairs: Vec::new(),
                ..sample.clone_header()
            })
            .pairs
            .push(p.clone());
    }
    groups
        .into_iter()
        .map(|(g, s)| {
            let table = pair_table(&s, outcome)?;
            let mut estimate = risk_difference(&table, level)?;
            estimate.estimand = Estimand::Subgroup(g.clone());
            let m = mcnemar_test(&table, side);
            estimate.pvalue = Some(m.pvalue);
            Ok(SubgroupEstimate { level: g, table, estimate })
        })
        .collect()
}

impl MatchedSample {
    fn clone_header(&self) -> MatchedSample {
        MatchedSample {
            pairs: Vec::new(),
            balance: Vec::new(),
            status: self.status,
            gap: self.gap,
            upper_bound: self.upper_bound,
            nodes: self.nodes,
            notes: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MatchedPair, SolveStatus};
    use crate::ridge;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn sample(pairs: &[(usize, usize)]) -> MatchedSample {
        MatchedSample {
            pairs: pairs
                .iter()
                .map(|&(t, c)| MatchedPair {
                    treated: t,
                    control: c,
                    stratum: String::new(),
                })
                .collect(),
            balance: Vec::new(),
            status: SolveStatus::Optimal,
            gap: 0.0,
            upper_bound: pairs.len() as f64,
            nodes: 0,
            notes: Vec::new(),
        }
    }

    #[test]
    fn crime_table_from_pairs() {
        let t = PairTable::new(1018, 55, 62, 6);
        let mut y = Vec::new();
        let mut pairs = Vec::new();
        for (count, a, b) in [(t.n00, 0.0, 0.0), (t.n01, 0.0, 1.0), (t.n10, 1.0, 0.0), (t.n11, 1.0, 1.0)] {
            for _ in 0..count {
                pairs.push((y.len(), y.len() + 1));
                y.push(a);
                y.push(b);
            }
        }
        assert_eq!(pair_table(&sample(&pairs), &y).unwrap(), t);
    }

    #[test]
    fn all_zero_outcomes() {
        let s = sample(&[(0, 1), (2, 3)]);
        assert_eq!(pair_table(&s, &[0.0; 4]).unwrap(), PairTable::new(2, 0, 0, 0));
        assert!(pair_table(&s, &[0.0, 0.5, 0.0, 0.0]).is_err());
        assert!(pair_table(&s, &[0.0; 3]).is_err());
    }

    #[test]
    fn printed_risk_differences() {
        let r = |t: PairTable| risk_difference(&t, DEFAULT_LEVEL).unwrap().point;
        assert_eq!(format!("{:.3}", r(PairTable::new(1018, 55, 62, 6))), "0.006");
        assert_eq!(format!("{:.3}", r(PairTable::new(290, 341, 222, 288))), "-0.104");
        assert!((r(PairTable::new(945, 84, 87, 25)) - 0.002).abs() <= 0.001);
        assert_eq!(r(PairTable::new(3, 4, 4, 1)), 0.0);
    }

    #[test]
    fn mcnemar_small_cases() {
        let t = PairTable::new(5, 2, 0, 1);
        assert!((mcnemar_test(&t, Side::Less).pvalue - 0.25).abs() < 1e-15);
        assert_eq!(mcnemar_test(&PairTable::new(1, 3, 3, 0), Side::TwoSided).pvalue, 1.0);
        let d = mcnemar_test(&PairTable::new(4, 0, 0, 2), Side::Greater);
        assert!(d.degenerate && d.pvalue == 1.0);
        assert!(mcnemar_test(&PairTable::new(290, 341, 222, 288), Side::Less).pvalue < 0.001);
    }

    #[test]
    fn mcnemar_equals_enumeration() {
        let mut rng = stats::stream_rng(8, 0);
        for _ in 0..50 {
            let i = rng.random_range(1..=15);
            let pairs: Vec<(f64, f64)> = (0..i).map(|_| (rng.random_range(0..2) as f64, rng.random_range(0..2) as f64)).collect();
            let mut t = PairTable::default();
            for &(a, b) in &pairs {
                match (a as u8, b as u8) {
                    (0, 0) => t.n00 += 1,
                    (0, 1) => t.n01 += 1,
                    (1, 0) => t.n10 += 1,
                    _ => t.n11 += 1,
                }
            }
            let up = permutation_distribution(&pairs, |p| p.iter().map(|x| x.0).sum(), 0, 0).unwrap();
            let down = permutation_distribution(&pairs, |p| -p.iter().map(|x| x.0).sum::<f64>(), 0, 0).unwrap();
            if t.discordant() > 0 {
                assert!((mcnemar_test(&t, Side::Greater).pvalue - up.pvalue).abs() < 1e-14);
                assert!((mcnemar_test(&t, Side::Less).pvalue - down.pvalue).abs() < 1e-14);
            } else {
                assert_eq!(up.pvalue, 1.0);
            }
        }
    }

    #[test]
    fn constant_statistic_has_unit_pvalue() {
        let pairs = vec![(1.0, 2.0); 25];
        let r = permutation_distribution(&pairs, |_| 3.0, 500, 1).unwrap();
        assert_eq!(r.pvalue, 1.0);
        assert!(!r.exact);
    }

    #[test]
    fn monte_carlo_tracks_enumeration() {
        let mut rng = stats::stream_rng(9, 0);
        let pairs: Vec<(f64, f64)> = (0..12).map(|_| (rng.random::<f64>() + 0.3, rng.random::<f64>())).collect();
        let stat = |p: &[(f64, f64)]| p.iter().map(|(a, b)| a - b).sum::<f64>();
        let exact = permutation_distribution(&pairs, stat, 0, 0).unwrap().pvalue;
        // Force sampling by padding with zero-difference pairs, which leave the statistic unchanged.
        let mut padded = pairs.clone();
        padded.extend(std::iter::repeat_n((0.5, 0.5), 10));
        let draws = 20_000;
        let mc = permutation_distribution(&padded, stat, draws, 4).unwrap();
        let se = (exact * (1.0 - exact) / draws as f64).sqrt();
        assert!((mc.pvalue - exact).abs() <= 3.0 * se + 1.0 / draws as f64, "{} vs {exact}", mc.pvalue);
    }

    #[test]
    fn ram_reduces_to_difference_when_balanced() {
        let s = sample(&[(0, 1), (2, 3), (4, 5)]);
        let y = [3.0, 1.0, 5.0, 2.0, 4.0, 4.5];
        let x = vec![vec![1.0], vec![2.0], vec![2.0], vec![1.0], vec![0.0], vec![0.0]];
        let e = ram_estimate(&s, &y, &x, 200, 1, DEFAULT_LEVEL).unwrap();
        assert!((e.point - (2.0 + 3.0 - 0.5) / 3.0).abs() < 1e-12);
        let (lo, hi) = e.ci.unwrap();
        assert!(lo <= e.point && e.point <= hi);
    }

    #[test]
    fn ram_removes_linear_confounding() {
        let mut rng = stats::stream_rng(10, 0);
        let n = 40;
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut pairs = Vec::new();
        for k in 0..n {
            for shift in [0.7, 0.0] {
                let row = vec![rng.random::<f64>() + shift, rng.random::<f64>()];
                y.push(1.0 + 2.0 * row[0] - 3.0 * row[1]);
                x.push(row);
            }
            pairs.push((2 * k, 2 * k + 1));
        }
        let s = sample(&pairs);
        let e = ram_estimate(&s, &y, &x, 100, 2, DEFAULT_LEVEL).unwrap();
        assert!(e.point.abs() < 1e-10, "{}", e.point);
        // Shift of control outcomes moves the estimate by minus the shift.
        let shifted: Vec<f64> = y.iter().enumerate().map(|(i, v)| if i % 2 == 1 { v + 0.25 } else { *v }).collect();
        let e2 = ram_estimate(&s, &shifted, &x, 100, 2, DEFAULT_LEVEL).unwrap();
        assert!((e2.point + 0.25).abs() < 1e-10);
    }

    #[test]
    fn ram_drops_collinear_columns() {
        let s = sample(&[(0, 1), (2, 3), (4, 5), (6, 7)]);
        let v = [0.0, 1.0, 3.0, 1.5, 2.0, 4.0, 0.5, 3.0];
        let x: Vec<Vec<f64>> = v.iter().map(|&a| vec![a, 2.0 * a]).collect();
        let y = v;
        let e = ram_estimate(&s, &y, &x, 50, 3, DEFAULT_LEVEL).unwrap();
        assert_eq!(e.notes.len(), 1);
        assert!(e.point.abs() < 1e-10);
    }

    fn uniform(n: usize) -> WeightSolution {
        WeightSolution {
            controls: (0..n).collect(),
            weights: vec![1.0 / n as f64; n],
            objective: 0.0,
            slacks: Vec::new(),
            multipliers: Vec::new(),
            kkt_residual: 0.0,
            iterations: 0,
        }
    }

    #[test]
    fn raw_reduces_to_difference_in_means() {
        let tr = vec![vec![1.0], vec![2.0], vec![4.0]];
        let ty = [2.0, 3.0, 7.0];
        let cr = vec![vec![0.0], vec![1.0]];
        let cy = [1.0, 2.0];
        let zero = RidgeFit {
            intercept: 0.0,
            coefficients: vec![0.0],
            lambda: 0.0,
            train_mse: 0.0,
            cv_curve: Vec::new(),
        };
        let mean_t = RidgeFit {
            intercept: 4.0,
            ..zero.clone()
        };
        let e = raw_estimate(&tr, &ty, &cr, &cy, &uniform(2), &mean_t, &zero, DEFAULT_LEVEL).unwrap();
        assert!((e.point - (4.0 - 1.5)).abs() < 1e-12);
    }

    #[test]
    fn raw_with_exact_control_fit() {
        let tr = vec![vec![1.0, 0.0], vec![2.0, 1.0], vec![0.5, 3.0]];
        let ty: Vec<f64> = tr.iter().map(|r| 5.0 + r[0] + r[1]).collect();
        let cr = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]];
        let cy: Vec<f64> = cr.iter().map(|r| 1.0 + 2.0 * r[0] - r[1]).collect();
        let ft = ridge::ridge_fixed(&tr, &ty, 0.0).unwrap();
        let fc = ridge::ridge_fixed(&cr, &cy, 0.0).unwrap();
        let w = WeightSolution {
            weights: vec![0.1, 0.2, 0.3, 0.4],
            ..uniform(4)
        };
        let e = raw_estimate(&tr, &ty, &cr, &cy, &w, &ft, &fc, DEFAULT_LEVEL).unwrap();
        let xbar = [3.5 / 3.0, 4.0 / 3.0];
        let expected = ft.predict(&xbar) - fc.predict(&xbar);
        assert!((e.point - expected).abs() < 1e-9);
    }

    #[test]
    fn subgroups_partition_the_pooled_estimate() {
        let s = sample(&[(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]);
        let y = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let g: Vec<String> = ["a", "a", "a", "a", "b", "b", "b", "b", "b", "b"].iter().map(|s| s.to_string()).collect();
        let out = subgroup_estimates(&s, &y, &g, Side::TwoSided, DEFAULT_LEVEL).unwrap();
        assert_eq!(out.len(), 2);
        let pooled = risk_difference(&pair_table(&s, &y).unwrap(), DEFAULT_LEVEL).unwrap().point;
        let weighted: f64 = out.iter().map(|o| o.estimate.point * o.table.total() as f64).sum::<f64>() / 5.0;
        assert!((pooled - weighted).abs() < 1e-15);
        let mut bad = g.clone();
        bad[1] = "b".into();
        assert!(subgroup_estimates(&s, &y, &bad, Side::TwoSided, DEFAULT_LEVEL).is_err());
    }

    proptest! {
        #[test]
        fn risk_difference_ignores_pair_order(bits in prop::collection::vec((0u8..2, 0u8..2), 1..40), seed in 0u64..100) {
            let y: Vec<f64> = bits.iter().flat_map(|&(a, b)| [a as f64, b as f64]).collect();
            let mut pairs: Vec<(usize, usize)> = (0..bits.len()).map(|k| (2 * k, 2 * k + 1)).collect();
            let before = pair_table(&sample(&pairs), &y).unwrap();
            let mut rng = stats::stream_rng(seed, 0);
            for i in (1..pairs.len()).rev() {
                pairs.swap(i, rng.random_range(0..=i));
            }
            prop_assert_eq!(pair_table(&sample(&pairs), &y).unwrap(), before);
            let e = risk_difference(&before, DEFAULT_LEVEL).unwrap();
            let (lo, hi) = e.ci.unwrap();
            prop_assert!(lo <= e.point && e.point <= hi);
        }
    }
}
