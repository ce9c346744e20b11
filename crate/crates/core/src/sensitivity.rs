//! Sensitivity of matched-pair McNemar inference to hidden bias.

use serde::{Deserialize, Serialize};

use crate::estimate::{binomial_tail, mcnemar_test, PairTable, Side};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaBound {
    pub gamma: f64,
    pub pvalue_upper: f64,
    pub pvalue_lower: f64,
}

/// Bounds on the McNemar p-value when treatment odds within a pair may
/// differ by at most a factor `gamma`.
pub fn gamma_pvalue(table: &PairTable, gamma: f64, side: Side) -> Result<GammaBound> {
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be finite and at least 1, got {gamma}")));
    }
    let d = table.discordant();
    if d == 0 {
        return Ok(GammaBound {
            gamma,
            pvalue_upper: 1.0,
            pvalue_lower: 1.0,
        });
    }
    if gamma == 1.0 {
        let p = mcnemar_test(table, side).pvalue;
        return Ok(GammaBound {
            gamma,
            pvalue_upper: p,
            pvalue_lower: p,
        });
    }
    let hi = gamma / (1.0 + gamma);
    let lo = 1.0 / (1.0 + gamma);
    let k = table.n10;
    let (upper, lower) = match side {
        Side::Greater => (binomial_tail(d, k, hi, Side::Greater), binomial_tail(d, k, lo, Side::Greater)),
        Side::Less => (binomial_tail(d, k, lo, Side::Less), binomial_tail(d, k, hi, Side::Less)),
        Side::TwoSided => {
            let g = gamma_pvalue(table, gamma, Side::Greater)?;
            let l = gamma_pvalue(table, gamma, Side::Less)?;
            (
                (2.0 * g.pvalue_upper.min(l.pvalue_upper)).min(1.0),
                (2.0 * g.pvalue_lower.min(l.pvalue_lower)).min(1.0),
            )
        }
    };
    Ok(GammaBound {
        gamma,
        pvalue_upper: upper,
        pvalue_lower: lower,
    })
}

/// Returned by [`gamma_star`] when the test does not reject at `gamma = 1`.
pub const GAMMA_STAR_NONE: f64 = 0.0;
pub const GAMMA_STAR_TOLERANCE: f64 = 1e-4;
const GAMMA_CAP: f64 = 1e6;

/// Largest `gamma` whose upper p-value is at most `alpha`, to within
/// [`GAMMA_STAR_TOLERANCE`]; [`GAMMA_STAR_NONE`] when no `gamma >= 1` rejects.
pub fn gamma_star(table: &PairTable, side: Side, alpha: f64) -> Result<f64> {
    let upper = |g: f64| gamma_pvalue(table, g, side).map(|b| b.pvalue_upper);
    if upper(1.0)? > alpha {
        return Ok(GAMMA_STAR_NONE);
    }
    let mut lo = 1.0;
    let mut hi = 2.0;
    while upper(hi)? <= alpha {
        lo = hi;
        hi *= 2.0;
        if hi > GAMMA_CAP {
            return Ok(GAMMA_CAP);
        }
    }
    while hi - lo > GAMMA_STAR_TOLERANCE / 2.0 {
        let mid = 0.5 * (lo + hi);
        if upper(mid)? <= alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Bounds over a grid of `gamma` values.
pub fn gamma_sweep(table: &PairTable, side: Side, grid: &[f64]) -> Result<Vec<GammaBound>> {
    grid.iter().map(|&g| gamma_pvalue(table, g, side)).collect()
}

/// Whose events the hypothesized effect is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionDirection {
    Treated,
    /// Roles of treatment and control reversed.
    Control,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributableNull {
    pub delta0: u64,
    pub direction: AttributionDirection,
    pub adjusted: PairTable,
}

fn transpose(t: &PairTable) -> PairTable {
    PairTable::new(t.n00, t.n10, t.n01, t.n11)
}

/// Hardest-to-reject table consistent with `delta0` events caused by
/// treatment: events are removed first from concordant (1,1) pairs, then
/// from (1,0) pairs.
pub fn adjust_for_attribution(table: &PairTable, delta0: u64, direction: AttributionDirection) -> Result<AttributableNull> {
    let t = match direction {
        AttributionDirection::Treated => *table,
        AttributionDirection::Control => transpose(table),
    };
    let capacity = t.n11 + t.n10;
    if delta0 > capacity {
        return Err(Error::InvalidArgument(format!(
            "attributable effect {delta0} exceeds the {capacity} events available"
        )));
    }
    let from_11 = delta0.min(t.n11);
    let from_10 = delta0 - from_11;
    let adjusted = PairTable::new(t.n00 + from_10, t.n01 + from_11, t.n10 - from_10, t.n11 - from_11);
    Ok(AttributableNull {
        delta0,
        direction,
        adjusted: match direction {
            AttributionDirection::Treated => adjusted,
            AttributionDirection::Control => transpose(&adjusted),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceResult {
    pub null: AttributableNull,
    pub gamma: f64,
    pub pvalue_upper: f64,
    pub reject: bool,
}

/// Test of `H0: attributable effect >= delta0` under hidden bias `gamma`.
pub fn equivalence_sensitivity(
    table: &PairTable,
    delta0: u64,
    direction: AttributionDirection,
    gamma: f64,
    alpha: f64,
) -> Result<EquivalenceResult> {
    let null = adjust_for_attribution(table, delta0, direction)?;
    let oriented = match direction {
        AttributionDirection::Treated => null.adjusted,
        AttributionDirection::Control => transpose(&null.adjusted),
    };
    let p = gamma_pvalue(&oriented, gamma, Side::Less)?.pvalue_upper;
    Ok(EquivalenceResult {
        null,
        gamma,
        pvalue_upper: p,
        reject: p <= alpha,
    })
}
