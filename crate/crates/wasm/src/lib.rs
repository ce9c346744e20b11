//! Browser bindings. Every export returns a JSON string.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use crd_core::estimate::{mcnemar_test, risk_difference, EffectEstimate, PairTable, Side};
use crd_core::model::{strip_outcomes, HalfWidths, NeighborhoodSpec};
use crd_core::neighborhood::{max_half_width, select_with_trace, ExpansionPolicy, SelectionConfig};
use crd_core::sensitivity::{equivalence_sensitivity, gamma_star, gamma_sweep, AttributionDirection, EquivalenceResult, GammaBound};
use crd_core::synth::{self, DgpConfig};

#[derive(Serialize)]
pub struct TableReport {
    pub estimate: EffectEstimate,
    pub mcnemar_p: f64,
    pub side: Side,
    pub gamma_star: f64,
    pub sweep: Vec<GammaBound>,
}

fn side_of(table: &PairTable) -> Side {
    if table.n10 < table.n01 {
        Side::Less
    } else {
        Side::Greater
    }
}

pub fn table_report(table: PairTable, alpha: f64) -> crd_core::Result<TableReport> {
    let side = side_of(&table);
    let grid: Vec<f64> = (0..=20).map(|i| 1.0 + 0.05 * i as f64).collect();
    Ok(TableReport {
        estimate: risk_difference(&table, 0.95)?,
        mcnemar_p: mcnemar_test(&table, side).pvalue,
        side,
        gamma_star: gamma_star(&table, side, alpha)?,
        sweep: gamma_sweep(&table, side, &grid)?,
    })
}

pub fn equivalence_report(table: PairTable, delta0: u64, gamma: f64, alpha: f64) -> crd_core::Result<EquivalenceResult> {
    equivalence_sensitivity(&table, delta0, AttributionDirection::Treated, gamma, alpha)
}

#[derive(Serialize)]
pub struct SelectionRow {
    pub candidate: i64,
    pub max_half_width: f64,
    pub pairs: usize,
    pub crossmatch_p: Option<f64>,
    pub min_ttest_p: Option<f64>,
    pub pass: bool,
}

#[derive(Serialize)]
pub struct SelectionReport {
    pub honest_half_width: Option<f64>,
    pub selected_half_width: Option<f64>,
    pub rows: Vec<SelectionRow>,
}

pub fn selection_report(n: usize, seed: u64, honest: Option<f64>, p_star: f64) -> crd_core::Result<SelectionReport> {
    let cfg = DgpConfig {
        n,
        seed,
        honest_half_width: honest,
        ..DgpConfig::default()
    };
    let (frame, _) = synth::generate(&cfg)?;
    let view = strip_outcomes(&frame);
    let rules = cfg.rules();
    let policy = ExpansionPolicy::subject_first(&rules, NeighborhoodSpec::uniform(&rules, HalfWidths::symmetric(0.1)), 0.1, 3, 0)?;
    let sc = SelectionConfig {
        p_star,
        draws: 1000,
        seed,
        ..SelectionConfig::default()
    };
    let (sel, trace) = select_with_trace(&view, &rules, &policy, &sc)?;
    Ok(SelectionReport {
        honest_half_width: honest,
        selected_half_width: sel.map(|s| max_half_width(&s.selected)),
        rows: trace
            .candidates
            .iter()
            .map(|c| SelectionRow {
                candidate: c.index,
                max_half_width: max_half_width(&c.spec),
                pairs: c.pairs,
                crossmatch_p: c.crossmatch_p,
                min_ttest_p: c.ttest_p.iter().map(|x| x.1).reduce(f64::min),
                pass: c.pass,
            })
            .collect(),
    })
}

fn to_js<T: Serialize>(r: crd_core::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// Risk difference, McNemar test and gamma sensitivity for a pair table.
#[wasm_bindgen(js_name = analyzeTable)]
pub fn analyze_table(n00: u32, n01: u32, n10: u32, n11: u32, alpha: f64) -> Result<String, JsError> {
    to_js(table_report(PairTable::new(n00.into(), n01.into(), n10.into(), n11.into()), alpha))
}

/// Test that at most `delta0` treated events are attributable to treatment.
#[wasm_bindgen(js_name = equivalenceTest)]
pub fn equivalence_test(n00: u32, n01: u32, n10: u32, n11: u32, delta0: u32, gamma: f64, alpha: f64) -> Result<String, JsError> {
    to_js(equivalence_report(PairTable::new(n00.into(), n01.into(), n10.into(), n11.into()), delta0.into(), gamma, alpha))
}

/// Neighborhood selection on a synthetic data set; a negative `honest`
/// means the whole frame is honest.
#[wasm_bindgen(js_name = selectSynthetic)]
pub fn select_synthetic(n: u32, seed: u32, honest: f64, p_star: f64) -> Result<String, JsError> {
    to_js(selection_report(n as usize, seed.into(), (honest >= 0.0).then_some(honest), p_star))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retention_table() {
        let r = table_report(PairTable::new(290, 341, 222, 288), 0.05).unwrap();
        assert!((r.estimate.point + 0.1043).abs() < 1e-4);
        assert_eq!(r.side, Side::Less);
        assert!(r.gamma_star > 1.2 && r.gamma_star < 1.45);
        assert_eq!(r.sweep.len(), 21);
    }

    #[test]
    fn selection_runs_on_small_frame() {
        let r = selection_report(2000, 3, Some(0.2), 0.1).unwrap();
        assert!(!r.rows.is_empty());
        if let Some(w) = r.selected_half_width {
            assert!(w <= 0.4 + 1e-9);
        }
    }
}
