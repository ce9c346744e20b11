//! Per-rule and overall treatment assignment and neighborhood membership.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Comparator, DesignView, NeighborhoodSpec, RuleSet};

/// Per-unit assignment and neighborhood indicators.
///
/// `z[i][j]` is the rule-`j` assignment of unit `i`; `n[i][j]` its rule-`j`
/// neighborhood membership. Either block is empty when not computed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssignmentTable {
    pub z: Vec<Vec<bool>>,
    pub n: Vec<Vec<bool>>,
}

impl AssignmentTable {
    pub fn len(&self) -> usize {
        self.z.len().max(self.n.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn treated(&self, i: usize) -> bool {
        self.z[i].iter().any(|&b| b)
    }

    pub fn in_neighborhood(&self, i: usize) -> bool {
        self.n[i].iter().any(|&b| b)
    }

    pub fn triggering_rules(&self, i: usize) -> Vec<usize> {
        self.z[i].iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect()
    }

    pub fn neighborhood_rules(&self, i: usize) -> Vec<usize> {
        self.n[i].iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect()
    }

    /// Overall treatment indicator for every unit.
    pub fn z_overall(&self) -> Vec<bool> {
        (0..self.z.len()).map(|i| self.treated(i)).collect()
    }

    pub fn n_overall(&self) -> Vec<bool> {
        (0..self.n.len()).map(|i| self.in_neighborhood(i)).collect()
    }

    /// Merge the Z block of `self` with the N block of `other`.
    pub fn with_neighborhood(mut self, other: AssignmentTable) -> Self {
        self.n = other.n;
        self
    }

    /// Audit export: one row per unit with every indicator.
    pub fn write_csv<W: Write>(&self, unit_ids: &[String], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let rules = self.z.first().or(self.n.first()).map_or(0, |r| r.len());
        let mut header = vec!["unit_id".to_string()];
        if !self.z.is_empty() {
            header.extend((1..=rules).map(|j| format!("z_{j}")));
            header.push("z".into());
            header.push("triggering_rules".into());
        }
        if !self.n.is_empty() {
            header.extend((1..=rules).map(|j| format!("n_{j}")));
            header.push("n".into());
            header.push("neighborhood_rules".into());
        }
        w.write_record(&header)?;
        let fmt_rules = |v: Vec<usize>| {
            v.iter()
                .map(|j| (j + 1).to_string())
                .collect::<Vec<_>>()
                .join(";")
        };
        for (i, id) in unit_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            if !self.z.is_empty() {
                rec.extend(self.z[i].iter().map(|&b| u8::from(b).to_string()));
                rec.push(u8::from(self.treated(i)).to_string());
                rec.push(fmt_rules(self.triggering_rules(i)));
            }
            if !self.n.is_empty() {
                rec.extend(self.n[i].iter().map(|&b| u8::from(b).to_string()));
                rec.push(u8::from(self.in_neighborhood(i)).to_string());
                rec.push(fmt_rules(self.neighborhood_rules(i)));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Comparison helper that works in grid ticks when a grid is configured,
/// so that 3.9 and 39 * 0.1 compare equal.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Grid(Option<f64>);

const TICK_EPS: f64 = 1e-7;

impl Grid {
    pub(crate) fn new(g: Option<f64>) -> Self {
        Grid(g)
    }

    fn tick(self, g: f64, x: f64) -> f64 {
        (x / g).round()
    }

    pub(crate) fn below(self, x: f64, cutoff: f64, cmp: Comparator) -> bool {
        match (self.0, cmp) {
            (None, Comparator::AtOrBelow) => x <= cutoff,
            (None, Comparator::StrictlyBelow) => x < cutoff,
            (Some(g), Comparator::AtOrBelow) => self.tick(g, x) <= (cutoff / g + TICK_EPS).floor(),
            (Some(g), Comparator::StrictlyBelow) => self.tick(g, x) < (cutoff / g - TICK_EPS).ceil(),
        }
    }

    pub(crate) fn within(self, x: f64, lo: f64, hi: f64) -> bool {
        match self.0 {
            None => x >= lo && x <= hi,
            Some(g) => {
                let t = self.tick(g, x);
                t >= (lo / g - TICK_EPS).ceil() && t <= (hi / g + TICK_EPS).floor()
            }
        }
    }
}

fn clause_columns<'a>(view: &'a DesignView, rules: &RuleSet) -> Result<Vec<Vec<&'a [f64]>>> {
    rules
        .rules
        .iter()
        .map(|r| r.clauses.iter().map(|c| view.running_values(&c.variable)).collect())
        .collect()
}

/// Evaluates `Z_ij` for every unit and rule: a rule assigns a unit iff
/// every one of its clauses holds.
pub fn assign(view: &DesignView, rules: &RuleSet) -> Result<AssignmentTable> {
    rules.check()?;
    let cols = clause_columns(view, rules)?;
    let grid = Grid::new(rules.grid);
    let z = (0..view.len())
        .map(|i| {
            rules
                .rules
                .iter()
                .zip(&cols)
                .map(|(rule, rc)| {
                    rule.clauses
                        .iter()
                        .zip(rc)
                        .all(|(cl, col)| grid.below(col[i], cl.cutoff, cl.comparator))
                })
                .collect()
        })
        .collect();
    Ok(AssignmentTable { z, n: Vec::new() })
}

/// Evaluates `N_ij`: unit `i` is in the neighborhood of rule `j` iff each
/// of the rule's running values lies in its closed interval.
pub fn neighborhood_membership(
    view: &DesignView,
    rules: &RuleSet,
    nbhd: &NeighborhoodSpec,
) -> Result<AssignmentTable> {
    rules.check()?;
    nbhd.check(rules)?;
    let cols = clause_columns(view, rules)?;
    let grid = Grid::new(rules.grid);
    let intervals: Vec<Vec<(f64, f64)>> = rules
        .rules
        .iter()
        .enumerate()
        .map(|(j, r)| (0..r.clauses.len()).map(|k| nbhd.interval(rules, j, k)).collect())
        .collect();
    let n = (0..view.len())
        .map(|i| {
            intervals
                .iter()
                .zip(&cols)
                .map(|(iv, rc)| iv.iter().zip(rc).all(|(&(lo, hi), col)| grid.within(col[i], lo, hi)))
                .collect()
        })
        .collect();
    Ok(AssignmentTable { z: Vec::new(), n })
}

/// Both blocks at once.
pub fn assignment_table(view: &DesignView, rules: &RuleSet, nbhd: &NeighborhoodSpec) -> Result<AssignmentTable> {
    Ok(assign(view, rules)?.with_neighborhood(neighborhood_membership(view, rules, nbhd)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Clause, HalfWidths, NumericColumn, RunningVariableDef, StudyFrame, TreatmentRule};
    use crate::model::strip_outcomes;

    pub(crate) fn grade_rules() -> RuleSet {
        let var = |id: &str| RunningVariableDef {
            id: id.into(),
            description: String::new(),
        };
        let clause = |v: &str, c: f64| Clause {
            variable: v.into(),
            cutoff: c,
            comparator: Comparator::AtOrBelow,
        };
        RuleSet::new(
            vec![var("lowest"), var("second_lowest"), var("average")],
            vec![
                TreatmentRule {
                    name: "fail one".into(),
                    clauses: vec![clause("lowest", 3.9), clause("average", 4.4)],
                },
                TreatmentRule {
                    name: "fail two".into(),
                    clauses: vec![clause("second_lowest", 3.9), clause("average", 4.9)],
                },
            ],
            Some(0.1),
        )
        .unwrap()
    }

    fn view(rows: &[(f64, f64, f64)]) -> DesignView {
        let col = |name: &str, f: &dyn Fn(&(f64, f64, f64)) -> f64| NumericColumn {
            name: name.into(),
            values: rows.iter().map(f).collect(),
        };
        strip_outcomes(&StudyFrame {
            unit_ids: (0..rows.len()).map(|i| i.to_string()).collect(),
            running: vec![
                col("lowest", &|r| r.0),
                col("second_lowest", &|r| r.1),
                col("average", &|r| r.2),
            ],
            covariates: vec![],
            tests: vec![],
            outcomes: vec![],
            sample: None,
        })
    }

    fn case_study_nbhd() -> NeighborhoodSpec {
        let w = |l, u| HalfWidths { lower: l, upper: u };
        NeighborhoodSpec {
            widths: vec![vec![w(0.4, 0.5), w(0.1, 0.2)], vec![w(0.4, 0.5), w(0.1, 0.2)]],
        }
    }

    #[test]
    fn fail_one_subject_with_low_average_is_retained() {
        let t = assign(&view(&[(3.9, 5.0, 4.4)]), &grade_rules()).unwrap();
        assert_eq!(t.z[0], vec![true, false]);
        assert!(t.treated(0));
        assert_eq!(t.triggering_rules(0), vec![0]);
    }

    #[test]
    fn no_failed_subject_is_not_retained() {
        let t = assign(&view(&[(4.0, 4.2, 4.4)]), &grade_rules()).unwrap();
        assert!(!t.treated(0));
    }

    #[test]
    fn two_failures_below_five_is_retained_by_rule_two() {
        let t = assign(&view(&[(3.0, 3.9, 4.9)]), &grade_rules()).unwrap();
        assert_eq!(t.z[0], vec![false, true]);
    }

    #[test]
    fn grid_snapping_absorbs_float_noise() {
        let t = assign(&view(&[(3.9000000001, 5.0, 4.3999999)]), &grade_rules()).unwrap();
        assert!(t.z[0][0]);
        let mut strict = grade_rules();
        strict.rules[0].clauses[0].comparator = Comparator::StrictlyBelow;
        let t = assign(&view(&[(3.9000000001, 5.0, 4.4)]), &strict).unwrap();
        assert!(!t.z[0][0]);
        let t = assign(&view(&[(3.8, 5.0, 4.4)]), &strict).unwrap();
        assert!(t.z[0][0]);
    }

    #[test]
    fn neighborhood_box_membership() {
        let rules = grade_rules();
        let nb = case_study_nbhd();
        let t = neighborhood_membership(&view(&[(3.7, 5.0, 4.5), (3.4, 5.0, 4.5)]), &rules, &nb).unwrap();
        assert!(t.n[0][0]);
        assert!(!t.n[1][0]);
    }

    #[test]
    fn unit_in_both_boxes() {
        // rule-2 average box widened to [4.6, 5.1] so that 4.6 sits in both
        let rules = grade_rules();
        let mut nb = case_study_nbhd();
        nb.widths[1][1] = HalfWidths { lower: 0.3, upper: 0.2 };
        let t = neighborhood_membership(&view(&[(3.6, 3.9, 4.6)]), &rules, &nb).unwrap();
        assert_eq!(t.n[0], vec![true, true]);
        assert!(t.in_neighborhood(0));
        assert_eq!(t.neighborhood_rules(0), vec![0, 1]);
    }

    #[test]
    fn upper_edge_is_inclusive() {
        let rules = grade_rules();
        let nb = case_study_nbhd();
        // c11 + 0.5 = 4.4 and c12 + 0.2 = 4.6
        let t = neighborhood_membership(&view(&[(4.4, 5.0, 4.6)]), &rules, &nb).unwrap();
        assert!(t.n[0][0]);
        let t = neighborhood_membership(&view(&[(4.5, 5.0, 4.6)]), &rules, &nb).unwrap();
        assert!(!t.n[0][0]);
    }

    #[test]
    fn csv_export_has_indicator_columns() {
        let rules = grade_rules();
        let v = view(&[(3.7, 5.0, 4.5)]);
        let t = assignment_table(&v, &rules, &case_study_nbhd()).unwrap();
        let mut buf = Vec::new();
        t.write_csv(v.unit_ids(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("unit_id,z_1,z_2,z,triggering_rules,n_1,n_2,n,neighborhood_rules"));
        assert!(text.contains("\n0,0,0,0,,1,0,1,1"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn grade() -> impl Strategy<Value = f64> {
            (10u32..=70).prop_map(|k| k as f64 / 10.0)
        }

        proptest! {
            #[test]
            fn enlarging_widths_never_removes_members(
                rows in proptest::collection::vec((grade(), grade(), grade()), 1..30),
                grow in proptest::collection::vec(0u32..5, 8),
            ) {
                let rules = grade_rules();
                let small = case_study_nbhd();
                let mut big = small.clone();
                let mut g = grow.iter();
                for row in big.widths.iter_mut() {
                    for hw in row.iter_mut() {
                        hw.lower += *g.next().unwrap() as f64 * 0.1;
                        hw.upper += *g.next().unwrap() as f64 * 0.1;
                    }
                }
                let v = view(&rows);
                let a = neighborhood_membership(&v, &rules, &small).unwrap();
                let b = neighborhood_membership(&v, &rules, &big).unwrap();
                for i in 0..rows.len() {
                    for j in 0..2 {
                        prop_assert!(!a.n[i][j] || b.n[i][j]);
                    }
                }
            }

            #[test]
            fn permuting_units_permutes_assignment(
                rows in proptest::collection::vec((grade(), grade(), grade()), 1..30),
                seed in any::<u64>(),
            ) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let rules = grade_rules();
                let mut perm: Vec<usize> = (0..rows.len()).collect();
                perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let shuffled: Vec<_> = perm.iter().map(|&i| rows[i]).collect();
                let a = assignment_table(&view(&rows), &rules, &case_study_nbhd()).unwrap();
                let b = assignment_table(&view(&shuffled), &rules, &case_study_nbhd()).unwrap();
                for (pos, &i) in perm.iter().enumerate() {
                    prop_assert_eq!(&a.z[i], &b.z[pos]);
                    prop_assert_eq!(&a.n[i], &b.n[pos]);
                }
            }
        }
    }
}
