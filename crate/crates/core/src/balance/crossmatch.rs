use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::blossom;
use crate::stats;
use crate::{Error, Result};

/// Dense symmetric distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    /// Row-major `n x n` data; must be symmetric with finite entries.
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n || data.iter().any(|d| !d.is_finite()) {
            return Err(Error::BadDistanceMatrix);
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (data[i * n + j], data[j * n + i]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::BadDistanceMatrix);
                }
            }
        }
        Ok(Self { n, data })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let d = f(i, j);
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        Self::new(n, data)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

fn euclidean(rows: &[Vec<f64>]) -> Result<DistanceMatrix> {
    DistanceMatrix::from_fn(rows.len(), |i, j| {
        rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    })
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mahalanobis distances under the covariance pooled over all rows. When the
/// covariance is singular, falls back to Euclidean distance on per-column
/// ranks scaled to unit SD; the flag reports the fallback.
pub fn mahalanobis_distances(rows: &[Vec<f64>]) -> Result<(DistanceMatrix, bool)> {
    let n = rows.len();
    let p = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != p || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("rows must have equal length and finite values".into()));
    }
    if n < 2 || p == 0 {
        return Ok((euclidean(rows)?, false));
    }
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    let means = DVector::from_fn(p, |j, _| x.column(j).mean());
    let mut centered = x.clone();
    for j in 0..p {
        centered.column_mut(j).add_scalar_mut(-means[j]);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = cov.clone().symmetric_eigenvalues();
    let max_eig = eig.max();
    let singular = n <= p || !(max_eig > 0.0) || eig.min() <= 1e-10 * max_eig;
    if !singular {
        if let Some(chol) = cov.cholesky() {
            // Whitening by the Cholesky factor turns Mahalanobis into Euclidean.
            let l = chol.l();
            let white: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let z = l
                        .solve_lower_triangular(&DVector::from_column_slice(r))
                        .expect("nonsingular factor");
                    z.iter().copied().collect()
                })
                .collect();
            return Ok((euclidean(&white)?, false));
        }
    }
    let mut cols = Vec::new();
    for j in 0..p {
        let r = average_ranks(&rows.iter().map(|row| row[j]).collect::<Vec<_>>());
        let s = stats::sd(&r);
        if s > 0.0 {
            cols.push(r.into_iter().map(|v| v / s).collect::<Vec<_>>());
        }
    }
    let scaled: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
    Ok((euclidean(&scaled)?, true))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfectMatching {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
    /// With an odd number of units: the unit paired with the phantom.
    pub unmatched: Option<usize>,
    /// Optimality conditions verified on the integer duals.
    pub certified: bool,
}

const QUANT: f64 = (1u64 << 36) as f64;
const DENSE_LIMIT: usize = 64;
const NEIGHBORS: usize = 12;

/// Minimum-distance perfect matching. With odd `n` a zero-distance phantom
/// is added and its partner reported as `unmatched`.
///
/// Large instances are solved on a nearest-neighbour subgraph; edges of the
/// complete graph with negative reduced slack under the resulting duals are
/// added and the solve repeated until the duals are feasible for every edge,
/// so the result is optimal for the complete graph.
pub fn optimal_nonbipartite_matching(d: &DistanceMatrix) -> Result<PerfectMatching> {
    let n = d.len();
    if n < 2 {
        return Ok(PerfectMatching {
            pairs: Vec::new(),
            cost: 0.0,
            unmatched: (n == 1).then_some(0),
            certified: true,
        });
    }
    let nv = n + n % 2;
    let dist = |i: usize, j: usize| if i >= n || j >= n { 0.0 } else { d.get(i, j) };
    let dmax = (0..n).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| d.get(i, j)).fold(0.0, f64::max);
    let scale = if dmax > 0.0 { QUANT / dmax } else { 1.0 };
    let weight = |i: usize, j: usize| 2 * (QUANT as i64 + 1 - (dist(i, j) * scale).round() as i64);

    let mut present = vec![false; nv * nv];
    let add = |present: &mut Vec<bool>, i: usize, j: usize| {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        present[a * nv + b] = true;
    };
    if nv <= DENSE_LIMIT {
        present.iter_mut().for_each(|p| *p = true);
    } else {
        for i in 0..n {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let k = NEIGHBORS.min(order.len());
            order.select_nth_unstable_by(k - 1, |&a, &b| d.get(i, a).total_cmp(&d.get(i, b)).then(a.cmp(&b)));
            for &j in &order[..k] {
                add(&mut present, i, j);
            }
        }
        for i in n..nv {
            for j in 0..n {
                add(&mut present, i, j);
            }
        }
    }

    loop {
        let mut edges = Vec::new();
        for i in 0..nv {
            for j in (i + 1)..nv {
                if present[i * nv + j] {
                    edges.push((i, j, weight(i, j)));
                }
            }
        }
        let res = blossom::max_weight_matching(nv, &edges, true);
        if !res.is_perfect() {
            for v in (0..nv).filter(|&v| res.mate[v].is_none()) {
                for j in (0..nv).filter(|&j| j != v) {
                    add(&mut present, v, j);
                }
            }
            continue;
        }
        let mut violated = false;
        for i in 0..nv {
            for j in (i + 1)..nv {
                if !present[i * nv + j] && res.slack(i, j, weight(i, j)) < 0 {
                    present[i * nv + j] = true;
                    violated = true;
                }
            }
        }
        if violated {
            continue;
        }
        let mut pairs = Vec::with_capacity(n / 2);
        let mut unmatched = None;
        for (v, m) in res.mate.iter().enumerate() {
            let m = m.expect("perfect matching");
            if m >= n {
                unmatched = Some(v);
            } else if v < m && v < n {
                pairs.push((v, m));
            }
        }
        let cost = pairs.iter().map(|&(i, j)| d.get(i, j)).sum();
        return Ok(PerfectMatching {
            pairs,
            cost,
            unmatched,
            certified: res.certified,
        });
    }
}

/// Exact null distribution of the cross-match count for `n` units of one
/// group and `m` of the other (`n + m` even): entry `a` is `P(A1 = a)`.
pub fn cross_match_null(n: usize, m: usize) -> Result<Vec<f64>> {
    let total = n + m;
    if total % 2 == 1 {
        return Err(Error::InvalidArgument("cross-match null needs an even number of units".into()));
    }
    let lf = stats::ln_factorials(total);
    let ln_choose = lf[total] - lf[n] - lf[m];
    Ok((0..=n.min(m))
        .map(|a| {
            if (n - a) % 2 == 1 {
                return 0.0;
            }
            let l = a as f64 * std::f64::consts::LN_2 + lf[total / 2] - lf[a] - lf[(n - a) / 2] - lf[(m - a) / 2] - ln_choose;
            l.exp()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossMatchResult {
    /// Pairs with one unit from each group.
    pub a1: usize,
    pub n: usize,
    pub m: usize,
    /// `P(A1 <= a1)` under the exact null.
    pub pvalue: f64,
    pub matching_cost: f64,
    /// Distance fell back to rank scaling because the covariance was singular.
    pub rank_fallback: bool,
    /// Unit dropped with the phantom when the total count is odd.
    pub dropped: Option<usize>,
}

/// Cross-match test of `labels` (true = first group) using the optimal
/// non-bipartite matching under distance `d`.
pub fn cross_match_test_with_distance(d: &DistanceMatrix, labels: &[bool]) -> Result<CrossMatchResult> {
    if labels.len() != d.len() {
        return Err(Error::InvalidArgument("labels and distance matrix differ in size".into()));
    }
    let n_all = labels.iter().filter(|&&z| z).count();
    if n_all == 0 || n_all == labels.len() {
        return Err(Error::InsufficientData("cross-match needs both groups nonempty".into()));
    }
    let matching = optimal_nonbipartite_matching(d)?;
    let (mut n, mut m) = (n_all, labels.len() - n_all);
    if let Some(u) = matching.unmatched {
        if labels[u] {
            n -= 1;
        } else {
            m -= 1;
        }
    }
    let a1 = matching.pairs.iter().filter(|&&(i, j)| labels[i] != labels[j]).count();
    let pvalue = if n == 0 || m == 0 {
        1.0
    } else {
        let null = cross_match_null(n, m)?;
        null[..=a1].iter().sum::<f64>().min(1.0)
    };
    Ok(CrossMatchResult {
        a1,
        n,
        m,
        pvalue,
        matching_cost: matching.cost,
        rank_fallback: false,
        dropped: matching.unmatched,
    })
}

/// Cross-match test on rows of `X^test` with pooled-covariance Mahalanobis
/// distance.
pub fn cross_match_test(rows: &[Vec<f64>], labels: &[bool]) -> Result<CrossMatchResult> {
    let (d, fallback) = mahalanobis_distances(rows)?;
    let mut r = cross_match_test_with_distance(&d, labels)?;
    r.rank_fallback = fallback;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn brute(d: &DistanceMatrix) -> f64 {
        fn rec(d: &DistanceMatrix, free: &mut Vec<usize>) -> f64 {
            if free.is_empty() {
                return 0.0;
            }
            let a = free.remove(0);
            let mut best = f64::INFINITY;
            for k in 0..free.len() {
                let b = free.remove(k);
                best = best.min(d.get(a, b) + rec(d, free));
                free.insert(k, b);
            }
            free.insert(0, a);
            best
        }
        rec(d, &mut (0..d.len()).collect())
    }

    fn random_matrix(n: usize, seed: u64, integer: bool) -> DistanceMatrix {
        let mut rng = stats::stream_rng(seed, 0);
        let vals: Vec<f64> = (0..n * n)
            .map(|_| if integer { rng.random_range(0..6) as f64 } else { rng.random::<f64>() })
            .collect();
        DistanceMatrix::from_fn(n, |i, j| vals[i * n + j]).unwrap()
    }

    #[test]
    fn two_units_single_pair() {
        let d = DistanceMatrix::new(2, vec![0.0, 3.0, 3.0, 0.0]).unwrap();
        let m = optimal_nonbipartite_matching(&d).unwrap();
        assert_eq!(m.pairs, vec![(0, 1)]);
        assert_eq!(m.cost, 3.0);
    }

    #[test]
    fn four_units_picks_cheapest() {
        // {(0,1),(2,3)} costs 2; alternatives cost 3 and 4.
        let d = DistanceMatrix::from_fn(4, |i, j| match (j, i) {
            (0, 1) | (2, 3) => 1.0,
            (0, 2) | (1, 3) => 1.5,
            _ => 2.0,
        })
        .unwrap();
        let m = optimal_nonbipartite_matching(&d).unwrap();
        assert_eq!(m.pairs, vec![(0, 1), (2, 3)]);
        assert!(m.certified);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        for seed in 0..150 {
            let n = 2 + (seed as usize % 5) * 2;
            let d = random_matrix(n, seed, seed % 3 == 0);
            let m = optimal_nonbipartite_matching(&d).unwrap();
            assert_eq!(m.pairs.len(), n / 2);
            assert!(m.certified, "seed {seed}");
            let b = brute(&d);
            assert!((m.cost - b).abs() < 1e-8, "seed {seed}: {} vs {b}", m.cost);
        }
    }

    #[test]
    fn odd_count_uses_phantom() {
        for seed in 0..30 {
            let d = random_matrix(7, seed, false);
            let m = optimal_nonbipartite_matching(&d).unwrap();
            assert_eq!(m.pairs.len(), 3);
            let u = m.unmatched.unwrap();
            let rest: Vec<usize> = (0..7).filter(|&i| i != u).collect();
            let sub = DistanceMatrix::from_fn(6, |i, j| d.get(rest[i], rest[j])).unwrap();
            // Dropping the phantom's partner leaves an optimal matching of the rest,
            // and no other choice of dropped unit does better.
            let best_drop = (0..7)
                .map(|x| {
                    let r: Vec<usize> = (0..7).filter(|&i| i != x).collect();
                    brute(&DistanceMatrix::from_fn(6, |i, j| d.get(r[i], r[j])).unwrap())
                })
                .fold(f64::INFINITY, f64::min);
            assert!((m.cost - brute(&sub)).abs() < 1e-8);
            assert!((m.cost - best_drop).abs() < 1e-8);
        }
    }

    #[test]
    fn beats_random_matchings() {
        let mut rng = stats::stream_rng(9, 1);
        let d = random_matrix(40, 77, false);
        let m = optimal_nonbipartite_matching(&d).unwrap();
        assert!(m.certified);
        for _ in 0..100 {
            let mut perm: Vec<usize> = (0..40).collect();
            for i in (1..40).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let c: f64 = perm.chunks(2).map(|p| d.get(p[0], p[1])).sum();
            assert!(m.cost <= c + 1e-9);
        }
    }

    #[test]
    fn sparse_pricing_agrees_with_dense_solve() {
        for seed in 0..4 {
            let n = 90 + seed as usize;
            let mut rng = stats::stream_rng(seed, 3);
            let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
            let d = DistanceMatrix::from_fn(n, |i, j| ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt())
                .unwrap();
            let sparse = optimal_nonbipartite_matching(&d).unwrap();
            assert!(sparse.certified);
            let nv = n + n % 2;
            let scale = QUANT / (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| d.get(i, j)).fold(0.0, f64::max);
            let mut edges = Vec::new();
            for i in 0..nv {
                for j in (i + 1)..nv {
                    let dij = if j >= n { 0.0 } else { d.get(i, j) };
                    edges.push((i, j, 2 * (QUANT as i64 + 1 - (dij * scale).round() as i64)));
                }
            }
            let dense = blossom::max_weight_matching(nv, &edges, true);
            let dense_cost: f64 = (0..n)
                .filter_map(|v| dense.mate[v].filter(|&m| v < m && m < n).map(|m| d.get(v, m)))
                .sum();
            assert!((sparse.cost - dense_cost).abs() < 1e-8, "{} vs {dense_cost}", sparse.cost);
        }
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(DistanceMatrix::new(2, vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(DistanceMatrix::new(2, vec![0.0, f64::NAN, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn null_four_units() {
        let p = cross_match_null(2, 2).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p[1], 0.0);
        assert!((p[2] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn null_sums_to_one() {
        for total in (2..=40).step_by(2) {
            for n in 0..=total {
                let s: f64 = cross_match_null(n, total - n).unwrap().iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "{n} {total}");
            }
        }
    }

    #[test]
    fn identical_rows_give_valid_pvalue() {
        let rows = vec![vec![1.0, 2.0]; 8];
        let labels = [true, false, true, false, true, true, false, false];
        let r = cross_match_test(&rows, &labels).unwrap();
        assert!(r.rank_fallback);
        assert!(r.pvalue >= 1.0 / 70.0 && r.pvalue <= 1.0);
        assert_eq!(r.a1 % 2, r.n % 2);
    }

    #[test]
    fn separated_groups_have_small_pvalue() {
        let mut rng = stats::stream_rng(2, 0);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![if i < 20 { 0.0 } else { 5.0 } + rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let labels: Vec<bool> = (0..40).map(|i| i < 20).collect();
        let r = cross_match_test(&rows, &labels).unwrap();
        assert_eq!(r.a1, 0);
        assert!(r.pvalue < 1e-5);
        assert!(!r.rank_fallback);
    }

    #[test]
    fn mahalanobis_matches_direct_formula() {
        let mut rng = stats::stream_rng(4, 0);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| {
                let a: f64 = rng.random();
                vec![a, a + rng.random::<f64>(), rng.random::<f64>() * 3.0]
            })
            .collect();
        let (d, fb) = mahalanobis_distances(&rows).unwrap();
        assert!(!fb);
        let x = DMatrix::from_fn(12, 3, |i, j| rows[i][j]);
        let mean = x.row_mean();
        let mut c = x.clone();
        for i in 0..12 {
            let r = c.row(i) - &mean;
            c.set_row(i, &r);
        }
        let s_inv = (c.transpose() * &c / 11.0).try_inverse().unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let v = DVector::from_fn(3, |k, _| rows[i][k] - rows[j][k]);
                let oracle = (v.transpose() * &s_inv * &v)[(0, 0)].sqrt();
                assert!((d.get(i, j) - oracle).abs() < 1e-9);
            }
        }
    }
}
