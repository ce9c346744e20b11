//! Small numerical helpers shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal};

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with denominator `n - 1`.
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

pub fn sd(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

/// Linear-interpolated quantile (type 7) of unsorted data.
pub fn quantile(x: &[f64], q: f64) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// `ln k!` for `k = 0..=n`.
pub fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

fn binom_terms(n: u64, p: f64, range: std::ops::RangeInclusive<u64>) -> f64 {
    if range.is_empty() {
        return 0.0;
    }
    if p <= 0.0 {
        return if range.contains(&0) { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if range.contains(&n) { 1.0 } else { 0.0 };
    }
    if p == 0.5 && n <= 1000 {
        // C(n, k) is exact in f64 for these sizes up to rounding of the sum.
        let mut c = 1.0f64;
        let mut sum = 0.0f64;
        for k in 0..=n {
            if range.contains(&k) {
                sum += c;
            }
            c = c * (n - k) as f64 / (k + 1) as f64;
        }
        return (sum * 0.5f64.powi(n as i32)).min(1.0);
    }
    let lf = ln_factorials(n as usize);
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let mut terms: Vec<f64> = range
        .map(|k| {
            let k_ = k as usize;
            (lf[n as usize] - lf[k_] - lf[n as usize - k_] + k as f64 * lp + (n - k) as f64 * lq).exp()
        })
        .collect();
    terms.sort_by(|a, b| a.total_cmp(b));
    terms.iter().sum::<f64>().min(1.0)
}

/// `P(X >= k)` for `X ~ Binomial(n, p)`.
pub fn binom_upper_tail(n: u64, k: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    binom_terms(n, p, k..=n)
}

/// `P(X <= k)` for `X ~ Binomial(n, p)`.
pub fn binom_lower_tail(n: u64, k: u64, p: f64) -> f64 {
    if k >= n {
        return 1.0;
    }
    binom_terms(n, p, 0..=k)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Upper-tail probability of an F(d1, d2) statistic.
pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
    if !f.is_finite() {
        return if f.is_nan() { f64::NAN } else { 0.0 };
    }
    if f <= 0.0 {
        return 1.0;
    }
    match FisherSnedecor::new(d1, d2) {
        Ok(dist) => dist.sf(f),
        Err(_) => f64::NAN,
    }
}

/// Independent random stream `stream` under `seed`; results do not depend
/// on which thread draws which stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Indices of a maximal linearly independent prefix-greedy set of columns.
pub(crate) fn independent_columns(x: &nalgebra::DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<nalgebra::DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..x.ncols() {
        let mut v = x.column(j).into_owned();
        let norm = v.norm();
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v -= b * c;
            }
        }
        if norm > 0.0 && v.norm() > 1e-10 * norm {
            basis.push(&v / v.norm());
            keep.push(j);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_upper(n: u64, k: u64, p: f64) -> f64 {
        let mut total = 0.0;
        for x in k..=n {
            let mut c = 1.0;
            for i in 0..x {
                c = c * (n - i) as f64 / (i + 1) as f64;
            }
            total += c * p.powi(x as i32) * (1.0 - p).powi((n - x) as i32);
        }
        total
    }

    #[test]
    fn binomial_tails_match_direct_sums() {
        for &(n, k, p) in &[(10u64, 3u64, 0.3), (25, 20, 0.6), (40, 0, 0.2), (7, 7, 0.5), (563, 222, 0.5)] {
            let a = binom_upper_tail(n, k, p);
            let b = brute_upper(n, k, p);
            assert!((a - b).abs() <= 1e-12 * b.max(1e-300) + 1e-300, "{n} {k} {p}: {a} vs {b}");
        }
    }

    #[test]
    fn lower_and_upper_tails_complement() {
        for n in 1..40u64 {
            for k in 0..n {
                for &p in &[0.2, 0.5, 0.57] {
                    let s = binom_lower_tail(n, k, p) + binom_upper_tail(n, k + 1, p);
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[1.0], 0.9), 1.0);
    }

    #[test]
    fn f_tail_matches_known_value() {
        // F(2, 10) upper 5% point is 4.1028
        assert!((f_sf(4.102821, 2.0, 10.0) - 0.05).abs() < 1e-5);
    }
}
