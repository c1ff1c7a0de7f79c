//! Small statistics toolbox: bootstrap intervals, rank and linear
//! correlation, and the sign test.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    /// Strictly above `other` with disjoint intervals.
    pub fn clearly_above(&self, other: &Interval) -> bool {
        self.lo > other.hi
    }
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let pos = q * (s.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 < s.len() {
        s[i] * (1.0 - f) + s[i + 1] * f
    } else {
        s[i]
    }
}

/// Percentile bootstrap interval of the mean at level `1 - alpha`.
pub fn bootstrap_ci(x: &[f64], resamples: usize, alpha: f64, rng: &mut Rng) -> Result<Interval> {
    if x.is_empty() {
        return Err(Error::EmptySelection("bootstrap of an empty sample".into()));
    }
    let n = x.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| x[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    Ok(Interval {
        mean: mean(x),
        lo: quantile_sorted(&means, alpha / 2.0),
        hi: quantile_sorted(&means, 1.0 - alpha / 2.0),
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("pearson needs two equal-length samples of size >= 2"));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant sample".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p-value from the t approximation.
    pub p: f64,
    pub n: usize,
}

/// Spearman rank correlation with a two-sided p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    let r = pearson(&ranks(x), &ranks(y))?;
    let n = x.len();
    let p = if n <= 2 {
        1.0
    } else if r.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("valid t");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Correlation { r, p, n })
}

/// One-sided sign test of "differences are positive"; zero differences are dropped.
pub fn sign_test(diffs: &[f64]) -> (usize, usize, f64) {
    let pos = diffs.iter().filter(|&&d| d > 0.0).count();
    let n = diffs.iter().filter(|&&d| d != 0.0).count();
    if n == 0 {
        return (0, 0, 1.0);
    }
    let b = Binomial::new(0.5, n as u64).expect("valid binomial");
    let p = if pos == 0 { 1.0 } else { 1.0 - b.cdf(pos as u64 - 1) };
    (pos, n, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn degenerate_bootstrap_has_zero_width() {
        let ci = bootstrap_ci(&[0.7; 30], 1000, 0.05, &mut substream(0, "b", 0)).unwrap();
        assert_eq!(ci.lo, ci.hi);
        assert!((ci.mean - 0.7).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_brackets_mean() {
        let x: Vec<f64> = (0..50).map(|i| (i % 7) as f64).collect();
        let ci = bootstrap_ci(&x, BOOTSTRAP_RESAMPLES, 0.05, &mut substream(0, "b", 1)).unwrap();
        assert!(ci.lo < ci.mean && ci.mean < ci.hi);
        // normal-theory half width is 1.96 * sd / sqrt(n) = 0.56
        assert!(((ci.hi - ci.lo) / 2.0 - 0.56).abs() < 0.06);
    }

    #[test]
    fn spearman_reference_values() {
        // scipy.stats.spearmanr([1,2,3,4,5,6],[2,1,4,3,6,5]) -> 0.8285714, p = 0.0415626
        let c = spearman(&[1., 2., 3., 4., 5., 6.], &[2., 1., 4., 3., 6., 5.]).unwrap();
        assert!((c.r - 0.828_571_4).abs() < 1e-6);
        assert!((c.p - 0.041_562_6).abs() < 1e-5);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn sign_test_reference() {
        // 9 of 10 positive: P(X >= 9 | n=10, 1/2) = 11/1024
        let (_, _, p) = sign_test(&[1., 1., 1., 1., 1., 1., 1., 1., 1., -1., 0.]);
        assert!((p - 11.0 / 1024.0).abs() < 1e-12);
    }
}
