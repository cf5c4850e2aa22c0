//! Small hypothesis tests used by the statistical checks.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Pearson chi-square test of `counts` against equal cell probabilities.
/// Returns the upper-tail p-value.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let k = counts.len();
    assert!(k >= 2 && n > 0);
    let expected = n as f64 / k as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((k - 1) as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

/// One-sample Kolmogorov-Smirnov statistic against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov p-value for statistic `d` on `n` samples.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let term = 2.0 * (-1.0f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// One-sided Mann-Whitney U test of the alternative "`x` tends to be larger
/// than `y`", normal approximation with tie and continuity corrections.
/// Returns the p-value.
pub fn mann_whitney_greater(x: &[f64], y: &[f64]) -> f64 {
    let (n1, n2) = (x.len(), y.len());
    assert!(n1 > 0 && n2 > 0);
    let mut all: Vec<(f64, bool)> = x.iter().map(|v| (*v, true)).chain(y.iter().map(|v| (*v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = avg;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let r1: f64 = all.iter().zip(&ranks).filter(|(a, _)| a.1).map(|(_, r)| r).sum();
    let (f1, f2) = (n1 as f64, n2 as f64);
    let u1 = r1 - f1 * (f1 + 1.0) / 2.0;
    let mu = f1 * f2 / 2.0;
    let nf = n as f64;
    let var = f1 * f2 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return if u1 > mu { 0.0 } else { 1.0 };
    }
    let z = (u1 - mu - 0.5) / var.sqrt();
    1.0 - Normal::new(0.0, 1.0).expect("standard normal").cdf(z)
}

/// Sample mean and standard error.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use rand::Rng;

    #[test]
    fn chi_square_known_value() {
        // stat = 4 with 1 dof → p ≈ 0.0455
        let p = chi_square_uniform(&[60, 40]);
        assert!((p - 0.045_500_264).abs() < 1e-6, "{p}");
    }

    #[test]
    fn ks_accepts_uniform_and_rejects_shift() {
        let mut rng = RngStream::new(1);
        let xs: Vec<f64> = (0..2000).map(|_| rng.gen::<f64>()).collect();
        let d = ks_statistic(&xs, |x| x.clamp(0.0, 1.0));
        assert!(ks_pvalue(d, xs.len()) > 0.01);
        let shifted: Vec<f64> = xs.iter().map(|x| x * 0.9).collect();
        let d = ks_statistic(&shifted, |x| x.clamp(0.0, 1.0));
        assert!(ks_pvalue(d, xs.len()) < 1e-6);
    }

    #[test]
    fn mann_whitney_direction() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 + 10.0).collect();
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert!(mann_whitney_greater(&x, &y) < 0.01);
        assert!(mann_whitney_greater(&y, &x) > 0.99);
        let p = mann_whitney_greater(&y, &y);
        assert!(p > 0.4 && p < 0.6);
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_stderr(&[2.0, 2.0, 2.0]), (2.0, 0.0));
    }
}
