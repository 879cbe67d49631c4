//! Small statistical toolkit for the validation suite: ensemble moments
//! with standard errors, deterministic pairwise reduction, two-sample
//! z-scores, a Kolmogorov-Smirnov statistic, and noise-aware slope fits for
//! the discretization-order studies.

use serde::{Deserialize, Serialize};

/// Pairwise (tree) summation; deterministic for a given element order and
/// independent of how the ensemble was scheduled.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Mean, variance and standard error of an ensemble.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    pub var: f64,
    pub se: f64,
}

pub fn moments(values: &[f64]) -> Moments {
    let n = values.len();
    assert!(n >= 2, "need at least two replicates");
    let nf = n as f64;
    let mean = pairwise_sum(values) / nf;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (nf - 1.0);
    Moments { n, mean, var, se: (var / nf).sqrt() }
}

/// Standard error of a sample-variance estimate under approximate normality:
/// `var * sqrt(2 / (n - 1))`.
pub fn variance_se(m: &Moments) -> f64 {
    m.var * (2.0 / (m.n as f64 - 1.0)).sqrt()
}

/// z-score of an ensemble mean against a known value.
pub fn z_against(m: &Moments, expected: f64) -> f64 {
    if m.se == 0.0 {
        if m.mean == expected {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (m.mean - expected) / m.se
    }
}

/// Sample covariance (with its rough standard error) between two ensembles.
pub fn covariance(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = pairwise_sum(a) / n;
    let mb = pairwise_sum(b) / n;
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    let cov = pairwise_sum(&prod) / (n - 1.0);
    let var_prod = moments(&prod).var;
    (cov, (var_prod / n).sqrt())
}

/// One-sample Kolmogorov-Smirnov statistic `D_n` against a CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &mut [f64], cdf: F) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (idx, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        let hi = (idx as f64 + 1.0) / n - f;
        let lo = f - idx as f64 / n;
        d = d.max(hi).max(lo);
    }
    d
}

/// Threshold on `sqrt(n) D_n` whose asymptotic exceedance probability equals
/// the two-sided 3-sigma normal tail (2 * Phi(-3) ~ 0.0027): the Kolmogorov
/// distribution gives `Q(x) = 2 sum (-1)^{k-1} e^{-2 k^2 x^2} = 0.0027` at
/// `x ~ 1.8174`.
pub const KS_THREE_SIGMA: f64 = 1.8174;

/// Weighted least-squares slope of `ln(stat)` against `ln(dt)`, with the
/// slope's standard error propagated from the per-level standard errors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub se: f64,
}

pub fn fit_log_slope(dts: &[f64], stats: &[f64], ses: &[f64]) -> SlopeFit {
    assert_eq!(dts.len(), stats.len());
    assert!(dts.len() >= 2);
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = stats.iter().map(|s| s.max(1e-300).ln()).collect();
    // Var(ln s) ~ (se / s)^2.
    let ws: Vec<f64> = stats
        .iter()
        .zip(ses)
        .map(|(s, e)| {
            let rel = if *s > 0.0 { e / s } else { 1.0 };
            1.0 / rel.max(1e-9).powi(2)
        })
        .collect();
    let wsum: f64 = ws.iter().sum();
    let xbar = xs.iter().zip(&ws).map(|(x, w)| x * w).sum::<f64>() / wsum;
    let ybar = ys.iter().zip(&ws).map(|(y, w)| y * w).sum::<f64>() / wsum;
    let sxx: f64 = xs.iter().zip(&ws).map(|(x, w)| w * (x - xbar) * (x - xbar)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .zip(&ws)
        .map(|((x, y), w)| w * (x - xbar) * (y - ybar))
        .sum();
    let slope = sxy / sxx;
    // Propagated variance of the WLS slope estimate.
    let var = 1.0 / sxx;
    SlopeFit { slope, se: var.sqrt() }
}
