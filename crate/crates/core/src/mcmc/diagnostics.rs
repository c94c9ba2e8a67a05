//! Convergence diagnostics: effective sample size via the initial positive
//! sequence estimator, plus a Kolmogorov-Smirnov test used by the sampler
//! checks.

/// Effective sample size by Geyer's initial positive sequence: sum adjacent
/// autocovariance pairs while they stay positive.
pub fn ess_ips(trace: &[f64]) -> f64 {
    let n = trace.len();
    if n < 4 {
        return n as f64;
    }
    let nf = n as f64;
    let mean = trace.iter().sum::<f64>() / nf;
    let autocov = |lag: usize| -> f64 {
        let mut s = 0.0;
        for t in 0..(n - lag) {
            s += (trace[t] - mean) * (trace[t + lag] - mean);
        }
        s / nf
    };
    let c0 = autocov(0);
    if c0 <= 0.0 || !c0.is_finite() {
        // constant (or degenerate) trace
        return nf;
    }
    let max_lag = n / 3;
    let mut paired_sum = 0.0;
    let mut m = 0usize;
    loop {
        let lag = 2 * m;
        if lag + 1 > max_lag {
            break;
        }
        let gamma = autocov(lag) + autocov(lag + 1);
        if gamma <= 0.0 {
            break;
        }
        paired_sum += gamma;
        m += 1;
    }
    let tau = (2.0 * paired_sum / c0 - 1.0).max(1e-12);
    nf / tau
}

/// Kolmogorov-Smirnov statistic of a sorted sample against a CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(sorted: &[f64], cdf: F) -> f64 {
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max(((i + 1) as f64 / n - f).abs());
        d = d.max((i as f64 / n - f).abs());
    }
    d
}

/// Asymptotic two-sided KS p-value.
pub fn ks_pvalue(stat: f64, n: usize) -> f64 {
    let sqrt_n = (n as f64).sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * stat;
    let mut p = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
    }
    p.clamp(0.0, 1.0)
}
