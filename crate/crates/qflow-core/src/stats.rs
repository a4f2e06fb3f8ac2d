//! Statistical helpers: moments, correlation, Kolmogorov–Smirnov tests,
//! and the special functions they need.
//!
//! KS p-values use the exact small-sample distribution up to 35 samples per
//! side (lattice-path counting for two samples, the Marsaglia–Tsang–Wang
//! matrix method for one sample) and the asymptotic Kolmogorov distribution
//! with the Stephens small-sample correction above that.

use crate::error::{QflowError, Result};

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn variance(xs: &[f64]) -> f64 {
    let (mean, _) = mean_se(xs);
    let n = xs.len() as f64;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Pearson correlation coefficient.
pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Error function, Abramowitz–Stegun 7.1.26 (|error| < 1.5e-7).
pub fn erf(x: f64) -> f64 {
    let sign = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Asymptotic Kolmogorov survival function `Q(λ) = 2 Σ (-1)^{j-1} e^{-2j²λ²}`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Exact `P(D_n < d)` for the one-sample statistic
/// (Marsaglia–Tsang–Wang 2003).
fn ks_one_exact_cdf(n: usize, d: f64) -> f64 {
    if d >= 1.0 {
        return 1.0;
    }
    let nd = n as f64 * d;
    let k = nd.ceil() as usize;
    if k == 0 {
        return 0.0;
    }
    let m = 2 * k - 1;
    let h = k as f64 - nd;
    let mut hmat = vec![0.0f64; m * m];
    for i in 0..m {
        for j in 0..m {
            hmat[i * m + j] = if i + 1 >= j { 1.0 } else { 0.0 };
        }
    }
    for i in 0..m {
        hmat[i * m] -= h.powi(i as i32 + 1);
        hmat[(m - 1) * m + i] -= h.powi((m - i) as i32);
    }
    hmat[(m - 1) * m] += if 2.0 * h - 1.0 > 0.0 {
        (2.0 * h - 1.0).powi(m as i32)
    } else {
        0.0
    };
    for i in 0..m {
        for j in 0..m {
            if i + 1 >= j {
                let mut f = 1.0;
                for g in 1..=(i + 1 - j) {
                    f *= g as f64;
                }
                hmat[i * m + j] /= f;
            }
        }
    }
    // t = H^n with overflow scaling; n <= 35 so plain repeated products.
    let matmul = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0f64; m * m];
        for i in 0..m {
            for l in 0..m {
                let av = a[i * m + l];
                if av == 0.0 {
                    continue;
                }
                for j in 0..m {
                    c[i * m + j] += av * b[l * m + j];
                }
            }
        }
        c
    };
    let mut expo = 0i32;
    let mut t = hmat.clone();
    for _ in 1..n {
        t = matmul(&t, &hmat);
        if t[(k - 1) * m + (k - 1)] > 1e140 {
            for v in t.iter_mut() {
                *v *= 1e-140;
            }
            expo += 140;
        }
    }
    let mut p = t[(k - 1) * m + (k - 1)];
    // Multiply by n!/n^n with the scaling exponent folded back in.
    for i in 1..=n {
        p *= i as f64 / n as f64;
        if p < 1e-140 && expo > 0 {
            p *= 1e140;
            expo -= 140;
        }
    }
    p * 10f64.powi(expo)
}

/// Exact `P(D >= d)` for the two-sample statistic by lattice-path counting
/// (assumes effectively continuous data; valid for `n·m` small).
fn ks_two_exact_pvalue(n: usize, m: usize, d: f64) -> f64 {
    // Count monotone lattice paths (0,0) -> (n,m) with |i/n - j/m| < d.
    let mut u = vec![0.0f64; m + 1];
    u[0] = 1.0;
    let inside = |i: usize, j: usize| -> bool {
        (i as f64 / n as f64 - j as f64 / m as f64).abs() < d - 1e-12
    };
    for j in 1..=m {
        u[j] = if inside(0, j) { u[j - 1] } else { 0.0 };
    }
    for i in 1..=n {
        u[0] = if inside(i, 0) { u[0] } else { 0.0 };
        for j in 1..=m {
            // u[j] still holds the (i-1, j) count; u[j-1] is already (i, j-1).
            u[j] = if inside(i, j) { u[j] + u[j - 1] } else { 0.0 };
        }
    }
    // C(n+m, n)
    let mut total = 1.0f64;
    for i in 0..n {
        total *= (n + m - i) as f64 / (n - i) as f64;
    }
    (1.0 - u[m] / total).clamp(0.0, 1.0)
}

/// Sample size below which the exact distributions are used.
pub const KS_EXACT_CROSSOVER: usize = 35;

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    /// True when the exact small-sample distribution was used.
    pub exact: bool,
}

/// One-sample KS test against a CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> Result<KsResult> {
    if samples.len() < 8 {
        return Err(QflowError::InsufficientSamples(format!(
            "one-sample KS needs >= 8 samples, got {}",
            samples.len()
        )));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n as f64;
        let hi = (i + 1) as f64 / n as f64;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    if n <= KS_EXACT_CROSSOVER {
        Ok(KsResult {
            statistic: d,
            p_value: (1.0 - ks_one_exact_cdf(n, d)).clamp(0.0, 1.0),
            exact: true,
        })
    } else {
        let sn = (n as f64).sqrt();
        let lambda = (sn + 0.12 + 0.11 / sn) * d;
        Ok(KsResult {
            statistic: d,
            p_value: kolmogorov_q(lambda),
            exact: false,
        })
    }
}

/// Two-sample KS test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.len() < 8 || b.len() < 8 {
        return Err(QflowError::InsufficientSamples(format!(
            "two-sample KS needs >= 8 samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (n, m) = (xs.len(), ys.len());
    let mut i = 0usize;
    let mut j = 0usize;
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = xs[i];
        let y = ys[j];
        if x <= y {
            i += 1;
        }
        if y <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    if n.min(m) <= KS_EXACT_CROSSOVER && n * m <= 40_000 {
        Ok(KsResult {
            statistic: d,
            p_value: ks_two_exact_pvalue(n, m, d),
            exact: true,
        })
    } else {
        let ne = (n as f64 * m as f64) / (n as f64 + m as f64);
        let sn = ne.sqrt();
        let lambda = (sn + 0.12 + 0.11 / sn) * d;
        Ok(KsResult {
            statistic: d,
            p_value: kolmogorov_q(lambda),
            exact: false,
        })
    }
}

/// Regularised lower incomplete gamma `P(a, x)` (series / continued
/// fraction, Numerical Recipes style).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x < 0.0 || a <= 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // Series.
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..500 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-14 {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        // Continued fraction for Q(a, x).
        let mut b = x + 1.0 - a;
        let mut c = 1e300;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < 1e-300 {
                d = 1e-300;
            }
            c = b + an / c;
            if c.abs() < 1e-300 {
                c = 1e-300;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-14 {
                break;
            }
        }
        1.0 - h * (-x + a * x.ln() - ln_gamma(a)).exp()
    }
}

/// Lanczos log-gamma.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Chi-square survival function with `k` degrees of freedom.
pub fn chi2_sf(x: f64, k: f64) -> f64 {
    (1.0 - gamma_p(k / 2.0, x / 2.0)).clamp(0.0, 1.0)
}

/// Pearson chi-square uniformity test over equal-width bins on `[lo, hi]`.
pub fn chi2_uniformity(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Result<(f64, f64)> {
    if samples.len() < 5 * bins {
        return Err(QflowError::InsufficientSamples(format!(
            "need >= {} samples for {} bins",
            5 * bins,
            bins
        )));
    }
    let mut counts = vec![0usize; bins];
    let mut kept = 0usize;
    for &s in samples {
        if s < lo || s >= hi {
            continue;
        }
        let b = (((s - lo) / (hi - lo)) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
        kept += 1;
    }
    let expected = kept as f64 / bins as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    Ok((stat, chi2_sf(stat, (bins - 1) as f64)))
}
