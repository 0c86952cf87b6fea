use statrs::function::beta::beta_reg;
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

/// Clopper-Pearson interval for `k` successes in `n` trials at confidence
/// `level`, found by bisection on the regularized incomplete beta function.
pub fn exact_binomial_ci(k: u64, n: u64, level: f64) -> Result<(f64, f64)> {
    if n == 0 || k > n {
        return Err(Error::invalid(format!("need 0 <= k <= n and n > 0, got k={k}, n={n}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} must lie in (0, 1)")));
    }
    let alpha = 1.0 - level;
    let (kf, nf) = (k as f64, n as f64);
    // lower: P(X >= k | p) = I_p(k, n-k+1) = alpha/2
    let lower = if k == 0 {
        0.0
    } else {
        beta_quantile(kf, nf - kf + 1.0, alpha / 2.0)
    };
    // upper: P(X <= k | p) = 1 - I_p(k+1, n-k) = alpha/2
    let upper = if k == n {
        1.0
    } else {
        beta_quantile(kf + 1.0, nf - kf, 1.0 - alpha / 2.0)
    };
    Ok((lower, upper))
}

/// `x` with `I_x(a, b) = q`, to 1e-10 in `x`.
fn beta_quantile(a: f64, b: f64, q: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(a, b, mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact two-sided McNemar test on discordant counts `b` and `c`.
pub fn mcnemar_exact(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let tail = if n <= 120 {
        // exact integer sum; 2^n is exact in f64
        let mut coef: u128 = 1;
        let mut sum: u128 = 1;
        for k in 1..=b.min(c) as u128 {
            coef = coef * (n as u128 - k + 1) / k;
            sum += coef;
        }
        sum as f64 / 2f64.powi(n as i32)
    } else {
        let ln_half_n = n as f64 * std::f64::consts::LN_2;
        (0..=b.min(c))
            .map(|k| (ln_binomial(n, k) - ln_half_n).exp())
            .sum()
    };
    (2.0 * tail).min(1.0)
}
