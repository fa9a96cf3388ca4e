//! Exact binomial statistics for Monte-Carlo smoothing.

use statrs::function::beta::beta_reg;
use statrs::function::factorial::ln_binomial;

use crate::{Error, Result};

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// One-sided `(1 - alpha)` Clopper-Pearson lower bound on a binomial
/// success probability after `successes` out of `trials`.
///
/// This is the `alpha` quantile of `Beta(k, n - k + 1)`: 0 when `k = 0` and
/// `alpha^(1/n)` when `k = n`.
pub fn clopper_pearson_lower(successes: u64, trials: u64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if trials == 0 || successes > trials {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= k <= n and n >= 1, got k = {successes}, n = {trials}"
        )));
    }
    if successes == 0 {
        return Ok(0.0);
    }
    if successes == trials {
        return Ok(alpha.powf(1.0 / trials as f64));
    }
    // P(X >= k | p) = I_p(k, n - k + 1) is increasing in p.
    let a = successes as f64;
    let b = (trials - successes + 1) as f64;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `ln P(X >= k)` for `X ~ Binomial(n, 1/2)`.
fn ln_upper_tail_half(k: u64, n: u64) -> f64 {
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let terms: Vec<f64> = (k..=n).map(|i| ln_binomial(n, i) + ln_half_n).collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Two-sided exact binomial test of `top` successes out of `top + runner_up`
/// trials against success probability 1/2.
pub fn binomial_two_sided_half(top: u64, runner_up: u64) -> f64 {
    let n = top + runner_up;
    if n == 0 {
        return 1.0;
    }
    let k = top.max(runner_up);
    if 2 * k == n {
        return 1.0;
    }
    (2.0 * ln_upper_tail_half(k, n).exp()).min(1.0)
}
