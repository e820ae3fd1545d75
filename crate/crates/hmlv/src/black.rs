//! Black pricing, implied-volatility inversion, and Monte Carlo vanilla
//! pricing with error bars.
//!
//! Everything is undiscounted and forward-normalized: the underlying forward
//! is 1, strikes are moneyness, rates and dividends are zero. The inversion
//! works on the out-of-the-money option (via put-call parity) in total-vol
//! space with a log-price Newton iteration inside a bisection bracket, which
//! keeps it stable from the band edges down to prices near the underflow
//! limit.

use crate::error::{Error, Result};
use crate::math::{mean_stderr, norm_cdf, norm_pdf, SQRT_2PI};
use crate::sim::PathBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptionKind {
    Call,
    Put,
}

/// A vanilla quote: maturity, forward moneyness, Black vol, call/put flag.
#[derive(Debug, Clone, Copy)]
pub struct OptionQuote {
    pub t: f64,
    pub k: f64,
    pub implied_vol: f64,
    pub kind: OptionKind,
}

impl OptionQuote {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::Domain(format!("quote maturity must be positive, got {}", self.t)));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Domain(format!("quote strike must be positive, got {}", self.k)));
        }
        if !(self.implied_vol > 0.0 && self.implied_vol.is_finite()) {
            return Err(Error::Domain(format!(
                "quote implied vol must be positive, got {}",
                self.implied_vol
            )));
        }
        Ok(())
    }
}

/// Black price in terms of log-moneyness `x = ln k` and total volatility
/// `s = sigma sqrt(t)`. Callers that know the log-moneyness exactly (skew
/// studies at strikes 1 +- 1e-13) must use this entry point rather than
/// round-tripping through k itself.
pub fn black_total_logm(x: f64, s: f64, kind: OptionKind) -> f64 {
    black_core(x.exp(), x, s, kind)
}

/// Shared core taking a consistent (k, ln k) pair so that neither
/// representation is degraded by converting from the other.
fn black_core(k: f64, x: f64, s: f64, kind: OptionKind) -> f64 {
    let (intrinsic, upper) = band(k, kind);
    if s <= 0.0 {
        return intrinsic;
    }
    let d1 = -x / s + 0.5 * s;
    let d2 = d1 - s;
    let price = match kind {
        OptionKind::Call => norm_cdf(d1) - k * norm_cdf(d2),
        OptionKind::Put => k * norm_cdf(-d2) - norm_cdf(-d1),
    };
    price.clamp(intrinsic, upper)
}

/// No-arbitrage band (intrinsic value, upper bound) of the undiscounted
/// forward-normalized price.
pub fn band(k: f64, kind: OptionKind) -> (f64, f64) {
    match kind {
        OptionKind::Call => ((1.0 - k).max(0.0), 1.0),
        OptionKind::Put => ((k - 1.0).max(0.0), k),
    }
}

/// Undiscounted Black price with forward 1.
pub fn black_price(t: f64, k: f64, sigma: f64, kind: OptionKind) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("black_price requires t > 0, got {t}")));
    }
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::Domain(format!("black_price requires k > 0, got {k}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("black_price requires sigma >= 0, got {sigma}")));
    }
    Ok(black_core(k, k.ln(), sigma * t.sqrt(), kind))
}

/// Black vega, d price / d sigma = phi(d1) sqrt(t); zero at sigma = 0 off the
/// money.
pub fn black_vega(t: f64, k: f64, sigma: f64) -> f64 {
    let s = sigma * t.sqrt();
    if s <= 0.0 {
        return 0.0;
    }
    let d1 = -k.ln() / s + 0.5 * s;
    norm_pdf(d1) * t.sqrt()
}

/// Implied Black volatility of `price`.
///
/// Safeguarded Newton: the iteration runs on ln(price) as a function of total
/// vol for the out-of-the-money option (exact put-call parity reduction), and
/// every step is confined to a maintained bisection bracket, so no
/// oscillation is possible near the band edges. Relative price tolerance
/// 1e-12 (the iteration itself targets tighter), at most 100 iterations.
pub fn implied_vol(price: f64, t: f64, k: f64, kind: OptionKind) -> Result<f64> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::Domain(format!("implied_vol requires k > 0, got {k}")));
    }
    implied_vol_core(price, t, k, k.ln(), kind)
}

/// As [`implied_vol`] with the strike given as log-moneyness.
pub fn implied_vol_logm(price: f64, t: f64, x: f64, kind: OptionKind) -> Result<f64> {
    implied_vol_core(price, t, x.exp(), x, kind)
}

fn implied_vol_core(price: f64, t: f64, k: f64, x: f64, kind: OptionKind) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("implied_vol requires t > 0, got {t}")));
    }
    if !price.is_finite() {
        return Err(Error::Domain(format!("implied_vol requires a finite price, got {price}")));
    }
    let (intrinsic, upper) = band(k, kind);
    if price <= intrinsic {
        return Err(Error::InversionBand { price, t, k, bound: "lower" });
    }
    if price >= upper {
        return Err(Error::InversionBand { price, t, k, bound: "upper" });
    }

    // Reduce to the out-of-the-money option through parity c - p = 1 - k;
    // the OTM price is strictly positive inside the band.
    let otm_kind = if x >= 0.0 { OptionKind::Call } else { OptionKind::Put };
    let target = match (kind, otm_kind) {
        (OptionKind::Call, OptionKind::Call) | (OptionKind::Put, OptionKind::Put) => price,
        (OptionKind::Call, OptionKind::Put) => price - (1.0 - k),
        (OptionKind::Put, OptionKind::Call) => price - (k - 1.0),
    };
    if !(target > 0.0) {
        // The ITM time value vanished in the parity subtraction: the price is
        // indistinguishable from intrinsic at working precision.
        return Err(Error::InversionBand { price, t, k, bound: "lower" });
    }

    let f = |s: f64| black_core(k, x, s, otm_kind);

    let mut lo = 0.0_f64;
    let mut hi = 2.0_f64;
    while f(hi) <= target {
        hi *= 2.0;
        if hi > 1e8 {
            return Err(Error::InversionNoConvergence { price, t, k });
        }
    }
    let ln_target = target.ln();
    let mut s = if x.abs() < 1e-12 { target * SQRT_2PI } else { (2.0 * x.abs()).sqrt() };
    s = s.clamp(1e-10, hi * 0.999);

    let mut best = s;
    let mut best_err = f64::INFINITY;
    for _ in 0..100 {
        let p = f(s);
        let err = (p - target).abs();
        if err < best_err {
            best_err = err;
            best = s;
        }
        if err <= 3e-15 * target {
            return Ok(s / t.sqrt());
        }
        if p > target {
            hi = s;
        } else {
            lo = s;
        }
        let mut stepped = false;
        if p > 0.0 {
            let d1 = -x / s + 0.5 * s;
            let vega_s = norm_pdf(d1);
            if vega_s > 0.0 {
                let next = s - (p.ln() - ln_target) * p / vega_s;
                if next.is_finite() && next > lo && next < hi {
                    s = next;
                    stepped = true;
                }
            }
        }
        if !stepped {
            s = 0.5 * (lo + hi);
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    // Relative criterion plus an evaluation-noise floor: near the money the
    // price is a difference of two Phi terms of comparable size, so its
    // computed value carries absolute rounding noise proportional to the term
    // magnitude, which no iteration can beat. The floor scales with Phi(d1)
    // at the best iterate and therefore vanishes in the far wings, where the
    // strict relative criterion still applies.
    let d1_best = if best > 0.0 { -x / best + 0.5 * best } else { f64::NEG_INFINITY };
    let noise = 16.0 * f64::EPSILON * (1.0 + k) * norm_cdf(d1_best);
    if best_err <= 1e-12 * target + noise {
        Ok(best / t.sqrt())
    } else {
        Err(Error::InversionNoConvergence { price, t, k })
    }
}

/// Monte Carlo price and standard error of a vanilla payoff at a recorded
/// grid time. Under antithetic sampling the standard error is computed over
/// pair means, which is the unbiased estimate for mirrored draws.
pub fn mc_price(batch: &PathBatch, t: f64, k: f64, kind: OptionKind) -> Result<(f64, f64)> {
    let idx = batch.time_index(t)?;
    let m = batch.n_paths();
    let payoff = |s: f64| match kind {
        OptionKind::Call => (s - k).max(0.0),
        OptionKind::Put => (k - s).max(0.0),
    };
    if batch.antithetic() {
        let half = m / 2;
        let stats = mean_stderr((0..half).map(|j| {
            0.5 * (payoff(batch.spot(j, idx)) + payoff(batch.spot(j + half, idx)))
        }));
        Ok(stats)
    } else {
        Ok(mean_stderr((0..m).map(|j| payoff(batch.spot(j, idx)))))
    }
}

/// Prices of two call strikes (given in log-moneyness) together with the
/// standard error of their price difference on common paths. Used by the
/// skew estimators, where the difference is far better determined than the
/// individual prices.
pub struct CallSpread {
    pub price_hi: f64,
    pub price_lo: f64,
    pub se_hi: f64,
    pub se_lo: f64,
    pub se_diff: f64,
}

pub fn mc_call_spread(batch: &PathBatch, t: f64, x_hi: f64, x_lo: f64) -> Result<CallSpread> {
    let idx = batch.time_index(t)?;
    let (k_hi, k_lo) = (x_hi.exp(), x_lo.exp());
    let m = batch.n_paths();
    let sample = |j: usize| {
        let s = batch.spot(j, idx);
        ((s - k_hi).max(0.0), (s - k_lo).max(0.0))
    };
    let pairs: Box<dyn Iterator<Item = (f64, f64)>> = if batch.antithetic() {
        let half = m / 2;
        Box::new((0..half).map(move |j| {
            let (a1, b1) = sample(j);
            let (a2, b2) = sample(j + half);
            (0.5 * (a1 + a2), 0.5 * (b1 + b2))
        }))
    } else {
        Box::new((0..m).map(sample))
    };
    let mut n = 0.0_f64;
    let (mut mean_a, mut mean_b, mut mean_d) = (0.0, 0.0, 0.0);
    let (mut m2_a, mut m2_b, mut m2_d) = (0.0, 0.0, 0.0);
    for (a, b) in pairs {
        let d = a - b;
        n += 1.0;
        let da = a - mean_a;
        mean_a += da / n;
        m2_a += da * (a - mean_a);
        let db = b - mean_b;
        mean_b += db / n;
        m2_b += db * (b - mean_b);
        let dd = d - mean_d;
        mean_d += dd / n;
        m2_d += dd * (d - mean_d);
    }
    let se = |m2: f64| if n > 1.0 { (m2 / (n - 1.0) / n).sqrt() } else { 0.0 };
    Ok(CallSpread {
        price_hi: mean_a,
        price_lo: mean_b,
        se_hi: se(m2_a),
        se_lo: se(m2_b),
        se_diff: se(m2_d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atm_price_matches_normal_cdf_identity() {
        // 2 Phi(s/2) - 1 with Phi from an independent series-erf evaluation.
        let series_erf = |z: f64| {
            let mut term = z;
            let mut sum = z;
            for n in 1..40 {
                term *= -z * z / n as f64;
                sum += term / (2 * n + 1) as f64;
            }
            2.0 / std::f64::consts::PI.sqrt() * sum
        };
        let p = black_price(1.0, 1.0, 0.2, OptionKind::Call).unwrap();
        let oracle = series_erf(0.1 / std::f64::consts::SQRT_2);
        assert!((p - oracle).abs() < 1e-14, "p = {p}, oracle = {oracle}");
        assert!((p - 0.0797).abs() < 1e-4);
    }

    #[test]
    fn deep_itm_call_tends_to_forward() {
        let p = black_price(1.0, 1e-12, 0.2, OptionKind::Call).unwrap();
        assert!((p - 1.0).abs() < 1e-11);
    }

    #[test]
    fn zero_vol_returns_intrinsic() {
        assert_eq!(black_price(2.0, 0.7, 0.0, OptionKind::Call).unwrap(), 1.0 - 0.7);
        assert_eq!(black_price(2.0, 1.3, 0.0, OptionKind::Call).unwrap(), 0.0);
        assert_eq!(black_price(0.5, 1.3, 0.0, OptionKind::Put).unwrap(), 1.3 - 1.0);
        assert_eq!(black_price(0.5, 0.7, 0.0, OptionKind::Put).unwrap(), 0.0);
    }

    #[test]
    fn put_call_parity_exact() {
        for &k in &[0.4, 0.8, 1.0, 1.3, 2.5] {
            for &sigma in &[0.05, 0.2, 0.8] {
                let c = black_price(1.5, k, sigma, OptionKind::Call).unwrap();
                let p = black_price(1.5, k, sigma, OptionKind::Put).unwrap();
                assert!((c - p - (1.0 - k)).abs() < 1e-14, "k = {k}, sigma = {sigma}");
            }
        }
    }

    #[test]
    fn price_increasing_in_vol() {
        // Below sigma ~ 0.1 the ITM time value at k = 0.5 drops under one
        // ulp of the intrinsic value, so strictness is only observable from
        // there up.
        for &k in &[0.5, 1.0, 2.0] {
            let mut prev = black_price(1.0, k, 0.1, OptionKind::Call).unwrap();
            for i in 1..100 {
                let sigma = 0.1 + i as f64 * 0.019;
                let p = black_price(1.0, k, sigma, OptionKind::Call).unwrap();
                assert!(p > prev, "k = {k}, sigma = {sigma}");
                prev = p;
            }
        }
    }

    #[test]
    fn round_trip_is_exact_at_the_money() {
        let p = black_price(1.0, 1.0, 0.2, OptionKind::Call).unwrap();
        let iv = implied_vol(p, 1.0, 1.0, OptionKind::Call).unwrap();
        assert!((iv - 0.2).abs() < 1e-12);
    }

    #[test]
    fn inversion_near_lower_band_edge_converges() {
        // Deep ITM call a hair above intrinsic: the safeguard must converge
        // without oscillating.
        let price = 0.4 + 1e-9;
        let iv = implied_vol(price, 1.0, 0.6, OptionKind::Call).unwrap();
        let back = black_price(1.0, 0.6, iv, OptionKind::Call).unwrap();
        assert!((back - price).abs() <= 1e-12 * price);
    }

    #[test]
    fn inversion_reports_violated_bound() {
        match implied_vol(0.39, 1.0, 0.6, OptionKind::Call) {
            Err(Error::InversionBand { bound: "lower", .. }) => {}
            other => panic!("expected lower-band error, got {other:?}"),
        }
        match implied_vol(1.0, 1.0, 0.6, OptionKind::Call) {
            Err(Error::InversionBand { bound: "upper", .. }) => {}
            other => panic!("expected upper-band error, got {other:?}"),
        }
        match implied_vol(1.31, 1.0, 1.3, OptionKind::Put) {
            Err(Error::InversionBand { bound: "upper", .. }) => {}
            other => panic!("expected upper-band error, got {other:?}"),
        }
    }

    #[test]
    fn inversion_handles_tiny_otm_prices() {
        // sigma = 0.15, k = 1.8, t = 0.1: price ~ 6e-37, still invertible
        // because the solver works on log prices.
        let sigma = 0.15;
        let p = black_price(0.1, 1.8, sigma, OptionKind::Call).unwrap();
        assert!(p > 0.0 && p < 1e-30);
        let iv = implied_vol(p, 0.1, 1.8, OptionKind::Call).unwrap();
        assert!((iv - sigma).abs() < 1e-10, "iv = {iv}");
    }

    #[test]
    fn vega_matches_finite_difference() {
        let (t, k, sigma) = (0.7, 1.1, 0.25);
        let h = 1e-6;
        let up = black_price(t, k, sigma + h, OptionKind::Call).unwrap();
        let dn = black_price(t, k, sigma - h, OptionKind::Call).unwrap();
        let fd = (up - dn) / (2.0 * h);
        assert!((black_vega(t, k, sigma) - fd).abs() < 1e-8);
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(512))]
            #[test]
            fn implied_vol_round_trip(
                sigma in 0.01f64..2.0,
                k in 0.3f64..3.0,
                t in 1e-4f64..5.0,
                call in proptest::bool::ANY,
            ) {
                let kind = if call { OptionKind::Call } else { OptionKind::Put };
                let p = black_price(t, k, sigma, kind).unwrap();
                let (intrinsic, upper) = band(k, kind);
                prop_assume!(p - intrinsic > 1e-300 && upper - p > 1e-12);
                // One ulp of the price maps to roughly eps * p / vega of
                // implied vol, which for in-the-money options with faint
                // time value can exceed any fixed tolerance; such inputs are
                // unresolvable in f64 no matter the algorithm. Keep the
                // cases where 1e-10 is actually representable.
                let tv = p - intrinsic;
                let vega = black_vega(t, k, sigma);
                let attainable = (3e-15 * tv + 3.0 * f64::EPSILON * p) / vega.max(1e-300);
                prop_assume!(attainable < 5e-11);
                let iv = implied_vol(p, t, k, kind).unwrap();
                prop_assert!((iv - sigma).abs() <= 1e-10, "iv = {}, sigma = {}", iv, sigma);
            }
        }
    }
}
