//! Small numerical helpers shared across modules.

pub(crate) const SQRT_2PI: f64 = 2.5066282746310002;
const FRAC_1_SQRT_PI: f64 = 0.5641895835477563;

/// Standard normal CDF through the complementary error function, keeping
/// full relative precision in the far tails (needed when inverting prices of
/// deep out-of-the-money options).
pub(crate) fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub(crate) fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

// Cody's rational approximations for erf/erfc. Relative accuracy is close
// to machine precision on all three branches, which common statistics
// crates do not reach in the middle range.
const ERF_A: [f64; 5] = [
    3.16112374387056560e0,
    1.13864154151050156e2,
    3.77485237685302021e2,
    3.20937758913846947e3,
    1.85777706184603153e-1,
];
const ERF_B: [f64; 4] =
    [2.36012909523441209e1, 2.44024637934444173e2, 1.28261652607737228e3, 2.84423683343917062e3];
const ERFC_C: [f64; 9] = [
    5.64188496988670089e-1,
    8.88314979438837594e0,
    6.61191906371416295e1,
    2.98635138197400131e2,
    8.81952221241769090e2,
    1.71204761263407058e3,
    2.05107837782607147e3,
    1.23033935479799725e3,
    2.15311535474403846e-8,
];
const ERFC_D: [f64; 8] = [
    1.57449261107098347e1,
    1.17693950891312499e2,
    5.37181101862009858e2,
    1.62138957456669019e3,
    3.29079923573345963e3,
    4.36261909014324716e3,
    3.43936767414372164e3,
    1.23033935480374942e3,
];
const ERFC_P: [f64; 6] = [
    3.05326634961232344e-1,
    3.60344899949804439e-1,
    1.25781726111229246e-1,
    1.60837851487422766e-2,
    6.58749161529837803e-4,
    1.63153871373020978e-2,
];
const ERFC_Q: [f64; 5] = [
    2.56852019228982242e0,
    1.87295284992346047e0,
    5.27905102951428412e-1,
    6.05183413124413191e-2,
    2.33520497626869185e-3,
];

fn erf_small(x: f64) -> f64 {
    let z = x * x;
    let mut num = ERF_A[4] * z;
    let mut den = z;
    for i in 0..3 {
        num = (num + ERF_A[i]) * z;
        den = (den + ERF_B[i]) * z;
    }
    x * (num + ERF_A[3]) / (den + ERF_B[3])
}

/// exp(-y^2) split into an exactly representable square and a small
/// correction, which preserves relative accuracy when y^2 is large.
fn exp_neg_sq(y: f64) -> f64 {
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp()
}

/// Complementary error function.
pub(crate) fn erfc(x: f64) -> f64 {
    let y = x.abs();
    if y <= 0.46875 {
        return 1.0 - erf_small(x);
    }
    let scaled = if y <= 4.0 {
        let mut num = ERFC_C[8] * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + ERFC_C[i]) * y;
            den = (den + ERFC_D[i]) * y;
        }
        (num + ERFC_C[7]) / (den + ERFC_D[7])
    } else {
        let z = 1.0 / (y * y);
        let mut num = ERFC_P[5] * z;
        let mut den = z;
        for i in 0..4 {
            num = (num + ERFC_P[i]) * z;
            den = (den + ERFC_Q[i]) * z;
        }
        let r = z * (num + ERFC_P[4]) / (den + ERFC_Q[4]);
        (FRAC_1_SQRT_PI - r) / y
    };
    let r = exp_neg_sq(y) * scaled;
    if x < 0.0 {
        2.0 - r
    } else {
        r
    }
}

/// `n` logarithmically spaced points from `lo` to `hi` inclusive.
pub(crate) fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2, "logspace needs 0 < lo < hi and n >= 2");
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// Gauss-Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// Legendre recurrence from the Chebyshev initial guesses.
pub(crate) fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2, "gauss_legendre needs at least 2 points");
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 1..n {
                let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        xs[i] = -x;
        xs[n - 1 - i] = x;
        ws[i] = w;
        ws[n - 1 - i] = w;
    }
    (xs, ws)
}

/// Running mean and standard error of the mean (Welford accumulation).
pub(crate) fn mean_stderr<I: Iterator<Item = f64>>(it: I) -> (f64, f64) {
    let mut n = 0.0_f64;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for v in it {
        n += 1.0;
        let d = v - mean;
        mean += d / n;
        m2 += d * (v - mean);
    }
    let se = if n > 1.0 { (m2 / (n - 1.0) / n).sqrt() } else { 0.0 };
    (mean, se)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Maclaurin series for erf, an oracle independent of the rational
    // approximation. Usable to ~1e-14 for |z| up to about 2 before the
    // alternating terms start cancelling badly.
    fn series_erf(z: f64) -> f64 {
        let mut term = z;
        let mut sum = z;
        for n in 1..80 {
            term *= -z * z / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    #[test]
    fn norm_cdf_matches_series_oracle_on_a_dense_grid() {
        let mut x = -2.8;
        while x <= 2.8 {
            let oracle = 0.5 * (1.0 + series_erf(x / std::f64::consts::SQRT_2));
            assert!(
                (norm_cdf(x) - oracle).abs() < 1e-13,
                "x = {x}: cdf = {:.17e}, oracle = {:.17e}",
                norm_cdf(x),
                oracle
            );
            x += 0.037;
        }
    }

    #[test]
    fn norm_cdf_matches_reference_table_values() {
        // Reference values from standard high-precision normal tables.
        let cases = [
            (-1.0, 0.15865525393145705),
            (-2.0, 0.022750131948179207),
            (-3.0, 1.3498980316300945e-3),
            (-5.0, 2.8665157187919391e-7),
            (-10.0, 7.6198530241605260e-24),
            (-20.0, 2.7536241186062337e-89),
        ];
        for &(x, want) in &cases {
            let got = norm_cdf(x);
            assert!(
                ((got - want) / want).abs() < 1e-13,
                "x = {x}: got {got:.17e}, want {want:.17e}"
            );
            assert!((norm_cdf(-x) - (1.0 - want)).abs() < 1e-15);
        }
    }

    #[test]
    fn norm_cdf_is_monotone_and_symmetric() {
        let mut prev = 0.0;
        let mut x = -8.0;
        while x <= 8.0 {
            let p = norm_cdf(x);
            assert!(p > prev && p < 1.0);
            assert!((p + norm_cdf(-x) - 1.0).abs() < 1e-15, "x = {x}");
            prev = p;
            x += 0.11;
        }
    }

    #[test]
    fn logspace_hits_endpoints_and_is_increasing() {
        let g = logspace(1e-3, 10.0, 7);
        assert_eq!(g.len(), 7);
        assert_eq!(g[0], 1e-3);
        assert_eq!(g[6], 10.0);
        for w in g.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        // n points are exact through degree 2n-1.
        let (xs, ws) = gauss_legendre(5);
        let total: f64 = ws.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
        let int_x8: f64 = xs.iter().zip(&ws).map(|(x, w)| w * x.powi(8)).sum();
        assert!((int_x8 - 2.0 / 9.0).abs() < 1e-14);
        let int_x9: f64 = xs.iter().zip(&ws).map(|(x, w)| w * x.powi(9)).sum();
        assert!(int_x9.abs() < 1e-15);
    }

    #[test]
    fn gauss_legendre_handles_even_orders() {
        let (xs, ws) = gauss_legendre(24);
        assert_eq!(xs.len(), 24);
        assert!((ws.iter().sum::<f64>() - 2.0).abs() < 1e-13);
        // integrate cos over [-1,1]: 2 sin(1)
        let got: f64 = xs.iter().zip(&ws).map(|(x, w)| w * x.cos()).sum();
        assert!((got - 2.0 * 1.0f64.sin()).abs() < 1e-14);
        for w in xs.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn mean_stderr_matches_closed_form() {
        let (m, se) = mean_stderr([1.0, 2.0, 3.0, 4.0].into_iter());
        assert!((m - 2.5).abs() < 1e-15);
        // sample variance 5/3, se = sqrt(5/3/4)
        assert!((se - (5.0 / 12.0f64).sqrt()).abs() < 1e-15);
    }
}
