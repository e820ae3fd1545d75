//! Implied-vol surfaces, Dupire local volatility, the singular (theta, zeta)
//! coordinate system, and the nodal local-vol calibration loop.
//!
//! A rough smile steepens like t^(H-1/2) as maturity shrinks, so any
//! interpolation that is smooth in plain (t, k) flattens the skew that the
//! model exists to produce. The surface therefore lives in the coordinates
//!
//! ```text
//! theta = t,    zeta = t^(H-1/2) ln k,
//! ```
//!
//! in which the small-time smile has a finite non-degenerate limit. Nodal
//! local-vol values are interpolated by a monotone cubic spline in zeta
//! within each maturity slice, piecewise-constant across slices in theta,
//! and flat in theta at fixed zeta below the cutoff delta, which preserves
//! the skew blow-up in strike space down to t = 0.

use std::fmt::Write as _;

use crate::black::{implied_vol_logm, OptionKind};
use crate::error::{Error, Result};

/// Map (t, k) to the singular coordinates (theta, zeta).
pub fn to_singular_coords(t: f64, k: f64, h: f64) -> Result<(f64, f64)> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("singular coordinates need t > 0, got {t}")));
    }
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::Domain(format!("singular coordinates need k > 0, got {k}")));
    }
    Ok((t, t.powf(h - 0.5) * k.ln()))
}

/// Inverse of [`to_singular_coords`].
pub fn from_singular_coords(theta: f64, zeta: f64, h: f64) -> Result<(f64, f64)> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::Domain(format!("singular coordinates need theta > 0, got {theta}")));
    }
    Ok((theta, (zeta * theta.powf(0.5 - h)).exp()))
}

/// A quoted implied-vol lattice: per maturity, a strictly increasing strike
/// row with one implied vol per strike.
#[derive(Debug, Clone, PartialEq)]
pub struct QuoteLattice {
    maturities: Vec<f64>,
    strikes: Vec<Vec<f64>>,
    implied_vols: Vec<Vec<f64>>,
}

impl QuoteLattice {
    pub fn new(
        maturities: Vec<f64>,
        strikes: Vec<Vec<f64>>,
        implied_vols: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if maturities.is_empty() {
            return Err(Error::Domain("quote lattice needs at least one maturity".into()));
        }
        if strikes.len() != maturities.len() || implied_vols.len() != maturities.len() {
            return Err(Error::Domain(format!(
                "quote lattice rows disagree: {} maturities, {} strike rows, {} vol rows",
                maturities.len(),
                strikes.len(),
                implied_vols.len()
            )));
        }
        for (i, &t) in maturities.iter().enumerate() {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Domain(format!("maturities must be positive, got {t}")));
            }
            if i > 0 && t <= maturities[i - 1] {
                return Err(Error::Domain(format!(
                    "maturities must be strictly increasing: {} after {}",
                    t,
                    maturities[i - 1]
                )));
            }
            let row = &strikes[i];
            if row.is_empty() || row.len() != implied_vols[i].len() {
                return Err(Error::Domain(format!(
                    "maturity {t}: {} strikes vs {} vols",
                    row.len(),
                    implied_vols[i].len()
                )));
            }
            for (j, &k) in row.iter().enumerate() {
                if !(k > 0.0 && k.is_finite()) {
                    return Err(Error::Domain(format!("strikes must be positive, got {k}")));
                }
                if j > 0 && k <= row[j - 1] {
                    return Err(Error::Domain(format!(
                        "strikes must be strictly increasing per maturity: {} after {}",
                        k,
                        row[j - 1]
                    )));
                }
                let v = implied_vols[i][j];
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Domain(format!(
                        "implied vols must be positive, got {v} at (t = {t}, k = {k})"
                    )));
                }
            }
        }
        Ok(QuoteLattice { maturities, strikes, implied_vols })
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    pub fn strikes(&self) -> &[Vec<f64>] {
        &self.strikes
    }

    pub fn implied_vols(&self) -> &[Vec<f64>] {
        &self.implied_vols
    }

    pub fn n_quotes(&self) -> usize {
        self.strikes.iter().map(Vec::len).sum()
    }

    /// Parse the delimited format `maturity,strike,implied_vol` (header
    /// required). Rows may arrive in any order; they are grouped by maturity
    /// and sorted. Duplicate (maturity, strike) pairs are rejected.
    pub fn from_csv_str(text: &str, origin: &str) -> Result<Self> {
        let data_err = |message: String| Error::Data { path: origin.to_string(), message };
        let mut lines = text.lines().enumerate();
        let header = loop {
            match lines.next() {
                Some((_, l)) if l.trim().is_empty() || l.trim().starts_with('#') => continue,
                Some((_, l)) => break l.trim(),
                None => return Err(data_err("empty quote file".into())),
            }
        };
        if header != "maturity,strike,implied_vol" {
            return Err(data_err(format!(
                "expected header 'maturity,strike,implied_vol', got '{header}'"
            )));
        }
        let mut rows: Vec<(f64, f64, f64)> = Vec::new();
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(data_err(format!("line {}: expected 3 fields", idx + 1)));
            }
            let parse = |s: &str, what: &str| {
                s.parse::<f64>()
                    .map_err(|_| data_err(format!("line {}: bad {what} '{s}'", idx + 1)))
            };
            rows.push((
                parse(fields[0], "maturity")?,
                parse(fields[1], "strike")?,
                parse(fields[2], "implied_vol")?,
            ));
        }
        if rows.is_empty() {
            return Err(data_err("no quotes".into()));
        }
        rows.sort_by(|a, b| (a.0, a.1).partial_cmp(&(b.0, b.1)).unwrap());
        let mut maturities = Vec::new();
        let mut strikes: Vec<Vec<f64>> = Vec::new();
        let mut vols: Vec<Vec<f64>> = Vec::new();
        for (t, k, v) in rows {
            if maturities.last() != Some(&t) {
                maturities.push(t);
                strikes.push(Vec::new());
                vols.push(Vec::new());
            }
            if strikes.last().unwrap().last() == Some(&k) {
                return Err(data_err(format!("duplicate quote at (t = {t}, k = {k})")));
            }
            strikes.last_mut().unwrap().push(k);
            vols.last_mut().unwrap().push(v);
        }
        QuoteLattice::new(maturities, strikes, vols)
    }

    /// Serialize to the `maturity,strike,implied_vol` format.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("maturity,strike,implied_vol\n");
        for (i, &t) in self.maturities.iter().enumerate() {
            for (j, &k) in self.strikes[i].iter().enumerate() {
                let _ = writeln!(out, "{t:.17e},{k:.17e},{:.17e}", self.implied_vols[i][j]);
            }
        }
        out
    }
}

/// Implied-vol derivatives at one point, as consumed by the Dupire formula.
#[derive(Debug, Clone, Copy)]
pub struct VolDerivs {
    pub sigma: f64,
    pub d_t: f64,
    pub d_k: f64,
    pub d_kk: f64,
}

/// A smooth implied-vol surface sigma(t, k).
///
/// Parametric surfaces should override [`SmoothImpliedVol::vol_derivs`] with
/// analytic derivatives; the default computes central finite differences
/// with relative bump 1e-4 in strike and absolute bump 1e-4 in time (halved
/// near t = 0 so the time stencil stays positive).
pub trait SmoothImpliedVol {
    fn vol(&self, t: f64, k: f64) -> Result<f64>;

    fn vol_derivs(&self, t: f64, k: f64) -> Result<VolDerivs> {
        let sigma = self.vol(t, k)?;
        let dk = 1e-4 * k;
        let s_kp = self.vol(t, k + dk)?;
        let s_km = self.vol(t, k - dk)?;
        let dt = 1e-4_f64.min(0.5 * t);
        let s_tp = self.vol(t + dt, k)?;
        let s_tm = self.vol(t - dt, k)?;
        Ok(VolDerivs {
            sigma,
            d_t: (s_tp - s_tm) / (2.0 * dt),
            d_k: (s_kp - s_km) / (2.0 * dk),
            d_kk: (s_kp - 2.0 * sigma + s_km) / (dk * dk),
        })
    }
}

/// Implied-vol derivatives in log-moneyness x = ln k, for surfaces queried
/// at strikes too close to 1 for k-space differences to stay accurate.
#[derive(Debug, Clone, Copy)]
pub struct VolDerivsLogm {
    pub sigma: f64,
    pub d_t: f64,
    pub d_x: f64,
    pub d_xx: f64,
}

/// Dupire local volatility from an implied-vol surface:
///
/// ```text
/// eta^2 = (sigma^2 + 2 sigma t d_t sigma) /
///         (1 + 2 k sqrt(t) (y + sigma sqrt(t)) d_k sigma
///            + k^2 sigma t d_kk sigma
///            + k^2 t y (y + sigma sqrt(t)) (d_k sigma)^2),
/// y = -ln(k) / (sigma sqrt(t)) - sigma sqrt(t) / 2.
/// ```
///
/// A non-positive denominator is a butterfly violation and a non-positive
/// numerator a calendar violation; both are reported as arbitrage errors.
pub fn dupire_local_vol<S: SmoothImpliedVol + ?Sized>(surface: &S, t: f64, k: f64) -> Result<f64> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::Domain(format!("dupire_local_vol needs k > 0, got {k}")));
    }
    let d = surface.vol_derivs(t, k)?;
    let dl = VolDerivsLogm {
        sigma: d.sigma,
        d_t: d.d_t,
        d_x: k * d.d_k,
        d_xx: k * k * d.d_kk + k * d.d_k,
    };
    dupire_local_vol_logm(t, k.ln(), &dl)
}

/// The same formula with the point given as x = ln k and the strike
/// derivatives already transformed to x-space (d_x = k d_k, d_xx = k d_k +
/// k^2 d_kk), in which every term is strike-rounding-free:
///
/// ```text
/// den = 1 + 2 sqrt(t) (y + sigma sqrt(t)) d_x
///         + sigma t (d_xx - d_x)
///         + t y (y + sigma sqrt(t)) d_x^2,
/// y = -x / (sigma sqrt(t)) - sigma sqrt(t) / 2.
/// ```
pub fn dupire_local_vol_logm(t: f64, x: f64, d: &VolDerivsLogm) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("dupire_local_vol needs t > 0, got {t}")));
    }
    if !(d.sigma > 0.0) {
        return Err(Error::Domain(format!(
            "implied vol must be positive at (t = {t}, x = {x}), got {}",
            d.sigma
        )));
    }
    let k = x.exp();
    let rt = t.sqrt();
    let srt = d.sigma * rt;
    let y = -x / srt - 0.5 * srt;
    let num = d.sigma * d.sigma + 2.0 * d.sigma * t * d.d_t;
    let den = 1.0
        + 2.0 * rt * (y + srt) * d.d_x
        + d.sigma * t * (d.d_xx - d.d_x)
        + t * y * (y + srt) * d.d_x * d.d_x;
    if !(den > 0.0) {
        return Err(Error::Arbitrage { t, k, what: "butterfly" });
    }
    if !(num > 0.0) {
        return Err(Error::Arbitrage { t, k, what: "calendar" });
    }
    Ok((num / den).sqrt())
}

/// Monotone cubic (Hermite) interpolant with Fritsch-Carlson limited
/// slopes: exact at nodes, no overshoot past adjacent node values, monotone
/// wherever the data is monotone. Flat constant extrapolation outside.
#[derive(Debug, Clone)]
struct MonotoneSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    slope: Vec<f64>,
}

impl MonotoneSpline {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        debug_assert_eq!(n, y.len());
        debug_assert!(n >= 1);
        if n == 1 {
            return MonotoneSpline { x, y, slope: vec![0.0] };
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let d: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        if n == 2 {
            return MonotoneSpline { x, y, slope: vec![d[0], d[0]] };
        }
        let mut m = vec![0.0; n];
        for i in 1..n - 1 {
            if d[i - 1] * d[i] <= 0.0 {
                m[i] = 0.0;
            } else {
                // weighted harmonic mean; guarantees |m| <= 3 min(|d-|, |d+|)
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
            }
        }
        m[0] = Self::edge_slope(h[0], h[1], d[0], d[1]);
        m[n - 1] = Self::edge_slope(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
        MonotoneSpline { x, y, slope: m }
    }

    /// Three-point end-slope estimate, limited so the end interval keeps the
    /// no-overshoot guarantee.
    fn edge_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
        let mut m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if m * d0 <= 0.0 {
            m = 0.0;
        } else if d0 * d1 <= 0.0 && m.abs() > 3.0 * d0.abs() {
            m = 3.0 * d0;
        }
        m
    }

    fn eval(&self, q: f64) -> f64 {
        let n = self.x.len();
        if n == 1 || q <= self.x[0] {
            return self.y[0];
        }
        if q >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let hi = self.x.partition_point(|&v| v < q);
        let lo = hi - 1;
        let h = self.x[hi] - self.x[lo];
        let s = (q - self.x[lo]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.y[lo] + h10 * h * self.slope[lo] + h01 * self.y[hi] + h11 * h * self.slope[hi]
    }
}

/// Nodal local-volatility surface in singular coordinates.
///
/// Within each maturity slice the nodal values are splined monotonically in
/// zeta (node zetas computed from the slice's own maturity); the slice is
/// selected by a piecewise-constant rule in theta, each maturity governing
/// the interval that ends at it ((T_{i-1}, T_i], the first slice reaching
/// down through the cutoff delta and the last extending to infinity). That
/// orientation is what lets the calibration update the T_i nodes from the
/// T_i quotes: the smile at a maturity pins the local vol on the run-up to
/// it. Below delta the surface is flat in theta at fixed zeta, so the
/// strike-space skew keeps its t^(H-1/2) growth; set
/// `flat_extrapolation_fixed_k` to compare against the flat-in-k reading.
#[derive(Debug, Clone)]
pub struct LocalVolSurface {
    maturities: Vec<f64>,
    strikes: Vec<Vec<f64>>,
    nodal: Vec<Vec<f64>>,
    h: f64,
    delta: f64,
    flat_extrapolation_fixed_k: bool,
    slices: Vec<MonotoneSpline>,
}

impl LocalVolSurface {
    pub fn new(
        maturities: Vec<f64>,
        strikes: Vec<Vec<f64>>,
        nodal: Vec<Vec<f64>>,
        h: f64,
        delta: f64,
    ) -> Result<Self> {
        // node validation matches the quote lattice, with local vols in
        // place of implied vols
        QuoteLattice::new(maturities.clone(), strikes.clone(), nodal.clone())?;
        if !(h > 0.0 && h <= 0.5) {
            return Err(Error::Config(format!("H must lie in (0, 1/2], got {h}")));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("delta must be positive, got {delta}")));
        }
        if delta >= maturities[0] {
            return Err(Error::Config(format!(
                "delta = {delta} must fall below the first maturity {}",
                maturities[0]
            )));
        }
        let mut surface = LocalVolSurface {
            maturities,
            strikes,
            nodal,
            h,
            delta,
            flat_extrapolation_fixed_k: false,
            slices: Vec::new(),
        };
        surface.rebuild_slices();
        Ok(surface)
    }

    /// Initialize nodal values to the quoted implied vols (the calibration
    /// starting point).
    pub fn from_quotes(quotes: &QuoteLattice, h: f64, delta: f64) -> Result<Self> {
        LocalVolSurface::new(
            quotes.maturities().to_vec(),
            quotes.strikes().to_vec(),
            quotes.implied_vols().to_vec(),
            h,
            delta,
        )
    }

    fn rebuild_slices(&mut self) {
        self.slices = self
            .maturities
            .iter()
            .zip(self.strikes.iter().zip(&self.nodal))
            .map(|(&t, (row, vals))| {
                let zf = t.powf(self.h - 0.5);
                let zetas: Vec<f64> = row.iter().map(|&k| zf * k.ln()).collect();
                MonotoneSpline::new(zetas, vals.clone())
            })
            .collect();
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    pub fn strikes(&self) -> &[Vec<f64>] {
        &self.strikes
    }

    pub fn nodal_values(&self) -> &[Vec<f64>] {
        &self.nodal
    }

    pub fn hurst(&self) -> f64 {
        self.h
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn flat_extrapolation_fixed_k(&self) -> bool {
        self.flat_extrapolation_fixed_k
    }

    pub fn set_flat_extrapolation_fixed_k(&mut self, fixed_k: bool) {
        self.flat_extrapolation_fixed_k = fixed_k;
    }

    /// Replace the nodal values (same lattice shape) and rebuild the slices.
    pub fn set_nodal_values(&mut self, nodal: Vec<Vec<f64>>) -> Result<()> {
        QuoteLattice::new(self.maturities.clone(), self.strikes.clone(), nodal.clone())?;
        self.nodal = nodal;
        self.rebuild_slices();
        Ok(())
    }

    /// Evaluate the surface at (t, k). Total on the positive quadrant.
    pub fn interpolate_psi(&self, t: f64, k: f64) -> f64 {
        let t = if t > 0.0 { t } else { f64::MIN_POSITIVE };
        // slice of the first maturity >= t, clamped so the last slice
        // extends to infinity
        let slice = self
            .maturities
            .partition_point(|&m| m < t)
            .min(self.maturities.len() - 1);
        let t_eff = if t < self.delta && self.flat_extrapolation_fixed_k { self.delta } else { t };
        let zeta = t_eff.powf(self.h - 0.5) * k.ln();
        self.slices[slice].eval(zeta)
    }

    /// Serialize as `maturity,strike,local_vol` rows after a sidecar line
    /// recording H and delta.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("maturity,strike,local_vol\n");
        let _ = writeln!(out, "# H={:.17e} delta={:.17e}", self.h, self.delta);
        for (i, &t) in self.maturities.iter().enumerate() {
            for (j, &k) in self.strikes[i].iter().enumerate() {
                let _ = writeln!(out, "{t:.17e},{k:.17e},{:.17e}", self.nodal[i][j]);
            }
        }
        out
    }

    /// Parse the [`LocalVolSurface::to_csv_string`] format.
    pub fn from_csv_str(text: &str, origin: &str) -> Result<Self> {
        let data_err = |message: String| Error::Data { path: origin.to_string(), message };
        let mut h = None;
        let mut delta = None;
        let mut header_seen = false;
        let mut body = String::from("maturity,strike,implied_vol\n");
        for line in text.lines() {
            let line = line.trim();
            if !header_seen && !line.is_empty() && !line.starts_with('#') {
                if line != "maturity,strike,local_vol" {
                    return Err(data_err(format!(
                        "expected header 'maturity,strike,local_vol', got '{line}'"
                    )));
                }
                header_seen = true;
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                for token in rest.split_whitespace() {
                    if let Some(v) = token.strip_prefix("H=") {
                        h = v.parse::<f64>().ok();
                    } else if let Some(v) = token.strip_prefix("delta=") {
                        delta = v.parse::<f64>().ok();
                    }
                }
                continue;
            }
            if !line.is_empty() {
                body.push_str(line);
                body.push('\n');
            }
        }
        let (h, delta) = match (h, delta) {
            (Some(h), Some(d)) => (h, d),
            _ => return Err(data_err("missing sidecar line '# H=... delta=...'".into())),
        };
        let lattice = QuoteLattice::from_csv_str(&body, origin)?;
        LocalVolSurface::new(
            lattice.maturities().to_vec(),
            lattice.strikes().to_vec(),
            lattice.implied_vols().to_vec(),
            h,
            delta,
        )
    }
}

/// Forward Dupire PDE pricer controls.
#[derive(Debug, Clone)]
pub struct PdeConfig {
    /// Log-strike half-width in units of the total standard deviation at the
    /// longest maturity.
    pub stdev_halfwidth: f64,
    /// Space nodes on the log-strike grid.
    pub x_nodes: usize,
    /// Time-step ceiling in years.
    pub max_dt: f64,
    /// Leading fully implicit steps before the scheme switches to
    /// Crank-Nicolson, smoothing the payoff kink.
    pub rannacher_steps: usize,
}

impl Default for PdeConfig {
    fn default() -> Self {
        PdeConfig { stdev_halfwidth: 6.0, x_nodes: 400, max_dt: 1.0 / 365.0, rannacher_steps: 2 }
    }
}

impl PdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stdev_halfwidth >= 2.0) {
            return Err(Error::Config("stdev_halfwidth must be at least 2".into()));
        }
        if self.x_nodes < 50 {
            return Err(Error::Config("x_nodes must be at least 50".into()));
        }
        if !(self.max_dt > 0.0) {
            return Err(Error::Config("max_dt must be positive".into()));
        }
        Ok(())
    }
}

/// Tridiagonal solve (Thomas algorithm); diagonals (a, b, c) = (sub, main,
/// super), overwrites rhs with the solution.
fn thomas(a: &[f64], b: &[f64], c: &[f64], rhs: &mut [f64], scratch: &mut [f64]) {
    let n = b.len();
    scratch[0] = c[0] / b[0];
    rhs[0] /= b[0];
    for i in 1..n {
        let m = b[i] - a[i] * scratch[i - 1];
        scratch[i] = c[i] / m;
        rhs[i] = (rhs[i] - a[i] * rhs[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}

/// Four-point Lagrange readout from a uniform grid.
fn interp_cubic(xs: &[f64], ys: &[f64], q: f64) -> f64 {
    let n = xs.len();
    let hi = xs.partition_point(|&v| v < q).clamp(1, n - 1);
    let i0 = (hi - 1).saturating_sub(1).min(n - 4);
    let x = &xs[i0..i0 + 4];
    let y = &ys[i0..i0 + 4];
    let mut out = 0.0;
    for j in 0..4 {
        let mut lj = y[j];
        for m in 0..4 {
            if m != j {
                lj *= (q - x[m]) / (x[j] - x[m]);
            }
        }
        out += lj;
    }
    out
}

/// Price every quoted vanilla under the pure local-vol dynamics of `psi`
/// with a forward Dupire PDE in log strike, returning model implied vols on
/// the quote lattice.
///
/// The call surface c(T, x) solves dc/dT = eta^2(T, e^x)/2 (d^2c/dx^2 -
/// dc/dx) from the payoff (1 - e^x)^+ at T = 0, with theta = 1/2 time
/// stepping after a few fully implicit startup steps.
pub fn pde_reprice(
    psi: &LocalVolSurface,
    quotes: &QuoteLattice,
    cfg: &PdeConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mats = quotes.maturities();
    let t_last = *mats.last().unwrap();
    let vol_ref = quotes
        .implied_vols()
        .iter()
        .flatten()
        .cloned()
        .fold(0.0f64, f64::max);
    let half_width = cfg.stdev_halfwidth * vol_ref * t_last.sqrt();
    let n = cfg.x_nodes;
    let dx = 2.0 * half_width / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|j| -half_width + dx * j as f64).collect();

    let mut c: Vec<f64> = xs.iter().map(|&x| (1.0 - x.exp()).max(0.0)).collect();
    c[0] = 1.0 - xs[0].exp();
    c[n - 1] = 0.0;

    let mut sub = vec![0.0; n];
    let mut main = vec![0.0; n];
    let mut sup = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut scratch = vec![0.0; n];

    let mut out: Vec<Vec<f64>> = Vec::with_capacity(mats.len());
    let mut t = 0.0f64;
    let mut global_step = 0usize;
    for (i, &t_mat) in mats.iter().enumerate() {
        let seg = t_mat - t;
        let n_steps = (seg / cfg.max_dt).ceil().max(1.0) as usize;
        let dt = seg / n_steps as f64;
        for _ in 0..n_steps {
            let theta_w = if global_step < cfg.rannacher_steps { 1.0 } else { 0.5 };
            let t_mid = t + 0.5 * dt;
            for j in 1..n - 1 {
                let eta = psi.interpolate_psi(t_mid, xs[j].exp());
                let g = 0.5 * eta * eta;
                // L c = g (c'' - c'), second order central
                let up = g / (dx * dx) - g / (2.0 * dx);
                let dn = g / (dx * dx) + g / (2.0 * dx);
                let di = -2.0 * g / (dx * dx);
                sub[j] = -theta_w * dt * dn;
                main[j] = 1.0 - theta_w * dt * di;
                sup[j] = -theta_w * dt * up;
                let explicit = (1.0 - theta_w) * dt;
                rhs[j] = c[j]
                    + explicit * (dn * c[j - 1] + di * c[j] + up * c[j + 1]);
            }
            sub[0] = 0.0;
            main[0] = 1.0;
            sup[0] = 0.0;
            rhs[0] = c[0];
            sub[n - 1] = 0.0;
            main[n - 1] = 1.0;
            sup[n - 1] = 0.0;
            rhs[n - 1] = c[n - 1];
            thomas(&sub, &main, &sup, &mut rhs, &mut scratch);
            for (cj, rj) in c.iter_mut().zip(&rhs) {
                if !rj.is_finite() {
                    return Err(Error::Pde(format!("non-finite price at t = {t_mid}")));
                }
                *cj = *rj;
            }
            t += dt;
            global_step += 1;
        }
        t = t_mat;
        let mut ivs = Vec::with_capacity(quotes.strikes()[i].len());
        for &k in &quotes.strikes()[i] {
            let x = k.ln();
            if x <= xs[0] || x >= xs[n - 1] {
                return Err(Error::Pde(format!(
                    "quote strike {k} falls outside the PDE grid [{:.4}, {:.4}] in log strike",
                    xs[0],
                    xs[n - 1]
                )));
            }
            let price = interp_cubic(&xs, &c, x).clamp(0.0, 1.0);
            ivs.push(implied_vol_logm(price, t_mat, x, OptionKind::Call)?);
        }
        out.push(ivs);
    }
    Ok(out)
}

/// Local-vol calibration controls.
#[derive(Debug, Clone)]
pub struct CalibConfig {
    /// Max absolute implied-vol error at the nodes declaring convergence.
    pub tol: f64,
    pub max_iterations: usize,
    pub pde: PdeConfig,
    /// Extrapolate flat in strike rather than in zeta below the time cutoff.
    pub fixed_k_extrapolation: bool,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            tol: 1e-5,
            max_iterations: 80,
            pde: PdeConfig::default(),
            fixed_k_extrapolation: false,
        }
    }
}

/// Per-iteration calibration diagnostics.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    /// Max nodal implied-vol error after each iteration.
    pub max_errors: Vec<f64>,
    /// Final per-node residual sigma_model - sigma_quote.
    pub residuals: Vec<Vec<f64>>,
    pub iterations: usize,
}

/// Iterative nodal local-vol calibration: starting from the quoted implied
/// vols, reprice under the PDE, then scale each nodal value by
/// (sigma_quote / sigma_model)^p until the quotes are matched. The exponent
/// p starts at 1 and is halved whenever the error increases.
pub fn calibrate_local_vol(
    quotes: &QuoteLattice,
    h: f64,
    delta: f64,
    config: &CalibConfig,
) -> Result<(LocalVolSurface, CalibrationReport)> {
    if !(config.tol > 0.0) {
        return Err(Error::Config("calibration tolerance must be positive".into()));
    }
    if config.max_iterations == 0 {
        return Err(Error::Config("max_iterations must be positive".into()));
    }
    let mut surface = LocalVolSurface::from_quotes(quotes, h, delta)?;
    surface.set_flat_extrapolation_fixed_k(config.fixed_k_extrapolation);
    let mut power = 1.0f64;
    let mut prev_err = f64::INFINITY;
    let mut report =
        CalibrationReport { max_errors: Vec::new(), residuals: Vec::new(), iterations: 0 };
    for it in 1..=config.max_iterations {
        let model = pde_reprice(&surface, quotes, &config.pde)?;
        let mut max_err = 0.0f64;
        let mut residuals = Vec::with_capacity(model.len());
        for (row_model, row_quote) in model.iter().zip(quotes.implied_vols()) {
            let mut res_row = Vec::with_capacity(row_model.len());
            for (&m, &q) in row_model.iter().zip(row_quote) {
                res_row.push(m - q);
                max_err = max_err.max((m - q).abs());
            }
            residuals.push(res_row);
        }
        report.max_errors.push(max_err);
        report.residuals = residuals;
        report.iterations = it;
        if max_err <= config.tol {
            return Ok((surface, report));
        }
        if max_err > prev_err {
            power = (power * 0.5).max(1.0 / 64.0);
        } else {
            // recover after transients so damping never freezes the loop
            power = (power * 1.25).min(1.0);
        }
        prev_err = max_err;
        let mut nodal = surface.nodal_values().to_vec();
        for (i, row) in nodal.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= (quotes.implied_vols()[i][j] / model[i][j]).powf(power);
            }
        }
        surface.set_nodal_values(nodal)?;
    }
    let max_err = *report.max_errors.last().unwrap();
    Err(Error::Calibration {
        iterations: report.iterations,
        max_err,
        residuals: report.residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::{heston_smile_logm, QuadConfig};
    use crate::params::ModelParams;
    use proptest::prelude::*;

    struct FlatVol(f64);

    impl SmoothImpliedVol for FlatVol {
        fn vol(&self, _t: f64, _k: f64) -> Result<f64> {
            Ok(self.0)
        }

        fn vol_derivs(&self, _t: f64, _k: f64) -> Result<VolDerivs> {
            Ok(VolDerivs { sigma: self.0, d_t: 0.0, d_k: 0.0, d_kk: 0.0 })
        }
    }

    struct TimeOnlyVol;

    impl TimeOnlyVol {
        fn s(t: f64) -> f64 {
            0.2 + 0.05 * (-t).exp()
        }

        fn sp(t: f64) -> f64 {
            -0.05 * (-t).exp()
        }
    }

    impl SmoothImpliedVol for TimeOnlyVol {
        fn vol(&self, t: f64, _k: f64) -> Result<f64> {
            Ok(Self::s(t))
        }

        fn vol_derivs(&self, t: f64, _k: f64) -> Result<VolDerivs> {
            Ok(VolDerivs { sigma: Self::s(t), d_t: Self::sp(t), d_k: 0.0, d_kk: 0.0 })
        }
    }

    /// Heston smile exposed as an implied-vol surface through the Fourier
    /// pricer (shared quadrature nodes per maturity would be faster, but the
    /// test budget is small).
    struct HestonVol {
        params: ModelParams,
        quad: QuadConfig,
    }

    impl SmoothImpliedVol for HestonVol {
        fn vol(&self, t: f64, k: f64) -> Result<f64> {
            let x = k.ln();
            let price = heston_smile_logm(t, &[x], &self.params, &self.quad)?[0];
            implied_vol_logm(price, t, x, OptionKind::Call)
        }
    }

    fn sample_lattice() -> QuoteLattice {
        QuoteLattice::new(
            vec![0.25, 0.5, 1.0],
            vec![
                vec![0.9, 1.0, 1.1],
                vec![0.85, 1.0, 1.15],
                vec![0.8, 1.0, 1.25],
            ],
            vec![
                vec![0.22, 0.20, 0.19],
                vec![0.21, 0.20, 0.19],
                vec![0.205, 0.20, 0.195],
            ],
        )
        .unwrap()
    }

    #[test]
    fn singular_coords_match_hand_values() {
        let (theta, zeta) = to_singular_coords(0.3, 1.0, 0.1).unwrap();
        assert_eq!(theta, 0.3);
        assert_eq!(zeta, 0.0);
        let (_, zeta) = to_singular_coords(1.0, std::f64::consts::E, 0.1).unwrap();
        assert!((zeta - 1.0).abs() < 1e-15);
        // 0.01^(-0.4) * ln(1.1) = 6.309573... * 0.0953102..., by hand
        let (_, zeta) = to_singular_coords(0.01, 1.1, 0.1).unwrap();
        assert!((zeta - 0.601_366_6).abs() < 1e-6, "zeta = {zeta}");
    }

    #[test]
    fn singular_coords_round_trip() {
        for &(t, k, h) in
            &[(0.01, 1.1, 0.1), (2.0, 0.4, 0.3), (1e-6, 3.0, 0.05), (0.7, 1.0, 0.5)]
        {
            let (theta, zeta) = to_singular_coords(t, k, h).unwrap();
            let (t2, k2) = from_singular_coords(theta, zeta, h).unwrap();
            assert!((t2 - t).abs() <= 1e-14 * t);
            assert!((k2 - k).abs() <= 1e-14 * k, "k round trip {k} -> {k2}");
        }
        assert!(to_singular_coords(0.0, 1.0, 0.1).is_err());
        assert!(to_singular_coords(1.0, -1.0, 0.1).is_err());
    }

    #[test]
    fn dupire_flat_surface_is_exact() {
        let s = FlatVol(0.2);
        for &(t, k) in &[(0.05, 0.8), (0.5, 1.0), (3.0, 1.4)] {
            assert_eq!(dupire_local_vol(&s, t, k).unwrap(), 0.2);
        }
    }

    #[test]
    fn dupire_time_only_surface_matches_total_variance_rule() {
        let s = TimeOnlyVol;
        for &t in &[0.1, 0.5, 1.5] {
            let eta = dupire_local_vol(&s, t, 1.13).unwrap();
            let sig = TimeOnlyVol::s(t);
            let want = (sig * sig + 2.0 * sig * t * TimeOnlyVol::sp(t)).sqrt();
            assert!((eta - want).abs() < 1e-12, "t = {t}: {eta} vs {want}");
        }
    }

    #[test]
    fn dupire_heston_smile_matches_price_space_oracle() {
        let params = ModelParams::new(0.02, 0.02, 0.3, 0.3, -0.7, 0.5).unwrap();
        let quad = QuadConfig::default();
        let surf = HestonVol { params, quad: quad.clone() };
        let t = 0.5;
        for &k in &[0.95, 1.0, 1.05] {
            let eta = dupire_local_vol(&surf, t, k).unwrap();

            // price-space Dupire oracle: dC/dt / (k^2/2 d2C/dk2) from
            // central differences of quadrature prices
            let dt = 1e-4;
            let dk = 1e-3 * k;
            let x0 = k.ln();
            let xp = (k + dk).ln();
            let xm = (k - dk).ln();
            let row = |tt: f64| heston_smile_logm(tt, &[xm, x0, xp], &params, &quad).unwrap();
            let up = heston_smile_logm(t + dt, &[x0], &params, &quad).unwrap()[0];
            let dn = heston_smile_logm(t - dt, &[x0], &params, &quad).unwrap()[0];
            let mid = row(t);
            let c_t = (up - dn) / (2.0 * dt);
            let c_kk = (mid[2] - 2.0 * mid[1] + mid[0]) / (dk * dk);
            let oracle = (c_t / (0.5 * k * k * c_kk)).sqrt();
            assert!(
                (eta - oracle).abs() < 1e-3 * oracle,
                "k = {k}: dupire {eta} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn spline_is_exact_at_nodes_and_flat_outside() {
        let sp = MonotoneSpline::new(vec![-1.0, 0.0, 0.5, 2.0], vec![0.3, 0.1, 0.4, 0.2]);
        assert_eq!(sp.eval(-1.0), 0.3);
        assert_eq!(sp.eval(0.0), 0.1);
        assert_eq!(sp.eval(0.5), 0.4);
        assert_eq!(sp.eval(2.0), 0.2);
        assert_eq!(sp.eval(-5.0), 0.3);
        assert_eq!(sp.eval(9.0), 0.2);
    }

    #[test]
    fn spline_preserves_monotonicity() {
        let sp = MonotoneSpline::new(
            vec![0.0, 0.3, 0.35, 1.0, 2.5],
            vec![0.1, 0.11, 0.3, 0.31, 0.6],
        );
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=1000 {
            let q = -0.2 + 3.0 * i as f64 / 1000.0;
            let v = sp.eval(q);
            assert!(v >= prev - 1e-14, "not monotone at {q}: {v} < {prev}");
            assert!((0.1..=0.6).contains(&v));
            prev = v;
        }
    }

    #[test]
    fn psi_is_exact_at_nodes() {
        let quotes = sample_lattice();
        let surf = LocalVolSurface::from_quotes(&quotes, 0.1, 1e-3).unwrap();
        for (i, &t) in quotes.maturities().iter().enumerate() {
            for (j, &k) in quotes.strikes()[i].iter().enumerate() {
                let v = surf.interpolate_psi(t, k);
                assert_eq!(v, quotes.implied_vols()[i][j], "node (t = {t}, k = {k})");
            }
        }
    }

    #[test]
    fn psi_is_piecewise_constant_in_theta_at_fixed_zeta() {
        let quotes = sample_lattice();
        let h = 0.1;
        let surf = LocalVolSurface::from_quotes(&quotes, h, 1e-3).unwrap();
        let zeta = 0.07;
        // fixed-zeta probe; the strike round trip costs an ulp, so compare
        // to relative 1e-13 rather than bitwise
        let at = |t: f64| surf.interpolate_psi(t, (zeta * t.powf(0.5 - h)).exp());
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-13 * a.abs();
        // (0.25, 0.5] is one slice
        assert!(close(at(0.26), at(0.4)));
        assert!(close(at(0.26), at(0.5)));
        // crossing a maturity switches the slice
        assert!((at(0.5) - at(0.51)).abs() > 1e-4);
        // last slice extends to infinity, first below its maturity
        assert!(close(at(1.0), at(7.3)));
        assert!(close(at(1.01), at(2.0)));
        assert!(close(at(0.25), at(0.2)));
        assert!(close(at(0.25), at(0.01)));
    }

    #[test]
    fn psi_below_delta_is_flat_in_theta_at_fixed_zeta() {
        let quotes = sample_lattice();
        let h = 0.1;
        let delta = 1e-3;
        let surf = LocalVolSurface::from_quotes(&quotes, h, delta).unwrap();
        let zeta = -0.04;
        let at = |t: f64| surf.interpolate_psi(t, (zeta * t.powf(0.5 - h)).exp());
        let v = at(delta);
        assert!((at(1e-4) - v).abs() <= 1e-13 * v.abs());
        assert!((at(1e-8) - v).abs() <= 1e-13 * v.abs());

        // the fixed-k comparison switch freezes k instead of zeta
        let mut fixed_k = surf.clone();
        fixed_k.set_flat_extrapolation_fixed_k(true);
        let k = 1.005;
        assert_eq!(fixed_k.interpolate_psi(1e-6, k), fixed_k.interpolate_psi(delta, k));
        // while the default surface at that k reads a different zeta: at
        // t = 1e-6 the fixed strike sits deep in the wing (flat nodal
        // value), at t = delta it reads the smile interior
        assert_ne!(surf.interpolate_psi(1e-6, k), surf.interpolate_psi(delta, k));
    }

    #[test]
    fn psi_extrapolates_flat_beyond_end_nodes() {
        let quotes = sample_lattice();
        let surf = LocalVolSurface::from_quotes(&quotes, 0.1, 1e-3).unwrap();
        // far beyond the last strike of the t = 0.25 slice
        let v = surf.interpolate_psi(0.25, 40.0);
        assert_eq!(v, 0.19);
        let v = surf.interpolate_psi(0.25, 1e-4);
        assert_eq!(v, 0.22);
    }

    #[test]
    fn quote_csv_round_trip() {
        let quotes = sample_lattice();
        let text = quotes.to_csv_string();
        let back = QuoteLattice::from_csv_str(&text, "mem").unwrap();
        assert_eq!(quotes, back);
        // shuffled row order parses to the same lattice
        let mut lines: Vec<&str> = text.lines().collect();
        let body = &mut lines[1..];
        body.reverse();
        let shuffled = format!("maturity,strike,implied_vol\n{}\n", body.join("\n"));
        let back2 = QuoteLattice::from_csv_str(&shuffled, "mem").unwrap();
        assert_eq!(quotes, back2);
    }

    #[test]
    fn quote_csv_rejects_bad_input() {
        assert!(QuoteLattice::from_csv_str("", "mem").is_err());
        assert!(QuoteLattice::from_csv_str("m,s,v\n1,1,0.2\n", "mem").is_err());
        assert!(QuoteLattice::from_csv_str(
            "maturity,strike,implied_vol\n1.0,1.0\n",
            "mem"
        )
        .is_err());
        assert!(QuoteLattice::from_csv_str(
            "maturity,strike,implied_vol\n1.0,1.0,0.2\n1.0,1.0,0.3\n",
            "mem"
        )
        .is_err());
        assert!(QuoteLattice::from_csv_str(
            "maturity,strike,implied_vol\n1.0,1.0,-0.2\n",
            "mem"
        )
        .is_err());
    }

    #[test]
    fn local_vol_csv_round_trip_keeps_sidecar() {
        let quotes = sample_lattice();
        let surf = LocalVolSurface::from_quotes(&quotes, 0.17, 2e-3).unwrap();
        let text = surf.to_csv_string();
        let back = LocalVolSurface::from_csv_str(&text, "mem").unwrap();
        assert_eq!(back.hurst(), 0.17);
        assert_eq!(back.delta(), 2e-3);
        assert_eq!(back.nodal_values(), surf.nodal_values());
        assert_eq!(back.maturities(), surf.maturities());
    }

    #[test]
    fn pde_reprices_flat_vol_to_black() {
        let quotes = QuoteLattice::new(
            vec![0.25, 1.0],
            vec![vec![0.9, 1.0, 1.1], vec![0.85, 1.0, 1.2]],
            vec![vec![0.2; 3], vec![0.2; 3]],
        )
        .unwrap();
        let surf = LocalVolSurface::from_quotes(&quotes, 0.1, 1e-3).unwrap();
        let ivs = pde_reprice(&surf, &quotes, &PdeConfig::default()).unwrap();
        for row in &ivs {
            for &iv in row {
                assert!((iv - 0.2).abs() < 5e-5, "iv = {iv}");
            }
        }
    }

    #[test]
    fn calibration_flat_quotes_converges_immediately() {
        let quotes = QuoteLattice::new(
            vec![0.5],
            vec![vec![0.9, 1.0, 1.1]],
            vec![vec![0.2; 3]],
        )
        .unwrap();
        let (surf, report) =
            calibrate_local_vol(&quotes, 0.1, 1e-3, &CalibConfig::default()).unwrap();
        assert!(report.iterations <= 2, "took {} iterations", report.iterations);
        for row in surf.nodal_values() {
            for &v in row {
                assert!((v - 0.2).abs() < 5e-4, "nodal value {v}");
            }
        }
    }

    #[test]
    fn calibration_matches_heston_quotes_at_nodes() {
        // synthetic smile quotes from the closed-form Heston pricer
        let params = ModelParams::new(0.02, 0.02, 0.3, 0.3, -0.7, 0.5).unwrap();
        let quad = QuadConfig::default();
        let mats: Vec<f64> = vec![0.25, 0.5, 1.0, 2.0];
        let strikes: Vec<Vec<f64>> = mats
            .iter()
            .map(|&t| {
                let w = 0.1414 * t.sqrt();
                vec![(-1.2 * w).exp(), (-0.5 * w).exp(), 1.0, (0.5 * w).exp(), (1.2 * w).exp()]
            })
            .collect();
        let mut vols = Vec::new();
        for (i, &t) in mats.iter().enumerate() {
            let xs: Vec<f64> = strikes[i].iter().map(|&k| k.ln()).collect();
            let prices = heston_smile_logm(t, &xs, &params, &quad).unwrap();
            let row: Vec<f64> = prices
                .iter()
                .zip(&xs)
                .map(|(&p, &x)| implied_vol_logm(p, t, x, OptionKind::Call).unwrap())
                .collect();
            vols.push(row);
        }
        let quotes = QuoteLattice::new(mats, strikes, vols).unwrap();
        let cfg = CalibConfig::default();
        let (_, report) = calibrate_local_vol(&quotes, 0.5, 1e-3, &cfg).unwrap();
        let final_err = *report.max_errors.last().unwrap();
        assert!(final_err <= 1e-4, "final repricing error {final_err} above one vol bp");
        // error non-increasing over the last iterations at convergence
        let k = report.max_errors.len();
        if k >= 3 {
            assert!(report.max_errors[k - 1] <= report.max_errors[k - 3] + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn spline_never_overshoots_adjacent_nodes(
            ys in proptest::collection::vec(0.05f64..0.5, 2..12),
            q in 0.0f64..1.0,
        ) {
            let n = ys.len();
            let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
            let sp = MonotoneSpline::new(xs.clone(), ys.clone());
            let hi = xs.partition_point(|&v| v < q).clamp(1, n - 1);
            let (lo_y, hi_y) = (ys[hi - 1].min(ys[hi]), ys[hi - 1].max(ys[hi]));
            let v = sp.eval(q);
            prop_assert!(
                v >= lo_y - 1e-12 && v <= hi_y + 1e-12,
                "eval({}) = {} outside [{}, {}]", q, v, lo_y, hi_y
            );
        }
    }
}
