//! Fractional kernel of the rough-Heston variance process and its n-factor
//! Markovian lift.
//!
//! The kernel K(t) = t^(H-1/2)/Gamma(H+1/2) admits the Laplace representation
//! K(t) = integral of exp(-gamma t) mu(dgamma) against the measure
//! mu(dgamma) = gamma^(-H-1/2) / (Gamma(H+1/2) Gamma(1/2-H)) dgamma.
//! Chopping the gamma axis into a geometric partition and collapsing the
//! measure on each interval to a Dirac mass (weight = interval mass, rate =
//! interval first moment / mass) yields the sum-of-exponentials approximation
//! K(t) ~ sum_i c_i exp(-gamma_i t) that drives the lifted model.

use std::io::{BufRead, Write};

use statrs::function::gamma::gamma;

use crate::error::{Error, Result};

/// One exponential node of the lift: weight `c` and mean-reversion rate `gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiftNode {
    pub c: f64,
    pub gamma: f64,
}

/// The n-term exponential approximation of the fractional kernel.
///
/// Nodes are ordered by strictly increasing `gamma`; all weights are positive.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftSpec {
    nodes: Vec<LiftNode>,
}

impl LiftSpec {
    pub fn from_nodes(nodes: Vec<LiftNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Config("lift must contain at least one node".into()));
        }
        for w in nodes.windows(2) {
            if !(w[1].gamma > w[0].gamma) {
                return Err(Error::Config(format!(
                    "lift rates must be strictly increasing, got {} then {}",
                    w[0].gamma, w[1].gamma
                )));
            }
        }
        for node in &nodes {
            if !(node.c > 0.0 && node.c.is_finite()) {
                return Err(Error::Config(format!("lift weights must be positive, got {}", node.c)));
            }
            if !(node.gamma >= 0.0 && node.gamma.is_finite()) {
                return Err(Error::Config(format!(
                    "lift rates must be non-negative, got {}",
                    node.gamma
                )));
            }
        }
        Ok(LiftSpec { nodes })
    }

    pub fn nodes(&self) -> &[LiftNode] {
        &self.nodes
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn gamma_min(&self) -> f64 {
        self.nodes.first().map(|n| n.gamma).unwrap_or(0.0)
    }

    pub fn gamma_max(&self) -> f64 {
        self.nodes.last().map(|n| n.gamma).unwrap_or(0.0)
    }

    /// Shortest time scale resolved by the lift, 1/max gamma_i.
    /// Infinite for the single-node H = 1/2 lift whose rate is zero.
    pub fn tau_short(&self) -> f64 {
        let g = self.gamma_max();
        if g > 0.0 {
            1.0 / g
        } else {
            f64::INFINITY
        }
    }

    /// Evaluates the exponential-sum kernel approximation at time t >= 0.
    pub fn kernel_value(&self, t: f64) -> f64 {
        self.nodes.iter().map(|n| n.c * (-n.gamma * t).exp()).sum()
    }

    /// Writes the lift as a two-column text file (c_i, gamma_i), one node per
    /// line, at full decimal precision.
    pub fn write_nodes<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for node in &self.nodes {
            writeln!(w, "{:.16e} {:.16e}", node.c, node.gamma)?;
        }
        Ok(())
    }

    /// Reads a lift back from the two-column text format.
    pub fn read_nodes<R: BufRead>(r: R) -> Result<Self> {
        let mut nodes = Vec::new();
        for (line_no, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Data {
                path: "<lift nodes>".into(),
                message: format!("line {}: {}", line_no + 1, e),
            })?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut it = trimmed.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<f64> {
                tok.ok_or_else(|| Error::Data {
                    path: "<lift nodes>".into(),
                    message: format!("line {}: expected two columns", line_no + 1),
                })?
                .parse::<f64>()
                .map_err(|e| Error::Data {
                    path: "<lift nodes>".into(),
                    message: format!("line {}: {}", line_no + 1, e),
                })
            };
            let c = parse(it.next())?;
            let gamma = parse(it.next())?;
            nodes.push(LiftNode { c, gamma });
        }
        LiftSpec::from_nodes(nodes)
    }
}

/// The fractional kernel K(t) = t^(H-1/2)/Gamma(H+1/2).
///
/// Singular at t = 0 for H < 1/2, constant 1 for H = 1/2.
pub fn fractional_kernel(t: f64, h: f64) -> Result<f64> {
    check_hurst(h)?;
    if !(t > 0.0) {
        return Err(Error::Domain(format!("kernel requires t > 0, got {t}")));
    }
    if h == 0.5 {
        return Ok(1.0);
    }
    Ok(t.powf(h - 0.5) / gamma(h + 0.5))
}

fn check_hurst(h: f64) -> Result<()> {
    if !(h > 0.0 && h <= 0.5) {
        return Err(Error::Domain(format!("H must lie in (0, 1/2], got {h}")));
    }
    Ok(())
}

/// Builds the n-factor lift from a geometric partition of the rate axis.
///
/// The partition spans [1/horizon, 1/short_scale]: `horizon` controls the
/// slowest factor (longest maturity the lift resolves) and `short_scale` the
/// fastest. On each interval the weight is the mass of the Laplace measure mu
/// and the rate is the interval's first moment of mu divided by that mass,
/// both in closed form since mu has a power-law density.
///
/// H = 1/2 is the exact single-node case (c, gamma) = (1, 0): the kernel is
/// identically one and no quadrature is involved.
pub fn build_lift(h: f64, n: usize, horizon: f64, short_scale: f64) -> Result<LiftSpec> {
    check_hurst(h)?;
    if n < 1 {
        return Err(Error::Config("lift requires at least one factor".into()));
    }
    if h == 0.5 {
        return LiftSpec::from_nodes(vec![LiftNode { c: 1.0, gamma: 0.0 }]);
    }
    if !(short_scale > 0.0 && short_scale < horizon && horizon.is_finite()) {
        return Err(Error::Config(format!(
            "scales must satisfy 0 < short_scale < horizon, got short_scale = {short_scale}, horizon = {horizon}"
        )));
    }

    // Exponents of the mass and first-moment integrals of mu.
    let p = 0.5 - h;
    let q = 1.5 - h;
    let norm = 1.0 / (gamma(h + 0.5) * gamma(0.5 - h));

    let ln_lo = -horizon.ln();
    let ln_hi = -short_scale.ln();
    let step = (ln_hi - ln_lo) / n as f64;

    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let ln_a = ln_lo + step * i as f64;
        let ln_b = ln_lo + step * (i + 1) as f64;
        let mass = ((p * ln_b).exp() - (p * ln_a).exp()) / p;
        let moment = ((q * ln_b).exp() - (q * ln_a).exp()) / q;
        let c = norm * mass;
        let gamma_i = moment / mass;
        if !(c > 0.0 && gamma_i.is_finite()) {
            return Err(Error::Config(format!(
                "degenerate lift interval {i}: c = {c}, gamma = {gamma_i}"
            )));
        }
        nodes.push(LiftNode { c, gamma: gamma_i });
    }
    LiftSpec::from_nodes(nodes)
}

/// Inverts the geometric placement rule: returns the (horizon, short_scale)
/// pair for which `build_lift(h, n, ..)` produces first and last rates equal
/// to `gamma_first` and `gamma_last`.
///
/// On a geometric partition with per-interval ratio r the rates form the
/// geometric sequence gamma_i = g(r) xi_0 r^(i-1) with
/// g(r) = (p/q)(r^q - 1)/(r^p - 1), so two target endpoints determine r and
/// the grid origin xi_0 in closed form.
pub fn scales_for_gamma_range(
    h: f64,
    n: usize,
    gamma_first: f64,
    gamma_last: f64,
) -> Result<(f64, f64)> {
    check_hurst(h)?;
    if h == 0.5 {
        return Err(Error::Config("H = 1/2 lift has the fixed single node (1, 0)".into()));
    }
    if n < 2 {
        return Err(Error::Config("rate-range tuning needs at least two factors".into()));
    }
    if !(gamma_first > 0.0 && gamma_last > gamma_first) {
        return Err(Error::Config(format!(
            "need 0 < gamma_first < gamma_last, got {gamma_first}, {gamma_last}"
        )));
    }
    let p = 0.5 - h;
    let q = 1.5 - h;
    let ln_r = (gamma_last / gamma_first).ln() / (n - 1) as f64;
    let g = (p / q) * ((q * ln_r).exp_m1()) / ((p * ln_r).exp_m1());
    let xi0 = gamma_first / g;
    let xi_n = xi0 * (ln_r * n as f64).exp();
    Ok((1.0 / xi0, 1.0 / xi_n))
}

/// Sup and L2 (root-mean-square) relative errors of the lift against the
/// exact fractional kernel over a time grid.
#[derive(Debug, Clone, Copy)]
pub struct KernelApproxError {
    pub sup: f64,
    pub l2: f64,
}

pub fn kernel_approx_error(lift: &LiftSpec, h: f64, t_grid: &[f64]) -> Result<KernelApproxError> {
    check_hurst(h)?;
    if t_grid.is_empty() {
        return Err(Error::Config("kernel error grid must be non-empty".into()));
    }
    for w in t_grid.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::Config("kernel error grid must be strictly increasing".into()));
        }
    }
    let mut sup: f64 = 0.0;
    let mut sum_sq = 0.0;
    for &t in t_grid {
        let exact = fractional_kernel(t, h)?;
        let rel = (exact - lift.kernel_value(t)).abs() / exact;
        sup = sup.max(rel);
        sum_sq += rel * rel;
    }
    Ok(KernelApproxError { sup, l2: (sum_sq / t_grid.len() as f64).sqrt() })
}
