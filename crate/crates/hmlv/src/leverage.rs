//! Particle estimation of the conditional expectation E[v_t | S_t = x] and
//! the leverage values built from it.
//!
//! The estimator partitions the particle cloud into equal-count quantile
//! bins by spot, takes the variance mean per bin, and interpolates linearly
//! between bin centers (the per-bin spot medians). Quantile binning needs no
//! bandwidth choice and keeps every bin equally populated no matter how
//! heavy the spot tails get, which matters for rough-Heston clouds at long
//! horizons.

use crate::error::{Error, Result};

/// Variance floor shared with the simulation layer: conditional-expectation
/// estimates are clamped below it before entering any square root.
pub const EPS_V: f64 = 1e-10;

/// Default bin count for a cloud of `m` particles.
pub fn default_bins(m: usize) -> usize {
    20.max(((m as f64).sqrt() / 5.0).floor() as usize)
}

/// Leverage value from the local-vol level and the conditional variance:
/// eta_hat / sqrt(max(cond_var, EPS_V)). Composed with the particle's own
/// sqrt(v), the diffusion becomes eta_hat * sqrt(v / E[v|S]).
pub fn leverage_value(eta_hat: f64, cond_var: f64) -> f64 {
    eta_hat / cond_var.max(EPS_V).sqrt()
}

/// Fitted conditional-expectation estimator for one time step.
#[derive(Debug, Clone)]
pub struct CondExpEstimator {
    centers: Vec<f64>,
    means: Vec<f64>,
    counts: Vec<usize>,
}

impl CondExpEstimator {
    /// Fit the estimator to a particle cloud. `spots` and `vars` are paired
    /// by index; ties in spot are broken by particle index (stable sort).
    pub fn fit(spots: &[f64], vars: &[f64], bins: usize) -> Result<Self> {
        let m = spots.len();
        if vars.len() != m {
            return Err(Error::Domain(format!(
                "particle arrays disagree: {} spots, {} variances",
                m,
                vars.len()
            )));
        }
        if bins == 0 || m < bins {
            return Err(Error::Estimator { particles: m, bins });
        }
        for (j, &s) in spots.iter().enumerate() {
            if !s.is_finite() || !vars[j].is_finite() {
                return Err(Error::Domain(format!(
                    "non-finite particle at index {j}: S = {s}, v = {}",
                    vars[j]
                )));
            }
        }

        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| spots[a].partial_cmp(&spots[b]).unwrap());

        let mut centers = Vec::with_capacity(bins);
        let mut means = Vec::with_capacity(bins);
        let mut counts = Vec::with_capacity(bins);
        for b in 0..bins {
            let lo = b * m / bins;
            let hi = (b + 1) * m / bins;
            let slice = &order[lo..hi];
            let n = slice.len();
            let center = if n % 2 == 1 {
                spots[slice[n / 2]]
            } else {
                0.5 * (spots[slice[n / 2 - 1]] + spots[slice[n / 2]])
            };
            let mean = slice.iter().map(|&j| vars[j]).sum::<f64>() / n as f64;
            centers.push(center);
            means.push(mean);
            counts.push(n);
        }

        // Coincident centers (heavy ties, e.g. the first step of a coarse
        // grid) merge into one node, count-weighted so the global mean is
        // preserved exactly.
        let mut merged: Self =
            CondExpEstimator { centers: Vec::new(), means: Vec::new(), counts: Vec::new() };
        for i in 0..bins {
            let last = merged.centers.len();
            if last > 0 && centers[i] <= merged.centers[last - 1] {
                let c_old = merged.counts[last - 1] as f64;
                let c_new = counts[i] as f64;
                merged.means[last - 1] =
                    (merged.means[last - 1] * c_old + means[i] * c_new) / (c_old + c_new);
                merged.counts[last - 1] += counts[i];
            } else {
                merged.centers.push(centers[i]);
                merged.means.push(means[i]);
                merged.counts.push(counts[i]);
            }
        }
        Ok(merged)
    }

    /// Estimate E[v | S = x]: linear between bin centers, constant beyond
    /// the outer centers.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.centers.len();
        if n == 1 {
            return self.means[0];
        }
        if x <= self.centers[0] {
            return self.means[0];
        }
        if x >= self.centers[n - 1] {
            return self.means[n - 1];
        }
        let hi = self.centers.partition_point(|&c| c < x);
        let lo = hi - 1;
        let w = (x - self.centers[lo]) / (self.centers[hi] - self.centers[lo]);
        self.means[lo] + w * (self.means[hi] - self.means[lo])
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }
}

/// Conditional-expectation estimates at the query points, from quantile
/// binning of the particle cloud.
pub fn conditional_expectation(
    particles: &[(f64, f64)],
    queries: &[f64],
    bins: usize,
) -> Result<Vec<f64>> {
    for &q in queries {
        if !(q > 0.0 && q.is_finite()) {
            return Err(Error::Domain(format!("queries must be positive, got {q}")));
        }
    }
    let spots: Vec<f64> = particles.iter().map(|p| p.0).collect();
    let vars: Vec<f64> = particles.iter().map(|p| p.1).collect();
    let est = CondExpEstimator::fit(&spots, &vars, bins)?;
    Ok(queries.iter().map(|&q| est.eval(q)).collect())
}

/// Estimator snapshot for one simulation step.
#[derive(Debug, Clone)]
pub struct LeverageStep {
    /// Step start time the estimator was fitted at.
    pub t: f64,
    /// Interpolation nodes (per-bin spot medians), strictly increasing.
    pub bin_centers: Vec<f64>,
    /// Per-bin variance means, non-negative for a non-negative cloud.
    pub bin_means: Vec<f64>,
    /// Particles whose conditional-variance estimate hit the EPS_V floor.
    pub clamp_count: usize,
    /// Cloud size the estimator saw.
    pub n_particles: usize,
}

/// Per-step estimator history of one HMLV simulation.
#[derive(Debug, Clone, Default)]
pub struct LeverageRecord {
    pub steps: Vec<LeverageStep>,
}

impl LeverageRecord {
    /// Delimited diagnostic dump: one `step TAB t TAB center TAB mean` row
    /// per interpolation node.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("step\tt\tbin_center\tbin_mean\n");
        for (i, step) in self.steps.iter().enumerate() {
            for (c, m) in step.bin_centers.iter().zip(&step.bin_means) {
                out.push_str(&format!("{i}\t{:.17e}\t{c:.17e}\t{m:.17e}\n", step.t));
            }
        }
        out
    }
}
