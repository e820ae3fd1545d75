use crate::error::{Error, Result};

/// Rough-Heston model parameters.
///
/// The spot is forward-normalized (S0 = 1) and rates are zero, so the model
/// is fully described by the variance dynamics: initial variance `v0`,
/// long-term level `theta`, mean-reversion speed `lambda`, vol-of-variance
/// `nu`, spot/variance correlation `rho`, and the Hurst parameter `h`
/// controlling the roughness of the variance path. `h = 1/2` recovers the
/// classical Heston model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub v0: f64,
    pub theta: f64,
    pub lambda: f64,
    pub nu: f64,
    pub rho: f64,
    pub h: f64,
}

impl ModelParams {
    pub fn new(v0: f64, theta: f64, lambda: f64, nu: f64, rho: f64, h: f64) -> Result<Self> {
        let p = ModelParams { v0, theta, lambda, nu, rho, h };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v0 > 0.0 && self.v0.is_finite()) {
            return Err(Error::Config(format!("v0 must be positive, got {}", self.v0)));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::Config(format!("theta must be positive, got {}", self.theta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::Config(format!("nu must be positive, got {}", self.nu)));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [-1, 1], got {}", self.rho)));
        }
        if !(self.h > 0.0 && self.h <= 0.5) {
            return Err(Error::Config(format!("H must lie in (0, 1/2], got {}", self.h)));
        }
        Ok(())
    }

    /// Fractional order of the Riccati-Volterra equation, alpha = H + 1/2.
    pub fn alpha(&self) -> f64 {
        self.h + 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_valid_parameter_set() {
        let p = ModelParams::new(0.02, 0.02, 0.3, 0.3, -0.7, 0.1).unwrap();
        assert_eq!(p.alpha(), 0.6);
    }

    #[test]
    fn rejects_out_of_range_fields() {
        assert!(ModelParams::new(0.0, 0.02, 0.3, 0.3, -0.7, 0.1).is_err());
        assert!(ModelParams::new(0.02, -0.1, 0.3, 0.3, -0.7, 0.1).is_err());
        assert!(ModelParams::new(0.02, 0.02, -0.3, 0.3, -0.7, 0.1).is_err());
        assert!(ModelParams::new(0.02, 0.02, 0.3, 0.0, -0.7, 0.1).is_err());
        assert!(ModelParams::new(0.02, 0.02, 0.3, 0.3, -1.2, 0.1).is_err());
        assert!(ModelParams::new(0.02, 0.02, 0.3, 0.3, -0.7, 0.6).is_err());
        assert!(ModelParams::new(0.02, 0.02, 0.3, 0.3, -0.7, 0.0).is_err());
    }
}
