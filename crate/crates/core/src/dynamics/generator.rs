//! Known-truth generators for the persistent health component.

use crate::dynamics::canonical::CanonicalParams;
use crate::stats::norm_quantile;

/// Quantile-function generator with rank-dependent persistence.
///
/// Below the kink, bad shocks (rank ≤ 0.5) carry slope `rho_low_bad` and good
/// shocks carry `rho_low_good`; above the kink the slopes are
/// `rho_high_bad` / `rho_high_good`. Slopes must be non-increasing in rank
/// below the kink and non-decreasing above it so quantiles never cross.
#[derive(Debug, Clone, PartialEq)]
pub struct KinkedQuantile {
    pub kink: f64,
    pub rho_low_bad: f64,
    pub rho_low_good: f64,
    pub rho_high_bad: f64,
    pub rho_high_good: f64,
    /// Slope applied to the kink location itself.
    pub rho_kink: f64,
    pub sigma_nu: f64,
    pub sigma0: f64,
    pub sigma_eps: f64,
}

impl Default for KinkedQuantile {
    fn default() -> Self {
        Self {
            kink: 0.0,
            rho_low_bad: 0.95,
            rho_low_good: 0.6,
            rho_high_bad: 0.85,
            rho_high_good: 0.95,
            rho_kink: 0.9,
            sigma_nu: 0.29,
            sigma0: 0.67,
            sigma_eps: 0.37,
        }
    }
}

impl KinkedQuantile {
    pub fn slope(&self, eta: f64, tau: f64) -> f64 {
        match (eta < self.kink, tau <= 0.5) {
            (true, true) => self.rho_low_bad,
            (true, false) => self.rho_low_good,
            (false, true) => self.rho_high_bad,
            (false, false) => self.rho_high_good,
        }
    }

    pub fn quantile(&self, eta: f64, tau: f64) -> f64 {
        let at_kink = self.rho_kink * self.kink + self.sigma_nu * norm_quantile(tau);
        at_kink + self.slope(eta, tau) * (eta - self.kink)
    }
}

/// Data-generating process for the persistent component (biennial steps).
#[derive(Debug, Clone, PartialEq)]
pub enum HealthGenerator {
    Canonical(CanonicalParams),
    Kinked(KinkedQuantile),
}

impl HealthGenerator {
    /// τ-quantile of η at the initial age.
    pub fn initial_quantile(&self, tau: f64) -> f64 {
        match self {
            Self::Canonical(p) => p.var0.sqrt() * norm_quantile(tau),
            Self::Kinked(k) => k.sigma0 * norm_quantile(tau),
        }
    }

    /// τ-quantile of next-period η given current η.
    pub fn quantile(&self, eta: f64, tau: f64) -> f64 {
        match self {
            Self::Canonical(p) => p.rho * eta + p.var_nu.sqrt() * norm_quantile(tau),
            Self::Kinked(k) => k.quantile(eta, tau),
        }
    }

    /// True derivative of the quantile function in η.
    pub fn persistence(&self, eta: f64, tau: f64) -> f64 {
        match self {
            Self::Canonical(p) => p.rho,
            Self::Kinked(k) => k.slope(eta, tau),
        }
    }

    pub fn sigma_eps(&self) -> f64 {
        match self {
            Self::Canonical(p) => p.var_eps.sqrt(),
            Self::Kinked(k) => k.sigma_eps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinked_quantiles_do_not_cross() {
        let k = KinkedQuantile::default();
        for eta in [-3.0, -1.0, -0.1, 0.0, 0.4, 2.5] {
            let mut prev = f64::NEG_INFINITY;
            for i in 1..100 {
                let q = k.quantile(eta, i as f64 / 100.0);
                assert!(q >= prev, "eta {eta} tau {i}");
                prev = q;
            }
        }
    }
}
