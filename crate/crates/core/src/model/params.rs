//! Structural parameters and the period primitives: utility, bequest,
//! time cost of health, cost of work, taxes and the budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Age from which pension income is paid and contributions stop.
pub const PENSION_AGE: u32 = 65;
/// Hours above which older workers pay the extra per-hour cost.
pub const PART_TIME_HOURS: f64 = 1250.0;
/// First age at which working is not allowed.
pub const NO_WORK_AGE: u32 = 70;

/// Progressive schedule on labour and pension income plus a flat rate on
/// capital income.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxSchedule {
    /// Lower bounds of the income brackets, starting at 0.
    pub thresholds: Vec<f64>,
    pub rates: Vec<f64>,
    pub capital_rate: f64,
}

impl Default for TaxSchedule {
    fn default() -> Self {
        Self {
            thresholds: vec![0.0, 6_000.0, 40_000.0],
            rates: vec![0.0, 0.2, 0.4],
            capital_rate: 0.2,
        }
    }
}

impl TaxSchedule {
    pub fn zero() -> Self {
        Self {
            thresholds: vec![0.0],
            rates: vec![0.0],
            capital_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty()
            || self.thresholds.len() != self.rates.len()
            || self.thresholds[0] != 0.0
        {
            return Err(Error::Config(
                "tax brackets need matching thresholds and rates starting at 0".into(),
            ));
        }
        if self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("tax thresholds must increase".into()));
        }
        if self
            .rates
            .iter()
            .chain([&self.capital_rate])
            .any(|r| !(0.0..1.0).contains(r))
        {
            return Err(Error::Config("tax rates must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn tax(&self, income: f64, capital_income: f64) -> f64 {
        let mut due = 0.0;
        for (k, (&lo, &rate)) in self.thresholds.iter().zip(&self.rates).enumerate() {
            let hi = self.thresholds.get(k + 1).copied().unwrap_or(f64::INFINITY);
            due += rate * (income.min(hi) - lo).max(0.0);
        }
        due + self.capital_rate * capital_income.max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Linear,
    /// Shape-preserving piecewise cubic.
    Pchip,
}

/// Hours lost to ill health, interpolated through five knots with zero
/// cost at the top knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeCost {
    /// Health locations: minimum, 20th, 30th and 50th percentiles, maximum.
    pub knots: [f64; 5],
    /// Cost at the first four knots; the last is fixed at zero.
    pub values: [f64; 4],
    pub interpolation: Interpolation,
}

impl Default for TimeCost {
    fn default() -> Self {
        Self {
            knots: [-3.0, -0.633, -0.170, 0.340, 2.5],
            values: [4879.0, 2312.5, 1409.0, 1401.9],
            interpolation: Interpolation::Linear,
        }
    }
}

impl TimeCost {
    fn ys(&self) -> [f64; 5] {
        [
            self.values[0],
            self.values[1],
            self.values[2],
            self.values[3],
            0.0,
        ]
    }

    /// Cost at `h`; the flag reports clamping to the knot range.
    pub fn eval(&self, h: f64) -> (f64, bool) {
        let xs = &self.knots;
        let ys = self.ys();
        let clamped = h < xs[0] || h > xs[4];
        let h = h.clamp(xs[0], xs[4]);
        let k = (0..4).find(|&k| h <= xs[k + 1]).unwrap_or(3);
        let (x0, x1) = (xs[k], xs[k + 1]);
        let t = (h - x0) / (x1 - x0);
        let v = match self.interpolation {
            Interpolation::Linear => ys[k] + t * (ys[k + 1] - ys[k]),
            Interpolation::Pchip => {
                let d = pchip_slopes(xs, &ys);
                let hk = x1 - x0;
                let (t2, t3) = (t * t, t * t * t);
                (2.0 * t3 - 3.0 * t2 + 1.0) * ys[k]
                    + (t3 - 2.0 * t2 + t) * hk * d[k]
                    + (-2.0 * t3 + 3.0 * t2) * ys[k + 1]
                    + (t3 - t2) * hk * d[k + 1]
            }
        };
        (v, clamped)
    }

    pub fn validate(&self, time_endowment: f64) -> Result<()> {
        if self.knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("time-cost knots must increase".into()));
        }
        if self
            .values
            .iter()
            .any(|v| !(0.0..time_endowment).contains(v))
        {
            return Err(Error::Config("time-cost values must lie in [0, L)".into()));
        }
        Ok(())
    }
}

fn pchip_slopes(xs: &[f64; 5], ys: &[f64; 5]) -> [f64; 5] {
    let h: Vec<f64> = (0..4).map(|k| xs[k + 1] - xs[k]).collect();
    let delta: Vec<f64> = (0..4).map(|k| (ys[k + 1] - ys[k]) / h[k]).collect();
    let mut d = [0.0; 5];
    for k in 1..4 {
        if delta[k - 1] * delta[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s * d0 <= 0.0 {
            0.0
        } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    d[0] = end(h[0], h[1], delta[0], delta[1]);
    d[4] = end(h[3], h[2], delta[3], delta[2]);
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub time_endowment: f64,
    pub consumption_floor: f64,
    pub risk_aversion: f64,
    pub pension_annuity_rate: f64,
    pub pension_contribution_rate: f64,
    pub discount: f64,
    pub interest_rate: f64,
    pub consumption_weight: f64,
    pub bequest_weight: f64,
    pub bequest_shift: f64,
    pub time_cost: TimeCost,
    /// Fixed cost, age slope, and per-hour cost for older full-timers.
    pub work_cost: [f64; 3],
    pub tax: TaxSchedule,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            time_endowment: 4880.0,
            consumption_floor: 1660.0,
            risk_aversion: 4.0,
            pension_annuity_rate: 0.0378,
            pension_contribution_rate: 0.06,
            discount: 0.9756,
            interest_rate: 0.02,
            consumption_weight: 0.378,
            bequest_weight: 0.042,
            bequest_shift: 533_219.0,
            time_cost: TimeCost::default(),
            work_cost: [3585.0, 32.8, 2.8],
            tax: TaxSchedule::default(),
        }
    }
}

impl ModelParams {
    /// Estimates for the Gaussian AR(1) health variant.
    pub fn canonical() -> Self {
        Self {
            consumption_weight: 0.379,
            bequest_weight: 0.044,
            time_cost: TimeCost {
                values: [4878.5, 2403.5, 1412.1, 1402.0],
                ..TimeCost::default()
            },
            work_cost: [3597.9, 32.9, 2.9],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.risk_aversion == 1.0 || !self.risk_aversion.is_finite() {
            return bad("risk aversion must differ from 1");
        }
        if !(self.consumption_weight > 0.0 && self.consumption_weight < 1.0) {
            return bad("consumption weight must lie in (0, 1)");
        }
        if !(self.time_endowment > 0.0) {
            return bad("time endowment must be positive");
        }
        if !(self.bequest_shift > 0.0) {
            return bad("bequest shift must be positive");
        }
        if !(self.bequest_weight >= 0.0) {
            return bad("bequest weight must be non-negative");
        }
        if !(self.consumption_floor > 0.0) {
            return bad("consumption floor must be positive");
        }
        if !(self.discount > 0.0) || !(self.interest_rate > -1.0) {
            return bad("discount must be positive and interest above -1");
        }
        if !(0.0..1.0).contains(&self.pension_contribution_rate)
            || !(self.pension_annuity_rate >= 0.0)
        {
            return bad("pension rates out of range");
        }
        self.time_cost.validate(self.time_endowment)?;
        self.tax.validate()
    }
}

/// Period utility over consumption and leisure.
pub fn utility(c: f64, leisure: f64, gamma: f64, nu: f64) -> Result<f64> {
    if !(c > 0.0) || !(leisure > 0.0) {
        return Err(Error::Domain(format!(
            "utility needs positive consumption and leisure, got c={c}, l={leisure}"
        )));
    }
    Ok(utility_ln(c.ln(), leisure.ln(), gamma, nu))
}

/// Utility from log consumption and log leisure.
#[inline]
pub fn utility_ln(ln_c: f64, ln_l: f64, gamma: f64, nu: f64) -> f64 {
    ((1.0 - nu) * (gamma * ln_c + (1.0 - gamma) * ln_l)).exp() / (1.0 - nu)
}

pub fn bequest(a: f64, weight: f64, shift: f64, nu: f64, gamma: f64) -> Result<f64> {
    if !(shift > 0.0) {
        return Err(Error::Domain(format!(
            "bequest shift must be positive, got {shift}"
        )));
    }
    if !(a >= 0.0) {
        return Err(Error::Domain(format!(
            "bequest needs non-negative assets, got {a}"
        )));
    }
    Ok(weight * (a + shift).powf((1.0 - nu) * gamma) / (1.0 - nu))
}

/// Monetary cost of working `hours` at `age`.
pub fn work_cost(hours: f64, age: u32, coefs: &[f64; 3]) -> f64 {
    if hours <= 0.0 {
        return 0.0;
    }
    let base = coefs[0] + coefs[1] * age as f64;
    if age >= PENSION_AGE && hours > PART_TIME_HOURS {
        base + coefs[2] * hours
    } else {
        base
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    /// Cash on hand before taxes: assets, net earnings, interest, pension.
    pub gross: f64,
    pub tax: f64,
    pub transfer: f64,
    /// Cash on hand after taxes and transfers.
    pub resources: f64,
}

impl Budget {
    /// Income flows after taxes and transfers, excluding the asset stock.
    pub fn disposable_income(&self, assets: f64) -> f64 {
        self.gross - assets - self.tax + self.transfer
    }
}

pub fn net_resources(
    a: f64,
    hours: f64,
    wage: f64,
    pension: f64,
    age: u32,
    params: &ModelParams,
) -> Budget {
    let contribution = if age < PENSION_AGE {
        params.pension_contribution_rate
    } else {
        0.0
    };
    let labour = hours * wage * (1.0 - contribution);
    let pension_income = if age >= PENSION_AGE {
        params.pension_annuity_rate * pension
    } else {
        0.0
    };
    let capital = params.interest_rate * a;
    let gross = a + labour + capital + pension_income;
    let tax = params.tax.tax(labour + pension_income, capital);
    let net = gross - tax;
    let transfer = (params.consumption_floor - net).max(0.0);
    Budget {
        gross,
        tax,
        transfer,
        resources: net.max(params.consumption_floor),
    }
}

/// Pension wealth carried into next period.
pub fn next_pension(pension: f64, earnings: f64, age: u32, params: &ModelParams) -> f64 {
    if age < PENSION_AGE {
        pension + params.pension_contribution_rate * earnings
    } else {
        pension
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_composite_utility() {
        for g in [0.1, 0.378, 0.9] {
            assert!((utility(1.0, 1.0, g, 4.0).unwrap() + 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn utility_at_two() {
        let u = utility(2.0, 1.0, 0.378, 4.0).unwrap();
        let direct = 2f64.powf(0.378 * -3.0) / -3.0;
        assert!((u - direct).abs() < 1e-15);
        assert!((u + 0.1519).abs() < 5e-5);
        assert!(utility(0.0, 1.0, 0.5, 4.0).is_err());
        assert!(utility(1.0, -1.0, 0.5, 4.0).is_err());
    }

    #[test]
    fn bequest_cases() {
        assert_eq!(bequest(1e5, 0.0, 533_219.0, 4.0, 0.378).unwrap(), 0.0);
        let b0 = bequest(0.0, 0.042, 533_219.0, 4.0, 0.378).unwrap();
        let direct = 0.042 * 533_219f64.powf(-3.0 * 0.378) / -3.0;
        assert!(b0 < 0.0 && b0.is_finite());
        assert!(((b0 - direct) / direct).abs() < 1e-14);
        assert!(bequest(0.0, 0.042, 0.0, 4.0, 0.378).is_err());
        assert!(bequest(1e4, 0.042, 533_219.0, 4.0, 0.378).unwrap() > b0);
    }

    #[test]
    fn time_cost_knots() {
        let tc = TimeCost::default();
        assert_eq!(tc.eval(tc.knots[4]).0, 0.0);
        assert_eq!(tc.eval(tc.knots[0]).0, 4879.0);
        assert_eq!(tc.eval(-0.633).0, 2312.5);
        assert_eq!(tc.eval(-0.170).0, 1409.0);
        let (v, clamped) = tc.eval(10.0);
        assert!(clamped && v == 0.0);
        let cubic = TimeCost {
            interpolation: Interpolation::Pchip,
            ..tc.clone()
        };
        for &k in &tc.knots {
            assert!((cubic.eval(k).0 - tc.eval(k).0).abs() < 1e-9);
        }
    }

    #[test]
    fn work_cost_cases() {
        let w = [3585.0, 32.8, 2.8];
        assert_eq!(work_cost(0.0, 60, &w), 0.0);
        assert_eq!(work_cost(2000.0, 64, &w), 3585.0 + 32.8 * 64.0);
        assert_eq!(work_cost(1200.0, 66, &w), 3585.0 + 32.8 * 66.0);
        assert_eq!(
            work_cost(1500.0, 66, &w),
            3585.0 + 32.8 * 66.0 + 2.8 * 1500.0
        );
    }

    #[test]
    fn floor_and_zero_tax_budget() {
        let p = ModelParams {
            tax: TaxSchedule::zero(),
            interest_rate: 0.0,
            ..ModelParams::default()
        };
        let b = net_resources(0.0, 0.0, 0.0, 0.0, 60, &p);
        assert_eq!(b.transfer, 1660.0);
        assert_eq!(b.resources, 1660.0);
        let b = net_resources(0.0, 1000.0, 10.0, 0.0, 64, &p);
        assert!((b.resources - 10_000.0 * 0.94).abs() < 1e-9);
        assert_eq!(b.transfer, 0.0);
    }

    #[test]
    fn progressive_tax() {
        let t = TaxSchedule::default();
        assert_eq!(t.tax(5_000.0, 0.0), 0.0);
        assert!((t.tax(50_000.0, 100.0) - (0.2 * 34_000.0 + 0.4 * 10_000.0 + 20.0)).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn utility_increasing(c in 1.0f64..1e5, l in 1.0f64..4000.0, g in 0.05f64..0.95) {
            let u = utility(c, l, g, 4.0).unwrap();
            prop_assert!(utility(c * 1.01, l, g, 4.0).unwrap() > u);
            prop_assert!(utility(c, l * 1.01, g, 4.0).unwrap() > u);
        }

        #[test]
        fn transfer_tops_up_to_floor(a in 0.0f64..5e3, s in 0.0f64..2000.0, w in 0.0f64..20.0, p in 0.0f64..5e4, age in 50u32..86) {
            let params = ModelParams::default();
            let b = net_resources(a, s, w, p, age, &params);
            prop_assert!(b.resources >= params.consumption_floor);
            if b.transfer > 0.0 {
                prop_assert!((b.resources - params.consumption_floor).abs() < 1e-9);
            }
            prop_assert!((b.gross - b.tax + b.transfer - b.resources).abs() < 1e-9);
        }
    }
}
