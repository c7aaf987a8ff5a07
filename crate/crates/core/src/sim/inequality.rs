//! Dispersion of simulated assets and earnings.

use super::History;
use crate::error::{Error, Result};
use crate::stats::{mean, quantile_sorted, sorted_copy, variance};

const EARNINGS_AGE: u32 = 65;

#[derive(Debug, Clone, PartialEq)]
pub struct InequalityTable {
    /// 80/20 percentile ratio of lifetime-average assets.
    pub assets_ratio_80_20: Option<f64>,
    pub assets_sd: f64,
    /// Earnings cumulated up to 65, among those alive at 65.
    pub earnings_ratio_80_20: Option<f64>,
    /// Standard deviation of log cumulated earnings, zeros excluded.
    pub earnings_log_sd: Option<f64>,
    pub zero_earnings_share: f64,
    /// Coefficient of variation of assets among survivors, by age index.
    pub assets_cov: Vec<Option<f64>>,
}

fn ratio_80_20(values: &[f64]) -> Option<f64> {
    let s = sorted_copy(values);
    let lo = quantile_sorted(&s, 0.2);
    (lo > 0.0).then(|| quantile_sorted(&s, 0.8) / lo)
}

fn cov(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values);
    (m > 0.0).then(|| variance(values).sqrt() / m)
}

/// Asset coefficient of variation among the alive at each age index.
pub fn age_cov(hs: &[History], n_ages: usize) -> Vec<Option<f64>> {
    (0..n_ages)
        .map(|t| {
            let v: Vec<f64> = hs
                .iter()
                .filter(|h| h.alive_at(t))
                .map(|h| h.assets[t])
                .collect();
            cov(&v)
        })
        .collect()
}

pub fn inequality_metrics(hs: &[History]) -> Result<InequalityTable> {
    if hs.is_empty() {
        return Err(Error::Empty("no histories".into()));
    }
    let n_ages = hs.iter().map(History::periods).max().unwrap_or(0);
    let lifetime: Vec<f64> = hs
        .iter()
        .filter(|h| h.periods() > 0)
        .map(|h| mean(&h.assets))
        .collect();
    let earnings: Vec<f64> = hs
        .iter()
        .filter(|h| h.periods() > (EARNINGS_AGE - h.first_age) as usize)
        .map(|h| {
            (0..h.periods())
                .filter(|&t| h.age(t) < EARNINGS_AGE)
                .map(|t| h.hours[t] * h.wage[t])
                .sum()
        })
        .collect();
    let positive: Vec<f64> = earnings
        .iter()
        .filter(|e| **e > 0.0)
        .map(|e| e.ln())
        .collect();
    Ok(InequalityTable {
        assets_ratio_80_20: ratio_80_20(&lifetime),
        assets_sd: variance(&lifetime).sqrt(),
        earnings_ratio_80_20: (!earnings.is_empty())
            .then(|| ratio_80_20(&earnings))
            .flatten(),
        earnings_log_sd: (positive.len() >= 2).then(|| variance(&positive).sqrt()),
        zero_earnings_share: if earnings.is_empty() {
            f64::NAN
        } else {
            (earnings.len() - positive.len()) as f64 / earnings.len() as f64
        },
        assets_cov: age_cov(hs, n_ages),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history(assets: Vec<f64>, hours: f64) -> History {
        let n = assets.len();
        History {
            first_age: 50,
            assets,
            hours: vec![hours; n],
            wage: vec![10.0; n],
            ..Default::default()
        }
    }

    #[test]
    fn identical_histories_have_no_dispersion() {
        let hs: Vec<History> = (0..20)
            .map(|_| history(vec![1e4, 2e4, 3e4], 1000.0))
            .collect();
        let t = inequality_metrics(&hs).unwrap();
        for c in t.assets_cov {
            assert!(c.unwrap().abs() < 1e-12);
        }
        assert!(t.assets_sd < 1e-9);
    }

    #[test]
    fn scaling_assets() {
        let hs: Vec<History> = (1..=50)
            .map(|k| history(vec![k as f64 * 1000.0, k as f64 * 1500.0], 0.0))
            .collect();
        let doubled: Vec<History> = hs
            .iter()
            .map(|h| history(h.assets.iter().map(|a| 2.0 * a).collect(), 0.0))
            .collect();
        let (a, b) = (
            inequality_metrics(&hs).unwrap(),
            inequality_metrics(&doubled).unwrap(),
        );
        assert!((a.assets_ratio_80_20.unwrap() - b.assets_ratio_80_20.unwrap()).abs() < 1e-12);
        assert!((2.0 * a.assets_sd - b.assets_sd).abs() < 1e-6);
        for (x, y) in a.assets_cov.iter().zip(&b.assets_cov) {
            assert!((x.unwrap() - y.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_earnings_are_counted_separately() {
        let mut hs: Vec<History> = (0..4)
            .map(|k| history(vec![1.0; 20], 1000.0 * (k + 1) as f64))
            .collect();
        hs.push(history(vec![1.0; 20], 0.0));
        let t = inequality_metrics(&hs).unwrap();
        assert!((t.zero_earnings_share - 0.2).abs() < 1e-12);
        assert!(t.earnings_log_sd.is_some());
        assert!(inequality_metrics(&[]).is_err());
    }
}
