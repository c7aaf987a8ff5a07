//! Distribution of two-year health changes by age and prior health.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::stats::{central_moments, quantile_sorted, sorted_copy};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgedObs {
    pub person: u64,
    pub age: u32,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShockCell {
    pub age_band: (u32, u32),
    /// 1-based decile of prior health.
    pub decile: usize,
    pub count: usize,
    /// `None` when the cell is below the minimum count.
    pub variance: Option<f64>,
    pub skewness: Option<f64>,
    pub kurtosis: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShockMomentsTable {
    pub cells: Vec<ShockCell>,
}

impl ShockMomentsTable {
    pub fn cell(&self, band: (u32, u32), decile: usize) -> Option<&ShockCell> {
        self.cells
            .iter()
            .find(|c| c.age_band == band && c.decile == decile)
    }
}

/// Moments of `h_t − h_{t−2}` by age band of `t` and decile of `h_{t−2}`.
/// Deciles are computed within each band.
pub fn shock_moments(
    obs: &[AgedObs],
    bands: &[(u32, u32)],
    min_count: usize,
) -> Result<ShockMomentsTable> {
    let mut by_person: BTreeMap<u64, BTreeMap<u32, f64>> = BTreeMap::new();
    for o in obs {
        by_person
            .entry(o.person)
            .or_default()
            .insert(o.age, o.value);
    }
    let mut pairs: Vec<(u32, f64, f64)> = Vec::new();
    for ages in by_person.values() {
        for (&age, &h) in ages {
            if let Some(&prev) = age.checked_sub(2).and_then(|a| ages.get(&a)) {
                pairs.push((age, prev, h - prev));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty(
            "no person has two observations two years apart".into(),
        ));
    }
    let mut cells = Vec::new();
    for &band in bands {
        let in_band: Vec<&(u32, f64, f64)> = pairs
            .iter()
            .filter(|p| p.0 >= band.0 && p.0 <= band.1)
            .collect();
        let prev_sorted = sorted_copy(&in_band.iter().map(|p| p.1).collect::<Vec<_>>());
        let cuts: Vec<f64> = if prev_sorted.is_empty() {
            Vec::new()
        } else {
            (1..10)
                .map(|k| quantile_sorted(&prev_sorted, k as f64 / 10.0))
                .collect()
        };
        let mut groups: Vec<Vec<f64>> = vec![Vec::new(); 10];
        for p in &in_band {
            let d = cuts.iter().filter(|c| p.1 > **c).count();
            groups[d].push(p.2);
        }
        for (d, g) in groups.iter().enumerate() {
            let enough = g.len() >= min_count.max(2);
            let (_, var, skew, kurt) = if enough {
                central_moments(g)
            } else {
                (0.0, 0.0, 0.0, 0.0)
            };
            let (skew, kurt) = if var > 0.0 { (skew, kurt) } else { (0.0, 1.0) };
            cells.push(ShockCell {
                age_band: band,
                decile: d + 1,
                count: g.len(),
                variance: enough.then_some(var),
                skewness: enough.then_some(skew),
                kurtosis: enough.then_some(kurt),
            });
        }
    }
    Ok(ShockMomentsTable { cells })
}
