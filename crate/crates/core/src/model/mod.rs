//! Life-cycle model of saving, work and health.

pub mod params;
pub mod solver;

use serde::{Deserialize, Serialize};

use crate::dynamics::discrete::DiscreteHealthProcess;
use crate::earnings::EarningsProcess;
use crate::error::{Error, Result};
use crate::mortality::MortalityTable;
use crate::stats::weighted_quantile;

pub use params::ModelParams;

/// Continuous state grids and the hours choice set. Wage and health nodes
/// come from their processes.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid {
    pub ages: Vec<u32>,
    pub assets: Vec<f64>,
    pub pension: Vec<f64>,
    pub hours: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub first_age: u32,
    pub last_age: u32,
    pub n_assets: usize,
    pub asset_max: f64,
    /// Exponent of the power spacing; larger values crowd points near zero.
    pub asset_curvature: f64,
    pub n_pension: usize,
    pub pension_max: f64,
    pub hours: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            first_age: 50,
            last_age: 85,
            n_assets: 30,
            asset_max: 1_000_000.0,
            asset_curvature: 2.5,
            n_pension: 6,
            pension_max: 60_000.0,
            hours: vec![0.0, 500.0, 1000.0, 1500.0, 2000.0, 2500.0],
        }
    }
}

fn power_grid(n: usize, max: f64, curvature: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|k| max * (k as f64 / (n - 1) as f64).powf(curvature))
        .collect()
}

impl GridSpec {
    pub fn build(&self) -> Result<StateGrid> {
        if self.n_assets < 2 || self.n_pension < 1 || self.last_age <= self.first_age {
            return Err(Error::Config(
                "grids need at least two asset points and two ages".into(),
            ));
        }
        if !(self.asset_max > 0.0) || !(self.asset_curvature > 0.0) || !(self.pension_max >= 0.0) {
            return Err(Error::Config("grid bounds must be positive".into()));
        }
        let grid = StateGrid {
            ages: (self.first_age..=self.last_age).collect(),
            assets: power_grid(self.n_assets, self.asset_max, self.asset_curvature),
            pension: power_grid(self.n_pension, self.pension_max, 1.0),
            hours: self.hours.clone(),
        };
        grid.validate()?;
        Ok(grid)
    }
}

impl StateGrid {
    pub fn validate(&self) -> Result<()> {
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if self.assets.first() != Some(&0.0) || !increasing(&self.assets) {
            return Err(Error::Config(
                "asset grid must start at 0 and increase strictly".into(),
            ));
        }
        if self.pension.is_empty() || !increasing(&self.pension) || self.pension[0] < 0.0 {
            return Err(Error::Config(
                "pension grid must be non-negative and increasing".into(),
            ));
        }
        if self.hours.first() != Some(&0.0) || !increasing(&self.hours) {
            return Err(Error::Config(
                "hours choices must start at 0 and increase strictly".into(),
            ));
        }
        if self.ages.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Config("model ages must be consecutive".into()));
        }
        Ok(())
    }
}

/// Lower bracket index and weight on the upper point; clamps outside the
/// grid and reports it.
pub fn bracket(grid: &[f64], x: f64) -> (usize, f64, bool) {
    let n = grid.len();
    if n == 1 {
        return (0, 0.0, x != grid[0]);
    }
    if x <= grid[0] {
        return (0, 0.0, x < grid[0]);
    }
    if x >= grid[n - 1] {
        return (n - 2, 1.0, x > grid[n - 1]);
    }
    let hi = grid.partition_point(|g| *g <= x);
    let lo = hi - 1;
    (lo, (x - grid[lo]) / (grid[hi] - grid[lo]), false)
}

/// Health value fed to a channel in place of own health, by model age.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Channels {
    pub mortality: Option<Vec<f64>>,
    pub time_cost: Option<Vec<f64>>,
    pub wages: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Channel {
    Mortality,
    TimeCost,
    Wages,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Mortality, Channel::TimeCost, Channel::Wages];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Mortality => "mortality",
            Channel::TimeCost => "time_cost",
            Channel::Wages => "wages",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown channel '{s}' (expected mortality, time_cost or wages)"
                ))
            })
    }
}

/// Everything the solver and simulator need.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ModelParams,
    pub grid: StateGrid,
    /// Annual health process over the model ages.
    pub health: DiscreteHealthProcess,
    /// Earnings process with an annual wage chain.
    pub earnings: EarningsProcess,
    pub mortality: MortalityTable,
    pub channels: Channels,
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.grid.validate()?;
        self.health.validate()?;
        if self.health.step_years != 1 {
            return Err(Error::Misaligned(
                "health process must be on annual steps".into(),
            ));
        }
        if self.health.ages != self.grid.ages {
            return Err(Error::Misaligned(format!(
                "health process covers ages {:?}..{:?} but the model needs {}..{}",
                self.health.ages.first(),
                self.health.ages.last(),
                self.grid.ages[0],
                self.grid.ages[self.grid.ages.len() - 1]
            )));
        }
        if self.mortality.ages != self.grid.ages {
            return Err(Error::Misaligned(
                "mortality table ages differ from model ages".into(),
            ));
        }
        if self.earnings.chain.is_empty() {
            return Err(Error::Misaligned("wage chain has no nodes".into()));
        }
        for (name, v) in [
            ("mortality", &self.channels.mortality),
            ("time_cost", &self.channels.time_cost),
            ("wages", &self.channels.wages),
        ] {
            if let Some(v) = v {
                if v.len() != self.grid.ages.len() {
                    return Err(Error::Misaligned(format!(
                        "{name} channel override must cover every model age"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_ages(&self) -> usize {
        self.grid.ages.len()
    }

    /// Health value entering the given channel at age index `t`.
    #[inline]
    pub fn channel_health(&self, channel: Channel, t: usize, own: f64) -> f64 {
        let o = match channel {
            Channel::Mortality => &self.channels.mortality,
            Channel::TimeCost => &self.channels.time_cost,
            Channel::Wages => &self.channels.wages,
        };
        o.as_ref().map_or(own, |v| v[t])
    }

    /// `p`-quantile of health at each model age under the no-mortality
    /// marginal of the persistent component.
    pub fn health_percentile(&self, p: f64) -> Vec<f64> {
        let marg = self.health.marginals();
        (0..self.n_ages())
            .map(|t| {
                let (v, w) = self.health.health_distribution(t, &marg[t]);
                weighted_quantile(&v, &w, p)
            })
            .collect()
    }

    /// Copy with the listed channels fixed at the `p`-quantile of health.
    pub fn with_channels_at(&self, channels: &[Channel], p: f64) -> Result<Model> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidInput(format!(
                "percentile must lie in (0, 1), got {p}"
            )));
        }
        let level = self.health_percentile(p);
        let mut m = self.clone();
        for c in channels {
            let slot = match c {
                Channel::Mortality => &mut m.channels.mortality,
                Channel::TimeCost => &mut m.channels.time_cost,
                Channel::Wages => &mut m.channels.wages,
            };
            *slot = Some(level.clone());
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_shape() {
        let g = GridSpec::default().build().unwrap();
        assert_eq!(g.assets.len(), 30);
        assert_eq!(g.assets[0], 0.0);
        assert_eq!(g.pension.len(), 6);
        assert_eq!(g.ages.len(), 36);
        assert_eq!(g.hours, vec![0.0, 500.0, 1000.0, 1500.0, 2000.0, 2500.0]);
    }

    #[test]
    fn bracket_cases() {
        let g = [0.0, 1.0, 3.0];
        assert_eq!(bracket(&g, 0.0), (0, 0.0, false));
        assert_eq!(bracket(&g, 1.0), (1, 0.0, false));
        assert_eq!(bracket(&g, 3.0), (1, 1.0, false));
        assert_eq!(bracket(&g, 2.0), (1, 0.5, false));
        assert_eq!(bracket(&g, 5.0), (1, 1.0, true));
        assert_eq!(bracket(&g, -1.0), (0, 0.0, true));
        assert_eq!(bracket(&[2.0], 2.0), (0, 0.0, false));
    }

    #[test]
    fn unknown_channel_is_rejected() {
        assert!(Channel::parse("wages").is_ok());
        assert!(Channel::parse("leisure").is_err());
    }
}
