pub mod canonical;
pub mod discrete;
pub mod generator;
pub mod quantile;
pub mod shocks;
