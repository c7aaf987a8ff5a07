pub mod calibration;
pub mod dynamics;
pub mod earnings;
pub mod error;
pub mod health_index;
pub mod matrix;
pub mod model;
pub mod mortality;
pub mod optim;
pub mod panel;
pub mod rng;
pub mod sim;
pub mod smm;
pub mod stats;
pub mod wealth;

pub use error::{Error, Result};
