pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod hpx;
pub mod metrics;
pub mod model;
pub mod rollout;
pub mod run;
pub mod train;
pub mod window;

pub use error::{Error, Result};
