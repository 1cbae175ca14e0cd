pub mod akf;
pub mod attitude;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod icp;
pub mod io;
pub mod lindisc;
pub mod mockup;
pub mod report;
pub mod sim;

pub use error::{Error, Result};
