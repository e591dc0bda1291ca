//! Link-level simulation of a TDD massive-MIMO OFDM system.

pub mod bs;
pub mod channel;
pub mod config;
pub mod dataflow;
pub mod error;
pub mod numerics;
pub mod phy;
pub mod seed;
pub mod sim;
pub mod ue;

#[cfg(test)]
mod testutil;

pub use config::{CalibrationMode, Modulation, SymbolRole, SystemConfig};
pub use error::{Error, Result};
