//! Joint placement, association and metasurface phase design for UAVs that
//! carry stacked intelligent metasurfaces.

pub mod ao;
pub mod association;
pub mod bench;
pub mod channel;
pub mod config;
pub mod dataset;
pub mod energy;
pub mod error;
pub mod experiment;
pub mod phase;
pub mod placement;
pub mod scenario;
pub mod seed;

pub use error::{Error, Result};
