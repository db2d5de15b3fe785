//! Metasurface phase design.

pub mod cvae;
pub mod hgpso;
pub mod lbl;

pub use lbl::{align_layer, lbl_ipso, partial_products, predicted_cost, LblTrace, PartialProducts};
