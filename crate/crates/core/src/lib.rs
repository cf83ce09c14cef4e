//! Remote photoplethysmography (rPPG) pulse-rate and HRV extraction.

pub mod error;
pub mod beats;
pub mod enhance;
pub mod evaluate;
pub mod extract;
pub mod io;
pub mod par;
pub mod pipeline;
pub mod plot;
pub mod quality;
pub mod roi;
pub mod signal;
pub mod synth;

pub use error::{Error, Result};
