//! Simulation and analysis core for entanglement-based quantum key
//! distribution multiplexed over opposite cores of a 19-core fiber.
//!
//! The crate is `no_std` (it needs `alloc`). Everything touching files,
//! threads or the command line lives in the `mcfqkd` companion crate.
//!
//! Pipeline, bottom-up:
//!
//! * [`math`]: binary entropy, visibility, QBER and the secret key rate.
//! * [`geometry`]: hexagonal core layout, opposite-core pairs and
//!   temperature-tuned coupling of the emission annulus into the cores.
//! * [`sim`]: Monte Carlo timetag generation for the distributed pairs.
//! * [`coincidence`]: cross-correlation, windowed coincidence matching and
//!   accidental estimation over timetag streams.
//! * [`runner`]: basis scans, stability runs and ring-level reports.
//! * [`link`]: key rate versus fiber length and the maximum positive length.
#![no_std]
// `!(x > 0.0)` is deliberate throughout: it rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod coincidence;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod link;
pub mod math;
mod quad;
pub mod runner;
pub mod sim;

pub use error::{Error, Result};
