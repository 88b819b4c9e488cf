//! Branching random walks with beam-width selection.
//!
//! The crate has three layers:
//!
//! * [`special_fns`], [`profiles`] and [`theory`]: Airy functions, the Ψ
//!   functional, piecewise-polynomial profiles and the asymptotic predictions
//!   for the maximal displacement of N-BBM / N-BRW in every selection regime.
//! * [`simulator`] and [`crem`]: Monte Carlo engines (occupancy-count lattice
//!   and real-valued populations) and the N-CREM beam search.
//! * [`measure`], [`rng`] and [`stats`]: shared plumbing.

pub mod crem;
pub mod error;
pub mod measure;
pub mod profiles;
pub mod rng;
pub mod simulator;
pub mod special_fns;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
