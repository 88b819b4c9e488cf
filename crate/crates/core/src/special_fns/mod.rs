//! Airy functions, the largest zero of Ai and the Ψ functional.

mod airy;
mod psi;

pub use airy::{airy_largest_zero, airy_pair, airy_scaled, AiryValue};
pub use psi::{psi, PSI_ACCURATE_RANGE};
