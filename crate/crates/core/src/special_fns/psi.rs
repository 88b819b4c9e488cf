use std::f64::consts::PI;

use super::airy::{airy_pair, airy_scaled};
use crate::error::{domain, numerical, Result};

/// |q| up to which [`psi`] meets its 1e-7 accuracy target. Beyond it the
/// value is still computed but the root sits far out in the Airy tails.
pub const PSI_ACCURATE_RANGE: f64 = 1e3;

const SMALL_Q: f64 = 1e-6;
const ROOT_TOL: f64 = 1e-12;

/// Ψ(q), defined through the largest λ ≤ 0 solving
/// Ai(λ)Bi(λ+c) = Ai(λ+c)Bi(λ) with c = (2q)^{1/3}.
///
/// For q > 0 the value is q^{2/3}·λ*/2^{1/3}; Ψ(0) = −π²/2 and negative
/// arguments go through Ψ(−q) = q + Ψ(q).
pub fn psi(q: f64) -> Result<f64> {
    if !q.is_finite() {
        return Err(domain(format!("psi: non-finite argument {q}")));
    }
    if q < 0.0 {
        return Ok(-q + psi(-q)?);
    }
    if q < SMALL_Q {
        return Ok(-PI * PI / 2.0);
    }
    let c = (2.0 * q).cbrt();
    let lambda = largest_root(c)?;
    Ok(q.powf(2.0 / 3.0) / 2f64.cbrt() * lambda)
}

/// Sign-preserving version of F(λ) = Ai(λ)Bi(λ+c) − Ai(λ+c)Bi(λ) for λ ≤ 0.
///
/// When λ + c > 0 the value is divided by Bi(λ+c) > 0 so that large c does
/// not overflow.
fn crossing(lambda: f64, c: f64) -> Result<f64> {
    let here = airy_pair(lambda)?;
    let x = lambda + c;
    if x <= 0.0 {
        let there = airy_pair(x)?;
        return Ok(here.ai * there.bi - there.ai * here.bi);
    }
    let s = airy_scaled(x)?;
    let zeta = 2.0 / 3.0 * x * x.sqrt();
    let ratio = s.ai / s.bi * (-2.0 * zeta).exp();
    Ok(here.ai - ratio * here.bi)
}

fn largest_root(c: f64) -> Result<f64> {
    let f0 = crossing(0.0, c)?;
    if f0 <= 0.0 {
        return Err(numerical(format!("psi: F(0) = {f0:e} is not positive for c = {c}")));
    }
    let mut hi = 0.0_f64;
    loop {
        // The root moves like −π²/c² as c → 0, so the scan step grows with |λ|.
        let step = (0.005 * hi.abs()).max(0.05);
        let lo = hi - step;
        if lo < -1e9 {
            return Err(numerical(format!("psi: no sign change of F above λ = {lo:e} (c = {c})")));
        }
        if crossing(lo, c)? <= 0.0 {
            return bisect(lo, hi, c);
        }
        hi = lo;
    }
}

fn bisect(mut lo: f64, mut hi: f64, c: f64) -> Result<f64> {
    while hi - lo > ROOT_TOL * hi.abs().max(1.0) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if crossing(mid, c)? <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
