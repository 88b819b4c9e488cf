use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Regime, RegimeSpec, Selection};
use crate::error::{precondition, Result};
use crate::profiles::{integrate_with_breaks, ProfileFn};
use crate::special_fns::psi;

/// Lower and upper killing curves sampled on [0, T].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierPair {
    pub h: f64,
    pub x: f64,
    pub times: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BarrierPair {
    /// Curves at −∞ and +∞ that never kill anything.
    pub fn inactive(horizon: f64) -> BarrierPair {
        BarrierPair {
            h: f64::INFINITY,
            x: f64::INFINITY,
            times: vec![0.0, horizon],
            lower: vec![f64::NEG_INFINITY; 2],
            upper: vec![f64::INFINITY; 2],
        }
    }

    pub fn is_inactive(&self) -> bool {
        self.lower.iter().all(|v| *v == f64::NEG_INFINITY) && self.upper.iter().all(|v| *v == f64::INFINITY)
    }

    /// (lower, upper) at time t by linear interpolation between samples;
    /// constant extrapolation outside [0, T].
    pub fn at(&self, t: f64) -> (f64, f64) {
        let n = self.times.len();
        if t <= self.times[0] {
            return (self.lower[0], self.upper[0]);
        }
        if t >= self.times[n - 1] {
            return (self.lower[n - 1], self.upper[n - 1]);
        }
        let i = self.times.partition_point(|&s| s <= t) - 1;
        let w = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        let lerp = |v: &[f64]| {
            if v[i].is_infinite() {
                v[i]
            } else {
                v[i] + w * (v[i + 1] - v[i])
            }
        };
        (lerp(&self.lower), lerp(&self.upper))
    }

    /// σ(t/T)·L(T), recovered from the gap between the curves.
    pub fn scale_at(&self, t: f64) -> f64 {
        let (lo, hi) = self.at(t);
        (hi - lo) / self.h
    }
}

/// The barrier pair with lower curve
///
/// * sup:  v(r)T + hL∫_0^r (σ')⁻ − xσ(0)L
/// * sub:  v(r)T·√(1 − π²/(h²L²)) − xσ(0)L
/// * crit: v(r)T − w_{h,T}(r)L − xσ(0)L, w(r) = −∫_0^r σ/(α³h²)·Ψ(α³h³σ'/σ)
///
/// with r = t/T, and upper = lower + hσ(r)L.
pub fn barrier_curves<P: ProfileFn + ?Sized>(
    spec: &RegimeSpec,
    sigma: &P,
    h: f64,
    x: f64,
    samples: usize,
) -> Result<BarrierPair> {
    if !(h > x && x > 0.0 && h.is_finite()) {
        return Err(precondition(format!("barriers need h > x > 0, got h = {h}, x = {x}")));
    }
    if samples < 2 {
        return Err(precondition("barriers need at least 2 samples"));
    }
    if matches!(spec.selection, Selection::Schedule { .. }) {
        return Err(precondition("barriers are defined for a fixed L(T) only"));
    }
    let t_end = spec.horizon;
    let l = spec.log_population();
    let alpha = spec.alpha();
    let sigma0 = sigma.value(0.0);
    let kinks = sigma.kinks();
    let sub_factor = match spec.regime {
        Regime::Sub => {
            let d = 1.0 - PI * PI / (h * h * l * l);
            if d <= 0.0 {
                return Err(precondition(format!("sub barriers need h·L > π, got h·L = {}", h * l)));
            }
            d.sqrt()
        }
        Regime::SupD => return Err(precondition("no barrier pair is defined for the sup-d regime")),
        _ => 1.0,
    };
    let drift = |u: f64| -> Result<f64> {
        match spec.regime {
            Regime::Sup => Ok(h * l * (-sigma.slope(u)).max(0.0)),
            Regime::Crit => {
                let s = sigma.value(u);
                let q = alpha.powi(3) * h.powi(3) * sigma.slope(u) / s;
                Ok(l * s / (alpha.powi(3) * h * h) * psi(q)?)
            }
            _ => Ok(0.0),
        }
    };
    let mut times = Vec::with_capacity(samples);
    let mut lower = Vec::with_capacity(samples);
    let mut upper = Vec::with_capacity(samples);
    let mut v = 0.0;
    let mut extra = 0.0;
    let mut prev_r = 0.0;
    for k in 0..samples {
        let r = k as f64 / (samples - 1) as f64;
        if k > 0 {
            v += integrate_with_breaks(|u| sigma.value(u), prev_r, r, 1e-13, &kinks)?;
            if spec.regime != Regime::Sub {
                let mut err = None;
                let piece = integrate_with_breaks(
                    |u| match drift(u) {
                        Ok(d) => d,
                        Err(e) => {
                            err = Some(e);
                            f64::NAN
                        }
                    },
                    prev_r,
                    r,
                    1e-11 * l.max(1.0),
                    &kinks,
                );
                if let Some(e) = err {
                    return Err(e);
                }
                extra += piece?;
            }
        }
        prev_r = r;
        let lo = v * t_end * sub_factor + extra - x * sigma0 * l;
        times.push(r * t_end);
        lower.push(lo);
        upper.push(lo + h * sigma.value(r) * l);
    }
    Ok(BarrierPair { h, x, times, lower, upper })
}
