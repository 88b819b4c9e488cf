use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{integrate_profile_terms, prediction_b, PredictionReport, PsiCounter, Regime, RegimeSpec, Selection};
use crate::error::{precondition, Result};
use crate::profiles::{Profile, ProfileFn};
use crate::special_fns::airy_largest_zero;

/// v_s, θ_s and σ_s² of a BRW generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedTriple {
    pub v: f64,
    pub theta: f64,
    pub sigma2: f64,
}

/// Offspring count distribution, a finite law on {2, 3, ...}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffspringLaw {
    outcomes: Vec<(u32, f64)>,
}

impl OffspringLaw {
    pub fn fixed(k: u32) -> Result<OffspringLaw> {
        OffspringLaw::new(vec![(k, 1.0)])
    }

    pub fn new(outcomes: Vec<(u32, f64)>) -> Result<OffspringLaw> {
        if outcomes.is_empty() {
            return Err(precondition("offspring law needs at least one outcome"));
        }
        if outcomes.iter().any(|&(k, p)| k < 2 || !(p >= 0.0)) {
            return Err(precondition("offspring counts must be >= 2 with nonnegative probabilities"));
        }
        let total: f64 = outcomes.iter().map(|o| o.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(precondition(format!("offspring probabilities sum to {total}, not 1")));
        }
        Ok(OffspringLaw { outcomes })
    }

    pub fn mean(&self) -> f64 {
        self.outcomes.iter().map(|&(k, p)| k as f64 * p).sum()
    }

    /// The count when the law is a point mass.
    pub fn as_fixed(&self) -> Option<u32> {
        match self.outcomes.as_slice() {
            [(k, _)] => Some(*k),
            _ => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        if let Some(k) = self.as_fixed() {
            return k;
        }
        let mut u: f64 = rng.random();
        for &(k, p) in &self.outcomes {
            if u < p {
                return k;
            }
            u -= p;
        }
        self.outcomes.last().unwrap().0
    }

    pub fn outcomes(&self) -> &[(u32, f64)] {
        &self.outcomes
    }

    pub fn max_count(&self) -> u32 {
        self.outcomes.iter().map(|o| o.0).max().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Increment {
    /// Steps of +1 with probability p(s), 0 otherwise.
    Bernoulli(Profile),
    /// Centered Gaussian steps with standard deviation σ(s).
    Gaussian(Profile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrwSpec {
    pub increment: Increment,
    pub offspring: OffspringLaw,
}

impl BrwSpec {
    pub fn new(increment: Increment, offspring: OffspringLaw) -> Result<BrwSpec> {
        let m = offspring.mean();
        match &increment {
            Increment::Bernoulli(p) => {
                if !(p.lower_bound() > 0.0 && p.upper_bound() < 1.0) {
                    return Err(precondition("Bernoulli parameter must stay inside (0,1)"));
                }
                if m * p.upper_bound() >= 1.0 {
                    return Err(precondition(format!(
                        "speed undefined: m·p reaches {} >= 1",
                        m * p.upper_bound()
                    )));
                }
            }
            Increment::Gaussian(s) => s.require_positive("Gaussian increment sigma")?,
        }
        Ok(BrwSpec { increment, offspring })
    }

    pub fn triple(&self, s: f64) -> Result<SpeedTriple> {
        let m = self.offspring.mean();
        match &self.increment {
            Increment::Bernoulli(p) => bernoulli_triple(p.value(s), m),
            Increment::Gaussian(sigma) => gaussian_triple(sigma.value(s), m),
        }
    }

    fn profile(&self) -> &Profile {
        match &self.increment {
            Increment::Bernoulli(p) | Increment::Gaussian(p) => p,
        }
    }
}

/// κ*(v) = −log m + (1−v)·log((1−v)/(1−p)) + v·log(v/p).
pub fn bernoulli_kappa_star(v: f64, p: f64, m: f64) -> f64 {
    let xlogx = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    -m.ln() + xlogx(1.0 - v, 1.0 - p) + xlogx(v, p)
}

/// Speed, tilt and variance of the Bernoulli BRW with mean offspring m.
pub fn bernoulli_triple(p: f64, m: f64) -> Result<SpeedTriple> {
    if !(p > 0.0 && p < 1.0) {
        return Err(precondition(format!("Bernoulli parameter must be in (0,1), got {p}")));
    }
    if !(m >= 1.0) {
        return Err(precondition(format!("mean offspring must be >= 1, got {m}")));
    }
    if m * p >= 1.0 {
        return Err(precondition(format!("speed undefined for m·p = {} >= 1", m * p)));
    }
    // κ* increases on (p, 1) from −log m to log(1/(mp)) > 0.
    let (mut lo, mut hi) = (p, 1.0);
    while hi - lo > 1e-15 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if bernoulli_kappa_star(mid, p, m) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let v = 0.5 * (lo + hi);
    Ok(SpeedTriple { v, theta: ((1.0 - p) * v / ((1.0 - v) * p)).ln(), sigma2: v * (1.0 - v) })
}

/// v = σ√(2 log m), θ = √(2 log m)/σ.
pub fn gaussian_triple(sigma: f64, m: f64) -> Result<SpeedTriple> {
    if !(sigma > 0.0) {
        return Err(precondition(format!("sigma must be positive, got {sigma}")));
    }
    if !(m > 1.0) {
        return Err(precondition(format!("mean offspring must exceed 1, got {m}")));
    }
    let c = (2.0 * m.ln()).sqrt();
    Ok(SpeedTriple { v: sigma * c, theta: c / sigma, sigma2: sigma * sigma })
}

const THETA_DOT_STEP: f64 = 1e-5;

fn theta_dot(brw: &BrwSpec, s: f64) -> Result<f64> {
    let h = THETA_DOT_STEP;
    let th = |u: f64| brw.triple(u).map(|t| t.theta);
    if s - h < 0.0 {
        Ok((-3.0 * th(s)? + 4.0 * th(s + h)? - th(s + 2.0 * h)?) / (2.0 * h))
    } else if s + h > 1.0 {
        Ok((3.0 * th(s)? - 4.0 * th(s - h)? + th(s - 2.0 * h)?) / (2.0 * h))
    } else {
        Ok((th(s + h)? - th(s - h)?) / (2.0 * h))
    }
}

/// Predicted max of the N-BRW started from δ₀, for a general increment law.
///
/// The first order is T·∫v_s ds; the correction depends on the regime through
/// θ_s, σ_s² and the derivative θ̇_s (centered differences of s ↦ θ_s).
pub fn conjecture_prediction(brw: &BrwSpec, spec: &RegimeSpec) -> Result<PredictionReport> {
    if matches!(spec.selection, Selection::Schedule { .. }) {
        return Err(precondition("the BRW prediction is stated for a fixed L(T)"));
    }
    for i in 0..=100 {
        brw.triple(i as f64 / 100.0)?;
    }
    let t = spec.horizon;
    let l = spec.log_population();
    let shape = brw.profile();
    let v_nat = integrate_profile_terms(shape, |s| Ok(brw.triple(s)?.v))?;
    let mut details = BTreeMap::new();
    details.insert("v_nat".into(), v_nat);
    let second = match spec.regime {
        Regime::Sub => {
            let j = integrate_profile_terms(shape, |s| {
                let tr = brw.triple(s)?;
                Ok(tr.theta * tr.sigma2)
            })?;
            details.insert("theta_sigma2".into(), j);
            -PI * PI / 2.0 * j * t / (l * l)
        }
        Regime::Crit => {
            let alpha = spec.alpha();
            let counter = PsiCounter::new();
            let i = integrate_profile_terms(shape, |s| {
                let tr = brw.triple(s)?;
                let q = alpha.powi(3) * theta_dot(brw, s)? / (tr.theta.powi(3) * tr.sigma2);
                Ok(tr.theta * tr.sigma2 / (alpha * alpha) * counter.eval(q)?)
            })?;
            counter.report(&mut details);
            details.insert("crit".into(), i);
            t.cbrt() * i
        }
        Regime::Sup => {
            let j = integrate_profile_terms(shape, |s| {
                let tr = brw.triple(s)?;
                Ok((-theta_dot(brw, s)?).max(0.0) / (tr.theta * tr.theta))
            })?;
            details.insert("theta_dot_minus".into(), j);
            l * j
        }
        Regime::SupD => {
            for i in 0..=200 {
                let s = i as f64 / 200.0;
                if theta_dot(brw, s)? < -1e-9 {
                    return Err(precondition(format!("sup-d needs a nondecreasing theta_s; its derivative is negative at s = {s}")));
                }
            }
            let k = integrate_profile_terms(shape, |s| {
                let tr = brw.triple(s)?;
                Ok((theta_dot(brw, s)?.max(0.0) * tr.sigma2.sqrt()).powf(2.0 / 3.0) / tr.theta)
            })?;
            details.insert("sup_d".into(), k);
            -airy_largest_zero() / 2f64.cbrt() * t.cbrt() * k
        }
    };
    Ok(PredictionReport {
        regime: spec.regime,
        horizon: t,
        l_or_alpha: spec.l_or_alpha(),
        v1t: v_nat * t,
        second_order: second,
        m: v_nat * t + second,
        b: prediction_b(spec),
        details,
    })
}
