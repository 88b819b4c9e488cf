//! Asymptotic predictions for the maximal displacement of N-BBM / N-BRW.
//!
//! Every prediction has the form `m = v(1)·T + second_order`, with an error
//! scale `b` that depends on the selection regime.

mod barriers;
mod legendre;

use std::cell::Cell;
use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use barriers::{barrier_curves, BarrierPair};
pub use legendre::{
    bernoulli_kappa_star, bernoulli_triple, conjecture_prediction, gaussian_triple, BrwSpec, Increment,
    OffspringLaw, SpeedTriple,
};

use crate::error::{domain, precondition, Error, Result};
use crate::measure::ParticleConfiguration;
use crate::profiles::{integrate_with_breaks, Profile, ProfileFn};
use crate::special_fns::{airy_largest_zero, psi, PSI_ACCURATE_RANGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "sub")]
    Sub,
    #[serde(rename = "crit")]
    Crit,
    #[serde(rename = "sup")]
    Sup,
    #[serde(rename = "sup-d")]
    SupD,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Sub => "sub",
            Regime::Crit => "crit",
            Regime::Sup => "sup",
            Regime::SupD => "sup-d",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Regime> {
        match s {
            "sub" => Ok(Regime::Sub),
            "crit" => Ok(Regime::Crit),
            "sup" => Ok(Regime::Sup),
            "sup-d" | "sup_d" => Ok(Regime::SupD),
            _ => Err(precondition(format!("unknown regime '{s}' (expected sub, crit, sup or sup-d)"))),
        }
    }
}

/// How the log-population L(T) = log N(T) is specified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    FixedL(f64),
    /// L(T) = α·T^{1/3}.
    CriticalAlpha(f64),
    /// L(s, T) = ℓ(s/T)·L̂(T).
    Schedule { hat_l: f64, ell: Profile },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub horizon: f64,
    pub selection: Selection,
    pub regime: Regime,
}

impl RegimeSpec {
    pub fn new(horizon: f64, selection: Selection, regime: Regime) -> Result<RegimeSpec> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(precondition(format!("horizon T must be positive and finite, got {horizon}")));
        }
        match &selection {
            Selection::FixedL(l) if !(*l > 0.0 && l.is_finite()) => {
                return Err(precondition(format!("L(T) must be positive, got {l}")));
            }
            Selection::CriticalAlpha(a) if !(*a > 0.0 && a.is_finite()) => {
                return Err(precondition(format!("alpha must be positive, got {a}")));
            }
            Selection::Schedule { hat_l, ell } => {
                if !(*hat_l > 0.0 && hat_l.is_finite()) {
                    return Err(precondition(format!("hat L must be positive, got {hat_l}")));
                }
                ell.require_positive("selection profile ell")?;
            }
            _ => {}
        }
        Ok(RegimeSpec { horizon, selection, regime })
    }

    /// L(T); for a schedule this is L̂(T).
    pub fn log_population(&self) -> f64 {
        match &self.selection {
            Selection::FixedL(l) => *l,
            Selection::CriticalAlpha(a) => a * self.horizon.cbrt(),
            Selection::Schedule { hat_l, .. } => *hat_l,
        }
    }

    /// L(T)/T^{1/3}.
    pub fn alpha(&self) -> f64 {
        match &self.selection {
            Selection::CriticalAlpha(a) => *a,
            _ => self.log_population() / self.horizon.cbrt(),
        }
    }

    /// The value reported as `L_or_alpha`: α in the critical regime, L(T) otherwise.
    pub fn l_or_alpha(&self) -> f64 {
        if self.regime == Regime::Crit {
            self.alpha()
        } else {
            self.log_population()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub regime: Regime,
    pub horizon: f64,
    pub l_or_alpha: f64,
    pub v1t: f64,
    pub second_order: f64,
    pub m: f64,
    pub b: f64,
    pub details: BTreeMap<String, f64>,
}

impl PredictionReport {
    /// Flat JSON object with keys regime, T, L_or_alpha, v1T, second_order,
    /// m, b and one `integrals.<name>` entry per detail.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("regime".into(), self.regime.to_string().into());
        map.insert("T".into(), json_number(self.horizon));
        map.insert("L_or_alpha".into(), json_number(self.l_or_alpha));
        map.insert("v1T".into(), json_number(self.v1t));
        map.insert("second_order".into(), json_number(self.second_order));
        map.insert("m".into(), json_number(self.m));
        map.insert("b".into(), json_number(self.b));
        for (k, v) in &self.details {
            map.insert(format!("integrals.{k}"), json_number(*v));
        }
        serde_json::Value::Object(map)
    }

    fn new(spec: &RegimeSpec, v1t: f64, second_order: f64, details: BTreeMap<String, f64>) -> PredictionReport {
        PredictionReport {
            regime: spec.regime,
            horizon: spec.horizon,
            l_or_alpha: spec.l_or_alpha(),
            v1t,
            second_order,
            m: v1t + second_order,
            b: prediction_b(spec),
            details,
        }
    }
}

fn json_number(x: f64) -> serde_json::Value {
    serde_json::Number::from_f64(x).map(serde_json::Value::Number).unwrap_or(serde_json::Value::Null)
}

/// Error scale b_T: L(T) (sup), T^{1/3} (crit, sup-d) or T/L(T)² (sub).
pub fn prediction_b(spec: &RegimeSpec) -> f64 {
    let t = spec.horizon;
    match spec.regime {
        Regime::Sup => spec.log_population(),
        Regime::Crit | Regime::SupD => t.cbrt(),
        Regime::Sub => {
            let l = spec.log_population();
            t / (l * l)
        }
    }
}

/// σ = √A' for a nonnegative profile A'.
pub struct SqrtOf<'a>(pub &'a Profile);

impl ProfileFn for SqrtOf<'_> {
    fn value(&self, u: f64) -> f64 {
        self.0.value(u).max(0.0).sqrt()
    }

    fn slope(&self, u: f64) -> f64 {
        self.0.slope(u) / (2.0 * self.value(u))
    }

    fn kinks(&self) -> Vec<f64> {
        self.0.kinks()
    }
}

/// Integrates u ↦ f(u) over [0,1] for integrands built from σ.
///
/// Segments are cut at the kinks of σ. Where σ vanishes at an end of [0,1]
/// the integrand may blow up like an inverse square root, so that segment is
/// integrated in w with u = end ± len·w².
pub(crate) fn integrate_profile_terms<P, F>(sigma: &P, mut f: F) -> Result<f64>
where
    P: ProfileFn + ?Sized,
    F: FnMut(f64) -> Result<f64>,
{
    let failure: Cell<Option<Error>> = Cell::new(None);
    let mut g = |u: f64| -> f64 {
        match f(u) {
            Ok(v) => v,
            Err(e) => {
                failure.set(Some(e));
                f64::NAN
            }
        }
    };
    let mut cuts = vec![0.0];
    cuts.extend(sigma.kinks().into_iter().filter(|&k| k > 0.0 && k < 1.0));
    cuts.push(1.0);
    let singular_start = sigma.value(0.0) <= 0.0;
    let singular_end = sigma.value(1.0) <= 0.0;
    let scale = (0..=64).map(|i| g(i as f64 / 64.0 * (1.0 - 2e-9) + 1e-9).abs()).fold(1.0, f64::max);
    if let Some(e) = failure.take() {
        return Err(e);
    }
    let tol = 1e-10 * scale;
    let mut total = 0.0;
    let last = cuts.len() - 2;
    for (i, w) in cuts.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let len = b - a;
        let seg_tol = tol * len;
        let part = if i == 0 && singular_start {
            integrate_with_breaks(|s: f64| { let s = s.max(1e-9); g(a + len * s * s) * 2.0 * len * s }, 0.0, 1.0, seg_tol, &[])
        } else if i == last && singular_end {
            integrate_with_breaks(|s: f64| { let s = s.max(1e-9); g(b - len * s * s) * 2.0 * len * s }, 0.0, 1.0, seg_tol, &[])
        } else {
            integrate_with_breaks(&mut g, a, b, seg_tol, &[])
        };
        if let Some(e) = failure.take() {
            return Err(e);
        }
        total += part?;
    }
    Ok(total)
}

/// Ψ with a running count of arguments beyond the accurate range.
struct PsiCounter {
    out_of_range: Cell<usize>,
}

impl PsiCounter {
    fn new() -> PsiCounter {
        PsiCounter { out_of_range: Cell::new(0) }
    }

    fn eval(&self, q: f64) -> Result<f64> {
        if q.abs() > PSI_ACCURATE_RANGE {
            self.out_of_range.set(self.out_of_range.get() + 1);
        }
        psi(q)
    }

    fn report(&self, details: &mut BTreeMap<String, f64>) {
        let n = self.out_of_range.get();
        if n > 0 {
            log::warn!("{n} Psi evaluations had |q| > {PSI_ACCURATE_RANGE}; accuracy there is not guaranteed");
            details.insert("psi_out_of_range_evals".into(), n as f64);
        }
    }
}

fn check_sigma<P: ProfileFn + ?Sized>(sigma: &P, allow_zero_ends: bool) -> Result<()> {
    for i in 0..=200 {
        let u = i as f64 / 200.0;
        let v = sigma.value(u);
        let interior = i > 0 && i < 200;
        if !v.is_finite() || v < 0.0 || (v == 0.0 && (interior || !allow_zero_ends)) {
            return Err(precondition(format!("sigma must be positive on [0,1]; sigma({u}) = {v}")));
        }
    }
    Ok(())
}

/// m_T for N-BBM with infinitesimal variance σ²(·/T) in the given regime.
pub fn prediction_m<P: ProfileFn + ?Sized>(spec: &RegimeSpec, sigma: &P) -> Result<PredictionReport> {
    predict(spec, sigma, false)
}

fn predict<P: ProfileFn + ?Sized>(spec: &RegimeSpec, sigma: &P, allow_zero_ends: bool) -> Result<PredictionReport> {
    check_sigma(sigma, allow_zero_ends)?;
    if matches!(spec.selection, Selection::Schedule { .. }) {
        return prediction_m_inhom_impl(spec, sigma);
    }
    let t = spec.horizon;
    let l = spec.log_population();
    let v1 = integrate_profile_terms(sigma, |u| Ok(sigma.value(u)))?;
    let mut details = BTreeMap::new();
    details.insert("v1".into(), v1);
    let second = match spec.regime {
        Regime::Sub => -v1 * t * PI * PI / (2.0 * l * l),
        Regime::Sup => {
            let j = integrate_profile_terms(sigma, |u| Ok(sigma.slope(u).max(0.0)))?;
            details.insert("sigma_prime_plus".into(), j);
            l * j
        }
        Regime::Crit => {
            let alpha = spec.alpha();
            let counter = PsiCounter::new();
            let i = integrate_profile_terms(sigma, |u| {
                let s = sigma.value(u);
                let q = -alpha.powi(3) * sigma.slope(u) / s;
                Ok(s / (alpha * alpha) * counter.eval(q)?)
            })?;
            counter.report(&mut details);
            details.insert("crit".into(), i);
            t.cbrt() * i
        }
        Regime::SupD => sup_d_correction(spec, sigma, &mut details)?,
    };
    Ok(PredictionReport::new(spec, v1 * t, second, details))
}

fn sup_d_correction<P: ProfileFn + ?Sized>(
    spec: &RegimeSpec,
    sigma: &P,
    details: &mut BTreeMap<String, f64>,
) -> Result<f64> {
    if !is_strictly_decreasing(sigma) {
        return Err(precondition("the sup-d regime needs a strictly decreasing sigma"));
    }
    let k = integrate_profile_terms(sigma, |u| Ok(sigma.value(u).cbrt() * sigma.slope(u).abs().powf(2.0 / 3.0)))?;
    details.insert("sup_d".into(), k);
    Ok(-airy_largest_zero() / 2f64.cbrt() * spec.horizon.cbrt() * k)
}

fn is_strictly_decreasing<P: ProfileFn + ?Sized>(sigma: &P) -> bool {
    let n = 2000;
    let mut prev = sigma.value(0.0);
    for i in 1..=n {
        let v = sigma.value(i as f64 / n as f64);
        if v >= prev {
            return false;
        }
        prev = v;
    }
    let mut cuts = vec![0.0];
    cuts.extend(sigma.kinks());
    cuts.push(1.0);
    // A flat stretch would have zero slope throughout; sampled slopes catch it.
    cuts.windows(2).all(|w| {
        (1..8).any(|k| sigma.slope(w[0] + (w[1] - w[0]) * k as f64 / 8.0) < 0.0)
    })
}

/// m̂_T under the schedule L(s,T) = ℓ(s/T)·L̂(T).
///
/// In the critical regime ℓ plays the role of α when L̂(T) = T^{1/3}; for
/// other L̂ the local parameter is ℓ(u)·L̂(T)/T^{1/3}, so ℓ ≡ 1 reproduces
/// [`prediction_m`] with L = L̂ in every regime.
pub fn prediction_m_inhom<P: ProfileFn + ?Sized>(spec: &RegimeSpec, sigma: &P) -> Result<PredictionReport> {
    if !matches!(spec.selection, Selection::Schedule { .. }) {
        return Err(precondition("prediction_m_inhom needs a (hat L, ell) schedule"));
    }
    check_sigma(sigma, false)?;
    prediction_m_inhom_impl(spec, sigma)
}

fn prediction_m_inhom_impl<P: ProfileFn + ?Sized>(spec: &RegimeSpec, sigma: &P) -> Result<PredictionReport> {
    let Selection::Schedule { hat_l, ell } = &spec.selection else {
        unreachable!("caller checked for a schedule");
    };
    let t = spec.horizon;
    let v1 = integrate_profile_terms(sigma, |u| Ok(sigma.value(u)))?;
    let mut details = BTreeMap::new();
    details.insert("v1".into(), v1);
    let both = Merged(sigma, ell);
    let second = match spec.regime {
        Regime::Sub => {
            let j = integrate_profile_terms(&both, |u| {
                let e = ell.value(u);
                Ok(sigma.value(u) / (e * e))
            })?;
            details.insert("sigma_over_ell2".into(), j);
            -PI * PI * t / (2.0 * hat_l * hat_l) * j
        }
        Regime::Sup => {
            let j = integrate_profile_terms(&both, |u| Ok(ell.value(u) * sigma.slope(u).max(0.0)))?;
            details.insert("ell_sigma_prime_plus".into(), j);
            hat_l * j
        }
        Regime::Crit => {
            let k = hat_l / t.cbrt();
            let counter = PsiCounter::new();
            let i = integrate_profile_terms(&both, |u| {
                let a = k * ell.value(u);
                let s = sigma.value(u);
                Ok(s / (a * a) * counter.eval(-a.powi(3) * sigma.slope(u) / s)?)
            })?;
            counter.report(&mut details);
            details.insert("crit".into(), i);
            t.cbrt() * i
        }
        Regime::SupD => sup_d_correction(spec, sigma, &mut details)?,
    };
    Ok(PredictionReport::new(spec, v1 * t, second, details))
}

/// σ with the kinks of a second profile added, for integrands that mix both.
struct Merged<'a, P: ?Sized>(&'a P, &'a Profile);

impl<P: ProfileFn + ?Sized> ProfileFn for Merged<'_, P> {
    fn value(&self, u: f64) -> f64 {
        self.0.value(u)
    }

    fn slope(&self, u: f64) -> f64 {
        self.0.slope(u)
    }

    fn kinks(&self) -> Vec<f64> {
        let mut k = self.0.kinks();
        k.extend(self.1.kinks());
        k.sort_by(f64::total_cmp);
        k.dedup();
        k
    }
}

/// CREM prediction: (2 log 2)^{−1/2}·m_{(2 log 2)T} with σ² = A'.
pub fn crem_prediction(a_prime: &Profile, depth: usize, l: f64, regime: Regime) -> Result<PredictionReport> {
    if a_prime.lower_bound() < 0.0 {
        return Err(precondition(format!("A' must be nonnegative; its minimum is {}", a_prime.lower_bound())));
    }
    let total = a_prime.integral(0.0, 1.0)?;
    if (total - 1.0).abs() > 1e-8 {
        return Err(precondition(format!("A' must integrate to 1 over [0,1], got {total}")));
    }
    if depth == 0 {
        return Err(precondition("CREM depth must be at least 1"));
    }
    let a = 2.0 * LN_2;
    let spec = RegimeSpec::new(a * depth as f64, Selection::FixedL(l), regime)?;
    let sigma = SqrtOf(a_prime);
    let mut r = predict(&spec, &sigma, true)?;
    let k = a.sqrt();
    r.v1t /= k;
    r.second_order /= k;
    r.m /= k;
    r.b /= k;
    r.details.insert("bbm_horizon".into(), r.horizon);
    r.horizon = depth as f64;
    Ok(r)
}

/// Q_T(μ) = max_j [x_j + σ(0)·min(L, log j)] over particles ranked from the top.
pub fn q_shift(mu: &ParticleConfiguration, sigma0: f64, l: f64) -> Result<f64> {
    if !(sigma0 > 0.0 && l > 0.0) {
        return Err(precondition("q_shift needs sigma0 > 0 and L > 0"));
    }
    let mut best = f64::NEG_INFINITY;
    let mut rank = 0u64;
    for (x, c) in mu.atoms_desc() {
        rank += c;
        best = best.max(x + sigma0 * l.min((rank as f64).ln()));
    }
    if rank == 0 {
        return Err(domain("q_shift of an empty configuration"));
    }
    Ok(best)
}

/// Position of the M-th highest particle, −∞ if the mass is below M.
pub fn quantile(mu: &ParticleConfiguration, m: u64) -> Result<f64> {
    if m == 0 {
        return Err(precondition("quantile rank M must be at least 1"));
    }
    Ok(mu.quantile(m))
}
