//! Piecewise-polynomial profiles on [0,1] and the quadrature used with them.
//!
//! A [`Profile`] is a list of pieces; piece i starts at breakpoint `b_i` and
//! holds polynomial coefficients in the global variable u (not in u − b_i).
//! The text syntax is
//!
//! ```text
//! poly:c0,c1,c2              c0 + c1·u + c2·u²
//! piecewise:[0:c0,c1|0.5:d0,d1]
//! preset:fig1                0.125 + u²
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{domain, numerical, precondition, Error, Result};

/// Anything the theory layer can use as σ(u): a value, a slope and the
/// points where the integrands built from it stop being smooth.
pub trait ProfileFn {
    /// Value at u ∈ [0,1]; arguments are assumed to be in range.
    fn value(&self, u: f64) -> f64;
    fn slope(&self, u: f64) -> f64;
    /// Interior points of (0,1) with a kink or a change of monotonicity.
    fn kinks(&self) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    breakpoints: Vec<f64>,
    polys: Vec<Vec<f64>>,
    lower_bound: f64,
    upper_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Nondecreasing,
    Nonincreasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotoneInterval {
    pub lo: f64,
    pub hi: f64,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneDecomposition {
    pub intervals: Vec<MonotoneInterval>,
}

const CONTINUITY_TOL: f64 = 1e-12;

impl Profile {
    pub fn constant(c: f64) -> Result<Profile> {
        Profile::polynomial(vec![c])
    }

    pub fn polynomial(coeffs: Vec<f64>) -> Result<Profile> {
        Profile::piecewise(vec![(0.0, coeffs)])
    }

    pub fn piecewise(pieces: Vec<(f64, Vec<f64>)>) -> Result<Profile> {
        if pieces.is_empty() {
            return Err(precondition("profile needs at least one piece"));
        }
        if pieces[0].0 != 0.0 {
            return Err(precondition(format!("first breakpoint must be 0, got {}", pieces[0].0)));
        }
        for (i, (b, c)) in pieces.iter().enumerate() {
            if !b.is_finite() || c.iter().any(|x| !x.is_finite()) {
                return Err(precondition(format!("piece {i} has non-finite data")));
            }
            if c.is_empty() {
                return Err(precondition(format!("piece {i} has no coefficients")));
            }
            if i > 0 && !(*b > pieces[i - 1].0 && *b < 1.0) {
                return Err(precondition(format!(
                    "breakpoints must increase strictly inside [0,1); piece {i} starts at {b}"
                )));
            }
        }
        for i in 1..pieces.len() {
            let b = pieces[i].0;
            let left = horner(&pieces[i - 1].1, b);
            let right = horner(&pieces[i].1, b);
            if (left - right).abs() > CONTINUITY_TOL * left.abs().max(1.0) {
                return Err(precondition(format!(
                    "profile jumps at u = {b}: {left} on the left, {right} on the right"
                )));
            }
        }
        let (breakpoints, polys) = pieces.into_iter().unzip();
        let mut p = Profile { breakpoints, polys, lower_bound: 0.0, upper_bound: 0.0 };
        let (lo, hi) = p.range();
        p.lower_bound = lo;
        p.upper_bound = hi;
        Ok(p)
    }

    /// Named profiles: `fig1` is 0.125 + u², `fig3a` is 0.4 − 0.3u and
    /// `fig3b` is 0.1 + 0.3u.
    pub fn preset(name: &str) -> Result<Profile> {
        match name {
            "fig1" => Profile::polynomial(vec![0.125, 0.0, 1.0]),
            "fig3a" => Profile::polynomial(vec![0.4, -0.3]),
            "fig3b" => Profile::polynomial(vec![0.1, 0.3]),
            _ => Err(precondition(format!("unknown profile preset '{name}'"))),
        }
    }

    pub fn parse(text: &str) -> Result<Profile> {
        parse_profile(text)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn pieces(&self) -> impl Iterator<Item = (f64, f64, &[f64])> + '_ {
        (0..self.polys.len()).map(move |i| (self.breakpoints[i], self.piece_end(i), self.polys[i].as_slice()))
    }

    pub fn lower_bound(&self) -> f64 {
        self.lower_bound
    }

    pub fn upper_bound(&self) -> f64 {
        self.upper_bound
    }

    pub fn is_constant(&self) -> bool {
        self.polys.iter().all(|c| trimmed(c).len() <= 1) && self.lower_bound == self.upper_bound
    }

    /// Fails unless the profile is bounded below by a positive constant.
    pub fn require_positive(&self, role: &str) -> Result<()> {
        if self.lower_bound > 0.0 {
            Ok(())
        } else {
            Err(precondition(format!(
                "{role} must be positive on [0,1]; its minimum is {}",
                self.lower_bound
            )))
        }
    }

    /// Value at u; at an interior breakpoint the right limit is used.
    pub fn evaluate(&self, u: f64) -> Result<f64> {
        check_unit(u)?;
        Ok(horner(&self.polys[self.piece_index(u)], u))
    }

    /// Derivative of the active piece; right derivative at interior
    /// breakpoints and left derivative at u = 1.
    pub fn derivative(&self, u: f64) -> Result<f64> {
        check_unit(u)?;
        Ok(horner_deriv(&self.polys[self.piece_index(u)], u))
    }

    /// ∫_a^b of the profile, computed from the exact antiderivative.
    pub fn integral(&self, a: f64, b: f64) -> Result<f64> {
        check_unit(a)?;
        check_unit(b)?;
        let anti = |u: f64| -> f64 {
            let mut total = 0.0;
            for i in 0..self.polys.len() {
                let lo = self.breakpoints[i];
                if u <= lo {
                    break;
                }
                let hi = self.piece_end(i).min(u);
                total += primitive(&self.polys[i], hi) - primitive(&self.polys[i], lo);
            }
            total
        };
        Ok(anti(b) - anti(a))
    }

    /// U ↦ ∫_0^u of the profile, as a profile.
    pub fn antiderivative(&self) -> Profile {
        let mut pieces = Vec::with_capacity(self.polys.len());
        let mut acc = 0.0;
        for i in 0..self.polys.len() {
            let lo = self.breakpoints[i];
            let mut c = vec![0.0];
            c.extend(self.polys[i].iter().enumerate().map(|(k, a)| a / (k + 1) as f64));
            c[0] = acc - horner(&c, lo);
            acc = horner(&c, self.piece_end(i));
            pieces.push((lo, c));
        }
        Profile::piecewise(pieces).expect("antiderivative of a valid profile is valid")
    }

    pub fn scaled(&self, factor: f64) -> Profile {
        let pieces = self
            .breakpoints
            .iter()
            .zip(&self.polys)
            .map(|(b, c)| (*b, c.iter().map(|x| x * factor).collect()))
            .collect();
        Profile::piecewise(pieces).expect("scaling preserves validity")
    }

    /// The time reversal u ↦ p(1 − u).
    pub fn reversed(&self) -> Profile {
        let n = self.polys.len();
        let mut pieces = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let start = 1.0 - self.piece_end(i);
            let c = &self.polys[i];
            let mut out = vec![0.0; c.len()];
            for (k, &ck) in c.iter().enumerate() {
                let mut binom = 1.0;
                for j in 0..=k {
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    out[j] += ck * binom * sign;
                    binom = binom * (k - j) as f64 / (j + 1) as f64;
                }
            }
            pieces.push((if i == n - 1 { 0.0 } else { start }, out));
        }
        Profile::piecewise(pieces).expect("reversal preserves validity")
    }

    pub fn monotone_decompose(&self) -> MonotoneDecomposition {
        let mut intervals: Vec<MonotoneInterval> = Vec::new();
        for i in 0..self.polys.len() {
            let (lo, hi) = (self.breakpoints[i], self.piece_end(i));
            let d = derivative_coeffs(&self.polys[i]);
            let mut cuts = vec![lo];
            cuts.extend(real_roots(&d, lo, hi));
            cuts.push(hi);
            for w in cuts.windows(2) {
                if w[1] - w[0] < 1e-14 {
                    continue;
                }
                let direction = if horner(&d, 0.5 * (w[0] + w[1])) >= 0.0 {
                    Direction::Nondecreasing
                } else {
                    Direction::Nonincreasing
                };
                match intervals.last_mut() {
                    Some(last) if last.direction == direction => last.hi = w[1],
                    _ => intervals.push(MonotoneInterval { lo: w[0], hi: w[1], direction }),
                }
            }
        }
        MonotoneDecomposition { intervals }
    }

    pub fn is_strictly_decreasing(&self) -> bool {
        let dec = self.monotone_decompose();
        dec.intervals.len() == 1
            && dec.intervals[0].direction == Direction::Nonincreasing
            && self.polys.iter().all(|c| trimmed(&derivative_coeffs(c)).iter().any(|&x| x != 0.0))
    }

    fn piece_index(&self, u: f64) -> usize {
        self.breakpoints.partition_point(|&b| b <= u).max(1) - 1
    }

    fn piece_end(&self, i: usize) -> f64 {
        self.breakpoints.get(i + 1).copied().unwrap_or(1.0)
    }

    fn range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.polys.len() {
            let (a, b) = (self.breakpoints[i], self.piece_end(i));
            let c = &self.polys[i];
            let mut pts = vec![a, b];
            pts.extend(real_roots(&derivative_coeffs(c), a, b));
            for x in pts {
                let v = horner(c, x);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }
}

impl ProfileFn for Profile {
    fn value(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        horner(&self.polys[self.piece_index(u)], u)
    }

    fn slope(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        horner_deriv(&self.polys[self.piece_index(u)], u)
    }

    fn kinks(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.breakpoints[1..].to_vec();
        for iv in self.monotone_decompose().intervals.iter().skip(1) {
            out.push(iv.lo);
        }
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let coeffs = |c: &[f64]| c.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        if self.polys.len() == 1 {
            return write!(f, "poly:{}", coeffs(&self.polys[0]));
        }
        let parts: Vec<String> = self
            .breakpoints
            .iter()
            .zip(&self.polys)
            .map(|(b, c)| format!("{b:?}:{}", coeffs(c)))
            .collect();
        write!(f, "piecewise:[{}]", parts.join("|"))
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Profile> {
        parse_profile(s)
    }
}

impl Serialize for Profile {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Profile {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Profile, D::Error> {
        let text = String::deserialize(d)?;
        parse_profile(&text).map_err(serde::de::Error::custom)
    }
}

fn check_unit(u: f64) -> Result<()> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(domain(format!("profile argument {u} outside [0,1]")))
    }
}

fn parse_profile(text: &str) -> Result<Profile> {
    let lead = text.len() - text.trim_start().len();
    let body = text.trim();
    let err = |pos: usize, msg: String| Error::Parse { pos, msg };
    if let Some(rest) = body.strip_prefix("poly:") {
        let coeffs = parse_list(rest, lead + 5)?;
        return Profile::polynomial(coeffs);
    }
    if let Some(name) = body.strip_prefix("preset:") {
        return Profile::preset(name.trim());
    }
    if let Some(rest) = body.strip_prefix("piecewise:") {
        let offset = lead + 10;
        let inner = rest
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| err(offset, "expected [ ... ] around the pieces".into()))?;
        let mut pieces = Vec::new();
        let mut pos = offset + 1;
        for part in inner.split('|') {
            let (b, c) = part
                .split_once(':')
                .ok_or_else(|| err(pos, format!("piece '{part}' lacks 'breakpoint:coefficients'")))?;
            let start = b
                .trim()
                .parse::<f64>()
                .map_err(|_| err(pos, format!("bad breakpoint '{}'", b.trim())))?;
            pieces.push((start, parse_list(c, pos + b.len() + 1)?));
            pos += part.len() + 1;
        }
        return Profile::piecewise(pieces);
    }
    Err(err(lead, format!("expected poly:, piecewise: or preset:, found '{body}'")))
}

fn parse_list(text: &str, offset: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut pos = offset;
    for tok in text.split(',') {
        let v = tok
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::Parse { pos, msg: format!("bad number '{}'", tok.trim()) })?;
        out.push(v);
        pos += tok.len() + 1;
    }
    Ok(out)
}

fn horner(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * x + a)
}

fn horner_deriv(c: &[f64], x: f64) -> f64 {
    c.iter().enumerate().skip(1).rev().fold(0.0, |acc, (k, &a)| acc * x + k as f64 * a)
}

fn primitive(c: &[f64], x: f64) -> f64 {
    c.iter().enumerate().rev().fold(0.0, |acc, (k, &a)| acc * x + a / (k + 1) as f64) * x
}

fn derivative_coeffs(c: &[f64]) -> Vec<f64> {
    c.iter().enumerate().skip(1).map(|(k, &a)| k as f64 * a).collect()
}

fn trimmed(c: &[f64]) -> &[f64] {
    let scale = c.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let mut n = c.len();
    while n > 0 && c[n - 1].abs() <= 1e-15 * scale {
        n -= 1;
    }
    &c[..n]
}

/// Real roots of the polynomial strictly inside (lo, hi), ascending.
///
/// Roots of the derivative split the interval into monotone stretches, each
/// holding at most one root, which bisection then finds.
fn real_roots(c: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let c = trimmed(c);
    match c.len() {
        0 | 1 => return Vec::new(),
        2 => {
            let r = -c[0] / c[1];
            return if r > lo && r < hi { vec![r] } else { Vec::new() };
        }
        _ => {}
    }
    let mut pts = vec![lo];
    pts.extend(real_roots(&derivative_coeffs(c), lo, hi));
    pts.push(hi);
    let mut roots = Vec::new();
    for w in pts.windows(2) {
        let (mut a, mut b) = (w[0], w[1]);
        let (fa, fb) = (horner(c, a), horner(c, b));
        if fa == 0.0 {
            if a > lo {
                roots.push(a);
            }
            continue;
        }
        if fa.signum() == fb.signum() || fb == 0.0 {
            continue;
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if horner(c, m).signum() == fa.signum() {
                a = m;
            } else {
                b = m;
            }
        }
        roots.push(0.5 * (a + b));
    }
    // A root of the derivative that is itself a root shows up as fa == 0 above;
    // one sitting exactly at hi is the next stretch's business.
    roots
}

const MAX_DEPTH: usize = 50;
const INITIAL_PANELS: usize = 4;

/// Adaptive Simpson quadrature of f over [a, b] to absolute tolerance `tol`.
pub fn integrate<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    integrate_with_breaks(f, a, b, tol, &[])
}

/// As [`integrate`], with `breaks` forced as panel boundaries so that kinks
/// of the integrand never sit inside a Simpson panel.
pub fn integrate_with_breaks<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    tol: f64,
    breaks: &[f64],
) -> Result<f64> {
    if !(a.is_finite() && b.is_finite()) || a > b {
        return Err(domain(format!("integrate: need finite a <= b, got [{a}, {b}]")));
    }
    if !(tol > 0.0) {
        return Err(domain(format!("integrate: tolerance must be positive, got {tol}")));
    }
    if a == b {
        return Ok(0.0);
    }
    let mut cuts = vec![a];
    let mut inner: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    inner.sort_by(f64::total_cmp);
    inner.dedup();
    cuts.extend(inner);
    cuts.push(b);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let h = (w[1] - w[0]) / INITIAL_PANELS as f64;
        for k in 0..INITIAL_PANELS {
            let lo = w[0] + k as f64 * h;
            let hi = if k + 1 == INITIAL_PANELS { w[1] } else { lo + h };
            total += adaptive_simpson(&mut f, lo, hi, tol * (hi - lo) / (b - a))?;
        }
    }
    Ok(total)
}

fn adaptive_simpson<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, tol: f64) -> Result<f64> {
    let mut eval = |x: f64| -> Result<f64> {
        let y = f(x);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(numerical(format!("integrand is not finite at {x}: {y}")))
        }
    };
    let fa = eval(a)?;
    let fb = eval(b)?;
    let m = 0.5 * (a + b);
    let fm = eval(m)?;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut stack = vec![(a, b, fa, fm, fb, whole, tol, 0usize)];
    let mut total = 0.0;
    while let Some((a, b, fa, fm, fb, whole, tol, depth)) = stack.pop() {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = eval(lm)?;
        let frm = eval(rm)?;
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        let roundoff = 8.0 * f64::EPSILON * (left.abs() + right.abs());
        let unresolvable = !(a < lm && lm < m && m < rm && rm < b);
        if diff.abs() <= 15.0 * tol || diff.abs() <= roundoff || unresolvable {
            total += left + right + diff / 15.0;
            continue;
        }
        if depth >= MAX_DEPTH {
            return Err(numerical(format!(
                "adaptive quadrature did not converge near [{a}, {b}] (error estimate {:e})",
                diff.abs() / 15.0
            )));
        }
        stack.push((a, m, fa, flm, fm, left, 0.5 * tol, depth + 1));
        stack.push((m, b, fm, frm, fb, right, 0.5 * tol, depth + 1));
    }
    Ok(total)
}

/// Natural speed v(s) = ∫_0^s σ(u) du.
pub fn speed<P: ProfileFn + ?Sized>(sigma: &P, s: f64) -> Result<f64> {
    check_unit(s)?;
    integrate_with_breaks(|u| sigma.value(u), 0.0, s, 1e-12, &sigma.kinks())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roots_of_cubic() {
        // (u − 0.2)(u − 0.5)(u − 0.9)
        let c = [-0.09, 0.73, -1.6, 1.0];
        let r = real_roots(&c, 0.0, 1.0);
        assert_eq!(r.len(), 3);
        for (got, want) in r.iter().zip([0.2, 0.5, 0.9]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn double_root_is_reported_once() {
        // (u − 0.5)²
        let r = real_roots(&[0.25, -1.0, 1.0], 0.0, 1.0);
        assert_eq!(r.len(), 1);
        assert!((r[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn primitive_matches_hand_integral() {
        assert!((primitive(&[0.125, 0.0, 1.0], 1.0) - (0.125 + 1.0 / 3.0)).abs() < 1e-15);
    }
}
