use std::f64::consts::{FRAC_PI_4, PI};
use std::sync::OnceLock;

use crate::error::{domain, Result};

/// Ai(0) and Bi(0) with their derivatives.
const AI0: f64 = 0.355_028_053_887_817_24;
const AIP0: f64 = -0.258_819_403_792_806_8;
const BI0: f64 = 0.614_926_627_446_000_7;
const BIP0: f64 = 0.448_288_357_353_826_36;

/// Past this |x| the asymptotic expansions take over.
const ASYMPTOTIC_FROM: f64 = 9.0;
const ANCHOR_STEP: f64 = 0.5;
const ANCHORS_PER_SIDE: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AiryValue {
    pub ai: f64,
    pub bi: f64,
    pub ai_prime: f64,
    pub bi_prime: f64,
}

impl AiryValue {
    /// Ai·Bi' − Ai'·Bi, which is 1/π for the exact functions.
    pub fn wronskian(&self) -> f64 {
        self.ai * self.bi_prime - self.ai_prime * self.bi
    }
}

/// Ai, Bi and their first derivatives at `x`.
///
/// Bi overflows to `+inf` once x exceeds roughly 104; use [`airy_scaled`]
/// when both functions are needed far out on the positive axis.
pub fn airy_pair(x: f64) -> Result<AiryValue> {
    if !x.is_finite() {
        return Err(domain(format!("airy_pair: non-finite argument {x}")));
    }
    if x > ASYMPTOTIC_FROM {
        let s = asymptotic_positive(x);
        let zeta = 2.0 / 3.0 * x * x.sqrt();
        let down = (-zeta).exp();
        let up = zeta.exp();
        return Ok(AiryValue {
            ai: s.ai * down,
            ai_prime: s.ai_prime * down,
            bi: s.bi * up,
            bi_prime: s.bi_prime * up,
        });
    }
    if x < -ASYMPTOTIC_FROM {
        return Ok(asymptotic_negative(-x));
    }
    Ok(from_anchor(x))
}

/// Exponentially scaled values for x ≥ 0: Ai·e^ζ and Bi·e^−ζ (and the same
/// factors on the derivatives), with ζ = (2/3)x^{3/2}.
pub fn airy_scaled(x: f64) -> Result<AiryValue> {
    if !x.is_finite() || x < 0.0 {
        return Err(domain(format!("airy_scaled: argument must be finite and >= 0, got {x}")));
    }
    if x > ASYMPTOTIC_FROM {
        return Ok(asymptotic_positive(x));
    }
    let v = from_anchor(x);
    let zeta = 2.0 / 3.0 * x * x.sqrt();
    let up = zeta.exp();
    let down = (-zeta).exp();
    Ok(AiryValue {
        ai: v.ai * up,
        ai_prime: v.ai_prime * up,
        bi: v.bi * down,
        bi_prime: v.bi_prime * down,
    })
}

/// a₁ > 0 with Ai(−a₁) = 0, the zero of Ai closest to the origin.
pub fn airy_largest_zero() -> f64 {
    static A1: OnceLock<f64> = OnceLock::new();
    *A1.get_or_init(|| {
        let ai = |x: f64| from_anchor(x).ai;
        let (mut lo, mut hi) = (-3.0, -2.0);
        assert!(ai(lo) < 0.0 && ai(hi) > 0.0, "Ai does not change sign on [-3, -2]");
        while hi - lo > 1e-15 {
            let mid = 0.5 * (lo + hi);
            if ai(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        -0.5 * (lo + hi)
    })
}

#[derive(Clone, Copy)]
struct Anchor {
    ai: f64,
    ai_prime: f64,
    bi: f64,
    bi_prime: f64,
}

fn anchors() -> &'static [Anchor] {
    static TABLE: OnceLock<Vec<Anchor>> = OnceLock::new();
    TABLE.get_or_init(build_anchors)
}

// Index i of the table holds x = (i - ANCHORS_PER_SIDE) * ANCHOR_STEP.
//
// Bi and the oscillatory side of Ai are carried outward from the exact values
// at 0. Ai on x > 0 is recessive there, so it is carried inward from the
// asymptotic value at x = 9 instead.
fn build_anchors() -> Vec<Anchor> {
    let n = 2 * ANCHORS_PER_SIDE + 1;
    let mid = ANCHORS_PER_SIDE;
    let mut table = vec![
        Anchor { ai: 0.0, ai_prime: 0.0, bi: 0.0, bi_prime: 0.0 };
        n
    ];
    table[mid] = Anchor { ai: AI0, ai_prime: AIP0, bi: BI0, bi_prime: BIP0 };

    let (mut ai, mut aip, mut bi, mut bip) = (AI0, AIP0, BI0, BIP0);
    for k in 1..=ANCHORS_PER_SIDE {
        let x0 = -((k - 1) as f64) * ANCHOR_STEP;
        (ai, aip) = taylor_step(x0, ai, aip, -ANCHOR_STEP);
        (bi, bip) = taylor_step(x0, bi, bip, -ANCHOR_STEP);
        table[mid - k] = Anchor { ai, ai_prime: aip, bi, bi_prime: bip };
    }

    let (mut bi, mut bip) = (BI0, BIP0);
    for k in 1..=ANCHORS_PER_SIDE {
        let x0 = ((k - 1) as f64) * ANCHOR_STEP;
        (bi, bip) = taylor_step(x0, bi, bip, ANCHOR_STEP);
        table[mid + k].bi = bi;
        table[mid + k].bi_prime = bip;
    }

    let top = ASYMPTOTIC_FROM;
    let s = asymptotic_positive(top);
    let down = (-(2.0 / 3.0) * top * top.sqrt()).exp();
    let (mut ai, mut aip) = (s.ai * down, s.ai_prime * down);
    table[n - 1].ai = ai;
    table[n - 1].ai_prime = aip;
    for k in (1..ANCHORS_PER_SIDE).rev() {
        let x0 = ((k + 1) as f64) * ANCHOR_STEP;
        (ai, aip) = taylor_step(x0, ai, aip, -ANCHOR_STEP);
        table[mid + k].ai = ai;
        table[mid + k].ai_prime = aip;
    }
    table
}

fn from_anchor(x: f64) -> AiryValue {
    let idx = (x / ANCHOR_STEP).round();
    let x0 = idx * ANCHOR_STEP;
    let a = anchors()[(idx as i64 + ANCHORS_PER_SIDE as i64) as usize];
    let h = x - x0;
    let (ai, ai_prime) = taylor_step(x0, a.ai, a.ai_prime, h);
    let (bi, bi_prime) = taylor_step(x0, a.bi, a.bi_prime, h);
    AiryValue { ai, bi, ai_prime, bi_prime }
}

/// Advances a solution of y'' = x·y from x0 to x0 + h by its Taylor series.
///
/// The coefficients obey a_{k+2} = (x0·a_k + a_{k−1}) / ((k+2)(k+1)).
fn taylor_step(x0: f64, y: f64, dy: f64, h: f64) -> (f64, f64) {
    if h == 0.0 {
        return (y, dy);
    }
    let (mut c0, mut c1, mut c2) = (y, dy, 0.5 * x0 * y);
    let mut value = y + dy * h + c2 * h * h;
    let mut deriv = dy + 2.0 * c2 * h;
    let mut hk = h * h;
    let mut small = 0;
    for k in 3..200 {
        let c = (x0 * c1 + c0) / (k * (k - 1)) as f64;
        let deriv_term = k as f64 * c * hk;
        hk *= h;
        let term = c * hk;
        value += term;
        deriv += deriv_term;
        let scale = value.abs() + deriv.abs() * h.abs();
        if term.abs() <= 1e-18 * scale && deriv_term.abs() * h.abs() <= 1e-18 * scale {
            small += 1;
            if small >= 3 {
                break;
            }
        } else {
            small = 0;
        }
        (c0, c1, c2) = (c1, c2, c);
    }
    (value, deriv)
}

/// Series coefficients u_k and v_k of the large-argument expansions.
fn uv_coefficients() -> &'static ([f64; 60], [f64; 60]) {
    static COEFFS: OnceLock<([f64; 60], [f64; 60])> = OnceLock::new();
    COEFFS.get_or_init(|| {
        let mut u = [0.0; 60];
        let mut v = [0.0; 60];
        u[0] = 1.0;
        v[0] = 1.0;
        for k in 1..60 {
            let kf = k as f64;
            u[k] = u[k - 1] * (6.0 * kf - 5.0) * (6.0 * kf - 3.0) * (6.0 * kf - 1.0)
                / ((2.0 * kf - 1.0) * 216.0 * kf);
            v[k] = -u[k] * (6.0 * kf + 1.0) / (6.0 * kf - 1.0);
        }
        (u, v)
    })
}

/// Sums Σ sign^k c_k / ζ^k, stopping at the smallest term.
fn asymptotic_sum(c: &[f64], zeta: f64, alternate: bool) -> f64 {
    let mut sum = 0.0;
    let mut power = 1.0;
    let mut last = f64::INFINITY;
    for (k, &ck) in c.iter().enumerate() {
        let mut term = ck * power;
        if alternate && k % 2 == 1 {
            term = -term;
        }
        if term.abs() > last {
            break;
        }
        sum += term;
        last = term.abs();
        if last < 1e-17 * sum.abs() {
            break;
        }
        power /= zeta;
    }
    sum
}

fn asymptotic_positive(x: f64) -> AiryValue {
    let (u, v) = uv_coefficients();
    let zeta = 2.0 / 3.0 * x * x.sqrt();
    let q = x.powf(0.25);
    let rsp = 1.0 / PI.sqrt();
    AiryValue {
        ai: 0.5 * rsp / q * asymptotic_sum(u, zeta, true),
        ai_prime: -0.5 * rsp * q * asymptotic_sum(v, zeta, true),
        bi: rsp / q * asymptotic_sum(u, zeta, false),
        bi_prime: rsp * q * asymptotic_sum(v, zeta, false),
    }
}

/// Splits Σ c_k/ζ^k into even and odd parts with alternating signs:
/// (Σ (−1)^k c_{2k}/ζ^{2k}, Σ (−1)^k c_{2k+1}/ζ^{2k+1}).
fn split_sums(c: &[f64], zeta: f64) -> (f64, f64) {
    let mut even = 0.0;
    let mut odd = 0.0;
    let mut power = 1.0;
    let mut last = f64::INFINITY;
    for (k, &ck) in c.iter().enumerate() {
        let term = ck * power;
        if term.abs() > last {
            break;
        }
        last = term.abs();
        let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
        if k % 2 == 0 {
            even += sign * term;
        } else {
            odd += sign * term;
        }
        if last < 1e-17 {
            break;
        }
        power /= zeta;
    }
    (even, odd)
}

fn asymptotic_negative(z: f64) -> AiryValue {
    let (u, v) = uv_coefficients();
    let zeta = 2.0 / 3.0 * z * z.sqrt();
    let q = z.powf(0.25);
    let rsp = 1.0 / PI.sqrt();
    let (sn, cs) = (zeta - FRAC_PI_4).sin_cos();
    let (pu, qu) = split_sums(u, zeta);
    let (pv, qv) = split_sums(v, zeta);
    AiryValue {
        ai: rsp / q * (cs * pu + sn * qu),
        bi: rsp / q * (-sn * pu + cs * qu),
        ai_prime: rsp * q * (sn * pv - cs * qv),
        bi_prime: rsp * q * (cs * pv + sn * qv),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn power_series_at_zero_check(x: f64) -> (f64, f64) {
        // f = Σ 3^k (1/3)_k x^{3k}/(3k)!, g = Σ 3^k (2/3)_k x^{3k+1}/(3k+1)!
        let mut f = 0.0;
        let mut g = 0.0;
        let mut tf = 1.0;
        let mut tg = x;
        for k in 0..60 {
            f += tf;
            g += tg;
            let k = k as f64;
            tf *= x * x * x / ((3.0 * k + 2.0) * (3.0 * k + 3.0));
            tg *= x * x * x / ((3.0 * k + 3.0) * (3.0 * k + 4.0));
        }
        let c1 = AI0;
        let c2 = -AIP0;
        let ai = c1 * f - c2 * g;
        let bi = 3f64.sqrt() * (c1 * f + c2 * g);
        (ai, bi)
    }

    #[test]
    fn matches_power_series_near_origin() {
        for i in -40..=40 {
            let x = i as f64 * 0.05;
            let (ai, bi) = power_series_at_zero_check(x);
            let v = airy_pair(x).unwrap();
            assert!((v.ai - ai).abs() < 1e-14, "Ai({x})");
            assert!((v.bi - bi).abs() < 1e-13 * bi.abs().max(1.0), "Bi({x})");
        }
    }

    #[test]
    fn backward_ai_meets_exact_origin_value() {
        let near = taylor_step(0.5, anchors()[ANCHORS_PER_SIDE + 1].ai, anchors()[ANCHORS_PER_SIDE + 1].ai_prime, -0.5);
        assert!((near.0 - AI0).abs() < 1e-14);
        assert!((near.1 - AIP0).abs() < 1e-14);
    }

    #[test]
    fn seams_agree() {
        for &x in &[ASYMPTOTIC_FROM, -ASYMPTOTIC_FROM] {
            let a = from_anchor(x);
            let b = if x > 0.0 {
                let s = asymptotic_positive(x);
                let zeta = 2.0 / 3.0 * x * x.sqrt();
                AiryValue {
                    ai: s.ai * (-zeta).exp(),
                    ai_prime: s.ai_prime * (-zeta).exp(),
                    bi: s.bi * zeta.exp(),
                    bi_prime: s.bi_prime * zeta.exp(),
                }
            } else {
                asymptotic_negative(-x)
            };
            let rel = |p: f64, q: f64| (p - q).abs() / q.abs().max(1e-300);
            assert!(rel(a.bi, b.bi) < 1e-11, "Bi seam at {x}: {} vs {}", a.bi, b.bi);
            assert!(rel(a.bi_prime, b.bi_prime) < 1e-11);
            if x < 0.0 {
                assert!((a.ai - b.ai).abs() < 1e-11);
                assert!((a.ai_prime - b.ai_prime).abs() < 1e-11);
            }
        }
    }
}
