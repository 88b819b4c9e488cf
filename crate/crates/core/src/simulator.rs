//! Forward simulation of time-inhomogeneous branching random walks with
//! top-N selection, in occupancy-count (lattice) or position-buffer (real)
//! form, with optional killing barriers.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::measure::{LatticeConfig, ParticleConfiguration};
use crate::profiles::{Profile, ProfileFn};
use crate::rng::{replica_rng, SimRng};
use crate::theory::{BarrierPair, BrwSpec, Increment, OffspringLaw};

pub const DEFAULT_MAX_REAL_SLOTS: u64 = 100_000_000;
pub const DEFAULT_MAX_SITES: u64 = 10_000_000;

/// Half-width, in standard deviations, of the discretized Gaussian kernel.
const GAUSS_HALF_WIDTH: f64 = 12.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimSelection {
    Fixed(u64),
    /// N(s,T) = round(exp(ℓ(s/T)·L̂)).
    Schedule { hat_l: f64, ell: Profile },
}

impl SimSelection {
    /// Selection size at rescaled time r ∈ [0, 1].
    pub fn size_at(&self, r: f64) -> u64 {
        match self {
            SimSelection::Fixed(n) => *n,
            SimSelection::Schedule { hat_l, ell } => round_half_up((ell.value(r.clamp(0.0, 1.0)) * hat_l).exp()),
        }
    }
}

/// Round half up, saturating at `u64::MAX`.
pub fn round_half_up(x: f64) -> u64 {
    let r = (x + 0.5).floor();
    if r >= u64::MAX as f64 {
        u64::MAX
    } else {
        r.max(0.0) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialConfig {
    AtZero(u64),
    MuEps { eps: f64, l: f64, sigma0: f64 },
    Given(ParticleConfiguration),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    /// One branching generation per unit time; the horizon counts generations.
    Generations,
    /// Brownian motion branching at the times a·k, a = 2 log E[ξ], with
    /// `substeps` diffusion steps per epoch.
    Deterministic { substeps: u32 },
    /// Each particle branches with probability β₀·dt per step of length dt,
    /// β₀ = 1/(2(E[ξ] − 1)). Biased at order dt.
    Clock { dt: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineChoice {
    Auto,
    Real,
    /// Occupancy counts on `spacing·ℤ`; Gaussian steps use a discretized
    /// kernel. Without a spacing, Bernoulli runs use 1 and Gaussian runs a
    /// quarter of the smallest step deviation.
    Lattice { spacing: Option<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierMode {
    KillLowerOnly,
    KillBoth,
    /// Upper-curve hits turn red; red particles and their descendants see
    /// both curves raised by `red_shift·σ(t/T)L`.
    Color,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    pub curves: BarrierPair,
    pub mode: BarrierMode,
    /// Terminal window I ⊂ [0, h], in units of σ(t/T)L above the lower curve.
    pub interval: (f64, f64),
    pub red_shift: f64,
}

impl BarrierSpec {
    pub fn new(curves: BarrierPair, mode: BarrierMode) -> BarrierSpec {
        let h = curves.h;
        BarrierSpec { curves, mode, interval: (0.0, h), red_shift: 0.0 }
    }

    /// Color mode with the red shift ε/3.
    pub fn color(curves: BarrierPair, eps: f64) -> BarrierSpec {
        BarrierSpec { red_shift: eps / 3.0, ..BarrierSpec::new(curves, BarrierMode::Color) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub max_real_slots: u64,
    pub max_sites: u64,
    #[serde(skip)]
    pub deadline: Option<Instant>,
}

impl Default for Limits {
    fn default() -> Limits {
        Limits { max_real_slots: DEFAULT_MAX_REAL_SLOTS, max_sites: DEFAULT_MAX_SITES, deadline: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub horizon: f64,
    pub brw: BrwSpec,
    pub time: TimeMode,
    pub selection: SimSelection,
    pub initial: InitialConfig,
    pub seed: u64,
    pub replica: u64,
    /// Times at which to record; the horizon is always recorded.
    pub checkpoints: Vec<f64>,
    pub quantile_ranks: Vec<u64>,
    pub profile_grid: Vec<f64>,
    pub barrier: Option<BarrierSpec>,
    pub engine: EngineChoice,
    pub limits: Limits,
}

impl SimSpec {
    pub fn new(horizon: f64, brw: BrwSpec, time: TimeMode, selection: SimSelection, initial: InitialConfig, seed: u64) -> SimSpec {
        SimSpec {
            horizon,
            brw,
            time,
            selection,
            initial,
            seed,
            replica: 0,
            checkpoints: Vec::new(),
            quantile_ranks: Vec::new(),
            profile_grid: Vec::new(),
            barrier: None,
            engine: EngineChoice::Auto,
            limits: Limits::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub time: f64,
    pub mass: u64,
    pub max: f64,
    pub min: f64,
    pub quantiles: Vec<f64>,
    pub profile: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BarrierCounts {
    /// Survivors inside the terminal window (A).
    pub survivors: u64,
    /// Upper-curve hits (R); in color mode, the number of recolorings.
    pub upper_hits: u64,
    /// Red particles killed at the raised upper curve.
    pub red_kills: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Extinct { time: f64 },
    Aborted { time: f64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<CheckpointRecord>,
    pub final_config: ParticleConfiguration,
    pub quantile_ranks: Vec<u64>,
    pub profile_grid: Vec<f64>,
    pub barrier: Option<BarrierCounts>,
    pub termination: Termination,
    pub steps: u64,
}

impl Trajectory {
    pub fn is_aborted(&self) -> bool {
        matches!(self.termination, Termination::Aborted { .. })
    }

    pub fn last(&self) -> Option<&CheckpointRecord> {
        self.records.last()
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["time", "mass", "max", "min"].iter().map(|s| s.to_string()).collect();
        h.extend(self.quantile_ranks.iter().map(|m| format!("q_{m}")));
        h.extend(self.profile_grid.iter().map(|y| format!("profile_{y}")));
        h
    }

    /// One row per checkpoint: time, mass, max, min, q_M..., profile_y...
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let io = |e: csv::Error| Error::Resource(format!("writing trajectory csv: {e}"));
        w.write_record(self.csv_header()).map_err(io)?;
        for r in &self.records {
            let mut row = vec![r.time.to_string(), r.mass.to_string(), r.max.to_string(), r.min.to_string()];
            row.extend(r.quantiles.iter().map(|q| q.to_string()));
            row.extend(r.profile.iter().map(|q| q.to_string()));
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Resource(format!("writing trajectory csv: {e}")))?;
        Ok(())
    }

    /// Spec echo, seed and software version alongside the run outcome.
    pub fn manifest(&self, spec: &SimSpec) -> serde_json::Value {
        serde_json::json!({
            "software": concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")),
            "seed": spec.seed,
            "replica": spec.replica,
            "spec": spec,
            "termination": self.termination,
            "steps": self.steps,
            "barrier": self.barrier,
            "columns": self.csv_header(),
        })
    }
}

/// log₊(mass of [center − y·σ₁·L, ∞)) / L for each y.
pub fn empirical_exponent_profile(
    pop: &ParticleConfiguration,
    center: f64,
    sigma1: f64,
    l: f64,
    y_grid: &[f64],
) -> Result<Vec<f64>> {
    if !(sigma1 > 0.0 && l > 0.0) {
        return Err(precondition("exponent profile needs sigma1 > 0 and L > 0"));
    }
    Ok(y_grid
        .iter()
        .map(|&y| {
            let m = pop.mass_at_or_above(center - y * sigma1 * l);
            (m.max(1) as f64).ln() / l
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Sampling kernels

/// Spreads n children over integer offsets by sequential conditional
/// binomials, in a fixed order.
#[derive(Debug, Clone)]
pub(crate) struct Kernel {
    offsets: Vec<i64>,
    cond: Vec<f64>,
    lo: i64,
    hi: i64,
}

impl Kernel {
    fn new(weights: &[(i64, f64)]) -> Kernel {
        let mut suffix = vec![0.0; weights.len() + 1];
        for j in (0..weights.len()).rev() {
            suffix[j] = suffix[j + 1] + weights[j].1;
        }
        let last = weights.len() - 1;
        let cond = (0..weights.len())
            .map(|j| if j == last || suffix[j] <= 0.0 { 1.0 } else { (weights[j].1 / suffix[j]).clamp(0.0, 1.0) })
            .collect();
        let offsets: Vec<i64> = weights.iter().map(|w| w.0).collect();
        let lo = *offsets.iter().min().unwrap();
        let hi = *offsets.iter().max().unwrap();
        Kernel { offsets, cond, lo, hi }
    }

    /// +1 with probability p, else 0.
    pub(crate) fn bernoulli(p: f64) -> Kernel {
        Kernel::new(&[(1, p), (0, 1.0 - p)])
    }

    /// N(0, sd²) sampled at the sites of `spacing·ℤ`, most likely offsets first.
    pub(crate) fn gaussian(sd: f64, spacing: f64) -> Kernel {
        Kernel::gaussian_truncated(sd, spacing, GAUSS_HALF_WIDTH)
    }

    /// As [`Kernel::gaussian`], cut at `half_width` deviations.
    pub(crate) fn gaussian_truncated(sd: f64, spacing: f64, half_width: f64) -> Kernel {
        if sd == 0.0 {
            return Kernel::new(&[(0, 1.0)]);
        }
        let k = (half_width * sd / spacing).ceil() as i64;
        let mut w = Vec::with_capacity(2 * k as usize + 1);
        w.push((0, 1.0));
        for j in 1..=k {
            let v = (-((j as f64 * spacing) / sd).powi(2) / 2.0).exp();
            w.push((-j, v));
            w.push((j, v));
        }
        Kernel::new(&w)
    }

    pub(crate) fn spread<R: Rng + ?Sized>(&self, n: u64, rng: &mut R, mut put: impl FnMut(i64, u64)) {
        let mut rem = n;
        for (j, &off) in self.offsets.iter().enumerate() {
            if rem == 0 {
                break;
            }
            let q = self.cond[j];
            let c = if q >= 1.0 { rem } else { Binomial::new(rem, q).unwrap().sample(rng) };
            if c > 0 {
                put(off, c);
            }
            rem -= c;
        }
    }
}

/// Total offspring of n parents; `None` on overflow.
fn offspring_total<R: Rng + ?Sized>(n: u64, law: &OffspringLaw, rng: &mut R) -> Option<u64> {
    if let Some(k) = law.as_fixed() {
        return n.checked_mul(k as u64);
    }
    let outcomes = law.outcomes();
    let mut rem = n;
    let mut tail = 1.0;
    let mut total = 0u64;
    for (i, &(k, p)) in outcomes.iter().enumerate() {
        if rem == 0 {
            break;
        }
        let c = if i + 1 == outcomes.len() || tail <= p {
            rem
        } else {
            Binomial::new(rem, (p / tail).clamp(0.0, 1.0)).unwrap().sample(rng)
        };
        total = total.checked_add(c.checked_mul(k as u64)?)?;
        rem -= c;
        tail -= p;
    }
    Some(total)
}

// ---------------------------------------------------------------------------
// Lattice engine

pub(crate) fn lattice_reproduce<R: Rng + ?Sized>(
    cfg: &LatticeConfig,
    law: &OffspringLaw,
    branch: bool,
    kernel: &Kernel,
    rng: &mut R,
    max_sites: u64,
) -> std::result::Result<LatticeConfig, String> {
    let n = cfg.counts.len();
    if n == 0 {
        return Ok(cfg.clone());
    }
    let len = n + (kernel.hi - kernel.lo) as usize;
    if len as u64 > max_sites {
        return Err(format!("lattice needs {len} sites, cap is {max_sites}"));
    }
    let mut counts = vec![0u64; len];
    let mut overflow = false;
    for i in (0..n).rev() {
        let c = cfg.counts[i];
        if c == 0 {
            continue;
        }
        let total = if branch {
            match offspring_total(c, law, rng) {
                Some(t) => t,
                None => return Err("particle count overflow".into()),
            }
        } else {
            c
        };
        kernel.spread(total, rng, |off, k| {
            let idx = (i as i64 + off - kernel.lo) as usize;
            match counts[idx].checked_add(k) {
                Some(v) => counts[idx] = v,
                None => overflow = true,
            }
        });
    }
    if overflow {
        return Err("particle count overflow".into());
    }
    let mut out = LatticeConfig { offset: cfg.offset + kernel.lo, spacing: cfg.spacing, counts };
    out.trim();
    Ok(out)
}

/// Keeps the top n particles, cutting the count at the boundary site.
pub(crate) fn lattice_select(cfg: &mut LatticeConfig, n: u64) {
    let mut acc = 0u64;
    for c in cfg.counts.iter_mut().rev() {
        if acc >= n {
            *c = 0;
        } else {
            *c = (*c).min(n - acc);
            acc += *c;
        }
    }
    cfg.trim();
}

/// Removes sites strictly below `lower`; with `upper`, also the sites at
/// or above it, returning how many particles those held.
fn lattice_kill(cfg: &mut LatticeConfig, lower: f64, upper: Option<f64>) -> u64 {
    let mut hits = 0u64;
    for i in 0..cfg.counts.len() {
        let x = cfg.position(i);
        if x < lower {
            cfg.counts[i] = 0;
        } else if upper.is_some_and(|u| x >= u) {
            hits += cfg.counts[i];
            cfg.counts[i] = 0;
        }
    }
    cfg.trim();
    hits
}

/// One generation of the Bernoulli lattice walk: branching, steps of +1 with
/// probability p, then selection of the top `n_now`.
pub fn step_lattice(pop: &LatticeConfig, p: f64, xi: &OffspringLaw, n_now: u64, rng: &mut SimRng) -> Result<LatticeConfig> {
    if !(0.0..=1.0).contains(&p) {
        return Err(precondition(format!("step probability must lie in [0,1], got {p}")));
    }
    if n_now == 0 {
        return Err(precondition("selection size must be >= 1"));
    }
    let mut next = lattice_reproduce(pop, xi, true, &Kernel::bernoulli(p), rng, u64::MAX).map_err(Error::Resource)?;
    lattice_select(&mut next, n_now);
    Ok(next)
}

// ---------------------------------------------------------------------------
// Real engine

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Particle<T> {
    pub x: f64,
    pub tag: T,
}

/// Keeps the top n positions, leaving them in descending order.
pub fn select_top(positions: &mut Vec<f64>, n: u64) {
    let mut parts: Vec<Particle<()>> = positions.iter().map(|&x| Particle { x, tag: () }).collect();
    select_real(&mut parts, n);
    *positions = parts.into_iter().map(|p| p.x).collect();
}

/// Keeps the top n particles of a lattice configuration.
pub fn select_top_lattice(cfg: &mut LatticeConfig, n: u64) {
    lattice_select(cfg, n);
}

/// Keeps the first n in descending order and leaves the buffer sorted.
pub(crate) fn select_real<T>(parts: &mut Vec<Particle<T>>, n: u64) {
    if parts.len() as u64 > n {
        let n = n as usize;
        if n == 0 {
            parts.clear();
        } else {
            parts.select_nth_unstable_by(n - 1, |a, b| b.x.total_cmp(&a.x));
            parts.truncate(n);
        }
    }
    parts.sort_by(|a, b| b.x.total_cmp(&a.x));
}

#[derive(Debug, Clone)]
enum Move {
    /// Integer offsets scaled by `spacing`.
    Kernel { kernel: Kernel, spacing: f64 },
    Gaussian { sd: f64 },
}

/// Curves at the start and end of a step, for one color.
#[derive(Debug, Clone, Copy)]
struct Curves {
    lo0: f64,
    lo1: f64,
    hi0: f64,
    hi1: f64,
}

impl Curves {
    fn raised(self, s0: f64, s1: f64) -> Curves {
        Curves { lo0: self.lo0 + s0, lo1: self.lo1 + s1, hi0: self.hi0 + s0, hi1: self.hi1 + s1 }
    }
}

struct BarrierStep {
    mode: BarrierMode,
    blue: Curves,
    red: Curves,
    /// Variance of the step, for the Brownian-bridge crossing probabilities.
    bridge_var: Option<f64>,
}

enum Fate {
    Keep(u64),
    Kill,
    UpperKill,
    Recolor,
}

/// exp(−2 d₀d₁/var): chance a Brownian bridge between points at distances
/// d₀, d₁ from a linear curve touched it.
fn bridge_hit<R: Rng + ?Sized>(d0: f64, d1: f64, var: Option<f64>, rng: &mut R) -> bool {
    let Some(var) = var else { return false };
    if var <= 0.0 {
        return false;
    }
    let p = (-2.0 * d0 * d1 / var).exp();
    p > 0.0 && rng.random::<f64>() < p
}

impl BarrierStep {
    fn judge<R: Rng + ?Sized>(&self, x0: f64, x1: f64, tag: u64, rng: &mut R) -> Fate {
        let c = if tag == 0 { self.blue } else { self.red };
        if x1 < c.lo1 || bridge_hit(x0 - c.lo0, x1 - c.lo1, self.bridge_var, rng) {
            return Fate::Kill;
        }
        if self.mode == BarrierMode::KillLowerOnly {
            return Fate::Keep(tag);
        }
        let hit = x1 >= c.hi1 || bridge_hit(c.hi0 - x0, c.hi1 - x1, self.bridge_var, rng);
        match (hit, self.mode, tag) {
            (false, _, _) => Fate::Keep(tag),
            (true, BarrierMode::Color, 0) => Fate::Recolor,
            _ => Fate::UpperKill,
        }
    }
}

#[derive(Default)]
struct StepCounts {
    upper_hits: u64,
    red_kills: u64,
}

/// Reproduction, displacement and barrier killing for one step. Parents
/// with equal (position, tag) form one run and are treated together.
#[allow(clippy::too_many_arguments)]
fn real_reproduce<R: Rng + ?Sized>(
    parts: &[Particle<u64>],
    law: &OffspringLaw,
    branch_prob: Option<f64>,
    mv: &Move,
    barrier: Option<&BarrierStep>,
    rng: &mut R,
    max_slots: u64,
    counts: &mut StepCounts,
) -> std::result::Result<Vec<Particle<u64>>, String> {
    let mut out: Vec<Particle<u64>> = Vec::with_capacity(parts.len() * law.max_count() as usize);
    let mut i = 0;
    while i < parts.len() {
        let (x0, tag) = (parts[i].x, parts[i].tag);
        let mut j = i + 1;
        if branch_prob.is_none_or(|p| p >= 1.0) {
            while j < parts.len() && parts[j].x == x0 && parts[j].tag == tag {
                j += 1;
            }
        }
        let run = (j - i) as u64;
        let total = match branch_prob {
            Some(p) if p >= 1.0 => offspring_total(run, law, rng).ok_or("particle count overflow")?,
            Some(p) if p > 0.0 => {
                if rng.random::<f64>() < p {
                    law.sample(rng) as u64
                } else {
                    1
                }
            }
            _ => run,
        };
        if out.len() as u64 + total > max_slots {
            return Err(format!("population needs more than {max_slots} slots"));
        }
        let mut place = |x1: f64, rng: &mut R| match barrier {
            None => out.push(Particle { x: x1, tag }),
            Some(b) => match b.judge(x0, x1, tag, rng) {
                Fate::Keep(t) => out.push(Particle { x: x1, tag: t }),
                Fate::Kill => {}
                Fate::UpperKill => {
                    if tag == 0 {
                        counts.upper_hits += 1;
                    } else {
                        counts.red_kills += 1;
                    }
                }
                Fate::Recolor => {
                    counts.upper_hits += 1;
                    out.push(Particle { x: x1, tag: 1 });
                }
            },
        };
        match mv {
            Move::Kernel { kernel, spacing } => {
                let mut groups = Vec::new();
                kernel.spread(total, rng, |off, c| groups.push((off, c)));
                for (off, c) in groups {
                    for _ in 0..c {
                        place(x0 + off as f64 * spacing, rng);
                    }
                }
            }
            Move::Gaussian { sd } => {
                for _ in 0..total {
                    let z: f64 = rng.sample(StandardNormal);
                    place(x0 + sd * z, rng);
                }
            }
        }
        i = j;
    }
    Ok(out)
}

fn real_step(pop: &[f64], mv: Move, xi: &OffspringLaw, n_now: u64, rng: &mut SimRng) -> Result<Vec<f64>> {
    if n_now == 0 {
        return Err(precondition("selection size must be >= 1"));
    }
    let mut parts: Vec<Particle<u64>> = pop.iter().map(|&x| Particle { x, tag: 0 }).collect();
    parts.sort_by(|a, b| b.x.total_cmp(&a.x));
    let mut counts = StepCounts::default();
    let mut next =
        real_reproduce(&parts, xi, Some(1.0), &mv, None, rng, u64::MAX, &mut counts).map_err(Error::Resource)?;
    select_real(&mut next, n_now);
    Ok(next.into_iter().map(|p| p.x).collect())
}

/// One generation with Gaussian displacements: every parent is replaced by
/// its children, each moved by N(0, step_std²), then the top `n_now` are
/// kept. Returns positions in descending order.
pub fn step_real(pop: &[f64], step_std: f64, xi: &OffspringLaw, n_now: u64, rng: &mut SimRng) -> Result<Vec<f64>> {
    if !(step_std >= 0.0) {
        return Err(precondition(format!("step deviation must be >= 0, got {step_std}")));
    }
    real_step(pop, Move::Gaussian { sd: step_std }, xi, n_now, rng)
}

/// [`step_real`] with +1 steps of probability p instead of Gaussian ones,
/// drawn exactly as the lattice engine draws them.
pub fn step_real_two_point(pop: &[f64], p: f64, xi: &OffspringLaw, n_now: u64, rng: &mut SimRng) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(precondition(format!("step probability must lie in [0,1], got {p}")));
    }
    real_step(pop, Move::Kernel { kernel: Kernel::bernoulli(p), spacing: 1.0 }, xi, n_now, rng)
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Debug, Clone, Copy)]
enum StepParam {
    Prob(f64),
    Variance(f64),
}

#[derive(Debug, Clone, Copy)]
struct Step {
    t0: f64,
    t1: f64,
    /// Branching probability per particle; 1 for simultaneous branching.
    branch: f64,
    param: StepParam,
}

/// ∫_a^b σ(u)² du, exactly on each polynomial piece.
fn square_integral(sigma: &Profile, a: f64, b: f64) -> f64 {
    let mut total = 0.0;
    for (lo, hi, c) in sigma.pieces() {
        let (l, h) = (lo.max(a), hi.min(b));
        if h <= l {
            continue;
        }
        let mut sq = vec![0.0; 2 * c.len() - 1];
        for (i, x) in c.iter().enumerate() {
            for (j, y) in c.iter().enumerate() {
                sq[i + j] += x * y;
            }
        }
        let prim = |u: f64| sq.iter().enumerate().rev().fold(0.0, |acc, (k, ck)| acc * u + ck / (k + 1) as f64) * u;
        total += prim(h) - prim(l);
    }
    total
}

fn plan_steps(spec: &SimSpec) -> Result<Vec<Step>> {
    let t = spec.horizon;
    let gaussian = |t0: f64, t1: f64| match &spec.brw.increment {
        Increment::Gaussian(s) => Ok(StepParam::Variance(t * square_integral(s, t0 / t, t1 / t))),
        Increment::Bernoulli(_) => Err(precondition("Bernoulli increments need generation time")),
    };
    let mut steps = Vec::new();
    match spec.time {
        TimeMode::Generations => {
            if t.fract() != 0.0 {
                return Err(precondition(format!("generation horizon must be an integer, got {t}")));
            }
            let n = t as u64;
            for i in 0..n {
                let (t0, t1) = (i as f64, (i + 1) as f64);
                let param = match &spec.brw.increment {
                    Increment::Bernoulli(p) => StepParam::Prob(t * p.integral(t0 / t, t1 / t)?),
                    Increment::Gaussian(s) => StepParam::Variance(t * square_integral(s, t0 / t, t1 / t)),
                };
                steps.push(Step { t0, t1, branch: 1.0, param });
            }
        }
        TimeMode::Deterministic { substeps } => {
            if substeps == 0 {
                return Err(precondition("substeps must be >= 1"));
            }
            let a = 2.0 * spec.brw.offspring.mean().ln();
            let dt = a / substeps as f64;
            let epochs = (t / a).floor() as u64;
            for k in 0..=epochs {
                let start = k as f64 * a;
                if start >= t {
                    break;
                }
                let end = ((k + 1) as f64 * a).min(t);
                let n = if end - start >= a { substeps as u64 } else { ((end - start) / dt).ceil().max(1.0) as u64 };
                for j in 0..n {
                    let t0 = start + j as f64 * (end - start) / n as f64;
                    let t1 = if j + 1 == n { end } else { start + (j + 1) as f64 * (end - start) / n as f64 };
                    let branch = if j + 1 == n && end < t { 1.0 } else { 0.0 };
                    steps.push(Step { t0, t1, branch, param: gaussian(t0, t1)? });
                }
            }
        }
        TimeMode::Clock { dt } => {
            if !(dt > 0.0) {
                return Err(precondition("clock step must be positive"));
            }
            let beta0 = 1.0 / (2.0 * (spec.brw.offspring.mean() - 1.0));
            if beta0 * dt > 1.0 {
                return Err(precondition(format!("clock step {dt} exceeds 1/β₀ = {}", 1.0 / beta0)));
            }
            let n = (t / dt).ceil() as u64;
            for i in 0..n {
                let t0 = i as f64 * dt;
                let t1 = ((i + 1) as f64 * dt).min(t);
                steps.push(Step { t0, t1, branch: beta0 * (t1 - t0), param: gaussian(t0, t1)? });
            }
        }
    }
    Ok(steps)
}

enum Pop {
    Lattice(LatticeConfig),
    Real(Vec<Particle<u64>>),
}

impl Pop {
    fn mass(&self) -> u64 {
        match self {
            Pop::Lattice(c) => c.counts.iter().sum(),
            Pop::Real(v) => v.len() as u64,
        }
    }

    fn config(&self) -> ParticleConfiguration {
        match self {
            Pop::Lattice(c) => ParticleConfiguration::Lattice(c.clone()),
            Pop::Real(v) => ParticleConfiguration::Real(v.iter().map(|p| p.x).collect()),
        }
    }

    fn select(&mut self, n: u64) {
        match self {
            Pop::Lattice(c) => lattice_select(c, n),
            Pop::Real(v) => select_real(v, n),
        }
    }
}

fn validate(spec: &SimSpec) -> Result<()> {
    if !(spec.horizon > 0.0 && spec.horizon.is_finite()) {
        return Err(precondition(format!("horizon must be positive, got {}", spec.horizon)));
    }
    match &spec.selection {
        SimSelection::Fixed(0) => return Err(precondition("selection size must be >= 1")),
        SimSelection::Schedule { hat_l, ell } => {
            if !(*hat_l > 0.0) {
                return Err(precondition("schedule needs hat_L > 0"));
            }
            ell.require_positive("schedule ell")?;
        }
        _ => {}
    }
    if spec.profile_grid.iter().any(|y| !(0.0..=1.0).contains(y)) {
        return Err(precondition("profile grid points must lie in [0,1]"));
    }
    if spec.quantile_ranks.contains(&0) {
        return Err(precondition("quantile ranks start at 1"));
    }
    if let Some(b) = &spec.barrier {
        if b.curves.times.len() < 2 || b.curves.times.len() != b.curves.lower.len() || b.curves.lower.len() != b.curves.upper.len() {
            return Err(precondition("barrier curves need matching samples at two times or more"));
        }
        let (z1, z2) = b.interval;
        if !(z1 <= z2) {
            return Err(precondition("barrier window must satisfy z1 <= z2"));
        }
    }
    Ok(())
}

fn initial_config(spec: &SimSpec, spacing: Option<f64>) -> Result<ParticleConfiguration> {
    let cfg = match &spec.initial {
        InitialConfig::AtZero(n) => {
            if *n == 0 {
                return Err(precondition("initial configuration must be nonempty"));
            }
            match spacing {
                Some(d) => ParticleConfiguration::lattice_at_zero(*n, d),
                None => ParticleConfiguration::at_zero(*n),
            }
        }
        InitialConfig::MuEps { eps, l, sigma0 } => ParticleConfiguration::mu_eps(*eps, *l, *sigma0, spacing)?,
        InitialConfig::Given(c) => match (c, spacing) {
            (ParticleConfiguration::Lattice(l), Some(d)) if l.spacing == d => c.clone(),
            (ParticleConfiguration::Real(_), None) => c.clone(),
            _ => ParticleConfiguration::from_atoms(&c.atoms_desc(), spacing)?,
        },
    };
    if cfg.is_empty() {
        return Err(precondition("initial configuration must be nonempty"));
    }
    Ok(cfg)
}

/// Scale of the front at rescaled time r: σ(r) for Brownian time, 1/θ_r for
/// generations.
fn front_scale(spec: &SimSpec, r: f64) -> f64 {
    match (&spec.brw.increment, spec.time) {
        (Increment::Gaussian(s), TimeMode::Deterministic { .. } | TimeMode::Clock { .. }) => s.value(r),
        _ => spec.brw.triple(r).map(|t| 1.0 / t.theta).unwrap_or(f64::NAN),
    }
}

fn record(spec: &SimSpec, pop: &Pop, time: f64, n_now: u64) -> CheckpointRecord {
    let cfg = pop.config();
    let max = cfg.max().unwrap_or(f64::NAN);
    let min = cfg.min().unwrap_or(f64::NAN);
    let quantiles = spec.quantile_ranks.iter().map(|&m| cfg.quantile(m)).collect();
    let l = (n_now as f64).ln();
    let scale = front_scale(spec, (time / spec.horizon).clamp(0.0, 1.0));
    let profile = if l > 0.0 && scale > 0.0 {
        empirical_exponent_profile(&cfg, max, scale, l, &spec.profile_grid).unwrap_or_default()
    } else {
        vec![0.0; spec.profile_grid.len()]
    };
    CheckpointRecord { time, mass: cfg.mass(), max, min, quantiles, profile }
}

/// Runs the selected system over the horizon. Invalid specs are errors;
/// resource exhaustion ends the run early with a flagged, partial trajectory.
pub fn run(spec: &SimSpec) -> Result<Trajectory> {
    validate(spec)?;
    let steps = plan_steps(spec)?;
    let law = &spec.brw.offspring;
    let bernoulli = matches!(spec.brw.increment, Increment::Bernoulli(_));
    let min_sd = steps
        .iter()
        .filter_map(|s| match s.param {
            StepParam::Variance(v) => Some(v.sqrt()),
            StepParam::Prob(_) => None,
        })
        .fold(f64::INFINITY, f64::min);
    let spacing = match spec.engine {
        EngineChoice::Real => None,
        EngineChoice::Lattice { spacing: Some(d) } => Some(d),
        EngineChoice::Lattice { spacing: None } => Some(if bernoulli { 1.0 } else { min_sd / 4.0 }),
        EngineChoice::Auto => {
            let peak = match &spec.selection {
                SimSelection::Fixed(n) => *n as f64,
                SimSelection::Schedule { hat_l, ell } => (hat_l * ell.upper_bound()).exp(),
            };
            let real_only = matches!(spec.time, TimeMode::Clock { .. }) || spec.barrier.is_some();
            if bernoulli {
                Some(1.0)
            } else if peak * law.max_count() as f64 > 1e6 && !real_only {
                Some(min_sd / 4.0)
            } else {
                None
            }
        }
    };
    if let Some(d) = spacing {
        if !(d > 0.0 && d.is_finite()) {
            return Err(precondition(format!("lattice spacing must be positive, got {d}")));
        }
        if bernoulli && d != 1.0 {
            return Err(precondition("Bernoulli walks live on the unit lattice"));
        }
        if matches!(spec.time, TimeMode::Clock { .. }) {
            return Err(precondition("clock mode needs the real engine"));
        }
        if spec.barrier.as_ref().is_some_and(|b| b.mode == BarrierMode::Color) {
            return Err(precondition("color barriers need the real engine"));
        }
    }
    let mut pop = match initial_config(spec, spacing)? {
        ParticleConfiguration::Lattice(c) => Pop::Lattice(c),
        ParticleConfiguration::Real(v) => Pop::Real(v.into_iter().map(|x| Particle { x, tag: 0 }).collect()),
    };
    let mut rng = replica_rng(spec.seed, spec.replica);
    let mut checkpoints: Vec<f64> = spec.checkpoints.iter().copied().filter(|&c| c < spec.horizon).collect();
    checkpoints.push(spec.horizon);
    checkpoints.sort_by(f64::total_cmp);
    checkpoints.dedup();
    let mut next_cp = 0;
    let mut records = Vec::new();
    let mut counts = BarrierCounts::default();
    let mut n_now = spec.selection.size_at(0.0);

    let curves_at = |b: &BarrierSpec, t: f64| {
        let (lo, hi) = b.curves.at(t);
        let s = if b.mode == BarrierMode::Color { b.red_shift * b.curves.scale_at(t) } else { 0.0 };
        (lo, hi, s)
    };

    // Time 0: barrier, then selection.
    if let Some(b) = &spec.barrier {
        let (lo, hi, _) = curves_at(b, 0.0);
        let upper = (b.mode != BarrierMode::KillLowerOnly).then_some(hi);
        match &mut pop {
            Pop::Lattice(c) => counts.upper_hits += lattice_kill(c, lo, upper),
            Pop::Real(v) => v.retain(|p| {
                let hit = upper.is_some_and(|u| p.x >= u);
                if hit && b.mode == BarrierMode::KillBoth {
                    counts.upper_hits += 1;
                }
                p.x >= lo && !(hit && b.mode == BarrierMode::KillBoth)
            }),
        }
    }
    pop.select(n_now);
    let mut termination = Termination::Completed;
    if pop.mass() == 0 {
        termination = Termination::Extinct { time: 0.0 };
    }
    while next_cp < checkpoints.len() && checkpoints[next_cp] <= 0.0 && pop.mass() > 0 {
        records.push(record(spec, &pop, 0.0, n_now));
        next_cp += 1;
    }

    let mut done = 0u64;
    if termination == Termination::Completed {
        for step in &steps {
            if spec.limits.deadline.is_some_and(|d| Instant::now() >= d) {
                termination = Termination::Aborted { time: step.t0, reason: "deadline reached".into() };
                break;
            }
            let barrier_step = spec.barrier.as_ref().map(|b| {
                let (lo0, hi0, s0) = curves_at(b, step.t0);
                let (lo1, hi1, s1) = curves_at(b, step.t1);
                let blue = Curves { lo0, lo1, hi0, hi1 };
                let bridge_var = match (step.param, spec.time) {
                    (StepParam::Variance(v), TimeMode::Deterministic { .. } | TimeMode::Clock { .. }) => Some(v),
                    _ => None,
                };
                BarrierStep { mode: b.mode, blue, red: blue.raised(s0, s1), bridge_var }
            });
            let outcome = match &mut pop {
                Pop::Lattice(c) => {
                    let kernel = match step.param {
                        StepParam::Prob(p) => Kernel::bernoulli(p),
                        StepParam::Variance(v) => Kernel::gaussian(v.sqrt(), c.spacing),
                    };
                    lattice_reproduce(c, law, step.branch >= 1.0, &kernel, &mut rng, spec.limits.max_sites).map(|mut next| {
                        if let Some(b) = &barrier_step {
                            let upper = (b.mode != BarrierMode::KillLowerOnly).then_some(b.blue.hi1);
                            counts.upper_hits += lattice_kill(&mut next, b.blue.lo1, upper);
                        }
                        Pop::Lattice(next)
                    })
                }
                Pop::Real(v) => {
                    let mv = match step.param {
                        StepParam::Prob(p) => Move::Kernel { kernel: Kernel::bernoulli(p), spacing: 1.0 },
                        StepParam::Variance(var) => Move::Gaussian { sd: var.sqrt() },
                    };
                    let branch = if step.branch > 0.0 { Some(step.branch) } else { None };
                    let mut sc = StepCounts::default();
                    let r = real_reproduce(v, law, branch, &mv, barrier_step.as_ref(), &mut rng, spec.limits.max_real_slots, &mut sc);
                    counts.upper_hits += sc.upper_hits;
                    counts.red_kills += sc.red_kills;
                    r.map(Pop::Real)
                }
            };
            match outcome {
                Ok(next) => pop = next,
                Err(reason) => {
                    termination = Termination::Aborted { time: step.t0, reason };
                    break;
                }
            }
            done += 1;
            n_now = spec.selection.size_at(step.t1 / spec.horizon);
            pop.select(n_now);
            if pop.mass() == 0 {
                termination = Termination::Extinct { time: step.t1 };
                break;
            }
            while next_cp < checkpoints.len() && checkpoints[next_cp] <= step.t1 + 1e-9 * spec.horizon {
                records.push(record(spec, &pop, step.t1, n_now));
                next_cp += 1;
            }
        }
    }

    let final_config = pop.config();
    let barrier = spec.barrier.as_ref().map(|b| {
        let t_end = records.last().map(|r| r.time).unwrap_or(0.0);
        let (lo, _) = b.curves.at(t_end);
        counts.survivors = if lo.is_finite() {
            let scale = b.curves.scale_at(t_end);
            let (a, z) = (lo + b.interval.0 * scale, lo + b.interval.1 * scale);
            match &pop {
                Pop::Lattice(_) => final_config.mass_at_or_above(a) - final_config.mass_at_or_above(z.next_up()),
                Pop::Real(v) => v.iter().filter(|p| p.tag == 0 && p.x >= a && p.x <= z).count() as u64,
            }
        } else {
            pop.mass()
        };
        counts
    });
    Ok(Trajectory {
        records,
        final_config,
        quantile_ranks: spec.quantile_ranks.clone(),
        profile_grid: spec.profile_grid.clone(),
        barrier,
        termination,
        steps: done,
    })
}

/// [`run`] for a spec carrying barriers.
pub fn run_with_barriers(spec: &SimSpec) -> Result<Trajectory> {
    if spec.barrier.is_none() {
        return Err(precondition("run_with_barriers needs a barrier spec"));
    }
    run(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_integral_is_exact() {
        let s = Profile::parse("piecewise:[0:1,2|0.5:1.5,1]").unwrap();
        // (1+2u)² on [0, 0.5] and (1.5+u)² on [0.5, 1]
        let want = ((2.0f64).powi(3) - 1.0) / 6.0 + ((2.5f64).powi(3) - 8.0) / 3.0;
        assert!((square_integral(&s, 0.0, 1.0) - want).abs() < 1e-14);
    }

    #[test]
    fn kernel_probabilities_are_conditional() {
        let k = Kernel::gaussian(1.0, 0.25);
        assert_eq!(k.offsets[0], 0);
        assert_eq!(*k.cond.last().unwrap(), 1.0);
        assert!(k.cond.iter().all(|c| (0.0..=1.0).contains(c)));
        assert_eq!(k.hi, 48);
        assert_eq!(k.lo, -48);
    }

    #[test]
    fn lattice_selection_cuts_boundary_site() {
        let mut c = LatticeConfig { offset: -1, spacing: 1.0, counts: vec![5, 3, 2] };
        lattice_select(&mut c, 4);
        assert_eq!(c, LatticeConfig { offset: 0, spacing: 1.0, counts: vec![2, 2] });
    }

    #[test]
    fn rounding_half_up() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(2.4999), 2);
        assert_eq!(round_half_up(1e30), u64::MAX);
    }
}
