//! The continuous random energy model on the binary tree: full sampling at
//! small depth, beam search at any depth, and the check that beam search is
//! a branching Brownian motion with selection in disguise.
//!
//! Every edge draw is addressed by (level, vertex key), with keys derived
//! from the parent key, so a full tree, a beam and a particle system built
//! on the same seed all see the same increments on shared vertices.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::measure::{LatticeConfig, ParticleConfiguration};
use crate::profiles::{integrate_with_breaks, Profile, ProfileFn};
use crate::rng::{child_key, counter_normal, replica_rng, root_key};
use crate::simulator::{lattice_reproduce, lattice_select, select_real, Kernel, Particle};
use crate::theory::OffspringLaw;

pub const MAX_FULL_DEPTH: usize = 26;
pub const MAX_EXACT_BEAM: u64 = 10_000_000;
pub const MAX_IDENTITY_DEPTH: usize = 22;

/// Half-width, in deviations, of the binned beam's increment kernel.
const BINNED_HALF_WIDTH: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CremSpec {
    /// Covariance function A, nondecreasing with A(0) = 0 and A(1) = 1.
    pub a: Profile,
    pub depth: usize,
    pub seed: u64,
}

impl CremSpec {
    pub fn new(a: Profile, depth: usize, seed: u64) -> Result<CremSpec> {
        if depth == 0 {
            return Err(precondition("tree depth must be >= 1"));
        }
        if a.value(0.0).abs() > 1e-12 || (a.value(1.0) - 1.0).abs() > 1e-12 {
            return Err(precondition(format!(
                "A must satisfy A(0) = 0 and A(1) = 1, got {} and {}",
                a.value(0.0),
                a.value(1.0)
            )));
        }
        let grid = 1000;
        for k in 0..=grid {
            let u = k as f64 / grid as f64;
            if a.slope(u) < -1e-12 {
                return Err(precondition(format!("A must be nondecreasing; A'({u}) = {}", a.slope(u))));
            }
        }
        Ok(CremSpec { a, depth, seed })
    }

    /// The spec with A(u) = ∫_0^u A', accepting ∫_0^1 A' = 1 within 1e-8.
    pub fn from_derivative(a_prime: &Profile, depth: usize, seed: u64) -> Result<CremSpec> {
        if a_prime.lower_bound() < 0.0 {
            return Err(precondition("A' must be nonnegative"));
        }
        let a = a_prime.antiderivative();
        let total = a.value(1.0);
        if (total - 1.0).abs() > 1e-8 {
            return Err(precondition(format!("A' must integrate to 1, got {total}")));
        }
        CremSpec::new(a.scaled(1.0 / total), depth, seed)
    }

    /// Variance T(A((i+1)/T) − A(i/T)) of the edges from level i to i+1.
    pub fn edge_variance(&self, i: usize) -> f64 {
        let t = self.depth as f64;
        (t * (self.a.value((i + 1) as f64 / t) - self.a.value(i as f64 / t))).max(0.0)
    }
}

/// Vertex values by level; level i holds 2^i entries in heap order, so the
/// children of entry j sit at 2j and 2j+1 of the next level.
#[derive(Debug, Clone, PartialEq)]
pub struct CremTree {
    pub levels: Vec<Vec<f64>>,
}

impl CremTree {
    pub fn leaves(&self) -> &[f64] {
        self.levels.last().unwrap()
    }
}

pub fn sample_crem(spec: &CremSpec) -> Result<CremTree> {
    if spec.depth > MAX_FULL_DEPTH {
        return Err(Error::Resource(format!(
            "a full tree of depth {} is too large (limit {MAX_FULL_DEPTH}); use beam search",
            spec.depth
        )));
    }
    let mut levels = vec![vec![0.0]];
    let mut keys = vec![root_key(spec.seed)];
    for i in 0..spec.depth {
        let sd = spec.edge_variance(i).sqrt();
        let prev = &levels[i];
        let mut values = Vec::with_capacity(2 * prev.len());
        let mut next_keys = Vec::with_capacity(2 * prev.len());
        for (j, &x) in prev.iter().enumerate() {
            for bit in 0..2 {
                let k = child_key(keys[j], bit);
                values.push(x + sd * counter_normal(i as u64 + 1, k));
                next_keys.push(k);
            }
        }
        levels.push(values);
        keys = next_keys;
    }
    Ok(CremTree { levels })
}

pub fn exact_max(tree: &CremTree) -> f64 {
    tree.leaves().iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamResult {
    /// Retained leaf values, descending.
    pub values: Vec<f64>,
    /// Keys of the retained leaves, aligned with `values`.
    pub keys: Vec<u64>,
    /// Number of Gaussian increments drawn.
    pub queries: u128,
}

impl BeamResult {
    pub fn max(&self) -> f64 {
        self.values[0]
    }
}

/// Breadth-first beam of width n: every retained vertex is expanded into its
/// two children and the n highest of those are kept.
pub fn ncrem_beam_search(spec: &CremSpec, n: u64) -> Result<BeamResult> {
    if n == 0 {
        return Err(precondition("beam width must be >= 1"));
    }
    if n > MAX_EXACT_BEAM {
        return Err(Error::Resource(format!(
            "beam width {n} exceeds {MAX_EXACT_BEAM}; use the binned beam"
        )));
    }
    let mut beam = vec![Particle { x: 0.0, tag: root_key(spec.seed) }];
    let mut queries = 0u128;
    for i in 0..spec.depth {
        let sd = spec.edge_variance(i).sqrt();
        let mut children = Vec::with_capacity(2 * beam.len());
        for p in &beam {
            for bit in 0..2 {
                let k = child_key(p.tag, bit);
                children.push(Particle { x: p.x + sd * counter_normal(i as u64 + 1, k), tag: k });
            }
        }
        queries += children.len() as u128;
        select_real(&mut children, n);
        beam = children;
    }
    Ok(BeamResult {
        values: beam.iter().map(|p| p.x).collect(),
        keys: beam.iter().map(|p| p.tag).collect(),
        queries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedBeamResult {
    pub max: f64,
    pub queries: u128,
    pub final_config: ParticleConfiguration,
}

/// Beam search on values binned to `spacing·ℤ`: the beam is kept as counts
/// per bin and each level's increments are spread over bins by a discretized
/// Gaussian kernel. Suited to widths far beyond what can be stored vertex by
/// vertex; draws come from the replica stream of `spec.seed`, not from the
/// vertex-addressed increments.
pub fn ncrem_binned_beam(spec: &CremSpec, n: u64, spacing: f64) -> Result<BinnedBeamResult> {
    if n == 0 {
        return Err(precondition("beam width must be >= 1"));
    }
    if !(spacing > 0.0) {
        return Err(precondition("bin spacing must be positive"));
    }
    let mut rng = replica_rng(spec.seed, 0);
    let two = OffspringLaw::fixed(2)?;
    let mut cfg = LatticeConfig { offset: 0, spacing, counts: vec![1] };
    let mut queries = 0u128;
    for i in 0..spec.depth {
        let kernel = Kernel::gaussian_truncated(spec.edge_variance(i).sqrt(), spacing, BINNED_HALF_WIDTH);
        queries += 2 * cfg.counts.iter().map(|&c| c as u128).sum::<u128>();
        cfg = lattice_reproduce(&cfg, &two, true, &kernel, &mut rng, u64::MAX).map_err(Error::Resource)?;
        lattice_select(&mut cfg, n);
    }
    let final_config = ParticleConfiguration::Lattice(cfg);
    Ok(BinnedBeamResult { max: final_config.max().unwrap(), queries, final_config })
}

/// Builds the branching Brownian motion with deterministic binary branching
/// on the grid a = 2 log 2, variance A'(t/(aT)) and selection of the top 2N
/// after each branching, driving particle j's displacement over epoch i with
/// the increment of its tree vertex, and compares its particles at time aT,
/// rescaled by 1/√a, with the width-N beam.
pub fn bbmdb_crem_identity_check(a: &Profile, depth: usize, n: u64, seed: u64) -> Result<bool> {
    bbmdb_crem_identity_check_shifted(a, depth, n, seed, 0)
}

/// [`bbmdb_crem_identity_check`] with the particle system reading its
/// increments `level_shift` levels too deep, which breaks the alignment.
pub fn bbmdb_crem_identity_check_shifted(a: &Profile, depth: usize, n: u64, seed: u64, level_shift: u64) -> Result<bool> {
    if depth > MAX_IDENTITY_DEPTH {
        return Err(precondition(format!("identity check needs depth <= {MAX_IDENTITY_DEPTH}")));
    }
    let spec = CremSpec::new(a.clone(), depth, seed)?;
    let beam = ncrem_beam_search(&spec, n)?;

    let epoch = 2.0 * LN_2;
    let horizon = epoch * depth as f64;
    let breaks = a.kinks();
    let a_prime = |u: f64| a.slope(u).max(0.0);
    // Branch the root at time 0.
    let root = root_key(seed);
    let mut particles: Vec<Particle<u64>> = (0..2).map(|b| Particle { x: 0.0, tag: child_key(root, b) }).collect();
    for i in 0..depth {
        let (t0, t1) = (i as f64 * epoch, (i + 1) as f64 * epoch);
        let var = horizon * integrate_with_breaks(a_prime, t0 / horizon, t1 / horizon, 1e-14, &breaks)?;
        let sd = var.max(0.0).sqrt();
        for p in particles.iter_mut() {
            p.x += sd * counter_normal(i as u64 + 1 + level_shift, p.tag);
        }
        if i + 1 < depth {
            let mut next = Vec::with_capacity(2 * particles.len());
            for p in &particles {
                for b in 0..2 {
                    next.push(Particle { x: p.x, tag: child_key(p.tag, b) });
                }
            }
            select_real(&mut next, 2 * n);
            particles = next;
        }
    }
    // Branching at aT followed by 2N-selection keeps each of the top N
    // particles twice; comparing the top N once is equivalent.
    select_real(&mut particles, n);

    let scale = epoch.sqrt();
    let mut bbm: Vec<(u64, f64)> = particles.iter().map(|p| (p.tag, p.x / scale)).collect();
    let mut crem: Vec<(u64, f64)> = beam.keys.iter().copied().zip(beam.values.iter().copied()).collect();
    bbm.sort_by_key(|e| e.0);
    crem.sort_by_key(|e| e.0);
    Ok(bbm.len() == crem.len()
        && bbm.iter().zip(&crem).all(|(x, y)| x.0 == y.0 && (x.1 - y.1).abs() <= 1e-9 * x.1.abs().max(1.0)))
}
