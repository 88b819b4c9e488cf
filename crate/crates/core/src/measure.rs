//! Finite counting measures on the line: the particle configurations of the
//! selected systems, in occupancy-count or position-buffer form.

use serde::{Deserialize, Serialize};

use crate::error::{domain, precondition, Result};

/// Occupancy counts on the lattice `spacing·ℤ`; `counts[i]` sits at site
/// `offset + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeConfig {
    pub offset: i64,
    pub spacing: f64,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticleConfiguration {
    Lattice(LatticeConfig),
    /// Positions sorted in descending order.
    Real(Vec<f64>),
}

impl LatticeConfig {
    pub fn position(&self, i: usize) -> f64 {
        (self.offset + i as i64) as f64 * self.spacing
    }

    /// Drops empty sites at both ends.
    pub fn trim(&mut self) {
        let first = self.counts.iter().position(|&c| c > 0);
        match first {
            None => {
                self.counts.clear();
            }
            Some(first) => {
                let last = self.counts.iter().rposition(|&c| c > 0).unwrap();
                self.counts.truncate(last + 1);
                self.counts.drain(..first);
                self.offset += first as i64;
            }
        }
    }
}

impl ParticleConfiguration {
    pub fn from_positions(mut positions: Vec<f64>) -> Result<ParticleConfiguration> {
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(domain("particle positions must be finite"));
        }
        positions.sort_by(|a, b| b.total_cmp(a));
        Ok(ParticleConfiguration::Real(positions))
    }

    /// `n` particles at the origin, as a position buffer.
    pub fn at_zero(n: u64) -> ParticleConfiguration {
        ParticleConfiguration::Real(vec![0.0; n as usize])
    }

    /// `n` particles at the origin of the lattice `spacing·ℤ`.
    pub fn lattice_at_zero(n: u64, spacing: f64) -> ParticleConfiguration {
        ParticleConfiguration::Lattice(LatticeConfig { offset: 0, spacing, counts: vec![n] })
    }

    /// Atoms (position, multiplicity) with arbitrary positions; lattice
    /// output snaps each position to the nearest site.
    pub fn from_atoms(atoms: &[(f64, u64)], lattice_spacing: Option<f64>) -> Result<ParticleConfiguration> {
        if atoms.iter().any(|(x, _)| !x.is_finite()) {
            return Err(domain("atom positions must be finite"));
        }
        match lattice_spacing {
            None => {
                let mut pos = Vec::with_capacity(atoms.iter().map(|a| a.1 as usize).sum());
                for &(x, c) in atoms {
                    pos.extend(std::iter::repeat_n(x, c as usize));
                }
                ParticleConfiguration::from_positions(pos)
            }
            Some(spacing) => {
                if !(spacing > 0.0) {
                    return Err(precondition(format!("lattice spacing must be positive, got {spacing}")));
                }
                let sites: Vec<(i64, u64)> = atoms
                    .iter()
                    .filter(|a| a.1 > 0)
                    .map(|&(x, c)| ((x / spacing).round() as i64, c))
                    .collect();
                if sites.is_empty() {
                    return Ok(ParticleConfiguration::Lattice(LatticeConfig { offset: 0, spacing, counts: vec![] }));
                }
                let lo = sites.iter().map(|s| s.0).min().unwrap();
                let hi = sites.iter().map(|s| s.0).max().unwrap();
                let mut counts = vec![0u64; (hi - lo + 1) as usize];
                for (s, c) in sites {
                    counts[(s - lo) as usize] += c;
                }
                Ok(ParticleConfiguration::Lattice(LatticeConfig { offset: lo, spacing, counts }))
            }
        }
    }

    /// μ_ε = Σ_{k=0}^{⌈1/ε⌉} ⌈N^{kε+ε/2}⌉ δ_{−kεσ₀L} with N = e^L.
    pub fn mu_eps(eps: f64, l: f64, sigma0: f64, lattice_spacing: Option<f64>) -> Result<ParticleConfiguration> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(precondition(format!("mu_eps needs 0 < eps < 1, got {eps}")));
        }
        let inv = 1.0 / eps;
        if (inv - inv.round()).abs() > 1e-9 {
            return Err(precondition(format!("mu_eps needs 1/eps to be an integer, got 1/{eps} = {inv}")));
        }
        if !(l > 0.0 && sigma0 > 0.0) {
            return Err(precondition("mu_eps needs L > 0 and sigma0 > 0"));
        }
        let kmax = inv.round() as u64;
        let mut atoms = Vec::with_capacity(kmax as usize + 1);
        for k in 0..=kmax {
            let kf = k as f64;
            let weight = ((kf * eps + eps / 2.0) * l).exp().ceil();
            if weight > 1e15 {
                return Err(precondition(format!("mu_eps atom weight {weight:e} is too large")));
            }
            atoms.push((-kf * eps * sigma0 * l, weight as u64));
        }
        ParticleConfiguration::from_atoms(&atoms, lattice_spacing)
    }

    pub fn mass(&self) -> u64 {
        match self {
            ParticleConfiguration::Lattice(c) => c.counts.iter().sum(),
            ParticleConfiguration::Real(p) => p.len() as u64,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.mass() == 0
    }

    /// Atoms in descending order of position.
    pub fn atoms_desc(&self) -> Vec<(f64, u64)> {
        match self {
            ParticleConfiguration::Lattice(c) => (0..c.counts.len())
                .rev()
                .filter(|&i| c.counts[i] > 0)
                .map(|i| (c.position(i), c.counts[i]))
                .collect(),
            ParticleConfiguration::Real(p) => {
                let mut out: Vec<(f64, u64)> = Vec::new();
                for &x in p {
                    match out.last_mut() {
                        Some(last) if last.0 == x => last.1 += 1,
                        _ => out.push((x, 1)),
                    }
                }
                out
            }
        }
    }

    pub fn max(&self) -> Option<f64> {
        self.atoms_desc().first().map(|a| a.0)
    }

    pub fn min(&self) -> Option<f64> {
        match self {
            ParticleConfiguration::Real(p) => p.last().copied(),
            ParticleConfiguration::Lattice(c) => c.counts.iter().position(|&n| n > 0).map(|i| c.position(i)),
        }
    }

    /// μ([x, ∞)).
    pub fn mass_at_or_above(&self, x: f64) -> u64 {
        match self {
            ParticleConfiguration::Real(p) => p.partition_point(|&y| y >= x) as u64,
            ParticleConfiguration::Lattice(c) => (0..c.counts.len())
                .rev()
                .take_while(|&i| c.position(i) >= x)
                .map(|i| c.counts[i])
                .sum(),
        }
    }

    /// Position of the M-th highest particle, −∞ when the mass is below M.
    pub fn quantile(&self, m: u64) -> f64 {
        if m == 0 {
            return f64::INFINITY;
        }
        match self {
            ParticleConfiguration::Real(p) => p.get(m as usize - 1).copied().unwrap_or(f64::NEG_INFINITY),
            ParticleConfiguration::Lattice(c) => {
                let mut seen = 0u64;
                for i in (0..c.counts.len()).rev() {
                    seen += c.counts[i];
                    if seen >= m {
                        return c.position(i);
                    }
                }
                f64::NEG_INFINITY
            }
        }
    }

    /// The configuration translated by `a`. Lattice configurations only
    /// accept whole multiples of the spacing.
    pub fn shifted(&self, a: f64) -> Result<ParticleConfiguration> {
        match self {
            ParticleConfiguration::Real(p) => Ok(ParticleConfiguration::Real(p.iter().map(|x| x + a).collect())),
            ParticleConfiguration::Lattice(c) => {
                let sites = a / c.spacing;
                if (sites - sites.round()).abs() > 1e-9 {
                    return Err(precondition(format!(
                        "lattice shift {a} is not a multiple of the spacing {}",
                        c.spacing
                    )));
                }
                let mut out = c.clone();
                out.offset += sites.round() as i64;
                Ok(ParticleConfiguration::Lattice(out))
            }
        }
    }
}
