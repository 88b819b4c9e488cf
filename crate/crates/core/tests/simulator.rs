use std::f64::consts::PI;

use nbrw::measure::{LatticeConfig, ParticleConfiguration};
use nbrw::profiles::Profile;
use nbrw::rng::replica_rng;
use nbrw::simulator::{
    empirical_exponent_profile, run, run_with_barriers, select_top, select_top_lattice, step_lattice, step_real,
    step_real_two_point, BarrierMode, BarrierSpec, EngineChoice, InitialConfig, SimSelection, SimSpec, Termination,
    TimeMode, Trajectory,
};
use nbrw::stats::{mann_whitney_greater, summarize};
use nbrw::theory::{BarrierPair, BrwSpec, Increment, OffspringLaw};
use proptest::prelude::*;
use rand::Rng;

fn two() -> OffspringLaw {
    OffspringLaw::fixed(2).unwrap()
}

fn bernoulli(p: f64) -> BrwSpec {
    BrwSpec::new(Increment::Bernoulli(Profile::constant(p).unwrap()), two()).unwrap()
}

fn gaussian(sigma: &str) -> BrwSpec {
    BrwSpec::new(Increment::Gaussian(Profile::parse(sigma).unwrap()), two()).unwrap()
}

fn lattice(counts: Vec<u64>) -> LatticeConfig {
    LatticeConfig { offset: 0, spacing: 1.0, counts }
}

fn final_max(t: &Trajectory) -> f64 {
    t.last().unwrap().max
}

#[test]
fn lattice_step_without_moves() {
    let pop = LatticeConfig { offset: -2, spacing: 1.0, counts: vec![1, 0, 3] };
    let mut rng = replica_rng(1, 0);
    let next = step_lattice(&pop, 0.0, &two(), 5, &mut rng).unwrap();
    assert_eq!(next, LatticeConfig { offset: -2, spacing: 1.0, counts: vec![0, 0, 5] }.trimmed());
    let next = step_lattice(&pop, 0.0, &two(), 100, &mut rng).unwrap();
    assert_eq!(next.counts.iter().sum::<u64>(), 8);
}

trait Trimmed {
    fn trimmed(self) -> Self;
}

impl Trimmed for LatticeConfig {
    fn trimmed(mut self) -> Self {
        self.trim();
        self
    }
}

#[test]
fn lattice_step_with_certain_moves() {
    let mut pop = lattice(vec![1]);
    let mut rng = replica_rng(2, 0);
    for _ in 0..10 {
        pop = step_lattice(&pop, 1.0, &two(), 1 << 10, &mut rng).unwrap();
    }
    let cfg = ParticleConfiguration::Lattice(pop);
    assert_eq!(cfg.max(), Some(10.0));
    assert_eq!(cfg.mass(), 1024);
}

#[test]
fn single_survivor_law() {
    // With N = 1 the survivor moves up iff one of its two children does:
    // enumerating the four outcomes gives P(+1) = 1 − (1−p)².
    let p: f64 = 0.3;
    let exact: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
        .iter()
        .map(|&(a, b): &(i32, i32)| {
            let w = |s| if s == 1 { p } else { 1.0 - p };
            w(a) * w(b) * a.max(b) as f64
        })
        .sum();
    assert!((exact - (1.0 - 0.7f64.powi(2))).abs() < 1e-15);
    let mut rng = replica_rng(3, 0);
    let n = 100_000;
    let mut ups = 0u64;
    for _ in 0..n {
        let next = step_lattice(&lattice(vec![1]), p, &two(), 1, &mut rng).unwrap();
        assert_eq!(next.counts.iter().sum::<u64>(), 1);
        ups += next.offset as u64;
    }
    let freq = ups as f64 / n as f64;
    assert!((freq - exact).abs() < 4.0 * (exact * (1.0 - exact) / n as f64).sqrt());
}

#[test]
fn real_step_examples() {
    let mut rng = replica_rng(4, 0);
    let next = step_real(&[1.0, -2.0], 0.0, &two(), 1000, &mut rng).unwrap();
    assert_eq!(next, vec![1.0, 1.0, -2.0, -2.0]);
    let next = step_real(&[1.0, -2.0], 1.0, &two(), 2, &mut rng).unwrap();
    assert_eq!(next.len(), 2);
    assert!(next[0] >= next[1]);
}

#[test]
fn real_step_max_of_two_gaussians() {
    let sd = 1.7;
    let mut rng = replica_rng(5, 0);
    let xs: Vec<f64> = (0..100_000).map(|_| step_real(&[0.0], sd, &two(), 1, &mut rng).unwrap()[0]).collect();
    let s = summarize(&xs);
    assert!((s.mean - sd / PI.sqrt()).abs() < 3.0 * s.se, "{} vs {}", s.mean, sd / PI.sqrt());
}

#[test]
fn greedy_bernoulli_speed() {
    let speeds: Vec<f64> = (0..20)
        .map(|r| {
            let mut spec =
                SimSpec::new(1e4, bernoulli(0.25), TimeMode::Generations, SimSelection::Fixed(1), InitialConfig::AtZero(1), 11);
            spec.replica = r;
            final_max(&run(&spec).unwrap()) / 1e4
        })
        .collect();
    let m = summarize(&speeds).mean;
    assert!((m - 0.4375).abs() < 0.02 * 0.4375, "{m}");
}

#[test]
fn runs_are_reproducible() {
    let mut spec =
        SimSpec::new(300.0, bernoulli(0.25), TimeMode::Generations, SimSelection::Fixed(50), InitialConfig::AtZero(1), 9);
    spec.checkpoints = vec![100.0, 200.0];
    spec.quantile_ranks = vec![1, 10, 50];
    spec.profile_grid = vec![0.0, 0.5, 1.0];
    assert_eq!(run(&spec).unwrap(), run(&spec).unwrap());

    let mut spec = SimSpec::new(
        40.0,
        gaussian("preset:fig1"),
        TimeMode::Deterministic { substeps: 3 },
        SimSelection::Schedule { hat_l: 4.0, ell: Profile::parse("poly:1,0.5").unwrap() },
        InitialConfig::AtZero(1),
        9,
    );
    spec.quantile_ranks = vec![5];
    let a = run(&spec).unwrap();
    assert_eq!(a, run(&spec).unwrap());
    spec.replica = 1;
    assert_ne!(a, run(&spec).unwrap());

    let mut lat = spec.clone();
    lat.engine = EngineChoice::Lattice { spacing: None };
    assert_eq!(run(&lat).unwrap(), run(&lat).unwrap());
}

#[test]
fn trajectory_records_are_ordered() {
    let mut spec = SimSpec::new(
        60.0,
        gaussian("poly:1"),
        TimeMode::Deterministic { substeps: 2 },
        SimSelection::Fixed(200),
        InitialConfig::AtZero(1),
        3,
    );
    spec.checkpoints = vec![0.0, 10.0, 30.0];
    spec.quantile_ranks = vec![1, 20, 200, 1000];
    let t = run(&spec).unwrap();
    assert_eq!(t.records.len(), 4);
    assert_eq!(t.records[0].time, 0.0);
    assert_eq!(t.termination, Termination::Completed);
    for r in &t.records {
        if r.mass >= 20 {
            assert!(r.max >= r.quantiles[1] && r.quantiles[1] >= r.min);
        } else {
            assert_eq!(r.quantiles[1], f64::NEG_INFINITY);
        }
        assert_eq!(r.quantiles[0], r.max);
        assert!(r.mass <= 200);
    }
    assert_eq!(t.records[3].quantiles[3], f64::NEG_INFINITY);
    assert_eq!(t.records[3].mass, 200);
    let mut out = Vec::new();
    t.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("time,mass,max,min,q_1,q_20,q_200,q_1000\n"));
    assert_eq!(text.lines().count(), 5);
    let m = t.manifest(&spec);
    assert_eq!(m["seed"], 3);
}

#[test]
fn schedule_mass_follows_selection_size() {
    // N(s,T) = round(exp(ℓ(s/T)·hatL)) with ℓ decreasing: the population
    // tracks N exactly once it has been reached.
    let ell = Profile::parse("poly:1,-0.5").unwrap();
    let spec = |t: f64| {
        let mut s = SimSpec::new(
            t,
            bernoulli(0.25),
            TimeMode::Generations,
            SimSelection::Schedule { hat_l: 6.0, ell: ell.clone() },
            InitialConfig::AtZero(1),
            5,
        );
        s.checkpoints = (1..=t as u64).map(|k| k as f64).collect();
        s
    };
    let traj = run(&spec(200.0)).unwrap();
    let mut reached = false;
    for r in &traj.records {
        let n = ((1.0 - 0.5 * r.time / 200.0) * 6.0f64).exp();
        let n = (n + 0.5).floor() as u64;
        assert!(r.mass <= n);
        reached |= r.mass == n;
        if reached {
            assert_eq!(r.mass, n, "t = {}", r.time);
        }
    }
    assert!(reached);
}

#[test]
fn exponent_profile_examples() {
    let l = 10.0f64;
    let y = 0.4;
    let k = (y * l).exp().round() as u64;
    let pop = ParticleConfiguration::from_atoms(&[(0.0, k), (-1e6, 10)], None).unwrap();
    let prof = empirical_exponent_profile(&pop, 0.0, 1.0, l, &[y]).unwrap();
    assert!((prof[0] - (k as f64).ln() / l).abs() < 1e-15);
    assert!((prof[0] - y).abs() < 1e-3);
    let prof = empirical_exponent_profile(&pop, 1.0, 1.0, l, &[0.0]).unwrap();
    assert_eq!(prof[0], 0.0);
    assert!(empirical_exponent_profile(&pop, 0.0, 0.0, l, &[0.0]).is_err());

    // μ_ε seen from its shift: within ε + 2/L of the diagonal
    let (eps, l) = (0.1, 20.0);
    let mu = ParticleConfiguration::mu_eps(eps, l, 1.0, Some(eps * l)).unwrap();
    let center = nbrw::theory::q_shift(&mu, 1.0, l).unwrap() - 1.0 * l;
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let prof = empirical_exponent_profile(&mu, center + l, 1.0, l, &grid).unwrap();
    for (y, p) in grid.iter().zip(&prof) {
        assert!((p - y).abs() <= eps + 2.0 / l, "y = {y}: {p}");
    }
}

fn barrier_spec() -> SimSpec {
    let mut s = SimSpec::new(
        30.0,
        gaussian("poly:1"),
        TimeMode::Deterministic { substeps: 4 },
        SimSelection::Fixed(300),
        InitialConfig::AtZero(3),
        21,
    );
    s.quantile_ranks = vec![2];
    s.checkpoints = vec![10.0, 20.0];
    s
}

#[test]
fn inactive_barriers_change_nothing() {
    let plain = barrier_spec();
    for mode in [BarrierMode::KillLowerOnly, BarrierMode::KillBoth, BarrierMode::Color] {
        let mut b = plain.clone();
        b.barrier = Some(BarrierSpec::new(BarrierPair::inactive(30.0), mode));
        let with = run_with_barriers(&b).unwrap();
        let without = run(&plain).unwrap();
        assert_eq!(with.records, without.records);
        assert_eq!(with.final_config, without.final_config);
        let counts = with.barrier.unwrap();
        assert_eq!(counts.upper_hits, 0);
        assert_eq!(counts.survivors, without.final_config.mass());
    }
    assert!(run_with_barriers(&plain).is_err());
}

#[test]
fn lower_barrier_above_everything_kills_at_once() {
    let mut s = barrier_spec();
    let curves = BarrierPair { h: 1.0, x: -1.0, times: vec![0.0, 30.0], lower: vec![1.0, 1.0], upper: vec![2.0, 2.0] };
    s.barrier = Some(BarrierSpec::new(curves, BarrierMode::KillLowerOnly));
    let t = run_with_barriers(&s).unwrap();
    assert_eq!(t.termination, Termination::Extinct { time: 0.0 });
    assert_eq!(t.steps, 0);
    assert!(t.records.is_empty());
}

#[test]
fn barriers_kill_and_count() {
    let mut s = barrier_spec();
    s.selection = SimSelection::Fixed(u64::MAX);
    let curves = BarrierPair { h: 8.0, x: 2.0, times: vec![0.0, 30.0], lower: vec![-2.0, 13.0], upper: vec![6.0, 21.0] };
    s.barrier = Some(BarrierSpec::new(curves.clone(), BarrierMode::KillBoth));
    let t = run_with_barriers(&s).unwrap();
    for r in &t.records {
        let (lo, hi) = curves.at(r.time);
        assert!(r.min >= lo && r.max < hi, "{r:?}");
    }
    let counts = t.barrier.unwrap();
    assert!(counts.upper_hits > 0);
    assert!(t.last().unwrap().time == 30.0);
    assert_eq!(counts.survivors, t.final_config.mass());

    s.barrier = Some(BarrierSpec::color(curves, 0.3));
    let t = run_with_barriers(&s).unwrap();
    let counts = t.barrier.unwrap();
    assert!(counts.upper_hits > 0, "{counts:?} {:?}", t.termination);
    assert!(counts.survivors <= t.final_config.mass());
}

#[test]
fn lattice_barriers_match_real_mode_semantics() {
    let mut s = SimSpec::new(50.0, bernoulli(0.3), TimeMode::Generations, SimSelection::Fixed(1000), InitialConfig::AtZero(1), 4);
    let curves = BarrierPair { h: 6.0, x: 1.0, times: vec![0.0, 50.0], lower: vec![-1.0, 19.0], upper: vec![5.0, 25.0] };
    s.barrier = Some(BarrierSpec::new(curves, BarrierMode::KillBoth));
    let a = run_with_barriers(&s).unwrap();
    s.engine = EngineChoice::Real;
    let b = run_with_barriers(&s).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.barrier, b.barrier);
}

#[test]
fn stochastic_monotonicity_in_n() {
    let maxima = |n: u64, seed: u64| -> Vec<f64> {
        (0..200)
            .map(|r| {
                let mut s = SimSpec::new(400.0, bernoulli(0.25), TimeMode::Generations, SimSelection::Fixed(n), InitialConfig::AtZero(1), seed);
                s.replica = r;
                final_max(&run(&s).unwrap())
            })
            .collect()
    };
    let small = maxima(4, 1);
    let large = maxima(64, 2);
    assert!(mann_whitney_greater(&small, &large) < 0.01);
}

#[test]
fn translation_equivariance() {
    let base = ParticleConfiguration::from_atoms(&[(0.0, 3), (-2.0, 5)], Some(1.0)).unwrap();
    let mut s = SimSpec::new(100.0, bernoulli(0.4), TimeMode::Generations, SimSelection::Fixed(40), InitialConfig::Given(base.clone()), 8);
    s.quantile_ranks = vec![7];
    let a = run(&s).unwrap();
    s.initial = InitialConfig::Given(base.shifted(5.0).unwrap());
    let b = run(&s).unwrap();
    let (ra, rb) = (a.last().unwrap(), b.last().unwrap());
    assert_eq!(rb.max, ra.max + 5.0);
    assert_eq!(rb.min, ra.min + 5.0);
    assert_eq!(rb.quantiles[0], ra.quantiles[0] + 5.0);

    let real = ParticleConfiguration::from_positions(vec![0.3, -1.1, 0.0]).unwrap();
    let mut s = SimSpec::new(20.0, gaussian("poly:1"), TimeMode::Deterministic { substeps: 2 }, SimSelection::Fixed(30), InitialConfig::Given(real.clone()), 8);
    s.engine = EngineChoice::Real;
    let a = run(&s).unwrap();
    s.initial = InitialConfig::Given(real.shifted(2.5).unwrap());
    let b = run(&s).unwrap();
    let (ra, rb) = (a.last().unwrap(), b.last().unwrap());
    assert!((rb.max - ra.max - 2.5).abs() < 1e-9);
    assert!((rb.min - ra.min - 2.5).abs() < 1e-9);
}

#[test]
fn mu_eps_start_is_selected_at_time_zero() {
    let mut s = SimSpec::new(
        10.0,
        bernoulli(0.25),
        TimeMode::Generations,
        SimSelection::Fixed(100),
        InitialConfig::MuEps { eps: 0.25, l: 100f64.ln(), sigma0: 1.0 },
        1,
    );
    s.checkpoints = vec![0.0];
    let t = run(&s).unwrap();
    assert_eq!(t.records[0].mass, 100);
    assert_eq!(t.records[0].max, 0.0);
}

#[test]
fn resource_cap_aborts_with_partial_data() {
    let mut s = SimSpec::new(30.0, gaussian("poly:1"), TimeMode::Deterministic { substeps: 1 }, SimSelection::Fixed(u64::MAX), InitialConfig::AtZero(1), 1);
    s.engine = EngineChoice::Real;
    s.limits.max_real_slots = 1000;
    s.checkpoints = vec![2.0];
    let t = run(&s).unwrap();
    assert!(t.is_aborted());
    assert_eq!(t.records.len(), 1);
}

#[test]
fn clock_mode_grows_at_rate_one_half() {
    // Binary branching at rate β₀ = 1/2: E[mass(t)] = e^{t/2}.
    let t = 4.0;
    let masses: Vec<f64> = (0..400)
        .map(|r| {
            let mut s = SimSpec::new(t, gaussian("poly:1"), TimeMode::Clock { dt: 0.01 }, SimSelection::Fixed(u64::MAX), InitialConfig::AtZero(1), 6);
            s.replica = r;
            run(&s).unwrap().final_config.mass() as f64
        })
        .collect();
    let s = summarize(&masses);
    let want = (1.0 + 0.5 * 0.01f64).powf(t / 0.01);
    assert!((s.mean - want).abs() < 4.0 * s.se, "{} vs {want}", s.mean);
}

fn full_sort_top(mut xs: Vec<f64>, n: usize) -> Vec<f64> {
    xs.sort_by(|a, b| b.total_cmp(a));
    xs.truncate(n);
    xs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lattice_and_real_two_point_agree(seed in any::<u64>(), p in 0.05f64..0.95, steps in 1usize..30, n in 1u64..200) {
        let mut lat = lattice(vec![3]);
        let mut real = vec![0.0; 3];
        let mut r1 = replica_rng(seed, 0);
        let mut r2 = replica_rng(seed, 0);
        for _ in 0..steps {
            lat = step_lattice(&lat, p, &two(), n, &mut r1).unwrap();
            real = step_real_two_point(&real, p, &two(), n, &mut r2).unwrap();
        }
        let from_real = ParticleConfiguration::from_atoms(&real.iter().map(|&x| (x, 1)).collect::<Vec<_>>(), Some(1.0)).unwrap();
        prop_assert_eq!(ParticleConfiguration::Lattice(lat), from_real);
    }

    #[test]
    fn real_selection_matches_full_sort(seed in any::<u64>(), size in 1usize..5000, n in 1u64..10_000, sd in 0.0f64..3.0) {
        let mut rng = replica_rng(seed, 1);
        let pop: Vec<f64> = (0..size).map(|_| (rng.random::<f64>() * 20.0).round() / 4.0).collect();
        let all = step_real(&pop, sd, &two(), u64::MAX, &mut replica_rng(seed, 2)).unwrap();
        let kept = step_real(&pop, sd, &two(), n, &mut replica_rng(seed, 2)).unwrap();
        prop_assert_eq!(kept, full_sort_top(all, n as usize));
    }

    #[test]
    fn lattice_selection_matches_full_sort(counts in prop::collection::vec(0u64..40, 1..60), offset in -20i64..20, n in 1u64..3000) {
        let cfg = LatticeConfig { offset, spacing: 1.0, counts };
        prop_assume!(cfg.counts.iter().sum::<u64>() > 0);
        let mut flat: Vec<f64> = Vec::new();
        for (i, &c) in cfg.counts.iter().enumerate() {
            flat.extend(std::iter::repeat_n(cfg.position(i), c as usize));
        }
        let mut kept = cfg.clone();
        select_top_lattice(&mut kept, n);
        let want = full_sort_top(flat, n as usize);
        let got = ParticleConfiguration::Lattice(kept);
        prop_assert_eq!(got.mass(), want.len() as u64);
        for (m, x) in want.iter().enumerate() {
            prop_assert_eq!(got.quantile(m as u64 + 1), *x);
        }
    }

    #[test]
    fn select_top_is_sorted_prefix(xs in prop::collection::vec(-5.0f64..5.0, 0..300), n in 0u64..400) {
        let mut kept = xs.clone();
        select_top(&mut kept, n);
        prop_assert_eq!(kept, full_sort_top(xs, n as usize));
    }

    #[test]
    fn mass_never_exceeds_selection(seed in any::<u64>(), n in 1u64..500) {
        let mut s = SimSpec::new(60.0, bernoulli(0.3), TimeMode::Generations, SimSelection::Fixed(n), InitialConfig::AtZero(1), seed);
        s.checkpoints = (1..60).map(|k| k as f64).collect();
        let t = run(&s).unwrap();
        let mut reached = false;
        for r in &t.records {
            prop_assert!(r.mass <= n);
            reached |= r.mass == n;
            if reached {
                prop_assert_eq!(r.mass, n);
            }
        }
    }
}
