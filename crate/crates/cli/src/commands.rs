use std::f64::consts::LN_2;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use nbrw::crem::{
    bbmdb_crem_identity_check, exact_max, ncrem_beam_search, ncrem_binned_beam, sample_crem, CremSpec,
    MAX_EXACT_BEAM, MAX_IDENTITY_DEPTH,
};
use nbrw::profiles::{Profile, ProfileFn};
use nbrw::rng::mix64;
use nbrw::simulator::{run, InitialConfig, SimSelection, SimSpec, Termination, TimeMode};
use nbrw::special_fns::psi;
use nbrw::theory::{
    conjecture_prediction, crem_prediction, prediction_m, PredictionReport, Regime, RegimeSpec, Selection, SqrtOf,
};
use serde_json::{json, Value};

use crate::config::{ConfigError, ExperimentConfig, IncrementKind, Param};
use crate::output::{config_digest, manifest, num, opt, schema_tag, write_json, Table};

/// Depths up to which crem mode also samples the whole tree.
const EXACT_TREE_DEPTH: usize = 20;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Core(nbrw::Error),
    Io(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) | Failure::Io(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<nbrw::Error> for Failure {
    fn from(e: nbrw::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(format!("writing output: {e}"))
    }
}

/// What a command left behind: number of rows that did not finish.
pub struct Report {
    pub incomplete: usize,
}

pub fn execute(cfg: &ExperimentConfig) -> Result<Report, Failure> {
    std::fs::create_dir_all(&cfg.out)?;
    match cfg.mode {
        crate::config::Mode::Theory => cmd_theory(cfg),
        crate::config::Mode::Psi => cmd_psi(cfg),
        crate::config::Mode::Simulate => cmd_simulate(cfg),
        crate::config::Mode::Sweep => cmd_sweep(cfg),
        crate::config::Mode::Crem => cmd_crem(cfg),
    }
}

/// Runs `f` on every job over `threads` workers. Jobs not started before
/// the deadline come back as `None`; results keep the job order.
fn run_jobs<J: Sync, R: Send>(jobs: &[J], threads: usize, deadline: Option<Instant>, f: impl Fn(&J) -> R + Sync) -> Vec<Option<R>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(jobs.len()).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() || deadline.is_some_and(|d| Instant::now() >= d) {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap()
}

fn deadline(cfg: &ExperimentConfig) -> Option<Instant> {
    cfg.max_seconds.map(|s| Instant::now() + std::time::Duration::from_secs_f64(s))
}

fn selection(cfg: &ExperimentConfig, p: Param) -> Selection {
    match p {
        Param::Alpha(a) if cfg.sweep.regime == Regime::Crit => Selection::CriticalAlpha(a),
        p => Selection::FixedL(p.l().unwrap_or(f64::NAN)),
    }
}

/// Brownian time modes use the N-BBM prediction for σ; generations use the
/// BRW prediction for the configured increment law.
fn uses_brw_prediction(cfg: &ExperimentConfig) -> bool {
    cfg.model.increment == IncrementKind::Bernoulli
        || cfg.sim.time_mode(cfg.model.increment) == TimeMode::Generations
}

fn predict(cfg: &ExperimentConfig, spec: &RegimeSpec) -> Result<PredictionReport, Failure> {
    if uses_brw_prediction(cfg) {
        Ok(conjecture_prediction(&cfg.model.brw()?, spec)?)
    } else {
        Ok(prediction_m(spec, &cfg.model.profile()?)?)
    }
}

/// First-order term v·T used to recenter simulated maxima.
fn first_order(cfg: &ExperimentConfig, horizon: f64) -> Result<f64, Failure> {
    let spec = RegimeSpec::new(horizon, Selection::FixedL(1.0), Regime::Sub)?;
    Ok(predict(cfg, &spec)?.v1t)
}

fn population(l: f64) -> u64 {
    // Saturates at u64::MAX for huge L.
    l.exp().round() as u64
}

fn cmd_theory(cfg: &ExperimentConfig) -> Result<Report, Failure> {
    let mut table = Table::new(cfg, &["regime", "T", "L_or_alpha", "L", "N", "v1T", "second_order", "m", "b", "m_recentered"]);
    let mut reports = Vec::new();
    for &t in &cfg.sweep.horizons {
        for p in cfg.sweep.params() {
            let spec = RegimeSpec::new(t, selection(cfg, p), cfg.sweep.regime)?;
            let r = predict(cfg, &spec)?;
            let l = spec.log_population();
            table.push(vec![
                r.regime.to_string(),
                num(t),
                num(r.l_or_alpha),
                num(l),
                population(l).to_string(),
                num(r.v1t),
                num(r.second_order),
                num(r.m),
                num(r.b),
                num(r.second_order / t.cbrt()),
            ]);
            reports.push(r.to_json());
        }
    }
    write_theory(cfg, reports)?;
    table.write(&cfg.out.join("results.csv"))?;
    let m = manifest(cfg, &["results.csv", "theory.json"], 0, json!({ "rows": table.len() }));
    write_json(&cfg.out.join("manifest.json"), &m)?;
    Ok(Report { incomplete: 0 })
}

fn write_theory(cfg: &ExperimentConfig, reports: Vec<Value>) -> Result<(), Failure> {
    let doc = json!({
        "schema": schema_tag("theory"),
        "config_digest": config_digest(cfg),
        "reports": reports,
    });
    Ok(write_json(&cfg.out.join("theory.json"), &doc)?)
}

fn cmd_psi(cfg: &ExperimentConfig) -> Result<Report, Failure> {
    let mut table = Table::new(cfg, &["q", "psi"]);
    for &q in &cfg.psi.q {
        table.push(vec![num(q), num(psi(q)?)]);
    }
    table.write(&cfg.out.join("results.csv"))?;
    write_json(&cfg.out.join("manifest.json"), &manifest(cfg, &["results.csv"], 0, json!({})))?;
    Ok(Report { incomplete: 0 })
}

fn sim_spec(cfg: &ExperimentConfig, horizon: f64, p: Param, stream: u64) -> Result<SimSpec, Failure> {
    let n = population(p.log_population(horizon));
    let mut spec = SimSpec::new(
        horizon,
        cfg.model.brw()?,
        cfg.sim.time_mode(cfg.model.increment),
        SimSelection::Fixed(n),
        InitialConfig::AtZero(cfg.sim.initial_particles),
        cfg.seed,
    );
    spec.replica = stream;
    spec.engine = cfg.sim.engine();
    spec.quantile_ranks = cfg.sim.quantile_ranks.clone();
    Ok(spec)
}

/// Stream id of replica r at grid point (ti, pi); stable when lists grow.
fn stream_id(ti: usize, pi: usize, r: u64) -> u64 {
    ((ti as u64) << 48) | ((pi as u64) << 32) | r
}

fn status(t: &Termination) -> String {
    match t {
        Termination::Completed => "ok".into(),
        Termination::Extinct { time } => format!("extinct at {time}"),
        Termination::Aborted { time, reason } => format!("aborted at {time}: {reason}"),
    }
}

fn cmd_simulate(cfg: &ExperimentConfig) -> Result<Report, Failure> {
    let t = cfg.sweep.horizons[0];
    let p = cfg.sweep.params()[0];
    let mut spec = sim_spec(cfg, t, p, 0)?;
    spec.checkpoints = if cfg.sim.checkpoints.is_empty() {
        (0..=10).map(|i| t * i as f64 / 10.0).collect()
    } else {
        cfg.sim.checkpoints.clone()
    };
    spec.limits.deadline = deadline(cfg);
    let traj = run(&spec)?;
    let mut cols: Vec<String> = traj.csv_header();
    cols.push("max_recentered".into());
    let cols_ref: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut table = Table::new(cfg, &cols_ref);
    let center = first_order(cfg, t)?;
    for r in &traj.records {
        let mut row = vec![num(r.time), r.mass.to_string(), num(r.max), num(r.min)];
        row.extend(r.quantiles.iter().map(|&q| num(q)));
        row.extend(r.profile.iter().map(|&q| num(q)));
        // The first order is only linear in t for constant profiles, so the
        // recentered value is given at the horizon alone.
        row.push(if r.time == t { num((r.max - center) / t.cbrt()) } else { String::new() });
        table.push(row);
    }
    table.write(&cfg.out.join("results.csv"))?;
    let incomplete = traj.is_aborted() as usize;
    let m = manifest(cfg, &["results.csv"], incomplete, traj.manifest(&spec));
    write_json(&cfg.out.join("manifest.json"), &m)?;
    Ok(Report { incomplete })
}

struct SimOutcome {
    max: f64,
    min: f64,
    runtime_ms: u128,
    status: String,
    aborted: bool,
}

fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Report, Failure> {
    let params = cfg.sweep.params();
    let horizons = &cfg.sweep.horizons;
    let mut table = Table::new(
        cfg,
        &[
            "kind", "regime", "T", "alpha", "L", "N", "replica", "seed", "max", "min", "max_recentered", "min_recentered",
            "prediction_recentered", "runtime_ms", "status",
        ],
    );
    let regime = cfg.sweep.regime.to_string();

    // Theory rows. In the critical regime the recentered prediction does
    // not depend on T, so there is one row per α.
    let mut reports = Vec::new();
    let theory_points: Vec<(Option<f64>, Param)> = if cfg.sweep.regime == Regime::Crit {
        params.iter().map(|&p| (None, p)).collect()
    } else {
        horizons.iter().flat_map(|&t| params.iter().map(move |&p| (Some(t), p))).collect()
    };
    for (t, p) in theory_points {
        let horizon = t.unwrap_or(horizons[0]);
        let spec = RegimeSpec::new(horizon, selection(cfg, p), cfg.sweep.regime)?;
        let r = predict(cfg, &spec)?;
        let l = t.map(|t| p.log_population(t));
        table.push(vec![
            "theory".into(),
            regime.clone(),
            opt(t),
            opt(p.alpha()),
            opt(l),
            l.map(|l| population(l).to_string()).unwrap_or_default(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            num(r.second_order / horizon.cbrt()),
            String::new(),
            String::new(),
        ]);
        reports.push(r.to_json());
    }

    let mut jobs = Vec::new();
    for (ti, &t) in horizons.iter().enumerate() {
        for (pi, &p) in params.iter().enumerate() {
            for r in 0..cfg.replicas {
                jobs.push((ti, pi, t, p, r));
            }
        }
    }
    let specs: Vec<SimSpec> = jobs
        .iter()
        .map(|&(ti, pi, t, p, r)| sim_spec(cfg, t, p, stream_id(ti, pi, r)))
        .collect::<Result<_, _>>()?;
    let centers: Vec<f64> = horizons.iter().map(|&t| first_order(cfg, t)).collect::<Result<_, _>>()?;
    let stop = deadline(cfg);
    let results = run_jobs(&specs, cfg.threads, stop, |spec| {
        let mut spec = spec.clone();
        spec.limits.deadline = stop;
        let start = Instant::now();
        let out = run(&spec);
        let runtime_ms = start.elapsed().as_millis();
        match out {
            Ok(traj) => {
                let last = traj.last();
                SimOutcome {
                    max: last.map_or(f64::NAN, |r| r.max),
                    min: last.map_or(f64::NAN, |r| r.min),
                    runtime_ms,
                    status: status(&traj.termination),
                    aborted: traj.is_aborted(),
                }
            }
            Err(e) => SimOutcome { max: f64::NAN, min: f64::NAN, runtime_ms, status: format!("error: {e}"), aborted: true },
        }
    });
    let mut incomplete = 0;
    for ((ti, _, t, p, r), res) in jobs.iter().zip(results) {
        let res = res.unwrap_or(SimOutcome {
            max: f64::NAN,
            min: f64::NAN,
            runtime_ms: 0,
            status: "skipped: time budget exhausted".into(),
            aborted: true,
        });
        incomplete += res.aborted as usize;
        let scale = t.cbrt();
        let l = p.log_population(*t);
        table.push(vec![
            "sim".into(),
            regime.clone(),
            num(*t),
            opt(p.alpha()),
            num(l),
            population(l).to_string(),
            r.to_string(),
            cfg.seed.to_string(),
            num(res.max),
            num(res.min),
            num((res.max - centers[*ti]) / scale),
            num((res.min - centers[*ti]) / scale),
            String::new(),
            if cfg.record_runtime { res.runtime_ms.to_string() } else { String::new() },
            res.status,
        ]);
    }
    table.write(&cfg.out.join("results.csv"))?;
    write_theory(cfg, reports)?;
    let m = manifest(cfg, &["results.csv", "theory.json"], incomplete, json!({ "rows": table.len() }));
    write_json(&cfg.out.join("manifest.json"), &m)?;
    Ok(Report { incomplete })
}

struct CremJob {
    depth: usize,
    width: u64,
    kappa: f64,
    replica: u64,
    seed: u64,
}

struct CremOutcome {
    method: &'static str,
    queries: u128,
    max: f64,
    exact: Option<f64>,
    identity: Option<bool>,
    runtime_ms: u128,
}

fn crem_regime(cfg: &ExperimentConfig, kappa: f64, a_prime: &Profile) -> Regime {
    if let Some(r) = cfg.crem.regime {
        return r;
    }
    if (kappa - 1.0 / 3.0).abs() < 1e-9 {
        Regime::Crit
    } else if kappa < 1.0 / 3.0 {
        Regime::Sub
    } else if a_prime.is_strictly_decreasing() {
        Regime::SupD
    } else {
        Regime::Sup
    }
}

fn cmd_crem(cfg: &ExperimentConfig) -> Result<Report, Failure> {
    let c = &cfg.crem;
    let a_prime = Profile::parse(&c.a_prime).map_err(|e| Failure::Config(format!("crem.a_prime: {e}")))?;
    let mut jobs = Vec::new();
    for (di, &depth) in c.depths.iter().enumerate() {
        if c.identity && depth > MAX_IDENTITY_DEPTH {
            return Err(Failure::Config(format!("crem.identity needs depths <= {MAX_IDENTITY_DEPTH}, got {depth}")));
        }
        let widths: Vec<(u64, f64)> = match (&c.kappa, &c.widths) {
            (Some(ks), _) => ks.iter().map(|&k| (population((depth as f64).powf(k)), k)).collect(),
            (None, Some(ws)) => ws.iter().map(|&n| (n, (n as f64).ln().ln() / (depth as f64).ln())).collect(),
            (None, None) => unreachable!("checked by the config"),
        };
        for (wi, &(width, kappa)) in widths.iter().enumerate() {
            for replica in 0..cfg.replicas {
                let seed = mix64(cfg.seed ^ mix64(stream_id(di, wi, replica)));
                jobs.push(CremJob { depth, width, kappa, replica, seed });
            }
        }
    }
    let specs: Vec<CremSpec> =
        jobs.iter().map(|j| CremSpec::from_derivative(&a_prime, j.depth, j.seed)).collect::<Result<_, _>>()?;
    let limit = c.exact_width_limit.min(MAX_EXACT_BEAM);
    let stop = deadline(cfg);
    let indices: Vec<usize> = (0..jobs.len()).collect();
    let results = run_jobs(&indices, cfg.threads, stop, |&i| -> Result<CremOutcome, nbrw::Error> {
        let (job, spec) = (&jobs[i], &specs[i]);
        let start = Instant::now();
        let (method, queries, max) = if job.width <= limit {
            let b = ncrem_beam_search(spec, job.width)?;
            ("exact", b.queries, b.max())
        } else {
            let b = ncrem_binned_beam(spec, job.width, c.binned_spacing)?;
            ("binned", b.queries, b.max)
        };
        let exact = if job.depth <= EXACT_TREE_DEPTH { Some(exact_max(&sample_crem(spec)?)) } else { None };
        let identity = if c.identity {
            Some(bbmdb_crem_identity_check(&spec.a, job.depth, job.width, job.seed)?)
        } else {
            None
        };
        Ok(CremOutcome { method, queries, max, exact, identity, runtime_ms: start.elapsed().as_millis() })
    });

    let sigma = SqrtOf(&a_prime);
    // u = t^2 takes the square root singularity out of A'(u) ~ u near 0.
    let v_c = (2.0 * LN_2).sqrt() * nbrw::profiles::integrate(|t| 2.0 * t * sigma.value(t * t), 0.0, 1.0, 1e-12)?;
    let mut table = Table::new(
        cfg,
        &[
            "T", "N", "kappa", "regime", "replica", "seed", "method", "queries", "max", "max_recentered",
            "prediction_recentered", "exact_max", "regret", "identity", "runtime_ms", "status",
        ],
    );
    let mut reports = Vec::new();
    let mut incomplete = 0;
    let mut last_point = None;
    for (job, res) in jobs.iter().zip(results) {
        let t = job.depth as f64;
        let regime = crem_regime(cfg, job.kappa, &a_prime);
        let pred = crem_prediction(&a_prime, job.depth, (job.width as f64).ln(), regime).ok();
        if last_point != Some((job.depth, job.width)) {
            if let Some(p) = &pred {
                reports.push(p.to_json());
            }
            last_point = Some((job.depth, job.width));
        }
        let pred_cell = opt(pred.map(|p| p.second_order / t.cbrt()));
        let mut row = vec![
            job.depth.to_string(),
            job.width.to_string(),
            num(job.kappa),
            regime.to_string(),
            job.replica.to_string(),
            job.seed.to_string(),
        ];
        match res {
            Some(Ok(o)) => {
                row.extend([
                    o.method.to_string(),
                    o.queries.to_string(),
                    num(o.max),
                    num((o.max - v_c * t) / t.cbrt()),
                    pred_cell,
                    opt(o.exact),
                    opt(o.exact.map(|e| e - o.max)),
                    o.identity.map(|b| if b { "pass" } else { "fail" }.to_string()).unwrap_or_default(),
                    if cfg.record_runtime { o.runtime_ms.to_string() } else { String::new() },
                    "ok".into(),
                ]);
            }
            Some(Err(e)) => {
                if !matches!(e, nbrw::Error::Resource(_)) {
                    return Err(e.into());
                }
                incomplete += 1;
                row.extend(std::iter::repeat_n(String::new(), 4));
                row.push(pred_cell);
                row.extend(std::iter::repeat_n(String::new(), 4));
                row.push(format!("aborted: {e}"));
            }
            None => {
                incomplete += 1;
                row.extend(std::iter::repeat_n(String::new(), 4));
                row.push(pred_cell);
                row.extend(std::iter::repeat_n(String::new(), 4));
                row.push("skipped: time budget exhausted".into());
            }
        }
        table.push(row);
    }
    table.write(&cfg.out.join("results.csv"))?;
    write_theory(cfg, reports)?;
    let m = manifest(cfg, &["results.csv", "theory.json"], incomplete, json!({ "v_c": v_c, "rows": table.len() }));
    write_json(&cfg.out.join("manifest.json"), &m)?;
    Ok(Report { incomplete })
}
