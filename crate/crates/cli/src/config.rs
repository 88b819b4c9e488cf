//! Experiment configuration: one JSON document, patched by dotted
//! `--key value` flags, then checked.

use std::fmt;
use std::path::{Path, PathBuf};

use nbrw::profiles::Profile;
use nbrw::simulator::{EngineChoice, TimeMode};
use nbrw::theory::{BrwSpec, Increment, OffspringLaw, Regime};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    Parse(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(m) => write!(f, "cannot read config: {m}"),
            ConfigError::Parse(m) => write!(f, "config parse error: {m}"),
            ConfigError::Invalid(m) => write!(f, "invalid config: {m}"),
        }
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

/// Accepts `x` as shorthand for `[x]`.
fn one_or_many<'de, D: Deserializer<'de>, T: Deserialize<'de>>(d: D) -> Result<Vec<T>, D::Error> {
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(x) => vec![x],
        OneOrMany::Many(v) => v,
    })
}

fn opt_one_or_many<'de, D: Deserializer<'de>, T: Deserialize<'de>>(d: D) -> Result<Option<Vec<T>>, D::Error> {
    Ok(Option::<OneOrMany<T>>::deserialize(d)?.map(|x| match x {
        OneOrMany::One(x) => vec![x],
        OneOrMany::Many(v) => v,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Theory,
    Psi,
    Simulate,
    Crem,
    Sweep,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Theory => "theory",
            Mode::Psi => "psi",
            Mode::Simulate => "simulate",
            Mode::Crem => "crem",
            Mode::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub replicas: u64,
    pub out: PathBuf,
    pub threads: usize,
    /// Wall-clock budget; unfinished work is flagged in the output.
    pub max_seconds: Option<f64>,
    /// Fill the runtime_ms column. Off by default so reruns are byte-identical.
    pub record_runtime: bool,
    pub model: ModelConfig,
    pub sweep: SweepConfig,
    pub sim: SimConfig,
    pub crem: CremConfig,
    pub psi: PsiConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Theory,
            seed: 1,
            replicas: 1,
            out: PathBuf::from("out"),
            threads: 1,
            max_seconds: None,
            record_runtime: false,
            model: ModelConfig::default(),
            sweep: SweepConfig::default(),
            sim: SimConfig::default(),
            crem: CremConfig::default(),
            psi: PsiConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncrementKind {
    Gaussian,
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub increment: IncrementKind,
    /// σ(s) for Gaussian increments, p(s) for Bernoulli ones.
    pub profile: String,
    /// Offspring law as (count, probability) pairs.
    pub offspring: Vec<(u32, f64)>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { increment: IncrementKind::Gaussian, profile: "poly:1".into(), offspring: vec![(2, 1.0)] }
    }
}

impl ModelConfig {
    pub fn profile(&self) -> Result<Profile, ConfigError> {
        Profile::parse(&self.profile).map_err(|e| invalid(format!("model.profile: {e}")))
    }

    pub fn brw(&self) -> Result<BrwSpec, ConfigError> {
        let law = OffspringLaw::new(self.offspring.clone()).map_err(|e| invalid(format!("model.offspring: {e}")))?;
        let p = self.profile()?;
        let inc = match self.increment {
            IncrementKind::Gaussian => Increment::Gaussian(p),
            IncrementKind::Bernoulli => Increment::Bernoulli(p),
        };
        BrwSpec::new(inc, law).map_err(|e| invalid(format!("model: {e}")))
    }
}

/// The (T, α or L) grid shared by theory, simulate and sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub regime: Regime,
    #[serde(deserialize_with = "one_or_many")]
    pub horizons: Vec<f64>,
    /// Critical scaling: L(T) = α·T^{1/3}, N = round(exp(L)).
    #[serde(deserialize_with = "opt_one_or_many")]
    pub alpha: Option<Vec<f64>>,
    /// Fixed log-population sizes.
    #[serde(deserialize_with = "opt_one_or_many")]
    pub l: Option<Vec<f64>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { regime: Regime::Crit, horizons: vec![1000.0], alpha: Some(vec![1.0]), l: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Param {
    Alpha(f64),
    L(f64),
}

impl Param {
    pub fn log_population(self, horizon: f64) -> f64 {
        match self {
            Param::Alpha(a) => a * horizon.cbrt(),
            Param::L(l) => l,
        }
    }

    pub fn alpha(self) -> Option<f64> {
        match self {
            Param::Alpha(a) => Some(a),
            Param::L(_) => None,
        }
    }

    pub fn l(self) -> Option<f64> {
        match self {
            Param::Alpha(_) => None,
            Param::L(l) => Some(l),
        }
    }
}

impl SweepConfig {
    pub fn params(&self) -> Vec<Param> {
        match (&self.alpha, &self.l) {
            (Some(a), None) => a.iter().map(|&x| Param::Alpha(x)).collect(),
            (None, Some(l)) => l.iter().map(|&x| Param::L(x)).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeKind {
    Generations,
    Deterministic,
    Clock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Auto,
    Real,
    Lattice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Defaults to generations for Bernoulli walks and deterministic
    /// branching for Gaussian ones.
    pub time: Option<TimeKind>,
    pub substeps: u32,
    pub dt: f64,
    pub engine: EngineKind,
    pub spacing: Option<f64>,
    /// Number of particles at the origin at time 0.
    pub initial_particles: u64,
    #[serde(deserialize_with = "one_or_many")]
    pub checkpoints: Vec<f64>,
    #[serde(deserialize_with = "one_or_many")]
    pub quantile_ranks: Vec<u64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            time: None,
            substeps: 1,
            dt: 0.05,
            engine: EngineKind::Auto,
            spacing: None,
            initial_particles: 1,
            checkpoints: Vec::new(),
            quantile_ranks: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn time_mode(&self, inc: IncrementKind) -> TimeMode {
        let kind = self.time.unwrap_or(match inc {
            IncrementKind::Bernoulli => TimeKind::Generations,
            IncrementKind::Gaussian => TimeKind::Deterministic,
        });
        match kind {
            TimeKind::Generations => TimeMode::Generations,
            TimeKind::Deterministic => TimeMode::Deterministic { substeps: self.substeps },
            TimeKind::Clock => TimeMode::Clock { dt: self.dt },
        }
    }

    pub fn engine(&self) -> EngineChoice {
        match self.engine {
            EngineKind::Auto => EngineChoice::Auto,
            EngineKind::Real => EngineChoice::Real,
            EngineKind::Lattice => EngineChoice::Lattice { spacing: self.spacing },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CremConfig {
    /// A', nonnegative with unit integral.
    pub a_prime: String,
    #[serde(deserialize_with = "one_or_many")]
    pub depths: Vec<usize>,
    /// Widths N = round(exp(T^κ)).
    #[serde(deserialize_with = "opt_one_or_many")]
    pub kappa: Option<Vec<f64>>,
    #[serde(deserialize_with = "opt_one_or_many")]
    pub widths: Option<Vec<u64>>,
    /// Regime for the prediction column; by default read off κ.
    pub regime: Option<Regime>,
    /// Widths above this use the binned beam.
    pub exact_width_limit: u64,
    pub binned_spacing: f64,
    pub identity: bool,
}

impl Default for CremConfig {
    fn default() -> Self {
        CremConfig {
            a_prime: "poly:1".into(),
            depths: vec![100],
            kappa: Some(vec![1.0 / 3.0]),
            widths: None,
            regime: None,
            exact_width_limit: 100_000,
            binned_spacing: 0.35,
            identity: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsiConfig {
    #[serde(deserialize_with = "one_or_many")]
    pub q: Vec<f64>,
}

impl Default for PsiConfig {
    fn default() -> Self {
        PsiConfig { q: (-10..=10).map(|i| i as f64).collect() }
    }
}

/// Reads a config document. A manifest written by an earlier run is
/// accepted too, in which case its embedded config is used.
pub fn load_document(path: Option<&Path>) -> Result<Value, ConfigError> {
    let Some(path) = path else {
        return Ok(Value::Object(Default::default()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
    match doc {
        Value::Object(mut m) if m.contains_key("config") && m.contains_key("config_digest") => {
            Ok(m.remove("config").unwrap())
        }
        Value::Object(_) => Ok(doc),
        _ => Err(ConfigError::Parse(format!("{}: the document must be a JSON object", path.display()))),
    }
}

/// Parses a flag value: JSON if it parses, a list if it is a comma list of
/// JSON scalars, a plain string otherwise (so `poly:0,1` stays whole).
pub fn parse_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    let parts: Option<Vec<Value>> = raw.split(',').map(|s| serde_json::from_str::<Value>(s.trim()).ok()).collect();
    match parts {
        Some(items) if raw.contains(',') => Value::Array(items),
        _ => Value::String(raw.to_string()),
    }
}

/// Sets `doc[a][b][c] = value` for the path "a.b.c", creating objects on
/// the way.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(invalid(format!("malformed key '{path}'")));
    }
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(invalid(format!("'{}' is not an object", keys[..i].join("."))));
        };
        let key = key.replace('-', "_");
        if i + 1 == keys.len() {
            map.insert(key, value);
            return Ok(());
        }
        cur = map.entry(key).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Applies `--key value` pairs to the document.
pub fn apply_overrides(doc: &mut Value, args: &[String]) -> Result<(), ConfigError> {
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            return Err(invalid(format!("expected a --key, found '{flag}'")));
        };
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| invalid(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        set_path(doc, &key, parse_value(&raw))?;
    }
    Ok(())
}

pub fn resolve(doc: Value) -> Result<ExperimentConfig, ConfigError> {
    let text = serde_json::to_string(&doc).expect("a JSON value serializes");
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.check()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn check(&self) -> Result<(), ConfigError> {
        if self.replicas == 0 {
            return Err(invalid("replicas must be >= 1"));
        }
        if self.threads == 0 {
            return Err(invalid("threads must be >= 1"));
        }
        if let Some(s) = self.max_seconds {
            if !(s > 0.0) {
                return Err(invalid("max_seconds must be positive"));
            }
        }
        match self.mode {
            Mode::Theory | Mode::Simulate | Mode::Sweep => {
                let s = &self.sweep;
                match (&s.alpha, &s.l) {
                    (Some(_), Some(_)) => return Err(invalid("give exactly one of sweep.alpha and sweep.l")),
                    (None, None) => return Err(invalid("one of sweep.alpha or sweep.l is required")),
                    _ => {}
                }
                if s.regime == Regime::Crit && s.alpha.is_none() {
                    return Err(invalid("the crit regime is parametrized by sweep.alpha"));
                }
                if s.regime != Regime::Crit && s.l.is_none() {
                    return Err(invalid(format!("the {} regime is parametrized by sweep.l", s.regime)));
                }
                if s.horizons.is_empty() || s.params().is_empty() {
                    return Err(invalid("sweep.horizons and the alpha/l list must be nonempty"));
                }
                if s.horizons.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                    return Err(invalid("sweep.horizons must be positive"));
                }
                self.model.brw()?;
            }
            Mode::Crem => {
                let c = &self.crem;
                if c.kappa.is_some() == c.widths.is_some() {
                    return Err(invalid("give exactly one of crem.kappa and crem.widths"));
                }
                if c.depths.is_empty() || c.depths.contains(&0) {
                    return Err(invalid("crem.depths must be a nonempty list of positive depths"));
                }
                if c.kappa.as_ref().is_some_and(|k| k.is_empty() || k.iter().any(|&x| !(x > 0.0 && x < 1.0))) {
                    return Err(invalid("crem.kappa values must lie in (0,1)"));
                }
                if c.widths.as_ref().is_some_and(|w| w.is_empty() || w.contains(&0)) {
                    return Err(invalid("crem.widths must be positive"));
                }
                if !(c.binned_spacing > 0.0) {
                    return Err(invalid("crem.binned_spacing must be positive"));
                }
                Profile::parse(&c.a_prime).map_err(|e| invalid(format!("crem.a_prime: {e}")))?;
            }
            Mode::Psi => {
                if self.psi.q.is_empty() {
                    return Err(invalid("psi.q must be nonempty"));
                }
            }
        }
        Ok(())
    }
}
