//! Run configuration: a flat `key = value` file merged under command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use elliptrim::estimators::EstimatorVariant;
use elliptrim::family::RadialFamily;
use elliptrim::inference::{Component, EfficiencyConvention};
use elliptrim::lab::Scenario;

/// An input problem; reported on stderr with exit code 1.
#[derive(Debug, Clone, PartialEq)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

impl From<elliptrim::error::Error> for InputError {
    fn from(e: elliptrim::error::Error) -> Self {
        InputError(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, InputError>;

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(InputError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fit,
    Simulate,
    Breakdown,
    Efficiency,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Fit => "fit",
            Command::Simulate => "simulate",
            Command::Breakdown => "breakdown",
            Command::Efficiency => "efficiency",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = InputError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => bad(format!("unknown output format '{other}' (expected json or csv)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimulationMode {
    #[default]
    Consistency,
    Rate,
}

/// Unvalidated settings. Keys are the long flag names; `_` and `-` are interchangeable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawSettings {
    values: BTreeMap<String, Vec<String>>,
}

const KNOWN_KEYS: &[&str] = &[
    "input",
    "family",
    "coverage",
    "variant",
    "alpha-restrict",
    "seed",
    "mc-budget",
    "out",
    "format",
    "p",
    "n-grid",
    "replicates",
    "scenario",
    "pi0",
    "radius",
    "count",
    "magnitude",
    "mode",
    "alpha",
    "component",
    "convention",
    "blowup-location",
    "blowup-condition",
    "n-subsets",
];

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('_', "-")
}

impl RawSettings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, values: Vec<String>) {
        if !values.is_empty() {
            self.values.insert(normalize(key), values);
        }
    }

    pub fn set_one(&mut self, key: &str, value: Option<String>) {
        if let Some(v) = value {
            self.set(key, vec![v]);
        }
    }

    /// Parses `key = value` lines; `#` starts a comment, list values are
    /// comma-separated and a repeated key appends.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut out = RawSettings::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return bad(format!("{origin}:{}: expected 'key = value', found '{line}'", i + 1));
            };
            let key = normalize(k);
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return bad(format!("{origin}:{}: unknown key '{}'", i + 1, k.trim()));
            }
            out.values.entry(key).or_default().push(v.trim().to_string());
        }
        Ok(out)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InputError(format!("cannot read config file {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// `self` wins over `base` key by key.
    pub fn over(mut self, base: RawSettings) -> Self {
        for (k, v) in base.values {
            self.values.entry(k).or_insert(v);
        }
        self
    }

    fn one(&self, key: &str) -> Option<&str> {
        self.values.get(key).and_then(|v| v.last()).map(|s| s.as_str())
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.values
            .get(key)
            .map(|vs| vs.iter().flat_map(|v| v.split(',')).map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default()
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.one(key) {
            None => Ok(None),
            Some(s) => s.parse().map(Some).map_err(|e| InputError(format!("--{key}: cannot parse '{s}': {e}"))),
        }
    }

    fn parsed_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        self.list(key)
            .iter()
            .map(|s| s.parse().map_err(|e| InputError(format!("--{key}: cannot parse '{s}': {e}"))))
            .collect()
    }
}

/// Validated configuration of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub input_path: Option<PathBuf>,
    pub family: RadialFamily,
    /// Enlargement coverage `1 - α` of the MVE.
    pub coverage: Option<f64>,
    pub variants: Vec<EstimatorVariant>,
    pub alpha_restrict: Option<f64>,
    pub seed: u64,
    pub mc_budget: Option<usize>,
    pub format: Format,
    pub output_path: Option<PathBuf>,
    pub n_subsets: Option<usize>,
    pub simulation: Option<SimulationSettings>,
    pub efficiency: Option<EfficiencySettings>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSettings {
    pub scenario: Scenario,
    pub p: usize,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub mode: SimulationMode,
    pub blowup_location: f64,
    pub blowup_condition: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencySettings {
    pub p: usize,
    /// `None` is the plain MVE.
    pub alphas: Vec<Option<f64>>,
    pub components: Vec<Component>,
    pub convention: EfficiencyConvention,
}

fn parse_alpha(s: &str) -> Result<Option<f64>> {
    match s.to_ascii_lowercase().as_str() {
        "none" | "0" | "-" => Ok(None),
        v => v.parse().map(Some).map_err(|_| InputError(format!("--alpha: cannot parse '{s}'"))),
    }
}

fn scenario(raw: &RawSettings, command: Command) -> Result<Scenario> {
    let name = match command {
        Command::Breakdown => raw.one("scenario").unwrap_or("replacement_outliers"),
        _ => raw.one("scenario").unwrap_or("clean"),
    };
    let need = |key: &str| -> Result<f64> {
        raw.parsed::<f64>(key)?.ok_or_else(|| InputError(format!("scenario '{name}' needs --{key}")))
    };
    let s = match normalize(name).as_str() {
        "clean" => Scenario::Clean,
        "gem-ring" | "gem" => Scenario::GemRing { pi0: need("pi0")?, radius: raw.parsed("radius")?.unwrap_or(10.0) },
        "replacement-outliers" | "replacement" => Scenario::ReplacementOutliers {
            count: raw.parsed("count")?.ok_or_else(|| InputError("replacement outliers need --count".into()))?,
            magnitude: raw.parsed("magnitude")?.unwrap_or(1e6),
        },
        other => return bad(format!("unknown scenario '{other}' (expected clean, gem_ring or replacement_outliers)")),
    };
    if command == Command::Breakdown && !matches!(s, Scenario::ReplacementOutliers { .. }) {
        return bad("breakdown runs need the replacement_outliers scenario");
    }
    Ok(s)
}

impl RunConfig {
    pub fn resolve(command: Command, raw: &RawSettings) -> Result<Self> {
        let family = match raw.one("family") {
            Some(s) => s.parse::<RadialFamily>()?,
            None => RadialFamily::Gaussian,
        };
        let seed = raw.parsed::<u64>("seed")?;
        let seed = match (command, seed) {
            (Command::Fit, s) => s.unwrap_or(0),
            (_, Some(s)) => s,
            (c, None) => return bad(format!("{c} needs an explicit --seed")),
        };
        let coverage = raw.parsed::<f64>("coverage")?;
        if let Some(c) = coverage {
            if !(0.5..1.0).contains(&c) {
                return bad(format!("--coverage must lie in [0.5, 1), got {c}"));
            }
        }
        let alpha_restrict = raw.parsed::<f64>("alpha-restrict")?;
        if let Some(a) = alpha_restrict {
            if !(a > 0.0 && a < 1.0) {
                return bad(format!("--alpha-restrict must lie in (0, 1), got {a}"));
            }
        }
        let mut variants: Vec<EstimatorVariant> = raw.parsed_list("variant")?;
        if variants.is_empty() {
            variants = match command {
                Command::Fit => vec![EstimatorVariant::S],
                Command::Efficiency => vec![EstimatorVariant::T, EstimatorVariant::C],
                Command::Simulate => vec![EstimatorVariant::S, EstimatorVariant::C],
                Command::Breakdown => vec![EstimatorVariant::S, EstimatorVariant::C, EstimatorVariant::R],
            };
        }
        let mut seen = Vec::new();
        variants.retain(|v| {
            let fresh = !seen.contains(v);
            seen.push(*v);
            fresh
        });
        let mc_budget = raw.parsed::<usize>("mc-budget")?;
        if mc_budget == Some(0) {
            return bad("--mc-budget must be positive");
        }
        let input_path = raw.one("input").map(PathBuf::from);
        if command == Command::Fit {
            match &input_path {
                None => return bad("fit needs --input"),
                Some(p) if !p.exists() => return bad(format!("input file {} does not exist", p.display())),
                _ => {}
            }
        }
        let p = raw.parsed::<usize>("p")?.unwrap_or(2);
        if p == 0 {
            return bad("--p must be positive");
        }
        let simulation = match command {
            Command::Simulate | Command::Breakdown => {
                let n_grid: Vec<usize> = raw.parsed_list("n-grid")?;
                if n_grid.is_empty() {
                    return bad(format!("{command} needs --n-grid"));
                }
                let mode = match raw.one("mode").map(normalize).as_deref() {
                    None | Some("consistency") => SimulationMode::Consistency,
                    Some("rate") => SimulationMode::Rate,
                    Some(other) => return bad(format!("unknown mode '{other}' (expected consistency or rate)")),
                };
                Some(SimulationSettings {
                    scenario: scenario(raw, command)?,
                    p,
                    n_grid,
                    replicates: raw.parsed("replicates")?.unwrap_or(100),
                    mode,
                    blowup_location: raw.parsed("blowup-location")?.unwrap_or(100.0),
                    blowup_condition: raw.parsed("blowup-condition")?.unwrap_or(1e6),
                })
            }
            _ => None,
        };
        let efficiency = match command {
            Command::Efficiency => {
                let alphas = raw.list("alpha");
                let alphas = if alphas.is_empty() {
                    vec![None, Some(0.25), Some(0.1), Some(0.025)]
                } else {
                    alphas.iter().map(|s| parse_alpha(s)).collect::<Result<_>>()?
                };
                let mut components: Vec<Component> = raw.parsed_list("component")?;
                if components.is_empty() {
                    components = vec![Component::Mu, Component::SigmaDiag];
                    if p >= 2 {
                        components.push(Component::SigmaOffdiag);
                    }
                }
                let convention = match raw.one("convention").map(normalize).as_deref() {
                    None | Some("information-ratio") => EfficiencyConvention::InformationRatio,
                    Some("inverse-variance") => EfficiencyConvention::InverseVariance,
                    Some(other) => return bad(format!("unknown convention '{other}'")),
                };
                Some(EfficiencySettings { p, alphas, components, convention })
            }
            _ => None,
        };
        Ok(RunConfig {
            command,
            input_path,
            family,
            coverage,
            variants,
            alpha_restrict,
            seed,
            mc_budget,
            format: raw.parsed("format")?.unwrap_or_default(),
            output_path: raw.one("out").map(PathBuf::from),
            n_subsets: raw.parsed("n-subsets")?,
            simulation,
            efficiency,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_yield_to_flags() {
        let file = RawSettings::parse("family = t:5\nseed=3 # comment\nvariant = s, c\n\n# note\nn_grid = 200,800\n", "cfg").unwrap();
        let mut flags = RawSettings::new();
        flags.set_one("seed", Some("9".into()));
        let cfg = RunConfig::resolve(Command::Simulate, &flags.over(file)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.family, RadialFamily::StudentT { nu: 5.0 });
        assert_eq!(cfg.variants, vec![EstimatorVariant::S, EstimatorVariant::C]);
        assert_eq!(cfg.simulation.unwrap().n_grid, vec![200, 800]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RawSettings::parse("bogus = 1", "cfg").is_err());
        assert!(RawSettings::parse("no separator", "cfg").is_err());
        let raw = RawSettings::parse("n_grid = 100", "cfg").unwrap();
        let e = RunConfig::resolve(Command::Simulate, &raw).unwrap_err();
        assert!(e.0.contains("--seed"));
        let raw = RawSettings::parse("seed = 1\nfamily = cauchy", "cfg").unwrap();
        assert!(RunConfig::resolve(Command::Efficiency, &raw).is_err());
        let raw = RawSettings::parse("seed = 1\ncoverage = 0.3", "cfg").unwrap();
        assert!(RunConfig::resolve(Command::Efficiency, &raw).is_err());
    }

    #[test]
    fn efficiency_defaults() {
        let raw = RawSettings::parse("seed = 1\nalpha = none, 0.025", "cfg").unwrap();
        let cfg = RunConfig::resolve(Command::Efficiency, &raw).unwrap();
        let e = cfg.efficiency.unwrap();
        assert_eq!(e.alphas, vec![None, Some(0.025)]);
        assert_eq!(e.components.len(), 3);
        assert_eq!(cfg.variants, vec![EstimatorVariant::T, EstimatorVariant::C]);
    }

    #[test]
    fn breakdown_scenario() {
        let raw = RawSettings::parse("seed = 1\nn_grid = 20\ncount = 8", "cfg").unwrap();
        let cfg = RunConfig::resolve(Command::Breakdown, &raw).unwrap();
        assert_eq!(cfg.simulation.unwrap().scenario, Scenario::ReplacementOutliers { count: 8, magnitude: 1e6 });
        let raw = RawSettings::parse("seed = 1\nn_grid = 20\nscenario = clean", "cfg").unwrap();
        assert!(RunConfig::resolve(Command::Breakdown, &raw).is_err());
    }
}
