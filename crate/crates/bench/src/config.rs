//! Experiment configuration, read from TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use moment_filter::models::BenchmarkModel;
use moment_filter::quadrature::Repair;
use moment_filter::transition::{Scheme, Sde, TransitionConfig};
use serde::{Deserialize, Serialize};

/// Bumped whenever a CSV header or column meaning changes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    #[serde(default)]
    pub t0: f64,
    /// Defaults to the model's measurement interval.
    pub dt: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    EulerMaruyama,
    #[default]
    Tme,
    /// Closed-form Gaussian transition; linear model only.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionSection {
    #[serde(default)]
    pub scheme: SchemeName,
    /// TME order `J`.
    #[serde(default = "default_tme_order")]
    pub order: usize,
}

fn default_tme_order() -> usize {
    3
}

impl Default for TransitionSection {
    fn default() -> Self {
        TransitionSection {
            scheme: SchemeName::Tme,
            order: 3,
        }
    }
}

impl TransitionSection {
    /// SDE transition settings; `None` for the closed-form kernel.
    pub fn sde_config(&self) -> Option<TransitionConfig> {
        match self.scheme {
            SchemeName::EulerMaruyama => Some(TransitionConfig::euler_maruyama()),
            SchemeName::Tme => Some(TransitionConfig {
                scheme: Scheme::Tme { order: self.order },
                ..Default::default()
            }),
            SchemeName::Exact => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfConfig {
    pub orders: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GhfConfig {
    #[serde(default = "default_gh_order")]
    pub order: usize,
}

fn default_gh_order() -> usize {
    11
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProposalName {
    #[default]
    Bootstrap,
    /// Locally optimal proposal; linear model only.
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfConfig {
    pub particles: usize,
    #[serde(default = "one")]
    pub substeps: usize,
    #[serde(default)]
    pub proposal: ProposalName,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_lower")]
    pub lower: f64,
    #[serde(default = "default_upper")]
    pub upper: f64,
    #[serde(default = "default_points")]
    pub points: usize,
    /// Use `m` Euler–Maruyama substeps per interval instead of the filter's kernel.
    pub em_substeps: Option<usize>,
}

fn default_lower() -> f64 {
    -8.0
}
fn default_upper() -> f64 {
    8.0
}
fn default_points() -> usize {
    2000
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            lower: -8.0,
            upper: 8.0,
            points: 2000,
            em_substeps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EstimatorsConfig {
    pub mf: Option<MfConfig>,
    #[serde(default)]
    pub kalman: bool,
    pub ghf: Option<GhfConfig>,
    pub pf: Option<PfConfig>,
    pub grid: Option<GridConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { runs: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RepairName {
    #[default]
    FailFast,
    LdlClip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    #[serde(default)]
    pub repair: RepairName,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "yes")]
    pub em_fallback: bool,
}

fn default_epsilon() -> f64 {
    1e-10
}
fn yes() -> bool {
    true
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            repair: RepairName::FailFast,
            epsilon: 1e-10,
            em_fallback: true,
        }
    }
}

impl FilterSection {
    pub fn filter_config(&self) -> moment_filter::filter::FilterConfig {
        moment_filter::filter::FilterConfig {
            repair: match self.repair {
                RepairName::FailFast => Repair::FailFast,
                RepairName::LdlClip => Repair::LdlClip { epsilon: self.epsilon },
            },
            em_fallback: self.em_fallback,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Euler–Maruyama substeps per measurement interval.
    #[serde(default = "default_sim_substeps")]
    pub substeps: usize,
}

fn default_sim_substeps() -> usize {
    10
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { substeps: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Characteristic-function errors are taken over `z ∈ [-z_max, z_max]`.
    #[serde(default = "default_z_max")]
    pub z_max: f64,
    #[serde(default = "default_z_points")]
    pub z_points: usize,
}

fn default_z_max() -> f64 {
    2.0
}
fn default_z_points() -> usize {
    41
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            z_max: 2.0,
            z_points: 41,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
    /// Also dump every filtering moment set as JSON.
    #[serde(default)]
    pub moments_json: bool,
}

fn default_dir() -> PathBuf {
    PathBuf::from("results")
}
fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_dir(),
            formats: default_formats(),
            moments_json: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    /// Names of the parameters to estimate; the rest stay at their configured values.
    pub params: Vec<String>,
    /// Moment order used for the likelihood.
    #[serde(default = "default_est_order")]
    pub order: usize,
    #[serde(default = "default_initial")]
    pub initial: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: u64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Runs whose estimates exceed this value count as divergent.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_est_order() -> usize {
    7
}
fn default_initial() -> f64 {
    0.1
}
fn default_max_iters() -> u64 {
    300
}
fn default_tolerance() -> f64 {
    1e-6
}
fn default_threshold() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub model: ModelConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub transition: TransitionSection,
    #[serde(default)]
    pub estimators: EstimatorsConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub output: OutputConfig,
    pub estimate: Option<EstimateConfig>,
}

fn default_version() -> u32 {
    SCHEMA_VERSION
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// The benchmark model with parameter overrides applied.
    pub fn build_model(&self) -> Result<BenchmarkModel, ConfigError> {
        let mut m = BenchmarkModel::from_name(&self.model.name).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (k, v) in &self.model.params {
            m = m.with_param(k, *v).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(m)
    }

    pub fn dt(&self, model: &BenchmarkModel) -> f64 {
        self.time.dt.unwrap_or_else(|| model.default_dt())
    }

    pub fn times(&self, model: &BenchmarkModel) -> Vec<f64> {
        moment_filter::models::uniform_times(self.time.t0, self.dt(model), self.time.steps)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != SCHEMA_VERSION {
            return invalid(format!("unsupported config version {}", self.version));
        }
        let model = self.build_model()?;
        let is_ou = matches!(model, BenchmarkModel::Ou { .. });
        if self.time.steps < 1 {
            return invalid("time.steps must be at least 1");
        }
        if let Some(dt) = self.time.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return invalid("time.dt must be positive");
            }
        }
        if !self.time.t0.is_finite() {
            return invalid("time.t0 must be finite");
        }
        if self.mc.runs < 1 {
            return invalid("mc.runs must be at least 1");
        }
        match self.transition.scheme {
            SchemeName::Exact if !is_ou => return invalid("the exact transition exists for the ou model only"),
            SchemeName::Tme if self.transition.order < 1 => return invalid("transition.order must be at least 1"),
            _ => {}
        }
        let e = &self.estimators;
        if let Some(mf) = &e.mf {
            if mf.orders.is_empty() || mf.orders.iter().any(|&n| n < 1) {
                return invalid("estimators.mf.orders must list orders >= 1");
            }
        }
        if e.kalman && !is_ou {
            return invalid("kalman is available for the ou model only");
        }
        if let Some(g) = &e.ghf {
            if g.order < 1 {
                return invalid("estimators.ghf.order must be at least 1");
            }
        }
        if let Some(p) = &e.pf {
            if p.particles < 1 || p.substeps < 1 {
                return invalid("estimators.pf needs particles >= 1 and substeps >= 1");
            }
            if p.proposal == ProposalName::Optimal && !is_ou {
                return invalid("the optimal proposal exists for the ou model only");
            }
        }
        if let Some(g) = &e.grid {
            if model.dim() != 1 {
                return invalid("the grid filter needs a one-dimensional model");
            }
            if g.points < 3 || !(g.upper > g.lower) {
                return invalid("estimators.grid needs points >= 3 and lower < upper");
            }
            if g.em_substeps == Some(0) {
                return invalid("estimators.grid.em_substeps must be at least 1");
            }
        }
        if self.simulation.substeps < 1 {
            return invalid("simulation.substeps must be at least 1");
        }
        if !(self.metrics.z_max > 0.0) || self.metrics.z_points < 2 {
            return invalid("metrics needs z_max > 0 and z_points >= 2");
        }
        if self.filter.repair == RepairName::LdlClip && !(self.filter.epsilon > 0.0) {
            return invalid("filter.epsilon must be positive");
        }
        if let Some(est) = &self.estimate {
            if est.params.is_empty() {
                return invalid("estimate.params must not be empty");
            }
            for p in &est.params {
                if !model.param_names().contains(&p.as_str()) {
                    return invalid(format!("model {} has no parameter {p}", model.name()));
                }
            }
            if est.order < 1 || !(est.initial > 0.0) || !(est.threshold > 0.0) || !(est.tolerance > 0.0) {
                return invalid("estimate needs order >= 1 and positive initial, threshold, tolerance");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [model]
        name = "ou"
        [time]
        steps = 5
        [estimators]
        kalman = true
    "#;

    #[test]
    fn minimal_config_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let m = c.build_model().unwrap();
        assert_eq!(c.dt(&m), 0.1);
        assert_eq!(c.times(&m).len(), 6);
        assert_eq!(c.mc.runs, 1);
        assert_eq!(c.transition.scheme, SchemeName::Tme);
        assert_eq!(c.output.formats, vec![Format::Csv, Format::Json]);
    }

    #[test]
    fn rejects_invalid_combinations() {
        let bad = [
            MINIMAL.replace("steps = 5", "steps = 0"),
            MINIMAL.replace("\"ou\"", "\"benes_bernoulli\""),
            MINIMAL.replace("kalman = true", "kalman = true\ngrid = { points = 2 }"),
            MINIMAL.replace("[estimators]", "[mc]\nruns = 0\n[estimators]"),
            MINIMAL
                .replace("\"ou\"", "\"prey_predator\"")
                .replace("kalman = true", "grid = {}"),
            MINIMAL.replace("\"ou\"", "\"nope\""),
            MINIMAL.replace("[time]", "[time]\nbogus = 1"),
        ];
        for text in bad {
            assert!(ExperimentConfig::from_toml_str(&text).is_err(), "{text}");
        }
    }

    #[test]
    fn parameter_overrides_apply() {
        let text = MINIMAL.replace("name = \"ou\"", "name = \"ou\"\nparams = { sigma = 0.7 }");
        let m = ExperimentConfig::from_toml_str(&text).unwrap().build_model().unwrap();
        assert_eq!(m, BenchmarkModel::Ou { ell: 1.0, sigma: 0.7 });
    }
}
