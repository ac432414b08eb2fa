//! Scenario configuration: schema, parsing, validation and the
//! strong-controllability precondition.
//!
//! The document format is YAML. Top-level keys are exactly `domain`, `grid`,
//! `target`, `obstacles`, `wind`, `fd`, `source`, `transport`, `picard`,
//! `value_solver`, `eps_reg`, `eps_c` and `seed`. Unknown keys anywhere are
//! rejected. Defaults exist only where the schema below declares one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fundamental::FundamentalDiagram;
use crate::vec3::Vec3;
use crate::wind::WindModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("type mismatch at `{path}`: {message}")]
    TypeMismatch { path: String, message: String },
    #[error("missing required key `{0}`")]
    MissingRequired(String),
    #[error("invalid value at `{path}`: {reason}")]
    Invalid { path: String, reason: String },
}

fn invalid(path: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub domain: DomainConfig,
    pub grid: GridConfig,
    pub target: TargetConfig,
    #[serde(default)]
    pub obstacles: Vec<BoxConfig>,
    #[serde(default)]
    pub wind: WindConfig,
    pub fd: FdConfig,
    pub source: SourceConfig,
    #[serde(default)]
    pub transport: TransportConfig,
    pub picard: PicardConfig,
    #[serde(default)]
    pub value_solver: ValueSolverConfig,
    #[serde(default = "defaults::eps_reg")]
    pub eps_reg: f64,
    #[serde(default)]
    pub eps_c: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub min: Vec3<f64>,
    pub max: Vec3<f64>,
    /// Clip obstacle boxes that stick out of the domain instead of rejecting them.
    #[serde(default)]
    pub clip_obstacles: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub center: Vec3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub min: Vec3<f64>,
    pub max: Vec3<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WindConfig {
    #[default]
    None,
    Uniform {
        v: Vec3<f64>,
    },
    Vortex {
        center_xy: [f64; 2],
        omega: f64,
        core_radius: f64,
    },
    Shear {
        rate: f64,
        axis_dir: Vec3<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdConfig {
    pub v_max0: f64,
    pub v_min: f64,
    pub rho_jam: f64,
    pub beta: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Homing {
        rate_density: f64,
    },
    P2p {
        center: Vec3<f64>,
        radius: f64,
        total_rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportConfig {
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "defaults::cfl")]
    pub cfl: f64,
    #[serde(default = "defaults::transport_max_iters")]
    pub max_iters: usize,
    #[serde(default = "defaults::tol_rel")]
    pub tol_rel: f64,
    /// Relative mass-balance threshold used by the ledger check.
    #[serde(default = "defaults::mass_tol")]
    pub mass_tol: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            kappa: 0.0,
            cfl: defaults::cfl(),
            max_iters: defaults::transport_max_iters(),
            tol_rel: defaults::tol_rel(),
            mass_tol: defaults::mass_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardConfig {
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    pub rho_max: f64,
    #[serde(default = "defaults::max_outer")]
    pub max_outer: usize,
    #[serde(default = "defaults::rho_change_tol")]
    pub rho_change_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValueSolverConfig {
    Fsm(FsmConfig),
    Pinn(PinnConfig),
}

impl Default for ValueSolverConfig {
    fn default() -> Self {
        ValueSolverConfig::Fsm(FsmConfig::default())
    }
}

impl ValueSolverConfig {
    pub fn backend(&self) -> Backend {
        match self {
            ValueSolverConfig::Fsm(_) => Backend::Fsm,
            ValueSolverConfig::Pinn(_) => Backend::Pinn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FsmConfig {
    #[serde(default = "defaults::fsm_tol")]
    pub tol: f64,
    #[serde(default = "defaults::max_sweep_rounds")]
    pub max_sweep_rounds: usize,
}

impl Default for FsmConfig {
    fn default() -> Self {
        Self {
            tol: defaults::fsm_tol(),
            max_sweep_rounds: defaults::max_sweep_rounds(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinnConfig {
    #[serde(default = "defaults::hidden_layers")]
    pub hidden_layers: Vec<usize>,
    #[serde(default = "defaults::activation")]
    pub activation: String,
    #[serde(default = "defaults::n_interior")]
    pub n_interior: usize,
    #[serde(default = "defaults::n_near_geom")]
    pub n_near_geom: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default)]
    pub cosine_decay: bool,
    /// Finite-difference step for spatial gradients; half the smallest spacing when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_step_h: Option<f64>,
    #[serde(default, alias = "barrier_C")]
    pub barrier_c: f64,
    #[serde(default = "defaults::barrier_k")]
    pub barrier_k: f64,
    #[serde(default = "defaults::bc_power_p")]
    pub bc_power_p: f64,
    /// Residual mask buffer; half the smallest spacing when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_delta: Option<f64>,
    /// Width of the near-geometry sampling band; twice the largest spacing when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near_band: Option<f64>,
    /// Keep training the same network across outer iterations.
    #[serde(default = "defaults::warm_start")]
    pub warm_start: bool,
}

impl Default for PinnConfig {
    fn default() -> Self {
        Self {
            hidden_layers: defaults::hidden_layers(),
            activation: defaults::activation(),
            n_interior: defaults::n_interior(),
            n_near_geom: defaults::n_near_geom(),
            epochs: defaults::epochs(),
            lr: defaults::lr(),
            cosine_decay: false,
            fd_step_h: None,
            barrier_c: 0.0,
            barrier_k: defaults::barrier_k(),
            bc_power_p: defaults::bc_power_p(),
            mask_delta: None,
            near_band: None,
            warm_start: defaults::warm_start(),
        }
    }
}

/// Value-solver backend selected for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Fsm,
    Pinn,
}

impl Backend {
    pub fn as_str(&self) -> &'static str {
        match self {
            Backend::Fsm => "fsm",
            Backend::Pinn => "pinn",
        }
    }
}

/// Schema defaults. Every optional key takes its value from here.
pub mod defaults {
    pub fn eps_reg() -> f64 {
        1e-3
    }
    pub fn cfl() -> f64 {
        0.9
    }
    pub fn transport_max_iters() -> usize {
        50_000
    }
    pub fn tol_rel() -> f64 {
        1e-8
    }
    pub fn mass_tol() -> f64 {
        1e-3
    }
    pub fn alpha() -> f64 {
        0.5
    }
    pub fn max_outer() -> usize {
        20
    }
    pub fn rho_change_tol() -> f64 {
        1e-3
    }
    pub fn fsm_tol() -> f64 {
        1e-10
    }
    pub fn max_sweep_rounds() -> usize {
        2000
    }
    pub fn hidden_layers() -> Vec<usize> {
        vec![16, 16]
    }
    pub fn activation() -> String {
        "tanh".to_string()
    }
    pub fn n_interior() -> usize {
        1024
    }
    pub fn n_near_geom() -> usize {
        256
    }
    pub fn epochs() -> usize {
        300
    }
    pub fn lr() -> f64 {
        1e-2
    }
    pub fn barrier_k() -> f64 {
        10.0
    }
    pub fn bc_power_p() -> f64 {
        1.0
    }
    pub fn warm_start() -> bool {
        true
    }
}

/// Parses a YAML document into a [`ScenarioConfig`]. Structural checks only;
/// call [`ScenarioConfig::validate`] for the value invariants.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let value: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| ConfigError::MalformedDocument(e.to_string()))?;
    if value.is_null() {
        return Err(ConfigError::MalformedDocument("empty document".into()));
    }
    serde_path_to_error::deserialize(value).map_err(|err| classify(err.path().to_string(), err.inner().to_string()))
}

/// Parses and validates in one step.
pub fn load_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let cfg = parse_config(text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn join_path(parent: &str, key: &str) -> String {
    if parent.is_empty() || parent == "." {
        key.to_string()
    } else if parent == key || parent.ends_with(&format!(".{key}")) {
        parent.to_string()
    } else {
        format!("{parent}.{key}")
    }
}

fn backticked(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

fn classify(path: String, msg: String) -> ConfigError {
    if msg.starts_with("unknown field") || msg.starts_with("unknown variant") {
        let key = backticked(&msg).unwrap_or("");
        if msg.starts_with("unknown variant") {
            return ConfigError::TypeMismatch { path, message: msg };
        }
        ConfigError::UnknownKey(join_path(&path, key))
    } else if msg.starts_with("missing field") {
        let key = backticked(&msg).unwrap_or("");
        ConfigError::MissingRequired(join_path(&path, key))
    } else if msg.starts_with("invalid type")
        || msg.starts_with("invalid value")
        || msg.starts_with("invalid length")
    {
        ConfigError::TypeMismatch { path, message: msg }
    } else {
        ConfigError::MalformedDocument(format!("{path}: {msg}"))
    }
}

impl ScenarioConfig {
    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    /// Cell spacing implied by domain and grid shape.
    pub fn spacing(&self) -> Vec3<f64> {
        let n = self.grid.shape;
        Vec3([0, 1, 2].map(|d| (self.domain.max[d] - self.domain.min[d]) / n[d] as f64))
    }

    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Vec3<f64> {
        let h = self.spacing();
        let idx = [i, j, k];
        Vec3([0, 1, 2].map(|d| self.domain.min[d] + (idx[d] as f64 + 0.5) * h[d]))
    }

    /// Obstacle boxes after optional clipping to the domain.
    pub fn effective_obstacles(&self) -> Vec<BoxConfig> {
        self.obstacles
            .iter()
            .map(|b| BoxConfig {
                min: b.min.zip(self.domain.min, f64::max),
                max: b.max.zip(self.domain.max, f64::min),
            })
            .collect()
    }

    pub fn fundamental_diagram(&self) -> FundamentalDiagram<f64> {
        FundamentalDiagram::from_config(&self.fd)
    }

    pub fn wind_model(&self) -> WindModel<f64> {
        WindModel::from_config(&self.wind, self.domain.min)
    }

    /// Checks the value invariants of the schema.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let (lo, hi) = (self.domain.min, self.domain.max);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(invalid("domain", "bounds must be finite"));
        }
        for d in 0..3 {
            if lo[d] >= hi[d] {
                return Err(invalid("domain", format!("min[{d}] must be < max[{d}]")));
            }
            if self.grid.shape[d] < 4 {
                return Err(invalid("grid.shape", "each axis needs at least 4 cells"));
            }
        }

        let t = &self.target;
        if !(t.radius > 0.0 && t.radius.is_finite()) {
            return Err(invalid("target.radius", "must be positive"));
        }
        for d in 0..3 {
            if t.center[d] - t.radius <= lo[d] || t.center[d] + t.radius >= hi[d] {
                return Err(invalid("target", "target sphere must lie strictly inside the domain"));
            }
        }

        for (n, b) in self.obstacles.iter().enumerate() {
            let path = format!("obstacles[{n}]");
            for d in 0..3 {
                if !(b.min[d] < b.max[d]) {
                    return Err(invalid(&path, "box min must be < max on every axis"));
                }
                let outside = b.min[d] < lo[d] || b.max[d] > hi[d];
                if outside && !self.domain.clip_obstacles {
                    return Err(invalid(
                        &path,
                        "box extends outside the domain (set domain.clip_obstacles to allow clipping)",
                    ));
                }
            }
        }
        for (n, b) in self.effective_obstacles().iter().enumerate() {
            if (0..3).any(|d| b.min[d] >= b.max[d]) {
                return Err(invalid(&format!("obstacles[{n}]"), "box lies outside the domain"));
            }
            let q = t.center.zip(b.min, f64::max).zip(b.max, f64::min);
            if (q - t.center).norm() <= t.radius {
                return Err(invalid(&format!("obstacles[{n}]"), "box intersects the target sphere"));
            }
        }

        match &self.wind {
            WindConfig::None => {}
            WindConfig::Uniform { v } => {
                if !v.is_finite() {
                    return Err(invalid("wind.v", "must be finite"));
                }
            }
            WindConfig::Vortex { omega, core_radius, center_xy } => {
                if !(*core_radius > 0.0) {
                    return Err(invalid("wind.core_radius", "must be positive"));
                }
                if !omega.is_finite() || !center_xy.iter().all(|c| c.is_finite()) {
                    return Err(invalid("wind", "vortex parameters must be finite"));
                }
            }
            WindConfig::Shear { rate, axis_dir } => {
                if !rate.is_finite() {
                    return Err(invalid("wind.rate", "must be finite"));
                }
                if (axis_dir.norm() - 1.0).abs() > 1e-9 {
                    return Err(invalid("wind.axis_dir", "must have unit norm"));
                }
            }
        }

        let fd = &self.fd;
        if !(fd.v_min > 0.0) {
            return Err(invalid("fd.v_min", "must be positive"));
        }
        if !(fd.clip_lo >= fd.v_min) {
            return Err(invalid("fd.clip_lo", "must be >= fd.v_min"));
        }
        if !(fd.clip_lo <= fd.clip_hi) {
            return Err(invalid("fd.clip_hi", "must be >= fd.clip_lo"));
        }
        if !(fd.rho_jam > 0.0) {
            return Err(invalid("fd.rho_jam", "must be positive"));
        }
        if !(fd.beta > 0.0) {
            return Err(invalid("fd.beta", "must be positive"));
        }
        if !(fd.v_max0 > 0.0) {
            return Err(invalid("fd.v_max0", "must be positive"));
        }

        match &self.source {
            SourceConfig::Homing { rate_density } => {
                if !(*rate_density >= 0.0) || !rate_density.is_finite() {
                    return Err(invalid("source.rate_density", "must be finite and >= 0"));
                }
            }
            SourceConfig::P2p { radius, total_rate, .. } => {
                if !(*radius > 0.0) {
                    return Err(invalid("source.radius", "must be positive"));
                }
                if !(*total_rate >= 0.0) || !total_rate.is_finite() {
                    return Err(invalid("source.total_rate", "must be finite and >= 0"));
                }
            }
        }

        let tr = &self.transport;
        if !(tr.kappa >= 0.0) {
            return Err(invalid("transport.kappa", "must be >= 0"));
        }
        if !(tr.cfl > 0.0 && tr.cfl <= 1.0) {
            return Err(invalid("transport.cfl", "must lie in (0, 1]"));
        }
        if !(tr.tol_rel > 0.0) {
            return Err(invalid("transport.tol_rel", "must be positive"));
        }

        let pc = &self.picard;
        if !(pc.alpha > 0.0 && pc.alpha <= 1.0) {
            return Err(invalid("picard.alpha", "must lie in (0, 1]"));
        }
        if !(pc.rho_max > 0.0) {
            return Err(invalid("picard.rho_max", "must be positive"));
        }
        if pc.max_outer == 0 {
            return Err(invalid("picard.max_outer", "must be >= 1"));
        }

        if !(self.eps_reg >= 0.0) {
            return Err(invalid("eps_reg", "must be >= 0"));
        }
        if !(self.eps_c >= 0.0) {
            return Err(invalid("eps_c", "must be >= 0"));
        }

        if let ValueSolverConfig::Pinn(p) = &self.value_solver {
            if p.hidden_layers.is_empty() || p.hidden_layers.contains(&0) {
                return Err(invalid("value_solver.hidden_layers", "need at least one non-empty layer"));
            }
            if crate::pinn::Activation::from_name(&p.activation).is_none() {
                return Err(invalid("value_solver.activation", "expected `tanh` or `sin`"));
            }
            if !(p.lr > 0.0) {
                return Err(invalid("value_solver.lr", "must be positive"));
            }
            if !(p.bc_power_p > 0.0) {
                return Err(invalid("value_solver.bc_power_p", "must be positive"));
            }
            if p.n_interior + p.n_near_geom == 0 {
                return Err(invalid("value_solver", "collocation set would be empty"));
            }
            for (name, v) in [("fd_step_h", p.fd_step_h), ("mask_delta", p.mask_delta), ("near_band", p.near_band)] {
                if let Some(v) = v {
                    if !(v > 0.0) {
                        return Err(invalid(&format!("value_solver.{name}"), "must be positive"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Outcome of the strong-controllability check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControllabilityReport {
    pub pass: bool,
    /// `v_max(rho_max)`, the smallest achievable airspeed.
    pub min_v_max: f64,
    pub max_wind_speed: f64,
    /// `min_v_max - max_wind_speed - eps_c`; the check passes iff this is positive.
    pub margin: f64,
    pub worst_cell: [usize; 3],
    pub worst_point: [f64; 3],
}

/// Checks `v_max(rho) > |v_w(x)| + eps_c` for all cell centers and densities
/// up to `rho_max`. `v_max` is non-increasing, so its minimum sits at `rho_max`.
pub fn validate_controllability(cfg: &ScenarioConfig) -> ControllabilityReport {
    let fd = cfg.fundamental_diagram();
    let wind = cfg.wind_model();
    let min_v_max = fd.v_max(cfg.picard.rho_max);
    let [nx, ny, nz] = cfg.grid.shape;
    let mut worst = (0.0_f64, [0usize; 3], cfg.cell_center(0, 0, 0));
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let x = cfg.cell_center(i, j, k);
                let s = wind.eval(x).norm();
                if s > worst.0 {
                    worst = (s, [i, j, k], x);
                }
            }
        }
    }
    let margin = min_v_max - worst.0 - cfg.eps_c;
    ControllabilityReport {
        pass: margin > 0.0,
        min_v_max,
        max_wind_speed: worst.0,
        margin,
        worst_cell: worst.1,
        worst_point: worst.2 .0,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub const MINIMAL_HOMING: &str = "\
domain:
  min: [0.0, 0.0, 0.0]
  max: [1.0, 1.0, 1.0]
grid:
  shape: [8, 8, 8]
target:
  center: [0.5, 0.5, 0.5]
  radius: 0.15
fd:
  v_max0: 1.0
  v_min: 0.1
  rho_jam: 1.0
  beta: 20.0
  clip_lo: 0.6
  clip_hi: 10.0
source:
  kind: homing
  rate_density: 1.0
picard:
  rho_max: 0.8
";

    fn with_wind(wind: WindConfig) -> ScenarioConfig {
        let mut c = parse_config(MINIMAL_HOMING).unwrap();
        c.wind = wind;
        c
    }

    #[test]
    fn minimal_document_echoes_values() {
        let c = parse_config(MINIMAL_HOMING).unwrap();
        assert_eq!(c.grid.shape, [8, 8, 8]);
        assert_eq!(c.target.radius, 0.15);
        assert_eq!(c.fd.clip_lo, 0.6);
        assert_eq!(c.source, SourceConfig::Homing { rate_density: 1.0 });
        assert_eq!(c.picard.rho_max, 0.8);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn schema_defaults_fill_omitted_keys() {
        let c = parse_config(MINIMAL_HOMING).unwrap();
        assert_eq!(c.picard.alpha, 0.5);
        assert_eq!(c.wind, WindConfig::None);
        assert!(c.obstacles.is_empty());
        assert_eq!(c.transport, TransportConfig::default());
        assert_eq!(c.value_solver, ValueSolverConfig::Fsm(FsmConfig::default()));
        // default survives a serialize/parse round trip
        let again = parse_config(&c.to_yaml()).unwrap();
        assert_eq!(again.picard.alpha, 0.5);
        assert_eq!(again, c);
    }

    #[test]
    fn typo_key_is_unknown() {
        let doc = MINIMAL_HOMING.replace("grid:\n  shape", "grid:\n  grdi_shape");
        assert_eq!(parse_config(&doc), Err(ConfigError::UnknownKey("grid.grdi_shape".into())));
        let doc = format!("{MINIMAL_HOMING}grdi_shape: [4, 4, 4]\n");
        assert_eq!(parse_config(&doc), Err(ConfigError::UnknownKey("grdi_shape".into())));
    }

    #[test]
    fn unknown_key_inside_tagged_union() {
        let doc = format!("{MINIMAL_HOMING}wind:\n  kind: uniform\n  v: [0.1, 0, 0]\n  gust: 2\n");
        assert_eq!(parse_config(&doc), Err(ConfigError::UnknownKey("wind.gust".into())));
    }

    #[test]
    fn missing_and_mismatched_keys() {
        let doc = MINIMAL_HOMING.replace("  rho_max: 0.8\n", "  alpha: 0.3\n");
        assert_eq!(parse_config(&doc), Err(ConfigError::MissingRequired("picard.rho_max".into())));
        let doc = MINIMAL_HOMING.replace("radius: 0.15", "radius: big");
        assert!(matches!(parse_config(&doc), Err(ConfigError::TypeMismatch { path, .. }) if path == "target.radius"));
        assert!(matches!(parse_config("domain: [1, 2"), Err(ConfigError::MalformedDocument(_))));
        assert!(matches!(parse_config(""), Err(ConfigError::MalformedDocument(_))));
    }

    #[test]
    fn validation_rejects_bad_invariants() {
        let mut c = parse_config(MINIMAL_HOMING).unwrap();
        c.grid.shape = [3, 8, 8];
        assert!(c.validate().is_err());

        let mut c = parse_config(MINIMAL_HOMING).unwrap();
        c.target.center = Vec3([0.05, 0.5, 0.5]);
        assert!(c.validate().is_err());

        let mut c = parse_config(MINIMAL_HOMING).unwrap();
        c.fd.clip_lo = 0.05;
        assert!(c.validate().is_err());

        let mut c = parse_config(MINIMAL_HOMING).unwrap();
        c.picard.alpha = 0.0;
        assert!(c.validate().is_err());

        let mut c = parse_config(MINIMAL_HOMING).unwrap();
        c.transport.cfl = 1.5;
        assert!(c.validate().is_err());

        let mut c = parse_config(MINIMAL_HOMING).unwrap();
        c.obstacles.push(BoxConfig { min: Vec3([0.45, 0.45, 0.45]), max: Vec3([0.7, 0.7, 0.7]) });
        assert!(c.validate().is_err(), "obstacle overlapping target");

        let mut c = parse_config(MINIMAL_HOMING).unwrap();
        c.obstacles.push(BoxConfig { min: Vec3([0.8, 0.0, 0.0]), max: Vec3([1.2, 0.3, 0.3]) });
        assert!(c.validate().is_err(), "obstacle outside the domain");
        c.domain.clip_obstacles = true;
        assert!(c.validate().is_ok());
        assert_eq!(c.effective_obstacles()[0].max, Vec3([1.0, 0.3, 0.3]));

        let c = with_wind(WindConfig::Shear { rate: 0.1, axis_dir: Vec3([1.0, 1.0, 0.0]) });
        assert!(c.validate().is_err());
        let c = with_wind(WindConfig::Vortex { center_xy: [0.5, 0.5], omega: 1.0, core_radius: 0.0 });
        assert!(c.validate().is_err());
    }

    #[test]
    fn controllability_passes_with_margin() {
        // v_max(rho_max) is clamped up to clip_lo = 0.6 here
        let mut c = with_wind(WindConfig::Uniform { v: Vec3([0.5, 0.0, 0.0]) });
        c.eps_c = 0.05;
        let r = validate_controllability(&c);
        assert!(r.pass);
        assert!((r.min_v_max - 0.6).abs() < 1e-12);
        assert!((r.margin - 0.05).abs() < 1e-12);
    }

    #[test]
    fn controllability_violated_by_strong_wind() {
        let mut c = with_wind(WindConfig::Uniform { v: Vec3([1.0, 0.0, 0.0]) });
        c.fd.v_max0 = 0.8;
        c.fd.v_min = 0.1;
        c.fd.clip_lo = 0.1;
        let r = validate_controllability(&c);
        assert!(!r.pass);
        assert!(r.margin < 0.0);
    }

    #[test]
    fn controllability_without_wind() {
        let mut c = parse_config(MINIMAL_HOMING).unwrap();
        c.eps_c = 0.0;
        let r = validate_controllability(&c);
        assert!(r.pass);
        assert_eq!(r.max_wind_speed, 0.0);
    }

    #[test]
    fn controllability_reports_worst_cell() {
        let c = with_wind(WindConfig::Shear { rate: 0.1, axis_dir: Vec3([1.0, 0.0, 0.0]) });
        let r = validate_controllability(&c);
        assert_eq!(r.worst_cell[2], 7);
        assert!((r.max_wind_speed - 0.1 * 0.9375).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn raising_clip_lo_never_breaks_controllability(
            speed in 0.0f64..2.0,
            lo in 0.1f64..3.0,
            bump in 0.0f64..2.0,
            eps_c in 0.0f64..0.2,
        ) {
            let mut c = with_wind(WindConfig::Uniform { v: Vec3([speed, 0.0, 0.0]) });
            c.eps_c = eps_c;
            c.fd.clip_hi = 10.0;
            c.fd.clip_lo = lo;
            let before = validate_controllability(&c).pass;
            c.fd.clip_lo = lo + bump;
            let after = validate_controllability(&c).pass;
            proptest::prop_assert!(!before || after);
        }
    }
}
