//! Scenario files.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use pdftc::microgrid::{ProgramOptions, Targets, Topology};
use pdftc::optprogram::LayoutKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{pointer}: {message}")]
    Schema { pointer: String, message: String },
}

impl ConfigError {
    fn at(pointer: &str, message: impl Into<String>) -> Self {
        ConfigError::Schema {
            pointer: pointer.to_string(),
            message: message.into(),
        }
    }
}

/// Dense matrix as a list of rows. Zero-row matrices use `{"rows": 0, "cols": n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Rows(Vec<Vec<f64>>),
    Empty { rows: usize, cols: usize },
}

impl MatrixSpec {
    fn to_matrix(&self, pointer: &str) -> Result<DMatrix<f64>, ConfigError> {
        match self {
            MatrixSpec::Empty { rows, cols } => {
                if *rows != 0 && *cols != 0 {
                    return Err(ConfigError::at(pointer, "only empty matrices may be given by shape"));
                }
                Ok(DMatrix::zeros(*rows, *cols))
            }
            MatrixSpec::Rows(rows) => {
                let cols = rows.first().map_or(0, Vec::len);
                if let Some(k) = rows.iter().position(|r| r.len() != cols) {
                    return Err(ConfigError::at(
                        &format!("{pointer}/{k}"),
                        format!("row has {} entries, expected {cols}", rows[k].len()),
                    ));
                }
                Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
            }
        }
    }
}

fn matrix_or(spec: &Option<MatrixSpec>, rows: usize, cols: usize, pointer: &str) -> Result<DMatrix<f64>, ConfigError> {
    match spec {
        Some(m) => m.to_matrix(pointer),
        None => Ok(DMatrix::zeros(rows, cols)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemSpec {
    pub a: MatrixSpec,
    pub b: MatrixSpec,
    pub c: MatrixSpec,
    /// Interconnection output map; omitted means no interconnection port.
    #[serde(default)]
    pub e: Option<MatrixSpec>,
    #[serde(default)]
    pub g: Option<MatrixSpec>,
    #[serde(default)]
    pub d: Option<Vec<f64>>,
    #[serde(default)]
    pub constraints: ConstraintSpec,
}

/// Per-subsystem rows; omitted blocks are empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub eq_x: Option<MatrixSpec>,
    pub b_x: Option<Vec<f64>>,
    pub eq_y: Option<MatrixSpec>,
    pub b_y: Option<Vec<f64>>,
    pub eq_u: Option<MatrixSpec>,
    pub b_u: Option<Vec<f64>>,
    pub ineq_x: Option<MatrixSpec>,
    pub h_x: Option<Vec<f64>>,
    pub ineq_y: Option<MatrixSpec>,
    pub h_y: Option<Vec<f64>>,
    pub ineq_u: Option<MatrixSpec>,
    pub h_u: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    /// Receiving subsystem (1-based).
    pub i: usize,
    /// Sending subsystem (1-based).
    pub j: usize,
    pub block: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub weight: MatrixSpec,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenericPlantSpec {
    pub subsystems: Vec<SubsystemSpec>,
    #[serde(default)]
    pub interconnection: Vec<BlockSpec>,
    #[serde(default = "default_layout")]
    pub layout: LayoutKind,
    pub cost: CostSpec,
    /// Plant decay rate for the storage certificate; defaults to 0.9 of the bound.
    #[serde(default)]
    pub tau1: Option<f64>,
    /// Storage matrix `P1`; solved from a Lyapunov equation when omitted.
    #[serde(default)]
    pub storage: Option<MatrixSpec>,
    /// Weights of the plant-generated equality rows.
    #[serde(default)]
    pub plant_row_scale: Option<Vec<f64>>,
}

fn default_layout() -> LayoutKind {
    LayoutKind::StateInput
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrogridSpec {
    pub topology: Topology,
    pub targets: Targets,
    #[serde(default)]
    pub options: ProgramOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSpec {
    Value(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    #[serde(default = "auto_eta")]
    pub eta: EtaSpec,
    /// Scales the automatic `η`.
    #[serde(default = "one")]
    pub eta_multiplier: f64,
    pub rho: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub override_c: Option<f64>,
}

fn auto_eta() -> EtaSpec {
    EtaSpec::Auto(AutoTag::Auto)
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartTag {
    Oracle,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateSpec {
    Named(StartTag),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSpec {
    Value(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    /// Step size, or `"auto"` for the stiffness limit.
    pub dt: StepSpec,
    #[serde(rename = "T")]
    pub t_end: f64,
    #[serde(default = "one_usize")]
    pub record_every: usize,
    #[serde(default = "zero_start")]
    pub x0: StateSpec,
    #[serde(default = "zero_start")]
    pub theta0: StateSpec,
}

fn one_usize() -> usize {
    1
}

fn zero_start() -> StateSpec {
    StateSpec::Named(StartTag::Zero)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub a: Option<MatrixSpec>,
    pub b: Option<MatrixSpec>,
    pub c: Option<MatrixSpec>,
    pub e: Option<MatrixSpec>,
    pub g: Option<MatrixSpec>,
    pub d: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultSpec {
    /// Sets inequality bound `row` (0-based) to `value`.
    LimitChange { time: f64, row: usize, value: f64 },
    /// Sets the injection limit of a following bus.
    InjectionLimit { time: f64, bus: usize, amps: f64 },
    /// Replaces matrices of one subsystem.
    MatrixChange { time: f64, subsystem: usize, patch: PatchSpec },
}

impl FaultSpec {
    pub fn time(&self) -> f64 {
        match self {
            FaultSpec::LimitChange { time, .. }
            | FaultSpec::InjectionLimit { time, .. }
            | FaultSpec::MatrixChange { time, .. } => *time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub trace_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub plant: Option<GenericPlantSpec>,
    #[serde(default)]
    pub microgrid: Option<MicrogridSpec>,
    pub controller: ControllerSpec,
    pub simulation: SimulationSpec,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub outputs: OutputSpec,
}

/// Converts a serde path (`a.b[2].c`) into a JSON pointer (`/a/b/2/c`).
fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push_str(&key.replace('~', "~0").replace('/', "~1"))
            }
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Schema {
            pointer: pointer_of(e.path()),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Checks the invariants serde cannot express.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.plant, &self.microgrid) {
            (Some(_), Some(_)) => return Err(ConfigError::at("/", "give exactly one of `plant` and `microgrid`, not both")),
            (None, None) => return Err(ConfigError::at("/", "one of `plant` and `microgrid` is required")),
            _ => {}
        }
        if let StepSpec::Value(dt) = self.simulation.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(ConfigError::at("/simulation/dt", format!("must be positive, got {dt}")));
            }
        }
        let t = self.simulation.t_end;
        if !(t > 0.0 && t.is_finite()) {
            return Err(ConfigError::at("/simulation/T", format!("must be positive, got {t}")));
        }
        if self.simulation.record_every == 0 {
            return Err(ConfigError::at("/simulation/record_every", "must be at least 1"));
        }
        let c = &self.controller;
        if let EtaSpec::Value(eta) = c.eta {
            if !(eta > 0.0) {
                return Err(ConfigError::at("/controller/eta", format!("must be positive, got {eta}")));
            }
        }
        if !(c.eta_multiplier > 0.0) {
            return Err(ConfigError::at("/controller/eta_multiplier", "must be positive"));
        }
        if !(c.rho > 0.0) {
            return Err(ConfigError::at("/controller/rho", format!("must be positive, got {}", c.rho)));
        }
        if !(c.epsilon > 0.0 && c.epsilon < 1.0) {
            return Err(ConfigError::at("/controller/epsilon", format!("must lie in (0, 1), got {}", c.epsilon)));
        }
        if let Some(oc) = c.override_c {
            if !(oc > 0.0) {
                return Err(ConfigError::at("/controller/override_c", "must be positive"));
            }
        }
        for (k, f) in self.faults.iter().enumerate() {
            let time = f.time();
            if !(0.0..=t).contains(&time) {
                return Err(ConfigError::at(&format!("/faults/{k}/time"), format!("{time} lies outside [0, T]")));
            }
            let wrong_plant = match f {
                FaultSpec::InjectionLimit { .. } => self.microgrid.is_none(),
                FaultSpec::MatrixChange { .. } => self.plant.is_none(),
                FaultSpec::LimitChange { .. } => false,
            };
            if wrong_plant {
                return Err(ConfigError::at(&format!("/faults/{k}/kind"), "fault kind does not apply to this plant"));
            }
        }
        Ok(())
    }
}

/// `(A, B, C, E, G, d)` of one subsystem.
pub(crate) type SubsystemMatrices = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>);

pub(crate) fn subsystem_matrices(
    s: &SubsystemSpec,
    k: usize,
) -> Result<SubsystemMatrices, ConfigError> {
    let p = format!("/plant/subsystems/{k}");
    let a = s.a.to_matrix(&format!("{p}/a"))?;
    let n = a.nrows();
    let b = s.b.to_matrix(&format!("{p}/b"))?;
    let c = s.c.to_matrix(&format!("{p}/c"))?;
    let e = matrix_or(&s.e, 0, n, &format!("{p}/e"))?;
    let g = matrix_or(&s.g, n, e.nrows(), &format!("{p}/g"))?;
    let d = DVector::from_vec(s.d.clone().unwrap_or_else(|| vec![0.0; n]));
    Ok((a, b, c, e, g, d))
}

pub(crate) fn block(spec: &Option<MatrixSpec>, rows: usize, cols: usize, pointer: &str) -> Result<DMatrix<f64>, ConfigError> {
    matrix_or(spec, rows, cols, pointer)
}

pub(crate) fn vector(spec: &Option<Vec<f64>>, len: usize) -> DVector<f64> {
    spec.as_ref()
        .map(|v| DVector::from_vec(v.clone()))
        .unwrap_or_else(|| DVector::zeros(len))
}

pub(crate) fn patch_matrix(spec: &Option<MatrixSpec>, pointer: &str) -> Result<Option<DMatrix<f64>>, ConfigError> {
    spec.as_ref().map(|m| m.to_matrix(pointer)).transpose()
}

pub(crate) fn dense(spec: &MatrixSpec, pointer: &str) -> Result<DMatrix<f64>, ConfigError> {
    spec.to_matrix(pointer)
}
