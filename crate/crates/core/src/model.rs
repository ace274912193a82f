//! Problem instances: MJLS dynamics, Markov chain, cost weights, boundary
//! data and chance constraints, plus validation and the JSON model format.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    asymmetry, matrix_from_rows, matrix_to_rows, min_eigenvalue, symmetrize, vector_to_vec, Matrix,
    Vector,
};
use crate::propagation::propagate_mode_distribution;

/// Tolerance on row sums of the transition matrix and on `rho0`.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Smallest admissible mode probability over the horizon.
pub const MIN_MODE_PROBABILITY: f64 = 1e-9;
/// Margin for positive definiteness of `R`, `Σ0`, `Σf`.
pub const PD_MARGIN: f64 = 1e-10;
/// Asymmetry that is silently symmetrized on load.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Per-mode system matrices `(A, B, G)` of `x⁺ = A x + B u + c + G w`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeDynamics {
    pub a: Matrix,
    pub b: Matrix,
    pub g: Matrix,
}

/// Either one value broadcast over the horizon or one value per step.
#[derive(Clone, Debug, PartialEq)]
pub enum PerStep<T> {
    Constant(T),
    Varying(Vec<T>),
}

impl<T> PerStep<T> {
    pub fn at(&self, k: usize) -> &T {
        match self {
            PerStep::Constant(v) => v,
            PerStep::Varying(vs) => &vs[k.min(vs.len() - 1)],
        }
    }

    pub fn values(&self) -> Vec<&T> {
        match self {
            PerStep::Constant(v) => vec![v],
            PerStep::Varying(vs) => vs.iter().collect(),
        }
    }

    fn len_ok(&self, horizon: usize) -> bool {
        match self {
            PerStep::Constant(_) => true,
            PerStep::Varying(vs) => vs.len() == horizon,
        }
    }
}

/// Homogeneous Markov chain over the modes.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    /// Row-stochastic, entry `(i, j)` is `P(r_{k+1} = j | r_k = i)`.
    pub transition: Matrix,
    pub rho0: Vector,
}

impl MarkovChain {
    pub fn num_modes(&self) -> usize {
        self.rho0.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MjlsModel {
    pub n_x: usize,
    pub n_u: usize,
    pub n_w: usize,
    pub horizon: usize,
    pub modes: PerStep<Vec<ModeDynamics>>,
    pub chain: MarkovChain,
    pub bias: PerStep<Vector>,
    pub q_weight: PerStep<Matrix>,
    pub r_weight: PerStep<Matrix>,
    pub mu0: Vector,
    pub sigma0: Matrix,
    pub mu_f: Vector,
    pub sigma_f: Matrix,
}

impl MjlsModel {
    pub fn num_modes(&self) -> usize {
        self.chain.num_modes()
    }

    pub fn mode(&self, k: usize, i: usize) -> &ModeDynamics {
        &self.modes.at(k)[i]
    }

    pub fn bias_at(&self, k: usize) -> &Vector {
        self.bias.at(k)
    }

    pub fn q_at(&self, k: usize) -> &Matrix {
        self.q_weight.at(k)
    }

    pub fn r_at(&self, k: usize) -> &Matrix {
        self.r_weight.at(k)
    }

    /// `p_ij`.
    pub fn p(&self, i: usize, j: usize) -> f64 {
        self.chain.transition[(i, j)]
    }

    /// Mode distributions `ρ_0 … ρ_T`.
    pub fn mode_probabilities(&self) -> Vec<Vector> {
        propagate_mode_distribution(&self.chain, self.horizon)
    }
}

/// Half-plane `nᵀv + offset ≤ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfPlane {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl HalfPlane {
    pub fn new(normal: Vec<f64>, offset: f64) -> Self {
        Self { normal, offset }
    }

    pub fn normal_vector(&self) -> Vector {
        Vector::from_vec(self.normal.clone())
    }

    pub fn evaluate(&self, v: &Vector) -> f64 {
        self.normal.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>() + self.offset
    }
}

/// `P(‖x_k − μ_k‖ ≤ d_max) ≥ 1 − risk`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTube {
    pub d_max: f64,
    pub risk: f64,
}

/// `P(‖u_k(i)‖ ≤ u_max(i) | r_k = i) ≥ 1 − risk(i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlNorm {
    pub u_max: Vec<f64>,
    pub risk: Vec<f64>,
}

/// Explicit per-hyperplane risk allocations.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskSplit {
    pub state: Vec<f64>,
    /// Indexed `[mode][hyperplane]`.
    pub control: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ChanceConstraintSet {
    pub state_halfplanes: Vec<HalfPlane>,
    /// Joint risk `δ_x` of the state half-planes.
    pub state_risk: f64,
    pub state_tube: Option<StateTube>,
    pub control_halfplanes: Vec<HalfPlane>,
    /// Joint risk `δ_u(i)` per mode.
    pub control_risk: Vec<f64>,
    pub control_norm: Option<ControlNorm>,
    pub risk_split: Option<RiskSplit>,
    /// Also impose state constraints at `k = T`.
    pub include_terminal: bool,
}

impl ChanceConstraintSet {
    pub fn is_empty(&self) -> bool {
        self.state_halfplanes.is_empty()
            && self.state_tube.is_none()
            && self.control_halfplanes.is_empty()
            && self.control_norm.is_none()
    }
}

/// One failed invariant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.message.contains(needle))
    }

    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation { field: field.into(), message: message.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        for (n, v) in self.violations.iter().enumerate() {
            if n > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read model file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model file: {0}")]
    Parse(String),
    #[error("model file does not match the schema: {0}")]
    Schema(String),
    #[error("model failed validation: {0}")]
    Validation(ValidationReport),
}

fn check_shape(report: &mut ValidationReport, field: &str, m: &Matrix, rows: usize, cols: usize) -> bool {
    if m.nrows() != rows || m.ncols() != cols {
        report.push(field, format!("expected {rows}x{cols}, got {}x{}", m.nrows(), m.ncols()));
        false
    } else {
        true
    }
}

fn check_symmetric(report: &mut ValidationReport, field: &str, m: &Matrix) {
    let asym = asymmetry(m);
    if asym > SYMMETRY_TOL {
        report.push(field, format!("not symmetric (asymmetry {asym:.3e})"));
    }
}

/// Checks every invariant of the model. Never fails; returns all violations.
pub fn validate(model: &MjlsModel) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (nx, nu, nw) = (model.n_x, model.n_u, model.n_w);
    let nm = model.num_modes();

    if model.horizon == 0 {
        report.push("horizon", "horizon must be at least 1");
    }
    if nm == 0 {
        report.push("rho0", "at least one mode is required");
    }

    // Markov chain.
    let p = &model.chain.transition;
    let mut chain_ok = check_shape(&mut report, "transition", p, nm, nm);
    if chain_ok {
        for i in 0..nm {
            let row = p.row(i);
            if row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                report.push("transition", format!("row {i} has negative entries"));
                chain_ok = false;
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                report.push("transition", format!("row {i} not stochastic (sums to {sum})"));
                chain_ok = false;
            }
        }
    }
    let rho0 = &model.chain.rho0;
    if rho0.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
        report.push("rho0", "entries must be strictly positive");
        chain_ok = false;
    }
    let rho_sum: f64 = rho0.iter().sum();
    if (rho_sum - 1.0).abs() > STOCHASTIC_TOL {
        report.push("rho0", format!("not a probability vector (sums to {rho_sum})"));
        chain_ok = false;
    }
    if chain_ok && model.horizon > 0 {
        let rhos = model.mode_probabilities();
        for (k, rho) in rhos.iter().enumerate() {
            for (i, r) in rho.iter().enumerate() {
                if *r < MIN_MODE_PROBABILITY {
                    report.push(
                        "transition",
                        format!("mode probability vanishes: rho_{k}({i}) = {r:.3e}"),
                    );
                }
            }
        }
    }

    // Dynamics.
    if !model.modes.len_ok(model.horizon) {
        report.push("modes", "time-varying dynamics need one mode set per step");
    }
    for (k, set) in model.modes.values().into_iter().enumerate() {
        if set.len() != nm {
            report.push("modes", format!("step {k}: expected {nm} modes, got {}", set.len()));
            continue;
        }
        for (i, md) in set.iter().enumerate() {
            check_shape(&mut report, &format!("modes[{k}][{i}].A"), &md.a, nx, nx);
            check_shape(&mut report, &format!("modes[{k}][{i}].B"), &md.b, nx, nu);
            check_shape(&mut report, &format!("modes[{k}][{i}].G"), &md.g, nx, nw);
        }
    }
    if !model.bias.len_ok(model.horizon) {
        report.push("bias", "time-varying bias needs one vector per step");
    }
    for c in model.bias.values() {
        if c.len() != nx {
            report.push("bias", format!("expected length {nx}, got {}", c.len()));
        }
    }

    // Weights.
    if !model.q_weight.len_ok(model.horizon) {
        report.push("Q", "time-varying Q needs one matrix per step");
    }
    for q in model.q_weight.values() {
        if check_shape(&mut report, "Q", q, nx, nx) {
            check_symmetric(&mut report, "Q", q);
            let lo = min_eigenvalue(&symmetrize(q));
            if lo < -PD_MARGIN {
                report.push("Q", format!("Q not positive semidefinite (min eigenvalue {lo:.3e})"));
            }
        }
    }
    if !model.r_weight.len_ok(model.horizon) {
        report.push("R", "time-varying R needs one matrix per step");
    }
    for r in model.r_weight.values() {
        if check_shape(&mut report, "R", r, nu, nu) {
            check_symmetric(&mut report, "R", r);
            let lo = min_eigenvalue(&symmetrize(r));
            if lo <= PD_MARGIN {
                report.push("R", format!("R not positive definite (min eigenvalue {lo:.3e})"));
            }
        }
    }

    // Boundary data.
    if model.mu0.len() != nx {
        report.push("mu0", format!("expected length {nx}"));
    }
    if model.mu_f.len() != nx {
        report.push("mu_f", format!("expected length {nx}"));
    }
    for (name, m) in [("sigma0", &model.sigma0), ("sigma_f", &model.sigma_f)] {
        if check_shape(&mut report, name, m, nx, nx) {
            check_symmetric(&mut report, name, m);
            let lo = min_eigenvalue(&symmetrize(m));
            if lo <= PD_MARGIN {
                report.push(name, format!("{name} not positive definite (min eigenvalue {lo:.3e})"));
            }
        }
    }
    report
}

/// Checks the chance constraints against the model dimensions and the
/// risk-budget rules.
pub fn validate_constraints(model: &MjlsModel, cc: &ChanceConstraintSet) -> ValidationReport {
    let mut report = ValidationReport::default();
    let nm = model.num_modes();
    let risk_ok = |r: f64| r > 0.0 && r <= 0.5;

    for (j, h) in cc.state_halfplanes.iter().enumerate() {
        if h.normal.len() != model.n_x {
            report.push(format!("state_halfplanes[{j}]"), format!("normal must have length {}", model.n_x));
        }
    }
    if !cc.state_halfplanes.is_empty() && !risk_ok(cc.state_risk) {
        report.push("state_risk", "risk must lie in (0, 0.5]");
    }
    if let Some(tube) = &cc.state_tube {
        if !(tube.d_max > 0.0) {
            report.push("state_tube.d_max", "must be positive");
        }
        if !risk_ok(tube.risk) {
            report.push("state_tube.risk", "risk must lie in (0, 0.5]");
        }
    }
    for (j, h) in cc.control_halfplanes.iter().enumerate() {
        if h.normal.len() != model.n_u {
            report.push(format!("control_halfplanes[{j}]"), format!("normal must have length {}", model.n_u));
        }
    }
    if !cc.control_halfplanes.is_empty() {
        if cc.control_risk.len() != nm {
            report.push("control_risk", format!("expected one risk per mode ({nm})"));
        } else if !cc.control_risk.iter().all(|r| risk_ok(*r)) {
            report.push("control_risk", "risk must lie in (0, 0.5]");
        }
    }
    if let Some(norm) = &cc.control_norm {
        if norm.u_max.len() != nm || norm.risk.len() != nm {
            report.push("control_norm", format!("expected one bound and one risk per mode ({nm})"));
        } else {
            if !norm.u_max.iter().all(|u| *u > 0.0) {
                report.push("control_norm.u_max", "must be positive");
            }
            if !norm.risk.iter().all(|r| risk_ok(*r)) {
                report.push("control_norm.risk", "risk must lie in (0, 0.5]");
            }
        }
    }
    if let Some(split) = &cc.risk_split {
        if split.state.len() != cc.state_halfplanes.len() {
            report.push("risk_split.state", "one allocation per state half-plane");
        } else {
            if !split.state.iter().all(|r| risk_ok(*r)) {
                report.push("risk_split.state", "allocations must lie in (0, 0.5]");
            }
            let total: f64 = split.state.iter().sum();
            if total > cc.state_risk * (1.0 + 1e-12) {
                report.push("risk_split.state", format!("allocations sum to {total} > budget {}", cc.state_risk));
            }
        }
        if !cc.control_halfplanes.is_empty() {
            if split.control.len() != nm {
                report.push("risk_split.control", "one allocation list per mode");
            } else {
                for (i, alloc) in split.control.iter().enumerate() {
                    if alloc.len() != cc.control_halfplanes.len() || !alloc.iter().all(|r| risk_ok(*r)) {
                        report.push("risk_split.control", format!("mode {i}: bad allocation list"));
                        continue;
                    }
                    let total: f64 = alloc.iter().sum();
                    let budget = cc.control_risk.get(i).copied().unwrap_or(0.0);
                    if total > budget * (1.0 + 1e-12) {
                        report.push("risk_split.control", format!("mode {i}: allocations sum to {total} > budget {budget}"));
                    }
                }
            }
        }
    }
    report
}

// ---------------------------------------------------------------------------
// JSON schema

type Rows = Vec<Vec<f64>>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeFile {
    #[serde(rename = "A")]
    a: Rows,
    #[serde(rename = "B")]
    b: Rows,
    #[serde(rename = "G")]
    g: Rows,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ModesField {
    Invariant(Vec<ModeFile>),
    Varying(Vec<Vec<ModeFile>>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum VectorField {
    Constant(Vec<f64>),
    Varying(Vec<Vec<f64>>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixField {
    Constant(Rows),
    Varying(Vec<Rows>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    fn expand(&self, n: usize) -> Vec<f64> {
        match self {
            OneOrMany::One(v) => vec![*v; n],
            OneOrMany::Many(vs) => vs.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateHalfPlaneFile {
    a: Vec<f64>,
    b: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlHalfPlaneFile {
    f: Vec<f64>,
    g: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TubeFile {
    d_max: f64,
    risk: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlNormFile {
    u_max: OneOrMany,
    risk: OneOrMany,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RiskSplitFile {
    #[serde(default)]
    state: Vec<f64>,
    #[serde(default)]
    control: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChanceConstraintFile {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    state_halfplanes: Vec<StateHalfPlaneFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state_risk: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state_tube: Option<TubeFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    control_halfplanes: Vec<ControlHalfPlaneFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    control_risk: Option<OneOrMany>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    control_norm: Option<ControlNormFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    risk_split: Option<RiskSplitFile>,
    #[serde(default)]
    include_terminal: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    n_x: usize,
    n_u: usize,
    n_w: usize,
    num_modes: usize,
    horizon: usize,
    modes: ModesField,
    transition: Rows,
    rho0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<VectorField>,
    #[serde(rename = "Q")]
    q: MatrixField,
    #[serde(rename = "R")]
    r: MatrixField,
    mu0: Vec<f64>,
    sigma0: Rows,
    mu_f: Vec<f64>,
    sigma_f: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chance_constraints: Option<ChanceConstraintFile>,
}

fn schema_matrix(field: &str, rows: &Rows) -> Result<Matrix, ModelError> {
    matrix_from_rows(rows).map_err(|e| ModelError::Schema(format!("{field}: {e}")))
}

/// Symmetrizes small asymmetry; larger asymmetry is left for `validate`.
fn symmetrize_on_load(m: Matrix) -> Matrix {
    if m.is_square() && asymmetry(&m) <= SYMMETRY_TOL {
        symmetrize(&m)
    } else {
        m
    }
}

fn convert_mode(file: &ModeFile, field: &str) -> Result<ModeDynamics, ModelError> {
    Ok(ModeDynamics {
        a: schema_matrix(&format!("{field}.A"), &file.a)?,
        b: schema_matrix(&format!("{field}.B"), &file.b)?,
        g: schema_matrix(&format!("{field}.G"), &file.g)?,
    })
}

fn convert_matrix_field(field: &str, value: &MatrixField, symmetric: bool) -> Result<PerStep<Matrix>, ModelError> {
    let fix = |m: Matrix| if symmetric { symmetrize_on_load(m) } else { m };
    Ok(match value {
        MatrixField::Constant(rows) => PerStep::Constant(fix(schema_matrix(field, rows)?)),
        MatrixField::Varying(list) => PerStep::Varying(
            list.iter()
                .enumerate()
                .map(|(k, rows)| schema_matrix(&format!("{field}[{k}]"), rows).map(fix))
                .collect::<Result<_, _>>()?,
        ),
    })
}

fn convert(file: ModelFile) -> Result<(MjlsModel, ChanceConstraintSet), ModelError> {
    if file.horizon == 0 {
        return Err(ModelError::Schema("horizon must be at least 1".into()));
    }
    if file.num_modes != file.rho0.len() {
        return Err(ModelError::Schema(format!(
            "num_modes = {} but rho0 has {} entries",
            file.num_modes,
            file.rho0.len()
        )));
    }
    let modes = match &file.modes {
        ModesField::Invariant(list) => PerStep::Constant(
            list.iter()
                .enumerate()
                .map(|(i, m)| convert_mode(m, &format!("modes[{i}]")))
                .collect::<Result<_, _>>()?,
        ),
        ModesField::Varying(steps) => PerStep::Varying(
            steps
                .iter()
                .enumerate()
                .map(|(k, list)| {
                    list.iter()
                        .enumerate()
                        .map(|(i, m)| convert_mode(m, &format!("modes[{k}][{i}]")))
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<_, _>>()?,
        ),
    };
    let bias = match &file.bias {
        None => PerStep::Constant(Vector::zeros(file.n_x)),
        Some(VectorField::Constant(v)) => PerStep::Constant(Vector::from_vec(v.clone())),
        Some(VectorField::Varying(vs)) => {
            PerStep::Varying(vs.iter().map(|v| Vector::from_vec(v.clone())).collect())
        }
    };
    let model = MjlsModel {
        n_x: file.n_x,
        n_u: file.n_u,
        n_w: file.n_w,
        horizon: file.horizon,
        modes,
        chain: MarkovChain {
            transition: schema_matrix("transition", &file.transition)?,
            rho0: Vector::from_vec(file.rho0.clone()),
        },
        bias,
        q_weight: convert_matrix_field("Q", &file.q, true)?,
        r_weight: convert_matrix_field("R", &file.r, true)?,
        mu0: Vector::from_vec(file.mu0.clone()),
        sigma0: symmetrize_on_load(schema_matrix("sigma0", &file.sigma0)?),
        mu_f: Vector::from_vec(file.mu_f.clone()),
        sigma_f: symmetrize_on_load(schema_matrix("sigma_f", &file.sigma_f)?),
    };

    let nm = file.num_modes;
    let cc = match file.chance_constraints {
        None => ChanceConstraintSet::default(),
        Some(c) => {
            if !c.state_halfplanes.is_empty() && c.state_risk.is_none() {
                return Err(ModelError::Schema("state_halfplanes require state_risk".into()));
            }
            if !c.control_halfplanes.is_empty() && c.control_risk.is_none() {
                return Err(ModelError::Schema("control_halfplanes require control_risk".into()));
            }
            ChanceConstraintSet {
                state_halfplanes: c.state_halfplanes.iter().map(|h| HalfPlane::new(h.a.clone(), h.b)).collect(),
                state_risk: c.state_risk.unwrap_or(0.0),
                state_tube: c.state_tube.map(|t| StateTube { d_max: t.d_max, risk: t.risk }),
                control_halfplanes: c.control_halfplanes.iter().map(|h| HalfPlane::new(h.f.clone(), h.g)).collect(),
                control_risk: c.control_risk.map(|r| r.expand(nm)).unwrap_or_default(),
                control_norm: c.control_norm.map(|n| ControlNorm { u_max: n.u_max.expand(nm), risk: n.risk.expand(nm) }),
                risk_split: c.risk_split.map(|s| RiskSplit { state: s.state, control: s.control }),
                include_terminal: c.include_terminal,
            }
        }
    };
    Ok((model, cc))
}

/// Parses and validates a model from JSON text.
pub fn parse_model(text: &str) -> Result<(MjlsModel, ChanceConstraintSet), ModelError> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => ModelError::Schema(e.to_string()),
        _ => ModelError::Parse(e.to_string()),
    })?;
    let (model, cc) = convert(file)?;
    let mut report = validate(&model);
    if report.is_ok() {
        report.violations.extend(validate_constraints(&model, &cc).violations);
    }
    if !report.is_ok() {
        return Err(ModelError::Validation(report));
    }
    Ok((model, cc))
}

/// Reads, parses, defaults and validates a JSON model file.
pub fn load_model(path: impl AsRef<Path>) -> Result<(MjlsModel, ChanceConstraintSet), ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    parse_model(&text)
}

fn matrix_field(p: &PerStep<Matrix>) -> MatrixField {
    match p {
        PerStep::Constant(m) => MatrixField::Constant(matrix_to_rows(m)),
        PerStep::Varying(ms) => MatrixField::Varying(ms.iter().map(matrix_to_rows).collect()),
    }
}

fn mode_file(m: &ModeDynamics) -> ModeFile {
    ModeFile { a: matrix_to_rows(&m.a), b: matrix_to_rows(&m.b), g: matrix_to_rows(&m.g) }
}

/// Serializes a model (and optional chance constraints) to the JSON schema
/// accepted by [`parse_model`].
pub fn serialize_model(model: &MjlsModel, cc: &ChanceConstraintSet) -> String {
    let cc_file = (!cc.is_empty()).then(|| ChanceConstraintFile {
        state_halfplanes: cc
            .state_halfplanes
            .iter()
            .map(|h| StateHalfPlaneFile { a: h.normal.clone(), b: h.offset })
            .collect(),
        state_risk: (!cc.state_halfplanes.is_empty()).then_some(cc.state_risk),
        state_tube: cc.state_tube.as_ref().map(|t| TubeFile { d_max: t.d_max, risk: t.risk }),
        control_halfplanes: cc
            .control_halfplanes
            .iter()
            .map(|h| ControlHalfPlaneFile { f: h.normal.clone(), g: h.offset })
            .collect(),
        control_risk: (!cc.control_halfplanes.is_empty()).then(|| OneOrMany::Many(cc.control_risk.clone())),
        control_norm: cc.control_norm.as_ref().map(|n| ControlNormFile {
            u_max: OneOrMany::Many(n.u_max.clone()),
            risk: OneOrMany::Many(n.risk.clone()),
        }),
        risk_split: cc.risk_split.as_ref().map(|s| RiskSplitFile { state: s.state.clone(), control: s.control.clone() }),
        include_terminal: cc.include_terminal,
    });
    let file = ModelFile {
        n_x: model.n_x,
        n_u: model.n_u,
        n_w: model.n_w,
        num_modes: model.num_modes(),
        horizon: model.horizon,
        modes: match &model.modes {
            PerStep::Constant(list) => ModesField::Invariant(list.iter().map(mode_file).collect()),
            PerStep::Varying(steps) => {
                ModesField::Varying(steps.iter().map(|l| l.iter().map(mode_file).collect()).collect())
            }
        },
        transition: matrix_to_rows(&model.chain.transition),
        rho0: vector_to_vec(&model.chain.rho0),
        bias: Some(match &model.bias {
            PerStep::Constant(v) => VectorField::Constant(vector_to_vec(v)),
            PerStep::Varying(vs) => VectorField::Varying(vs.iter().map(vector_to_vec).collect()),
        }),
        q: matrix_field(&model.q_weight),
        r: matrix_field(&model.r_weight),
        mu0: vector_to_vec(&model.mu0),
        sigma0: matrix_to_rows(&model.sigma0),
        mu_f: vector_to_vec(&model.mu_f),
        sigma_f: matrix_to_rows(&model.sigma_f),
        chance_constraints: cc_file,
    };
    serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
}
