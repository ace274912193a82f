//! Closed-loop sampling of the jump system under a mode-dependent affine
//! policy, and empirical checks of moments, moment identities, chance
//! constraints and cost.
//!
//! Randomness comes from ChaCha20 streams: sample `n` uses stream
//! `4n + s` of the run seed, with `s = 0` for the initial mode, `1` for the
//! initial state, `2` for process noise and `3` for mode jumps. Samples are
//! therefore independent of thread scheduling, and reductions run over
//! fixed-size chunks combined in index order, so a report is bit-identical
//! across runs and machines with the same floating-point behavior.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::linalg::{matrix_to_rows, outer, psd_factor, Matrix, Vector};
use crate::model::{ChanceConstraintSet, MjlsModel};
use crate::propagation::{propagate_policy, CovarianceTrajectory, MeanTrajectory, Policy, PropagationError};

/// Buckets with fewer samples are excluded from z-score checks.
pub const MIN_BUCKET: usize = 30;
/// Pass threshold for identity and path-count z-scores.
pub const IDENTITY_Z: f64 = 4.0;
const CHUNK: usize = 512;
const MAX_PATHS: usize = 4096;

#[derive(Debug, Error)]
pub enum McError {
    #[error("at least one sample is required")]
    NoSamples,
    #[error(transparent)]
    Propagation(#[from] PropagationError),
}

/// Draws one process-noise vector of length `n_w`.
pub type NoiseHook = Arc<dyn Fn(&mut dyn RngCore, usize) -> Vector + Send + Sync>;

#[derive(Clone, Default)]
pub enum NoiseModel {
    /// `w ~ N(0, I)`.
    #[default]
    Gaussian,
    /// Independent `U(−√3, √3)` entries: zero mean, identity covariance.
    Uniform,
    Hook(NoiseHook),
}

impl NoiseModel {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseModel::Gaussian => "gaussian",
            NoiseModel::Uniform => "uniform",
            NoiseModel::Hook(_) => "hook",
        }
    }

    fn draw(&self, rng: &mut ChaCha20Rng, n: usize) -> Vector {
        match self {
            NoiseModel::Gaussian => Vector::from_fn(n, |_, _| rng.sample(StandardNormal)),
            NoiseModel::Uniform => {
                let h = 3f64.sqrt();
                Vector::from_fn(n, |_, _| rng.random_range(-h..h))
            }
            NoiseModel::Hook(f) => f(rng, n),
        }
    }
}

impl fmt::Debug for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct SimulationConfig {
    pub num_samples: usize,
    pub seed: u64,
    pub noise: NoiseModel,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { num_samples: 2500, seed: 0, noise: NoiseModel::Gaussian }
    }
}

/// One closed-loop realization: `x_0..x_T`, `r_0..r_T` and `u_0..u_{T−1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub modes: Vec<usize>,
    pub controls: Vec<Vector>,
}

fn stream(seed: u64, index: u64, sub: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(4 * index + sub);
    rng
}

fn categorical(rng: &mut ChaCha20Rng, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Samples closed-loop trajectories of one model under one policy.
pub struct Simulator<'a> {
    model: &'a MjlsModel,
    policy: &'a Policy,
    noise: NoiseModel,
    seed: u64,
    x0_factor: Matrix,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a MjlsModel, policy: &'a Policy, seed: u64, noise: NoiseModel) -> Result<Self, McError> {
        policy.check_dimensions(model)?;
        Ok(Self { model, policy, noise, seed, x0_factor: psd_factor(&model.sigma0) })
    }

    pub fn sample(&self, index: u64) -> Trajectory {
        let m = self.model;
        let t = m.horizon;
        let mut r_mode = stream(self.seed, index, 0);
        let mut r_x0 = stream(self.seed, index, 1);
        let mut r_w = stream(self.seed, index, 2);
        let mut r_jump = stream(self.seed, index, 3);
        let mut modes = Vec::with_capacity(t + 1);
        modes.push(categorical(&mut r_mode, m.chain.rho0.iter().copied()));
        let z = Vector::from_fn(m.n_x, |_, _| r_x0.sample(StandardNormal));
        let mut states = Vec::with_capacity(t + 1);
        states.push(&m.mu0 + &self.x0_factor * z);
        let mut controls = Vec::with_capacity(t);
        for k in 0..t {
            let i = modes[k];
            let x = &states[k];
            let u = self.policy.control(k, i, x);
            let md = m.mode(k, i);
            let w = self.noise.draw(&mut r_w, m.n_w);
            states.push(&md.a * x + &md.b * &u + m.bias_at(k) + &md.g * w);
            controls.push(u);
            modes.push(categorical(&mut r_jump, m.chain.transition.row(i).iter().copied()));
        }
        Trajectory { states, modes, controls }
    }
}

/// Sample `index` of the run with `seed`.
pub fn sample_trajectory(
    model: &MjlsModel,
    policy: &Policy,
    seed: u64,
    index: u64,
    noise: &NoiseModel,
) -> Result<Trajectory, McError> {
    Ok(Simulator::new(model, policy, seed, noise.clone())?.sample(index))
}

/// `num_samples` trajectories in index order.
pub fn simulate(model: &MjlsModel, policy: &Policy, config: &SimulationConfig) -> Result<Vec<Trajectory>, McError> {
    if config.num_samples == 0 {
        return Err(McError::NoSamples);
    }
    let sim = Simulator::new(model, policy, config.seed, config.noise.clone())?;
    Ok((0..config.num_samples as u64).into_par_iter().map(|n| sim.sample(n)).collect())
}

// ---------------------------------------------------------------------------
// Estimators

fn ser_matrix<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
    matrix_to_rows(m).serialize(s)
}

/// Sample mean of a matrix-valued statistic with entrywise standard errors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Estimate {
    #[serde(serialize_with = "ser_matrix")]
    pub mean: Matrix,
    /// NaN when fewer than two samples contribute.
    #[serde(serialize_with = "ser_matrix")]
    pub stderr: Matrix,
}

impl Estimate {
    /// Largest entrywise `|mean − expected| / stderr`. Differences at
    /// rounding level count as zero; other differences with zero standard
    /// error give `∞`.
    pub fn max_z(&self, expected: &Matrix) -> f64 {
        let mut worst = 0.0_f64;
        for ((m, e), s) in self.mean.iter().zip(expected.iter()).zip(self.stderr.iter()) {
            let d = (m - e).abs();
            let z = if d <= 1e-10 * (1.0 + e.abs()) {
                0.0
            } else if *s > 0.0 {
                d / s
            } else {
                f64::INFINITY
            };
            worst = worst.max(z);
        }
        worst
    }
}

fn chunked_sum<F>(samples: &[Trajectory], zero: &Matrix, f: &F) -> Matrix
where
    F: Fn(&Trajectory) -> Matrix + Sync,
{
    let partials: Vec<Matrix> = samples
        .par_chunks(CHUNK)
        .map(|c| c.iter().fold(zero.clone(), |acc, t| acc + f(t)))
        .collect();
    partials.into_iter().fold(zero.clone(), |acc, p| acc + p)
}

/// Two-pass mean and standard error of `f` over all samples.
pub fn estimate<F>(samples: &[Trajectory], rows: usize, cols: usize, f: F) -> Estimate
where
    F: Fn(&Trajectory) -> Matrix + Sync,
{
    let n = samples.len() as f64;
    let zero = Matrix::zeros(rows, cols);
    let mean = chunked_sum(samples, &zero, &f) / n;
    let stderr = if samples.len() < 2 {
        Matrix::from_element(rows, cols, f64::NAN)
    } else {
        let sq = chunked_sum(samples, &zero, &|t| (f(t) - &mean).map(|d| d * d));
        (sq / (n - 1.0) / n).map(f64::sqrt)
    };
    Estimate { mean, stderr }
}

#[derive(Clone, Debug, Serialize)]
pub struct BucketMoments {
    pub k: usize,
    pub mode: usize,
    pub count: usize,
    /// Fewer than [`MIN_BUCKET`] samples: excluded from pass/fail.
    pub flagged: bool,
    /// `q̂_k(i)` as a column.
    pub q: Estimate,
    /// `Ŝ_k(i)`.
    pub s: Estimate,
}

#[derive(Clone, Debug, Serialize)]
pub struct StepMoments {
    pub k: usize,
    pub mu: Estimate,
    /// Unbiased sample covariance; standard errors from the centered products.
    pub sigma: Estimate,
}

#[derive(Clone, Debug, Serialize)]
pub struct EmpiricalMoments {
    pub num_samples: usize,
    /// Fewer than two samples: standard errors are undefined.
    pub insufficient: bool,
    /// Indexed `[k][mode]`.
    pub buckets: Vec<Vec<BucketMoments>>,
    pub steps: Vec<StepMoments>,
}

fn indicator(t: &Trajectory, k: usize, i: usize) -> f64 {
    if t.modes[k] == i {
        1.0
    } else {
        0.0
    }
}

fn column(v: &Vector) -> Matrix {
    Matrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// Partial moments `q̂_k(i)`, `Ŝ_k(i)` and total moments `μ̂_k`, `Σ̂_k`.
/// `Ŝ` is centered at `analytic_xbar` when given, otherwise at `q̂/ρ̂`.
pub fn estimate_moments(
    samples: &[Trajectory],
    num_modes: usize,
    analytic_xbar: Option<&[Vec<Vector>]>,
) -> Result<EmpiricalMoments, McError> {
    let first = samples.first().ok_or(McError::NoSamples)?;
    let n = samples.len();
    let nx = first.states[0].len();
    let horizon = first.states.len() - 1;
    let mut buckets = Vec::with_capacity(horizon + 1);
    let mut steps = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let mut row = Vec::with_capacity(num_modes);
        for i in 0..num_modes {
            let count = samples.iter().filter(|t| t.modes[k] == i).count();
            let q = estimate(samples, nx, 1, |t| column(&t.states[k]) * indicator(t, k, i));
            let xbar = match analytic_xbar {
                Some(xb) => xb[k][i].clone(),
                None if count > 0 => q.mean.column(0) * (n as f64 / count as f64),
                None => Vector::zeros(nx),
            };
            let s = estimate(samples, nx, nx, |t| {
                if t.modes[k] == i {
                    let d = &t.states[k] - &xbar;
                    outer(&d, &d)
                } else {
                    Matrix::zeros(nx, nx)
                }
            });
            row.push(BucketMoments { k, mode: i, count, flagged: count < MIN_BUCKET, q, s });
        }
        buckets.push(row);
        let mu = estimate(samples, nx, 1, |t| column(&t.states[k]));
        let centre = mu.mean.column(0).into_owned();
        let mut sigma = estimate(samples, nx, nx, |t| {
            let d = &t.states[k] - &centre;
            outer(&d, &d)
        });
        if n > 1 {
            sigma.mean *= n as f64 / (n as f64 - 1.0);
        }
        steps.push(StepMoments { k, mu, sigma });
    }
    Ok(EmpiricalMoments { num_samples: n, insufficient: n < 2, buckets, steps })
}

/// Entrywise comparison of empirical against analytic moments.
#[derive(Clone, Debug, Serialize)]
pub struct MomentComparison {
    pub z_threshold: f64,
    pub entries_checked: usize,
    pub max_z_q: f64,
    pub max_z_s: f64,
    pub max_z_sigma: f64,
    /// `(quantity, k, mode)` of every entry group exceeding the threshold.
    pub failures: Vec<String>,
    pub skipped_buckets: Vec<(usize, usize)>,
}

impl MomentComparison {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn compare_moments(
    emp: &EmpiricalMoments,
    tau: &MeanTrajectory,
    xi: &CovarianceTrajectory,
    z_threshold: f64,
) -> MomentComparison {
    let mut out = MomentComparison {
        z_threshold,
        entries_checked: 0,
        max_z_q: 0.0,
        max_z_s: 0.0,
        max_z_sigma: 0.0,
        failures: Vec::new(),
        skipped_buckets: Vec::new(),
    };
    let nx = tau.mu[0].len();
    for (k, row) in emp.buckets.iter().enumerate() {
        for b in row {
            if b.flagged {
                out.skipped_buckets.push((k, b.mode));
                continue;
            }
            let zq = b.q.max_z(&column(&tau.q[k][b.mode]));
            let zs = b.s.max_z(&xi.s[k][b.mode]);
            out.entries_checked += nx + nx * (nx + 1) / 2;
            out.max_z_q = out.max_z_q.max(zq);
            out.max_z_s = out.max_z_s.max(zs);
            if zq > z_threshold {
                out.failures.push(format!("q k={k} mode={} z={zq:.2}", b.mode));
            }
            if zs > z_threshold {
                out.failures.push(format!("S k={k} mode={} z={zs:.2}", b.mode));
            }
        }
        let zsig = emp.steps[k].sigma.max_z(&xi.sigma[k]);
        out.entries_checked += nx * (nx + 1) / 2;
        out.max_z_sigma = out.max_z_sigma.max(zsig);
        if zsig > z_threshold {
            out.failures.push(format!("Sigma k={k} z={zsig:.2}"));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Identities

#[derive(Clone, Debug, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub max_z: f64,
    pub passed: bool,
    pub buckets_checked: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityReport {
    pub z_threshold: f64,
    pub checks: Vec<IdentityCheck>,
    pub flagged_buckets: Vec<(usize, usize)>,
    pub passed: bool,
}

type Statistic<'a> = Box<dyn Fn(&Trajectory) -> Matrix + Sync + 'a>;

/// Checks the partial-moment identities of the closed loop empirically.
///
/// `tau` and `xi` must be the moments propagated under `policy` (so that
/// `tau.ubar` is the effective feedforward about `x̄_k(i)` and `Y = K S Kᵀ`
/// to rounding; a solver's `Y` is only that close to its tolerance, and the
/// gap dominates the sampling error wherever `K ≈ 0`). Conditional
/// identities are checked in partial-expectation form, multiplied through
/// by the exact `ρ_k(i)`.
pub fn verify_identities(
    samples: &[Trajectory],
    policy: &Policy,
    tau: &MeanTrajectory,
    xi: &CovarianceTrajectory,
    model: &MjlsModel,
) -> Result<IdentityReport, McError> {
    if samples.is_empty() {
        return Err(McError::NoSamples);
    }
    let (nx, nu, t, n) = (model.n_x, model.n_u, model.horizon, model.num_modes());
    let mut checks: Vec<IdentityCheck> = [
        "conditional control mean: E[u 1{r=i}] = rho ubar",
        "conditional control covariance: E[(u - ubar)(u - ubar)' 1{r=i}] = rho (Y / rho)",
        "centering: E[(x - xbar) 1{r=i}] = 0",
        "second moment: E[x x' 1{r=i}] = S + rho xbar xbar'",
        "state-control: E[x u' 1{r=i}] = rho xbar ubar' + S K'",
        "control-bias: E[u c' 1{r=i}] = rho ubar c'",
        "control second moment: E[u u' 1{r=i}] = rho ubar ubar' + K S K'",
    ]
    .iter()
    .map(|name| IdentityCheck { name: (*name).into(), max_z: 0.0, passed: true, buckets_checked: 0 })
    .collect();
    let mut flagged = Vec::new();
    for k in 0..t {
        let c = model.bias_at(k).clone();
        for i in 0..n {
            let count = samples.iter().filter(|s| s.modes[k] == i).count();
            if count < MIN_BUCKET {
                flagged.push((k, i));
                continue;
            }
            let rho = tau.rho[k][i];
            let xb = tau.xbar[k][i].clone();
            let ub = tau.ubar[k][i].clone();
            let s = &xi.s[k][i];
            let gain = &policy.gains[k][i];
            let ind = move |tr: &Trajectory| tr.modes[k] == i;
            let stats: Vec<(Statistic, Matrix)> = vec![
                (
                    Box::new(move |tr: &Trajectory| if ind(tr) { column(&tr.controls[k]) } else { Matrix::zeros(nu, 1) }),
                    column(&ub) * rho,
                ),
                (
                    Box::new({
                        let ub = ub.clone();
                        move |tr: &Trajectory| {
                            if ind(tr) {
                                let d = &tr.controls[k] - &ub;
                                outer(&d, &d)
                            } else {
                                Matrix::zeros(nu, nu)
                            }
                        }
                    }),
                    xi.y[k][i].clone(),
                ),
                (
                    Box::new({
                        let xb = xb.clone();
                        move |tr: &Trajectory| if ind(tr) { column(&(&tr.states[k] - &xb)) } else { Matrix::zeros(nx, 1) }
                    }),
                    Matrix::zeros(nx, 1),
                ),
                (
                    Box::new(move |tr: &Trajectory| {
                        if ind(tr) {
                            outer(&tr.states[k], &tr.states[k])
                        } else {
                            Matrix::zeros(nx, nx)
                        }
                    }),
                    s + outer(&xb, &xb) * rho,
                ),
                (
                    Box::new(move |tr: &Trajectory| {
                        if ind(tr) {
                            outer(&tr.states[k], &tr.controls[k])
                        } else {
                            Matrix::zeros(nx, nu)
                        }
                    }),
                    outer(&xb, &ub) * rho + s * gain.transpose(),
                ),
                (
                    Box::new({
                        let c = c.clone();
                        move |tr: &Trajectory| if ind(tr) { outer(&tr.controls[k], &c) } else { Matrix::zeros(nu, nx) }
                    }),
                    outer(&ub, &c) * rho,
                ),
                (
                    Box::new(move |tr: &Trajectory| {
                        if ind(tr) {
                            outer(&tr.controls[k], &tr.controls[k])
                        } else {
                            Matrix::zeros(nu, nu)
                        }
                    }),
                    outer(&ub, &ub) * rho + gain * s * gain.transpose(),
                ),
            ];
            for (check, (f, expected)) in checks.iter_mut().zip(stats) {
                let est = estimate(samples, expected.nrows(), expected.ncols(), f);
                let z = est.max_z(&expected);
                check.max_z = check.max_z.max(z);
                check.buckets_checked += 1;
            }
        }
    }
    for c in &mut checks {
        c.passed = c.max_z <= IDENTITY_Z;
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(IdentityReport { z_threshold: IDENTITY_Z, checks, flagged_buckets: flagged, passed })
}

// ---------------------------------------------------------------------------
// Violations, cost, occupancy

#[derive(Clone, Debug, Default, Serialize)]
pub struct ViolationReport {
    /// Steps counted toward the trajectory-wise state rate.
    pub state_steps: Vec<usize>,
    /// `[k]`: fraction with some state half-plane violated at step `k` (all `k = 0..=T`).
    pub state_per_step: Vec<f64>,
    /// `[j][k]`: per half-plane.
    pub state_per_constraint: Vec<Vec<f64>>,
    /// Fraction of trajectories violating some state half-plane at some constrained step.
    pub state_trajectory: f64,
    /// `[k]`: fraction with `‖x_k − μ_k‖ > d_max`.
    pub tube_per_step: Vec<f64>,
    pub tube_trajectory: f64,
    /// `[k]`: fraction with a violated control half-plane or norm bound at step `k`.
    pub control_per_step: Vec<f64>,
    /// `[k][i]`: the same, conditioned on `r_k = i` (NaN for empty buckets).
    pub control_per_mode: Vec<Vec<f64>>,
    /// `[k]`: control-norm bound only.
    pub control_norm_per_step: Vec<f64>,
    /// `[k][i]`: control-norm bound only, conditioned on `r_k = i`.
    pub control_norm_per_mode: Vec<Vec<f64>>,
    pub control_trajectory: f64,
}

/// Empirical violation rates. `mu` centers the tube constraint (defaults
/// to the empirical mean).
pub fn estimate_violations(
    samples: &[Trajectory],
    cc: &ChanceConstraintSet,
    num_modes: usize,
    mu: Option<&[Vector]>,
) -> Result<ViolationReport, McError> {
    let first = samples.first().ok_or(McError::NoSamples)?;
    let n = samples.len() as f64;
    let t = first.controls.len();
    let state_steps: Vec<usize> = (0..if cc.include_terminal { t + 1 } else { t }).collect();
    let centre: Vec<Vector> = match mu {
        Some(m) => m.to_vec(),
        None => (0..=t)
            .map(|k| samples.iter().fold(Vector::zeros(first.states[0].len()), |a, s| a + &s.states[k]) / n)
            .collect(),
    };
    let state_bad = |s: &Trajectory, k: usize| cc.state_halfplanes.iter().any(|h| h.evaluate(&s.states[k]) > 0.0);
    let tube_bad = |s: &Trajectory, k: usize| cc.state_tube.as_ref().is_some_and(|tb| (&s.states[k] - &centre[k]).norm() > tb.d_max);
    let norm_bad = |s: &Trajectory, k: usize| {
        let i = s.modes[k];
        cc.control_norm.as_ref().is_some_and(|c| s.controls[k].norm() > c.u_max[i])
    };
    let control_bad =
        |s: &Trajectory, k: usize| norm_bad(s, k) || cc.control_halfplanes.iter().any(|h| h.evaluate(&s.controls[k]) > 0.0);
    let rate = |f: &dyn Fn(&Trajectory) -> bool| samples.iter().filter(|s| f(s)).count() as f64 / n;
    let per_mode = |bad: &dyn Fn(&Trajectory, usize) -> bool| -> Vec<Vec<f64>> {
        (0..t)
            .map(|k| {
                (0..num_modes)
                    .map(|i| {
                        let in_mode: Vec<&Trajectory> = samples.iter().filter(|s| s.modes[k] == i).collect();
                        if in_mode.is_empty() {
                            f64::NAN
                        } else {
                            in_mode.iter().filter(|s| bad(s, k)).count() as f64 / in_mode.len() as f64
                        }
                    })
                    .collect()
            })
            .collect()
    };
    Ok(ViolationReport {
        state_per_step: (0..=t).map(|k| rate(&|s| state_bad(s, k))).collect(),
        state_per_constraint: cc
            .state_halfplanes
            .iter()
            .map(|h| (0..=t).map(|k| rate(&|s| h.evaluate(&s.states[k]) > 0.0)).collect())
            .collect(),
        state_trajectory: rate(&|s| state_steps.iter().any(|&k| state_bad(s, k))),
        tube_per_step: (0..=t).map(|k| rate(&|s| tube_bad(s, k))).collect(),
        tube_trajectory: rate(&|s| state_steps.iter().any(|&k| tube_bad(s, k))),
        control_per_step: (0..t).map(|k| rate(&|s| control_bad(s, k))).collect(),
        control_per_mode: per_mode(&control_bad),
        control_norm_per_step: (0..t).map(|k| rate(&|s| norm_bad(s, k))).collect(),
        control_norm_per_mode: per_mode(&norm_bad),
        control_trajectory: rate(&|s| (0..t).any(|k| control_bad(s, k))),
        state_steps,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct NormSummary {
    pub count: usize,
    pub mean: f64,
    pub max: f64,
}

/// `[k][i]`: statistics of `‖u_k‖` over samples with `r_k = i`.
pub fn control_norm_summary(samples: &[Trajectory], num_modes: usize) -> Vec<Vec<NormSummary>> {
    let t = samples.first().map_or(0, |s| s.controls.len());
    (0..t)
        .map(|k| {
            (0..num_modes)
                .map(|i| {
                    let norms: Vec<f64> =
                        samples.iter().filter(|s| s.modes[k] == i).map(|s| s.controls[k].norm()).collect();
                    let count = norms.len();
                    let mean = if count > 0 { norms.iter().sum::<f64>() / count as f64 } else { f64::NAN };
                    let max = norms.iter().copied().fold(f64::NAN, f64::max);
                    NormSummary { count, mean, max }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// `E[Σ xᵀQx + uᵀRu]` from the propagated moments.
    pub analytic: f64,
}

/// Per-sample cost `Σ_{k<T} x_kᵀQ_k x_k + u_kᵀR_k u_k`.
pub fn sample_cost(model: &MjlsModel, s: &Trajectory) -> f64 {
    (0..model.horizon)
        .map(|k| {
            let (x, u) = (&s.states[k], &s.controls[k]);
            x.dot(&(model.q_at(k) * x)) + u.dot(&(model.r_at(k) * u))
        })
        .sum()
}

#[derive(Clone, Debug, Serialize)]
pub struct PathCount {
    pub path: Vec<usize>,
    pub count: usize,
    pub probability: f64,
    pub z: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PathReport {
    pub paths: Vec<PathCount>,
    pub max_z: f64,
    pub passed: bool,
}

/// Counts of mode paths `r_0..r_T` against their chain probabilities.
/// `None` when there are more than 4096 possible paths.
pub fn path_counts(samples: &[Trajectory], model: &MjlsModel) -> Option<PathReport> {
    let n_modes = model.num_modes();
    let len = model.horizon + 1;
    let total = (n_modes as f64).powi(len as i32);
    if total > MAX_PATHS as f64 {
        return None;
    }
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.modes.clone()).or_default() += 1;
    }
    let n = samples.len() as f64;
    let mut paths = Vec::with_capacity(total as usize);
    let mut max_z = 0.0_f64;
    for code in 0..total as usize {
        let mut path = Vec::with_capacity(len);
        let mut c = code;
        for _ in 0..len {
            path.push(c % n_modes);
            c /= n_modes;
        }
        path.reverse();
        let mut p = model.chain.rho0[path[0]];
        for w in path.windows(2) {
            p *= model.p(w[0], w[1]);
        }
        let count = counts.get(&path).copied().unwrap_or(0);
        let sd = (n * p * (1.0 - p)).sqrt();
        let d = (count as f64 - n * p).abs();
        let z = if sd > 0.0 {
            d / sd
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        max_z = max_z.max(z);
        paths.push(PathCount { path, count, probability: p, z });
    }
    Some(PathReport { paths, max_z, passed: max_z <= IDENTITY_Z })
}

// ---------------------------------------------------------------------------
// Report

#[derive(Clone, Debug, Serialize)]
pub struct McReport {
    pub num_samples: usize,
    pub seed: u64,
    pub noise: String,
    pub moments: EmpiricalMoments,
    pub moment_check: MomentComparison,
    pub identities: IdentityReport,
    pub violations: Option<ViolationReport>,
    pub control_norms: Vec<Vec<NormSummary>>,
    pub cost: CostEstimate,
    /// `[k][i]`: number of samples with `r_k = i`.
    pub occupancy: Vec<Vec<usize>>,
    pub paths: Option<PathReport>,
}

/// Simulates `policy` and assembles the full report. Moments are compared
/// at three standard errors.
pub fn run(
    model: &MjlsModel,
    policy: &Policy,
    cc: Option<&ChanceConstraintSet>,
    config: &SimulationConfig,
) -> Result<(McReport, Vec<Trajectory>), McError> {
    let samples = simulate(model, policy, config)?;
    let report = report_from_samples(model, policy, cc, config, &samples)?;
    Ok((report, samples))
}

pub fn report_from_samples(
    model: &MjlsModel,
    policy: &Policy,
    cc: Option<&ChanceConstraintSet>,
    config: &SimulationConfig,
    samples: &[Trajectory],
) -> Result<McReport, McError> {
    let (tau, xi) = propagate_policy(model, policy)?;
    let n_modes = model.num_modes();
    let moments = estimate_moments(samples, n_modes, Some(&tau.xbar))?;
    let moment_check = compare_moments(&moments, &tau, &xi, 3.0);
    let identities = verify_identities(samples, policy, &tau, &xi, model)?;
    let violations = match cc {
        Some(c) if !c.is_empty() => Some(estimate_violations(samples, c, n_modes, Some(&tau.mu))?),
        _ => None,
    };
    let costs = estimate(samples, 1, 1, |s| Matrix::from_element(1, 1, sample_cost(model, s)));
    let analytic = crate::propagation::evaluate_cost(&tau, &xi, model).total;
    let occupancy = (0..=model.horizon)
        .map(|k| (0..n_modes).map(|i| samples.iter().filter(|s| s.modes[k] == i).count()).collect())
        .collect();
    Ok(McReport {
        num_samples: samples.len(),
        seed: config.seed,
        noise: config.noise.name().into(),
        moment_check,
        identities,
        violations,
        control_norms: control_norm_summary(samples, n_modes),
        cost: CostEstimate { mean: costs.mean[(0, 0)], stderr: costs.stderr[(0, 0)], analytic },
        occupancy,
        paths: path_counts(samples, model),
        moments,
    })
}
