//! Projected-gradient search on `E∇_νℋ` and certification of the
//! pointwise maximum-principle inequality at a candidate control.

use std::io::Write;

use log::{debug, info, warn};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_bsee, AdjointPair, RegressionBasis};
use crate::error::{Result, SmpError};
use crate::forward::{integrate_forward, ControlProcess, StateEnsemble};
use crate::galerkin::{GalerkinSpace, NoiseEnsemble, TimeGrid};
use crate::hamiltonian::{evaluate_cost, grad_nu_hamiltonian, path_costs, CostEstimate, HamiltonianInput};
use crate::problem::{AdmissibleSet, LqSpec, ProblemSpec};
use crate::stats;

/// Backtracking line search on the cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Armijo {
    pub factor: f64,
    pub slope: f64,
    pub max_backtracks: usize,
}

impl Default for Armijo {
    fn default() -> Self {
        Self {
            factor: 0.5,
            slope: 1e-4,
            max_backtracks: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub max_iters: usize,
    /// Tolerance on the time-L² norm of the projected gradient.
    pub grad_tol: f64,
    pub armijo: Option<Armijo>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            max_iters: 200,
            grad_tol: 1e-6,
            armijo: Some(Armijo::default()),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(SmpError::InvalidParameter(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.grad_tol > 0.0) {
            return Err(SmpError::InvalidParameter(format!(
                "gradient tolerance must be positive, got {}",
                self.grad_tol
            )));
        }
        if let Some(a) = &self.armijo {
            if !(a.factor > 0.0 && a.factor < 1.0) || !(a.slope > 0.0 && a.slope < 1.0) {
                return Err(SmpError::InvalidParameter(
                    "armijo factor and slope must lie in (0, 1)".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Smallest step size before the search gives up.
const MIN_STEP: f64 = 1e-12;

/// Forward states, adjoint pair and `∇_νℋ` at one control.
pub struct GradientInfo {
    pub states: StateEnsemble,
    pub adjoint: AdjointPair,
    /// Path mean for deterministic controls, per path otherwise.
    pub gradient: ControlProcess,
    pub cost: CostEstimate,
    pub projected_grad_norm: f64,
}

/// `∇_νℋ(X_i, ν_i, Y_i, Z_i)` on every path, flattened `(path, step, j)`.
pub fn pathwise_gradient(
    spec: &dyn ProblemSpec,
    grid: &TimeGrid,
    states: &StateEnsemble,
    control: &ControlProcess,
    adjoint: &AdjointPair,
) -> Vec<f64> {
    let n = grid.n_steps();
    let rows: Vec<Vec<f64>> = (0..states.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity(n * control.n_control());
            for i in 0..n {
                let h = HamiltonianInput::new(
                    states.state(p, i),
                    control.value(p, i),
                    adjoint.y(p, i),
                    adjoint.z(p, i),
                );
                out.extend(grad_nu_hamiltonian(spec, &h).iter());
            }
            out
        })
        .collect();
    rows.concat()
}

fn gradient_process(per_path: Vec<f64>, np: usize, n: usize, nc: usize, deterministic: bool) -> Result<ControlProcess> {
    let adapted = ControlProcess::adapted(np, n, nc, per_path)?;
    Ok(if deterministic { adapted.path_mean() } else { adapted })
}

/// `ν - Π_U(ν - g)`, whose time-L² norm measures stationarity.
fn projected_gradient(
    control: &ControlProcess,
    gradient: &ControlProcess,
    set: &AdmissibleSet,
) -> Result<ControlProcess> {
    let trial = control.axpy(-1.0, gradient)?.project(set);
    control.axpy(-1.0, &trial)
}

pub fn gradient_at(
    spec: &dyn ProblemSpec,
    space: &GalerkinSpace,
    grid: &TimeGrid,
    control: &ControlProcess,
    noise: &NoiseEnsemble,
    basis: &RegressionBasis,
) -> Result<GradientInfo> {
    let states = integrate_forward(spec, space, grid, control, noise)?;
    let adjoint = solve_bsee(spec, space, grid, &states, control, noise, &basis.without_diagnostics())?;
    let per_path = pathwise_gradient(spec, grid, &states, control, &adjoint);
    let gradient = gradient_process(
        per_path,
        states.n_paths(),
        grid.n_steps(),
        control.n_control(),
        control.is_deterministic(),
    )?;
    let cost = evaluate_cost(spec, grid, &states, control)?;
    let projected_grad_norm = projected_gradient(control, &gradient, spec.admissible())?.l2_norm(grid.dt());
    Ok(GradientInfo {
        states,
        adjoint,
        gradient,
        cost,
        projected_grad_norm,
    })
}

/// Per-path cost averaged with its reflection, which removes the sampling
/// error that is odd in the noise.
fn antithetic_costs(
    spec: &dyn ProblemSpec,
    space: &GalerkinSpace,
    grid: &TimeGrid,
    control: &ControlProcess,
    noise: &NoiseEnsemble,
    reflected: &NoiseEnsemble,
) -> Result<Vec<f64>> {
    let x = integrate_forward(spec, space, grid, control, noise)?;
    let mut costs = path_costs(spec, grid, &x, control)?;
    let x = integrate_forward(spec, space, grid, control, reflected)?;
    for (c, r) in costs.iter_mut().zip(path_costs(spec, grid, &x, control)?) {
        *c = 0.5 * (*c + r);
    }
    Ok(costs)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub cost: CostEstimate,
    pub objective: Option<f64>,
    pub projected_grad_norm: f64,
    pub step_size: f64,
    pub backtracks: usize,
    pub accepted: bool,
    pub objective_after: Option<f64>,
    pub next_step_size: f64,
}

fn take_step(
    spec: &dyn ProblemSpec,
    space: &GalerkinSpace,
    grid: &TimeGrid,
    control: &ControlProcess,
    info: &GradientInfo,
    noise: &NoiseEnsemble,
    reflected: &NoiseEnsemble,
    config: &OptimizerConfig,
    step_size: f64,
    known_objective: Option<Vec<f64>>,
) -> Result<(ControlProcess, StepDiagnostics, Option<Vec<f64>>)> {
    let set = spec.admissible();
    let trial_at = |gamma: f64| -> Result<ControlProcess> { Ok(control.axpy(-gamma, &info.gradient)?.project(set)) };
    let mut diag = StepDiagnostics {
        cost: info.cost,
        objective: None,
        projected_grad_norm: info.projected_grad_norm,
        step_size,
        backtracks: 0,
        accepted: true,
        objective_after: None,
        next_step_size: step_size,
    };
    let Some(armijo) = &config.armijo else {
        return Ok((trial_at(step_size)?, diag, None));
    };
    let c0 = match known_objective {
        Some(c) => c,
        None => antithetic_costs(spec, space, grid, control, noise, reflected)?,
    };
    let (f0, f0_se) = stats::mean_se(&c0);
    diag.objective = Some(f0);
    let slack = 16.0 * f64::EPSILON * (1.0 + f0.abs());
    let mut gamma = step_size;
    let mut nominal = None;
    for k in 0..=armijo.max_backtracks {
        let trial = trial_at(gamma)?;
        // directional decrease ⟨g, ν - ν_trial⟩ in time-L², path averaged
        let moved = control.axpy(-1.0, &trial)?;
        let decrease = inner_l2(&info.gradient, &moved, grid.dt());
        let c1 = antithetic_costs(spec, space, grid, &trial, noise, reflected)?;
        let f1 = stats::mean(&c1);
        if f1 <= f0 - armijo.slope * decrease + slack {
            diag.step_size = gamma;
            diag.backtracks = k;
            diag.objective_after = Some(f1);
            return Ok((trial, diag, Some(c1)));
        }
        if k == 0 {
            nominal = Some((trial, decrease, c1, f1));
        }
        gamma *= armijo.factor;
    }
    // A full step whose predicted gain is below the sampling error of the
    // objective cannot be judged by it; the gradient estimate decides.
    let (trial, decrease, c1, f1) = nominal.expect("at least one trial");
    if decrease <= f0_se {
        debug!("predicted decrease {decrease:e} below objective error {f0_se:e}; taking the full step");
        diag.backtracks = armijo.max_backtracks;
        diag.objective_after = Some(f1);
        return Ok((trial, diag, Some(c1)));
    }
    diag.accepted = false;
    diag.backtracks = armijo.max_backtracks;
    diag.next_step_size = 0.5 * step_size;
    warn!(
        "no cost decrease after {} backtracks; step rejected, step size halved to {:e}",
        armijo.max_backtracks, diag.next_step_size
    );
    Ok((control.clone(), diag, Some(c0)))
}

/// Time-L² inner product, path averaged for adapted operands.
fn inner_l2(a: &ControlProcess, b: &ControlProcess, dt: f64) -> f64 {
    let np = a.n_paths().or(b.n_paths()).unwrap_or(1);
    let mut acc = 0.0;
    for p in 0..np {
        for i in 0..a.n_steps() {
            acc += stats::dot(a.value(p, i), b.value(p, i));
        }
    }
    acc * dt / np as f64
}

/// One projected-gradient step `ν ← Π_U(ν - γ E∇_νℋ)`.
pub fn smp_gradient_step(
    spec: &dyn ProblemSpec,
    space: &GalerkinSpace,
    grid: &TimeGrid,
    control: &ControlProcess,
    noise: &NoiseEnsemble,
    basis: &RegressionBasis,
    config: &OptimizerConfig,
) -> Result<(ControlProcess, StepDiagnostics)> {
    config.validate()?;
    control.check_admissible(spec.admissible(), 1e-12)?;
    let info = gradient_at(spec, space, grid, control, noise, basis)?;
    let reflected = noise.negated();
    let (next, diag, _) = take_step(
        spec,
        space,
        grid,
        control,
        &info,
        noise,
        &reflected,
        config,
        config.step_size,
        None,
    )?;
    Ok((next, diag))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub cost: f64,
    pub cost_std_error: f64,
    pub objective: Option<f64>,
    pub projected_grad_norm: f64,
    pub step_size: f64,
    pub backtracks: usize,
    pub accepted: bool,
}

pub struct OptimizeResult {
    pub control: ControlProcess,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
    /// Forward states, adjoint and gradient at the returned control.
    pub last: GradientInfo,
}

pub fn optimize(
    spec: &dyn ProblemSpec,
    space: &GalerkinSpace,
    grid: &TimeGrid,
    initial: &ControlProcess,
    noise: &NoiseEnsemble,
    basis: &RegressionBasis,
    config: &OptimizerConfig,
) -> Result<OptimizeResult> {
    config.validate()?;
    initial.check_admissible(spec.admissible(), 1e-12)?;
    let reflected = noise.negated();
    let mut control = initial.clone();
    let mut gamma = config.step_size;
    let mut trace = Vec::new();
    let mut iter = 0;
    // per-path objective at the current control, carried between steps
    let mut objective = None;
    loop {
        let info = gradient_at(spec, space, grid, &control, noise, basis)?;
        let converged = info.projected_grad_norm <= config.grad_tol;
        if converged || iter >= config.max_iters || gamma < MIN_STEP {
            trace.push(IterationRecord {
                iter,
                cost: info.cost.mean,
                cost_std_error: info.cost.std_error,
                objective: None,
                projected_grad_norm: info.projected_grad_norm,
                step_size: 0.0,
                backtracks: 0,
                accepted: false,
            });
            if !converged {
                info!(
                    "stopped after {iter} iterations with projected gradient {:e}",
                    info.projected_grad_norm
                );
            }
            return Ok(OptimizeResult {
                control,
                trace,
                converged,
                last: info,
            });
        }
        let (next, diag, costs) = take_step(
            spec,
            space,
            grid,
            &control,
            &info,
            noise,
            &reflected,
            config,
            gamma,
            objective.take(),
        )?;
        objective = costs;
        trace.push(IterationRecord {
            iter,
            cost: diag.cost.mean,
            cost_std_error: diag.cost.std_error,
            objective: diag.objective,
            projected_grad_norm: diag.projected_grad_norm,
            step_size: diag.step_size,
            backtracks: diag.backtracks,
            accepted: diag.accepted,
        });
        gamma = diag.next_step_size;
        control = next;
        iter += 1;
    }
}

/// CSV trace with one row per iteration.
pub fn write_trace_csv<W: Write>(trace: &[IterationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iter",
        "cost",
        "cost_std_error",
        "objective",
        "projected_grad_norm",
        "step_size",
        "backtracks",
        "accepted",
    ])?;
    for r in trace {
        w.write_record([
            r.iter.to_string(),
            r.cost.to_string(),
            r.cost_std_error.to_string(),
            r.objective.map(|v| v.to_string()).unwrap_or_default(),
            r.projected_grad_norm.to_string(),
            r.step_size.to_string(),
            r.backtracks.to_string(),
            r.accepted.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Closed-form optimum of the LQ problem with linear terminal cost:
/// `ν*(t) = -½ Bᵀ S(T - t) ρ` and
/// `J* = ⟨ρ, S(T) x₀⟩ - ¼ ∫₀ᵀ |Bᵀ S(T - s) ρ|² ds` (Simpson quadrature).
pub fn solve_lq_analytic(lq: &LqSpec, space: &GalerkinSpace, grid: &TimeGrid) -> Result<(ControlProcess, f64)> {
    if !lq.terminal().is_linear() {
        return Err(SmpError::Unsupported(
            "analytic LQ optimum needs a linear terminal cost".into(),
        ));
    }
    if !lq.admissible().is_unconstrained() {
        return Err(SmpError::Unsupported(
            "analytic LQ optimum needs an unconstrained control set".into(),
        ));
    }
    crate::problem::check_dims(lq, space)?;
    let rho = lq.terminal().rho();
    let t_end = grid.horizon();
    let feedback = |s: f64| -> Result<DVector<f64>> {
        let y = space.adjoint_semigroup_apply(t_end - s, rho)?;
        Ok(lq.b().tr_mul(&y))
    };
    let mut values = Vec::with_capacity(grid.n_steps() * space.n_control());
    for i in 0..grid.n_steps() {
        values.extend(feedback(grid.t(i))?.iter().map(|v| -0.5 * v));
    }
    let control = ControlProcess::deterministic(grid.n_steps(), space.n_control(), values)?;
    let m = 2 * grid.n_steps().max(500);
    let h = t_end / m as f64;
    let mut integral = 0.0;
    for k in 0..=m {
        let w = if k == 0 || k == m {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        integral += w * feedback(k as f64 * h)?.norm_squared();
    }
    integral *= h / 3.0;
    let x_t = space.semigroup_apply(t_end, lq.initial_state().as_slice())?;
    let value = stats::dot(rho, x_t.as_slice()) - 0.25 * integral;
    Ok((control, value))
}

/// Points of `U` against which the inequality is tested.
pub fn probe_points(set: &AdmissibleSet, centre: &[f64], n_random: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let nc = centre.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4f42);
    let mut out = Vec::new();
    match set {
        AdmissibleSet::Box { lo, hi } => {
            for _ in 0..n_random {
                out.push((0..nc).map(|j| lo[j] + (hi[j] - lo[j]) * rng.random::<f64>()).collect());
            }
            let vertex = |mask: &dyn Fn(usize) -> bool| -> Vec<f64> {
                (0..nc).map(|j| if mask(j) { hi[j] } else { lo[j] }).collect()
            };
            if nc <= 10 {
                for bits in 0..(1usize << nc) {
                    out.push(vertex(&|j| bits >> j & 1 == 1));
                }
            } else {
                for _ in 0..64 {
                    let bits: Vec<bool> = (0..nc).map(|_| rng.random()).collect();
                    out.push(vertex(&|j| bits[j]));
                }
            }
        }
        AdmissibleSet::Unconstrained => {
            for _ in 0..n_random {
                out.push(
                    (0..nc)
                        .map(|j| centre[j] + radius * (2.0 * rng.random::<f64>() - 1.0))
                        .collect(),
                );
            }
        }
    }
    for j in 0..nc {
        for sign in [1.0, -1.0] {
            let mut v = centre.to_vec();
            v[j] += sign * radius;
            out.push(set.project(&v));
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Violation {
    pub t: f64,
    pub probe: Vec<f64>,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimalityCertificate {
    pub seed: u64,
    pub n_paths: usize,
    pub tolerance: f64,
    pub n_probes: usize,
    /// `|ν*(t_i) - Π_U(ν*(t_i) - E∇_νℋ)|` per step.
    pub projected_grad_norms: Vec<f64>,
    pub projected_grad_l2: f64,
    pub mean_gradient_l2: f64,
    pub cost: CostEstimate,
    /// Largest `E⟨∇_νℋ, ν*(t) - ν⟩` over probes and times.
    pub max_inner: f64,
    pub n_violations: usize,
    pub violations: Vec<Violation>,
    pub optimizer: Option<OptimizerConfig>,
    pub trace: Vec<IterationRecord>,
    pub pass: bool,
}

const MAX_LISTED: usize = 20;

/// Estimates `E⟨∇_νℋ(X*, ν*, Y*, Z*), ν*(t) - ν⟩` for every probe `ν` and
/// grid time and certifies each is at most `tol + 3σ`. For unconstrained
/// `U` the time-L² norm of `E∇_νℋ` must also be at most `tol`.
pub fn verify_maximum_principle(
    spec: &dyn ProblemSpec,
    grid: &TimeGrid,
    states: &StateEnsemble,
    control: &ControlProcess,
    adjoint: &AdjointPair,
    probes: &[Vec<f64>],
    tol: f64,
) -> Result<OptimalityCertificate> {
    let (np, n, nc) = (states.n_paths(), grid.n_steps(), control.n_control());
    control.check_shape(np, n, nc)?;
    for probe in probes {
        crate::error::check_len("probe", nc, probe.len())?;
    }
    let g = pathwise_gradient(spec, grid, states, control, adjoint);
    let at = |p: usize, i: usize| &g[(p * n + i) * nc..(p * n + i + 1) * nc];
    let mean_g = gradient_process(g.clone(), np, n, nc, true)?;
    let set = spec.admissible();
    let mut pg_norms = Vec::with_capacity(n);
    for i in 0..n {
        let u = control.path_mean();
        let u = u.value(0, i);
        let gi = mean_g.value(0, i);
        let trial: Vec<f64> = (0..nc).map(|j| u[j] - gi[j]).collect();
        let proj = set.project(&trial);
        pg_norms.push((0..nc).map(|j| (u[j] - proj[j]).powi(2)).sum::<f64>().sqrt());
    }
    let dt = grid.dt();
    let projected_grad_l2 = (pg_norms.iter().map(|v| v * v).sum::<f64>() * dt).sqrt();
    let mean_gradient_l2 = mean_g.l2_norm(dt);
    // one row per (step, probe), probes innermost
    let rows: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let at = &at;
            probes.iter().map(move |probe| {
                let vals: Vec<f64> = (0..np)
                    .map(|p| {
                        let u = control.value(p, i);
                        let d: Vec<f64> = (0..nc).map(|j| u[j] - probe[j]).collect();
                        stats::dot(at(p, i), &d)
                    })
                    .collect();
                stats::mean_se(&vals)
            })
        })
        .collect();
    let mut violations = Vec::new();
    let mut n_violations = 0;
    let mut max_inner = f64::NEG_INFINITY;
    for (k, (m, se)) in rows.iter().enumerate() {
        max_inner = max_inner.max(*m);
        if *m > tol + 3.0 * se {
            n_violations += 1;
            if violations.len() < MAX_LISTED {
                violations.push(Violation {
                    t: grid.t(k / probes.len()),
                    probe: probes[k % probes.len()].clone(),
                    value: *m,
                    std_error: *se,
                });
            }
        }
    }
    let stationary = !set.is_unconstrained() || mean_gradient_l2 <= tol;
    let cost = evaluate_cost(spec, grid, states, control)?;
    Ok(OptimalityCertificate {
        seed: states.seed(),
        n_paths: np,
        tolerance: tol,
        n_probes: probes.len(),
        projected_grad_norms: pg_norms,
        projected_grad_l2,
        mean_gradient_l2,
        cost,
        max_inner: if rows.is_empty() { 0.0 } else { max_inner },
        n_violations,
        violations,
        optimizer: None,
        trace: Vec::new(),
        pass: n_violations == 0 && stationary,
    })
}
