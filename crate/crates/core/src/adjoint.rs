//! Backward solver for the adjoint equation
//! `-dY = (A*Y + ∇_x ℋ(X, ν, Y, Z)) dt - Z dW`, `Y(T) = ∇φ(X(T))`,
//! by least-squares Monte Carlo.
//!
//! One backward step, with `V = S*(Δt) Y_{i+1}` and `E_i` the regression on
//! polynomials of `X_i`:
//!
//! ```text
//! Ỹ_i = E_i[V]
//! Z_i = E_i[(V - Ỹ_i) ΔW_iᵀ] / Δt
//! Y_i = Ỹ_i + Δt ∇_x ℋ(X_i, ν_i, Ỹ_i, Z_i)
//! ```

use std::io::Write;

use log::{debug, info};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, SmpError};
use crate::forward::{check_noise, ControlProcess, StateEnsemble};
use crate::galerkin::{GalerkinSpace, NoiseEnsemble, TimeGrid};
use crate::hamiltonian::{grad_x_hamiltonian, HamiltonianInput};
use crate::problem::{check_dims, LqSpec, LqTerminal, ProblemSpec};
use crate::regression::{cross_validated_error, Design};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
    pub active_modes: Vec<usize>,
    /// Compute the cross-validation diagnostics (three extra fits per step).
    #[serde(default = "enabled")]
    pub cross_validate: bool,
}

fn enabled() -> bool {
    true
}

impl RegressionBasis {
    /// Degree 2 on the first `min(n_state, 4)` modes.
    pub fn default_for(n_state: usize) -> Self {
        Self::new(2, (0..n_state.min(4)).collect())
    }

    pub fn new(degree: usize, active_modes: Vec<usize>) -> Self {
        Self {
            degree,
            active_modes,
            cross_validate: true,
        }
    }

    /// The same basis without cross-validation diagnostics.
    pub fn without_diagnostics(&self) -> Self {
        Self {
            cross_validate: false,
            ..self.clone()
        }
    }

    fn check(&self, n_state: usize) -> Result<()> {
        if let Some(m) = self.active_modes.iter().find(|m| **m >= n_state) {
            return Err(SmpError::InvalidParameter(format!(
                "regression mode {m} outside state dimension {n_state}"
            )));
        }
        Ok(())
    }

    fn features(&self, ensemble: &StateEnsemble, step: usize) -> DMatrix<f64> {
        DMatrix::from_fn(ensemble.n_paths(), self.active_modes.len(), |p, j| {
            ensemble.state(p, step)[self.active_modes[j]]
        })
    }
}

/// `(Y, Z)` on every (path, step), `i = 0..=N`. `Z_N` is zero by convention.
#[derive(Clone, Debug)]
pub struct AdjointPair {
    grid: TimeGrid,
    n_paths: usize,
    n_state: usize,
    n_noise: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    degrees_used: Vec<usize>,
    y_cv_error: Vec<f64>,
    z_cv_error: Vec<f64>,
}

impl AdjointPair {
    fn zeros(grid: &TimeGrid, n_paths: usize, n_state: usize, n_noise: usize) -> Self {
        let n = grid.n_steps();
        Self {
            grid: *grid,
            n_paths,
            n_state,
            n_noise,
            y: vec![0.0; (n + 1) * n_paths * n_state],
            z: vec![0.0; (n + 1) * n_paths * n_state * n_noise],
            degrees_used: vec![0; n],
            y_cv_error: vec![0.0; n],
            z_cv_error: vec![0.0; n],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_state(&self) -> usize {
        self.n_state
    }

    pub fn n_noise(&self) -> usize {
        self.n_noise
    }

    pub fn y(&self, path: usize, step: usize) -> &[f64] {
        let start = (step * self.n_paths + path) * self.n_state;
        &self.y[start..start + self.n_state]
    }

    /// `Z` at (path, step) as a column-major `n_state × n_noise` matrix.
    pub fn z(&self, path: usize, step: usize) -> &[f64] {
        let w = self.n_state * self.n_noise;
        let start = (step * self.n_paths + path) * w;
        &self.z[start..start + w]
    }

    fn y_step_mut(&mut self, step: usize) -> &mut [f64] {
        let w = self.n_paths * self.n_state;
        &mut self.y[step * w..(step + 1) * w]
    }

    fn z_step_mut(&mut self, step: usize) -> &mut [f64] {
        let w = self.n_paths * self.n_state * self.n_noise;
        &mut self.z[step * w..(step + 1) * w]
    }

    /// Regression degree actually used at each step `0..N`.
    pub fn degrees_used(&self) -> &[usize] {
        &self.degrees_used
    }

    /// Cross-validated standard error of the regressed `Ỹ_i`, per step.
    pub fn y_cv_error(&self) -> &[f64] {
        &self.y_cv_error
    }

    /// Cross-validated standard error of `Z_i`, per step.
    pub fn z_cv_error(&self) -> &[f64] {
        &self.z_cv_error
    }

    /// Three times the largest cross-validated error of `Z`: the level below
    /// which a regressed `Z` cannot be distinguished from zero. Zero when
    /// the basis had cross-validation disabled.
    pub fn noise_floor(&self) -> f64 {
        3.0 * self.z_cv_error.iter().fold(0.0_f64, |m, v| m.max(*v))
    }

    /// Largest entry magnitude of `Z` over all paths and steps.
    pub fn z_max_abs(&self) -> f64 {
        self.z.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn y_max_abs(&self) -> f64 {
        self.y.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// CSV with columns `path, step, t, y0.., z0_0, z1_0, ..` where `z{k}_{m}`
    /// is the (state k, noise m) entry.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((0..self.n_state).map(|k| format!("y{k}")));
        for m in 0..self.n_noise {
            header.extend((0..self.n_state).map(|k| format!("z{k}_{m}")));
        }
        w.write_record(&header)?;
        for p in 0..self.n_paths {
            for i in 0..=self.grid.n_steps() {
                let mut rec = vec![p.to_string(), i.to_string(), self.grid.t(i).to_string()];
                rec.extend(self.y(p, i).iter().map(|v| v.to_string()));
                rec.extend(self.z(p, i).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_inputs(
    spec: &dyn ProblemSpec,
    space: &GalerkinSpace,
    grid: &TimeGrid,
    ensemble: &StateEnsemble,
    noise: &NoiseEnsemble,
) -> Result<()> {
    check_dims(spec, space)?;
    check_noise(space, grid, noise)?;
    check_len("ensemble steps", grid.n_steps(), ensemble.grid().n_steps())?;
    check_len("ensemble paths", noise.n_paths(), ensemble.n_paths())?;
    if ensemble.noise_fingerprint() != noise.fingerprint() {
        return Err(SmpError::InvalidParameter(format!(
            "ensemble was driven by noise {} but {} was supplied",
            ensemble.noise_fingerprint(),
            noise.fingerprint()
        )));
    }
    Ok(())
}

fn check_finite(values: &[f64], width: usize, quantity: &'static str, step: usize) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(SmpError::NonFinite {
            quantity,
            path: pos / width,
            step,
        }),
        None => Ok(()),
    }
}

fn write_terminal(spec: &dyn ProblemSpec, ensemble: &StateEnsemble, pair: &mut AdjointPair) -> Result<()> {
    let ns = pair.n_state;
    let n = pair.grid.n_steps();
    pair.y_step_mut(n)
        .par_chunks_mut(ns)
        .enumerate()
        .for_each(|(p, y)| y.copy_from_slice(spec.terminal_grad(ensemble.terminal(p)).as_slice()));
    check_finite(&pair.y[n * pair.n_paths * ns..], ns, "adjoint", n)
}

/// Rows `(V_p - Ỹ_p) ⊗ ΔW_p / Δt` in column-major `(k, m)` order.
fn martingale_products(
    v: &DMatrix<f64>,
    fitted: &DMatrix<f64>,
    noise: &NoiseEnsemble,
    step: usize,
    dt: f64,
) -> DMatrix<f64> {
    let (np, ns) = v.shape();
    let nw = noise.n_noise();
    DMatrix::from_fn(np, ns * nw, |p, c| {
        let (k, m) = (c % ns, c / ns);
        (v[(p, k)] - fitted[(p, k)]) * noise.increment(p, step)[m] / dt
    })
}

/// Generic regression solver for the adjoint pair along `(X, ν)`.
pub fn solve_bsee(
    spec: &dyn ProblemSpec,
    space: &GalerkinSpace,
    grid: &TimeGrid,
    ensemble: &StateEnsemble,
    control: &ControlProcess,
    noise: &NoiseEnsemble,
    basis: &RegressionBasis,
) -> Result<AdjointPair> {
    check_inputs(spec, space, grid, ensemble, noise)?;
    basis.check(space.n_state())?;
    control.check_shape(ensemble.n_paths(), grid.n_steps(), space.n_control())?;
    let (np, ns, nw) = (ensemble.n_paths(), space.n_state(), space.n_noise());
    let n = grid.n_steps();
    let dt = grid.dt();
    let decay = space.semigroup_diag(dt)?;
    let mut pair = AdjointPair::zeros(grid, np, ns, nw);
    write_terminal(spec, ensemble, &mut pair)?;

    for i in (0..n).rev() {
        let v = DMatrix::from_fn(np, ns, |p, k| decay[k] * pair.y(p, i + 1)[k]);
        let design = Design::build(&basis.features(ensemble, i), basis.degree);
        if design.degree() < basis.degree {
            if design.varying_features() == 0 {
                debug!("step {i}: regressors constant across paths, using the sample mean");
            } else {
                info!(
                    "step {i}: regression degree lowered from {} to {} (rank deficient design)",
                    basis.degree,
                    design.degree()
                );
            }
        }
        let projector = design.full_projector();
        let y_tilde = projector.fit(&design, &v).predict(&design);
        let products = martingale_products(&v, &y_tilde, noise, i, dt);
        let z_fit = projector.fit(&design, &products).predict(&design);

        pair.degrees_used[i] = design.degree();
        if basis.cross_validate {
            pair.y_cv_error[i] = cross_validated_error(&design, &v);
            pair.z_cv_error[i] = cross_validated_error(&design, &products);
        }

        let w = ns * nw;
        {
            let z_step = pair.z_step_mut(i);
            z_step.par_chunks_mut(w).enumerate().for_each(|(p, z)| {
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc = z_fit[(p, c)];
                }
            });
        }
        check_finite(&pair.z[i * np * w..(i + 1) * np * w], w, "adjoint Z", i)?;
        let z_all = pair.z[i * np * w..(i + 1) * np * w].to_vec();
        pair.y_step_mut(i).par_chunks_mut(ns).enumerate().for_each(|(p, y)| {
            let yt: Vec<f64> = (0..ns).map(|k| y_tilde[(p, k)]).collect();
            let h = HamiltonianInput::new(
                ensemble.state(p, i),
                control.value(p, i),
                &yt,
                &z_all[p * w..(p + 1) * w],
            );
            let g = grad_x_hamiltonian(spec, &h);
            for k in 0..ns {
                y[k] = yt[k] + dt * g[k];
            }
        });
        check_finite(&pair.y[i * np * ns..(i + 1) * np * ns], ns, "adjoint", i)?;
    }
    Ok(pair)
}

/// Explicit representation for LQ problems, whose adjoint driver vanishes:
/// `Y(t) = S*(T - t) E[∇φ(X_T) | ℱ_t]` and `Z(t) = S*(T - t) R(t)` with `R`
/// the martingale-representation integrand of `∇φ(X_T)`.
///
/// With linear `φ` this is the closed form `Y(t_i) = S*(T - t_i) ρ`, `Z = 0`.
/// Otherwise the conditional expectations are regressed directly on the
/// terminal gradient.
pub fn solve_bsee_lq_explicit(
    spec: &dyn ProblemSpec,
    space: &GalerkinSpace,
    grid: &TimeGrid,
    ensemble: &StateEnsemble,
    noise: &NoiseEnsemble,
    basis: &RegressionBasis,
) -> Result<AdjointPair> {
    let lq: &LqSpec = spec
        .as_lq()
        .ok_or_else(|| SmpError::Unsupported("a linear-quadratic problem".into()))?;
    check_inputs(spec, space, grid, ensemble, noise)?;
    basis.check(space.n_state())?;
    let (np, ns, nw) = (ensemble.n_paths(), space.n_state(), space.n_noise());
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut pair = AdjointPair::zeros(grid, np, ns, nw);
    write_terminal(spec, ensemble, &mut pair)?;

    if let LqTerminal::Linear { rho } = lq.terminal() {
        for i in 0..n {
            let yi = space.adjoint_semigroup_apply(grid.t(n) - grid.t(i), rho)?;
            pair.y_step_mut(i)
                .chunks_mut(ns)
                .for_each(|y| y.copy_from_slice(yi.as_slice()));
        }
        return Ok(pair);
    }

    let target = DMatrix::from_fn(np, ns, |p, k| pair.y(p, n)[k]);
    let mut m_next = target.clone();
    for i in (0..n).rev() {
        let design = Design::build(&basis.features(ensemble, i), basis.degree);
        let projector = design.full_projector();
        let m_i = projector.fit(&design, &target).predict(&design);
        let products = martingale_products(&m_next, &m_i, noise, i, dt);
        let r_i = projector.fit(&design, &products).predict(&design);
        pair.degrees_used[i] = design.degree();
        if basis.cross_validate {
            pair.y_cv_error[i] = cross_validated_error(&design, &target);
            pair.z_cv_error[i] = cross_validated_error(&design, &products);
        }

        let decay = space.semigroup_diag(grid.t(n) - grid.t(i))?;
        pair.y_step_mut(i).par_chunks_mut(ns).enumerate().for_each(|(p, y)| {
            for k in 0..ns {
                y[k] = decay[k] * m_i[(p, k)];
            }
        });
        pair.z_step_mut(i)
            .par_chunks_mut(ns * nw)
            .enumerate()
            .for_each(|(p, z)| {
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc = decay[c % ns] * r_i[(p, c)];
                }
            });
        m_next = m_i;
    }
    Ok(pair)
}
