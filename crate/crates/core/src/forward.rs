//! Controlled forward evolution by exponential Euler on the mild form:
//! `X_{i+1} = S(Δt)[X_i + Δt b(X_i, ν_i) + σ(X_i, ν_i) ΔW_i]`.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{check_len, Result, SmpError};
use crate::galerkin::{GalerkinSpace, NoiseEnsemble, TimeGrid};
use crate::problem::{check_dims, AdmissibleSet, ProblemSpec};

/// Piecewise-constant control values on `[t_i, t_{i+1})`, `i = 0..N`.
///
/// A deterministic control stores one value per step and is shared by all
/// paths; an adapted control stores one value per (path, step).
#[derive(Clone, Debug, PartialEq)]
pub struct ControlProcess {
    n_steps: usize,
    n_control: usize,
    n_paths: Option<usize>,
    values: Vec<f64>,
}

impl ControlProcess {
    pub fn deterministic(n_steps: usize, n_control: usize, values: Vec<f64>) -> Result<Self> {
        check_len("control values", n_steps * n_control, values.len())?;
        Ok(Self {
            n_steps,
            n_control,
            n_paths: None,
            values,
        })
    }

    pub fn adapted(n_paths: usize, n_steps: usize, n_control: usize, values: Vec<f64>) -> Result<Self> {
        check_len("control values", n_paths * n_steps * n_control, values.len())?;
        Ok(Self {
            n_steps,
            n_control,
            n_paths: Some(n_paths),
            values,
        })
    }

    pub fn zeros(grid: &TimeGrid, n_control: usize) -> Self {
        Self {
            n_steps: grid.n_steps(),
            n_control,
            n_paths: None,
            values: vec![0.0; grid.n_steps() * n_control],
        }
    }

    pub fn constant(grid: &TimeGrid, u: &[f64]) -> Self {
        Self {
            n_steps: grid.n_steps(),
            n_control: u.len(),
            n_paths: None,
            values: u.repeat(grid.n_steps()),
        }
    }

    /// Deterministic control sampled from `f(t_i)`.
    pub fn from_fn<F: Fn(f64) -> Vec<f64>>(grid: &TimeGrid, n_control: usize, f: F) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.n_steps() * n_control);
        for i in 0..grid.n_steps() {
            let v = f(grid.t(i));
            check_len("control value", n_control, v.len())?;
            values.extend(v);
        }
        Self::deterministic(grid.n_steps(), n_control, values)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_control(&self) -> usize {
        self.n_control
    }

    /// `None` for deterministic controls.
    pub fn n_paths(&self) -> Option<usize> {
        self.n_paths
    }

    pub fn is_deterministic(&self) -> bool {
        self.n_paths.is_none()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, path: usize, step: usize) -> &[f64] {
        let row = match self.n_paths {
            None => step,
            Some(_) => path * self.n_steps + step,
        };
        &self.values[row * self.n_control..(row + 1) * self.n_control]
    }

    /// Checks the control can drive an ensemble of `n_paths` on `n_steps`.
    pub fn check_shape(&self, n_paths: usize, n_steps: usize, n_control: usize) -> Result<()> {
        check_len("control steps", n_steps, self.n_steps)?;
        check_len("control dimension", n_control, self.n_control)?;
        if let Some(p) = self.n_paths {
            check_len("control paths", n_paths, p)?;
        }
        Ok(())
    }

    /// `self + alpha · other`, adapted if either operand is.
    pub fn axpy(&self, alpha: f64, other: &Self) -> Result<Self> {
        check_len("control steps", self.n_steps, other.n_steps)?;
        check_len("control dimension", self.n_control, other.n_control)?;
        let n_paths = match (self.n_paths, other.n_paths) {
            (Some(a), Some(b)) => {
                check_len("control paths", a, b)?;
                Some(a)
            }
            (a, b) => a.or(b),
        };
        let values = match n_paths {
            None => self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + alpha * b)
                .collect(),
            Some(np) => {
                let mut out = Vec::with_capacity(np * self.n_steps * self.n_control);
                for p in 0..np {
                    for i in 0..self.n_steps {
                        let a = self.value(p, i);
                        let b = other.value(p, i);
                        out.extend(a.iter().zip(b).map(|(x, y)| x + alpha * y));
                    }
                }
                out
            }
        };
        Ok(Self {
            n_steps: self.n_steps,
            n_control: self.n_control,
            n_paths,
            values,
        })
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// Applies `f` to every stored control value, keeping the layout.
    pub fn map<F: Fn(&[f64]) -> Vec<f64>>(&self, f: F) -> Self {
        let mut out = self.clone();
        for chunk in out.values.chunks_mut(self.n_control) {
            let v = f(chunk);
            chunk.copy_from_slice(&v);
        }
        out
    }

    pub fn project(&self, set: &AdmissibleSet) -> Self {
        let mut out = self.clone();
        for chunk in out.values.chunks_mut(self.n_control) {
            let p = set.project(chunk);
            chunk.copy_from_slice(&p);
        }
        out
    }

    pub fn check_admissible(&self, set: &AdmissibleSet, tol: f64) -> Result<()> {
        for (row, chunk) in self.values.chunks(self.n_control).enumerate() {
            if !set.contains(chunk, tol) {
                let (path, step) = match self.n_paths {
                    None => (0, row),
                    Some(_) => (row / self.n_steps, row % self.n_steps),
                };
                return Err(SmpError::Inadmissible { path, step });
            }
        }
        Ok(())
    }

    /// Time-L² norm `sqrt(Σ Δt |ν_i|²)`, averaged over paths when adapted.
    pub fn l2_norm(&self, dt: f64) -> f64 {
        let per = self.n_paths.unwrap_or(1) as f64;
        (self.values.iter().map(|v| v * v).sum::<f64>() * dt / per).sqrt()
    }

    /// Path average of an adapted control; deterministic controls are returned as is.
    pub fn path_mean(&self) -> Self {
        let Some(np) = self.n_paths else {
            return self.clone();
        };
        let mut values = vec![0.0; self.n_steps * self.n_control];
        for p in 0..np {
            for i in 0..self.n_steps {
                for (acc, v) in values[i * self.n_control..(i + 1) * self.n_control]
                    .iter_mut()
                    .zip(self.value(p, i))
                {
                    *acc += v;
                }
            }
        }
        values.iter_mut().for_each(|v| *v /= np as f64);
        Self {
            n_steps: self.n_steps,
            n_control: self.n_control,
            n_paths: None,
            values,
        }
    }

    /// CSV with columns `path, step, t, u0, u1, …`; a deterministic control
    /// is written once, as path 0.
    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((0..self.n_control).map(|j| format!("u{j}")));
        w.write_record(&header)?;
        for p in 0..self.n_paths.unwrap_or(1) {
            for i in 0..self.n_steps {
                let mut rec = vec![p.to_string(), i.to_string(), grid.t(i).to_string()];
                rec.extend(self.value(p, i).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Forward paths on the grid, `states[p, i]` for `i = 0..=N`.
#[derive(Clone, Debug)]
pub struct StateEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    n_state: usize,
    seed: u64,
    noise_fingerprint: String,
    states: Vec<f64>,
}

impl StateEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_state(&self) -> usize {
        self.n_state
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise_fingerprint(&self) -> &str {
        &self.noise_fingerprint
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let start = (path * (self.grid.n_steps() + 1) + step) * self.n_state;
        &self.states[start..start + self.n_state]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.state(path, self.grid.n_steps())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.states
    }

    pub fn mean_at(&self, step: usize) -> DVector<f64> {
        let mut m = DVector::zeros(self.n_state);
        for p in 0..self.n_paths {
            for (acc, v) in m.iter_mut().zip(self.state(p, step)) {
                *acc += v;
            }
        }
        m / self.n_paths as f64
    }

    /// CSV with columns `path, step, t, x0, x1, …`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((0..self.n_state).map(|k| format!("x{k}")));
        w.write_record(&header)?;
        for p in 0..self.n_paths {
            for i in 0..=self.grid.n_steps() {
                let mut rec = vec![p.to_string(), i.to_string(), self.grid.t(i).to_string()];
                rec.extend(self.state(p, i).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn check_noise(space: &GalerkinSpace, grid: &TimeGrid, noise: &NoiseEnsemble) -> Result<()> {
    check_len("noise steps", grid.n_steps(), noise.n_steps())?;
    check_len("noise modes", space.n_noise(), noise.n_noise())?;
    if (noise.dt() - grid.dt()).abs() > 1e-12 * grid.dt() {
        return Err(SmpError::InvalidParameter(format!(
            "noise time step {} does not match grid step {}",
            noise.dt(),
            grid.dt()
        )));
    }
    Ok(())
}

/// One exponential Euler step from `x` into `next`.
fn euler_step(spec: &dyn ProblemSpec, decay: &[f64], dt: f64, x: &[f64], u: &[f64], dw: &[f64], next: &mut [f64]) {
    let b = spec.drift(x, u);
    let s = spec.diffusion(x, u);
    for k in 0..x.len() {
        let mut noise = 0.0;
        for (m, w) in dw.iter().enumerate() {
            noise += s[(k, m)] * w;
        }
        next[k] = decay[k] * (x[k] + dt * b[k] + noise);
    }
}

fn first_error(results: Vec<Result<()>>) -> Result<()> {
    results.into_iter().collect()
}

pub fn integrate_forward(
    spec: &dyn ProblemSpec,
    space: &GalerkinSpace,
    grid: &TimeGrid,
    control: &ControlProcess,
    noise: &NoiseEnsemble,
) -> Result<StateEnsemble> {
    check_dims(spec, space)?;
    check_noise(space, grid, noise)?;
    let n_paths = noise.n_paths();
    control.check_shape(n_paths, grid.n_steps(), space.n_control())?;
    let ns = space.n_state();
    let n = grid.n_steps();
    let dt = grid.dt();
    let decay = space.semigroup_diag(dt)?;
    let x0 = spec.initial_state();
    let mut states = vec![0.0; n_paths * (n + 1) * ns];
    let results: Vec<Result<()>> = states
        .par_chunks_mut((n + 1) * ns)
        .enumerate()
        .map(|(p, path)| {
            path[..ns].copy_from_slice(x0.as_slice());
            for i in 0..n {
                let (done, rest) = path.split_at_mut((i + 1) * ns);
                let x = &done[i * ns..];
                let next = &mut rest[..ns];
                euler_step(spec, &decay, dt, x, control.value(p, i), noise.increment(p, i), next);
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(SmpError::NonFinite {
                        quantity: "state",
                        path: p,
                        step: i + 1,
                    });
                }
            }
            Ok(())
        })
        .collect();
    first_error(results)?;
    Ok(StateEnsemble {
        grid: *grid,
        n_paths,
        n_state: ns,
        seed: noise.seed(),
        noise_fingerprint: noise.fingerprint().to_string(),
        states,
    })
}

/// Integrates under a feedback law `ν_i = policy(i, X_i)`. The control is
/// adapted by construction since it only sees the current state.
pub fn integrate_feedback<F>(
    spec: &dyn ProblemSpec,
    space: &GalerkinSpace,
    grid: &TimeGrid,
    noise: &NoiseEnsemble,
    policy: F,
) -> Result<(StateEnsemble, ControlProcess)>
where
    F: Fn(usize, &[f64]) -> Vec<f64> + Sync,
{
    check_dims(spec, space)?;
    check_noise(space, grid, noise)?;
    let (ns, nc, n) = (space.n_state(), space.n_control(), grid.n_steps());
    let n_paths = noise.n_paths();
    let dt = grid.dt();
    let decay = space.semigroup_diag(dt)?;
    let x0 = spec.initial_state();
    let mut states = vec![0.0; n_paths * (n + 1) * ns];
    let mut controls = vec![0.0; n_paths * n * nc];
    let results: Vec<Result<()>> = states
        .par_chunks_mut((n + 1) * ns)
        .zip(controls.par_chunks_mut(n * nc))
        .enumerate()
        .map(|(p, (path, ctrl))| {
            path[..ns].copy_from_slice(x0.as_slice());
            for i in 0..n {
                let (done, rest) = path.split_at_mut((i + 1) * ns);
                let x = &done[i * ns..];
                let u = policy(i, x);
                check_len("feedback control", nc, u.len())?;
                ctrl[i * nc..(i + 1) * nc].copy_from_slice(&u);
                let next = &mut rest[..ns];
                euler_step(spec, &decay, dt, x, &u, noise.increment(p, i), next);
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(SmpError::NonFinite {
                        quantity: "state",
                        path: p,
                        step: i + 1,
                    });
                }
            }
            Ok(())
        })
        .collect();
    first_error(results)?;
    let ensemble = StateEnsemble {
        grid: *grid,
        n_paths,
        n_state: ns,
        seed: noise.seed(),
        noise_fingerprint: noise.fingerprint().to_string(),
        states,
    };
    Ok((ensemble, ControlProcess::adapted(n_paths, n, nc, controls)?))
}

/// `(X*, X_ε)` under `ν*` and `ν* + εν`, both driven by the same noise.
pub fn perturbed_pair(
    spec: &dyn ProblemSpec,
    space: &GalerkinSpace,
    grid: &TimeGrid,
    star: &ControlProcess,
    direction: &ControlProcess,
    eps: f64,
    noise: &NoiseEnsemble,
) -> Result<(StateEnsemble, StateEnsemble)> {
    let perturbed = perturbed_control(spec, star, direction, eps)?;
    let x_star = integrate_forward(spec, space, grid, star, noise)?;
    let x_eps = integrate_forward(spec, space, grid, &perturbed, noise)?;
    Ok((x_star, x_eps))
}

/// `ν* + εν` after checking `0 ≤ ε ≤ 1` and that `ν* + ν` is admissible.
pub fn perturbed_control(
    spec: &dyn ProblemSpec,
    star: &ControlProcess,
    direction: &ControlProcess,
    eps: f64,
) -> Result<ControlProcess> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(SmpError::InvalidParameter(format!(
            "perturbation size must lie in [0, 1], got {eps}"
        )));
    }
    star.axpy(1.0, direction)?.check_admissible(spec.admissible(), 1e-12)?;
    if eps == 0.0 {
        return Ok(star.clone());
    }
    star.axpy(eps, direction)
}
