//! Control problem data: drift, diffusion, running and terminal cost, their
//! first derivatives, the initial state and the admissible control set.
//!
//! Matrix conventions used throughout the crate:
//!
//! * `σ(x, ν)` is an `n_state × n_noise` matrix.
//! * Derivatives of `σ` are taken with respect to its column-major
//!   vectorisation, so `σ_x` is `(n_state·n_noise) × n_state` and `σ_ν` is
//!   `(n_state·n_noise) × n_control`. Row `k + m·n_state` holds the
//!   derivative of `σ[k, m]`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, SmpError};
use crate::galerkin::GalerkinSpace;
use crate::numdiff;

/// Convex admissible set `U` for control values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AdmissibleSet {
    Unconstrained,
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl AdmissibleSet {
    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_len("box bounds", lo.len(), hi.len())?;
        if let Some(k) = (0..lo.len()).find(|&k| !(lo[k] <= hi[k])) {
            return Err(SmpError::InvalidParameter(format!(
                "box bound lo[{k}] = {} exceeds hi[{k}] = {}",
                lo[k], hi[k]
            )));
        }
        Ok(Self::Box { lo, hi })
    }

    pub fn uniform_box(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::boxed(vec![lo; dim], vec![hi; dim])
    }

    /// Euclidean projection onto `U`.
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        match self {
            Self::Unconstrained => u.to_vec(),
            Self::Box { lo, hi } => u
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(v, (l, h))| v.clamp(*l, *h))
                .collect(),
        }
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        match self {
            Self::Unconstrained => u.iter().all(|v| v.is_finite()),
            Self::Box { lo, hi } => u
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol),
        }
    }

    pub fn is_unconstrained(&self) -> bool {
        matches!(self, Self::Unconstrained)
    }
}

/// The controlled evolution problem on a spectral truncation.
///
/// Implementations must be pure; all maps are evaluated concurrently from
/// many paths.
pub trait ProblemSpec: Send + Sync {
    fn name(&self) -> &str;
    fn n_state(&self) -> usize;
    fn n_control(&self) -> usize;
    fn n_noise(&self) -> usize;
    fn initial_state(&self) -> &DVector<f64>;
    fn admissible(&self) -> &AdmissibleSet;

    fn drift(&self, x: &[f64], u: &[f64]) -> DVector<f64>;
    fn diffusion(&self, x: &[f64], u: &[f64]) -> DMatrix<f64>;
    fn running_cost(&self, x: &[f64], u: &[f64]) -> f64;
    fn terminal_cost(&self, x: &[f64]) -> f64;

    fn drift_dx(&self, x: &[f64], u: &[f64]) -> DMatrix<f64>;
    fn drift_du(&self, x: &[f64], u: &[f64]) -> DMatrix<f64>;
    fn diffusion_dx(&self, x: &[f64], u: &[f64]) -> DMatrix<f64>;
    fn diffusion_du(&self, x: &[f64], u: &[f64]) -> DMatrix<f64>;
    fn running_cost_dx(&self, x: &[f64], u: &[f64]) -> DVector<f64>;
    fn running_cost_du(&self, x: &[f64], u: &[f64]) -> DVector<f64>;
    fn terminal_grad(&self, x: &[f64]) -> DVector<f64>;

    /// The linear-quadratic structure, when the problem has it.
    fn as_lq(&self) -> Option<&LqSpec> {
        None
    }

    fn project(&self, u: &[f64]) -> Vec<f64> {
        self.admissible().project(u)
    }
}

/// Checks that a spec's dimensions agree with the Galerkin space.
pub fn check_dims(spec: &dyn ProblemSpec, space: &GalerkinSpace) -> Result<()> {
    check_len("state dimension", space.n_state(), spec.n_state())?;
    check_len("control dimension", space.n_control(), spec.n_control())?;
    check_len("noise dimension", space.n_noise(), spec.n_noise())?;
    check_len("initial state", spec.n_state(), spec.initial_state().len())
}

/// Terminal cost of an LQ problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LqTerminal {
    /// `φ(x) = ⟨ρ, x⟩`.
    Linear { rho: Vec<f64> },
    /// `φ(x) = ½|x|² + ⟨ρ, x⟩`.
    Quadratic { rho: Vec<f64> },
}

impl LqTerminal {
    pub fn rho(&self) -> &[f64] {
        match self {
            Self::Linear { rho } | Self::Quadratic { rho } => rho,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Self::Linear { .. })
    }
}

/// `dX = (AX + Bν) dt + (Dν) dW`, running cost `|ν|²`.
#[derive(Clone, Debug)]
pub struct LqSpec {
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    terminal: LqTerminal,
    x0: DVector<f64>,
    admissible: AdmissibleSet,
    n_noise: usize,
}

impl LqSpec {
    /// `b` is `n_state × n_control`; `d` is the matrix of `ν ↦ vec(Dν)`,
    /// shaped `(n_state·n_noise) × n_control`.
    pub fn new(
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        n_noise: usize,
        terminal: LqTerminal,
        x0: Vec<f64>,
        admissible: AdmissibleSet,
    ) -> Result<Self> {
        let n_state = b.nrows();
        let n_control = b.ncols();
        check_len("D rows", n_state * n_noise, d.nrows())?;
        check_len("D columns", n_control, d.ncols())?;
        check_len("rho", n_state, terminal.rho().len())?;
        check_len("x0", n_state, x0.len())?;
        if let AdmissibleSet::Box { lo, .. } = &admissible {
            check_len("box bounds", n_control, lo.len())?;
        }
        Ok(Self {
            b,
            d,
            terminal,
            x0: DVector::from_vec(x0),
            admissible,
            n_noise,
        })
    }

    /// The concrete half-Laplacian instance: `B` the identity (rectangular
    /// when the control and state dimensions differ) and
    /// `Dν = ⟨ν, h⟩ Q^{1/2}` with `Q = diag(q)` truncated to the retained modes.
    pub fn identity_control(
        space: &GalerkinSpace,
        h: &[f64],
        q: &[f64],
        terminal: LqTerminal,
        x0: Vec<f64>,
        admissible: AdmissibleSet,
    ) -> Result<Self> {
        let (ns, nc, nw) = (space.n_state(), space.n_control(), space.n_noise());
        check_len("h", nc, h.len())?;
        check_len("q", nw, q.len())?;
        if q.iter().any(|v| !(*v > 0.0)) {
            return Err(SmpError::InvalidParameter(
                "covariance eigenvalues q must be positive".into(),
            ));
        }
        let b = DMatrix::from_fn(ns, nc, |k, j| if k == j { 1.0 } else { 0.0 });
        let mut d = DMatrix::zeros(ns * nw, nc);
        for k in 0..ns.min(nw) {
            for j in 0..nc {
                d[(k + k * ns, j)] = h[j] * q[k].sqrt();
            }
        }
        Self::new(b, d, nw, terminal, x0, admissible)
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn terminal(&self) -> &LqTerminal {
        &self.terminal
    }

    pub fn with_terminal(mut self, terminal: LqTerminal) -> Result<Self> {
        check_len("rho", self.b.nrows(), terminal.rho().len())?;
        self.terminal = terminal;
        Ok(self)
    }

    pub fn with_admissible(mut self, admissible: AdmissibleSet) -> Self {
        self.admissible = admissible;
        self
    }

    /// `D* z` for an `n_state × n_noise` matrix `z`.
    pub fn d_adjoint(&self, z: &DMatrix<f64>) -> DVector<f64> {
        let zv = DVector::from_column_slice(z.as_slice());
        self.d.tr_mul(&zv)
    }
}

impl ProblemSpec for LqSpec {
    fn name(&self) -> &str {
        "lq"
    }

    fn n_state(&self) -> usize {
        self.b.nrows()
    }

    fn n_control(&self) -> usize {
        self.b.ncols()
    }

    fn n_noise(&self) -> usize {
        self.n_noise
    }

    fn initial_state(&self) -> &DVector<f64> {
        &self.x0
    }

    fn admissible(&self) -> &AdmissibleSet {
        &self.admissible
    }

    fn drift(&self, _x: &[f64], u: &[f64]) -> DVector<f64> {
        &self.b * DVector::from_column_slice(u)
    }

    fn diffusion(&self, _x: &[f64], u: &[f64]) -> DMatrix<f64> {
        let v = &self.d * DVector::from_column_slice(u);
        DMatrix::from_column_slice(self.n_state(), self.n_noise, v.as_slice())
    }

    fn running_cost(&self, _x: &[f64], u: &[f64]) -> f64 {
        u.iter().map(|v| v * v).sum()
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.terminal.rho().iter().zip(x).map(|(r, v)| r * v).sum();
        match self.terminal {
            LqTerminal::Linear { .. } => lin,
            LqTerminal::Quadratic { .. } => lin + 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
        }
    }

    fn drift_dx(&self, _x: &[f64], _u: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.n_state(), self.n_state())
    }

    fn drift_du(&self, _x: &[f64], _u: &[f64]) -> DMatrix<f64> {
        self.b.clone()
    }

    fn diffusion_dx(&self, _x: &[f64], _u: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.n_state() * self.n_noise, self.n_state())
    }

    fn diffusion_du(&self, _x: &[f64], _u: &[f64]) -> DMatrix<f64> {
        self.d.clone()
    }

    fn running_cost_dx(&self, _x: &[f64], _u: &[f64]) -> DVector<f64> {
        DVector::zeros(self.n_state())
    }

    fn running_cost_du(&self, _x: &[f64], u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(u.len(), u.iter().map(|v| 2.0 * v))
    }

    fn terminal_grad(&self, x: &[f64]) -> DVector<f64> {
        let rho = DVector::from_column_slice(self.terminal.rho());
        match self.terminal {
            LqTerminal::Linear { .. } => rho,
            LqTerminal::Quadratic { .. } => rho + DVector::from_column_slice(x),
        }
    }

    fn as_lq(&self) -> Option<&LqSpec> {
        Some(self)
    }
}

/// Nonlinear scenario with bounded derivatives:
///
/// * `b(x, ν) = α tanh(x) + Bν`
/// * `σ(x, ν)[k, k] = √q_k (s₀ + β tanh(x_k) + ⟨ν, h⟩)`, zero off the diagonal
/// * `ℓ(x, ν) = |ν|² + c Σ log cosh(x_k)`
/// * `φ(x) = ½κ|x|² + ⟨ρ, x⟩`
#[derive(Clone, Debug)]
pub struct TanhDriftSpec {
    pub alpha: f64,
    pub b: DMatrix<f64>,
    pub s0: f64,
    pub beta: f64,
    pub q: Vec<f64>,
    pub h: Vec<f64>,
    pub cost_weight: f64,
    pub kappa: f64,
    pub rho: Vec<f64>,
    x0: DVector<f64>,
    admissible: AdmissibleSet,
    n_noise: usize,
}

impl TanhDriftSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        space: &GalerkinSpace,
        alpha: f64,
        s0: f64,
        beta: f64,
        q: Vec<f64>,
        h: Vec<f64>,
        cost_weight: f64,
        kappa: f64,
        rho: Vec<f64>,
        x0: Vec<f64>,
        admissible: AdmissibleSet,
    ) -> Result<Self> {
        let (ns, nc, nw) = (space.n_state(), space.n_control(), space.n_noise());
        check_len("q", nw, q.len())?;
        check_len("h", nc, h.len())?;
        check_len("rho", ns, rho.len())?;
        check_len("x0", ns, x0.len())?;
        let b = DMatrix::from_fn(ns, nc, |k, j| if k == j { 1.0 } else { 0.0 });
        Ok(Self {
            alpha,
            b,
            s0,
            beta,
            q,
            h,
            cost_weight,
            kappa,
            rho,
            x0: DVector::from_vec(x0),
            admissible,
            n_noise: nw,
        })
    }

    fn diag_len(&self) -> usize {
        self.n_state().min(self.n_noise)
    }

    fn control_load(&self, u: &[f64]) -> f64 {
        self.h.iter().zip(u).map(|(a, b)| a * b).sum()
    }
}

fn sech2(v: f64) -> f64 {
    let c = v.cosh();
    1.0 / (c * c)
}

fn log_cosh(v: f64) -> f64 {
    // overflow-safe: log cosh v = |v| + log(1 + e^{-2|v|}) - log 2
    let a = v.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

impl ProblemSpec for TanhDriftSpec {
    fn name(&self) -> &str {
        "tanh-drift"
    }

    fn n_state(&self) -> usize {
        self.b.nrows()
    }

    fn n_control(&self) -> usize {
        self.b.ncols()
    }

    fn n_noise(&self) -> usize {
        self.n_noise
    }

    fn initial_state(&self) -> &DVector<f64> {
        &self.x0
    }

    fn admissible(&self) -> &AdmissibleSet {
        &self.admissible
    }

    fn drift(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        let mut out = &self.b * DVector::from_column_slice(u);
        for (o, v) in out.iter_mut().zip(x) {
            *o += self.alpha * v.tanh();
        }
        out
    }

    fn diffusion(&self, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        let load = self.control_load(u);
        let mut s = DMatrix::zeros(self.n_state(), self.n_noise);
        for k in 0..self.diag_len() {
            s[(k, k)] = self.q[k].sqrt() * (self.s0 + self.beta * x[k].tanh() + load);
        }
        s
    }

    fn running_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        u.iter().map(|v| v * v).sum::<f64>() + self.cost_weight * x.iter().map(|v| log_cosh(*v)).sum::<f64>()
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        0.5 * self.kappa * x.iter().map(|v| v * v).sum::<f64>()
            + self.rho.iter().zip(x).map(|(r, v)| r * v).sum::<f64>()
    }

    fn drift_dx(&self, x: &[f64], _u: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            x.len(),
            x.iter().map(|v| self.alpha * sech2(*v)),
        ))
    }

    fn drift_du(&self, _x: &[f64], _u: &[f64]) -> DMatrix<f64> {
        self.b.clone()
    }

    fn diffusion_dx(&self, x: &[f64], _u: &[f64]) -> DMatrix<f64> {
        let ns = self.n_state();
        let mut m = DMatrix::zeros(ns * self.n_noise, ns);
        for k in 0..self.diag_len() {
            m[(k + k * ns, k)] = self.q[k].sqrt() * self.beta * sech2(x[k]);
        }
        m
    }

    fn diffusion_du(&self, _x: &[f64], _u: &[f64]) -> DMatrix<f64> {
        let ns = self.n_state();
        let mut m = DMatrix::zeros(ns * self.n_noise, self.n_control());
        for k in 0..self.diag_len() {
            for (j, hj) in self.h.iter().enumerate() {
                m[(k + k * ns, j)] = self.q[k].sqrt() * hj;
            }
        }
        m
    }

    fn running_cost_dx(&self, x: &[f64], _u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(x.len(), x.iter().map(|v| self.cost_weight * v.tanh()))
    }

    fn running_cost_du(&self, _x: &[f64], u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(u.len(), u.iter().map(|v| 2.0 * v))
    }

    fn terminal_grad(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(x.len(), x.iter().zip(&self.rho).map(|(v, r)| self.kappa * v + r))
    }
}

/// Injected faults for measuring the power of the verification checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// `σ_ν` reported as zero.
    DropSigmaNuTerm,
    /// `b_x` reported at twice its value.
    DoubleDriftJacobian,
}

impl Mutation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "drop-sigma-nu-term" => Ok(Self::DropSigmaNuTerm),
            "double-drift-jacobian" => Ok(Self::DoubleDriftJacobian),
            other => Err(SmpError::Config(format!(
                "unknown mutation '{other}' (expected drop-sigma-nu-term or double-drift-jacobian)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::DropSigmaNuTerm => "drop-sigma-nu-term",
            Self::DoubleDriftJacobian => "double-drift-jacobian",
        }
    }
}

/// A problem whose base maps are intact but one declared derivative is wrong.
#[derive(Clone)]
pub struct MutantSpec {
    inner: Arc<dyn ProblemSpec>,
    mutation: Mutation,
}

impl MutantSpec {
    pub fn new(inner: Arc<dyn ProblemSpec>, mutation: Mutation) -> Self {
        Self { inner, mutation }
    }
}

impl ProblemSpec for MutantSpec {
    fn name(&self) -> &str {
        self.mutation.name()
    }
    fn n_state(&self) -> usize {
        self.inner.n_state()
    }
    fn n_control(&self) -> usize {
        self.inner.n_control()
    }
    fn n_noise(&self) -> usize {
        self.inner.n_noise()
    }
    fn initial_state(&self) -> &DVector<f64> {
        self.inner.initial_state()
    }
    fn admissible(&self) -> &AdmissibleSet {
        self.inner.admissible()
    }
    fn drift(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        self.inner.drift(x, u)
    }
    fn diffusion(&self, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        self.inner.diffusion(x, u)
    }
    fn running_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        self.inner.running_cost(x, u)
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.inner.terminal_cost(x)
    }
    fn drift_dx(&self, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        let m = self.inner.drift_dx(x, u);
        match self.mutation {
            Mutation::DoubleDriftJacobian => m * 2.0,
            _ => m,
        }
    }
    fn drift_du(&self, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        self.inner.drift_du(x, u)
    }
    fn diffusion_dx(&self, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        self.inner.diffusion_dx(x, u)
    }
    fn diffusion_du(&self, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        let m = self.inner.diffusion_du(x, u);
        match self.mutation {
            Mutation::DropSigmaNuTerm => DMatrix::zeros(m.nrows(), m.ncols()),
            _ => m,
        }
    }
    fn running_cost_dx(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        self.inner.running_cost_dx(x, u)
    }
    fn running_cost_du(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        self.inner.running_cost_du(x, u)
    }
    fn terminal_grad(&self, x: &[f64]) -> DVector<f64> {
        self.inner.terminal_grad(x)
    }
}

/// Tolerance on the finite-difference self-test.
pub const DERIVATIVE_TOL: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DerivativeCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub n_samples: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub checks: Vec<DerivativeCheck>,
    pub pass: bool,
}

impl DerivativeReport {
    pub fn from_checks(n_samples: usize, seed: u64, raw: Vec<(String, f64)>) -> Self {
        let checks: Vec<_> = raw
            .into_iter()
            .map(|(name, err)| DerivativeCheck {
                pass: err <= DERIVATIVE_TOL,
                name,
                max_rel_error: err,
            })
            .collect();
        let pass = checks.iter().all(|c| c.pass);
        Self {
            n_samples,
            seed,
            tolerance: DERIVATIVE_TOL,
            checks,
            pass,
        }
    }

    pub fn failing(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.name.as_str())
            .collect()
    }
}

/// Random `(x, ν)` sample points around the initial state.
pub fn sample_points(spec: &dyn ProblemSpec, n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = spec.initial_state();
    (0..n)
        .map(|_| {
            let x = x0.iter().map(|c| c + rng.sample::<f64, _>(StandardNormal)).collect();
            let u = (0..spec.n_control())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            (x, u)
        })
        .collect()
}

/// Compares every declared derivative against central differences of its
/// base map at `n_samples` random points. Failures are reported, not raised.
pub fn derivative_selftest(spec: &dyn ProblemSpec, n_samples: usize, seed: u64) -> Result<DerivativeReport> {
    if n_samples == 0 {
        return Err(SmpError::InvalidParameter("n_samples must be positive".into()));
    }
    let names = ["b_x", "b_nu", "sigma_x", "sigma_nu", "l_x", "l_nu", "grad_phi"];
    let mut worst = [0.0_f64; 7];
    for (x, u) in sample_points(spec, n_samples, seed) {
        let pairs: [(DMatrix<f64>, DMatrix<f64>); 7] = [
            (
                spec.drift_dx(&x, &u),
                numdiff::jacobian(|xx| spec.drift(xx, &u).as_slice().to_vec(), &x),
            ),
            (
                spec.drift_du(&x, &u),
                numdiff::jacobian(|uu| spec.drift(&x, uu).as_slice().to_vec(), &u),
            ),
            (
                spec.diffusion_dx(&x, &u),
                numdiff::jacobian(|xx| spec.diffusion(xx, &u).as_slice().to_vec(), &x),
            ),
            (
                spec.diffusion_du(&x, &u),
                numdiff::jacobian(|uu| spec.diffusion(&x, uu).as_slice().to_vec(), &u),
            ),
            (
                as_row(spec.running_cost_dx(&x, &u)),
                numdiff::jacobian(|xx| vec![spec.running_cost(xx, &u)], &x),
            ),
            (
                as_row(spec.running_cost_du(&x, &u)),
                numdiff::jacobian(|uu| vec![spec.running_cost(&x, uu)], &u),
            ),
            (
                as_row(spec.terminal_grad(&x)),
                numdiff::jacobian(|xx| vec![spec.terminal_cost(xx)], &x),
            ),
        ];
        for (slot, (analytic, fd)) in worst.iter_mut().zip(pairs.iter()) {
            let err = if analytic.shape() != fd.shape() {
                f64::INFINITY
            } else {
                numdiff::mixed_rel_error(analytic.as_slice(), fd.as_slice())
            };
            *slot = slot.max(err);
        }
    }
    let raw = names.iter().zip(worst).map(|(n, e)| (n.to_string(), e)).collect();
    Ok(DerivativeReport::from_checks(n_samples, seed, raw))
}

fn as_row(v: DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}
