//! The Hamiltonian `ℓ(x, ν) + ⟨b(x, ν), y⟩ + ⟨σ(x, ν), z⟩₂`, its gradients,
//! and the Monte Carlo cost functional.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};
use crate::forward::{ControlProcess, StateEnsemble};
use crate::galerkin::TimeGrid;
use crate::numdiff;
use crate::problem::{sample_points, DerivativeReport, ProblemSpec};
use crate::stats;

/// Arguments of the Hamiltonian. `z` is an `n_state × n_noise` matrix in
/// column-major order.
#[derive(Clone, Copy, Debug)]
pub struct HamiltonianInput<'a> {
    pub x: &'a [f64],
    pub nu: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
}

impl<'a> HamiltonianInput<'a> {
    pub fn new(x: &'a [f64], nu: &'a [f64], y: &'a [f64], z: &'a [f64]) -> Self {
        Self { x, nu, y, z }
    }

    pub fn check(&self, spec: &dyn ProblemSpec) -> Result<()> {
        check_len("hamiltonian x", spec.n_state(), self.x.len())?;
        check_len("hamiltonian nu", spec.n_control(), self.nu.len())?;
        check_len("hamiltonian y", spec.n_state(), self.y.len())?;
        check_len("hamiltonian z", spec.n_state() * spec.n_noise(), self.z.len())
    }
}

pub fn hamiltonian(spec: &dyn ProblemSpec, h: &HamiltonianInput) -> f64 {
    let b = spec.drift(h.x, h.nu);
    let s = spec.diffusion(h.x, h.nu);
    spec.running_cost(h.x, h.nu) + stats::dot(b.as_slice(), h.y) + stats::dot(s.as_slice(), h.z)
}

/// `ℓ_x + b_xᵀ y + σ_xᵀ z`.
pub fn grad_x_hamiltonian(spec: &dyn ProblemSpec, h: &HamiltonianInput) -> DVector<f64> {
    let y = DVector::from_column_slice(h.y);
    let z = DVector::from_column_slice(h.z);
    spec.running_cost_dx(h.x, h.nu) + spec.drift_dx(h.x, h.nu).tr_mul(&y) + spec.diffusion_dx(h.x, h.nu).tr_mul(&z)
}

/// `ℓ_ν + b_νᵀ y + σ_νᵀ z`.
pub fn grad_nu_hamiltonian(spec: &dyn ProblemSpec, h: &HamiltonianInput) -> DVector<f64> {
    let y = DVector::from_column_slice(h.y);
    let z = DVector::from_column_slice(h.z);
    spec.running_cost_du(h.x, h.nu) + spec.drift_du(h.x, h.nu).tr_mul(&y) + spec.diffusion_du(h.x, h.nu).tr_mul(&z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Per-path realized cost `Σ ℓ(X_i, ν_i) Δt + φ(X_N)` (left-point rule).
pub fn path_costs(
    spec: &dyn ProblemSpec,
    grid: &TimeGrid,
    ensemble: &StateEnsemble,
    control: &ControlProcess,
) -> Result<Vec<f64>> {
    control.check_shape(ensemble.n_paths(), grid.n_steps(), spec.n_control())?;
    check_len("ensemble steps", grid.n_steps(), ensemble.grid().n_steps())?;
    let dt = grid.dt();
    let n = grid.n_steps();
    Ok((0..ensemble.n_paths())
        .into_par_iter()
        .map(|p| {
            let running: f64 = (0..n)
                .map(|i| spec.running_cost(ensemble.state(p, i), control.value(p, i)))
                .sum();
            running * dt + spec.terminal_cost(ensemble.terminal(p))
        })
        .collect())
}

pub fn evaluate_cost(
    spec: &dyn ProblemSpec,
    grid: &TimeGrid,
    ensemble: &StateEnsemble,
    control: &ControlProcess,
) -> Result<CostEstimate> {
    let costs = path_costs(spec, grid, ensemble, control)?;
    let (mean, std_error) = stats::mean_se(&costs);
    Ok(CostEstimate { mean, std_error })
}

/// Finite-difference check of both Hamiltonian gradients at random
/// `(x, ν, y, z)`.
pub fn hamiltonian_selftest(spec: &dyn ProblemSpec, n_samples: usize, seed: u64) -> Result<DerivativeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4841_4d49);
    let (ns, nw) = (spec.n_state(), spec.n_noise());
    let mut worst = [0.0_f64; 2];
    for (x, u) in sample_points(spec, n_samples, seed) {
        let y: Vec<f64> = (0..ns).map(|_| rng.sample(StandardNormal)).collect();
        let z: Vec<f64> = (0..ns * nw).map(|_| rng.sample(StandardNormal)).collect();
        let h = HamiltonianInput::new(&x, &u, &y, &z);
        h.check(spec)?;
        let gx = grad_x_hamiltonian(spec, &h);
        let fx = numdiff::gradient(|xx| hamiltonian(spec, &HamiltonianInput { x: xx, ..h }), &x);
        worst[0] = worst[0].max(numdiff::mixed_rel_error(gx.as_slice(), &fx));
        let gu = grad_nu_hamiltonian(spec, &h);
        let fu = numdiff::gradient(|uu| hamiltonian(spec, &HamiltonianInput { nu: uu, ..h }), &u);
        worst[1] = worst[1].max(numdiff::mixed_rel_error(gu.as_slice(), &fu));
    }
    Ok(DerivativeReport::from_checks(
        n_samples,
        seed,
        vec![
            ("grad_x_hamiltonian".into(), worst[0]),
            ("grad_nu_hamiltonian".into(), worst[1]),
        ],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::integrate_forward;
    use crate::galerkin::{GalerkinSpace, NoiseEnsemble};
    use crate::problem::{AdmissibleSet, LqSpec, LqTerminal, TanhDriftSpec};
    use proptest::{prop_assert, proptest};

    fn lq(ns: usize) -> (GalerkinSpace, LqSpec) {
        let space = GalerkinSpace::half_laplacian(ns, ns, ns).unwrap();
        let inv: Vec<f64> = (1..=ns).map(|k| 1.0 / k as f64).collect();
        let q: Vec<f64> = inv.iter().map(|v| v * v).collect();
        let spec = LqSpec::identity_control(
            &space,
            &inv,
            &q,
            LqTerminal::Linear { rho: inv.clone() },
            inv.clone(),
            AdmissibleSet::Unconstrained,
        )
        .unwrap();
        (space, spec)
    }

    fn tanh(ns: usize) -> TanhDriftSpec {
        let space = GalerkinSpace::half_laplacian(ns, ns, ns).unwrap();
        let inv: Vec<f64> = (1..=ns).map(|k| 1.0 / k as f64).collect();
        let q: Vec<f64> = inv.iter().map(|v| v * v).collect();
        TanhDriftSpec::new(
            &space,
            1.0,
            0.5,
            0.3,
            q,
            inv.clone(),
            0.5,
            1.0,
            inv.clone(),
            inv,
            AdmissibleSet::Unconstrained,
        )
        .unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn zero_arguments_give_zero() {
        let (_, spec) = lq(3);
        let zero3 = [0.0; 3];
        let zero9 = [0.0; 9];
        let h = HamiltonianInput::new(&zero3, &zero3, &zero3, &zero9);
        assert_eq!(hamiltonian(&spec, &h), 0.0);
    }

    #[test]
    fn lq_hamiltonian_against_direct_inner_products() {
        let (_, spec) = lq(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = random_vec(&mut rng, 3);
            let u = random_vec(&mut rng, 3);
            let y = random_vec(&mut rng, 3);
            let z = random_vec(&mut rng, 9);
            // direct: |ν|² + Σ_k ν_k y_k + ⟨ν,h⟩ Σ_k √q_k z[k,k], with h_k = √q_k = 1/k
            let load: f64 = (0..3).map(|j| u[j] / (j + 1) as f64).sum();
            let direct = u.iter().map(|v| v * v).sum::<f64>()
                + (0..3).map(|k| u[k] * y[k]).sum::<f64>()
                + load * (0..3).map(|k| z[k + 3 * k] / (k + 1) as f64).sum::<f64>();
            let h = HamiltonianInput::new(&x, &u, &y, &z);
            assert!((hamiltonian(&spec, &h) - direct).abs() < 1e-12);

            // ∇_ν = 2ν + Bᵀy + Dᵀz
            let g = grad_nu_hamiltonian(&spec, &h);
            let dz: f64 = (0..3).map(|k| z[k + 3 * k] / (k + 1) as f64).sum();
            for j in 0..3 {
                let expect = 2.0 * u[j] + y[j] + dz / (j + 1) as f64;
                assert!((g[j] - expect).abs() < 1e-12);
            }
            assert!(grad_x_hamiltonian(&spec, &h).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn cost_only_reductions() {
        let spec = tanh(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_vec(&mut rng, 3);
        let u = random_vec(&mut rng, 3);
        let (y, z) = ([0.0; 3], [0.0; 9]);
        let h = HamiltonianInput::new(&x, &u, &y, &z);
        assert_eq!(hamiltonian(&spec, &h), spec.running_cost(&x, &u));
        assert_eq!(grad_x_hamiltonian(&spec, &h), spec.running_cost_dx(&x, &u));
    }

    #[test]
    fn stationary_point_of_lq_hamiltonian() {
        // the minimizer -½(Bᵀy + Dᵀz) has zero gradient
        let (_, spec) = lq(3);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_vec(&mut rng, 3);
        let y = random_vec(&mut rng, 3);
        let z = random_vec(&mut rng, 9);
        let zero = [0.0; 3];
        let lin = grad_nu_hamiltonian(&spec, &HamiltonianInput::new(&x, &zero, &y, &z));
        let u: Vec<f64> = lin.iter().map(|v| -0.5 * v).collect();
        let g = grad_nu_hamiltonian(&spec, &HamiltonianInput::new(&x, &u, &y, &z));
        assert!(g.norm() <= 1e-8);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (_, lq3) = lq(3);
        for spec in [&tanh(4) as &dyn ProblemSpec, &lq3] {
            let report = hamiltonian_selftest(spec, 100, 5).unwrap();
            assert!(report.pass, "{:?}", report.checks);
        }
    }

    #[test]
    fn deterministic_cost_values() {
        let (space, spec) = lq(2);
        let spec = spec.with_terminal(LqTerminal::Linear { rho: vec![0.0, 0.0] }).unwrap();
        let grid = TimeGrid::new(2.0, 10).unwrap();
        let noise = NoiseEnsemble::sample(&space, &grid, 50, 1).unwrap();
        let zero = ControlProcess::zeros(&grid, 2);
        let x = integrate_forward(&spec, &space, &grid, &zero, &noise).unwrap();
        let c = evaluate_cost(&spec, &grid, &x, &zero).unwrap();
        assert_eq!((c.mean, c.std_error), (0.0, 0.0));

        let u = ControlProcess::constant(&grid, &[0.5, -1.0]);
        let x = integrate_forward(&spec, &space, &grid, &u, &noise).unwrap();
        let c = evaluate_cost(&spec, &grid, &x, &u).unwrap();
        assert!((c.mean - 2.0 * 1.25).abs() < 1e-13);
        assert_eq!(c.std_error, 0.0);
    }

    #[test]
    fn zero_variance_without_noise_coefficient() {
        let space = GalerkinSpace::half_laplacian(2, 2, 2).unwrap();
        let spec = TanhDriftSpec::new(
            &space,
            1.0,
            0.0,
            0.0,
            vec![1.0, 0.25],
            vec![0.0, 0.0],
            0.5,
            1.0,
            vec![1.0, 0.5],
            vec![1.0, -1.0],
            AdmissibleSet::Unconstrained,
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let noise = NoiseEnsemble::sample(&space, &grid, 40, 1).unwrap();
        let u = ControlProcess::constant(&grid, &[0.2, 0.1]);
        let x = integrate_forward(&spec, &space, &grid, &u, &noise).unwrap();
        assert_eq!(evaluate_cost(&spec, &grid, &x, &u).unwrap().std_error, 0.0);
    }

    proptest! {
        #[test]
        fn affine_in_adjoint_arguments(
            seed in 0u64..1000,
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let spec = tanh(3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_vec(&mut rng, 3);
            let u = random_vec(&mut rng, 3);
            let (y1, y2) = (random_vec(&mut rng, 3), random_vec(&mut rng, 3));
            let (z1, z2) = (random_vec(&mut rng, 9), random_vec(&mut rng, 9));
            let y: Vec<f64> = y1.iter().zip(&y2).map(|(p, q)| a * p + b * q).collect();
            let z: Vec<f64> = z1.iter().zip(&z2).map(|(p, q)| a * p + b * q).collect();
            let lhs = hamiltonian(&spec, &HamiltonianInput::new(&x, &u, &y, &z));
            let rhs = a * hamiltonian(&spec, &HamiltonianInput::new(&x, &u, &y1, &z1))
                + b * hamiltonian(&spec, &HamiltonianInput::new(&x, &u, &y2, &z2))
                - (a + b - 1.0) * spec.running_cost(&x, &u);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
