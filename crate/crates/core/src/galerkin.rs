//! Spectral truncation of the state space, the time grid, and the
//! truncated cylindrical Wiener noise.
//!
//! The generator is represented by its eigenvalues on the retained basis, so
//! the semigroup acts diagonally and is its own adjoint.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Result, SmpError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalerkinSpace {
    n_state: usize,
    n_control: usize,
    n_noise: usize,
    eigenvalues: Vec<f64>,
}

impl GalerkinSpace {
    pub fn new(n_control: usize, n_noise: usize, eigenvalues: Vec<f64>) -> Result<Self> {
        let n_state = eigenvalues.len();
        if n_state == 0 || n_control == 0 || n_noise == 0 {
            return Err(SmpError::InvalidParameter(format!(
                "all dimensions must be positive (state {n_state}, control {n_control}, noise {n_noise})"
            )));
        }
        if let Some(bad) = eigenvalues.iter().find(|l| !l.is_finite()) {
            return Err(SmpError::InvalidParameter(format!("eigenvalue {bad} is not finite")));
        }
        Ok(Self {
            n_state,
            n_control,
            n_noise,
            eigenvalues,
        })
    }

    /// Fourier truncation of the half-Laplacian: `λ_k = -k²/2`, `k = 1..=n_state`.
    pub fn half_laplacian(n_state: usize, n_control: usize, n_noise: usize) -> Result<Self> {
        let eig = (1..=n_state).map(|k| -0.5 * (k * k) as f64).collect();
        Self::new(n_control, n_noise, eig)
    }

    pub fn n_state(&self) -> usize {
        self.n_state
    }

    pub fn n_control(&self) -> usize {
        self.n_control
    }

    pub fn n_noise(&self) -> usize {
        self.n_noise
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Diagonal of `S(t)`.
    pub fn semigroup_diag(&self, t: f64) -> Result<Vec<f64>> {
        if !(t >= 0.0) {
            return Err(SmpError::NegativeTime(t));
        }
        Ok(self.eigenvalues.iter().map(|l| (l * t).exp()).collect())
    }

    /// `S(t) v`. Because the truncated generator is diagonal and self-adjoint
    /// this is also `S*(t) v`.
    pub fn semigroup_apply(&self, t: f64, v: &[f64]) -> Result<DVector<f64>> {
        check_len("semigroup_apply", self.n_state, v.len())?;
        let diag = self.semigroup_diag(t)?;
        Ok(DVector::from_iterator(
            self.n_state,
            diag.iter().zip(v).map(|(d, x)| d * x),
        ))
    }

    pub fn adjoint_semigroup_apply(&self, t: f64, v: &[f64]) -> Result<DVector<f64>> {
        self.semigroup_apply(t, v)
    }
}

/// Uniform grid `t_i = i T / N` on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(SmpError::InvalidParameter(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(SmpError::InvalidParameter("n_steps must be positive".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.horizon / self.n_steps as f64
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.t(i)).collect()
    }

    /// Grid with `factor` times as many steps over the same horizon.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.horizon, self.n_steps * factor)
    }
}

/// Gaussian increments `ΔW` indexed by (path, step, mode), each with
/// variance `Δt`.
///
/// Increments are drawn from a counter-based stream: the ChaCha key is the
/// seed, the stream id is the path, and each step owns a disjoint block of
/// the keystream. Any (path, step) cell can therefore be regenerated without
/// touching the others, and the ensemble does not depend on how paths are
/// scheduled across threads.
#[derive(Clone, Debug)]
pub struct NoiseEnsemble {
    seed: u64,
    n_paths: usize,
    n_steps: usize,
    n_noise: usize,
    dt: f64,
    increments: Vec<f64>,
    fingerprint: String,
}

const STEP_BLOCK_SHIFT: u32 = 32;

fn cell_rng(seed: u64, path: usize, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng.set_word_pos((step as u128) << STEP_BLOCK_SHIFT);
    rng
}

impl NoiseEnsemble {
    pub fn sample(space: &GalerkinSpace, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<Self> {
        if n_paths == 0 {
            return Err(SmpError::InvalidParameter("n_paths must be positive".into()));
        }
        let n_steps = grid.n_steps();
        let n_noise = space.n_noise();
        let dt = grid.dt();
        let sd = dt.sqrt();
        let per_path = n_steps * n_noise;
        let mut increments = vec![0.0; n_paths * per_path];
        increments
            .par_chunks_mut(per_path)
            .enumerate()
            .for_each(|(path, chunk)| {
                for (step, cell) in chunk.chunks_mut(n_noise).enumerate() {
                    let mut rng = cell_rng(seed, path, step);
                    for w in cell.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *w = sd * z;
                    }
                }
            });
        Ok(Self::assemble(seed, n_paths, n_steps, n_noise, dt, increments))
    }

    /// Ensemble with every increment zero; integrating against it yields the
    /// noiseless (mean-field for linear data) trajectory.
    pub fn zeros(space: &GalerkinSpace, grid: &TimeGrid, n_paths: usize) -> Result<Self> {
        if n_paths == 0 {
            return Err(SmpError::InvalidParameter("n_paths must be positive".into()));
        }
        let len = n_paths * grid.n_steps() * space.n_noise();
        Ok(Self::assemble(
            0,
            n_paths,
            grid.n_steps(),
            space.n_noise(),
            grid.dt(),
            vec![0.0; len],
        ))
    }

    pub fn from_increments(
        seed: u64,
        n_paths: usize,
        grid: &TimeGrid,
        n_noise: usize,
        increments: Vec<f64>,
    ) -> Result<Self> {
        check_len("noise increments", n_paths * grid.n_steps() * n_noise, increments.len())?;
        Ok(Self::assemble(
            seed,
            n_paths,
            grid.n_steps(),
            n_noise,
            grid.dt(),
            increments,
        ))
    }

    fn assemble(seed: u64, n_paths: usize, n_steps: usize, n_noise: usize, dt: f64, increments: Vec<f64>) -> Self {
        let fingerprint = fingerprint(seed, n_paths, n_steps, n_noise, dt, &increments);
        Self {
            seed,
            n_paths,
            n_steps,
            n_noise,
            dt,
            increments,
            fingerprint,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_noise(&self) -> usize {
        self.n_noise
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Content hash of the increments; equal fingerprints mean the same
    /// random numbers were consumed.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let start = (path * self.n_steps + step) * self.n_noise;
        &self.increments[start..start + self.n_noise]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.increments
    }

    /// The reflected ensemble `-ΔW`.
    pub fn negated(&self) -> Self {
        let inc = self.increments.iter().map(|w| -w).collect();
        Self::assemble(self.seed, self.n_paths, self.n_steps, self.n_noise, self.dt, inc)
    }

    /// Sums blocks of `factor` consecutive increments, giving the same
    /// Brownian paths observed on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(SmpError::InvalidParameter(format!(
                "cannot coarsen {} steps by factor {factor}",
                self.n_steps
            )));
        }
        let coarse_steps = self.n_steps / factor;
        let mut inc = vec![0.0; self.n_paths * coarse_steps * self.n_noise];
        for p in 0..self.n_paths {
            for i in 0..self.n_steps {
                let ci = i / factor;
                let src = self.increment(p, i);
                let start = (p * coarse_steps + ci) * self.n_noise;
                for (dst, w) in inc[start..start + self.n_noise].iter_mut().zip(src) {
                    *dst += w;
                }
            }
        }
        Ok(Self::assemble(
            self.seed,
            self.n_paths,
            coarse_steps,
            self.n_noise,
            self.dt * factor as f64,
            inc,
        ))
    }

    /// Keeps this ensemble's increments for steps `< from_step` and takes
    /// `other`'s for the rest.
    pub fn with_future_from(&self, other: &Self, from_step: usize) -> Result<Self> {
        check_len("splice paths", self.n_paths, other.n_paths)?;
        check_len("splice steps", self.n_steps, other.n_steps)?;
        check_len("splice modes", self.n_noise, other.n_noise)?;
        let mut inc = self.increments.clone();
        for p in 0..self.n_paths {
            for i in from_step..self.n_steps {
                let start = (p * self.n_steps + i) * self.n_noise;
                inc[start..start + self.n_noise].copy_from_slice(other.increment(p, i));
            }
        }
        Ok(Self::assemble(
            self.seed,
            self.n_paths,
            self.n_steps,
            self.n_noise,
            self.dt,
            inc,
        ))
    }

    /// Per-mode sample mean and (unbiased) variance at one step.
    pub fn mode_moments(&self, step: usize, mode: usize) -> (f64, f64) {
        let n = self.n_paths as f64;
        let mean = (0..self.n_paths).map(|p| self.increment(p, step)[mode]).sum::<f64>() / n;
        let var = (0..self.n_paths)
            .map(|p| (self.increment(p, step)[mode] - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0).max(1.0);
        (mean, var)
    }
}

fn fingerprint(seed: u64, n_paths: usize, n_steps: usize, n_noise: usize, dt: f64, increments: &[f64]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((n_paths as u64).to_le_bytes());
    hasher.update((n_steps as u64).to_le_bytes());
    hasher.update((n_noise as u64).to_le_bytes());
    hasher.update(dt.to_le_bytes());
    for w in increments {
        hasher.update(w.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn semigroup_at_zero_is_identity() {
        let space = GalerkinSpace::new(1, 1, vec![-1.0, -2.0, 3.5]).unwrap();
        let v = [0.3, -1.2, 7.0];
        let out = space.semigroup_apply(0.0, &v).unwrap();
        assert_eq!(out.as_slice(), &v);
    }

    #[test]
    fn semigroup_matches_scalar_exponentials() {
        let space = GalerkinSpace::new(1, 1, vec![-1.0, -2.0]).unwrap();
        let out = space.semigroup_apply(1.0, &[1.0, 1.0]).unwrap();
        assert_relative_eq!(out[0], 0.367_879_441_171_442_3, epsilon = 1e-15);
        assert_relative_eq!(out[1], 0.135_335_283_236_612_7, epsilon = 1e-15);
    }

    #[test]
    fn semigroup_of_zero_is_zero() {
        let space = GalerkinSpace::half_laplacian(4, 1, 1).unwrap();
        for t in [0.0, 0.1, 5.0] {
            let out = space.semigroup_apply(t, &[0.0; 4]).unwrap();
            assert!(out.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn semigroup_rejects_bad_input() {
        let space = GalerkinSpace::half_laplacian(2, 1, 1).unwrap();
        assert!(matches!(
            space.semigroup_apply(-0.1, &[1.0, 1.0]),
            Err(SmpError::NegativeTime(_))
        ));
        assert!(matches!(
            space.semigroup_apply(0.1, &[1.0]),
            Err(SmpError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_dimensions_rejected() {
        assert!(GalerkinSpace::new(0, 1, vec![-1.0]).is_err());
        assert!(GalerkinSpace::new(1, 0, vec![-1.0]).is_err());
        assert!(GalerkinSpace::new(1, 1, vec![]).is_err());
        assert!(GalerkinSpace::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn grid_points() {
        let g = TimeGrid::new(2.0, 4).unwrap();
        assert_eq!(g.points(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(g.dt(), 0.5);
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(g.t(3), 1.0);
        assert!(g.points().windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn noise_is_reproducible() {
        let space = GalerkinSpace::half_laplacian(3, 1, 3).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let a = NoiseEnsemble::sample(&space, &grid, 50, 7).unwrap();
        let b = NoiseEnsemble::sample(&space, &grid, 50, 7).unwrap();
        let c = NoiseEnsemble::sample(&space, &grid, 50, 8).unwrap();
        let bits = |n: &NoiseEnsemble| n.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn noise_cells_are_independent_of_path_count() {
        // counter-based: path 3 is the same whether 5 or 40 paths are drawn
        let space = GalerkinSpace::half_laplacian(2, 1, 2).unwrap();
        let grid = TimeGrid::new(1.0, 6).unwrap();
        let small = NoiseEnsemble::sample(&space, &grid, 5, 99).unwrap();
        let large = NoiseEnsemble::sample(&space, &grid, 40, 99).unwrap();
        for i in 0..6 {
            assert_eq!(small.increment(3, i), large.increment(3, i));
        }
    }

    #[test]
    fn noise_identical_across_thread_counts() {
        let space = GalerkinSpace::half_laplacian(2, 1, 3).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| NoiseEnsemble::sample(&space, &grid, 300, 3).unwrap())
        };
        assert_eq!(run(1).fingerprint(), run(4).fingerprint());
    }

    #[test]
    fn noise_moments() {
        // 1e5 paths: the sample mean has sd sqrt(dt/1e5), so 5 sd is the bound.
        // The unbiased variance estimator has relative sd sqrt(2/(n-1)) ≈ 0.0045,
        // so a 5% band is more than 11 sd wide.
        let n = 100_000;
        let space = GalerkinSpace::half_laplacian(1, 1, 2).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let noise = NoiseEnsemble::sample(&space, &grid, n, 2024).unwrap();
        let dt = grid.dt();
        for step in 0..4 {
            for mode in 0..2 {
                let (mean, var) = noise.mode_moments(step, mode);
                assert!(mean.abs() < 5.0 * (dt / n as f64).sqrt(), "mean {mean}");
                assert!((var / dt - 1.0).abs() < 0.05, "var {var}");
            }
        }
    }

    #[test]
    fn modes_and_steps_uncorrelated() {
        let n = 40_000;
        let space = GalerkinSpace::half_laplacian(1, 1, 2).unwrap();
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let noise = NoiseEnsemble::sample(&space, &grid, n, 5).unwrap();
        let dt = grid.dt();
        let corr = |f: &dyn Fn(usize) -> (f64, f64)| {
            (0..n)
                .map(|p| {
                    let (a, b) = f(p);
                    a * b
                })
                .sum::<f64>()
                / (n as f64 * dt)
        };
        let across_modes = corr(&|p| (noise.increment(p, 0)[0], noise.increment(p, 0)[1]));
        let across_steps = corr(&|p| (noise.increment(p, 0)[0], noise.increment(p, 1)[0]));
        let across_paths = corr(&|p| (noise.increment(p, 0)[0], noise.increment((p + 1) % n, 0)[0]));
        // correlation estimates have sd 1/sqrt(n) = 0.005
        for c in [across_modes, across_steps, across_paths] {
            assert!(c.abs() < 0.025, "correlation {c}");
        }
    }

    #[test]
    fn brownian_scaling_of_summed_increments() {
        let n = 50_000;
        let space = GalerkinSpace::half_laplacian(1, 1, 1).unwrap();
        let grid = TimeGrid::new(2.0, 8).unwrap();
        let noise = NoiseEnsemble::sample(&space, &grid, n, 11).unwrap();
        let coarse = noise.coarsen(4).unwrap();
        assert_eq!(coarse.n_steps(), 2);
        for step in 0..2 {
            let (mean, var) = coarse.mode_moments(step, 0);
            let target = 4.0 * grid.dt();
            assert!(mean.abs() < 5.0 * (target / n as f64).sqrt());
            // relative sd of the variance estimate is sqrt(2/n) ≈ 0.0063
            assert!((var / target - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn splice_keeps_past() {
        let space = GalerkinSpace::half_laplacian(1, 1, 2).unwrap();
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let a = NoiseEnsemble::sample(&space, &grid, 4, 1).unwrap();
        let b = NoiseEnsemble::sample(&space, &grid, 4, 2).unwrap();
        let s = a.with_future_from(&b, 3).unwrap();
        for p in 0..4 {
            for i in 0..3 {
                assert_eq!(s.increment(p, i), a.increment(p, i));
            }
            for i in 3..5 {
                assert_eq!(s.increment(p, i), b.increment(p, i));
            }
        }
    }

    proptest! {
        #[test]
        fn semigroup_property(
            s in 0.0f64..2.0,
            t in 0.0f64..2.0,
            v in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            let space = GalerkinSpace::new(1, 1, vec![-0.5, -2.0, -4.5, 0.3]).unwrap();
            let lhs = space.semigroup_apply(s + t, &v).unwrap();
            let inner = space.semigroup_apply(t, &v).unwrap();
            let rhs = space.semigroup_apply(s, inner.as_slice()).unwrap();
            for k in 0..4 {
                prop_assert!((lhs[k] - rhs[k]).abs() <= 1e-13 * (1.0 + lhs[k].abs()));
            }
        }
    }
}
