//! Scenario configuration: a flat TOML file where every key is optional and
//! unknown keys are rejected, resolved against per-scenario defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adjoint::RegressionBasis;
use crate::error::{Result, SmpError};
use crate::galerkin::{GalerkinSpace, NoiseEnsemble, TimeGrid};
use crate::optimizer::{Armijo, OptimizerConfig};
use crate::problem::{AdmissibleSet, LqSpec, LqTerminal, ProblemSpec, TanhDriftSpec};
use crate::variational::{check_ladder, HarnessBands};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    LqLinearPhi,
    LqQuadraticPhi,
    TanhDrift,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [Self::LqLinearPhi, Self::LqQuadraticPhi, Self::TanhDrift];

    pub fn name(self) -> &'static str {
        match self {
            Self::LqLinearPhi => "lq-linear-phi",
            Self::LqQuadraticPhi => "lq-quadratic-phi",
            Self::TanhDrift => "tanh-drift",
        }
    }

    fn default_dim(self) -> usize {
        match self {
            Self::LqLinearPhi => 8,
            _ => 4,
        }
    }

    fn default_paths(self) -> usize {
        match self {
            Self::LqLinearPhi => 2000,
            _ => 1000,
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = SmpError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            SmpError::Config(format!(
                "field `scenario`: unknown scenario `{s}` (expected lq-linear-phi, lq-quadratic-phi or tanh-drift)"
            ))
        })
    }
}

/// Raw contents of a configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub scenario: Option<String>,
    pub n_state: Option<usize>,
    pub n_control: Option<usize>,
    pub n_noise: Option<usize>,
    pub horizon: Option<f64>,
    pub n_steps: Option<usize>,
    pub n_paths: Option<usize>,
    pub seed: Option<u64>,
    /// Replace the Brownian increments by zeros.
    pub zero_noise: Option<bool>,
    /// Multiplier `w` of the terminal weight `ρ_k = w/k`.
    pub terminal_weight: Option<f64>,
    /// Multiplier `s` of the control loading `h_j = s/j` of the noise.
    pub noise_amplitude: Option<f64>,
    pub control_lo: Option<f64>,
    pub control_hi: Option<f64>,
    pub regression_degree: Option<usize>,
    /// Number of leading modes used as regressors.
    pub regression_modes: Option<usize>,
    pub step_size: Option<f64>,
    pub max_iters: Option<usize>,
    pub grad_tol: Option<f64>,
    pub armijo: Option<bool>,
    pub armijo_factor: Option<f64>,
    pub armijo_slope: Option<f64>,
    pub armijo_backtracks: Option<usize>,
    pub epsilons: Option<Vec<f64>>,
    pub slope_lo: Option<f64>,
    pub slope_hi: Option<f64>,
    pub decay_factor: Option<f64>,
    pub n_sigma: Option<f64>,
    pub monotone_sigma: Option<f64>,
    pub remainder_factor: Option<f64>,
    pub exact_floor: Option<f64>,
    pub inequality_factor: Option<f64>,
    pub n_probes: Option<usize>,
    pub probe_radius: Option<f64>,
    /// Absolute certificate tolerance; default `1e-3 · |cost|`.
    pub certificate_tol: Option<f64>,
    pub selftest_samples: Option<usize>,
    pub out_dir: Option<String>,
    pub workers: Option<usize>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SmpError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| SmpError::Config(format!("{}: {e}", path.display())))?;
        let parsed = Self::parse(text).map_err(|e| SmpError::Config(format!("{}: {e}", path.display())))?;
        Ok((parsed, bytes))
    }
}

/// Fully resolved configuration. `out_dir` and `workers` do not affect
/// results and are left out of the serialized echo.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub n_state: usize,
    pub n_control: usize,
    pub n_noise: usize,
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub zero_noise: bool,
    pub terminal_weight: f64,
    pub noise_amplitude: f64,
    pub control_bounds: Option<(f64, f64)>,
    pub regression_degree: usize,
    pub regression_modes: usize,
    pub optimizer: OptimizerConfig,
    pub epsilons: Vec<f64>,
    pub bands: HarnessBands,
    pub n_probes: usize,
    pub probe_radius: f64,
    pub certificate_tol: Option<f64>,
    pub selftest_samples: usize,
    #[serde(skip)]
    pub out_dir: Option<String>,
    #[serde(skip)]
    pub workers: Option<usize>,
}

fn positive(field: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(SmpError::Config(format!("field `{field}`: must be positive, got {v}")))
    }
}

fn nonzero(field: &str, v: usize) -> Result<usize> {
    if v > 0 {
        Ok(v)
    } else {
        Err(SmpError::Config(format!("field `{field}`: must be at least 1")))
    }
}

fn finite(field: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(SmpError::Config(format!("field `{field}`: must be finite, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn resolve(file: &ConfigFile) -> Result<Self> {
        let scenario: ScenarioKind = file.scenario.as_deref().unwrap_or("lq-linear-phi").parse()?;
        let dim = scenario.default_dim();
        let n_state = nonzero("n_state", file.n_state.unwrap_or(dim))?;
        let n_control = nonzero("n_control", file.n_control.unwrap_or(n_state))?;
        let n_noise = nonzero("n_noise", file.n_noise.unwrap_or(n_state))?;
        let control_bounds = match (file.control_lo, file.control_hi) {
            (None, None) => None,
            (Some(lo), Some(hi)) if lo.is_finite() && hi.is_finite() && lo <= hi => Some((lo, hi)),
            (Some(_), Some(_)) => {
                return Err(SmpError::Config(
                    "fields `control_lo`/`control_hi`: need finite lo <= hi".into(),
                ))
            }
            _ => {
                return Err(SmpError::Config(
                    "fields `control_lo` and `control_hi` must be given together".into(),
                ))
            }
        };
        let d = OptimizerConfig::default();
        let a = Armijo::default();
        let armijo = if file.armijo.unwrap_or(true) {
            Some(Armijo {
                factor: file.armijo_factor.unwrap_or(a.factor),
                slope: file.armijo_slope.unwrap_or(a.slope),
                max_backtracks: file.armijo_backtracks.unwrap_or(a.max_backtracks),
            })
        } else {
            None
        };
        let optimizer = OptimizerConfig {
            step_size: positive("step_size", file.step_size.unwrap_or(d.step_size))?,
            max_iters: file.max_iters.unwrap_or(d.max_iters),
            grad_tol: positive("grad_tol", file.grad_tol.unwrap_or(d.grad_tol))?,
            armijo,
        };
        optimizer
            .validate()
            .map_err(|e| SmpError::Config(format!("optimizer settings: {e}")))?;
        let epsilons = file.epsilons.clone().unwrap_or_else(|| vec![0.2, 0.1, 0.05, 0.025]);
        check_ladder(&epsilons).map_err(|e| SmpError::Config(format!("field `epsilons`: {e}")))?;
        let b = HarnessBands::default();
        let bands = HarnessBands {
            slope_lo: finite("slope_lo", file.slope_lo.unwrap_or(b.slope_lo))?,
            slope_hi: finite("slope_hi", file.slope_hi.unwrap_or(b.slope_hi))?,
            decay_factor: positive("decay_factor", file.decay_factor.unwrap_or(b.decay_factor))?,
            n_sigma: positive("n_sigma", file.n_sigma.unwrap_or(b.n_sigma))?,
            monotone_sigma: positive("monotone_sigma", file.monotone_sigma.unwrap_or(b.monotone_sigma))?,
            remainder_factor: positive("remainder_factor", file.remainder_factor.unwrap_or(b.remainder_factor))?,
            exact_floor: positive("exact_floor", file.exact_floor.unwrap_or(b.exact_floor))?,
            inequality_factor: positive(
                "inequality_factor",
                file.inequality_factor.unwrap_or(b.inequality_factor),
            )?,
        };
        if bands.slope_lo >= bands.slope_hi {
            return Err(SmpError::Config("fields `slope_lo`/`slope_hi`: empty band".into()));
        }
        let regression_modes = file.regression_modes.unwrap_or(n_state.min(4));
        if regression_modes > n_state {
            return Err(SmpError::Config(format!(
                "field `regression_modes`: {regression_modes} exceeds n_state = {n_state}"
            )));
        }
        if let Some(w) = file.workers {
            nonzero("workers", w)?;
        }
        Ok(Self {
            scenario,
            n_state,
            n_control,
            n_noise,
            horizon: positive("horizon", file.horizon.unwrap_or(1.0))?,
            n_steps: nonzero("n_steps", file.n_steps.unwrap_or(50))?,
            n_paths: nonzero("n_paths", file.n_paths.unwrap_or(scenario.default_paths()))?,
            seed: file.seed.unwrap_or(7),
            zero_noise: file.zero_noise.unwrap_or(false),
            terminal_weight: finite("terminal_weight", file.terminal_weight.unwrap_or(1.0))?,
            noise_amplitude: finite("noise_amplitude", file.noise_amplitude.unwrap_or(1.0))?,
            control_bounds,
            regression_degree: file.regression_degree.unwrap_or(2),
            regression_modes,
            optimizer,
            epsilons,
            bands,
            n_probes: file.n_probes.unwrap_or(100),
            probe_radius: positive("probe_radius", file.probe_radius.unwrap_or(1.0))?,
            certificate_tol: file
                .certificate_tol
                .map(|t| positive("certificate_tol", t))
                .transpose()?,
            selftest_samples: nonzero("selftest_samples", file.selftest_samples.unwrap_or(100))?,
            out_dir: file.out_dir.clone(),
            workers: file.workers,
        })
    }

    pub fn basis(&self) -> RegressionBasis {
        RegressionBasis::new(self.regression_degree, (0..self.regression_modes).collect())
    }

    pub fn admissible(&self) -> Result<AdmissibleSet> {
        match self.control_bounds {
            None => Ok(AdmissibleSet::Unconstrained),
            Some((lo, hi)) => AdmissibleSet::uniform_box(self.n_control, lo, hi),
        }
    }

    pub fn build(&self) -> Result<Scenario> {
        let space = GalerkinSpace::half_laplacian(self.n_state, self.n_control, self.n_noise)?;
        let grid = TimeGrid::new(self.horizon, self.n_steps)?;
        let recip = |n: usize, scale: f64| -> Vec<f64> { (1..=n).map(|k| scale / k as f64).collect() };
        let rho = recip(self.n_state, self.terminal_weight);
        let h = recip(self.n_control, self.noise_amplitude);
        let q: Vec<f64> = (1..=self.n_noise).map(|k| 1.0 / (k * k) as f64).collect();
        let admissible = self.admissible()?;
        let (spec, lq): (Arc<dyn ProblemSpec>, Option<LqSpec>) = match self.scenario {
            ScenarioKind::LqLinearPhi | ScenarioKind::LqQuadraticPhi => {
                let terminal = if self.scenario == ScenarioKind::LqLinearPhi {
                    LqTerminal::Linear { rho }
                } else {
                    LqTerminal::Quadratic { rho }
                };
                let lq = LqSpec::identity_control(&space, &h, &q, terminal, recip(self.n_state, 1.0), admissible)?;
                (Arc::new(lq.clone()), Some(lq))
            }
            ScenarioKind::TanhDrift => {
                let x0 = (1..=self.n_state)
                    .map(|k| {
                        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                        sign / (1.0 + 0.25 * k as f64)
                    })
                    .collect();
                let spec = TanhDriftSpec::new(&space, 1.0, 0.5, 0.3, q, h, 0.5, 1.0, rho, x0, admissible)?;
                (Arc::new(spec), None)
            }
        };
        let noise = if self.zero_noise {
            NoiseEnsemble::zeros(&space, &grid, self.n_paths)?
        } else {
            NoiseEnsemble::sample(&space, &grid, self.n_paths, self.seed)?
        };
        Ok(Scenario {
            space,
            grid,
            spec,
            lq,
            noise,
            basis: self.basis(),
        })
    }
}

/// Everything a command needs to run.
pub struct Scenario {
    pub space: GalerkinSpace,
    pub grid: TimeGrid,
    pub spec: Arc<dyn ProblemSpec>,
    /// The LQ model when the scenario is linear-quadratic.
    pub lq: Option<LqSpec>,
    pub noise: NoiseEnsemble,
    pub basis: RegressionBasis,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_resolves_to_defaults() {
        let c = ScenarioConfig::resolve(&ConfigFile::parse("").unwrap()).unwrap();
        assert_eq!(c.scenario, ScenarioKind::LqLinearPhi);
        assert_eq!((c.n_state, c.n_control, c.n_noise), (8, 8, 8));
        assert_eq!((c.n_steps, c.n_paths), (50, 2000));
        assert_eq!(c.epsilons, vec![0.2, 0.1, 0.05, 0.025]);
        assert_eq!(c.optimizer, OptimizerConfig::default());
        assert_eq!(c.bands, HarnessBands::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = ConfigFile::parse("scenario = \"tanh-drift\"\nn_paht = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("n_paht") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        for (text, field) in [
            ("scenario = \"heat\"", "scenario"),
            ("n_steps = 0", "n_steps"),
            ("horizon = -1.0", "horizon"),
            ("epsilons = [0.1, 0.2, 0.05, 0.01]", "epsilons"),
            ("control_lo = -1.0", "control_lo"),
            ("regression_modes = 9", "regression_modes"),
        ] {
            let msg = ScenarioConfig::resolve(&ConfigFile::parse(text).unwrap())
                .unwrap_err()
                .to_string();
            assert!(msg.contains(field), "{text}: {msg}");
        }
    }

    #[test]
    fn wrong_types_are_rejected() {
        assert!(ConfigFile::parse("n_paths = \"many\"").is_err());
        assert!(ConfigFile::parse("n_paths = -4").is_err());
    }

    #[test]
    fn scenarios_build_with_consistent_shapes() {
        for kind in ScenarioKind::ALL {
            let file = ConfigFile {
                scenario: Some(kind.name().into()),
                n_paths: Some(10),
                ..Default::default()
            };
            let s = ScenarioConfig::resolve(&file).unwrap().build().unwrap();
            assert_eq!(
                s.spec.name(),
                if kind == ScenarioKind::TanhDrift {
                    "tanh-drift"
                } else {
                    "lq"
                }
            );
            assert_eq!(s.lq.is_some(), kind != ScenarioKind::TanhDrift);
            assert_eq!(s.noise.n_paths(), 10);
            assert_eq!(s.spec.n_state(), s.space.n_state());
        }
    }

    #[test]
    fn echo_omits_machine_settings() {
        let file = ConfigFile {
            workers: Some(4),
            out_dir: Some("/tmp/x".into()),
            ..Default::default()
        };
        let c = ScenarioConfig::resolve(&file).unwrap();
        let echo = serde_json::to_string(&c).unwrap();
        assert!(!echo.contains("workers") && !echo.contains("out_dir"));
    }
}
