//! Experiment drivers behind the `smp` subcommands. Each writes its files
//! into one output directory together with a `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::adjoint::{solve_bsee, solve_bsee_lq_explicit, AdjointPair};
use crate::config::{Scenario, ScenarioConfig};
use crate::error::Result;
use crate::forward::{integrate_forward, ControlProcess};
use crate::galerkin::{NoiseEnsemble, TimeGrid};
use crate::hamiltonian::{evaluate_cost, hamiltonian_selftest, CostEstimate};
use crate::optimizer::{
    optimize, probe_points, solve_lq_analytic, verify_maximum_principle, write_trace_csv, OptimalityCertificate,
    OptimizeResult,
};
use crate::problem::{derivative_selftest, DerivativeReport, LqSpec, MutantSpec, Mutation, ProblemSpec};
use crate::variational::{default_direction, Harness, RateReport};

/// One line of a command's summary table.
#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub check: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckLine {
    fn new(check: &str, pass: bool, detail: String) -> Self {
        Self {
            check: check.into(),
            pass,
            detail,
        }
    }
}

pub struct Outcome {
    pub command: &'static str,
    pub checks: Vec<CheckLine>,
    pub files: Vec<String>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// A command invocation: resolved config plus the raw config bytes for hashing.
pub struct Run {
    pub config: ScenarioConfig,
    pub config_bytes: Option<Vec<u8>>,
    pub mutation: Option<Mutation>,
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct OutputHash {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    scenario: &'a str,
    mutation: Option<&'a str>,
    seed: u64,
    noise_fingerprint: &'a str,
    /// Git blob hash (SHA-256) of the config file, or of the resolved echo
    /// when no file was given.
    config_hash: String,
    config: &'a ScenarioConfig,
    outputs: Vec<OutputHash>,
    checks: &'a [CheckLine],
    pass: bool,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Hash of `bytes` as git computes object ids, with SHA-256.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

/// Collects written files in order.
struct Writer<'a> {
    dir: &'a Path,
    files: Vec<(String, String)>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn bytes(&mut self, name: &str, data: Vec<u8>) -> Result<()> {
        fs::write(self.dir.join(name), &data)?;
        self.files.push((name.to_string(), sha256_hex(&data)));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut data = serde_json::to_vec_pretty(value)?;
        data.push(b'\n');
        self.bytes(name, data)
    }

    fn csv<F: FnOnce(&mut Vec<u8>) -> Result<()>>(&mut self, name: &str, f: F) -> Result<()> {
        let mut data = Vec::new();
        f(&mut data)?;
        self.bytes(name, data)
    }

    fn finish(
        mut self,
        run: &Run,
        command: &'static str,
        noise: &NoiseEnsemble,
        checks: Vec<CheckLine>,
    ) -> Result<Outcome> {
        let mut summary = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut summary);
            w.write_record(["check", "pass", "detail"])?;
            for c in &checks {
                w.write_record([
                    c.check.as_str(),
                    if c.pass { "true" } else { "false" },
                    c.detail.as_str(),
                ])?;
            }
            w.flush()?;
        }
        self.bytes("summary.csv", summary)?;
        let echo = serde_json::to_vec(&run.config)?;
        let config_hash = git_blob_hash(run.config_bytes.as_deref().unwrap_or(&echo));
        let pass = checks.iter().all(|c| c.pass);
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            scenario: run.config.scenario.name(),
            mutation: run.mutation.map(|m| m.name()),
            seed: run.config.seed,
            noise_fingerprint: noise.fingerprint(),
            config_hash,
            config: &run.config,
            outputs: self
                .files
                .iter()
                .map(|(f, h)| OutputHash {
                    file: f.clone(),
                    sha256: h.clone(),
                })
                .collect(),
            checks: &checks,
            pass,
        };
        self.json("manifest.json", &manifest)?;
        Ok(Outcome {
            command,
            checks,
            files: self.files.into_iter().map(|(f, _)| f).collect(),
        })
    }
}

/// Zero control projected onto `U`.
fn initial_control(spec: &dyn ProblemSpec, grid: &TimeGrid) -> ControlProcess {
    ControlProcess::zeros(grid, spec.n_control()).project(spec.admissible())
}

/// The model used by the checks: the true one, or a mutant for fault injection.
fn checker(scenario: &Scenario, mutation: Option<Mutation>) -> Arc<dyn ProblemSpec> {
    match mutation {
        None => scenario.spec.clone(),
        Some(m) => Arc::new(MutantSpec::new(scenario.spec.clone(), m)),
    }
}

pub fn simulate(run: &Run) -> Result<Outcome> {
    let s = run.config.build()?;
    let control = initial_control(s.spec.as_ref(), &s.grid);
    let states = integrate_forward(s.spec.as_ref(), &s.space, &s.grid, &control, &s.noise)?;
    let mut w = Writer::new(&run.out_dir)?;
    w.csv("states.csv", |buf| states.write_csv(buf))?;
    let cost = evaluate_cost(s.spec.as_ref(), &s.grid, &states, &control)?;
    w.json("cost.json", &cost)?;
    w.finish(run, "simulate", &s.noise, Vec::new())
}

#[derive(Serialize)]
struct AdjointReport {
    solver: &'static str,
    degrees_used: Vec<usize>,
    noise_floor: f64,
    y_max_abs: f64,
    z_max_abs: f64,
    max_y_cv_error: f64,
    max_z_cv_error: f64,
    max_y_rel_error_analytic: Option<f64>,
    max_y_deviation_explicit: Option<f64>,
    max_z_rms_deviation_explicit: Option<f64>,
}

/// Relative error of `Y(t_i)` against `S*(T - t_i)ρ` per step, worst path.
fn analytic_y_errors(lq: &LqSpec, s: &Scenario, adj: &AdjointPair) -> Result<Vec<f64>> {
    let rho = lq.terminal().rho();
    (0..=s.grid.n_steps())
        .map(|i| {
            let exact = s.space.adjoint_semigroup_apply(s.grid.horizon() - s.grid.t(i), rho)?;
            let scale = exact.norm().max(f64::MIN_POSITIVE);
            Ok((0..adj.n_paths())
                .map(|p| {
                    let d: f64 = adj.y(p, i).iter().zip(exact.iter()).map(|(a, b)| (a - b).powi(2)).sum();
                    d.sqrt() / scale
                })
                .fold(0.0, f64::max))
        })
        .collect()
}

/// `(max_p |ΔY|, RMS_p |ΔZ|)` per step between two solvers.
fn solver_deviation(a: &AdjointPair, b: &AdjointPair, n: usize) -> Vec<(f64, f64)> {
    (0..=n)
        .map(|i| {
            let mut y = 0.0_f64;
            let mut z = 0.0;
            for p in 0..a.n_paths() {
                let dy: f64 = a.y(p, i).iter().zip(b.y(p, i)).map(|(u, v)| (u - v).powi(2)).sum();
                y = y.max(dy.sqrt());
                z += a
                    .z(p, i)
                    .iter()
                    .zip(b.z(p, i))
                    .map(|(u, v)| (u - v).powi(2))
                    .sum::<f64>();
            }
            (y, (z / a.n_paths() as f64).sqrt())
        })
        .collect()
}

pub fn adjoint(run: &Run) -> Result<Outcome> {
    let s = run.config.build()?;
    let spec = checker(&s, run.mutation);
    let control = initial_control(s.spec.as_ref(), &s.grid);
    let states = integrate_forward(s.spec.as_ref(), &s.space, &s.grid, &control, &s.noise)?;
    let adj = solve_bsee(spec.as_ref(), &s.space, &s.grid, &states, &control, &s.noise, &s.basis)?;
    let n = s.grid.n_steps();
    let mut w = Writer::new(&run.out_dir)?;
    w.csv("adjoint.csv", |buf| adj.write_csv(buf))?;

    let explicit = match (&s.lq, run.mutation) {
        (Some(_), None) => Some(solve_bsee_lq_explicit(
            spec.as_ref(),
            &s.space,
            &s.grid,
            &states,
            &s.noise,
            &s.basis,
        )?),
        _ => None,
    };
    let analytic = match &s.lq {
        Some(lq) if lq.terminal().is_linear() => Some(analytic_y_errors(lq, &s, &adj)?),
        _ => None,
    };
    let deviation = explicit.as_ref().map(|e| solver_deviation(&adj, e, n));
    w.csv("adjoint_deviation.csv", |buf| {
        let mut c = csv::Writer::from_writer(buf);
        c.write_record([
            "step",
            "t",
            "y_cv_error",
            "z_cv_error",
            "y_rel_error_analytic",
            "y_max_deviation_explicit",
            "z_rms_deviation_explicit",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for i in 0..=n {
            let (ycv, zcv) = if i < n {
                (adj.y_cv_error()[i], adj.z_cv_error()[i])
            } else {
                (0.0, 0.0)
            };
            c.write_record([
                i.to_string(),
                s.grid.t(i).to_string(),
                ycv.to_string(),
                zcv.to_string(),
                opt(analytic.as_ref().map(|a| a[i])),
                opt(deviation.as_ref().map(|d| d[i].0)),
                opt(deviation.as_ref().map(|d| d[i].1)),
            ])?;
        }
        c.flush()?;
        Ok(())
    })?;
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let report = AdjointReport {
        solver: "regression",
        degrees_used: adj.degrees_used().to_vec(),
        noise_floor: adj.noise_floor(),
        y_max_abs: adj.y_max_abs(),
        z_max_abs: adj.z_max_abs(),
        max_y_cv_error: max(adj.y_cv_error()),
        max_z_cv_error: max(adj.z_cv_error()),
        max_y_rel_error_analytic: analytic.as_ref().map(|a| max(a)),
        max_y_deviation_explicit: deviation.as_ref().map(|d| d.iter().map(|x| x.0).fold(0.0, f64::max)),
        max_z_rms_deviation_explicit: deviation.as_ref().map(|d| d.iter().map(|x| x.1).fold(0.0, f64::max)),
    };
    w.json("adjoint_report.json", &report)?;
    let mut checks = Vec::new();
    if let Some(err) = report.max_y_rel_error_analytic {
        checks.push(CheckLine::new(
            "adjoint_analytic",
            err <= 1e-6,
            format!("max relative error {err:.3e}"),
        ));
        checks.push(CheckLine::new(
            "z_noise_floor",
            report.z_max_abs <= report.noise_floor,
            format!(
                "max |Z| {:.3e}, noise floor {:.3e}",
                report.z_max_abs, report.noise_floor
            ),
        ));
    }
    w.finish(run, "adjoint", &s.noise, checks)
}

#[derive(Serialize)]
struct AnalyticComparison {
    rel_l2_error: f64,
    cost: CostEstimate,
    j_star: f64,
    budget: f64,
    tolerance: f64,
    control_pass: bool,
    cost_pass: bool,
}

/// `|J(N) - J(2N)|` at the analytic control without noise.
pub fn lq_discretization_budget(lq: &LqSpec, s: &Scenario) -> Result<f64> {
    let cost_on = |grid: &TimeGrid| -> Result<f64> {
        let (u, _) = solve_lq_analytic(lq, &s.space, grid)?;
        let noise = NoiseEnsemble::zeros(&s.space, grid, 1)?;
        let x = integrate_forward(lq, &s.space, grid, &u, &noise)?;
        Ok(evaluate_cost(lq, grid, &x, &u)?.mean)
    };
    Ok((cost_on(&s.grid)? - cost_on(&s.grid.refined(2)?)?).abs())
}

/// Certificate tolerance: configured, or `1e-3 · |cost|`.
fn certificate_tol(config: &ScenarioConfig, cost_scale: f64) -> f64 {
    config.certificate_tol.unwrap_or(1e-3 * cost_scale.abs())
}

fn certify(
    spec: &dyn ProblemSpec,
    s: &Scenario,
    config: &ScenarioConfig,
    res: &OptimizeResult,
    adj: &AdjointPair,
    tol: f64,
) -> Result<OptimalityCertificate> {
    let mean = res.control.path_mean();
    let nc = mean.n_control();
    let centre: Vec<f64> = (0..nc)
        .map(|j| (0..s.grid.n_steps()).map(|i| mean.value(0, i)[j]).sum::<f64>() / s.grid.n_steps() as f64)
        .collect();
    let probes = probe_points(
        spec.admissible(),
        &centre,
        config.n_probes,
        config.probe_radius,
        config.seed,
    );
    let mut cert = verify_maximum_principle(spec, &s.grid, &res.last.states, &res.control, adj, &probes, tol)?;
    cert.optimizer = Some(config.optimizer.clone());
    cert.trace = res.trace.clone();
    Ok(cert)
}

fn run_optimizer(s: &Scenario, config: &ScenarioConfig) -> Result<OptimizeResult> {
    let init = initial_control(s.spec.as_ref(), &s.grid);
    let res = optimize(
        s.spec.as_ref(),
        &s.space,
        &s.grid,
        &init,
        &s.noise,
        &s.basis,
        &config.optimizer,
    )?;
    info!(
        "optimizer: {} iterations, projected gradient {:e}, converged {}",
        res.trace.len() - 1,
        res.last.projected_grad_norm,
        res.converged
    );
    Ok(res)
}

pub fn optimize_cmd(run: &Run) -> Result<Outcome> {
    let s = run.config.build()?;
    let res = run_optimizer(&s, &run.config)?;
    let spec = checker(&s, run.mutation);
    let mut w = Writer::new(&run.out_dir)?;
    w.csv("trace.csv", |buf| write_trace_csv(&res.trace, buf))?;
    w.csv("control.csv", |buf| res.control.write_csv(&s.grid, buf))?;
    let mut checks = Vec::new();
    checks.push(CheckLine::new(
        "admissible",
        res.control.check_admissible(s.spec.admissible(), 0.0).is_ok(),
        "final control lies in U".into(),
    ));
    let analytic = match &s.lq {
        Some(lq) if lq.terminal().is_linear() && lq.admissible().is_unconstrained() => Some((
            solve_lq_analytic(lq, &s.space, &s.grid)?,
            lq_discretization_budget(lq, &s)?,
        )),
        _ => None,
    };
    let cost_scale = analytic.as_ref().map(|((_, j), _)| *j).unwrap_or(res.last.cost.mean);
    let tol = certificate_tol(&run.config, cost_scale);
    let adj = match run.mutation {
        None => res.last.adjoint.clone(),
        Some(_) => solve_bsee(
            spec.as_ref(),
            &s.space,
            &s.grid,
            &res.last.states,
            &res.control,
            &s.noise,
            &s.basis,
        )?,
    };
    let cert = certify(spec.as_ref(), &s, &run.config, &res, &adj, tol)?;
    checks.push(CheckLine::new(
        "maximum_principle",
        cert.pass,
        format!(
            "max E<grad, u*-u> {:.3e}, |E grad| {:.3e}, tol {tol:.3e}, violations {}",
            cert.max_inner, cert.mean_gradient_l2, cert.n_violations
        ),
    ));
    w.json("certificate.json", &cert)?;
    if let Some(((star, j_star), budget)) = analytic {
        let dt = s.grid.dt();
        let rel = res.control.axpy(-1.0, &star)?.l2_norm(dt) / star.l2_norm(dt).max(f64::MIN_POSITIVE);
        let cost = res.last.cost;
        let tolerance = 3.0 * cost.std_error + budget;
        let cmp = AnalyticComparison {
            rel_l2_error: rel,
            cost,
            j_star,
            budget,
            tolerance,
            control_pass: rel <= 0.05,
            cost_pass: (cost.mean - j_star).abs() <= tolerance,
        };
        w.csv("analytic.csv", |buf| {
            let mut c = csv::Writer::from_writer(buf);
            let nc = star.n_control();
            let mut header = vec!["step".to_string(), "t".into()];
            header.extend((0..nc).map(|j| format!("u{j}")));
            header.extend((0..nc).map(|j| format!("analytic{j}")));
            c.write_record(&header)?;
            for i in 0..s.grid.n_steps() {
                let mut rec = vec![i.to_string(), s.grid.t(i).to_string()];
                rec.extend(res.control.path_mean().value(0, i).iter().map(|v| v.to_string()));
                rec.extend(star.value(0, i).iter().map(|v| v.to_string()));
                c.write_record(&rec)?;
            }
            c.flush()?;
            Ok(())
        })?;
        checks.push(CheckLine::new(
            "analytic_control",
            cmp.control_pass,
            format!("relative L2 error {rel:.3e}"),
        ));
        checks.push(CheckLine::new(
            "analytic_cost",
            cmp.cost_pass,
            format!("cost {:.6} vs J* {j_star:.6}, tolerance {tolerance:.3e}", cost.mean),
        ));
        w.json("analytic.json", &cmp)?;
    }
    w.finish(run, "optimize", &s.noise, checks)
}

fn rate_line(name: &str, r: &RateReport) -> CheckLine {
    let values: Vec<String> = r.values.iter().map(|v| format!("{v:.3e}")).collect();
    let slope = r.slope.map(|s| format!(", slope {s:.4}")).unwrap_or_default();
    CheckLine::new(name, r.pass, format!("values [{}]{slope}", values.join(", ")))
}

fn selftest(spec: &dyn ProblemSpec, samples: usize, seed: u64) -> Result<DerivativeReport> {
    let mut report = derivative_selftest(spec, samples, seed)?;
    let ham = hamiltonian_selftest(spec, samples, seed)?;
    report.checks.extend(ham.checks);
    report.pass = report.checks.iter().all(|c| c.pass);
    Ok(report)
}

pub fn verify(run: &Run) -> Result<Outcome> {
    let config = &run.config;
    let s = config.build()?;
    let spec = checker(&s, run.mutation);
    let mut w = Writer::new(&run.out_dir)?;
    let mut checks = Vec::new();

    let st = selftest(spec.as_ref(), config.selftest_samples, config.seed)?;
    checks.push(CheckLine::new(
        "derivative_selftest",
        st.pass,
        if st.pass {
            "all derivatives agree".into()
        } else {
            format!("failing: {}", st.failing().join(", "))
        },
    ));
    w.json("selftest.json", &st)?;

    let res = run_optimizer(&s, config)?;
    let star = &res.control;
    let adj = match run.mutation {
        None => res.last.adjoint.clone(),
        Some(_) => solve_bsee(
            spec.as_ref(),
            &s.space,
            &s.grid,
            &res.last.states,
            star,
            &s.noise,
            &s.basis,
        )?,
    };
    let j_scale = match &s.lq {
        Some(lq) if lq.terminal().is_linear() && lq.admissible().is_unconstrained() => {
            solve_lq_analytic(lq, &s.space, &s.grid)?.1
        }
        _ => res.last.cost.mean,
    };
    let tol = certificate_tol(config, j_scale);

    let direction = default_direction(s.spec.as_ref(), star);
    let h = Harness::new(
        s.spec.as_ref(),
        &s.space,
        &s.grid,
        &s.noise,
        star,
        &direction,
        config.bands.clone(),
    )?;
    let eps = &config.epsilons;
    for (name, report) in [
        ("rate_o_eps2", h.check_rate_o_eps2(eps)?),
        ("eta_vanishes", h.check_eta_vanishes(eps)?),
        ("variational_equation", h.check_variational_equation(eps)?),
    ] {
        checks.push(rate_line(name, &report));
        w.json(&format!("{name}.json"), &report)?;
        w.csv(&format!("{name}.csv"), |buf| report.write_csv(buf))?;
    }
    let duality = h.check_duality(spec.as_ref(), &adj)?;
    checks.push(CheckLine::new(
        "duality",
        duality.pass,
        format!(
            "lhs {:.6e}, rhs {:.6e}, |diff| {:.3e} vs tolerance {:.3e}",
            duality.lhs,
            duality.rhs,
            duality.difference.abs(),
            duality.tolerance
        ),
    ));
    w.json("duality.json", &duality)?;
    let ineq = h.check_variational_inequality(spec.as_ref(), &adj, eps, tol)?;
    let worst = ineq
        .rows
        .iter()
        .map(|r| r.lhs - r.threshold)
        .fold(f64::INFINITY, f64::min);
    checks.push(CheckLine::new(
        "variational_inequality",
        ineq.pass,
        format!("min margin {worst:.3e}"),
    ));
    w.json("variational_inequality.json", &ineq)?;

    let cert = certify(spec.as_ref(), &s, config, &res, &adj, tol)?;
    checks.push(CheckLine::new(
        "maximum_principle",
        cert.pass,
        format!(
            "max E<grad, u*-u> {:.3e}, |E grad| {:.3e}, tol {tol:.3e}, violations {}",
            cert.max_inner, cert.mean_gradient_l2, cert.n_violations
        ),
    ));
    w.json("certificate.json", &cert)?;
    w.finish(run, "verify", &s.noise, checks)
}
