//! The `run`, `transport`, `jko` and `diagnose` subcommands.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sphere_euler::config::{Preset, RunConfig};
use sphere_euler::euler_solver::{
    gronwall_compare, onofri_check, run, vorticity_budget, weak_acceleration_residual, weak_continuity_residual,
    RunOutput, TestFunction, MASS_TOL, ROUNDOFF,
};
use sphere_euler::jko::{fisher_gap_check, jko_step, minimizer_bounds_check};
use sphere_euler::ot::{c_transform, sinkhorn, w2_squared_exact, w2_squared_points, DiscreteMeasure};
use sphere_euler::sphere_geom::tangent_projection;
use sphere_euler::tangent_flow::path_regularity;
use sphere_euler::{Mesh, Vec3};

use crate::artifacts::{self, load_run, write_json, StoredRun, DIAGNOSTICS, FORMAT_VERSION};
use crate::{CliError, CliResult};

/// Options shared by all subcommands.
#[derive(Clone, Debug, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Common {
    /// Load the configuration and apply `--out` and `--seed`.
    pub fn load(&self) -> CliResult<(RunConfig, PathBuf)> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }
}

pub fn cmd_run(common: &Common) -> CliResult<RunOutput> {
    let (cfg, base) = common.load()?;
    let mesh = cfg.mesh()?;
    let initial = cfg.initial_state(&mesh, &base)?;
    let out = run(&mesh, initial, &cfg.solver_config())?;
    let summary = artifacts::write_run(&cfg.output_dir, &cfg, &mesh, &out)?;
    println!(
        "{} steps to t = {}, H {} -> {}, artifacts in {}",
        summary.steps_completed,
        summary.t_final,
        summary.hamiltonian_initial,
        summary.hamiltonian_final,
        cfg.output_dir.display()
    );
    if let Some(e) = &out.abort {
        return Err(CliError::Numerical(format!("run aborted after {} steps: {e}", summary.steps_completed)));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct TransportArgs {
    /// `two-dirac`: unit masses at the north pole and on the equator.
    pub fixture: Option<String>,
    /// Presets or density files on the mesh.
    pub mu: Option<String>,
    pub nu: Option<String>,
    pub level: Option<usize>,
    pub check_duality: bool,
    pub sinkhorn: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TransportReport {
    /// Optimal cost with `c = d²/2`.
    pub w2_squared_half: f64,
    /// Optimal cost with `c = d²`.
    pub w2_squared_standard: f64,
    pub dual: Option<f64>,
    pub gap: Option<f64>,
    pub sinkhorn: Option<f64>,
}

pub fn cmd_transport(common: &Common, args: &TransportArgs) -> CliResult<TransportReport> {
    let (primal, dual, sink) = match args.fixture.as_deref() {
        Some("two-dirac") => {
            let mu = DiscreteMeasure { points: vec![Vec3::new(0.0, 0.0, 1.0)], masses: vec![1.0] };
            let nu = DiscreteMeasure { points: vec![Vec3::new(1.0, 0.0, 0.0)], masses: vec![1.0] };
            let sol = w2_squared_points(&mu, &nu)?;
            let dual = sol.potentials.phi1[0] + sol.potentials.phi2[0];
            (sol.value, dual, None)
        }
        Some(other) => return Err(CliError::Config(format!("unknown fixture {other:?}"))),
        None => {
            let cfg = common.config.as_ref().map(|_| common.load()).transpose()?;
            let level = args.level.or(cfg.as_ref().map(|c| c.0.mesh_level)).unwrap_or(2);
            if !(1..=6).contains(&level) {
                return Err(CliError::Config(format!("--level {level} must lie in [1, 6]")));
            }
            let mesh = Mesh::icosphere(level)?;
            let base = cfg.as_ref().map(|c| c.1.clone()).unwrap_or_default();
            let seed = common.seed.unwrap_or(0);
            let density = |arg: &Option<String>, name: &str| -> CliResult<sphere_euler::Density> {
                let s = arg.as_deref().ok_or_else(|| CliError::Config(format!("--{name} is required")))?;
                let p: Preset = s.parse()?;
                Ok(p.density(&mesh, seed, &base)?)
            };
            let (mu, nu) = (density(&args.mu, "mu")?, density(&args.nu, "nu")?);
            let sol = w2_squared_exact(&mesh, &mu, &nu)?;
            // Re-tighten the ν-side potential so the pair is feasible, then evaluate the dual.
            let phi1 = c_transform(&mesh, &sol.potentials.phi2);
            let dual = mesh.integrate(&mul(&phi1, mu.values())) + mesh.integrate(&mul(&sol.potentials.phi2, nu.values()));
            let sink = match args.sinkhorn {
                Some(reg) => Some(sinkhorn(&mesh, &mu, &nu, reg)?.value),
                None => None,
            };
            (sol.value, dual, sink)
        }
    };
    let report = TransportReport {
        w2_squared_half: primal,
        w2_squared_standard: 2.0 * primal,
        dual: args.check_duality.then_some(dual),
        gap: args.check_duality.then_some(primal - dual),
        sinkhorn: sink,
    };
    println!("W2^2 (paper convention, cost d^2/2): {}", report.w2_squared_half);
    println!("W2^2 (standard, cost d^2):           {}", report.w2_squared_standard);
    if let (Some(d), Some(g)) = (report.dual, report.gap) {
        println!("primal: {primal}");
        println!("dual:   {d}");
        println!("gap:    {g}");
        if g < -1e-9 {
            return Err(CliError::Numerical(format!("weak duality violated: gap {g}")));
        }
    }
    if let Some(s) = report.sinkhorn {
        println!("sinkhorn (d^2/2): {s}");
    }
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        write_json(&out.join("transport.json"), &report)?;
    }
    Ok(report)
}

fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct JkoReport {
    pub format_version: u32,
    pub h: f64,
    pub value: f64,
    pub iterations: usize,
    pub duality_gap: f64,
    pub w2: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    /// `δ₁ = min(min f, 1/max f)`.
    pub delta1: f64,
    pub bounds_hold: bool,
    /// `U(f) − U(ρ_h) − h²∫ρ_h‖∇(Θ₁∘ρ_h)‖²`.
    pub fisher_gap: f64,
}

/// One minimizing-movement step from the configured initial density with step `h`.
pub fn cmd_jko(common: &Common) -> CliResult<JkoReport> {
    let (cfg, base) = common.load()?;
    let mesh = cfg.mesh()?;
    let f = cfg.initial_density.density(&mesh, cfg.seed, &base)?;
    let theta = cfg.theta();
    let sc = cfg.solver_config();
    let r = jko_step(&mesh, &f, cfg.h, &theta, &sc.jko)?;
    let delta1 = f.min().min(1.0 / f.max());
    let report = JkoReport {
        format_version: FORMAT_VERSION,
        h: cfg.h,
        value: r.value,
        iterations: r.iterations,
        duality_gap: r.optimality_residual,
        w2: r.w2,
        rho_min: r.rho_h.min(),
        rho_max: r.rho_h.max(),
        delta1,
        bounds_hold: minimizer_bounds_check(&r, delta1, r.optimality_residual.sqrt() + ROUNDOFF),
        fisher_gap: fisher_gap_check(&mesh, &f, &r, cfg.h, &theta)?,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
    write_json(&cfg.output_dir.join("jko.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    /// Worst value of the inequality's slack; nonnegative when it holds exactly.
    pub margin: f64,
    /// Allowed shortfall below zero.
    pub tolerance: f64,
}

impl Check {
    fn new(name: &str, margin: f64, tolerance: f64) -> Self {
        Check { name: name.into(), pass: margin >= -tolerance, margin, tolerance }
    }
}

/// A reported quantity without a pass/fail verdict.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub name: String,
    pub value: f64,
    pub bound: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics {
    pub format_version: u32,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub reports: Vec<Report>,
}

/// Worst `margin_k` and whether every `margin_k ≥ −tol_k`.
fn per_step(name: &str, pairs: impl Iterator<Item = (f64, f64)>) -> Option<Check> {
    let mut out: Option<Check> = None;
    for (m, tol) in pairs {
        let c = out.get_or_insert(Check::new(name, m, tol));
        c.pass &= m >= -tol;
        if m < c.margin {
            c.margin = m;
        }
        c.tolerance = c.tolerance.max(tol);
    }
    out
}

/// Stored-run audit: ledger inequalities, path regularity, vorticity, Onofri and weak residuals;
/// with `compare`, the Gronwall comparison against a second run from the same initial data.
pub fn cmd_diagnose(common: &Common, compare: Option<&Path>) -> CliResult<Diagnostics> {
    let dir = common
        .out
        .clone()
        .map(Ok)
        .or_else(|| common.config.as_ref().map(|_| common.load().map(|(c, _)| c.output_dir)))
        .ok_or_else(|| CliError::Config("--out DIR (the run directory) is required".into()))??;
    let stored = load_run(&dir)?;
    let diag = diagnose(&stored, compare.map(load_run).transpose()?.as_ref())?;
    write_json(&dir.join(DIAGNOSTICS), &diag)?;
    for c in &diag.checks {
        println!("{:<24} {}  margin {:e}", c.name, if c.pass { "PASS" } else { "FAIL" }, c.margin);
    }
    for r in &diag.reports {
        match r.bound {
            Some(b) => println!("{:<24} {:e}  (continuum bound {:e})", r.name, r.value, b),
            None => println!("{:<24} {:e}", r.name, r.value),
        }
    }
    if !diag.pass {
        return Err(CliError::ChecksFailed("some diagnostics failed".into()));
    }
    Ok(diag)
}

pub fn diagnose(run: &StoredRun, compare: Option<&StoredRun>) -> CliResult<Diagnostics> {
    let mesh = &run.mesh;
    let cfg = &run.config;
    let theta = cfg.theta();
    let h = cfg.h;
    let rows = &run.rows;
    let steps = rows.get(1..).unwrap_or(&[]);
    let mut checks = Vec::new();
    let mut reports = Vec::new();

    let drift = run
        .states
        .iter()
        .map(|s| (mesh.integrate(s.rho.values()) - 1.0).abs())
        .fold(0.0, f64::max);
    checks.push(Check::new("mass_conservation", -drift, MASS_TOL));
    checks.extend(per_step(
        "energy_decrease",
        steps.iter().filter_map(|r| r.decrease_margin.map(|m| (m, r.jko_gap + ROUNDOFF))),
    ));
    checks.extend(per_step("dissipation_floor", steps.iter().map(|r| (r.dissipation_margin, r.budget))));
    checks.extend(per_step("cross_term", steps.iter().map(|r| (r.cross_margin, r.budget))));
    checks.extend(per_step(
        "projection_contraction",
        steps.iter().map(|r| (r.contraction_margin, 1e-8 * r.kinetic + ROUNDOFF)),
    ));
    let guard = rows.iter().map(|r| r.hessian_guard).fold(0.0, f64::max);
    checks.push(Check::new("hessian_guard", -guard, cfg.solver_config().hessian_guard));

    let times: Vec<f64> = run.states.iter().map(|s| s.t).collect();
    let dens: Vec<_> = run.states.iter().map(|s| s.rho.clone()).collect();
    let vels: Vec<_> = run.states.iter().map(|s| s.v.clone()).collect();
    if run.states.len() >= 3 {
        let rates: Vec<f64> = run
            .states
            .iter()
            .map(|s| {
                let gq = mesh.gradient(&s.q);
                let t1: Vec<f64> = s.rho.values().iter().map(|&r| theta.theta1(r)).collect();
                let gp = mesh.gradient(&t1);
                let vals: Vec<f64> = (0..mesh.len())
                    .map(|i| (gq[i].norm_squared() + gp[i].norm_squared()) * s.rho.values()[i])
                    .collect();
                mesh.integrate(&vals)
            })
            .collect();
        // Reported only: the mollifier moves O(ε²) mass per step, which the continuum rate omits.
        let pr = path_regularity(mesh, &times, &dens, Some(&rates))?;
        reports.push(Report { name: "path_regularity".into(), value: pr.sum, bound: pr.bound });
    }
    let vb = vorticity_budget(mesh, &run.states, &theta, h);
    checks.push(Check::new("vorticity", vb.margin(), ROUNDOFF));
    let onofri = run.states.iter().map(|s| onofri_check(mesh, &s.q)).fold(f64::INFINITY, f64::min);
    checks.push(Check::new("onofri", onofri, 1e-4));
    if let Some(other) = compare {
        let g = gronwall_compare(mesh, &run_output(run), &run_output(other), &theta, h.min(other.config.h) / 4.0)?;
        checks.push(Check::new("gronwall", g.margin(), 0.0));
    }

    if run.states.len() >= 3 {
        let value = |x: &Vec3, _: f64| x.z;
        let zero = |_: &Vec3, _: f64| 0.0;
        let grad = |x: &Vec3, _: f64| tangent_projection(x, &Vec3::new(0.0, 0.0, 1.0));
        let psi = TestFunction { value: &value, dt: &zero, grad: &grad };
        reports.push(Report {
            name: "weak_continuity".into(),
            value: weak_continuity_residual(mesh, &times, &dens, &vels, &psi)?,
            bound: None,
        });
        reports.push(Report {
            name: "weak_acceleration".into(),
            value: weak_acceleration_residual(mesh, &times, &dens, &vels, &grad, &theta)?,
            bound: None,
        });
    }
    Ok(Diagnostics {
        format_version: FORMAT_VERSION,
        pass: checks.iter().all(|c| c.pass),
        checks,
        reports,
    })
}

fn run_output(run: &StoredRun) -> RunOutput {
    RunOutput {
        snapshots: run.states.clone(),
        ledger: sphere_euler::euler_solver::EnergyLedger { rows: run.rows.clone() },
        abort: None,
    }
}
