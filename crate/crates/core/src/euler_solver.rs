//! The three-stage time step and its energy ledger: geodesic predictor, mollified
//! minimizing-movement corrector and `ρ`-weighted Helmholtz projection, plus the weak-form,
//! Onofri and Gronwall diagnostics used to audit runs.

use std::f64::consts::PI;

use crate::energy::{internal_energy, special_fisher, ThetaModel};
use crate::error::{Error, Result};
use crate::helmholtz::{weighted_decompose, weighted_dirichlet, weighted_field_energy};
use crate::jko::{jko_step, JkoOptions, JkoResult};
use crate::mesh::{mollify, Density, Mesh, ScalarField, VelocityField};
use crate::ot::{push_forward_map, w1_points, w2_squared_exact, DiscreteMeasure};
use crate::sphere_geom::{exp_raw, parallel_transport, tangent_projection, Vec3};
use crate::tangent_flow::{integrate_integral_bundle, PhasePoint};

/// `2/π²`, half the curvature constant `4/π²` of the sphere.
pub const DECREASE_CONSTANT: f64 = 2.0 / (PI * PI);
/// Mass drift at which a step aborts.
pub const MASS_TOL: f64 = 1e-10;
/// Slack added to every per-step tolerance budget for floating-point round-off.
pub const ROUNDOFF: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub h: f64,
    pub tau: f64,
    /// Mollifier width in units of the mean node spacing; 0 disables mollification.
    pub eps_factor: f64,
    pub theta: ThetaModel,
    pub jko: JkoOptions,
    /// Abort when `h·sup‖D²(Θ₁∘ρ_h)‖` exceeds this.
    pub hessian_guard: f64,
    /// Compute the transport-based ledger columns (two extra exact transport solves per step).
    pub audit: bool,
}

impl SolverConfig {
    pub fn new(h: f64, tau: f64, theta: ThetaModel) -> Self {
        SolverConfig {
            h,
            tau,
            eps_factor: 2.0,
            theta,
            jko: JkoOptions::default(),
            hessian_guard: 0.5,
            audit: true,
        }
    }

    pub fn steps(&self) -> usize {
        (self.tau / self.h + 1e-9).floor() as usize
    }

    pub fn eps(&self, mesh: &Mesh) -> f64 {
        self.eps_factor * mesh.mean_spacing()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Invalid(format!("h = {} must be positive", self.h)));
        }
        if !(self.tau >= self.h) {
            return Err(Error::Invalid(format!("tau = {} must be at least h = {}", self.tau, self.h)));
        }
        if !(self.eps_factor >= 0.0) {
            return Err(Error::Invalid(format!("eps_factor = {} must be nonnegative", self.eps_factor)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SolverState {
    pub rho: Density,
    /// Velocity potential: Stage 1 moves mass along `∇q`.
    pub q: ScalarField,
    /// Full velocity `∇q + w`.
    pub v: VelocityField,
    /// Rotational remainder with `∇·(ρw) ≈ 0`; carried for diagnostics only.
    pub w: VelocityField,
    pub t: f64,
}

impl SolverState {
    pub fn new(mesh: &Mesh, rho: Density, q: ScalarField) -> Result<Self> {
        if q.len() != mesh.len() {
            return Err(Error::Invalid("potential length does not match the mesh".into()));
        }
        let v = mesh.gradient(&q);
        Ok(SolverState { rho, q, w: vec![Vec3::zeros(); v.len()], v, t: 0.0 })
    }

    pub fn kinetic(&self, mesh: &Mesh) -> f64 {
        kinetic_energy(mesh, &self.rho, &self.q)
    }
}

/// `½∫‖∇q‖²ρ dm` in the P1 sense.
pub fn kinetic_energy(mesh: &Mesh, rho: &Density, q: &[f64]) -> f64 {
    0.5 * weighted_dirichlet(mesh, rho, q)
}

/// `H(ρ, q) = ½∫‖∇q‖²ρ dm + U(ρ)`.
pub fn hamiltonian(mesh: &Mesh, rho: &Density, q: &[f64], theta: &ThetaModel) -> Result<f64> {
    Ok(kinetic_energy(mesh, rho, q) + internal_energy(mesh, rho, theta)?)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LedgerRow {
    pub step: usize,
    pub t: f64,
    pub kinetic: f64,
    pub internal: f64,
    pub hamiltonian: f64,
    /// `W₂²(ρ_prev, ρ)` with cost `d²/2`.
    pub w2_step: Option<f64>,
    /// `∫ρ‖∇(Θ₁∘ρ)‖² dm`.
    pub fisher: f64,
    /// `H_prev − H − (h²/2)·fisher`.
    pub dissipation_margin: f64,
    /// Tolerance attached to this step's inequalities.
    pub budget: f64,
    /// `E(ρ_prev; f) − E(ρ; f) − (2/π²)W₂²(ρ_prev, ρ)`.
    pub decrease_margin: Option<f64>,
    /// `U(ρ_prev) − U(ρ) + h∫ρ∇(Θ₁∘ρ)·v dm`.
    pub cross_margin: f64,
    /// `∫‖v‖²ρ − ∫‖∇q‖²ρ` of the projection.
    pub contraction_margin: f64,
    pub jko_gap: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    /// `h·sup‖D²(Θ₁∘ρ)‖`.
    pub hessian_guard: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EnergyLedger {
    pub rows: Vec<LedgerRow>,
}

impl EnergyLedger {
    /// Largest `H_{k+1} − H_k − budget_{k+1}`; nonpositive when the ledger is monotone.
    pub fn worst_increase(&self) -> f64 {
        self.rows
            .windows(2)
            .map(|w| w[1].hamiltonian - w[0].hamiltonian - w[1].budget)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Stage 1: `f_h = (x ↦ exp_x(h∇q(x)))♯ρ`.
pub fn stage1_predict(mesh: &Mesh, rho: &Density, q: &[f64], h: f64) -> Result<Density> {
    let hq: Vec<f64> = q.iter().map(|v| v * h).collect();
    push_forward_map(mesh, &hq, rho)
}

/// Stage 2: mollify `f_h` at width `eps` (if positive) and take one corrector step. Returns the
/// mollified density alongside the result.
pub fn stage2_correct(
    mesh: &Mesh,
    f_h: &Density,
    h: f64,
    theta: &ThetaModel,
    eps: f64,
    opts: &JkoOptions,
) -> Result<(Density, JkoResult)> {
    let f = if eps > 0.0 { mollify(mesh, f_h, eps)? } else { f_h.clone() };
    let r = jko_step(mesh, &f, h, theta, opts)?;
    Ok((f, r))
}

fn interpolated_gradient(mesh: &Mesh, grad: &[Vec3], x: &Vec3, hint: usize) -> (Vec3, usize) {
    let hint = mesh.nearest_node(x, hint);
    (tangent_projection(x, &mesh.interpolate_vector(grad, x, hint)), hint)
}

/// Velocity carried to `ρ_h`: a particle arriving at node `y` left `x₀` with velocity `∇q(x₀)`,
/// reached `x = exp_y(h²∇(Θ₁∘ρ_h)(y))` along a geodesic and was then pushed by the pressure
/// impulse `−h∇(Θ₁∘ρ_h)(y)`.
pub fn stage3_velocity(mesh: &Mesh, rho_h: &Density, q0: &[f64], h: f64, theta: &ThetaModel) -> Result<VelocityField> {
    let t1: Vec<f64> = rho_h.values().iter().map(|&r| theta.theta1(r)).collect();
    let gp = mesh.gradient(&t1);
    let gq = mesh.gradient(q0);
    let mut hint = 0;
    let mut out = Vec::with_capacity(mesh.len());
    for (j, y) in mesh.nodes().iter().enumerate() {
        let x = exp_raw(y, &(gp[j] * (h * h)));
        // invert x = exp_{x₀}(h∇q(x₀)) by fixed point
        let (g, hh) = interpolated_gradient(mesh, &gq, &x, hint);
        hint = hh;
        let mut x0 = exp_raw(&x, &(g * -h));
        let mut a = g;
        let mut converged = false;
        for _ in 0..60 {
            let (g0, hh) = interpolated_gradient(mesh, &gq, &x0, hint);
            hint = hh;
            a = g0;
            let next = exp_raw(&x, &(parallel_transport(&x0, &x, &g0) * -h));
            let change = (next - x0).norm();
            x0 = next;
            if change < 1e-13 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                what: format!("predictor inversion at node {j}"),
                iterations: 60,
                residual: f64::NAN,
            });
        }
        let at_x = parallel_transport(&x0, &x, &a);
        out.push(parallel_transport(&x, y, &at_x) - gp[j] * h);
    }
    Ok(out)
}

/// Stage 3: `(q_h, w) = weighted_decompose(v, ρ_h)` for the carried velocity `v`. Returns
/// `(q_h, w, v)`.
pub fn stage3_project(
    mesh: &Mesh,
    rho_h: &Density,
    q0: &[f64],
    h: f64,
    theta: &ThetaModel,
) -> Result<(ScalarField, VelocityField, VelocityField)> {
    let v = stage3_velocity(mesh, rho_h, q0, h, theta)?;
    let (q, w) = weighted_decompose(mesh, &v, rho_h)?;
    Ok((q, w, v))
}

fn theta1_field(rho: &Density, theta: &ThetaModel) -> Vec<f64> {
    rho.values().iter().map(|&r| theta.theta1(r)).collect()
}

fn ledger_row(mesh: &Mesh, state: &SolverState, cfg: &SolverConfig) -> Result<LedgerRow> {
    let kinetic = state.kinetic(mesh);
    let internal = internal_energy(mesh, &state.rho, &cfg.theta)?;
    Ok(LedgerRow {
        step: 0,
        t: state.t,
        kinetic,
        internal,
        hamiltonian: kinetic + internal,
        w2_step: None,
        fisher: special_fisher(mesh, &state.rho, &cfg.theta)?,
        dissipation_margin: 0.0,
        budget: 0.0,
        decrease_margin: None,
        cross_margin: 0.0,
        contraction_margin: 0.0,
        jko_gap: 0.0,
        rho_min: state.rho.min(),
        rho_max: state.rho.max(),
        hessian_guard: cfg.h * mesh.hessian_sup(&theta1_field(&state.rho, &cfg.theta)),
    })
}

/// Ledger row of the initial state.
pub fn initial_row(mesh: &Mesh, state: &SolverState, cfg: &SolverConfig) -> Result<LedgerRow> {
    ledger_row(mesh, state, cfg)
}

/// One full step. `prev` is the ledger row of `state`.
pub fn step(mesh: &Mesh, state: &SolverState, prev: &LedgerRow, cfg: &SolverConfig) -> Result<(SolverState, LedgerRow)> {
    let h = cfg.h;
    let theta = &cfg.theta;
    let f_h = stage1_predict(mesh, &state.rho, &state.q, h)?;
    let (f, jko) = stage2_correct(mesh, &f_h, h, theta, cfg.eps(mesh), &cfg.jko)?;
    let rho_h = jko.rho_h.clone();
    let mass = mesh.integrate(rho_h.values());
    if (mass - 1.0).abs() > MASS_TOL {
        return Err(Error::Abort(format!("mass drifted to {mass}")));
    }
    let t1 = theta1_field(&rho_h, theta);
    let guard = h * mesh.hessian_sup(&t1);
    if guard > cfg.hessian_guard {
        return Err(Error::Abort(format!(
            "h·sup‖D²(Θ₁∘ρ)‖ = {guard} exceeds {}",
            cfg.hessian_guard
        )));
    }
    let (q, w, v) = stage3_project(mesh, &rho_h, &state.q, h, theta)?;
    let next = SolverState { rho: rho_h, q, v: v.clone(), w, t: state.t + h };

    let mut row = ledger_row(mesh, &next, cfg)?;
    row.step = prev.step + 1;
    row.jko_gap = jko.optimality_residual;
    row.budget = jko.optimality_residual / (h * h) + ROUNDOFF;
    row.dissipation_margin = prev.hamiltonian - row.hamiltonian - 0.5 * h * h * row.fisher;
    let gp = mesh.gradient(&t1);
    let work: Vec<f64> = (0..mesh.len())
        .map(|i| next.rho.values()[i] * gp[i].dot(&v[i]))
        .collect();
    row.cross_margin = prev.internal - row.internal + h * mesh.integrate(&work);
    row.contraction_margin = weighted_field_energy(mesh, &next.rho, &v) - 2.0 * row.kinetic;
    if cfg.audit {
        let w2_step = w2_squared_exact(mesh, &state.rho, &next.rho)?.value;
        let e_prev = w2_squared_exact(mesh, &f, &state.rho)?.value + h * h * prev.internal;
        row.w2_step = Some(w2_step);
        row.decrease_margin = Some(e_prev - jko.value - DECREASE_CONSTANT * w2_step);
    }
    Ok((next, row))
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// States at `t = 0, h, 2h, …`, including the initial one.
    pub snapshots: Vec<SolverState>,
    pub ledger: EnergyLedger,
    /// The error that stopped the run early, if any.
    pub abort: Option<Error>,
}

/// Iterate `⌊τ/h⌋` steps from `initial`. A failing step ends the run with the states so far.
pub fn run(mesh: &Mesh, initial: SolverState, cfg: &SolverConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut ledger = EnergyLedger { rows: vec![initial_row(mesh, &initial, cfg)?] };
    let mut snapshots = vec![initial];
    let mut abort = None;
    for _ in 0..cfg.steps() {
        let last = snapshots.last().unwrap();
        match step(mesh, last, ledger.rows.last().unwrap(), cfg) {
            Ok((s, r)) => {
                snapshots.push(s);
                ledger.rows.push(r);
            }
            Err(e) => {
                abort = Some(e);
                break;
            }
        }
    }
    Ok(RunOutput { snapshots, ledger, abort })
}

/// Space-time test function with its time derivative and surface gradient.
pub struct TestFunction<'a> {
    pub value: &'a dyn Fn(&Vec3, f64) -> f64,
    pub dt: &'a dyn Fn(&Vec3, f64) -> f64,
    pub grad: &'a dyn Fn(&Vec3, f64) -> Vec3,
}

fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    (0..n)
        .map(|k| {
            let left = if k > 0 { times[k] - times[k - 1] } else { 0.0 };
            let right = if k + 1 < n { times[k + 1] - times[k] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// `|∫ψ(τ)ρ_τ − ∫ψ(0)ρ₀ − ∫∫(∂_tψ + v·∇ψ)ρ dm dt|`, trapezoidal in time.
pub fn weak_continuity_residual(
    mesh: &Mesh,
    times: &[f64],
    densities: &[Density],
    velocities: &[VelocityField],
    psi: &TestFunction,
) -> Result<f64> {
    let n = times.len();
    if n < 2 || densities.len() != n || velocities.len() != n {
        return Err(Error::Invalid("need at least 2 snapshots with densities and velocities".into()));
    }
    let nodes = mesh.nodes();
    let pair = |k: usize, f: &dyn Fn(usize) -> f64| -> f64 {
        let vals: Vec<f64> = (0..nodes.len()).map(|i| f(i) * densities[k].values()[i]).collect();
        mesh.integrate(&vals)
    };
    let end = pair(n - 1, &|i| (psi.value)(&nodes[i], times[n - 1]));
    let start = pair(0, &|i| (psi.value)(&nodes[i], times[0]));
    let mut bulk = 0.0;
    for (k, wk) in trapezoid_weights(times).into_iter().enumerate() {
        let t = times[k];
        bulk += wk * pair(k, &|i| (psi.dt)(&nodes[i], t) + velocities[k][i].dot(&(psi.grad)(&nodes[i], t)));
    }
    Ok((end - start - bulk).abs())
}

/// `|∫∫φ·∂_t v ρ + ∫∫(φ·y + φ·∇(Θ₁∘ρ))ρ dm dt|` with centred differences in time; `φ` tangential.
pub fn weak_acceleration_residual(
    mesh: &Mesh,
    times: &[f64],
    densities: &[Density],
    velocities: &[VelocityField],
    phi: &dyn Fn(&Vec3, f64) -> Vec3,
    theta: &ThetaModel,
) -> Result<f64> {
    let n = times.len();
    if n < 3 || densities.len() != n || velocities.len() != n {
        return Err(Error::Invalid("need at least 3 snapshots with densities and velocities".into()));
    }
    let nodes = mesh.nodes();
    let mut total = 0.0;
    for (k, wk) in trapezoid_weights(times).into_iter().enumerate() {
        let (a, b) = if k == 0 { (0, 1) } else if k == n - 1 { (n - 2, n - 1) } else { (k - 1, k + 1) };
        let dt = times[b] - times[a];
        let gp = mesh.gradient(&theta1_field(&densities[k], theta));
        let vals: Vec<f64> = (0..nodes.len())
            .map(|i| {
                let p = tangent_projection(&nodes[i], &phi(&nodes[i], times[k]));
                let acc = (velocities[b][i] - velocities[a][i]) / dt;
                (p.dot(&acc) + p.dot(&nodes[i]) + p.dot(&gp[i])) * densities[k].values()[i]
            })
            .collect();
        total += wk * mesh.integrate(&vals);
    }
    Ok(total.abs())
}

#[derive(Clone, Debug)]
pub struct VorticityBudget {
    /// `sup|curl v_k|` per snapshot.
    pub sup_curl: Vec<f64>,
    /// `sup|curl v₀| + max_k (sup|curl ∇q_k| + h·sup|curl ∇(Θ₁∘ρ_k)|)`: the discrete curl defect
    /// of the gradient fields that make up each velocity.
    pub budget: f64,
}

impl VorticityBudget {
    pub fn margin(&self) -> f64 {
        self.budget - self.sup_curl.iter().cloned().fold(0.0, f64::max)
    }
}

/// Vorticity of a run's velocities against the curl defect of discrete gradients.
pub fn vorticity_budget(mesh: &Mesh, snapshots: &[SolverState], theta: &ThetaModel, h: f64) -> VorticityBudget {
    let sup = |v: &[Vec3]| mesh.curl_normal(v).iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    let sup_curl: Vec<f64> = snapshots.iter().map(|s| sup(&s.v)).collect();
    let defect = snapshots
        .iter()
        .map(|s| sup(&mesh.gradient(&s.q)) + h * sup(&mesh.gradient(&theta1_field(&s.rho, theta))))
        .fold(0.0, f64::max);
    VorticityBudget { budget: sup_curl.first().copied().unwrap_or(0.0) + defect, sup_curl }
}

/// `⨍q + ¼⨍‖∇q‖² − log ⨍eᵠ`, nonnegative by Onofri's inequality.
pub fn onofri_check(mesh: &Mesh, q: &[f64]) -> f64 {
    let area: f64 = mesh.weights().iter().sum();
    let mean = mesh.integrate(q) / area;
    let dirichlet = weighted_dirichlet(mesh, &Density::uniform(mesh), q) * area;
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = q.iter().map(|v| (v - m).exp()).collect();
    let log_mean_exp = m + (mesh.integrate(&shifted) / area).ln();
    mean + 0.25 * dirichlet / area - log_mean_exp
}

#[derive(Clone, Debug)]
pub struct GronwallReport {
    pub times: Vec<f64>,
    /// `W₁` between the two particle measures at each time.
    pub measured: Vec<f64>,
    /// Mass-weighted integrated forcing discrepancy along the paths.
    pub eta: Vec<f64>,
    /// Exponential envelope bounding `measured`.
    pub bound: Vec<f64>,
    /// Growth rate used in the envelope.
    pub rate: f64,
}

impl GronwallReport {
    /// `min_k (bound_k − measured_k)`.
    pub fn margin(&self) -> f64 {
        self.bound
            .iter()
            .zip(&self.measured)
            .map(|(b, m)| b - m)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Pressure forcing `−∇(Θ₁∘ρ(t))` of a run, linear in time between snapshots.
struct RunForcing<'a> {
    mesh: &'a Mesh,
    times: Vec<f64>,
    grads: Vec<VelocityField>,
}

impl<'a> RunForcing<'a> {
    fn new(mesh: &'a Mesh, run: &RunOutput, theta: &ThetaModel) -> Self {
        RunForcing {
            mesh,
            times: run.snapshots.iter().map(|s| s.t).collect(),
            grads: run
                .snapshots
                .iter()
                .map(|s| mesh.gradient(&theta1_field(&s.rho, theta)))
                .collect(),
        }
    }

    fn eval(&self, x: &Vec3, t: f64) -> Vec3 {
        let n = self.times.len();
        let k = self.times.partition_point(|&s| s <= t).clamp(1, n.max(2) - 1);
        let (a, b) = if n == 1 { (0, 0) } else { (k - 1, k) };
        let s = if a == b { 0.0 } else { ((t - self.times[a]) / (self.times[b] - self.times[a])).clamp(0.0, 1.0) };
        let hint = self.mesh.nearest_node(x, 0);
        let ga = self.mesh.interpolate_vector(&self.grads[a], x, hint);
        let gb = self.mesh.interpolate_vector(&self.grads[b], x, hint);
        -tangent_projection(x, &(ga * (1.0 - s) + gb * s))
    }
}

/// Compare two runs from the same initial data through the particle flows their pressure
/// fields drive. With `e = X_A − X_B`, `E = ‖e‖ + ‖ė‖` obeys `E' ≤ L·E + δ` where `δ` is the
/// forcing discrepancy along path `B` and `L = max(V̄² + Lip, 1 + 2V̄)`, `V̄` the largest speed and
/// `Lip = sup‖D²(Θ₁∘ρ)‖ + sup‖∇(Θ₁∘ρ)‖`. Hence the geodesic `W₁` is at most
/// `(π/2)Σ m_i ∫₀ᵗ e^{L(t−u)}δ_i(u)du`.
pub fn gronwall_compare(mesh: &Mesh, a: &RunOutput, b: &RunOutput, theta: &ThetaModel, dt: f64) -> Result<GronwallReport> {
    let (sa, sb) = (&a.snapshots[0], &b.snapshots[0]);
    if sa.rho.values() != sb.rho.values() || sa.q != sb.q {
        return Err(Error::Invalid("runs do not share initial data".into()));
    }
    let t_end = a.snapshots.last().unwrap().t.min(b.snapshots.last().unwrap().t);
    let fa = RunForcing::new(mesh, a, theta);
    let fb = RunForcing::new(mesh, b, theta);
    let ga = |x: &Vec3, t: f64| fa.eval(x, t);
    let gb = |x: &Vec3, t: f64| fb.eval(x, t);
    let grad_q = mesh.gradient(&sa.q);
    let initial: Vec<PhasePoint> = mesh
        .nodes()
        .iter()
        .zip(&grad_q)
        .map(|(x, v)| PhasePoint::new(*x, *v))
        .collect::<Result<_>>()?;
    let masses = sa.rho.masses(mesh);
    let ta = integrate_integral_bundle(&initial, &ga, 0.0, t_end, dt, "run A")?;
    let tb = integrate_integral_bundle(&initial, &gb, 0.0, t_end, dt, "run B")?;

    let mut lip: f64 = 0.0;
    for s in a.snapshots.iter().chain(&b.snapshots) {
        let t1 = theta1_field(&s.rho, theta);
        let g = mesh.gradient(&t1).iter().fold(0.0_f64, |m, v| m.max(v.norm()));
        lip = lip.max(mesh.hessian_sup(&t1) + g);
    }
    let vmax = ta
        .paths
        .iter()
        .chain(&tb.paths)
        .flat_map(|p| p.iter().map(|s| s.speed()))
        .fold(0.0_f64, f64::max);
    let rate = (vmax * vmax + lip).max(1.0 + 2.0 * vmax);

    let nt = ta.times.len();
    // δ_i(t_k) along path B
    let delta: Vec<Vec<f64>> = (0..nt)
        .map(|k| {
            tb.paths
                .iter()
                .map(|p| (ga(&p[k].x, tb.times[k]) - gb(&p[k].x, tb.times[k])).norm())
                .collect()
        })
        .collect();
    let stride = ((a.snapshots[1.min(a.snapshots.len() - 1)].t).max(b.snapshots[1.min(b.snapshots.len() - 1)].t) / dt)
        .round()
        .max(1.0) as usize;
    let mut report = GronwallReport { times: vec![], measured: vec![], eta: vec![], bound: vec![], rate };
    for k in (0..nt).step_by(stride) {
        let t = ta.times[k];
        let mut eta = 0.0;
        let mut env = 0.0;
        for (i, m) in masses.iter().enumerate() {
            let (mut e1, mut e2) = (0.0, 0.0);
            for j in 1..=k {
                let (u0, u1) = (ta.times[j - 1], ta.times[j]);
                let (d0, d1) = (delta[j - 1][i], delta[j][i]);
                e1 += 0.5 * (u1 - u0) * (d0 + d1);
                e2 += 0.5 * (u1 - u0) * (d0 * (rate * (t - u0)).exp() + d1 * (rate * (t - u1)).exp());
            }
            eta += m * e1;
            env += m * e2;
        }
        let pa = DiscreteMeasure { points: ta.positions_at(k), masses: masses.clone() };
        let pb = DiscreteMeasure { points: tb.positions_at(k), masses: masses.clone() };
        report.times.push(t);
        report.measured.push(if k == 0 { 0.0 } else { w1_points(&pa, &pb)? });
        report.eta.push(eta);
        report.bound.push(0.5 * PI * env);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zonal(mesh: &Mesh, a: f64, b: f64) -> SolverState {
        let rho = Density::normalized(mesh, mesh.sample(|x| 1.0 + a * x.z)).unwrap();
        SolverState::new(mesh, rho, mesh.sample(|x| b * x.z)).unwrap()
    }

    #[test]
    fn static_state_is_fixed() {
        let mesh = Mesh::icosphere(2).unwrap();
        let cfg = SolverConfig::new(0.05, 0.15, ThetaModel::power(1.4));
        let s0 = SolverState::new(&mesh, Density::uniform(&mesh), vec![0.0; mesh.len()]).unwrap();
        let out = run(&mesh, s0, &cfg).unwrap();
        assert!(out.abort.is_none());
        assert_eq!(out.snapshots.len(), 4);
        let h0 = out.ledger.rows[0].hamiltonian;
        for (s, r) in out.snapshots.iter().zip(&out.ledger.rows) {
            for (a, b) in s.rho.values().iter().zip(out.snapshots[0].rho.values()) {
                assert!((a - b).abs() < 1e-14);
            }
            assert!(s.q.iter().all(|v| v.abs() < 1e-14));
            assert!((r.hamiltonian - h0).abs() < 1e-10);
        }
    }

    #[test]
    fn stage1_examples() {
        let mesh = Mesh::icosphere(3).unwrap();
        let s = zonal(&mesh, 0.2, 0.1);
        let same = stage1_predict(&mesh, &s.rho, &vec![0.0; mesh.len()], 0.1).unwrap();
        assert_eq!(same.values(), s.rho.values());
        // E(ρ₀; f_h) ≤ h²H(ρ₀, q₀) up to deposition: W₂ ≤ √(h²K) + √D, where D is the cost of
        // spreading each transported atom over its triangle's nodes
        let h = 0.05;
        let f = stage1_predict(&mesh, &s.rho, &s.q, h).unwrap();
        let w2 = w2_squared_exact(&mesh, &f, &s.rho).unwrap().value;
        let gq = mesh.gradient(&s.q);
        let masses = s.rho.masses(&mesh);
        let mut dep = 0.0;
        for (i, x) in mesh.nodes().iter().enumerate() {
            let p = exp_raw(x, &(gq[i] * h));
            let (tri, bary) = mesh.locate(&p, i);
            for (k, l) in tri.iter().zip(bary) {
                dep += masses[i] * l * crate::ot::half_dsq(&p, &mesh.nodes()[*k]);
            }
        }
        let kinetic = 0.5 * mesh.integrate(&gq.iter().zip(s.rho.values()).map(|(g, r)| g.norm_squared() * r).collect::<Vec<_>>());
        assert!(w2.sqrt() <= (h * h * kinetic).sqrt() + dep.sqrt(), "{w2} {kinetic} {dep}");
    }

    #[test]
    fn stage3_static_and_gradient() {
        let mesh = Mesh::icosphere(3).unwrap();
        let theta = ThetaModel::power(1.4);
        let u = Density::uniform(&mesh);
        let (q, w, _) = stage3_project(&mesh, &u, &vec![0.0; mesh.len()], 0.02, &theta).unwrap();
        assert!(q.iter().all(|v| v.abs() < 1e-15) && w.iter().all(|v| v.norm() < 1e-15));
        // uniform density, q₀ = z: the carried velocity is ∇z transported, nearly a gradient
        let q0 = mesh.sample(|x| 0.1 * x.z);
        let (q, w, v) = stage3_project(&mesh, &u, &q0, 0.02, &theta).unwrap();
        let ev = weighted_field_energy(&mesh, &u, &v);
        let ew: f64 = mesh.integrate(&w.iter().zip(u.values()).map(|(w, r)| w.norm_squared() * r).collect::<Vec<_>>());
        assert!(ew < 1e-3 * ev, "{ew} {ev}");
        assert!(weighted_dirichlet(&mesh, &u, &q) <= ev * (1.0 + 1e-8));
    }

    #[test]
    fn zonal_run_ledger() {
        let mesh = Mesh::icosphere(3).unwrap();
        let mut cfg = SolverConfig::new(0.02, 0.1, ThetaModel::power(1.4));
        cfg.audit = true;
        let out = run(&mesh, zonal(&mesh, 0.2, 0.1), &cfg).unwrap();
        assert!(out.abort.is_none(), "{:?}", out.abort);
        assert_eq!(out.snapshots.len(), 6);
        for s in &out.snapshots {
            assert!((mesh.integrate(s.rho.values()) - 1.0).abs() < 1e-10);
        }
        assert!(out.ledger.worst_increase() <= 0.0);
        for r in &out.ledger.rows[1..] {
            assert!(r.dissipation_margin >= -r.budget, "{r:?}");
            assert!(r.decrease_margin.unwrap() >= -r.jko_gap - ROUNDOFF, "{r:?}");
            assert!(r.contraction_margin >= -1e-8 * r.kinetic, "{r:?}");
            assert!(r.cross_margin >= -r.budget, "{r:?}");
        }
    }

    #[test]
    fn weak_continuity_static_and_steady_rotation() {
        let mesh = Mesh::icosphere(3).unwrap();
        let times: Vec<f64> = (0..5).map(|k| k as f64 * 0.05).collect();
        let psi = TestFunction {
            value: &|x: &Vec3, t: f64| x.z * (1.0 - t / 0.2) + x.x * x.y,
            dt: &|x: &Vec3, _t: f64| -x.z / 0.2,
            grad: &|x: &Vec3, t: f64| {
                tangent_projection(x, &(Vec3::new(x.y, x.x, 1.0 - t / 0.2)))
            },
        };
        let u = Density::uniform(&mesh);
        let rho = vec![u.clone(); 5];
        let zero = vec![vec![Vec3::zeros(); mesh.len()]; 5];
        let r = weak_continuity_residual(&mesh, &times, &rho, &zero, &psi).unwrap();
        assert!(r < 1e-12, "{r}");
        let rot: Vec<Vec3> = mesh.nodes().iter().map(|x| Vec3::z().cross(x) * 0.7).collect();
        let r = weak_continuity_residual(&mesh, &times, &rho, &vec![rot.clone(); 5], &psi).unwrap();
        assert!(r < 1e-3, "{r}");
        let theta = ThetaModel::power(1.4);
        let phi = |x: &Vec3, _t: f64| tangent_projection(x, &Vec3::new(0.3, x.z, -x.y));
        let a = weak_acceleration_residual(&mesh, &times, &rho, &vec![rot; 5], &phi, &theta).unwrap();
        assert!(a < 1e-12, "{a}");
    }

    #[test]
    fn onofri_examples() {
        let mesh = Mesh::icosphere(4).unwrap();
        assert!(onofri_check(&mesh, &vec![0.0; mesh.len()]).abs() < 1e-15);
        let m = onofri_check(&mesh, &mesh.sample(|x| x.z));
        let exact = 1.0 / 6.0 - 1f64.sinh().ln();
        assert!((m - exact).abs() < 1e-3, "{m} {exact}");
        assert!((exact - 0.00523).abs() < 1e-5);
    }

    #[test]
    fn gronwall_identical_runs_are_zero() {
        let mesh = Mesh::icosphere(2).unwrap();
        let mut cfg = SolverConfig::new(0.05, 0.1, ThetaModel::power(1.4));
        cfg.audit = false;
        let out = run(&mesh, zonal(&mesh, 0.2, 0.1), &cfg).unwrap();
        let rep = gronwall_compare(&mesh, &out, &out, &cfg.theta, 0.01).unwrap();
        assert!(rep.measured.iter().all(|v| *v == 0.0));
        assert!(rep.bound.iter().all(|v| *v == 0.0));
        let other = run(&mesh, zonal(&mesh, 0.3, 0.1), &cfg).unwrap();
        assert!(gronwall_compare(&mesh, &out, &other, &cfg.theta, 0.01).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let theta = ThetaModel::power(1.4);
        assert!(SolverConfig::new(0.0, 0.1, theta.clone()).validate().is_err());
        assert!(SolverConfig::new(0.1, 0.05, theta).validate().is_err());
    }
}
