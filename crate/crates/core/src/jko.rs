//! Minimizing-movement corrector: `min_ρ W₂²(f, ρ) + h²U(ρ)` over discrete probability densities.
//!
//! The minimizer is computed by a semi-relaxed entropic scheme on arcs within a search radius,
//! driven down an ε schedule: rows are held at `f`, and each column mass solves its first-order
//! condition `ψ_j = −h²Θ₁(ρ_j)` by a safeguarded Newton step. The returned density is then
//! certified against the unregularized problem by the duality gap
//! `W₂²(f, ρ_h) − [Σ_i a_i ψ^c(x_i) + Σ_j m_j ψ_j]` with `ψ = −h²Θ₁(ρ_h)`, which bounds
//! `E(ρ_h) − min E` from above.
//!
//! On a fixed mesh with small `h` the exact discrete minimizer is often `ρ_h = f`: moving mass
//! one cell costs about `spacing²/2`, more than the internal energy it can release.

use rayon::prelude::*;

use crate::energy::{internal_energy, special_fisher, ThetaModel};
use crate::error::{Error, Result};
use crate::mesh::{Density, Mesh, ScalarField};
use crate::ot::{c_transform, half_dsq, transport_lp, w1_exact, LpOptions, PotentialPair, TransportPlan};
use crate::sphere_geom::{exp_raw, hessian_half_dsq_raw, sym2_eigenvalues, Vec3};

#[derive(Clone, Debug)]
pub struct JkoOptions {
    /// Lowest entropic temperature relative to the smallest neighbour cost.
    pub eps_ratio: f64,
    /// Relative change in column masses below which an ε stage stops.
    pub tol: f64,
    pub max_iterations: usize,
    /// Largest accepted duality gap.
    pub gap_tol: f64,
    /// Initial guess for `ρ_h`; defaults to `f`.
    pub initial: Option<Vec<f64>>,
}

impl Default for JkoOptions {
    fn default() -> Self {
        JkoOptions {
            eps_ratio: 1e-4,
            tol: 1e-10,
            max_iterations: 200_000,
            gap_tol: 1e-8,
            initial: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct JkoResult {
    pub rho_h: Density,
    /// `W₂²(f, ρ_h) + h²U(ρ_h)` with the exact transport cost.
    pub value: f64,
    /// Dual certificate: `phi1 = −h²Θ₁(ρ_h)` on the `ρ` side and its c-transform on the `f` side.
    pub potentials: PotentialPair,
    pub iterations: usize,
    /// Duality gap of the certificate; an upper bound on `value − min E`.
    pub optimality_residual: f64,
    /// Optimal plan from `f` to `ρ_h`.
    pub plan: TransportPlan,
    pub w2: f64,
}

/// `W₂²(f, ρ) + h²U(ρ)`.
pub fn energy(mesh: &Mesh, rho: &Density, f: &Density, h: f64, theta: &ThetaModel) -> Result<f64> {
    if h < 0.0 {
        return Err(Error::Domain(format!("h = {h} is negative")));
    }
    let w2 = crate::ot::w2_squared_exact(mesh, f, rho)?.value;
    Ok(w2 + h * h * internal_energy(mesh, rho, theta)?)
}

struct Arcs {
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    cost: Vec<f64>,
    col_ptr: Vec<usize>,
    /// Arc index of each entry in column order.
    by_col: Vec<usize>,
    row_of: Vec<usize>,
}

fn build_arcs(mesh: &Mesh, radius: f64) -> Arcs {
    let nodes = mesh.nodes();
    let n = nodes.len();
    let cos_r = radius.min(std::f64::consts::PI).cos();
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| nodes[i].dot(&nodes[j]) >= cos_r - 1e-15 || i == j)
                .map(|j| (j, half_dsq(&nodes[i], &nodes[j])))
                .collect()
        })
        .collect();
    let mut row_ptr = vec![0];
    let mut col = Vec::new();
    let mut cost = Vec::new();
    let mut row_of = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        for &(j, c) in r {
            col.push(j);
            cost.push(c);
            row_of.push(i);
        }
        row_ptr.push(col.len());
    }
    let mut counts = vec![0usize; n + 1];
    for &j in &col {
        counts[j + 1] += 1;
    }
    for j in 0..n {
        counts[j + 1] += counts[j];
    }
    let col_ptr = counts.clone();
    let mut fill = counts;
    let mut by_col = vec![0; col.len()];
    for (k, &j) in col.iter().enumerate() {
        by_col[fill[j]] = k;
        fill[j] += 1;
    }
    Arcs {
        row_ptr,
        col,
        cost,
        col_ptr,
        by_col,
        row_of,
    }
}

fn logsumexp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Solve `u + k Θ₁(eᵘ) = rhs` for `u`, starting near `u0`.
fn solve_column(theta: &ThetaModel, k: f64, rhs: f64, u0: f64) -> f64 {
    let g = |u: f64| u + k * theta.theta1(u.exp()) - rhs;
    let dg = |u: f64| {
        let r = u.exp();
        1.0 + k * r * theta.dtheta1(r)
    };
    let mut lo = u0;
    let mut hi = u0;
    let mut step = 1.0;
    if g(u0) > 0.0 {
        while g(lo) > 0.0 {
            lo -= step;
            step *= 2.0;
        }
    } else {
        while g(hi) < 0.0 {
            hi += step;
            step *= 2.0;
        }
    }
    let mut u = u0.clamp(lo, hi);
    for _ in 0..200 {
        let gu = g(u);
        if gu == 0.0 {
            return u;
        }
        if gu > 0.0 {
            hi = u;
        } else {
            lo = u;
        }
        let next = u - gu / dg(u);
        let next = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if (next - u).abs() <= 1e-15 * u.abs().max(1.0) || hi - lo <= 1e-15 * u.abs().max(1.0) {
            return next;
        }
        u = next;
    }
    u
}

/// One corrector step from `f`.
pub fn jko_step(
    mesh: &Mesh,
    f: &Density,
    h: f64,
    theta: &ThetaModel,
    opts: &JkoOptions,
) -> Result<JkoResult> {
    if h < 0.0 {
        return Err(Error::Domain(format!("h = {h} is negative")));
    }
    if let Some(i) = f.values().iter().position(|&v| v <= 0.0) {
        return Err(Error::Vacuum(i));
    }
    if h == 0.0 {
        let zero = vec![0.0; mesh.len()];
        return Ok(JkoResult {
            rho_h: f.clone(),
            value: 0.0,
            potentials: PotentialPair {
                phi2: c_transform(mesh, &zero),
                phi1: zero,
            },
            iterations: 0,
            optimality_residual: 0.0,
            plan: TransportPlan {
                entries: f.masses(mesh).iter().enumerate().map(|(i, &m)| (i, i, m)).collect(),
            },
            w2: 0.0,
        });
    }
    let h2 = h * h;
    let mut radius = if mesh.has_stencils() {
        let t1: Vec<f64> = f.values().iter().map(|&r| theta.theta1(r)).collect();
        let drift = mesh.gradient(&t1).iter().map(|v| v.norm()).fold(0.0, f64::max);
        3.0 * mesh.max_spacing() + 4.0 * h2 * drift
    } else {
        std::f64::consts::PI
    };
    let mut iterations = 0;
    let mut best: Option<JkoResult> = None;
    loop {
        let mut state = Entropic::new(mesh, f, h, theta, opts, radius)?;
        // certify at a few temperatures and stop at the first that passes
        let mut ratio = 0.1f64;
        loop {
            let ratio_now = ratio.max(opts.eps_ratio);
            let rho = state.run_to(ratio_now * state.unit)?;
            let result = certify(mesh, f, h, theta, rho, iterations + state.iterations)?;
            let gap = result.optimality_residual;
            if best.as_ref().map_or(true, |b| gap < b.optimality_residual) {
                best = Some(result);
            }
            if gap <= opts.gap_tol || ratio_now <= opts.eps_ratio {
                break;
            }
            ratio *= 0.1;
        }
        iterations += state.iterations;
        let b = best.as_ref().expect("at least one certificate");
        if b.optimality_residual <= opts.gap_tol {
            return Ok(best.unwrap());
        }
        if radius >= std::f64::consts::PI {
            return Err(Error::NonConvergence {
                what: "jko duality gap".into(),
                iterations,
                residual: b.optimality_residual,
            });
        }
        radius = (2.0 * radius).min(std::f64::consts::PI);
    }
}

/// Semi-relaxed entropic iteration state, resumable down the ε schedule.
struct Entropic<'a> {
    mesh: &'a Mesh,
    theta: &'a ThetaModel,
    arcs: Arcs,
    a: Vec<f64>,
    la: Vec<f64>,
    /// `log(w_j/area)` of the reference measure.
    lref: Vec<f64>,
    h2: f64,
    tol: f64,
    max_iterations: usize,
    u: Vec<f64>,
    psi: Vec<f64>,
    eps: f64,
    /// Smallest off-diagonal arc cost; the temperature scale.
    unit: f64,
    iterations: usize,
}

impl<'a> Entropic<'a> {
    fn new(
        mesh: &'a Mesh,
        f: &Density,
        h: f64,
        theta: &'a ThetaModel,
        opts: &JkoOptions,
        radius: f64,
    ) -> Result<Self> {
        let n = mesh.len();
        let w = mesh.weights();
        let h2 = h * h;
        let arcs = build_arcs(mesh, radius);
        let a = f.masses(mesh);
        let la: Vec<f64> = a.iter().map(|v| v.ln()).collect();
        let area: f64 = w.iter().sum();
        let lref = w.iter().map(|wj| (wj / area).ln()).collect();
        let unit = (0..n)
            .flat_map(|i| {
                let arcs = &arcs;
                (arcs.row_ptr[i]..arcs.row_ptr[i + 1])
                    .filter(move |&k| arcs.col[k] != i)
                    .map(move |k| arcs.cost[k])
            })
            .fold(f64::INFINITY, f64::min);
        let max_cost = arcs.cost.iter().cloned().fold(0.0, f64::max);
        let unit = if unit.is_finite() { unit } else { max_cost.max(1.0) };
        let init: Vec<f64> = match &opts.initial {
            Some(r) if r.len() == n && r.iter().all(|v| *v > 0.0) => r.clone(),
            Some(_) => return Err(Error::Invalid("initial density must be positive".into())),
            None => f.values().to_vec(),
        };
        Ok(Entropic {
            mesh,
            theta,
            u: init.iter().map(|r| r.ln()).collect(),
            psi: init.iter().map(|&r| -h2 * theta.theta1(r)).collect(),
            arcs,
            a,
            la,
            lref,
            h2,
            tol: opts.tol,
            max_iterations: opts.max_iterations,
            eps: max_cost.max(unit),
            unit,
            iterations: 0,
        })
    }

    fn row_potentials(&self) -> Vec<f64> {
        let (arcs, eps) = (&self.arcs, self.eps);
        (0..self.mesh.len())
            .into_par_iter()
            .map(|i| {
                let r = arcs.row_ptr[i]..arcs.row_ptr[i + 1];
                -eps * logsumexp(
                    r.map(|k| (self.psi[arcs.col[k]] - arcs.cost[k]) / eps + self.lref[arcs.col[k]]),
                )
            })
            .collect()
    }

    /// Iterate down to temperature `target` and return the column densities of the plan.
    fn run_to(&mut self, target: f64) -> Result<Vec<f64>> {
        let n = self.mesh.len();
        loop {
            let last = self.eps <= target;
            let stage_tol = if last { self.tol } else { 1e-6 };
            let mut k = 0;
            loop {
                let phi = self.row_potentials();
                let (arcs, eps, h2, theta) = (&self.arcs, self.eps, self.h2, self.theta);
                let cols: Vec<f64> = (0..n)
                    .into_par_iter()
                    .map(|j| {
                        let r = arcs.col_ptr[j]..arcs.col_ptr[j + 1];
                        let l = logsumexp(r.map(|p| {
                            let k = arcs.by_col[p];
                            let i = arcs.row_of[k];
                            self.la[i] + (phi[i] - arcs.cost[k]) / eps
                        }));
                        // log β_j − log w_j = −log(area)
                        let rhs = l + self.lref[j] - self.mesh.weights()[j].ln();
                        solve_column(theta, h2 / eps, rhs, self.u[j])
                    })
                    .collect();
                let change = cols
                    .iter()
                    .zip(&self.u)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                for (j, uj) in cols.into_iter().enumerate() {
                    self.u[j] = uj;
                    self.psi[j] = -h2 * theta.theta1(uj.exp());
                }
                k += 1;
                self.iterations += 1;
                if change < stage_tol {
                    break;
                }
                if self.iterations >= self.max_iterations {
                    return Err(Error::NonConvergence {
                        what: "jko entropic iterations".into(),
                        iterations: self.iterations,
                        residual: change,
                    });
                }
                if !last && k >= 2000 {
                    break;
                }
            }
            if last {
                break;
            }
            self.eps = (self.eps * 0.5).max(target);
        }
        // a final row update makes the plan's rows exact; columns then define ρ_h
        let (arcs, eps) = (&self.arcs, self.eps);
        let w = self.mesh.weights();
        let mut m = vec![0.0; n];
        for i in 0..n {
            let r = arcs.row_ptr[i]..arcs.row_ptr[i + 1];
            let lse = logsumexp(
                r.clone()
                    .map(|k| (self.psi[arcs.col[k]] - arcs.cost[k]) / eps + self.lref[arcs.col[k]]),
            );
            for k in r {
                let j = arcs.col[k];
                let lp = (self.psi[j] - arcs.cost[k]) / eps + self.lref[j] - lse;
                m[j] += self.a[i] * lp.exp();
            }
        }
        Ok(m.iter().zip(w).map(|(mj, wj)| mj / wj).collect())
    }
}

fn certify(
    mesh: &Mesh,
    f: &Density,
    h: f64,
    theta: &ThetaModel,
    rho: Vec<f64>,
    iterations: usize,
) -> Result<JkoResult> {
    let rho_h = Density::normalized(mesh, rho)?;
    if let Some(i) = rho_h.values().iter().position(|&v| v <= 0.0) {
        return Err(Error::Vacuum(i));
    }
    let h2 = h * h;
    let nodes = mesh.nodes();
    let c = |i: usize, j: usize| half_dsq(&nodes[i], &nodes[j]);
    let a = f.masses(mesh);
    let b = rho_h.masses(mesh);
    let lp = transport_lp(&a, &b, &c, &LpOptions::default())?;
    let beta: Vec<f64> = rho_h.values().iter().map(|&r| -h2 * theta.theta1(r)).collect();
    let beta_c = c_transform(mesh, &beta);
    let dual_transport: f64 = a.iter().zip(&beta_c).map(|(x, y)| x * y).sum::<f64>()
        + b.iter().zip(&beta).map(|(x, y)| x * y).sum::<f64>();
    let gap = (lp.value - dual_transport).max(0.0);
    let u = internal_energy(mesh, &rho_h, theta)?;
    Ok(JkoResult {
        value: lp.value + h2 * u,
        w2: lp.value,
        plan: lp.plan,
        potentials: PotentialPair {
            phi1: beta,
            phi2: beta_c,
        },
        iterations,
        optimality_residual: gap,
        rho_h,
    })
}

/// `W₁(T♯ρ_h, f)` for `T(x) = exp_x(h²∇(Θ₁∘ρ_h)(x))`.
pub fn optimality_map_residual(
    mesh: &Mesh,
    result: &JkoResult,
    f: &Density,
    h: f64,
    theta: &ThetaModel,
) -> Result<f64> {
    let h2 = h * h;
    let t1: Vec<f64> = result.rho_h.values().iter().map(|&r| theta.theta1(r)).collect();
    let disp: Vec<Vec3> = mesh.gradient(&t1).iter().map(|g| g * h2).collect();
    let pushed = crate::ot::push_forward_field(mesh, &disp, &result.rho_h)?;
    w1_exact(mesh, &pushed, f)
}

/// `δ₁ − tol ≤ ρ_h ≤ 1/δ₁ + tol`.
pub fn minimizer_bounds_check(result: &JkoResult, delta1: f64, tol: f64) -> bool {
    result.rho_h.min() >= delta1 - tol && result.rho_h.max() <= 1.0 / delta1 + tol
}

/// `U(f) − U(ρ_h) − h²∫ρ_h‖∇(Θ₁∘ρ_h)‖²dm`.
pub fn fisher_gap_check(
    mesh: &Mesh,
    f: &Density,
    result: &JkoResult,
    h: f64,
    theta: &ThetaModel,
) -> Result<f64> {
    Ok(internal_energy(mesh, f, theta)?
        - internal_energy(mesh, &result.rho_h, theta)?
        - h * h * special_fisher(mesh, &result.rho_h, theta)?)
}

/// Centered second differences in `s` of
/// `log det[D²(d²/2)|_{y = F(s)} + (1−s)hD²φ₀ + sh²D²φ_h]` at mesh node `node`, where
/// `F(s) = exp_x(h(1−s)∇φ₀ + h²s∇φ_h)`, on `samples` equally spaced values of `s ∈ [0, 1]`.
pub fn jacobian_logconcavity_probe(
    mesh: &Mesh,
    phi0: &[f64],
    phih: &[f64],
    node: usize,
    h: f64,
    samples: usize,
) -> Result<Vec<f64>> {
    if samples < 3 {
        return Err(Error::Invalid("need at least three samples".into()));
    }
    let x = mesh.nodes()[node];
    let g0 = mesh.gradient_at(node, phi0);
    let gh = mesh.gradient_at(node, phih);
    if h * g0.norm() + h * h * gh.norm() >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::Domain("h is too large for the log-concavity hypothesis".into()));
    }
    let h0 = mesh.hessian_at(node, phi0);
    let hh = mesh.hessian_at(node, phih);
    let (e1, e2) = mesh.basis(node);
    let mut logdet = Vec::with_capacity(samples);
    for k in 0..samples {
        let s = k as f64 / (samples - 1) as f64;
        let v = g0 * (h * (1.0 - s)) + gh * (h * h * s);
        let y = exp_raw(&x, &v);
        let m = hessian_half_dsq_raw(&x, &y, mesh.node(node)).in_plane(&e1, &e2)
            + h0 * ((1.0 - s) * h)
            + hh * (s * h * h);
        let ev = sym2_eigenvalues(&m);
        if ev[0] <= 0.0 {
            return Err(Error::Domain(format!("matrix not positive definite at s = {s}")));
        }
        logdet.push(m.determinant().ln());
    }
    Ok((1..samples - 1)
        .map(|k| logdet[k + 1] - 2.0 * logdet[k] + logdet[k - 1])
        .collect())
}

/// `T_h*` displacement field `h²∇(Θ₁∘ρ_h)` on the nodes.
pub fn optimal_map_field(mesh: &Mesh, rho_h: &Density, h: f64, theta: &ThetaModel) -> Vec<Vec3> {
    let t1: ScalarField = rho_h.values().iter().map(|&r| theta.theta1(r)).collect();
    mesh.gradient(&t1).iter().map(|g| g * (h * h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::dual_lower_bound_scaled;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn zonal(mesh: &Mesh, a: f64) -> Density {
        Density::normalized(mesh, mesh.sample(|x| 1.0 + a * x.z)).unwrap()
    }

    #[test]
    fn energy_examples() {
        let mesh = Mesh::icosphere(2).unwrap();
        let t = ThetaModel::power(1.4);
        let u = Density::uniform(&mesh);
        let f = zonal(&mesh, 0.2);
        let uf = internal_energy(&mesh, &f, &t).unwrap();
        assert_abs_diff_eq!(energy(&mesh, &f, &f, 0.3, &t).unwrap(), 0.09 * uf, epsilon = 1e-15);
        let w = crate::ot::w2_squared_exact(&mesh, &f, &u).unwrap().value;
        assert_abs_diff_eq!(energy(&mesh, &u, &f, 0.0, &t).unwrap(), w, epsilon = 1e-15);
        assert_abs_diff_eq!(energy(&mesh, &u, &u, 0.1, &t).unwrap(), 0.01 * (4.0 * PI).powf(-0.4), epsilon = 1e-9);
    }

    #[test]
    fn zero_step_is_identity() {
        let mesh = Mesh::icosphere(2).unwrap();
        let f = zonal(&mesh, 0.3);
        let r = jko_step(&mesh, &f, 0.0, &ThetaModel::power(1.4), &JkoOptions::default()).unwrap();
        assert_eq!(r.rho_h, f);
        assert!(optimality_map_residual(&mesh, &r, &f, 0.0, &ThetaModel::power(1.4)).unwrap() < 1e-15);
    }

    #[test]
    fn uniform_is_fixed() {
        let mesh = Mesh::icosphere(2).unwrap();
        let u = Density::uniform(&mesh);
        let t = ThetaModel::power(1.4);
        let r = jko_step(&mesh, &u, 0.3, &t, &JkoOptions::default()).unwrap();
        let dev = r.rho_h.values().iter().zip(u.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-12, "{dev}");
        assert!(minimizer_bounds_check(&r, 1.0 / (4.0 * PI), 1e-12));
        assert!(fisher_gap_check(&mesh, &u, &r, 0.3, &t).unwrap().abs() < 1e-12);
        assert!(optimality_map_residual(&mesh, &r, &u, 0.3, &t).unwrap() < 1e-9);
    }

    fn three_node_mesh() -> Mesh {
        let nodes = vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        Mesh::point_set(nodes, vec![4.0 * PI / 3.0; 3]).unwrap()
    }

    #[test]
    fn three_node_matches_simplex_scan() {
        let mesh = three_node_mesh();
        let w = 4.0 * PI / 3.0;
        let t = ThetaModel::power(2.0);
        let h = 0.5;
        let f = Density::new(&mesh, vec![0.6 / w, 0.3 / w, 0.1 / w]).unwrap();
        let r = jko_step(&mesh, &f, h, &t, &JkoOptions::default()).unwrap();
        // coarse-to-fine scan of the 2-simplex of node masses
        let eval = |m0: f64, m1: f64| {
            let m2 = (1.0 - m0 - m1).max(0.0);
            let rho = Density::new(&mesh, vec![m0 / w, m1 / w, m2 / w]).unwrap();
            energy(&mesh, &rho, &f, h, &t).unwrap()
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=100 {
            for j in 0..=(100 - i) {
                let (m0, m1) = (i as f64 / 100.0, j as f64 / 100.0);
                let v = eval(m0, m1);
                if v < best.0 {
                    best = (v, m0, m1);
                }
            }
        }
        for _ in 0..3 {
            let (c0, c1) = (best.1, best.2);
            for i in -20..=20 {
                for j in -20..=20 {
                    let (m0, m1) = (c0 + i as f64 * 1e-3, c1 + j as f64 * 1e-3);
                    if m0 < 0.0 || m1 < 0.0 || m0 + m1 > 1.0 {
                        continue;
                    }
                    let v = eval(m0, m1);
                    if v < best.0 {
                        best = (v, m0, m1);
                    }
                }
            }
        }
        assert!((r.value - best.0).abs() < 1e-4, "{} {}", r.value, best.0);
        assert!(r.value <= best.0 + 1e-12);
        assert!(r.optimality_residual < 1e-8);
    }

    #[test]
    fn zonal_step_properties() {
        let mesh = Mesh::icosphere(3).unwrap();
        let t = ThetaModel::power(1.4);
        let h = 0.05;
        let f = zonal(&mesh, 0.3);
        let r = jko_step(&mesh, &f, h, &t, &JkoOptions::default()).unwrap();
        assert!(r.optimality_residual < 1e-8);
        assert!(minimizer_bounds_check(&r, 0.7 / (4.0 * PI), 0.05 / (4.0 * PI)));
        let margin = fisher_gap_check(&mesh, &f, &r, h, &t).unwrap();
        assert!(margin >= -1e-4, "{margin}");
        // the certificate is a dual lower bound for the same objective
        let lb = dual_lower_bound_scaled(&mesh, &r.potentials, &f, &t, h).unwrap();
        assert!(lb <= r.value + 1e-12);
        assert!(r.value - lb <= r.optimality_residual + 1e-12);
        // probe panel
        for probe in [f.clone(), Density::uniform(&mesh), crate::mesh::mollify(&mesh, &f, 0.3).unwrap()] {
            assert!(r.value <= energy(&mesh, &probe, &f, h, &t).unwrap() + 1e-12);
        }
        let res = optimality_map_residual(&mesh, &r, &f, h, &t).unwrap();
        let drift = optimal_map_field(&mesh, &r.rho_h, h, &t).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(res <= drift + 1e-12, "{res} {drift}");
    }

    #[test]
    fn different_initializations_agree() {
        let mesh = Mesh::icosphere(2).unwrap();
        let t = ThetaModel::power(2.0);
        let h = 0.4;
        let f = zonal(&mesh, 0.5);
        let a = jko_step(&mesh, &f, h, &t, &JkoOptions::default()).unwrap();
        let opts = JkoOptions {
            initial: Some(Density::uniform(&mesh).into_values()),
            ..JkoOptions::default()
        };
        let b = jko_step(&mesh, &f, h, &t, &opts).unwrap();
        assert!((a.value - b.value).abs() < 1e-7);
        let l1: f64 = a.rho_h.values().iter().zip(b.rho_h.values()).zip(mesh.weights()).map(|((x, y), w)| (x - y).abs() * w).sum();
        assert!(l1 < 1e-4, "{l1}");
    }

    #[test]
    fn objective_is_convex_along_segments() {
        let mesh = Mesh::icosphere(1).unwrap();
        let t = ThetaModel::power(1.4);
        let f = zonal(&mesh, 0.4);
        let r0 = zonal(&mesh, -0.3);
        let r1 = Density::normalized(&mesh, mesh.sample(|x| 1.0 + 0.5 * x.x)).unwrap();
        for &s in &[0.25, 0.5, 0.75] {
            let mix: Vec<f64> = r0.values().iter().zip(r1.values()).map(|(a, b)| (1.0 - s) * a + s * b).collect();
            let rs = Density::normalized(&mesh, mix).unwrap();
            let lhs = energy(&mesh, &rs, &f, 0.5, &t).unwrap();
            let rhs = (1.0 - s) * energy(&mesh, &r0, &f, 0.5, &t).unwrap() + s * energy(&mesh, &r1, &f, 0.5, &t).unwrap();
            assert!(lhs <= rhs + 1e-9);
        }
    }

    #[test]
    fn broken_result_with_vacuum_fails_bounds() {
        let mesh = Mesh::icosphere(1).unwrap();
        let u = Density::uniform(&mesh);
        let mut r = jko_step(&mesh, &u, 0.1, &ThetaModel::power(1.4), &JkoOptions::default()).unwrap();
        let mut v = u.values().to_vec();
        let k = v.len() - 1;
        v[0] += v[k] * mesh.weights()[k] / mesh.weights()[0];
        v[k] = 0.0;
        r.rho_h = Density::new(&mesh, v).unwrap();
        assert!(!minimizer_bounds_check(&r, 1.0 / (4.0 * PI), 1e-6));
    }

    #[test]
    fn logconcavity_probe() {
        let mesh = Mesh::icosphere(3).unwrap();
        let zero = vec![0.0; mesh.len()];
        for d in jacobian_logconcavity_probe(&mesh, &zero, &zero, 5, 0.1, 21).unwrap() {
            assert!(d.abs() < 1e-14);
        }
        // radial case against the scalar closed form
        let c = 2.0;
        let phi0 = mesh.sample(|x| c * x.z);
        let node = 100;
        let h = 0.3;
        let d = jacobian_logconcavity_probe(&mesh, &phi0, &zero, node, h, 41).unwrap();
        assert!(d.iter().all(|&v| v <= 1e-8));
        let g = mesh.gradient_at(node, &phi0).norm();
        let hs = mesh.hessian_at(node, &phi0);
        let ev = sym2_eigenvalues(&hs);
        let closed = |s: f64| {
            let tau = (1.0 - s) * h * g;
            let tc = crate::sphere_geom::tau_cot(tau);
            // the Hessian of c·z is −c·z times the identity up to mesh error
            let lam = 0.5 * (ev[0] + ev[1]);
            ((1.0 + (1.0 - s) * h * lam) * (tc + (1.0 - s) * h * lam)).ln()
        };
        let ds = 1.0 / 40.0;
        for (k, v) in d.iter().enumerate() {
            let s = (k + 1) as f64 * ds;
            let e = closed(s + ds) - 2.0 * closed(s) + closed(s - ds);
            assert!((v - e).abs() < 1e-4, "{v} {e}");
        }
        let phih = mesh.sample(|x| 0.3 * x.x * x.y);
        let phi0 = mesh.sample(|x| 0.5 * x.z + 0.2 * x.x);
        for node in [0, 50, 300] {
            for v in jacobian_logconcavity_probe(&mesh, &phi0, &phih, node, 0.2, 21).unwrap() {
                assert!(v <= 1e-4);
            }
        }
        let equator = (0..mesh.len())
            .min_by(|&a, &b| mesh.nodes()[a].z.abs().total_cmp(&mesh.nodes()[b].z.abs()))
            .unwrap();
        let steep = mesh.sample(|x| 10.0 * x.z);
        assert!(jacobian_logconcavity_probe(&mesh, &steep, &zero, equator, 0.5, 5).is_err());
    }
}
