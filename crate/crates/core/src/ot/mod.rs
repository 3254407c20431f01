//! Discrete optimal transport on the sphere with cost `c(x, y) = d(x, y)²/2`.
//!
//! The 1/2 sits inside the cost, so every "W₂²" value here is half the squared distance used by
//! standard OT libraries. Two unit Diracs a quarter circle apart are at `π²/8`, not `π²/4`.

mod network_simplex;
mod sinkhorn;

pub use network_simplex::NetworkSimplex;
pub use sinkhorn::{sinkhorn, sinkhorn_dense, SinkhornSolution};

use std::collections::HashSet;

use rayon::prelude::*;

use crate::energy::ThetaModel;
use crate::error::{Error, Result};
use crate::mesh::{Density, Mesh, ScalarField};
use crate::sphere_geom::{distance_raw, exp_raw, hessian_half_dsq_raw, Vec3};

/// `d(x, y)²/2`.
pub fn half_dsq(x: &Vec3, y: &Vec3) -> f64 {
    let d = distance_raw(x, y);
    0.5 * d * d
}

/// Dense cost matrix `c_ij = d(x_i, y_j)²/2`, row-major.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<f64>,
}

impl CostMatrix {
    pub fn half_dsq(xs: &[Vec3], ys: &[Vec3]) -> Self {
        Self::from_fn(xs, ys, half_dsq)
    }

    pub fn from_fn(xs: &[Vec3], ys: &[Vec3], f: impl Fn(&Vec3, &Vec3) -> f64 + Sync) -> Self {
        let entries = xs
            .par_iter()
            .flat_map_iter(|x| ys.iter().map(|y| f(x, y)).collect::<Vec<_>>())
            .collect();
        CostMatrix {
            rows: xs.len(),
            cols: ys.len(),
            entries,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }
}

/// Sparse coupling `(i, j, mass)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransportPlan {
    pub entries: Vec<(usize, usize, f64)>,
}

impl TransportPlan {
    pub fn row_marginals(&self, m: usize) -> Vec<f64> {
        let mut r = vec![0.0; m];
        for &(i, _, v) in &self.entries {
            r[i] += v;
        }
        r
    }

    pub fn col_marginals(&self, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; n];
        for &(_, j, v) in &self.entries {
            c[j] += v;
        }
        c
    }

    pub fn cost(&self, c: impl Fn(usize, usize) -> f64) -> f64 {
        self.entries.iter().map(|&(i, j, v)| v * c(i, j)).sum()
    }
}

/// Kantorovich potentials with `φ₁(x_i) + φ₂(y_j) ≤ c_ij`.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialPair {
    pub phi1: Vec<f64>,
    pub phi2: Vec<f64>,
}

impl PotentialPair {
    pub fn zeros(m: usize, n: usize) -> Self {
        PotentialPair {
            phi1: vec![0.0; m],
            phi2: vec![0.0; n],
        }
    }

    /// Largest violation of `φ₁(x_i) + φ₂(y_j) ≤ c(x_i, y_j)`.
    pub fn max_violation(&self, c: impl Fn(usize, usize) -> f64 + Sync) -> f64 {
        (0..self.phi1.len())
            .into_par_iter()
            .map(|i| {
                self.phi2
                    .iter()
                    .enumerate()
                    .map(|(j, p2)| self.phi1[i] + p2 - c(i, j))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .reduce(|| f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct ExactSolution {
    pub value: f64,
    pub plan: TransportPlan,
    /// `phi1` on the source points, `phi2` on the target points.
    pub potentials: PotentialPair,
    pub pivots: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LpOptions {
    /// Arcs per row and per column in the initial restricted problem.
    pub initial_neighbors: usize,
    /// Problems with at most this many cells are solved on the full bipartite graph.
    pub dense_limit: usize,
    pub reduced_cost_tol: f64,
    pub max_pivots: usize,
}

impl Default for LpOptions {
    fn default() -> Self {
        LpOptions {
            initial_neighbors: 12,
            dense_limit: 40_000,
            reduced_cost_tol: 1e-13,
            max_pivots: 50_000_000,
        }
    }
}

/// Exact transportation LP between masses `a` and `b` under `cost(i, j) ≥ 0`.
///
/// Large problems start from nearest-neighbour arcs and add violated arcs after each solve until
/// every pair prices out, so the result is optimal on the full bipartite graph.
pub fn transport_lp(
    a: &[f64],
    b: &[f64],
    cost: &(dyn Fn(usize, usize) -> f64 + Sync),
    opts: &LpOptions,
) -> Result<ExactSolution> {
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    if a.iter().chain(b).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Infeasible("negative or non-finite mass".into()));
    }
    if (sa - sb).abs() > 1e-9 * sa.max(sb).max(1.0) {
        return Err(Error::Infeasible(format!("masses differ: {sa} vs {sb}")));
    }
    let rows: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..b.len()).filter(|&j| b[j] > 0.0).collect();
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::Infeasible("empty marginal".into()));
    }
    let (m, n) = (rows.len(), cols.len());
    let c = |i: usize, j: usize| cost(rows[i], cols[j]);
    let max_cost = (0..m)
        .into_par_iter()
        .map(|i| (0..n).map(|j| c(i, j)).fold(0.0, f64::max))
        .reduce(|| 0.0, f64::max);
    let tol = opts.reduced_cost_tol * max_cost.max(1.0);

    let supply: Vec<f64> = rows.iter().map(|&i| a[i]).collect();
    let demand: Vec<f64> = cols.iter().map(|&j| b[j]).collect();
    let dense = m * n <= opts.dense_limit;
    let mut present: HashSet<(usize, usize)> = HashSet::new();
    let mut initial = Vec::new();
    if dense {
        for i in 0..m {
            for j in 0..n {
                initial.push((i, j, c(i, j)));
            }
        }
    } else {
        let k = opts.initial_neighbors.min(n).max(1);
        let by_row: Vec<Vec<usize>> = (0..m)
            .into_par_iter()
            .map(|i| nearest(k, n, |j| c(i, j)))
            .collect();
        for (i, js) in by_row.iter().enumerate() {
            for &j in js {
                if present.insert((i, j)) {
                    initial.push((i, j, c(i, j)));
                }
            }
        }
        let k = opts.initial_neighbors.min(m).max(1);
        let by_col: Vec<Vec<usize>> = (0..n)
            .into_par_iter()
            .map(|j| nearest(k, m, |i| c(i, j)))
            .collect();
        for (j, is) in by_col.iter().enumerate() {
            for &i in is {
                if present.insert((i, j)) {
                    initial.push((i, j, c(i, j)));
                }
            }
        }
    }
    let mut ns = NetworkSimplex::new(&supply, &demand, &initial, max_cost);
    loop {
        ns.solve(tol, opts.max_pivots)?;
        if dense {
            break;
        }
        let (alpha, beta) = ns.potentials();
        let per_row = 8usize;
        let fresh: Vec<Vec<(usize, usize, f64)>> = (0..m)
            .into_par_iter()
            .map(|i| {
                let mut v: Vec<(usize, usize, f64)> = Vec::new();
                for j in 0..n {
                    let cij = c(i, j);
                    if cij - alpha[i] - beta[j] < -tol {
                        v.push((i, j, cij - alpha[i] - beta[j]));
                    }
                }
                v.sort_by(|x, y| x.2.total_cmp(&y.2));
                v.truncate(per_row);
                v.into_iter().map(|(i, j, _)| (i, j, c(i, j))).collect()
            })
            .collect();
        let mut added = Vec::new();
        for list in fresh {
            for arc in list {
                if present.insert((arc.0, arc.1)) {
                    added.push(arc);
                }
            }
        }
        if added.is_empty() {
            break;
        }
        ns.add_arcs(&added);
    }
    if ns.artificial_flow() > 1e-9 * sa.max(1.0) {
        return Err(Error::Infeasible("transport problem has no feasible plan".into()));
    }
    let flows = ns.real_flows();
    let value = flows.iter().map(|f| f.2 * f.3).sum();
    let plan = TransportPlan {
        entries: flows.iter().map(|f| (rows[f.0], cols[f.1], f.2)).collect(),
    };
    let (alpha, beta) = ns.potentials();
    // potentials on zero-mass points by c-transform against the supported side
    let mut phi2 = vec![f64::NAN; b.len()];
    for (k, &j) in cols.iter().enumerate() {
        phi2[j] = beta[k];
    }
    let mut phi1 = vec![f64::NAN; a.len()];
    for (k, &i) in rows.iter().enumerate() {
        phi1[i] = alpha[k];
    }
    for i in 0..a.len() {
        if phi1[i].is_nan() {
            phi1[i] = cols
                .iter()
                .map(|&j| cost(i, j) - phi2[j])
                .fold(f64::INFINITY, f64::min);
        }
    }
    for j in 0..b.len() {
        if phi2[j].is_nan() {
            phi2[j] = (0..a.len())
                .map(|i| cost(i, j) - phi1[i])
                .fold(f64::INFINITY, f64::min);
        }
    }
    Ok(ExactSolution {
        value,
        plan,
        potentials: PotentialPair { phi1, phi2 },
        pivots: ns.pivots,
    })
}

fn nearest(k: usize, n: usize, c: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = (0..n).map(|j| (c(j), j)).collect();
    if k < n {
        idx.select_nth_unstable_by(k - 1, |x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        idx.truncate(k);
    }
    idx.into_iter().map(|e| e.1).collect()
}

/// Point masses at unit vectors.
#[derive(Clone, Debug)]
pub struct DiscreteMeasure {
    pub points: Vec<Vec3>,
    pub masses: Vec<f64>,
}

/// Exact `W₂²` (paper convention, cost `d²/2`) between two point measures.
pub fn w2_squared_points(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<ExactSolution> {
    let c = |i: usize, j: usize| half_dsq(&mu.points[i], &nu.points[j]);
    transport_lp(&mu.masses, &nu.masses, &c, &LpOptions::default())
}

/// Exact `W₁` with cost `d` between two point measures.
pub fn w1_points(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    let c = |i: usize, j: usize| distance_raw(&mu.points[i], &nu.points[j]);
    Ok(transport_lp(&mu.masses, &nu.masses, &c, &LpOptions::default())?.value)
}

/// Exact `W₂²` between two densities on the same mesh.
pub fn w2_squared_exact(mesh: &Mesh, mu: &Density, nu: &Density) -> Result<ExactSolution> {
    let nodes = mesh.nodes();
    let c = |i: usize, j: usize| half_dsq(&nodes[i], &nodes[j]);
    transport_lp(&mu.masses(mesh), &nu.masses(mesh), &c, &LpOptions::default())
}

/// Exact `W₁` between two densities on the same mesh.
pub fn w1_exact(mesh: &Mesh, mu: &Density, nu: &Density) -> Result<f64> {
    let nodes = mesh.nodes();
    let c = |i: usize, j: usize| distance_raw(&nodes[i], &nodes[j]);
    Ok(transport_lp(&mu.masses(mesh), &nu.masses(mesh), &c, &LpOptions::default())?.value)
}

/// `Φᶜ(x_i) = min_j { d(x_i, x_j)²/2 − Φ(x_j) }` over mesh nodes.
pub fn c_transform(mesh: &Mesh, phi: &[f64]) -> ScalarField {
    c_transform_points(mesh.nodes(), mesh.nodes(), phi)
}

/// c-transform from potentials on `ys` to values on `xs`.
pub fn c_transform_points(xs: &[Vec3], ys: &[Vec3], phi: &[f64]) -> ScalarField {
    xs.par_iter()
        .map(|x| {
            ys.iter()
                .zip(phi)
                .map(|(y, p)| half_dsq(x, y) - p)
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// `T♯μ` for `T(x_i) = exp_{x_i}(v_i)`, deposited barycentrically.
pub fn push_forward_field(mesh: &Mesh, displacement: &[Vec3], mu: &Density) -> Result<Density> {
    let nodes = mesh.nodes();
    if displacement.iter().all(|v| *v == Vec3::zeros()) {
        return Ok(mu.clone());
    }
    if let Some(i) = displacement.iter().position(|v| !(v.norm() < std::f64::consts::PI)) {
        return Err(Error::CutLocus(format!(
            "displacement {} at node {i} exceeds the injectivity radius",
            displacement[i].norm()
        )));
    }
    let targets: Vec<Vec3> = nodes
        .iter()
        .zip(displacement)
        .map(|(x, v)| exp_raw(x, v))
        .collect();
    let hints: Vec<usize> = (0..mesh.len()).collect();
    mesh.deposit_density(&targets, &mu.masses(mesh), Some(&hints))
}

/// `ν = T♯μ` with `T(x) = exp_x(∇φ(x))`.
pub fn push_forward_map(mesh: &Mesh, phi: &[f64], mu: &Density) -> Result<Density> {
    push_forward_field(mesh, &mesh.gradient(phi), mu)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcavityReport {
    pub holds: bool,
    /// Node with the smallest eigenvalue of `D²(d²/2) + D²φ`.
    pub worst_node: usize,
    pub worst_eigenvalue: f64,
}

/// Cone check `D²(d²/2)|_{y = exp_x ∇φ(x)} + D²φ(x) ⪰ −tol` at every node. Nodes whose image
/// reaches the cut locus count as violations.
pub fn is_dsq_concave(mesh: &Mesh, phi: &[f64], tol: f64) -> ConcavityReport {
    let grads = mesh.gradient(phi);
    let hess = mesh.hessian(phi);
    let nodes = mesh.nodes();
    let mins: Vec<f64> = (0..mesh.len())
        .into_par_iter()
        .map(|i| {
            let x = nodes[i];
            if grads[i].norm() >= std::f64::consts::PI - 1e-6 {
                return f64::NEG_INFINITY;
            }
            let y = exp_raw(&x, &grads[i]);
            let h = hessian_half_dsq_raw(&x, &y, mesh.node(i));
            let (e1, e2) = mesh.basis(i);
            let total = h.in_plane(&e1, &e2) + hess[i].in_plane(&e1, &e2);
            crate::sphere_geom::sym2_eigenvalues(&total)[0]
        })
        .collect();
    let (worst_node, worst_eigenvalue) = mins
        .iter()
        .cloned()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((0, 0.0));
    ConcavityReport {
        holds: worst_eigenvalue >= -tol,
        worst_node,
        worst_eigenvalue,
    }
}

/// `ρ_s = T_s♯f` with `T_s(x) = exp_x((1−s)∇φ₀(x) + s∇φ₁(x))`.
pub fn generalized_geodesic(
    mesh: &Mesh,
    f: &Density,
    phi0: &[f64],
    phi1: &[f64],
    s: f64,
) -> Result<Density> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!("s = {s} outside [0, 1]")));
    }
    let g0 = mesh.gradient(phi0);
    let g1 = mesh.gradient(phi1);
    let v: Vec<Vec3> = g0.iter().zip(&g1).map(|(a, b)| a * (1.0 - s) + b * s).collect();
    push_forward_field(mesh, &v, f)
}

/// Curvature constant of the unit sphere in the generalized-geodesic convexity estimate.
pub const KAPPA_SPHERE: f64 = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvexityCheck {
    /// `(1−s)W₂²(ρ₀, f) + sW₂²(ρ₁, f)`.
    pub lhs: f64,
    /// `W₂²(ρ_s, f) + κ s(1−s)W₂²(ρ₀, ρ₁)`.
    pub rhs: f64,
}

impl ConvexityCheck {
    pub fn margin(&self) -> f64 {
        self.lhs - self.rhs
    }
}

/// Convexity of `W₂²(·, f)` along the generalized geodesic with base `f` between
/// `ρ₀ = exp(∇φ₀)♯f` and `ρ₁ = exp(∇φ₁)♯f`, at each `s` in `ss`.
pub fn generalized_geodesic_convexity(
    mesh: &Mesh,
    f: &Density,
    phi0: &[f64],
    phi1: &[f64],
    ss: &[f64],
) -> Result<Vec<ConvexityCheck>> {
    let rho0 = generalized_geodesic(mesh, f, phi0, phi1, 0.0)?;
    let rho1 = generalized_geodesic(mesh, f, phi0, phi1, 1.0)?;
    let a0 = w2_squared_exact(mesh, &rho0, f)?.value;
    let a1 = w2_squared_exact(mesh, &rho1, f)?.value;
    let d01 = w2_squared_exact(mesh, &rho0, &rho1)?.value;
    ss.iter()
        .map(|&s| {
            let rs = generalized_geodesic(mesh, f, phi0, phi1, s)?;
            let w = w2_squared_exact(mesh, &rs, f)?.value;
            Ok(ConvexityCheck {
                lhs: (1.0 - s) * a0 + s * a1,
                rhs: w + KAPPA_SPHERE * s * (1.0 - s) * d01,
            })
        })
        .collect()
}

/// Dual functional `∫F₁°(φ₁) dm + ∫φ₂ f dm` with `F₁°(s) = min_r (r s + rΘ(r))`; a lower bound
/// for `W₂²(f, ρ) + U(ρ)` over all densities `ρ`. `phi1` lives on the `ρ` side, `phi2` on the `f`
/// side.
pub fn dual_lower_bound(
    mesh: &Mesh,
    potentials: &PotentialPair,
    f: &Density,
    theta: &ThetaModel,
) -> Result<f64> {
    dual_lower_bound_scaled(mesh, potentials, f, theta, 1.0)
}

/// As `dual_lower_bound` for `W₂²(f, ρ) + h²U(ρ)`: the conjugate becomes `h²F₁°(s/h²)`.
pub fn dual_lower_bound_scaled(
    mesh: &Mesh,
    potentials: &PotentialPair,
    f: &Density,
    theta: &ThetaModel,
    h: f64,
) -> Result<f64> {
    let nodes = mesh.nodes();
    let viol = potentials.max_violation(|j, i| half_dsq(&nodes[j], &nodes[i]));
    if viol > 1e-9 {
        return Err(Error::Infeasible(format!("potentials violate dual feasibility by {viol:e}")));
    }
    let h2 = h * h;
    let w = mesh.weights();
    let mut total = 0.0;
    for j in 0..mesh.len() {
        let s = potentials.phi1[j];
        let g = if h2 > 0.0 {
            h2 * theta.conjugate_min(s / h2)?
        } else if s >= 0.0 {
            0.0
        } else {
            return Err(Error::Domain("negative potential with h = 0".into()));
        };
        total += w[j] * g;
    }
    total += f
        .values()
        .iter()
        .zip(w)
        .zip(&potentials.phi2)
        .map(|((fv, wv), p)| fv * wv * p)
        .sum::<f64>();
    Ok(total)
}
