//! Poisson solves by Green's-function quadrature, Hodge–Helmholtz splitting of tangent fields
//! and the density-weighted projection used by the velocity update.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{Density, Mesh, ScalarField, SparseMatrix, VelocityField};
use crate::sphere_geom::{distance_raw, Vec3};

/// Relative residual at which the conjugate-gradient solves stop.
pub const CG_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct HelmholtzParts {
    /// Velocity potential, zero mean.
    pub q: ScalarField,
    /// Stream potential, zero mean.
    pub psi: ScalarField,
    /// `V − ∇q − X×∇ψ`.
    pub residual: VelocityField,
}

impl HelmholtzParts {
    /// `∫ ∇q·(X×∇ψ) dm`.
    pub fn cross_term(&self, mesh: &Mesh) -> f64 {
        let gq = mesh.gradient(&self.q);
        let rot = rotated_gradient(mesh, &self.psi);
        let prod: Vec<f64> = gq.iter().zip(&rot).map(|(a, b)| a.dot(b)).collect();
        mesh.integrate(&prod)
    }
}

/// `(4π)⁻¹ log(1 − cos a)`, the zero-mean Green's function of the Laplacian on the sphere.
pub fn greens_function(angle: f64) -> Result<f64> {
    if !(angle > 0.0 && angle <= PI) {
        return Err(Error::Domain(format!("Green's function needs 0 < angle ≤ π, got {angle}")));
    }
    // 1 − cos a = 2 sin²(a/2) keeps precision for small angles
    let s = (0.5 * angle).sin();
    Ok((2.0 * s * s).ln() / (4.0 * PI))
}

/// Integral of the Green's function over a geodesic disc of area `w` about its centre.
fn self_cell(w: f64) -> f64 {
    w * ((w / (2.0 * PI)).ln() - 1.0) / (4.0 * PI)
}

fn zero_mean(mesh: &Mesh, mut u: Vec<f64>) -> Vec<f64> {
    let m = mesh.integrate(&u) / mesh.weights().iter().sum::<f64>();
    u.iter_mut().for_each(|v| *v -= m);
    u
}

/// `u = G * g`, so that `Δu = g` for zero-mean `g`. A nonzero mean is projected out.
pub fn solve_poisson(mesh: &Mesh, g: &[f64]) -> ScalarField {
    let g = zero_mean(mesh, g.to_vec());
    let nodes = mesh.nodes();
    let w = mesh.weights();
    let u: Vec<f64> = (0..mesh.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = self_cell(w[i]) * g[i];
            for j in 0..nodes.len() {
                if j != i {
                    let d = distance_raw(&nodes[i], &nodes[j]);
                    let s = (0.5 * d).sin();
                    acc += (2.0 * s * s).ln() / (4.0 * PI) * g[j] * w[j];
                }
            }
            acc
        })
        .collect();
    zero_mean(mesh, u)
}

/// `X × ∇ψ`.
pub fn rotated_gradient(mesh: &Mesh, psi: &[f64]) -> VelocityField {
    mesh.gradient(psi)
        .iter()
        .zip(mesh.nodes())
        .map(|(g, x)| x.cross(g))
        .collect()
}

/// `V = ∇q + X×∇ψ + residual` with `q = G(∇·V)` and `ψ = −G(∇·(X×V))`.
pub fn helmholtz_decompose(mesh: &Mesh, v: &[Vec3]) -> HelmholtzParts {
    let q = solve_poisson(mesh, &mesh.divergence(v));
    let psi = solve_poisson(mesh, &mesh.curl_normal(v));
    let gq = mesh.gradient(&q);
    let rot = rotated_gradient(mesh, &psi);
    let residual = v
        .iter()
        .zip(gq.iter().zip(&rot))
        .map(|(v, (a, b))| v - a - b)
        .collect();
    HelmholtzParts { q, psi, residual }
}

/// Preconditioned conjugate gradients for a symmetric positive semidefinite operator whose
/// nullspace is the constants. `b` must be orthogonal to the constants; the iterate is kept
/// there too.
pub(crate) fn pcg(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    diag: &[f64],
    b: &[f64],
    tol: f64,
    what: &str,
) -> Result<Vec<f64>> {
    let n = b.len();
    let project = |v: &mut Vec<f64>| {
        let m = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|x| *x -= m);
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    project(&mut r);
    let precond = |r: &[f64]| -> Vec<f64> {
        let mut z: Vec<f64> = r.iter().zip(diag).map(|(r, d)| r / d).collect();
        project(&mut z);
        z
    };
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let max_iter = 20 * n + 100;
    for _ in 0..max_iter {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol * bnorm {
            project(&mut x);
            return Ok(x);
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let res = dot(&r, &r).sqrt() / bnorm;
    if res <= tol.sqrt() {
        project(&mut x);
        return Ok(x);
    }
    Err(Error::NonConvergence { what: what.into(), iterations: max_iter, residual: res })
}

fn require_positive(rho: &Density) -> Result<()> {
    match rho.values().iter().position(|&r| !(r > 0.0)) {
        Some(i) => Err(Error::Vacuum(i)),
        None => Ok(()),
    }
}

/// Gradient of the barycentric coordinate of `a` on the flat triangle `(a, b, c)`.
fn hat_gradient(a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let e = c - b;
    let u = a - b;
    let perp = u - e * (u.dot(&e) / e.norm_squared());
    perp / perp.norm_squared()
}

/// Diagonal of a sparse matrix, with 1 on structurally empty rows.
fn diagonal(k: &SparseMatrix) -> Vec<f64> {
    k.rows
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().find(|e| e.0 == i).map_or(1.0, |e| e.1))
        .collect()
}

/// `V = ∇φ + w` with `w` weakly `ρ`-divergence free: `φ` solves the P1 weak form
/// `∫ ρ ∇φ·∇λ_j = ∫ ρ V·∇λ_j` for every hat function `λ_j`. Returns zero-mean `φ` and
/// `w = V − ∇φ` with the nodal gradient.
pub fn weighted_decompose(mesh: &Mesh, v: &[Vec3], rho: &Density) -> Result<(ScalarField, VelocityField)> {
    require_positive(rho)?;
    let (k, _) = weighted_pencil(mesh, rho);
    let r = rho.values();
    let x = mesh.nodes();
    let mut b = vec![0.0; mesh.len()];
    for t in mesh.triangles() {
        let [p, q, s] = t.map(|i| x[i]);
        let cr = (q - p).cross(&(s - p));
        let area = 0.5 * cr.norm();
        let coef = (r[t[0]] + r[t[1]] + r[t[2]]) / 3.0;
        let vt = (v[t[0]] + v[t[1]] + v[t[2]]) / 3.0;
        let grads = [hat_gradient(&p, &q, &s), hat_gradient(&q, &s, &p), hat_gradient(&s, &p, &q)];
        for (node, g) in t.iter().zip(&grads) {
            b[*node] += coef * area * vt.dot(g);
        }
    }
    let phi = pcg(|u| k.apply(u), &diagonal(&k), &b, CG_TOL, "weighted projection")?;
    let phi = zero_mean(mesh, phi);
    let gphi = mesh.gradient(&phi);
    let w = v.iter().zip(&gphi).map(|(v, g)| v - g).collect();
    Ok((phi, w))
}

/// `∫ ρ ‖∇q‖² dm` in the P1 sense, `qᵀK_ρq`; the energy minimized by [`weighted_decompose`].
pub fn weighted_dirichlet(mesh: &Mesh, rho: &Density, q: &[f64]) -> f64 {
    let (k, _) = weighted_pencil(mesh, rho);
    q.iter().zip(k.apply(q)).map(|(a, b)| a * b).sum()
}

/// `∫ ρ ‖V‖² dm` with the triangle-average quadrature of [`weighted_decompose`]: on each flat
/// triangle the mean of `V` projected to the triangle plane, weighted by the mean of `ρ`.
pub fn weighted_field_energy(mesh: &Mesh, rho: &Density, v: &[Vec3]) -> f64 {
    let r = rho.values();
    let x = mesh.nodes();
    mesh.triangles()
        .iter()
        .map(|t| {
            let [p, q, s] = t.map(|i| x[i]);
            let cr = (q - p).cross(&(s - p));
            let n = cr / cr.norm();
            let vt = (v[t[0]] + v[t[1]] + v[t[2]]) / 3.0;
            let vt = vt - n * n.dot(&vt);
            (r[t[0]] + r[t[1]] + r[t[2]]) / 3.0 * 0.5 * cr.norm() * vt.norm_squared()
        })
        .sum()
}

/// `ρ`-weighted Dirichlet form `K_ρ` (per-triangle mean coefficient) and lumped mass `ρ w`.
fn weighted_pencil(mesh: &Mesh, rho: &Density) -> (SparseMatrix, Vec<f64>) {
    let r = rho.values();
    let coef: Vec<f64> = mesh
        .triangles()
        .iter()
        .map(|t| (r[t[0]] + r[t[1]] + r[t[2]]) / 3.0)
        .collect();
    let mass = r.iter().zip(mesh.weights()).map(|(r, w)| r * w).collect();
    (mesh.stiffness(Some(&coef)), mass)
}

/// Smallest nonzero eigenvalue of `K_ρ x = λ M_ρ x`, the Poincaré constant of the weighted
/// Dirichlet form against `ρ dm`. Scale-invariant in `ρ`.
pub fn spectral_gap_estimate(mesh: &Mesh, rho: &Density) -> Result<f64> {
    require_positive(rho)?;
    let (k, m) = weighted_pencil(mesh, rho);
    let n = mesh.len();
    let diag = diagonal(&k);
    let total: f64 = m.iter().sum();
    let m_project = |x: &mut Vec<f64>| {
        let c = x.iter().zip(&m).map(|(x, m)| x * m).sum::<f64>() / total;
        x.iter_mut().for_each(|v| *v -= c);
    };
    let m_norm = |x: &[f64]| x.iter().zip(&m).map(|(x, m)| x * x * m).sum::<f64>().sqrt();
    // start from a generic smooth field so every low mode is represented
    let mut x: Vec<f64> = mesh
        .nodes()
        .iter()
        .map(|p| p.x + 0.7 * p.y + 0.4 * p.z + 0.3 * p.x * p.y)
        .collect();
    m_project(&mut x);
    let mut lambda = f64::INFINITY;
    for it in 0..200 {
        let nx = m_norm(&x);
        x.iter_mut().for_each(|v| *v /= nx);
        let kx = k.apply(&x);
        let rq = x.iter().zip(&kx).map(|(a, b)| a * b).sum::<f64>();
        if it > 0 && (lambda - rq).abs() <= 1e-12 * rq {
            return Ok(rq);
        }
        lambda = rq;
        let rhs: Vec<f64> = x.iter().zip(&m).map(|(x, m)| x * m).collect();
        let mut y = pcg(|u| k.apply(u), &diag, &rhs, CG_TOL, "spectral gap")?;
        m_project(&mut y);
        x = y;
    }
    debug_assert_eq!(x.len(), n);
    Ok(lambda)
}
