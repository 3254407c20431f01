//! Quadrature meshes on the sphere and the discrete differential operators built on them.
//!
//! Fields are collocated at nodes; integrals are `Σ u_i w_i` with dual-cell weights `w_i`.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, Matrix2};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sphere_geom::{
    distance_raw, tangent_basis, tangent_projection, HessianOperator, SpherePoint, Vec3,
};

pub type ScalarField = Vec<f64>;
pub type VelocityField = Vec<Vec3>;

/// Number of fit unknowns per node: two gradient components, the normal coefficient and two
/// trace-free quadratic coefficients.
const FIT_DIM: usize = 5;

#[derive(Clone, Debug)]
pub struct Mesh {
    level: Option<usize>,
    nodes: Vec<Vec3>,
    weights: Vec<f64>,
    triangles: Vec<[usize; 3]>,
    node_triangles: Vec<Vec<usize>>,
    neighbors: Vec<Vec<usize>>,
    bases: Vec<(Vec3, Vec3)>,
    fit: Vec<Vec<[f64; FIT_DIM]>>,
    spacing: f64,
}

/// Probability density against the mesh weights: `Σ ρ_i w_i = 1`, `ρ_i ≥ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Density {
    values: Vec<f64>,
}

pub const MASS_TOL: f64 = 1e-10;

impl Density {
    pub fn new(mesh: &Mesh, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.len() {
            return Err(Error::Invalid(format!(
                "density has {} values for {} nodes",
                values.len(),
                mesh.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Invalid(format!("density value {} at node {i}", values[i])));
        }
        let mass = mesh.integrate(&values);
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Invalid(format!("density mass {mass} differs from 1")));
        }
        Ok(Density { values })
    }

    /// Rescales nonnegative values to unit mass.
    pub fn normalized(mesh: &Mesh, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.len() {
            return Err(Error::Invalid("density length mismatch".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Invalid("negative or non-finite density value".into()));
        }
        let mass = mesh.integrate(&values);
        if !(mass > 0.0) {
            return Err(Error::Invalid("density has zero mass".into()));
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Ok(Density { values })
    }

    pub fn uniform(mesh: &Mesh) -> Self {
        let total: f64 = mesh.weights.iter().sum();
        Density {
            values: vec![1.0 / total; mesh.len()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Node masses `ρ_i w_i`.
    pub fn masses(&self, mesh: &Mesh) -> Vec<f64> {
        self.values.iter().zip(&mesh.weights).map(|(r, w)| r * w).collect()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Icosphere with `10·4^s + 2` nodes.
pub fn build_icosphere(subdivisions: usize) -> Result<Mesh> {
    Mesh::icosphere(subdivisions)
}

fn icosahedron() -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let nodes = raw
        .iter()
        .map(|p| Vec3::new(p[0], p[1], p[2]).normalize())
        .collect();
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (nodes, faces)
}

/// Area of the spherical triangle with unit vertices `a, b, c`.
pub fn spherical_triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let num = a.dot(&b.cross(c)).abs();
    let den = 1.0 + a.dot(b) + b.dot(c) + c.dot(a);
    2.0 * num.atan2(den)
}

impl Mesh {
    pub fn icosphere(subdivisions: usize) -> Result<Mesh> {
        if subdivisions > 7 {
            return Err(Error::Domain(format!("subdivisions {subdivisions} > 7")));
        }
        let (mut nodes, mut faces) = icosahedron();
        for _ in 0..subdivisions {
            let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            let mut midpoint = |a: usize, b: usize, nodes: &mut Vec<Vec3>| -> usize {
                let key = (a.min(b), a.max(b));
                *cache.entry(key).or_insert_with(|| {
                    nodes.push((nodes[a] + nodes[b]).normalize());
                    nodes.len() - 1
                })
            };
            for f in &faces {
                let ab = midpoint(f[0], f[1], &mut nodes);
                let bc = midpoint(f[1], f[2], &mut nodes);
                let ca = midpoint(f[2], f[0], &mut nodes);
                next.push([f[0], ab, ca]);
                next.push([f[1], bc, ab]);
                next.push([f[2], ca, bc]);
                next.push([ab, bc, ca]);
            }
            faces = next;
        }
        let mut mesh = Mesh::from_triangulation(nodes, faces)?;
        mesh.level = Some(subdivisions);
        Ok(mesh)
    }

    /// Mesh from unit nodes and outward-oriented triangles; weights are one third of the incident
    /// spherical triangle areas.
    pub fn from_triangulation(nodes: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Mesh> {
        let n = nodes.len();
        let mut weights = vec![0.0; n];
        let mut node_triangles = vec![Vec::new(); n];
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (t, tri) in triangles.iter().enumerate() {
            let [a, b, c] = *tri;
            if a.max(b).max(c) >= n {
                return Err(Error::Invalid(format!("triangle {t} references a missing node")));
            }
            let area = spherical_triangle_area(&nodes[a], &nodes[b], &nodes[c]);
            for &v in tri {
                weights[v] += area / 3.0;
                node_triangles[v].push(t);
            }
            for (p, q) in [(a, b), (b, c), (c, a)] {
                neighbors[p].push(q);
                neighbors[q].push(p);
            }
        }
        for nb in neighbors.iter_mut() {
            nb.sort_unstable();
            nb.dedup();
        }
        let mut mesh = Mesh {
            level: None,
            nodes,
            weights,
            triangles,
            node_triangles,
            neighbors,
            bases: Vec::new(),
            fit: Vec::new(),
            spacing: 0.0,
        };
        mesh.finish()?;
        Ok(mesh)
    }

    /// Bare quadrature set without stencils; differential operators are unavailable.
    pub fn point_set(nodes: Vec<Vec3>, weights: Vec<f64>) -> Result<Mesh> {
        if nodes.len() != weights.len() || nodes.is_empty() {
            return Err(Error::Invalid("node and weight counts differ".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Invalid("weights must be positive".into()));
        }
        let nodes: Vec<Vec3> = nodes.iter().map(|p| p.normalize()).collect();
        let bases = nodes.iter().map(tangent_basis).collect();
        let n = nodes.len();
        Ok(Mesh {
            level: None,
            nodes,
            weights,
            triangles: Vec::new(),
            node_triangles: vec![Vec::new(); n],
            neighbors: vec![Vec::new(); n],
            bases,
            fit: vec![Vec::new(); n],
            spacing: 0.0,
        })
    }

    fn finish(&mut self) -> Result<()> {
        self.bases = self.nodes.iter().map(tangent_basis).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, nb) in self.neighbors.iter().enumerate() {
            if nb.len() < 5 {
                return Err(Error::Invalid(format!("node {i} has {} neighbours", nb.len())));
            }
            for &j in nb {
                if j > i {
                    total += distance_raw(&self.nodes[i], &self.nodes[j]);
                    count += 1;
                }
            }
        }
        self.spacing = total / count as f64;
        let fit: Result<Vec<_>> = (0..self.nodes.len())
            .into_par_iter()
            .map(|i| self.fit_rows(i))
            .collect();
        self.fit = fit?;
        Ok(())
    }

    /// Weighted least-squares rows for node `i`. For neighbour `j` with chord `x_j − x_i`
    /// split into tangent part `(t1, t2)` and normal part `n`, the local model is
    /// `u_j − u_i ≈ g1 t1 + g2 t2 + g_n n + α (t1² − t2²) + β t1 t2`, exact on restrictions of
    /// affine functions.
    fn fit_rows(&self, i: usize) -> Result<Vec<[f64; FIT_DIM]>> {
        let x = self.nodes[i];
        let (e1, e2) = self.bases[i];
        let nb = &self.neighbors[i];
        let k = nb.len();
        let scale = nb
            .iter()
            .map(|&j| (self.nodes[j] - x).norm())
            .sum::<f64>()
            / k as f64;
        let mut b = DMatrix::<f64>::zeros(k, FIT_DIM);
        for (r, &j) in nb.iter().enumerate() {
            let d = self.nodes[j] - x;
            let w = scale / d.norm();
            let t1 = d.dot(&e1) / scale;
            let t2 = d.dot(&e2) / scale;
            let n = d.dot(&x) / (scale * scale);
            let row = [t1, t2, n, t1 * t1 - t2 * t2, t1 * t2];
            for (c, v) in row.iter().enumerate() {
                b[(r, c)] = v * w;
            }
        }
        let svd = b.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 1e-8 * smax) {
            return Err(Error::Invalid(format!("rank-deficient stencil at node {i}")));
        }
        let pinv = svd
            .pseudo_inverse(1e-12 * smax)
            .map_err(|e| Error::Invalid(e.to_string()))?;
        let unscale = [scale, scale, scale * scale, scale * scale, scale * scale];
        let mut rows = Vec::with_capacity(k);
        for (r, &j) in nb.iter().enumerate() {
            let w = scale / (self.nodes[j] - x).norm();
            let mut col = [0.0; FIT_DIM];
            for c in 0..FIT_DIM {
                col[c] = pinv[(c, r)] * w / unscale[c];
            }
            rows.push(col);
        }
        Ok(rows)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn level(&self) -> Option<usize> {
        self.level
    }

    pub fn nodes(&self) -> &[Vec3] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> SpherePoint {
        SpherePoint::new(self.nodes[i]).expect("mesh nodes are unit vectors")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn basis(&self, i: usize) -> (Vec3, Vec3) {
        self.bases[i]
    }

    /// Mean geodesic edge length.
    pub fn mean_spacing(&self) -> f64 {
        self.spacing
    }

    pub fn max_spacing(&self) -> f64 {
        let mut m: f64 = 0.0;
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                m = m.max(distance_raw(&self.nodes[i], &self.nodes[j]));
            }
        }
        m
    }

    pub fn has_stencils(&self) -> bool {
        !self.triangles.is_empty()
    }

    pub fn integrate(&self, u: &[f64]) -> f64 {
        u.iter().zip(&self.weights).map(|(a, w)| a * w).sum()
    }

    pub fn sample(&self, f: impl Fn(&Vec3) -> f64) -> ScalarField {
        self.nodes.iter().map(f).collect()
    }

    /// SHA-256 over node coordinates, weights and triangles.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (p, w) in self.nodes.iter().zip(&self.weights) {
            for v in [p.x, p.y, p.z, *w] {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for t in &self.triangles {
            for &v in t {
                h.update((v as u64).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn require_stencils(&self) {
        assert!(self.has_stencils(), "differential operator on a mesh without stencils");
    }

    fn fit_coefficients(&self, i: usize, u: &[f64]) -> [f64; FIT_DIM] {
        let mut c = [0.0; FIT_DIM];
        for (row, &j) in self.fit[i].iter().zip(&self.neighbors[i]) {
            let du = u[j] - u[i];
            for k in 0..FIT_DIM {
                c[k] += row[k] * du;
            }
        }
        c
    }

    pub fn gradient_at(&self, i: usize, u: &[f64]) -> Vec3 {
        let c = self.fit_coefficients(i, u);
        let (e1, e2) = self.bases[i];
        e1 * c[0] + e2 * c[1]
    }

    /// Tangential gradient by the local least-squares fit.
    pub fn gradient(&self, u: &[f64]) -> VelocityField {
        self.require_stencils();
        (0..self.len()).into_par_iter().map(|i| self.gradient_at(i, u)).collect()
    }

    /// Covariant Hessian at node `i` in the node basis, read off the quadratic part of the fit.
    pub fn hessian_at(&self, i: usize, u: &[f64]) -> Matrix2<f64> {
        let c = self.fit_coefficients(i, u);
        Matrix2::new(2.0 * c[3] - c[2], c[4], c[4], -2.0 * c[3] - c[2])
    }

    pub fn hessian(&self, u: &[f64]) -> Vec<HessianOperator> {
        self.require_stencils();
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let (e1, e2) = self.bases[i];
                HessianOperator::from_plane(self.node(i), &e1, &e2, &self.hessian_at(i, u))
            })
            .collect()
    }

    /// Largest spectral norm of the discrete Hessian over all nodes.
    pub fn hessian_sup(&self, u: &[f64]) -> f64 {
        self.require_stencils();
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let m = self.hessian_at(i, u);
                let ev = crate::sphere_geom::sym2_eigenvalues(&m);
                ev[0].abs().max(ev[1].abs())
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Surface divergence: trace of the fitted tangential derivative of the ambient field.
    pub fn divergence(&self, v: &[Vec3]) -> ScalarField {
        self.require_stencils();
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let (e1, e2) = self.bases[i];
                let mut d1 = Vec3::zeros();
                let mut d2 = Vec3::zeros();
                for (row, &j) in self.fit[i].iter().zip(&self.neighbors[i]) {
                    let dv = v[j] - v[i];
                    d1 += dv * row[0];
                    d2 += dv * row[1];
                }
                e1.dot(&d1) + e2.dot(&d2)
            })
            .collect()
    }

    /// `X·(∇×V)`, computed as `−∇·(X×V)`.
    pub fn curl_normal(&self, v: &[Vec3]) -> ScalarField {
        let rotated: Vec<Vec3> = self.nodes.iter().zip(v).map(|(x, w)| x.cross(w)).collect();
        self.divergence(&rotated).into_iter().map(|d| -d).collect()
    }

    /// Sparse P1 stiffness matrix on the inscribed polyhedron, optionally with a per-triangle
    /// coefficient. Rows list `(column, value)` including the diagonal.
    pub fn stiffness(&self, coefficient: Option<&[f64]>) -> SparseMatrix {
        self.require_stencils();
        let n = self.len();
        let mut rows: Vec<HashMap<usize, f64>> = vec![HashMap::new(); n];
        for (t, tri) in self.triangles.iter().enumerate() {
            let k = coefficient.map_or(1.0, |c| c[t]);
            for r in 0..3 {
                let a = tri[r];
                let b = tri[(r + 1) % 3];
                let c = tri[(r + 2) % 3];
                let u = self.nodes[b] - self.nodes[a];
                let v = self.nodes[c] - self.nodes[a];
                let cot = u.dot(&v) / u.cross(&v).norm();
                let val = 0.5 * k * cot;
                *rows[b].entry(c).or_insert(0.0) -= val;
                *rows[c].entry(b).or_insert(0.0) -= val;
                *rows[b].entry(b).or_insert(0.0) += val;
                *rows[c].entry(c).or_insert(0.0) += val;
            }
        }
        SparseMatrix {
            rows: rows
                .into_iter()
                .map(|m| {
                    let mut r: Vec<(usize, f64)> = m.into_iter().collect();
                    r.sort_unstable_by_key(|e| e.0);
                    r
                })
                .collect(),
        }
    }

    /// Laplace–Beltrami operator `−M⁻¹ K u` with the P1 stiffness `K` and lumped mass `M`.
    pub fn laplacian(&self, u: &[f64]) -> ScalarField {
        let k = self.stiffness(None);
        k.apply(u)
            .into_iter()
            .zip(&self.weights)
            .map(|(v, w)| -v / w)
            .collect()
    }

    /// Nearest node by greedy ascent of `x_j·p`, starting at `hint`.
    pub fn nearest_node(&self, p: &Vec3, hint: usize) -> usize {
        if !self.has_stencils() {
            return (0..self.len())
                .max_by(|&a, &b| self.nodes[a].dot(p).total_cmp(&self.nodes[b].dot(p)))
                .unwrap_or(0);
        }
        let mut cur = hint.min(self.len() - 1);
        let mut best = self.nodes[cur].dot(p);
        loop {
            let mut moved = false;
            for &j in &self.neighbors[cur] {
                let d = self.nodes[j].dot(p);
                if d > best {
                    best = d;
                    cur = j;
                    moved = true;
                }
            }
            if !moved {
                return cur;
            }
        }
    }

    fn barycentric(&self, t: usize, p: &Vec3) -> [f64; 3] {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        let det = pa.dot(&pb.cross(&pc));
        [
            p.dot(&pb.cross(&pc)) / det,
            pa.dot(&p.cross(&pc)) / det,
            pa.dot(&pb.cross(p)) / det,
        ]
    }

    /// Containing triangle and normalized barycentric weights of the radial projection of `p`.
    /// Without triangles the nearest node carries full weight.
    pub fn locate(&self, p: &Vec3, hint: usize) -> ([usize; 3], [f64; 3]) {
        let near = self.nearest_node(p, hint);
        if !self.has_stencils() {
            return ([near, near, near], [1.0, 0.0, 0.0]);
        }
        let try_tri = |t: usize| -> Option<[f64; 3]> {
            let l = self.barycentric(t, p);
            if l.iter().all(|&v| v >= -1e-12) {
                Some(l)
            } else {
                None
            }
        };
        let mut candidates: Vec<usize> = self.node_triangles[near].clone();
        for &j in &self.neighbors[near] {
            candidates.extend_from_slice(&self.node_triangles[j]);
        }
        let found = candidates
            .iter()
            .find_map(|&t| try_tri(t).map(|l| (t, l)))
            .unwrap_or_else(|| {
                (0..self.triangles.len())
                    .map(|t| {
                        let l = self.barycentric(t, p);
                        (t, l)
                    })
                    .max_by(|a, b| {
                        let ma = a.1.iter().cloned().fold(f64::INFINITY, f64::min);
                        let mb = b.1.iter().cloned().fold(f64::INFINITY, f64::min);
                        ma.total_cmp(&mb)
                    })
                    .expect("mesh has triangles")
            });
        let (t, l) = found;
        let mut l = l.map(|v| v.max(0.0));
        let s: f64 = l.iter().sum();
        l.iter_mut().for_each(|v| *v /= s);
        (self.triangles[t], l)
    }

    pub fn interpolate_scalar(&self, u: &[f64], p: &Vec3, hint: usize) -> f64 {
        let (tri, l) = self.locate(p, hint);
        (0..3).map(|k| l[k] * u[tri[k]]).sum()
    }

    /// Barycentric interpolation of a tangent field, projected onto the tangent plane at `p/|p|`.
    pub fn interpolate_vector(&self, v: &[Vec3], p: &Vec3, hint: usize) -> Vec3 {
        let (tri, l) = self.locate(p, hint);
        let w: Vec3 = (0..3).map(|k| v[tri[k]] * l[k]).sum();
        tangent_projection(&p.normalize(), &w)
    }

    /// Deposits point masses onto the nodes of their containing triangles; returns node masses.
    pub fn deposit(&self, points: &[Vec3], masses: &[f64], hints: Option<&[usize]>) -> Vec<f64> {
        let located: Vec<([usize; 3], [f64; 3])> = points
            .par_iter()
            .enumerate()
            .map(|(k, p)| self.locate(p, hints.map_or(0, |h| h[k])))
            .collect();
        let mut out = vec![0.0; self.len()];
        for ((tri, l), m) in located.iter().zip(masses) {
            for k in 0..3 {
                out[tri[k]] += m * l[k];
            }
        }
        out
    }

    /// Density of the deposited point masses.
    pub fn deposit_density(&self, points: &[Vec3], masses: &[f64], hints: Option<&[usize]>) -> Result<Density> {
        let m = self.deposit(points, masses, hints);
        let values = m.iter().zip(&self.weights).map(|(a, w)| a / w).collect();
        Density::normalized(self, values)
    }

    /// Writes `node_id x y z weight` lines, then stencil and triangle lines.
    pub fn export<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# sphere-euler mesh v1")?;
        writeln!(out, "nodes {}", self.len())?;
        for (i, (p, w)) in self.nodes.iter().zip(&self.weights).enumerate() {
            writeln!(out, "{i} {:e} {:e} {:e} {:e}", p.x, p.y, p.z, w)?;
        }
        for (i, nb) in self.neighbors.iter().enumerate() {
            let list: Vec<String> = nb.iter().map(|j| j.to_string()).collect();
            writeln!(out, "stencil {i} {}", list.join(" "))?;
        }
        writeln!(out, "triangles {}", self.triangles.len())?;
        for t in &self.triangles {
            writeln!(out, "tri {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    /// Reads the format written by `export`. Stencils are rebuilt from the triangles.
    pub fn import<R: BufRead>(input: R) -> Result<Mesh> {
        let bad = |m: &str| Error::Invalid(format!("mesh file: {m}"));
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut triangles = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| bad(&e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts[0] {
                "nodes" | "triangles" | "stencil" => {}
                "tri" => {
                    if parts.len() != 4 {
                        return Err(bad(line));
                    }
                    let mut t = [0usize; 3];
                    for k in 0..3 {
                        t[k] = parts[k + 1].parse().map_err(|_| bad(line))?;
                    }
                    triangles.push(t);
                }
                _ => {
                    if parts.len() != 5 {
                        return Err(bad(line));
                    }
                    let v: std::result::Result<Vec<f64>, _> =
                        parts[1..].iter().map(|s| s.parse::<f64>()).collect();
                    let v = v.map_err(|_| bad(line))?;
                    nodes.push(Vec3::new(v[0], v[1], v[2]));
                    weights.push(v[3]);
                }
            }
        }
        if triangles.is_empty() {
            return Mesh::point_set(nodes, weights);
        }
        let mut mesh = Mesh::from_triangulation(nodes, triangles)?;
        mesh.weights = weights;
        Ok(mesh)
    }
}

#[derive(Clone, Debug)]
pub struct SparseMatrix {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.rows
            .par_iter()
            .map(|r| r.iter().map(|&(j, v)| v * u[j]).sum())
            .collect()
    }
}

/// Symmetric, mass-preserving smoothing operator with Gaussian profile `exp(−d²/2ε²)`,
/// truncated at `5ε`. The kernel is rescaled so that constants are fixed exactly.
#[derive(Clone, Debug)]
pub struct Mollifier {
    eps: f64,
    /// Row `i` holds `(j, A_ij w_j)` with `A` symmetric and `Σ_j A_ij w_j = 1`.
    rows: Vec<Vec<(usize, f64)>>,
}

impl Mollifier {
    pub fn new(mesh: &Mesh, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("mollifier width {eps} must be positive")));
        }
        let cut = (5.0 * eps).min(std::f64::consts::PI);
        let cos_cut = cut.cos();
        let nodes = mesh.nodes();
        let kernel: Vec<Vec<(usize, f64)>> = (0..mesh.len())
            .into_par_iter()
            .map(|i| {
                let mut r = Vec::new();
                for (j, y) in nodes.iter().enumerate() {
                    if nodes[i].dot(y) >= cos_cut - 1e-15 {
                        let d = distance_raw(&nodes[i], y);
                        r.push((j, (-d * d / (2.0 * eps * eps)).exp()));
                    }
                }
                r
            })
            .collect();
        let w = mesh.weights();
        // symmetric scaling D K D so that every row sums to 1 against the weights
        let mut d = vec![1.0; mesh.len()];
        for _ in 0..500 {
            let s: Vec<f64> = kernel
                .iter()
                .map(|r| r.iter().map(|&(j, k)| k * d[j] * w[j]).sum())
                .collect();
            let mut err: f64 = 0.0;
            for i in 0..d.len() {
                err = err.max((d[i] * s[i] - 1.0).abs());
                d[i] = (d[i] / s[i]).sqrt();
            }
            if err < 1e-14 {
                break;
            }
        }
        let rows = kernel
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.into_iter().map(|(j, k)| (j, d[i] * k * d[j] * w[j])).collect())
            .collect();
        Ok(Mollifier { eps, rows })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn apply(&self, mesh: &Mesh, rho: &Density) -> Density {
        let v = rho.values();
        let out: Vec<f64> = self
            .rows
            .par_iter()
            .map(|r| r.iter().map(|&(j, a)| a * v[j]).sum())
            .collect();
        Density::normalized(mesh, out).expect("smoothing preserves positivity")
    }
}

/// Smooths `rho` at angular width `eps`.
pub fn mollify(mesh: &Mesh, rho: &Density, eps: f64) -> Result<Density> {
    Ok(Mollifier::new(mesh, eps)?.apply(mesh, rho))
}
