//! Log-domain entropic transport with an ε-scaling schedule.

use rayon::prelude::*;

use super::{CostMatrix, PotentialPair, TransportPlan};
use crate::error::{Error, Result};
use crate::mesh::{Density, Mesh};

const MARGINAL_TOL: f64 = 1e-8;
const MAX_ITERATIONS: usize = 10_000;

#[derive(Clone, Debug)]
pub struct SinkhornSolution {
    /// `⟨π, c⟩` of the regularized plan.
    pub value: f64,
    pub plan: TransportPlan,
    /// Unregularized dual normalization: `phi2` has mean zero.
    pub potentials: PotentialPair,
    pub iterations: usize,
    /// Column-marginal L¹ residual at exit.
    pub residual: f64,
}

fn logsumexp(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic OT between masses `a` and `b` with regularization `reg`.
pub fn sinkhorn_dense(a: &[f64], b: &[f64], cost: &CostMatrix, reg: f64) -> Result<SinkhornSolution> {
    if !(reg > 0.0) {
        return Err(Error::Domain(format!("regularization {reg} must be positive")));
    }
    let (m, n) = (cost.rows, cost.cols);
    if a.len() != m || b.len() != n {
        return Err(Error::Invalid("marginal lengths do not match the cost matrix".into()));
    }
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    if (sa - sb).abs() > 1e-9 * sa.max(sb).max(1.0) {
        return Err(Error::Infeasible(format!("masses differ: {sa} vs {sb}")));
    }
    let la: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let max_cost = cost.entries.iter().cloned().fold(0.0, f64::max);
    let mut eps = max_cost.max(reg);
    let mut iterations = 0;
    let mut residual;
    loop {
        let last = eps <= reg;
        let (tol, cap) = if last { (MARGINAL_TOL, MAX_ITERATIONS) } else { (1e-4, 200) };
        let mut k = 0;
        loop {
            f = (0..m)
                .into_par_iter()
                .map(|i| -eps * logsumexp((0..n).map(|j| (g[j] - cost.get(i, j)) / eps + lb[j])))
                .collect();
            g = (0..n)
                .into_par_iter()
                .map(|j| -eps * logsumexp((0..m).map(|i| (f[i] - cost.get(i, j)) / eps + la[i])))
                .collect();
            k += 1;
            iterations += 1;
            // after the g update columns are exact, so measure the rows
            residual = (0..m)
                .map(|i| {
                    let row: f64 = (0..n)
                        .map(|j| (la[i] + lb[j] + (f[i] + g[j] - cost.get(i, j)) / eps).exp())
                        .sum();
                    (row - a[i]).abs()
                })
                .sum();
            if residual < tol {
                break;
            }
            if k >= cap {
                if last {
                    return Err(Error::NonConvergence {
                        what: "sinkhorn".into(),
                        iterations,
                        residual,
                    });
                }
                break;
            }
        }
        if last {
            break;
        }
        eps = (eps * 0.5).max(reg);
    }
    let mut entries = Vec::new();
    let mut value = 0.0;
    for i in 0..m {
        for j in 0..n {
            let p = (la[i] + lb[j] + (f[i] + g[j] - cost.get(i, j)) / eps).exp();
            if p > 0.0 {
                entries.push((i, j, p));
                value += p * cost.get(i, j);
            }
        }
    }
    let shift = g.iter().sum::<f64>() / n as f64;
    Ok(SinkhornSolution {
        value,
        plan: TransportPlan { entries },
        potentials: PotentialPair {
            phi1: f.iter().map(|v| v + shift).collect(),
            phi2: g.iter().map(|v| v - shift).collect(),
        },
        iterations,
        residual,
    })
}

/// Entropic OT between two densities on the same mesh, cost `d²/2`.
pub fn sinkhorn(mesh: &Mesh, mu: &Density, nu: &Density, reg: f64) -> Result<SinkhornSolution> {
    let cost = CostMatrix::half_dsq(mesh.nodes(), mesh.nodes());
    let a = mu.masses(mesh);
    let b = nu.masses(mesh);
    // zero-mass nodes carry no plan entries; keep them out of the log domain
    let rows: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..b.len()).filter(|&j| b[j] > 0.0).collect();
    if rows.len() == a.len() && cols.len() == b.len() {
        return sinkhorn_dense(&a, &b, &cost, reg);
    }
    let sub = CostMatrix {
        rows: rows.len(),
        cols: cols.len(),
        entries: rows
            .iter()
            .flat_map(|&i| cols.iter().map(move |&j| (i, j)))
            .map(|(i, j)| cost.get(i, j))
            .collect(),
    };
    let sa: Vec<f64> = rows.iter().map(|&i| a[i]).collect();
    let sb: Vec<f64> = cols.iter().map(|&j| b[j]).collect();
    let mut s = sinkhorn_dense(&sa, &sb, &sub, reg)?;
    s.plan.entries = s
        .plan
        .entries
        .iter()
        .map(|&(i, j, v)| (rows[i], cols[j], v))
        .collect();
    let mut phi2 = vec![0.0; b.len()];
    for (k, &j) in cols.iter().enumerate() {
        phi2[j] = s.potentials.phi2[k];
    }
    let mut phi1 = vec![0.0; a.len()];
    for (k, &i) in rows.iter().enumerate() {
        phi1[i] = s.potentials.phi1[k];
    }
    for i in 0..a.len() {
        if a[i] == 0.0 {
            phi1[i] = cols.iter().map(|&j| cost.get(i, j) - phi2[j]).fold(f64::INFINITY, f64::min);
        }
    }
    for j in 0..b.len() {
        if b[j] == 0.0 {
            phi2[j] = (0..a.len()).map(|i| cost.get(i, j) - phi1[i]).fold(f64::INFINITY, f64::min);
        }
    }
    s.potentials = PotentialPair { phi1, phi2 };
    Ok(s)
}
