//! Particle dynamics on the tangent bundle: `Ẍ = −‖Ẋ‖²X + G(X, t)` with tangential forcing
//! `G`, its rotation-kernel integral form, tangent-bundle transport costs and vorticity and
//! path-regularity diagnostics.
//!
//! Forcing evaluators return an ambient acceleration `g(X, t)`; only its tangential part acts,
//! the normal part being absorbed by the constraint force.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{Density, Mesh, VelocityField};
use crate::ot::{w2_squared_exact, w2_squared_points, DiscreteMeasure};
use crate::sphere_geom::{exp_raw, parallel_transport, sample_derivatives, tangent_projection, Vec3};

/// Fixed-point tolerance and iteration cap of the implicit predictor.
pub const FIXED_POINT_TOL: f64 = 1e-12;
pub const FIXED_POINT_MAX: usize = 20;

pub type Forcing<'a> = dyn Fn(&Vec3, f64) -> Vec3 + Sync + 'a;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhasePoint {
    pub x: Vec3,
    pub v: Vec3,
}

impl PhasePoint {
    /// Normalizes `x` and projects `v` onto the tangent plane.
    pub fn new(x: Vec3, v: Vec3) -> Result<Self> {
        let n = x.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Domain("position must be a nonzero finite vector".into()));
        }
        let x = x / n;
        Ok(PhasePoint { x, v: tangent_projection(&x, &v) })
    }

    pub fn speed(&self) -> f64 {
        self.v.norm()
    }

    /// `[X; −V]`.
    pub fn reversed(&self) -> Self {
        PhasePoint { x: self.x, v: -self.v }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StepRule {
    /// Trapezoidal velocity average with parallel transport between the two base points;
    /// second order and exact on force-free geodesics of any speed.
    #[default]
    Transported,
    /// `X' = exp_X(h(V + V')/2)`, `V' = V + h g(X')`, both projected to the tangent planes.
    /// First order: the ambient velocity average ignores the turning of the tangent plane.
    Literal,
}

fn tangential(g: &Forcing, x: &Vec3, t: f64) -> Vec3 {
    tangent_projection(x, &g(x, t))
}

/// One implicit predictor step from time `t` to `t + h`.
pub fn step_predictor(state: &PhasePoint, t: f64, h: f64, g: &Forcing, rule: StepRule) -> Result<PhasePoint> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step h = {h} must be positive")));
    }
    let (x0, v0) = (state.x, state.v);
    let mut x = exp_raw(&x0, &(v0 * h));
    let mut change = f64::INFINITY;
    let a0 = match rule {
        StepRule::Transported => v0 + tangential(g, &x0, t) * (0.5 * h),
        StepRule::Literal => v0,
    };
    for _ in 0..FIXED_POINT_MAX {
        let avg = match rule {
            StepRule::Transported => {
                let g1 = tangential(g, &x, t + h);
                let v = parallel_transport(&x0, &x, &a0) + g1 * (0.5 * h);
                (v0 + parallel_transport(&x, &x0, &v)) * 0.5
            }
            StepRule::Literal => {
                let v = tangent_projection(&x, &(v0 + g(&x, t + h) * h));
                tangent_projection(&x0, &((v0 + v) * 0.5))
            }
        };
        let next = exp_raw(&x0, &(avg * h));
        change = (next - x).norm();
        x = next;
        if change < FIXED_POINT_TOL {
            let v = match rule {
                StepRule::Transported => {
                    parallel_transport(&x0, &x, &a0) + tangential(g, &x, t + h) * (0.5 * h)
                }
                StepRule::Literal => tangent_projection(&x, &(v0 + g(&x, t + h) * h)),
            };
            return PhasePoint::new(x, v);
        }
    }
    Err(Error::NonConvergence {
        what: "predictor fixed point".into(),
        iterations: FIXED_POINT_MAX,
        residual: change,
    })
}

#[derive(Clone, Debug)]
pub struct TrajectoryBundle {
    /// Uniform sample times.
    pub times: Vec<f64>,
    /// `paths[p][k]` is particle `p` at `times[k]`.
    pub paths: Vec<Vec<PhasePoint>>,
    /// Initial mesh node of each particle.
    pub labels: Vec<usize>,
    pub h: f64,
    pub forcing: String,
}

impl TrajectoryBundle {
    pub fn positions_at(&self, k: usize) -> Vec<Vec3> {
        self.paths.iter().map(|p| p[k].x).collect()
    }

    /// Time-reversed bundle with negated velocities.
    pub fn reversed(&self) -> Self {
        let t_end = *self.times.last().unwrap_or(&0.0);
        let t0 = self.times.first().copied().unwrap_or(0.0);
        TrajectoryBundle {
            times: self.times.iter().rev().map(|t| t0 + t_end - t).collect(),
            paths: self
                .paths
                .iter()
                .map(|p| p.iter().rev().map(PhasePoint::reversed).collect())
                .collect(),
            labels: self.labels.clone(),
            h: self.h,
            forcing: self.forcing.clone(),
        }
    }
}

/// Advance every particle `steps` predictor steps of size `h` from time `t0`.
pub fn integrate_predictor(
    initial: &[PhasePoint],
    g: &Forcing,
    t0: f64,
    h: f64,
    steps: usize,
    rule: StepRule,
    forcing: &str,
) -> Result<TrajectoryBundle> {
    let paths = initial
        .par_iter()
        .map(|p0| {
            let mut path = Vec::with_capacity(steps + 1);
            path.push(*p0);
            let mut p = *p0;
            for k in 0..steps {
                p = step_predictor(&p, t0 + k as f64 * h, h, g, rule)?;
                path.push(p);
            }
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBundle {
        times: (0..=steps).map(|k| t0 + k as f64 * h).collect(),
        paths,
        labels: (0..initial.len()).collect(),
        h,
        forcing: forcing.into(),
    })
}

/// Variation of constants over `[t0, t0 + tau]` with the rotation kernel: with `ω = ‖V‖` frozen
/// over a step, `S_k = R(dt)S_{k−1} + (dt/2)(R(dt)[0; G_{k−1}] + [0; G_k])` for `S = [X; V]`,
/// followed by projection onto the tangent bundle. Force-free motion is reproduced exactly.
pub fn integrate_integral_equation(
    initial: &PhasePoint,
    g: &Forcing,
    t0: f64,
    tau: f64,
    dt: f64,
) -> Result<Vec<PhasePoint>> {
    if !(dt > 0.0) || !(tau >= 0.0) {
        return Err(Error::Domain(format!("need dt > 0 and tau ≥ 0, got {dt}, {tau}")));
    }
    let steps = (tau / dt).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let mut s = *initial;
    let mut gk = tangential(g, &s.x, t0);
    out.push(s);
    for k in 1..=steps {
        let w = s.speed();
        let (c, sn) = ((w * dt).cos(), (w * dt).sin());
        let sinc = if w > 0.0 { sn / w } else { dt };
        let x = s.x * c + s.v * sinc + gk * (0.5 * dt * sinc);
        let x = x / x.norm();
        let g_new = tangential(g, &x, t0 + k as f64 * dt);
        let v = s.x * (-w * sn) + s.v * c + (gk * c + g_new) * (0.5 * dt);
        s = PhasePoint::new(x, v)?;
        gk = g_new;
        out.push(s);
    }
    Ok(out)
}

/// Integral-equation trajectories for many particles, sampled every `dt`.
pub fn integrate_integral_bundle(
    initial: &[PhasePoint],
    g: &Forcing,
    t0: f64,
    tau: f64,
    dt: f64,
    forcing: &str,
) -> Result<TrajectoryBundle> {
    let paths = initial
        .par_iter()
        .map(|p| integrate_integral_equation(p, g, t0, tau, dt))
        .collect::<Result<Vec<_>>>()?;
    let n = paths.first().map_or(0, |p| p.len());
    Ok(TrajectoryBundle {
        times: (0..n).map(|k| t0 + k as f64 * dt).collect(),
        paths,
        labels: (0..initial.len()).collect(),
        h: dt,
        forcing: forcing.into(),
    })
}

#[derive(Clone, Debug)]
pub struct TangentCostReport {
    /// `∫(‖γ̇‖² + ‖γ̈‖²)dt` per particle.
    pub per_particle: Vec<f64>,
    /// Mass-weighted sum of `per_particle`.
    pub aggregate: f64,
    /// `W₂²` between the initial and final particle measures (cost `d²/2`).
    pub w2_term: f64,
    /// `Σ m ∫ṡ⁴κ² dt` with `κ² = κ_n² + κ_g²`.
    pub curvature_term: f64,
    /// `Σ m ∫‖∇Θ₀(X)‖² dt` when a forcing was supplied.
    pub forcing_term: Option<f64>,
    pub duration: f64,
}

impl TangentCostReport {
    /// `aggregate − (W₂² + curvature)`; valid for durations up to 2.
    pub fn margin(&self) -> f64 {
        self.aggregate - (self.w2_term + self.curvature_term)
    }

    /// `aggregate − (2W₂²/τ + curvature)`, the Cauchy–Schwarz form.
    pub fn sharp_margin(&self) -> f64 {
        self.aggregate - (2.0 * self.w2_term / self.duration + self.curvature_term)
    }

    /// `aggregate − (2W₂² + ∫∫‖∇Θ₀‖²)` for unit-speed runs of duration at most 1.
    pub fn unit_speed_margin(&self) -> Option<f64> {
        self.forcing_term.map(|f| self.aggregate - (2.0 * self.w2_term + f))
    }
}

fn trapezoid(times: &[f64], f: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(f.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Tangent-bundle transport cost of a trajectory bundle with particle masses `masses`. With
/// `forcing`, also integrates `‖G‖²` along the paths.
pub fn tangent_cost(traj: &TrajectoryBundle, masses: &[f64], forcing: Option<&Forcing>) -> Result<TangentCostReport> {
    if masses.len() != traj.paths.len() {
        return Err(Error::Invalid("one mass per particle required".into()));
    }
    if traj.times.len() < 5 {
        return Err(Error::Invalid("trajectories need at least 5 samples".into()));
    }
    let times = &traj.times;
    let rows = traj
        .paths
        .par_iter()
        .map(|path| {
            let xs: Vec<Vec3> = path.iter().map(|p| p.x).collect();
            let d = sample_derivatives(times, &xs)?;
            let cost: Vec<f64> = d.iter().map(|(a, b)| a.norm_squared() + b.norm_squared()).collect();
            let curv: Vec<f64> = d
                .iter()
                .map(|(a, b)| {
                    let s = a.norm();
                    let sdd = if s > 0.0 { a.dot(b) / s } else { 0.0 };
                    b.norm_squared() - sdd * sdd
                })
                .collect();
            let forced = forcing.map(|g| {
                let f: Vec<f64> = path
                    .iter()
                    .zip(times)
                    .map(|(p, &t)| tangential(g, &p.x, t).norm_squared())
                    .collect();
                trapezoid(times, &f)
            });
            Ok((trapezoid(times, &cost), trapezoid(times, &curv), forced))
        })
        .collect::<Result<Vec<_>>>()?;
    let per_particle: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let aggregate = per_particle.iter().zip(masses).map(|(c, m)| c * m).sum();
    let curvature_term = rows.iter().zip(masses).map(|(r, m)| r.1 * m).sum();
    let forcing_term = forcing.map(|_| rows.iter().zip(masses).map(|(r, m)| r.2.unwrap_or(0.0) * m).sum());
    let start = DiscreteMeasure { points: traj.positions_at(0), masses: masses.to_vec() };
    let end = DiscreteMeasure { points: traj.positions_at(times.len() - 1), masses: masses.to_vec() };
    let w2_term = w2_squared_points(&start, &end)?.value;
    Ok(TangentCostReport {
        per_particle,
        aggregate,
        w2_term,
        curvature_term,
        forcing_term,
        duration: times[times.len() - 1] - times[0],
    })
}

/// Geodesic curvature along one sampled path, signed against `X × T`.
pub fn geodesic_curvature(times: &[f64], path: &[PhasePoint]) -> Result<Vec<f64>> {
    let pts = path
        .iter()
        .map(|p| crate::sphere_geom::SpherePoint::new(p.x))
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::sphere_geom::frenet_from_samples(times, &pts)?
        .iter()
        .map(|f| f.kappa_g)
        .collect())
}

#[derive(Clone, Debug)]
pub struct VorticityReport {
    /// `sup |X·(∇×V)|` per field.
    pub sup_curl: Vec<f64>,
    /// `circulation[k][c]` is `∮ V·dl` of field `k` around contour `c`.
    pub circulation: Vec<Vec<f64>>,
}

/// Closed polygon along the circle of colatitude `theta`, counter-clockwise seen from `+z`.
pub fn latitude_contour(theta: f64, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|k| {
            let lon = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            Vec3::new(theta.sin() * lon.cos(), theta.sin() * lon.sin(), theta.cos())
        })
        .collect()
}

/// `∮ V·dl` around a closed polygon, by the midpoint rule on each great-circle edge.
pub fn circulation(mesh: &Mesh, v: &[Vec3], contour: &[Vec3]) -> f64 {
    let n = contour.len();
    let mut hint = 0;
    let mut total = 0.0;
    for k in 0..n {
        let (a, b) = (contour[k], contour[(k + 1) % n]);
        let mid = (a + b).normalize();
        hint = mesh.nearest_node(&mid, hint);
        let vm = tangent_projection(&mid, &mesh.interpolate_vector(v, &mid, hint));
        let edge = crate::sphere_geom::log_raw(&a, &b);
        total += vm.dot(&parallel_transport(&a, &mid, &edge));
    }
    total
}

pub fn vorticity_diagnostic(mesh: &Mesh, fields: &[VelocityField], contours: &[Vec<Vec3>]) -> VorticityReport {
    let sup_curl = fields
        .iter()
        .map(|v| mesh.curl_normal(v).iter().fold(0.0_f64, |m, c| m.max(c.abs())))
        .collect();
    let circulation = fields
        .iter()
        .map(|v| contours.iter().map(|c| circulation(mesh, v, c)).collect())
        .collect();
    VorticityReport { sup_curl, circulation }
}

#[derive(Clone, Debug)]
pub struct PathRegularityReport {
    /// `Σ_j W₂²(ρ_{j+1}, ρ_j)/(t_{j+1} − t_j)` with the standard cost `d²`.
    pub sum: f64,
    /// `2∫∫(‖∇q‖² + ‖∇(Θ₁∘ρ)‖²)ρ dm dt` when rates were supplied.
    pub bound: Option<f64>,
}

impl PathRegularityReport {
    pub fn margin(&self) -> Option<f64> {
        self.bound.map(|b| b - self.sum)
    }
}

/// Discrete 2-absolute-continuity sum of a density path. `rates[k]`, if given, is the
/// integrand `∫(‖∇q‖² + ‖∇(Θ₁∘ρ)‖²)ρ dm` at `times[k]`.
pub fn path_regularity(
    mesh: &Mesh,
    times: &[f64],
    densities: &[Density],
    rates: Option<&[f64]>,
) -> Result<PathRegularityReport> {
    if times.len() != densities.len() || times.len() < 3 {
        return Err(Error::Invalid("need at least 3 snapshots with matching times".into()));
    }
    let sum = (0..times.len() - 1)
        .map(|j| {
            let dt = times[j + 1] - times[j];
            if !(dt > 0.0) {
                return Err(Error::Invalid("snapshot times must increase".into()));
            }
            Ok(2.0 * w2_squared_exact(mesh, &densities[j], &densities[j + 1])?.value / dt)
        })
        .sum::<Result<f64>>()?;
    let bound = match rates {
        Some(r) if r.len() == times.len() => Some(2.0 * trapezoid(times, r)),
        Some(_) => return Err(Error::Invalid("one rate per snapshot required".into())),
        None => None,
    };
    Ok(PathRegularityReport { sum, bound })
}
