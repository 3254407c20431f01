//! Closed-form geometry of the unit sphere.
//!
//! Points are unit 3-vectors, tangent vectors are 3-vectors orthogonal to their base point.
//! Everything here is a pure function of its inputs.

use nalgebra::{Matrix2, Matrix3, Vector3};
use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Drift below this is corrected silently by the constructors.
pub const SILENT_DRIFT: f64 = 1e-12;
/// Drift above this is rejected.
pub const MAX_DRIFT: f64 = 1e-6;
/// Pairs closer than this to antipodal are treated as on the cut locus.
pub const CUT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpherePoint(Vec3);

impl SpherePoint {
    /// Accepts a vector of norm 1 within `MAX_DRIFT` and renormalizes it.
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || (n - 1.0).abs() > MAX_DRIFT {
            return Err(Error::Domain(format!("point norm {n} is not 1")));
        }
        Ok(SpherePoint(v / n))
    }

    /// Radial projection of any nonzero vector.
    pub fn from_direction(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Domain("zero or non-finite direction".into()));
        }
        Ok(SpherePoint(v / n))
    }

    pub fn from_spherical(colatitude: f64, longitude: f64) -> Self {
        let (st, ct) = colatitude.sin_cos();
        let (sp, cp) = longitude.sin_cos();
        SpherePoint(Vec3::new(st * cp, st * sp, ct))
    }

    pub fn coords(&self) -> Vec3 {
        self.0
    }

    pub fn e1() -> Self {
        SpherePoint(Vec3::x())
    }

    pub fn e2() -> Self {
        SpherePoint(Vec3::y())
    }

    pub fn e3() -> Self {
        SpherePoint(Vec3::z())
    }

    pub fn antipode(&self) -> Self {
        SpherePoint(-self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentVector {
    pub base: SpherePoint,
    pub vec: Vec3,
}

impl TangentVector {
    /// Removes the normal component; rejects vectors whose normal component exceeds `MAX_DRIFT`.
    pub fn new(base: SpherePoint, v: Vec3) -> Result<Self> {
        Ok(TangentVector {
            base,
            vec: project_checked(&base.0, &v)?,
        })
    }

    pub fn zero(base: SpherePoint) -> Self {
        TangentVector {
            base,
            vec: Vec3::zeros(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.vec.norm()
    }
}

fn project_checked(x: &Vec3, v: &Vec3) -> Result<Vec3> {
    let c = x.dot(v);
    if !c.is_finite() || c.abs() > MAX_DRIFT {
        return Err(Error::Domain(format!("vector is not tangent (x·v = {c:e})")));
    }
    Ok(v - x * c)
}

/// Orthogonal projection onto the tangent plane at `x`.
pub fn tangent_projection(x: &Vec3, v: &Vec3) -> Vec3 {
    v - x * x.dot(v)
}

/// `exp_x(w)` without tangency checks; `w` is projected first.
pub fn exp_raw(x: &Vec3, w: &Vec3) -> Vec3 {
    let w = tangent_projection(x, w);
    let t = w.norm();
    if t == 0.0 {
        return *x;
    }
    let y = x * t.cos() + w * (t.sin() / t);
    y / y.norm()
}

/// `log_x(y)` without the cut-locus check; returns zero for coincident points.
pub fn log_raw(x: &Vec3, y: &Vec3) -> Vec3 {
    let c = x.dot(y);
    let v = y - x * c;
    let s = v.norm();
    if s == 0.0 {
        return Vec3::zeros();
    }
    let theta = s.atan2(c);
    v * (theta / s)
}

pub fn distance_raw(x: &Vec3, y: &Vec3) -> f64 {
    x.cross(y).norm().atan2(x.dot(y))
}

pub fn exp_map(x: SpherePoint, w: Vec3) -> Result<SpherePoint> {
    let w = project_checked(&x.0, &w)?;
    Ok(SpherePoint(exp_raw(&x.0, &w)))
}

pub fn log_map(x: SpherePoint, y: SpherePoint) -> Result<TangentVector> {
    if distance(x, y) > PI - CUT_TOL {
        return Err(Error::CutLocus("log of an antipodal pair".into()));
    }
    Ok(TangentVector {
        base: x,
        vec: log_raw(&x.0, &y.0),
    })
}

/// Geodesic distance in `[0, π]`.
pub fn distance(x: SpherePoint, y: SpherePoint) -> f64 {
    distance_raw(&x.0, &y.0)
}

/// Parallel transport of `v` from `T_a` to `T_b` along the minimizing geodesic.
pub fn parallel_transport(a: &Vec3, b: &Vec3, v: &Vec3) -> Vec3 {
    let d = 1.0 + a.dot(b);
    if d <= 1e-15 {
        return tangent_projection(b, v);
    }
    v - (a + b) * (b.dot(v) / d)
}

/// Orthonormal basis of the tangent plane at `x`, chosen deterministically.
pub fn tangent_basis(x: &Vec3) -> (Vec3, Vec3) {
    let ax = if x.x.abs() <= x.y.abs() && x.x.abs() <= x.z.abs() {
        Vec3::x()
    } else if x.y.abs() <= x.z.abs() {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let e1 = tangent_projection(x, &ax).normalize();
    let e2 = x.cross(&e1);
    (e1, e2)
}

/// `τ cot τ` on `[0, π)`, continuous at 0.
pub fn tau_cot(tau: f64) -> f64 {
    if tau.abs() < 1e-4 {
        let t2 = tau * tau;
        1.0 - t2 / 3.0 - t2 * t2 / 45.0
    } else {
        tau / tau.tan()
    }
}

/// Jacobian determinant `τ cot τ` of the exponential map on `[0, π/2)`.
pub fn jacobian_det_tau_cot(tau: f64) -> Result<f64> {
    if !(0.0..FRAC_PI_2).contains(&tau) {
        return Err(Error::Domain(format!("tau = {tau} outside [0, π/2)")));
    }
    Ok(tau_cot(tau))
}

/// Symmetric bilinear form on the tangent plane, stored as an ambient 3×3 matrix that annihilates
/// the base point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HessianOperator {
    pub base: SpherePoint,
    pub matrix: Matrix3<f64>,
}

impl HessianOperator {
    pub fn identity(base: SpherePoint) -> Self {
        let x = base.0;
        HessianOperator {
            base,
            matrix: Matrix3::identity() - x * x.transpose(),
        }
    }

    /// Builds the operator from a 2×2 matrix in the basis `(e1, e2)`.
    pub fn from_plane(base: SpherePoint, e1: &Vec3, e2: &Vec3, m: &Matrix2<f64>) -> Self {
        let matrix = e1 * e1.transpose() * m[(0, 0)]
            + (e1 * e2.transpose() + e2 * e1.transpose()) * (0.5 * (m[(0, 1)] + m[(1, 0)]))
            + e2 * e2.transpose() * m[(1, 1)];
        HessianOperator { base, matrix }
    }

    pub fn quadratic_form(&self, v: &Vec3) -> f64 {
        v.dot(&(self.matrix * v))
    }

    pub fn in_plane(&self, e1: &Vec3, e2: &Vec3) -> Matrix2<f64> {
        let a = self.matrix;
        Matrix2::new(
            e1.dot(&(a * e1)),
            e1.dot(&(a * e2)),
            e2.dot(&(a * e1)),
            e2.dot(&(a * e2)),
        )
    }

    pub fn plane(&self) -> Matrix2<f64> {
        let (e1, e2) = tangent_basis(&self.base.0);
        self.in_plane(&e1, &e2)
    }

    pub fn det(&self) -> f64 {
        self.plane().determinant()
    }

    /// Eigenvalues on the tangent plane, ascending.
    pub fn eigenvalues(&self) -> [f64; 2] {
        sym2_eigenvalues(&self.plane())
    }
}

pub fn sym2_eigenvalues(m: &Matrix2<f64>) -> [f64; 2] {
    let a = m[(0, 0)];
    let d = m[(1, 1)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let mean = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    [mean - r, mean + r]
}

/// Hessian in `x` of `d(x, y)²/2`: eigenvalue 1 along `log_x(y)` and `τ cot τ` across it.
pub fn hessian_half_dsq(x: SpherePoint, y: SpherePoint) -> Result<HessianOperator> {
    let tau = distance(x, y);
    if tau > PI - CUT_TOL {
        return Err(Error::CutLocus("Hessian of d²/2 at an antipodal pair".into()));
    }
    Ok(hessian_half_dsq_raw(&x.0, &y.0, x))
}

pub(crate) fn hessian_half_dsq_raw(x: &Vec3, y: &Vec3, base: SpherePoint) -> HessianOperator {
    let zeta = log_raw(x, y);
    let tau = zeta.norm();
    let p = Matrix3::identity() - x * x.transpose();
    if tau == 0.0 {
        return HessianOperator { base, matrix: p };
    }
    let eta = zeta / tau;
    let tc = tau_cot(tau);
    HessianOperator {
        base,
        matrix: eta * eta.transpose() * (1.0 - tc) + p * tc,
    }
}

/// `exp_x(ξ + sζ)`.
pub fn jacobi_interpolant(x: SpherePoint, xi: Vec3, zeta: Vec3, s: f64) -> Result<SpherePoint> {
    let xi = project_checked(&x.0, &xi)?;
    let zeta = project_checked(&x.0, &zeta)?;
    let w = xi + zeta * s;
    if w.norm() >= PI {
        return Err(Error::CutLocus(format!("|ξ + sζ| = {} ≥ π", w.norm())));
    }
    Ok(SpherePoint(exp_raw(&x.0, &w)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrenetFrame {
    pub tangent: Vec3,
    pub normal_n: Vec3,
    pub binormal: Vec3,
    pub kappa_n: f64,
    pub kappa_g: f64,
    pub kappa: f64,
    /// Arc speed `ṡ`.
    pub speed: f64,
    /// `s̈`.
    pub accel: f64,
}

/// Finite-difference weights for derivatives 0..=m at `z` from nodes `xs` (Fornberg's recursion).
pub fn fd_weights(z: f64, xs: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = xs.len();
    let mut c = vec![vec![0.0; n]; m + 1];
    let mut c1 = 1.0;
    let mut c4 = xs[0] - z;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - z;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// First and second time derivatives of a sampled curve: centered 3-point stencils inside,
/// one-sided 4-point stencils at the ends.
pub fn sample_derivatives(times: &[f64], xs: &[Vec3]) -> Result<Vec<(Vec3, Vec3)>> {
    let n = times.len();
    if n != xs.len() {
        return Err(Error::Invalid("times and samples differ in length".into()));
    }
    if n < 5 {
        return Err(Error::Invalid("need at least 5 samples".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let idx: Vec<usize> = if i == 0 {
            (0..4).collect()
        } else if i == n - 1 {
            (n - 4..n).collect()
        } else {
            (i - 1..=i + 1).collect()
        };
        let ts: Vec<f64> = idx.iter().map(|&k| times[k]).collect();
        let w = fd_weights(times[i], &ts, 2);
        let mut d1 = Vec3::zeros();
        let mut d2 = Vec3::zeros();
        for (a, &k) in idx.iter().enumerate() {
            d1 += xs[k] * w[1][a];
            d2 += xs[k] * w[2][a];
        }
        out.push((d1, d2));
    }
    Ok(out)
}

/// Serret–Frenet data along a sampled spherical curve. The surface normal is the position `X`.
pub fn frenet_from_samples(times: &[f64], points: &[SpherePoint]) -> Result<Vec<FrenetFrame>> {
    let xs: Vec<Vec3> = points.iter().map(|p| p.0).collect();
    let ders = sample_derivatives(times, &xs)?;
    let mut out = Vec::with_capacity(xs.len());
    for (x, (d1, d2)) in xs.iter().zip(ders) {
        let d1 = tangent_projection(x, &d1);
        let speed = d1.norm();
        if !(speed > 1e-12) {
            return Err(Error::Domain("stationary trajectory".into()));
        }
        let t = d1 / speed;
        let accel = d1.dot(&d2) / speed;
        let k = (d2 - t * accel) / (speed * speed);
        let side = x.cross(&t);
        let kappa_n = k.dot(x);
        let kappa_g = k.dot(&side);
        let kappa = kappa_n.hypot(kappa_g);
        let normal_n = (x * kappa_n + side * kappa_g) / kappa;
        out.push(FrenetFrame {
            tangent: t,
            normal_n,
            binormal: t.cross(&normal_n),
            kappa_n,
            kappa_g,
            kappa,
            speed,
            accel,
        });
    }
    Ok(out)
}
