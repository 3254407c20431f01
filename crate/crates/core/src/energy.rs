//! Internal-energy models `Θ` and the functionals built from them: `U`, pressure, `Φ`,
//! Φ-entropy, Φ-information and the special Fisher functional.
//!
//! `Θ₁ = rΘ' + Θ` throughout, so `Θ₁ = d(rΘ)/dr`. For `Θ = k r^{γ−1}` this gives
//! `Θ₁ = kγ r^{γ−1}`; the constructor [`ThetaModel::unit_enthalpy`] picks `k = 1/γ` so that
//! `Θ₁ = r^{γ−1}`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{Density, Mesh};

type Scalar = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Probe grid shared by the hypothesis checks: 400 log-spaced points in `[1e-4, 1e4]`.
pub fn probe_grid() -> Vec<f64> {
    (0..400).map(|k| 10f64.powf(-4.0 + 8.0 * k as f64 / 399.0)).collect()
}

/// `Θ` with its first two derivatives, for user-supplied models.
#[derive(Clone)]
pub struct CustomTheta {
    pub name: String,
    pub theta: Scalar,
    pub dtheta: Scalar,
    pub d2theta: Scalar,
}

impl fmt::Debug for CustomTheta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomTheta({})", self.name)
    }
}

#[derive(Clone, Debug)]
pub enum ThetaModel {
    /// `Θ(r) = scale · r^{γ−1}`.
    Power { gamma: f64, scale: f64 },
    /// `Θ(r) = log r`.
    Log,
    Custom(CustomTheta),
}

impl ThetaModel {
    pub fn power(gamma: f64) -> Self {
        ThetaModel::Power { gamma, scale: 1.0 }
    }

    pub fn power_scaled(gamma: f64, scale: f64) -> Self {
        ThetaModel::Power { gamma, scale }
    }

    /// `Θ = r^{γ−1}/γ`, so that `Θ₁(r) = r^{γ−1}`.
    pub fn unit_enthalpy(gamma: f64) -> Self {
        ThetaModel::Power { gamma, scale: 1.0 / gamma }
    }

    pub fn custom(
        name: &str,
        theta: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dtheta: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2theta: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ThetaModel::Custom(CustomTheta {
            name: name.to_string(),
            theta: Arc::new(theta),
            dtheta: Arc::new(dtheta),
            d2theta: Arc::new(d2theta),
        })
    }

    pub fn name(&self) -> String {
        match self {
            ThetaModel::Power { gamma, scale } if *scale == 1.0 => format!("power({gamma})"),
            ThetaModel::Power { gamma, scale } => format!("power({gamma}, scale {scale})"),
            ThetaModel::Log => "log".into(),
            ThetaModel::Custom(c) => c.name.clone(),
        }
    }

    /// Whether `Θ` is singular at `r = 0`, so densities must stay positive.
    pub fn needs_positive(&self) -> bool {
        matches!(self, ThetaModel::Log)
    }

    pub fn theta(&self, r: f64) -> f64 {
        match self {
            ThetaModel::Power { gamma, scale } => scale * r.powf(gamma - 1.0),
            ThetaModel::Log => r.ln(),
            ThetaModel::Custom(c) => (c.theta)(r),
        }
    }

    pub fn dtheta(&self, r: f64) -> f64 {
        match self {
            ThetaModel::Power { gamma, scale } => scale * (gamma - 1.0) * r.powf(gamma - 2.0),
            ThetaModel::Log => 1.0 / r,
            ThetaModel::Custom(c) => (c.dtheta)(r),
        }
    }

    pub fn d2theta(&self, r: f64) -> f64 {
        match self {
            ThetaModel::Power { gamma, scale } => {
                scale * (gamma - 1.0) * (gamma - 2.0) * r.powf(gamma - 3.0)
            }
            ThetaModel::Log => -1.0 / (r * r),
            ThetaModel::Custom(c) => (c.d2theta)(r),
        }
    }

    /// `rΘ(r)`, extended by its limit 0 at `r = 0`.
    pub fn r_theta(&self, r: f64) -> f64 {
        if r == 0.0 {
            return 0.0;
        }
        r * self.theta(r)
    }

    /// `Θ₁ = rΘ' + Θ`.
    pub fn theta1(&self, r: f64) -> f64 {
        match self {
            ThetaModel::Power { gamma, scale } => scale * gamma * r.powf(gamma - 1.0),
            ThetaModel::Log => r.ln() + 1.0,
            ThetaModel::Custom(c) => r * (c.dtheta)(r) + (c.theta)(r),
        }
    }

    /// `Θ₁' = rΘ'' + 2Θ'`.
    pub fn dtheta1(&self, r: f64) -> f64 {
        match self {
            ThetaModel::Power { gamma, scale } => {
                scale * gamma * (gamma - 1.0) * r.powf(gamma - 2.0)
            }
            ThetaModel::Log => 1.0 / r,
            ThetaModel::Custom(c) => r * (c.d2theta)(r) + 2.0 * (c.dtheta)(r),
        }
    }

    /// `χ = Θ₁⁻¹`.
    pub fn chi(&self, u: f64) -> Result<f64> {
        match self {
            ThetaModel::Power { gamma, scale } => {
                if u < 0.0 {
                    return Err(Error::Domain(format!("χ({u}) outside the range of Θ₁")));
                }
                Ok((u / (scale * gamma)).powf(1.0 / (gamma - 1.0)))
            }
            ThetaModel::Log => Ok((u - 1.0).exp()),
            ThetaModel::Custom(_) => {
                let mut hi = 1.0;
                while self.theta1(hi) < u {
                    hi *= 2.0;
                    if hi > 1e300 {
                        return Err(Error::Domain(format!("χ({u}) beyond the bracket")));
                    }
                }
                let mut lo = 0.0;
                if self.theta1(f64::MIN_POSITIVE) > u {
                    return Err(Error::Domain(format!("χ({u}) below the range of Θ₁")));
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.theta1(mid) < u {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-12 * hi.max(1e-300) {
                        break;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }

    /// `F₁°(s) = inf_{r ≥ 0} (rs + rΘ(r))`; the minimiser is `χ(−s)` when `−s` lies in the range of
    /// `Θ₁` and `r = 0` otherwise.
    pub fn conjugate_min(&self, s: f64) -> Result<f64> {
        let lower = match self {
            ThetaModel::Power { .. } => 0.0,
            ThetaModel::Log => f64::NEG_INFINITY,
            ThetaModel::Custom(_) => self.theta1(f64::MIN_POSITIVE),
        };
        if -s <= lower {
            return Ok(0.0);
        }
        let r = self.chi(-s)?;
        Ok(r * s + self.r_theta(r))
    }

    /// `ρ²Θ'(ρ)`.
    pub fn pressure(&self, rho: f64) -> f64 {
        match self {
            ThetaModel::Power { gamma, scale } => scale * (gamma - 1.0) * rho.powf(*gamma),
            _ if rho == 0.0 => 0.0,
            _ => rho * rho * self.dtheta(rho),
        }
    }
}

/// `ρ²Θ'(ρ)`; `(γ−1)ρ^γ` for the plain power law.
pub fn pressure(rho: f64, theta: &ThetaModel) -> f64 {
    theta.pressure(rho)
}

/// `U(ρ) = ∫Θ(ρ)ρ dm`.
pub fn internal_energy(mesh: &Mesh, rho: &Density, theta: &ThetaModel) -> Result<f64> {
    if theta.needs_positive() {
        if let Some(i) = rho.values().iter().position(|&v| v <= 0.0) {
            return Err(Error::Vacuum(i));
        }
    }
    Ok(rho
        .values()
        .iter()
        .zip(mesh.weights())
        .map(|(&r, w)| theta.r_theta(r) * w)
        .sum())
}

/// `∫ρ‖∇(Θ₁∘ρ)‖² dm`.
pub fn special_fisher(mesh: &Mesh, rho: &Density, theta: &ThetaModel) -> Result<f64> {
    if let Some(i) = rho.values().iter().position(|&v| v <= 0.0) {
        return Err(Error::Vacuum(i));
    }
    let t1: Vec<f64> = rho.values().iter().map(|&r| theta.theta1(r)).collect();
    let g = mesh.gradient(&t1);
    Ok(rho
        .values()
        .iter()
        .zip(&g)
        .zip(mesh.weights())
        .map(|((r, v), w)| r * v.norm_squared() * w)
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhiProvenance {
    FromTheta,
    Explicit,
}

/// A convex `Φ` with `Φ(0) = 0`.
#[derive(Clone)]
pub struct PhiModel {
    pub name: String,
    pub provenance: PhiProvenance,
    phi: Scalar,
    dphi: Scalar,
    d2phi: Scalar,
}

impl fmt::Debug for PhiModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PhiModel({}, {:?})", self.name, self.provenance)
    }
}

impl PhiModel {
    pub fn explicit(
        name: &str,
        phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dphi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        PhiModel {
            name: name.into(),
            provenance: PhiProvenance::Explicit,
            phi: Arc::new(phi),
            dphi: Arc::new(dphi),
            d2phi: Arc::new(d2phi),
        }
    }

    /// `Φ(r) = r²/2`.
    pub fn half_square() -> Self {
        Self::explicit("r^2/2", |r| 0.5 * r * r, |r| r, |_| 1.0)
    }

    /// `Φ(r) = r log r`.
    pub fn entropy() -> Self {
        Self::explicit(
            "r log r",
            |r| if r == 0.0 { 0.0 } else { r * r.ln() },
            |r| r.ln() + 1.0,
            |r| 1.0 / r,
        )
    }

    /// `Φ(r) = r^p`.
    pub fn power(p: f64) -> Self {
        Self::explicit(
            &format!("r^{p}"),
            move |r| r.powf(p),
            move |r| p * r.powf(p - 1.0),
            move |r| p * (p - 1.0) * r.powf(p - 2.0),
        )
    }

    pub fn phi(&self, r: f64) -> f64 {
        (self.phi)(r)
    }

    pub fn dphi(&self, r: f64) -> f64 {
        (self.dphi)(r)
    }

    pub fn d2phi(&self, r: f64) -> f64 {
        (self.d2phi)(r)
    }
}

/// `Φ(r) = ∫₀ʳ (r − u) u Θ₁'(u)² du`, so `Φ'' = rΘ₁'²` and `Φ(0) = Φ'(0) = 0`.
///
/// Power laws are integrated in closed form. For `Θ = log`, where the integral diverges at 0, the
/// representative `r log r` with the same `Φ''` is returned; Φ-entropy and Φ-information do not
/// see the affine difference.
pub fn phi_from_theta(theta: &ThetaModel) -> PhiModel {
    let model = match theta {
        ThetaModel::Power { gamma, scale } => {
            let (g, c) = (*gamma, scale * gamma * (gamma - 1.0));
            let c2 = c * c;
            PhiModel::explicit(
                "",
                move |r| c2 * r.powf(2.0 * g - 1.0) / ((2.0 * g - 2.0) * (2.0 * g - 1.0)),
                move |r| c2 * r.powf(2.0 * g - 2.0) / (2.0 * g - 2.0),
                move |r| c2 * r.powf(2.0 * g - 3.0),
            )
        }
        ThetaModel::Log => PhiModel::entropy(),
        ThetaModel::Custom(_) => {
            let t = theta.clone();
            let t1 = theta.clone();
            let t2 = theta.clone();
            PhiModel::explicit(
                "",
                move |r| quad(|u| (r - u) * u * t.dtheta1(u).powi(2), 0.0, r),
                move |r| quad(|u| u * t1.dtheta1(u).powi(2), 0.0, r),
                move |r| r * t2.dtheta1(r).powi(2),
            )
        }
    };
    PhiModel {
        name: format!("Φ[{}]", theta.name()),
        provenance: PhiProvenance::FromTheta,
        ..model
    }
}

/// Tanh-sinh quadrature on `[a, b]`; tolerates integrable endpoint singularities.
pub fn quad(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    if b == a {
        return 0.0;
    }
    let half = 0.5 * (b - a);
    let pi2 = std::f64::consts::FRAC_PI_2;
    let mut step = 1.0;
    let eval = |t: f64| -> f64 {
        let s = pi2 * t.sinh();
        let c = s.cosh();
        let x = s.tanh();
        let w = pi2 * t.cosh() / (c * c);
        // distance from the nearer endpoint, computed without cancellation
        let e = 1.0 / (s.abs().exp() * c);
        if e * half == 0.0 {
            return 0.0;
        }
        let point = if x < 0.0 { a + half * e } else { b - half * e };
        let v = f(point);
        if v.is_finite() {
            v * w
        } else {
            0.0
        }
    };
    let tmax = 4.0;
    let mut sum = eval(0.0);
    let mut k = 1;
    while k as f64 * step <= tmax {
        let t = k as f64 * step;
        sum += eval(t) + eval(-t);
        k += 1;
    }
    let mut total = sum * step * half;
    // halve the step, adding only the new odd nodes
    for _ in 0..12 {
        step *= 0.5;
        let mut k = 1;
        while k as f64 * step <= tmax {
            let t = k as f64 * step;
            sum += eval(t) + eval(-t);
            k += 2;
        }
        let prev = total;
        total = sum * step * half;
        if (total - prev).abs() <= 1e-14 * total.abs().max(1e-300) {
            break;
        }
    }
    total
}

/// `∫Φ(f)dμ − Φ(∫f dμ)`.
pub fn phi_entropy(mesh: &Mesh, f: &[f64], mu: &Density, phi: &PhiModel) -> f64 {
    let m = mu.masses(mesh);
    let mean: f64 = f.iter().zip(&m).map(|(a, b)| a * b).sum();
    let avg: f64 = f.iter().zip(&m).map(|(a, b)| phi.phi(*a) * b).sum();
    avg - phi.phi(mean)
}

/// `∫Φ''(f)‖∇f‖²dμ`.
pub fn phi_information(mesh: &Mesh, f: &[f64], mu: &Density, phi: &PhiModel) -> f64 {
    let g = mesh.gradient(f);
    let m = mu.masses(mesh);
    (0..f.len())
        .map(|i| {
            let n2 = g[i].norm_squared();
            if n2 == 0.0 {
                0.0
            } else {
                phi.d2phi(f[i]) * n2 * m[i]
            }
        })
        .sum()
}

/// `(1/2κ₀)·I_Φ − Ent_Φ`.
pub fn entropy_production_check(
    mesh: &Mesh,
    f: &[f64],
    mu: &Density,
    phi: &PhiModel,
    kappa0: f64,
) -> f64 {
    phi_information(mesh, f, mu, phi) / (2.0 * kappa0) - phi_entropy(mesh, f, mu, phi)
}

/// True if `g` is convex on the grid by divided differences, to relative tolerance `tol`.
fn convex_on(xs: &[f64], g: &[f64], tol: f64) -> bool {
    let slopes: Vec<f64> = (1..xs.len())
        .map(|k| (g[k] - g[k - 1]) / (xs[k] - xs[k - 1]))
        .collect();
    slopes
        .windows(2)
        .all(|s| s[1] - s[0] >= -tol * (s[0].abs() + s[1].abs()).max(f64::MIN_POSITIVE))
}

fn increasing_on(g: &[f64], strict: bool) -> bool {
    g.windows(2)
        .all(|w| if strict { w[1] > w[0] } else { w[1] >= w[0] - 1e-12 * w[0].abs() })
}

/// `−1/Φ''` convex on the probe grid.
pub fn check_admissible(phi: &PhiModel) -> Result<bool> {
    let xs = probe_grid();
    let mut g = Vec::with_capacity(xs.len());
    for &x in &xs {
        let d2 = phi.d2phi(x);
        if !(d2 > 0.0) || !d2.is_finite() {
            return Err(Error::Domain(format!("Φ''({x}) = {d2} is not positive")));
        }
        g.push(-1.0 / d2);
    }
    Ok(convex_on(&xs, &g, 1e-9))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisReport {
    /// `r ↦ Θ(eʳ)` strictly increasing and convex.
    pub increasing_convex_log: bool,
    /// `Θ → 0` at `0⁺` and `Θ → ∞` at `∞`.
    pub limits: bool,
    /// `Θ(2x) ≤ K₂Θ(x)`.
    pub delta2: bool,
    pub k2: f64,
    /// `xΘ₁'(x)` increasing.
    pub x_theta1_increasing: bool,
    /// `−1/(xΘ₁'(x)²)` convex.
    pub inverse_convex: bool,
}

impl HypothesisReport {
    pub fn first_three(&self) -> bool {
        self.increasing_convex_log && self.limits && self.delta2
    }

    pub fn all(&self) -> bool {
        self.first_three() && self.x_theta1_increasing && self.inverse_convex
    }
}

/// Numeric verdicts for the five convexity hypotheses on the probe grid.
///
/// The limit conditions are judged from the endpoint behaviour: `Θ` positive and increasing on
/// the grid, with log-slope `d log Θ/d log x` bounded away from zero at both ends.
pub fn check_convexity_hypotheses(theta: &ThetaModel) -> HypothesisReport {
    let xs = probe_grid();
    let logs: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let th: Vec<f64> = xs.iter().map(|&x| theta.theta(x)).collect();
    let increasing_convex_log = increasing_on(&th, true) && convex_on(&logs, &th, 1e-9);

    let positive = th.iter().all(|&v| v > 0.0 && v.is_finite());
    let n = xs.len();
    let log_slope = |k: usize| (th[k + 1].ln() - th[k].ln()) / (logs[k + 1] - logs[k]);
    let limits = positive
        && increasing_on(&th, true)
        && log_slope(0) > 1e-2
        && log_slope(n - 2) > 1e-2;

    let (delta2, k2) = if positive {
        let k2 = xs
            .iter()
            .zip(&th)
            .map(|(&x, &t)| theta.theta(2.0 * x) / t)
            .fold(0.0, f64::max);
        (k2.is_finite() && k2 < 1e6, k2)
    } else {
        (false, f64::INFINITY)
    };

    let xt1: Vec<f64> = xs.iter().map(|&x| x * theta.dtheta1(x)).collect();
    let x_theta1_increasing = increasing_on(&xt1, false);
    let inv: Vec<f64> = xs
        .iter()
        .map(|&x| -1.0 / (x * theta.dtheta1(x).powi(2)))
        .collect();
    let inverse_convex = inv.iter().all(|v| v.is_finite()) && convex_on(&xs, &inv, 1e-9);

    HypothesisReport {
        increasing_convex_log,
        limits,
        delta2,
        k2,
        x_theta1_increasing,
        inverse_convex,
    }
}

/// `φ` with `rΘ(r) = φ(Φ(r))`, evaluated by bisection on `Φ(r) = s`.
pub fn jensen_phi(theta: &ThetaModel, phi: &PhiModel, s: f64) -> Result<f64> {
    if s < 0.0 {
        return Err(Error::Domain(format!("φ({s}) with negative argument")));
    }
    if s == 0.0 {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while phi.phi(hi) < s {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::Domain("Φ does not reach the argument".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi.phi(mid) < s {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(theta.r_theta(0.5 * (lo + hi)))
}

/// `(U(ρ), 4π·φ(⟨Φ(ρ)⟩))` with `⟨·⟩` the mean over the normalized area measure. Concavity of `φ`
/// gives `U ≤ bound`.
pub fn jensen_bound(mesh: &Mesh, rho: &Density, theta: &ThetaModel) -> Result<(f64, f64)> {
    let phi = phi_from_theta(theta);
    let area: f64 = mesh.weights().iter().sum();
    let mean = rho
        .values()
        .iter()
        .zip(mesh.weights())
        .map(|(&r, w)| phi.phi(r) * w)
        .sum::<f64>()
        / area;
    Ok((internal_energy(mesh, rho, theta)?, area * jensen_phi(theta, &phi, mean)?))
}
