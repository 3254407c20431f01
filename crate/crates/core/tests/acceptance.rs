//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::f64::consts::{FRAC_PI_2, PI};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sphere_euler::config::RunConfig;
use sphere_euler::energy::{check_convexity_hypotheses, entropy_production_check, phi_from_theta, PhiModel};
use sphere_euler::euler_solver::{
    gronwall_compare, onofri_check, run, vorticity_budget, weak_continuity_residual, RunOutput, SolverConfig,
    SolverState, TestFunction, DECREASE_CONSTANT, ROUNDOFF,
};
use sphere_euler::helmholtz::{
    helmholtz_decompose, rotated_gradient, spectral_gap_estimate, weighted_decompose,
};
use sphere_euler::jko::{energy, fisher_gap_check, jko_step, JkoOptions};
use sphere_euler::ot::{
    c_transform, generalized_geodesic_convexity, half_dsq, sinkhorn_dense, transport_lp, w2_squared_points,
    CostMatrix, DiscreteMeasure, LpOptions,
};
use sphere_euler::sphere_geom::{
    distance_raw, exp_map, exp_raw, hessian_half_dsq, jacobian_det_tau_cot, log_map, tangent_projection,
    tau_cot, SpherePoint,
};
use sphere_euler::tangent_flow::{
    geodesic_curvature, integrate_predictor, step_predictor, tangent_cost, PhasePoint, StepRule,
};
use sphere_euler::{Density, Mesh, ThetaModel, Vec3};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_point(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n < 1.0 {
            return v / n;
        }
    }
}

fn random_tangent(rng: &mut impl Rng, x: &Vec3) -> Vec3 {
    tangent_projection(x, &random_point(rng))
}

fn integrate_sq(mesh: &Mesh, v: &[Vec3], rho: Option<&[f64]>) -> f64 {
    let e: Vec<f64> = v
        .iter()
        .enumerate()
        .map(|(i, v)| v.norm_squared() * rho.map_or(1.0, |r| r[i]))
        .collect();
    mesh.integrate(&e)
}

/// `1 + Σ c_k p_k` over monomials of degree 1 and 2 with `|c_k| ≤ amp`.
fn random_smooth(mesh: &Mesh, rng: &mut impl Rng, amp: f64) -> Vec<f64> {
    let c: Vec<f64> = (0..8).map(|_| rng.gen_range(-amp..amp)).collect();
    mesh.sample(|x| {
        1.0 + c[0] * x.x + c[1] * x.y + c[2] * x.z + c[3] * x.x * x.y + c[4] * x.y * x.z
            + c[5] * (x.z * x.z - 1.0 / 3.0)
            + c[6] * (x.x * x.x - x.y * x.y)
            + c[7] * x.x * x.z
    })
}

fn geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_rt: f64 = 0.0;
    for _ in 0..1000 {
        let (x, y) = (random_point(&mut rng), random_point(&mut rng));
        if distance_raw(&x, &y) > PI - 1e-3 {
            continue;
        }
        let (px, py) = (ok(SpherePoint::new(x))?, ok(SpherePoint::new(y))?);
        let back = ok(exp_map(px, ok(log_map(px, py))?.vec))?;
        worst_rt = worst_rt.max((back.coords() - y).norm());
    }
    ensure!(worst_rt < 1e-10, "exp/log round trip error {worst_rt:e}");

    let mut worst_fd: f64 = 0.0;
    let mut worst_det: f64 = 0.0;
    let mut pairs = 0;
    while pairs < 100 {
        let (x, y) = (random_point(&mut rng), random_point(&mut rng));
        let d = distance_raw(&x, &y);
        if !(0.05..3.0).contains(&d) {
            continue;
        }
        let hess = ok(hessian_half_dsq(ok(SpherePoint::new(x))?, ok(SpherePoint::new(y))?))?;
        let v = random_tangent(&mut rng, &x).normalize();
        let s = 1e-4;
        let f = |t: f64| 0.5 * distance_raw(&exp_raw(&x, &(v * t)), &y).powi(2);
        let fd = (f(s) - 2.0 * f(0.0) + f(-s)) / (s * s);
        worst_fd = worst_fd.max((fd - hess.quadratic_form(&v)).abs());
        worst_det = worst_det.max((hess.det() - tau_cot(d)).abs());
        pairs += 1;
    }
    ensure!(worst_fd < 1e-6, "Hessian vs second differences {worst_fd:e}");
    ensure!(worst_det < 1e-12, "det vs τ cot τ {worst_det:e}");

    let n = 100;
    let grid: Vec<f64> = (0..n).map(|k| 0.01 + (FRAC_PI_2 - 0.02) * k as f64 / (n - 1) as f64).collect();
    let logd = grid
        .iter()
        .map(|&t| jacobian_det_tau_cot(t).map(f64::ln))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let worst_d2 = (1..n - 1)
        .map(|k| logd[k + 1] - 2.0 * logd[k] + logd[k - 1])
        .fold(f64::NEG_INFINITY, f64::max);
    ensure!(worst_d2 <= 1e-8, "log det second difference {worst_d2:e}");
    Ok(format!(
        "round trip {worst_rt:.1e}, Hessian FD {worst_fd:.1e}, det {worst_det:.1e}, max Δ² log det {worst_d2:.1e}"
    ))
}

/// Optimal cost for masses that are multiples of `1/atoms`, by enumerating all assignments of
/// unit atoms (the integral vertices of the transportation polytope).
fn atom_oracle(xs: &[Vec3], a: &[usize], ys: &[Vec3], b: &[usize]) -> f64 {
    let sa: Vec<usize> = a.iter().enumerate().flat_map(|(i, &k)| std::iter::repeat(i).take(k)).collect();
    let sb: Vec<usize> = b.iter().enumerate().flat_map(|(j, &k)| std::iter::repeat(j).take(k)).collect();
    let n = sa.len();
    let eval = |p: &[usize]| (0..n).map(|k| half_dsq(&xs[sa[k]], &ys[sb[p[k]]])).sum::<f64>() / n as f64;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    let mut best = eval(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn ot_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let atoms = 6;
    let mut worst_lp: f64 = 0.0;
    let mut instances = 0;
    for m in 1..=6 {
        for n in 1..=6 {
            for _ in 0..3 {
                let xs: Vec<Vec3> = (0..m).map(|_| random_point(&mut rng)).collect();
                let ys: Vec<Vec3> = (0..n).map(|_| random_point(&mut rng)).collect();
                let mut split = |k: usize| {
                    let mut v = vec![1usize; k];
                    for _ in k..atoms {
                        v[rng.gen_range(0..k)] += 1;
                    }
                    v
                };
                let (a, b) = (split(m), split(n));
                let mass = |v: &[usize]| v.iter().map(|&k| k as f64 / atoms as f64).collect::<Vec<_>>();
                let mu = DiscreteMeasure { points: xs.clone(), masses: mass(&a) };
                let nu = DiscreteMeasure { points: ys.clone(), masses: mass(&b) };
                let lp = ok(w2_squared_points(&mu, &nu))?.value;
                worst_lp = worst_lp.max((lp - atom_oracle(&xs, &a, &ys, &b)).abs());
                instances += 1;
            }
        }
    }
    ensure!(worst_lp < 1e-9, "LP vs enumeration {worst_lp:e}");

    let mut worst_sk: f64 = 0.0;
    for _ in 0..20 {
        let xs: Vec<Vec3> = (0..6).map(|_| random_point(&mut rng)).collect();
        let ys: Vec<Vec3> = (0..6).map(|_| random_point(&mut rng)).collect();
        let mut w = || {
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (a, b) = (w(), w());
        let sk = ok(sinkhorn_dense(&a, &b, &CostMatrix::half_dsq(&xs, &ys), 1e-3))?.value;
        let c = |i: usize, j: usize| half_dsq(&xs[i], &ys[j]);
        let exact = ok(transport_lp(&a, &b, &c, &LpOptions::default()))?.value;
        worst_sk = worst_sk.max((sk - exact).abs());
    }
    ensure!(worst_sk < 1e-3, "Sinkhorn vs exact {worst_sk:e}");

    let mesh = ok(Mesh::icosphere(1))?;
    ensure!(mesh.len() == 42, "level-1 mesh has {} nodes", mesh.len());
    let phi: Vec<f64> = (0..42).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let fast = c_transform(&mesh, &phi);
    let nodes = mesh.nodes();
    let worst_ct = (0..42)
        .map(|i| {
            let direct = (0..42)
                .map(|j| 0.5 * nodes[i].dot(&nodes[j]).clamp(-1.0, 1.0).acos().powi(2) - phi[j])
                .fold(f64::INFINITY, f64::min);
            (fast[i] - direct).abs()
        })
        .fold(0.0, f64::max);
    ensure!(worst_ct < 1e-12, "c-transform vs direct {worst_ct:e}");
    Ok(format!(
        "{instances} LP instances within {worst_lp:.1e}, Sinkhorn gap {worst_sk:.1e}, c-transform {worst_ct:.1e}"
    ))
}

fn generalized_geodesics() -> Outcome {
    let mesh = ok(Mesh::icosphere(3))?;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = f64::INFINITY;
    for _ in 0..20 {
        let f = ok(Density::normalized(&mesh, random_smooth(&mesh, &mut rng, 0.3)))?;
        let potential = |rng: &mut ChaCha8Rng| {
            let l: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.35..0.35)).collect();
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.15..0.15)).collect();
            mesh.sample(|x| l[0] * x.x + l[1] * x.y + l[2] * x.z + q[0] * x.x * x.y + q[1] * x.y * x.z + q[2] * x.z * x.z)
        };
        let (p0, p1) = (potential(&mut rng), potential(&mut rng));
        for c in ok(generalized_geodesic_convexity(&mesh, &f, &p0, &p1, &[0.25, 0.5, 0.75]))? {
            let rel = c.margin() / c.lhs;
            ensure!(rel >= -0.02, "margin {:.3e} is {:.2}% of the left side", c.margin(), 100.0 * rel);
            worst = worst.min(rel);
        }
    }
    Ok(format!("20 pairs x 3 values of s, worst margin/lhs {worst:.3e}"))
}

fn jko() -> Outcome {
    let theta = ThetaModel::power(1.4);
    let opts = JkoOptions::default();
    let mesh = ok(Mesh::icosphere(2))?;
    let f = ok(Density::normalized(&mesh, mesh.sample(|x| 1.0 + 0.4 * x.x * x.z)))?;
    let r = ok(jko_step(&mesh, &f, 0.0, &theta, &opts))?;
    ensure!(r.rho_h.values() == f.values() && r.value == 0.0, "h = 0 is not the identity");

    let u = Density::uniform(&mesh);
    let r = ok(jko_step(&mesh, &u, 0.3, &theta, &opts))?;
    let dev = r.rho_h.values().iter().zip(u.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(dev <= opts.gap_tol, "uniform moved by {dev:e}");

    // three point masses: scan the simplex of node masses
    let nodes = vec![Vec3::x(), Vec3::y(), Vec3::z()];
    let w = 4.0 * PI / 3.0;
    let tri = ok(Mesh::point_set(nodes, vec![w; 3]))?;
    let t2 = ThetaModel::power(2.0);
    let h = 0.5;
    let f3 = ok(Density::new(&tri, vec![0.6 / w, 0.3 / w, 0.1 / w]))?;
    let r3 = ok(jko_step(&tri, &f3, h, &t2, &opts))?;
    let eval = |m0: f64, m1: f64| -> Result<f64, String> {
        let m2 = (1.0 - m0 - m1).max(0.0);
        ok(energy(&tri, &ok(Density::new(&tri, vec![m0 / w, m1 / w, m2 / w]))?, &f3, h, &t2))
    };
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=100 {
        for j in 0..=(100 - i) {
            let (m0, m1) = (i as f64 / 100.0, j as f64 / 100.0);
            let v = eval(m0, m1)?;
            if v < best.0 {
                best = (v, m0, m1);
            }
        }
    }
    for step in [1e-3, 1e-4, 1e-5] {
        let (c0, c1) = (best.1, best.2);
        for i in -20..=20 {
            for j in -20..=20 {
                let (m0, m1) = (c0 + i as f64 * step, c1 + j as f64 * step);
                if m0 < 0.0 || m1 < 0.0 || m0 + m1 > 1.0 {
                    continue;
                }
                let v = eval(m0, m1)?;
                if v < best.0 {
                    best = (v, m0, m1);
                }
            }
        }
    }
    let masses = r3.rho_h.masses(&tri);
    let oracle = [best.1, best.2, 1.0 - best.1 - best.2];
    let worst3 = masses.iter().zip(oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(worst3 < 1e-4, "three-node masses {masses:?} vs scan {oracle:?}");

    let mesh = ok(Mesh::icosphere(3))?;
    let cfg = RunConfig::zonal_regression();
    let f = ok(cfg.initial_density.density(&mesh, 0, std::path::Path::new(".")))?;
    let h = 0.05;
    let r = ok(jko_step(&mesh, &f, h, &theta, &opts))?;
    // bounds in units of the uniform density 1/4π
    let scale = 4.0 * PI;
    let delta1 = (scale * f.min()).min(1.0 / (scale * f.max()));
    let (lo, hi) = (scale * r.rho_h.min(), scale * r.rho_h.max());
    let tol = r.optimality_residual.sqrt() + ROUNDOFF;
    ensure!(lo >= delta1 - tol && hi <= 1.0 / delta1 + tol, "4πρ_h in [{lo}, {hi}], δ₁ = {delta1}");
    let gap = ok(fisher_gap_check(&mesh, &f, &r, h, &theta))?;
    ensure!(gap >= -1e-4, "Fisher gap margin {gap:e}");
    Ok(format!(
        "uniform drift {dev:.1e}, three-node {worst3:.1e}, 4πρ_h in [{lo:.4}, {hi:.4}] vs δ₁ = {delta1:.4}, Fisher gap {gap:.2e}"
    ))
}

fn zonal_regression() -> Result<(Mesh, SolverConfig, RunOutput), String> {
    let cfg = RunConfig::zonal_regression();
    let mesh = ok(cfg.mesh())?;
    let initial = ok(cfg.initial_state(&mesh, std::path::Path::new(".")))?;
    let sc = cfg.solver_config();
    let out = ok(run(&mesh, initial, &sc))?;
    if let Some(e) = &out.abort {
        return Err(format!("zonal regression aborted: {e}"));
    }
    Ok((mesh, sc, out))
}

fn energy_decrease(out: &RunOutput) -> Outcome {
    let mut worst = f64::INFINITY;
    for r in &out.ledger.rows[1..] {
        let m = r.decrease_margin.ok_or("ledger lacks the decrease column")?;
        ensure!(m >= -r.budget, "step {}: margin {m:e} below budget {:e}", r.step, r.budget);
        worst = worst.min(m);
    }
    Ok(format!(
        "{} steps, constant {DECREASE_CONSTANT:.5}, worst margin {worst:.3e}",
        out.ledger.rows.len() - 1
    ))
}

fn dissipation_floor(out: &RunOutput) -> Outcome {
    let mut worst = f64::INFINITY;
    for r in &out.ledger.rows[1..] {
        ensure!(
            r.dissipation_margin >= -r.budget,
            "step {}: margin {:e} below budget {:e}",
            r.step,
            r.dissipation_margin,
            r.budget
        );
        worst = worst.min(r.dissipation_margin);
    }
    Ok(format!("worst margin {worst:.3e}"))
}

fn helmholtz() -> Outcome {
    let mesh = ok(Mesh::icosphere(4))?;
    let z = mesh.sample(|x| x.z);
    let grad = mesh.gradient(&z);
    let scale = integrate_sq(&mesh, &grad, None);
    let p = helmholtz_decompose(&mesh, &grad);
    let cross_g = p.cross_term(&mesh).abs() / scale;
    let leak_g = integrate_sq(&mesh, &mesh.gradient(&p.psi), None) / scale;
    let rot = rotated_gradient(&mesh, &z);
    let p = helmholtz_decompose(&mesh, &rot);
    let cross_r = p.cross_term(&mesh).abs() / scale;
    let leak_r = integrate_sq(&mesh, &mesh.gradient(&p.q), None) / scale;
    let worst = cross_g.max(cross_r);
    ensure!(worst < 1e-3, "cross terms {cross_g:e}, {cross_r:e} relative to the field energy");
    ensure!(leak_g.max(leak_r) < 1e-4, "leakage {leak_g:e}, {leak_r:e}");

    let rho = ok(Density::normalized(&mesh, mesh.sample(|x| 1.0 + 0.3 * x.z)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let c: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v: Vec<Vec3> = mesh
        .nodes()
        .iter()
        .map(|x| {
            let amb = Vec3::new(
                c[0] + c[1] * x.y + c[2] * x.z * x.z + c[3] * x.x * x.y,
                c[4] + c[5] * x.x + c[6] * x.z + c[7] * x.y * x.z,
                c[8] + c[9] * x.x * x.x + c[10] * x.y + c[11] * x.x * x.z,
            );
            tangent_projection(x, &amb)
        })
        .collect();
    let (phi, w) = ok(weighted_decompose(&mesh, &v, &rho))?;
    let r = rho.values();
    let (ev, ep, ew) = (
        integrate_sq(&mesh, &v, Some(r)),
        integrate_sq(&mesh, &mesh.gradient(&phi), Some(r)),
        integrate_sq(&mesh, &w, Some(r)),
    );
    let pyth = ((ep + ew) / ev - 1.0).abs();
    ensure!(pyth < 0.02, "weighted Pythagoras off by {pyth:.3}");

    let gap = ok(spectral_gap_estimate(&mesh, &Density::uniform(&mesh)))?;
    ensure!((gap / 2.0 - 1.0).abs() < 0.05, "spectral gap {gap}");
    Ok(format!("cross terms {worst:.1e}, Pythagoras {pyth:.1e}, spectral gap {gap:.4}"))
}

fn phi_entropy() -> Outcome {
    for g in [1.1, 1.2, 1.4, 1.45] {
        let r = check_convexity_hypotheses(&ThetaModel::power(g));
        ensure!(r.all(), "power γ = {g}: {r:?}");
    }
    let r = check_convexity_hypotheses(&ThetaModel::power(5.0 / 3.0));
    ensure!(r.first_three() && !r.all(), "power γ = 5/3: {r:?}");
    let r = check_convexity_hypotheses(&ThetaModel::Log);
    ensure!(!r.limits, "log passes the limit hypothesis: {r:?}");

    let mesh = ok(Mesh::icosphere(4))?;
    let mu = Density::uniform(&mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let phis = [PhiModel::entropy(), phi_from_theta(&ThetaModel::unit_enthalpy(1.4))];
    let mut worst = f64::INFINITY;
    for _ in 0..50 {
        let f = random_smooth(&mesh, &mut rng, 0.25);
        for phi in &phis {
            worst = worst.min(entropy_production_check(&mesh, &f, &mu, phi, 1.0));
        }
    }
    ensure!(worst >= -1e-6, "entropy-production margin {worst:e}");
    let mut tight: f64 = 0.0;
    for f in [mesh.sample(|x| 1.0 + 0.2 * x.z), mesh.sample(|x| 1.0 - 0.3 * x.x + 0.1 * x.y)] {
        tight = tight.max(entropy_production_check(&mesh, &f, &mu, &PhiModel::half_square(), 2.0).abs());
    }
    ensure!(tight < 1e-6, "degree-1 margin {tight:e}");
    Ok(format!("hypothesis table matches, worst margin {worst:.2e}, degree-1 |margin| {tight:.1e}"))
}

/// Unit-speed latitude circle at colatitude `theta0` under `−∇Θ₀`, `Θ₀ = −αz`, `α = cosθ₀/sin²θ₀`.
fn latitude_forcing(theta0: f64) -> impl Fn(&Vec3, f64) -> Vec3 + Sync {
    let alpha = theta0.cos() / theta0.sin().powi(2);
    move |x: &Vec3, _t: f64| tangent_projection(x, &(Vec3::z() * alpha)) - x
}

fn latitude_start(theta0: f64, lon: f64) -> Result<PhasePoint, String> {
    let x = Vec3::new(theta0.sin() * lon.cos(), theta0.sin() * lon.sin(), theta0.cos());
    ok(PhasePoint::new(x, Vec3::new(-lon.sin(), lon.cos(), 0.0)))
}

fn dynamics(mesh: &Mesh, sc: &SolverConfig, out: &RunOutput) -> Outcome {
    let free = |x: &Vec3, _t: f64| -x;
    let mut worst_gc: f64 = 0.0;
    for h in [1e-3, 0.05, 0.3, 1.0] {
        let mut p = ok(PhasePoint::new(Vec3::x(), Vec3::y()))?;
        for k in 0..10 {
            p = ok(step_predictor(&p, k as f64 * h, h, &free, StepRule::Transported))?;
        }
        let t = 10.0 * h;
        worst_gc = worst_gc.max((p.x - (Vec3::x() * t.cos() + Vec3::y() * t.sin())).norm());
    }
    ensure!(worst_gc < 1e-10, "great circle error {worst_gc:e}");

    let theta0 = 1.0;
    let g = latitude_forcing(theta0);
    let mut errs = Vec::new();
    for h in [0.04f64, 0.02, 0.01, 0.005] {
        let mut p = latitude_start(theta0, 0.0)?;
        let steps = (1.0 / h).round() as usize;
        for k in 0..steps {
            p = ok(step_predictor(&p, k as f64 * h, h, &g, StepRule::Transported))?;
        }
        let lon = 1.0 / theta0.sin();
        let exact = Vec3::new(theta0.sin() * lon.cos(), theta0.sin() * lon.sin(), theta0.cos());
        errs.push((p.x - exact).norm());
    }
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    ensure!(ratios.iter().all(|r| (r - 4.0).abs() < 0.3), "convergence ratios {ratios:?}");

    let vb = vorticity_budget(mesh, &out.snapshots, &sc.theta, sc.h);
    let sup = vb.sup_curl.iter().cloned().fold(0.0, f64::max);
    ensure!(vb.margin() >= 0.0, "sup curl {sup:e} exceeds budget {:e}", vb.budget);

    let theta0 = 1.1;
    let g = latitude_forcing(theta0);
    let h = 0.005;
    let starts = (0..8)
        .map(|k| latitude_start(theta0, k as f64 * PI / 4.0))
        .collect::<Result<Vec<_>, _>>()?;
    let bundle = ok(integrate_predictor(&starts, &g, 0.0, h, 200, StepRule::Transported, "latitude"))?;
    let kg = ok(geodesic_curvature(&bundle.times, &bundle.paths[0]))?;
    let grad_theta0 = theta0.cos() / theta0.sin();
    let worst_kg = kg[2..kg.len() - 2]
        .iter()
        .map(|k| (k.abs() - grad_theta0).abs())
        .fold(0.0, f64::max);
    ensure!(worst_kg < 1e-3, "|κ_g| vs ‖∇Θ₀‖ off by {worst_kg:e}");

    let masses = vec![1.0 / 8.0; 8];
    let forced = ok(tangent_cost(&bundle, &masses, Some(&g)))?;
    let m21 = forced.margin() / forced.aggregate;
    let m22 = forced.unit_speed_margin().ok_or("no forcing term")? / forced.aggregate;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let geo_starts = (0..6)
        .map(|_| {
            let x = random_point(&mut rng);
            ok(PhasePoint::new(x, random_tangent(&mut rng, &x)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let geo = ok(integrate_predictor(&geo_starts, &free, 0.0, 0.01, 100, StepRule::Transported, "free"))?;
    let free_margin = ok(tangent_cost(&geo, &[1.0 / 6.0; 6], None))?;
    let m21_free = free_margin.margin() / free_margin.aggregate;
    let worst_cost = m21.min(m22).min(m21_free);
    ensure!(worst_cost >= -0.01, "tangent-cost margins {m21:.3e}, {m22:.3e}, {m21_free:.3e}");
    Ok(format!(
        "great circle {worst_gc:.1e}, ratios {:.2}/{:.2}/{:.2}, sup curl {sup:.2e} <= {:.2e}, κ_g {worst_kg:.1e}, cost margins >= {worst_cost:.2e}",
        ratios[0], ratios[1], ratios[2], vb.budget
    ))
}

fn weak_form_and_gronwall() -> Outcome {
    let theta = ThetaModel::power(1.4);
    let tau = 0.2;
    let zonal = |mesh: &Mesh| -> Result<SolverState, String> {
        let rho = ok(Density::normalized(mesh, mesh.sample(|x| 1.0 + 0.2 * x.z)))?;
        ok(SolverState::new(mesh, rho, mesh.sample(|x| 0.1 * x.z)))
    };
    let config = |h: f64, eps_factor: f64| {
        let mut c = SolverConfig::new(h, tau, theta.clone());
        c.audit = false;
        c.eps_factor = eps_factor;
        c
    };
    let value = |x: &Vec3, t: f64| x.z * (1.0 - t / tau);
    let dt = |x: &Vec3, _t: f64| -x.z / tau;
    let grad = |x: &Vec3, t: f64| tangent_projection(x, &Vec3::z()) * (1.0 - t / tau);
    let psi = TestFunction { value: &value, dt: &dt, grad: &grad };
    let mut residuals = Vec::new();
    for (level, h) in [(2, 0.04), (3, 0.02), (4, 0.01)] {
        let mesh = ok(Mesh::icosphere(level))?;
        let out = ok(run(&mesh, zonal(&mesh)?, &config(h, 2.0)))?;
        ensure!(out.abort.is_none(), "level {level} run aborted: {:?}", out.abort);
        let times: Vec<f64> = out.snapshots.iter().map(|s| s.t).collect();
        let dens: Vec<Density> = out.snapshots.iter().map(|s| s.rho.clone()).collect();
        let vels: Vec<_> = out.snapshots.iter().map(|s| s.v.clone()).collect();
        residuals.push(ok(weak_continuity_residual(&mesh, &times, &dens, &vels, &psi))?);
    }
    let ratios: Vec<f64> = residuals.windows(2).map(|w| w[0] / w[1]).collect();
    ensure!(ratios.iter().all(|&r| r >= 1.5), "residuals {residuals:?}, ratios {ratios:?}");

    let mesh = ok(Mesh::icosphere(3))?;
    let s0 = zonal(&mesh)?;
    let base = ok(run(&mesh, s0.clone(), &config(0.02, 2.0)))?;
    let half_h = ok(run(&mesh, s0.clone(), &config(0.01, 2.0)))?;
    let half_eps = ok(run(&mesh, s0, &config(0.02, 1.0)))?;
    let mut margins = Vec::new();
    for (name, other) in [("h/2", &half_h), ("eps/2", &half_eps)] {
        let g = ok(gronwall_compare(&mesh, &base, other, &theta, 0.005))?;
        let worst = g.measured.iter().cloned().fold(0.0, f64::max);
        ensure!(g.margin() >= 0.0, "{name}: measured {worst:e} exceeds the envelope (margin {:e})", g.margin());
        margins.push(format!("{name} W1 {worst:.1e} <= envelope"));
    }
    Ok(format!(
        "residuals {:.3e}/{:.3e}/{:.3e}, ratios {:.2}/{:.2}; {}",
        residuals[0],
        residuals[1],
        residuals[2],
        ratios[0],
        ratios[1],
        margins.join(", ")
    ))
}

fn onofri() -> Outcome {
    let mesh = ok(Mesh::icosphere(4))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut worst = f64::INFINITY;
    for _ in 0..20 {
        let amp = rng.gen_range(0.05..3.0);
        let c: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0) * amp).collect();
        let q = mesh.sample(|x| {
            c[0] * x.x + c[1] * x.y + c[2] * x.z
                + c[3] * x.x * x.y + c[4] * x.y * x.z + c[5] * x.x * x.z
                + c[6] * (x.x * x.x - x.y * x.y) + c[7] * (3.0 * x.z * x.z - 1.0)
                + c[8] * x.x * x.y * x.z + c[9] * x.z * (5.0 * x.z * x.z - 3.0)
                + c[10] * x.x * (5.0 * x.z * x.z - 1.0) + c[11] * x.y * (5.0 * x.z * x.z - 1.0)
                + c[12] * x.z * (x.x * x.x - x.y * x.y)
                + c[13] * x.x * (x.x * x.x - 3.0 * x.y * x.y)
                + c[14] * x.y * (3.0 * x.x * x.x - x.y * x.y)
        });
        worst = worst.min(onofri_check(&mesh, &q));
    }
    ensure!(worst >= -1e-4, "Onofri margin {worst:e}");
    let zq = onofri_check(&mesh, &mesh.sample(|x| x.z));
    let closed = 1.0 / 6.0 - 1f64.sinh().ln();
    ensure!((zq - 0.0052).abs() <= 0.001, "q = cos θ margin {zq} (closed form {closed})");
    Ok(format!("worst margin {worst:.2e}; q = cos θ gives {zq:.5} (closed form {closed:.5})"))
}

fn report(n: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    let outcome = match (outcome, limit) {
        (Ok(msg), Some(l)) if elapsed > l => Err(format!("{msg}; runtime {elapsed:.1?} exceeds {l:?}")),
        (o, _) => o,
    };
    let (pass, msg) = match &outcome {
        Ok(m) => (true, m.as_str()),
        Err(m) => (false, m.as_str()),
    };
    println!(
        "criterion {n:>2} {name:<28} {} ({:.1} s): {msg}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    pass
}

fn main() {
    let secs = Duration::from_secs;
    let mut results = vec![
        report(1, "geometry", Some(secs(5)), geometry),
        report(2, "transport oracles", Some(secs(30)), ot_oracles),
        report(3, "generalized geodesics", Some(secs(120)), generalized_geodesics),
        report(4, "minimizing movement", Some(secs(300)), jko),
    ];
    let start = Instant::now();
    let regression = zonal_regression();
    let run_time = start.elapsed();
    println!("zonal regression run: {:.1} s", run_time.as_secs_f64());
    match &regression {
        Ok((mesh, sc, out)) => {
            results.push(report(5, "energy decrease", Some(secs(300).saturating_sub(run_time)), || {
                energy_decrease(out)
            }));
            results.push(report(6, "dissipation floor", None, || dissipation_floor(out)));
            results.push(report(7, "Helmholtz", Some(secs(120)), helmholtz));
            results.push(report(8, "Phi-entropy", Some(secs(60)), phi_entropy));
            results.push(report(9, "dynamics", Some(secs(300)), || dynamics(mesh, sc, out)));
        }
        Err(e) => {
            for (n, name) in [(5, "energy decrease"), (6, "dissipation floor"), (9, "dynamics")] {
                results.push(report(n, name, None, || Err(e.clone())));
            }
            results.push(report(7, "Helmholtz", Some(secs(120)), helmholtz));
            results.push(report(8, "Phi-entropy", Some(secs(60)), phi_entropy));
        }
    }
    results.push(report(10, "weak form and Gronwall", Some(secs(900)), weak_form_and_gronwall));
    results.push(report(11, "Onofri", None, onofri));
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
