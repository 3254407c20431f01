//! Run configuration and the library of initial conditions.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::ThetaModel;
use crate::error::{Error, Result};
use crate::euler_solver::{SolverConfig, SolverState};
use crate::mesh::{Density, Mesh, ScalarField};
use crate::sphere_geom::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaVariant {
    /// `Θ(r) = r^{γ−1}`.
    Power,
    /// `Θ(r) = r^{γ−1}/γ`.
    UnitEnthalpy,
}

/// Initial condition: a named preset or a file of nodal values.
#[derive(Clone, Debug, PartialEq)]
pub enum Preset {
    /// `ρ₀` uniform, `q₀ = 0`.
    Static,
    /// `ρ₀ ∝ 1 + a·cosθ`, `q₀ = b·cosθ`.
    Zonal { a: f64, b: f64 },
    /// `ρ₀ ∝ 1 + a·Y`, `q₀ = a·Y` with the sectoral harmonic `Y = sin^mθ·cos mφ`.
    Rossby { a: f64, m: u32 },
    /// `ρ₀ ∝ 1 + a·s`, `q₀ = a·s` with `s` a seeded random cubic polynomial of sup-norm 1.
    Random { a: f64 },
    /// Whitespace-separated nodal values, `#` starts a comment. Densities are normalized.
    File(PathBuf),
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::Static => write!(f, "static"),
            Preset::Zonal { a, b } => write!(f, "zonal({a}, {b})"),
            Preset::Rossby { a, m } => write!(f, "rossby({a}, {m})"),
            Preset::Random { a } => write!(f, "random({a})"),
            Preset::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], Some(&s[i + 1..s.len() - 1])),
            _ => (s, None),
        };
        let known = ["static", "zonal", "rossby", "random"];
        if !known.contains(&name) {
            if s.is_empty() {
                return Err(Error::Invalid("empty initial condition".into()));
            }
            return Ok(Preset::File(PathBuf::from(s)));
        }
        let args: Vec<f64> = match args {
            None => vec![],
            Some(a) if a.trim().is_empty() => vec![],
            Some(a) => a
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Invalid(format!("bad argument {x:?} in {s:?}")))
                })
                .collect::<Result<_>>()?,
        };
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(Error::Invalid(format!("{name} takes {n} arguments, got {}", args.len())))
            }
        };
        let amplitude = |a: f64| {
            if a.abs() < 1.0 {
                Ok(a)
            } else {
                Err(Error::Invalid(format!("{name} amplitude {a} must lie in (-1, 1)")))
            }
        };
        match name {
            "static" => {
                arity(0)?;
                Ok(Preset::Static)
            }
            "zonal" => {
                arity(2)?;
                Ok(Preset::Zonal { a: amplitude(args[0])?, b: args[1] })
            }
            "rossby" => {
                arity(2)?;
                let m = args[1];
                if !(m >= 1.0 && m.fract() == 0.0 && m <= 16.0) {
                    return Err(Error::Invalid(format!("rossby wavenumber {m} must be an integer in [1, 16]")));
                }
                Ok(Preset::Rossby { a: amplitude(args[0])?, m: m as u32 })
            }
            _ => {
                arity(1)?;
                Ok(Preset::Random { a: amplitude(args[0])? })
            }
        }
    }
}

impl Serialize for Preset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Preset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn sectoral(x: &Vec3, m: u32) -> f64 {
    // Re (x + iy)^m = sin^mθ·cos mφ.
    let (mut re, mut im) = (1.0, 0.0);
    for _ in 0..m {
        (re, im) = (re * x.x - im * x.y, re * x.y + im * x.x);
    }
    re
}

fn random_cubic(seed: u64) -> impl Fn(&Vec3) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exps: Vec<[i32; 3]> = (0..=3)
        .flat_map(|d| (0..=d).flat_map(move |i| (0..=d - i).map(move |j| [i, j, d - i - j])))
        .filter(|e| e.iter().sum::<i32>() > 0)
        .collect();
    let coef: Vec<f64> = exps.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    let raw = move |x: &Vec3| -> f64 {
        exps.iter()
            .zip(&coef)
            .map(|(e, c)| c * x.x.powi(e[0]) * x.y.powi(e[1]) * x.z.powi(e[2]))
            .sum()
    };
    // Sup-norm over a fixed dense icosphere.
    let probe = Mesh::icosphere(4).expect("level-4 icosphere");
    let sup = probe.nodes().iter().map(|x| raw(x).abs()).fold(0.0, f64::max).max(1e-300);
    move |x: &Vec3| raw(x) / sup
}

fn read_values(path: &Path, n: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let values: Vec<f64> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split_whitespace())
        .map(|w| {
            w.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Invalid(format!("{}: bad value {w:?}", path.display())))
        })
        .collect::<Result<_>>()?;
    if values.len() != n {
        return Err(Error::Invalid(format!(
            "{}: expected {n} values, found {}",
            path.display(),
            values.len()
        )));
    }
    Ok(values)
}

impl Preset {
    /// Nodal density values, normalized to unit mass. Relative file paths resolve against `base`.
    pub fn density(&self, mesh: &Mesh, seed: u64, base: &Path) -> Result<Density> {
        let values = match self {
            Preset::Static => return Ok(Density::uniform(mesh)),
            Preset::Zonal { a, .. } => mesh.sample(|x| 1.0 + a * x.z),
            Preset::Rossby { a, m } => mesh.sample(|x| 1.0 + a * sectoral(x, *m)),
            Preset::Random { a } => {
                let s = random_cubic(seed);
                mesh.sample(|x| 1.0 + a * s(x))
            }
            Preset::File(p) => {
                let v = read_values(&base.join(p), mesh.len())?;
                if let Some(i) = v.iter().position(|&r| r < 0.0) {
                    return Err(Error::Invalid(format!("{}: negative density at node {i}", p.display())));
                }
                v
            }
        };
        Density::normalized(mesh, values)
    }

    /// Nodal velocity potential.
    pub fn potential(&self, mesh: &Mesh, seed: u64, base: &Path) -> Result<ScalarField> {
        Ok(match self {
            Preset::Static => vec![0.0; mesh.len()],
            Preset::Zonal { b, .. } => mesh.sample(|x| b * x.z),
            Preset::Rossby { a, m } => mesh.sample(|x| a * sectoral(x, *m)),
            Preset::Random { a } => {
                let s = random_cubic(seed ^ 0x9e37_79b9_7f4a_7c15);
                mesh.sample(|x| a * s(x))
            }
            Preset::File(p) => read_values(&base.join(p), mesh.len())?,
        })
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Icosphere subdivision level, 1 to 6.
    pub mesh_level: usize,
    pub gamma: f64,
    pub theta_variant: ThetaVariant,
    pub h: f64,
    pub tau: f64,
    pub eps_factor: f64,
    pub initial_density: Preset,
    pub initial_potential: Preset,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Compute the transport-based ledger columns.
    #[serde(default = "default_true")]
    pub audit: bool,
}

impl RunConfig {
    /// Zonal regression setup: level 3, `γ = 1.4`, `h = 0.02`, `τ = 0.2`, `zonal(0.2, 0.1)`.
    pub fn zonal_regression() -> Self {
        RunConfig {
            mesh_level: 3,
            gamma: 1.4,
            theta_variant: ThetaVariant::Power,
            h: 0.02,
            tau: 0.2,
            eps_factor: 2.0,
            initial_density: Preset::Zonal { a: 0.2, b: 0.1 },
            initial_potential: Preset::Zonal { a: 0.2, b: 0.1 },
            seed: 0,
            output_dir: PathBuf::from("out"),
            audit: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.mesh_level) {
            return Err(Error::Invalid(format!("mesh_level = {} must lie in [1, 6]", self.mesh_level)));
        }
        if !(self.gamma > 1.0 && self.gamma.is_finite()) {
            return Err(Error::Invalid(format!("gamma = {} must exceed 1", self.gamma)));
        }
        self.solver_config().validate()
    }

    pub fn theta(&self) -> ThetaModel {
        match self.theta_variant {
            ThetaVariant::Power => ThetaModel::power(self.gamma),
            ThetaVariant::UnitEnthalpy => ThetaModel::unit_enthalpy(self.gamma),
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        let mut c = SolverConfig::new(self.h, self.tau, self.theta());
        c.eps_factor = self.eps_factor;
        c.audit = self.audit;
        c
    }

    pub fn mesh(&self) -> Result<Mesh> {
        Mesh::icosphere(self.mesh_level)
    }

    /// Initial state; relative file paths in the presets resolve against `base`.
    pub fn initial_state(&self, mesh: &Mesh, base: &Path) -> Result<SolverState> {
        let rho = self.initial_density.density(mesh, self.seed, base)?;
        let q = self.initial_potential.potential(mesh, self.seed, base)?;
        SolverState::new(mesh, rho, q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_parsing_round_trips() {
        for s in ["static", "zonal(0.2, 0.1)", "rossby(0.1, 3)", "random(0.3)", "data/rho.txt"] {
            let p: Preset = s.parse().unwrap();
            assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
        }
        assert!("zonal(0.2)".parse::<Preset>().is_err());
        assert!("zonal(1.5, 0)".parse::<Preset>().is_err());
        assert!("rossby(0.1, 2.5)".parse::<Preset>().is_err());
        assert!("random(x)".parse::<Preset>().is_err());
    }

    #[test]
    fn missing_field_is_named() {
        let mut v = serde_json::to_value(RunConfig::zonal_regression()).unwrap();
        v.as_object_mut().unwrap().remove("gamma");
        let err = RunConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
    }

    #[test]
    fn invariants_enforced() {
        let base = RunConfig::zonal_regression();
        for bad in [
            RunConfig { gamma: 1.0, ..base.clone() },
            RunConfig { h: 0.0, ..base.clone() },
            RunConfig { tau: 0.01, ..base.clone() },
            RunConfig { mesh_level: 7, ..base.clone() },
            RunConfig { mesh_level: 0, ..base.clone() },
        ] {
            assert!(RunConfig::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
        }
        assert!(RunConfig::from_json(&serde_json::to_string(&base).unwrap()).is_ok());
    }

    #[test]
    fn presets_have_unit_mass_and_expected_shape() {
        let mesh = Mesh::icosphere(2).unwrap();
        let here = Path::new(".");
        for p in ["static", "zonal(0.2, 0.1)", "rossby(0.1, 3)", "random(0.3)"] {
            let p: Preset = p.parse().unwrap();
            let rho = p.density(&mesh, 7, here).unwrap();
            assert!((mesh.integrate(rho.values()) - 1.0).abs() < 1e-12);
            assert!(rho.min() > 0.0);
        }
        let q = Preset::Zonal { a: 0.2, b: 0.1 }.potential(&mesh, 0, here).unwrap();
        for (x, v) in mesh.nodes().iter().zip(&q) {
            assert!((v - 0.1 * x.z).abs() < 1e-15);
        }
        let y = Preset::Rossby { a: 0.5, m: 2 }.potential(&mesh, 0, here).unwrap();
        for (x, v) in mesh.nodes().iter().zip(&y) {
            assert!((v - 0.5 * (x.x * x.x - x.y * x.y)).abs() < 1e-14);
        }
    }

    #[test]
    fn random_preset_follows_seed() {
        let mesh = Mesh::icosphere(1).unwrap();
        let p = Preset::Random { a: 0.3 };
        let here = Path::new(".");
        let a = p.potential(&mesh, 1, here).unwrap();
        assert_eq!(a, p.potential(&mesh, 1, here).unwrap());
        assert_ne!(a, p.potential(&mesh, 2, here).unwrap());
        let sup = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(sup <= 0.3 + 1e-12);
    }

    #[test]
    fn file_preset_reads_and_rejects() {
        let mesh = Mesh::icosphere(1).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let good = dir.join("rho.txt");
        let body: String = (0..mesh.len()).map(|i| format!("{} # node {i}\n", 1.0 + i as f64 * 0.01)).collect();
        std::fs::write(&good, body).unwrap();
        let rho = Preset::File("rho.txt".into()).density(&mesh, 0, dir).unwrap();
        assert!((mesh.integrate(rho.values()) - 1.0).abs() < 1e-12);
        std::fs::write(dir.join("short.txt"), "1 2 3").unwrap();
        assert!(Preset::File("short.txt".into()).density(&mesh, 0, dir).is_err());
        std::fs::write(dir.join("junk.txt"), "abc").unwrap();
        assert!(Preset::File("junk.txt".into()).potential(&mesh, 0, dir).is_err());
    }
}
