//! Isentropic Euler flow on the unit sphere by a three-stage transport scheme: a geodesic
//! predictor, a Wasserstein/internal-energy corrector and a weighted Helmholtz projection.

pub mod config;
pub mod energy;
pub mod error;
pub mod euler_solver;
pub mod helmholtz;
pub mod jko;
pub mod mesh;
pub mod ot;
pub mod sphere_geom;
pub mod tangent_flow;

pub use energy::{PhiModel, ThetaModel};
pub use error::{Error, Result};
pub use mesh::{build_icosphere, Density, Mesh, ScalarField, VelocityField};
pub use ot::{PotentialPair, TransportPlan};
pub use sphere_geom::{SpherePoint, TangentVector, Vec3};
