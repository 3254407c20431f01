//! On-disk run artifacts: `snapshots.ndjson`, `ledger.csv` and `summary.json`.
//!
//! Floats are written in shortest round-trip decimal form and parsed with correct rounding, so
//! values survive a write/read cycle bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sphere_euler::config::RunConfig;
use sphere_euler::euler_solver::{LedgerRow, RunOutput, SolverState};
use sphere_euler::{Density, Mesh, Vec3};

use crate::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;
pub const SNAPSHOTS: &str = "snapshots.ndjson";
pub const LEDGER: &str = "ledger.csv";
pub const SUMMARY: &str = "summary.json";
pub const DIAGNOSTICS: &str = "diagnostics.json";

/// First line of `snapshots.ndjson`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub format_version: u32,
    pub mesh_level: usize,
    pub nodes: usize,
    pub mesh_checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub format_version: u32,
    pub t: f64,
    pub density: Vec<f64>,
    pub potential: Vec<f64>,
    pub velocity: Vec<[f64; 3]>,
    pub ledger: LedgerRow,
}

impl Snapshot {
    pub fn from_state(state: &SolverState, row: &LedgerRow) -> Self {
        Snapshot {
            format_version: FORMAT_VERSION,
            t: state.t,
            density: state.rho.values().to_vec(),
            potential: state.q.clone(),
            velocity: state.v.iter().map(|v| [v.x, v.y, v.z]).collect(),
            ledger: row.clone(),
        }
    }

    /// Rebuild the solver state, enforcing the density invariant.
    pub fn to_state(&self, mesh: &Mesh) -> CliResult<SolverState> {
        let rho = Density::new(mesh, self.density.clone())
            .map_err(|e| CliError::Numerical(format!("snapshot at t = {}: {e}", self.t)))?;
        if self.potential.len() != mesh.len() || self.velocity.len() != mesh.len() {
            return Err(CliError::Numerical(format!("snapshot at t = {}: wrong field length", self.t)));
        }
        let v: Vec<Vec3> = self.velocity.iter().map(|a| Vec3::new(a[0], a[1], a[2])).collect();
        let mut s = SolverState::new(mesh, rho, self.potential.clone())?;
        s.v = v;
        s.t = self.t;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format_version: u32,
    pub ledger_format_version: u32,
    /// The run configuration without `output_dir`, so that summaries compare across directories.
    pub config: serde_json::Value,
    pub mesh_checksum: String,
    pub nodes: usize,
    pub steps_requested: usize,
    pub steps_completed: usize,
    pub t_final: f64,
    pub abort: Option<String>,
    pub hamiltonian_initial: f64,
    pub hamiltonian_final: f64,
    pub worst_increase: f64,
    pub max_mass_drift: f64,
}

impl Summary {
    pub fn new(cfg: &RunConfig, mesh: &Mesh, out: &RunOutput) -> Self {
        let mut config = serde_json::to_value(cfg).expect("config serializes");
        config.as_object_mut().expect("config is an object").remove("output_dir");
        let rows = &out.ledger.rows;
        Summary {
            format_version: FORMAT_VERSION,
            ledger_format_version: FORMAT_VERSION,
            config,
            mesh_checksum: mesh.checksum(),
            nodes: mesh.len(),
            steps_requested: cfg.solver_config().steps(),
            steps_completed: rows.len() - 1,
            t_final: out.snapshots.last().map_or(0.0, |s| s.t),
            abort: out.abort.as_ref().map(|e| e.to_string()),
            hamiltonian_initial: rows[0].hamiltonian,
            hamiltonian_final: rows[rows.len() - 1].hamiltonian,
            worst_increase: out.ledger.worst_increase(),
            max_mass_drift: out
                .snapshots
                .iter()
                .map(|s| (mesh.integrate(s.rho.values()) - 1.0).abs())
                .fold(0.0, f64::max),
        }
    }

    /// The stored configuration with `output_dir` set to `dir`.
    pub fn run_config(&self, dir: &Path) -> CliResult<RunConfig> {
        let mut v = self.config.clone();
        let obj = v
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("{SUMMARY}: config is not an object")))?;
        obj.insert("output_dir".into(), serde_json::Value::String(dir.display().to_string()));
        Ok(RunConfig::from_json(&v.to_string())?)
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn put_line<T: Serialize>(w: &mut impl Write, value: &T, path: &Path) -> CliResult<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| CliError::io(path, e))?;
    w.write_all(b"\n").map_err(|e| CliError::io(path, e))
}

pub fn write_snapshots(path: &Path, header: &SnapshotHeader, snapshots: &[Snapshot]) -> CliResult<()> {
    let mut w = create(path)?;
    put_line(&mut w, header, path)?;
    for s in snapshots {
        put_line(&mut w, s, path)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_snapshots(path: &Path) -> CliResult<(SnapshotHeader, Vec<Snapshot>)> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse_err = |n: usize, e: &dyn std::fmt::Display| CliError::Config(format!("{}:{}: {e}", path.display(), n + 1));
    let header: SnapshotHeader = match lines.next() {
        Some((n, l)) => {
            let l = l.map_err(|e| CliError::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| parse_err(n, &e))?
        }
        None => return Err(CliError::Config(format!("{}: empty file", path.display()))),
    };
    if header.format_version != FORMAT_VERSION {
        return Err(CliError::Config(format!(
            "{}: unsupported format_version {}",
            path.display(),
            header.format_version
        )));
    }
    let mut snapshots = Vec::new();
    for (n, l) in lines {
        let l = l.map_err(|e| CliError::io(path, e))?;
        if l.trim().is_empty() {
            continue;
        }
        snapshots.push(serde_json::from_str(&l).map_err(|e| parse_err(n, &e))?);
    }
    Ok((header, snapshots))
}

/// Shortest round-trip decimal, in exponent form outside `[1e-4, 1e15)`.
fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e15).contains(&a) {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}

pub fn write_ledger(path: &Path, rows: &[LedgerRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    let err = |e: csv::Error| CliError::io(path, e);
    w.write_record(["step", "t", "kinetic", "internal", "hamiltonian", "w2_step", "fisher", "dissipation_margin"])
        .map_err(err)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            num(r.t),
            num(r.kinetic),
            num(r.internal),
            num(r.hamiltonian),
            r.w2_step.map_or(String::new(), num),
            num(r.fisher),
            num(r.dissipation_margin),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Write all run artifacts into `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, mesh: &Mesh, out: &RunOutput) -> CliResult<Summary> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let header = SnapshotHeader {
        format_version: FORMAT_VERSION,
        mesh_level: cfg.mesh_level,
        nodes: mesh.len(),
        mesh_checksum: mesh.checksum(),
    };
    let snaps: Vec<Snapshot> = out
        .snapshots
        .iter()
        .zip(&out.ledger.rows)
        .map(|(s, r)| Snapshot::from_state(s, r))
        .collect();
    write_snapshots(&dir.join(SNAPSHOTS), &header, &snaps)?;
    write_ledger(&dir.join(LEDGER), &out.ledger.rows)?;
    let summary = Summary::new(cfg, mesh, out);
    write_json(&dir.join(SUMMARY), &summary)?;
    Ok(summary)
}

/// A run loaded back from disk with its invariants checked.
pub struct StoredRun {
    pub config: RunConfig,
    pub summary: Summary,
    pub mesh: Mesh,
    pub states: Vec<SolverState>,
    pub rows: Vec<LedgerRow>,
}

pub fn load_run(dir: &Path) -> CliResult<StoredRun> {
    let summary_path = dir.join(SUMMARY);
    let text = std::fs::read_to_string(&summary_path).map_err(|e| CliError::io(&summary_path, e))?;
    let summary: Summary =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", summary_path.display())))?;
    let config = summary.run_config(dir)?;
    let mesh = config.mesh()?;
    let (header, snaps) = read_snapshots(&dir.join(SNAPSHOTS))?;
    if header.mesh_checksum != mesh.checksum() || header.mesh_checksum != summary.mesh_checksum {
        return Err(CliError::Numerical(format!(
            "{SNAPSHOTS}: mesh checksum does not match level-{} icosphere",
            config.mesh_level
        )));
    }
    if snaps.is_empty() {
        return Err(CliError::Config(format!("{SNAPSHOTS}: no snapshots")));
    }
    let states = snaps.iter().map(|s| s.to_state(&mesh)).collect::<CliResult<Vec<_>>>()?;
    let rows = snaps.into_iter().map(|s| s.ledger).collect();
    Ok(StoredRun { config, summary, mesh, states, rows })
}
