//! Fixed-schema CSV outputs and the binary ensemble cache.
//!
//! Every number is written with Rust's shortest round-trip formatting, so the
//! bytes depend only on the values.
//!
//! Binary cache layout (little endian):
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `BVSMPEN1` |
//! | 8 | `u64` length `h` of the JSON header |
//! | h | JSON `{ "config": EnsembleConfig, "policy": ControlPolicy }` |
//! | 8·n·(m+1) | states, path-major |
//! | 8·n·m | Brownian increments, path-major |
//! | 8·n·m | controls, path-major |
//!
//! where `n` is the number of paths and `m` the number of steps.

use crate::adjoint::AdjointEstimate;
use crate::checks::{CheckRow, CrossCheck};
use crate::corridor::{FigureRow, MollificationRow, PairedDiff};
use crate::error::{Error, Result};
use crate::local_time::LocalTimeField;
use crate::sde::{ControlPolicy, EnsembleConfig, PathEnsemble, PolicyState};
use crate::variation::VariationRecord;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FIGURE1_HEADER: &[&str] = &["policy_id", "mean", "ci_low", "ci_high", "n_paths", "seed"];
pub const FIGURE2_HEADER: &[&str] = &["rho", "mean", "ci_low", "ci_high", "n_paths", "seed"];
pub const PAIRED_HEADER: &[&str] = &["a", "b", "mean_diff", "std_error"];
pub const LOCALTIME_CHECK_HEADER: &[&str] = &["test_id", "lhs", "rhs", "rel_err"];
pub const VARIATION_CHECK_HEADER: &[&str] = &["method_a", "method_b", "rel_err", "tolerance", "pass"];
pub const MOLLIFICATION_HEADER: &[&str] = &["n", "mean_sup", "se_sup", "mean_sup_sq", "se_sup_sq", "n_paths", "seed"];
pub const ENSEMBLE_HEADER: &[&str] = &["path_id", "t", "X", "alpha"];
pub const VARIATION_HEADER: &[&str] = &["path_id", "s", "t", "phi", "method"];
pub const ADJOINT_HEADER: &[&str] = &["t", "x", "y", "se", "method"];
pub const LOCALTIME_FIELD_HEADER: &[&str] = &["path_id", "t", "y", "L"];

const MAGIC: &[u8; 8] = b"BVSMPEN1";

/// Shortest decimal string that parses back to `v`.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_figure(path: &Path, header: &[&str], rows: &[FigureRow]) -> Result<()> {
    write_csv(
        path,
        header,
        rows.iter().map(|r| {
            vec![
                r.label.clone(),
                fmt(r.mean),
                fmt(r.ci_low),
                fmt(r.ci_high),
                r.n_paths.to_string(),
                r.seed.to_string(),
            ]
        }),
    )
}

pub fn write_paired(path: &Path, diffs: &[PairedDiff]) -> Result<()> {
    write_csv(
        path,
        PAIRED_HEADER,
        diffs
            .iter()
            .map(|d| vec![d.a.clone(), d.b.clone(), fmt(d.mean), fmt(d.std_error)]),
    )
}

pub fn write_localtime_checks(path: &Path, rows: &[CheckRow]) -> Result<()> {
    write_csv(
        path,
        LOCALTIME_CHECK_HEADER,
        rows.iter()
            .map(|r| vec![r.test_id.clone(), fmt(r.lhs), fmt(r.rhs), fmt(r.rel_err)]),
    )
}

pub fn write_variation_checks(path: &Path, rows: &[CrossCheck]) -> Result<()> {
    write_csv(
        path,
        VARIATION_CHECK_HEADER,
        rows.iter().map(|r| {
            vec![
                r.method_a.clone(),
                r.method_b.clone(),
                fmt(r.rel_err),
                fmt(r.tolerance),
                r.pass.to_string(),
            ]
        }),
    )
}

pub fn write_mollification(path: &Path, rows: &[MollificationRow], n_paths: usize, seed: u64) -> Result<()> {
    write_csv(
        path,
        MOLLIFICATION_HEADER,
        rows.iter().map(|r| {
            vec![
                r.n.to_string(),
                fmt(r.mean_sup),
                fmt(r.se_sup),
                fmt(r.mean_sup_sq),
                fmt(r.se_sup_sq),
                n_paths.to_string(),
                seed.to_string(),
            ]
        }),
    )
}

/// Control in force at each node; the terminal value is the policy applied at `(T, X_T)`.
fn node_controls(ensemble: &PathEnsemble, p: usize) -> Vec<f64> {
    let grid = ensemble.grid();
    let mut alpha = ensemble.controls(p).to_vec();
    let mut state = PolicyState::default();
    for (k, &db) in ensemble.increments(p).iter().enumerate() {
        ensemble.policy.update(&mut state, grid.time(k), grid.dt(), db);
    }
    alpha.push(ensemble.policy.eval(grid.horizon(), ensemble.terminal(p), &state));
    alpha
}

pub fn write_ensemble_csv(path: &Path, ensemble: &PathEnsemble) -> Result<()> {
    let grid = *ensemble.grid();
    write_csv(
        path,
        ENSEMBLE_HEADER,
        (0..ensemble.n_paths()).flat_map(|p| {
            let alpha = node_controls(ensemble, p);
            let states = ensemble.states(p);
            (0..=grid.steps())
                .map(move |k| vec![p.to_string(), fmt(grid.time(k)), fmt(states[k]), fmt(alpha[k])])
                .collect::<Vec<_>>()
        }),
    )
}

pub fn write_variation(path: &Path, records: &[VariationRecord], grid: &crate::sde::TimeGrid) -> Result<()> {
    write_csv(
        path,
        VARIATION_HEADER,
        records.iter().flat_map(|r| {
            r.rows(grid)
                .map(|(p, s, t, phi, m)| vec![p.to_string(), fmt(s), fmt(t), fmt(phi), m.to_string()])
                .collect::<Vec<_>>()
        }),
    )
}

pub fn write_adjoint(path: &Path, estimates: &[&AdjointEstimate]) -> Result<()> {
    write_csv(
        path,
        ADJOINT_HEADER,
        estimates.iter().flat_map(|e| {
            let tag = e.method.tag();
            e.samples
                .iter()
                .map(move |s| vec![fmt(s.t), fmt(s.x), fmt(s.y), fmt(s.std_error), tag.to_string()])
        }),
    )
}

pub fn write_localtime_fields(path: &Path, fields: &[LocalTimeField]) -> Result<()> {
    write_csv(
        path,
        LOCALTIME_FIELD_HEADER,
        fields.iter().flat_map(|f| {
            f.rows()
                .map(|(t, y, l)| vec![f.path_index.to_string(), fmt(t), fmt(y), fmt(l)])
                .collect::<Vec<_>>()
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    config: EnsembleConfig,
    policy: ControlPolicy,
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn write_ensemble_bin(path: &Path, ensemble: &PathEnsemble) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = serde_json::to_vec(&CacheHeader {
        config: ensemble.config,
        policy: ensemble.policy,
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let (states, increments, controls) = ensemble.raw_parts();
    write_f64s(&mut w, states)?;
    write_f64s(&mut w, increments)?;
    write_f64s(&mut w, controls)?;
    w.flush()?;
    Ok(())
}

pub fn read_ensemble_bin(path: &Path) -> Result<PathEnsemble> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidInput(format!("{} is not an ensemble cache", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: CacheHeader = serde_json::from_slice(&header)?;
    let (n, steps) = (header.config.n_paths, header.config.grid.steps());
    let states = read_f64s(&mut r, n * (steps + 1))?;
    let increments = read_f64s(&mut r, n * steps)?;
    let controls = read_f64s(&mut r, n * steps)?;
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::InvalidInput(format!("{} has trailing bytes", path.display())));
    }
    PathEnsemble::from_parts(header.config, header.policy, states, increments, controls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::corridor_spec;
    use crate::sde::{simulate, TimeGrid};

    #[test]
    fn shortest_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0] {
            assert_eq!(fmt(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt(0.1), "0.1");
        assert_eq!(fmt(2.0), "2");
    }

    #[test]
    fn binary_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap();
        let cfg = EnsembleConfig::new(TimeGrid::new(1.0, 50).unwrap(), 0.3, 7, 5).mirrored();
        let e = simulate(&spec, &ControlPolicy::BrownianFunctional, &cfg).unwrap();
        let path = dir.path().join("e.bin");
        write_ensemble_bin(&path, &e).unwrap();
        assert_eq!(read_ensemble_bin(&path).unwrap(), e);
        std::fs::write(dir.path().join("bad.bin"), b"nope").unwrap();
        assert!(read_ensemble_bin(&dir.path().join("bad.bin")).is_err());
    }

    #[test]
    fn ensemble_csv_terminal_control() {
        let dir = tempfile::tempdir().unwrap();
        let spec = corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap();
        let cfg = EnsembleConfig::new(TimeGrid::new(1.0, 10).unwrap(), 2.5, 2, 5);
        let e = simulate(&spec, &ControlPolicy::Corridor { rho: 2.0, sign: 1.0 }, &cfg).unwrap();
        let path = dir.path().join("e.csv");
        write_ensemble_csv(&path, &e).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path_id,t,X,alpha");
        assert_eq!(lines.len(), 1 + 2 * 11);
        assert_eq!(lines[1], "0,0,2.5,1");
        let last: Vec<&str> = lines[11].split(',').collect();
        let x: f64 = last[2].parse().unwrap();
        assert_eq!(last[3], if x.abs() > 2.0 { "1" } else { "0" });
    }
}
