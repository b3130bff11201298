//! File output: solution and trajectory CSV, plot data and JSON documents.
//!
//! Floats are written with 17 significant digits so that re-reading is
//! lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::TrajectoryRecord;
use crate::radial::{Field, RadialGrid, SobolevStructure};

pub const SOLUTION_HEADER: &str = "r,u,laplacian_u";
pub const TRAJECTORY_HEADER: &str = "step,energy,grad_norm,dist_plus,dist_minus";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, detail: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        detail,
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// Rows `(r_i, u_i, (Lu)_i)` in node order.
pub fn solution_csv(grid: &RadialGrid, structure: &SobolevStructure, u: &[f64]) -> String {
    let lap = structure.laplacian().apply(u);
    let mut s = String::with_capacity(64 * u.len());
    s.push_str(SOLUTION_HEADER);
    s.push('\n');
    for ((r, x), l) in grid.radii().iter().zip(u).zip(&lap) {
        let _ = writeln!(s, "{},{},{}", fmt(*r), fmt(*x), fmt(*l));
    }
    s
}

pub fn write_solution_csv(
    path: &Path,
    grid: &RadialGrid,
    structure: &SobolevStructure,
    u: &[f64],
) -> Result<()> {
    write_text(path, &solution_csv(grid, structure, u))
}

/// Whitespace-separated columns for plotting tools.
pub fn write_plot_data(
    path: &Path,
    grid: &RadialGrid,
    structure: &SobolevStructure,
    u: &[f64],
) -> Result<()> {
    let lap = structure.laplacian().apply(u);
    let mut s = String::from("# r u laplacian_u\n");
    for ((r, x), l) in grid.radii().iter().zip(u).zip(&lap) {
        let _ = writeln!(s, "{} {} {}", fmt(*r), fmt(*x), fmt(*l));
    }
    write_text(path, &s)
}

/// A field as read back from a solution CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub radii: Vec<f64>,
    pub values: Field,
}

impl FieldFile {
    /// Checks that the file's nodes are those of `grid`.
    pub fn on_grid(self, grid: &RadialGrid, path: &Path) -> Result<Field> {
        if self.radii.len() != grid.n_nodes() {
            return Err(Error::DimensionMismatch {
                expected: grid.n_nodes(),
                found: self.radii.len(),
            });
        }
        let tol = 1e-12 * grid.r_max();
        if let Some((i, r)) = self
            .radii
            .iter()
            .enumerate()
            .find(|(i, r)| (**r - grid.radii()[*i]).abs() > tol)
        {
            return Err(parse_err(
                path,
                format!("node {} at r = {r} does not match the grid (r = {})", i + 1, grid.radii()[i]),
            ));
        }
        Ok(self.values)
    }
}

/// Reads a file whose header starts with `r,u`.
pub fn read_field_csv(path: &Path) -> Result<FieldFile> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .map(|(_, h)| h.trim())
        .ok_or_else(|| parse_err(path, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "r" || cols[1] != "u" {
        return Err(parse_err(path, format!("header '{header}' does not start with r,u")));
    }
    let mut radii = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let mut next = |name: &str| -> Result<f64> {
            let tok = fields
                .next()
                .ok_or_else(|| parse_err(path, format!("line {}: missing {name}", i + 1)))?;
            tok.parse::<f64>()
                .map_err(|_| parse_err(path, format!("line {}: '{tok}' is not a number", i + 1)))
        };
        radii.push(next("r")?);
        values.push(next("u")?);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(parse_err(path, "non-finite field value".into()));
    }
    Ok(FieldFile {
        radii,
        values: Field(values),
    })
}

/// One row per `stride`-th recorded state.
pub fn trajectory_csv(record: &TrajectoryRecord, stride: usize) -> String {
    let mut s = String::from(TRAJECTORY_HEADER);
    s.push('\n');
    let n = record.len();
    for i in (0..n).filter(|i| i % stride.max(1) == 0 || *i + 1 == n) {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            record.steps[i],
            fmt(record.energies[i]),
            fmt(record.grad_norms[i]),
            fmt(record.cone_dist_plus[i]),
            fmt(record.cone_dist_minus[i])
        );
    }
    s
}

pub fn write_trajectory_csv(path: &Path, record: &TrajectoryRecord, stride: usize) -> Result<()> {
    write_text(path, &trajectory_csv(record, stride))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| parse_err(path, format!("serialization failed: {e}")))?;
    write_text(path, &(text + "\n"))
}

/// Path of `name` inside `dir`.
pub fn in_dir(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::cubic;

    #[test]
    fn empty_trajectory_is_header_only() {
        let s = trajectory_csv(&TrajectoryRecord::default(), 1);
        assert_eq!(s, format!("{TRAJECTORY_HEADER}\n"));
    }

    #[test]
    fn solution_round_trip_is_lossless() {
        let p = cubic(50);
        let u = p.grid.sample(|r| (-r).exp() * (3.0 * r).sin() / 7.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.csv");
        write_solution_csv(&path, &p.grid, &p.structure, &u).unwrap();
        let back = read_field_csv(&path).unwrap();
        assert_eq!(back.radii, p.grid.radii());
        assert_eq!(back.on_grid(&p.grid, &path).unwrap(), u);
    }

    #[test]
    fn header_is_exact() {
        let p = cubic(8);
        let s = solution_csv(&p.grid, &p.structure, &p.grid.zeros());
        assert_eq!(s.lines().next(), Some("r,u,laplacian_u"));
        assert_eq!(s.lines().count(), 9);
    }

    #[test]
    fn mismatched_grid_rejected() {
        let p = cubic(8);
        let q = cubic(9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.csv");
        write_solution_csv(&path, &p.grid, &p.structure, &p.grid.zeros()).unwrap();
        assert!(read_field_csv(&path).unwrap().on_grid(&q.grid, &path).is_err());
        write_text(&path, "x,y\n1,2\n").unwrap();
        assert!(read_field_csv(&path).is_err());
    }
}
