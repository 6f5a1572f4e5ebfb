//! Readers and writers for point patterns, rasters and fit artifacts.
//!
//! Rasters are row-major with cell index `row * ncol + col` and row 0 at
//! `ymin`. Reals are written in shortest round-trip form so every file read
//! back through this module reproduces the values bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{LgcpError, Result};
use crate::lattice::{CovariateStack, PointPattern, Window};

const RASTER_KEYS: [&str; 6] = ["nrow", "ncol", "xmin", "xmax", "ymin", "ymax"];

/// Values on a lattice window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub window: Window,
    pub values: Vec<f64>,
}

impl Raster {
    pub fn new(window: Window, values: Vec<f64>) -> Result<Self> {
        if values.len() != window.n_cells() {
            return Err(LgcpError::invalid(format!(
                "raster has {} values for {} cells",
                values.len(),
                window.n_cells()
            )));
        }
        Ok(Raster { window, values })
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| LgcpError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LgcpError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| LgcpError::io(path, e))
}

fn parse_err(path: &Path, msg: impl std::fmt::Display) -> LgcpError {
    LgcpError::invalid(format!("{}: {msg}", path.display()))
}

/// Reads a point pattern from a CSV with header `x,y`.
pub fn read_points(path: impl AsRef<Path>) -> Result<PointPattern> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let headers = rdr.headers().map_err(|e| parse_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| parse_err(path, format!("missing column '{name}'")))
    };
    let (ix, iy) = (col("x")?, col("y")?);
    let mut points = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e))?;
        let get = |i: usize| -> Result<f64> {
            let v: f64 = rec
                .get(i)
                .unwrap_or("")
                .parse()
                .map_err(|e| parse_err(path, format!("record {}: {e}", line + 1)))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(path, format!("record {}: non-finite coordinate", line + 1)))
            }
        };
        points.push((get(ix)?, get(iy)?));
    }
    let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(PointPattern::new(points, label))
}

pub fn write_points(path: impl AsRef<Path>, pattern: &PointPattern) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let mut body = String::from("x,y\n");
    for (x, y) in &pattern.points {
        body.push_str(&format!("{x},{y}\n"));
    }
    w.write_all(body.as_bytes()).map_err(|e| LgcpError::io(path, e))?;
    w.flush().map_err(|e| LgcpError::io(path, e))
}

/// Reads a raster: six `key value` header lines (`nrow`, `ncol`, `xmin`,
/// `xmax`, `ymin`, `ymax` in any order and case, `nrows`/`ncols` accepted,
/// comma or whitespace separated) then
/// `nrow` lines of `ncol` values.
pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let reader = BufReader::new(open(path)?);
    let mut header = [None; 6];
    let mut values = Vec::new();
    let split = |line: &str| -> Vec<String> {
        line.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    };
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LgcpError::io(path, e))?;
        let tokens = split(&line);
        if tokens.is_empty() {
            continue;
        }
        if header.iter().any(Option::is_none) {
            let mut key = tokens[0].to_ascii_lowercase();
            if key == "nrows" || key == "ncols" {
                key.pop();
            }
            let slot = RASTER_KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| parse_err(path, format!("line {}: expected a header key, got '{}'", lineno + 1, tokens[0])))?;
            let value: f64 = tokens
                .get(1)
                .ok_or_else(|| parse_err(path, format!("line {}: header '{key}' has no value", lineno + 1)))?
                .parse()
                .map_err(|e| parse_err(path, format!("line {}: {e}", lineno + 1)))?;
            header[slot] = Some(value);
            continue;
        }
        for t in tokens {
            let v: f64 = t
                .parse()
                .map_err(|e| parse_err(path, format!("line {}: {e}", lineno + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(path, format!("line {}: non-finite value", lineno + 1)));
            }
            values.push(v);
        }
    }
    let h: Vec<f64> = header
        .iter()
        .zip(RASTER_KEYS)
        .map(|(v, k)| v.ok_or_else(|| parse_err(path, format!("missing header '{k}'"))))
        .collect::<Result<_>>()?;
    let dim = |v: f64, k: &str| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(parse_err(path, format!("'{k}' must be a positive integer")))
        }
    };
    let window = Window::new(h[2], h[3], h[4], h[5], dim(h[0], "nrow")?, dim(h[1], "ncol")?)
        .map_err(|e| parse_err(path, e))?;
    Raster::new(window, values).map_err(|e| parse_err(path, e))
}

pub fn write_raster(path: impl AsRef<Path>, raster: &Raster) -> Result<()> {
    let path = path.as_ref();
    let w = &raster.window;
    let mut body = format!(
        "nrow,{}\nncol,{}\nxmin,{}\nxmax,{}\nymin,{}\nymax,{}\n",
        w.nrow, w.ncol, w.xmin, w.xmax, w.ymin, w.ymax
    );
    for r in 0..w.nrow {
        let row: Vec<String> = raster.values[r * w.ncol..(r + 1) * w.ncol]
            .iter()
            .map(|v| v.to_string())
            .collect();
        body.push_str(&row.join(","));
        body.push('\n');
    }
    let mut f = create(path)?;
    f.write_all(body.as_bytes()).map_err(|e| LgcpError::io(path, e))?;
    f.flush().map_err(|e| LgcpError::io(path, e))
}

/// Reads covariates from a wide CSV with a `cell` column and one column
/// per covariate; rows may appear in any order but must cover every cell once.
pub fn read_wide_csv(path: impl AsRef<Path>) -> Result<CovariateStack> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let headers = rdr.headers().map_err(|e| parse_err(path, e))?.clone();
    let cell_col = headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case("cell"))
        .ok_or_else(|| parse_err(path, "missing column 'cell'"))?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != cell_col)
        .map(|(_, h)| h.to_string())
        .collect();
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e))?;
        let cell: usize = rec
            .get(cell_col)
            .unwrap_or("")
            .parse()
            .map_err(|e| parse_err(path, format!("record {}: cell index: {e}", line + 1)))?;
        let vals = rec
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != cell_col)
            .map(|(_, t)| t.parse::<f64>().map_err(|e| parse_err(path, format!("record {}: {e}", line + 1))))
            .collect::<Result<Vec<_>>>()?;
        rows.push((cell, vals));
    }
    let n = rows.len();
    let mut columns = vec![vec![f64::NAN; n]; names.len()];
    let mut seen = vec![false; n];
    for (cell, vals) in rows {
        if cell >= n || seen[cell] {
            return Err(parse_err(path, format!("cell {cell} is out of range or repeated")));
        }
        seen[cell] = true;
        for (j, v) in vals.into_iter().enumerate() {
            columns[j][cell] = v;
        }
    }
    CovariateStack::new(names, columns).map_err(|e| parse_err(path, e))
}

pub fn write_wide_csv(path: impl AsRef<Path>, names: &[String], columns: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    let n = columns.first().map_or(0, Vec::len);
    let mut body = String::from("cell");
    for name in names {
        body.push(',');
        body.push_str(name);
    }
    body.push('\n');
    for i in 0..n {
        body.push_str(&i.to_string());
        for c in columns {
            body.push(',');
            body.push_str(&c[i].to_string());
        }
        body.push('\n');
    }
    let mut f = create(path)?;
    f.write_all(body.as_bytes()).map_err(|e| LgcpError::io(path, e))?;
    f.flush().map_err(|e| LgcpError::io(path, e))
}

/// Loads one raster per covariate and aligns them to `window`. Rasters on a
/// finer lattice that refines `window` by an integer factor are block-averaged.
pub fn read_covariate_rasters(files: &[(String, std::path::PathBuf)], window: &Window) -> Result<CovariateStack> {
    let mut names = Vec::with_capacity(files.len());
    let mut columns = Vec::with_capacity(files.len());
    for (name, path) in files {
        let raster = read_raster(path)?;
        let rw = raster.window;
        let factor = rw.nrow / window.nrow;
        let aligned = factor >= 1
            && rw.nrow == window.nrow * factor
            && rw.ncol == window.ncol * factor
            && (rw.xmin - window.xmin).abs() <= 1e-9 * window.width()
            && (rw.xmax - window.xmax).abs() <= 1e-9 * window.width()
            && (rw.ymin - window.ymin).abs() <= 1e-9 * window.height()
            && (rw.ymax - window.ymax).abs() <= 1e-9 * window.height();
        if !aligned {
            return Err(parse_err(
                path,
                format!(
                    "raster {}x{} does not refine the {}x{} analysis lattice over the same extent",
                    rw.nrow, rw.ncol, window.nrow, window.ncol
                ),
            ));
        }
        let single = CovariateStack::new(vec![name.clone()], vec![raster.values]).map_err(|e| parse_err(path, e))?;
        let single = if factor > 1 {
            single.aggregate(rw.nrow, rw.ncol, factor)?
        } else {
            single
        };
        names.push(name.clone());
        columns.push(single.columns.into_iter().next().expect("one column"));
    }
    CovariateStack::new(names, columns)
}

/// Pretty-printed JSON with a trailing newline; key order follows the type.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| LgcpError::io(path, e))?;
    text.push('\n');
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).map_err(|e| LgcpError::io(path, e))?;
    f.flush().map_err(|e| LgcpError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    serde_json::from_reader(BufReader::new(open(path)?)).map_err(|e| parse_err(path, e))
}

/// Writes `(x, y)` columns with a header, e.g. density tables.
pub fn write_table(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    let mut body = header.join(",");
    body.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        body.push_str(&cells.join(","));
        body.push('\n');
    }
    let mut f = create(path)?;
    f.write_all(body.as_bytes()).map_err(|e| LgcpError::io(path, e))?;
    f.flush().map_err(|e| LgcpError::io(path, e))
}

/// Reads a numeric CSV table written by [`write_table`].
pub fn read_table(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e))?;
        rows.push(
            rec.iter()
                .map(|t| t.parse::<f64>().map_err(|e| parse_err(path, format!("record {}: {e}", line + 1))))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("lgcp-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn points_round_trip() {
        let p = PointPattern::new(vec![(0.1, 2.0 / 3.0), (1e-7, 123456.789)], "pts");
        let path = tmp("pts.csv");
        write_points(&path, &p).unwrap();
        let q = read_points(&path).unwrap();
        assert_eq!(p.points, q.points);
        assert_eq!(q.label, "pts");
    }

    #[test]
    fn raster_round_trip_and_header_order() {
        let w = Window::new(0.0, 3.0, -1.0, 1.0, 2, 3).unwrap();
        let r = Raster::new(w, vec![0.1, 0.2, 1.0 / 3.0, -4.0, 5e-300, 6.0]).unwrap();
        let path = tmp("r.csv");
        write_raster(&path, &r).unwrap();
        assert_eq!(read_raster(&path).unwrap(), r);
        let alt = tmp("alt.asc");
        std::fs::write(&alt, "ymax 1\nymin -1\nNCOLS 3\nnrow 2\nxmin 0\nxmax 3\n0.1 0.2 0.3\n1 2 3\n").unwrap();
        let a = read_raster(&alt).unwrap();
        assert_eq!(a.window, w);
        assert_eq!(a.values[5], 3.0);
    }

    #[test]
    fn raster_errors_name_the_file() {
        let missing = tmp("nope.csv");
        let e = read_raster(&missing).unwrap_err();
        assert!(e.is_input_error() && e.to_string().contains("nope.csv"));
        let short = tmp("short.csv");
        std::fs::write(&short, "nrow,2\nncol,2\nxmin,0\nxmax,1\nymin,0\nymax,1\n1,2\n3\n").unwrap();
        let e = read_raster(&short).unwrap_err();
        assert!(e.to_string().contains("short.csv"), "{e}");
    }

    #[test]
    fn wide_csv_round_trip_in_any_row_order() {
        let names = vec!["a".to_string(), "b".to_string()];
        let cols = vec![vec![1.0, 2.5, -3.0], vec![0.1, 0.2, 0.3]];
        let path = tmp("wide.csv");
        write_wide_csv(&path, &names, &cols).unwrap();
        let s = read_wide_csv(&path).unwrap();
        assert_eq!(s.names, names);
        assert_eq!(s.columns, cols);
        std::fs::write(&path, "b,cell,a\n0.3,2,-3\n0.1,0,1\n0.2,1,2.5\n").unwrap();
        let s = read_wide_csv(&path).unwrap();
        assert_eq!(s.column("a").unwrap(), &cols[0][..]);
    }

    #[test]
    fn fine_rasters_are_block_averaged() {
        let fine = Window::new(0.0, 4.0, 0.0, 2.0, 2, 4).unwrap();
        let coarse = Window::new(0.0, 4.0, 0.0, 2.0, 1, 2).unwrap();
        let path = tmp("fine.csv");
        write_raster(&path, &Raster::new(fine, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap()).unwrap();
        let s = read_covariate_rasters(&[("z".into(), path.clone())], &coarse).unwrap();
        assert_eq!(s.columns[0], vec![3.5, 5.5]);
        let other = Window::new(0.0, 5.0, 0.0, 2.0, 1, 2).unwrap();
        assert!(read_covariate_rasters(&[("z".into(), path)], &other).is_err());
    }

    #[test]
    fn table_round_trip() {
        let path = tmp("t.csv");
        let rows = vec![vec![0.0, 1.5], vec![1e-9, 2.0 / 7.0]];
        write_table(&path, &["x", "density"], &rows).unwrap();
        let (h, r) = read_table(&path).unwrap();
        assert_eq!(h, vec!["x", "density"]);
        assert_eq!(r, rows);
    }
}
