//! File formats: experiment data CSVs, JSON artifacts, traces and plot data.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};
use crate::linalg::Mat;
use crate::plant::ExperimentData;
use crate::synthesis::IterationRecord;

pub const U_FILE: &str = "u.csv";
pub const X0_FILE: &str = "x0.csv";
pub const X1_FILE: &str = "x1.csv";
pub const DATA_MANIFEST_FILE: &str = "data.json";

/// Sidecar describing a data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    #[serde(rename = "T")]
    pub t: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub seed: Option<u64>,
    pub pe_ok: bool,
}

impl DataManifest {
    pub fn of(data: &ExperimentData) -> Self {
        Self { t: data.t(), n_x: data.n_x(), n_u: data.n_u(), seed: data.seed, pe_ok: data.pe_ok }
    }
}

/// Write a matrix as CSV: a header `name,rows=R,cols=C`, then one line per
/// matrix row, so each sample is a column.
pub fn write_matrix_csv(path: &Path, name: &str, m: &Mat) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    w.write_record([name.to_string(), format!("rows={}", m.nrows()), format!("cols={}", m.ncols())])?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

fn header_dim(field: Option<&str>, key: &str) -> Option<usize> {
    field?.trim().strip_prefix(key)?.strip_prefix('=')?.parse().ok()
}

pub fn read_matrix_csv(path: &Path) -> Result<Mat> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path)?;
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| Error::InvalidConfig(format!("{} is empty", path.display())))??;
    let (rows, cols) = match (header_dim(header.get(1), "rows"), header_dim(header.get(2), "cols")) {
        (Some(r), Some(c)) => (r, c),
        _ => return Err(Error::InvalidConfig(format!("{}: malformed header", path.display()))),
    };
    let mut m = Mat::zeros(rows, cols);
    let mut seen = 0;
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        if i >= rows || rec.len() != cols {
            return dims(format!("{}: expected {rows}×{cols} values", path.display()));
        }
        for (j, field) in rec.iter().enumerate() {
            m[(i, j)] = field
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{}: bad number {field:?}", path.display())))?;
        }
        seen += 1;
    }
    if seen != rows {
        return dims(format!("{}: expected {rows} rows, found {seen}", path.display()));
    }
    Ok(m)
}

/// Write `u.csv`, `x0.csv`, `x1.csv` and `data.json` into `dir`; returns the
/// written paths.
pub fn write_data(dir: &Path, data: &ExperimentData) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let paths = data_paths(dir);
    write_matrix_csv(&paths[0], "u", &data.u0)?;
    write_matrix_csv(&paths[1], "x0", &data.x0)?;
    write_matrix_csv(&paths[2], "x1", &data.x1)?;
    write_json(&paths[3], &DataManifest::of(data))?;
    Ok(paths.to_vec())
}

/// The data files of `dir` in the order u, x0, x1, manifest.
pub fn data_paths(dir: &Path) -> [PathBuf; 4] {
    [dir.join(U_FILE), dir.join(X0_FILE), dir.join(X1_FILE), dir.join(DATA_MANIFEST_FILE)]
}

/// Read a data directory. The manifest is optional; when present its
/// dimensions must match the CSVs. The rank condition is re-evaluated.
pub fn read_data(dir: &Path) -> Result<ExperimentData> {
    let paths = data_paths(dir);
    let u0 = read_matrix_csv(&paths[0])?;
    let x0 = read_matrix_csv(&paths[1])?;
    let x1 = read_matrix_csv(&paths[2])?;
    let manifest: Option<DataManifest> = if paths[3].exists() { Some(read_json(&paths[3])?) } else { None };
    let data = ExperimentData::new(u0, x0, x1, manifest.as_ref().and_then(|m| m.seed))?;
    if let Some(m) = manifest {
        if (m.t, m.n_x, m.n_u) != (data.t(), data.n_x(), data.n_u()) {
            return dims(format!("{} disagrees with the CSV dimensions", paths[3].display()));
        }
    }
    Ok(data)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// One CSV row per outer iteration.
pub fn write_trace_csv(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record([
            "iteration",
            "prediction_loss",
            "log_det_q1",
            "residual_norm",
            "residual_sq",
            "y_norm",
            "sdp_status",
            "verified",
            "wall_time_s",
        ])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<IterationRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

/// Loss curves: `iteration,prediction_loss,residual_sq,log_det_q1`.
pub fn write_loss_csv(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "prediction_loss", "residual_sq", "log_det_q1"])?;
    for r in records {
        w.write_record([
            r.iteration.to_string(),
            format!("{:e}", r.prediction_loss),
            format!("{:e}", r.residual_sq),
            format!("{:e}", r.log_det_q1),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Boundary points of a 2-D ROA slice as rows `dim_i,dim_j,x_i,x_j`
/// (dimensions 1-based).
pub fn write_roa_csv(path: &Path, dims_ij: (usize, usize), points: &[[f64; 2]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dim_i", "dim_j", "x_i", "x_j"])?;
    for p in points {
        w.write_record([dims_ij.0.to_string(), dims_ij.1.to_string(), format!("{:e}", p[0]), format!("{:e}", p[1])])?;
    }
    w.flush()?;
    Ok(())
}

/// Time series with a `time_s` column and one column per named series.
/// Shorter series are padded with empty cells.
pub fn write_time_series_csv(path: &Path, dt: f64, names: &[String], series: &[Vec<f64>]) -> Result<()> {
    if names.len() != series.len() {
        return dims("one name per series");
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["time_s".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    let len = series.iter().map(Vec::len).max().unwrap_or(0);
    for k in 0..len {
        let mut row = vec![format!("{:.6}", k as f64 * dt)];
        row.extend(series.iter().map(|s| s.get(k).map(|v| format!("{v:e}")).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
