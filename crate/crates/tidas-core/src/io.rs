//! Persistence of frames and matrices.
//!
//! Frames are stored as a JSON header next to a little-endian `f32` blob laid
//! out row-major `[element][sample]`. Matrices are CSV files whose first row
//! holds the column depths and whose first column holds the row depths.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::ElementRange;
use crate::sim::RfFrame;
use crate::tidas::ThetaMatrix;

const SAMPLE_FORMAT: &str = "f32le";
const LAYOUT: &str = "row_major_element_sample";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameHeader {
    pub element_count: usize,
    pub samples_per_trace: usize,
    pub sampling_frequency: f64,
    pub t0: f64,
    pub tx_focus_depth: f64,
    pub aperture: ElementRange,
    pub sample_format: String,
    pub layout: String,
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut p = base.as_os_str().to_owned();
    p.push(".");
    p.push(ext);
    PathBuf::from(p)
}

/// Writes `<base>.json` and `<base>.f32`.
pub fn save_frame(frame: &RfFrame, base: &Path) -> Result<()> {
    let header = FrameHeader {
        element_count: frame.element_count(),
        samples_per_trace: frame.samples_per_trace,
        sampling_frequency: frame.sampling_frequency,
        t0: frame.t0,
        tx_focus_depth: frame.tx_focus_depth,
        aperture: frame.aperture,
        sample_format: SAMPLE_FORMAT.into(),
        layout: LAYOUT.into(),
    };
    fs::write(with_ext(base, "json"), serde_json::to_string_pretty(&header)? + "\n")?;
    let mut blob = Vec::with_capacity(frame.traces.len() * 4);
    for &v in &frame.traces {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(with_ext(base, "f32"), blob)?;
    Ok(())
}

pub fn load_frame(base: &Path) -> Result<RfFrame> {
    let header: FrameHeader = serde_json::from_str(&fs::read_to_string(with_ext(base, "json"))?)?;
    if header.sample_format != SAMPLE_FORMAT || header.layout != LAYOUT {
        return Err(Error::Parse(format!(
            "unsupported frame encoding {} / {}",
            header.sample_format, header.layout
        )));
    }
    if header.aperture.len() != header.element_count {
        return Err(Error::Parse("aperture does not match element_count".into()));
    }
    let blob = fs::read(with_ext(base, "f32"))?;
    let expected = header.element_count * header.samples_per_trace * 4;
    if blob.len() != expected {
        return Err(Error::Parse(format!(
            "frame blob has {} bytes, expected {expected}",
            blob.len()
        )));
    }
    let traces = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(RfFrame {
        traces,
        samples_per_trace: header.samples_per_trace,
        sampling_frequency: header.sampling_frequency,
        t0: header.t0,
        tx_focus_depth: header.tx_focus_depth,
        aperture: header.aperture,
    })
}

/// Nine significant digits; non-finite values are written as `NaN`.
pub fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.8e}")
    } else {
        "NaN".into()
    }
}

fn parse_value(s: &str) -> Result<f64> {
    let t = s.trim();
    if t.eq_ignore_ascii_case("nan") || t.is_empty() {
        return Ok(f64::NAN);
    }
    t.parse()
        .map_err(|_| Error::Parse(format!("not a number: {s:?}")))
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<fs::File>>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(fs::File::create(path)?)))
}

/// Depth-indexed matrix; the corner cell names the axes.
pub fn write_matrix(
    path: &Path,
    row_depths: &[f64],
    col_depths: &[f64],
    values: &[Vec<f64>],
) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["reference_depth\\target_depth".to_string()];
    header.extend(col_depths.iter().map(|&d| fmt_value(d)));
    w.write_record(&header)?;
    for (d, row) in row_depths.iter().zip(values) {
        let mut rec = vec![fmt_value(*d)];
        rec.extend(row.iter().map(|&v| fmt_value(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub type Matrix = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| Error::Parse("empty matrix file".into()))??;
    let cols = header
        .iter()
        .skip(1)
        .map(parse_value)
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for rec in records {
        let rec = rec?;
        let mut it = rec.iter();
        rows.push(parse_value(it.next().unwrap_or(""))?);
        let row = it.map(parse_value).collect::<Result<Vec<_>>>()?;
        if row.len() != cols.len() {
            return Err(Error::Parse(format!(
                "matrix row has {} values, expected {}",
                row.len(),
                cols.len()
            )));
        }
        values.push(row);
    }
    Ok((rows, cols, values))
}

pub fn write_theta_matrix(path: &Path, m: &ThetaMatrix) -> Result<()> {
    write_matrix(path, &m.reference_depths, &m.target_depths, &m.values)
}

pub fn read_theta_matrix(path: &Path) -> Result<ThetaMatrix> {
    let (reference_depths, target_depths, values) = read_matrix(path)?;
    Ok(ThetaMatrix {
        reference_depths,
        target_depths,
        values,
    })
}

/// Header plus numeric rows.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|&v| fmt_value(v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Header and numeric rows written by [`write_table`].
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let rows = r
        .records()
        .map(|rec| rec?.iter().map(parse_value).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

/// Serde records, one per row.
pub fn write_records<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = writer(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
