use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cohort, Dims, PatientRecord, ULayout};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    name: String,
    dims: Dims,
    layout: ULayout,
}

/// On-disk patient line; masked biomarkers may be `null`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientLine {
    b: Vec<f64>,
    x: Vec<Vec<Option<f64>>>,
    u: Vec<Vec<f64>>,
    m: Vec<Vec<u8>>,
    length: usize,
}

impl From<&PatientRecord> for PatientLine {
    fn from(p: &PatientRecord) -> Self {
        let x = p
            .x
            .iter()
            .zip(&p.m)
            .map(|(row, mrow)| {
                row.iter()
                    .zip(mrow)
                    .map(|(&v, &m)| (m == 1 || v.is_finite()).then_some(v))
                    .collect()
            })
            .collect();
        Self {
            b: p.b.clone(),
            x,
            u: p.u.clone(),
            m: p.m.clone(),
            length: p.length,
        }
    }
}

impl PatientLine {
    fn into_record(self) -> PatientRecord {
        PatientRecord {
            b: self.b,
            x: self
                .x
                .into_iter()
                .map(|row| row.into_iter().map(|v| v.unwrap_or(0.0)).collect())
                .collect(),
            u: self.u,
            m: self.m,
            length: self.length,
        }
    }
}

/// Writes a cohort as NDJSON: one header line, then one patient per line.
pub fn write_cohort<W: Write>(cohort: &Cohort, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    let header = Header {
        name: cohort.name.clone(),
        dims: cohort.dims,
        layout: cohort.layout,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for p in cohort.patients() {
        serde_json::to_writer(&mut w, &PatientLine::from(p))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cohort<R: Read>(r: R) -> Result<Cohort> {
    let mut lines = BufReader::new(r).lines();
    let parse = |line: usize, msg: String| Error::Parse { line, msg };
    let first = lines
        .next()
        .ok_or_else(|| parse(1, "missing header line".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse(1, format!("header: {e}")))?;
    let mut patients = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PatientLine = serde_json::from_str(&line).map_err(|e| parse(lineno, e.to_string()))?;
        let rec = rec.into_record();
        rec.validate(&header.dims)
            .map_err(|e| parse(lineno, e.to_string()))?;
        patients.push(rec);
    }
    Cohort::new(header.name, header.dims, header.layout, patients)
}

pub fn save_cohort(cohort: &Cohort, path: &Path) -> Result<()> {
    write_cohort(cohort, File::create(path)?)
}

pub fn load_cohort(path: &Path) -> Result<Cohort> {
    read_cohort(File::open(path)?)
}

/// CSV export of a rank-1 or rank-2 tensor with an optional header row.
pub fn write_tensor_csv<W: Write>(tensor: &Tensor, header: Option<&[String]>, w: W) -> Result<()> {
    if tensor.rank() > 2 {
        return Err(Error::invalid(format!("CSV export needs rank ≤ 2, got {:?}", tensor.shape())));
    }
    let mut w = BufWriter::new(w);
    if let Some(h) = header {
        if h.len() != tensor.last_dim() {
            return Err(Error::invalid(format!(
                "CSV header has {} names for {} columns",
                h.len(),
                tensor.last_dim()
            )));
        }
        writeln!(w, "{}", h.join(","))?;
    }
    for i in 0..tensor.rows() {
        let row: Vec<String> = tensor.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}
