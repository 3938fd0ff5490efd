//! Event files.
//!
//! CSV: header `seq_id,t,m1,...,md`, one row per event, rows sorted by
//! `(seq_id, t)`. The window is not stored in the file and must be supplied.
//! A row whose `t` field is empty stands for a sequence with no events.
//!
//! JSON: `{"domain": {"T", "mark_lo", "mark_hi"}, "sequences": [[[t, m...], ...], ...]}`
//! with an optional `"normalization": {"scale", "offset"}` record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Affine, Dataset, Domain, DomainError, EventPoint};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("CSV line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("JSON: {0}")]
    Json(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("{path}: unknown dataset extension (expected .csv or .json)")]
    UnknownFormat { path: PathBuf },
    #[error("{path}: CSV datasets need a domain from the run configuration")]
    MissingDomain { path: PathBuf },
}

impl IoError {
    fn csv(line: u64, message: impl Into<String>) -> Self {
        IoError::Csv { line, message: message.into() }
    }
}

pub fn read_csv<R: Read>(input: R, domain: &Domain) -> Result<Dataset, IoError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let d = domain.mark_dim();
    let header = r.headers().map_err(|e| IoError::csv(1, e.to_string()))?.clone();
    let want: Vec<String> =
        ["seq_id".to_string(), "t".to_string()].into_iter().chain((1..=d).map(|i| format!("m{i}"))).collect();
    if header.iter().collect::<Vec<_>>() != want.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(IoError::csv(1, format!("header must be `{}`, found `{}`", want.join(","), header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut sequences: Vec<Vec<EventPoint>> = Vec::new();
    let mut last_id: Option<i64> = None;
    let mut last_was_empty = false;
    for rec in r.records() {
        let rec = rec.map_err(|e| IoError::csv(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: i64 = rec[0].parse().map_err(|_| IoError::csv(line, format!("bad seq_id `{}`", &rec[0])))?;
        let new_seq = match last_id {
            None => true,
            Some(prev) if id > prev => true,
            Some(prev) if id == prev => false,
            Some(prev) => return Err(IoError::csv(line, format!("seq_id {id} after {prev}: rows must be sorted"))),
        };
        if new_seq {
            sequences.push(Vec::new());
            last_id = Some(id);
            last_was_empty = false;
        } else if last_was_empty {
            return Err(IoError::csv(line, format!("sequence {id} is marked empty but has events")));
        }
        if rec[1].is_empty() {
            if !new_seq || rec.iter().skip(2).any(|f| !f.is_empty()) {
                return Err(IoError::csv(line, "empty time field outside an empty-sequence row"));
            }
            last_was_empty = true;
            continue;
        }
        let num = |i: usize| -> Result<f64, IoError> {
            rec[i].parse::<f64>().map_err(|_| IoError::csv(line, format!("bad number `{}` in column {}", &rec[i], &header[i])))
        };
        let t = num(1)?;
        let m = (2..2 + d).map(num).collect::<Result<Vec<_>, _>>()?;
        sequences.last_mut().expect("pushed above").push(EventPoint::new(t, m));
    }
    Ok(Dataset::from_events(domain.clone(), sequences)?)
}

pub fn write_csv<W: Write>(ds: &Dataset, out: W) -> Result<(), IoError> {
    let d = ds.domain().mark_dim();
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| IoError::csv(0, e.to_string());
    let mut header = vec!["seq_id".to_string(), "t".to_string()];
    header.extend((1..=d).map(|i| format!("m{i}")));
    w.write_record(&header).map_err(wrap)?;
    for (j, s) in ds.sequences().iter().enumerate() {
        if s.is_empty() {
            let mut row = vec![j.to_string()];
            row.extend(std::iter::repeat_n(String::new(), d + 1));
            w.write_record(&row).map_err(wrap)?;
        }
        for e in s.events() {
            let row: Vec<String> = std::iter::once(j.to_string()).chain(e.coords().map(|v| v.to_string())).collect();
            w.write_record(&row).map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| IoError::csv(0, e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct JsonDomain {
    #[serde(rename = "T")]
    horizon: f64,
    #[serde(default)]
    mark_lo: Vec<f64>,
    #[serde(default)]
    mark_hi: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonDataset {
    domain: JsonDomain,
    sequences: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalization: Option<Affine>,
}

pub fn read_json<R: Read>(input: R) -> Result<Dataset, IoError> {
    let raw: JsonDataset = serde_json::from_reader(input).map_err(|e| IoError::Json(e.to_string()))?;
    let domain = Domain::new(raw.domain.horizon, raw.domain.mark_lo, raw.domain.mark_hi)?;
    let width = 1 + domain.mark_dim();
    let mut sequences = Vec::with_capacity(raw.sequences.len());
    for (j, s) in raw.sequences.into_iter().enumerate() {
        let mut ev = Vec::with_capacity(s.len());
        for (i, row) in s.into_iter().enumerate() {
            if row.len() != width {
                return Err(IoError::Json(format!("sequence {j}, event {i}: expected {width} numbers, found {}", row.len())));
            }
            ev.push(EventPoint::new(row[0], row[1..].to_vec()));
        }
        sequences.push(ev);
    }
    let ds = Dataset::from_events(domain, sequences)?;
    Ok(match raw.normalization {
        Some(a) => ds.with_normalization(a)?,
        None => ds,
    })
}

pub fn write_json<W: Write>(ds: &Dataset, out: W) -> Result<(), IoError> {
    let d = ds.domain();
    let raw = JsonDataset {
        domain: JsonDomain { horizon: d.horizon(), mark_lo: d.mark_lo().to_vec(), mark_hi: d.mark_hi().to_vec() },
        sequences: ds.sequences().iter().map(|s| s.events().iter().map(|e| e.coords().collect()).collect()).collect(),
        normalization: ds.normalization().cloned(),
    };
    let mut out = out;
    serde_json::to_writer(&mut out, &raw).map_err(|e| IoError::Json(e.to_string()))?;
    out.write_all(b"\n").map_err(|e| IoError::Json(e.to_string()))
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(|source| IoError::File { path: path.to_path_buf(), source })
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path).map(BufWriter::new).map_err(|source| IoError::File { path: path.to_path_buf(), source })
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase)
}

/// Reads `.csv` (with `domain`) or `.json` (domain from the file).
pub fn read_dataset(path: &Path, domain: Option<&Domain>) -> Result<Dataset, IoError> {
    match extension(path).as_deref() {
        Some("csv") => {
            let d = domain.ok_or_else(|| IoError::MissingDomain { path: path.to_path_buf() })?;
            read_csv(open(path)?, d)
        }
        Some("json") => read_json(open(path)?),
        _ => Err(IoError::UnknownFormat { path: path.to_path_buf() }),
    }
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), IoError> {
    let mut w = create(path)?;
    match extension(path).as_deref() {
        Some("csv") => write_csv(ds, &mut w)?,
        Some("json") => write_json(ds, &mut w)?,
        _ => return Err(IoError::UnknownFormat { path: path.to_path_buf() }),
    }
    w.flush().map_err(|source| IoError::File { path: path.to_path_buf(), source })
}
