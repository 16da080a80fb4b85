//! Nine-column trajectory CSV: `frame,vehicle_id,x,y,vx,vy,ax,ay,lane`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ctrail_core::data::{TrajectoryRecord, CSV_COLUMNS};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unexpected column `{0}`")]
    UnexpectedColumn(String),
    #[error("line {line}: column `{column}` has non-numeric value `{value}`")]
    BadNumeric { line: u64, column: String, value: String },
    #[error("line {line}: duplicate (frame {frame}, vehicle {vehicle_id})")]
    DuplicateKey { line: u64, frame: u32, vehicle_id: u32 },
    #[error("line {line}: {detail}")]
    Malformed { line: u64, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn load_csv(path: &Path) -> Result<Vec<TrajectoryRecord>, CsvError> {
    read_csv(File::open(path)?)
}

/// Parses records, validating the header and every field.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<TrajectoryRecord>, CsvError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers().map_err(|e| malformed(1, &e))?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if let Some(extra) = names.iter().find(|n| !CSV_COLUMNS.contains(n)) {
        return Err(CsvError::UnexpectedColumn((*extra).to_string()));
    }
    let mut index = [0usize; 9];
    for (slot, column) in index.iter_mut().zip(CSV_COLUMNS) {
        *slot = names
            .iter()
            .position(|n| *n == column)
            .ok_or_else(|| CsvError::MissingColumn(column.to_string()))?;
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| malformed(e.position().map_or(0, |p| p.line()), &e))?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(index[i]).unwrap_or("").trim();
        let real = |i: usize| -> Result<f64, CsvError> {
            field(i)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(line, i, field(i)))
        };
        let int = |i: usize| -> Result<u32, CsvError> { field(i).parse::<u32>().map_err(|_| bad(line, i, field(i))) };
        let record = TrajectoryRecord {
            frame: int(0)?,
            vehicle_id: int(1)?,
            x: real(2)?,
            y: real(3)?,
            vx: real(4)?,
            vy: real(5)?,
            ax: real(6)?,
            ay: real(7)?,
            lane: int(8)?,
        };
        if !seen.insert((record.frame, record.vehicle_id)) {
            return Err(CsvError::DuplicateKey {
                line,
                frame: record.frame,
                vehicle_id: record.vehicle_id,
            });
        }
        out.push(record);
    }
    Ok(out)
}

fn bad(line: u64, column: usize, value: &str) -> CsvError {
    CsvError::BadNumeric {
        line,
        column: CSV_COLUMNS[column].to_string(),
        value: value.to_string(),
    }
}

fn malformed(line: u64, e: &csv::Error) -> CsvError {
    CsvError::Malformed {
        line,
        detail: e.to_string(),
    }
}

/// Writes the canonical form: fixed column order, shortest round-trip
/// number formatting, `\n` line endings.
pub fn write_csv<W: Write>(records: &[TrajectoryRecord], out: W) -> Result<(), CsvError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(CSV_COLUMNS).map_err(|e| malformed(0, &e))?;
    for r in records {
        w.write_record([
            r.frame.to_string(),
            r.vehicle_id.to_string(),
            r.x.to_string(),
            r.y.to_string(),
            r.vx.to_string(),
            r.vy.to_string(),
            r.ax.to_string(),
            r.ay.to_string(),
            r.lane.to_string(),
        ])
        .map_err(|e| malformed(0, &e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(records: &[TrajectoryRecord], path: &Path) -> Result<(), CsvError> {
    write_csv(records, File::create(path)?)
}
