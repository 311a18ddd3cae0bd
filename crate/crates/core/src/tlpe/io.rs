//! Measurement CSV: one row per instant, per-unit rectangular components.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::PhasorRecord;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 9] = ["t", "Vp_r", "Vp_i", "Vq_r", "Vq_i", "Ip_r", "Ip_i", "Iq_r", "Iq_i"];

pub fn write_measurements_csv<W: Write>(out: W, records: &[PhasorRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let map = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(map)?;
    for rec in records {
        let v = rec.voltages();
        let i = rec.currents();
        let fields: Vec<String> = std::iter::once(rec.t)
            .chain(v)
            .chain(i)
            .map(|x| format!("{x:e}"))
            .collect();
        w.write_record(&fields).map_err(map)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a measurement CSV. Rows are numbered from 1 for the first data row;
/// errors name the row and the column header.
pub fn read_measurements_csv<R: Read>(input: R) -> Result<Vec<PhasorRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            column: "header".into(),
            message: e.to_string(),
        })?
        .clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != CSV_HEADER {
        let column = CSV_HEADER
            .iter()
            .zip(got.iter().map(Some).chain(std::iter::repeat(None)))
            .find(|(want, have)| have.is_none_or(|h| h != *want))
            .map_or_else(|| got[CSV_HEADER.len()].to_string(), |(want, _)| want.to_string());
        return Err(Error::Parse {
            row: 0,
            column,
            message: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    let mut records = Vec::new();
    for (k, result) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = result.map_err(|e| Error::Parse {
            row,
            column: "-".into(),
            message: e.to_string(),
        })?;
        if rec.len() != CSV_HEADER.len() {
            let column = CSV_HEADER.get(rec.len()).copied().unwrap_or("extra");
            return Err(Error::Parse {
                row,
                column: column.into(),
                message: format!("expected {} fields, found {}", CSV_HEADER.len(), rec.len()),
            });
        }
        let mut vals = [0.0; 9];
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                column: CSV_HEADER[j].into(),
                message: format!("'{field}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: CSV_HEADER[j].into(),
                    message: format!("'{field}' is not finite"),
                });
            }
            vals[j] = v;
        }
        records.push(PhasorRecord::from_parts(
            vals[0],
            [vals[1], vals[2], vals[3], vals[4]],
            [vals[5], vals[6], vals[7], vals[8]],
        ));
    }
    if records.is_empty() {
        return Err(Error::Parse {
            row: 1,
            column: "t".into(),
            message: "no data rows".into(),
        });
    }
    Ok(records)
}

pub fn write_measurements_file(path: &Path, records: &[PhasorRecord]) -> Result<()> {
    write_measurements_csv(File::create(path)?, records)
}

pub fn read_measurements_file(path: &Path) -> Result<Vec<PhasorRecord>> {
    read_measurements_csv(File::open(path)?)
}
