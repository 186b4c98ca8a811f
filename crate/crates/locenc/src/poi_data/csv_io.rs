//! POI CSV ingestion and export.
//!
//! Format: header `id,x,y,types`, UTF-8, decimal point `.`, type names
//! joined by `|`. Coordinates are written with shortest-round-trip
//! formatting so a write→load cycle reproduces every f64 exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Dataset, PointFeature, TypeVocabulary};
use crate::error::{Error, Result};

const HEADER: [&str; 4] = ["id", "x", "y", "types"];

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Load a dataset from a POI CSV file. The vocabulary is built in
/// first-occurrence order of type names; bounds are tight.
pub fn load_poi_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    {
        let headers = reader.headers()?;
        let got: Vec<&str> = headers.iter().collect();
        if got != HEADER {
            return Err(parse_err(1, format!("expected header id,x,y,types, got {}", got.join(","))));
        }
    }

    let mut vocab = TypeVocabulary::new();
    let mut points = Vec::new();
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e
                    .position()
                    .map(|p| p.line())
                    .unwrap_or(0);
                return Err(parse_err(line, e.to_string()));
            }
        };
        let line = record_line(&record);
        if record.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, got {}", record.len())));
        }
        let id: u64 = record[0]
            .trim()
            .parse()
            .map_err(|e| parse_err(line, format!("bad id '{}': {e}", &record[0])))?;
        let x: f64 = record[1]
            .trim()
            .parse()
            .map_err(|e| parse_err(line, format!("bad x coordinate '{}': {e}", &record[1])))?;
        let y: f64 = record[2]
            .trim()
            .parse()
            .map_err(|e| parse_err(line, format!("bad y coordinate '{}': {e}", &record[2])))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(parse_err(line, "non-finite coordinate"));
        }
        let types_field = &record[3];
        if types_field.is_empty() {
            return Err(parse_err(line, "empty types field"));
        }
        let mut type_ids = Vec::new();
        for name in types_field.split('|') {
            if name.is_empty() {
                return Err(parse_err(line, "empty type name in types field"));
            }
            let tid = vocab.intern(name);
            if !type_ids.contains(&tid) {
                type_ids.push(tid);
            }
        }
        points.push(PointFeature { id, loc: [x, y], type_ids });
    }
    if points.is_empty() {
        return Err(parse_err(1, "dataset contains no points"));
    }
    Dataset::from_points(points, vocab)
}

/// Write a dataset back out in the same CSV format.
pub fn write_poi_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", HEADER.join(","))?;
    for p in ds.points() {
        let names: Vec<&str> = p
            .type_ids
            .iter()
            .map(|&t| ds.vocab().name(t).expect("type id valid by dataset invariant"))
            .collect();
        writeln!(w, "{},{},{},{}", p.id, p.loc[0], p.loc[1], names.join("|"))?;
    }
    w.flush()?;
    Ok(())
}
