//! Versioned text checkpoint: a header line, one JSON metadata line, then
//! `(name, shape, values)` blocks with values printed at 17 significant
//! digits so a load→save round trip reproduces every f64 exactly.

use std::io::{BufRead, Write};

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "LOCENC-CHECKPOINT";

pub fn save_checkpoint<W: Write>(w: &mut W, header_json: &str, store: &ParameterStore) -> Result<()> {
    debug_assert!(!header_json.contains('\n'));
    writeln!(w, "{MAGIC} v{CHECKPOINT_VERSION}")?;
    writeln!(w, "{header_json}")?;
    for (name, tensor) in store.entries() {
        write!(w, "param {name}")?;
        for d in tensor.shape() {
            write!(w, " {d}")?;
        }
        writeln!(w)?;
        let mut first = true;
        for v in tensor.data() {
            if !first {
                write!(w, " ")?;
            }
            write!(w, "{v:.16e}")?;
            first = false;
        }
        writeln!(w)?;
    }
    writeln!(w, "end")?;
    Ok(())
}

/// Returns the metadata JSON line and the stored `(name, tensor)` pairs.
pub fn load_checkpoint<R: BufRead>(r: &mut R) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut lines = r.lines().enumerate();
    let mut next_line = |expect: &str| -> Result<(u64, String)> {
        match lines.next() {
            Some((i, Ok(line))) => Ok((i as u64 + 1, line)),
            Some((i, Err(e))) => Err(Error::Parse {
                line: i as u64 + 1,
                message: e.to_string(),
            }),
            None => Err(Error::Parse {
                line: 0,
                message: format!("unexpected end of checkpoint, expected {expect}"),
            }),
        }
    };

    let (line_no, magic) = next_line("header")?;
    if magic != format!("{MAGIC} v{CHECKPOINT_VERSION}") {
        return Err(Error::Parse {
            line: line_no,
            message: format!("bad checkpoint header '{magic}'"),
        });
    }
    let (_, header_json) = next_line("metadata line")?;

    let mut params = Vec::new();
    loop {
        let (line_no, decl) = next_line("'param' or 'end'")?;
        if decl == "end" {
            break;
        }
        let mut parts = decl.split_whitespace();
        if parts.next() != Some("param") {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 'param' line, got '{decl}'"),
            });
        }
        let name = parts
            .next()
            .ok_or(Error::Parse {
                line: line_no,
                message: "param line missing name".into(),
            })?
            .to_string();
        let shape: Vec<usize> = parts
            .map(|p| {
                p.parse::<usize>().map_err(|e| Error::Parse {
                    line: line_no,
                    message: format!("bad dimension '{p}': {e}"),
                })
            })
            .collect::<Result<_>>()?;
        let (vline_no, values_line) = next_line("values")?;
        let values: Vec<f64> = if values_line.is_empty() {
            Vec::new()
        } else {
            values_line
                .split(' ')
                .map(|p| {
                    p.parse::<f64>().map_err(|e| Error::Parse {
                        line: vline_no,
                        message: format!("bad value '{p}': {e}"),
                    })
                })
                .collect::<Result<_>>()?
        };
        let tensor = Tensor::from_vec(&shape, values).map_err(|e| Error::Parse {
            line: vline_no,
            message: e.to_string(),
        })?;
        params.push((name, tensor));
    }
    Ok((header_json, params))
}
