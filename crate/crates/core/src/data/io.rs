//! Line-delimited JSON series files: one record per line,
//! `{"label": 1, "dims": [{"t": [...], "x": [...]}, ...]}` with `label`
//! optional. Blank lines are skipped.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::series::SparseSeries;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub fn parse_series(reader: impl Read) -> Result<Vec<SparseSeries>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SparseSeries =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        s.validate()
            .map_err(|e| Error::Validation(format!("line {line_no}: {e}")))?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_series(mut w: impl Write, data: &[SparseSeries]) -> Result<()> {
    for s in data {
        let line = serde_json::to_string(s).map_err(|e| Error::Validation(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::Validation(e.to_string()))?;
    }
    Ok(())
}

pub fn load_series(path: &Path) -> Result<Vec<SparseSeries>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_series(f)
}

pub fn save_series(path: &Path, data: &[SparseSeries]) -> Result<()> {
    let mut buf = Vec::new();
    write_series(&mut buf, data)?;
    write_atomic(path, &buf)
}
