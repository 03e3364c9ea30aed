use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use netml_core::features::{parse_record, serialize_record, FlowRecord, SCHEMA_VERSION};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::CliError;

/// JSON-lines values, one per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let lines: Vec<String> = items.iter().map(|v| serde_json::to_string(v).expect("value serializes")).collect();
    write_lines(path, &lines)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), CliError> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Records in file order; rejects lines written under another schema.
pub fn read_records(path: &Path) -> Result<Vec<FlowRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{}", path.display(), i + 1);
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| CliError::Data(format!("{}: {e}", at())))?;
        match v.get("schema_version").and_then(|s| s.as_u64()) {
            Some(s) if s == SCHEMA_VERSION as u64 => {}
            Some(s) => {
                return Err(CliError::Data(format!("{}: schema version {s}, expected {SCHEMA_VERSION}", at())));
            }
            None => return Err(CliError::Data(format!("{}: no schema_version", at()))),
        }
        out.push(parse_record(line).map_err(|e| CliError::Data(format!("{}: {e}", at())))?);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[FlowRecord]) -> Result<(), CliError> {
    let lines: Vec<String> = records.iter().map(serialize_record).collect();
    write_lines(path, &lines)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    write_text(path, &(serde_json::to_string_pretty(v).expect("value serializes") + "\n"))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
