use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{CliError, CliResult};

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::data(format!("cannot write {}: {e}", path.display()))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    w.write_record(header).map_err(|e| io_error(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> CliResult<()> {
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| io_error(path, e))?;
        writeln!(w, "{line}").map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn notice(msg: impl std::fmt::Display) {
    eprintln!("note: {msg}");
}
