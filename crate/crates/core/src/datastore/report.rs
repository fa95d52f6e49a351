use std::path::Path;

use super::binary::{read_file, write_file};
use crate::analysis::{MetricReport, MetricRow};
use crate::error::{Error, Result};

pub const REPORT_HEADER: [&str; 8] = [
    "model_id",
    "task_id",
    "domain_id",
    "block_id",
    "bin_id",
    "metric",
    "value",
    "higher_is_better",
];

fn parse_error(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// CSV with the fixed [`REPORT_HEADER`]; absent block/bin ids are empty.
pub fn report_to_csv(report: &MetricReport) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(vec![]);
    let csv_err = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for r in report.rows() {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

pub fn report_from_csv(bytes: &[u8], path: &Path) -> Result<MetricReport> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = rd.headers().map_err(|e| parse_error(path, e.to_string()))?.clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(parse_error(
            path,
            format!(
                "header {:?}, expected {}",
                header.iter().collect::<Vec<_>>(),
                REPORT_HEADER.join(",")
            ),
        ));
    }
    let mut report = MetricReport::new();
    for (i, row) in rd.deserialize::<MetricRow>().enumerate() {
        let row = row.map_err(|e| parse_error(path, format!("row {}: {e}", i + 1)))?;
        report
            .push(row)
            .map_err(|e| parse_error(path, format!("row {}: {e}", i + 1)))?;
    }
    Ok(report)
}

pub fn write_report_csv(path: &Path, report: &MetricReport) -> Result<()> {
    write_file(path, &report_to_csv(report)?)
}

pub fn read_report_csv(path: &Path) -> Result<MetricReport> {
    report_from_csv(&read_file(path)?, path)
}

pub fn write_report_json(path: &Path, report: &MetricReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report.rows()).map_err(|e| Error::invalid(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_report_json(path: &Path) -> Result<MetricReport> {
    let rows: Vec<MetricRow> =
        serde_json::from_slice(&read_file(path)?).map_err(|e| parse_error(path, e.to_string()))?;
    MetricReport::from_rows(rows).map_err(|e| parse_error(path, e.to_string()))
}
