//! CSV emission and the summary table.

use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

/// Column names of `T`, in field order.
pub fn header<T: Serialize + Default>() -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(T::default()).expect("in-memory write");
    let bytes = w.into_inner().expect("in-memory flush");
    let text = String::from_utf8(bytes).expect("csv output is utf-8");
    text.lines().next().unwrap_or_default().to_string()
}

/// Writes a header line and one line per row. The header is written even
/// when `rows` is empty.
pub fn emit_csv<T: Serialize + Default>(rows: &[T], path: &Path) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_owned(),
        source,
    };
    let file = File::create(path).map_err(|source| ReportError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header::<T>().split(',')).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_owned(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

/// Fixed-width table with a header row.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([headers[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(headers.to_vec());
    for r in rows {
        out.push('\n');
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::MetricsRow;

    fn row(step: u64) -> MetricsRow {
        MetricsRow {
            step,
            epoch: 1,
            train_loss: 0.1 + 1.0 / 3.0,
            validation_accuracy: 0.975,
            test_accuracy: 0.9731,
            examples_per_sec: 12345.678901234,
            state_bytes: 4096,
            ms_per_step: 1e-3,
            note: String::new(),
        }
    }

    #[test]
    fn header_is_fixed() {
        assert_eq!(
            header::<MetricsRow>(),
            "step,epoch,train_loss,validation_accuracy,test_accuracy,examples_per_sec,state_bytes,ms_per_step,note"
        );
    }

    #[test]
    fn empty_rows_give_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        emit_csv::<MetricsRow>(&[], &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            format!("{}\n", header::<MetricsRow>())
        );
        assert!(read_csv::<MetricsRow>(&path).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut rows = vec![row(1), row(2)];
        rows[1].note = "diverged at step 2".into();
        rows[1].train_loss = f64::MAX;
        emit_csv(&rows, &path).unwrap();
        assert_eq!(read_csv::<MetricsRow>(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let err = emit_csv(&[row(1)], Path::new("/nonexistent/dir/m.csv")).unwrap_err();
        assert!(matches!(err, ReportError::Io { .. }));
    }

    #[test]
    fn table_aligns_columns() {
        let t = table(&["maker", "acc"], &[vec!["sgd".into(), "97.5".into()]]);
        assert_eq!(t, "maker   acc\n  sgd  97.5");
    }
}
