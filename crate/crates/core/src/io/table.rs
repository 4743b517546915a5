//! Comma-separated tables with a header row and LF line endings.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::cmanp::Predictions;
use crate::error::{contract, Error, Result};
use crate::numerics::Matrix;

/// 17 significant digits, enough to recover any `f64` exactly.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Header plus rows of already-formatted cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn write_table(table: &CsvTable) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&table.header).map_err(csv_err)?;
    for row in &table.rows {
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("cells are UTF-8"))
}

/// Reads a numeric table whose header names exactly `columns`.
pub fn read_columns(input: impl Read, columns: &[&str]) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(input);
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(i + 1, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        let cells: Vec<&str> = record.iter().map(str::trim).collect();
        if i == 0 {
            if cells != columns {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "expected header {:?}, found {:?}",
                        columns.join(","),
                        cells.join(",")
                    ),
                });
            }
            continue;
        }
        if cells.len() != columns.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", columns.len(), cells.len()),
            });
        }
        for (cell, name) in cells.iter().zip(columns) {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                message: format!("column {name}: {cell:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column {name}: {cell:?} is not finite"),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 && data.is_empty() && columns.is_empty() {
        return contract("table with no columns");
    }
    Matrix::from_vec(rows, columns.len(), data)
}

/// `x,y` context pairs as an `N × 2` matrix.
pub fn read_context(path: impl AsRef<Path>) -> Result<Matrix> {
    read_columns(fs::File::open(path)?, &["x", "y"])
}

/// `x` target inputs as an `M × 1` matrix.
pub fn read_targets(path: impl AsRef<Path>) -> Result<Matrix> {
    read_columns(fs::File::open(path)?, &["x"])
}

/// `x,mean,std` rows.
pub fn write_predictions(xs: &Matrix, pred: &Predictions) -> Result<String> {
    if xs.shape() != pred.mean.shape() {
        return Err(Error::Shape {
            op: "write_predictions",
            lhs: xs.shape(),
            rhs: pred.mean.shape(),
        });
    }
    let rows = (0..xs.rows())
        .map(|r| {
            vec![
                format_real(xs.get(r, 0)),
                format_real(pred.mean.get(r, 0)),
                format_real(pred.std.get(r, 0)),
            ]
        })
        .collect();
    write_table(&CsvTable {
        header: vec!["x".into(), "mean".into(), "std".into()],
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_pairs() {
        let m = read_columns("x,y\n1,2\n-0.5, 3e-1\n".as_bytes(), &["x", "y"]).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 2.0, -0.5, 0.3]);
    }

    #[test]
    fn header_only_is_empty() {
        assert_eq!(
            read_columns("x,y\n".as_bytes(), &["x", "y"])
                .unwrap()
                .rows(),
            0
        );
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = read_columns("x,y\n1,2\n3,oops\n".as_bytes(), &["x", "y"]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = read_columns("x,y\n1,2\n3\n".as_bytes(), &["x", "y"]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = read_columns("a,b\n".as_bytes(), &["x", "y"]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let err = read_columns("x\nNaN\n".as_bytes(), &["x"]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn real_formatting_round_trips() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02e23, f64::MIN_POSITIVE, 0.0] {
            let s = format_real(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn table_uses_lf() {
        let t = CsvTable {
            header: vec!["a".into(), "b".into()],
            rows: vec![vec!["1".into(), "2".into()]],
        };
        assert_eq!(write_table(&t).unwrap(), "a,b\n1,2\n");
    }
}
