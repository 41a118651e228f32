//! CSV matrices in, JSON reports and CSV tables out.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub x_names: Option<Vec<String>>,
    pub y_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }
}

/// Parses a numeric CSV. Lines and columns in errors are 1-based and count
/// the header line when present.
pub fn read_matrix<R: Read>(reader: R, has_headers: bool) -> Result<(Array2<f64>, Option<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_headers)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let names = if has_headers {
        Some(
            rdr.headers()
                .map_err(csv_error)?
                .iter()
                .map(str::to_string)
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    let offset = usize::from(has_headers);
    let mut values = Vec::new();
    let mut width: Option<usize> = names.as_ref().map(Vec::len);
    let mut rows = 0usize;
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let line = i + 1 + offset;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    line,
                    column: record.len().min(w) + 1,
                    message: format!("expected {w} fields, found {}", record.len()),
                })
            }
            _ => {}
        }
        for (c, cell) in record.iter().enumerate() {
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                return Err(Error::MissingValue { line, column: c + 1 });
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                column: c + 1,
                message: format!("cell {cell:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::MissingValue { line, column: c + 1 });
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = width.unwrap_or(0);
    let m = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    Ok((m, names))
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io.to_string()),
        other => Error::Parse {
            line,
            column: 0,
            message: format!("{other:?}"),
        },
    }
}

pub fn read_matrix_file(path: &Path, has_headers: bool) -> Result<(Array2<f64>, Option<Vec<String>>)> {
    let f = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_matrix(f, has_headers)
}

/// Reads `Y` (`n x p`) and `X` (`n x q`) from two files with equal row counts.
pub fn parse_dataset(y_path: &Path, x_path: &Path, has_headers: bool) -> Result<Dataset> {
    let (y, y_names) = read_matrix_file(y_path, has_headers)?;
    let (x, x_names) = read_matrix_file(x_path, has_headers)?;
    if y.nrows() != x.nrows() {
        return Err(Error::RowMismatch {
            y_rows: y.nrows(),
            x_rows: x.nrows(),
        });
    }
    if y.nrows() == 0 || y.ncols() == 0 || x.ncols() == 0 {
        return Err(Error::InvalidInput("empty data matrix".into()));
    }
    Ok(Dataset { x, y, x_names, y_names })
}

/// Matrix CSV with a header of `prefix1, prefix2, ...`. Values use the
/// shortest representation that round-trips.
pub fn write_matrix<W: Write>(writer: W, m: ArrayView2<'_, f64>, prefix: &str) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let header: Vec<String> = (1..=m.ncols()).map(|j| format!("{prefix}{j}")).collect();
    wtr.write_record(&header).map_err(csv_error)?;
    for row in m.rows() {
        wtr.write_record(row.iter().map(|v| v.to_string())).map_err(csv_error)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_matrix_file(path: &Path, m: ArrayView2<'_, f64>, prefix: &str) -> Result<()> {
    write_matrix(BufWriter::new(create(path)?), m, prefix)
}

/// Rows of any serializable record type with a header row.
pub fn write_table<W: Write, T: Serialize>(writer: W, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for row in rows {
        wtr.serialize(row).map_err(csv_error)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_table_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_table(BufWriter::new(create(path)?), rows)
}

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    schema_version: u32,
    #[serde(flatten)]
    inner: &'a T,
}

/// Pretty JSON with a leading `schema_version` field.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(&Versioned {
        schema_version: SCHEMA_VERSION,
        inner: value,
    })?;
    text.push('\n');
    Ok(text)
}

pub fn emit_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = to_json(value)?;
    let mut f = create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}
