//! Delimited numeric tables.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use ppp_core::DesignMatrix;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// First line holds feature ids.
    pub has_header: bool,
    /// First column holds instance ids.
    pub id_column: bool,
    pub delimiter: u8,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            has_header: true,
            id_column: false,
            delimiter: b',',
        }
    }
}

pub fn load_csv(path: &Path, options: LoadOptions) -> CliResult<DesignMatrix> {
    let file = File::open(path).map_err(|e| CliError::Input {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    read_table(file, options)
}

/// Rows and columns in errors are 1-based: `row` counts data rows (header excluded),
/// `column` counts fields on the line.
pub fn read_table<R: Read>(reader: R, options: LoadOptions) -> CliResult<DesignMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .delimiter(options.delimiter)
        .from_reader(reader);
    let mut records = rdr.records();
    let skip = usize::from(options.id_column);

    let header = if options.has_header {
        match records.next() {
            Some(r) => Some(r.map_err(|e| CliError::Format(e.to_string()))?),
            None => return Err(CliError::Format("empty input".into())),
        }
    } else {
        None
    };

    let mut width = header.as_ref().map(|h| h.len());
    let mut values = Vec::new();
    let mut instance_ids = Vec::new();
    let mut n_rows = 0;
    for (i, record) in records.enumerate() {
        let record = record.map_err(|e| CliError::Format(e.to_string()))?;
        let row = i + 1;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match width {
            Some(w) if w != record.len() => {
                return Err(CliError::Format(format!(
                    "row {row} has {} fields, expected {w}",
                    record.len()
                )));
            }
            None => width = Some(record.len()),
            _ => {}
        }
        if options.id_column {
            instance_ids.push(record[0].to_string());
        }
        for (j, cell) in record.iter().enumerate().skip(skip) {
            let v: f64 = cell.parse().map_err(|_| CliError::Parse {
                row,
                column: j + 1,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(CliError::Validation(format!(
                    "non-finite value {cell:?} at row {row}, column {}",
                    j + 1
                )));
            }
            values.push(v);
        }
        n_rows += 1;
    }
    let n_features = width.unwrap_or(0).saturating_sub(skip);
    if n_rows == 0 || n_features == 0 {
        return Err(CliError::Format("no numeric data".into()));
    }
    let mut m = DesignMatrix::new(n_rows, n_features, values)?;
    if let Some(h) = header {
        m = m.with_feature_ids(h.iter().skip(skip).map(str::to_string).collect())?;
    }
    if options.id_column {
        m = m.with_instance_ids(instance_ids)?;
    }
    Ok(m)
}

/// Writes a matrix so that [`read_table`] with the same options reproduces it.
pub fn write_table<W: std::io::Write>(m: &DesignMatrix, options: LoadOptions, w: W) -> CliResult<()> {
    let mut out = csv::WriterBuilder::new().delimiter(options.delimiter).from_writer(w);
    let io = |e: csv::Error| CliError::Pipeline(e.into());
    if options.has_header {
        let mut header: Vec<String> = Vec::new();
        if options.id_column {
            header.push("id".into());
        }
        header.extend((0..m.n_features()).map(|j| m.feature_label(j)));
        out.write_record(&header).map_err(io)?;
    }
    for (i, row) in m.rows().enumerate() {
        let mut rec: Vec<String> = Vec::with_capacity(row.len() + 1);
        if options.id_column {
            rec.push(m.instance_ids().map_or_else(|| i.to_string(), |ids| ids[i].clone()));
        }
        // `{:?}` prints the shortest string that parses back to the same f64
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        out.write_record(&rec).map_err(io)?;
    }
    out.flush().map_err(|e| CliError::Pipeline(e.into()))?;
    Ok(())
}
