//! `label,x1,...,xd` rows. Labels are non-negative integers; features are
//! decimal floats.

use std::path::Path;

use super::dataset::Dataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Loads a dataset. `C` is inferred as the largest label plus one.
pub fn load_csv(path: &Path, has_header: bool) -> Result<Dataset<f64>> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut width: Option<usize> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() < 2 {
            return Err(parse_err(path, line, "need a label and at least one feature"));
        }
        let d = record.len() - 1;
        match width {
            None => width = Some(d),
            Some(w) if w != d => {
                return Err(parse_err(path, line, format!("ragged row: {d} features, expected {w}")));
            }
            _ => {}
        }
        let label_field = &record[0];
        let label: usize = label_field
            .parse()
            .map_err(|_| parse_err(path, line, format!("label {label_field:?} is not a non-negative integer")))?;
        labels.push(label);
        for (j, field) in record.iter().skip(1).enumerate() {
            let x: f64 = field
                .parse()
                .map_err(|_| parse_err(path, line, format!("feature {} {field:?} is not a number", j + 1)))?;
            if !x.is_finite() {
                return Err(parse_err(path, line, format!("feature {} is not finite", j + 1)));
            }
            data.push(x);
        }
    }
    let d = width.ok_or_else(|| parse_err(path, 0, "no data rows"))?;
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    if classes < 2 {
        return Err(parse_err(path, 0, format!("need at least 2 classes, found {classes}")));
    }
    let n = labels.len();
    if n < classes {
        return Err(parse_err(path, 0, format!("{n} rows cannot cover {classes} classes")));
    }
    Dataset::new(Tensor::matrix(n, d, data)?, labels, classes, vec![d])
}

/// Writes without a header. Floats use the shortest representation that
/// parses back to the same value.
pub fn write_csv(dataset: &Dataset<f64>, path: &Path) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_io)?;
    let mut fields = Vec::with_capacity(dataset.dim() + 1);
    for i in 0..dataset.len() {
        fields.clear();
        fields.push(dataset.labels[i].to_string());
        fields.extend(dataset.inputs.row(i).iter().map(|x| format!("{x:?}")));
        writer.write_record(&fields).map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("{other:?}")),
    }
}
