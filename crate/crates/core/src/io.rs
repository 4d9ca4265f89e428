//! CSV datasets and prediction files.
//!
//! Datasets carry a header row (`x1,...,xD,y` when written by this crate; any
//! names are accepted on read) and use the last column as the target.
//! Prediction files have the header `index,mean,variance`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::dataset::Dataset;
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn csv_error(name: &str, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    let kind = e.kind();
    if let csv::ErrorKind::Io(_) = kind {
        return Error::Io(std::io::Error::other(format!("{name}: {e}")));
    }
    match line {
        Some(l) => Error::input(format!("{name}, line {l}: {e}")),
        None => Error::input(format!("{name}: {e}")),
    }
}

/// Parses numeric rows, reporting the line of the first malformed field.
fn parse_rows<R: Read>(reader: R, name: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(|e| csv_error(name, e))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(name, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, f)| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::input(format!("{name}, line {line}, column {}: '{f}' is not a finite number", c + 1))),
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn read_dataset_from<R: Read>(reader: R, name: &str) -> Result<Dataset> {
    let (header, rows) = parse_rows(reader, name)?;
    if header.len() < 2 {
        return Err(Error::input(format!("{name}: need at least one input column and a target column")));
    }
    if rows.is_empty() {
        return Err(Error::input(format!("{name}: no data rows")));
    }
    let (inputs, targets): (Vec<Vec<f64>>, Vec<f64>) = rows
        .into_iter()
        .map(|mut r| {
            let y = r.pop().expect("nonempty row");
            (r, y)
        })
        .unzip();
    Dataset::from_rows(&inputs, targets)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_from(open(path)?, &path.display().to_string())
}

pub fn write_dataset_to<W: Write>(writer: W, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=data.dim()).map(|d| format!("x{d}")).collect();
    header.push("y".into());
    w.write_record(&header).map_err(|e| csv_error("dataset", e))?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.row(i).iter().map(f64::to_string).collect();
        rec.push(data.targets[i].to_string());
        w.write_record(&rec).map_err(|e| csv_error("dataset", e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_dataset_to(create(path)?, data)
}

pub fn write_predictions_to<W: Write>(writer: W, preds: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "mean", "variance"]).map_err(|e| csv_error("predictions", e))?;
    for (i, (m, v)) in preds.iter().enumerate() {
        w.write_record([i.to_string(), m.to_string(), v.to_string()]).map_err(|e| csv_error("predictions", e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_predictions(path: &Path, preds: &[(f64, f64)]) -> Result<()> {
    write_predictions_to(create(path)?, preds)
}

/// Reads `(mean, variance)` rows; indices must run 0, 1, 2, … in order.
pub fn read_predictions_from<R: Read>(reader: R, name: &str) -> Result<Vec<(f64, f64)>> {
    let (header, rows) = parse_rows(reader, name)?;
    if header != ["index", "mean", "variance"] {
        return Err(Error::input(format!("{name}: expected header index,mean,variance, found {}", header.join(","))));
    }
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if r[0] != i as f64 {
                return Err(Error::input(format!("{name}, line {}: index {} out of order", i + 2, r[0])));
            }
            Ok((r[1], r[2]))
        })
        .collect()
}

pub fn read_predictions(path: &Path) -> Result<Vec<(f64, f64)>> {
    read_predictions_from(open(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip_is_exact() {
        let d = Dataset::from_rows(&[vec![0.1, -1e-300], vec![1.0 / 3.0, 2.5e17]], vec![std::f64::consts::PI, -0.0]).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x1,x2,y\n"));
        let back = read_dataset_from(&buf[..], "mem").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = read_dataset_from("a,b,y\n1,2,3\n4,oops,6\n".as_bytes(), "f.csv").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Input(_)));
        assert!(msg.contains("line 3") && msg.contains("column 2"), "{msg}");
        let err = read_dataset_from("a,y\n1,2\n3\n".as_bytes(), "g.csv").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(read_dataset_from("a,y\n".as_bytes(), "h").is_err());
        assert!(read_dataset_from("y\n1\n".as_bytes(), "h").is_err());
        assert!(read_dataset_from("a,y\n1,NaN\n".as_bytes(), "h").is_err());
    }

    #[test]
    fn predictions_round_trip() {
        let p = vec![(1.5, 0.25), (-2.0, 1e-9)];
        let mut buf = Vec::new();
        write_predictions_to(&mut buf, &p).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "index,mean,variance\n0,1.5,0.25\n1,-2,0.000000001\n");
        assert_eq!(read_predictions_from(&buf[..], "p").unwrap(), p);
        assert!(read_predictions_from("index,mean,variance\n1,0,1\n".as_bytes(), "p").is_err());
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(read_dataset(Path::new("/nonexistent/x.csv")), Err(Error::Io(_))));
    }
}
