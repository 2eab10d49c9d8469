use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::EmpiricalMeasure;
use crate::error::{Error, Result};
use crate::fmt_f64;

/// CSV with columns `x0,..,x{d-1},weight`.
pub fn write_measure_csv(mu: &EmpiricalMeasure, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..mu.dim())
        .map(|k| format!("x{k}"))
        .chain(std::iter::once("weight".to_string()))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (p, wt) in mu.iter() {
        let row: Vec<String> = p.iter().chain(std::iter::once(&wt)).map(|&v| fmt_f64(v)).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_measure_csv(path: &Path) -> Result<EmpiricalMeasure> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let dim = headers.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| {
        Error::invalid(format!("{}: expected x0..,weight columns", path.display()))
    })?;
    if headers.get(dim) != Some("weight") {
        return Err(Error::invalid(format!("{}: last column must be `weight`", path.display())));
    }
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        for k in 0..dim {
            points.push(parse(&rec[k])?);
        }
        weights.push(parse(&rec[dim])?);
    }
    EmpiricalMeasure::new(dim, points, weights)
}

fn parse(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::invalid(format!("not a number: {s:?}")))
}

pub fn write_measure_json(mu: &EmpiricalMeasure, path: &Path) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, mu)?;
    Ok(())
}

pub fn read_measure_json(path: &Path) -> Result<EmpiricalMeasure> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}
