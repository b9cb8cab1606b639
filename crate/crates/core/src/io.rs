//! CSV formats: shapes as `x,y` rows, welds as `theta,phi` rows with
//! angles in `[0, 2π)`.

use std::io::{Read, Write};
use std::path::Path;

use crate::circle::normalize;
use crate::error::{Error, Result};
use crate::welding::{Shape, WeldingMap};

fn read_pairs<R: Read>(reader: R, header: [&str; 2]) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let h = rdr.headers()?.clone();
    if h.len() != 2 || h.get(0) != Some(header[0]) || h.get(1) != Some(header[1]) {
        return Err(Error::Parse(format!(
            "expected header `{},{}`, found `{}`",
            header[0],
            header[1],
            h.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            let field = rec.get(i).unwrap_or("");
            field
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("row {}: cannot parse `{field}`", line + 2)))
        };
        if rec.len() != 2 {
            return Err(Error::Parse(format!("row {}: expected 2 fields", line + 2)));
        }
        out.push((parse(0)?, parse(1)?));
    }
    Ok(out)
}

fn write_pairs<W: Write>(writer: W, header: [&str; 2], rows: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    for (a, b) in rows {
        w.write_record([format!("{a:.17e}"), format!("{b:.17e}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_shape<R: Read>(reader: R) -> Result<Shape> {
    let rows = read_pairs(reader, ["x", "y"])?;
    Shape::from_xy(&rows)
}

pub fn read_shape(path: &Path) -> Result<Shape> {
    parse_shape(std::fs::File::open(path)?)
}

pub fn write_shape<W: Write>(writer: W, shape: &Shape) -> Result<()> {
    let rows: Vec<(f64, f64)> = shape.points().iter().map(|z| (z.re, z.im)).collect();
    write_pairs(writer, ["x", "y"], &rows)
}

pub fn save_shape(path: &Path, shape: &Shape) -> Result<()> {
    write_shape(std::fs::File::create(path)?, shape)
}

pub fn parse_weld<R: Read>(reader: R) -> Result<WeldingMap> {
    let rows = read_pairs(reader, ["theta", "phi"])?;
    let theta: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let phi: Vec<f64> = rows.iter().map(|r| r.1).collect();
    WeldingMap::new(&theta, &phi)
}

pub fn read_weld(path: &Path) -> Result<WeldingMap> {
    parse_weld(std::fs::File::open(path)?)
}

/// Samples are written in order of increasing `θ`, both angles reduced to
/// `[0, 2π)`.
pub fn write_weld<W: Write>(writer: W, weld: &WeldingMap) -> Result<()> {
    let rows: Vec<(f64, f64)> = weld
        .samples()
        .iter()
        .map(|&(t, p)| (normalize(t), normalize(p)))
        .collect();
    write_pairs(writer, ["theta", "phi"], &rows)
}

pub fn save_weld(path: &Path, weld: &WeldingMap) -> Result<()> {
    write_weld(std::fs::File::create(path)?, weld)
}
