//! ESRI ASCII grid raster reading and writing.
//!
//! Header lines `ncols`, `nrows`, `xllcorner`, `yllcorner`, `cellsize`,
//! `NODATA_value`, then row-major values with the top row first. All
//! numeric output is rendered at 6 significant digits, which makes
//! write -> read -> write byte-stable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, IncidenceField, NODATA};

/// Raw raster contents with values stored row-major from the lower-left
/// corner (matching [`Grid`] indexing, i.e. flipped from file order).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub n_cols: usize,
    pub n_rows: usize,
    pub xll: f64,
    pub yll: f64,
    pub cell_size: f64,
    pub nodata: f64,
    pub values: Vec<f64>,
}

impl Raster {
    pub fn from_field(field: &IncidenceField) -> Raster {
        let grid = &field.grid;
        Raster {
            n_cols: grid.n_cols(),
            n_rows: grid.n_rows(),
            xll: grid.origin().0,
            yll: grid.origin().1,
            cell_size: grid.cell_size(),
            nodata: NODATA,
            values: field.values.clone(),
        }
    }

    /// Per-cell values for `grid`, checking that dimensions agree.
    pub fn into_values_for(self, grid: &Grid) -> Result<Vec<f64>> {
        if self.n_cols != grid.n_cols() || self.n_rows != grid.n_rows() {
            return Err(Error::Data(format!(
                "raster is {}x{} but grid is {}x{}",
                self.n_rows,
                self.n_cols,
                grid.n_rows(),
                grid.n_cols()
            )));
        }
        Ok(self.values)
    }
}

/// Formats `v` with 6 significant digits in plain positional notation.
pub fn format_value(v: f64) -> String {
    format_sig(v, 6)
}

fn format_sig(v: f64, sig: usize) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let s = format!("{:.*e}", sig - 1, v);
    let (mantissa, exp) = s.split_once('e').expect("exponential format");
    let exp: i32 = exp.parse().expect("exponent");
    let neg = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let mut out = String::new();
    if neg {
        out.push('-');
    }
    if exp >= digits.len() as i32 - 1 {
        out.push_str(&digits);
        for _ in 0..(exp - digits.len() as i32 + 1) {
            out.push('0');
        }
    } else if exp >= 0 {
        let split = (exp + 1) as usize;
        out.push_str(&digits[..split]);
        let frac = digits[split..].trim_end_matches('0');
        if !frac.is_empty() {
            out.push('.');
            out.push_str(frac);
        }
    } else {
        out.push_str("0.");
        for _ in 0..(-exp - 1) {
            out.push('0');
        }
        out.push_str(digits.trim_end_matches('0'));
    }
    // A mantissa like 1.00000 leaves nothing after trimming.
    if out.ends_with('.') {
        out.pop();
    }
    out
}

pub fn write_raster(raster: &Raster, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "ncols {}", raster.n_cols)?;
    writeln!(w, "nrows {}", raster.n_rows)?;
    writeln!(w, "xllcorner {}", format_value(raster.xll))?;
    writeln!(w, "yllcorner {}", format_value(raster.yll))?;
    writeln!(w, "cellsize {}", format_value(raster.cell_size))?;
    writeln!(w, "NODATA_value {}", format_value(raster.nodata))?;
    // Top row first.
    for row in (0..raster.n_rows).rev() {
        let mut line = String::new();
        for col in 0..raster.n_cols {
            if col > 0 {
                line.push(' ');
            }
            line.push_str(&format_value(raster.values[row * raster.n_cols + col]));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_field(field: &IncidenceField, path: &Path) -> Result<()> {
    write_raster(&Raster::from_field(field), path)
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let name = path.display().to_string();

    let mut n_cols = None;
    let mut n_rows = None;
    let mut xll = None;
    let mut yll = None;
    let mut cell_size = None;
    let mut nodata = -9999.0;
    let mut flat: Vec<f64> = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let first = parts.next().unwrap();
        let key = first.to_ascii_lowercase();
        let header = matches!(
            key.as_str(),
            "ncols" | "nrows" | "xllcorner" | "yllcorner" | "cellsize" | "nodata_value"
        );
        if header {
            let value = parts.next().ok_or_else(|| Error::DataAt {
                file: name.clone(),
                line: idx + 1,
                msg: format!("header '{first}' has no value"),
            })?;
            let parse_f = || {
                value.parse::<f64>().map_err(|_| Error::DataAt {
                    file: name.clone(),
                    line: idx + 1,
                    msg: format!("cannot parse '{value}' as a number"),
                })
            };
            match key.as_str() {
                "ncols" => n_cols = Some(parse_f()? as usize),
                "nrows" => n_rows = Some(parse_f()? as usize),
                "xllcorner" => xll = Some(parse_f()?),
                "yllcorner" => yll = Some(parse_f()?),
                "cellsize" => cell_size = Some(parse_f()?),
                _ => nodata = parse_f()?,
            }
        } else {
            for tok in trimmed.split_whitespace() {
                flat.push(tok.parse::<f64>().map_err(|_| Error::DataAt {
                    file: name.clone(),
                    line: idx + 1,
                    msg: format!("cannot parse '{tok}' as a number"),
                })?);
            }
        }
    }

    let n_cols = n_cols.ok_or_else(|| Error::Data(format!("{name}: missing ncols")))?;
    let n_rows = n_rows.ok_or_else(|| Error::Data(format!("{name}: missing nrows")))?;
    if flat.len() != n_cols * n_rows {
        return Err(Error::Data(format!(
            "{name}: {} values for a {n_rows}x{n_cols} raster",
            flat.len()
        )));
    }
    // File order is top row first; store from the lower-left.
    let mut values = vec![0.0; flat.len()];
    for file_row in 0..n_rows {
        let grid_row = n_rows - 1 - file_row;
        let src = &flat[file_row * n_cols..(file_row + 1) * n_cols];
        values[grid_row * n_cols..(grid_row + 1) * n_cols].copy_from_slice(src);
    }
    Ok(Raster {
        n_cols,
        n_rows,
        xll: xll.unwrap_or(0.0),
        yll: yll.unwrap_or(0.0),
        cell_size: cell_size.unwrap_or(1.0),
        nodata,
        values,
    })
}
