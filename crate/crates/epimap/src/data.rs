//! CSV ingestion and the municipality case panel.
//!
//! Three inputs drive the pipeline:
//! - `cells.csv` — `row,col,municipality_id`, one line per land cell
//!   (row-major indices from the lower-left grid corner);
//! - `municipalities.csv` — `municipality_id,name,population`;
//! - `cases.csv` — `date,municipality_id,new_cases` with ISO-8601 dates.
//!
//! Validation failures carry the offending file and line number. Calendar
//! gaps are filled with zero cases and recorded as warnings.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::grid::{CellAssignment, Municipality, MunicipalityInfo};

/// Trailing window of Eq-style incidence, in days.
pub const INCIDENCE_WINDOW: usize = 14;

/// Per-municipality daily series aligned to one calendar.
#[derive(Debug, Clone)]
pub struct MunicipalityPanel {
    pub start_date: NaiveDate,
    /// `new_cases[m][t]`, municipality order matching the grid's list.
    pub new_cases: Vec<Vec<f64>>,
    /// Trailing 14-day incidence per 100k, same layout.
    pub incidence: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl MunicipalityPanel {
    pub fn n_days(&self) -> usize {
        self.new_cases.first().map_or(0, Vec::len)
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.start_date + chrono::Days::new(day as u64)
    }

    /// Block rates for one day, parallel to the municipality list.
    pub fn rates_on(&self, day: usize) -> Vec<f64> {
        self.incidence.iter().map(|m| m[day]).collect()
    }
}

/// Trailing-window sum converted to a rate per 100k inhabitants. The
/// window is truncated at the series start.
pub fn trailing_incidence(cases: &[f64], population: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(cases.len());
    let mut window_sum = 0.0;
    for t in 0..cases.len() {
        window_sum += cases[t];
        if t >= INCIDENCE_WINDOW {
            window_sum -= cases[t - INCIDENCE_WINDOW];
        }
        out.push(window_sum / population * 100_000.0);
    }
    out
}

fn open_lines(path: &Path) -> Result<(String, std::io::Lines<BufReader<File>>)> {
    let name = path.display().to_string();
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {name}: {e}")))?;
    Ok((name, BufReader::new(file).lines()))
}

fn expect_header(name: &str, got: Option<std::io::Result<String>>, want: &str) -> Result<()> {
    let line = got
        .transpose()?
        .ok_or_else(|| Error::Data(format!("{name}: empty file")))?;
    if line.trim() != want {
        return Err(Error::DataAt {
            file: name.to_string(),
            line: 1,
            msg: format!("expected header '{want}', got '{}'", line.trim()),
        });
    }
    Ok(())
}

fn split3(name: &str, line_no: usize, line: &str) -> Result<[String; 3]> {
    let parts: Vec<&str> = line.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::DataAt {
            file: name.to_string(),
            line: line_no,
            msg: format!("expected 3 comma-separated fields, got {}", parts.len()),
        });
    }
    Ok([parts[0].to_string(), parts[1].to_string(), parts[2].to_string()])
}

fn parse_at<T: std::str::FromStr>(name: &str, line_no: usize, what: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::DataAt {
        file: name.to_string(),
        line: line_no,
        msg: format!("cannot parse {what} from '{s}'"),
    })
}

pub fn read_cells(path: &Path) -> Result<Vec<CellAssignment>> {
    let (name, mut lines) = open_lines(path)?;
    expect_header(&name, lines.next(), "row,col,municipality_id")?;
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 2;
        let [row, col, id] = split3(&name, line_no, &line)?;
        out.push(CellAssignment {
            row: parse_at(&name, line_no, "row", &row)?,
            col: parse_at(&name, line_no, "col", &col)?,
            municipality_id: parse_at(&name, line_no, "municipality id", &id)?,
        });
    }
    Ok(out)
}

pub fn read_municipalities(path: &Path) -> Result<Vec<MunicipalityInfo>> {
    let (name, mut lines) = open_lines(path)?;
    expect_header(&name, lines.next(), "municipality_id,name,population")?;
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 2;
        let [id, muni_name, population] = split3(&name, line_no, &line)?;
        let population: f64 = parse_at(&name, line_no, "population", &population)?;
        if !(population >= 1.0) {
            return Err(Error::DataAt {
                file: name.clone(),
                line: line_no,
                msg: format!("population must be >= 1, got {population}"),
            });
        }
        out.push(MunicipalityInfo {
            id: parse_at(&name, line_no, "municipality id", &id)?,
            name: muni_name,
            population,
        });
    }
    Ok(out)
}

/// Reads the case file and assembles the panel for the given municipality
/// order. Dates may arrive unsorted; the calendar spans the full observed
/// range, with gaps zero-filled and flagged.
pub fn read_cases(path: &Path, municipalities: &[Municipality]) -> Result<MunicipalityPanel> {
    let (name, mut lines) = open_lines(path)?;
    expect_header(&name, lines.next(), "date,municipality_id,new_cases")?;

    let index_of = |id: u32| municipalities.binary_search_by_key(&id, |m| m.id);
    let mut records: Vec<(NaiveDate, usize, f64)> = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 2;
        let [date, id, count] = split3(&name, line_no, &line)?;
        let date = NaiveDate::parse_from_str(&date, "%Y-%m-%d").map_err(|_| Error::DataAt {
            file: name.clone(),
            line: line_no,
            msg: format!("cannot parse ISO-8601 date from '{date}'"),
        })?;
        let id: u32 = parse_at(&name, line_no, "municipality id", &id)?;
        let muni = index_of(id).map_err(|_| Error::DataAt {
            file: name.clone(),
            line: line_no,
            msg: format!("unknown municipality id {id}"),
        })?;
        let count: f64 = parse_at(&name, line_no, "case count", &count)?;
        if count < 0.0 {
            return Err(Error::DataAt {
                file: name.clone(),
                line: line_no,
                msg: format!("negative case count {count}"),
            });
        }
        records.push((date, muni, count));
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{name}: no case records")));
    }

    let start = records.iter().map(|r| r.0).min().unwrap();
    let end = records.iter().map(|r| r.0).max().unwrap();
    let n_days = (end - start).num_days() as usize + 1;
    let mut new_cases = vec![vec![f64::NAN; n_days]; municipalities.len()];
    for (date, muni, count) in records {
        let day = (date - start).num_days() as usize;
        if !new_cases[muni][day].is_nan() {
            return Err(Error::Data(format!(
                "{name}: duplicate record for municipality {} on {date}",
                municipalities[muni].id
            )));
        }
        new_cases[muni][day] = count;
    }
    let mut warnings = Vec::new();
    for (muni, series) in new_cases.iter_mut().enumerate() {
        let gaps = series.iter().filter(|v| v.is_nan()).count();
        if gaps > 0 {
            warnings.push(format!(
                "municipality {}: {gaps} missing day(s) filled with 0",
                municipalities[muni].id
            ));
            for v in series.iter_mut() {
                if v.is_nan() {
                    *v = 0.0;
                }
            }
        }
    }

    let incidence = new_cases
        .iter()
        .zip(municipalities)
        .map(|(series, m)| trailing_incidence(series, m.population))
        .collect();
    Ok(MunicipalityPanel { start_date: start, new_cases, incidence, warnings })
}

pub fn write_cells(path: &Path, cells: &[CellAssignment]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "row,col,municipality_id")?;
    for c in cells {
        writeln!(w, "{},{},{}", c.row, c.col, c.municipality_id)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_municipalities(path: &Path, info: &[MunicipalityInfo]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "municipality_id,name,population")?;
    for m in info {
        writeln!(w, "{},{},{}", m.id, m.name, m.population as u64)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cases(
    path: &Path,
    start_date: NaiveDate,
    municipality_ids: &[u32],
    cases: &[Vec<f64>],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "date,municipality_id,new_cases")?;
    let n_days = cases.first().map_or(0, Vec::len);
    for day in 0..n_days {
        let date = start_date + chrono::Days::new(day as u64);
        for (m, id) in municipality_ids.iter().enumerate() {
            writeln!(w, "{date},{id},{}", cases[m][day] as u64)?;
        }
    }
    w.flush()?;
    Ok(())
}
