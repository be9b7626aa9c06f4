//! Regular square-cell grid partitioned into municipalities.
//!
//! The territory is a grid of square cells indexed row-major from the
//! lower-left corner. Land is defined by an explicit cell → municipality
//! membership table rather than polygon geometry: the table is exact at the
//! grid resolution and every file format that touches cell indices states
//! the same row-major, lower-left convention.

use std::sync::Arc;

use chrono::NaiveDate;

use crate::error::{Error, Result};

/// Sentinel for cells outside the land mask in rasters and fields.
pub const NODATA: f64 = -9999.0;

/// Grid geometry parameters, as read from the pipeline config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub n_cols: usize,
    pub n_rows: usize,
    /// Cell edge length in km.
    pub cell_size_km: f64,
    /// Lower-left corner of the grid, km.
    pub origin_x_km: f64,
    pub origin_y_km: f64,
}

/// Regular grid of square cells with a land mask.
///
/// Cell `(row, col)` has flat index `row * n_cols + col` (row 0 is the
/// bottom row) and its center sits at `origin + (col + 0.5, row + 0.5) * cell_size`.
#[derive(Debug, Clone)]
pub struct Grid {
    n_cols: usize,
    n_rows: usize,
    cell_size: f64,
    origin: (f64, f64),
    land_mask: Vec<bool>,
    land_cells: Vec<usize>,
}

impl Grid {
    pub fn new(config: &GridConfig, land_mask: Vec<bool>) -> Result<Self> {
        if config.n_cols == 0 || config.n_rows == 0 {
            return Err(Error::Grid("grid must have at least one row and column".into()));
        }
        if !(config.cell_size_km > 0.0) {
            return Err(Error::Grid(format!(
                "cell size must be positive, got {}",
                config.cell_size_km
            )));
        }
        if land_mask.len() != config.n_cols * config.n_rows {
            return Err(Error::Grid(format!(
                "land mask has {} entries for a {}x{} grid",
                land_mask.len(),
                config.n_rows,
                config.n_cols
            )));
        }
        let land_cells = land_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &land)| land.then_some(i))
            .collect();
        Ok(Grid {
            n_cols: config.n_cols,
            n_rows: config.n_rows,
            cell_size: config.cell_size_km,
            origin: (config.origin_x_km, config.origin_y_km),
            land_mask,
            land_cells,
        })
    }

    /// All-land grid, handy for synthetic setups and tests.
    pub fn all_land(config: &GridConfig) -> Result<Self> {
        Self::new(config, vec![true; config.n_cols * config.n_rows])
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    pub fn n_cells(&self) -> usize {
        self.n_cols * self.n_rows
    }

    pub fn n_land(&self) -> usize {
        self.land_cells.len()
    }

    /// Flat indices of land cells, ascending.
    pub fn land_cells(&self) -> &[usize] {
        &self.land_cells
    }

    pub fn is_land(&self, cell: usize) -> bool {
        self.land_mask[cell]
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.n_cols + col
    }

    pub fn row_col(&self, cell: usize) -> (usize, usize) {
        (cell / self.n_cols, cell % self.n_cols)
    }

    /// Center coordinates of a cell, km.
    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (row, col) = self.row_col(cell);
        (
            self.origin.0 + (col as f64 + 0.5) * self.cell_size,
            self.origin.1 + (row as f64 + 0.5) * self.cell_size,
        )
    }
}

/// One municipality: an identified set of grid cells with a population.
#[derive(Debug, Clone)]
pub struct Municipality {
    pub id: u32,
    pub name: String,
    pub population: f64,
    pub centroid: (f64, f64),
    /// Flat cell indices owned by this municipality, ascending.
    pub member_cells: Vec<usize>,
}

impl Municipality {
    /// Mean of member cell centers, optionally weighted by a per-cell
    /// density (parallel to `member_cells`). Unweighted mode is the
    /// uniform-density default.
    pub fn centroid_of(&self, grid: &Grid, weights: Option<&[f64]>) -> Result<(f64, f64)> {
        if self.member_cells.is_empty() {
            return Err(Error::Grid(format!("municipality {} has no cells", self.id)));
        }
        let uniform = vec![1.0; self.member_cells.len()];
        let w = match weights {
            Some(w) => {
                if w.len() != self.member_cells.len() {
                    return Err(Error::Grid(format!(
                        "{} weights for {} member cells",
                        w.len(),
                        self.member_cells.len()
                    )));
                }
                if w.iter().any(|&x| x < 0.0) {
                    return Err(Error::Grid("negative centroid weight".into()));
                }
                w
            }
            None => &uniform,
        };
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(Error::Grid("centroid weights sum to zero".into()));
        }
        let (mut x, mut y) = (0.0, 0.0);
        for (&cell, &wi) in self.member_cells.iter().zip(w) {
            let (cx, cy) = grid.cell_center(cell);
            x += wi * cx;
            y += wi * cy;
        }
        Ok((x / total, y / total))
    }
}

/// One row of the cell membership table.
#[derive(Debug, Clone, Copy)]
pub struct CellAssignment {
    pub row: usize,
    pub col: usize,
    pub municipality_id: u32,
}

/// One row of the municipality attribute table.
#[derive(Debug, Clone)]
pub struct MunicipalityInfo {
    pub id: u32,
    pub name: String,
    pub population: f64,
}

/// Builds the grid and municipality list from a membership table.
///
/// The land mask is true exactly for the cells present in `membership`.
/// Municipalities come back sorted by id; each one's centroid is the
/// uniform-density mean of its member cell centers.
pub fn build_grid(
    config: &GridConfig,
    membership: &[CellAssignment],
    info: &[MunicipalityInfo],
) -> Result<(Arc<Grid>, Vec<Municipality>)> {
    let n_cells = config.n_cols * config.n_rows;
    let mut owner: Vec<Option<u32>> = vec![None; n_cells];
    for a in membership {
        if a.row >= config.n_rows || a.col >= config.n_cols {
            return Err(Error::Data(format!(
                "cell ({}, {}) outside {}x{} grid",
                a.row, a.col, config.n_rows, config.n_cols
            )));
        }
        let idx = a.row * config.n_cols + a.col;
        if let Some(prev) = owner[idx] {
            return Err(Error::Data(format!(
                "cell ({}, {}) assigned to both municipality {} and {}",
                a.row, a.col, prev, a.municipality_id
            )));
        }
        owner[idx] = Some(a.municipality_id);
    }

    let mut infos: Vec<&MunicipalityInfo> = info.iter().collect();
    infos.sort_by_key(|m| m.id);
    for pair in infos.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(Error::Data(format!("duplicate municipality id {}", pair[0].id)));
        }
    }

    // Every id referenced by the membership table must have attributes.
    for a in membership {
        if infos.binary_search_by_key(&a.municipality_id, |m| m.id).is_err() {
            return Err(Error::Data(format!(
                "membership references unknown municipality id {}",
                a.municipality_id
            )));
        }
    }

    let land_mask: Vec<bool> = owner.iter().map(Option::is_some).collect();
    let grid = Arc::new(Grid::new(config, land_mask)?);

    let mut municipalities = Vec::with_capacity(infos.len());
    for m in infos {
        if !(m.population >= 1.0) {
            return Err(Error::Data(format!(
                "municipality {} has population {}, expected >= 1",
                m.id, m.population
            )));
        }
        let member_cells: Vec<usize> = owner
            .iter()
            .enumerate()
            .filter_map(|(i, o)| (*o == Some(m.id)).then_some(i))
            .collect();
        if member_cells.is_empty() {
            return Err(Error::Data(format!("municipality {} owns no cells", m.id)));
        }
        let mut muni = Municipality {
            id: m.id,
            name: m.name.clone(),
            population: m.population,
            centroid: (0.0, 0.0),
            member_cells,
        };
        muni.centroid = muni.centroid_of(&grid, None)?;
        municipalities.push(muni);
    }
    Ok((grid, municipalities))
}

/// Rasterizes axis-aligned rectangles into a membership table. Synthetic
/// data only; real geometry arrives as an explicit `cells.csv`.
///
/// Each rectangle is `(row0, col0, row1, col1)` inclusive of `row0`/`col0`
/// and exclusive of `row1`/`col1`.
pub fn rasterize_rectangles(
    rects: &[(usize, usize, usize, usize, u32)],
) -> Vec<CellAssignment> {
    let mut out = Vec::new();
    for &(row0, col0, row1, col1, id) in rects {
        for row in row0..row1 {
            for col in col0..col1 {
                out.push(CellAssignment {
                    row,
                    col,
                    municipality_id: id,
                });
            }
        }
    }
    out
}

/// One day's cell-level incidence raster over the land mask.
///
/// `values` has one entry per grid cell; non-land cells carry [`NODATA`].
#[derive(Debug, Clone)]
pub struct IncidenceField {
    pub grid: Arc<Grid>,
    pub date: NaiveDate,
    pub values: Vec<f64>,
}

impl IncidenceField {
    pub fn filled(grid: Arc<Grid>, date: NaiveDate, value: f64) -> Self {
        let values = (0..grid.n_cells())
            .map(|i| if grid.is_land(i) { value } else { NODATA })
            .collect();
        IncidenceField { grid, date, values }
    }

    pub fn from_land_values(grid: Arc<Grid>, date: NaiveDate, land: &[f64]) -> Result<Self> {
        if land.len() != grid.n_land() {
            return Err(Error::Shape(format!(
                "{} land values for {} land cells",
                land.len(),
                grid.n_land()
            )));
        }
        let mut values = vec![NODATA; grid.n_cells()];
        for (&cell, &v) in grid.land_cells().iter().zip(land) {
            values[cell] = v;
        }
        Ok(IncidenceField { grid, date, values })
    }

    /// Values over land cells in land-cell order.
    pub fn land_values(&self) -> Vec<f64> {
        self.grid.land_cells().iter().map(|&c| self.values[c]).collect()
    }

    pub fn same_grid(&self, other: &IncidenceField) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid)
            || (self.grid.n_cols() == other.grid.n_cols()
                && self.grid.n_rows() == other.grid.n_rows()
                && self.grid.land_cells() == other.grid.land_cells())
    }
}
