//! Direct block sequential simulation of cell-level incidence from
//! municipality-level rates.
//!
//! Each realization walks a random path over the land cells. At every cell
//! the local mean and variance come from a simple block kriging solve over
//! the nearest conditioning data (municipality rates at centroids,
//! previously simulated cells, and the municipality blocks themselves); a
//! value is then drawn from the global rate distribution centered at that
//! local mean and bounded by the local variance, and joins the conditioning
//! set for the rest of the path.
//!
//! The draw maps the local Gaussian interval through the global data's
//! empirical quantile function, so simulated values honor the global
//! histogram and stay inside the data's support.

use std::sync::Arc;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::grid::{Grid, IncidenceField, Municipality, NODATA};
use crate::kriging::{poisson_risk_variance, solve_spd};
use crate::variogram::{cov_block_block, cov_block_point, BlockSupport, VariogramModel};

/// Block-DSS run parameters.
#[derive(Debug, Clone, Copy)]
pub struct SimulationConfig {
    pub n_realizations: usize,
    pub seed: u64,
    pub max_point_neighbors: usize,
    pub max_block_neighbors: usize,
    /// Conditioning search radius in km; `None` uses the variogram range.
    pub search_radius: Option<f64>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n_realizations: 100,
            seed: 0,
            max_point_neighbors: 12,
            max_block_neighbors: 4,
            search_radius: None,
        }
    }
}

impl SimulationConfig {
    fn validate(&self) -> Result<()> {
        if self.n_realizations < 1 {
            return Err(Error::Config("n_realizations must be >= 1".into()));
        }
        if self.max_point_neighbors < 1 || self.max_block_neighbors < 1 {
            return Err(Error::Config("neighbor caps must be >= 1".into()));
        }
        Ok(())
    }
}

/// One day's conditioning datum: a municipality rate over its block.
#[derive(Debug, Clone, Copy)]
pub struct BlockRate {
    /// Index into the simulator's municipality list.
    pub municipality: usize,
    /// 14-day incidence per 100k.
    pub rate: f64,
}

/// A day's ensemble of simulated fields.
#[derive(Debug, Clone)]
pub struct RealizationSet {
    pub fields: Vec<IncidenceField>,
    pub seeds: Vec<u64>,
    pub diagnostics: Vec<SimDiagnostics>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimDiagnostics {
    /// Negative draws clamped to zero.
    pub clamped: usize,
    /// Cells where kriging fell back to the global mean/variance.
    pub fallbacks: usize,
    /// Cells where the kriging solve needed a ridge.
    pub ridge_solves: usize,
}

/// Deterministic permutation of the land cells.
pub fn random_path(seed: u64, grid: &Grid) -> Vec<usize> {
    let mut path: Vec<usize> = grid.land_cells().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates, owned here so the path survives RNG library changes.
    for i in (1..path.len()).rev() {
        let j = rng.gen_range(0..=i);
        path.swap(i, j);
    }
    path
}

/// Weighted empirical distribution of the day's block rates.
///
/// `cdf`/`quantile` interpolate between midpoint plotting positions, which
/// keeps the quantile function inside the data's support.
#[derive(Debug, Clone)]
pub struct GlobalDistribution {
    values: Vec<f64>,
    /// Midpoint cumulative probability of each sorted value.
    positions: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

impl GlobalDistribution {
    pub fn new(values: &[f64], weights: &[f64]) -> Result<Self> {
        if values.is_empty() || values.len() != weights.len() {
            return Err(Error::Data("global distribution needs matched values/weights".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Data("global distribution weights sum to zero".into()));
        }
        let mut pairs: Vec<(f64, f64)> = values.iter().copied().zip(weights.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mean = pairs.iter().map(|(v, w)| v * w).sum::<f64>() / total;
        let variance = pairs.iter().map(|(v, w)| w * (v - mean) * (v - mean)).sum::<f64>() / total;
        let mut cum = 0.0;
        let mut positions = Vec::with_capacity(pairs.len());
        let mut vals = Vec::with_capacity(pairs.len());
        for (v, w) in &pairs {
            positions.push((cum + 0.5 * w) / total);
            cum += w;
            vals.push(*v);
        }
        Ok(GlobalDistribution { values: vals, positions, mean, variance })
    }

    pub fn cdf(&self, z: f64) -> f64 {
        let n = self.values.len();
        if z <= self.values[0] {
            return self.positions[0];
        }
        if z >= self.values[n - 1] {
            return self.positions[n - 1];
        }
        let mut hi = self.values.partition_point(|&v| v < z);
        if hi == 0 {
            hi = 1;
        }
        let lo = hi - 1;
        let (v0, v1) = (self.values[lo], self.values[hi]);
        let (p0, p1) = (self.positions[lo], self.positions[hi]);
        if v1 > v0 {
            p0 + (p1 - p0) * (z - v0) / (v1 - v0)
        } else {
            0.5 * (p0 + p1)
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.values.len();
        if p <= self.positions[0] {
            return self.values[0];
        }
        if p >= self.positions[n - 1] {
            return self.values[n - 1];
        }
        let mut hi = self.positions.partition_point(|&q| q < p);
        if hi == 0 {
            hi = 1;
        }
        let lo = hi - 1;
        let (p0, p1) = (self.positions[lo], self.positions[hi]);
        let (v0, v1) = (self.values[lo], self.values[hi]);
        if p1 > p0 {
            v0 + (v1 - v0) * (p - p0) / (p1 - p0)
        } else {
            0.5 * (v0 + v1)
        }
    }
}

/// Block-DSS engine bound to one grid, municipality partition and
/// variogram model. Covariances involving blocks, centroids and cell
/// displacements are precomputed once and shared by all realizations.
pub struct BlockSimulator {
    grid: Arc<Grid>,
    municipalities: Arc<Vec<Municipality>>,
    model: VariogramModel,
    config: SimulationConfig,
    centers: Vec<(f64, f64)>,
    centroids: Vec<(f64, f64)>,
    /// cov between cell centers separated by (|drow|, |dcol|).
    cell_disp: Vec<f64>,
    /// n_blocks x n_cells block-to-cell-center covariance.
    block_cell: Vec<f64>,
    /// n_blocks x n_blocks block-to-block covariance (no error term).
    block_block: Vec<f64>,
    /// n_blocks x n_blocks block-to-centroid covariance.
    block_centroid: Vec<f64>,
    /// n_blocks x n_cells centroid-to-cell-center point covariance.
    centroid_cell: Vec<f64>,
    /// n_blocks x n_blocks centroid-to-centroid point covariance.
    centroid_centroid: Vec<f64>,
    search_radius: f64,
}

#[derive(Clone, Copy)]
enum PointKind {
    Centroid(usize),
    Cell(usize),
}

impl BlockSimulator {
    pub fn new(
        grid: Arc<Grid>,
        municipalities: Arc<Vec<Municipality>>,
        model: VariogramModel,
        config: SimulationConfig,
    ) -> Result<Self> {
        config.validate()?;
        if municipalities.is_empty() {
            return Err(Error::Data("no municipalities".into()));
        }
        let n_cells = grid.n_cells();
        let n_blocks = municipalities.len();
        let centers: Vec<(f64, f64)> = (0..n_cells).map(|c| grid.cell_center(c)).collect();
        let centroids: Vec<(f64, f64)> = municipalities.iter().map(|m| m.centroid).collect();
        let supports: Vec<BlockSupport> = municipalities
            .iter()
            .map(|m| {
                BlockSupport::new(m.member_cells.iter().map(|&c| centers[c]).collect())
            })
            .collect::<Result<_>>()?;

        let mut cell_disp = vec![0.0; grid.n_rows() * grid.n_cols()];
        for dr in 0..grid.n_rows() {
            for dc in 0..grid.n_cols() {
                let h = grid.cell_size() * ((dr * dr + dc * dc) as f64).sqrt();
                cell_disp[dr * grid.n_cols() + dc] = model.cov(h)?;
            }
        }

        let mut block_cell = vec![0.0; n_blocks * n_cells];
        let mut centroid_cell = vec![0.0; n_blocks * n_cells];
        for b in 0..n_blocks {
            for c in 0..n_cells {
                block_cell[b * n_cells + c] = cov_block_point(&model, &supports[b], centers[c])?;
                centroid_cell[b * n_cells + c] = model.cov_points(centroids[b], centers[c])?;
            }
        }
        let mut block_block = vec![0.0; n_blocks * n_blocks];
        let mut block_centroid = vec![0.0; n_blocks * n_blocks];
        let mut centroid_centroid = vec![0.0; n_blocks * n_blocks];
        for i in 0..n_blocks {
            for j in 0..n_blocks {
                block_block[i * n_blocks + j] = cov_block_block(&model, &supports[i], &supports[j])?;
                block_centroid[i * n_blocks + j] =
                    cov_block_point(&model, &supports[i], centroids[j])?;
                centroid_centroid[i * n_blocks + j] =
                    model.cov_points(centroids[i], centroids[j])?;
            }
        }

        let search_radius = config.search_radius.unwrap_or(model.range);
        Ok(BlockSimulator {
            grid,
            municipalities,
            model,
            config,
            centers,
            centroids,
            cell_disp,
            block_cell,
            block_block,
            block_centroid,
            centroid_cell,
            centroid_centroid,
            search_radius,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    fn point_cov(&self, a: PointKind, b: PointKind) -> f64 {
        let n_cells = self.grid.n_cells();
        let n_blocks = self.municipalities.len();
        match (a, b) {
            (PointKind::Cell(ca), PointKind::Cell(cb)) => {
                let (ra, cca) = self.grid.row_col(ca);
                let (rb, ccb) = self.grid.row_col(cb);
                let dr = ra.abs_diff(rb);
                let dc = cca.abs_diff(ccb);
                self.cell_disp[dr * self.grid.n_cols() + dc]
            }
            (PointKind::Centroid(m), PointKind::Cell(c)) | (PointKind::Cell(c), PointKind::Centroid(m)) => {
                self.centroid_cell[m * n_cells + c]
            }
            (PointKind::Centroid(ma), PointKind::Centroid(mb)) => {
                self.centroid_centroid[ma * n_blocks + mb]
            }
        }
    }

    /// Simulates one realization for one day of block rates.
    ///
    /// `rates` is parallel to the municipality list. Deterministic given
    /// `seed`; kriging failures at individual cells degrade to the global
    /// distribution instead of aborting the path.
    pub fn simulate_realization(
        &self,
        rates: &[f64],
        date: NaiveDate,
        seed: u64,
    ) -> Result<(IncidenceField, SimDiagnostics)> {
        if rates.len() != self.municipalities.len() {
            return Err(Error::Data(format!(
                "{} rates for {} municipalities",
                rates.len(),
                self.municipalities.len()
            )));
        }
        let n_blocks = rates.len();
        let n_cells = self.grid.n_cells();
        let populations: Vec<f64> = self.municipalities.iter().map(|m| m.population).collect();
        let global = GlobalDistribution::new(rates, &populations)?;
        let global_mean = global.mean;
        let sigma2_global = global.variance;
        let gauss = Normal::new(0.0, 1.0).expect("standard normal");

        // Poisson error variance on each block's diagonal entry.
        let block_err: Vec<f64> = populations
            .iter()
            .map(|&n| poisson_risk_variance(global_mean.max(0.0), n, 0.0))
            .collect::<Result<_>>()?;

        let path = random_path(seed, &self.grid);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03);

        let mut values = vec![NODATA; n_cells];
        let mut simulated: Vec<usize> = Vec::with_capacity(path.len());
        let mut diag = SimDiagnostics::default();

        let cap_points = self.config.max_point_neighbors;
        let cap_blocks = self.config.max_block_neighbors;
        let r2 = self.search_radius * self.search_radius;
        let c0 = self.model.c0();

        let max_n = cap_points + cap_blocks;
        let mut matrix = vec![0.0; max_n * max_n];
        let mut rhs = vec![0.0; max_n];
        let mut zvals = vec![0.0; max_n];
        let mut point_cand: Vec<(f64, u8, usize)> = Vec::with_capacity(n_cells);
        let mut block_cand: Vec<(f64, usize)> = Vec::with_capacity(n_blocks);

        for &cell in &path {
            let target = self.centers[cell];

            // Nearest centroid/simulated points by squared distance.
            point_cand.clear();
            for m in 0..n_blocks {
                let d2 = dist2(self.centroids[m], target);
                if d2 <= r2 {
                    point_cand.push((d2, 0, m));
                }
            }
            for &sc in &simulated {
                let d2 = dist2(self.centers[sc], target);
                if d2 <= r2 {
                    point_cand.push((d2, 1, sc));
                }
            }
            point_cand.sort_unstable_by(|a, b| {
                a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
            });
            point_cand.truncate(cap_points);

            block_cand.clear();
            for m in 0..n_blocks {
                let d2 = dist2(self.centroids[m], target);
                if d2 <= r2 {
                    block_cand.push((d2, m));
                }
            }
            block_cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            block_cand.truncate(cap_blocks);

            let np = point_cand.len();
            let n = np + block_cand.len();

            let (mut mean, variance);
            if n == 0 {
                mean = global_mean;
                variance = c0;
                diag.fallbacks += 1;
            } else {
                let points: Vec<PointKind> = point_cand
                    .iter()
                    .map(|&(_, kind, idx)| {
                        if kind == 0 {
                            PointKind::Centroid(idx)
                        } else {
                            PointKind::Cell(idx)
                        }
                    })
                    .collect();
                let mut max_err: f64 = 0.0;
                for i in 0..n {
                    for j in i..n {
                        let c = if i < np && j < np {
                            self.point_cov(points[i], points[j])
                        } else if i < np {
                            let b = block_cand[j - np].1;
                            match points[i] {
                                PointKind::Cell(cidx) => self.block_cell[b * n_cells + cidx],
                                PointKind::Centroid(m) => {
                                    self.block_centroid[b * n_blocks + m]
                                }
                            }
                        } else {
                            let bi = block_cand[i - np].1;
                            let bj = block_cand[j - np].1;
                            let mut c = self.block_block[bi * n_blocks + bj];
                            if i == j {
                                max_err = max_err.max(block_err[bi]);
                                c += block_err[bi];
                            }
                            c
                        };
                        matrix[i * n + j] = c;
                        matrix[j * n + i] = c;
                    }
                    if i < np {
                        rhs[i] = self.point_cov(points[i], PointKind::Cell(cell));
                        zvals[i] = match points[i] {
                            PointKind::Centroid(m) => rates[m],
                            PointKind::Cell(cidx) => values[cidx],
                        };
                    } else {
                        let b = block_cand[i - np].1;
                        rhs[i] = self.block_cell[b * n_cells + cell];
                        zvals[i] = rates[b];
                    }
                }
                let mut weights = rhs[..n].to_vec();
                match solve_spd(&mut matrix[..n * n], &mut weights, n) {
                    Ok(ridged) => {
                        if ridged {
                            diag.ridge_solves += 1;
                        }
                        mean = global_mean;
                        let mut reduction = 0.0;
                        for i in 0..n {
                            mean += weights[i] * (zvals[i] - global_mean);
                            reduction += weights[i] * rhs[i];
                        }
                        variance = (c0 - reduction).clamp(0.0, c0 + max_err);
                    }
                    Err(_) => {
                        mean = global_mean;
                        variance = c0;
                        diag.fallbacks += 1;
                    }
                }
            }
            // Draw from the global histogram, centered at the local mean
            // and spread by the local variance (in Gaussian units).
            let draw: f64 = rng.sample(StandardNormal);
            let z = if sigma2_global <= f64::EPSILON * (1.0 + global_mean.abs()) {
                global.quantile(0.5)
            } else {
                let p_mean = global.cdf(mean).clamp(1e-9, 1.0 - 1e-9);
                let y_mean = gauss.inverse_cdf(p_mean);
                let ratio = (variance / sigma2_global).clamp(0.0, 1.0);
                let y = y_mean + ratio.sqrt() * draw;
                global.quantile(gauss.cdf(y))
            };
            let z = if z < 0.0 {
                diag.clamped += 1;
                0.0
            } else {
                z
            };
            values[cell] = z;
            simulated.push(cell);
        }

        Ok((
            IncidenceField { grid: self.grid.clone(), date, values },
            diag,
        ))
    }

    /// Full ensemble for one day using the config's seed.
    pub fn simulate_set(&self, rates: &[f64], date: NaiveDate) -> Result<RealizationSet> {
        self.simulate_set_seeded(rates, date, self.config.seed)
    }

    /// Full ensemble with an explicit base seed. Realization `i` runs on
    /// the independent stream `base_seed ^ i`; realizations are computed in
    /// parallel and collected in index order, so results are deterministic
    /// regardless of thread count.
    pub fn simulate_set_seeded(
        &self,
        rates: &[f64],
        date: NaiveDate,
        base_seed: u64,
    ) -> Result<RealizationSet> {
        let seeds: Vec<u64> = (0..self.config.n_realizations)
            .map(|i| base_seed ^ i as u64)
            .collect();
        let results: Result<Vec<(IncidenceField, SimDiagnostics)>> = seeds
            .par_iter()
            .map(|&s| self.simulate_realization(rates, date, s))
            .collect();
        let results = results?;
        let (fields, diagnostics) = results.into_iter().unzip();
        Ok(RealizationSet { fields, seeds, diagnostics })
    }
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    dx * dx + dy * dy
}

/// Cell-wise median and central confidence interval of an ensemble.
pub fn summarize(
    set: &RealizationSet,
    ci_level: f64,
) -> Result<(IncidenceField, IncidenceField, IncidenceField)> {
    if set.fields.is_empty() {
        return Err(Error::Data("empty realization set".into()));
    }
    if !(0.0 < ci_level && ci_level < 1.0) {
        return Err(Error::Config(format!("ci_level must be in (0,1), got {ci_level}")));
    }
    let grid = set.fields[0].grid.clone();
    let date = set.fields[0].date;
    for f in &set.fields[1..] {
        if !f.same_grid(&set.fields[0]) || f.date != date {
            return Err(Error::Data("realizations do not share one grid and date".into()));
        }
    }
    let p_lo = (1.0 - ci_level) / 2.0;
    let p_hi = 1.0 - p_lo;
    let mut median = IncidenceField::filled(grid.clone(), date, 0.0);
    let mut lower = IncidenceField::filled(grid.clone(), date, 0.0);
    let mut upper = IncidenceField::filled(grid.clone(), date, 0.0);
    let mut buf = Vec::with_capacity(set.fields.len());
    for &cell in grid.land_cells() {
        buf.clear();
        buf.extend(set.fields.iter().map(|f| f.values[cell]));
        buf.sort_unstable_by(f64::total_cmp);
        median.values[cell] = quantile_sorted(&buf, 0.5);
        lower.values[cell] = quantile_sorted(&buf, p_lo);
        upper.values[cell] = quantile_sorted(&buf, p_hi);
    }
    Ok((median, lower, upper))
}

/// Linear-interpolation quantile of a sorted slice (the common "type 7"
/// rule: index h = (n-1)p).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}
