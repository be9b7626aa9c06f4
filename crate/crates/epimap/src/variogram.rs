//! Stationary variogram/covariance models, population-weighted experimental
//! variogram estimation, and point/block covariance assembly.
//!
//! Models are isotropic with a single structure. The exponential and
//! gaussian structures use the practical-range convention: `gamma` reaches
//! 95% of the sill at `h = range` (the spherical structure reaches it
//! exactly).

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    Spherical,
    Exponential,
    Gaussian,
}

impl Structure {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spherical" => Ok(Structure::Spherical),
            "exponential" => Ok(Structure::Exponential),
            "gaussian" => Ok(Structure::Gaussian),
            other => Err(Error::Config(format!("unknown variogram structure '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Structure::Spherical => "spherical",
            Structure::Exponential => "exponential",
            Structure::Gaussian => "gaussian",
        }
    }

    /// Unit-sill structure value at normalized distance `h / range`.
    fn unit(&self, r: f64) -> f64 {
        match self {
            Structure::Spherical => {
                if r >= 1.0 {
                    1.0
                } else {
                    1.5 * r - 0.5 * r * r * r
                }
            }
            Structure::Exponential => 1.0 - (-3.0 * r).exp(),
            Structure::Gaussian => 1.0 - (-3.0 * r * r).exp(),
        }
    }
}

/// Stationary isotropic variogram model.
///
/// `sill` is the partial sill of the risk component; the total plateau is
/// `nugget + sill` and equals the point-support variance `C(0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramModel {
    pub structure: Structure,
    pub nugget: f64,
    pub sill: f64,
    pub range: f64,
}

impl VariogramModel {
    pub fn new(structure: Structure, nugget: f64, sill: f64, range: f64) -> Result<Self> {
        if !(nugget >= 0.0) {
            return Err(Error::Config(format!("nugget must be >= 0, got {nugget}")));
        }
        if !(sill > 0.0) {
            return Err(Error::Config(format!("sill must be > 0, got {sill}")));
        }
        if !(range > 0.0) {
            return Err(Error::Config(format!("range must be > 0, got {range}")));
        }
        Ok(VariogramModel { structure, nugget, sill, range })
    }

    /// Semivariance at separation `h`. `gamma(0) = 0`; for `h > 0` the
    /// nugget enters as a discontinuity at the origin.
    pub fn gamma(&self, h: f64) -> Result<f64> {
        if h < 0.0 {
            return Err(Error::Numerical(format!("negative lag distance {h}")));
        }
        if h == 0.0 {
            return Ok(0.0);
        }
        Ok(self.nugget + self.sill * self.structure.unit(h / self.range))
    }

    /// Stationary covariance: `C(0) = nugget + sill`, `C(h) = C(0) - gamma(h)`.
    pub fn cov(&self, h: f64) -> Result<f64> {
        Ok(self.c0() - self.gamma(h)?)
    }

    /// Point-support variance `C(0)`.
    pub fn c0(&self) -> f64 {
        self.nugget + self.sill
    }

    pub fn cov_points(&self, a: (f64, f64), b: (f64, f64)) -> Result<f64> {
        self.cov(dist(a, b))
    }
}

pub fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    (dx * dx + dy * dy).sqrt()
}

/// Discretized areal support: the cell centers representing one
/// municipality's area.
#[derive(Debug, Clone)]
pub struct BlockSupport {
    pub member_points: Vec<(f64, f64)>,
}

impl BlockSupport {
    pub fn new(member_points: Vec<(f64, f64)>) -> Result<Self> {
        if member_points.is_empty() {
            return Err(Error::Grid("block support has no member points".into()));
        }
        Ok(BlockSupport { member_points })
    }
}

/// Block-to-point covariance: arithmetic mean of point covariances over
/// the block's member points.
pub fn cov_block_point(model: &VariogramModel, a: &BlockSupport, p: (f64, f64)) -> Result<f64> {
    let mut sum = 0.0;
    for &q in &a.member_points {
        sum += model.cov_points(q, p)?;
    }
    Ok(sum / a.member_points.len() as f64)
}

/// Block-to-block covariance: mean of point covariances over all pairs of
/// member points (full discretization, exact at grid resolution).
pub fn cov_block_block(model: &VariogramModel, a: &BlockSupport, b: &BlockSupport) -> Result<f64> {
    let mut sum = 0.0;
    for &p in &a.member_points {
        for &q in &b.member_points {
            sum += model.cov_points(p, q)?;
        }
    }
    Ok(sum / (a.member_points.len() * b.member_points.len()) as f64)
}

/// One bin of an experimental variogram table.
#[derive(Debug, Clone, Copy)]
pub struct VariogramBin {
    /// Center of the lag bin.
    pub lag: f64,
    /// Population-weighted semivariance estimate; `None` for empty bins.
    pub gamma: Option<f64>,
    pub pair_count: usize,
}

/// Population-weighted experimental variogram.
///
/// Pair weight `w_ij = n_i * n_j / (n_i + n_j)` so that municipalities with
/// large populations dominate the estimate; per bin
/// `gamma = sum w_ij (z_i - z_j)^2 / 2 / sum w_ij`.
pub fn experimental_variogram(
    samples: &[((f64, f64), f64, f64)],
    lag_width: f64,
    n_lags: usize,
) -> Result<Vec<VariogramBin>> {
    if samples.len() < 2 {
        return Err(Error::Data(format!(
            "experimental variogram needs >= 2 samples, got {}",
            samples.len()
        )));
    }
    if !(lag_width > 0.0) || n_lags == 0 {
        return Err(Error::Config("lag width and lag count must be positive".into()));
    }
    let mut wsum = vec![0.0f64; n_lags];
    let mut gsum = vec![0.0f64; n_lags];
    let mut count = vec![0usize; n_lags];
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            let (pi, zi, ni) = samples[i];
            let (pj, zj, nj) = samples[j];
            let h = dist(pi, pj);
            let bin = (h / lag_width).floor() as usize;
            if bin >= n_lags {
                continue;
            }
            let w = if ni + nj > 0.0 { ni * nj / (ni + nj) } else { 0.0 };
            wsum[bin] += w;
            gsum[bin] += w * (zi - zj) * (zi - zj) / 2.0;
            count[bin] += 1;
        }
    }
    Ok((0..n_lags)
        .map(|b| VariogramBin {
            lag: (b as f64 + 0.5) * lag_width,
            gamma: (wsum[b] > 0.0).then(|| gsum[b] / wsum[b]),
            pair_count: count[b],
        })
        .collect())
}

/// Outcome of a variogram fit.
#[derive(Debug, Clone)]
pub struct VariogramFit {
    pub model: VariogramModel,
    /// Weighted residual sum of squares over the non-empty bins.
    pub residual: f64,
    pub warning: Option<String>,
}

/// Minimum sill used when the data carry no variance at all.
pub const SILL_FLOOR: f64 = 1e-12;

/// Fits `(nugget, sill, range)` to an experimental table by weighted least
/// squares, weighting each bin by its pair count.
///
/// For a fixed range the model is linear in `(nugget, sill)`, so the fit
/// scans candidate ranges, solves the 2x2 weighted normal equations at each,
/// and polishes the best candidate by golden-section search. Negative
/// nuggets are clamped to zero and the sill re-solved.
pub fn fit_variogram(table: &[VariogramBin], structure: Structure) -> Result<VariogramFit> {
    let bins: Vec<(f64, f64, f64)> = table
        .iter()
        .filter_map(|b| b.gamma.map(|g| (b.lag, g, b.pair_count as f64)))
        .collect();
    if bins.len() < 3 {
        return Err(Error::Data(format!(
            "variogram fit needs >= 3 non-empty bins, got {}",
            bins.len()
        )));
    }

    let max_gamma = bins.iter().map(|b| b.1).fold(0.0f64, f64::max);
    if max_gamma <= 0.0 {
        // Constant field: no spatial variance to model.
        let model = VariogramModel::new(structure, 0.0, SILL_FLOOR, bins.last().unwrap().0)?;
        return Ok(VariogramFit {
            model,
            residual: 0.0,
            warning: Some("degenerate variogram table (zero variance); sill set to floor".into()),
        });
    }

    let max_lag = bins.last().unwrap().0;
    let objective = |range: f64| -> (f64, f64, f64) {
        // Weighted LS for gamma_hat ~ nugget + sill * unit(h/range).
        let (mut sw, mut sg, mut sgg, mut sy, mut sgy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(h, y, w) in &bins {
            let g = structure.unit(h / range);
            sw += w;
            sg += w * g;
            sgg += w * g * g;
            sy += w * y;
            sgy += w * g * y;
        }
        let det = sw * sgg - sg * sg;
        let (mut nugget, mut sill) = if det.abs() > 1e-12 * sw * sgg.max(1e-300) {
            let nugget = (sy * sgg - sg * sgy) / det;
            let sill = (sw * sgy - sg * sy) / det;
            (nugget, sill)
        } else {
            (0.0, if sgg > 0.0 { sgy / sgg } else { 0.0 })
        };
        if nugget < 0.0 {
            nugget = 0.0;
            sill = if sgg > 0.0 { sgy / sgg } else { 0.0 };
        }
        if sill < SILL_FLOOR {
            sill = SILL_FLOOR;
        }
        let rss: f64 = bins
            .iter()
            .map(|&(h, y, w)| {
                let e = y - nugget - sill * structure.unit(h / range);
                w * e * e
            })
            .sum();
        (rss, nugget, sill)
    };

    // Coarse scan, then golden-section polish around the best candidate.
    let lo = max_lag * 1e-3;
    let hi = max_lag * 3.0;
    let mut best = (f64::INFINITY, lo);
    let scan = 400;
    for k in 0..=scan {
        let r = lo + (hi - lo) * k as f64 / scan as f64;
        let (rss, _, _) = objective(r);
        if rss < best.0 {
            best = (rss, r);
        }
    }
    let step = (hi - lo) / scan as f64;
    let (mut a, mut b) = ((best.1 - step).max(lo), (best.1 + step).min(hi));
    let phi = 0.5 * (5.0f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if objective(c).0 <= objective(d).0 {
            b = d;
        } else {
            a = c;
        }
    }
    let range = 0.5 * (a + b);
    let (residual, nugget, sill) = objective(range);
    let warning = (sill <= SILL_FLOOR)
        .then(|| "fitted sill at floor; data may carry no spatial variance".to_string());
    Ok(VariogramFit {
        model: VariogramModel::new(structure, nugget, sill, range)?,
        residual,
        warning,
    })
}
