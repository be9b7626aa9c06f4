//! Simple block kriging under the Poisson model for rate data.
//!
//! Conditioning data mix point support (municipality rates assigned to
//! centroids, previously simulated cells) and block support (municipality
//! areas). The data covariance matrix combines point-to-point,
//! point-to-block and block-to-block terms; each block datum's diagonal
//! entry is augmented with its Poisson error variance, which is how varying
//! population sizes enter the system.

use crate::error::{Error, Result};
use crate::variogram::{cov_block_block, cov_block_point, BlockSupport, VariogramModel};

/// Risk variance of an areal rate datum: `sigma_r2 + mean_rate / population`.
///
/// The first term is the spatial risk component (the variogram sill); the
/// second is the Poisson error that shrinks with population size.
pub fn poisson_risk_variance(mean_rate: f64, population: f64, sigma_r2: f64) -> Result<f64> {
    if !(population >= 1.0) {
        return Err(Error::Numerical(format!(
            "population must be >= 1 for risk variance, got {population}"
        )));
    }
    if mean_rate < 0.0 {
        return Err(Error::Numerical(format!("mean rate must be >= 0, got {mean_rate}")));
    }
    Ok(sigma_r2 + mean_rate / population)
}

/// An areal conditioning datum.
#[derive(Debug, Clone)]
pub struct BlockDatum<'a> {
    pub support: &'a BlockSupport,
    /// Incidence rate over the block (per 100k).
    pub rate: f64,
    pub population: f64,
}

/// Local kriging estimate plus solver diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct KrigingEstimate {
    pub mean: f64,
    pub variance: f64,
    /// No conditioning data (or an unsalvageable system): global values used.
    pub fallback: bool,
    /// The plain factorization failed and a ridge was added.
    pub ridge: bool,
}

/// Solves the simple block kriging system for one target point.
///
/// The mean is anchored at the population-weighted global mean of the block
/// data (falling back to the mean of point values when no blocks are
/// given). The system is solved by Cholesky factorization; on
/// near-singularity a growing ridge is added to the diagonal before giving
/// up and returning the global mean and variance.
pub fn solve_block_kriging(
    target: (f64, f64),
    point_data: &[((f64, f64), f64)],
    block_data: &[BlockDatum<'_>],
    model: &VariogramModel,
) -> Result<KrigingEstimate> {
    let global_mean = global_mean_of(point_data, block_data);
    solve_with_mean(target, point_data, block_data, model, global_mean)
}

pub(crate) fn global_mean_of(point_data: &[((f64, f64), f64)], block_data: &[BlockDatum<'_>]) -> f64 {
    let pop: f64 = block_data.iter().map(|b| b.population).sum();
    if pop > 0.0 {
        block_data.iter().map(|b| b.population * b.rate).sum::<f64>() / pop
    } else if !point_data.is_empty() {
        point_data.iter().map(|p| p.1).sum::<f64>() / point_data.len() as f64
    } else {
        0.0
    }
}

pub(crate) fn solve_with_mean(
    target: (f64, f64),
    point_data: &[((f64, f64), f64)],
    block_data: &[BlockDatum<'_>],
    model: &VariogramModel,
    global_mean: f64,
) -> Result<KrigingEstimate> {
    let np = point_data.len();
    let n = np + block_data.len();
    let c0 = model.c0();
    if n == 0 {
        return Ok(KrigingEstimate { mean: global_mean, variance: c0, fallback: true, ridge: false });
    }

    let mut matrix = vec![0.0; n * n];
    let mut rhs = vec![0.0; n];
    let mut values = vec![0.0; n];
    let mut max_err: f64 = 0.0;

    for i in 0..n {
        for j in i..n {
            let c = match (i < np, j < np) {
                (true, true) => model.cov_points(point_data[i].0, point_data[j].0)?,
                (true, false) => {
                    cov_block_point(model, block_data[j - np].support, point_data[i].0)?
                }
                (false, true) => unreachable!("j >= i"),
                (false, false) => {
                    let bi = &block_data[i - np];
                    let bj = &block_data[j - np];
                    let mut c = cov_block_block(model, bi.support, bj.support)?;
                    if i == j {
                        // Poisson error variance on the block diagonal only.
                        // The sigma_r2 component of Eq-style risk variance is
                        // already carried by the covariance model itself.
                        let err = poisson_risk_variance(global_mean.max(0.0), bi.population, 0.0)?;
                        max_err = max_err.max(err);
                        c += err;
                    }
                    c
                }
            };
            matrix[i * n + j] = c;
            matrix[j * n + i] = c;
        }
        if i < np {
            rhs[i] = model.cov_points(point_data[i].0, target)?;
            values[i] = point_data[i].1;
        } else {
            rhs[i] = cov_block_point(model, block_data[i - np].support, target)?;
            values[i] = block_data[i - np].rate;
        }
    }

    let mut weights = rhs.clone();
    let ridge = match solve_spd(&mut matrix, &mut weights, n) {
        Ok(ridge) => ridge,
        Err(_) => {
            return Ok(KrigingEstimate {
                mean: global_mean,
                variance: c0,
                fallback: true,
                ridge: true,
            });
        }
    };

    let mut mean = global_mean;
    let mut reduction = 0.0;
    for i in 0..n {
        mean += weights[i] * (values[i] - global_mean);
        reduction += weights[i] * rhs[i];
    }
    let variance = (c0 - reduction).clamp(0.0, c0 + max_err);
    Ok(KrigingEstimate { mean, variance, fallback: false, ridge })
}

/// In-place Cholesky solve of `A x = b` for a symmetric positive definite
/// `A` (row-major, n x n). Retries with a growing diagonal ridge on
/// failure; returns whether a ridge was needed.
pub(crate) fn solve_spd(a: &mut [f64], b: &mut [f64], n: usize) -> Result<bool> {
    debug_assert_eq!(a.len(), n * n);
    let mean_diag = (0..n).map(|i| a[i * n + i].abs()).sum::<f64>() / n as f64;
    let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let original = a.to_vec();
    let mut jitter = 0.0;
    for attempt in 0..6 {
        if attempt > 0 {
            jitter = base * 1e-12 * 100f64.powi(attempt - 1);
            a.copy_from_slice(&original);
            for i in 0..n {
                a[i * n + i] += jitter;
            }
        }
        if cholesky_in_place(a, n) {
            // a now holds L; solve L y = b, then L^T x = y.
            let mut x = b.to_vec();
            for i in 0..n {
                let mut s = x[i];
                for k in 0..i {
                    s -= a[i * n + k] * x[k];
                }
                x[i] = s / a[i * n + i];
            }
            for i in (0..n).rev() {
                let mut s = x[i];
                for k in (i + 1)..n {
                    s -= a[k * n + i] * x[k];
                }
                x[i] = s / a[i * n + i];
            }
            b.copy_from_slice(&x);
            return Ok(jitter > 0.0);
        }
    }
    Err(Error::Numerical(format!(
        "kriging system not positive definite after ridge escalation (n = {n})"
    )))
}

/// Lower Cholesky factorization in place; returns false when the matrix is
/// not positive definite.
fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variogram::Structure;

    fn model(nugget: f64, sill: f64, range: f64) -> VariogramModel {
        VariogramModel::new(Structure::Spherical, nugget, sill, range).unwrap()
    }

    #[test]
    fn risk_variance_tabulated() {
        assert!((poisson_risk_variance(10.0, 5.0, 0.0).unwrap() - 2.0).abs() < 1e-15);
        assert!((poisson_risk_variance(0.0, 100.0, 4.0).unwrap() - 4.0).abs() < 1e-15);
        assert!((poisson_risk_variance(300.0, 1000.0, 1.5).unwrap() - 1.8).abs() < 1e-15);
        assert!(poisson_risk_variance(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn coincident_point_is_exact_interpolation() {
        let m = model(0.0, 1.0, 10.0);
        let est = solve_block_kriging((3.0, 4.0), &[((3.0, 4.0), 42.0)], &[], &m).unwrap();
        assert!((est.mean - 42.0).abs() < 1e-10);
        assert!(est.variance.abs() < 1e-10);
        assert!(!est.fallback);
    }

    #[test]
    fn data_beyond_range_returns_global_mean_and_sill() {
        let m = model(0.0, 1.0, 10.0);
        let support = BlockSupport::new(vec![(100.0, 100.0), (102.0, 100.0)]).unwrap();
        let blocks = [BlockDatum { support: &support, rate: 7.0, population: 1000.0 }];
        let est =
            solve_block_kriging((0.0, 0.0), &[((50.0, 0.0), 3.0)], &blocks, &m).unwrap();
        // All covariances to the target vanish, so weights are zero.
        assert!((est.mean - 7.0).abs() < 1e-12, "global mean is the block mean");
        assert!((est.variance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_conditioning_set_flagged() {
        let m = model(0.2, 1.0, 10.0);
        let est = solve_block_kriging((0.0, 0.0), &[], &[], &m).unwrap();
        assert!(est.fallback);
        assert_eq!(est.variance, m.c0());
    }

    #[test]
    fn matches_hand_assembled_dense_solve() {
        // 2 points + 1 two-cell block, solved independently by
        // Gauss-Jordan elimination on a hand-assembled system.
        let m = model(0.1, 2.0, 12.0);
        let support = BlockSupport::new(vec![(2.0, 2.0), (4.0, 2.0)]).unwrap();
        let points = [((1.0, 0.0), 5.0), ((6.0, 1.0), 9.0)];
        let blocks = [BlockDatum { support: &support, rate: 6.5, population: 250.0 }];
        let target = (3.0, 1.0);
        let est = solve_block_kriging(target, &points, &blocks, &m).unwrap();

        let gmean = 6.5;
        let cov = |a: (f64, f64), b: (f64, f64)| m.cov_points(a, b).unwrap();
        let cbp = |p: (f64, f64)| {
            0.5 * (cov((2.0, 2.0), p) + cov((4.0, 2.0), p))
        };
        let cbb = {
            let pts = [(2.0, 2.0), (4.0, 2.0)];
            let mut s = 0.0;
            for a in pts {
                for b in pts {
                    s += cov(a, b);
                }
            }
            s / 4.0
        };
        let err = gmean / 250.0;
        let mut a = [
            [cov(points[0].0, points[0].0), cov(points[0].0, points[1].0), cbp(points[0].0)],
            [cov(points[1].0, points[0].0), cov(points[1].0, points[1].0), cbp(points[1].0)],
            [cbp(points[0].0), cbp(points[1].0), cbb + err],
        ];
        let mut rhs = [cov(points[0].0, target), cov(points[1].0, target), cbp(target)];
        let k = rhs;
        // Gauss-Jordan with partial pivoting.
        for col in 0..3 {
            let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            rhs.swap(col, piv);
            let d = a[col][col];
            for x in a[col].iter_mut() {
                *x /= d;
            }
            rhs[col] /= d;
            for r in 0..3 {
                if r != col {
                    let f = a[r][col];
                    for c in 0..3 {
                        a[r][c] -= f * a[col][c];
                    }
                    rhs[r] -= f * rhs[col];
                }
            }
        }
        let z = [5.0, 9.0, 6.5];
        let mean = gmean + (0..3).map(|i| rhs[i] * (z[i] - gmean)).sum::<f64>();
        let var = m.c0() - (0..3).map(|i| rhs[i] * k[i]).sum::<f64>();
        assert!((est.mean - mean).abs() < 1e-8, "{} vs {mean}", est.mean);
        assert!((est.variance - var).abs() < 1e-8, "{} vs {var}", est.variance);
    }
}
