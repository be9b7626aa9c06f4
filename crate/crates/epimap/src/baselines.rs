//! Per-cell ARMA(p, q) and panel VAR(p) forecasters.
//!
//! ARMA estimation is the two-stage regression (long-AR residual proxy,
//! then least squares on lagged values and lagged residuals); VAR is joint
//! least squares over all equations, optionally ridge-regularized. Both
//! forecast by iterating one-step predictions with future innovations set
//! to zero, clamping negative values only at emission.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Fitted cell-level ARMA model, carrying the recent observations and
/// residuals it needs to forecast.
#[derive(Debug, Clone)]
pub struct ArmaModel {
    pub p: usize,
    pub q: usize,
    pub intercept: f64,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    /// Last `p` observations, oldest first.
    pub recent_values: Vec<f64>,
    /// Last `q` in-sample residuals, oldest first.
    pub recent_residuals: Vec<f64>,
    /// In-sample residual series from the second-stage regression.
    pub residuals: Vec<f64>,
    /// Constant-series fallback: all AR/MA coefficients zeroed.
    pub constant_fallback: bool,
}

fn solve_least_squares(x: DMatrix<f64>, y: DVector<f64>) -> Result<DVector<f64>> {
    let svd = x.svd(true, true);
    svd.solve(&y, 1e-12)
        .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))
}

pub fn fit_arma(series: &[f64], p: usize, q: usize) -> Result<ArmaModel> {
    if p < 1 {
        return Err(Error::Config("ARMA requires p >= 1".into()));
    }
    let min_len = 3 * (p + q) + 10;
    if series.len() < min_len {
        return Err(Error::Data(format!(
            "series of length {} too short for ARMA({p},{q}); need >= {min_len}",
            series.len()
        )));
    }

    let spread = series.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        - series.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if spread <= 1e-12 * (1.0 + series[0].abs()) {
        return Ok(ArmaModel {
            p,
            q,
            intercept: series[series.len() - 1],
            ar: vec![0.0; p],
            ma: vec![0.0; q],
            recent_values: series[series.len() - p..].to_vec(),
            recent_residuals: vec![0.0; q],
            residuals: vec![0.0; series.len()],
            constant_fallback: true,
        });
    }

    // Stage 1: long AR to proxy the innovation series.
    let long = (2 * (p + q) + 2).min(series.len() / 4).max(p);
    let rows = series.len() - long;
    let mut x = DMatrix::zeros(rows, long + 1);
    let mut y = DVector::zeros(rows);
    for t in long..series.len() {
        let r = t - long;
        x[(r, 0)] = 1.0;
        for i in 1..=long {
            x[(r, i)] = series[t - i];
        }
        y[r] = series[t];
    }
    let beta = solve_least_squares(x, y)?;
    let mut eps = vec![0.0; series.len()];
    for t in long..series.len() {
        let mut pred = beta[0];
        for i in 1..=long {
            pred += beta[i] * series[t - i];
        }
        eps[t] = series[t] - pred;
    }

    // Stage 2: regression on p lagged values and q lagged residuals.
    let start = (long + q).max(p);
    let rows = series.len() - start;
    if rows < p + q + 2 {
        return Err(Error::Data("not enough rows for the second-stage regression".into()));
    }
    let mut x = DMatrix::zeros(rows, 1 + p + q);
    let mut y = DVector::zeros(rows);
    for t in start..series.len() {
        let r = t - start;
        x[(r, 0)] = 1.0;
        for i in 1..=p {
            x[(r, i)] = series[t - i];
        }
        for j in 1..=q {
            x[(r, p + j)] = eps[t - j];
        }
        y[r] = series[t];
    }
    let beta = solve_least_squares(x, y)?;
    let intercept = beta[0];
    let ar: Vec<f64> = (0..p).map(|i| beta[1 + i]).collect();
    let ma: Vec<f64> = (0..q).map(|j| beta[1 + p + j]).collect();

    let mut residuals = vec![0.0; series.len()];
    for t in start..series.len() {
        let mut pred = intercept;
        for i in 1..=p {
            pred += ar[i - 1] * series[t - i];
        }
        for j in 1..=q {
            pred += ma[j - 1] * residuals[t - j];
        }
        residuals[t] = series[t] - pred;
    }

    Ok(ArmaModel {
        p,
        q,
        intercept,
        ar,
        ma,
        recent_values: series[series.len() - p..].to_vec(),
        recent_residuals: if q > 0 { residuals[series.len() - q..].to_vec() } else { vec![] },
        residuals,
        constant_fallback: false,
    })
}

/// Iterated one-step forecasts with future innovations set to zero;
/// negative values are clamped at emission only.
pub fn forecast_arma(model: &ArmaModel, horizon: usize) -> Vec<f64> {
    let mut values = model.recent_values.clone();
    let mut eps = model.recent_residuals.clone();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let mut pred = model.intercept;
        for i in 1..=model.p {
            pred += model.ar[i - 1] * values[values.len() - i];
        }
        for j in 1..=model.q.min(eps.len()) {
            pred += model.ma[j - 1] * eps[eps.len() - j];
        }
        values.push(pred);
        eps.push(0.0);
        out.push(pred.max(0.0));
    }
    out
}

/// Forecasts with a fitted model's coefficients from the tail of an
/// arbitrary series: in-sample residuals are reconstructed under the model
/// first, so a cached fit can be reused as new observations arrive.
pub fn forecast_arma_from(model: &ArmaModel, series: &[f64], horizon: usize) -> Vec<f64> {
    let (p, q) = (model.p, model.q);
    let mut eps = vec![0.0; series.len()];
    for t in p..series.len() {
        let mut pred = model.intercept;
        for i in 1..=p {
            pred += model.ar[i - 1] * series[t - i];
        }
        for j in 1..=q.min(t) {
            pred += model.ma[j - 1] * eps[t - j];
        }
        eps[t] = series[t] - pred;
    }
    let tail = ArmaModel {
        recent_values: series[series.len().saturating_sub(p)..].to_vec(),
        recent_residuals: if q > 0 { eps[series.len().saturating_sub(q)..].to_vec() } else { vec![] },
        residuals: vec![],
        ..model.clone()
    };
    forecast_arma(&tail, horizon)
}

/// Panel vector autoregression with shared lag matrices.
#[derive(Debug, Clone)]
pub struct VarModel {
    pub p: usize,
    pub n_vars: usize,
    pub intercept: Vec<f64>,
    /// `lags[i]` is the NxN matrix for lag i+1, row-major by equation.
    pub lags: Vec<Vec<f64>>,
    pub ridge: f64,
}

/// Joint least squares over all equations.
///
/// With `ridge > 0` the predictors are centered and every lag coefficient
/// is penalized (the intercept is recovered afterwards and never
/// penalized). When the lag design is wider than the number of
/// observations, the solve switches to the dual (Gram) form, which is
/// algebraically identical and much cheaper at desk scale.
pub fn fit_var(panel: &[Vec<f64>], p: usize, ridge: f64) -> Result<VarModel> {
    fit_var_segments(&[panel], p, ridge)
}

/// [`fit_var`] over several independent trajectory segments: lag/target
/// pairs never straddle a segment boundary.
pub fn fit_var_segments(segments: &[&[Vec<f64>]], p: usize, ridge: f64) -> Result<VarModel> {
    if p < 1 {
        return Err(Error::Config("VAR requires p >= 1".into()));
    }
    let t_obs: usize = segments.iter().map(|s| s.len()).sum();
    if t_obs == 0 {
        return Err(Error::Data("empty panel".into()));
    }
    let n = segments
        .iter()
        .find_map(|s| s.first())
        .map(|row| row.len())
        .unwrap_or(0);
    if n == 0 || segments.iter().any(|s| s.iter().any(|row| row.len() != n)) {
        return Err(Error::Data("panel rows must share one width".into()));
    }
    if ridge < 0.0 {
        return Err(Error::Config("ridge must be >= 0".into()));
    }
    if ridge == 0.0 && t_obs < n * p + p + 5 {
        return Err(Error::Data(format!(
            "{t_obs} observations insufficient for an unregularized VAR({p}) on {n} cells; \
             need >= {} or ridge > 0",
            n * p + p + 5
        )));
    }
    let rows: usize = segments.iter().map(|s| s.len().saturating_sub(p)).sum();
    let d = n * p;
    if rows == 0 {
        return Err(Error::Data("no regression rows after lagging".into()));
    }

    // Design without intercept; both solves center the data instead.
    let mut x = DMatrix::zeros(rows, d);
    let mut y = DMatrix::zeros(rows, n);
    let mut r = 0;
    for panel in segments {
        for t in p..panel.len() {
            for lag in 1..=p {
                for v in 0..n {
                    x[(r, (lag - 1) * n + v)] = panel[t - lag][v];
                }
            }
            for v in 0..n {
                y[(r, v)] = panel[t][v];
            }
            r += 1;
        }
    }
    let x_mean = x.row_mean();
    let y_mean = y.row_mean();
    let xc = DMatrix::from_fn(rows, d, |r, c| x[(r, c)] - x_mean[c]);
    let yc = DMatrix::from_fn(rows, n, |r, c| y[(r, c)] - y_mean[c]);

    let coefs: DMatrix<f64> = if ridge == 0.0 {
        let svd = xc.clone().svd(true, true);
        let tol = 1e-10 * svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
        if rank < d {
            return Err(Error::Numerical(format!(
                "VAR design is rank deficient (rank {rank} < {d}); refit with ridge > 0"
            )));
        }
        svd.solve(&yc, 1e-12)
            .map_err(|e| Error::Numerical(format!("VAR solve failed: {e}")))?
    } else if d <= rows {
        let mut gram = xc.transpose() * &xc;
        for i in 0..d {
            gram[(i, i)] += ridge;
        }
        let rhs = xc.transpose() * &yc;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Numerical("ridge normal equations not SPD".into()))?;
        chol.solve(&rhs)
    } else {
        // Dual form: coefs = Xc^T (Xc Xc^T + ridge I)^-1 Yc.
        let mut gram = &xc * xc.transpose();
        for i in 0..rows {
            gram[(i, i)] += ridge;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Numerical("dual ridge system not SPD".into()))?;
        let alpha = chol.solve(&yc);
        xc.transpose() * alpha
    };

    // coefs is d x n: column u holds equation u's coefficients.
    let mut lags = vec![vec![0.0; n * n]; p];
    for lag in 0..p {
        for u in 0..n {
            for v in 0..n {
                lags[lag][u * n + v] = coefs[(lag * n + v, u)];
            }
        }
    }
    let mut intercept = vec![0.0; n];
    for u in 0..n {
        let mut k = y_mean[u];
        for c in 0..d {
            k -= coefs[(c, u)] * x_mean[c];
        }
        intercept[u] = k;
    }
    Ok(VarModel { p, n_vars: n, intercept, lags, ridge })
}

/// Iterated VAR forecasts from the most recent `p` (or more) panel rows.
pub fn forecast_var(model: &VarModel, recent: &[Vec<f64>], horizon: usize) -> Result<Vec<Vec<f64>>> {
    if recent.len() < model.p {
        return Err(Error::Data(format!(
            "need at least {} recent rows, got {}",
            model.p,
            recent.len()
        )));
    }
    let n = model.n_vars;
    if recent.iter().any(|r| r.len() != n) {
        return Err(Error::Shape(format!("recent rows must have width {n}")));
    }
    let mut history: Vec<Vec<f64>> = recent[recent.len() - model.p..].to_vec();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let mut next = model.intercept.clone();
        for lag in 1..=model.p {
            let row = &history[history.len() - lag];
            let a = &model.lags[lag - 1];
            for u in 0..n {
                let mut acc = 0.0;
                for v in 0..n {
                    acc += a[u * n + v] * row[v];
                }
                next[u] += acc;
            }
        }
        history.push(next.clone());
        out.push(next.into_iter().map(|z| z.max(0.0)).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ar1_recovery_noise_free() {
        let mut z = vec![100.0];
        for t in 1..200 {
            z.push(0.5 * z[t - 1]);
        }
        let m = fit_arma(&z, 1, 0).unwrap();
        assert!((m.ar[0] - 0.5).abs() < 1e-6, "phi {}", m.ar[0]);
        assert!(m.intercept.abs() < 1e-6, "k {}", m.intercept);
    }

    #[test]
    fn constant_series_forecasts_constant() {
        let z = vec![7.0; 60];
        let m = fit_arma(&z, 2, 1).unwrap();
        assert!(m.constant_fallback);
        let f = forecast_arma(&m, 5);
        assert!(f.iter().all(|&v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn paper_order_accepted_on_synthetic_panel() {
        // p = 7, q = 1 on a stochastic stationary series.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut z = vec![50.0; 8];
        for t in 8..400 {
            let noise: f64 = rng.gen_range(-1.0..1.0);
            z.push(10.0 + 0.6 * z[t - 1] + 0.2 * z[t - 7] + noise);
        }
        let m = fit_arma(&z, 7, 1).unwrap();
        assert_eq!(m.ar.len(), 7);
        assert_eq!(m.ma.len(), 1);
        let f = forecast_arma(&m, 10);
        assert_eq!(f.len(), 10);
        assert!(f.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn forecast_iterates_by_hand() {
        let m = ArmaModel {
            p: 1,
            q: 0,
            intercept: 0.0,
            ar: vec![0.5],
            ma: vec![],
            recent_values: vec![8.0],
            recent_residuals: vec![],
            residuals: vec![],
            constant_fallback: false,
        };
        assert_eq!(forecast_arma(&m, 3), vec![4.0, 2.0, 1.0]);

        let c = ArmaModel { intercept: 3.0, ar: vec![0.0], ..m.clone() };
        assert_eq!(forecast_arma(&c, 4), vec![3.0; 4]);
    }

    #[test]
    fn one_step_forecast_is_regression_prediction() {
        let mut z = vec![10.0, 20.0];
        for t in 2..120 {
            z.push(1.0 + 0.4 * z[t - 1] + 0.3 * z[t - 2]);
        }
        let m = fit_arma(&z, 2, 0).unwrap();
        let f = forecast_arma(&m, 1);
        let expect = m.intercept + m.ar[0] * z[z.len() - 1] + m.ar[1] * z[z.len() - 2];
        assert!((f[0] - expect.max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn intercept_shift_leaves_residuals_unchanged() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut z = vec![5.0, 6.0];
        for t in 2..150 {
            let noise: f64 = rng.gen_range(-0.5..0.5);
            z.push(2.0 + 0.5 * z[t - 1] - 0.2 * z[t - 2] + noise);
        }
        let shifted: Vec<f64> = z.iter().map(|v| v + 25.0).collect();
        let a = fit_arma(&z, 2, 0).unwrap();
        let b = fit_arma(&shifted, 2, 0).unwrap();
        for (ra, rb) in a.residuals.iter().zip(&b.residuals) {
            assert!((ra - rb).abs() < 1e-8);
        }
    }

    #[test]
    fn var_recovers_known_system() {
        // z(t) = A z(t-1), A = [[0.5, 0.1], [0.0, 0.4]].
        let a = [[0.5, 0.1], [0.0, 0.4]];
        let mut panel = vec![vec![30.0, 20.0]];
        for t in 1..300 {
            let prev = &panel[t - 1];
            panel.push(vec![
                a[0][0] * prev[0] + a[0][1] * prev[1],
                a[1][0] * prev[0] + a[1][1] * prev[1],
            ]);
        }
        let m = fit_var(&panel, 1, 0.0).unwrap();
        for u in 0..2 {
            for v in 0..2 {
                assert!(
                    (m.lags[0][u * 2 + v] - a[u][v]).abs() < 1e-6,
                    "A[{u}][{v}] = {}",
                    m.lags[0][u * 2 + v]
                );
            }
        }
        assert!(m.intercept.iter().all(|k| k.abs() < 1e-6));

        // Forecast matches hand iteration.
        let f = forecast_var(&m, &panel[panel.len() - 1..], 2).unwrap();
        let last = &panel[panel.len() - 1];
        let step1 = [0.5 * last[0] + 0.1 * last[1], 0.4 * last[1]];
        let step2 = [0.5 * step1[0] + 0.1 * step1[1], 0.4 * step1[1]];
        assert!((f[0][0] - step1[0]).abs() < 1e-9);
        assert!((f[1][1] - step2[1]).abs() < 1e-9);
    }

    #[test]
    fn var_identity_dynamics_recovered() {
        // Persistence segments: within each segment z(t) = z(t-1) exactly,
        // and the segment levels span R^3, so A(1) = I is the unique fit.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let segments: Vec<Vec<Vec<f64>>> = (0..6)
            .map(|_| {
                let row: Vec<f64> = (0..3).map(|_| rng.gen_range(1.0..10.0)).collect();
                vec![row.clone(), row.clone(), row]
            })
            .collect();
        let refs: Vec<&[Vec<f64>]> = segments.iter().map(|s| s.as_slice()).collect();
        let m = fit_var_segments(&refs, 1, 0.0).unwrap();
        for u in 0..3 {
            for v in 0..3 {
                let expect = if u == v { 1.0 } else { 0.0 };
                assert!(
                    (m.lags[0][u * 3 + v] - expect).abs() < 1e-6,
                    "A[{u}][{v}] = {}",
                    m.lags[0][u * 3 + v]
                );
            }
            assert!(m.intercept[u].abs() < 1e-6);
        }
    }

    #[test]
    fn rank_deficient_var_advises_ridge() {
        // A constant panel has no variation in the lag design.
        let panel = vec![vec![3.0, 5.0]; 40];
        let err = fit_var(&panel, 1, 0.0).unwrap_err();
        assert!(err.to_string().contains("ridge"), "{err}");
        // The advised retry succeeds.
        assert!(fit_var(&panel, 1, 1e-3).is_ok());
    }

    #[test]
    fn paper_var_order_accepted() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut panel: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.gen_range(5.0..15.0); 3]).collect();
        for t in 4..90 {
            let mut row = Vec::with_capacity(3);
            for v in 0..3 {
                let noise: f64 = rng.gen_range(-0.3..0.3);
                row.push(1.0 + 0.4 * panel[t - 1][v] + 0.2 * panel[t - 4][(v + 1) % 3] + noise);
            }
            panel.push(row);
        }
        let m = fit_var(&panel, 4, 1e-3).unwrap();
        assert_eq!(m.lags.len(), 4);
        let f = forecast_var(&m, &panel[panel.len() - 4..], 10).unwrap();
        assert_eq!(f.len(), 10);
        assert!(f.iter().flatten().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn zero_matrices_forecast_zero_and_identity_repeats() {
        let zero = VarModel {
            p: 1,
            n_vars: 2,
            intercept: vec![0.0, 0.0],
            lags: vec![vec![0.0; 4]],
            ridge: 0.0,
        };
        let f = forecast_var(&zero, &[vec![9.0, 4.0]], 3).unwrap();
        assert!(f.iter().all(|r| r.iter().all(|&v| v == 0.0)));

        let ident = VarModel {
            p: 1,
            n_vars: 2,
            intercept: vec![0.0, 0.0],
            lags: vec![vec![1.0, 0.0, 0.0, 1.0]],
            ridge: 0.0,
        };
        let f = forecast_var(&ident, &[vec![9.0, 4.0]], 4).unwrap();
        for row in f {
            assert_eq!(row, vec![9.0, 4.0]);
        }
    }

    #[test]
    fn decoupled_var_matches_per_cell_arma() {
        // Two independent, slowly mixing AR(1) processes, noise-free. The
        // coefficients stay near 1 so the lag columns keep variation over
        // the sample and both fits stay well conditioned.
        let mut panel = vec![vec![40.0, 25.0]];
        for t in 1..60 {
            let prev = &panel[t - 1];
            panel.push(vec![2.0 + 0.9 * prev[0], 1.0 + 0.8 * prev[1]]);
        }
        let var = fit_var(&panel, 1, 0.0).unwrap();
        let vf = forecast_var(&var, &panel[panel.len() - 1..], 3).unwrap();
        for cell in 0..2 {
            let series: Vec<f64> = panel.iter().map(|r| r[cell]).collect();
            let arma = fit_arma(&series, 1, 0).unwrap();
            let af = forecast_arma(&arma, 3);
            for t in 0..3 {
                assert!(
                    (vf[t][cell] - af[t]).abs() < 1e-8,
                    "cell {cell} step {t}: {} vs {}",
                    vf[t][cell],
                    af[t]
                );
            }
        }
    }

    #[test]
    fn refit_on_own_output_is_fixed_point() {
        // Fit, simulate noise-free from the fit, refit: coefficients agree.
        // Complex AR roots keep the trajectory oscillating instead of
        // collapsing onto its mean, which would starve the refit of rank.
        let mut z = vec![30.0, 10.0];
        for t in 2..60 {
            z.push(4.0 + 1.6 * z[t - 1] - 0.81 * z[t - 2]);
        }
        let first = fit_arma(&z, 2, 0).unwrap();
        assert!((first.ar[0] - 1.6).abs() < 1e-6 && (first.ar[1] + 0.81).abs() < 1e-6);
        let mut sim = z.clone();
        for _ in 0..40 {
            let n = sim.len();
            sim.push(first.intercept + first.ar[0] * sim[n - 1] + first.ar[1] * sim[n - 2]);
        }
        let second = fit_arma(&sim[sim.len() - 60..], 2, 0).unwrap();
        assert!((first.ar[0] - second.ar[0]).abs() < 1e-6);
        assert!((first.ar[1] - second.ar[1]).abs() < 1e-6);
        assert!((first.intercept - second.intercept).abs() < 1e-4);
    }
}
