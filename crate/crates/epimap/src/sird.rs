//! Per-municipality time-varying SIRD estimation and forward simulation.
//!
//! Daily case counts are the only observable; recoveries and deaths are
//! approximated from a mortality hazard and a mean recovery window, the
//! time-varying rates (infection, recovery, mortality) are derived from the
//! reconstructed series, kernel-smoothed, blended toward national rates
//! through a pseudo-count, projected over the forecast horizon, and finally
//! integrated forward with an explicit daily step.
//!
//! The recovery identity `r(t) = I(t) - d(t)` together with the active-case
//! balance `I(t) = I(t-1) + i(t) - r(t) - d(t)` pins down each day as a
//! one-day fixed point: `I(t) = (I(t-1) + i(t)) / 2`, then `d`, then `r`.
//! Negative recoveries are floored at zero and flagged, with the balance
//! re-solved so the reconstruction stays self-consistent.

use crate::error::{Error, Result};

/// Compartment counts. `population()` is conserved exactly by
/// [`integrate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SirdState {
    pub susceptible: f64,
    pub infected: f64,
    pub recovered: f64,
    pub dead: f64,
}

impl SirdState {
    pub fn new(susceptible: f64, infected: f64, recovered: f64, dead: f64) -> Result<Self> {
        for (name, v) in [
            ("susceptible", susceptible),
            ("infected", infected),
            ("recovered", recovered),
            ("dead", dead),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Data(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(SirdState { susceptible, infected, recovered, dead })
    }

    pub fn population(&self) -> f64 {
        self.susceptible + self.infected + self.recovered + self.dead
    }
}

/// Mode for projecting smoothed rates over the forecast horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMode {
    /// Repeat the last known value.
    Last,
    /// Repeat the mean of the trailing `n` values.
    MeanN(usize),
    /// Extend the least-squares line over the trailing window.
    LinearExtrapolation,
}

#[derive(Debug, Clone, Copy)]
pub struct SirdConfig {
    /// Pseudo-count K blending regional toward national rates.
    pub pseudo_count: f64,
    /// Mean recovery period w in days.
    pub recovery_window: usize,
    /// Nadaraya-Watson bandwidth in days.
    pub bandwidth: f64,
    pub projection: ProjectionMode,
    /// Trailing window for linear extrapolation, days.
    pub extrapolation_window: usize,
    /// Constant national mortality hazard used when no national deaths
    /// series is available (the ingestion format carries cases only).
    pub mortality_ratio: f64,
}

impl Default for SirdConfig {
    fn default() -> Self {
        SirdConfig {
            pseudo_count: 10_000.0,
            recovery_window: 14,
            bandwidth: 10.0,
            projection: ProjectionMode::LinearExtrapolation,
            extrapolation_window: 14,
            mortality_ratio: 0.02,
        }
    }
}

/// National mortality hazard per day: `mu(t) = d(t) / I(t - w)`, zero (and
/// flagged) where the lagged active count vanishes.
pub fn national_mortality(deaths: &[f64], active: &[f64], w: usize) -> Result<(Vec<f64>, usize)> {
    if deaths.len() != active.len() {
        return Err(Error::Data("deaths and active series must be aligned".into()));
    }
    let mut flagged = 0;
    let mu = (0..deaths.len())
        .map(|t| {
            let lagged = if t >= w { active[t - w] } else { 0.0 };
            if lagged > 0.0 {
                deaths[t] / lagged
            } else {
                if deaths[t] != 0.0 {
                    flagged += 1;
                }
                0.0
            }
        })
        .collect();
    Ok((mu, flagged))
}

/// Reconstructed removal series for one region.
#[derive(Debug, Clone)]
pub struct ApproxRemovals {
    pub recoveries: Vec<f64>,
    pub deaths: Vec<f64>,
    pub active: Vec<f64>,
    /// Days where a negative recovery was floored at zero.
    pub floored: usize,
}

/// Approximates recoveries and deaths from daily new cases and a mortality
/// hazard series, solving the per-day fixed point described at module level.
pub fn approximate_recoveries_deaths(
    new_cases: &[f64],
    mu: &[f64],
    w: usize,
) -> Result<ApproxRemovals> {
    if new_cases.len() != mu.len() {
        return Err(Error::Data("cases and mortality series must be aligned".into()));
    }
    let n = new_cases.len();
    let mut recoveries = vec![0.0; n];
    let mut deaths = vec![0.0; n];
    let mut active = vec![0.0; n];
    let mut floored = 0;
    let mut prev = 0.0;
    for t in 0..n {
        let lagged = if t >= w { active[t - w] } else { 0.0 };
        let d = mu[t] * lagged;
        let mut i_t = 0.5 * (prev + new_cases[t]);
        let mut r = i_t - d;
        if r < 0.0 {
            floored += 1;
            r = 0.0;
            i_t = (prev + new_cases[t] - d).max(0.0);
        }
        deaths[t] = d;
        recoveries[t] = r;
        active[t] = i_t;
        prev = i_t;
    }
    Ok(ApproxRemovals { recoveries, deaths, active, floored })
}

/// Active cases as the running balance of new cases minus removals,
/// floored at zero (floored days are counted).
pub fn active_cases(i: &[f64], r: &[f64], d: &[f64]) -> Result<(Vec<f64>, usize)> {
    if i.len() != r.len() || i.len() != d.len() {
        return Err(Error::Data("case/recovery/death series must be aligned".into()));
    }
    let mut floored = 0;
    let mut acc = 0.0;
    let out = (0..i.len())
        .map(|t| {
            acc += i[t] - r[t] - d[t];
            if acc < 0.0 {
                floored += 1;
                acc = 0.0;
            }
            acc
        })
        .collect();
    Ok((out, floored))
}

/// Daily rate series; `None` marks days with no active cases, which the
/// smoother bridges.
#[derive(Debug, Clone)]
pub struct RateSeries {
    pub beta: Vec<Option<f64>>,
    pub gamma: Vec<Option<f64>>,
    pub delta: Vec<Option<f64>>,
}

pub fn derive_rates(i: &[f64], r: &[f64], d: &[f64], active: &[f64]) -> Result<RateSeries> {
    if [r.len(), d.len(), active.len()].iter().any(|&l| l != i.len()) {
        return Err(Error::Data("rate inputs must be aligned".into()));
    }
    let ratio = |num: &[f64], t: usize| {
        if active[t] > 0.0 {
            Some(num[t] / active[t])
        } else {
            None
        }
    };
    Ok(RateSeries {
        beta: (0..i.len()).map(|t| ratio(i, t)).collect(),
        gamma: (0..i.len()).map(|t| ratio(r, t)).collect(),
        delta: (0..i.len()).map(|t| ratio(d, t)).collect(),
    })
}

/// Nadaraya-Watson smoothing with a Gaussian kernel over the present
/// values; missing days get the kernel-weighted mean of their neighbors.
pub fn smooth(series: &[Option<f64>], bandwidth: f64) -> Result<Vec<f64>> {
    if !(bandwidth > 0.0) {
        return Err(Error::Config(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    let present: Vec<(usize, f64)> = series
        .iter()
        .enumerate()
        .filter_map(|(t, v)| v.map(|x| (t, x)))
        .collect();
    if present.is_empty() {
        return Err(Error::Data("smoothing needs at least one present value".into()));
    }
    Ok((0..series.len())
        .map(|t| {
            let mut num = 0.0;
            let mut den = 0.0;
            for &(tp, v) in &present {
                let u = (t as f64 - tp as f64) / bandwidth;
                let k = (-0.5 * u * u).exp();
                num += k * v;
                den += k;
            }
            num / den
        })
        .collect())
}

pub fn smooth_dense(series: &[f64], bandwidth: f64) -> Result<Vec<f64>> {
    let wrapped: Vec<Option<f64>> = series.iter().map(|&v| Some(v)).collect();
    smooth(&wrapped, bandwidth)
}

/// Pseudo-count blend of a regional rate toward the national rate:
/// `(K * national + n_alpha * regional) / (K + n_alpha)`.
pub fn blend(regional: f64, national: f64, pseudo_count: f64, population: f64) -> Result<f64> {
    if pseudo_count < 0.0 || population < 0.0 {
        return Err(Error::Data("pseudo-count and population must be >= 0".into()));
    }
    let total = pseudo_count + population;
    if total == 0.0 {
        return Err(Error::Data("pseudo-count and population cannot both be zero".into()));
    }
    Ok((pseudo_count * national + population * regional) / total)
}

/// Projects a smoothed rate series `horizon` days forward. Falls back to
/// `Last` (with the returned flag set) when the history is too short for
/// the requested mode. Projected rates are floored at zero.
pub fn project_rates(
    series: &[f64],
    mode: ProjectionMode,
    horizon: usize,
    extrapolation_window: usize,
) -> Result<(Vec<f64>, bool)> {
    if series.is_empty() {
        return Err(Error::Data("cannot project an empty rate series".into()));
    }
    let last = *series.last().unwrap();
    let mut fallback = false;
    let values: Vec<f64> = match mode {
        ProjectionMode::Last => vec![last.max(0.0); horizon],
        ProjectionMode::MeanN(n) => {
            if n == 0 || series.len() < n {
                fallback = true;
                vec![last.max(0.0); horizon]
            } else {
                let mean = series[series.len() - n..].iter().sum::<f64>() / n as f64;
                vec![mean.max(0.0); horizon]
            }
        }
        ProjectionMode::LinearExtrapolation => {
            if series.len() < 2 {
                fallback = true;
                vec![last.max(0.0); horizon]
            } else {
                let w = extrapolation_window.max(2).min(series.len());
                let tail = &series[series.len() - w..];
                // Closed-form least-squares line over t = 0..w-1.
                let n = w as f64;
                let sum_t = (n - 1.0) * n / 2.0;
                let sum_tt = (n - 1.0) * n * (2.0 * n - 1.0) / 6.0;
                let sum_y: f64 = tail.iter().sum();
                let sum_ty: f64 = tail.iter().enumerate().map(|(t, y)| t as f64 * y).sum();
                let det = n * sum_tt - sum_t * sum_t;
                let slope = (n * sum_ty - sum_t * sum_y) / det;
                let intercept = (sum_y - slope * sum_t) / n;
                (0..horizon)
                    .map(|h| (intercept + slope * (n + h as f64)).max(0.0))
                    .collect()
            }
        }
    };
    Ok((values, fallback))
}

/// Explicit daily-step SIRD integration.
///
/// Removal flows come from the pre-update infected count; flows are capped
/// so no compartment goes negative, and the population total is conserved
/// exactly. Returns the state after each step plus the daily new cases.
pub fn integrate(state0: SirdState, rates: &[(f64, f64, f64)]) -> Result<(Vec<SirdState>, Vec<f64>)> {
    let population = state0.population();
    if !(population > 0.0) {
        return Err(Error::Data("SIRD population must be positive".into()));
    }
    let mut state = state0;
    let mut trajectory = Vec::with_capacity(rates.len());
    let mut new_cases = Vec::with_capacity(rates.len());
    for &(beta, gamma, delta) in rates {
        if beta < 0.0 || gamma < 0.0 || delta < 0.0 {
            return Err(Error::Data("SIRD rates must be >= 0".into()));
        }
        let i_prev = state.infected;
        let new_inf = (beta * i_prev * state.susceptible / population).min(state.susceptible);
        let mut recoveries = gamma * i_prev;
        let mut deaths = delta * i_prev;
        let available = i_prev + new_inf;
        let outflow = recoveries + deaths;
        if outflow > available {
            // Scale removals so infected lands exactly on zero.
            deaths = deaths * available / outflow;
            recoveries = available - deaths;
            state.susceptible -= new_inf;
            state.infected = 0.0;
        } else {
            state.susceptible -= new_inf;
            state.infected = i_prev + new_inf - recoveries - deaths;
        }
        state.recovered += recoveries;
        state.dead += deaths;
        new_cases.push(new_inf);
        trajectory.push(state);
    }
    Ok((trajectory, new_cases))
}

/// One municipality's forecast: trailing-14-day incidence per 100k for each
/// day of the horizon.
#[derive(Debug, Clone)]
pub struct MunicipalityForecast {
    pub incidence: Vec<f64>,
    /// The SIRD pipeline failed and the last observed rate was persisted.
    pub fallback: bool,
    /// Days where the recovery identity was floored.
    pub floored: usize,
}

/// Runs the full derive -> smooth -> blend -> project -> integrate pipeline
/// for every municipality and converts predicted daily new cases into
/// trailing-14-day incidence per 100k, splicing historical and predicted
/// cases across the forecast boundary.
pub fn forecast_municipalities(
    cases: &[Vec<f64>],
    populations: &[f64],
    config: &SirdConfig,
    horizon: usize,
) -> Result<Vec<MunicipalityForecast>> {
    if cases.is_empty() || cases.len() != populations.len() {
        return Err(Error::Data("cases and populations must be aligned and non-empty".into()));
    }
    let n_days = cases[0].len();
    if n_days == 0 || cases.iter().any(|c| c.len() != n_days) {
        return Err(Error::Data("municipality case series must share one calendar".into()));
    }
    if horizon == 0 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    let w = config.recovery_window;

    // National series: aggregate cases under the same reconstruction.
    let national_cases: Vec<f64> = (0..n_days)
        .map(|t| cases.iter().map(|c| c[t]).sum())
        .collect();
    let mu = vec![config.mortality_ratio; n_days];
    let national_smoothed = smoothed_rates(&national_cases, &mu, w, config.bandwidth)?;

    let mut out = Vec::with_capacity(cases.len());
    for (series, &population) in cases.iter().zip(populations) {
        let incidence_hist = |t: usize| -> f64 {
            let lo = t.saturating_sub(13);
            let sum: f64 = series[lo..=t].iter().sum();
            sum / population * 100_000.0
        };

        if series.iter().all(|&c| c == 0.0) {
            out.push(MunicipalityForecast {
                incidence: vec![0.0; horizon],
                fallback: false,
                floored: 0,
            });
            continue;
        }

        match forecast_one(
            series,
            population,
            &mu,
            national_smoothed.as_ref(),
            config,
            horizon,
        ) {
            Ok(f) => out.push(f),
            Err(_) => {
                // Persist the last observed incidence.
                let last = incidence_hist(n_days - 1);
                out.push(MunicipalityForecast {
                    incidence: vec![last; horizon],
                    fallback: true,
                    floored: 0,
                });
            }
        }
    }
    Ok(out)
}

struct SmoothedRates {
    beta: Vec<f64>,
    gamma: Vec<f64>,
    delta: Vec<f64>,
}

fn smoothed_rates(
    cases: &[f64],
    mu: &[f64],
    w: usize,
    bandwidth: f64,
) -> Result<Option<SmoothedRates>> {
    if cases.iter().all(|&c| c == 0.0) {
        return Ok(None);
    }
    let approx = approximate_recoveries_deaths(cases, mu, w)?;
    let rates = derive_rates(cases, &approx.recoveries, &approx.deaths, &approx.active)?;
    Ok(Some(SmoothedRates {
        beta: smooth(&rates.beta, bandwidth)?,
        gamma: smooth(&rates.gamma, bandwidth)?,
        delta: smooth(&rates.delta, bandwidth)?,
    }))
}

fn forecast_one(
    series: &[f64],
    population: f64,
    mu: &[f64],
    national: Option<&SmoothedRates>,
    config: &SirdConfig,
    horizon: usize,
) -> Result<MunicipalityForecast> {
    let n_days = series.len();
    let approx = approximate_recoveries_deaths(series, mu, config.recovery_window)?;
    let rates = derive_rates(series, &approx.recoveries, &approx.deaths, &approx.active)?;
    let beta_s = smooth(&rates.beta, config.bandwidth)?;
    let gamma_s = smooth(&rates.gamma, config.bandwidth)?;
    let delta_s = smooth(&rates.delta, config.bandwidth)?;

    // Blend toward national rates day by day.
    let blend_series = |regional: &[f64], national: Option<&Vec<f64>>| -> Result<Vec<f64>> {
        match national {
            Some(nat) => regional
                .iter()
                .zip(nat)
                .map(|(&r, &n)| blend(r, n, config.pseudo_count, population))
                .collect(),
            None => Ok(regional.to_vec()),
        }
    };
    let beta_b = blend_series(&beta_s, national.map(|n| &n.beta))?;
    let gamma_b = blend_series(&gamma_s, national.map(|n| &n.gamma))?;
    let delta_b = blend_series(&delta_s, national.map(|n| &n.delta))?;

    let (beta_p, _) = project_rates(&beta_b, config.projection, horizon, config.extrapolation_window)?;
    let (gamma_p, _) =
        project_rates(&gamma_b, config.projection, horizon, config.extrapolation_window)?;
    let (delta_p, _) =
        project_rates(&delta_b, config.projection, horizon, config.extrapolation_window)?;
    let projected: Vec<(f64, f64, f64)> = (0..horizon)
        .map(|t| (beta_p[t], gamma_p[t], delta_p[t]))
        .collect();

    let infected = approx.active[n_days - 1];
    let recovered: f64 = approx.recoveries.iter().sum();
    let dead: f64 = approx.deaths.iter().sum();
    let susceptible = (population - infected - recovered - dead).max(0.0);
    let state0 = SirdState::new(susceptible, infected, recovered, dead)?;
    let (_, predicted_cases) = integrate(state0, &projected)?;

    // Trailing 14-day incidence across the historical/predicted boundary.
    let mut incidence = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        let day = n_days - 1 + k;
        let lo = day.saturating_sub(13);
        let mut sum = 0.0;
        for j in lo..=day {
            sum += if j < n_days {
                series[j]
            } else {
                predicted_cases[j - n_days]
            };
        }
        incidence.push(sum / population * 100_000.0);
    }
    Ok(MunicipalityForecast { incidence, fallback: false, floored: approx.floored })
}
