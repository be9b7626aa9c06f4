//! Error metrics and the rolling-origin backtesting harness.
//!
//! The harness slides the forecast origin forward one day at a time. For a
//! target day `t + T` the forecaster only ever sees data through day `t`:
//! every accessor on [`DataWindow`] enforces that limit and returns a
//! leakage error beyond it, which the harness treats as rejection of the
//! whole run.

use chrono::NaiveDate;
use rayon::prelude::*;

use crate::baselines::{fit_arma, fit_var, forecast_arma_from, forecast_var, VarModel};
use crate::dss::{summarize, BlockSimulator};
use crate::error::{Error, Result};
use crate::grid::{IncidenceField, NODATA};
use crate::sird::{forecast_municipalities, SirdConfig};
use crate::stconv::RegionEnsemble;

/// Root mean square error over land cells.
pub fn rmse(truth: &IncidenceField, pred: &IncidenceField) -> Result<f64> {
    check_grids(truth, pred)?;
    let cells = truth.grid.land_cells();
    let sum: f64 = cells
        .iter()
        .map(|&c| {
            let d = truth.values[c] - pred.values[c];
            d * d
        })
        .sum();
    Ok((sum / cells.len() as f64).sqrt())
}

/// Symmetric mean absolute percentage error over land cells, in [0, 2].
/// Cells where both values are zero contribute zero.
pub fn smape(truth: &IncidenceField, pred: &IncidenceField) -> Result<f64> {
    check_grids(truth, pred)?;
    let cells = truth.grid.land_cells();
    let sum: f64 = cells
        .iter()
        .map(|&c| smape_term(truth.values[c], pred.values[c]))
        .sum();
    Ok(sum / cells.len() as f64)
}

pub fn smape_term(truth: f64, pred: f64) -> f64 {
    if truth == 0.0 && pred == 0.0 {
        0.0
    } else {
        2.0 * (truth - pred).abs() / (truth + pred)
    }
}

fn check_grids(truth: &IncidenceField, pred: &IncidenceField) -> Result<()> {
    if !truth.same_grid(pred) {
        return Err(Error::Data("metric fields do not share a grid".into()));
    }
    Ok(())
}

/// Per-cell error rasters: absolute error and the sMAPE term.
pub fn error_fields(
    truth: &IncidenceField,
    pred: &IncidenceField,
) -> Result<(IncidenceField, IncidenceField)> {
    check_grids(truth, pred)?;
    let mut abs = IncidenceField::filled(truth.grid.clone(), truth.date, 0.0);
    let mut sm = IncidenceField::filled(truth.grid.clone(), truth.date, 0.0);
    for &c in truth.grid.land_cells() {
        abs.values[c] = (truth.values[c] - pred.values[c]).abs();
        sm.values[c] = smape_term(truth.values[c], pred.values[c]);
    }
    Ok((abs, sm))
}

#[derive(Debug, Clone)]
pub struct DailyScore {
    pub date: NaiveDate,
    pub model: String,
    pub horizon: usize,
    pub rmse: f64,
    pub smape: f64,
}

/// Mean and sample standard deviation over the test days, one row per
/// (model, horizon).
#[derive(Debug, Clone)]
pub struct ScoreSummary {
    pub model: String,
    pub horizon: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub smape_mean: f64,
    pub smape_std: f64,
}

pub fn summarize_scores(model: &str, horizon: usize, scores: &[DailyScore]) -> ScoreSummary {
    let stat = |get: fn(&DailyScore) -> f64| -> (f64, f64) {
        let n = scores.len() as f64;
        let mean = scores.iter().map(get).sum::<f64>() / n;
        let var = if scores.len() > 1 {
            scores.iter().map(|s| (get(s) - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    let (rmse_mean, rmse_std) = stat(|s| s.rmse);
    let (smape_mean, smape_std) = stat(|s| s.smape);
    ScoreSummary {
        model: model.to_string(),
        horizon,
        rmse_mean,
        rmse_std,
        smape_mean,
        smape_std,
    }
}

/// Read-only view of all data up to (and including) one day.
pub struct DataWindow<'a> {
    fields: &'a [IncidenceField],
    cases: &'a [Vec<f64>],
    populations: &'a [f64],
    limit: usize,
}

impl<'a> DataWindow<'a> {
    pub fn new(
        fields: &'a [IncidenceField],
        cases: &'a [Vec<f64>],
        populations: &'a [f64],
        limit: usize,
    ) -> Self {
        DataWindow { fields, cases, populations, limit }
    }

    /// Index of the last visible day (the forecast origin).
    pub fn limit(&self) -> usize {
        self.limit
    }

    fn guard(&self, day: usize) -> Result<()> {
        if day > self.limit {
            return Err(Error::Leakage { requested: day, limit: self.limit });
        }
        Ok(())
    }

    pub fn field(&self, day: usize) -> Result<&IncidenceField> {
        self.guard(day)?;
        Ok(&self.fields[day])
    }

    /// All visible fields, oldest first.
    pub fn fields_through_limit(&self) -> &[IncidenceField] {
        &self.fields[..=self.limit]
    }

    pub fn n_municipalities(&self) -> usize {
        self.cases.len()
    }

    pub fn populations(&self) -> &[f64] {
        self.populations
    }

    /// One municipality's daily new cases through the limit.
    pub fn cases_through_limit(&self, municipality: usize) -> &[f64] {
        &self.cases[municipality][..=self.limit]
    }

    pub fn cases_at(&self, municipality: usize, day: usize) -> Result<f64> {
        self.guard(day)?;
        Ok(self.cases[municipality][day])
    }
}

/// A forecaster under evaluation. `warm_up` runs once with the initial
/// training window; `predict` must emit the field for the day `horizon`
/// days past the window limit. Stateful models may fine-tune inside
/// `predict` using visible data only.
pub trait Forecaster {
    fn name(&self) -> &str;

    fn warm_up(&mut self, _window: &DataWindow) -> Result<()> {
        Ok(())
    }

    fn predict(
        &mut self,
        window: &DataWindow,
        target_date: NaiveDate,
        horizon: usize,
    ) -> Result<IncidenceField>;
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub horizon: usize,
    /// Days reserved for initial training; the first scored target is the
    /// first day after the warmup window.
    pub warmup_days: usize,
}

/// Runs the rolling-origin protocol and scores every test day against the
/// gold fields. Any leakage attempt by the forecaster aborts the run.
pub fn rolling_origin(
    forecaster: &mut dyn Forecaster,
    gold: &[IncidenceField],
    cases: &[Vec<f64>],
    populations: &[f64],
    config: &EvalConfig,
) -> Result<(Vec<DailyScore>, ScoreSummary)> {
    let (scores, _, summary) =
        rolling_origin_with_predictions(forecaster, gold, cases, populations, config)?;
    Ok((scores, summary))
}

/// [`rolling_origin`] variant that also returns the per-day predictions
/// (for raster emission).
pub fn rolling_origin_with_predictions(
    forecaster: &mut dyn Forecaster,
    gold: &[IncidenceField],
    cases: &[Vec<f64>],
    populations: &[f64],
    config: &EvalConfig,
) -> Result<(Vec<DailyScore>, Vec<IncidenceField>, ScoreSummary)> {
    let horizon = config.horizon;
    if horizon == 0 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    if config.warmup_days < horizon || config.warmup_days >= gold.len() {
        return Err(Error::Config(format!(
            "warmup of {} days must cover the horizon {} and leave test days in {} total",
            config.warmup_days,
            horizon,
            gold.len()
        )));
    }
    let warm = DataWindow::new(gold, cases, populations, config.warmup_days - 1);
    forecaster.warm_up(&warm)?;

    let mut scores = Vec::new();
    let mut predictions = Vec::new();
    for target in config.warmup_days..gold.len() {
        let origin = target - horizon;
        let window = DataWindow::new(gold, cases, populations, origin);
        let truth = &gold[target];
        let pred = forecaster.predict(&window, truth.date, horizon)?;
        if !pred.same_grid(truth) {
            return Err(Error::Data(format!(
                "forecaster {} returned a mismatched grid",
                forecaster.name()
            )));
        }
        scores.push(DailyScore {
            date: truth.date,
            model: forecaster.name().to_string(),
            horizon,
            rmse: rmse(truth, &pred)?,
            smape: smape(truth, &pred)?,
        });
        predictions.push(pred);
    }
    let summary = summarize_scores(forecaster.name(), horizon, &scores);
    Ok((scores, predictions, summary))
}

/// Repeats the field at the forecast origin.
pub struct PersistenceForecaster;

impl Forecaster for PersistenceForecaster {
    fn name(&self) -> &str {
        "persistence"
    }

    fn predict(
        &mut self,
        window: &DataWindow,
        target_date: NaiveDate,
        _horizon: usize,
    ) -> Result<IncidenceField> {
        let mut field = window.field(window.limit())?.clone();
        field.date = target_date;
        Ok(field)
    }
}

/// Independent ARMA(p, q) per land cell, refit at a configurable cadence.
pub struct ArmaForecaster {
    pub p: usize,
    pub q: usize,
    /// Refit every k origins; between refits the cached coefficients are
    /// reused with the latest observations.
    pub refit_every: usize,
    cache: Option<(usize, Vec<crate::baselines::ArmaModel>)>,
}

impl ArmaForecaster {
    pub fn new(p: usize, q: usize, refit_every: usize) -> Self {
        ArmaForecaster { p, q, refit_every: refit_every.max(1), cache: None }
    }
}

impl Forecaster for ArmaForecaster {
    fn name(&self) -> &str {
        "arma"
    }

    fn predict(
        &mut self,
        window: &DataWindow,
        target_date: NaiveDate,
        horizon: usize,
    ) -> Result<IncidenceField> {
        let fields = window.fields_through_limit();
        let grid = fields[0].grid.clone();
        let cells = grid.land_cells();
        let series_of = |cell: usize| -> Vec<f64> {
            fields.iter().map(|f| f.values[cell]).collect()
        };

        let refit = match &self.cache {
            Some((day, _)) => window.limit() >= day + self.refit_every,
            None => true,
        };
        if refit {
            let models: Result<Vec<_>> = cells
                .par_iter()
                .map(|&cell| fit_arma(&series_of(cell), self.p, self.q))
                .collect();
            self.cache = Some((window.limit(), models?));
        }
        let (_, models) = self.cache.as_ref().unwrap();

        let mut field = IncidenceField::filled(grid.clone(), target_date, 0.0);
        let predictions: Vec<f64> = cells
            .par_iter()
            .zip(models.par_iter())
            .map(|(&cell, model)| {
                let series = series_of(cell);
                let fc = forecast_arma_from(model, &series, horizon);
                fc[horizon - 1]
            })
            .collect();
        for (&cell, &v) in cells.iter().zip(&predictions) {
            field.values[cell] = v;
        }
        Ok(field)
    }
}

/// Panel VAR over all land cells.
pub struct VarForecaster {
    pub p: usize,
    pub ridge: f64,
    pub refit_every: usize,
    /// Guard against accidentally solving a full-country system.
    pub cell_cap: usize,
    cache: Option<(usize, VarModel)>,
}

impl VarForecaster {
    pub fn new(p: usize, ridge: f64, refit_every: usize, cell_cap: usize) -> Self {
        VarForecaster { p, ridge, refit_every: refit_every.max(1), cell_cap, cache: None }
    }
}

impl Forecaster for VarForecaster {
    fn name(&self) -> &str {
        "var"
    }

    fn predict(
        &mut self,
        window: &DataWindow,
        target_date: NaiveDate,
        horizon: usize,
    ) -> Result<IncidenceField> {
        let fields = window.fields_through_limit();
        let grid = fields[0].grid.clone();
        let cells = grid.land_cells();
        if cells.len() > self.cell_cap {
            return Err(Error::Config(format!(
                "VAR over {} cells exceeds the configured cap of {}",
                cells.len(),
                self.cell_cap
            )));
        }
        let panel: Vec<Vec<f64>> = fields
            .iter()
            .map(|f| cells.iter().map(|&c| f.values[c]).collect())
            .collect();

        let refit = match &self.cache {
            Some((day, _)) => window.limit() >= day + self.refit_every,
            None => true,
        };
        if refit {
            let model = fit_var(&panel, self.p, self.ridge)?;
            self.cache = Some((window.limit(), model));
        }
        let (_, model) = self.cache.as_ref().unwrap();
        let forecast = forecast_var(model, &panel[panel.len() - model.p..], horizon)?;
        let last = &forecast[horizon - 1];
        let mut field = IncidenceField::filled(grid.clone(), target_date, 0.0);
        for (&cell, &v) in cells.iter().zip(last) {
            field.values[cell] = v;
        }
        Ok(field)
    }
}

/// Municipality-level SIRD forecasts pushed through block sequential
/// simulation; the prediction is the ensemble median map.
pub struct SirdForecaster {
    pub config: SirdConfig,
    pub simulator: BlockSimulator,
    pub seed: u64,
}

impl Forecaster for SirdForecaster {
    fn name(&self) -> &str {
        "sird"
    }

    fn predict(
        &mut self,
        window: &DataWindow,
        target_date: NaiveDate,
        horizon: usize,
    ) -> Result<IncidenceField> {
        let n = window.n_municipalities();
        let cases: Vec<Vec<f64>> = (0..n)
            .map(|m| window.cases_through_limit(m).to_vec())
            .collect();
        let forecasts =
            forecast_municipalities(&cases, window.populations(), &self.config, horizon)?;
        let rates: Vec<f64> = forecasts
            .iter()
            .map(|f| f.incidence[horizon - 1])
            .collect();
        let base_seed = self
            .seed
            .wrapping_add((window.limit() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let set = self.simulator.simulate_set_seeded(&rates, target_date, base_seed)?;
        let (median, _, _) = summarize(&set, 0.9)?;
        Ok(median)
    }
}

/// Three-band convolutional sequence-to-sequence forecaster with online
/// fine-tuning after each prediction.
pub struct StconvForecaster {
    pub ensemble: RegionEnsemble,
    pub initial_epochs: usize,
    pub online_epochs: usize,
    horizon: usize,
}

impl StconvForecaster {
    pub fn new(ensemble: RegionEnsemble, initial_epochs: usize, online_epochs: usize) -> Self {
        let horizon = ensemble.models[0].config.horizon;
        StconvForecaster { ensemble, initial_epochs, online_epochs, horizon }
    }
}

impl Forecaster for StconvForecaster {
    fn name(&self) -> &str {
        "stconv"
    }

    fn warm_up(&mut self, window: &DataWindow) -> Result<()> {
        self.ensemble
            .train_initial(window.fields_through_limit(), self.initial_epochs)?;
        Ok(())
    }

    fn predict(
        &mut self,
        window: &DataWindow,
        target_date: NaiveDate,
        horizon: usize,
    ) -> Result<IncidenceField> {
        let t = self.horizon;
        if horizon != t {
            return Err(Error::Config(format!(
                "model was built for horizon {t}, asked for {horizon}"
            )));
        }
        let origin = window.limit();
        if origin + 1 < t {
            return Err(Error::Data("window too short for the input sequence".into()));
        }
        let mut recent = Vec::with_capacity(t);
        for day in (origin + 1 - t)..=origin {
            recent.push(window.field(day)?);
        }
        let prediction = self.ensemble.predict_field(&recent, target_date)?;

        // Online fine-tuning on the most recent fully observed window pair,
        // strictly after the prediction and strictly within visible days.
        if self.online_epochs > 0 && origin + 1 >= 2 * t {
            let mut input = Vec::with_capacity(t);
            let mut target = Vec::with_capacity(t);
            for day in (origin + 1 - 2 * t)..=(origin - t) {
                input.push(window.field(day)?);
            }
            for day in (origin + 1 - t)..=origin {
                target.push(window.field(day)?);
            }
            self.ensemble.online_update(&input, &target, self.online_epochs)?;
        }
        Ok(prediction)
    }
}
