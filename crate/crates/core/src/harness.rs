//! The evaluation protocol: sweep the requested metrics over every
//! (variable, lead, init date) tuple, tolerate gaps, aggregate per lead,
//! and derive ratio tables and skill horizons.
//!
//! Work items are embarrassingly parallel; they are scored with rayon and
//! merged in index order, so the resulting table is bit-identical no
//! matter how many threads run it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::{Days, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{climatology_forecast, persistence_forecast, ReferenceKind};
use crate::deterministic::{self, MsSsimParams};
use crate::error::{Error, ErrorClass, Result};
use crate::grid::{anomaly, build_lat_weights, Climatology, GridField, LatWeights};
use crate::num::Real;
use crate::probabilistic::{
    climatology_ensemble, crps, crpss, spread, spread_skill_ratio, CrpsWeighting, EnsembleField,
    ScoreContext,
};
use crate::spectral::{power_spectrum, restrict_and_normalize, spec_div, spec_res, SpectrumBins};
use crate::sum::CompensatedSum;

/// Every metric the harness can produce, in output order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Rmse,
    Bias,
    Acc,
    MsSsim,
    SpecDiv,
    SpecRes,
    Crps,
    Crpss,
    Spread,
    Ssr,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Rmse => "rmse",
            MetricKind::Bias => "bias",
            MetricKind::Acc => "acc",
            MetricKind::MsSsim => "ms_ssim",
            MetricKind::SpecDiv => "spec_div",
            MetricKind::SpecRes => "spec_res",
            MetricKind::Crps => "crps",
            MetricKind::Crpss => "crpss",
            MetricKind::Spread => "spread",
            MetricKind::Ssr => "ssr",
        }
    }

    pub fn all() -> [MetricKind; 10] {
        [
            MetricKind::Rmse,
            MetricKind::Bias,
            MetricKind::Acc,
            MetricKind::MsSsim,
            MetricKind::SpecDiv,
            MetricKind::SpecRes,
            MetricKind::Crps,
            MetricKind::Crpss,
            MetricKind::Spread,
            MetricKind::Ssr,
        ]
    }

    /// Metrics scored on an ensemble rather than a single field.
    pub fn needs_ensemble(self) -> bool {
        matches!(
            self,
            MetricKind::Crps | MetricKind::Crpss | MetricKind::Spread | MetricKind::Ssr
        )
    }

    fn is_spectral(self) -> bool {
        matches!(self, MetricKind::SpecDiv | MetricKind::SpecRes)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<MetricKind> {
        MetricKind::all()
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown metric '{s}' (expected one of rmse, bias, acc, ms_ssim, \
                     spec_div, spec_res, crps, crpss, spread, ssr)"
                ))
            })
    }
}

/// Whether spectral metrics see each sample alone or the batch-mean
/// spectrum per (variable, lead) — the latter averages the per-date power
/// spectra before comparing, and emits one undated row per pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpectraMode {
    #[default]
    PerSample,
    BatchMean,
}

impl FromStr for SpectraMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<SpectraMode> {
        match s {
            "per-sample" => Ok(SpectraMode::PerSample),
            "batch-mean" => Ok(SpectraMode::BatchMean),
            other => Err(Error::InvalidArgument(format!(
                "unknown spectra mode '{other}' (expected per-sample or batch-mean)"
            ))),
        }
    }
}

/// What to evaluate. `reference` replaces an explicit forecast source;
/// exactly one of the two must be supplied to [`run_eval`].
#[derive(Debug, Clone)]
pub struct EvalPlan {
    pub variables: Vec<String>,
    pub leads: Vec<u32>,
    pub init_dates: Vec<NaiveDate>,
    pub metrics: BTreeSet<MetricKind>,
    /// Wavenumber-band quantile for the spectral metrics.
    pub q: f64,
    pub ensemble_size: Option<usize>,
    pub reference: Option<ReferenceKind>,
    pub spectra_mode: SpectraMode,
    pub crps_weighting: CrpsWeighting,
    pub ms_ssim: MsSsimParams,
}

impl Default for EvalPlan {
    fn default() -> EvalPlan {
        EvalPlan {
            variables: Vec::new(),
            leads: (1..=44).collect(),
            init_dates: Vec::new(),
            metrics: BTreeSet::new(),
            q: 0.9,
            ensemble_size: None,
            reference: None,
            spectra_mode: SpectraMode::default(),
            crps_weighting: CrpsWeighting::default(),
            ms_ssim: MsSsimParams::default(),
        }
    }
}

impl EvalPlan {
    pub fn validate(&self) -> Result<()> {
        if self.variables.is_empty() {
            return Err(Error::InvalidArgument("plan lists no variables".into()));
        }
        if self.leads.is_empty() {
            return Err(Error::InvalidArgument("plan lists no leads".into()));
        }
        if !self.leads.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "leads must be strictly increasing".into(),
            ));
        }
        if self.leads.iter().any(|&l| !(1..=60).contains(&l)) {
            return Err(Error::InvalidArgument(
                "leads must lie in 1..=60 days".into(),
            ));
        }
        if self.init_dates.is_empty() {
            return Err(Error::InvalidArgument("plan lists no init dates".into()));
        }
        if !self.init_dates.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "init dates must be strictly increasing".into(),
            ));
        }
        if self.metrics.is_empty() {
            return Err(Error::InvalidArgument("plan lists no metrics".into()));
        }
        if !(0.0..=1.0).contains(&self.q) || !self.q.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "q must lie in [0, 1], got {}",
                self.q
            )));
        }
        let wants_ensemble = self.metrics.iter().any(|m| m.needs_ensemble());
        if wants_ensemble {
            match self.ensemble_size {
                Some(0) | None => {
                    return Err(Error::InvalidArgument(
                        "ensemble metrics need an ensemble size of at least 1".into(),
                    ))
                }
                Some(_) => {}
            }
        }
        if self.spectra_mode == SpectraMode::BatchMean && wants_ensemble {
            return Err(Error::InvalidArgument(
                "batch-mean spectra apply to deterministic evaluations only".into(),
            ));
        }
        self.ms_ssim.validate()
    }

    fn det_metrics(&self) -> Vec<MetricKind> {
        self.metrics
            .iter()
            .copied()
            .filter(|m| !m.needs_ensemble())
            .collect()
    }

    fn ens_metrics(&self) -> Vec<MetricKind> {
        self.metrics
            .iter()
            .copied()
            .filter(|m| m.needs_ensemble())
            .collect()
    }
}

/// Supplies verifying analyses by (variable, valid date).
pub trait TruthSource<T>: Sync {
    fn field(&self, variable: &str, valid_time: NaiveDate) -> Result<GridField<T>>;
}

/// Supplies forecasts by (variable, init date, lead).
pub trait ForecastSource<T>: Sync {
    fn field(&self, variable: &str, init: NaiveDate, lead: u32) -> Result<GridField<T>>;

    fn ensemble(
        &self,
        variable: &str,
        init: NaiveDate,
        lead: u32,
        n_members: usize,
    ) -> Result<EnsembleField<T>>;
}

/// In-memory truth archive, keyed by (variable, valid date).
#[derive(Debug, Default)]
pub struct MemoryTruth<T> {
    fields: HashMap<(String, NaiveDate), GridField<T>>,
}

impl<T: Real> MemoryTruth<T> {
    pub fn new() -> MemoryTruth<T> {
        MemoryTruth {
            fields: HashMap::new(),
        }
    }

    pub fn insert(&mut self, field: GridField<T>) {
        let key = (field.meta().variable.clone(), field.meta().valid_time);
        self.fields.insert(key, field);
    }
}

impl<T: Real> TruthSource<T> for MemoryTruth<T> {
    fn field(&self, variable: &str, valid_time: NaiveDate) -> Result<GridField<T>> {
        self.fields
            .get(&(variable.to_string(), valid_time))
            .cloned()
            .ok_or_else(|| {
                Error::MissingCoverage(format!("no analysis for {variable} at {valid_time}"))
            })
    }
}

/// In-memory forecast archive keyed by (variable, init date, lead).
#[derive(Debug, Default)]
pub struct MemoryForecast<T> {
    det: HashMap<(String, NaiveDate, u32), GridField<T>>,
    members: HashMap<(String, NaiveDate, u32), Vec<GridField<T>>>,
}

impl<T: Real> MemoryForecast<T> {
    pub fn new() -> MemoryForecast<T> {
        MemoryForecast {
            det: HashMap::new(),
            members: HashMap::new(),
        }
    }

    pub fn insert(&mut self, init: NaiveDate, field: GridField<T>) {
        let key = (field.meta().variable.clone(), init, field.meta().lead_days);
        self.det.insert(key, field);
    }

    pub fn insert_members(&mut self, init: NaiveDate, members: Vec<GridField<T>>) {
        if let Some(first) = members.first() {
            let key = (first.meta().variable.clone(), init, first.meta().lead_days);
            self.members.insert(key, members);
        }
    }
}

impl<T: Real> ForecastSource<T> for MemoryForecast<T> {
    fn field(&self, variable: &str, init: NaiveDate, lead: u32) -> Result<GridField<T>> {
        self.det
            .get(&(variable.to_string(), init, lead))
            .cloned()
            .ok_or_else(|| {
                Error::MissingCoverage(format!(
                    "no forecast for {variable} init {init} lead {lead}"
                ))
            })
    }

    fn ensemble(
        &self,
        variable: &str,
        init: NaiveDate,
        lead: u32,
        n_members: usize,
    ) -> Result<EnsembleField<T>> {
        let members = self
            .members
            .get(&(variable.to_string(), init, lead))
            .ok_or_else(|| {
                Error::MissingCoverage(format!(
                    "no ensemble for {variable} init {init} lead {lead}"
                ))
            })?;
        if members.len() < n_members {
            return Err(Error::MissingCoverage(format!(
                "ensemble for {variable} init {init} lead {lead} has {} members, {n_members} requested",
                members.len()
            )));
        }
        EnsembleField::new(members[..n_members].to_vec())
    }
}

/// One scored tuple. A failed tuple keeps its row with a NaN value, the
/// error text in `note`, and the failure class for exit-code mapping.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreRow {
    pub metric: MetricKind,
    pub variable: String,
    pub lead: u32,
    pub init_date: Option<NaiveDate>,
    #[serde(with = "nan_as_null")]
    pub value: f64,
    pub n_members: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<ErrorClass>,
}

/// Unweighted mean over the finite per-date values of one
/// (metric, variable, lead) key.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AggregateRow {
    pub metric: MetricKind,
    pub variable: String,
    pub lead: u32,
    #[serde(with = "nan_as_null")]
    pub value: f64,
    pub n_dates: usize,
}

/// Full evaluation output: per-tuple rows plus per-lead aggregates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl ScoreTable {
    /// Worst failure class present in any row, if any row failed.
    /// Coverage gaps outrank numeric degeneracy, which outranks bad input.
    pub fn worst_class(&self) -> Option<ErrorClass> {
        let mut has_degenerate = false;
        let mut has_input = false;
        for row in &self.rows {
            match row.class {
                Some(ErrorClass::Coverage) => return Some(ErrorClass::Coverage),
                Some(ErrorClass::Degenerate) => has_degenerate = true,
                Some(ErrorClass::Input) => has_input = true,
                None => {}
            }
        }
        if has_degenerate {
            Some(ErrorClass::Degenerate)
        } else if has_input {
            Some(ErrorClass::Input)
        } else {
            None
        }
    }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

fn error_row(
    metric: MetricKind,
    variable: &str,
    lead: u32,
    init_date: Option<NaiveDate>,
    n_members: usize,
    err: &Error,
) -> ScoreRow {
    ScoreRow {
        metric,
        variable: variable.to_string(),
        lead,
        init_date,
        value: f64::NAN,
        n_members,
        note: Some(err.to_string()),
        class: Some(err.class()),
    }
}

fn value_row(
    metric: MetricKind,
    variable: &str,
    lead: u32,
    init_date: Option<NaiveDate>,
    n_members: usize,
    value: f64,
) -> ScoreRow {
    ScoreRow {
        metric,
        variable: variable.to_string(),
        lead,
        init_date,
        value,
        n_members,
        note: None,
        class: None,
    }
}

fn det_forecast<T: Real>(
    plan: &EvalPlan,
    forecasts: Option<&dyn ForecastSource<T>>,
    truth: &dyn TruthSource<T>,
    clim: &Climatology<T>,
    variable: &str,
    init: NaiveDate,
    lead: u32,
) -> Result<GridField<T>> {
    if let Some(src) = forecasts {
        return src.field(variable, init, lead);
    }
    let reference = match plan.reference {
        Some(r) => r,
        None => {
            return Err(Error::InvalidArgument(
                "neither a forecast source nor a reference was supplied".into(),
            ))
        }
    };
    let rf = match reference {
        ReferenceKind::Persistence => {
            let analysis = truth.field(variable, init)?;
            persistence_forecast(&analysis, &[lead])?
        }
        ReferenceKind::Climatology => climatology_forecast(clim, init, &[lead])?,
    };
    rf.at_lead(lead)
        .cloned()
        .ok_or_else(|| Error::MissingCoverage(format!("reference missing lead {lead}")))
}

fn score_det_metric<T: Real>(
    metric: MetricKind,
    pred: &GridField<T>,
    truth_field: &GridField<T>,
    weights: &LatWeights<T>,
    clim: &Climatology<T>,
    plan: &EvalPlan,
) -> Result<f64> {
    let v = match metric {
        MetricKind::Rmse => deterministic::rmse(pred, truth_field, weights)?,
        MetricKind::Bias => deterministic::bias(pred, truth_field, weights)?,
        MetricKind::Acc => {
            let pa = anomaly(pred, clim)?;
            let ta = anomaly(truth_field, clim)?;
            deterministic::acc(&pa, &ta, weights)?
        }
        MetricKind::MsSsim => deterministic::ms_ssim(pred, truth_field, &plan.ms_ssim)?,
        MetricKind::SpecDiv | MetricKind::SpecRes => {
            let ps = restrict_and_normalize(&power_spectrum(pred)?, plan.q)?;
            let ts = restrict_and_normalize(&power_spectrum(truth_field)?, plan.q)?;
            match metric {
                MetricKind::SpecDiv => spec_div(&ps, &ts)?,
                _ => spec_res(&ps, &ts)?,
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "{other} is not a deterministic metric"
            )))
        }
    };
    Ok(v.to_f64_lossy())
}

fn eval_item<T: Real>(
    plan: &EvalPlan,
    forecasts: Option<&dyn ForecastSource<T>>,
    truth: &dyn TruthSource<T>,
    clim: &Climatology<T>,
    variable: &str,
    lead: u32,
    init: NaiveDate,
) -> Vec<ScoreRow> {
    let det_metrics: Vec<MetricKind> = plan
        .det_metrics()
        .into_iter()
        .filter(|m| !(plan.spectra_mode == SpectraMode::BatchMean && m.is_spectral()))
        .collect();
    let ens_metrics = plan.ens_metrics();
    let ens_n = plan.ensemble_size.unwrap_or(0);
    let all_rows_fail = |err: &Error| -> Vec<ScoreRow> {
        det_metrics
            .iter()
            .map(|&m| error_row(m, variable, lead, Some(init), 1, err))
            .chain(
                ens_metrics
                    .iter()
                    .map(|&m| error_row(m, variable, lead, Some(init), ens_n, err)),
            )
            .collect()
    };

    let valid = match init.checked_add_days(Days::new(lead as u64)) {
        Some(d) => d,
        None => {
            return all_rows_fail(&Error::InvalidArgument(format!(
                "init {init} plus lead {lead} leaves the calendar"
            )))
        }
    };
    let truth_field = match truth.field(variable, valid) {
        Ok(f) => f,
        Err(e) => return all_rows_fail(&e),
    };
    let weights = match build_lat_weights::<T>(truth_field.spec()) {
        Ok(w) => w,
        Err(e) => return all_rows_fail(&e),
    };

    let mut rows = Vec::with_capacity(det_metrics.len() + ens_metrics.len());

    if !det_metrics.is_empty() {
        match det_forecast(plan, forecasts, truth, clim, variable, init, lead) {
            Ok(pred) => {
                for &metric in &det_metrics {
                    let row = match score_det_metric(
                        metric,
                        &pred,
                        &truth_field,
                        &weights,
                        clim,
                        plan,
                    ) {
                        Ok(v) => value_row(metric, variable, lead, Some(init), 1, v),
                        Err(e) => error_row(metric, variable, lead, Some(init), 1, &e),
                    };
                    rows.push(row);
                }
            }
            Err(e) => {
                rows.extend(
                    det_metrics
                        .iter()
                        .map(|&m| error_row(m, variable, lead, Some(init), 1, &e)),
                );
            }
        }
    }

    if !ens_metrics.is_empty() {
        let fetched = match forecasts {
            Some(src) => src.ensemble(variable, init, lead, ens_n),
            None => Err(Error::InvalidArgument(
                "ensemble metrics need an explicit forecast source".into(),
            )),
        };
        match fetched {
            Ok(ens) => {
                let ctx = ScoreContext {
                    weights: weights.clone(),
                    ms_ssim: plan.ms_ssim.clone(),
                    q: plan.q,
                };
                for &metric in &ens_metrics {
                    let scored = score_ens_metric(metric, &ens, &truth_field, &ctx, clim, plan);
                    let row = match scored {
                        Ok(v) => value_row(metric, variable, lead, Some(init), ens.len(), v),
                        Err(e) => error_row(metric, variable, lead, Some(init), ens_n, &e),
                    };
                    rows.push(row);
                }
            }
            Err(e) => {
                rows.extend(
                    ens_metrics
                        .iter()
                        .map(|&m| error_row(m, variable, lead, Some(init), ens_n, &e)),
                );
            }
        }
    }

    rows
}

fn score_ens_metric<T: Real>(
    metric: MetricKind,
    ens: &EnsembleField<T>,
    truth_field: &GridField<T>,
    ctx: &ScoreContext<T>,
    clim: &Climatology<T>,
    plan: &EvalPlan,
) -> Result<f64> {
    let v = match metric {
        MetricKind::Crps => crps(ens, truth_field, &ctx.weights, plan.crps_weighting)?,
        MetricKind::Crpss => {
            let forecast = crps(ens, truth_field, &ctx.weights, plan.crps_weighting)?;
            let clim_ens = climatology_ensemble(clim, truth_field.meta().valid_time)?;
            let reference = crps(&clim_ens, truth_field, &ctx.weights, plan.crps_weighting)?;
            crpss(forecast, reference)?
        }
        MetricKind::Spread => spread(ens, &ctx.weights)?,
        MetricKind::Ssr => spread_skill_ratio(ens, truth_field, ctx)?,
        other => {
            return Err(Error::InvalidArgument(format!(
                "{other} is not an ensemble metric"
            )))
        }
    };
    Ok(v.to_f64_lossy())
}

/// Batch-mean spectral rows: per (variable, lead), average the power
/// spectra over all init dates that load, then compare pred vs truth once.
fn batch_spectral_rows<T: Real>(
    plan: &EvalPlan,
    forecasts: Option<&dyn ForecastSource<T>>,
    truth: &dyn TruthSource<T>,
    clim: &Climatology<T>,
    variable: &str,
    lead: u32,
) -> Vec<ScoreRow> {
    let metrics: Vec<MetricKind> = plan
        .det_metrics()
        .into_iter()
        .filter(|m| m.is_spectral())
        .collect();
    let fail_all = |err: &Error| -> Vec<ScoreRow> {
        metrics
            .iter()
            .map(|&m| error_row(m, variable, lead, None, 1, err))
            .collect()
    };

    let mut pred_acc: Option<(Vec<u32>, Vec<CompensatedSum<T>>)> = None;
    let mut truth_acc: Vec<CompensatedSum<T>> = Vec::new();
    let mut used = 0usize;
    let mut skipped = 0usize;
    for &init in &plan.init_dates {
        let loaded = (|| -> Result<(SpectrumBins<T>, SpectrumBins<T>)> {
            let valid = init
                .checked_add_days(Days::new(lead as u64))
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("init {init} plus lead {lead} leaves the calendar"))
                })?;
            let truth_field = truth.field(variable, valid)?;
            let pred = det_forecast(plan, forecasts, truth, clim, variable, init, lead)?;
            Ok((power_spectrum(&pred)?, power_spectrum(&truth_field)?))
        })();
        let (ps, ts) = match loaded {
            Ok(pair) => pair,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        match &mut pred_acc {
            None => {
                truth_acc = ts.power().iter().map(|&p| {
                    let mut s = CompensatedSum::new();
                    s.add(p);
                    s
                }).collect();
                pred_acc = Some((
                    ps.k().to_vec(),
                    ps.power()
                        .iter()
                        .map(|&p| {
                            let mut s = CompensatedSum::new();
                            s.add(p);
                            s
                        })
                        .collect(),
                ));
            }
            Some((k, pacc)) => {
                if ps.k() != &k[..] || ts.k() != &k[..] {
                    return fail_all(&Error::GridMismatch(format!(
                        "{variable} lead {lead}: spectra change shape across init dates"
                    )));
                }
                for (s, &p) in pacc.iter_mut().zip(ps.power()) {
                    s.add(p);
                }
                for (s, &p) in truth_acc.iter_mut().zip(ts.power()) {
                    s.add(p);
                }
            }
        }
        used += 1;
    }

    let (k, pred_sums) = match pred_acc {
        Some(acc) => acc,
        None => {
            return fail_all(&Error::MissingCoverage(format!(
                "{variable} lead {lead}: no init date could be loaded for batch spectra"
            )))
        }
    };
    let n = T::of(used as f64);
    let mean_of = |sums: Vec<CompensatedSum<T>>| -> Vec<T> {
        sums.into_iter().map(|s| s.value() / n).collect()
    };
    let note = (skipped > 0).then(|| format!("averaged over {used} of {} init dates", used + skipped));
    let scored = (|| -> Result<Vec<(MetricKind, T)>> {
        let ps = restrict_and_normalize(
            &SpectrumBins::from_power(k.clone(), mean_of(pred_sums))?,
            plan.q,
        )?;
        let ts = restrict_and_normalize(
            &SpectrumBins::from_power(k, mean_of(truth_acc))?,
            plan.q,
        )?;
        metrics
            .iter()
            .map(|&m| {
                let v = match m {
                    MetricKind::SpecDiv => spec_div(&ps, &ts)?,
                    _ => spec_res(&ps, &ts)?,
                };
                Ok((m, v))
            })
            .collect()
    })();
    match scored {
        Ok(values) => values
            .into_iter()
            .map(|(m, v)| {
                let mut row = value_row(m, variable, lead, None, 1, v.to_f64_lossy());
                row.note = note.clone();
                row
            })
            .collect(),
        Err(e) => fail_all(&e),
    }
}

/// Run the whole plan. Exactly one of `forecasts` or `plan.reference` must
/// be set; gaps and per-tuple failures become flagged rows rather than
/// aborting the run.
pub fn run_eval<T: Real>(
    plan: &EvalPlan,
    forecasts: Option<&dyn ForecastSource<T>>,
    truth: &dyn TruthSource<T>,
    clim: &Climatology<T>,
) -> Result<ScoreTable> {
    plan.validate()?;
    match (forecasts.is_some(), plan.reference.is_some()) {
        (true, true) => {
            return Err(Error::InvalidArgument(
                "supply either a forecast source or a reference, not both".into(),
            ))
        }
        (false, false) => {
            return Err(Error::InvalidArgument(
                "supply a forecast source or a reference".into(),
            ))
        }
        _ => {}
    }
    if plan.metrics.iter().any(|m| m.needs_ensemble()) && forecasts.is_none() {
        return Err(Error::InvalidArgument(
            "ensemble metrics need an explicit forecast source".into(),
        ));
    }

    let mut items: Vec<(&str, u32, NaiveDate)> = Vec::new();
    for variable in &plan.variables {
        for &lead in &plan.leads {
            for &init in &plan.init_dates {
                items.push((variable, lead, init));
            }
        }
    }
    let mut rows: Vec<ScoreRow> = items
        .par_iter()
        .map(|&(variable, lead, init)| {
            eval_item(plan, forecasts, truth, clim, variable, lead, init)
        })
        .collect::<Vec<Vec<ScoreRow>>>()
        .into_iter()
        .flatten()
        .collect();

    if plan.spectra_mode == SpectraMode::BatchMean
        && plan.metrics.iter().any(|m| m.is_spectral())
    {
        let mut pairs: Vec<(&str, u32)> = Vec::new();
        for variable in &plan.variables {
            for &lead in &plan.leads {
                pairs.push((variable, lead));
            }
        }
        let batch: Vec<ScoreRow> = pairs
            .par_iter()
            .map(|&(variable, lead)| {
                batch_spectral_rows(plan, forecasts, truth, clim, variable, lead)
            })
            .collect::<Vec<Vec<ScoreRow>>>()
            .into_iter()
            .flatten()
            .collect();
        rows.extend(batch);
    }

    rows.sort_by(|a, b| {
        (a.metric, &a.variable, a.lead, a.init_date)
            .cmp(&(b.metric, &b.variable, b.lead, b.init_date))
    });
    let aggregates = aggregate_rows(&rows);
    Ok(ScoreTable { rows, aggregates })
}

fn aggregate_rows(rows: &[ScoreRow]) -> Vec<AggregateRow> {
    let mut acc: BTreeMap<(MetricKind, &str, u32), (CompensatedSum<f64>, usize)> = BTreeMap::new();
    for row in rows {
        if row.init_date.is_none() {
            continue;
        }
        let entry = acc
            .entry((row.metric, row.variable.as_str(), row.lead))
            .or_insert_with(|| (CompensatedSum::new(), 0));
        if row.value.is_finite() {
            entry.0.add(row.value);
            entry.1 += 1;
        }
    }
    acc.into_iter()
        .map(|((metric, variable, lead), (sum, n))| AggregateRow {
            metric,
            variable: variable.to_string(),
            lead,
            value: if n > 0 {
                sum.value() / n as f64
            } else {
                f64::NAN
            },
            n_dates: n,
        })
        .collect()
}

/// Per-key ratio of two tables' aggregates (numerator over denominator).
/// The tables must cover exactly the same (metric, variable, lead) keys; a
/// zero or non-finite denominator flags the row instead of failing.
pub fn metric_ratio(num: &ScoreTable, den: &ScoreTable) -> Result<ScoreTable> {
    let key = |a: &AggregateRow| (a.metric, a.variable.clone(), a.lead);
    let num_keys: BTreeSet<_> = num.aggregates.iter().map(key).collect();
    let den_keys: BTreeSet<_> = den.aggregates.iter().map(key).collect();
    if num_keys != den_keys {
        let missing: Vec<String> = num_keys
            .symmetric_difference(&den_keys)
            .map(|(m, v, l)| format!("{m}/{v}/{l}"))
            .collect();
        return Err(Error::InvalidArgument(format!(
            "tables cover different keys: {}",
            missing.join(", ")
        )));
    }
    if num_keys.is_empty() {
        return Err(Error::InvalidArgument(
            "tables carry no aggregates to compare".into(),
        ));
    }
    let den_by_key: BTreeMap<_, &AggregateRow> =
        den.aggregates.iter().map(|a| (key(a), a)).collect();
    let rows = num
        .aggregates
        .iter()
        .map(|a| {
            let d = den_by_key[&key(a)];
            let degenerate = !d.value.is_finite() || d.value == 0.0 || !a.value.is_finite();
            let mut row = value_row(
                a.metric,
                &a.variable,
                a.lead,
                None,
                0,
                a.value / d.value,
            );
            if degenerate {
                row.value = f64::NAN;
                row.note = Some(format!(
                    "ratio undefined: numerator {} over denominator {}",
                    a.value, d.value
                ));
                row.class = Some(ErrorClass::Degenerate);
            }
            row
        })
        .collect();
    Ok(ScoreTable {
        rows,
        aggregates: Vec::new(),
    })
}

/// First lead of the trailing run of non-positive skill: the lead where
/// the series drops to ≤ 0 and never recovers. `None` if the series ends
/// positive.
pub fn skill_horizon(series: &[(u32, f64)]) -> Result<Option<u32>> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("empty skill series".into()));
    }
    if !series.windows(2).all(|w| w[1].0 == w[0].0 + 1) {
        return Err(Error::InvalidArgument(
            "skill series must cover contiguous leads".into(),
        ));
    }
    if let Some((lead, _)) = series.iter().find(|(_, v)| v.is_nan()) {
        return Err(Error::InvalidArgument(format!(
            "skill at lead {lead} is NaN"
        )));
    }
    let mut horizon = None;
    for &(lead, value) in series.iter().rev() {
        if value <= 0.0 {
            horizon = Some(lead);
        } else {
            break;
        }
    }
    Ok(horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_climatology, ClimatologyOptions, GridSpec};
    use crate::synth::{drifting_series, gaussian_random_field, truth_series, SynthConfig};
    use chrono::Datelike;
    use std::sync::Arc;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn training_climatology(
        cfg: &SynthConfig,
        keep_samples: bool,
    ) -> Climatology<f64> {
        let mut fields: Vec<GridField<f64>> = Vec::new();
        for year in [2018, 2019] {
            let start = date(year, 1, 1);
            let days = if NaiveDate::from_ymd_opt(year, 12, 31).unwrap().ordinal() == 366 {
                366
            } else {
                365
            };
            fields.extend(truth_series::<f64>(cfg, start, days).unwrap());
        }
        build_climatology(
            &fields,
            &ClimatologyOptions {
                keep_samples,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn identity_setup() -> (EvalPlan, MemoryForecast<f64>, MemoryTruth<f64>, Climatology<f64>) {
        let spec = GridSpec::global(24, 48).unwrap();
        let cfg = SynthConfig::new(Arc::clone(&spec));
        let clim = training_climatology(&cfg, false);
        let inits = vec![date(2022, 1, 1), date(2022, 1, 2)];
        let leads = vec![1, 2, 3];
        let mut truth = MemoryTruth::new();
        let mut fc = MemoryForecast::new();
        for &init in &inits {
            for &lead in &leads {
                let valid = init.checked_add_days(Days::new(lead as u64)).unwrap();
                let field = gaussian_random_field::<f64>(&cfg, valid).unwrap();
                truth.insert(field.clone());
                let mut as_forecast = field;
                as_forecast.meta_mut().lead_days = lead;
                fc.insert(init, as_forecast);
            }
        }
        let plan = EvalPlan {
            variables: vec!["t850".into()],
            leads,
            init_dates: inits,
            metrics: [
                MetricKind::Rmse,
                MetricKind::Bias,
                MetricKind::Acc,
                MetricKind::MsSsim,
                MetricKind::SpecDiv,
                MetricKind::SpecRes,
            ]
            .into_iter()
            .collect(),
            ms_ssim: MsSsimParams::with_scales(2).unwrap(),
            ..Default::default()
        };
        (plan, fc, truth, clim)
    }

    #[test]
    fn identity_forecast_scores_perfectly_at_every_lead() {
        let (plan, fc, truth, clim) = identity_setup();
        let table = run_eval(&plan, Some(&fc), &truth, &clim).unwrap();
        assert_eq!(table.rows.len(), 6 * 3 * 2);
        for row in &table.rows {
            assert!(row.note.is_none(), "unexpected failure: {row:?}");
            let expected = match row.metric {
                MetricKind::Acc | MetricKind::MsSsim => 1.0,
                _ => 0.0,
            };
            assert!(
                (row.value - expected).abs() < 1e-9,
                "{} at lead {} init {:?}: {}",
                row.metric,
                row.lead,
                row.init_date,
                row.value
            );
        }
        for agg in &table.aggregates {
            assert_eq!(agg.n_dates, 2);
        }
    }

    #[test]
    fn rows_and_aggregates_come_out_sorted_and_consistent() {
        let (plan, fc, truth, clim) = identity_setup();
        let table = run_eval(&plan, Some(&fc), &truth, &clim).unwrap();
        let keys: Vec<_> = table
            .rows
            .iter()
            .map(|r| (r.metric, r.variable.clone(), r.lead, r.init_date))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);

        for agg in &table.aggregates {
            let members: Vec<f64> = table
                .rows
                .iter()
                .filter(|r| {
                    r.metric == agg.metric
                        && r.variable == agg.variable
                        && r.lead == agg.lead
                        && r.value.is_finite()
                })
                .map(|r| r.value)
                .collect();
            assert_eq!(members.len(), agg.n_dates);
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            assert!((mean - agg.value).abs() <= 1e-12);
        }
    }

    #[test]
    fn persistence_on_drifting_truth_has_linearly_growing_rmse() {
        let spec = GridSpec::global(16, 32).unwrap();
        let mut cfg = SynthConfig::new(Arc::clone(&spec));
        cfg.drift_per_day = 0.25;
        let clim = training_climatology(&cfg, false);
        let mut truth = MemoryTruth::new();
        for f in drifting_series::<f64>(&cfg, date(2022, 3, 1), 6).unwrap() {
            truth.insert(f);
        }
        let plan = EvalPlan {
            variables: vec!["t850".into()],
            leads: vec![1, 2, 3, 4, 5],
            init_dates: vec![date(2022, 3, 1)],
            metrics: [MetricKind::Rmse].into_iter().collect(),
            reference: Some(ReferenceKind::Persistence),
            ..Default::default()
        };
        let table = run_eval::<f64>(&plan, None, &truth, &clim).unwrap();
        let mut last = 0.0;
        for row in &table.rows {
            assert!(row.note.is_none(), "{row:?}");
            let expected = 0.25 * row.lead as f64;
            assert!(
                (row.value - expected).abs() < 1e-9,
                "lead {}: {} vs {}",
                row.lead,
                row.value,
                expected
            );
            assert!(row.value > last);
            last = row.value;
        }
    }

    #[test]
    fn output_is_identical_across_thread_counts() {
        let (plan, fc, truth, clim) = identity_setup();
        let run_with = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_eval(&plan, Some(&fc), &truth, &clim).unwrap())
        };
        let one = run_with(1);
        let four = run_with(4);
        assert_eq!(one.rows.len(), four.rows.len());
        for (a, b) in one.rows.iter().zip(&four.rows) {
            assert_eq!(a.metric, b.metric);
            assert_eq!(a.init_date, b.init_date);
            assert_eq!(a.value.to_bits(), b.value.to_bits());
        }
        for (a, b) in one.aggregates.iter().zip(&four.aggregates) {
            assert_eq!(a.value.to_bits(), b.value.to_bits());
        }
    }

    #[test]
    fn missing_truth_dates_become_flagged_rows() {
        let (mut plan, fc, _empty, clim) = identity_setup();
        plan.metrics = [MetricKind::Rmse].into_iter().collect();
        let truth = MemoryTruth::<f64>::new();
        let table = run_eval(&plan, Some(&fc), &truth, &clim).unwrap();
        assert_eq!(table.rows.len(), 3 * 2);
        for row in &table.rows {
            assert!(row.value.is_nan());
            assert_eq!(row.class, Some(ErrorClass::Coverage));
            assert!(row.note.as_deref().unwrap().contains("no analysis"));
        }
        assert_eq!(table.worst_class(), Some(ErrorClass::Coverage));
        for agg in &table.aggregates {
            assert!(agg.value.is_nan());
            assert_eq!(agg.n_dates, 0);
        }
    }

    #[test]
    fn batch_mean_spectra_replace_dated_rows_with_one_per_lead() {
        let (mut plan, fc, truth, clim) = identity_setup();
        plan.metrics = [MetricKind::SpecDiv, MetricKind::SpecRes, MetricKind::Rmse]
            .into_iter()
            .collect();
        plan.spectra_mode = SpectraMode::BatchMean;
        let table = run_eval(&plan, Some(&fc), &truth, &clim).unwrap();
        let spectral: Vec<_> = table
            .rows
            .iter()
            .filter(|r| r.metric.is_spectral())
            .collect();
        assert_eq!(spectral.len(), 2 * 3);
        for row in &spectral {
            assert_eq!(row.init_date, None);
            assert!(row.note.is_none(), "{row:?}");
            assert!(row.value.abs() < 1e-9, "identity batch should score 0");
        }
        assert!(table
            .aggregates
            .iter()
            .all(|a| !a.metric.is_spectral()));
        let dated: usize = table
            .rows
            .iter()
            .filter(|r| r.metric == MetricKind::Rmse)
            .count();
        assert_eq!(dated, 6);
    }

    #[test]
    fn plan_validation_catches_bad_shapes() {
        let mut plan = EvalPlan {
            variables: vec!["t850".into()],
            leads: vec![1],
            init_dates: vec![date(2022, 1, 1)],
            metrics: [MetricKind::Rmse].into_iter().collect(),
            ..Default::default()
        };
        plan.validate().unwrap();
        plan.leads = vec![0];
        assert!(plan.validate().is_err());
        plan.leads = vec![61];
        assert!(plan.validate().is_err());
        plan.leads = vec![3, 2];
        assert!(plan.validate().is_err());
        plan.leads = vec![1];
        plan.metrics = [MetricKind::Crps].into_iter().collect();
        assert!(plan.validate().is_err(), "ensemble metric without size");
        plan.ensemble_size = Some(4);
        plan.validate().unwrap();
        plan.spectra_mode = SpectraMode::BatchMean;
        assert!(plan.validate().is_err(), "batch spectra are det-only");
    }

    #[test]
    fn ratio_of_identical_tables_is_one_and_keys_must_match() {
        let (plan, fc, truth, clim) = identity_setup();
        let table = run_eval(&plan, Some(&fc), &truth, &clim).unwrap();
        // ms_ssim aggregates are 1, rmse aggregates are 0: drop the
        // zero-valued keys so the plain-ratio half stays clean.
        let keep: Vec<AggregateRow> = table
            .aggregates
            .iter()
            .filter(|a| matches!(a.metric, MetricKind::Acc | MetricKind::MsSsim))
            .cloned()
            .collect();
        let halved = ScoreTable {
            rows: Vec::new(),
            aggregates: keep
                .iter()
                .cloned()
                .map(|mut a| {
                    a.value *= 2.0;
                    a
                })
                .collect(),
        };
        let trimmed = ScoreTable {
            rows: Vec::new(),
            aggregates: keep,
        };
        let ratio = metric_ratio(&trimmed, &halved).unwrap();
        for row in &ratio.rows {
            assert!((row.value - 0.5).abs() < 1e-12);
            assert_eq!(row.init_date, None);
        }
        let missing = ScoreTable {
            rows: Vec::new(),
            aggregates: trimmed.aggregates[1..].to_vec(),
        };
        assert!(metric_ratio(&trimmed, &missing).is_err());
    }

    #[test]
    fn ratio_flags_zero_denominators() {
        let agg = |metric, value| AggregateRow {
            metric,
            variable: "t850".into(),
            lead: 1,
            value,
            n_dates: 2,
        };
        let num = ScoreTable {
            rows: Vec::new(),
            aggregates: vec![agg(MetricKind::Rmse, 1.5)],
        };
        let den = ScoreTable {
            rows: Vec::new(),
            aggregates: vec![agg(MetricKind::Rmse, 0.0)],
        };
        let ratio = metric_ratio(&num, &den).unwrap();
        assert!(ratio.rows[0].value.is_nan());
        assert_eq!(ratio.rows[0].class, Some(ErrorClass::Degenerate));
    }

    #[test]
    fn skill_horizon_definition_cases() {
        let series: Vec<(u32, f64)> = (1..=20)
            .map(|l| (l, if l <= 15 { 0.5 } else { -0.1 }))
            .collect();
        assert_eq!(skill_horizon(&series).unwrap(), Some(16));

        let oscillating: Vec<(u32, f64)> = (1..=20)
            .map(|l| {
                let v = if (10..12).contains(&l) {
                    -0.05
                } else if l >= 18 {
                    -0.2
                } else {
                    0.3
                };
                (l, v)
            })
            .collect();
        assert_eq!(skill_horizon(&oscillating).unwrap(), Some(18));

        let positive: Vec<(u32, f64)> = (1..=10).map(|l| (l, 0.2)).collect();
        assert_eq!(skill_horizon(&positive).unwrap(), None);

        let all_bad: Vec<(u32, f64)> = (1..=4).map(|l| (l, -0.2)).collect();
        assert_eq!(skill_horizon(&all_bad).unwrap(), Some(1));

        assert!(skill_horizon(&[]).is_err());
        assert!(skill_horizon(&[(1, 0.1), (3, -0.1)]).is_err());
        assert!(skill_horizon(&[(1, f64::NAN)]).is_err());
    }

    #[test]
    fn zero_exactly_counts_as_no_skill() {
        let series = vec![(1, 0.4), (2, 0.0), (3, 0.0)];
        assert_eq!(skill_horizon(&series).unwrap(), Some(2));
    }
}
