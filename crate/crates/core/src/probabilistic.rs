//! Ensemble metrics: member-averaged deterministic scores, CRPS and its
//! skill score, spread, and the spread/skill ratio.
//!
//! Latitude weighting enters on the score side by default — per-pixel
//! scores are reduced with the same weighted mean the deterministic
//! metrics use. The value-side variant (weighting the member and truth
//! values before scoring, plain mean afterwards) is kept as a
//! compatibility mode; the two agree on fully valid grids because CRPS is
//! positively homogeneous in its arguments.

use std::sync::Arc;

use crate::deterministic::{self, MsSsimParams};
use crate::error::{Error, Result};
use crate::grid::{Climatology, GridField, LatWeights};
use crate::num::Real;
use crate::spectral;
use crate::sum::CompensatedSum;

/// An ensemble forecast: one or more members on a shared grid with shared
/// metadata and an identical NaN mask.
#[derive(Debug, Clone)]
pub struct EnsembleField<T> {
    members: Vec<GridField<T>>,
}

impl<T: Real> EnsembleField<T> {
    pub fn new(members: Vec<GridField<T>>) -> Result<EnsembleField<T>> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one member".into()))?;
        for m in &members[1..] {
            if !m.same_grid(first) {
                return Err(Error::GridMismatch("members are on different grids".into()));
            }
            if m.meta() != first.meta() {
                return Err(Error::InvalidArgument(
                    "members disagree on variable/level/valid_time/lead".into(),
                ));
            }
            let masks_match = m
                .values()
                .iter()
                .zip(first.values())
                .all(|(a, b)| a.is_nan() == b.is_nan());
            if !masks_match {
                return Err(Error::InvalidArgument(
                    "members have different NaN masks".into(),
                ));
            }
        }
        Ok(EnsembleField { members })
    }

    pub fn members(&self) -> &[GridField<T>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn spec(&self) -> &Arc<crate::grid::GridSpec> {
        self.members[0].spec()
    }

    pub fn meta(&self) -> &crate::grid::FieldMeta {
        self.members[0].meta()
    }

    /// Per-pixel mean over members (the ensemble-mean forecast).
    pub fn mean_field(&self) -> GridField<T> {
        let cells = self.spec().cells();
        let n = T::of(self.members.len() as f64);
        let mut vals = vec![T::zero(); cells];
        for px in 0..cells {
            let mut acc = CompensatedSum::new();
            for m in &self.members {
                acc.add(m.values()[px]);
            }
            vals[px] = acc.value() / n;
        }
        GridField::new(Arc::clone(self.spec()), vals, self.meta().clone())
            .expect("mean keeps the member shape")
    }
}

/// Deterministic metric lifted to ensembles by averaging over members.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointMetric {
    Rmse,
    Bias,
    Acc,
    MsSsim,
    SpecDiv,
    SpecRes,
}

/// Shared knobs for [`ensemble_metric`].
#[derive(Debug, Clone)]
pub struct ScoreContext<T> {
    pub weights: LatWeights<T>,
    pub ms_ssim: MsSsimParams,
    /// Wavenumber-band quantile for the spectral metrics.
    pub q: f64,
}

/// Mean over members of a deterministic metric against one truth field.
///
/// For `Acc` the members and the truth must already be anomalies; for the
/// spectral metrics each member's spectrum is computed, restricted at
/// `ctx.q`, and compared to the truth spectrum.
pub fn ensemble_metric<T: Real>(
    metric: PointMetric,
    ens: &EnsembleField<T>,
    truth: &GridField<T>,
    ctx: &ScoreContext<T>,
) -> Result<T> {
    let truth_spectrum = match metric {
        PointMetric::SpecDiv | PointMetric::SpecRes => Some(spectral::restrict_and_normalize(
            &spectral::power_spectrum(truth)?,
            ctx.q,
        )?),
        _ => None,
    };
    let mut acc = CompensatedSum::new();
    for member in ens.members() {
        let v = match metric {
            PointMetric::Rmse => deterministic::rmse(member, truth, &ctx.weights)?,
            PointMetric::Bias => deterministic::bias(member, truth, &ctx.weights)?,
            PointMetric::Acc => deterministic::acc(member, truth, &ctx.weights)?,
            PointMetric::MsSsim => deterministic::ms_ssim(member, truth, &ctx.ms_ssim)?,
            PointMetric::SpecDiv | PointMetric::SpecRes => {
                let ts = truth_spectrum.as_ref().expect("computed above");
                let ms = spectral::restrict_and_normalize(
                    &spectral::power_spectrum(member)?,
                    ctx.q,
                )?;
                match metric {
                    PointMetric::SpecDiv => spectral::spec_div(&ms, ts)?,
                    _ => spectral::spec_res(&ms, ts)?,
                }
            }
        };
        acc.add(v);
    }
    Ok(acc.value() / T::of(ens.len() as f64))
}

/// Where the latitude weight enters a probabilistic score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrpsWeighting {
    /// Weighted mean of per-pixel scores (weights renormalized over valid
    /// cells).
    #[default]
    Score,
    /// Member and truth values are multiplied by w first; per-pixel scores
    /// are then averaged without weights.
    Value,
}

impl std::str::FromStr for CrpsWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<CrpsWeighting> {
        match s {
            "score" => Ok(CrpsWeighting::Score),
            "value" => Ok(CrpsWeighting::Value),
            other => Err(Error::InvalidArgument(format!(
                "unknown weighting '{other}' (expected score or value)"
            ))),
        }
    }
}

fn check_ens_truth<T: Real>(ens: &EnsembleField<T>, truth: &GridField<T>) -> Result<()> {
    if !ens.members()[0].same_grid(truth) {
        return Err(Error::GridMismatch(
            "ensemble and truth grids differ".into(),
        ));
    }
    Ok(())
}

/// Per-pixel CRPS of a sorted member sample against one observation, via
/// the exact finite-ensemble identity
/// mean |x_i - y| - mean-over-pairs |x_i - x_j| / 2.
#[inline]
fn crps_cell<T: Real>(sorted: &[T], y: T) -> T {
    let n = sorted.len();
    let nf = T::of(n as f64);
    let mut abs_err = T::zero();
    for &x in sorted {
        abs_err += (x - y).abs();
    }
    // For ascending x, sum over ordered pairs of |x_i - x_j| equals
    // 2 * sum_k (2k - n + 1) x_k with k zero-based.
    let mut pair = T::zero();
    for (k, &x) in sorted.iter().enumerate() {
        pair += T::of((2 * k + 1) as f64 - nf.to_f64_lossy()) * x;
    }
    abs_err / nf - pair / (nf * nf)
}

/// Continuous ranked probability score of an ensemble against truth,
/// reduced over the grid per `weighting`.
///
/// A single-member ensemble reduces to the weighted mean absolute error
/// through the same reduction code path, bit for bit.
pub fn crps<T: Real>(
    ens: &EnsembleField<T>,
    truth: &GridField<T>,
    weights: &LatWeights<T>,
    weighting: CrpsWeighting,
) -> Result<T> {
    check_ens_truth(ens, truth)?;
    let spec = truth.spec();
    if weights.n_lat() != spec.n_lat() {
        return Err(Error::InvalidArgument(format!(
            "weights cover {} rows but grid has {}",
            weights.n_lat(),
            spec.n_lat()
        )));
    }
    let n_lon = spec.n_lon();
    let n = ens.len();
    let mut sample = vec![T::zero(); n];
    let mut num = CompensatedSum::new();
    let mut den = CompensatedSum::new();
    let mut valid = 0usize;
    for (px, &y) in truth.values().iter().enumerate() {
        let member0 = ens.members()[0].values()[px];
        if y.is_nan() || member0.is_nan() {
            continue;
        }
        let w = weights.row(px / n_lon);
        let cell = match weighting {
            CrpsWeighting::Score => {
                for (slot, m) in sample.iter_mut().zip(ens.members()) {
                    *slot = m.values()[px];
                }
                sample.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in members"));
                crps_cell(&sample, y)
            }
            CrpsWeighting::Value => {
                for (slot, m) in sample.iter_mut().zip(ens.members()) {
                    *slot = w * m.values()[px];
                }
                sample.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in members"));
                crps_cell(&sample, w * y)
            }
        };
        match weighting {
            CrpsWeighting::Score => {
                num.add(w * cell);
                den.add(w);
            }
            CrpsWeighting::Value => {
                num.add(cell);
                den.add(T::one());
            }
        }
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::AllMasked);
    }
    let den = den.value();
    if den <= T::zero() {
        return Err(Error::DegenerateGrid(
            "weights vanish on every valid cell".into(),
        ));
    }
    Ok(num.value() / den)
}

/// CRPS skill relative to a reference (usually the climatology ensemble):
/// 1 - crps_forecast / crps_reference.
pub fn crpss<T: Real>(crps_forecast: T, crps_reference: T) -> Result<T> {
    if !(crps_reference > T::zero()) {
        return Err(Error::UndefinedSkill(format!(
            "reference CRPS must be positive, got {crps_reference}"
        )));
    }
    Ok(T::one() - crps_forecast / crps_reference)
}

/// Ensemble spread: weighted grid mean of the per-pixel across-member
/// sample standard deviation (N-1 convention). Needs at least two members.
pub fn spread<T: Real>(
    ens: &EnsembleField<T>,
    weights: &LatWeights<T>,
) -> Result<T> {
    if ens.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "spread needs at least 2 members, got {}",
            ens.len()
        )));
    }
    let spec = ens.spec();
    if weights.n_lat() != spec.n_lat() {
        return Err(Error::InvalidArgument(format!(
            "weights cover {} rows but grid has {}",
            weights.n_lat(),
            spec.n_lat()
        )));
    }
    let n_lon = spec.n_lon();
    let n = T::of(ens.len() as f64);
    let nm1 = T::of((ens.len() - 1) as f64);
    let mut num = CompensatedSum::new();
    let mut den = CompensatedSum::new();
    let mut valid = 0usize;
    for px in 0..spec.cells() {
        if ens.members()[0].values()[px].is_nan() {
            continue;
        }
        let mut mean = CompensatedSum::new();
        for m in ens.members() {
            mean.add(m.values()[px]);
        }
        let mu = mean.value() / n;
        let mut var = CompensatedSum::new();
        for m in ens.members() {
            let d = m.values()[px] - mu;
            var.add(d * d);
        }
        let sd = (var.value() / nm1).max(T::zero()).sqrt();
        let w = weights.row(px / n_lon);
        num.add(w * sd);
        den.add(w);
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::AllMasked);
    }
    let den = den.value();
    if den <= T::zero() {
        return Err(Error::DegenerateGrid(
            "weights vanish on every valid cell".into(),
        ));
    }
    Ok(num.value() / den)
}

/// Spread divided by the member-averaged RMSE. Near 1 for a calibrated
/// ensemble (up to sample-size conventions).
pub fn spread_skill_ratio<T: Real>(
    ens: &EnsembleField<T>,
    truth: &GridField<T>,
    ctx: &ScoreContext<T>,
) -> Result<T> {
    check_ens_truth(ens, truth)?;
    let s = spread(ens, &ctx.weights)?;
    let r = ensemble_metric(PointMetric::Rmse, ens, truth, ctx)?;
    if !(r > T::zero()) {
        return Err(Error::UndefinedSkill(format!(
            "ensemble RMSE must be positive for the spread/skill ratio, got {r}"
        )));
    }
    Ok(s / r)
}

/// The climatology viewed as an empirical ensemble: one member per
/// training field covering the target day-of-year. Requires a climatology
/// built with `keep_samples`.
pub fn climatology_ensemble<T: Real>(
    clim: &Climatology<T>,
    valid_time: chrono::NaiveDate,
) -> Result<EnsembleField<T>> {
    let samples = clim.samples_for(valid_time).ok_or_else(|| {
        Error::InvalidArgument(
            "climatology was built without samples; rebuild with keep_samples".into(),
        )
    })?;
    if samples.is_empty() {
        return Err(Error::MissingCoverage(format!(
            "no climatology samples for {valid_time}"
        )));
    }
    let meta = crate::grid::FieldMeta {
        variable: clim.variable().to_string(),
        level: clim.level().to_string(),
        valid_time,
        lead_days: 0,
    };
    let members = samples
        .iter()
        .map(|vals| GridField::new(Arc::clone(clim.spec()), vals.clone(), meta.clone()))
        .collect::<Result<Vec<_>>>()?;
    EnsembleField::new(members)
}
