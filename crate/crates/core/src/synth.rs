//! Synthetic fields for tests and benchmarks: Gaussian random fields with
//! a tunable spectral slope, ensembles perturbed with iid noise, spectral
//! low-pass blurring, and linearly drifting series.
//!
//! Everything is keyed by a counter-based scheme on ChaCha8: the
//! configured seed picks the key and the date (days since the common era)
//! or member index picks the stream, so any field can be regenerated in
//! isolation and results do not depend on generation order.

use std::sync::Arc;

use chrono::{Datelike, Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::grid::{FieldMeta, GridField, GridSpec};
use crate::num::Real;
use crate::probabilistic::EnsembleField;
use crate::spectral::{bin_of_mode, fft2_forward, fft2_inverse, max_bin, mean_filled};

/// Knobs for the generator. `spectrum_slope` is the alpha in the target
/// binned power law k^-alpha; `base_amplitude` scales the whole spectrum.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub spec: Arc<GridSpec>,
    pub variable: String,
    pub level: String,
    pub seed: u64,
    pub spectrum_slope: f64,
    pub base_amplitude: f64,
    pub ensemble_noise_std: f64,
    pub drift_per_day: f64,
}

impl SynthConfig {
    pub fn new(spec: Arc<GridSpec>) -> SynthConfig {
        SynthConfig {
            spec,
            variable: "t850".into(),
            level: "850".into(),
            seed: 0,
            spectrum_slope: 3.0,
            base_amplitude: 1.0,
            ensemble_noise_std: 0.1,
            drift_per_day: 0.05,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.spec.n_lat() < 2 || self.spec.n_lon() < 2 {
            return Err(Error::DegenerateGrid(format!(
                "the generator needs at least a 2x2 grid, got {}x{}",
                self.spec.n_lat(),
                self.spec.n_lon()
            )));
        }
        if !self.spectrum_slope.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "spectrum slope must be finite, got {}",
                self.spectrum_slope
            )));
        }
        if !(self.base_amplitude > 0.0) || !self.base_amplitude.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "base amplitude must be positive and finite, got {}",
                self.base_amplitude
            )));
        }
        Ok(())
    }
}

fn date_stream(date: NaiveDate) -> u64 {
    date.num_days_from_ce() as i64 as u64
}

/// Zero-mean Gaussian random field whose binned power spectrum averages
/// `base_amplitude^2 * k^-slope`.
///
/// White noise is drawn in physical space (so the transform is already
/// conjugate-symmetric), shaped per wavenumber bin — dividing by the bin's
/// mode count so the *binned* spectrum, not the per-mode one, follows the
/// power law — and transformed back. The k = 0 mode is zeroed.
pub fn gaussian_random_field<T: Real>(
    cfg: &SynthConfig,
    date: NaiveDate,
) -> Result<GridField<T>> {
    cfg.validate()?;
    let (h, w) = (cfg.spec.n_lat(), cfg.spec.n_lon());
    let npix = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(date_stream(date));
    let mut buf: Vec<Complex<T>> = (0..npix)
        .map(|_| Complex::new(T::of(rng.sample::<f64, _>(StandardNormal)), T::zero()))
        .collect();
    fft2_forward(&mut buf, h, w);
    let bins = bin_of_mode(h, w);
    let mut mode_count = vec![0usize; max_bin(h, w) + 1];
    for &k in &bins {
        mode_count[k as usize] += 1;
    }
    for (c, &k) in buf.iter_mut().zip(&bins) {
        if k == 0 {
            *c = Complex::new(T::zero(), T::zero());
        } else {
            let gain = cfg.base_amplitude
                * (k as f64).powf(-cfg.spectrum_slope / 2.0)
                / ((mode_count[k as usize] * npix) as f64).sqrt();
            *c = *c * T::of(gain);
        }
    }
    fft2_inverse(&mut buf, h, w);
    let values: Vec<T> = buf.into_iter().map(|c| c.re).collect();
    GridField::new(
        Arc::clone(&cfg.spec),
        values,
        FieldMeta::analysis(&cfg.variable, &cfg.level, date),
    )
}

/// One independent field per day, starting at `start`.
pub fn truth_series<T: Real>(
    cfg: &SynthConfig,
    start: NaiveDate,
    n_days: usize,
) -> Result<Vec<GridField<T>>> {
    if n_days == 0 {
        return Err(Error::InvalidArgument("series needs at least one day".into()));
    }
    (0..n_days)
        .map(|i| gaussian_random_field(cfg, offset_date(start, i)?))
        .collect()
}

/// A base field that gains `drift_per_day` everywhere each day. Persisting
/// day 0 against this series leaves a uniform residual, so its RMSE grows
/// exactly linearly in lead.
pub fn drifting_series<T: Real>(
    cfg: &SynthConfig,
    start: NaiveDate,
    n_days: usize,
) -> Result<Vec<GridField<T>>> {
    if n_days == 0 {
        return Err(Error::InvalidArgument("series needs at least one day".into()));
    }
    let base = gaussian_random_field::<T>(cfg, start)?;
    let mut out = Vec::with_capacity(n_days);
    for i in 0..n_days {
        let shift = T::of(cfg.drift_per_day * i as f64);
        let mut field = base.map(|v| v + shift);
        field.meta_mut().valid_time = offset_date(start, i)?;
        out.push(field);
    }
    Ok(out)
}

fn offset_date(start: NaiveDate, days: usize) -> Result<NaiveDate> {
    start
        .checked_add_days(Days::new(days as u64))
        .ok_or_else(|| Error::InvalidArgument("date range leaves the calendar".into()))
}

/// Truth plus iid Gaussian noise per member. Member `i` always draws from
/// stream `i` of the given seed, so growing the ensemble keeps existing
/// members unchanged.
pub fn make_ensemble<T: Real>(
    truth: &GridField<T>,
    n_members: usize,
    noise_std: f64,
    seed: u64,
) -> Result<EnsembleField<T>> {
    if n_members == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise std must be finite and non-negative, got {noise_std}"
        )));
    }
    let mut members = Vec::with_capacity(n_members);
    for m in 0..n_members {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(m as u64);
        let values: Vec<T> = truth
            .values()
            .iter()
            .map(|&v| v + T::of(noise_std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        members.push(GridField::new(
            Arc::clone(truth.spec()),
            values,
            truth.meta().clone(),
        )?);
    }
    EnsembleField::new(members)
}

/// Low-pass the field in spectral space: every mode in a wavenumber bin
/// above `cutoff_k` is zeroed. A cutoff at or above the grid's largest bin
/// returns the field unchanged; NaN cells are mean-filled for the
/// transform and restored afterwards.
pub fn blur_field<T: Real>(field: &GridField<T>, cutoff_k: u32) -> Result<GridField<T>> {
    if cutoff_k == 0 {
        return Err(Error::InvalidArgument(
            "a cutoff of 0 would erase everything but the mean; use k >= 1".into(),
        ));
    }
    let (h, w) = (field.spec().n_lat(), field.spec().n_lon());
    if h < 2 || w < 2 {
        return Err(Error::DegenerateGrid(format!(
            "spectral blur needs at least a 2x2 grid, got {h}x{w}"
        )));
    }
    if cutoff_k as usize >= max_bin(h, w) {
        return Ok(field.clone());
    }
    let filled = mean_filled(field)?;
    let mut buf: Vec<Complex<T>> = filled
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .collect();
    fft2_forward(&mut buf, h, w);
    for (c, &k) in buf.iter_mut().zip(&bin_of_mode(h, w)) {
        if k > cutoff_k {
            *c = Complex::new(T::zero(), T::zero());
        }
    }
    fft2_inverse(&mut buf, h, w);
    let values: Vec<T> = buf
        .iter()
        .zip(field.values())
        .map(|(c, &orig)| if orig.is_nan() { orig } else { c.re })
        .collect();
    GridField::new(Arc::clone(field.spec()), values, field.meta().clone())
}
