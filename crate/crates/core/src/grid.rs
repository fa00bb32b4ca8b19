//! Grids, fields, latitude weights, and day-of-year climatology.
//!
//! A [`GridSpec`] is a regular latitude/longitude lattice stored
//! north-to-south; [`GridField`] is one 2-D scalar field on such a lattice
//! with NaN marking missing cells. [`LatWeights`] carries the
//! cosine-latitude area weights every weighted metric uses, and
//! [`Climatology`] holds per-pixel day-of-year means and standard
//! deviations over a set of training years.

use std::sync::Arc;

use chrono::{Datelike, NaiveDate};

use crate::error::{Error, Result};
use crate::num::Real;
use crate::sum::{csum, CompensatedSum};

/// Regular lat/lon lattice. Latitudes are strictly monotonic and held
/// north-to-south; longitudes are uniformly spaced modulo 360.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    lats: Vec<f64>,
    lons: Vec<f64>,
}

impl GridSpec {
    /// Builds a spec from raw coordinates. Ascending latitude input is
    /// accepted and flipped so the stored order is always north-to-south.
    pub fn new(lats: Vec<f64>, lons: Vec<f64>) -> Result<Arc<GridSpec>> {
        if lats.is_empty() || lons.is_empty() {
            return Err(Error::InvalidArgument(
                "grid needs at least one latitude and one longitude".into(),
            ));
        }
        if lats.iter().any(|l| !l.is_finite() || l.abs() > 90.0) {
            return Err(Error::InvalidArgument(
                "latitudes must be finite and within [-90, 90]".into(),
            ));
        }
        if lons.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidArgument("longitudes must be finite".into()));
        }
        let ascending = lats.windows(2).all(|p| p[0] < p[1]);
        let descending = lats.windows(2).all(|p| p[0] > p[1]);
        if !ascending && !descending {
            return Err(Error::InvalidArgument(
                "latitudes must be strictly monotonic".into(),
            ));
        }
        let mut lats = lats;
        if ascending && lats.len() > 1 {
            lats.reverse();
        }
        if lons.len() > 1 {
            let step = lons[1] - lons[0];
            if step == 0.0 {
                return Err(Error::InvalidArgument("longitude step is zero".into()));
            }
            for w in lons.windows(2) {
                let d = w[1] - w[0];
                // Uniform spacing modulo 360 tolerates the wrap cell.
                let wrapped = (d - step).rem_euclid(360.0);
                if wrapped.min(360.0 - wrapped) > 1e-9 {
                    return Err(Error::InvalidArgument(
                        "longitudes must be uniformly spaced modulo 360".into(),
                    ));
                }
            }
        }
        Ok(Arc::new(GridSpec { lats, lons }))
    }

    /// Global uniform grid: `n_lat` latitudes from +90 to -90 inclusive,
    /// `n_lon` longitudes from 0 east in equal steps.
    pub fn global(n_lat: usize, n_lon: usize) -> Result<Arc<GridSpec>> {
        if n_lat < 2 || n_lon < 1 {
            return Err(Error::InvalidArgument(
                "global grid needs n_lat >= 2 and n_lon >= 1".into(),
            ));
        }
        let dlat = 180.0 / (n_lat - 1) as f64;
        let lats = (0..n_lat).map(|i| 90.0 - i as f64 * dlat).collect();
        let dlon = 360.0 / n_lon as f64;
        let lons = (0..n_lon).map(|j| j as f64 * dlon).collect();
        GridSpec::new(lats, lons)
    }

    pub fn n_lat(&self) -> usize {
        self.lats.len()
    }

    pub fn n_lon(&self) -> usize {
        self.lons.len()
    }

    pub fn cells(&self) -> usize {
        self.lats.len() * self.lons.len()
    }

    /// Latitudes, north-to-south.
    pub fn lats(&self) -> &[f64] {
        &self.lats
    }

    pub fn lons(&self) -> &[f64] {
        &self.lons
    }
}

/// One scalar field on a grid. `values` is row-major, row 0 = northernmost
/// latitude. NaN cells are missing data.
#[derive(Debug, Clone)]
pub struct GridField<T> {
    spec: Arc<GridSpec>,
    values: Vec<T>,
    meta: FieldMeta,
}

/// What the field is and when it is valid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldMeta {
    pub variable: String,
    pub level: String,
    pub valid_time: NaiveDate,
    /// Lead in whole calendar days; 0 for analyses/observations.
    pub lead_days: u32,
}

impl FieldMeta {
    pub fn analysis(variable: &str, level: &str, valid_time: NaiveDate) -> FieldMeta {
        FieldMeta {
            variable: variable.to_string(),
            level: level.to_string(),
            valid_time,
            lead_days: 0,
        }
    }
}

impl<T: Real> GridField<T> {
    /// Wraps values already in canonical (north-to-south) row order.
    pub fn new(spec: Arc<GridSpec>, values: Vec<T>, meta: FieldMeta) -> Result<GridField<T>> {
        if values.len() != spec.cells() {
            return Err(Error::InvalidArgument(format!(
                "value buffer holds {} cells but grid is {}x{}",
                values.len(),
                spec.n_lat(),
                spec.n_lon()
            )));
        }
        Ok(GridField { spec, values, meta })
    }

    /// Builds a field from raw file-order rows, flipping to canonical
    /// north-to-south order when the latitudes arrive ascending.
    pub fn from_rows(
        lats: Vec<f64>,
        lons: Vec<f64>,
        mut values: Vec<T>,
        meta: FieldMeta,
    ) -> Result<GridField<T>> {
        let ascending = lats.len() > 1 && lats.windows(2).all(|p| p[0] < p[1]);
        let n_lon = lons.len();
        let spec = GridSpec::new(lats, lons)?;
        if values.len() != spec.cells() {
            return Err(Error::InvalidArgument(format!(
                "value buffer holds {} cells but grid is {}x{}",
                values.len(),
                spec.n_lat(),
                spec.n_lon()
            )));
        }
        if ascending {
            let n_lat = spec.n_lat();
            for i in 0..n_lat / 2 {
                let (a, b) = (i * n_lon, (n_lat - 1 - i) * n_lon);
                for j in 0..n_lon {
                    values.swap(a + j, b + j);
                }
            }
        }
        GridField::new(spec, values, meta)
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn meta(&self) -> &FieldMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut FieldMeta {
        &mut self.meta
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> T {
        self.values[row * self.spec.n_lon() + col]
    }

    pub fn has_nan(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    /// Same grid, by value.
    pub fn same_grid(&self, other: &GridField<T>) -> bool {
        Arc::ptr_eq(&self.spec, &other.spec) || self.spec == other.spec
    }

    /// Returns a copy with every value mapped through `f` (metadata kept).
    pub fn map(&self, f: impl Fn(T) -> T) -> GridField<T> {
        GridField {
            spec: Arc::clone(&self.spec),
            values: self.values.iter().map(|&v| f(v)).collect(),
            meta: self.meta.clone(),
        }
    }
}

/// Cosine-latitude weights normalized so their mean over rows is 1.
#[derive(Debug, Clone)]
pub struct LatWeights<T> {
    per_row: Vec<T>,
}

impl<T: Real> LatWeights<T> {
    pub fn per_row(&self) -> &[T] {
        &self.per_row
    }

    #[inline]
    pub fn row(&self, i: usize) -> T {
        self.per_row[i]
    }

    pub fn n_lat(&self) -> usize {
        self.per_row.len()
    }

    /// All-ones weights, handy when a test wants unweighted reductions.
    pub fn uniform(n_lat: usize) -> LatWeights<T> {
        LatWeights {
            per_row: vec![T::one(); n_lat],
        }
    }
}

/// Cosine-latitude weights for a grid: w(lat) = cos(lat) / mean(cos).
///
/// Pole rows get weight exactly 0 (their cosine is forced to zero rather
/// than left at the ~1e-17 rounding residue of `cos`). Errors if every row
/// is a pole, since the normalizer would vanish.
pub fn build_lat_weights<T: Real>(spec: &GridSpec) -> Result<LatWeights<T>> {
    let cosines: Vec<f64> = spec
        .lats()
        .iter()
        .map(|&lat| {
            if lat.abs() == 90.0 {
                0.0
            } else {
                lat.to_radians().cos()
            }
        })
        .collect();
    let mean = csum(cosines.iter().copied()) / cosines.len() as f64;
    if mean <= 0.0 {
        return Err(Error::DegenerateGrid(
            "cosine-latitude normalizer is zero (all rows at the poles)".into(),
        ));
    }
    let per_row = cosines.iter().map(|&c| T::of(c / mean)).collect();
    Ok(LatWeights { per_row })
}

/// Index a calendar date into the 366-slot day-of-year table.
///
/// Feb 29 maps to slot 366; every other date maps to its ordinal in a
/// non-leap year (so Mar 1 is always 60 and Dec 31 always 365, regardless
/// of leapness).
pub fn day_of_year_slot(date: NaiveDate) -> usize {
    let ord = date.ordinal() as usize;
    if date.month() == 2 && date.day() == 29 {
        366
    } else if date.leap_year() && ord >= 61 {
        ord - 1
    } else {
        ord
    }
}

/// Inverse of [`day_of_year_slot`] onto the year 2000 (a leap year), used
/// when a slot must be rendered as a concrete date.
pub fn slot_to_date_2000(slot: usize) -> Option<NaiveDate> {
    match slot {
        366 => NaiveDate::from_ymd_opt(2000, 2, 29),
        1..=59 => NaiveDate::from_yo_opt(2000, slot as u32),
        60..=365 => NaiveDate::from_yo_opt(2000, slot as u32 + 1),
        _ => None,
    }
}

/// Options for [`build_climatology`].
#[derive(Debug, Clone, Default)]
pub struct ClimatologyOptions {
    /// Odd width (in days) of an optional centered circular moving average
    /// applied to the daily mean fields. 0 or 1 leaves the raw means.
    pub smoothing_window: usize,
    /// Keep the per-slot training fields so the climatology can later be
    /// used as an empirical ensemble.
    pub keep_samples: bool,
}

/// Per-pixel day-of-year mean and standard deviation over training years.
#[derive(Debug, Clone)]
pub struct Climatology<T> {
    spec: Arc<GridSpec>,
    variable: String,
    level: String,
    source_years: Vec<i32>,
    /// 366 slots, each `cells()` long.
    mean: Vec<Vec<T>>,
    /// Population standard deviation, same layout as `mean`.
    std: Vec<Vec<T>>,
    /// Training fields per slot when built with `keep_samples`.
    samples: Option<Vec<Vec<Vec<T>>>>,
}

impl<T: Real> Climatology<T> {
    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    pub fn variable(&self) -> &str {
        &self.variable
    }

    pub fn level(&self) -> &str {
        &self.level
    }

    pub fn source_years(&self) -> &[i32] {
        &self.source_years
    }

    /// Mean field for the slot covering `date`.
    pub fn mean_for(&self, date: NaiveDate) -> &[T] {
        &self.mean[day_of_year_slot(date) - 1]
    }

    pub fn std_for(&self, date: NaiveDate) -> &[T] {
        &self.std[day_of_year_slot(date) - 1]
    }

    pub fn mean_slot(&self, slot: usize) -> &[T] {
        &self.mean[slot - 1]
    }

    pub fn std_slot(&self, slot: usize) -> &[T] {
        &self.std[slot - 1]
    }

    /// Raw training fields for the slot covering `date`, if kept.
    pub fn samples_for(&self, date: NaiveDate) -> Option<&[Vec<T>]> {
        self.samples
            .as_ref()
            .map(|s| s[day_of_year_slot(date) - 1].as_slice())
    }

    pub fn has_samples(&self) -> bool {
        self.samples.is_some()
    }

    /// Assembles a climatology from precomputed slot tables (used by the
    /// file reader). Every slot 1..=366 must be present.
    pub fn from_parts(
        spec: Arc<GridSpec>,
        variable: String,
        level: String,
        source_years: Vec<i32>,
        mean: Vec<Vec<T>>,
        std: Vec<Vec<T>>,
    ) -> Result<Climatology<T>> {
        if mean.len() != 366 || std.len() != 366 {
            return Err(Error::MissingCoverage(format!(
                "climatology must cover 366 day-of-year slots, got {} mean / {} std",
                mean.len(),
                std.len()
            )));
        }
        for (i, (m, s)) in mean.iter().zip(&std).enumerate() {
            if m.len() != spec.cells() || s.len() != spec.cells() {
                return Err(Error::InvalidArgument(format!(
                    "climatology slot {} has wrong cell count",
                    i + 1
                )));
            }
        }
        Ok(Climatology {
            spec,
            variable,
            level,
            source_years,
            mean,
            std,
            samples: None,
        })
    }
}

/// Builds a day-of-year climatology from training fields.
///
/// Every slot 1..=365 must be covered by at least two training fields;
/// slot 366 uses actual Feb-29 fields when two or more exist and otherwise
/// copies slot 365. The standard deviation is the population one
/// (divide by N). NaN cells are skipped per pixel; a pixel with no valid
/// sample stays NaN.
pub fn build_climatology<T: Real>(
    fields: &[GridField<T>],
    opts: &ClimatologyOptions,
) -> Result<Climatology<T>> {
    let first = fields
        .first()
        .ok_or_else(|| Error::MissingCoverage("no training fields supplied".into()))?;
    let spec = Arc::clone(first.spec());
    let variable = first.meta().variable.clone();
    let level = first.meta().level.clone();
    if opts.smoothing_window > 1 && opts.smoothing_window % 2 == 0 {
        return Err(Error::InvalidArgument(
            "smoothing window must be odd".into(),
        ));
    }

    let mut slots: Vec<Vec<&GridField<T>>> = vec![Vec::new(); 366];
    let mut years: Vec<i32> = Vec::new();
    for f in fields {
        if !f.same_grid(first) {
            return Err(Error::GridMismatch(
                "training fields are on different grids".into(),
            ));
        }
        if f.meta().variable != variable || f.meta().level != level {
            return Err(Error::InvalidArgument(format!(
                "training fields mix variables: {}/{} vs {}/{}",
                variable,
                level,
                f.meta().variable,
                f.meta().level
            )));
        }
        slots[day_of_year_slot(f.meta().valid_time) - 1].push(f);
        let y = f.meta().valid_time.year();
        if !years.contains(&y) {
            years.push(y);
        }
    }
    years.sort_unstable();

    for (i, bucket) in slots.iter().enumerate().take(365) {
        if bucket.len() < 2 {
            let day = slot_to_date_2000(i + 1).expect("slot in range");
            return Err(Error::MissingCoverage(format!(
                "day-of-year {} ({}) has {} training field(s), need at least 2",
                i + 1,
                day.format("%b %d"),
                bucket.len()
            )));
        }
    }

    let cells = spec.cells();
    let stats = |bucket: &[&GridField<T>]| -> (Vec<T>, Vec<T>) {
        let mut mean = vec![T::nan(); cells];
        let mut std = vec![T::nan(); cells];
        for px in 0..cells {
            let mut acc = CompensatedSum::new();
            let mut n = 0usize;
            for f in bucket {
                let v = f.values()[px];
                if !v.is_nan() {
                    acc.add(v);
                    n += 1;
                }
            }
            if n == 0 {
                continue;
            }
            let m = acc.value() / T::of(n as f64);
            let mut var = CompensatedSum::new();
            for f in bucket {
                let v = f.values()[px];
                if !v.is_nan() {
                    let d = v - m;
                    var.add(d * d);
                }
            }
            mean[px] = m;
            std[px] = (var.value() / T::of(n as f64)).max(T::zero()).sqrt();
        }
        (mean, std)
    };

    let mut mean: Vec<Vec<T>> = Vec::with_capacity(366);
    let mut std: Vec<Vec<T>> = Vec::with_capacity(366);
    let mut samples: Vec<Vec<Vec<T>>> = Vec::with_capacity(366);
    for bucket in slots.iter().take(365) {
        let (m, s) = stats(bucket);
        mean.push(m);
        std.push(s);
        samples.push(bucket.iter().map(|f| f.values().to_vec()).collect());
    }
    // Slot 366: real Feb-29 data when there is enough of it, else a copy of
    // slot 365.
    if slots[365].len() >= 2 {
        let (m, s) = stats(&slots[365]);
        mean.push(m);
        std.push(s);
        samples.push(slots[365].iter().map(|f| f.values().to_vec()).collect());
    } else {
        mean.push(mean[364].clone());
        std.push(std[364].clone());
        samples.push(samples[364].clone());
    }

    if opts.smoothing_window > 1 {
        mean = smooth_circular(&mean, opts.smoothing_window, cells);
    }

    Ok(Climatology {
        spec,
        variable,
        level,
        source_years: years,
        mean,
        std,
        samples: opts.keep_samples.then_some(samples),
    })
}

/// Centered circular moving average over the 365 regular slots; the
/// leap slot is smoothed against its neighbors Feb 28 / Mar 1.
fn smooth_circular<T: Real>(mean: &[Vec<T>], window: usize, cells: usize) -> Vec<Vec<T>> {
    let half = (window / 2) as isize;
    let mut out = vec![vec![T::nan(); cells]; 366];
    for slot in 0..365isize {
        for px in 0..cells {
            let mut acc = CompensatedSum::new();
            let mut n = 0usize;
            for d in -half..=half {
                let s = (slot + d).rem_euclid(365) as usize;
                let v = mean[s][px];
                if !v.is_nan() {
                    acc.add(v);
                    n += 1;
                }
            }
            if n > 0 {
                out[slot as usize][px] = acc.value() / T::of(n as f64);
            }
        }
    }
    // Leap slot: average of its calendar neighbors in the smoothed table.
    for px in 0..cells {
        let a = out[58][px]; // Feb 28
        let b = out[59][px]; // Mar 1
        out[365][px] = if a.is_nan() || b.is_nan() {
            mean[365][px]
        } else {
            (a + b) / T::of(2.0)
        };
    }
    out
}

/// Subtracts the day-of-year climatological mean from a field.
///
/// NaN propagates from either side; grid, variable, and level must match.
pub fn anomaly<T: Real>(field: &GridField<T>, clim: &Climatology<T>) -> Result<GridField<T>> {
    if **field.spec() != **clim.spec() {
        return Err(Error::GridMismatch(
            "field and climatology grids differ".into(),
        ));
    }
    if field.meta().variable != clim.variable() || field.meta().level != clim.level() {
        return Err(Error::InvalidArgument(format!(
            "field {}/{} does not match climatology {}/{}",
            field.meta().variable,
            field.meta().level,
            clim.variable(),
            clim.level()
        )));
    }
    let mean = clim.mean_for(field.meta().valid_time);
    let values = field
        .values()
        .iter()
        .zip(mean)
        .map(|(&v, &m)| v - m)
        .collect();
    GridField::new(Arc::clone(field.spec()), values, field.meta().clone())
}
