//! Power spectra on the lat/lon lattice and the metrics built on them.
//!
//! The field is treated as a doubly periodic image: a 2-D DFT, squared
//! moduli, and a radial binning of the integer frequency lattice by
//! rounding sqrt(kx^2 + ky^2). Signed frequencies live in (-n/2, n/2].
//! Spectra are compared after restriction to the high-wavenumber band
//! selected by a quantile over the bin wavenumbers and renormalization to
//! a probability distribution over that band.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::num::Real;
use crate::sum::{csum, CompensatedSum};

/// Floor of the divergence denominator, matching the reference tooling.
pub const SPECTRUM_FLOOR: f64 = 1e-9;

/// Binned power spectrum: one entry per integer wavenumber bin, optionally
/// restricted to a band and normalized over it.
#[derive(Debug, Clone)]
pub struct SpectrumBins<T> {
    k: Vec<u32>,
    power: Vec<T>,
    selection: Option<Selection<T>>,
}

#[derive(Debug, Clone)]
struct Selection<T> {
    q: f64,
    mask: Vec<bool>,
    normalized: Vec<T>,
}

impl<T: Real> SpectrumBins<T> {
    /// Builds bins from raw (k, power) pairs; k must be consecutive
    /// integers from 0 and power nonnegative.
    pub fn from_power(k: Vec<u32>, power: Vec<T>) -> Result<SpectrumBins<T>> {
        if k.len() != power.len() || k.is_empty() {
            return Err(Error::InvalidArgument(
                "bin and power lengths differ or are empty".into(),
            ));
        }
        for (i, &kk) in k.iter().enumerate() {
            if kk as usize != i {
                return Err(Error::InvalidArgument(
                    "bins must be the consecutive integers 0..n".into(),
                ));
            }
        }
        if power.iter().any(|p| p.is_nan() || *p < T::zero()) {
            return Err(Error::InvalidArgument("bin power must be >= 0".into()));
        }
        Ok(SpectrumBins {
            k,
            power,
            selection: None,
        })
    }

    pub fn k(&self) -> &[u32] {
        &self.k
    }

    pub fn power(&self) -> &[T] {
        &self.power
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    /// Quantile used for the band restriction, if one was applied.
    pub fn q(&self) -> Option<f64> {
        self.selection.as_ref().map(|s| s.q)
    }

    /// Band membership per bin, if restricted.
    pub fn q_mask(&self) -> Option<&[bool]> {
        self.selection.as_ref().map(|s| s.mask.as_slice())
    }

    /// Normalized power per bin (zero outside the band), if restricted.
    pub fn normalized(&self) -> Option<&[T]> {
        self.selection.as_ref().map(|s| s.normalized.as_slice())
    }

    fn selection(&self) -> Result<&Selection<T>> {
        self.selection.as_ref().ok_or_else(|| {
            Error::InvalidArgument(
                "spectrum must be restricted and normalized first".into(),
            )
        })
    }
}

#[inline]
fn signed_freq(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Largest rounded radial wavenumber on an h x w frequency lattice.
pub fn max_bin(h: usize, w: usize) -> usize {
    let (fy, fx) = ((h / 2) as f64, (w / 2) as f64);
    fy.hypot(fx).round() as usize
}

/// Radial bin index for every mode of the h x w lattice, row-major.
pub(crate) fn bin_of_mode(h: usize, w: usize) -> Vec<u32> {
    let mut bins = Vec::with_capacity(h * w);
    for ky in 0..h {
        let fy = signed_freq(ky, h) as f64;
        for kx in 0..w {
            let fx = signed_freq(kx, w) as f64;
            bins.push(fy.hypot(fx).round() as u32);
        }
    }
    bins
}

/// In-place 2-D forward DFT of a row-major h x w complex buffer.
pub(crate) fn fft2_forward<T: Real>(buf: &mut [Complex<T>], h: usize, w: usize) {
    fft2(buf, h, w, true)
}

/// In-place 2-D inverse DFT, including the 1/(h*w) normalization.
pub(crate) fn fft2_inverse<T: Real>(buf: &mut [Complex<T>], h: usize, w: usize) {
    fft2(buf, h, w, false);
    let scale = T::one() / T::of((h * w) as f64);
    for v in buf.iter_mut() {
        v.re = v.re * scale;
        v.im = v.im * scale;
    }
}

fn fft2<T: Real>(buf: &mut [Complex<T>], h: usize, w: usize, forward: bool) {
    debug_assert_eq!(buf.len(), h * w);
    let mut planner = FftPlanner::<T>::new();
    let row_fft = if forward {
        planner.plan_fft_forward(w)
    } else {
        planner.plan_fft_inverse(w)
    };
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if forward {
        planner.plan_fft_forward(h)
    } else {
        planner.plan_fft_inverse(h)
    };
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
}

/// Field values with NaN cells replaced by the mean of the valid cells.
pub(crate) fn mean_filled<T: Real>(field: &GridField<T>) -> Result<Vec<T>> {
    if !field.has_nan() {
        return Ok(field.values().to_vec());
    }
    let valid: Vec<T> = field
        .values()
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .collect();
    if valid.is_empty() {
        return Err(Error::AllMasked);
    }
    let mean = csum(valid.iter().copied()) / T::of(valid.len() as f64);
    Ok(field
        .values()
        .iter()
        .map(|&v| if v.is_nan() { mean } else { v })
        .collect())
}

/// Binned power spectrum of one field.
///
/// NaN cells are mean-filled before the transform. The bins run from 0 to
/// the largest rounded radial wavenumber; the sum of all bin powers equals
/// n_lat * n_lon times the sum of squared field values (Parseval).
pub fn power_spectrum<T: Real>(field: &GridField<T>) -> Result<SpectrumBins<T>> {
    let (h, w) = (field.spec().n_lat(), field.spec().n_lon());
    if h < 2 || w < 2 {
        return Err(Error::DegenerateGrid(format!(
            "spectrum needs at least 2 points per axis, grid is {h}x{w}"
        )));
    }
    let values = mean_filled(field)?;
    power_spectrum_of_values(&values, h, w)
}

pub(crate) fn power_spectrum_of_values<T: Real>(
    values: &[T],
    h: usize,
    w: usize,
) -> Result<SpectrumBins<T>> {
    let mut buf: Vec<Complex<T>> = values
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .collect();
    fft2_forward(&mut buf, h, w);
    let bins = bin_of_mode(h, w);
    let n_bins = max_bin(h, w) + 1;
    let mut acc = vec![CompensatedSum::<T>::new(); n_bins];
    for (c, &b) in buf.iter().zip(&bins) {
        acc[b as usize].add(c.re * c.re + c.im * c.im);
    }
    let power: Vec<T> = acc.iter().map(|a| a.value().max(T::zero())).collect();
    SpectrumBins::from_power((0..n_bins as u32).collect(), power)
}

/// Nearest-rank quantile cut over the bin wavenumbers, then restriction to
/// bins at or above the cut and normalization of their power to sum 1.
///
/// Errors if the surviving band carries no power.
pub fn restrict_and_normalize<T: Real>(bins: &SpectrumBins<T>, q: f64) -> Result<SpectrumBins<T>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "quantile must be in [0, 1], got {q}"
        )));
    }
    let n = bins.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    let cut = bins.k()[rank - 1];
    let mask: Vec<bool> = bins.k().iter().map(|&k| k >= cut).collect();
    let total = csum(
        bins.power()
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&p, _)| p),
    );
    if !(total > T::zero()) {
        return Err(Error::DegenerateSpectrum(format!(
            "no power in wavenumber band k >= {cut}"
        )));
    }
    let normalized = bins
        .power()
        .iter()
        .zip(&mask)
        .map(|(&p, &m)| if m { p / total } else { T::zero() })
        .collect();
    Ok(SpectrumBins {
        k: bins.k.clone(),
        power: bins.power.clone(),
        selection: Some(Selection {
            q,
            mask,
            normalized,
        }),
    })
}

fn check_same_selection<'a, T: Real>(
    pred: &'a SpectrumBins<T>,
    truth: &'a SpectrumBins<T>,
) -> Result<(&'a Selection<T>, &'a Selection<T>)> {
    let ps = pred.selection()?;
    let ts = truth.selection()?;
    if pred.k != truth.k || ps.mask != ts.mask {
        return Err(Error::GridMismatch(
            "spectra have different bin layouts or bands".into(),
        ));
    }
    Ok((ps, ts))
}

/// Divergence of the normalized truth spectrum from the forecast spectrum
/// over the restricted band: sum of S'(k) * ln(S'(k) / max(S'_pred(k), 1e-9)).
///
/// Bins where the truth carries no power contribute nothing; a forecast
/// bin with no power is floored at 1e-9, keeping the sum finite.
pub fn spec_div<T: Real>(pred: &SpectrumBins<T>, truth: &SpectrumBins<T>) -> Result<T> {
    let (ps, ts) = check_same_selection(pred, truth)?;
    let floor = T::of(SPECTRUM_FLOOR);
    let mut acc = CompensatedSum::new();
    for ((&s, &p), &m) in ts.normalized.iter().zip(&ps.normalized).zip(&ts.mask) {
        if !m || s <= T::zero() {
            continue;
        }
        acc.add(s * (s / p.max(floor)).ln());
    }
    Ok(acc.value())
}

/// Root-mean-square difference of the two normalized spectra over the
/// restricted band.
pub fn spec_res<T: Real>(pred: &SpectrumBins<T>, truth: &SpectrumBins<T>) -> Result<T> {
    let (ps, ts) = check_same_selection(pred, truth)?;
    let mut acc = CompensatedSum::new();
    let mut n = 0usize;
    for ((&s, &p), &m) in ts.normalized.iter().zip(&ps.normalized).zip(&ts.mask) {
        if !m {
            continue;
        }
        let d = p - s;
        acc.add(d * d);
        n += 1;
    }
    if n == 0 {
        return Err(Error::DegenerateSpectrum("empty wavenumber band".into()));
    }
    Ok((acc.value() / T::of(n as f64)).sqrt())
}
