//! Deterministic (single-forecast) metrics: weighted RMSE, bias, anomaly
//! correlation, and multi-scale structural similarity.
//!
//! All weighted reductions skip cells that are NaN in either input and
//! renormalize the weights over the cells that remain, so partially masked
//! fields score consistently with their unmasked subgrids.

use crate::error::{Error, Result};
use crate::grid::{GridField, LatWeights};
use crate::num::Real;
use crate::sum::CompensatedSum;

fn check_pair<T: Real>(
    pred: &GridField<T>,
    truth: &GridField<T>,
    weights: &LatWeights<T>,
) -> Result<()> {
    if !pred.same_grid(truth) {
        return Err(Error::GridMismatch(
            "forecast and truth grids differ".into(),
        ));
    }
    if weights.n_lat() != pred.spec().n_lat() {
        return Err(Error::InvalidArgument(format!(
            "weights cover {} rows but grid has {}",
            weights.n_lat(),
            pred.spec().n_lat()
        )));
    }
    Ok(())
}

/// Weighted mean of `score(pred, truth)` over cells valid in both fields.
///
/// Shared by RMSE, bias, MAE, and the CRPS grid reduction so that metrics
/// documented as reducing identically really do share one code path.
pub(crate) fn weighted_cell_mean<T: Real>(
    pred: &GridField<T>,
    truth: &GridField<T>,
    weights: &LatWeights<T>,
    score: impl Fn(T, T) -> T,
) -> Result<T> {
    check_pair(pred, truth, weights)?;
    let n_lon = pred.spec().n_lon();
    let mut num = CompensatedSum::new();
    let mut den = CompensatedSum::new();
    let mut valid = 0usize;
    for (px, (&p, &t)) in pred.values().iter().zip(truth.values()).enumerate() {
        if p.is_nan() || t.is_nan() {
            continue;
        }
        let w = weights.row(px / n_lon);
        num.add(w * score(p, t));
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

/// Latitude-weighted root-mean-square error.
pub fn rmse<T: Real>(
    pred: &GridField<T>,
    truth: &GridField<T>,
    weights: &LatWeights<T>,
) -> Result<T> {
    let ms = weighted_cell_mean(pred, truth, weights, |p, t| {
        let r = p - t;
        r * r
    })?;
    Ok(ms.sqrt())
}

/// Latitude-weighted mean error; the sign (forecast minus truth) survives.
pub fn bias<T: Real>(
    pred: &GridField<T>,
    truth: &GridField<T>,
    weights: &LatWeights<T>,
) -> Result<T> {
    weighted_cell_mean(pred, truth, weights, |p, t| p - t)
}

/// Latitude-weighted mean absolute error.
pub fn weighted_mae<T: Real>(
    pred: &GridField<T>,
    truth: &GridField<T>,
    weights: &LatWeights<T>,
) -> Result<T> {
    weighted_cell_mean(pred, truth, weights, |p, t| (p - t).abs())
}

/// Anomaly correlation: the weighted uncentered correlation of two anomaly
/// fields. Callers subtract the climatology first (see `grid::anomaly`).
pub fn acc<T: Real>(
    pred_anom: &GridField<T>,
    truth_anom: &GridField<T>,
    weights: &LatWeights<T>,
) -> Result<T> {
    check_pair(pred_anom, truth_anom, weights)?;
    let n_lon = pred_anom.spec().n_lon();
    let mut cross = CompensatedSum::new();
    let mut norm_p = CompensatedSum::new();
    let mut norm_t = CompensatedSum::new();
    let mut valid = 0usize;
    for (px, (&p, &t)) in pred_anom.values().iter().zip(truth_anom.values()).enumerate() {
        if p.is_nan() || t.is_nan() {
            continue;
        }
        let w = weights.row(px / n_lon);
        cross.add(w * p * t);
        norm_p.add(w * p * p);
        norm_t.add(w * t * t);
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::AllMasked);
    }
    let (np, nt) = (norm_p.value(), norm_t.value());
    if np <= T::zero() || nt <= T::zero() {
        return Err(Error::UndefinedCorrelation(
            "an anomaly field has zero weighted norm".into(),
        ));
    }
    Ok(cross.value() / (np * nt).sqrt())
}

/// Parameters for [`ms_ssim`].
#[derive(Debug, Clone)]
pub struct MsSsimParams {
    /// Side length of the square Gaussian window (odd).
    pub window: usize,
    /// Standard deviation of the Gaussian window, in pixels.
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Both inputs are jointly rescaled onto [0, dynamic_range] first.
    pub dynamic_range: f64,
    /// One exponent per scale, applied to the contrast and structure terms
    /// of that scale; the luminance term (coarsest scale only) reuses the
    /// last entry.
    pub scale_weights: Vec<f64>,
}

impl Default for MsSsimParams {
    fn default() -> Self {
        MsSsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
            scale_weights: vec![0.0448, 0.2856, 0.3001, 0.2363, 0.1333],
        }
    }
}

impl MsSsimParams {
    pub fn scales(&self) -> usize {
        self.scale_weights.len()
    }

    /// Plain single-scale SSIM: one scale, unit exponents.
    pub fn single_scale() -> MsSsimParams {
        MsSsimParams {
            scale_weights: vec![1.0],
            ..Default::default()
        }
    }

    /// Keeps the first `m` of the default five scale weights, renormalized
    /// to sum to the default total. `m = 5` returns the defaults verbatim.
    pub fn with_scales(m: usize) -> Result<MsSsimParams> {
        let defaults = MsSsimParams::default();
        if m == 0 || m > defaults.scale_weights.len() {
            return Err(Error::InvalidArgument(format!(
                "scale count must be in 1..={}, got {m}",
                defaults.scale_weights.len()
            )));
        }
        if m == defaults.scale_weights.len() {
            return Ok(defaults);
        }
        let head = &defaults.scale_weights[..m];
        let total: f64 = head.iter().sum();
        Ok(MsSsimParams {
            scale_weights: head.iter().map(|w| w / total).collect(),
            ..defaults
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "window must be odd and at least 3, got {}",
                self.window
            )));
        }
        if !(self.sigma > 0.0) || !(self.dynamic_range > 0.0) {
            return Err(Error::InvalidArgument(
                "sigma and dynamic_range must be positive".into(),
            ));
        }
        if self.scale_weights.is_empty() {
            return Err(Error::InvalidArgument("need at least one scale".into()));
        }
        Ok(())
    }
}

/// Multi-scale structural similarity of two fields.
///
/// The pair is jointly rescaled onto [0, dynamic_range]; a pair with zero
/// joint range (both fields one shared constant) scores 1 by definition.
/// Window statistics use valid-region placement only (no padding);
/// between scales the fields are low-pass filtered with the same Gaussian
/// window (edge-renormalized) and 2x2 mean-pooled. Structure terms are
/// clamped at zero before averaging so the result stays real.
pub fn ms_ssim<T: Real>(
    pred: &GridField<T>,
    truth: &GridField<T>,
    params: &MsSsimParams,
) -> Result<T> {
    params.validate()?;
    if !pred.same_grid(truth) {
        return Err(Error::GridMismatch(
            "forecast and truth grids differ".into(),
        ));
    }
    let (mut h, mut w) = (pred.spec().n_lat(), pred.spec().n_lon());
    let scales = params.scales();
    // Feasibility: the window must fit after every halving.
    let (mut fh, mut fw) = (h, w);
    for _ in 1..scales {
        fh /= 2;
        fw /= 2;
    }
    if fh < params.window || fw < params.window {
        return Err(Error::GridTooSmall(format!(
            "{}x{} cannot support {} scales with a {}-pixel window",
            h, w, scales, params.window
        )));
    }

    let (lo, hi) = joint_range(pred.values(), truth.values())?;
    if lo == hi {
        return Ok(T::one());
    }
    let l = T::of(params.dynamic_range);
    let scale = l / (hi - lo);
    let mut x: Vec<T> = pred.values().iter().map(|&v| (v - lo) * scale).collect();
    let mut y: Vec<T> = truth.values().iter().map(|&v| (v - lo) * scale).collect();

    let kernel = gaussian_kernel::<T>(params.window, params.sigma);
    let c1 = l * T::of(params.k1) * l * T::of(params.k1);
    let c2 = l * T::of(params.k2) * l * T::of(params.k2);
    let c3 = c2 / T::of(2.0);

    let mut result = T::one();
    for (j, &weight) in params.scale_weights.iter().enumerate() {
        let last = j + 1 == scales;
        let stats = window_stats(&x, &y, h, w, &kernel)?;
        let mut c_acc = CompensatedSum::new();
        let mut s_acc = CompensatedSum::new();
        let mut l_acc = CompensatedSum::new();
        let mut n = 0usize;
        for st in &stats {
            let (mx, my, vx, vy, cov) = *st;
            if mx.is_nan() || my.is_nan() {
                continue;
            }
            let (sx, sy) = (vx.max(T::zero()).sqrt(), vy.max(T::zero()).sqrt());
            let c = (T::of(2.0) * sx * sy + c2) / (vx + vy + c2);
            let s = ((cov + c3) / (sx * sy + c3)).max(T::zero());
            c_acc.add(c);
            s_acc.add(s);
            if last {
                let lum =
                    (T::of(2.0) * mx * my + c1) / (mx * mx + my * my + c1);
                l_acc.add(lum);
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::AllMasked);
        }
        let nn = T::of(n as f64);
        let exp = T::of(weight);
        result = result * (c_acc.value() / nn).powf(exp) * (s_acc.value() / nn).powf(exp);
        if last {
            result = result * (l_acc.value() / nn).powf(exp);
        } else {
            x = downsample(&x, h, w, &kernel);
            y = downsample(&y, h, w, &kernel);
            h /= 2;
            w /= 2;
        }
    }
    Ok(result)
}

fn joint_range<T: Real>(a: &[T], b: &[T]) -> Result<(T, T)> {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &v in a.iter().chain(b) {
        if v.is_nan() {
            continue;
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return Err(Error::AllMasked);
    }
    Ok((lo, hi))
}

fn gaussian_kernel<T: Real>(window: usize, sigma: f64) -> Vec<T> {
    let half = (window / 2) as f64;
    let mut k: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k.into_iter().map(T::of).collect()
}

type WindowStats<T> = (T, T, T, T, T);

/// Gaussian-weighted window moments at every valid window position:
/// (mean_x, mean_y, var_x, var_y, cov). Windows touching NaN propagate NaN
/// into their entry and are skipped by the caller.
fn window_stats<T: Real>(
    x: &[T],
    y: &[T],
    h: usize,
    w: usize,
    kernel: &[T],
) -> Result<Vec<WindowStats<T>>> {
    let win = kernel.len();
    if h < win || w < win {
        return Err(Error::GridTooSmall(format!(
            "{h}x{w} grid cannot fit a {win}-pixel window"
        )));
    }
    let (oh, ow) = (h - win + 1, w - win + 1);

    // Row pass over the five moment inputs.
    let mut rx = vec![T::zero(); h * ow];
    let mut ry = vec![T::zero(); h * ow];
    let mut rxx = vec![T::zero(); h * ow];
    let mut ryy = vec![T::zero(); h * ow];
    let mut rxy = vec![T::zero(); h * ow];
    for row in 0..h {
        for u in 0..ow {
            let mut ax = T::zero();
            let mut ay = T::zero();
            let mut axx = T::zero();
            let mut ayy = T::zero();
            let mut axy = T::zero();
            for (k, &g) in kernel.iter().enumerate() {
                let xv = x[row * w + u + k];
                let yv = y[row * w + u + k];
                ax += g * xv;
                ay += g * yv;
                axx += g * xv * xv;
                ayy += g * yv * yv;
                axy += g * xv * yv;
            }
            let o = row * ow + u;
            rx[o] = ax;
            ry[o] = ay;
            rxx[o] = axx;
            ryy[o] = ayy;
            rxy[o] = axy;
        }
    }

    let mut out = Vec::with_capacity(oh * ow);
    for v in 0..oh {
        for u in 0..ow {
            let mut mx = T::zero();
            let mut my = T::zero();
            let mut mxx = T::zero();
            let mut myy = T::zero();
            let mut mxy = T::zero();
            for (k, &g) in kernel.iter().enumerate() {
                let o = (v + k) * ow + u;
                mx += g * rx[o];
                my += g * ry[o];
                mxx += g * rxx[o];
                myy += g * ryy[o];
                mxy += g * rxy[o];
            }
            out.push((mx, my, mxx - mx * mx, myy - my * my, mxy - mx * my));
        }
    }
    Ok(out)
}

/// Low-pass with the Gaussian window (edge weights renormalized, NaN cells
/// dropped from the average) followed by 2x2 mean pooling.
fn downsample<T: Real>(v: &[T], h: usize, w: usize, kernel: &[T]) -> Vec<T> {
    let win = kernel.len();
    let half = win / 2;

    let blur_line = |line: &mut Vec<T>, src: &dyn Fn(usize) -> T, n: usize| {
        line.clear();
        for i in 0..n {
            let mut acc = T::zero();
            let mut norm = T::zero();
            for (k, &g) in kernel.iter().enumerate() {
                let j = i as isize + k as isize - half as isize;
                if j < 0 || j >= n as isize {
                    continue;
                }
                let val = src(j as usize);
                if val.is_nan() {
                    continue;
                }
                acc += g * val;
                norm += g;
            }
            line.push(if norm > T::zero() { acc / norm } else { T::nan() });
        }
    };

    let mut tmp = vec![T::zero(); h * w];
    let mut line = Vec::with_capacity(w.max(h));
    for row in 0..h {
        let base = row * w;
        blur_line(&mut line, &|j| v[base + j], w);
        tmp[base..base + w].copy_from_slice(&line);
    }
    let mut blurred = vec![T::zero(); h * w];
    for col in 0..w {
        blur_line(&mut line, &|j| tmp[j * w + col], h);
        for row in 0..h {
            blurred[row * w + col] = line[row];
        }
    }

    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::nan(); h2 * w2];
    for r in 0..h2 {
        for c in 0..w2 {
            let mut acc = T::zero();
            let mut n = 0;
            for dr in 0..2 {
                for dc in 0..2 {
                    let val = blurred[(2 * r + dr) * w + (2 * c + dc)];
                    if !val.is_nan() {
                        acc += val;
                        n += 1;
                    }
                }
            }
            if n > 0 {
                out[r * w2 + c] = acc / T::of(n as f64);
            }
        }
    }
    out
}
