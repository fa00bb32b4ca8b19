//! Acceptance suite: one test per release criterion, each printing a
//! single `ACCEPTANCE Cnn <name>: PASS|FAIL` line (visible with
//! `cargo test --test acceptance -- --nocapture`). Tolerances are pinned
//! here, next to the checks that use them.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use rand::prelude::*;
use rand_distr::StandardNormal;

use gridscore::{
    acc, bias, blur_field, build_climatology, build_lat_weights, crps, crpss, ensemble_metric,
    gaussian_random_field, make_ensemble, metric_ratio, ms_ssim, power_spectrum, read_field,
    restrict_and_normalize, rmse, run_eval, spec_div, spec_res, spread, truth_series,
    weighted_mae, write_field, ClimatologyOptions, CrpsWeighting, EnsembleField, Error, EvalPlan,
    FieldMeta, ForecastSource, GridField, GridSpec, LatWeights, MemoryForecast, MemoryTruth,
    MetricKind, MsSsimParams, PointMetric, ScoreContext, SpectrumBins,
};

/// Identity metrics on pred == truth (C1).
const TOL_IDENTITY: f64 = 1e-9;
/// Hand-computed latitude weights (C2) and the 121-row mean (C2).
const TOL_WEIGHT_HAND: f64 = 1e-15;
const TOL_WEIGHT_MEAN: f64 = 1e-12;
/// Weighted-RMSE hand oracle (C3).
const TOL_RMSE_HAND: f64 = 1e-12;
/// FFT vs direct-DFT spectra and Parseval (C4).
const TOL_SPECTRAL_REL: f64 = 1e-8;
/// Spectral divergence/residual hand cases (C5).
const TOL_SPEC_DIV_HAND: f64 = 1e-4;
const TOL_SPEC_RES_HAND: f64 = 1e-12;
const TOL_NONNEG: f64 = 1e-12;
/// Recovered spectral slope, averaged over 100 seeds (C6).
const TOL_SLOPE: f64 = 0.3;
/// CRPS vs numeric CDF integration (C7).
const TOL_CRPS_CDF: f64 = 1e-10;
/// Calibration statistics vs the Monte-Carlo oracle (C8).
const TOL_CALIBRATION_REL: f64 = 0.05;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

fn report(id: &str, name: &str, outcome: Result<(), String>) {
    match outcome {
        Ok(()) => println!("ACCEPTANCE {id} {name}: PASS"),
        Err(why) => {
            println!("ACCEPTANCE {id} {name}: FAIL ({why})");
            panic!("{id} {name}: {why}");
        }
    }
}

fn lib<T>(r: gridscore::Result<T>) -> Result<T, String> {
    r.map_err(|e| format!("library error: {e}"))
}

fn date(s: &str) -> NaiveDate {
    s.parse().unwrap()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Grid whose rows stay off the poles so cosine weights never vanish.
fn interior_spec(h: usize, w: usize) -> Arc<GridSpec> {
    let lats = (0..h)
        .map(|i| 80.0 - 160.0 * i as f64 / (h - 1) as f64)
        .collect();
    let lons = (0..w).map(|j| 360.0 * j as f64 / w as f64).collect();
    GridSpec::new(lats, lons).unwrap()
}

fn grf(spec: &Arc<GridSpec>, seed: u64, day: NaiveDate) -> Result<GridField<f64>, String> {
    let mut cfg = gridscore::SynthConfig::new(Arc::clone(spec));
    cfg.seed = seed;
    lib(gaussian_random_field(&cfg, day))
}

#[test]
fn c01_identity_suite() {
    report("C01", "pred==truth metric identities", (|| {
        let spec = GridSpec::new(
            (0..32).map(|i| 85.0 - 170.0 * i as f64 / 31.0).collect(),
            (0..64).map(|j| j as f64 * 360.0 / 64.0).collect(),
        )
        .unwrap();
        let weights = lib(build_lat_weights::<f64>(&spec))?;
        let params = lib(MsSsimParams::with_scales(2))?;
        for s in 0..50u64 {
            let f = grf(&spec, s, date("2022-01-01"))?;
            let r = lib(rmse(&f, &f, &weights))?;
            let b = lib(bias(&f, &f, &weights))?;
            let a = lib(acc(&f, &f, &weights))?;
            let m = lib(ms_ssim(&f, &f, &params))?;
            let bins = lib(restrict_and_normalize(&lib(power_spectrum(&f))?, 0.9))?;
            let dv = lib(spec_div(&bins, &bins))?;
            let rs = lib(spec_res(&bins, &bins))?;
            ensure!(r.abs() <= TOL_IDENTITY, "seed {s}: rmse {r}");
            ensure!(b.abs() <= TOL_IDENTITY, "seed {s}: bias {b}");
            ensure!((a - 1.0).abs() <= TOL_IDENTITY, "seed {s}: acc {a}");
            ensure!((m - 1.0).abs() <= TOL_IDENTITY, "seed {s}: ms_ssim {m}");
            ensure!(dv.abs() <= TOL_IDENTITY, "seed {s}: spec_div {dv}");
            ensure!(rs.abs() <= TOL_IDENTITY, "seed {s}: spec_res {rs}");
        }
        Ok(())
    })());
}

#[test]
fn c02_latitude_weights() {
    report("C02", "latitude-weight hand case and mean", (|| {
        let spec = GridSpec::new(vec![60.0, 0.0], vec![0.0]).unwrap();
        let w = lib(build_lat_weights::<f64>(&spec))?;
        ensure!(
            (w.row(1) - 4.0 / 3.0).abs() <= TOL_WEIGHT_HAND,
            "weight at 0 deg: {} vs 4/3",
            w.row(1)
        );
        ensure!(
            (w.row(0) - 2.0 / 3.0).abs() <= TOL_WEIGHT_HAND,
            "weight at 60 deg: {} vs 2/3",
            w.row(0)
        );
        let global = GridSpec::global(121, 240).unwrap();
        let w = lib(build_lat_weights::<f64>(&global))?;
        let m = w.per_row().iter().sum::<f64>() / 121.0;
        ensure!((m - 1.0).abs() <= TOL_WEIGHT_MEAN, "121-row weight mean {m}");
        Ok(())
    })());
}

#[test]
fn c03_weighted_rmse_hand_case() {
    report("C03", "2x1 weighted-RMSE oracle", (|| {
        let spec = GridSpec::new(vec![60.0, 0.0], vec![0.0]).unwrap();
        let meta = FieldMeta::analysis("t850", "850", date("2022-01-01"));
        let truth = lib(GridField::new(Arc::clone(&spec), vec![0.0, 0.0], meta.clone()))?;
        let pred = lib(GridField::new(Arc::clone(&spec), vec![2.0, 1.0], meta))?;
        let weights = lib(build_lat_weights::<f64>(&spec))?;
        let r = lib(rmse(&pred, &truth, &weights))?;
        ensure!(
            (r - 2.0_f64.sqrt()).abs() <= TOL_RMSE_HAND,
            "rmse {r} vs sqrt(2)"
        );
        Ok(())
    })());
}

/// Direct O(n^4) double-sum DFT, binned by rounded radial wavenumber.
/// Shares nothing with the FFT path under test.
fn direct_binned_spectrum(field: &GridField<f64>) -> Vec<f64> {
    let (h, w) = (field.spec().n_lat(), field.spec().n_lon());
    let vals = field.values();
    let n_bins = ((h / 2) as f64).hypot((w / 2) as f64).round() as usize + 1;
    let mut bins = vec![0.0; n_bins];
    for fy in 0..h {
        let sy = if fy <= h / 2 { fy as f64 } else { fy as f64 - h as f64 };
        for fx in 0..w {
            let sx = if fx <= w / 2 { fx as f64 } else { fx as f64 - w as f64 };
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let phase = -2.0
                        * std::f64::consts::PI
                        * (fy as f64 * y as f64 / h as f64 + fx as f64 * x as f64 / w as f64);
                    let v = vals[y * w + x];
                    re += v * phase.cos();
                    im += v * phase.sin();
                }
            }
            bins[sy.hypot(sx).round() as usize] += re * re + im * im;
        }
    }
    bins
}

#[test]
fn c04_spectral_oracle() {
    report("C04", "FFT spectrum vs direct DFT and Parseval", (|| {
        for (h, w) in [(16usize, 16usize), (32, 32)] {
            let spec = interior_spec(h, w);
            for s in 0..10u64 {
                let f = grf(&spec, 1000 + s, date("2022-02-01"))?;
                let fast = lib(power_spectrum(&f))?;
                let direct = direct_binned_spectrum(&f);
                ensure!(
                    fast.len() == direct.len(),
                    "{h}x{w} seed {s}: {} bins vs {} in the oracle",
                    fast.len(),
                    direct.len()
                );
                let total: f64 = direct.iter().sum();
                for (k, (&a, &b)) in fast.power().iter().zip(&direct).enumerate() {
                    let tol = TOL_SPECTRAL_REL * b.abs().max(1e-12 * total);
                    ensure!(
                        (a - b).abs() <= tol,
                        "{h}x{w} seed {s} bin {k}: fft {a} vs dft {b}"
                    );
                }
                let sum_sq: f64 = f.values().iter().map(|v| v * v).sum();
                let parseval = (h * w) as f64 * sum_sq;
                let binned: f64 = fast.power().iter().sum();
                ensure!(
                    (binned - parseval).abs() <= TOL_SPECTRAL_REL * parseval,
                    "{h}x{w} seed {s}: Parseval {binned} vs {parseval}"
                );
            }
        }
        Ok(())
    })());
}

fn normalized_pair(power: Vec<f64>) -> Result<SpectrumBins<f64>, String> {
    let k = (0..power.len() as u32).collect();
    let bins = lib(SpectrumBins::from_power(k, power))?;
    lib(restrict_and_normalize(&bins, 0.0))
}

#[test]
fn c05_spectral_divergence_hand_cases() {
    report("C05", "spec_div/spec_res hand values and nonnegativity", (|| {
        let truth = normalized_pair(vec![0.5, 0.5])?;
        let pred = normalized_pair(vec![0.9, 0.1])?;
        let dv = lib(spec_div(&pred, &truth))?;
        let expected = (5.0_f64 / 3.0).ln();
        ensure!(
            (dv - expected).abs() <= TOL_SPEC_DIV_HAND,
            "spec_div {dv} vs ln(5/3) = {expected}"
        );
        let rs = lib(spec_res(&pred, &truth))?;
        ensure!((rs - 0.4).abs() <= TOL_SPEC_RES_HAND, "spec_res {rs} vs 0.4");

        let mut rng = StdRng::seed_from_u64(5050);
        for trial in 0..1000 {
            let n = rng.gen_range(2..=24);
            let a: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-6).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-6).collect();
            let dv = lib(spec_div(&normalized_pair(a)?, &normalized_pair(b)?))?;
            ensure!(dv >= -TOL_NONNEG, "trial {trial}: spec_div {dv} < 0");
        }
        Ok(())
    })());
}

fn fitted_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[test]
fn c06_spectral_slope_recovery() {
    report("C06", "generator recovers k^-alpha slopes", (|| {
        let spec = interior_spec(64, 64);
        for alpha in [0.0, 3.0] {
            let mut mean_power = vec![0.0; 4 + 13];
            for s in 0..100u64 {
                let mut cfg = gridscore::SynthConfig::new(Arc::clone(&spec));
                cfg.seed = 6000 + s;
                cfg.spectrum_slope = alpha;
                let f: GridField<f64> = lib(gaussian_random_field(&cfg, date("2022-03-01")))?;
                let bins = lib(power_spectrum(&f))?;
                for k in 4..=16usize {
                    mean_power[k] += bins.power()[k] / 100.0;
                }
            }
            let points: Vec<(f64, f64)> = (4..=16)
                .map(|k| ((k as f64).ln(), mean_power[k].ln()))
                .collect();
            let slope = fitted_slope(&points);
            ensure!(
                (slope + alpha).abs() <= TOL_SLOPE,
                "alpha {alpha}: fitted slope {slope}"
            );
        }
        Ok(())
    })());
}

/// Exact integral of (CDF - step)^2: both are constant between the sorted
/// breakpoints (members plus the observation).
fn crps_cell_by_integration(members: &[f64], y: f64) -> f64 {
    let mut sorted = members.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut points = sorted.clone();
    points.push(y);
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = members.len() as f64;
    let mut total = 0.0;
    for pair in points.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        let cdf = sorted.iter().filter(|&&m| m <= mid).count() as f64 / n;
        let step = if y <= mid { 1.0 } else { 0.0 };
        total += (cdf - step) * (cdf - step) * (b - a);
    }
    total
}

fn single_cell_ensemble(members: &[f64], y: f64) -> (EnsembleField<f64>, GridField<f64>) {
    let spec = GridSpec::new(vec![0.0], vec![0.0]).unwrap();
    let meta = FieldMeta::analysis("t850", "850", date("2022-01-01"));
    let fields = members
        .iter()
        .map(|&v| GridField::new(Arc::clone(&spec), vec![v], meta.clone()).unwrap())
        .collect();
    let truth = GridField::new(Arc::clone(&spec), vec![y], meta).unwrap();
    (EnsembleField::new(fields).unwrap(), truth)
}

#[test]
fn c07_crps_identities() {
    report("C07", "CRPS degenerate, hand, and CDF-integral cases", (|| {
        let spec = interior_spec(8, 16);
        let weights = lib(build_lat_weights::<f64>(&spec))?;
        for s in 0..20u64 {
            let f = grf(&spec, 7000 + s, date("2022-04-01"))?;
            let t = grf(&spec, 7100 + s, date("2022-04-01"))?;
            let ens = lib(EnsembleField::new(vec![f.clone()]))?;
            let c = lib(crps(&ens, &t, &weights, CrpsWeighting::Score))?;
            let m = lib(weighted_mae(&f, &t, &weights))?;
            ensure!(
                c.to_bits() == m.to_bits(),
                "seed {s}: one-member crps {c} != weighted mae {m}"
            );
        }

        let (ens, truth) = single_cell_ensemble(&[0.0, 1.0], 0.5);
        let c = lib(crps(&ens, &truth, &LatWeights::uniform(1), CrpsWeighting::Score))?;
        ensure!(c == 0.25, "two-member hand case: {c} vs exactly 0.25");

        let mut rng = StdRng::seed_from_u64(707);
        for trial in 0..100 {
            let n = rng.gen_range(1..=8);
            let members: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y = rng.gen_range(-3.5..3.5);
            let (ens, truth) = single_cell_ensemble(&members, y);
            let c = lib(crps(&ens, &truth, &LatWeights::uniform(1), CrpsWeighting::Score))?;
            let oracle = crps_cell_by_integration(&members, y);
            ensure!(
                (c - oracle).abs() <= TOL_CRPS_CDF,
                "trial {trial}: crps {c} vs integral {oracle}"
            );
        }
        Ok(())
    })());
}

#[test]
fn c08_calibration_experiment() {
    report("C08", "calibrated ensemble matches MC oracle, beats wide one", (|| {
        let spec = interior_spec(100, 100);
        let weights = LatWeights::<f64>::uniform(100);
        let sigma = 1.0;
        let base = grf(&spec, 808, date("2022-06-01"))?;
        let drawn = lib(make_ensemble(&base, 51, sigma, 4242))?;
        let truth = drawn.members()[0].clone();
        let ens = lib(EnsembleField::new(drawn.members()[1..].to_vec()))?;

        // Monte-Carlo oracle over fresh replicate pixels, drawn with a
        // generic RNG that shares nothing with the ensemble path.
        let mut rng = StdRng::seed_from_u64(99);
        let reps = 20_000;
        let mut spread_sum = 0.0;
        let mut mean_sq_err = 0.0;
        let mut member_sq_err = 0.0;
        for _ in 0..reps {
            let y: f64 = sigma * rng.sample::<f64, _>(StandardNormal);
            let xs: Vec<f64> = (0..50)
                .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let m = mean(&xs);
            let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 49.0;
            spread_sum += var.sqrt();
            mean_sq_err += (y - m) * (y - m);
            member_sq_err += xs.iter().map(|x| (x - y) * (x - y)).sum::<f64>() / 50.0;
        }
        let oracle_spread = spread_sum / reps as f64;
        let oracle_mean_rmse = (mean_sq_err / reps as f64).sqrt();
        let oracle_member_rmse = (member_sq_err / reps as f64).sqrt();

        let s = lib(spread(&ens, &weights))?;
        ensure!(
            (s - oracle_spread).abs() <= TOL_CALIBRATION_REL * oracle_spread,
            "spread {s} vs oracle {oracle_spread}"
        );
        let rm = lib(rmse(&ens.mean_field(), &truth, &weights))?;
        ensure!(
            (rm - oracle_mean_rmse).abs() <= TOL_CALIBRATION_REL * oracle_mean_rmse,
            "ensemble-mean rmse {rm} vs oracle {oracle_mean_rmse}"
        );
        let ctx = ScoreContext {
            weights: weights.clone(),
            ms_ssim: MsSsimParams::single_scale(),
            q: 0.9,
        };
        let rr = lib(ensemble_metric(PointMetric::Rmse, &ens, &truth, &ctx))?;
        ensure!(
            (rr - oracle_member_rmse).abs() <= TOL_CALIBRATION_REL * oracle_member_rmse,
            "member-mean rmse {rr} vs oracle {oracle_member_rmse}"
        );

        let wide = lib(make_ensemble(&base, 50, 2.0 * sigma, 7777))?;
        let crps_f = lib(crps(&ens, &truth, &weights, CrpsWeighting::Score))?;
        let crps_ref = lib(crps(&wide, &truth, &weights, CrpsWeighting::Score))?;
        let skill = lib(crpss(crps_f, crps_ref))?;
        ensure!(
            skill > 0.0,
            "calibrated ensemble should beat the wide one: crpss {skill}"
        );
        Ok(())
    })());
}

#[test]
fn c09_ensemble_size_ratio() {
    report("C09", "ens-mean/det RMSE ratio falls with members", (|| {
        let spec = GridSpec::global(64, 64).unwrap();
        let mut cfg = gridscore::SynthConfig::new(Arc::clone(&spec));
        cfg.seed = 909;
        let inits: Vec<NaiveDate> = (0..6).map(|i| date("2022-03-01") + chrono::Days::new(i)).collect();
        let leads = vec![1u32, 5, 10];
        let cutoff = 8u32;

        let mut truth_src = MemoryTruth::new();
        let mut valids: Vec<NaiveDate> = Vec::new();
        for &init in &inits {
            for &lead in &leads {
                valids.push(init + chrono::Days::new(lead as u64));
            }
        }
        valids.sort();
        valids.dedup();
        let weights = lib(build_lat_weights::<f64>(&spec))?;
        let mut noise_std = 0.0;
        for (i, &valid) in valids.iter().enumerate() {
            let t: GridField<f64> = lib(gaussian_random_field(&cfg, valid))?;
            if i == 0 {
                let blur_err = lib(rmse(&lib(blur_field(&t, cutoff))?, &t, &weights))?;
                noise_std = 2.0 * blur_err;
            }
            truth_src.insert(t);
        }

        let clim_fields: Vec<GridField<f64>> =
            lib(truth_series(&cfg, date("2018-01-01"), 730))?;
        let clim = lib(build_climatology(
            &clim_fields,
            &ClimatologyOptions {
                smoothing_window: 0,
                keep_samples: false,
            },
        ))?;

        let mut det_src = MemoryForecast::new();
        let mut mean_srcs: Vec<(usize, MemoryForecast<f64>)> =
            [3usize, 15, 50].into_iter().map(|n| (n, MemoryForecast::new())).collect();
        for &init in &inits {
            for &lead in &leads {
                let valid = init + chrono::Days::new(lead as u64);
                let truth: GridField<f64> = lib(gaussian_random_field(&cfg, valid))?;
                let mut blurred = lib(blur_field(&truth, cutoff))?;
                blurred.meta_mut().lead_days = lead;
                let control_seed = 17 + lead as u64 * 1000 + init.ordinal0() as u64;
                let det =
                    lib(make_ensemble(&blurred, 1, noise_std, control_seed))?.members()[0].clone();
                det_src.insert(init, det);
                for (n, src) in &mut mean_srcs {
                    let ens = lib(make_ensemble(&blurred, *n, noise_std, control_seed + 500))?;
                    src.insert(init, ens.mean_field());
                }
            }
        }

        let plan = EvalPlan {
            variables: vec!["t850".into()],
            leads: leads.clone(),
            init_dates: inits.clone(),
            metrics: [MetricKind::Rmse].into_iter().collect(),
            ..EvalPlan::default()
        };
        let det_table = lib(run_eval::<f64>(
            &plan,
            Some(&det_src as &dyn ForecastSource<f64>),
            &truth_src,
            &clim,
        ))?;
        let longest = *leads.last().unwrap();
        let mut at_longest = Vec::new();
        for (n, src) in &mean_srcs {
            let table = lib(run_eval::<f64>(
                &plan,
                Some(src as &dyn ForecastSource<f64>),
                &truth_src,
                &clim,
            ))?;
            let ratio = lib(metric_ratio(&table, &det_table))?;
            let row = ratio
                .rows
                .iter()
                .find(|r| r.metric == MetricKind::Rmse && r.lead == longest)
                .ok_or("ratio row missing")?;
            ensure!(
                row.value <= 1.0,
                "N={n}: rmse ratio {} > 1 at lead {longest}",
                row.value
            );
            at_longest.push((*n, row.value));
        }
        for pair in at_longest.windows(2) {
            ensure!(
                pair[1].1 < pair[0].1,
                "ratio should fall with members: N={} gives {}, N={} gives {}",
                pair[0].0,
                pair[0].1,
                pair[1].0,
                pair[1].1
            );
        }
        Ok(())
    })());
}

#[test]
fn c10_blur_ordering() {
    report("C10", "spec_div falls as the blur cutoff rises", (|| {
        let spec = interior_spec(64, 64);
        for s in 0..3u64 {
            let f = grf(&spec, 1100 + s, date("2022-05-01"))?;
            let truth_bins = lib(restrict_and_normalize(&lib(power_spectrum(&f))?, 0.9))?;
            let mut values = Vec::new();
            for cutoff in 41..=45u32 {
                let blurred = lib(blur_field(&f, cutoff))?;
                let pred_bins =
                    lib(restrict_and_normalize(&lib(power_spectrum(&blurred))?, 0.9))?;
                values.push(lib(spec_div(&pred_bins, &truth_bins))?);
            }
            for (i, pair) in values.windows(2).enumerate() {
                ensure!(
                    pair[1] <= pair[0] + TOL_NONNEG,
                    "seed {s}: spec_div rose from cutoff {} to {}: {} -> {}",
                    41 + i,
                    42 + i,
                    pair[0],
                    pair[1]
                );
            }
            ensure!(
                values[0] > 0.1,
                "seed {s}: heaviest blur should diverge, got {}",
                values[0]
            );
            let last = values[values.len() - 1];
            ensure!(
                last.abs() <= TOL_NONNEG,
                "seed {s}: cutoff at the top bin should not diverge, got {last}"
            );
        }
        Ok(())
    })());
}

fn run_cli(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_gridscore"))
        .args(args)
        .output()
        .map_err(|e| format!("failed to spawn gridscore: {e}"))
}

fn run_cli_ok(args: &[&str]) -> Result<(), String> {
    let out = run_cli(args)?;
    if !out.status.success() {
        return Err(format!(
            "`gridscore {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn generate_archives(root: &Path, sub: &str) -> Result<(String, String, String), String> {
    let train = root.join(format!("train-{sub}"));
    let truth = root.join(format!("truth-{sub}"));
    let fc = root.join(format!("fc-{sub}"));
    let clim = root.join(format!("clim-{sub}"));
    let (train, truth, fc, clim) = (
        train.to_str().unwrap().to_string(),
        truth.to_str().unwrap().to_string(),
        fc.to_str().unwrap().to_string(),
        clim.to_str().unwrap().to_string(),
    );
    run_cli_ok(&[
        "synth", "generate", "--out", &train, "--kind", "truth", "--grid", "16x32", "--start",
        "2018-01-01", "--days", "730", "--seed", "11",
    ])?;
    run_cli_ok(&[
        "synth", "generate", "--out", &truth, "--kind", "truth", "--grid", "16x32", "--start",
        "2022-01-01", "--days", "6", "--seed", "11",
    ])?;
    run_cli_ok(&[
        "synth", "generate", "--out", &fc, "--kind", "forecast", "--grid", "16x32", "--start",
        "2022-01-01", "--days", "2", "--leads", "1-3", "--blur-cutoff", "6", "--seed", "11",
    ])?;
    run_cli_ok(&["climatology", "build", "--fields", &train, "--out", &clim])?;
    Ok((truth, fc, clim))
}

fn eval_det(truth: &str, fc: &str, clim: &str, threads: &str, out: &str) -> Result<(), String> {
    run_cli_ok(&[
        "eval", "det", "--truth", truth, "--forecasts", fc, "--climatology", clim,
        "--variables", "t850", "--leads", "1-3", "--init-dates", "2022-01-01..2022-01-02",
        "--metrics", "rmse,bias,acc,spec_div,spec_res,ms_ssim", "--ms-ssim-scales", "1",
        "--threads", threads, "--out", out,
    ])
}

#[test]
fn c11_cli_determinism() {
    report("C11", "eval det byte-identical across threads and reruns", (|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let root = dir.path();
        let (truth, fc, clim) = generate_archives(root, "a")?;
        let (out1, out8, out1b) = (
            root.join("t1.csv").to_str().unwrap().to_string(),
            root.join("t8.csv").to_str().unwrap().to_string(),
            root.join("t1-rerun.csv").to_str().unwrap().to_string(),
        );
        eval_det(&truth, &fc, &clim, "1", &out1)?;
        eval_det(&truth, &fc, &clim, "8", &out8)?;
        eval_det(&truth, &fc, &clim, "1", &out1b)?;
        let (b1, b8, b1b) = (
            fs::read(&out1).map_err(|e| e.to_string())?,
            fs::read(&out8).map_err(|e| e.to_string())?,
            fs::read(&out1b).map_err(|e| e.to_string())?,
        );
        ensure!(!b1.is_empty(), "empty score file");
        ensure!(b1 == b8, "--threads 1 and --threads 8 disagree");
        ensure!(b1 == b1b, "rerun on the same archives disagrees");

        let (truth2, fc2, clim2) = generate_archives(root, "b")?;
        let out2 = root.join("t1-regen.csv").to_str().unwrap().to_string();
        eval_det(&truth2, &fc2, &clim2, "1", &out2)?;
        let b2 = fs::read(&out2).map_err(|e| e.to_string())?;
        ensure!(b1 == b2, "regenerated same-seed archives disagree");
        Ok(())
    })());
}

#[test]
fn c12_gf1_round_trip_and_corruption() {
    report("C12", "GF1 payload round trip and corruption errors", (|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let spec = interior_spec(6, 9);
        let mut values: Vec<f64> = (0..54).map(|i| (i as f64 - 27.0) * 0.37).collect();
        values[5] = f64::NAN;
        values[40] = f64::NAN;
        let meta = FieldMeta::analysis("t850", "850", date("2022-01-01"));
        let field = lib(GridField::new(Arc::clone(&spec), values.clone(), meta))?;
        let path = dir.path().join("field.gf1");
        lib(write_field(&field, &path))?;
        let back = lib(read_field::<f64>(&path))?;
        for (i, (&orig, &got)) in values.iter().zip(back.values()).enumerate() {
            if orig.is_nan() {
                ensure!(got.is_nan(), "cell {i}: NaN lost in the round trip");
            } else {
                ensure!(
                    (orig as f32).to_bits() == (got as f32).to_bits(),
                    "cell {i}: {orig} came back as {got}"
                );
            }
        }

        let good = fs::read(&path).map_err(|e| e.to_string())?;

        let bad_magic = dir.path().join("magic.gf1");
        let mut bytes = good.clone();
        bytes[0] = b'X';
        fs::write(&bad_magic, &bytes).map_err(|e| e.to_string())?;
        ensure!(
            matches!(read_field::<f64>(&bad_magic), Err(Error::BadMagic)),
            "bad magic not detected"
        );

        let truncated = dir.path().join("short.gf1");
        fs::write(&truncated, &good[..good.len() - 10]).map_err(|e| e.to_string())?;
        ensure!(
            matches!(
                read_field::<f64>(&truncated),
                Err(Error::TruncatedPayload { .. })
            ),
            "truncated payload not detected"
        );

        let oversized = dir.path().join("long.gf1");
        let mut bytes = good.clone();
        bytes.extend_from_slice(&[0u8; 7]);
        fs::write(&oversized, &bytes).map_err(|e| e.to_string())?;
        ensure!(
            matches!(read_field::<f64>(&oversized), Err(Error::SizeMismatch { .. })),
            "trailing bytes not detected"
        );

        let bad_header = dir.path().join("header.gf1");
        let mut bytes = b"GF1\n".to_vec();
        bytes.extend_from_slice(&5u32.to_le_bytes());
        bytes.extend_from_slice(b"npe{}");
        fs::write(&bad_header, &bytes).map_err(|e| e.to_string())?;
        ensure!(
            matches!(read_field::<f64>(&bad_header), Err(Error::BadHeader(_))),
            "header garbage not detected"
        );

        let stub = dir.path().join("stub.gf1");
        fs::write(&stub, b"GF1\n\x02").map_err(|e| e.to_string())?;
        ensure!(
            matches!(read_field::<f64>(&stub), Err(Error::BadHeader(_))),
            "file ending inside the length field not detected"
        );

        let out = run_cli(&["spectrum", "dump", "--field", bad_magic.to_str().unwrap()])?;
        ensure!(
            out.status.code() == Some(2),
            "CLI should exit 2 on bad magic, got {:?}",
            out.status.code()
        );
        let stderr = String::from_utf8_lossy(&out.stderr);
        ensure!(
            stderr.contains("kind=bad_magic"),
            "CLI stderr missing the machine-readable kind: {stderr}"
        );
        Ok(())
    })());
}
