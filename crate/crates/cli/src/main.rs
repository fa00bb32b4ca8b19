//! `gridscore`: verification of gridded forecasts from the command line.
//!
//! The subcommands cover the whole loop over GF1 archives: generate
//! synthetic data, build a day-of-year climatology, score deterministic or
//! ensemble forecasts against a truth archive, form aggregate ratios
//! between two runs, and dump latitude weights or binned power spectra.
//!
//! Exit codes: 0 success, 2 bad arguments or malformed input, 3 missing
//! coverage, 4 numeric degeneracy. Hard failures print one
//! machine-readable line to stderr: `error code=<n> kind=<slug> msg="..."`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use chrono::{Datelike, Days, NaiveDate};
use clap::{Args, Parser, Subcommand};

use gridscore::{
    blur_field, build_climatology, build_lat_weights, gaussian_random_field, make_ensemble,
    metric_ratio, power_spectrum, read_climatology, read_field_detailed, read_scores_json,
    restrict_and_normalize, run_eval, write_climatology, write_field, write_field_opts,
    write_scores, Climatology, ClimatologyOptions, CrpsWeighting, DirectoryForecast,
    DirectoryTruth, Error, ErrorClass, EvalPlan, ForecastSource, GridField, GridSpec, MetricKind,
    MsSsimParams, ReferenceKind, Result, ScoreFormat, ScoreTable, SpectraMode, SynthConfig,
    DEFAULT_FILL,
};

#[derive(Parser)]
#[command(
    name = "gridscore",
    version,
    about = "Latitude-weighted, spectral, and probabilistic verification over GF1 archives"
)]
struct Cli {
    /// Wavenumber-band quantile for the spectral metrics.
    #[arg(long, global = true, default_value_t = 0.9)]
    q: f64,

    /// Spectral metrics per sample or on the batch-mean spectrum.
    #[arg(long, global = true, default_value = "per-sample", value_parser = SpectraMode::from_str)]
    spectra_mode: SpectraMode,

    /// Where the latitude weight enters the CRPS (score or value).
    #[arg(long, global = true, default_value = "score", value_parser = CrpsWeighting::from_str)]
    crps_weighting: CrpsWeighting,

    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Seed for the synthetic generator.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the per-row latitude weights of a pole-to-pole grid as CSV.
    Weights(WeightsArgs),
    /// Build day-of-year climatologies.
    #[command(subcommand)]
    Climatology(ClimatologyCmd),
    /// Score forecasts against a truth archive.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Generate synthetic GF1 archives.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Inspect binned power spectra.
    #[command(subcommand)]
    Spectrum(SpectrumCmd),
}

#[derive(Args)]
struct WeightsArgs {
    /// Number of latitudes from +90 to -90 inclusive.
    #[arg(long)]
    n_lat: usize,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ClimatologyCmd {
    /// Average a directory of lead-0 fields into per-day-of-year mean and
    /// standard deviation files.
    Build(ClimBuildArgs),
}

#[derive(Args)]
struct ClimBuildArgs {
    /// Directory of lead-0 GF1 training fields.
    #[arg(long)]
    fields: PathBuf,
    /// Output climatology directory.
    #[arg(long)]
    out: PathBuf,
    /// Odd width of the centered circular smoothing window; 0 keeps the
    /// raw daily means.
    #[arg(long, default_value_t = 0)]
    smoothing_window: usize,
    /// Keep only this variable from the training directory.
    #[arg(long)]
    variable: Option<String>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Deterministic metrics, one forecast field per (init, lead).
    Det(EvalArgs),
    /// Ensemble metrics over per-member forecast files.
    Ens(EvalArgs),
    /// Per-(metric, variable, lead) ratio of two runs' aggregates.
    Ratio(RatioArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// Truth archive directory (lead-0 GF1 files).
    #[arg(long)]
    truth: PathBuf,

    /// Forecast archive directory.
    #[arg(long, conflicts_with = "reference")]
    forecasts: Option<PathBuf>,

    /// Score a reference forecaster (climatology or persistence) instead
    /// of an archive.
    #[arg(long, value_parser = ReferenceKind::from_str)]
    reference: Option<ReferenceKind>,

    /// Prebuilt climatology directory (`climatology build` output).
    #[arg(long, conflicts_with = "clim_fields")]
    climatology: Option<PathBuf>,

    /// Training-field directory; the climatology is rebuilt in memory with
    /// per-slot samples kept, which crpss needs.
    #[arg(long)]
    clim_fields: Option<PathBuf>,

    /// Comma-separated variable names.
    #[arg(long, required = true, value_delimiter = ',')]
    variables: Vec<String>,

    /// Lead days: single values and a-b ranges, comma-separated.
    #[arg(long, default_value = "1-44")]
    leads: String,

    /// Init dates: `start..end` (daily, inclusive) or a comma-separated
    /// list.
    #[arg(long)]
    init_dates: String,

    /// Comma-separated metrics. Defaults: rmse,bias,acc,spec_div,spec_res
    /// for det; crps,crpss,spread,ssr for ens.
    #[arg(long)]
    metrics: Option<String>,

    /// Ensemble members to read per forecast (ens only).
    #[arg(long)]
    members: Option<usize>,

    /// How many of the default five MS-SSIM scales to use.
    #[arg(long, default_value_t = 5)]
    ms_ssim_scales: usize,

    /// Score file path.
    #[arg(long, default_value = "scores.csv")]
    out: PathBuf,

    /// csv or json; inferred from the --out extension when omitted.
    #[arg(long, value_parser = ScoreFormat::from_str)]
    format: Option<ScoreFormat>,
}

#[derive(Args)]
struct RatioArgs {
    /// Numerator score file (JSON, from eval with --format json).
    #[arg(long)]
    num: PathBuf,
    /// Denominator score file (JSON).
    #[arg(long)]
    den: PathBuf,
    /// Output path.
    #[arg(long, default_value = "ratio.csv")]
    out: PathBuf,
    /// csv or json; inferred from the --out extension when omitted.
    #[arg(long, value_parser = ScoreFormat::from_str)]
    format: Option<ScoreFormat>,
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Write a synthetic GF1 archive.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// `truth`: one lead-0 analysis per day. `forecast`: per init and
    /// lead, a low-passed copy of the valid-day truth, optionally with
    /// noisy members.
    #[arg(long, default_value = "truth")]
    kind: String,
    /// Grid shape HxW.
    #[arg(long, default_value = "32x64")]
    grid: String,
    #[arg(long, default_value = "t850")]
    variable: String,
    #[arg(long, default_value = "850")]
    level: String,
    /// First valid date (truth) or init date (forecast).
    #[arg(long)]
    start: NaiveDate,
    /// Number of consecutive days.
    #[arg(long)]
    days: usize,
    /// Forecast lead days: single values and a-b ranges, comma-separated.
    #[arg(long, default_value = "1-3")]
    leads: String,
    /// Ensemble members per forecast; 0 writes only the deterministic
    /// field.
    #[arg(long, default_value_t = 0)]
    members: usize,
    /// Standard deviation of the member noise.
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    /// Zero every wavenumber bin above this cutoff in forecast fields;
    /// 0 disables the low-pass.
    #[arg(long, default_value_t = 0)]
    blur_cutoff: u32,
    /// Spectral slope alpha of the generated k^-alpha fields.
    #[arg(long, default_value_t = 3.0)]
    slope: f64,
    /// Amplitude of the generated spectrum.
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
}

#[derive(Subcommand)]
enum SpectrumCmd {
    /// Print one CSV row per wavenumber bin of a field's power spectrum.
    Dump(DumpArgs),
}

#[derive(Args)]
struct DumpArgs {
    /// GF1 field to transform.
    #[arg(long)]
    field: PathBuf,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Settings shared by every subcommand.
struct Globals {
    q: f64,
    spectra_mode: SpectraMode,
    crps_weighting: CrpsWeighting,
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e
                .to_string()
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("bad arguments")
                .trim()
                .trim_start_matches("error: ")
                .replace('"', "'");
            eprintln!("error code=2 kind=invalid_argument msg=\"{msg}\"");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(e.class());
            let msg = e.to_string().replace('"', "'");
            eprintln!("error code={code} kind={} msg=\"{msg}\"", e.kind_slug());
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let globals = Globals {
        q: cli.q,
        spectra_mode: cli.spectra_mode,
        crps_weighting: cli.crps_weighting,
        seed: cli.seed,
    };
    match cli.command {
        Command::Weights(args) => cmd_weights(args),
        Command::Climatology(ClimatologyCmd::Build(args)) => cmd_clim_build(args),
        Command::Eval(EvalCmd::Det(args)) => cmd_eval(&globals, args, false),
        Command::Eval(EvalCmd::Ens(args)) => cmd_eval(&globals, args, true),
        Command::Eval(EvalCmd::Ratio(args)) => cmd_ratio(args),
        Command::Synth(SynthCmd::Generate(args)) => cmd_synth(&globals, args),
        Command::Spectrum(SpectrumCmd::Dump(args)) => cmd_spectrum(&globals, args),
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Input => 2,
        ErrorClass::Coverage => 3,
        ErrorClass::Degenerate => 4,
    }
}

fn exit_of(table: &ScoreTable) -> ExitCode {
    match table.worst_class() {
        None => ExitCode::SUCCESS,
        Some(class) => ExitCode::from(exit_code(class)),
    }
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(Error::from),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn summarize(table: &ScoreTable, out: &Path) {
    let flagged = table.rows.iter().filter(|r| r.class.is_some()).count();
    println!(
        "wrote {} rows ({} flagged) and {} aggregates to {}",
        table.rows.len(),
        flagged,
        table.aggregates.len(),
        out.display()
    );
}

fn resolve_format(explicit: Option<ScoreFormat>, out: &Path) -> ScoreFormat {
    explicit.unwrap_or(
        match out.extension().and_then(|e| e.to_str()) {
            Some("json") => ScoreFormat::Json,
            _ => ScoreFormat::Csv,
        },
    )
}

fn parse_u32(s: &str, what: &str) -> Result<u32> {
    s.trim()
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("bad {what} '{s}': {e}")))
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("bad {what} '{s}': {e}")))
}

fn parse_leads(s: &str) -> Result<Vec<u32>> {
    let mut leads = Vec::new();
    for token in s.split(',') {
        match token.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse_u32(a, "lead")?, parse_u32(b, "lead")?);
                if a > b {
                    return Err(Error::InvalidArgument(format!(
                        "lead range {a}-{b} is reversed"
                    )));
                }
                leads.extend(a..=b);
            }
            None => leads.push(parse_u32(token, "lead")?),
        }
    }
    Ok(leads)
}

fn parse_date(s: &str) -> Result<NaiveDate> {
    s.trim()
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("bad date '{s}': {e}")))
}

fn parse_dates(s: &str) -> Result<Vec<NaiveDate>> {
    if let Some((a, b)) = s.split_once("..") {
        let (start, end) = (parse_date(a)?, parse_date(b)?);
        if end < start {
            return Err(Error::InvalidArgument(format!(
                "date range {start}..{end} is reversed"
            )));
        }
        let mut dates = Vec::new();
        let mut d = start;
        while d <= end {
            dates.push(d);
            d = match d.succ_opt() {
                Some(next) => next,
                None => break,
            };
        }
        Ok(dates)
    } else {
        s.split(',').map(parse_date).collect()
    }
}

fn parse_metrics(s: &str) -> Result<BTreeSet<MetricKind>> {
    s.split(',').map(|t| t.trim().parse()).collect()
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| {
        Error::InvalidArgument(format!("grid must look like 32x64, got '{s}'"))
    })?;
    Ok((parse_usize(h, "grid height")?, parse_usize(w, "grid width")?))
}

fn add_days(start: NaiveDate, days: usize) -> Result<NaiveDate> {
    start
        .checked_add_days(Days::new(days as u64))
        .ok_or_else(|| Error::InvalidArgument("date range leaves the calendar".into()))
}

/// Reads every lead-0 GF1 field in a directory, optionally keeping one
/// variable; other leads are skipped with a warning.
fn read_training_dir(dir: &Path, variable: Option<&str>) -> Result<Vec<GridField<f64>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::InvalidArgument(format!("cannot list {}: {e}", dir.display())))?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| p.extension().map_or(false, |e| e == "gf1"))
        .collect();
    paths.sort();
    let mut fields = Vec::new();
    for path in paths {
        let (field, header, warnings) = read_field_detailed::<f64>(&path)?;
        for w in warnings {
            eprintln!("warning: {}: {w}", path.display());
        }
        if header.lead_days != 0 {
            eprintln!(
                "warning: {}: lead {} file skipped as training data",
                path.display(),
                header.lead_days
            );
            continue;
        }
        if variable.map_or(false, |v| v != header.variable) {
            continue;
        }
        fields.push(field);
    }
    if fields.is_empty() {
        return Err(Error::MissingCoverage(format!(
            "no usable training fields in {}",
            dir.display()
        )));
    }
    Ok(fields)
}

fn cmd_weights(args: WeightsArgs) -> Result<ExitCode> {
    let spec = GridSpec::global(args.n_lat, 1)?;
    let weights = build_lat_weights::<f64>(&spec)?;
    let mut text = String::from("lat,weight\n");
    for (lat, w) in spec.lats().iter().zip(weights.per_row()) {
        text.push_str(&format!("{lat},{w}\n"));
    }
    write_text(args.out.as_deref(), &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_clim_build(args: ClimBuildArgs) -> Result<ExitCode> {
    let fields = read_training_dir(&args.fields, args.variable.as_deref())?;
    let clim: Climatology<f64> = build_climatology(
        &fields,
        &ClimatologyOptions {
            smoothing_window: args.smoothing_window,
            keep_samples: false,
        },
    )?;
    write_climatology(&clim, &args.out)?;
    println!(
        "built climatology for {}/{} from years {:?} ({} training fields) at {}",
        clim.variable(),
        clim.level(),
        clim.source_years(),
        fields.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_climatology(
    args: &EvalArgs,
    keep_samples: bool,
) -> Result<Climatology<f64>> {
    match (&args.climatology, &args.clim_fields) {
        (Some(dir), None) => read_climatology(dir),
        (None, Some(dir)) => {
            let fields = read_training_dir(dir, args.variables.first().map(String::as_str))?;
            build_climatology(
                &fields,
                &ClimatologyOptions {
                    smoothing_window: 0,
                    keep_samples,
                },
            )
        }
        (None, None) => Err(Error::InvalidArgument(
            "supply --climatology or --clim-fields".into(),
        )),
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    }
}

fn cmd_eval(globals: &Globals, args: EvalArgs, ensemble: bool) -> Result<ExitCode> {
    let metrics = parse_metrics(args.metrics.as_deref().unwrap_or(if ensemble {
        "crps,crpss,spread,ssr"
    } else {
        "rmse,bias,acc,spec_div,spec_res"
    }))?;
    if !ensemble {
        if let Some(m) = metrics.iter().find(|m| m.needs_ensemble()) {
            return Err(Error::InvalidArgument(format!(
                "{m} scores an ensemble; use `eval ens`"
            )));
        }
    }
    let ensemble_size = if ensemble {
        Some(args.members.ok_or_else(|| {
            Error::InvalidArgument("`eval ens` needs --members".into())
        })?)
    } else {
        args.members
    };
    let plan = EvalPlan {
        variables: args.variables.clone(),
        leads: parse_leads(&args.leads)?,
        init_dates: parse_dates(&args.init_dates)?,
        metrics,
        q: globals.q,
        ensemble_size,
        reference: args.reference,
        spectra_mode: globals.spectra_mode,
        crps_weighting: globals.crps_weighting,
        ms_ssim: MsSsimParams::with_scales(args.ms_ssim_scales)?,
    };
    let truth = DirectoryTruth::open(&args.truth)?;
    warn_all(truth.warnings());
    let keep_samples = plan.metrics.contains(&MetricKind::Crpss);
    let clim = load_climatology(&args, keep_samples)?;
    let forecasts = match &args.forecasts {
        Some(dir) => {
            let fc = DirectoryForecast::open(dir)?;
            warn_all(fc.warnings());
            Some(fc)
        }
        None => None,
    };
    let table = run_eval::<f64>(
        &plan,
        forecasts.as_ref().map(|f| f as &dyn ForecastSource<f64>),
        &truth,
        &clim,
    )?;
    let format = resolve_format(args.format, &args.out);
    write_scores(&table, format, &args.out)?;
    summarize(&table, &args.out);
    Ok(exit_of(&table))
}

fn cmd_ratio(args: RatioArgs) -> Result<ExitCode> {
    let num = read_scores_json(&args.num)?;
    let den = read_scores_json(&args.den)?;
    let table = metric_ratio(&num, &den)?;
    let format = resolve_format(args.format, &args.out);
    write_scores(&table, format, &args.out)?;
    summarize(&table, &args.out);
    Ok(exit_of(&table))
}

/// Decorrelates member noise across (valid date, lead) pairs while keeping
/// the per-member streams stable for any one pair.
fn member_seed(seed: u64, valid: NaiveDate, lead: u32) -> u64 {
    seed ^ (valid.num_days_from_ce() as i64 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((lead as u64) << 48)
}

fn cmd_synth(globals: &Globals, args: GenerateArgs) -> Result<ExitCode> {
    if args.days == 0 {
        return Err(Error::InvalidArgument("--days must be at least 1".into()));
    }
    let (h, w) = parse_grid(&args.grid)?;
    let mut cfg = SynthConfig::new(GridSpec::global(h, w)?);
    cfg.variable = args.variable.clone();
    cfg.level = args.level.clone();
    cfg.seed = globals.seed;
    cfg.spectrum_slope = args.slope;
    cfg.base_amplitude = args.amplitude;

    fs::create_dir_all(&args.out)?;
    let mut written = 0usize;
    match args.kind.as_str() {
        "truth" => {
            for i in 0..args.days {
                let day = add_days(args.start, i)?;
                let field: GridField<f64> = gaussian_random_field(&cfg, day)?;
                let name = format!("{}_{}_L00.gf1", cfg.variable, day);
                write_field(&field, &args.out.join(name))?;
                written += 1;
            }
        }
        "forecast" => {
            let leads = parse_leads(&args.leads)?;
            if leads.is_empty() {
                return Err(Error::InvalidArgument("no leads requested".into()));
            }
            for i in 0..args.days {
                let init = add_days(args.start, i)?;
                for &lead in &leads {
                    let valid = add_days(init, lead as usize)?;
                    let base: GridField<f64> = gaussian_random_field(&cfg, valid)?;
                    let mut det = if args.blur_cutoff > 0 {
                        blur_field(&base, args.blur_cutoff)?
                    } else {
                        base
                    };
                    det.meta_mut().lead_days = lead;
                    let stem = format!("{}_{}_L{lead:02}", cfg.variable, init);
                    write_field(&det, &args.out.join(format!("{stem}.gf1")))?;
                    written += 1;
                    if args.members > 0 {
                        let ens = make_ensemble(
                            &det,
                            args.members,
                            args.noise_std,
                            member_seed(globals.seed, valid, lead),
                        )?;
                        for (m, member) in ens.members().iter().enumerate() {
                            write_field_opts(
                                member,
                                &args.out.join(format!("{stem}_M{m:03}.gf1")),
                                Some(m as u32),
                                DEFAULT_FILL,
                            )?;
                            written += 1;
                        }
                    }
                }
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown kind '{other}' (expected truth or forecast)"
            )))
        }
    }
    println!("wrote {written} fields to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_spectrum(globals: &Globals, args: DumpArgs) -> Result<ExitCode> {
    let (field, _, warnings) = read_field_detailed::<f64>(&args.field)?;
    for w in warnings {
        eprintln!("warning: {}: {w}", args.field.display());
    }
    let bins = restrict_and_normalize(&power_spectrum(&field)?, globals.q)?;
    let mask = bins.q_mask().expect("just restricted");
    let norm = bins.normalized().expect("just restricted");
    let mut text = String::from("k,power,in_band,normalized\n");
    for i in 0..bins.len() {
        text.push_str(&format!(
            "{},{},{},{}\n",
            bins.k()[i],
            bins.power()[i],
            mask[i],
            norm[i]
        ));
    }
    write_text(args.out.as_deref(), &text)?;
    Ok(ExitCode::SUCCESS)
}
