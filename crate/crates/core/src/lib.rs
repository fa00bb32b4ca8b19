//! High-throughput verification of gridded subseasonal forecasts.
//!
//! The crate scores forecast fields against verifying analyses on
//! latitude/longitude grids: latitude-weighted deterministic metrics
//! (RMSE, bias, anomaly correlation, multi-scale structural similarity),
//! spectral comparisons on binned 2-D power spectra, and probabilistic
//! ensemble metrics (CRPS and its skill score, spread, spread/skill
//! ratio). Around the metrics sit day-of-year climatology and persistence
//! baselines, a deterministic synthetic-data generator, a parallel
//! evaluation harness with stable output ordering, and a small
//! self-describing file format (GF1) plus score writers.
//!
//! Everything numeric is generic over the scalar type through [`Real`]
//! (any `num-traits` float with the few extras the metrics need); the
//! `*32`/`*64` aliases below pin the two concrete instantiations most
//! callers want.

pub mod baselines;
pub mod deterministic;
pub mod error;
pub mod grid;
pub mod harness;
pub mod io;
pub mod num;
pub mod probabilistic;
pub mod spectral;
pub mod sum;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
pub use num::Real;

pub use grid::{
    anomaly, build_climatology, build_lat_weights, Climatology, ClimatologyOptions, FieldMeta,
    GridField, GridSpec, LatWeights,
};

pub use baselines::{climatology_forecast, persistence_forecast, ReferenceForecast, ReferenceKind};

pub use deterministic::{acc, bias, ms_ssim, rmse, weighted_mae, MsSsimParams};

pub use spectral::{
    max_bin, power_spectrum, restrict_and_normalize, spec_div, spec_res, SpectrumBins,
    SPECTRUM_FLOOR,
};

pub use probabilistic::{
    climatology_ensemble, crps, crpss, ensemble_metric, spread, spread_skill_ratio,
    CrpsWeighting, EnsembleField, PointMetric, ScoreContext,
};

pub use synth::{
    blur_field, drifting_series, gaussian_random_field, make_ensemble, truth_series, SynthConfig,
};

pub use harness::{
    metric_ratio, run_eval, skill_horizon, AggregateRow, EvalPlan, ForecastSource, MemoryForecast,
    MemoryTruth, MetricKind, ScoreRow, ScoreTable, SpectraMode, TruthSource,
};

pub use io::{
    read_climatology, read_field, read_field_detailed, read_header, read_header_detailed,
    read_scores_csv, read_scores_json, write_climatology, write_field, write_field_opts,
    write_scores, DirectoryForecast, DirectoryTruth, Gf1Header, ScoreFormat, DEFAULT_FILL,
};

/// Single-precision field.
pub type Field32 = grid::GridField<f32>;
/// Double-precision field.
pub type Field64 = grid::GridField<f64>;
/// Single-precision latitude weights.
pub type Weights32 = grid::LatWeights<f32>;
/// Double-precision latitude weights.
pub type Weights64 = grid::LatWeights<f64>;
/// Single-precision climatology.
pub type Climatology32 = grid::Climatology<f32>;
/// Double-precision climatology.
pub type Climatology64 = grid::Climatology<f64>;
/// Single-precision ensemble.
pub type Ensemble32 = probabilistic::EnsembleField<f32>;
/// Double-precision ensemble.
pub type Ensemble64 = probabilistic::EnsembleField<f64>;
/// Single-precision binned spectrum.
pub type Spectrum32 = spectral::SpectrumBins<f32>;
/// Double-precision binned spectrum.
pub type Spectrum64 = spectral::SpectrumBins<f64>;
