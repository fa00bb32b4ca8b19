//! On-disk plumbing: the GF1 single-field format, climatology
//! directories, archive-directory forecast/truth sources, and score-table
//! writers.
//!
//! GF1 is deliberately minimal so any language can read or emit it:
//!
//! ```text
//! bytes 0..4    ASCII magic "GF1\n"
//! bytes 4..8    header length, unsigned 32-bit little-endian
//! bytes 8..8+L  UTF-8 JSON header (shape, coordinates, metadata, fill)
//! rest          n_lat * n_lon IEEE-754 float32 little-endian values,
//!               row-major, north to south
//! ```
//!
//! The header always parses before the payload is touched; unknown header
//! fields are reported as warnings, never errors, and never reinterpreted.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Climatology, FieldMeta, GridField, GridSpec, slot_to_date_2000};
use crate::harness::{ForecastSource, MetricKind, ScoreRow, ScoreTable, TruthSource};
use crate::num::Real;
use crate::probabilistic::EnsembleField;

/// Fill marker for masked cells. Kept finite so the header stays plain
/// JSON; it is far outside any geophysical range.
pub const DEFAULT_FILL: f64 = 1.0e20;

const MAGIC: &[u8; 4] = b"GF1\n";

/// The JSON header of a GF1 file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gf1Header {
    pub magic: String,
    pub n_lat: usize,
    pub n_lon: usize,
    pub lats: Vec<f64>,
    pub lons: Vec<f64>,
    pub variable: String,
    pub level: String,
    pub valid_time: NaiveDate,
    pub lead_days: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member: Option<u32>,
    pub fill_value: f64,
}

const KNOWN_HEADER_KEYS: [&str; 11] = [
    "magic",
    "n_lat",
    "n_lon",
    "lats",
    "lons",
    "variable",
    "level",
    "valid_time",
    "lead_days",
    "member",
    "fill_value",
];

pub fn write_field<T: Real>(field: &GridField<T>, path: &Path) -> Result<()> {
    write_field_opts(field, path, None, DEFAULT_FILL)
}

/// Like [`write_field`] with an explicit ensemble member id and fill
/// marker.
pub fn write_field_opts<T: Real>(
    field: &GridField<T>,
    path: &Path,
    member: Option<u32>,
    fill_value: f64,
) -> Result<()> {
    if !fill_value.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "fill value must be finite, got {fill_value}"
        )));
    }
    let spec = field.spec();
    let header = Gf1Header {
        magic: "GF1".into(),
        n_lat: spec.n_lat(),
        n_lon: spec.n_lon(),
        lats: spec.lats().to_vec(),
        lons: spec.lons().to_vec(),
        variable: field.meta().variable.clone(),
        level: field.meta().level.clone(),
        valid_time: field.meta().valid_time,
        lead_days: field.meta().lead_days,
        member,
        fill_value,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut bytes =
        Vec::with_capacity(8 + header_bytes.len() + 4 * spec.cells());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    let fill = fill_value as f32;
    for &v in field.values() {
        let x = if v.is_nan() {
            fill
        } else {
            v.to_f64_lossy() as f32
        };
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads just the header; the payload is never examined.
pub fn read_header(path: &Path) -> Result<Gf1Header> {
    read_header_detailed(path).map(|(header, _)| header)
}

/// Like [`read_header`], also returning unknown-header-field warnings.
pub fn read_header_detailed(path: &Path) -> Result<(Gf1Header, Vec<String>)> {
    let bytes = fs::read(path)?;
    let (header, _, warnings) = parse_header(&bytes)?;
    Ok((header, warnings))
}

pub fn read_field<T: Real>(path: &Path) -> Result<GridField<T>> {
    read_field_detailed(path).map(|(field, _, _)| field)
}

/// Reads a field along with its raw header and any unknown-header-field
/// warnings.
pub fn read_field_detailed<T: Real>(
    path: &Path,
) -> Result<(GridField<T>, Gf1Header, Vec<String>)> {
    let bytes = fs::read(path)?;
    let (header, payload_start, warnings) = parse_header(&bytes)?;
    let expected = 4 * header.n_lat * header.n_lon;
    let payload = &bytes[payload_start..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::SizeMismatch {
            extra: payload.len() - expected,
        });
    }
    let fill = header.fill_value as f32;
    let values: Vec<T> = payload
        .chunks_exact(4)
        .map(|chunk| {
            let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
            if v.is_nan() || v == fill {
                T::nan()
            } else {
                T::of(v as f64)
            }
        })
        .collect();
    let meta = FieldMeta {
        variable: header.variable.clone(),
        level: header.level.clone(),
        valid_time: header.valid_time,
        lead_days: header.lead_days,
    };
    let field = GridField::from_rows(header.lats.clone(), header.lons.clone(), values, meta)
        .map_err(|e| Error::BadHeader(format!("grid coordinates: {e}")))?;
    Ok((field, header, warnings))
}

fn parse_header(bytes: &[u8]) -> Result<(Gf1Header, usize, Vec<String>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(Error::BadHeader("file ends inside the length field".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let payload_start = 8 + header_len;
    if payload_start > bytes.len() {
        return Err(Error::BadHeader(format!(
            "declared header length {header_len} runs past end of file"
        )));
    }
    let value: serde_json::Value = serde_json::from_slice(&bytes[8..payload_start])
        .map_err(|e| Error::BadHeader(format!("header is not valid JSON: {e}")))?;
    let mut warnings = Vec::new();
    if let Some(map) = value.as_object() {
        for key in map.keys() {
            if !KNOWN_HEADER_KEYS.contains(&key.as_str()) {
                warnings.push(format!("ignoring unknown header field '{key}'"));
            }
        }
    }
    let header: Gf1Header = serde_json::from_value(value)
        .map_err(|e| Error::BadHeader(format!("header is missing or mistypes a field: {e}")))?;
    if header.magic != "GF1" {
        return Err(Error::BadHeader(format!(
            "header magic is '{}', expected 'GF1'",
            header.magic
        )));
    }
    if header.lats.len() != header.n_lat || header.lons.len() != header.n_lon {
        return Err(Error::BadHeader(format!(
            "coordinate lengths {}x{} disagree with declared shape {}x{}",
            header.lats.len(),
            header.lons.len(),
            header.n_lat,
            header.n_lon
        )));
    }
    if !header.fill_value.is_finite() {
        return Err(Error::BadHeader(format!(
            "fill value must be finite, got {}",
            header.fill_value
        )));
    }
    Ok((header, payload_start, warnings))
}

/// Sidecar manifest for a climatology directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClimManifest {
    variable: String,
    level: String,
    source_years: Vec<i32>,
}

/// Writes a climatology as `climatology.json` plus one mean and one std
/// GF1 file per day-of-year slot (`mean_D001.gf1` .. `std_D366.gf1`).
/// Training samples are not persisted; rebuild from fields when the
/// empirical climatology ensemble is needed.
pub fn write_climatology<T: Real>(clim: &Climatology<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = ClimManifest {
        variable: clim.variable().to_string(),
        level: clim.level().to_string(),
        source_years: clim.source_years().to_vec(),
    };
    fs::write(
        dir.join("climatology.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    for slot in 1..=366usize {
        let stamp = slot_to_date_2000(slot).expect("slot in range");
        let meta = FieldMeta {
            variable: clim.variable().to_string(),
            level: clim.level().to_string(),
            valid_time: stamp,
            lead_days: 0,
        };
        let mean = GridField::new(
            Arc::clone(clim.spec()),
            clim.mean_slot(slot).to_vec(),
            meta.clone(),
        )?;
        write_field(&mean, &dir.join(format!("mean_D{slot:03}.gf1")))?;
        let std = GridField::new(Arc::clone(clim.spec()), clim.std_slot(slot).to_vec(), meta)?;
        write_field(&std, &dir.join(format!("std_D{slot:03}.gf1")))?;
    }
    Ok(())
}

pub fn read_climatology<T: Real>(dir: &Path) -> Result<Climatology<T>> {
    let manifest: ClimManifest =
        serde_json::from_slice(&fs::read(dir.join("climatology.json")).map_err(|e| {
            Error::MissingCoverage(format!(
                "no climatology manifest in {}: {e}",
                dir.display()
            ))
        })?)?;
    let mut spec: Option<Arc<GridSpec>> = None;
    let mut mean = Vec::with_capacity(366);
    let mut std = Vec::with_capacity(366);
    for slot in 1..=366usize {
        for (prefix, out) in [("mean", &mut mean), ("std", &mut std)] {
            let path = dir.join(format!("{prefix}_D{slot:03}.gf1"));
            if !path.exists() {
                return Err(Error::MissingCoverage(format!(
                    "climatology slot file {} is missing",
                    path.display()
                )));
            }
            let field: GridField<T> = read_field(&path)?;
            match &spec {
                None => spec = Some(Arc::clone(field.spec())),
                Some(s) => {
                    if **s != **field.spec() {
                        return Err(Error::GridMismatch(format!(
                            "climatology slot {slot} is on a different grid"
                        )));
                    }
                }
            }
            out.push(field.values().to_vec());
        }
    }
    Climatology::from_parts(
        spec.expect("at least one slot read"),
        manifest.variable,
        manifest.level,
        manifest.source_years,
        mean,
        std,
    )
}

fn gf1_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::InvalidArgument(format!("cannot list {}: {e}", dir.display())))?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| p.extension().map_or(false, |e| e == "gf1"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Truth archive on disk: one GF1 analysis (lead 0) per (variable, date).
#[derive(Debug)]
pub struct DirectoryTruth {
    index: HashMap<(String, NaiveDate), PathBuf>,
    warnings: Vec<String>,
}

impl DirectoryTruth {
    pub fn open(dir: &Path) -> Result<DirectoryTruth> {
        let mut index = HashMap::new();
        let mut warnings = Vec::new();
        for path in gf1_paths(dir)? {
            let (header, header_warnings) = read_header_detailed(&path)?;
            warnings.extend(
                header_warnings
                    .into_iter()
                    .map(|w| format!("{}: {w}", path.display())),
            );
            if header.lead_days != 0 {
                warnings.push(format!(
                    "{}: lead {} file ignored in truth archive",
                    path.display(),
                    header.lead_days
                ));
                continue;
            }
            let key = (header.variable, header.valid_time);
            if let Some(prev) = index.insert(key.clone(), path.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate truth field for {}/{}: {} and {}",
                    key.0,
                    key.1,
                    prev.display(),
                    path.display()
                )));
            }
        }
        Ok(DirectoryTruth { index, warnings })
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

impl<T: Real> TruthSource<T> for DirectoryTruth {
    fn field(&self, variable: &str, valid_time: NaiveDate) -> Result<GridField<T>> {
        let path = self
            .index
            .get(&(variable.to_string(), valid_time))
            .ok_or_else(|| {
                Error::MissingCoverage(format!("no analysis for {variable} at {valid_time}"))
            })?;
        read_field(path)
    }
}

/// Forecast archive on disk, indexed by (variable, init date, lead).
/// Files without a `member` header field are deterministic forecasts;
/// files with one are ensemble members.
#[derive(Debug)]
pub struct DirectoryForecast {
    det: HashMap<(String, NaiveDate, u32), PathBuf>,
    members: HashMap<(String, NaiveDate, u32), Vec<(u32, PathBuf)>>,
    warnings: Vec<String>,
}

impl DirectoryForecast {
    pub fn open(dir: &Path) -> Result<DirectoryForecast> {
        let mut det = HashMap::new();
        let mut members: HashMap<(String, NaiveDate, u32), Vec<(u32, PathBuf)>> = HashMap::new();
        let mut warnings = Vec::new();
        for path in gf1_paths(dir)? {
            let (header, header_warnings) = read_header_detailed(&path)?;
            warnings.extend(
                header_warnings
                    .into_iter()
                    .map(|w| format!("{}: {w}", path.display())),
            );
            let init = header
                .valid_time
                .checked_sub_days(Days::new(header.lead_days as u64))
                .ok_or_else(|| {
                    Error::BadHeader(format!(
                        "{}: valid time minus lead leaves the calendar",
                        path.display()
                    ))
                })?;
            let key = (header.variable, init, header.lead_days);
            match header.member {
                Some(id) => members.entry(key).or_default().push((id, path)),
                None => {
                    if let Some(prev) = det.insert(key.clone(), path.clone()) {
                        return Err(Error::InvalidArgument(format!(
                            "duplicate forecast for {}/{} lead {}: {} and {}",
                            key.0,
                            key.1,
                            key.2,
                            prev.display(),
                            path.display()
                        )));
                    }
                }
            }
        }
        for (key, list) in members.iter_mut() {
            list.sort_by_key(|(id, _)| *id);
            if list.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate ensemble member ids for {}/{} lead {}",
                    key.0, key.1, key.2
                )));
            }
        }
        Ok(DirectoryForecast {
            det,
            members,
            warnings,
        })
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

impl<T: Real> ForecastSource<T> for DirectoryForecast {
    fn field(&self, variable: &str, init: NaiveDate, lead: u32) -> Result<GridField<T>> {
        let path = self
            .det
            .get(&(variable.to_string(), init, lead))
            .ok_or_else(|| {
                Error::MissingCoverage(format!(
                    "no forecast for {variable} init {init} lead {lead}"
                ))
            })?;
        read_field(path)
    }

    fn ensemble(
        &self,
        variable: &str,
        init: NaiveDate,
        lead: u32,
        n_members: usize,
    ) -> Result<EnsembleField<T>> {
        let list = self
            .members
            .get(&(variable.to_string(), init, lead))
            .ok_or_else(|| {
                Error::MissingCoverage(format!(
                    "no ensemble for {variable} init {init} lead {lead}"
                ))
            })?;
        if list.len() < n_members {
            return Err(Error::MissingCoverage(format!(
                "ensemble for {variable} init {init} lead {lead} has {} members, {n_members} requested",
                list.len()
            )));
        }
        let fields = list[..n_members]
            .iter()
            .map(|(_, path)| read_field(path))
            .collect::<Result<Vec<_>>>()?;
        EnsembleField::new(fields)
    }
}

/// Score-file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ScoreFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<ScoreFormat> {
        match s {
            "csv" => Ok(ScoreFormat::Csv),
            "json" => Ok(ScoreFormat::Json),
            other => Err(Error::InvalidArgument(format!(
                "unknown score format '{other}' (expected csv or json)"
            ))),
        }
    }
}

/// Writes a score table. CSV carries the per-tuple rows with the fixed
/// column set; JSON mirrors the rows and adds the aggregates. Numbers are
/// printed in the shortest form that parses back to the same bits.
pub fn write_scores(table: &ScoreTable, format: ScoreFormat, path: &Path) -> Result<()> {
    if table.rows.is_empty() && table.aggregates.is_empty() {
        return Err(Error::InvalidArgument("score table is empty".into()));
    }
    match format {
        ScoreFormat::Csv => {
            let mut out = String::from("metric,variable,lead,init_date,value,n_members\n");
            for row in &table.rows {
                let date = row
                    .init_date
                    .map(|d| d.to_string())
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    row.metric, row.variable, row.lead, date, row.value, row.n_members
                ));
            }
            fs::write(path, out)?;
        }
        ScoreFormat::Json => {
            let mut bytes = serde_json::to_vec_pretty(table)?;
            bytes.push(b'\n');
            fs::write(path, bytes)?;
        }
    }
    Ok(())
}

pub fn read_scores_json(path: &Path) -> Result<ScoreTable> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Reads back the CSV row set (notes and failure classes are not part of
/// the CSV schema and come back empty).
pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty score file".into()))?;
    if header != "metric,variable,lead,init_date,value,n_members" {
        return Err(Error::InvalidArgument(format!(
            "unexpected CSV header: {header}"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::InvalidArgument(format!(
                "line {}: expected 6 columns, got {}",
                i + 2,
                fields.len()
            )));
        }
        let parse = |what: &str, e: String| Error::InvalidArgument(format!("line {}: bad {what}: {e}", i + 2));
        rows.push(ScoreRow {
            metric: fields[0].parse::<MetricKind>()?,
            variable: fields[1].to_string(),
            lead: fields[2]
                .parse()
                .map_err(|e: std::num::ParseIntError| parse("lead", e.to_string()))?,
            init_date: if fields[3].is_empty() {
                None
            } else {
                Some(
                    fields[3]
                        .parse()
                        .map_err(|e: chrono::ParseError| parse("date", e.to_string()))?,
                )
            },
            value: fields[4]
                .parse()
                .map_err(|e: std::num::ParseFloatError| parse("value", e.to_string()))?,
            n_members: fields[5]
                .parse()
                .map_err(|e: std::num::ParseIntError| parse("members", e.to_string()))?,
            note: None,
            class: None,
        });
    }
    Ok(rows)
}
