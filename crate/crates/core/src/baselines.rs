//! Reference forecasters: climatology and persistence.
//!
//! Both produce one field per requested lead so they can be scored with
//! exactly the same metric calls as a real forecast.

use std::sync::Arc;

use chrono::{Days, NaiveDate};

use crate::error::{Error, Result};
use crate::grid::{Climatology, FieldMeta, GridField};
use crate::num::Real;

/// Which reference forecaster to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    Climatology,
    Persistence,
}

impl std::str::FromStr for ReferenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ReferenceKind> {
        match s {
            "climatology" => Ok(ReferenceKind::Climatology),
            "persistence" => Ok(ReferenceKind::Persistence),
            other => Err(Error::InvalidArgument(format!(
                "unknown reference forecaster '{other}' (expected climatology or persistence)"
            ))),
        }
    }
}

/// A reference forecast: one field per lead, leads strictly increasing.
#[derive(Debug, Clone)]
pub struct ReferenceForecast<T> {
    kind: ReferenceKind,
    fields: Vec<GridField<T>>,
}

impl<T: Real> ReferenceForecast<T> {
    pub fn kind(&self) -> ReferenceKind {
        self.kind
    }

    pub fn fields(&self) -> &[GridField<T>] {
        &self.fields
    }

    pub fn at_lead(&self, lead: u32) -> Option<&GridField<T>> {
        self.fields.iter().find(|f| f.meta().lead_days == lead)
    }
}

fn check_leads(leads: &[u32]) -> Result<()> {
    if leads.is_empty() {
        return Err(Error::InvalidArgument("no leads requested".into()));
    }
    if !leads.windows(2).all(|p| p[0] < p[1]) {
        return Err(Error::InvalidArgument(
            "leads must be strictly increasing".into(),
        ));
    }
    Ok(())
}

fn valid_date(init: NaiveDate, lead: u32) -> Result<NaiveDate> {
    init.checked_add_days(Days::new(lead as u64))
        .ok_or_else(|| Error::InvalidArgument(format!("date overflow at {init} + {lead} days")))
}

/// Persistence: the observed state at init repeated at every lead.
///
/// `init` must be an analysis (lead 0); leads are calendar days.
pub fn persistence_forecast<T: Real>(
    init: &GridField<T>,
    leads: &[u32],
) -> Result<ReferenceForecast<T>> {
    if init.meta().lead_days != 0 {
        return Err(Error::InvalidArgument(format!(
            "persistence needs an analysis at lead 0, got lead {}",
            init.meta().lead_days
        )));
    }
    check_leads(leads)?;
    let mut fields = Vec::with_capacity(leads.len());
    for &lead in leads {
        let mut meta = init.meta().clone();
        meta.valid_time = valid_date(init.meta().valid_time, lead)?;
        meta.lead_days = lead;
        fields.push(GridField::new(
            Arc::clone(init.spec()),
            init.values().to_vec(),
            meta,
        )?);
    }
    Ok(ReferenceForecast {
        kind: ReferenceKind::Persistence,
        fields,
    })
}

/// Climatology forecast: the day-of-year mean at each target date.
pub fn climatology_forecast<T: Real>(
    clim: &Climatology<T>,
    init: NaiveDate,
    leads: &[u32],
) -> Result<ReferenceForecast<T>> {
    check_leads(leads)?;
    let mut fields = Vec::with_capacity(leads.len());
    for &lead in leads {
        let valid = valid_date(init, lead)?;
        let meta = FieldMeta {
            variable: clim.variable().to_string(),
            level: clim.level().to_string(),
            valid_time: valid,
            lead_days: lead,
        };
        fields.push(GridField::new(
            Arc::clone(clim.spec()),
            clim.mean_for(valid).to_vec(),
            meta,
        )?);
    }
    Ok(ReferenceForecast {
        kind: ReferenceKind::Climatology,
        fields,
    })
}
