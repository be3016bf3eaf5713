//! Contextual dimensions, their conditions, and time-of-day bucketing.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIME_OF_DAY: &str = "time_of_day";

/// One value of a contextual dimension, e.g. `morning`.
///
/// Cheap to clone; ordered by name so keyed collections iterate
/// deterministically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Condition(Arc<str>);

impl Condition {
    pub fn new(name: &str) -> Self {
        Condition(Arc::from(name))
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Condition {
    fn from(s: &str) -> Self {
        Condition::new(s)
    }
}

/// Maps a local hour to a condition by half-open blocks `[start_i, start_{i+1})`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HourBuckets {
    /// `(start_hour, condition)` sorted by start; the first must start at 0.
    starts: Vec<(u32, String)>,
}

impl HourBuckets {
    pub fn new(mut starts: Vec<(u32, String)>) -> Result<Self> {
        starts.sort_by_key(|(h, _)| *h);
        match starts.first() {
            Some((0, _)) => {}
            Some(_) => return Err(Error::Config("hour buckets must start at hour 0".into())),
            None => return Err(Error::Config("hour buckets are empty".into())),
        }
        for w in starts.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Config(format!("duplicate bucket start hour {}", w[0].0)));
            }
        }
        if let Some((h, _)) = starts.iter().find(|(h, _)| *h > 23) {
            return Err(Error::Config(format!("bucket start hour {h} outside 0-23")));
        }
        Ok(HourBuckets { starts })
    }

    /// Night 0-5, morning 6-11, afternoon 12-17, evening 18-23.
    pub fn default_time_of_day() -> Self {
        HourBuckets {
            starts: vec![
                (0, "night".into()),
                (6, "morning".into()),
                (12, "afternoon".into()),
                (18, "evening".into()),
            ],
        }
    }

    pub fn condition_for(&self, hour: u32) -> Result<&str> {
        if hour > 23 {
            return Err(Error::validation("hour", format!("{hour} outside 0-23")));
        }
        let idx = self.starts.partition_point(|(start, _)| *start <= hour) - 1;
        Ok(&self.starts[idx].1)
    }

    pub fn starts(&self) -> &[(u32, String)] {
        &self.starts
    }
}

/// A category of context with at least two named conditions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextDimension {
    name: String,
    conditions: Vec<Condition>,
    hours: Option<HourBuckets>,
}

impl ContextDimension {
    pub fn new(name: &str, conditions: &[&str]) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for c in conditions {
            if c.trim().is_empty() {
                return Err(Error::Config(format!("dimension {name:?} has an empty condition name")));
            }
            if !seen.insert(*c) {
                return Err(Error::Config(format!(
                    "dimension {name:?} lists condition {c:?} twice"
                )));
            }
        }
        if conditions.len() < 2 {
            return Err(Error::Config(format!(
                "dimension {name:?} needs at least 2 conditions, got {}",
                conditions.len()
            )));
        }
        Ok(ContextDimension {
            name: name.to_string(),
            conditions: conditions.iter().map(|c| Condition::new(c)).collect(),
            hours: None,
        })
    }

    /// Attaches an hour bucketing; every bucket must name one of this
    /// dimension's conditions.
    pub fn with_hours(mut self, hours: HourBuckets) -> Result<Self> {
        for (_, c) in hours.starts() {
            if self.condition(c).is_none() {
                return Err(Error::Config(format!(
                    "hour bucket names {c:?}, which is not a condition of {:?}",
                    self.name
                )));
            }
        }
        self.hours = Some(hours);
        Ok(self)
    }

    /// The built-in time-of-day dimension with the default 6-hour blocks.
    pub fn time_of_day() -> Self {
        ContextDimension::new(TIME_OF_DAY, &["morning", "afternoon", "evening", "night"])
            .and_then(|d| d.with_hours(HourBuckets::default_time_of_day()))
            .expect("built-in dimension is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn condition(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name() == name)
    }

    pub fn hours(&self) -> Option<&HourBuckets> {
        self.hours.as_ref()
    }

    /// Derives the condition for a local hour. Only dimensions with hour
    /// buckets support this.
    pub fn condition_for_hour(&self, hour: u32) -> Result<Condition> {
        let hours = self.hours.as_ref().ok_or_else(|| {
            Error::Config(format!("dimension {:?} has no hour buckets", self.name))
        })?;
        let name = hours.condition_for(hour)?;
        Ok(self.condition(name).cloned().expect("checked in with_hours"))
    }
}

/// Time-of-day condition for a local hour under the default bucketing.
pub fn time_of_day(local_hour: u32) -> Result<Condition> {
    HourBuckets::default_time_of_day()
        .condition_for(local_hour)
        .map(Condition::new)
}
