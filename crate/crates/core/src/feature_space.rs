//! Audio-feature vector space.
//!
//! Every song and every preference model lives in the same 9-dimensional unit
//! hypercube. Raw `tempo` (BPM) and `loudness` (dB) are mapped into `[0, 1]`
//! on ingestion; the remaining features are already unit-interval values.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const FEATURE_COUNT: usize = 9;

/// Upper end of the tempo range mapped onto `[0, 1]`.
pub const TEMPO_MAX_BPM: f64 = 220.0;
/// Lower end of the loudness range mapped onto `[0, 1]`; the upper end is 0 dB.
pub const LOUDNESS_MIN_DB: f64 = -40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AudioFeature {
    Acousticness,
    Danceability,
    Energy,
    Instrumentalness,
    Liveness,
    Loudness,
    Speechiness,
    Valence,
    Tempo,
}

impl AudioFeature {
    /// Canonical order. Vector component `i` always holds `ALL[i]`.
    pub const ALL: [AudioFeature; FEATURE_COUNT] = [
        AudioFeature::Acousticness,
        AudioFeature::Danceability,
        AudioFeature::Energy,
        AudioFeature::Instrumentalness,
        AudioFeature::Liveness,
        AudioFeature::Loudness,
        AudioFeature::Speechiness,
        AudioFeature::Valence,
        AudioFeature::Tempo,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AudioFeature::Acousticness => "acousticness",
            AudioFeature::Danceability => "danceability",
            AudioFeature::Energy => "energy",
            AudioFeature::Instrumentalness => "instrumentalness",
            AudioFeature::Liveness => "liveness",
            AudioFeature::Loudness => "loudness",
            AudioFeature::Speechiness => "speechiness",
            AudioFeature::Valence => "valence",
            AudioFeature::Tempo => "tempo",
        }
    }
}

impl fmt::Display for AudioFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AudioFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        AudioFeature::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::validation("audio feature", format!("unknown feature {s:?}")))
    }
}

/// A point in the unit hypercube, indexed by [`AudioFeature::ALL`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector([f64; FEATURE_COUNT]);

impl FeatureVector {
    pub fn new(values: [f64; FEATURE_COUNT]) -> Result<Self> {
        for (feature, v) in AudioFeature::ALL.iter().zip(values) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(
                    feature.name(),
                    format!("{v} is outside the unit interval"),
                ));
            }
        }
        Ok(FeatureVector(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; FEATURE_COUNT] = values.try_into().map_err(|_| {
            Error::validation(
                "feature vector",
                format!("expected {FEATURE_COUNT} components, got {}", values.len()),
            )
        })?;
        Self::new(arr)
    }

    pub fn splat(v: f64) -> Result<Self> {
        Self::new([v; FEATURE_COUNT])
    }

    pub fn zeros() -> Self {
        FeatureVector([0.0; FEATURE_COUNT])
    }

    pub fn ones() -> Self {
        FeatureVector([1.0; FEATURE_COUNT])
    }

    pub fn get(&self, feature: AudioFeature) -> f64 {
        self.0[feature.index()]
    }

    pub fn values(&self) -> &[f64; FEATURE_COUNT] {
        &self.0
    }

    /// Crate-internal constructor for means of valid vectors, which stay in
    /// the hypercube up to rounding; components are clamped to absorb it.
    pub(crate) fn from_mean(values: [f64; FEATURE_COUNT]) -> Self {
        FeatureVector(values.map(|v| v.clamp(0.0, 1.0)))
    }
}

impl fmt::Display for FeatureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v:.4}")?;
        }
        f.write_str("]")
    }
}

fn check_finite(feature: AudioFeature, raw: f64) -> Result<()> {
    if raw.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(feature.name(), format!("non-finite raw value {raw}")))
    }
}

/// Maps BPM onto `[0, 1]` by dividing by 220, clamping faster tempos to 1.
pub fn normalize_tempo(raw: f64) -> Result<f64> {
    check_finite(AudioFeature::Tempo, raw)?;
    if raw < 0.0 {
        return Err(Error::validation(
            AudioFeature::Tempo.name(),
            format!("negative tempo {raw}"),
        ));
    }
    Ok((raw / TEMPO_MAX_BPM).clamp(0.0, 1.0))
}

/// Maps decibels in `[-40, 0]` onto `[0, 1]`; values outside are clamped.
pub fn normalize_loudness(raw: f64) -> Result<f64> {
    check_finite(AudioFeature::Loudness, raw)?;
    Ok(((raw - LOUDNESS_MIN_DB) / -LOUDNESS_MIN_DB).clamp(0.0, 1.0))
}

/// Whether normalizing `raw` for `feature` required clamping.
pub fn is_out_of_range(feature: AudioFeature, raw: f64) -> bool {
    match feature {
        AudioFeature::Tempo => raw > TEMPO_MAX_BPM,
        AudioFeature::Loudness => !(LOUDNESS_MIN_DB..=0.0).contains(&raw),
        _ => !(0.0..=1.0).contains(&raw),
    }
}

/// Subset of features that take part in distance computations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMask([bool; FEATURE_COUNT]);

impl Default for FeatureMask {
    fn default() -> Self {
        FeatureMask([true; FEATURE_COUNT])
    }
}

impl FeatureMask {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn from_features(features: &[AudioFeature]) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::validation("feature mask", "at least one feature must be active"));
        }
        let mut mask = [false; FEATURE_COUNT];
        for f in features {
            mask[f.index()] = true;
        }
        Ok(FeatureMask(mask))
    }

    pub fn contains(&self, feature: AudioFeature) -> bool {
        self.0[feature.index()]
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn active(&self) -> impl Iterator<Item = AudioFeature> + '_ {
        AudioFeature::ALL.into_iter().filter(|f| self.contains(*f))
    }
}

/// A distance on feature vectors bounded to `[0, 1]`.
pub trait DistanceMetric: Send + Sync {
    fn name(&self) -> &'static str;

    fn distance(&self, a: &FeatureVector, b: &FeatureVector) -> f64;

    fn similarity(&self, a: &FeatureVector, b: &FeatureVector) -> f64 {
        1.0 - self.distance(a, b)
    }
}

/// Euclidean distance divided by `sqrt(n)`, `n` the number of active
/// features, so that opposite corners of the hypercube are at distance 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedEuclidean {
    mask: FeatureMask,
}

impl NormalizedEuclidean {
    pub fn new(mask: FeatureMask) -> Self {
        NormalizedEuclidean { mask }
    }

    pub fn mask(&self) -> FeatureMask {
        self.mask
    }
}

impl DistanceMetric for NormalizedEuclidean {
    fn name(&self) -> &'static str {
        "normalized-euclidean"
    }

    fn distance(&self, a: &FeatureVector, b: &FeatureVector) -> f64 {
        let sum_sq: f64 = self
            .mask
            .active()
            .map(|f| {
                let d = a.get(f) - b.get(f);
                d * d
            })
            .sum();
        (sum_sq.sqrt() / (self.mask.active_count() as f64).sqrt()).min(1.0)
    }
}

/// Normalized Euclidean distance over all nine features.
pub fn distance(a: &FeatureVector, b: &FeatureVector) -> f64 {
    NormalizedEuclidean::default().distance(a, b)
}

pub fn similarity(a: &FeatureVector, b: &FeatureVector) -> f64 {
    1.0 - distance(a, b)
}

/// Looks up a metric by its configuration name.
pub fn metric_by_name(name: &str, mask: FeatureMask) -> Result<Box<dyn DistanceMetric>> {
    match name {
        "normalized-euclidean" | "euclidean" => Ok(Box::new(NormalizedEuclidean::new(mask))),
        other => Err(Error::validation("distance metric", format!("unknown metric {other:?}"))),
    }
}
