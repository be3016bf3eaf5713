//! Loading and filtering of song catalogs, listening events and playlist
//! corpora.
//!
//! All inputs are comma-separated files with a header row. Column order is
//! free; columns are matched by (trimmed) header name.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, NaiveDateTime, Timelike};
use log::warn;

use crate::context::{Condition, ContextDimension};
use crate::error::{Error, Result};
use crate::feature_space::{
    is_out_of_range, normalize_loudness, normalize_tempo, AudioFeature, FeatureVector,
    FEATURE_COUNT,
};

pub type UserId = String;
pub type SongId = String;

/// Minimum songs and playlists per condition in the reference collection protocol.
pub const PROTOCOL_MIN_SONGS: usize = 500;
pub const PROTOCOL_MIN_PLAYLISTS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Song {
    pub id: SongId,
    pub features: FeatureVector,
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    songs: BTreeMap<SongId, Song>,
    /// Rows whose id had already been seen (the later row wins).
    pub duplicates: usize,
    /// Raw values that had to be clamped into the unit interval.
    pub clamped: usize,
}

impl Catalog {
    pub fn from_songs(songs: impl IntoIterator<Item = Song>) -> Self {
        let mut catalog = Catalog::default();
        for song in songs {
            if catalog.songs.insert(song.id.clone(), song).is_some() {
                catalog.duplicates += 1;
            }
        }
        catalog
    }

    pub fn get(&self, id: &str) -> Option<&Song> {
        self.songs.get(id)
    }

    pub fn features(&self, id: &str) -> Result<&FeatureVector> {
        self.songs
            .get(id)
            .map(|s| &s.features)
            .ok_or_else(|| Error::UnknownSong(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.songs.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.songs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.songs.is_empty()
    }

    pub fn songs(&self) -> impl Iterator<Item = &Song> {
        self.songs.values()
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader)
}

/// Resolves header names to column positions, reporting every missing one.
fn column_indices(
    headers: &csv::StringRecord,
    required: &[&str],
    source: &str,
) -> Result<Vec<usize>> {
    let mut missing = Vec::new();
    let indices: Vec<usize> = required
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(name))
                .unwrap_or_else(|| {
                    missing.push(*name);
                    usize::MAX
                })
        })
        .collect();
    if missing.is_empty() {
        Ok(indices)
    } else {
        Err(Error::Schema {
            path: source.to_string(),
            reason: format!("missing columns: {}", missing.join(", ")),
        })
    }
}

fn optional_column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.eq_ignore_ascii_case(name))
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CatalogOptions {
    /// Values are already in `[0, 1]`; skip tempo/loudness normalization.
    pub normalized: bool,
}

pub fn load_feature_catalog(path: impl AsRef<Path>, opts: CatalogOptions) -> Result<Catalog> {
    let path = path.as_ref();
    read_feature_catalog(open(path)?, &path.display().to_string(), opts)
}

pub fn read_feature_catalog<R: Read>(reader: R, source: &str, opts: CatalogOptions) -> Result<Catalog> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut required = vec!["song_id"];
    required.extend(AudioFeature::ALL.iter().map(|f| f.name()));
    let cols = column_indices(&headers, &required, source)?;

    let mut catalog = Catalog::default();
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        let row_err = |reason: String| Error::Row {
            path: source.to_string(),
            line,
            reason,
        };
        let id = record.get(cols[0]).unwrap_or_default();
        if id.is_empty() {
            return Err(row_err("empty song_id".into()));
        }
        let mut values = [0.0; FEATURE_COUNT];
        for (slot, feature) in AudioFeature::ALL.iter().enumerate() {
            let cell = record.get(cols[slot + 1]).unwrap_or_default();
            let raw: f64 = cell
                .parse()
                .map_err(|_| row_err(format!("{feature}: cannot parse {cell:?}")))?;
            if !raw.is_finite() {
                return Err(row_err(format!("{feature}: non-finite value")));
            }
            let value = match feature {
                AudioFeature::Tempo if !opts.normalized => {
                    if raw >= 0.0 && is_out_of_range(*feature, raw) {
                        catalog.clamped += 1;
                    }
                    normalize_tempo(raw).map_err(|e| row_err(e.to_string()))?
                }
                AudioFeature::Loudness if !opts.normalized => {
                    if is_out_of_range(*feature, raw) {
                        catalog.clamped += 1;
                    }
                    normalize_loudness(raw).map_err(|e| row_err(e.to_string()))?
                }
                _ => {
                    if !(0.0..=1.0).contains(&raw) {
                        catalog.clamped += 1;
                    }
                    raw.clamp(0.0, 1.0)
                }
            };
            values[slot] = value;
        }
        let song = Song {
            id: id.to_string(),
            features: FeatureVector::new(values).map_err(|e| row_err(e.to_string()))?,
        };
        if catalog.songs.insert(song.id.clone(), song).is_some() {
            catalog.duplicates += 1;
        }
    }
    if catalog.duplicates > 0 {
        warn!("{source}: {} duplicate song ids (last row wins)", catalog.duplicates);
    }
    if catalog.clamped > 0 {
        warn!("{source}: {} raw feature values clamped into [0, 1]", catalog.clamped);
    }
    Ok(catalog)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListeningEvent {
    pub user_id: UserId,
    pub song_id: SongId,
    pub timestamp: NaiveDateTime,
    pub condition: Condition,
}

/// Thresholds and outcome of a filtering step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterRecord {
    pub min_song_plays: usize,
    pub min_user_events: usize,
    pub fixpoint: bool,
    pub passes: usize,
    pub songs_removed: BTreeSet<SongId>,
    pub users_removed: BTreeSet<UserId>,
    pub events_before: usize,
    pub events_after: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub source: String,
    pub source_rows: usize,
    pub dropped_unknown_song: usize,
    pub filters: Vec<FilterRecord>,
}

/// Positive user-song interactions joined to a feature catalog.
#[derive(Debug, Clone)]
pub struct Dataset {
    events: Vec<ListeningEvent>,
    catalog: Arc<Catalog>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(events: Vec<ListeningEvent>, catalog: Arc<Catalog>) -> Result<Self> {
        if let Some(e) = events.iter().find(|e| !catalog.contains(&e.song_id)) {
            return Err(Error::UnknownSong(e.song_id.clone()));
        }
        let provenance = Provenance {
            source: "memory".into(),
            source_rows: events.len(),
            ..Provenance::default()
        };
        Ok(Dataset {
            events,
            catalog,
            provenance,
        })
    }

    /// Same catalog and provenance, different events.
    pub fn with_events(&self, events: Vec<ListeningEvent>) -> Dataset {
        Dataset {
            events,
            catalog: Arc::clone(&self.catalog),
            provenance: self.provenance.clone(),
        }
    }

    pub fn events(&self) -> &[ListeningEvent] {
        &self.events
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn users(&self) -> BTreeSet<&str> {
        self.events.iter().map(|e| e.user_id.as_str()).collect()
    }

    pub fn songs(&self) -> BTreeSet<&str> {
        self.events.iter().map(|e| e.song_id.as_str()).collect()
    }

    pub fn song_plays(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.events {
            *counts.entry(e.song_id.as_str()).or_default() += 1;
        }
        counts
    }

    pub fn user_events(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.events {
            *counts.entry(e.user_id.as_str()).or_default() += 1;
        }
        counts
    }

    /// Songs each user interacted with, over all conditions.
    pub fn user_items(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut items: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for e in &self.events {
            items.entry(e.user_id.as_str()).or_default().insert(e.song_id.as_str());
        }
        items
    }
}

/// Parses a local wall-clock timestamp. An explicit UTC offset is accepted
/// and ignored: the wall-clock part is already local.
pub fn parse_local_timestamp(s: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| DateTime::parse_from_rfc3339(s).ok().map(|d| d.naive_local()))
        .or_else(|| {
            DateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S%z")
                .ok()
                .map(|d| d.naive_local())
        })
}

pub fn load_events(path: impl AsRef<Path>, catalog: Arc<Catalog>, dimension: &ContextDimension) -> Result<Dataset> {
    let path = path.as_ref();
    read_events(open(path)?, &path.display().to_string(), catalog, dimension)
}

/// Reads `user_id, song_id, timestamp_local_iso8601[, condition]`.
///
/// For dimensions with hour buckets the condition is derived from the
/// timestamp; otherwise the optional `condition` column is required.
pub fn read_events<R: Read>(
    reader: R,
    source: &str,
    catalog: Arc<Catalog>,
    dimension: &ContextDimension,
) -> Result<Dataset> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = column_indices(&headers, &["user_id", "song_id", "timestamp_local_iso8601"], source)?;
    let condition_col = optional_column(&headers, "condition");
    if dimension.hours().is_none() && condition_col.is_none() {
        return Err(Error::Schema {
            path: source.to_string(),
            reason: format!(
                "dimension {:?} has no hour buckets, so a condition column is required",
                dimension.name()
            ),
        });
    }

    let mut events = Vec::new();
    let mut rows = 0usize;
    let mut dropped = 0usize;
    for record in rdr.records() {
        let record = record?;
        rows += 1;
        let line = line_of(&record);
        let row_err = |reason: String| Error::Row {
            path: source.to_string(),
            line,
            reason,
        };
        let user = record.get(cols[0]).unwrap_or_default();
        let song = record.get(cols[1]).unwrap_or_default();
        let ts_raw = record.get(cols[2]).unwrap_or_default();
        if user.is_empty() || song.is_empty() {
            return Err(row_err("empty user_id or song_id".into()));
        }
        let timestamp = parse_local_timestamp(ts_raw)
            .ok_or_else(|| row_err(format!("malformed timestamp {ts_raw:?}")))?;
        let condition = match dimension.hours() {
            Some(_) => dimension.condition_for_hour(timestamp.hour())?,
            None => {
                let name = record.get(condition_col.unwrap()).unwrap_or_default();
                dimension
                    .condition(name)
                    .cloned()
                    .ok_or_else(|| row_err(format!("unknown condition {name:?}")))?
            }
        };
        if !catalog.contains(song) {
            dropped += 1;
            continue;
        }
        events.push(ListeningEvent {
            user_id: user.to_string(),
            song_id: song.to_string(),
            timestamp,
            condition,
        });
    }
    if dropped > 0 {
        warn!("{source}: dropped {dropped} events referencing songs missing from the catalog");
    }
    Ok(Dataset {
        events,
        catalog,
        provenance: Provenance {
            source: source.to_string(),
            source_rows: rows,
            dropped_unknown_song: dropped,
            filters: Vec::new(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FilterOptions {
    pub min_song_plays: usize,
    pub min_user_events: usize,
    /// Repeat the song-then-user pass until nothing changes.
    pub fixpoint: bool,
}

/// Removes rarely played songs, then low-activity users.
///
/// The default is a single pass: song counts are taken over all events,
/// user counts over the events left after song removal. With `fixpoint` the
/// pass repeats until stable.
pub fn filter_dataset(d: &Dataset, opts: FilterOptions) -> Dataset {
    let mut events = d.events.clone();
    let events_before = events.len();
    let mut songs_removed = BTreeSet::new();
    let mut users_removed = BTreeSet::new();
    let mut passes = 0;
    loop {
        passes += 1;
        let mut plays: HashMap<&str, usize> = HashMap::new();
        let mut counts: HashMap<UserId, usize> = HashMap::new();
        for e in &events {
            *plays.entry(e.song_id.as_str()).or_default() += 1;
            counts.entry(e.user_id.clone()).or_default();
        }
        let drop_songs: BTreeSet<SongId> = plays
            .iter()
            .filter(|(_, &n)| n < opts.min_song_plays)
            .map(|(s, _)| s.to_string())
            .collect();
        events.retain(|e| !drop_songs.contains(&e.song_id));

        for e in &events {
            *counts.get_mut(&e.user_id).expect("user counted above") += 1;
        }
        let drop_users: BTreeSet<UserId> = counts
            .iter()
            .filter(|(_, &n)| n < opts.min_user_events)
            .map(|(u, _)| u.clone())
            .collect();
        events.retain(|e| !drop_users.contains(&e.user_id));

        let changed = !drop_songs.is_empty() || !drop_users.is_empty();
        songs_removed.extend(drop_songs);
        users_removed.extend(drop_users);
        if !opts.fixpoint || !changed {
            break;
        }
    }
    if events.is_empty() && events_before > 0 {
        warn!(
            "filtering with thresholds ({}, {}) removed every event",
            opts.min_song_plays, opts.min_user_events
        );
    }
    let mut provenance = d.provenance.clone();
    provenance.filters.push(FilterRecord {
        min_song_plays: opts.min_song_plays,
        min_user_events: opts.min_user_events,
        fixpoint: opts.fixpoint,
        passes,
        songs_removed,
        users_removed,
        events_before,
        events_after: events.len(),
    });
    Dataset {
        events,
        catalog: Arc::clone(&d.catalog),
        provenance,
    }
}

/// Songs collected from public playlists for one condition.
#[derive(Debug, Clone)]
pub struct PlaylistCorpus {
    pub dimension: String,
    pub condition: Condition,
    pub songs: Vec<Song>,
    pub playlists: BTreeSet<String>,
    pub total_followers: u64,
    /// Song ids that did not resolve in the catalog.
    pub unresolved: usize,
}

impl PlaylistCorpus {
    /// At least 500 songs drawn from at least 4 playlists.
    pub fn meets_protocol(&self) -> bool {
        self.songs.len() >= PROTOCOL_MIN_SONGS && self.playlists.len() >= PROTOCOL_MIN_PLAYLISTS
    }
}

pub fn load_playlist_corpus(
    path: impl AsRef<Path>,
    catalog: &Catalog,
    dimensions: &[ContextDimension],
) -> Result<Vec<PlaylistCorpus>> {
    let path = path.as_ref();
    read_playlist_corpus(open(path)?, &path.display().to_string(), catalog, dimensions)
}

/// Reads `condition, playlist_id, followers, song_id` rows and groups them
/// per condition, in dimension and condition declaration order.
pub fn read_playlist_corpus<R: Read>(
    reader: R,
    source: &str,
    catalog: &Catalog,
    dimensions: &[ContextDimension],
) -> Result<Vec<PlaylistCorpus>> {
    let mut rdr = csv_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = column_indices(&headers, &["condition", "playlist_id", "followers", "song_id"], source)?;

    let resolve = |name: &str| -> Result<(usize, Condition)> {
        let hits: Vec<(usize, &Condition)> = dimensions
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.condition(name).map(|c| (i, c)))
            .collect();
        match hits.as_slice() {
            [(i, c)] => Ok((*i, (*c).clone())),
            [] => Err(Error::Schema {
                path: source.to_string(),
                reason: format!("unknown condition {name:?}"),
            }),
            _ => Err(Error::Schema {
                path: source.to_string(),
                reason: format!("condition {name:?} is declared by more than one dimension"),
            }),
        }
    };

    let mut corpora: BTreeMap<(usize, usize), PlaylistCorpus> = BTreeMap::new();
    let mut followers_seen: BTreeMap<(usize, usize), BTreeMap<String, u64>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        let name = record.get(cols[0]).unwrap_or_default();
        let playlist = record.get(cols[1]).unwrap_or_default();
        let followers_raw = record.get(cols[2]).unwrap_or_default();
        let song_id = record.get(cols[3]).unwrap_or_default();
        let followers: u64 = if followers_raw.is_empty() {
            0
        } else {
            followers_raw.parse().map_err(|_| Error::Row {
                path: source.to_string(),
                line,
                reason: format!("followers: cannot parse {followers_raw:?}"),
            })?
        };
        let (dim_idx, condition) = resolve(name)?;
        let cond_idx = dimensions[dim_idx]
            .conditions()
            .iter()
            .position(|c| *c == condition)
            .expect("resolved condition belongs to its dimension");
        let key = (dim_idx, cond_idx);
        let corpus = corpora.entry(key).or_insert_with(|| PlaylistCorpus {
            dimension: dimensions[dim_idx].name().to_string(),
            condition: condition.clone(),
            songs: Vec::new(),
            playlists: BTreeSet::new(),
            total_followers: 0,
            unresolved: 0,
        });
        corpus.playlists.insert(playlist.to_string());
        followers_seen
            .entry(key)
            .or_default()
            .insert(playlist.to_string(), followers);
        match catalog.get(song_id) {
            Some(song) => corpus.songs.push(song.clone()),
            None => corpus.unresolved += 1,
        }
    }
    for (key, corpus) in corpora.iter_mut() {
        corpus.total_followers = followers_seen[key].values().sum();
        if corpus.songs.is_empty() {
            return Err(Error::Empty(format!(
                "playlist corpus for condition {:?} has no songs resolvable in the catalog",
                corpus.condition.name()
            )));
        }
        if corpus.unresolved > 0 {
            warn!(
                "{source}: {} songs of condition {:?} missing from the catalog",
                corpus.unresolved,
                corpus.condition.name()
            );
        }
    }
    Ok(corpora.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        "song_id,acousticness,danceability,energy,instrumentalness,liveness,loudness,speechiness,valence,tempo\n";

    fn catalog_from(body: &str) -> Result<Catalog> {
        read_feature_catalog(format!("{HEADER}{body}").as_bytes(), "test", CatalogOptions::default())
    }

    fn toy_catalog() -> Arc<Catalog> {
        Arc::new(catalog_from("s1,.5,.5,.5,.5,.5,-20,.5,.5,110\ns2,.1,.1,.1,.1,.1,-40,.1,.1,0\n").unwrap())
    }

    #[test]
    fn catalog_normalizes_raw_columns() {
        let c = catalog_from("s1,0.5,0.5,0.5,0.5,0.5,-20,0.5,0.5,110\n").unwrap();
        let f = c.features("s1").unwrap();
        assert_eq!(f.get(AudioFeature::Tempo), 0.5);
        assert_eq!(f.get(AudioFeature::Loudness), 0.5);
        assert_eq!(f.get(AudioFeature::Energy), 0.5);
        assert_eq!(c.clamped, 0);
    }

    #[test]
    fn catalog_empty_and_duplicates() {
        assert!(catalog_from("").unwrap().is_empty());
        let c = catalog_from("s1,0,0,0,0,0,-20,0,0,110\ns1,1,1,1,1,1,0,1,1,220\n").unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.duplicates, 1);
        assert_eq!(c.features("s1").unwrap(), &FeatureVector::ones());
    }

    #[test]
    fn catalog_schema_and_row_errors() {
        let err = read_feature_catalog("song_id,energy\n".as_bytes(), "x.csv", CatalogOptions::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("acousticness") && err.contains("tempo"), "{err}");
        assert!(!err.contains("energy,"), "{err}");
        let err = catalog_from("s1,0,0,0,0,0,-20,0,0,110\ns2,0,zero,0,0,0,-20,0,0,110\n").unwrap_err();
        match err {
            Error::Row { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn catalog_clamps_and_counts() {
        let c = catalog_from("s1,0,0,0,0,0,-55,0,0,250\n").unwrap();
        assert_eq!(c.clamped, 2);
        assert_eq!(c.features("s1").unwrap().get(AudioFeature::Tempo), 1.0);
        let normalized = read_feature_catalog(
            format!("{HEADER}s1,.2,.2,.2,.2,.2,.3,.2,.2,.4\n").as_bytes(),
            "n",
            CatalogOptions { normalized: true },
        )
        .unwrap();
        assert_eq!(normalized.features("s1").unwrap().get(AudioFeature::Tempo), 0.4);
    }

    #[test]
    fn events_join_and_derive_condition() {
        let dim = ContextDimension::time_of_day();
        let d = read_events(
            "user_id,song_id,timestamp_local_iso8601\nu1,s1,2014-01-01T08:15:00\n".as_bytes(),
            "e",
            toy_catalog(),
            &dim,
        )
        .unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.events()[0].condition.name(), "morning");

        let d = read_events(
            "user_id,song_id,timestamp_local_iso8601\nu1,nope,2014-01-01T08:15:00\n".as_bytes(),
            "e",
            toy_catalog(),
            &dim,
        )
        .unwrap();
        assert_eq!(d.len(), 0);
        assert_eq!(d.provenance.dropped_unknown_song, 1);

        let d = read_events(
            "user_id,song_id,timestamp_local_iso8601\nu1,s1,2014-01-01 01:00:00\nu1,s1,2014-01-01T13:00:00+02:00\nu1,s1,2014-01-02T20:00\n"
                .as_bytes(),
            "e",
            toy_catalog(),
            &dim,
        )
        .unwrap();
        let names: Vec<&str> = d.events().iter().map(|e| e.condition.name()).collect();
        assert_eq!(names, ["night", "afternoon", "evening"]);
    }

    #[test]
    fn malformed_timestamp_names_the_line() {
        let err = read_events(
            "user_id,song_id,timestamp_local_iso8601\nu1,s1,2014-01-01T08:15:00\nu1,s1,yesterday\n".as_bytes(),
            "e.csv",
            toy_catalog(),
            &ContextDimension::time_of_day(),
        )
        .unwrap_err();
        assert!(err.to_string().starts_with("e.csv:3:"), "{err}");
    }

    #[test]
    fn events_with_declared_condition_column() {
        let dim = ContextDimension::new("mood", &["happy", "sad"]).unwrap();
        let body = "user_id,song_id,timestamp_local_iso8601,condition\nu1,s1,2014-01-01T08:15:00,sad\n";
        let d = read_events(body.as_bytes(), "e", toy_catalog(), &dim).unwrap();
        assert_eq!(d.events()[0].condition.name(), "sad");
        let missing = "user_id,song_id,timestamp_local_iso8601\nu1,s1,2014-01-01T08:15:00\n";
        assert!(matches!(
            read_events(missing.as_bytes(), "e", toy_catalog(), &dim),
            Err(Error::Schema { .. })
        ));
    }

    fn ev(user: &str, song: &str, hour: u32) -> ListeningEvent {
        let ts = chrono::NaiveDate::from_ymd_opt(2014, 1, 1)
            .unwrap()
            .and_hms_opt(hour, 0, 0)
            .unwrap();
        ListeningEvent {
            user_id: user.into(),
            song_id: song.into(),
            timestamp: ts,
            condition: crate::context::time_of_day(hour).unwrap(),
        }
    }

    #[test]
    fn filter_thresholds() {
        let d = Dataset::new(
            vec![ev("u1", "s1", 1), ev("u1", "s1", 2), ev("u2", "s1", 3), ev("u2", "s2", 4), ev("u2", "s2", 5)],
            toy_catalog(),
        )
        .unwrap();
        let same = filter_dataset(&d, FilterOptions::default());
        assert_eq!(same.events(), d.events());

        let f = filter_dataset(
            &d,
            FilterOptions {
                min_song_plays: 0,
                min_user_events: 3,
                fixpoint: false,
            },
        );
        assert_eq!(f.users(), BTreeSet::from(["u2"]));
        let rec = f.provenance.filters.last().unwrap();
        assert_eq!(rec.users_removed, BTreeSet::from(["u1".to_string()]));
        assert_eq!(rec.events_after, 3);
    }

    #[test]
    fn fixpoint_filter_is_stable() {
        // Dropping u1 leaves s1 with 1 play, which only a second pass removes.
        let d = Dataset::new(
            vec![ev("u1", "s1", 1), ev("u2", "s1", 2), ev("u2", "s2", 3), ev("u2", "s2", 4), ev("u3", "s2", 5)],
            toy_catalog(),
        )
        .unwrap();
        let opts = FilterOptions {
            min_song_plays: 2,
            min_user_events: 2,
            fixpoint: true,
        };
        let once = filter_dataset(&d, opts);
        assert_eq!(once.songs(), BTreeSet::from(["s2"]));
        assert_eq!(once.users(), BTreeSet::from(["u2"]));
        let twice = filter_dataset(&once, opts);
        assert_eq!(once.events(), twice.events());

        let single = filter_dataset(&d, FilterOptions { fixpoint: false, ..opts });
        assert_eq!(single.songs(), BTreeSet::from(["s1", "s2"]));
    }

    #[test]
    fn playlist_corpora() {
        let catalog = toy_catalog();
        let dims = vec![ContextDimension::new("mood", &["happy", "sad"]).unwrap()];
        let body = "condition,playlist_id,followers,song_id\nhappy,p1,10,s1\nhappy,p1,10,s2\nsad,p2,5,s1\nsad,p2,5,missing\n";
        let corpora = read_playlist_corpus(body.as_bytes(), "p", &catalog, &dims).unwrap();
        assert_eq!(corpora.len(), 2);
        assert_eq!(corpora[0].condition.name(), "happy");
        assert_eq!(corpora[0].songs.len(), 2);
        assert_eq!(corpora[1].songs.len(), 1);
        assert_eq!(corpora[1].unresolved, 1);
        assert_eq!(corpora[0].total_followers, 10);
        assert!(!corpora[0].meets_protocol());

        let bad = "condition,playlist_id,followers,song_id\nangry,p1,1,s1\n";
        assert!(matches!(
            read_playlist_corpus(bad.as_bytes(), "p", &catalog, &dims),
            Err(Error::Schema { .. })
        ));
        let empty = "condition,playlist_id,followers,song_id\nsad,p1,1,missing\n";
        assert!(read_playlist_corpus(empty.as_bytes(), "p", &catalog, &dims).is_err());
    }

    #[test]
    fn protocol_flag() {
        let song = catalog_from("s1,0,0,0,0,0,-20,0,0,110\n").unwrap().get("s1").unwrap().clone();
        let corpus = PlaylistCorpus {
            dimension: "mood".into(),
            condition: Condition::new("happy"),
            songs: vec![song; 500],
            playlists: (0..4).map(|i| format!("p{i}")).collect(),
            total_followers: 0,
            unresolved: 0,
        };
        assert!(corpus.meets_protocol());
    }
}
