use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use log::warn;

use super::{sort_entries, ListEntry, RecommendationList};
use crate::context::Condition;
use crate::error::{Error, Result};
use crate::ingestion::{Catalog, UserId};

pub const LIST_HEADER: [&str; 5] = ["user_id", "condition", "rank", "song_id", "score"];

/// Lists read from an external recommender's output.
#[derive(Debug, Clone, Default)]
pub struct ExternalLists {
    pub lists: Vec<RecommendationList>,
    /// Lists whose rank order disagreed with their scores and were re-sorted.
    pub resorted: usize,
    /// Entries dropped because the song is missing from the catalog.
    pub dropped: usize,
}

pub fn load_external_lists(path: impl AsRef<Path>, catalog: &Catalog, source: &str) -> Result<ExternalLists> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_external_lists(file, &path.display().to_string(), catalog, source)
}

/// Parses `user_id, condition, rank, song_id, score` rows.
///
/// Rows are grouped per (user, condition) and ordered by rank; a list whose
/// scores are not non-increasing in rank order is re-sorted by score.
pub fn read_external_lists<R: Read>(
    reader: R,
    path: &str,
    catalog: &Catalog,
    source: &str,
) -> Result<ExternalLists> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols: Vec<usize> = LIST_HEADER
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::Schema {
                    path: path.to_string(),
                    reason: format!("missing column {name}"),
                })
        })
        .collect::<Result<_>>()?;

    let mut grouped: BTreeMap<(UserId, String), Vec<(u64, ListEntry)>> = BTreeMap::new();
    let mut seen: BTreeSet<(String, String, String)> = BTreeSet::new();
    let mut dropped = 0;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |reason: String| Error::Row {
            path: path.to_string(),
            line,
            reason,
        };
        let user = &record[cols[0]];
        let condition = &record[cols[1]];
        let song = &record[cols[3]];
        let rank: u64 = record[cols[2]]
            .parse()
            .map_err(|_| row_err(format!("rank: cannot parse {:?}", &record[cols[2]])))?;
        let score: f64 = record[cols[4]]
            .parse()
            .map_err(|_| row_err(format!("score: cannot parse {:?}", &record[cols[4]])))?;
        if !score.is_finite() {
            return Err(row_err("score is not finite".into()));
        }
        if user.is_empty() || condition.is_empty() || song.is_empty() {
            return Err(row_err("empty user_id, condition or song_id".into()));
        }
        if !seen.insert((user.to_string(), condition.to_string(), song.to_string())) {
            return Err(row_err(format!("song {song:?} listed twice for ({user}, {condition})")));
        }
        if !catalog.contains(song) {
            dropped += 1;
            continue;
        }
        grouped
            .entry((user.to_string(), condition.to_string()))
            .or_default()
            .push((
                rank,
                ListEntry {
                    song_id: song.to_string(),
                    score,
                },
            ));
    }

    let mut out = ExternalLists {
        dropped,
        ..ExternalLists::default()
    };
    for ((user, condition), mut rows) in grouped {
        rows.sort_by_key(|(rank, _)| *rank);
        let mut entries: Vec<ListEntry> = rows.into_iter().map(|(_, e)| e).collect();
        if entries.windows(2).any(|w| w[0].score < w[1].score) {
            out.resorted += 1;
            sort_entries(&mut entries);
        }
        out.lists.push(RecommendationList {
            user_id: user,
            condition: Condition::new(&condition),
            entries,
            source: source.to_string(),
        });
    }
    if out.resorted > 0 {
        warn!("{path}: re-sorted {} lists whose ranks disagreed with scores", out.resorted);
    }
    if out.dropped > 0 {
        warn!("{path}: dropped {} entries for songs missing from the catalog", out.dropped);
    }
    Ok(out)
}

/// Writes lists in the exchange format, ranks starting at 1.
pub fn write_lists<W: Write>(w: W, lists: &[RecommendationList]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(LIST_HEADER)?;
    for list in lists {
        for (i, e) in list.entries.iter().enumerate() {
            wtr.write_record([
                list.user_id.as_str(),
                list.condition.name(),
                &(i + 1).to_string(),
                &e.song_id,
                &e.score.to_string(),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<lists>", e))?;
    Ok(())
}
