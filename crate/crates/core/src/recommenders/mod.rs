//! Initial top-N recommenders and the recommendation-list exchange format.

mod bpr;
mod external;
mod split;

use std::cmp::Ordering;
use std::collections::BTreeSet;

pub use bpr::{BprHyper, BprModel, BprRecommender, EpochStats};
pub use external::{load_external_lists, read_external_lists, write_lists, ExternalLists, LIST_HEADER};
pub use split::{user_split, UserSplitBpr, VirtualUserMap};

use crate::context::Condition;
use crate::error::Result;
use crate::ingestion::{SongId, UserId};

#[derive(Debug, Clone, PartialEq)]
pub struct ListEntry {
    pub song_id: SongId,
    pub score: f64,
}

/// Descending score, ascending song id on ties.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

pub fn sort_entries(entries: &mut [ListEntry]) {
    entries.sort_by(|a, b| rank_order(a.score, &a.song_id, b.score, &b.song_id));
}

/// Ranked songs for one (user, condition), best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationList {
    pub user_id: UserId,
    pub condition: Condition,
    pub entries: Vec<ListEntry>,
    /// Algorithm that produced the list, e.g. `BPR`.
    pub source: String,
}

impl RecommendationList {
    pub fn song_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.song_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// First `n` entries.
    pub fn truncated(&self, n: usize) -> RecommendationList {
        RecommendationList {
            entries: self.entries.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }

    pub fn key(&self) -> (UserId, Condition) {
        (self.user_id.clone(), self.condition.clone())
    }

    pub fn is_sorted(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].score >= w[1].score)
    }
}

/// Something that produces a ranked list for a user in a condition.
pub trait Recommender: Send + Sync {
    fn name(&self) -> &str;

    /// Top `n` songs for `user` in `condition`, never containing `exclude`.
    fn recommend(
        &self,
        user: &str,
        condition: &Condition,
        n: usize,
        exclude: &BTreeSet<&str>,
    ) -> Result<RecommendationList>;
}
