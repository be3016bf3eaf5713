//! Contextual post-filtering by score interpolation.
//!
//! Each entry of an initial list gets
//!
//! ```text
//! regular:  λ · sim(song, model)  + (1 − λ) · rec′
//! opposite: λ · dist(song, model) + (1 − λ) · rec′
//! ```
//!
//! where `rec′` is the initial score min-max normalized within its scope and
//! `sim = 1 − dist`. The list is then sorted by the new score.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::Condition;
use crate::error::{Error, Result};
use crate::feature_space::DistanceMetric;
use crate::ingestion::{Catalog, SongId, UserId};
use crate::preference::PreferenceLookup;
use crate::recommenders::{rank_order, ListEntry, RecommendationList};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankMode {
    Regular,
    Opposite,
}

impl RerankMode {
    pub fn name(self) -> &'static str {
        match self {
            RerankMode::Regular => "regular",
            RerankMode::Opposite => "opposite",
        }
    }
}

impl fmt::Display for RerankMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RerankMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(RerankMode::Regular),
            "opposite" => Ok(RerankMode::Opposite),
            _ => Err(Error::validation("rerank mode", format!("unknown mode {s:?}"))),
        }
    }
}

/// Which preference model supplies the target vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Global,
    Personalized,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Global => "global",
            ModelKind::Personalized => "personalized",
        }
    }
}

/// Range over which initial scores are min-max normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreScope {
    /// Each (user, condition) list on its own.
    #[default]
    List,
    /// All lists of the same user.
    User,
    /// Every list in the set being re-ranked.
    Set,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankConfig {
    lambda: f64,
    pub mode: RerankMode,
}

impl RerankConfig {
    pub fn new(lambda: f64, mode: RerankMode) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(RerankConfig { lambda, mode })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::validation("lambda", format!("{lambda} is outside [0, 1]")))
    }
}

/// λ = 0.0, 0.1, …, 1.0.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Maps scores affinely onto `[0, 1]`; a constant list maps to all 0.5.
pub fn minmax_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    let bounds = score_bounds(scores.iter().copied())?;
    Ok(scores.iter().map(|&s| normalize_with(s, bounds)).collect())
}

fn score_bounds(scores: impl Iterator<Item = f64>) -> Result<(f64, f64)> {
    let mut bounds: Option<(f64, f64)> = None;
    for s in scores {
        if !s.is_finite() {
            return Err(Error::validation("score", format!("non-finite score {s}")));
        }
        bounds = Some(match bounds {
            None => (s, s),
            Some((lo, hi)) => (lo.min(s), hi.max(s)),
        });
    }
    bounds.ok_or_else(|| Error::Empty("cannot normalize an empty score list".into()))
}

fn normalize_with(s: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi == lo {
        0.5
    } else {
        ((s - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

/// Interpolated score for one entry.
pub fn combine(lambda: f64, mode: RerankMode, sim: f64, rec_norm: f64) -> f64 {
    let context = match mode {
        RerankMode::Regular => sim,
        RerankMode::Opposite => 1.0 - sim,
    };
    lambda * context + (1.0 - lambda) * rec_norm
}

/// One re-ranked entry with the terms that produced its score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEntry {
    pub song_id: SongId,
    pub initial_score: f64,
    pub normalized_rec: f64,
    pub sim: f64,
    pub distance: f64,
    pub new_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankedList {
    pub user_id: UserId,
    pub condition: Condition,
    pub source: String,
    pub lambda: f64,
    pub mode: RerankMode,
    pub entries: Vec<ScoredEntry>,
}

impl RerankedList {
    pub fn song_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.song_id.as_str()).collect()
    }

    /// The list with new scores as its scores.
    pub fn to_list(&self) -> RecommendationList {
        RecommendationList {
            user_id: self.user_id.clone(),
            condition: self.condition.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ListEntry {
                    song_id: e.song_id.clone(),
                    score: e.new_score,
                })
                .collect(),
            source: self.source.clone(),
        }
    }
}

/// A list with λ-independent terms computed once.
#[derive(Debug, Clone)]
struct Prepared<'a> {
    list: &'a RecommendationList,
    /// (normalized_rec, sim, distance) per entry, in input order.
    terms: Vec<(f64, f64, f64)>,
}

impl Prepared<'_> {
    fn apply(&self, cfg: RerankConfig) -> RerankedList {
        let mut entries: Vec<ScoredEntry> = self
            .list
            .entries
            .iter()
            .zip(&self.terms)
            .map(|(e, &(rec, sim, dist))| ScoredEntry {
                song_id: e.song_id.clone(),
                initial_score: e.score,
                normalized_rec: rec,
                sim,
                distance: dist,
                new_score: match cfg.mode {
                    RerankMode::Regular => cfg.lambda * sim + (1.0 - cfg.lambda) * rec,
                    RerankMode::Opposite => cfg.lambda * dist + (1.0 - cfg.lambda) * rec,
                },
            })
            .collect();
        entries.sort_by(|a, b| rank_order(a.new_score, &a.song_id, b.new_score, &b.song_id));
        RerankedList {
            user_id: self.list.user_id.clone(),
            condition: self.list.condition.clone(),
            source: self.list.source.clone(),
            lambda: cfg.lambda,
            mode: cfg.mode,
            entries,
        }
    }
}

/// Re-ranks lists against one preference model.
pub struct Reranker<'a> {
    catalog: &'a Catalog,
    model: &'a dyn PreferenceLookup,
    metric: &'a dyn DistanceMetric,
}

impl<'a> Reranker<'a> {
    pub fn new(catalog: &'a Catalog, model: &'a dyn PreferenceLookup, metric: &'a dyn DistanceMetric) -> Self {
        Reranker { catalog, model, metric }
    }

    fn prepare<'l>(&self, list: &'l RecommendationList, bounds: Option<(f64, f64)>) -> Result<Prepared<'l>> {
        if list.entries.is_empty() {
            return Ok(Prepared { list, terms: Vec::new() });
        }
        let bounds = match bounds {
            Some(b) => b,
            None => score_bounds(list.entries.iter().map(|e| e.score))?,
        };
        let target = self.model.lookup(Some(&list.user_id), &list.condition)?;
        let terms = list
            .entries
            .iter()
            .map(|e| {
                let features = self.catalog.features(&e.song_id)?;
                let dist = self.metric.distance(features, &target);
                Ok((normalize_with(e.score, bounds), 1.0 - dist, dist))
            })
            .collect::<Result<_>>()?;
        Ok(Prepared { list, terms })
    }

    /// Re-ranks one list with its scores normalized over the list itself.
    pub fn rerank(&self, list: &RecommendationList, cfg: RerankConfig) -> Result<RerankedList> {
        Ok(self.prepare(list, None)?.apply(cfg))
    }

    /// Re-ranks one list using the given normalization bounds.
    pub fn rerank_with_bounds(
        &self,
        list: &RecommendationList,
        bounds: (f64, f64),
        cfg: RerankConfig,
    ) -> Result<RerankedList> {
        Ok(self.prepare(list, Some(bounds))?.apply(cfg))
    }

    /// Re-ranks a list set for every λ in `lambdas`; output follows the grid
    /// order and the input list order.
    pub fn sweep(
        &self,
        lists: &[RecommendationList],
        lambdas: &[f64],
        mode: RerankMode,
        scope: ScoreScope,
    ) -> Result<Vec<(f64, Vec<RerankedList>)>> {
        let mut out = Vec::with_capacity(lambdas.len());
        self.sweep_each(lists, lambdas, mode, scope, |lambda, reranked| {
            out.push((lambda, reranked));
            Ok(())
        })?;
        Ok(out)
    }

    /// Like [`Reranker::sweep`], handing each λ's lists to `f` in grid order
    /// instead of keeping them all.
    pub fn sweep_each<F>(
        &self,
        lists: &[RecommendationList],
        lambdas: &[f64],
        mode: RerankMode,
        scope: ScoreScope,
        mut f: F,
    ) -> Result<()>
    where
        F: FnMut(f64, Vec<RerankedList>) -> Result<()>,
    {
        for &l in lambdas {
            check_lambda(l)?;
        }
        let bounds = scope_bounds(lists, scope)?;
        let prepared: Vec<Prepared> = lists
            .par_iter()
            .zip(bounds.par_iter())
            .map(|(list, b)| self.prepare(list, *b))
            .collect::<Result<_>>()?;
        for &lambda in lambdas {
            let cfg = RerankConfig { lambda, mode };
            f(lambda, prepared.par_iter().map(|p| p.apply(cfg)).collect())?;
        }
        Ok(())
    }
}

/// Per-list normalization bounds for a scope; `None` means the list's own.
fn scope_bounds(lists: &[RecommendationList], scope: ScoreScope) -> Result<Vec<Option<(f64, f64)>>> {
    let nonempty = |l: &&RecommendationList| !l.entries.is_empty();
    match scope {
        ScoreScope::List => Ok(vec![None; lists.len()]),
        ScoreScope::Set => {
            let all = lists.iter().filter(nonempty).flat_map(|l| l.entries.iter().map(|e| e.score));
            let b = if lists.iter().any(|l| nonempty(&l)) {
                Some(score_bounds(all)?)
            } else {
                None
            };
            Ok(vec![b; lists.len()])
        }
        ScoreScope::User => {
            let mut per_user: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
            for l in lists.iter().filter(nonempty) {
                let b = score_bounds(l.entries.iter().map(|e| e.score))?;
                per_user
                    .entry(l.user_id.as_str())
                    .and_modify(|(lo, hi)| {
                        *lo = lo.min(b.0);
                        *hi = hi.max(b.1);
                    })
                    .or_insert(b);
            }
            Ok(lists
                .iter()
                .map(|l| per_user.get(l.user_id.as_str()).copied())
                .collect())
        }
    }
}

pub const RERANKED_HEADER: [&str; 8] = ["user_id", "condition", "rank", "song_id", "score", "sim", "rec_norm", "new_score"];

/// Exchange-format rows plus audit columns; `score` holds the new score.
pub fn write_reranked<W: Write>(w: W, lists: &[RerankedList]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(RERANKED_HEADER)?;
    for list in lists {
        for (i, e) in list.entries.iter().enumerate() {
            let new_score = e.new_score.to_string();
            wtr.write_record([
                list.user_id.as_str(),
                list.condition.name(),
                &(i + 1).to_string(),
                &e.song_id,
                &new_score,
                &e.sim.to_string(),
                &e.normalized_rec.to_string(),
                &new_score,
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<reranked lists>", e))?;
    Ok(())
}
