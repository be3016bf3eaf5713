//! Bayesian Personalized Ranking over implicit feedback.
//!
//! Matrix factorization with an item bias, trained by SGD on sampled
//! (user, positive, negative) triples to maximize `ln σ(x̂_ui − x̂_uj)`
//! under L2 regularization, where `x̂_ui = ⟨p_u, q_i⟩ + b_i`.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{rank_order, ListEntry, RecommendationList, Recommender};
use crate::context::Condition;
use crate::error::{Error, Result};
use crate::ingestion::{Dataset, SongId, UserId};

/// Number of held-in triples used to track AUC and loss across epochs.
const MONITOR_TRIPLES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BprHyper {
    pub factors: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    pub epochs: usize,
    /// Negative items drawn per sampled positive.
    pub negatives: usize,
    /// Standard deviation of the Gaussian factor initialization.
    pub init_std: f64,
}

impl Default for BprHyper {
    fn default() -> Self {
        BprHyper {
            factors: 10,
            learning_rate: 0.05,
            regularization: 0.01,
            epochs: 100,
            negatives: 1,
            init_std: 0.1,
        }
    }
}

impl BprHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, reason: &str| Err(Error::validation(format!("bpr {what}"), reason));
        if self.factors == 0 {
            return bad("factors", "must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.negatives == 0 {
            return bad("negatives", "must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive and finite");
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            return bad("regularization", "must be non-negative and finite");
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad("init_std", "must be non-negative and finite");
        }
        Ok(())
    }
}

/// Training diagnostics. Epoch 0 is measured before the first update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Fraction of monitor triples ranked correctly.
    pub auc: f64,
    /// Mean negative log-likelihood plus L2 penalty over the monitor triples.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BprModel {
    hyper: BprHyper,
    seed: u64,
    user_index: BTreeMap<UserId, usize>,
    items: Vec<SongId>,
    item_index: BTreeMap<SongId, usize>,
    /// Row-major, `factors` columns.
    user_factors: Vec<f64>,
    item_factors: Vec<f64>,
    item_bias: Vec<f64>,
    pub history: Vec<EpochStats>,
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Training {
    /// Distinct (user, item) positives.
    pairs: Vec<(usize, usize)>,
    /// Sorted positive items per user.
    positives: Vec<Vec<usize>>,
    n_items: usize,
}

impl Training {
    fn from_dataset(train: &Dataset) -> Result<(Training, BTreeMap<UserId, usize>, Vec<SongId>)> {
        let items: BTreeSet<&str> = train.songs();
        if items.is_empty() {
            return Err(Error::Empty("BPR needs at least one user and one item".into()));
        }
        // indexed by first appearance
        let mut user_index: BTreeMap<UserId, usize> = BTreeMap::new();
        for e in train.events() {
            let next = user_index.len();
            user_index.entry(e.user_id.clone()).or_insert(next);
        }
        let item_ids: Vec<SongId> = items.iter().map(|s| s.to_string()).collect();
        let item_lookup: BTreeMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (*s, i)).collect();

        let mut positives: Vec<Vec<usize>> = vec![Vec::new(); user_index.len()];
        for e in train.events() {
            positives[user_index[&e.user_id]].push(item_lookup[e.song_id.as_str()]);
        }
        let mut pairs = Vec::new();
        for (u, items) in positives.iter_mut().enumerate() {
            items.sort_unstable();
            items.dedup();
            pairs.extend(items.iter().map(|&i| (u, i)));
        }
        Ok((
            Training {
                pairs,
                positives,
                n_items: item_ids.len(),
            },
            user_index,
            item_ids,
        ))
    }

    fn is_positive(&self, user: usize, item: usize) -> bool {
        self.positives[user].binary_search(&item).is_ok()
    }

    /// Uniform negative for `user`, or `None` if the user has every item.
    fn sample_negative(&self, user: usize, rng: &mut impl Rng) -> Option<usize> {
        if self.positives[user].len() >= self.n_items {
            return None;
        }
        loop {
            let j = rng.random_range(0..self.n_items);
            if !self.is_positive(user, j) {
                return Some(j);
            }
        }
    }
}

impl BprModel {
    pub fn train(train: &Dataset, hyper: &BprHyper, seed: u64) -> Result<BprModel> {
        hyper.validate()?;
        let (data, user_index, items) = Training::from_dataset(train)?;
        let k = hyper.factors;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = Normal::new(0.0, hyper.init_std).map_err(|e| Error::validation("bpr init_std", e.to_string()))?;
        let user_factors: Vec<f64> = (0..user_index.len() * k).map(|_| init.sample(&mut rng)).collect();
        let item_factors: Vec<f64> = (0..items.len() * k).map(|_| init.sample(&mut rng)).collect();
        let item_index = items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let mut model = BprModel {
            hyper: hyper.clone(),
            seed,
            user_index,
            item_index,
            item_bias: vec![0.0; items.len()],
            items,
            user_factors,
            item_factors,
            history: Vec::with_capacity(hyper.epochs + 1),
        };

        // Monitor triples come from their own stream so that the training
        // sequence does not depend on MONITOR_TRIPLES.
        let mut monitor_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let monitor: Vec<(usize, usize, usize)> = (0..MONITOR_TRIPLES.min(data.pairs.len() * 4))
            .filter_map(|_| {
                let (u, i) = data.pairs[monitor_rng.random_range(0..data.pairs.len())];
                data.sample_negative(u, &mut monitor_rng).map(|j| (u, i, j))
            })
            .collect();
        if monitor.is_empty() {
            warn!("every user interacted with every item; BPR has nothing to rank");
        }

        model.history.push(model.monitor_stats(0, &monitor));
        for epoch in 1..=hyper.epochs {
            for _ in 0..data.pairs.len() {
                let (u, i) = data.pairs[rng.random_range(0..data.pairs.len())];
                for _ in 0..hyper.negatives {
                    if let Some(j) = data.sample_negative(u, &mut rng) {
                        model.sgd_step(u, i, j);
                    }
                }
            }
            let stats = model.monitor_stats(epoch, &monitor);
            debug!("bpr epoch {epoch}: auc {:.4} loss {:.5}", stats.auc, stats.loss);
            model.history.push(stats);
        }
        if model.user_factors.iter().chain(&model.item_factors).any(|x| !x.is_finite()) {
            return Err(Error::validation(
                "bpr training",
                "factors diverged to non-finite values; lower the learning rate",
            ));
        }
        Ok(model)
    }

    fn user_vec(&self, u: usize) -> &[f64] {
        let k = self.hyper.factors;
        &self.user_factors[u * k..(u + 1) * k]
    }

    fn item_vec(&self, i: usize) -> &[f64] {
        let k = self.hyper.factors;
        &self.item_factors[i * k..(i + 1) * k]
    }

    fn raw_score(&self, u: usize, i: usize) -> f64 {
        dot(self.user_vec(u), self.item_vec(i)) + self.item_bias[i]
    }

    fn sgd_step(&mut self, u: usize, i: usize, j: usize) {
        let k = self.hyper.factors;
        let lr = self.hyper.learning_rate;
        let reg = self.hyper.regularization;
        let x_uij = self.raw_score(u, i) - self.raw_score(u, j);
        // d/dx ln σ(x) = σ(-x)
        let g = 1.0 / (1.0 + x_uij.exp());
        for f in 0..k {
            let pu = self.user_factors[u * k + f];
            let qi = self.item_factors[i * k + f];
            let qj = self.item_factors[j * k + f];
            self.user_factors[u * k + f] += lr * (g * (qi - qj) - reg * pu);
            self.item_factors[i * k + f] += lr * (g * pu - reg * qi);
            self.item_factors[j * k + f] += lr * (-g * pu - reg * qj);
        }
        self.item_bias[i] += lr * (g - reg * self.item_bias[i]);
        self.item_bias[j] += lr * (-g - reg * self.item_bias[j]);
    }

    fn monitor_stats(&self, epoch: usize, triples: &[(usize, usize, usize)]) -> EpochStats {
        if triples.is_empty() {
            return EpochStats { epoch, auc: 0.0, loss: 0.0 };
        }
        let reg = self.hyper.regularization;
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let mut correct = 0usize;
        let mut loss = 0.0;
        for &(u, i, j) in triples {
            let x = self.raw_score(u, i) - self.raw_score(u, j);
            if x > 0.0 {
                correct += 1;
            }
            let penalty = sq(self.user_vec(u))
                + sq(self.item_vec(i))
                + sq(self.item_vec(j))
                + self.item_bias[i].powi(2)
                + self.item_bias[j].powi(2);
            loss += softplus(-x) + 0.5 * reg * penalty;
        }
        let n = triples.len() as f64;
        EpochStats {
            epoch,
            auc: correct as f64 / n,
            loss: loss / n,
        }
    }

    pub fn hyper(&self) -> &BprHyper {
        &self.hyper
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.user_index.keys().map(String::as_str)
    }

    pub fn items(&self) -> &[SongId] {
        &self.items
    }

    pub fn knows_user(&self, user: &str) -> bool {
        self.user_index.contains_key(user)
    }

    pub fn user_factors(&self, user: &str) -> Option<&[f64]> {
        self.user_index.get(user).map(|&u| self.user_vec(u))
    }

    pub fn item_factors(&self, song: &str) -> Option<&[f64]> {
        self.item_index.get(song).map(|&i| self.item_vec(i))
    }

    pub fn item_bias(&self, song: &str) -> Option<f64> {
        self.item_index.get(song).map(|&i| self.item_bias[i])
    }

    /// `⟨p_u, q_i⟩ + b_i`; a user unseen in training scores by bias alone.
    pub fn score(&self, user: &str, song: &str) -> Result<f64> {
        let i = *self
            .item_index
            .get(song)
            .ok_or_else(|| Error::UnknownSong(song.to_string()))?;
        Ok(match self.user_index.get(user) {
            Some(&u) => self.raw_score(u, i),
            None => self.item_bias[i],
        })
    }

    fn scores_for(&self, user: &str) -> Vec<f64> {
        match self.user_index.get(user) {
            Some(&u) => (0..self.items.len()).map(|i| self.raw_score(u, i)).collect(),
            None => self.item_bias.clone(),
        }
    }

    /// Top `n` items by score, skipping `exclude`; ties by ascending id.
    pub fn recommend_top_n(
        &self,
        user: &str,
        condition: &Condition,
        n: usize,
        exclude: &BTreeSet<&str>,
        source: &str,
    ) -> Result<RecommendationList> {
        if n == 0 {
            return Err(Error::validation("list size", "n must be at least 1"));
        }
        let scores = self.scores_for(user);
        let mut candidates: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !exclude.contains(self.items[*i].as_str()))
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| rank_order(a.1, &self.items[a.0], b.1, &self.items[b.0]);
        if candidates.len() > n {
            candidates.select_nth_unstable_by(n - 1, cmp);
            candidates.truncate(n);
        } else if candidates.len() < n {
            warn!(
                "only {} candidate songs for user {user:?}, requested {n}",
                candidates.len()
            );
        }
        candidates.sort_by(cmp);
        Ok(RecommendationList {
            user_id: user.to_string(),
            condition: condition.clone(),
            entries: candidates
                .into_iter()
                .map(|(i, score)| ListEntry {
                    song_id: self.items[i].clone(),
                    score,
                })
                .collect(),
            source: source.to_string(),
        })
    }

    #[cfg(test)]
    pub(crate) fn from_parts(
        users: &[(&str, Vec<f64>)],
        items: &[(&str, Vec<f64>, f64)],
    ) -> BprModel {
        let factors = users.first().map(|u| u.1.len()).or(items.first().map(|i| i.1.len())).unwrap_or(1);
        BprModel {
            hyper: BprHyper { factors, ..BprHyper::default() },
            seed: 0,
            user_index: users.iter().enumerate().map(|(i, u)| (u.0.to_string(), i)).collect(),
            items: items.iter().map(|i| i.0.to_string()).collect(),
            item_index: items.iter().enumerate().map(|(n, i)| (i.0.to_string(), n)).collect(),
            user_factors: users.iter().flat_map(|u| u.1.clone()).collect(),
            item_factors: items.iter().flat_map(|i| i.1.clone()).collect(),
            item_bias: items.iter().map(|i| i.2).collect(),
            history: Vec::new(),
        }
    }
}

/// Plain, context-unaware BPR: every condition gets the user's list.
#[derive(Debug, Clone)]
pub struct BprRecommender {
    pub model: BprModel,
    name: String,
}

impl BprRecommender {
    pub fn new(model: BprModel) -> Self {
        BprRecommender {
            model,
            name: "BPR".into(),
        }
    }
}

impl Recommender for BprRecommender {
    fn name(&self) -> &str {
        &self.name
    }

    fn recommend(
        &self,
        user: &str,
        condition: &Condition,
        n: usize,
        exclude: &BTreeSet<&str>,
    ) -> Result<RecommendationList> {
        self.model.recommend_top_n(user, condition, n, exclude, &self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::context::time_of_day;
    use crate::feature_space::FeatureVector;
    use crate::ingestion::{Catalog, ListeningEvent, Song};

    fn three_song_model() -> BprModel {
        BprModel::from_parts(
            &[("u", vec![1.0])],
            &[("s1", vec![0.9], 0.0), ("s2", vec![0.5], 0.0), ("s3", vec![0.1], 0.0)],
        )
    }

    #[test]
    fn score_examples() {
        let m = BprModel::from_parts(&[("u", vec![1.0, 0.0])], &[("s", vec![1.0, 0.0], 0.0)]);
        assert_eq!(m.score("u", "s").unwrap(), 1.0);
        let m = BprModel::from_parts(&[("u", vec![0.0, 0.0])], &[("s", vec![0.0, 0.0], 0.3)]);
        assert_eq!(m.score("u", "s").unwrap(), 0.3);
        assert_eq!(m.score("stranger", "s").unwrap(), 0.3);
        assert!(matches!(m.score("u", "nope"), Err(Error::UnknownSong(_))));
    }

    #[test]
    fn top_n_examples() {
        let m = three_song_model();
        let c = Condition::new("morning");
        let list = m.recommend_top_n("u", &c, 2, &BTreeSet::new(), "BPR").unwrap();
        assert_eq!(list.song_ids(), ["s1", "s2"]);
        let list = m.recommend_top_n("u", &c, 2, &BTreeSet::from(["s1"]), "BPR").unwrap();
        assert_eq!(list.song_ids(), ["s2", "s3"]);
        let list = m.recommend_top_n("u", &c, 10, &BTreeSet::new(), "BPR").unwrap();
        assert_eq!(list.len(), 3);
        assert!(m.recommend_top_n("u", &c, 0, &BTreeSet::new(), "BPR").is_err());

        let tie = BprModel::from_parts(
            &[("u", vec![1.0])],
            &[("s3", vec![0.5], 0.0), ("s2", vec![0.5], 0.0), ("s1", vec![0.9], 0.0)],
        );
        let list = tie.recommend_top_n("u", &c, 3, &BTreeSet::new(), "BPR").unwrap();
        assert_eq!(list.song_ids(), ["s1", "s2", "s3"]);
    }

    fn toy_dataset() -> Dataset {
        let catalog = Arc::new(Catalog::from_songs((0..6).map(|i| Song {
            id: format!("s{i}"),
            features: FeatureVector::zeros(),
        })));
        let ts = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(9, 0, 0).unwrap();
        let mut events = Vec::new();
        for u in 0..3 {
            for rep in 0..4 {
                events.push(ListeningEvent {
                    user_id: format!("u{u}"),
                    song_id: format!("s{}", 2 * u + rep % 2),
                    timestamp: ts,
                    condition: time_of_day(9).unwrap(),
                });
            }
        }
        Dataset::new(events, catalog).unwrap()
    }

    #[test]
    fn invalid_hyperparameters() {
        let d = toy_dataset();
        for hyper in [
            BprHyper { epochs: 0, ..BprHyper::default() },
            BprHyper { factors: 0, ..BprHyper::default() },
            BprHyper { learning_rate: -1.0, ..BprHyper::default() },
        ] {
            assert!(BprModel::train(&d, &hyper, 1).is_err());
        }
        let empty = d.with_events(Vec::new());
        assert!(BprModel::train(&empty, &BprHyper::default(), 1).is_err());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let d = toy_dataset();
        let hyper = BprHyper { factors: 4, epochs: 50, ..BprHyper::default() };
        let a = BprModel::train(&d, &hyper, 7).unwrap();
        let b = BprModel::train(&d, &hyper, 7).unwrap();
        assert_eq!(a, b);
        let c = BprModel::train(&d, &hyper, 8).unwrap();
        assert_ne!(a.user_factors, c.user_factors);
        assert_eq!(a.history.len(), 51);
        assert!(a.history.last().unwrap().loss < a.history[0].loss);
    }

    #[test]
    fn top_n_scores_match_score_and_skip_exclusions() {
        let d = toy_dataset();
        let m = BprModel::train(&d, &BprHyper { factors: 3, epochs: 10, ..BprHyper::default() }, 3).unwrap();
        let exclude = BTreeSet::from(["s0", "s1"]);
        let list = m.recommend_top_n("u0", &Condition::new("morning"), 4, &exclude, "BPR").unwrap();
        assert_eq!(list.len(), 4);
        for e in &list.entries {
            assert!(!exclude.contains(e.song_id.as_str()));
            assert_eq!(e.score, m.score("u0", &e.song_id).unwrap());
        }
        assert!(list.is_sorted());
    }
}
