//! User splitting: each (user, condition) pair with events becomes its own
//! virtual user before BPR training.

use std::collections::{BTreeMap, BTreeSet};

use super::{BprHyper, BprModel, RecommendationList, Recommender};
use crate::context::Condition;
use crate::error::Result;
use crate::ingestion::{Dataset, ListeningEvent, UserId};

/// Bijection between (user, condition) pairs and virtual user ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VirtualUserMap {
    forward: BTreeMap<(UserId, Condition), String>,
    inverse: BTreeMap<String, (UserId, Condition)>,
}

impl VirtualUserMap {
    fn insert(&mut self, user: &str, condition: &Condition) -> String {
        let key = (user.to_string(), condition.clone());
        if let Some(v) = self.forward.get(&key) {
            return v.clone();
        }
        let base = format!("{user}@{}", condition.name());
        let mut id = base.clone();
        let mut n = 2;
        while self.inverse.contains_key(&id) {
            id = format!("{base}#{n}");
            n += 1;
        }
        self.forward.insert(key.clone(), id.clone());
        self.inverse.insert(id.clone(), key);
        id
    }

    pub fn virtual_id(&self, user: &str, condition: &Condition) -> Option<&str> {
        self.forward
            .get(&(user.to_string(), condition.clone()))
            .map(String::as_str)
    }

    pub fn original(&self, virtual_id: &str) -> Option<(&str, &Condition)> {
        self.inverse.get(virtual_id).map(|(u, c)| (u.as_str(), c))
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Virtual profiles of `user`, in condition order.
    pub fn profiles_of<'a>(&'a self, user: &'a str) -> impl Iterator<Item = (&'a Condition, &'a str)> + 'a {
        self.forward
            .range((user.to_string(), Condition::new(""))..)
            .take_while(move |((u, _), _)| u == user)
            .map(|((_, c), v)| (c, v.as_str()))
    }
}

/// Relabels every event's user as its (user, condition) virtual user.
pub fn user_split(train: &Dataset) -> (Dataset, VirtualUserMap) {
    let mut map = VirtualUserMap::default();
    let events: Vec<ListeningEvent> = train
        .events()
        .iter()
        .map(|e| ListeningEvent {
            user_id: map.insert(&e.user_id, &e.condition),
            ..e.clone()
        })
        .collect();
    (train.with_events(events), map)
}

/// BPR trained on virtual per-condition users.
#[derive(Debug, Clone)]
pub struct UserSplitBpr {
    pub model: BprModel,
    pub map: VirtualUserMap,
    support: BTreeMap<String, usize>,
    name: String,
}

impl UserSplitBpr {
    pub fn train(train: &Dataset, hyper: &BprHyper, seed: u64) -> Result<Self> {
        let (split, map) = user_split(train);
        let model = BprModel::train(&split, hyper, seed)?;
        let support = split
            .user_events()
            .into_iter()
            .map(|(u, n)| (u.to_string(), n))
            .collect();
        Ok(UserSplitBpr {
            model,
            map,
            support,
            name: "US-BPR".into(),
        })
    }

    /// The virtual user that answers for (user, condition): the matching
    /// profile if trained, else the user's best-supported trained profile.
    /// `None` means bias-only ranking.
    pub fn profile_for<'a>(&'a self, user: &'a str, condition: &Condition) -> Option<&'a str> {
        if let Some(v) = self.map.virtual_id(user, condition) {
            if self.model.knows_user(v) {
                return Some(v);
            }
        }
        let mut best: Option<(&str, usize)> = None;
        for (_, v) in self.map.profiles_of(user) {
            if !self.model.knows_user(v) {
                continue;
            }
            let n = self.support.get(v).copied().unwrap_or(0);
            // profiles_of is condition-ordered, so strict > keeps the first on ties
            if best.is_none_or(|(_, m)| n > m) {
                best = Some((v, n));
            }
        }
        best.map(|(v, _)| v)
    }
}

impl Recommender for UserSplitBpr {
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
        // An id the model does not know falls through to bias-only scores.
        let profile = self.profile_for(user, condition).unwrap_or("");
        let mut list = self.model.recommend_top_n(profile, condition, n, exclude, &self.name)?;
        list.user_id = user.to_string();
        Ok(list)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::context::time_of_day;
    use crate::feature_space::FeatureVector;
    use crate::ingestion::{Catalog, Song};

    fn ev(user: &str, song: &str, hour: u32) -> ListeningEvent {
        ListeningEvent {
            user_id: user.into(),
            song_id: song.into(),
            timestamp: chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(hour, 0, 0).unwrap(),
            condition: time_of_day(hour).unwrap(),
        }
    }

    fn dataset(events: Vec<ListeningEvent>) -> Dataset {
        let catalog = Arc::new(Catalog::from_songs((0..4).map(|i| Song {
            id: format!("s{i}"),
            features: FeatureVector::zeros(),
        })));
        Dataset::new(events, catalog).unwrap()
    }

    #[test]
    fn split_examples() {
        let d = dataset(vec![ev("u1", "s0", 8), ev("u1", "s1", 2), ev("u2", "s2", 14), ev("u2", "s3", 15)]);
        let (split, map) = user_split(&d);
        assert_eq!(split.len(), d.len());
        assert_eq!(map.len(), 3);
        assert_eq!(
            split.users(),
            BTreeSet::from(["u1@morning", "u1@night", "u2@afternoon"])
        );
        for (orig, e) in d.events().iter().zip(split.events()) {
            let (u, c) = map.original(&e.user_id).unwrap();
            assert_eq!((u, c), (orig.user_id.as_str(), &orig.condition));
        }
        let profiles: Vec<&str> = map.profiles_of("u1").map(|(_, v)| v).collect();
        assert_eq!(profiles, ["u1@morning", "u1@night"]);
    }

    #[test]
    fn colliding_labels_stay_distinct() {
        let d = dataset(vec![ev("a@night", "s0", 8), ev("a", "s1", 2)]);
        let mut d2 = d.events().to_vec();
        d2[0].condition = Condition::new("x");
        d2[1].condition = Condition::new("night@x");
        let (_, map) = user_split(&d.with_events(d2));
        assert_eq!(map.len(), 2);
        assert_ne!(
            map.virtual_id("a@night", &Condition::new("x")),
            map.virtual_id("a", &Condition::new("night@x"))
        );
    }

    #[test]
    fn untrained_condition_falls_back_to_best_supported_profile() {
        let d = dataset(vec![ev("u1", "s0", 8), ev("u1", "s1", 9), ev("u1", "s2", 2)]);
        let us = UserSplitBpr::train(&d, &BprHyper { epochs: 2, ..BprHyper::default() }, 1).unwrap();
        assert_eq!(us.profile_for("u1", &Condition::new("night")), Some("u1@night"));
        assert_eq!(us.profile_for("u1", &Condition::new("evening")), Some("u1@morning"));
        assert_eq!(us.profile_for("ghost", &Condition::new("evening")), None);
        let list = us
            .recommend("ghost", &Condition::new("evening"), 2, &BTreeSet::new())
            .unwrap();
        assert_eq!(list.user_id, "ghost");
        assert_eq!(list.source, "US-BPR");
    }

    #[test]
    fn single_condition_users_match_plain_bpr() {
        let d = dataset(vec![
            ev("u1", "s0", 8),
            ev("u1", "s1", 9),
            ev("u10", "s2", 2),
            ev("u10", "s3", 3),
            ev("u2", "s1", 14),
            ev("u2", "s2", 15),
        ]);
        let hyper = BprHyper { epochs: 20, ..BprHyper::default() };
        let bpr = super::super::BprRecommender::new(BprModel::train(&d, &hyper, 7).unwrap());
        let us = UserSplitBpr::train(&d, &hyper, 7).unwrap();
        for e in d.events() {
            let a = bpr.recommend(&e.user_id, &e.condition, 4, &BTreeSet::new()).unwrap();
            let b = us.recommend(&e.user_id, &e.condition, 4, &BTreeSet::new()).unwrap();
            assert_eq!(a.entries, b.entries);
        }
    }
}
