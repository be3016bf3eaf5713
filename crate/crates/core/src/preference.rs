//! Per-condition audio-feature centroids.
//!
//! The global model averages the feature vectors of every positively
//! interacted song in a condition across all users; the personalized model
//! does the same per user. Repeated listens count once per event.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::context::Condition;
use crate::error::{Error, Result};
use crate::feature_space::{AudioFeature, FeatureVector, FEATURE_COUNT};
use crate::ingestion::{Dataset, UserId};

/// Running component-wise sum of feature vectors.
#[derive(Debug, Clone, Copy, Default)]
struct Centroid {
    sum: [f64; FEATURE_COUNT],
    count: usize,
}

impl Centroid {
    fn add(&mut self, v: &FeatureVector) {
        for (s, x) in self.sum.iter_mut().zip(v.values()) {
            *s += x;
        }
        self.count += 1;
    }

    fn mean(&self) -> FeatureVector {
        let n = self.count as f64;
        FeatureVector::from_mean(self.sum.map(|s| s / n))
    }
}

/// Which level of the fallback chain answered a lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Personal,
    Global,
}

/// Resolves the preference vector for a (user, condition) pair.
pub trait PreferenceLookup: Send + Sync {
    fn lookup(&self, user: Option<&str>, condition: &Condition) -> Result<FeatureVector>;
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalModel {
    centroids: BTreeMap<Condition, FeatureVector>,
    support: BTreeMap<Condition, usize>,
}

impl GlobalModel {
    pub fn build(train: &Dataset) -> Result<Self> {
        let catalog = train.catalog();
        let mut acc: BTreeMap<Condition, Centroid> = BTreeMap::new();
        for e in train.events() {
            acc.entry(e.condition.clone())
                .or_default()
                .add(catalog.features(&e.song_id)?);
        }
        if acc.is_empty() {
            return Err(Error::NoTrainingSignal(
                "training set has no events in any condition".into(),
            ));
        }
        Ok(GlobalModel {
            centroids: acc.iter().map(|(c, a)| (c.clone(), a.mean())).collect(),
            support: acc.into_iter().map(|(c, a)| (c, a.count)).collect(),
        })
    }

    pub fn get(&self, condition: &Condition) -> Result<&FeatureVector> {
        self.centroids
            .get(condition)
            .ok_or_else(|| Error::UnmodeledCondition {
                user: None,
                condition: condition.name().to_string(),
            })
    }

    pub fn support(&self, condition: &Condition) -> usize {
        self.support.get(condition).copied().unwrap_or(0)
    }

    pub fn conditions(&self) -> impl Iterator<Item = (&Condition, &FeatureVector)> {
        self.centroids.iter()
    }
}

impl PreferenceLookup for GlobalModel {
    fn lookup(&self, _user: Option<&str>, condition: &Condition) -> Result<FeatureVector> {
        self.get(condition).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizedModel {
    centroids: BTreeMap<(UserId, Condition), FeatureVector>,
    support: BTreeMap<(UserId, Condition), usize>,
    fallback: Arc<GlobalModel>,
}

impl PersonalizedModel {
    /// `fallback` should come from the same training fold.
    pub fn build(train: &Dataset, fallback: Arc<GlobalModel>) -> Result<Self> {
        let catalog = train.catalog();
        let mut acc: BTreeMap<(UserId, Condition), Centroid> = BTreeMap::new();
        for e in train.events() {
            acc.entry((e.user_id.clone(), e.condition.clone()))
                .or_default()
                .add(catalog.features(&e.song_id)?);
        }
        if acc.is_empty() {
            return Err(Error::NoTrainingSignal(
                "training set has no events in any condition".into(),
            ));
        }
        Ok(PersonalizedModel {
            centroids: acc.iter().map(|(k, a)| (k.clone(), a.mean())).collect(),
            support: acc.into_iter().map(|(k, a)| (k, a.count)).collect(),
            fallback,
        })
    }

    pub fn fallback(&self) -> &GlobalModel {
        &self.fallback
    }

    pub fn support(&self, user: &str, condition: &Condition) -> usize {
        self.support
            .get(&(user.to_string(), condition.clone()))
            .copied()
            .unwrap_or(0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(UserId, Condition), &FeatureVector)> {
        self.centroids.iter()
    }

    /// Looks up a vector and reports which level of the chain answered.
    pub fn resolve(&self, user: Option<&str>, condition: &Condition) -> Result<(FeatureVector, Resolution)> {
        if let Some(u) = user {
            if let Some(v) = self.centroids.get(&(u.to_string(), condition.clone())) {
                return Ok((*v, Resolution::Personal));
            }
        }
        match self.fallback.get(condition) {
            Ok(v) => Ok((*v, Resolution::Global)),
            Err(_) => Err(Error::UnmodeledCondition {
                user: user.map(str::to_string),
                condition: condition.name().to_string(),
            }),
        }
    }
}

impl PreferenceLookup for PersonalizedModel {
    fn lookup(&self, user: Option<&str>, condition: &Condition) -> Result<FeatureVector> {
        self.resolve(user, condition).map(|(v, _)| v)
    }
}

pub const GLOBAL_SCOPE: &str = "GLOBAL";

fn dump_header() -> Vec<&'static str> {
    let mut h = vec!["scope", "condition"];
    h.extend(AudioFeature::ALL.iter().map(|f| f.name()));
    h.push("support");
    h
}

fn dump_row(scope: &str, condition: &Condition, v: &FeatureVector, support: usize) -> Vec<String> {
    let mut row = vec![scope.to_string(), condition.name().to_string()];
    row.extend(v.values().iter().map(|x| x.to_string()));
    row.push(support.to_string());
    row
}

/// Writes `scope, condition, <9 features>, support`. Global rows use the
/// scope `GLOBAL` and come first.
pub fn write_models<W: Write>(w: W, global: &GlobalModel, personal: Option<&PersonalizedModel>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(dump_header())?;
    for (c, v) in global.conditions() {
        wtr.write_record(dump_row(GLOBAL_SCOPE, c, v, global.support(c)))?;
    }
    if let Some(p) = personal {
        for ((u, c), v) in p.entries() {
            wtr.write_record(dump_row(u, c, v, p.support(u, c)))?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<model dump>", e))?;
    Ok(())
}

pub fn save_models(path: impl AsRef<Path>, global: &GlobalModel, personal: Option<&PersonalizedModel>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_models(std::io::BufWriter::new(file), global, personal)
}

/// Reads a model dump. The personalized model is `None` when the file only
/// holds global rows.
pub fn read_models<R: Read>(r: R, source: &str) -> Result<(Arc<GlobalModel>, Option<PersonalizedModel>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers()?.clone();
    let expected = dump_header();
    if headers.len() != expected.len()
        || headers.iter().zip(&expected).any(|(h, e)| !h.eq_ignore_ascii_case(e))
    {
        return Err(Error::Schema {
            path: source.to_string(),
            reason: format!("expected header {}", expected.join(",")),
        });
    }
    let mut global = GlobalModel::default();
    let mut centroids = BTreeMap::new();
    let mut support = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |reason: String| Error::Row {
            path: source.to_string(),
            line,
            reason,
        };
        let values: Vec<f64> = (2..2 + FEATURE_COUNT)
            .map(|i| record[i].parse::<f64>().map_err(|_| row_err(format!("bad value {:?}", &record[i]))))
            .collect::<Result<_>>()?;
        let v = FeatureVector::from_slice(&values).map_err(|e| row_err(e.to_string()))?;
        let n: usize = record[2 + FEATURE_COUNT]
            .parse()
            .map_err(|_| row_err("bad support".into()))?;
        if n == 0 {
            return Err(row_err("support must be at least 1".into()));
        }
        let condition = Condition::new(&record[1]);
        if &record[0] == GLOBAL_SCOPE {
            global.centroids.insert(condition.clone(), v);
            global.support.insert(condition, n);
        } else {
            let key = (record[0].to_string(), condition);
            centroids.insert(key.clone(), v);
            support.insert(key, n);
        }
    }
    if global.centroids.is_empty() {
        return Err(Error::Schema {
            path: source.to_string(),
            reason: "model dump has no GLOBAL rows".into(),
        });
    }
    let global = Arc::new(global);
    let personal = (!centroids.is_empty()).then(|| PersonalizedModel {
        centroids,
        support,
        fallback: Arc::clone(&global),
    });
    Ok((global, personal))
}

pub fn load_models(path: impl AsRef<Path>) -> Result<(Arc<GlobalModel>, Option<PersonalizedModel>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_models(file, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::time_of_day;
    use crate::ingestion::{Catalog, ListeningEvent, Song};

    fn catalog() -> Arc<Catalog> {
        Arc::new(Catalog::from_songs([
            Song { id: "zero".into(), features: FeatureVector::zeros() },
            Song { id: "one".into(), features: FeatureVector::ones() },
            Song { id: "mid".into(), features: FeatureVector::splat(0.25).unwrap() },
        ]))
    }

    fn ev(user: &str, song: &str, hour: u32) -> ListeningEvent {
        ListeningEvent {
            user_id: user.into(),
            song_id: song.into(),
            timestamp: chrono::NaiveDate::from_ymd_opt(2020, 6, 1).unwrap().and_hms_opt(hour, 0, 0).unwrap(),
            condition: time_of_day(hour).unwrap(),
        }
    }

    #[test]
    fn mean_of_one_and_midpoint() {
        let d = Dataset::new(vec![ev("u1", "mid", 8)], catalog()).unwrap();
        let g = GlobalModel::build(&d).unwrap();
        assert_eq!(g.get(&"morning".into()).unwrap(), &FeatureVector::splat(0.25).unwrap());

        let d = Dataset::new(vec![ev("u1", "zero", 8), ev("u2", "one", 9)], catalog()).unwrap();
        let g = GlobalModel::build(&d).unwrap();
        assert_eq!(g.get(&"morning".into()).unwrap(), &FeatureVector::splat(0.5).unwrap());
        assert_eq!(g.support(&"morning".into()), 2);
        assert!(g.get(&"night".into()).is_err());
    }

    #[test]
    fn empty_training_set_has_no_signal() {
        let d = Dataset::new(vec![], catalog()).unwrap();
        assert!(matches!(GlobalModel::build(&d), Err(Error::NoTrainingSignal(_))));
    }

    #[test]
    fn personalized_fallback_chain() {
        let d = Dataset::new(
            vec![ev("u1", "zero", 8), ev("u2", "one", 8), ev("u2", "one", 23)],
            catalog(),
        )
        .unwrap();
        let g = Arc::new(GlobalModel::build(&d).unwrap());
        let p = PersonalizedModel::build(&d, Arc::clone(&g)).unwrap();
        let morning: Condition = "morning".into();
        let evening: Condition = "evening".into();
        assert_eq!(p.resolve(Some("u1"), &morning).unwrap(), (FeatureVector::zeros(), Resolution::Personal));
        assert_eq!(p.resolve(Some("u1"), &evening).unwrap(), (FeatureVector::ones(), Resolution::Global));
        assert_eq!(p.lookup(Some("u_new"), &morning).unwrap(), *g.get(&morning).unwrap());
        let err = p.lookup(Some("u1"), &"night".into()).unwrap_err();
        assert!(matches!(err, Error::UnmodeledCondition { .. }));
    }

    #[test]
    fn single_user_personalized_equals_global() {
        let d = Dataset::new(
            vec![ev("u1", "zero", 8), ev("u1", "one", 9), ev("u1", "mid", 20)],
            catalog(),
        )
        .unwrap();
        let g = Arc::new(GlobalModel::build(&d).unwrap());
        let p = PersonalizedModel::build(&d, Arc::clone(&g)).unwrap();
        for (c, v) in g.conditions() {
            assert_eq!(p.resolve(Some("u1"), c).unwrap(), (*v, Resolution::Personal));
        }
    }

    #[test]
    fn dump_round_trip() {
        let d = Dataset::new(
            vec![ev("u1", "zero", 8), ev("u2", "mid", 8), ev("u2", "one", 13)],
            catalog(),
        )
        .unwrap();
        let g = Arc::new(GlobalModel::build(&d).unwrap());
        let p = PersonalizedModel::build(&d, Arc::clone(&g)).unwrap();
        let mut buf = Vec::new();
        write_models(&mut buf, &g, Some(&p)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("scope,condition,acousticness,"));
        let (g2, p2) = read_models(buf.as_slice(), "dump").unwrap();
        assert_eq!(*g2, *g);
        assert_eq!(p2.unwrap(), p);

        let (_, none) = read_models(
            {
                let mut b = Vec::new();
                write_models(&mut b, &g, None).unwrap();
                b
            }
            .as_slice(),
            "dump",
        )
        .unwrap();
        assert!(none.is_none());
        assert!(read_models("scope,condition\n".as_bytes(), "bad").is_err());
    }
}
