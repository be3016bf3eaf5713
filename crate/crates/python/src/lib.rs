//! Python bindings for the `ctx_rerank` core library.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::Timelike;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ctx_rerank::analysis::{self, TestKind};
use ctx_rerank::context::{self, Condition};
use ctx_rerank::evaluation;
use ctx_rerank::feature_space::{self, FeatureVector, NormalizedEuclidean};
use ctx_rerank::ingestion::{self, Catalog, ListeningEvent, Song};
use ctx_rerank::preference::{GlobalModel, PersonalizedModel, PreferenceLookup};
use ctx_rerank::recommenders::{BprHyper, BprModel, ListEntry, RecommendationList};
use ctx_rerank::rerank::{self, RerankConfig, RerankMode, Reranker};

fn py_err(e: ctx_rerank::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn vector(values: Vec<f64>) -> PyResult<FeatureVector> {
    FeatureVector::from_slice(&values).map_err(py_err)
}

fn parse_mode(mode: &str) -> PyResult<RerankMode> {
    mode.parse().map_err(py_err)
}

fn relevant_set(relevant: Vec<String>) -> BTreeSet<String> {
    relevant.into_iter().collect()
}

#[pyfunction]
fn normalize_tempo(raw: f64) -> PyResult<f64> {
    feature_space::normalize_tempo(raw).map_err(py_err)
}

#[pyfunction]
fn normalize_loudness(raw: f64) -> PyResult<f64> {
    feature_space::normalize_loudness(raw).map_err(py_err)
}

/// Normalized Euclidean distance over all nine features.
#[pyfunction]
fn distance(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    Ok(feature_space::distance(&vector(a)?, &vector(b)?))
}

#[pyfunction]
fn similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    Ok(feature_space::similarity(&vector(a)?, &vector(b)?))
}

#[pyfunction]
fn time_of_day(hour: u32) -> PyResult<String> {
    context::time_of_day(hour).map(|c| c.to_string()).map_err(py_err)
}

#[pyfunction]
fn minmax_normalize(scores: Vec<f64>) -> PyResult<Vec<f64>> {
    rerank::minmax_normalize(&scores).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (lam, sim, rec_norm, mode = "regular"))]
fn combine(lam: f64, sim: f64, rec_norm: f64, mode: &str) -> PyResult<f64> {
    Ok(rerank::combine(lam, parse_mode(mode)?, sim, rec_norm))
}

#[pyfunction]
fn precision_at_k(ranked: Vec<String>, relevant: Vec<String>, k: usize) -> PyResult<f64> {
    evaluation::precision_at_k(&ranked, &relevant_set(relevant), k).map_err(py_err)
}

#[pyfunction]
fn average_precision_at_k(ranked: Vec<String>, relevant: Vec<String>, k: usize) -> PyResult<f64> {
    evaluation::average_precision_at_k(&ranked, &relevant_set(relevant), k).map_err(py_err)
}

#[pyfunction]
fn map_at_k(average_precisions: Vec<f64>) -> PyResult<f64> {
    evaluation::map_at_k(&average_precisions).map_err(py_err)
}

/// Returns `(t, p, df)`; `kind` is `welch` or `student`.
#[pyfunction]
#[pyo3(signature = (a, b, kind = "welch"))]
fn t_test(a: Vec<f64>, b: Vec<f64>, kind: &str) -> PyResult<(f64, f64, f64)> {
    let kind = match kind {
        "welch" => TestKind::Welch,
        "student" => TestKind::Student,
        other => return Err(PyValueError::new_err(format!("unknown test kind {other:?}"))),
    };
    let r = analysis::t_test(&a, &b, kind).map_err(py_err)?;
    Ok((r.t, r.p, r.df))
}

#[pyfunction]
fn bonferroni_threshold(alpha: f64, m: usize) -> PyResult<f64> {
    analysis::bonferroni_threshold(alpha, m).map_err(py_err)
}

/// Listening events over a feature catalog, with time-of-day conditions.
#[pyclass(name = "Dataset", module = "ctxrerank")]
struct PyDataset {
    inner: ingestion::Dataset,
}

#[pymethods]
impl PyDataset {
    /// `catalog` maps song ids to nine normalized features; `events` holds
    /// `(user_id, song_id, local_iso_timestamp)` triples.
    #[new]
    fn new(catalog: BTreeMap<String, Vec<f64>>, events: Vec<(String, String, String)>) -> PyResult<Self> {
        let songs = catalog
            .into_iter()
            .map(|(id, f)| Ok(Song { id, features: vector(f)? }))
            .collect::<PyResult<Vec<_>>>()?;
        let catalog = Arc::new(Catalog::from_songs(songs));
        let events = events
            .into_iter()
            .map(|(user_id, song_id, ts)| {
                let timestamp = ingestion::parse_local_timestamp(&ts)
                    .ok_or_else(|| PyValueError::new_err(format!("bad timestamp {ts:?}")))?;
                let condition = context::time_of_day(timestamp.hour()).map_err(py_err)?;
                Ok(ListeningEvent {
                    user_id,
                    song_id,
                    timestamp,
                    condition,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok(PyDataset {
            inner: ingestion::Dataset::new(events, catalog).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn users(&self) -> Vec<String> {
        self.inner.users().into_iter().map(String::from).collect()
    }

    /// Drops songs below `min_song_plays` plays, then users below `min_user_events`.
    #[pyo3(signature = (min_song_plays, min_user_events, fixpoint = false))]
    fn filtered(&self, min_song_plays: usize, min_user_events: usize, fixpoint: bool) -> Self {
        let opts = ingestion::FilterOptions {
            min_song_plays,
            min_user_events,
            fixpoint,
        };
        PyDataset {
            inner: ingestion::filter_dataset(&self.inner, opts),
        }
    }
}

/// Global and personalized condition centroids fitted on a dataset.
#[pyclass(name = "PreferenceModel", module = "ctxrerank")]
struct PyPreferenceModel {
    global: Arc<GlobalModel>,
    personal: PersonalizedModel,
    catalog: Arc<Catalog>,
}

impl PyPreferenceModel {
    fn lookup(&self, personalized: bool) -> &dyn PreferenceLookup {
        if personalized {
            &self.personal
        } else {
            self.global.as_ref()
        }
    }
}

#[pymethods]
impl PyPreferenceModel {
    #[new]
    fn new(data: &PyDataset) -> PyResult<Self> {
        let global = Arc::new(GlobalModel::build(&data.inner).map_err(py_err)?);
        let personal = PersonalizedModel::build(&data.inner, global.clone()).map_err(py_err)?;
        Ok(PyPreferenceModel {
            global,
            personal,
            catalog: data.inner.catalog().clone(),
        })
    }

    /// Centroid for `condition`, personalized when `user` is given.
    #[pyo3(signature = (condition, user = None))]
    fn centroid(&self, condition: &str, user: Option<&str>) -> PyResult<Vec<f64>> {
        let v = self
            .lookup(user.is_some())
            .lookup(user, &Condition::new(condition))
            .map_err(py_err)?;
        Ok(v.values().to_vec())
    }

    /// Re-ranks `(song_id, score)` pairs and returns `(song_id, new_score)`
    /// pairs, best first.
    #[pyo3(signature = (user, condition, items, lam, mode = "regular", personalized = true))]
    fn rerank(
        &self,
        user: &str,
        condition: &str,
        items: Vec<(String, f64)>,
        lam: f64,
        mode: &str,
        personalized: bool,
    ) -> PyResult<Vec<(String, f64)>> {
        let list = RecommendationList {
            user_id: user.to_string(),
            condition: Condition::new(condition),
            entries: items
                .into_iter()
                .map(|(song_id, score)| ListEntry { song_id, score })
                .collect(),
            source: "python".to_string(),
        };
        let metric = NormalizedEuclidean::default();
        let reranker = Reranker::new(&self.catalog, self.lookup(personalized), &metric);
        let cfg = RerankConfig::new(lam, parse_mode(mode)?).map_err(py_err)?;
        let out = reranker.rerank(&list, cfg).map_err(py_err)?;
        Ok(out.entries.into_iter().map(|e| (e.song_id, e.new_score)).collect())
    }
}

/// Matrix-factorization recommender trained with Bayesian personalized ranking.
#[pyclass(name = "Bpr", module = "ctxrerank")]
struct PyBpr {
    inner: BprModel,
}

#[pymethods]
impl PyBpr {
    #[new]
    #[pyo3(signature = (data, factors = 10, learning_rate = 0.05, regularization = 0.01, epochs = 100, seed = 42))]
    fn new(
        data: &PyDataset,
        factors: usize,
        learning_rate: f64,
        regularization: f64,
        epochs: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let hyper = BprHyper {
            factors,
            learning_rate,
            regularization,
            epochs,
            ..BprHyper::default()
        };
        Ok(PyBpr {
            inner: BprModel::train(&data.inner, &hyper, seed).map_err(py_err)?,
        })
    }

    fn score(&self, user: &str, song: &str) -> PyResult<f64> {
        self.inner.score(user, song).map_err(py_err)
    }

    /// Top `n` `(song_id, score)` pairs for `user`, skipping `exclude`.
    #[pyo3(signature = (user, n, exclude = Vec::new()))]
    fn recommend(&self, user: &str, n: usize, exclude: Vec<String>) -> PyResult<Vec<(String, f64)>> {
        let exclude: BTreeSet<&str> = exclude.iter().map(String::as_str).collect();
        let list = self
            .inner
            .recommend_top_n(user, &Condition::new("any"), n, &exclude, "BPR")
            .map_err(py_err)?;
        Ok(list.entries.into_iter().map(|e| (e.song_id, e.score)).collect())
    }
}

#[pymodule]
fn ctxrerank(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize_tempo, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_loudness, m)?)?;
    m.add_function(wrap_pyfunction!(distance, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(time_of_day, m)?)?;
    m.add_function(wrap_pyfunction!(minmax_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(combine, m)?)?;
    m.add_function(wrap_pyfunction!(precision_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(map_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(t_test, m)?)?;
    m.add_function(wrap_pyfunction!(bonferroni_threshold, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPreferenceModel>()?;
    m.add_class::<PyBpr>()?;
    Ok(())
}
