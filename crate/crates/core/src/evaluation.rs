//! Cross-validation folds and ranking metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::context::Condition;
use crate::error::{Error, Result};
use crate::ingestion::{Dataset, SongId, UserId};
use crate::recommenders::RecommendationList;
use crate::rerank::{RerankMode, RerankedList};

pub type ListKey = (UserId, Condition);

#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train: Dataset,
    pub test: Dataset,
    pub seed: u64,
}

/// Shuffles events with a seeded RNG and cuts them into `k_folds`
/// near-equal blocks; fold `i` tests on block `i`.
///
/// With `stratified`, each user's events are dealt round-robin across the
/// folds instead, so every user appears in every test fold they can.
pub fn make_folds(d: &Dataset, k_folds: usize, seed: u64, stratified: bool) -> Result<Vec<FoldSplit>> {
    if k_folds < 2 {
        return Err(Error::validation("folds", "need at least 2 folds"));
    }
    if d.len() < k_folds {
        return Err(Error::validation(
            "folds",
            format!("{} events cannot fill {k_folds} folds", d.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; d.len()];
    if stratified {
        let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in d.events().iter().enumerate() {
            by_user.entry(e.user_id.as_str()).or_default().push(i);
        }
        let mut next = 0usize;
        for idx in by_user.values_mut() {
            idx.shuffle(&mut rng);
            for &i in idx.iter() {
                assignment[i] = next % k_folds;
                next += 1;
            }
        }
    } else {
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.shuffle(&mut rng);
        let base = d.len() / k_folds;
        let extra = d.len() % k_folds;
        let mut pos = 0;
        for fold in 0..k_folds {
            let size = base + usize::from(fold < extra);
            for &i in &order[pos..pos + size] {
                assignment[i] = fold;
            }
            pos += size;
        }
    }
    let mut folds = Vec::with_capacity(k_folds);
    for fold in 0..k_folds {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (e, &a) in d.events().iter().zip(&assignment) {
            if a == fold {
                test.push(e.clone());
            } else {
                train.push(e.clone());
            }
        }
        folds.push(FoldSplit {
            fold_index: fold,
            train: d.with_events(train),
            test: d.with_events(test),
            seed,
        });
    }
    Ok(folds)
}

/// Songs each (user, condition) interacted with in a test fold.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelevanceSet {
    sets: BTreeMap<ListKey, BTreeSet<SongId>>,
}

impl RelevanceSet {
    pub fn from_test(test: &Dataset) -> Self {
        let mut sets: BTreeMap<ListKey, BTreeSet<SongId>> = BTreeMap::new();
        for e in test.events() {
            sets.entry((e.user_id.clone(), e.condition.clone()))
                .or_default()
                .insert(e.song_id.clone());
        }
        RelevanceSet { sets }
    }

    pub fn get(&self, user: &str, condition: &Condition) -> Option<&BTreeSet<SongId>> {
        self.sets.get(&(user.to_string(), condition.clone()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &ListKey> {
        self.sets.keys()
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::validation("k", "cutoff must be at least 1"))
    } else {
        Ok(())
    }
}

/// Relevant songs among the first `k`, divided by `k` even when the list
/// is shorter.
pub fn precision_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<SongId>, k: usize) -> Result<f64> {
    check_k(k)?;
    let hits = ranked
        .iter()
        .take(k)
        .filter(|s| relevant.contains(s.as_ref()))
        .count();
    Ok(hits as f64 / k as f64)
}

/// Sum of precision at each relevant position within the first `k`,
/// divided by `min(|relevant|, k)`. Zero when nothing is relevant.
pub fn average_precision_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<SongId>, k: usize) -> Result<f64> {
    check_k(k)?;
    if relevant.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, s) in ranked.iter().take(k).enumerate() {
        if relevant.contains(s.as_ref()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len().min(k) as f64)
}

/// Arithmetic mean of per-list average precisions.
pub fn map_at_k(average_precisions: &[f64]) -> Result<f64> {
    if average_precisions.is_empty() {
        return Err(Error::Empty("MAP@k needs at least one list".into()));
    }
    Ok(average_precisions.iter().sum::<f64>() / average_precisions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Initial,
    Global,
    Personalized,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Initial => "initial",
            Variant::Global => "global",
            Variant::Personalized => "personalized",
        }
    }

    /// Row label in the wide results table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Initial => "Initial",
            Variant::Global => "Re-ranked Global",
            Variant::Personalized => "Re-ranked Personal",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// λ as an exact ordering key (micro-units).
fn lambda_key(lambda: f64) -> i64 {
    (lambda * 1e6).round() as i64
}

pub fn format_lambda(lambda: f64) -> String {
    if lambda_key(lambda) % 100_000 == 0 {
        format!("{lambda:.1}")
    } else {
        format!("{lambda}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct RowKey {
    algorithm: String,
    list_size: usize,
    k: usize,
    variant: Variant,
    mode: Option<RerankMode>,
    lambda: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Accumulator {
    precision_sum: f64,
    ap_sum: f64,
    lists: usize,
    folds: BTreeSet<usize>,
}

/// One aggregated result line.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub algorithm: String,
    pub list_size: usize,
    pub k: usize,
    pub variant: Variant,
    /// `None` for the initial ranking.
    pub mode: Option<RerankMode>,
    pub lambda: Option<f64>,
    pub prec_at_k: f64,
    pub map_at_k: f64,
    pub lists: usize,
    pub folds: usize,
}

/// A family of re-ranked lists sharing variant, mode and λ.
pub struct RerankedFamily<'a> {
    pub variant: Variant,
    pub mode: RerankMode,
    pub lambda: f64,
    pub lists: &'a [RerankedList],
}

/// Prec@k and MAP@k pooled over every evaluated list across folds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvaluationReport {
    rows: BTreeMap<RowKey, Accumulator>,
}

impl EvaluationReport {
    fn record<S: AsRef<str>>(
        &mut self,
        key: RowKey,
        fold: usize,
        lists: impl Iterator<Item = (ListKey, Vec<S>)>,
        relevance: &RelevanceSet,
    ) -> Result<()> {
        let k = key.k;
        let acc = self.rows.entry(key).or_default();
        acc.folds.insert(fold);
        let empty = BTreeSet::new();
        for ((user, condition), songs) in lists {
            let relevant = relevance.get(&user, &condition).unwrap_or(&empty);
            acc.precision_sum += precision_at_k(&songs, relevant, k)?;
            acc.ap_sum += average_precision_at_k(&songs, relevant, k)?;
            acc.lists += 1;
        }
        Ok(())
    }

    /// Adds another report's pooled sums into this one.
    pub fn merge(&mut self, other: EvaluationReport) {
        for (key, acc) in other.rows {
            let mine = self.rows.entry(key).or_default();
            mine.precision_sum += acc.precision_sum;
            mine.ap_sum += acc.ap_sum;
            mine.lists += acc.lists;
            mine.folds.extend(acc.folds);
        }
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        self.rows
            .iter()
            .map(|(key, acc)| {
                let n = acc.lists.max(1) as f64;
                ReportRow {
                    algorithm: key.algorithm.clone(),
                    list_size: key.list_size,
                    k: key.k,
                    variant: key.variant,
                    mode: key.mode,
                    lambda: key.lambda.map(|l| l as f64 / 1e6),
                    prec_at_k: acc.precision_sum / n,
                    map_at_k: acc.ap_sum / n,
                    lists: acc.lists,
                    folds: acc.folds.len(),
                }
            })
            .collect()
    }

    /// The aggregated row for a variant, or `None` if it was never recorded.
    pub fn find(
        &self,
        algorithm: &str,
        list_size: usize,
        k: usize,
        variant: Variant,
        mode: Option<RerankMode>,
        lambda: Option<f64>,
    ) -> Option<ReportRow> {
        let key = RowKey {
            algorithm: algorithm.to_string(),
            list_size,
            k,
            variant,
            mode,
            lambda: lambda.map(lambda_key),
        };
        self.rows.get(&key).map(|acc| {
            let n = acc.lists.max(1) as f64;
            ReportRow {
                algorithm: key.algorithm.clone(),
                list_size,
                k,
                variant,
                mode,
                lambda,
                prec_at_k: acc.precision_sum / n,
                map_at_k: acc.ap_sum / n,
                lists: acc.lists,
                folds: acc.folds.len(),
            }
        })
    }

    /// (algorithm, list size, k) combinations present, in order.
    pub fn tables(&self) -> BTreeSet<(String, usize, usize)> {
        self.rows
            .keys()
            .map(|k| (k.algorithm.clone(), k.list_size, k.k))
            .collect()
    }

    /// λ values recorded for re-ranked rows of one table.
    fn lambdas(&self, algorithm: &str, list_size: usize, k: usize) -> Vec<f64> {
        let set: BTreeSet<i64> = self
            .rows
            .keys()
            .filter(|r| r.algorithm == algorithm && r.list_size == list_size && r.k == k)
            .filter_map(|r| r.lambda)
            .collect();
        set.into_iter().map(|l| l as f64 / 1e6).collect()
    }

    /// Long table for one (algorithm, list size, k):
    /// `variant, mode, lambda, prec_at_<k>, map_at_<k>, folds`. The initial
    /// ranking does not depend on λ and is repeated for every λ.
    pub fn write_table<W: Write>(&self, w: W, algorithm: &str, list_size: usize, k: usize) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "variant".to_string(),
            "mode".to_string(),
            "lambda".to_string(),
            format!("prec_at_{k}"),
            format!("map_at_{k}"),
            "folds".to_string(),
        ])?;
        let lambdas = self.lambdas(algorithm, list_size, k);
        if let Some(init) = self.find(algorithm, list_size, k, Variant::Initial, None, None) {
            for &l in &lambdas {
                wtr.write_record([
                    Variant::Initial.name().to_string(),
                    "none".to_string(),
                    format_lambda(l),
                    format!("{:.6}", init.prec_at_k),
                    format!("{:.6}", init.map_at_k),
                    init.folds.to_string(),
                ])?;
            }
        }
        for row in self.rows().into_iter().filter(|r| {
            r.algorithm == algorithm && r.list_size == list_size && r.k == k && r.variant != Variant::Initial
        }) {
            wtr.write_record([
                row.variant.name().to_string(),
                row.mode.map(|m| m.name()).unwrap_or("none").to_string(),
                row.lambda.map(format_lambda).unwrap_or_default(),
                format!("{:.6}", row.prec_at_k),
                format!("{:.6}", row.map_at_k),
                row.folds.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<report>", e))?;
        Ok(())
    }

    /// Wide table: one row per variant, a Prec@k/MAP@k column pair per λ.
    pub fn write_wide<W: Write>(
        &self,
        w: W,
        algorithm: &str,
        list_size: usize,
        k: usize,
        mode: RerankMode,
        lambdas: &[f64],
    ) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec![format!("list_size={list_size}")];
        for &l in lambdas {
            header.push(format!("lambda={} Prec@{k}", format_lambda(l)));
            header.push(format!("lambda={} MAP@{k}", format_lambda(l)));
        }
        wtr.write_record(&header)?;
        for variant in [Variant::Initial, Variant::Global, Variant::Personalized] {
            let mut row = vec![variant.label().to_string()];
            for &l in lambdas {
                let found = match variant {
                    Variant::Initial => self.find(algorithm, list_size, k, variant, None, None),
                    _ => self.find(algorithm, list_size, k, variant, Some(mode), Some(l)),
                };
                match found {
                    Some(r) => {
                        row.push(format!("{:.5}", r.prec_at_k));
                        row.push(format!("{:.5}", r.map_at_k));
                    }
                    None => {
                        row.push(String::new());
                        row.push(String::new());
                    }
                }
            }
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(|e| Error::io("<report>", e))?;
        Ok(())
    }

    /// Long-format plot data: one line per (series, λ, metric).
    pub fn write_plot_data<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["algorithm", "list_size", "k", "variant", "mode", "lambda", "metric", "value"])?;
        for (algorithm, list_size, k) in self.tables() {
            let lambdas = self.lambdas(&algorithm, list_size, k);
            let init = self.find(&algorithm, list_size, k, Variant::Initial, None, None);
            let mut series: Vec<(Variant, &str, f64, f64, f64)> = Vec::new();
            for mode in [RerankMode::Regular, RerankMode::Opposite] {
                for &l in &lambdas {
                    if let Some(i) = &init {
                        series.push((Variant::Initial, mode.name(), l, i.prec_at_k, i.map_at_k));
                    }
                    for variant in [Variant::Global, Variant::Personalized] {
                        if let Some(r) = self.find(&algorithm, list_size, k, variant, Some(mode), Some(l)) {
                            series.push((variant, mode.name(), l, r.prec_at_k, r.map_at_k));
                        }
                    }
                }
            }
            for (variant, mode, l, prec, map) in series {
                for (metric, value) in [(format!("prec_at_{k}"), prec), (format!("map_at_{k}"), map)] {
                    wtr.write_record([
                        algorithm.clone(),
                        list_size.to_string(),
                        k.to_string(),
                        variant.name().to_string(),
                        mode.to_string(),
                        format_lambda(l),
                        metric,
                        format!("{value:.6}"),
                    ])?;
                }
            }
        }
        wtr.flush().map_err(|e| Error::io("<plot data>", e))?;
        Ok(())
    }
}

fn row_key(algorithm: &str, list_size: usize, k: usize, variant: Variant, mode: Option<RerankMode>, lambda: Option<f64>) -> RowKey {
    RowKey {
        algorithm: algorithm.to_string(),
        list_size,
        k,
        variant,
        mode,
        lambda: lambda.map(lambda_key),
    }
}

impl EvaluationReport {
    /// Records the initial lists of one fold at each cutoff in `ks`.
    pub fn add_initial(
        &mut self,
        fold: usize,
        algorithm: &str,
        list_size: usize,
        initial: &[RecommendationList],
        relevance: &RelevanceSet,
        ks: &[usize],
    ) -> Result<()> {
        for &k in ks {
            check_k(k)?;
            self.record(
                row_key(algorithm, list_size, k, Variant::Initial, None, None),
                fold,
                initial.iter().map(|l| (l.key(), l.song_ids())),
                relevance,
            )?;
        }
        Ok(())
    }

    /// Records one re-ranked family; its keys must equal `initial_keys`.
    #[allow(clippy::too_many_arguments)]
    pub fn add_family(
        &mut self,
        fold: usize,
        algorithm: &str,
        list_size: usize,
        initial_keys: &BTreeSet<ListKey>,
        family: &RerankedFamily,
        relevance: &RelevanceSet,
        ks: &[usize],
    ) -> Result<()> {
        let keys: BTreeSet<ListKey> = family
            .lists
            .iter()
            .map(|l| (l.user_id.clone(), l.condition.clone()))
            .collect();
        if &keys != initial_keys {
            let fmt_keys = |ks: Vec<&ListKey>| {
                ks.iter()
                    .take(10)
                    .map(|(u, c)| format!("({u}, {c})"))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            return Err(Error::KeyMismatch(format!(
                "{} {} λ={}: missing [{}], unexpected [{}]",
                family.variant,
                family.mode,
                format_lambda(family.lambda),
                fmt_keys(initial_keys.difference(&keys).collect()),
                fmt_keys(keys.difference(initial_keys).collect()),
            )));
        }
        for &k in ks {
            check_k(k)?;
            self.record(
                row_key(algorithm, list_size, k, family.variant, Some(family.mode), Some(family.lambda)),
                fold,
                family
                    .lists
                    .iter()
                    .map(|l| ((l.user_id.clone(), l.condition.clone()), l.song_ids())),
                relevance,
            )?;
        }
        Ok(())
    }
}

/// Scores one fold: the initial lists and every re-ranked family, at each
/// cutoff in `ks`. Every family must cover exactly the initial lists' keys.
pub fn evaluate_run(
    fold: usize,
    algorithm: &str,
    list_size: usize,
    initial: &[RecommendationList],
    families: &[RerankedFamily],
    relevance: &RelevanceSet,
    ks: &[usize],
) -> Result<EvaluationReport> {
    let initial_keys: BTreeSet<ListKey> = initial.iter().map(|l| l.key()).collect();
    let mut report = EvaluationReport::default();
    for fam in families {
        report.add_family(fold, algorithm, list_size, &initial_keys, fam, relevance, ks)?;
    }
    report.add_initial(fold, algorithm, list_size, initial, relevance, ks)?;
    Ok(report)
}
