//! End-to-end stages: ingest, filter, split, recommend, re-rank, evaluate,
//! and the playlist analysis.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::analysis::{compare_all, AnalysisTable};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::evaluation::{make_folds, EvaluationReport, FoldSplit, ListKey, RelevanceSet, RerankedFamily, Variant};
use crate::feature_space::DistanceMetric;
use crate::ingestion::{
    filter_dataset, load_events, load_feature_catalog, load_playlist_corpus, Catalog, CatalogOptions, Dataset,
};
use crate::preference::{write_models, GlobalModel, PersonalizedModel, PreferenceLookup};
use crate::recommenders::{
    load_external_lists, write_lists, BprModel, BprRecommender, RecommendationList, Recommender, UserSplitBpr,
};
use crate::rerank::{ModelKind, Reranker};

pub const INCOMPLETE_MARKER: &str = "_INCOMPLETE";

/// Creates `dir` and marks it incomplete until [`finish_output`] runs.
pub fn begin_output(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let marker = dir.join(INCOMPLETE_MARKER);
    fs::write(&marker, "run did not finish\n").map_err(|e| Error::io(&marker, e))
}

pub fn finish_output(dir: &Path) -> Result<()> {
    let marker = dir.join(INCOMPLETE_MARKER);
    match fs::remove_file(&marker) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(&marker, e)),
        _ => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Algorithm names made safe for file names.
pub fn file_tag(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Loads the catalog and events, then applies the configured filters.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let catalog = load_feature_catalog(
        cfg.catalog_path()?,
        CatalogOptions {
            normalized: cfg.data.catalog_normalized,
        },
    )?;
    log::info!("catalog: {} songs", catalog.len());
    let raw = load_events(cfg.events_path()?, Arc::new(catalog), &cfg.events_dimension()?)?;
    log::info!(
        "events: {} kept of {} rows ({} with unknown songs)",
        raw.len(),
        raw.provenance.source_rows,
        raw.provenance.dropped_unknown_song
    );
    let filtered = filter_dataset(&raw, cfg.filter_options());
    log::info!("after filtering: {} events, {} users, {} songs", filtered.len(), filtered.users().len(), filtered.songs().len());
    if filtered.is_empty() {
        return Err(Error::Empty("no events survive filtering".into()));
    }
    Ok(filtered)
}

pub struct PreparedData {
    pub dataset: Dataset,
    pub folds: Vec<FoldSplit>,
}

pub fn prepare(cfg: &PipelineConfig) -> Result<PreparedData> {
    let dataset = load_dataset(cfg)?;
    let folds = make_folds(&dataset, cfg.evaluation.folds, cfg.seed, cfg.evaluation.stratified)?;
    Ok(PreparedData { dataset, folds })
}

/// Human-readable record of the data preparation.
pub fn provenance_report(cfg: &PipelineConfig, data: &PreparedData) -> String {
    let p = &data.dataset.provenance;
    let mut s = String::new();
    let _ = writeln!(s, "source: {}", p.source);
    let _ = writeln!(s, "source_rows: {}", p.source_rows);
    let _ = writeln!(s, "dropped_unknown_song: {}", p.dropped_unknown_song);
    for (i, f) in p.filters.iter().enumerate() {
        let _ = writeln!(
            s,
            "filter {i}: min_song_plays={} min_user_events={} fixpoint={} passes={} events {} -> {} songs_removed={} users_removed={}",
            f.min_song_plays,
            f.min_user_events,
            f.fixpoint,
            f.passes,
            f.events_before,
            f.events_after,
            f.songs_removed.len(),
            f.users_removed.len()
        );
    }
    let _ = writeln!(
        s,
        "dataset: events={} users={} songs={}",
        data.dataset.len(),
        data.dataset.users().len(),
        data.dataset.songs().len()
    );
    let _ = writeln!(s, "seed: {} folds: {} stratified: {}", cfg.seed, data.folds.len(), cfg.evaluation.stratified);
    for f in &data.folds {
        let _ = writeln!(s, "fold {}: train={} test={}", f.fold_index, f.train.len(), f.test.len());
    }
    s
}

pub fn write_events<W: Write>(w: W, d: &Dataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["user_id", "song_id", "timestamp_local_iso8601", "condition"])?;
    for e in d.events() {
        wtr.write_record([
            e.user_id.as_str(),
            e.song_id.as_str(),
            &e.timestamp.format("%Y-%m-%dT%H:%M:%S").to_string(),
            e.condition.name(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<events>", e))
}

/// Writes the filtered events, each fold's split and a provenance summary.
pub fn write_prepared(cfg: &PipelineConfig, data: &PreparedData, out: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let p = out.join("events_filtered.csv");
    write_file(&p, |w| write_events(w, &data.dataset))?;
    files.push(p);
    for f in &data.folds {
        for (part, d) in [("train", &f.train), ("test", &f.test)] {
            let p = out.join("folds").join(format!("fold{}_{part}.csv", f.fold_index));
            write_file(&p, |w| write_events(w, d))?;
            files.push(p);
        }
    }
    let p = out.join("provenance.txt");
    write_file(&p, |w| w.write_all(provenance_report(cfg, data).as_bytes()).map_err(|e| Error::io(out, e)))?;
    files.push(p);
    Ok(files)
}

/// Preference models fitted on one training fold.
pub struct FoldModels {
    pub global: Arc<GlobalModel>,
    pub personal: PersonalizedModel,
}

impl FoldModels {
    pub fn build(train: &Dataset) -> Result<Self> {
        let global = Arc::new(GlobalModel::build(train)?);
        let personal = PersonalizedModel::build(train, global.clone())?;
        Ok(FoldModels { global, personal })
    }

    pub fn lookup(&self, kind: ModelKind) -> &dyn PreferenceLookup {
        match kind {
            ModelKind::Global => self.global.as_ref(),
            ModelKind::Personalized => &self.personal,
        }
    }
}

/// The (user, condition) keys to recommend for: every test key whose
/// condition the training fold can model.
pub fn target_keys(relevance: &RelevanceSet, models: &FoldModels) -> Vec<ListKey> {
    let (keep, skip): (Vec<ListKey>, Vec<ListKey>) = relevance
        .keys()
        .cloned()
        .partition(|(_, c)| models.global.support(c) > 0);
    if !skip.is_empty() {
        log::warn!("{} test keys have conditions absent from the training fold and are skipped", skip.len());
    }
    keep
}

/// Trains the configured native recommenders on one fold.
pub fn train_native(cfg: &PipelineConfig, fold: &FoldSplit) -> Result<Vec<Box<dyn Recommender>>> {
    let seed = cfg.seed.wrapping_add(fold.fold_index as u64);
    let hyper = &cfg.recommenders.bpr;
    let mut out: Vec<Box<dyn Recommender>> = Vec::new();
    for name in &cfg.recommenders.native {
        log::info!("fold {}: training {name}", fold.fold_index);
        match name.as_str() {
            "BPR" => out.push(Box::new(BprRecommender::new(BprModel::train(&fold.train, hyper, seed)?))),
            "US-BPR" => out.push(Box::new(UserSplitBpr::train(&fold.train, hyper, seed)?)),
            other => return Err(Error::Config(format!("unknown native recommender {other:?}"))),
        }
    }
    Ok(out)
}

/// One list per key, excluding songs the user played in training.
pub fn generate_lists(
    rec: &dyn Recommender,
    train: &Dataset,
    keys: &[ListKey],
    n: usize,
) -> Result<Vec<RecommendationList>> {
    let seen = train.user_items();
    let none = BTreeSet::new();
    keys.par_iter()
        .map(|(user, condition)| rec.recommend(user, condition, n, seen.get(user.as_str()).unwrap_or(&none)))
        .collect()
}

/// Lists of every configured recommender for one fold, restricted to `keys`.
pub fn fold_lists(
    cfg: &PipelineConfig,
    fold: &FoldSplit,
    keys: &[ListKey],
    saved_native: Option<&Path>,
) -> Result<Vec<(String, Vec<RecommendationList>)>> {
    let n = cfg.max_list_size();
    let mut out = Vec::new();
    match saved_native {
        None => {
            for rec in train_native(cfg, fold)? {
                let lists = generate_lists(rec.as_ref(), &fold.train, keys, n)?;
                out.push((rec.name().to_string(), lists));
            }
        }
        Some(dir) => {
            for name in &cfg.recommenders.native {
                let p = saved_lists_path(dir, name, fold.fold_index);
                out.push((name.clone(), read_restricted(&p, fold, keys, name)?));
            }
        }
    }
    for ext in &cfg.recommenders.external {
        let p = cfg.external_path(ext, fold.fold_index);
        out.push((ext.name.clone(), read_restricted(&p, fold, keys, &ext.name)?));
    }
    Ok(out)
}

pub fn saved_lists_path(dir: &Path, algorithm: &str, fold: usize) -> PathBuf {
    dir.join(format!("{}_fold{fold}.csv", file_tag(algorithm)))
}

fn read_restricted(path: &Path, fold: &FoldSplit, keys: &[ListKey], name: &str) -> Result<Vec<RecommendationList>> {
    let ext = load_external_lists(path, fold.train.catalog(), name)?;
    if ext.resorted > 0 || ext.dropped > 0 {
        log::warn!("{}: {} lists re-sorted, {} entries dropped", path.display(), ext.resorted, ext.dropped);
    }
    let wanted: BTreeSet<&ListKey> = keys.iter().collect();
    let lists: Vec<RecommendationList> = ext.lists.into_iter().filter(|l| wanted.contains(&l.key())).collect();
    if lists.len() < keys.len() {
        log::warn!(
            "{}: {} of {} test keys have no list",
            path.display(),
            keys.len() - lists.len(),
            keys.len()
        );
    }
    Ok(lists)
}

/// Scores initial and re-ranked lists for one fold and algorithm.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_lists(
    cfg: &PipelineConfig,
    fold: usize,
    algorithm: &str,
    lists: &[RecommendationList],
    catalog: &Catalog,
    models: &FoldModels,
    metric: &dyn DistanceMetric,
    relevance: &RelevanceSet,
) -> Result<EvaluationReport> {
    let ev = &cfg.evaluation;
    let mut report = EvaluationReport::default();
    for &size in &ev.list_sizes {
        let initial: Vec<RecommendationList> = lists.iter().map(|l| l.truncated(size)).collect();
        report.add_initial(fold, algorithm, size, &initial, relevance, &ev.k_values)?;
        let keys: BTreeSet<ListKey> = initial.iter().map(|l| l.key()).collect();
        for (variant, kind) in [(Variant::Global, ModelKind::Global), (Variant::Personalized, ModelKind::Personalized)] {
            let reranker = Reranker::new(catalog, models.lookup(kind), metric);
            for &mode in &ev.modes {
                reranker.sweep_each(&initial, &ev.lambdas, mode, ev.score_scope, |lambda, reranked| {
                    let family = RerankedFamily {
                        variant,
                        mode,
                        lambda,
                        lists: &reranked,
                    };
                    report.add_family(fold, algorithm, size, &keys, &family, relevance, &ev.k_values)
                })?;
            }
        }
    }
    Ok(report)
}

/// Evaluates every fold. With `saved_native`, native lists are read from
/// that directory instead of being trained.
pub fn evaluate_folds(cfg: &PipelineConfig, data: &PreparedData, saved_native: Option<&Path>) -> Result<EvaluationReport> {
    let metric = cfg.metric()?;
    let mut report = EvaluationReport::default();
    for fold in &data.folds {
        let models = FoldModels::build(&fold.train)?;
        let relevance = RelevanceSet::from_test(&fold.test);
        let keys = target_keys(&relevance, &models);
        for (algorithm, lists) in fold_lists(cfg, fold, &keys, saved_native)? {
            log::info!("fold {}: evaluating {algorithm} on {} lists", fold.fold_index, lists.len());
            let r = evaluate_lists(
                cfg,
                fold.fold_index,
                &algorithm,
                &lists,
                fold.train.catalog(),
                &models,
                metric.as_ref(),
                &relevance,
            )?;
            report.merge(r);
        }
    }
    Ok(report)
}

/// Trains native recommenders and writes their lists and each fold's
/// preference models under `out`.
pub fn train_and_save(cfg: &PipelineConfig, data: &PreparedData, out: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let n = cfg.max_list_size();
    for fold in &data.folds {
        let models = FoldModels::build(&fold.train)?;
        let p = out.join("models").join(format!("fold{}.csv", fold.fold_index));
        write_file(&p, |w| write_models(w, &models.global, Some(&models.personal)))?;
        files.push(p);
        let keys = target_keys(&RelevanceSet::from_test(&fold.test), &models);
        for rec in train_native(cfg, fold)? {
            let lists = generate_lists(rec.as_ref(), &fold.train, &keys, n)?;
            let p = saved_lists_path(&out.join("lists"), rec.name(), fold.fold_index);
            write_file(&p, |w| write_lists(w, &lists))?;
            files.push(p);
        }
    }
    Ok(files)
}

/// Writes the long tables, the wide per-mode tables and the plot data.
pub fn write_reports(cfg: &PipelineConfig, report: &EvaluationReport, out: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let dir = out.join("results");
    for (algorithm, size, k) in report.tables() {
        let stem = format!("{}_top{size}_at{k}", file_tag(&algorithm));
        let p = dir.join(format!("{stem}.csv"));
        write_file(&p, |w| report.write_table(w, &algorithm, size, k))?;
        files.push(p);
        for &mode in &cfg.evaluation.modes {
            let p = dir.join(format!("{stem}_{mode}_wide.csv"));
            write_file(&p, |w| report.write_wide(w, &algorithm, size, k, mode, &cfg.evaluation.report_lambdas))?;
            files.push(p);
        }
    }
    let p = out.join("plot_data.csv");
    write_file(&p, |w| report.write_plot_data(w))?;
    files.push(p);
    Ok(files)
}

/// Prepare, train, re-rank and evaluate in one go.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<EvaluationReport> {
    let data = prepare(cfg)?;
    let p = out.join("provenance.txt");
    write_file(&p, |w| w.write_all(provenance_report(cfg, &data).as_bytes()).map_err(|e| Error::io(out, e)))?;
    let report = evaluate_folds(cfg, &data, None)?;
    write_reports(cfg, &report, out)?;
    Ok(report)
}

/// Playlist feature profiles and pairwise condition tests.
pub fn run_analysis(cfg: &PipelineConfig) -> Result<AnalysisTable> {
    let analysis = cfg
        .analysis
        .as_ref()
        .ok_or_else(|| Error::Config("missing [analysis] section".into()))?;
    let catalog = load_feature_catalog(
        cfg.catalog_path()?,
        CatalogOptions {
            normalized: cfg.data.catalog_normalized,
        },
    )?;
    let corpora = load_playlist_corpus(cfg.playlists_path()?, &catalog, &cfg.dimensions()?)?;
    for c in &corpora {
        if !c.meets_protocol() {
            log::warn!(
                "{}/{}: {} songs from {} playlists is below the collection protocol",
                c.dimension,
                c.condition,
                c.songs.len(),
                c.playlists.len()
            );
        }
        if c.unresolved > 0 {
            log::warn!("{}/{}: {} songs not in the catalog", c.dimension, c.condition, c.unresolved);
        }
    }
    compare_all(&corpora, analysis.alpha, analysis.test)
}

pub fn write_analysis(table: &AnalysisTable, out: &Path) -> Result<Vec<PathBuf>> {
    let tests = out.join("analysis_tests.csv");
    write_file(&tests, |w| table.write_tests(w))?;
    let profiles = out.join("analysis_profiles.csv");
    write_file(&profiles, |w| table.write_profiles(w))?;
    Ok(vec![tests, profiles])
}
