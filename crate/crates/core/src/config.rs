//! Declarative pipeline configuration (TOML).
//!
//! Relative paths are resolved against the directory of the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::analysis::TestKind;
use crate::context::{ContextDimension, HourBuckets, TIME_OF_DAY};
use crate::error::{Error, Result};
use crate::feature_space::{metric_by_name, AudioFeature, DistanceMetric, FeatureMask};
use crate::ingestion::FilterOptions;
use crate::recommenders::BprHyper;
use crate::rerank::{default_lambda_grid, ModelKind, RerankMode, ScoreScope};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub context: ContextConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub features: FeaturesConfig,
    #[serde(default)]
    pub recommenders: RecommendersConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    pub analysis: Option<AnalysisConfig>,
    pub rerank: Option<RerankSection>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub catalog: Option<PathBuf>,
    /// The catalog already holds unit-interval tempo and loudness.
    #[serde(default)]
    pub catalog_normalized: bool,
    pub events: Option<PathBuf>,
    pub playlists: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HourBucketConfig {
    pub start: u32,
    pub condition: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionConfig {
    pub name: String,
    pub conditions: Vec<String>,
    pub hours: Option<Vec<HourBucketConfig>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextConfig {
    /// Dimension whose conditions label listening events.
    #[serde(default = "default_events_dimension")]
    pub events_dimension: String,
    #[serde(default)]
    pub dimensions: Vec<DimensionConfig>,
}

fn default_events_dimension() -> String {
    TIME_OF_DAY.to_string()
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            events_dimension: default_events_dimension(),
            dimensions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default = "default_min_song_plays")]
    pub min_song_plays: usize,
    #[serde(default = "default_min_user_events")]
    pub min_user_events: usize,
    #[serde(default)]
    pub fixpoint: bool,
}

fn default_min_song_plays() -> usize {
    200
}

fn default_min_user_events() -> usize {
    3000
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_song_plays: default_min_song_plays(),
            min_user_events: default_min_user_events(),
            fixpoint: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesConfig {
    /// Features used in distances; all nine when absent.
    pub mask: Option<Vec<String>>,
    #[serde(default = "default_metric")]
    pub metric: String,
}

fn default_metric() -> String {
    "normalized-euclidean".into()
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        FeaturesConfig {
            mask: None,
            metric: default_metric(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalListConfig {
    /// Algorithm tag used in reports, e.g. `CAMF_ICS`.
    pub name: String,
    /// Exchange-format file; `{fold}` is replaced by the fold index.
    pub path: String,
}

pub const NATIVE_ALGORITHMS: [&str; 2] = ["BPR", "US-BPR"];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendersConfig {
    #[serde(default = "default_native")]
    pub native: Vec<String>,
    #[serde(default)]
    pub bpr: BprHyper,
    #[serde(default)]
    pub external: Vec<ExternalListConfig>,
}

fn default_native() -> Vec<String> {
    NATIVE_ALGORITHMS.iter().map(|s| s.to_string()).collect()
}

impl Default for RecommendersConfig {
    fn default() -> Self {
        RecommendersConfig {
            native: default_native(),
            bpr: BprHyper::default(),
            external: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub stratified: bool,
    #[serde(default = "default_list_sizes")]
    pub list_sizes: Vec<usize>,
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    #[serde(default = "default_lambda_grid")]
    pub lambdas: Vec<f64>,
    /// λ columns of the wide results tables.
    #[serde(default = "default_report_lambdas")]
    pub report_lambdas: Vec<f64>,
    #[serde(default = "default_modes")]
    pub modes: Vec<RerankMode>,
    #[serde(default)]
    pub score_scope: ScoreScope,
}

fn default_folds() -> usize {
    5
}

fn default_list_sizes() -> Vec<usize> {
    vec![200, 100, 50, 25]
}

fn default_k_values() -> Vec<usize> {
    vec![10]
}

fn default_report_lambdas() -> Vec<f64> {
    vec![0.2, 0.4, 0.6, 0.8, 1.0]
}

fn default_modes() -> Vec<RerankMode> {
    vec![RerankMode::Regular, RerankMode::Opposite]
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            folds: default_folds(),
            stratified: false,
            list_sizes: default_list_sizes(),
            k_values: default_k_values(),
            lambdas: default_lambda_grid(),
            report_lambdas: default_report_lambdas(),
            modes: default_modes(),
            score_scope: ScoreScope::List,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub test: TestKind,
}

fn default_alpha() -> f64 {
    0.05
}

/// Inputs for re-ranking existing lists with a saved model.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankSection {
    pub model: Option<PathBuf>,
    pub lists: Option<PathBuf>,
    #[serde(default = "default_rerank_lambda")]
    pub lambda: f64,
    #[serde(default = "default_rerank_mode")]
    pub mode: RerankMode,
    #[serde(default = "default_model_kind")]
    pub model_kind: ModelKind,
}

fn default_rerank_lambda() -> f64 {
    0.5
}

fn default_rerank_mode() -> RerankMode {
    RerankMode::Regular
}

fn default_model_kind() -> ModelKind {
    ModelKind::Personalized
}

/// Which inputs a command needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Analyze,
    Prepare,
    Evaluate,
    Rerank,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn require_file(&self, what: &str, p: Option<&PathBuf>) -> Result<PathBuf> {
        let p = p.ok_or_else(|| Error::Config(format!("{what} is not configured")))?;
        let resolved = self.resolve(p);
        if !resolved.is_file() {
            return Err(Error::Config(format!("{what} {} does not exist", resolved.display())));
        }
        Ok(resolved)
    }

    pub fn catalog_path(&self) -> Result<PathBuf> {
        self.require_file("data.catalog", self.data.catalog.as_ref())
    }

    pub fn events_path(&self) -> Result<PathBuf> {
        self.require_file("data.events", self.data.events.as_ref())
    }

    pub fn playlists_path(&self) -> Result<PathBuf> {
        self.require_file("data.playlists", self.data.playlists.as_ref())
    }

    pub fn external_path(&self, ext: &ExternalListConfig, fold: usize) -> PathBuf {
        self.resolve(Path::new(&ext.path.replace("{fold}", &fold.to_string())))
    }

    /// Configured dimensions; the built-in time-of-day dimension is added
    /// when none is declared under that name.
    pub fn dimensions(&self) -> Result<Vec<ContextDimension>> {
        let mut out = Vec::new();
        for d in &self.context.dimensions {
            let names: Vec<&str> = d.conditions.iter().map(String::as_str).collect();
            let mut dim = ContextDimension::new(&d.name, &names)?;
            if let Some(hours) = &d.hours {
                let buckets = HourBuckets::new(hours.iter().map(|h| (h.start, h.condition.clone())).collect())?;
                dim = dim.with_hours(buckets)?;
            } else if d.name == TIME_OF_DAY {
                dim = dim.with_hours(HourBuckets::default_time_of_day())?;
            }
            out.push(dim);
        }
        let mut seen = BTreeSet::new();
        for d in &out {
            if !seen.insert(d.name().to_string()) {
                return Err(Error::Config(format!("dimension {:?} declared twice", d.name())));
            }
        }
        if !seen.contains(TIME_OF_DAY) {
            out.insert(0, ContextDimension::time_of_day());
        }
        Ok(out)
    }

    pub fn events_dimension(&self) -> Result<ContextDimension> {
        self.dimensions()?
            .into_iter()
            .find(|d| d.name() == self.context.events_dimension)
            .ok_or_else(|| {
                Error::Config(format!(
                    "events dimension {:?} is not declared",
                    self.context.events_dimension
                ))
            })
    }

    pub fn filter_options(&self) -> FilterOptions {
        FilterOptions {
            min_song_plays: self.filter.min_song_plays,
            min_user_events: self.filter.min_user_events,
            fixpoint: self.filter.fixpoint,
        }
    }

    pub fn feature_mask(&self) -> Result<FeatureMask> {
        match &self.features.mask {
            None => Ok(FeatureMask::all()),
            Some(names) => {
                let features: Vec<AudioFeature> = names.iter().map(|n| n.parse()).collect::<Result<_>>()?;
                FeatureMask::from_features(&features)
            }
        }
    }

    pub fn metric(&self) -> Result<Box<dyn DistanceMetric>> {
        metric_by_name(&self.features.metric, self.feature_mask()?)
    }

    pub fn max_list_size(&self) -> usize {
        self.evaluation.list_sizes.iter().copied().max().unwrap_or(0)
    }

    /// Checks everything the given stage relies on, up front.
    pub fn validate(&self, stage: Stage) -> Result<()> {
        let dims = self.dimensions()?;
        self.feature_mask()?;
        self.metric()?;
        if let Some(j) = self.jobs {
            if j == 0 {
                return Err(Error::Config("jobs must be at least 1".into()));
            }
        }
        match stage {
            Stage::Analyze => {
                let analysis = self
                    .analysis
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing [analysis] section".into()))?;
                if !(analysis.alpha > 0.0 && analysis.alpha < 1.0) {
                    return Err(Error::Config(format!("analysis.alpha {} is outside (0, 1)", analysis.alpha)));
                }
                if dims.len() < 2 && self.context.dimensions.is_empty() {
                    log::info!("only the built-in time_of_day dimension is declared");
                }
                self.catalog_path()?;
                self.playlists_path()?;
            }
            Stage::Prepare | Stage::Evaluate => {
                self.catalog_path()?;
                self.events_path()?;
                self.events_dimension()?;
                let ev = &self.evaluation;
                if ev.folds < 2 {
                    return Err(Error::Config("evaluation.folds must be at least 2".into()));
                }
                if stage == Stage::Evaluate {
                    self.validate_evaluation()?;
                }
            }
            Stage::Rerank => {
                self.catalog_path()?;
                let r = self
                    .rerank
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing [rerank] section".into()))?;
                if !(0.0..=1.0).contains(&r.lambda) {
                    return Err(Error::Config(format!("rerank.lambda {} is outside [0, 1]", r.lambda)));
                }
            }
        }
        Ok(())
    }

    fn validate_evaluation(&self) -> Result<()> {
        let ev = &self.evaluation;
        if ev.list_sizes.is_empty() || ev.list_sizes.contains(&0) {
            return Err(Error::Config("evaluation.list_sizes must be non-empty and positive".into()));
        }
        if ev.k_values.is_empty() || ev.k_values.contains(&0) {
            return Err(Error::Config("evaluation.k_values must be non-empty and positive".into()));
        }
        let max_k = *ev.k_values.iter().max().unwrap();
        if let Some(n) = ev.list_sizes.iter().find(|&&n| n < max_k) {
            return Err(Error::Config(format!("list size {n} is smaller than the largest k ({max_k})")));
        }
        for (what, grid) in [("lambdas", &ev.lambdas), ("report_lambdas", &ev.report_lambdas)] {
            if grid.is_empty() {
                return Err(Error::Config(format!("evaluation.{what} is empty")));
            }
            if let Some(l) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
                return Err(Error::Config(format!("evaluation.{what} contains {l}, outside [0, 1]")));
            }
        }
        if ev.modes.is_empty() {
            return Err(Error::Config("evaluation.modes is empty".into()));
        }
        let rec = &self.recommenders;
        if rec.native.is_empty() && rec.external.is_empty() {
            return Err(Error::Config("no recommenders configured".into()));
        }
        for name in &rec.native {
            if !NATIVE_ALGORITHMS.contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "unknown native recommender {name:?} (expected one of {NATIVE_ALGORITHMS:?})"
                )));
            }
        }
        rec.bpr.validate().map_err(|e| Error::Config(e.to_string()))?;
        let mut names: BTreeSet<&str> = rec.native.iter().map(String::as_str).collect();
        for ext in &rec.external {
            if !names.insert(&ext.name) {
                return Err(Error::Config(format!("recommender name {:?} used twice", ext.name)));
            }
            for fold in 0..ev.folds {
                let p = self.external_path(ext, fold);
                if !p.is_file() {
                    return Err(Error::Config(format!(
                        "external lists for {:?} fold {fold}: {} does not exist",
                        ext.name,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}
