use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctx_rerank::config::{PipelineConfig, Stage};
use ctx_rerank::error::{Error, Result};
use ctx_rerank::ingestion::{load_feature_catalog, CatalogOptions};
use ctx_rerank::pipeline;
use ctx_rerank::preference::{load_models, PreferenceLookup};
use ctx_rerank::recommenders::load_external_lists;
use ctx_rerank::rerank::{write_reranked, ModelKind, RerankConfig, RerankMode, Reranker};

#[derive(Parser)]
#[command(name = "ctx-rerank", version, about = "Context-aware re-ranking of music recommendations")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Pipeline configuration (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, short, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Feature profiles and t-tests over context playlists.
    Analyze,
    /// Load, filter and split listening events.
    Prepare,
    /// Fit preference models and native recommenders per fold; save lists.
    Train,
    /// Re-rank one list file with a saved preference model.
    Rerank(RerankArgs),
    /// Re-rank and score lists saved by `train` plus external lists.
    Evaluate,
    /// prepare, train and evaluate in one run.
    Pipeline,
}

#[derive(Args)]
struct RerankArgs {
    /// Model dump written by `train`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Lists in the exchange format.
    #[arg(long)]
    lists: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mode: Option<RerankMode>,
    /// global or personalized
    #[arg(long)]
    model_kind: Option<String>,
}

fn load_config(g: &GlobalArgs) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::from_toml("", std::env::current_dir().unwrap_or_default())?,
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(j) = g.jobs {
        cfg.jobs = Some(j);
    }
    Ok(cfg)
}

fn output_dir(g: &GlobalArgs, cfg: &PipelineConfig) -> PathBuf {
    match (&g.output, &cfg.output_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => cfg.resolve(p),
        (None, None) => PathBuf::from("out"),
    }
}

fn list_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    if let Command::Rerank(args) = &cli.command {
        apply_rerank_args(&mut cfg, args)?;
    }
    let stage = match cli.command {
        Command::Analyze => Stage::Analyze,
        Command::Prepare | Command::Train => Stage::Prepare,
        Command::Rerank(_) => Stage::Rerank,
        Command::Evaluate | Command::Pipeline => Stage::Evaluate,
    };
    cfg.validate(stage)?;
    if let Some(j) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let out = output_dir(&cli.global, &cfg);
    pipeline::begin_output(&out)?;
    match cli.command {
        Command::Analyze => {
            let table = pipeline::run_analysis(&cfg)?;
            let sig = table.results.iter().filter(|r| r.significant).count();
            println!(
                "{} tests, Bonferroni threshold {:.6}, {sig} significant, {} pairs skipped",
                table.tests,
                table.threshold,
                table.skipped.len()
            );
            list_files(&pipeline::write_analysis(&table, &out)?);
        }
        Command::Prepare => {
            let data = pipeline::prepare(&cfg)?;
            list_files(&pipeline::write_prepared(&cfg, &data, &out)?);
        }
        Command::Train => {
            let data = pipeline::prepare(&cfg)?;
            list_files(&pipeline::train_and_save(&cfg, &data, &out)?);
        }
        Command::Rerank(_) => rerank(&cfg, &out)?,
        Command::Evaluate => {
            let data = pipeline::prepare(&cfg)?;
            let lists_dir = out.join("lists");
            let saved = (!cfg.recommenders.native.is_empty()).then_some(lists_dir.as_path());
            let report = pipeline::evaluate_folds(&cfg, &data, saved)?;
            list_files(&pipeline::write_reports(&cfg, &report, &out)?);
        }
        Command::Pipeline => {
            pipeline::run_pipeline(&cfg, &out)?;
            println!("results in {}", out.display());
        }
    }
    pipeline::finish_output(&out)
}

fn apply_rerank_args(cfg: &mut PipelineConfig, args: &RerankArgs) -> Result<()> {
    let cwd = std::env::current_dir().unwrap_or_default();
    let mut section = cfg.rerank.clone().unwrap_or(ctx_rerank::config::RerankSection {
        model: None,
        lists: None,
        lambda: 0.5,
        mode: RerankMode::Regular,
        model_kind: ModelKind::Personalized,
    });
    if let Some(p) = &args.model {
        section.model = Some(cwd.join(p));
    }
    if let Some(p) = &args.lists {
        section.lists = Some(cwd.join(p));
    }
    if let Some(l) = args.lambda {
        section.lambda = l;
    }
    if let Some(m) = args.mode {
        section.mode = m;
    }
    if let Some(k) = &args.model_kind {
        section.model_kind = match k.as_str() {
            "global" => ModelKind::Global,
            "personalized" => ModelKind::Personalized,
            other => return Err(Error::Config(format!("unknown model kind {other:?}"))),
        };
    }
    cfg.rerank = Some(section);
    Ok(())
}

fn rerank(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let r = cfg.rerank.as_ref().ok_or_else(|| Error::Config("missing [rerank] section".into()))?;
    let need = |p: &Option<PathBuf>, what: &str| {
        p.as_ref()
            .map(|p| cfg.resolve(p))
            .ok_or_else(|| Error::Config(format!("rerank needs --{what}")))
    };
    let model_path = need(&r.model, "model")?;
    let lists_path = need(&r.lists, "lists")?;
    let catalog = load_feature_catalog(
        cfg.catalog_path()?,
        CatalogOptions {
            normalized: cfg.data.catalog_normalized,
        },
    )?;
    let (global, personal) = load_models(&model_path)?;
    let lookup: &dyn PreferenceLookup = match (r.model_kind, &personal) {
        (ModelKind::Personalized, Some(p)) => p,
        (ModelKind::Personalized, None) => {
            return Err(Error::Config(format!("{} has no personalized rows", model_path.display())))
        }
        (ModelKind::Global, _) => global.as_ref(),
    };
    let lists = load_external_lists(&lists_path, &catalog, "input")?;
    let metric = cfg.metric()?;
    let reranker = Reranker::new(&catalog, lookup, metric.as_ref());
    let rc = RerankConfig::new(r.lambda, r.mode)?;
    let reranked = lists
        .lists
        .iter()
        .map(|l| reranker.rerank(l, rc))
        .collect::<Result<Vec<_>>>()?;
    let p = out.join("reranked.csv");
    let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
    write_reranked(BufWriter::new(f), &reranked)?;
    println!("wrote {} ({} lists)", p.display(), reranked.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
