//! Command-line front end: config loading, dispatch and artifact writing.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use grattr::attribution::{attribute, Method};
use grattr::benchmark::{run_trials, CombinationSummary, TaskSpec, TrialPlan};
use grattr::dataset::{load_dataset, write_dataset, Dataset};
use grattr::graph::make_batch;
use grattr::metrics::cosine_matrix;
use grattr::model::{Model, ModelConfig};
use grattr::optim::{train, TrainConfig};
use grattr::regularizers::{RegularizerConfig, RegularizerMode};
use grattr::report::{boxplot_csv, heatmap_svg, render_svg, results_csv, summary_json};

#[derive(Debug, Parser)]
#[command(name = "grattr", version, about = "Regularized GCN training and attribution benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config file. Every section is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate,
    /// Train one model and write its checkpoint and history.
    Train,
    /// Compute attribution maps and render SVGs.
    Attribute,
    /// Run a full trial plan.
    Benchmark,
    /// Render similarity heatmaps and box-plot tables.
    Report,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] grattr::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributeSection {
    /// Empty means every method.
    pub methods: Vec<Method>,
    pub task: usize,
    /// Graph indices that get an SVG.
    pub render: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Graph whose node-embedding cosine matrix is drawn.
    pub graph: usize,
    /// A `summary.json` from a previous benchmark run.
    pub summary: Option<PathBuf>,
}

/// The single JSON config document. Relative paths resolve against the
/// directory holding the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub generate: TaskSpec,
    /// Existing dataset JSONL. When absent, `generate` is used.
    pub dataset: Option<PathBuf>,
    /// Existing checkpoint for `attribute`. When absent, a model is trained.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub regularizers: RegularizerConfig,
    pub plan: TrialPlan,
    pub attribute: AttributeSection,
    pub report: ReportSection,
}

impl Config {
    pub fn load(path: &Path) -> CliResult<Config> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Config = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.checkpoint, &mut cfg.report.summary]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.generate.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.plan.model.seed = seed;
        self.plan.train.seed = seed;
        for t in &mut self.plan.tasks {
            t.seed = seed;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let check = |r: grattr::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        // Fields left at 0 are filled from the dataset later.
        for model in [&self.model, &self.plan.model] {
            check(
                ModelConfig {
                    num_tasks: model.num_tasks.max(1),
                    alphabet_size: model.alphabet_size.max(1),
                    ..model.clone()
                }
                .validate(),
            )?;
        }
        check(self.train.validate())?;
        check(self.regularizers.validate())?;
        check(self.plan.validate())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: Command,
    version: &'a str,
    config: &'a Config,
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| grattr::Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn mkdir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| {
        CliError::Runtime(grattr::Error::Io {
            path: path.to_owned(),
            source: e,
        })
    })
}

fn json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(grattr::Error::from)?;
    s.push('\n');
    Ok(s)
}

fn dataset(cfg: &Config) -> CliResult<Dataset> {
    Ok(match &cfg.dataset {
        Some(p) => load_dataset(p)?,
        None => cfg.generate.generate()?,
    })
}

fn train_model(cfg: &Config, ds: &Dataset, reg: &RegularizerConfig) -> CliResult<(Model, String)> {
    let config = cfg.model.resolved_for(ds);
    let (params, history) = train(ds, &config, &cfg.train, reg)?;
    Ok((Model { config, params }, history.to_csv()))
}

/// Loads the config, runs `cli.command` and writes its artifacts.
pub fn run(cli: &Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    cfg.validate()?;
    let out = &cli.out;
    mkdir(out)?;
    write(
        &out.join("manifest.json"),
        &json(&Manifest {
            command: cli.command,
            version: env!("CARGO_PKG_VERSION"),
            config: &cfg,
        })?,
    )?;

    match cli.command {
        Command::Generate => {
            let ds = cfg.generate.generate()?;
            let path = out.join("dataset.jsonl");
            write_dataset(&ds, &path)?;
            log::info!("wrote {}", path.display());
        }
        Command::Train => {
            let ds = dataset(&cfg)?;
            let (model, history) = train_model(&cfg, &ds, &cfg.regularizers)?;
            model.save(out.join("checkpoint.json"))?;
            write(&out.join("history.csv"), &history)?;
        }
        Command::Attribute => {
            let ds = dataset(&cfg)?;
            let model = match &cfg.checkpoint {
                Some(p) => Model::load(p)?,
                None => train_model(&cfg, &ds, &cfg.regularizers)?.0,
            };
            let methods = if cfg.attribute.methods.is_empty() {
                Method::ALL.to_vec()
            } else {
                cfg.attribute.methods.clone()
            };
            if let Some(&bad) = cfg.attribute.render.iter().find(|&&i| i >= ds.len()) {
                return Err(CliError::Config(format!(
                    "attribute.render: graph {bad} out of range for {} graphs",
                    ds.len()
                )));
            }
            let svg_dir = out.join("svg");
            mkdir(&svg_dir)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let mut lines = String::new();
            for (i, g) in ds.graphs.iter().enumerate() {
                for &method in &methods {
                    let mut map = attribute(&model, g, method, cfg.attribute.task, &mut rng)?;
                    map.graph = i;
                    lines.push_str(&map.to_json_line()?);
                    lines.push('\n');
                    if cfg.attribute.render.contains(&i) {
                        write(&svg_dir.join(format!("graph{i}_{method}.svg")), &render_svg(g, &map)?)?;
                    }
                }
            }
            write(&out.join("attributions.jsonl"), &lines)?;
        }
        Command::Benchmark => {
            let report = run_trials(&cfg.plan)?;
            write(&out.join("results.csv"), &results_csv(&report.results)?)?;
            write(&out.join("summary.json"), &summary_json(&report.summary)?)?;
            write(&out.join("boxplots.csv"), &boxplot_csv(&report.summary))?;
            if report.failed_count() > 0 {
                log::warn!("{} trials failed", report.failed_count());
            }
        }
        Command::Report => {
            let ds = dataset(&cfg)?;
            let Some(graph) = ds.graphs.get(cfg.report.graph) else {
                return Err(CliError::Config(format!(
                    "report.graph: graph {} out of range for {} graphs",
                    cfg.report.graph,
                    ds.len()
                )));
            };
            for mode in RegularizerMode::ALL {
                let reg = RegularizerConfig {
                    mode,
                    ..cfg.regularizers.clone()
                };
                let (model, _) = train_model(&cfg, &ds, &reg)?;
                let batch = make_batch(&[graph], model.config.features())?;
                let eval = model.evaluate(&batch)?;
                let emb = cosine_matrix(eval.final_embeddings());
                write(
                    &out.join(format!("embedding_cosine_{mode}.svg")),
                    &heatmap_svg(&emb, &format!("node embedding cosine, {mode}")),
                )?;
                let rows = cosine_matrix(&model.params.output_weights);
                write(
                    &out.join(format!("weight_cosine_{mode}.svg")),
                    &heatmap_svg(&rows, &format!("output weight row cosine, {mode}")),
                )?;
            }
            if let Some(p) = &cfg.report.summary {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("report.summary: {}: {e}", p.display())))?;
                let summary: Vec<CombinationSummary> = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("report.summary: {}: {e}", p.display())))?;
                write(&out.join("boxplots.csv"), &boxplot_csv(&summary))?;
            }
        }
    }
    Ok(())
}
