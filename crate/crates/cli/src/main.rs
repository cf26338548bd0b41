mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tabsynth::eval::{write_histogram_csv_file, DcrOptions};
use tabsynth::lm::TrainSchedule;
use tabsynth::partition::PartitionPlan;
use tabsynth::pipeline::{self, BackendSpec, EvalOptions, LoadedTable, PipelineError, PromptMode, TrainOptions};
use tabsynth::predictor::{self, GbdtParams};
use tabsynth::sampler::SamplerError;
use tabsynth::{make_partition_plan, BackendKind, GenConfig, GenStats, ModelArtifact, NGramParams, Table};

use config::FileConfig;

#[derive(Parser)]
#[command(name = "tabsynth", version, about = "Language-model tabular data synthesizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the shared model on a directory of CSV + metadata JSON pairs.
    Pretrain(PretrainArgs),
    /// Continue training on one downstream table.
    Finetune(FinetuneArgs),
    /// Sample synthetic rows from a fine-tuned model.
    Generate(GenerateArgs),
    /// Replace synthetic labels with predictions of a model fit on real rows.
    Relabel(RelabelArgs),
    /// Score a synthetic table against real train/test splits.
    Evaluate(EvaluateArgs),
    /// Print the partition plan for a table or model.
    Plan(PlanArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Ngram,
    Neural,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, value_enum, default_value = "ngram")]
    backend: BackendArg,
    /// N-gram order.
    #[arg(long, default_value_t = NGramParams::default().order)]
    order: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train without the metadata prompt.
    #[arg(long)]
    no_prompt: bool,
    /// Let the label take a random position like any other feature.
    #[arg(long)]
    no_label_first: bool,
    /// TOML file with a [remote] section for prompt generation.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ask the configured endpoint for the prompt instead of the local template.
    #[arg(long)]
    remote_prompt: bool,
    /// Neural optimisation steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Write a JSON training report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Clone)]
struct TableFlags {
    /// Metadata JSON with caption, target and feature descriptions.
    #[arg(long)]
    metadata: Option<PathBuf>,
    /// Target column; overrides the metadata.
    #[arg(long)]
    target: Option<String>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    train: PathBuf,
    #[command(flatten)]
    table: TableFlags,
    /// Pre-trained model; omit to train from scratch.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    partitions: usize,
    #[arg(long, default_value_t = 1)]
    overlap: usize,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(short = 'n', long = "rows")]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Write generation statistics and the plan used as JSON.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, default_value_t = tabsynth::sampler::DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pin a column value, e.g. `--condition income=high`. Repeatable.
    #[arg(long, value_parser = parse_condition)]
    condition: Vec<(String, String)>,
    /// Override the stored partition count.
    #[arg(long)]
    partitions: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    /// Generate partitions last to first.
    #[arg(long)]
    reverse_plan: bool,
    #[arg(long, default_value_t = GenConfig::default().max_attempt_factor)]
    max_attempt_factor: usize,
    #[arg(long, default_value_t = GenConfig::default().max_tokens)]
    max_tokens: usize,
    /// Real training CSV used to relabel the output.
    #[arg(long)]
    real_train: Option<PathBuf>,
    #[arg(long)]
    no_relabel: bool,
}

#[derive(Args)]
struct RelabelArgs {
    #[arg(long)]
    syn: PathBuf,
    #[arg(long)]
    real_train: PathBuf,
    #[command(flatten)]
    table: TableFlags,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    real_train: PathBuf,
    #[arg(long)]
    real_test: PathBuf,
    #[arg(long)]
    syn: PathBuf,
    #[command(flatten)]
    table: TableFlags,
    #[arg(long)]
    report: PathBuf,
    /// DCR histogram CSV.
    #[arg(long)]
    dcr_hist: Option<PathBuf>,
    /// Min-max scale numeric columns before computing DCR.
    #[arg(long)]
    normalize_dcr: bool,
    /// Leave the label out of DCR.
    #[arg(long)]
    dcr_exclude_target: bool,
    /// Generation stats JSON to attach to the report.
    #[arg(long)]
    gen_stats: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlanArgs {
    /// Use the schema stored in a fine-tuned model.
    #[arg(long, conflicts_with = "train")]
    model: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[command(flatten)]
    table: TableFlags,
    #[arg(long, default_value_t = 1)]
    partitions: usize,
    #[arg(long, default_value_t = 1)]
    overlap: usize,
}

fn parse_condition(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected col=val, got `{s}`"))?;
    if k.trim().is_empty() {
        return Err(format!("empty column in `{s}`"));
    }
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Generation stats file contents.
#[derive(Serialize)]
struct StatsFile<'a> {
    plan: &'a PartitionPlan,
    reverse_plan: bool,
    relabeled: bool,
    stats: &'a GenStats,
}

enum Failure {
    /// Output was written but is incomplete.
    Degraded(String),
    Error(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Error(e.to_string())
    }
}

fn err<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Error(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Relabel(a) => cmd_relabel(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Plan(a) => cmd_plan(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Degraded(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(err)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Failure::Error(format!("{}: {e}", path.display())))
}

fn train_options(f: &TrainFlags, partitions: usize, overlap: usize) -> Result<TrainOptions, Failure> {
    let prompt = if f.no_prompt {
        PromptMode::Disabled
    } else if f.remote_prompt {
        let path = f
            .config
            .as_deref()
            .ok_or_else(|| Failure::Error("--remote-prompt needs --config with a [remote] section".into()))?;
        let remote = FileConfig::load(path)
            .map_err(Failure::Error)?
            .remote()
            .ok_or_else(|| Failure::Error(format!("{} has no [remote] section", path.display())))?;
        PromptMode::Remote(remote)
    } else {
        if let Some(path) = &f.config {
            FileConfig::load(path).map_err(Failure::Error)?;
        }
        PromptMode::Local
    };
    let defaults = TrainSchedule::default();
    Ok(TrainOptions {
        backend: BackendSpec {
            kind: match f.backend {
                BackendArg::Ngram => BackendKind::NGram,
                BackendArg::Neural => BackendKind::Neural,
            },
            ngram: NGramParams {
                order: f.order,
                ..NGramParams::default()
            },
            schedule: TrainSchedule {
                steps: f.steps.unwrap_or(defaults.steps),
                batch_size: f.batch_size.unwrap_or(defaults.batch_size),
                learning_rate: f.lr.unwrap_or(defaults.learning_rate),
                ..defaults
            },
            ..BackendSpec::default()
        },
        prompt,
        label_first: !f.no_label_first,
        partitions,
        overlap,
        seed: f.seed,
    })
}

fn load(csv: &Path, t: &TableFlags) -> Result<LoadedTable, Failure> {
    Ok(pipeline::load_table(csv, t.metadata.as_deref(), t.target.as_deref())?)
}

fn load_model(path: &Path) -> Result<ModelArtifact, Failure> {
    ModelArtifact::load(path).map_err(|e| Failure::Error(format!("{}: {e}", path.display())))
}

/// `name.csv` files with a `name.json` beside them, sorted by name.
fn corpus_tables(dir: &Path) -> Result<Vec<LoadedTable>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::Error(format!("{}: {e}", dir.display())))?;
    let mut csvs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    csvs.sort();
    let mut tables = Vec::new();
    for csv in csvs {
        let meta = csv.with_extension("json");
        if !meta.exists() {
            eprintln!("skipping {}: no {}", csv.display(), meta.display());
            continue;
        }
        let t = pipeline::load_table(&csv, Some(&meta), None)
            .map_err(|e| Failure::Error(format!("{}: {e}", csv.display())))?;
        tables.push(t);
    }
    Ok(tables)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<(), Failure> {
    let opts = train_options(&a.train, 1, 1)?;
    let tables = corpus_tables(&a.corpus)?;
    let (model, report) = pipeline::pretrain(&tables, &opts)?;
    for note in report.tables.iter().filter(|n| !n.used) {
        eprintln!(
            "excluded {}: {:.1}% missing",
            note.name,
            note.missing_fraction * 100.0
        );
    }
    for w in &report.prompt_warnings {
        eprintln!("prompt: {w}");
    }
    model.save(&a.out).map_err(err)?;
    if let Some(p) = &a.train.report {
        write_json(p, &report)?;
    }
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<(), Failure> {
    let opts = train_options(&a.flags, a.partitions, a.overlap)?;
    let table = load(&a.train, &a.table)?;
    let base = a.model.as_deref().map(load_model).transpose()?;
    let (model, report) = pipeline::finetune(base, &table, &opts)?;
    for w in &report.prompt_warnings {
        eprintln!("prompt: {w}");
    }
    model.save(&a.out).map_err(err)?;
    if let Some(p) = &a.flags.report {
        write_json(p, &report)?;
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<(), Failure> {
    let model = load_model(&a.model)?;
    let state = model.table.as_ref().ok_or(PipelineError::NotFinetuned)?;
    let mut plan = match (a.partitions, a.overlap) {
        (None, None) => state.plan.clone(),
        (p, o) => make_partition_plan(
            &state.schema,
            p.unwrap_or(state.plan.len()),
            o.unwrap_or(state.plan.overlap),
        )
        .map_err(err)?,
    };
    if a.reverse_plan {
        plan = plan.reversed();
    }
    let cfg = GenConfig {
        temperature: a.temperature,
        max_tokens: a.max_tokens,
        max_attempt_factor: a.max_attempt_factor,
        seed: a.seed,
        condition: a.condition.clone(),
        ..GenConfig::default()
    };
    let (generated, shortfall) = match pipeline::generate(&model, a.n, &cfg, Some(&plan)) {
        Ok(g) => (g, false),
        Err(PipelineError::Sampler(SamplerError::YieldTooLow(partial))) => (*partial, true),
        Err(e) => return Err(e.into()),
    };
    let mut table = generated.table;
    let relabel = a.real_train.is_some() && !a.no_relabel;
    if let (Some(path), true) = (&a.real_train, relabel) {
        if !table.is_empty() {
            let real = pipeline::read_table_as(path, &state.schema)?;
            let params = GbdtParams {
                seed: tabsynth::rng::derive_seed(a.seed, "relabel", 0),
                ..GbdtParams::default()
            };
            table = predictor::relabel(&table, &real, &params).map_err(err)?;
        }
    }
    table.write_csv_file(&a.out).map_err(err)?;
    if let Some(p) = &a.stats {
        write_json(
            p,
            &StatsFile {
                plan: &plan,
                reverse_plan: a.reverse_plan,
                relabeled: relabel,
                stats: &generated.stats,
            },
        )?;
    }
    if shortfall {
        return Err(Failure::Degraded(format!(
            "only {} of {} rows generated after {} attempts; partial output written",
            generated.stats.rows_delivered, generated.stats.rows_requested, generated.stats.attempts
        )));
    }
    Ok(())
}

fn cmd_relabel(a: RelabelArgs) -> Result<(), Failure> {
    let real = load(&a.real_train, &a.table)?;
    let syn = pipeline::read_table_as(&a.syn, real.table.schema())?;
    let params = GbdtParams {
        seed: tabsynth::rng::derive_seed(a.seed, "relabel", 0),
        ..GbdtParams::default()
    };
    predictor::relabel(&syn, &real.table, &params)
        .map_err(err)?
        .write_csv_file(&a.out)
        .map_err(err)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let train = load(&a.real_train, &a.table)?;
    let schema = train.table.schema();
    let test: Table = pipeline::read_table_as(&a.real_test, schema)?;
    let syn: Table = pipeline::read_table_as(&a.syn, schema)?;
    let opts = EvalOptions {
        dcr: DcrOptions {
            normalize: a.normalize_dcr,
            include_target: !a.dcr_exclude_target,
        },
        seed: a.seed,
        ..EvalOptions::default()
    };
    let mut report = pipeline::evaluate(&train.table, &test, &syn, &opts)?;
    if let Some(p) = &a.gen_stats {
        let text = std::fs::read_to_string(p).map_err(|e| Failure::Error(format!("{}: {e}", p.display())))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(err)?;
        let stats = v.get("stats").cloned().unwrap_or(v);
        report.generation = Some(serde_json::from_value(stats).map_err(err)?);
    }
    write_json(&a.report, &report)?;
    if let Some(p) = &a.dcr_hist {
        write_histogram_csv_file(&report.dcr_histogram, p).map_err(err)?;
    }
    Ok(())
}

fn cmd_plan(a: PlanArgs) -> Result<(), Failure> {
    let schema = match (&a.model, &a.train) {
        (Some(m), _) => {
            let model = load_model(m)?;
            model.table.ok_or(PipelineError::NotFinetuned)?.schema
        }
        (None, Some(csv)) => load(csv, &a.table)?.table.schema().clone(),
        (None, None) => return Err(Failure::Error("either --model or --train is required".into())),
    };
    let plan = make_partition_plan(&schema, a.partitions, a.overlap).map_err(err)?;
    println!("{}", serde_json::to_string_pretty(&plan).map_err(err)?);
    Ok(())
}
