//! End-to-end stages: ingest, pre-train, fine-tune, generate, evaluate.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{ArtifactError, ModelArtifact, TableState};
use crate::codec::{CodecError, SerializedExample};
use crate::eval::{self, DcrOptions, DcrSummary, EvalError, EvalReport};
use crate::lm::{Backend, BackendKind, LmError, NGramModel, NGramParams, NeuralConfig, NeuralModel, TrainSchedule};
use crate::partition::{build_partition_corpus, make_partition_plan, PartitionError, PartitionPlan};
use crate::predictor::{GbdtParams, PredictorError};
use crate::prompt::{build_prompt_local, build_prompt_remote, Metadata, MetadataError, PromptText, PromptWarning, RemoteConfig};
use crate::rng::derive_seed;
use crate::sampler::{self, GenConfig, GenContext, Generated, SamplerError};
use crate::table::{
    filter_missing, read_csv_file, split_dataset, ColumnKind, Schema, Table, TableError, DEFAULT_MAX_MISSING_FRACTION,
};
use crate::tokenizer::{encode, EncodedExample, Vocab};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("no table survived filtering")]
    NoUsableTables,
    #[error("column `{column}` is {existing:?} in the model but {found:?} in the table")]
    SchemaConflict {
        column: String,
        existing: ColumnKind,
        found: ColumnKind,
    },
    #[error("model was pre-trained with the {model:?} backend, not {requested:?}")]
    BackendMismatch { model: BackendKind, requested: BackendKind },
    #[error("model has not been fine-tuned on a table")]
    NotFinetuned,
    #[error("{0}")]
    Input(String),
}

/// A table with the metadata describing it.
#[derive(Debug, Clone)]
pub struct LoadedTable {
    pub name: String,
    pub table: Table,
    pub meta: Metadata,
}

/// Reads a CSV and its metadata. The target comes from the metadata unless
/// `target` overrides it.
pub fn load_table(csv: &Path, meta: Option<&Path>, target: Option<&str>) -> Result<LoadedTable, PipelineError> {
    let meta = match (meta, target) {
        (Some(p), t) => {
            let mut m = Metadata::read_file(p)?;
            if let Some(t) = t {
                m.target_name = t.to_string();
            }
            m
        }
        (None, Some(t)) => Metadata::new("", t),
        (None, None) => return Err(PipelineError::Input("a metadata file or a target column is required".into())),
    };
    let (header, rows) = read_csv_file(csv)?;
    let table = Table::from_raw_inferred(&header, &rows, &meta.target_name)?;
    meta.validate(table.schema())?;
    let name = csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(LoadedTable { name, table, meta })
}

/// Reads a CSV under a known schema; columns may appear in any order.
pub fn read_table_as(path: &Path, schema: &Schema) -> Result<Table, PipelineError> {
    let (header, rows) = read_csv_file(path)?;
    let mut pos = Vec::with_capacity(schema.len());
    for c in schema.columns() {
        pos.push(header.iter().position(|h| h == &c.name).ok_or_else(|| {
            TableError::SchemaMismatch(format!("`{}` lacks column `{}`", path.display(), c.name))
        })?);
    }
    if header.len() != schema.len() {
        return Err(TableError::SchemaMismatch(format!(
            "`{}` has {} columns, expected {}",
            path.display(),
            header.len(),
            schema.len()
        ))
        .into());
    }
    let reordered: Vec<Vec<String>> = rows
        .iter()
        .map(|r| pos.iter().map(|&k| r.get(k).cloned().unwrap_or_default()).collect())
        .collect();
    Ok(Table::from_raw(schema.clone(), &reordered)?)
}

#[derive(Debug, Clone)]
pub enum PromptMode {
    Local,
    Remote(RemoteConfig),
    Disabled,
}

pub fn make_prompt(meta: &Metadata, schema: &Schema, mode: &PromptMode) -> (PromptText, Option<PromptWarning>) {
    match mode {
        PromptMode::Local => (build_prompt_local(meta, schema), None),
        PromptMode::Remote(cfg) => {
            let r = build_prompt_remote(meta, schema, cfg);
            (r.prompt, r.warning)
        }
        PromptMode::Disabled => (PromptText::disabled(), None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub ngram: NGramParams,
    pub neural: NeuralConfig,
    pub schedule: TrainSchedule,
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            kind: BackendKind::NGram,
            ngram: NGramParams::default(),
            neural: NeuralConfig::default(),
            schedule: TrainSchedule::default(),
        }
    }
}

impl BackendSpec {
    fn build(&self, vocab_size: usize, seed: u64) -> Result<Backend, PipelineError> {
        Ok(match self.kind {
            BackendKind::NGram => Backend::NGram(NGramModel::new(self.ngram, vocab_size)?),
            BackendKind::Neural => Backend::Neural(NeuralModel::new(
                NeuralConfig {
                    init_seed: derive_seed(seed, "neural/init", 0),
                    ..self.neural
                },
                vocab_size,
            )),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub backend: BackendSpec,
    pub prompt: PromptMode,
    pub label_first: bool,
    pub partitions: usize,
    pub overlap: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            backend: BackendSpec::default(),
            prompt: PromptMode::Local,
            label_first: true,
            partitions: 1,
            overlap: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableNote {
    pub name: String,
    pub missing_fraction: f64,
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub tables: Vec<TableNote>,
    pub examples: usize,
    pub vocab_size: usize,
    pub unk_tokens: usize,
    pub losses: Vec<f64>,
    pub prompt_warnings: Vec<String>,
}

fn merge_columns(known: &mut BTreeMap<String, ColumnKind>, schema: &Schema) -> Result<(), PipelineError> {
    for c in schema.columns() {
        match known.get(&c.name) {
            Some(&k) if k != c.kind() => {
                return Err(PipelineError::SchemaConflict {
                    column: c.name.clone(),
                    existing: k,
                    found: c.kind(),
                })
            }
            Some(_) => {}
            None => {
                known.insert(c.name.clone(), c.kind());
            }
        }
    }
    Ok(())
}

fn corpus_for(
    table: &Table,
    plan: &PartitionPlan,
    prompt: &PromptText,
    label_first: bool,
    seed: u64,
) -> Result<Vec<SerializedExample>, PipelineError> {
    Ok(build_partition_corpus(table, plan, prompt.text(), label_first, seed)?
        .into_iter()
        .map(|p| p.example)
        .collect())
}

/// Fits the pre-training state on every table whose missing fraction is
/// within the limit.
pub fn pretrain(tables: &[LoadedTable], opts: &TrainOptions) -> Result<(ModelArtifact, TrainReport), PipelineError> {
    let mut notes = Vec::new();
    let mut vocab = Vocab::new();
    let mut known = BTreeMap::new();
    let mut sentences = Vec::new();
    let mut warnings = Vec::new();
    for (i, t) in tables.iter().enumerate() {
        let check = filter_missing(&t.table, DEFAULT_MAX_MISSING_FRACTION);
        notes.push(TableNote {
            name: t.name.clone(),
            missing_fraction: check.fraction,
            used: check.accept,
        });
        if !check.accept {
            continue;
        }
        merge_columns(&mut known, t.table.schema())?;
        let (prompt, warning) = make_prompt(&t.meta, t.table.schema(), &opts.prompt);
        warnings.extend(warning.map(|w| format!("{}: {w}", t.name)));
        let plan = PartitionPlan::single(t.table.schema());
        let s = corpus_for(&t.table, &plan, &prompt, opts.label_first, derive_seed(opts.seed, "pretrain/corpus", i as u64))?;
        vocab.extend(&s, t.table.schema());
        sentences.extend(s);
    }
    if sentences.is_empty() {
        return Err(PipelineError::NoUsableTables);
    }
    let examples: Vec<EncodedExample> = sentences.iter().map(|s| encode(s, &vocab)).collect();
    let mut backend = opts.backend.build(vocab.len(), opts.seed)?;
    let losses = backend.pretrain(&examples, &opts.backend.schedule, derive_seed(opts.seed, "pretrain/train", 0))?;
    let report = TrainReport {
        tables: notes,
        examples: examples.len(),
        vocab_size: vocab.len(),
        unk_tokens: examples.iter().map(|e| e.unk_count).sum(),
        losses,
        prompt_warnings: warnings,
    };
    Ok((
        ModelArtifact {
            vocab,
            backend,
            known_columns: known,
            table: None,
        },
        report,
    ))
}

/// Fine-tunes `base` (or a fresh model) on one table.
pub fn finetune(
    base: Option<ModelArtifact>,
    table: &LoadedTable,
    opts: &TrainOptions,
) -> Result<(ModelArtifact, TrainReport), PipelineError> {
    let schema = table.table.schema();
    let (mut vocab, mut backend, mut known) = match base {
        Some(a) => {
            if a.backend.kind() != opts.backend.kind {
                return Err(PipelineError::BackendMismatch {
                    model: a.backend.kind(),
                    requested: opts.backend.kind,
                });
            }
            (a.vocab, Some(a.backend), a.known_columns)
        }
        None => (Vocab::new(), None, BTreeMap::new()),
    };
    merge_columns(&mut known, schema)?;
    let (prompt, warning) = make_prompt(&table.meta, schema, &opts.prompt);
    let plan = make_partition_plan(schema, opts.partitions, opts.overlap)?;
    let sentences = corpus_for(&table.table, &plan, &prompt, opts.label_first, derive_seed(opts.seed, "finetune/corpus", 0))?;
    vocab.extend(&sentences, schema);
    let examples: Vec<EncodedExample> = sentences.iter().map(|s| encode(s, &vocab)).collect();
    let mut backend = match backend.take() {
        Some(mut b) => {
            b.resize_vocab(vocab.len());
            b
        }
        None => opts.backend.build(vocab.len(), opts.seed)?,
    };
    let losses = backend.finetune(&examples, &opts.backend.schedule, derive_seed(opts.seed, "finetune/train", 0))?;
    let state = TableState {
        schema: schema.clone(),
        prompt,
        label_counts: sampler::label_counts(&table.table),
        required: sampler::required_columns(&table.table),
        plan,
        label_first: opts.label_first,
    };
    let report = TrainReport {
        tables: vec![TableNote {
            name: table.name.clone(),
            missing_fraction: filter_missing(&table.table, DEFAULT_MAX_MISSING_FRACTION).fraction,
            used: true,
        }],
        examples: examples.len(),
        vocab_size: vocab.len(),
        unk_tokens: examples.iter().map(|e| e.unk_count).sum(),
        losses,
        prompt_warnings: warning.map(|w| w.to_string()).into_iter().collect(),
    };
    Ok((
        ModelArtifact {
            vocab,
            backend,
            known_columns: known,
            table: Some(state),
        },
        report,
    ))
}

/// Samples `n` rows with the stored plan, or `plan` when given.
pub fn generate(
    model: &ModelArtifact,
    n: usize,
    cfg: &GenConfig,
    plan: Option<&PartitionPlan>,
) -> Result<Generated, PipelineError> {
    let state = model.table.as_ref().ok_or(PipelineError::NotFinetuned)?;
    let ctx = GenContext {
        schema: &state.schema,
        vocab: &model.vocab,
        prompt: state.prompt.text(),
        label_counts: &state.label_counts,
        required: &state.required,
        label_first: state.label_first,
    };
    Ok(crate::partition::generate_partitioned(&model.backend, &ctx, plan.unwrap_or(&state.plan), n, cfg)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub gbdt: GbdtParams,
    pub dcr: DcrOptions,
    pub histogram_bins: usize,
    /// Share of the synthetic rows used to train the discriminator.
    pub discriminator_train_fraction: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            gbdt: GbdtParams::default(),
            dcr: DcrOptions::default(),
            histogram_bins: eval::DCR_BINS,
            discriminator_train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Runs every metric on one synthetic table.
pub fn evaluate(real_train: &Table, real_test: &Table, syn: &Table, opts: &EvalOptions) -> Result<EvalReport, PipelineError> {
    let gbdt = GbdtParams {
        seed: derive_seed(opts.seed, "eval/gbdt", 0),
        ..opts.gbdt
    };
    let baseline = eval::mle_score(real_train, real_test, &gbdt)?;
    let mle = eval::mle_score(syn, real_test, &gbdt)?;
    let augmentation = eval::augment_score(real_train, syn, real_test, &gbdt)?;
    let distances = eval::dcr(syn, real_train, opts.dcr)?;
    let split = split_dataset(syn, opts.discriminator_train_fraction, derive_seed(opts.seed, "eval/syn-split", 0))?;
    let discriminator = eval::discriminator_score(real_train, &split.train, real_test, &split.test, &gbdt)?;
    let correlation_distance = eval::correlation_distance(real_train, syn)?;
    Ok(EvalReport {
        task: real_train.schema().task(),
        baseline,
        mle,
        augmentation,
        dcr: DcrSummary::of(&distances).ok_or(EvalError::EmptySynthetic)?,
        dcr_options: opts.dcr,
        dcr_histogram: eval::histogram(&distances, opts.histogram_bins),
        discriminator,
        correlation_distance,
        generation: None,
    })
}
