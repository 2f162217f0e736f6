//! Stage orchestration over a run directory of flat JSONL files.
//!
//! Each stage reads the files produced upstream, writes its own outputs
//! atomically and records input/output hashes in `manifest.json`. A stage
//! whose config and inputs are unchanged is skipped; when a stage rewrites a
//! file, every downstream output built from the old version is removed.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{IteratorRandom, SliceRandom};
use rayon::prelude::*;
use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::analytics::{
    length_stats, literal_relevance, render_length_table, semantic_relevance, verb_noun_profile,
    ExternalAnalyzer, GroupBy, HeuristicAnalyzer, RelevanceReport, SemanticMode, SyntacticAnalyzer,
};
use crate::corpus::{
    load_corpus, sample_document, CorpusFormat, CorpusKind, Document, LoadReport, QaLayout,
    SamplingPolicy, SamplingReport,
};
use crate::filter::{
    FilterConfig, FilterOutcome, FilterStages, QualityFilter, Tokenizer, WordTokenizer,
};
use crate::forge::{self, MetaInstruction, Negative};
use crate::gateway::{CallLog, DecodingParams, Gateway, GatewayConfig, GatewayError, HttpBackend};
use crate::record::{RecordStatus, TaskRecord, Verdict};
use crate::review::{export_review_negatives, Judgment};
use crate::seed::{
    assemble_generation_prompt_with, expand_document_view, invert_tasks, ExpansionSettings,
    InversionSettings, PromptTemplate, SeedExample, SeedOrigin, SeedPool, SeedView, StoredSeed,
};
use crate::synthetic::synthetic_backend;
use crate::task::Task;
use crate::util::{derived_rng, read_jsonl, sha256_hex, to_jsonl, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Sample,
    SeedExpand,
    SeedInvert,
    BuildMeta,
    Generate,
    Filter,
    Gate,
    Stats,
    Diversity,
    Relevance,
    ExportSft,
    ExportDisc,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Sample,
        Stage::SeedExpand,
        Stage::SeedInvert,
        Stage::BuildMeta,
        Stage::Generate,
        Stage::Filter,
        Stage::Gate,
        Stage::Stats,
        Stage::Diversity,
        Stage::Relevance,
        Stage::ExportSft,
        Stage::ExportDisc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sample => "sample",
            Stage::SeedExpand => "seed-expand",
            Stage::SeedInvert => "seed-invert",
            Stage::BuildMeta => "build-meta",
            Stage::Generate => "generate",
            Stage::Filter => "filter",
            Stage::Gate => "gate",
            Stage::Stats => "stats",
            Stage::Diversity => "diversity",
            Stage::Relevance => "relevance",
            Stage::ExportSft => "export-sft",
            Stage::ExportDisc => "export-disc",
        }
    }

    /// Stages that can produce `file`.
    fn producers_of(file: &str) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| s.outputs().contains(&file))
            .collect()
    }

    fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Sample => &[files::DOCUMENTS, files::SAMPLE_REPORT],
            Stage::SeedExpand => &[files::SEEDS_DOCUMENT_VIEW],
            Stage::SeedInvert => &[files::SEEDS_TASK_VIEW],
            Stage::BuildMeta => &[files::GENERATED, files::META_PROMPTS],
            Stage::Generate => &[files::GENERATED],
            Stage::Filter => &[files::FILTERED, files::REJECTS, files::PARKED],
            Stage::Gate => &[
                files::RETAINED,
                files::GATED_INVALID,
                files::DUPLICATES,
                files::GATE_PARKED,
            ],
            Stage::Stats => &[files::STATS_JSON, files::STATS_TXT],
            Stage::Diversity => &[files::DIVERSITY],
            Stage::Relevance => &[files::RELEVANCE_JSON, files::RELEVANCE_TXT],
            Stage::ExportSft => &[files::SFT],
            Stage::ExportDisc => &[files::DISCRIMINATOR, files::DISCRIMINATOR_AUDIT],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// File names inside a run directory.
pub mod files {
    pub const MANIFEST: &str = "manifest.json";
    pub const LOCK: &str = ".lock";
    pub const CALLS: &str = "calls.jsonl";
    pub const DOCUMENTS: &str = "documents.jsonl";
    pub const SAMPLE_REPORT: &str = "reports/sample.json";
    pub const SEEDS_DOCUMENT_VIEW: &str = "seeds_document_view.jsonl";
    pub const SEEDS_TASK_VIEW: &str = "seeds_task_view.jsonl";
    pub const GENERATED: &str = "generated.jsonl";
    pub const META_PROMPTS: &str = "build_meta_prompts.jsonl";
    pub const FILTERED: &str = "filtered.jsonl";
    pub const REJECTS: &str = "rejects.jsonl";
    pub const PARKED: &str = "parked.jsonl";
    pub const RETAINED: &str = "retained.jsonl";
    pub const GATED_INVALID: &str = "gated_invalid.jsonl";
    pub const DUPLICATES: &str = "duplicates.jsonl";
    pub const GATE_PARKED: &str = "gate_parked.jsonl";
    pub const STATS_JSON: &str = "reports/stats.json";
    pub const STATS_TXT: &str = "reports/stats.txt";
    pub const DIVERSITY: &str = "reports/diversity.json";
    pub const RELEVANCE_JSON: &str = "reports/relevance.json";
    pub const RELEVANCE_TXT: &str = "reports/relevance.txt";
    pub const SFT: &str = "sft.jsonl";
    pub const DISCRIMINATOR: &str = "discriminator.jsonl";
    pub const DISCRIMINATOR_AUDIT: &str = "discriminator.audit.jsonl";
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage} needs {file}; run {} first", fmt_stages(.producers))]
    MissingUpstream {
        stage: Stage,
        file: String,
        producers: Vec<Stage>,
    },
    #[error("stage {stage} must run after {before} (configured order)")]
    Ordering { stage: Stage, before: Stage },
    #[error("{file} changed since {producer} wrote it; rerun {producer}")]
    Stale { file: String, producer: Stage },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("run directory is locked by {holder} ({path}); remove the lock file if that process is gone")]
    Locked { path: PathBuf, holder: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{stage} failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error("counter conservation violated: {0}")]
    Conservation(String),
}

fn fmt_stages(stages: &[Stage]) -> String {
    stages
        .iter()
        .map(|s| format!("`{s}`"))
        .collect::<Vec<_>>()
        .join(" or ")
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Deterministic in-process model; no network.
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewaySection {
    pub backend: BackendKind,
    #[serde(flatten)]
    pub endpoint: GatewayConfig,
    /// Model building the meta-training set and expanding seeds.
    pub teacher_model: Option<String>,
    /// Trained task generator.
    pub generator_model: Option<String>,
    /// Trained task discriminator.
    pub discriminator_model: Option<String>,
    /// Model answering the filter's probes.
    pub answer_model: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Generator,
    Discriminator,
    Answerer,
    Embedder,
}

impl GatewaySection {
    pub fn model_for(&self, role: Role) -> String {
        let pick = match role {
            Role::Teacher => &self.teacher_model,
            Role::Generator => &self.generator_model,
            Role::Discriminator => &self.discriminator_model,
            Role::Answerer => &self.answer_model,
            Role::Embedder => &self.endpoint.embedding_model,
        };
        pick.clone()
            .unwrap_or_else(|| self.endpoint.model_name.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaLayoutConfig {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    pub kind: CorpusKind,
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: CorpusFormat,
    #[serde(default)]
    pub policy: Option<SamplingPolicy>,
    #[serde(default)]
    pub qa_layout: Option<QaLayoutConfig>,
    /// Read at most this many raw documents.
    #[serde(default)]
    pub limit: Option<usize>,
}

fn default_format() -> CorpusFormat {
    CorpusFormat::Jsonl
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    /// Manual seeds (`SeedExample` JSONL), both views.
    pub manual: Option<PathBuf>,
    /// Existing tasks (`Task` JSONL) to invert into task-view seeds.
    pub tasks: Option<PathBuf>,
    /// Number of tasks sampled from `tasks`; all when unset.
    pub invert_sample: Option<usize>,
    /// Demonstrations per document-view expansion prompt.
    pub k: usize,
    pub inversion_k: usize,
    pub inversions_per_task: usize,
    pub inversion_corpus: CorpusKind,
    /// Documents per corpus used for expansion; all when unset.
    pub expand_per_corpus: Option<usize>,
    /// Demonstrations per meta-set prompt.
    pub meta_k: usize,
    pub generation_template: Option<PathBuf>,
    pub inversion_template: Option<PathBuf>,
}

impl Default for SeedSection {
    fn default() -> Self {
        SeedSection {
            manual: None,
            tasks: None,
            invert_sample: None,
            k: 5,
            inversion_k: 5,
            inversions_per_task: 1,
            inversion_corpus: CorpusKind::Custom("alpaca".into()),
            expand_per_corpus: None,
            meta_k: 5,
            generation_template: None,
            inversion_template: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub overlap: bool,
    pub answerability: bool,
    pub consistency: bool,
    pub gate: bool,
    pub dedupe: bool,
    /// `gate` refuses to run before `filter`.
    pub filter_before_gate: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            overlap: true,
            answerability: true,
            consistency: true,
            gate: true,
            dedupe: true,
            filter_before_gate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsSection {
    pub semantic: bool,
    pub semantic_mode: SemanticMode,
    /// External verb/noun analyzer command; the built-in heuristic when empty.
    pub analyzer_command: Vec<String>,
}

impl Default for AnalyticsSection {
    fn default() -> Self {
        AnalyticsSection {
            semantic: true,
            semantic_mode: SemanticMode::WholeText,
            analyzer_command: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    /// Review judgments whose rejects join the discriminator negatives.
    pub review_judgments: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run_id: Option<String>,
    pub seed: u64,
    /// Pinned timestamp for records and the manifest; wall clock when unset.
    pub timestamp: Option<String>,
    pub corpora: Vec<CorpusSource>,
    pub gateway: GatewaySection,
    pub generation: DecodingParams,
    pub meta: MetaInstruction,
    pub seeds: SeedSection,
    pub filter: FilterConfig,
    pub stages: StageToggles,
    pub analytics: AnalyticsSection,
    pub export: ExportSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        QualityFilter::new(self.filter.clone()).map_err(|e| bad(&e))?;
        self.generation.validate().map_err(|e| bad(&e))?;
        self.gateway.endpoint.validate().map_err(|e| bad(&e))?;
        for c in &self.corpora {
            if let Some(p) = &c.policy {
                p.validate().map_err(|e| bad(&e))?;
            }
            if let Some(q) = &c.qa_layout {
                Regex::new(&q.question).map_err(|e| bad(&e))?;
                Regex::new(&q.answer).map_err(|e| bad(&e))?;
            }
        }
        if self.seeds.inversions_per_task == 0 {
            return Err(PipelineError::Config(
                "seeds.inversions_per_task must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Invariant: `generated = parse_failed + filtered + gated_invalid +
/// retained + in_flight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub sampled: usize,
    pub generated: usize,
    pub parse_failed: usize,
    pub filtered: usize,
    pub gated_invalid: usize,
    pub retained: usize,
    pub in_flight: usize,
}

impl Counters {
    pub fn is_conserved(&self) -> bool {
        self.generated
            == self.parse_failed
                + self.filtered
                + self.gated_invalid
                + self.retained
                + self.in_flight
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub completed_at: String,
    pub summary: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub updated_at: String,
    pub config: PipelineConfig,
    pub config_hash: String,
    pub template_hashes: BTreeMap<String, String>,
    pub meta_instruction_hash: String,
    pub meta_instruction_overridden: bool,
    pub scorers: BTreeMap<String, String>,
    pub counters: Counters,
    pub stages: BTreeMap<Stage, StageEntry>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Serve calls already in the run's call log from the log.
    pub replay: bool,
    /// Rerun a stage even when its inputs and config are unchanged.
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    pub outputs: Vec<String>,
    pub summary: Value,
    pub counters: Counters,
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(path: PathBuf) -> Result<Self> {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "pid {}", std::process::id());
                Ok(LockGuard(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = std::fs::read_to_string(&path)
                    .unwrap_or_default()
                    .trim()
                    .to_string();
                Err(PipelineError::Locked { path, holder })
            }
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Drops records whose whitespace-normalized fields repeat an earlier
/// record. Returns `(kept, dropped)`.
pub fn dedupe(records: Vec<TaskRecord>) -> (Vec<TaskRecord>, Vec<TaskRecord>) {
    let mut seen = std::collections::HashSet::new();
    let (mut kept, mut dropped) = (Vec::new(), Vec::new());
    for r in records {
        let key = r.task.as_ref().map(|t| {
            let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
            sha256_hex(format!(
                "{}\u{1f}{}\u{1f}{}",
                norm(&t.instruction),
                norm(&t.input),
                norm(&t.output)
            ))
        });
        match key {
            Some(k) if !seen.insert(k.clone()) => dropped.push(r),
            _ => kept.push(r),
        }
    }
    (kept, dropped)
}

/// Stable reason string for a filter decision.
fn decision_reason(d: crate::filter::FilterDecision) -> &'static str {
    use crate::filter::FilterDecision::*;
    match d {
        Pass => "pass",
        RejectOverlap => "reject_overlap",
        RejectUnanswerable => "reject_unanswerable",
        RejectInconsistent => "reject_inconsistent",
    }
}

/// An open run directory. Holds the lock until dropped.
pub struct Run {
    dir: PathBuf,
    config: PipelineConfig,
    base_dir: PathBuf,
    options: RunOptions,
    manifest: RunManifest,
    _lock: LockGuard,
}

struct StageWrite {
    outputs: Vec<(&'static str, Vec<u8>)>,
    summary: Value,
}

impl Run {
    /// Opens (or creates) `dir`. Relative paths in `config` resolve against
    /// `base_dir`, normally the config file's directory.
    pub fn open(
        dir: &Path,
        config: PipelineConfig,
        base_dir: &Path,
        options: RunOptions,
    ) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(dir.join("reports")).map_err(io_err(dir))?;
        let lock = LockGuard::acquire(dir.join(files::LOCK))?;
        let manifest_path = dir.join(files::MANIFEST);
        let now = config.timestamp.clone().unwrap_or_else(now);
        let mut manifest = if manifest_path.exists() {
            let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
            serde_json::from_str::<RunManifest>(&text)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", manifest_path.display())))?
        } else {
            RunManifest {
                run_id: config.run_id.clone().unwrap_or_else(|| {
                    dir.file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "run".into())
                }),
                created_at: now.clone(),
                updated_at: now,
                config: config.clone(),
                config_hash: String::new(),
                template_hashes: BTreeMap::new(),
                meta_instruction_hash: String::new(),
                meta_instruction_overridden: false,
                scorers: BTreeMap::new(),
                counters: Counters::default(),
                stages: BTreeMap::new(),
            }
        };
        manifest.config = config.clone();
        manifest.config_hash = config.hash();
        manifest.meta_instruction_hash = config.meta.hash();
        manifest.meta_instruction_overridden = config.meta.is_overridden();
        let mut run = Run {
            dir: dir.to_path_buf(),
            config,
            base_dir: base_dir.to_path_buf(),
            options,
            manifest,
            _lock: lock,
        };
        run.manifest.template_hashes = BTreeMap::from([
            ("generation".to_string(), run.generation_template()?.hash()),
            ("inversion".to_string(), run.inversion_template()?.hash()),
        ]);
        run.manifest.scorers = BTreeMap::from([
            ("tokenizer".to_string(), WordTokenizer.name().to_string()),
            ("analyzer".to_string(), run.analyzer().name().to_string()),
            (
                "semantic".to_string(),
                run.config.analytics.semantic_mode.scorer_name().to_string(),
            ),
        ]);
        Ok(run)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn timestamp(&self) -> String {
        self.config.timestamp.clone().unwrap_or_else(now)
    }

    fn generation_template(&self) -> Result<PromptTemplate> {
        match &self.config.seeds.generation_template {
            None => Ok(PromptTemplate::generation()),
            Some(p) => {
                let path = self.resolve(p);
                let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                PromptTemplate::new(text, &["demonstrations", "text"])
                    .map_err(|e| PipelineError::Config(e.to_string()))
            }
        }
    }

    fn inversion_template(&self) -> Result<PromptTemplate> {
        match &self.config.seeds.inversion_template {
            None => Ok(PromptTemplate::inversion()),
            Some(p) => {
                let path = self.resolve(p);
                let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                PromptTemplate::new(text, &["demonstrations", "task"])
                    .map_err(|e| PipelineError::Config(e.to_string()))
            }
        }
    }

    fn analyzer(&self) -> Box<dyn SyntacticAnalyzer> {
        match self.config.analytics.analyzer_command.split_first() {
            None => Box::new(HeuristicAnalyzer),
            Some((program, args)) => Box::new(ExternalAnalyzer {
                program: program.clone(),
                args: args.to_vec(),
            }),
        }
    }

    fn gateway(&self, role: Role) -> Result<Gateway> {
        let section = &self.config.gateway;
        let model = section.model_for(role);
        let mut endpoint = section.endpoint.clone();
        endpoint.model_name = model.clone();
        let backend: Arc<dyn crate::gateway::Backend> = match section.backend {
            BackendKind::Mock => Arc::new(synthetic_backend(&model)),
            BackendKind::Http => Arc::new(
                HttpBackend::new(&endpoint).map_err(|e| PipelineError::Config(e.to_string()))?,
            ),
        };
        let calls = self.path(files::CALLS);
        let mut gw = Gateway::new(backend, endpoint.max_parallel, endpoint.retry_policy())
            .with_call_log(CallLog::append_to(&calls).map_err(io_err(&calls))?);
        if self.options.replay {
            gw = gw.with_replay(CallLog::load(&calls).map_err(io_err(&calls))?);
        }
        Ok(gw)
    }

    fn read<T: DeserializeOwned>(&self, file: &str) -> Result<Vec<T>> {
        let path = self.path(file);
        read_jsonl(&path).map_err(io_err(&path))
    }

    fn file_hash(&self, file: &str) -> Option<String> {
        std::fs::read(self.path(file)).ok().map(sha256_hex)
    }

    fn producer(&self, file: &str) -> Option<Stage> {
        self.manifest
            .stages
            .iter()
            .find(|(_, e)| e.outputs.contains_key(file))
            .map(|(s, _)| *s)
    }

    /// Checks that `file` exists and is what its producer wrote from inputs
    /// that are themselves fresh.
    fn require_fresh(&self, stage: Stage, file: &str) -> Result<String> {
        let missing = || PipelineError::MissingUpstream {
            stage,
            file: file.to_string(),
            producers: Stage::producers_of(file),
        };
        let producer = self.producer(file).ok_or_else(missing)?;
        let current = self.file_hash(file).ok_or_else(missing)?;
        let entry = &self.manifest.stages[&producer];
        if entry.outputs[file] != current {
            return Err(PipelineError::Stale {
                file: file.to_string(),
                producer,
            });
        }
        for (input, hash) in entry
            .inputs
            .iter()
            .filter(|(k, _)| !k.starts_with(EXTERNAL))
        {
            if self.require_fresh(producer, input)? != *hash {
                return Err(PipelineError::Stale {
                    file: input.clone(),
                    producer,
                });
            }
        }
        Ok(current)
    }

    /// Files a stage reads, given the current run state.
    fn inputs_of(&self, stage: Stage) -> Result<Vec<&'static str>> {
        Ok(match stage {
            Stage::Sample | Stage::SeedInvert => vec![],
            Stage::SeedExpand | Stage::Generate => vec![files::DOCUMENTS],
            Stage::BuildMeta => {
                let mut v = vec![files::DOCUMENTS, files::SEEDS_DOCUMENT_VIEW];
                if self.producer(files::SEEDS_TASK_VIEW).is_some() {
                    v.push(files::SEEDS_TASK_VIEW);
                }
                v
            }
            Stage::Filter => vec![files::GENERATED],
            Stage::Gate => {
                if self.producer(files::FILTERED).is_some() {
                    vec![files::FILTERED]
                } else if self.config.stages.filter_before_gate {
                    return Err(PipelineError::Ordering {
                        stage,
                        before: Stage::Filter,
                    });
                } else {
                    vec![files::GENERATED]
                }
            }
            Stage::Stats | Stage::Diversity | Stage::Relevance | Stage::ExportSft => {
                vec![files::RETAINED]
            }
            Stage::ExportDisc => vec![files::RETAINED, files::REJECTS],
        })
    }

    /// External files (corpora, seeds, judgments) feed the input hash too.
    /// Keyed by the path as written in the config.
    fn external_inputs(&self, stage: Stage) -> Vec<&Path> {
        let s = &self.config.seeds;
        let mut out: Vec<&Path> = match stage {
            Stage::Sample => self
                .config
                .corpora
                .iter()
                .map(|c| c.path.as_path())
                .collect(),
            Stage::SeedExpand | Stage::BuildMeta => s.manual.iter().map(|p| p.as_path()).collect(),
            Stage::SeedInvert => s
                .manual
                .iter()
                .chain(&s.tasks)
                .map(|p| p.as_path())
                .collect(),
            Stage::ExportDisc => self
                .config
                .export
                .review_judgments
                .iter()
                .map(|p| p.as_path())
                .collect(),
            _ => vec![],
        };
        out.extend(
            s.generation_template
                .iter()
                .chain(&s.inversion_template)
                .map(|p| p.as_path()),
        );
        out
    }

    fn external_hash(path: &Path) -> String {
        fn walk(path: &Path, acc: &mut Vec<(String, String)>) {
            if path.is_dir() {
                let mut entries: Vec<_> = std::fs::read_dir(path)
                    .into_iter()
                    .flatten()
                    .flatten()
                    .map(|e| e.path())
                    .collect();
                entries.sort();
                for e in entries {
                    walk(&e, acc);
                }
            } else {
                let h = std::fs::read(path)
                    .map(sha256_hex)
                    .unwrap_or_else(|_| "missing".into());
                acc.push((path.display().to_string(), h));
            }
        }
        let mut acc = Vec::new();
        walk(path, &mut acc);
        sha256_hex(serde_json::to_vec(&acc).expect("pairs serialize"))
    }

    /// Runs one stage, or skips it when nothing it depends on changed.
    pub fn run_stage(&mut self, stage: Stage) -> Result<StageOutcome> {
        let mut inputs = BTreeMap::new();
        for file in self.inputs_of(stage)? {
            inputs.insert(file.to_string(), self.require_fresh(stage, file)?);
        }
        for path in self.external_inputs(stage) {
            inputs.insert(
                format!("{EXTERNAL}{}", path.display()),
                Self::external_hash(&self.resolve(path)),
            );
        }
        let config_hash = self.config.hash();
        if !self.options.force {
            if let Some(entry) = self.manifest.stages.get(&stage) {
                let outputs_intact = entry
                    .outputs
                    .iter()
                    .all(|(f, h)| self.file_hash(f).as_ref() == Some(h));
                if entry.config_hash == config_hash && entry.inputs == inputs && outputs_intact {
                    log::info!("{stage}: inputs and config unchanged; skipping");
                    return Ok(StageOutcome {
                        stage,
                        skipped: true,
                        outputs: entry.outputs.keys().cloned().collect(),
                        summary: entry.summary.clone(),
                        counters: self.manifest.counters,
                    });
                }
            }
        }
        let write = self.execute(stage).map_err(|e| match e {
            PipelineError::Stage { .. } | PipelineError::Config(_) | PipelineError::Io { .. } => e,
            other => PipelineError::Stage {
                stage,
                message: other.to_string(),
            },
        })?;
        self.commit(stage, config_hash, inputs, write)
    }

    fn commit(
        &mut self,
        stage: Stage,
        config_hash: String,
        inputs: BTreeMap<String, String>,
        write: StageWrite,
    ) -> Result<StageOutcome> {
        let mut outputs = BTreeMap::new();
        let mut changed = Vec::new();
        for (file, bytes) in &write.outputs {
            let hash = sha256_hex(bytes);
            if self.file_hash(file).as_ref() != Some(&hash) {
                changed.push(file.to_string());
            }
            let path = self.path(file);
            write_atomic(&path, bytes).map_err(io_err(&path))?;
            outputs.insert(file.to_string(), hash);
        }
        // another stage that produced one of these files no longer owns it
        let displaced: Vec<Stage> = self
            .manifest
            .stages
            .iter()
            .filter(|(s, e)| **s != stage && e.outputs.keys().any(|f| outputs.contains_key(f)))
            .map(|(s, _)| *s)
            .collect();
        for s in displaced {
            self.manifest.stages.remove(&s);
        }
        self.invalidate_downstream(stage, changed)?;
        let entry = StageEntry {
            config_hash,
            inputs,
            outputs: outputs.clone(),
            completed_at: self.timestamp(),
            summary: write.summary.clone(),
        };
        self.manifest.stages.insert(stage, entry);
        self.manifest.counters = self.count()?;
        self.manifest.updated_at = self.timestamp();
        self.save_manifest()?;
        Ok(StageOutcome {
            stage,
            skipped: false,
            outputs: outputs.into_keys().collect(),
            summary: write.summary,
            counters: self.manifest.counters,
        })
    }

    fn invalidate_downstream(&mut self, stage: Stage, mut changed: Vec<String>) -> Result<()> {
        while let Some(file) = changed.pop() {
            let dependents: Vec<Stage> = self
                .manifest
                .stages
                .iter()
                .filter(|(s, e)| **s != stage && e.inputs.contains_key(&file))
                .map(|(s, _)| *s)
                .collect();
            for s in dependents {
                if let Some(entry) = self.manifest.stages.remove(&s) {
                    log::info!("{s}: outputs removed because {file} changed");
                    for out in entry.outputs.keys() {
                        let path = self.path(out);
                        if path.exists() {
                            std::fs::remove_file(&path).map_err(io_err(&path))?;
                        }
                        changed.push(out.clone());
                    }
                }
            }
        }
        Ok(())
    }

    fn save_manifest(&self) -> Result<()> {
        let path = self.path(files::MANIFEST);
        let mut bytes = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes).map_err(io_err(&path))
    }

    fn count_lines(&self, file: &str) -> Result<usize> {
        if self.producer(file).is_none() {
            return Ok(0);
        }
        let path = self.path(file);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(text.lines().filter(|l| !l.trim().is_empty()).count())
    }

    /// Recomputes counters from the files on disk.
    pub fn count(&self) -> Result<Counters> {
        let mut c = Counters {
            sampled: self.count_lines(files::DOCUMENTS)?,
            ..Default::default()
        };
        if self.producer(files::GENERATED).is_none() {
            return Ok(c);
        }
        let generated: Vec<TaskRecord> = self.read(files::GENERATED)?;
        c.generated = generated.len();
        c.parse_failed = generated
            .iter()
            .filter(|r| r.status == RecordStatus::ParseFailed)
            .count();
        let gate_ran = self.producer(files::RETAINED).is_some();
        if self.producer(files::REJECTS).is_some() {
            let rejects: Vec<Negative> = self.read(files::REJECTS)?;
            c.filtered = rejects
                .iter()
                .filter(|n| n.record.status == RecordStatus::Filtered)
                .count();
        }
        if gate_ran {
            c.filtered += self.count_lines(files::DUPLICATES)?;
            c.gated_invalid = self.count_lines(files::GATED_INVALID)?;
            c.retained = self.count_lines(files::RETAINED)?;
            c.in_flight =
                self.count_lines(files::PARKED)? + self.count_lines(files::GATE_PARKED)?;
            if self.producer(files::FILTERED).is_none() {
                // gate read generated.jsonl directly
                c.in_flight = self.count_lines(files::GATE_PARKED)?;
            }
        } else if self.producer(files::FILTERED).is_some() {
            c.in_flight = self.count_lines(files::FILTERED)? + self.count_lines(files::PARKED)?;
        } else {
            c.in_flight = c.generated - c.parse_failed;
        }
        if !c.is_conserved() {
            return Err(PipelineError::Conservation(format!("{c:?}")));
        }
        Ok(c)
    }

    fn execute(&self, stage: Stage) -> Result<StageWrite> {
        match stage {
            Stage::Sample => self.stage_sample(),
            Stage::SeedExpand => self.stage_seed_expand(),
            Stage::SeedInvert => self.stage_seed_invert(),
            Stage::BuildMeta => self.stage_build_meta(),
            Stage::Generate => self.stage_generate(),
            Stage::Filter => self.stage_filter(),
            Stage::Gate => self.stage_gate(),
            Stage::Stats => self.stage_stats(),
            Stage::Diversity => self.stage_diversity(),
            Stage::Relevance => self.stage_relevance(),
            Stage::ExportSft => self.stage_export_sft(),
            Stage::ExportDisc => self.stage_export_disc(),
        }
    }

    fn stage_err(stage: Stage) -> impl Fn(&dyn std::fmt::Display) -> PipelineError {
        move |e| PipelineError::Stage {
            stage,
            message: e.to_string(),
        }
    }

    fn stage_sample(&self) -> Result<StageWrite> {
        let err = Self::stage_err(Stage::Sample);
        if self.config.corpora.is_empty() {
            return Err(PipelineError::Config("no corpora configured".into()));
        }
        #[derive(Serialize)]
        struct CorpusSummary {
            corpus: String,
            path: String,
            load: LoadReport,
            sampling: SamplingReport,
        }
        let mut docs = Vec::new();
        let mut summaries = Vec::new();
        for src in &self.config.corpora {
            let path = self.resolve(&src.path);
            let policy = src
                .policy
                .clone()
                .unwrap_or_else(|| src.kind.default_policy());
            let layout = match &src.qa_layout {
                None => QaLayout::Alternating,
                Some(q) => QaLayout::Regex {
                    question: Regex::new(&q.question).map_err(|e| err(&e))?,
                    answer: Regex::new(&q.answer).map_err(|e| err(&e))?,
                },
            };
            let mut reader =
                load_corpus(&path, src.kind.clone(), src.format).map_err(|e| err(&e))?;
            let raws: Vec<_> = reader
                .by_ref()
                .take(src.limit.unwrap_or(usize::MAX))
                .collect();
            let mut report = SamplingReport::default();
            for raw in &raws {
                let mut rng = derived_rng(self.config.seed, &format!("sample/{}", raw.id));
                docs.extend(sample_document(
                    raw,
                    &policy,
                    &layout,
                    &mut rng,
                    &mut report,
                ));
            }
            summaries.push(CorpusSummary {
                corpus: src.kind.tag().to_string(),
                path: src.path.display().to_string(),
                load: reader.into_report(),
                sampling: report,
            });
        }
        let summary = json!({ "sampled": docs.len(), "corpora": summaries });
        Ok(StageWrite {
            outputs: vec![
                (files::DOCUMENTS, jsonl(&docs)),
                (files::SAMPLE_REPORT, pretty(&summary)),
            ],
            summary,
        })
    }

    fn manual_pool(&self) -> Result<SeedPool> {
        let mut pool = SeedPool::new();
        let Some(p) = &self.config.seeds.manual else {
            return Ok(pool);
        };
        let path = self.resolve(p);
        let seeds: Vec<SeedExample> = read_jsonl(&path).map_err(io_err(&path))?;
        for mut s in seeds {
            s.origin = SeedOrigin::Manual;
            pool.register(s)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        }
        Ok(pool)
    }

    fn expanded(pool: &SeedPool, view: SeedView) -> Vec<StoredSeed> {
        pool.seeds()
            .iter()
            .filter(|s| s.origin == SeedOrigin::ModelExpanded && s.view == view)
            .cloned()
            .collect()
    }

    fn stage_seed_expand(&self) -> Result<StageWrite> {
        let mut pool = self.manual_pool()?;
        if self.config.seeds.manual.is_none() {
            return Err(PipelineError::Config(
                "seed-expand needs seeds.manual".into(),
            ));
        }
        let mut docs: Vec<Document> = self.read(files::DOCUMENTS)?;
        if let Some(n) = self.config.seeds.expand_per_corpus {
            let mut per: HashMap<String, usize> = HashMap::new();
            docs.retain(|d| {
                let c = per.entry(d.corpus.tag().to_string()).or_insert(0);
                *c += 1;
                *c <= n
            });
        }
        let settings = ExpansionSettings {
            k: self.config.seeds.k,
            seed: self.config.seed,
            params: self.config.generation.clone(),
            template: self.generation_template()?,
        };
        let outcome =
            expand_document_view(&mut pool, &docs, &self.gateway(Role::Teacher)?, &settings);
        let seeds = Self::expanded(&pool, SeedView::DocumentView);
        let summary = serde_json::to_value(&outcome.report).expect("report serializes");
        Ok(StageWrite {
            outputs: vec![(files::SEEDS_DOCUMENT_VIEW, jsonl(&seeds))],
            summary,
        })
    }

    fn stage_seed_invert(&self) -> Result<StageWrite> {
        let Some(tasks_path) = &self.config.seeds.tasks else {
            return Err(PipelineError::Config(
                "seed-invert needs seeds.tasks".into(),
            ));
        };
        let mut pool = self.manual_pool()?;
        let path = self.resolve(tasks_path);
        let mut tasks: Vec<Task> = read_jsonl(&path).map_err(io_err(&path))?;
        if let Some(n) = self.config.seeds.invert_sample {
            let mut rng = derived_rng(self.config.seed, "invert-sample");
            let mut picked = (0..tasks.len()).choose_multiple(&mut rng, n);
            picked.sort_unstable();
            tasks = picked.into_iter().map(|i| tasks[i].clone()).collect();
        }
        let settings = InversionSettings {
            k: self.config.seeds.inversion_k,
            seed: self.config.seed,
            inversions_per_task: self.config.seeds.inversions_per_task,
            params: self.config.generation.clone(),
            template: self.inversion_template()?,
            corpus: self.config.seeds.inversion_corpus.clone(),
        };
        let outcome = invert_tasks(&tasks, &mut pool, &self.gateway(Role::Teacher)?, &settings)
            .map_err(|e| Self::stage_err(Stage::SeedInvert)(&e))?;
        let seeds = Self::expanded(&pool, SeedView::TaskView);
        let summary = serde_json::to_value(&outcome.report).expect("report serializes");
        Ok(StageWrite {
            outputs: vec![(files::SEEDS_TASK_VIEW, jsonl(&seeds))],
            summary,
        })
    }

    fn stage_build_meta(&self) -> Result<StageWrite> {
        let docs: Vec<Document> = self.read(files::DOCUMENTS)?;
        let manual = self.manual_pool()?;
        let mut candidates: Vec<StoredSeed> = manual.seeds().to_vec();
        candidates.extend(self.read::<StoredSeed>(files::SEEDS_DOCUMENT_VIEW)?);
        if self.producer(files::SEEDS_TASK_VIEW).is_some() {
            candidates.extend(self.read::<StoredSeed>(files::SEEDS_TASK_VIEW)?);
        }
        let template = self.generation_template()?;
        let k = self.config.seeds.meta_k;

        #[derive(Serialize)]
        struct PromptAudit<'a> {
            document_id: &'a str,
            demo_ids: Vec<String>,
        }
        let mut jobs = Vec::new();
        let mut audits = Vec::new();
        let mut shortfalls = Vec::new();
        for doc in &docs {
            // document-view seeds from the same corpus, task-view seeds from anywhere
            let eligible: Vec<&StoredSeed> = candidates
                .iter()
                .filter(|s| s.view == SeedView::TaskView || s.corpus == doc.corpus)
                .collect();
            if eligible.len() < k || k == 0 {
                shortfalls.push(
                    json!({ "document_id": doc.id, "eligible": eligible.len(), "needed": k }),
                );
                continue;
            }
            let mut rng = derived_rng(self.config.seed, &format!("build-meta/{}", doc.id));
            let mut demos: Vec<&StoredSeed> =
                eligible.choose_multiple(&mut rng, k).copied().collect();
            demos.shuffle(&mut rng);
            let examples: Vec<SeedExample> = demos.iter().map(|s| s.example()).collect();
            let prompt = assemble_generation_prompt_with(&template, doc, &examples)
                .map_err(|e| Self::stage_err(Stage::BuildMeta)(&e))?;
            audits.push(PromptAudit {
                document_id: &doc.id,
                demo_ids: demos.iter().map(|s| s.id.clone()).collect(),
            });
            jobs.push((doc.clone(), prompt.text));
        }
        let run = forge::generate_batch_with_prompts(
            &jobs,
            &self.gateway(Role::Teacher)?,
            &self.config.generation,
            &self.timestamp(),
        );
        let summary = json!({ "generation": run.report, "shortfalls": shortfalls });
        Ok(StageWrite {
            outputs: vec![
                (files::GENERATED, jsonl(&run.records)),
                (files::META_PROMPTS, jsonl(&audits)),
            ],
            summary,
        })
    }

    fn stage_generate(&self) -> Result<StageWrite> {
        let docs: Vec<Document> = self.read(files::DOCUMENTS)?;
        let run = forge::generate_batch(
            &docs,
            &self.config.meta,
            &self.gateway(Role::Generator)?,
            &self.config.generation,
            &self.timestamp(),
        );
        let summary = json!({ "generation": run.report, "meta_instruction_overridden": self.config.meta.is_overridden() });
        Ok(StageWrite {
            outputs: vec![(files::GENERATED, jsonl(&run.records))],
            summary,
        })
    }

    fn stage_filter(&self) -> Result<StageWrite> {
        let records: Vec<TaskRecord> = self.read(files::GENERATED)?;
        let filter = QualityFilter::new(self.config.filter.clone())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let toggles = &self.config.stages;
        let stages = FilterStages {
            overlap: toggles.overlap,
            answerability: toggles.answerability,
            consistency: toggles.consistency,
        };
        let needs_model = stages.answerability || stages.consistency;
        let gw = if needs_model {
            Some(self.gateway(Role::Answerer)?)
        } else {
            None
        };
        enum Out {
            Pass(TaskRecord),
            Reject(Negative),
            Parked(Negative),
        }
        let outs: Vec<Out> = records
            .into_par_iter()
            .map(|mut r| {
                if let Some(e) = &r.parse_error {
                    return Out::Reject(Negative {
                        reason: format!("parse_failed:{}", e.code()),
                        record: r,
                    });
                }
                let outcome = match &gw {
                    Some(gw) => filter.apply(&mut r, gw, stages),
                    None => {
                        let mock = Gateway::mock(crate::gateway::MockBackend::new("unused"));
                        filter.apply(&mut r, &mock, stages)
                    }
                };
                match outcome {
                    FilterOutcome::Pass => Out::Pass(r),
                    FilterOutcome::Reject(d) => Out::Reject(Negative {
                        reason: decision_reason(d).into(),
                        record: r,
                    }),
                    FilterOutcome::Parked(e) => Out::Parked(Negative {
                        reason: e.to_string(),
                        record: r,
                    }),
                }
            })
            .collect();
        let (mut pass, mut rejects, mut parked) = (Vec::new(), Vec::new(), Vec::new());
        let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
        for o in outs {
            match o {
                Out::Pass(r) => pass.push(r),
                Out::Reject(n) => {
                    let key = n.reason.split(':').next().unwrap_or_default().to_string();
                    *reasons.entry(key).or_insert(0) += 1;
                    rejects.push(n);
                }
                Out::Parked(n) => parked.push(n),
            }
        }
        let summary = json!({
            "theta": self.config.filter.theta,
            "consistency_theta": filter.consistency_theta(),
            "passed": pass.len(),
            "rejected": reasons,
            "parked": parked.len(),
        });
        Ok(StageWrite {
            outputs: vec![
                (files::FILTERED, jsonl(&pass)),
                (files::REJECTS, jsonl(&rejects)),
                (files::PARKED, jsonl(&parked)),
            ],
            summary,
        })
    }

    fn stage_gate(&self) -> Result<StageWrite> {
        let source = if self.producer(files::FILTERED).is_some() {
            files::FILTERED
        } else {
            files::GENERATED
        };
        let records: Vec<TaskRecord> = self
            .read::<TaskRecord>(source)?
            .into_iter()
            .filter(|r| r.status == RecordStatus::Parsed)
            .collect();
        let (mut valid, mut invalid, mut parked) = (Vec::new(), Vec::new(), Vec::new());
        let mut anomalies = 0;
        if self.config.stages.gate {
            let gw = self.gateway(Role::Discriminator)?;
            let results: Vec<(TaskRecord, Result<Verdict, GatewayError>)> = records
                .into_par_iter()
                .map(|mut r| {
                    let v = forge::apply_gate(&mut r, &self.config.meta, &gw);
                    (r, v)
                })
                .collect();
            for (r, v) in results {
                anomalies += r.gate.as_ref().is_some_and(|g| g.anomaly) as usize;
                match v {
                    Ok(Verdict::Valid) => valid.push(r),
                    Ok(Verdict::Invalid) => invalid.push(r),
                    Err(e) => parked.push(Negative {
                        reason: e.to_string(),
                        record: r,
                    }),
                }
            }
        } else {
            valid = records;
        }
        let (kept, dropped) = if self.config.stages.dedupe {
            dedupe(valid)
        } else {
            (valid, Vec::new())
        };
        let retained: Vec<TaskRecord> = kept
            .into_iter()
            .map(|mut r| {
                r.advance(RecordStatus::Retained)
                    .expect("parsed record can be retained");
                r
            })
            .collect();
        let duplicates: Vec<Negative> = dropped
            .into_iter()
            .map(|mut r| {
                r.advance(RecordStatus::Filtered)
                    .expect("parsed record can be filtered");
                Negative {
                    reason: "duplicate".into(),
                    record: r,
                }
            })
            .collect();
        let summary = json!({
            "gate_enabled": self.config.stages.gate,
            "dedupe_enabled": self.config.stages.dedupe,
            "retained": retained.len(),
            "gated_invalid": invalid.len(),
            "anomalies": anomalies,
            "duplicates": duplicates.len(),
            "parked": parked.len(),
        });
        Ok(StageWrite {
            outputs: vec![
                (files::RETAINED, jsonl(&retained)),
                (files::GATED_INVALID, jsonl(&invalid)),
                (files::DUPLICATES, jsonl(&duplicates)),
                (files::GATE_PARKED, jsonl(&parked)),
            ],
            summary,
        })
    }

    fn stage_stats(&self) -> Result<StageWrite> {
        let err = Self::stage_err(Stage::Stats);
        let retained: Vec<TaskRecord> = self.read(files::RETAINED)?;
        let by_corpus = length_stats(&retained, GroupBy::Corpus).map_err(|e| err(&e))?;
        let all = length_stats(&retained, GroupBy::All).map_err(|e| err(&e))?;
        let mut combined = by_corpus.clone();
        combined.extend(all.clone());
        let report = json!({
            "unit": "characters",
            "std": "population",
            "by_corpus": by_corpus,
            "all": all.get(crate::analytics::ALL_GROUP).copied().unwrap_or_default(),
        });
        let text = render_length_table(&combined);
        Ok(StageWrite {
            outputs: vec![
                (files::STATS_JSON, pretty(&report)),
                (files::STATS_TXT, text.into_bytes()),
            ],
            summary: json!({ "records": retained.len() }),
        })
    }

    fn stage_diversity(&self) -> Result<StageWrite> {
        let retained: Vec<TaskRecord> = self.read(files::RETAINED)?;
        let instructions: Vec<&str> = retained
            .iter()
            .filter_map(|r| r.task.as_ref())
            .map(|t| t.instruction.as_str())
            .collect();
        let profile = verb_noun_profile(&instructions, self.analyzer().as_ref())
            .map_err(|e| Self::stage_err(Stage::Diversity)(&e))?;
        let summary = json!({ "instructions": instructions.len(), "pairs": profile.pairs.len(), "unparsed": profile.unparsed_count });
        Ok(StageWrite {
            outputs: vec![(files::DIVERSITY, pretty(&profile))],
            summary,
        })
    }

    fn stage_relevance(&self) -> Result<StageWrite> {
        let err = Self::stage_err(Stage::Relevance);
        let retained: Vec<TaskRecord> = self.read(files::RETAINED)?;
        let literal =
            literal_relevance(&retained, GroupBy::Corpus, &WordTokenizer).map_err(|e| err(&e))?;
        let semantic = if self.config.analytics.semantic {
            let gw = self.gateway(Role::Embedder)?;
            Some(
                semantic_relevance(
                    &retained,
                    &gw,
                    GroupBy::Corpus,
                    self.config.analytics.semantic_mode,
                    &WordTokenizer,
                )
                .map_err(|e| err(&e))?,
            )
        } else {
            None
        };
        let report = RelevanceReport {
            tokenizer: WordTokenizer.name().to_string(),
            literal,
            semantic,
        };
        let summary = json!({ "groups": report.literal.len() });
        Ok(StageWrite {
            outputs: vec![
                (files::RELEVANCE_JSON, pretty(&report)),
                (files::RELEVANCE_TXT, report.render().into_bytes()),
            ],
            summary,
        })
    }

    fn stage_export_sft(&self) -> Result<StageWrite> {
        let retained: Vec<TaskRecord> = self.read(files::RETAINED)?;
        let mut examples = Vec::with_capacity(retained.len());
        for r in &retained {
            if r.status != RecordStatus::Retained {
                return Err(PipelineError::Stage {
                    stage: Stage::ExportSft,
                    message: format!("record {} is not retained", r.id),
                });
            }
            examples.extend(forge::sft_example(r, &self.config.meta));
        }
        let summary = json!({ "written": examples.len() });
        Ok(StageWrite {
            outputs: vec![(files::SFT, jsonl(&examples))],
            summary,
        })
    }

    fn stage_export_disc(&self) -> Result<StageWrite> {
        let retained: Vec<TaskRecord> = self.read(files::RETAINED)?;
        let mut negatives: Vec<Negative> = self
            .read::<Negative>(files::REJECTS)?
            .into_iter()
            .filter(|n| n.record.status == RecordStatus::Filtered)
            .collect();
        let mut review_rejected = std::collections::HashSet::new();
        if let Some(p) = &self.config.export.review_judgments {
            let path = self.resolve(p);
            if path.exists() {
                let judgments: Vec<Judgment> = read_jsonl(&path).map_err(io_err(&path))?;
                for n in export_review_negatives(&judgments, &retained) {
                    review_rejected.insert(n.record.id.clone());
                    negatives.push(n);
                }
            }
        }
        let positives: Vec<TaskRecord> = retained
            .into_iter()
            .filter(|r| !review_rejected.contains(&r.id))
            .collect();
        // emit into a scratch dir, then hand the bytes to the atomic commit
        let scratch = tempfile_dir(&self.dir)?;
        let out = scratch.join("discriminator.jsonl");
        let report =
            forge::emit_discriminator_dataset(&positives, &negatives, &self.config.meta, &out)
                .map_err(|e| Self::stage_err(Stage::ExportDisc)(&e))?;
        let read = |p: &Path| std::fs::read(p).map_err(io_err(p));
        let disc = read(&out)?;
        let audit = read(&forge::audit_path(&out))?;
        let _ = std::fs::remove_dir_all(&scratch);
        for w in &report.warnings {
            log::warn!("export-disc: {w}");
        }
        let summary = serde_json::to_value(&report).expect("report serializes");
        Ok(StageWrite {
            outputs: vec![
                (files::DISCRIMINATOR, disc),
                (files::DISCRIMINATOR_AUDIT, audit),
            ],
            summary,
        })
    }

    /// Runs `stages` in order, stopping at the first failure.
    pub fn run_all(&mut self, stages: &[Stage]) -> Result<Vec<StageOutcome>> {
        stages.iter().map(|s| self.run_stage(*s)).collect()
    }
}

/// The usual end-to-end order for building a meta-training set.
pub const META_SEQUENCE: [Stage; 11] = [
    Stage::Sample,
    Stage::SeedExpand,
    Stage::SeedInvert,
    Stage::BuildMeta,
    Stage::Filter,
    Stage::Gate,
    Stage::Stats,
    Stage::Diversity,
    Stage::Relevance,
    Stage::ExportSft,
    Stage::ExportDisc,
];

const EXTERNAL: &str = "external:";

fn tempfile_dir(run_dir: &Path) -> Result<PathBuf> {
    let dir = run_dir.join(format!(".scratch-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    to_jsonl(items).expect("in-memory serialization")
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    bytes
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
