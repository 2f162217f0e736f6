//! Dual-view seed pools and few-shot prompt assembly.
//!
//! Document-view seeds pair real documents with tasks written for them and
//! teach the generator the style of each corpus. Task-view seeds start from
//! existing instruction data and get a plausible source document by asking
//! the model to invert the task.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusKind, Document};
use crate::gateway::{DecodingParams, Gateway};
use crate::task::{parse_task, Task};
use crate::util::{derived_rng, sha256_hex, short_hash};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedView {
    DocumentView,
    TaskView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedOrigin {
    Manual,
    ModelExpanded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedExample {
    pub document: Document,
    pub task: Task,
    pub view: SeedView,
    pub origin: SeedOrigin,
}

/// Persisted form of a pool entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredSeed {
    pub id: String,
    pub view: SeedView,
    pub origin: SeedOrigin,
    pub corpus: CorpusKind,
    pub document: Document,
    pub task: Task,
}

impl StoredSeed {
    pub fn example(&self) -> SeedExample {
        SeedExample {
            document: self.document.clone(),
            task: self.task.clone(),
            view: self.view,
            origin: self.origin,
        }
    }
}

#[derive(Debug, Error)]
pub enum SeedError {
    #[error(
        "seed for document {document_id} with instruction {instruction:?} is already registered"
    )]
    Duplicate {
        document_id: String,
        instruction: String,
    },
    #[error("invalid seed task: {0}")]
    InvalidTask(#[from] crate::task::TaskError),
    #[error("need {needed} demonstrations but only {available} seeds are eligible")]
    Shortfall { needed: usize, available: usize },
    #[error("at least one demonstration is required")]
    NoDemonstrations,
    #[error("template is missing slot {0}")]
    TemplateSlot(&'static str),
    #[error("seed file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Which seeds may serve as demonstrations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeedFilter {
    pub corpus: Option<CorpusKind>,
    pub view: Option<SeedView>,
    pub origin: Option<SeedOrigin>,
}

impl SeedFilter {
    fn admits(&self, seed: &StoredSeed) -> bool {
        self.corpus.as_ref().is_none_or(|c| *c == seed.corpus)
            && self.view.is_none_or(|v| v == seed.view)
            && self.origin.is_none_or(|o| o == seed.origin)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SeedPool {
    seeds: Vec<StoredSeed>,
    keys: HashSet<(String, String)>,
}

/// Stable id of a seed: a hash of its document id and instruction.
pub fn seed_id(document_id: &str, instruction: &str) -> String {
    format!(
        "seed-{}",
        short_hash(format!("{document_id}\u{1f}{instruction}"))
    )
}

impl SeedPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn seeds(&self) -> &[StoredSeed] {
        &self.seeds
    }

    pub fn get(&self, id: &str) -> Option<&StoredSeed> {
        self.seeds.iter().find(|s| s.id == id)
    }

    /// Adds a seed and returns its id.
    pub fn register(&mut self, example: SeedExample) -> Result<String, SeedError> {
        example.task.validate()?;
        let key = (
            example.document.id.clone(),
            example.task.instruction.clone(),
        );
        if self.keys.contains(&key) {
            return Err(SeedError::Duplicate {
                document_id: key.0,
                instruction: key.1,
            });
        }
        let id = seed_id(&key.0, &key.1);
        self.keys.insert(key);
        self.seeds.push(StoredSeed {
            id: id.clone(),
            view: example.view,
            origin: example.origin,
            corpus: example.document.corpus.clone(),
            document: example.document,
            task: example.task,
        });
        Ok(id)
    }

    pub fn count(&self, corpus: &CorpusKind, view: SeedView) -> usize {
        self.seeds
            .iter()
            .filter(|s| &s.corpus == corpus && s.view == view)
            .count()
    }

    /// Counts per (corpus, view, origin).
    pub fn counts(&self) -> BTreeMap<(String, SeedView, SeedOrigin), usize> {
        let mut out = BTreeMap::new();
        for s in &self.seeds {
            *out.entry((s.corpus.tag().to_string(), s.view, s.origin))
                .or_insert(0) += 1;
        }
        out
    }

    pub fn eligible(&self, filter: &SeedFilter) -> Vec<&StoredSeed> {
        self.seeds.iter().filter(|s| filter.admits(s)).collect()
    }

    pub fn load(path: &Path) -> Result<Self, SeedError> {
        let stored: Vec<StoredSeed> =
            crate::util::read_jsonl(path).map_err(|source| SeedError::Io {
                path: path.display().to_string(),
                source,
            })?;
        let mut pool = SeedPool::new();
        for s in stored {
            let key = (s.document.id.clone(), s.task.instruction.clone());
            if !pool.keys.insert(key.clone()) {
                return Err(SeedError::Duplicate {
                    document_id: key.0,
                    instruction: key.1,
                });
            }
            pool.seeds.push(s);
        }
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<(), SeedError> {
        crate::util::write_jsonl_atomic(path, &self.seeds)
            .map(|_| ())
            .map_err(|source| SeedError::Io {
                path: path.display().to_string(),
                source,
            })
    }

    /// Merges another pool, skipping entries already present.
    pub fn extend_from(&mut self, other: &SeedPool) {
        for s in &other.seeds {
            let key = (s.document.id.clone(), s.task.instruction.clone());
            if self.keys.insert(key) {
                self.seeds.push(s.clone());
            }
        }
    }
}

/// Draws `k` distinct eligible seeds uniformly without replacement, in random
/// order.
pub fn select_demonstrations<R: Rng + ?Sized>(
    pool: &SeedPool,
    k: usize,
    filter: &SeedFilter,
    rng: &mut R,
) -> Result<Vec<SeedExample>, SeedError> {
    let eligible = pool.eligible(filter);
    if eligible.len() < k {
        return Err(SeedError::Shortfall {
            needed: k,
            available: eligible.len(),
        });
    }
    let mut picked: Vec<&StoredSeed> = eligible.choose_multiple(rng, k).copied().collect();
    picked.shuffle(rng);
    Ok(picked.into_iter().map(StoredSeed::example).collect())
}

/// Generation instructions shown before the demonstrations.
pub const GENERATION_TEMPLATE: &str = "For the given text, design a task.
Each task contains three fields, instruction, input, and output. instruction defines a the task in natural language.
Instruction is a complete definition of how an input text (e.g., a sentence or a document) is expected to be mapped to an output text.
Requiring instruction, input and output are derived from text wherever possible.
Input can be empty to indicate that the task has no input.
Instruction must be in imperative sentence formal.
Here are demonstrations where your response should be as different from them as possible.
{demonstrations}
#text#: \"{text}\"";

/// Asks for a plausible human-written source of a given task.
pub const INVERSION_TEMPLATE: &str = "For the given task, write a human-written text from which the task could have been designed.
The text should read like a real document (for example an encyclopedia entry, a forum post, a paper excerpt or source code) and contain the information that the task's input and output are derived from.
Respond with the text only.
Here are demonstrations.
{demonstrations}
{task}
#text#:";

pub const TEXT_MARKER: &str = "#text#:";

/// A prompt template with named `{slot}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    /// Checks that each of `slots` appears exactly once.
    pub fn new(text: impl Into<String>, slots: &[&'static str]) -> Result<Self, SeedError> {
        let text = text.into();
        for slot in slots {
            if text.matches(&format!("{{{slot}}}")).count() != 1 {
                return Err(SeedError::TemplateSlot(slot));
            }
        }
        Ok(PromptTemplate { text })
    }

    pub fn generation() -> Self {
        PromptTemplate {
            text: GENERATION_TEMPLATE.to_string(),
        }
    }

    pub fn inversion() -> Self {
        PromptTemplate {
            text: INVERSION_TEMPLATE.to_string(),
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.text)
    }

    /// Fills slots in a single pass so slot-like text inside values is left
    /// alone.
    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let filled = after.find('}').and_then(|close| {
                let name = &after[..close];
                values
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| (close, *v))
            });
            match filled {
                Some((close, v)) => {
                    out.push_str(v);
                    rest = &after[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// Prompt sent to the teacher model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub demo_ids: Vec<String>,
    pub target_doc_id: String,
}

fn render_generation_demo(index: usize, demo: &SeedExample) -> String {
    format!(
        "Demonstration {}:\nText: \"{}\"\n{}\n",
        index + 1,
        demo.document.text,
        demo.task.serialize()
    )
}

/// Builds the few-shot generation prompt for `doc`.
pub fn assemble_generation_prompt(
    doc: &Document,
    demos: &[SeedExample],
) -> Result<PromptText, SeedError> {
    assemble_generation_prompt_with(&PromptTemplate::generation(), doc, demos)
}

pub fn assemble_generation_prompt_with(
    template: &PromptTemplate,
    doc: &Document,
    demos: &[SeedExample],
) -> Result<PromptText, SeedError> {
    if demos.is_empty() {
        return Err(SeedError::NoDemonstrations);
    }
    let rendered: String = demos
        .iter()
        .enumerate()
        .map(|(i, d)| render_generation_demo(i, d))
        .collect();
    Ok(PromptText {
        text: template.render(&[("demonstrations", rendered.trim_end()), ("text", &doc.text)]),
        demo_ids: demos
            .iter()
            .map(|d| seed_id(&d.document.id, &d.task.instruction))
            .collect(),
        target_doc_id: doc.id.clone(),
    })
}

/// Recovers the target document text from a rendered generation prompt.
pub fn extract_target_text(prompt: &str) -> Option<&str> {
    let marker = format!("\n{TEXT_MARKER} \"");
    let start = prompt.rfind(&marker)? + marker.len();
    prompt[start..].strip_suffix('"')
}

fn render_inversion_demo(index: usize, demo: &SeedExample) -> String {
    format!(
        "Demonstration {}:\n{}\nText: \"{}\"\n",
        index + 1,
        demo.task.serialize(),
        demo.document.text
    )
}

pub fn assemble_inversion_prompt(task: &Task, demos: &[SeedExample]) -> Result<String, SeedError> {
    assemble_inversion_prompt_with(&PromptTemplate::inversion(), task, demos)
}

pub fn assemble_inversion_prompt_with(
    template: &PromptTemplate,
    task: &Task,
    demos: &[SeedExample],
) -> Result<String, SeedError> {
    if demos.is_empty() {
        return Err(SeedError::NoDemonstrations);
    }
    let rendered: String = demos
        .iter()
        .enumerate()
        .map(|(i, d)| render_inversion_demo(i, d))
        .collect();
    Ok(template.render(&[
        ("demonstrations", rendered.trim_end()),
        ("task", &task.serialize()),
    ]))
}

/// Reads an inverted document from a completion: an optional leading
/// `#text#:` marker and surrounding quotes are removed.
pub fn parse_inverted_document(completion: &str) -> Option<String> {
    let mut text = completion.trim();
    if let Some(rest) = text.strip_prefix(TEXT_MARKER) {
        text = rest.trim();
    }
    if text.len() >= 2 && text.starts_with('"') && text.ends_with('"') {
        text = text[1..text.len() - 1].trim();
    }
    (!text.is_empty()).then(|| text.to_string())
}

/// Tallies from an expansion or inversion run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub requested: usize,
    pub registered: usize,
    pub parse_failures: usize,
    pub duplicates: usize,
    /// (item id, error) for gateway or demonstration failures.
    pub errors: Vec<(String, String)>,
}

pub struct ExpansionOutcome {
    pub seeds: Vec<SeedExample>,
    pub report: ExpansionReport,
}

#[derive(Debug, Clone)]
pub struct ExpansionSettings {
    pub k: usize,
    pub seed: u64,
    pub params: DecodingParams,
    pub template: PromptTemplate,
}

impl Default for ExpansionSettings {
    fn default() -> Self {
        ExpansionSettings {
            k: 5,
            seed: 0,
            params: DecodingParams::generation(),
            template: PromptTemplate::generation(),
        }
    }
}

enum ItemResult {
    Ok(SeedExample),
    ParseFailed,
    Failed(String),
}

/// Document-view expansion: each document gets `k` manual document-view
/// demonstrations from its own corpus; parsed completions become
/// model-expanded document-view seeds and are registered in `pool`.
pub fn expand_document_view(
    pool: &mut SeedPool,
    documents: &[Document],
    gateway: &Gateway,
    settings: &ExpansionSettings,
) -> ExpansionOutcome {
    let snapshot = &*pool;
    let results: Vec<(String, ItemResult)> = documents
        .par_iter()
        .map(|doc| {
            let filter = SeedFilter {
                corpus: Some(doc.corpus.clone()),
                view: Some(SeedView::DocumentView),
                origin: Some(SeedOrigin::Manual),
            };
            let mut rng = derived_rng(settings.seed, &format!("expand/{}", doc.id));
            let result = select_demonstrations(snapshot, settings.k, &filter, &mut rng)
                .and_then(|demos| assemble_generation_prompt_with(&settings.template, doc, &demos))
                .map_err(|e| e.to_string())
                .and_then(|prompt| {
                    gateway
                        .complete(&prompt.text, &settings.params)
                        .map_err(|e| e.to_string())
                });
            let item = match result {
                Err(e) => ItemResult::Failed(e),
                Ok(completion) => match parse_task(&completion) {
                    Ok(task) => ItemResult::Ok(SeedExample {
                        document: doc.clone(),
                        task,
                        view: SeedView::DocumentView,
                        origin: SeedOrigin::ModelExpanded,
                    }),
                    Err(_) => ItemResult::ParseFailed,
                },
            };
            (doc.id.clone(), item)
        })
        .collect();
    collect_into_pool(pool, documents.len(), results)
}

fn collect_into_pool(
    pool: &mut SeedPool,
    requested: usize,
    results: Vec<(String, ItemResult)>,
) -> ExpansionOutcome {
    let mut report = ExpansionReport {
        requested,
        ..ExpansionReport::default()
    };
    let mut seeds = Vec::new();
    for (id, item) in results {
        match item {
            ItemResult::Ok(example) => match pool.register(example.clone()) {
                Ok(_) => {
                    report.registered += 1;
                    seeds.push(example);
                }
                Err(SeedError::Duplicate { .. }) => report.duplicates += 1,
                Err(e) => report.errors.push((id, e.to_string())),
            },
            ItemResult::ParseFailed => report.parse_failures += 1,
            ItemResult::Failed(e) => report.errors.push((id, e)),
        }
    }
    ExpansionOutcome { seeds, report }
}

#[derive(Debug, Clone)]
pub struct InversionSettings {
    pub k: usize,
    pub seed: u64,
    pub inversions_per_task: usize,
    pub params: DecodingParams,
    pub template: PromptTemplate,
    /// Corpus tag given to generated documents.
    pub corpus: CorpusKind,
}

impl Default for InversionSettings {
    fn default() -> Self {
        InversionSettings {
            k: 5,
            seed: 0,
            inversions_per_task: 1,
            params: DecodingParams::generation(),
            template: PromptTemplate::inversion(),
            corpus: CorpusKind::Custom("alpaca".into()),
        }
    }
}

/// Task-view inversion: for each task, asks the model for a plausible source
/// document using manual task-view demonstrations, and registers the
/// resulting (document, task) pairs as model-expanded task-view seeds.
pub fn invert_tasks(
    tasks: &[Task],
    pool: &mut SeedPool,
    gateway: &Gateway,
    settings: &InversionSettings,
) -> Result<ExpansionOutcome, SeedError> {
    for t in tasks {
        t.validate()?;
    }
    let filter = SeedFilter {
        corpus: None,
        view: Some(SeedView::TaskView),
        origin: Some(SeedOrigin::Manual),
    };
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|t| (0..settings.inversions_per_task).map(move |r| (t, r)))
        .collect();
    let snapshot = &*pool;
    let results: Vec<(String, ItemResult)> = jobs
        .par_iter()
        .map(|&(ti, rep)| {
            let task = &tasks[ti];
            let key = format!("invert/{}/{rep}", sha256_hex(task.serialize()));
            let mut rng = derived_rng(settings.seed, &key);
            let result = select_demonstrations(snapshot, settings.k, &filter, &mut rng)
                .and_then(|demos| assemble_inversion_prompt_with(&settings.template, task, &demos))
                .map_err(|e| e.to_string())
                .and_then(|prompt| {
                    gateway
                        .complete(&prompt, &settings.params)
                        .map_err(|e| e.to_string())
                });
            let item = match result {
                Err(e) => ItemResult::Failed(e),
                Ok(completion) => match parse_inverted_document(&completion) {
                    Some(text) => {
                        let id = format!(
                            "{}/inverted-{}",
                            settings.corpus.tag(),
                            crate::util::short_hash(&text)
                        );
                        ItemResult::Ok(SeedExample {
                            document: Document::standalone(id, settings.corpus.clone(), text),
                            task: task.clone(),
                            view: SeedView::TaskView,
                            origin: SeedOrigin::ModelExpanded,
                        })
                    }
                    None => ItemResult::ParseFailed,
                },
            };
            (key, item)
        })
        .collect();
    Ok(collect_into_pool(pool, jobs.len(), results))
}
