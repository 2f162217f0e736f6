//! Post-generation quality filtering.
//!
//! Three checks run in order of cost: literal overlap between the task fields
//! and the source document, an answerability probe (the model must be able to
//! answer instruction + input without the document), and a consistency check
//! (answering again with the document must reproduce the task output).

use std::collections::BTreeSet;
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::Document;
use crate::gateway::{DecodingParams, Gateway, GatewayError};
use crate::record::{RecordStatus, TaskRecord};
use crate::task::Task;

/// Distinct normalized tokens of a text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSet(BTreeSet<String>);

impl TokenSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn intersection_len(&self, other: &TokenSet) -> usize {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.0.iter().filter(|t| large.0.contains(*t)).count()
    }
}

impl FromIterator<String> for TokenSet {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        TokenSet(iter.into_iter().collect())
    }
}

pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;

    /// Token sequence in text order, duplicates kept.
    fn tokens(&self, text: &str) -> Vec<String>;

    fn token_set(&self, text: &str) -> TokenSet {
        self.tokens(text).into_iter().collect()
    }
}

/// Case-folded words split at whitespace and punctuation.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordTokenizer;

impl Tokenizer for WordTokenizer {
    fn name(&self) -> &str {
        "word-casefold"
    }

    fn tokens(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|s| !s.is_empty())
            .map(str::to_lowercase)
            .collect()
    }
}

pub fn tokenize(text: &str) -> TokenSet {
    WordTokenizer.token_set(text)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FilterError {
    #[error("field has no tokens; overlap is undefined")]
    EmptyField,
}

/// `|t(doc) ∩ t(field)| / |t(field)|`, undefined for token-free fields.
pub fn overlap_of_sets(doc: &TokenSet, field: &TokenSet) -> Result<f64, FilterError> {
    if field.is_empty() {
        return Err(FilterError::EmptyField);
    }
    Ok(doc.intersection_len(field) as f64 / field.len() as f64)
}

/// Fraction of the field's distinct tokens that occur in the document.
pub fn overlap_score(doc_text: &str, field_text: &str) -> Result<f64, FilterError> {
    overlap_of_sets(&tokenize(doc_text), &tokenize(field_text))
}

/// Overlap of the input and output fields with the source document.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskScore {
    /// `None` when the input has no tokens and is skipped.
    pub input: Option<f64>,
    pub output: f64,
}

impl TaskScore {
    /// Minimum over the scored fields.
    pub fn score(&self) -> f64 {
        match self.input {
            Some(i) => i.min(self.output),
            None => self.output,
        }
    }
}

pub fn task_score_with(tokenizer: &dyn Tokenizer, doc: &Document, task: &Task) -> TaskScore {
    let doc_tokens = tokenizer.token_set(&doc.text);
    let input = overlap_of_sets(&doc_tokens, &tokenizer.token_set(&task.input)).ok();
    // an output made only of punctuation has no grounding evidence at all
    let output = overlap_of_sets(&doc_tokens, &tokenizer.token_set(&task.output)).unwrap_or(0.0);
    TaskScore { input, output }
}

/// `min(σ̃(D, I), σ̃(D, O))`, skipping the input term when the input is empty.
pub fn task_score(doc: &Document, task: &Task) -> f64 {
    task_score_with(&WordTokenizer, doc, task).score()
}

/// A model-backed check that may not have been run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Probe<T> {
    Ran(T),
    NotRun,
}

impl<T: Serialize> Serialize for Probe<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Probe::Ran(v) => v.serialize(s),
            Probe::NotRun => s.serialize_str("not-run"),
        }
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Probe<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr<T> {
            Value(T),
            Tag(String),
        }
        match Repr::<T>::deserialize(d)? {
            Repr::Value(v) => Ok(Probe::Ran(v)),
            Repr::Tag(t) if t == "not-run" => Ok(Probe::NotRun),
            Repr::Tag(t) => Err(serde::de::Error::custom(format!(
                "unexpected probe value {t:?}"
            ))),
        }
    }
}

/// Overlap of the input field, or a marker that it was skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputOverlap {
    Score(f64),
    SkippedEmptyInput,
}

impl Serialize for InputOverlap {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            InputOverlap::Score(v) => s.serialize_f64(*v),
            InputOverlap::SkippedEmptyInput => s.serialize_str("skipped-empty-input"),
        }
    }
}

impl<'de> Deserialize<'de> for InputOverlap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Probe::<f64>::deserialize(d) {
            Ok(Probe::Ran(v)) => Ok(InputOverlap::Score(v)),
            _ => Ok(InputOverlap::SkippedEmptyInput),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterDecision {
    Pass,
    RejectOverlap,
    RejectUnanswerable,
    RejectInconsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTrace {
    pub overlap_input: InputOverlap,
    pub overlap_output: f64,
    pub task_score: f64,
    pub answerable: Probe<bool>,
    pub consistency_score: Probe<f64>,
    pub theta: f64,
    pub consistency_theta: f64,
    pub decision: FilterDecision,
}

/// How the consistency reply is compared with the task output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyDirection {
    /// `|t(reply) ∩ t(O)| / |t(O)|`: how much of the output the reply covers.
    #[default]
    ReplyCoversOutput,
    /// `|t(reply) ∩ t(O)| / |t(reply)|`.
    OutputCoversReply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub theta: f64,
    /// Threshold for the consistency check; defaults to `theta`.
    pub consistency_theta: Option<f64>,
    /// Case-insensitive regexes matched at the start of an answer.
    pub refusal_patterns: Vec<String>,
    /// Ask a yes/no judge whether a non-refusing answer completes the task.
    pub judge: bool,
    pub consistency_direction: ConsistencyDirection,
    pub answer_max_tokens: u32,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            theta: 0.5,
            consistency_theta: None,
            refusal_patterns: [
                r"i cannot",
                r"i can'?t",
                r"i(?:'m| am) (?:unable|not able)",
                r"as an ai",
                r"i(?:'m| am) sorry",
                r"sorry, but",
                r"i do(?:n'?t| not) have (?:enough|access|the)",
                r"unable to (?:answer|determine|complete)",
                r"there is no (?:text|input|context|information) provided",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            judge: false,
            consistency_direction: ConsistencyDirection::default(),
            answer_max_tokens: 512,
        }
    }
}

#[derive(Debug, Error)]
pub enum FilterConfigError {
    #[error("theta {0} is outside [0, 1]")]
    Theta(f64),
    #[error("bad refusal pattern {pattern:?}: {source}")]
    Pattern {
        pattern: String,
        source: regex::Error,
    },
}

/// Which checks a filtering pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterStages {
    pub overlap: bool,
    pub answerability: bool,
    pub consistency: bool,
}

impl Default for FilterStages {
    fn default() -> Self {
        FilterStages {
            overlap: true,
            answerability: true,
            consistency: true,
        }
    }
}

/// Result of filtering one record.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterOutcome {
    Pass,
    Reject(FilterDecision),
    /// A model-backed check failed to run; the record waits for a retry.
    Parked(GatewayError),
}

pub const JUDGE_LABELS: [&str; 2] = ["yes", "no"];

pub struct QualityFilter {
    tokenizer: Arc<dyn Tokenizer>,
    config: FilterConfig,
    refusals: Vec<Regex>,
}

impl QualityFilter {
    pub fn new(config: FilterConfig) -> Result<Self, FilterConfigError> {
        Self::with_tokenizer(config, Arc::new(WordTokenizer))
    }

    pub fn with_tokenizer(
        config: FilterConfig,
        tokenizer: Arc<dyn Tokenizer>,
    ) -> Result<Self, FilterConfigError> {
        for t in std::iter::once(config.theta).chain(config.consistency_theta) {
            if !(0.0..=1.0).contains(&t) {
                return Err(FilterConfigError::Theta(t));
            }
        }
        let refusals = config
            .refusal_patterns
            .iter()
            .map(|p| {
                Regex::new(&format!(r"(?i)^\s*(?:{p})")).map_err(|source| {
                    FilterConfigError::Pattern {
                        pattern: p.clone(),
                        source,
                    }
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(QualityFilter {
            tokenizer,
            config,
            refusals,
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn consistency_theta(&self) -> f64 {
        self.config.consistency_theta.unwrap_or(self.config.theta)
    }

    fn base_trace(&self, doc: &Document, task: &Task) -> FilterTrace {
        let score = task_score_with(self.tokenizer.as_ref(), doc, task);
        FilterTrace {
            overlap_input: score
                .input
                .map_or(InputOverlap::SkippedEmptyInput, InputOverlap::Score),
            overlap_output: score.output,
            task_score: score.score(),
            answerable: Probe::NotRun,
            consistency_score: Probe::NotRun,
            theta: self.config.theta,
            consistency_theta: self.consistency_theta(),
            decision: FilterDecision::Pass,
        }
    }

    /// Splits parsed records by `σ ≥ θ`. Rejected records move to
    /// `Filtered`; every record gets a trace.
    pub fn overlap_filter(
        &self,
        records: Vec<TaskRecord>,
        theta: f64,
    ) -> (Vec<TaskRecord>, Vec<TaskRecord>) {
        let mut pass = Vec::new();
        let mut reject = Vec::new();
        for mut record in records {
            let Some(task) = record.task.as_ref() else {
                reject.push(record);
                continue;
            };
            let mut trace = self.base_trace(&record.document, task);
            trace.theta = theta;
            if trace.task_score >= theta {
                record.filter_trace = Some(trace);
                pass.push(record);
            } else {
                trace.decision = FilterDecision::RejectOverlap;
                record.filter_trace = Some(trace);
                let _ = record.advance(RecordStatus::Filtered);
                reject.push(record);
            }
        }
        (pass, reject)
    }

    fn is_refusal(&self, answer: &str) -> bool {
        answer.trim().is_empty() || self.refusals.iter().any(|r| r.is_match(answer))
    }

    /// Asks the model to do the task without the document; refusals and
    /// empty answers (and, in judge mode, a "no" from the judge) mean the
    /// task is not answerable.
    pub fn answerability_check(
        &self,
        task: &Task,
        gateway: &Gateway,
    ) -> Result<bool, GatewayError> {
        let prompt = answerability_prompt(task);
        let params = DecodingParams::deterministic(self.config.answer_max_tokens);
        let answer = gateway.complete(&prompt, &params)?;
        if self.is_refusal(&answer) {
            return Ok(false);
        }
        if !self.config.judge {
            return Ok(true);
        }
        let judge = judge_prompt(&prompt, &answer);
        match gateway.classify(&judge, &JUDGE_LABELS, &DecodingParams::deterministic(8)) {
            Ok(c) => Ok(c.label == "yes"),
            Err(GatewayError::UnrecognizedLabel { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    }

    /// Answers again with the document in context and scores the reply
    /// against the task output. Returns `(score, passed)`.
    pub fn consistency_check(
        &self,
        doc: &Document,
        task: &Task,
        gateway: &Gateway,
    ) -> Result<(f64, bool), GatewayError> {
        let prompt = consistency_prompt(doc, task);
        let params = DecodingParams::deterministic(self.config.answer_max_tokens);
        let reply = gateway.complete(&prompt, &params)?;
        let reply_tokens = self.tokenizer.token_set(&reply);
        let output_tokens = self.tokenizer.token_set(&task.output);
        let score = match self.config.consistency_direction {
            ConsistencyDirection::ReplyCoversOutput => {
                overlap_of_sets(&reply_tokens, &output_tokens)
            }
            ConsistencyDirection::OutputCoversReply => {
                overlap_of_sets(&output_tokens, &reply_tokens)
            }
        }
        .unwrap_or(0.0);
        Ok((score, score >= self.consistency_theta()))
    }

    /// Runs the enabled checks on a parsed record, cheapest first, stopping at
    /// the first rejection. Fills in the record's trace and status.
    pub fn apply(
        &self,
        record: &mut TaskRecord,
        gateway: &Gateway,
        stages: FilterStages,
    ) -> FilterOutcome {
        let Some(task) = record.task.clone() else {
            return FilterOutcome::Reject(FilterDecision::RejectOverlap);
        };
        let mut trace = self.base_trace(&record.document, &task);
        let outcome = self.run_checks(&mut trace, &record.document, &task, gateway, stages);
        if let FilterOutcome::Reject(decision) = outcome {
            trace.decision = decision;
            let _ = record.advance(RecordStatus::Filtered);
        }
        record.filter_trace = Some(trace);
        outcome
    }

    fn run_checks(
        &self,
        trace: &mut FilterTrace,
        doc: &Document,
        task: &Task,
        gateway: &Gateway,
        stages: FilterStages,
    ) -> FilterOutcome {
        if stages.overlap && trace.task_score < self.config.theta {
            return FilterOutcome::Reject(FilterDecision::RejectOverlap);
        }
        if stages.answerability {
            match self.answerability_check(task, gateway) {
                Ok(answerable) => {
                    trace.answerable = Probe::Ran(answerable);
                    if !answerable {
                        return FilterOutcome::Reject(FilterDecision::RejectUnanswerable);
                    }
                }
                Err(e) => return FilterOutcome::Parked(e),
            }
        }
        if stages.consistency {
            match self.consistency_check(doc, task, gateway) {
                Ok((score, passed)) => {
                    trace.consistency_score = Probe::Ran(score);
                    if !passed {
                        return FilterOutcome::Reject(FilterDecision::RejectInconsistent);
                    }
                }
                Err(e) => return FilterOutcome::Parked(e),
            }
        }
        FilterOutcome::Pass
    }
}

/// Instruction followed by the input on a new line.
pub fn answerability_prompt(task: &Task) -> String {
    if task.has_input() {
        format!("{}\n{}", task.instruction, task.input)
    } else {
        task.instruction.clone()
    }
}

pub fn judge_prompt(question: &str, answer: &str) -> String {
    format!(
        "Here is a request and a response to it.\n\nRequest:\n{question}\n\nResponse:\n{answer}\n\n\
         Does the response actually carry out the request? Answer yes or no."
    )
}

/// Instruction, input and the source document.
pub fn consistency_prompt(doc: &Document, task: &Task) -> String {
    let mut prompt = answerability_prompt(task);
    prompt.push_str("\n\n");
    prompt.push_str(&doc.text);
    prompt
}

/// Overlap filter with the default tokenizer.
pub fn overlap_filter(records: Vec<TaskRecord>, theta: f64) -> (Vec<TaskRecord>, Vec<TaskRecord>) {
    QualityFilter::new(FilterConfig::default())
        .expect("default filter config is valid")
        .overlap_filter(records, theta)
}
