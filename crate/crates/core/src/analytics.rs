//! Dataset statistics, instruction diversity and relevance reports.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::process::{Command, Stdio};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{overlap_of_sets, Tokenizer};
use crate::gateway::{Gateway, GatewayError};
use crate::record::TaskRecord;
use crate::task::Task;
use crate::util::char_len;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("record {id} has no parsed task")]
    MissingTask { id: String },
    #[error("external analyzer failed: {0}")]
    Analyzer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    #[default]
    Corpus,
    All,
}

pub const ALL_GROUP: &str = "all";

fn group_key(record: &TaskRecord, group_by: GroupBy) -> String {
    match group_by {
        GroupBy::Corpus => record.document.corpus.tag().to_string(),
        GroupBy::All => ALL_GROUP.to_string(),
    }
}

fn tasks_of(records: &[TaskRecord]) -> Result<Vec<(&TaskRecord, &Task)>, AnalyticsError> {
    records
        .iter()
        .map(|r| {
            r.task
                .as_ref()
                .map(|t| (r, t))
                .ok_or_else(|| AnalyticsError::MissingTask { id: r.id.clone() })
        })
        .collect()
}

/// Count, mean and population standard deviation of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FieldStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

/// Running accumulator (Welford).
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments {
    count: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn stats(&self) -> FieldStats {
        if self.count == 0 {
            return FieldStats::default();
        }
        let std = if self.count == 1 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        };
        FieldStats {
            count: self.count,
            mean: self.mean,
            std,
        }
    }
}

impl FieldStats {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut m = Moments::default();
        values.into_iter().for_each(|x| m.push(x));
        m.stats()
    }

    /// `mean ± std`, both rounded to integers.
    pub fn render(&self) -> String {
        format!("{} ± {}", self.mean.round() as i64, self.std.round() as i64)
    }
}

/// Character-length statistics of one group.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LengthStats {
    pub instruction: FieldStats,
    pub input: FieldStats,
    pub output: FieldStats,
}

impl LengthStats {
    pub fn count(&self) -> usize {
        self.instruction.count
    }

    /// Table cells: `count | instruction | input | output`.
    pub fn render_cells(&self) -> String {
        format!(
            "{} | {} | {} | {}",
            self.count(),
            self.instruction.render(),
            self.input.render(),
            self.output.render()
        )
    }
}

/// Per-group character lengths of each field. Empty inputs count as zero.
pub fn length_stats(
    records: &[TaskRecord],
    group_by: GroupBy,
) -> Result<BTreeMap<String, LengthStats>, AnalyticsError> {
    let mut acc: BTreeMap<String, [Moments; 3]> = BTreeMap::new();
    for (record, task) in tasks_of(records)? {
        let m = acc.entry(group_key(record, group_by)).or_default();
        m[0].push(char_len(&task.instruction) as f64);
        m[1].push(char_len(&task.input) as f64);
        m[2].push(char_len(&task.output) as f64);
    }
    Ok(acc
        .into_iter()
        .map(|(k, [i, n, o])| {
            (
                k,
                LengthStats {
                    instruction: i.stats(),
                    input: n.stats(),
                    output: o.stats(),
                },
            )
        })
        .collect())
}

fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| char_len(h)).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(char_len(cell));
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - char_len(c))))
            .collect();
        padded.join(" | ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(
        &widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("-|-"),
    );
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn render_length_table(stats: &BTreeMap<String, LengthStats>) -> String {
    let rows: Vec<Vec<String>> = stats
        .iter()
        .map(|(g, s)| {
            vec![
                g.clone(),
                s.count().to_string(),
                s.instruction.render(),
                s.input.render(),
                s.output.render(),
            ]
        })
        .collect();
    format!(
        "# lengths in characters, mean ± population std\n{}",
        aligned_table(&["group", "#", "instruction", "input", "output"], &rows)
    )
}

/// Extracts a (root verb, object noun) pair from an instruction.
pub trait SyntacticAnalyzer: Send + Sync {
    fn name(&self) -> &str;

    fn analyze(&self, instruction: &str) -> Option<(String, String)>;

    fn analyze_batch(
        &self,
        instructions: &[&str],
    ) -> Result<Vec<Option<(String, String)>>, AnalyticsError> {
        Ok(instructions.par_iter().map(|i| self.analyze(i)).collect())
    }
}

const IMPERATIVE_VERBS: &[&str] = &[
    "add",
    "analyze",
    "answer",
    "arrange",
    "ask",
    "assess",
    "build",
    "calculate",
    "categorize",
    "change",
    "check",
    "choose",
    "cite",
    "clarify",
    "classify",
    "combine",
    "compare",
    "compile",
    "complete",
    "compose",
    "compute",
    "construct",
    "contrast",
    "convert",
    "correct",
    "count",
    "create",
    "critique",
    "decide",
    "define",
    "derive",
    "describe",
    "design",
    "detect",
    "determine",
    "develop",
    "devise",
    "discuss",
    "draft",
    "edit",
    "elaborate",
    "estimate",
    "evaluate",
    "examine",
    "explain",
    "express",
    "extract",
    "fill",
    "find",
    "fix",
    "format",
    "formulate",
    "generate",
    "give",
    "guess",
    "highlight",
    "identify",
    "illustrate",
    "implement",
    "improve",
    "infer",
    "interpret",
    "label",
    "list",
    "locate",
    "make",
    "match",
    "mention",
    "name",
    "note",
    "offer",
    "order",
    "organize",
    "outline",
    "paraphrase",
    "pick",
    "plan",
    "predict",
    "prepare",
    "present",
    "produce",
    "propose",
    "prove",
    "provide",
    "rank",
    "rate",
    "read",
    "recommend",
    "reformulate",
    "refute",
    "rephrase",
    "replace",
    "report",
    "restate",
    "revise",
    "rewrite",
    "select",
    "show",
    "simplify",
    "solve",
    "sort",
    "specify",
    "state",
    "suggest",
    "summarise",
    "summarize",
    "support",
    "tell",
    "transform",
    "translate",
    "use",
    "verify",
    "write",
];

const STOPWORDS: &[&str] = &[
    "a",
    "an",
    "the",
    "this",
    "that",
    "these",
    "those",
    "its",
    "it",
    "their",
    "his",
    "her",
    "my",
    "our",
    "your",
    "me",
    "us",
    "them",
    "him",
    "some",
    "any",
    "each",
    "every",
    "all",
    "following",
    "given",
    "provided",
    "above",
    "below",
    "one",
    "two",
    "three",
    "four",
    "five",
    "several",
    "few",
    "many",
    "more",
    "most",
    "other",
    "another",
    "such",
    "same",
    "brief",
    "short",
    "long",
    "new",
    "main",
    "key",
    "simple",
    "good",
    "best",
    "detailed",
    "concise",
    "possible",
    "different",
    "own",
    "whole",
    "entire",
    "single",
    "first",
    "second",
    "last",
    "next",
    "top",
    "up",
    "out",
    "down",
    "back",
];

const BOUNDARIES: &[&str] = &[
    "about", "above", "across", "after", "against", "among", "and", "as", "at", "based", "because",
    "before", "behind", "below", "between", "but", "by", "for", "from", "given", "how", "if", "in",
    "into", "is", "like", "of", "on", "or", "over", "so", "than", "that", "then", "through", "to",
    "under", "using", "what", "when", "where", "whether", "which", "while", "who", "why", "with",
    "within", "without",
];

/// Lexicon-based analyzer: the first word must be a known imperative verb;
/// the object is the last content word of the chunk that follows it.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicAnalyzer;

impl HeuristicAnalyzer {
    fn words(text: &str) -> Vec<(String, bool)> {
        // (lowercased word, followed by punctuation)
        let mut out: Vec<(String, bool)> = Vec::new();
        let mut current = String::new();
        for c in text.chars() {
            if c.is_alphanumeric() || c == '\'' || c == '-' {
                current.extend(c.to_lowercase());
            } else {
                if !current.is_empty() {
                    out.push((std::mem::take(&mut current), false));
                }
                if !c.is_whitespace() {
                    if let Some(last) = out.last_mut() {
                        last.1 = true;
                    }
                }
            }
        }
        if !current.is_empty() {
            out.push((current, false));
        }
        out
    }
}

impl SyntacticAnalyzer for HeuristicAnalyzer {
    fn name(&self) -> &str {
        "heuristic-lexicon"
    }

    fn analyze(&self, instruction: &str) -> Option<(String, String)> {
        let words = Self::words(instruction);
        let mut iter = words.iter().peekable();
        if iter.peek().is_some_and(|(w, _)| w == "please") {
            iter.next();
        }
        let (verb, verb_punct) = iter.next()?;
        if *verb_punct || IMPERATIVE_VERBS.binary_search(&verb.as_str()).is_err() {
            return None;
        }
        let mut head = None;
        for (word, punct) in iter {
            if BOUNDARIES.contains(&word.as_str()) {
                break;
            }
            if !STOPWORDS.contains(&word.as_str()) && !word.chars().all(|c| c.is_ascii_digit()) {
                head = Some(word.clone());
            }
            if *punct {
                break;
            }
        }
        head.map(|noun| (verb.clone(), noun))
    }
}

/// Adapter for an external parser process. The command reads one JSON string
/// per line on stdin and answers each with `{"verb": .., "noun": ..}` or
/// `null`, one per line, in order.
#[derive(Debug, Clone)]
pub struct ExternalAnalyzer {
    pub program: String,
    pub args: Vec<String>,
}

#[derive(Deserialize)]
struct ExternalPair {
    verb: String,
    noun: String,
}

impl SyntacticAnalyzer for ExternalAnalyzer {
    fn name(&self) -> &str {
        &self.program
    }

    fn analyze(&self, instruction: &str) -> Option<(String, String)> {
        self.analyze_batch(&[instruction]).ok()?.pop().flatten()
    }

    fn analyze_batch(
        &self,
        instructions: &[&str],
    ) -> Result<Vec<Option<(String, String)>>, AnalyticsError> {
        let err = |e: std::io::Error| AnalyticsError::Analyzer(format!("{}: {e}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(err)?;
        let mut input = Vec::new();
        for i in instructions {
            serde_json::to_writer(&mut input, i).expect("string serializes");
            input.push(b'\n');
        }
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || stdin.write_all(&input));
        let output = child.wait_with_output().map_err(err)?;
        writer.join().expect("writer thread").map_err(err)?;
        if !output.status.success() {
            return Err(AnalyticsError::Analyzer(format!(
                "{} exited with {}",
                self.program, output.status
            )));
        }
        let text = String::from_utf8_lossy(&output.stdout);
        let parsed: Vec<Option<(String, String)>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str::<Option<ExternalPair>>(l)
                    .map(|p| p.map(|p| (p.verb.to_lowercase(), p.noun.to_lowercase())))
                    .map_err(|e| AnalyticsError::Analyzer(format!("bad line {l:?}: {e}")))
            })
            .collect::<Result<_, _>>()?;
        if parsed.len() != instructions.len() {
            return Err(AnalyticsError::Analyzer(format!(
                "expected {} answers, got {}",
                instructions.len(),
                parsed.len()
            )));
        }
        Ok(parsed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbNounCount {
    pub verb: String,
    pub noun: String,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiversityProfile {
    pub analyzer: String,
    pub pairs: BTreeMap<(String, String), usize>,
    pub unparsed_count: usize,
}

impl DiversityProfile {
    pub fn total(&self) -> usize {
        self.pairs.values().sum::<usize>() + self.unparsed_count
    }

    /// Pairs ordered by count (descending), then verb and noun.
    pub fn plot_data(&self) -> Vec<VerbNounCount> {
        let mut out: Vec<_> = self
            .pairs
            .iter()
            .map(|((v, n), c)| VerbNounCount {
                verb: v.clone(),
                noun: n.clone(),
                count: *c,
            })
            .collect();
        out.sort_by(|a, b| {
            b.count
                .cmp(&a.count)
                .then_with(|| (&a.verb, &a.noun).cmp(&(&b.verb, &b.noun)))
        });
        out
    }

    /// Verb totals, the inner ring of a sunburst.
    pub fn verb_totals(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for ((v, _), c) in &self.pairs {
            *out.entry(v.clone()).or_insert(0) += c;
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct ProfileRepr {
    analyzer: String,
    total: usize,
    unparsed_count: usize,
    pairs: Vec<VerbNounCount>,
}

impl Serialize for DiversityProfile {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ProfileRepr {
            analyzer: self.analyzer.clone(),
            total: self.total(),
            unparsed_count: self.unparsed_count,
            pairs: self.plot_data(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DiversityProfile {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = ProfileRepr::deserialize(d)?;
        Ok(DiversityProfile {
            analyzer: repr.analyzer,
            pairs: repr
                .pairs
                .into_iter()
                .map(|p| ((p.verb, p.noun), p.count))
                .collect(),
            unparsed_count: repr.unparsed_count,
        })
    }
}

pub fn verb_noun_profile<S: AsRef<str> + Sync>(
    instructions: &[S],
    analyzer: &dyn SyntacticAnalyzer,
) -> Result<DiversityProfile, AnalyticsError> {
    let refs: Vec<&str> = instructions.iter().map(AsRef::as_ref).collect();
    let mut profile = DiversityProfile {
        analyzer: analyzer.name().to_string(),
        ..Default::default()
    };
    for result in analyzer.analyze_batch(&refs)? {
        match result {
            Some(pair) => *profile.pairs.entry(pair).or_insert(0) += 1,
            None => profile.unparsed_count += 1,
        }
    }
    Ok(profile)
}

/// Mean literal overlap of input and output with the source document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LiteralRelevance {
    pub count: usize,
    /// `None` when every input in the group was empty.
    pub input_mean: Option<f64>,
    pub input_skipped: usize,
    pub output_mean: f64,
}

pub fn literal_relevance(
    records: &[TaskRecord],
    group_by: GroupBy,
    tokenizer: &dyn Tokenizer,
) -> Result<BTreeMap<String, LiteralRelevance>, AnalyticsError> {
    let pairs = tasks_of(records)?;
    let scored: Vec<(String, Option<f64>, f64)> = pairs
        .par_iter()
        .map(|(r, t)| {
            let doc = tokenizer.token_set(&r.document.text);
            let input = overlap_of_sets(&doc, &tokenizer.token_set(&t.input)).ok();
            let output = overlap_of_sets(&doc, &tokenizer.token_set(&t.output)).unwrap_or(0.0);
            (group_key(r, group_by), input, output)
        })
        .collect();
    let mut acc: BTreeMap<String, (Moments, Moments, usize)> = BTreeMap::new();
    for (key, input, output) in scored {
        let (i, o, skipped) = acc.entry(key).or_default();
        match input {
            Some(x) => i.push(x),
            None => *skipped += 1,
        }
        o.push(output);
    }
    Ok(acc
        .into_iter()
        .map(|(k, (i, o, skipped))| {
            let input_mean = (i.count > 0).then_some(i.mean);
            (
                k,
                LiteralRelevance {
                    count: o.count,
                    input_mean,
                    input_skipped: skipped,
                    output_mean: o.mean,
                },
            )
        })
        .collect())
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticMode {
    /// Cosine of whole-text embeddings.
    #[default]
    WholeText,
    /// F1 of greedy per-token cosine matching.
    TokenGreedy,
}

impl SemanticMode {
    pub fn scorer_name(self) -> &'static str {
        match self {
            SemanticMode::WholeText => "embedding-cosine (whole text), substitute for BERTScore",
            SemanticMode::TokenGreedy => {
                "embedding-cosine (token-level greedy F1), substitute for BERTScore"
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SemanticGroup {
    pub count: usize,
    pub complete: bool,
    pub input_mean: Option<f64>,
    pub input_skipped: usize,
    pub output_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticRelevance {
    pub scorer: String,
    pub mode: SemanticMode,
    pub groups: BTreeMap<String, SemanticGroup>,
}

struct Embedder<'a> {
    gateway: &'a Gateway,
    tokenizer: &'a dyn Tokenizer,
}

impl Embedder<'_> {
    fn whole(&self, a: &str, b: &str) -> Result<f64, GatewayError> {
        Ok(cosine(&self.gateway.embed(a)?, &self.gateway.embed(b)?))
    }

    fn token_vectors(
        &self,
        text: &str,
        cache: &mut HashMap<String, Vec<f32>>,
    ) -> Result<Vec<Vec<f32>>, GatewayError> {
        let tokens = self.tokenizer.tokens(text);
        let mut out = Vec::with_capacity(tokens.len());
        for t in tokens {
            if !cache.contains_key(&t) {
                let v = self.gateway.embed(&t)?;
                cache.insert(t.clone(), v);
            }
            out.push(cache[&t].clone());
        }
        Ok(out)
    }

    fn greedy(
        &self,
        doc: &str,
        field: &str,
        cache: &mut HashMap<String, Vec<f32>>,
    ) -> Result<f64, GatewayError> {
        let d = self.token_vectors(doc, cache)?;
        let f = self.token_vectors(field, cache)?;
        if d.is_empty() || f.is_empty() {
            return Ok(0.0);
        }
        let best = |xs: &[Vec<f32>], ys: &[Vec<f32>]| {
            xs.iter()
                .map(|x| {
                    ys.iter()
                        .map(|y| cosine(x, y))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .sum::<f64>()
                / xs.len() as f64
        };
        let precision = best(&f, &d);
        let recall = best(&d, &f);
        if precision + recall == 0.0 {
            return Ok(0.0);
        }
        Ok(2.0 * precision * recall / (precision + recall))
    }

    fn score(
        &self,
        mode: SemanticMode,
        doc: &str,
        field: &str,
        cache: &mut HashMap<String, Vec<f32>>,
    ) -> Result<f64, GatewayError> {
        match mode {
            SemanticMode::WholeText => self.whole(doc, field),
            SemanticMode::TokenGreedy => self.greedy(doc, field, cache),
        }
    }
}

/// Embedding-based relevance per group. A gateway failure marks the group
/// incomplete and suppresses its means.
pub fn semantic_relevance(
    records: &[TaskRecord],
    gateway: &Gateway,
    group_by: GroupBy,
    mode: SemanticMode,
    tokenizer: &dyn Tokenizer,
) -> Result<SemanticRelevance, AnalyticsError> {
    let mut grouped: BTreeMap<String, Vec<(&TaskRecord, &Task)>> = BTreeMap::new();
    for (r, t) in tasks_of(records)? {
        grouped
            .entry(group_key(r, group_by))
            .or_default()
            .push((r, t));
    }
    let embedder = Embedder { gateway, tokenizer };
    let groups = grouped
        .into_par_iter()
        .map(|(key, items)| {
            let mut cache = HashMap::new();
            let mut input = Moments::default();
            let mut output = Moments::default();
            let mut skipped = 0;
            let run = (|| -> Result<(), GatewayError> {
                for (r, t) in &items {
                    if t.has_input() {
                        input.push(embedder.score(mode, &r.document.text, &t.input, &mut cache)?);
                    } else {
                        skipped += 1;
                    }
                    output.push(embedder.score(mode, &r.document.text, &t.output, &mut cache)?);
                }
                Ok(())
            })();
            let group = match run {
                Ok(()) => SemanticGroup {
                    count: items.len(),
                    complete: true,
                    input_mean: (input.count > 0).then_some(input.mean),
                    input_skipped: skipped,
                    output_mean: (output.count > 0).then_some(output.mean),
                    error: None,
                },
                Err(e) => SemanticGroup {
                    count: items.len(),
                    complete: false,
                    error: Some(e.to_string()),
                    ..Default::default()
                },
            };
            (key, group)
        })
        .collect();
    Ok(SemanticRelevance {
        scorer: mode.scorer_name().to_string(),
        mode,
        groups,
    })
}

/// Literal and (optionally) semantic relevance side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub tokenizer: String,
    pub literal: BTreeMap<String, LiteralRelevance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<SemanticRelevance>,
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

impl RelevanceReport {
    pub fn render(&self) -> String {
        let mut out = format!("# literal overlap tokenizer: {}\n", self.tokenizer);
        if let Some(s) = &self.semantic {
            out.push_str(&format!("# semantic scorer: {}\n", s.scorer));
        }
        let rows: Vec<Vec<String>> = self
            .literal
            .iter()
            .map(|(g, l)| {
                let sem = self.semantic.as_ref().and_then(|s| s.groups.get(g));
                let sem_cell = |f: fn(&SemanticGroup) -> Option<f64>| match sem {
                    None => "-".to_string(),
                    Some(s) if !s.complete => "incomplete".to_string(),
                    Some(s) => cell(f(s)),
                };
                vec![
                    g.clone(),
                    l.count.to_string(),
                    cell(l.input_mean),
                    l.input_skipped.to_string(),
                    cell(Some(l.output_mean)),
                    sem_cell(|s| s.input_mean),
                    sem_cell(|s| s.output_mean),
                ]
            })
            .collect();
        out.push_str(&aligned_table(
            &[
                "group",
                "#",
                "overlap(D,I)",
                "empty I",
                "overlap(D,O)",
                "semantic(D,I)",
                "semantic(D,O)",
            ],
            &rows,
        ));
        out
    }
}
