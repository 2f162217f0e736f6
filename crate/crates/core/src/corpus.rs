//! Corpus loading and per-corpus document sampling.
//!
//! Long sources (papers, court opinions) are cut into contiguous windows,
//! question/answer sources contribute a single pair, and everything else is
//! used whole. All offsets are Unicode scalar offsets.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Lines};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::util::{char_len, char_slice};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorpusKind {
    Wikipedia,
    FreeLaw,
    ArXiv,
    StackExchange,
    DmMath,
    Github,
    Custom(String),
}

impl CorpusKind {
    pub const BUILTIN: [CorpusKind; 6] = [
        CorpusKind::Wikipedia,
        CorpusKind::FreeLaw,
        CorpusKind::ArXiv,
        CorpusKind::StackExchange,
        CorpusKind::DmMath,
        CorpusKind::Github,
    ];

    /// Lowercase tag used in ids and files.
    pub fn tag(&self) -> &str {
        match self {
            CorpusKind::Wikipedia => "wikipedia",
            CorpusKind::FreeLaw => "freelaw",
            CorpusKind::ArXiv => "arxiv",
            CorpusKind::StackExchange => "stackexchange",
            CorpusKind::DmMath => "dm_math",
            CorpusKind::Github => "github",
            CorpusKind::Custom(name) => name,
        }
    }

    /// Sampling policy applied when none is configured.
    pub fn default_policy(&self) -> SamplingPolicy {
        match self {
            CorpusKind::ArXiv | CorpusKind::FreeLaw => SamplingPolicy::window(2000, 3500),
            CorpusKind::DmMath => SamplingPolicy::qa_pair(),
            _ => SamplingPolicy::whole(),
        }
    }
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for CorpusKind {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect::<String>()
            .to_lowercase();
        Ok(match norm.as_str() {
            "wikipedia" => CorpusKind::Wikipedia,
            "freelaw" => CorpusKind::FreeLaw,
            "arxiv" => CorpusKind::ArXiv,
            "stackexchange" => CorpusKind::StackExchange,
            "dmmath" | "dmmathematics" => CorpusKind::DmMath,
            "github" => CorpusKind::Github,
            _ => CorpusKind::Custom(s.to_string()),
        })
    }
}

impl Serialize for CorpusKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for CorpusKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse()
            .unwrap_or_else(|e: std::convert::Infallible| match e {}))
    }
}

/// A document as read from disk, before sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub corpus: CorpusKind,
    pub text: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// Where a sampled document sits inside its parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceSpan {
    Whole,
    Range { start: usize, end: usize },
}

impl Serialize for SourceSpan {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SourceSpan::Whole => s.serialize_str("whole"),
            SourceSpan::Range { start, end } => [*start, *end].serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for SourceSpan {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Tag(String),
            Range([usize; 2]),
        }
        match Repr::deserialize(d)? {
            Repr::Tag(t) if t == "whole" => Ok(SourceSpan::Whole),
            Repr::Tag(t) => Err(serde::de::Error::custom(format!("unknown span tag {t:?}"))),
            Repr::Range([start, end]) if start <= end => Ok(SourceSpan::Range { start, end }),
            Repr::Range(_) => Err(serde::de::Error::custom("span start exceeds end")),
        }
    }
}

/// A sampled, self-contained unit of text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub corpus: CorpusKind,
    pub text: String,
    pub char_count: usize,
    pub source_span: SourceSpan,
    pub parent_id: String,
}

impl Document {
    /// A document standing on its own (seed fixtures, inverted documents).
    pub fn standalone(id: impl Into<String>, corpus: CorpusKind, text: impl Into<String>) -> Self {
        let id = id.into();
        let text = text.into();
        Document {
            parent_id: id.clone(),
            char_count: char_len(&text),
            id,
            corpus,
            text,
            source_span: SourceSpan::Whole,
        }
    }

    fn whole(raw: &RawDocument) -> Self {
        Document {
            id: raw.id.clone(),
            corpus: raw.corpus.clone(),
            char_count: char_len(&raw.text),
            text: raw.text.clone(),
            source_span: SourceSpan::Whole,
            parent_id: raw.id.clone(),
        }
    }

    fn span(raw: &RawDocument, start: usize, end: usize) -> Self {
        let text = char_slice(&raw.text, start, end).to_string();
        Document {
            id: format!("{}@{start}-{end}", raw.id),
            corpus: raw.corpus.clone(),
            char_count: end - start,
            text,
            source_span: SourceSpan::Range { start, end },
            parent_id: raw.id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Window,
    QaPair,
    Whole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub mode: SamplingMode,
    pub min_chars: usize,
    pub max_chars: usize,
    pub snap_boundaries: bool,
}

impl SamplingPolicy {
    pub fn window(min_chars: usize, max_chars: usize) -> Self {
        SamplingPolicy {
            mode: SamplingMode::Window,
            min_chars,
            max_chars,
            snap_boundaries: true,
        }
    }

    pub fn qa_pair() -> Self {
        SamplingPolicy {
            mode: SamplingMode::QaPair,
            min_chars: 0,
            max_chars: 0,
            snap_boundaries: false,
        }
    }

    pub fn whole() -> Self {
        SamplingPolicy {
            mode: SamplingMode::Whole,
            min_chars: 0,
            max_chars: 0,
            snap_boundaries: false,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.mode == SamplingMode::Window
            && !(0 < self.min_chars && self.min_chars <= self.max_chars)
        {
            return Err(CorpusError::InvalidPolicy(format!(
                "window mode needs 0 < min_chars <= max_chars, got {}..{}",
                self.min_chars, self.max_chars
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid sampling policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    Jsonl,
    PlainTextPerFile,
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "plain-text-per-file" | "text" | "txt" => Ok(CorpusFormat::PlainTextPerFile),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub read: usize,
    pub skipped: usize,
    pub errors: Vec<String>,
}

/// Lazily yields the raw documents of one corpus.
///
/// Files are visited in lexicographic path order and JSONL records in line
/// order, so ids and ordering are stable across runs. Malformed records are
/// skipped and recorded in [`CorpusReader::report`].
pub struct CorpusReader {
    corpus: CorpusKind,
    format: CorpusFormat,
    root: PathBuf,
    single_file: bool,
    files: std::vec::IntoIter<PathBuf>,
    current: Option<(String, Lines<BufReader<File>>, usize)>,
    report: LoadReport,
}

/// Opens `source` (a file or a directory) for streaming.
pub fn load_corpus(
    source: &Path,
    corpus: CorpusKind,
    format: CorpusFormat,
) -> Result<CorpusReader, CorpusError> {
    let meta = std::fs::metadata(source).map_err(|e| CorpusError::Io {
        path: source.to_path_buf(),
        source: e,
    })?;
    let (files, single_file) = if meta.is_dir() {
        let mut files = Vec::new();
        collect_files(source, &mut files).map_err(|e| CorpusError::Io {
            path: source.to_path_buf(),
            source: e,
        })?;
        if format == CorpusFormat::Jsonl {
            files.retain(|p| p.extension().is_some_and(|e| e == "jsonl"));
        }
        files.sort();
        (files, false)
    } else {
        (vec![source.to_path_buf()], true)
    };
    Ok(CorpusReader {
        corpus,
        format,
        root: source.to_path_buf(),
        single_file,
        files: files.into_iter(),
        current: None,
        report: LoadReport::default(),
    })
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path
            .file_name()
            .is_some_and(|n| !n.to_string_lossy().starts_with('.'))
        {
            out.push(path);
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct JsonlRecord {
    text: Option<serde_json::Value>,
    #[serde(default)]
    meta: Option<serde_json::Map<String, serde_json::Value>>,
}

impl CorpusReader {
    pub fn report(&self) -> &LoadReport {
        &self.report
    }

    pub fn into_report(self) -> LoadReport {
        self.report
    }

    /// Drains the reader, returning documents and the final report.
    pub fn read_all(mut self) -> (Vec<RawDocument>, LoadReport) {
        let docs: Vec<_> = self.by_ref().collect();
        (docs, self.report)
    }

    fn rel_name(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn skip(&mut self, location: String, reason: impl fmt::Display) {
        self.report.skipped += 1;
        self.report.errors.push(format!("{location}: {reason}"));
    }

    fn next_plain(&mut self) -> Option<RawDocument> {
        while let Some(path) = self.files.next() {
            let rel = if self.single_file {
                path.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default()
            } else {
                self.rel_name(&path)
            };
            match std::fs::read_to_string(&path) {
                Ok(text) if !text.trim().is_empty() => {
                    self.report.read += 1;
                    return Some(RawDocument {
                        id: format!("{}/{rel}", self.corpus.tag()),
                        corpus: self.corpus.clone(),
                        text,
                        metadata: BTreeMap::new(),
                    });
                }
                Ok(_) => self.skip(rel, "empty text"),
                Err(e) => self.skip(rel, e),
            }
        }
        None
    }

    fn next_jsonl(&mut self) -> Option<RawDocument> {
        loop {
            if self.current.is_none() {
                let path = self.files.next()?;
                let prefix = if self.single_file {
                    self.corpus.tag().to_string()
                } else {
                    format!("{}/{}", self.corpus.tag(), self.rel_name(&path))
                };
                match File::open(&path) {
                    Ok(f) => self.current = Some((prefix, BufReader::new(f).lines(), 0)),
                    Err(e) => {
                        self.skip(prefix, e);
                        continue;
                    }
                }
            }
            let (prefix, lines, index) = self.current.as_mut().expect("current file");
            let Some(line) = lines.next() else {
                self.current = None;
                continue;
            };
            let idx = *index;
            *index += 1;
            let prefix = prefix.clone();
            let location = format!("{prefix}/{idx}");
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    self.skip(location, e);
                    continue;
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let record: JsonlRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    self.skip(location, format!("malformed JSON: {e}"));
                    continue;
                }
            };
            let text = match record.text {
                Some(serde_json::Value::String(t)) if !t.trim().is_empty() => t,
                Some(serde_json::Value::String(_)) => {
                    self.skip(location, "empty text");
                    continue;
                }
                Some(_) => {
                    self.skip(location, "`text` is not a string");
                    continue;
                }
                None => {
                    self.skip(location, "missing `text` field");
                    continue;
                }
            };
            let metadata = record
                .meta
                .unwrap_or_default()
                .into_iter()
                .map(|(k, v)| match v {
                    serde_json::Value::String(s) => (k, s),
                    other => (k, other.to_string()),
                })
                .collect();
            self.report.read += 1;
            return Some(RawDocument {
                id: location,
                corpus: self.corpus.clone(),
                text,
                metadata,
            });
        }
    }
}

impl Iterator for CorpusReader {
    type Item = RawDocument;

    fn next(&mut self) -> Option<RawDocument> {
        match self.format {
            CorpusFormat::Jsonl => self.next_jsonl(),
            CorpusFormat::PlainTextPerFile => self.next_plain(),
        }
    }
}

/// How question/answer lines are recognised in math-style corpora.
#[derive(Debug, Clone, Default)]
pub enum QaLayout {
    /// Non-blank lines alternate question, answer, question, answer...
    #[default]
    Alternating,
    /// A line matching `question` immediately followed by one matching `answer`.
    Regex { question: Regex, answer: Regex },
}

/// Per-run sampling tallies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub sampled: usize,
    pub windowed: usize,
    pub whole: usize,
    pub qa_pairs: usize,
    /// Window-mode documents shorter than `min_chars`, used whole instead.
    pub whole_fallback: Vec<String>,
    /// QA-mode documents without a detectable pair.
    pub no_qa_pair: Vec<String>,
}

/// Samples one document from `raw` according to `policy`.
///
/// Returns `None` only when a QA-mode document has no detectable pair.
pub fn sample_document<R: Rng + ?Sized>(
    raw: &RawDocument,
    policy: &SamplingPolicy,
    qa_layout: &QaLayout,
    rng: &mut R,
    report: &mut SamplingReport,
) -> Option<Document> {
    let doc = match policy.mode {
        SamplingMode::Whole => {
            report.whole += 1;
            Some(Document::whole(raw))
        }
        SamplingMode::QaPair => {
            let d = extract_qa_pair_with(raw, qa_layout, rng);
            match d {
                Some(_) => report.qa_pairs += 1,
                None => report.no_qa_pair.push(raw.id.clone()),
            }
            d
        }
        SamplingMode::Window => {
            let n = char_len(&raw.text);
            if n < policy.min_chars {
                report.whole_fallback.push(raw.id.clone());
                report.whole += 1;
                Some(Document::whole(raw))
            } else {
                let longest = policy.max_chars.min(n);
                let len = rng.gen_range(policy.min_chars..=longest);
                let start = rng.gen_range(0..=n - len);
                let (s, e) = if policy.snap_boundaries {
                    snap_window(
                        &raw.text,
                        start,
                        start + len,
                        policy.min_chars,
                        policy.max_chars,
                    )
                } else {
                    (start, start + len)
                };
                report.windowed += 1;
                Some(Document::span(raw, s, e))
            }
        }
    };
    if doc.is_some() {
        report.sampled += 1;
    }
    doc
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '。' | '！' | '？')
}

/// Offsets where a sentence or line starts.
fn sentence_starts(chars: &[char]) -> Vec<usize> {
    let mut out = vec![0];
    for i in 1..chars.len() {
        if chars[i].is_whitespace() || !chars[i - 1].is_whitespace() {
            continue;
        }
        let mut j = i;
        let mut saw_newline = false;
        while j > 0 && chars[j - 1].is_whitespace() {
            saw_newline |= chars[j - 1] == '\n';
            j -= 1;
        }
        if saw_newline || (j > 0 && is_terminal(chars[j - 1])) {
            out.push(i);
        }
    }
    out
}

/// Offsets just past a sentence terminator or at a line end.
fn sentence_ends(chars: &[char]) -> Vec<usize> {
    let n = chars.len();
    let mut out = Vec::new();
    for e in 1..n {
        let prev = chars[e - 1];
        let at_break = chars[e].is_whitespace();
        if (is_terminal(prev) && at_break) || (chars[e] == '\n' && !prev.is_whitespace()) {
            out.push(e);
        }
    }
    out.push(n);
    out.dedup();
    out
}

fn nearest(points: &[usize], target: usize) -> usize {
    // points is sorted and non-empty; ties go to the earlier offset
    let idx = points.partition_point(|&p| p < target);
    let after = points.get(idx).copied();
    let before = idx.checked_sub(1).map(|i| points[i]);
    match (before, after) {
        (Some(b), Some(a)) => {
            if target - b <= a - target {
                b
            } else {
                a
            }
        }
        (Some(b), None) => b,
        (None, Some(a)) => a,
        (None, None) => target,
    }
}

/// Aligns a cut `[start, end)` to the nearest sentence or line boundaries.
///
/// The start moves to the nearest offset that begins a sentence and the end to
/// the nearest offset that closes one. If the aligned window falls outside
/// `[min_chars, max_chars]` the raw cut is returned unchanged.
pub fn snap_window(
    text: &str,
    start: usize,
    end: usize,
    min_chars: usize,
    max_chars: usize,
) -> (usize, usize) {
    let chars: Vec<char> = text.chars().collect();
    let end = end.min(chars.len());
    if start >= end {
        return (start, end);
    }
    let s = nearest(&sentence_starts(&chars), start);
    let e = nearest(&sentence_ends(&chars), end);
    if s < e && (min_chars..=max_chars).contains(&(e - s)) {
        (s, e)
    } else {
        (start, end)
    }
}

/// Picks one question/answer pair uniformly, using alternating lines.
pub fn extract_qa_pair<R: Rng + ?Sized>(raw: &RawDocument, rng: &mut R) -> Option<Document> {
    extract_qa_pair_with(raw, &QaLayout::Alternating, rng)
}

/// Picks one question/answer pair uniformly under `layout`.
///
/// The document is the parent slice from the start of the question line to
/// the end of the answer line.
pub fn extract_qa_pair_with<R: Rng + ?Sized>(
    raw: &RawDocument,
    layout: &QaLayout,
    rng: &mut R,
) -> Option<Document> {
    // (char start, char end) of each non-blank line, without the line break
    let mut lines: Vec<(usize, usize, &str)> = Vec::new();
    let mut pos = 0usize;
    for line in raw.text.split('\n') {
        let body = line.strip_suffix('\r').unwrap_or(line);
        let len = char_len(body);
        if !body.trim().is_empty() {
            lines.push((pos, pos + len, body));
        }
        pos += char_len(line) + 1;
    }
    let pairs: Vec<(usize, usize)> = match layout {
        QaLayout::Alternating => {
            if lines.is_empty() || !lines.len().is_multiple_of(2) {
                return None;
            }
            lines.chunks(2).map(|p| (p[0].0, p[1].1)).collect()
        }
        QaLayout::Regex { question, answer } => lines
            .windows(2)
            .filter(|w| question.is_match(w[0].2) && answer.is_match(w[1].2))
            .map(|w| (w[0].0, w[1].1))
            .collect(),
    };
    if pairs.is_empty() {
        return None;
    }
    let (start, end) = pairs[rng.gen_range(0..pairs.len())];
    Some(Document::span(raw, start, end))
}
