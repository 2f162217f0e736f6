//! Task generation with the designer meta-instruction, discriminator gating
//! and export of generator / discriminator training files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::gateway::{DecodingParams, Gateway, GatewayError};
use crate::record::{GateOutcome, RecordStatus, TaskRecord, Verdict};
use crate::task::Task;
use crate::util::{sha256_hex, short_hash, write_atomic};

pub const GENERATOR_INSTRUCTION: &str = "Convert the given text into a task. Input is a text and Response contains three fields: #instruction#, #input# and #output#.";
pub const DISCRIMINATOR_INSTRUCTION: &str =
    "Given a piece of text and a task generated from that text, determine if the task is valid or invalid.";

/// Placed between a meta-instruction and the text it conditions on.
pub const SEPARATOR: &str = "\n\nInput:\n";

pub const VERDICT_LABELS: [&str; 2] = ["valid", "invalid"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaInstruction {
    pub generator_text: String,
    pub discriminator_text: String,
}

impl Default for MetaInstruction {
    fn default() -> Self {
        MetaInstruction {
            generator_text: GENERATOR_INSTRUCTION.to_string(),
            discriminator_text: DISCRIMINATOR_INSTRUCTION.to_string(),
        }
    }
}

impl MetaInstruction {
    /// True when either text differs from the built-in default.
    pub fn is_overridden(&self) -> bool {
        self != &MetaInstruction::default()
    }

    pub fn hash(&self) -> String {
        sha256_hex(format!(
            "{}\u{1f}{}",
            self.generator_text, self.discriminator_text
        ))
    }

    pub fn generator_prompt(&self, document_text: &str) -> String {
        format!("{}{SEPARATOR}{document_text}", self.generator_text)
    }

    pub fn discriminator_prompt(&self, document_text: &str, task: &Task) -> String {
        format!(
            "{}{SEPARATOR}{}",
            self.discriminator_text,
            document_task_pair(document_text, task)
        )
    }
}

/// Document and task joined under explicit headers.
pub fn document_task_pair(document_text: &str, task: &Task) -> String {
    format!("Text:\n{document_text}\n\nTask:\n{}", task.serialize())
}

/// Record id for the task generated from a document.
pub fn record_id(document_id: &str) -> String {
    format!("rec-{}", short_hash(document_id))
}

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("record {id} has status {status:?}; expected {expected:?}")]
    Precondition {
        id: String,
        status: RecordStatus,
        expected: RecordStatus,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Outcome counts of a generation batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub parsed: usize,
    pub parse_failed: usize,
    pub parse_errors: BTreeMap<String, usize>,
    /// (document id, error) for requests that never produced a completion.
    pub failures: Vec<(String, String)>,
}

#[derive(Debug, Clone, Default)]
pub struct GenerationRun {
    pub records: Vec<TaskRecord>,
    pub report: GenerationReport,
}

/// Requests one completion for `prompt` and wraps it in a record. Transport
/// errors produce no record.
pub fn generate_with_prompt(
    doc: &Document,
    prompt: &str,
    gateway: &Gateway,
    params: &DecodingParams,
    created_at: &str,
) -> Result<TaskRecord, GatewayError> {
    let completion = gateway.complete(prompt, params)?;
    Ok(TaskRecord::from_completion(
        record_id(&doc.id),
        doc.clone(),
        completion,
        gateway.model_name().to_string(),
        params.clone(),
        created_at.to_string(),
    ))
}

/// Generates a task for `doc` with the generator meta-instruction.
pub fn generate_task(
    doc: &Document,
    meta: &MetaInstruction,
    gateway: &Gateway,
    params: &DecodingParams,
    created_at: &str,
) -> Result<TaskRecord, GatewayError> {
    generate_with_prompt(
        doc,
        &meta.generator_prompt(&doc.text),
        gateway,
        params,
        created_at,
    )
}

/// Runs `(document, prompt)` jobs in parallel, keeping input order.
pub fn generate_batch_with_prompts(
    jobs: &[(Document, String)],
    gateway: &Gateway,
    params: &DecodingParams,
    created_at: &str,
) -> GenerationRun {
    let results: Vec<_> = jobs
        .par_iter()
        .map(|(doc, prompt)| {
            (
                doc.id.clone(),
                generate_with_prompt(doc, prompt, gateway, params, created_at),
            )
        })
        .collect();
    let mut run = GenerationRun::default();
    for (doc_id, result) in results {
        match result {
            Ok(record) => {
                match &record.parse_error {
                    None => run.report.parsed += 1,
                    Some(e) => {
                        run.report.parse_failed += 1;
                        *run.report
                            .parse_errors
                            .entry(e.code().to_string())
                            .or_insert(0) += 1;
                    }
                }
                run.records.push(record);
            }
            Err(e) => run.report.failures.push((doc_id, e.to_string())),
        }
    }
    run
}

pub fn generate_batch(
    docs: &[Document],
    meta: &MetaInstruction,
    gateway: &Gateway,
    params: &DecodingParams,
    created_at: &str,
) -> GenerationRun {
    let jobs: Vec<_> = docs
        .iter()
        .map(|d| (d.clone(), meta.generator_prompt(&d.text)))
        .collect();
    generate_batch_with_prompts(&jobs, gateway, params, created_at)
}

/// Asks the discriminator whether a parsed record's task is valid. A reply
/// that matches no label counts as invalid and is flagged.
pub fn gate(
    record: &TaskRecord,
    meta: &MetaInstruction,
    gateway: &Gateway,
) -> Result<GateOutcome, GatewayError> {
    let task = record.task.as_ref().ok_or_else(|| {
        GatewayError::InvalidRequest(format!("record {} has no parsed task", record.id))
    })?;
    let prompt = meta.discriminator_prompt(&record.document.text, task);
    match gateway.classify(&prompt, &VERDICT_LABELS, &DecodingParams::deterministic(16)) {
        Ok(c) => Ok(GateOutcome {
            verdict: if c.label == "valid" {
                Verdict::Valid
            } else {
                Verdict::Invalid
            },
            anomaly: false,
            raw: c.raw,
        }),
        Err(GatewayError::UnrecognizedLabel { raw, .. }) => Ok(GateOutcome {
            verdict: Verdict::Invalid,
            anomaly: true,
            raw,
        }),
        Err(e) => Err(e),
    }
}

/// Gates a record and records the verdict. Invalid records become
/// `GatedInvalid`; valid ones stay `Parsed` and are eligible for retention.
pub fn apply_gate(
    record: &mut TaskRecord,
    meta: &MetaInstruction,
    gateway: &Gateway,
) -> Result<Verdict, GatewayError> {
    let outcome = gate(record, meta, gateway)?;
    let verdict = outcome.verdict;
    record.gate = Some(outcome);
    if verdict == Verdict::Invalid {
        let _ = record.advance(RecordStatus::GatedInvalid);
    }
    Ok(verdict)
}

/// One generator fine-tuning example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt: String,
    pub response: String,
}

/// One discriminator fine-tuning example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorExample {
    pub prompt: String,
    pub label: Verdict,
}

pub fn sft_example(record: &TaskRecord, meta: &MetaInstruction) -> Option<SftExample> {
    let task = record.task.as_ref()?;
    Some(SftExample {
        prompt: meta.generator_prompt(&record.document.text),
        response: task.serialize(),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ForgeError> {
    write_atomic(path, bytes).map_err(|source| ForgeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes generator training pairs for retained records.
pub fn emit_sft_dataset(
    records: &[TaskRecord],
    meta: &MetaInstruction,
    out: &Path,
) -> Result<usize, ForgeError> {
    let mut examples = Vec::with_capacity(records.len());
    for r in records {
        if r.status != RecordStatus::Retained {
            return Err(ForgeError::Precondition {
                id: r.id.clone(),
                status: r.status,
                expected: RecordStatus::Retained,
            });
        }
        examples.extend(sft_example(r, meta));
    }
    let bytes = crate::util::to_jsonl(&examples).map_err(|source| ForgeError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    write_file(out, &bytes)?;
    Ok(examples.len())
}

/// A record used as a discriminator negative, with why it was rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Negative {
    pub reason: String,
    pub record: TaskRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub line: usize,
    pub record_id: String,
    pub label: Verdict,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorReport {
    pub positives: usize,
    pub negatives: usize,
    /// Records without a parsed task.
    pub skipped: usize,
    pub warnings: Vec<String>,
}

/// Sidecar audit path: `<out>` with its extension replaced by `audit.jsonl`.
pub fn audit_path(out: &Path) -> PathBuf {
    out.with_extension("audit.jsonl")
}

/// Writes discriminator examples: positives labelled valid, then negatives
/// labelled invalid. A sidecar audit file carries each line's reason.
pub fn emit_discriminator_dataset(
    positives: &[TaskRecord],
    negatives: &[Negative],
    meta: &MetaInstruction,
    out: &Path,
) -> Result<DiscriminatorReport, ForgeError> {
    let mut report = DiscriminatorReport::default();
    let mut examples = Vec::new();
    let mut audit = Vec::new();
    for r in positives {
        if r.status != RecordStatus::Retained {
            return Err(ForgeError::Precondition {
                id: r.id.clone(),
                status: r.status,
                expected: RecordStatus::Retained,
            });
        }
    }
    let labelled = positives
        .iter()
        .map(|r| (r, Verdict::Valid, "retained"))
        .chain(
            negatives
                .iter()
                .map(|n| (&n.record, Verdict::Invalid, n.reason.as_str())),
        );
    for (record, label, reason) in labelled {
        let Some(task) = record.task.as_ref() else {
            report.skipped += 1;
            continue;
        };
        audit.push(AuditEntry {
            line: examples.len(),
            record_id: record.id.clone(),
            label,
            reason: reason.to_string(),
        });
        examples.push(DiscriminatorExample {
            prompt: meta.discriminator_prompt(&record.document.text, task),
            label,
        });
        match label {
            Verdict::Valid => report.positives += 1,
            Verdict::Invalid => report.negatives += 1,
        }
    }
    if report.negatives == 0 {
        report
            .warnings
            .push("no negative examples: discriminator data is single-class".into());
    } else if report.positives == 0 {
        report
            .warnings
            .push("no positive examples: discriminator data is single-class".into());
    }
    if report.skipped > 0 {
        report.warnings.push(format!(
            "{} record(s) without a parsed task skipped",
            report.skipped
        ));
    }
    let io = |source| ForgeError::Io {
        path: out.to_path_buf(),
        source,
    };
    write_file(out, &crate::util::to_jsonl(&examples).map_err(io)?)?;
    let audit_out = audit_path(out);
    let bytes = crate::util::to_jsonl(&audit).map_err(|source| ForgeError::Io {
        path: audit_out.clone(),
        source,
    })?;
    write_file(&audit_out, &bytes)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusKind;
    use crate::gateway::MockBackend;
    use crate::task::parse_task;

    fn doc(i: usize) -> Document {
        Document::standalone(
            format!("wikipedia/{i}"),
            CorpusKind::Wikipedia,
            format!("Body of document {i}."),
        )
    }

    fn good(doc: &Document) -> String {
        format!(
            "#instruction#: Restate the text.\n#input#:\n#output#: {}",
            doc.text
        )
    }

    fn retained(i: usize) -> TaskRecord {
        let d = doc(i);
        let mut r = TaskRecord::from_completion(
            record_id(&d.id),
            d.clone(),
            good(&d),
            "m".into(),
            DecodingParams::generation(),
            "t".into(),
        );
        r.advance(RecordStatus::Retained).unwrap();
        r
    }

    #[test]
    fn generate_parsed_and_failed() {
        let meta = MetaInstruction::default();
        let d = doc(0);
        let gw = Gateway::mock(
            MockBackend::new("gen").with_completion(&meta.generator_prompt(&d.text), good(&d)),
        );
        let r = generate_task(&d, &meta, &gw, &DecodingParams::generation(), "t").unwrap();
        assert_eq!(r.status, RecordStatus::Parsed);
        assert_eq!(r.model_name, "gen");

        let gw = Gateway::mock(
            MockBackend::new("gen").with_completion(&meta.generator_prompt(&d.text), "Just prose."),
        );
        let r = generate_task(&d, &meta, &gw, &DecodingParams::generation(), "t").unwrap();
        assert_eq!(r.status, RecordStatus::ParseFailed);
        assert_eq!(r.raw_completion, "Just prose.");
    }

    #[test]
    fn batch_report_tallies() {
        let meta = MetaInstruction::default();
        let docs: Vec<_> = (0..10).map(doc).collect();
        let mut backend = MockBackend::new("gen");
        for (i, d) in docs.iter().enumerate() {
            let completion = if i == 3 || i == 7 {
                "no markers here".to_string()
            } else {
                good(d)
            };
            backend = backend.with_completion(&meta.generator_prompt(&d.text), completion);
        }
        let run = generate_batch(
            &docs,
            &meta,
            &Gateway::mock(backend),
            &DecodingParams::generation(),
            "t",
        );
        assert_eq!(run.report.parsed, 8);
        assert_eq!(run.report.parse_failed, 2);
        assert_eq!(run.records.len(), 10);
        assert_eq!(run.records[3].document.id, "wikipedia/3");
    }

    #[test]
    fn transport_failure_yields_no_record() {
        let run = generate_batch(
            &[doc(0)],
            &MetaInstruction::default(),
            &Gateway::mock(MockBackend::new("m")),
            &DecodingParams::generation(),
            "t",
        );
        assert!(run.records.is_empty());
        assert_eq!(run.report.failures.len(), 1);
    }

    #[test]
    fn gate_verdicts() {
        let meta = MetaInstruction::default();
        let mut r = retained(0);
        r.status = RecordStatus::Parsed;
        let prompt = meta.discriminator_prompt(&r.document.text, r.task());
        for (reply, verdict, anomaly) in [
            ("valid", Verdict::Valid, false),
            ("Invalid.", Verdict::Invalid, false),
            ("unsure", Verdict::Invalid, true),
        ] {
            let gw = Gateway::mock(MockBackend::new("disc").with_completion(&prompt, reply));
            let mut rec = r.clone();
            assert_eq!(apply_gate(&mut rec, &meta, &gw).unwrap(), verdict);
            assert_eq!(rec.gate.as_ref().unwrap().anomaly, anomaly);
            let expected = if verdict == Verdict::Valid {
                RecordStatus::Parsed
            } else {
                RecordStatus::GatedInvalid
            };
            assert_eq!(rec.status, expected);
        }
    }

    #[test]
    fn discriminator_prompt_layout() {
        let meta = MetaInstruction::default();
        let task = Task::new("Do.", "", "x").unwrap();
        let p = meta.discriminator_prompt("Doc body", &task);
        assert_eq!(
            p,
            format!("{DISCRIMINATOR_INSTRUCTION}\n\nInput:\nText:\nDoc body\n\nTask:\n#instruction#: Do.\n#input#: \n#output#: x")
        );
    }

    #[test]
    fn sft_lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("sft.jsonl");
        let records: Vec<_> = (0..100).map(retained).collect();
        let meta = MetaInstruction::default();
        assert_eq!(emit_sft_dataset(&records, &meta, &out).unwrap(), 100);
        let lines: Vec<SftExample> = crate::util::read_jsonl(&out).unwrap();
        assert_eq!(lines.len(), 100);
        for (line, rec) in lines.iter().zip(&records) {
            assert!(line.prompt.starts_with(GENERATOR_INSTRUCTION));
            let doc_text = line
                .prompt
                .strip_prefix(&format!("{GENERATOR_INSTRUCTION}{SEPARATOR}"))
                .unwrap();
            assert_eq!(doc_text, rec.document.text);
            assert_eq!(&parse_task(&line.response).unwrap(), rec.task());
            assert!(line.response.contains("#input#: \n"));
        }
    }

    #[test]
    fn sft_rejects_non_retained() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = retained(0);
        r.status = RecordStatus::Parsed;
        let err = emit_sft_dataset(
            &[r],
            &MetaInstruction::default(),
            &dir.path().join("x.jsonl"),
        )
        .unwrap_err();
        assert!(matches!(err, ForgeError::Precondition { .. }));
    }

    #[test]
    fn discriminator_labels_and_audit() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("disc.jsonl");
        let mut neg = retained(1);
        neg.status = RecordStatus::Filtered;
        let failed = TaskRecord::from_completion(
            "f".into(),
            doc(2),
            "junk".into(),
            "m".into(),
            DecodingParams::generation(),
            "t".into(),
        );
        let negatives = vec![
            Negative {
                reason: "reject_overlap".into(),
                record: neg,
            },
            Negative {
                reason: "parse_failed".into(),
                record: failed,
            },
        ];
        let report = emit_discriminator_dataset(
            &[retained(0)],
            &negatives,
            &MetaInstruction::default(),
            &out,
        )
        .unwrap();
        assert_eq!(
            (report.positives, report.negatives, report.skipped),
            (1, 1, 1)
        );
        let lines: Vec<DiscriminatorExample> = crate::util::read_jsonl(&out).unwrap();
        assert_eq!(lines[0].label, Verdict::Valid);
        assert_eq!(lines[1].label, Verdict::Invalid);
        assert!(lines[0].prompt.starts_with(DISCRIMINATOR_INSTRUCTION));
        let audit: Vec<AuditEntry> = crate::util::read_jsonl(&audit_path(&out)).unwrap();
        assert_eq!(audit[1].reason, "reject_overlap");
        let raw = std::fs::read_to_string(&out).unwrap();
        assert!(raw.contains("\"label\":\"valid\"") && raw.contains("\"label\":\"invalid\""));
    }

    #[test]
    fn no_negatives_warns_but_writes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("disc.jsonl");
        let report =
            emit_discriminator_dataset(&[retained(0)], &[], &MetaInstruction::default(), &out)
                .unwrap();
        assert_eq!(report.warnings.len(), 1);
        assert!(out.exists());
    }
}
