//! A deterministic stand-in model for offline runs and tests.
//!
//! It recognizes every prompt the pipeline sends and answers as a plausible
//! but imperfect model would: most generated tasks are grounded in the text,
//! some are not, some completions are malformed, and the discriminator and
//! judges disagree now and then. Every choice is a function of the prompt.

use crate::filter::overlap_score;
use crate::forge::{DISCRIMINATOR_INSTRUCTION, GENERATOR_INSTRUCTION, SEPARATOR};
use crate::gateway::{MockBackend, Responder};
use crate::seed::{extract_target_text, TEXT_MARKER};
use crate::task::{parse_task, Task, INSTRUCTION_MARKER};
use crate::util::sha256_hex;

const JUDGE_PREFIX: &str = "Here is a request and a response to it.";
const INVERSION_PREFIX: &str = "For the given task, write a human-written text";

fn bucket(text: &str, salt: &str) -> u64 {
    let h = sha256_hex(format!("{salt}\u{1f}{text}"));
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let mut current = String::new();
        let mut chars = line.chars().peekable();
        while let Some(c) = chars.next() {
            current.push(c);
            if matches!(c, '.' | '?' | '!') && chars.peek().is_none_or(|n| n.is_whitespace()) {
                out.push(std::mem::take(&mut current));
            }
        }
        out.push(current);
    }
    out.into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| s.split_whitespace().count() >= 3 && !s.contains('#'))
        .collect()
}

/// The task the stand-in model designs for a document.
pub fn synthetic_task(doc: &str) -> Option<Task> {
    let sents = sentences(doc);
    let h = bucket(doc, "task");
    let pick = |salt: &str| &sents[(bucket(doc, salt) % sents.len() as u64) as usize];
    if sents.is_empty() {
        return Task::new(
            "Write a short poem inspired by the text.",
            "",
            "Soft light settles on the quiet hills tonight.",
        )
        .ok();
    }
    let task = match h % 10 {
        0 | 1 => {
            let longest = sents
                .iter()
                .take(3)
                .max_by_key(|s| s.len())
                .expect("non-empty");
            Task::new(
                "Summarize the main point of the text in one sentence.",
                "",
                longest.as_str(),
            )
        }
        2 => {
            let s = pick("extract");
            let word = s
                .split_whitespace()
                .max_by_key(|w| w.len())
                .unwrap_or("it")
                .trim_matches(|c: char| !c.is_alphanumeric());
            Task::new(
                format!("Extract the sentence that mentions \"{word}\"."),
                "",
                s.as_str(),
            )
        }
        3 => Task::new(
            "Answer the question based on the passage.",
            "Which topic does the passage describe, and why would a reader care about it?",
            sents[0].as_str(),
        ),
        4 | 5 => {
            let s = pick("rewrite");
            Task::new(
                "Rewrite the following sentence in plain language.",
                s.as_str(),
                paraphrase(s, doc),
            )
        }
        6 | 7 if sents.len() > 1 => {
            let i = (bucket(doc, "continue") % (sents.len() as u64 - 1)) as usize;
            Task::new(
                "Continue the passage with the next sentence.",
                sents[i].as_str(),
                sents[i + 1].as_str(),
            )
        }
        8 => Task::new(
            "Write a short poem inspired by the text.",
            "",
            "Soft light settles on the quiet hills tonight.",
        ),
        _ => {
            let mut words: Vec<&str> = doc
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| w.chars().count() >= 6)
                .collect();
            words.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
            words.dedup();
            words.truncate(5);
            if words.is_empty() {
                words.push(&sents[0]);
            }
            Task::new(
                "List the key terms that appear in the text.",
                "",
                words.join(", "),
            )
        }
    };
    task.ok()
}

/// Swaps every n-th word for a plainer one, so the rewrite is only partly
/// grounded in the text.
fn paraphrase(sentence: &str, doc: &str) -> String {
    const PLAIN: &[&str] = &[
        "basically",
        "roughly",
        "simply",
        "plainly",
        "mostly",
        "clearly",
        "really",
        "quite",
    ];
    let every = [2, 3, 4, 6, usize::MAX][(bucket(doc, "paraphrase") % 5) as usize];
    sentence
        .split_whitespace()
        .enumerate()
        .map(|(i, w)| {
            if i % every == every - 1 {
                PLAIN[i % PLAIN.len()].to_string()
            } else {
                w.to_lowercase()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn task_completion(doc: &str) -> String {
    let h = bucket(doc, "completion");
    let Some(task) = synthetic_task(doc) else {
        return "The text does not contain enough material for a task.".into();
    };
    if h.is_multiple_of(17) {
        return format!(
            "A good task would be: {} The answer is {}",
            task.instruction, task.output
        );
    }
    if h.is_multiple_of(23) {
        return format!(
            "#instruction#: {}\n#input#: {}",
            task.instruction, task.input
        );
    }
    let preamble = if h.is_multiple_of(4) {
        "Sure, here is a task designed from the text.\n"
    } else {
        ""
    };
    format!("{preamble}{}", task.serialize())
}

fn discriminate(rest: &str) -> String {
    let Some((doc, task)) = rest
        .strip_prefix("Text:\n")
        .and_then(|r| r.rsplit_once("\n\nTask:\n"))
    else {
        return "invalid".into();
    };
    let h = bucket(rest, "verdict");
    let grounded = parse_task(task)
        .ok()
        .and_then(|t| overlap_score(doc, &t.output).ok())
        .unwrap_or(0.0)
        >= 0.5;
    match (grounded, h % 41, h % 9) {
        (_, 0, _) => "It depends on the reader.".into(),
        (false, _, _) | (true, _, 0) => "Invalid.".into(),
        _ => "valid".into(),
    }
}

fn invert(prompt: &str) -> Option<String> {
    let body = prompt.strip_suffix(&format!("\n{TEXT_MARKER}"))?;
    let task = parse_task(&body[body.rfind(INSTRUCTION_MARKER)?..]).ok()?;
    let input = if task.has_input() {
        format!(" {}", task.input)
    } else {
        String::new()
    };
    Some(format!(
        "{TEXT_MARKER} \"{}{input} This passage was written to support the request: {}\"",
        task.output,
        task.instruction.to_lowercase()
    ))
}

fn answer(prompt: &str) -> String {
    match prompt.split_once("\n\n") {
        Some((request, doc)) if !doc.trim().is_empty() => consistency_reply(request, doc),
        _ => {
            let instruction = prompt.lines().next().unwrap_or_default();
            let h = bucket(prompt, "answer");
            if instruction.starts_with("Answer the question based on the passage")
                || h.is_multiple_of(19)
            {
                "I cannot answer that without the passage it refers to.".into()
            } else {
                format!("Here is my attempt: {}", prompt.replace('\n', " "))
            }
        }
    }
}

fn consistency_reply(request: &str, doc: &str) -> String {
    let instruction = request.lines().next().unwrap_or_default();
    let h = bucket(request, "consistency");
    match synthetic_task(doc) {
        Some(t) if t.instruction == instruction && !h.is_multiple_of(7) => t.output,
        Some(t) if t.instruction == instruction => {
            "The passage covers something else entirely.".into()
        }
        _ => sentences(doc).into_iter().next().unwrap_or_default(),
    }
}

/// Answers pipeline prompts deterministically.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticResponder;

impl Responder for SyntheticResponder {
    fn respond(&self, prompt: &str) -> Option<String> {
        if let Some(doc) = prompt
            .strip_prefix(GENERATOR_INSTRUCTION)
            .and_then(|r| r.strip_prefix(SEPARATOR))
        {
            return Some(task_completion(doc));
        }
        if let Some(rest) = prompt
            .strip_prefix(DISCRIMINATOR_INSTRUCTION)
            .and_then(|r| r.strip_prefix(SEPARATOR))
        {
            return Some(discriminate(rest));
        }
        if prompt.starts_with(INVERSION_PREFIX) {
            return invert(prompt);
        }
        if prompt.starts_with(JUDGE_PREFIX) {
            return Some(
                if bucket(prompt, "judge").is_multiple_of(11) {
                    "no"
                } else {
                    "yes"
                }
                .into(),
            );
        }
        if let Some(doc) = extract_target_text(prompt) {
            return Some(task_completion(doc));
        }
        // a handful of consistency probes fail outright
        if prompt.contains("\n\n") && bucket(prompt, "outage").is_multiple_of(53) {
            return None;
        }
        Some(answer(prompt))
    }
}

/// A strict mock backend answering through [`SyntheticResponder`].
pub fn synthetic_backend(model: &str) -> MockBackend {
    MockBackend::new(model).with_responder(SyntheticResponder)
}
