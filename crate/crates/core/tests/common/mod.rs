#![allow(dead_code)]

use std::path::{Path, PathBuf};

use forge_core::corpus::{CorpusKind, Document};
use forge_core::gateway::DecodingParams;
use forge_core::record::TaskRecord;
use forge_core::task::Task;
use proptest::prelude::*;
use rand::Rng;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

const MARKERS: [&str; 3] = ["#instruction#:", "#input#:", "#output#:"];

/// Text that may span lines, contain `#`, unicode and stray whitespace, but
/// never starts a line with a field marker.
pub fn field_text(min_len: usize) -> impl Strategy<Value = String> {
    let pieces = prop_oneof![
        4 => "[a-zA-Z0-9]{1,8}",
        2 => Just(" ".to_string()),
        1 => Just("\n".to_string()),
        1 => Just("\t".to_string()),
        1 => "[#:.,!?()\\-]{1,3}",
        1 => "[éüßλ中文😀]{1,2}",
        1 => Just(" #input# ".to_string()),
    ];
    proptest::collection::vec(pieces, min_len..12).prop_map(|v| v.concat())
}

pub fn arb_task() -> impl Strategy<Value = Task> {
    (
        field_text(1),
        prop_oneof![1 => Just(String::new()), 3 => field_text(0)],
        field_text(1),
    )
        .prop_filter_map("fields must survive trimming", |(i, inp, o)| {
            Task::new(i, inp, o).ok()
        })
}

/// Independent reading of the task format used as a parsing oracle.
pub fn oracle_parse(text: &str) -> Result<Task, &'static str> {
    let lines: Vec<&str> = text.split('\n').collect();
    let mut markers: Vec<(usize, usize)> = Vec::new(); // (line index, marker index)
    for (li, line) in lines.iter().enumerate() {
        if let Some(mi) = MARKERS.iter().position(|m| line.starts_with(m)) {
            if markers.iter().any(|&(_, m)| m == mi) {
                return Err("duplicate_marker");
            }
            markers.push((li, mi));
        }
    }
    let find = |mi: usize| markers.iter().position(|&(_, m)| m == mi);
    let Some(a) = find(0) else {
        return Err("missing_instruction");
    };
    let Some(b) = find(1) else {
        return Err("missing_input");
    };
    let Some(c) = find(2) else {
        return Err("missing_output");
    };
    if !(a < b && b < c) {
        return Err("out_of_order");
    }
    let value = |k: usize| -> String {
        let (li, mi) = markers[k];
        let end = markers.get(k + 1).map(|&(l, _)| l).unwrap_or(lines.len());
        let mut parts = vec![&lines[li][MARKERS[mi].len()..]];
        parts.extend(&lines[li + 1..end]);
        parts.join("\n").trim().to_string()
    };
    let (i, inp, o) = (value(a), value(b), value(c));
    if i.is_empty() {
        return Err("empty_instruction");
    }
    if o.is_empty() {
        return Err("empty_output");
    }
    Ok(Task {
        instruction: i,
        input: inp,
        output: o,
    })
}

/// One random edit of a completion.
pub fn mutate<R: Rng>(text: &str, rng: &mut R) -> String {
    let chars: Vec<char> = text.chars().collect();
    let at = |rng: &mut R| {
        if chars.is_empty() {
            0
        } else {
            rng.gen_range(0..=chars.len())
        }
    };
    let splice = |i: usize, s: &str| {
        let mut out: String = chars[..i].iter().collect();
        out.push_str(s);
        out.extend(&chars[i..]);
        out
    };
    match rng.gen_range(0..10) {
        0 => {
            let i = at(rng);
            let j = (i + rng.gen_range(0..20)).min(chars.len());
            chars[..i].iter().chain(&chars[j..]).collect()
        }
        1 => splice(at(rng), MARKERS[rng.gen_range(0..3)]),
        2 => splice(at(rng), &format!("\n{} ", MARKERS[rng.gen_range(0..3)])),
        3 => chars[..at(rng)].iter().collect(),
        4 => {
            let mut lines: Vec<&str> = text.split('\n').collect();
            let n = lines.len();
            lines.swap(rng.gen_range(0..n), rng.gen_range(0..n));
            lines.join("\n")
        }
        5 => {
            let lines: Vec<&str> = text.split('\n').collect();
            let dup = lines[rng.gen_range(0..lines.len())];
            format!("{text}\n{dup}")
        }
        6 => splice(
            at(rng),
            ["\n", "\r\n", " ", "\u{0}", "#", ":", "é", "\u{feff}"][rng.gen_range(0..8)],
        ),
        7 => format!(
            "{}\n{text}",
            ["Sure!", "Here is the task:", "", "#instruction#"][rng.gen_range(0..4)]
        ),
        8 => text.replacen(
            MARKERS[rng.gen_range(0..3)],
            ["#Instruction#:", "# input #:", "output:", ""][rng.gen_range(0..4)],
            1,
        ),
        _ => {
            let i = at(rng);
            let c = char::from_u32(rng.gen_range(0x20..0x3000)).unwrap_or('?');
            splice(i, &c.to_string())
        }
    }
}

pub fn record(id: &str, corpus: CorpusKind, doc: &str, task: &Task) -> TaskRecord {
    TaskRecord::from_completion(
        id.to_string(),
        Document::standalone(format!("doc-{id}"), corpus, doc),
        task.serialize(),
        "fixture".into(),
        DecodingParams::generation(),
        "2026-01-01T00:00:00Z".into(),
    )
}

const WORDS: &[&str] = &[
    "river", "valley", "court", "appeal", "model", "data", "energy", "garden", "market", "protein",
    "signal", "theorem", "bridge", "forest", "engine", "lease", "notice", "sample", "matrix",
    "harbor", "winter", "castle", "budget", "vaccine",
];

pub fn random_words<R: Rng>(rng: &mut R, n: usize) -> String {
    (0..n)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Prose of roughly `target` characters built from short sentences.
pub fn random_prose<R: Rng>(rng: &mut R, target: usize) -> String {
    let mut out = String::new();
    while out.chars().count() < target {
        let mut s = {
            let n = rng.gen_range(4..14);
            random_words(rng, n)
        };
        s[..1].make_ascii_uppercase();
        out.push_str(&s);
        out.push_str([". ", "! ", "? ", ", ", " "][rng.gen_range(0..5)]);
    }
    out
}
