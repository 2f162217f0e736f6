//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `UPDATE_GOLDENS=1 cargo test -p forge-core --test acceptance` rewrites the
//! committed golden files from the current pipeline output.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use common::{arb_task, fixtures, mutate, oracle_parse, random_prose, random_words, record};
use forge_core::analytics::{
    length_stats, render_length_table, verb_noun_profile, GroupBy, HeuristicAnalyzer, ALL_GROUP,
};
use forge_core::corpus::{
    sample_document, CorpusKind, QaLayout, RawDocument, SamplingPolicy, SamplingReport, SourceSpan,
};
use forge_core::filter::{overlap_score, FilterConfig, FilterOutcome, FilterStages, QualityFilter};
use forge_core::forge::{generate_batch, MetaInstruction};
use forge_core::gateway::{DecodingParams, Gateway};
use forge_core::pipeline::{files, PipelineConfig, Run, RunOptions, META_SEQUENCE};
use forge_core::record::RecordStatus;
use forge_core::review::{aggregate_judgments, aggregate_pairwise, Judgment, PairwiseJudgment};
use forge_core::synthetic::synthetic_backend;
use forge_core::task::{parse_task, Task};
use forge_core::util::{char_slice, derived_rng, read_jsonl};
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- overlap

fn oracle_tokens(text: &str) -> Vec<String> {
    let mut tokens: Vec<String> = Vec::new();
    let mut current = String::new();
    for c in text.chars().chain(std::iter::once(' ')) {
        if c.is_alphanumeric() {
            current.push(c);
        } else if !current.is_empty() {
            let t = current.to_lowercase();
            if !tokens.contains(&t) {
                tokens.push(t);
            }
            current.clear();
        }
    }
    tokens
}

fn oracle_overlap(doc: &str, field: &str) -> Option<f64> {
    let d = oracle_tokens(doc);
    let f = oracle_tokens(field);
    if f.is_empty() {
        return None;
    }
    let mut shared = 0usize;
    for t in &f {
        for u in &d {
            if t == u {
                shared += 1;
                break;
            }
        }
    }
    Some(shared as f64 / f.len() as f64)
}

fn noisy_text<R: Rng>(rng: &mut R, words: usize) -> String {
    const EXTRA: &[&str] = &[
        "Río",
        "ÉCOLE",
        "straße",
        "ΣΟΦΟΣ",
        "数据",
        "x1",
        "42",
        "CO2",
        "naïve",
        "don't",
        "e-mail",
    ];
    let mut out = String::new();
    for _ in 0..words {
        let w = if rng.gen_bool(0.2) {
            EXTRA[rng.gen_range(0..EXTRA.len())].to_string()
        } else {
            random_words(rng, 1)
        };
        let w = if rng.gen_bool(0.3) {
            w.to_uppercase()
        } else {
            w
        };
        out.push_str(&w);
        out.push_str([" ", ", ", ". ", "\n", "--", "/", "  "][rng.gen_range(0..7)]);
    }
    out
}

fn overlap_oracle() -> Outcome {
    let mut rng = derived_rng(1, "acceptance/overlap");
    let pairs: Vec<(String, String)> = (0..10_000)
        .map(|_| {
            let doc = {
                let n = rng.gen_range(0..60);
                noisy_text(&mut rng, n)
            };
            let field = match rng.gen_range(0..4) {
                0 => ".,;".to_string(),
                1 => doc.chars().rev().take(rng.gen_range(0..80)).collect(),
                _ => {
                    let n = rng.gen_range(0..15);
                    noisy_text(&mut rng, n)
                }
            };
            (doc, field)
        })
        .collect();
    let start = Instant::now();
    let mut defined = 0;
    for (doc, field) in &pairs {
        let got = overlap_score(doc, field).ok();
        let want = oracle_overlap(doc, field);
        ensure(got == want, || {
            format!("doc {doc:?} field {field:?}: got {got:?}, oracle {want:?}")
        })?;
        defined += want.is_some() as usize;
    }
    let elapsed = start.elapsed();
    ensure(elapsed.as_secs_f64() < 10.0, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "10000 pairs ({defined} defined) equal to oracle in {:.2}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------- monotonicity

fn filter_monotonicity() -> Outcome {
    let mut rng = derived_rng(2, "acceptance/monotonicity");
    let docs: Vec<_> = (0..500)
        .map(|i| {
            let corpus = CorpusKind::BUILTIN[i % 6].clone();
            forge_core::corpus::Document::standalone(format!("m{i:03}"), corpus, {
                let n = rng.gen_range(200..900);
                random_prose(&mut rng, n)
            })
        })
        .collect();
    let gw = Gateway::mock(synthetic_backend("mono"));
    let run = generate_batch(
        &docs,
        &MetaInstruction::default(),
        &gw,
        &DecodingParams::generation(),
        "t",
    );
    ensure(run.records.len() == 500, || {
        format!("{} records", run.records.len())
    })?;
    let mut previous: Option<(f64, Vec<String>)> = None;
    let mut sizes = Vec::new();
    for step in 0..=10 {
        let theta = step as f64 / 10.0;
        let filter = QualityFilter::new(FilterConfig {
            theta,
            ..FilterConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let passed: Vec<String> = run
            .records
            .iter()
            .filter(|r| r.status == RecordStatus::Parsed)
            .filter_map(|r| {
                let mut r = r.clone();
                matches!(
                    filter.apply(&mut r, &gw, FilterStages::default()),
                    FilterOutcome::Pass
                )
                .then_some(r.id)
            })
            .collect();
        if let Some((prev_theta, prev)) = &previous {
            let escaped: Vec<&String> = passed.iter().filter(|id| !prev.contains(id)).collect();
            ensure(escaped.is_empty(), || {
                format!("θ={theta} passes {escaped:?} rejected at θ={prev_theta}")
            })?;
        }
        sizes.push(passed.len());
        previous = Some((theta, passed));
    }
    ensure(sizes.first() > sizes.last(), || {
        format!("threshold had no effect: {sizes:?}")
    })?;
    Ok(format!("pass-set sizes over θ=0..1: {sizes:?}"))
}

// ------------------------------------------------------------- sampling

fn sampling_bounds() -> Outcome {
    let policy = SamplingPolicy::window(2000, 3500);
    let mut rng = derived_rng(3, "acceptance/sampling");
    let (mut windowed, mut fallback) = (0, 0);
    for i in 0..1000 {
        let len = rng.gen_range(300..12_000);
        let raw = RawDocument {
            id: format!("raw{i}"),
            corpus: CorpusKind::ArXiv,
            text: random_prose(&mut rng, len),
            metadata: BTreeMap::new(),
        };
        let n = raw.text.chars().count();
        let mut report = SamplingReport::default();
        let mut draw_rng = derived_rng(42 + i, "draw");
        let doc = sample_document(
            &raw,
            &policy,
            &QaLayout::Alternating,
            &mut draw_rng,
            &mut report,
        )
        .ok_or_else(|| format!("{} produced nothing", raw.id))?;
        if n >= policy.min_chars {
            windowed += 1;
            ensure((2000..=3500).contains(&doc.char_count), || {
                format!("{}: {} chars from {n}", raw.id, doc.char_count)
            })?;
            let SourceSpan::Range { start, end } = doc.source_span else {
                return Err(format!("{}: windowed doc without a span", raw.id));
            };
            ensure(char_slice(&raw.text, start, end) == doc.text, || {
                format!("{}: span does not reproduce text", raw.id)
            })?;
            ensure(doc.text.chars().count() == doc.char_count, || {
                format!("{}: char_count mismatch", raw.id)
            })?;
        } else {
            fallback += 1;
            ensure(
                doc.text == raw.text && report.whole_fallback == [raw.id.clone()],
                || {
                    format!(
                        "{}: short raw ({n} chars) not reported as whole-document fallback",
                        raw.id
                    )
                },
            )?;
        }
    }
    Ok(format!(
        "{windowed} windows within 2000..=3500, {fallback} reported fallbacks"
    ))
}

// ----------------------------------------------------------- round trip

fn round_trip() -> Outcome {
    let cases = AtomicUsize::new(0);
    let empty_inputs = AtomicUsize::new(0);
    let multiline = AtomicUsize::new(0);
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&arb_task(), |t: Task| {
            cases.fetch_add(1, Ordering::Relaxed);
            if t.input.is_empty() {
                empty_inputs.fetch_add(1, Ordering::Relaxed);
            }
            if [&t.instruction, &t.input, &t.output]
                .iter()
                .any(|f| f.contains('\n'))
            {
                multiline.fetch_add(1, Ordering::Relaxed);
            }
            proptest::prop_assert_eq!(parse_task(&t.serialize()), Ok(t.clone()));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let (n, e, m) = (
        cases.into_inner(),
        empty_inputs.into_inner(),
        multiline.into_inner(),
    );
    ensure(n >= 10_000 && e > 0 && m > 0, || {
        format!("cases {n}, empty inputs {e}, multi-line {m}")
    })?;
    Ok(format!(
        "{n} tasks round-tripped ({e} empty inputs, {m} multi-line)"
    ))
}

// ----------------------------------------------------------- golden run

const GOLDEN_FILES: [&str; 5] = [
    files::RETAINED,
    files::REJECTS,
    files::SFT,
    files::DISCRIMINATOR,
    files::DISCRIMINATOR_AUDIT,
];

fn run_fixture_pipeline(dir: &Path) -> Result<(), String> {
    let fx = fixtures();
    let config = PipelineConfig::load(&fx.join("pipeline.toml")).map_err(|e| e.to_string())?;
    let mut run = Run::open(dir, config, &fx, RunOptions::default()).map_err(|e| e.to_string())?;
    for stage in META_SEQUENCE {
        let out = run.run_stage(stage).map_err(|e| e.to_string())?;
        ensure(out.counters.is_conserved(), || {
            format!("{stage}: counters {:?}", out.counters)
        })?;
    }
    let c = run.manifest().counters;
    ensure(c.sampled == 60, || format!("sampled {}", c.sampled))
}

fn golden_run() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_fixture_pipeline(a.path())?;
    run_fixture_pipeline(b.path())?;
    let golden = fixtures().join("golden");
    let update = std::env::var_os("UPDATE_GOLDENS").is_some();
    let mut lines = 0;
    for file in GOLDEN_FILES {
        let first = std::fs::read(a.path().join(file)).map_err(|e| format!("{file}: {e}"))?;
        let second = std::fs::read(b.path().join(file)).map_err(|e| format!("{file}: {e}"))?;
        ensure(first == second, || format!("{file} differs between runs"))?;
        let path = golden.join(file);
        if update {
            std::fs::create_dir_all(&golden).map_err(|e| e.to_string())?;
            std::fs::write(&path, &first).map_err(|e| e.to_string())?;
        }
        let committed =
            std::fs::read(&path).map_err(|e| format!("golden {}: {e}", path.display()))?;
        ensure(committed == first, || {
            format!("{file} does not match the committed golden")
        })?;
        lines += first.iter().filter(|b| **b == b'\n').count();
    }
    Ok(format!(
        "60 documents; {} files ({lines} lines) identical across runs and to goldens",
        GOLDEN_FILES.len()
    ))
}

// ------------------------------------------------------------ stats

fn two_pass(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn close(got: f64, want: f64) -> bool {
    if want == 0.0 {
        got.abs() <= 1e-9
    } else {
        ((got - want) / want).abs() <= 1e-9
    }
}

fn stats_parity() -> Outcome {
    let mut rng = derived_rng(4, "acceptance/stats");
    let records: Vec<_> = (0..200)
        .map(|i| {
            let pad = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
                random_prose(rng, n).trim().to_string()
            };
            let instruction = {
                let n = rng.gen_range(10..300);
                pad(&mut rng, n)
            };
            let input = if rng.gen_bool(0.3) {
                String::new()
            } else {
                format!("é {}", {
                    let n = rng.gen_range(1..3000);
                    pad(&mut rng, n)
                })
            };
            let output = {
                let n = rng.gen_range(1..2000);
                pad(&mut rng, n)
            };
            let t = Task::new(instruction, input, output).expect("valid task");
            record(
                &format!("s{i}"),
                CorpusKind::BUILTIN[i % 6].clone(),
                "doc",
                &t,
            )
        })
        .collect();
    let mut groups = length_stats(&records, GroupBy::Corpus).map_err(|e| e.to_string())?;
    groups.extend(length_stats(&records, GroupBy::All).map_err(|e| e.to_string())?);
    let mut expected_rows = BTreeMap::new();
    for (group, stats) in &groups {
        let members: Vec<&Task> = records
            .iter()
            .filter(|r| group == ALL_GROUP || r.document.corpus.tag() == group)
            .map(|r| r.task.as_ref().unwrap())
            .collect();
        let mut cells = vec![members.len().to_string()];
        for (name, field, got) in [
            ("instruction", 0, stats.instruction),
            ("input", 1, stats.input),
            ("output", 2, stats.output),
        ] {
            let values: Vec<f64> = members
                .iter()
                .map(|t| [&t.instruction, &t.input, &t.output][field].chars().count() as f64)
                .collect();
            let (mean, std) = two_pass(&values);
            ensure(
                got.count == values.len() && close(got.mean, mean) && close(got.std, std),
                || {
                    format!(
                        "{group}/{name}: got ({}, {}, {}), oracle ({}, {mean}, {std})",
                        got.count,
                        got.mean,
                        got.std,
                        values.len()
                    )
                },
            )?;
            cells.push(format!("{} ± {}", mean.round(), std.round()));
        }
        expected_rows.insert(group.clone(), cells);
    }
    ensure(groups[ALL_GROUP].count() == 200, || {
        "all-group count".into()
    })?;
    let table = render_length_table(&groups);
    let mut rows = 0;
    for line in table.lines().skip(3) {
        let cells: Vec<&str> = line.split(" | ").map(str::trim).collect();
        let want = expected_rows
            .get(cells[0])
            .ok_or_else(|| format!("unexpected row {line:?}"))?;
        ensure(cells[1..] == want[..], || {
            format!("row {line:?}, expected {want:?}")
        })?;
        rows += 1;
    }
    ensure(rows == groups.len(), || {
        format!("{rows} table rows for {} groups", groups.len())
    })?;
    let all_row = table
        .lines()
        .find(|l| l.starts_with(ALL_GROUP))
        .unwrap_or_default()
        .to_string();
    Ok(format!(
        "{} groups within 1e-9; e.g. `{all_row}`",
        groups.len()
    ))
}

// ------------------------------------------------------------ fuzzing

fn random_task<R: Rng>(rng: &mut R) -> Task {
    loop {
        let field = |rng: &mut R, lines: usize| -> String {
            (0..lines)
                .map(|_| {
                    let n = rng.gen_range(0..8);
                    noisy_text(rng, n)
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        let n = rng.gen_range(1..3);
        let input = if rng.gen_bool(0.3) {
            String::new()
        } else {
            field(rng, n)
        };
        let (a, b) = (rng.gen_range(1..3), rng.gen_range(1..4));
        if let Ok(t) = Task::new(field(rng, a), input, field(rng, b)) {
            return t;
        }
    }
}

fn parser_fuzz() -> Outcome {
    let mut rng = derived_rng(5, "acceptance/fuzz");
    let mut by_code: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut conforming = 0;
    for i in 0..100_000 {
        let base = random_task(&mut rng).serialize();
        let mut text = mutate(&base, &mut rng);
        for _ in 0..rng.gen_range(0..3) {
            text = mutate(&text, &mut rng);
        }
        let parsed = catch_unwind(|| parse_task(&text))
            .map_err(|_| format!("case {i}: parse_task panicked on {text:?}"))?;
        match (parsed, oracle_parse(&text)) {
            (Ok(t), Ok(want)) => {
                ensure(t == want, || {
                    format!("case {i}: {text:?} parsed as {t:?}, oracle {want:?}")
                })?;
                ensure(t.validate().is_ok(), || {
                    format!("case {i}: parsed task violates invariants: {text:?} -> {t:?}")
                })?;
                conforming += 1;
            }
            (Err(e), Err(code)) => {
                ensure(e.code() == code, || {
                    format!("case {i}: {text:?} classified {}, oracle {code}", e.code())
                })?;
                *by_code.entry(code).or_insert(0) += 1;
            }
            (got, want) => {
                return Err(format!(
                    "case {i}: {text:?}: parser {got:?}, oracle {want:?}"
                ))
            }
        }
    }
    ensure(by_code.len() >= 6, || {
        format!("mutations reached too few error classes: {by_code:?}")
    })?;
    Ok(format!(
        "100000 mutations, {conforming} conforming, errors {by_code:?}"
    ))
}

// ------------------------------------------------------------ diversity

fn diversity_conservation() -> Outcome {
    const VERBS: &[&str] = &[
        "Write",
        "Summarize",
        "Explain",
        "List",
        "Classify",
        "Translate",
        "Give",
        "Identify",
        "Describe",
        "Rewrite",
    ];
    const NOUNS: &[&str] = &[
        "story",
        "paragraph",
        "reasons",
        "sentence",
        "review",
        "poem",
        "list",
        "title",
        "answer",
        "summary",
    ];
    let mut rng = derived_rng(6, "acceptance/diversity");
    let instructions: Vec<String> = (0..1000)
        .map(|_| match rng.gen_range(0..6) {
            0 => {
                let n = rng.gen_range(1..6);
                random_words(&mut rng, n)
            }
            1 => format!("What is the {}?", NOUNS[rng.gen_range(0..NOUNS.len())]),
            2 => format!(
                "please {} the {}.",
                VERBS[rng.gen_range(0..VERBS.len())].to_lowercase(),
                NOUNS[rng.gen_range(0..NOUNS.len())]
            ),
            _ => format!(
                "{} a {} {} about {}.",
                VERBS[rng.gen_range(0..VERBS.len())],
                ["short", "", "detailed"][rng.gen_range(0..3)],
                NOUNS[rng.gen_range(0..NOUNS.len())],
                random_words(&mut rng, 2)
            ),
        })
        .collect();
    let profile =
        verb_noun_profile(&instructions, &HeuristicAnalyzer).map_err(|e| e.to_string())?;
    let pair_count: usize = profile.pairs.values().sum();
    ensure(pair_count + profile.unparsed_count == 1000, || {
        format!(
            "{pair_count} pairs + {} unparsed != 1000",
            profile.unparsed_count
        )
    })?;
    ensure(pair_count > 0 && profile.unparsed_count > 0, || {
        "degenerate fixture".into()
    })?;
    Ok(format!(
        "{pair_count} pairs + {} unparsed = 1000",
        profile.unparsed_count
    ))
}

// ---------------------------------------------------------- aggregation

fn aggregation() -> Outcome {
    let dir = fixtures().join("review");
    let judgments: Vec<Judgment> =
        read_jsonl(&dir.join("judgments.jsonl")).map_err(|e| e.to_string())?;
    let pooled = aggregate_judgments(&judgments);
    // (percent, positive, applicable) computed by hand from the fixture
    let expect = |name: &str, m: &forge_core::review::Metric, pct: f64, pos: usize, app: usize| {
        ensure(
            m.percent == Some(pct) && m.positive == pos && m.applicable == app,
            || format!("{name}: got {m:?}, expected {pct}% ({pos}/{app})"),
        )
    };
    expect("cl_p", &pooled.cl_p, 85.0, 17, 20)?;
    expect("ha_i", &pooled.ha_i, 25.0, 3, 12)?;
    expect("ha_o", &pooled.ha_o, 10.0, 2, 20)?;
    expect("fl_i", &pooled.fl_i, 100.0 * 10.0 / 12.0, 10, 12)?;
    expect("fl_o", &pooled.fl_o, 95.0, 19, 20)?;
    let per = |who: &str| {
        aggregate_judgments(
            &judgments
                .iter()
                .filter(|j| j.annotator == who)
                .cloned()
                .collect::<Vec<_>>(),
        )
    };
    let a1 = per("a1");
    expect("a1 cl_p", &a1.cl_p, 80.0, 8, 10)?;
    expect("a1 ha_i", &a1.ha_i, 50.0, 1, 2)?;
    expect("a1 fl_i", &a1.fl_i, 100.0, 2, 2)?;
    let a2 = per("a2");
    expect("a2 ha_i", &a2.ha_i, 20.0, 2, 10)?;
    expect("a2 ha_o", &a2.ha_o, 0.0, 0, 10)?;
    expect("a2 fl_i", &a2.fl_i, 80.0, 8, 10)?;

    let pairwise: Vec<PairwiseJudgment> =
        read_jsonl(&dir.join("pairwise.jsonl")).map_err(|e| e.to_string())?;
    let odd: Vec<PairwiseJudgment> =
        read_jsonl(&dir.join("pairwise_odd.jsonl")).map_err(|e| e.to_string())?;
    for (data, subject, counts, rounded) in [
        (&pairwise, "forge", (6, 3, 1), [60.0, 30.0, 10.0]),
        (&pairwise, "baseline", (1, 3, 6), [10.0, 30.0, 60.0]),
        (&odd, "forge", (4, 2, 1), [57.1, 28.6, 14.3]),
    ] {
        let s = aggregate_pairwise(data, subject);
        ensure(
            (s.wins, s.ties, s.losses) == counts && s.rounded == rounded,
            || format!("{subject}: {s:?}"),
        )?;
        let total = s.win + s.tie + s.lose;
        ensure((total - 100.0).abs() <= 0.1, || {
            format!("{subject}: win+tie+lose = {total}")
        })?;
        ensure((rounded.iter().sum::<f64>() - 100.0).abs() <= 0.1, || {
            format!("{subject}: rounded sum")
        })?;
    }
    Ok("pooled, per-annotator and pairwise figures equal hand-computed values".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("overlap score equals brute-force oracle", overlap_oracle),
        (
            "filter pass-sets nested as theta rises",
            filter_monotonicity,
        ),
        ("window sampling bounds and fallback", sampling_bounds),
        ("task serialization round trip", round_trip),
        ("end-to-end golden run", golden_run),
        ("length statistics parity and table layout", stats_parity),
        ("parser robustness under mutation", parser_fuzz),
        (
            "verb/noun profile count conservation",
            diversity_conservation,
        ),
        ("judgment aggregation oracles", aggregation),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name} [{secs:.2}s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} [{secs:.2}s]: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
