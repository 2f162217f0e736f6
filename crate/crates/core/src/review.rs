//! Human review: judgment types, aggregation and the per-annotator queues
//! behind the review HTTP API.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use rand::seq::{IteratorRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forge::Negative;
use crate::record::TaskRecord;
use crate::util::{derived_rng, read_jsonl};

/// Per-example judgment. Input metrics are `None` (n/a) exactly when the
/// task has no input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub record_id: String,
    pub cl_p: bool,
    pub ha_i: Option<bool>,
    pub ha_o: bool,
    pub fl_i: Option<bool>,
    pub fl_o: bool,
    pub annotator: String,
    #[serde(default)]
    pub timestamp: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairVerdict {
    LeftWin,
    Tie,
    RightWin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseJudgment {
    pub left_id: String,
    pub right_id: String,
    pub document_id: String,
    pub verdict: PairVerdict,
    pub annotator: String,
    #[serde(default)]
    pub timestamp: String,
    /// Filled in by the server; clients never see system names.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left_system: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right_system: Option<String>,
}

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ReviewError {
    pub fn status_code(&self) -> u16 {
        match self {
            ReviewError::Conflict(_) => 409,
            ReviewError::BadRequest(_) => 400,
            ReviewError::NotFound(_) => 404,
            ReviewError::Io { .. } => 500,
        }
    }
}

/// Percentage of `true` among applicable judgments of a metric.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metric {
    pub percent: Option<f64>,
    pub positive: usize,
    pub applicable: usize,
}

impl Metric {
    fn of(values: impl Iterator<Item = Option<bool>>) -> Self {
        let (mut positive, mut applicable) = (0, 0);
        for v in values.flatten() {
            applicable += 1;
            positive += v as usize;
        }
        let percent = (applicable > 0).then(|| 100.0 * positive as f64 / applicable as f64);
        Metric {
            percent,
            positive,
            applicable,
        }
    }
}

/// Hallucination metrics are raw rates: lower is better.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub judgments: usize,
    pub cl_p: Metric,
    pub ha_i: Metric,
    pub ha_o: Metric,
    pub fl_i: Metric,
    pub fl_o: Metric,
}

pub fn aggregate_judgments(judgments: &[Judgment]) -> MetricReport {
    let j = || judgments.iter();
    MetricReport {
        judgments: judgments.len(),
        cl_p: Metric::of(j().map(|x| Some(x.cl_p))),
        ha_i: Metric::of(j().map(|x| x.ha_i)),
        ha_o: Metric::of(j().map(|x| Some(x.ha_o))),
        fl_i: Metric::of(j().map(|x| x.fl_i)),
        fl_o: Metric::of(j().map(|x| Some(x.fl_o))),
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairwiseSummary {
    pub subject: String,
    pub judged: usize,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub win: f64,
    pub tie: f64,
    pub lose: f64,
    /// Percentages rounded to one decimal.
    pub rounded: [f64; 3],
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Win/tie/lose rates of `subject` over judgments where it took part.
pub fn aggregate_pairwise(judgments: &[PairwiseJudgment], subject: &str) -> PairwiseSummary {
    let mut s = PairwiseSummary {
        subject: subject.to_string(),
        ..Default::default()
    };
    for j in judgments {
        let left = j.left_system.as_deref() == Some(subject);
        let right = j.right_system.as_deref() == Some(subject);
        if left == right {
            continue;
        }
        s.judged += 1;
        match (j.verdict, left) {
            (PairVerdict::Tie, _) => s.ties += 1,
            (PairVerdict::LeftWin, true) | (PairVerdict::RightWin, false) => s.wins += 1,
            _ => s.losses += 1,
        }
    }
    if s.judged > 0 {
        let pct = |n: usize| 100.0 * n as f64 / s.judged as f64;
        (s.win, s.tie, s.lose) = (pct(s.wins), pct(s.ties), pct(s.losses));
        s.rounded = [round1(s.win), round1(s.tie), round1(s.lose)];
    }
    s
}

/// Records judged unclear or with a hallucinated output, in dataset order.
pub fn export_review_negatives(judgments: &[Judgment], dataset: &[TaskRecord]) -> Vec<Negative> {
    let mut reasons: HashMap<&str, &str> = HashMap::new();
    for j in judgments {
        let reason = if !j.cl_p {
            "review_unclear"
        } else if j.ha_o {
            "review_hallucinated_output"
        } else {
            continue;
        };
        reasons.entry(j.record_id.as_str()).or_insert(reason);
    }
    dataset
        .iter()
        .filter_map(|r| {
            reasons.get(r.id.as_str()).map(|reason| Negative {
                reason: reason.to_string(),
                record: r.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewMode {
    #[default]
    Single,
    Pairwise,
}

/// What the client sees of a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewCard {
    pub record_id: String,
    pub document_id: String,
    pub document_text: String,
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub input_empty: bool,
}

impl ReviewCard {
    fn of(record: &TaskRecord) -> Self {
        let t = record.task();
        ReviewCard {
            record_id: record.id.clone(),
            document_id: record.document.id.clone(),
            document_text: record.document.text.clone(),
            instruction: t.instruction.clone(),
            input: t.input.clone(),
            output: t.output.clone(),
            input_empty: !t.has_input(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueItem {
    pub mode: ReviewMode,
    pub record: Option<ReviewCard>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<[ReviewCard; 2]>,
    pub remaining: usize,
    pub done: bool,
}

/// Two systems' records for the same source document.
#[derive(Debug, Clone)]
pub struct ReviewPair {
    pub a: (String, TaskRecord),
    pub b: (String, TaskRecord),
}

impl ReviewPair {
    pub fn new(
        system_a: &str,
        a: TaskRecord,
        system_b: &str,
        b: TaskRecord,
    ) -> Result<Self, ReviewError> {
        if a.document.id != b.document.id {
            return Err(ReviewError::BadRequest(format!(
                "pair {} / {} references different documents ({} vs {})",
                a.id, b.id, a.document.id, b.document.id
            )));
        }
        if a.id == b.id && system_a == system_b {
            return Err(ReviewError::BadRequest(format!(
                "pair repeats record {}",
                a.id
            )));
        }
        if a.task.is_none() || b.task.is_none() {
            return Err(ReviewError::BadRequest(
                "pair contains a record without a task".into(),
            ));
        }
        Ok(ReviewPair {
            a: (system_a.to_string(), a),
            b: (system_b.to_string(), b),
        })
    }
}

/// Joins two systems' datasets on source document id, in `a`'s order.
pub fn pair_by_document(
    system_a: &str,
    a: &[TaskRecord],
    system_b: &str,
    b: &[TaskRecord],
) -> Vec<ReviewPair> {
    let by_doc: HashMap<&str, &TaskRecord> = b
        .iter()
        .filter(|r| r.task.is_some())
        .map(|r| (r.document.id.as_str(), r))
        .collect();
    a.iter()
        .filter_map(|r| {
            let other = by_doc.get(r.document.id.as_str())?;
            ReviewPair::new(system_a, r.clone(), system_b, (*other).clone()).ok()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ReviewConfig {
    pub mode: ReviewMode,
    pub sample_size: usize,
    pub seed: u64,
    /// Directory holding `judgments.jsonl` and `pairwise.jsonl`. `None` keeps
    /// judgments in memory only.
    pub store: Option<PathBuf>,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        ReviewConfig {
            mode: ReviewMode::Single,
            sample_size: 50,
            seed: 0,
            store: None,
        }
    }
}

// pair order as served: (pair index, a on the left)
type Served = (usize, bool);

#[derive(Default)]
struct AnnotatorQueue {
    order: Vec<usize>,
    cursor: usize,
    outstanding: Option<Served>,
    judged: HashSet<usize>,
    serves: u64,
}

struct State {
    queues: HashMap<String, AnnotatorQueue>,
    judgments: Vec<Judgment>,
    pairwise: Vec<PairwiseJudgment>,
}

/// Review queues and judgment store. Safe to share across request handlers.
pub struct ReviewService {
    config: ReviewConfig,
    records: Vec<TaskRecord>,
    pairs: Vec<ReviewPair>,
    index: HashMap<String, usize>,
    state: Mutex<State>,
}

pub const JUDGMENTS_FILE: &str = "judgments.jsonl";
pub const PAIRWISE_FILE: &str = "pairwise.jsonl";

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl ReviewService {
    pub fn single(records: Vec<TaskRecord>, config: ReviewConfig) -> Result<Self, ReviewError> {
        let records: Vec<_> = records.into_iter().filter(|r| r.task.is_some()).collect();
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        Self::build(
            ReviewConfig {
                mode: ReviewMode::Single,
                ..config
            },
            records,
            Vec::new(),
            index,
        )
    }

    pub fn pairwise(pairs: Vec<ReviewPair>, config: ReviewConfig) -> Result<Self, ReviewError> {
        Self::build(
            ReviewConfig {
                mode: ReviewMode::Pairwise,
                ..config
            },
            Vec::new(),
            pairs,
            HashMap::new(),
        )
    }

    fn build(
        config: ReviewConfig,
        records: Vec<TaskRecord>,
        pairs: Vec<ReviewPair>,
        index: HashMap<String, usize>,
    ) -> Result<Self, ReviewError> {
        let service = ReviewService {
            config,
            records,
            pairs,
            index,
            state: Mutex::new(State {
                queues: HashMap::new(),
                judgments: Vec::new(),
                pairwise: Vec::new(),
            }),
        };
        service.restore()?;
        Ok(service)
    }

    fn store_path(&self, name: &str) -> Option<PathBuf> {
        self.config.store.as_ref().map(|d| d.join(name))
    }

    fn restore(&self) -> Result<(), ReviewError> {
        let load = |name: &str| -> Result<Option<PathBuf>, ReviewError> {
            Ok(self.store_path(name).filter(|p| p.exists()))
        };
        let io = |path: &Path, source| ReviewError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(p) = load(JUDGMENTS_FILE)? {
            for j in read_jsonl::<Judgment>(&p).map_err(|e| io(&p, e))? {
                if let Some(&i) = self.index.get(&j.record_id) {
                    self.with_queue(&j.annotator, |q| {
                        q.judged.insert(i);
                    });
                }
                self.state.lock().judgments.push(j);
            }
        }
        if let Some(p) = load(PAIRWISE_FILE)? {
            for j in read_jsonl::<PairwiseJudgment>(&p).map_err(|e| io(&p, e))? {
                if let Some(i) = self.pair_index(&j.left_id, &j.right_id) {
                    self.with_queue(&j.annotator, |q| {
                        q.judged.insert(i);
                    });
                }
                self.state.lock().pairwise.push(j);
            }
        }
        Ok(())
    }

    fn pair_index(&self, x: &str, y: &str) -> Option<usize> {
        self.pairs.iter().position(|p| {
            let (a, b) = (p.a.1.id.as_str(), p.b.1.id.as_str());
            (a, b) == (x, y) || (b, a) == (x, y)
        })
    }

    pub fn mode(&self) -> ReviewMode {
        self.config.mode
    }

    fn universe(&self) -> usize {
        match self.config.mode {
            ReviewMode::Single => self.records.len(),
            ReviewMode::Pairwise => self.pairs.len(),
        }
    }

    fn new_queue(&self, annotator: &str) -> AnnotatorQueue {
        let mut rng = derived_rng(self.config.seed, &format!("review-queue/{annotator}"));
        let mut order = (0..self.universe()).choose_multiple(&mut rng, self.config.sample_size);
        order.shuffle(&mut rng);
        AnnotatorQueue {
            order,
            ..Default::default()
        }
    }

    fn with_queue<T>(&self, annotator: &str, f: impl FnOnce(&mut AnnotatorQueue) -> T) -> T {
        let mut state = self.state.lock();
        let queue = state
            .queues
            .entry(annotator.to_string())
            .or_insert_with(|| self.new_queue(annotator));
        f(queue)
    }

    /// The annotator's sampled items in serve order.
    pub fn queue_ids(&self, annotator: &str) -> Vec<String> {
        self.with_queue(annotator, |q| {
            q.order
                .iter()
                .map(|&i| match self.config.mode {
                    ReviewMode::Single => self.records[i].id.clone(),
                    ReviewMode::Pairwise => {
                        format!("{}|{}", self.pairs[i].a.1.id, self.pairs[i].b.1.id)
                    }
                })
                .collect()
        })
    }

    /// The next item for an annotator. An item served but not yet judged is
    /// served again, in the same orientation.
    pub fn next(&self, annotator: &str) -> Result<QueueItem, ReviewError> {
        if annotator.trim().is_empty() {
            return Err(ReviewError::BadRequest("annotator id is required".into()));
        }
        let seed = self.config.seed;
        let served = self.with_queue(annotator, |q| {
            if q.outstanding.is_none() {
                while q.cursor < q.order.len() && q.judged.contains(&q.order[q.cursor]) {
                    q.cursor += 1;
                }
                if q.cursor < q.order.len() {
                    let i = q.order[q.cursor];
                    q.cursor += 1;
                    q.serves += 1;
                    let mut rng =
                        derived_rng(seed, &format!("review-side/{annotator}/{}", q.serves));
                    q.outstanding = Some((i, rng.gen_bool(0.5)));
                }
            }
            let remaining = q.order.iter().filter(|i| !q.judged.contains(i)).count();
            (q.outstanding, remaining)
        });
        let (outstanding, remaining) = served;
        let mode = self.config.mode;
        let Some((i, a_left)) = outstanding else {
            return Ok(QueueItem {
                mode,
                record: None,
                pair: None,
                remaining: 0,
                done: true,
            });
        };
        Ok(match mode {
            ReviewMode::Single => QueueItem {
                mode,
                record: Some(ReviewCard::of(&self.records[i])),
                pair: None,
                remaining,
                done: false,
            },
            ReviewMode::Pairwise => {
                let p = &self.pairs[i];
                let (l, r) = if a_left {
                    (&p.a.1, &p.b.1)
                } else {
                    (&p.b.1, &p.a.1)
                };
                QueueItem {
                    mode,
                    record: None,
                    pair: Some([ReviewCard::of(l), ReviewCard::of(r)]),
                    remaining,
                    done: false,
                }
            }
        })
    }

    fn append<T: Serialize>(&self, name: &str, value: &T) -> Result<(), ReviewError> {
        let Some(path) = self.store_path(name) else {
            return Ok(());
        };
        let io = |source| ReviewError::Io {
            path: path.clone(),
            source,
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        let mut line = serde_json::to_vec(value).expect("judgment serializes");
        line.push(b'\n');
        file.write_all(&line).map_err(io)?;
        file.sync_data().map_err(io)
    }

    pub fn submit(&self, mut judgment: Judgment) -> Result<Judgment, ReviewError> {
        if self.config.mode != ReviewMode::Single {
            return Err(ReviewError::BadRequest("server is in pairwise mode".into()));
        }
        let &i = self
            .index
            .get(&judgment.record_id)
            .ok_or_else(|| ReviewError::NotFound(format!("record {}", judgment.record_id)))?;
        let has_input = self.records[i].task().has_input();
        if judgment.ha_i.is_some() != has_input || judgment.fl_i.is_some() != has_input {
            return Err(ReviewError::BadRequest(format!(
                "input metrics must be {} for record {}",
                if has_input { "answered" } else { "n/a" },
                judgment.record_id
            )));
        }
        if judgment.timestamp.is_empty() {
            judgment.timestamp = now();
        }
        // holding the lock across the append serializes writes
        let mut state = self.state.lock();
        let queue = state.queues.get_mut(&judgment.annotator).ok_or_else(|| {
            ReviewError::Conflict(format!("nothing served to {}", judgment.annotator))
        })?;
        if queue.judged.contains(&i) {
            return Err(ReviewError::Conflict(format!(
                "record {} already judged",
                judgment.record_id
            )));
        }
        if queue.outstanding.map(|(o, _)| o) != Some(i) {
            return Err(ReviewError::Conflict(format!(
                "record {} was not served",
                judgment.record_id
            )));
        }
        self.append(JUDGMENTS_FILE, &judgment)?;
        queue.judged.insert(i);
        queue.outstanding = None;
        state.judgments.push(judgment.clone());
        Ok(judgment)
    }

    pub fn submit_pairwise(
        &self,
        mut judgment: PairwiseJudgment,
    ) -> Result<PairwiseJudgment, ReviewError> {
        if self.config.mode != ReviewMode::Pairwise {
            return Err(ReviewError::BadRequest("server is in single mode".into()));
        }
        if judgment.left_id == judgment.right_id {
            return Err(ReviewError::BadRequest("left and right must differ".into()));
        }
        let i = self
            .pair_index(&judgment.left_id, &judgment.right_id)
            .ok_or_else(|| {
                ReviewError::NotFound(format!("pair {} / {}", judgment.left_id, judgment.right_id))
            })?;
        let pair = &self.pairs[i];
        if judgment.document_id != pair.a.1.document.id {
            return Err(ReviewError::BadRequest(format!(
                "pair belongs to document {}",
                pair.a.1.document.id
            )));
        }
        if judgment.timestamp.is_empty() {
            judgment.timestamp = now();
        }
        let mut state = self.state.lock();
        let queue = state.queues.get_mut(&judgment.annotator).ok_or_else(|| {
            ReviewError::Conflict(format!("nothing served to {}", judgment.annotator))
        })?;
        if queue.judged.contains(&i) {
            return Err(ReviewError::Conflict("pair already judged".into()));
        }
        let Some((o, a_left)) = queue.outstanding.filter(|(o, _)| *o == i) else {
            return Err(ReviewError::Conflict("pair was not served".into()));
        };
        debug_assert_eq!(o, i);
        let (left, right) = if a_left {
            (&pair.a, &pair.b)
        } else {
            (&pair.b, &pair.a)
        };
        if judgment.left_id != left.1.id {
            return Err(ReviewError::Conflict(
                "sides differ from the served order".into(),
            ));
        }
        judgment.left_system = Some(left.0.clone());
        judgment.right_system = Some(right.0.clone());
        self.append(PAIRWISE_FILE, &judgment)?;
        queue.judged.insert(i);
        queue.outstanding = None;
        state.pairwise.push(judgment.clone());
        Ok(judgment)
    }

    pub fn judgments(&self) -> Vec<Judgment> {
        self.state.lock().judgments.clone()
    }

    pub fn pairwise_judgments(&self) -> Vec<PairwiseJudgment> {
        self.state.lock().pairwise.clone()
    }

    pub fn report(&self) -> ReviewReport {
        let state = self.state.lock();
        let systems: Vec<String> = {
            let mut s: Vec<String> = self
                .pairs
                .iter()
                .flat_map(|p| [p.a.0.clone(), p.b.0.clone()])
                .collect();
            s.sort();
            s.dedup();
            s
        };
        build_report(
            self.config.mode,
            &state.judgments,
            &state.pairwise,
            &systems,
        )
    }

    pub fn export_negatives(&self) -> Vec<Negative> {
        export_review_negatives(&self.state.lock().judgments, &self.records)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewReport {
    pub mode: ReviewMode,
    pub pooled: MetricReport,
    pub per_annotator: BTreeMap<String, MetricReport>,
    pub pairwise: Vec<PairwiseSummary>,
    pub pairwise_per_annotator: BTreeMap<String, Vec<PairwiseSummary>>,
}

pub fn build_report(
    mode: ReviewMode,
    judgments: &[Judgment],
    pairwise: &[PairwiseJudgment],
    systems: &[String],
) -> ReviewReport {
    let mut by_annotator: BTreeMap<String, Vec<Judgment>> = BTreeMap::new();
    for j in judgments {
        by_annotator
            .entry(j.annotator.clone())
            .or_default()
            .push(j.clone());
    }
    let mut pw_by_annotator: BTreeMap<String, Vec<PairwiseJudgment>> = BTreeMap::new();
    for j in pairwise {
        pw_by_annotator
            .entry(j.annotator.clone())
            .or_default()
            .push(j.clone());
    }
    let summaries = |js: &[PairwiseJudgment]| {
        systems
            .iter()
            .map(|s| aggregate_pairwise(js, s))
            .collect::<Vec<_>>()
    };
    ReviewReport {
        mode,
        pooled: aggregate_judgments(judgments),
        per_annotator: by_annotator
            .iter()
            .map(|(a, js)| (a.clone(), aggregate_judgments(js)))
            .collect(),
        pairwise: summaries(pairwise),
        pairwise_per_annotator: pw_by_annotator
            .iter()
            .map(|(a, js)| (a.clone(), summaries(js)))
            .collect(),
    }
}

fn pct(m: &Metric) -> String {
    m.percent
        .map_or_else(|| "n/a".to_string(), |p| format!("{p:.1}"))
}

impl ReviewReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut rows = vec![("pooled".to_string(), &self.pooled)];
        rows.extend(self.per_annotator.iter().map(|(a, m)| (a.clone(), m)));
        if self.pooled.judgments > 0 {
            out.push_str("annotator | n | CL_P | HA_I | HA_O | FL_I | FL_O\n");
            for (name, m) in rows {
                out.push_str(&format!(
                    "{name} | {} | {} | {} | {} | {} | {}\n",
                    m.judgments,
                    pct(&m.cl_p),
                    pct(&m.ha_i),
                    pct(&m.ha_o),
                    pct(&m.fl_i),
                    pct(&m.fl_o)
                ));
            }
        }
        if self.pairwise.iter().any(|s| s.judged > 0) {
            out.push_str("system | n | win % | tie % | lose %\n");
            for s in &self.pairwise {
                let [w, t, l] = s.rounded;
                out.push_str(&format!(
                    "{} | {} | {w:.1} | {t:.1} | {l:.1}\n",
                    s.subject, s.judged
                ));
            }
        }
        if out.is_empty() {
            out.push_str("no judgments\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusKind, Document};
    use crate::gateway::DecodingParams;
    use crate::record::RecordStatus;
    use crate::task::Task;

    fn record(id: &str, doc: &str, input: &str) -> TaskRecord {
        let t = Task::new(format!("Instruction {id}"), input, "out").unwrap();
        let mut r = TaskRecord::from_completion(
            id.into(),
            Document::standalone(doc, CorpusKind::Wikipedia, "text"),
            t.serialize(),
            "m".into(),
            DecodingParams::generation(),
            "t".into(),
        );
        r.advance(RecordStatus::Retained).unwrap();
        r
    }

    fn judgment(id: &str, cl: bool, ha_i: Option<bool>, ha_o: bool) -> Judgment {
        Judgment {
            record_id: id.into(),
            cl_p: cl,
            ha_i,
            ha_o,
            fl_i: ha_i.map(|_| true),
            fl_o: true,
            annotator: "a".into(),
            timestamp: String::new(),
        }
    }

    #[test]
    fn percentages_and_na() {
        let mut js: Vec<_> = (0..50)
            .map(|i| judgment(&i.to_string(), i >= 3, None, false))
            .collect();
        let r = aggregate_judgments(&js);
        assert_eq!(r.cl_p.percent, Some(94.0));
        assert_eq!(r.ha_i.percent, None);
        assert_eq!(r.fl_i.applicable, 0);
        js[0].ha_i = Some(true);
        js[1].ha_i = Some(false);
        assert_eq!(aggregate_judgments(&js).ha_i.percent, Some(50.0));
    }

    fn pw(verdict: PairVerdict, left: &str, right: &str) -> PairwiseJudgment {
        PairwiseJudgment {
            left_id: "l".into(),
            right_id: "r".into(),
            document_id: "d".into(),
            verdict,
            annotator: "a".into(),
            timestamp: String::new(),
            left_system: Some(left.into()),
            right_system: Some(right.into()),
        }
    }

    #[test]
    fn pairwise_rounding() {
        let mut js = Vec::new();
        js.extend((0..69).map(|i| {
            if i % 2 == 0 {
                pw(PairVerdict::LeftWin, "s", "o")
            } else {
                pw(PairVerdict::RightWin, "o", "s")
            }
        }));
        js.extend((0..29).map(|_| pw(PairVerdict::Tie, "o", "s")));
        js.extend((0..5).map(|_| pw(PairVerdict::LeftWin, "o", "s")));
        let s = aggregate_pairwise(&js, "s");
        assert_eq!(s.judged, 103);
        assert_eq!(s.rounded, [67.0, 28.2, 4.9]);
        assert!((s.win + s.tie + s.lose - 100.0).abs() < 1e-9);
        let single = aggregate_pairwise(&js[..1], "s");
        assert_eq!(single.rounded, [100.0, 0.0, 0.0]);
    }

    #[test]
    fn negatives_subset() {
        let data = vec![
            record("r1", "d1", ""),
            record("r2", "d2", ""),
            record("r3", "d3", ""),
        ];
        let js = vec![
            judgment("r1", true, None, true),
            judgment("r2", true, None, false),
            judgment("r3", false, None, false),
        ];
        let neg = export_review_negatives(&js, &data);
        let ids: Vec<_> = neg.iter().map(|n| n.record.id.as_str()).collect();
        assert_eq!(ids, ["r1", "r3"]);
        assert!(export_review_negatives(&js[1..2], &data).is_empty());
    }

    #[test]
    fn queue_serves_each_once() {
        let data: Vec<_> = (0..80)
            .map(|i| record(&format!("r{i}"), &format!("d{i}"), ""))
            .collect();
        let svc = ReviewService::single(data, ReviewConfig::default()).unwrap();
        let mut seen = HashSet::new();
        loop {
            let item = svc.next("ann").unwrap();
            if item.done {
                break;
            }
            let card = item.record.unwrap();
            assert_eq!(
                svc.next("ann").unwrap().record.unwrap(),
                card,
                "outstanding item is re-served"
            );
            assert!(seen.insert(card.record_id.clone()));
            let mut j = judgment(&card.record_id, true, None, false);
            j.annotator = "ann".into();
            svc.submit(j.clone()).unwrap();
            assert!(matches!(svc.submit(j), Err(ReviewError::Conflict(_))));
        }
        assert_eq!(seen.len(), 50);
        assert_ne!(svc.queue_ids("ann"), svc.queue_ids("other"));
    }

    #[test]
    fn unserved_and_na_rules() {
        let data = vec![record("r1", "d1", "some input"), record("r2", "d2", "")];
        let svc = ReviewService::single(data, ReviewConfig::default()).unwrap();
        let mut j = judgment("r1", true, Some(false), false);
        j.annotator = "x".into();
        assert_eq!(svc.submit(j.clone()).unwrap_err().status_code(), 409);
        let served = svc.next("x").unwrap().record.unwrap();
        let na = served.input_empty;
        let mut j = judgment(
            &served.record_id,
            true,
            if na { Some(true) } else { None },
            false,
        );
        j.annotator = "x".into();
        assert_eq!(svc.submit(j).unwrap_err().status_code(), 400);
    }

    #[test]
    fn pair_guard_and_sides() {
        assert!(ReviewPair::new("a", record("x", "d1", ""), "b", record("y", "d2", "")).is_err());
        let a: Vec<_> = (0..20)
            .map(|i| record(&format!("a{i}"), &format!("d{i}"), ""))
            .collect();
        let b: Vec<_> = (0..20)
            .map(|i| record(&format!("b{i}"), &format!("d{i}"), ""))
            .collect();
        let pairs = pair_by_document("sys-a", &a, "sys-b", &b);
        assert_eq!(pairs.len(), 20);
        let svc = ReviewService::pairwise(pairs, ReviewConfig::default()).unwrap();
        let mut a_left = 0;
        while let Some([l, r]) = svc.next("p").unwrap().pair {
            assert_eq!(l.document_id, r.document_id);
            a_left += l.record_id.starts_with('a') as usize;
            let j = PairwiseJudgment {
                left_id: l.record_id,
                right_id: r.record_id,
                document_id: l.document_id,
                verdict: PairVerdict::LeftWin,
                annotator: "p".into(),
                timestamp: String::new(),
                left_system: None,
                right_system: None,
            };
            svc.submit_pairwise(j).unwrap();
        }
        assert!(a_left > 0 && a_left < 20);
        let report = svc.report();
        let sa = report
            .pairwise
            .iter()
            .find(|s| s.subject == "sys-a")
            .unwrap();
        assert_eq!(sa.wins, a_left);
        assert_eq!(sa.judged, 20);
    }

    #[test]
    fn restore_from_store() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<_> = (0..5)
            .map(|i| record(&format!("r{i}"), &format!("d{i}"), ""))
            .collect();
        let config = ReviewConfig {
            store: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let svc = ReviewService::single(data.clone(), config.clone()).unwrap();
        let first = svc.next("a").unwrap().record.unwrap();
        svc.submit(judgment(&first.record_id, true, None, false))
            .unwrap();
        drop(svc);
        let svc = ReviewService::single(data, config).unwrap();
        assert_eq!(svc.judgments().len(), 1);
        let next = svc.next("a").unwrap();
        assert_eq!(next.remaining, 4);
        assert_ne!(next.record.unwrap().record_id, first.record_id);
    }
}
