//! Building instruction-tuning data from human-written text: corpus
//! sampling, seed prompting, task generation, quality filtering, review and
//! analytics. Stages are composed by [`pipeline::Run`].

pub mod analytics;
pub mod corpus;
pub mod filter;
pub mod forge;
pub mod gateway;
pub mod pipeline;
pub mod record;
pub mod review;
pub mod seed;
pub mod synthetic;
pub mod task;
pub mod util;

pub use corpus::{CorpusKind, Document, RawDocument, SamplingPolicy};
pub use filter::{FilterConfig, FilterDecision, WordTokenizer};
pub use forge::{MetaInstruction, Negative};
pub use gateway::{DecodingParams, Gateway, GatewayConfig, GatewayError};
pub use pipeline::{PipelineConfig, PipelineError, Run, RunOptions, Stage};
pub use record::{RecordStatus, TaskRecord, Verdict};
pub use review::{Judgment, PairwiseJudgment, ReviewService};
pub use task::{parse_task, ParseError, Task};
