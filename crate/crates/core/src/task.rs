//! The instruction-tuning task triple and its canonical text form.
//!
//! A task serializes as
//!
//! ```text
//! #instruction#: <instruction>
//! #input#: <input>
//! #output#: <output>
//! ```
//!
//! Field values are kept verbatim and may span several lines. A field marker
//! only counts when it opens a line, so `#` characters in the middle of a
//! line never confuse the parser.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INSTRUCTION_MARKER: &str = "#instruction#:";
pub const INPUT_MARKER: &str = "#input#:";
pub const OUTPUT_MARKER: &str = "#output#:";

/// One instruction-tuning example. `input` may be empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawTask")]
pub struct Task {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

#[derive(Deserialize)]
struct RawTask {
    instruction: String,
    #[serde(default)]
    input: String,
    output: String,
}

impl TryFrom<RawTask> for Task {
    type Error = TaskError;

    fn try_from(raw: RawTask) -> Result<Self, Self::Error> {
        Task::new(raw.instruction, raw.input, raw.output)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("output is empty")]
    EmptyOutput,
    #[error("{field} contains a line starting with a field marker")]
    EmbeddedMarker { field: Field },
}

/// The three task fields, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Instruction,
    Input,
    Output,
}

impl Field {
    pub const ALL: [Field; 3] = [Field::Instruction, Field::Input, Field::Output];

    pub fn marker(self) -> &'static str {
        match self {
            Field::Instruction => INSTRUCTION_MARKER,
            Field::Input => INPUT_MARKER,
            Field::Output => OUTPUT_MARKER,
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Field::Instruction => "instruction",
            Field::Input => "input",
            Field::Output => "output",
        })
    }
}

impl Task {
    /// Builds a task, trimming surrounding whitespace from every field.
    pub fn new(
        instruction: impl Into<String>,
        input: impl Into<String>,
        output: impl Into<String>,
    ) -> Result<Self, TaskError> {
        let task = Task {
            instruction: instruction.into().trim().to_string(),
            input: input.into().trim().to_string(),
            output: output.into().trim().to_string(),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.instruction.trim().is_empty() {
            return Err(TaskError::EmptyInstruction);
        }
        if self.output.trim().is_empty() {
            return Err(TaskError::EmptyOutput);
        }
        for field in Field::ALL {
            // the first line follows its own marker, so only later lines are ambiguous
            if self.field(field).lines().skip(1).any(starts_with_marker) {
                return Err(TaskError::EmbeddedMarker { field });
            }
        }
        Ok(())
    }

    pub fn field(&self, field: Field) -> &str {
        match field {
            Field::Instruction => &self.instruction,
            Field::Input => &self.input,
            Field::Output => &self.output,
        }
    }

    pub fn has_input(&self) -> bool {
        !self.input.is_empty()
    }

    /// Canonical text form; see the module docs.
    pub fn serialize(&self) -> String {
        format!(
            "{INSTRUCTION_MARKER} {}\n{INPUT_MARKER} {}\n{OUTPUT_MARKER} {}",
            self.instruction, self.input, self.output
        )
    }
}

fn starts_with_marker(line: &str) -> bool {
    Field::ALL.iter().any(|f| line.starts_with(f.marker()))
}

/// Why a completion could not be read as a task.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseError {
    #[error("missing #instruction# marker")]
    MissingInstruction,
    #[error("missing #input# marker")]
    MissingInput,
    #[error("missing #output# marker")]
    MissingOutput,
    #[error("marker for {0} appears more than once")]
    DuplicateMarker(Field),
    #[error("field markers are out of order")]
    OutOfOrder,
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("output is empty")]
    EmptyOutput,
}

impl ParseError {
    /// Stable snake_case tag used in reports.
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::MissingInstruction => "missing_instruction",
            ParseError::MissingInput => "missing_input",
            ParseError::MissingOutput => "missing_output",
            ParseError::DuplicateMarker(_) => "duplicate_marker",
            ParseError::OutOfOrder => "out_of_order",
            ParseError::EmptyInstruction => "empty_instruction",
            ParseError::EmptyOutput => "empty_output",
        }
    }
}

/// Reads a model completion as a task.
///
/// Text before the first marker is ignored. Each value runs from just after
/// its marker to the line break preceding the next marker and is trimmed.
pub fn parse_task(completion: &str) -> Result<Task, ParseError> {
    // (field, offset of the marker line, offset of the value)
    let mut found: Vec<(Field, usize, usize)> = Vec::with_capacity(3);
    let mut offset = 0usize;
    for line in completion.split('\n') {
        for field in Field::ALL {
            if line.starts_with(field.marker()) {
                if found.iter().any(|(f, _, _)| *f == field) {
                    return Err(ParseError::DuplicateMarker(field));
                }
                found.push((field, offset, offset + field.marker().len()));
                break;
            }
        }
        offset += line.len() + 1;
    }

    let position = |field: Field| found.iter().position(|(f, _, _)| *f == field);
    let pi = position(Field::Instruction).ok_or(ParseError::MissingInstruction)?;
    let pin = position(Field::Input).ok_or(ParseError::MissingInput)?;
    let po = position(Field::Output).ok_or(ParseError::MissingOutput)?;
    if !(pi < pin && pin < po) {
        return Err(ParseError::OutOfOrder);
    }

    let value = |idx: usize| -> &str {
        let start = found[idx].2;
        let end = found
            .get(idx + 1)
            .map(|(_, line_start, _)| line_start.saturating_sub(1))
            .unwrap_or(completion.len());
        completion[start..end.max(start)].trim()
    };

    let instruction = value(pi);
    let input = value(pin);
    let output = value(po);
    if instruction.is_empty() {
        return Err(ParseError::EmptyInstruction);
    }
    if output.is_empty() {
        return Err(ParseError::EmptyOutput);
    }
    Ok(Task {
        instruction: instruction.to_string(),
        input: input.to_string(),
        output: output.to_string(),
    })
}
