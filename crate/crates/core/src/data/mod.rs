//! Problem records, number placeholders and the synthetic corpus generator.

mod numbers;
mod synth;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equation::{evaluate, parse_infix, ConstantTable, EvalError, ExprTree, ParseError, Value};
use crate::labels::{corpus_step_report, LabelError, StepReport};

pub use numbers::map_numbers;
pub use synth::{structure_mix, synth_generate, SynthSpec};

/// Relative tolerance for answer validation at load time.
pub const ANSWER_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("instance {id}: answer {stated} does not match equation value {computed}")]
    AnswerMismatch { id: String, stated: String, computed: String },
    #[error("instance {id}: {source}")]
    IndexOutOfRange { id: String, source: ParseError },
    #[error("instance {id}: {source}")]
    Parse { id: String, source: ParseError },
    #[error("instance {id}: {source}")]
    Eval { id: String, source: EvalError },
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// One math word problem with its gold equation over `N<i>` placeholders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub id: String,
    /// Tokens; numbers appear as `N<i>` placeholders.
    pub text: Vec<String>,
    pub numbers: Vec<Value>,
    pub equation: String,
    pub answer: Value,
}

impl ProblemInstance {
    /// Two boxes-and-bags purchases summed: `N0*N1+N2*N3`, two decoding layers.
    pub fn toy() -> Self {
        ProblemInstance {
            id: "toy".into(),
            text: "N0 boxes of N1 pens and N2 bags of N3 pens . how many pens ?"
                .split_whitespace()
                .map(str::to_string)
                .collect(),
            numbers: [50, 5, 60, 4].map(Value::int).to_vec(),
            equation: "N0*N1+N2*N3".into(),
            answer: Value::int(490),
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: serde_json::Value,
    text: serde_json::Value,
    numbers: Vec<serde_json::Value>,
    equation: String,
    answer: serde_json::Value,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    text: String,
    numbers: Vec<String>,
    equation: &'a str,
    answer: String,
}

fn json_number(v: &serde_json::Value) -> Option<Value> {
    match v {
        serde_json::Value::String(s) => Value::parse_record(s),
        serde_json::Value::Number(n) => Value::parse_record(&n.to_string()),
        _ => None,
    }
}

impl ProblemInstance {
    pub fn tree(&self, constants: &mut ConstantTable) -> Result<ExprTree, DataError> {
        parse_infix(&self.equation, self.numbers.len(), constants).map_err(|e| match e {
            ParseError::IndexOutOfRange { .. } => DataError::IndexOutOfRange {
                id: self.id.clone(),
                source: e,
            },
            other => DataError::Parse {
                id: self.id.clone(),
                source: other,
            },
        })
    }

    /// Parses the equation and checks it reproduces the stated answer.
    pub fn validate(&self, constants: &mut ConstantTable) -> Result<ExprTree, DataError> {
        let tree = self.tree(constants)?;
        let value = evaluate(&tree, &self.numbers, &constants.values(), &[]).map_err(|e| DataError::Eval {
            id: self.id.clone(),
            source: e,
        })?;
        if !value.approx_eq(&self.answer, ANSWER_TOLERANCE) {
            return Err(DataError::AnswerMismatch {
                id: self.id.clone(),
                stated: self.answer.to_string(),
                computed: value.to_string(),
            });
        }
        Ok(tree)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&OutRecord {
            id: &self.id,
            text: self.text.join(" "),
            numbers: self.numbers.iter().map(Value::to_record_string).collect(),
            equation: &self.equation,
            answer: self.answer.to_record_string(),
        })
        .expect("record serializes")
    }

    /// Parses one record line; `text` may be a string or a token array and
    /// numbers may be JSON strings (`"3/4"`, `"2.5"`) or numbers.
    pub fn from_json_line(line: &str, line_no: usize) -> Result<Self, DataError> {
        let bad = |reason: String| DataError::MalformedRecord { line: line_no, reason };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let id = match raw.id {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(bad(format!("bad id {other}"))),
        };
        let text = match raw.text {
            serde_json::Value::String(s) => s.split_whitespace().map(str::to_string).collect(),
            serde_json::Value::Array(items) => items
                .into_iter()
                .map(|v| match v {
                    serde_json::Value::String(s) => Ok(s),
                    other => Err(bad(format!("bad token {other}"))),
                })
                .collect::<Result<_, _>>()?,
            other => return Err(bad(format!("bad text {other}"))),
        };
        let numbers = raw
            .numbers
            .iter()
            .map(|v| json_number(v).ok_or_else(|| bad(format!("bad number {v}"))))
            .collect::<Result<_, _>>()?;
        let answer = json_number(&raw.answer).ok_or_else(|| bad(format!("bad answer {}", raw.answer)))?;
        Ok(ProblemInstance {
            id,
            text,
            numbers,
            equation: raw.equation,
            answer,
        })
    }
}

/// Reads and validates a line-delimited record file. Blank lines are skipped.
pub fn load_jsonl(path: &Path, constants: &mut ConstantTable) -> Result<Vec<ProblemInstance>, DataError> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = ProblemInstance::from_json_line(&line, i + 1)?;
        inst.validate(constants)?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, instances: &[ProblemInstance]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for inst in instances {
        writeln!(w, "{}", inst.to_json_line()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Decoding-step table over a corpus; parse failures carry the instance id.
pub fn step_report(
    instances: &[ProblemInstance],
    constants: &mut ConstantTable,
    k: usize,
) -> Result<StepReport, DataError> {
    let trees = instances
        .iter()
        .map(|inst| inst.tree(constants))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(corpus_step_report(trees.iter(), k)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_well_formed_file() {
        let f = write_tmp(&[
            r#"{"id":"a","text":"N0 boxes of N1 pens and N2 bags of N3 pens","numbers":["50","5","60","4"],"equation":"N0*N1+N2*N3","answer":"490"}"#,
            r#"{"id":"b","text":["half","of","N0"],"numbers":[3],"equation":"N0/2.0*1","answer":"3/2"}"#,
        ]);
        let mut c = ConstantTable::default();
        let err = load_jsonl(f.path(), &mut c).unwrap_err();
        // `2.0` is not a known constant.
        assert!(matches!(err, DataError::Parse { .. }), "{err}");

        let f = write_tmp(&[
            r#"{"id":"a","text":"N0 boxes of N1 pens and N2 bags of N3 pens","numbers":["50","5","60","4"],"equation":"N0*N1+N2*N3","answer":"490"}"#,
            "",
            r#"{"id":"b","text":["half","of","N0"],"numbers":[3],"equation":"N0/100","answer":"0.03"}"#,
        ]);
        let got = load_jsonl(f.path(), &mut c).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].numbers[0], Value::int(50));
        assert_eq!(got[1].text.len(), 3);
    }

    #[test]
    fn answer_mismatch() {
        let f = write_tmp(&[
            r#"{"id":"x","text":"N0 N1","numbers":["2","3"],"equation":"N0+N1","answer":"6"}"#,
        ]);
        let err = load_jsonl(f.path(), &mut ConstantTable::default()).unwrap_err();
        assert!(matches!(err, DataError::AnswerMismatch { ref id, .. } if id == "x"));
    }

    #[test]
    fn index_out_of_range() {
        let f = write_tmp(&[
            r#"{"id":"y","text":"N0 N1 N2","numbers":["1","2","3"],"equation":"N0+N5","answer":"1"}"#,
        ]);
        let err = load_jsonl(f.path(), &mut ConstantTable::default()).unwrap_err();
        assert!(matches!(err, DataError::IndexOutOfRange { ref id, .. } if id == "y"));
    }

    #[test]
    fn malformed_line_number() {
        let f = write_tmp(&[
            r#"{"id":"x","text":"N0 N1","numbers":["2","3"],"equation":"N0+N1","answer":"5"}"#,
            r#"{"id": 3, "text": 7}"#,
        ]);
        let err = load_jsonl(f.path(), &mut ConstantTable::default()).unwrap_err();
        assert!(matches!(err, DataError::MalformedRecord { line: 2, .. }));
    }

    #[test]
    fn json_line_round_trip() {
        let inst = ProblemInstance {
            id: "r".into(),
            text: vec!["the".into(), "sum".into(), "N0".into()],
            numbers: vec![Value::Exact(crate::equation::Rational::new(2, 3)), Value::int(9)],
            equation: "N0+N1".into(),
            answer: Value::Exact(crate::equation::Rational::new(29, 3)),
        };
        let back = ProblemInstance::from_json_line(&inst.to_json_line(), 1).unwrap();
        assert_eq!(back, inst);
    }
}
