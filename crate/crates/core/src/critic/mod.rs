//! Retrospective per-turn critics and their shared protocol.
//!
//! A critic looks back over a finished trajectory and labels every search
//! turn Good or Bad. Three interchangeable sources are provided — a
//! privileged oracle that knows the gold path, a Monte-Carlo value
//! estimator that resumes the episode after each turn, and a remote
//! chat-completion endpoint prompted with the critique template — plus an
//! outcome-derived baseline that stamps every turn with the trajectory's
//! final correctness. This module holds the shared verdict types, the
//! critique prompt builder, the `<score>` parser, agreement analytics, and
//! the verdict file format.

pub mod mc;
pub mod oracle;
pub mod remote;

pub use mc::mc_judge;
pub use oracle::oracle_judge;
pub use remote::{remote_judge, remote_judge_batch, CriticEndpointConfig, API_KEY_ENV};

use serde::{Deserialize, Serialize};

use crate::credit::Label;
use crate::episode::Trajectory;
use crate::error::{Error, Result};

/// Which judge produced a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    Oracle,
    MonteCarlo,
    Remote,
    /// Baseline that propagates the trajectory outcome to every turn.
    Outcome,
}

/// Per-search-turn judgment of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueVerdict {
    /// One label per search turn, in turn order. Empty when `parse_ok` is
    /// false.
    pub labels: Vec<Label>,
    pub source: VerdictSource,
    /// Raw critique text for remote verdicts.
    pub raw_text: Option<String>,
    /// False when a remote critique could not be parsed after retries.
    pub parse_ok: bool,
}

/// Build the critique prompt. The template is fixed; the three slots are
/// filled from the arguments, with the question folded into the solution
/// string ("Question: ...") since the template has no separate question
/// slot. With `include_gold` false the `Golden answers:` line is omitted
/// entirely.
pub fn build_critique_prompt(
    question: &str,
    rendered_trajectory: &str,
    gold_answer: &str,
    extracted_answer: &str,
    include_gold: bool,
) -> String {
    let golden_line = if include_gold {
        format!("Golden answers: {gold_answer}\n")
    } else {
        String::new()
    };
    format!(
        "Please analyze whether each search process is good or bad, and include the final \
         evaluation result within a <score>...</score> tag. If it is good, output 1; if it is \
         bad, output 0. For example, if there are two actions, output <score>1, 1</score>; if \
         there are four actions, output <score>1, 0, 0, 1</score>.\n\
         When making judgments, strictly follow these rules:\n\
         \x20   1. If the \"search\" action contributes to the final answer or provides \
         partially useful information, it is good.\n\
         \x20   2. If the \"search\" action provides redundant information, or repeats a search \
         that has already been done, it is bad.\n\
         \x20   3. If the \"search\" action points to the wrong search direction or misleading \
         information, it is bad.\n\
         \x20   4. If the \"search\" action results in incorrect information due to unclear \
         expression, it is bad.\n\
         \x20   5. Do not evaluate the \"answer\" actions, only evaluate the \"search\" \
         actions.\n\
         \x20   6. If there are no search actions in the entire trajectory, only return \
         <score></score>.\n\
         \x20   7. Only evaluate valid \"search\" actions (queries that contain \
         <search>...</search> and receive <information>...</information> feedback afterward).\n\
         \x20   8. The final number of scores must match the number of \"search\" actions.\n\
         \x20   9. Ultimately, first provide a detailed analysis of the search process, then \
         enclose the evaluation results within a <score>...</score> tag.\n\
         \n\
         ########################\n\
         ########################\n\
         {golden_line}\
         Extracted answer: {extracted_answer}\n\
         Solution string: Question: {question}\n\
         {rendered_trajectory}\n\
         ########################\n\
         ########################\n\
         \n\
         Please conduct a detailed analysis.\n\
         The final number of scores should be consistent with the number of search actions."
    )
}

/// Render labels in the `<score>` format the critique protocol asks for.
pub fn render_scores(labels: &[Label]) -> String {
    let bits: Vec<&str> = labels
        .iter()
        .map(|l| if *l == Label::Good { "1" } else { "0" })
        .collect();
    format!("<score>{}</score>", bits.join(", "))
}

/// Extract labels from critique text: take the last complete
/// `<score>...</score>` span, split on commas, map `1`/`0` to Good/Bad, and
/// require exactly `expected_n` entries.
pub fn parse_scores(critique_text: &str, expected_n: usize) -> Result<Vec<Label>> {
    let mut content: Option<&str> = None;
    let mut cursor = 0;
    while let Some(open) = critique_text[cursor..].find("<score>") {
        let start = cursor + open + "<score>".len();
        match critique_text[start..].find("</score>") {
            Some(close) => {
                content = Some(&critique_text[start..start + close]);
                cursor = start + close + "</score>".len();
            }
            None => break,
        }
    }
    let content = content.ok_or(Error::MissingScore)?;
    let mut labels = Vec::new();
    if !content.trim().is_empty() {
        for raw in content.split(',') {
            match raw.trim() {
                "1" => labels.push(Label::Good),
                "0" => labels.push(Label::Bad),
                other => return Err(Error::BadScoreToken(other.to_string())),
            }
        }
    }
    if labels.len() != expected_n {
        return Err(Error::CountMismatch {
            expected: expected_n,
            got: labels.len(),
        });
    }
    Ok(labels)
}

/// Fraction of positions where two label sequences agree. Sequences must
/// have equal length; two empty sequences agree vacuously (1.0). Corpus
/// agreement pools all turns into one pair of sequences first.
pub fn label_agreement(a: &[Label], b: &[Label]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "label sequences have different lengths: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let matches = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(matches as f64 / a.len() as f64)
}

/// Pooled micro-averaged agreement across two verdict files: the fraction
/// of matching labels over all turns of all records. Records pair up by
/// position and must agree on question id and label count; an empty
/// corpus agrees vacuously (1.0).
pub fn pooled_agreement(a: &[VerdictRecord], b: &[VerdictRecord]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "verdict files have different record counts: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0usize;
    let mut same = 0usize;
    for (ra, rb) in a.iter().zip(b) {
        if ra.question_id != rb.question_id {
            return Err(Error::Shape(format!(
                "verdict records pair {:?} with {:?}",
                ra.question_id, rb.question_id
            )));
        }
        if ra.labels.len() != rb.labels.len() {
            return Err(Error::Shape(format!(
                "verdicts for {:?} have {} vs {} labels",
                ra.question_id,
                ra.labels.len(),
                rb.labels.len()
            )));
        }
        total += ra.labels.len();
        same += ra
            .labels
            .iter()
            .zip(&rb.labels)
            .filter(|(x, y)| x == y)
            .count();
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(same as f64 / total as f64)
}

/// Baseline verdict that stamps every search turn with the trajectory's
/// final outcome: all Good when the answer was correct, all Bad otherwise.
pub fn outcome_verdict(traj: &Trajectory, correct: bool) -> CritiqueVerdict {
    let label = if correct { Label::Good } else { Label::Bad };
    CritiqueVerdict {
        labels: vec![label; traj.num_search_turns()],
        source: VerdictSource::Outcome,
        raw_text: None,
        parse_ok: true,
    }
}

// ---------------------------------------------------------------------------
// Verdict files
// ---------------------------------------------------------------------------

/// One verdict as stored in a verdict JSONL file; labels are 1 (Good) and
/// 0 (Bad).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub question_id: String,
    pub source: VerdictSource,
    pub labels: Vec<u8>,
    pub parse_ok: bool,
}

impl VerdictRecord {
    pub fn new(question_id: &str, verdict: &CritiqueVerdict) -> Self {
        VerdictRecord {
            question_id: question_id.to_string(),
            source: verdict.source,
            labels: verdict
                .labels
                .iter()
                .map(|l| if *l == Label::Good { 1 } else { 0 })
                .collect(),
            parse_ok: verdict.parse_ok,
        }
    }

    pub fn labels(&self) -> Result<Vec<Label>> {
        self.labels
            .iter()
            .map(|b| match b {
                1 => Ok(Label::Good),
                0 => Ok(Label::Bad),
                other => Err(Error::BadScoreToken(other.to_string())),
            })
            .collect()
    }
}

/// Write verdicts as JSON Lines.
pub fn write_verdicts_jsonl(path: &std::path::Path, records: &[VerdictRecord]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read verdicts written by [`write_verdicts_jsonl`].
pub fn read_verdicts_jsonl(path: &std::path::Path) -> Result<Vec<VerdictRecord>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: VerdictRecord = serde_json::from_str(&line)
            .map_err(|e| Error::file_format(path, format!("line {}: {e}", lineno + 1)))?;
        record.labels().map_err(|_| {
            Error::file_format(path, format!("line {}: labels must be 0 or 1", lineno + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}
