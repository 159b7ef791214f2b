//! Turn-level episode protocol: tokens, turns, trajectories.
//!
//! An episode is a sequence of turns. In each turn the agent emits action
//! tokens; a turn that forms a well-formed `<search> ... </search>` span is a
//! Search turn and receives retrieval feedback, a well-formed
//! `<answer> ... </answer>` span terminates the episode, and anything else is
//! Malformed (it burns a turn and receives empty feedback). `<think>` spans
//! may appear before the action span and are ignored by parsing and scoring.
//!
//! Serialization renders the whole trajectory as tagged text with search
//! feedback inside `<information> ... </information>` blocks; this is the
//! "solution string" shown to critique models and is stable byte-for-byte
//! for a given trajectory.

use serde::{Deserialize, Serialize};

use crate::credit::RewardBreakdown;
use crate::env::{Document, KnowledgeBase};
use crate::error::{Error, Result};

/// Number of special (non-entity, non-relation) tokens in every vocabulary.
pub const NUM_SPECIAL_TOKENS: usize = 7;

/// One vocabulary token. Entities and relations are indexed into the
/// knowledge base; the rest are protocol control tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    ThinkOpen,
    ThinkClose,
    SearchOpen,
    SearchClose,
    AnswerOpen,
    AnswerClose,
    /// Ends the current turn without completing a span.
    StopTurn,
    Entity(u32),
    Relation(u32),
}

impl Token {
    /// Text atom used by [`serialize_trajectory`]. Atoms are distinct per
    /// token, which makes serialization injective on token sequences.
    pub fn atom(&self) -> String {
        match self {
            Token::ThinkOpen => "<think>".to_string(),
            Token::ThinkClose => "</think>".to_string(),
            Token::SearchOpen => "<search>".to_string(),
            Token::SearchClose => "</search>".to_string(),
            Token::AnswerOpen => "<answer>".to_string(),
            Token::AnswerClose => "</answer>".to_string(),
            Token::StopTurn => "<stop>".to_string(),
            Token::Entity(e) => format!("e{e}"),
            Token::Relation(r) => format!("r{r}"),
        }
    }

    fn is_special(&self) -> bool {
        !matches!(self, Token::Entity(_) | Token::Relation(_))
    }
}

/// Finite enumerable vocabulary for a knowledge base with `num_entities`
/// entities and `num_relations` relations. Index layout: the seven special
/// tokens first (in declaration order), then entities, then relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub num_entities: usize,
    pub num_relations: usize,
}

impl Vocab {
    pub fn new(num_entities: usize, num_relations: usize) -> Self {
        Vocab {
            num_entities,
            num_relations,
        }
    }

    /// Total number of tokens `V`.
    pub fn size(&self) -> usize {
        NUM_SPECIAL_TOKENS + self.num_entities + self.num_relations
    }

    /// Unique integer index of a token, or an error if the entity/relation id
    /// is out of range for this vocabulary.
    pub fn index_of(&self, token: Token) -> Result<usize> {
        let idx = match token {
            Token::ThinkOpen => 0,
            Token::ThinkClose => 1,
            Token::SearchOpen => 2,
            Token::SearchClose => 3,
            Token::AnswerOpen => 4,
            Token::AnswerClose => 5,
            Token::StopTurn => 6,
            Token::Entity(e) => {
                if (e as usize) >= self.num_entities {
                    return Err(Error::InvalidToken(format!(
                        "entity e{e} out of range (vocabulary has {} entities)",
                        self.num_entities
                    )));
                }
                NUM_SPECIAL_TOKENS + e as usize
            }
            Token::Relation(r) => {
                if (r as usize) >= self.num_relations {
                    return Err(Error::InvalidToken(format!(
                        "relation r{r} out of range (vocabulary has {} relations)",
                        self.num_relations
                    )));
                }
                NUM_SPECIAL_TOKENS + self.num_entities + r as usize
            }
        };
        Ok(idx)
    }

    /// Token at a vocabulary index.
    pub fn token_at(&self, index: usize) -> Result<Token> {
        let token = match index {
            0 => Token::ThinkOpen,
            1 => Token::ThinkClose,
            2 => Token::SearchOpen,
            3 => Token::SearchClose,
            4 => Token::AnswerOpen,
            5 => Token::AnswerClose,
            6 => Token::StopTurn,
            _ => {
                let rest = index - NUM_SPECIAL_TOKENS;
                if rest < self.num_entities {
                    Token::Entity(rest as u32)
                } else if rest - self.num_entities < self.num_relations {
                    Token::Relation((rest - self.num_entities) as u32)
                } else {
                    return Err(Error::InvalidToken(format!(
                        "index {index} out of range for vocabulary of size {}",
                        self.size()
                    )));
                }
            }
        };
        Ok(token)
    }

    /// Iterate every token in index order.
    pub fn tokens(&self) -> impl Iterator<Item = Token> + '_ {
        (0..self.size()).map(|i| self.token_at(i).expect("index in range"))
    }
}

/// Classification of a turn by its action tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnKind {
    Search,
    Answer,
    Malformed,
}

/// Result of parsing one turn's action tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedAction {
    /// Well-formed `<search> ... </search>`; payload is the query tokens.
    Search(Vec<Token>),
    /// Well-formed `<answer> ... </answer>`; payload is the answer tokens.
    Answer(Vec<Token>),
    Malformed,
}

impl ParsedAction {
    pub fn kind(&self) -> TurnKind {
        match self {
            ParsedAction::Search(_) => TurnKind::Search,
            ParsedAction::Answer(_) => TurnKind::Answer,
            ParsedAction::Malformed => TurnKind::Malformed,
        }
    }
}

/// One turn: the agent's action tokens plus any environment feedback.
/// `feedback` is `Some(docs)` for Search turns (always non-empty from the
/// environment), `Some(vec![])` for Malformed turns and `None` for Answer
/// turns.
#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub action_tokens: Vec<Token>,
    pub feedback: Option<Vec<Document>>,
    pub kind: TurnKind,
}

impl Turn {
    /// Build a turn, deriving `kind` from the action tokens so the two never
    /// disagree.
    pub fn new(action_tokens: Vec<Token>, feedback: Option<Vec<Document>>) -> Self {
        let kind = parse_turn_action(&action_tokens).kind();
        Turn {
            action_tokens,
            feedback,
            kind,
        }
    }

    /// Query tokens if this turn is a well-formed search.
    pub fn search_query(&self) -> Option<Vec<Token>> {
        match parse_turn_action(&self.action_tokens) {
            ParsedAction::Search(q) => Some(q),
            _ => None,
        }
    }

    /// `(head, relation)` if the search query is exactly one entity followed
    /// by one relation; anything else does not name a knowledge-base pair.
    pub fn query_pair(&self) -> Option<(u32, u32)> {
        match self.search_query()?.as_slice() {
            [Token::Entity(h), Token::Relation(r)] => Some((*h, *r)),
            _ => None,
        }
    }
}

/// A full episode: the agent's turns, the behavior-policy log-probabilities
/// of every action token (in emission order), the extracted answer text, a
/// terminal flag and the episode seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub question_id: String,
    pub turns: Vec<Turn>,
    pub token_logprobs: Vec<f64>,
    pub extracted_answer: Option<String>,
    pub terminated: bool,
    pub seed: u64,
}

impl Trajectory {
    /// Total number of action tokens across all turns.
    pub fn num_action_tokens(&self) -> usize {
        self.turns.iter().map(|t| t.action_tokens.len()).sum()
    }

    /// Number of Search turns (the turns critics judge).
    pub fn num_search_turns(&self) -> usize {
        self.turns
            .iter()
            .filter(|t| t.kind == TurnKind::Search)
            .count()
    }
}

/// Parse one turn's action tokens.
///
/// Grammar: any number of complete `<think> ... </think>` spans may be
/// interleaved; after removing them, the remaining tokens must be exactly one
/// `<search> ... </search>` or `<answer> ... </answer>` span whose interior
/// contains only entity and relation tokens. Everything else is Malformed.
/// Inside a think span all tokens (including tags) are swallowed until the
/// first `</think>`.
pub fn parse_turn_action(tokens: &[Token]) -> ParsedAction {
    // Strip complete think spans.
    let mut rest = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i] == Token::ThinkOpen {
            match tokens[i + 1..].iter().position(|t| *t == Token::ThinkClose) {
                Some(off) => i += off + 2,
                None => return ParsedAction::Malformed,
            }
        } else {
            rest.push(tokens[i]);
            i += 1;
        }
    }

    if rest.len() < 2 {
        return ParsedAction::Malformed;
    }
    let (open, close) = (rest[0], rest[rest.len() - 1]);
    let interior = rest[1..rest.len() - 1].to_vec();
    if interior.iter().any(Token::is_special) {
        return ParsedAction::Malformed;
    }
    match (open, close) {
        (Token::SearchOpen, Token::SearchClose) => ParsedAction::Search(interior),
        (Token::AnswerOpen, Token::AnswerClose) => ParsedAction::Answer(interior),
        _ => ParsedAction::Malformed,
    }
}

/// True iff the trajectory is fully well-formed: every turn parses to Search
/// or Answer, at most one Answer turn which must be last, and a terminated
/// trajectory ends with an Answer turn.
pub fn check_format(traj: &Trajectory) -> bool {
    let kinds: Vec<TurnKind> = traj
        .turns
        .iter()
        .map(|t| parse_turn_action(&t.action_tokens).kind())
        .collect();
    if kinds.iter().any(|k| *k == TurnKind::Malformed) {
        return false;
    }
    // An Answer turn anywhere but last (e.g. a Search turn after it) is a
    // protocol violation.
    if kinds.iter().rev().skip(1).any(|k| *k == TurnKind::Answer) {
        return false;
    }
    if traj.terminated && kinds.last() != Some(&TurnKind::Answer) {
        return false;
    }
    true
}

/// Content of the first complete `<answer> ... </answer>` span, scanned turn
/// by turn, rendered as space-joined atoms. Feedback never participates, so
/// the result depends only on the agent's own tokens.
pub fn extract_answer(traj: &Trajectory) -> Option<String> {
    for turn in &traj.turns {
        let toks = &turn.action_tokens;
        let Some(open) = toks.iter().position(|t| *t == Token::AnswerOpen) else {
            continue;
        };
        if let Some(off) = toks[open + 1..]
            .iter()
            .position(|t| *t == Token::AnswerClose)
        {
            let content = &toks[open + 1..open + 1 + off];
            return Some(
                content
                    .iter()
                    .map(Token::atom)
                    .collect::<Vec<_>>()
                    .join(" "),
            );
        }
    }
    None
}

fn render_document(doc: &Document) -> String {
    let (h, r, t) = doc.triple;
    format!("e{h} r{r} e{t}")
}

/// Render a trajectory as tagged text: one line of space-joined action atoms
/// per turn, followed by an `<information> ... </information>` line when the
/// turn has non-empty feedback (documents separated by ` | `). Every token
/// (including feedback triples) is validated against the vocabulary first.
pub fn serialize_trajectory(traj: &Trajectory, vocab: &Vocab) -> Result<String> {
    let mut lines = Vec::new();
    for turn in &traj.turns {
        for tok in &turn.action_tokens {
            vocab.index_of(*tok)?;
        }
        lines.push(
            turn.action_tokens
                .iter()
                .map(Token::atom)
                .collect::<Vec<_>>()
                .join(" "),
        );
        if let Some(docs) = &turn.feedback {
            for doc in docs {
                let (h, r, t) = doc.triple;
                vocab.index_of(Token::Entity(h))?;
                vocab.index_of(Token::Relation(r))?;
                vocab.index_of(Token::Entity(t))?;
            }
            if !docs.is_empty() {
                let body = docs
                    .iter()
                    .map(render_document)
                    .collect::<Vec<_>>()
                    .join(" | ");
                lines.push(format!("<information> {body} </information>"));
            }
        }
    }
    Ok(lines.join("\n"))
}

// ---------------------------------------------------------------------------
// JSONL log records
// ---------------------------------------------------------------------------

/// One turn in a trajectory log record. Tokens are stored as vocabulary
/// indices and feedback documents as indices into the knowledge base's
/// canonical triple list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub action_token_ids: Vec<usize>,
    pub kind: TurnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_doc_ids: Option<Vec<usize>>,
}

/// One trajectory as a JSONL line. `reward_breakdown` is attached by the
/// trainer when the record comes from a scored rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub question_id: String,
    pub turns: Vec<TurnRecord>,
    pub token_logprobs: Vec<f64>,
    pub extracted_answer: Option<String>,
    pub terminated: bool,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_breakdown: Option<RewardBreakdown>,
}

impl TrajectoryRecord {
    /// Convert a trajectory to its log record against a knowledge base.
    /// Fails if a feedback document is not a triple of `kb`.
    pub fn from_trajectory(traj: &Trajectory, kb: &KnowledgeBase) -> Result<Self> {
        let vocab = kb.vocab();
        let mut turns = Vec::with_capacity(traj.turns.len());
        for turn in &traj.turns {
            let action_token_ids = turn
                .action_tokens
                .iter()
                .map(|t| vocab.index_of(*t))
                .collect::<Result<Vec<_>>>()?;
            let feedback_doc_ids = match &turn.feedback {
                None => None,
                Some(docs) => Some(
                    docs.iter()
                        .map(|d| {
                            kb.doc_id(d.triple).ok_or_else(|| {
                                Error::InvalidToken(format!(
                                    "feedback triple {:?} not in knowledge base",
                                    d.triple
                                ))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
            };
            turns.push(TurnRecord {
                action_token_ids,
                kind: turn.kind,
                feedback_doc_ids,
            });
        }
        Ok(TrajectoryRecord {
            question_id: traj.question_id.clone(),
            turns,
            token_logprobs: traj.token_logprobs.clone(),
            extracted_answer: traj.extracted_answer.clone(),
            terminated: traj.terminated,
            seed: traj.seed,
            reward_breakdown: None,
        })
    }

    /// Reconstruct the trajectory. Turn kinds are re-derived from the tokens
    /// and must match the stored kinds; distractor flags are re-derived by
    /// comparing each document against the turn's query pair.
    pub fn to_trajectory(&self, kb: &KnowledgeBase) -> Result<Trajectory> {
        let vocab = kb.vocab();
        let mut turns = Vec::with_capacity(self.turns.len());
        for (i, tr) in self.turns.iter().enumerate() {
            let action_tokens = tr
                .action_token_ids
                .iter()
                .map(|&id| vocab.token_at(id))
                .collect::<Result<Vec<_>>>()?;
            let feedback = match &tr.feedback_doc_ids {
                None => None,
                Some(ids) => {
                    let parsed = parse_turn_action(&action_tokens);
                    let query_pair = match &parsed {
                        ParsedAction::Search(q) => match q.as_slice() {
                            [Token::Entity(h), Token::Relation(r)] => Some((*h, *r)),
                            _ => None,
                        },
                        _ => None,
                    };
                    Some(
                        ids.iter()
                            .map(|&id| {
                                let triple = kb.doc_at(id).ok_or_else(|| {
                                    Error::InvalidToken(format!(
                                        "document id {id} out of range for knowledge base"
                                    ))
                                })?;
                                let is_distractor = query_pair != Some((triple.0, triple.1));
                                Ok(Document {
                                    triple,
                                    is_distractor,
                                })
                            })
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
            };
            let turn = Turn::new(action_tokens, feedback);
            if turn.kind != tr.kind {
                return Err(Error::file_format(
                    format!("turn {i}"),
                    format!(
                        "stored kind {:?} disagrees with tokens ({:?})",
                        tr.kind, turn.kind
                    ),
                ));
            }
            turns.push(turn);
        }
        Ok(Trajectory {
            question_id: self.question_id.clone(),
            turns,
            token_logprobs: self.token_logprobs.clone(),
            extracted_answer: self.extracted_answer.clone(),
            terminated: self.terminated,
            seed: self.seed,
        })
    }
}

/// Write records as JSON Lines.
pub fn write_trajectory_jsonl(path: &std::path::Path, records: &[TrajectoryRecord]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read records from a JSON Lines file, skipping blank lines.
pub fn read_trajectory_jsonl(path: &std::path::Path) -> Result<Vec<TrajectoryRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(line).map_err(|e| {
            Error::file_format(
                path.display().to_string(),
                format!("line {}: {e}", lineno + 1),
            )
        })?;
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_kb;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &[Token]) -> Vec<Token> {
        s.to_vec()
    }

    fn search_turn(h: u32, r: u32, docs: Vec<Document>) -> Turn {
        Turn::new(
            toks(&[
                Token::SearchOpen,
                Token::Entity(h),
                Token::Relation(r),
                Token::SearchClose,
            ]),
            Some(docs),
        )
    }

    fn answer_turn(e: u32) -> Turn {
        Turn::new(
            toks(&[Token::AnswerOpen, Token::Entity(e), Token::AnswerClose]),
            None,
        )
    }

    fn doc(h: u32, r: u32, t: u32, distractor: bool) -> Document {
        Document {
            triple: (h, r, t),
            is_distractor: distractor,
        }
    }

    fn traj(turns: Vec<Turn>, terminated: bool) -> Trajectory {
        let n: usize = turns.iter().map(|t| t.action_tokens.len()).sum();
        Trajectory {
            question_id: "q0".to_string(),
            turns,
            token_logprobs: vec![-1.0; n],
            extracted_answer: None,
            terminated,
            seed: 0,
        }
    }

    #[test]
    fn vocab_indexing_round_trips() {
        let v = Vocab::new(5, 3);
        assert_eq!(v.size(), NUM_SPECIAL_TOKENS + 8);
        for i in 0..v.size() {
            let t = v.token_at(i).unwrap();
            assert_eq!(v.index_of(t).unwrap(), i);
        }
        assert!(v.index_of(Token::Entity(5)).is_err());
        assert!(v.index_of(Token::Relation(3)).is_err());
        assert!(v.token_at(v.size()).is_err());
    }

    #[test]
    fn parse_well_formed_search() {
        let parsed = parse_turn_action(&[
            Token::SearchOpen,
            Token::Entity(3),
            Token::Relation(1),
            Token::SearchClose,
        ]);
        assert_eq!(
            parsed,
            ParsedAction::Search(vec![Token::Entity(3), Token::Relation(1)])
        );
    }

    #[test]
    fn parse_answer_and_malformed() {
        assert_eq!(
            parse_turn_action(&[Token::AnswerOpen, Token::Entity(7), Token::AnswerClose]),
            ParsedAction::Answer(vec![Token::Entity(7)])
        );
        // Missing close tag.
        assert_eq!(
            parse_turn_action(&[Token::SearchOpen, Token::Entity(3)]),
            ParsedAction::Malformed
        );
        // Think-only turn.
        assert_eq!(
            parse_turn_action(&[Token::ThinkOpen, Token::Entity(0), Token::ThinkClose]),
            ParsedAction::Malformed
        );
        // Stop token alone.
        assert_eq!(
            parse_turn_action(&[Token::StopTurn]),
            ParsedAction::Malformed
        );
        // Mismatched tags.
        assert_eq!(
            parse_turn_action(&[Token::SearchOpen, Token::Entity(1), Token::AnswerClose]),
            ParsedAction::Malformed
        );
    }

    #[test]
    fn think_spans_are_ignored_by_parsing() {
        let parsed = parse_turn_action(&[
            Token::ThinkOpen,
            Token::Entity(9),
            Token::Relation(2),
            Token::ThinkClose,
            Token::SearchOpen,
            Token::Entity(3),
            Token::Relation(1),
            Token::SearchClose,
        ]);
        assert_eq!(
            parsed,
            ParsedAction::Search(vec![Token::Entity(3), Token::Relation(1)])
        );
        // Unclosed think span is malformed.
        assert_eq!(
            parse_turn_action(&[Token::ThinkOpen, Token::SearchOpen, Token::SearchClose]),
            ParsedAction::Malformed
        );
    }

    #[test]
    fn check_format_happy_path_and_violations() {
        let good = traj(
            vec![search_turn(0, 0, vec![doc(0, 0, 1, false)]), answer_turn(1)],
            true,
        );
        assert!(check_format(&good));

        // Missing </search>.
        let missing_close = traj(
            vec![Turn::new(
                toks(&[Token::SearchOpen, Token::Entity(0)]),
                Some(vec![]),
            )],
            false,
        );
        assert!(!check_format(&missing_close));

        // Answer turn followed by a Search turn.
        let answer_then_search = traj(
            vec![answer_turn(1), search_turn(0, 0, vec![doc(0, 0, 1, true)])],
            true,
        );
        assert!(!check_format(&answer_then_search));

        // Terminated but no final Answer turn.
        let no_answer = traj(vec![search_turn(0, 0, vec![doc(0, 0, 1, false)])], true);
        assert!(!check_format(&no_answer));
        // Same turns, not terminated: fine.
        let unterminated = traj(vec![search_turn(0, 0, vec![doc(0, 0, 1, false)])], false);
        assert!(check_format(&unterminated));
    }

    #[test]
    fn extract_answer_basic_and_missing() {
        let t = traj(
            vec![search_turn(0, 0, vec![doc(0, 0, 1, false)]), answer_turn(7)],
            true,
        );
        assert_eq!(extract_answer(&t), Some("e7".to_string()));

        let none = traj(vec![search_turn(0, 0, vec![doc(0, 0, 1, false)])], false);
        assert_eq!(extract_answer(&none), None);
    }

    #[test]
    fn extract_answer_takes_first_span_of_a_double_span_turn() {
        // Two answer spans in one turn: the turn is malformed (trailing
        // tokens after the first span) but extraction still returns the
        // first span's content.
        let double = Turn::new(
            toks(&[
                Token::AnswerOpen,
                Token::Entity(1),
                Token::AnswerClose,
                Token::AnswerOpen,
                Token::Entity(2),
                Token::AnswerClose,
            ]),
            None,
        );
        assert_eq!(double.kind, TurnKind::Malformed);
        let t = traj(vec![double], false);
        assert_eq!(extract_answer(&t), Some("e1".to_string()));
        assert!(!check_format(&t));
    }

    #[test]
    fn serialize_renders_tags_and_information_blocks() {
        let t = traj(
            vec![
                search_turn(3, 1, vec![doc(3, 1, 7, false), doc(2, 0, 5, true)]),
                answer_turn(7),
            ],
            true,
        );
        let vocab = Vocab::new(10, 4);
        let text = serialize_trajectory(&t, &vocab).unwrap();
        assert_eq!(
            text,
            "<search> e3 r1 </search>\n<information> e3 r1 e7 | e2 r0 e5 </information>\n<answer> e7 </answer>"
        );
        assert_eq!(text.matches("<search>").count(), 1);
        assert_eq!(text.matches("<information>").count(), 1);
        assert_eq!(text.matches("<answer>").count(), 1);
        // Serialization is deterministic.
        assert_eq!(text, serialize_trajectory(&t, &vocab).unwrap());
    }

    #[test]
    fn serialize_empty_trajectory_is_empty() {
        let t = traj(vec![], false);
        assert_eq!(serialize_trajectory(&t, &Vocab::new(2, 1)).unwrap(), "");
    }

    #[test]
    fn serialize_rejects_out_of_vocab_tokens() {
        let t = traj(vec![answer_turn(99)], true);
        let err = serialize_trajectory(&t, &Vocab::new(10, 4)).unwrap_err();
        assert!(matches!(err, Error::InvalidToken(_)));
    }

    #[test]
    fn malformed_turns_render_without_information_block() {
        let t = traj(
            vec![Turn::new(
                toks(&[Token::SearchOpen, Token::Entity(1)]),
                Some(vec![]),
            )],
            false,
        );
        let text = serialize_trajectory(&t, &Vocab::new(10, 4)).unwrap();
        assert_eq!(text, "<search> e1");
        assert!(!text.contains("<information>"));
    }

    // -- test oracle: re-parse serialized text back into turn kinds ---------

    /// Independent text-level parser used only as a round-trip oracle. It
    /// tokenizes the rendered text back into atoms, splits turns on
    /// information-block boundaries and line structure, and classifies each
    /// turn the same way a reader of the rendered text would.
    fn reparse_turn_kinds(text: &str) -> Vec<TurnKind> {
        let mut kinds = Vec::new();
        for line in text.lines() {
            if line.starts_with("<information>") {
                continue;
            }
            let atoms: Vec<&str> = line.split_whitespace().collect();
            // Strip complete think spans.
            let mut rest: Vec<&str> = Vec::new();
            let mut i = 0;
            let mut bad = false;
            while i < atoms.len() {
                if atoms[i] == "<think>" {
                    match atoms[i + 1..].iter().position(|a| *a == "</think>") {
                        Some(off) => i += off + 2,
                        None => {
                            bad = true;
                            break;
                        }
                    }
                } else {
                    rest.push(atoms[i]);
                    i += 1;
                }
            }
            let kind = if bad || rest.len() < 2 {
                TurnKind::Malformed
            } else {
                let interior_ok = rest[1..rest.len() - 1]
                    .iter()
                    .all(|a| a.starts_with('e') || a.starts_with('r'));
                match (rest[0], rest[rest.len() - 1], interior_ok) {
                    ("<search>", "</search>", true) => TurnKind::Search,
                    ("<answer>", "</answer>", true) => TurnKind::Answer,
                    _ => TurnKind::Malformed,
                }
            };
            kinds.push(kind);
        }
        kinds
    }

    /// Deterministic random trajectory builder for round-trip tests. Turns
    /// are drawn from well-formed searches (with feedback), answers, and a
    /// few malformed shapes.
    fn random_trajectory(seed: u64, vocab: &Vocab) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ne = vocab.num_entities as u32;
        let nr = vocab.num_relations as u32;
        let n_turns = rng.gen_range(0..=4);
        let mut turns = Vec::new();
        let mut answered = false;
        for _ in 0..n_turns {
            if answered {
                break;
            }
            match rng.gen_range(0..4) {
                0 => {
                    let h = rng.gen_range(0..ne);
                    let r = rng.gen_range(0..nr);
                    let docs = (0..rng.gen_range(1..=3))
                        .map(|_| {
                            doc(
                                rng.gen_range(0..ne),
                                rng.gen_range(0..nr),
                                rng.gen_range(0..ne),
                                rng.gen_bool(0.5),
                            )
                        })
                        .collect();
                    turns.push(search_turn(h, r, docs));
                }
                1 => {
                    turns.push(answer_turn(rng.gen_range(0..ne)));
                    answered = true;
                }
                2 => {
                    // Malformed: dangling open.
                    turns.push(Turn::new(
                        toks(&[Token::SearchOpen, Token::Entity(rng.gen_range(0..ne))]),
                        Some(vec![]),
                    ));
                }
                _ => {
                    // Malformed: think-only with a stop.
                    turns.push(Turn::new(
                        toks(&[
                            Token::ThinkOpen,
                            Token::Relation(rng.gen_range(0..nr)),
                            Token::ThinkClose,
                            Token::StopTurn,
                        ]),
                        Some(vec![]),
                    ));
                }
            }
        }
        traj(turns, answered)
    }

    #[test]
    fn serialize_then_reparse_reproduces_turn_kinds() {
        let vocab = Vocab::new(12, 5);
        for seed in 0..200u64 {
            let t = random_trajectory(seed, &vocab);
            let text = serialize_trajectory(&t, &vocab).unwrap();
            let expected: Vec<TurnKind> = t.turns.iter().map(|tn| tn.kind).collect();
            assert_eq!(reparse_turn_kinds(&text), expected, "seed {seed}\n{text}");
        }
    }

    #[test]
    fn extraction_matches_regex_oracle_on_rendered_text() {
        // Cross-check token-level extraction against a regular-expression
        // extractor over the rendered text, on trajectories without dangling
        // answer tags (where the text-level reading is unambiguous).
        let vocab = Vocab::new(12, 5);
        let re = regex::Regex::new(r"(?s)<answer>(.*?)</answer>").unwrap();
        for seed in 0..200u64 {
            let t = random_trajectory(seed, &vocab);
            let text = serialize_trajectory(&t, &vocab).unwrap();
            let expected = re.captures(&text).map(|c| c[1].trim().to_string());
            assert_eq!(extract_answer(&t), expected, "seed {seed}\n{text}");
        }
    }

    #[test]
    fn record_round_trip_preserves_trajectory() {
        let kb = generate_kb(10, 4, 0.5, 11).unwrap();
        let vocab = kb.vocab();
        // Use feedback docs that exist in the kb: take them from the kb list.
        let triples = kb.triples();
        let d0 = Document {
            triple: triples[0],
            is_distractor: false,
        };
        let t = Trajectory {
            question_id: "q3".to_string(),
            turns: vec![
                Turn::new(
                    toks(&[
                        Token::SearchOpen,
                        Token::Entity(triples[0].0),
                        Token::Relation(triples[0].1),
                        Token::SearchClose,
                    ]),
                    Some(vec![d0]),
                ),
                answer_turn(triples[0].2),
            ],
            token_logprobs: vec![-0.5; 7],
            extracted_answer: Some(format!("e{}", triples[0].2)),
            terminated: true,
            seed: 42,
        };
        assert!(vocab.index_of(Token::Entity(triples[0].0)).is_ok());
        let rec = TrajectoryRecord::from_trajectory(&t, &kb).unwrap();
        let back = rec.to_trajectory(&kb).unwrap();
        assert_eq!(back, t);

        // JSONL round trip too.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rollouts.jsonl");
        write_trajectory_jsonl(&path, &[rec.clone()]).unwrap();
        let read = read_trajectory_jsonl(&path).unwrap();
        assert_eq!(read, vec![rec]);
    }

    proptest! {
        /// A trajectory that passes the format check contains no Malformed
        /// turn.
        #[test]
        fn format_ok_implies_no_malformed(seed in 0u64..500) {
            let vocab = Vocab::new(8, 3);
            let t = random_trajectory(seed, &vocab);
            if check_format(&t) {
                prop_assert!(t.turns.iter().all(|tn| tn.kind != TurnKind::Malformed));
            }
        }

        /// Extraction never looks at feedback documents.
        #[test]
        fn extraction_is_invariant_to_feedback(seed in 0u64..300) {
            let vocab = Vocab::new(8, 3);
            let t = random_trajectory(seed, &vocab);
            let before = extract_answer(&t);
            let mut mutated = t.clone();
            for turn in &mut mutated.turns {
                if let Some(docs) = &mut turn.feedback {
                    docs.clear();
                    docs.push(doc(0, 0, 0, true));
                }
            }
            prop_assert_eq!(extract_answer(&mutated), before);
        }

        /// Distinct token sequences render to distinct texts (injectivity up
        /// to token content).
        #[test]
        fn serialization_is_injective(a in 0u64..150, b in 0u64..150) {
            let vocab = Vocab::new(8, 3);
            let ta = random_trajectory(a, &vocab);
            let tb = random_trajectory(b, &vocab);
            let tokens_a: Vec<Vec<Token>> = ta.turns.iter().map(|t| t.action_tokens.clone()).collect();
            let tokens_b: Vec<Vec<Token>> = tb.turns.iter().map(|t| t.action_tokens.clone()).collect();
            // Compare only the action text (strip information lines), since
            // injectivity is about the agent's token stream.
            let text_a = serialize_trajectory(&ta, &vocab).unwrap();
            let text_b = serialize_trajectory(&tb, &vocab).unwrap();
            let strip = |s: &str| {
                s.lines().filter(|l| !l.starts_with("<information>")).collect::<Vec<_>>().join("\n")
            };
            if tokens_a != tokens_b {
                prop_assert_ne!(strip(&text_a), strip(&text_b));
            } else {
                prop_assert_eq!(strip(&text_a), strip(&text_b));
            }
        }
    }
}
