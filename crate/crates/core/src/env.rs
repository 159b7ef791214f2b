//! Synthetic search environment.
//!
//! The world is a functional knowledge base: a set of `(head, relation,
//! tail)` triples where each `(head, relation)` pair has at most one tail.
//! Questions are k-hop chases along the graph ("from e3 follow r1 r5 r2"),
//! generated by seeded random walks whose visited entities are all distinct,
//! so a gold path never repeats a query pair and its final tail is the gold
//! answer.
//!
//! Retrieval answers a parsed search query with exactly `k` documents: the
//! matching triple first (when the query names an existing pair) and seeded
//! hash-chosen distractor triples for the remaining slots. Episodes step
//! turn by turn under a hard turn budget.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{ParsedAction, Token, Vocab};
use crate::error::{Error, Result};
use crate::seeding::mix_seed;

/// One retrieved fact. `is_distractor` is false only for the document that
/// exactly matches the query pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Document {
    pub triple: (u32, u32, u32),
    pub is_distractor: bool,
}

/// A functional knowledge base over entity ids `0..num_entities` and
/// relation ids `0..num_relations`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    num_entities: usize,
    num_relations: usize,
    map: BTreeMap<(u32, u32), u32>,
    /// Canonical triple list, sorted by `(head, relation)`. Document ids in
    /// log records index into this list.
    list: Vec<(u32, u32, u32)>,
}

impl KnowledgeBase {
    /// Build a knowledge base from triples, validating entity/relation
    /// bounds and functionality. At least one triple is required.
    pub fn new(
        num_entities: usize,
        num_relations: usize,
        triples: impl IntoIterator<Item = (u32, u32, u32)>,
    ) -> Result<Self> {
        if num_entities < 2 {
            return Err(Error::Config(
                "knowledge base needs at least 2 entities".into(),
            ));
        }
        if num_relations < 1 {
            return Err(Error::Config(
                "knowledge base needs at least 1 relation".into(),
            ));
        }
        let mut map = BTreeMap::new();
        for (h, r, t) in triples {
            if h as usize >= num_entities || t as usize >= num_entities {
                return Err(Error::Config(format!(
                    "triple ({h}, {r}, {t}) references an entity >= {num_entities}"
                )));
            }
            if r as usize >= num_relations {
                return Err(Error::Config(format!(
                    "triple ({h}, {r}, {t}) references a relation >= {num_relations}"
                )));
            }
            if let Some(prev) = map.insert((h, r), t) {
                if prev != t {
                    return Err(Error::Config(format!(
                        "not functional: ({h}, {r}) maps to both {prev} and {t}"
                    )));
                }
            }
        }
        if map.is_empty() {
            return Err(Error::Config("knowledge base has no triples".into()));
        }
        let list = map.iter().map(|(&(h, r), &t)| (h, r, t)).collect();
        Ok(KnowledgeBase {
            num_entities,
            num_relations,
            map,
            list,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    /// Token vocabulary induced by this knowledge base.
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.num_entities, self.num_relations)
    }

    /// Unique tail for `(head, relation)`, if present.
    pub fn lookup(&self, head: u32, relation: u32) -> Option<u32> {
        self.map.get(&(head, relation)).copied()
    }

    /// Canonical sorted triple list.
    pub fn triples(&self) -> &[(u32, u32, u32)] {
        &self.list
    }

    /// Index of a triple in the canonical list.
    pub fn doc_id(&self, triple: (u32, u32, u32)) -> Option<usize> {
        self.list.binary_search(&triple).ok()
    }

    /// Triple at a canonical index.
    pub fn doc_at(&self, id: usize) -> Option<(u32, u32, u32)> {
        self.list.get(id).copied()
    }

    /// Outgoing `(relation, tail)` pairs of an entity in relation order.
    pub fn outgoing(&self, head: u32) -> Vec<(u32, u32)> {
        self.map
            .range((head, 0)..=(head, u32::MAX))
            .map(|(&(_, r), &t)| (r, t))
            .collect()
    }

    /// Write the text format: a `kb v1 <num_entities> <num_relations>`
    /// header followed by one `head relation tail` line per triple in
    /// canonical order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!(
            "kb v1 {} {}\n",
            self.num_entities, self.num_relations
        ));
        for (h, r, t) in &self.list {
            out.push_str(&format!("{h} {r} {t}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Parse the text format written by [`KnowledgeBase::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let display = path.display().to_string();
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::file_format(&display, "empty file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "kb" || fields[1] != "v1" {
            return Err(Error::file_format(
                &display,
                format!("bad header {header:?}, expected \"kb v1 <entities> <relations>\""),
            ));
        }
        let num_entities: usize = fields[2]
            .parse()
            .map_err(|_| Error::file_format(&display, "bad entity count"))?;
        let num_relations: usize = fields[3]
            .parse()
            .map_err(|_| Error::file_format(&display, "bad relation count"))?;
        let mut triples = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::file_format(
                    &display,
                    format!("line {}: expected \"head relation tail\"", lineno + 2),
                ));
            }
            let parse = |s: &str| -> Result<u32> {
                s.parse().map_err(|_| {
                    Error::file_format(&display, format!("line {}: bad integer {s:?}", lineno + 2))
                })
            };
            triples.push((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?));
        }
        KnowledgeBase::new(num_entities, num_relations, triples)
    }
}

/// Generate a seeded random functional knowledge base.
///
/// Sampling procedure (fixed, so independent re-implementations agree): a
/// `ChaCha8` stream seeded with `seed` visits every `(head, relation)` pair
/// in ascending order, includes it with probability `density` and draws its
/// tail uniformly; afterwards every entity with no outgoing triple (in
/// ascending order) receives one with a uniform relation and tail.
pub fn generate_kb(
    num_entities: usize,
    num_relations: usize,
    density: f64,
    seed: u64,
) -> Result<KnowledgeBase> {
    if num_entities < 2 {
        return Err(Error::Config("num_entities must be >= 2".into()));
    }
    if num_relations < 1 {
        return Err(Error::Config("num_relations must be >= 1".into()));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!(
            "density must be in (0, 1], got {density}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triples = Vec::new();
    let mut has_outgoing = vec![false; num_entities];
    for head in 0..num_entities as u32 {
        for rel in 0..num_relations as u32 {
            if rng.gen_bool(density) {
                let tail = rng.gen_range(0..num_entities as u32);
                triples.push((head, rel, tail));
                has_outgoing[head as usize] = true;
            }
        }
    }
    for head in 0..num_entities as u32 {
        if !has_outgoing[head as usize] {
            let rel = rng.gen_range(0..num_relations as u32);
            let tail = rng.gen_range(0..num_entities as u32);
            triples.push((head, rel, tail));
        }
    }
    KnowledgeBase::new(num_entities, num_relations, triples)
}

/// A k-hop question: starting at `source`, follow `relation_chain` to reach
/// `gold_answer`. `gold_path` lists the traversed triples in order; its
/// visited entities are all distinct, so the gold queries never repeat.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub source: u32,
    pub relation_chain: Vec<u32>,
    pub gold_answer: u32,
    pub gold_path: Vec<(u32, u32, u32)>,
}

impl Question {
    /// The `(head, relation)` pairs an agent must query to follow the path.
    pub fn gold_pairs(&self) -> Vec<(u32, u32)> {
        self.gold_path.iter().map(|&(h, r, _)| (h, r)).collect()
    }

    /// Human-readable surface form, also shown to critique models.
    pub fn render(&self) -> String {
        let rels: Vec<String> = self
            .relation_chain
            .iter()
            .map(|r| format!("r{r}"))
            .collect();
        format!("from e{} follow {}", self.source, rels.join(" "))
    }

    /// Gold answer as answer-slot text (matches entity token atoms).
    pub fn gold_answer_text(&self) -> String {
        format!("e{}", self.gold_answer)
    }
}

const QUESTION_ATTEMPTS: usize = 500;

/// Generate a seeded `hops`-hop question by random walk. Rejects walks that
/// revisit an entity, so gold paths have distinct query pairs and a
/// well-defined non-ambiguous answer; fails with [`Error::NoPath`] when the
/// knowledge base cannot support such a walk.
pub fn generate_question(kb: &KnowledgeBase, hops: usize, seed: u64) -> Result<Question> {
    if hops < 1 {
        return Err(Error::Config("hops must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'attempt: for _ in 0..QUESTION_ATTEMPTS {
        let source = rng.gen_range(0..kb.num_entities() as u32);
        let mut visited = vec![source];
        let mut cur = source;
        let mut path = Vec::with_capacity(hops);
        for _ in 0..hops {
            let out = kb.outgoing(cur);
            if out.is_empty() {
                continue 'attempt;
            }
            let (rel, tail) = out[rng.gen_range(0..out.len())];
            if visited.contains(&tail) {
                continue 'attempt;
            }
            path.push((cur, rel, tail));
            visited.push(tail);
            cur = tail;
        }
        let relation_chain = path.iter().map(|&(_, r, _)| r).collect();
        return Ok(Question {
            source,
            relation_chain,
            gold_answer: cur,
            gold_path: path,
        });
    }
    Err(Error::NoPath(format!(
        "no {hops}-hop walk with distinct entities found in {QUESTION_ATTEMPTS} attempts"
    )))
}

fn token_code(tok: &Token) -> u64 {
    match tok {
        Token::ThinkOpen => 0,
        Token::ThinkClose => 1,
        Token::SearchOpen => 2,
        Token::SearchClose => 3,
        Token::AnswerOpen => 4,
        Token::AnswerClose => 5,
        Token::StopTurn => 6,
        Token::Entity(e) => 0x1_0000_0000 + *e as u64,
        Token::Relation(r) => 0x2_0000_0000 + *r as u64,
    }
}

/// Answer a search query with exactly `k` documents.
///
/// If the query is exactly `[Entity(h), Relation(r)]` and the pair exists,
/// the matching triple comes first (not a distractor). Remaining slots are
/// distractors chosen by a seeded hash over `(query, slot index)` uniformly
/// from the other triples; a query that names no existing pair gets `k`
/// distractors. Pure in `(kb, query, k, seed)`.
pub fn retrieve(kb: &KnowledgeBase, query: &[Token], k: usize, seed: u64) -> Result<Vec<Document>> {
    if k < 1 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let pair = match query {
        [Token::Entity(h), Token::Relation(r)] => Some((*h, *r)),
        _ => None,
    };
    let matched = pair.and_then(|(h, r)| kb.lookup(h, r).map(|t| (h, r, t)));

    let mut docs = Vec::with_capacity(k);
    if let Some(triple) = matched {
        docs.push(Document {
            triple,
            is_distractor: false,
        });
    }

    let mut query_hash = seed;
    for tok in query {
        query_hash = mix_seed(&[query_hash, token_code(tok)]);
    }
    let all = kb.triples();
    let mut slot = 0u64;
    while docs.len() < k {
        let draw = mix_seed(&[query_hash, slot]) as usize;
        // Exclude the matched triple from the distractor pool unless it is
        // the only triple in the knowledge base.
        let triple = match matched {
            Some(m) if all.len() > 1 => {
                let m_idx = kb.doc_id(m).expect("matched triple is in the kb");
                let mut idx = draw % (all.len() - 1);
                if idx >= m_idx {
                    idx += 1;
                }
                all[idx]
            }
            _ => all[draw % all.len()],
        };
        docs.push(Document {
            triple,
            is_distractor: true,
        });
        slot += 1;
    }
    Ok(docs)
}

/// Stepping state for one episode: tracks the turn budget and termination.
/// Retrieval seeds are derived from `(episode seed, turn index)`, so a
/// replayed episode sees identical feedback.
#[derive(Debug)]
pub struct EpisodeState<'a> {
    kb: &'a KnowledgeBase,
    t_max: usize,
    k_docs: usize,
    seed: u64,
    turns_taken: usize,
    done: bool,
}

impl<'a> EpisodeState<'a> {
    pub fn new(kb: &'a KnowledgeBase, t_max: usize, k_docs: usize, seed: u64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::Config("t_max must be >= 1".into()));
        }
        if k_docs < 1 {
            return Err(Error::Config("k_docs must be >= 1".into()));
        }
        Ok(EpisodeState {
            kb,
            t_max,
            k_docs,
            seed,
            turns_taken: 0,
            done: false,
        })
    }

    /// Resume mid-episode with some turns already taken (used by Monte-Carlo
    /// continuation rollouts).
    pub fn resume(
        kb: &'a KnowledgeBase,
        t_max: usize,
        k_docs: usize,
        seed: u64,
        turns_taken: usize,
    ) -> Result<Self> {
        let mut s = Self::new(kb, t_max, k_docs, seed)?;
        if turns_taken > t_max {
            return Err(Error::Config(format!(
                "cannot resume at turn {turns_taken} with budget {t_max}"
            )));
        }
        s.turns_taken = turns_taken;
        s.done = turns_taken == t_max;
        Ok(s)
    }

    pub fn turns_taken(&self) -> usize {
        self.turns_taken
    }

    pub fn done(&self) -> bool {
        self.done
    }

    /// Apply one parsed action. Returns the feedback (documents for a
    /// search, an empty list for a malformed turn, nothing for an answer)
    /// and whether the episode is now finished. Answers always finish;
    /// other actions finish when they consume the last budgeted turn.
    pub fn step(&mut self, action: &ParsedAction) -> Result<(Option<Vec<Document>>, bool)> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let turn_index = self.turns_taken;
        self.turns_taken += 1;
        let out = match action {
            ParsedAction::Answer(_) => {
                self.done = true;
                (None, true)
            }
            ParsedAction::Search(query) => {
                let docs = retrieve(
                    self.kb,
                    query,
                    self.k_docs,
                    mix_seed(&[self.seed, turn_index as u64]),
                )?;
                self.done = self.turns_taken == self.t_max;
                (Some(docs), self.done)
            }
            ParsedAction::Malformed => {
                self.done = self.turns_taken == self.t_max;
                (Some(Vec::new()), self.done)
            }
        };
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Question files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct QuestionRecord {
    source: u32,
    relation_chain: Vec<u32>,
    gold_answer: u32,
}

/// Write questions as JSON Lines (`source`, `relation_chain`,
/// `gold_answer`). The gold path is not stored; it is re-derived against the
/// knowledge base on load.
pub fn save_questions(path: &Path, questions: &[Question]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for q in questions {
        let rec = QuestionRecord {
            source: q.source,
            relation_chain: q.relation_chain.clone(),
            gold_answer: q.gold_answer,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read questions and re-derive each gold path by following the knowledge
/// base; fails if a chain cannot be followed or ends somewhere other than
/// the stored gold answer.
pub fn load_questions(path: &Path, kb: &KnowledgeBase) -> Result<Vec<Question>> {
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut questions = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: QuestionRecord = serde_json::from_str(line)
            .map_err(|e| Error::file_format(&display, format!("line {}: {e}", lineno + 1)))?;
        let mut cur = rec.source;
        let mut path_triples = Vec::with_capacity(rec.relation_chain.len());
        for &rel in &rec.relation_chain {
            let tail = kb.lookup(cur, rel).ok_or_else(|| {
                Error::file_format(
                    &display,
                    format!("line {}: chain breaks at (e{cur}, r{rel})", lineno + 1),
                )
            })?;
            path_triples.push((cur, rel, tail));
            cur = tail;
        }
        if cur != rec.gold_answer {
            return Err(Error::file_format(
                &display,
                format!(
                    "line {}: chain ends at e{cur} but gold answer is e{}",
                    lineno + 1,
                    rec.gold_answer
                ),
            ));
        }
        questions.push(Question {
            source: rec.source,
            relation_chain: rec.relation_chain,
            gold_answer: rec.gold_answer,
            gold_path: path_triples,
        });
    }
    Ok(questions)
}
