//! Log-linear softmax policy over the episode vocabulary.
//!
//! The policy scores every vocabulary token with a linear function of a
//! sparse binary state encoding and samples from the softmax. The state
//! captures what a tiny agent needs to act: the last token of the turn so
//! far, the turn number, which entities retrieval has revealed, which
//! relations the question asks about, and whether any query has been
//! repeated. Exact log-probabilities, gradients, and distributions are all
//! available in closed form, which keeps the training objective and its
//! tests honest.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::env::{EpisodeState, KnowledgeBase, Question};
use crate::episode::{parse_turn_action, Token, Trajectory, Turn, TurnKind, Vocab};
use crate::error::{Error, Result};

/// Sampling temperature used for trajectory collection during training.
pub const TRAIN_TEMPERATURE: f64 = 1.0;

/// Layout of the policy's state features for a fixed vocabulary and turn
/// budget. Feature order: last-token one-hot (one extra slot for
/// turn-start), turn-index one-hot (capped), seen-entity flags (the
/// question's source entity plus everything feedback revealed),
/// question-relation flags, repeated-query flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSpec {
    pub vocab: Vocab,
    /// Turn indices at or above this are folded into the last slot.
    pub t_max: usize,
}

impl FeatureSpec {
    pub fn new(vocab: Vocab, t_max: usize) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::Config("feature spec needs t_max >= 1".into()));
        }
        Ok(FeatureSpec { vocab, t_max })
    }

    /// Number of feature dimensions `D`.
    pub fn dim(&self) -> usize {
        let v = self.vocab.size();
        (v + 1) + self.t_max + self.vocab.num_entities + self.vocab.num_relations + 1
    }

    fn turn_offset(&self) -> usize {
        self.vocab.size() + 1
    }

    fn seen_offset(&self) -> usize {
        self.turn_offset() + self.t_max
    }

    fn relation_offset(&self) -> usize {
        self.seen_offset() + self.vocab.num_entities
    }

    fn repeat_offset(&self) -> usize {
        self.relation_offset() + self.vocab.num_relations
    }

    /// Feature index for "the current turn has no tokens yet".
    pub fn turn_start_index(&self) -> usize {
        self.vocab.size()
    }

    /// Feature index of the turn-index slot for a turn (capped at the
    /// final slot).
    pub fn turn_index_feature(&self, turn: usize) -> usize {
        self.turn_offset() + turn.min(self.t_max - 1)
    }

    /// Feature index of the in-context flag for an entity (set for the
    /// question's source and anything feedback revealed).
    pub fn seen_entity_index(&self, entity: u32) -> Result<usize> {
        if entity as usize >= self.vocab.num_entities {
            return Err(Error::InvalidToken(format!(
                "entity e{entity} out of range for seen-entity features"
            )));
        }
        Ok(self.seen_offset() + entity as usize)
    }

    /// Feature index of the in-question flag for a relation.
    pub fn question_relation_index(&self, relation: u32) -> Result<usize> {
        if relation as usize >= self.vocab.num_relations {
            return Err(Error::InvalidToken(format!(
                "relation r{relation} out of range for question-relation features"
            )));
        }
        Ok(self.relation_offset() + relation as usize)
    }

    /// Feature index of the last-token flag for a token.
    pub fn last_token_index(&self, token: Token) -> Result<usize> {
        self.vocab.index_of(token)
    }

    /// Encode the decision state before the next action token: completed
    /// `history` turns (with their feedback) plus the `partial` tokens of
    /// the turn being generated.
    pub fn featurize(
        &self,
        question: &Question,
        history: &[Turn],
        partial: &[Token],
    ) -> Result<FeatureVector> {
        let mut mask = vec![false; self.dim()];
        // Last token of the current partial turn, or the turn-start slot.
        match partial.last() {
            Some(tok) => mask[self.vocab.index_of(*tok)?] = true,
            None => mask[self.turn_start_index()] = true,
        }
        // Turn index, capped at the final slot.
        mask[self.turn_index_feature(history.len())] = true;
        // The question names its source entity, so it is in context from
        // the start; feedback documents reveal the rest.
        mask[self.seen_entity_index(question.source)?] = true;
        for t in history {
            if let Some(docs) = &t.feedback {
                for d in docs {
                    let (h, _, tail) = d.triple;
                    mask[self.seen_entity_index(h)?] = true;
                    mask[self.seen_entity_index(tail)?] = true;
                }
            }
        }
        // Relations named by the question.
        for &r in &question.relation_chain {
            mask[self.question_relation_index(r)?] = true;
        }
        // Has any (head, relation) query been issued more than once?
        let mut pairs = std::collections::BTreeMap::new();
        for t in history {
            if let Some(p) = t.query_pair() {
                *pairs.entry(p).or_insert(0usize) += 1;
            }
        }
        if pairs.values().any(|&c| c >= 2) {
            mask[self.repeat_offset()] = true;
        }
        let active = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect();
        Ok(FeatureVector {
            active,
            dim: self.dim(),
        })
    }
}

/// Sparse binary feature vector: the listed indices are 1, the rest 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVector {
    /// Active feature indices, strictly ascending.
    pub active: Vec<usize>,
    /// Total dimensionality.
    pub dim: usize,
}

/// Policy parameters: one weight per (token, feature) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// Weight matrix, shape `(vocab size, feature dim)`.
    pub weights: Array2<f64>,
    pub spec: FeatureSpec,
}

impl PolicyParams {
    /// All-zero weights: the uniform policy.
    pub fn zeros(spec: FeatureSpec) -> Self {
        PolicyParams {
            weights: Array2::zeros((spec.vocab.size(), spec.dim())),
            spec,
        }
    }

    /// Weights that favor the tag skeleton of well-formed turns — open a
    /// search, put an entity then a relation inside, close it, and answer
    /// with a single entity — plus two generic tool-use instincts: prefer
    /// relations the question names and entities already in context. This
    /// mimics an agent that has learned the protocol but not the task: it
    /// knows nothing about hop order or any particular answer.
    pub fn format_primed(spec: FeatureSpec, prime_scale: f64) -> Result<Self> {
        if !(prime_scale >= 0.0 && prime_scale.is_finite()) {
            return Err(Error::Config(format!(
                "prime_scale must be finite and >= 0, got {prime_scale}"
            )));
        }
        let mut p = Self::zeros(spec);
        let s = prime_scale;
        let start = spec.turn_start_index();
        let v = &spec.vocab;
        let search_open = v.index_of(Token::SearchOpen)?;
        let answer_open = v.index_of(Token::AnswerOpen)?;
        let search_close = v.index_of(Token::SearchClose)?;
        let answer_close = v.index_of(Token::AnswerClose)?;
        // Boosts the tool-use instincts add on always-active feature
        // columns; the slot weights below subtract them back out wherever
        // the instinct would break the tag skeleton.
        let rel_instinct = 0.75 * s;
        let ent_instinct = 0.5 * s;
        // Turn openers: lean toward searching, keep answering reachable.
        p.weights[[search_open, start]] = s;
        p.weights[[answer_open, start]] = 0.5 * s;
        for e in 0..v.num_entities as u32 {
            let ent = v.index_of(Token::Entity(e))?;
            // Some entity follows either opening tag...
            p.weights[[ent, search_open]] = s;
            p.weights[[ent, answer_open]] = s;
            // ...and after an entity, close the span or name a relation —
            // never a second entity (turn content is one entity per span).
            p.weights[[search_close, ent]] = 0.5 * s;
            p.weights[[answer_close, ent]] = 0.5 * s;
            for r in 0..v.num_relations as u32 {
                p.weights[[v.index_of(Token::Relation(r))?, ent]] = 0.5 * s;
            }
            for e2 in 0..v.num_entities as u32 {
                p.weights[[v.index_of(Token::Entity(e2))?, ent]] = -ent_instinct;
            }
        }
        for r in 0..v.num_relations as u32 {
            let rel = v.index_of(Token::Relation(r))?;
            // A relation is followed by the closing search tag, never by a
            // second relation (one relation per query).
            p.weights[[search_close, rel]] = s;
            for r2 in 0..v.num_relations as u32 {
                p.weights[[v.index_of(Token::Relation(r2))?, rel]] = -rel_instinct;
            }
        }
        // Tool-use instincts: lean toward relations the question mentions
        // and entities already in context. Their columns are active in
        // every state, so turn starts subtract them back out: a turn opens
        // with a tag, not with bare content.
        for r in 0..v.num_relations as u32 {
            let rel = v.index_of(Token::Relation(r))?;
            p.weights[[rel, spec.question_relation_index(r)?]] = rel_instinct;
            p.weights[[rel, start]] = -rel_instinct;
        }
        for e in 0..v.num_entities as u32 {
            let ent = v.index_of(Token::Entity(e))?;
            p.weights[[ent, spec.seen_entity_index(e)?]] = ent_instinct;
            p.weights[[ent, start]] = -ent_instinct;
        }
        // Budget awareness: on the last turn there is no point searching —
        // open an answer instead and close it rather than keep querying.
        let last_turn = spec.turn_index_feature(spec.t_max - 1);
        p.weights[[answer_open, last_turn]] = s;
        p.weights[[answer_close, last_turn]] = s;
        for r in 0..v.num_relations as u32 {
            p.weights[[v.index_of(Token::Relation(r))?, last_turn]] = -rel_instinct;
        }
        Ok(p)
    }

    /// Hand-built weights whose greedy rollout walks the question's gold
    /// path and answers. The script is feedback-driven rather than
    /// schedule-driven: each turn queries from the deepest gold entity seen
    /// so far and the answer fires once the gold answer appears in
    /// feedback, so rollouts resumed from any prefix continue sensibly.
    pub fn gold_path_params(spec: FeatureSpec, question: &Question, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!(
                "scale must be finite and > 0, got {scale}"
            )));
        }
        if question.gold_path.is_empty() {
            return Err(Error::Config("question has an empty gold path".into()));
        }
        let mut p = Self::zeros(spec);
        let b = scale;
        let v = &spec.vocab;
        let hops = question.gold_path.len() as f64;
        let start = spec.turn_start_index();
        // Path entities in visit order: source, intermediates, answer.
        let mut path = vec![question.source];
        path.extend(question.gold_path.iter().map(|&(_, _, t)| t));
        let answer = *path.last().expect("non-empty path");

        // Open a search by default; switch to answering once the gold
        // answer has been revealed by feedback.
        p.weights[[v.index_of(Token::SearchOpen)?, start]] = (hops + 2.0) * b;
        p.weights[[
            v.index_of(Token::AnswerOpen)?,
            spec.seen_entity_index(answer)?,
        ]] = (hops + 4.0) * b;
        // Query head: the source before any feedback, otherwise the deepest
        // revealed path entity (weights grow along the path).
        p.weights[[
            v.index_of(Token::Entity(question.source))?,
            v.index_of(Token::SearchOpen)?,
        ]] = 0.5 * b;
        for (depth, &e) in path.iter().enumerate() {
            p.weights[[v.index_of(Token::Entity(e))?, spec.seen_entity_index(e)?]] =
                (1.0 + depth as f64) * b;
        }
        // Inside a search: the hop relation follows its head entity, then
        // the closing tag follows the relation.
        for &(h, r, _) in &question.gold_path {
            p.weights[[
                v.index_of(Token::Relation(r))?,
                v.index_of(Token::Entity(h))?,
            ]] = (hops + 1.0) * b;
            p.weights[[
                v.index_of(Token::SearchClose)?,
                v.index_of(Token::Relation(r))?,
            ]] = (hops + 2.0) * b;
        }
        // Inside the answer span: the gold entity, then the closing tag.
        p.weights[[
            v.index_of(Token::Entity(answer))?,
            v.index_of(Token::AnswerOpen)?,
        ]] = (hops + 6.0) * b;
        p.weights[[
            v.index_of(Token::AnswerClose)?,
            v.index_of(Token::Entity(answer))?,
        ]] = (hops + 6.0) * b;
        Ok(p)
    }

    /// Token logits `z = W phi` for a state.
    pub fn logits(&self, features: &FeatureVector) -> Result<Vec<f64>> {
        if features.dim != self.spec.dim() {
            return Err(Error::Shape(format!(
                "feature dim {} does not match policy dim {}",
                features.dim,
                self.spec.dim()
            )));
        }
        let v = self.spec.vocab.size();
        let mut z = vec![0.0; v];
        for &j in &features.active {
            if j >= self.spec.dim() {
                return Err(Error::Shape(format!("feature index {j} out of range")));
            }
            for (u, zu) in z.iter_mut().enumerate() {
                *zu += self.weights[[u, j]];
            }
        }
        Ok(z)
    }

    /// Write the weights as a plain-text checkpoint. Values are printed
    /// with 17 significant digits, which round-trips `f64` exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (v, d) = self.weights.dim();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "policy v1 {v} {d}")?;
        for row in self.weights.rows() {
            let line: Vec<String> = row.iter().map(|w| format!("{w:.17e}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Load a checkpoint written by [`PolicyParams::save`], validating the
    /// matrix shape against `spec`.
    pub fn load(path: &Path, spec: FeatureSpec) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::file_format(path, "empty checkpoint"))??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "policy" || parts[1] != "v1" {
            return Err(Error::file_format(path, format!("bad header {header:?}")));
        }
        let v: usize = parts[2]
            .parse()
            .map_err(|_| Error::file_format(path, format!("bad vocab size {:?}", parts[2])))?;
        let d: usize = parts[3]
            .parse()
            .map_err(|_| Error::file_format(path, format!("bad feature dim {:?}", parts[3])))?;
        if v != spec.vocab.size() || d != spec.dim() {
            return Err(Error::file_format(
                path,
                format!(
                    "checkpoint shape {v}x{d} does not match policy shape {}x{}",
                    spec.vocab.size(),
                    spec.dim()
                ),
            ));
        }
        let mut weights = Array2::zeros((v, d));
        for row in 0..v {
            let line = lines
                .next()
                .ok_or_else(|| Error::file_format(path, format!("missing weight row {row}")))??;
            let values: Vec<&str> = line.split_whitespace().collect();
            if values.len() != d {
                return Err(Error::file_format(
                    path,
                    format!("row {row} has {} values, expected {d}", values.len()),
                ));
            }
            for (col, val) in values.iter().enumerate() {
                weights[[row, col]] = val.parse::<f64>().map_err(|_| {
                    Error::file_format(path, format!("bad weight at row {row} col {col}: {val:?}"))
                })?;
            }
        }
        if let Some(extra) = lines.next() {
            let extra = extra?;
            if !extra.trim().is_empty() {
                return Err(Error::file_format(
                    path,
                    "trailing content after weight rows",
                ));
            }
        }
        Ok(PolicyParams { weights, spec })
    }
}

// ---------------------------------------------------------------------------
// Distribution helpers
// ---------------------------------------------------------------------------

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Shannon entropy `-sum p ln p` in nats, with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Exact Kullback-Leibler divergence `KL(p || q)` in nats. Terms with
/// `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Index of the largest value; ties break toward the lowest index, which
/// keeps greedy decoding deterministic.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Token distribution at a state for a given temperature.
pub fn action_distribution(
    params: &PolicyParams,
    features: &FeatureVector,
    temperature: f64,
) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be finite and > 0, got {temperature}"
        )));
    }
    let mut z = params.logits(features)?;
    for zi in &mut z {
        *zi /= temperature;
    }
    Ok(softmax(&z))
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Everything needed to push gradients through one sampled token: the
/// realized token, the full token distribution at that state, and the state
/// features.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGradient {
    pub token_index: usize,
    pub probs: Vec<f64>,
    pub features: FeatureVector,
}

impl TokenGradient {
    pub fn logprob(&self) -> f64 {
        self.probs[self.token_index].ln()
    }

    /// Accumulate `coeff * grad log pi(token | state)` into `acc`. The
    /// gradient of the log-softmax is `(onehot(token) - probs)` outer the
    /// binary features, so only active feature columns are touched.
    pub fn add_scaled_to(&self, coeff: f64, acc: &mut Array2<f64>) {
        for &j in &self.features.active {
            for (u, &p) in self.probs.iter().enumerate() {
                let indicator = if u == self.token_index { 1.0 } else { 0.0 };
                acc[[u, j]] += coeff * (indicator - p);
            }
        }
    }
}

/// Accumulate `coeff * dz` through the linear layer: for a loss `L` with
/// per-logit partials `dz[u] = dL/dz_u` at this state, the weight gradient
/// is `dL/dW[u, j] = dz[u] * phi_j`.
pub fn add_logit_grad(dz: &[f64], features: &FeatureVector, coeff: f64, acc: &mut Array2<f64>) {
    for &j in &features.active {
        for (u, &g) in dz.iter().enumerate() {
            acc[[u, j]] += coeff * g;
        }
    }
}

/// Distribution, features, and realized token for one state-action pair at
/// the training temperature.
pub fn logprob_and_grad(
    params: &PolicyParams,
    features: &FeatureVector,
    token_index: usize,
) -> Result<TokenGradient> {
    let probs = action_distribution(params, features, TRAIN_TEMPERATURE)?;
    if token_index >= probs.len() {
        return Err(Error::Shape(format!(
            "token index {token_index} out of range for vocabulary of {}",
            probs.len()
        )));
    }
    Ok(TokenGradient {
        token_index,
        probs,
        features: features.clone(),
    })
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

/// Knobs for sampling one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOptions {
    /// Turn budget for the episode.
    pub t_max: usize,
    /// Documents returned per search.
    pub k_docs: usize,
    /// Hard cap on action tokens per turn.
    pub max_turn_tokens: usize,
    /// Decode by argmax instead of sampling.
    pub greedy: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            t_max: 4,
            k_docs: 3,
            max_turn_tokens: 8,
            greedy: false,
        }
    }
}

fn ends_turn(token: Token, partial_len: usize, cap: usize) -> bool {
    matches!(
        token,
        Token::SearchClose | Token::AnswerClose | Token::StopTurn
    ) || partial_len >= cap
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn check_rollout_inputs(
    params: &PolicyParams,
    kb: &KnowledgeBase,
    opts: &RolloutOptions,
) -> Result<()> {
    if params.spec.vocab != kb.vocab() {
        return Err(Error::Shape(format!(
            "policy vocabulary ({} entities, {} relations) does not match knowledge base \
             ({} entities, {} relations)",
            params.spec.vocab.num_entities,
            params.spec.vocab.num_relations,
            kb.num_entities(),
            kb.num_relations()
        )));
    }
    if opts.max_turn_tokens < 1 {
        return Err(Error::Config("max_turn_tokens must be >= 1".into()));
    }
    Ok(())
}

/// Sample one full episode. The seed drives both token sampling and
/// retrieval, so equal inputs reproduce the trajectory exactly; greedy
/// decoding ignores the sampler but keeps seeded retrieval.
pub fn sample_trajectory(
    params: &PolicyParams,
    question: &Question,
    kb: &KnowledgeBase,
    opts: &RolloutOptions,
    seed: u64,
    question_id: &str,
) -> Result<Trajectory> {
    rollout_from_prefix(params, question, kb, &[], opts, seed, question_id)
}

/// Sample a continuation of an episode whose first turns are already fixed.
/// Prefix turns keep their recorded feedback; their log-probabilities are
/// re-scored under `params` so the returned trajectory is self-consistent.
/// Retrieval seeds continue the turn numbering, and a prefix that already
/// answered (or exhausts the budget) is returned as-is.
pub fn rollout_from_prefix(
    params: &PolicyParams,
    question: &Question,
    kb: &KnowledgeBase,
    prefix: &[Turn],
    opts: &RolloutOptions,
    seed: u64,
    question_id: &str,
) -> Result<Trajectory> {
    check_rollout_inputs(params, kb, opts)?;
    if prefix.len() > opts.t_max {
        return Err(Error::Config(format!(
            "prefix of {} turns exceeds the budget of {}",
            prefix.len(),
            opts.t_max
        )));
    }
    let mut env = EpisodeState::resume(kb, opts.t_max, opts.k_docs, seed, prefix.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut turns: Vec<Turn> = Vec::new();
    let mut logprobs: Vec<f64> = Vec::new();

    // Re-score the fixed prefix under the current parameters.
    let mut answered = false;
    for turn in prefix {
        let mut partial: Vec<Token> = Vec::new();
        for &tok in &turn.action_tokens {
            let f = params.spec.featurize(question, &turns, &partial)?;
            let g = logprob_and_grad(params, &f, params.spec.vocab.index_of(tok)?)?;
            logprobs.push(g.logprob());
            partial.push(tok);
        }
        answered |= turn.kind == TurnKind::Answer;
        turns.push(turn.clone());
    }

    let mut done = env.done() || answered;
    while !done {
        let mut partial: Vec<Token> = Vec::new();
        loop {
            let f = params.spec.featurize(question, &turns, &partial)?;
            let z = params.logits(&f)?;
            let probs = softmax(&z);
            let idx = if opts.greedy {
                argmax(&z)
            } else {
                sample_index(&probs, &mut rng)
            };
            logprobs.push(probs[idx].ln());
            partial.push(params.spec.vocab.token_at(idx)?);
            if ends_turn(
                partial[partial.len() - 1],
                partial.len(),
                opts.max_turn_tokens,
            ) {
                break;
            }
        }
        let action = parse_turn_action(&partial);
        let (feedback, finished) = env.step(&action)?;
        turns.push(Turn::new(partial, feedback));
        done = finished;
    }

    let mut traj = Trajectory {
        question_id: question_id.to_string(),
        turns,
        token_logprobs: logprobs,
        extracted_answer: None,
        terminated: true,
        seed,
    };
    traj.extracted_answer = crate::episode::extract_answer(&traj);
    Ok(traj)
}

/// The (features, token index) decision sequence of a recorded trajectory,
/// reconstructed for teacher-forced scoring and gradient computation.
pub fn trajectory_steps(
    spec: &FeatureSpec,
    question: &Question,
    traj: &Trajectory,
) -> Result<Vec<(FeatureVector, usize)>> {
    let mut steps = Vec::with_capacity(traj.num_action_tokens());
    let mut history: Vec<Turn> = Vec::new();
    for turn in &traj.turns {
        let mut partial: Vec<Token> = Vec::new();
        for &tok in &turn.action_tokens {
            let f = spec.featurize(question, &history, &partial)?;
            steps.push((f, spec.vocab.index_of(tok)?));
            partial.push(tok);
        }
        history.push(turn.clone());
    }
    Ok(steps)
}

/// Log-probability of each action token of a recorded trajectory under
/// `params` at the training temperature.
pub fn score_trajectory(
    params: &PolicyParams,
    question: &Question,
    traj: &Trajectory,
) -> Result<Vec<f64>> {
    trajectory_steps(&params.spec, question, traj)?
        .into_iter()
        .map(|(f, idx)| Ok(logprob_and_grad(params, &f, idx)?.logprob()))
        .collect()
}
