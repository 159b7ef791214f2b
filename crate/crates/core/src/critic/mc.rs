//! Monte-Carlo value-estimation critic.
//!
//! For each search turn, this judge freezes the trajectory up to and
//! including that turn, rolls several fresh continuations forward under
//! the current policy, and averages their final correctness. A turn whose
//! post-state still leads to the right answer often enough is Good; one
//! that squandered the budget or derailed the episode is Bad.

use crate::credit::Label;
use crate::env::{KnowledgeBase, Question};
use crate::episode::{Trajectory, TurnKind};
use crate::error::{Error, Result};
use crate::eval::exact_match;
use crate::policy::{rollout_from_prefix, PolicyParams, RolloutOptions};
use crate::seeding::mix_seed;

use super::{CritiqueVerdict, VerdictSource};

/// Judge a trajectory by resuming `n_rollouts` sampled continuations after
/// each search turn and averaging their exact-match correctness. A turn is
/// Good when its estimate reaches `threshold`. Returns the verdict and the
/// per-search-turn value estimates. Deterministic given `seed`: rollout
/// seeds derive from `(seed, turn index, rollout index)`.
#[allow(clippy::too_many_arguments)]
pub fn mc_judge(
    traj: &Trajectory,
    params: &PolicyParams,
    question: &Question,
    kb: &KnowledgeBase,
    opts: &RolloutOptions,
    n_rollouts: usize,
    threshold: f64,
    seed: u64,
) -> Result<(CritiqueVerdict, Vec<f64>)> {
    if n_rollouts < 1 {
        return Err(Error::Config("n_rollouts must be >= 1".into()));
    }
    if !threshold.is_finite() {
        return Err(Error::Config(format!(
            "threshold must be finite, got {threshold}"
        )));
    }
    let continue_opts = RolloutOptions {
        greedy: false,
        ..opts.clone()
    };
    let gold = question.gold_answer_text();
    let mut labels = Vec::new();
    let mut estimates = Vec::new();
    for (i, turn) in traj.turns.iter().enumerate() {
        if turn.kind != TurnKind::Search {
            continue;
        }
        let prefix = &traj.turns[..=i];
        let mut hits = 0usize;
        for j in 0..n_rollouts {
            let continuation = rollout_from_prefix(
                params,
                question,
                kb,
                prefix,
                &continue_opts,
                mix_seed(&[seed, i as u64, j as u64]),
                &traj.question_id,
            )?;
            let correct = continuation
                .extracted_answer
                .as_deref()
                .map(|a| exact_match(a, &gold))
                .unwrap_or(false);
            if correct {
                hits += 1;
            }
        }
        let estimate = hits as f64 / n_rollouts as f64;
        labels.push(if estimate >= threshold {
            Label::Good
        } else {
            Label::Bad
        });
        estimates.push(estimate);
    }
    let verdict = CritiqueVerdict {
        labels,
        source: VerdictSource::MonteCarlo,
        raw_text: None,
        parse_ok: true,
    };
    Ok((verdict, estimates))
}
