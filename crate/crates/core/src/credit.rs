//! Reward and advantage algebra.
//!
//! Outcome rewards follow a four-case rule over answer correctness and
//! format discipline; groups of rewards are normalized to zero-mean,
//! unit-std advantages shared by every token of a trajectory. Turn-level
//! critic labels turn into non-negative turn advantages normalized by the
//! number of good turns, and the two signals blend per token:
//!
//! `adv(token in turn t) = alpha * turn_adv[t] + (1 - alpha) * global_adv`
//!
//! where only valid Search turns carry a turn advantage (Answer, Malformed
//! and think-only turns use zero in the first term).

use serde::{Deserialize, Serialize};

use crate::episode::{Trajectory, TurnKind};
use crate::error::{Error, Result};
use crate::eval::exact_match;

/// Retrospective judgment of one search turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Good,
    Bad,
}

impl Label {
    pub fn reward(self) -> f64 {
        match self {
            Label::Good => 1.0,
            Label::Bad => 0.0,
        }
    }
}

/// Everything the trainer computed about one trajectory's credit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// Extracted answer exactly matches the gold answer.
    pub outcome_correct: bool,
    /// Whole trajectory passed the format check.
    pub format_ok: bool,
    /// Four-case outcome reward.
    pub global_reward: f64,
    /// Group-normalized advantage shared by all tokens.
    pub global_advantage: f64,
    /// Critic labels for the Search turns, in order.
    pub turn_labels: Vec<Label>,
    /// Binary rewards derived from the labels.
    pub turn_rewards: Vec<f64>,
    /// Normalized turn advantages (non-negative, sum < 1).
    pub turn_advantages: Vec<f64>,
    /// Final per-action-token advantages fed to the objective.
    pub token_advantages: Vec<f64>,
}

/// Four-case outcome reward:
///
/// | correct | formatted | reward          |
/// |---------|-----------|-----------------|
/// | yes     | yes       | `1`             |
/// | yes     | no        | `1 - lambda_f`  |
/// | no      | yes       | `lambda_f`      |
/// | no      | no        | `0`             |
///
/// Correctness is normalized exact match of the extracted answer against the
/// gold answer; a missing answer is incorrect.
pub fn global_reward(
    extracted: Option<&str>,
    gold: &str,
    format_ok: bool,
    lambda_f: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda_f) {
        return Err(Error::Config(format!(
            "lambda_f must be in [0, 1], got {lambda_f}"
        )));
    }
    let correct = extracted.map(|e| exact_match(e, gold)).unwrap_or(false);
    Ok(match (correct, format_ok) {
        (true, true) => 1.0,
        (true, false) => 1.0 - lambda_f,
        (false, true) => lambda_f,
        (false, false) => 0.0,
    })
}

/// Group-normalized advantages: `(r - mean) / std` with the population
/// standard deviation. A degenerate group (std below `std_floor`) gets all
/// zeros rather than amplified noise.
pub fn global_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!(
            "advantage normalization needs a group of >= 2 rewards, got {}",
            rewards.len()
        )));
    }
    if std_floor <= 0.0 {
        return Err(Error::Config(format!(
            "std_floor must be > 0, got {std_floor}"
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numerical("non-finite reward in group".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Binary turn rewards from critic labels (Good -> 1, Bad -> 0).
pub fn turn_rewards(labels: &[Label]) -> Vec<f64> {
    labels.iter().map(|l| l.reward()).collect()
}

/// Normalized turn advantages: `r_t / (sum(r) + eps)`. All-bad rewards map
/// to all zeros; the advantages are non-negative and sum to
/// `S / (S + eps) < 1` where `S` is the number of good turns.
///
/// Each good turn's value is realized as the difference of consecutive
/// cumulative ratios `k/(S + eps)` (within one ulp of `1/(S + eps)`). The
/// consecutive ratios are within a factor of two of each other, so by the
/// Sterbenz lemma every difference and every running addition is exact: a
/// plain left-to-right sum of the result reproduces `S / (S + eps)` exactly
/// in floating point, which downstream bookkeeping relies on.
pub fn turn_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!(
            "eps must be a positive finite value, got {eps}"
        )));
    }
    if rewards.iter().any(|r| *r != 0.0 && *r != 1.0) {
        return Err(Error::Numerical(
            "turn rewards must be binary (0 or 1)".into(),
        ));
    }
    let total: f64 = rewards.iter().sum();
    let mut advs = vec![0.0; rewards.len()];
    let mut good = 0.0;
    let mut prev_cum = 0.0;
    for (slot, r) in advs.iter_mut().zip(rewards) {
        if *r == 1.0 {
            good += 1.0;
            let cum = good / (total + eps);
            *slot = cum - prev_cum;
            prev_cum = cum;
        }
    }
    Ok(advs)
}

/// Blend turn advantages with the trajectory's global advantage into one
/// value per action token. Turn advantages align with the Search turns in
/// order; tokens in Answer, Malformed or think-only turns take
/// `(1 - alpha) * global_adv` (their turn term is zero).
pub fn hybrid_token_advantages(
    traj: &Trajectory,
    global_adv: f64,
    turn_adv: &[f64],
    alpha: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    let num_search = traj.num_search_turns();
    if turn_adv.len() != num_search {
        return Err(Error::Shape(format!(
            "expected {num_search} turn advantages (one per Search turn), got {}",
            turn_adv.len()
        )));
    }
    let mut out = Vec::with_capacity(traj.num_action_tokens());
    let mut next_search = 0usize;
    for turn in &traj.turns {
        let turn_term = if turn.kind == TurnKind::Search {
            let a = turn_adv[next_search];
            next_search += 1;
            a
        } else {
            0.0
        };
        let adv = alpha * turn_term + (1.0 - alpha) * global_adv;
        out.extend(std::iter::repeat(adv).take(turn.action_tokens.len()));
    }
    Ok(out)
}
