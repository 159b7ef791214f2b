//! Group-relative policy optimization with hybrid credit assignment.
//!
//! Each training step samples a group of episodes per question from a
//! frozen policy snapshot, scores them with the four-case outcome reward
//! plus per-turn critic labels, and ascends a clipped surrogate objective
//! whose token advantages blend the group-normalized outcome signal with
//! dense turn-level credit. An exact KL penalty anchors the policy to its
//! initialization and an entropy bonus keeps exploration alive. The loop
//! persists config, metrics, and checkpoints so runs can be resumed and
//! replayed bit-for-bit, and a collapse detector stops runaway runs.

use ndarray::Array2;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

use crate::credit::{
    global_advantages, global_reward, hybrid_token_advantages, turn_advantages, turn_rewards,
    Label, RewardBreakdown,
};
use crate::critic::{
    build_critique_prompt, mc_judge, oracle_judge, remote_judge_batch, CriticEndpointConfig,
};
use crate::env::{KnowledgeBase, Question};
use crate::episode::{check_format, serialize_trajectory, Trajectory, TurnKind};
use crate::error::{Error, Result};
use crate::eval::{evaluate, exact_match};
use crate::policy::{
    action_distribution, add_logit_grad, entropy, kl_divergence, logprob_and_grad,
    trajectory_steps, FeatureSpec, PolicyParams, RolloutOptions, TRAIN_TEMPERATURE,
};
use crate::seeding::mix_seed;

/// Which critic labels search turns during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticSource {
    Oracle,
    MonteCarlo,
    Remote,
    /// No critic: the dense term is disabled and alpha is treated as 0.
    None,
}

impl CriticSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            CriticSource::Oracle => "oracle",
            CriticSource::MonteCarlo => "monte_carlo",
            CriticSource::Remote => "remote",
            CriticSource::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(CriticSource::Oracle),
            "monte_carlo" => Ok(CriticSource::MonteCarlo),
            "remote" => Ok(CriticSource::Remote),
            "none" => Ok(CriticSource::None),
            other => Err(Error::Config(format!(
                "unknown critic_source {other:?} (expected oracle, monte_carlo, remote, or none)"
            ))),
        }
    }
}

/// Every knob of a training run. The file form is flat `key=value` lines
/// with keys exactly matching these field names.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Group size: trajectories sampled per question per step.
    pub g: usize,
    /// Dense/global blend weight in the hybrid advantage.
    pub alpha: f64,
    /// Format weight in the four-case outcome reward.
    pub lambda_f: f64,
    /// KL penalty coefficient.
    pub beta: f64,
    /// Entropy bonus coefficient.
    pub eta: f64,
    /// Clip radius of the surrogate objective.
    pub epsilon_clip: f64,
    /// Stabilizer in the turn-advantage denominator.
    pub epsilon_turn: f64,
    /// Below this population std a group's advantages are zeroed.
    pub std_floor: f64,
    /// Gradient-ascent step size.
    pub learning_rate: f64,
    /// Fraction of total steps spent linearly ramping the learning rate.
    pub warmup_fraction: f64,
    /// Inner gradient epochs per batch against the frozen snapshot.
    pub m: usize,
    /// Episode turn budget.
    pub t_max: usize,
    /// Documents returned per search.
    pub k_docs: usize,
    /// Cap on action tokens per turn.
    pub max_turn_tokens: usize,
    /// Questions per training step.
    pub batch_questions: usize,
    /// Total optimizer steps for the run.
    pub total_steps: usize,
    /// Run seed; all trajectory seeds derive from it.
    pub seed: u64,
    /// Turn-label source.
    pub critic_source: CriticSource,
    /// Scale of the format-priming initialization (0 = uniform policy).
    pub prime_scale: f64,
    /// Continuations per turn for the Monte-Carlo critic.
    pub mc_rollouts: usize,
    /// Good/Bad threshold on the Monte-Carlo value estimate.
    pub mc_threshold: f64,
    /// Remote critic endpoint root URL (required when critic_source=remote).
    pub critic_base_url: String,
    /// Remote critic model name.
    pub critic_model: String,
    /// Sample group trajectories on the thread pool.
    pub parallel_rollouts: bool,
    /// Checkpoint every this many steps (and at the end of the run).
    pub checkpoint_interval: usize,
    /// Trailing window for collapse detection.
    pub collapse_window: usize,
    /// KL level that counts as collapsed when sustained for a full window.
    pub kl_limit: f64,
    /// Gradient-norm spike factor over the trailing-window median.
    pub grad_spike_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            g: 5,
            alpha: 0.25,
            lambda_f: 0.2,
            beta: 1e-3,
            eta: 1e-3,
            epsilon_clip: 0.2,
            epsilon_turn: 1e-6,
            std_floor: 1e-8,
            learning_rate: 0.05,
            warmup_fraction: 0.0,
            m: 1,
            t_max: 4,
            k_docs: 3,
            max_turn_tokens: 8,
            batch_questions: 1,
            total_steps: 200,
            seed: 0,
            critic_source: CriticSource::Oracle,
            prime_scale: 0.0,
            mc_rollouts: 10,
            mc_threshold: 0.5,
            critic_base_url: String::new(),
            critic_model: "critic".into(),
            parallel_rollouts: false,
            checkpoint_interval: 10,
            collapse_window: 20,
            kl_limit: 5.0,
            grad_spike_factor: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        }
        check(self.g >= 2, "g must be >= 2 (advantages need a group)")?;
        check((0.0..=1.0).contains(&self.alpha), "alpha must be in [0, 1]")?;
        check(
            (0.0..=1.0).contains(&self.lambda_f),
            "lambda_f must be in [0, 1]",
        )?;
        check(self.beta >= 0.0, "beta must be >= 0")?;
        check(self.eta >= 0.0, "eta must be >= 0")?;
        check(self.epsilon_clip > 0.0, "epsilon_clip must be > 0")?;
        check(self.epsilon_turn > 0.0, "epsilon_turn must be > 0")?;
        check(self.std_floor > 0.0, "std_floor must be > 0")?;
        check(self.learning_rate > 0.0, "learning_rate must be > 0")?;
        check(
            (0.0..1.0).contains(&self.warmup_fraction),
            "warmup_fraction must be in [0, 1)",
        )?;
        check(self.m >= 1, "m must be >= 1")?;
        check(self.t_max >= 1, "t_max must be >= 1")?;
        check(self.k_docs >= 1, "k_docs must be >= 1")?;
        check(self.max_turn_tokens >= 1, "max_turn_tokens must be >= 1")?;
        check(self.batch_questions >= 1, "batch_questions must be >= 1")?;
        check(self.total_steps >= 1, "total_steps must be >= 1")?;
        check(self.prime_scale >= 0.0, "prime_scale must be >= 0")?;
        check(self.mc_rollouts >= 1, "mc_rollouts must be >= 1")?;
        check(self.mc_threshold.is_finite(), "mc_threshold must be finite")?;
        check(
            self.checkpoint_interval >= 1,
            "checkpoint_interval must be >= 1",
        )?;
        check(self.collapse_window >= 2, "collapse_window must be >= 2")?;
        check(self.kl_limit > 0.0, "kl_limit must be > 0")?;
        check(
            self.grad_spike_factor > 1.0,
            "grad_spike_factor must be > 1",
        )?;
        if self.critic_source == CriticSource::Remote && self.critic_base_url.is_empty() {
            return Err(Error::Config(
                "critic_source=remote requires critic_base_url".into(),
            ));
        }
        Ok(())
    }

    /// The dense blend weight actually used: zero when no critic is
    /// configured, so labels never influence the objective.
    pub fn effective_alpha(&self) -> f64 {
        if self.critic_source == CriticSource::None {
            0.0
        } else {
            self.alpha
        }
    }

    pub fn rollout_options(&self) -> RolloutOptions {
        RolloutOptions {
            t_max: self.t_max,
            k_docs: self.k_docs,
            max_turn_tokens: self.max_turn_tokens,
            greedy: false,
        }
    }

    /// Every field as `key=value` lines, in declaration order.
    pub fn manifest(&self) -> String {
        format!(
            "g={}\nalpha={}\nlambda_f={}\nbeta={}\neta={}\nepsilon_clip={}\nepsilon_turn={}\n\
             std_floor={}\nlearning_rate={}\nwarmup_fraction={}\nm={}\nt_max={}\nk_docs={}\n\
             max_turn_tokens={}\nbatch_questions={}\ntotal_steps={}\nseed={}\ncritic_source={}\n\
             prime_scale={}\nmc_rollouts={}\nmc_threshold={}\ncritic_base_url={}\n\
             critic_model={}\nparallel_rollouts={}\ncheckpoint_interval={}\ncollapse_window={}\n\
             kl_limit={}\ngrad_spike_factor={}\n",
            self.g,
            self.alpha,
            self.lambda_f,
            self.beta,
            self.eta,
            self.epsilon_clip,
            self.epsilon_turn,
            self.std_floor,
            self.learning_rate,
            self.warmup_fraction,
            self.m,
            self.t_max,
            self.k_docs,
            self.max_turn_tokens,
            self.batch_questions,
            self.total_steps,
            self.seed,
            self.critic_source.as_str(),
            self.prime_scale,
            self.mc_rollouts,
            self.mc_threshold,
            self.critic_base_url,
            self.critic_model,
            self.parallel_rollouts,
            self.checkpoint_interval,
            self.collapse_window,
            self.kl_limit,
            self.grad_spike_factor,
        )
    }

    /// Parse `key=value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "config line {}: expected key=value, got {line:?}",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::Config(format!(
                    "config line {}: bad {what} value {value:?}",
                    lineno + 1
                ))
            };
            match key {
                "g" => cfg.g = value.parse().map_err(|_| bad("g"))?,
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad("alpha"))?,
                "lambda_f" => cfg.lambda_f = value.parse().map_err(|_| bad("lambda_f"))?,
                "beta" => cfg.beta = value.parse().map_err(|_| bad("beta"))?,
                "eta" => cfg.eta = value.parse().map_err(|_| bad("eta"))?,
                "epsilon_clip" => {
                    cfg.epsilon_clip = value.parse().map_err(|_| bad("epsilon_clip"))?
                }
                "epsilon_turn" => {
                    cfg.epsilon_turn = value.parse().map_err(|_| bad("epsilon_turn"))?
                }
                "std_floor" => cfg.std_floor = value.parse().map_err(|_| bad("std_floor"))?,
                "learning_rate" => {
                    cfg.learning_rate = value.parse().map_err(|_| bad("learning_rate"))?
                }
                "warmup_fraction" => {
                    cfg.warmup_fraction = value.parse().map_err(|_| bad("warmup_fraction"))?
                }
                "m" => cfg.m = value.parse().map_err(|_| bad("m"))?,
                "t_max" => cfg.t_max = value.parse().map_err(|_| bad("t_max"))?,
                "k_docs" => cfg.k_docs = value.parse().map_err(|_| bad("k_docs"))?,
                "max_turn_tokens" => {
                    cfg.max_turn_tokens = value.parse().map_err(|_| bad("max_turn_tokens"))?
                }
                "batch_questions" => {
                    cfg.batch_questions = value.parse().map_err(|_| bad("batch_questions"))?
                }
                "total_steps" => cfg.total_steps = value.parse().map_err(|_| bad("total_steps"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "critic_source" => cfg.critic_source = CriticSource::parse(value)?,
                "prime_scale" => cfg.prime_scale = value.parse().map_err(|_| bad("prime_scale"))?,
                "mc_rollouts" => cfg.mc_rollouts = value.parse().map_err(|_| bad("mc_rollouts"))?,
                "mc_threshold" => {
                    cfg.mc_threshold = value.parse().map_err(|_| bad("mc_threshold"))?
                }
                "critic_base_url" => cfg.critic_base_url = value.to_string(),
                "critic_model" => cfg.critic_model = value.to_string(),
                "parallel_rollouts" => {
                    cfg.parallel_rollouts = value.parse().map_err(|_| bad("parallel_rollouts"))?
                }
                "checkpoint_interval" => {
                    cfg.checkpoint_interval =
                        value.parse().map_err(|_| bad("checkpoint_interval"))?
                }
                "collapse_window" => {
                    cfg.collapse_window = value.parse().map_err(|_| bad("collapse_window"))?
                }
                "kl_limit" => cfg.kl_limit = value.parse().map_err(|_| bad("kl_limit"))?,
                "grad_spike_factor" => {
                    cfg.grad_spike_factor = value.parse().map_err(|_| bad("grad_spike_factor"))?
                }
                other => {
                    return Err(Error::Config(format!(
                        "config line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_outcome_reward: f64,
    pub valid_action_ratio: f64,
    pub grad_norm: f64,
    pub kl_value: f64,
    pub entropy: f64,
    pub em: f64,
    pub f1: f64,
}

/// Header of the metrics CSV.
pub const METRICS_HEADER: &str =
    "step,mean_outcome_reward,valid_action_ratio,grad_norm,kl_value,entropy,em,f1";

impl StepMetrics {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.mean_outcome_reward,
            self.valid_action_ratio,
            self.grad_norm,
            self.kl_value,
            self.entropy,
            self.em,
            self.f1
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Config(format!(
                "metrics row has {} fields, expected 8: {line:?}",
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::Config(format!("bad metrics value {:?}", fields[i])))
        };
        Ok(StepMetrics {
            step: fields[0]
                .parse()
                .map_err(|_| Error::Config(format!("bad step value {:?}", fields[0])))?,
            mean_outcome_reward: num(1)?,
            valid_action_ratio: num(2)?,
            grad_norm: num(3)?,
            kl_value: num(4)?,
            entropy: num(5)?,
            em: num(6)?,
            f1: num(7)?,
        })
    }
}

/// Read a metrics CSV written by the training loop.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::file_format(
                path,
                format!("bad metrics header {other:?}"),
            ))
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| StepMetrics::from_csv_row(l).map_err(|e| Error::file_format(path, e.to_string())))
        .collect()
}

// ---------------------------------------------------------------------------
// Rollout groups
// ---------------------------------------------------------------------------

/// A group of trajectories for one question with their credit fully
/// assigned.
#[derive(Debug, Clone)]
pub struct GroupRollout {
    pub question: Question,
    pub question_id: String,
    pub trajectories: Vec<Trajectory>,
    pub breakdowns: Vec<RewardBreakdown>,
}

fn critic_labels(
    config: &TrainConfig,
    params: &PolicyParams,
    question: &Question,
    kb: &KnowledgeBase,
    trajectories: &[Trajectory],
    seed: u64,
) -> Result<Vec<Vec<Label>>> {
    match config.critic_source {
        CriticSource::Oracle => Ok(trajectories
            .iter()
            .map(|t| oracle_judge(t, question, kb).labels)
            .collect()),
        CriticSource::MonteCarlo => {
            let judge_one = |(g, t): (usize, &Trajectory)| -> Result<Vec<Label>> {
                let (verdict, _) = mc_judge(
                    t,
                    params,
                    question,
                    kb,
                    &config.rollout_options(),
                    config.mc_rollouts,
                    config.mc_threshold,
                    mix_seed(&[seed, g as u64, 1]),
                )?;
                Ok(verdict.labels)
            };
            if config.parallel_rollouts {
                trajectories.par_iter().enumerate().map(judge_one).collect()
            } else {
                trajectories.iter().enumerate().map(judge_one).collect()
            }
        }
        CriticSource::Remote => {
            let endpoint = CriticEndpointConfig::new(
                config.critic_base_url.clone(),
                config.critic_model.clone(),
            );
            let vocab = kb.vocab();
            let gold = question.gold_answer_text();
            let requests: Vec<(String, usize)> = trajectories
                .iter()
                .map(|t| {
                    let prompt = build_critique_prompt(
                        &question.render(),
                        &serialize_trajectory(t, &vocab)?,
                        &gold,
                        t.extracted_answer.as_deref().unwrap_or(""),
                        true,
                    );
                    Ok((prompt, t.num_search_turns()))
                })
                .collect::<Result<_>>()?;
            let verdicts = remote_judge_batch(&endpoint, &requests)?;
            Ok(verdicts
                .into_iter()
                .zip(trajectories)
                .map(|(v, t)| {
                    if v.parse_ok {
                        v.labels
                    } else {
                        // Unparseable critique: fall back to all-Good, which
                        // spreads the dense term uniformly instead of
                        // inventing penalties.
                        vec![Label::Good; t.num_search_turns()]
                    }
                })
                .collect())
        }
        // Placeholder labels; effective_alpha() = 0 keeps them inert.
        CriticSource::None => Ok(trajectories
            .iter()
            .map(|t| vec![Label::Bad; t.num_search_turns()])
            .collect()),
    }
}

/// Sample `G` episodes for one question from a frozen snapshot and assign
/// their credit: outcome rewards, group-normalized advantages, critic turn
/// labels, and blended per-token advantages. Trajectory seeds derive from
/// `(seed, group index)`; with the oracle or Monte-Carlo critic the result
/// is fully deterministic.
pub fn rollout_group(
    params: &PolicyParams,
    question: &Question,
    question_id: &str,
    kb: &KnowledgeBase,
    config: &TrainConfig,
    seed: u64,
) -> Result<GroupRollout> {
    config.validate()?;
    let opts = config.rollout_options();
    let sample_one = |g: usize| -> Result<Trajectory> {
        crate::policy::sample_trajectory(
            params,
            question,
            kb,
            &opts,
            mix_seed(&[seed, g as u64]),
            question_id,
        )
    };
    let trajectories: Vec<Trajectory> = if config.parallel_rollouts {
        (0..config.g)
            .into_par_iter()
            .map(sample_one)
            .collect::<Result<_>>()?
    } else {
        (0..config.g).map(sample_one).collect::<Result<_>>()?
    };

    let labels = critic_labels(config, params, question, kb, &trajectories, seed)?;

    let gold = question.gold_answer_text();
    let rewards: Vec<f64> = trajectories
        .iter()
        .map(|t| {
            global_reward(
                t.extracted_answer.as_deref(),
                &gold,
                check_format(t),
                config.lambda_f,
            )
        })
        .collect::<Result<_>>()?;
    let advantages = global_advantages(&rewards, config.std_floor)?;

    let mut breakdowns = Vec::with_capacity(config.g);
    for ((traj, labels), (reward, advantage)) in trajectories
        .iter()
        .zip(labels)
        .zip(rewards.iter().zip(&advantages))
    {
        let t_rewards = turn_rewards(&labels);
        let t_advantages = turn_advantages(&t_rewards, config.epsilon_turn)?;
        let token_advantages =
            hybrid_token_advantages(traj, *advantage, &t_advantages, config.effective_alpha())?;
        breakdowns.push(RewardBreakdown {
            outcome_correct: traj
                .extracted_answer
                .as_deref()
                .map(|a| exact_match(a, &gold))
                .unwrap_or(false),
            format_ok: check_format(traj),
            global_reward: *reward,
            global_advantage: *advantage,
            turn_labels: labels,
            turn_rewards: t_rewards,
            turn_advantages: t_advantages,
            token_advantages,
        });
    }
    Ok(GroupRollout {
        question: question.clone(),
        question_id: question_id.to_string(),
        trajectories,
        breakdowns,
    })
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// One token's clipped surrogate contribution:
/// `min(w * adv, clip(w, 1 - eps, 1 + eps) * adv)`.
pub fn clipped_term(w: f64, advantage: f64, epsilon_clip: f64) -> f64 {
    let clipped = w.clamp(1.0 - epsilon_clip, 1.0 + epsilon_clip) * advantage;
    (w * advantage).min(clipped)
}

/// Value, gradient, and diagnostics of the full objective on one batch.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    /// Objective value (maximized).
    pub value: f64,
    /// Gradient with respect to the policy weights.
    pub gradient: Array2<f64>,
    /// Mean exact KL(params || ref_params) over visited states.
    pub kl_value: f64,
    /// Mean policy entropy over visited states.
    pub entropy: f64,
    /// L2 norm of the gradient.
    pub grad_norm: f64,
}

/// Evaluate the clipped hybrid-advantage objective
///
/// `mean_groups[(1/G) sum_i sum_t min(w Ã, clip(w) Ã)] - beta * KL + eta * H`
///
/// together with its exact gradient. `w` compares `params` against the
/// frozen `old_params` snapshot that sampled the batch; KL and entropy are
/// means over every visited action-token state, with KL taken against
/// `ref_params`.
pub fn grpo_objective(
    groups: &[GroupRollout],
    params: &PolicyParams,
    old_params: &PolicyParams,
    ref_params: &PolicyParams,
    config: &TrainConfig,
) -> Result<ObjectiveEval> {
    if groups.is_empty() {
        return Err(Error::Config("objective needs at least one group".into()));
    }
    if params.spec != old_params.spec || params.spec != ref_params.spec {
        return Err(Error::Shape("parameter feature specs do not match".into()));
    }
    let total_states: usize = groups
        .iter()
        .map(|g| {
            g.trajectories
                .iter()
                .map(|t| t.num_action_tokens())
                .sum::<usize>()
        })
        .sum();
    if total_states == 0 {
        return Err(Error::Numerical("batch contains no action tokens".into()));
    }

    let num_groups = groups.len() as f64;
    let mut gradient: Array2<f64> = Array2::zeros(params.weights.dim());
    let mut clip_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut entropy_sum = 0.0;

    for group in groups {
        let group_coeff = 1.0 / (config.g as f64 * num_groups);
        for (traj, breakdown) in group.trajectories.iter().zip(&group.breakdowns) {
            let steps = trajectory_steps(&params.spec, &group.question, traj)?;
            if steps.len() != breakdown.token_advantages.len() {
                return Err(Error::Shape(format!(
                    "group {}: {} decision states but {} token advantages",
                    group.question_id,
                    steps.len(),
                    breakdown.token_advantages.len()
                )));
            }
            for ((features, token_index), advantage) in
                steps.iter().zip(&breakdown.token_advantages)
            {
                let current = logprob_and_grad(params, features, *token_index)?;
                let lp_new = current.logprob();
                let lp_old = action_distribution(old_params, features, TRAIN_TEMPERATURE)?
                    [*token_index]
                    .ln();
                let w = (lp_new - lp_old).exp();
                if !w.is_finite() || !advantage.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite ratio or advantage in group {}",
                        group.question_id
                    )));
                }
                clip_sum += group_coeff * clipped_term(w, *advantage, config.epsilon_clip);
                // The min picks the unclipped branch when it is lower (or
                // equal, where the branches coincide inside the clip band);
                // only that branch carries a gradient.
                let unclipped = w * advantage;
                let clipped =
                    w.clamp(1.0 - config.epsilon_clip, 1.0 + config.epsilon_clip) * advantage;
                if unclipped <= clipped {
                    current.add_scaled_to(group_coeff * advantage * w, &mut gradient);
                }

                // Exact KL(pi_theta || pi_ref) and entropy at this state.
                let pi = &current.probs;
                if config.beta != 0.0 {
                    let q = action_distribution(ref_params, features, TRAIN_TEMPERATURE)?;
                    let kl_s = kl_divergence(pi, &q);
                    kl_sum += kl_s;
                    let dz: Vec<f64> = pi
                        .iter()
                        .zip(&q)
                        .map(|(&p, &qq)| p * (p.ln() - qq.ln() - kl_s))
                        .collect();
                    add_logit_grad(
                        &dz,
                        features,
                        -config.beta / total_states as f64,
                        &mut gradient,
                    );
                } else {
                    let q = action_distribution(ref_params, features, TRAIN_TEMPERATURE)?;
                    kl_sum += kl_divergence(pi, &q);
                }
                let h_s = entropy(pi);
                entropy_sum += h_s;
                if config.eta != 0.0 {
                    let dz: Vec<f64> = pi.iter().map(|&p| -p * (p.ln() + h_s)).collect();
                    add_logit_grad(
                        &dz,
                        features,
                        config.eta / total_states as f64,
                        &mut gradient,
                    );
                }
            }
        }
    }

    let kl_value = kl_sum / total_states as f64;
    let mean_entropy = entropy_sum / total_states as f64;
    let value = clip_sum - config.beta * kl_value + config.eta * mean_entropy;
    if !value.is_finite() {
        return Err(Error::Numerical("objective value is not finite".into()));
    }
    let grad_norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok(ObjectiveEval {
        value,
        gradient,
        kl_value,
        entropy: mean_entropy,
        grad_norm,
    })
}

// ---------------------------------------------------------------------------
// Collapse detection
// ---------------------------------------------------------------------------

/// Why the collapse detector fired, if it did.
pub fn collapse_reason(
    history: &[StepMetrics],
    window: usize,
    kl_limit: f64,
    grad_spike_factor: f64,
) -> Option<String> {
    if window < 2 || history.len() < window {
        return None;
    }
    let trailing = &history[history.len() - window..];
    if trailing.iter().all(|m| m.kl_value > kl_limit) {
        return Some(format!(
            "kl_value above {kl_limit} for {window} consecutive steps"
        ));
    }
    let mut grads: Vec<f64> = trailing.iter().map(|m| m.grad_norm).collect();
    grads.sort_by(|a, b| a.total_cmp(b));
    let median = if window % 2 == 1 {
        grads[window / 2]
    } else {
        0.5 * (grads[window / 2 - 1] + grads[window / 2])
    };
    let floor = median.max(1e-9);
    let last = trailing.last().expect("window >= 2").grad_norm;
    if last > grad_spike_factor * floor {
        return Some(format!(
            "grad_norm {last} spiked above {grad_spike_factor} x window median {median}"
        ));
    }
    None
}

/// True iff the trailing `window` of steps shows sustained KL above
/// `kl_limit`, or the latest gradient norm spikes past `grad_spike_factor`
/// times the window median. Histories shorter than the window never
/// collapse.
pub fn detect_collapse(
    history: &[StepMetrics],
    window: usize,
    kl_limit: f64,
    grad_spike_factor: f64,
) -> bool {
    collapse_reason(history, window, kl_limit, grad_spike_factor).is_some()
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Incremental trainer: owns the policy, its frozen reference, and the
/// metric history, and advances one optimizer step at a time.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    kb: &'a KnowledgeBase,
    questions: &'a [Question],
    pub params: PolicyParams,
    pub ref_params: PolicyParams,
    pub history: Vec<StepMetrics>,
    step: usize,
}

/// Seed-stream tag separating greedy-evaluation seeds from rollout seeds.
const EVAL_STREAM: u64 = 0xE7A1;

impl<'a> Trainer<'a> {
    /// Fresh trainer with the format-primed (or uniform, at prime_scale 0)
    /// initialization, which also becomes the KL reference.
    pub fn new(
        config: TrainConfig,
        kb: &'a KnowledgeBase,
        questions: &'a [Question],
    ) -> Result<Self> {
        let spec = FeatureSpec::new(kb.vocab(), config.t_max)?;
        let params = PolicyParams::format_primed(spec, config.prime_scale)?;
        Self::with_params(config, kb, questions, params)
    }

    /// Trainer starting from explicit parameters (also used as the KL
    /// reference). Lets tests inject a scripted agent.
    pub fn with_params(
        config: TrainConfig,
        kb: &'a KnowledgeBase,
        questions: &'a [Question],
        params: PolicyParams,
    ) -> Result<Self> {
        config.validate()?;
        if questions.is_empty() {
            return Err(Error::Config("trainer needs at least one question".into()));
        }
        let ref_params = params.clone();
        Ok(Trainer {
            config,
            kb,
            questions,
            params,
            ref_params,
            history: Vec::new(),
            step: 0,
        })
    }

    /// Trainer resuming mid-run from loaded state.
    pub fn resume(
        config: TrainConfig,
        kb: &'a KnowledgeBase,
        questions: &'a [Question],
        params: PolicyParams,
        ref_params: PolicyParams,
        history: Vec<StepMetrics>,
        step: usize,
    ) -> Result<Self> {
        config.validate()?;
        if questions.is_empty() {
            return Err(Error::Config("trainer needs at least one question".into()));
        }
        Ok(Trainer {
            config,
            kb,
            questions,
            params,
            ref_params,
            history,
            step,
        })
    }

    pub fn steps_completed(&self) -> usize {
        self.step
    }

    fn effective_learning_rate(&self) -> f64 {
        let warmup_steps =
            (self.config.warmup_fraction * self.config.total_steps as f64).ceil() as usize;
        if warmup_steps == 0 || self.step >= warmup_steps {
            self.config.learning_rate
        } else {
            self.config.learning_rate * (self.step + 1) as f64 / warmup_steps as f64
        }
    }

    /// The question indices visited at a given step (round-robin batches).
    fn batch_indices(&self, step: usize) -> Vec<usize> {
        (0..self.config.batch_questions)
            .map(|b| (step * self.config.batch_questions + b) % self.questions.len())
            .collect()
    }

    /// One optimizer step: sample groups from a frozen snapshot, take `m`
    /// ascent steps on the clipped objective, then greedy-evaluate the
    /// batch questions. Returns the step's metrics (also appended to
    /// `history`).
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let old = self.params.clone();
        let indices = self.batch_indices(step);
        let cfg = &self.config;
        let groups: Vec<GroupRollout> = {
            let roll_one = |q_idx: &usize| -> Result<GroupRollout> {
                rollout_group(
                    &old,
                    &self.questions[*q_idx],
                    &format!("q{q_idx}"),
                    self.kb,
                    cfg,
                    mix_seed(&[cfg.seed, step as u64, *q_idx as u64]),
                )
            };
            if cfg.parallel_rollouts {
                indices.par_iter().map(roll_one).collect::<Result<_>>()?
            } else {
                indices.iter().map(roll_one).collect::<Result<_>>()?
            }
        };

        let mut first_eval: Option<(f64, f64, f64)> = None;
        let lr = self.effective_learning_rate();
        for inner in 0..self.config.m {
            let eval = grpo_objective(&groups, &self.params, &old, &self.ref_params, &self.config)?;
            if inner == 0 {
                first_eval = Some((eval.grad_norm, eval.kl_value, eval.entropy));
            }
            self.params.weights.scaled_add(lr, &eval.gradient);
        }
        let (grad_norm, kl_value, entropy) = first_eval.expect("m >= 1");

        let mut reward_sum = 0.0;
        let mut turns = 0usize;
        let mut valid = 0usize;
        let mut n_traj = 0usize;
        for group in &groups {
            for (traj, breakdown) in group.trajectories.iter().zip(&group.breakdowns) {
                reward_sum += breakdown.global_reward;
                n_traj += 1;
                for turn in &traj.turns {
                    turns += 1;
                    let ok = match turn.kind {
                        TurnKind::Answer => true,
                        TurnKind::Search => turn
                            .feedback
                            .as_ref()
                            .map(|d| !d.is_empty())
                            .unwrap_or(false),
                        TurnKind::Malformed => false,
                    };
                    if ok {
                        valid += 1;
                    }
                }
            }
        }

        // Post-update greedy evaluation on this step's questions.
        let batch_questions: Vec<Question> =
            indices.iter().map(|i| self.questions[*i].clone()).collect();
        let report = evaluate(
            &self.params,
            self.kb,
            &batch_questions,
            &self.config.rollout_options(),
            mix_seed(&[self.config.seed, step as u64, EVAL_STREAM]),
        )?;

        let metrics = StepMetrics {
            step,
            mean_outcome_reward: reward_sum / n_traj as f64,
            valid_action_ratio: valid as f64 / turns as f64,
            grad_norm,
            kl_value,
            entropy,
            em: report.em,
            f1: report.f1,
        };
        self.history.push(metrics.clone());
        self.step += 1;
        Ok(metrics)
    }
}

// ---------------------------------------------------------------------------
// Run directory loop
// ---------------------------------------------------------------------------

/// How a training run ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StopReason {
    /// Reached total_steps.
    Completed,
    /// Collapse detector fired; the reason is recorded.
    Collapsed(String),
    /// Session step cap reached before total_steps (run can be resumed).
    SessionCap,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StopReason::Completed => write!(f, "completed"),
            StopReason::Collapsed(reason) => write!(f, "collapsed: {reason}"),
            StopReason::SessionCap => write!(f, "session_cap"),
        }
    }
}

/// Result of [`train_loop`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub params: PolicyParams,
    pub history: Vec<StepMetrics>,
    pub stop_reason: StopReason,
}

fn checkpoint_path(run_dir: &Path, steps_done: usize) -> std::path::PathBuf {
    run_dir.join(format!("ckpt_{steps_done}.policy"))
}

/// Highest `ckpt_<n>.policy` present in a run directory.
fn latest_checkpoint(run_dir: &Path) -> Result<Option<usize>> {
    let mut best: Option<usize> = None;
    for entry in std::fs::read_dir(run_dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(rest) = name
            .strip_prefix("ckpt_")
            .and_then(|r| r.strip_suffix(".policy"))
        {
            if let Ok(n) = rest.parse::<usize>() {
                best = Some(best.map_or(n, |b: usize| b.max(n)));
            }
        }
    }
    Ok(best)
}

/// Run (or resume) training in `run_dir`, which accumulates a config
/// manifest, `metrics.csv`, `ref.policy`, periodic `ckpt_<step>.policy`
/// files, and a `stop` file recording why the run ended. Resuming replays
/// from the latest checkpoint and reproduces an uninterrupted run's
/// metrics exactly; `max_steps_this_session` optionally caps how many
/// steps this call performs.
pub fn train_loop(
    config: &TrainConfig,
    kb: &KnowledgeBase,
    questions: &[Question],
    run_dir: &Path,
    max_steps_this_session: Option<usize>,
) -> Result<RunOutcome> {
    config.validate()?;
    std::fs::create_dir_all(run_dir)?;
    let config_path = run_dir.join("config");
    let manifest = config.manifest();
    if config_path.exists() {
        let existing = std::fs::read_to_string(&config_path)?;
        if existing != manifest {
            return Err(Error::Config(format!(
                "run directory {} was created with a different config",
                run_dir.display()
            )));
        }
    } else {
        std::fs::write(&config_path, &manifest)?;
    }

    let spec = FeatureSpec::new(kb.vocab(), config.t_max)?;
    let metrics_path = run_dir.join("metrics.csv");
    let ref_path = run_dir.join("ref.policy");

    let mut trainer = match latest_checkpoint(run_dir)? {
        Some(steps_done) => {
            let params = PolicyParams::load(&checkpoint_path(run_dir, steps_done), spec)?;
            let ref_params = PolicyParams::load(&ref_path, spec)?;
            let mut history = read_metrics_csv(&metrics_path)?;
            history.retain(|m| m.step < steps_done);
            Trainer::resume(
                config.clone(),
                kb,
                questions,
                params,
                ref_params,
                history,
                steps_done,
            )?
        }
        None => {
            let trainer = Trainer::new(config.clone(), kb, questions)?;
            trainer.ref_params.save(&ref_path)?;
            trainer
        }
    };

    // Rewrite the metrics file to match the trainer's (possibly truncated)
    // history, then append from there.
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(metrics_file, "{METRICS_HEADER}")?;
    for m in &trainer.history {
        writeln!(metrics_file, "{}", m.to_csv_row())?;
    }
    metrics_file.flush()?;

    let mut session_steps = 0usize;
    let stop_reason = loop {
        if trainer.steps_completed() >= config.total_steps {
            break StopReason::Completed;
        }
        if let Some(cap) = max_steps_this_session {
            if session_steps >= cap {
                break StopReason::SessionCap;
            }
        }
        let metrics = trainer.step()?;
        session_steps += 1;
        writeln!(metrics_file, "{}", metrics.to_csv_row())?;
        metrics_file.flush()?;
        let done = trainer.steps_completed();
        if done % config.checkpoint_interval == 0 {
            trainer.params.save(&checkpoint_path(run_dir, done))?;
        }
        if let Some(reason) = collapse_reason(
            &trainer.history,
            config.collapse_window,
            config.kl_limit,
            config.grad_spike_factor,
        ) {
            break StopReason::Collapsed(reason);
        }
    };
    drop(metrics_file);

    trainer
        .params
        .save(&checkpoint_path(run_dir, trainer.steps_completed()))?;
    std::fs::write(run_dir.join("stop"), format!("{stop_reason}\n"))?;
    Ok(RunOutcome {
        params: trainer.params.clone(),
        history: trainer.history.clone(),
        stop_reason,
    })
}
