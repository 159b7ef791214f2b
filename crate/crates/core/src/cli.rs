//! Command-line harness.
//!
//! Subcommands: `gen-env` (emit a knowledge base and question set),
//! `train` (run the training loop from a config file), `eval` (greedy
//! evaluation report), `score` (run a critic over a trajectory log),
//! `agree` (pooled agreement between two verdict files), and `compare`
//! (paired-seed convergence comparison). Every subcommand is
//! deterministic: the same inputs and seeds produce byte-identical output
//! files. Success exits 0; failures print a diagnostic line and exit
//! nonzero.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use crate::compare::compare_convergence;
use crate::critic::{
    build_critique_prompt, mc_judge, oracle_judge, outcome_verdict, pooled_agreement,
    read_verdicts_jsonl, remote_judge_batch, write_verdicts_jsonl, CriticEndpointConfig,
    VerdictRecord,
};
use crate::env::{
    generate_kb, generate_question, load_questions, save_questions, KnowledgeBase, Question,
};
use crate::episode::{
    read_trajectory_jsonl, serialize_trajectory, write_trajectory_jsonl, Trajectory,
    TrajectoryRecord,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_with_trajectories, exact_match};
use crate::policy::{FeatureSpec, PolicyParams, RolloutOptions};
use crate::seeding::mix_seed;
use crate::trainer::{train_loop, TrainConfig};

/// Seed stream separating question generation from other consumers.
const QUESTION_STREAM: u64 = 0x51;

#[derive(Parser)]
#[command(
    name = "turncredit",
    about = "Multi-turn search episodes with turn-level credit assignment",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScoreCritic {
    Oracle,
    MonteCarlo,
    Remote,
    Outcome,
}

fn parse_score_critic(s: &str) -> std::result::Result<ScoreCritic, String> {
    match s {
        "oracle" => Ok(ScoreCritic::Oracle),
        "monte_carlo" => Ok(ScoreCritic::MonteCarlo),
        "remote" => Ok(ScoreCritic::Remote),
        "outcome" => Ok(ScoreCritic::Outcome),
        other => Err(format!(
            "unknown critic {other:?} (expected oracle, monte_carlo, remote, or outcome)"
        )),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic knowledge base and question set.
    GenEnv {
        #[arg(long, default_value_t = 50)]
        entities: usize,
        #[arg(long, default_value_t = 8)]
        relations: usize,
        /// Probability that each (entity, relation) pair has a triple.
        #[arg(long, default_value_t = 0.4)]
        density: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gold-path length of the generated questions.
        #[arg(long, default_value_t = 3)]
        hops: usize,
        /// How many questions to generate.
        #[arg(long, default_value_t = 10)]
        questions: usize,
        /// Directory receiving kb.txt and questions.jsonl.
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Train a policy according to a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        /// Run directory (checkpoints, metrics.csv, config manifest).
        #[arg(long, value_name = "DIR")]
        run_dir: PathBuf,
        /// Optional cap on steps performed by this invocation (the run can
        /// be resumed later).
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Greedy-decode a question set and report EM/F1.
    Eval {
        /// Policy checkpoint file.
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long, default_value_t = 4)]
        t_max: usize,
        #[arg(long, default_value_t = 3)]
        k_docs: usize,
        #[arg(long, default_value_t = 8)]
        max_turn_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the greedy trajectories as JSONL (input for `score`).
        #[arg(long, value_name = "FILE")]
        rollouts: Option<PathBuf>,
    },
    /// Run a critic over a trajectory JSONL and emit a verdict JSONL.
    Score {
        /// oracle, monte_carlo, remote, or outcome.
        #[arg(long, value_parser = parse_score_critic)]
        critic: ScoreCritic,
        /// Trajectory JSONL, e.g. from `eval --rollouts`.
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        /// Question file; trajectory question ids (q<index>) index into it.
        #[arg(long)]
        questions: PathBuf,
        /// Output verdict JSONL path.
        #[arg(long)]
        out: PathBuf,
        /// Policy checkpoint (required for the monte_carlo critic).
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        mc_rollouts: usize,
        #[arg(long, default_value_t = 0.5)]
        mc_threshold: f64,
        #[arg(long, default_value_t = 4)]
        t_max: usize,
        #[arg(long, default_value_t = 3)]
        k_docs: usize,
        #[arg(long, default_value_t = 8)]
        max_turn_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Remote critic endpoint root URL (required for remote).
        #[arg(long)]
        base_url: Option<String>,
        /// Remote critic model name.
        #[arg(long, default_value = "critic")]
        model: String,
    },
    /// Pooled agreement between two verdict JSONL files.
    Agree {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Paired-seed convergence comparison between two configs.
    Compare {
        #[arg(long)]
        config_a: PathBuf,
        #[arg(long)]
        config_b: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long, default_value_t = 5)]
        n_seeds: usize,
        /// Mean outcome reward defining convergence.
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
}

/// Parse and run one invocation. `args` excludes the program name.
pub fn run(args: Vec<String>) -> ExitCode {
    let mut argv = vec!["turncredit".to_string()];
    argv.extend(args);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_env(kb_path: &Path, questions_path: &Path) -> Result<(KnowledgeBase, Vec<Question>)> {
    let kb = KnowledgeBase::load(kb_path)?;
    let questions = load_questions(questions_path, &kb)?;
    Ok((kb, questions))
}

/// Trajectory question ids follow the `q<index>` convention; resolve one
/// against a question list.
fn resolve_question<'q>(id: &str, questions: &'q [Question]) -> Result<&'q Question> {
    let index: usize = id
        .strip_prefix('q')
        .and_then(|rest| rest.parse().ok())
        .ok_or_else(|| Error::Config(format!("question id {id:?} is not of the form q<index>")))?;
    questions.get(index).ok_or_else(|| {
        Error::Config(format!(
            "question id {id:?} exceeds the question file ({} questions)",
            questions.len()
        ))
    })
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenEnv {
            entities,
            relations,
            density,
            seed,
            hops,
            questions,
            out_dir,
        } => {
            let kb = generate_kb(entities, relations, density, seed)?;
            let mut qs = Vec::with_capacity(questions);
            for i in 0..questions {
                qs.push(generate_question(
                    &kb,
                    hops,
                    mix_seed(&[seed, QUESTION_STREAM, i as u64]),
                )?);
            }
            std::fs::create_dir_all(&out_dir)?;
            let kb_path = out_dir.join("kb.txt");
            let questions_path = out_dir.join("questions.jsonl");
            kb.save(&kb_path)?;
            save_questions(&questions_path, &qs)?;
            println!(
                "wrote {} ({} entities, {} relations, {} triples)",
                kb_path.display(),
                kb.num_entities(),
                kb.num_relations(),
                kb.triples().len()
            );
            println!(
                "wrote {} ({} questions, {hops} hops)",
                questions_path.display(),
                qs.len()
            );
            Ok(())
        }
        Command::Train {
            config,
            kb,
            questions,
            run_dir,
            max_steps,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let (kb, qs) = load_env(&kb, &questions)?;
            let outcome = train_loop(&cfg, &kb, &qs, &run_dir, max_steps)?;
            println!("stop: {}", outcome.stop_reason);
            println!("steps: {}", outcome.history.len());
            if let Some(last) = outcome.history.last() {
                println!(
                    "final: mean_outcome_reward={} em={} f1={} kl_value={}",
                    last.mean_outcome_reward, last.em, last.f1, last.kl_value
                );
            }
            Ok(())
        }
        Command::Eval {
            policy,
            kb,
            questions,
            t_max,
            k_docs,
            max_turn_tokens,
            seed,
            out,
            rollouts,
        } => {
            let (kb, qs) = load_env(&kb, &questions)?;
            let spec = FeatureSpec::new(kb.vocab(), t_max)?;
            let params = PolicyParams::load(&policy, spec)?;
            let opts = RolloutOptions {
                t_max,
                k_docs,
                max_turn_tokens,
                greedy: true,
            };
            let (report, trajectories) =
                evaluate_with_trajectories(&params, &kb, &qs, &opts, seed)?;
            if let Some(path) = rollouts {
                let records = trajectories
                    .iter()
                    .map(|t| TrajectoryRecord::from_trajectory(t, &kb))
                    .collect::<Result<Vec<_>>>()?;
                write_trajectory_jsonl(&path, &records)?;
            }
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                std::fs::write(&path, format!("{json}\n"))?;
            }
            println!("{json}");
            Ok(())
        }
        Command::Score {
            critic,
            input,
            kb,
            questions,
            out,
            policy,
            mc_rollouts,
            mc_threshold,
            t_max,
            k_docs,
            max_turn_tokens,
            seed,
            base_url,
            model,
        } => {
            let (kb, qs) = load_env(&kb, &questions)?;
            let records = read_trajectory_jsonl(&input)?;
            let mut pairs: Vec<(Trajectory, &Question)> = Vec::with_capacity(records.len());
            for record in &records {
                let q = resolve_question(&record.question_id, &qs)?;
                pairs.push((record.to_trajectory(&kb)?, q));
            }
            let verdicts: Vec<VerdictRecord> = match critic {
                ScoreCritic::Oracle => pairs
                    .iter()
                    .map(|(t, q)| VerdictRecord::new(&t.question_id, &oracle_judge(t, q, &kb)))
                    .collect(),
                ScoreCritic::Outcome => pairs
                    .iter()
                    .map(|(t, q)| {
                        let correct = t
                            .extracted_answer
                            .as_deref()
                            .map(|a| exact_match(a, &q.gold_answer_text()))
                            .unwrap_or(false);
                        VerdictRecord::new(&t.question_id, &outcome_verdict(t, correct))
                    })
                    .collect(),
                ScoreCritic::MonteCarlo => {
                    let policy_path = policy.ok_or_else(|| {
                        Error::Config("--policy is required for the monte_carlo critic".into())
                    })?;
                    let spec = FeatureSpec::new(kb.vocab(), t_max)?;
                    let params = PolicyParams::load(&policy_path, spec)?;
                    let opts = RolloutOptions {
                        t_max,
                        k_docs,
                        max_turn_tokens,
                        greedy: false,
                    };
                    let mut out_records = Vec::with_capacity(pairs.len());
                    for (i, (t, q)) in pairs.iter().enumerate() {
                        let (verdict, _) = mc_judge(
                            t,
                            &params,
                            q,
                            &kb,
                            &opts,
                            mc_rollouts,
                            mc_threshold,
                            mix_seed(&[seed, i as u64]),
                        )?;
                        out_records.push(VerdictRecord::new(&t.question_id, &verdict));
                    }
                    out_records
                }
                ScoreCritic::Remote => {
                    let base_url = base_url.ok_or_else(|| {
                        Error::Config("--base-url is required for the remote critic".into())
                    })?;
                    let endpoint = CriticEndpointConfig::new(base_url, model);
                    let vocab = kb.vocab();
                    let requests: Vec<(String, usize)> = pairs
                        .iter()
                        .map(|(t, q)| {
                            let prompt = build_critique_prompt(
                                &q.render(),
                                &serialize_trajectory(t, &vocab)?,
                                &q.gold_answer_text(),
                                t.extracted_answer.as_deref().unwrap_or(""),
                                true,
                            );
                            Ok((prompt, t.num_search_turns()))
                        })
                        .collect::<Result<_>>()?;
                    let verdicts = remote_judge_batch(&endpoint, &requests)?;
                    verdicts
                        .iter()
                        .zip(&pairs)
                        .map(|(v, (t, _))| VerdictRecord::new(&t.question_id, v))
                        .collect()
                }
            };
            write_verdicts_jsonl(&out, &verdicts)?;
            println!("wrote {} ({} verdicts)", out.display(), verdicts.len());
            Ok(())
        }
        Command::Agree { a, b } => {
            let va = read_verdicts_jsonl(&a)?;
            let vb = read_verdicts_jsonl(&b)?;
            println!("{}", pooled_agreement(&va, &vb)?);
            Ok(())
        }
        Command::Compare {
            config_a,
            config_b,
            kb,
            questions,
            n_seeds,
            threshold,
            out_dir,
        } => {
            let cfg_a = TrainConfig::load(&config_a)?;
            let cfg_b = TrainConfig::load(&config_b)?;
            let (kb, qs) = load_env(&kb, &questions)?;
            let report =
                compare_convergence(&cfg_a, &cfg_b, &kb, &qs, n_seeds, threshold, &out_dir)?;
            print!("{}", report.summary());
            println!("wrote {}", out_dir.join("report.csv").display());
            println!("wrote {}", out_dir.join("curves.svg").display());
            Ok(())
        }
    }
}
