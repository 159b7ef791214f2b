//! Paired-seed convergence comparison between two training configs.
//!
//! Both configs run on the same environment with the same seed per pair;
//! the report records, per run, how many steps it took to reach a mean
//! outcome reward threshold (censored at total_steps when never reached),
//! the per-config medians, and the per-seed win/loss table. Runs are
//! isolated in their own subdirectories and may execute in parallel; the
//! aggregation is single-threaded and deterministic.

use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

use crate::env::{KnowledgeBase, Question};
use crate::error::{Error, Result};
use crate::plot::{write_line_plot, Series};
use crate::trainer::{train_loop, StepMetrics, TrainConfig};

/// One run's convergence outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRecord {
    /// Which arm the run belongs to ("config_a" or "config_b").
    pub config: String,
    pub seed: u64,
    /// Steps until mean outcome reward first reached the threshold
    /// (total_steps when censored).
    pub steps_to_threshold: usize,
    pub censored: bool,
}

/// Header of the comparison CSV.
pub const COMPARE_CSV_HEADER: &str = "config,seed,steps_to_threshold,censored";

/// First step count at which the history reaches the threshold, or
/// `(total_steps, censored = true)` when it never does.
pub fn steps_to_threshold(
    history: &[StepMetrics],
    threshold: f64,
    total_steps: usize,
) -> (usize, bool) {
    for m in history {
        if m.mean_outcome_reward >= threshold {
            return (m.step + 1, false);
        }
    }
    (total_steps, true)
}

fn median_of(mut xs: Vec<usize>) -> f64 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2] as f64
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) as f64 / 2.0
    }
}

/// Aggregated comparison between the two arms.
#[derive(Debug, Clone)]
pub struct CompareReport {
    /// All runs, config_a rows first, seeds ascending within each arm.
    pub records: Vec<ConvergenceRecord>,
    pub median_a: f64,
    pub median_b: f64,
    /// Seeds where config_a converged in strictly fewer steps.
    pub wins_a: usize,
    pub ties: usize,
    pub wins_b: usize,
    /// Full metric histories as (config label, seed, history).
    pub histories: Vec<(String, u64, Vec<StepMetrics>)>,
}

impl CompareReport {
    /// Human-readable multi-line summary.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "config_a: median steps_to_threshold {}\n",
            self.median_a
        ));
        out.push_str(&format!(
            "config_b: median steps_to_threshold {}\n",
            self.median_b
        ));
        out.push_str(&format!(
            "paired seeds: config_a wins {}, ties {}, config_b wins {}\n",
            self.wins_a, self.ties, self.wins_b
        ));
        for r in &self.records {
            out.push_str(&format!(
                "{},seed={}: {} steps{}\n",
                r.config,
                r.seed,
                r.steps_to_threshold,
                if r.censored { " (censored)" } else { "" }
            ));
        }
        out
    }
}

/// Write the comparison CSV (`config,seed,steps_to_threshold,censored`).
pub fn write_compare_csv(path: &Path, records: &[ConvergenceRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{COMPARE_CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{}",
            r.config, r.seed, r.steps_to_threshold, r.censored
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Read a comparison CSV written by [`write_compare_csv`].
pub fn read_compare_csv(path: &Path) -> Result<Vec<ConvergenceRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == COMPARE_CSV_HEADER => {}
        other => {
            return Err(Error::file_format(
                path,
                format!("bad comparison header {other:?}"),
            ))
        }
    }
    let mut records = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::file_format(
                path,
                format!("bad comparison row {line:?}"),
            ));
        }
        let bad = || Error::file_format(path, format!("bad comparison row {line:?}"));
        records.push(ConvergenceRecord {
            config: fields[0].to_string(),
            seed: fields[1].parse().map_err(|_| bad())?,
            steps_to_threshold: fields[2].parse().map_err(|_| bad())?,
            censored: fields[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(records)
}

/// Run both configs across `n_seeds` paired seeds (seed i of the pair is
/// `config_a.seed + i` for both arms) and aggregate convergence speed
/// toward `success_threshold` mean outcome reward. Emits `report.csv`,
/// `curves.svg`, and one run directory per run under `out_dir/runs/`.
pub fn compare_convergence(
    config_a: &TrainConfig,
    config_b: &TrainConfig,
    kb: &KnowledgeBase,
    questions: &[Question],
    n_seeds: usize,
    success_threshold: f64,
    out_dir: &Path,
) -> Result<CompareReport> {
    config_a.validate()?;
    config_b.validate()?;
    if n_seeds < 3 {
        return Err(Error::Config("comparison needs n_seeds >= 3".into()));
    }
    if !success_threshold.is_finite() || success_threshold <= 0.0 {
        return Err(Error::Config(
            "success_threshold must be positive and finite".into(),
        ));
    }
    std::fs::create_dir_all(out_dir.join("runs"))?;

    let arms: [(&str, &TrainConfig); 2] = [("config_a", config_a), ("config_b", config_b)];
    let mut jobs: Vec<(String, TrainConfig, u64)> = Vec::new();
    for (label, cfg) in arms {
        for i in 0..n_seeds {
            let seed = config_a.seed + i as u64;
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            jobs.push((label.to_string(), run_cfg, seed));
        }
    }

    // Each run is isolated in its own directory; runs may execute in
    // parallel, aggregation below is single-threaded.
    let outcomes: Vec<(String, u64, Vec<StepMetrics>, usize)> = jobs
        .par_iter()
        .map(|(label, cfg, seed)| {
            let run_dir = out_dir.join("runs").join(format!("{label}_seed{seed}"));
            let outcome = train_loop(cfg, kb, questions, &run_dir, None)?;
            Ok((label.clone(), *seed, outcome.history, cfg.total_steps))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(outcomes.len());
    let mut histories = Vec::with_capacity(outcomes.len());
    for (label, seed, history, total_steps) in outcomes {
        let (steps, censored) = steps_to_threshold(&history, success_threshold, total_steps);
        records.push(ConvergenceRecord {
            config: label.clone(),
            seed,
            steps_to_threshold: steps,
            censored,
        });
        histories.push((label, seed, history));
    }

    let steps_of = |label: &str| -> Vec<usize> {
        records
            .iter()
            .filter(|r| r.config == label)
            .map(|r| r.steps_to_threshold)
            .collect()
    };
    let a_steps = steps_of("config_a");
    let b_steps = steps_of("config_b");
    let (mut wins_a, mut ties, mut wins_b) = (0, 0, 0);
    for (a, b) in a_steps.iter().zip(&b_steps) {
        match a.cmp(b) {
            std::cmp::Ordering::Less => wins_a += 1,
            std::cmp::Ordering::Equal => ties += 1,
            std::cmp::Ordering::Greater => wins_b += 1,
        }
    }
    let report = CompareReport {
        records,
        median_a: median_of(a_steps),
        median_b: median_of(b_steps),
        wins_a,
        ties,
        wins_b,
        histories,
    };

    write_compare_csv(&out_dir.join("report.csv"), &report.records)?;
    let series: Vec<Series> = report
        .histories
        .iter()
        .map(|(label, seed, history)| Series {
            label: format!("{label} seed={seed}"),
            points: history
                .iter()
                .map(|m| (m.step as f64, m.mean_outcome_reward))
                .collect(),
        })
        .collect();
    write_line_plot(
        &out_dir.join("curves.svg"),
        "mean outcome reward by step",
        "step",
        "mean outcome reward",
        &series,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_kb, generate_question};
    use crate::trainer::CriticSource;

    fn metrics_row(step: usize, reward: f64) -> StepMetrics {
        StepMetrics {
            step,
            mean_outcome_reward: reward,
            valid_action_ratio: 1.0,
            grad_norm: 0.1,
            kl_value: 0.0,
            entropy: 1.0,
            em: 0.0,
            f1: 0.0,
        }
    }

    #[test]
    fn threshold_crossing_and_censoring() {
        let history: Vec<StepMetrics> = [0.1, 0.4, 0.92, 0.95]
            .iter()
            .enumerate()
            .map(|(i, r)| metrics_row(i, *r))
            .collect();
        assert_eq!(steps_to_threshold(&history, 0.9, 50), (3, false));
        assert_eq!(steps_to_threshold(&history, 0.99, 50), (50, true));
        assert_eq!(steps_to_threshold(&[], 0.5, 7), (7, true));
    }

    #[test]
    fn median_handles_even_and_odd_counts() {
        assert_eq!(median_of(vec![5, 1, 9]), 5.0);
        assert_eq!(median_of(vec![4, 2, 8, 6]), 5.0);
    }

    #[test]
    fn compare_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let records = vec![
            ConvergenceRecord {
                config: "config_a".into(),
                seed: 3,
                steps_to_threshold: 12,
                censored: false,
            },
            ConvergenceRecord {
                config: "config_b".into(),
                seed: 3,
                steps_to_threshold: 40,
                censored: true,
            },
        ];
        write_compare_csv(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(COMPARE_CSV_HEADER));
        assert_eq!(read_compare_csv(&path).unwrap(), records);
    }

    #[test]
    fn identical_configs_tie_on_every_seed() {
        let kb = generate_kb(10, 3, 0.5, 2).unwrap();
        let questions = vec![generate_question(&kb, 1, 4).unwrap()];
        let cfg = TrainConfig {
            g: 2,
            total_steps: 2,
            critic_source: CriticSource::Oracle,
            prime_scale: 2.0,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        // Unreachable threshold: every run censors at total_steps, and the
        // two identical arms tie on every paired seed.
        let report = compare_convergence(&cfg, &cfg, &kb, &questions, 3, 2.0, dir.path()).unwrap();
        assert_eq!(report.records.len(), 6);
        assert!(report.records.iter().all(|r| r.censored));
        assert!(report.records.iter().all(|r| r.steps_to_threshold == 2));
        assert_eq!((report.wins_a, report.ties, report.wins_b), (0, 3, 0));
        assert_eq!(report.median_a, report.median_b);
        assert!(dir.path().join("report.csv").exists());
        assert!(dir.path().join("curves.svg").exists());
        assert!(dir.path().join("runs/config_a_seed0/metrics.csv").exists());
        assert!(report
            .summary()
            .contains("config_a wins 0, ties 3, config_b wins 0"));
        assert!(compare_convergence(&cfg, &cfg, &kb, &questions, 2, 0.5, dir.path()).is_err());
    }
}
