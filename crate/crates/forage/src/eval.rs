//! Evaluation harness: run a policy or baseline over a task set and report
//! per-task and aggregate quality metrics.
//!
//! Baselines include the expert replay, a uniform-random chooser, and a
//! single-query retrieve-and-read baseline that uses the whole question as
//! its only search. The report renders either as a human summary or as a
//! byte-stable CSV ordered by task id.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{coverage, token_set, Corpus, CorpusError};
use crate::datagen::{entity_tokens, Task};
use crate::env::{
    oracle_episode, rollout_episode, Action, EnvConfig, EnvError, EpisodeRecord,
};
use crate::policy::{
    ExternalPolicy, GreedyChooser, PolicyError, PolicyParams, RandomChooser,
};
use crate::reward::{
    exact_match, foraging_objective, token_f1, RewardBreakdown, RewardError,
};
use crate::trajectory::{serialize_trajectory, Block, Trajectory, TrajectoryError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no tasks to evaluate")]
    NoTasks,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// What drives the episodes being evaluated.
pub enum EvalPolicy {
    /// Expert replay of each task's hop chain.
    Oracle,
    /// Uniform over legal actions.
    Random,
    /// One question-as-query search, then answer extraction from the
    /// retrieved bodies.
    OneShotRag,
    /// Greedy argmax under learned parameters.
    Greedy(Box<PolicyParams>),
    /// External decision process spoken to over the line protocol.
    External(String),
}

impl EvalPolicy {
    pub fn label(&self) -> &'static str {
        match self {
            EvalPolicy::Oracle => "oracle",
            EvalPolicy::Random => "random",
            EvalPolicy::OneShotRag => "oneshot",
            EvalPolicy::Greedy(_) => "greedy",
            EvalPolicy::External(_) => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task_id: String,
    pub em: f64,
    pub f1: f64,
    pub steps_t: usize,
    pub final_coverage: f64,
    pub total_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub n_tasks: usize,
    pub alpha: f64,
    pub beta: f64,
    pub top_k: usize,
    pub max_steps: usize,
    pub mean_em: f64,
    pub mean_f1: f64,
    pub mean_steps_t: f64,
    pub mean_coverage: f64,
    pub mean_reward: f64,
    /// Mean of `(S + alpha * C) * beta^T`, the stricter analysis objective
    /// that discounts every step.
    pub mean_objective: f64,
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Human,
    Csv,
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("task_id,em,f1,steps_T,final_coverage,total_reward\n");
            for r in &report.rows {
                out.push_str(&format!(
                    "{},{:.4},{:.4},{},{:.4},{:.4}\n",
                    r.task_id, r.em, r.f1, r.steps_t, r.final_coverage, r.total_reward
                ));
            }
            out
        }
        ReportFormat::Human => {
            let mut out = String::new();
            out.push_str(&format!("policy:      {}\n", report.policy));
            out.push_str(&format!(
                "tasks: {}  alpha: {}  beta: {}  top_k: {}  max_steps: {}\n",
                report.n_tasks, report.alpha, report.beta, report.top_k, report.max_steps
            ));
            out.push_str(&format!("exact_match: {:.4}\n", report.mean_em));
            out.push_str(&format!("token_f1:    {:.4}\n", report.mean_f1));
            out.push_str(&format!("mean_T:      {:.4}\n", report.mean_steps_t));
            out.push_str(&format!("coverage:    {:.4}\n", report.mean_coverage));
            out.push_str(&format!("mean_reward: {:.4}\n", report.mean_reward));
            out.push_str(&format!("objective:   {:.4}\n", report.mean_objective));
            out
        }
    }
}

/// The single-query baseline's answer extraction: among entity mentions in
/// the retrieved bodies that do not already appear in the question, pick the
/// one whose containing documents overlap the question most, ties toward the
/// lexicographically smallest entity.
pub fn one_shot_rag_answer(question: &str, corpus: &Corpus, k: usize) -> (String, Vec<String>) {
    let result = corpus.retrieve(question, k);
    let question_tokens = token_set(question);
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for (doc_id, _) in &result.ranked {
        let doc = corpus.get(doc_id).expect("retrieved ids exist");
        let body_tokens = token_set(&doc.body);
        let overlap = body_tokens.intersection(&question_tokens).count() as f64;
        for entity in entity_tokens(&doc.body) {
            if !question_tokens.contains(&entity) {
                *scores.entry(entity).or_insert(0.0) += overlap;
            }
        }
    }
    let mut best = String::new();
    let mut best_score = f64::NEG_INFINITY;
    for (entity, score) in &scores {
        if *score > best_score {
            best = entity.clone();
            best_score = *score;
        }
    }
    let ids = result.ranked.iter().map(|(id, _)| id.clone()).collect();
    (best, ids)
}

/// Run the single-query baseline on one task, producing a grammar-valid
/// trajectory and a scored row. The episode spends one search, so `T = 2`.
pub fn one_shot_episode(
    task: &Task,
    corpus: &Corpus,
    cfg: &EnvConfig,
) -> Result<(EvalRow, Trajectory, RewardBreakdown), EvalError> {
    let (answer, retrieved) = one_shot_rag_answer(&task.question, corpus, cfg.top_k);
    let golden = task.golden_id_set();
    let retrieved_set = retrieved.iter().cloned().collect();
    let cov = coverage(&retrieved_set, &golden)?;
    let curve = crate::reward::CoverageCurve::new(vec![cov])?;
    let outcome = crate::reward::outcome_reward(&answer, &task.gold_answers, cfg.reward.metric);
    let breakdown = RewardBreakdown::compute(outcome, curve, 2, &cfg.reward)?;
    let docs: Vec<(String, String)> = retrieved
        .iter()
        .map(|id| {
            let body = corpus.get(id).expect("retrieved ids exist").body.clone();
            (id.clone(), body)
        })
        .collect();
    let trajectory = Trajectory::new(
        task.question.clone(),
        vec![
            Block::search(&task.question),
            Block::info(docs.iter().map(|(id, body)| (id.as_str(), body.as_str()))),
            Block::answer(&answer),
        ],
    );
    let row = EvalRow {
        task_id: task.task_id.clone(),
        em: exact_match(&answer, &task.gold_answers),
        f1: token_f1(&answer, &task.gold_answers),
        steps_t: 2,
        final_coverage: cov,
        total_reward: breakdown.total,
    };
    Ok((row, trajectory, breakdown))
}

fn row_from_record(record: &EpisodeRecord, task: &Task) -> EvalRow {
    let answer = record.final_answer();
    EvalRow {
        task_id: task.task_id.clone(),
        em: exact_match(answer, &task.gold_answers),
        f1: token_f1(answer, &task.gold_answers),
        steps_t: record.reward.steps_t,
        final_coverage: record.reward.curve.final_coverage(),
        total_reward: record.reward.total,
    }
}

/// Evaluate `policy` over `tasks`. `seed` drives only the random baseline.
pub fn evaluate(
    policy: &EvalPolicy,
    tasks: &[Task],
    corpus: &Corpus,
    cfg: &EnvConfig,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::NoTasks);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut external = match policy {
        EvalPolicy::External(command) => Some(ExternalPolicy::spawn(command)?),
        _ => None,
    };
    let mut rows = Vec::new();
    let mut objective_sum = 0.0;
    for task in tasks {
        let (row, outcome, cov, steps_t) = match policy {
            EvalPolicy::Oracle => {
                let record = oracle_episode(task, corpus, cfg)?;
                let row = row_from_record(&record, task);
                (
                    row,
                    record.reward.outcome,
                    record.reward.curve.final_coverage(),
                    record.reward.steps_t,
                )
            }
            EvalPolicy::Random => {
                let record = {
                    let mut chooser = RandomChooser { rng: &mut rng };
                    rollout_episode(task, corpus, cfg, &mut chooser)?
                };
                let row = row_from_record(&record, task);
                (
                    row,
                    record.reward.outcome,
                    record.reward.curve.final_coverage(),
                    record.reward.steps_t,
                )
            }
            EvalPolicy::Greedy(params) => {
                let record = {
                    let mut chooser = GreedyChooser { params };
                    rollout_episode(task, corpus, cfg, &mut chooser)?
                };
                let row = row_from_record(&record, task);
                (
                    row,
                    record.reward.outcome,
                    record.reward.curve.final_coverage(),
                    record.reward.steps_t,
                )
            }
            EvalPolicy::External(_) => {
                let chooser = external.as_mut().expect("spawned above");
                let record = rollout_episode(task, corpus, cfg, chooser)?;
                let row = row_from_record(&record, task);
                (
                    row,
                    record.reward.outcome,
                    record.reward.curve.final_coverage(),
                    record.reward.steps_t,
                )
            }
            EvalPolicy::OneShotRag => {
                let (row, _, breakdown) = one_shot_episode(task, corpus, cfg)?;
                (
                    row,
                    breakdown.outcome,
                    breakdown.curve.final_coverage(),
                    breakdown.steps_t,
                )
            }
        };
        objective_sum += foraging_objective(outcome, cov, steps_t, &cfg.reward);
        rows.push(row);
    }
    rows.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    let n = rows.len() as f64;
    Ok(EvalReport {
        policy: policy.label().to_string(),
        n_tasks: rows.len(),
        alpha: cfg.reward.alpha,
        beta: cfg.reward.beta,
        top_k: cfg.top_k,
        max_steps: cfg.max_steps,
        mean_em: rows.iter().map(|r| r.em).sum::<f64>() / n,
        mean_f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
        mean_steps_t: rows.iter().map(|r| r.steps_t as f64).sum::<f64>() / n,
        mean_coverage: rows.iter().map(|r| r.final_coverage).sum::<f64>() / n,
        mean_reward: rows.iter().map(|r| r.total_reward).sum::<f64>() / n,
        mean_objective: objective_sum / n,
        rows,
    })
}

/// A rolled-out episode in exportable form: the trajectory text a sequence
/// model would see, plus the action/score sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDump {
    pub task_id: String,
    pub question: String,
    pub trajectory_text: String,
    pub actions: Vec<Action>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub reward: RewardBreakdown,
}

impl EpisodeDump {
    pub fn from_record(record: &EpisodeRecord) -> Result<Self, EvalError> {
        Ok(EpisodeDump {
            task_id: record.task_id.clone(),
            question: record.trajectory.question.clone(),
            trajectory_text: serialize_trajectory(&record.trajectory)?,
            actions: record.steps.iter().map(|s| s.action().clone()).collect(),
            log_probs: record.steps.iter().map(|s| s.log_prob).collect(),
            values: record.steps.iter().map(|s| s.value).collect(),
            reward: record.reward.clone(),
        })
    }
}
