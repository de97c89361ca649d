//! The retrieval environment: a discretized search-then-answer loop.
//!
//! An episode starts from a task's question with only the question's entities
//! discovered. Search actions pair a relation template from the question with
//! a discovered entity; the environment runs the query against the corpus,
//! injects an info block with the retrieved documents, and extracts any of
//! the task's chain claims whose golden documents came back, growing the
//! discovered entity set. Answer actions end the episode. Repeating an
//! already-issued query is illegal, and once `max_steps` searches have been
//! spent only answering remains, so every episode terminates within
//! `max_steps + 1` actions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{coverage, token_set, Corpus, CorpusError};
use crate::datagen::{render_query, Claim, Task};
use crate::reward::{outcome_reward, CoverageCurve, RewardBreakdown, RewardConfig, RewardError};
use crate::trajectory::{Block, Trajectory};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("golden doc `{0}` is not in the corpus")]
    MissingGoldenDoc(String),
    #[error("episode is already finished")]
    EpisodeFinished,
    #[error("illegal action: {0}")]
    IllegalAction(String),
    #[error("oracle query `{query}` failed to retrieve golden doc `{doc_id}` for task {task_id}")]
    OracleInfeasible {
        task_id: String,
        query: String,
        doc_id: String,
    },
    #[error("policy chose action index {got} but only {len} actions are legal")]
    ChoiceOutOfRange { got: usize, len: usize },
    #[error("action chooser failed: {0}")]
    Chooser(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Environment knobs. `top_k` documents come back per query; `max_steps`
/// bounds the number of searches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub max_steps: usize,
    pub top_k: usize,
    pub reward: RewardConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            max_steps: 6,
            top_k: 3,
            reward: RewardConfig::default(),
        }
    }
}

/// One environment action. `template` indexes the episode's query templates
/// (the question's relations, in hop order).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Search { template: usize, entity: String },
    Answer { entity: String },
}

impl Action {
    pub fn is_search(&self) -> bool {
        matches!(self, Action::Search { .. })
    }

    /// The entity the action is applied to.
    pub fn entity(&self) -> &str {
        match self {
            Action::Search { entity, .. } | Action::Answer { entity } => entity,
        }
    }
}

/// Full episode state. Fields the policy may look at are the discovered
/// sets, the step counters, and the coverage so far; the golden claim table
/// is the environment's private key for decoding retrieved documents.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub task_id: String,
    pub question: String,
    question_tokens: BTreeSet<String>,
    /// Relation ids usable as query templates, in hop order.
    templates: Vec<usize>,
    /// The task's chain claims in hop order (environment-side knowledge).
    chain_claims: Vec<Claim>,
    golden_ids: BTreeSet<String>,
    pub discovered_claims: Vec<Claim>,
    discovered_claim_docs: BTreeSet<String>,
    claim_tokens: BTreeSet<String>,
    pub discovered_entities: BTreeSet<String>,
    discovery_order: Vec<String>,
    pub issued_queries: BTreeSet<String>,
    queried_entities: BTreeSet<String>,
    /// Retrieved doc-id sets, one per search step (K_t).
    pub retrieved_ids: Vec<BTreeSet<String>>,
    cumulative_retrieved: BTreeSet<String>,
    pub coverage_curve: Vec<f64>,
    /// Searches taken so far.
    pub step: usize,
    pub max_steps: usize,
    pub done: bool,
    pub blocks: Vec<Block>,
    pub final_answer: Option<String>,
}

impl EnvState {
    pub fn question_tokens(&self) -> &BTreeSet<String> {
        &self.question_tokens
    }

    pub fn claim_tokens(&self) -> &BTreeSet<String> {
        &self.claim_tokens
    }

    pub fn queried_entities(&self) -> &BTreeSet<String> {
        &self.queried_entities
    }

    pub fn templates(&self) -> &[usize] {
        &self.templates
    }

    /// The most recently discovered entity.
    pub fn frontier_entity(&self) -> &str {
        self.discovery_order
            .last()
            .expect("at least the question entities are discovered")
    }

    /// Current cumulative coverage of the golden set.
    pub fn coverage_now(&self) -> f64 {
        self.coverage_curve.last().copied().unwrap_or(0.0)
    }

    /// Render a search action's query string.
    pub fn query_string(&self, template: usize, entity: &str) -> String {
        render_query(self.templates[template], entity)
    }

    fn discover_entity(&mut self, entity: &str) {
        if self.discovered_entities.insert(entity.to_string()) {
            self.discovery_order.push(entity.to_string());
        }
    }
}

/// Start an episode: the question's entities are pre-discovered, nothing has
/// been retrieved, and the trajectory is empty.
pub fn reset(task: &Task, corpus: &Corpus, cfg: &EnvConfig) -> Result<EnvState, EnvError> {
    for doc_id in &task.golden_doc_ids {
        if !corpus.contains(doc_id) {
            return Err(EnvError::MissingGoldenDoc(doc_id.clone()));
        }
    }
    let chain_claims: Vec<Claim> = task.hop_chain.claims().cloned().collect();
    let mut templates = Vec::new();
    for claim in &chain_claims {
        if !templates.contains(&claim.relation) {
            templates.push(claim.relation);
        }
    }
    let mut state = EnvState {
        task_id: task.task_id.clone(),
        question: task.question.clone(),
        question_tokens: token_set(&task.question),
        templates,
        chain_claims,
        golden_ids: task.golden_id_set(),
        discovered_claims: Vec::new(),
        discovered_claim_docs: BTreeSet::new(),
        claim_tokens: BTreeSet::new(),
        discovered_entities: BTreeSet::new(),
        discovery_order: Vec::new(),
        issued_queries: BTreeSet::new(),
        queried_entities: BTreeSet::new(),
        retrieved_ids: Vec::new(),
        cumulative_retrieved: BTreeSet::new(),
        coverage_curve: Vec::new(),
        step: 0,
        max_steps: cfg.max_steps,
        done: false,
        blocks: Vec::new(),
        final_answer: None,
    };
    for entity in task.question_entities() {
        state.discover_entity(&entity);
    }
    Ok(state)
}

/// All actions legal in `state`, in deterministic order: Search actions by
/// (template, entity), then one Answer per discovered entity. Queries already
/// issued this episode are excluded, and once the search budget is spent only
/// Answer actions remain.
pub fn legal_actions(state: &EnvState) -> Result<Vec<Action>, EnvError> {
    if state.done {
        return Err(EnvError::EpisodeFinished);
    }
    let mut actions = Vec::new();
    if state.step < state.max_steps {
        for template in 0..state.templates.len() {
            for entity in &state.discovered_entities {
                let query = state.query_string(template, entity);
                if !state.issued_queries.contains(&query) {
                    actions.push(Action::Search {
                        template,
                        entity: entity.clone(),
                    });
                }
            }
        }
    }
    for entity in &state.discovered_entities {
        actions.push(Action::Answer {
            entity: entity.clone(),
        });
    }
    Ok(actions)
}

fn check_legal(state: &EnvState, action: &Action) -> Result<(), EnvError> {
    if state.done {
        return Err(EnvError::EpisodeFinished);
    }
    match action {
        Action::Search { template, entity } => {
            if state.step >= state.max_steps {
                return Err(EnvError::IllegalAction(
                    "search budget exhausted; only Answer is legal".into(),
                ));
            }
            if *template >= state.templates.len() {
                return Err(EnvError::IllegalAction(format!(
                    "template index {template} out of range"
                )));
            }
            if !state.discovered_entities.contains(entity) {
                return Err(EnvError::IllegalAction(format!(
                    "entity `{entity}` not discovered"
                )));
            }
            let query = state.query_string(*template, entity);
            if state.issued_queries.contains(&query) {
                return Err(EnvError::IllegalAction(format!(
                    "query `{query}` already issued"
                )));
            }
        }
        Action::Answer { entity } => {
            if !state.discovered_entities.contains(entity) {
                return Err(EnvError::IllegalAction(format!(
                    "entity `{entity}` not discovered"
                )));
            }
        }
    }
    Ok(())
}

/// Apply one action. Search actions append a Search block and the injected
/// Info block (the retrieved documents as `[doc_id] body` lines) and extend
/// the discovered sets from any golden documents retrieved; Answer actions
/// append the Answer block and finish the episode. Returns the new state, the
/// injected Info block if any, and the done flag.
pub fn step(
    mut state: EnvState,
    action: &Action,
    corpus: &Corpus,
    cfg: &EnvConfig,
) -> Result<(EnvState, Option<Block>, bool), EnvError> {
    check_legal(&state, action)?;
    match action {
        Action::Search { template, entity } => {
            let query = state.query_string(*template, entity);
            let result = corpus.retrieve(&query, cfg.top_k);
            let retrieved = result.id_set();

            state.issued_queries.insert(query.clone());
            state.queried_entities.insert(entity.clone());
            state.blocks.push(Block::search(&query));
            let rendered: Vec<(String, String)> = result
                .ranked
                .iter()
                .map(|(id, _)| {
                    let body = corpus.get(id).expect("retrieved ids exist").body.clone();
                    (id.clone(), body)
                })
                .collect();
            let info = Block::info(
                rendered
                    .iter()
                    .map(|(id, body)| (id.as_str(), body.as_str())),
            );
            state.blocks.push(info.clone());

            for (doc_id, _) in &result.ranked {
                if state.golden_ids.contains(doc_id)
                    && state.discovered_claim_docs.insert(doc_id.clone())
                {
                    let claim = state
                        .chain_claims
                        .iter()
                        .find(|c| &crate::datagen::golden_doc_id(c) == doc_id)
                        .expect("golden ids map to chain claims")
                        .clone();
                    for token in claim.tokens() {
                        state.claim_tokens.insert(token.to_string());
                    }
                    state.discover_entity(&claim.subject.clone());
                    state.discover_entity(&claim.object.clone());
                    state.discovered_claims.push(claim);
                }
            }

            state.cumulative_retrieved.extend(retrieved.iter().cloned());
            let cov = coverage(&state.cumulative_retrieved, &state.golden_ids)?;
            state.coverage_curve.push(cov);
            state.retrieved_ids.push(retrieved);
            state.step += 1;
            Ok((state, Some(info), false))
        }
        Action::Answer { entity } => {
            state.blocks.push(Block::answer(entity));
            state.final_answer = Some(entity.clone());
            state.done = true;
            Ok((state, None, true))
        }
    }
}

/// Score a finished episode: outcome from the final answer, gain from the
/// coverage curve, efficiency from `T = searches + 1`.
pub fn finalize_episode(
    state: &EnvState,
    task: &Task,
    cfg: &EnvConfig,
) -> Result<RewardBreakdown, EnvError> {
    if !state.done {
        return Err(EnvError::IllegalAction(
            "cannot finalize an unfinished episode".into(),
        ));
    }
    let answer = state.final_answer.as_deref().unwrap_or("");
    let outcome = outcome_reward(answer, &task.gold_answers, cfg.reward.metric);
    let curve = CoverageCurve::new(state.coverage_curve.clone())?;
    let steps_t = state.step + 1;
    Ok(RewardBreakdown::compute(outcome, curve, steps_t, &cfg.reward)?)
}

/// The episode's trajectory in tagged-block form.
pub fn trajectory_of(state: &EnvState) -> Trajectory {
    Trajectory::new(state.question.clone(), state.blocks.clone())
}

/// What a policy returns for one decision point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chosen {
    pub index: usize,
    pub log_prob: f64,
    pub value: f64,
}

/// Anything that can pick one of the legal actions.
pub trait ActionChooser {
    fn choose(&mut self, state: &EnvState, legal: &[Action]) -> Result<Chosen, EnvError>;
}

/// One decision point of a recorded episode: the pre-action state, the legal
/// actions, and what the policy chose.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub state: EnvState,
    pub legal: Vec<Action>,
    pub chosen: usize,
    pub log_prob: f64,
    pub value: f64,
}

impl EpisodeStep {
    pub fn action(&self) -> &Action {
        &self.legal[self.chosen]
    }
}

/// A finished, scored episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub task_id: String,
    pub steps: Vec<EpisodeStep>,
    pub trajectory: Trajectory,
    pub reward: RewardBreakdown,
}

impl EpisodeRecord {
    pub fn final_answer(&self) -> &str {
        self.trajectory
            .blocks
            .last()
            .map(|b| b.text.as_str())
            .unwrap_or("")
    }
}

/// Run one full episode with `chooser` picking actions.
pub fn rollout_episode(
    task: &Task,
    corpus: &Corpus,
    cfg: &EnvConfig,
    chooser: &mut dyn ActionChooser,
) -> Result<EpisodeRecord, EnvError> {
    let mut state = reset(task, corpus, cfg)?;
    let mut steps = Vec::new();
    while !state.done {
        let legal = legal_actions(&state)?;
        let chosen = chooser.choose(&state, &legal)?;
        if chosen.index >= legal.len() {
            return Err(EnvError::ChoiceOutOfRange {
                got: chosen.index,
                len: legal.len(),
            });
        }
        let action = legal[chosen.index].clone();
        steps.push(EpisodeStep {
            state: state.clone(),
            legal,
            chosen: chosen.index,
            log_prob: chosen.log_prob,
            value: chosen.value,
        });
        let (next, _, _) = step(state, &action, corpus, cfg)?;
        state = next;
    }
    let reward = finalize_episode(&state, task, cfg)?;
    Ok(EpisodeRecord {
        task_id: task.task_id.clone(),
        steps,
        trajectory: trajectory_of(&state),
        reward,
    })
}

/// The expert's next action: search the first chain hop whose golden doc has
/// not been decoded yet, else answer with the answer entity.
pub fn expert_action(state: &EnvState) -> Action {
    for claim in &state.chain_claims {
        let doc_id = crate::datagen::golden_doc_id(claim);
        if !state.discovered_claim_docs.contains(&doc_id) {
            let template = state
                .templates
                .iter()
                .position(|&r| r == claim.relation)
                .expect("chain relations are registered as templates");
            return Action::Search {
                template,
                entity: claim.subject.clone(),
            };
        }
    }
    Action::Answer {
        entity: state
            .chain_claims
            .last()
            .expect("chains are nonempty")
            .object
            .clone(),
    }
}

/// Replay the expert: one search per hop in chain order, then the answer.
/// Fails with an infeasibility error if some hop's query does not retrieve
/// its golden document.
pub fn oracle_episode(
    task: &Task,
    corpus: &Corpus,
    cfg: &EnvConfig,
) -> Result<EpisodeRecord, EnvError> {
    let mut state = reset(task, corpus, cfg)?;
    let mut steps = Vec::new();
    while !state.done {
        let legal = legal_actions(&state)?;
        let want = expert_action(&state);
        let index = legal.iter().position(|a| *a == want).ok_or_else(|| {
            EnvError::IllegalAction(format!("expert action {want:?} not in the legal set"))
        })?;
        let hops_before = state.discovered_claims.len();
        steps.push(EpisodeStep {
            state: state.clone(),
            legal,
            chosen: index,
            log_prob: 0.0,
            value: 0.0,
        });
        let (next, _, _) = step(state, &want, corpus, cfg)?;
        state = next;
        if let Action::Search { template, entity } = &want {
            if state.discovered_claims.len() == hops_before {
                let doc_id = crate::datagen::golden_doc_id(&state.chain_claims[hops_before]);
                return Err(EnvError::OracleInfeasible {
                    task_id: task.task_id.clone(),
                    query: state.query_string(*template, entity),
                    doc_id,
                });
            }
        }
    }
    let reward = finalize_episode(&state, task, cfg)?;
    Ok(EpisodeRecord {
        task_id: task.task_id.clone(),
        steps,
        trajectory: trajectory_of(&state),
        reward,
    })
}
