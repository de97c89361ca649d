//! Synthetic multi-hop task generation with golden evidence documents.
//!
//! Tasks are built over a claim graph of `(subject, relation, object)` triples
//! between synthetic entities. Each task owns a hop chain of at least three
//! claims with pairwise-distinct entities; each claim is verbalized as one
//! golden document, and off-chain claims become distractor documents.
//!
//! Two constructions make the tasks genuinely multi-hop:
//!
//! * the question names only the chain's head entity and relation labels, so
//!   intermediate and answer entities must be foraged from documents, and
//! * the final-hop golden document phrases its claim with a disjoint synonym
//!   vocabulary, sharing zero content tokens with the question, so one-shot
//!   retrieval with the raw question can never surface the answer.
//!
//! `verify_min_hops` checks the multi-hop property exhaustively: no proper
//! subset of a task's golden documents lets a chain-following oracle derive
//! the answer from the question's entities.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{token_set, Corpus, CorpusError, Document, DEFAULT_TOP_K};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("infeasible config: {0}")]
    Infeasible(String),
    #[error("candidate chains exhausted")]
    ChainsExhausted,
    #[error("distractor claims exhausted")]
    DistractorsExhausted,
    #[error("relation vocabulary exhausted: need {need}, have {have}")]
    VocabularyExhausted { need: usize, have: usize },
    #[error("sampled chain has {got} hops, expected {want}")]
    HopCountMismatch { got: usize, want: usize },
    #[error("invalid hop chain: {0}")]
    InvalidChain(String),
    #[error("golden doc `{0}` missing from corpus")]
    MissingGoldenDoc(String),
    #[error("task `{0}` failed minimum-hop verification")]
    VerificationFailed(String),
    #[error("task `{task_id}`: final golden doc `{doc_id}` shares a content token with the question")]
    QuestionOverlap { task_id: String, doc_id: String },
    #[error("task `{task_id}`: one-shot retrieval returned final golden doc `{doc_id}`")]
    OneShotLeak { task_id: String, doc_id: String },
    #[error("task file line {line}: {msg}")]
    MalformedTask { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// A relation's two verbalizations. Questions and search templates use
/// `question_label`; documents describe the same relation with `doc_label`.
/// The two vocabularies share no tokens, which is what lets final-hop golden
/// documents avoid every question token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationPair {
    pub question_label: &'static str,
    pub doc_label: &'static str,
}

/// Fixed template vocabulary. All 24 labels are distinct tokens and none
/// collides with the question or document filler words.
pub const RELATIONS: [RelationPair; 12] = [
    RelationPair { question_label: "mentored", doc_label: "trained" },
    RelationPair { question_label: "founded", doc_label: "established" },
    RelationPair { question_label: "authored", doc_label: "wrote" },
    RelationPair { question_label: "governs", doc_label: "administers" },
    RelationPair { question_label: "acquired", doc_label: "purchased" },
    RelationPair { question_label: "succeeded", doc_label: "replaced" },
    RelationPair { question_label: "sponsors", doc_label: "funds" },
    RelationPair { question_label: "curates", doc_label: "maintains" },
    RelationPair { question_label: "commands", doc_label: "leads" },
    RelationPair { question_label: "supplies", doc_label: "provisions" },
    RelationPair { question_label: "hosts", doc_label: "accommodates" },
    RelationPair { question_label: "restored", doc_label: "rebuilt" },
];

const QUESTION_FILLER: [&str; 15] = [
    "starting", "from", "follow", "then", "which", "target", "does", "the", "chain", "reach",
    "also", "shared", "do", "both", "chains",
];

const DOC_FILLER: [&str; 5] = ["verified", "fact", "noted", "in", "archive"];

/// Every fixed (non-entity) token the generator can emit. Entity names always
/// contain a digit, so the complement of this set over a document's tokens is
/// exactly its entity mentions.
pub fn vocabulary_tokens() -> &'static BTreeSet<&'static str> {
    static VOCAB: OnceLock<BTreeSet<&'static str>> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let mut set = BTreeSet::new();
        for r in &RELATIONS {
            set.insert(r.question_label);
            set.insert(r.doc_label);
        }
        set.extend(QUESTION_FILLER);
        set.extend(DOC_FILLER);
        set
    })
}

/// Entity-name tokens mentioned in `text`: its tokens minus the fixed
/// generation vocabulary.
pub fn entity_tokens(text: &str) -> BTreeSet<String> {
    token_set(text)
        .into_iter()
        .filter(|t| !vocabulary_tokens().contains(t.as_str()))
        .collect()
}

/// Render the search-query template for a relation applied to an entity.
pub fn render_query(relation: usize, entity: &str) -> String {
    format!("{} {}", RELATIONS[relation].question_label, entity)
}

/// One edge of the claim graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub id: usize,
    pub subject: String,
    /// Index into [`RELATIONS`].
    pub relation: usize,
    pub object: String,
}

impl Claim {
    /// Tokens a discovered claim contributes to the policy's overlap
    /// features: both endpoint entities and both relation labels.
    pub fn tokens(&self) -> [&str; 4] {
        [
            self.subject.as_str(),
            self.object.as_str(),
            RELATIONS[self.relation].question_label,
            RELATIONS[self.relation].doc_label,
        ]
    }
}

/// Generation parameters. `n_entities = 0` sizes the entity pool
/// automatically: one disjoint chain per task plus a shared distractor pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_tasks: usize,
    pub hops: usize,
    pub distractors_per_task: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    /// Generate intersecting-condition tasks: two chains that share the
    /// answer entity, both of which must be followed to identify it.
    pub intersecting: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_tasks: 200,
            hops: 3,
            distractors_per_task: 5,
            n_entities: 0,
            n_relations: 8,
            intersecting: false,
            seed: 42,
        }
    }
}

/// Entities set aside for off-chain claims when sizing automatically.
const DISTRACTOR_POOL: usize = 24;

impl GenConfig {
    pub fn resolved_entities(&self) -> usize {
        if self.n_entities > 0 {
            self.n_entities
        } else {
            let pool = if self.distractors_per_task > 0 {
                DISTRACTOR_POOL
            } else {
                0
            };
            self.n_tasks * (self.hops + 1) + pool
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.n_tasks == 0 {
            return Err(GenError::Infeasible("n_tasks must be positive".into()));
        }
        if self.hops < 3 {
            return Err(GenError::Infeasible(format!(
                "hops must be at least 3, got {}",
                self.hops
            )));
        }
        if self.intersecting && self.hops < 4 {
            // Each of the two branches needs at least two hops, or its
            // answer-bearing document would mention an entity the question
            // names.
            return Err(GenError::Infeasible(format!(
                "intersecting tasks need at least 4 hops, got {}",
                self.hops
            )));
        }
        if self.n_relations == 0 || self.n_relations > RELATIONS.len() {
            return Err(GenError::VocabularyExhausted {
                need: self.n_relations.max(1),
                have: RELATIONS.len(),
            });
        }
        if self.hops > self.n_relations {
            // Each chain uses pairwise-distinct relations so its question
            // reads unambiguously.
            return Err(GenError::VocabularyExhausted {
                need: self.hops,
                have: self.n_relations,
            });
        }
        let chain_entities = self.n_tasks * (self.hops + 1);
        let n = self.resolved_entities();
        if n < chain_entities {
            return Err(GenError::Infeasible(format!(
                "{n} entities cannot host {} disjoint {}-hop chains",
                self.n_tasks, self.hops
            )));
        }
        let pool = n - chain_entities;
        let needed = self.n_tasks * self.distractors_per_task;
        if needed > 0 {
            let capacity = pool.saturating_sub(1) * pool * self.n_relations;
            if capacity < 2 * needed {
                return Err(GenError::Infeasible(format!(
                    "distractor pool of {pool} entities cannot host {needed} off-chain claims"
                )));
            }
        }
        Ok(())
    }
}

/// A task's evidence chain: one branch for plain chains, two for
/// intersecting-condition tasks. Every branch is a linked claim path ending
/// at the shared answer entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopChain {
    pub branches: Vec<Vec<Claim>>,
    pub answer_entity: String,
}

impl HopChain {
    /// Claims in branch order, flattened. Golden documents align with this
    /// ordering.
    pub fn claims(&self) -> impl Iterator<Item = &Claim> {
        self.branches.iter().flatten()
    }

    /// Total number of claims (the task's hop count `h`).
    pub fn hop_count(&self) -> usize {
        self.branches.iter().map(Vec::len).sum()
    }

    /// Head entity of each branch; these are the only entities a question
    /// may name.
    pub fn heads(&self) -> Vec<&str> {
        self.branches
            .iter()
            .map(|b| b[0].subject.as_str())
            .collect()
    }

    /// Claim ids of each branch's last hop. Their documents are the ones
    /// rendered with zero question overlap.
    pub fn final_claim_ids(&self) -> BTreeSet<usize> {
        self.branches
            .iter()
            .map(|b| b.last().expect("branches are nonempty").id)
            .collect()
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.branches.is_empty() || self.branches.iter().any(Vec::is_empty) {
            return Err(GenError::InvalidChain("empty branch".into()));
        }
        if self.hop_count() < 3 {
            return Err(GenError::InvalidChain(format!(
                "{} claims, need at least 3",
                self.hop_count()
            )));
        }
        let mut seen = BTreeSet::new();
        for branch in &self.branches {
            for pair in branch.windows(2) {
                if pair[0].object != pair[1].subject {
                    return Err(GenError::InvalidChain(format!(
                        "claim {} object `{}` does not link to claim {} subject `{}`",
                        pair[0].id, pair[0].object, pair[1].id, pair[1].subject
                    )));
                }
            }
            if branch.last().unwrap().object != self.answer_entity {
                return Err(GenError::InvalidChain(
                    "branch does not terminate at the answer entity".into(),
                ));
            }
            for claim in branch {
                if !seen.insert(claim.subject.clone()) {
                    return Err(GenError::InvalidChain(format!(
                        "entity `{}` repeats in the chain",
                        claim.subject
                    )));
                }
            }
        }
        // The answer entity appears exactly once more (as the shared final
        // object); any other repeat was caught above.
        if seen.contains(&self.answer_entity) {
            return Err(GenError::InvalidChain(
                "answer entity collides with an interior chain entity".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ChainTemplate {
    /// Claim ids per branch, in graph order.
    branches: Vec<Vec<usize>>,
    answer: String,
}

/// The generated claim universe plus bookkeeping for disjoint sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ClaimGraph {
    pub entities: Vec<String>,
    pub claims: Vec<Claim>,
    candidates: Vec<ChainTemplate>,
    unused: Vec<usize>,
    distractor_ids: Vec<usize>,
}

impl ClaimGraph {
    pub fn remaining_chains(&self) -> usize {
        self.unused.len()
    }

    pub fn remaining_distractors(&self) -> usize {
        self.distractor_ids.len()
    }
}

fn fresh_entity(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> String {
    loop {
        let a = (b'a' + rng.gen_range(0..26u8)) as char;
        let b = (b'a' + rng.gen_range(0..26u8)) as char;
        let n: u32 = rng.gen_range(0..1000);
        // The digit suffix keeps entity names disjoint from every
        // vocabulary word.
        let name = format!("{a}{b}{n:03}");
        if used.insert(name.clone()) {
            return name;
        }
    }
}

/// Build a claim graph with `cfg.n_tasks` vertex-disjoint candidate chains of
/// length `cfg.hops` plus a shared pool of off-chain distractor claims.
pub fn build_claim_graph(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<ClaimGraph, GenError> {
    cfg.validate()?;
    let n_entities = cfg.resolved_entities();
    let mut used = BTreeSet::new();
    let entities: Vec<String> = (0..n_entities)
        .map(|_| fresh_entity(rng, &mut used))
        .collect();

    let mut claims = Vec::new();
    let mut candidates = Vec::new();
    for t in 0..cfg.n_tasks {
        let base = t * (cfg.hops + 1);
        let chain_entities = &entities[base..base + cfg.hops + 1];
        let relations = rand::seq::index::sample(rng, cfg.n_relations, cfg.hops).into_vec();
        let answer = chain_entities[cfg.hops].clone();
        let mut push_claim = |subject: &str, relation: usize, object: &str| {
            let id = claims.len();
            claims.push(Claim {
                id,
                subject: subject.to_string(),
                relation,
                object: object.to_string(),
            });
            id
        };
        let branches = if cfg.intersecting {
            // Both branches take at least two hops so that every
            // answer-bearing document sits one entity away from anything the
            // question names: branch 2 gets exactly two hops, branch 1 the
            // rest.
            let first_len = cfg.hops - 2;
            let mut first = Vec::new();
            for i in 0..first_len {
                let object = if i == first_len - 1 {
                    &answer
                } else {
                    &chain_entities[i + 1]
                };
                first.push(push_claim(&chain_entities[i], relations[i], object));
            }
            let mut second = Vec::new();
            for i in first_len..cfg.hops {
                let object = if i == cfg.hops - 1 {
                    &answer
                } else {
                    &chain_entities[i + 1]
                };
                second.push(push_claim(&chain_entities[i], relations[i], object));
            }
            vec![first, second]
        } else {
            let mut branch = Vec::new();
            for i in 0..cfg.hops {
                branch.push(push_claim(
                    &chain_entities[i],
                    relations[i],
                    &chain_entities[i + 1],
                ));
            }
            vec![branch]
        };
        candidates.push(ChainTemplate { branches, answer });
    }

    // Off-chain claims between pool entities, exact duplicates excluded.
    let pool = &entities[cfg.n_tasks * (cfg.hops + 1)..];
    let needed = cfg.n_tasks * cfg.distractors_per_task;
    let mut distractor_ids = Vec::with_capacity(needed);
    let mut seen_triples = BTreeSet::new();
    let mut attempts = 0usize;
    while distractor_ids.len() < needed {
        attempts += 1;
        if attempts > needed * 100 + 100 {
            return Err(GenError::DistractorsExhausted);
        }
        let s = pool[rng.gen_range(0..pool.len())].clone();
        let o = pool[rng.gen_range(0..pool.len())].clone();
        if s == o {
            continue;
        }
        let r = rng.gen_range(0..cfg.n_relations);
        if !seen_triples.insert((s.clone(), r, o.clone())) {
            continue;
        }
        let id = claims.len();
        claims.push(Claim {
            id,
            subject: s,
            relation: r,
            object: o,
        });
        distractor_ids.push(id);
    }

    let unused = (0..candidates.len()).collect();
    Ok(ClaimGraph {
        entities,
        claims,
        candidates,
        unused,
        distractor_ids,
    })
}

/// Draw one unused candidate chain. Chains sampled from the same graph are
/// claim-disjoint; once the candidates run out this fails.
pub fn sample_hop_chain(
    graph: &mut ClaimGraph,
    h: usize,
    rng: &mut ChaCha8Rng,
) -> Result<HopChain, GenError> {
    if graph.unused.is_empty() {
        return Err(GenError::ChainsExhausted);
    }
    let pick = rng.gen_range(0..graph.unused.len());
    let idx = graph.unused.swap_remove(pick);
    let template = &graph.candidates[idx];
    let chain = HopChain {
        branches: template
            .branches
            .iter()
            .map(|ids| ids.iter().map(|&i| graph.claims[i].clone()).collect())
            .collect(),
        answer_entity: template.answer.clone(),
    };
    if chain.hop_count() != h {
        return Err(GenError::HopCountMismatch {
            got: chain.hop_count(),
            want: h,
        });
    }
    chain.validate()?;
    Ok(chain)
}

pub fn golden_doc_id(claim: &Claim) -> String {
    format!("g{:05}", claim.id)
}

fn distractor_doc_id(claim: &Claim) -> String {
    format!("x{:05}", claim.id)
}

fn claim_body(claim: &Claim, zero_question_overlap: bool) -> String {
    let rel = &RELATIONS[claim.relation];
    if zero_question_overlap {
        // Doc-side synonym only, plus filler disjoint from the question
        // template: no token of this body can appear in any question.
        format!(
            "{} {} {}. Verified fact noted in archive.",
            claim.subject, rel.doc_label, claim.object
        )
    } else {
        format!(
            "{} {} {}. Verified fact: {} {} {}.",
            claim.subject, rel.question_label, claim.object, claim.subject, rel.doc_label,
            claim.object
        )
    }
}

/// Render one golden document per chain claim plus
/// `cfg.distractors_per_task` distractor documents drawn from the graph's
/// off-chain claims.
pub fn render_documents(
    graph: &mut ClaimGraph,
    chain: &HopChain,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Document>, GenError> {
    let finals = chain.final_claim_ids();
    let mut docs = Vec::new();
    for claim in chain.claims() {
        let doc_id = golden_doc_id(claim);
        docs.push(Document {
            title: format!("Archive record {doc_id}"),
            doc_id,
            body: claim_body(claim, finals.contains(&claim.id)),
            is_distractor: false,
        });
    }
    for _ in 0..cfg.distractors_per_task {
        if graph.distractor_ids.is_empty() {
            return Err(GenError::DistractorsExhausted);
        }
        let pick = rng.gen_range(0..graph.distractor_ids.len());
        let id = graph.distractor_ids.swap_remove(pick);
        let claim = &graph.claims[id];
        let doc_id = distractor_doc_id(claim);
        docs.push(Document {
            title: format!("Archive record {doc_id}"),
            doc_id,
            body: claim_body(claim, false),
            is_distractor: true,
        });
    }
    Ok(docs)
}

/// One generated question plus everything needed to score and replay it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub task_id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    /// Golden document ids aligned with the chain's flattened claim order.
    pub golden_doc_ids: Vec<String>,
    pub hop_chain: HopChain,
    pub created_seed: u64,
}

impl Task {
    pub fn hop_count(&self) -> usize {
        self.hop_chain.hop_count()
    }

    pub fn golden_id_set(&self) -> BTreeSet<String> {
        self.golden_doc_ids.iter().cloned().collect()
    }

    /// The chain claim verbalized by a golden document.
    pub fn doc_claim(&self, doc_id: &str) -> Option<&Claim> {
        self.golden_doc_ids
            .iter()
            .position(|id| id == doc_id)
            .and_then(|i| self.hop_chain.claims().nth(i))
    }

    /// Doc ids of each branch's final hop.
    pub fn final_doc_ids(&self) -> Vec<String> {
        let finals = self.hop_chain.final_claim_ids();
        self.hop_chain
            .claims()
            .zip(&self.golden_doc_ids)
            .filter(|(c, _)| finals.contains(&c.id))
            .map(|(_, id)| id.clone())
            .collect()
    }

    /// Chain entities actually named in the question text. For well-formed
    /// tasks these are exactly the branch heads.
    pub fn question_entities(&self) -> Vec<String> {
        let q = token_set(&self.question);
        let mut seen = BTreeSet::new();
        let mut found = Vec::new();
        for claim in self.hop_chain.claims() {
            for entity in [&claim.subject, &claim.object] {
                if q.contains(entity.as_str()) && seen.insert(entity.clone()) {
                    found.push(entity.clone());
                }
            }
        }
        found
    }
}

fn branch_clause(branch: &[Claim]) -> String {
    let labels: Vec<&str> = branch
        .iter()
        .map(|c| RELATIONS[c.relation].question_label)
        .collect();
    let mut clause = labels[0].to_string();
    for label in &labels[1..] {
        clause.push_str(", then ");
        clause.push_str(label);
    }
    clause
}

/// Build the natural-language question for a chain. Only branch heads and
/// relation labels are verbalized; intermediate and answer entities never
/// appear.
pub fn synthesize_task(chain: &HopChain, cfg: &GenConfig) -> Result<Task, GenError> {
    chain.validate()?;
    let question = match chain.branches.as_slice() {
        [single] => format!(
            "Starting from {}, follow {}. Which target does the chain reach?",
            single[0].subject,
            branch_clause(single)
        ),
        [first, second] => format!(
            "Starting from {}, follow {}. Also starting from {}, follow {}. \
             Which shared target do both chains reach?",
            first[0].subject,
            branch_clause(first),
            second[0].subject,
            branch_clause(second)
        ),
        _ => {
            return Err(GenError::InvalidChain(
                "questions support at most two branches".into(),
            ))
        }
    };
    let first_id = chain.claims().next().expect("validated nonempty").id;
    Ok(Task {
        task_id: format!("t{first_id:05}"),
        question,
        gold_answers: vec![chain.answer_entity.clone()],
        golden_doc_ids: chain.claims().map(golden_doc_id).collect(),
        hop_chain: chain.clone(),
        created_seed: cfg.seed,
    })
}

fn closure(start: &BTreeSet<String>, claims: &[&Claim]) -> BTreeSet<String> {
    let mut reached = start.clone();
    loop {
        let mut grew = false;
        for claim in claims {
            if reached.contains(&claim.subject) && reached.insert(claim.object.clone()) {
                grew = true;
            }
        }
        if !grew {
            return reached;
        }
    }
}

/// Can a chain-following oracle derive the answer knowing only the claims of
/// the golden docs selected by `subset` (a bitmask over the flattened claim
/// order)? The oracle starts from the entities the question leaks; a question
/// that names the answer outright is answerable with zero documents.
pub fn answerable_with(task: &Task, subset: u64) -> bool {
    let q_tokens = token_set(&task.question);
    if task
        .gold_answers
        .iter()
        .any(|a| q_tokens.contains(&a.to_lowercase()))
    {
        return true;
    }
    let known: Vec<&Claim> = task
        .hop_chain
        .claims()
        .enumerate()
        .filter(|(i, _)| subset & (1 << i) != 0)
        .map(|(_, c)| c)
        .collect();
    // Every branch's condition must be witnessed on its own: reaching the
    // answer along one branch does not establish that it satisfies the other
    // conditions.
    task.hop_chain.branches.iter().all(|branch| {
        let mut start = BTreeSet::new();
        let head = &branch[0].subject;
        if q_tokens.contains(&head.to_lowercase()) {
            start.insert(head.clone());
        }
        closure(&start, &known).contains(&task.hop_chain.answer_entity)
    })
}

/// Exhaustively confirm the task needs every golden document: all
/// `2^h - 1` subsets short of the full set (the empty set included) must be
/// unanswerable, and the full set answerable.
pub fn verify_min_hops(task: &Task, corpus: &Corpus) -> Result<bool, GenError> {
    for doc_id in &task.golden_doc_ids {
        if !corpus.contains(doc_id) {
            return Err(GenError::MissingGoldenDoc(doc_id.clone()));
        }
    }
    let h = task.hop_count();
    assert!(h < 64, "subset enumeration requires h < 64");
    let full: u64 = (1 << h) - 1;
    for subset in 0..full {
        if answerable_with(task, subset) {
            return Ok(false);
        }
    }
    Ok(answerable_with(task, full))
}

/// A complete generated dataset with its index.
#[derive(Debug, Clone)]
pub struct GeneratedSet {
    pub tasks: Vec<Task>,
    pub documents: Vec<Document>,
    pub corpus: Corpus,
}

/// Run the full pipeline: graph, per-task chain/documents/question, index,
/// then validate every construction guarantee (minimum hops, zero final-doc
/// overlap, one-shot retrieval failure).
pub fn generate_dataset(cfg: &GenConfig) -> Result<GeneratedSet, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut graph = build_claim_graph(cfg, &mut rng)?;
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    let mut documents = Vec::new();
    for _ in 0..cfg.n_tasks {
        let chain = sample_hop_chain(&mut graph, cfg.hops, &mut rng)?;
        documents.extend(render_documents(&mut graph, &chain, cfg, &mut rng)?);
        tasks.push(synthesize_task(&chain, cfg)?);
    }
    let corpus = Corpus::build_index(&documents)?;
    for task in &tasks {
        if !verify_min_hops(task, &corpus)? {
            return Err(GenError::VerificationFailed(task.task_id.clone()));
        }
        let q_tokens = token_set(&task.question);
        for doc_id in task.final_doc_ids() {
            let body = &corpus.get(&doc_id).expect("verified present").body;
            if !token_set(body).is_disjoint(&q_tokens) {
                return Err(GenError::QuestionOverlap {
                    task_id: task.task_id.clone(),
                    doc_id,
                });
            }
            let one_shot = corpus.retrieve(&task.question, DEFAULT_TOP_K);
            if one_shot.id_set().contains(&doc_id) {
                return Err(GenError::OneShotLeak {
                    task_id: task.task_id.clone(),
                    doc_id,
                });
            }
        }
    }
    Ok(GeneratedSet {
        tasks,
        documents,
        corpus,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct HopRecord {
    subject: String,
    relation: usize,
    object: String,
    doc_id: String,
    branch: usize,
}

/// Wire form of [`Task`] for the tasks JSONL file.
#[derive(Debug, Serialize, Deserialize)]
struct TaskRecord {
    task_id: String,
    question: String,
    gold_answers: Vec<String>,
    golden_doc_ids: Vec<String>,
    hops: Vec<HopRecord>,
    seed: u64,
}

impl From<&Task> for TaskRecord {
    fn from(task: &Task) -> Self {
        let mut hops = Vec::new();
        for (b, branch) in task.hop_chain.branches.iter().enumerate() {
            for claim in branch {
                hops.push(HopRecord {
                    subject: claim.subject.clone(),
                    relation: claim.relation,
                    object: claim.object.clone(),
                    doc_id: golden_doc_id(claim),
                    branch: b,
                });
            }
        }
        TaskRecord {
            task_id: task.task_id.clone(),
            question: task.question.clone(),
            gold_answers: task.gold_answers.clone(),
            golden_doc_ids: task.golden_doc_ids.clone(),
            hops,
            seed: task.created_seed,
        }
    }
}

impl TaskRecord {
    fn into_task(self, line: usize) -> Result<Task, GenError> {
        let mut branches: Vec<Vec<Claim>> = Vec::new();
        for hop in &self.hops {
            if hop.relation >= RELATIONS.len() {
                return Err(GenError::MalformedTask {
                    line,
                    msg: format!("relation index {} out of range", hop.relation),
                });
            }
            let id = hop.doc_id.trim_start_matches(|c: char| !c.is_ascii_digit());
            let id: usize = id.parse().map_err(|_| GenError::MalformedTask {
                line,
                msg: format!("doc_id `{}` has no numeric suffix", hop.doc_id),
            })?;
            if hop.branch >= branches.len() {
                branches.resize_with(hop.branch + 1, Vec::new);
            }
            branches[hop.branch].push(Claim {
                id,
                subject: hop.subject.clone(),
                relation: hop.relation,
                object: hop.object.clone(),
            });
        }
        let answer = self
            .gold_answers
            .first()
            .ok_or_else(|| GenError::MalformedTask {
                line,
                msg: "gold_answers is empty".into(),
            })?
            .clone();
        let chain = HopChain {
            branches,
            answer_entity: answer,
        };
        chain.validate().map_err(|e| GenError::MalformedTask {
            line,
            msg: e.to_string(),
        })?;
        let task = Task {
            task_id: self.task_id,
            question: self.question,
            gold_answers: self.gold_answers,
            golden_doc_ids: self.golden_doc_ids,
            hop_chain: chain,
            created_seed: self.seed,
        };
        if task.golden_doc_ids.len() != task.hop_count() {
            return Err(GenError::MalformedTask {
                line,
                msg: "golden_doc_ids and hops disagree".into(),
            });
        }
        Ok(task)
    }
}

/// Write `corpus.jsonl` and `tasks.jsonl` under `dir`. Re-exporting the same
/// generated set produces byte-identical files.
pub fn export_dataset(
    tasks: &[Task],
    documents: &[Document],
    dir: &Path,
) -> Result<(PathBuf, PathBuf), GenError> {
    std::fs::create_dir_all(dir)?;
    let corpus_path = dir.join("corpus.jsonl");
    let tasks_path = dir.join("tasks.jsonl");
    let mut out = std::fs::File::create(&corpus_path)?;
    for doc in documents {
        writeln!(
            out,
            "{}",
            serde_json::to_string(doc).expect("documents serialize")
        )?;
    }
    let mut out = std::fs::File::create(&tasks_path)?;
    for task in tasks {
        writeln!(
            out,
            "{}",
            serde_json::to_string(&TaskRecord::from(task)).expect("tasks serialize")
        )?;
    }
    Ok((corpus_path, tasks_path))
}

/// Read a tasks JSONL file back into [`Task`]s.
pub fn load_tasks(path: &Path) -> Result<Vec<Task>, GenError> {
    let file = std::fs::File::open(path)?;
    let mut tasks = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TaskRecord =
            serde_json::from_str(&line).map_err(|e| GenError::MalformedTask {
                line: i + 1,
                msg: e.to_string(),
            })?;
        tasks.push(record.into_task(i + 1)?);
    }
    Ok(tasks)
}
