//! Document store with Okapi BM25 retrieval and golden-set coverage.
//!
//! Tokenization is deliberately blunt: lowercase, split on runs of
//! non-alphanumeric characters, drop empties. The same tokenizer is shared by
//! indexing, query processing, task generation, and policy features so that
//! lexical overlap means the same thing everywhere.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// BM25 term-frequency saturation constant.
pub const BM25_K1: f64 = 1.2;
/// BM25 length-normalization constant.
pub const BM25_B: f64 = 0.75;
/// Default number of documents returned per query.
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),
    #[error("document `{0}` has an empty body")]
    EmptyBody(String),
    #[error("unknown doc_id `{0}`")]
    UnknownDocId(String),
    #[error("coverage is undefined for an empty golden set")]
    EmptyGoldenSet,
    #[error("corpus file line {line}: {source}")]
    MalformedLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One retrievable unit. `is_distractor` marks documents that verbalize
/// off-chain claims; golden evidence documents carry `false`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub is_distractor: bool,
}

/// Lowercased tokens of `text`, split on non-alphanumeric runs, empties dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

/// Unique tokens of `text` (see [`tokenize`]).
pub fn token_set(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().collect()
}

/// Ranked retrieval output: `(doc_id, score)` pairs, best first, ties broken
/// by ascending `doc_id`. Only documents matching at least one query term
/// appear, so `ranked.len() <= k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query: String,
    pub k: usize,
    pub ranked: Vec<(String, f64)>,
}

impl RetrievalResult {
    /// Document ids in rank order.
    pub fn doc_ids(&self) -> Vec<String> {
        self.ranked.iter().map(|(id, _)| id.clone()).collect()
    }

    /// Document ids as a set (K_t in the environment's bookkeeping).
    pub fn id_set(&self) -> BTreeSet<String> {
        self.ranked.iter().map(|(id, _)| id.clone()).collect()
    }
}

/// Inverted index over a document collection. Construction is deterministic:
/// all internal maps are ordered, so two corpora built from the same documents
/// (in any input order) are identical.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    documents: BTreeMap<String, Document>,
    /// term -> doc_id -> term frequency in that document's body.
    postings: BTreeMap<String, BTreeMap<String, u32>>,
    doc_lengths: BTreeMap<String, usize>,
    avg_doc_length: f64,
}

impl Corpus {
    /// Build an index over `docs`. Titles are display metadata; only bodies
    /// are tokenized and searchable.
    pub fn build_index(docs: &[Document]) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        for doc in docs {
            if corpus.documents.contains_key(&doc.doc_id) {
                return Err(CorpusError::DuplicateDocId(doc.doc_id.clone()));
            }
            let tokens = tokenize(&doc.body);
            if tokens.is_empty() {
                return Err(CorpusError::EmptyBody(doc.doc_id.clone()));
            }
            corpus.doc_lengths.insert(doc.doc_id.clone(), tokens.len());
            for term in tokens {
                *corpus
                    .postings
                    .entry(term)
                    .or_default()
                    .entry(doc.doc_id.clone())
                    .or_insert(0) += 1;
            }
            corpus.documents.insert(doc.doc_id.clone(), doc.clone());
        }
        let total: usize = corpus.doc_lengths.values().sum();
        corpus.avg_doc_length = if corpus.documents.is_empty() {
            0.0
        } else {
            total as f64 / corpus.documents.len() as f64
        };
        Ok(corpus)
    }

    /// Number of indexed documents.
    pub fn n_docs(&self) -> usize {
        self.documents.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<usize> {
        self.doc_lengths.get(doc_id).copied()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.documents.get(doc_id)
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.documents.contains_key(doc_id)
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.values()
    }

    /// Number of documents containing `term`.
    pub fn doc_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, |m| m.len())
    }

    /// Okapi BM25 score of `doc_id` for `query`, summed over the query's
    /// unique terms with `IDF = ln((N - n_t + 0.5) / (n_t + 0.5) + 1)`.
    /// Terms absent from the document contribute zero.
    pub fn bm25_score(&self, query: &str, doc_id: &str) -> Result<f64, CorpusError> {
        if !self.documents.contains_key(doc_id) {
            return Err(CorpusError::UnknownDocId(doc_id.to_string()));
        }
        let n = self.documents.len() as f64;
        let dl = self.doc_lengths[doc_id] as f64;
        let mut score = 0.0;
        for term in token_set(query) {
            let Some(postings) = self.postings.get(&term) else {
                continue;
            };
            let Some(&tf) = postings.get(doc_id) else {
                continue;
            };
            let n_t = postings.len() as f64;
            let idf = ((n - n_t + 0.5) / (n_t + 0.5) + 1.0).ln();
            let tf = tf as f64;
            let denom = tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / self.avg_doc_length);
            score += idf * tf * (BM25_K1 + 1.0) / denom;
        }
        Ok(score)
    }

    /// Top-`k` documents for `query` by BM25 score, ties broken by ascending
    /// `doc_id`. Documents sharing no term with the query are never returned,
    /// so an empty (or fully out-of-vocabulary) query yields an empty result.
    pub fn retrieve(&self, query: &str, k: usize) -> RetrievalResult {
        let mut candidates: BTreeSet<&String> = BTreeSet::new();
        for term in token_set(query) {
            if let Some(postings) = self.postings.get(&term) {
                candidates.extend(postings.keys());
            }
        }
        let mut scored: Vec<(String, f64)> = candidates
            .into_iter()
            .map(|id| {
                let score = self
                    .bm25_score(query, id)
                    .expect("candidate ids come from the index");
                (id.clone(), score)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("BM25 scores are finite")
                .then_with(|| a.0.cmp(&b.0))
        });
        scored.truncate(k);
        RetrievalResult {
            query: query.to_string(),
            k,
            ranked: scored,
        }
    }

    /// Write one JSON document per line, in ascending `doc_id` order.
    pub fn save_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = std::fs::File::create(path)?;
        for doc in self.documents.values() {
            serde_json::to_writer(&mut out, doc).map_err(|e| CorpusError::MalformedLine {
                line: 0,
                source: e,
            })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Read a JSONL document file (one [`Document`] per line) and index it.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                line: i + 1,
                source: e,
            })?;
        docs.push(doc);
    }
    Corpus::build_index(&docs)
}

/// Recall of `golden` within `retrieved`: `|retrieved ∩ golden| / |golden|`.
/// The golden set must be nonempty.
pub fn coverage(
    retrieved: &BTreeSet<String>,
    golden: &BTreeSet<String>,
) -> Result<f64, CorpusError> {
    if golden.is_empty() {
        return Err(CorpusError::EmptyGoldenSet);
    }
    let hit = golden.iter().filter(|id| retrieved.contains(*id)).count();
    Ok(hit as f64 / golden.len() as f64)
}
