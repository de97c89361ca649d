//! Tagged reasoning trajectories: `(Think? Search Info)* Think? Answer`.
//!
//! A trajectory serializes to a string of `<think>`, `<search>`, `<info>` and
//! `<answer>` blocks joined by single newlines. Info blocks are emitted by the
//! environment, never by the model, so the loss mask marks each rendered info
//! region — including its leading separator newline and both tags — as
//! injected; every other character is model-generated.
//!
//! Parsing is strict: non-whitespace text outside tags, interleaved tags,
//! unclosed tags, and grammar violations are all errors. `parse ∘ serialize`
//! is the identity on grammar-valid trajectories, and `serialize ∘ parse` is
//! idempotent on accepted input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The alternate info tag accepted when [`TagFormat::accept_evidence`] is set.
/// Some prompt variants label injected passages `<evidence>` instead of
/// `<info>`; the compatibility flag lets both be read back.
pub const EVIDENCE_TAG: &str = "evidence";

const THINK: &str = "think";
const SEARCH: &str = "search";
const INFO: &str = "info";
const ANSWER: &str = "answer";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrajectoryError {
    #[error("Search without Info at block {0}")]
    SearchWithoutInfo(usize),
    #[error("Info without preceding Search at block {0}")]
    InfoWithoutSearch(usize),
    #[error("empty search query at block {0}")]
    EmptySearchQuery(usize),
    #[error("missing final Answer block")]
    MissingAnswer,
    #[error("block {0} follows the Answer block")]
    BlockAfterAnswer(usize),
    #[error("consecutive Think blocks at block {0}")]
    ConsecutiveThink(usize),
    #[error("block {0} text has leading or trailing whitespace")]
    UntrimmedText(usize),
    #[error("block {0} text contains a reserved tag literal")]
    TagLiteralInText(usize),
    #[error("block {0}: doc ids disagree with the rendered `[doc_id]` lines")]
    DocIdMismatch(usize),
    #[error("block {0}: duplicate doc id within the info block")]
    DuplicateDocId(usize),
    #[error("block {0}: only Info blocks may carry doc ids")]
    UnexpectedDocIds(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("unexpected text outside tags at offset {0}")]
    TextOutsideTags(usize),
    #[error("unknown tag at offset {0}")]
    UnknownTag(usize),
    #[error("unclosed <{tag}> opened at offset {offset}")]
    UnclosedTag { tag: String, offset: usize },
    #[error("interleaved tag inside <{tag}> region at offset {offset}")]
    InterleavedTag { tag: String, offset: usize },
    #[error(transparent)]
    Invalid(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Think,
    Search,
    Info,
    Answer,
}

impl BlockKind {
    fn tag(self) -> &'static str {
        match self {
            BlockKind::Think => THINK,
            BlockKind::Search => SEARCH,
            BlockKind::Info => INFO,
            BlockKind::Answer => ANSWER,
        }
    }
}

/// One tagged region. `doc_ids` is populated for Info blocks only and always
/// mirrors the `[doc_id]` line prefixes of `text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub doc_ids: Vec<String>,
}

impl Block {
    pub fn think(text: impl Into<String>) -> Self {
        Block {
            kind: BlockKind::Think,
            text: text.into().trim().to_string(),
            doc_ids: Vec::new(),
        }
    }

    pub fn search(query: impl Into<String>) -> Self {
        Block {
            kind: BlockKind::Search,
            text: query.into().trim().to_string(),
            doc_ids: Vec::new(),
        }
    }

    pub fn answer(text: impl Into<String>) -> Self {
        Block {
            kind: BlockKind::Answer,
            text: text.into().trim().to_string(),
            doc_ids: Vec::new(),
        }
    }

    /// Build an Info block from `(doc_id, text)` pairs, rendering each
    /// document as a `[doc_id] text` line.
    pub fn info<'a>(docs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut lines = Vec::new();
        let mut ids = Vec::new();
        for (id, text) in docs {
            lines.push(format!("[{id}] {}", text.trim()));
            ids.push(id.to_string());
        }
        Block {
            kind: BlockKind::Info,
            text: lines.join("\n"),
            doc_ids: ids,
        }
    }
}

/// Extract the `[doc_id]` prefixes of an info region's lines, in order.
fn extract_doc_ids(text: &str) -> Vec<String> {
    let mut ids = Vec::new();
    for line in text.lines() {
        let line = line.trim_start();
        if let Some(rest) = line.strip_prefix('[') {
            if let Some(end) = rest.find(']') {
                let id = &rest[..end];
                if !id.is_empty() {
                    ids.push(id.to_string());
                }
            }
        }
    }
    ids
}

/// A full reasoning episode. `question` travels alongside the blocks for
/// logging; it is not part of the serialized tag format.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub question: String,
    pub blocks: Vec<Block>,
}

impl Trajectory {
    pub fn new(question: impl Into<String>, blocks: Vec<Block>) -> Self {
        Trajectory {
            question: question.into(),
            blocks,
        }
    }

    /// Number of Search blocks.
    pub fn search_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.kind == BlockKind::Search)
            .count()
    }

    /// Reasoning-step count `T`: one per search plus one for the answer.
    pub fn search_step_count(&self) -> usize {
        self.search_count() + 1
    }

    /// Check the block grammar `(Think? Search Info)* Think? Answer` plus
    /// per-block well-formedness, reporting the first offending block index.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let mut answered: Option<usize> = None;
        let mut pending_search: Option<usize> = None;
        let mut prev_think = false;
        for (i, block) in self.blocks.iter().enumerate() {
            if answered.is_some() {
                return Err(TrajectoryError::BlockAfterAnswer(i));
            }
            if block.text != block.text.trim() {
                return Err(TrajectoryError::UntrimmedText(i));
            }
            if contains_tag_literal(&block.text) {
                return Err(TrajectoryError::TagLiteralInText(i));
            }
            if block.kind != BlockKind::Info && !block.doc_ids.is_empty() {
                return Err(TrajectoryError::UnexpectedDocIds(i));
            }
            match block.kind {
                BlockKind::Think => {
                    if let Some(s) = pending_search {
                        return Err(TrajectoryError::SearchWithoutInfo(s));
                    }
                    if prev_think {
                        return Err(TrajectoryError::ConsecutiveThink(i));
                    }
                    prev_think = true;
                }
                BlockKind::Search => {
                    if let Some(s) = pending_search {
                        return Err(TrajectoryError::SearchWithoutInfo(s));
                    }
                    if block.text.is_empty() {
                        return Err(TrajectoryError::EmptySearchQuery(i));
                    }
                    pending_search = Some(i);
                    prev_think = false;
                }
                BlockKind::Info => {
                    if pending_search.is_none() {
                        return Err(TrajectoryError::InfoWithoutSearch(i));
                    }
                    if block.doc_ids != extract_doc_ids(&block.text) {
                        return Err(TrajectoryError::DocIdMismatch(i));
                    }
                    let mut seen = std::collections::BTreeSet::new();
                    for id in &block.doc_ids {
                        if !seen.insert(id) {
                            return Err(TrajectoryError::DuplicateDocId(i));
                        }
                    }
                    pending_search = None;
                    prev_think = false;
                }
                BlockKind::Answer => {
                    if let Some(s) = pending_search {
                        return Err(TrajectoryError::SearchWithoutInfo(s));
                    }
                    answered = Some(i);
                }
            }
        }
        if let Some(s) = pending_search {
            return Err(TrajectoryError::SearchWithoutInfo(s));
        }
        if answered.is_none() {
            return Err(TrajectoryError::MissingAnswer);
        }
        Ok(())
    }
}

fn contains_tag_literal(text: &str) -> bool {
    const TAGS: [&str; 5] = [THINK, SEARCH, INFO, ANSWER, EVIDENCE_TAG];
    TAGS.iter().any(|t| {
        text.contains(&format!("<{t}>")) || text.contains(&format!("</{t}>"))
    })
}

/// Tag naming options. The info tag is configurable so trajectories can be
/// written (and read back) in the `<evidence>` style used by some prompts.
#[derive(Debug, Clone)]
pub struct TagFormat {
    /// Tag used when serializing Info blocks.
    pub info_tag: String,
    /// Accept `<evidence>` as an alias for the info tag when parsing.
    pub accept_evidence: bool,
}

impl Default for TagFormat {
    fn default() -> Self {
        TagFormat {
            info_tag: INFO.to_string(),
            accept_evidence: false,
        }
    }
}

impl TagFormat {
    pub fn evidence_compat() -> Self {
        TagFormat {
            info_tag: INFO.to_string(),
            accept_evidence: true,
        }
    }
}

/// Serialize with the default `<info>` tag. Fails if the trajectory violates
/// the grammar.
pub fn serialize_trajectory(traj: &Trajectory) -> Result<String, TrajectoryError> {
    serialize_trajectory_with(traj, &TagFormat::default())
}

/// Serialize, naming info regions with `fmt.info_tag`. Blocks are wrapped in
/// literal tags and joined by single newlines.
pub fn serialize_trajectory_with(
    traj: &Trajectory,
    fmt: &TagFormat,
) -> Result<String, TrajectoryError> {
    traj.validate()?;
    let rendered: Vec<String> = traj
        .blocks
        .iter()
        .map(|b| {
            let tag = match b.kind {
                BlockKind::Info => fmt.info_tag.as_str(),
                other => other.tag(),
            };
            format!("<{tag}>{}</{tag}>", b.text)
        })
        .collect();
    Ok(rendered.join("\n"))
}

/// Parse a serialized trajectory with the default tag set.
pub fn parse_trajectory(text: &str) -> Result<Trajectory, ParseError> {
    parse_trajectory_with(text, &TagFormat::default())
}

/// Parse a serialized trajectory. Whitespace between blocks is tolerated and
/// normalized away; anything else outside tags is an error. The returned
/// trajectory has an empty `question` (the text format does not carry it).
pub fn parse_trajectory_with(text: &str, fmt: &TagFormat) -> Result<Trajectory, ParseError> {
    let bytes = text.as_bytes();
    let mut pos = 0usize;
    let mut blocks = Vec::new();
    while pos < bytes.len() {
        // Skip inter-block whitespace.
        if bytes[pos].is_ascii_whitespace() {
            pos += 1;
            continue;
        }
        if bytes[pos] != b'<' {
            return Err(ParseError::TextOutsideTags(pos));
        }
        let rest = &text[pos..];
        let Some(close_angle) = rest.find('>') else {
            return Err(ParseError::UnknownTag(pos));
        };
        let tag = &rest[1..close_angle];
        let kind = match tag {
            THINK => BlockKind::Think,
            SEARCH => BlockKind::Search,
            ANSWER => BlockKind::Answer,
            t if t == fmt.info_tag => BlockKind::Info,
            EVIDENCE_TAG if fmt.accept_evidence => BlockKind::Info,
            _ => return Err(ParseError::UnknownTag(pos)),
        };
        let closing = format!("</{tag}>");
        let content_start = pos + close_angle + 1;
        let Some(rel_end) = text[content_start..].find(&closing) else {
            return Err(ParseError::UnclosedTag {
                tag: tag.to_string(),
                offset: pos,
            });
        };
        let content = text[content_start..content_start + rel_end].trim();
        if contains_tag_literal(content) {
            return Err(ParseError::InterleavedTag {
                tag: tag.to_string(),
                offset: pos,
            });
        }
        let block = match kind {
            BlockKind::Info => Block {
                kind: BlockKind::Info,
                text: content.to_string(),
                doc_ids: extract_doc_ids(content),
            },
            BlockKind::Think => Block::think(content),
            BlockKind::Search => Block::search(content),
            BlockKind::Answer => Block::answer(content),
        };
        blocks.push(block);
        pos = content_start + rel_end + closing.len();
    }
    let traj = Trajectory {
        question: String::new(),
        blocks,
    };
    traj.validate()?;
    Ok(traj)
}

/// Origin of a character span in the serialized trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOrigin {
    ModelGenerated,
    Injected,
}

/// Half-open character span `[start, end)` with a single origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpan {
    pub start: usize,
    pub end: usize,
    pub origin: MaskOrigin,
}

/// Loss mask over the serialized form of `traj`: maximal spans, in order,
/// exactly partitioning `[0, len)`. Each rendered info region — its leading
/// separator newline, both tags, and the content — is injected; everything
/// else is model-generated.
pub fn compute_loss_mask(traj: &Trajectory) -> Result<Vec<MaskSpan>, TrajectoryError> {
    compute_loss_mask_with(traj, &TagFormat::default())
}

pub fn compute_loss_mask_with(
    traj: &Trajectory,
    fmt: &TagFormat,
) -> Result<Vec<MaskSpan>, TrajectoryError> {
    traj.validate()?;
    let mut spans: Vec<MaskSpan> = Vec::new();
    let mut offset = 0usize;
    let mut push = |start: usize, end: usize, origin: MaskOrigin| {
        if start == end {
            return;
        }
        if let Some(last) = spans.last_mut() {
            if last.origin == origin && last.end == start {
                last.end = end;
                return;
            }
        }
        spans.push(MaskSpan { start, end, origin });
    };
    for (i, block) in traj.blocks.iter().enumerate() {
        let tag = match block.kind {
            BlockKind::Info => fmt.info_tag.as_str(),
            other => other.tag(),
        };
        let rendered_len = 2 * tag.len() + 5 + block.text.len(); // <tag>text</tag>
        let sep = usize::from(i > 0); // newline before every block but the first
        let origin = match block.kind {
            BlockKind::Info => MaskOrigin::Injected,
            _ => MaskOrigin::ModelGenerated,
        };
        // The separator newline belongs to whichever side emitted the block
        // that follows it: the environment for info regions, the model
        // otherwise.
        push(offset, offset + sep + rendered_len, origin);
        offset += sep + rendered_len;
    }
    Ok(spans)
}

/// Sidecar record pairing a trajectory with its loss mask, one JSON object
/// per line in episode logs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub question: String,
    pub blocks: Vec<Block>,
    pub mask_spans: Vec<MaskSpan>,
}

impl TrajectoryRecord {
    pub fn from_trajectory(traj: &Trajectory) -> Result<Self, TrajectoryError> {
        Ok(TrajectoryRecord {
            question: traj.question.clone(),
            blocks: traj.blocks.clone(),
            mask_spans: compute_loss_mask(traj)?,
        })
    }
}
