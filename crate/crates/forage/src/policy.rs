//! Log-linear policy over environment actions, plus the line-protocol bridge
//! for driving episodes with an external decision process.
//!
//! The policy scores each legal action with a dot product between a fixed
//! 8-dimensional feature map and a learned weight vector, then samples from
//! the softmax. A separate 4-dimensional linear head estimates state value
//! for the baseline. Features shared by every action in a state (bias, step
//! fraction, coverage) cancel inside the softmax; the discriminating signals
//! are the action's overlap with the question, its overlap with already
//! gathered facts, and whether its entity argument is fresh.

use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::token_set;
use crate::env::{Action, ActionChooser, Chosen, EnvError, EnvState};
use crate::trajectory::serialize_trajectory;

/// Length of the per-action feature vector.
pub const FEATURE_DIM: usize = 8;
/// Length of the state-value feature vector.
pub const VALUE_FEATURE_DIM: usize = 4;
/// Bumped whenever the feature maps change meaning; saved parameters carry it
/// so stale files are rejected instead of silently misread.
pub const FEATURE_VERSION: u32 = 1;
/// How long to wait for an external policy's reply.
pub const DEFAULT_WIRE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("parameter file has feature version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("parameter file has {name} of length {found}, expected {expected}")]
    DimensionMismatch {
        name: &'static str,
        found: usize,
        expected: usize,
    },
    #[error("external policy sent no reply within {0:?}")]
    Timeout(Duration),
    #[error("external policy process exited or closed its output")]
    ChildExited,
    #[error("external policy sent a malformed reply: {0}")]
    Malformed(String),
    #[error("external policy chose index {got} but only {len} actions were offered")]
    IndexOutOfRange { got: usize, len: usize },
    #[error("failed to start external policy `{command}`: {source}")]
    Spawn {
        command: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<PolicyError> for EnvError {
    fn from(e: PolicyError) -> Self {
        EnvError::Chooser(e.to_string())
    }
}

/// Policy weights `theta` (action scoring) and value weights `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub feature_version: u32,
    pub theta: Vec<f64>,
    pub w: Vec<f64>,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            feature_version: FEATURE_VERSION,
            theta: vec![0.0; FEATURE_DIM],
            w: vec![0.0; VALUE_FEATURE_DIM],
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.feature_version != FEATURE_VERSION {
            return Err(PolicyError::VersionMismatch {
                found: self.feature_version,
                expected: FEATURE_VERSION,
            });
        }
        if self.theta.len() != FEATURE_DIM {
            return Err(PolicyError::DimensionMismatch {
                name: "theta",
                found: self.theta.len(),
                expected: FEATURE_DIM,
            });
        }
        if self.w.len() != VALUE_FEATURE_DIM {
            return Err(PolicyError::DimensionMismatch {
                name: "w",
                found: self.w.len(),
                expected: VALUE_FEATURE_DIM,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)?;
        let params: PolicyParams = serde_json::from_str(&text)?;
        params.validate()?;
        Ok(params)
    }
}

/// The text an action contributes to a query or answer: the rendered search
/// query, or the bare answer entity.
fn action_text(state: &EnvState, action: &Action) -> String {
    match action {
        Action::Search { template, entity } => state.query_string(*template, entity),
        Action::Answer { entity } => entity.clone(),
    }
}

fn overlap_fraction(text: &str, reference: &std::collections::BTreeSet<String>) -> f64 {
    let tokens = token_set(text);
    if tokens.is_empty() {
        return 0.0;
    }
    let hits = tokens.iter().filter(|t| reference.contains(*t)).count();
    hits as f64 / tokens.len() as f64
}

/// Per-action features:
/// 0 bias, 1 is-search, 2 overlap of the action text with the question,
/// 3 overlap with tokens of already gathered facts, 4 entity-argument
/// freshness (never used in a query yet), 5 step fraction, 6 answering with
/// the newest discovery, 7 current coverage.
pub fn featurize(state: &EnvState, action: &Action) -> [f64; FEATURE_DIM] {
    let text = action_text(state, action);
    let is_search = if action.is_search() { 1.0 } else { 0.0 };
    let novelty = if state.queried_entities().contains(action.entity()) {
        0.0
    } else {
        1.0
    };
    let answers_frontier = match action {
        Action::Answer { entity } if entity == state.frontier_entity() => 1.0,
        _ => 0.0,
    };
    [
        1.0,
        is_search,
        overlap_fraction(&text, state.question_tokens()),
        overlap_fraction(&text, state.claim_tokens()),
        novelty,
        state.step as f64 / state.max_steps as f64,
        answers_frontier,
        state.coverage_now(),
    ]
}

/// State-value features: bias, step fraction, coverage, and how much of the
/// plausible entity budget has been discovered.
pub fn state_features(state: &EnvState) -> [f64; VALUE_FEATURE_DIM] {
    let budget = (2 * state.max_steps + 2) as f64;
    [
        1.0,
        state.step as f64 / state.max_steps as f64,
        state.coverage_now(),
        state.discovered_entities.len() as f64 / budget,
    ]
}

/// Feature vectors for every legal action, in the legal-action order.
pub fn features_matrix(state: &EnvState, legal: &[Action]) -> Vec<[f64; FEATURE_DIM]> {
    legal.iter().map(|a| featurize(state, a)).collect()
}

/// Raw scores `theta . phi` for a feature matrix.
pub fn scores(theta: &[f64], feats: &[[f64; FEATURE_DIM]]) -> Vec<f64> {
    feats
        .iter()
        .map(|phi| phi.iter().zip(theta).map(|(a, b)| a * b).sum())
        .collect()
}

/// Numerically stable softmax: subtract the max score before exponentiating.
/// Returns probabilities and log-probabilities.
pub fn softmax_from_scores(scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert!(!scores.is_empty(), "softmax over an empty action set");
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_sum = max + sum.ln();
    let probs = exps.iter().map(|e| e / sum).collect();
    let log_probs = scores.iter().map(|z| z - log_sum).collect();
    (probs, log_probs)
}

/// Action distribution under `params` in `state`.
pub fn action_distribution(
    params: &PolicyParams,
    state: &EnvState,
    legal: &[Action],
) -> (Vec<f64>, Vec<f64>) {
    let feats = features_matrix(state, legal);
    softmax_from_scores(&scores(&params.theta, &feats))
}

/// Linear state-value estimate `w . psi`.
pub fn value_estimate(params: &PolicyParams, state: &EnvState) -> f64 {
    state_features(state)
        .iter()
        .zip(&params.w)
        .map(|(a, b)| a * b)
        .sum()
}

/// Sample an action index by inverse CDF over the softmax.
pub fn sample_action<R: Rng>(
    params: &PolicyParams,
    state: &EnvState,
    legal: &[Action],
    rng: &mut R,
) -> Chosen {
    let (probs, log_probs) = action_distribution(params, state, legal);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut index = probs.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            index = i;
            break;
        }
    }
    Chosen {
        index,
        log_prob: log_probs[index],
        value: value_estimate(params, state),
    }
}

/// Highest-probability action; ties break toward the earliest legal action.
pub fn greedy_action(params: &PolicyParams, state: &EnvState, legal: &[Action]) -> Chosen {
    let (probs, log_probs) = action_distribution(params, state, legal);
    let mut index = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[index] {
            index = i;
        }
    }
    Chosen {
        index,
        log_prob: log_probs[index],
        value: value_estimate(params, state),
    }
}

/// Gradient of `log pi(chosen)` with respect to `theta`: the chosen action's
/// features minus the probability-weighted feature mean.
pub fn log_prob_grad(
    theta: &[f64],
    feats: &[[f64; FEATURE_DIM]],
    chosen: usize,
) -> [f64; FEATURE_DIM] {
    let (probs, _) = softmax_from_scores(&scores(theta, feats));
    let mut grad = feats[chosen];
    for (p, phi) in probs.iter().zip(feats) {
        for (g, f) in grad.iter_mut().zip(phi) {
            *g -= p * f;
        }
    }
    grad
}

/// Samples from the softmax policy.
pub struct SamplingChooser<'a, R: Rng> {
    pub params: &'a PolicyParams,
    pub rng: &'a mut R,
}

impl<R: Rng> ActionChooser for SamplingChooser<'_, R> {
    fn choose(&mut self, state: &EnvState, legal: &[Action]) -> Result<Chosen, EnvError> {
        Ok(sample_action(self.params, state, legal, self.rng))
    }
}

/// Always takes the argmax action.
pub struct GreedyChooser<'a> {
    pub params: &'a PolicyParams,
}

impl ActionChooser for GreedyChooser<'_> {
    fn choose(&mut self, state: &EnvState, legal: &[Action]) -> Result<Chosen, EnvError> {
        Ok(greedy_action(self.params, state, legal))
    }
}

/// Uniform-random baseline.
pub struct RandomChooser<'a, R: Rng> {
    pub rng: &'a mut R,
}

impl<R: Rng> ActionChooser for RandomChooser<'_, R> {
    fn choose(&mut self, _state: &EnvState, legal: &[Action]) -> Result<Chosen, EnvError> {
        let index = self.rng.gen_range(0..legal.len());
        Ok(Chosen {
            index,
            log_prob: -(legal.len() as f64).ln(),
            value: 0.0,
        })
    }
}

/// One decision request on the wire: newline-delimited JSON, one object per
/// line, answered by one `WireResponse` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub episode_id: String,
    pub step: usize,
    pub question: String,
    pub trajectory_text: String,
    pub actions: Vec<WireAction>,
}

/// An offered action: `kind` is `search` or `answer`, `payload` the rendered
/// query or the answer entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireAction {
    pub kind: String,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub action_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_prob: Option<f64>,
}

pub fn wire_actions(state: &EnvState, legal: &[Action]) -> Vec<WireAction> {
    legal
        .iter()
        .map(|a| WireAction {
            kind: match a {
                Action::Search { .. } => "search".to_string(),
                Action::Answer { .. } => "answer".to_string(),
            },
            payload: action_text(state, a),
        })
        .collect()
}

/// Drives decisions through a child process (or any line stream): writes one
/// request line, waits up to the timeout for one response line. A reader
/// thread owns the child's stdout so the wait can actually time out.
pub struct ExternalPolicy {
    writer: Box<dyn IoWrite + Send>,
    lines: mpsc::Receiver<std::io::Result<String>>,
    child: Option<Child>,
    timeout: Duration,
}

impl ExternalPolicy {
    /// Launch `command` (split on whitespace) and speak the protocol over its
    /// stdin/stdout.
    pub fn spawn(command: &str) -> Result<Self, PolicyError> {
        let parts: Vec<&str> = command.split_whitespace().collect();
        let (prog, args) = parts
            .split_first()
            .ok_or_else(|| PolicyError::Malformed("empty policy command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|source| PolicyError::Spawn {
                command: command.to_string(),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ExternalPolicy {
            writer: Box::new(stdin),
            lines: rx,
            child: Some(child),
            timeout: DEFAULT_WIRE_TIMEOUT,
        })
    }

    /// Speak the protocol over a TCP connection.
    pub fn connect(addr: &str) -> Result<Self, PolicyError> {
        let stream = std::net::TcpStream::connect(addr)?;
        let reader_half = stream.try_clone()?;
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(reader_half);
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ExternalPolicy {
            writer: Box::new(stream),
            lines: rx,
            child: None,
            timeout: DEFAULT_WIRE_TIMEOUT,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Send one request and validate the reply's index against `n_actions`.
    pub fn ask(
        &mut self,
        request: &WireRequest,
        n_actions: usize,
    ) -> Result<WireResponse, PolicyError> {
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(text)) => text,
            Ok(Err(e)) => return Err(PolicyError::Io(e)),
            Err(mpsc::RecvTimeoutError::Timeout) => return Err(PolicyError::Timeout(self.timeout)),
            Err(mpsc::RecvTimeoutError::Disconnected) => return Err(PolicyError::ChildExited),
        };
        let response: WireResponse = serde_json::from_str(&reply)
            .map_err(|e| PolicyError::Malformed(format!("{e}: `{reply}`")))?;
        if response.action_index >= n_actions {
            return Err(PolicyError::IndexOutOfRange {
                got: response.action_index,
                len: n_actions,
            });
        }
        Ok(response)
    }
}

impl Drop for ExternalPolicy {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl ActionChooser for ExternalPolicy {
    fn choose(&mut self, state: &EnvState, legal: &[Action]) -> Result<Chosen, EnvError> {
        let trajectory = crate::env::trajectory_of(state);
        let trajectory_text = if trajectory.blocks.is_empty() {
            String::new()
        } else {
            serialize_trajectory(&trajectory).map_err(|e| EnvError::Chooser(e.to_string()))?
        };
        let request = WireRequest {
            episode_id: state.task_id.clone(),
            step: state.step,
            question: state.question.clone(),
            trajectory_text,
            actions: wire_actions(state, legal),
        };
        let response = self.ask(&request, legal.len())?;
        Ok(Chosen {
            index: response.action_index,
            log_prob: response.log_prob.unwrap_or(0.0),
            value: 0.0,
        })
    }
}
