//! Foraging reward: outcome correctness, information gain, and an efficiency
//! penalty that discounts long episodes.
//!
//! The episode reward is `efficiency * (outcome + alpha * gain)` where
//! `efficiency = beta^max(0, T - 2)` and `T` counts reasoning steps (one per
//! search plus one for the answer). A two-step episode — the minimum for one
//! search and one answer — is never penalized. `gain` is the maximum of the
//! cumulative coverage curve, which for a monotone curve is its final value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("coverage curve decreases at index {0}")]
    DecreasingCurve(usize),
    #[error("coverage value {0} outside [0, 1]")]
    CoverageOutOfRange(f64),
    #[error("{field} must be in {range}, got {value}")]
    BadConfig {
        field: &'static str,
        range: &'static str,
        value: f64,
    },
}

/// How the final answer is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeMetric {
    #[default]
    ExactMatch,
    TokenF1,
}

/// Reward weights. `alpha` scales the information-gain term; `beta` is the
/// per-step efficiency discount.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub metric: OutcomeMetric,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 0.2,
            beta: 0.95,
            metric: OutcomeMetric::ExactMatch,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(RewardError::BadConfig {
                field: "alpha",
                range: "[0, inf)",
                value: self.alpha,
            });
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(RewardError::BadConfig {
                field: "beta",
                range: "(0, 1]",
                value: self.beta,
            });
        }
        Ok(())
    }
}

/// Normalize an answer for exact-match comparison: lowercase, strip
/// punctuation, collapse whitespace, drop leading articles (a/an/the).
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    let mut tokens: Vec<&str> = lowered.split_whitespace().collect();
    while let Some(first) = tokens.first() {
        if matches!(*first, "a" | "an" | "the") && tokens.len() > 1 {
            tokens.remove(0);
        } else {
            break;
        }
    }
    tokens.join(" ")
}

/// 1.0 if the normalized prediction equals any normalized gold answer.
pub fn exact_match(prediction: &str, golds: &[String]) -> f64 {
    let pred = normalize_answer(prediction);
    if golds.iter().any(|g| normalize_answer(g) == pred) {
        1.0
    } else {
        0.0
    }
}

fn f1_tokens(text: &str) -> Vec<String> {
    // Articles are kept here: F1 compares raw token multisets after case and
    // punctuation normalization, while exact match also strips leading
    // articles.
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn multiset_overlap(a: &[String], b: &[String]) -> usize {
    let mut counts = std::collections::BTreeMap::new();
    for t in a {
        *counts.entry(t.clone()).or_insert(0usize) += 1;
    }
    let mut overlap = 0;
    for t in b {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    overlap
}

/// Best token-level F1 of the prediction against any gold answer. Two empty
/// token sequences score 1.0; one empty side scores 0.0.
pub fn token_f1(prediction: &str, golds: &[String]) -> f64 {
    let pred = f1_tokens(prediction);
    let mut best = 0.0f64;
    for gold in golds {
        let gold = f1_tokens(gold);
        let score = if pred.is_empty() && gold.is_empty() {
            1.0
        } else if pred.is_empty() || gold.is_empty() {
            0.0
        } else {
            let overlap = multiset_overlap(&pred, &gold) as f64;
            if overlap == 0.0 {
                0.0
            } else {
                let p = overlap / pred.len() as f64;
                let r = overlap / gold.len() as f64;
                2.0 * p * r / (p + r)
            }
        };
        best = best.max(score);
    }
    best
}

/// Outcome reward `S` under the configured metric.
pub fn outcome_reward(prediction: &str, golds: &[String], metric: OutcomeMetric) -> f64 {
    match metric {
        OutcomeMetric::ExactMatch => exact_match(prediction, golds),
        OutcomeMetric::TokenF1 => token_f1(prediction, golds),
    }
}

/// Cumulative coverage after each retrieval step. Non-decreasing by
/// construction when built from growing unions of retrieved ids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub values: Vec<f64>,
}

impl CoverageCurve {
    pub fn new(values: Vec<f64>) -> Result<Self, RewardError> {
        let curve = CoverageCurve { values };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let mut prev = 0.0f64;
        for (i, &v) in self.values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(RewardError::CoverageOutOfRange(v));
            }
            if v < prev {
                return Err(RewardError::DecreasingCurve(i));
            }
            prev = v;
        }
        Ok(())
    }

    /// Final (= maximum) coverage, 0.0 for an episode with no searches.
    pub fn final_coverage(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }
}

/// Information-gain reward: the maximum cumulative coverage reached.
pub fn information_gain_reward(curve: &CoverageCurve) -> Result<f64, RewardError> {
    curve.validate()?;
    Ok(curve.final_coverage())
}

/// Efficiency penalty `beta^max(0, T - 2)`: free for episodes of at most two
/// reasoning steps, exponentially discounted beyond that.
pub fn efficiency_penalty(steps_t: usize, beta: f64) -> f64 {
    beta.powi(steps_t.saturating_sub(2) as i32)
}

/// Total episode reward `efficiency * (outcome + alpha * gain)`.
pub fn total_reward(outcome: f64, gain: f64, steps_t: usize, cfg: &RewardConfig) -> f64 {
    efficiency_penalty(steps_t, cfg.beta) * (outcome + cfg.alpha * gain)
}

/// The foraging objective `(S + alpha * C) * beta^T`, reported for analysis.
/// Unlike [`total_reward`] it discounts every step including the first two.
pub fn foraging_objective(outcome: f64, final_coverage: f64, steps_t: usize, cfg: &RewardConfig) -> f64 {
    (outcome + cfg.alpha * final_coverage) * cfg.beta.powi(steps_t as i32)
}

/// Full per-episode scoring record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub outcome: f64,
    pub gain: f64,
    pub efficiency: f64,
    pub total: f64,
    pub steps_t: usize,
    /// Gain weight the total was computed with; kept so the total can be
    /// decomposed later (for example into per-step shaped rewards).
    pub alpha: f64,
    pub curve: CoverageCurve,
}

impl RewardBreakdown {
    pub fn compute(
        outcome: f64,
        curve: CoverageCurve,
        steps_t: usize,
        cfg: &RewardConfig,
    ) -> Result<Self, RewardError> {
        cfg.validate()?;
        let gain = information_gain_reward(&curve)?;
        let efficiency = efficiency_penalty(steps_t, cfg.beta);
        Ok(RewardBreakdown {
            outcome,
            gain,
            efficiency,
            total: total_reward(outcome, gain, steps_t, cfg),
            steps_t,
            alpha: cfg.alpha,
            curve,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    #[test]
    fn normalize_strips_case_punctuation_and_leading_articles() {
        assert_eq!(normalize_answer("Novak Djokovic."), "novak djokovic");
        assert_eq!(normalize_answer("The  Answer!"), "answer");
        assert_eq!(normalize_answer("an apple"), "apple");
        assert_eq!(normalize_answer("a"), "a"); // lone article survives
        assert_eq!(normalize_answer(""), "");
    }

    #[test]
    fn exact_match_worked_values() {
        let golds = vec!["Novak Djokovic".to_string()];
        assert_eq!(exact_match("novak djokovic.", &golds), 1.0);
        assert_eq!(exact_match("", &vec!["x".to_string()]), 0.0);
        assert_eq!(exact_match("the answer", &vec!["answer".to_string()]), 1.0);
        assert_eq!(exact_match("answer", &golds), 0.0);
    }

    #[test]
    fn token_f1_worked_values() {
        assert_eq!(token_f1("exact same", &vec!["exact same".to_string()]), 1.0);
        assert_eq!(token_f1("one two", &vec!["three four".to_string()]), 0.0);
        // P = R = 1/2 on the shared token, so F1 = 1/2. Articles count as
        // ordinary tokens here.
        let f1 = token_f1("a b", &vec!["b c".to_string()]);
        assert!((f1 - 0.5).abs() < TOL, "f1 {f1}");
        // Best over multiple golds.
        let golds = vec!["x".to_string(), "a b".to_string()];
        assert_eq!(token_f1("a b", &golds), 1.0);
    }

    #[test]
    fn gain_is_max_of_curve() {
        let curve = CoverageCurve::new(vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]).unwrap();
        assert!((information_gain_reward(&curve).unwrap() - 2.0 / 3.0).abs() < TOL);
        assert_eq!(
            information_gain_reward(&CoverageCurve::default()).unwrap(),
            0.0
        );
    }

    #[test]
    fn decreasing_curve_is_an_error() {
        let err = CoverageCurve::new(vec![0.5, 0.4]).unwrap_err();
        assert_eq!(err, RewardError::DecreasingCurve(1));
    }

    #[test]
    fn efficiency_penalty_worked_values() {
        assert!((efficiency_penalty(2, 0.95) - 1.0).abs() < TOL);
        assert!((efficiency_penalty(1, 0.95) - 1.0).abs() < TOL);
        assert!((efficiency_penalty(4, 0.95) - 0.9025).abs() < TOL);
        assert!((efficiency_penalty(5, 0.95) - 0.857375).abs() < TOL);
    }

    #[test]
    fn total_reward_worked_values() {
        let cfg = RewardConfig::default();
        assert!((total_reward(1.0, 1.0, 2, &cfg) - 1.2).abs() < TOL);
        assert!((total_reward(0.0, 0.5, 4, &cfg) - 0.09025).abs() < TOL);
        assert_eq!(total_reward(0.0, 0.0, 7, &cfg), 0.0);
    }

    #[test]
    fn alpha_zero_reduces_to_outcome_times_efficiency() {
        let cfg = RewardConfig {
            alpha: 0.0,
            ..RewardConfig::default()
        };
        assert!((total_reward(1.0, 0.7, 4, &cfg) - 0.9025).abs() < TOL);
        assert_eq!(total_reward(0.0, 1.0, 4, &cfg), 0.0);
    }

    #[test]
    fn beta_one_removes_the_length_penalty() {
        let cfg = RewardConfig {
            beta: 1.0,
            ..RewardConfig::default()
        };
        assert!((total_reward(1.0, 1.0, 7, &cfg) - 1.2).abs() < TOL);
    }

    #[test]
    fn foraging_objective_worked_values() {
        let cfg = RewardConfig::default();
        assert!((foraging_objective(1.0, 1.0, 3, &cfg) - 1.02885).abs() < TOL);
        // Unlike the training reward, even short episodes are discounted.
        assert!((foraging_objective(1.0, 1.0, 2, &cfg) - 1.2 * 0.9025).abs() < TOL);
    }

    #[test]
    fn breakdown_assembles_all_terms() {
        let cfg = RewardConfig::default();
        let curve = CoverageCurve::new(vec![1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
        let b = RewardBreakdown::compute(1.0, curve, 4, &cfg).unwrap();
        assert_eq!(b.outcome, 1.0);
        assert_eq!(b.gain, 1.0);
        assert!((b.efficiency - 0.9025).abs() < TOL);
        assert!((b.total - 1.083).abs() < TOL);
        assert_eq!(b.steps_t, 4);
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        let bad = RewardConfig {
            beta: 0.0,
            ..RewardConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RewardConfig {
            alpha: -0.1,
            ..RewardConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Total reward is zero iff both outcome and gain are zero, and
            /// never exceeds (1 + alpha).
            #[test]
            fn reward_bounds(
                outcome in 0.0f64..=1.0,
                gain in 0.0f64..=1.0,
                steps in 1usize..8,
            ) {
                let cfg = RewardConfig::default();
                let r = total_reward(outcome, gain, steps, &cfg);
                prop_assert!(r >= 0.0);
                prop_assert!(r <= 1.0 + cfg.alpha);
                if outcome == 0.0 && gain == 0.0 {
                    prop_assert_eq!(r, 0.0);
                } else {
                    prop_assert!(r > 0.0);
                }
            }

            /// More steps never increase the reward (beta < 1).
            #[test]
            fn reward_monotone_in_steps(
                outcome in 0.0f64..=1.0,
                gain in 0.0f64..=1.0,
                steps in 2usize..7,
            ) {
                let cfg = RewardConfig::default();
                prop_assert!(
                    total_reward(outcome, gain, steps + 1, &cfg)
                        <= total_reward(outcome, gain, steps, &cfg)
                );
            }

            /// A monotone curve's gain equals its final value.
            #[test]
            fn gain_equals_final_value(
                raw in prop::collection::vec(0.0f64..=1.0, 0..8),
            ) {
                let mut values = raw;
                values.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let curve = CoverageCurve::new(values.clone()).unwrap();
                prop_assert_eq!(
                    information_gain_reward(&curve).unwrap(),
                    values.last().copied().unwrap_or(0.0)
                );
            }
        }
    }
}
