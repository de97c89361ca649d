//! Policy-gradient training: clipped-surrogate updates over sampled episodes
//! with generalized advantage estimation, an optional behavior-cloning warm
//! start from expert episodes, and a per-iteration metrics report.
//!
//! One iteration samples a batch of episodes with the current policy, turns
//! every decision point into a training sample (features, old log-prob,
//! advantage, return target), normalizes advantages across the batch, then
//! takes a few gradient steps on the clipped surrogate plus value and entropy
//! terms. Everything is driven by one seeded generator, so a run is a pure
//! function of its configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::datagen::Task;
use crate::env::{oracle_episode, rollout_episode, EnvConfig, EnvError, EpisodeRecord};
use crate::policy::{
    features_matrix, scores, softmax_from_scores, state_features, PolicyParams, FEATURE_DIM,
    VALUE_FEATURE_DIM,
};
use crate::reward::exact_match;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no tasks to train on")]
    NoTasks,
    #[error("training batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// How episode rewards are spread over decision points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// The whole episode reward lands on the final step.
    TerminalOnly,
    /// Each search step earns its efficiency-weighted share of the coverage
    /// it added; the final step carries the outcome term. Sums to the same
    /// episode total.
    ShapedGain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lam: f64,
    pub clip_eps: f64,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub iters: usize,
    pub episodes_per_iter: usize,
    pub epochs_per_iter: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub seed: u64,
    pub reward_mode: RewardMode,
    pub warm_start: bool,
    pub warm_start_episodes: usize,
    pub bc_steps: usize,
    pub bc_lr: f64,
    /// Stop once held-out exact match reaches this level.
    pub stop_at_em: Option<f64>,
    pub env: EnvConfig,
}

impl Default for TrainConfig {
    /// The policy learning rate is deliberately small: the warm start places
    /// the answer-timing margin inside its stable band, and slow on-policy
    /// updates keep it there across all 300 iterations instead of drifting
    /// into exhaustive searching.
    fn default() -> Self {
        TrainConfig {
            gamma: 1.0,
            lam: 0.95,
            clip_eps: 0.2,
            lr_policy: 0.004,
            lr_value: 0.3,
            iters: 300,
            episodes_per_iter: 16,
            epochs_per_iter: 1,
            value_coef: 0.5,
            entropy_coef: 0.01,
            seed: 42,
            reward_mode: RewardMode::TerminalOnly,
            warm_start: true,
            warm_start_episodes: 50,
            bc_steps: 50,
            bc_lr: 0.15,
            stop_at_em: None,
            env: EnvConfig::default(),
        }
    }
}

/// Per-step reward vector for an episode under the chosen spread mode.
pub fn assign_step_rewards(record: &EpisodeRecord, mode: RewardMode) -> Vec<f64> {
    let n = record.steps.len();
    let mut rewards = vec![0.0; n];
    match mode {
        RewardMode::TerminalOnly => {
            rewards[n - 1] = record.reward.total;
        }
        RewardMode::ShapedGain => {
            let eff = record.reward.efficiency;
            let alpha_eff = record.reward.alpha * eff;
            let mut prev = 0.0;
            for (i, cov) in record.reward.curve.values.iter().enumerate() {
                rewards[i] = alpha_eff * (cov - prev);
                prev = *cov;
            }
            rewards[n - 1] += eff * record.reward.outcome;
        }
    }
    rewards
}

/// Generalized advantage estimation with a zero terminal value. Returns
/// per-step advantages and value targets (advantage plus baseline).
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len());
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut next_value = 0.0;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lam * next_adv;
        advantages[t] = next_adv;
        next_value = values[t];
    }
    let returns = advantages
        .iter()
        .zip(values)
        .map(|(a, v)| a + v)
        .collect();
    (advantages, returns)
}

/// One decision point ready for a gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSample {
    pub feats: Vec<[f64; FEATURE_DIM]>,
    pub chosen: usize,
    pub psi: [f64; VALUE_FEATURE_DIM],
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Expand a finished episode into training samples.
pub fn episode_samples(record: &EpisodeRecord, cfg: &TrainConfig) -> Vec<StepSample> {
    let rewards = assign_step_rewards(record, cfg.reward_mode);
    let values: Vec<f64> = record.steps.iter().map(|s| s.value).collect();
    let (advantages, returns) = compute_gae(&rewards, &values, cfg.gamma, cfg.lam);
    record
        .steps
        .iter()
        .zip(advantages.iter().zip(&returns))
        .map(|(step, (adv, ret))| StepSample {
            feats: features_matrix(&step.state, &step.legal),
            chosen: step.chosen,
            psi: state_features(&step.state),
            old_log_prob: step.log_prob,
            advantage: *adv,
            ret: *ret,
        })
        .collect()
}

/// Shift and scale advantages to mean zero, unit spread across the batch.
pub fn normalize_advantages(samples: &mut [StepSample]) {
    if samples.is_empty() {
        return;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
    let var = samples
        .iter()
        .map(|s| (s.advantage - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    for s in samples.iter_mut() {
        s.advantage = (s.advantage - mean) / (std + 1e-8);
    }
}

/// The scalar terms of one update step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    /// Mean negated clipped surrogate.
    pub policy: f64,
    /// Mean squared value error (unweighted).
    pub value: f64,
    /// Mean action-distribution entropy.
    pub entropy: f64,
    /// policy + value_coef * value - entropy_coef * entropy.
    pub total: f64,
}

/// Loss and analytic gradients for one batch under the current parameters.
///
/// The policy gradient for a sample is zero when the ratio is clipped against
/// its advantage sign, and `-A * ratio * (phi_chosen - phi_mean)` otherwise.
/// The entropy gradient is `-sum_j pi_j log pi_j (phi_j - phi_mean)`; the
/// value gradient is the usual squared-error one, weighted by `value_coef`.
pub fn ppo_loss_and_grad(
    params: &PolicyParams,
    samples: &[StepSample],
    clip_eps: f64,
    value_coef: f64,
    entropy_coef: f64,
) -> (LossTerms, [f64; FEATURE_DIM], [f64; VALUE_FEATURE_DIM]) {
    assert!(!samples.is_empty(), "loss over an empty batch");
    let n = samples.len() as f64;
    let mut policy_loss = 0.0;
    let mut value_loss = 0.0;
    let mut entropy_sum = 0.0;
    let mut grad_theta = [0.0; FEATURE_DIM];
    let mut grad_w = [0.0; VALUE_FEATURE_DIM];

    for sample in samples {
        let (probs, log_probs) = softmax_from_scores(&scores(&params.theta, &sample.feats));
        let lp_new = log_probs[sample.chosen];
        let ratio = (lp_new - sample.old_log_prob).exp();
        let a = sample.advantage;
        let clipped_ratio = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
        let surrogate = (ratio * a).min(clipped_ratio * a);
        policy_loss -= surrogate;

        let clipped_out = (a >= 0.0 && ratio > 1.0 + clip_eps) || (a < 0.0 && ratio < 1.0 - clip_eps);

        let mut phi_mean = [0.0; FEATURE_DIM];
        for (p, phi) in probs.iter().zip(&sample.feats) {
            for (m, f) in phi_mean.iter_mut().zip(phi) {
                *m += p * f;
            }
        }

        if !clipped_out {
            let phi_c = &sample.feats[sample.chosen];
            for k in 0..FEATURE_DIM {
                grad_theta[k] -= a * ratio * (phi_c[k] - phi_mean[k]);
            }
        }

        let mut entropy = 0.0;
        for (p, lp) in probs.iter().zip(&log_probs) {
            entropy -= p * lp;
        }
        entropy_sum += entropy;
        // d(entropy)/d(theta), accumulated with the -entropy_coef loss sign.
        for (j, (p, lp)) in probs.iter().zip(&log_probs).enumerate() {
            let weight = -p * lp;
            for k in 0..FEATURE_DIM {
                grad_theta[k] -= entropy_coef * weight * (sample.feats[j][k] - phi_mean[k]);
            }
        }

        let v: f64 = sample.psi.iter().zip(&params.w).map(|(x, w)| x * w).sum();
        let err = v - sample.ret;
        value_loss += err * err;
        for k in 0..VALUE_FEATURE_DIM {
            grad_w[k] += value_coef * 2.0 * err * sample.psi[k];
        }
    }

    for g in grad_theta.iter_mut() {
        *g /= n;
    }
    for g in grad_w.iter_mut() {
        *g /= n;
    }
    policy_loss /= n;
    value_loss /= n;
    let entropy = entropy_sum / n;
    let terms = LossTerms {
        policy: policy_loss,
        value: value_loss,
        entropy,
        total: policy_loss + value_coef * value_loss - entropy_coef * entropy,
    };
    (terms, grad_theta, grad_w)
}

/// Run the configured number of gradient steps on one batch. Returns the loss
/// terms from the final step.
pub fn ppo_update(
    params: &mut PolicyParams,
    samples: &[StepSample],
    cfg: &TrainConfig,
) -> Result<LossTerms, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut last = None;
    for _ in 0..cfg.epochs_per_iter.max(1) {
        let (terms, grad_theta, grad_w) =
            ppo_loss_and_grad(params, samples, cfg.clip_eps, cfg.value_coef, cfg.entropy_coef);
        for (t, g) in params.theta.iter_mut().zip(&grad_theta) {
            *t -= cfg.lr_policy * g;
        }
        for (w, g) in params.w.iter_mut().zip(&grad_w) {
            *w -= cfg.lr_value * g;
        }
        last = Some(terms);
    }
    Ok(last.expect("at least one epoch"))
}

/// Mean negative log-likelihood of the chosen actions and its gradient.
pub fn bc_loss_and_grad(
    params: &PolicyParams,
    samples: &[StepSample],
) -> (f64, [f64; FEATURE_DIM]) {
    assert!(!samples.is_empty(), "cloning loss over an empty batch");
    let n = samples.len() as f64;
    let mut nll = 0.0;
    let mut grad = [0.0; FEATURE_DIM];
    for sample in samples {
        let (probs, log_probs) = softmax_from_scores(&scores(&params.theta, &sample.feats));
        nll -= log_probs[sample.chosen];
        let mut phi_mean = [0.0; FEATURE_DIM];
        for (p, phi) in probs.iter().zip(&sample.feats) {
            for (m, f) in phi_mean.iter_mut().zip(phi) {
                *m += p * f;
            }
        }
        let phi_c = &sample.feats[sample.chosen];
        for k in 0..FEATURE_DIM {
            grad[k] += phi_mean[k] - phi_c[k];
        }
    }
    for g in grad.iter_mut() {
        *g /= n;
    }
    (nll / n, grad)
}

/// One cloning gradient step; returns the pre-step loss.
pub fn bc_update(params: &mut PolicyParams, samples: &[StepSample], lr: f64) -> f64 {
    let (nll, grad) = bc_loss_and_grad(params, samples);
    for (t, g) in params.theta.iter_mut().zip(&grad) {
        *t -= lr * g;
    }
    nll
}

/// Expert decision points from replayed oracle episodes on the first
/// `n_episodes` tasks (cycling if there are fewer tasks).
pub fn collect_expert_samples(
    tasks: &[Task],
    corpus: &Corpus,
    env_cfg: &EnvConfig,
    n_episodes: usize,
) -> Result<Vec<StepSample>, TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    let mut samples = Vec::new();
    for i in 0..n_episodes {
        let task = &tasks[i % tasks.len()];
        let record = oracle_episode(task, corpus, env_cfg)?;
        for step in &record.steps {
            samples.push(StepSample {
                feats: features_matrix(&step.state, &step.legal),
                chosen: step.chosen,
                psi: state_features(&step.state),
                old_log_prob: 0.0,
                advantage: 0.0,
                ret: 0.0,
            });
        }
    }
    Ok(samples)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRow {
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_outcome: f64,
    pub mean_gain: f64,
    pub mean_t: f64,
    pub heldout_em: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("iter,mean_reward,mean_outcome,mean_gain,mean_T,heldout_em,policy_loss,value_loss\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.iter,
                r.mean_reward,
                r.mean_outcome,
                r.mean_gain,
                r.mean_t,
                r.heldout_em,
                r.policy_loss,
                r.value_loss
            ));
        }
        out
    }

    /// 1-based iteration at which held-out exact match first reached
    /// `threshold`, if it ever did.
    pub fn first_iteration_reaching_em(&self, threshold: f64) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.heldout_em >= threshold)
            .map(|r| r.iter)
    }

    /// Mean of the sampled episode length over the last `window` rows.
    pub fn convergence_mean_t(&self, window: usize) -> f64 {
        let tail: Vec<&TrainRow> = self.rows.iter().rev().take(window.max(1)).collect();
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|r| r.mean_t).sum::<f64>() / tail.len() as f64
    }
}

/// Greedy episodes on `tasks`; returns (exact match, mean episode length T,
/// mean final coverage).
pub fn greedy_metrics(
    params: &PolicyParams,
    tasks: &[Task],
    corpus: &Corpus,
    env_cfg: &EnvConfig,
) -> Result<(f64, f64, f64), TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    let mut em = 0.0;
    let mut mean_t = 0.0;
    let mut mean_cov = 0.0;
    for task in tasks {
        let mut chooser = crate::policy::GreedyChooser { params };
        let record = rollout_episode(task, corpus, env_cfg, &mut chooser)?;
        em += exact_match(record.final_answer(), &task.gold_answers);
        mean_t += record.reward.steps_t as f64;
        mean_cov += record.reward.curve.final_coverage();
    }
    let n = tasks.len() as f64;
    Ok((em / n, mean_t / n, mean_cov / n))
}

/// Full training run: optional cloning warm start, then the configured number
/// of sampled-batch update iterations. Pure function of the inputs.
pub fn train_loop(
    train_tasks: &[Task],
    heldout_tasks: &[Task],
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<(PolicyParams, TrainReport), TrainError> {
    if train_tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = PolicyParams::default();

    if cfg.warm_start && cfg.bc_steps > 0 && cfg.warm_start_episodes > 0 {
        let expert = collect_expert_samples(train_tasks, corpus, &cfg.env, cfg.warm_start_episodes)?;
        for _ in 0..cfg.bc_steps {
            bc_update(&mut params, &expert, cfg.bc_lr);
        }
    }

    let mut report = TrainReport::default();
    for iter in 1..=cfg.iters {
        let mut batch = Vec::new();
        let mut mean_reward = 0.0;
        let mut mean_outcome = 0.0;
        let mut mean_gain = 0.0;
        let mut mean_t = 0.0;
        for _ in 0..cfg.episodes_per_iter {
            let task = &train_tasks[rng.gen_range(0..train_tasks.len())];
            let record = {
                let mut chooser = crate::policy::SamplingChooser {
                    params: &params,
                    rng: &mut rng,
                };
                rollout_episode(task, corpus, &cfg.env, &mut chooser)?
            };
            mean_reward += record.reward.total;
            mean_outcome += record.reward.outcome;
            mean_gain += record.reward.gain;
            mean_t += record.reward.steps_t as f64;
            batch.extend(episode_samples(&record, cfg));
        }
        let n = cfg.episodes_per_iter.max(1) as f64;
        normalize_advantages(&mut batch);
        let terms = ppo_update(&mut params, &batch, cfg)?;
        let (heldout_em, _, _) = greedy_metrics(&params, heldout_tasks, corpus, &cfg.env)?;
        report.rows.push(TrainRow {
            iter,
            mean_reward: mean_reward / n,
            mean_outcome: mean_outcome / n,
            mean_gain: mean_gain / n,
            mean_t: mean_t / n,
            heldout_em,
            policy_loss: terms.policy,
            value_loss: terms.value,
        });
        if let Some(threshold) = cfg.stop_at_em {
            if heldout_em >= threshold {
                break;
            }
        }
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, GenConfig, GeneratedSet};
    use crate::env::{legal_actions, reset, Action};
    use crate::policy::greedy_action;

    fn dataset() -> GeneratedSet {
        generate_dataset(&GenConfig {
            n_tasks: 10,
            seed: 3,
            ..GenConfig::default()
        })
        .unwrap()
    }

    /// The quadratic-time definition: each advantage is the lambda-discounted
    /// sum of one-step TD errors from its position onward.
    fn gae_double_sum(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> Vec<f64> {
        let n = rewards.len();
        (0..n)
            .map(|t| {
                let mut acc = 0.0;
                for l in 0..(n - t) {
                    let next = if t + l + 1 < n { values[t + l + 1] } else { 0.0 };
                    let delta = rewards[t + l] + gamma * next - values[t + l];
                    acc += (gamma * lam).powi(l as i32) * delta;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn gae_recursion_matches_the_double_sum() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(1..8);
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let gamma = rng.gen_range(0.5..1.0);
            let lam = rng.gen_range(0.5..1.0);
            let (fast, returns) = compute_gae(&rewards, &values, gamma, lam);
            let slow = gae_double_sum(&rewards, &values, gamma, lam);
            for ((a, b), (r, v)) in fast.iter().zip(&slow).zip(returns.iter().zip(&values)) {
                assert!((a - b).abs() < 1e-10);
                assert!((r - (a + v)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn terminal_mode_puts_everything_on_the_last_step() {
        let set = dataset();
        let record = oracle_episode(&set.tasks[0], &set.corpus, &EnvConfig::default()).unwrap();
        let rewards = assign_step_rewards(&record, RewardMode::TerminalOnly);
        assert_eq!(rewards.len(), record.steps.len());
        for r in &rewards[..rewards.len() - 1] {
            assert_eq!(*r, 0.0);
        }
        assert_eq!(rewards[rewards.len() - 1], record.reward.total);
    }

    #[test]
    fn shaped_mode_preserves_the_episode_total() {
        let set = dataset();
        let cfg = EnvConfig::default();
        for task in &set.tasks {
            let record = oracle_episode(task, &set.corpus, &cfg).unwrap();
            let rewards = assign_step_rewards(&record, RewardMode::ShapedGain);
            let sum: f64 = rewards.iter().sum();
            assert!((sum - record.reward.total).abs() < 1e-12);
            // Each search step that added coverage earned a positive share.
            for r in &rewards[..rewards.len() - 1] {
                assert!(*r > 0.0);
            }
        }
    }

    #[test]
    fn normalization_centers_and_scales() {
        let set = dataset();
        let cfg = TrainConfig {
            episodes_per_iter: 4,
            ..TrainConfig::default()
        };
        let mut batch = Vec::new();
        for task in set.tasks.iter().take(4) {
            let record = oracle_episode(task, &set.corpus, &cfg.env).unwrap();
            batch.extend(episode_samples(&record, &cfg));
        }
        normalize_advantages(&mut batch);
        let n = batch.len() as f64;
        let mean: f64 = batch.iter().map(|s| s.advantage).sum::<f64>() / n;
        let var: f64 = batch.iter().map(|s| s.advantage.powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    fn synthetic_batch(seed: u64, avoid_kinks: bool) -> (PolicyParams, Vec<StepSample>, TrainConfig) {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = PolicyParams::default();
        for t in params.theta.iter_mut() {
            *t = rng.gen_range(-1.0..1.0);
        }
        for w in params.w.iter_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
        let cfg = TrainConfig::default();
        let mut samples = Vec::new();
        for _ in 0..12 {
            let n_actions = rng.gen_range(2..6);
            let feats: Vec<[f64; FEATURE_DIM]> = (0..n_actions)
                .map(|_| {
                    let mut phi = [0.0; FEATURE_DIM];
                    for x in phi.iter_mut() {
                        *x = rng.gen_range(0.0..1.0);
                    }
                    phi
                })
                .collect();
            let chosen = rng.gen_range(0..n_actions);
            let (_, log_probs) = softmax_from_scores(&scores(&params.theta, &feats));
            // Old log-probs offset from current so ratios spread around 1.
            let mut old_log_prob = log_probs[chosen] + rng.gen_range(-0.4..0.4);
            if avoid_kinks {
                let ratio = (log_probs[chosen] - old_log_prob).exp();
                for kink in [1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps] {
                    if (ratio - kink).abs() < 0.02 {
                        old_log_prob += 0.05;
                    }
                }
            }
            let mut psi = [0.0; VALUE_FEATURE_DIM];
            for x in psi.iter_mut() {
                *x = rng.gen_range(0.0..1.0);
            }
            samples.push(StepSample {
                feats,
                chosen,
                psi,
                old_log_prob,
                advantage: rng.gen_range(-1.5..1.5),
                ret: rng.gen_range(-1.0..1.5),
            });
        }
        (params, samples, cfg)
    }

    #[test]
    fn update_gradients_match_finite_differences() {
        for seed in [1u64, 2, 3] {
            let (params, samples, cfg) = synthetic_batch(seed, true);
            let loss_at = |theta: &[f64], w: &[f64]| {
                let mut p = params.clone();
                p.theta = theta.to_vec();
                p.w = w.to_vec();
                ppo_loss_and_grad(&p, &samples, cfg.clip_eps, cfg.value_coef, cfg.entropy_coef)
                    .0
                    .total
            };
            let (_, grad_theta, grad_w) = ppo_loss_and_grad(
                &params,
                &samples,
                cfg.clip_eps,
                cfg.value_coef,
                cfg.entropy_coef,
            );
            let h = 1e-6;
            for k in 0..FEATURE_DIM {
                let mut plus = params.theta.clone();
                plus[k] += h;
                let mut minus = params.theta.clone();
                minus[k] -= h;
                let numeric = (loss_at(&plus, &params.w) - loss_at(&minus, &params.w)) / (2.0 * h);
                assert!(
                    (grad_theta[k] - numeric).abs() <= 1e-7 + 1e-5 * numeric.abs(),
                    "theta[{k}]: analytic {} vs numeric {numeric}",
                    grad_theta[k]
                );
            }
            for k in 0..VALUE_FEATURE_DIM {
                let mut plus = params.w.clone();
                plus[k] += h;
                let mut minus = params.w.clone();
                minus[k] -= h;
                let numeric =
                    (loss_at(&params.theta, &plus) - loss_at(&params.theta, &minus)) / (2.0 * h);
                assert!(
                    (grad_w[k] - numeric).abs() <= 1e-7 + 1e-5 * numeric.abs(),
                    "w[{k}]: analytic {} vs numeric {numeric}",
                    grad_w[k]
                );
            }
        }
    }

    #[test]
    fn clipped_out_samples_do_not_move_the_policy() {
        let (params, mut samples, cfg) = synthetic_batch(4, false);
        // Force every sample into the clipped-out region: positive advantage
        // with a ratio far above 1 + eps.
        for s in samples.iter_mut() {
            s.advantage = 1.0;
            s.old_log_prob = {
                let (_, log_probs) = softmax_from_scores(&scores(&params.theta, &s.feats));
                log_probs[s.chosen] - 1.0 // ratio = e > 1.2
            };
        }
        let (_, grad_theta, _) = ppo_loss_and_grad(&params, &samples, cfg.clip_eps, cfg.value_coef, 0.0);
        for g in grad_theta {
            assert_eq!(g, 0.0);
        }
    }

    #[test]
    fn cloning_gradient_matches_finite_differences() {
        let (params, samples, _) = synthetic_batch(5, false);
        let (_, grad) = bc_loss_and_grad(&params, &samples);
        let h = 1e-6;
        for k in 0..FEATURE_DIM {
            let mut plus = params.clone();
            plus.theta[k] += h;
            let mut minus = params.clone();
            minus.theta[k] -= h;
            let numeric =
                (bc_loss_and_grad(&plus, &samples).0 - bc_loss_and_grad(&minus, &samples).0)
                    / (2.0 * h);
            assert!(
                (grad[k] - numeric).abs() <= 1e-7 + 1e-5 * numeric.abs(),
                "theta[{k}]: analytic {} vs numeric {numeric}",
                grad[k]
            );
        }
    }

    #[test]
    fn cloning_descent_is_monotone_and_reaches_expert_replay() {
        let set = dataset();
        let env_cfg = EnvConfig::default();
        let samples = collect_expert_samples(&set.tasks, &set.corpus, &env_cfg, 10).unwrap();
        let mut params = PolicyParams::default();
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            let nll = bc_update(&mut params, &samples, 0.05);
            assert!(nll <= last + 1e-12);
            last = nll;
        }
        // Fully cloned, the greedy policy replays the expert: search first,
        // and perfect answers over the cloning tasks.
        let state = reset(&set.tasks[0], &set.corpus, &env_cfg).unwrap();
        let legal = legal_actions(&state).unwrap();
        let chosen = greedy_action(&params, &state, &legal);
        assert!(matches!(legal[chosen.index], Action::Search { .. }));
        let (em, mean_t, cov) = greedy_metrics(&params, &set.tasks, &set.corpus, &env_cfg).unwrap();
        assert_eq!(em, 1.0);
        assert_eq!(mean_t, 4.0);
        assert_eq!(cov, 1.0);
        // Action-independent features (bias, step fraction, coverage) cancel
        // in the softmax, so cloning never moves their weights.
        assert!(params.theta[0].abs() < 1e-9);
        assert!(params.theta[5].abs() < 1e-9);
        assert!(params.theta[7].abs() < 1e-9);
    }

    #[test]
    fn training_is_deterministic() {
        let set = dataset();
        let cfg = TrainConfig {
            iters: 3,
            episodes_per_iter: 4,
            warm_start_episodes: 4,
            bc_steps: 5,
            ..TrainConfig::default()
        };
        let (train, heldout) = set.tasks.split_at(7);
        let (pa, ra) = train_loop(train, heldout, &set.corpus, &cfg).unwrap();
        let (pb, rb) = train_loop(train, heldout, &set.corpus, &cfg).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ra, rb);
        assert_eq!(ra.to_csv(), rb.to_csv());
    }

    #[test]
    fn report_csv_shape_and_threshold_lookup() {
        let report = TrainReport {
            rows: vec![
                TrainRow {
                    iter: 1,
                    mean_reward: 0.5,
                    mean_outcome: 0.25,
                    mean_gain: 0.75,
                    mean_t: 4.0,
                    heldout_em: 0.5,
                    policy_loss: -0.1,
                    value_loss: 0.2,
                },
                TrainRow {
                    iter: 2,
                    mean_reward: 0.9,
                    mean_outcome: 0.8,
                    mean_gain: 1.0,
                    mean_t: 4.0,
                    heldout_em: 0.85,
                    policy_loss: -0.05,
                    value_loss: 0.1,
                },
            ],
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,mean_reward,mean_outcome,mean_gain,mean_T,heldout_em,policy_loss,value_loss"
        );
        assert_eq!(
            lines.next().unwrap(),
            "1,0.500000,0.250000,0.750000,4.000000,0.500000,-0.100000,0.200000"
        );
        assert_eq!(report.first_iteration_reaching_em(0.8), Some(2));
        assert_eq!(report.first_iteration_reaching_em(0.9), None);
        assert!((report.convergence_mean_t(2) - 4.0).abs() < 1e-12);
    }
}
