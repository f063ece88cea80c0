//! Clipped-surrogate PPO over collected controller episodes, with GAE and
//! truncated backpropagation through time at episode boundaries.
//!
//! Episodes store everything needed to replay the recurrent forward pass
//! exactly: the initial hidden state, the ordered inputs of every step, the
//! sampled actions and the behaviour-policy scores.

use crate::controller::{
    self, ControllerGrads, ControllerInput, ControllerWeights, StepCache, SCORE_CLAMP,
};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PPOConfig {
    pub clip_ratio: f64,
    pub epochs_per_update: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Mean-score floor below which the policy is flagged as collapsed.
    /// Monitored and reported; never used to alter the update itself.
    pub mean_score_floor: f64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            clip_ratio: 0.2,
            epochs_per_update: 4,
            gamma: 0.99,
            gae_lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.01,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            mean_score_floor: 0.05,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_ratio <= 0.0 {
            return Err(Error::Config("clip_ratio must be positive".into()));
        }
        if self.epochs_per_update == 0 {
            return Err(Error::Config("epochs_per_update must be positive".into()));
        }
        for (name, v) in [("gamma", self.gamma), ("gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One environment step: the minibatch shown to the controller, what it did,
/// and what the environment returned.
#[derive(Debug, Clone)]
pub struct EpisodeStep {
    pub inputs: Vec<ControllerInput>,
    pub actions: Vec<u8>,
    /// Scores under the behaviour policy at collection time.
    pub behaviour_scores: Vec<f64>,
    /// Critic value estimate at collection time.
    pub value: f64,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct Episode {
    /// Recurrent state at the first step, required for exact replay.
    pub init_hidden: Vec<f64>,
    pub steps: Vec<EpisodeStep>,
    /// Raw (un-baselined) reward at the final step; fed forward as the
    /// `prev_raw_reward` input of the next episode's first step.
    pub terminal_raw_reward: f64,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Shape("episode has no steps".into()));
        }
        for (t, s) in self.steps.iter().enumerate() {
            if s.inputs.is_empty() {
                return Err(Error::Shape(format!("episode step {t} has no inputs")));
            }
            if s.inputs.len() != s.actions.len() || s.inputs.len() != s.behaviour_scores.len() {
                return Err(Error::Shape(format!(
                    "episode step {t}: inputs/actions/scores length mismatch"
                )));
            }
        }
        Ok(())
    }
}

/// Discounted reward-to-go and generalised advantage estimates for one
/// episode, both unnormalised. The terminal value bootstrap is zero.
pub fn compute_returns_and_advantages(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.is_empty() || rewards.len() != values.len() {
        return Err(Error::Shape(format!(
            "returns/advantages: {} rewards vs {} values",
            rewards.len(),
            values.len()
        )));
    }
    let t_max = rewards.len();
    let mut returns = vec![0.0; t_max];
    let mut advantages = vec![0.0; t_max];
    let mut ret_acc = 0.0;
    let mut adv_acc = 0.0;
    for t in (0..t_max).rev() {
        ret_acc = rewards[t] + gamma * ret_acc;
        returns[t] = ret_acc;
        let next_value = if t + 1 < t_max { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value - values[t];
        adv_acc = delta + gamma * lambda * adv_acc;
        advantages[t] = adv_acc;
    }
    Ok((returns, advantages))
}

/// Per-episode targets computed once per update.
struct EpisodeTargets {
    returns: Vec<f64>,
    advantages: Vec<f64>,
}

fn build_targets(episodes: &[Episode], cfg: &PPOConfig) -> Result<Vec<EpisodeTargets>> {
    let mut targets = Vec::with_capacity(episodes.len());
    for ep in episodes {
        ep.validate()?;
        let rewards: Vec<f64> = ep.steps.iter().map(|s| s.reward).collect();
        let values: Vec<f64> = ep.steps.iter().map(|s| s.value).collect();
        let (returns, advantages) =
            compute_returns_and_advantages(&rewards, &values, cfg.gamma, cfg.gae_lambda)?;
        targets.push(EpisodeTargets {
            returns,
            advantages,
        });
    }
    // normalise advantages jointly across the batch
    let flat: Vec<f64> = targets
        .iter()
        .flat_map(|t| t.advantages.iter().copied())
        .collect();
    let n = flat.len() as f64;
    let mean = flat.iter().sum::<f64>() / n;
    let var = flat.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for t in &mut targets {
        for a in &mut t.advantages {
            *a -= mean;
            if std > 1e-8 {
                *a /= std;
            }
        }
    }
    Ok(targets)
}

/// Loss breakdown for one pass over the episode batch.
#[derive(Debug, Clone, Default)]
pub struct PpoLoss {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    /// Importance ratios per step, in episode-then-step order.
    pub ratios: Vec<f64>,
    /// Mean score over all replayed samples.
    pub mean_score: f64,
}

fn entropy_terms(s: f64) -> (f64, f64) {
    let s = s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let h = -(s * s.ln() + (1.0 - s) * (1.0 - s).ln());
    let dh_ds = ((1.0 - s) / s).ln();
    (h, dh_ds)
}

/// Replay the episodes under the current weights, evaluate the clipped
/// surrogate objective, and accumulate its gradient via BPTT.
pub fn ppo_loss_and_grads(
    w: &ControllerWeights,
    episodes: &[Episode],
    cfg: &PPOConfig,
) -> Result<(PpoLoss, ControllerGrads)> {
    let targets = build_targets(episodes, cfg)?;
    let n_steps: usize = episodes.iter().map(|e| e.steps.len()).sum();
    let n_samples: usize = episodes
        .iter()
        .flat_map(|e| e.steps.iter())
        .map(|s| s.inputs.len())
        .sum();
    let (n_steps_f, n_samples_f) = (n_steps as f64, n_samples as f64);

    let mut grads = controller::zero_grads(w);
    let mut loss = PpoLoss::default();
    let mut score_sum = 0.0;

    for (ep, tgt) in episodes.iter().zip(&targets) {
        // forward replay
        let mut hidden = ep.init_hidden.clone();
        let mut caches: Vec<Vec<StepCache>> = Vec::with_capacity(ep.steps.len());
        for step in &ep.steps {
            let mut step_caches = Vec::with_capacity(step.inputs.len());
            for input in &step.inputs {
                let cache = controller::forward_step(w, input, &hidden)?;
                hidden = cache.h_new.clone();
                step_caches.push(cache);
            }
            caches.push(step_caches);
        }

        // per-sample score gradients and per-step value gradients
        let mut d_scores: Vec<Vec<f64>> = Vec::with_capacity(ep.steps.len());
        let mut d_values: Vec<f64> = Vec::with_capacity(ep.steps.len());
        for (t, step) in ep.steps.iter().enumerate() {
            let new_scores: Vec<f64> = caches[t].iter().map(|c| c.score).collect();
            score_sum += new_scores.iter().sum::<f64>();
            let logp_new = controller::log_policy(&new_scores, &step.actions)?;
            let logp_old = controller::log_policy(&step.behaviour_scores, &step.actions)?;
            let ratio = (logp_new - logp_old).exp();
            if !ratio.is_finite() {
                return Err(Error::Numeric(format!("importance ratio {ratio}")));
            }
            loss.ratios.push(ratio);
            let adv = tgt.advantages[t];
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * adv;
            loss.policy -= unclipped.min(clipped) / n_steps_f;
            // gradient flows only through the active, unclipped branch
            let d_logp = if unclipped <= clipped {
                -adv * ratio / n_steps_f
            } else {
                0.0
            };

            let value = caches[t].last().unwrap().value;
            let v_err = value - tgt.returns[t];
            loss.value += v_err * v_err / n_steps_f;
            d_values.push(2.0 * cfg.value_coef * v_err / n_steps_f);

            let mut d_step = Vec::with_capacity(step.inputs.len());
            for (i, &s) in new_scores.iter().enumerate() {
                let inside = (SCORE_CLAMP..=1.0 - SCORE_CLAMP).contains(&s);
                let mut d_s = 0.0;
                if inside {
                    let a = f64::from(step.actions[i]);
                    d_s += d_logp * (a / s - (1.0 - a) / (1.0 - s));
                }
                let (h, dh_ds) = entropy_terms(s);
                loss.entropy += h / n_samples_f;
                if inside {
                    d_s -= cfg.entropy_coef * dh_ds / n_samples_f;
                }
                d_step.push(d_s);
            }
            d_scores.push(d_step);
        }

        // backward replay
        let mut d_h = vec![0.0; w.arch.hidden_size];
        for t in (0..ep.steps.len()).rev() {
            let last = caches[t].len() - 1;
            for i in (0..caches[t].len()).rev() {
                let d_value = if i == last { d_values[t] } else { 0.0 };
                d_h = controller::backward_step(
                    w,
                    &caches[t][i],
                    d_scores[t][i],
                    d_value,
                    &d_h,
                    &mut grads,
                );
            }
        }
    }

    loss.total = loss.policy + cfg.value_coef * loss.value - cfg.entropy_coef * loss.entropy;
    loss.mean_score = score_sum / n_samples_f;
    Ok((loss, grads))
}

fn adam_step(w: &mut ControllerWeights, grads: &ControllerGrads, cfg: &PPOConfig) -> Result<()> {
    w.step_counter += 1;
    let t = w.step_counter as i32;
    let bias1 = 1.0 - cfg.adam_beta1.powi(t);
    let bias2 = 1.0 - cfg.adam_beta2.powi(t);
    for (name, g) in grads {
        for &v in &g.data {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
        }
        let m1 = &mut w.moment1[name].data;
        let m2 = &mut w.moment2[name].data;
        let p = &mut w.named_tensors[name].data;
        for i in 0..p.len() {
            m1[i] = cfg.adam_beta1 * m1[i] + (1.0 - cfg.adam_beta1) * g.data[i];
            m2[i] = cfg.adam_beta2 * m2[i] + (1.0 - cfg.adam_beta2) * g.data[i] * g.data[i];
            let m_hat = m1[i] / bias1;
            let v_hat = m2[i] / bias2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    }
    Ok(())
}

/// Summary of one `ppo_update` call.
#[derive(Debug, Clone)]
pub struct PpoDiagnostics {
    /// Importance ratios observed on the first epoch; all must be 1 up to
    /// floating-point noise since the behaviour weights are still current.
    pub first_epoch_ratios: Vec<f64>,
    pub loss_per_epoch: Vec<f64>,
    pub mean_score: f64,
    /// True when the final mean score fell below `mean_score_floor`.
    pub policy_collapsed: bool,
}

/// Run `epochs_per_update` clipped-surrogate epochs over the episode batch.
pub fn ppo_update(
    w: &mut ControllerWeights,
    episodes: &[Episode],
    cfg: &PPOConfig,
) -> Result<PpoDiagnostics> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(Error::Shape("ppo_update: no episodes".into()));
    }
    let mut first_epoch_ratios = Vec::new();
    let mut loss_per_epoch = Vec::with_capacity(cfg.epochs_per_update);
    let mut mean_score = 0.0;
    for epoch in 0..cfg.epochs_per_update {
        let (loss, grads) = ppo_loss_and_grads(w, episodes, cfg)?;
        if epoch == 0 {
            first_epoch_ratios = loss.ratios.clone();
        }
        loss_per_epoch.push(loss.total);
        mean_score = loss.mean_score;
        adam_step(w, &grads, cfg)?;
    }
    Ok(PpoDiagnostics {
        first_epoch_ratios,
        loss_per_epoch,
        mean_score,
        policy_collapsed: mean_score < cfg.mean_score_floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{ControllerArch, ControllerState};
    use crate::rng;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn arch() -> ControllerArch {
        ControllerArch {
            image_h: 8,
            image_w: 8,
            conv_channels: [2, 2, 3],
            fc_size: 6,
            hidden_size: 5,
        }
    }

    fn probe_input(seed: u64) -> ControllerInput {
        let mut r = rng::stream(seed, "ppo-probe");
        ControllerInput {
            image: Tensor::from_vec(
                &[1, 8, 8],
                (0..64).map(|_| r.random_range(0.0..1.0)).collect(),
            )
            .unwrap(),
            prev_action: 0.0,
            prev_raw_reward: 0.0,
            prev_done: 0.0,
        }
    }

    /// Roll out an on-policy episode with the given per-step rewards.
    fn collect_episode(
        w: &ControllerWeights,
        rewards: &[f64],
        batch: usize,
        seed: u64,
    ) -> Episode {
        let mut state = ControllerState::new(w.arch.hidden_size);
        state.reset();
        let init_hidden = state.hidden.clone();
        let mut r = rng::stream(seed, "ppo-rollout");
        let mut steps = Vec::new();
        for (t, &reward) in rewards.iter().enumerate() {
            let inputs: Vec<ControllerInput> = (0..batch)
                .map(|i| probe_input(seed * 1000 + t as u64 * 10 + i as u64))
                .collect();
            let (scores, value, next) = controller::evaluate_step(w, &state, &inputs).unwrap();
            let actions = controller::sample_actions(&scores, &mut r).unwrap();
            steps.push(EpisodeStep {
                inputs,
                actions,
                behaviour_scores: scores,
                value,
                reward,
            });
            state = next;
        }
        let terminal_raw_reward = *rewards.last().unwrap();
        Episode {
            init_hidden,
            steps,
            terminal_raw_reward,
        }
    }

    #[test]
    fn undiscounted_returns_propagate_terminal_reward() {
        let (returns, advantages) =
            compute_returns_and_advantages(&[0.0, 0.0, 1.0], &[0.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        assert_eq!(returns, vec![1.0, 1.0, 1.0]);
        assert_eq!(advantages, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn gae_matches_hand_computation() {
        let (gamma, lambda) = (0.5, 0.5);
        let rewards = [0.3, -0.2];
        let values = [0.1, 0.4];
        let (returns, adv) =
            compute_returns_and_advantages(&rewards, &values, gamma, lambda).unwrap();
        let d1 = rewards[1] - values[1];
        let d0 = rewards[0] + gamma * values[1] - values[0];
        assert!((adv[1] - d1).abs() < 1e-12);
        assert!((adv[0] - (d0 + gamma * lambda * d1)).abs() < 1e-12);
        assert!((returns[1] - rewards[1]).abs() < 1e-12);
        assert!((returns[0] - (rewards[0] + gamma * rewards[1])).abs() < 1e-12);
        assert!(compute_returns_and_advantages(&[], &[], 1.0, 1.0).is_err());
    }

    #[test]
    fn advantages_are_normalised_across_batch() {
        let w = ControllerWeights::init(&arch(), 11).unwrap();
        let episodes = vec![
            collect_episode(&w, &[0.0, 0.0, 0.4], 2, 1),
            collect_episode(&w, &[0.0, 0.0, -0.6], 2, 2),
        ];
        let cfg = PPOConfig::default();
        let targets = build_targets(&episodes, &cfg).unwrap();
        let flat: Vec<f64> = targets
            .iter()
            .flat_map(|t| t.advantages.iter().copied())
            .collect();
        let n = flat.len() as f64;
        let mean = flat.iter().sum::<f64>() / n;
        let var = flat.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn first_epoch_ratios_are_one() {
        let w0 = ControllerWeights::init(&arch(), 5).unwrap();
        let episodes = vec![
            collect_episode(&w0, &[0.0, 0.0, -0.3], 3, 3),
            collect_episode(&w0, &[0.0, 0.0, 0.2], 3, 4),
        ];
        let mut w = w0;
        let diag = ppo_update(&mut w, &episodes, &PPOConfig::default()).unwrap();
        assert_eq!(diag.first_epoch_ratios.len(), 6);
        for r in &diag.first_epoch_ratios {
            assert!((r - 1.0).abs() < 1e-6, "ratio {r}");
        }
        assert_eq!(diag.loss_per_epoch.len(), 4);
    }

    #[test]
    fn later_epochs_drift_from_unit_ratio() {
        let w0 = ControllerWeights::init(&arch(), 6).unwrap();
        let episodes = vec![collect_episode(&w0, &[0.0, 0.5], 2, 5)];
        let cfg = PPOConfig {
            learning_rate: 0.05,
            ..PPOConfig::default()
        };
        let mut w = w0;
        ppo_update(&mut w, &episodes, &cfg).unwrap();
        let (loss, _) = ppo_loss_and_grads(&w, &episodes, &cfg).unwrap();
        assert!(loss.ratios.iter().any(|r| (r - 1.0).abs() > 1e-6));
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let w = ControllerWeights::init(&arch(), 7).unwrap();
        let episodes = vec![collect_episode(&w, &[0.0, -0.4], 2, 6)];
        let cfg = PPOConfig::default();
        let (_, grads) = ppo_loss_and_grads(&w, &episodes, &cfg).unwrap();

        let eps = 1e-5;
        let mut probe = rng::stream(8, "fd-pick");
        for name in [
            "c1.w", "c2.w", "c3.w", "fc.w", "gru.wz", "gru.wr", "gru.wn", "gru.un", "pol.w",
            "val.w", "pol.b", "val.b", "gru.bn", "fc.b",
        ] {
            let len = w.named_tensors[name].data.len();
            for _ in 0..3 {
                let i = probe.random_range(0..len);
                let mut wp = w.clone();
                wp.named_tensors[name].data[i] += eps;
                let (lp, _) = ppo_loss_and_grads(&wp, &episodes, &cfg).unwrap();
                let mut wm = w.clone();
                wm.named_tensors[name].data[i] -= eps;
                let (lm, _) = ppo_loss_and_grads(&wm, &episodes, &cfg).unwrap();
                let fd = (lp.total - lm.total) / (2.0 * eps);
                let an = grads[name].data[i];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-3,
                    "{name}[{i}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn update_raises_score_when_selection_is_rewarded() {
        let arch = arch();
        let w0 = ControllerWeights::init(&arch, 9).unwrap();
        let input = probe_input(42);
        let state = {
            let mut s = ControllerState::new(arch.hidden_size);
            s.reset();
            s
        };
        let (scores, value, _) =
            controller::evaluate_step(&w0, &state, std::slice::from_ref(&input)).unwrap();
        let mk = |action: u8, reward: f64| Episode {
            init_hidden: state.hidden.clone(),
            terminal_raw_reward: reward,
            steps: vec![EpisodeStep {
                inputs: vec![input.clone()],
                actions: vec![action],
                behaviour_scores: scores.clone(),
                value,
                reward,
            }],
        };
        // selecting was rewarded, skipping was penalised: both push the
        // score for this input upward
        let episodes = vec![mk(1, 1.0), mk(0, -1.0)];
        let cfg = PPOConfig {
            entropy_coef: 0.0,
            value_coef: 0.0,
            epochs_per_update: 1,
            learning_rate: 0.01,
            ..PPOConfig::default()
        };
        let mut w = w0;
        let before = scores[0];
        ppo_update(&mut w, &episodes, &cfg).unwrap();
        let (after, _, _) =
            controller::evaluate_step(&w, &state, std::slice::from_ref(&input)).unwrap();
        assert!(after[0] > before, "score {before} -> {}", after[0]);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = PPOConfig::default();
        cfg.gamma = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = PPOConfig::default();
        cfg.epochs_per_update = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = PPOConfig::default();
        cfg.clip_ratio = 0.0;
        assert!(cfg.validate().is_err());
    }
}
