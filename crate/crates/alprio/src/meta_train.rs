//! Meta-training orchestration: sample environments, run multi-episode
//! trials of minibatch scoring/selection/predictor-update steps, update the
//! controller with PPO after every collected episode, and fold each trial's
//! local predictor back into the shared weights with an annealed Reptile
//! sync.

use crate::controller::{self, ControllerArch, ControllerInput, ControllerState, ControllerWeights};
use crate::error::{Error, Result};
use crate::ppo::{self, Episode, EpisodeStep, PPOConfig};
use crate::predictor::{self, PredictorConfig, PredictorWeights};
use crate::reward::{self, RewardState};
use crate::synth::{EnvironmentDistribution, MdpEnvironment};
use crate::tensor::Tensor;
use crate::{checkpoint, rng};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MetaTrainConfig {
    pub total_trials: usize,
    pub episodes_per_trial: usize,
    pub steps_per_episode: usize,
    pub minibatch_size: usize,
    /// Predictor optimiser steps taken on each step's selected samples.
    pub predictor_steps_per_t: usize,
    pub seed: u64,
    /// Write periodic checkpoints every this many trials; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            total_trials: 300,
            episodes_per_trial: 2,
            steps_per_episode: 8,
            minibatch_size: 8,
            predictor_steps_per_t: 1,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("total_trials", self.total_trials),
            ("episodes_per_trial", self.episodes_per_trial),
            ("steps_per_episode", self.steps_per_episode),
            ("minibatch_size", self.minibatch_size),
            ("predictor_steps_per_t", self.predictor_steps_per_t),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Weighted draw from the environment distribution.
pub fn sample_environment<'a>(
    dist: &'a EnvironmentDistribution,
    rng: &mut ChaCha8Rng,
) -> Result<&'a MdpEnvironment> {
    if dist.environments.is_empty() {
        return Err(Error::Config("environment distribution is empty".into()));
    }
    if dist.environments.len() != dist.sampling_weights.len() {
        return Err(Error::Config(format!(
            "{} environments vs {} sampling weights",
            dist.environments.len(),
            dist.sampling_weights.len()
        )));
    }
    let total: f64 = dist.sampling_weights.iter().sum();
    if dist.sampling_weights.iter().any(|&w| w < 0.0) || total <= 0.0 {
        return Err(Error::Config(
            "sampling weights must be non-negative with positive sum".into(),
        ));
    }
    let draw: f64 = rng.random_range(0.0..total);
    let mut acc = 0.0;
    for (env, &w) in dist.environments.iter().zip(&dist.sampling_weights) {
        acc += w;
        if draw < acc {
            return Ok(env);
        }
    }
    Ok(dist.environments.last().unwrap())
}

/// One trial: the controller interacts with a single environment for
/// `episodes_per_trial` episodes, its memory reset once at the start and
/// shared across the episodes. The predictor trains on a trial-local copy;
/// the trial-end weights are returned for the Reptile sync.
pub fn run_trial(
    env: &MdpEnvironment,
    ctrl: &ControllerWeights,
    state: &mut ControllerState,
    shared_predictor: &PredictorWeights,
    cfg: &MetaTrainConfig,
    pcfg: &PredictorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Episode>, PredictorWeights)> {
    cfg.validate()?;
    env.controller_train.validate()?;
    env.controller_val.validate()?;
    state.reset();
    let mut w_local = shared_predictor.clone();
    let mut reward_state = RewardState::default();
    let n = env.controller_train.pairs.len();
    let b = cfg.minibatch_size.min(n);
    let mut prev_actions = vec![0.0; b];
    let mut prev_raw = 0.0;
    let mut prev_done = 0.0;
    let mut episodes = Vec::with_capacity(cfg.episodes_per_trial);

    for _ in 0..cfg.episodes_per_trial {
        let init_hidden = state.hidden.clone();
        let mut steps = Vec::with_capacity(cfg.steps_per_episode);
        let mut terminal_raw = 0.0;
        for t in 0..cfg.steps_per_episode {
            let idx = rand::seq::index::sample(rng, n, b).into_vec();
            let inputs: Vec<ControllerInput> = idx
                .iter()
                .enumerate()
                .map(|(slot, &i)| ControllerInput {
                    image: env.controller_train.pairs[i].image.clone(),
                    prev_action: prev_actions[slot],
                    prev_raw_reward: prev_raw,
                    prev_done,
                })
                .collect();
            let (scores, value, next_state) = controller::evaluate_step(ctrl, state, &inputs)?;
            let actions = controller::sample_actions(&scores, rng)?;

            let selected: Vec<(&Tensor, &Tensor)> = idx
                .iter()
                .zip(&actions)
                .filter(|&(_, &a)| a == 1)
                .map(|(&i, _)| {
                    let p = &env.controller_train.pairs[i];
                    (&p.image, &p.mask)
                })
                .collect();
            // empty selection: skip the update, still compute the reward
            if !selected.is_empty() {
                for _ in 0..cfg.predictor_steps_per_t {
                    predictor::train_step(&mut w_local, pcfg, &selected)?;
                }
            }

            // reward weights are the controller's scores for the validation
            // images, computed on a throwaway copy of the recurrent state
            let val_inputs: Vec<ControllerInput> = env
                .controller_val
                .pairs
                .iter()
                .map(|p| ControllerInput {
                    image: p.image.clone(),
                    prev_action: 0.0,
                    prev_raw_reward: prev_raw,
                    prev_done: 0.0,
                })
                .collect();
            let (val_scores, _) = controller::score_batch(ctrl, &next_state, &val_inputs)?;
            let losses = reward::validation_losses(&w_local, pcfg, &env.controller_val)?;
            let raw = reward::raw_reward(&losses, &val_scores)?;
            let fin = reward::final_reward(&mut reward_state, raw)?;

            let is_last = t + 1 == cfg.steps_per_episode;
            steps.push(EpisodeStep {
                inputs,
                actions: actions.clone(),
                behaviour_scores: scores,
                value,
                reward: if is_last { fin } else { 0.0 },
            });
            if is_last {
                terminal_raw = raw;
            }
            prev_actions = actions.iter().map(|&a| f64::from(a)).collect();
            prev_raw = raw;
            prev_done = if is_last { 1.0 } else { 0.0 };
            *state = next_state;
        }
        episodes.push(Episode {
            init_hidden,
            steps,
            terminal_raw_reward: terminal_raw,
        });
    }
    Ok((episodes, w_local))
}

/// Per-trial log entry; one JSON line each in the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialLogEntry {
    pub trial: usize,
    pub env_id: String,
    pub epsilon: f64,
    pub mean_final_reward: f64,
    pub mean_score: f64,
    pub selected_fraction: f64,
}

#[derive(Debug)]
pub struct MetaTrainOutcome {
    pub controller: ControllerWeights,
    pub predictor: PredictorWeights,
    pub log: Vec<TrialLogEntry>,
}

/// Algorithm-1 outer loop. When `checkpoint_dir` is set and
/// `checkpoint_every > 0`, periodic controller/predictor checkpoints are
/// written there.
pub fn meta_train(
    dist: &EnvironmentDistribution,
    cfg: &MetaTrainConfig,
    arch: &ControllerArch,
    pcfg: &PredictorConfig,
    ppo_cfg: &PPOConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<MetaTrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    pcfg.validate()?;
    ppo_cfg.validate()?;
    let mut ctrl = ControllerWeights::init(arch, cfg.seed)?;
    let mut shared = PredictorWeights::init(pcfg, cfg.seed);
    let mut state = ControllerState::new(arch.hidden_size);
    let mut rng = rng::stream(cfg.seed, "meta-train");
    let mut log = Vec::with_capacity(cfg.total_trials);

    for trial in 0..cfg.total_trials {
        let env = sample_environment(dist, &mut rng)?.clone();
        let (episodes, w_out) =
            run_trial(&env, &ctrl, &mut state, &shared, cfg, pcfg, &mut rng)?;
        // one PPO update per collected episode
        for ep in &episodes {
            ppo::ppo_update(&mut ctrl, std::slice::from_ref(ep), ppo_cfg)?;
        }
        let epsilon = predictor::anneal_epsilon(trial, cfg.total_trials)?;
        shared = predictor::reptile_sync(&shared, &w_out, epsilon)?;

        let finals: Vec<f64> = episodes
            .iter()
            .map(|e| e.steps.last().map_or(0.0, |s| s.reward))
            .collect();
        let mean_final_reward = finals.iter().sum::<f64>() / finals.len() as f64;
        if !mean_final_reward.is_finite() {
            return Err(Error::Numeric(format!(
                "trial {trial}: non-finite mean reward"
            )));
        }
        let mut score_sum = 0.0;
        let mut action_sum = 0.0;
        let mut count = 0usize;
        for s in episodes.iter().flat_map(|e| e.steps.iter()) {
            score_sum += s.behaviour_scores.iter().sum::<f64>();
            action_sum += s.actions.iter().map(|&a| f64::from(a)).sum::<f64>();
            count += s.actions.len();
        }
        log.push(TrialLogEntry {
            trial,
            env_id: env.env_id.clone(),
            epsilon,
            mean_final_reward,
            mean_score: score_sum / count as f64,
            selected_fraction: action_sum / count as f64,
        });

        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (trial + 1) % cfg.checkpoint_every == 0 {
                checkpoint::save_controller(
                    &dir.join(format!("controller_{trial:06}.ckpt")),
                    &ctrl,
                    ppo_cfg,
                )?;
                checkpoint::save_predictor(
                    &dir.join(format!("predictor_{trial:06}.ckpt")),
                    &shared,
                    pcfg,
                )?;
            }
        }
    }
    Ok(MetaTrainOutcome {
        controller: ctrl,
        predictor: shared,
        log,
    })
}

/// Serialise the training log as JSON lines.
pub fn write_log(path: &Path, log: &[TrialLogEntry]) -> Result<()> {
    let mut out = String::new();
    for entry in log {
        let line = serde_json::to_string(entry)
            .map_err(|e| Error::Format(format!("log encode: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{InstituteShift, ShapeClass, TaskSpec};

    fn tiny_dist(n_envs: usize) -> EnvironmentDistribution {
        let specs: Vec<TaskSpec> = (0..n_envs)
            .map(|i| TaskSpec {
                shape_class: if i % 2 == 0 {
                    ShapeClass::Disk
                } else {
                    ShapeClass::Rectangle
                },
                institute_shift: InstituteShift::default(),
                distractor_classes: vec![],
                image_size: (8, 8),
                corrupt_fraction: 0.0,
                task_tag: None,
                institute_tag: None,
            })
            .collect();
        crate::synth::generate_task_family(&specs, 8, 7).unwrap()
    }

    fn tiny_arch() -> ControllerArch {
        ControllerArch {
            image_h: 8,
            image_w: 8,
            conv_channels: [2, 2, 2],
            fc_size: 6,
            hidden_size: 5,
        }
    }

    fn tiny_pcfg() -> PredictorConfig {
        PredictorConfig {
            channel_widths: [2, 3, 4],
            max_epochs: 2,
            ..PredictorConfig::default()
        }
    }

    fn tiny_cfg() -> MetaTrainConfig {
        MetaTrainConfig {
            total_trials: 2,
            episodes_per_trial: 2,
            steps_per_episode: 2,
            minibatch_size: 2,
            predictor_steps_per_t: 1,
            seed: 3,
            checkpoint_every: 0,
        }
    }

    #[test]
    fn degenerate_distributions_sample_deterministically() {
        let mut dist = tiny_dist(2);
        let mut r = rng::stream(1, "se");
        dist.sampling_weights = vec![1.0, 0.0];
        for _ in 0..20 {
            assert_eq!(sample_environment(&dist, &mut r).unwrap().env_id, "env0");
        }
        let single = tiny_dist(1);
        for _ in 0..5 {
            assert_eq!(sample_environment(&single, &mut r).unwrap().env_id, "env0");
        }
        dist.sampling_weights = vec![-1.0, 2.0];
        assert!(sample_environment(&dist, &mut r).is_err());
    }

    #[test]
    fn uniform_sampling_concentrates() {
        let dist = tiny_dist(4);
        let mut r = rng::stream(2, "se-freq");
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let env = sample_environment(&dist, &mut r).unwrap();
            let i: usize = env.env_id.strip_prefix("env").unwrap().parse().unwrap();
            counts[i] += 1;
        }
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 3.0 * sigma, "freq {freq}");
        }
    }

    #[test]
    fn trial_bookkeeping_and_sparse_rewards() {
        let dist = tiny_dist(1);
        let arch = tiny_arch();
        let ctrl = ControllerWeights::init(&arch, 1).unwrap();
        let pred = PredictorWeights::init(&tiny_pcfg(), 1);
        let mut state = ControllerState::new(arch.hidden_size);
        state.hidden[0] = 9.0; // must be cleared by the in-trial reset
        let cfg = MetaTrainConfig {
            episodes_per_trial: 3,
            steps_per_episode: 4,
            ..tiny_cfg()
        };
        let mut r = rng::stream(5, "trial");
        let (episodes, _) = run_trial(
            &dist.environments[0],
            &ctrl,
            &mut state,
            &pred,
            &cfg,
            &tiny_pcfg(),
            &mut r,
        )
        .unwrap();
        assert_eq!(episodes.len(), 3);
        assert!(episodes[0].init_hidden.iter().all(|&v| v == 0.0));
        for ep in &episodes {
            assert_eq!(ep.steps.len(), 4);
            for s in &ep.steps[..3] {
                assert_eq!(s.reward, 0.0, "sparse rewards must be zero mid-episode");
            }
        }
        // memory is shared across episodes: the second episode starts from
        // the first episode's end state, not from zeros
        assert!(episodes[1].init_hidden.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_score_stub_leaves_predictor_unchanged() {
        let dist = tiny_dist(1);
        let arch = tiny_arch();
        let mut ctrl = ControllerWeights::init(&arch, 1).unwrap();
        // force scores to ~0 so no sample is ever selected
        for v in &mut ctrl.named_tensors["pol.w"].data {
            *v = 0.0;
        }
        ctrl.named_tensors["pol.b"].data[0] = -50.0;
        let pred = PredictorWeights::init(&tiny_pcfg(), 1);
        let mut state = ControllerState::new(arch.hidden_size);
        let mut r = rng::stream(6, "zero");
        let (episodes, w_out) = run_trial(
            &dist.environments[0],
            &ctrl,
            &mut state,
            &pred,
            &tiny_cfg(),
            &tiny_pcfg(),
            &mut r,
        )
        .unwrap();
        for s in episodes.iter().flat_map(|e| e.steps.iter()) {
            assert!(s.actions.iter().all(|&a| a == 0));
        }
        assert_eq!(w_out, pred);
    }

    #[test]
    fn perfect_predictor_stub_keeps_rewards_at_zero() {
        // all-background masks plus a predictor biased to predict nothing:
        // every validation loss is 0, so every raw reward is 0 and every
        // final reward after baseline seeding is exactly 0
        let mut dist = tiny_dist(1);
        let env = &mut dist.environments[0];
        for p in env
            .controller_train
            .pairs
            .iter_mut()
            .chain(env.controller_val.pairs.iter_mut())
        {
            p.mask = Tensor::zeros(&p.mask.shape);
        }
        let arch = tiny_arch();
        let ctrl = ControllerWeights::init(&arch, 2).unwrap();
        let pcfg = PredictorConfig {
            learning_rate: 1e-6,
            ..tiny_pcfg()
        };
        let mut pred = PredictorWeights::init(&pcfg, 1);
        for v in &mut pred.named_tensors["out.w"].data {
            *v = 0.0;
        }
        pred.named_tensors["out.b"].data[0] = -50.0;
        let mut state = ControllerState::new(arch.hidden_size);
        let mut r = rng::stream(7, "perfect");
        let cfg = MetaTrainConfig {
            episodes_per_trial: 2,
            steps_per_episode: 3,
            ..tiny_cfg()
        };
        let (episodes, _) = run_trial(
            &dist.environments[0],
            &ctrl,
            &mut state,
            &pred,
            &cfg,
            &pcfg,
            &mut r,
        )
        .unwrap();
        for ep in &episodes {
            assert!(ep.terminal_raw_reward.abs() < 1e-9);
            for s in &ep.steps {
                assert!(s.reward.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn meta_train_bookkeeping_and_reproducibility() {
        let dist = tiny_dist(2);
        let cfg = tiny_cfg();
        let run = || {
            meta_train(
                &dist,
                &cfg,
                &tiny_arch(),
                &tiny_pcfg(),
                &PPOConfig::default(),
                None,
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a.log.len(), cfg.total_trials);
        assert_eq!(a.log[0].trial, 0);
        assert!(a.log.iter().all(|e| e.mean_score > 0.0 && e.mean_score < 1.0));
        assert!((a.log[0].epsilon - 1.0).abs() < 1e-15);
        assert!(a.log.last().unwrap().epsilon.abs() < 1e-15);

        let b = run();
        assert_eq!(a.controller.named_tensors, b.controller.named_tensors);
        assert_eq!(a.predictor.named_tensors, b.predictor.named_tensors);
    }

    #[test]
    fn single_trial_single_episode_log() {
        let dist = tiny_dist(1);
        let cfg = MetaTrainConfig {
            total_trials: 1,
            episodes_per_trial: 1,
            steps_per_episode: 1,
            ..tiny_cfg()
        };
        let out = meta_train(
            &dist,
            &cfg,
            &tiny_arch(),
            &tiny_pcfg(),
            &PPOConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(out.log.len(), 1);
        assert!((out.log[0].epsilon - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_serialises_as_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let log = vec![
            TrialLogEntry {
                trial: 0,
                env_id: "env0".into(),
                epsilon: 1.0,
                mean_final_reward: 0.0,
                mean_score: 0.5,
                selected_fraction: 0.5,
            },
            TrialLogEntry {
                trial: 1,
                env_id: "env1".into(),
                epsilon: 0.0,
                mean_final_reward: 0.1,
                mean_score: 0.4,
                selected_fraction: 0.25,
            },
        ];
        write_log(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: TrialLogEntry = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(back.trial, 1);
        assert_eq!(back.env_id, "env1");
    }
}
