//! Validation-set reward signal: weighted losses, exponential moving-average
//! baseline, final reward, and the sparse per-step distribution.

use crate::error::{Error, Result};
use crate::par;
use crate::predictor::{self, PredictorConfig, PredictorWeights};
use crate::synth::LabeledDataset;
use serde::{Deserialize, Serialize};

pub const DEFAULT_ALPHA_R: f64 = 0.9;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RewardState {
    pub moving_average: f64,
    pub alpha_r: f64,
    pub initialised: bool,
}

impl RewardState {
    pub fn new(alpha_r: f64) -> Self {
        RewardState {
            moving_average: 0.0,
            alpha_r,
            initialised: false,
        }
    }
}

impl Default for RewardState {
    fn default() -> Self {
        RewardState::new(DEFAULT_ALPHA_R)
    }
}

/// Per-sample validation losses 1 - dice(thresholded prediction, truth),
/// order-aligned with `val`.
pub fn validation_losses(
    w: &PredictorWeights,
    cfg: &PredictorConfig,
    val: &LabeledDataset,
) -> Result<Vec<f64>> {
    if val.is_empty() {
        return Err(Error::Config("validation_losses: empty dataset".into()));
    }
    par::map_indexed(&val.pairs, |p| {
        let probs = predictor::predict(w, cfg, &p.image)?;
        Ok(1.0 - predictor::dice_score(&predictor::threshold(&probs), &p.mask)?)
    })
    .into_iter()
    .collect()
}

/// Raw reward: negative mean of losses weighted by prioritisation scores.
pub fn raw_reward(losses: &[f64], weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(Error::Shape(format!(
            "raw_reward: {} losses vs {} weights",
            losses.len(),
            weights.len()
        )));
    }
    if losses.is_empty() {
        return Err(Error::Shape("raw_reward: empty inputs".into()));
    }
    let m = losses.len() as f64;
    Ok(-losses.iter().zip(weights).map(|(l, h)| l * h).sum::<f64>() / m)
}

/// Exponential update of the baseline; first observation seeds it directly.
pub fn update_baseline(state: &mut RewardState, raw: f64) -> Result<()> {
    if !raw.is_finite() {
        return Err(Error::Numeric(format!("update_baseline: raw reward {raw}")));
    }
    if state.initialised {
        state.moving_average = state.alpha_r * state.moving_average + (1.0 - state.alpha_r) * raw;
    } else {
        state.moving_average = raw;
        state.initialised = true;
    }
    Ok(())
}

/// Final reward R = raw - baseline (pre-update); the baseline then absorbs
/// this observation. An uninitialised state is seeded first, making the
/// first final reward zero.
pub fn final_reward(state: &mut RewardState, raw: f64) -> Result<f64> {
    if !state.initialised {
        update_baseline(state, raw)?;
        return Ok(0.0);
    }
    let r = raw - state.moving_average;
    update_baseline(state, raw)?;
    Ok(r)
}

/// Zeros except the final element, which carries the episode reward.
pub fn sparse_episode_rewards(terminal: f64, len: usize) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::Domain("sparse_episode_rewards: zero length".into()));
    }
    let mut out = vec![0.0; len];
    out[len - 1] = terminal;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_reward_hand_cases() {
        assert!((raw_reward(&[0.2, 0.4], &[1.0, 0.5]).unwrap() + 0.2).abs() < 1e-12);
        assert_eq!(raw_reward(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(raw_reward(&[1.0], &[1.0]).unwrap(), -1.0);
        assert!(raw_reward(&[0.1], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn raw_reward_bounds_and_monotonicity() {
        let base = raw_reward(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((-1.0..=0.0).contains(&base));
        // increasing a loss decreases the reward
        let worse = raw_reward(&[0.9, 0.5], &[0.5, 0.5]).unwrap();
        assert!(worse < base);
        // increasing a weight paired with a positive loss decreases it too
        let heavier = raw_reward(&[0.5, 0.5], &[0.9, 0.5]).unwrap();
        assert!(heavier < base);
    }

    #[test]
    fn baseline_update_hand_cases() {
        let mut s = RewardState {
            moving_average: 0.0,
            alpha_r: 0.9,
            initialised: true,
        };
        update_baseline(&mut s, 1.0).unwrap();
        assert!((s.moving_average - 0.1).abs() < 1e-12);

        let mut frozen = RewardState {
            moving_average: 0.5,
            alpha_r: 1.0,
            initialised: true,
        };
        update_baseline(&mut frozen, 3.0).unwrap();
        assert_eq!(frozen.moving_average, 0.5);

        let mut track = RewardState {
            moving_average: 0.5,
            alpha_r: 0.0,
            initialised: true,
        };
        update_baseline(&mut track, 3.0).unwrap();
        assert_eq!(track.moving_average, 3.0);
    }

    #[test]
    fn final_reward_hand_cases() {
        let mut s = RewardState {
            moving_average: -0.3,
            alpha_r: 0.9,
            initialised: true,
        };
        assert!((final_reward(&mut s, -0.2).unwrap() - 0.1).abs() < 1e-12);
        let mut eq = RewardState {
            moving_average: 0.4,
            alpha_r: 0.9,
            initialised: true,
        };
        assert_eq!(final_reward(&mut eq, 0.4).unwrap(), 0.0);
    }

    #[test]
    fn constant_sequence_decays_geometrically() {
        // baseline starts away from the constant input, so the gap decays
        // with ratio alpha_r per step
        let mut s = RewardState {
            moving_average: 0.0,
            alpha_r: 0.9,
            initialised: true,
        };
        let raw = -0.37;
        let mut prev = None;
        for step in 0..100 {
            let r = final_reward(&mut s, raw).unwrap();
            if let Some(p) = prev {
                let ratio: f64 = r / p;
                assert!((ratio - 0.9).abs() < 1e-9, "step {step}: ratio {ratio}");
            }
            prev = Some(r);
        }
        assert!(prev.unwrap().abs() < 1e-3);

        // seeded baseline: a constant sequence yields all-zero rewards
        let mut fresh = RewardState::default();
        for _ in 0..5 {
            assert_eq!(final_reward(&mut fresh, raw).unwrap(), 0.0);
        }
    }

    #[test]
    fn baseline_matches_closed_form() {
        use rand::Rng;
        let mut rng = crate::rng::stream(1, "closed-form");
        let alpha = 0.9;
        let r0 = -0.5;
        let mut s = RewardState {
            moving_average: r0,
            alpha_r: alpha,
            initialised: true,
        };
        let raws: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..0.0)).collect();
        for &r in &raws {
            update_baseline(&mut s, r).unwrap();
        }
        let t = raws.len() as i32;
        let closed = alpha.powi(t) * r0
            + (1.0 - alpha)
                * raws
                    .iter()
                    .enumerate()
                    .map(|(k, &r)| alpha.powi(t - 1 - k as i32) * r)
                    .sum::<f64>();
        assert!((s.moving_average - closed).abs() < 1e-10);
    }

    #[test]
    fn sparse_rewards_pattern() {
        assert_eq!(sparse_episode_rewards(0.5, 3).unwrap(), vec![0.0, 0.0, 0.5]);
        assert_eq!(sparse_episode_rewards(0.5, 1).unwrap(), vec![0.5]);
        let v = sparse_episode_rewards(-0.25, 7).unwrap();
        assert_eq!(v.iter().sum::<f64>(), -0.25);
        assert!(sparse_episode_rewards(1.0, 0).is_err());
    }

    #[test]
    fn reward_state_serialises_round_trip() {
        let s = RewardState {
            moving_average: -0.123456,
            alpha_r: 0.9,
            initialised: true,
        };
        let json = serde_json::to_string(&s).unwrap();
        let back: RewardState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
