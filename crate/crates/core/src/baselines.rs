//! Non-learned comparison agents and the fixed sampling schedule.
//!
//! Steps are 1-indexed: `t` runs from 1 to `horizon`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embodiment::{ActionCommand, Motion, Sampling, NUM_ACTIONS};
use crate::policy::{is_sample_action, masked_softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Random,
    Forward,
    Greedy,
    /// Trained policy motion with sampling forced onto the fixed schedule.
    UniformSchedule,
    /// A policy trained without the acoustic reward.
    ExplorationOnly,
}

const MOTIONS: [Motion; 3] = [Motion::MoveForward, Motion::TurnLeft, Motion::TurnRight];

/// Sampling period of the fixed schedule, `floor(T / N)`, at least 1.
pub fn schedule_period(horizon: usize, budget: usize) -> usize {
    if budget == 0 {
        return usize::MAX;
    }
    (horizon / budget).max(1)
}

/// Whether the fixed schedule samples at step `t`.
pub fn schedule_samples(t: usize, horizon: usize, budget: usize, used: usize) -> bool {
    used < budget && t % schedule_period(horizon, budget) == 0
}

fn sampling(flag: bool) -> Sampling {
    if flag {
        Sampling::Sample
    } else {
        Sampling::Skip
    }
}

/// Uniform over the 6 composite actions while budget remains, uniform over
/// the 3 Skip actions afterwards.
pub fn random_agent_step<R: Rng>(rng: &mut R, budget_left: bool) -> ActionCommand {
    if budget_left {
        ActionCommand::from_index(rng.gen_range(0..NUM_ACTIONS))
    } else {
        ActionCommand::new(MOTIONS[rng.gen_range(0..3)], Sampling::Skip)
    }
}

/// Moves forward and samples on the fixed schedule; turns left for one
/// step after a blocked move.
pub fn forward_agent_step(t: usize, horizon: usize, budget: usize, used: usize, blocked_last: bool) -> ActionCommand {
    let motion = if blocked_last { Motion::TurnLeft } else { Motion::MoveForward };
    ActionCommand::new(motion, sampling(schedule_samples(t, horizon, budget, used)))
}

/// Random motion; samples on each of the first `budget` steps.
pub fn greedy_agent_step<R: Rng>(t: usize, budget: usize, rng: &mut R) -> ActionCommand {
    ActionCommand::new(MOTIONS[rng.gen_range(0..3)], sampling(t <= budget))
}

/// Motion drawn from the policy's motion marginal (Sample and Skip
/// probabilities summed per motion); sampling follows the fixed schedule.
pub fn uniform_schedule_wrap<R: Rng>(
    logits: &[f64; NUM_ACTIONS],
    t: usize,
    horizon: usize,
    budget: usize,
    used: usize,
    rng: &mut R,
) -> ActionCommand {
    let p = masked_softmax(logits, true);
    let mut marginal = [0.0; 3];
    for (i, &pi) in p.iter().enumerate() {
        marginal[i / 2] += pi;
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut m = 2;
    for (k, &pk) in marginal.iter().enumerate() {
        acc += pk;
        if u < acc {
            m = k;
            break;
        }
    }
    debug_assert!(is_sample_action(2 * m));
    ActionCommand::new(MOTIONS[m], sampling(schedule_samples(t, horizon, budget, used)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn forward_schedule_hits_every_tenth_step() {
        let mut used = 0;
        let mut at = Vec::new();
        for t in 1..=200 {
            let a = forward_agent_step(t, 200, 20, used, false);
            assert_eq!(a.motion, Motion::MoveForward);
            if a.samples() {
                used += 1;
                at.push(t);
            }
        }
        assert_eq!(at, (1..=20).map(|k| 10 * k).collect::<Vec<_>>());
    }

    #[test]
    fn forward_turns_after_block() {
        assert_eq!(forward_agent_step(3, 200, 20, 0, true).motion, Motion::TurnLeft);
    }

    #[test]
    fn greedy_samples_first_n() {
        let mut rng = substream(0, "t", 0);
        for t in 1..=200 {
            assert_eq!(greedy_agent_step(t, 20, &mut rng).samples(), t <= 20);
        }
    }

    #[test]
    fn random_respects_budget() {
        let mut rng = substream(1, "t", 0);
        for _ in 0..1000 {
            assert!(!random_agent_step(&mut rng, false).samples());
        }
    }

    #[test]
    fn random_is_reproducible() {
        let a: Vec<_> = {
            let mut rng = substream(2, "t", 0);
            (0..50).map(|_| random_agent_step(&mut rng, true)).collect()
        };
        let b: Vec<_> = {
            let mut rng = substream(2, "t", 0);
            (0..50).map(|_| random_agent_step(&mut rng, true)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn wrap_uses_schedule_and_motion_marginal() {
        let mut rng = substream(3, "t", 0);
        // all mass on TurnRight (Sample and Skip variants)
        let logits = [-50.0, -50.0, -50.0, -50.0, 0.0, 0.0];
        let mut used = 0;
        for t in 1..=200 {
            let a = uniform_schedule_wrap(&logits, t, 200, 20, used, &mut rng);
            assert_eq!(a.motion, Motion::TurnRight);
            assert_eq!(a.samples(), t % 10 == 0);
            if a.samples() {
                used += 1;
            }
        }
        assert_eq!(used, 20);
    }
}
