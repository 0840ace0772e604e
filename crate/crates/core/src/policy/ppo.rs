use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::{sequence_grad, SequenceStep};
use super::{masked_log_softmax, masked_softmax, PolicyError, PolicyParams, RecurrentState};
use crate::embodiment::NUM_ACTIONS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub epochs: usize,
    /// Steps per minibatch; rounded to whole BPTT chunks.
    pub minibatch_size: usize,
    /// Steps each worker collects per update.
    pub rollout_len: usize,
    /// Truncated backpropagation length.
    pub bptt_len: usize,
    pub total_updates: u64,
    /// Multiplier applied to rewards before advantage estimation.
    pub reward_scale: f64,
    /// Scaled rewards are clamped to `[-c, c]` when set. Only the training
    /// signal is affected; logged rewards stay exact.
    pub reward_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            learning_rate: 2.5e-4,
            max_grad_norm: 0.5,
            epochs: 4,
            minibatch_size: 256,
            rollout_len: 128,
            bptt_len: 128,
            total_updates: 3000,
            reward_scale: 1.0,
            reward_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::ConfigInvalid(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must be in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) || !(self.reward_scale > 0.0)
        {
            return bad("learning_rate, max_grad_norm and reward_scale must be positive");
        }
        if self.reward_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("reward_clip must be positive");
        }
        if self.epochs == 0
            || self.minibatch_size == 0
            || self.rollout_len == 0
            || self.bptt_len == 0
        {
            return bad("epochs, minibatch_size, rollout_len and bptt_len must be positive");
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return bad("loss coefficients must be non-negative");
        }
        Ok(())
    }
}

/// One collected step. `h` is the hidden state that was fed into the
/// network at this step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub h: Vec<f64>,
    pub action: usize,
    pub sample_allowed: bool,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    /// The episode ended after this step.
    pub done: bool,
}

/// Contiguous steps from one worker, plus the critic's estimate for the
/// state following the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSegment {
    pub steps: Vec<Transition>,
    pub bootstrap_value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBatch {
    pub segments: Vec<RolloutSegment>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// GAE: `delta_t = r_t + gamma V_{t+1} (1 - d_t) - V_t`,
/// `A_t = delta_t + gamma lambda (1 - d_t) A_{t+1}`; returns `A + V`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(PolicyError::LengthMismatch(format!(
            "rewards {n}, values {}, dones {}",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Shift to zero mean and scale to unit variance (population).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for a in adv.iter_mut() {
        *a = if sd > 1e-12 { (*a - mean) / sd } else { 0.0 };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Advantages, returns and BPTT chunks for a batch.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub advantages: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
    /// `(segment, start, end)` step ranges.
    pub chunks: Vec<(usize, usize, usize)>,
}

/// GAE per segment, batch-wide advantage normalization, chunking.
pub fn prepare(batch: &RolloutBatch, cfg: &TrainConfig) -> Result<Prepared, PolicyError> {
    let mut advantages = Vec::new();
    let mut returns = Vec::new();
    let mut chunks = Vec::new();
    for (si, seg) in batch.segments.iter().enumerate() {
        let r: Vec<f64> = seg
            .steps
            .iter()
            .map(|s| {
                let r = s.reward * cfg.reward_scale;
                cfg.reward_clip.map_or(r, |c| r.clamp(-c, c))
            })
            .collect();
        let v: Vec<f64> = seg.steps.iter().map(|s| s.value).collect();
        let d: Vec<bool> = seg.steps.iter().map(|s| s.done).collect();
        let (a, ret) = compute_gae(&r, &v, &d, seg.bootstrap_value, cfg.gamma, cfg.gae_lambda)?;
        advantages.push(a);
        returns.push(ret);
        let mut start = 0;
        while start < seg.steps.len() {
            let end = (start + cfg.bptt_len).min(seg.steps.len());
            chunks.push((si, start, end));
            start = end;
        }
    }
    let mut flat: Vec<f64> = advantages.iter().flatten().copied().collect();
    normalize_advantages(&mut flat);
    let mut it = flat.into_iter();
    for a in &mut advantages {
        for v in a.iter_mut() {
            *v = it.next().expect("same length");
        }
    }
    Ok(Prepared {
        advantages,
        returns,
        chunks,
    })
}

/// Clipped-surrogate loss plus value and entropy terms over the chosen
/// chunks, averaged per step, with its exact gradient.
pub fn loss_and_grad(
    params: &PolicyParams,
    batch: &RolloutBatch,
    prep: &Prepared,
    chunk_ids: &[usize],
    cfg: &TrainConfig,
) -> Result<(LossStats, Vec<f64>), PolicyError> {
    let steps_total: usize = chunk_ids
        .iter()
        .map(|&c| prep.chunks[c].2 - prep.chunks[c].1)
        .sum();
    if steps_total == 0 {
        return Err(PolicyError::LengthMismatch("empty minibatch".into()));
    }
    let inv = 1.0 / steps_total as f64;
    let mut grad = vec![0.0; params.values.len()];
    let mut st = LossStats::default();
    let mut clipped = 0usize;
    for &c in chunk_ids {
        let (si, start, end) = prep.chunks[c];
        let seg = &batch.segments[si].steps[start..end];
        let adv = &prep.advantages[si][start..end];
        let ret = &prep.returns[si][start..end];
        let seq: Vec<SequenceStep<'_>> = seg
            .iter()
            .enumerate()
            .map(|(i, s)| SequenceStep {
                obs: &s.obs,
                reset: i > 0 && seg[i - 1].done,
            })
            .collect();
        let h0 = RecurrentState {
            h: seg[0].h.clone(),
        };
        sequence_grad(
            params,
            &h0,
            &seq,
            |t, out| {
                let s = &seg[t];
                let a = adv[t];
                let logp = masked_log_softmax(&out.logits, s.sample_allowed);
                let p = masked_softmax(&out.logits, s.sample_allowed);
                let ratio = (logp[s.action] - s.log_prob).exp();
                let lo = 1.0 - cfg.clip;
                let hi = 1.0 + cfg.clip;
                let unclipped = ratio * a;
                let clipped_term = ratio.clamp(lo, hi) * a;
                st.policy_loss -= unclipped.min(clipped_term) * inv;
                if ratio < lo || ratio > hi {
                    clipped += 1;
                }
                st.approx_kl += (s.log_prob - logp[s.action]) * inv;
                // gradient flows through the unclipped branch when it is the minimum
                let dlogp = if unclipped <= clipped_term {
                    -a * ratio * inv
                } else {
                    0.0
                };

                let mut ent = 0.0;
                for j in 0..NUM_ACTIONS {
                    if p[j] > 0.0 {
                        ent -= p[j] * logp[j];
                    }
                }
                st.entropy += ent * inv;

                let mut dl = [0.0; NUM_ACTIONS];
                for j in 0..NUM_ACTIONS {
                    if p[j] > 0.0 {
                        let onehot = if j == s.action { 1.0 } else { 0.0 };
                        dl[j] = dlogp * (onehot - p[j])
                            + cfg.entropy_coef * inv * p[j] * (logp[j] + ent);
                    }
                }
                let err = out.value - ret[t];
                st.value_loss += err * err * inv;
                (dl, 2.0 * cfg.value_coef * err * inv)
            },
            &mut grad,
        )?;
    }
    st.total = st.policy_loss + cfg.value_coef * st.value_loss - cfg.entropy_coef * st.entropy;
    st.clip_fraction = clipped as f64 * inv;
    st.grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok((st, grad))
}

/// Several epochs of minibatch updates over one batch. Returns stats
/// averaged over minibatches.
pub fn ppo_update<R: Rng>(
    params: &mut PolicyParams,
    adam: &mut Adam,
    batch: &RolloutBatch,
    cfg: &TrainConfig,
    rng: &mut R,
    update: u64,
) -> Result<LossStats, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::LengthMismatch("empty rollout batch".into()));
    }
    let prep = prepare(batch, cfg)?;
    let per_mb = (cfg.minibatch_size / cfg.bptt_len).max(1);
    let mut order: Vec<usize> = (0..prep.chunks.len()).collect();
    let mut acc = LossStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for mb in order.chunks(per_mb) {
            let (st, mut grad) = loss_and_grad(params, batch, &prep, mb, cfg)?;
            if !st.total.is_finite() || !st.grad_norm.is_finite() {
                return Err(PolicyError::NonFiniteLoss {
                    update,
                    detail: format!(
                        "policy {} value {} entropy {} grad norm {}",
                        st.policy_loss, st.value_loss, st.entropy, st.grad_norm
                    ),
                });
            }
            if st.grad_norm > cfg.max_grad_norm {
                let s = cfg.max_grad_norm / st.grad_norm;
                for g in &mut grad {
                    *g *= s;
                }
            }
            adam.step(&mut params.values, &grad, cfg.learning_rate);
            acc.policy_loss += st.policy_loss;
            acc.value_loss += st.value_loss;
            acc.entropy += st.entropy;
            acc.total += st.total;
            acc.approx_kl += st.approx_kl;
            acc.clip_fraction += st.clip_fraction;
            acc.grad_norm += st.grad_norm;
            count += 1.0;
        }
    }
    Ok(LossStats {
        policy_loss: acc.policy_loss / count,
        value_loss: acc.value_loss / count,
        entropy: acc.entropy / count,
        total: acc.total / count,
        approx_kl: acc.approx_kl / count,
        clip_fraction: acc.clip_fraction / count,
        grad_norm: acc.grad_norm / count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_gae() {
        let (a, r) = compute_gae(&[0.5], &[0.2], &[false], 0.7, 1.0, 1.0).unwrap();
        assert!((a[0] - (0.5 + 0.7 - 0.2)).abs() < 1e-15);
        assert!((r[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn zero_inputs_zero_advantages() {
        let (a, _) = compute_gae(
            &[0.0; 5],
            &[0.0; 5],
            &[false, false, true, false, false],
            0.0,
            0.9,
            0.8,
        )
        .unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            compute_gae(&[0.0; 3], &[0.0; 2], &[false; 3], 0.0, 0.9, 0.9),
            Err(PolicyError::LengthMismatch(_))
        ));
    }

    #[test]
    fn normalization_moments() {
        let mut a = vec![1.0, 2.0, 3.0, 10.0, -4.0];
        normalize_advantages(&mut a);
        let m = a.iter().sum::<f64>() / 5.0;
        let v = a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 5.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = vec![1.0, -1.0];
        let mut opt = Adam::new(2);
        opt.step(&mut p, &[0.5, -2.0], 0.1);
        assert!(p[0] < 1.0 && p[1] > -1.0);
    }
}
