use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{episode_seed, parallel_map, run_episode, AgentSpec, Config, Episode, HarnessError, NamedAgent, WorldPool};
use crate::embodiment::ActionCommand;
use crate::policy::{
    config_hash, masked_log_softmax, policy_forward, ppo_update, sample_action, Adam, Checkpoint, LossStats,
    PolicyParams, RecurrentState, RolloutBatch, RolloutSegment, Transition, CHECKPOINT_VERSION,
};
use crate::rng::{derive_seed, streams, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub update: u64,
    pub mean_reward: f64,
    pub r_a: f64,
    pub r_v: f64,
    pub r_n: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean final validation error, on updates that validated.
    pub eval_stft_l1: Option<f64>,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "update,mean_reward,r_a,r_v,r_n,policy_loss,value_loss,entropy,eval_stft_l1";

    pub fn csv_line(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},{},",
            self.update,
            self.mean_reward,
            self.r_a,
            self.r_v,
            self.r_n,
            self.policy_loss,
            self.value_loss,
            self.entropy
        );
        if let Some(v) = self.eval_stft_l1 {
            let _ = write!(s, "{v}");
        }
        s
    }

    pub fn to_csv(rows: &[MetricsRow]) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in rows {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub latest: Checkpoint,
    /// Parameters with the lowest validation error so far.
    pub best: PolicyParams,
    pub metrics: Vec<MetricsRow>,
    /// Evaluator calls made while collecting rollouts.
    pub rollout_evaluations: usize,
}

/// Optional progress callback, called after every update.
pub type TrainProgress<'a> = &'a mut dyn FnMut(&MetricsRow);

struct SlotResult {
    segment: RolloutSegment,
    reward: f64,
    r_a: f64,
    r_v: f64,
    r_n: f64,
    evaluations: usize,
}

fn rollout(pool: &WorldPool, cfg: &Config, params: &PolicyParams, update: u64, slot: usize) -> Result<SlotResult, HarnessError> {
    let seed = derive_seed(derive_seed(cfg.seed, "train-episode", update), "slot", slot as u64);
    let world_index = (derive_seed(seed, "world", 0) % pool.len() as u64) as usize;
    let env = pool.get(world_index)?;
    let track = cfg.rewards.lambda_a > 0.0;
    let mut ep = Episode::new(&env, cfg, seed, track)?;
    let mut rng = substream(seed, streams::ACTIONS, 0);
    let mut h = RecurrentState::zeros(&params.config);
    let mut steps = Vec::with_capacity(cfg.episode.horizon);
    let (mut reward, mut r_a, mut r_v, mut r_n) = (0.0, 0.0, 0.0, 0.0);
    while !ep.done() {
        let obs = ep.observation(&params.config);
        let out = policy_forward(params, &obs, &h)?;
        let allowed = ep.sample_allowed();
        let action = sample_action(&out.logits, &mut rng, allowed);
        let log_prob = masked_log_softmax(&out.logits, allowed)[action];
        let rec = ep.step(ActionCommand::from_index(action))?;
        reward += rec.reward.total;
        r_a += rec.reward.r_a;
        r_v += rec.reward.r_v;
        r_n += rec.reward.r_n;
        steps.push(Transition {
            obs,
            h: std::mem::replace(&mut h, out.h_next).h,
            action,
            sample_allowed: allowed,
            log_prob,
            value: out.value,
            reward: rec.reward.total,
            done: false,
        });
    }
    if let Some(last) = steps.last_mut() {
        last.done = true;
    }
    let n = steps.len().max(1) as f64;
    Ok(SlotResult {
        segment: RolloutSegment { steps, bootstrap_value: 0.0 },
        reward: reward / n,
        r_a: r_a / n,
        r_v: r_v / n,
        r_n: r_n / n,
        evaluations: ep.evaluator_calls(),
    })
}

/// Mean final error of a policy over the validation split.
pub fn validate(pool: &WorldPool, cfg: &Config, params: &PolicyParams) -> Result<f64, HarnessError> {
    let agent = NamedAgent { name: "policy".into(), spec: AgentSpec::Policy { params: Arc::new(params.clone()), schedule: false } };
    let jobs: Vec<(usize, usize)> =
        (0..pool.len()).flat_map(|w| (0..cfg.trainer.val_episodes).map(move |s| (w, s))).collect();
    let results = parallel_map(&jobs, cfg.workers, |&(w, s)| -> Result<f64, HarnessError> {
        let env = pool.get(w)?;
        Ok(run_episode(&env, cfg, &agent, episode_seed(cfg, pool.split(), w, s))?.log.final_l_r)
    });
    let mut sum = 0.0;
    for r in &results {
        sum += *r.as_ref().map_err(|e| HarnessError::Episode(e.to_string()))?;
    }
    Ok(sum / results.len().max(1) as f64)
}

fn save(dir: &Path, latest: &Checkpoint, best: &PolicyParams, best_val: Option<(u64, f64)>) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("checkpoint.json"), latest.to_json())?;
    let b = Checkpoint { params: best.clone(), best_val, ..latest.clone() };
    std::fs::write(dir.join("best.json"), b.to_json())?;
    Ok(())
}

/// PPO training over the train split. Each update collects one full
/// episode per slot; slots run on `cfg.workers` threads with results
/// combined in slot order, so the outcome does not depend on the worker
/// count. With `resume`, training continues from a `(latest, best)` pair.
/// `stop_after` ends early after that many total updates (with a
/// checkpoint), which is how interrupted runs are simulated.
pub fn train_policy(
    cfg: &Config,
    train: &WorldPool,
    val: &WorldPool,
    resume: Option<(Checkpoint, Checkpoint)>,
    stop_after: Option<u64>,
    out_dir: Option<&Path>,
    mut progress: Option<TrainProgress<'_>>,
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(HarnessError::Config("training needs at least one train world".into()));
    }
    let hash = config_hash(&(&cfg.policy, &cfg.train, &cfg.rewards, &cfg.episode, cfg.seed));
    let (mut params, mut adam, mut update, mut best, mut best_val) = match resume {
        Some((latest, best)) => {
            if latest.config_hash != hash {
                return Err(HarnessError::Config("checkpoint was written under a different config".into()));
            }
            (latest.params, latest.adam, latest.update, best.params, latest.best_val)
        }
        None => {
            let p = PolicyParams::init(&cfg.policy, &mut substream(cfg.seed, streams::POLICY_INIT, 0));
            let a = Adam::new(p.len());
            (p.clone(), a, 0, p, None)
        }
    };
    let mut metrics = Vec::new();
    let mut evaluations = 0;
    let total = cfg.train.total_updates;
    let slots: Vec<usize> = (0..cfg.trainer.episodes_per_update).collect();
    let mut mb_rng = substream(cfg.seed, streams::MINIBATCH, update);
    while update < total {
        let snapshot = params.clone();
        let results = parallel_map(&slots, cfg.workers, |&s| rollout(train, cfg, &snapshot, update, s));
        let mut batch = RolloutBatch::default();
        let (mut rw, mut ra, mut rv, mut rn) = (0.0, 0.0, 0.0, 0.0);
        for r in results {
            let r = r?;
            rw += r.reward;
            ra += r.r_a;
            rv += r.r_v;
            rn += r.r_n;
            evaluations += r.evaluations;
            batch.segments.push(r.segment);
        }
        let k = slots.len() as f64;
        mb_rng = substream(cfg.seed, streams::MINIBATCH, update);
        let st: LossStats = ppo_update(&mut params, &mut adam, &batch, &cfg.train, &mut mb_rng, update)?;
        update += 1;
        let validate_now = val.len() > 0
            && ((cfg.trainer.val_every > 0 && update % cfg.trainer.val_every == 0) || update == total);
        let eval = if validate_now { Some(validate(val, cfg, &params)?) } else { None };
        if let Some(v) = eval {
            if best_val.map_or(true, |(_, b)| v < b) {
                best_val = Some((update, v));
                best = params.clone();
            }
        }
        let row = MetricsRow {
            update,
            mean_reward: rw / k,
            r_a: ra / k,
            r_v: rv / k,
            r_n: rn / k,
            policy_loss: st.policy_loss,
            value_loss: st.value_loss,
            entropy: st.entropy,
            eval_stft_l1: eval,
        };
        if let Some(cb) = progress.as_mut() {
            cb(&row);
        }
        metrics.push(row);
        let stopping = stop_after == Some(update);
        let latest = || Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: hash.clone(),
            update,
            params: params.clone(),
            adam: adam.clone(),
            rng_states: vec![mb_rng.clone()],
            best_val,
        };
        if let Some(dir) = out_dir {
            if stopping || update == total || (cfg.trainer.checkpoint_every > 0 && update % cfg.trainer.checkpoint_every == 0)
            {
                save(dir, &latest(), &best, best_val)?;
            }
        }
        if stopping {
            break;
        }
    }
    if best_val.is_none() {
        best = params.clone();
    }
    let latest = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash: hash,
        update,
        params,
        adam,
        rng_states: vec![mb_rng],
        best_val,
    };
    Ok(TrainOutcome { latest, best, metrics, rollout_evaluations: evaluations })
}
