use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Config, HarnessError, RewardMode};
use crate::acoustics::{Rir, SourceReceiverQuery};
use crate::embodiment::{
    apply_action, capture_echo, depth_scan, observe_pose, update_occupancy, ActionCommand, AgentPose, DepthScan,
    OccupancyMap, Pose,
};
use crate::policy::{encode_observation, ObservationInput, PolicyConfig};
use crate::renderer::{extract_features, quantize_error, ContextSample, ContextSet, EchoFeatures, Evaluator, GroundTruth};
use crate::rewards::{
    acoustic_reward, coverage_reward, local_acoustic_reward, nearest_query, novelty_reward, total_reward,
    RewardBreakdown,
};
use crate::rng::{derive_seed, streams, substream};
use crate::world::{generate_world, World, WorldSpec};

/// A world plus everything reusable across its episodes: ground truth for
/// the evaluation queries and a cache of captured echoes.
#[derive(Debug)]
pub struct WorldEnv {
    pub world: World,
    pub gt: Arc<GroundTruth>,
    echoes: Mutex<HashMap<[i64; 3], Arc<Rir>>>,
}

impl WorldEnv {
    pub fn new(world: World, gt: GroundTruth) -> Self {
        Self { world, gt: Arc::new(gt), echoes: Mutex::new(HashMap::new()) }
    }

    /// Echo at `pose`, traced once per distinct pose.
    pub fn echo(&self, pose: &Pose, cfg: &Config) -> Result<Arc<Rir>, HarnessError> {
        let key = [(pose.x * 1e6).round() as i64, (pose.y * 1e6).round() as i64, (pose.theta_deg * 1e6).round() as i64];
        if let Some(e) = self.echoes.lock().expect("echo cache lock").get(&key) {
            return Ok(e.clone());
        }
        let rir = Arc::new(capture_echo(&self.world, pose, &cfg.acoustics)?);
        self.echoes.lock().expect("echo cache lock").insert(key, rir.clone());
        Ok(rir)
    }
}

/// World spec for pool member `index`; retries shift the index stream.
pub fn world_spec(cfg: &Config, split: &str, index: usize, attempt: u64) -> WorldSpec {
    let w = &cfg.worlds;
    let seed = derive_seed(derive_seed(cfg.seed, streams::WORLDGEN, index as u64), split, attempt);
    let mut rng = substream(seed, streams::WORLDGEN, 0);
    let ex = rng.gen_range(w.extent_min..=w.extent_max);
    let ey = rng.gen_range(w.extent_min..=w.extent_max);
    let rooms = rng.gen_range(w.rooms_min..=w.rooms_max);
    WorldSpec {
        seed,
        extent: [f64::from(ex), f64::from(ey)],
        room_count: rooms,
        corridor_width: w.corridor_width,
        cell_size: w.cell_size,
        material_palette: w.palette.clone(),
        max_retries: 64,
    }
}

pub fn generate_pool_world(cfg: &Config, split: &str, index: usize) -> Result<World, HarnessError> {
    let mut last = None;
    for attempt in 0..16 {
        match generate_world(&world_spec(cfg, split, index, attempt)) {
            Ok(w) => return Ok(w),
            Err(e) => last = Some(e),
        }
    }
    Err(HarnessError::World(last.expect("at least one attempt")))
}

/// Number of worlds in a named split.
pub fn split_size(cfg: &Config, split: &str) -> usize {
    match split {
        "train" => cfg.worlds.train,
        "val" => cfg.worlds.val,
        _ => cfg.worlds.test,
    }
}

/// Evaluation queries for a world.
pub fn eval_queries(world: &World, cfg: &Config) -> Vec<SourceReceiverQuery> {
    crate::renderer::farthest_point_queries(world, cfg.episode.queries, cfg.episode.query_seed, cfg.episode.query_margin)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// True pose after the step.
    pub pose: Pose,
    pub believed: Pose,
    pub action: usize,
    pub sampled: bool,
    pub blocked: bool,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEvent {
    pub step: usize,
    pub context_index: usize,
    pub pose: Pose,
    pub believed: Pose,
    /// Global error right after this sample joined the context.
    pub l_r: Option<f64>,
}

/// One running episode. The agent samples at its current pose first, then
/// moves.
pub struct Episode<'a> {
    env: &'a WorldEnv,
    cfg: &'a Config,
    evaluator: Evaluator,
    /// Whether to score the context after each sample.
    track_error: bool,
    pub agent: AgentPose,
    pub map: OccupancyMap,
    pub ctx: ContextSet,
    pub scan: DepthScan,
    /// Steps taken so far.
    pub t: usize,
    pub l_r: f64,
    pub l_r_initial: f64,
    per_query: Vec<f64>,
    pub last_echo: Option<EchoFeatures>,
    pub blocked_last: bool,
    pub samples: Vec<SampleEvent>,
    pub steps: Vec<StepRecord>,
    motion_rng: ChaCha8Rng,
}

impl<'a> Episode<'a> {
    /// Starts at a random lattice pose drawn from `episode_seed`.
    pub fn new(env: &'a WorldEnv, cfg: &'a Config, episode_seed: u64, track_error: bool) -> Result<Self, HarnessError> {
        let mut start_rng = substream(episode_seed, streams::EPISODE_START, 0);
        let pts = env.world.lattice_points();
        if pts.is_empty() {
            return Err(HarnessError::Episode("world has no free lattice points".into()));
        }
        let (x, y) = pts[start_rng.gen_range(0..pts.len())];
        let theta = [0.0, 90.0, 180.0, 270.0][start_rng.gen_range(0..4)];
        let mut motion_rng = substream(episode_seed, streams::MOTION_NOISE, 0);
        let agent = observe_pose(Pose::new(x, y, theta), &cfg.noise, &mut motion_rng);
        Self::from_pose(env, cfg, agent, motion_rng, track_error)
    }

    pub fn from_pose(
        env: &'a WorldEnv,
        cfg: &'a Config,
        agent: AgentPose,
        motion_rng: ChaCha8Rng,
        track_error: bool,
    ) -> Result<Self, HarnessError> {
        let evaluator = Evaluator::new(env.gt.clone(), cfg.predictor, cfg.acoustics.clone())?;
        let mut map = OccupancyMap::new(&env.world);
        let scan = depth_scan(&env.world, &agent.pose, cfg.episode.scan_rays, cfg.episode.max_range);
        map.integrate(&agent.believed, &scan);
        let ctx = ContextSet::with_map(cfg.episode.budget, &env.world);
        let mut ep = Self {
            env,
            cfg,
            evaluator,
            track_error,
            agent,
            map,
            ctx,
            scan,
            t: 0,
            l_r: 0.0,
            l_r_initial: 0.0,
            per_query: Vec::new(),
            last_echo: None,
            blocked_last: false,
            samples: Vec::new(),
            steps: Vec::with_capacity(cfg.episode.horizon),
            motion_rng,
        };
        if track_error {
            ep.per_query = ep.score()?.1;
            ep.l_r = ep.score_mean(&ep.per_query.clone());
            ep.l_r_initial = ep.l_r;
        }
        Ok(ep)
    }

    fn score(&mut self) -> Result<(f64, Vec<f64>), HarnessError> {
        let pq = self.evaluator.per_query(&self.ctx, Some(&self.map))?;
        Ok((self.score_mean(&pq), pq))
    }

    fn score_mean(&self, pq: &[f64]) -> f64 {
        quantize_error(pq.iter().sum::<f64>() / pq.len().max(1) as f64)
    }

    pub fn evaluator_calls(&self) -> usize {
        self.evaluator.calls()
    }

    pub fn done(&self) -> bool {
        self.t >= self.cfg.episode.horizon
    }

    pub fn sample_allowed(&self) -> bool {
        self.ctx.remaining() > 0
    }

    pub fn samples_used(&self) -> usize {
        self.ctx.len()
    }

    pub fn nearest_context(&self) -> Option<f64> {
        let b = self.agent.believed;
        self.ctx
            .samples()
            .iter()
            .map(|s| (s.pose.x - b.x).hypot(s.pose.y - b.y))
            .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))))
    }

    pub fn observation(&self, pcfg: &PolicyConfig) -> Vec<f64> {
        let input = ObservationInput {
            map: &self.map,
            believed: &self.agent.believed,
            scan: &self.scan,
            last_echo: self.last_echo.as_ref(),
            samples_used: self.samples_used(),
            budget: self.cfg.episode.budget,
            step: self.t,
            horizon: self.cfg.episode.horizon,
            nearest_context: self.nearest_context(),
            blocked_last: self.blocked_last,
        };
        encode_observation(&input, pcfg).to_vec()
    }

    /// Executes one step. A Sample request with no budget left is treated
    /// as Skip.
    pub fn step(&mut self, cmd: ActionCommand) -> Result<&StepRecord, HarnessError> {
        if self.done() {
            return Err(HarnessError::Episode("episode already finished".into()));
        }
        self.t += 1;
        let sampled = cmd.samples() && self.sample_allowed();
        let l_before = self.l_r;
        let mut local = (0.0, 0.0);
        self.last_echo = None;
        if sampled {
            let echo = self.env.echo(&self.agent.pose, self.cfg)?;
            let features = extract_features(&echo, &self.scan, &self.cfg.acoustics)?;
            let idx = self.ctx.add_sample(ContextSample {
                echo,
                scan: Arc::new(self.scan.clone()),
                features,
                pose: self.agent.believed,
            })?;
            self.last_echo = Some(features);
            let mut l_r = None;
            if self.track_error {
                let (mean, pq) = self.score()?;
                if let Some(q) = self.nearest_query_index() {
                    local = (quantize_error(self.per_query[q]), quantize_error(pq[q]));
                }
                self.per_query = pq;
                self.l_r = mean;
                l_r = Some(mean);
            }
            self.samples.push(SampleEvent {
                step: self.t,
                context_index: idx,
                pose: self.agent.pose,
                believed: self.agent.believed,
                l_r,
            });
        }

        let area_before = self.map.covered_area();
        let (next, blocked) = apply_action(&self.env.world, &self.agent, cmd, &self.cfg.noise, &mut self.motion_rng);
        self.agent = next;
        self.blocked_last = blocked;
        self.scan = depth_scan(&self.env.world, &self.agent.pose, self.cfg.episode.scan_rays, self.cfg.episode.max_range);
        update_occupancy(&mut self.map, &self.agent.believed, &self.scan);

        let r_a = match self.cfg.episode.reward_mode {
            RewardMode::Global => acoustic_reward(l_before, self.l_r, sampled),
            RewardMode::Local => local_acoustic_reward(local.0, local.1, sampled),
        };
        let r_v = coverage_reward(self.map.covered_area(), area_before);
        let r_n = novelty_reward(self.map.visit_count_at(self.agent.believed.x, self.agent.believed.y));
        let reward = total_reward(r_a, r_v, r_n, l_before, self.l_r, &self.cfg.rewards);
        self.steps.push(StepRecord {
            t: self.t,
            pose: self.agent.pose,
            believed: self.agent.believed,
            action: ActionCommand::new(cmd.motion, if sampled { cmd.sampling } else { crate::embodiment::Sampling::Skip })
                .index(),
            sampled,
            blocked,
            reward,
        });
        Ok(self.steps.last().expect("just pushed"))
    }

    /// Query whose receiver is closest to the agent's believed position.
    fn nearest_query_index(&self) -> Option<usize> {
        let recv: Vec<(f64, f64)> = self.env.gt.queries.iter().map(|q| (q.receiver.x, q.receiver.y)).collect();
        nearest_query(&recv, self.agent.believed.x, self.agent.believed.y)
    }

    pub fn world(&self) -> &World {
        &self.env.world
    }

    pub fn queries(&self) -> &[SourceReceiverQuery] {
        &self.env.gt.queries
    }
}
