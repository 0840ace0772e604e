//! Episode orchestration, training, evaluation suites and artifact dumps.

mod artifacts;
mod config;
mod env;
mod suite;
mod train;

pub use artifacts::{
    dump_artifacts, load_context_manifest, reevaluate_manifest, render_curves_png, trajectory_polyline,
    ContextManifest, DumpSummary, ManifestSample,
};
pub use config::{Config, EpisodeConfig, RewardMode, SuiteConfig, TrainerConfig, WorldsConfig};
pub use env::{
    eval_queries, generate_pool_world, split_size, world_spec, Episode, SampleEvent, StepRecord, WorldEnv,
};
pub use suite::{
    calibrate_rewards, efficiency_check, evaluate_suite, ordering_check, steps_to_threshold, CalibrationReport, ComponentStats,
    EfficiencyCheck, OrderingCheck, SuiteCell, SuiteReport,
};
pub use train::{train_policy, validate, MetricsRow, TrainOutcome, TrainProgress};

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustics::{AcousticsError, SourceReceiverQuery};
use crate::baselines::{forward_agent_step, greedy_agent_step, random_agent_step, uniform_schedule_wrap};
use crate::embodiment::{ActionCommand, Pose};
use crate::policy::{policy_forward, sample_action, Checkpoint, PolicyError, PolicyParams, RecurrentState};
use crate::renderer::{GroundTruth, RendererError};
use crate::rng::{derive_seed, streams, substream};
use crate::world::WorldError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Acoustics(#[from] AcousticsError),
    #[error(transparent)]
    Renderer(#[from] RendererError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("episode error: {0}")]
    Episode(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("export error: {0}")]
    Export(#[from] crate::acoustics::export::ExportError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(String),
}

/// Who chooses the actions.
#[derive(Debug, Clone)]
pub enum AgentSpec {
    Random,
    Forward,
    Greedy,
    /// A trained policy; with `schedule` its sampling head is replaced by
    /// the fixed every-`floor(T/N)`-steps schedule.
    Policy { params: Arc<PolicyParams>, schedule: bool },
}

impl AgentSpec {
    /// `random`, `forward`, `greedy`, `policy:<checkpoint>` or
    /// `uniform:<checkpoint>`.
    pub fn parse(spec: &str) -> Result<Self, HarnessError> {
        let load = |path: &str| -> Result<Arc<PolicyParams>, HarnessError> {
            let ck = Checkpoint::from_json(&std::fs::read_to_string(path)?)?;
            Ok(Arc::new(ck.params))
        };
        match spec {
            "random" => Ok(Self::Random),
            "forward" => Ok(Self::Forward),
            "greedy" => Ok(Self::Greedy),
            _ => {
                if let Some(p) = spec.strip_prefix("policy:") {
                    Ok(Self::Policy { params: load(p)?, schedule: false })
                } else if let Some(p) = spec.strip_prefix("uniform:") {
                    Ok(Self::Policy { params: load(p)?, schedule: true })
                } else {
                    Err(HarnessError::Config(format!("unknown agent '{spec}'")))
                }
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Forward => "forward",
            Self::Greedy => "greedy",
            Self::Policy { schedule: false, .. } => "policy",
            Self::Policy { schedule: true, .. } => "uniform",
        }
    }
}

/// Labelled agent for suites and reports.
#[derive(Debug, Clone)]
pub struct NamedAgent {
    pub name: String,
    pub spec: AgentSpec,
}

impl NamedAgent {
    /// `name=spec`, or a bare spec used as its own name.
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        let (name, spec) = s.split_once('=').unwrap_or((s, s));
        Ok(Self { name: name.to_string(), spec: AgentSpec::parse(spec)? })
    }
}

/// Complete record of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub agent: String,
    pub world_seed: u64,
    pub episode_seed: u64,
    pub config_hash: String,
    pub horizon: usize,
    pub budget: usize,
    pub start: Pose,
    pub queries: Vec<SourceReceiverQuery>,
    pub l_r_initial: f64,
    pub steps: Vec<StepRecord>,
    pub samples: Vec<SampleEvent>,
    /// Global error after each sample, in sample order.
    pub l_r_trace: Vec<f64>,
    pub final_l_r: f64,
    pub valid: bool,
    pub error: Option<String>,
}

impl EpisodeLog {
    /// Header line, one line per step, then a summary line.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            kind: &'static str,
            agent: &'a str,
            world_seed: u64,
            episode_seed: u64,
            config_hash: &'a str,
            horizon: usize,
            budget: usize,
            start: Pose,
            queries: &'a [SourceReceiverQuery],
            l_r_initial: f64,
        }
        #[derive(Serialize)]
        struct Step<'a> {
            kind: &'static str,
            #[serde(flatten)]
            step: &'a StepRecord,
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            kind: &'static str,
            samples: &'a [SampleEvent],
            l_r_trace: &'a [f64],
            final_l_r: f64,
            valid: bool,
            error: &'a Option<String>,
        }
        let mut out = String::new();
        let mut line = |v: String| {
            out.push_str(&v);
            out.push('\n');
        };
        line(
            serde_json::to_string(&Header {
                kind: "header",
                agent: &self.agent,
                world_seed: self.world_seed,
                episode_seed: self.episode_seed,
                config_hash: &self.config_hash,
                horizon: self.horizon,
                budget: self.budget,
                start: self.start,
                queries: &self.queries,
                l_r_initial: self.l_r_initial,
            })
            .expect("serializes"),
        );
        for s in &self.steps {
            line(serde_json::to_string(&Step { kind: "step", step: s }).expect("serializes"));
        }
        line(
            serde_json::to_string(&Summary {
                kind: "summary",
                samples: &self.samples,
                l_r_trace: &self.l_r_trace,
                final_l_r: self.final_l_r,
                valid: self.valid,
                error: &self.error,
            })
            .expect("serializes"),
        );
        out
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }
}

/// Log plus the in-memory context and map, for artifact dumps.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub log: EpisodeLog,
    pub ctx: crate::renderer::ContextSet,
    pub map: crate::embodiment::OccupancyMap,
}

/// Seed of episode `seed` on world `world_index` of a split. Independent of
/// the agent, so all agents start from the same pose.
pub fn episode_seed(cfg: &Config, split: &str, world_index: usize, seed: usize) -> u64 {
    derive_seed(derive_seed(cfg.seed, split, world_index as u64), "episode", seed as u64)
}

/// Runs a full episode with error tracking on.
pub fn run_episode(
    env: &WorldEnv,
    cfg: &Config,
    agent: &NamedAgent,
    episode_seed: u64,
) -> Result<EpisodeOutcome, HarnessError> {
    let mut ep = Episode::new(env, cfg, episode_seed, true)?;
    let start = ep.agent.pose;
    let mut rng = substream(episode_seed, streams::ACTIONS, 0);
    let (horizon, budget) = (cfg.episode.horizon, cfg.episode.budget);
    let mut h = match &agent.spec {
        AgentSpec::Policy { params, .. } => Some(RecurrentState::zeros(&params.config)),
        _ => None,
    };
    let mut failure = None;
    while !ep.done() {
        let t = ep.t + 1;
        let cmd = match &agent.spec {
            AgentSpec::Random => random_agent_step(&mut rng, ep.sample_allowed()),
            AgentSpec::Forward => forward_agent_step(t, horizon, budget, ep.samples_used(), ep.blocked_last),
            AgentSpec::Greedy => greedy_agent_step(t, budget, &mut rng),
            AgentSpec::Policy { params, schedule } => {
                let obs = ep.observation(&params.config);
                let out = policy_forward(params, &obs, h.as_ref().expect("policy state"))?;
                h = Some(out.h_next.clone());
                if *schedule {
                    uniform_schedule_wrap(&out.logits, t, horizon, budget, ep.samples_used(), &mut rng)
                } else {
                    ActionCommand::from_index(sample_action(&out.logits, &mut rng, ep.sample_allowed()))
                }
            }
        };
        if let Err(e) = ep.step(cmd) {
            failure = Some(e.to_string());
            break;
        }
    }
    let l_r_trace: Vec<f64> = ep.samples.iter().filter_map(|s| s.l_r).collect();
    let log = EpisodeLog {
        agent: agent.name.clone(),
        world_seed: env.world.spec().seed,
        episode_seed,
        config_hash: cfg.hash(),
        horizon,
        budget,
        start,
        queries: ep.queries().to_vec(),
        l_r_initial: ep.l_r_initial,
        l_r_trace,
        final_l_r: ep.l_r,
        valid: failure.is_none(),
        error: failure,
        steps: ep.steps.clone(),
        samples: ep.samples.clone(),
    };
    Ok(EpisodeOutcome { log, ctx: ep.ctx.clone(), map: ep.map.clone() })
}

/// Lazily built worlds of one split, each with cached ground truth.
pub struct WorldPool {
    cfg: Config,
    split: String,
    slots: Vec<OnceLock<Arc<WorldEnv>>>,
    cache_dir: Option<std::path::PathBuf>,
}

impl WorldPool {
    pub fn new(cfg: &Config, split: &str, cache_dir: Option<std::path::PathBuf>) -> Self {
        let n = split_size(cfg, split);
        Self { cfg: cfg.clone(), split: split.to_string(), slots: (0..n).map(|_| OnceLock::new()).collect(), cache_dir }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn get(&self, i: usize) -> Result<Arc<WorldEnv>, HarnessError> {
        if let Some(e) = self.slots[i].get() {
            return Ok(e.clone());
        }
        let world = generate_pool_world(&self.cfg, &self.split, i)?;
        let queries = eval_queries(&world, &self.cfg);
        let gt = artifacts::ground_truth_cached(&world, &queries, &self.cfg, self.cache_dir.as_deref())?;
        let env = Arc::new(WorldEnv::new(world, gt));
        Ok(self.slots[i].get_or_init(|| env).clone())
    }
}

/// Runs `jobs` on up to `workers` threads and returns results in job order.
pub fn parallel_map<T, R, F>(jobs: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..jobs.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Ground truth for a world and query list, without caching.
pub fn ground_truth(
    world: &crate::world::World,
    queries: &[SourceReceiverQuery],
    cfg: &Config,
) -> Result<GroundTruth, HarnessError> {
    Ok(GroundTruth::compute(world, queries, &cfg.acoustics)?)
}
