use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{episode_seed, parallel_map, run_episode, Config, EpisodeLog, HarnessError, NamedAgent, WorldPool};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCell {
    pub agent: String,
    pub world_index: usize,
    pub world_seed: u64,
    pub seed: usize,
    pub final_stft_l1: Option<f64>,
    pub samples: usize,
    /// Error after each step, steps 0..=T (step 0 is the empty context).
    pub step_curve: Vec<f64>,
    /// Error after k samples, k = 0..=N; held at the final value past the
    /// last sample.
    pub sample_curve: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAggregate {
    pub agent: String,
    pub episodes: usize,
    pub failed: usize,
    pub mean: f64,
    pub median: f64,
    pub mean_samples: f64,
    pub step_curve: Vec<f64>,
    pub sample_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config_hash: String,
    /// Scale disclosure: worlds, seeds, horizon, budget, queries.
    pub scale: String,
    pub cells: Vec<SuiteCell>,
    pub aggregates: Vec<AgentAggregate>,
}

fn step_curve(log: &EpisodeLog) -> Vec<f64> {
    let mut curve = vec![log.l_r_initial];
    let mut cur = log.l_r_initial;
    let mut it = log.samples.iter().peekable();
    for t in 1..=log.horizon {
        while let Some(s) = it.peek() {
            if s.step == t {
                if let Some(v) = s.l_r {
                    cur = v;
                }
                it.next();
            } else {
                break;
            }
        }
        curve.push(cur);
    }
    curve
}

fn sample_curve(log: &EpisodeLog) -> Vec<f64> {
    let mut curve = vec![log.l_r_initial];
    curve.extend(log.l_r_trace.iter().copied());
    while curve.len() < log.budget + 1 {
        curve.push(*curve.last().expect("non-empty"));
    }
    curve
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn mean_curve(curves: &[&Vec<f64>]) -> Vec<f64> {
    let len = curves.iter().map(|c| c.len()).max().unwrap_or(0);
    (0..len).map(|i| mean(&curves.iter().filter_map(|c| c.get(i).copied()).collect::<Vec<_>>())).collect()
}

/// Runs every `(agent, world, seed)` cell of the test split. Failed cells
/// are recorded and the suite continues. `logs` receives each cell's log.
pub fn evaluate_suite(
    cfg: &Config,
    agents: &[NamedAgent],
    pool: &WorldPool,
    seeds: usize,
    mut logs: Option<&mut dyn FnMut(&SuiteCell, &EpisodeLog)>,
) -> Result<SuiteReport, HarnessError> {
    let jobs: Vec<(usize, usize, usize)> = (0..agents.len())
        .flat_map(|a| (0..pool.len()).flat_map(move |w| (0..seeds).map(move |s| (a, w, s))))
        .collect();
    let results = parallel_map(&jobs, cfg.workers, |&(a, w, s)| -> (SuiteCell, Option<EpisodeLog>) {
        let agent = &agents[a];
        let base = SuiteCell {
            agent: agent.name.clone(),
            world_index: w,
            world_seed: 0,
            seed: s,
            final_stft_l1: None,
            samples: 0,
            step_curve: Vec::new(),
            sample_curve: Vec::new(),
            error: None,
        };
        let run = || -> Result<EpisodeLog, HarnessError> {
            let env = pool.get(w)?;
            Ok(run_episode(&env, cfg, agent, episode_seed(cfg, pool.split(), w, s))?.log)
        };
        match run() {
            Ok(log) => {
                let cell = SuiteCell {
                    world_seed: log.world_seed,
                    final_stft_l1: if log.valid { Some(log.final_l_r) } else { None },
                    samples: log.sample_count(),
                    step_curve: step_curve(&log),
                    sample_curve: sample_curve(&log),
                    error: log.error.clone(),
                    ..base
                };
                (cell, Some(log))
            }
            Err(e) => (SuiteCell { error: Some(e.to_string()), ..base }, None),
        }
    });
    let mut cells = Vec::with_capacity(results.len());
    for (cell, log) in results {
        if let (Some(cb), Some(log)) = (logs.as_mut(), log.as_ref()) {
            cb(&cell, log);
        }
        cells.push(cell);
    }
    let aggregates = agents
        .iter()
        .map(|a| {
            let mine: Vec<&SuiteCell> = cells.iter().filter(|c| c.agent == a.name).collect();
            let ok: Vec<&SuiteCell> = mine.iter().copied().filter(|c| c.final_stft_l1.is_some()).collect();
            let finals: Vec<f64> = ok.iter().filter_map(|c| c.final_stft_l1).collect();
            AgentAggregate {
                agent: a.name.clone(),
                episodes: mine.len(),
                failed: mine.len() - ok.len(),
                mean: mean(&finals),
                median: median(&finals),
                mean_samples: mean(&ok.iter().map(|c| c.samples as f64).collect::<Vec<_>>()),
                step_curve: mean_curve(&ok.iter().map(|c| &c.step_curve).collect::<Vec<_>>()),
                sample_curve: mean_curve(&ok.iter().map(|c| &c.sample_curve).collect::<Vec<_>>()),
            }
        })
        .collect();
    Ok(SuiteReport {
        config_hash: cfg.hash(),
        scale: format!(
            "{} test worlds x {} seeds, T={}, N={}, K={}, {} training updates configured",
            pool.len(),
            seeds,
            cfg.episode.horizon,
            cfg.episode.budget,
            cfg.episode.queries,
            cfg.train.total_updates
        ),
        cells,
        aggregates,
    })
}

impl SuiteReport {
    pub const CSV_HEADER: &'static str = "agent,world_index,world_seed,seed,final_stft_l1,samples,error";

    pub fn to_csv(&self) -> String {
        let mut out = format!("# config {} | {}\n{}\n", self.config_hash, self.scale, Self::CSV_HEADER);
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.agent,
                c.world_index,
                c.world_seed,
                c.seed,
                c.final_stft_l1.map(|v| v.to_string()).unwrap_or_default(),
                c.samples,
                c.error.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        out
    }

    /// One row per step, one column per agent.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("step");
        for a in &self.aggregates {
            out.push(',');
            out.push_str(&a.agent);
        }
        out.push('\n');
        let len = self.aggregates.iter().map(|a| a.step_curve.len()).max().unwrap_or(0);
        for t in 0..len {
            let _ = write!(out, "{t}");
            for a in &self.aggregates {
                let _ = write!(out, ",{}", a.step_curve.get(t).map(|v| v.to_string()).unwrap_or_default());
            }
            out.push('\n');
        }
        out
    }

    pub fn aggregate(&self, agent: &str) -> Option<&AgentAggregate> {
        self.aggregates.iter().find(|a| a.agent == agent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub active: String,
    pub active_mean: f64,
    pub others: Vec<(String, f64)>,
    /// Active mean below every other mean.
    pub active_lowest: bool,
    /// `1 - active / min(others)`.
    pub improvement_over_best: f64,
}

/// Compares the active agent's mean final error against the others.
pub fn ordering_check(report: &SuiteReport, active: &str, others: &[&str]) -> Option<OrderingCheck> {
    let a = report.aggregate(active)?.mean;
    let mut rows = Vec::new();
    for o in others {
        rows.push((o.to_string(), report.aggregate(o)?.mean));
    }
    let best = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    Some(OrderingCheck {
        active: active.to_string(),
        active_mean: a,
        active_lowest: rows.iter().all(|r| a < r.1),
        improvement_over_best: 1.0 - a / best,
        others: rows,
    })
}

/// First index at which `curve` is at or below `threshold`.
pub fn steps_to_threshold(curve: &[f64], threshold: f64) -> Option<usize> {
    curve.iter().position(|&v| v <= threshold)
}

/// How quickly the active agent's mean curves reach the reference agent's
/// mean final error. Both agents are measured the same way: the first index
/// at which the mean curve is at or below the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyCheck {
    pub active: String,
    pub reference: String,
    pub threshold: f64,
    pub active_samples: Option<usize>,
    pub reference_samples: Option<usize>,
    pub active_steps: Option<usize>,
    pub reference_steps: Option<usize>,
    /// `1 - active_samples / reference_samples`, when both reach the threshold.
    pub sample_saving: Option<f64>,
    pub step_saving: Option<f64>,
}

pub fn efficiency_check(report: &SuiteReport, active: &str, reference: &str) -> Option<EfficiencyCheck> {
    let a = report.aggregate(active)?;
    let r = report.aggregate(reference)?;
    let threshold = r.mean;
    let saving = |x: Option<usize>, y: Option<usize>| match (x, y) {
        (Some(x), Some(y)) if y > 0 => Some(1.0 - x as f64 / y as f64),
        _ => None,
    };
    let active_samples = steps_to_threshold(&a.sample_curve, threshold);
    let reference_samples = steps_to_threshold(&r.sample_curve, threshold);
    let active_steps = steps_to_threshold(&a.step_curve, threshold);
    let reference_steps = steps_to_threshold(&r.step_curve, threshold);
    Some(EfficiencyCheck {
        active: active.to_string(),
        reference: reference.to_string(),
        threshold,
        sample_saving: saving(active_samples, reference_samples),
        step_saving: saving(active_steps, reference_steps),
        active_samples,
        reference_samples,
        active_steps,
        reference_steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComponentStats {
    pub mean: f64,
    pub std: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
    /// Mean |weight * component|.
    pub weighted_mean_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub episodes: usize,
    pub steps: usize,
    /// Statistics over every step; r_A is zero on steps without a sample,
    /// so matched means give matched per-episode totals.
    pub acoustic: ComponentStats,
    pub coverage: ComponentStats,
    pub novelty: ComponentStats,
    /// Weights that would give each component the same mean magnitude as
    /// the weighted novelty term.
    pub suggested: crate::rewards::RewardWeights,
}

fn stats(v: &[f64], w: f64) -> ComponentStats {
    if v.is_empty() {
        return ComponentStats::default();
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    let ma = mean(&v.iter().map(|x| x.abs()).collect::<Vec<_>>());
    ComponentStats {
        mean: m,
        std: var.sqrt(),
        mean_abs: ma,
        max_abs: v.iter().fold(0.0, |a, x| a.max(x.abs())),
        weighted_mean_abs: w * ma,
    }
}

/// Reward component magnitudes under random rollouts.
pub fn calibrate_rewards(cfg: &Config, pool: &WorldPool, episodes: usize) -> Result<CalibrationReport, HarnessError> {
    let agent = NamedAgent { name: "random".into(), spec: super::AgentSpec::Random };
    let jobs: Vec<usize> = (0..episodes).collect();
    let logs = parallel_map(&jobs, cfg.workers, |&e| -> Result<EpisodeLog, HarnessError> {
        let w = e % pool.len();
        let env = pool.get(w)?;
        Ok(run_episode(&env, cfg, &agent, episode_seed(cfg, "calibrate", w, e))?.log)
    });
    let (mut ra, mut rv, mut rn) = (Vec::new(), Vec::new(), Vec::new());
    for l in logs {
        let l = l?;
        for s in &l.steps {
            ra.push(s.reward.r_a);
            rv.push(s.reward.r_v);
            rn.push(s.reward.r_n);
        }
    }
    let w = cfg.rewards;
    let (a, v, n) = (stats(&ra, w.lambda_a), stats(&rv, w.lambda_v), stats(&rn, w.lambda_n));
    let target = n.weighted_mean_abs;
    let scale = |s: &ComponentStats, cur: f64| if s.mean_abs > 0.0 { target / s.mean_abs } else { cur };
    Ok(CalibrationReport {
        episodes,
        steps: rv.len(),
        suggested: crate::rewards::RewardWeights {
            lambda_a: scale(&a, w.lambda_a),
            lambda_v: scale(&v, w.lambda_v),
            lambda_n: w.lambda_n,
        },
        acoustic: a,
        coverage: v,
        novelty: n,
    })
}
