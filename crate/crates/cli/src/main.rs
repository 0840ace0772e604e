use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use echobench::acoustics::export::{write_spectrogram, write_wav};
use echobench::acoustics::{schroeder_rt60, stft_mag, trace_rir, SourceReceiverQuery};
use echobench::harness::{
    calibrate_rewards, dump_artifacts, efficiency_check, episode_seed, eval_queries, generate_pool_world,
    ordering_check, reevaluate_manifest, render_curves_png, run_episode, split_size, train_policy, AgentSpec,
    Config, MetricsRow, NamedAgent, WorldPool,
};
use echobench::policy::Checkpoint;
use echobench::world::NUM_BANDS;

#[derive(Parser)]
#[command(name = "echobench", version, about = "Active acoustic sampling workbench")]
struct Cli {
    /// TOML config file; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads, overriding the config. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory for cached ground-truth spectrograms.
    #[arg(long, global = true)]
    gt_cache: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config as TOML.
    ShowConfig,
    /// Generate the world pools and write a summary.
    GenWorlds {
        /// train, val, test or all.
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Trace one binaural RIR and export it with its spectrogram.
    RenderRir {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        world: usize,
        /// Source position `x,y` in meters.
        #[arg(long, value_parser = parse_point)]
        source: (f64, f64),
        /// Receiver position `x,y` in meters.
        #[arg(long, value_parser = parse_point)]
        receiver: (f64, f64),
        /// Receiver heading, degrees counter-clockwise from +x.
        #[arg(long, default_value_t = 0.0)]
        theta: f64,
    },
    /// Run one episode and write its log.
    RunEpisode {
        /// random, forward, greedy, policy:<checkpoint> or uniform:<checkpoint>.
        #[arg(long, default_value = "random")]
        agent: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        world: usize,
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
    /// Train the sampling policy with PPO.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total updates, leaving a checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate agents over every test world and seed.
    EvalSuite {
        /// `name=spec`, repeatable; defaults to the config's agent list.
        #[arg(long)]
        agent: Vec<String>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Agent whose ordering against the others is reported.
        #[arg(long)]
        active: Option<String>,
        /// Agent whose final error sets the sample-efficiency threshold.
        #[arg(long)]
        reference: Option<String>,
    },
    /// Run one episode and dump map, trajectory, context and echoes.
    Dump {
        #[arg(long, default_value = "random")]
        agent: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        world: usize,
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
    /// Measure reward component magnitudes under the random agent.
    CalibrateRewards {
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 8)]
        episodes: usize,
    },
}

fn parse_point(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected x,y, got '{s}'"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("'{v}': {e}"));
    Ok((p(a)?, p(b)?))
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Config::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn check_world(cfg: &Config, split: &str, world: usize) -> Result<()> {
    let n = split_size(cfg, split);
    if world >= n {
        bail!("world {world} out of range: split '{split}' has {n} worlds");
    }
    Ok(())
}

#[derive(Serialize)]
struct WorldRow {
    split: String,
    index: usize,
    seed: u64,
    extent: [f64; 2],
    rooms: usize,
    free_area_m2: f64,
    queries: usize,
}

fn gen_worlds(cfg: &Config, out: &Path, split: &str) -> Result<()> {
    let splits: Vec<&str> = match split {
        "all" => vec!["train", "val", "test"],
        s @ ("train" | "val" | "test") => vec![s],
        s => bail!("unknown split '{s}'"),
    };
    let mut rows = Vec::new();
    for s in splits {
        for i in 0..split_size(cfg, s) {
            let w = generate_pool_world(cfg, s, i)?;
            rows.push(WorldRow {
                split: s.to_string(),
                index: i,
                seed: w.spec().seed,
                extent: w.extent(),
                rooms: w.spec().room_count,
                free_area_m2: w.free_area(),
                queries: eval_queries(&w, cfg).len(),
            });
        }
    }
    let mut csv = String::from("split,index,seed,extent_x,extent_y,rooms,free_area_m2,queries\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.split, r.index, r.seed, r.extent[0], r.extent[1], r.rooms, r.free_area_m2, r.queries
        );
    }
    write(&out.join("worlds.csv"), &csv)?;
    write(&out.join("worlds.json"), json(&rows)?)?;
    println!("{} worlds written to {}", rows.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct RirSummary {
    world_seed: u64,
    source: [f64; 2],
    receiver: [f64; 2],
    theta_deg: f64,
    sample_rate: u32,
    samples: usize,
    energy: f64,
    /// Per band, left and right; null where the decay was too short to fit.
    rt60_s: Vec<Option<[f64; 2]>>,
}

fn render_rir(cfg: &Config, out: &Path, split: &str, world: usize, q: SourceReceiverQuery) -> Result<()> {
    check_world(cfg, split, world)?;
    let w = generate_pool_world(cfg, split, world)?;
    let rir = trace_rir(&w, &q, &cfg.acoustics)?;
    std::fs::create_dir_all(out)?;
    write_wav(&out.join("rir.wav"), &rir)?;
    let spec = stft_mag(&rir, &cfg.acoustics)?;
    write_spectrogram(&out.join("rir_stft.bin"), &spec, cfg.acoustics.sample_rate)?;
    let summary = RirSummary {
        world_seed: w.spec().seed,
        source: q.source,
        receiver: [q.receiver.x, q.receiver.y],
        theta_deg: q.receiver.theta_deg,
        sample_rate: rir.sample_rate,
        samples: rir.len(),
        energy: rir.energy(),
        rt60_s: (0..NUM_BANDS).map(|b| schroeder_rt60(&rir, b, &cfg.acoustics).ok()).collect(),
    };
    write(&out.join("rir.json"), json(&summary)?)?;
    println!("rir written to {} (energy {:.6})", out.display(), summary.energy);
    Ok(())
}

fn gt_cache(cli: &Cli) -> Option<PathBuf> {
    cli.gt_cache.clone()
}

fn run_one(cli: &Cli, cfg: &Config, agent: &str, split: &str, world: usize, episode: usize) -> Result<echobench::harness::EpisodeOutcome> {
    check_world(cfg, split, world)?;
    let agent = NamedAgent::parse(agent)?;
    let pool = WorldPool::new(cfg, split, gt_cache(cli));
    let env = pool.get(world)?;
    Ok(run_episode(&env, cfg, &agent, episode_seed(cfg, split, world, episode))?)
}

fn train(cli: &Cli, cfg: &Config, out: &Path, resume: bool, stop_after: Option<u64>) -> Result<()> {
    let train_pool = WorldPool::new(cfg, "train", gt_cache(cli));
    let val_pool = WorldPool::new(cfg, "val", gt_cache(cli));
    let read_ck = |name: &str| -> Result<Checkpoint> {
        let p = out.join(name);
        Ok(Checkpoint::from_json(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?)
    };
    let metrics_path = out.join("metrics.csv");
    let (resume_from, mut rows) = if resume {
        let latest = read_ck("checkpoint.json")?;
        let best = read_ck("best.json")?;
        let upto = latest.update;
        let kept: Vec<String> = std::fs::read_to_string(&metrics_path)
            .unwrap_or_default()
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|u| u.parse::<u64>().ok()).is_some_and(|u| u <= upto))
            .map(str::to_string)
            .collect();
        (Some((latest, best)), kept)
    } else {
        (None, Vec::new())
    };
    let mut progress = |r: &MetricsRow| {
        let eval = r.eval_stft_l1.map(|v| format!(" val {v:.5}")).unwrap_or_default();
        eprintln!("update {} reward {:.4} entropy {:.3}{eval}", r.update, r.mean_reward, r.entropy);
    };
    let outcome = train_policy(cfg, &train_pool, &val_pool, resume_from, stop_after, Some(out), Some(&mut progress))?;
    rows.extend(outcome.metrics.iter().map(MetricsRow::csv_line));
    let mut csv = String::from(MetricsRow::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    write(&metrics_path, &csv)?;
    let rewards: Vec<f64> = outcome.metrics.iter().map(|m| m.mean_reward).collect();
    if !rewards.is_empty() {
        render_curves_png(&[("mean_reward".to_string(), rewards)], &out.join("metrics.png"))?;
    }
    println!(
        "trained to update {} (best validation {:?}); checkpoints in {}",
        outcome.latest.update,
        outcome.latest.best_val,
        out.display()
    );
    Ok(())
}

fn eval_suite(
    cli: &Cli,
    cfg: &Config,
    out: &Path,
    agents: &[String],
    seeds: Option<usize>,
    active: Option<&str>,
    reference: Option<&str>,
) -> Result<()> {
    let specs: Vec<String> = if agents.is_empty() { cfg.suite.agents.clone() } else { agents.to_vec() };
    let named = specs.iter().map(|s| NamedAgent::parse(s)).collect::<Result<Vec<_>, _>>()?;
    let seeds = seeds.unwrap_or(cfg.suite.seeds);
    let pool = WorldPool::new(cfg, "test", gt_cache(cli));
    let report = echobench::harness::evaluate_suite(cfg, &named, &pool, seeds, None)?;
    write(&out.join("suite.csv"), report.to_csv())?;
    write(&out.join("suite.json"), json(&report)?)?;
    write(&out.join("curves.csv"), report.curves_csv())?;
    let steps: Vec<(String, Vec<f64>)> = report.aggregates.iter().map(|a| (a.agent.clone(), a.step_curve.clone())).collect();
    let samples: Vec<(String, Vec<f64>)> =
        report.aggregates.iter().map(|a| (a.agent.clone(), a.sample_curve.clone())).collect();
    render_curves_png(&steps, &out.join("curves_steps.png"))?;
    render_curves_png(&samples, &out.join("curves_samples.png"))?;
    for a in &report.aggregates {
        println!("{:<16} mean {:.6} median {:.6} failed {}", a.agent, a.mean, a.median, a.failed);
    }
    let default_active =
        named.iter().find(|a| matches!(a.spec, AgentSpec::Policy { schedule: false, .. })).map(|a| a.name.clone());
    if let Some(act) = active.map(str::to_string).or(default_active) {
        let others: Vec<&str> = report.aggregates.iter().map(|a| a.agent.as_str()).filter(|a| *a != act).collect();
        if let Some(check) = ordering_check(&report, &act, &others) {
            println!("{act} lowest: {} (improvement over best other {:.2}%)", check.active_lowest, 100.0 * check.improvement_over_best);
            write(&out.join("ordering.json"), json(&check)?)?;
        }
        if let Some(r) = reference {
            let eff = efficiency_check(&report, &act, r).with_context(|| format!("unknown reference agent '{r}'"))?;
            write(&out.join("efficiency.json"), json(&eff)?)?;
        }
    }
    Ok(())
}

fn dump(cli: &Cli, cfg: &Config, out: &Path, agent: &str, split: &str, world: usize, episode: usize) -> Result<()> {
    let outcome = run_one(cli, cfg, agent, split, world, episode)?;
    let summary = dump_artifacts(&outcome, cfg, out)?;
    let w = generate_pool_world(cfg, split, world)?;
    let again = reevaluate_manifest(out, &w)?;
    println!(
        "dumped {} markers, {} polyline segments to {}; re-evaluated error {} (logged {})",
        summary.markers,
        summary.polyline_segments,
        out.display(),
        again,
        outcome.log.final_l_r
    );
    if again != outcome.log.final_l_r {
        bail!("re-evaluated context disagrees with the logged error");
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let out = cli.out_dir.clone();
    match &cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml()),
        Command::GenWorlds { split } => gen_worlds(&cfg, &out, split)?,
        Command::RenderRir { split, world, source, receiver, theta } => {
            render_rir(&cfg, &out, split, *world, SourceReceiverQuery::new(*source, *receiver, *theta))?
        }
        Command::RunEpisode { agent, split, world, episode } => {
            let o = run_one(&cli, &cfg, agent, split, *world, *episode)?;
            write(&out.join("episode.jsonl"), o.log.to_jsonl())?;
            println!("final error {} with {} samples", o.log.final_l_r, o.log.sample_count());
        }
        Command::Train { resume, stop_after } => train(&cli, &cfg, &out, *resume, *stop_after)?,
        Command::EvalSuite { agent, seeds, active, reference } => {
            eval_suite(&cli, &cfg, &out, agent, *seeds, active.as_deref(), reference.as_deref())?
        }
        Command::Dump { agent, split, world, episode } => dump(&cli, &cfg, &out, agent, split, *world, *episode)?,
        Command::CalibrateRewards { split, episodes } => {
            let pool = WorldPool::new(&cfg, split, gt_cache(&cli));
            let report = calibrate_rewards(&cfg, &pool, *episodes)?;
            write(&out.join("calibration.json"), json(&report)?)?;
            let s = &report.suggested;
            println!("suggested weights: lambda_a {} lambda_v {} lambda_n {}", s.lambda_a, s.lambda_v, s.lambda_n);
        }
    }
    Ok(())
}
