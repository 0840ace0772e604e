use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Config, EpisodeLog, EpisodeOutcome, HarnessError};
use crate::acoustics::export::{read_wav, write_wav};
use crate::acoustics::{AcousticsConfig, SourceReceiverQuery, Spectrogram};
use crate::embodiment::{DepthScan, MapCell, OccupancyMap, Pose};
use crate::renderer::{evaluate_model, ContextSample, ContextSet, EchoFeatures, GroundTruth, PredictorConfig};
use crate::world::World;

const GT_MAGIC: &[u8; 8] = b"EBGT0001";

fn gt_key(world: &World, queries: &[SourceReceiverQuery], acfg: &AcousticsConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(world.spec()).expect("spec serializes"));
    h.update(serde_json::to_vec(queries).expect("queries serialize"));
    h.update(serde_json::to_vec(acfg).expect("config serializes"));
    h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct GtHeader {
    queries: Vec<SourceReceiverQuery>,
    shapes: Vec<Spectrogram>,
    zero_errors: Vec<f64>,
}

fn write_gt(path: &Path, gt: &GroundTruth) -> Result<(), HarnessError> {
    let header = GtHeader {
        queries: gt.queries.clone(),
        shapes: gt.spectrograms.iter().map(|s| Spectrogram { data: Vec::new(), ..s.clone() }).collect(),
        zero_errors: gt.zero_errors.clone(),
    };
    let hj = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    f.write_all(GT_MAGIC)?;
    f.write_all(&(hj.len() as u64).to_le_bytes())?;
    f.write_all(&hj)?;
    for s in &gt.spectrograms {
        for v in &s.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    drop(f);
    std::fs::rename(tmp, path)?;
    Ok(())
}

fn read_gt(path: &Path) -> Result<GroundTruth, HarnessError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = || HarnessError::Episode(format!("corrupt ground-truth cache {}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != GT_MAGIC {
        return Err(bad());
    }
    let hl = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header: GtHeader = serde_json::from_slice(bytes.get(16..16 + hl).ok_or_else(bad)?)?;
    let mut data = bytes[16 + hl..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut spectrograms = Vec::with_capacity(header.shapes.len());
    for s in header.shapes {
        let n = 2 * s.frames * s.bins;
        let d: Vec<f32> = data.by_ref().take(n).collect();
        if d.len() != n {
            return Err(bad());
        }
        spectrograms.push(Spectrogram { data: d, ..s });
    }
    Ok(GroundTruth { queries: header.queries, spectrograms, zero_errors: header.zero_errors })
}

/// Ground truth for a world's queries, read from or written to `cache_dir`
/// when one is given. The cache key covers the world spec, the queries and
/// the acoustics config.
pub fn ground_truth_cached(
    world: &World,
    queries: &[SourceReceiverQuery],
    cfg: &Config,
    cache_dir: Option<&Path>,
) -> Result<GroundTruth, HarnessError> {
    let Some(dir) = cache_dir else {
        return super::ground_truth(world, queries, cfg);
    };
    let path = dir.join(format!("gt-{}.bin", gt_key(world, queries, &cfg.acoustics)));
    if path.exists() {
        if let Ok(gt) = read_gt(&path) {
            if gt.queries == queries {
                return Ok(gt);
            }
        }
    }
    let gt = super::ground_truth(world, queries, cfg)?;
    std::fs::create_dir_all(dir)?;
    write_gt(&path, &gt)?;
    Ok(gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub index: usize,
    pub step: usize,
    /// True capture pose.
    pub pose: Pose,
    /// Believed capture pose, which is what the predictor sees.
    pub believed: Pose,
    pub features: EchoFeatures,
    pub scan: DepthScan,
    /// WAV path relative to the manifest directory.
    pub echo_file: String,
}

/// Everything needed to rebuild an episode's final context and score it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextManifest {
    pub config_hash: String,
    pub agent: String,
    pub world_seed: u64,
    pub episode_seed: u64,
    pub budget: usize,
    pub acoustics: AcousticsConfig,
    pub predictor: PredictorConfig,
    pub queries: Vec<SourceReceiverQuery>,
    /// Agent map, kept only when the predictor reads it.
    pub agent_map: Option<OccupancyMap>,
    pub samples: Vec<ManifestSample>,
    pub final_stft_l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpSummary {
    pub dir: PathBuf,
    pub map_png: PathBuf,
    pub map_pgm: PathBuf,
    pub manifest: PathBuf,
    pub log: PathBuf,
    pub markers: usize,
    pub polyline_segments: usize,
}

/// True positions visited, collapsing steps that did not move.
pub fn trajectory_polyline(log: &EpisodeLog) -> Vec<(f64, f64)> {
    let mut pts = vec![log.start.position()];
    for s in &log.steps {
        let p = s.pose.position();
        if p != *pts.last().expect("non-empty") {
            pts.push(p);
        }
    }
    pts
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    let (mut x, mut y) = a;
    let (dx, dy) = ((b.0 - a.0).abs(), -(b.1 - a.1).abs());
    let (sx, sy) = (if a.0 < b.0 { 1 } else { -1 }, if a.1 < b.1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_square(img: &mut RgbImage, c: (i64, i64), r: i64, col: Rgb<u8>) {
    for y in c.1 - r..=c.1 + r {
        for x in c.0 - r..=c.0 + r {
            if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                img.put_pixel(x as u32, y as u32, col);
            }
        }
    }
}

const MAP_SCALE: u32 = 4;

fn map_image(map: &OccupancyMap, log: &EpisodeLog) -> RgbImage {
    let (w, h) = (map.width as u32 * MAP_SCALE, map.height as u32 * MAP_SCALE);
    let mut img = RgbImage::new(w, h);
    for j in 0..map.height {
        for i in 0..map.width {
            let v = match map.cells[j * map.width + i] {
                MapCell::Unknown => 128,
                MapCell::Free => 255,
                MapCell::Occupied => 0,
            };
            let py0 = (map.height - 1 - j) as u32 * MAP_SCALE;
            for dy in 0..MAP_SCALE {
                for dx in 0..MAP_SCALE {
                    img.put_pixel(i as u32 * MAP_SCALE + dx, py0 + dy, Rgb([v, v, v]));
                }
            }
        }
    }
    let px = |(x, y): (f64, f64)| -> (i64, i64) {
        let s = f64::from(MAP_SCALE) / map.cell_size;
        ((x * s).floor() as i64, (f64::from(h) - y * s).floor() as i64)
    };
    let poly = trajectory_polyline(log);
    for seg in poly.windows(2) {
        draw_line(&mut img, px(seg[0]), px(seg[1]), Rgb([30, 90, 220]));
    }
    for s in &log.samples {
        draw_square(&mut img, px(s.pose.position()), 2, Rgb([220, 30, 30]));
    }
    img
}

/// Writes an episode's map image (trajectory in blue, samples in red), the
/// raw agent map as PGM, the step log, and the context manifest with one
/// WAV per sample.
pub fn dump_artifacts(outcome: &EpisodeOutcome, cfg: &Config, dir: &Path) -> Result<DumpSummary, HarnessError> {
    std::fs::create_dir_all(dir.join("context"))?;
    let log = &outcome.log;
    let map_png = dir.join("map.png");
    map_image(&outcome.map, log).save(&map_png).map_err(|e| HarnessError::Image(e.to_string()))?;
    let map_pgm = dir.join("map.pgm");
    std::fs::write(&map_pgm, outcome.map.to_pgm())?;
    let log_path = dir.join("episode.jsonl");
    std::fs::write(&log_path, log.to_jsonl())?;

    let mut samples = Vec::new();
    for (i, (cs, ev)) in outcome.ctx.samples().iter().zip(&log.samples).enumerate() {
        let name = format!("context/echo_{i:03}.wav");
        write_wav(&dir.join(&name), &cs.echo)?;
        samples.push(ManifestSample {
            index: i,
            step: ev.step,
            pose: ev.pose,
            believed: cs.pose,
            features: cs.features,
            scan: (*cs.scan).clone(),
            echo_file: name,
        });
    }
    let manifest = ContextManifest {
        config_hash: log.config_hash.clone(),
        agent: log.agent.clone(),
        world_seed: log.world_seed,
        episode_seed: log.episode_seed,
        budget: outcome.ctx.budget(),
        acoustics: cfg.acoustics.clone(),
        predictor: cfg.predictor,
        queries: log.queries.clone(),
        agent_map: if cfg.predictor.occlusion_aware { Some(outcome.map.clone()) } else { None },
        samples,
        final_stft_l1: log.final_l_r,
    };
    let manifest_path = dir.join("context").join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(DumpSummary {
        dir: dir.to_path_buf(),
        map_png,
        map_pgm,
        manifest: manifest_path,
        log: log_path,
        markers: log.samples.len(),
        polyline_segments: trajectory_polyline(log).len() - 1,
    })
}

/// Rebuilds the context stored under `dir/context`.
pub fn load_context_manifest(dir: &Path, world: &World) -> Result<(ContextManifest, ContextSet), HarnessError> {
    let cdir = dir.join("context");
    let m: ContextManifest = serde_json::from_str(&std::fs::read_to_string(cdir.join("manifest.json"))?)?;
    let mut ctx = ContextSet::with_map(m.budget, world);
    for s in &m.samples {
        let echo = read_wav(&dir.join(&s.echo_file))?;
        ctx.add_sample(ContextSample {
            echo: Arc::new(echo),
            scan: Arc::new(s.scan.clone()),
            features: s.features,
            pose: s.believed,
        })?;
    }
    Ok((m, ctx))
}

/// Scores a dumped context from scratch. Matches the logged final error
/// exactly.
pub fn reevaluate_manifest(dir: &Path, world: &World) -> Result<f64, HarnessError> {
    let (m, ctx) = load_context_manifest(dir, world)?;
    Ok(evaluate_model(&ctx, &m.queries, world, &m.acoustics, &m.predictor, m.agent_map.as_ref())?)
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// Line chart of error curves, one colour per series in palette order.
/// Axes start at zero; there is no text, so keep the series order in the
/// accompanying CSV.
pub fn render_curves_png(series: &[(String, Vec<f64>)], path: &Path) -> Result<(), HarnessError> {
    let (w, h, pad) = (800u32, 500u32, 40i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let len = series.iter().map(|s| s.1.len()).max().unwrap_or(0).max(2);
    let ymax = series.iter().flat_map(|s| s.1.iter().copied()).filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let ymax = if ymax > 0.0 { ymax * 1.05 } else { 1.0 };
    let (pw, ph) = (i64::from(w) - 2 * pad, i64::from(h) - 2 * pad);
    let px = |t: usize, v: f64| -> (i64, i64) {
        (pad + (t as f64 / (len - 1) as f64 * pw as f64) as i64, pad + ph - (v / ymax * ph as f64) as i64)
    };
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (pad, pad), (pad, pad + ph), axis);
    draw_line(&mut img, (pad, pad + ph), (pad + pw, pad + ph), axis);
    for (k, (_, ys)) in series.iter().enumerate() {
        let c = Rgb(PALETTE[k % PALETTE.len()]);
        for t in 1..ys.len() {
            if ys[t - 1].is_finite() && ys[t].is_finite() {
                draw_line(&mut img, px(t - 1, ys[t - 1]), px(t, ys[t]), c);
            }
        }
    }
    img.save(path).map_err(|e| HarnessError::Image(e.to_string()))
}
