use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dsp::band_noise;
use super::{AcousticsConfig, AcousticsError, ReceiverPose, Rir, SourceReceiverQuery};
use crate::grid::{first_wall_from, heading_vector, segment_clear, Axis};
use crate::rng::{derive_seed, streams};
use crate::world::{World, NUM_BANDS};

// rays die once every band has lost this much of its starting energy
const ENERGY_FLOOR: f64 = 1e-7;

/// Bookkeeping from one trace, mostly for tests and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TraceStats {
    pub rays: usize,
    /// Reflected-path segments that crossed each ear disc.
    pub reflection_hits: [usize; 2],
    pub direct_visible: [bool; 2],
}

/// Left and right ear positions (channel 0 and 1).
pub fn ear_positions(receiver: &ReceiverPose, offset: f64) -> [(f64, f64); 2] {
    let (hx, hy) = heading_vector(receiver.theta_deg);
    // left is the heading rotated +90 degrees
    let (lx, ly) = (-hy, hx);
    [
        (receiver.x + offset * lx, receiver.y + offset * ly),
        (receiver.x - offset * lx, receiver.y - offset * ly),
    ]
}

/// Direct-path impulse `(sample index, amplitude)` from `source` to `ear`,
/// or `None` when the segment is occluded.
pub fn direct_path(
    world: &World,
    source: (f64, f64),
    ear: (f64, f64),
    cfg: &AcousticsConfig,
) -> Option<(usize, f64)> {
    if !segment_clear(world, source, ear) {
        return None;
    }
    let d = (ear.0 - source.0).hypot(ear.1 - source.1);
    let n = (d / cfg.speed_of_sound * cfg.sample_rate as f64).round() as usize;
    Some((n, 1.0 / d.max(0.1)))
}

pub fn trace_rir(
    world: &World,
    query: &SourceReceiverQuery,
    cfg: &AcousticsConfig,
) -> Result<Rir, AcousticsError> {
    trace_rir_with_stats(world, query, cfg).map(|(rir, _)| rir)
}

fn check_query(world: &World, query: &SourceReceiverQuery) -> Result<(), AcousticsError> {
    let s = query.source;
    let r = query.receiver;
    if !s
        .iter()
        .chain([r.x, r.y, r.theta_deg].iter())
        .all(|v| v.is_finite())
    {
        return Err(AcousticsError::InvalidQuery("non-finite coordinate".into()));
    }
    if !world.is_free_point(s[0], s[1]) {
        return Err(AcousticsError::QueryOutOfFreeSpace(s[0], s[1]));
    }
    if !world.is_free_point(r.x, r.y) {
        return Err(AcousticsError::QueryOutOfFreeSpace(r.x, r.y));
    }
    if !query.heading_is_lattice() {
        return Err(AcousticsError::InvalidQuery(format!(
            "heading {} is not a multiple of 90",
            r.theta_deg
        )));
    }
    Ok(())
}

struct Histograms {
    bin: f64,
    /// `[ear][band][bin]`, raw energy before the per-ray normalization.
    data: [[Vec<f64>; NUM_BANDS]; 2],
    first_arrival: [f64; 2],
    hits: [usize; 2],
}

struct RayTracer<'a> {
    world: &'a World,
    cfg: &'a AcousticsConfig,
    ears: [(f64, f64); 2],
    source: (f64, f64),
    heading: f64,
    pairs: usize,
}

impl RayTracer<'_> {
    /// Traces ray `i` of the fan; `mirror` traces its twin reflected about
    /// the receiver heading through the source, using identical draws.
    fn trace(&self, i: usize, seed: u64, mirror: bool, hist: &mut Histograms) {
        let cfg = self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = 2.0 * PI * (i as f64 + rng.gen::<f64>()) / self.pairs as f64;
        let ang = if mirror {
            self.heading - phi
        } else {
            self.heading + phi
        };
        let mut dir = (ang.cos(), ang.sin());
        let mut pos = self.source;
        let mut cell = self.world.cell_of(pos.0, pos.1);
        let mut energy = [1.0; NUM_BANDS];
        let mut travelled = 0.0;
        let mut bounces = 0usize;
        let max_len = cfg.speed_of_sound * cfg.max_rir_seconds;
        let r2 = cfg.receiver_radius * cfg.receiver_radius;
        loop {
            let remaining = max_len - travelled;
            if remaining <= 0.0 {
                break;
            }
            let hit = first_wall_from(self.world, cell, pos, dir, remaining);
            let seg = hit.map_or(remaining, |h| h.t);
            if bounces > 0 {
                for (e, ear) in self.ears.iter().enumerate() {
                    let w = (ear.0 - pos.0, ear.1 - pos.1);
                    let s = (w.0 * dir.0 + w.1 * dir.1).clamp(0.0, seg);
                    let (cx, cy) = (w.0 - s * dir.0, w.1 - s * dir.1);
                    if cx * cx + cy * cy <= r2 {
                        let t = (travelled + s) / cfg.speed_of_sound;
                        let b = (t / hist.bin) as usize;
                        if b < hist.data[e][0].len() {
                            for (band, en) in energy.iter().enumerate() {
                                hist.data[e][band][b] += en;
                            }
                            hist.first_arrival[e] = hist.first_arrival[e].min(t);
                            hist.hits[e] += 1;
                        }
                    }
                }
            }
            let Some(hit) = hit else { break };
            travelled += hit.t;
            pos = (pos.0 + hit.t * dir.0, pos.1 + hit.t * dir.1);
            cell = hit.from;
            bounces += 1;
            if bounces > cfg.max_bounces {
                break;
            }
            let material = if self.world.in_bounds(hit.cell.0, hit.cell.1) {
                self.world
                    .material_of(hit.cell.0 as usize, hit.cell.1 as usize)
            } else {
                None
            };
            let Some(material) = material else { break };
            for (en, a) in energy.iter_mut().zip(&material.absorption) {
                *en *= 1.0 - a;
            }
            if energy.iter().all(|&e| e < ENERGY_FLOOR) {
                break;
            }
            let (u, v): (f64, f64) = (rng.gen(), rng.gen());
            let normal = match hit.axis {
                Axis::X => (-dir.0.signum(), 0.0),
                Axis::Y => (0.0, -dir.1.signum()),
            };
            if u < material.scattering {
                // cosine-weighted (Lambertian) direction about the normal
                let mut sin_a = 2.0 * v - 1.0;
                if mirror {
                    sin_a = -sin_a;
                }
                let cos_a = (1.0 - sin_a * sin_a).max(0.0).sqrt();
                let tangent = (-normal.1, normal.0);
                dir = (
                    cos_a * normal.0 + sin_a * tangent.0,
                    cos_a * normal.1 + sin_a * tangent.1,
                );
            } else {
                match hit.axis {
                    Axis::X => dir.0 = -dir.0,
                    Axis::Y => dir.1 = -dir.1,
                }
            }
        }
    }
}

/// [`trace_rir`] plus tracing statistics.
pub fn trace_rir_with_stats(
    world: &World,
    query: &SourceReceiverQuery,
    cfg: &AcousticsConfig,
) -> Result<(Rir, TraceStats), AcousticsError> {
    cfg.validate()?;
    check_query(world, query)?;
    let len = cfg.rir_len();
    let fs = cfg.sample_rate as f64;
    let nbins = (cfg.max_rir_seconds / cfg.histogram_bin).ceil() as usize;
    let ears = ear_positions(&query.receiver, cfg.ear_offset);
    let source = (query.source[0], query.source[1]);
    let key = query.key();

    let pairs = cfg.rays_per_band.div_ceil(2);
    let tracer = RayTracer {
        world,
        cfg,
        ears,
        source,
        heading: query.receiver.theta_deg.to_radians(),
        pairs,
    };
    let zeros = || std::array::from_fn(|_| vec![0.0; nbins]);
    let mut hist = Histograms {
        bin: cfg.histogram_bin,
        data: [zeros(), zeros()],
        first_arrival: [f64::INFINITY; 2],
        hits: [0; 2],
    };
    let base = derive_seed(cfg.rng_seed, streams::TRACER, key);
    for i in 0..pairs {
        let seed = derive_seed(base, streams::TRACER, i as u64);
        tracer.trace(i, seed, false, &mut hist);
        tracer.trace(i, seed, true, &mut hist);
    }
    let rays = 2 * pairs;

    // each ray carries 1/rays of the power; a disc of radius r intercepts a
    // 2r chord of the 2*pi*d wavefront, so pi/r turns hits into 1/d intensity
    let weight = PI / (cfg.receiver_radius * rays as f64);
    let samples_per_bin = cfg.histogram_bin * fs;
    let noise = band_noise(
        len,
        cfg.sample_rate,
        derive_seed(cfg.rng_seed, streams::TRACER_NOISE, key),
    );
    let mut rir = Rir::zeros(cfg.sample_rate, len);
    let mut stats = TraceStats {
        rays,
        reflection_hits: hist.hits,
        direct_visible: [false; 2],
    };
    for e in 0..2 {
        let mut ch = vec![0.0f64; len];
        if hist.first_arrival[e].is_finite() {
            let start = (hist.first_arrival[e] * fs).ceil() as usize;
            for (k, out) in ch.iter_mut().enumerate().skip(start) {
                let b = ((k as f64 / fs) / cfg.histogram_bin) as usize;
                if b >= nbins {
                    break;
                }
                let mut p = 0.0;
                for band in 0..NUM_BANDS {
                    let energy = hist.data[e][band][b] * weight;
                    if energy > 0.0 {
                        p += (energy / samples_per_bin).sqrt() * noise[band][k];
                    }
                }
                *out = p;
            }
        }
        if let Some((n, amp)) = direct_path(world, source, ears[e], cfg) {
            stats.direct_visible[e] = true;
            if n < len {
                ch[n] += amp;
            }
        }
        rir.channels[e] = ch.into_iter().map(|v| v as f32).collect();
    }
    Ok((rir, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Material;

    fn small_cfg() -> AcousticsConfig {
        AcousticsConfig {
            rays_per_band: 512,
            max_rir_seconds: 0.25,
            ..Default::default()
        }
    }

    #[test]
    fn ears_sit_left_and_right_of_heading() {
        let e = ear_positions(
            &ReceiverPose {
                x: 1.0,
                y: 1.0,
                theta_deg: 0.0,
            },
            0.09,
        );
        assert_eq!(e[0], (1.0, 1.09));
        assert_eq!(e[1], (1.0, 0.91));
        let e = ear_positions(
            &ReceiverPose {
                x: 1.0,
                y: 1.0,
                theta_deg: 90.0,
            },
            0.09,
        );
        assert!(e[0].0 < 1.0 && e[1].0 > 1.0);
    }

    #[test]
    fn anechoic_room_gives_single_direct_impulse() {
        let w = World::rectangular_room(8.0, 6.0, 0.25, Material::uniform("anechoic", 1.0, 0.0))
            .unwrap();
        let q = SourceReceiverQuery::new((2.0, 3.0), (5.43, 3.0), 0.0);
        let cfg = AcousticsConfig::default();
        let rir = trace_rir(&w, &q, &cfg).unwrap();
        assert_eq!(rir.len(), 8000);
        for ch in &rir.channels {
            let peak = ch
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .unwrap();
            assert!((peak.0 as i64 - 160).abs() <= 1);
            let direct = (*peak.1 as f64).powi(2);
            let tail: f64 = ch
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != peak.0)
                .map(|(_, v)| (*v as f64).powi(2))
                .sum();
            assert!(tail < 1e-6 * direct);
        }
    }

    #[test]
    fn deterministic() {
        let w = World::rectangular_room(6.0, 5.0, 0.25, Material::drywall()).unwrap();
        let q = SourceReceiverQuery::new((1.5, 1.5), (4.5, 3.5), 90.0);
        let a = trace_rir(&w, &q, &small_cfg()).unwrap();
        let b = trace_rir(&w, &q, &small_cfg()).unwrap();
        assert_eq!(a, b);
        let other = trace_rir(
            &w,
            &q,
            &AcousticsConfig {
                rng_seed: 1,
                ..small_cfg()
            },
        )
        .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn symmetric_setup_gives_equal_channels() {
        let w = World::rectangular_room(8.0, 6.0, 0.25, Material::drywall()).unwrap();
        // mirror axis x = 4, source straight ahead of the receiver
        let q = SourceReceiverQuery::new((4.0, 4.5), (4.0, 1.5), 90.0);
        let (rir, stats) = trace_rir_with_stats(&w, &q, &small_cfg()).unwrap();
        assert!(stats.reflection_hits[0] > 0);
        assert_eq!(stats.reflection_hits[0], stats.reflection_hits[1]);
        let peak = rir.channels[0].iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for (l, r) in rir.channels[0].iter().zip(&rir.channels[1]) {
            assert!((l - r).abs() <= 1e-6 * peak.max(1.0));
        }
    }

    #[test]
    fn rejects_bad_queries() {
        let w = World::rectangular_room(6.0, 5.0, 0.25, Material::drywall()).unwrap();
        let cfg = small_cfg();
        let q = SourceReceiverQuery::new((0.1, 1.5), (4.5, 3.5), 90.0);
        assert!(matches!(
            trace_rir(&w, &q, &cfg),
            Err(AcousticsError::QueryOutOfFreeSpace(..))
        ));
        let q = SourceReceiverQuery::new((1.5, 1.5), (4.5, 3.5), 45.0);
        assert!(matches!(
            trace_rir(&w, &q, &cfg),
            Err(AcousticsError::InvalidQuery(_))
        ));
        let q = SourceReceiverQuery::new((1.5, 1.5), (4.5, 3.5), 0.0);
        let bad = AcousticsConfig { hop: 1000, ..cfg };
        assert!(matches!(
            trace_rir(&w, &q, &bad),
            Err(AcousticsError::ConfigInvalid(_))
        ));
    }

    #[test]
    fn wall_removes_direct_path() {
        let w = World::rectangular_room(8.0, 6.0, 0.25, Material::drywall()).unwrap();
        let q = SourceReceiverQuery::new((2.0, 2.0), (6.0, 2.0), 0.0);
        let cfg = small_cfg();
        let open = trace_rir(&w, &q, &cfg).unwrap();
        // divider at x = 4 .. 4.25, leaving a gap near the top wall
        let walled = w
            .with_walls(&(1..19).map(|j| (16usize, j)).collect::<Vec<_>>(), 0)
            .unwrap();
        let blocked = trace_rir(&walled, &q, &cfg).unwrap();
        for e in 0..2 {
            let ears = ear_positions(&q.receiver, cfg.ear_offset);
            let (n, amp) = direct_path(&w, (2.0, 2.0), ears[e], &cfg).unwrap();
            assert!((open.channels[e][n] as f64) >= amp * 0.9);
            for k in n - 2..=n + 2 {
                assert!((blocked.channels[e][k].abs() as f64) < 0.1 * amp);
            }
        }
    }
}
