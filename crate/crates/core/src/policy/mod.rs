//! Recurrent actor-critic over compact geometric and acoustic observations.
//!
//! Parameters live in one flat `Vec<f64>`; [`Layout`] names the slices.
//! Three single-layer tanh encoders (occupancy patch, pose embedding, echo
//! and bookkeeping features) feed a GRU whose state drives a 6-way actor
//! head and a scalar critic.

mod net;
mod ppo;

pub use net::{policy_forward, sequence_grad, SequenceStep, StepCache, StepOutput};
pub use ppo::{
    compute_gae, loss_and_grad, normalize_advantages, ppo_update, prepare, Adam, LossStats,
    Prepared, RolloutBatch, RolloutSegment, TrainConfig, Transition,
};

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embodiment::{
    ActionCommand, DepthScan, MapCell, Motion, OccupancyMap, Pose, Sampling, NUM_ACTIONS,
};
use crate::renderer::EchoFeatures;
use crate::world::NUM_BANDS;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite loss during update {update}: {detail}")]
    NonFiniteLoss { update: u64, detail: String },
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Echo block: per-band RT60, per-band log energy, D/R, sampled flag.
pub const ECHO_DIM: usize = 2 * NUM_BANDS + 2;
/// Everything that is neither patch nor pose: echo block, budget fraction,
/// min/mean/max depth, time fraction, nearest-context distance, blocked
/// flag, current-cell novelty, lookahead.
pub const MISC_DIM: usize = ECHO_DIM + 1 + 3 + 4 + LOOKAHEAD_DIM;
/// Three values for each of the four lattice directions.
pub const LOOKAHEAD_DIM: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Side of the egocentric occupancy crop, in patch cells.
    pub patch: usize,
    /// Patch cell pitch in map cells.
    pub patch_stride: usize,
    pub pose_dim: usize,
    /// Longest period of the pose embedding, meters. Must exceed the world
    /// extent for the embedding to be injective.
    pub pose_period: f64,
    pub hidden: usize,
    pub enc_patch: usize,
    pub enc_pose: usize,
    pub enc_misc: usize,
    /// Distance scale for depth and nearest-context features, meters.
    pub range_scale: f64,
    /// Probability of sampling under the initial policy, set through the
    /// actor bias. Matching the budget rate `N / T` keeps early rollouts
    /// from spending the whole budget in the first few steps.
    pub initial_sample_rate: f64,
    /// Probability of moving forward under the initial policy.
    pub initial_forward_rate: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            patch: 21,
            patch_stride: 2,
            pose_dim: 24,
            pose_period: 64.0,
            hidden: 128,
            enc_patch: 32,
            enc_pose: 16,
            enc_misc: 16,
            range_scale: 10.0,
            initial_sample_rate: 0.1,
            initial_forward_rate: 1.0 / 3.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::ConfigInvalid(m.into()));
        if self.patch == 0 || self.patch % 2 == 0 {
            return bad("patch must be odd and positive");
        }
        if self.patch_stride == 0 {
            return bad("patch_stride must be positive");
        }
        if self.pose_dim < 4 || (self.pose_dim - 4) % 4 != 0 {
            return bad("pose_dim must be 4 + 4k");
        }
        if !(self.pose_period > 0.0) || !(self.range_scale > 0.0) {
            return bad("pose_period and range_scale must be positive");
        }
        let open = |p: f64| p > 0.0 && p < 1.0;
        if !open(self.initial_sample_rate) || !open(self.initial_forward_rate) {
            return bad("initial_sample_rate and initial_forward_rate must be in (0, 1)");
        }
        if self.hidden == 0 || self.enc_patch == 0 || self.enc_pose == 0 || self.enc_misc == 0 {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn obs_dim(&self) -> usize {
        self.patch_dim() + self.pose_dim + MISC_DIM
    }

    pub fn encoded_dim(&self) -> usize {
        self.enc_patch + self.enc_pose + self.enc_misc
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Named slices of the flat parameter vector. Matrices are row-major
/// `rows x cols` with `rows` = output width.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub patch_w: Range<usize>,
    pub patch_b: Range<usize>,
    pub pose_w: Range<usize>,
    pub pose_b: Range<usize>,
    pub misc_w: Range<usize>,
    pub misc_b: Range<usize>,
    /// Input-to-hidden GRU weights, gate order update, reset, candidate.
    pub gru_wx: Range<usize>,
    pub gru_wh: Range<usize>,
    pub gru_bx: Range<usize>,
    pub gru_bh: Range<usize>,
    pub actor_w: Range<usize>,
    pub actor_b: Range<usize>,
    pub critic_w: Range<usize>,
    pub critic_b: Range<usize>,
    pub total: usize,
}

impl Layout {
    fn new(c: &PolicyConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let h = c.hidden;
        let g = c.encoded_dim();
        let patch_w = take(c.enc_patch * c.patch_dim());
        let patch_b = take(c.enc_patch);
        let pose_w = take(c.enc_pose * c.pose_dim);
        let pose_b = take(c.enc_pose);
        let misc_w = take(c.enc_misc * MISC_DIM);
        let misc_b = take(c.enc_misc);
        let gru_wx = take(3 * h * g);
        let gru_wh = take(3 * h * h);
        let gru_bx = take(3 * h);
        let gru_bh = take(3 * h);
        let actor_w = take(NUM_ACTIONS * h);
        let actor_b = take(NUM_ACTIONS);
        let critic_w = take(h);
        let critic_b = take(1);
        Self {
            patch_w,
            patch_b,
            pose_w,
            pose_b,
            misc_w,
            misc_b,
            gru_wx,
            gru_wh,
            gru_bx,
            gru_bh,
            actor_w,
            actor_b,
            critic_w,
            critic_b,
            total: at,
        }
    }

    pub fn groups(&self) -> Vec<(&'static str, Range<usize>)> {
        vec![
            ("patch_w", self.patch_w.clone()),
            ("patch_b", self.patch_b.clone()),
            ("pose_w", self.pose_w.clone()),
            ("pose_b", self.pose_b.clone()),
            ("misc_w", self.misc_w.clone()),
            ("misc_b", self.misc_b.clone()),
            ("gru_wx", self.gru_wx.clone()),
            ("gru_wh", self.gru_wh.clone()),
            ("gru_bx", self.gru_bx.clone()),
            ("gru_bh", self.gru_bh.clone()),
            ("actor_w", self.actor_w.clone()),
            ("actor_b", self.actor_b.clone()),
            ("critic_w", self.critic_w.clone()),
            ("critic_b", self.critic_b.clone()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(config: &PolicyConfig) -> Self {
        Self {
            config: config.clone(),
            values: vec![0.0; config.layout().total],
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases except the actor's,
    /// and a small actor head so the initial policy is close to the prior
    /// set by `initial_sample_rate` and `initial_forward_rate`.
    pub fn init(config: &PolicyConfig, rng: &mut ChaCha8Rng) -> Self {
        let l = config.layout();
        let mut p = Self::zeros(config);
        let mut fill = |r: Range<usize>, fan_in: usize, scale: f64| {
            let b = scale / (fan_in as f64).sqrt();
            for v in &mut p.values[r] {
                *v = rng.gen_range(-b..b);
            }
        };
        fill(l.patch_w.clone(), config.patch_dim(), 1.0);
        fill(l.pose_w.clone(), config.pose_dim, 1.0);
        fill(l.misc_w.clone(), MISC_DIM, 1.0);
        fill(l.gru_wx.clone(), config.encoded_dim(), 1.0);
        fill(l.gru_wh.clone(), config.hidden, 1.0);
        fill(l.actor_w.clone(), config.hidden, 0.01);
        fill(l.critic_w.clone(), config.hidden, 1.0);
        p.values[l.actor_b].copy_from_slice(&actor_prior(config));
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Actor biases whose softmax factorizes into independent motion and
/// sampling marginals with the configured rates.
pub fn actor_prior(config: &PolicyConfig) -> [f64; NUM_ACTIONS] {
    let ps = config.initial_sample_rate;
    let pf = config.initial_forward_rate;
    let mut b = [0.0; NUM_ACTIONS];
    for (i, v) in b.iter_mut().enumerate() {
        let cmd = ActionCommand::from_index(i);
        let pm = if cmd.motion == Motion::MoveForward { pf } else { (1.0 - pf) / 2.0 };
        let pq = if cmd.sampling == Sampling::Sample { ps } else { 1.0 - ps };
        *v = (pm * pq).ln();
    }
    b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentState {
    pub h: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(config: &PolicyConfig) -> Self {
        Self {
            h: vec![0.0; config.hidden],
        }
    }
}

/// Everything the agent can see at one step.
#[derive(Debug, Clone, Copy)]
pub struct ObservationInput<'a> {
    pub map: &'a OccupancyMap,
    pub believed: &'a Pose,
    pub scan: &'a DepthScan,
    /// Features of the echo captured on the previous step, if it sampled.
    pub last_echo: Option<&'a EchoFeatures>,
    pub samples_used: usize,
    pub budget: usize,
    pub step: usize,
    pub horizon: usize,
    /// Distance from the believed position to the closest context pose.
    pub nearest_context: Option<f64>,
    pub blocked_last: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFeatures {
    pub occupancy_patch: Vec<f64>,
    pub pose_embedding: Vec<f64>,
    pub echo_features: [f64; ECHO_DIM],
    pub budget_fraction: f64,
    pub scan_summary: [f64; 3],
    /// Time fraction, nearest-context distance, blocked flag, novelty.
    pub extras: [f64; 4],
    pub lookahead: [f64; LOOKAHEAD_DIM],
}

impl ObservationFeatures {
    /// Concatenation in encoder-group order: patch, pose, misc.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v =
            Vec::with_capacity(self.occupancy_patch.len() + self.pose_embedding.len() + MISC_DIM);
        v.extend_from_slice(&self.occupancy_patch);
        v.extend_from_slice(&self.pose_embedding);
        v.extend_from_slice(&self.echo_features);
        v.push(self.budget_fraction);
        v.extend_from_slice(&self.scan_summary);
        v.extend_from_slice(&self.extras);
        v.extend_from_slice(&self.lookahead);
        v
    }
}

/// Sin/cos features of `(x, y)` at geometrically spaced periods starting
/// from `period`, followed by first and second harmonics of the heading.
pub fn pose_embedding(x: f64, y: f64, theta_deg: f64, dim: usize, period: f64) -> Vec<f64> {
    let freqs = (dim - 4) / 4;
    let mut out = Vec::with_capacity(dim);
    for coord in [x, y] {
        for k in 0..freqs {
            let w = std::f64::consts::TAU * (1u64 << k) as f64 / period;
            out.push((w * coord).sin());
            out.push((w * coord).cos());
        }
    }
    let t = theta_deg.to_radians();
    out.extend_from_slice(&[t.sin(), t.cos(), (2.0 * t).sin(), (2.0 * t).cos()]);
    out
}

/// Egocentric crop: row `a` runs along the heading, column `b` to the left.
/// Free = +1, Occupied = -1, Unknown = 0.
pub fn occupancy_patch(map: &OccupancyMap, pose: &Pose, patch: usize, stride: usize) -> Vec<f64> {
    let c = (patch / 2) as f64;
    let pitch = stride as f64 * map.cell_size;
    let t = pose.theta_deg.to_radians();
    let (fx, fy) = (t.cos(), t.sin());
    let (lx, ly) = (-fy, fx);
    let mut out = Vec::with_capacity(patch * patch);
    for a in 0..patch {
        let f = (a as f64 - c) * pitch;
        for b in 0..patch {
            let l = (b as f64 - c) * pitch;
            let x = pose.x + f * fx + l * lx;
            let y = pose.y + f * fy + l * ly;
            let cell = map.get(
                (x / map.cell_size).floor() as i64,
                (y / map.cell_size).floor() as i64,
            );
            out.push(match cell {
                MapCell::Free => 1.0,
                MapCell::Occupied => -1.0,
                MapCell::Unknown => 0.0,
            });
        }
    }
    out
}

pub fn echo_block(f: Option<&EchoFeatures>) -> [f64; ECHO_DIM] {
    let mut out = [0.0; ECHO_DIM];
    if let Some(f) = f {
        for b in 0..NUM_BANDS {
            out[b] = f.rt60[b];
            out[NUM_BANDS + b] = (f.energy[b].max(0.0) + 1e-6).log10() / 3.0;
        }
        out[2 * NUM_BANDS] = f.dr_db / 20.0;
        out[2 * NUM_BANDS + 1] = 1.0;
    }
    out
}

pub fn encode_observation(
    input: &ObservationInput<'_>,
    config: &PolicyConfig,
) -> ObservationFeatures {
    let b = input.believed;
    let s = config.range_scale;
    let nearest = input.nearest_context.map_or(1.0, |d| (d / s).min(1.0));
    let visits = input.map.visit_count_at(b.x, b.y);
    ObservationFeatures {
        occupancy_patch: occupancy_patch(input.map, b, config.patch, config.patch_stride),
        pose_embedding: pose_embedding(b.x, b.y, b.theta_deg, config.pose_dim, config.pose_period),
        echo_features: echo_block(input.last_echo),
        budget_fraction: if input.budget == 0 {
            1.0
        } else {
            input.samples_used as f64 / input.budget as f64
        },
        scan_summary: [
            input.scan.min() / s,
            input.scan.mean() / s,
            input.scan.max() / s,
        ],
        extras: [
            input.step as f64 / input.horizon.max(1) as f64,
            nearest,
            if input.blocked_last { 1.0 } else { 0.0 },
            1.0 / f64::from(visits.max(1)).sqrt(),
        ],
        lookahead: lookahead(input.map, b, s),
    }
}

/// For ahead, left, behind and right of the believed heading (snapped to
/// the lattice): whether a 1 m move crosses no mapped wall, the novelty a
/// move there would earn, and the mapped-free run before unknown space as a
/// fraction of `range` (1 when a wall or `range` comes first).
pub fn lookahead(map: &OccupancyMap, believed: &Pose, range: f64) -> [f64; LOOKAHEAD_DIM] {
    let mut out = [0.0; LOOKAHEAD_DIM];
    let base = (believed.theta_deg / 90.0).round() * 90.0;
    let from = (believed.x, believed.y);
    for (k, turn) in [0.0, 90.0, 180.0, 270.0].iter().enumerate() {
        let (dx, dy) = crate::grid::heading_vector(base + turn);
        let dest = (from.0 + dx, from.1 + dy);
        out[3 * k] = if map.segment_clear(from, dest) { 1.0 } else { 0.0 };
        out[3 * k + 1] = 1.0 / f64::from(map.visit_count_at(dest.0, dest.1) + 1).sqrt();
        let step = map.cell_size;
        let mut run = range;
        let mut d = step;
        while d < range {
            let (x, y) = (from.0 + d * dx, from.1 + d * dy);
            let cell = map.get((x / step).floor() as i64, (y / step).floor() as i64);
            if cell == MapCell::Occupied {
                break;
            }
            if cell == MapCell::Unknown {
                run = d;
                break;
            }
            d += step;
        }
        out[3 * k + 2] = run / range;
    }
    out
}

/// True for actions that take a sample.
pub fn is_sample_action(index: usize) -> bool {
    ActionCommand::from_index(index).sampling == Sampling::Sample
}

/// Softmax over the allowed actions; masked actions get probability 0.
pub fn masked_softmax(logits: &[f64; NUM_ACTIONS], sample_allowed: bool) -> [f64; NUM_ACTIONS] {
    let allowed = |i: usize| sample_allowed || !is_sample_action(i);
    let m = (0..NUM_ACTIONS)
        .filter(|&i| allowed(i))
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; NUM_ACTIONS];
    let mut z = 0.0;
    for i in 0..NUM_ACTIONS {
        if allowed(i) {
            p[i] = (logits[i] - m).exp();
            z += p[i];
        }
    }
    for v in &mut p {
        *v /= z;
    }
    p
}

/// Log-probabilities matching [`masked_softmax`]; masked entries are -inf.
pub fn masked_log_softmax(logits: &[f64; NUM_ACTIONS], sample_allowed: bool) -> [f64; NUM_ACTIONS] {
    let allowed = |i: usize| sample_allowed || !is_sample_action(i);
    let m = (0..NUM_ACTIONS)
        .filter(|&i| allowed(i))
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = m
        + (0..NUM_ACTIONS)
            .filter(|&i| allowed(i))
            .map(|i| (logits[i] - m).exp())
            .sum::<f64>()
            .ln();
    let mut out = [f64::NEG_INFINITY; NUM_ACTIONS];
    for i in 0..NUM_ACTIONS {
        if allowed(i) {
            out[i] = logits[i] - lse;
        }
    }
    out
}

/// Categorical draw from the masked distribution.
pub fn sample_action<R: Rng>(
    logits: &[f64; NUM_ACTIONS],
    rng: &mut R,
    sample_allowed: bool,
) -> usize {
    let p = masked_softmax(logits, sample_allowed);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Versioned JSON checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub update: u64,
    pub params: PolicyParams,
    pub adam: Adam,
    pub rng_states: Vec<ChaCha8Rng>,
    /// Best validation error seen so far and the update that produced it.
    pub best_val: Option<(u64, f64)>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PolicyError> {
        let c: Checkpoint =
            serde_json::from_str(s).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported version {}",
                c.version
            )));
        }
        if c.params.values.len() != c.params.config.layout().total {
            return Err(PolicyError::Checkpoint(
                "parameter count does not match layout".into(),
            ));
        }
        Ok(c)
    }
}

/// Hex SHA-256 of a serializable config.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
