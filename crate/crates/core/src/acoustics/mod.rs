//! Ground-truth room impulse responses and the DSP used to compare them.
//!
//! [`trace_rir`] is a stochastic 2D geometric-acoustics tracer: per-band
//! energy-time histograms gathered at two ear discs are shaped onto seeded
//! band-limited noise and summed with an analytic direct path. The rest of
//! the module is signal analysis: magnitude STFT ([`stft_mag`]), the mean
//! absolute spectrogram distance ([`stft_l1`]) and Schroeder decay analysis
//! ([`schroeder_rt60`]).

mod dsp;
pub mod export;
mod tracer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dsp::{
    band_energies, band_filter, band_noise, naive_dft_magnitudes, pulse_kernels, schroeder_curve,
    schroeder_rt60, stft_l1, stft_mag, window_coefficients, PulseKernels,
};
pub use tracer::{direct_path, ear_positions, trace_rir, trace_rir_with_stats, TraceStats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcousticsError {
    #[error("query position ({0:.3}, {1:.3}) is not in free space")]
    QueryOutOfFreeSpace(f64, f64),
    #[error("invalid acoustics config: {0}")]
    ConfigInvalid(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("spectrogram shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("energy decay never reaches -35 dB in a measurable way")]
    InsufficientDecay,
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hann,
    Rectangular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcousticsConfig {
    pub sample_rate: u32,
    pub max_rir_seconds: f64,
    pub speed_of_sound: f64,
    pub rays_per_band: usize,
    pub max_bounces: usize,
    /// STFT window length in samples (also the FFT size).
    pub window: usize,
    pub hop: usize,
    pub window_kind: WindowKind,
    pub rng_seed: u64,
    /// Radius of each ear's detection disc, meters.
    pub receiver_radius: f64,
    /// Lateral ear offset from the receiver position, meters.
    pub ear_offset: f64,
    /// Energy-time histogram bin width, seconds.
    pub histogram_bin: f64,
    /// RT60 reported when a decay cannot be measured, seconds.
    pub rt60_ceiling: f64,
    /// Shortest -5..-35 dB span accepted as a reverberant decay, seconds.
    pub min_decay_span: f64,
}

impl Default for AcousticsConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            max_rir_seconds: 0.5,
            speed_of_sound: 343.0,
            rays_per_band: 4096,
            max_bounces: 64,
            window: 512,
            hop: 256,
            window_kind: WindowKind::Hann,
            rng_seed: 0,
            receiver_radius: 0.15,
            ear_offset: 0.09,
            histogram_bin: 0.001,
            rt60_ceiling: 3.0,
            min_decay_span: 0.01,
        }
    }
}

impl AcousticsConfig {
    pub fn validate(&self) -> Result<(), AcousticsError> {
        let bad = |m: &str| Err(AcousticsError::ConfigInvalid(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if !(self.max_rir_seconds > 0.0) {
            return bad("max_rir_seconds must be positive");
        }
        if !(self.speed_of_sound > 0.0) {
            return bad("speed_of_sound must be positive");
        }
        if self.rays_per_band < 1 {
            return bad("rays_per_band must be >= 1");
        }
        if self.window < 2 || self.hop < 1 || self.hop > self.window {
            return bad("need window >= 2 and 1 <= hop <= window");
        }
        if !(self.receiver_radius > 0.0) || !(self.ear_offset >= 0.0) || !(self.histogram_bin > 0.0)
        {
            return bad("receiver geometry and histogram bin must be positive");
        }
        if !(self.rt60_ceiling > 0.0) || !(self.min_decay_span >= 0.0) {
            return bad("rt60 ceiling must be positive");
        }
        Ok(())
    }

    /// Number of samples in every RIR produced under this config.
    pub fn rir_len(&self) -> usize {
        (self.max_rir_seconds * self.sample_rate as f64).ceil() as usize
    }

    pub fn num_frames(&self) -> usize {
        num_frames(self.rir_len(), self.window, self.hop)
    }

    pub fn num_bins(&self) -> usize {
        self.window / 2 + 1
    }
}

/// Frames needed to cover `len` samples; the tail is zero-padded.
pub fn num_frames(len: usize, window: usize, hop: usize) -> usize {
    if len <= window {
        1
    } else {
        1 + (len - window).div_ceil(hop)
    }
}

/// A two-channel (left, right) impulse response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rir {
    pub sample_rate: u32,
    pub channels: [Vec<f32>; 2],
}

impl Rir {
    pub fn zeros(sample_rate: u32, len: usize) -> Self {
        Self {
            sample_rate,
            channels: [vec![0.0; len], vec![0.0; len]],
        }
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), AcousticsError> {
        if self.channels[0].len() != self.channels[1].len() {
            return Err(AcousticsError::InvalidSignal(
                "channel lengths differ".into(),
            ));
        }
        if self.sample_rate == 0 {
            return Err(AcousticsError::InvalidSignal("zero sample rate".into()));
        }
        if self.channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AcousticsError::InvalidSignal("non-finite sample".into()));
        }
        Ok(())
    }

    pub fn energy(&self) -> f64 {
        self.channels
            .iter()
            .flatten()
            .map(|&v| (v as f64) * (v as f64))
            .sum()
    }

    /// Multiplies every sample by `gain`.
    pub fn scaled(&self, gain: f32) -> Rir {
        let ch = |c: &Vec<f32>| c.iter().map(|v| v * gain).collect::<Vec<f32>>();
        Rir {
            sample_rate: self.sample_rate,
            channels: [ch(&self.channels[0]), ch(&self.channels[1])],
        }
    }
}

/// Two-channel magnitude spectrogram, stored channel-major then frame-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub window: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window_kind: WindowKind,
    pub data: Vec<f32>,
}

impl Spectrogram {
    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    #[inline]
    pub fn get(&self, channel: usize, frame: usize, bin: usize) -> f32 {
        self.data[(channel * self.frames + frame) * self.bins + bin]
    }

    pub fn frame(&self, channel: usize, frame: usize) -> &[f32] {
        let start = (channel * self.frames + frame) * self.bins;
        &self.data[start..start + self.bins]
    }

    /// A spectrogram of the same geometry with every entry zero.
    pub fn zeros_like(&self) -> Spectrogram {
        Spectrogram {
            data: vec![0.0; self.data.len()],
            ..self.clone()
        }
    }
}

/// Receiver pose: position plus heading in degrees counter-clockwise from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReceiverPose {
    pub x: f64,
    pub y: f64,
    pub theta_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceReceiverQuery {
    /// Omni-directional source position.
    pub source: [f64; 2],
    pub receiver: ReceiverPose,
}

impl SourceReceiverQuery {
    pub fn new(source: (f64, f64), receiver: (f64, f64), theta_deg: f64) -> Self {
        Self {
            source: [source.0, source.1],
            receiver: ReceiverPose {
                x: receiver.0,
                y: receiver.1,
                theta_deg,
            },
        }
    }

    pub fn midpoint(&self) -> (f64, f64) {
        (
            (self.source[0] + self.receiver.x) / 2.0,
            (self.source[1] + self.receiver.y) / 2.0,
        )
    }

    pub fn distance(&self) -> f64 {
        (self.source[0] - self.receiver.x).hypot(self.source[1] - self.receiver.y)
    }

    /// Source and receiver exchanged, receiver heading kept.
    pub fn swapped(&self) -> Self {
        Self::new(
            (self.receiver.x, self.receiver.y),
            (self.source[0], self.source[1]),
            self.receiver.theta_deg,
        )
    }

    pub fn heading_is_lattice(&self) -> bool {
        let t = self.receiver.theta_deg.rem_euclid(360.0);
        [0.0, 90.0, 180.0, 270.0].contains(&t)
    }

    pub(crate) fn key(&self) -> u64 {
        crate::rng::hash_f64s(&[
            self.source[0],
            self.source[1],
            self.receiver.x,
            self.receiver.y,
            self.receiver.theta_deg,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_covers_signal() {
        assert_eq!(num_frames(8000, 512, 256), 31);
        assert_eq!(num_frames(512, 512, 256), 1);
        assert_eq!(num_frames(100, 512, 256), 1);
        assert_eq!(num_frames(768, 512, 256), 2);
        assert_eq!(num_frames(769, 512, 256), 3);
        let cfg = AcousticsConfig::default();
        assert_eq!(cfg.rir_len(), 8000);
        assert_eq!(cfg.num_bins(), 257);
    }

    #[test]
    fn config_validation() {
        assert!(AcousticsConfig::default().validate().is_ok());
        let mut c = AcousticsConfig {
            hop: 600,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.hop = 256;
        c.speed_of_sound = 0.0;
        assert!(c.validate().is_err());
        c.speed_of_sound = 343.0;
        c.rays_per_band = 0;
        assert!(c.validate().is_err());
    }
}
