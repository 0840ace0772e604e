use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{num_frames, AcousticsConfig, AcousticsError, Rir, Spectrogram, WindowKind};
use crate::world::{BAND_EDGES_HZ, NUM_BANDS};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn forward_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

fn inverse_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// Analysis window of length `n`. Hann is the periodic variant.
pub fn window_coefficients(kind: WindowKind, n: usize) -> Vec<f64> {
    match kind {
        WindowKind::Rectangular => vec![1.0; n],
        WindowKind::Hann => (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
            .collect(),
    }
}

/// Magnitude STFT of both channels. Frames start every `hop` samples and
/// the final frame is zero-padded; the FFT size equals the window length.
pub fn stft_mag(rir: &Rir, cfg: &AcousticsConfig) -> Result<Spectrogram, AcousticsError> {
    rir.validate()?;
    if cfg.window < 2 || cfg.hop < 1 || cfg.hop > cfg.window {
        return Err(AcousticsError::ConfigInvalid(
            "need window >= 2 and 1 <= hop <= window".into(),
        ));
    }
    let (win, hop) = (cfg.window, cfg.hop);
    let frames = num_frames(rir.len(), win, hop);
    let bins = win / 2 + 1;
    let w = window_coefficients(cfg.window_kind, win);
    let fft = forward_plan(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(2 * frames * bins);
    for ch in &rir.channels {
        for f in 0..frames {
            let start = f * hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = ch.get(start + i).copied().unwrap_or(0.0) as f64;
                *slot = Complex::new(v * w[i], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend(buf[..bins].iter().map(|c| c.norm() as f32));
        }
    }
    Ok(Spectrogram {
        frames,
        bins,
        window: win,
        hop,
        fft_size: win,
        window_kind: cfg.window_kind,
        data,
    })
}

/// Per-frame DFT magnitudes computed by the defining sum. Slow; meant as a
/// reference for [`stft_mag`].
pub fn naive_dft_magnitudes(signal: &[f64], window: &[f64], hop: usize) -> Vec<Vec<f64>> {
    let n = window.len();
    let frames = num_frames(signal.len(), n, hop);
    (0..frames)
        .map(|f| {
            (0..=n / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (i, wi) in window.iter().enumerate() {
                        let x = signal.get(f * hop + i).copied().unwrap_or(0.0) * wi;
                        let ang = -2.0 * PI * (k * i % n) as f64 / n as f64;
                        re += x * ang.cos();
                        im += x * ang.sin();
                    }
                    re.hypot(im)
                })
                .collect()
        })
        .collect()
}

/// Mean absolute difference over every channel, frame and bin.
pub fn stft_l1(a: &Spectrogram, b: &Spectrogram) -> Result<f64, AcousticsError> {
    if a.shape() != b.shape() || a.data.len() != b.data.len() {
        return Err(AcousticsError::ShapeMismatch(a.shape(), b.shape()));
    }
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum();
    Ok(sum / a.data.len() as f64)
}

#[derive(Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn new(highpass: bool, f0: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b = if highpass {
            [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0]
        } else {
            [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0]
        };
        Self {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [-2.0 * c / a0, (1.0 - alpha) / a0],
        }
    }

    fn run(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let y =
                self.b[0] * *v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = *v;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }
}

// pole-pair quality factors of a 4th-order Butterworth section
const BUTTER4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_6];

/// Causal 4th-order Butterworth band filter for one of the analysis bands.
/// Band edges at 0 Hz or at/above Nyquist are left open.
pub fn band_filter(signal: &[f64], band: usize, sample_rate: u32) -> Vec<f64> {
    let fs = sample_rate as f64;
    let (lo, hi) = BAND_EDGES_HZ[band];
    let mut out = signal.to_vec();
    for q in BUTTER4_Q {
        if lo > 0.0 && lo < fs / 2.0 {
            Biquad::new(true, lo, q, fs).run(&mut out);
        }
        if hi < fs / 2.0 {
            Biquad::new(false, hi, q, fs).run(&mut out);
        }
    }
    out
}

/// Zero-phase band-limited pulses used to build deterministic tails, with
/// each pulse's mean STFT magnitude over its band when centred in a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseKernels {
    pub half: usize,
    pub taps: [Vec<f64>; NUM_BANDS],
    pub response: [f64; NUM_BANDS],
}

thread_local! {
    static PULSES: RefCell<Vec<((usize, WindowKind, u32, usize), Arc<PulseKernels>)>> =
        const { RefCell::new(Vec::new()) };
}

/// Kernels of `2 * half + 1` taps, Hann-tapered, designed on a
/// `window`-point grid. Cached per thread.
pub fn pulse_kernels(window: usize, kind: WindowKind, sample_rate: u32, half: usize) -> Arc<PulseKernels> {
    let key = (window, kind, sample_rate, half);
    if let Some(k) = PULSES.with(|c| c.borrow().iter().find(|(k, _)| *k == key).map(|(_, v)| v.clone())) {
        return k;
    }
    let fs = sample_rate as f64;
    let len = 2 * half + 1;
    let taper: Vec<f64> = (0..len)
        .map(|j| 0.5 - 0.5 * (2.0 * PI * (j as f64 + 1.0) / (len as f64 + 1.0)).cos())
        .collect();
    let w = window_coefficients(kind, window);
    let fft = forward_plan(window);
    let empty = || vec![0.0; len];
    let mut taps = [empty(), empty(), empty(), empty()];
    let mut response = [0.0; NUM_BANDS];
    for (b, tap) in taps.iter_mut().enumerate() {
        let in_band: Vec<usize> = (0..window).filter(|&k| band_of_bin(k, window, fs) == b).collect();
        for (j, t) in tap.iter_mut().enumerate() {
            let n = j as f64 - half as f64;
            let v: f64 = in_band.iter().map(|&k| (2.0 * PI * k as f64 * n / window as f64).cos()).sum();
            *t = v / window as f64 * taper[j];
        }
        let mut buf = vec![Complex::new(0.0, 0.0); window];
        for (j, t) in tap.iter().enumerate() {
            let i = window / 2 + j;
            if i >= half && i - half < window {
                buf[i - half] = Complex::new(t * w[i - half], 0.0);
            }
        }
        fft.process(&mut buf);
        let one_sided: Vec<usize> = in_band.iter().copied().filter(|&k| k <= window / 2).collect();
        response[b] = one_sided.iter().map(|&k| buf[k].norm()).sum::<f64>() / one_sided.len().max(1) as f64;
    }
    let k = Arc::new(PulseKernels { half, taps, response });
    PULSES.with(|c| c.borrow_mut().push((key, k.clone())));
    k
}

/// Backward-integrated energy decay curve in dB relative to its start.
/// Returns `None` for a silent signal.
pub fn schroeder_curve(signal: &[f64]) -> Option<Vec<f64>> {
    let mut acc = 0.0;
    let mut edc = vec![0.0; signal.len()];
    for (i, v) in signal.iter().enumerate().rev() {
        acc += v * v;
        edc[i] = acc;
    }
    let total = *edc.first()?;
    if !(total > 0.0) {
        return None;
    }
    Some(edc.iter().map(|e| 10.0 * (e / total).log10()).collect())
}

fn rt60_from_curve(curve: &[f64], fs: f64, min_span: f64) -> Result<f64, AcousticsError> {
    let i5 = curve
        .iter()
        .position(|&v| v <= -5.0)
        .ok_or(AcousticsError::InsufficientDecay)?;
    let i35 = curve
        .iter()
        .position(|&v| v <= -35.0)
        .ok_or(AcousticsError::InsufficientDecay)?;
    if ((i35 - i5) as f64) / fs < min_span {
        return Err(AcousticsError::InsufficientDecay);
    }
    // least-squares line through (t, dB) on the -5..-35 dB segment
    let n = (i35 - i5 + 1) as f64;
    let (mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0);
    for (i, &y) in curve.iter().enumerate().take(i35 + 1).skip(i5) {
        let t = i as f64 / fs;
        st += t;
        sy += y;
        stt += t * t;
        sty += t * y;
    }
    let denom = n * stt - st * st;
    if !(denom > 0.0) {
        return Err(AcousticsError::InsufficientDecay);
    }
    let slope = (n * sty - st * sy) / denom;
    if !(slope < 0.0) {
        return Err(AcousticsError::InsufficientDecay);
    }
    Ok(-60.0 / slope)
}

/// Reverberation time per channel for one analysis band, extrapolated to
/// -60 dB from a line fit of the -5..-35 dB part of the decay curve.
pub fn schroeder_rt60(
    rir: &Rir,
    band: usize,
    cfg: &AcousticsConfig,
) -> Result<[f64; 2], AcousticsError> {
    rir.validate()?;
    if band >= NUM_BANDS {
        return Err(AcousticsError::InvalidSignal(format!(
            "band {band} out of range"
        )));
    }
    let fs = rir.sample_rate as f64;
    let mut out = [0.0; 2];
    for (c, ch) in rir.channels.iter().enumerate() {
        let x: Vec<f64> = ch.iter().map(|&v| v as f64).collect();
        let filtered = band_filter(&x, band, rir.sample_rate);
        let curve = schroeder_curve(&filtered).ok_or(AcousticsError::InsufficientDecay)?;
        out[c] = rt60_from_curve(&curve, fs, cfg.min_decay_span)?;
    }
    Ok(out)
}

fn band_of_bin(k: usize, n: usize, fs: f64) -> usize {
    let kk = k.min(n - k);
    let f = kk as f64 * fs / n as f64;
    BAND_EDGES_HZ
        .iter()
        .position(|&(_, hi)| f < hi)
        .unwrap_or(NUM_BANDS - 1)
}

/// Signal energy split across the analysis bands by FFT bin frequency.
/// The bands sum to the total energy.
pub fn band_energies(signal: &[f64], sample_rate: u32) -> [f64; NUM_BANDS] {
    let n = signal.len();
    let mut out = [0.0; NUM_BANDS];
    if n == 0 {
        return out;
    }
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    forward_plan(n).process(&mut buf);
    for (k, c) in buf.iter().enumerate() {
        out[band_of_bin(k, n, sample_rate as f64)] += c.norm_sqr() / n as f64;
    }
    out
}

/// Seeded Gaussian noise split into the analysis bands with a brick-wall
/// FFT mask. Each band is scaled to unit RMS.
pub fn band_noise(len: usize, sample_rate: u32, seed: u64) -> [Vec<f64>; NUM_BANDS] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec: Vec<Complex<f64>> = (0..len)
        .map(|_| Complex::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();
    let empty = || vec![0.0; len];
    let mut out = [empty(), empty(), empty(), empty()];
    if len == 0 {
        return out;
    }
    forward_plan(len).process(&mut spec);
    let inv = inverse_plan(len);
    for (b, band) in out.iter_mut().enumerate() {
        let mut buf: Vec<Complex<f64>> = spec
            .iter()
            .enumerate()
            .map(|(k, c)| {
                if band_of_bin(k, len, sample_rate as f64) == b {
                    *c
                } else {
                    Complex::new(0.0, 0.0)
                }
            })
            .collect();
        inv.process(&mut buf);
        let rms = (buf.iter().map(|c| c.re * c.re).sum::<f64>() / len as f64).sqrt();
        if rms > 0.0 {
            for (o, c) in band.iter_mut().zip(&buf) {
                *o = c.re / rms;
            }
        }
    }
    out
}
