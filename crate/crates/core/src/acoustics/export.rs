//! File formats: 32-bit float stereo WAV for impulse responses, and a raw
//! little-endian f32 dump plus JSON sidecar for spectrograms.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Rir, Spectrogram, WindowKind};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed file: {0}")]
    Malformed(String),
}

pub fn write_wav(path: &Path, rir: &Rir) -> Result<(), ExportError> {
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: rir.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for (l, r) in rir.channels[0].iter().zip(&rir.channels[1]) {
        w.write_sample(*l)?;
        w.write_sample(*r)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Rir, ExportError> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 2
        || spec.sample_format != hound::SampleFormat::Float
        || spec.bits_per_sample != 32
    {
        return Err(ExportError::Malformed(
            "expected 2-channel 32-bit float wav".into(),
        ));
    }
    let samples: Vec<f32> = r.samples::<f32>().collect::<Result<_, _>>()?;
    let left = samples.iter().step_by(2).copied().collect();
    let right = samples.iter().skip(1).step_by(2).copied().collect();
    Ok(Rir {
        sample_rate: spec.sample_rate,
        channels: [left, right],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrogramSidecar {
    pub format: String,
    pub dtype: String,
    pub layout: String,
    pub channels: usize,
    pub frames: usize,
    pub bins: usize,
    pub window: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window_kind: WindowKind,
    pub sample_rate: u32,
}

/// Path of the JSON sidecar that accompanies a spectrogram dump.
pub fn sidecar_path(bin_path: &Path) -> PathBuf {
    let mut p = bin_path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn write_spectrogram(
    bin_path: &Path,
    spec: &Spectrogram,
    sample_rate: u32,
) -> Result<(), ExportError> {
    let bytes: Vec<u8> = spec.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(bin_path, bytes)?;
    let sidecar = SpectrogramSidecar {
        format: "echobench-spectrogram".into(),
        dtype: "f32le".into(),
        layout: "channel,frame,bin".into(),
        channels: 2,
        frames: spec.frames,
        bins: spec.bins,
        window: spec.window,
        hop: spec.hop,
        fft_size: spec.fft_size,
        window_kind: spec.window_kind,
        sample_rate,
    };
    fs::write(
        sidecar_path(bin_path),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn read_spectrogram(bin_path: &Path) -> Result<(Spectrogram, SpectrogramSidecar), ExportError> {
    let sidecar: SpectrogramSidecar =
        serde_json::from_str(&fs::read_to_string(sidecar_path(bin_path))?)?;
    let bytes = fs::read(bin_path)?;
    let expected = sidecar.channels * sidecar.frames * sidecar.bins * 4;
    if bytes.len() != expected || sidecar.channels != 2 {
        return Err(ExportError::Malformed(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let spec = Spectrogram {
        frames: sidecar.frames,
        bins: sidecar.bins,
        window: sidecar.window,
        hop: sidecar.hop,
        fft_size: sidecar.fft_size,
        window_kind: sidecar.window_kind,
        data,
    };
    Ok((spec, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::{stft_mag, AcousticsConfig};

    #[test]
    fn wav_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let rir = Rir {
            sample_rate: 16_000,
            channels: [vec![0.5, -1e-9, 3.25], vec![0.0, f32::MIN_POSITIVE, -7.0]],
        };
        write_wav(&p, &rir).unwrap();
        assert_eq!(read_wav(&p).unwrap(), rir);
    }

    #[test]
    fn spectrogram_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        let rir = Rir {
            sample_rate: 16_000,
            channels: [vec![0.25; 900], vec![-0.5; 900]],
        };
        let s = stft_mag(&rir, &AcousticsConfig::default()).unwrap();
        write_spectrogram(&p, &s, 16_000).unwrap();
        let (back, meta) = read_spectrogram(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!((meta.frames, meta.bins), (3, 257));
    }
}
