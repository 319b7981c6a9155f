//! Multichannel PCM audio: the in-memory sample model and wav file I/O.

use std::path::Path;

use ndarray::Array2;

use crate::device::MicrophoneId;
use crate::error::{Error, Result};
use crate::manifest::ClassLabel;

/// Synchronized multichannel audio, one row per channel, samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct MultichannelRecording {
    /// [channels x frames]
    pub samples: Array2<f64>,
    pub sample_rate: u32,
    pub channel_ids: Vec<MicrophoneId>,
    pub label: ClassLabel,
}

impl MultichannelRecording {
    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn frames(&self) -> usize {
        self.samples.ncols()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels() != self.channel_ids.len() {
            return Err(Error::Shape(format!(
                "{} sample rows vs {} channel ids",
                self.channels(),
                self.channel_ids.len()
            )));
        }
        if !self.samples.iter().all(|s| s.is_finite()) {
            return Err(Error::Consistency("non-finite samples".into()));
        }
        Ok(())
    }
}

/// Raw interleaved wav contents before channel selection.
pub struct WavData {
    /// [channels x frames], normalized to [-1, 1] by 2^(bit_depth-1).
    pub samples: Array2<f64>,
    pub sample_rate: u32,
    pub bit_depth: u16,
}

/// Reads an integer PCM wav file and normalizes to [-1, 1].
pub fn read_wav(path: &Path) -> Result<WavData> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            message: "only integer PCM wav is supported".into(),
        });
    }
    let channels = spec.channels as usize;
    let scale = 1.0 / f64::from(1u32 << (spec.bits_per_sample - 1));
    let samples: Vec<f64> = reader
        .into_samples::<i32>()
        .map(|s| s.map(|v| v as f64 * scale))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Wav {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    if channels == 0 || samples.len() % channels != 0 {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            message: format!(
                "truncated file: {} samples not divisible by {} channels",
                samples.len(),
                channels
            ),
        });
    }
    let frames = samples.len() / channels;
    // interleaved -> [channels x frames]
    let mut out = Array2::zeros((channels, frames));
    for (i, s) in samples.into_iter().enumerate() {
        out[[i % channels, i / channels]] = s;
    }
    Ok(WavData {
        samples: out,
        sample_rate: spec.sample_rate,
        bit_depth: spec.bits_per_sample,
    })
}

/// Writes [channels x frames] samples as integer PCM, clipping to [-1, 1].
pub fn write_wav(
    path: &Path,
    samples: &Array2<f64>,
    sample_rate: u32,
    bit_depth: u16,
) -> Result<()> {
    if bit_depth != 16 && bit_depth != 32 {
        return Err(Error::Parameter(format!(
            "unsupported bit depth {bit_depth}; expected 16 or 32"
        )));
    }
    let spec = hound::WavSpec {
        channels: samples.nrows() as u16,
        sample_rate,
        bits_per_sample: bit_depth,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let full_scale = f64::from(1u32 << (bit_depth - 1));
    let max_code = full_scale - 1.0;
    for frame in 0..samples.ncols() {
        for ch in 0..samples.nrows() {
            let v = (samples[[ch, frame]] * full_scale).round().clamp(-full_scale, max_code);
            let r = if bit_depth == 16 {
                writer.write_sample(v as i16)
            } else {
                writer.write_sample(v as i32)
            };
            r.map_err(|e| Error::Wav {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        }
    }
    writer.finalize().map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn full_scale_16bit_normalization() {
        // 32767 / 32768
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples = array![[32767.0 / 32768.0, -1.0, 0.0]];
        write_wav(&path, &samples, 16000, 16).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.bit_depth, 16);
        assert!((back.samples[[0, 0]] - 32767.0 / 32768.0).abs() < 1e-12);
        assert!((back.samples[[0, 1]] + 1.0).abs() < 1e-12);
        assert_eq!(back.samples[[0, 2]], 0.0);
    }

    #[test]
    fn round_trip_within_one_quantization_step() {
        let dir = tempfile::tempdir().unwrap();
        for &(bits, step) in &[(16u16, 1.0 / 32768.0), (32u16, 1.0 / 2147483648.0)] {
            let path = dir.path().join(format!("rt{bits}.wav"));
            let vals: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin() * 0.9).collect();
            let samples = Array2::from_shape_vec((2, 500), vals).unwrap();
            write_wav(&path, &samples, 44100, bits).unwrap();
            let back = read_wav(&path).unwrap();
            for (a, b) in samples.iter().zip(back.samples.iter()) {
                assert!((a - b).abs() <= step, "bits={bits}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.wav");
        let samples = Array2::from_elem((2, 100), 0.5);
        write_wav(&path, &samples, 16000, 16).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_wav(&path).is_err());
    }
}
