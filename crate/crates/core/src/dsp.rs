//! Signal frontend: cropping, band-limited resampling, STFT with
//! rate-dependent presets, and the average-magnitude spectra diagnostic.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::MultichannelRecording;
use crate::device::MicrophoneId;
use crate::error::{Error, Result};
use crate::manifest::{read_recording, ClassLabel, DatasetManifest};

/// STFT analysis parameters. Hann window, 50% overlap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftParams {
    pub window_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub sample_rate: u32,
}

impl StftParams {
    /// One-sided spectrum size.
    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for a signal of `len` samples (full frames only).
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        if len < self.window_length {
            None
        } else {
            Some((len - self.window_length) / self.hop_length + 1)
        }
    }

    pub fn bin_frequency_hz(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate as f64 / self.fft_size as f64
    }
}

/// Rate presets: 32 ms window at 44.1 kHz, 46 ms at 16 kHz, both with 50%
/// overlap and next-power-of-two FFT.
pub fn stft_params_for(sample_rate: u32) -> Result<StftParams> {
    let window_ms = match sample_rate {
        44100 => 0.032,
        16000 => 0.046,
        other => {
            return Err(Error::Parameter(format!(
                "no STFT preset for {other} Hz (supported: 44100, 16000)"
            )))
        }
    };
    let window_length = (window_ms * sample_rate as f64).round() as usize;
    let hop_length = (window_length as f64 / 2.0).round() as usize;
    let fft_size = window_length.next_power_of_two();
    Ok(StftParams {
        window_length,
        hop_length,
        fft_size,
        sample_rate,
    })
}

/// Multichannel complex STFT stack, shape [channels x frames x bins].
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub values: Array3<Complex64>,
    pub params: StftParams,
    pub channel_ids: Vec<MicrophoneId>,
}

impl ComplexSpectrogram {
    pub fn num_channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn num_bins(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Keeps exactly the first second of audio.
pub fn crop_first_second(rec: &MultichannelRecording) -> Result<MultichannelRecording> {
    let want = rec.sample_rate as usize;
    if rec.frames() < want {
        return Err(Error::InsufficientAudio(format!(
            "need {want} samples (1 s @ {} Hz), have {}",
            rec.sample_rate,
            rec.frames()
        )));
    }
    Ok(MultichannelRecording {
        samples: rec.samples.slice(ndarray::s![.., 0..want]).to_owned(),
        sample_rate: rec.sample_rate,
        channel_ids: rec.channel_ids.clone(),
        label: rec.label,
    })
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / len as f64).cos()))
        .collect()
}

/// Single-channel STFT. Frames of `window_length` samples spaced by
/// `hop_length`, Hann-windowed, zero-padded to `fft_size`; one-sided output.
pub fn stft_1d(signal: &[f64], params: &StftParams) -> Result<Array2<Complex64>> {
    let t = params.frame_count(signal.len()).ok_or_else(|| {
        Error::InsufficientAudio(format!(
            "signal of {} samples is shorter than one window ({})",
            signal.len(),
            params.window_length
        ))
    })?;
    let window = hann_window(params.window_length);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(params.fft_size);
    let bins = params.freq_bins();
    let mut out = Array2::zeros((t, bins));
    let mut buf = vec![Complex::new(0.0, 0.0); params.fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for frame in 0..t {
        let start = frame * params.hop_length;
        for i in 0..params.fft_size {
            let v = if i < params.window_length {
                signal[start + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (b, v) in buf[..bins].iter().enumerate() {
            out[[frame, b]] = *v;
        }
    }
    Ok(out)
}

/// Multichannel STFT of a recording.
pub fn stft(rec: &MultichannelRecording, params: &StftParams) -> Result<ComplexSpectrogram> {
    if params.sample_rate != rec.sample_rate {
        return Err(Error::Parameter(format!(
            "STFT params are for {} Hz but recording is {} Hz",
            params.sample_rate, rec.sample_rate
        )));
    }
    let mut per_channel = Vec::with_capacity(rec.channels());
    for ch in 0..rec.channels() {
        let row: Vec<f64> = rec.samples.row(ch).to_vec();
        per_channel.push(stft_1d(&row, params)?);
    }
    let t = per_channel[0].nrows();
    let f = per_channel[0].ncols();
    let mut values = Array3::zeros((rec.channels(), t, f));
    for (ch, spec) in per_channel.into_iter().enumerate() {
        values
            .index_axis_mut(ndarray::Axis(0), ch)
            .assign(&spec);
    }
    Ok(ComplexSpectrogram {
        values,
        params: *params,
        channel_ids: rec.channel_ids.clone(),
    })
}

/// Inverse STFT by overlap-add with window-sum normalization. Intended for
/// round-trip verification; interior samples reconstruct to near machine
/// precision, edges are attenuated by partial window coverage.
pub fn istft(frames: &Array2<Complex64>, params: &StftParams) -> Vec<f64> {
    let t = frames.nrows();
    let bins = params.freq_bins();
    let out_len = params.window_length + (t.saturating_sub(1)) * params.hop_length;
    let window = hann_window(params.window_length);
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(params.fft_size);
    let mut acc = vec![0.0; out_len];
    let mut wsum = vec![0.0; out_len];
    let mut buf = vec![Complex::new(0.0, 0.0); params.fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    for frame in 0..t {
        for b in 0..bins {
            buf[b] = frames[[frame, b]];
        }
        // hermitian extension of the one-sided spectrum
        for b in bins..params.fft_size {
            buf[b] = frames[[frame, params.fft_size - b]].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = frame * params.hop_length;
        let norm = 1.0 / params.fft_size as f64;
        for i in 0..params.window_length {
            acc[start + i] += buf[i].re * norm;
            wsum[start + i] += window[i];
        }
    }
    for (a, w) in acc.iter_mut().zip(&wsum) {
        if *w > 1e-8 {
            *a /= *w;
        }
    }
    acc
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Zeroth-order modified Bessel function of the first kind (series form).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_sq = (x / 2.0) * (x / 2.0);
    for k in 1..60 {
        term *= half_sq / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-18 {
            break;
        }
    }
    sum
}

fn kaiser_window(len: usize, beta: f64) -> Vec<f64> {
    let denom = bessel_i0(beta);
    let half = (len - 1) as f64 / 2.0;
    (0..len)
        .map(|n| {
            let r = (n as f64 - half) / half;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

const RESAMPLE_HALF_TAPS: usize = 32;
const RESAMPLE_OVERSAMPLE: usize = 256;
const RESAMPLE_KAISER_BETA: f64 = 12.0;
const RESAMPLE_CUTOFF: f64 = 0.945;

/// Band-limited resampling by an oversampled windowed-sinc table with linear
/// interpolation between phases. Output length is round(len * to/from);
/// equal rates return the input unchanged.
pub fn resample(signal: &[f64], from_rate: u32, to_rate: u32) -> Result<Vec<f64>> {
    if from_rate == 0 || to_rate == 0 {
        return Err(Error::Parameter(format!(
            "sample rates must be positive, got {from_rate} -> {to_rate}"
        )));
    }
    if from_rate == to_rate {
        return Ok(signal.to_vec());
    }
    let ratio = from_rate as f64 / to_rate as f64;
    // cutoff relative to the input Nyquist; shrink when downsampling
    let cutoff = RESAMPLE_CUTOFF * (1.0 / ratio).min(1.0);

    let taps = RESAMPLE_HALF_TAPS * 2;
    let filter_len = taps * RESAMPLE_OVERSAMPLE + 1;
    let center = (RESAMPLE_HALF_TAPS * RESAMPLE_OVERSAMPLE) as f64;
    let window = kaiser_window(filter_len, RESAMPLE_KAISER_BETA);
    let filter: Vec<f64> = window
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let x = (i as f64 - center) / RESAMPLE_OVERSAMPLE as f64;
            cutoff * sinc(cutoff * x) * w
        })
        .collect();

    let out_len = (signal.len() as f64 * to_rate as f64 / from_rate as f64).round() as usize;
    let n = signal.len() as isize;
    let offset = RESAMPLE_HALF_TAPS as isize - 1;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * ratio;
        let pos_int = pos.floor() as isize;
        let frac = pos - pos.floor();
        let phase = frac * RESAMPLE_OVERSAMPLE as f64;
        let phase_int = phase.floor() as usize;
        let phase_frac = phase - phase.floor();
        let mut acc = 0.0;
        for t in 0..taps {
            let idx = pos_int + t as isize - offset;
            if idx >= 0 && idx < n {
                let base = (t + 1) * RESAMPLE_OVERSAMPLE - phase_int;
                let a = filter[base];
                let b = filter[base - 1];
                acc += signal[idx as usize] * (a + (b - a) * phase_frac);
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// Resamples every channel of a recording.
pub fn resample_recording(
    rec: &MultichannelRecording,
    to_rate: u32,
) -> Result<MultichannelRecording> {
    if rec.sample_rate == to_rate {
        return Ok(rec.clone());
    }
    let mut rows = Vec::with_capacity(rec.channels());
    for ch in 0..rec.channels() {
        let row: Vec<f64> = rec.samples.row(ch).to_vec();
        rows.push(resample(&row, rec.sample_rate, to_rate)?);
    }
    let frames = rows[0].len();
    let mut samples = Array2::zeros((rows.len(), frames));
    for (ch, row) in rows.into_iter().enumerate() {
        samples
            .row_mut(ch)
            .assign(&Array1::from_vec(row));
    }
    Ok(MultichannelRecording {
        samples,
        sample_rate: to_rate,
        channel_ids: rec.channel_ids.clone(),
        label: rec.label,
    })
}

/// Mean |STFT| over entries and frames for one microphone and class.
#[derive(Debug, Clone)]
pub struct AverageSpectrum {
    pub params: StftParams,
    pub mean_magnitude: Vec<f64>,
    pub n_entries: usize,
}

impl AverageSpectrum {
    pub fn frequencies_hz(&self) -> Vec<f64> {
        (0..self.mean_magnitude.len())
            .map(|b| self.params.bin_frequency_hz(b))
            .collect()
    }
}

/// Averages STFT magnitudes of the first second of every matching entry.
pub fn average_magnitude_spectra(
    manifest: &DatasetManifest,
    mic: MicrophoneId,
    class_label: ClassLabel,
) -> Result<AverageSpectrum> {
    let device = crate::device::device_of(mic);
    let params = stft_params_for(device.sample_rate)?;
    let mut sum = vec![0.0f64; params.freq_bins()];
    let mut frames = 0usize;
    let mut n_entries = 0usize;
    for entry in &manifest.entries {
        if entry.device != device.device_id || entry.label != class_label {
            continue;
        }
        let rec = read_recording(entry, &[mic])?;
        let rec = crop_first_second(&rec)?;
        let spec = stft(&rec, &params)?;
        for t in 0..spec.num_frames() {
            for b in 0..spec.num_bins() {
                sum[b] += spec.values[[0, t, b]].norm();
            }
        }
        frames += spec.num_frames();
        n_entries += 1;
    }
    if n_entries == 0 {
        return Err(Error::NoData(format!(
            "no {} entries for microphone {} on {}",
            class_label.as_str(),
            mic,
            device.device_id
        )));
    }
    for v in &mut sum {
        *v /= frames as f64;
    }
    Ok(AverageSpectrum {
        params,
        mean_magnitude: sum,
        n_entries,
    })
}
