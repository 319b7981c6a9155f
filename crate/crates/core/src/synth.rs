//! Synthetic multichannel replay corpus with controllable per-microphone
//! spectral coloration.
//!
//! Genuine files are source -> per-mic coloration -> mic noise. Replay files
//! push the same source through a loudspeaker-like chain (band-pass, soft
//! saturation, decaying reverberation, noise) before the microphones, so the
//! only systematic class difference is the replay channel.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::write_wav;
use crate::device::{device_spec, DeviceId};
use crate::error::{Error, Result};
use crate::manifest::{
    save_manifest, ClassLabel, DatasetManifest, Environment, RecordingEntry, Split,
};

/// Rate at which sources and the replay chain are rendered before per-device
/// resampling.
pub const MASTER_RATE: u32 = 44100;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent stream seed for (master, lane, index).
pub fn derive_seed(master: u64, lane: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(lane.wrapping_mul(0xa076_1d64_78bd_642f) ^ index))
}

/// Spectral signature of one microphone: resonant peaks, broadband tilt and
/// a noise floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicColorationProfile {
    pub peak_frequencies_hz: Vec<f64>,
    pub peak_gains_db: Vec<f64>,
    pub peak_bandwidths_hz: Vec<f64>,
    pub broadband_tilt_db_per_octave: f64,
    /// dB relative to full scale; `-inf` disables the noise.
    pub noise_floor_db: f64,
    pub seed: u64,
}

impl MicColorationProfile {
    /// Identity response: no peaks, no tilt, no noise.
    pub fn neutral() -> Self {
        MicColorationProfile {
            peak_frequencies_hz: vec![],
            peak_gains_db: vec![],
            peak_bandwidths_hz: vec![],
            broadband_tilt_db_per_octave: 0.0,
            noise_floor_db: f64::NEG_INFINITY,
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut p = self.clone();
        p.seed = seed;
        p
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if self.peak_frequencies_hz.len() != self.peak_gains_db.len()
            || self.peak_frequencies_hz.len() != self.peak_bandwidths_hz.len()
        {
            return Err(Error::Parameter(
                "peak frequency/gain/bandwidth lists must have equal length".into(),
            ));
        }
        for &f in &self.peak_frequencies_hz {
            if !(f > 0.0 && f < nyquist) {
                return Err(Error::Parameter(format!(
                    "peak frequency {f} Hz outside (0, {nyquist}) Hz"
                )));
            }
        }
        for &g in &self.peak_gains_db {
            if !(-24.0..=24.0).contains(&g) {
                return Err(Error::Parameter(format!(
                    "peak gain {g} dB outside [-24, 24] dB"
                )));
            }
        }
        for &b in &self.peak_bandwidths_hz {
            if !(b > 0.0) {
                return Err(Error::Parameter(format!("non-positive bandwidth {b} Hz")));
            }
        }
        Ok(())
    }
}

/// Loudspeaker re-recording path applied to replay-class sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayChainParams {
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub softclip_drive: f64,
    pub reverb_t60_s: f64,
    /// dB relative to full scale; `-inf` disables the noise.
    pub replay_noise_db: f64,
}

impl ReplayChainParams {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.band_low_hz >= 0.0 && self.band_low_hz < self.band_high_hz) {
            return Err(Error::Parameter(format!(
                "invalid band [{}, {}] Hz",
                self.band_low_hz, self.band_high_hz
            )));
        }
        if self.band_high_hz >= nyquist {
            return Err(Error::Parameter(format!(
                "band_high {} Hz must stay below Nyquist {nyquist} Hz",
                self.band_high_hz
            )));
        }
        if self.softclip_drive < 0.0 || self.reverb_t60_s < 0.0 {
            return Err(Error::Parameter(
                "softclip_drive and reverb_t60 must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    HarmonicVoicelike,
    FilteredNoise,
}

/// Full description of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub devices: Vec<DeviceId>,
    /// Keyed by microphone id.
    pub per_mic_profiles: BTreeMap<u8, MicColorationProfile>,
    pub replay: ReplayChainParams,
    pub n_genuine: usize,
    pub n_replay: usize,
    pub utterance_duration_s: f64,
    pub source_kind: SourceKind,
    /// Fraction of each class assigned to the train split.
    pub train_fraction: f64,
    pub environment: Environment,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::Parameter("at least one device required".into()));
        }
        if self.n_genuine < 1 || self.n_replay < 1 {
            return Err(Error::Parameter(
                "n_genuine and n_replay must be at least 1".into(),
            ));
        }
        if self.utterance_duration_s < 1.0 {
            return Err(Error::Parameter(format!(
                "utterance duration {} s is below the 1 s analysis window",
                self.utterance_duration_s
            )));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Parameter(format!(
                "train_fraction {} outside [0, 1]",
                self.train_fraction
            )));
        }
        self.replay.validate(MASTER_RATE)?;
        for dev in &self.devices {
            let spec = device_spec(*dev);
            for mic in &spec.mic_ids {
                let profile = self.per_mic_profiles.get(&mic.get()).ok_or_else(|| {
                    Error::Parameter(format!("no coloration profile for microphone {mic}"))
                })?;
                profile.validate(spec.sample_rate)?;
            }
        }
        Ok(())
    }

    /// Randomized per-mic profiles: a few dominant resonances per microphone,
    /// placed in disjoint bands per device so arrays differ systematically.
    /// `contrast` in [0, 1] widens the band separation and gains.
    pub fn with_random_profiles(mut self, seed: u64, contrast: f64) -> Self {
        let contrast = contrast.clamp(0.0, 1.0);
        for (d, dev) in self.devices.clone().iter().enumerate() {
            let spec = device_spec(*dev);
            let nyq = spec.sample_rate as f64 / 2.0;
            // device band: spread device centers apart as contrast grows
            let lo = 300.0 + d as f64 * 1200.0 * (0.5 + contrast);
            let hi = (lo + 1400.0 + 800.0 * contrast).min(nyq * 0.85);
            for (k, mic) in spec.mic_ids.iter().enumerate() {
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0xC0102, mic.get() as u64));
                let n_peaks = 2 + (k % 2);
                let mut freqs = Vec::new();
                let mut gains = Vec::new();
                let mut bands = Vec::new();
                for _ in 0..n_peaks {
                    let f: f64 = rng.sample(Uniform::new(lo, hi));
                    freqs.push(f.min(nyq * 0.9));
                    gains.push(rng.sample(Uniform::new(6.0, 10.0 + 8.0 * contrast)));
                    bands.push(f / 4.0);
                }
                let tilt = rng.sample(Uniform::new(-1.0, 1.0))
                    + (d as f64 - 0.5) * 2.0 * contrast;
                self.per_mic_profiles.insert(
                    mic.get(),
                    MicColorationProfile {
                        peak_frequencies_hz: freqs,
                        peak_gains_db: gains,
                        peak_bandwidths_hz: bands,
                        broadband_tilt_db_per_octave: tilt,
                        noise_floor_db: -55.0,
                        seed: derive_seed(seed, 0xC0103, mic.get() as u64),
                    },
                );
            }
        }
        self
    }

    /// Single-device corpus on the 16 kHz array, 150 + 150 utterances split
    /// 2:1 into train and test.
    pub fn default_desk(seed: u64) -> Self {
        SynthSpec {
            devices: vec![DeviceId::D4],
            per_mic_profiles: BTreeMap::new(),
            replay: ReplayChainParams::default_speaker(),
            n_genuine: 150,
            n_replay: 150,
            utterance_duration_s: 1.2,
            source_kind: SourceKind::HarmonicVoicelike,
            train_fraction: 2.0 / 3.0,
            environment: Environment::EnvB,
        }
        .with_random_profiles(seed, 0.3)
    }

    /// Two arrays with strongly separated coloration bands, for cross-device
    /// mismatch experiments.
    pub fn two_device_mismatch(seed: u64) -> Self {
        SynthSpec {
            devices: vec![DeviceId::D2, DeviceId::D4],
            per_mic_profiles: BTreeMap::new(),
            replay: ReplayChainParams::default_speaker(),
            n_genuine: 90,
            n_replay: 90,
            utterance_duration_s: 1.2,
            source_kind: SourceKind::HarmonicVoicelike,
            train_fraction: 2.0 / 3.0,
            environment: Environment::EnvB,
        }
        .with_random_profiles(seed, 1.0)
    }
}

impl ReplayChainParams {
    /// A small, bandwidth-limited loudspeaker with mild saturation and room
    /// decay.
    pub fn default_speaker() -> Self {
        ReplayChainParams {
            band_low_hz: 120.0,
            band_high_hz: 5500.0,
            softclip_drive: 2.5,
            reverb_t60_s: 0.25,
            replay_noise_db: -45.0,
        }
    }
}

// ---------------------------------------------------------------------------
// signal building blocks
// ---------------------------------------------------------------------------

fn fft_forward(signal: &[f64], n: usize) -> Vec<Complex64> {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex64> = signal
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n)
        .collect();
    fft.process(&mut buf);
    buf
}

fn fft_inverse_real(mut buf: Vec<Complex64>, out_len: usize) -> Vec<f64> {
    let n = buf.len();
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n);
    ifft.process(&mut buf);
    buf.iter().take(out_len).map(|z| z.re / n as f64).collect()
}

/// Applies a real zero-phase gain curve (indexed by Hz) in the FFT domain.
fn apply_gain_curve(signal: &[f64], sample_rate: u32, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = (signal.len() * 2).next_power_of_two();
    let mut spec = fft_forward(signal, n);
    for (i, z) in spec.iter_mut().enumerate() {
        let f = if i <= n / 2 {
            i as f64 * sample_rate as f64 / n as f64
        } else {
            (n - i) as f64 * sample_rate as f64 / n as f64
        };
        *z *= gain(f);
    }
    fft_inverse_real(spec, signal.len())
}

fn fft_convolve(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let full = signal.len() + kernel.len() - 1;
    let n = full.next_power_of_two();
    let a = fft_forward(signal, n);
    let b = fft_forward(kernel, n);
    let prod: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    fft_inverse_real(prod, signal.len())
}

/// RBJ peaking-EQ biquad applied in place.
fn peaking_biquad(signal: &mut [f64], sample_rate: u32, f0: f64, gain_db: f64, bandwidth_hz: f64) {
    let a = 10f64.powf(gain_db / 40.0);
    let w0 = 2.0 * PI * f0 / sample_rate as f64;
    let q = (f0 / bandwidth_hz).max(0.1);
    let alpha = w0.sin() / (2.0 * q);
    let b0 = 1.0 + alpha * a;
    let b1 = -2.0 * w0.cos();
    let b2 = 1.0 - alpha * a;
    let a0 = 1.0 + alpha / a;
    let a1 = b1;
    let a2 = 1.0 - alpha / a;
    let (b0, b1, b2, a1, a2) = (b0 / a0, b1 / a0, b2 / a0, a1 / a0, a2 / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for x in signal.iter_mut() {
        let x0 = *x;
        let y0 = b0 * x0 + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x0;
        y2 = y1;
        y1 = y0;
        *x = y0;
    }
}

fn add_noise(signal: &mut [f64], level_db: f64, seed: u64) {
    if !level_db.is_finite() {
        return;
    }
    let sigma = 10f64.powf(level_db / 20.0);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    for x in signal.iter_mut() {
        *x += normal.sample(&mut rng);
    }
}

/// Microphone response: cascade of resonator peaks, broadband tilt, then the
/// mic noise floor. Length-preserving.
pub fn mic_coloration(
    signal: &[f64],
    sample_rate: u32,
    profile: &MicColorationProfile,
) -> Result<Vec<f64>> {
    profile.validate(sample_rate)?;
    if !signal.iter().all(|x| x.is_finite()) {
        return Err(Error::Parameter("non-finite input signal".into()));
    }
    let mut out = signal.to_vec();
    for i in 0..profile.peak_frequencies_hz.len() {
        peaking_biquad(
            &mut out,
            sample_rate,
            profile.peak_frequencies_hz[i],
            profile.peak_gains_db[i],
            profile.peak_bandwidths_hz[i],
        );
    }
    let tilt = profile.broadband_tilt_db_per_octave;
    if tilt != 0.0 {
        out = apply_gain_curve(&out, sample_rate, |f| {
            let f = f.max(20.0);
            10f64.powf(tilt * (f / 1000.0).log2() / 20.0)
        });
    }
    add_noise(&mut out, profile.noise_floor_db, profile.seed);
    Ok(out)
}

/// Zero-phase FFT band-pass with raised-cosine transition edges.
pub fn band_pass(signal: &[f64], sample_rate: u32, low_hz: f64, high_hz: f64) -> Vec<f64> {
    let tw_lo = (low_hz * 0.2).clamp(10.0, 300.0);
    let tw_hi = (high_hz * 0.08).clamp(10.0, 500.0);
    apply_gain_curve(signal, sample_rate, |f| {
        if f < low_hz - tw_lo || f > high_hz + tw_hi {
            0.0
        } else if f < low_hz {
            0.5 * (1.0 + (PI * (f - low_hz) / tw_lo).cos())
        } else if f > high_hz {
            0.5 * (1.0 + (PI * (f - high_hz) / tw_hi).cos())
        } else {
            1.0
        }
    })
}

/// Loudspeaker re-recording path: band-pass, tanh saturation, exponential
/// reverberation tail, additive noise. Length-preserving.
pub fn replay_chain(
    signal: &[f64],
    sample_rate: u32,
    params: &ReplayChainParams,
    seed: u64,
) -> Result<Vec<f64>> {
    params.validate(sample_rate)?;
    if !signal.iter().all(|x| x.is_finite()) {
        return Err(Error::Parameter("non-finite input signal".into()));
    }
    let mut out = band_pass(signal, sample_rate, params.band_low_hz, params.band_high_hz);

    if params.softclip_drive > 0.0 {
        let d = params.softclip_drive;
        for x in out.iter_mut() {
            *x = (d * *x).tanh() / d;
        }
    }

    if params.reverb_t60_s > 0.0 {
        let taps = (params.reverb_t60_s * sample_rate as f64).round() as usize;
        if taps > 1 {
            let decay = -3.0 * std::f64::consts::LN_10 / taps as f64; // -60 dB over taps
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0x4e40, 0));
            let normal = Normal::new(0.0, 1.0).unwrap();
            let mut ir = Vec::with_capacity(taps);
            ir.push(1.0); // direct path
            for n in 1..taps {
                let g: f64 = normal.sample(&mut rng);
                ir.push(0.25 * g * (decay * n as f64).exp());
            }
            out = fft_convolve(&out, &ir);
        }
    }

    add_noise(&mut out, params.replay_noise_db, derive_seed(seed, 0x4e41, 0));
    Ok(out)
}

// ---------------------------------------------------------------------------
// source synthesis
// ---------------------------------------------------------------------------

/// Deterministic source utterance at `MASTER_RATE`.
pub fn synthesize_source(kind: SourceKind, duration_s: f64, seed: u64) -> Vec<f64> {
    let n = (duration_s * MASTER_RATE as f64).round() as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = vec![0.0; n];
    match kind {
        SourceKind::HarmonicVoicelike => {
            let f0: f64 = rng.sample(Uniform::new(80.0, 300.0));
            let n_harm = ((4000.0 / f0).floor() as usize).max(1);
            let phases: Vec<f64> = (0..n_harm)
                .map(|_| rng.sample(Uniform::new(0.0, 2.0 * PI)))
                .collect();
            let vib_rate: f64 = rng.sample(Uniform::new(3.0, 7.0));
            let vib_depth: f64 = rng.sample(Uniform::new(0.0, 0.01));
            let mut phase = 0.0;
            for (i, y) in out.iter_mut().enumerate() {
                let t = i as f64 / MASTER_RATE as f64;
                let f_inst = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
                phase += 2.0 * PI * f_inst / MASTER_RATE as f64;
                let mut s = 0.0;
                for (k, ph) in phases.iter().enumerate() {
                    s += ((k + 1) as f64 * phase + ph).sin() / (k + 1) as f64;
                }
                // slow amplitude envelope, voicing-like
                let env = 0.6 + 0.4 * (2.0 * PI * 2.3 * t + 0.7).sin();
                *y = s * env;
            }
            // two formant-like resonances shape the spectrum
            for _ in 0..2 {
                let f: f64 = rng.sample(Uniform::new(300.0, 2800.0));
                peaking_biquad(&mut out, MASTER_RATE, f, 8.0, f / 3.0);
            }
        }
        SourceKind::FilteredNoise => {
            let normal = Normal::new(0.0, 1.0).unwrap();
            for y in out.iter_mut() {
                *y = normal.sample(&mut rng);
            }
            out = apply_gain_curve(&out, MASTER_RATE, |f| {
                if (100.0..4000.0).contains(&f) {
                    1.0
                } else {
                    0.0
                }
            });
            let f: f64 = rng.sample(Uniform::new(400.0, 2500.0));
            peaking_biquad(&mut out, MASTER_RATE, f, 8.0, f / 3.0);
        }
    }
    // normalize source to a fixed RMS so chains see consistent levels
    let rms = (out.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        let g = 0.15 / rms;
        for y in out.iter_mut() {
            *y *= g;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// corpus generation
// ---------------------------------------------------------------------------

fn render_device_file(
    source_master: &[f64],
    device: DeviceId,
    spec: &SynthSpec,
    utt_seed: u64,
) -> Result<Array2<f64>> {
    let dev = device_spec(device);
    let at_rate = if dev.sample_rate == MASTER_RATE {
        source_master.to_vec()
    } else {
        crate::dsp::resample(source_master, MASTER_RATE, dev.sample_rate)?
    };
    let mut rows = Vec::with_capacity(dev.channel_count());
    for mic in &dev.mic_ids {
        let profile = spec
            .per_mic_profiles
            .get(&mic.get())
            .expect("validated profile");
        let noisy = profile.with_seed(derive_seed(utt_seed, 0x401, mic.get() as u64));
        rows.push(mic_coloration(&at_rate, dev.sample_rate, &noisy)?);
    }
    let frames = rows[0].len();
    let mut samples = Array2::zeros((rows.len(), frames));
    for (ch, row) in rows.into_iter().enumerate() {
        for (t, v) in row.into_iter().enumerate() {
            samples[[ch, t]] = v;
        }
    }
    // keep peak within full scale
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.99 {
        samples.mapv_inplace(|v| v * (0.99 / peak));
    }
    Ok(samples)
}

/// Writes the corpus (one wav per device per utterance plus `manifest.csv`)
/// and returns the manifest. Deterministic for a fixed (spec, seed).
pub fn generate_corpus(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut entries = Vec::new();
    let classes = [
        (ClassLabel::Genuine, spec.n_genuine),
        (ClassLabel::Replay, spec.n_replay),
    ];
    for (label, count) in classes {
        let n_train = (count as f64 * spec.train_fraction).round() as usize;
        for i in 0..count {
            // paired construction: source depends only on the utterance index
            let source_seed = derive_seed(seed, 0x50c, i as u64);
            let utt_seed = derive_seed(seed, 0x10 + label.as_index() as u64, i as u64);
            let mut source = synthesize_source(spec.source_kind, spec.utterance_duration_s, source_seed);
            if label == ClassLabel::Replay {
                source = replay_chain(&source, MASTER_RATE, &spec.replay, utt_seed)?;
            }
            let split = if i < n_train { Split::Train } else { Split::Test };
            for device in &spec.devices {
                let samples = render_device_file(&source, *device, spec, utt_seed)?;
                let dev = device_spec(*device);
                let name = format!(
                    "{}{:04}_{}.wav",
                    match label {
                        ClassLabel::Genuine => "g",
                        ClassLabel::Replay => "r",
                    },
                    i,
                    dev.device_id
                );
                let path = out_dir.join(&name);
                write_wav(&path, &samples, dev.sample_rate, dev.bit_depth)?;
                entries.push(RecordingEntry {
                    path,
                    device: *device,
                    label,
                    environment: spec.environment,
                    speaker_id: format!("spk{:02}", i % 8),
                    split,
                    duration_s: spec.utterance_duration_s,
                });
            }
        }
    }
    let manifest = DatasetManifest::new("synthetic", entries);
    save_manifest(&manifest, &out_dir.join("manifest.csv"), out_dir)?;
    Ok(manifest)
}
