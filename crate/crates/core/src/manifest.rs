//! Dataset manifests: entry schema, CSV loading, channel-ordered reads and
//! budgeted subsets for fine-tuning.
//!
//! The on-disk format is UTF-8 CSV with one header row and columns
//! `path,device,label,environment,speaker,split,duration_s`. Two optional
//! columns are validated when present: `sample_rate_hz` (must match the
//! device) and `channels` (space-separated mic ids that must sit on the
//! device).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, MultichannelRecording};
use crate::device::{device_spec, DeviceId, DeviceSpec, MicrophoneId};
use crate::error::{Error, Result};

/// Binary class label; replay is the positive (attack) class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    Genuine,
    Replay,
}

impl ClassLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Genuine => "genuine",
            ClassLabel::Replay => "replay",
        }
    }

    /// Numeric encoding: 0 = genuine, 1 = replay.
    pub fn as_index(self) -> usize {
        match self {
            ClassLabel::Genuine => 0,
            ClassLabel::Replay => 1,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "genuine" => Some(ClassLabel::Genuine),
            "replay" => Some(ClassLabel::Replay),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Environment {
    EnvA,
    EnvB,
    EnvC,
    EnvD,
}

impl Environment {
    pub fn as_str(self) -> &'static str {
        match self {
            Environment::EnvA => "EnvA",
            Environment::EnvB => "EnvB",
            Environment::EnvC => "EnvC",
            Environment::EnvD => "EnvD",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "EnvA" => Some(Environment::EnvA),
            "EnvB" => Some(Environment::EnvB),
            "EnvC" => Some(Environment::EnvC),
            "EnvD" => Some(Environment::EnvD),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One recording in a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub path: PathBuf,
    pub device: DeviceId,
    pub label: ClassLabel,
    pub environment: Environment,
    pub speaker_id: String,
    pub split: Split,
    pub duration_s: f64,
}

impl RecordingEntry {
    pub fn device_spec(&self) -> DeviceSpec {
        device_spec(self.device)
    }
}

/// An ordered collection of recording entries plus corpus metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub corpus_name: String,
    pub entries: Vec<RecordingEntry>,
}

impl DatasetManifest {
    pub fn new(corpus_name: impl Into<String>, entries: Vec<RecordingEntry>) -> Self {
        DatasetManifest {
            corpus_name: corpus_name.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Channel count per device present in the manifest.
    pub fn channel_count_by_device(&self) -> BTreeMap<String, usize> {
        let mut map = BTreeMap::new();
        for e in &self.entries {
            map.entry(e.device.as_str().to_string())
                .or_insert_with(|| e.device_spec().channel_count());
        }
        map
    }

    pub fn filter(&self, pred: impl Fn(&RecordingEntry) -> bool) -> DatasetManifest {
        DatasetManifest {
            corpus_name: self.corpus_name.clone(),
            entries: self.entries.iter().filter(|e| pred(e)).cloned().collect(),
        }
    }

    pub fn split(&self, split: Split) -> DatasetManifest {
        self.filter(|e| e.split == split)
    }

    pub fn with_environment(&self, env: Environment) -> DatasetManifest {
        self.filter(|e| e.environment == env)
    }

    pub fn with_device(&self, device: DeviceId) -> DatasetManifest {
        self.filter(|e| e.device == device)
    }

    pub fn count_label(&self, label: ClassLabel) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }
}

const CORE_COLUMNS: [&str; 7] = [
    "path",
    "device",
    "label",
    "environment",
    "speaker",
    "split",
    "duration_s",
];

fn parse_err(row: usize, message: impl Into<String>) -> Error {
    Error::ManifestParse {
        row,
        message: message.into(),
    }
}

/// Loads and validates a manifest CSV. Relative entry paths are resolved
/// against the manifest's parent directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(0, e.to_string()))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    for col in CORE_COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(parse_err(0, format!("missing column '{col}'")));
        }
    }
    let idx = |name: &str| headers.iter().position(|h| h == name);
    let base = path.parent().unwrap_or(Path::new("."));

    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        let field = |name: &str| -> Result<&str> {
            idx(name)
                .and_then(|j| record.get(j))
                .ok_or_else(|| parse_err(row, format!("missing field '{name}'")))
        };

        let device = DeviceId::parse(field("device")?)
            .map_err(|e| parse_err(row, e.to_string()))?;
        let spec = device_spec(device);
        let label_raw = field("label")?;
        let label = ClassLabel::parse(label_raw)
            .ok_or_else(|| parse_err(row, format!("bad label '{label_raw}'")))?;
        let env_raw = field("environment")?;
        let environment = Environment::parse(env_raw)
            .ok_or_else(|| parse_err(row, format!("bad environment '{env_raw}'")))?;
        let split_raw = field("split")?;
        let split = Split::parse(split_raw)
            .ok_or_else(|| parse_err(row, format!("bad split '{split_raw}'")))?;
        let duration_raw = field("duration_s")?;
        let duration_s: f64 = duration_raw
            .parse()
            .map_err(|_| parse_err(row, format!("bad duration '{duration_raw}'")))?;
        if !duration_s.is_finite() || duration_s <= 0.0 {
            return Err(parse_err(row, format!("non-positive duration {duration_s}")));
        }

        // optional validation columns
        if let Some(j) = idx("sample_rate_hz") {
            if let Some(v) = record.get(j).filter(|v| !v.is_empty()) {
                let rate: u32 = v
                    .parse()
                    .map_err(|_| parse_err(row, format!("bad sample_rate_hz '{v}'")))?;
                if rate != spec.sample_rate {
                    return Err(Error::Consistency(format!(
                        "row {row}: device {device} runs at {} Hz but manifest claims {rate} Hz",
                        spec.sample_rate
                    )));
                }
            }
        }
        if let Some(j) = idx("channels") {
            if let Some(v) = record.get(j).filter(|v| !v.is_empty()) {
                for tok in v.split_whitespace() {
                    let raw: i64 = tok
                        .parse()
                        .map_err(|_| parse_err(row, format!("bad channel id '{tok}'")))?;
                    let mic = MicrophoneId::new(raw)?;
                    if !spec.has_mic(mic) {
                        return Err(Error::ChannelMismatch {
                            mic: mic.get(),
                            device: device.as_str().to_string(),
                        });
                    }
                }
            }
        }

        let file = PathBuf::from(field("path")?);
        let file = if file.is_absolute() {
            file
        } else {
            base.join(file)
        };
        entries.push(RecordingEntry {
            path: file,
            device,
            label,
            environment,
            speaker_id: field("speaker")?.to_string(),
            split,
            duration_s,
        });
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    Ok(DatasetManifest::new(name, entries))
}

/// Writes a manifest with the core column set; paths are written relative to
/// `base` when possible.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path, base: &Path) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    writer
        .write_record(CORE_COLUMNS)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    for e in &manifest.entries {
        let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
        writer
            .write_record([
                rel.to_string_lossy().as_ref(),
                e.device.as_str(),
                e.label.as_str(),
                e.environment.as_str(),
                e.speaker_id.as_str(),
                e.split.as_str(),
                &format!("{:.3}", e.duration_s),
            ])
            .map_err(|err| Error::io(path, std::io::Error::other(err.to_string())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads the requested channels of one entry, rows ordered as requested.
pub fn read_recording(
    entry: &RecordingEntry,
    channels: &[MicrophoneId],
) -> Result<MultichannelRecording> {
    let spec = entry.device_spec();
    let mut rows = Vec::with_capacity(channels.len());
    for &mic in channels {
        rows.push(spec.channel_index(mic)?);
    }
    let wav = read_wav(&entry.path)?;
    if wav.sample_rate != spec.sample_rate {
        return Err(Error::Consistency(format!(
            "{}: device {} runs at {} Hz but file is {} Hz",
            entry.path.display(),
            spec.device_id,
            spec.sample_rate,
            wav.sample_rate
        )));
    }
    if wav.samples.nrows() != spec.channel_count() {
        return Err(Error::Consistency(format!(
            "{}: device {} has {} channels but file has {}",
            entry.path.display(),
            spec.device_id,
            spec.channel_count(),
            wav.samples.nrows()
        )));
    }
    let samples = ndarray::Array2::from_shape_fn(
        (channels.len(), wav.samples.ncols()),
        |(r, c)| wav.samples[[rows[r], c]],
    );
    let rec = MultichannelRecording {
        samples,
        sample_rate: wav.sample_rate,
        channel_ids: channels.to_vec(),
        label: entry.label,
    };
    rec.validate()?;
    Ok(rec)
}

/// Seconds of analyzed audio per entry: experiments crop to the first second,
/// so each usable entry contributes exactly one second.
pub const ANALYZED_SECONDS_PER_ENTRY: f64 = 1.0;

/// Deterministic, label-stratified subset of the train split whose analyzed
/// duration best matches `minutes`. Test entries pass through unchanged.
///
/// For a fixed seed the selection order is a fixed priority sequence, so
/// subsets are monotone: a smaller budget's subset is contained in a larger
/// budget's subset.
pub fn budget_subset(
    manifest: &DatasetManifest,
    minutes: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(minutes > 0.0) {
        return Err(Error::Parameter(format!(
            "budget must be positive, got {minutes} minutes"
        )));
    }
    let train_idx: Vec<usize> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let wanted = (minutes * 60.0 / ANALYZED_SECONDS_PER_ENTRY).round() as usize;
    let wanted = wanted.max(1);
    if wanted > train_idx.len() {
        return Err(Error::InsufficientData(format!(
            "budget of {minutes} min needs {wanted} entries but only {} train entries exist",
            train_idx.len()
        )));
    }

    // Per-class pools shuffled from per-class seeds, then interleaved into a
    // fixed priority order. Prefix-taking keeps subsets monotone in budget and
    // balanced within one entry while both pools last.
    let mut pools: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &i in &train_idx {
        pools[manifest.entries[i].label.as_index()].push(i);
    }
    for (class, pool) in pools.iter_mut().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(class as u64 + 1)));
        pool.shuffle(&mut rng);
    }
    let mut priority = Vec::with_capacity(train_idx.len());
    let longest = pools[0].len().max(pools[1].len());
    for k in 0..longest {
        for pool in &pools {
            if let Some(&i) = pool.get(k) {
                priority.push(i);
            }
        }
    }

    let mut keep: Vec<usize> = priority.into_iter().take(wanted).collect();
    keep.sort_unstable();
    let mut entries: Vec<RecordingEntry> = keep
        .into_iter()
        .map(|i| manifest.entries[i].clone())
        .collect();
    entries.extend(
        manifest
            .entries
            .iter()
            .filter(|e| e.split == Split::Test)
            .cloned(),
    );
    Ok(DatasetManifest::new(manifest.corpus_name.clone(), entries))
}
