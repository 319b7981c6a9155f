//! Microphone and device model for multi-array replay corpora.
//!
//! Four synchronized arrays are supported. D1 is representable but carries no
//! genuine recordings, so experiment presets exclude it. Microphones carry
//! global ids 2..=18, partitioned as D2={2..5}, D3={6..11}, D4={12..18}.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Global microphone id, valid range 2..=18.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct MicrophoneId(u8);

impl MicrophoneId {
    pub const MIN: u8 = 2;
    pub const MAX: u8 = 18;

    pub fn new(id: impl Into<i64>) -> Result<Self> {
        let id = id.into();
        if (Self::MIN as i64..=Self::MAX as i64).contains(&id) {
            Ok(MicrophoneId(id as u8))
        } else {
            Err(Error::InvalidMicrophone(id))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// All 17 valid ids in ascending order.
    pub fn all() -> impl Iterator<Item = MicrophoneId> {
        (Self::MIN..=Self::MAX).map(MicrophoneId)
    }
}

impl TryFrom<u8> for MicrophoneId {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        MicrophoneId::new(v as i64)
    }
}

impl From<MicrophoneId> for u8 {
    fn from(m: MicrophoneId) -> u8 {
        m.0
    }
}

impl std::fmt::Display for MicrophoneId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Recording device (microphone array) identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeviceId {
    D1,
    D2,
    D3,
    D4,
}

impl DeviceId {
    pub fn as_str(self) -> &'static str {
        match self {
            DeviceId::D1 => "D1",
            DeviceId::D2 => "D2",
            DeviceId::D3 => "D3",
            DeviceId::D4 => "D4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "D1" => Ok(DeviceId::D1),
            "D2" => Ok(DeviceId::D2),
            "D3" => Ok(DeviceId::D3),
            "D4" => Ok(DeviceId::D4),
            other => Err(Error::Consistency(format!("unknown device '{other}'"))),
        }
    }

    /// Devices with usable genuine recordings (D1 excluded).
    pub fn experiment_devices() -> [DeviceId; 3] {
        [DeviceId::D2, DeviceId::D3, DeviceId::D4]
    }
}

impl std::fmt::Display for DeviceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Static description of one array: its microphones, rate and bit depth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub device_id: DeviceId,
    pub mic_ids: Vec<MicrophoneId>,
    pub sample_rate: u32,
    pub bit_depth: u16,
}

impl DeviceSpec {
    pub fn channel_count(&self) -> usize {
        self.mic_ids.len()
    }

    pub fn has_mic(&self, mic: MicrophoneId) -> bool {
        self.mic_ids.contains(&mic)
    }

    /// Index of a microphone within this device's channel ordering.
    pub fn channel_index(&self, mic: MicrophoneId) -> Result<usize> {
        self.mic_ids
            .iter()
            .position(|&m| m == mic)
            .ok_or(Error::ChannelMismatch {
                mic: mic.get(),
                device: self.device_id.as_str().to_string(),
            })
    }
}

fn mics(range: std::ops::RangeInclusive<u8>) -> Vec<MicrophoneId> {
    range.map(MicrophoneId).collect()
}

/// The fixed device map: D2={2..5} @44.1k/16b, D3={6..11} @44.1k/32b,
/// D4={12..18} @16k/16b. D1 has no global mic ids here and is excluded
/// from experiments.
pub fn device_spec(id: DeviceId) -> DeviceSpec {
    match id {
        DeviceId::D1 => DeviceSpec {
            device_id: DeviceId::D1,
            mic_ids: vec![],
            sample_rate: 44100,
            bit_depth: 16,
        },
        DeviceId::D2 => DeviceSpec {
            device_id: DeviceId::D2,
            mic_ids: mics(2..=5),
            sample_rate: 44100,
            bit_depth: 16,
        },
        DeviceId::D3 => DeviceSpec {
            device_id: DeviceId::D3,
            mic_ids: mics(6..=11),
            sample_rate: 44100,
            bit_depth: 32,
        },
        DeviceId::D4 => DeviceSpec {
            device_id: DeviceId::D4,
            mic_ids: mics(12..=18),
            sample_rate: 16000,
            bit_depth: 16,
        },
    }
}

/// Owning device of a microphone id.
pub fn device_of(id: MicrophoneId) -> DeviceSpec {
    let dev = match id.get() {
        2..=5 => DeviceId::D2,
        6..=11 => DeviceId::D3,
        _ => DeviceId::D4,
    };
    device_spec(dev)
}

/// `device_of` on a raw integer, rejecting out-of-range ids.
pub fn device_of_raw(id: i64) -> Result<DeviceSpec> {
    Ok(device_of(MicrophoneId::new(id)?))
}

/// The device shared by every microphone in `mics`, or a geometry error when
/// they span devices.
pub fn common_device(mics: &[MicrophoneId]) -> Result<DeviceSpec> {
    let first = mics
        .first()
        .ok_or_else(|| Error::Geometry("empty channel list".into()))?;
    let dev = device_of(*first);
    for &m in &mics[1..] {
        if !dev.has_mic(m) {
            return Err(Error::Geometry(format!(
                "microphones {mics:?} span multiple devices"
            )));
        }
    }
    Ok(dev)
}
