//! The PLFB feature-file format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "PLFB" | version u8 = 1 | frames u32 | bands u32 | frame_rate f64
//! | frames*bands f32 values, frame-major | bands f64 band centers
//! ```

use std::fs;
use std::path::Path;

use crate::mat::Mat;

use super::{DspError, MelSpectrogram};

const MAGIC: &[u8; 4] = b"PLFB";
const VERSION: u8 = 1;

pub fn write_plfb(path: &Path, spec: &MelSpectrogram) -> Result<(), DspError> {
    let frames = spec.values.rows();
    let bands = spec.values.cols();
    let mut bytes = Vec::with_capacity(21 + frames * bands * 4 + bands * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);
    bytes.extend_from_slice(&(frames as u32).to_le_bytes());
    bytes.extend_from_slice(&(bands as u32).to_le_bytes());
    bytes.extend_from_slice(&spec.frame_rate_hz.to_le_bytes());
    for &v in spec.values.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &c in &spec.band_centers_hz {
        bytes.extend_from_slice(&c.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_plfb(path: &Path) -> Result<MelSpectrogram, DspError> {
    let bytes = fs::read(path)?;
    let corrupt = |msg: &str| DspError::CorruptFeatureFile(format!("{}: {msg}", path.display()));

    if bytes.len() < 21 {
        return Err(corrupt("shorter than the fixed header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(corrupt(&format!("unsupported version {}", bytes[4])));
    }
    let frames = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let bands = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let frame_rate_hz = f64::from_le_bytes(bytes[13..21].try_into().unwrap());

    let expected = 21 + frames * bands * 4 + bands * 8;
    if bytes.len() != expected {
        return Err(corrupt(&format!(
            "expected {expected} bytes for {frames}x{bands}, found {}",
            bytes.len()
        )));
    }

    let mut data = Vec::with_capacity(frames * bands);
    let mut at = 21;
    for _ in 0..frames * bands {
        data.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64);
        at += 4;
    }
    let mut band_centers_hz = Vec::with_capacity(bands);
    for _ in 0..bands {
        band_centers_hz.push(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
        at += 8;
    }

    Ok(MelSpectrogram {
        values: Mat::from_vec(frames, bands, data),
        frame_rate_hz,
        band_centers_hz,
    })
}
