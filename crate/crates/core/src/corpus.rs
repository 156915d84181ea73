//! Audio and label ingestion: WAV loading, label tables, fixed-window
//! segmentation and frame-rate target alignment.
//!
//! The audio contract is deliberately narrow: RIFF/WAVE, PCM integer
//! 16-bit, one channel. Anything else is rejected with the offending
//! header field named, and sample-rate conversion is out of scope.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("file not found: {0}")]
    NotFound(PathBuf),
    #[error("unsupported WAV format: {field}={value} (need PCM16 mono)")]
    UnsupportedFormat { field: String, value: String },
    #[error("corrupt WAV header: {0}")]
    CorruptHeader(String),
    #[error("label schema mismatch: column '{column}' not found")]
    SchemaMismatch { column: String },
    #[error("unknown class name '{value}' in column '{column}' (line {line})")]
    UnknownClassName {
        column: String,
        value: String,
        line: usize,
    },
    #[error("duplicate source id '{0}'")]
    DuplicateId(String),
    #[error("clip has no samples")]
    EmptyClip,
    #[error("target series is empty")]
    EmptySeries,
    #[error("bad window: window_s={window_s}, hop_s={hop_s} (need 0 < hop <= window)")]
    BadWindow { window_s: f64, hop_s: f64 },
    #[error("bad number '{value}' at {path}:{line}")]
    BadNumber {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Mono PCM audio: normalized samples plus sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    /// Amplitudes in `[-1, 1]` (raw int16 / 32768).
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    pub source_id: String,
}

impl AudioClip {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

fn read_u16(bytes: &[u8], at: usize) -> Option<u16> {
    Some(u16::from_le_bytes(bytes.get(at..at + 2)?.try_into().ok()?))
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    Some(u32::from_le_bytes(bytes.get(at..at + 4)?.try_into().ok()?))
}

/// Loads a mono PCM16 RIFF/WAVE file. Samples come back as
/// `int16 / 32768` in file order; the rate is read from the header.
pub fn load_wav(path: &Path) -> Result<AudioClip, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::NotFound(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let corrupt = |msg: &str| CorpusError::CorruptHeader(msg.to_string());

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(corrupt("missing RIFF/WAVE magic"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size =
            read_u32(&bytes, pos + 4).ok_or_else(|| corrupt("truncated chunk header"))? as usize;
        let body_start = pos + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            return Err(corrupt("chunk extends past end of file"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(corrupt("fmt chunk shorter than 16 bytes"));
                }
                fmt = Some((
                    read_u16(&bytes, body_start).unwrap(),
                    read_u16(&bytes, body_start + 2).unwrap(),
                    read_u32(&bytes, body_start + 4).unwrap(),
                    read_u16(&bytes, body_start + 14).unwrap(),
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {} // skip LIST, fact, etc.
        }
        // Chunk bodies are word-aligned.
        pos = body_end + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| corrupt("missing fmt chunk"))?;
    if format != 1 {
        return Err(CorpusError::UnsupportedFormat {
            field: "audio_format".into(),
            value: format.to_string(),
        });
    }
    if channels != 1 {
        return Err(CorpusError::UnsupportedFormat {
            field: "channels".into(),
            value: channels.to_string(),
        });
    }
    if bits != 16 {
        return Err(CorpusError::UnsupportedFormat {
            field: "bits_per_sample".into(),
            value: bits.to_string(),
        });
    }
    if rate == 0 {
        return Err(corrupt("sample rate is zero"));
    }
    let data = data.ok_or_else(|| corrupt("missing data chunk"))?;
    if data.is_empty() {
        return Err(corrupt("empty data chunk"));
    }
    if data.len() % 2 != 0 {
        return Err(corrupt(
            "data chunk is not a whole number of 16-bit samples",
        ));
    }

    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AudioClip {
        samples,
        sample_rate_hz: rate,
        source_id,
    })
}

/// Writes a clip as mono PCM16. Samples are clamped to `[-1, 1]` and
/// quantized by rounding, so a load round-trip is exact to 1/32768.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<(), CorpusError> {
    if clip.samples.is_empty() {
        return Err(CorpusError::EmptyClip);
    }
    let n = clip.samples.len();
    let data_size = (n * 2) as u32;
    let mut bytes = Vec::with_capacity(44 + n * 2);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_size).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&clip.sample_rate_hz.to_le_bytes());
    bytes.extend_from_slice(&(clip.sample_rate_hz * 2).to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes());
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_size.to_le_bytes());
    for &s in &clip.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0)
            .round()
            .clamp(-32768.0, 32767.0) as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// How to read a label CSV: which column holds ids and what the rest mean.
#[derive(Clone, Debug)]
pub enum LabelSchema {
    /// One column per task, each with an ordered class-name -> index map.
    Classification {
        id_column: String,
        tasks: Vec<(String, BTreeMap<String, usize>)>,
    },
    /// A column naming a target-series file (one real per line, relative
    /// to the CSV) plus a column with the series sample rate in Hz.
    Regression {
        id_column: String,
        series_column: String,
        rate_column: String,
    },
}

/// Labels for one source id.
#[derive(Clone, Debug, PartialEq)]
pub enum RowLabels {
    Classes(BTreeMap<String, usize>),
    Series { values: Vec<f64>, rate_hz: f64 },
}

#[derive(Clone, Debug)]
pub struct LabelRow {
    pub source_id: String,
    pub labels: RowLabels,
}

/// Parsed label table, rows in file order, ids unique.
#[derive(Clone, Debug, Default)]
pub struct LabelTable {
    pub rows: Vec<LabelRow>,
}

impl LabelTable {
    pub fn get(&self, source_id: &str) -> Option<&RowLabels> {
        self.rows
            .iter()
            .find(|r| r.source_id == source_id)
            .map(|r| &r.labels)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Loads a header-rowed CSV of labels per the schema. Comma-separated,
/// UTF-8, no quoting (ids must not contain commas).
pub fn load_labels(path: &Path, schema: &LabelSchema) -> Result<LabelTable, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::NotFound(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CorpusError::CorruptHeader("label CSV is empty".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let col_index = |name: &str| -> Result<usize, CorpusError> {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| CorpusError::SchemaMismatch {
                column: name.to_string(),
            })
    };

    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut rows = Vec::new();
    let mut seen = BTreeMap::new();

    match schema {
        LabelSchema::Classification { id_column, tasks } => {
            let id_idx = col_index(id_column)?;
            let task_cols: Vec<(usize, &String, &BTreeMap<String, usize>)> = tasks
                .iter()
                .map(|(name, map)| Ok((col_index(name)?, name, map)))
                .collect::<Result<_, CorpusError>>()?;
            for (line_no, line) in lines {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').map(str::trim).collect();
                let id = fields
                    .get(id_idx)
                    .copied()
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| CorpusError::SchemaMismatch {
                        column: id_column.clone(),
                    })?;
                if seen.insert(id.to_string(), ()).is_some() {
                    return Err(CorpusError::DuplicateId(id.to_string()));
                }
                let mut labels = BTreeMap::new();
                for &(idx, name, map) in &task_cols {
                    let value = fields.get(idx).copied().unwrap_or("");
                    let class = map
                        .get(value)
                        .ok_or_else(|| CorpusError::UnknownClassName {
                            column: name.clone(),
                            value: value.to_string(),
                            line: line_no + 1,
                        })?;
                    labels.insert(name.clone(), *class);
                }
                rows.push(LabelRow {
                    source_id: id.to_string(),
                    labels: RowLabels::Classes(labels),
                });
            }
        }
        LabelSchema::Regression {
            id_column,
            series_column,
            rate_column,
        } => {
            let id_idx = col_index(id_column)?;
            let series_idx = col_index(series_column)?;
            let rate_idx = col_index(rate_column)?;
            for (line_no, line) in lines {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').map(str::trim).collect();
                let id = fields
                    .get(id_idx)
                    .copied()
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| CorpusError::SchemaMismatch {
                        column: id_column.clone(),
                    })?;
                if seen.insert(id.to_string(), ()).is_some() {
                    return Err(CorpusError::DuplicateId(id.to_string()));
                }
                let rate_text = fields.get(rate_idx).copied().unwrap_or("");
                let rate_hz: f64 = rate_text.parse().map_err(|_| CorpusError::BadNumber {
                    path: path.to_path_buf(),
                    line: line_no + 1,
                    value: rate_text.to_string(),
                })?;
                let series_rel = fields.get(series_idx).copied().unwrap_or("");
                let series_path = base_dir.join(series_rel);
                let values = load_series(&series_path)?;
                rows.push(LabelRow {
                    source_id: id.to_string(),
                    labels: RowLabels::Series { values, rate_hz },
                });
            }
        }
    }

    Ok(LabelTable { rows })
}

/// Reads a target series: one real per line, blank lines ignored.
pub fn load_series(path: &Path) -> Result<Vec<f64>, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::NotFound(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut values = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        values.push(t.parse::<f64>().map_err(|_| CorpusError::BadNumber {
            path: path.to_path_buf(),
            line: line_no + 1,
            value: t.to_string(),
        })?);
    }
    if values.is_empty() {
        return Err(CorpusError::EmptySeries);
    }
    Ok(values)
}

/// A fixed-length training window cut from a parent clip.
/// Task labels attach downstream when examples are assembled.
#[derive(Clone, Debug)]
pub struct Segment {
    pub clip: AudioClip,
    pub parent_id: String,
    pub offset_s: f64,
}

/// Cuts `clip` into windows of `window_s` every `hop_s` seconds.
///
/// Window `k` covers `[k*hop_s, k*hop_s + window_s)`. At most one final
/// partial window exists; with `pad_last` it is zero-padded to full
/// length, otherwise it is kept when at least half a window long and
/// dropped when shorter. Segment ids are `{parent}__seg{k:03}`.
pub fn segment(
    clip: &AudioClip,
    window_s: f64,
    hop_s: f64,
    pad_last: bool,
) -> Result<Vec<Segment>, CorpusError> {
    if clip.samples.is_empty() {
        return Err(CorpusError::EmptyClip);
    }
    let rate = clip.sample_rate_hz as f64;
    let window = (window_s * rate).round() as usize;
    let hop = (hop_s * rate).round() as usize;
    if hop == 0 || window == 0 || hop > window {
        return Err(CorpusError::BadWindow { window_s, hop_s });
    }

    let len = clip.samples.len();
    let mut segments = Vec::new();
    let mut k = 0usize;
    loop {
        let start = k * hop;
        if start >= len {
            break;
        }
        let end = start + window;
        let samples = if end <= len {
            clip.samples[start..end].to_vec()
        } else {
            // The single final partial window.
            let tail = &clip.samples[start..];
            if pad_last {
                let mut padded = tail.to_vec();
                padded.resize(window, 0.0);
                padded
            } else if 2 * tail.len() >= window {
                tail.to_vec()
            } else {
                break;
            }
        };
        segments.push(Segment {
            clip: AudioClip {
                samples,
                sample_rate_hz: clip.sample_rate_hz,
                source_id: format!("{}__seg{:03}", clip.source_id, k),
            },
            parent_id: clip.source_id.clone(),
            offset_s: start as f64 / rate,
        });
        if end >= len {
            break;
        }
        k += 1;
    }
    Ok(segments)
}

/// Resamples a target series onto model frames by linear interpolation.
///
/// Output length is `floor(clip_duration * model_frame_rate)`; frame `t`
/// takes the series value at time `t / model_frame_rate`, clamping past
/// the end of the series.
pub fn align_targets(
    clip: &AudioClip,
    series: &[f64],
    target_rate_hz: f64,
    model_frame_rate_hz: f64,
) -> Result<Vec<f64>, CorpusError> {
    align_series(
        series,
        target_rate_hz,
        clip.duration_s(),
        model_frame_rate_hz,
    )
}

/// [`align_targets`] without a clip: duration given directly.
pub fn align_series(
    series: &[f64],
    target_rate_hz: f64,
    duration_s: f64,
    model_frame_rate_hz: f64,
) -> Result<Vec<f64>, CorpusError> {
    if series.is_empty() {
        return Err(CorpusError::EmptySeries);
    }
    assert!(target_rate_hz > 0.0 && model_frame_rate_hz > 0.0);
    let out_len = (duration_s * model_frame_rate_hz).floor() as usize;
    let mut out = Vec::with_capacity(out_len);
    for t in 0..out_len {
        let time_s = t as f64 / model_frame_rate_hz;
        let pos = time_s * target_rate_hz;
        let i0 = pos.floor() as usize;
        let value = if i0 + 1 < series.len() {
            let frac = pos - i0 as f64;
            series[i0] * (1.0 - frac) + series[i0 + 1] * frac
        } else {
            *series.last().unwrap()
        };
        out.push(value);
    }
    Ok(out)
}
