//! Training examples: a feature matrix joined with its labels.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::corpus::{align_series, CorpusError, LabelTable, RowLabels};
use crate::dsp::MelSpectrogram;
use crate::mat::Mat;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no label row for source id '{0}'")]
    MissingLabel(String),
    #[error("source '{id}' has {kind} labels, expected {expected}")]
    WrongLabelKind {
        id: String,
        kind: &'static str,
        expected: &'static str,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Per-task labels of one example.
#[derive(Clone, Debug, PartialEq)]
pub enum ExampleLabels {
    /// Task name to class index.
    Classes(BTreeMap<String, usize>),
    /// Frame-rate regression targets, already aligned to model frames.
    Frames(Vec<f64>),
    /// A single regression target.
    Scalar(f64),
}

/// One unit of training data: features (frames x bands) plus labels.
#[derive(Clone, Debug)]
pub struct LabeledExample {
    pub source_id: String,
    pub features: Mat,
    pub labels: ExampleLabels,
}

impl LabeledExample {
    pub fn class_label(&self, task: &str) -> Option<usize> {
        match &self.labels {
            ExampleLabels::Classes(map) => map.get(task).copied(),
            _ => None,
        }
    }
}

/// Strips a `__segNNN` suffix so segment-level ids map back to their
/// parent recording.
pub fn parent_id(id: &str) -> &str {
    match id.rfind("__seg") {
        Some(at) if id[at + 5..].chars().all(|c| c.is_ascii_digit()) && at + 5 < id.len() => {
            &id[..at]
        }
        _ => id,
    }
}

/// Joins feature matrices with classification labels, resolving segment
/// ids through their parent recording.
pub fn attach_class_labels(
    features: Vec<(String, MelSpectrogram)>,
    table: &LabelTable,
) -> Result<Vec<LabeledExample>, DatasetError> {
    features
        .into_iter()
        .map(|(id, spec)| {
            let key = parent_id(&id);
            let labels = table
                .get(key)
                .ok_or_else(|| DatasetError::MissingLabel(key.to_string()))?;
            match labels {
                RowLabels::Classes(map) => Ok(LabeledExample {
                    source_id: id,
                    features: spec.values,
                    labels: ExampleLabels::Classes(map.clone()),
                }),
                RowLabels::Series { .. } => Err(DatasetError::WrongLabelKind {
                    id,
                    kind: "series",
                    expected: "classes",
                }),
            }
        })
        .collect()
}

/// Joins feature matrices with regression target series, resampled onto
/// the model's output frames (feature rate divided by the conv stride).
pub fn attach_series_labels(
    features: Vec<(String, MelSpectrogram)>,
    table: &LabelTable,
    conv_stride: usize,
) -> Result<Vec<LabeledExample>, DatasetError> {
    features
        .into_iter()
        .map(|(id, spec)| {
            let key = parent_id(&id);
            let labels = table
                .get(key)
                .ok_or_else(|| DatasetError::MissingLabel(key.to_string()))?;
            match labels {
                RowLabels::Series { values, rate_hz } => {
                    let duration_s = spec.frames() as f64 / spec.frame_rate_hz;
                    let output_rate = spec.frame_rate_hz / conv_stride as f64;
                    let frames = align_series(values, *rate_hz, duration_s, output_rate)?;
                    Ok(LabeledExample {
                        source_id: id,
                        features: spec.values,
                        labels: ExampleLabels::Frames(frames),
                    })
                }
                RowLabels::Classes(_) => Err(DatasetError::WrongLabelKind {
                    id,
                    kind: "classes",
                    expected: "series",
                }),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parent_id_strips_segment_suffix() {
        assert_eq!(parent_id("story07__seg003"), "story07");
        assert_eq!(parent_id("story07"), "story07");
        assert_eq!(parent_id("a__segment"), "a__segment");
        assert_eq!(parent_id("x__seg"), "x__seg");
    }

    #[test]
    fn class_attachment_resolves_parents() {
        use crate::corpus::LabelRow;
        let table = LabelTable {
            rows: vec![LabelRow {
                source_id: "s1".into(),
                labels: RowLabels::Classes([("label".to_string(), 1usize)].into_iter().collect()),
            }],
        };
        let spec = MelSpectrogram {
            values: Mat::zeros(2, 3),
            frame_rate_hz: 10.0,
            band_centers_hz: vec![1.0, 2.0, 3.0],
        };
        let examples = attach_class_labels(vec![("s1__seg000".into(), spec)], &table).unwrap();
        assert_eq!(examples[0].class_label("label"), Some(1));
        assert_eq!(examples[0].source_id, "s1__seg000");

        let spec = MelSpectrogram {
            values: Mat::zeros(2, 3),
            frame_rate_hz: 10.0,
            band_centers_hz: vec![1.0, 2.0, 3.0],
        };
        assert!(matches!(
            attach_class_labels(vec![("s2".into(), spec)], &table),
            Err(DatasetError::MissingLabel(id)) if id == "s2"
        ));
    }

    #[test]
    fn series_attachment_aligns_to_output_rate() {
        use crate::corpus::LabelRow;
        let table = LabelTable {
            rows: vec![LabelRow {
                source_id: "b1".into(),
                labels: RowLabels::Series {
                    values: vec![0.0, 1.0],
                    rate_hz: 1.0,
                },
            }],
        };
        // 4 frames at 2 Hz = 2 s; stride 1 keeps the 2 Hz output rate.
        let spec = MelSpectrogram {
            values: Mat::zeros(4, 2),
            frame_rate_hz: 2.0,
            band_centers_hz: vec![0.0, 1.0],
        };
        let examples = attach_series_labels(vec![("b1".into(), spec)], &table, 1).unwrap();
        match &examples[0].labels {
            ExampleLabels::Frames(f) => assert_eq!(f, &vec![0.0, 0.5, 1.0, 1.0]),
            _ => panic!("expected frames"),
        }
    }
}
