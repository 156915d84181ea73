//! The end-to-end model: 1D convolution over time, an LSTM, and one
//! feedforward-plus-output head per task, with hand-derived
//! backpropagation and a deterministic training loop.
//!
//! Multi-task models share the conv-LSTM trunk and split after the LSTM
//! into per-head hidden and output layers. All math is `f64`; every
//! gradient is checked against central finite differences in the tests.

mod backward;
mod checkpoint;
mod forward;
mod params;
mod train;

use std::io;

use thiserror::Error;

use crate::losses::LossError;
use crate::sampling::SamplingError;

pub use backward::{backward, HeadGrad};
pub use checkpoint::{load_plmp, save_plmp};
pub use forward::{forward, predict, softmax, ForwardCache, HeadOutput, Mode};
pub use params::{init_params, DenseParams, HeadParams, LstmParams, ModelGrads, ModelParams};
pub use train::{train, EpochLog, Optimizer, TaskEpochStats, TrainConfig};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input too short: {frames} frames, conv kernel needs {kernel}")]
    InputTooShort { frames: usize, kernel: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("no training data")]
    NoData,
    #[error("example '{source_id}' is missing a label for task '{task}'")]
    MissingTaskLabel { task: String, source_id: String },
    #[error("bad net config: {0}")]
    BadConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// What a head predicts.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadKind {
    Classification {
        n_classes: usize,
    },
    RegressionScalar,
    /// One value per model frame (time-distributed head).
    RegressionSequence,
}

/// One task-specific output branch.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub name: String,
    pub kind: HeadKind,
    /// Hidden units of the head's feedforward layer.
    pub ff_units: usize,
}

impl HeadSpec {
    pub fn output_dim(&self) -> usize {
        match self.kind {
            HeadKind::Classification { n_classes } => n_classes,
            HeadKind::RegressionScalar | HeadKind::RegressionSequence => 1,
        }
    }
}

/// How utterance-level heads read the LSTM output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    /// The final hidden state (default).
    FinalState,
    /// The mean over all hidden states.
    MeanPool,
}

/// Network shape. The defaults mirror the 100-filter conv, 100-cell LSTM
/// and 100-unit feedforward stack; tests shrink them.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input_bands: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub lstm_units: usize,
    pub readout: Readout,
    pub heads: Vec<HeadSpec>,
}

impl Architecture {
    /// Single-head architecture with the standard layer widths.
    pub fn new(input_bands: usize, head: HeadSpec) -> Self {
        Architecture {
            input_bands,
            conv_filters: 100,
            conv_kernel: 5,
            conv_stride: 1,
            lstm_units: 100,
            readout: Readout::FinalState,
            heads: vec![head],
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let sizes = [
            ("input_bands", self.input_bands),
            ("conv_filters", self.conv_filters),
            ("conv_kernel", self.conv_kernel),
            ("conv_stride", self.conv_stride),
            ("lstm_units", self.lstm_units),
        ];
        for (name, value) in sizes {
            if value == 0 {
                return Err(NetError::BadConfig(format!("{name} must be >= 1")));
            }
        }
        if self.heads.is_empty() {
            return Err(NetError::BadConfig("need at least one head".into()));
        }
        let mut names: Vec<&str> = self.heads.iter().map(|h| h.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.heads.len() {
            return Err(NetError::BadConfig("head names must be unique".into()));
        }
        for head in &self.heads {
            if head.ff_units == 0 {
                return Err(NetError::BadConfig(format!(
                    "head '{}': ff_units must be >= 1",
                    head.name
                )));
            }
            if let HeadKind::Classification { n_classes } = head.kind {
                if n_classes < 2 {
                    return Err(NetError::BadConfig(format!(
                        "head '{}': need at least 2 classes",
                        head.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Frames the conv layer produces for `input_frames` rows
    /// (valid padding).
    pub fn conv_output_len(&self, input_frames: usize) -> Option<usize> {
        if input_frames < self.conv_kernel {
            None
        } else {
            Some(1 + (input_frames - self.conv_kernel) / self.conv_stride)
        }
    }
}

/// Soft-voting merge of segment posteriors for one parent recording:
/// the arithmetic mean, renormalized against accumulated rounding.
pub fn merge_segment_predictions(posteriors: &[Vec<f64>]) -> Result<Vec<f64>, NetError> {
    let first = posteriors.first().ok_or(NetError::NoData)?;
    let dim = first.len();
    let mut mean = vec![0.0; dim];
    for p in posteriors {
        if p.len() != dim {
            return Err(NetError::ShapeMismatch(format!(
                "posterior lengths differ: {} vs {}",
                p.len(),
                dim
            )));
        }
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let total: f64 = mean.iter().sum();
    for m in &mut mean {
        *m /= total;
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn classification_head(name: &str, n_classes: usize, ff: usize) -> HeadSpec {
        HeadSpec {
            name: name.into(),
            kind: HeadKind::Classification { n_classes },
            ff_units: ff,
        }
    }

    #[test]
    fn architecture_validation() {
        let mut arch = Architecture::new(8, classification_head("a", 2, 16));
        arch.validate().unwrap();
        arch.heads.push(classification_head("a", 3, 16));
        assert!(matches!(arch.validate(), Err(NetError::BadConfig(_))));
        arch.heads.pop();
        arch.heads[0].kind = HeadKind::Classification { n_classes: 1 };
        assert!(matches!(arch.validate(), Err(NetError::BadConfig(_))));
    }

    #[test]
    fn conv_output_length() {
        let mut arch = Architecture::new(4, classification_head("a", 2, 8));
        arch.conv_kernel = 5;
        arch.conv_stride = 2;
        assert_eq!(arch.conv_output_len(4), None);
        assert_eq!(arch.conv_output_len(5), Some(1));
        assert_eq!(arch.conv_output_len(11), Some(4));
    }

    #[test]
    fn merge_examples() {
        let same = merge_segment_predictions(&[vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
        assert!((same[0] - 0.3).abs() < 1e-12 && (same[1] - 0.7).abs() < 1e-12);

        let opposed = merge_segment_predictions(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(opposed, vec![0.5, 0.5]);

        // Hand mean of three posteriors.
        let three =
            merge_segment_predictions(&[vec![0.9, 0.1], vec![0.6, 0.4], vec![0.6, 0.4]]).unwrap();
        assert!((three[0] - 0.7).abs() < 1e-12);
        assert!((three[1] - 0.3).abs() < 1e-12);

        assert!(matches!(
            merge_segment_predictions(&[]),
            Err(NetError::NoData)
        ));
    }
}
