//! Flat `key = value` run configuration covering every tunable, with
//! pinned defaults, strict unknown-key rejection and a resolved dump
//! that reproduces any run.
//!
//! Precedence: built-in defaults, then the config file, then explicit
//! overrides (command-line `--set`). Seeds are ordinary keys, so the
//! dump always records them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::corpus::LabelSchema;
use crate::dsp::{DspConfig, WindowFn};
use crate::losses::LossSpec;
use crate::net::{Architecture, HeadKind, HeadSpec, Optimizer, Readout, TrainConfig};
use crate::sampling::{SamplerConfig, SamplerMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value '{value}' for '{key}' (expected {expected})")]
    BadValue {
        key: String,
        value: String,
        expected: String,
    },
    #[error("missing config key '{0}'")]
    MissingKey(String),
    #[error("bad config line {line}: '{text}'")]
    BadLine { line: usize, text: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// The default for every key. Dynamic `labels.classes.<task>` keys are
/// validated when the schema is built.
const DEFAULTS: &[(&str, &str)] = &[
    ("corpus.window_s", "4.0"),
    ("corpus.hop_s", "4.0"),
    ("corpus.pad_last", "true"),
    ("corpus.segment", "false"),
    ("dsp.mode", "mel"),
    ("dsp.raw_frame_len", "640"),
    ("dsp.sample_rate_hz", "any"),
    ("dsp.n_fft", "2048"),
    ("dsp.hop", "512"),
    ("dsp.window", "hann"),
    ("dsp.n_mels", "64"),
    ("dsp.fmin_hz", "0"),
    ("dsp.fmax_hz", "nyquist"),
    ("dsp.preemphasis_h", "1.0"),
    ("dsp.butterworth_order", "5"),
    ("dsp.butterworth_cutoff_hz", "400"),
    ("dsp.log_floor", "1e-10"),
    ("dsp.low_freq_k", "10"),
    ("labels.id_column", "id"),
    ("labels.tasks", "label"),
    ("labels.classes.label", "neg,pos"),
    ("labels.series_column", ""),
    ("labels.rate_column", "rate_hz"),
    ("net.conv_filters", "100"),
    ("net.conv_kernel", "5"),
    ("net.conv_stride", "1"),
    ("net.lstm_units", "100"),
    ("net.ff_units", "100"),
    ("net.readout", "final"),
    ("sampler.mode", "none"),
    ("sampler.lambda", "0.6"),
    ("sampler.seed", "17"),
    ("sampler.max_rejects", "100"),
    ("train.epochs", "10"),
    ("train.batch_size", "16"),
    ("train.learning_rate", "0.001"),
    ("train.optimizer", "adam"),
    ("train.adam_beta1", "0.9"),
    ("train.adam_beta2", "0.999"),
    ("train.adam_epsilon", "1e-8"),
    ("train.grad_clip", "5.0"),
    ("train.loss", "cross_entropy"),
    ("train.mse_weight", "0.1"),
    ("ensemble.n_models", "10"),
    ("ensemble.base_seed", "1234"),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Defaults overridden by a `key = value` file (`#` comments,
    /// blank lines ignored).
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        let text = fs::read_to_string(path)?;
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: line_no + 1,
                    text: raw.to_string(),
                });
            };
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Sets one key, rejecting names that are neither defaults nor
    /// task class lists.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let known = DEFAULTS.iter().any(|(k, _)| *k == key) || key.starts_with("labels.classes.");
        if !known {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` override strings (highest precedence).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for entry in overrides {
            let Some((key, value)) = entry.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: 0,
                    text: entry.clone(),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// The resolved configuration: every key, sorted, one per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn raw(&self, key: &str) -> Result<&str, ConfigError> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, expected: &str) -> Result<T, ConfigError> {
        let value = self.raw(key)?;
        value.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected: expected.to_string(),
        })
    }

    fn usize_key(&self, key: &str) -> Result<usize, ConfigError> {
        self.parse(key, "a nonnegative integer")
    }

    fn f64_key(&self, key: &str) -> Result<f64, ConfigError> {
        self.parse(key, "a number")
    }

    fn u64_key(&self, key: &str) -> Result<u64, ConfigError> {
        self.parse(key, "an unsigned integer")
    }

    fn bool_key(&self, key: &str) -> Result<bool, ConfigError> {
        match self.raw(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: other.to_string(),
                expected: "true or false".to_string(),
            }),
        }
    }

    pub fn dsp_config(&self) -> Result<DspConfig, ConfigError> {
        let window_fn = match self.raw("dsp.window")? {
            "hann" => WindowFn::Hann,
            "rectangular" => WindowFn::Rectangular,
            other => {
                return Err(ConfigError::BadValue {
                    key: "dsp.window".into(),
                    value: other.into(),
                    expected: "hann or rectangular".into(),
                })
            }
        };
        let fmax_hz = match self.raw("dsp.fmax_hz")? {
            "nyquist" => None,
            other => Some(other.parse().map_err(|_| ConfigError::BadValue {
                key: "dsp.fmax_hz".into(),
                value: other.into(),
                expected: "a number or 'nyquist'".into(),
            })?),
        };
        let expected_sample_rate_hz = match self.raw("dsp.sample_rate_hz")? {
            "any" => None,
            other => Some(other.parse().map_err(|_| ConfigError::BadValue {
                key: "dsp.sample_rate_hz".into(),
                value: other.into(),
                expected: "a rate in Hz or 'any'".into(),
            })?),
        };
        Ok(DspConfig {
            n_fft: self.usize_key("dsp.n_fft")?,
            hop: self.usize_key("dsp.hop")?,
            window_fn,
            n_mels: self.usize_key("dsp.n_mels")?,
            fmin_hz: self.f64_key("dsp.fmin_hz")?,
            fmax_hz,
            preemphasis_h: self.f64_key("dsp.preemphasis_h")?,
            butterworth_order: self.usize_key("dsp.butterworth_order")?,
            butterworth_cutoff_hz: self.f64_key("dsp.butterworth_cutoff_hz")?,
            log_floor: self.f64_key("dsp.log_floor")?,
            expected_sample_rate_hz,
        })
    }

    /// `true` when features are raw audio frames rather than Mel bands.
    pub fn raw_frame_mode(&self) -> Result<bool, ConfigError> {
        match self.raw("dsp.mode")? {
            "mel" => Ok(false),
            "raw_frames" => Ok(true),
            other => Err(ConfigError::BadValue {
                key: "dsp.mode".into(),
                value: other.into(),
                expected: "mel or raw_frames".into(),
            }),
        }
    }

    pub fn raw_frame_len(&self) -> Result<usize, ConfigError> {
        self.usize_key("dsp.raw_frame_len")
    }

    pub fn low_freq_k(&self) -> Result<usize, ConfigError> {
        self.usize_key("dsp.low_freq_k")
    }

    pub fn segmentation(&self) -> Result<Option<(f64, f64, bool)>, ConfigError> {
        if self.bool_key("corpus.segment")? {
            Ok(Some((
                self.f64_key("corpus.window_s")?,
                self.f64_key("corpus.hop_s")?,
                self.bool_key("corpus.pad_last")?,
            )))
        } else {
            Ok(None)
        }
    }

    /// Regression mode when a series column is configured, otherwise the
    /// classification tasks with their class-name maps.
    pub fn label_schema(&self) -> Result<LabelSchema, ConfigError> {
        let id_column = self.raw("labels.id_column")?.to_string();
        let series_column = self.raw("labels.series_column")?;
        if !series_column.is_empty() {
            return Ok(LabelSchema::Regression {
                id_column,
                series_column: series_column.to_string(),
                rate_column: self.raw("labels.rate_column")?.to_string(),
            });
        }
        let mut tasks = Vec::new();
        for task in self.task_names()? {
            let names = self.class_names(&task)?;
            let map = names
                .into_iter()
                .enumerate()
                .map(|(i, name)| (name, i))
                .collect();
            tasks.push((task, map));
        }
        Ok(LabelSchema::Classification { id_column, tasks })
    }

    pub fn task_names(&self) -> Result<Vec<String>, ConfigError> {
        let tasks: Vec<String> = self
            .raw("labels.tasks")?
            .split(',')
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect();
        if tasks.is_empty() {
            return Err(ConfigError::BadValue {
                key: "labels.tasks".into(),
                value: self.raw("labels.tasks")?.into(),
                expected: "a comma-separated task list".into(),
            });
        }
        Ok(tasks)
    }

    /// Ordered class names of one task (index = position).
    pub fn class_names(&self, task: &str) -> Result<Vec<String>, ConfigError> {
        let key = format!("labels.classes.{task}");
        let value = self
            .values
            .get(&key)
            .ok_or(ConfigError::MissingKey(key.clone()))?;
        let names: Vec<String> = value
            .split(',')
            .map(|c| c.trim().to_string())
            .filter(|c| !c.is_empty())
            .collect();
        if names.len() < 2 {
            return Err(ConfigError::BadValue {
                key,
                value: value.clone(),
                expected: "at least two class names".into(),
            });
        }
        Ok(names)
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig, ConfigError> {
        let mode = match self.raw("sampler.mode")? {
            "none" => SamplerMode::None,
            "upsample" => SamplerMode::Upsample,
            "probabilistic" => SamplerMode::Probabilistic,
            other => {
                return Err(ConfigError::BadValue {
                    key: "sampler.mode".into(),
                    value: other.into(),
                    expected: "none, upsample or probabilistic".into(),
                })
            }
        };
        Ok(SamplerConfig {
            mode,
            lambda: self.f64_key("sampler.lambda")?,
            seed: self.u64_key("sampler.seed")?,
            max_rejects: self.usize_key("sampler.max_rejects")?,
        })
    }

    /// Heads implied by the label schema: one classification head per
    /// task, or a single sequence-regression head named after the
    /// series column.
    pub fn heads(&self) -> Result<Vec<HeadSpec>, ConfigError> {
        let ff_units = self.usize_key("net.ff_units")?;
        let series_column = self.raw("labels.series_column")?;
        if !series_column.is_empty() {
            return Ok(vec![HeadSpec {
                name: series_column.to_string(),
                kind: HeadKind::RegressionSequence,
                ff_units,
            }]);
        }
        self.task_names()?
            .into_iter()
            .map(|task| {
                let n_classes = self.class_names(&task)?.len();
                Ok(HeadSpec {
                    name: task,
                    kind: HeadKind::Classification { n_classes },
                    ff_units,
                })
            })
            .collect()
    }

    pub fn architecture(&self, input_bands: usize) -> Result<Architecture, ConfigError> {
        let readout = match self.raw("net.readout")? {
            "final" => Readout::FinalState,
            "mean" => Readout::MeanPool,
            other => {
                return Err(ConfigError::BadValue {
                    key: "net.readout".into(),
                    value: other.into(),
                    expected: "final or mean".into(),
                })
            }
        };
        Ok(Architecture {
            input_bands,
            conv_filters: self.usize_key("net.conv_filters")?,
            conv_kernel: self.usize_key("net.conv_kernel")?,
            conv_stride: self.usize_key("net.conv_stride")?,
            lstm_units: self.usize_key("net.lstm_units")?,
            readout,
            heads: self.heads()?,
        })
    }

    /// Training hyperparameters; seeds are filled in per ensemble member.
    pub fn train_config(&self, arch: &Architecture) -> Result<TrainConfig, ConfigError> {
        let optimizer = match self.raw("train.optimizer")? {
            "sgd" => Optimizer::Sgd,
            "adam" => Optimizer::Adam {
                beta1: self.f64_key("train.adam_beta1")?,
                beta2: self.f64_key("train.adam_beta2")?,
                epsilon: self.f64_key("train.adam_epsilon")?,
            },
            other => {
                return Err(ConfigError::BadValue {
                    key: "train.optimizer".into(),
                    value: other.into(),
                    expected: "adam or sgd".into(),
                })
            }
        };
        let grad_clip = match self.raw("train.grad_clip")? {
            "none" => None,
            other => Some(other.parse().map_err(|_| ConfigError::BadValue {
                key: "train.grad_clip".into(),
                value: other.into(),
                expected: "a number or 'none'".into(),
            })?),
        };
        let regression_loss = match self.raw("train.loss")? {
            "cross_entropy" => None,
            "corr" => Some(LossSpec::Corr),
            "mse" => Some(LossSpec::Mse),
            "corr_mse" => Some(LossSpec::CorrPlusMse {
                weight: self.f64_key("train.mse_weight")?,
            }),
            other => {
                return Err(ConfigError::BadValue {
                    key: "train.loss".into(),
                    value: other.into(),
                    expected: "cross_entropy, corr, mse or corr_mse".into(),
                })
            }
        };
        let losses = arch
            .heads
            .iter()
            .map(|head| {
                let spec = match head.kind {
                    HeadKind::Classification { .. } => LossSpec::CrossEntropy,
                    _ => regression_loss
                        .clone()
                        .unwrap_or(LossSpec::CorrPlusMse { weight: 0.1 }),
                };
                (head.name.clone(), spec)
            })
            .collect();

        Ok(TrainConfig {
            epochs: self.usize_key("train.epochs")?,
            batch_size: self.usize_key("train.batch_size")?,
            learning_rate: self.f64_key("train.learning_rate")?,
            optimizer,
            losses,
            init_seed: 0,
            shuffle_seed: 0,
            grad_clip,
        })
    }

    pub fn n_models(&self) -> Result<usize, ConfigError> {
        self.usize_key("ensemble.n_models")
    }

    pub fn base_seed(&self) -> Result<u64, ConfigError> {
        self.u64_key("ensemble.base_seed")
    }
}
