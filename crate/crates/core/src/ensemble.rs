//! Bagging-style ensembles and prediction fusion.
//!
//! Members train on the full dataset; diversity comes only from
//! initialization and shuffling seeds, derived as
//! `init = base_seed + i`, `shuffle = sampler = base_seed + 1000 + i`.
//! Members are independent, so [`train_ensemble`] fans out over the
//! worker pool; results are collected in member order and are identical
//! to the sequential run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{LabelTable, RowLabels};
use crate::dataset::LabeledExample;
use crate::losses::{self, MetricReport};
use crate::mat::Mat;
use crate::net::{
    predict, train, Architecture, EpochLog, HeadOutput, ModelParams, NetError, TrainConfig,
};
use crate::parallel::{par_map, seq_map};
use crate::sampling::SamplerConfig;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("model {model}: {source}")]
    Train { model: usize, source: NetError },
    #[error("prediction sets disagree on ids: {0}")]
    IdMismatch(String),
    #[error("prediction sets disagree on shapes: {0}")]
    ShapeMismatch(String),
    #[error("fusion weights must be nonnegative with a positive sum")]
    NonPositiveWeights,
    #[error("no prediction for labeled id '{0}'")]
    MissingPrediction(String),
    #[error("label table has no task '{task}' for id '{id}'")]
    TaskMismatch { task: String, id: String },
    #[error("bad ensemble spec: {0}")]
    BadSpec(String),
    #[error("bad prediction csv {path}: {message}")]
    BadCsv { path: String, message: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Everything needed to train one ensemble.
#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub n_models: usize,
    pub base_seed: u64,
    pub arch: Architecture,
    pub tcfg: TrainConfig,
    pub sampler: SamplerConfig,
}

/// One trained member with its per-epoch log.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

fn member_configs(spec: &EnsembleSpec, index: usize) -> (TrainConfig, SamplerConfig) {
    let mut tcfg = spec.tcfg.clone();
    tcfg.init_seed = spec.base_seed + index as u64;
    tcfg.shuffle_seed = spec.base_seed + 1000 + index as u64;
    let mut sampler = spec.sampler.clone();
    sampler.seed = spec.base_seed + 1000 + index as u64;
    (tcfg, sampler)
}

fn collect_members(
    results: Vec<Result<(ModelParams, Vec<EpochLog>), NetError>>,
) -> Result<Vec<TrainedModel>, EnsembleError> {
    results
        .into_iter()
        .enumerate()
        .map(|(model, result)| {
            result
                .map(|(params, log)| TrainedModel { params, log })
                .map_err(|source| EnsembleError::Train { model, source })
        })
        .collect()
}

/// Trains `n_models` members on the full dataset, in parallel when the
/// `parallel` feature is on.
pub fn train_ensemble(
    spec: &EnsembleSpec,
    data: &[LabeledExample],
) -> Result<Vec<TrainedModel>, EnsembleError> {
    if spec.n_models == 0 {
        return Err(EnsembleError::BadSpec("n_models must be >= 1".into()));
    }
    let indices: Vec<usize> = (0..spec.n_models).collect();
    let results = par_map(&indices, |&i| {
        let (tcfg, sampler) = member_configs(spec, i);
        train(&spec.arch, data, &sampler, &tcfg)
    });
    collect_members(results)
}

/// Sequential twin of [`train_ensemble`]; same outputs, used as the
/// bench baseline.
pub fn train_ensemble_sequential(
    spec: &EnsembleSpec,
    data: &[LabeledExample],
) -> Result<Vec<TrainedModel>, EnsembleError> {
    if spec.n_models == 0 {
        return Err(EnsembleError::BadSpec("n_models must be >= 1".into()));
    }
    let indices: Vec<usize> = (0..spec.n_models).collect();
    let results = seq_map(&indices, |&i| {
        let (tcfg, sampler) = member_configs(spec, i);
        train(&spec.arch, data, &sampler, &tcfg)
    });
    collect_members(results)
}

/// Predictions of one system for one task, keyed by source id.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub task: String,
    /// Class names in posterior order; `None` for regression sets.
    pub class_names: Option<Vec<String>>,
    pub rows: BTreeMap<String, PredictionRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PredictionRow {
    Posterior(Vec<f64>),
    Sequence(Vec<f64>),
}

/// Runs one model over all feature matrices; one set per head,
/// in head order.
pub fn predict_sets(
    params: &ModelParams,
    features: &[(String, Mat)],
) -> Result<Vec<PredictionSet>, EnsembleError> {
    let mut sets: Vec<PredictionSet> = params
        .arch
        .heads
        .iter()
        .map(|h| PredictionSet {
            task: h.name.clone(),
            class_names: None,
            rows: BTreeMap::new(),
        })
        .collect();
    for (id, input) in features {
        let outputs = predict(params, input)?;
        for (set, output) in sets.iter_mut().zip(outputs) {
            let row = match output {
                HeadOutput::Posterior(p) => PredictionRow::Posterior(p),
                HeadOutput::Scalar(v) => PredictionRow::Sequence(vec![v]),
                HeadOutput::Sequence(s) => PredictionRow::Sequence(s),
            };
            set.rows.insert(id.clone(), row);
        }
    }
    Ok(sets)
}

fn check_aligned(members: &[PredictionSet]) -> Result<(), EnsembleError> {
    let first = &members[0];
    for m in &members[1..] {
        if m.task != first.task {
            return Err(EnsembleError::ShapeMismatch(format!(
                "tasks '{}' vs '{}'",
                first.task, m.task
            )));
        }
        if m.rows.len() != first.rows.len() {
            return Err(EnsembleError::IdMismatch(format!(
                "{} vs {} rows",
                first.rows.len(),
                m.rows.len()
            )));
        }
        for (id, row) in &m.rows {
            let base = first
                .rows
                .get(id)
                .ok_or_else(|| EnsembleError::IdMismatch(id.clone()))?;
            let ok = match (base, row) {
                (PredictionRow::Posterior(a), PredictionRow::Posterior(b)) => a.len() == b.len(),
                (PredictionRow::Sequence(a), PredictionRow::Sequence(b)) => a.len() == b.len(),
                _ => false,
            };
            if !ok {
                return Err(EnsembleError::ShapeMismatch(format!("row '{id}'")));
            }
        }
    }
    Ok(())
}

/// Output averaging: the arithmetic mean of the members' predictions
/// (posteriors renormalized, sequences element-wise).
pub fn average_predictions(members: &[PredictionSet]) -> Result<PredictionSet, EnsembleError> {
    soft_vote(members, &vec![1.0; members.len()])
}

/// Weighted soft voting: a convex combination of the sources with the
/// normalized weights; posterior rows are renormalized after combining.
pub fn soft_vote(
    sources: &[PredictionSet],
    weights: &[f64],
) -> Result<PredictionSet, EnsembleError> {
    if sources.is_empty() || weights.len() != sources.len() {
        return Err(EnsembleError::BadSpec(format!(
            "{} sources with {} weights",
            sources.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || total <= 0.0 {
        return Err(EnsembleError::NonPositiveWeights);
    }
    check_aligned(sources)?;

    let mut fused = sources[0].clone();
    for (id, row) in fused.rows.iter_mut() {
        let mut acc: Vec<f64> = match row {
            PredictionRow::Posterior(p) => vec![0.0; p.len()],
            PredictionRow::Sequence(s) => vec![0.0; s.len()],
        };
        for (source, &w) in sources.iter().zip(weights) {
            let values = match &source.rows[id] {
                PredictionRow::Posterior(p) => p,
                PredictionRow::Sequence(s) => s,
            };
            for (a, &v) in acc.iter_mut().zip(values) {
                *a += w / total * v;
            }
        }
        match row {
            PredictionRow::Posterior(p) => {
                let sum: f64 = acc.iter().sum();
                for a in &mut acc {
                    *a /= sum;
                }
                *p = acc;
            }
            PredictionRow::Sequence(s) => *s = acc,
        }
    }
    Ok(fused)
}

/// Linear resampling of `series` onto `len` points by index-space
/// mapping; exact when the lengths already match.
fn resample_to_len(series: &[f64], len: usize) -> Vec<f64> {
    if series.len() == len || len <= 1 {
        return series.iter().take(len.max(1)).copied().collect();
    }
    (0..len)
        .map(|i| {
            let pos = i as f64 * (series.len() - 1) as f64 / (len - 1) as f64;
            let i0 = pos.floor() as usize;
            if i0 + 1 < series.len() {
                let frac = pos - i0 as f64;
                series[i0] * (1.0 - frac) + series[i0 + 1] * frac
            } else {
                *series.last().unwrap()
            }
        })
        .collect()
}

/// Scores predictions against labels: confusion and UAR for
/// classification (argmax decision, ties to the lowest class), per-file
/// Pearson r and MSE averaged over files for regression.
pub fn evaluate(pred: &PredictionSet, labels: &LabelTable) -> Result<MetricReport, EnsembleError> {
    let mut confusion: Option<Vec<Vec<usize>>> = None;
    let mut r_sum = 0.0;
    let mut mse_sum = 0.0;
    let mut n_regression = 0usize;

    for row in &labels.rows {
        let prediction = pred
            .rows
            .get(&row.source_id)
            .ok_or_else(|| EnsembleError::MissingPrediction(row.source_id.clone()))?;
        match (&row.labels, prediction) {
            (RowLabels::Classes(map), PredictionRow::Posterior(p)) => {
                let label = *map
                    .get(&pred.task)
                    .ok_or_else(|| EnsembleError::TaskMismatch {
                        task: pred.task.clone(),
                        id: row.source_id.clone(),
                    })?;
                let n = p.len();
                let matrix = confusion.get_or_insert_with(|| vec![vec![0; n]; n]);
                if label >= matrix.len() {
                    return Err(EnsembleError::ShapeMismatch(format!(
                        "label {label} outside the {n}-class posterior for '{}'",
                        row.source_id
                    )));
                }
                matrix[label][losses::argmax(p)] += 1;
            }
            (RowLabels::Series { values, .. }, PredictionRow::Sequence(s)) => {
                let target = resample_to_len(values, s.len());
                r_sum += losses::pearson_r(s, &target)?;
                mse_sum += losses::mse(s, &target)?.0;
                n_regression += 1;
            }
            _ => {
                return Err(EnsembleError::ShapeMismatch(format!(
                    "label and prediction kinds differ for '{}'",
                    row.source_id
                )))
            }
        }
    }

    let mut report = MetricReport::default();
    if let Some(matrix) = confusion {
        report.uar = Some(losses::uar(&matrix)?);
        report.confusion = Some(matrix);
    }
    if n_regression > 0 {
        report.pearson_r = Some(r_sum / n_regression as f64);
        report.mse = Some(mse_sum / n_regression as f64);
    }
    Ok(report)
}

/// Writes the prediction CSV: `id,<class>,...` posterior rows for
/// classification, `id,frame_index,value` for regression. This is the
/// interoperability surface for fusing with external systems.
pub fn write_prediction_csv(path: &Path, set: &PredictionSet) -> Result<(), EnsembleError> {
    let mut out = String::new();
    let classification = set
        .rows
        .values()
        .next()
        .map(|r| matches!(r, PredictionRow::Posterior(_)))
        .unwrap_or(true);
    if classification {
        let n_classes = set
            .rows
            .values()
            .next()
            .map(|r| match r {
                PredictionRow::Posterior(p) => p.len(),
                PredictionRow::Sequence(_) => 0,
            })
            .unwrap_or(0);
        let names: Vec<String> = match &set.class_names {
            Some(names) => names.clone(),
            None => (0..n_classes).map(|c| format!("class_{c}")).collect(),
        };
        let _ = writeln!(out, "id,{}", names.join(","));
        for (id, row) in &set.rows {
            let PredictionRow::Posterior(p) = row else {
                return Err(EnsembleError::ShapeMismatch(format!(
                    "mixed row kinds at '{id}'"
                )));
            };
            let cells: Vec<String> = p.iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{id},{}", cells.join(","));
        }
    } else {
        out.push_str("id,frame_index,value\n");
        for (id, row) in &set.rows {
            let PredictionRow::Sequence(s) = row else {
                return Err(EnsembleError::ShapeMismatch(format!(
                    "mixed row kinds at '{id}'"
                )));
            };
            for (t, v) in s.iter().enumerate() {
                let _ = writeln!(out, "{id},{t},{v}");
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a prediction CSV (the same format [`write_prediction_csv`]
/// emits, also produced by external baseline systems).
pub fn read_prediction_csv(path: &Path, task: &str) -> Result<PredictionSet, EnsembleError> {
    let text = fs::read_to_string(path)?;
    let bad = |message: String| EnsembleError::BadCsv {
        path: path.display().to_string(),
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.len() < 2 || columns[0] != "id" {
        return Err(bad(format!("unexpected header '{header}'")));
    }

    let regression = columns.len() == 3 && columns[1] == "frame_index" && columns[2] == "value";
    let mut rows: BTreeMap<String, PredictionRow> = BTreeMap::new();
    if regression {
        let mut sequences: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
        for (line_no, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(bad(format!("line {}: expected 3 fields", line_no + 2)));
            }
            let frame: usize = fields[1]
                .parse()
                .map_err(|_| bad(format!("line {}: bad frame index", line_no + 2)))?;
            let value: f64 = fields[2]
                .parse()
                .map_err(|_| bad(format!("line {}: bad value", line_no + 2)))?;
            sequences
                .entry(fields[0].to_string())
                .or_default()
                .push((frame, value));
        }
        for (id, mut frames) in sequences {
            frames.sort_by_key(|&(t, _)| t);
            rows.insert(
                id,
                PredictionRow::Sequence(frames.into_iter().map(|(_, v)| v).collect()),
            );
        }
        Ok(PredictionSet {
            task: task.to_string(),
            class_names: None,
            rows,
        })
    } else {
        let class_names: Vec<String> = columns[1..].iter().map(|c| c.to_string()).collect();
        for (line_no, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != columns.len() {
                return Err(bad(format!(
                    "line {}: expected {} fields",
                    line_no + 2,
                    columns.len()
                )));
            }
            let posterior: Vec<f64> = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad(format!("line {}: bad posterior", line_no + 2)))?;
            rows.insert(fields[0].to_string(), PredictionRow::Posterior(posterior));
        }
        Ok(PredictionSet {
            task: task.to_string(),
            class_names: Some(class_names),
            rows,
        })
    }
}

/// Forward pass kept around for multi-head checkpoints: predicts with
/// every model and averages, one set per head.
pub fn ensemble_predict(
    models: &[ModelParams],
    features: &[(String, Mat)],
) -> Result<Vec<PredictionSet>, EnsembleError> {
    if models.is_empty() {
        return Err(EnsembleError::BadSpec("no models".into()));
    }
    let per_model: Vec<Result<Vec<PredictionSet>, EnsembleError>> =
        par_map(models, |m| predict_sets(m, features));
    let per_model: Vec<Vec<PredictionSet>> = per_model.into_iter().collect::<Result<_, _>>()?;
    let n_heads = per_model[0].len();
    (0..n_heads)
        .map(|h| {
            let members: Vec<PredictionSet> =
                per_model.iter().map(|sets| sets[h].clone()).collect();
            average_predictions(&members)
        })
        .collect()
}
