//! The six pipeline commands. Every command is deterministic given its
//! inputs and resolved config: outputs carry no timestamps, ids sort
//! lexicographically, and worker counts never change results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use paralearn::config::RunConfig;
use paralearn::corpus::{self, LabelSchema};
use paralearn::dataset::{self, LabeledExample};
use paralearn::dsp::{self, MelSpectrogram};
use paralearn::ensemble::{self, EnsembleSpec, PredictionRow, PredictionSet, TrainedModel};
use paralearn::mat::Mat;
use paralearn::net::{self, HeadKind, ModelParams};
use paralearn::parallel::{par_map, with_workers};
use paralearn::saliency::{self, OutputSelector};

fn load_config(config: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut run = match config {
        Some(path) => RunConfig::from_file(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    run.apply_overrides(overrides)?;
    Ok(run)
}

/// Files with the given extension, sorted by name for determinism.
fn sorted_files(dir: &Path, extension: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(extension))
        .collect();
    files.sort();
    Ok(files)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn extract(
    audio_dir: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    overrides: &[String],
    low_freq: bool,
    workers: Option<usize>,
) -> Result<()> {
    let run = load_config(config, overrides)?;
    let mut dsp_config = run.dsp_config()?;
    let raw_frames = run.raw_frame_mode()?;
    let frame_len = run.raw_frame_len()?;
    let low_freq_k = run.low_freq_k()?;
    let segmentation = run.segmentation()?;
    if low_freq && raw_frames {
        bail!(paralearn::config::ConfigError::BadValue {
            key: "dsp.mode".into(),
            value: "raw_frames".into(),
            expected: "mel features for the --low-freq path".into(),
        });
    }

    let files = sorted_files(audio_dir, "wav")?;
    if files.is_empty() {
        bail!("no .wav files in {}", audio_dir.display());
    }
    fs::create_dir_all(out_dir)?;

    // A run must not mix sample rates: pin the expected rate to the
    // first readable file when the config says "any".
    if dsp_config.expected_sample_rate_hz.is_none() {
        for path in &files {
            if let Ok(clip) = corpus::load_wav(path) {
                dsp_config.expected_sample_rate_hz = Some(clip.sample_rate_hz);
                break;
            }
        }
    }

    let results: Vec<(String, Result<usize>)> = with_workers(workers, || {
        par_map(&files, |path| {
            let outcome = extract_one(
                path,
                out_dir,
                &dsp_config,
                raw_frames,
                frame_len,
                low_freq,
                low_freq_k,
                segmentation,
            );
            (file_stem(path), outcome)
        })
    });

    let mut failures = 0;
    for (stem, outcome) in &results {
        match outcome {
            Ok(n) => eprintln!("{stem}: {n} feature file(s)"),
            Err(err) => {
                failures += 1;
                eprintln!("{stem}: FAILED: {err:#}");
            }
        }
    }
    if failures > 0 {
        bail!("{failures} of {} files failed", results.len());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn extract_one(
    path: &Path,
    out_dir: &Path,
    dsp_config: &dsp::DspConfig,
    raw_frames: bool,
    frame_len: usize,
    low_freq: bool,
    low_freq_k: usize,
    segmentation: Option<(f64, f64, bool)>,
) -> Result<usize> {
    let clip = corpus::load_wav(path)?;
    let clip = if low_freq {
        dsp::preprocess_low_freq(&clip, dsp_config)?
    } else {
        clip
    };
    let clips = match segmentation {
        Some((window_s, hop_s, pad_last)) => corpus::segment(&clip, window_s, hop_s, pad_last)?
            .into_iter()
            .map(|s| s.clip)
            .collect(),
        None => vec![clip],
    };
    let mut written = 0;
    for piece in &clips {
        let features = if raw_frames {
            dsp::frame_raw_audio(piece, frame_len)?
        } else {
            let spec = dsp::mel_spectrogram(piece, dsp_config)?;
            if low_freq {
                dsp::lowest_k_bands(&spec, low_freq_k)?
            } else {
                spec
            }
        };
        dsp::write_plfb(
            &out_dir.join(format!("{}.plfb", piece.source_id)),
            &features,
        )?;
        written += 1;
    }
    Ok(written)
}

/// Feature matrices keyed by file stem, plus the shared band centers and
/// frame rate (validated identical across files where it matters).
fn load_features(dir: &Path) -> Result<Vec<(String, MelSpectrogram)>> {
    let files = sorted_files(dir, "plfb")?;
    if files.is_empty() {
        bail!("no .plfb files in {}", dir.display());
    }
    files
        .iter()
        .map(|path| Ok((file_stem(path), dsp::read_plfb(path)?)))
        .collect()
}

fn feature_bands(features: &[(String, MelSpectrogram)]) -> Result<usize> {
    let bands = features[0].1.bands();
    for (id, spec) in features {
        if spec.bands() != bands {
            bail!(
                "feature files disagree on bands: '{id}' has {}, expected {bands}",
                spec.bands()
            );
        }
    }
    Ok(bands)
}

pub fn train(
    features_dir: &Path,
    labels_path: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    overrides: &[String],
    workers: Option<usize>,
) -> Result<()> {
    let run = load_config(config, overrides)?;
    let schema = run.label_schema()?;
    let table = corpus::load_labels(labels_path, &schema)?;

    let features = load_features(features_dir)?;
    let bands = feature_bands(&features)?;
    let arch = run.architecture(bands)?;
    let tcfg = run.train_config(&arch)?;
    let examples: Vec<LabeledExample> = match &schema {
        LabelSchema::Classification { .. } => dataset::attach_class_labels(features, &table)?,
        LabelSchema::Regression { .. } => {
            dataset::attach_series_labels(features, &table, arch.conv_stride)?
        }
    };

    let spec = EnsembleSpec {
        n_models: run.n_models()?,
        base_seed: run.base_seed()?,
        arch,
        tcfg,
        sampler: run.sampler_config()?,
    };

    let members = with_workers(workers, || ensemble::train_ensemble(&spec, &examples))?;

    fs::create_dir_all(out_dir)?;
    write_training_outputs(out_dir, &run, &members).inspect_err(|_| {
        // No partial checkpoint directories on failure.
        for i in 0..members.len() {
            let _ = fs::remove_file(out_dir.join(format!("model{i:03}.plmp")));
        }
    })?;
    eprintln!(
        "trained {} model(s) on {} example(s)",
        members.len(),
        examples.len()
    );
    Ok(())
}

fn write_training_outputs(out_dir: &Path, run: &RunConfig, members: &[TrainedModel]) -> Result<()> {
    for (i, member) in members.iter().enumerate() {
        net::save_plmp(&out_dir.join(format!("model{i:03}.plmp")), &member.params)?;
    }
    fs::write(out_dir.join("resolved.cfg"), run.dump())?;

    let mut log = String::from("model,epoch,task,loss,metric\n");
    for (i, member) in members.iter().enumerate() {
        for epoch in &member.log {
            for task in &epoch.tasks {
                let metric = task.metric.map(|m| m.to_string()).unwrap_or_default();
                let _ = writeln!(
                    log,
                    "{i},{},{},{},{metric}",
                    epoch.epoch, task.task, task.mean_loss
                );
            }
        }
    }
    fs::write(out_dir.join("train_log.csv"), log)?;
    Ok(())
}

fn load_checkpoints(dir: &Path) -> Result<Vec<ModelParams>> {
    let files = sorted_files(dir, "plmp")?;
    if files.is_empty() {
        bail!("no .plmp checkpoints in {}", dir.display());
    }
    files.iter().map(|p| Ok(net::load_plmp(p)?)).collect()
}

/// Attaches configured class names to a classification prediction set;
/// falls back to generic names when the config has none for the task.
fn name_classes(run: &RunConfig, set: &mut PredictionSet) {
    if set
        .rows
        .values()
        .any(|r| matches!(r, PredictionRow::Posterior(_)))
    {
        if let Ok(names) = run.class_names(&set.task) {
            set.class_names = Some(names);
        }
    }
}

/// Merges segment-level posterior rows (`id__segNNN`) into one row per
/// parent recording via soft voting. Sequence rows pass through.
fn merge_segments(set: &PredictionSet) -> Result<PredictionSet> {
    let has_segments = set.rows.keys().any(|id| dataset::parent_id(id) != id);
    let all_posteriors = set
        .rows
        .values()
        .all(|r| matches!(r, PredictionRow::Posterior(_)));
    if !has_segments || !all_posteriors {
        return Ok(set.clone());
    }
    let mut grouped: std::collections::BTreeMap<String, Vec<Vec<f64>>> = Default::default();
    for (id, row) in &set.rows {
        let PredictionRow::Posterior(p) = row else {
            unreachable!()
        };
        grouped
            .entry(dataset::parent_id(id).to_string())
            .or_default()
            .push(p.clone());
    }
    let rows = grouped
        .into_iter()
        .map(|(parent, posteriors)| {
            Ok((
                parent,
                PredictionRow::Posterior(net::merge_segment_predictions(&posteriors)?),
            ))
        })
        .collect::<Result<_>>()?;
    Ok(PredictionSet {
        task: set.task.clone(),
        class_names: set.class_names.clone(),
        rows,
    })
}

/// Output path for one task's CSV: the plain `--out` path for
/// single-task models, `stem.task.csv` otherwise.
fn task_out_path(out: &Path, task: &str, multi: bool) -> PathBuf {
    if multi {
        let stem = file_stem(out);
        out.with_file_name(format!("{stem}.{task}.csv"))
    } else {
        out.to_path_buf()
    }
}

pub fn predict(
    checkpoints_dir: &Path,
    features_dir: &Path,
    out: &Path,
    config: Option<&Path>,
    overrides: &[String],
    per_model: bool,
    workers: Option<usize>,
) -> Result<()> {
    let run = load_config(config, overrides)?;
    let models = load_checkpoints(checkpoints_dir)?;
    let features: Vec<(String, Mat)> = load_features(features_dir)?
        .into_iter()
        .map(|(id, spec)| (id, spec.values))
        .collect();

    let multi = models[0].arch.heads.len() > 1;
    let averaged = with_workers(workers, || ensemble::ensemble_predict(&models, &features))?;
    for set in &averaged {
        let mut merged = merge_segments(set)?;
        name_classes(&run, &mut merged);
        ensemble::write_prediction_csv(&task_out_path(out, &set.task, multi), &merged)?;
    }

    if per_model {
        for (i, model) in models.iter().enumerate() {
            for set in ensemble::predict_sets(model, &features)? {
                let mut merged = merge_segments(&set)?;
                name_classes(&run, &mut merged);
                let stem = file_stem(out);
                let path = if multi {
                    out.with_file_name(format!("{stem}.model{i:03}.{}.csv", set.task))
                } else {
                    out.with_file_name(format!("{stem}.model{i:03}.csv"))
                };
                ensemble::write_prediction_csv(&path, &merged)?;
            }
        }
    }
    Ok(())
}

pub fn fuse(inputs: &[PathBuf], weights: Option<&str>, out: &Path) -> Result<()> {
    if inputs.is_empty() {
        bail!("fuse needs at least one prediction CSV");
    }
    let weights: Vec<f64> = match weights {
        Some(spec) => spec
            .split(',')
            .map(|w| {
                w.trim()
                    .parse::<f64>()
                    .with_context(|| format!("bad weight '{w}'"))
            })
            .collect::<Result<_>>()?,
        None => vec![1.0; inputs.len()],
    };
    if weights.len() != inputs.len() {
        bail!("{} weights for {} inputs", weights.len(), inputs.len());
    }
    let sources: Vec<PredictionSet> = inputs
        .iter()
        .map(|path| Ok(ensemble::read_prediction_csv(path, "fused")?))
        .collect::<Result<_>>()?;
    let mut fused = ensemble::soft_vote(&sources, &weights)?;
    // Keep the first source's class-name header on the fused output.
    fused.class_names = sources[0].class_names.clone();
    ensemble::write_prediction_csv(out, &fused)?;
    Ok(())
}

pub fn saliency(
    checkpoints_dir: &Path,
    features_dir: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    overrides: &[String],
    per_file: bool,
    workers: Option<usize>,
) -> Result<()> {
    let _ = load_config(config, overrides)?;
    let models = load_checkpoints(checkpoints_dir)?;
    let features = load_features(features_dir)?;
    let centers = features[0].1.band_centers_hz.clone();
    let frame_rate = features[0].1.frame_rate_hz;
    let ids: Vec<String> = features.iter().map(|(id, _)| id.clone()).collect();
    let inputs: Vec<Mat> = features.into_iter().map(|(_, spec)| spec.values).collect();

    let head = &models[0].arch.heads[0];
    let selector = match head.kind {
        HeadKind::Classification { .. } => OutputSelector::PredictedClassLogit {
            head: head.name.clone(),
        },
        _ => OutputSelector::HeadScalar {
            head: head.name.clone(),
        },
    };

    fs::create_dir_all(out_dir)?;
    let maps = with_workers(workers, || {
        saliency::band_importance_all(&models, &inputs, &selector)
    })?;
    for (i, map) in maps.iter().enumerate() {
        saliency::write_band_importance_csv(
            &out_dir.join(format!("model{i:03}.csv")),
            map,
            &centers,
        )?;
    }

    if per_file {
        for (i, model) in models.iter().enumerate() {
            for (id, input) in ids.iter().zip(&inputs) {
                let grad = saliency::input_gradients(model, input, &selector)?;
                let mut magnitude = grad;
                for v in magnitude.data_mut() {
                    *v = v.abs();
                }
                let map = MelSpectrogram {
                    values: magnitude,
                    frame_rate_hz: frame_rate,
                    band_centers_hz: centers.clone(),
                };
                dsp::write_plfb(&out_dir.join(format!("model{i:03}.{id}.grad.plfb")), &map)?;
            }
        }
    }
    Ok(())
}

pub fn evaluate(
    predictions_path: &Path,
    labels_path: &Path,
    out: Option<&Path>,
    config: Option<&Path>,
    overrides: &[String],
    task: Option<&str>,
) -> Result<()> {
    let run = load_config(config, overrides)?;
    let schema = run.label_schema()?;
    let table = corpus::load_labels(labels_path, &schema)?;
    let default_task = match &schema {
        LabelSchema::Classification { tasks, .. } => tasks[0].0.clone(),
        LabelSchema::Regression { series_column, .. } => series_column.clone(),
    };
    let task = task.unwrap_or(&default_task);

    let predictions = ensemble::read_prediction_csv(predictions_path, task)?;
    let report = ensemble::evaluate(&predictions, &table)?;
    print!("{}", report.to_aligned_text());
    if let Some(path) = out {
        fs::write(path, report.to_csv())?;
    }
    Ok(())
}
