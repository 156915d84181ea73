//! Deterministic single-model training: sampled minibatches, averaged
//! gradients, optional global-norm clipping, SGD or Adam.
//!
//! Every epoch logs the mean train loss per head plus a train metric
//! (UAR for classification heads, mean per-example Pearson r for
//! regression heads). Fixed seeds give a bit-identical trajectory.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ExampleLabels, LabeledExample};
use crate::losses::{self, LossSpec};
use crate::sampling::{
    upsample, upsample_multitask, MultitaskProbabilisticSampler, ProbabilisticSampler,
    SamplerConfig, SamplerMode,
};

use super::backward::{backward, HeadGrad};
use super::forward::{forward, HeadOutput, Mode};
use super::params::{init_params, ModelGrads, ModelParams};
use super::{Architecture, HeadKind, NetError};

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Loss per head name.
    pub losses: BTreeMap<String, LossSpec>,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// Conventional defaults with per-head losses filled from the head
    /// kinds: cross-entropy for classification, corr+MSE (weight 0.1)
    /// for sequences, MSE for scalars.
    pub fn for_arch(arch: &Architecture) -> Self {
        let losses = arch
            .heads
            .iter()
            .map(|h| {
                let spec = match h.kind {
                    HeadKind::Classification { .. } => LossSpec::CrossEntropy,
                    HeadKind::RegressionSequence => LossSpec::CorrPlusMse { weight: 0.1 },
                    HeadKind::RegressionScalar => LossSpec::Mse,
                };
                (h.name.clone(), spec)
            })
            .collect();
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            losses,
            init_seed: 0,
            shuffle_seed: 0,
            grad_clip: Some(5.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskEpochStats {
    pub task: String,
    pub mean_loss: f64,
    /// UAR for classification, mean per-example Pearson r for sequences,
    /// epoch-level r for scalars; `None` when undefined.
    pub metric: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub tasks: Vec<TaskEpochStats>,
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

enum OptState {
    Sgd,
    Adam(AdamState),
}

impl OptState {
    fn new(optimizer: &Optimizer, params: &ModelParams) -> Self {
        match *optimizer {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
                OptState::Adam(AdamState {
                    m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
                    v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
                    step: 0,
                    beta1,
                    beta2,
                    epsilon,
                })
            }
        }
    }

    fn apply(&mut self, params: &mut ModelParams, grads: &ModelGrads, lr: f64) {
        match self {
            OptState::Sgd => {
                for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (x, &d) in p.iter_mut().zip(g) {
                        *x -= lr * d;
                    }
                }
            }
            OptState::Adam(state) => {
                state.step += 1;
                let b1t = 1.0 - state.beta1.powi(state.step as i32);
                let b2t = 1.0 - state.beta2.powi(state.step as i32);
                for ((p, g), (m, v)) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(state.m.iter_mut().zip(state.v.iter_mut()))
                {
                    for i in 0..p.len() {
                        m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
                        v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
                        let m_hat = m[i] / b1t;
                        let v_hat = v[i] / b2t;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
                    }
                }
            }
        }
    }
}

/// In-place Fisher-Yates shuffle driven by the given generator.
fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

/// Index source for one epoch of training.
enum EpochSampler {
    /// Shuffled pass over the data.
    Plain {
        n: usize,
    },
    /// Shuffled pass over a fixed balanced multiset.
    Balanced {
        multiset: Vec<usize>,
    },
    /// Fresh draws from a persistent probabilistic sampler.
    Single(ProbabilisticSampler),
    Multi(MultitaskProbabilisticSampler),
}

impl EpochSampler {
    fn epoch_indices(&mut self, n_draws: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        match self {
            EpochSampler::Plain { n } => {
                let mut order: Vec<usize> = (0..*n).collect();
                shuffle(&mut order, rng);
                order
            }
            EpochSampler::Balanced { multiset } => {
                let mut order = multiset.clone();
                shuffle(&mut order, rng);
                order
            }
            EpochSampler::Single(sampler) => sampler.draw_n(n_draws),
            EpochSampler::Multi(sampler) => sampler.draw_n(n_draws),
        }
    }
}

/// Classification labels per head, extracted and validated up front.
fn classification_labels(
    data: &[LabeledExample],
    arch: &Architecture,
) -> Result<Vec<Vec<usize>>, NetError> {
    let mut per_head = Vec::with_capacity(arch.heads.len());
    for head in &arch.heads {
        if !matches!(head.kind, HeadKind::Classification { .. }) {
            per_head.push(Vec::new());
            continue;
        }
        let mut labels = Vec::with_capacity(data.len());
        for example in data {
            let label =
                example
                    .class_label(&head.name)
                    .ok_or_else(|| NetError::MissingTaskLabel {
                        task: head.name.clone(),
                        source_id: example.source_id.clone(),
                    })?;
            if let HeadKind::Classification { n_classes } = head.kind {
                if label >= n_classes {
                    return Err(NetError::BadConfig(format!(
                        "label {label} out of range for task '{}' with {n_classes} classes",
                        head.name
                    )));
                }
            }
            labels.push(label);
        }
        per_head.push(labels);
    }
    Ok(per_head)
}

fn build_sampler(
    sampler: &SamplerConfig,
    arch: &Architecture,
    labels_per_head: &[Vec<usize>],
    n_examples: usize,
) -> Result<EpochSampler, NetError> {
    if sampler.mode == SamplerMode::None {
        return Ok(EpochSampler::Plain { n: n_examples });
    }
    let class_heads: Vec<(usize, usize)> = arch
        .heads
        .iter()
        .enumerate()
        .filter_map(|(i, h)| match h.kind {
            HeadKind::Classification { n_classes } => Some((i, n_classes)),
            _ => None,
        })
        .collect();
    if class_heads.len() != arch.heads.len() {
        return Err(NetError::BadConfig(
            "resampling needs classification labels on every head".into(),
        ));
    }
    match (sampler.mode, class_heads.len()) {
        (SamplerMode::Upsample, 1) => {
            let (head, n_classes) = class_heads[0];
            Ok(EpochSampler::Balanced {
                multiset: upsample(&labels_per_head[head], n_classes)?,
            })
        }
        (SamplerMode::Upsample, _) => {
            let tuples = label_tuples(labels_per_head, &class_heads, n_examples);
            Ok(EpochSampler::Balanced {
                multiset: upsample_multitask(&tuples)?,
            })
        }
        (SamplerMode::Probabilistic, 1) => {
            let (head, n_classes) = class_heads[0];
            Ok(EpochSampler::Single(ProbabilisticSampler::new(
                &labels_per_head[head],
                n_classes,
                sampler.lambda,
                sampler.seed,
            )?))
        }
        (SamplerMode::Probabilistic, _) => {
            let tuples = label_tuples(labels_per_head, &class_heads, n_examples);
            let n_classes: Vec<usize> = class_heads.iter().map(|&(_, n)| n).collect();
            Ok(EpochSampler::Multi(MultitaskProbabilisticSampler::new(
                &tuples,
                &n_classes,
                sampler.lambda,
                sampler.seed,
                sampler.max_rejects,
            )?))
        }
        (SamplerMode::None, _) => unreachable!(),
    }
}

fn label_tuples(
    labels_per_head: &[Vec<usize>],
    class_heads: &[(usize, usize)],
    n_examples: usize,
) -> Vec<Vec<usize>> {
    (0..n_examples)
        .map(|i| {
            class_heads
                .iter()
                .map(|&(h, _)| labels_per_head[h][i])
                .collect()
        })
        .collect()
}

/// Per-head loss and output gradient for one example.
fn example_loss(
    head_idx: usize,
    arch: &Architecture,
    output: &HeadOutput,
    example: &LabeledExample,
    spec: &LossSpec,
) -> Result<(f64, HeadGrad), NetError> {
    let head = &arch.heads[head_idx];
    match (&head.kind, output) {
        (HeadKind::Classification { .. }, HeadOutput::Posterior(p)) => {
            let label =
                example
                    .class_label(&head.name)
                    .ok_or_else(|| NetError::MissingTaskLabel {
                        task: head.name.clone(),
                        source_id: example.source_id.clone(),
                    })?;
            let (loss, grad) = losses::cross_entropy(p, label)?;
            Ok((loss, HeadGrad::Logits(grad)))
        }
        (HeadKind::RegressionScalar, HeadOutput::Scalar(v)) => {
            let target = match &example.labels {
                ExampleLabels::Scalar(t) => *t,
                _ => {
                    return Err(NetError::MissingTaskLabel {
                        task: head.name.clone(),
                        source_id: example.source_id.clone(),
                    })
                }
            };
            let (loss, grad) = losses::mse(&[*v], &[target])?;
            Ok((loss, HeadGrad::Scalar(grad[0])))
        }
        (HeadKind::RegressionSequence, HeadOutput::Sequence(seq)) => {
            let target = match &example.labels {
                ExampleLabels::Frames(t) => t,
                _ => {
                    return Err(NetError::MissingTaskLabel {
                        task: head.name.clone(),
                        source_id: example.source_id.clone(),
                    })
                }
            };
            // Alignment leaves the two sequences within a few frames of
            // each other; score the overlap.
            let n = seq.len().min(target.len());
            let (loss, grad) = spec.eval_sequence(&seq[..n], &target[..n])?;
            let mut padded = grad;
            padded.resize(seq.len(), 0.0);
            Ok((loss, HeadGrad::Sequence(padded)))
        }
        (kind, out) => Err(NetError::ShapeMismatch(format!(
            "head '{}' of kind {kind:?} produced {out:?}",
            head.name
        ))),
    }
}

fn validate(
    arch: &Architecture,
    data: &[LabeledExample],
    tcfg: &TrainConfig,
) -> Result<(), NetError> {
    arch.validate()?;
    if data.is_empty() {
        return Err(NetError::NoData);
    }
    if tcfg.epochs == 0 {
        return Err(NetError::BadConfig("epochs must be >= 1".into()));
    }
    if tcfg.batch_size == 0 {
        return Err(NetError::BadConfig("batch_size must be >= 1".into()));
    }
    if tcfg.learning_rate.is_nan() || tcfg.learning_rate <= 0.0 {
        return Err(NetError::BadConfig("learning_rate must be > 0".into()));
    }
    for head in &arch.heads {
        let spec = tcfg
            .losses
            .get(&head.name)
            .ok_or_else(|| NetError::BadConfig(format!("no loss for head '{}'", head.name)))?;
        match (&head.kind, spec) {
            (HeadKind::Classification { .. }, LossSpec::CrossEntropy) => {}
            (HeadKind::Classification { .. }, other) => {
                return Err(NetError::BadConfig(format!(
                    "head '{}': classification requires cross_entropy, got {other:?}",
                    head.name
                )))
            }
            (_, LossSpec::CrossEntropy) => {
                return Err(NetError::BadConfig(format!(
                    "head '{}': cross_entropy needs a classification head",
                    head.name
                )))
            }
            (HeadKind::RegressionScalar, LossSpec::Corr | LossSpec::CorrPlusMse { .. }) => {
                return Err(NetError::BadConfig(format!(
                    "head '{}': correlation is undefined for scalar targets",
                    head.name
                )))
            }
            _ => {}
        }
    }
    if arch.heads.len() > 1
        && !arch
            .heads
            .iter()
            .all(|h| matches!(h.kind, HeadKind::Classification { .. }))
    {
        return Err(NetError::BadConfig(
            "multi-head training requires classification labels on every head".into(),
        ));
    }
    Ok(())
}

/// Trains one model. The joint objective is the unweighted sum of the
/// per-head losses; gradients are averaged per minibatch. Deterministic
/// given `init_seed`, `shuffle_seed` and the sampler seed.
pub fn train(
    arch: &Architecture,
    data: &[LabeledExample],
    sampler: &SamplerConfig,
    tcfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochLog>), NetError> {
    validate(arch, data, tcfg)?;
    let labels_per_head = classification_labels(data, arch)?;
    let mut epoch_sampler = build_sampler(sampler, arch, &labels_per_head, data.len())?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.shuffle_seed);

    let mut params = init_params(arch, tcfg.init_seed);
    let mut opt = OptState::new(&tcfg.optimizer, &params);
    let loss_specs: Vec<LossSpec> = arch
        .heads
        .iter()
        .map(|h| tcfg.losses[&h.name].clone())
        .collect();

    let mut log = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let indices = epoch_sampler.epoch_indices(data.len(), &mut shuffle_rng);
        let mut loss_sums = vec![0.0; arch.heads.len()];
        let mut loss_counts = vec![0usize; arch.heads.len()];
        let mut confusions: Vec<Vec<Vec<usize>>> = arch
            .heads
            .iter()
            .map(|h| match h.kind {
                HeadKind::Classification { n_classes } => vec![vec![0; n_classes]; n_classes],
                _ => Vec::new(),
            })
            .collect();
        let mut r_values: Vec<Vec<f64>> = vec![Vec::new(); arch.heads.len()];
        let mut scalar_pairs: Vec<(Vec<f64>, Vec<f64>)> =
            vec![(Vec::new(), Vec::new()); arch.heads.len()];

        for (batch_idx, batch) in indices.chunks(tcfg.batch_size).enumerate() {
            let mut batch_grads = ModelGrads::zeros(arch);
            for &example_idx in batch {
                let example = &data[example_idx];
                let (outputs, cache) = forward(&params, &example.features, Mode::Train)?;
                let cache = cache.expect("train mode always caches");

                let mut head_grads = Vec::with_capacity(outputs.len());
                let mut example_total = 0.0;
                for (h, output) in outputs.iter().enumerate() {
                    let (loss, grad) = example_loss(h, arch, output, example, &loss_specs[h])?;
                    example_total += loss;
                    loss_sums[h] += loss;
                    loss_counts[h] += 1;
                    head_grads.push(grad);

                    match output {
                        HeadOutput::Posterior(p) => {
                            let label = example.class_label(&arch.heads[h].name).unwrap();
                            confusions[h][label][losses::argmax(p)] += 1;
                        }
                        HeadOutput::Sequence(seq) => {
                            if let ExampleLabels::Frames(t) = &example.labels {
                                let n = seq.len().min(t.len());
                                if let Ok(r) = losses::pearson_r(&seq[..n], &t[..n]) {
                                    r_values[h].push(r);
                                }
                            }
                        }
                        HeadOutput::Scalar(v) => {
                            if let ExampleLabels::Scalar(t) = &example.labels {
                                scalar_pairs[h].0.push(*v);
                                scalar_pairs[h].1.push(*t);
                            }
                        }
                    }
                }
                if !example_total.is_finite() {
                    return Err(NetError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                let (grads, _) = backward(&params, &cache, &head_grads)?;
                batch_grads.add_assign(&grads);
            }

            batch_grads.scale(1.0 / batch.len() as f64);
            if let Some(clip) = tcfg.grad_clip {
                let norm = batch_grads.global_norm();
                if norm > clip {
                    batch_grads.scale(clip / norm);
                }
            }
            opt.apply(&mut params, &batch_grads, tcfg.learning_rate);
        }

        let tasks = arch
            .heads
            .iter()
            .enumerate()
            .map(|(h, head)| {
                let metric = match head.kind {
                    HeadKind::Classification { .. } => losses::uar(&confusions[h]).ok(),
                    HeadKind::RegressionSequence => {
                        if r_values[h].is_empty() {
                            None
                        } else {
                            Some(r_values[h].iter().sum::<f64>() / r_values[h].len() as f64)
                        }
                    }
                    HeadKind::RegressionScalar => {
                        losses::pearson_r(&scalar_pairs[h].0, &scalar_pairs[h].1).ok()
                    }
                };
                TaskEpochStats {
                    task: head.name.clone(),
                    mean_loss: loss_sums[h] / loss_counts[h].max(1) as f64,
                    metric,
                }
            })
            .collect();
        log.push(EpochLog { epoch, tasks });
    }

    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;
    use crate::net::{HeadSpec, Readout};

    fn toy_arch(n_classes: usize) -> Architecture {
        Architecture {
            input_bands: 2,
            conv_filters: 4,
            conv_kernel: 3,
            conv_stride: 1,
            lstm_units: 6,
            readout: Readout::FinalState,
            heads: vec![HeadSpec {
                name: "label".into(),
                kind: HeadKind::Classification { n_classes },
                ff_units: 6,
            }],
        }
    }

    /// Linearly separable toy corpus: class means +/- 0.8 on band 0.
    fn toy_corpus(n: usize, seed: u64) -> Vec<LabeledExample> {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let class = i % 2;
                let mean = if class == 0 { -0.8 } else { 0.8 };
                let mut features = Mat::zeros(8, 2);
                for t in 0..8 {
                    features[(t, 0)] = mean + 0.1 * (rng.random::<f64>() - 0.5);
                    features[(t, 1)] = 0.2 * (rng.random::<f64>() - 0.5);
                }
                LabeledExample {
                    source_id: format!("toy{i:02}"),
                    features,
                    labels: ExampleLabels::Classes(
                        [("label".to_string(), class)].into_iter().collect(),
                    ),
                }
            })
            .collect()
    }

    fn quick_config(arch: &Architecture, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: 0.01,
            init_seed: 11,
            shuffle_seed: 12,
            ..TrainConfig::for_arch(arch)
        }
    }

    #[test]
    fn overfits_separable_toy_corpus() {
        let arch = toy_arch(2);
        let data = toy_corpus(20, 1);
        let tcfg = quick_config(&arch, 200);
        let (params, log) = train(&arch, &data, &SamplerConfig::default(), &tcfg).unwrap();

        let mut confusion = vec![vec![0usize; 2]; 2];
        for example in &data {
            let outputs = super::super::predict(&params, &example.features).unwrap();
            let HeadOutput::Posterior(p) = &outputs[0] else {
                panic!("expected posterior")
            };
            confusion[example.class_label("label").unwrap()][losses::argmax(p)] += 1;
        }
        assert_eq!(
            losses::uar(&confusion).unwrap(),
            1.0,
            "log: {:?}",
            log.last()
        );
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let arch = toy_arch(2);
        let data = toy_corpus(12, 2);
        let tcfg = quick_config(&arch, 50);
        let (_, log) = train(&arch, &data, &SamplerConfig::default(), &tcfg).unwrap();
        assert!(log[49].tasks[0].mean_loss < log[0].tasks[0].mean_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let arch = toy_arch(2);
        let data = toy_corpus(8, 3);
        let tcfg = quick_config(&arch, 5);
        let (a, log_a) = train(&arch, &data, &SamplerConfig::default(), &tcfg).unwrap();
        let (b, log_b) = train(&arch, &data, &SamplerConfig::default(), &tcfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a[4].tasks[0].mean_loss, log_b[4].tasks[0].mean_loss);

        let other = TrainConfig {
            init_seed: 99,
            ..tcfg
        };
        let (c, _) = train(&arch, &data, &SamplerConfig::default(), &other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_configs() {
        let arch = toy_arch(2);
        let data = toy_corpus(4, 4);
        let mut tcfg = quick_config(&arch, 1);
        tcfg.epochs = 0;
        assert!(matches!(
            train(&arch, &data, &SamplerConfig::default(), &tcfg),
            Err(NetError::BadConfig(_))
        ));
        let tcfg = quick_config(&arch, 1);
        assert!(matches!(
            train(&arch, &[], &SamplerConfig::default(), &tcfg),
            Err(NetError::NoData)
        ));

        // Classification head with a regression loss.
        let mut tcfg = quick_config(&arch, 1);
        tcfg.losses.insert("label".into(), LossSpec::Mse);
        assert!(matches!(
            train(&arch, &data, &SamplerConfig::default(), &tcfg),
            Err(NetError::BadConfig(_))
        ));
    }

    #[test]
    fn missing_task_label_is_reported() {
        let arch = toy_arch(2);
        let mut data = toy_corpus(4, 5);
        data[2].labels = ExampleLabels::Classes(BTreeMap::new());
        let tcfg = quick_config(&arch, 1);
        assert!(matches!(
            train(&arch, &data, &SamplerConfig::default(), &tcfg),
            Err(NetError::MissingTaskLabel { task, .. }) if task == "label"
        ));
    }

    #[test]
    fn upsample_mode_trains_on_balanced_multiset() {
        let arch = toy_arch(2);
        // 6 of class 0, 2 of class 1.
        let mut data = toy_corpus(8, 6);
        for (i, example) in data.iter_mut().enumerate() {
            let class = usize::from(i >= 6);
            example.labels =
                ExampleLabels::Classes([("label".to_string(), class)].into_iter().collect());
        }
        let sampler = SamplerConfig {
            mode: SamplerMode::Upsample,
            ..SamplerConfig::default()
        };
        let tcfg = quick_config(&arch, 3);
        let (_, log) = train(&arch, &data, &sampler, &tcfg).unwrap();
        // The balanced multiset has 12 entries: 6 + 6.
        assert_eq!(log.len(), 3);
    }

    #[test]
    fn probabilistic_mode_is_seed_deterministic() {
        let arch = toy_arch(2);
        let data = toy_corpus(10, 7);
        let sampler = SamplerConfig {
            mode: SamplerMode::Probabilistic,
            lambda: 0.6,
            seed: 5,
            max_rejects: 100,
        };
        let tcfg = quick_config(&arch, 3);
        let (a, _) = train(&arch, &data, &sampler, &tcfg).unwrap();
        let (b, _) = train(&arch, &data, &sampler, &tcfg).unwrap();
        assert_eq!(a, b);
    }
}
