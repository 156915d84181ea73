//! Compares the rayon-backed data-parallel paths against their
//! sequential twins: ensemble-member training and batch feature
//! extraction. Build with `--no-default-features` to measure the
//! sequential fallback on both sides.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use paralearn::corpus::AudioClip;
use paralearn::dataset::{ExampleLabels, LabeledExample};
use paralearn::dsp::{mel_spectrogram, DspConfig};
use paralearn::ensemble::{train_ensemble, train_ensemble_sequential, EnsembleSpec};
use paralearn::mat::Mat;
use paralearn::net::{Architecture, HeadKind, HeadSpec, Readout, TrainConfig};
use paralearn::parallel::{par_map, seq_map};
use paralearn::sampling::SamplerConfig;
use rand::{Rng, SeedableRng};

fn toy_data(n: usize) -> Vec<LabeledExample> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|i| {
            let class = i % 2;
            let mut features = Mat::zeros(12, 4);
            for v in features.data_mut() {
                *v = rng.random::<f64>() - 0.5 + class as f64 * 0.8;
            }
            LabeledExample {
                source_id: format!("bench{i}"),
                features,
                labels: ExampleLabels::Classes(
                    [("label".to_string(), class)].into_iter().collect(),
                ),
            }
        })
        .collect()
}

fn toy_spec(n_models: usize) -> EnsembleSpec {
    let arch = Architecture {
        input_bands: 4,
        conv_filters: 8,
        conv_kernel: 3,
        conv_stride: 1,
        lstm_units: 12,
        readout: Readout::FinalState,
        heads: vec![HeadSpec {
            name: "label".into(),
            kind: HeadKind::Classification { n_classes: 2 },
            ff_units: 12,
        }],
    };
    let tcfg = TrainConfig {
        epochs: 6,
        batch_size: 8,
        ..TrainConfig::for_arch(&arch)
    };
    EnsembleSpec {
        n_models,
        base_seed: 9,
        arch,
        tcfg,
        sampler: SamplerConfig::default(),
    }
}

fn bench_ensemble_training(c: &mut Criterion) {
    let data = toy_data(24);
    let mut group = c.benchmark_group("ensemble_train");
    group
        .sample_size(10)
        .warm_up_time(Duration::from_millis(300))
        .measurement_time(Duration::from_secs(2));
    for n_models in [4, 8] {
        let spec = toy_spec(n_models);
        group.bench_with_input(BenchmarkId::new("parallel", n_models), &spec, |b, spec| {
            b.iter(|| train_ensemble(spec, &data).unwrap())
        });
        group.bench_with_input(
            BenchmarkId::new("sequential", n_models),
            &spec,
            |b, spec| b.iter(|| train_ensemble_sequential(spec, &data).unwrap()),
        );
    }
    group.finish();
}

fn bench_batch_extraction(c: &mut Criterion) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let clips: Vec<AudioClip> = (0..16)
        .map(|i| AudioClip {
            samples: (0..16000).map(|_| rng.random::<f64>() - 0.5).collect(),
            sample_rate_hz: 16000,
            source_id: format!("clip{i}"),
        })
        .collect();
    let config = DspConfig {
        n_fft: 512,
        hop: 256,
        n_mels: 40,
        ..DspConfig::default()
    };

    let mut group = c.benchmark_group("batch_extract");
    group
        .sample_size(10)
        .warm_up_time(Duration::from_millis(300))
        .measurement_time(Duration::from_secs(2));
    group.bench_function("parallel", |b| {
        b.iter(|| par_map(&clips, |clip| mel_spectrogram(clip, &config).unwrap()))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| seq_map(&clips, |clip| mel_spectrogram(clip, &config).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, bench_ensemble_training, bench_batch_extraction);
criterion_main!(benches);
