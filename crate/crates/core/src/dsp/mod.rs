//! DSP front-end: preemphasis, Butterworth low-pass, (log-)Mel
//! spectrograms, lowest-band extraction and raw-audio framing.
//!
//! Conventions, pinned here and checked by tests:
//! - Mel scale is HTK (`2595 * log10(1 + f/700)`), triangular filters,
//!   no area normalization.
//! - Hann window is periodic: `0.5 - 0.5 cos(2 pi n / N)`.
//! - Power spectrum is the unnormalized squared DFT magnitude over bins
//!   `0..n_fft/2`, so two-sided energy equals `n_fft` times the windowed
//!   frame energy (Parseval).
//! - Log compression is the natural log with a positive floor.

mod butterworth;
mod mel;
mod plfb;

use std::io;
use std::path::PathBuf;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::corpus::AudioClip;
use crate::mat::Mat;

pub use butterworth::{analytic_magnitude, butterworth_lowpass};
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, FilterBank};
pub use plfb::{read_plfb, write_plfb};

#[derive(Debug, Error)]
pub enum DspError {
    #[error("signal is empty")]
    EmptySignal,
    #[error("cutoff {cutoff_hz} Hz out of range for sample rate {sample_rate_hz} Hz")]
    CutoffOutOfRange { cutoff_hz: f64, sample_rate_hz: u32 },
    #[error("bad DSP config: {0}")]
    BadConfig(String),
    #[error("too many filters: {0}")]
    TooManyFilters(String),
    #[error("clip too short: {len} samples, need at least n_fft = {n_fft}")]
    ClipTooShort { len: usize, n_fft: usize },
    #[error("k = {k} out of range for {bands} bands")]
    KOutOfRange { k: usize, bands: usize },
    #[error("sample rate mismatch: expected {expected} Hz, got {got} Hz")]
    SampleRateMismatch { expected: u32, got: u32 },
    #[error("corrupt feature file: {0}")]
    CorruptFeatureFile(String),
    #[error("io error on {path}: {source}")]
    IoAt { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowFn {
    Hann,
    Rectangular,
}

/// Tunables of the spectral front-end.
#[derive(Clone, Debug)]
pub struct DspConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub window_fn: WindowFn,
    pub n_mels: usize,
    pub fmin_hz: f64,
    /// `None` means the Nyquist frequency of the clip being processed.
    pub fmax_hz: Option<f64>,
    pub preemphasis_h: f64,
    pub butterworth_order: usize,
    pub butterworth_cutoff_hz: f64,
    pub log_floor: f64,
    /// When set, clips at any other rate are rejected.
    pub expected_sample_rate_hz: Option<u32>,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            n_fft: 2048,
            hop: 512,
            window_fn: WindowFn::Hann,
            n_mels: 64,
            fmin_hz: 0.0,
            fmax_hz: None,
            preemphasis_h: 1.0,
            butterworth_order: 5,
            butterworth_cutoff_hz: 400.0,
            log_floor: 1e-10,
            expected_sample_rate_hz: None,
        }
    }
}

impl DspConfig {
    fn validate(&self, sample_rate_hz: u32) -> Result<(), DspError> {
        if self.n_fft == 0 || self.hop == 0 || self.hop > self.n_fft {
            return Err(DspError::BadConfig(format!(
                "need 0 < hop <= n_fft, got hop={}, n_fft={}",
                self.hop, self.n_fft
            )));
        }
        if self.log_floor.is_nan() || self.log_floor <= 0.0 {
            return Err(DspError::BadConfig("log_floor must be positive".into()));
        }
        if let Some(expected) = self.expected_sample_rate_hz {
            if expected != sample_rate_hz {
                return Err(DspError::SampleRateMismatch {
                    expected,
                    got: sample_rate_hz,
                });
            }
        }
        Ok(())
    }
}

/// Frames x bands feature matrix with its frame rate and band centers.
///
/// Log-Mel energies on the spectral path; the raw-audio path reuses the
/// same shape with sample frames as rows and in-frame sample offsets as
/// "centers".
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Mat,
    pub frame_rate_hz: f64,
    pub band_centers_hz: Vec<f64>,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn bands(&self) -> usize {
        self.values.cols()
    }
}

/// First-order differencing `y[n] = x[n] - h x[n-1]`, `y[0] = x[0]`.
pub fn preemphasize(signal: &[f64], h: f64) -> Result<Vec<f64>, DspError> {
    if signal.is_empty() {
        return Err(DspError::EmptySignal);
    }
    let mut out = Vec::with_capacity(signal.len());
    out.push(signal[0]);
    for n in 1..signal.len() {
        out.push(signal[n] - h * signal[n - 1]);
    }
    Ok(out)
}

/// Squared DFT magnitude of one already-windowed frame, bins `0..N/2`.
/// The convention behind every spectrogram cell; unnormalized, so the
/// two-sided sum equals `n_fft` times the frame energy.
pub fn power_spectrum(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    let mut buf: Vec<Complex64> = frame.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

fn window_values(kind: WindowFn, n: usize) -> Vec<f64> {
    match kind {
        WindowFn::Hann => (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect(),
        WindowFn::Rectangular => vec![1.0; n],
    }
}

/// Log-Mel spectrogram of a clip.
///
/// For `len >= n_fft` there are `1 + (len - n_fft) / hop` frames; frame
/// `t` is `ln(max(log_floor, filterbank . power_spectrum(window * x[t*hop ..])))`.
pub fn mel_spectrogram(clip: &AudioClip, config: &DspConfig) -> Result<MelSpectrogram, DspError> {
    config.validate(clip.sample_rate_hz)?;
    let len = clip.samples.len();
    if len < config.n_fft {
        return Err(DspError::ClipTooShort {
            len,
            n_fft: config.n_fft,
        });
    }
    let bank = mel_filterbank(config, clip.sample_rate_hz)?;
    let window = window_values(config.window_fn, config.n_fft);
    let n_frames = 1 + (len - config.n_fft) / config.hop;

    let mut fft_buf = vec![Complex64::new(0.0, 0.0); config.n_fft];
    let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
    let mut values = Mat::zeros(n_frames, config.n_mels);
    let mut power = vec![0.0; config.n_fft / 2 + 1];
    for t in 0..n_frames {
        let start = t * config.hop;
        for (i, slot) in fft_buf.iter_mut().enumerate() {
            *slot = Complex64::new(clip.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut fft_buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = fft_buf[k].norm_sqr();
        }
        let energies = bank.weights.matvec(&power);
        let row = values.row_mut(t);
        for (cell, e) in row.iter_mut().zip(&energies) {
            *cell = e.max(config.log_floor).ln();
        }
    }

    Ok(MelSpectrogram {
        values,
        frame_rate_hz: clip.sample_rate_hz as f64 / config.hop as f64,
        band_centers_hz: bank.centers_hz,
    })
}

/// Keeps only the `k` lowest bands (columns `0..k`) and their centers.
pub fn lowest_k_bands(spec: &MelSpectrogram, k: usize) -> Result<MelSpectrogram, DspError> {
    let bands = spec.bands();
    if k == 0 || k > bands {
        return Err(DspError::KOutOfRange { k, bands });
    }
    let mut values = Mat::zeros(spec.frames(), k);
    for t in 0..spec.frames() {
        values.row_mut(t).copy_from_slice(&spec.values.row(t)[..k]);
    }
    Ok(MelSpectrogram {
        values,
        frame_rate_hz: spec.frame_rate_hz,
        band_centers_hz: spec.band_centers_hz[..k].to_vec(),
    })
}

/// Low-frequency enhancement: preemphasis, then the Butterworth low-pass,
/// in that order, with the coefficients from `config`.
pub fn preprocess_low_freq(clip: &AudioClip, config: &DspConfig) -> Result<AudioClip, DspError> {
    config.validate(clip.sample_rate_hz)?;
    let emphasized = preemphasize(&clip.samples, config.preemphasis_h)?;
    let filtered = butterworth_lowpass(
        &emphasized,
        config.butterworth_order,
        config.butterworth_cutoff_hz,
        clip.sample_rate_hz,
    )?;
    Ok(AudioClip {
        samples: filtered,
        sample_rate_hz: clip.sample_rate_hz,
        source_id: clip.source_id.clone(),
    })
}

/// Cuts raw audio into non-overlapping `frame_len`-sample rows so the
/// conv-LSTM trunk can consume the waveform directly. The trailing
/// partial frame is dropped; band centers are sample offsets in frames.
pub fn frame_raw_audio(clip: &AudioClip, frame_len: usize) -> Result<MelSpectrogram, DspError> {
    if frame_len == 0 {
        return Err(DspError::BadConfig("raw frame length must be >= 1".into()));
    }
    let n_frames = clip.samples.len() / frame_len;
    if n_frames == 0 {
        return Err(DspError::ClipTooShort {
            len: clip.samples.len(),
            n_fft: frame_len,
        });
    }
    let mut values = Mat::zeros(n_frames, frame_len);
    for t in 0..n_frames {
        values
            .row_mut(t)
            .copy_from_slice(&clip.samples[t * frame_len..(t + 1) * frame_len]);
    }
    Ok(MelSpectrogram {
        values,
        frame_rate_hz: clip.sample_rate_hz as f64 / frame_len as f64,
        band_centers_hz: (0..frame_len).map(|i| i as f64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn clip(samples: Vec<f64>, rate: u32) -> AudioClip {
        AudioClip {
            samples,
            sample_rate_hz: rate,
            source_id: "dsp-test".into(),
        }
    }

    fn small_config() -> DspConfig {
        DspConfig {
            n_fft: 256,
            hop: 128,
            n_mels: 20,
            ..DspConfig::default()
        }
    }

    #[test]
    fn preemphasis_examples() {
        assert_eq!(
            preemphasize(&[1.0, 1.0, 1.0], 1.0).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        let x = vec![0.3, -0.2, 0.9];
        assert_eq!(preemphasize(&x, 0.0).unwrap(), x);
        // Direct formula by hand.
        assert_eq!(
            preemphasize(&[1.0, 2.0, 4.0], 0.5).unwrap(),
            vec![1.0, 1.5, 3.0]
        );
        assert!(matches!(preemphasize(&[], 1.0), Err(DspError::EmptySignal)));
    }

    #[test]
    fn zero_clip_hits_log_floor() {
        let cfg = small_config();
        let spec = mel_spectrogram(&clip(vec![0.0; 512], 16000), &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(spec.values.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn frame_count_formula() {
        let cfg = small_config();
        let spec = mel_spectrogram(&clip(vec![0.1; 256], 16000), &cfg).unwrap();
        assert_eq!(spec.frames(), 1);
        let spec = mel_spectrogram(&clip(vec![0.1; 256 + 3 * 128], 16000), &cfg).unwrap();
        assert_eq!(spec.frames(), 4);
        assert_eq!(spec.frame_rate_hz, 16000.0 / 128.0);
        assert!(matches!(
            mel_spectrogram(&clip(vec![0.1; 100], 16000), &cfg),
            Err(DspError::ClipTooShort { .. })
        ));
    }

    #[test]
    fn sine_at_center_dominates_its_band() {
        let cfg = small_config();
        let rate = 16000u32;
        let bank = mel_filterbank(&cfg, rate).unwrap();
        let f0 = bank.centers_hz[10];
        let samples: Vec<f64> = (0..2048)
            .map(|i| (2.0 * PI * f0 * i as f64 / rate as f64).sin())
            .collect();
        let spec = mel_spectrogram(&clip(samples, rate), &cfg).unwrap();
        for t in 0..spec.frames() {
            let row = spec.values.row(t);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!(
                (best as i64 - 10).unsigned_abs() <= 1,
                "frame {t}: band {best} won instead of 10"
            );
            assert!(row[10] >= row[0] && row[10] >= row[19]);
        }
    }

    /// Direct O(N^2) DFT, the independent oracle for the FFT-backed path.
    fn direct_power_spectrum(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..n / 2 + 1)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (i, &x) in frame.iter().enumerate() {
                    let phase = -2.0 * PI * (k * i) as f64 / n as f64;
                    re += x * phase.cos();
                    im += x * phase.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn fft_power_matches_direct_dft() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let frame: Vec<f64> = (0..64).map(|_| rng.random::<f64>() - 0.5).collect();
        let fast = power_spectrum(&frame);
        let slow = direct_power_spectrum(&frame);
        for (k, (a, b)) in fast.iter().zip(&slow).enumerate() {
            assert!(
                (a - b).abs() <= 1e-9 * b.abs().max(1.0),
                "bin {k}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn parseval_energy_identity() {
        // Convention: power = |X_k|^2 over bins 0..N/2, so the two-sided
        // sum divided by N equals the windowed-frame energy.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 256;
        let frame: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let power = power_spectrum(&frame);
        let two_sided: f64 = power[0] + power[n / 2] + 2.0 * power[1..n / 2].iter().sum::<f64>();
        let energy: f64 = frame.iter().map(|x| x * x).sum();
        assert!((two_sided / n as f64 - energy).abs() / energy < 1e-6);
    }

    #[test]
    fn spectrogram_is_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..1000).map(|_| rng.random::<f64>() - 0.5).collect();
        let cfg = small_config();
        let a = mel_spectrogram(&clip(samples.clone(), 16000), &cfg).unwrap();
        let b = mel_spectrogram(&clip(samples, 16000), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lowest_k_examples_and_composition() {
        let cfg = DspConfig {
            n_fft: 2048,
            hop: 512,
            n_mels: 200,
            fmax_hz: Some(8000.0),
            ..DspConfig::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..4096).map(|_| rng.random::<f64>() - 0.5).collect();
        let spec = mel_spectrogram(&clip(samples, 16000), &cfg).unwrap();

        let identity = lowest_k_bands(&spec, 200).unwrap();
        assert_eq!(identity, spec);

        let ten = lowest_k_bands(&spec, 10).unwrap();
        assert_eq!(ten.bands(), 10);
        assert_eq!(ten.band_centers_hz, spec.band_centers_hz[..10].to_vec());
        assert_eq!(ten.frames(), spec.frames());

        // lowest_k then lowest_j == lowest_j for j <= k.
        let via_ten = lowest_k_bands(&ten, 4).unwrap();
        let direct = lowest_k_bands(&spec, 4).unwrap();
        assert_eq!(via_ten, direct);

        assert!(matches!(
            lowest_k_bands(&spec, 0),
            Err(DspError::KOutOfRange { .. })
        ));
        assert!(matches!(
            lowest_k_bands(&spec, 201),
            Err(DspError::KOutOfRange { .. })
        ));
    }

    #[test]
    fn near_identity_preprocess() {
        // h = 0 and cutoff near Nyquist passes the signal through.
        let rate = 16000u32;
        let cfg = DspConfig {
            preemphasis_h: 0.0,
            butterworth_cutoff_hz: 7900.0,
            ..DspConfig::default()
        };
        let samples: Vec<f64> = (0..4000)
            .map(|i| (2.0 * PI * 200.0 * i as f64 / rate as f64).sin() * 0.5)
            .collect();
        let out = preprocess_low_freq(&clip(samples.clone(), rate), &cfg).unwrap();
        let err: f64 = out.samples[2000..]
            .iter()
            .zip(&samples[2000..])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = samples[2000..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(err / norm < 0.01, "relative deviation {}", err / norm);
    }

    #[test]
    fn constant_signal_preprocess_is_finite() {
        let cfg = DspConfig::default();
        let out = preprocess_low_freq(&clip(vec![1.0; 800], 16000), &cfg).unwrap();
        assert_eq!(out.samples.len(), 800);
        assert!(out.samples.iter().all(|s| s.is_finite()));
        // Preemphasis with h = 1 turns the constant into an impulse, so
        // the tail decays toward zero.
        assert!(out.samples[700..].iter().all(|s| s.abs() < 1e-3));
    }

    #[test]
    fn white_noise_low_freq_suppression() {
        // Periodogram oracle: mean output power above 800 Hz sits at
        // least 25 dB below the mean power around 100 Hz.
        let rate = 16000u32;
        let n = 65536usize;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let samples: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let out = preprocess_low_freq(&clip(samples, rate), &DspConfig::default()).unwrap();

        let mut buf: Vec<Complex64> = out
            .samples
            .iter()
            .map(|&x| Complex64::new(x, 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let bin_hz = rate as f64 / n as f64;
        let band_mean = |lo: f64, hi: f64| {
            let (k0, k1) = ((lo / bin_hz) as usize, (hi / bin_hz) as usize);
            buf[k0..=k1].iter().map(|c| c.norm_sqr()).sum::<f64>() / (k1 - k0 + 1) as f64
        };
        let low = band_mean(80.0, 120.0);
        let high = band_mean(800.0, rate as f64 / 2.0 - bin_hz);
        let ratio_db = 10.0 * (low / high).log10();
        assert!(ratio_db >= 25.0, "only {ratio_db:.1} dB of suppression");
    }

    #[test]
    fn raw_framing_shapes() {
        let c = clip((0..1300).map(|i| i as f64 / 1300.0).collect(), 16000);
        let spec = frame_raw_audio(&c, 640).unwrap();
        assert_eq!(spec.frames(), 2); // 20-sample tail dropped
        assert_eq!(spec.bands(), 640);
        assert_eq!(spec.frame_rate_hz, 25.0);
        assert_eq!(spec.values[(1, 0)], c.samples[640]);
        assert!(matches!(
            frame_raw_audio(&clip(vec![0.0; 10], 16000), 640),
            Err(DspError::ClipTooShort { .. })
        ));
    }

    #[test]
    fn sample_rate_mismatch_rejected() {
        let cfg = DspConfig {
            expected_sample_rate_hz: Some(16000),
            ..small_config()
        };
        assert!(matches!(
            mel_spectrogram(&clip(vec![0.0; 512], 8000), &cfg),
            Err(DspError::SampleRateMismatch {
                expected: 16000,
                got: 8000
            })
        ));
    }
}
