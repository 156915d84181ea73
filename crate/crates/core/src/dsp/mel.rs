//! Mel filterbank construction, HTK convention.

use crate::mat::Mat;

use super::{DspConfig, DspError};

/// HTK Mel scale: `2595 * log10(1 + f / 700)`.
pub fn hz_to_mel(f_hz: f64) -> f64 {
    2595.0 * (1.0 + f_hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10.0f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular Mel filters over the one-sided spectrum bins.
#[derive(Clone, Debug)]
pub struct FilterBank {
    /// `n_mels x (n_fft/2 + 1)`, nonnegative, one triangle per row.
    pub weights: Mat,
    pub centers_hz: Vec<f64>,
}

/// Builds `n_mels` triangular filters with peaks 1 at centers equally
/// spaced on the Mel scale between `fmin_hz` and `fmax_hz`, edge filters
/// anchored at the range limits. No area normalization.
///
/// Fails with [`DspError::TooManyFilters`] when two adjacent centers
/// round to the same FFT bin, which means the grid cannot resolve them.
pub fn mel_filterbank(config: &DspConfig, sample_rate_hz: u32) -> Result<FilterBank, DspError> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    let fmax = config.fmax_hz.unwrap_or(nyquist);
    if !(config.fmin_hz >= 0.0 && config.fmin_hz < fmax && fmax <= nyquist) {
        return Err(DspError::BadConfig(format!(
            "need 0 <= fmin < fmax <= nyquist, got fmin={}, fmax={}, nyquist={}",
            config.fmin_hz, fmax, nyquist
        )));
    }
    if config.n_mels == 0 {
        return Err(DspError::BadConfig("n_mels must be >= 1".into()));
    }

    let n_bins = config.n_fft / 2 + 1;
    let bin_hz = sample_rate_hz as f64 / config.n_fft as f64;
    let mel_lo = hz_to_mel(config.fmin_hz);
    let mel_hi = hz_to_mel(fmax);
    // n_mels + 2 anchor points: fmin, the centers, fmax.
    let points_hz: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let centers_hz = points_hz[1..=config.n_mels].to_vec();

    for (i, pair) in centers_hz.windows(2).enumerate() {
        let b0 = (pair[0] / bin_hz).round() as i64;
        let b1 = (pair[1] / bin_hz).round() as i64;
        if b0 == b1 {
            return Err(DspError::TooManyFilters(format!(
                "centers {} ({:.2} Hz) and {} ({:.2} Hz) fall on FFT bin {}; \
                 increase n_fft or reduce n_mels",
                i,
                pair[0],
                i + 1,
                pair[1],
                b0
            )));
        }
    }

    let mut weights = Mat::zeros(config.n_mels, n_bins);
    for m in 0..config.n_mels {
        let left = points_hz[m];
        let center = points_hz[m + 1];
        let right = points_hz[m + 2];
        let row = weights.row_mut(m);
        let mut any = false;
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            if f > left && f <= center {
                *w = (f - left) / (center - left);
            } else if f > center && f < right {
                *w = (right - f) / (right - center);
            }
            any |= *w > 0.0;
        }
        if !any {
            return Err(DspError::TooManyFilters(format!(
                "filter {m} (center {:.2} Hz) covers no FFT bin",
                center
            )));
        }
    }

    Ok(FilterBank {
        weights,
        centers_hz,
    })
}
