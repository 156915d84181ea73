//! Butterworth low-pass filtering via cascaded second-order sections.
//!
//! The analog prototype poles are scaled by the prewarped cutoff and
//! mapped through the bilinear transform, so the magnitude at the cutoff
//! frequency is exactly 1/sqrt(2). Filtering is causal single-pass
//! (Direct Form II transposed) from zero initial state.

use std::f64::consts::PI;

use super::DspError;

/// One digital biquad: y-side coefficients normalized (a0 = 1).
#[derive(Clone, Copy, Debug)]
struct Sos {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

/// Designs the cascade for an `order`-pole low-pass at `cutoff_hz`.
fn design_lowpass(order: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Vec<Sos> {
    debug_assert!(order >= 1);
    let k = 2.0 * sample_rate_hz;
    // Prewarp so the bilinear transform lands the -3 dB point on cutoff_hz.
    let warped = k * (PI * cutoff_hz / sample_rate_hz).tan();

    let mut sections = Vec::with_capacity(order.div_ceil(2));
    // Conjugate pole pairs of the analog prototype, unit circle, left half.
    for pair in 0..order / 2 {
        let theta = PI * (2.0 * pair as f64 + order as f64 + 1.0) / (2.0 * order as f64);
        // (s - p)(s - conj p) = s^2 + c1 s + c0 with p = warped * e^{i theta}.
        let c1 = -2.0 * warped * theta.cos();
        let c0 = warped * warped;
        let a0 = k * k + c1 * k + c0;
        sections.push(Sos {
            b0: c0 / a0,
            b1: 2.0 * c0 / a0,
            b2: c0 / a0,
            a1: (2.0 * c0 - 2.0 * k * k) / a0,
            a2: (k * k - c1 * k + c0) / a0,
        });
    }
    if order % 2 == 1 {
        // Real pole at -warped: first-order section (s + w) with unity DC gain.
        let a0 = k + warped;
        sections.push(Sos {
            b0: warped / a0,
            b1: warped / a0,
            b2: 0.0,
            a1: (warped - k) / a0,
            a2: 0.0,
        });
    }
    sections
}

/// Low-pass filters `signal` with an `order`-pole Butterworth at
/// `cutoff_hz`. Zero initial state, length preserved.
pub fn butterworth_lowpass(
    signal: &[f64],
    order: usize,
    cutoff_hz: f64,
    sample_rate_hz: u32,
) -> Result<Vec<f64>, DspError> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(DspError::CutoffOutOfRange {
            cutoff_hz,
            sample_rate_hz,
        });
    }
    if order == 0 {
        return Err(DspError::BadConfig("butterworth order must be >= 1".into()));
    }
    if signal.is_empty() {
        return Err(DspError::EmptySignal);
    }

    let sections = design_lowpass(order, cutoff_hz, sample_rate_hz as f64);
    let mut out = signal.to_vec();
    for sec in &sections {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for x in &mut out {
            let y = sec.b0 * *x + s1;
            s1 = sec.b1 * *x - sec.a1 * y + s2;
            s2 = sec.b2 * *x - sec.a2 * y;
            *x = y;
        }
    }
    Ok(out)
}

/// Analytic Butterworth magnitude `1 / sqrt(1 + (f / fc)^(2n))`.
/// The continuous-time reference the digital cascade is checked against.
pub fn analytic_magnitude(order: usize, cutoff_hz: f64, f_hz: f64) -> f64 {
    1.0 / (1.0 + (f_hz / cutoff_hz).powi(2 * order as i32)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    const RATE: u32 = 16000;

    /// Steady-state RMS gain for a unit sine at `f_hz`: run 1 s, measure
    /// the last half (integer cycles for the frequencies used here).
    fn sine_gain(order: usize, cutoff_hz: f64, f_hz: f64) -> f64 {
        let n = RATE as usize;
        let signal: Vec<f64> = (0..n)
            .map(|i| (2.0 * PI * f_hz * i as f64 / RATE as f64).sin())
            .collect();
        let out = butterworth_lowpass(&signal, order, cutoff_hz, RATE).unwrap();
        let tail = &out[n / 2..];
        let rms = (tail.iter().map(|x| x * x).sum::<f64>() / tail.len() as f64).sqrt();
        rms * 2.0f64.sqrt()
    }

    #[test]
    fn cutoff_gain_is_half_power() {
        for order in [1, 2, 5] {
            let gain = sine_gain(order, 400.0, 400.0);
            assert!(
                (gain - 1.0 / 2.0f64.sqrt()).abs() < 0.01,
                "order {order}: gain at cutoff {gain}"
            );
        }
    }

    #[test]
    fn double_cutoff_attenuation_matches_analytic() {
        let gain = sine_gain(5, 400.0, 800.0);
        let expected = analytic_magnitude(5, 400.0, 800.0);
        assert!((expected - 1.0 / (1.0 + 2.0f64.powi(10)).sqrt()).abs() < 1e-12);
        assert!(
            (gain - expected).abs() / expected < 0.05,
            "gain {gain} vs analytic {expected}"
        );
    }

    #[test]
    fn dc_gain_is_unity() {
        let out = butterworth_lowpass(&vec![1.0; RATE as usize], 5, 400.0, RATE).unwrap();
        assert!((out.last().unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn filter_is_linear() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let x: Vec<f64> = (0..512).map(|_| rng.random::<f64>() - 0.5).collect();
        let y: Vec<f64> = (0..512).map(|_| rng.random::<f64>() - 0.5).collect();
        let (a, b) = (1.7, -0.3);
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();

        let fx = butterworth_lowpass(&x, 5, 400.0, RATE).unwrap();
        let fy = butterworth_lowpass(&y, 5, 400.0, RATE).unwrap();
        let fm = butterworth_lowpass(&mixed, 5, 400.0, RATE).unwrap();
        for i in 0..fm.len() {
            let combo = a * fx[i] + b * fy[i];
            let denom = combo.abs().max(fm[i].abs()).max(1e-3);
            assert!((fm[i] - combo).abs() / denom < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_cutoff_and_order() {
        assert!(matches!(
            butterworth_lowpass(&[1.0], 5, 9000.0, RATE),
            Err(DspError::CutoffOutOfRange { .. })
        ));
        assert!(matches!(
            butterworth_lowpass(&[1.0], 5, 0.0, RATE),
            Err(DspError::CutoffOutOfRange { .. })
        ));
        assert!(matches!(
            butterworth_lowpass(&[1.0], 0, 400.0, RATE),
            Err(DspError::BadConfig(_))
        ));
    }

    #[test]
    fn length_preserved() {
        let out = butterworth_lowpass(&[1.0, 0.0, 0.0, 0.0], 5, 400.0, RATE).unwrap();
        assert_eq!(out.len(), 4);
    }
}
