//! Loss functions with analytic gradients, and evaluation metrics.
//!
//! The regression losses operate on full value sequences: Pearson
//! correlation is computed per sequence, not per minibatch. The combined
//! loss puts its weight on the MSE term, which regularizes the scale-free
//! correlation objective. Classification uses cross-entropy behind a
//! softmax output layer and is reported as UAR (unweighted average
//! recall, the mean of per-class recalls).

use std::fmt::Write as _;

use thiserror::Error;

/// Floor applied inside `log` so cross-entropy stays finite.
const POSTERIOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    /// Correlation is undefined when either sequence has zero variance.
    #[error("constant input: correlation undefined (zero variance)")]
    ConstantInput,
    #[error("length mismatch: prediction has {pred}, target has {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("sequences of length {len} are too short (need at least {min})")]
    TooShort { len: usize, min: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("confusion row {class} is empty: recall undefined")]
    EmptyClassRow { class: usize },
    #[error("confusion matrix is not square: row {row} has {len} entries, expected {expected}")]
    NotSquare {
        row: usize,
        len: usize,
        expected: usize,
    },
}

/// Which loss a head is trained with. `weight` scales the MSE term.
#[derive(Clone, Debug, PartialEq)]
pub enum LossSpec {
    Corr,
    Mse,
    CorrPlusMse { weight: f64 },
    CrossEntropy,
}

impl LossSpec {
    /// Loss and gradient w.r.t. `pred` for a sequence-valued head.
    pub fn eval_sequence(
        &self,
        pred: &[f64],
        target: &[f64],
    ) -> Result<(f64, Vec<f64>), LossError> {
        match self {
            LossSpec::Corr => corr_loss(pred, target),
            LossSpec::Mse => mse(pred, target),
            LossSpec::CorrPlusMse { weight } => corr_plus_mse(pred, target, *weight),
            LossSpec::CrossEntropy => Err(LossError::LengthMismatch {
                pred: pred.len(),
                target: target.len(),
            }),
        }
    }
}

fn check_lengths(pred: &[f64], target: &[f64]) -> Result<(), LossError> {
    if pred.len() != target.len() {
        return Err(LossError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    Ok(())
}

/// Centered sums used by the correlation formulas:
/// `(p_centered, t_centered, s_pp, s_tt, s_pt)`.
fn centered_sums(pred: &[f64], target: &[f64]) -> (Vec<f64>, Vec<f64>, f64, f64, f64) {
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let pc: Vec<f64> = pred.iter().map(|&x| x - mp).collect();
    let tc: Vec<f64> = target.iter().map(|&x| x - mt).collect();
    let s_pp = pc.iter().map(|x| x * x).sum::<f64>();
    let s_tt = tc.iter().map(|x| x * x).sum::<f64>();
    let s_pt = pc.iter().zip(&tc).map(|(a, b)| a * b).sum::<f64>();
    (pc, tc, s_pp, s_tt, s_pt)
}

/// Pearson correlation coefficient, population-normalized, clamped to
/// `[-1, 1]` against rounding. Errors with [`LossError::ConstantInput`]
/// when either sequence has zero variance.
pub fn pearson_r(pred: &[f64], target: &[f64]) -> Result<f64, LossError> {
    check_lengths(pred, target)?;
    if pred.len() < 2 {
        return Err(LossError::TooShort {
            len: pred.len(),
            min: 2,
        });
    }
    let (_, _, s_pp, s_tt, s_pt) = centered_sums(pred, target);
    if s_pp == 0.0 || s_tt == 0.0 {
        return Err(LossError::ConstantInput);
    }
    Ok((s_pt / (s_pp * s_tt).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation loss `1 - r` with its gradient w.r.t. `pred`.
/// Ranges over `[0, 2]`; affine rescaling of `pred` with positive slope
/// leaves it unchanged, which is why it cannot pin the output scale.
pub fn corr_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    check_lengths(pred, target)?;
    if pred.len() < 2 {
        return Err(LossError::TooShort {
            len: pred.len(),
            min: 2,
        });
    }
    let (pc, tc, s_pp, s_tt, s_pt) = centered_sums(pred, target);
    if s_pp == 0.0 || s_tt == 0.0 {
        return Err(LossError::ConstantInput);
    }
    let denom = (s_pp * s_tt).sqrt();
    let r = s_pt / denom;
    // d r / d pred_i = (tc_i - (s_pt / s_pp) * pc_i) / denom; loss = 1 - r.
    let grad: Vec<f64> = pc
        .iter()
        .zip(&tc)
        .map(|(&p, &t)| -(t - (s_pt / s_pp) * p) / denom)
        .collect();
    Ok((1.0 - r.clamp(-1.0, 1.0), grad))
}

/// Mean squared error `(1/N) sum (p - t)^2` with gradient `2 (p - t) / N`.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    check_lengths(pred, target)?;
    if pred.is_empty() {
        return Err(LossError::TooShort { len: 0, min: 1 });
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        loss += d * d;
        grad.push(2.0 * d / n);
    }
    Ok((loss / n, grad))
}

/// `corr_loss + weight * mse`, the multi-loss used to keep correlation-
/// trained outputs on the label scale.
pub fn corr_plus_mse(
    pred: &[f64],
    target: &[f64],
    weight: f64,
) -> Result<(f64, Vec<f64>), LossError> {
    let (cl, cg) = corr_loss(pred, target)?;
    let (ml, mg) = mse(pred, target)?;
    let grad = cg.iter().zip(&mg).map(|(a, b)| a + weight * b).collect();
    Ok((cl + weight * ml, grad))
}

/// Cross-entropy `-log posterior[label]` with gradient w.r.t. the logits
/// behind the softmax: `posterior - one_hot(label)`.
pub fn cross_entropy(posterior: &[f64], label: usize) -> Result<(f64, Vec<f64>), LossError> {
    if label >= posterior.len() {
        return Err(LossError::LabelOutOfRange {
            label,
            n_classes: posterior.len(),
        });
    }
    let loss = -posterior[label].max(POSTERIOR_FLOOR).ln();
    let grad = posterior
        .iter()
        .enumerate()
        .map(|(c, &p)| if c == label { p - 1.0 } else { p })
        .collect();
    Ok((loss, grad))
}

/// Index of the largest value; ties resolve to the lowest index, the
/// decision rule used everywhere a posterior becomes a class.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Unweighted average recall: the mean over true classes (rows) of
/// `diagonal / row sum`.
pub fn uar(confusion: &[Vec<usize>]) -> Result<f64, LossError> {
    let n = confusion.len();
    let mut acc = 0.0;
    for (row_idx, row) in confusion.iter().enumerate() {
        if row.len() != n {
            return Err(LossError::NotSquare {
                row: row_idx,
                len: row.len(),
                expected: n,
            });
        }
        let total: usize = row.iter().sum();
        if total == 0 {
            return Err(LossError::EmptyClassRow { class: row_idx });
        }
        acc += row[row_idx] as f64 / total as f64;
    }
    Ok(acc / n as f64)
}

/// Evaluation quantities for one prediction set. `uar` and `confusion`
/// travel together.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub pearson_r: Option<f64>,
    pub mse: Option<f64>,
    pub uar: Option<f64>,
    pub confusion: Option<Vec<Vec<usize>>>,
}

impl MetricReport {
    /// `metric,value` lines, one per present metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        if let Some(r) = self.pearson_r {
            let _ = writeln!(out, "pearson_r,{r}");
        }
        if let Some(m) = self.mse {
            let _ = writeln!(out, "mse,{m}");
        }
        if let Some(u) = self.uar {
            let _ = writeln!(out, "uar,{u}");
        }
        out
    }

    /// Aligned-column rendering for terminals, confusion matrix included.
    pub fn to_aligned_text(&self) -> String {
        let mut out = String::new();
        if let Some(r) = self.pearson_r {
            let _ = writeln!(out, "pearson_r  {r:>10.6}");
        }
        if let Some(m) = self.mse {
            let _ = writeln!(out, "mse        {m:>10.6}");
        }
        if let Some(u) = self.uar {
            let _ = writeln!(out, "uar        {u:>10.6}");
        }
        if let Some(c) = &self.confusion {
            let _ = writeln!(out, "confusion (rows = true class)");
            for row in c {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
                let _ = writeln!(out, "  {}", cells.join(" "));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of a scalar function of `x`, step
    /// `1e-6 * max(1, |x_i|)` per coordinate.
    fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let mut grad = Vec::with_capacity(x.len());
        let mut work = x.to_vec();
        for i in 0..x.len() {
            let h = 1e-6 * x[i].abs().max(1.0);
            work[i] = x[i] + h;
            let up = f(&work);
            work[i] = x[i] - h;
            let down = f(&work);
            work[i] = x[i];
            grad.push((up - down) / (2.0 * h));
        }
        grad
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64], rel: f64) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!(
                (a - n).abs() / denom < rel,
                "grad[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    fn seeded_vec(seed: u64, len: usize) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()
    }

    #[test]
    fn pearson_perfect_and_anti() {
        assert_eq!(pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(pearson_r(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn pearson_hand_case() {
        // cov/sigma arithmetic by hand: S_pt=4, S_pp=S_tt=5 -> r=0.8.
        let r = pearson_r(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pearson_constant_input_rejected() {
        assert!(matches!(
            pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(LossError::ConstantInput)
        ));
        assert!(matches!(
            pearson_r(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]),
            Err(LossError::ConstantInput)
        ));
    }

    #[test]
    fn pearson_affine_invariance() {
        let p = seeded_vec(7, 20);
        let t = seeded_vec(8, 20);
        let base = pearson_r(&p, &t).unwrap();
        let scaled: Vec<f64> = p.iter().map(|&x| 3.5 * x + 1.25).collect();
        assert!((pearson_r(&scaled, &t).unwrap() - base).abs() < 1e-12);
        let flipped: Vec<f64> = p.iter().map(|&x| -2.0 * x + 0.5).collect();
        assert!((pearson_r(&flipped, &t).unwrap() + base).abs() < 1e-12);
    }

    #[test]
    fn corr_loss_bounds() {
        let t = vec![1.0, 2.0, 3.0, 5.0];
        let (same, _) = corr_loss(&t, &t).unwrap();
        assert!(same.abs() < 1e-12);
        let neg: Vec<f64> = t.iter().map(|x| -x).collect();
        let (anti, _) = corr_loss(&neg, &t).unwrap();
        assert!((anti - 2.0).abs() < 1e-12);
    }

    #[test]
    fn corr_loss_gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let p = seeded_vec(100 + seed, 10);
            let t = seeded_vec(200 + seed, 10);
            let (_, grad) = corr_loss(&p, &t).unwrap();
            let numeric = finite_diff(|x| corr_loss(x, &t).unwrap().0, &p);
            assert_grad_close(&grad, &numeric, 1e-6);
        }
    }

    #[test]
    fn mse_values_and_gradient() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap().0, 1.0);
        // ([1,2],[0,4]) -> (1+4)/2 by hand.
        assert_eq!(mse(&[1.0, 2.0], &[0.0, 4.0]).unwrap().0, 2.5);

        let p = seeded_vec(3, 8);
        let t = seeded_vec(4, 8);
        let (_, grad) = mse(&p, &t).unwrap();
        let numeric = finite_diff(|x| mse(x, &t).unwrap().0, &p);
        assert_grad_close(&grad, &numeric, 1e-6);
    }

    #[test]
    fn mse_length_mismatch() {
        assert!(matches!(
            mse(&[1.0], &[1.0, 2.0]),
            Err(LossError::LengthMismatch { pred: 1, target: 2 })
        ));
    }

    #[test]
    fn combined_loss_reduces_to_components() {
        let p = seeded_vec(11, 12);
        let t = seeded_vec(12, 12);
        let (combined, _) = corr_plus_mse(&p, &t, 0.0).unwrap();
        assert_eq!(combined, corr_loss(&p, &t).unwrap().0);
        let (zero, _) = corr_plus_mse(&t, &t, 0.1).unwrap();
        assert!(zero.abs() < 1e-12);
    }

    #[test]
    fn combined_loss_is_component_sum() {
        let p = seeded_vec(21, 15);
        let t = seeded_vec(22, 15);
        let w = 0.1;
        let (full, grad) = corr_plus_mse(&p, &t, w).unwrap();
        let (cl, cg) = corr_loss(&p, &t).unwrap();
        let (ml, mg) = mse(&p, &t).unwrap();
        assert!((full - (cl + w * ml)).abs() < 1e-12);
        for i in 0..grad.len() {
            assert!((grad[i] - (cg[i] + w * mg[i])).abs() < 1e-12);
        }
        let numeric = finite_diff(|x| corr_plus_mse(x, &t, w).unwrap().0, &p);
        assert_grad_close(&grad, &numeric, 1e-6);
    }

    #[test]
    fn cross_entropy_values() {
        let (zero_loss, _) = cross_entropy(&[1.0, 0.0], 0).unwrap();
        assert!(zero_loss.abs() < 1e-9);
        let (uniform, _) = cross_entropy(&[0.25; 4], 2).unwrap();
        assert!((uniform - 4.0f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], 2),
            Err(LossError::LabelOutOfRange {
                label: 2,
                n_classes: 2
            })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences_through_softmax() {
        // The analytic gradient is stated w.r.t. logits, so differentiate
        // the composed softmax -> cross-entropy map.
        let softmax = |z: &[f64]| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        for seed in 0..5u64 {
            let logits = seeded_vec(300 + seed, 6);
            let label = (seed % 6) as usize;
            let (_, grad) = cross_entropy(&softmax(&logits), label).unwrap();
            let numeric = finite_diff(|z| cross_entropy(&softmax(z), label).unwrap().0, &logits);
            assert_grad_close(&grad, &numeric, 1e-6);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn uar_cases() {
        assert_eq!(uar(&[vec![3, 0], vec![0, 7]]).unwrap(), 1.0);
        // Recalls 1.0 and 0.5.
        assert_eq!(uar(&[vec![2, 0], vec![1, 1]]).unwrap(), 0.75);
        // Constant predictor on 3 balanced classes.
        let c = vec![vec![5, 0, 0], vec![5, 0, 0], vec![5, 0, 0]];
        assert!((uar(&c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            uar(&[vec![1, 0], vec![0, 0]]),
            Err(LossError::EmptyClassRow { class: 1 })
        ));
    }

    #[test]
    fn uar_row_scale_invariance() {
        let base = vec![vec![4, 1, 0], vec![2, 6, 2], vec![1, 1, 3]];
        let scaled = vec![
            base[0].iter().map(|v| v * 7).collect::<Vec<_>>(),
            base[1].clone(),
            base[2].iter().map(|v| v * 3).collect::<Vec<_>>(),
        ];
        assert!((uar(&base).unwrap() - uar(&scaled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn report_rendering() {
        let report = MetricReport {
            uar: Some(0.75),
            confusion: Some(vec![vec![2, 0], vec![1, 1]]),
            ..MetricReport::default()
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,value\n"));
        assert!(csv.contains("uar,0.75"));
        assert!(report.to_aligned_text().contains("confusion"));
    }
}
