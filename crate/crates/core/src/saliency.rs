//! Input-gradient analysis: which frequency bands drive a trained
//! model's decision.
//!
//! Gradients are taken at the pre-softmax logit of the selected (or
//! predicted) class rather than the post-softmax probability, which
//! avoids saturation-driven vanishing. Importance is the mean absolute
//! gradient per band, pooled over all frames of all files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::losses::argmax;
use crate::mat::Mat;
use crate::net::{backward, forward, HeadGrad, HeadKind, HeadOutput, Mode, ModelParams, NetError};
use crate::parallel::par_map;

/// Which scalar output the gradient is taken of.
#[derive(Clone, Debug)]
pub enum OutputSelector {
    /// A fixed class logit of a classification head.
    ClassLogit { head: String, class: usize },
    /// The logit of whichever class the model predicts per file.
    PredictedClassLogit { head: String },
    /// A scalar regression output, or the sum over a sequence head's
    /// frames.
    HeadScalar { head: String },
}

impl OutputSelector {
    fn head_name(&self) -> &str {
        match self {
            OutputSelector::ClassLogit { head, .. }
            | OutputSelector::PredictedClassLogit { head }
            | OutputSelector::HeadScalar { head } => head,
        }
    }
}

/// Per-band importance for one model; `per_cell` carries the full
/// frames x bands magnitude map when the dataset was a single file.
#[derive(Clone, Debug)]
pub struct SaliencyMap {
    pub per_band: Vec<f64>,
    pub per_cell: Option<Mat>,
}

/// Exact gradient of the selected scalar output w.r.t. every input cell,
/// computed by running backpropagation one step past the first layer.
pub fn input_gradients(
    params: &ModelParams,
    input: &Mat,
    selector: &OutputSelector,
) -> Result<Mat, NetError> {
    let arch = &params.arch;
    let head_idx = arch
        .heads
        .iter()
        .position(|h| h.name == selector.head_name())
        .ok_or_else(|| NetError::BadConfig(format!("no head named '{}'", selector.head_name())))?;

    let (outputs, cache) = forward(params, input, Mode::Train)?;
    let cache = cache.expect("train mode always caches");

    let mut head_grads: Vec<HeadGrad> = vec![HeadGrad::None; arch.heads.len()];
    head_grads[head_idx] = match (&arch.heads[head_idx].kind, selector) {
        (HeadKind::Classification { n_classes }, OutputSelector::ClassLogit { class, .. }) => {
            if class >= n_classes {
                return Err(NetError::BadConfig(format!(
                    "class {class} out of range for {n_classes} classes"
                )));
            }
            let mut grad = vec![0.0; *n_classes];
            grad[*class] = 1.0;
            HeadGrad::Logits(grad)
        }
        (HeadKind::Classification { n_classes }, OutputSelector::PredictedClassLogit { .. }) => {
            let HeadOutput::Posterior(p) = &outputs[head_idx] else {
                unreachable!("classification heads emit posteriors")
            };
            let mut grad = vec![0.0; *n_classes];
            grad[argmax(p)] = 1.0;
            HeadGrad::Logits(grad)
        }
        (HeadKind::RegressionScalar, OutputSelector::HeadScalar { .. }) => HeadGrad::Scalar(1.0),
        (HeadKind::RegressionSequence, OutputSelector::HeadScalar { .. }) => {
            let HeadOutput::Sequence(s) = &outputs[head_idx] else {
                unreachable!("sequence heads emit sequences")
            };
            HeadGrad::Sequence(vec![1.0; s.len()])
        }
        (kind, selector) => {
            return Err(NetError::BadConfig(format!(
                "selector {selector:?} does not fit head kind {kind:?}"
            )))
        }
    };

    let (_, d_input) = backward(params, &cache, &head_grads)?;
    Ok(d_input)
}

/// Mean absolute input gradient per band for one model, pooled over all
/// frames of all files. The result is independent of file order.
pub fn band_importance(
    params: &ModelParams,
    dataset: &[Mat],
    selector: &OutputSelector,
) -> Result<SaliencyMap, NetError> {
    if dataset.is_empty() {
        return Err(NetError::NoData);
    }
    let bands = params.arch.input_bands;
    let mut sums = vec![0.0; bands];
    let mut frames = 0usize;
    let mut per_cell = None;
    for input in dataset {
        let grad = input_gradients(params, input, selector)?;
        for t in 0..grad.rows() {
            for (b, &g) in grad.row(t).iter().enumerate() {
                sums[b] += g.abs();
            }
        }
        frames += grad.rows();
        if dataset.len() == 1 {
            let mut magnitude = grad;
            for v in magnitude.data_mut() {
                *v = v.abs();
            }
            per_cell = Some(magnitude);
        }
    }
    Ok(SaliencyMap {
        per_band: sums.into_iter().map(|s| s / frames as f64).collect(),
        per_cell,
    })
}

/// [`band_importance`] for every model, fanned out over the worker pool.
pub fn band_importance_all(
    models: &[ModelParams],
    dataset: &[Mat],
    selector: &OutputSelector,
) -> Result<Vec<SaliencyMap>, NetError> {
    par_map(models, |m| band_importance(m, dataset, selector))
        .into_iter()
        .collect()
}

/// `band_index,center_hz,mean_abs_grad` rows, one per band.
pub fn write_band_importance_csv(
    path: &Path,
    map: &SaliencyMap,
    centers_hz: &[f64],
) -> Result<(), std::io::Error> {
    let mut out = String::from("band_index,center_hz,mean_abs_grad\n");
    for (b, &g) in map.per_band.iter().enumerate() {
        let center = centers_hz.get(b).copied().unwrap_or(b as f64);
        let _ = writeln!(out, "{b},{center},{g}");
    }
    fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, Architecture, HeadSpec, Readout};
    use rand::{Rng, SeedableRng};

    fn arch(bands: usize) -> Architecture {
        Architecture {
            input_bands: bands,
            conv_filters: 4,
            conv_kernel: 2,
            conv_stride: 1,
            lstm_units: 5,
            readout: Readout::FinalState,
            heads: vec![HeadSpec {
                name: "y".into(),
                kind: HeadKind::Classification { n_classes: 2 },
                ff_units: 4,
            }],
        }
    }

    fn random_input(frames: usize, bands: usize, seed: u64) -> Mat {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mat::zeros(frames, bands);
        for v in m.data_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        m
    }

    #[test]
    fn gradient_matches_finite_differences_on_the_logit() {
        let arch = arch(3);
        let params = init_params(&arch, 3);
        let input = random_input(6, 3, 4);
        let selector = OutputSelector::ClassLogit {
            head: "y".into(),
            class: 1,
        };
        let analytic = input_gradients(&params, &input, &selector).unwrap();

        let logit = |m: &Mat| {
            let (out, cache) = forward(&params, m, Mode::Train).unwrap();
            drop(out);
            // Recover the raw logit from the head cache.
            cache.unwrap().heads[0].out[(0, 1)]
        };
        let step = 1e-5;
        let mut probe = input.clone();
        for r in 0..input.rows() {
            for c in 0..input.cols() {
                let original = probe[(r, c)];
                probe[(r, c)] = original + step;
                let up = logit(&probe);
                probe[(r, c)] = original - step;
                let down = logit(&probe);
                probe[(r, c)] = original;
                let numeric = (up - down) / (2.0 * step);
                let a = analytic[(r, c)];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "[{r},{c}]: {a} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn zero_conv_weights_give_zero_gradients() {
        let arch = arch(3);
        let mut params = init_params(&arch, 5);
        params.conv_w.scale(0.0);
        let grad = input_gradients(
            &params,
            &random_input(6, 3, 6),
            &OutputSelector::PredictedClassLogit { head: "y".into() },
        )
        .unwrap();
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn deterministic_and_order_invariant() {
        let arch = arch(3);
        let params = init_params(&arch, 7);
        let selector = OutputSelector::PredictedClassLogit { head: "y".into() };
        let a = random_input(6, 3, 1);
        let b = random_input(8, 3, 2);

        let g1 = input_gradients(&params, &a, &selector).unwrap();
        let g2 = input_gradients(&params, &a, &selector).unwrap();
        assert_eq!(g1, g2);

        let fwd = band_importance(&params, &[a.clone(), b.clone()], &selector).unwrap();
        let rev = band_importance(&params, &[b, a], &selector).unwrap();
        for (x, y) in fwd.per_band.iter().zip(&rev.per_band) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn single_file_reductions() {
        let arch = arch(4);
        let params = init_params(&arch, 11);
        let selector = OutputSelector::ClassLogit {
            head: "y".into(),
            class: 0,
        };
        let file = random_input(5, 4, 3);
        let map = band_importance(&params, std::slice::from_ref(&file), &selector).unwrap();
        let cells = map.per_cell.as_ref().expect("single file keeps per-cell");

        // per_band is the column mean of the per-cell magnitudes.
        for b in 0..4 {
            let mean: f64 =
                (0..cells.rows()).map(|t| cells[(t, b)]).sum::<f64>() / cells.rows() as f64;
            assert!((map.per_band[b] - mean).abs() < 1e-12);
        }

        // Duplicating the file leaves per_band unchanged.
        let dup = band_importance(&params, &[file.clone(), file.clone(), file], &selector).unwrap();
        for (x, y) in map.per_band.iter().zip(&dup.per_band) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(dup.per_cell.is_none());
    }

    #[test]
    fn output_layer_scaling_scales_importance_linearly() {
        let arch = arch(3);
        let params = init_params(&arch, 13);
        let selector = OutputSelector::ClassLogit {
            head: "y".into(),
            class: 1,
        };
        let data = vec![random_input(6, 3, 8), random_input(7, 3, 9)];
        let base = band_importance(&params, &data, &selector).unwrap();

        let mut scaled = params.clone();
        scaled.heads[0].output.w.scale(3.0);
        scaled.heads[0].output.b.iter_mut().for_each(|b| *b *= 3.0);
        let tripled = band_importance(&scaled, &data, &selector).unwrap();
        for (x, y) in base.per_band.iter().zip(&tripled.per_band) {
            assert!((3.0 * x - y).abs() < 1e-9 * y.abs().max(1e-12));
        }
    }

    #[test]
    fn csv_output_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let map = SaliencyMap {
            per_band: vec![0.5, 0.25],
            per_cell: None,
        };
        write_band_importance_csv(&path, &map, &[100.0, 200.0]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "band_index,center_hz,mean_abs_grad\n0,100,0.5\n1,200,0.25\n"
        );
    }
}
