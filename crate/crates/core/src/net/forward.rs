//! Forward pass: conv over time (valid padding, ReLU), LSTM over the
//! resulting frames, then per-head feedforward and output layers.

use crate::mat::Mat;

use super::params::head_kinds;
use super::{HeadKind, ModelParams, NetError, Readout};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Output of one head for one example.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadOutput {
    /// Softmax posterior over classes.
    Posterior(Vec<f64>),
    Scalar(f64),
    /// One value per conv-output frame.
    Sequence(Vec<f64>),
}

/// Post-nonlinearity gate values for one LSTM step.
#[derive(Clone, Debug)]
pub(crate) struct GateCache {
    pub input: Vec<f64>,
    pub forget: Vec<f64>,
    pub cell: Vec<f64>,
    pub output: Vec<f64>,
}

/// Per-head intermediates; rows are readout instances (one for
/// utterance-level heads, one per frame for sequence heads).
#[derive(Clone, Debug)]
pub(crate) struct HeadCache {
    pub hidden_pre: Mat,
    pub hidden: Mat,
    /// Linear outputs (logits for classification); backward recomputes
    /// nothing from it, tests probe it.
    #[allow(dead_code)]
    pub out: Mat,
}

/// Everything backward needs, captured when `mode == Train`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub(crate) input: Mat,
    pub(crate) conv_pre: Mat,
    pub(crate) conv_out: Mat,
    pub(crate) gates: Vec<GateCache>,
    pub(crate) cells: Vec<Vec<f64>>,
    pub(crate) tanh_cells: Vec<Vec<f64>>,
    pub(crate) hiddens: Vec<Vec<f64>>,
    pub(crate) readout_vec: Vec<f64>,
    pub(crate) heads: Vec<HeadCache>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Numerically safe softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn add_vec(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Runs the model on one example (`input` is frames x bands). In train
/// mode the returned cache stores every intermediate for [`super::backward`].
pub fn forward(
    params: &ModelParams,
    input: &Mat,
    mode: Mode,
) -> Result<(Vec<HeadOutput>, Option<ForwardCache>), NetError> {
    let arch = &params.arch;
    if input.cols() != arch.input_bands {
        return Err(NetError::ShapeMismatch(format!(
            "input has {} bands, architecture expects {}",
            input.cols(),
            arch.input_bands
        )));
    }
    let t_out = arch
        .conv_output_len(input.rows())
        .ok_or(NetError::InputTooShort {
            frames: input.rows(),
            kernel: arch.conv_kernel,
        })?;

    // Conv over time, window flattened frame-major to match conv_w rows.
    let window_len = arch.conv_kernel * arch.input_bands;
    let mut window = vec![0.0; window_len];
    let mut conv_pre = Mat::zeros(t_out, arch.conv_filters);
    let mut conv_out = Mat::zeros(t_out, arch.conv_filters);
    for t in 0..t_out {
        let start = t * arch.conv_stride;
        for k in 0..arch.conv_kernel {
            window[k * arch.input_bands..(k + 1) * arch.input_bands]
                .copy_from_slice(input.row(start + k));
        }
        let mut pre = params.conv_w.matvec(&window);
        add_vec(&mut pre, &params.conv_b);
        for (f, &p) in pre.iter().enumerate() {
            conv_pre[(t, f)] = p;
            conv_out[(t, f)] = relu(p);
        }
    }

    // LSTM.
    let units = arch.lstm_units;
    let mut h = vec![0.0; units];
    let mut c = vec![0.0; units];
    let mut gates = Vec::with_capacity(t_out);
    let mut cells = Vec::with_capacity(t_out);
    let mut tanh_cells = Vec::with_capacity(t_out);
    let mut hiddens = Vec::with_capacity(t_out);
    for t in 0..t_out {
        let x_t = conv_out.row(t);
        let mut pre: [Vec<f64>; 4] = [(); 4].map(|_| Vec::new());
        for (g, slot) in pre.iter_mut().enumerate() {
            let mut a = params.lstm.w_x[g].matvec(x_t);
            add_vec(&mut a, &params.lstm.w_h[g].matvec(&h));
            add_vec(&mut a, &params.lstm.bias[g]);
            *slot = a;
        }
        let gate = GateCache {
            input: pre[0].iter().map(|&a| sigmoid(a)).collect(),
            forget: pre[1].iter().map(|&a| sigmoid(a)).collect(),
            cell: pre[2].iter().map(|&a| a.tanh()).collect(),
            output: pre[3].iter().map(|&a| sigmoid(a)).collect(),
        };
        let mut c_new = vec![0.0; units];
        for u in 0..units {
            c_new[u] = gate.forget[u] * c[u] + gate.input[u] * gate.cell[u];
        }
        let tanh_c: Vec<f64> = c_new.iter().map(|&v| v.tanh()).collect();
        let mut h_new = vec![0.0; units];
        for u in 0..units {
            h_new[u] = gate.output[u] * tanh_c[u];
        }
        c = c_new;
        h = h_new;
        gates.push(gate);
        cells.push(c.clone());
        tanh_cells.push(tanh_c);
        hiddens.push(h.clone());
    }

    // Utterance-level readout.
    let readout_vec = match arch.readout {
        Readout::FinalState => hiddens[t_out - 1].clone(),
        Readout::MeanPool => {
            let mut mean = vec![0.0; units];
            for h_t in &hiddens {
                add_vec(&mut mean, h_t);
            }
            for m in &mut mean {
                *m /= t_out as f64;
            }
            mean
        }
    };

    let kinds = head_kinds(arch);
    let mut outputs = Vec::with_capacity(kinds.len());
    let mut head_caches = Vec::with_capacity(kinds.len());
    for (head, kind) in params.heads.iter().zip(&kinds) {
        let instances: Vec<&[f64]> = match kind {
            HeadKind::RegressionSequence => hiddens.iter().map(Vec::as_slice).collect(),
            _ => vec![&readout_vec],
        };
        let ff = head.hidden.b.len();
        let out_dim = head.output.b.len();
        let mut hidden_pre = Mat::zeros(instances.len(), ff);
        let mut hidden = Mat::zeros(instances.len(), ff);
        let mut out = Mat::zeros(instances.len(), out_dim);
        for (i, r) in instances.iter().enumerate() {
            let mut pre = head.hidden.w.matvec(r);
            add_vec(&mut pre, &head.hidden.b);
            let act: Vec<f64> = pre.iter().map(|&v| relu(v)).collect();
            let mut o = head.output.w.matvec(&act);
            add_vec(&mut o, &head.output.b);
            hidden_pre.row_mut(i).copy_from_slice(&pre);
            hidden.row_mut(i).copy_from_slice(&act);
            out.row_mut(i).copy_from_slice(&o);
        }
        outputs.push(match kind {
            HeadKind::Classification { .. } => HeadOutput::Posterior(softmax(out.row(0))),
            HeadKind::RegressionScalar => HeadOutput::Scalar(out[(0, 0)]),
            HeadKind::RegressionSequence => {
                HeadOutput::Sequence((0..instances.len()).map(|t| out[(t, 0)]).collect())
            }
        });
        head_caches.push(HeadCache {
            hidden_pre,
            hidden,
            out,
        });
    }

    let cache = match mode {
        Mode::Train => Some(ForwardCache {
            input: input.clone(),
            conv_pre,
            conv_out,
            gates,
            cells,
            tanh_cells,
            hiddens,
            readout_vec,
            heads: head_caches,
        }),
        Mode::Infer => None,
    };
    Ok((outputs, cache))
}

/// Inference-mode forward without a cache.
pub fn predict(params: &ModelParams, input: &Mat) -> Result<Vec<HeadOutput>, NetError> {
    Ok(forward(params, input, Mode::Infer)?.0)
}
