//! Backpropagation through the whole stack, including the gradient
//! w.r.t. the input (the saliency hook). Multi-task trunk gradients are
//! the sum of the head contributions.

use crate::mat::Mat;

use super::forward::ForwardCache;
use super::params::head_kinds;
use super::{HeadKind, ModelGrads, ModelParams, NetError, Readout};

/// Gradient of the training objective w.r.t. one head's linear output.
///
/// Classification heads take the gradient w.r.t. their logits (for
/// cross-entropy behind softmax that is `posterior - one_hot`); the
/// regression variants take gradients w.r.t. the raw outputs. `None`
/// skips a head entirely.
#[derive(Clone, Debug)]
pub enum HeadGrad {
    Logits(Vec<f64>),
    Scalar(f64),
    Sequence(Vec<f64>),
    None,
}

/// Backpropagates `head_grads` through the cached forward pass,
/// returning parameter gradients and the gradient w.r.t. the input
/// matrix. The cache must come from a train-mode [`super::forward`] on
/// the same parameters.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    head_grads: &[HeadGrad],
) -> Result<(ModelGrads, Mat), NetError> {
    let arch = &params.arch;
    let kinds = head_kinds(arch);
    if head_grads.len() != kinds.len() {
        return Err(NetError::ShapeMismatch(format!(
            "{} head gradients for {} heads",
            head_grads.len(),
            kinds.len()
        )));
    }

    let t_out = cache.conv_out.rows();
    let units = arch.lstm_units;
    let mut grads = ModelGrads::zeros(arch);
    // d loss / d h_t accumulated from the heads.
    let mut d_hidden: Vec<Vec<f64>> = vec![vec![0.0; units]; t_out];

    for (idx, (kind, grad)) in kinds.iter().zip(head_grads).enumerate() {
        let head = &params.heads[idx];
        let head_cache = &cache.heads[idx];
        let head_grads_out = &mut grads.heads[idx];

        // (instance row, gradient w.r.t. that instance's linear output)
        let instance_grads: Vec<(usize, Vec<f64>)> = match (kind, grad) {
            (_, HeadGrad::None) => Vec::new(),
            (HeadKind::Classification { n_classes }, HeadGrad::Logits(g)) => {
                if g.len() != *n_classes {
                    return Err(NetError::ShapeMismatch(format!(
                        "logit gradient of length {} for {} classes",
                        g.len(),
                        n_classes
                    )));
                }
                vec![(0, g.clone())]
            }
            (HeadKind::RegressionScalar, HeadGrad::Scalar(g)) => vec![(0, vec![*g])],
            (HeadKind::RegressionSequence, HeadGrad::Sequence(g)) => {
                if g.len() != t_out {
                    return Err(NetError::ShapeMismatch(format!(
                        "sequence gradient of length {} for {} frames",
                        g.len(),
                        t_out
                    )));
                }
                g.iter().enumerate().map(|(t, &v)| (t, vec![v])).collect()
            }
            (kind, grad) => {
                return Err(NetError::ShapeMismatch(format!(
                    "head gradient {grad:?} does not fit head kind {kind:?}"
                )))
            }
        };

        for (instance, g_out) in instance_grads {
            let hidden = head_cache.hidden.row(instance);
            let hidden_pre = head_cache.hidden_pre.row(instance);
            let readout: &[f64] = match kind {
                HeadKind::RegressionSequence => &cache.hiddens[instance],
                _ => &cache.readout_vec,
            };

            head_grads_out.output.w.add_outer(1.0, &g_out, hidden);
            for (b, &g) in head_grads_out.output.b.iter_mut().zip(&g_out) {
                *b += g;
            }
            let d_hidden_act = head.output.w.matvec_t(&g_out);
            let d_hidden_pre: Vec<f64> = d_hidden_act
                .iter()
                .zip(hidden_pre)
                .map(|(&g, &pre)| if pre > 0.0 { g } else { 0.0 })
                .collect();
            head_grads_out
                .hidden
                .w
                .add_outer(1.0, &d_hidden_pre, readout);
            for (b, &g) in head_grads_out.hidden.b.iter_mut().zip(&d_hidden_pre) {
                *b += g;
            }
            let d_readout = head.hidden.w.matvec_t(&d_hidden_pre);

            match kind {
                HeadKind::RegressionSequence => {
                    for (a, &g) in d_hidden[instance].iter_mut().zip(&d_readout) {
                        *a += g;
                    }
                }
                _ => match arch.readout {
                    Readout::FinalState => {
                        for (a, &g) in d_hidden[t_out - 1].iter_mut().zip(&d_readout) {
                            *a += g;
                        }
                    }
                    Readout::MeanPool => {
                        let scale = 1.0 / t_out as f64;
                        for row in d_hidden.iter_mut() {
                            for (a, &g) in row.iter_mut().zip(&d_readout) {
                                *a += scale * g;
                            }
                        }
                    }
                },
            }
        }
    }

    // Backpropagation through time.
    let mut d_conv_out = Mat::zeros(t_out, arch.conv_filters);
    let mut d_h_carry = vec![0.0; units];
    let mut d_c_carry = vec![0.0; units];
    for t in (0..t_out).rev() {
        let gate = &cache.gates[t];
        let tanh_c = &cache.tanh_cells[t];
        let c_prev: &[f64] = if t == 0 { &[] } else { &cache.cells[t - 1] };
        let h_prev: &[f64] = if t == 0 { &[] } else { &cache.hiddens[t - 1] };
        let x_t = cache.conv_out.row(t);

        let mut d_h = d_h_carry.clone();
        for (a, &g) in d_h.iter_mut().zip(&d_hidden[t]) {
            *a += g;
        }

        let mut d_a_input = vec![0.0; units];
        let mut d_a_forget = vec![0.0; units];
        let mut d_a_cell = vec![0.0; units];
        let mut d_a_output = vec![0.0; units];
        for u in 0..units {
            let d_o = d_h[u] * tanh_c[u];
            d_a_output[u] = d_o * gate.output[u] * (1.0 - gate.output[u]);

            let d_c = d_c_carry[u] + d_h[u] * gate.output[u] * (1.0 - tanh_c[u] * tanh_c[u]);
            let d_i = d_c * gate.cell[u];
            d_a_input[u] = d_i * gate.input[u] * (1.0 - gate.input[u]);
            let d_g = d_c * gate.input[u];
            d_a_cell[u] = d_g * (1.0 - gate.cell[u] * gate.cell[u]);
            let cp = if t == 0 { 0.0 } else { c_prev[u] };
            let d_f = d_c * cp;
            d_a_forget[u] = d_f * gate.forget[u] * (1.0 - gate.forget[u]);
            d_c_carry[u] = d_c * gate.forget[u];
        }

        let gate_grads = [&d_a_input, &d_a_forget, &d_a_cell, &d_a_output];
        let mut d_x = vec![0.0; arch.conv_filters];
        let mut d_h_prev = vec![0.0; units];
        for (g, d_a) in gate_grads.into_iter().enumerate() {
            grads.lstm.w_x[g].add_outer(1.0, d_a, x_t);
            if t > 0 {
                grads.lstm.w_h[g].add_outer(1.0, d_a, h_prev);
            }
            for (b, &v) in grads.lstm.bias[g].iter_mut().zip(d_a) {
                *b += v;
            }
            for (acc, v) in d_x.iter_mut().zip(params.lstm.w_x[g].matvec_t(d_a)) {
                *acc += v;
            }
            for (acc, v) in d_h_prev.iter_mut().zip(params.lstm.w_h[g].matvec_t(d_a)) {
                *acc += v;
            }
        }
        d_conv_out.row_mut(t).copy_from_slice(&d_x);
        d_h_carry = d_h_prev;
    }

    // Conv layer and input gradient.
    let bands = arch.input_bands;
    let window_len = arch.conv_kernel * bands;
    let mut d_input = Mat::zeros(cache.input.rows(), bands);
    let mut window = vec![0.0; window_len];
    for t in 0..t_out {
        let start = t * arch.conv_stride;
        let d_pre: Vec<f64> = (0..arch.conv_filters)
            .map(|f| {
                if cache.conv_pre[(t, f)] > 0.0 {
                    d_conv_out[(t, f)]
                } else {
                    0.0
                }
            })
            .collect();
        for k in 0..arch.conv_kernel {
            window[k * bands..(k + 1) * bands].copy_from_slice(cache.input.row(start + k));
        }
        grads.conv_w.add_outer(1.0, &d_pre, &window);
        for (b, &g) in grads.conv_b.iter_mut().zip(&d_pre) {
            *b += g;
        }
        let d_window = params.conv_w.matvec_t(&d_pre);
        for k in 0..arch.conv_kernel {
            let row = d_input.row_mut(start + k);
            for (a, &g) in row.iter_mut().zip(&d_window[k * bands..(k + 1) * bands]) {
                *a += g;
            }
        }
    }

    Ok((grads, d_input))
}
