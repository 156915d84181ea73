//! Trainable tensors, Glorot-uniform initialization, and a flat view
//! used by the optimizer, the checkpoint writer and the gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mat::Mat;

use super::{Architecture, HeadKind};

/// Gate order for the LSTM tensors: input, forget, cell, output.
pub const GATES: [&str; 4] = ["i", "f", "g", "o"];

/// LSTM weights: per gate, input weights `units x input_dim`, recurrent
/// weights `units x units`, and a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_x: [Mat; 4],
    pub w_h: [Mat; 4],
    pub bias: [Vec<f64>; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub w: Mat,
    pub b: Vec<f64>,
}

/// One head: a ReLU hidden layer and a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub hidden: DenseParams,
    pub output: DenseParams,
}

/// All trainable tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    /// `conv_filters x (conv_kernel * input_bands)`, window flattened
    /// frame-major.
    pub conv_w: Mat,
    pub conv_b: Vec<f64>,
    pub lstm: LstmParams,
    /// Parallel to `arch.heads`.
    pub heads: Vec<HeadParams>,
    /// The seed the tensors were drawn from; the diversity source across
    /// ensemble members.
    pub init_seed: u64,
}

/// Gradients with the same tensor layout as [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub conv_w: Mat,
    pub conv_b: Vec<f64>,
    pub lstm: LstmParams,
    pub heads: Vec<HeadParams>,
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn fill_uniform(mat: &mut Mat, bound: f64, rng: &mut ChaCha8Rng) {
    for v in mat.data_mut() {
        *v = bound * (2.0 * rng.random::<f64>() - 1.0);
    }
}

/// Draws Glorot-uniform weights per tensor
/// (`bound = sqrt(6 / (fan_in + fan_out))`), zero biases except the LSTM
/// forget gate at 1.0. Deterministic in `seed`.
pub fn init_params(arch: &Architecture, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bands = arch.input_bands;
    let filters = arch.conv_filters;
    let units = arch.lstm_units;

    let mut conv_w = Mat::zeros(filters, arch.conv_kernel * bands);
    fill_uniform(
        &mut conv_w,
        glorot_bound(arch.conv_kernel * bands, filters),
        &mut rng,
    );

    let mut w_x = [(); 4].map(|_| Mat::zeros(units, filters));
    for gate in &mut w_x {
        fill_uniform(gate, glorot_bound(filters, units), &mut rng);
    }
    let mut w_h = [(); 4].map(|_| Mat::zeros(units, units));
    for gate in &mut w_h {
        fill_uniform(gate, glorot_bound(units, units), &mut rng);
    }
    let mut bias = [(); 4].map(|_| vec![0.0; units]);
    bias[1] = vec![1.0; units]; // forget gate

    let heads = arch
        .heads
        .iter()
        .map(|spec| {
            let out_dim = spec.output_dim();
            let mut hidden_w = Mat::zeros(spec.ff_units, units);
            fill_uniform(&mut hidden_w, glorot_bound(units, spec.ff_units), &mut rng);
            let mut output_w = Mat::zeros(out_dim, spec.ff_units);
            fill_uniform(
                &mut output_w,
                glorot_bound(spec.ff_units, out_dim),
                &mut rng,
            );
            HeadParams {
                hidden: DenseParams {
                    w: hidden_w,
                    b: vec![0.0; spec.ff_units],
                },
                output: DenseParams {
                    w: output_w,
                    b: vec![0.0; out_dim],
                },
            }
        })
        .collect();

    ModelParams {
        arch: arch.clone(),
        conv_w,
        conv_b: vec![0.0; filters],
        lstm: LstmParams { w_x, w_h, bias },
        heads,
        init_seed: seed,
    }
}

impl ModelGrads {
    pub fn zeros(arch: &Architecture) -> Self {
        let bands = arch.input_bands;
        let filters = arch.conv_filters;
        let units = arch.lstm_units;
        ModelGrads {
            conv_w: Mat::zeros(filters, arch.conv_kernel * bands),
            conv_b: vec![0.0; filters],
            lstm: LstmParams {
                w_x: [(); 4].map(|_| Mat::zeros(units, filters)),
                w_h: [(); 4].map(|_| Mat::zeros(units, units)),
                bias: [(); 4].map(|_| vec![0.0; units]),
            },
            heads: arch
                .heads
                .iter()
                .map(|spec| HeadParams {
                    hidden: DenseParams {
                        w: Mat::zeros(spec.ff_units, units),
                        b: vec![0.0; spec.ff_units],
                    },
                    output: DenseParams {
                        w: Mat::zeros(spec.output_dim(), spec.ff_units),
                        b: vec![0.0; spec.output_dim()],
                    },
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= alpha;
            }
        }
    }

    /// Euclidean norm over every tensor, the quantity gradient clipping
    /// bounds.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        tensor_slices(&self.conv_w, &self.conv_b, &self.lstm, &self.heads)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        tensor_slices_mut(
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.lstm,
            &mut self.heads,
        )
    }
}

impl ModelParams {
    /// Flat tensor views in the fixed traversal order shared with
    /// [`ModelGrads`] and the checkpoint format.
    pub fn tensors(&self) -> Vec<&[f64]> {
        tensor_slices(&self.conv_w, &self.conv_b, &self.lstm, &self.heads)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        tensor_slices_mut(
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.lstm,
            &mut self.heads,
        )
    }

    /// Tensor names aligned with [`ModelParams::tensors`].
    pub fn tensor_names(arch: &Architecture) -> Vec<String> {
        let mut names = vec!["conv.w".to_string(), "conv.b".to_string()];
        for gate in GATES {
            names.push(format!("lstm.wx.{gate}"));
        }
        for gate in GATES {
            names.push(format!("lstm.wh.{gate}"));
        }
        for gate in GATES {
            names.push(format!("lstm.b.{gate}"));
        }
        for head in &arch.heads {
            names.push(format!("head.{}.hidden.w", head.name));
            names.push(format!("head.{}.hidden.b", head.name));
            names.push(format!("head.{}.out.w", head.name));
            names.push(format!("head.{}.out.b", head.name));
        }
        names
    }
}

fn tensor_slices<'a>(
    conv_w: &'a Mat,
    conv_b: &'a [f64],
    lstm: &'a LstmParams,
    heads: &'a [HeadParams],
) -> Vec<&'a [f64]> {
    let mut out: Vec<&[f64]> = vec![conv_w.data(), conv_b];
    out.extend(lstm.w_x.iter().map(Mat::data));
    out.extend(lstm.w_h.iter().map(Mat::data));
    out.extend(lstm.bias.iter().map(Vec::as_slice));
    for head in heads {
        out.push(head.hidden.w.data());
        out.push(&head.hidden.b);
        out.push(head.output.w.data());
        out.push(&head.output.b);
    }
    out
}

fn tensor_slices_mut<'a>(
    conv_w: &'a mut Mat,
    conv_b: &'a mut [f64],
    lstm: &'a mut LstmParams,
    heads: &'a mut [HeadParams],
) -> Vec<&'a mut [f64]> {
    let mut out: Vec<&mut [f64]> = vec![conv_w.data_mut(), conv_b];
    out.extend(lstm.w_x.iter_mut().map(Mat::data_mut));
    out.extend(lstm.w_h.iter_mut().map(Mat::data_mut));
    out.extend(lstm.bias.iter_mut().map(Vec::as_mut_slice));
    for head in heads {
        out.push(head.hidden.w.data_mut());
        out.push(&mut head.hidden.b);
        out.push(head.output.w.data_mut());
        out.push(&mut head.output.b);
    }
    out
}

/// Head kinds indexed like `arch.heads`, used by forward/backward.
pub(crate) fn head_kinds(arch: &Architecture) -> Vec<HeadKind> {
    arch.heads.iter().map(|h| h.kind.clone()).collect()
}
