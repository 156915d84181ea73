//! The PLMP model checkpoint format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "PLMP" | version u8 = 1
//! | architecture as (tag u8, payload) fields, tag 0 terminates
//! | tensor count u32 | per tensor: name, ndim u32, dims, f64 values
//! | init_seed u64
//! ```
//!
//! Strings are a u32 length plus UTF-8 bytes. Tensor names and shapes
//! are validated against the architecture on load.

use std::fs;
use std::path::Path;

use crate::mat::Mat;

use super::params::{DenseParams, HeadParams, LstmParams};
use super::{Architecture, HeadKind, HeadSpec, ModelParams, NetError, Readout};

const MAGIC: &[u8; 4] = b"PLMP";
const VERSION: u8 = 1;

const TAG_END: u8 = 0;
const TAG_INPUT_BANDS: u8 = 1;
const TAG_CONV_FILTERS: u8 = 2;
const TAG_CONV_KERNEL: u8 = 3;
const TAG_CONV_STRIDE: u8 = 4;
const TAG_LSTM_UNITS: u8 = 5;
const TAG_READOUT: u8 = 6;
const TAG_HEADS: u8 = 7;

const KIND_CLASSIFICATION: u8 = 0;
const KIND_SCALAR: u8 = 1;
const KIND_SEQUENCE: u8 = 2;

fn push_str(bytes: &mut Vec<u8>, s: &str) {
    bytes.extend_from_slice(&(s.len() as u32).to_le_bytes());
    bytes.extend_from_slice(s.as_bytes());
}

fn push_u32_field(bytes: &mut Vec<u8>, tag: u8, value: usize) {
    bytes.push(tag);
    bytes.extend_from_slice(&(value as u32).to_le_bytes());
}

pub fn save_plmp(path: &Path, params: &ModelParams) -> Result<(), NetError> {
    let arch = &params.arch;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);

    push_u32_field(&mut bytes, TAG_INPUT_BANDS, arch.input_bands);
    push_u32_field(&mut bytes, TAG_CONV_FILTERS, arch.conv_filters);
    push_u32_field(&mut bytes, TAG_CONV_KERNEL, arch.conv_kernel);
    push_u32_field(&mut bytes, TAG_CONV_STRIDE, arch.conv_stride);
    push_u32_field(&mut bytes, TAG_LSTM_UNITS, arch.lstm_units);
    bytes.push(TAG_READOUT);
    bytes.push(match arch.readout {
        Readout::FinalState => 0,
        Readout::MeanPool => 1,
    });
    bytes.push(TAG_HEADS);
    bytes.extend_from_slice(&(arch.heads.len() as u32).to_le_bytes());
    for head in &arch.heads {
        push_str(&mut bytes, &head.name);
        match head.kind {
            HeadKind::Classification { n_classes } => {
                bytes.push(KIND_CLASSIFICATION);
                bytes.extend_from_slice(&(n_classes as u32).to_le_bytes());
            }
            HeadKind::RegressionScalar => bytes.push(KIND_SCALAR),
            HeadKind::RegressionSequence => bytes.push(KIND_SEQUENCE),
        }
        bytes.extend_from_slice(&(head.ff_units as u32).to_le_bytes());
    }
    bytes.push(TAG_END);

    let names = ModelParams::tensor_names(arch);
    let tensors = params.tensors();
    bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, data) in names.iter().zip(&tensors) {
        push_str(&mut bytes, name);
        // All tensors stored flat: shape recovery comes from the
        // architecture, so ndim 1 suffices.
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(data.len() as u32).to_le_bytes());
        for &v in *data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes.extend_from_slice(&params.init_seed.to_le_bytes());

    fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, msg: &str) -> NetError {
        NetError::CorruptCheckpoint(format!("{}: {msg}", self.path))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.at + n > self.bytes.len() {
            return Err(self.corrupt("unexpected end of file"));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, NetError> {
        let len = self.u32()?;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.corrupt("invalid UTF-8 string"))
    }
}

pub fn load_plmp(path: &Path) -> Result<ModelParams, NetError> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path: path.display().to_string(),
    };

    if r.take(4)? != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    if r.u8()? != VERSION {
        return Err(r.corrupt("unsupported version"));
    }

    let mut arch = Architecture {
        input_bands: 0,
        conv_filters: 0,
        conv_kernel: 0,
        conv_stride: 0,
        lstm_units: 0,
        readout: Readout::FinalState,
        heads: Vec::new(),
    };
    loop {
        match r.u8()? {
            TAG_END => break,
            TAG_INPUT_BANDS => arch.input_bands = r.u32()?,
            TAG_CONV_FILTERS => arch.conv_filters = r.u32()?,
            TAG_CONV_KERNEL => arch.conv_kernel = r.u32()?,
            TAG_CONV_STRIDE => arch.conv_stride = r.u32()?,
            TAG_LSTM_UNITS => arch.lstm_units = r.u32()?,
            TAG_READOUT => {
                arch.readout = match r.u8()? {
                    0 => Readout::FinalState,
                    1 => Readout::MeanPool,
                    other => return Err(r.corrupt(&format!("unknown readout {other}"))),
                }
            }
            TAG_HEADS => {
                let count = r.u32()?;
                for _ in 0..count {
                    let name = r.string()?;
                    let kind = match r.u8()? {
                        KIND_CLASSIFICATION => HeadKind::Classification {
                            n_classes: r.u32()?,
                        },
                        KIND_SCALAR => HeadKind::RegressionScalar,
                        KIND_SEQUENCE => HeadKind::RegressionSequence,
                        other => return Err(r.corrupt(&format!("unknown head kind {other}"))),
                    };
                    let ff_units = r.u32()?;
                    arch.heads.push(HeadSpec {
                        name,
                        kind,
                        ff_units,
                    });
                }
            }
            other => return Err(r.corrupt(&format!("unknown architecture tag {other}"))),
        }
    }
    arch.validate()?;

    let expected_names = ModelParams::tensor_names(&arch);
    let count = r.u32()?;
    if count != expected_names.len() {
        return Err(r.corrupt(&format!(
            "{count} tensors, architecture implies {}",
            expected_names.len()
        )));
    }
    let mut flat: Vec<Vec<f64>> = Vec::with_capacity(count);
    for expected in &expected_names {
        let name = r.string()?;
        if &name != expected {
            return Err(r.corrupt(&format!("tensor '{name}', expected '{expected}'")));
        }
        let ndim = r.u32()?;
        let mut len = 1usize;
        for _ in 0..ndim {
            len *= r.u32()?;
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        flat.push(data);
    }
    let init_seed = r.u64()?;
    if r.at != bytes.len() {
        return Err(r.corrupt("trailing bytes"));
    }

    // Rebuild the structured tensors in the shared traversal order.
    let mut params = empty_params(&arch, init_seed);
    {
        let mut slots = params.tensors_mut();
        for (slot, data) in slots.iter_mut().zip(&flat) {
            if slot.len() != data.len() {
                return Err(NetError::CorruptCheckpoint(format!(
                    "{}: tensor length {} does not match architecture ({})",
                    path.display(),
                    data.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(data);
        }
    }
    Ok(params)
}

fn empty_params(arch: &Architecture, init_seed: u64) -> ModelParams {
    let units = arch.lstm_units;
    ModelParams {
        arch: arch.clone(),
        conv_w: Mat::zeros(arch.conv_filters, arch.conv_kernel * arch.input_bands),
        conv_b: vec![0.0; arch.conv_filters],
        lstm: LstmParams {
            w_x: [(); 4].map(|_| Mat::zeros(units, arch.conv_filters)),
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
        init_seed,
    }
}
