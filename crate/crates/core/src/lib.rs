//! End-to-end paralinguistics toolkit.
//!
//! The pipeline runs from WAV audio to fused ensemble predictions:
//!
//! ```text
//! audio -> corpus (load, segment) -> dsp (log-Mel / raw frames)
//!       -> net (conv -> LSTM -> feedforward -> heads, trained with
//!          correlation / MSE / cross-entropy losses and imbalance-aware
//!          sampling) -> ensemble (bagging, soft voting) -> metrics
//! ```
//!
//! plus [`saliency`] for input-gradient band-importance analysis.
//!
//! All training math is `f64` and every random decision flows through a
//! seeded ChaCha8 generator, so identical seeds give bit-identical models.
//! Data-parallel stages (ensemble members, per-file extraction) use rayon
//! when the default `parallel` feature is enabled and fall back to
//! sequential loops otherwise; results are identical either way.

pub mod config;
pub mod corpus;
pub mod dataset;
pub mod dsp;
pub mod ensemble;
pub mod losses;
pub mod mat;
pub mod net;
pub mod parallel;
pub mod saliency;
pub mod sampling;

pub use mat::Mat;
