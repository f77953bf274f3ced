//! Longitudinal CNN + GRU classification of volume sequences with
//! longitudinal pooling and a monotonicity (consistency) penalty.

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod objectives;
pub mod parallel;
pub mod rng;
pub mod saliency;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Writes an `f32` config value as its shortest decimal so printed configs
/// read `0.3` rather than `0.30000001192092896`.
pub(crate) fn short_f32<S: serde::Serializer>(
    v: &f32,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(v.to_string().parse().expect("f32 display parses as f64"))
}
