//! Silent-speech sentence recognition from six-axis inertial windows:
//! preprocessing, synthetic data generation, a banded-attention encoder
//! trained with CTC + cross-entropy, decoding, and evaluation protocols.

pub mod autodiff;
pub mod checkpoint;
pub mod ctc;
pub mod dataset;
pub mod error;
pub mod model;
mod rng;
pub mod signal;
pub mod trainer;
