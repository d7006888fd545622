//! Deterministic simulator for class-incremental federated learning with
//! ACGAN-based generative replay, server-side model consolidation and
//! client-side consistency enforcement, plus the usual baselines.

pub mod acgan;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod protocol;
pub mod rng;
pub mod taskstream;
pub mod tensor;
pub mod trainers;

pub use acgan::{AcganConfig, AcganModel, ClassId, Group};
pub use error::{Error, Result};
pub use params::ParameterVector;
pub use tensor::Tensor;
