//! Multi-domain click-through-rate prediction with a shared transformer
//! backbone whose every layer is exposed to small per-domain ladder networks,
//! a general head for unseen domains, and masked-loss training that keeps
//! domain networks decoupled.

pub mod autodiff;
pub mod backbone;
pub mod baseline;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dsn;
pub mod error;
pub mod general;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod registry;
pub mod reps;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
