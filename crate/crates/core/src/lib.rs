//! Class-selectivity robustness laboratory: a small `f64` autodiff engine,
//! compact CNNs with per-ReLU activation taps, the class selectivity index and
//! its training regularizer, FGSM/PGD attacks, parametric image corruptions,
//! and gradient-variability and dimensionality analyses.

pub mod analysis;
pub mod attacks;
pub mod corruptions;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod rng;
pub mod selectivity;
pub mod stns;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use models::{Mode, Network, NetworkSpec, UnitActivations};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
