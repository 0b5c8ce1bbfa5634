//! Volume-preserving neural networks (VPNNs) with hand-derived backpropagation.
//!
//! Hidden layers are built from rotation, permutation, diagonal, and bias
//! sublayers — all volume preserving — followed by a coupled activation
//! that squashes pairwise while keeping |det J| = 1. A fixed row-orthonormal
//! downsizer maps the hidden width to the class count. Because every hidden
//! map preserves volume, gradients can neither vanish nor explode on average,
//! which this crate demonstrates with a finite-difference gradient oracle, a
//! numerical volume checker, and a layer-wise learning profiler.
//!
//! The crate is self-contained: dense math, seeded RNG, dataset handling,
//! SGD-with-momentum training, and model serialization are all here.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod math;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sublayers;

pub use error::{Error, Result};
pub use model::{ForwardCache, Model, ModelConfig, Variant};
pub use params::{GradientSet, ParamLocator, Side};
pub use rng::SeededRng;
