//! Video forgery detection with motion-aware 3D feature blocks.
//!
//! The crate is self-contained: rank-5 tensors with a small tape-based
//! autograd, the motion-capturing blocks and the two-headed network built
//! from them, a synthetic face-swap-like data generator, SGD training with
//! checkpoints, and evaluation (accuracy, AUC, anomaly heatmaps).
//!
//! ```
//! use gmlnet::network::{Model, ModelConfig};
//! use gmlnet::Tensor;
//!
//! let model = Model::build(&ModelConfig::default()).unwrap();
//! let x = Tensor::zeros(&[1, 3, 4, 8, 8]);
//! let pred = model.predict(&x).unwrap();
//! assert_eq!(pred.score.len(), 1);
//! ```

pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod network;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Dims5, FeatureMap, Scalar, Tensor};
