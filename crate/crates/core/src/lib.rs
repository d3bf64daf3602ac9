//! Score-based generative modeling of spinning-LiDAR sweeps.
//!
//! Point clouds are encoded as two-channel equirectangular range images
//! (log-depth, intensity), a noise-conditioned U-Net learns the score of the
//! image distribution with denoising score matching, and annealed Langevin
//! dynamics draws new sweeps or densifies sparse ones through posterior
//! sampling. A procedural raycasting simulator provides ground truth and the
//! metrics module implements the usual two-sample evaluation suite.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod geometry;
pub mod ingest;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod sampling;
pub mod scorenet;
pub mod synthworld;
pub mod tensor;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{PointCloud, ProjectionConfig, RangeImage, SphericalPoint};
pub use model::{NoiseLevel, ScoreModel, TrainableScore};
pub use scorenet::{ScoreNet, ScoreNetConfig};
pub use tensor::Tensor;
pub use training::NoiseSchedule;
