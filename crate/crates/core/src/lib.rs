//! Shape-aware face swapping on a procedural face world.
//!
//! The crate is organized around a fully deterministic pipeline:
//!
//! * [`world`] — a procedural face-image oracle that renders face-like
//!   images from known morphable-model parameters and emits exact ground
//!   truth for every supervision signal.
//! * [`morphable`] — the affine 3D face shape model, weak-perspective
//!   landmark projection, and coefficient recombination.
//! * [`priors`] — small trainable stand-ins for the coefficient regressor,
//!   the identity embedder, and the face segmenter, plus assembly of the
//!   shape-aware identity vector.
//! * [`generator`] — encoder/decoder generator with adaptive instance
//!   normalization and the semantic facial fusion module.
//! * [`losses`] — the complete training objective, each term independently
//!   testable, with analytic gradients.
//! * [`discriminator`] — a piecewise-linear convolutional critic with
//!   non-saturating logistic losses and an R1 gradient penalty.
//! * [`trainer`] — deterministic alternating optimization, checkpointing,
//!   and metrics logging.
//! * [`evaluator`] — identity retrieval, pose error, shape error, pairwise
//!   comparison tables, and conditioning-vector interpolation.
//!
//! All randomness flows from explicit 64-bit seeds through counter-derived
//! streams, so every artifact is reproducible bit-for-bit on one device.

pub mod container;
pub mod discriminator;
pub mod error;
pub mod evaluator;
pub mod generator;
pub mod losses;
pub mod lpips;
pub mod morphable;
pub mod nn;
pub mod ops;
pub mod priors;
pub mod seeds;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use generator::{Generator, GeneratorConfig, SwapOutput, Variant};
pub use losses::{LossReport, LossWeights};
pub use morphable::{Coefficients, LandmarkSet, Pose, ShapeBasis};
pub use priors::{IdentityEmbedding, PriorsBundle, SidVector};
pub use trainer::{Checkpoint, TrainConfig};
pub use world::{FaceSample, World, WorldSpec};
