//! Joint fragment reassembly and conditional shape generation.
//!
//! The crate couples two flow-matching models over a shared latent shape
//! space: an assembly branch that denoises per-fragment rigid poses on
//! SO(3) x R^3, and a generation branch that denoises a latent set decoded
//! to a signed distance field. A per-layer adapter exchanges information
//! between the two so that pose evidence sharpens the generated shape and
//! the shape prior disambiguates poses.
//!
//! All numerics are generic over [`Scalar`] (f32 or f64); `f64` aliases are
//! exported at the crate root as the default precision.

pub mod adapter;
pub mod assembly;
pub mod autograd;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod generation;
pub mod manifold;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod scalar;
pub mod store;
pub mod train;
pub mod vae;

pub use scalar::Scalar;

/// Default working precision for geometry and training.
pub type Real = f64;
/// Reduced precision used by speed-sensitive training configurations.
pub type RealLow = f32;

/// 3-vector at default precision.
pub type Vec3 = nalgebra::Vector3<Real>;
/// 3x3 matrix at default precision.
pub type Mat3 = nalgebra::Matrix3<Real>;

/// Rigid pose at default precision.
pub type Pose = manifold::PoseState<Real>;
/// Pose-velocity pair at default precision.
pub type PoseVelocity = manifold::FlowTarget<Real>;
