//! Satellite neural radiance fields from RPC cameras.
//!
//! The crate covers the whole pipeline: WGS84 geodesy and rational
//! polynomial cameras, ray casting in a normalized scene volume, a small
//! reverse-mode differentiation engine, the shadow-aware radiance network
//! with its uncertainty head, the training losses and optimizer, and DSM
//! extraction and scoring. A procedural scene generator with exact affine
//! cameras provides ground truth for end-to-end checks.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod exec;
pub mod geodesy;
pub mod loss;
pub mod math;
pub mod network;
pub mod ray;
pub mod render;
pub mod rpc;
pub mod synth;
pub mod trainer;

pub use geodesy::{EcefPoint, GeodeticPoint, SceneFrame, SceneNormalization};
pub use math::Vec3;
pub use rpc::{PixelCoord, RpcModel};
