//! Geometry-adaptive and instruction-aware attention masks for
//! object-centric 3D scene-language decoders, with a small masked
//! multi-head attention decoder to exercise them.

pub mod ablation;
pub mod attention;
pub mod bench;
pub mod check;
pub mod error;
pub mod geo;
pub mod mask;
pub mod matrix;
pub mod scene;
pub mod scenegen;

pub use error::{Result, SlimError};
pub use geo::{DensityProfile, GeoMask, GeoParams, NeighborSets};
pub use mask::{causal_mask, compose, sparsity_stats, AttentionMask, MaskStrategy, MaskVariant};
pub use matrix::Matrix;
pub use scene::{Point3, SceneObject, SceneObjects, SegmentSpans, TokenLayout};
