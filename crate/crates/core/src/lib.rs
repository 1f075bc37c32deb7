//! Hierarchical soft clustering at downsampling boundaries.
//!
//! A fully convolutional network loses resolution at every strided layer. At
//! each such boundary this crate groups the fine pixels around the seeds of the
//! downsampled map (a restricted temperature softmax over the 3×3 block of
//! neighbouring seeds) and later uses those groupings, instead of bilinear
//! interpolation, to carry coarse predictions back to full resolution.
//!
//! - [`grid`]: feature and label grids, pooling, bilinear resampling, projections
//! - [`cluster`]: candidate windows, soft and hard assignment, the `ASF1` field format
//! - [`decode`]: single-level and hierarchical cluster decoding
//! - [`grad`]: hand-written adjoints and a finite-difference checker
//! - [`toy`]: a small trainable network comparing cluster and bilinear decoding
//! - [`superpixel`]: training-free hierarchical superpixels from colour and position
//! - [`metrics`]: ASA, boundary recall, undersegmentation error, mIoU
//! - [`io`]: netpbm images, CSV label maps, JSON reports
//! - [`gradcheck`]: the finite-difference report behind the `gradcheck` command

pub mod cluster;
pub mod decode;
pub mod error;
pub mod grad;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod superpixel;
pub mod toy;

pub use cluster::{
    candidate_seeds, full_soft_assign, hard_assign, similarity, soft_assign, AssignmentField,
    ClusteringConfig, DenseAssignment, ProjectionPair, SeedGrid, Similarity,
};
pub use decode::{compose_hard_labels, decode_hierarchy, decode_once, DecodePlan};
pub use error::{Error, Result};
pub use grad::{backward_decode, backward_soft_assign, finite_diff_check, FieldGradient};
pub use grid::{avg_pool2, bilinear_upsample, project, Dims, Downsample, FeatureMap, LabelMap, Matrix};
