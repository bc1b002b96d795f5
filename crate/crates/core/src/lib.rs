//! Normal distribution descriptors (NDD) for LiDAR loop-closure detection.
//!
//! A scan is split into a polar bird's-eye-view grid of rings and sectors.
//! Every cell is summarized by a Gaussian fit, which yields two numbers: the
//! probability density score of the cell's own points and the differential
//! entropy of the fit. The two `rings x sectors` matrices are stacked into the
//! descriptor. Retrieval compresses descriptors into row-sum keys held in an
//! exact KD-tree, aligns candidates with a column-sum key and scores them with
//! the Pearson correlation coefficient.
//!
//! Module map:
//!
//! * [`pointcloud`]: scan types, KITTI/CSV ingestion, preprocessing.
//! * [`descriptor`]: cell partitioning, per-cell statistics, encodings, keys.
//! * [`retrieval`]: descriptor database, KD-tree, alignment and similarity.
//! * [`evaluation`]: ground truth, precision-recall, F1/EP, sequence runner.
//! * [`synthbench`]: seeded synthetic scenes and planted-loop trajectories.
//! * [`par`]: data-parallel helpers with a sequential fallback.

pub mod descriptor;
pub mod error;
pub mod evaluation;
pub mod par;
pub mod pointcloud;
pub mod retrieval;
pub mod synthbench;

pub use descriptor::{
    build_descriptor, AlignKey, Descriptor, DescriptorConfig, Encoding, SearchKey,
};
pub use error::{NddError, Result};
pub use evaluation::{GroundTruthConfig, Metrics, PrCurve, QueryRecord};
pub use pointcloud::{Point3, PointCloud, Pose};
pub use retrieval::{
    AlignmentStrategy, DescriptorDatabase, MatchResult, Matcher, RetrievalConfig, RetrievalStrategy,
};

/// Index of a scan within its sequence.
pub type FrameId = usize;
