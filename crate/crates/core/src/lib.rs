//! Incremental 2D mosaicking of ordered aerial frames.
//!
//! Frames flow through [`imaging`] (decode, denoise, resize, equalize),
//! [`features`] (ORB keypoints with steered BRIEF descriptors),
//! [`matching`] (hashed Hamming-space nearest neighbours), [`geometry`]
//! (DLT + RANSAC homographies) and into a growing [`mosaic`] canvas. The
//! [`pipeline`] module runs those stages concurrently and [`synthbench`]
//! generates synthetic flights with exact ground truth to score the result.
//!
//! Data-parallel inner loops use rayon when the `parallel` feature is on
//! (the default); without it every loop runs sequentially and results are
//! bit-identical either way.

pub mod features;
pub mod geometry;
pub mod imaging;
pub mod matching;
pub mod mosaic;
mod par;
pub use par::with_threads;
pub mod pipeline;
pub mod synthbench;

pub use features::{Descriptor256, FeatureConfig, FeatureSet, Keypoint};
pub use geometry::{Homography, Point2, RansacParams, RansacResult};
pub use imaging::{ImageGray, Pyramid};
pub use matching::{BinaryIndex, MatchConfig, MatchPair};
pub use mosaic::{FramePose, MosaicCanvas, Snapshot};
pub use pipeline::{RunConfig, RunOutput, Telemetry};
