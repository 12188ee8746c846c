//! Non-contact gaze-to-shelf mapping toolkit.
//!
//! The library models a camera mounted on a shelf-like panel that watches a
//! user standing in front of it, and maps where on the panel the user is
//! looking. It is organised as a set of small, independently testable
//! modules:
//!
//! - [`geometry`] — panel/camera models, pinhole projection, ray–plane
//!   intersection, grid-cell indexing, and rectangle-IoU scoring.
//! - [`headpose`] — perspective-n-point head pose recovery from 2-D facial
//!   landmarks via Levenberg–Marquardt.
//! - [`costmodel`] — analytic multiply–add cost model for standard vs
//!   depthwise-separable convolutions.
//! - [`nets`] — a minimal dense-network stack (hand-written backprop), the
//!   two-eye gaze matcher, a triplet-loss embedder, and gradient checking.
//! - [`synthgen`] — deterministic synthetic gaze-session generator.
//! - [`pipeline`] — bounded-queue multi-stage execution engine with worker
//!   pools and throughput reporting.
//! - [`qsim`] — discrete-event queueing simulator used to predict pipeline
//!   throughput independently of the threaded engine.
//! - [`idsync`] — cross-device identity registry with a length-prefixed JSON
//!   wire protocol.
//! - [`evaluation`] — dwell aggregation, trial scoring, and accuracy
//!   reporting.
//! - [`config`] / [`runner`] — application configuration and the end-to-end
//!   flow used by the command-line front end.

pub mod config;
pub mod costmodel;
pub mod evaluation;
pub mod geometry;
pub mod headpose;
pub mod idsync;
pub mod nets;
pub mod pipeline;
pub mod qsim;
pub mod runner;
pub mod synthgen;


pub use config::AppConfig;
pub use geometry::{CameraExtrinsics, CameraIntrinsics, GridCell, PanelConfig, PanelPoint, Pose};
pub use headpose::{FaceModel3D, LandmarkSet2D, PoseEstimate};
pub use nets::{DenseNet, Embedder, EyeFeature, MatchNet};
pub use synthgen::{GazeSample, NoiseModel, ScenarioSpec};
