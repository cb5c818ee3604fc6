//! Maneuver classification from monocular traffic video abstractions:
//! autodiff engine, ground-plane geometry, quadrant scene graphs, the
//! graph/recurrent/attention classifier and a scripted traffic simulator.

pub mod autodiff;
pub mod experiments;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod scene_graph;
pub mod seed;
pub mod traffic_sim;
pub mod train;

pub use autodiff::{Checkpoint, Tensor};
pub use experiments::{Runner, RunSpec};
pub use metrics::MetricsReport;
pub use model::{Model, ModelConfig, ModelError, Variant};
pub use scene_graph::{Behavior, SceneSequence};
pub use traffic_sim::{Dataset, Preset, SimError, WorldConfig};
pub use train::TrainConfig;
