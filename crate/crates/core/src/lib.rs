//! Episode-level data quality assessment and operator feedback for
//! teleoperated robot demonstrations.

pub mod api;
pub mod context;
pub mod episode;
pub mod evidence;
pub mod feedback;
pub mod metrics;
pub mod pipeline;
pub mod segment;
pub mod semantic;
pub mod stats;
pub mod streaming;
pub mod synth;
pub mod validation;

pub use context::TaskContext;
pub use episode::Episode;
pub use evidence::Label;
pub use metrics::MetricId;
pub use pipeline::{analyze, Assessment};
pub use segment::ThresholdProfile;
