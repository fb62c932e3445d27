//! Gesture-driven scene description pipeline.
//!
//! Per-frame hand landmarks flow through a keypoint classifier and a
//! temporal stabilizer into hand-state changes and keyframes. Keyframes and
//! two-hand composite gestures drive an orchestrator that schedules
//! captioning requests and narrates the results by priority.

pub mod backends;
pub mod color;
pub mod composite;
pub mod eval;
pub mod executor;
pub mod fixtures;
pub mod gesture;
pub mod mlp;
pub mod motion;
pub mod object_change;
pub mod orchestrator;
pub mod pipeline;
pub mod session;
pub mod stabilizer;
pub mod synth;
pub mod trace;
pub mod types;

pub use pipeline::{replay, ClockMode, Components, Pipeline, PipelineConfig, ReplayOutput};
pub use types::{Description, DescriptionKind, Frame, GestureClass, Hand, PipelineEvent, Session};
