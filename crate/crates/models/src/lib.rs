//! Trainable models: the gate cascade, per-pathology detectors and the
//! grading ensemble.

pub mod anchors;
pub mod config;
pub mod data;
pub mod detect;
pub mod ensemble;
pub mod gate;

pub use config::{builtin_config, grading_config, TrainingConfig, DETECTOR_IDS};
pub use detect::{train, train_detector, Model, Output, TrainOptions, TrainOutcome};
pub use ensemble::{fuse, Ensemble, EnsembleSpec, GradePrediction, MemberSpec};
pub use gate::{correct_rotation, rotation_angle, Gatekeeper};
