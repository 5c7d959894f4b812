//! Two-stage protection for face images against deepfake pipelines.
//!
//! Stage one crafts a universal perturbation that disrupts toy face
//! generators; stage two layers a masked perturbation on top that poisons
//! toy face detectors, so that scraped protected images neither forge
//! cleanly nor survive the attacker's data-collection step. A harness
//! simulates the attacker retraining on protected data to measure how long
//! each defense persists.

pub mod cli;
pub mod fusion;
pub mod harness;
pub mod interruption;
pub mod metrics;
pub mod numerics;
pub mod poisoning;
pub mod rng;
pub mod runtime;
pub mod zoo;
