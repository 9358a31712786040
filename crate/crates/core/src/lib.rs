//! Federated averaging under free-rider attacks, with STD, Autoencoder,
//! DAGMM and STD-DAGMM detectors and a differential-privacy extension.
//!
//! Every run is a pure function of its resolved configuration and seed.

pub mod attacks;
pub mod config;
pub mod data;
pub mod detect;
pub mod evalharness;
pub mod fedsim;
pub mod model;
pub mod numkit;
pub mod privacy;
pub mod seeding;
pub mod selftest;
