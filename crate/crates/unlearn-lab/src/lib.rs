#![forbid(unsafe_code)]

//! A desk-scale laboratory for continual machine unlearning.

pub mod config;
pub mod datagen;
pub mod diffcore;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod unlearn;
