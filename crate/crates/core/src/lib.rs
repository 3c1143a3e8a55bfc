//! Video-language pre-training with object trajectories and action queries,
//! sized to train and verify on a single CPU.

pub mod action;
pub mod assignment;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod kv;
pub mod model;
pub mod nn_core;
pub mod objectives;
pub mod synthetic_world;
pub mod trajectory;

pub use error::{Result, StoaError};
