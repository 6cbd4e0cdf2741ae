//! Latency-aware structured channel pruning planner.
//!
//! Given a channel-level description of a network and a per-layer latency
//! lookup table, this crate decides which output channels to keep under a
//! latency (or FLOPs) budget. The pipeline: gradient-based importance
//! scores per channel, per-layer latency contributions read off the lookup
//! table, grouping of channels into prune units sized by the hardware
//! latency step, and an exact chain-precedence knapsack solve, repeated
//! over a schedule of shrinking budget milestones.

pub mod engine;
pub mod error;
pub mod grouping;
pub mod importance;
pub mod knapsack;
pub mod latency;
pub mod netmodel;
pub mod trace_gen;

pub use error::{Error, Result};
