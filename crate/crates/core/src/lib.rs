//! Locality-aware parallel decoding on token grids.
//!
//! A decoder-only transformer generates tokens on an N×N grid in groups,
//! driven by position query tokens under specialized attention masks.
//! Generation order is produced by pluggable schedulers (raster, random,
//! Halton, locality-aware), and recorded attention is analyzed for
//! spatial locality.

pub mod analysis;
pub mod data;
pub mod generator;
pub mod grid;
pub mod manifest;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod schedule;
pub mod trainer;

pub use grid::{GridPos, GridSpec};
pub use mask::{AttentionMask, SeqEntry, SequenceLayout, TokenKind};
pub use schedule::{GroupSizes, OrderSchedule, SchedulerConfig};
