//! The standard components.

pub mod basic;
pub mod buffer;
pub mod parallel;
pub mod sort;

pub use basic::{
    collect, filter, for_each, from_vec, generate, map, pull_vec, pump, stream_pull, stream_sink, stream_source,
    Collected,
};
pub use buffer::{delay, passive_delay, passive_reverse, reverse, PassiveBuffer};
pub use parallel::{parallel, DEFAULT_BATCH_SIZE};
pub use sort::{passive_sorter, passive_sorter_by, sort, sort_by, PassiveSorter};
