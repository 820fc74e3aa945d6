//! External-memory streaming pipelines.
//!
//! Components are wired with the `|` operator into push pipelines. The
//! framework splits the resulting flow graph into phases at blocking
//! components such as sorters, hands each phase a share of the memory
//! budget, and runs the phases in dependency order while counting every
//! item read from and written to disk.

pub mod builtin;
pub mod error;
pub mod executor;
pub mod graph;
pub mod memory;
pub mod node;
pub mod pipe;
pub mod progress;
pub mod raster;
pub mod stream;

pub use error::{Error, Result};
pub use executor::{phase_progress_weights, ExecutionTimeDb, Executor, PipelineRun};
pub use graph::{FlowGraph, PhasePlan, ValidationError};
pub use memory::{assign_memory, MaxMemory, MemoryAssignment, MemoryLedger, MemoryRequest};
pub use node::{Link, MetaValue, Node, NodeBase, NodeId, NodeKind, PropagateContext, Pull, Push};
pub use pipe::Pipeline;
pub use progress::{NullProgress, ProgressIndicator, RecordingProgress, TextProgress};
pub use stream::{BlockConfig, IoCounters, OpenMode, Record, Storage, StreamFile, TypedStream};
