//! Out-of-core, chunked, pull-based tensor compute and rendering.

pub mod chunk;
pub mod dtype;
pub mod engine;
pub mod error;
pub mod graph;
pub mod io;
pub mod operators;
pub mod page_table;
pub mod render;
pub mod store;

pub use chunk::{ChunkId, EmbeddingData, OperatorId, TensorMetaData};
pub use dtype::{ElementType, ScalarType};
pub use error::{Error, Result};
pub use store::{DataState, Location};
pub use engine::{ChunkRef, EngineConfig, EngineStats, Runtime, TaskContext};
pub use graph::{Node, Operator};
