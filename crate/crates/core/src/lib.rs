//! Compiler and cycle-accurate simulator for streaming packet parsers.
//!
//! The pipeline flow: a parser specification (JSON) is loaded into a parse
//! graph, the graph is transitively reduced, leveled and balanced, and the
//! result is compiled into per-header engine configurations (key tables,
//! shift ROMs, size LUTs) arranged as a leveled pipeline plan. The plan can
//! be executed by a bit-exact, cycle-accurate software model of the pipeline
//! and checked against a plain sequential reference parser.

pub mod bits;
pub mod cli;
pub mod graph;
pub mod layout;
pub mod model;
pub mod oracle;
pub mod sim;

pub use bits::Bits;
pub use graph::LeveledGraph;
pub use layout::{HeaderLayout, PipelinePlan, ShiftRom};
pub use model::{ParseGraph, ParseState};
pub use sim::{BusWord, PipelineInstance, Phv};
