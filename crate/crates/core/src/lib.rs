//! Pipelined UDP federated averaging.
//!
//! Clients train locally and stream their weights as fixed-size chunks to a
//! server whose receive, aggregate, and transmit stages run on separate
//! lanes connected by single-producer/single-consumer rings.

pub mod aggregator;
pub mod client;
pub mod harness;
pub mod metrics;
pub mod ring;
pub mod server;
pub mod tcp;
pub mod trainer;
pub mod transport;
pub mod wire;

pub use aggregator::{Accumulator, AggregationMode, GlobalParams};
pub use transport::{Endpoint, LossDirection, LossPolicy};
pub use wire::{ChunkLayout, ControlKind, DataChunk, Packet, CHUNK_CAPACITY};
