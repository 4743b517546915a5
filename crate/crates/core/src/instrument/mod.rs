//! Operation counting and heap-allocation metering.
//!
//! Both meters are thread-local so benchmark workers running in separate
//! threads never observe each other's numbers.

pub mod alloc;
pub mod flops;

pub use alloc::{CountingAllocator, MemoryMeter, MemoryReport};
pub use flops::{FlopCounts, Stage};
