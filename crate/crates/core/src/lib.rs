//! Temporal system-call filtering for server programs expressed in a lifted
//! program model.
//!
//! The pipeline finds each thread's serving-phase loop by tracing, builds a
//! cross-module call graph, refines indirect edges with value-flow analysis,
//! resolves dynamically loaded code, computes the syscalls reachable from
//! each transition point and compiles them into a seccomp allow-list that is
//! installed just before the loop.

pub mod bpf;
pub mod cfg;
pub mod dll;
pub mod error;
pub mod fcg;
pub mod intrinsics;
pub mod pipeline;
pub mod pmir;
pub mod report;
pub mod sysgen;
pub mod systable;
pub mod tracer;
pub mod vfa;

pub use error::{AnalysisError, PmirError};
