//! Multi-level transaction control over hierarchically structured shared
//! locations, as an executable library.
//!
//! Concurrent programs (small step-based machines) run under a transaction
//! controller that grants read, write, operator and temporary locks over
//! path-addressed tree locations, aggregates genuine and partial updates,
//! detects deadlocks on the wait-for relation, recovers victims by undoing
//! steps with recorded inverse operations, and commits machines that finish.
//! A deterministic round-based simulator produces replayable JSONL traces,
//! and a checker validates that every run is equivalent to a serial execution
//! of the committed machines in commit order.
//!
//! The pieces:
//!
//! - [`store`]: hierarchical value store, location paths, subsumption.
//! - [`ops`]: partial-update operators, inverses, lock-mode compatibility,
//!   update aggregation.
//! - [`workload`]: the step DSL, its parser, and deterministic step
//!   evaluation with seeded choice.
//! - [`locks`]: the lock table, `new_locks`, and blocking predicates.
//! - [`controller`]: commit, abort, deadlock handling, and recovery.
//! - [`executor`]: the per-machine automaton, partner-group firing, and
//!   round-based scheduling.
//! - [`trace`]: the JSONL trace format.
//! - [`checker`]: cleansed schedules, serial replay, and the serializability
//!   verdict.
//! - [`synth`]: random workload generation for fuzzing.
//! - [`cli`]: the `simulate`, `check`, and `fuzz` commands.

pub mod checker;
pub mod cli;
pub mod controller;
pub mod executor;
pub mod locks;
pub mod ops;
pub mod store;
pub mod synth;
pub mod trace;
pub mod workload;

pub use checker::{check_serializable, Verdict};
pub use executor::{run, RunResult, SimConfig, Simulation};
pub use ops::OperatorRegistry;
pub use store::{LocationPath, Store, StoreValue};
pub use trace::{workload_digest, Trace};
pub use workload::Workload;
