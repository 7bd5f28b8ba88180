//! Correctness tooling: structural audit, operation oracle, randomized
//! stress driver and scripted latch interleavings.

pub mod audit;
pub mod oracle;
pub mod script;
pub mod stress;

pub use audit::{audit, AuditReport};
pub use oracle::{oracle_replay, replay_from, LogOp, LogRecord, LogResult, OracleLog, ReplayError};
pub use script::{compatibility_matrix, scripted_interleaving, Outcome, Step, TraceEntry};
pub use stress::{run_stress, Mix, Partition, StressConfig, StressReport};
