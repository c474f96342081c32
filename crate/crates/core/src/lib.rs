//! Diversified multi-replica execution: a toy fixed-width ISA, an
//! assembler, an independent per-replica layout engine, a lock-step
//! replica monitor, fault injection and the detection-bound analysis.

pub mod corpus;
pub mod diversifier;
pub mod image;
pub mod isa;
pub mod program;
pub mod machine;
pub mod canonical;
pub mod monitor;
pub mod faults;
pub mod analysis;
