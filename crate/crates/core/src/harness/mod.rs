//! A Byzantine network and server for testing, and history checkers.

pub mod attacks;
pub mod fuzz;
pub mod history;
pub mod lincheck;
pub mod sim;

pub use attacks::{catalog, AttackScript, Scripted};
pub use history::{History, Kvs, OpEvent};
pub use lincheck::{check_fork_linearizable, check_linearizable, ForkViolation, Verdict, ViewEntry};
pub use sim::{Adversary, Honest, ScenarioOutcome, Sim, SimConfig};
