//! Deterministic simulator of the rowhammer attack life-cycle.

pub mod dram;
pub mod cache;
pub mod osmem;
pub mod defense;
pub mod attack;
pub mod runner;

pub use attack::{AttackOutcome, AttackScenario, Stage, Status, World, WorldConfig};
pub use defense::{Countermeasure, Verdict};
pub use runner::{RunRecord, ScenarioConfig};
