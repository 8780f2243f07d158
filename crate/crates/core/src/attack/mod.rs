//! Attack composition: feasibility, LP, RH, EV and SE, and the
//! multi-round loop that accumulates persisted flips.

mod feasibility;
mod run;
mod stages;
mod world;

use serde::{Deserialize, Serialize};

use crate::dram::{FlipDirection, FlipRecord, RowAddr};

pub use feasibility::{capabilities, check_feasibility, Capabilities, Feasibility};
pub use run::{run_expressive_attack, run_scenario};
pub use world::{World, WorldConfig, WorldError, ATTACKER_UID, NETWORK_UID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Origin {
    UPro,
    PPro,
    Website,
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetClass {
    #[serde(rename = "EPRO")]
    Epro,
    #[serde(rename = "EPUO")]
    Epuo,
    #[serde(rename = "DPRO")]
    Dpro,
    #[serde(rename = "DPUO")]
    Dpuo,
}

impl TargetClass {
    pub fn readable(self) -> bool {
        matches!(self, TargetClass::Epro | TargetClass::Dpro)
    }

    pub fn privilege_differs(self) -> bool {
        matches!(self, TargetClass::Dpro | TargetClass::Dpuo)
    }
}

/// Location preparation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lp {
    /// Object spraying.
    A1,
    /// Forced padding.
    A2,
    /// Induced replacement through deduplication.
    A3,
    /// Try and abort over page-cache reloads.
    A4,
    #[serde(rename = "none")]
    Natural,
}

/// How hammering accesses get past the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bypass {
    /// Explicit flush or non-temporal access.
    Ba1,
    /// Eviction sets.
    Ba2,
    /// Uncached DMA or RDMA memory.
    Ba3,
    /// No cache in the path at all.
    #[serde(rename = "direct")]
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pattern {
    /// Single-sided.
    Bb1,
    /// Double-sided.
    Bb2,
    /// One-location.
    Bb3,
}

/// Exploit verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvMethod {
    /// Read the target directly.
    C1,
    /// Judge from the victim's behaviour.
    C2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlushMode {
    #[default]
    Clflush,
    NonTemporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectKind {
    PageTable,
    PasswdUid,
    Opcode,
    Pointer,
}

/// One bit of a multi-round target, relative to the start of the field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetBit {
    pub byte: u32,
    pub bit: u8,
    pub direction: FlipDirection,
}

pub const DEFAULT_POINTER: u64 = 0x0000_7ffe_c0de_1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub class: TargetClass,
    pub object: ObjectKind,
    /// Account whose UID field is attacked.
    #[serde(default = "alice")]
    pub user: String,
    #[serde(default)]
    pub bits: Vec<TargetBit>,
    #[serde(default = "default_offset")]
    pub offset: u32,
    #[serde(default = "default_pointer")]
    pub value: u64,
}

fn alice() -> String {
    "alice".into()
}
fn default_offset() -> u32 {
    64
}
fn default_pointer() -> u64 {
    DEFAULT_POINTER
}

impl Target {
    pub fn new(class: TargetClass, object: ObjectKind) -> Self {
        Self {
            class,
            object,
            user: alice(),
            bits: Vec::new(),
            offset: default_offset(),
            value: default_pointer(),
        }
    }
}

/// Victim-side properties a scenario declares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    #[serde(default)]
    pub cache_disabled: bool,
    #[serde(default)]
    pub victim_flushes_packets: bool,
    #[serde(default)]
    pub victim_rdma: bool,
    #[serde(default)]
    pub victim_cat: bool,
    #[serde(default)]
    pub remote_observable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackParams {
    pub origin: Origin,
    pub lp: Lp,
    pub bypass: Bypass,
    pub pattern: Pattern,
    pub ev: EvMethod,
    #[serde(default)]
    pub se_enabled: bool,
    /// Cap on aggressor accesses per hammering round.
    #[serde(default = "default_budget")]
    pub budget: u64,
    #[serde(default = "one")]
    pub aggressor_distance: u32,
    #[serde(default)]
    pub ba1_mode: FlushMode,
    /// Co-word flips are crafted to slip past ECC.
    #[serde(default)]
    pub ecc_crafted: bool,
    #[serde(default)]
    pub lp_attempts: Option<u32>,
}

fn default_budget() -> u64 {
    6000
}
fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub attack: AttackParams,
    pub target: Target,
    #[serde(default)]
    pub environment: Environment,
}

impl AttackScenario {
    /// Structural checks that do not depend on the origin's abilities.
    pub fn validate(&self) -> Result<(), String> {
        let a = &self.attack;
        let t = &self.target;
        if a.budget == 0 {
            return Err("attack.budget must be at least 1".into());
        }
        if a.aggressor_distance == 0 {
            return Err("attack.aggressor_distance must be at least 1".into());
        }
        match t.object {
            ObjectKind::PageTable if t.class != TargetClass::Dpuo => {
                Err("a page-table target is DPUO".into())
            }
            ObjectKind::PasswdUid | ObjectKind::Opcode if t.class != TargetClass::Dpro => {
                Err("passwd-uid and opcode targets are DPRO".into())
            }
            ObjectKind::PageTable if !matches!(a.lp, Lp::A1 | Lp::A2 | Lp::Natural) => {
                Err("page-table targets are placed with A1, A2 or none".into())
            }
            ObjectKind::PasswdUid | ObjectKind::Opcode if !matches!(a.lp, Lp::A4 | Lp::Natural) => {
                Err("file targets are placed with A4 or none".into())
            }
            ObjectKind::PasswdUid if t.bits.is_empty() => Err("target.bits must name at least one bit".into()),
            ObjectKind::Pointer if !t.offset.is_multiple_of(8) => Err("target.offset must be 8-byte aligned".into()),
            _ if t.bits.iter().any(|b| b.bit > 7) => Err("target bit index must be below 8".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Lp,
    Rh,
    Ev,
    Se,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Success,
    InfeasibleCombination,
    PlacementFailed,
    NoFlip,
    WrongFlip,
    NotPersisted,
    Detected(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verification {
    Verified,
    WrongFlip,
    Unobservable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub frame: u64,
    pub row: RowAddr,
    pub attempts: u32,
}

/// What one LP, RH, EV, SE round did.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundRecord {
    pub placement: Option<Placement>,
    pub aggressors: Vec<RowAddr>,
    pub hammer_accesses: u64,
    pub flips: Vec<FlipRecord>,
    pub verification: Option<Verification>,
    pub persisted: Option<bool>,
    /// Bytes of the targeted field on disk after the round.
    pub disk_field: Option<Vec<u8>>,
    pub note: Option<String>,
}

/// Techniques actually exercised, for auditing table checkmarks.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TechniqueTrace {
    pub origin: Option<Origin>,
    pub class: Option<TargetClass>,
    pub lp: Option<Lp>,
    pub bypass: Option<Bypass>,
    pub pattern: Option<Pattern>,
    pub ev: Option<EvMethod>,
    pub se: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub status: Status,
    pub failed_stage: Option<Stage>,
    pub failed_round: Option<usize>,
    pub feasibility: Feasibility,
    pub trace: TechniqueTrace,
    pub rounds: Vec<RoundRecord>,
    /// Frames charged to the attacker after placement.
    pub footprint: u64,
    pub activations: u64,
    pub ticks: u64,
}

impl AttackOutcome {
    pub fn is_success(&self) -> bool {
        self.status == Status::Success
    }
}
