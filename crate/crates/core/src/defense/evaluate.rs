use serde::{Deserialize, Serialize};

use super::Countermeasure;
use crate::attack::{run_scenario, AttackOutcome, AttackScenario, Stage, World, WorldConfig, WorldError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    /// The defended run stopped at this stage.
    Blocked(Stage),
    Bypassed,
    /// The attack fails even without the defense.
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub verdict: Verdict,
    pub baseline: AttackOutcome,
    pub defended: Option<AttackOutcome>,
}

/// Runs the scenario on `base` without and then with `defenses`.
pub fn evaluate(
    scenario: &AttackScenario,
    base: &WorldConfig,
    defenses: &[Countermeasure],
) -> Result<Evaluation, WorldError> {
    let mut plain = base.clone();
    plain.defenses.clear();
    let baseline = run_scenario(scenario, &mut World::new(&plain)?);
    if !baseline.is_success() {
        return Ok(Evaluation { verdict: Verdict::NotApplicable, baseline, defended: None });
    }
    let mut guarded = plain;
    guarded.defenses = defenses.to_vec();
    let defended = run_scenario(scenario, &mut World::new(&guarded)?);
    let verdict = if defended.is_success() {
        Verdict::Bypassed
    } else {
        Verdict::Blocked(defended.failed_stage.unwrap_or(Stage::Lp))
    };
    Ok(Evaluation { verdict, baseline, defended: Some(defended) })
}

/// A countermeasure is reliable when every probe it faced was blocked.
pub fn reliable<'a>(verdicts: impl IntoIterator<Item = &'a Verdict>) -> bool {
    verdicts.into_iter().all(|v| matches!(v, Verdict::Blocked(_)))
}
