use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::{AttackParams, AttackScenario, Environment, Target, WorldConfig};
use crate::cache::CacheConfig;
use crate::defense::Countermeasure;
use crate::dram::{
    generate, stripe, DramConfig, DramGeometry, FaultEntry, FaultGenParams, FaultMap, FlipDirection, RowAddr,
    StripeParams,
};
use crate::osmem::OsConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("syntax error{}: {message}", at(*line))]
    Syntax { line: Option<usize>, message: String },
    /// `field` is the dotted path where `name` appeared.
    #[error("unknown identifier `{name}` in `{field}`{}", at(*line))]
    UnknownIdentifier { field: String, name: String, line: Option<usize> },
    #[error("constraint violated: {0}")]
    Constraint(String),
}

fn at(line: Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

/// How a scenario takes part in a defense evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Canonical,
    Bypass,
    Probe,
}

/// One vulnerable cell addressed by row and byte within the row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    #[serde(default)]
    pub bank: u32,
    pub row: u32,
    pub byte: u32,
    pub bit: u8,
    pub direction: FlipDirection,
    #[serde(default = "default_threshold")]
    pub threshold: u32,
    #[serde(default = "one")]
    pub probability: f64,
    #[serde(default = "radius")]
    pub blast_radius: u32,
}

fn default_threshold() -> u32 {
    64
}
fn one() -> f64 {
    1.0
}
fn radius() -> u32 {
    1
}

impl FaultSpec {
    fn entry(&self, g: &DramGeometry) -> FaultEntry {
        let c = g.coordinate_of(RowAddr { bank: self.bank, row: self.row }, self.byte, self.bit);
        FaultEntry {
            victim: c,
            direction: self.direction,
            threshold: self.threshold,
            probability: self.probability,
            blast_radius: self.blast_radius,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultsSection {
    pub entries: Vec<FaultSpec>,
    pub stripe: Vec<StripeParams>,
    pub generate: Option<FaultGenParams>,
    /// Cells that become vulnerable after defenses are installed.
    pub late: Vec<FaultSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default)]
    pub dram: DramConfig,
    #[serde(default)]
    pub faults: FaultsSection,
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default)]
    pub os: OsConfig,
    pub attack: AttackParams,
    pub target: Target,
    #[serde(default)]
    pub environment: Environment,
    #[serde(default, rename = "defense", skip_serializing_if = "Vec::is_empty")]
    pub defenses: Vec<Countermeasure>,
}

impl ScenarioConfig {
    pub fn scenario(&self) -> AttackScenario {
        AttackScenario {
            attack: self.attack.clone(),
            target: self.target.clone(),
            environment: self.environment,
        }
    }

    /// World without the scenario's defenses; `evaluate` adds them.
    pub fn world(&self) -> Result<WorldConfig, ConfigError> {
        let g = &self.dram.geometry;
        let bad = |e: crate::dram::DramError| ConfigError::Constraint(e.to_string());
        self.dram.validate().map_err(bad)?;
        let mut faults = FaultMap::new(g, self.faults.entries.iter().map(|f| f.entry(g)).collect()).map_err(bad)?;
        for s in &self.faults.stripe {
            faults.extend(g, &stripe(g, s).map_err(bad)?).map_err(bad)?;
        }
        if let Some(p) = &self.faults.generate {
            faults.extend(g, &generate(g, p).map_err(bad)?).map_err(bad)?;
        }
        let late = FaultMap::new(g, self.faults.late.iter().map(|f| f.entry(g)).collect()).map_err(bad)?;
        Ok(WorldConfig {
            dram: self.dram,
            faults,
            late_faults: late,
            cache: self.cache.clone(),
            os: self.os.clone(),
            defenses: Vec::new(),
            seed: self.seed,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Constraint(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.scenario().validate().map_err(ConfigError::Constraint)?;
        self.cache.validate().map_err(|e| ConfigError::Constraint(e.to_string()))?;
        for d in &self.defenses {
            d.validate().map_err(|e| ConfigError::Constraint(e.to_string()))?;
        }
        self.world().map(|_| ())
    }

    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_toml().as_bytes()))
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// First line assigning or opening `key`.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let t = l.trim_start().trim_start_matches('[').trim_start();
        t.strip_prefix(key).is_some_and(|rest| {
            let rest = rest.trim_start();
            rest.starts_with('=') || rest.starts_with(']') || rest.starts_with('.')
        })
    })
    .map(|i| i + 1)
}

fn from_value(value: toml::Value, text: &str) -> Result<ScenarioConfig, ConfigError> {
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let msg = e.inner().to_string();
        for (marker, is_key) in [("unknown field `", true), ("unknown variant `", false)] {
            if let Some(rest) = msg.split(marker).nth(1) {
                let name = rest.split('`').next().unwrap_or_default().to_string();
                let key = if is_key { name.as_str() } else { path.rsplit('.').next().unwrap_or_default() };
                let line = line_of_key(text, key);
                return ConfigError::UnknownIdentifier { field: path, name, line };
            }
        }
        let last = path.rsplit('.').next().unwrap_or_default();
        ConfigError::Syntax { line: line_of_key(text, last), message: format!("{path}: {msg}") }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_value(text: &str) -> Result<toml::Table, ConfigError> {
    text.parse::<toml::Table>().map_err(|e| ConfigError::Syntax {
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().to_string(),
    })
}

/// Overlays `patch` onto `base`, recursing into tables.
pub fn deep_merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Raw table with `[[variant]]` overlays applied; one per variant.
pub fn expand_variants(text: &str) -> Result<Vec<toml::Value>, ConfigError> {
    let mut table = parse_value(text)?;
    let variants = match table.remove("variant") {
        None => return Ok(vec![toml::Value::Table(table)]),
        Some(toml::Value::Array(v)) => v,
        Some(_) => return Err(ConfigError::Constraint("`variant` must be an array of tables".into())),
    };
    if variants.is_empty() {
        return Err(ConfigError::Constraint("`variant` is empty".into()));
    }
    Ok(variants
        .into_iter()
        .map(|v| {
            let mut base = toml::Value::Table(table.clone());
            deep_merge(&mut base, v);
            base
        })
        .collect())
}

/// Parses one scenario file; a file with variants yields one config each.
pub fn parse_configs(text: &str) -> Result<Vec<ScenarioConfig>, ConfigError> {
    expand_variants(text)?.into_iter().map(|v| from_value(v, text)).collect()
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let mut all = parse_configs(text)?;
    if all.len() != 1 {
        return Err(ConfigError::Constraint(format!("expected one scenario, found {}", all.len())));
    }
    Ok(all.remove(0))
}

/// Numeric range `start:end:step`, end inclusive.
pub fn parse_range(spec: &str) -> Result<Vec<f64>, ConfigError> {
    let bad = || ConfigError::Constraint(format!("range `{spec}` is not start:end:step"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let [start, end, step] = parts[..] else { return Err(bad()) };
    if step.is_nan() || step <= 0.0 || end < start {
        return Err(bad());
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

/// Sets a dotted path inside a raw config, keeping integers integral.
pub fn set_path(value: &mut toml::Value, path: &str, x: f64) -> Result<(), ConfigError> {
    let mut cur = value;
    let keys: Vec<&str> = path.split('.').collect();
    for k in &keys[..keys.len() - 1] {
        cur = cur
            .as_table_mut()
            .ok_or_else(|| ConfigError::Constraint(format!("`{path}` does not name a table path")))?
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let last = keys[keys.len() - 1];
    let t = cur
        .as_table_mut()
        .ok_or_else(|| ConfigError::Constraint(format!("`{path}` does not name a table path")))?;
    let integral = !matches!(t.get(last), Some(toml::Value::Float(_))) && x.fract() == 0.0;
    let v = if integral { toml::Value::Integer(x as i64) } else { toml::Value::Float(x) };
    t.insert(last.to_string(), v);
    Ok(())
}

/// One config per value of `param` over the range.
pub fn sweep_configs(text: &str, param: &str, range: &str) -> Result<Vec<ScenarioConfig>, ConfigError> {
    let values = parse_range(range)?;
    let base = expand_variants(text)?;
    let mut out = Vec::new();
    for b in base {
        for &x in &values {
            let mut v = b.clone();
            set_path(&mut v, param, x)?;
            if let Some(t) = v.as_table_mut() {
                let name = t.get("name").and_then(|n| n.as_str()).unwrap_or("sweep").to_string();
                t.insert("name".into(), toml::Value::String(format!("{name} {param}={x}")));
            }
            out.push(from_value(v, text)?);
        }
    }
    Ok(out)
}
