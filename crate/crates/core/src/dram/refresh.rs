use serde::{Deserialize, Serialize};

use super::DramError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefreshMode {
    #[default]
    Standard,
    Doubled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefreshConfig {
    pub interval: u64,
    #[serde(default)]
    pub mode: RefreshMode,
}

impl Default for RefreshConfig {
    fn default() -> Self {
        Self {
            interval: 8192,
            mode: RefreshMode::Standard,
        }
    }
}

impl RefreshConfig {
    pub fn validate(&self) -> Result<(), DramError> {
        if self.interval < 2 {
            return Err(DramError::InvalidRefresh(self.interval));
        }
        Ok(())
    }

    /// Ticks between two refreshes of the same row.
    pub fn effective_interval(&self) -> u64 {
        match self.mode {
            RefreshMode::Standard => self.interval,
            RefreshMode::Doubled => self.interval / 2,
        }
    }
}

/// Round-robin schedule: row `r` is refreshed whenever
/// `tick % I == r * I / rows`, in every bank at once.
#[derive(Debug, Clone)]
pub(crate) struct RefreshSchedule {
    interval: u64,
    by_phase: Vec<Vec<u32>>,
    last: Option<u64>,
}

impl RefreshSchedule {
    pub fn new(config: &RefreshConfig, rows_per_bank: u32) -> Self {
        let interval = config.effective_interval();
        let mut by_phase = vec![Vec::new(); interval as usize];
        for r in 0..rows_per_bank {
            let phase = r as u64 * interval / rows_per_bank as u64;
            by_phase[phase as usize].push(r);
        }
        Self {
            interval,
            by_phase,
            last: None,
        }
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }

    /// Rows (within a bank) whose refresh falls in `(last, tick]`, in time
    /// order. Only the most recent interval matters when catching up.
    pub fn advance(&mut self, tick: u64) -> Vec<u32> {
        let from = match self.last {
            Some(l) if l >= tick => return Vec::new(),
            Some(l) => l + 1,
            None => 0,
        };
        let from = from.max((tick + 1).saturating_sub(self.interval));
        self.last = Some(tick);
        let mut out = Vec::new();
        for t in from..=tick {
            out.extend_from_slice(&self.by_phase[(t % self.interval) as usize]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_row_every_two_ticks() {
        let cfg = RefreshConfig { interval: 8, mode: RefreshMode::Standard };
        let mut s = RefreshSchedule::new(&cfg, 4);
        let per_tick: Vec<Vec<u32>> = (0..16).map(|t| s.advance(t)).collect();
        for (t, rows) in per_tick.iter().enumerate() {
            if t % 2 == 0 {
                assert_eq!(rows, &vec![((t % 8) / 2) as u32]);
            } else {
                assert!(rows.is_empty());
            }
        }
    }

    #[test]
    fn doubled_halves_interval() {
        let cfg = RefreshConfig { interval: 8, mode: RefreshMode::Doubled };
        assert_eq!(cfg.effective_interval(), 4);
        let mut s = RefreshSchedule::new(&cfg, 4);
        let rows: Vec<u32> = (0..4).flat_map(|t| s.advance(t)).collect();
        assert_eq!(rows, vec![0, 1, 2, 3]);
    }

    #[test]
    fn catch_up_covers_every_row_once() {
        let cfg = RefreshConfig { interval: 16, mode: RefreshMode::Standard };
        let mut s = RefreshSchedule::new(&cfg, 4);
        s.advance(0);
        let mut rows = s.advance(1000);
        rows.sort();
        assert_eq!(rows, vec![0, 1, 2, 3]);
    }

    #[test]
    fn interval_below_two_rejected() {
        assert!(RefreshConfig { interval: 1, mode: RefreshMode::Standard }.validate().is_err());
    }
}
