use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::softmax_with_temperature;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainDifficulty {
    pub sum: f64,
    pub count: u64,
    pub smoothed: Option<f64>,
}

impl DomainDifficulty {
    /// Average of every observation so far.
    pub fn running_mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Smoothed per-domain alignment difficulty: a running mean while
/// `k < T_w`, then an exponential moving average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyTracker {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub momentum: f64,
    /// Last step seen; the next update must be `step + 1`.
    pub step: usize,
    pub domains: BTreeMap<usize, DomainDifficulty>,
}

impl DifficultyTracker {
    /// `T_w = floor(ρ·T)`.
    pub fn new(total_steps: usize, warmup_ratio: f64, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&warmup_ratio) {
            return Err(Error::InvalidParameter(format!(
                "warmup ratio {warmup_ratio} outside [0, 1]"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidParameter(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(DifficultyTracker {
            total_steps,
            warmup_steps: (warmup_ratio * total_steps as f64).floor() as usize,
            momentum,
            step: 0,
            domains: BTreeMap::new(),
        })
    }

    pub fn smoothed(&self, domain: usize) -> Option<f64> {
        self.domains.get(&domain).and_then(|d| d.smoothed)
    }

    /// Folds in step `k`'s raw difficulties. Domains absent from `observed`
    /// keep their estimates untouched.
    pub fn update(&mut self, k: usize, observed: &BTreeMap<usize, f64>) -> Result<()> {
        if k != self.step + 1 {
            return Err(Error::contract(format!(
                "difficulty step {k} does not follow step {}",
                self.step
            )));
        }
        if let Some((d, g)) = observed.iter().find(|(_, g)| !(**g >= 0.0) || !g.is_finite()) {
            return Err(Error::NonFinite {
                name: format!("difficulty {g}"),
                index: *d,
            });
        }
        let beta = self.momentum;
        for (&d, &g) in observed {
            let entry = self.domains.entry(d).or_default();
            entry.sum += g;
            entry.count += 1;
            entry.smoothed = Some(if k < self.warmup_steps {
                entry.sum / entry.count as f64
            } else {
                match entry.smoothed {
                    Some(prev) => beta * prev + (1.0 - beta) * g,
                    None => g,
                }
            });
        }
        self.step = k;
        Ok(())
    }
}

/// Temperature softmax of smoothed difficulties over the active domains.
pub fn curriculum_weights(tracker: &DifficultyTracker, active: &[usize], tau: f64) -> Result<BTreeMap<usize, f64>> {
    if active.is_empty() {
        return Err(Error::contract("curriculum weights need at least one active domain"));
    }
    let scores = active
        .iter()
        .map(|&d| {
            tracker
                .smoothed(d)
                .ok_or_else(|| Error::contract(format!("domain {d} has no difficulty estimate")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let w = softmax_with_temperature(&scores, tau)?;
    Ok(active.iter().copied().zip(w).collect())
}

/// Equal weights `1/n`, the reference the curriculum is compared against.
pub fn uniform_weights(active: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if active.is_empty() {
        return Err(Error::contract("uniform weights need at least one active domain"));
    }
    let w = 1.0 / active.len() as f64;
    Ok(active.iter().map(|&d| (d, w)).collect())
}
