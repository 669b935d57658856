//! Piecewise-constant loss-mixing and learning-rate schedules.

use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub epochs: usize,
    pub xi: f64,
    pub learning_rate: f64,
    pub teacher_forcing: bool,
    /// Monitor validation after each epoch and stop after `patience`
    /// epochs without improvement, keeping the best parameters.
    #[serde(default)]
    pub early_stopping: bool,
}

impl Phase {
    pub const fn new(epochs: usize, xi: f64, learning_rate: f64, teacher_forcing: bool) -> Self {
        Self {
            epochs,
            xi,
            learning_rate,
            teacher_forcing,
            early_stopping: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub phases: Vec<Phase>,
    /// Every phase length is multiplied by this and rounded.
    pub epoch_multiplier: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub adam: AdamConfig,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            phases: vec![
                Phase::new(6, 1.0, 1e-3, true),
                Phase::new(3, 0.5, 2e-4, true),
                Phase::new(3, 0.2, 4e-5, true),
                Phase::new(9, 0.0, 4e-5, false),
                Phase {
                    early_stopping: true,
                    ..Phase::new(19, 0.0, 8e-6, false)
                },
            ],
            epoch_multiplier: 1.0,
            l2: 1e-7,
            batch_size: 16,
            patience: 3,
            adam: AdamConfig::default(),
        }
    }
}

impl Schedule {
    /// The same learning-rate phases under the localization loss alone, as
    /// used for the direct-regression baseline.
    pub fn localization_only(&self) -> Self {
        self.map_phases(|p| Phase {
            xi: 1.0,
            teacher_forcing: false,
            ..p
        })
    }

    /// The same learning-rate phases with `ξ = 0` throughout and no teacher
    /// forcing.
    pub fn robustness_only(&self) -> Self {
        self.map_phases(|p| Phase {
            xi: 0.0,
            teacher_forcing: false,
            ..p
        })
    }

    fn map_phases(&self, f: impl Fn(Phase) -> Phase) -> Self {
        Self {
            phases: self.phases.iter().copied().map(f).collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("schedule: {m}")));
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.epoch_multiplier > 0.0) || !(self.l2 >= 0.0) {
            return err("epoch_multiplier must be positive and l2 non-negative".into());
        }
        self.adam.validate()?;
        let mut prev = f64::INFINITY;
        for (i, p) in self.phases.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.xi) || !(p.learning_rate > 0.0) {
                return err(format!(
                    "phase {i} needs xi in [0, 1] and a positive learning rate"
                ));
            }
            if p.xi > prev {
                return err(format!("xi increases at phase {i}"));
            }
            if p.xi == 0.0 && p.teacher_forcing {
                return err(format!("phase {i} enables teacher forcing with xi = 0"));
            }
            prev = p.xi;
        }
        Ok(())
    }

    pub fn epochs(&self, phase: usize) -> usize {
        (self.phases[phase].epochs as f64 * self.epoch_multiplier).round() as usize
    }

    pub fn total_epochs(&self) -> usize {
        (0..self.phases.len()).map(|i| self.epochs(i)).sum()
    }
}

/// One step's losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossMix {
    pub xi: f64,
    pub l_loc: f64,
    pub l_rob: f64,
    pub l_tot: f64,
}

impl LossMix {
    pub fn compose(xi: f64, l_loc: f64, l_rob: f64) -> Self {
        Self {
            xi,
            l_loc,
            l_rob,
            l_tot: xi * l_loc + (1.0 - xi) * l_rob,
        }
    }
}
