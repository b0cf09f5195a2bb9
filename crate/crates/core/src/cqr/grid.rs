use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cumulative hazard transform of a quantile level, `H(u) = -log(1 - u)`.
pub fn hazard_transform(u: f64) -> f64 {
    -(-u).ln_1p()
}

/// Levels `0 = tau_0 < tau_1 < ... < tau_L = tau_U < 1` together with the
/// hazard increments `H(tau_{l+1}) - H(tau_l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileGrid {
    levels: Vec<f64>,
    h_jumps: Vec<f64>,
}

impl TryFrom<Vec<f64>> for QuantileGrid {
    type Error = Error;
    fn try_from(levels: Vec<f64>) -> Result<Self> {
        QuantileGrid::from_levels(levels)
    }
}

impl From<QuantileGrid> for Vec<f64> {
    fn from(g: QuantileGrid) -> Self {
        g.levels
    }
}

impl QuantileGrid {
    /// Equally spaced levels `{0, step, 2 step, ..., tau_max}`.
    pub fn build(tau_max: f64, step: f64) -> Result<Self> {
        if !(tau_max < 1.0) {
            return Err(Error::Config(format!(
                "tau_max must be below 1 (H diverges at 1), got {tau_max}"
            )));
        }
        if !(step > 0.0 && step < tau_max) {
            return Err(Error::Config(format!(
                "need 0 < step < tau_max, got step {step}, tau_max {tau_max}"
            )));
        }
        let count = (tau_max / step).round();
        if ((count * step) - tau_max).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "tau_max {tau_max} is not a multiple of step {step}"
            )));
        }
        let count = count as usize;
        let mut levels: Vec<f64> = (0..=count).map(|j| tau_max * j as f64 / count as f64).collect();
        levels[count] = tau_max;
        Self::from_levels(levels)
    }

    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 || levels[0] != 0.0 {
            return Err(Error::Config(
                "quantile grid must start at 0 and contain at least one positive level".into(),
            ));
        }
        if levels.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("quantile levels must be strictly increasing".into()));
        }
        let last = *levels.last().expect("nonempty");
        if !(last < 1.0) {
            return Err(Error::Config(format!("largest level must be below 1, got {last}")));
        }
        let h_jumps = levels
            .windows(2)
            .map(|w| hazard_transform(w[1]) - hazard_transform(w[0]))
            .collect();
        Ok(Self { levels, h_jumps })
    }

    /// All levels including `tau_0 = 0`.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// `L`, the number of positive levels.
    pub fn len(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tau(&self, j: usize) -> f64 {
        self.levels[j]
    }

    pub fn tau_max(&self) -> f64 {
        self.levels[self.len()]
    }

    /// `H(tau_{l+1}) - H(tau_l)` for `l = 0..L-1`.
    pub fn h_jumps(&self) -> &[f64] {
        &self.h_jumps
    }

    /// Index of `tau` on the grid; interpolation between levels is refused.
    pub fn index_of(&self, tau: f64) -> Result<usize> {
        self.levels
            .iter()
            .position(|&t| (t - tau).abs() <= 1e-9)
            .ok_or_else(|| Error::Level(format!("tau = {tau} is not a grid level")))
    }
}
