//! eDRAM retention versus temperature and the refresh count it implies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two calibration points; retention is interpolated linearly in its log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetentionModel {
    pub hot_celsius: f64,
    pub hot_retention_us: f64,
    pub cold_celsius: f64,
    pub cold_retention_us: f64,
}

impl Default for RetentionModel {
    fn default() -> Self {
        Self {
            hot_celsius: 100.0,
            hot_retention_us: 3.35,
            cold_celsius: -30.0,
            cold_retention_us: 30.0,
        }
    }
}

impl RetentionModel {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.hot_celsius,
            self.hot_retention_us,
            self.cold_celsius,
            self.cold_retention_us,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.hot_retention_us <= 0.0 || self.cold_retention_us <= 0.0 {
            return Err(Error::Config(
                "retention calibration must be finite and positive".into(),
            ));
        }
        if self.hot_celsius <= self.cold_celsius || self.hot_retention_us >= self.cold_retention_us
        {
            return Err(Error::Config(
                "retention must fall as temperature rises between the calibration points".into(),
            ));
        }
        Ok(())
    }

    /// Retention in µs at `celsius`. Temperatures outside the calibrated
    /// range are refused rather than extrapolated.
    pub fn retention_at(&self, celsius: f64) -> Result<f64> {
        self.validate()?;
        if !(celsius >= self.cold_celsius && celsius <= self.hot_celsius) {
            return Err(Error::OutOfRange(format!(
                "{celsius} °C is outside [{}, {}] °C",
                self.cold_celsius, self.hot_celsius
            )));
        }
        // Calibration points come back verbatim, not through exp(ln(.)).
        if celsius == self.hot_celsius {
            return Ok(self.hot_retention_us);
        }
        if celsius == self.cold_celsius {
            return Ok(self.cold_retention_us);
        }
        let frac = (celsius - self.cold_celsius) / (self.hot_celsius - self.cold_celsius);
        let ln = self.cold_retention_us.ln()
            + frac * (self.hot_retention_us.ln() - self.cold_retention_us.ln());
        Ok(ln.exp())
    }
}

/// Refreshes needed to keep data alive for `lifetime_us`: none while it fits
/// in one retention window, then one per extra window started.
pub fn refreshes_required(lifetime_us: f64, retention_us: f64) -> Result<u64> {
    if !(retention_us > 0.0 && retention_us.is_finite()) {
        return Err(Error::Config(format!(
            "retention must be positive, got {retention_us}"
        )));
    }
    if !(lifetime_us >= 0.0 && lifetime_us.is_finite()) {
        return Err(Error::Config(format!(
            "lifetime must be non-negative, got {lifetime_us}"
        )));
    }
    Ok(((lifetime_us / retention_us).ceil() as u64).saturating_sub(1))
}
