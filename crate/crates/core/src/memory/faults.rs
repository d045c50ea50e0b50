//! Read-fault injection for data held in eDRAM.
//!
//! Within retention each value reads back correctly with probability
//! `read_yield`; a faulty read returns uniform noise over the range of the
//! tensor being read. Data that outlived retention without a refresh reads
//! back as noise everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultModel {
    pub read_yield: f64,
    pub seed: u64,
}

impl Default for FaultModel {
    fn default() -> Self {
        Self {
            read_yield: 0.999,
            seed: 0,
        }
    }
}

impl FaultModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.read_yield > 0.0 && self.read_yield <= 1.0) {
            return Err(Error::Config(format!(
                "read_yield must be in (0, 1], got {}",
                self.read_yield
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FaultInjector {
    read_yield: f64,
    expired: bool,
    rng: ChaCha8Rng,
    pub values_read: u64,
    pub values_corrupted: u64,
}

impl FaultInjector {
    /// `expired` marks stored activations as having outlived retention.
    pub fn new(model: &FaultModel, expired: bool) -> Result<Self> {
        model.validate()?;
        Ok(Self {
            read_yield: model.read_yield,
            expired,
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            values_read: 0,
            values_corrupted: 0,
        })
    }

    /// Read of short-lived data (always within retention).
    pub fn read(&mut self, t: &mut Tensor) {
        self.read_values(t.data_mut(), false);
    }

    /// Read of activations kept for the backward pass.
    pub fn read_stored(&mut self, t: &mut Tensor) {
        let expired = self.expired;
        self.read_values(t.data_mut(), expired);
    }

    pub fn read_values(&mut self, values: &mut [f64], expired: bool) {
        let range = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let p_fault = 1.0 - self.read_yield;
        self.values_read += values.len() as u64;
        for v in values.iter_mut() {
            if expired || self.rng.gen::<f64>() < p_fault {
                *v = if range > 0.0 {
                    self.rng.gen_range(-range..=range)
                } else {
                    0.0
                };
                self.values_corrupted += 1;
            }
        }
    }
}

/// Model one read of `values` that were written `lifetime_us` ago.
pub fn read_with_faults(
    values: &[f64],
    model: &FaultModel,
    lifetime_us: f64,
    retention_us: f64,
    refreshed: bool,
) -> Result<Vec<f64>> {
    let expired = lifetime_us > retention_us && !refreshed;
    let mut inj = FaultInjector::new(model, expired)?;
    let mut out = values.to_vec();
    inj.read_values(&mut out, expired);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_yield_is_identity() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64 * 0.01).collect();
        let m = FaultModel {
            read_yield: 1.0,
            seed: 1,
        };
        assert_eq!(read_with_faults(&v, &m, 1.0, 3.35, false).unwrap(), v);
    }

    #[test]
    fn corrupted_fraction_matches_yield() {
        let v = vec![1.0; 1_000_000];
        let m = FaultModel {
            read_yield: 0.999,
            seed: 42,
        };
        let out = read_with_faults(&v, &m, 1.0, 3.35, false).unwrap();
        let bad = out.iter().filter(|&&x| x != 1.0).count() as f64 / v.len() as f64;
        assert!((0.0008..=0.0012).contains(&bad), "{bad}");
    }

    #[test]
    fn expired_reads_are_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..200_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = FaultModel {
            read_yield: 0.999,
            seed: 9,
        };
        let out = read_with_faults(&v, &m, 10.0, 3.35, false).unwrap();
        let n = v.len() as f64;
        let (ma, mb) = (v.iter().sum::<f64>() / n, out.iter().sum::<f64>() / n);
        let cov: f64 = v
            .iter()
            .zip(&out)
            .map(|(a, b)| (a - ma) * (b - mb))
            .sum::<f64>()
            / n;
        let sa = (v.iter().map(|a| (a - ma).powi(2)).sum::<f64>() / n).sqrt();
        let sb = (out.iter().map(|b| (b - mb).powi(2)).sum::<f64>() / n).sqrt();
        assert!((cov / (sa * sb)).abs() < 0.01);
        // A refresh keeps expired data readable.
        let kept = read_with_faults(
            &v,
            &FaultModel {
                read_yield: 1.0,
                seed: 9,
            },
            10.0,
            3.35,
            true,
        )
        .unwrap();
        assert_eq!(kept, v);
    }

    #[test]
    fn deterministic_under_seed() {
        let v = vec![0.5; 10_000];
        let m = FaultModel {
            read_yield: 0.99,
            seed: 3,
        };
        assert_eq!(
            read_with_faults(&v, &m, 1.0, 3.35, false).unwrap(),
            read_with_faults(&v, &m, 1.0, 3.35, false).unwrap()
        );
    }

    #[test]
    fn rejects_bad_yield() {
        assert!(FaultModel {
            read_yield: 0.0,
            seed: 0
        }
        .validate()
        .is_err());
        assert!(FaultModel {
            read_yield: 1.5,
            seed: 0
        }
        .validate()
        .is_err());
    }
}
