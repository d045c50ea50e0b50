//! Result types shared by the runs, and JSON/CSV emission.

use std::path::Path;

use serde::{Serialize, Serializer};

use crate::duplex::train::TrajectoryPoint;
use crate::error::Result;

/// Infinite values are written as the string "Inf".
pub fn finite_or_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("Inf")
    }
}

/// Number for a CSV cell; infinities become "Inf".
pub fn fmt(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "Inf".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TtaEta {
    pub target_accuracy: f64,
    pub reached: bool,
    /// Training steps taken before the target was first seen.
    pub steps: Option<usize>,
    /// Modeled time to target, µs.
    #[serde(serialize_with = "finite_or_inf")]
    pub tta_us: f64,
    /// Modeled energy to target, relative units.
    #[serde(serialize_with = "finite_or_inf")]
    pub eta: f64,
}

impl TtaEta {
    /// First trajectory point at or above `target`, costed at a fixed per-step
    /// time and energy.
    pub fn from_trajectory(
        trajectory: &[TrajectoryPoint],
        target: f64,
        step_us: f64,
        step_energy: f64,
    ) -> Self {
        match trajectory.iter().find(|p| p.val_accuracy >= target) {
            Some(p) => Self {
                target_accuracy: target,
                reached: true,
                steps: Some(p.step),
                tta_us: p.step as f64 * step_us,
                eta: p.step as f64 * step_energy,
            },
            None => Self {
                target_accuracy: target,
                reached: false,
                steps: None,
                tta_us: f64::INFINITY,
                eta: f64::INFINITY,
            },
        }
    }
}

/// Table rows that can be written as CSV.
pub trait CsvTable {
    fn header() -> Vec<&'static str>;
    fn row(&self) -> Vec<String>;
}

pub fn to_csv<T: CsvTable>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(T::header())?;
    for r in rows {
        w.write_record(r.row())?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| crate::error::Error::Run(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

impl CsvTable for TrajectoryPoint {
    fn header() -> Vec<&'static str> {
        vec!["step", "epoch", "val_accuracy", "train_loss"]
    }

    fn row(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.epoch.to_string(),
            self.val_accuracy.to_string(),
            self.train_loss.map(|l| l.to_string()).unwrap_or_default(),
        ]
    }
}

/// Write `<stem>.json` and, when given, `<stem>.csv` under `dir`.
pub fn write_report<T: Serialize>(
    dir: &Path,
    stem: &str,
    report: &T,
    csv: Option<&str>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(dir.join(format!("{stem}.json")), json)?;
    if let Some(c) = csv {
        std::fs::write(dir.join(format!("{stem}.csv")), c)?;
    }
    Ok(())
}
