//! Sweep axis definitions shared by the hardware and scenario sweeps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sweep dimension: an explicit list or an evenly spaced range.
///
/// JSON forms: `[1, 2, 4]`, `{"linear": {"min": 1, "max": 9, "steps": 5}}`,
/// `{"geometric": {"min": 8, "max": 512, "steps": 25}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Linear { min: f64, max: f64, steps: u32 },
    Geometric { min: f64, max: f64, steps: u32 },
    #[serde(untagged)]
    List(Vec<f64>),
}

/// Generated points are rounded to this many decimals so that grids are
/// identical regardless of the platform's `powf`.
const AXIS_DECIMALS: i32 = 4;

fn round(v: f64) -> f64 {
    let scale = 10f64.powi(AXIS_DECIMALS);
    (v * scale).round() / scale
}

impl Axis {
    pub fn values(&self) -> Result<Vec<f64>> {
        let values: Vec<f64> = match *self {
            Axis::List(ref v) => v.clone(),
            Axis::Linear { min, max, steps } => spaced(min, max, steps, |lo, hi, f| lo + (hi - lo) * f)?,
            Axis::Geometric { min, max, steps } => {
                if !(min > 0.0) {
                    return Err(Error::Config(format!("geometric axis needs min > 0, got {min}")));
                }
                spaced(min, max, steps, |lo, hi, f| lo * (hi / lo).powf(f))?
            }
        };
        if values.is_empty() {
            return Err(Error::EmptySweep("axis has no points".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("axis values must be finite".into()));
        }
        Ok(values)
    }
}

fn spaced(min: f64, max: f64, steps: u32, at: impl Fn(f64, f64, f64) -> f64) -> Result<Vec<f64>> {
    if !(min <= max) {
        return Err(Error::Config(format!("axis min {min} exceeds max {max}")));
    }
    Ok(match steps {
        0 => Vec::new(),
        1 => vec![round(min)],
        n => (0..n)
            .map(|i| round(at(min, max, i as f64 / (n - 1) as f64)))
            .collect(),
    })
}
