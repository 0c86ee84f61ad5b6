//! Time series of full DAE states and their text encodings.
//!
//! CSV files carry one row per time (`t`, differential states, algebraic
//! variables) with 17 significant digits, so every `f64` round-trips exactly.
//! JSON files additionally carry the metadata block.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dae::{DaeSystem, InputSchedule};
use crate::linalg;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("CSV line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub system: String,
    pub parameters: BTreeMap<String, f64>,
    pub input: InputSchedule,
    pub state_names: Vec<String>,
    pub algebraic_names: Vec<String>,
}

impl TrajectoryMeta {
    pub fn for_system(sys: &DaeSystem, input: &InputSchedule) -> Self {
        Self {
            system: sys.name().to_string(),
            parameters: sys.model().parameters(),
            input: input.clone(),
            state_names: sys.model().state_names(),
            algebraic_names: sys.model().algebraic_names(),
        }
    }
}

/// Stored solution: full differential state and algebraic variables per time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn new(meta: TrajectoryMeta) -> Self {
        Self { times: Vec::new(), x: Vec::new(), z: Vec::new(), meta }
    }

    pub fn push(&mut self, t: f64, x: Vec<f64>, z: Vec<f64>) {
        self.times.push(t);
        self.x.push(x);
        self.z.push(z);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `‖g‖_∞` at every stored point.
    pub fn constraint_residuals(&self, sys: &DaeSystem) -> Vec<f64> {
        self.times
            .iter()
            .enumerate()
            .map(|(k, &t)| linalg::norm_inf(&sys.constraint(&self.x[k], &self.z[k], self.meta.input.value_at(t))))
            .collect()
    }

    pub fn max_constraint_residual(&self, sys: &DaeSystem) -> f64 {
        self.constraint_residuals(sys).into_iter().fold(0.0, f64::max)
    }

    /// Time series of one differential state.
    pub fn state(&self, i: usize) -> Vec<f64> {
        self.x.iter().map(|x| x[i]).collect()
    }

    pub fn algebraic(&self, i: usize) -> Vec<f64> {
        self.z.iter().map(|z| z[i]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for name in self.meta.state_names.iter().chain(&self.meta.algebraic_names) {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for k in 0..self.len() {
            write!(out, "{:.16e}", self.times[k]).unwrap();
            for v in self.x[k].iter().chain(&self.z[k]) {
                write!(out, ",{v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV body; the metadata is supplied by the caller.
    pub fn from_csv(text: &str, meta: TrajectoryMeta) -> Result<Self, TrajectoryError> {
        let n_x = meta.state_names.len();
        let n_z = meta.algebraic_names.len();
        let mut traj = Trajectory::new(meta);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.split(',').count() == 1 + n_x + n_z => {}
            _ => return Err(TrajectoryError::Csv { line: 1, message: format!("expected a header with {} columns", 1 + n_x + n_z) }),
        }
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| TrajectoryError::Csv { line: i + 1, message: e.to_string() })?;
            if vals.len() != 1 + n_x + n_z {
                return Err(TrajectoryError::Csv { line: i + 1, message: format!("expected {} fields, found {}", 1 + n_x + n_z, vals.len()) });
            }
            traj.push(vals[0], vals[1..1 + n_x].to_vec(), vals[1 + n_x..].to_vec());
        }
        Ok(traj)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrajectoryError> {
        write_text(path, &self.to_csv())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), TrajectoryError> {
        write_text(path, &serde_json::to_string_pretty(self)?)
    }

    pub fn read_json(path: &Path) -> Result<Self, TrajectoryError> {
        let text = fs::read_to_string(path).map_err(|source| TrajectoryError::Io { path: path.display().to_string(), source })?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), TrajectoryError> {
    fs::write(path, text).map_err(|source| TrajectoryError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let meta = TrajectoryMeta {
            system: "t".into(),
            parameters: BTreeMap::new(),
            input: InputSchedule::none(),
            state_names: vec!["a".into(), "b".into()],
            algebraic_names: vec!["c".into()],
        };
        let mut tr = Trajectory::new(meta.clone());
        tr.push(0.1, vec![1.0 / 3.0, -2.5e-300], vec![std::f64::consts::PI]);
        tr.push(1e5, vec![f64::MIN_POSITIVE, 0.0], vec![-1.0 / 7.0]);
        let back = Trajectory::from_csv(&tr.to_csv(), meta).unwrap();
        assert_eq!(back, tr);
        let json: Trajectory = serde_json::from_str(&serde_json::to_string(&tr).unwrap()).unwrap();
        assert_eq!(json, tr);
    }
}
