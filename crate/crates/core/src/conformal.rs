//! Split conformal prediction over trajectory-level scores.
//!
//! Each trajectory contributes one score per state, `R = max_t |x̂(t) − x(t)|`.
//! The band radius for a state is the `⌈(n+1)(1−α)⌉`-th smallest calibration
//! score, infinite when that rank exceeds `n`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::Trajectory;

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("calibration needs at least {needed} trajectories for a finite band at this alpha, got {got}")]
    InsufficientCalibration { needed: usize, got: usize },
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("trajectory {index}: {message}")]
    Mismatch { index: usize, message: String },
    #[error("state column {column} out of range for {width} columns")]
    Column { column: usize, width: usize },
}

/// 1-based rank of the split-conformal quantile, or `None` when it exceeds `n`.
pub fn quantile_rank(n: usize, alpha: f64) -> Option<usize> {
    let rank = ((n as f64 + 1.0) * (1.0 - alpha) - 1e-12).ceil().max(1.0) as usize;
    (rank <= n).then_some(rank)
}

/// Smallest calibration size with a finite quantile at `alpha`.
pub fn min_calibration_size(alpha: f64) -> usize {
    (1..).find(|&n| quantile_rank(n, alpha).is_some()).unwrap_or(usize::MAX)
}

fn check_alpha(alpha: f64) -> Result<(), ConformalError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(ConformalError::InvalidAlpha(alpha))
    }
}

/// Per-trajectory, per-column scores `max_t |pred − ref|`. Columns index the
/// concatenated state `[x; z]`. Rows are trajectories.
pub fn trajectory_scores(preds: &[Trajectory], refs: &[Trajectory], columns: &[usize]) -> Result<Vec<Vec<f64>>, ConformalError> {
    if preds.len() != refs.len() {
        return Err(ConformalError::Mismatch {
            index: preds.len().min(refs.len()),
            message: format!("{} predictions but {} references", preds.len(), refs.len()),
        });
    }
    preds
        .iter()
        .zip(refs)
        .enumerate()
        .map(|(index, (p, r))| {
            let mismatch = |message: String| ConformalError::Mismatch { index, message };
            if p.len() != r.len() {
                return Err(mismatch(format!("{} predicted points but {} reference points", p.len(), r.len())));
            }
            let width = p.x.first().map_or(0, Vec::len) + p.z.first().map_or(0, Vec::len);
            if let Some(&column) = columns.iter().find(|&&c| c >= width) {
                return Err(ConformalError::Column { column, width });
            }
            let mut score = vec![0.0f64; columns.len()];
            for k in 0..p.len() {
                let (tp, tr) = (p.times[k], r.times[k]);
                if (tp - tr).abs() > 1e-9 * tp.abs().max(1.0) {
                    return Err(mismatch(format!("time grids differ at point {k}: {tp} vs {tr}")));
                }
                let value = |t: &Trajectory, c: usize| {
                    let nx = t.x[k].len();
                    if c < nx {
                        t.x[k][c]
                    } else {
                        t.z[k][c - nx]
                    }
                };
                for (s, &c) in score.iter_mut().zip(columns) {
                    let e = (value(p, c) - value(r, c)).abs();
                    // NaN predictions are never covered.
                    *s = if e.is_nan() { f64::INFINITY } else { s.max(e) };
                }
            }
            Ok(score)
        })
        .collect()
}

mod radius_serde {
    //! Infinite radii are stored as `null`.
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| x.is_finite().then_some(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    pub alpha: f64,
    pub n_cal: usize,
    pub states: Vec<String>,
    /// Sorted calibration scores, one list per state.
    pub scores: Vec<Vec<f64>>,
    #[serde(with = "radius_serde")]
    pub q_hat: Vec<f64>,
}

impl ConformalCalibration {
    /// Calibrates from a score table (rows are trajectories, columns states).
    pub fn from_scores(states: Vec<String>, rows: &[Vec<f64>], alpha: f64) -> Result<Self, ConformalError> {
        check_alpha(alpha)?;
        if rows.is_empty() {
            return Err(ConformalError::InsufficientCalibration { needed: min_calibration_size(alpha), got: 0 });
        }
        let mut scores = vec![Vec::with_capacity(rows.len()); states.len()];
        for (index, row) in rows.iter().enumerate() {
            if row.len() != states.len() {
                return Err(ConformalError::Mismatch {
                    index,
                    message: format!("{} scores for {} states", row.len(), states.len()),
                });
            }
            for (col, &v) in scores.iter_mut().zip(row) {
                col.push(v);
            }
        }
        for col in &mut scores {
            col.sort_by(f64::total_cmp);
        }
        let rank = quantile_rank(rows.len(), alpha);
        let q_hat = scores.iter().map(|col| rank.map_or(f64::INFINITY, |r| col[r - 1])).collect();
        Ok(Self { alpha, n_cal: rows.len(), states, scores, q_hat })
    }

    /// Errors when any band is infinite because the calibration set is too small.
    pub fn ensure_finite(&self) -> Result<&Self, ConformalError> {
        if self.q_hat.iter().all(|q| q.is_finite()) {
            Ok(self)
        } else {
            Err(ConformalError::InsufficientCalibration { needed: min_calibration_size(self.alpha), got: self.n_cal })
        }
    }

    /// Band radius of the whole group: the largest per-state radius.
    pub fn group_radius(&self) -> f64 {
        self.q_hat.iter().fold(0.0, |m, &q| m.max(q))
    }
}

/// Calibrates on rolled-out predictions against reference trajectories.
pub fn calibrate(
    preds: &[Trajectory],
    refs: &[Trajectory],
    columns: &[usize],
    names: Vec<String>,
    alpha: f64,
) -> Result<ConformalCalibration, ConformalError> {
    check_alpha(alpha)?;
    let rows = trajectory_scores(preds, refs, columns)?;
    ConformalCalibration::from_scores(names, &rows, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub states: Vec<String>,
    pub coverage: Vec<f64>,
    pub average: f64,
    #[serde(with = "radius_serde")]
    pub band_widths: Vec<f64>,
    pub n_test: usize,
    pub ood: bool,
}

/// Average coverage below this flags the test set as out of distribution.
pub const OOD_THRESHOLD: f64 = 0.5;

impl CoverageReport {
    /// Coverage of test scores against per-state radii.
    pub fn from_scores(states: Vec<String>, radii: &[f64], rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let coverage: Vec<f64> = radii
            .iter()
            .enumerate()
            .map(|(s, &q)| {
                let hit = rows.iter().filter(|r| r[s] <= q).count();
                if n == 0 {
                    0.0
                } else {
                    hit as f64 / n as f64
                }
            })
            .collect();
        let average = if coverage.is_empty() { 0.0 } else { coverage.iter().sum::<f64>() / coverage.len() as f64 };
        Self { states, coverage, average, band_widths: radii.to_vec(), n_test: n, ood: average < OOD_THRESHOLD }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,coverage,band_width\n");
        for ((s, c), w) in self.states.iter().zip(&self.coverage).zip(&self.band_widths) {
            out.push_str(&format!("{s},{c:.16e},{w:.16e}\n"));
        }
        out.push_str(&format!("average,{:.16e},\n", self.average));
        out
    }
}

/// Empirical coverage of test trajectories under calibrated bands.
pub fn evaluate_coverage(
    cal: &ConformalCalibration,
    preds: &[Trajectory],
    refs: &[Trajectory],
    columns: &[usize],
) -> Result<CoverageReport, ConformalError> {
    if columns.len() != cal.states.len() {
        return Err(ConformalError::Mismatch {
            index: 0,
            message: format!("{} columns for {} calibrated states", columns.len(), cal.states.len()),
        });
    }
    let rows = trajectory_scores(preds, refs, columns)?;
    Ok(CoverageReport::from_scores(cal.states.clone(), &cal.q_hat, &rows))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Fast-to-slow amplification: the ratio of the medians of the per-trajectory
/// group-max scores. Intended for a sub-split of the calibration set.
pub fn estimate_amplification(slow_rows: &[Vec<f64>], fast_rows: &[Vec<f64>]) -> f64 {
    let group_max = |rows: &[Vec<f64>]| rows.iter().map(|r| r.iter().fold(0.0f64, |m, &v| m.max(v))).collect::<Vec<_>>();
    median(&mut group_max(fast_rows)) / median(&mut group_max(slow_rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducedBands {
    pub amplification: f64,
    pub slow_radius: f64,
    pub states: Vec<String>,
    #[serde(with = "radius_serde")]
    pub radii: Vec<f64>,
}

impl InducedBands {
    pub fn coverage(&self, fast_rows: &[Vec<f64>]) -> CoverageReport {
        CoverageReport::from_scores(self.states.clone(), &self.radii, fast_rows)
    }
}

/// Bands for solver-computed states: `amplification ×` the slow group radius.
pub fn induced_fast_bands(slow: &ConformalCalibration, amplification: f64, fast_states: Vec<String>) -> InducedBands {
    let slow_radius = slow.group_radius();
    let r = amplification * slow_radius;
    InducedBands { amplification, slow_radius, radii: vec![r; fast_states.len()], states: fast_states }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn rank_formula() {
        assert_eq!(quantile_rank(100, 0.1), Some(91));
        assert_eq!(quantile_rank(9, 0.1), Some(9));
        assert_eq!(quantile_rank(8, 0.1), None);
        assert_eq!(quantile_rank(19, 0.1), Some(18));
        assert_eq!(min_calibration_size(0.1), 9);
    }

    #[test]
    fn constant_scores_give_constant_radius() {
        let rows = vec![vec![0.7]; 20];
        let cal = ConformalCalibration::from_scores(names(1), &rows, 0.1).unwrap();
        assert_eq!(cal.q_hat, vec![0.7]);
    }

    #[test]
    fn small_set_is_infinite_and_round_trips() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let cal = ConformalCalibration::from_scores(names(1), &rows, 0.1).unwrap();
        assert!(cal.q_hat[0].is_infinite());
        assert!(matches!(cal.ensure_finite(), Err(ConformalError::InsufficientCalibration { needed: 9, got: 8 })));
        let back: ConformalCalibration = serde_json::from_str(&serde_json::to_string(&cal).unwrap()).unwrap();
        assert_eq!(back, cal);
    }

    #[test]
    fn in_sample_coverage() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![((i * 37) % 100) as f64, i as f64 * 0.5]).collect();
        let cal = ConformalCalibration::from_scores(names(2), &rows, 0.1).unwrap();
        let rep = CoverageReport::from_scores(cal.states.clone(), &cal.q_hat, &rows);
        assert!(rep.coverage.iter().all(|&c| c >= 0.9));
        assert!(!rep.ood);
    }

    #[test]
    fn zero_amplification_covers_nothing() {
        let rows = vec![vec![0.1]; 20];
        let cal = ConformalCalibration::from_scores(names(1), &rows, 0.1).unwrap();
        let bands = induced_fast_bands(&cal, 0.0, names(1));
        assert_eq!(bands.coverage(&[vec![0.05], vec![0.2]]).average, 0.0);
    }
}
