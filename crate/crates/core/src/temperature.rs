//! Logit centering, sample-wise adaptive temperatures and ρ calibration.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::matrix::Matrix;
use crate::numerics::{check_logits, check_tau, softmax_entropy};
use crate::seed;
use crate::stats::Summary;
use rand::Rng;

/// Default size of the calibration subset used to choose ρ.
pub const DEFAULT_CALIBRATION_SUBSET: usize = 512;

/// Subtracts the mean logit. Softmax is unchanged by this shift.
pub fn center(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// `max(max_c(v̂) / ρ, 1)` for a centered logit vector.
pub fn adaptive_tau(centered: &[f64], rho: f64) -> Result<f64> {
    check_rho(rho)?;
    let top = centered.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    Ok((top / rho).max(1.0))
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho.is_finite() && rho > 0.0) {
        bail!(InvalidParameter, "rho must be finite and > 0, got {rho}");
    }
    Ok(())
}

/// How temperatures are chosen for a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemperaturePolicy {
    /// One global temperature shared by teacher and student.
    Fixed { tau: f64 },
    /// Per-sample temperatures normalizing the centered top logit to `rho`.
    Adaptive { rho: f64 },
}

impl TemperaturePolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TemperaturePolicy::Fixed { tau } => check_tau(tau),
            TemperaturePolicy::Adaptive { rho } => check_rho(rho),
        }
    }

    /// Temperature for a single logit row under this policy.
    pub fn tau_for(&self, logits: &[f64]) -> Result<f64> {
        match *self {
            TemperaturePolicy::Fixed { tau } => {
                check_tau(tau)?;
                Ok(tau)
            }
            TemperaturePolicy::Adaptive { rho } => adaptive_tau(&center(logits), rho),
        }
    }
}

/// Per-sample teacher and student temperatures for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureAssignment {
    pub teacher: Vec<f64>,
    pub student: Vec<f64>,
}

impl TemperatureAssignment {
    pub fn len(&self) -> usize {
        self.teacher.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teacher.is_empty()
    }

    /// Same temperature everywhere.
    pub fn uniform(n: usize, tau: f64) -> Self {
        Self {
            teacher: alloc::vec![tau; n],
            student: alloc::vec![tau; n],
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.teacher.len() != n || self.student.len() != n {
            bail!(
                Shape,
                "assignment has {}/{} temperatures for a batch of {n}",
                self.teacher.len(),
                self.student.len()
            );
        }
        for &t in self.teacher.iter().chain(&self.student) {
            check_tau(t)?;
        }
        Ok(())
    }
}

fn check_batch_pair(teacher: &Matrix, student: &Matrix) -> Result<()> {
    if teacher.shape() != student.shape() {
        bail!(
            Shape,
            "teacher logits {:?} vs student logits {:?}",
            teacher.shape(),
            student.shape()
        );
    }
    if teacher.rows() == 0 {
        bail!(InvalidInput, "empty batch");
    }
    for (i, (t, s)) in teacher.iter_rows().zip(student.iter_rows()).enumerate() {
        check_logits(t).map_err(|e| row_error(e, "teacher", i))?;
        check_logits(s).map_err(|e| row_error(e, "student", i))?;
    }
    Ok(())
}

fn row_error(e: crate::Error, who: &str, row: usize) -> crate::Error {
    crate::Error::InvalidInput(alloc::format!("{who} row {row}: {e}"))
}

/// Assigns temperatures to every sample of a batch. Adaptive temperatures
/// are computed independently from the centered teacher and centered
/// student rows.
pub fn assign_temperatures(
    teacher: &Matrix,
    student: &Matrix,
    policy: TemperaturePolicy,
) -> Result<TemperatureAssignment> {
    policy.validate()?;
    check_batch_pair(teacher, student)?;
    match policy {
        TemperaturePolicy::Fixed { tau } => Ok(TemperatureAssignment::uniform(teacher.rows(), tau)),
        TemperaturePolicy::Adaptive { rho } => {
            let per_row =
                |m: &Matrix| -> Result<Vec<f64>> { m.iter_rows().map(|r| adaptive_tau(&center(r), rho)).collect() };
            Ok(TemperatureAssignment {
                teacher: per_row(teacher)?,
                student: per_row(student)?,
            })
        }
    }
}

/// One line of a ρ sweep: entropy statistics of the adaptively softened
/// teacher labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub rho: f64,
    pub mean_entropy: f64,
    pub std_entropy: f64,
    pub min_entropy: f64,
    pub max_entropy: f64,
}

/// Sweeps candidate ρ values over a subset of teacher logits.
pub fn calibrate_rho(subset: &Matrix, candidates: &[f64]) -> Result<Vec<CalibrationRow>> {
    if candidates.is_empty() {
        bail!(InvalidParameter, "no candidate rho values");
    }
    if subset.rows() == 0 {
        bail!(InvalidParameter, "empty calibration subset");
    }
    for &rho in candidates {
        check_rho(rho)?;
    }
    let centered: Vec<Vec<f64>> = subset
        .iter_rows()
        .enumerate()
        .map(|(i, r)| {
            check_logits(r).map_err(|e| row_error(e, "teacher", i))?;
            Ok(center(r))
        })
        .collect::<Result<_>>()?;
    candidates
        .iter()
        .map(|&rho| {
            let mut summary = Summary::new();
            for v in &centered {
                let tau = adaptive_tau(v, rho)?;
                summary.push(softmax_entropy(v, tau)?);
            }
            Ok(CalibrationRow {
                rho,
                mean_entropy: summary.mean(),
                std_entropy: summary.std(),
                min_entropy: summary.min(),
                max_entropy: summary.max(),
            })
        })
        .collect()
}

/// Sorted row indices of a calibration subset: `size` rows drawn without
/// replacement from `rows` (all rows when `size >= rows`), from the
/// `calibration-subset` stream of `seed`.
pub fn calibration_subset(rows: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rows).collect();
    if size < rows {
        let mut rng = seed::stream(seed, "calibration-subset");
        for k in 0..size {
            let j = rng.random_range(k..rows);
            idx.swap(k, j);
        }
        idx.truncate(size);
        idx.sort_unstable();
    }
    idx
}
