//! Training objectives and their analytic gradients with respect to the
//! student logits.
//!
//! Every method reduces to the same per-sample recipe: a hard-label
//! cross-entropy on the student distribution at some temperature, plus a
//! distillation slot that is either a (possibly reweighted) KL divergence
//! between softened teacher and student distributions, a hard-label
//! cross-entropy (entropy outliers under [`Method::KdEntoutCe`]) or empty.
//! Temperatures and weights are computed once per batch by [`plan`] and
//! then held constant under differentiation.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)] // shadowed by inherent f64 math when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{check_logits, check_tau, entropy_of, kl_of, softmax_into};
use crate::temperature::{assign_temperatures, TemperatureAssignment, TemperaturePolicy};

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Hard-label cross-entropy only (no teacher).
    #[serde(rename = "ce")]
    CeOnly,
    /// Standard KD: one shared fixed temperature, no rescaling.
    #[serde(rename = "kd")]
    Kd,
    /// KD where the lowest-entropy teacher labels are replaced by hard-label CE.
    #[serde(rename = "kd-entout-ce")]
    KdEntoutCe,
    /// KD with a raised temperature on the lowest-entropy teacher labels.
    #[serde(rename = "kd-entout-ht")]
    KdEntoutHt,
    /// Adaptive teacher/student temperatures with `τ_t·τ_s` KL rescaling.
    #[serde(rename = "cist")]
    Cist,
    /// Adaptive temperatures, unit KL weight.
    #[serde(rename = "cist-no-reweight")]
    CistNoReweight,
    /// Fixed shared temperature, KL weighted by the would-be adaptive `τ_t·τ_s`.
    #[serde(rename = "cist-no-temp")]
    CistNoTemp,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::CeOnly,
        Method::Kd,
        Method::KdEntoutCe,
        Method::KdEntoutHt,
        Method::Cist,
        Method::CistNoReweight,
        Method::CistNoTemp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::CeOnly => "ce",
            Method::Kd => "kd",
            Method::KdEntoutCe => "kd-entout-ce",
            Method::KdEntoutHt => "kd-entout-ht",
            Method::Cist => "cist",
            Method::CistNoReweight => "cist-no-reweight",
            Method::CistNoTemp => "cist-no-temp",
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != Method::CeOnly
    }

    pub fn needs_fixed_tau(self) -> bool {
        matches!(
            self,
            Method::Kd | Method::KdEntoutCe | Method::KdEntoutHt | Method::CistNoTemp
        )
    }

    pub fn needs_rho(self) -> bool {
        matches!(self, Method::Cist | Method::CistNoReweight | Method::CistNoTemp)
    }

    pub fn uses_outliers(self) -> bool {
        matches!(self, Method::KdEntoutCe | Method::KdEntoutHt)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .map(|c| if c == '_' { '-' } else { c.to_ascii_lowercase() })
            .collect();
        let norm = if norm == "ce-only" { "ce" } else { norm.as_str() };
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Config(alloc::format!("unknown method `{s}`")))
    }
}

/// Loss weights and temperature parameters for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub method: Method,
    pub lambda_ce: f64,
    pub lambda_kl: f64,
    /// Shared fixed temperature (KD family, `cist-no-temp`). For `ce` it is
    /// the cross-entropy temperature and defaults to 1.
    pub tau: Option<f64>,
    /// Entropy control constant (CIST family).
    pub rho: Option<f64>,
    /// Fraction of training samples treated as entropy outliers.
    pub entout_fraction: f64,
    /// Temperature increment for outliers under `kd-entout-ht`.
    pub entout_ht_delta: f64,
}

pub const DEFAULT_TAU: f64 = 4.0;
pub const DEFAULT_RHO: f64 = 3.0;
pub const DEFAULT_LAMBDA_CE: f64 = 0.1;
pub const DEFAULT_LAMBDA_KL_KD: f64 = 0.9;
pub const DEFAULT_LAMBDA_KL_CIST: f64 = 8.0;
pub const DEFAULT_ENTOUT_FRACTION: f64 = 0.05;
pub const DEFAULT_ENTOUT_HT_DELTA: f64 = 1.0;

impl LossConfig {
    /// Default hyperparameters for a method: `λ_CE = 0.1`, `λ_KL = 0.9` and
    /// `τ = 4` for the KD family, `λ_KL = 8` and `ρ = 3` for the CIST family.
    pub fn for_method(method: Method) -> Self {
        let cist_family = method.needs_rho();
        Self {
            method,
            lambda_ce: if method == Method::CeOnly {
                1.0
            } else {
                DEFAULT_LAMBDA_CE
            },
            lambda_kl: match method {
                Method::CeOnly => 0.0,
                _ if cist_family => DEFAULT_LAMBDA_KL_CIST,
                _ => DEFAULT_LAMBDA_KL_KD,
            },
            tau: method.needs_fixed_tau().then_some(DEFAULT_TAU),
            rho: cist_family.then_some(DEFAULT_RHO),
            entout_fraction: DEFAULT_ENTOUT_FRACTION,
            entout_ht_delta: DEFAULT_ENTOUT_HT_DELTA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.method;
        for (name, v) in [("lambda_ce", self.lambda_ce), ("lambda_kl", self.lambda_kl)] {
            if !(v.is_finite() && v >= 0.0) {
                bail!(Config, "{name} must be finite and >= 0, got {v}");
            }
        }
        if m.needs_fixed_tau() && self.tau.is_none() {
            bail!(Config, "method {m} requires a fixed temperature (tau)");
        }
        if m.needs_rho() && self.rho.is_none() {
            bail!(Config, "method {m} requires rho");
        }
        if let Some(tau) = self.tau {
            check_tau(tau).map_err(|_| Error::Config(alloc::format!("tau must be > 0, got {tau}")))?;
        }
        if let Some(rho) = self.rho {
            if !(rho.is_finite() && rho > 0.0) {
                bail!(Config, "rho must be > 0, got {rho}");
            }
        }
        if m.uses_outliers() && !(self.entout_fraction > 0.0 && self.entout_fraction < 1.0) {
            bail!(
                Config,
                "entout_fraction must lie in (0, 1), got {}",
                self.entout_fraction
            );
        }
        if m == Method::KdEntoutHt && !(self.entout_ht_delta.is_finite() && self.entout_ht_delta >= 0.0) {
            bail!(Config, "entout_ht_delta must be >= 0, got {}", self.entout_ht_delta);
        }
        Ok(())
    }
}

/// Loss value split into its weighted parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_term: f64,
    /// Mean distillation term after per-sample rescaling.
    pub kl_term: f64,
    /// KL multiplier per sample (`τ_t·τ_s` when rescaling, else 1).
    pub per_sample_weight: Vec<f64>,
}

/// Inputs for one mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub teacher: Option<&'a Matrix>,
    pub student: &'a Matrix,
    pub labels: &'a [usize],
    /// Entropy-outlier flags, required by the EntOut methods.
    pub outliers: Option<&'a [bool]>,
}

impl<'a> Batch<'a> {
    pub fn new(teacher: &'a Matrix, student: &'a Matrix, labels: &'a [usize]) -> Self {
        Self {
            teacher: Some(teacher),
            student,
            labels,
            outliers: None,
        }
    }

    pub fn without_teacher(student: &'a Matrix, labels: &'a [usize]) -> Self {
        Self {
            teacher: None,
            student,
            labels,
            outliers: None,
        }
    }

    pub fn with_outliers(mut self, outliers: &'a [bool]) -> Self {
        self.outliers = Some(outliers);
        self
    }
}

/// What fills the distillation slot for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistillTerm {
    None,
    /// `weight · KL(p^{τ_t} ‖ q^{τ_s})`.
    Soft,
    /// Hard-label cross-entropy at temperature 1.
    HardLabel,
}

/// Per-sample temperatures, weights and terms, frozen for differentiation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPlan {
    pub teacher_tau: Vec<f64>,
    pub student_tau: Vec<f64>,
    pub ce_tau: Vec<f64>,
    pub weight: Vec<f64>,
    pub term: Vec<DistillTerm>,
}

impl LossPlan {
    pub fn len(&self) -> usize {
        self.ce_tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ce_tau.is_empty()
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        bail!(Shape, "{} labels for {n} samples", labels.len());
    }
    if let Some((sample, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::InvalidLabel { sample, label, classes });
    }
    Ok(())
}

fn check_student(student: &Matrix) -> Result<()> {
    if student.rows() == 0 {
        bail!(InvalidInput, "empty batch");
    }
    for (i, r) in student.iter_rows().enumerate() {
        check_logits(r).map_err(|e| Error::InvalidInput(alloc::format!("student row {i}: {e}")))?;
    }
    Ok(())
}

/// Computes the per-sample temperatures and weights a method applies to a
/// batch. The result is treated as constant by [`evaluate_plan`].
pub fn plan(batch: &Batch<'_>, config: &LossConfig) -> Result<LossPlan> {
    config.validate()?;
    let method = config.method;
    let student = batch.student;
    let n = student.rows();
    check_student(student)?;
    check_labels(batch.labels, n, student.cols())?;

    if method == Method::CeOnly {
        let tau = config.tau.unwrap_or(1.0);
        return Ok(LossPlan {
            teacher_tau: vec![tau; n],
            student_tau: vec![tau; n],
            ce_tau: vec![tau; n],
            weight: vec![1.0; n],
            term: vec![DistillTerm::None; n],
        });
    }

    let teacher = batch
        .teacher
        .ok_or_else(|| Error::Config(alloc::format!("method {method} needs teacher logits")))?;
    let outliers = if method.uses_outliers() {
        let o = batch
            .outliers
            .ok_or_else(|| Error::Config(alloc::format!("method {method} needs outlier flags")))?;
        if o.len() != n {
            bail!(Shape, "{} outlier flags for {n} samples", o.len());
        }
        Some(o)
    } else {
        None
    };

    // Validated by `config.validate()` for methods that need them.
    let fixed = || config.tau.unwrap_or(DEFAULT_TAU);
    let adaptive = || -> Result<TemperatureAssignment> {
        let rho = config.rho.unwrap_or(DEFAULT_RHO);
        assign_temperatures(teacher, student, TemperaturePolicy::Adaptive { rho })
    };
    let fixed_assignment = || assign_temperatures(teacher, student, TemperaturePolicy::Fixed { tau: fixed() });

    let mut plan = match method {
        Method::Kd | Method::KdEntoutCe | Method::KdEntoutHt => {
            let a = fixed_assignment()?;
            LossPlan {
                ce_tau: a.student.clone(),
                weight: vec![1.0; n],
                term: vec![DistillTerm::Soft; n],
                teacher_tau: a.teacher,
                student_tau: a.student,
            }
        }
        Method::Cist | Method::CistNoReweight => {
            let a = adaptive()?;
            let weight = if method == Method::Cist {
                a.teacher.iter().zip(&a.student).map(|(t, s)| t * s).collect()
            } else {
                vec![1.0; n]
            };
            LossPlan {
                ce_tau: a.student.clone(),
                weight,
                term: vec![DistillTerm::Soft; n],
                teacher_tau: a.teacher,
                student_tau: a.student,
            }
        }
        Method::CistNoTemp => {
            let would_be = adaptive()?;
            let a = fixed_assignment()?;
            LossPlan {
                ce_tau: a.student.clone(),
                weight: would_be
                    .teacher
                    .iter()
                    .zip(&would_be.student)
                    .map(|(t, s)| t * s)
                    .collect(),
                term: vec![DistillTerm::Soft; n],
                teacher_tau: a.teacher,
                student_tau: a.student,
            }
        }
        Method::CeOnly => unreachable!(),
    };

    if let Some(outliers) = outliers {
        for (i, _) in outliers.iter().enumerate().filter(|(_, &o)| o) {
            match method {
                Method::KdEntoutCe => plan.term[i] = DistillTerm::HardLabel,
                Method::KdEntoutHt => {
                    let hot = fixed() + config.entout_ht_delta;
                    plan.teacher_tau[i] = hot;
                    plan.student_tau[i] = hot;
                    plan.ce_tau[i] = hot;
                }
                _ => {}
            }
        }
    }
    Ok(plan)
}

/// Evaluates loss and student-logit gradient for a frozen plan.
///
/// The returned gradient is `∂ total / ∂ z` for the batch-mean loss.
pub fn evaluate_plan(batch: &Batch<'_>, config: &LossConfig, plan: &LossPlan) -> Result<(LossBreakdown, Matrix)> {
    let student = batch.student;
    let (n, c) = student.shape();
    if plan.len() != n {
        bail!(Shape, "plan covers {} samples, batch has {n}", plan.len());
    }
    check_labels(batch.labels, n, c)?;
    let needs_teacher = plan.term.contains(&DistillTerm::Soft);
    let teacher = match batch.teacher {
        Some(t) if t.shape() != student.shape() => {
            bail!(
                Shape,
                "teacher logits {:?} vs student logits {:?}",
                t.shape(),
                student.shape()
            )
        }
        Some(t) => Some(t),
        None if needs_teacher => bail!(Config, "plan needs teacher logits"),
        None => None,
    };

    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, c);
    let mut ce_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut q = vec![0.0; c];
    let mut log_q = vec![0.0; c];
    let mut q_ce = vec![0.0; c];
    let mut log_q_ce = vec![0.0; c];
    let mut p = vec![0.0; c];
    let mut log_p = vec![0.0; c];

    for i in 0..n {
        let z = student.row(i);
        let y = batch.labels[i];
        let g = grad.row_mut(i);

        // hard-label CE on the student distribution at ce_tau
        let ce_tau = plan.ce_tau[i];
        softmax_into(z, ce_tau, &mut q_ce, &mut log_q_ce);
        ce_sum += -log_q_ce[y];
        let scale = config.lambda_ce * inv_n / ce_tau;
        for (k, gk) in g.iter_mut().enumerate() {
            let target = if k == y { 1.0 } else { 0.0 };
            *gk += scale * (q_ce[k] - target);
        }

        match plan.term[i] {
            DistillTerm::None => {}
            DistillTerm::Soft => {
                let v = teacher.expect("checked above").row(i);
                let (tt, ts, w) = (plan.teacher_tau[i], plan.student_tau[i], plan.weight[i]);
                softmax_into(v, tt, &mut p, &mut log_p);
                softmax_into(z, ts, &mut q, &mut log_q);
                kl_sum += w * kl_of(&p, &log_p, &log_q);
                let scale = config.lambda_kl * inv_n * w / ts;
                for (k, gk) in g.iter_mut().enumerate() {
                    *gk += scale * (q[k] - p[k]);
                }
            }
            DistillTerm::HardLabel => {
                softmax_into(z, 1.0, &mut q, &mut log_q);
                kl_sum += -log_q[y];
                let scale = config.lambda_kl * inv_n;
                for (k, gk) in g.iter_mut().enumerate() {
                    let target = if k == y { 1.0 } else { 0.0 };
                    *gk += scale * (q[k] - target);
                }
            }
        }
    }

    let ce_term = ce_sum * inv_n;
    let kl_term = kl_sum * inv_n;
    Ok((
        LossBreakdown {
            total: config.lambda_ce * ce_term + config.lambda_kl * kl_term,
            ce_term,
            kl_term,
            per_sample_weight: plan.weight.clone(),
        },
        grad,
    ))
}

/// Loss and gradient for any [`Method`] on one batch.
pub fn assemble_loss(batch: &Batch<'_>, config: &LossConfig) -> Result<(LossBreakdown, Matrix)> {
    let plan = plan(batch, config)?;
    evaluate_plan(batch, config, &plan)
}

/// Batch-mean cross-entropy of `softmax(z / tau)` against hard labels.
pub fn ce_loss_and_grad(student: &Matrix, labels: &[usize], tau: f64) -> Result<(f64, Matrix)> {
    check_tau(tau)?;
    check_student(student)?;
    let config = LossConfig {
        tau: Some(tau),
        ..LossConfig::for_method(Method::CeOnly)
    };
    let (loss, grad) = assemble_loss(&Batch::without_teacher(student, labels), &config)?;
    Ok((loss.ce_term, grad))
}

/// Batch-mean KL part of the distillation loss with the given temperatures.
/// With `rescale` the per-sample KL is multiplied by `τ_t·τ_s`.
pub fn kd_loss_and_grad(
    teacher: &Matrix,
    student: &Matrix,
    assignment: &TemperatureAssignment,
    rescale: bool,
) -> Result<(LossBreakdown, Matrix)> {
    if teacher.shape() != student.shape() {
        bail!(
            Shape,
            "teacher logits {:?} vs student logits {:?}",
            teacher.shape(),
            student.shape()
        );
    }
    check_student(student)?;
    for (i, r) in teacher.iter_rows().enumerate() {
        check_logits(r).map_err(|e| Error::InvalidInput(alloc::format!("teacher row {i}: {e}")))?;
    }
    let n = student.rows();
    assignment.validate(n)?;
    let weight = if rescale {
        assignment
            .teacher
            .iter()
            .zip(&assignment.student)
            .map(|(t, s)| t * s)
            .collect()
    } else {
        vec![1.0; n]
    };
    let plan = LossPlan {
        teacher_tau: assignment.teacher.clone(),
        student_tau: assignment.student.clone(),
        ce_tau: assignment.student.clone(),
        weight,
        term: vec![DistillTerm::Soft; n],
    };
    let config = LossConfig {
        lambda_ce: 0.0,
        lambda_kl: 1.0,
        ..LossConfig::for_method(Method::Kd)
    };
    // labels are irrelevant with lambda_ce = 0
    let labels = vec![0; n];
    evaluate_plan(&Batch::new(teacher, student, &labels), &config, &plan)
}

/// First-order high-temperature approximation of the KD gradient,
/// `(z_c·τ_t/τ_s − v_c) / (C·τ_s·τ_t)`, for zero-mean logit vectors.
pub fn approx_kd_grad(teacher: &[f64], student: &[f64], tau_t: f64, tau_s: f64) -> Result<Vec<f64>> {
    check_tau(tau_t)?;
    check_tau(tau_s)?;
    check_logits(teacher)?;
    check_logits(student)?;
    if teacher.len() != student.len() {
        bail!(
            Shape,
            "teacher has {} classes, student {}",
            teacher.len(),
            student.len()
        );
    }
    let c = teacher.len() as f64;
    for (who, v) in [("teacher", teacher), ("student", student)] {
        let mean = v.iter().sum::<f64>() / c;
        if mean.abs() > 1e-8 {
            bail!(Precondition, "{who} logits must be zero-mean, mean is {mean:e}");
        }
    }
    let scale = 1.0 / (c * tau_s * tau_t);
    let ratio = tau_t / tau_s;
    Ok(student
        .iter()
        .zip(teacher)
        .map(|(z, v)| scale * (z * ratio - v))
        .collect())
}

/// Split of a training set into entropy outliers and the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntOutPartition {
    /// Ascending sample indices of the lowest-entropy teacher labels.
    pub outliers: Vec<usize>,
    /// Ascending indices of all other samples.
    pub regular: Vec<usize>,
}

impl EntOutPartition {
    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in &self.outliers {
            m[i] = true;
        }
        m
    }
}

/// Ranks samples by teacher soft-label entropy at `fixed_tau` and returns
/// the lowest `⌊fraction·N⌋` as outliers (ties to the lower index).
pub fn entout_partition(teacher: &Matrix, fixed_tau: f64, fraction: f64) -> Result<EntOutPartition> {
    if !(fraction > 0.0 && fraction < 1.0) {
        bail!(InvalidParameter, "outlier fraction must lie in (0, 1), got {fraction}");
    }
    check_tau(fixed_tau)?;
    let (n, c) = teacher.shape();
    let mut p = vec![0.0; c];
    let mut log_p = vec![0.0; c];
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, v) in teacher.iter_rows().enumerate() {
        check_logits(v).map_err(|e| Error::InvalidInput(alloc::format!("teacher row {i}: {e}")))?;
        softmax_into(v, fixed_tau, &mut p, &mut log_p);
        ranked.push((entropy_of(&p, &log_p), i));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = (fraction * n as f64).floor() as usize;
    let mut outliers: Vec<usize> = ranked[..k].iter().map(|&(_, i)| i).collect();
    outliers.sort_unstable();
    let mut regular: Vec<usize> = ranked[k..].iter().map(|&(_, i)| i).collect();
    regular.sort_unstable();
    Ok(EntOutPartition { outliers, regular })
}
