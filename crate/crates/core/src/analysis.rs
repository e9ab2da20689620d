//! Measurement and verification harness.
//!
//! Covers entropy-distribution reports for teacher soft labels, the
//! equal-ratio entropy-gap experiment with its A/B decomposition, the
//! high-temperature gradient approximation, and a finite-difference sweep
//! over every analytic gradient in the crate, and randomized invariant
//! checks for softmax, temperatures and losses.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent f64 math when std is linked
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::losses::{approx_kd_grad, evaluate_plan, kd_loss_and_grad, plan, Batch, LossConfig, Method};
use crate::matrix::Matrix;
use crate::model::Mlp;
use crate::numerics::{check_logits, check_tau, lse_unchecked, softmax_entropy, softmax_into};
use crate::seed;
use crate::stats::{quantile_sorted, Histogram, Summary};
use crate::temperature::{center, TemperatureAssignment, TemperaturePolicy};

/// Quantile levels reported by [`entropy_report`].
pub const REPORT_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];
pub const DEFAULT_HISTOGRAM_BINS: usize = 40;
pub const DEFAULT_OUTLIER_QUANTILE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub policy: TemperaturePolicy,
    pub classes: usize,
    /// Nats, one per row.
    pub per_sample_entropy: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// `(level, value)` pairs for [`REPORT_QUANTILES`].
    pub quantiles: Vec<(f64, f64)>,
    pub outlier_quantile: f64,
    /// Rows whose entropy lies strictly below the outlier quantile.
    pub outliers: Vec<usize>,
    /// Over `[0, ln C]`.
    pub histogram: Histogram,
}

/// Entropy statistics of `softmax(center(v_i)/τ_i)` with default bins and
/// outlier quantile.
pub fn entropy_report(logits: &Matrix, policy: TemperaturePolicy) -> Result<EntropyReport> {
    entropy_report_with(logits, policy, DEFAULT_HISTOGRAM_BINS, DEFAULT_OUTLIER_QUANTILE)
}

pub fn entropy_report_with(
    logits: &Matrix,
    policy: TemperaturePolicy,
    bins: usize,
    outlier_quantile: f64,
) -> Result<EntropyReport> {
    policy.validate()?;
    if logits.rows() == 0 {
        bail!(InvalidParameter, "entropy report needs at least one row");
    }
    if bins == 0 {
        bail!(InvalidParameter, "histogram needs at least one bin");
    }
    if !(0.0..=1.0).contains(&outlier_quantile) {
        bail!(
            InvalidParameter,
            "outlier quantile must lie in [0, 1], got {outlier_quantile}"
        );
    }
    let classes = logits.cols();
    let per_sample_entropy = logits
        .iter_rows()
        .enumerate()
        .map(|(i, r)| {
            check_logits(r).map_err(|e| crate::Error::InvalidInput(alloc::format!("row {i}: {e}")))?;
            let v = center(r);
            softmax_entropy(&v, policy.tau_for(&v)?)
        })
        .collect::<Result<Vec<f64>>>()?;

    let summary: Summary = per_sample_entropy.iter().copied().collect();
    let mut sorted = per_sample_entropy.clone();
    sorted.sort_by(f64::total_cmp);
    let quantiles = REPORT_QUANTILES
        .iter()
        .map(|&q| (q, quantile_sorted(&sorted, q)))
        .collect();
    let cut = quantile_sorted(&sorted, outlier_quantile);
    let outliers = (0..per_sample_entropy.len())
        .filter(|&i| per_sample_entropy[i] < cut)
        .collect();
    let histogram = Histogram::build(&per_sample_entropy, 0.0, (classes as f64).ln(), bins);

    Ok(EntropyReport {
        policy,
        classes,
        mean: summary.mean(),
        std: summary.std(),
        min: summary.min(),
        max: summary.max(),
        per_sample_entropy,
        quantiles,
        outlier_quantile,
        outliers,
        histogram,
    })
}

/// Entropy difference of two softened distributions split into the
/// log-partition term A and the expectation term B.
///
/// With `a = v/τ`, `H = LSE(a) − Σ p·a`, so `H_i − H_j = (LSE_i − LSE_j) + B`.
/// `term_a` is the dominant-logit approximation `max a_i − max a_j` of the
/// first bracket; `residual` is what that approximation leaves out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyGapDecomposition {
    pub entropy_i: f64,
    pub entropy_j: f64,
    /// `|H_i − H_j|`.
    pub gap: f64,
    pub term_a: f64,
    pub term_b: f64,
    /// `(H_i − H_j) − (term_a + term_b)`.
    pub residual: f64,
    /// `(top − second)/τ` of each sample.
    pub margin_i: f64,
    pub margin_j: f64,
}

struct Softened {
    entropy: f64,
    top: f64,
    expected: f64,
    margin: f64,
}

fn soften(v: &[f64], tau: f64) -> Result<Softened> {
    check_logits(v)?;
    check_tau(tau)?;
    let c = v.len();
    let mut p = vec![0.0; c];
    let mut log_p = vec![0.0; c];
    softmax_into(v, tau, &mut p, &mut log_p);
    let lse = lse_unchecked(v, tau);
    let expected: f64 = p.iter().zip(v).map(|(p, x)| p * x / tau).sum();
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &x in v {
        if x > first {
            second = first;
            first = x;
        } else if x > second {
            second = x;
        }
    }
    Ok(Softened {
        entropy: lse - expected,
        top: first / tau,
        expected,
        margin: (first - second) / tau,
    })
}

pub fn decompose_pair(vi: &[f64], tau_i: f64, vj: &[f64], tau_j: f64) -> Result<EntropyGapDecomposition> {
    if vi.len() != vj.len() {
        bail!(Shape, "pair has {} and {} classes", vi.len(), vj.len());
    }
    let si = soften(vi, tau_i)?;
    let sj = soften(vj, tau_j)?;
    let diff = si.entropy - sj.entropy;
    let term_a = si.top - sj.top;
    let term_b = sj.expected - si.expected;
    Ok(EntropyGapDecomposition {
        entropy_i: si.entropy,
        entropy_j: sj.entropy,
        gap: diff.abs(),
        term_a,
        term_b,
        residual: diff - term_a - term_b,
        margin_i: si.margin,
        margin_j: sj.margin,
    })
}

/// Smallest accepted dominance margin, in units of the temperature.
pub const MIN_DOMINANCE_MARGIN: f64 = 3.0;
/// Shared temperature of the comparison arm.
pub const PROPOSITION_FIXED_TAU: f64 = 4.0;
/// Non-dominant logits sit `Δ + U[0, TAIL_SPREAD]` below the top (scaled units).
pub const TAIL_SPREAD: f64 = 4.0;
/// Raw logit vectors are the scaled vectors times `U[1, 8]`.
pub const SCALE_RANGE: (f64, f64) = (1.0, 8.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropositionReport {
    pub margin: f64,
    pub rho: f64,
    pub classes: usize,
    pub pairs: Vec<EntropyGapDecomposition>,
    /// Per-pair gap with both samples at [`PROPOSITION_FIXED_TAU`].
    pub fixed_gaps: Vec<f64>,
    pub max_gap: f64,
    pub max_fixed_gap: f64,
    pub max_abs_term_a: f64,
    pub max_abs_residual: f64,
}

struct PairShape {
    top_i: usize,
    top_j: usize,
    tail_i: Vec<f64>,
    tail_j: Vec<f64>,
    scale_i: f64,
    scale_j: f64,
}

// Drawn from a stream that does not depend on the margin, so every margin
// sees the same pairs.
fn pair_shapes(num_pairs: usize, classes: usize, seed: u64) -> Vec<PairShape> {
    let mut rng = seed::stream(seed, "proposition-pairs");
    (0..num_pairs)
        .map(|_| {
            let tail = |rng: &mut seed::Rng| (0..classes).map(|_| rng.random_range(0.0..=TAIL_SPREAD)).collect();
            let top_i = rng.random_range(0..classes);
            let top_j = rng.random_range(0..classes);
            let tail_i = tail(&mut rng);
            let tail_j = tail(&mut rng);
            let scale_i = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
            let scale_j = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
            PairShape {
                top_i,
                top_j,
                tail_i,
                tail_j,
                scale_i,
                scale_j,
            }
        })
        .collect()
}

// Logits whose top equals `rho·scale` and whose others trail by at least
// `margin·scale`, so `v_max/ρ = scale`.
fn dominated(top: usize, tail: &[f64], scale: f64, rho: f64, margin: f64) -> Vec<f64> {
    tail.iter()
        .enumerate()
        .map(|(c, r)| {
            if c == top {
                rho * scale
            } else {
                (rho - margin - r) * scale
            }
        })
        .collect()
}

/// Samples `num_pairs` dominated pairs, softens each sample with the
/// equal-ratio temperature `τ = v_max/ρ` and, separately, with a shared
/// fixed temperature, and decomposes each equal-ratio gap.
pub fn verify_proposition1(
    num_pairs: usize,
    classes: usize,
    margin: f64,
    rho: f64,
    seed: u64,
) -> Result<PropositionReport> {
    if num_pairs == 0 {
        bail!(InvalidParameter, "need at least one pair");
    }
    if classes < 2 {
        bail!(InvalidParameter, "need at least two classes, got {classes}");
    }
    if !(rho.is_finite() && rho > 0.0) {
        bail!(InvalidParameter, "rho must be finite and > 0, got {rho}");
    }
    if !(margin.is_finite() && margin >= MIN_DOMINANCE_MARGIN) {
        bail!(
            InvalidParameter,
            "dominance margin must be at least {MIN_DOMINANCE_MARGIN} after scaling, got {margin}"
        );
    }

    let mut pairs = Vec::with_capacity(num_pairs);
    let mut fixed_gaps = Vec::with_capacity(num_pairs);
    for s in pair_shapes(num_pairs, classes, seed) {
        let vi = dominated(s.top_i, &s.tail_i, s.scale_i, rho, margin);
        let vj = dominated(s.top_j, &s.tail_j, s.scale_j, rho, margin);
        let tau_i = vi[s.top_i] / rho;
        let tau_j = vj[s.top_j] / rho;
        pairs.push(decompose_pair(&vi, tau_i, &vj, tau_j)?);
        let hi = softmax_entropy(&vi, PROPOSITION_FIXED_TAU)?;
        let hj = softmax_entropy(&vj, PROPOSITION_FIXED_TAU)?;
        fixed_gaps.push((hi - hj).abs());
    }
    let max_of = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0, f64::max);
    Ok(PropositionReport {
        margin,
        rho,
        classes,
        max_gap: max_of(&mut pairs.iter().map(|d| d.gap)),
        max_fixed_gap: max_of(&mut fixed_gaps.iter().copied()),
        max_abs_term_a: max_of(&mut pairs.iter().map(|d| d.term_a.abs())),
        max_abs_residual: max_of(&mut pairs.iter().map(|d| d.residual.abs())),
        pairs,
        fixed_gaps,
    })
}

/// Outcome of [`verify_proposition1`] over a grid of margins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropositionSweep {
    pub rows: Vec<PropositionRow>,
    /// Max equal-ratio gap strictly decreases along the grid.
    pub gap_decreasing: bool,
    /// Max A/B residual strictly decreases along the grid.
    pub residual_decreasing: bool,
    /// Equal-ratio max gap is below the fixed-τ max gap at every margin.
    pub beats_fixed: bool,
    /// `|term_A| ≤ 1e-12` on every pair.
    pub term_a_exact: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropositionRow {
    pub margin: f64,
    pub max_gap: f64,
    pub max_fixed_gap: f64,
    pub max_abs_term_a: f64,
    pub max_abs_residual: f64,
}

pub const TERM_A_TOLERANCE: f64 = 1e-12;

/// Runs the equal-ratio experiment at margins `k·ρ` for each multiplier.
pub fn proposition1_sweep(
    num_pairs: usize,
    classes: usize,
    rho: f64,
    multipliers: &[f64],
    seed: u64,
) -> Result<PropositionSweep> {
    let rows: Vec<PropositionRow> = multipliers
        .iter()
        .map(|&k| {
            let r = verify_proposition1(num_pairs, classes, k * rho, rho, seed)?;
            Ok(PropositionRow {
                margin: r.margin,
                max_gap: r.max_gap,
                max_fixed_gap: r.max_fixed_gap,
                max_abs_term_a: r.max_abs_term_a,
                max_abs_residual: r.max_abs_residual,
            })
        })
        .collect::<Result<_>>()?;
    let decreasing = |f: fn(&PropositionRow) -> f64| rows.windows(2).all(|w| f(&w[1]) < f(&w[0]));
    Ok(PropositionSweep {
        gap_decreasing: decreasing(|r| r.max_gap),
        residual_decreasing: decreasing(|r| r.max_abs_residual),
        beats_fixed: rows.iter().all(|r| r.max_gap < r.max_fixed_gap),
        term_a_exact: rows.iter().all(|r| r.max_abs_term_a <= TERM_A_TOLERANCE),
        rows,
    })
}

/// Settings for [`verify_high_temp_approx`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighTempConfig {
    pub classes: usize,
    /// Standard deviation of the raw logits before centering.
    pub logit_scale: f64,
    pub taus: Vec<f64>,
    pub pairs: usize,
    /// `τ_t/τ_s`; the student temperature is `τ` and the teacher's `τ·ratio`.
    pub teacher_student_ratio: f64,
    pub seed: u64,
}

impl Default for HighTempConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            logit_scale: 3.0,
            taus: vec![10.0, 20.0, 40.0, 80.0],
            pairs: 100,
            teacher_student_ratio: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub tau: f64,
    pub max_relative_deviation: f64,
    pub mean_relative_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Every pair's deviation strictly decreases along the τ grid (pairs
    /// with zero deviation throughout count as decreasing).
    pub decreasing: bool,
    /// Largest gap between the library approximation and
    /// `(z·τ_t/τ_s − v)/(C·τ_s·τ_t)` written out directly.
    pub closed_form_error: f64,
}

/// `‖exact − approx‖₂ / ‖approx‖₂`, or 0 when both vanish.
pub fn relative_deviation(exact: &[f64], approx: &[f64]) -> f64 {
    let num: f64 = exact
        .iter()
        .zip(approx)
        .map(|(e, a)| (e - a) * (e - a))
        .sum::<f64>()
        .sqrt();
    let den: f64 = approx.iter().map(|a| a * a).sum::<f64>().sqrt();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

fn zero_mean_logits(rng: &mut seed::Rng, classes: usize, scale: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    center(&raw)
}

/// Exact KD gradient for one zero-mean pair, `(q − p)/τ_s`.
pub fn exact_kd_grad(teacher: &[f64], student: &[f64], tau_t: f64, tau_s: f64) -> Result<Vec<f64>> {
    let v = Matrix::from_vec(1, teacher.len(), teacher.to_vec())?;
    let z = Matrix::from_vec(1, student.len(), student.to_vec())?;
    let assignment = TemperatureAssignment {
        teacher: vec![tau_t],
        student: vec![tau_s],
    };
    let (_, grad) = kd_loss_and_grad(&v, &z, &assignment, false)?;
    Ok(grad.into_vec())
}

/// Compares the exact KD gradient with its first-order expansion on random
/// zero-mean pairs across a temperature grid.
pub fn verify_high_temp_approx(config: &HighTempConfig) -> Result<ConvergenceTable> {
    if config.classes < 2 || config.pairs == 0 || config.taus.is_empty() {
        bail!(
            InvalidParameter,
            "need >= 2 classes, >= 1 pair and a non-empty tau grid"
        );
    }
    if !(config.logit_scale.is_finite() && config.logit_scale > 0.0) {
        bail!(InvalidParameter, "logit scale must be finite and > 0");
    }
    check_tau(config.teacher_student_ratio)?;
    for &t in &config.taus {
        check_tau(t)?;
    }
    let mut rng = seed::stream(config.seed, "high-temperature-pairs");
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..config.pairs)
        .map(|_| {
            let v = zero_mean_logits(&mut rng, config.classes, config.logit_scale);
            let z = zero_mean_logits(&mut rng, config.classes, config.logit_scale);
            (v, z)
        })
        .collect();

    let c = config.classes as f64;
    let mut closed_form_error: f64 = 0.0;
    let mut deviations = vec![Vec::with_capacity(config.taus.len()); pairs.len()];
    let mut rows = Vec::with_capacity(config.taus.len());
    for &tau in &config.taus {
        let (tau_s, tau_t) = (tau, tau * config.teacher_student_ratio);
        let mut summary = Summary::new();
        for (k, (v, z)) in pairs.iter().enumerate() {
            let exact = exact_kd_grad(v, z, tau_t, tau_s)?;
            let approx = approx_kd_grad(v, z, tau_t, tau_s)?;
            for ((a, zc), vc) in approx.iter().zip(z).zip(v) {
                let direct = (zc * tau_t / tau_s - vc) / (c * tau_s * tau_t);
                closed_form_error = closed_form_error.max((a - direct).abs());
            }
            let d = relative_deviation(&exact, &approx);
            deviations[k].push(d);
            summary.push(d);
        }
        rows.push(ConvergenceRow {
            tau,
            max_relative_deviation: summary.max(),
            mean_relative_deviation: summary.mean(),
        });
    }
    let decreasing = deviations
        .iter()
        .all(|d| d.iter().all(|&x| x == 0.0) || d.windows(2).all(|w| w[1] < w[0]))
        && rows
            .windows(2)
            .all(|w| w[1].max_relative_deviation < w[0].max_relative_deviation);
    Ok(ConvergenceTable {
        rows,
        decreasing,
        closed_form_error,
    })
}

/// Finite-difference step and acceptance threshold of the gradient checks.
pub const FD_STEP: f64 = 1e-6;
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-5;
pub const GRAD_CHECK_INSTANCES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub instances: usize,
    pub worst_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub threshold: f64,
    pub fault_injection: bool,
    pub checks: Vec<GradCheckEntry>,
    pub passed: bool,
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    num / na.max(nb).max(1e-12)
}

/// Central differences of `f` at `x`.
pub fn central_differences(x: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + FD_STEP;
        let plus = f(&probe)?;
        probe[k] = x[k] - FD_STEP;
        let minus = f(&probe)?;
        probe[k] = x[k];
        out.push((plus - minus) / (2.0 * FD_STEP));
    }
    Ok(out)
}

fn uniform_matrix(rng: &mut seed::Rng, n: usize, c: usize, scale: f64) -> Matrix {
    let data = (0..n * c).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(n, c, data).expect("shape matches data")
}

struct Instance {
    teacher: Matrix,
    labels: Vec<usize>,
    outliers: Vec<bool>,
}

fn instance(rng: &mut seed::Rng, n: usize, c: usize) -> Instance {
    Instance {
        teacher: uniform_matrix(rng, n, c, 12.0),
        labels: (0..n).map(|_| rng.random_range(0..c)).collect(),
        outliers: (0..n).map(|_| rng.random_bool(0.3)).collect(),
    }
}

// Analytic gradients are perturbed by 1% under fault injection.
fn corrupt(grad: &mut [f64], fault: bool) {
    if fault {
        for g in grad {
            *g *= 1.01;
        }
    }
}

fn logit_check(method: Method, seed: u64, fault: bool) -> Result<f64> {
    let mut rng = seed::stream(seed, &alloc::format!("grad-check-logits-{method}"));
    let config = LossConfig::for_method(method);
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_CHECK_INSTANCES {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(2..=10);
        let inst = instance(&mut rng, n, c);
        let student = uniform_matrix(&mut rng, n, c, 12.0);
        let batch = Batch::new(&inst.teacher, &student, &inst.labels).with_outliers(&inst.outliers);
        let frozen = plan(&batch, &config)?;
        let (_, grad) = evaluate_plan(&batch, &config, &frozen)?;
        let mut analytic = grad.into_vec();
        corrupt(&mut analytic, fault);
        let numeric = central_differences(student.as_slice(), |z| {
            let z = Matrix::from_vec(n, c, z.to_vec())?;
            let b = Batch::new(&inst.teacher, &z, &inst.labels).with_outliers(&inst.outliers);
            Ok(evaluate_plan(&b, &config, &frozen)?.0.total)
        })?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

// Loss through a small MLP, with temperatures and weights frozen at the
// unperturbed student logits.
fn param_check(method: Method, seed: u64, fault: bool) -> Result<f64> {
    let mut rng = seed::stream(seed, &alloc::format!("grad-check-params-{method}"));
    let config = LossConfig::for_method(method);
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_CHECK_INSTANCES {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(2..=10);
        let d = rng.random_range(1..=4);
        let h = rng.random_range(1..=6);
        let mut model = Mlp::new(&[d, h, c], &mut rng)?;
        let inst = instance(&mut rng, n, c);
        let x = uniform_matrix(&mut rng, n, d, 4.0);

        let (student, cache) = model.forward(&x)?;
        let batch = Batch::new(&inst.teacher, &student, &inst.labels).with_outliers(&inst.outliers);
        let frozen = plan(&batch, &config)?;
        let (_, grad) = evaluate_plan(&batch, &config, &frozen)?;
        let mut analytic = model.backward(&cache, &grad)?.flatten();
        corrupt(&mut analytic, fault);

        let theta = model.params_flat();
        let numeric = central_differences(&theta, |p| {
            model.set_params_flat(p)?;
            let z = model.predict(&x)?;
            let b = Batch::new(&inst.teacher, &z, &inst.labels).with_outliers(&inst.outliers);
            Ok(evaluate_plan(&b, &config, &frozen)?.0.total)
        })?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Runs every analytic-vs-finite-difference check on randomized small
/// instances (`N ≤ 8`, `C ≤ 10`). With `fault_injection` the analytic side
/// is deliberately scaled so that every check must fail.
pub fn grad_check_suite(seed: u64, fault_injection: bool) -> Result<GradCheckReport> {
    let mut checks = Vec::new();
    for method in Method::ALL {
        for (kind, check) in [
            ("logits", logit_check as fn(Method, u64, bool) -> Result<f64>),
            ("params", param_check),
        ] {
            let worst = check(method, seed, fault_injection)?;
            checks.push(GradCheckEntry {
                name: alloc::format!("{method}/{kind}"),
                instances: GRAD_CHECK_INSTANCES,
                worst_relative_error: worst,
                passed: worst < GRAD_CHECK_THRESHOLD,
            });
        }
    }
    Ok(GradCheckReport {
        seed,
        threshold: GRAD_CHECK_THRESHOLD,
        fault_injection,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

/// One randomized invariant check and its worst observed violation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub cases: usize,
    /// Largest deviation from the invariant over all cases.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl InvariantCheck {
    fn new(name: &str, cases: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            cases,
            worst,
            tolerance,
            passed: worst <= tolerance,
        }
    }
}

pub const DEGENERACY_BATCHES: usize = 100;
pub const DEGENERACY_TOLERANCE: f64 = 1e-10;

/// `cist` with every temperature clamped to 1 (ρ so large that the floor
/// binds) against `kd` at `τ = 1` with the same loss weights. Reports the
/// worst absolute difference in loss or student-logit gradient.
pub fn degeneracy_check(seed: u64, batches: usize) -> Result<InvariantCheck> {
    let mut rng = seed::stream(seed, "degeneracy");
    let kd = LossConfig {
        tau: Some(1.0),
        ..LossConfig::for_method(Method::Kd)
    };
    let cist = LossConfig {
        rho: Some(1e12),
        lambda_kl: kd.lambda_kl,
        lambda_ce: kd.lambda_ce,
        ..LossConfig::for_method(Method::Cist)
    };
    let mut worst: f64 = 0.0;
    for _ in 0..batches {
        let n = rng.random_range(1..=64);
        let c = rng.random_range(2..=100);
        let inst = instance(&mut rng, n, c);
        let student = uniform_matrix(&mut rng, n, c, 12.0);
        let b = Batch::new(&inst.teacher, &student, &inst.labels);
        let pc = plan(&b, &cist)?;
        if pc.teacher_tau.iter().chain(&pc.student_tau).any(|&t| t != 1.0) {
            bail!(Contract, "temperatures were not clamped to 1");
        }
        let (lc, gc) = evaluate_plan(&b, &cist, &pc)?;
        let (lk, gk) = evaluate_plan(&b, &kd, &plan(&b, &kd)?)?;
        worst = worst.max((lc.total - lk.total).abs());
        for (a, b) in gc.as_slice().iter().zip(gk.as_slice()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(InvariantCheck::new(
        "cist-clamped-equals-kd",
        batches,
        worst,
        DEGENERACY_TOLERANCE,
    ))
}

const INVARIANT_CASES: usize = 200;

/// Randomized property checks over softmax, temperatures and losses, plus
/// the degeneracy check.
pub fn invariant_suite(seed: u64) -> Result<Vec<InvariantCheck>> {
    let mut rng = seed::stream(seed, "invariants");
    let mut sum_err: f64 = 0.0;
    let mut shift_err: f64 = 0.0;
    let mut entropy_err: f64 = 0.0;
    let mut tau_err: f64 = 0.0;
    let mut ratio_err: f64 = 0.0;
    let mut weight_err: f64 = 0.0;
    let mut kl_floor: f64 = 0.0;
    for _ in 0..INVARIANT_CASES {
        let c = rng.random_range(2..=50);
        let scale = rng.random_range(0.1..50.0);
        let v: Vec<f64> = (0..c).map(|_| rng.random_range(-scale..scale)).collect();
        let tau = rng.random_range(0.1..20.0);
        let shift = rng.random_range(-100.0..100.0);
        let mut p = vec![0.0; c];
        let mut lp = vec![0.0; c];
        softmax_into(&v, tau, &mut p, &mut lp);
        sum_err = sum_err.max((p.iter().sum::<f64>() - 1.0).abs());
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let mut ps = vec![0.0; c];
        let mut lps = vec![0.0; c];
        softmax_into(&shifted, tau, &mut ps, &mut lps);
        for (a, b) in p.iter().zip(&ps) {
            shift_err = shift_err.max((a - b).abs());
        }
        let h = softmax_entropy(&v, tau)?;
        entropy_err = entropy_err.max((-h).max(h - (c as f64).ln()).max(0.0));

        let rho = rng.random_range(0.5..8.0);
        let centered = center(&v);
        let t = TemperaturePolicy::Adaptive { rho }.tau_for(&v)?;
        let top = centered.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        tau_err = tau_err.max((1.0 - t).max(0.0)).max((t - (top / rho).max(1.0)).abs());
        if top / rho > 1.0 {
            ratio_err = ratio_err.max((top / t - rho).abs());
        }

        let n = rng.random_range(1..=8);
        let inst = instance(&mut rng, n, c);
        let student = uniform_matrix(&mut rng, n, c, 12.0);
        let config = LossConfig::for_method(Method::Cist);
        let b = Batch::new(&inst.teacher, &student, &inst.labels);
        let pl = plan(&b, &config)?;
        for i in 0..n {
            weight_err = weight_err.max((pl.weight[i] - pl.teacher_tau[i] * pl.student_tau[i]).abs());
        }
        let kd = LossConfig::for_method(Method::Kd);
        let (loss, _) = evaluate_plan(&b, &kd, &plan(&b, &kd)?)?;
        kl_floor = kl_floor.max(-loss.kl_term);
    }
    Ok(vec![
        InvariantCheck::new("softmax-sums-to-one", INVARIANT_CASES, sum_err, 1e-12),
        InvariantCheck::new("softmax-shift-invariant", INVARIANT_CASES, shift_err, 1e-12),
        InvariantCheck::new("entropy-within-bounds", INVARIANT_CASES, entropy_err, 1e-12),
        InvariantCheck::new("adaptive-tau-floor-and-value", INVARIANT_CASES, tau_err, 1e-12),
        InvariantCheck::new("adaptive-equal-ratio", INVARIANT_CASES, ratio_err, 1e-12),
        InvariantCheck::new("cist-weight-is-tau-product", INVARIANT_CASES, weight_err, 1e-12),
        InvariantCheck::new("kl-nonnegative", INVARIANT_CASES, kl_floor, 1e-12),
        degeneracy_check(seed, DEGENERACY_BATCHES)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn invariant_suite_passes() {
        let checks = invariant_suite(0).unwrap();
        assert_eq!(checks.len(), 8);
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn degeneracy_holds_on_random_batches() {
        let c = degeneracy_check(3, 100).unwrap();
        assert!(c.worst <= DEGENERACY_TOLERANCE);
        assert_eq!(c.cases, 100);
    }

    #[test]
    fn uniform_rows_have_max_entropy_and_no_spread() {
        let m = Matrix::zeros(7, 5);
        let r = entropy_report(&m, TemperaturePolicy::Fixed { tau: 4.0 }).unwrap();
        assert_abs_diff_eq!(r.mean, 5f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(r.std, 0.0, epsilon = 1e-15);
        assert_eq!(r.histogram.total(), 7);
        assert!(r.outliers.is_empty());
    }

    #[test]
    fn adaptive_narrows_spread_across_logit_scales() {
        let rows: Vec<Vec<f64>> = (0..26)
            .map(|k| {
                let top = 5.0 + k as f64;
                vec![top, 0.3 * top, 0.1 * top, 0.0, -0.2 * top]
            })
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let fixed = entropy_report(&m, TemperaturePolicy::Fixed { tau: 4.0 }).unwrap();
        let adaptive = entropy_report(&m, TemperaturePolicy::Adaptive { rho: 3.0 }).unwrap();
        assert!(adaptive.std < fixed.std, "{} vs {}", adaptive.std, fixed.std);
    }

    #[test]
    fn report_statistics_match_two_pass() {
        let mut rng = seed::stream(1, "t");
        let m = uniform_matrix(&mut rng, 200, 6, 9.0);
        let r = entropy_report(&m, TemperaturePolicy::Fixed { tau: 2.0 }).unwrap();
        let n = r.per_sample_entropy.len() as f64;
        let mean = r.per_sample_entropy.iter().sum::<f64>() / n;
        let var = r.per_sample_entropy.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n;
        assert_abs_diff_eq!(r.mean, mean, epsilon = 1e-10);
        assert_abs_diff_eq!(r.std, var.sqrt(), epsilon = 1e-10);
        assert!(r.per_sample_entropy.iter().all(|&h| (0.0..=6f64.ln()).contains(&h)));
        assert_eq!(r.histogram.total(), 200);
        assert_eq!(r.histogram.counts.len(), DEFAULT_HISTOGRAM_BINS);
        assert_eq!(r.quantiles.len(), 5);
        assert!(r.quantiles.windows(2).all(|w| w[0].1 <= w[1].1));
        assert_eq!(r.outliers.len(), 10);
    }

    #[test]
    fn dominated_wide_rows_concentrate_under_adaptive() {
        let mut rng = seed::stream(2, "imagenet-like");
        let c = 1000;
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| {
                let scale = rng.random_range(4.0..20.0);
                let mut v: Vec<f64> = (0..c)
                    .map(|_| 1.5 * scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                v[rng.random_range(0..c)] += 5.0 * scale;
                v
            })
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let r = entropy_report(&m, TemperaturePolicy::Adaptive { rho: 3.0 }).unwrap();
        let ln_c = (c as f64).ln();
        assert!(r.min > 0.5 * ln_c && r.max < ln_c - 0.1, "[{}, {}]", r.min, r.max);
        assert!(r.max - r.min < 0.1 * ln_c, "[{}, {}]", r.min, r.max);
        let fixed = entropy_report(&m, TemperaturePolicy::Fixed { tau: 4.0 }).unwrap();
        assert!(fixed.max - fixed.min > r.max - r.min);
    }

    #[test]
    fn empty_matrix_is_rejected() {
        let m = Matrix::zeros(0, 3);
        assert!(entropy_report(&m, TemperaturePolicy::Adaptive { rho: 3.0 }).is_err());
    }

    #[test]
    fn identical_pair_has_zero_gap() {
        let v = [4.0, 1.0, -2.0, 0.5];
        let d = decompose_pair(&v, 2.0, &v, 2.0).unwrap();
        assert_eq!(d.gap, 0.0);
        assert_eq!(d.term_a, 0.0);
        assert_eq!(d.term_b, 0.0);
    }

    #[test]
    fn decomposition_matches_exact_entropies() {
        let vi = [9.0, 1.0, 0.0, -3.0];
        let vj = [2.0, 5.0, 1.0, 0.0];
        let d = decompose_pair(&vi, 3.0, &vj, 1.5).unwrap();
        let hi = softmax_entropy(&vi, 3.0).unwrap();
        let hj = softmax_entropy(&vj, 1.5).unwrap();
        assert_abs_diff_eq!(d.gap, (hi - hj).abs(), epsilon = 1e-12);
        assert_abs_diff_eq!(d.margin_i, 8.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.margin_j, 2.0, epsilon = 1e-15);
        // residual is exactly the log-partition tail mass difference
        let tail = |v: &[f64], t: f64, m: f64| v.iter().map(|x| ((x - m) / t).exp()).sum::<f64>().ln();
        assert_abs_diff_eq!(d.residual, tail(&vi, 3.0, 9.0) - tail(&vj, 1.5, 5.0), epsilon = 1e-12);
    }

    #[test]
    fn equal_ratio_sweep_behaves() {
        let s = proposition1_sweep(200, 10, 3.0, &[2.0, 3.0, 4.0, 5.0], 0).unwrap();
        assert!(
            s.gap_decreasing && s.residual_decreasing && s.beats_fixed && s.term_a_exact,
            "{s:?}"
        );
    }

    #[test]
    fn pairs_do_not_depend_on_margin() {
        let a = verify_proposition1(5, 4, 6.0, 3.0, 9).unwrap();
        let b = verify_proposition1(5, 4, 9.0, 3.0, 9).unwrap();
        for (x, y) in a.pairs.iter().zip(&b.pairs) {
            assert!(y.margin_i > x.margin_i);
            assert_abs_diff_eq!(y.margin_i - x.margin_i, 3.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn degenerate_margin_is_rejected() {
        assert!(verify_proposition1(10, 5, 2.5, 3.0, 0).is_err());
        assert!(verify_proposition1(10, 5, 6.0, 0.0, 0).is_err());
        assert!(verify_proposition1(0, 5, 6.0, 3.0, 0).is_err());
    }

    #[test]
    fn approximation_converges_with_temperature() {
        let t = verify_high_temp_approx(&HighTempConfig::default()).unwrap();
        assert!(t.decreasing, "{t:?}");
        assert!(t.closed_form_error < 1e-10);
        let r = verify_high_temp_approx(&HighTempConfig {
            teacher_student_ratio: 2.0,
            ..HighTempConfig::default()
        })
        .unwrap();
        assert!(r.decreasing, "{r:?}");
    }

    #[test]
    fn matched_pair_has_zero_deviation() {
        let v = center(&[1.0, -2.0, 0.5, 3.0]);
        for tau in [10.0, 20.0, 40.0, 80.0] {
            let e = exact_kd_grad(&v, &v, tau, tau).unwrap();
            let a = approx_kd_grad(&v, &v, tau, tau).unwrap();
            assert_eq!(relative_deviation(&e, &a), 0.0);
        }
    }

    #[test]
    fn relative_scale_factor_enters_approximation() {
        let v = center(&[1.0, 0.0, -1.0]);
        let z = center(&[2.0, 0.0, -2.0]);
        let a = approx_kd_grad(&v, &z, 40.0, 20.0).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(a[k], (z[k] * 2.0 - v[k]) / (3.0 * 800.0), epsilon = 1e-18);
        }
    }

    #[test]
    fn grad_check_suite_passes_and_is_deterministic() {
        let a = grad_check_suite(0, false).unwrap();
        assert!(a.passed, "{a:?}");
        assert_eq!(a.checks.len(), 2 * Method::ALL.len());
        assert_eq!(a, grad_check_suite(0, false).unwrap());
    }

    #[test]
    fn fault_injection_is_caught() {
        let r = grad_check_suite(0, true).unwrap();
        assert!(!r.passed);
        assert!(r.checks.iter().all(|c| !c.passed));
    }
}
