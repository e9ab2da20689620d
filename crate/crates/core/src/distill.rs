//! Teacher pretraining and student distillation loops.
//!
//! One epoch visits the training split in a seed-derived shuffled order.
//! For every mini-batch the frozen teacher and the student are run forward,
//! the method's temperatures and weights are planned from the current
//! logits, and the student takes one SGD step on the assembled loss.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{accuracy, LabeledDataset, MixtureConfig, Split};
use crate::error::{bail, Error, Result};
use crate::losses::{entout_partition, evaluate_plan, plan, Batch, DistillTerm, LossConfig, Method, DEFAULT_TAU};
use crate::model::{sgd_step, LrSchedule, Mlp, OptimState, SgdConfig};
use crate::numerics::softmax_entropy;
use crate::seed;
use crate::stats::Summary;

/// Everything that defines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: SgdConfig,
    pub seed: u64,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub eval_every: usize,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optim.validate()?;
        if self.epochs == 0 {
            bail!(Config, "epochs must be >= 1");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be >= 1");
        }
        if self.eval_every == 0 {
            bail!(Config, "eval cadence must be >= 1");
        }
        Ok(())
    }

    /// SGD with momentum 0.9 and weight decay 5e-4, decaying the rate by 0.1
    /// at 5/8, 3/4 and 7/8 of the run.
    pub fn standard(loss: LossConfig, epochs: usize, lr: f64, seed: u64) -> Self {
        let milestones = [5, 6, 7].iter().map(|k| epochs * k / 8).filter(|&m| m > 0).collect();
        Self {
            loss,
            epochs,
            batch_size: 64,
            optim: SgdConfig {
                schedule: LrSchedule {
                    initial: lr,
                    factor: 0.1,
                    milestones,
                },
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            seed,
            eval_every: 1,
        }
    }
}

/// Mean training-loss parts over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: EpochLoss,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Entropy statistics of the teacher soft labels the loss actually used.
    pub teacher_entropy_mean: Option<f64>,
    pub teacher_entropy_std: Option<f64>,
    /// Not part of the reproducible record.
    #[serde(skip)]
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_val_epoch: usize,
    pub final_test_accuracy: f64,
    /// Number of training samples flagged as entropy outliers.
    pub entropy_outliers: Option<usize>,
}

/// Accuracy of `model` on one split.
pub fn evaluate(model: &Mlp, dataset: &LabeledDataset, split: Split) -> Result<f64> {
    let (x, y) = dataset.split(split);
    if y.is_empty() {
        return Ok(0.0);
    }
    let logits = model.predict(&x)?;
    Ok(accuracy(&logits.argmax_rows(), &y))
}

fn check_model(model: &Mlp, dataset: &LabeledDataset, who: &str) -> Result<()> {
    if model.input_dim() != dataset.dims() || model.num_classes() != dataset.num_classes() {
        bail!(
            Shape,
            "{who} maps {} features to {} classes, dataset has {} features and {} classes",
            model.input_dim(),
            model.num_classes(),
            dataset.dims(),
            dataset.num_classes()
        );
    }
    Ok(())
}

fn network_dims(dataset: &LabeledDataset, hidden: &[usize]) -> Vec<usize> {
    let mut dims = vec![dataset.dims()];
    dims.extend_from_slice(hidden);
    dims.push(dataset.num_classes());
    dims
}

/// Trains a teacher with plain cross-entropy at temperature 1.
///
/// Training loops return the parameters of the best-validation epoch.
pub fn train_teacher(dataset: &LabeledDataset, hidden: &[usize], config: &DistillConfig) -> Result<(Mlp, RunRecord)> {
    train_teacher_timed(dataset, hidden, config, &mut || 0.0)
}

pub fn train_teacher_timed(
    dataset: &LabeledDataset,
    hidden: &[usize],
    config: &DistillConfig,
    clock: &mut dyn FnMut() -> f64,
) -> Result<(Mlp, RunRecord)> {
    if config.loss.method != Method::CeOnly {
        bail!(
            Config,
            "teachers are trained with method `ce`, got `{}`",
            config.loss.method
        );
    }
    let mut rng = seed::stream(config.seed, "teacher-init");
    let mut teacher = Mlp::new(&network_dims(dataset, hidden), &mut rng)?;
    let record = run(&mut teacher, None, dataset, config, "teacher-batch-order", clock)?;
    Ok((teacher, record))
}

/// Distills a fresh student of the given hidden widths from a frozen teacher.
pub fn distill_student(
    teacher: &Mlp,
    dataset: &LabeledDataset,
    hidden: &[usize],
    config: &DistillConfig,
) -> Result<(Mlp, RunRecord)> {
    distill_student_timed(teacher, dataset, hidden, config, &mut || 0.0)
}

pub fn distill_student_timed(
    teacher: &Mlp,
    dataset: &LabeledDataset,
    hidden: &[usize],
    config: &DistillConfig,
    clock: &mut dyn FnMut() -> f64,
) -> Result<(Mlp, RunRecord)> {
    check_model(teacher, dataset, "teacher")?;
    let mut rng = seed::stream(config.seed, "student-init");
    let mut student = Mlp::new(&network_dims(dataset, hidden), &mut rng)?;
    let teacher = config.loss.method.needs_teacher().then_some(teacher);
    let record = run(&mut student, teacher, dataset, config, "student-batch-order", clock)?;
    Ok((student, record))
}

/// Outlier flags over the rows of `dataset` (not only the train split):
/// the lowest-entropy teacher labels within the training split at the
/// baseline temperature.
pub fn entropy_outlier_mask(teacher: &Mlp, dataset: &LabeledDataset, loss: &LossConfig) -> Result<Vec<bool>> {
    let train = dataset.indices(Split::Train);
    let logits = teacher.predict(&dataset.features().select_rows(&train))?;
    let part = entout_partition(&logits, loss.tau.unwrap_or(DEFAULT_TAU), loss.entout_fraction)?;
    let mut mask = vec![false; dataset.len()];
    for &k in &part.outliers {
        mask[train[k]] = true;
    }
    Ok(mask)
}

fn run(
    model: &mut Mlp,
    teacher: Option<&Mlp>,
    dataset: &LabeledDataset,
    config: &DistillConfig,
    order_stream: &str,
    clock: &mut dyn FnMut() -> f64,
) -> Result<RunRecord> {
    config.validate()?;
    check_model(model, dataset, "model")?;
    let method = config.loss.method;
    if method.needs_teacher() && teacher.is_none() {
        bail!(Config, "method {method} needs a teacher");
    }

    let outliers = match (method.uses_outliers(), teacher) {
        (true, Some(t)) => Some(entropy_outlier_mask(t, dataset, &config.loss)?),
        _ => None,
    };

    let mut order = dataset.indices(Split::Train);
    let mut rng = seed::stream(config.seed, order_stream);
    let mut optim = OptimState::new(config.optim.clone(), model)?;
    let features = dataset.features();
    let labels = dataset.labels();
    let n_train = order.len() as f64;

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Mlp)> = None;
    for epoch in 1..=config.epochs {
        let started = clock();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut total, mut ce, mut kl) = (0.0, 0.0, 0.0);
        let mut entropies = Summary::new();

        for chunk in order.chunks(config.batch_size) {
            let x = features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let flags: Option<Vec<bool>> = outliers.as_ref().map(|m| chunk.iter().map(|&i| m[i]).collect());
            let teacher_logits = teacher.map(|t| t.predict(&x)).transpose()?;
            let (student_logits, cache) = model.forward(&x)?;

            let mut batch = Batch {
                teacher: teacher_logits.as_ref(),
                student: &student_logits,
                labels: &y,
                outliers: None,
            };
            if let Some(f) = flags.as_deref() {
                batch = batch.with_outliers(f);
            }
            let frozen = plan(&batch, &config.loss).map_err(|e| diverged_or(e, epoch, &student_logits))?;
            let (loss, grad) = evaluate_plan(&batch, &config.loss, &frozen)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { epoch });
            }

            if let Some(t) = teacher_logits.as_ref() {
                for (i, term) in frozen.term.iter().enumerate() {
                    if *term == DistillTerm::Soft {
                        entropies.push(softmax_entropy(t.row(i), frozen.teacher_tau[i])?);
                    }
                }
            }

            let w = chunk.len() as f64 / n_train;
            total += w * loss.total;
            ce += w * loss.ce_term;
            kl += w * loss.kl_term;

            let grads = model.backward(&cache, &grad)?;
            sgd_step(model, &grads, &mut optim, epoch)?;
        }

        let evaluate_now = epoch % config.eval_every == 0 || epoch == config.epochs;
        let (val, test) = if evaluate_now {
            (
                Some(evaluate(model, dataset, Split::Val)?),
                Some(evaluate(model, dataset, Split::Test)?),
            )
        } else {
            (None, None)
        };
        if let Some(v) = val {
            if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                best = Some((v, model.clone()));
            }
        }
        let has_entropy = entropies.count() > 0;
        epochs.push(EpochRecord {
            epoch,
            lr: config.optim.schedule.lr(epoch),
            loss: EpochLoss { total, ce, kl },
            val_accuracy: val,
            test_accuracy: test,
            teacher_entropy_mean: has_entropy.then(|| entropies.mean()),
            teacher_entropy_std: has_entropy.then(|| entropies.std()),
            wall_secs: clock() - started,
        });
    }

    let (best_val_epoch, final_test_accuracy) = best_epoch(&epochs);
    if let Some((_, m)) = best {
        model.set_params_flat(&m.params_flat())?;
    }
    Ok(RunRecord {
        method,
        seed: config.seed,
        epochs,
        best_val_epoch,
        final_test_accuracy,
        entropy_outliers: outliers.map(|m| m.iter().filter(|&&o| o).count()),
    })
}

// Student logits that blew up surface as input errors from the planner.
fn diverged_or(e: Error, epoch: usize, logits: &crate::Matrix) -> Error {
    if logits.is_finite() {
        e
    } else {
        Error::Diverged { epoch }
    }
}

/// Earliest epoch with the highest validation accuracy, and its test accuracy.
fn best_epoch(epochs: &[EpochRecord]) -> (usize, f64) {
    let mut best: Option<(f64, usize, f64)> = None;
    for e in epochs {
        if let (Some(v), Some(t)) = (e.val_accuracy, e.test_accuracy) {
            if best.is_none_or(|(bv, _, _)| v > bv) {
                best = Some((v, e.epoch, t));
            }
        }
    }
    best.map_or((0, 0.0), |(_, e, t)| (e, t))
}

/// The desk-scale benchmark: data, architectures and training schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub data: MixtureConfig,
    pub teacher_hidden: Vec<usize>,
    pub student_hidden: Vec<usize>,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub teacher_lr: f64,
    pub student_lr: f64,
}

impl Default for Benchmark {
    fn default() -> Self {
        Self {
            data: MixtureConfig {
                classes: 20,
                dims: 16,
                per_class: 200,
                spread: 1.0,
                overlap: 0.6,
                seed: 0,
            },
            teacher_hidden: vec![128, 128],
            student_hidden: vec![32],
            teacher_epochs: 30,
            student_epochs: 100,
            teacher_lr: 0.01,
            student_lr: 0.01,
        }
    }
}

impl Benchmark {
    pub fn teacher_config(&self, seed: u64) -> DistillConfig {
        DistillConfig::standard(
            LossConfig::for_method(Method::CeOnly),
            self.teacher_epochs,
            self.teacher_lr,
            seed,
        )
    }

    pub fn student_config(&self, loss: LossConfig, seed: u64) -> DistillConfig {
        DistillConfig::standard(loss, self.student_epochs, self.student_lr, seed)
    }

    pub fn dataset(&self) -> Result<LabeledDataset> {
        crate::data::gen_gaussian_mixture(&self.data)
    }
}

/// Mean and spread of one method's final test accuracy across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: Method,
    pub mean_accuracy: f64,
    /// Sample standard deviation over seeds.
    pub std_accuracy: f64,
    pub per_seed: Vec<f64>,
}

/// Reduces per-(method, seed) accuracies into table rows, preserving the
/// method order given.
pub fn summarize_ablation(methods: &[Method], results: &[(Method, u64, f64)]) -> Vec<AblationRow> {
    methods
        .iter()
        .map(|&m| {
            let per_seed: Vec<f64> = results.iter().filter(|r| r.0 == m).map(|r| r.2).collect();
            let s: Summary = per_seed.iter().copied().collect();
            AblationRow {
                method: m,
                mean_accuracy: s.mean(),
                std_accuracy: s.sample_std(),
                per_seed,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_mixture, MixtureConfig};

    fn small_data() -> LabeledDataset {
        gen_gaussian_mixture(&MixtureConfig {
            classes: 3,
            dims: 4,
            per_class: 60,
            spread: 1.0,
            overlap: 0.2,
            seed: 5,
        })
        .unwrap()
    }

    fn quick(loss: LossConfig, epochs: usize, seed: u64) -> DistillConfig {
        DistillConfig {
            batch_size: 16,
            ..DistillConfig::standard(loss, epochs, 0.05, seed)
        }
    }

    #[test]
    fn mlp_learns_separable_three_class_set() {
        let ds = small_data();
        let (model, record) =
            train_teacher(&ds, &[16], &quick(LossConfig::for_method(Method::CeOnly), 200, 1)).unwrap();
        assert!(evaluate(&model, &ds, Split::Train).unwrap() >= 0.95);
        assert!(record.final_test_accuracy >= 0.95);
        assert_eq!(record.epochs.len(), 200);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_data();
        let cfg = quick(LossConfig::for_method(Method::CeOnly), 5, 3);
        let (a, ra) = train_teacher(&ds, &[8], &cfg).unwrap();
        let (b, rb) = train_teacher(&ds, &[8], &cfg).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        assert_eq!(ra, rb);
    }

    #[test]
    fn teacher_is_untouched_by_distillation() {
        let ds = small_data();
        let (teacher, _) = train_teacher(&ds, &[8], &quick(LossConfig::for_method(Method::CeOnly), 3, 3)).unwrap();
        let snapshot = teacher.clone();
        for m in Method::ALL {
            distill_student(&teacher, &ds, &[4], &quick(LossConfig::for_method(m), 2, 3)).unwrap();
        }
        assert_eq!(teacher, snapshot);
    }

    #[test]
    fn entout_ce_flags_five_percent_of_train() {
        let ds = small_data();
        let (teacher, _) = train_teacher(&ds, &[8], &quick(LossConfig::for_method(Method::CeOnly), 3, 3)).unwrap();
        let n_train = ds.indices(Split::Train).len();
        let (_, rec) = distill_student(
            &teacher,
            &ds,
            &[4],
            &quick(LossConfig::for_method(Method::KdEntoutCe), 1, 3),
        )
        .unwrap();
        assert_eq!(rec.entropy_outliers, Some(n_train * 5 / 100));
    }

    #[test]
    fn wrong_method_for_teacher_is_rejected() {
        let ds = small_data();
        let err = train_teacher(&ds, &[8], &quick(LossConfig::for_method(Method::Kd), 1, 0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let ds = small_data();
        let mut cfg = quick(LossConfig::for_method(Method::CeOnly), 5, 0);
        cfg.optim.schedule = LrSchedule::constant(1e200);
        cfg.optim.momentum = 0.0;
        let err = train_teacher(&ds, &[8], &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn best_epoch_prefers_earliest() {
        let mk = |epoch, v, t| EpochRecord {
            epoch,
            lr: 0.1,
            loss: EpochLoss {
                total: 0.0,
                ce: 0.0,
                kl: 0.0,
            },
            val_accuracy: Some(v),
            test_accuracy: Some(t),
            teacher_entropy_mean: None,
            teacher_entropy_std: None,
            wall_secs: 0.0,
        };
        let e = [mk(1, 0.5, 0.4), mk(2, 0.7, 0.6), mk(3, 0.7, 0.9)];
        assert_eq!(best_epoch(&e), (2, 0.6));
    }

    #[test]
    fn standard_schedule_milestones() {
        let c = DistillConfig::standard(LossConfig::for_method(Method::Kd), 240, 0.05, 0);
        assert_eq!(c.optim.schedule.milestones, vec![150, 180, 210]);
    }
}
