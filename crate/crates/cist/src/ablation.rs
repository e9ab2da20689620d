//! Multi-seed method comparisons on the synthetic benchmark.
//!
//! For every seed one teacher is trained, then every requested method
//! distills a student from it. Runs are independent and may execute on
//! worker threads; results are collected by job index so the output never
//! depends on scheduling.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use cist_core::data::LabeledDataset;
use cist_core::distill::{distill_student, summarize_ablation, train_teacher, AblationRow, Benchmark, RunRecord};
use cist_core::model::Mlp;
use cist_core::{LossConfig, Method};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `kd` and the three CIST ablation arms.
pub const TABLE5_METHODS: [Method; 4] = [Method::Kd, Method::CistNoTemp, Method::CistNoReweight, Method::Cist];
/// `kd` and the two entropy-outlier variants.
pub const TABLE1_METHODS: [Method; 3] = [Method::Kd, Method::KdEntoutCe, Method::KdEntoutHt];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub benchmark: Benchmark,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Loss settings per method; `LossConfig::for_method` when absent.
    pub losses: Vec<LossConfig>,
}

impl AblationPlan {
    pub fn new(benchmark: Benchmark, methods: Vec<Method>, seeds: Vec<u64>) -> Self {
        let losses = methods.iter().map(|&m| LossConfig::for_method(m)).collect();
        Self {
            benchmark,
            methods,
            seeds,
            losses,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.len() < 2 {
            return Err(Error::Usage("an ablation needs at least two methods".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Usage("an ablation needs at least one seed".into()));
        }
        if self.losses.len() != self.methods.len() || self.losses.iter().zip(&self.methods).any(|(l, m)| l.method != *m)
        {
            return Err(Error::Usage("loss settings must line up with the method list".into()));
        }
        for l in &self.losses {
            l.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    /// One per seed, in seed order.
    pub teachers: Vec<RunRecord>,
    /// Seed-major, then in method order.
    pub runs: Vec<RunRecord>,
}

/// Runs `jobs` closures on up to `workers` threads and returns their
/// results in job order.
pub fn run_indexed<T: Send>(jobs: usize, workers: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= jobs {
                    break;
                }
                let out = job(k);
                slots.lock().expect("no worker panicked")[k] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

pub fn run_ablation(
    plan: &AblationPlan,
    dataset: &LabeledDataset,
    workers: usize,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<AblationOutcome> {
    plan.validate()?;
    let bench = &plan.benchmark;

    let teachers: Vec<(Mlp, RunRecord)> = run_indexed(plan.seeds.len(), workers, |k| {
        let seed = plan.seeds[k];
        let out = train_teacher(dataset, &bench.teacher_hidden, &bench.teacher_config(seed));
        if let Ok((_, r)) = &out {
            progress(&format!(
                "teacher seed {seed}: test accuracy {:.4}",
                r.final_test_accuracy
            ));
        }
        out
    })
    .into_iter()
    .collect::<Result<_, _>>()?;

    let per_seed = plan.methods.len();
    let runs: Vec<RunRecord> = run_indexed(plan.seeds.len() * per_seed, workers, |k| {
        let (s, m) = (k / per_seed, k % per_seed);
        let seed = plan.seeds[s];
        let config = bench.student_config(plan.losses[m].clone(), seed);
        let out = distill_student(&teachers[s].0, dataset, &bench.student_hidden, &config).map(|(_, r)| r);
        if let Ok(r) = &out {
            progress(&format!(
                "{} seed {seed}: test accuracy {:.4}",
                plan.methods[m], r.final_test_accuracy
            ));
        }
        out
    })
    .into_iter()
    .collect::<Result<_, _>>()?;

    let results: Vec<(Method, u64, f64)> = runs.iter().map(|r| (r.method, r.seed, r.final_test_accuracy)).collect();
    Ok(AblationOutcome {
        rows: summarize_ablation(&plan.methods, &results),
        teachers: teachers.into_iter().map(|(_, r)| r).collect(),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexed_results_keep_job_order() {
        let out = run_indexed(20, 4, |k| k * k);
        assert_eq!(out, (0..20).map(|k| k * k).collect::<Vec<_>>());
        assert!(run_indexed(0, 3, |k| k).is_empty());
    }

    fn tiny() -> (AblationPlan, LabeledDataset) {
        let mut b = Benchmark::default();
        b.data.classes = 3;
        b.data.dims = 4;
        b.data.per_class = 30;
        b.teacher_hidden = vec![8];
        b.student_hidden = vec![4];
        b.teacher_epochs = 2;
        b.student_epochs = 2;
        let ds = b.dataset().unwrap();
        (
            AblationPlan::new(b, vec![Method::Kd, Method::Cist, Method::Kd], vec![0, 1]),
            ds,
        )
    }

    #[test]
    fn duplicate_methods_give_identical_rows() {
        let (plan, ds) = tiny();
        let out = run_ablation(&plan, &ds, 1, &|_| {}).unwrap();
        assert_eq!(out.rows[0].per_seed, out.rows[2].per_seed);
        assert_eq!(out.runs.len(), 6);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (plan, ds) = tiny();
        let a = run_ablation(&plan, &ds, 1, &|_| {}).unwrap();
        let b = run_ablation(&plan, &ds, 3, &|_| {}).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_method_is_rejected() {
        let (mut plan, ds) = tiny();
        plan.methods.truncate(1);
        plan.losses.truncate(1);
        assert!(matches!(run_ablation(&plan, &ds, 1, &|_| {}), Err(Error::Usage(_))));
    }
}
