//! Command implementations.
//!
//! Every command checks that its outputs may be written, writes the
//! manifest, and only then computes and writes its artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use cist_core::analysis::{
    entropy_report_with, grad_check_suite, invariant_suite, proposition1_sweep, verify_high_temp_approx, HighTempConfig,
};
use cist_core::data::{gen_gaussian_mixture, LabeledDataset, MixtureConfig, Split};
use cist_core::distill::{distill_student_timed, train_teacher_timed, Benchmark, DistillConfig, RunRecord};
use cist_core::model::Mlp;
use cist_core::temperature::{calibrate_rho, calibration_subset};
use cist_core::{LossConfig, Matrix, Method, TemperaturePolicy};
use serde::Serialize;
use serde_json::{json, Value};

use crate::ablation::{run_ablation, AblationPlan, TABLE1_METHODS, TABLE5_METHODS};
use crate::checkpoint::{self, CheckpointMeta};
use crate::cli::{
    AblationArgs, AnalyzeArgs, CalibrateArgs, Command, DistillArgs, ExportLogitsArgs, GenDataArgs, LogitSource,
    LossArgs, OutputArgs, PolicyArg, RerunArgs, SuiteArg, TrainArgs, TrainTeacherArgs, VerifyArgs,
};
use crate::error::{Error, Result};
use crate::formats::{self, LogitDump};
use crate::manifest::{self, RunManifest};
use crate::runlog;

/// Margins, as multiples of ρ, swept by `verify`.
pub const PROPOSITION_MULTIPLIERS: [f64; 4] = [2.0, 3.0, 4.0, 5.0];

/// Progress messages go here; results only ever go to files.
pub type Progress<'a> = &'a (dyn Fn(&str) + Sync);

pub fn run(command: &Command, progress: Progress<'_>) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(command, a),
        Command::TrainTeacher(a) => train_teacher(command, a, progress),
        Command::Distill(a) => distill(command, a, progress),
        Command::ExportLogits(a) => export_logits(command, a),
        Command::CalibrateRho(a) => calibrate(command, a),
        Command::AnalyzeEntropy(a) => analyze(command, a),
        Command::Verify(a) => verify(command, a, progress),
        Command::RunAblation(a) => ablation(command, a, progress),
        Command::Rerun(a) => rerun(a, progress),
    }
}

struct OutDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    /// Creates the directory and refuses to clobber any planned output
    /// unless `--force` was given.
    fn prepare(args: &OutputArgs, files: Vec<String>) -> Result<Self> {
        fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
        for f in std::iter::once(manifest::FILE_NAME).chain(files.iter().map(String::as_str)) {
            let p = args.out.join(f);
            if p.exists() && !args.force {
                return Err(Error::Exists(p));
            }
        }
        Ok(Self {
            dir: args.out.clone(),
            files,
        })
    }

    fn path(&self, file: &str) -> PathBuf {
        debug_assert!(self.files.iter().any(|f| f == file), "{file} was not declared");
        self.dir.join(file)
    }

    fn write_manifest(&self, command: &Command, seed: Option<u64>, config: Value) -> Result<()> {
        let artifacts: BTreeMap<String, String> = self.files.iter().map(|f| (f.clone(), f.clone())).collect();
        let args = serde_json::to_value(command).expect("arguments serialize");
        RunManifest::new(command.name(), seed, config, args, artifacts).write(&self.dir)
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("settings serialize")
}

fn gen_data(command: &Command, a: &GenDataArgs) -> Result<()> {
    let config = MixtureConfig {
        classes: a.classes,
        dims: a.dims,
        per_class: a.per_class,
        spread: a.spread,
        overlap: a.overlap.unwrap_or(Benchmark::default().data.overlap),
        seed: a.seed,
    };
    config.validate().map_err(usage)?;
    let out = OutDir::prepare(&a.output, vec!["data.csv".into()])?;
    out.write_manifest(command, Some(a.seed), to_value(&config))?;
    let ds = gen_gaussian_mixture(&config)?;
    formats::write_dataset(&out.path("data.csv"), &ds)
}

// Invalid settings given on the command line are usage errors.
fn usage(e: cist_core::Error) -> Error {
    Error::Usage(e.to_string())
}

fn train_config(a: &TrainArgs, loss: LossConfig, default_epochs: usize, default_lr: f64) -> Result<DistillConfig> {
    let mut c = DistillConfig::standard(
        loss,
        a.epochs.unwrap_or(default_epochs),
        a.lr.unwrap_or(default_lr),
        a.seed,
    );
    c.batch_size = a.batch_size;
    c.optim.momentum = a.momentum;
    c.optim.weight_decay = a.weight_decay;
    c.eval_every = a.eval_every;
    c.validate().map_err(usage)?;
    Ok(c)
}

fn run_files(role: &str, timing: bool) -> Vec<String> {
    let mut files = vec![
        format!("{role}.ckpt"),
        format!("{role}.ckpt.meta.json"),
        "log.jsonl".into(),
        "summary.json".into(),
    ];
    if timing {
        files.push("timing.csv".into());
    }
    files
}

fn stopwatch() -> impl FnMut() -> f64 {
    let start = Instant::now();
    move || start.elapsed().as_secs_f64()
}

fn save_run(
    out: &OutDir,
    role: &str,
    model: &Mlp,
    record: &RunRecord,
    config_hash: String,
    timing: bool,
) -> Result<()> {
    let meta = CheckpointMeta {
        role: role.into(),
        method: record.method.name().into(),
        dims: model.dims(),
        seed: record.seed,
        epoch: record.best_val_epoch,
        config_hash,
    };
    checkpoint::save(&out.path(&format!("{role}.ckpt")), model, &meta)?;
    runlog::write_log(&out.path("log.jsonl"), record)?;
    runlog::write_summary(&out.path("summary.json"), record)?;
    if timing {
        runlog::write_timing(&out.path("timing.csv"), record)?;
    }
    Ok(())
}

fn train_teacher(command: &Command, a: &TrainTeacherArgs, progress: Progress<'_>) -> Result<()> {
    let bench = Benchmark::default();
    let ds = formats::load_dataset(&a.data)?;
    let hidden = a.hidden.clone().unwrap_or(bench.teacher_hidden);
    let config = train_config(
        &a.train,
        LossConfig::for_method(Method::CeOnly),
        bench.teacher_epochs,
        bench.teacher_lr,
    )?;
    let resolved = json!({
        "data": a.data,
        "dims": network_dims(&ds, &hidden),
        "train": config,
    });
    let out = OutDir::prepare(&a.output, run_files("teacher", a.train.timing))?;
    out.write_manifest(command, Some(a.train.seed), resolved.clone())?;
    let (model, record) = train_teacher_timed(&ds, &hidden, &config, &mut stopwatch())?;
    progress(&format!(
        "teacher: best epoch {}, test accuracy {:.4}",
        record.best_val_epoch, record.final_test_accuracy
    ));
    save_run(
        &out,
        "teacher",
        &model,
        &record,
        manifest::config_hash(command.name(), &resolved),
        a.train.timing,
    )
}

fn network_dims(ds: &LabeledDataset, hidden: &[usize]) -> Vec<usize> {
    let mut dims = vec![ds.dims()];
    dims.extend_from_slice(hidden);
    dims.push(ds.num_classes());
    dims
}

/// Method defaults overlaid with the flags given. Flags that mean nothing
/// for the chosen method are rejected by name.
pub fn resolve_loss(a: &LossArgs) -> Result<LossConfig> {
    let m = a.method;
    let mut c = LossConfig::for_method(m);
    let reject = |flag: &str| Err(Error::Usage(format!("{flag} does not apply to method {m}")));
    if let Some(rho) = a.rho {
        if !m.needs_rho() {
            return reject("--rho");
        }
        c.rho = Some(rho);
    }
    if let Some(tau) = a.tau {
        if !(m.needs_fixed_tau() || m == Method::CeOnly) {
            return reject("--tau");
        }
        c.tau = Some(tau);
    }
    if let Some(l) = a.lambda_kl {
        if m == Method::CeOnly {
            return reject("--lambda-kl");
        }
        c.lambda_kl = l;
    }
    if let Some(l) = a.lambda_ce {
        c.lambda_ce = l;
    }
    if let Some(f) = a.entout_fraction {
        if !m.uses_outliers() {
            return reject("--entout-fraction");
        }
        c.entout_fraction = f;
    }
    if let Some(d) = a.entout_delta {
        if m != Method::KdEntoutHt {
            return reject("--entout-delta");
        }
        c.entout_ht_delta = d;
    }
    c.validate().map_err(usage)?;
    Ok(c)
}

fn distill(command: &Command, a: &DistillArgs, progress: Progress<'_>) -> Result<()> {
    let bench = Benchmark::default();
    let loss = resolve_loss(&a.loss)?;
    let config = train_config(&a.train, loss, bench.student_epochs, bench.student_lr)?;
    let ds = formats::load_dataset(&a.data)?;
    let teacher = checkpoint::load(&a.teacher)?;
    let hidden = a.hidden.clone().unwrap_or(bench.student_hidden);
    let resolved = json!({
        "data": a.data,
        "teacher": a.teacher,
        "dims": network_dims(&ds, &hidden),
        "train": config,
    });
    let out = OutDir::prepare(&a.output, run_files("student", a.train.timing))?;
    out.write_manifest(command, Some(a.train.seed), resolved.clone())?;
    let (model, record) = distill_student_timed(&teacher, &ds, &hidden, &config, &mut stopwatch())?;
    progress(&format!(
        "{}: best epoch {}, test accuracy {:.4}",
        record.method, record.best_val_epoch, record.final_test_accuracy
    ));
    save_run(
        &out,
        "student",
        &model,
        &record,
        manifest::config_hash(command.name(), &resolved),
        a.train.timing,
    )
}

fn export_logits(command: &Command, a: &ExportLogitsArgs) -> Result<()> {
    let model = checkpoint::load(&a.model)?;
    let ds = formats::load_dataset(&a.data)?;
    let split: Split = a.split.into();
    let out = OutDir::prepare(&a.output, vec!["logits.csv".into()])?;
    let resolved = json!({ "model": a.model, "data": a.data, "split": split, "dims": model.dims() });
    out.write_manifest(command, None, resolved)?;
    let (x, y) = ds.split(split);
    let dump = LogitDump {
        logits: model.predict(&x)?,
        labels: Some(y),
    };
    formats::write_logit_dump(&out.path("logits.csv"), &dump)
}

fn load_logits(src: &LogitSource) -> Result<(Matrix, Value)> {
    match (&src.logits, &src.teacher, &src.data) {
        (Some(path), None, None) => {
            let dump = formats::load_logit_dump(path)?;
            Ok((dump.logits, json!({ "logits": path })))
        }
        (None, Some(teacher), Some(data)) => {
            let model = checkpoint::load(teacher)?;
            let ds = formats::load_dataset(data)?;
            let split: Split = src.split.into();
            let logits = model.predict(&ds.split(split).0)?;
            Ok((logits, json!({ "teacher": teacher, "data": data, "split": split })))
        }
        _ => Err(Error::Usage(
            "give either --logits, or --teacher together with --data".into(),
        )),
    }
}

fn calibrate(command: &Command, a: &CalibrateArgs) -> Result<()> {
    if a.subset == 0 {
        return Err(Error::Usage("--subset must be >= 1".into()));
    }
    let (logits, source) = load_logits(&a.source)?;
    let rows = calibration_subset(logits.rows(), a.subset, a.seed);
    let resolved = json!({
        "source": source,
        "candidates": a.candidates,
        "subset": rows.len(),
    });
    let out = OutDir::prepare(&a.output, vec!["calibration.csv".into()])?;
    out.write_manifest(command, Some(a.seed), resolved)?;
    let table = calibrate_rho(&logits.select_rows(&rows), &a.candidates).map_err(usage)?;
    formats::write_calibration(&out.path("calibration.csv"), &table)
}

fn analyze(command: &Command, a: &AnalyzeArgs) -> Result<()> {
    let (logits, source) = load_logits(&a.source)?;
    let policy = match a.policy {
        PolicyArg::Fixed => TemperaturePolicy::Fixed { tau: a.tau },
        PolicyArg::Adaptive => TemperaturePolicy::Adaptive { rho: a.rho },
    };
    policy.validate().map_err(usage)?;
    if a.bins == 0 || !(0.0..=1.0).contains(&a.outlier_quantile) {
        return Err(Error::Usage(
            "--bins must be >= 1 and --outlier-quantile in [0, 1]".into(),
        ));
    }
    let resolved = json!({
        "source": source,
        "policy": policy,
        "bins": a.bins,
        "outlier_quantile": a.outlier_quantile,
    });
    let files = ["entropy_stats.csv", "entropies.csv", "histogram.csv"]
        .map(String::from)
        .to_vec();
    let out = OutDir::prepare(&a.output, files)?;
    out.write_manifest(command, None, resolved)?;
    let report = entropy_report_with(&logits, policy, a.bins, a.outlier_quantile)?;
    formats::write_entropy_stats(&out.path("entropy_stats.csv"), &report)?;
    formats::write_entropies(&out.path("entropies.csv"), &report)?;
    formats::write_histogram(&out.path("histogram.csv"), &report.histogram)
}

#[derive(Debug, Serialize)]
struct VerifySummary {
    passed: bool,
    grad_checks: bool,
    invariants: bool,
    proposition_gap_decreasing: bool,
    proposition_beats_fixed: bool,
    proposition_term_a_exact: bool,
    proposition_residual_decreasing: bool,
    high_temp_decreasing: bool,
    high_temp_closed_form_error: f64,
    failures: Vec<String>,
}

/// Tolerance on the shared-temperature closed form of the approximation.
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-10;

fn verify(command: &Command, a: &VerifyArgs, progress: Progress<'_>) -> Result<()> {
    let high_temp = HighTempConfig {
        seed: a.seed,
        ..HighTempConfig::default()
    };
    let resolved = json!({
        "pairs": a.pairs,
        "classes": a.classes,
        "rho": a.rho,
        "margin_multipliers": PROPOSITION_MULTIPLIERS,
        "high_temp": high_temp,
        "fault_injection": a.fault_injection,
    });
    let files = [
        "grad_check.csv",
        "invariants.csv",
        "proposition.csv",
        "convergence.csv",
        "verify.json",
    ]
    .map(String::from)
    .to_vec();
    let out = OutDir::prepare(&a.output, files)?;
    out.write_manifest(command, Some(a.seed), resolved)?;

    let grads = grad_check_suite(a.seed, a.fault_injection)?;
    formats::write_grad_checks(&out.path("grad_check.csv"), &grads)?;
    progress(&format!(
        "gradient checks: {}",
        if grads.passed { "pass" } else { "FAIL" }
    ));
    let invariants = invariant_suite(a.seed)?;
    formats::write_invariants(&out.path("invariants.csv"), &invariants)?;
    let prop = proposition1_sweep(a.pairs, a.classes, a.rho, &PROPOSITION_MULTIPLIERS, a.seed).map_err(usage)?;
    formats::write_proposition(&out.path("proposition.csv"), &prop)?;
    let conv = verify_high_temp_approx(&high_temp)?;
    formats::write_convergence(&out.path("convergence.csv"), &conv)?;

    let mut failures: Vec<String> = grads
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.clone())
        .collect();
    failures.extend(invariants.iter().filter(|c| !c.passed).map(|c| c.name.clone()));
    for (ok, name) in [
        (prop.gap_decreasing, "proposition/gap-decreasing"),
        (prop.beats_fixed, "proposition/beats-fixed"),
        (prop.term_a_exact, "proposition/term-a-exact"),
        (prop.residual_decreasing, "proposition/residual-decreasing"),
        (conv.decreasing, "high-temp/decreasing"),
        (conv.closed_form_error <= CLOSED_FORM_TOLERANCE, "high-temp/closed-form"),
    ] {
        if !ok {
            failures.push(name.into());
        }
    }
    let summary = VerifySummary {
        passed: failures.is_empty(),
        grad_checks: grads.passed,
        invariants: invariants.iter().all(|c| c.passed),
        proposition_gap_decreasing: prop.gap_decreasing,
        proposition_beats_fixed: prop.beats_fixed,
        proposition_term_a_exact: prop.term_a_exact,
        proposition_residual_decreasing: prop.residual_decreasing,
        high_temp_decreasing: conv.decreasing,
        high_temp_closed_form_error: conv.closed_form_error,
        failures: failures.clone(),
    };
    runlog::write_json(&out.path("verify.json"), &summary)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(failures.join(", ")))
    }
}

fn ablation_methods(a: &AblationArgs) -> Result<Vec<Method>> {
    let methods = match (&a.methods, a.suite) {
        (Some(m), _) => m.clone(),
        (None, SuiteArg::Components) => TABLE5_METHODS.to_vec(),
        (None, SuiteArg::Entout) => TABLE1_METHODS.to_vec(),
        (None, SuiteArg::All) => Method::ALL.to_vec(),
    };
    for (i, m) in methods.iter().enumerate() {
        if methods[..i].contains(m) {
            return Err(Error::Usage(format!("method {m} listed twice in --methods")));
        }
    }
    Ok(methods)
}

pub fn ablation_benchmark(a: &AblationArgs) -> Benchmark {
    let mut b = Benchmark::default();
    b.data.seed = a.data_seed;
    if let Some(o) = a.overlap {
        b.data.overlap = o;
    }
    if let Some(e) = a.teacher_epochs {
        b.teacher_epochs = e;
    }
    if let Some(e) = a.student_epochs {
        b.student_epochs = e;
    }
    b
}

fn run_log_name(method: &str, seed: u64) -> String {
    format!("logs/{method}-seed{seed}.jsonl")
}

fn ablation(command: &Command, a: &AblationArgs, progress: Progress<'_>) -> Result<()> {
    let methods = ablation_methods(a)?;
    let seeds = a.seeds.clone();
    if seeds.iter().enumerate().any(|(i, s)| seeds[..i].contains(s)) {
        return Err(Error::Usage("--seeds must not repeat".into()));
    }
    let bench = ablation_benchmark(a);
    bench.data.validate().map_err(usage)?;
    let plan = AblationPlan::new(bench, methods, seeds);
    plan.validate()?;

    let mut files = vec!["comparison.csv".to_string(), "ablation.json".to_string()];
    for &s in &plan.seeds {
        files.push(run_log_name("teacher", s));
        files.extend(plan.methods.iter().map(|m| run_log_name(m.name(), s)));
    }
    let out = OutDir::prepare(&a.output, files)?;
    fs::create_dir_all(out.dir.join("logs")).map_err(|e| Error::io(&out.dir.join("logs"), e))?;
    out.write_manifest(command, None, to_value(&plan))?;

    let ds = plan.benchmark.dataset()?;
    let outcome = run_ablation(&plan, &ds, a.jobs, progress)?;
    for t in &outcome.teachers {
        runlog::write_log(&out.path(&run_log_name("teacher", t.seed)), t)?;
    }
    for r in &outcome.runs {
        runlog::write_log(&out.path(&run_log_name(r.method.name(), r.seed)), r)?;
    }
    formats::write_comparison(&out.path("comparison.csv"), &plan.seeds, &outcome.rows)?;
    let summary = json!({
        "rows": outcome.rows,
        "teachers": outcome.teachers.iter().map(runlog::RunSummary::from).collect::<Vec<_>>(),
        "runs": outcome.runs.iter().map(runlog::RunSummary::from).collect::<Vec<_>>(),
    });
    runlog::write_json(&out.path("ablation.json"), &summary)
}

fn rerun(a: &RerunArgs, progress: Progress<'_>) -> Result<()> {
    let m = RunManifest::read(&a.manifest)?;
    let mut command: Command = serde_json::from_value(m.args.clone()).map_err(|e| Error::Format {
        path: a.manifest.clone(),
        line: 0,
        column: 0,
        offset: 0,
        message: format!("manifest arguments do not describe a command: {e}"),
    })?;
    if command.name() != m.command {
        return Err(Error::Format {
            path: a.manifest.clone(),
            line: 0,
            column: 0,
            offset: 0,
            message: format!("manifest command `{}` does not match its arguments", m.command),
        });
    }
    if let Some(output) = output_args(&mut command) {
        output.force |= a.force;
    }
    run(&command, progress)
}

fn output_args(command: &mut Command) -> Option<&mut OutputArgs> {
    match command {
        Command::GenData(a) => Some(&mut a.output),
        Command::TrainTeacher(a) => Some(&mut a.output),
        Command::Distill(a) => Some(&mut a.output),
        Command::ExportLogits(a) => Some(&mut a.output),
        Command::CalibrateRho(a) => Some(&mut a.output),
        Command::AnalyzeEntropy(a) => Some(&mut a.output),
        Command::Verify(a) => Some(&mut a.output),
        Command::RunAblation(a) => Some(&mut a.output),
        Command::Rerun(_) => None,
    }
}
