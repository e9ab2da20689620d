//! CSV formats for datasets, logit dumps and reports.
//!
//! Floats are written with 17 significant digits so that every `f64`
//! survives a write/read cycle bit for bit.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use cist_core::analysis::{ConvergenceTable, EntropyReport, GradCheckReport, InvariantCheck, PropositionSweep};
use cist_core::data::{LabeledDataset, Split};
use cist_core::distill::AblationRow;
use cist_core::stats::Histogram;
use cist_core::temperature::CalibrationRow;
use cist_core::{Matrix, TemperaturePolicy};

use crate::error::{Error, Result};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Logits exported from a classifier, optionally with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDump {
    pub logits: Matrix,
    pub labels: Option<Vec<usize>>,
}

struct Located<'a> {
    path: &'a Path,
    line: u64,
    offset: u64,
}

impl Located<'_> {
    fn err(&self, column: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            line: self.line,
            column,
            offset: self.offset,
            message: message.into(),
        }
    }

    fn float(&self, column: usize, field: &str) -> Result<f64> {
        let x: f64 = field
            .trim()
            .parse()
            .map_err(|_| self.err(column, format!("`{field}` is not a number")))?;
        if !x.is_finite() {
            return Err(self.err(column, format!("non-finite value `{field}`")));
        }
        Ok(x)
    }

    fn label(&self, column: usize, field: &str) -> Result<usize> {
        field
            .trim()
            .parse()
            .map_err(|_| self.err(column, format!("`{field}` is not a class index")))
    }
}

/// Parses `source` as CSV and hands every record, with its location, to
/// `row`. The first record is the header.
fn read_records(
    path: &Path,
    source: impl Read,
    mut row: impl FnMut(&Located<'_>, &csv::StringRecord) -> Result<()>,
) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(source);
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| {
            let (line, offset) = e.position().map_or((0, 0), |p| (p.line(), p.byte()));
            Error::Format {
                path: path.to_path_buf(),
                line,
                column: 0,
                offset,
                message: e.to_string(),
            }
        })?;
        if !more {
            return Ok(());
        }
        let pos = record.position().expect("records read from a reader carry a position");
        let loc = Located {
            path,
            line: pos.line(),
            offset: pos.byte(),
        };
        row(&loc, &record)?;
    }
}

fn check_header(loc: &Located<'_>, record: &csv::StringRecord, fixed: &[&str], prefix: &str) -> Result<usize> {
    for (k, name) in fixed.iter().enumerate() {
        if record.get(k) != Some(name) {
            return Err(loc.err(k + 1, format!("header must start with `{}`", fixed.join(","))));
        }
    }
    let width = record.len() - fixed.len();
    for j in 0..width {
        let expected = format!("{prefix}{j}");
        if record.get(fixed.len() + j) != Some(expected.as_str()) {
            return Err(loc.err(fixed.len() + j + 1, format!("expected header column `{expected}`")));
        }
    }
    Ok(width)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn finish(path: &Path, mut w: impl Write) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_rows(path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.write_record(&r).map_err(|e| Error::io(path, e.into()))?;
    }
    let inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    finish(path, inner)
}

pub fn logit_dump_header(classes: usize) -> Vec<String> {
    std::iter::once("label".to_string())
        .chain((0..classes).map(|j| format!("logit_{j}")))
        .collect()
}

pub fn write_logit_dump(path: &Path, dump: &LogitDump) -> Result<()> {
    let header = logit_dump_header(dump.logits.cols());
    let rows = dump.logits.iter_rows().enumerate().map(|(i, r)| {
        let label = dump.labels.as_ref().map_or(String::new(), |l| l[i].to_string());
        std::iter::once(label).chain(r.iter().map(|&x| fmt_f64(x))).collect()
    });
    write_rows(path, std::iter::once(header).chain(rows))
}

pub fn load_logit_dump(path: &Path) -> Result<LogitDump> {
    parse_logit_dump(path, open(path)?)
}

/// Reads a dump from any source; `path` is only used in error locations.
pub fn parse_logit_dump(path: &Path, source: impl Read) -> Result<LogitDump> {
    let mut classes = None;
    let mut data = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    read_records(path, source, |loc, rec| {
        let Some(c) = classes else {
            let c = check_header(loc, rec, &["label"], "logit_")?;
            if c < 2 {
                return Err(loc.err(2, "need at least two logit columns"));
            }
            classes = Some(c);
            return Ok(());
        };
        if rec.len() != c + 1 {
            return Err(loc.err(
                rec.len().min(c + 1) + 1,
                format!("row has {} fields, header has {}", rec.len(), c + 1),
            ));
        }
        let label = match rec[0].trim() {
            "" => None,
            s => {
                let y = loc.label(1, s)?;
                if y >= c {
                    return Err(loc.err(1, format!("label {y} out of range for {c} classes")));
                }
                Some(y)
            }
        };
        if let Some(first) = labels.first() {
            if first.is_some() != label.is_some() {
                return Err(loc.err(1, "labels must be given for every row or for none"));
            }
        }
        labels.push(label);
        for j in 0..c {
            data.push(loc.float(j + 2, &rec[j + 1])?);
        }
        Ok(())
    })?;
    let Some(c) = classes else {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: 1,
            column: 0,
            offset: 0,
            message: "empty file, expected a header".into(),
        });
    };
    let n = labels.len();
    let labels = labels.into_iter().collect::<Option<Vec<_>>>().filter(|l| !l.is_empty());
    Ok(LogitDump {
        logits: Matrix::from_vec(n, c, data)?,
        labels,
    })
}

pub fn write_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let header = ["split", "label"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..ds.dims()).map(|j| format!("f_{j}")))
        .collect();
    let rows = (0..ds.len()).map(|i| {
        [ds.splits()[i].name().to_string(), ds.labels()[i].to_string()]
            .into_iter()
            .chain(ds.features().row(i).iter().map(|&x| fmt_f64(x)))
            .collect()
    });
    write_rows(path, std::iter::once(header).chain(rows))
}

/// Loads a dataset; the class count is one more than the largest label.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let mut dims = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    read_records(path, open(path)?, |loc, rec| {
        let Some(d) = dims else {
            let d = check_header(loc, rec, &["split", "label"], "f_")?;
            if d == 0 {
                return Err(loc.err(3, "need at least one feature column"));
            }
            dims = Some(d);
            return Ok(());
        };
        if rec.len() != d + 2 {
            return Err(loc.err(
                rec.len().min(d + 2) + 1,
                format!("row has {} fields, header has {}", rec.len(), d + 2),
            ));
        }
        let split = Split::parse(rec[0].trim()).ok_or_else(|| loc.err(1, format!("unknown split `{}`", &rec[0])))?;
        splits.push(split);
        labels.push(loc.label(2, &rec[1])?);
        for j in 0..d {
            features.push(loc.float(j + 3, &rec[j + 2])?);
        }
        Ok(())
    })?;
    let d = dims.ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        line: 1,
        column: 0,
        offset: 0,
        message: "empty file, expected a header".into(),
    })?;
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let n = labels.len();
    Ok(LabeledDataset::new(
        Matrix::from_vec(n, d, features)?,
        labels,
        splits,
        classes,
    )?)
}

pub fn write_calibration(path: &Path, rows: &[CalibrationRow]) -> Result<()> {
    let header = ["rho", "mean_entropy", "std_entropy", "min_entropy", "max_entropy"];
    let body = rows.iter().map(|r| {
        [r.rho, r.mean_entropy, r.std_entropy, r.min_entropy, r.max_entropy]
            .iter()
            .map(|&x| fmt_f64(x))
            .collect()
    });
    write_rows(path, std::iter::once(header.map(String::from).to_vec()).chain(body))
}

pub fn write_histogram(path: &Path, h: &Histogram) -> Result<()> {
    let header = vec!["bin_lo".into(), "bin_hi".into(), "count".into()];
    let body = h
        .counts
        .iter()
        .enumerate()
        .map(|(k, c)| vec![fmt_f64(h.edges[k]), fmt_f64(h.edges[k + 1]), c.to_string()]);
    write_rows(path, std::iter::once(header).chain(body))
}

fn policy_columns(p: &TemperaturePolicy) -> [String; 2] {
    match *p {
        TemperaturePolicy::Fixed { tau } => ["fixed".into(), fmt_f64(tau)],
        TemperaturePolicy::Adaptive { rho } => ["adaptive".into(), fmt_f64(rho)],
    }
}

/// One-row summary of an entropy report.
pub fn write_entropy_stats(path: &Path, r: &EntropyReport) -> Result<()> {
    let mut header: Vec<String> = ["policy", "parameter", "n", "mean", "std", "min", "max"]
        .map(String::from)
        .to_vec();
    header.extend(
        r.quantiles
            .iter()
            .map(|(q, _)| format!("q{:02}", (q * 100.0).round() as u32)),
    );
    header.push("outliers".into());
    let mut row: Vec<String> = policy_columns(&r.policy).to_vec();
    row.push(r.per_sample_entropy.len().to_string());
    row.extend([r.mean, r.std, r.min, r.max].map(fmt_f64));
    row.extend(r.quantiles.iter().map(|&(_, v)| fmt_f64(v)));
    row.push(r.outliers.len().to_string());
    write_rows(path, [header, row])
}

pub fn write_entropies(path: &Path, r: &EntropyReport) -> Result<()> {
    let header = vec!["index".into(), "entropy".into(), "outlier".into()];
    let mut flags = vec![false; r.per_sample_entropy.len()];
    for &i in &r.outliers {
        flags[i] = true;
    }
    let body = r
        .per_sample_entropy
        .iter()
        .enumerate()
        .map(|(i, &h)| vec![i.to_string(), fmt_f64(h), u8::from(flags[i]).to_string()]);
    write_rows(path, std::iter::once(header).chain(body))
}

pub fn write_convergence(path: &Path, t: &ConvergenceTable) -> Result<()> {
    let header = ["tau", "max_relative_deviation", "mean_relative_deviation"]
        .map(String::from)
        .to_vec();
    let body = t.rows.iter().map(|r| {
        [r.tau, r.max_relative_deviation, r.mean_relative_deviation]
            .map(fmt_f64)
            .to_vec()
    });
    write_rows(path, std::iter::once(header).chain(body))
}

pub fn write_proposition(path: &Path, s: &PropositionSweep) -> Result<()> {
    let header = [
        "margin",
        "max_gap",
        "max_fixed_gap",
        "max_abs_term_a",
        "max_abs_residual",
    ]
    .map(String::from)
    .to_vec();
    let body = s.rows.iter().map(|r| {
        [
            r.margin,
            r.max_gap,
            r.max_fixed_gap,
            r.max_abs_term_a,
            r.max_abs_residual,
        ]
        .map(fmt_f64)
        .to_vec()
    });
    write_rows(path, std::iter::once(header).chain(body))
}

pub fn write_grad_checks(path: &Path, r: &GradCheckReport) -> Result<()> {
    let header = ["check", "instances", "worst_relative_error", "passed"]
        .map(String::from)
        .to_vec();
    let body = r.checks.iter().map(|c| {
        vec![
            c.name.clone(),
            c.instances.to_string(),
            fmt_f64(c.worst_relative_error),
            c.passed.to_string(),
        ]
    });
    write_rows(path, std::iter::once(header).chain(body))
}

pub fn write_invariants(path: &Path, checks: &[InvariantCheck]) -> Result<()> {
    let header = ["check", "cases", "worst", "tolerance", "passed"]
        .map(String::from)
        .to_vec();
    let body = checks.iter().map(|c| {
        vec![
            c.name.clone(),
            c.cases.to_string(),
            fmt_f64(c.worst),
            fmt_f64(c.tolerance),
            c.passed.to_string(),
        ]
    });
    write_rows(path, std::iter::once(header).chain(body))
}

/// `method,mean_accuracy,std_accuracy,seed_<s>...`.
pub fn write_comparison(path: &Path, seeds: &[u64], rows: &[AblationRow]) -> Result<()> {
    let mut header: Vec<String> = ["method", "mean_accuracy", "std_accuracy"].map(String::from).to_vec();
    header.extend(seeds.iter().map(|s| format!("seed_{s}")));
    let body = rows.iter().map(|r| {
        let mut row = vec![
            r.method.name().to_string(),
            fmt_f64(r.mean_accuracy),
            fmt_f64(r.std_accuracy),
        ];
        row.extend(r.per_seed.iter().map(|&a| fmt_f64(a)));
        row
    });
    write_rows(path, std::iter::once(header).chain(body))
}
