use std::path::Path;

use cist::checkpoint;
use cist::formats::{load_dataset, load_logit_dump, parse_logit_dump, write_dataset, write_logit_dump, LogitDump};
use cist::Error;
use cist_core::data::{gen_gaussian_mixture, MixtureConfig};
use cist_core::model::Mlp;
use cist_core::{seed, Matrix};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logit_dumps_round_trip_bitwise(
        rows in 1usize..6,
        cols in 2usize..6,
        values in prop::collection::vec(finite(), 36),
        labelled in any::<bool>(),
    ) {
        let data: Vec<f64> = values.into_iter().take(rows * cols).collect();
        prop_assume!(data.len() == rows * cols);
        let dump = LogitDump {
            logits: Matrix::from_vec(rows, cols, data).unwrap(),
            labels: labelled.then(|| (0..rows).map(|i| i % cols).collect()),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_logit_dump(&path, &dump).unwrap();
        let back = load_logit_dump(&path).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.logits), bits(&dump.logits));
        prop_assert_eq!(back.labels, dump.labels);
    }
}

#[test]
fn dataset_round_trips() {
    let ds = gen_gaussian_mixture(&MixtureConfig {
        classes: 5,
        dims: 3,
        per_class: 20,
        spread: 1.0,
        overlap: 0.5,
        seed: 2,
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    write_dataset(&path, &ds).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn dataset_errors_are_located() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "split,label,f_0\ntrain,0,1.5\nholdout,1,2.0\n").unwrap();
    let e = load_dataset(&path).unwrap_err();
    assert!(matches!(e, Error::Format { line: 3, column: 1, .. }), "{e}");
    std::fs::write(&path, "split,label,f_0,f_1\ntrain,0,1.5,inf\n").unwrap();
    assert!(matches!(
        load_dataset(&path).unwrap_err(),
        Error::Format { line: 2, column: 4, .. }
    ));
}

#[test]
fn a_512_row_dump_is_a_calibration_subset() {
    let mut rng = seed::stream(0, "dump");
    let m = Mlp::new(&[3, 10], &mut rng).unwrap();
    let x = Matrix::from_vec(512, 3, (0..1536).map(|k| (k as f64 * 0.37).sin()).collect()).unwrap();
    let dump = LogitDump {
        logits: m.predict(&x).unwrap(),
        labels: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    write_logit_dump(&path, &dump).unwrap();
    let back = load_logit_dump(&path).unwrap();
    let rows = cist_core::temperature::calibrate_rho(&back.logits, &[2.0, 3.0]).unwrap();
    assert_eq!(rows.len(), 2);
}

#[test]
fn byte_offsets_point_at_the_bad_record() {
    let text = "label,logit_0,logit_1\n0,1,2\n1,2,x\n";
    let Err(Error::Format {
        offset, line, column, ..
    }) = parse_logit_dump(Path::new("d"), text.as_bytes())
    else {
        panic!("accepted a bad dump");
    };
    assert_eq!((line, column), (3, 3));
    assert_eq!(&text[offset as usize..offset as usize + 1], "1");
}

#[test]
fn checkpoints_round_trip_through_files() {
    let mut rng = seed::stream(1, "ckpt");
    let m = Mlp::new(&[4, 7, 3], &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let meta = checkpoint::CheckpointMeta {
        role: "student".into(),
        method: "cist".into(),
        dims: m.dims(),
        seed: 1,
        epoch: 0,
        config_hash: String::new(),
    };
    checkpoint::save(&path, &m, &meta).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.params_flat(), m.params_flat());
    assert!(checkpoint::meta_path(&path).exists());
}
