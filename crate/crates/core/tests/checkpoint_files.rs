//! Checkpoints written to disk and read back.

mod common;

use qmul::harness::experiment::{prepare, train_original};
use qmul::harness::{load_checkpoint, save_checkpoint};
use qmul::Error;

#[test]
fn trained_quantized_model_survives_a_disk_round_trip() {
    let cfg = common::tiny_config();
    let prep = prepare(&cfg).unwrap();
    let model = train_original(&cfg, &prep).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/original.qmck");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.fingerprint(), model.fingerprint());
    let (a, b) = (
        model.predict_proba(prep.test.features()).unwrap(),
        back.predict_proba(prep.test.features()).unwrap(),
    );
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn damaged_files_are_rejected() {
    let cfg = common::tiny_config();
    let prep = prepare(&cfg).unwrap();
    let model = train_original(&cfg, &prep).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.qmck");
    save_checkpoint(&model, &path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut bytes = good.clone();
    bytes.truncate(good.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());

    let mut bytes = good.clone();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());

    let mut bytes = good.clone();
    bytes[8] = 9;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::CheckpointVersion { found: 9, .. })
    ));

    let mut bytes = good;
    bytes.push(0);
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());

    assert!(load_checkpoint(&dir.path().join("missing.qmck")).is_err());
}
