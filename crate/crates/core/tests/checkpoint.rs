mod common;

use cgreid::checkpoint::{decode, encode, load, save};
use cgreid::head::Variant;
use cgreid::model::Model;
use cgreid::seed;
use cgreid::tensor::{Mode, Tensor};
use cgreid::Error;
use common::tiny_model_spec;

fn trained_model() -> Model {
    let mut m = Model::new(&tiny_model_spec(Variant::A, 4, false, 2), 3).unwrap();
    // move the running statistics away from their initial values
    m.forward(&Tensor::randn(&[4, 3, 8, 4], 1.0, &mut seed::rng(2)), Mode::Train).unwrap();
    m
}

#[test]
fn round_trip_restores_every_tensor_and_output() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut m = trained_model();
    save(&path, &m).unwrap();
    let mut back = load(&path).unwrap();
    assert_eq!(back.spec(), m.spec());
    assert_eq!(back.named_tensors(), m.named_tensors());
    let x = Tensor::randn(&[3, 3, 8, 4], 1.0, &mut seed::rng(4));
    assert_eq!(back.infer(&x).unwrap().standard(), m.infer(&x).unwrap().standard());
    assert_eq!(encode(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn truncated_or_corrupted_checkpoints_are_format_errors() {
    let bytes = encode(&trained_model()).unwrap();
    let p = std::path::Path::new("x.ckpt");
    for cut in [0, 4, 11, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode(&bytes[..cut], p), Err(Error::Format { .. })), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(decode(&bad, p), Err(Error::Format { .. })));
    let mut version = bytes.clone();
    version[8] = 99;
    assert!(matches!(decode(&version, p), Err(Error::Format { .. })));
    let mut extra = bytes;
    extra.push(0);
    assert!(matches!(decode(&extra, p), Err(Error::Format { .. })));
}
