//! Checkpoint file round trips and failure modes.

use hdrcycle_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn meta() -> CheckpointMeta {
    CheckpointMeta { seed: 42, epoch: 3, step: 120, adam_g_step: 120, adam_d_step: 240 }
}

#[test]
fn round_trip_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tensors: Vec<(String, ArrayD<f32>)> = vec![
        ("gY/enc0/c1/w".into(), ArrayD::from_shape_fn(IxDyn(&[8, 3, 3, 3]), |_| rng.gen())),
        ("gY/enc0/c1/b".into(), ArrayD::from_shape_fn(IxDyn(&[8]), |_| rng.gen())),
        ("adam_g/m/gY/enc0/c1/w".into(), ArrayD::zeros(IxDyn(&[8, 3, 3, 3]))),
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.ckpt");
    save_checkpoint(&path, &meta(), &tensors).unwrap();
    let (m2, t2) = load_checkpoint(&path).unwrap();
    assert_eq!(m2, meta());
    assert_eq!(t2.len(), tensors.len());
    for ((n1, a1), (n2, a2)) in tensors.iter().zip(&t2) {
        assert_eq!(n1, n2);
        assert_eq!(a1.shape(), a2.shape());
        assert!(a1.iter().zip(a2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn empty_tensor_list_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.ckpt");
    save_checkpoint(&path, &meta(), &[]).unwrap();
    let (m, t) = load_checkpoint(&path).unwrap();
    assert_eq!(m, meta());
    assert!(t.is_empty());
}

#[test]
fn bad_magic_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxx").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn truncated_file_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trunc.ckpt");
    let tensors =
        vec![("w".to_string(), ArrayD::<f32>::from_elem(IxDyn(&[64]), 1.5))];
    save_checkpoint(&path, &meta(), &tensors).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn trailing_bytes_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trail.ckpt");
    save_checkpoint(&path, &meta(), &[]).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.extend_from_slice(&[0u8; 4]);
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn missing_file_errors() {
    assert!(load_checkpoint(std::path::Path::new("/nonexistent/x.ckpt")).is_err());
}
