//! Byte-level layout of embedding files, as written by the Python exporter.

use spice_core::data::{decode_binary, encode_binary};
use spice_core::{EmbeddingDataset, Matrix};

/// Two samples of width two, labels 1 and 0, built by hand.
fn golden() -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"SPCE");
    b.extend_from_slice(&[1, 0, 0, 0]); // version
    b.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0]); // N
    b.extend_from_slice(&[2, 0, 0, 0]); // D
    b.push(1); // has_labels
    for v in [1.0f32, -2.0, 0.5, 3.25] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&[1, 0, 0, 0, 0, 0, 0, 0]);
    b
}

#[test]
fn hand_built_file_decodes() {
    let ds = decode_binary(&golden(), "golden".into()).unwrap();
    assert_eq!(ds.features.shape(), (2, 2));
    assert_eq!(ds.features.row(0), &[1.0, -2.0]);
    assert_eq!(ds.features.row(1), &[0.5, 3.25]);
    assert_eq!(ds.true_labels, Some(vec![1, 0]));
}

#[test]
fn encoder_writes_the_same_bytes() {
    let features = Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.25]).unwrap();
    let ds = EmbeddingDataset::new(features, Some(vec![1, 0]), Some(2), "x").unwrap();
    assert_eq!(encode_binary(&ds), golden());
}

#[test]
fn unlabeled_file_ends_after_the_floats() {
    let features = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
    let ds = EmbeddingDataset::new(features, None, None, "x").unwrap();
    let bytes = encode_binary(&ds);
    assert_eq!(bytes.len(), 21 + 8);
    assert_eq!(bytes[20], 0);
    let back = decode_binary(&bytes, "x".into()).unwrap();
    assert!(back.true_labels.is_none());
}
