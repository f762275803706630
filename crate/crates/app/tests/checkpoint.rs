use promise_core::autodiff::{ParamStore, Tensor};
use promise_core::model::{MiniSam, ModelConfig};
use promise_core::pattern::{IpsVariant, PatternShift};
use promise_seg::checkpoint::{Checkpoint, MAGIC};
use promise_seg::AppError;
use proptest::prelude::*;

fn adapted() -> Checkpoint {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    MiniSam::init(&mut store, &cfg, 4).unwrap();
    store.freeze_all();
    PatternShift::attach(&mut store, &cfg, IpsVariant::IpsPae, 1).unwrap();
    Checkpoint::new(cfg, store)
}

/// Byte offset of the first f32 of tensor `name`.
fn data_offset(bytes: &[u8], name: &str) -> usize {
    let pos = bytes.windows(name.len()).position(|w| w == name.as_bytes()).unwrap();
    let rank_at = pos + name.len() + 1;
    let rank = u32::from_le_bytes(bytes[rank_at..rank_at + 4].try_into().unwrap()) as usize;
    rank_at + 4 + 4 * rank
}

#[test]
fn save_load_save_is_byte_identical() {
    let ck = adapted();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.config, ck.config);
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
    assert_eq!(loaded.frozen_hash(), ck.frozen_hash());
    for ((_, na, a), (_, nb, b)) in ck.store.iter().zip(loaded.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape(), b.shape());
        assert_eq!(a.data(), b.data());
        assert_eq!(a.is_frozen(), b.is_frozen());
    }
}

#[test]
fn header_layout() {
    let bytes = adapted().to_bytes();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let words = ModelConfig::tiny().to_words();
    for (i, w) in words.iter().enumerate() {
        let at = 8 + 4 * i;
        assert_eq!(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()), *w);
    }
    let h = 8 + 4 * words.len();
    assert_eq!(&bytes[h..h + 32], &adapted().frozen_hash());
}

#[test]
fn tampered_frozen_weight_is_detected() {
    let ck = adapted();
    let mut bytes = ck.to_bytes();
    let at = data_offset(&bytes, "decoder.mask_tokens");
    bytes[at] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(AppError::HashMismatch { .. })));
}

#[test]
fn trainable_weights_are_outside_the_hash() {
    let ck = adapted();
    let mut bytes = ck.to_bytes();
    let at = data_offset(&bytes, "pattern.pae.fc1.weight");
    bytes[at] ^= 0x40;
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(loaded.frozen_hash(), ck.frozen_hash());
}

#[test]
fn malformed_files_are_rejected() {
    let bytes = adapted().to_bytes();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    let mut trailing = bytes.clone();
    trailing.push(0);
    for b in [&bad_magic[..], &bad_version[..], &bytes[..bytes.len() - 3], &trailing[..], &bytes[..10]] {
        assert!(matches!(Checkpoint::from_bytes(b), Err(AppError::Checkpoint(_))));
    }
    let missing = std::path::Path::new("/nonexistent/model.ckpt");
    assert!(matches!(Checkpoint::load(missing), Err(AppError::Io { .. })));
}

proptest! {
    #[test]
    fn arbitrary_stores_roundtrip(
        tensors in prop::collection::vec(
            (prop::collection::vec(1usize..4, 0..3), any::<bool>(), -1e6f32..1e6),
            1..6,
        )
    ) {
        let mut store = ParamStore::new();
        for (i, (shape, frozen, v)) in tensors.iter().enumerate() {
            let n: usize = shape.iter().product();
            let mut t = Tensor::new(shape, (0..n).map(|k| v + k as f32).collect()).unwrap();
            t.set_frozen(*frozen);
            store.insert(&format!("t{i}.w"), t).unwrap();
        }
        let ck = Checkpoint::new(ModelConfig::tiny(), store);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.frozen_hash(), ck.frozen_hash());
    }
}
