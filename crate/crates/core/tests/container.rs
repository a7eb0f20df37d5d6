use bshare_core::container::{
    Container, ContainerError, MatrixType, ModelManifest, Tensor, TensorData, ALIGNMENT, MAGIC,
};
use bshare_core::synthetic::{gen_synthetic, SyntheticConfig};
use bshare_core::tokens::TokenStream;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_container(seed: u64, count: usize) -> Container {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Container::new(ModelManifest::empty());
    for i in 0..count {
        let dims = rng.random_range(0..=3);
        let shape: Vec<usize> = (0..dims).map(|_| rng.random_range(0..6)).collect();
        let n: usize = shape.iter().product();
        let data = match rng.random_range(0..3) {
            0 => TensorData::F32((0..n).map(|_| rng.random::<f32>() - 0.5).collect()),
            1 => TensorData::F64((0..n).map(|_| rng.random::<f64>() * 1e3).collect()),
            _ => TensorData::I32((0..n).map(|_| rng.random()).collect()),
        };
        c.push(Tensor::new(format!("layers.{i}.t{}", rng.random::<u16>()), shape, data).unwrap());
    }
    c.metadata
        .insert("seed".into(), serde_json::json!({ "value": seed }));
    c
}

#[test]
fn hundred_random_tensors_reach_a_fixpoint() {
    let c = random_container(42, 100);
    let bytes = c.to_bytes().unwrap();
    let back = Container::from_bytes(&bytes).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    for r in back.records() {
        assert_eq!(r.byte_offset % ALIGNMENT as u64, 0, "{}", r.name);
    }
}

#[test]
fn file_layout() {
    let c = random_container(1, 3);
    let bytes = c.to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
    assert_eq!(header["tensors"].as_array().unwrap().len(), 3);
    assert_eq!((16 + header_len).next_multiple_of(ALIGNMENT) % ALIGNMENT, 0);
}

#[test]
fn synthetic_model_survives_disk_roundtrip() {
    let c = gen_synthetic(&SyntheticConfig {
        layers: 2,
        hidden: 16,
        vocab: 32,
        context: 8,
        ..SyntheticConfig::default()
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bsc");
    std::fs::write(&path, c.to_bytes().unwrap()).unwrap();
    let back = Container::read(&path).unwrap();
    assert_eq!(back, c);
    back.validate_sites().unwrap();
    assert!(back.manifest.has_type(MatrixType::Down));
    assert!(!back.manifest.has_type(MatrixType::Gate));
}

#[test]
fn duplicate_names_are_rejected_on_write() {
    let mut c = Container::new(ModelManifest::empty());
    c.push(Tensor::new("head.bias", vec![1], TensorData::F32(vec![0.0])).unwrap());
    c.push(Tensor::new("head.bias", vec![1], TensorData::F32(vec![1.0])).unwrap());
    assert_eq!(c.to_bytes().unwrap_err().code(), "duplicate-name");
}

#[test]
fn empty_token_stream_is_header_only() {
    let s = TokenStream::new(50, Vec::new()).unwrap();
    let bytes = s.to_bytes();
    assert_eq!(bytes.len(), 16);
    assert_eq!(TokenStream::from_bytes(&bytes).unwrap(), s);
    let mut bad = TokenStream::new(50, vec![1, 2]).unwrap().to_bytes();
    bad[16..20].copy_from_slice(&60u32.to_le_bytes());
    assert_eq!(TokenStream::from_bytes(&bad).unwrap_err().code(), "tokens");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prefixes_never_parse_as_complete(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let bytes = random_container(seed, 5).to_bytes().unwrap();
        let len = ((bytes.len() - 1) as f64 * cut) as usize;
        prop_assert!(Container::from_bytes(&bytes[..len]).is_err());
    }

    #[test]
    fn corrupted_bytes_error_or_parse_without_panicking(seed in any::<u64>(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = random_container(seed, 4).to_bytes().unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        match Container::from_bytes(&bytes) {
            Ok(c) => { let _ = c.to_bytes(); }
            Err(e) => prop_assert!(!e.code().is_empty()),
        }
    }

    #[test]
    fn token_streams_roundtrip(vocab in 1u32..70000, len in 0usize..300, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let s = TokenStream::new(vocab, tokens).unwrap();
        prop_assert_eq!(TokenStream::from_bytes(&s.to_bytes()).unwrap(), s);
    }
}

#[test]
fn error_codes_are_distinct() {
    let good = random_container(3, 2).to_bytes().unwrap();
    let mut magic = good.clone();
    magic[0] = b'X';
    let mut version = good.clone();
    version[4] = 9;
    let codes: Vec<&str> = [
        Container::from_bytes(&magic).unwrap_err(),
        Container::from_bytes(&version).unwrap_err(),
        Container::from_bytes(&good[..10]).unwrap_err(),
    ]
    .iter()
    .map(ContainerError::code)
    .collect();
    assert_eq!(codes, ["bad-magic", "unsupported-version", "truncated"]);
}
