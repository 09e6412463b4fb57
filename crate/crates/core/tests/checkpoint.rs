use latefuse::checkpoint::{Checkpoint, MAGIC};
use latefuse::numerics::Tensor;
use latefuse::Error;
use proptest::prelude::*;

fn sample() -> Checkpoint {
    let mut c = Checkpoint::new(r#"{"seed":1}"#);
    c.insert("lm/tok_emb", Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, f32::MIN_POSITIVE, -0.0, 1e30]).unwrap());
    c.insert("expert/tts/b", Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    c.insert("router/b", Tensor::scalar(0.125));
    c
}

/// Offset of the first value byte of `name` in the serialized form.
fn value_offset(bytes: &[u8], name: &str) -> usize {
    let at = bytes.windows(name.len()).position(|w| w == name.as_bytes()).unwrap();
    let rank_at = at + name.len();
    let rank = u32::from_le_bytes(bytes[rank_at..rank_at + 4].try_into().unwrap()) as usize;
    rank_at + 4 + 4 * rank
}

fn format_record(err: Error) -> String {
    match err {
        Error::Format { record, .. } => record,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn save_and_load_are_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.mslb");
    let c = sample();
    c.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, c);
    for (name, t) in &c.records {
        let bits: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let back_bits: Vec<u32> = back.records[name].data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, back_bits, "{name}");
    }
    assert_eq!(std::fs::read(&path).unwrap(), c.to_bytes());
}

#[test]
fn corrupted_value_names_the_record() {
    let mut bytes = sample().to_bytes();
    let at = value_offset(&bytes, "lm/tok_emb");
    bytes[at + 5] ^= 0x10;
    let err = Checkpoint::from_bytes(&bytes).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    assert_eq!(format_record(err), "lm/tok_emb");
}

#[test]
fn bad_magic_is_rejected() {
    let mut bytes = sample().to_bytes();
    assert_eq!(&bytes[..4], MAGIC);
    bytes[0] = b'X';
    assert_eq!(format_record(Checkpoint::from_bytes(&bytes).unwrap_err()), "header");
}

#[test]
fn unknown_version_is_rejected() {
    let mut bytes = sample().to_bytes();
    bytes[4] = 9;
    let err = Checkpoint::from_bytes(&bytes).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
}

#[test]
fn trailing_bytes_are_rejected() {
    let mut bytes = sample().to_bytes();
    bytes.push(0);
    assert_eq!(format_record(Checkpoint::from_bytes(&bytes).unwrap_err()), "trailer");
}

#[test]
fn missing_file_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = Checkpoint::load(&dir.path().join("absent.mslb")).unwrap_err();
    assert!(matches!(err, Error::Dependency(_)), "{err}");
}

#[test]
fn stores_round_trip_by_prefix() {
    let c = sample();
    let store = c.store("expert/tts");
    assert_eq!(store.get("b").unwrap(), c.get("expert/tts/b").unwrap());
    assert!(c.has_prefix("router"));
    assert!(!c.has_prefix("rout"));
    assert!(matches!(c.get("nope"), Err(Error::Dependency(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_truncation_is_an_error(cut in 0usize..10_000) {
        let bytes = sample().to_bytes();
        let cut = cut % bytes.len();
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }

    #[test]
    fn random_tensors_round_trip(values in prop::collection::vec(any::<u32>(), 1..40)) {
        let mut c = Checkpoint::new("{}");
        let data: Vec<f32> = values.iter().map(|&b| f32::from_bits(b)).collect();
        c.insert("t", Tensor::new(vec![data.len()], data).unwrap());
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        let got: Vec<u32> = back.get("t").unwrap().data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, values);
    }
}
