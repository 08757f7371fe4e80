use bcnn::network::format::{from_bytes, to_bytes};
use bcnn::network::{build_model, LevelSpec, NetworkConfig};
use bcnn::Error;
use proptest::prelude::*;

fn small_config(p: usize, classes: usize, replication: usize, blocks: usize) -> NetworkConfig {
    NetworkConfig {
        input_channels: 4,
        input_size: 8,
        stem: LevelSpec::new(1, 1, replication, 4 * replication),
        levels: vec![LevelSpec::new(blocks, 2, 2, 8 * replication)],
        classes,
        parallel_p: p,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bytes_round_trip(p in 1usize..=3, classes in 2usize..6, replication in 1usize..4, blocks in 1usize..3, seed in any::<u64>()) {
        let m = build_model(&small_config(p, classes, replication, blocks), seed).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.config, &m.config);
        prop_assert_eq!(&back.decoder, &m.decoder);
        prop_assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_is_a_typed_error(cut_frac in 0.0f64..1.0, seed in 0u64..4) {
        let m = build_model(&small_config(2, 3, 2, 1), seed).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let cut = ((bytes.len() as f64) * cut_frac) as usize;
        prop_assert!(from_bytes(&bytes[..cut]).is_err());
    }
}

#[test]
fn trailing_bytes_rejected() {
    let m = build_model(&small_config(1, 2, 1, 1), 0).unwrap();
    let mut bytes = to_bytes(&m).unwrap();
    bytes.push(0);
    assert!(from_bytes(&bytes).is_err());
}

#[test]
fn bad_magic_rejected() {
    let m = build_model(&small_config(1, 2, 1, 1), 0).unwrap();
    let mut bytes = to_bytes(&m).unwrap();
    bytes[0] ^= 0xff;
    assert!(matches!(from_bytes(&bytes), Err(Error::BadMagic { .. })));
}
