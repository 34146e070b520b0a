use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use seqkv::codec::container::{read_all, write_all};
use seqkv::codec::quant::{decode, encode, max_abs_scale, pack, record_bits, unpack};
use seqkv::codec::{compress, decompress_sessions, CodecConfig, CompressedCache, DepthPolicy};
use seqkv::index::SessionId;
use seqkv::model::{Model, ModelConfig, Token, TokenSeq};
use seqkv::pipeline::{run_compression, verify_roundtrip, ClusterSettings};
use seqkv::Error;

fn model() -> Arc<Model> {
    Arc::new(Model::build(ModelConfig::default()).unwrap())
}

fn workload() -> impl Strategy<Value = BTreeMap<SessionId, TokenSeq>> {
    prop::collection::vec(prop::collection::vec(0..8 as Token, 1..=8), 1..12).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, s)| (i as SessionId, TokenSeq(s)))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quantizer_error_within_half_cell(values in prop::collection::vec(-50.0f64..50.0, 1..40), depth in 1u8..=16) {
        let scale = max_abs_scale(&values).unwrap();
        let (rec, clamped) = encode(&values, depth, scale).unwrap();
        prop_assert_eq!(clamped, 0);
        let back = decode(&rec, values.len()).unwrap();
        let bound = f64::from(scale) / 2f64.powi(i32::from(depth));
        for (a, b) in values.iter().zip(&back) {
            prop_assert!((a - b).abs() <= bound);
        }
        prop_assert_eq!(rec.bits(values.len()), 40 + 8 * (values.len() * depth as usize).div_ceil(8) as u64);
    }

    #[test]
    fn pack_roundtrip(depth in 1u8..=16, raw in prop::collection::vec(any::<u16>(), 0..50)) {
        let mask = if depth == 16 { u16::MAX } else { (1u16 << depth) - 1 };
        let codes: Vec<u16> = raw.iter().map(|c| c & mask).collect();
        let bytes = pack(&codes, depth);
        prop_assert_eq!(bytes.len() as u64 * 8, record_bits(codes.len(), depth) - 40);
        prop_assert_eq!(unpack(&bytes, codes.len(), depth).unwrap(), codes);
    }

    #[test]
    fn compressed_roundtrip_respects_bounds(sessions in workload(), bits in 1u8..=12, threshold in 0.0f64..6.0) {
        let m = model();
        let run = run_compression(
            &m,
            &sessions,
            &ClusterSettings { threshold, ..ClusterSettings::default() },
            &CodecConfig::uniform(bits),
        ).unwrap();
        let cache = CompressedCache::from_bytes(&run.bytes).unwrap();
        let report = verify_roundtrip(&cache, &m, Some(&sessions)).unwrap();
        prop_assert!(report.holds());
        prop_assert_eq!(report.token_mismatches, 0);
        prop_assert_eq!(report.sessions, sessions.len());
        prop_assert!(run.savings.is_additive());
        prop_assert_eq!(write_all(&read_all(&run.bytes).unwrap()).unwrap(), run.bytes);
    }

    #[test]
    fn truncated_files_are_rejected(sessions in workload(), cut in 0.0f64..1.0) {
        let m = model();
        let bytes = compress(&m, &sessions, &[], &CodecConfig::uniform(4)).unwrap().to_bytes().unwrap();
        let n = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(CompressedCache::from_bytes(&bytes[..n]).is_err());
    }
}

#[test]
fn adaptive_and_waterfill_roundtrip() {
    let m = model();
    let sessions: BTreeMap<SessionId, TokenSeq> = (0..6)
        .map(|i| {
            (
                i,
                TokenSeq(
                    (0..8)
                        .map(|j| ((i as usize * 3 + j * 5) % 8) as Token)
                        .collect(),
                ),
            )
        })
        .collect();
    for depth in [
        DepthPolicy::Adaptive {
            base: 3,
            mean_surprisal: None,
        },
        DepthPolicy::Adaptive {
            base: 3,
            mean_surprisal: Some(1.0),
        },
        DepthPolicy::Waterfill { distortion: 0.05 },
    ] {
        let cfg = CodecConfig {
            depth,
            ..CodecConfig::default()
        };
        let cache = compress(&m, &sessions, &[], &cfg).unwrap();
        let bytes = cache.to_bytes().unwrap();
        let back = CompressedCache::from_bytes(&bytes).unwrap();
        let decoded = decompress_sessions(&back, &m).unwrap();
        for (id, s) in &sessions {
            assert_eq!(&decoded[id].0, s, "{depth:?}");
        }
        assert!(verify_roundtrip(&back, &m, Some(&sessions))
            .unwrap()
            .holds());
    }
}

#[test]
fn other_models_cannot_decode() {
    let m = model();
    let sessions: BTreeMap<SessionId, TokenSeq> = [(0, TokenSeq(vec![1, 2, 3]))].into();
    let cache = compress(&m, &sessions, &[], &CodecConfig::uniform(8)).unwrap();
    let other = Model::build(ModelConfig {
        seed: 7,
        ..ModelConfig::default()
    })
    .unwrap();
    assert!(matches!(
        decompress_sessions(&cache, &other),
        Err(Error::FingerprintMismatch { .. })
    ));
}

#[test]
fn malformed_files_are_rejected() {
    let m = model();
    let sessions: BTreeMap<SessionId, TokenSeq> = [
        (0, TokenSeq(vec![1, 2, 3, 4])),
        (1, TokenSeq(vec![1, 2, 5])),
    ]
    .into();
    let bytes = compress(&m, &sessions, &[], &CodecConfig::uniform(8))
        .unwrap()
        .to_bytes()
        .unwrap();
    assert!(CompressedCache::from_bytes(&[]).is_err());
    assert!(CompressedCache::from_bytes(b"not a container").is_err());
    let mut bad = bytes;
    bad[0] ^= 0xff;
    assert!(CompressedCache::from_bytes(&bad).is_err());
}
