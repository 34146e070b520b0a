use proptest::prelude::*;

use seqkv::analyzer::workload::{generate_workload, read_workload, write_workload, WorkloadSpec};
use seqkv::config::RunConfig;
use seqkv::model::{common_prefix_len, Model, ModelConfig};
use seqkv::Error;

fn model() -> Model {
    Model::build(ModelConfig {
        max_context: 16,
        ..ModelConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn workload_hits_its_targets(
        sessions in 2usize..60,
        length in 2usize..=16,
        f in 0.0f64..=1.0,
        r in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let m = model();
        let spec = WorkloadSpec { sessions, length, cluster_fraction: f, tail_ratio: r, temperature: 1.0, seed };
        let w = generate_workload(&m, &spec).unwrap();
        prop_assert_eq!(w.sessions.len(), sessions);
        prop_assert!(w.sessions.values().all(|s| s.len() == length));
        if let Some(c) = w.centroid {
            let p_c = m.sequence_prob(&w.sessions[&c]).unwrap();
            let tail = spec.tail_len();
            for &id in w.group.iter().filter(|&&id| id != c) {
                let s = &w.sessions[&id];
                let shared = common_prefix_len(s, &w.sessions[&c]);
                if tail > 0 {
                    prop_assert!(m.sequence_prob(s).unwrap() < p_c);
                    prop_assert_eq!(shared, length - tail);
                } else {
                    prop_assert_eq!(shared, length);
                }
            }
            prop_assert!((w.achieved_tail_ratio - tail as f64 / length as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn workload_file_roundtrip(seed in any::<u64>(), hint in prop::option::of(0.0f64..100.0)) {
        let m = model();
        let w = generate_workload(&m, &WorkloadSpec { seed, ..WorkloadSpec::default() }).unwrap();
        let mut buf = Vec::new();
        write_workload(&mut buf, m.fingerprint(), hint, &w.sessions).unwrap();
        let back = read_workload(buf.as_slice()).unwrap();
        prop_assert_eq!(back.fingerprint, m.fingerprint());
        prop_assert_eq!(back.suggested_threshold, hint);
        prop_assert_eq!(back.sessions, w.sessions);
    }
}

#[test]
fn same_seed_same_workload() {
    let m = model();
    let spec = WorkloadSpec::default();
    assert_eq!(
        generate_workload(&m, &spec).unwrap(),
        generate_workload(&m, &spec).unwrap()
    );
    let other = WorkloadSpec {
        seed: 1,
        ..WorkloadSpec::default()
    };
    assert_ne!(
        generate_workload(&m, &spec).unwrap().sessions,
        generate_workload(&m, &other).unwrap().sessions
    );
}

#[test]
fn bad_workload_files_are_rejected() {
    assert!(read_workload("".as_bytes()).is_err());
    assert!(read_workload("0 1 2\n".as_bytes()).is_err());
    assert!(
        read_workload("# seqkv workload fingerprint=00000000000000ff\n0 x\n".as_bytes()).is_err()
    );
    let ok =
        read_workload("# seqkv workload fingerprint=00000000000000ff\n# note\n0 1\n2\n".as_bytes())
            .unwrap();
    assert_eq!(ok.fingerprint, 0xff);
    assert_eq!(ok.sessions.len(), 2);
    assert_eq!(ok.suggested_threshold, None);
}

#[test]
fn invalid_specs_are_rejected() {
    let m = model();
    for spec in [
        WorkloadSpec {
            sessions: 0,
            ..WorkloadSpec::default()
        },
        WorkloadSpec {
            length: 17,
            ..WorkloadSpec::default()
        },
        WorkloadSpec {
            cluster_fraction: 1.5,
            ..WorkloadSpec::default()
        },
        WorkloadSpec {
            temperature: 0.0,
            ..WorkloadSpec::default()
        },
    ] {
        assert!(matches!(
            generate_workload(&m, &spec),
            Err(Error::InvalidArgument(_))
        ));
    }
}

#[test]
fn config_file_and_overrides() {
    let mut cfg =
        RunConfig::parse("# demo\nbits = 4\nsessions=12\n\ndepth_mode=adaptive\n").unwrap();
    assert_eq!(cfg.bits, 4);
    assert_eq!(cfg.workload.sessions, 12);
    cfg.apply_overrides(["bits=6", "threshold=2.5"]).unwrap();
    assert_eq!(cfg.bits, 6);
    assert_eq!(cfg.cluster(Some(9.0)).threshold, 2.5);
    cfg.validate().unwrap();
    assert!(RunConfig::parse("bits=99\n").unwrap().validate().is_err());
    assert!(matches!(
        RunConfig::parse("layers=x\n"),
        Err(Error::ConfigParse { line: 1, .. })
    ));
}
