use std::path::Path;
use std::process::{Command, Output};

fn seqkv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqkv"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_compress_decompress() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = seqkv(d, &["gen", "--out", "w.txt", "--set", "sessions=30"]);
    assert!(gen.status.success());
    assert!(stdout(&gen).contains("# config sessions=30"));
    let comp = seqkv(
        d,
        &[
            "compress", "w.txt", "--out", "c.bin", "--set", "bits=6", "--format", "records",
        ],
    );
    assert!(
        comp.status.success(),
        "{}",
        String::from_utf8_lossy(&comp.stderr)
    );
    assert!(stdout(&comp).contains("quantity=additive value=true"));
    let dec = seqkv(
        d,
        &[
            "decompress",
            "c.bin",
            "--workload",
            "w.txt",
            "--out",
            "kv.txt",
        ],
    );
    assert!(dec.status.success());
    assert!(stdout(&dec).contains("bound_violations"));
    let dump = std::fs::read_to_string(d.join("kv.txt")).unwrap();
    // One line per position: id, position, token, then kv_stride values.
    assert_eq!(dump.lines().count(), 30 * 8);
    assert_eq!(dump.lines().next().unwrap().split(' ').count(), 3 + 32);
}

#[test]
fn config_file_is_read_and_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "sessions=5\nlength=4\n").unwrap();
    let out = seqkv(
        d,
        &[
            "gen", "--config", "run.cfg", "--out", "w.txt", "--seed", "9",
        ],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("# config sessions=5"));
    assert!(text.contains("# config workload_seed=9"));
    let w = std::fs::read_to_string(d.join("w.txt")).unwrap();
    assert_eq!(w.lines().filter(|l| !l.starts_with('#')).count(), 5);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(seqkv(d, &["gen"]).status.code(), Some(2));
    assert_eq!(
        seqkv(d, &["stats", "--set", "nope=1"]).status.code(),
        Some(2)
    );
    assert_eq!(seqkv(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        seqkv(d, &["decompress", "missing.bin"]).status.code(),
        Some(3)
    );
    std::fs::write(d.join("junk.bin"), b"junk").unwrap();
    assert_eq!(seqkv(d, &["decompress", "junk.bin"]).status.code(), Some(3));
    assert!(seqkv(d, &["gen", "--out", "w.txt"]).status.success());
    // A workload made for another model is refused.
    assert_eq!(
        seqkv(
            d,
            &["compress", "w.txt", "--out", "c.bin", "--set", "seed=1"]
        )
        .status
        .code(),
        Some(3)
    );
    assert!(seqkv(d, &["ratio", "--bits", "16"]).status.success());
    assert!(seqkv(d, &["stats", "w.txt"]).status.success());
}
