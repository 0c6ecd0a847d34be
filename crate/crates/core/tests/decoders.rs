//! Runs the fuzz corpus seeds and random mutations of them through every
//! decoder. The properties mirror the fuzz targets under `fuzz/`.

use std::path::{Path, PathBuf};

use deq_core::harness::{decode_checkpoint, encode_checkpoint, ExperimentConfig, SweepGrid};
use deq_core::tasks::{decode_dataset, decode_header, encode_dataset};
use proptest::prelude::*;

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds for {target}");
    files.into_iter().map(|p| { let b = std::fs::read(&p).unwrap(); (p, b) }).collect()
}

fn check_checkpoint(data: &[u8]) -> bool {
    match decode_checkpoint(data) {
        Ok(ck) => {
            let bytes = encode_checkpoint(&ck);
            let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
            assert_eq!(encode_checkpoint(&again), bytes);
            true
        }
        Err(_) => false,
    }
}

fn check_config(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    match ExperimentConfig::from_json(text) {
        Ok(cfg) => {
            assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
            true
        }
        Err(_) => false,
    }
}

fn check_dataset(data: &[u8]) -> bool {
    let _ = decode_header(data);
    match decode_dataset(data) {
        Ok((h, ds)) => {
            assert_eq!(h.count, ds.count());
            let (_, again) = decode_dataset(&encode_dataset(&ds, h.seed)).unwrap();
            assert_eq!(again, ds);
            true
        }
        Err(_) => false,
    }
}

fn check_grid(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    let Ok(grid) = SweepGrid::from_json(text) else { return false };
    match grid.expand() {
        Ok(runs) => {
            runs.iter().for_each(|r| r.config.validate().unwrap());
            true
        }
        Err(_) => false,
    }
}

#[test]
fn seeds_decode_as_labelled() {
    for (target, check) in [
        ("checkpoint", check_checkpoint as fn(&[u8]) -> bool),
        ("experiment_config", check_config),
        ("dataset", check_dataset),
        ("sweep_grid", check_grid),
    ] {
        for (path, bytes) in corpus(target) {
            let name = path.file_name().unwrap().to_string_lossy();
            // Seeds named after a defect must be rejected; the rest accepted.
            let bad = ["wrong_", "unknown_", "bad_"].iter().any(|p| name.starts_with(p));
            assert_eq!(check(&bytes), !bad, "{target}/{name}");
        }
    }
}

#[test]
fn truncated_seeds_are_rejected() {
    for (_, bytes) in corpus("checkpoint").into_iter().chain(corpus("dataset")) {
        for cut in [0, 1, 8, 16, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err());
            assert!(decode_dataset(&bytes[..cut]).is_err());
        }
    }
}

fn mutate(mut bytes: Vec<u8>, edits: &[(usize, u8)], cut: Option<usize>) -> Vec<u8> {
    if bytes.is_empty() {
        return bytes;
    }
    for (pos, val) in edits {
        let i = pos % bytes.len();
        bytes[i] ^= val;
    }
    if let Some(c) = cut {
        bytes.truncate(c % (bytes.len() + 1));
    }
    bytes
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mutated_binary_seeds_never_panic(
        which in 0usize..4,
        edits in proptest::collection::vec((any::<usize>(), 1u8..=255), 1..6),
        cut in proptest::option::of(any::<usize>()),
    ) {
        let seeds: Vec<_> = corpus("checkpoint").into_iter().chain(corpus("dataset")).collect();
        let bytes = mutate(seeds[which % seeds.len()].1.clone(), &edits, cut);
        check_checkpoint(&bytes);
        check_dataset(&bytes);
    }

    #[test]
    fn mutated_json_seeds_never_panic(
        which in 0usize..8,
        edits in proptest::collection::vec((any::<usize>(), 1u8..=127), 1..4),
    ) {
        let seeds: Vec<_> = corpus("experiment_config").into_iter().chain(corpus("sweep_grid")).collect();
        let bytes = mutate(seeds[which % seeds.len()].1.clone(), &edits, None);
        check_config(&bytes);
        check_grid(&bytes);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        check_checkpoint(&bytes);
        check_dataset(&bytes);
        check_config(&bytes);
        check_grid(&bytes);
    }
}
