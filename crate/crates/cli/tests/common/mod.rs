#![allow(dead_code)]

use std::path::{Path, PathBuf};

/// Runs the command line in-process and returns its exit code.
pub fn zsd(args: &[&str]) -> u8 {
    zsd_align::main_with(
        std::iter::once("zsd-align").chain(args.iter().copied()),
        None,
    )
}

pub fn zsd_seeded(args: &[&str], seed: &str) -> u8 {
    zsd_align::main_with(
        std::iter::once("zsd-align").chain(args.iter().copied()),
        Some(seed),
    )
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// A world and schedule small enough for sub-second commands.
pub const SMALL_CONFIG: &str = r#"{
  "world": { "grid_size": 6, "det_images": 12, "cls_images": 24, "test_images": 6 },
  "train": { "total_epochs": 3, "warmup_epochs": 1, "base_lr": 0.05 }
}"#;

pub fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, SMALL_CONFIG).unwrap();
    p
}

/// Writes the small config and generates its dataset; returns both paths.
pub fn small_dataset(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = small_config(dir);
    let data = dir.join("data");
    assert_eq!(
        zsd(&["gen-world", "--config", s(&cfg), "--out", s(&data)]),
        0
    );
    (cfg, data)
}

pub fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

pub fn read_jsonl(p: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Every file in `dir`, sorted by name, with its bytes.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}
