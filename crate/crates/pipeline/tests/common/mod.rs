#![allow(dead_code)]

use std::path::{Path, PathBuf};

use spine_core::ingest::PhantomSpec;
use spine_pipeline::commands::cmd_phantom;
use spine_pipeline::RunConfig;

pub fn tiny_phantoms(count: usize, seed: u64) -> PhantomSpec {
    PhantomSpec {
        count,
        image_size: 160,
        pixel_spacing: 1.3125,
        rng_seed: seed,
        ..PhantomSpec::default()
    }
}

/// Writes eight desk-sized phantoms under `root/train` and three under
/// `root/test`.
pub fn tiny_dataset(root: &Path) -> (PathBuf, PathBuf) {
    let (train, test) = (root.join("train"), root.join("test"));
    cmd_phantom(&tiny_phantoms(8, 7), &train).unwrap();
    cmd_phantom(&tiny_phantoms(3, 99), &test).unwrap();
    (train, test)
}

/// The desk profile cut down to four epochs of three two-exam batches.
pub fn tiny_config(train: &Path, out: &Path) -> RunConfig {
    RunConfig {
        train_dir: train.to_owned(),
        out_dir: out.to_owned(),
        epochs: 4,
        batch_size: 2,
        validation_fraction: 0.25,
        ..RunConfig::desk()
    }
}
