//! Shared test support: synthetic MNIST-shaped datasets written as IDX
//! files, and helpers for invoking the binary.
//!
//! Each test binary compiles this module separately and uses a subset.
#![allow(dead_code)]

use std::path::Path;
use std::process::Command;

use henfl::data::{write_idx_images, write_idx_labels, PixelMatrix};
use henfl::rng::{next_below, rng_from_seed};

/// Ten distinguishable glyph classes with pixel jitter; class c < 5 gets a
/// bright horizontal band pattern, c >= 5 a vertical one.
pub fn synthetic_images(count: usize, side: usize, seed: u64) -> (Vec<PixelMatrix>, Vec<u8>) {
    let mut rng = rng_from_seed(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = (i % 10) as u8;
        let mut pixels = vec![0u8; side * side];
        for (index, pixel) in pixels.iter_mut().enumerate() {
            let row = index / side;
            let col = index % side;
            let on = if (class as usize) < 5 {
                row % 5 == class as usize % 5
            } else {
                col % 5 == class as usize % 5
            };
            let base: u8 = if on { 220 } else { 20 };
            *pixel = base.saturating_add(next_below(&mut rng, 30) as u8);
        }
        images.push(PixelMatrix::new(side, side, pixels));
        labels.push(class);
    }
    (images, labels)
}

/// Write the four canonical MNIST IDX files into `dir`.
pub fn write_synthetic_mnist(dir: &Path, train: usize, test: usize, side: usize, seed: u64) {
    let (train_images, train_labels) = synthetic_images(train, side, seed);
    let (test_images, test_labels) = synthetic_images(test, side, seed + 1);
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(
        dir.join("train-images-idx3-ubyte"),
        write_idx_images(&train_images),
    )
    .unwrap();
    std::fs::write(
        dir.join("train-labels-idx1-ubyte"),
        write_idx_labels(&train_labels),
    )
    .unwrap();
    std::fs::write(
        dir.join("t10k-images-idx3-ubyte"),
        write_idx_images(&test_images),
    )
    .unwrap();
    std::fs::write(
        dir.join("t10k-labels-idx1-ubyte"),
        write_idx_labels(&test_labels),
    )
    .unwrap();
}

/// The compiled `henfl` binary.
pub fn henfl_command() -> Command {
    Command::new(env!("CARGO_BIN_EXE_henfl"))
}
