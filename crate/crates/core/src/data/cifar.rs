use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable naming the directory that holds the CIFAR-10 `.bin` files.
pub const DATA_ENV: &str = "DUALNORM_CIFAR10";
pub const IMAGE_BYTES: usize = 3 * 32 * 32;
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn files(self) -> Vec<String> {
        match self {
            Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            Split::Test => vec!["test_batch.bin".into()],
        }
    }
}

/// Decodes concatenated records of one label byte followed by R, G and B planes.
pub fn parse_records(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format(format!("record {i}: label {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// Sorted, seed-determined sample of `subset` indices out of `total` (all indices if `subset >= total`).
pub fn subset_indices(total: usize, subset: usize, seed: u64) -> Vec<usize> {
    if subset >= total {
        return (0..total).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, total, subset).into_vec();
    idx.sort_unstable();
    idx
}

fn resolve_dir(root: &Path) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// Loads a split from `root` (or its `cifar-10-batches-bin` child). `subset` limits the sample count.
pub fn load_cifar10(root: &Path, split: Split, subset: Option<usize>, seed: u64) -> Result<Dataset> {
    let dir = resolve_dir(root);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in split.files() {
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let (p, l) = parse_records(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let data = Dataset::new(Tensor::from_vec(&[n, 3, 32, 32], pixels)?, labels, 10)?;
    Ok(match subset {
        Some(k) if k < n => data.subset(&subset_indices(n, k, seed)),
        _ => data,
    })
}
