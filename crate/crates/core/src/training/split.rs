use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::EmotionLabel;
use crate::manifest::{DatasetManifest, Split};

/// Classes smaller than this go entirely to train.
pub const MIN_CLASS_FOR_SPLIT: usize = 3;

/// Largest-remainder apportionment of `n` items by `ratios`; leftover items
/// go to the largest fractional parts, ties to the earlier split.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[*i] += 1;
        left -= 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub manifest: DatasetManifest,
    /// Classes too small to split, kept whole in train.
    pub small_classes: Vec<EmotionLabel>,
}

/// Stratified train/val/test assignment. Unlabeled records stay unassigned.
pub fn split_dataset(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<SplitOutcome> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut records = manifest.records().to_vec();
    if records.iter().all(|r| r.label.is_none()) {
        return Err(Error::NoLabels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut small_classes = Vec::new();
    for label in EmotionLabel::ALL {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == Some(label)).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < MIN_CLASS_FOR_SPLIT {
            log::warn!("class {label} has {} samples; assigning all to train", idx.len());
            small_classes.push(label);
            for i in idx {
                records[i].split = Split::Train;
            }
            continue;
        }
        idx.shuffle(&mut rng);
        let [n_train, n_val, _] = split_counts(idx.len(), ratios);
        for (k, i) in idx.into_iter().enumerate() {
            records[i].split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    for r in &mut records {
        if r.label.is_none() {
            r.split = Split::Unassigned;
        }
    }
    let manifest = DatasetManifest::new(manifest.name(), records)?.with_base_dir(manifest.base_dir());
    Ok(SplitOutcome {
        manifest,
        small_classes,
    })
}
