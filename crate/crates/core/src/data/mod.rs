//! Dataset ingestion, stratified splitting, stratified k-fold, and the
//! synthetic desk-scale generator.
//!
//! The on-disk layout mirrors the public breast-ultrasound corpus: one
//! subdirectory per class (`benign/`, `malignant/`, `normal/`). Items are
//! sorted by filename so loading is deterministic, and all splits are pure
//! functions of (dataset, seed).

mod pgm;
mod synth;

pub use pgm::{is_supported_image, read_image, read_pgm, write_pgm};
pub use synth::generate_synthetic;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::aug::Image;
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const CLASS_NAMES: [&str; 3] = ["benign", "malignant", "normal"];
pub const NUM_CLASSES: usize = 3;

/// One labeled image.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub image: Image,
    /// 0 = benign, 1 = malignant, 2 = normal.
    pub label: usize,
    pub id: String,
}

/// An in-memory labeled dataset with consistent per-class counts.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    items: Vec<DatasetItem>,
    class_counts: [usize; NUM_CLASSES],
}

impl LabeledDataset {
    pub fn from_items(items: Vec<DatasetItem>) -> Result<Self> {
        let mut class_counts = [0usize; NUM_CLASSES];
        let mut seen = HashSet::new();
        for item in &items {
            if item.label >= NUM_CLASSES {
                return Err(Error::Data(format!(
                    "label {} out of range for item {}",
                    item.label, item.id
                )));
            }
            if !seen.insert(item.id.clone()) {
                return Err(Error::Data(format!("duplicate item id {}", item.id)));
            }
            class_counts[item.label] += 1;
        }
        Ok(LabeledDataset { items, class_counts })
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        self.class_counts
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Indices of the items whose ids are listed, in listed order.
    pub fn indices_of(&self, ids: &[String]) -> Result<Vec<usize>> {
        let lookup: std::collections::HashMap<&str, usize> =
            self.items.iter().enumerate().map(|(i, it)| (it.id.as_str(), i)).collect();
        ids.iter()
            .map(|id| {
                lookup
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Data(format!("unknown item id {id}")))
            })
            .collect()
    }

    /// Per-class counts over a subset given by ids.
    pub fn counts_of(&self, ids: &[String]) -> Result<[usize; NUM_CLASSES]> {
        let mut counts = [0usize; NUM_CLASSES];
        for &i in &self.indices_of(ids)? {
            counts[self.items[i].label] += 1;
        }
        Ok(counts)
    }
}

/// Train/test partition plus the per-fold validation splits, all by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub folds: Vec<FoldSplit>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Load a class-per-directory dataset root. Every class directory must exist
/// and contain at least one readable image; items are sorted by filename.
pub fn load_dataset(root: &Path) -> Result<LabeledDataset> {
    let mut items = Vec::new();
    for (label, class) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(class);
        if !dir.is_dir() {
            return Err(Error::Data(format!(
                "missing class directory {}",
                dir.display()
            )));
        }
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::Data(format!("reading {}: {e}", dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_supported_image(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class directory {} holds no supported images",
                dir.display()
            )));
        }
        for path in files {
            let mut image = read_image(&path)?;
            let file_name = path.file_name().unwrap_or_default().to_string_lossy();
            let id = format!("{class}/{file_name}");
            image.id = id.clone();
            items.push(DatasetItem { image, label, id });
        }
    }
    LabeledDataset::from_items(items)
}

/// Write a dataset to disk in the class-per-directory layout as PGM files,
/// plus a manifest with one `id,relative_path,label` line per item.
pub fn write_dataset(ds: &LabeledDataset, root: &Path) -> Result<()> {
    for class in CLASS_NAMES {
        fs::create_dir_all(root.join(class))?;
    }
    let mut manifest = String::new();
    for item in ds.items() {
        let class = CLASS_NAMES[item.label];
        let file = format!("{}.pgm", item.id.replace('/', "_"));
        let rel = format!("{class}/{file}");
        write_pgm(&item.image, &root.join(&rel))?;
        manifest.push_str(&format!("{},{},{}\n", item.id, rel, item.label));
    }
    fs::write(root.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Round to nearest with ties going down: the per-class test-count rule.
fn round_ties_down(x: f64) -> usize {
    (x - 0.5).ceil().max(0.0) as usize
}

/// Stratified train/test split: per class, `round_ties_down(test_frac * N_c)`
/// items go to the test side after a seeded in-class shuffle.
pub fn stratified_split(
    ds: &LabeledDataset,
    test_frac: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(0.0..1.0).contains(&test_frac) {
        return Err(Error::Config(format!(
            "test fraction must be in [0, 1), got {test_frac}"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, _) in CLASS_NAMES.iter().enumerate() {
        let mut ids: Vec<String> = ds
            .items()
            .iter()
            .filter(|it| it.label == label)
            .map(|it| it.id.clone())
            .collect();
        if ids.len() < 2 {
            return Err(Error::Data(format!(
                "class {label} has {} items; need at least 2 to split",
                ids.len()
            )));
        }
        let mut rng = rng_for(seed, "split", &[label as u64]);
        ids.shuffle(&mut rng);
        let n_test = round_ties_down(test_frac * ids.len() as f64);
        for (i, id) in ids.into_iter().enumerate() {
            if i < n_test {
                test.push(id);
            } else {
                train.push(id);
            }
        }
    }
    Ok((train, test))
}

/// Stratified k-fold over the training ids: per class, a seeded shuffle then
/// round-robin assignment to k validation buckets; fold j validates on
/// bucket j and trains on the rest.
pub fn stratified_kfold(
    ds: &LabeledDataset,
    train_ids: &[String],
    k: usize,
    seed: u64,
) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::Data(format!(
            "k-fold needs k >= 2 (no validation possible with k = {k})"
        )));
    }
    let counts = ds.counts_of(train_ids)?;
    for (label, &c) in counts.iter().enumerate() {
        if c < k {
            return Err(Error::Data(format!(
                "class {label} has {c} training items, fewer than k = {k}"
            )));
        }
    }
    let mut buckets: Vec<Vec<String>> = vec![Vec::new(); k];
    let indices = ds.indices_of(train_ids)?;
    for (label, _) in CLASS_NAMES.iter().enumerate() {
        let mut ids: Vec<String> = indices
            .iter()
            .filter(|&&i| ds.items()[i].label == label)
            .map(|&i| ds.items()[i].id.clone())
            .collect();
        let mut rng = rng_for(seed, "kfold", &[label as u64]);
        ids.shuffle(&mut rng);
        for (i, id) in ids.into_iter().enumerate() {
            buckets[i % k].push(id);
        }
    }
    let folds = (0..k)
        .map(|j| {
            let val = buckets[j].clone();
            let train = buckets
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != j)
                .flat_map(|(_, b)| b.iter().cloned())
                .collect();
            FoldSplit { train, val }
        })
        .collect();
    Ok(folds)
}

/// Build the full split plan: held-out test part, then k folds over the rest.
pub fn make_split_plan(
    ds: &LabeledDataset,
    test_frac: f64,
    k: usize,
    seed: u64,
) -> Result<SplitPlan> {
    let (train, test) = stratified_split(ds, test_frac, seed)?;
    let folds = stratified_kfold(ds, &train, k, seed)?;
    Ok(SplitPlan { train, test, folds, seed })
}
