//! Datasets: synthetic 2-D benchmarks and IDX ingestion.

mod idx;

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxImages};

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    TwoMoons,
    Blobs,
    Circles,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_moons" | "moons" => Ok(Self::TwoMoons),
            "blobs" => Ok(Self::Blobs),
            "circles" => Ok(Self::Circles),
            other => Err(Error::Dataset(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Labeled plus unlabeled training rows.
    pub n_total: usize,
    pub n_labeled: usize,
    pub n_test: usize,
    pub noise: f64,
    /// Number of blobs; the other kinds have two classes.
    pub blob_classes: usize,
}

impl DatasetSpec {
    pub fn two_moons(n_total: usize, n_labeled: usize, n_test: usize, noise: f64) -> Self {
        Self {
            kind: DatasetKind::TwoMoons,
            n_total,
            n_labeled,
            n_test,
            noise,
            blob_classes: 3,
        }
    }

    pub fn classes(&self) -> usize {
        match self.kind {
            DatasetKind::Blobs => self.blob_classes,
            _ => 2,
        }
    }
}

/// Labeled, unlabeled and test rows, each stored row-major with width `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub dim: usize,
    pub classes: usize,
    pub labeled_x: Vec<f64>,
    pub labeled_y: Vec<usize>,
    pub unlabeled_x: Vec<f64>,
    pub test_x: Vec<f64>,
    pub test_y: Vec<usize>,
}

impl DatasetSplit {
    pub fn n_labeled(&self) -> usize {
        self.labeled_y.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled_x.len() / self.dim
    }

    pub fn n_test(&self) -> usize {
        self.test_y.len()
    }

    pub fn labeled_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(self.n_labeled(), self.dim, self.labeled_x.clone())
    }

    pub fn unlabeled_tensor(&self) -> Result<Option<Tensor>> {
        if self.n_unlabeled() == 0 {
            return Ok(None);
        }
        Tensor::matrix(self.n_unlabeled(), self.dim, self.unlabeled_x.clone()).map(Some)
    }

    pub fn test_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(self.n_test(), self.dim, self.test_x.clone())
    }

    /// Builds a split from a labeled pool by stratified selection of `n_labeled`
    /// rows; the remaining pool rows become unlabeled.
    #[allow(clippy::too_many_arguments)]
    pub fn from_pool(
        dim: usize,
        classes: usize,
        pool_x: &[f64],
        pool_y: &[usize],
        n_labeled: usize,
        test_x: Vec<f64>,
        test_y: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        let n = pool_y.len();
        if pool_x.len() != n * dim || test_x.len() != test_y.len() * dim {
            return Err(Error::Dataset("row data does not match labels".into()));
        }
        if n_labeled > n {
            return Err(Error::Dataset(format!("n_labeled {n_labeled} > pool size {n}")));
        }
        if n_labeled < classes {
            return Err(Error::Dataset(format!(
                "need at least one label per class ({classes}), got {n_labeled}"
            )));
        }
        if let Some(&y) = pool_y.iter().chain(&test_y).find(|&&y| y >= classes) {
            return Err(Error::Dataset(format!("label {y} >= {classes}")));
        }
        let mut rng = stream_rng(seed, Stream::Split, 0);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, &y) in pool_y.iter().enumerate() {
            by_class[y].push(i);
        }
        for (c, members) in by_class.iter_mut().enumerate() {
            if members.is_empty() {
                return Err(Error::Dataset(format!("class {c} has no rows to label")));
            }
            members.shuffle(&mut rng);
        }
        // round-robin over classes, skipping exhausted ones
        let mut chosen = Vec::with_capacity(n_labeled);
        let mut cursor = vec![0usize; classes];
        while chosen.len() < n_labeled {
            for c in 0..classes {
                if chosen.len() == n_labeled {
                    break;
                }
                if cursor[c] < by_class[c].len() {
                    chosen.push(by_class[c][cursor[c]]);
                    cursor[c] += 1;
                }
            }
        }
        chosen.sort_unstable();
        let mut is_labeled = vec![false; n];
        chosen.iter().for_each(|&i| is_labeled[i] = true);

        let row = |i: usize| &pool_x[i * dim..(i + 1) * dim];
        let mut split = Self {
            dim,
            classes,
            labeled_x: Vec::with_capacity(n_labeled * dim),
            labeled_y: Vec::with_capacity(n_labeled),
            unlabeled_x: Vec::with_capacity((n - n_labeled) * dim),
            test_x,
            test_y,
        };
        for i in 0..n {
            if is_labeled[i] {
                split.labeled_x.extend_from_slice(row(i));
                split.labeled_y.push(pool_y[i]);
            } else {
                split.unlabeled_x.extend_from_slice(row(i));
            }
        }
        Ok(split)
    }
}

fn sample_points(spec: &DatasetSpec, n: usize, seed: u64, index: u64) -> Result<(Vec<f64>, Vec<usize>)> {
    let classes = spec.classes();
    let mut rng = stream_rng(seed, Stream::Data, index);
    let noise = Normal::new(0.0, spec.noise.max(0.0))
        .map_err(|e| Error::Dataset(format!("bad noise: {e}")))?;
    let centers: Vec<(f64, f64)> = {
        let mut crng = stream_rng(seed, Stream::Data, 1 << 20);
        (0..classes)
            .map(|_| (crng.random_range(-5.0..5.0), crng.random_range(-5.0..5.0)))
            .collect()
    };
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    let mut order: Vec<usize> = (0..n).map(|i| i % classes).collect();
    order.shuffle(&mut rng);
    for label in order {
        let (a, b) = match spec.kind {
            DatasetKind::TwoMoons => {
                let t = rng.random_range(0.0..PI);
                if label == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                }
            }
            DatasetKind::Circles => {
                let t = rng.random_range(0.0..2.0 * PI);
                let r = if label == 0 { 1.0 } else { 0.5 };
                (r * t.cos(), r * t.sin())
            }
            DatasetKind::Blobs => centers[label],
        };
        x.push(a + noise.sample(&mut rng));
        x.push(b + noise.sample(&mut rng));
        y.push(label);
    }
    Ok((x, y))
}

/// Synthetic split: `n_total` training rows of which a class-stratified
/// `n_labeled` keep their labels, plus `n_test` independent test rows.
pub fn make_dataset(spec: &DatasetSpec, seed: u64) -> Result<DatasetSplit> {
    if spec.n_labeled > spec.n_total {
        return Err(Error::Dataset("n_labeled exceeds n_total".into()));
    }
    if spec.kind == DatasetKind::Blobs && spec.blob_classes < 2 {
        return Err(Error::Dataset("blobs need at least 2 classes".into()));
    }
    if spec.n_test == 0 {
        return Err(Error::Dataset("n_test must be positive".into()));
    }
    let (px, py) = sample_points(spec, spec.n_total, seed, 0)?;
    let (tx, ty) = sample_points(spec, spec.n_test, seed, 1)?;
    DatasetSplit::from_pool(2, spec.classes(), &px, &py, spec.n_labeled, tx, ty, seed)
}
