//! Labeled datasets and the synthetic Gaussian-mixture benchmark.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent f64 math when std is linked
use num_traits::Float;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::matrix::Matrix;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Features, hard labels and a split tag per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    splits: Vec<Split>,
    num_classes: usize,
}

impl LabeledDataset {
    /// Checks the dataset invariants: finite features, labels below
    /// `num_classes`, `N ≥ C`, and every class present in the train split.
    pub fn new(features: Matrix, labels: Vec<usize>, splits: Vec<Split>, num_classes: usize) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n || splits.len() != n {
            bail!(
                Shape,
                "{n} feature rows, {} labels, {} split tags",
                labels.len(),
                splits.len()
            );
        }
        if num_classes < 2 {
            bail!(InvalidParameter, "need at least 2 classes, got {num_classes}");
        }
        if n < num_classes {
            bail!(InvalidParameter, "{n} samples for {num_classes} classes");
        }
        if let Some(i) = features.as_slice().iter().position(|x| !x.is_finite()) {
            let d = features.cols().max(1);
            bail!(InvalidInput, "non-finite feature at row {}, column {}", i / d, i % d);
        }
        if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
            bail!(
                InvalidInput,
                "label {} at row {i} outside [0, {num_classes})",
                labels[i]
            );
        }
        let mut seen = vec![false; num_classes];
        for (&l, &s) in labels.iter().zip(&splits) {
            if s == Split::Train {
                seen[l] = true;
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            bail!(InvalidInput, "class {c} has no training samples");
        }
        Ok(Self {
            features,
            labels,
            splits,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Row indices belonging to `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Features and labels of one split.
    pub fn split(&self, split: Split) -> (Matrix, Vec<usize>) {
        let idx = self.indices(split);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (self.features.select_rows(&idx), labels)
    }
}

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub classes: usize,
    pub dims: usize,
    pub per_class: usize,
    /// Standard deviation of the isotropic noise around each class mean.
    pub spread: f64,
    /// In `[0, 1)`; 0 puts the means far apart, values near 1 pile them up.
    pub overlap: f64,
    pub seed: u64,
}

/// Class-mean radius, in units of `spread`, at zero overlap.
pub const SEPARATION_AT_ZERO_OVERLAP: f64 = 10.0;

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            bail!(InvalidParameter, "need at least 2 classes, got {}", self.classes);
        }
        if self.dims == 0 {
            bail!(InvalidParameter, "dims must be >= 1");
        }
        if self.per_class == 0 {
            bail!(InvalidParameter, "per_class must be >= 1");
        }
        if !(self.spread.is_finite() && self.spread > 0.0) {
            bail!(InvalidParameter, "spread must be > 0, got {}", self.spread);
        }
        if !(0.0..1.0).contains(&self.overlap) {
            bail!(InvalidParameter, "overlap must lie in [0, 1), got {}", self.overlap);
        }
        Ok(())
    }

    /// Distance of every class mean from the origin.
    pub fn radius(&self) -> f64 {
        self.spread * SEPARATION_AT_ZERO_OVERLAP * (1.0 - self.overlap)
    }
}

/// Equal-weight isotropic Gaussian mixture with means on a sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    config: MixtureConfig,
    means: Matrix,
}

impl GaussianMixture {
    pub fn new(config: MixtureConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(config.seed, "mixture-means");
        let radius = config.radius();
        let mut means = Matrix::zeros(config.classes, config.dims);
        for k in 0..config.classes {
            let row = means.row_mut(k);
            loop {
                for x in row.iter_mut() {
                    *x = StandardNormal.sample(&mut rng);
                }
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    for x in row.iter_mut() {
                        *x *= radius / norm;
                    }
                    break;
                }
            }
        }
        Ok(Self { config, means })
    }

    pub fn config(&self) -> &MixtureConfig {
        &self.config
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    /// Draws `per_class` points per class (class-major order) with a
    /// stratified 80/10/10 train/val/test split.
    pub fn sample(&self) -> Result<LabeledDataset> {
        let c = &self.config;
        let n = c.classes * c.per_class;
        let mut rng = seed::stream(c.seed, "mixture-samples");
        let mut split_rng = seed::stream(c.seed, "mixture-split");
        let mut features = Matrix::zeros(n, c.dims);
        let mut labels = Vec::with_capacity(n);
        let mut splits = Vec::with_capacity(n);
        let n_val = c.per_class / 10;
        let n_test = c.per_class / 10;
        for k in 0..c.classes {
            for j in 0..c.per_class {
                let row = features.row_mut(k * c.per_class + j);
                for (x, mu) in row.iter_mut().zip(self.means.row(k)) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x = mu + c.spread * z;
                }
                labels.push(k);
            }
            let mut tags: Vec<Split> = core::iter::repeat_n(Split::Val, n_val)
                .chain(core::iter::repeat_n(Split::Test, n_test))
                .chain(core::iter::repeat_n(Split::Train, c.per_class - n_val - n_test))
                .collect();
            tags.shuffle(&mut split_rng);
            splits.extend(tags);
        }
        LabeledDataset::new(features, labels, splits, c.classes)
    }

    /// Bayes-optimal class under equal priors and shared isotropic
    /// covariance: the nearest mean.
    pub fn bayes_predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        if x.cols() != self.config.dims {
            bail!(Shape, "points have {} dims, mixture has {}", x.cols(), self.config.dims);
        }
        Ok(x.iter_rows()
            .map(|p| {
                let mut best = (f64::INFINITY, 0);
                for (k, mu) in self.means.iter_rows().enumerate() {
                    let d: f64 = p.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                best.1
            })
            .collect())
    }
}

pub fn gen_gaussian_mixture(config: &MixtureConfig) -> Result<LabeledDataset> {
    GaussianMixture::new(config.clone())?.sample()
}

/// Fraction of predictions equal to the labels.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}
