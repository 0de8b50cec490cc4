//! Synthetic datasets for both annotation types and synthetic label-noise injection.
//!
//! Every dataset keeps a pristine copy of its labels next to the labels a
//! learner sees. [`Batch`] only ever carries the latter; the clean copy and
//! the per-sample noise flags are meant for evaluation code.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskSpec;
use crate::tensor::Tensor;

/// Inputs and (possibly noisy) targets for a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Targets,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Multi-hot `[B, C]`.
    MultiLabel(Tensor),
    /// `B * H * W` class indices, sample-major then pixel-major.
    Pixel { classes: Vec<usize>, n_classes: usize },
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The rows of this batch at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            let cols = t.shape()[1];
            let mut v = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                if i >= t.shape()[0] {
                    return Err(Error::invalid(format!("batch index {i} out of range")));
                }
                v.extend_from_slice(t.row(i));
            }
            Tensor::matrix(indices.len(), cols, v)
        };
        let targets = match &self.targets {
            Targets::MultiLabel(t) => Targets::MultiLabel(pick(t)?),
            Targets::Pixel { classes, n_classes } => {
                let per = classes.len() / self.len();
                let c = indices
                    .iter()
                    .flat_map(|&i| classes[i * per..(i + 1) * per].iter().copied())
                    .collect();
                Targets::Pixel {
                    classes: c,
                    n_classes: *n_classes,
                }
            }
        };
        Ok(Batch {
            inputs: pick(&self.inputs)?,
            targets,
        })
    }
}

/// Label-noise injection request: a fraction of label assignments to corrupt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub slnir: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub const MAX_SLNIR: f64 = 0.6;

    pub fn new(slnir: f64, seed: u64) -> Result<Self> {
        if !(0.0..=Self::MAX_SLNIR + 1e-12).contains(&slnir) {
            return Err(Error::invalid(format!(
                "slnir must lie in [0, {}], got {slnir}",
                Self::MAX_SLNIR
            )));
        }
        Ok(Self { slnir, seed })
    }

    /// `floor(slnir * total)`, tolerant of binary rounding in `slnir`.
    pub fn flips_for(&self, total: usize) -> usize {
        (self.slnir * total as f64 + 1e-9).floor() as usize
    }
}

/// One label change: `from` was removed from `sample` and `to` added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flip {
    pub sample: usize,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseReport {
    pub total_assignments: usize,
    pub flips: Vec<Flip>,
    /// Selected assignments that had no admissible replacement and were resampled.
    pub skipped: usize,
}

/// Generator settings for the scene-level multi-label dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiLabelParams {
    pub n_samples: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    /// Upper bound on positive labels per sample.
    pub max_labels: usize,
    /// Probability of adding one more label while below `max_labels`.
    pub extra_label_prob: f64,
    /// Standard deviation of the isotropic feature noise.
    pub feature_noise: f64,
    pub seed: u64,
}

impl MultiLabelParams {
    pub fn new(n_samples: usize, n_classes: usize, feature_dim: usize, seed: u64) -> Self {
        Self {
            n_samples,
            n_classes,
            feature_dim,
            max_labels: 3,
            extra_label_prob: 0.5,
            feature_noise: 0.5,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLabelDataset {
    n_classes: usize,
    feature_dim: usize,
    seed: u64,
    features: Vec<f64>,
    labels: Vec<Vec<usize>>,
    clean_labels: Vec<Vec<usize>>,
    noise_flags: Vec<bool>,
}

fn check_sizes(n_samples: usize, n_classes: usize, dims: &[(&str, usize)]) -> Result<()> {
    if n_classes < 2 {
        return Err(Error::invalid("at least two classes are required"));
    }
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be positive"));
    }
    for (name, v) in dims {
        if *v == 0 {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
    }
    Ok(())
}

/// Scene-level dataset with the default generator settings.
pub fn generate_multilabel(
    n_samples: usize,
    n_classes: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<MultiLabelDataset> {
    generate_multilabel_with(&MultiLabelParams::new(n_samples, n_classes, feature_dim, seed))
}

/// Each class owns a Gaussian prototype; a sample's features are the mean of
/// its positive classes' prototypes plus isotropic noise. Extra labels favour
/// a fixed partner class so that co-occurrence is structured.
pub fn generate_multilabel_with(p: &MultiLabelParams) -> Result<MultiLabelDataset> {
    check_sizes(
        p.n_samples,
        p.n_classes,
        &[("feature_dim", p.feature_dim), ("max_labels", p.max_labels)],
    )?;
    if !(0.0..=1.0).contains(&p.extra_label_prob) || p.feature_noise < 0.0 {
        return Err(Error::invalid("extra_label_prob must be in [0, 1] and feature_noise >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (c, d) = (p.n_classes, p.feature_dim);
    let prototypes: Vec<f64> = (0..c * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut partner: Vec<usize> = (0..c).collect();
    partner.shuffle(&mut rng);
    let noise = Normal::new(0.0, p.feature_noise).map_err(|e| Error::invalid(e.to_string()))?;
    let max_labels = p.max_labels.min(c);

    let mut features = Vec::with_capacity(p.n_samples * d);
    let mut labels = Vec::with_capacity(p.n_samples);
    for _ in 0..p.n_samples {
        let mut set = vec![rng.random_range(0..c)];
        while set.len() < max_labels && rng.random_bool(p.extra_label_prob) {
            let anchor = set[set.len() - 1];
            let mut next = if rng.random_bool(0.7) {
                partner[anchor]
            } else {
                rng.random_range(0..c)
            };
            while set.contains(&next) {
                next = (next + 1) % c;
            }
            set.push(next);
        }
        set.sort_unstable();
        let k = set.len() as f64;
        for j in 0..d {
            let mean: f64 = set.iter().map(|&cl| prototypes[cl * d + j]).sum::<f64>() / k;
            features.push(mean + noise.sample(&mut rng));
        }
        labels.push(set);
    }
    Ok(MultiLabelDataset {
        n_classes: c,
        feature_dim: d,
        seed: p.seed,
        features,
        clean_labels: labels.clone(),
        noise_flags: vec![false; labels.len()],
        labels,
    })
}

impl MultiLabelDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Positive labels visible to training, sorted.
    pub fn labels(&self, i: usize) -> &[usize] {
        &self.labels[i]
    }

    /// Evaluation only: labels before noise injection.
    pub fn clean_labels(&self, i: usize) -> &[usize] {
        &self.clean_labels[i]
    }

    /// Evaluation only: `true` where the visible labels differ from the clean ones.
    pub fn noise_flags(&self) -> &[bool] {
        &self.noise_flags
    }

    pub fn total_assignments(&self) -> usize {
        self.labels.iter().map(Vec::len).sum()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let (d, c) = (self.feature_dim, self.n_classes);
        let mut x = Vec::with_capacity(indices.len() * d);
        let mut y = vec![0.0; indices.len() * c];
        for (r, &i) in indices.iter().enumerate() {
            x.extend_from_slice(self.features(i));
            for &l in &self.labels[i] {
                y[r * c + l] = 1.0;
            }
        }
        Ok(Batch {
            inputs: Tensor::matrix(indices.len(), d, x)?,
            targets: Targets::MultiLabel(Tensor::matrix(indices.len(), c, y)?),
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            n_classes: self.n_classes,
            feature_dim: self.feature_dim,
            seed: self.seed,
            features: indices.iter().flat_map(|&i| self.features(i).to_vec()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            clean_labels: indices.iter().map(|&i| self.clean_labels[i].clone()).collect(),
            noise_flags: indices.iter().map(|&i| self.noise_flags[i]).collect(),
        }
    }
}

fn resample_order(total: usize, seed: u64) -> (ChaCha8Rng, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    (rng, order)
}

/// Replaces `floor(slnir * total)` label assignments, chosen uniformly from
/// all (sample, positive label) pairs, by a label absent from the sample.
///
/// Each flip leaves one missing and one wrong label. Replacements are drawn
/// from classes in neither the clean nor the current label set, so no flip
/// can undo another. Assignments without an admissible replacement are
/// skipped and the next one in the random order is used instead.
pub fn inject_scene_noise(
    dataset: &MultiLabelDataset,
    spec: &NoiseSpec,
) -> Result<(MultiLabelDataset, NoiseReport)> {
    let assignments: Vec<(usize, usize)> = dataset
        .labels
        .iter()
        .enumerate()
        .flat_map(|(i, ls)| ls.iter().map(move |&l| (i, l)))
        .collect();
    let target = spec.flips_for(assignments.len());
    let (mut rng, order) = resample_order(assignments.len(), spec.seed);
    let mut out = dataset.clone();
    let mut report = NoiseReport {
        total_assignments: assignments.len(),
        ..Default::default()
    };
    for &a in &order {
        if report.flips.len() == target {
            break;
        }
        let (i, from) = assignments[a];
        let absent: Vec<usize> = (0..dataset.n_classes)
            .filter(|c| !dataset.clean_labels[i].contains(c) && !out.labels[i].contains(c))
            .collect();
        if absent.is_empty() {
            report.skipped += 1;
            continue;
        }
        let to = absent[rng.random_range(0..absent.len())];
        let set = &mut out.labels[i];
        set.retain(|&l| l != from);
        set.push(to);
        set.sort_unstable();
        report.flips.push(Flip { sample: i, from, to });
    }
    if report.flips.len() < target {
        return Err(Error::invalid(format!(
            "only {} of {target} label flips were admissible",
            report.flips.len()
        )));
    }
    for i in 0..out.len() {
        out.noise_flags[i] = out.labels[i] != out.clean_labels[i];
    }
    Ok((out, report))
}

/// Generator settings for the pixel-level dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelParams {
    pub n_samples: usize,
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Feature channels per pixel.
    pub channels: usize,
    /// Upper bound on foreground rectangles per image.
    pub max_regions: usize,
    pub feature_noise: f64,
    pub seed: u64,
}

impl PixelParams {
    pub fn new(n_samples: usize, n_classes: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            n_samples,
            n_classes,
            height,
            width,
            channels: 3,
            max_regions: 3,
            feature_noise: 0.5,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelLabelDataset {
    n_classes: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
    features: Vec<f64>,
    labels: Vec<Vec<usize>>,
    clean_labels: Vec<Vec<usize>>,
    noise_flags: Vec<bool>,
}

pub fn generate_pixel(
    n_samples: usize,
    n_classes: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<PixelLabelDataset> {
    generate_pixel_with(&PixelParams::new(n_samples, n_classes, height, width, seed))
}

/// Class 0 is background; each image receives one to `max_regions` random
/// rectangles of foreground classes. Pixel features are a per-class
/// signature plus isotropic noise.
pub fn generate_pixel_with(p: &PixelParams) -> Result<PixelLabelDataset> {
    check_sizes(
        p.n_samples,
        p.n_classes,
        &[
            ("height", p.height),
            ("width", p.width),
            ("channels", p.channels),
            ("max_regions", p.max_regions),
        ],
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (c, ch) = (p.n_classes, p.channels);
    let signatures: Vec<f64> = (0..c * ch).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = Normal::new(0.0, p.feature_noise).map_err(|e| Error::invalid(e.to_string()))?;
    let pixels = p.height * p.width;

    let mut features = Vec::with_capacity(p.n_samples * pixels * ch);
    let mut labels = Vec::with_capacity(p.n_samples);
    for _ in 0..p.n_samples {
        let mut grid = vec![0usize; pixels];
        for _ in 0..rng.random_range(1..=p.max_regions) {
            let class = rng.random_range(1..c);
            let h = rng.random_range(1..=p.height.div_ceil(2).max(1));
            let w = rng.random_range(1..=p.width.div_ceil(2).max(1));
            let top = rng.random_range(0..=p.height - h);
            let left = rng.random_range(0..=p.width - w);
            for r in top..top + h {
                for col in left..left + w {
                    grid[r * p.width + col] = class;
                }
            }
        }
        for &class in &grid {
            for k in 0..ch {
                features.push(signatures[class * ch + k] + noise.sample(&mut rng));
            }
        }
        labels.push(grid);
    }
    Ok(PixelLabelDataset {
        n_classes: c,
        height: p.height,
        width: p.width,
        channels: ch,
        seed: p.seed,
        features,
        clean_labels: labels.clone(),
        noise_flags: vec![false; labels.len()],
        labels,
    })
}

fn unique_classes(grid: &[usize]) -> Vec<usize> {
    let mut u = grid.to_vec();
    u.sort_unstable();
    u.dedup();
    u
}

impl PixelLabelDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn features(&self, i: usize) -> &[f64] {
        let d = self.input_dim();
        &self.features[i * d..(i + 1) * d]
    }

    /// Pixel class grid visible to training, row-major.
    pub fn labels(&self, i: usize) -> &[usize] {
        &self.labels[i]
    }

    /// Evaluation only.
    pub fn clean_labels(&self, i: usize) -> &[usize] {
        &self.clean_labels[i]
    }

    /// Evaluation only.
    pub fn noise_flags(&self) -> &[bool] {
        &self.noise_flags
    }

    pub fn unique_classes(&self, i: usize) -> Vec<usize> {
        unique_classes(&self.labels[i])
    }

    pub fn clean_unique_classes(&self, i: usize) -> Vec<usize> {
        unique_classes(&self.clean_labels[i])
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let d = self.input_dim();
        let mut x = Vec::with_capacity(indices.len() * d);
        let mut y = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            x.extend_from_slice(self.features(i));
            y.extend_from_slice(&self.labels[i]);
        }
        Ok(Batch {
            inputs: Tensor::matrix(indices.len(), d, x)?,
            targets: Targets::Pixel {
                classes: y,
                n_classes: self.n_classes,
            },
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: indices.iter().flat_map(|&i| self.features(i).to_vec()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            clean_labels: indices.iter().map(|&i| self.clean_labels[i].clone()).collect(),
            noise_flags: indices.iter().map(|&i| self.noise_flags[i]).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self {
            n_classes: self.n_classes,
            height: self.height,
            width: self.width,
            channels: self.channels,
            seed: self.seed,
            features: vec![],
            labels: vec![],
            clean_labels: vec![],
            noise_flags: vec![],
        }
    }
}

/// Selects `floor(slnir * total)` (image, class) pairs from the per-image
/// unique class sets and relabels every pixel of the selected class to a
/// class present in neither the clean nor the current image.
pub fn inject_pixel_noise(
    dataset: &PixelLabelDataset,
    spec: &NoiseSpec,
) -> Result<(PixelLabelDataset, NoiseReport)> {
    let clean_sets: Vec<Vec<usize>> = (0..dataset.len()).map(|i| dataset.clean_unique_classes(i)).collect();
    let pairs: Vec<(usize, usize)> = clean_sets
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.iter().map(move |&c| (i, c)))
        .collect();
    let target = spec.flips_for(pairs.len());
    let (mut rng, order) = resample_order(pairs.len(), spec.seed);
    let mut out = dataset.clone();
    let mut report = NoiseReport {
        total_assignments: pairs.len(),
        ..Default::default()
    };
    for &a in &order {
        if report.flips.len() == target {
            break;
        }
        let (i, from) = pairs[a];
        let current = out.unique_classes(i);
        let absent: Vec<usize> = (0..dataset.n_classes)
            .filter(|c| !clean_sets[i].contains(c) && !current.contains(c))
            .collect();
        if absent.is_empty() {
            report.skipped += 1;
            continue;
        }
        let to = absent[rng.random_range(0..absent.len())];
        for px in out.labels[i].iter_mut().filter(|px| **px == from) {
            *px = to;
        }
        report.flips.push(Flip { sample: i, from, to });
    }
    if report.flips.len() < target {
        return Err(Error::invalid(format!(
            "only {} of {target} class flips were admissible",
            report.flips.len()
        )));
    }
    for i in 0..out.len() {
        out.noise_flags[i] = out.labels[i] != out.clean_labels[i];
    }
    Ok((out, report))
}

/// Either annotation scenario behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    MultiLabel(MultiLabelDataset),
    Pixel(PixelLabelDataset),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::MultiLabel(d) => d.len(),
            Dataset::Pixel(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Dataset::MultiLabel(d) => d.feature_dim(),
            Dataset::Pixel(d) => d.input_dim(),
        }
    }

    pub fn task(&self) -> TaskSpec {
        match self {
            Dataset::MultiLabel(d) => TaskSpec::MultiLabel {
                classes: d.n_classes(),
            },
            Dataset::Pixel(d) => TaskSpec::Pixel {
                height: d.height(),
                width: d.width(),
                classes: d.n_classes(),
            },
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        match self {
            Dataset::MultiLabel(d) => d.batch(indices),
            Dataset::Pixel(d) => d.batch(indices),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        match self {
            Dataset::MultiLabel(d) => Dataset::MultiLabel(d.subset(indices)),
            Dataset::Pixel(d) => Dataset::Pixel(d.subset(indices)),
        }
    }

    pub fn inject_noise(&self, spec: &NoiseSpec) -> Result<(Self, NoiseReport)> {
        Ok(match self {
            Dataset::MultiLabel(d) => {
                let (d, r) = inject_scene_noise(d, spec)?;
                (Dataset::MultiLabel(d), r)
            }
            Dataset::Pixel(d) => {
                let (d, r) = inject_pixel_noise(d, spec)?;
                (Dataset::Pixel(d), r)
            }
        })
    }

    /// Evaluation only.
    pub fn noise_flags(&self) -> &[bool] {
        match self {
            Dataset::MultiLabel(d) => d.noise_flags(),
            Dataset::Pixel(d) => d.noise_flags(),
        }
    }

    /// Evaluation only: clean label set per sample (positive labels, or the
    /// unique pixel classes), used to grade retrieval relevance.
    pub fn clean_label_sets(&self) -> Vec<Vec<usize>> {
        match self {
            Dataset::MultiLabel(d) => (0..d.len()).map(|i| d.clean_labels(i).to_vec()).collect(),
            Dataset::Pixel(d) => (0..d.len()).map(|i| d.clean_unique_classes(i)).collect(),
        }
    }

    /// All inputs as one `[N, input_dim]` tensor.
    pub fn all_inputs(&self) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.len()).collect();
        Ok(self.batch(&idx)?.inputs)
    }
}

/// Fractions of samples placed in the training and validation splits; the
/// remainder forms the test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Random disjoint train/validation/test split.
pub fn split(dataset: &Dataset, ratios: SplitRatios, seed: u64) -> Result<Splits> {
    let n = dataset.len();
    let n_train = (ratios.train * n as f64).round() as usize;
    let n_val = (ratios.validation * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::invalid(format!(
            "split {ratios:?} of {n} samples leaves an empty partition"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Splits {
        train: dataset.subset(&idx[..n_train]),
        validation: dataset.subset(&idx[n_train..n_train + n_val]),
        test: dataset.subset(&idx[n_train + n_val..]),
    })
}

// ---------------------------------------------------------------------------
// Dump / load

pub const DATASET_FORMAT: &str = "grid-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case")]
enum FileShape {
    SceneMultilabel {
        n_classes: usize,
        feature_dim: usize,
    },
    Pixel {
        n_classes: usize,
        height: usize,
        width: usize,
        channels: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    seed: u64,
    n_samples: usize,
    shape: FileShape,
    features: Vec<f64>,
    labels: Vec<Vec<usize>>,
    clean_labels: Vec<Vec<usize>>,
    noise_flags: Vec<bool>,
}

impl Dataset {
    pub fn to_json(&self) -> Result<String> {
        let file = match self {
            Dataset::MultiLabel(d) => DatasetFile {
                format: DATASET_FORMAT.into(),
                version: DATASET_VERSION,
                seed: d.seed,
                n_samples: d.len(),
                shape: FileShape::SceneMultilabel {
                    n_classes: d.n_classes,
                    feature_dim: d.feature_dim,
                },
                features: d.features.clone(),
                labels: d.labels.clone(),
                clean_labels: d.clean_labels.clone(),
                noise_flags: d.noise_flags.clone(),
            },
            Dataset::Pixel(d) => DatasetFile {
                format: DATASET_FORMAT.into(),
                version: DATASET_VERSION,
                seed: d.seed,
                n_samples: d.len(),
                shape: FileShape::Pixel {
                    n_classes: d.n_classes,
                    height: d.height,
                    width: d.width,
                    channels: d.channels,
                },
                features: d.features.clone(),
                labels: d.labels.clone(),
                clean_labels: d.clean_labels.clone(),
                noise_flags: d.noise_flags.clone(),
            },
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: DatasetFile = serde_json::from_str(s)?;
        let bad = |m: String| Error::format("dataset file", m);
        if f.format != DATASET_FORMAT || f.version != DATASET_VERSION {
            return Err(bad(format!("unsupported format {} v{}", f.format, f.version)));
        }
        let n = f.n_samples;
        if f.labels.len() != n || f.clean_labels.len() != n || f.noise_flags.len() != n {
            return Err(bad("label arrays disagree with n_samples".into()));
        }
        let ds = match f.shape {
            FileShape::SceneMultilabel {
                n_classes,
                feature_dim,
            } => {
                if f.features.len() != n * feature_dim {
                    return Err(bad("feature array has the wrong length".into()));
                }
                Dataset::MultiLabel(MultiLabelDataset {
                    n_classes,
                    feature_dim,
                    seed: f.seed,
                    features: f.features,
                    labels: f.labels,
                    clean_labels: f.clean_labels,
                    noise_flags: f.noise_flags,
                })
            }
            FileShape::Pixel {
                n_classes,
                height,
                width,
                channels,
            } => {
                if f.features.len() != n * height * width * channels
                    || f.labels.iter().chain(&f.clean_labels).any(|g| g.len() != height * width)
                {
                    return Err(bad("pixel arrays have the wrong length".into()));
                }
                Dataset::Pixel(PixelLabelDataset {
                    n_classes,
                    height,
                    width,
                    channels,
                    seed: f.seed,
                    features: f.features,
                    labels: f.labels,
                    clean_labels: f.clean_labels,
                    noise_flags: f.noise_flags,
                })
            }
        };
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
