//! Open-set datasets: a Gaussian-cluster generator, the labeled / unlabeled /
//! test splits, weak and strong vector augmentations, epoch samplers and the
//! CSV interchange format.
//!
//! Class ids are global: inliers are `0..K`, seen outliers follow, then unseen
//! outliers. The trainer only ever receives a [`TrainingView`]; unlabeled and
//! test truths stay behind [`HiddenTruth`] and [`TestSplit`], which only the
//! evaluator holds.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the synthetic benchmark.
///
/// Inlier class means sit on a sphere whose radius gives an expected pairwise
/// distance of `mean_separation * sigma`. A `hard_outlier_fraction` of each
/// outlier group is centred near the midpoint of two inlier means (pushed off
/// by `hard_offset * sigma` in a random orthogonal direction); the rest sit
/// on a sphere twice as far out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub dim: usize,
    pub n_inlier: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    /// Training points per inlier and seen-outlier class.
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Fraction of each inlier class's training points that keep their label.
    pub label_fraction: f64,
    pub sigma: f64,
    pub mean_separation: f64,
    pub hard_outlier_fraction: f64,
    pub hard_offset: f64,
    /// Gaussian blobs per class; more than one makes few labels insufficient.
    pub modes_per_class: usize,
    /// Spread of a class's blob centres around its mean, in units of `sigma`.
    pub mode_spread: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            n_inlier: 6,
            n_seen: 4,
            n_unseen: 4,
            train_per_class: 500,
            test_per_class: 200,
            label_fraction: 0.05,
            sigma: 1.0,
            mean_separation: 4.0,
            hard_outlier_fraction: 1.0,
            hard_offset: 2.75,
            modes_per_class: 2,
            mode_spread: 2.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_inlier == 0 || self.train_per_class == 0 || self.modes_per_class == 0 {
            return Err(Error::config("dim, n_inlier, train_per_class and modes_per_class must be positive"));
        }
        if self.n_inlier < 2 {
            return Err(Error::config("at least two inlier classes are needed"));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::config(format!(
                "label_fraction must lie in (0, 1], got {}",
                self.label_fraction
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma must be positive"));
        }
        if !(self.mean_separation > 0.0) || self.hard_offset < 0.0 || self.mode_spread < 0.0 {
            return Err(Error::config("mean_separation must be positive, offsets non-negative"));
        }
        if !(0.0..=1.0).contains(&self.hard_outlier_fraction) {
            return Err(Error::config("hard_outlier_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn labels_per_class(&self) -> usize {
        ((self.train_per_class as f64 * self.label_fraction).round() as usize).clamp(1, self.train_per_class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    Inlier,
    SeenOut,
    UnseenOut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetDataset {
    pub dim: usize,
    pub inlier_classes: Vec<usize>,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub labeled_x: Array2<f64>,
    pub labeled_y: Vec<usize>,
    pub unlabeled_x: Array2<f64>,
    unlabeled_truth: Vec<usize>,
    pub test_x: Array2<f64>,
    test_truth: Vec<usize>,
}

/// What the trainer is allowed to see.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub n_classes: usize,
    pub labeled_x: ArrayView2<'a, f64>,
    pub labeled_y: &'a [usize],
    pub unlabeled_x: ArrayView2<'a, f64>,
}

impl TrainingView<'_> {
    pub fn dim(&self) -> usize {
        self.labeled_x.ncols()
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled_y.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled_x.nrows()
    }
}

/// Ground truth of the unlabeled split, for training diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct HiddenTruth<'a> {
    pub n_classes: usize,
    pub unlabeled_truth: &'a [usize],
}

impl HiddenTruth<'_> {
    pub fn is_inlier(&self, i: usize) -> bool {
        self.unlabeled_truth[i] < self.n_classes
    }
}

/// The test split with membership tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSplit {
    pub x: Array2<f64>,
    pub truth: Vec<usize>,
    pub tags: Vec<Membership>,
}

impl TestSplit {
    pub fn count(&self, tag: Membership) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    pub fn indices(&self, tag: Membership) -> Vec<usize> {
        (0..self.tags.len()).filter(|&i| self.tags[i] == tag).collect()
    }
}

impl OpenSetDataset {
    /// Assembles a dataset and checks the class-set invariants.
    pub fn new(
        labeled_x: Array2<f64>,
        labeled_y: Vec<usize>,
        unlabeled_x: Array2<f64>,
        unlabeled_truth: Vec<usize>,
        test_x: Array2<f64>,
        test_truth: Vec<usize>,
    ) -> Result<Self> {
        let dim = labeled_x.ncols();
        if unlabeled_x.ncols() != dim || test_x.ncols() != dim {
            return Err(Error::config("splits disagree on the feature dimension"));
        }
        if labeled_x.nrows() != labeled_y.len()
            || unlabeled_x.nrows() != unlabeled_truth.len()
            || test_x.nrows() != test_truth.len()
        {
            return Err(Error::config("feature and label counts differ"));
        }
        let inliers: BTreeSet<usize> = labeled_y.iter().copied().collect();
        let k = inliers.len();
        if k < 2 || inliers.iter().copied().ne(0..k) {
            return Err(Error::config(format!(
                "labeled classes must be 0..K with K >= 2, got {inliers:?}"
            )));
        }
        let seen: BTreeSet<usize> = unlabeled_truth.iter().copied().filter(|&c| c >= k).collect();
        let unseen: BTreeSet<usize> = test_truth
            .iter()
            .copied()
            .filter(|&c| c >= k && !seen.contains(&c))
            .collect();
        Ok(Self {
            dim,
            inlier_classes: (0..k).collect(),
            seen_classes: seen.into_iter().collect(),
            unseen_classes: unseen.into_iter().collect(),
            labeled_x,
            labeled_y,
            unlabeled_x,
            unlabeled_truth,
            test_x,
            test_truth,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.inlier_classes.len()
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            n_classes: self.n_classes(),
            labeled_x: self.labeled_x.view(),
            labeled_y: &self.labeled_y,
            unlabeled_x: self.unlabeled_x.view(),
        }
    }

    pub fn hidden_truth(&self) -> HiddenTruth<'_> {
        HiddenTruth {
            n_classes: self.n_classes(),
            unlabeled_truth: &self.unlabeled_truth,
        }
    }

    pub fn membership(&self, class: usize) -> Membership {
        if class < self.n_classes() {
            Membership::Inlier
        } else if self.seen_classes.binary_search(&class).is_ok() {
            Membership::SeenOut
        } else {
            Membership::UnseenOut
        }
    }
}

/// Tags each test point by the group its true class belongs to.
pub fn make_test_split(dataset: &OpenSetDataset) -> TestSplit {
    TestSplit {
        x: dataset.test_x.clone(),
        truth: dataset.test_truth.clone(),
        tags: dataset.test_truth.iter().map(|&c| dataset.membership(c)).collect(),
    }
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn min_pairwise_distance(means: &[Array1<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d = &means[i] - &means[j];
            best = best.min(d.dot(&d).sqrt());
        }
    }
    best
}

/// Draws a synthetic open-set benchmark. Deterministic in `config.seed`.
pub fn generate_openset(config: &GeneratorConfig) -> Result<OpenSetDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;
    let sigma = config.sigma;

    // Random directions are nearly orthogonal in high dimension, giving a
    // pairwise distance of about radius * sqrt(2).
    let mut radius = config.mean_separation * sigma / 2f64.sqrt();
    let min_gap = 4.0 * sigma;
    let mut inlier_means = None;
    for _ in 0..8 {
        let means: Vec<Array1<f64>> = (0..config.n_inlier)
            .map(|_| random_unit(d, &mut rng) * radius)
            .collect();
        if min_pairwise_distance(&means) >= min_gap {
            inlier_means = Some(means);
            break;
        }
        radius *= 1.25;
    }
    let inlier_means = inlier_means.ok_or_else(|| {
        Error::config(format!(
            "cannot place {} inlier means {min_gap} apart in {d} dimensions",
            config.n_inlier
        ))
    })?;

    let outlier_mean = |rng: &mut ChaCha8Rng, hard: bool| -> Array1<f64> {
        if hard {
            let a = rng.gen_range(0..config.n_inlier);
            let mut b = rng.gen_range(0..config.n_inlier - 1);
            if b >= a {
                b += 1;
            }
            let mid = (&inlier_means[a] + &inlier_means[b]) * 0.5;
            let axis = &inlier_means[a] - &inlier_means[b];
            let mut dir = random_unit(d, rng);
            let norm2 = axis.dot(&axis);
            if norm2 > 0.0 {
                dir = &dir - &(&axis * (dir.dot(&axis) / norm2));
                let n = dir.dot(&dir).sqrt();
                if n > 1e-12 {
                    dir /= n;
                }
            }
            mid + dir * (config.hard_offset * sigma)
        } else {
            random_unit(d, rng) * (2.0 * radius)
        }
    };
    let n_hard = |n: usize| (n as f64 * config.hard_outlier_fraction).round() as usize;
    let seen_hard = n_hard(config.n_seen);
    let unseen_hard = n_hard(config.n_unseen);
    let seen_means: Vec<_> = (0..config.n_seen)
        .map(|c| outlier_mean(&mut rng, c < seen_hard))
        .collect();
    let unseen_means: Vec<_> = (0..config.n_unseen)
        .map(|c| outlier_mean(&mut rng, c < unseen_hard))
        .collect();
    let all_means: Vec<Array1<f64>> = inlier_means
        .into_iter()
        .chain(seen_means)
        .chain(unseen_means)
        .collect();

    // Per-class blob centres.
    let modes: Vec<Vec<Array1<f64>>> = all_means
        .iter()
        .map(|m| {
            (0..config.modes_per_class)
                .map(|j| {
                    if j == 0 && config.modes_per_class == 1 {
                        m.clone()
                    } else {
                        m + &(random_unit(d, &mut rng) * (config.mode_spread * sigma))
                    }
                })
                .collect()
        })
        .collect();

    let draw = |class: usize, n: usize, rng: &mut ChaCha8Rng| -> Array2<f64> {
        let mut out = Array2::zeros((n, d));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let centre = &modes[class][i % config.modes_per_class];
            for (v, c) in row.iter_mut().zip(centre) {
                *v = c + sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        out
    };

    let k = config.n_inlier;
    let n_lab = config.labels_per_class();
    let mut labeled_rows = Vec::new();
    let mut labeled_y = Vec::new();
    let mut unlabeled_rows = Vec::new();
    let mut unlabeled_truth = Vec::new();
    for c in 0..k + config.n_seen {
        let pts = draw(c, config.train_per_class, &mut rng);
        let take = if c < k { n_lab } else { 0 };
        for (i, row) in pts.rows().into_iter().enumerate() {
            if i < take {
                labeled_rows.push(row.to_owned());
                labeled_y.push(c);
            } else {
                unlabeled_rows.push(row.to_owned());
                unlabeled_truth.push(c);
            }
        }
    }
    let mut test_rows = Vec::new();
    let mut test_truth = Vec::new();
    for c in 0..all_means.len() {
        let pts = draw(c, config.test_per_class, &mut rng);
        test_rows.extend(pts.rows().into_iter().map(|r| r.to_owned()));
        test_truth.extend(std::iter::repeat_n(c, config.test_per_class));
    }

    // Shuffle the unlabeled split so class order carries no information.
    let mut order: Vec<usize> = (0..unlabeled_rows.len()).collect();
    order.shuffle(&mut rng);
    let unlabeled_rows: Vec<_> = order.iter().map(|&i| unlabeled_rows[i].clone()).collect();
    let unlabeled_truth: Vec<_> = order.iter().map(|&i| unlabeled_truth[i]).collect();

    OpenSetDataset::new(
        stack(&labeled_rows, d),
        labeled_y,
        stack(&unlabeled_rows, d),
        unlabeled_truth,
        stack(&test_rows, d),
        test_truth,
    )
}

fn stack(rows: &[Array1<f64>], d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), d));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(src);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Weak,
    Strong,
}

/// Weak view: `x + sigma_w * g`. Strong view: each coordinate zeroed with
/// probability `dropout`, then `+ sigma_s * g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub dropout: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_sigma: 0.1,
            strong_sigma: 0.5,
            dropout: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weak_sigma >= 0.0) || !(self.strong_sigma >= self.weak_sigma) {
            return Err(Error::config("need 0 <= weak_sigma <= strong_sigma"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

pub fn augment<R: Rng + ?Sized>(
    x: ArrayView1<'_, f64>,
    mode: AugmentMode,
    config: &AugmentConfig,
    rng: &mut R,
) -> Array1<f64> {
    let mut out = x.to_owned();
    augment_in_place(out.view_mut().into_slice().unwrap(), mode, config, rng);
    out
}

fn augment_in_place<R: Rng + ?Sized>(x: &mut [f64], mode: AugmentMode, config: &AugmentConfig, rng: &mut R) {
    match mode {
        AugmentMode::Weak => {
            if config.weak_sigma > 0.0 {
                for v in x.iter_mut() {
                    *v += config.weak_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        AugmentMode::Strong => {
            for v in x.iter_mut() {
                if rng.gen::<f64>() < config.dropout {
                    *v = 0.0;
                }
                *v += config.strong_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

/// Augments the selected rows of `source` into a new matrix.
pub fn augment_rows<R: Rng + ?Sized>(
    source: ArrayView2<'_, f64>,
    rows: &[usize],
    mode: AugmentMode,
    config: &AugmentConfig,
    rng: &mut R,
) -> Array2<f64> {
    let mut out = source.select(Axis(0), rows);
    for mut row in out.rows_mut() {
        augment_in_place(row.as_slice_mut().unwrap(), mode, config, rng);
    }
    out
}

/// Without-replacement sampling over `0..n`, reshuffled at each epoch
/// boundary. A batch may straddle two epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

impl EpochSampler {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("cannot sample from an empty split"));
        }
        Ok(Self {
            n,
            order: (0..n).collect(),
            pos: n,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, b: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.n {
                self.order.shuffle(rng);
                self.pos = 0;
                self.epoch += 1;
            }
            let take = (b - out.len()).min(self.n - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// One training step's inputs. `*_idx` index the training view's splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub labeled_idx: Vec<usize>,
    pub labeled_x: Array2<f64>,
    pub labeled_y: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
    pub weak: Array2<f64>,
    pub strong1: Array2<f64>,
    pub strong2: Array2<f64>,
}

/// Batch source with its own RNG streams; serializable so training can resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    pub b_l: usize,
    pub b_u: usize,
    labeled: EpochSampler,
    unlabeled: EpochSampler,
    rng_sampler: ChaCha8Rng,
    rng_weak: ChaCha8Rng,
    rng_strong: ChaCha8Rng,
}

/// Independent stream `stream` of the master seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const STREAM_INIT: u64 = 0;
pub const STREAM_SAMPLER: u64 = 1;
pub const STREAM_WEAK: u64 = 2;
pub const STREAM_STRONG: u64 = 3;

impl BatchSampler {
    pub fn new(view: &TrainingView<'_>, b_l: usize, b_u: usize, seed: u64) -> Result<Self> {
        if b_l == 0 || b_u == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if b_l > view.n_labeled() || b_u > view.n_unlabeled() {
            return Err(Error::config(format!(
                "batch sizes ({b_l}, {b_u}) exceed split sizes ({}, {})",
                view.n_labeled(),
                view.n_unlabeled()
            )));
        }
        Ok(Self {
            b_l,
            b_u,
            labeled: EpochSampler::new(view.n_labeled())?,
            unlabeled: EpochSampler::new(view.n_unlabeled())?,
            rng_sampler: rng_stream(seed, STREAM_SAMPLER),
            rng_weak: rng_stream(seed, STREAM_WEAK),
            rng_strong: rng_stream(seed, STREAM_STRONG),
        })
    }

    pub fn unlabeled_epoch(&self) -> u64 {
        self.unlabeled.epoch()
    }

    /// Draws the next batch. All views are always drawn, in a fixed order,
    /// so which losses consume them never shifts the streams.
    pub fn next(&mut self, view: &TrainingView<'_>, aug: &AugmentConfig) -> Batch {
        let labeled_idx = self.labeled.next_batch(self.b_l, &mut self.rng_sampler);
        let unlabeled_idx = self.unlabeled.next_batch(self.b_u, &mut self.rng_sampler);
        let labeled_x = augment_rows(view.labeled_x, &labeled_idx, AugmentMode::Weak, aug, &mut self.rng_weak);
        let weak = augment_rows(view.unlabeled_x, &unlabeled_idx, AugmentMode::Weak, aug, &mut self.rng_weak);
        let strong1 = augment_rows(view.unlabeled_x, &unlabeled_idx, AugmentMode::Strong, aug, &mut self.rng_strong);
        let strong2 = augment_rows(view.unlabeled_x, &unlabeled_idx, AugmentMode::Strong, aug, &mut self.rng_strong);
        Batch {
            labeled_y: labeled_idx.iter().map(|&i| view.labeled_y[i]).collect(),
            labeled_idx,
            labeled_x,
            unlabeled_idx,
            weak,
            strong1,
            strong2,
        }
    }
}

const SPLIT_LABELED: &str = "labeled";
const SPLIT_UNLABELED: &str = "unlabeled";
const SPLIT_TEST: &str = "test";

fn csv_header(dim: usize) -> Vec<String> {
    (0..dim)
        .map(|i| format!("f{i}"))
        .chain(["label", "split", "truth"].map(String::from))
        .collect()
}

/// Writes the dataset as `f0..f{d-1},label,split,truth`. Floats use the
/// shortest round-trip representation.
pub fn write_csv_dataset(dataset: &OpenSetDataset, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(csv_header(dataset.dim)).map_err(csv_err)?;
    let mut emit = |x: ArrayView2<'_, f64>, label: &dyn Fn(usize) -> String, split: &str, truth: &[usize]| -> Result<()> {
        for (i, row) in x.rows().into_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(label(i));
            rec.push(split.to_string());
            rec.push(truth[i].to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        Ok(())
    };
    emit(dataset.labeled_x.view(), &|i| dataset.labeled_y[i].to_string(), SPLIT_LABELED, &dataset.labeled_y)?;
    emit(dataset.unlabeled_x.view(), &|_| String::new(), SPLIT_UNLABELED, &dataset.unlabeled_truth)?;
    emit(dataset.test_x.view(), &|_| String::new(), SPLIT_TEST, &dataset.test_truth)?;
    let mut inner = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    inner.flush().map_err(io)
}

/// Parses a dataset written in the CSV schema. The `label` column is only
/// read for labeled rows; `truth` is kept for evaluation.
pub fn load_csv_dataset(path: &Path) -> Result<OpenSetDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(perr(1, "missing header".into())),
        Some(r) => r.map_err(|e| perr(1, e.to_string()))?,
    };
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 4 || cols != csv_header(cols.len() - 3) {
        return Err(perr(1, "header must be f0,...,f{d-1},label,split,truth".into()));
    }
    let dim = cols.len() - 3;

    let mut parts: [(Vec<f64>, Vec<usize>); 3] = Default::default();
    let mut labels = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            perr(e.position().map_or(0, |p| p.line() as usize), e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != dim + 3 {
            return Err(perr(line, format!("expected {} fields, found {}", dim + 3, rec.len())));
        }
        let split = match &rec[dim + 1] {
            SPLIT_LABELED => 0,
            SPLIT_UNLABELED => 1,
            SPLIT_TEST => 2,
            other => return Err(perr(line, format!("unknown split tag {other:?}"))),
        };
        let truth: usize = rec[dim + 2]
            .trim()
            .parse()
            .map_err(|_| perr(line, format!("truth {:?} is not a class id", &rec[dim + 2])))?;
        for (j, field) in rec.iter().take(dim).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| perr(line, format!("feature f{j} = {field:?} is not numeric")))?;
            if !v.is_finite() {
                return Err(perr(line, format!("feature f{j} is not finite")));
            }
            parts[split].0.push(v);
        }
        if split == 0 {
            let label: usize = rec[dim]
                .trim()
                .parse()
                .map_err(|_| perr(line, format!("label {:?} is not a class id", &rec[dim])))?;
            if label != truth {
                return Err(perr(line, "labeled row has label != truth".into()));
            }
            labels.push(label);
        }
        parts[split].1.push(truth);
    }
    let [lab, unl, test] = parts;
    let mat = |v: Vec<f64>| Array2::from_shape_vec((v.len() / dim, dim), v).expect("row-major features");
    OpenSetDataset::new(mat(lab.0), labels, mat(unl.0), unl.1, mat(test.0), test.1)
        .map_err(|e| perr(0, e.to_string()))
}

/// Converts an epoch count into iterations: `epochs * ceil(M / B_u)`.
pub fn epochs_to_iterations(epochs: u64, n_unlabeled: usize, b_u: usize) -> u64 {
    epochs * n_unlabeled.div_ceil(b_u.max(1)) as u64
}

/// Row `i` of a matrix as a slice-backed view; used by tests and the CLI.
pub fn row(x: &Array2<f64>, i: usize) -> ArrayView1<'_, f64> {
    x.slice(s![i, ..])
}
