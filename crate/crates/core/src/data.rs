//! Synthetic datasets, augmentation and fold sampling.
//!
//! Ground-truth labels are private to this module: the training path sees
//! labels only through [`Dataset::labeled_set`], which is restricted to a
//! fold's labeled indices. Evaluation and statistics read the full label
//! array through [`Dataset::eval_labels`].

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fixed seed for carving the held-out test split, shared by every fold of a
/// dataset so folds stay paired.
const TEST_SPLIT_SEED: u64 = 0x7e57_5eed;

/// RNG stream ids derived from the train seed; keeping them separate lets a
/// supervised-only run consume the labeled stream identically to an SSL run.
const STREAM_LABELED: u64 = 1;
const STREAM_UNLABELED: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal via Box-Muller; consumes two uniforms per draw.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// A labeled point cloud. Labels are hidden from the training path.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub points: Vec<Vec<f64>>,
    labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, points: Vec<Vec<f64>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::input("points and labels disagree in length"));
        }
        if labels.iter().any(|&l| l >= n_classes) {
            return Err(Error::input("label out of class range"));
        }
        Ok(Dataset { name: name.into(), points, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn point(&self, idx: usize) -> &[f64] {
        &self.points[idx]
    }

    /// Ground-truth labels, for evaluation and statistics only.
    pub fn eval_labels(&self) -> &[usize] {
        &self.labels
    }

    /// `(index, point, label)` triples of a fold's labeled set — the only
    /// label access the training path gets.
    pub fn labeled_set<'d>(&'d self, fold: &FoldSpec) -> Result<Vec<(usize, &'d [f64], usize)>> {
        fold.labeled
            .iter()
            .map(|&i| {
                if i >= self.len() {
                    Err(Error::input(format!("labeled index {i} out of range")))
                } else {
                    Ok((i, self.points[i].as_slice(), self.labels[i]))
                }
            })
            .collect()
    }

    /// Centroid of all points.
    pub fn centroid(&self) -> Vec<f64> {
        let d = self.dim();
        let mut c = vec![0.0; d];
        for p in &self.points {
            for (ci, pi) in c.iter_mut().zip(p) {
                *ci += pi;
            }
        }
        for ci in &mut c {
            *ci /= self.len().max(1) as f64;
        }
        c
    }

    /// Root-mean-square distance from the centroid; the unit for
    /// augmentation strengths.
    pub fn scale(&self) -> f64 {
        let c = self.centroid();
        let ms = self
            .points
            .iter()
            .map(|p| p.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>()
            / self.len().max(1) as f64;
        ms.sqrt()
    }
}

/// Two interleaved half-circles with Gaussian noise.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::input("two moons needs an even number of points"));
    }
    if noise < 0.0 {
        return Err(Error::input("noise must be nonnegative"));
    }
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..half {
        let t = if half == 1 { 0.0 } else { std::f64::consts::PI * i as f64 / (half - 1) as f64 };
        points.push(vec![t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..half {
        let t = if half == 1 { 0.0 } else { std::f64::consts::PI * i as f64 / (half - 1) as f64 };
        points.push(vec![1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    for p in &mut points {
        for v in p.iter_mut() {
            *v += noise * standard_normal(&mut rng);
        }
    }
    Dataset::new("two_moons", points, labels, 2)
}

/// Isotropic Gaussian clusters centered on the unit circle, with per-class
/// counts as equal as possible.
pub fn gen_blobs(n: usize, n_classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::input("blobs need at least two classes"));
    }
    if spread < 0.0 {
        return Err(Error::input("spread must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n_classes {
        let count = n / n_classes + usize::from(k < n % n_classes);
        let angle = 2.0 * std::f64::consts::PI * k as f64 / n_classes as f64;
        let (cx, cy) = (angle.cos(), angle.sin());
        for _ in 0..count {
            let x = cx + spread * standard_normal(&mut rng);
            let y = cy + spread * standard_normal(&mut rng);
            points.push(vec![x, y]);
            labels.push(k);
        }
    }
    Dataset::new("blobs", points, labels, n_classes)
}

/// Fixed blob centers, for nearest-center oracles in tests.
pub fn blob_centers(n_classes: usize) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / n_classes as f64;
            vec![angle.cos(), angle.sin()]
        })
        .collect()
}

/// Augmentation strengths derived from the dataset geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub centroid: Vec<f64>,
    /// Weak jitter std: 0.05 of the dataset scale.
    pub weak_std: f64,
    /// Strong jitter std: 0.15 of the dataset scale.
    pub strong_std: f64,
    /// Strong rotation half-range about the centroid, radians (10 degrees:
    /// wide enough to distort, narrow enough that a strong view of a
    /// 10-class circular layout rarely crosses the nearest-center oracle
    /// boundary).
    pub max_angle: f64,
    /// Strong scaling half-range about the centroid (20%).
    pub scale_jitter: f64,
}

impl AugmentParams {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let scale = ds.scale();
        AugmentParams {
            centroid: ds.centroid(),
            weak_std: 0.05 * scale,
            strong_std: 0.15 * scale,
            max_angle: 10.0_f64.to_radians(),
            scale_jitter: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentStrength {
    Weak,
    Strong,
}

/// One augmented view. Weak is additive Gaussian jitter; strong composes a
/// larger jitter with a random rotation (in the first two coordinates) and a
/// random scaling, both about the dataset centroid.
pub fn augment(x: &[f64], strength: AugmentStrength, ap: &AugmentParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let std = match strength {
        AugmentStrength::Weak => ap.weak_std,
        AugmentStrength::Strong => ap.strong_std,
    };
    let mut out: Vec<f64> = x.iter().map(|&v| v + std * standard_normal(rng)).collect();
    if strength == AugmentStrength::Strong {
        let angle = rng.gen_range(-ap.max_angle..ap.max_angle);
        let factor = rng.gen_range(1.0 - ap.scale_jitter..1.0 + ap.scale_jitter);
        if out.len() >= 2 {
            let (dx, dy) = (out[0] - ap.centroid[0], out[1] - ap.centroid[1]);
            let (s, c) = angle.sin_cos();
            out[0] = ap.centroid[0] + c * dx - s * dy;
            out[1] = ap.centroid[1] + s * dx + c * dy;
        }
        for (i, v) in out.iter_mut().enumerate() {
            *v = ap.centroid[i] + factor * (*v - ap.centroid[i]);
        }
    }
    out
}

/// A weak/strong view pair of one unlabeled example.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub weak: Vec<f64>,
    pub strong: Vec<f64>,
    pub source: usize,
}

/// Fold construction protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FoldProtocol {
    /// Exactly `per_class` labeled examples from every class.
    Balanced { per_class: usize },
    /// `n_labels` drawn uniformly from the whole training split; classes may
    /// be missing from the labeled set.
    Random { n_labels: usize },
}

/// Record of an imbalance applied to the unlabeled pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceInfo {
    pub target_class: usize,
    pub keep_fraction: f64,
    pub seed: u64,
    /// Unlabeled indices that were dropped.
    pub dropped: Vec<usize>,
}

/// A realized labeled/unlabeled/test split with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSpec {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
    pub fold_seed: u64,
    pub protocol: FoldProtocol,
    pub test_fraction: f64,
    pub n_points: usize,
    pub imbalance: Option<ImbalanceInfo>,
}

impl FoldSpec {
    /// Partition invariants: labeled and unlabeled are disjoint, their union
    /// plus any imbalance-dropped items is the training split, and the test
    /// set is disjoint from both.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![0u8; self.n_points];
        for &i in &self.test {
            seen[i] = 1;
        }
        for &i in &self.labeled {
            if seen[i] != 0 {
                return Err(Error::input(format!("index {i} is in more than one split")));
            }
            seen[i] = 2;
        }
        for &i in &self.unlabeled {
            if seen[i] != 0 {
                return Err(Error::input(format!("index {i} is in more than one split")));
            }
            seen[i] = 3;
        }
        let dropped = self.imbalance.as_ref().map_or(0, |im| im.dropped.len());
        let covered = self.test.len() + self.labeled.len() + self.unlabeled.len() + dropped;
        if covered != self.n_points {
            return Err(Error::input(format!(
                "splits cover {covered} of {} points",
                self.n_points
            )));
        }
        Ok(())
    }
}

/// Deterministic stratified test carve shared by all folds of a dataset.
fn test_split(ds: &Dataset, test_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::input("test_fraction must be in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(TEST_SPLIT_SEED);
    let mut test = Vec::new();
    let mut train = Vec::new();
    for class in 0..ds.n_classes {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Class-balanced fold: exactly `per_class` labeled examples per class,
/// drawn uniformly without replacement from the training split.
pub fn sample_fold_balanced(ds: &Dataset, per_class: usize, fold_seed: u64, test_fraction: f64) -> Result<FoldSpec> {
    let (train, test) = test_split(ds, test_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed);
    let mut labeled = Vec::with_capacity(per_class * ds.n_classes);
    for class in 0..ds.n_classes {
        let mut members: Vec<usize> = train.iter().copied().filter(|&i| ds.labels[i] == class).collect();
        if members.len() < per_class {
            return Err(Error::input(format!(
                "class {class} has only {} training examples, need {per_class}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        labeled.extend_from_slice(&members[..per_class]);
    }
    labeled.sort_unstable();
    let in_labeled: std::collections::HashSet<usize> = labeled.iter().copied().collect();
    let unlabeled: Vec<usize> = train.iter().copied().filter(|i| !in_labeled.contains(i)).collect();
    let fold = FoldSpec {
        labeled,
        unlabeled,
        test,
        fold_seed,
        protocol: FoldProtocol::Balanced { per_class },
        test_fraction,
        n_points: ds.len(),
        imbalance: None,
    };
    fold.validate()?;
    Ok(fold)
}

/// Uniformly random fold without class-balance constraints. Built from a
/// seeded permutation so the fold for `n` labels is contained in the fold
/// for `n + k` labels at the same seed.
pub fn sample_fold_random(ds: &Dataset, n_labels: usize, fold_seed: u64, test_fraction: f64) -> Result<FoldSpec> {
    let (train, test) = test_split(ds, test_fraction)?;
    if n_labels > train.len() {
        return Err(Error::input(format!(
            "cannot label {n_labels} of {} training examples",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed);
    let mut perm = train.clone();
    perm.shuffle(&mut rng);
    let mut labeled: Vec<usize> = perm[..n_labels].to_vec();
    labeled.sort_unstable();
    let in_labeled: std::collections::HashSet<usize> = labeled.iter().copied().collect();
    let unlabeled: Vec<usize> = train.iter().copied().filter(|i| !in_labeled.contains(i)).collect();
    let fold = FoldSpec {
        labeled,
        unlabeled,
        test,
        fold_seed,
        protocol: FoldProtocol::Random { n_labels },
        test_fraction,
        n_points: ds.len(),
        imbalance: None,
    };
    fold.validate()?;
    Ok(fold)
}

/// Drops a random `1 - keep_fraction` share of one class's unlabeled items.
/// The labeled set is untouched. `target_class: None` picks the class at
/// random among classes present in the unlabeled pool.
pub fn apply_imbalance(
    fold: &FoldSpec,
    ds: &Dataset,
    seed: u64,
    keep_fraction: f64,
    target_class: Option<usize>,
) -> Result<FoldSpec> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::input("keep_fraction must be in (0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = match target_class {
        Some(c) => c,
        None => rng.gen_range(0..ds.n_classes),
    };
    let members: Vec<usize> = fold.unlabeled.iter().copied().filter(|&i| ds.labels[i] == class).collect();
    if members.is_empty() {
        return Err(Error::input(format!("class {class} absent from the unlabeled pool")));
    }
    // ceil((1 - keep) * count), with a small guard against the binary
    // representation of fractions like 0.4 rounding 40.0 up to 41.
    let n_drop = (((1.0 - keep_fraction) * members.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut pool = members.clone();
    pool.shuffle(&mut rng);
    let mut dropped: Vec<usize> = pool[..n_drop].to_vec();
    dropped.sort_unstable();
    let drop_set: std::collections::HashSet<usize> = dropped.iter().copied().collect();
    let unlabeled: Vec<usize> = fold.unlabeled.iter().copied().filter(|i| !drop_set.contains(i)).collect();
    let fold = FoldSpec {
        labeled: fold.labeled.clone(),
        unlabeled,
        test: fold.test.clone(),
        fold_seed: fold.fold_seed,
        protocol: fold.protocol,
        test_fraction: fold.test_fraction,
        n_points: fold.n_points,
        imbalance: Some(ImbalanceInfo { target_class: class, keep_fraction, seed, dropped }),
    };
    fold.validate()?;
    Ok(fold)
}

/// Population standard deviation of labeled class frequencies about the
/// uniform frequency `1/n_classes`, normalized by that frequency.
pub fn class_freq_deviation(fold: &FoldSpec, ds: &Dataset) -> Result<f64> {
    if fold.labeled.is_empty() {
        return Err(Error::input("fold has no labeled items"));
    }
    let mut counts = vec![0usize; ds.n_classes];
    for &i in &fold.labeled {
        counts[ds.labels[i]] += 1;
    }
    let uniform = 1.0 / ds.n_classes as f64;
    let n = fold.labeled.len() as f64;
    let var = counts
        .iter()
        .map(|&c| {
            let f = c as f64 / n;
            (f - uniform) * (f - uniform)
        })
        .sum::<f64>()
        / ds.n_classes as f64;
    Ok(var.sqrt() / uniform)
}

/// One training step's data: a labeled minibatch and `ratio * b_labeled`
/// unlabeled view pairs.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(index, point, label)` triples.
    pub labeled: Vec<(usize, Vec<f64>, usize)>,
    pub pairs: Vec<ViewPair>,
}

/// Infinite batch stream over a fold.
///
/// Labeled and unlabeled items are sampled in reshuffled epochs (every index
/// appears once before any repeats). Labeled points get a weak augmentation;
/// unlabeled points yield a weak/strong pair. Shuffling and augmentation use
/// three independent streams of the train seed, so fold contents never
/// depend on the train seed and batch composition never depends on the fold
/// seed's stream.
pub struct BatchIterator<'d> {
    ds: &'d Dataset,
    labeled: Vec<(usize, usize)>, // (index, label)
    unlabeled: Vec<usize>,
    b_labeled: usize,
    b_unlabeled: usize,
    labeled_rng: ChaCha8Rng,
    unlabeled_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    labeled_order: Vec<usize>,
    labeled_cursor: usize,
    unlabeled_order: Vec<usize>,
    unlabeled_cursor: usize,
    ap: AugmentParams,
}

pub fn batch_iterator<'d>(
    fold: &FoldSpec,
    ds: &'d Dataset,
    b_labeled: usize,
    ratio: usize,
    train_seed: u64,
) -> Result<BatchIterator<'d>> {
    if b_labeled == 0 || ratio == 0 {
        return Err(Error::input("batch size and ratio must be positive"));
    }
    let labeled: Vec<(usize, usize)> = ds
        .labeled_set(fold)?
        .into_iter()
        .map(|(i, _, y)| (i, y))
        .collect();
    if labeled.is_empty() {
        return Err(Error::input("fold has no labeled items"));
    }
    Ok(BatchIterator {
        ds,
        labeled,
        unlabeled: fold.unlabeled.clone(),
        b_labeled,
        b_unlabeled: ratio * b_labeled,
        labeled_rng: stream_rng(train_seed, STREAM_LABELED),
        unlabeled_rng: stream_rng(train_seed, STREAM_UNLABELED),
        augment_rng: stream_rng(train_seed, STREAM_AUGMENT),
        labeled_order: Vec::new(),
        labeled_cursor: 0,
        unlabeled_order: Vec::new(),
        unlabeled_cursor: 0,
        ap: AugmentParams::from_dataset(ds),
    })
}

impl BatchIterator<'_> {
    fn next_labeled(&mut self) -> usize {
        if self.labeled_cursor >= self.labeled_order.len() {
            let mut order: Vec<usize> = (0..self.labeled.len()).collect();
            order.shuffle(&mut self.labeled_rng);
            self.labeled_order = order;
            self.labeled_cursor = 0;
        }
        let slot = self.labeled_order[self.labeled_cursor];
        self.labeled_cursor += 1;
        slot
    }

    fn next_unlabeled(&mut self) -> usize {
        if self.unlabeled_cursor >= self.unlabeled_order.len() {
            let mut order: Vec<usize> = (0..self.unlabeled.len()).collect();
            order.shuffle(&mut self.unlabeled_rng);
            self.unlabeled_order = order;
            self.unlabeled_cursor = 0;
        }
        let slot = self.unlabeled_order[self.unlabeled_cursor];
        self.unlabeled_cursor += 1;
        slot
    }

    /// Draws the next step's batch. Always succeeds once constructed; the
    /// stream is infinite.
    pub fn next_batch(&mut self) -> Batch {
        let mut labeled = Vec::with_capacity(self.b_labeled);
        for _ in 0..self.b_labeled {
            let slot = self.next_labeled();
            let (idx, y) = self.labeled[slot];
            let x = augment(self.ds.point(idx), AugmentStrength::Weak, &self.ap, &mut self.augment_rng);
            labeled.push((idx, x, y));
        }
        let mut pairs = Vec::with_capacity(self.b_unlabeled);
        if !self.unlabeled.is_empty() {
            for _ in 0..self.b_unlabeled {
                let slot = self.next_unlabeled();
                let idx = self.unlabeled[slot];
                let weak = augment(self.ds.point(idx), AugmentStrength::Weak, &self.ap, &mut self.augment_rng);
                let strong = augment(self.ds.point(idx), AugmentStrength::Strong, &self.ap, &mut self.augment_rng);
                pairs.push(ViewPair { weak, strong, source: idx });
            }
        }
        Batch { labeled, pairs }
    }
}

// --- fold (de)serialization -------------------------------------------------
//
// The on-disk schema is {protocol, seed, labeled, test, meta}; the unlabeled
// set is reconstructed as the complement of labeled, test and any dropped
// indices recorded in meta.

#[derive(Serialize, Deserialize)]
struct FoldMeta {
    test_fraction: f64,
    n_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    imbalance: Option<ImbalanceInfo>,
}

#[derive(Serialize, Deserialize)]
struct FoldFile {
    protocol: FoldProtocol,
    seed: u64,
    labeled: Vec<usize>,
    test: Vec<usize>,
    meta: FoldMeta,
}

impl FoldSpec {
    pub fn to_json(&self) -> String {
        let file = FoldFile {
            protocol: self.protocol,
            seed: self.fold_seed,
            labeled: self.labeled.clone(),
            test: self.test.clone(),
            meta: FoldMeta {
                test_fraction: self.test_fraction,
                n_points: self.n_points,
                imbalance: self.imbalance.clone(),
            },
        };
        serde_json::to_string_pretty(&file).expect("fold serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<FoldSpec> {
        let file: FoldFile = serde_json::from_str(json)
            .map_err(|e| Error::input(format!("malformed fold document: {e}")))?;
        let mut member = vec![0u8; file.meta.n_points];
        for &i in file.test.iter().chain(&file.labeled) {
            if i >= file.meta.n_points {
                return Err(Error::input(format!("fold index {i} out of range")));
            }
            member[i] = 1;
        }
        if let Some(im) = &file.meta.imbalance {
            for &i in &im.dropped {
                if i >= file.meta.n_points {
                    return Err(Error::input(format!("dropped index {i} out of range")));
                }
                member[i] = 1;
            }
        }
        let unlabeled: Vec<usize> = (0..file.meta.n_points).filter(|&i| member[i] == 0).collect();
        let fold = FoldSpec {
            labeled: file.labeled,
            unlabeled,
            test: file.test,
            fold_seed: file.seed,
            protocol: file.protocol,
            test_fraction: file.meta.test_fraction,
            n_points: file.meta.n_points,
            imbalance: file.meta.imbalance,
        };
        fold.validate()?;
        Ok(fold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_moons_noiseless_arcs() {
        let ds = gen_two_moons(4, 0.0, 0).unwrap();
        assert_eq!(ds.len(), 4);
        // Endpoints of the canonical arcs.
        assert_eq!(ds.points[0], vec![1.0, 0.0]);
        let p = &ds.points[1];
        assert!((p[0] + 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
        assert_eq!(ds.eval_labels(), &[0, 0, 1, 1]);
        assert!(gen_two_moons(5, 0.0, 0).is_err());
    }

    #[test]
    fn two_moons_deterministic_and_balanced() {
        let a = gen_two_moons(2000, 0.1, 9).unwrap();
        let b = gen_two_moons(2000, 0.1, 9).unwrap();
        assert_eq!(a, b);
        let ones = a.eval_labels().iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 1000);
    }

    #[test]
    fn blobs_counts_and_zero_spread() {
        let ds = gen_blobs(100, 10, 0.0, 3).unwrap();
        for k in 0..10 {
            let members: Vec<&Vec<f64>> = ds
                .points
                .iter()
                .zip(ds.eval_labels())
                .filter(|(_, &l)| l == k)
                .map(|(p, _)| p)
                .collect();
            assert_eq!(members.len(), 10);
            for p in &members {
                assert_eq!(*p, members[0]); // zero within-class variance
            }
        }
    }

    #[test]
    fn blobs_nearest_center_oracle_is_perfect_when_separated() {
        let ds = gen_blobs(500, 5, 0.05, 11).unwrap();
        let centers = blob_centers(5);
        let correct = ds
            .points
            .iter()
            .zip(ds.eval_labels())
            .filter(|(p, &l)| {
                let nearest = centers
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da: f64 = p.iter().zip(*a).map(|(x, c)| (x - c) * (x - c)).sum();
                        let db: f64 = p.iter().zip(*b).map(|(x, c)| (x - c) * (x - c)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .map(|(k, _)| k)
                    .unwrap();
                nearest == l
            })
            .count();
        assert_eq!(correct, 500);
    }

    #[test]
    fn weak_augment_with_zero_scale_is_identity() {
        let ds = gen_blobs(50, 2, 0.0, 0).unwrap();
        let mut ap = AugmentParams::from_dataset(&ds);
        ap.weak_std = 0.0;
        let mut rng = stream_rng(0, STREAM_AUGMENT);
        let x = vec![0.3, -0.4];
        assert_eq!(augment(&x, AugmentStrength::Weak, &ap, &mut rng), x);
    }

    #[test]
    fn augment_reproducible_per_rng_state() {
        let ds = gen_blobs(50, 2, 0.1, 0).unwrap();
        let ap = AugmentParams::from_dataset(&ds);
        let x = vec![0.3, -0.4];
        let mut r1 = stream_rng(7, STREAM_AUGMENT);
        let mut r2 = stream_rng(7, STREAM_AUGMENT);
        assert_eq!(
            augment(&x, AugmentStrength::Strong, &ap, &mut r1),
            augment(&x, AugmentStrength::Strong, &ap, &mut r2)
        );
    }

    #[test]
    fn strong_displacement_dominates_weak() {
        // Empirical CDF comparison over many draws: at every decile the
        // strong displacement is at least the weak one.
        let ds = gen_blobs(500, 10, 0.15, 1).unwrap();
        let ap = AugmentParams::from_dataset(&ds);
        let mut rng = stream_rng(3, STREAM_AUGMENT);
        let x = ds.point(0).to_vec();
        let norm = |v: &[f64]| -> f64 {
            v.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        };
        let mut weak: Vec<f64> = (0..10_000)
            .map(|_| norm(&augment(&x, AugmentStrength::Weak, &ap, &mut rng)))
            .collect();
        let mut strong: Vec<f64> = (0..10_000)
            .map(|_| norm(&augment(&x, AugmentStrength::Strong, &ap, &mut rng)))
            .collect();
        weak.sort_by(|a, b| a.partial_cmp(b).unwrap());
        strong.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for q in 1..10 {
            let i = q * 10_000 / 10;
            assert!(strong[i] >= weak[i], "decile {q}: {} < {}", strong[i], weak[i]);
        }
    }

    #[test]
    fn balanced_fold_counts() {
        let ds = gen_blobs(2000, 10, 0.1, 5).unwrap();
        let fold = sample_fold_balanced(&ds, 4, 0, 0.2).unwrap();
        assert_eq!(fold.labeled.len(), 40);
        let mut counts = vec![0usize; 10];
        for &i in &fold.labeled {
            counts[ds.eval_labels()[i]] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4));
        fold.validate().unwrap();
        assert_eq!(fold.test.len(), 400);
        assert_eq!(fold.labeled.len() + fold.unlabeled.len() + fold.test.len(), 2000);
    }

    #[test]
    fn balanced_fold_exhausts_classes() {
        let ds = gen_blobs(100, 10, 0.1, 5).unwrap();
        // 8 training examples per class after the 20% carve.
        let fold = sample_fold_balanced(&ds, 8, 1, 0.2).unwrap();
        assert!(fold.unlabeled.is_empty());
        assert!(sample_fold_balanced(&ds, 9, 1, 0.2).is_err());
    }

    #[test]
    fn distinct_fold_seeds_differ() {
        let ds = gen_blobs(2000, 10, 0.1, 5).unwrap();
        let base = sample_fold_balanced(&ds, 4, 0, 0.2).unwrap();
        let differing = (1..=10)
            .filter(|&s| sample_fold_balanced(&ds, 4, s, 0.2).unwrap().labeled != base.labeled)
            .count();
        assert!(differing >= 9, "only {differing} of 10 seeds differ");
    }

    #[test]
    fn random_fold_basics() {
        let ds = gen_blobs(200, 10, 0.1, 5).unwrap();
        let full = sample_fold_random(&ds, 160, 0, 0.2).unwrap();
        assert!(full.unlabeled.is_empty());

        // Small folds may miss classes entirely; the sampler must not care.
        let tiny = sample_fold_random(&ds, 5, 3, 0.2).unwrap();
        assert_eq!(tiny.labeled.len(), 5);
        let mut counts = vec![0usize; 10];
        for &i in &tiny.labeled {
            counts[ds.eval_labels()[i]] += 1;
        }
        assert!(counts.iter().any(|&c| c == 0));
    }

    #[test]
    fn random_fold_incremental_containment() {
        let ds = gen_blobs(2000, 10, 0.1, 5).unwrap();
        for seed in 0..6 {
            let small = sample_fold_random(&ds, 40, seed, 0.2).unwrap();
            let big = sample_fold_random(&ds, 50, seed, 0.2).unwrap();
            let big_set: std::collections::HashSet<usize> = big.labeled.iter().copied().collect();
            assert!(small.labeled.iter().all(|i| big_set.contains(i)));
        }
    }

    #[test]
    fn imbalance_drops_forty_percent() {
        let ds = gen_blobs(1250, 10, 0.1, 5).unwrap();
        let fold = sample_fold_balanced(&ds, 4, 0, 0.2).unwrap();
        // Pick a class and check exact counts: class c has 100 training
        // examples, 4 labeled, 96 unlabeled.
        let count = |f: &FoldSpec, c: usize| f.unlabeled.iter().filter(|&&i| ds.eval_labels()[i] == c).count();
        let reduced = apply_imbalance(&fold, &ds, 11, 0.6, Some(3)).unwrap();
        let before = count(&fold, 3);
        let after = count(&reduced, 3);
        assert_eq!(after, before - ((0.4 * before as f64) - 1e-9).ceil() as usize);
        for c in 0..10 {
            if c != 3 {
                assert_eq!(count(&reduced, c), count(&fold, c));
            }
        }
        assert_eq!(reduced.labeled, fold.labeled);

        let unchanged = apply_imbalance(&fold, &ds, 11, 1.0, Some(3)).unwrap();
        assert_eq!(unchanged.unlabeled, fold.unlabeled);
    }

    #[test]
    fn imbalance_sixty_percent_of_hundred_keeps_sixty() {
        // A class with exactly 100 unlabeled items keeps exactly 60.
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for i in 0..120 {
            points.push(vec![i as f64, 0.0]);
            labels.push(usize::from(i >= 100));
        }
        let ds = Dataset::new("synthetic", points, labels, 2).unwrap();
        let fold = FoldSpec {
            labeled: vec![],
            unlabeled: (0..120).collect(),
            test: vec![],
            fold_seed: 0,
            protocol: FoldProtocol::Random { n_labels: 0 },
            test_fraction: 0.0,
            n_points: 120,
            imbalance: None,
        };
        let reduced = apply_imbalance(&fold, &ds, 11, 0.6, Some(0)).unwrap();
        let remaining = reduced.unlabeled.iter().filter(|&&i| ds.eval_labels()[i] == 0).count();
        assert_eq!(remaining, 60);
        assert_eq!(reduced.imbalance.as_ref().unwrap().dropped.len(), 40);
    }

    #[test]
    fn imbalance_rejects_absent_class() {
        let ds = gen_blobs(100, 10, 0.1, 5).unwrap();
        let fold = sample_fold_balanced(&ds, 8, 0, 0.2).unwrap(); // empty unlabeled pool
        assert!(apply_imbalance(&fold, &ds, 0, 0.6, Some(0)).is_err());
    }

    #[test]
    fn freq_deviation_balanced_is_zero() {
        let ds = gen_blobs(2000, 10, 0.1, 5).unwrap();
        let fold = sample_fold_balanced(&ds, 4, 0, 0.2).unwrap();
        assert_eq!(class_freq_deviation(&fold, &ds).unwrap(), 0.0);
    }

    #[test]
    fn freq_deviation_known_distribution() {
        // Frequencies {0.025, 0.05 x3, 0.10 x2, 0.125 x3, 0.25} over 40
        // labels -> normalized deviation ~ 0.612.
        let counts = [1usize, 2, 2, 2, 4, 4, 5, 5, 5, 10];
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (class, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                points.push(vec![0.0, 0.0]);
                labels.push(class);
            }
        }
        let n = points.len();
        let ds = Dataset::new("synthetic", points, labels, 10).unwrap();
        let fold = FoldSpec {
            labeled: (0..n).collect(),
            unlabeled: vec![],
            test: vec![],
            fold_seed: 0,
            protocol: FoldProtocol::Random { n_labels: n },
            test_fraction: 0.0,
            n_points: n,
            imbalance: None,
        };
        let dev = class_freq_deviation(&fold, &ds).unwrap();
        assert!((dev - 0.612372).abs() < 1e-5, "dev = {dev}");
    }

    #[test]
    fn batch_iterator_shapes_and_epochs() {
        let ds = gen_blobs(300, 10, 0.1, 5).unwrap();
        let fold = sample_fold_balanced(&ds, 4, 0, 0.2).unwrap();
        let mut it = batch_iterator(&fold, &ds, 8, 7, 2046).unwrap();
        let mut seen = std::collections::HashSet::new();
        // |labeled| = 40, B = 8: one epoch is 5 batches.
        for _ in 0..5 {
            let b = it.next_batch();
            assert_eq!(b.labeled.len(), 8);
            assert_eq!(b.pairs.len(), 56);
            for (idx, _, _) in &b.labeled {
                assert!(seen.insert(*idx), "index {idx} repeated within an epoch");
            }
        }
        assert_eq!(seen.len(), 40);
    }

    #[test]
    fn batch_iterator_deterministic_per_train_seed() {
        let ds = gen_blobs(300, 10, 0.1, 5).unwrap();
        let fold = sample_fold_balanced(&ds, 4, 0, 0.2).unwrap();
        let collect = |seed: u64| {
            let mut it = batch_iterator(&fold, &ds, 4, 2, seed).unwrap();
            (0..10).map(|_| it.next_batch()).collect::<Vec<_>>()
        };
        let a = collect(1);
        let b = collect(1);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.labeled, y.labeled);
            assert_eq!(x.pairs, y.pairs);
        }
        let c = collect(2);
        assert!(a.iter().zip(&c).any(|(x, y)| x.pairs != y.pairs));
    }

    #[test]
    fn fold_json_round_trip() {
        let ds = gen_blobs(500, 10, 0.1, 5).unwrap();
        let fold = sample_fold_balanced(&ds, 4, 7, 0.2).unwrap();
        let fold = apply_imbalance(&fold, &ds, 13, 0.6, None).unwrap();
        let json = fold.to_json();
        let back = FoldSpec::from_json(&json).unwrap();
        assert_eq!(fold, back);
        assert!(FoldSpec::from_json("{\"nonsense\":true}").is_err());
    }

    #[test]
    fn test_split_is_fold_seed_independent() {
        let ds = gen_blobs(500, 10, 0.1, 5).unwrap();
        let a = sample_fold_balanced(&ds, 4, 0, 0.2).unwrap();
        let b = sample_fold_balanced(&ds, 4, 99, 0.2).unwrap();
        assert_eq!(a.test, b.test);
    }
}
