//! Desk-scale datasets, augmentations and view batches.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, CclError, Result};
use crate::rng::{stream, Stream};

/// Features with ground-truth classes and the subset designated as labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Sorted, duplicate-free.
    pub labeled_indices: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return crate::error::shape_err("Dataset::new", features.nrows(), labels.len());
        }
        if n_classes < 2 {
            return param_err("a dataset needs at least two classes");
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return param_err(format!("label {bad} outside 0..{n_classes}"));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
            labeled_indices: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.n_classes];
        for &y in &self.labels {
            hist[y] += 1;
        }
        hist
    }

    /// Indices that are not labeled. Falls back to every index when the whole
    /// dataset is labeled, so unlabeled batches can still be drawn.
    pub fn unlabeled_indices(&self) -> Vec<usize> {
        let mut is_labeled = vec![false; self.len()];
        for &i in &self.labeled_indices {
            is_labeled[i] = true;
        }
        let rest: Vec<usize> = (0..self.len()).filter(|&i| !is_labeled[i]).collect();
        if rest.is_empty() {
            (0..self.len()).collect()
        } else {
            rest
        }
    }

    fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(ndarray::Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            labeled_indices: Vec::new(),
        }
    }

    /// Moves the last `per_class` samples of every class into a separate
    /// evaluation set. Labeled indices are dropped from both halves.
    pub fn holdout(&self, per_class: usize) -> Result<(Dataset, Dataset)> {
        let hist = self.class_histogram();
        if let Some(c) = hist.iter().position(|&n| n <= per_class) {
            return param_err(format!(
                "class {c} has {} samples, cannot hold out {per_class}",
                hist[c]
            ));
        }
        let mut seen = vec![0; self.n_classes];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &y) in self.labels.iter().enumerate() {
            seen[y] += 1;
            if seen[y] > hist[y] - per_class {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// CSV with header `f0..f{dim-1},label,is_labeled`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim()).map(|d| format!("f{d}")).collect();
        header.push("label".into());
        header.push("is_labeled".into());
        w.write_record(&header).map_err(csv_err)?;
        let mut is_labeled = vec![false; self.len()];
        for &i in &self.labeled_indices {
            is_labeled[i] = true;
        }
        for (i, row) in self.features.rows().into_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            rec.push(u8::from(is_labeled[i]).to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`Dataset::write_csv`]. The class count is inferred as
    /// `max(label) + 1` unless `n_classes` is given.
    pub fn read_csv<R: Read>(input: R, n_classes: Option<usize>) -> Result<Dataset> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(csv_err)?.clone();
        let dim = header.len().saturating_sub(2);
        let expected: Vec<String> = (0..dim)
            .map(|d| format!("f{d}"))
            .chain(["label".to_string(), "is_labeled".to_string()])
            .collect();
        if dim == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(CclError::Format(format!(
                "unexpected dataset header {:?}",
                header.iter().collect::<Vec<_>>()
            )));
        }
        let mut flat = Vec::new();
        let mut labels = Vec::new();
        let mut labeled = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let line = row + 2;
            for field in rec.iter().take(dim) {
                flat.push(field.parse::<f64>().map_err(|e| {
                    CclError::Format(format!("line {line}: bad feature {field:?}: {e}"))
                })?);
            }
            let label = rec[dim]
                .parse::<usize>()
                .map_err(|e| CclError::Format(format!("line {line}: bad label: {e}")))?;
            labels.push(label);
            match &rec[dim + 1] {
                "1" => labeled.push(row),
                "0" => {}
                other => {
                    return Err(CclError::Format(format!(
                        "line {line}: is_labeled must be 0 or 1, got {other:?}"
                    )))
                }
            }
        }
        let n = labels.len();
        let features = Array2::from_shape_vec((n, dim), flat)
            .map_err(|e| CclError::Format(e.to_string()))?;
        let c = n_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        let mut ds = Dataset::new(features, labels, c)?;
        ds.labeled_indices = labeled;
        Ok(ds)
    }
}

fn csv_err(e: csv::Error) -> CclError {
    CclError::Format(e.to_string())
}

/// `n_classes` isotropic Gaussian clusters with standard deviation `spread`.
/// Centers are drawn uniformly from `[-5, 5]^dim` and re-drawn while any two
/// lie closer than 4.
pub fn make_blobs(
    seed: u64,
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    spread: f64,
) -> Result<Dataset> {
    if n_classes < 2 {
        return param_err("make_blobs needs at least two classes");
    }
    if dim < 2 {
        return param_err("make_blobs needs dim >= 2");
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return param_err(format!("spread must be positive, got {spread}"));
    }
    if n_per_class == 0 {
        return param_err("n_per_class must be at least 1");
    }
    const BOX: f64 = 5.0;
    const MIN_SEP: f64 = 4.0;
    let mut rng = stream(seed, Stream::Data);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    let mut attempts = 0;
    while centers.len() < n_classes {
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-BOX..BOX)).collect();
        attempts += 1;
        let far_enough = centers.iter().all(|o| {
            let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
            d2 >= MIN_SEP * MIN_SEP
        });
        // Crowded configurations still get distinct means.
        if far_enough || attempts > 10_000 {
            centers.push(c);
        }
    }
    let n = n_per_class * n_classes;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for s in 0..n_per_class {
            let row = class * n_per_class + s;
            for d in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                features[[row, d]] = center[d] + spread * z;
            }
            labels.push(class);
        }
    }
    Dataset::new(features, labels, n_classes)
}

/// Marks `n_labeled` samples as labeled: class-stratified when
/// `n_labeled >= n_classes`, uniformly random otherwise.
pub fn split_labels(dataset: &Dataset, n_labeled: usize, seed: u64) -> Result<Dataset> {
    let n = dataset.len();
    if n_labeled == 0 || n_labeled > n {
        return param_err(format!("n_labeled must be in 1..={n}, got {n_labeled}"));
    }
    let mut rng = stream(seed, Stream::Split);
    let c = dataset.n_classes;
    let mut chosen = if n_labeled >= c {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
        for (i, &y) in dataset.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        for members in &mut by_class {
            members.shuffle(&mut rng);
        }
        let mut class_order: Vec<usize> = (0..c).collect();
        class_order.shuffle(&mut rng);
        let base = n_labeled / c;
        let extra = n_labeled % c;
        let mut chosen = Vec::with_capacity(n_labeled);
        let mut leftovers = Vec::new();
        for (rank, &class) in class_order.iter().enumerate() {
            let quota = base + usize::from(rank < extra);
            let members = &by_class[class];
            let take = quota.min(members.len());
            chosen.extend_from_slice(&members[..take]);
            leftovers.extend_from_slice(&members[take..]);
        }
        // Classes smaller than their quota: top up from whatever is left.
        if chosen.len() < n_labeled {
            leftovers.shuffle(&mut rng);
            let missing = n_labeled - chosen.len();
            chosen.extend_from_slice(&leftovers[..missing]);
        }
        chosen
    } else {
        index::sample(&mut rng, n, n_labeled).into_vec()
    };
    chosen.sort_unstable();
    let mut out = dataset.clone();
    out.labeled_indices = chosen;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub weak_noise_sigma: f64,
    pub strong_noise_sigma: f64,
    pub strong_mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_noise_sigma: 0.1,
            strong_noise_sigma: 0.5,
            strong_mask_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |s: f64| s.is_finite() && s >= 0.0;
        if !ok(self.weak_noise_sigma) || !ok(self.strong_noise_sigma) {
            return param_err("noise sigmas must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.strong_mask_prob) {
            return param_err("strong_mask_prob must lie in [0, 1]");
        }
        if self.strong_noise_sigma < self.weak_noise_sigma {
            return param_err("strong_noise_sigma must be at least weak_noise_sigma");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strength {
    Weak,
    Strong,
}

/// Weak: additive Gaussian noise. Strong: larger noise, then each coordinate
/// is zeroed independently with probability `strong_mask_prob`.
///
/// The number of draws from `rng` depends only on `x.len()` and `kind`.
pub fn augment<R: Rng + ?Sized>(
    x: ArrayView1<f64>,
    kind: Strength,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Array1<f64> {
    match kind {
        Strength::Weak => x.mapv(|v| {
            let z: f64 = rng.sample(StandardNormal);
            v + cfg.weak_noise_sigma * z
        }),
        Strength::Strong => x.mapv(|v| {
            let z: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            if u < cfg.strong_mask_prob {
                0.0
            } else {
                v + cfg.strong_noise_sigma * z
            }
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    WeakLabeled,
    WeakUnlabeled,
    StrongUnlabeled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewOrigin {
    pub source: usize,
    pub kind: ViewKind,
}

/// The per-step view universe: `B` weak labeled views, then `μB` weak
/// unlabeled views, then their `μB` strong siblings in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub views: Array2<f64>,
    pub origins: Vec<ViewOrigin>,
    /// Ground truth of the labeled views, in view order.
    pub labels: Vec<usize>,
    /// Hidden true class of every view; diagnostics only.
    pub truth: Vec<usize>,
    pub batch_size: usize,
    pub mu: usize,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.mu * self.batch_size
    }

    pub fn labeled_range(&self) -> std::ops::Range<usize> {
        0..self.batch_size
    }

    pub fn weak_unlabeled_range(&self) -> std::ops::Range<usize> {
        self.batch_size..self.batch_size + self.n_unlabeled()
    }

    pub fn strong_range(&self) -> std::ops::Range<usize> {
        let start = self.batch_size + self.n_unlabeled();
        start..start + self.n_unlabeled()
    }

    /// Index of the weakly augmented view of the same sample.
    pub fn psi(&self, v: usize) -> usize {
        if self.strong_range().contains(&v) {
            v - self.n_unlabeled()
        } else {
            v
        }
    }

    pub fn psi_map(&self) -> Vec<usize> {
        (0..self.len()).map(|v| self.psi(v)).collect()
    }

    /// Checks the structural invariants: view count, kinds per block and
    /// sibling sources.
    pub fn validate(&self) -> Result<()> {
        let n = (2 * self.mu + 1) * self.batch_size;
        if self.len() != n || self.views.nrows() != n || self.truth.len() != n {
            return Err(CclError::BatchIntegrity(format!(
                "expected {n} views, found {}",
                self.len()
            )));
        }
        if self.labels.len() != self.batch_size {
            return Err(CclError::BatchIntegrity("labels do not cover the labeled block".into()));
        }
        let blocks = [
            (self.labeled_range(), ViewKind::WeakLabeled),
            (self.weak_unlabeled_range(), ViewKind::WeakUnlabeled),
            (self.strong_range(), ViewKind::StrongUnlabeled),
        ];
        for (range, kind) in blocks {
            if let Some(v) = range.clone().find(|&v| self.origins[v].kind != kind) {
                return Err(CclError::BatchIntegrity(format!("view {v} is not {kind:?}")));
            }
        }
        for v in self.strong_range() {
            let w = self.psi(v);
            if self.origins[w].source != self.origins[v].source {
                return Err(CclError::BatchIntegrity(format!(
                    "strong view {v} and weak view {w} come from different samples"
                )));
            }
        }
        Ok(())
    }
}

fn draw_indices<R: Rng + ?Sized>(pool: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= count {
        index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Draws one training batch. Pools smaller than the request are sampled with
/// replacement.
pub fn sample_batch<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    dataset: &Dataset,
    batch_size: usize,
    mu: usize,
    cfg: &AugmentConfig,
    batch_rng: &mut R1,
    augment_rng: &mut R2,
) -> Result<ViewBatch> {
    if batch_size == 0 || mu == 0 {
        return param_err("batch_size and mu must be at least 1");
    }
    if dataset.labeled_indices.is_empty() {
        return param_err("dataset has no labeled samples");
    }
    cfg.validate()?;
    let labeled = draw_indices(&dataset.labeled_indices, batch_size, batch_rng);
    let unlabeled = draw_indices(&dataset.unlabeled_indices(), mu * batch_size, batch_rng);

    let n = (2 * mu + 1) * batch_size;
    let mut views = Array2::zeros((n, dataset.dim()));
    let mut origins = Vec::with_capacity(n);
    let blocks = [
        (&labeled, ViewKind::WeakLabeled, Strength::Weak),
        (&unlabeled, ViewKind::WeakUnlabeled, Strength::Weak),
        (&unlabeled, ViewKind::StrongUnlabeled, Strength::Strong),
    ];
    for (sources, kind, strength) in blocks {
        for &s in sources.iter() {
            let row = origins.len();
            let x = augment(dataset.features.row(s), strength, cfg, augment_rng);
            views.row_mut(row).assign(&x);
            origins.push(ViewOrigin { source: s, kind });
        }
    }
    let truth = origins.iter().map(|o| dataset.labels[o.source]).collect();
    let labels = labeled.iter().map(|&s| dataset.labels[s]).collect();
    Ok(ViewBatch {
        views,
        origins,
        labels,
        truth,
        batch_size,
        mu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blobs_shape_and_histogram() {
        let ds = make_blobs(0, 100, 3, 2, 0.5).unwrap();
        assert_eq!(ds.len(), 300);
        assert_eq!(ds.features.dim(), (300, 2));
        assert_eq!(ds.class_histogram(), vec![100, 100, 100]);
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = make_blobs(0, 100, 3, 2, 0.5).unwrap();
        let b = make_blobs(0, 100, 3, 2, 0.5).unwrap();
        let bits = |d: &Dataset| d.features.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels, b.labels);
        let c = make_blobs(1, 100, 3, 2, 0.5).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn blobs_reject_bad_sizes() {
        assert!(make_blobs(0, 10, 1, 2, 0.5).is_err());
        assert!(make_blobs(0, 10, 3, 1, 0.5).is_err());
        assert!(make_blobs(0, 10, 3, 2, 0.0).is_err());
        assert!(make_blobs(0, 10, 3, 2, f64::NAN).is_err());
    }

    #[test]
    fn stratified_split() {
        let ds = make_blobs(0, 100, 3, 2, 0.5).unwrap();
        let s = split_labels(&ds, 12, 0).unwrap();
        assert_eq!(s.labeled_indices.len(), 12);
        let mut per_class = [0; 3];
        for &i in &s.labeled_indices {
            per_class[s.labels[i]] += 1;
        }
        assert_eq!(per_class, [4, 4, 4]);
        let mut dedup = s.labeled_indices.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 12);
    }

    #[test]
    fn full_and_scarce_splits() {
        let ds = make_blobs(0, 100, 3, 2, 0.5).unwrap();
        let all = split_labels(&ds, 300, 0).unwrap();
        assert_eq!(all.labeled_indices, (0..300).collect::<Vec<_>>());
        let scarce = split_labels(&ds, 2, 0).unwrap();
        assert_eq!(scarce.labeled_indices.len(), 2);
        assert!(split_labels(&ds, 0, 0).is_err());
        assert!(split_labels(&ds, 301, 0).is_err());
    }

    #[test]
    fn augment_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = array![1.0, -2.0, 3.5];
        let weak = AugmentConfig {
            weak_noise_sigma: 0.0,
            strong_noise_sigma: 0.0,
            strong_mask_prob: 1.0,
        };
        assert_eq!(augment(x.view(), Strength::Weak, &weak, &mut rng), x);
        assert_eq!(
            augment(x.view(), Strength::Strong, &weak, &mut rng),
            Array1::<f64>::zeros(3)
        );
        let cfg = AugmentConfig {
            weak_noise_sigma: 0.05,
            strong_noise_sigma: 0.1,
            strong_mask_prob: 0.2,
        };
        let a = augment(x.view(), Strength::Strong, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(x.view(), Strength::Strong, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn augment_config_ordering() {
        let bad = AugmentConfig {
            weak_noise_sigma: 0.3,
            strong_noise_sigma: 0.1,
            strong_mask_prob: 0.0,
        };
        assert!(bad.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }

    fn batch(b: usize, mu: usize) -> ViewBatch {
        let ds = split_labels(&make_blobs(0, 100, 3, 2, 0.5).unwrap(), 12, 0).unwrap();
        let mut br = stream(0, Stream::Batch);
        let mut ar = stream(0, Stream::Augment);
        sample_batch(&ds, b, mu, &AugmentConfig::default(), &mut br, &mut ar).unwrap()
    }

    #[test]
    fn batch_sizes() {
        let vb = batch(4, 3);
        assert_eq!(vb.len(), 28);
        vb.validate().unwrap();
        // Labeled pool of 12 < 64 forces sampling with replacement.
        let big = batch(64, 7);
        assert_eq!(big.len(), 960);
        big.validate().unwrap();
    }

    #[test]
    fn psi_siblings_are_unique_and_idempotent() {
        let vb = batch(4, 3);
        for v in 0..vb.len() {
            assert_eq!(vb.psi(vb.psi(v)), vb.psi(v));
        }
        for v in vb.strong_range() {
            let siblings: Vec<usize> = vb
                .weak_unlabeled_range()
                .filter(|&w| vb.origins[w].source == vb.origins[v].source)
                .collect();
            assert_eq!(siblings, vec![vb.psi(v)]);
        }
    }

    #[test]
    fn batches_are_reproducible() {
        assert_eq!(batch(4, 3), batch(4, 3));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = split_labels(&make_blobs(5, 7, 3, 3, 1.3).unwrap(), 5, 1).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("f0,f1,f2,label,is_labeled\n"));
        let back = Dataset::read_csv(&buf[..], Some(3)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn holdout_takes_tail_of_each_class() {
        let ds = make_blobs(0, 10, 3, 2, 0.5).unwrap();
        let (train, test) = ds.holdout(4).unwrap();
        assert_eq!(train.class_histogram(), vec![6, 6, 6]);
        assert_eq!(test.class_histogram(), vec![4, 4, 4]);
        assert!(ds.holdout(10).is_err());
    }
}
