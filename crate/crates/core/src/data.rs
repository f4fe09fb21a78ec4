//! Datasets, the authentic/synthetic half split and client partitioning.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_RECORD: usize = 3073;
const CIFAR10_CLASSES: u8 = 10;
const MAX_DIRICHLET_DRAWS: usize = 100;

/// A `C x H x W` image with pixels in `[0, 1]`. `id` is the sample identity
/// used for disjointness checks and is unique within a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: u64,
    pub pixels: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub authentic: Vec<LabeledImage>,
    pub synthetic: Vec<LabeledImage>,
}

/// Which samples each client holds, as indices into the partitioned pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub num_clients: usize,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub assignments: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn apply(&self, pool: &[LabeledImage]) -> Vec<Vec<LabeledImage>> {
        self.assignments
            .iter()
            .map(|idx| idx.iter().map(|&i| pool[i].clone()).collect())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }
}

/// Reads CIFAR-10 binary records: one label byte followed by 3072 pixel
/// bytes holding the R, G and B planes of a 32x32 image. `first_id` is the
/// identity given to the first record.
pub fn load_cifar10_binary(path: impl AsRef<Path>, first_id: u64) -> Result<Vec<LabeledImage>> {
    let bytes = std::fs::read(path)?;
    parse_cifar10(&bytes, first_id)
}

pub fn parse_cifar10(bytes: &[u8], first_id: u64) -> Result<Vec<LabeledImage>> {
    if bytes.len() % CIFAR10_RECORD != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR10_RECORD}-byte records",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR10_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0];
            if label >= CIFAR10_CLASSES {
                return Err(Error::Format(format!("record {i} has label byte {label}")));
            }
            let pixels = rec[1..].iter().map(|&b| f64::from(b) / 255.0).collect();
            Ok(LabeledImage {
                id: first_id + i as u64,
                pixels: Tensor::new(vec![3, 32, 32], pixels)?,
                label: usize::from(label),
            })
        })
        .collect()
}

/// Knobs of the synthetic "Gaussian blob" image generator.
///
/// Every class owns a smooth prototype pattern; a sample is
/// `0.5 + class_strength * prototype + individual_strength * own_pattern + noise * N(0, 1)`
/// clamped to `[0, 1]`. The per-sample pattern keeps images of one class
/// visibly distinct from each other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    pub class_strength: f64,
    pub individual_strength: f64,
    pub noise: f64,
    pub seed: u64,
}

impl ToyConfig {
    pub fn new(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        Self {
            num_classes,
            per_class,
            size,
            channels: 3,
            class_strength: 0.3,
            individual_strength: 0.3,
            noise: 0.05,
            seed,
        }
    }

    pub fn generate(&self) -> Result<Vec<LabeledImage>> {
        if self.size < 8 {
            return Err(Error::InvalidArgument(format!("toy image size must be at least 8, got {}", self.size)));
        }
        if self.num_classes == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument("toy dataset needs classes and channels".into()));
        }
        let mut proto_rng = ChaCha20Rng::seed_from_u64(self.seed);
        let prototypes: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|_| smooth_field(&mut proto_rng, self.channels, self.size, 5))
            .collect();
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut out = Vec::with_capacity(self.num_classes * self.per_class);
        let shape = vec![self.channels, self.size, self.size];
        for i in 0..self.per_class {
            for (class, proto) in prototypes.iter().enumerate() {
                let own = smooth_field(&mut rng, self.channels, self.size, 4);
                let pixels = proto
                    .iter()
                    .zip(&own)
                    .map(|(p, o)| {
                        let n: f64 = rng.sample(StandardNormal);
                        (0.5 + self.class_strength * p + self.individual_strength * o + self.noise * n).clamp(0.0, 1.0)
                    })
                    .collect();
                out.push(LabeledImage {
                    id: (i * self.num_classes + class) as u64,
                    pixels: Tensor::new(shape.clone(), pixels)?,
                    label: class,
                });
            }
        }
        Ok(out)
    }
}

/// Sum of random anisotropic Gaussian bumps per channel, scaled into `[-1, 1]`.
fn smooth_field(rng: &mut impl Rng, channels: usize, size: usize, bumps: usize) -> Vec<f64> {
    let mut field = vec![0.0; channels * size * size];
    let s = size as f64;
    for ch in 0..channels {
        let plane = &mut field[ch * size * size..(ch + 1) * size * size];
        for _ in 0..bumps {
            let cy = rng.random_range(0.0..s);
            let cx = rng.random_range(0.0..s);
            let sy = rng.random_range(0.12..0.35) * s;
            let sx = rng.random_range(0.12..0.35) * s;
            let amp = rng.random_range(-1.0..1.0);
            for y in 0..size {
                let dy = (y as f64 - cy) / sy;
                for x in 0..size {
                    let dx = (x as f64 - cx) / sx;
                    plane[y * size + x] += amp * (-0.5 * (dy * dy + dx * dx)).exp();
                }
            }
        }
        let peak = plane.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            plane.iter_mut().for_each(|v| *v /= peak);
        }
    }
    field
}

/// `num_classes * per_class` class-separable images of size `3 x size x size`.
pub fn make_toy_dataset(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    ToyConfig::new(num_classes, per_class, size, seed).generate()
}

/// Sample indices grouped by label, in pool order.
fn by_class(pool: &[LabeledImage]) -> BTreeMap<usize, Vec<usize>> {
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        classes.entry(s.label).or_default().push(i);
    }
    classes
}

/// Deals a stratified order into `parts` groups: within every class members are
/// shuffled and handed out round-robin with a counter that carries across
/// classes, so per-class counts and totals differ by at most one.
fn stratified_deal(pool: &[LabeledImage], parts: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); parts];
    let mut next = 0;
    for (_, mut members) in by_class(pool) {
        members.shuffle(rng);
        for i in members {
            groups[next % parts].push(i);
            next += 1;
        }
    }
    groups
}

/// Stratified half split into (authentic, synthetic).
pub fn split_authentic_synthetic(pool: &[LabeledImage], seed: u64) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    if pool.len() < 2 {
        return Err(Error::InvalidArgument("need at least two samples to split".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut halves = stratified_deal(pool, 2, &mut rng);
    let synthetic = halves.pop().expect("two halves");
    let authentic = halves.pop().expect("two halves");
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| pool[i].clone()).collect();
    Ok((pick(authentic), pick(synthetic)))
}

/// Removes `per_class` samples of every class into a held-out set; returns
/// (remaining, held_out).
pub fn stratified_holdout(pool: &[LabeledImage], per_class: usize, seed: u64) -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for (_, mut members) in by_class(pool) {
        members.shuffle(&mut rng);
        let cut = per_class.min(members.len());
        held.extend(members[..cut].iter().map(|&i| pool[i].clone()));
        keep.extend(members[cut..].iter().map(|&i| pool[i].clone()));
    }
    keep.sort_by_key(|s| s.id);
    held.sort_by_key(|s| s.id);
    (keep, held)
}

/// Integer shares of `total` proportional to `weights`, by largest remainder
/// (ties go to the lower index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Non-IID split: for every class a client share vector is drawn from
/// `Dirichlet(alpha, ..., alpha)` and turned into counts by largest remainder.
/// Whole draws are repeated while some client would end up empty.
pub fn partition_dirichlet(pool: &[LabeledImage], num_clients: usize, alpha: f64, seed: u64) -> Result<PartitionPlan> {
    if num_clients < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 clients, got {num_clients}")));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if pool.len() < num_clients {
        return Err(Error::Partition(format!("{} samples cannot cover {num_clients} clients", pool.len())));
    }
    // Dirichlet(alpha, ..., alpha) as normalised Gamma(alpha, 1) draws.
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(format!("gamma: {e}")))?;
    let classes = by_class(pool);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for _ in 0..MAX_DIRICHLET_DRAWS {
        let mut assignments = vec![Vec::new(); num_clients];
        for members in classes.values() {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let mut shares: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = shares.iter().sum();
            if !(total > 0.0) {
                continue;
            }
            shares.iter_mut().for_each(|s| *s /= total);
            let counts = largest_remainder(&shares, members.len());
            let mut start = 0;
            for (client, count) in counts.into_iter().enumerate() {
                assignments[client].extend_from_slice(&members[start..start + count]);
                start += count;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return Ok(PartitionPlan { num_clients, alpha: Some(alpha), seed, assignments });
        }
    }
    Err(Error::Partition(format!("no draw in {MAX_DIRICHLET_DRAWS} attempts gave every client a sample")))
}

/// IID split with per-client class counts differing by at most one.
pub fn partition_iid(pool: &[LabeledImage], num_clients: usize, seed: u64) -> Result<PartitionPlan> {
    if num_clients < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 clients, got {num_clients}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut assignments = stratified_deal(pool, num_clients, &mut rng);
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(PartitionPlan { num_clients, alpha: None, seed, assignments })
}

/// Per-class sample counts of a dataset, indexed by label.
pub fn class_histogram(samples: &[LabeledImage], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for s in samples {
        h[s.label] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; CIFAR10_RECORD];
        r[0] = label;
        r
    }

    #[test]
    fn cifar_records_parse() {
        let mut bytes = record(3, 0);
        bytes.extend(record(9, 255));
        bytes[1 + 1024] = 128; // first green pixel of record 0
        let imgs = parse_cifar10(&bytes, 100).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!((imgs[0].label, imgs[1].label), (3, 9));
        assert_eq!((imgs[0].id, imgs[1].id), (100, 101));
        assert_eq!(imgs[0].pixels.shape(), &[3, 32, 32]);
        assert_eq!(imgs[0].pixels.values()[1024], 128.0 / 255.0);
        assert!(imgs[1].pixels.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cifar_rejects_truncation_and_bad_labels() {
        assert!(matches!(parse_cifar10(&vec![0u8; 3072], 0), Err(Error::Format(_))));
        assert!(matches!(parse_cifar10(&record(10, 0), 0), Err(Error::Format(_))));
    }

    #[test]
    fn cifar_reads_from_disk() {
        let dir = std::env::temp_dir().join(format!("ifl-cifar-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("batch.bin");
        let mut bytes = record(1, 10);
        bytes.extend(record(2, 20));
        std::fs::write(&path, bytes).unwrap();
        let imgs = load_cifar10_binary(&path, 0).unwrap();
        assert_eq!(imgs.iter().map(|i| i.label).collect::<Vec<_>>(), vec![1, 2]);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn toy_counts_and_determinism() {
        let a = make_toy_dataset(4, 25, 8, 5).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(class_histogram(&a, 4), vec![25; 4]);
        let b = make_toy_dataset(4, 25, 8, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.pixels.values().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(make_toy_dataset(2, 2, 7, 0).is_err());
        let ids: BTreeSet<u64> = a.iter().map(|s| s.id).collect();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn half_split_is_stratified_and_disjoint() {
        let pool = make_toy_dataset(4, 25, 8, 1).unwrap();
        let (a, s) = split_authentic_synthetic(&pool, 3).unwrap();
        assert_eq!((a.len(), s.len()), (50, 50));
        let ia: BTreeSet<u64> = a.iter().map(|x| x.id).collect();
        let is: BTreeSet<u64> = s.iter().map(|x| x.id).collect();
        assert!(ia.is_disjoint(&is));
        let all: BTreeSet<u64> = ia.union(&is).copied().collect();
        assert_eq!(all, pool.iter().map(|x| x.id).collect());
        for (ha, hs) in class_histogram(&a, 4).into_iter().zip(class_histogram(&s, 4)) {
            assert!(ha.abs_diff(hs) <= 1);
        }
    }

    #[test]
    fn iid_partition_balanced() {
        let pool = make_toy_dataset(3, 30, 8, 2).unwrap();
        let plan = partition_iid(&pool, 3, 4).unwrap();
        assert_eq!(plan.sizes(), vec![30, 30, 30]);
        let parts = plan.apply(&pool);
        for c in 0..3 {
            let counts: Vec<usize> = parts.iter().map(|p| class_histogram(p, 3)[c]).collect();
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn largest_remainder_preserves_total() {
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 10), vec![5, 3, 2]);
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.0, 1.0], 7), vec![0, 7]);
    }

    #[test]
    fn dirichlet_argument_errors() {
        let pool = make_toy_dataset(2, 5, 8, 0).unwrap();
        assert!(partition_dirichlet(&pool, 1, 0.5, 0).is_err());
        assert!(partition_dirichlet(&pool, 3, 0.0, 0).is_err());
        assert!(partition_dirichlet(&pool[..2], 3, 0.5, 0).is_err());
    }
}
