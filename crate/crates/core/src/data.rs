//! Datasets, ingestion, and non-IID partitioning.
//!
//! Participants hold disjoint shards of one training set. Shards are drawn
//! with a two-level Dirichlet scheme: shard sizes from Dirichlet(lambda) over
//! participants, then each shard's class mix from Dirichlet(lambda) over
//! classes, realized as a multinomial demand matrix that is reconciled
//! against the actual per-class sample pools before any sample is assigned.
//! Reconciling demand up front keeps the allocation independent of
//! participant order — no shard can drain a class pool just by being
//! processed first. Small lambda yields heavily skewed shards, large lambda
//! approaches IID.

use crate::error::{Result, SimError};
use crate::seeds::rng_for;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead};
use std::path::Path;

/// In-memory labeled dataset. Features are row vectors; labels are class
/// indices in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(SimError::DimensionMismatch(format!(
                "{} feature rows vs {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(SimError::Ingestion(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let dim = features.first().map(|r| r.len()).unwrap_or(0);
        if features.iter().any(|r| r.len() != dim) {
            return Err(SimError::DimensionMismatch("ragged feature rows".into()));
        }
        Ok(Dataset { features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.first().map(|r| r.len()).unwrap_or(0)
    }

    /// Carve off the first `n` samples as one dataset and the rest as
    /// another, e.g. a train/test split of a freshly generated pool.
    pub fn split_at(mut self, n: usize) -> Result<(Dataset, Dataset)> {
        if n > self.len() {
            return Err(SimError::Config(format!(
                "cannot split {} samples at {n}",
                self.len()
            )));
        }
        let tail_f = self.features.split_off(n);
        let tail_y = self.labels.split_off(n);
        let classes = self.num_classes;
        Ok((
            Dataset { features: self.features, labels: self.labels, num_classes: classes },
            Dataset { features: tail_f, labels: tail_y, num_classes: classes },
        ))
    }
}

/// One participant's slice of the training set, by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataShard {
    pub owner: usize,
    pub indices: Vec<usize>,
}

impl DataShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Materialize the shard's rows (cloned) in index order.
    pub fn materialize(&self, data: &Dataset) -> (Vec<Vec<f64>>, Vec<usize>) {
        let features = self.indices.iter().map(|&i| data.features[i].clone()).collect();
        let labels = self.indices.iter().map(|&i| data.labels[i]).collect();
        (features, labels)
    }
}

/// Synthetic benchmark: isotropic unit-variance Gaussian blobs with
/// orthogonal, equidistant class centers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Pairwise distance between any two class centers.
    pub separation: f64,
    pub seed: u64,
}

/// Generate Gaussian blobs. Centers are mutually orthogonal with norm
/// `separation / sqrt(2)`, so every pair sits exactly `separation` apart;
/// labels are uniform and features add unit isotropic noise to the center.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.num_classes < 2 || cfg.input_dim < cfg.num_classes {
        return Err(SimError::Config(format!(
            "need input_dim >= num_classes >= 2 for orthogonal centers, got {} and {}",
            cfg.input_dim, cfg.num_classes
        )));
    }
    if cfg.num_samples == 0 || !cfg.separation.is_finite() || cfg.separation <= 0.0 {
        return Err(SimError::Config("num_samples and separation must be positive".into()));
    }
    let mut rng = rng_for("synthetic-data", &[cfg.seed]);
    let centers = orthogonal_centers(&mut rng, cfg.num_classes, cfg.input_dim, cfg.separation)?;
    let mut features = Vec::with_capacity(cfg.num_samples);
    let mut labels = Vec::with_capacity(cfg.num_samples);
    for _ in 0..cfg.num_samples {
        let y = rng.gen_range(0..cfg.num_classes);
        let mut x = centers[y].clone();
        for v in x.iter_mut() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *v += noise;
        }
        features.push(x);
        labels.push(y);
    }
    Dataset::new(features, labels, cfg.num_classes)
}

/// Gram-Schmidt on Gaussian draws: orthonormal rows scaled to sep/sqrt(2).
fn orthogonal_centers(
    rng: &mut ChaCha20Rng,
    classes: usize,
    dim: usize,
    separation: f64,
) -> Result<Vec<Vec<f64>>> {
    let scale = separation / 2.0f64.sqrt();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for u in &centers {
            let dot: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            // u already has norm `scale`
            let coef = dot / (scale * scale);
            for (vi, ui) in v.iter_mut().zip(u.iter()) {
                *vi -= coef * ui;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return Err(SimError::Config("degenerate center draw".into()));
        }
        for vi in v.iter_mut() {
            *vi *= scale / norm;
        }
        centers.push(v);
    }
    Ok(centers)
}

/// Partition parameters for the two-level Dirichlet scheme.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub num_shards: usize,
    /// Dirichlet concentration; ~0.1 is strongly non-IID, >=100 is near-IID.
    pub lambda: f64,
    pub min_shard: usize,
    pub seed: u64,
}

/// Partition `data` into disjoint shards. Shards hold at least `min_shard`
/// samples each; a few samples may stay unassigned when rounding leaves
/// leftovers. See the module docs for the scheme.
pub fn partition(data: &Dataset, cfg: &PartitionConfig) -> Result<Vec<DataShard>> {
    let n = data.len();
    let p = cfg.num_shards;
    if p == 0 {
        return Err(SimError::Config("num_shards must be positive".into()));
    }
    if !(cfg.lambda.is_finite() && cfg.lambda > 0.0) {
        return Err(SimError::Config(format!("lambda must be positive, got {}", cfg.lambda)));
    }
    if p * cfg.min_shard > n {
        return Err(SimError::Config(format!(
            "{p} shards x min {} samples exceeds the {n} available",
            cfg.min_shard
        )));
    }
    let c = data.num_classes;
    let mut rng = rng_for("partition", &[cfg.seed]);

    // Target shard sizes: Dirichlet mass rounded, floored at min_shard, then
    // trimmed from the largest shard until the total fits.
    let q = dirichlet(&mut rng, cfg.lambda, p);
    let mut sizes: Vec<usize> =
        q.iter().map(|&qi| ((qi * n as f64).round() as usize).max(cfg.min_shard)).collect();
    while sizes.iter().sum::<usize>() > n {
        let arg = argmax_first(&sizes);
        sizes[arg] -= 1;
    }

    // Shuffled per-class index pools.
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in data.labels.iter().enumerate() {
        pools[y].push(i);
    }
    for pool in pools.iter_mut() {
        shuffle(pool, &mut rng);
    }

    // Demand matrix: each shard asks for a multinomial class split of its
    // target size, drawn from its own Dirichlet class mix.
    let mut demand = vec![vec![0usize; c]; p];
    for (i, row) in demand.iter_mut().enumerate() {
        let mix = dirichlet(&mut rng, cfg.lambda, c);
        *row = multinomial(&mut rng, sizes[i], &mix);
    }

    // Reconcile demand against each class pool: scale proportionally when a
    // class is oversubscribed, round by largest remainder.
    let mut counts = vec![vec![0usize; c]; p];
    for class in 0..c {
        let pool_n = pools[class].len();
        let total: usize = demand.iter().map(|row| row[class]).sum();
        if total == 0 {
            continue;
        }
        let ratio = 1.0f64.min(pool_n as f64 / total as f64);
        let scaled: Vec<f64> = demand.iter().map(|row| row[class] as f64 * ratio).collect();
        let floors: Vec<usize> = scaled.iter().map(|s| s.floor() as usize).collect();
        let target = pool_n.min(scaled.iter().sum::<f64>().round() as usize);
        let mut rem = target.saturating_sub(floors.iter().sum::<usize>());
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| {
            let fa = scaled[a] - floors[a] as f64;
            let fb = scaled[b] - floors[b] as f64;
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for (i, row) in counts.iter_mut().enumerate() {
            row[class] = floors[i];
        }
        for &i in &order {
            if rem == 0 {
                break;
            }
            counts[i][class] += 1;
            rem -= 1;
        }
    }

    // Hand out samples per the reconciled counts, then top up any shard still
    // short of its target from whatever pools have leftovers.
    let mut cursors = vec![0usize; c];
    let mut shards: Vec<Vec<usize>> = Vec::with_capacity(p);
    for row in &counts {
        let mut idx = Vec::new();
        for class in 0..c {
            let avail = pools[class].len() - cursors[class];
            let take = row[class].min(avail);
            idx.extend_from_slice(&pools[class][cursors[class]..cursors[class] + take]);
            cursors[class] += take;
        }
        shards.push(idx);
    }
    for (i, shard) in shards.iter_mut().enumerate() {
        for class in 0..c {
            if shard.len() >= sizes[i] {
                break;
            }
            let avail = pools[class].len() - cursors[class];
            let take = (sizes[i] - shard.len()).min(avail);
            shard.extend_from_slice(&pools[class][cursors[class]..cursors[class] + take]);
            cursors[class] += take;
        }
    }

    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(owner, indices)| DataShard { owner, indices })
        .collect())
}

/// Dirichlet(alpha * 1_k) via normalized Gamma draws.
fn dirichlet(rng: &mut ChaCha20Rng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha checked positive");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let sum: f64 = draws.iter().sum();
    for d in draws.iter_mut() {
        *d /= sum;
    }
    draws
}

/// `n` categorical draws from `probs`, tallied per category.
fn multinomial(rng: &mut ChaCha20Rng, n: usize, probs: &[f64]) -> Vec<usize> {
    let mut cumulative = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in probs {
        acc += p;
        cumulative.push(acc);
    }
    let total = acc;
    let mut counts = vec![0usize; probs.len()];
    for _ in 0..n {
        let u: f64 = rng.gen_range(0.0..total);
        let slot = cumulative.partition_point(|&edge| edge <= u).min(probs.len() - 1);
        counts[slot] += 1;
    }
    counts
}

fn argmax_first(xs: &[usize]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

fn shuffle<R: Rng>(xs: &mut [usize], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

// --- ingestion ---------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label file pair (the MNIST container format). Pixels
/// are scaled to [0, 1] by dividing by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img = BufReader::new(File::open(images_path)?);
    let magic = read_u32(&mut img)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(SimError::Ingestion(format!(
            "bad image magic 0x{magic:08x} in {}",
            images_path.display()
        )));
    }
    let n = read_u32(&mut img)? as usize;
    let rows = read_u32(&mut img)? as usize;
    let cols = read_u32(&mut img)? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    img.read_exact(&mut pixels)
        .map_err(|e| SimError::Ingestion(format!("truncated image data: {e}")))?;

    let mut lab = BufReader::new(File::open(labels_path)?);
    let magic = read_u32(&mut lab)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(SimError::Ingestion(format!(
            "bad label magic 0x{magic:08x} in {}",
            labels_path.display()
        )));
    }
    let n_labels = read_u32(&mut lab)? as usize;
    if n_labels != n {
        return Err(SimError::Ingestion(format!(
            "{n} images but {n_labels} labels"
        )));
    }
    let mut raw_labels = vec![0u8; n];
    lab.read_exact(&mut raw_labels)
        .map_err(|e| SimError::Ingestion(format!("truncated label data: {e}")))?;

    let dim = rows * cols;
    let features: Vec<Vec<f64>> = pixels
        .chunks_exact(dim)
        .map(|px| px.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, num_classes)
}

fn read_u32<R: IoRead>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| SimError::Ingestion(format!("short read in IDX header: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Write a dataset as CSV: header `label,x0,x1,...`, one sample per row.
pub fn export_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let dim = data.input_dim();
    let mut header = vec!["label".to_string()];
    header.extend((0..dim).map(|d| format!("x{d}")));
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(dim + 1);
    for (x, &y) in data.features.iter().zip(data.labels.iter()) {
        record.clear();
        record.push(y.to_string());
        record.extend(x.iter().map(|v| format!("{v}")));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset written by [`export_csv`].
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for row in r.records() {
        let row = row?;
        let mut fields = row.iter();
        let label: usize = fields
            .next()
            .ok_or_else(|| SimError::Ingestion("empty CSV row".into()))?
            .parse()
            .map_err(|e| SimError::Ingestion(format!("bad label: {e}")))?;
        let x: Vec<f64> = fields
            .map(|f| f.parse().map_err(|e| SimError::Ingestion(format!("bad feature: {e}"))))
            .collect::<Result<_>>()?;
        features.push(x);
        labels.push(label);
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, num_classes)
}
