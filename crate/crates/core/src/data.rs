//! Synthetic datasets, CSV loading, global splits and client partitioning.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::rng::{stream, tag};
use crate::{Error, Result};

/// Labeled samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_histogram(&self.labels, self.num_classes)
    }
}

pub fn class_histogram(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for &l in labels {
        h[l] += 1;
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Gaussian clusters around random centroids.
    Blobs,
    /// Interleaved 2-D spiral arms; remaining dimensions are pure noise.
    Spiral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub noise: f64,
    /// Blobs only: number of centroids per class.
    #[serde(default = "one")]
    pub clusters_per_class: usize,
}

fn one() -> usize {
    1
}

/// Generates a synthetic dataset. Labels are assigned round-robin
/// (`label_i = i mod num_classes`), so class counts differ by at most one.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.n == 0 || spec.input_dim == 0 || spec.num_classes == 0 || spec.clusters_per_class == 0 {
        return Err(Error::InvalidArgument("synthetic sizes must be positive".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise must be >= 0, got {}", spec.noise)));
    }
    if spec.kind == SyntheticKind::Spiral && spec.input_dim < 2 {
        return Err(Error::InvalidArgument("spiral needs input_dim >= 2".into()));
    }
    let mut rng = stream(&[seed, tag::DATA]);
    let (n, d, k) = (spec.n, spec.input_dim, spec.num_classes);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut data = Vec::with_capacity(n * d);
    match spec.kind {
        SyntheticKind::Blobs => {
            let centroids: Vec<Vec<f64>> = (0..k * spec.clusters_per_class)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            for (i, &y) in labels.iter().enumerate() {
                let cluster = (i / k) % spec.clusters_per_class;
                let c = &centroids[y * spec.clusters_per_class + cluster];
                for &v in c {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(v + spec.noise * z);
                }
            }
        }
        SyntheticKind::Spiral => {
            for &y in &labels {
                let t: f64 = rng.random_range(0.05..1.0);
                let theta = 4.0 * t + y as f64 * std::f64::consts::TAU / k as f64;
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let base = match j {
                        0 => t * theta.cos(),
                        1 => t * theta.sin(),
                        _ => 0.0,
                    };
                    data.push(base + spec.noise * z);
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, d], data)?, labels, k)
}

/// Train pool, held-out global test set and unlabeled public features.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub public: Tensor,
}

/// Shuffles once, then takes `round(n * test_fraction)` test samples,
/// `round(n * public_fraction)` public samples, and keeps the rest for
/// training. Public labels are dropped.
pub fn split_global(data: &Dataset, test_fraction: f64, public_fraction: f64, seed: u64) -> Result<GlobalSplit> {
    for (name, f) in [("test_fraction", test_fraction), ("public_fraction", public_fraction)] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {f}")));
        }
    }
    let n = data.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_public = (n as f64 * public_fraction).round() as usize;
    if n_test + n_public >= n {
        return Err(Error::InvalidArgument("split leaves no training samples".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(&[seed, tag::SPLIT]));
    let (test, rest) = idx.split_at(n_test);
    let (public, train) = rest.split_at(n_public);
    Ok(GlobalSplit {
        train: data.subset(train),
        test: data.subset(test),
        public: data.features.select_rows(public),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionMode {
    Iid,
    Dirichlet { alpha: f64 },
}

/// Splits sample indices among `num_clients` clients.
///
/// Dirichlet mode draws per-class client shares from `Dir(alpha)` and rounds
/// them with largest remainders; empty clients then take one sample each
/// from the currently largest client. Every returned list is sorted.
pub fn partition(labels: &[usize], num_classes: usize, mode: PartitionMode, num_clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if num_clients == 0 {
        return Err(Error::InvalidArgument("num_clients must be >= 1".into()));
    }
    if num_clients > n {
        return Err(Error::InvalidArgument(format!(
            "{num_clients} clients but only {n} samples"
        )));
    }
    let mut rng = stream(&[seed, tag::PARTITION]);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    match mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            for (i, s) in idx.into_iter().enumerate() {
                parts[i % num_clients].push(s);
            }
        }
        PartitionMode::Dirichlet { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
            }
            let gamma = Gamma::new(alpha, 1.0)
                .map_err(|e| Error::InvalidArgument(format!("alpha {alpha}: {e}")))?;
            for c in 0..num_classes {
                let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
                if idx.is_empty() {
                    continue;
                }
                idx.shuffle(&mut rng);
                let mut p: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = p.iter().sum();
                if total > 0.0 && total.is_finite() {
                    p.iter_mut().for_each(|v| *v /= total);
                } else {
                    p.fill(1.0 / num_clients as f64);
                }
                let counts = largest_remainder(&p, idx.len());
                let mut start = 0;
                for (k, &cnt) in counts.iter().enumerate() {
                    parts[k].extend_from_slice(&idx[start..start + cnt]);
                    start += cnt;
                }
            }
            loop {
                let Some(empty) = parts.iter().position(Vec::is_empty) else { break };
                let donor = (0..num_clients)
                    .max_by(|&a, &b| parts[a].len().cmp(&parts[b].len()).then(b.cmp(&a)))
                    .expect("at least one client");
                let moved = parts[donor].pop().expect("donor has samples");
                parts[empty].push(moved);
            }
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Integer counts summing to `total`, proportional to `shares`.
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-client class counts, one row per client.
pub fn partition_histograms(labels: &[usize], num_classes: usize, parts: &[Vec<usize>]) -> Vec<Vec<usize>> {
    parts
        .iter()
        .map(|p| {
            let ls: Vec<usize> = p.iter().map(|&i| labels[i]).collect();
            class_histogram(&ls, num_classes)
        })
        .collect()
}

/// Mean over clients of `KL(client label distribution || global)`.
pub fn mean_label_divergence(labels: &[usize], num_classes: usize, parts: &[Vec<usize>]) -> f64 {
    let global = class_histogram(labels, num_classes);
    let n = labels.len() as f64;
    let hists = partition_histograms(labels, num_classes, parts);
    let total: f64 = hists
        .iter()
        .map(|h| {
            let m: usize = h.iter().sum();
            h.iter()
                .zip(&global)
                .filter(|(&c, _)| c > 0)
                .map(|(&c, &g)| {
                    let p = c as f64 / m as f64;
                    p * (p / (g as f64 / n)).ln()
                })
                .sum::<f64>()
        })
        .sum();
    total / parts.len().max(1) as f64
}

/// Reads `f0,...,f{d-1},label` CSV. Line numbers in errors are 1-based and
/// count the header.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.len() < 2 || header.get(header.len() - 1) != Some("label") {
        return Err(parse_err(1, "header must be f0,...,f{d-1},label".into()));
    }
    let d = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != d + 1 {
            return Err(parse_err(line, format!("expected {} columns, found {}", d + 1, rec.len())));
        }
        for (j, field) in rec.iter().take(d).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("column f{j}: `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column f{j} is not finite")));
            }
            features.push(v);
        }
        let raw = rec.get(d).unwrap_or_default().trim();
        let label: usize = raw
            .parse()
            .map_err(|_| parse_err(line, format!("label `{raw}` is not a non-negative integer")))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(parse_err(1, "file contains no samples".into()));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(vec![labels.len(), d], features)?, labels, num_classes)
}

/// Writes the CSV format read by [`load_csv`]. Floats use the shortest
/// representation that parses back to the same value.
pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    let d = data.input_dim();
    let mut out = String::new();
    for j in 0..d {
        let _ = write!(out, "f{j},");
    }
    out.push_str("label\n");
    for (i, &y) in data.labels.iter().enumerate() {
        for v in data.features.row(i) {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{y}");
    }
    crate::report::write_atomic(path, out.as_bytes())
}
