//! Synthetic non-IID client data.
//!
//! A pool of Gaussian clusters (one per class) is split across clients by a
//! label-skewing partitioner, every client's features are rotated by the
//! angle of its latent domain, and each client's samples are split into
//! stratified train and test sets.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Matrix};

const MAX_DIRICHLET_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "defaults::num_classes")]
    pub num_classes: usize,
    /// Must be even so features can be rotated pairwise.
    #[serde(default = "defaults::feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "defaults::samples_per_class")]
    pub samples_per_class: usize,
    /// Distance between neighbouring class means.
    #[serde(default = "defaults::cluster_separation")]
    pub cluster_separation: f64,
    #[serde(default = "defaults::noise_std")]
    pub noise_std: f64,
}

mod defaults {
    pub fn num_classes() -> usize {
        10
    }
    pub fn feature_dim() -> usize {
        4
    }
    pub fn samples_per_class() -> usize {
        100
    }
    pub fn cluster_separation() -> f64 {
        1.0
    }
    pub fn noise_std() -> f64 {
        0.5
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: defaults::num_classes(),
            feature_dim: defaults::feature_dim(),
            samples_per_class: defaults::samples_per_class(),
            cluster_separation: defaults::cluster_separation(),
            noise_std: defaults::noise_std(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("data.num_classes", "must be at least 2"));
        }
        if self.feature_dim < 2 || !self.feature_dim.is_multiple_of(2) {
            return Err(Error::config("data.feature_dim", "must be an even integer >= 2"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("data.samples_per_class", "must be positive"));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return Err(Error::config("data.cluster_separation", "must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("data.noise_std", "must be non-negative"));
        }
        Ok(())
    }

    /// Mean of class `c`: vertex `c` of a regular polygon in the first two
    /// coordinates whose neighbouring vertices are `cluster_separation` apart.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let k = self.num_classes as f64;
        let radius = self.cluster_separation / (2.0 * (std::f64::consts::PI / k).sin());
        let angle = 2.0 * std::f64::consts::PI * class as f64 / k;
        let mut mean = vec![0.0; self.feature_dim];
        mean[0] = radius * angle.cos();
        mean[1] = radius * angle.sin();
        mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Dirichlet { alpha: f64 },
    Pathological { classes_per_client: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub num_clients: usize,
    /// Clockwise rotation, in degrees, of each latent domain.
    #[serde(default = "default_angles")]
    pub domain_angles: Vec<f64>,
    /// Domain index of every client. `None` assigns contiguous equal blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_domain_map: Option<Vec<usize>>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_angles() -> Vec<f64> {
    vec![0.0]
}

fn default_test_fraction() -> f64 {
    0.2
}

impl PartitionPlan {
    pub fn new(scheme: PartitionScheme, num_clients: usize) -> Self {
        PartitionPlan {
            scheme,
            num_clients,
            domain_angles: default_angles(),
            client_domain_map: None,
            test_fraction: default_test_fraction(),
        }
    }

    /// Domain of every client, resolving the contiguous-block default.
    pub fn domains(&self) -> Vec<usize> {
        match &self.client_domain_map {
            Some(map) => map.clone(),
            None => {
                let g = self.domain_angles.len().max(1);
                (0..self.num_clients).map(|i| i * g / self.num_clients).collect()
            }
        }
    }

    pub fn validate(&self, spec: &SyntheticSpec) -> Result<()> {
        if self.num_clients < 1 {
            return Err(Error::config("data.num_clients", "must be positive"));
        }
        match self.scheme {
            PartitionScheme::Dirichlet { alpha } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::config("data.scheme.dirichlet.alpha", "must be positive"));
                }
            }
            PartitionScheme::Pathological { classes_per_client } => {
                if classes_per_client == 0 || classes_per_client > spec.num_classes {
                    return Err(Error::config(
                        "data.scheme.pathological.classes_per_client",
                        format!("must be in 1..={}", spec.num_classes),
                    ));
                }
            }
        }
        if self.domain_angles.is_empty() {
            return Err(Error::config("data.domain_angles", "needs at least one domain"));
        }
        if self.domain_angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::config("data.domain_angles", "angles must be finite"));
        }
        if let Some(map) = &self.client_domain_map {
            if map.len() != self.num_clients {
                return Err(Error::config(
                    "data.client_domain_map",
                    format!("has {} entries for {} clients", map.len(), self.num_clients),
                ));
            }
            if let Some(bad) = map.iter().find(|&&d| d >= self.domain_angles.len()) {
                return Err(Error::config(
                    "data.client_domain_map",
                    format!("domain {bad} has no angle"),
                ));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("data.test_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Batch,
    pub test: Batch,
    pub domain_id: usize,
    /// Per-class sample counts over `train`.
    pub label_histogram: Vec<usize>,
    /// Pool indices backing `train` and `test`.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl ClientDataset {
    pub fn label_set(&self) -> BTreeSet<usize> {
        self.label_histogram
            .iter()
            .enumerate()
            .filter(|&(_, &n)| n > 0)
            .map(|(c, _)| c)
            .collect()
    }
}

pub fn generate_base_pool<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Batch> {
    spec.validate()?;
    let n = spec.num_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.feature_dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.num_classes {
        let mean = spec.class_mean(class);
        for _ in 0..spec.samples_per_class {
            for &m in &mean {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + spec.noise_std * z);
            }
            labels.push(class);
        }
    }
    Batch::new(Matrix::from_vec(n, spec.feature_dim, data)?, labels)
}

fn indices_by_class(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

fn num_classes_of(pool: &Batch) -> usize {
    pool.labels.iter().max().map_or(0, |&m| m + 1)
}

/// Integer counts summing to `total` with `counts[k] ~ total * weights[k]`.
/// Remainders go to the largest fractional parts, lower index first on ties.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(format!("gamma({alpha}): {e}")))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return Ok(draws.into_iter().map(|g| g / sum).collect());
        }
    }
}

/// Per class, split that class's samples across clients by proportions drawn
/// from a symmetric Dirichlet(alpha). Redraws when a client ends up empty.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    pool: &Batch,
    num_clients: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::invalid("alpha must be positive"));
    }
    if num_clients == 0 || pool.is_empty() {
        return Err(Error::invalid("need at least one client and a non-empty pool"));
    }
    let by_class = indices_by_class(&pool.labels, num_classes_of(pool));
    for _ in 0..MAX_DIRICHLET_REDRAWS {
        let mut parts = vec![Vec::new(); num_clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let props = sample_dirichlet(alpha, num_clients, rng)?;
            let counts = largest_remainder(&props, members.len());
            let mut shuffled = members.clone();
            shuffled.shuffle(rng);
            let mut start = 0;
            for (client, &count) in counts.iter().enumerate() {
                parts[client].extend_from_slice(&shuffled[start..start + count]);
                start += count;
            }
        }
        if parts.iter().all(|p| !p.is_empty()) {
            for p in &mut parts {
                p.sort_unstable();
            }
            return Ok(parts);
        }
    }
    Err(Error::InfeasiblePartition(format!(
        "some client stayed empty after {MAX_DIRICHLET_REDRAWS} Dirichlet draws \
         (alpha={alpha}, clients={num_clients}, samples={})",
        pool.len()
    )))
}

/// Give every client `classes_per_client` classes by walking a shuffled class
/// list cyclically, then split each class evenly among the clients holding it
/// (remainder to the lowest client ids).
pub fn partition_pathological<R: Rng + ?Sized>(
    pool: &Batch,
    num_clients: usize,
    classes_per_client: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let num_classes = num_classes_of(pool);
    if classes_per_client == 0 || classes_per_client > num_classes {
        return Err(Error::invalid(format!(
            "classes_per_client must be in 1..={num_classes}"
        )));
    }
    if num_clients * classes_per_client < num_classes {
        return Err(Error::InfeasiblePartition(format!(
            "{num_clients} clients x {classes_per_client} classes cannot cover {num_classes} classes"
        )));
    }
    let mut classes: Vec<usize> = (0..num_classes).collect();
    classes.shuffle(rng);
    let mut holders = vec![Vec::new(); num_classes];
    for client in 0..num_clients {
        for m in 0..classes_per_client {
            let class = classes[(client * classes_per_client + m) % num_classes];
            holders[class].push(client);
        }
    }
    let by_class = indices_by_class(&pool.labels, num_classes);
    let mut parts = vec![Vec::new(); num_clients];
    for (class, members) in by_class.iter().enumerate() {
        let owners = &holders[class];
        let mut shuffled = members.clone();
        shuffled.shuffle(rng);
        let base = shuffled.len() / owners.len();
        let extra = shuffled.len() % owners.len();
        let mut start = 0;
        for (k, &client) in owners.iter().enumerate() {
            let take = base + usize::from(k < extra);
            parts[client].extend_from_slice(&shuffled[start..start + take]);
            start += take;
        }
    }
    if let Some(empty) = parts.iter().position(Vec::is_empty) {
        return Err(Error::InfeasiblePartition(format!(
            "client {empty} received no samples"
        )));
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Rotate every coordinate pair `(2k, 2k+1)` clockwise by `angle_degrees`.
pub fn apply_domain_rotation(features: &Matrix, angle_degrees: f64) -> Result<Matrix> {
    if !features.cols().is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "rotation needs an even feature dimension, got {}",
            features.cols()
        )));
    }
    let (sin, cos) = angle_degrees.to_radians().sin_cos();
    let mut out = features.clone();
    for r in 0..out.rows() {
        for pair in out.row_mut(r).chunks_exact_mut(2) {
            let (x, y) = (pair[0], pair[1]);
            pair[0] = x * cos + y * sin;
            pair[1] = -x * sin + y * cos;
        }
    }
    Ok(out)
}

/// Split one client's indices per class into (train, test) with
/// `round(test_fraction * n)` test samples overall, distributed over classes
/// by largest remainder. At least one sample lands on each side.
fn stratified_split<R: Rng + ?Sized>(
    indices: &[usize],
    labels: &[usize],
    num_classes: usize,
    test_fraction: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = indices.len();
    if n < 2 {
        return Err(Error::InfeasiblePartition(format!(
            "a client with {n} sample(s) cannot be split into train and test"
        )));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut by_class = vec![Vec::new(); num_classes];
    for &i in indices {
        by_class[labels[i]].push(i);
    }
    let sizes: Vec<f64> = by_class.iter().map(|m| m.len() as f64).collect();
    let test_counts = largest_remainder(&sizes, n_test);
    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (members, &k) in by_class.iter_mut().zip(&test_counts) {
        members.shuffle(rng);
        test.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn partition<R: Rng + ?Sized>(pool: &Batch, plan: &PartitionPlan, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    match plan.scheme {
        PartitionScheme::Dirichlet { alpha } => partition_dirichlet(pool, plan.num_clients, alpha, rng),
        PartitionScheme::Pathological { classes_per_client } => {
            partition_pathological(pool, plan.num_clients, classes_per_client, rng)
        }
    }
}

/// Partition, rotate per domain and split into per-client train/test sets.
pub fn build_clients<R: Rng + ?Sized>(pool: &Batch, plan: &PartitionPlan, rng: &mut R) -> Result<Vec<ClientDataset>> {
    let num_classes = num_classes_of(pool);
    let parts = partition(pool, plan, rng)?;
    let domains = plan.domains();
    parts
        .iter()
        .enumerate()
        .map(|(client_id, indices)| {
            let domain_id = domains[client_id];
            let angle = *plan
                .domain_angles
                .get(domain_id)
                .ok_or_else(|| Error::config("data.client_domain_map", format!("domain {domain_id} has no angle")))?;
            let (train_indices, test_indices) =
                stratified_split(indices, &pool.labels, num_classes, plan.test_fraction, rng)?;
            let rotate = |idx: &[usize]| -> Result<Batch> {
                let b = pool.select(idx);
                Batch::new(apply_domain_rotation(&b.features, angle)?, b.labels)
            };
            let train = rotate(&train_indices)?;
            let test = rotate(&test_indices)?;
            let mut label_histogram = vec![0; num_classes];
            for &y in &train.labels {
                label_histogram[y] += 1;
            }
            Ok(ClientDataset {
                client_id,
                train,
                test,
                domain_id,
                label_histogram,
                train_indices,
                test_indices,
            })
        })
        .collect()
}

/// Classes present in every client's training set.
pub fn label_overlap(clients: &[ClientDataset]) -> BTreeSet<usize> {
    let mut sets = clients.iter().map(ClientDataset::label_set);
    let first = sets.next().unwrap_or_default();
    sets.fold(first, |acc, s| acc.intersection(&s).copied().collect())
}

/// Natural-log Shannon entropy of a histogram divided by `ln(len)`.
pub fn normalized_entropy(histogram: &[usize]) -> f64 {
    let total: usize = histogram.iter().sum();
    if total == 0 || histogram.len() < 2 {
        return 0.0;
    }
    let h: f64 = histogram
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h / (histogram.len() as f64).ln()
}

/// `1 - mean normalized label entropy`: 0 for uniform clients, 1 when every
/// client holds a single class.
pub fn heterogeneity_score(clients: &[ClientDataset]) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::invalid("no clients"));
    }
    let mean = clients
        .iter()
        .map(|c| normalized_entropy(&c.label_histogram))
        .sum::<f64>()
        / clients.len() as f64;
    Ok(1.0 - mean)
}

fn write_batch_csv(path: &Path, batch: &Batch) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (0..batch.features.cols())
        .map(|k| format!("feature_{k}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (r, y) in batch.labels.iter().enumerate() {
        for v in batch.features.row(r) {
            write!(out, "{v},")?;
        }
        writeln!(out, "{y}")?;
    }
    out.flush()?;
    Ok(())
}

/// Write `client_<id>_train.csv` and `client_<id>_test.csv` per client.
pub fn export_clients(clients: &[ClientDataset], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for c in clients {
        write_batch_csv(&dir.join(format!("client_{}_train.csv", c.client_id)), &c.train)?;
        write_batch_csv(&dir.join(format!("client_{}_test.csv", c.client_id)), &c.test)?;
    }
    Ok(())
}
