//! Client-centric selection and attention-weighted multi-source aggregation.
//!
//! Every client `i` owns a local model `theta` and a client-specific model
//! `phi`. After local training the final fully-connected layer of each `phi`
//! acts as the client's fingerprint. Pairwise fingerprint distances `d` are
//! mapped to dissimilarities `u = 1 - exp(-d / sigma)`. Client `i` then
//! admits sources in ascending order of `u` while `u` stays at or below its
//! own threshold `sum_{j != i} u_ij / (2N)`, up to `n_max` sources, and its
//! next `theta` is the normalized combination of its own model and the
//! sources' models with raw weights `1 - a_j * u_ij`.
//!
//! The distance is the plain Euclidean norm (not its square).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, ParamVector, SgdOptions};

/// Tolerance for a weight map to count as normalized.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Bandwidth of the attention function.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Sigma {
    /// Median of the pairwise fingerprint distances of the current round.
    #[default]
    Median,
    Fixed(f64),
}

impl Serialize for Sigma {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Sigma::Median => s.serialize_str("median"),
            Sigma::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Sigma {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Value(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Name(n) if n == "median" => Ok(Sigma::Median),
            Raw::Name(n) => Err(serde::de::Error::custom(format!(
                "expected \"median\" or a positive number, got \"{n}\""
            ))),
            Raw::Value(v) => Ok(Sigma::Fixed(v)),
        }
    }
}

impl Sigma {
    /// Resolve to a positive bandwidth for the given pairwise distances.
    ///
    /// The median heuristic falls back to the mean of the positive distances
    /// when the median is zero, and to 1 when every distance is zero (then
    /// all scores are zero whatever the bandwidth).
    pub fn resolve(self, distances: &[f64]) -> f64 {
        match self {
            Sigma::Fixed(v) => v,
            Sigma::Median => {
                let mut sorted: Vec<f64> = distances.to_vec();
                sorted.sort_by(f64::total_cmp);
                let median = match sorted.len() {
                    0 => 0.0,
                    n if n % 2 == 1 => sorted[n / 2],
                    n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
                };
                if median > 0.0 && median.is_finite() {
                    return median;
                }
                let positive: Vec<f64> = sorted.into_iter().filter(|&d| d > 0.0).collect();
                if positive.is_empty() {
                    1.0
                } else {
                    positive.iter().sum::<f64>() / positive.len() as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedccaHyper {
    #[serde(default)]
    pub sigma: Sigma,
    #[serde(default = "hyper_defaults::n_max")]
    pub n_max: usize,
    #[serde(default = "hyper_defaults::local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "hyper_defaults::lr")]
    pub lr: f64,
    #[serde(default = "hyper_defaults::batch_size")]
    pub batch_size: usize,
    /// Proximal coefficient, FedProx only.
    #[serde(default = "hyper_defaults::prox_mu")]
    pub prox_mu: f64,
    /// Fraction of clients sampled per round by FedAvg/FedProx.
    #[serde(default = "hyper_defaults::participation_fraction")]
    pub participation_fraction: f64,
}

mod hyper_defaults {
    pub fn n_max() -> usize {
        10
    }
    pub fn local_epochs() -> usize {
        5
    }
    pub fn lr() -> f64 {
        0.01
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn prox_mu() -> f64 {
        0.01
    }
    pub fn participation_fraction() -> f64 {
        1.0
    }
}

impl Default for FedccaHyper {
    fn default() -> Self {
        FedccaHyper {
            sigma: Sigma::Median,
            n_max: hyper_defaults::n_max(),
            local_epochs: hyper_defaults::local_epochs(),
            lr: hyper_defaults::lr(),
            batch_size: hyper_defaults::batch_size(),
            prox_mu: hyper_defaults::prox_mu(),
            participation_fraction: hyper_defaults::participation_fraction(),
        }
    }
}

impl FedccaHyper {
    pub fn validate(&self) -> Result<()> {
        if let Sigma::Fixed(v) = self.sigma {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config("hyper.sigma", "must be \"median\" or positive"));
            }
        }
        if self.n_max == 0 {
            return Err(Error::config("hyper.n_max", "must be positive"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("hyper.local_epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("hyper.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("hyper.batch_size", "must be positive"));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(Error::config("hyper.prox_mu", "must be non-negative"));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return Err(Error::config("hyper.participation_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdOptions {
        SgdOptions {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

/// Per-client training state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    /// Local model, shared through aggregation.
    pub theta: ParamVector,
    /// Client-specific model, never aggregated.
    pub phi: ParamVector,
    /// Whether the local model trains this round.
    pub participating: bool,
    pub dataset: ClientDataset,
}

/// Pairwise dissimilarity scores for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub scores: Vec<Vec<f64>>,
    pub round: usize,
    pub sigma: f64,
}

impl SimilarityMatrix {
    /// Wrap raw scores. Rejects non-square, asymmetric or out-of-range input.
    pub fn from_scores(scores: Vec<Vec<f64>>, round: usize) -> Result<Self> {
        let n = scores.len();
        for (i, row) in scores.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "similarity row",
                    expected: n,
                    found: row.len(),
                });
            }
            if row[i] != 0.0 {
                return Err(Error::invalid(format!("diagonal entry {i} is not zero")));
            }
            for (j, &u) in row.iter().enumerate() {
                if !(0.0..1.0).contains(&u) {
                    return Err(Error::invalid(format!("score ({i},{j}) = {u} outside [0,1)")));
                }
                if scores[j][i] != u {
                    return Err(Error::invalid(format!("scores not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(SimilarityMatrix {
            scores,
            round,
            sigma: f64::NAN,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i][j]
    }

    pub fn is_symmetric_zero_diagonal(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| self.scores[i][i] == 0.0 && (0..n).all(|j| self.scores[i][j] == self.scores[j][i]))
    }
}

/// Sources chosen by every client in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// `selected[i]` lists the sources of client `i` in admission order.
    pub selected: Vec<Vec<usize>>,
    pub criteria: Vec<f64>,
    /// Whether each client trains its local model next round: true iff it was
    /// admitted as a source by at least one client.
    pub next_participation: Vec<bool>,
}

/// How candidates are admitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionRule {
    /// Ranked scan against each client's threshold.
    #[default]
    Threshold,
    /// Admit every candidate in ranked order up to `n_max`.
    AdmitAll,
}

/// How admitted sources are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregationWeighting {
    /// Raw weight `1 - a_j * u_ij`, normalized.
    #[default]
    Attention,
    /// Equal weight over sources and self.
    Uniform,
}

pub fn euclidean_distance(p: &ParamVector, q: &ParamVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            context: "euclidean distance",
            expected: p.len(),
            found: q.len(),
        });
    }
    Ok(p.as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// `1 - exp(-d / sigma)`.
pub fn attention_score(d: f64, sigma: f64) -> Result<f64> {
    if d.is_nan() || d < 0.0 {
        return Err(Error::invalid(format!("distance must be non-negative, got {d}")));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(-(-d / sigma).exp_m1())
}

/// Upper-triangle distances `(i < j)` in row order.
pub fn pairwise_distances(fc_layers: &[ParamVector]) -> Result<Vec<Vec<f64>>> {
    let n = fc_layers.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean_distance(&fc_layers[i], &fc_layers[j])?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok(dist)
}

pub fn pairwise_dissimilarity(fc_layers: &[ParamVector], sigma: f64) -> Result<SimilarityMatrix> {
    let dist = pairwise_distances(fc_layers)?;
    dissimilarity_from_distances(&dist, sigma, 0)
}

/// Score a precomputed symmetric distance matrix.
pub fn dissimilarity_from_distances(dist: &[Vec<f64>], sigma: f64, round: usize) -> Result<SimilarityMatrix> {
    let n = dist.len();
    if n < 2 {
        return Err(Error::invalid("need at least two clients to compare"));
    }
    let mut scores = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let u = attention_score(dist[i][j], sigma)?;
            scores[i][j] = u;
            scores[j][i] = u;
        }
    }
    Ok(SimilarityMatrix { scores, round, sigma })
}

/// Admission threshold of client `i`: off-diagonal row sum over `2N`.
pub fn selection_criteria(matrix: &SimilarityMatrix, i: usize) -> Result<f64> {
    let n = matrix.len();
    if i >= n {
        return Err(Error::invalid(format!("client {i} out of range for {n} clients")));
    }
    let sum: f64 = (0..n).filter(|&j| j != i).map(|j| matrix.scores[i][j]).sum();
    Ok(sum / (2 * n) as f64)
}

/// Candidates `j != i` ranked by ascending score, lower id first on ties.
fn ranked_candidates(matrix: &SimilarityMatrix, i: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..matrix.len()).filter(|&j| j != i).collect();
    candidates.sort_by(|&a, &b| matrix.scores[i][a].total_cmp(&matrix.scores[i][b]).then(a.cmp(&b)));
    candidates
}

pub fn client_centric_selection(matrix: &SimilarityMatrix, n_max: usize) -> Result<SelectionReport> {
    select_sources(matrix, n_max, SelectionRule::Threshold)
}

/// Per-client source selection under `rule`.
pub fn select_sources(matrix: &SimilarityMatrix, n_max: usize, rule: SelectionRule) -> Result<SelectionReport> {
    if n_max == 0 {
        return Err(Error::invalid("n_max must be positive"));
    }
    let n = matrix.len();
    let mut selected = Vec::with_capacity(n);
    let mut criteria = Vec::with_capacity(n);
    let mut next_participation = vec![false; n];
    for i in 0..n {
        let threshold = selection_criteria(matrix, i)?;
        let mut chosen = Vec::new();
        for j in ranked_candidates(matrix, i) {
            if chosen.len() >= n_max {
                break;
            }
            if rule == SelectionRule::Threshold && matrix.scores[i][j] > threshold {
                break;
            }
            chosen.push(j);
            next_participation[j] = true;
        }
        criteria.push(threshold);
        selected.push(chosen);
    }
    Ok(SelectionReport {
        selected,
        criteria,
        next_participation,
    })
}

/// Normalized aggregation weights of `target` over `selected ∪ {target}`.
pub fn aggregation_weights(
    matrix: &SimilarityMatrix,
    target: usize,
    selected: &[usize],
    participation: &[bool],
    weighting: AggregationWeighting,
) -> Result<BTreeMap<usize, f64>> {
    let n = matrix.len();
    if target >= n {
        return Err(Error::invalid(format!("target {target} out of range")));
    }
    if selected.contains(&target) {
        return Err(Error::invalid("a client cannot be its own source"));
    }
    let mut raw = BTreeMap::new();
    raw.insert(target, 1.0);
    for &j in selected {
        if j >= n || j >= participation.len() {
            return Err(Error::invalid(format!("source {j} out of range")));
        }
        let w = match weighting {
            AggregationWeighting::Attention => {
                let gate = if participation[j] { 1.0 } else { 0.0 };
                1.0 - gate * matrix.scores[target][j]
            }
            AggregationWeighting::Uniform => 1.0,
        };
        raw.insert(j, w);
    }
    let total: f64 = raw.values().sum();
    Ok(raw.into_iter().map(|(k, w)| (k, w / total)).collect())
}

/// `sum_j weights[j] * thetas[j]`, accumulated in ascending id order.
pub fn multi_source_aggregate(
    thetas: &BTreeMap<usize, &ParamVector>,
    weights: &BTreeMap<usize, f64>,
) -> Result<ParamVector> {
    let total: f64 = weights.values().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::invalid(format!("weights sum to {total}, not 1")));
    }
    let mut out: Option<Vec<f64>> = None;
    for (id, &w) in weights {
        let theta = thetas
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no model for client {id}")))?;
        let acc = out.get_or_insert_with(|| vec![0.0; theta.len()]);
        if acc.len() != theta.len() {
            return Err(Error::DimensionMismatch {
                context: "aggregated model",
                expected: acc.len(),
                found: theta.len(),
            });
        }
        for (a, v) in acc.iter_mut().zip(theta.as_slice()) {
            *a += w * v;
        }
    }
    out.map(ParamVector::from)
        .ok_or_else(|| Error::invalid("empty weight map"))
}

/// Local-model update: a no-op for non-participating clients, otherwise
/// mini-batch SGD on the client's training data.
pub fn local_training<R: Rng + ?Sized>(
    client: &ClientState,
    spec: &ModelSpec,
    hyper: &FedccaHyper,
    rng: &mut R,
) -> Result<ParamVector> {
    if client.dataset.train.is_empty() {
        return Err(Error::invalid(format!(
            "client {} has no training data",
            client.client_id
        )));
    }
    if !client.participating {
        return Ok(client.theta.clone());
    }
    model::train_sgd(&client.theta, &client.dataset.train, &hyper.sgd(), rng, |p, b| {
        model::gradient(p, spec, b)
    })
}

/// Client-specific update, runs whether or not the client participates.
pub fn client_specific_training<R: Rng + ?Sized>(
    client: &ClientState,
    spec: &ModelSpec,
    hyper: &FedccaHyper,
    rng: &mut R,
) -> Result<ParamVector> {
    if client.dataset.train.is_empty() {
        return Err(Error::invalid(format!(
            "client {} has no training data",
            client.client_id
        )));
    }
    model::train_sgd(&client.phi, &client.dataset.train, &hyper.sgd(), rng, |p, b| {
        model::gradient(p, spec, b)
    })
}

/// Outcome of the server phase of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerStep {
    pub matrix: SimilarityMatrix,
    pub report: SelectionReport,
    pub weights: Vec<BTreeMap<usize, f64>>,
    pub thetas: Vec<ParamVector>,
}

/// Selection on fresh client-specific models followed by per-client
/// aggregation of the trained local models.
pub fn server_step(
    thetas: &[ParamVector],
    phis: &[ParamVector],
    cs_spec: &ModelSpec,
    hyper: &FedccaHyper,
    rule: SelectionRule,
    weighting: AggregationWeighting,
    round: usize,
) -> Result<ServerStep> {
    let n = thetas.len();
    if phis.len() != n {
        return Err(Error::DimensionMismatch {
            context: "client-specific models",
            expected: n,
            found: phis.len(),
        });
    }
    if n == 1 {
        return Ok(ServerStep {
            matrix: SimilarityMatrix {
                scores: vec![vec![0.0]],
                round,
                sigma: 1.0,
            },
            report: SelectionReport {
                selected: vec![Vec::new()],
                criteria: vec![0.0],
                next_participation: vec![true],
            },
            weights: vec![BTreeMap::from([(0, 1.0)])],
            thetas: thetas.to_vec(),
        });
    }
    let fcs = phis
        .iter()
        .map(|p| model::extract_fc_layer(p, cs_spec))
        .collect::<Result<Vec<_>>>()?;
    let dist = pairwise_distances(&fcs)?;
    let upper: Vec<f64> = (0..n).flat_map(|i| dist[i][i + 1..].to_vec()).collect();
    let sigma = hyper.sigma.resolve(&upper);
    let matrix = dissimilarity_from_distances(&dist, sigma, round)?;
    let report = select_sources(&matrix, hyper.n_max, rule)?;

    let by_id: BTreeMap<usize, &ParamVector> = thetas.iter().enumerate().collect();
    let mut weights = Vec::with_capacity(n);
    let mut next = Vec::with_capacity(n);
    for (i, sources) in report.selected.iter().enumerate() {
        let w = aggregation_weights(&matrix, i, sources, &report.next_participation, weighting)?;
        let total: f64 = w.values().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::invalid(format!(
                "aggregation weights of client {i} sum to {total}"
            )));
        }
        next.push(multi_source_aggregate(&by_id, &w)?);
        weights.push(w);
    }
    Ok(ServerStep {
        matrix,
        report,
        weights,
        thetas: next,
    })
}
