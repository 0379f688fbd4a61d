//! Round loop.
//!
//! A [`Federation`] owns every client's state and advances it one
//! communication round at a time. For FedCCA a round is: gated local
//! training and ungated client-specific training on every client (possibly
//! concurrent), then selection on the fresh client-specific models and
//! per-client aggregation of the trained local models. The baselines share
//! the same loop, seeding and evaluation.
//!
//! All randomness is drawn from streams derived by [`derive_rng`] from the
//! master seed, the round, the client and a [`StreamTag`], so results do not
//! depend on how client tasks are scheduled.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::config::{Algorithm, ExperimentConfig};
use crate::data::{self, ClientDataset};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::{self, ModelSpec, ParamVector};
use crate::protocol::{self, ClientState, SelectionReport, ServerStep};

/// Client id used for server-side streams.
pub const SERVER_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamTag {
    Data = 1,
    InitTheta = 2,
    InitPhi = 3,
    LocalShuffle = 4,
    SpecificShuffle = 5,
    Participants = 6,
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `splitmix(splitmix(splitmix(splitmix(master) ^ round) ^ client) ^ tag)`.
pub fn stream_seed(master_seed: u64, round: u64, client_id: u64, tag: StreamTag) -> u64 {
    let mut h = splitmix64(master_seed);
    h = splitmix64(h ^ round);
    h = splitmix64(h ^ client_id);
    splitmix64(h ^ tag as u64)
}

pub fn derive_rng(master_seed: u64, round: u64, client_id: u64, tag: StreamTag) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master_seed, round, client_id, tag))
}

/// Metrics of one evaluated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Per client, cross-entropy of the post-round local model on its
    /// training set.
    pub train_loss: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    /// FedCCA only.
    pub selection: Option<SelectionReport>,
    /// Bandwidth used for the attention scores, FedCCA only.
    pub sigma: Option<f64>,
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub records: Vec<RoundRecord>,
    pub final_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// `selection_counts[i][j]`: rounds in which client `i` took `j` as a source.
    pub selection_counts: Vec<Vec<u64>>,
}

pub struct Federation {
    config: ExperimentConfig,
    model_spec: ModelSpec,
    cs_spec: ModelSpec,
    clients: Vec<ClientState>,
    global: Option<ParamVector>,
    round: usize,
    selection_counts: Vec<Vec<u64>>,
    last_step: Option<ServerStep>,
    executor: Executor,
}

impl Federation {
    /// Generate the clients' data from the config and initialize all models.
    pub fn new(config: ExperimentConfig, executor: Executor) -> Result<Self> {
        config.validate()?;
        let clients = build_datasets(&config)?;
        Federation::from_clients(config, clients, executor)
    }

    /// Start from explicit client datasets instead of generated ones.
    pub fn from_clients(config: ExperimentConfig, datasets: Vec<ClientDataset>, executor: Executor) -> Result<Self> {
        config.validate()?;
        if datasets.is_empty() {
            return Err(Error::invalid("no clients"));
        }
        let model_spec = config.model_spec();
        let cs_spec = config.cs_model_spec();
        model_spec.validate()?;
        cs_spec.validate()?;
        let theta0 = model::init_params(
            &model_spec,
            &mut derive_rng(config.seed, 0, SERVER_STREAM, StreamTag::InitTheta),
        );
        let phi0 = model::init_params(
            &cs_spec,
            &mut derive_rng(config.seed, 0, SERVER_STREAM, StreamTag::InitPhi),
        );
        let n = datasets.len();
        let clients = datasets
            .into_iter()
            .enumerate()
            .map(|(id, mut dataset)| {
                dataset.client_id = id;
                ClientState {
                    client_id: id,
                    theta: theta0.clone(),
                    phi: phi0.clone(),
                    participating: true,
                    dataset,
                }
            })
            .collect();
        let global = matches!(config.algorithm, Algorithm::Fedavg | Algorithm::Fedprox).then_some(theta0);
        Ok(Federation {
            config,
            model_spec,
            cs_spec,
            clients,
            global,
            round: 0,
            selection_counts: vec![vec![0; n]; n],
            last_step: None,
            executor,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    /// Index of the next round to run.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn selection_counts(&self) -> &[Vec<u64>] {
        &self.selection_counts
    }

    /// Server step of the most recent FedCCA round.
    pub fn last_server_step(&self) -> Option<&ServerStep> {
        self.last_step.as_ref()
    }

    pub fn global_model(&self) -> Option<&ParamVector> {
        self.global.as_ref()
    }

    /// Client phase of the current round: updates local (and, for FedCCA,
    /// client-specific) models in place.
    pub fn train_phase(&mut self) -> Result<()> {
        let seed = self.config.seed;
        let round = self.round as u64;
        let hyper = &self.config.hyper;
        let spec = &self.model_spec;
        let cs_spec = &self.cs_spec;
        match self.config.algorithm {
            Algorithm::Fedcca => {
                let clients = &self.clients;
                let updates = self
                    .executor
                    .map(clients.len(), |i| -> Result<(ParamVector, ParamVector)> {
                        let c = &clients[i];
                        let id = c.client_id as u64;
                        let theta = protocol::local_training(
                            c,
                            spec,
                            hyper,
                            &mut derive_rng(seed, round, id, StreamTag::LocalShuffle),
                        )?;
                        let phi = protocol::client_specific_training(
                            c,
                            cs_spec,
                            hyper,
                            &mut derive_rng(seed, round, id, StreamTag::SpecificShuffle),
                        )?;
                        Ok((theta, phi))
                    });
                for (c, update) in self.clients.iter_mut().zip(updates) {
                    let (theta, phi) = update?;
                    c.theta = theta;
                    c.phi = phi;
                }
            }
            Algorithm::Fedavg | Algorithm::Fedprox => {
                let global = self.global.as_ref().expect("baseline has a global model");
                let mu = if self.config.algorithm == Algorithm::Fedprox {
                    hyper.prox_mu
                } else {
                    0.0
                };
                let participants = baselines::sample_participants(
                    self.clients.len(),
                    hyper.participation_fraction,
                    &mut derive_rng(seed, round, SERVER_STREAM, StreamTag::Participants),
                )?;
                for c in &mut self.clients {
                    c.theta = global.clone();
                    c.participating = participants.contains(&c.client_id);
                }
                let clients = &self.clients;
                let updates = self.executor.map(clients.len(), |i| -> Result<Option<ParamVector>> {
                    let c = &clients[i];
                    if !c.participating {
                        return Ok(None);
                    }
                    let mut rng = derive_rng(seed, round, c.client_id as u64, StreamTag::LocalShuffle);
                    baselines::fedprox_local_training(global, &c.dataset.train, spec, hyper, mu, &mut rng).map(Some)
                });
                for (c, update) in self.clients.iter_mut().zip(updates) {
                    if let Some(theta) = update? {
                        c.theta = theta;
                    }
                }
            }
            Algorithm::LocalOnly => {
                let clients = &self.clients;
                let updates = self.executor.map(clients.len(), |i| {
                    let c = &clients[i];
                    let mut rng = derive_rng(seed, round, c.client_id as u64, StreamTag::LocalShuffle);
                    model::train_sgd(&c.theta, &c.dataset.train, &hyper.sgd(), &mut rng, |p, b| {
                        model::gradient(p, spec, b)
                    })
                });
                for (c, update) in self.clients.iter_mut().zip(updates) {
                    c.theta = update?;
                }
            }
        }
        Ok(())
    }

    /// Server phase of the current round. Advances the round counter.
    pub fn server_phase(&mut self) -> Result<()> {
        match self.config.algorithm {
            Algorithm::Fedcca => {
                let thetas: Vec<ParamVector> = self.clients.iter().map(|c| c.theta.clone()).collect();
                let phis: Vec<ParamVector> = self.clients.iter().map(|c| c.phi.clone()).collect();
                let variant = self.config.ablation.variant();
                let step = protocol::server_step(
                    &thetas,
                    &phis,
                    &self.cs_spec,
                    &self.config.hyper,
                    variant.selection_rule(),
                    variant.weighting(),
                    self.round,
                )?;
                for (i, sources) in step.report.selected.iter().enumerate() {
                    for &j in sources {
                        self.selection_counts[i][j] += 1;
                    }
                }
                for (c, (theta, &next)) in self
                    .clients
                    .iter_mut()
                    .zip(step.thetas.iter().zip(&step.report.next_participation))
                {
                    c.theta = theta.clone();
                    c.participating = next;
                }
                self.last_step = Some(step);
            }
            Algorithm::Fedavg | Algorithm::Fedprox => {
                let participants: Vec<&ClientState> = self.clients.iter().filter(|c| c.participating).collect();
                let thetas: BTreeMap<usize, &ParamVector> =
                    participants.iter().map(|c| (c.client_id, &c.theta)).collect();
                let sizes: BTreeMap<usize, usize> = participants
                    .iter()
                    .map(|c| (c.client_id, c.dataset.train.len()))
                    .collect();
                let global = baselines::fedavg_aggregate(&thetas, &sizes)?;
                for c in &mut self.clients {
                    c.theta = global.clone();
                }
                self.global = Some(global);
            }
            Algorithm::LocalOnly => {}
        }
        self.round += 1;
        Ok(())
    }

    /// Per-client `(train loss, test accuracy)` of the current local models.
    pub fn evaluate(&self) -> Result<Vec<(f64, f64)>> {
        let spec = &self.model_spec;
        let clients = &self.clients;
        self.executor
            .map(clients.len(), |i| -> Result<(f64, f64)> {
                let c = &clients[i];
                Ok((
                    model::cross_entropy_loss(&c.theta, spec, &c.dataset.train)?,
                    model::accuracy(&c.theta, spec, &c.dataset.test)?,
                ))
            })
            .into_iter()
            .collect()
    }

    /// One full round; returns a record when the round is due for evaluation.
    pub fn run_round(&mut self) -> Result<Option<RoundRecord>> {
        let started = Instant::now();
        let round = self.round;
        self.train_phase()?;
        self.server_phase()?;
        if !round.is_multiple_of(self.config.eval_every) {
            return Ok(None);
        }
        let (train_loss, test_accuracy) = self.evaluate()?.into_iter().unzip();
        let (selection, sigma) = match (&self.config.algorithm, &self.last_step) {
            (Algorithm::Fedcca, Some(step)) => (Some(step.report.clone()), Some(step.matrix.sigma)),
            _ => (None, None),
        };
        Ok(Some(RoundRecord {
            round,
            train_loss,
            test_accuracy,
            selection,
            sigma,
            wall_time: started.elapsed(),
        }))
    }

    /// Run the remaining rounds and summarize.
    pub fn run(mut self) -> Result<RunResult> {
        let mut records = Vec::new();
        while self.round < self.config.rounds {
            if let Some(record) = self.run_round()? {
                records.push(record);
            }
        }
        let final_accuracy: Vec<f64> = self.evaluate()?.into_iter().map(|(_, acc)| acc).collect();
        let mean_accuracy = final_accuracy.iter().sum::<f64>() / final_accuracy.len() as f64;
        Ok(RunResult {
            config_hash: self.config.hash(),
            algorithm: self.config.algorithm,
            rounds: self.round,
            records,
            final_accuracy,
            mean_accuracy,
            selection_counts: self.selection_counts,
        })
    }
}

/// Generate the pool and per-client datasets described by `config`.
pub fn build_datasets(config: &ExperimentConfig) -> Result<Vec<ClientDataset>> {
    let mut rng = derive_rng(config.seed, 0, SERVER_STREAM, StreamTag::Data);
    let pool = data::generate_base_pool(&config.data.synthetic(), &mut rng)?;
    data::build_clients(&pool, &config.data.plan(), &mut rng)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    run_experiment_with(config, &Executor::default())
}

pub fn run_experiment_with(config: &ExperimentConfig, executor: &Executor) -> Result<RunResult> {
    Federation::new(config.clone(), executor.clone())?.run()
}
