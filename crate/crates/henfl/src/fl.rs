//! In-process simulation of the synchronous federated protocol.
//!
//! Before training, the server broadcasts the architecture, the initial
//! parameters and the element dimension; each client then runs the privacy
//! pipeline over its raw shard exactly once. Every round: clients load the
//! global parameters, train locally, and upload a pseudo-gradient
//! `(global - local) / lr`, which reduces to the true loss gradient for a
//! single full-batch step. The server averages the uploads in client-id
//! order and applies one descent step on the mean.
//!
//! Clients and rounds are deterministic per `(master seed, client id,
//! round)`; shards never get re-noised, so the data-noise budget stays at
//! one draw per pixel for the whole run.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, DataRole, ExperimentConfig};
use crate::data::{prepare_private_dataset, DataError, PrivateDataset, RawDataset};
use crate::nn::{
    evaluate_accuracy, loss_and_grad, sgd_step, Architecture, GradientVector, ModelParams, NnError,
    Tensor,
};
use crate::rng::{derive_seed, shuffled_indices, tags};

#[derive(Debug, Error)]
pub enum FlError {
    #[error("client roster is empty")]
    EmptyRoster,
    #[error("no gradients to aggregate")]
    NothingToAggregate,
    #[error("gradient length mismatch: client {client} sent {actual}, expected {expected}")]
    GradientLengthMismatch {
        client: usize,
        expected: usize,
        actual: usize,
    },
    #[error("client {client} has an empty shard")]
    EmptyShard { client: usize },
    #[error("client {client} has not run pre-training")]
    NotPretrained { client: usize },
    #[error(
        "client {client}: broadcast announces element dimension {announced}, \
         local pipeline produces {local}"
    )]
    DimensionMismatch {
        client: usize,
        announced: usize,
        local: usize,
    },
    #[error("cannot shard {images} images across {clients} clients")]
    ShardTooSmall { images: usize, clients: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Local-training hyperparameters plus the server step scale applied to
/// the aggregated update (1.0 recovers plain averaging of local models).
#[derive(Debug, Clone, Copy)]
pub struct Hyper {
    pub local_epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub server_lr: f64,
}

impl Hyper {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        Self {
            local_epochs: config.local_epochs,
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            server_lr: 1.0,
        }
    }
}

/// The server's pre-training broadcast: model architecture, initial global
/// parameters, and the compressed element dimension.
#[derive(Debug, Clone)]
pub struct Broadcast {
    pub arch: Architecture,
    pub params: ModelParams,
    pub element_side: usize,
}

/// Global model, round counter and roster.
#[derive(Debug, Clone)]
pub struct ServerState {
    global: ModelParams,
    round: u32,
    arch: Architecture,
    roster: Vec<usize>,
}

impl ServerState {
    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn roster(&self) -> &[usize] {
        &self.roster
    }
}

/// Initialize the global model from the master seed and build the
/// broadcast message for the roster.
pub fn server_init(config: &ExperimentConfig) -> Result<(ServerState, Broadcast), FlError> {
    config.validate()?;
    if config.clients == 0 {
        return Err(FlError::EmptyRoster);
    }
    let arch = Architecture::for_side(config.compressed_side());
    let init_seed = derive_seed(config.seed, tags::MODEL_INIT, 0);
    let params = ModelParams::init(arch, init_seed)?;
    let server = ServerState {
        global: params.clone(),
        round: 0,
        arch,
        roster: (0..config.clients).collect(),
    };
    let broadcast = Broadcast {
        arch,
        params,
        element_side: config.compressed_side(),
    };
    Ok((server, broadcast))
}

/// One simulated client: its raw shard and, after pre-training, the
/// privacy-preserving shard it trains on for the rest of the run.
#[derive(Debug, Clone)]
pub struct Client {
    id: usize,
    raw: RawDataset,
    seed: u64,
    private: Option<PrivateDataset>,
}

impl Client {
    pub fn new(id: usize, raw: RawDataset, master_seed: u64) -> Self {
        Self {
            id,
            raw,
            seed: derive_seed(master_seed, tags::CLIENT, id as u64),
            private: None,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Run the two-layer pipeline over the raw shard, checking that the
    /// result matches the element dimension the server announced.
    /// Idempotent: the first call prepares and caches the private shard,
    /// later calls return it unchanged with no new noise drawn.
    pub fn pretrain(
        &mut self,
        broadcast: &Broadcast,
        config: &ExperimentConfig,
    ) -> Result<&PrivateDataset, FlError> {
        if self.private.is_none() {
            if self.raw.is_empty() {
                return Err(FlError::EmptyShard { client: self.id });
            }
            let role = DataRole::Train {
                client: self.id as u64,
            };
            let private = prepare_private_dataset(&self.raw, config, role)?;
            if private.rows() != broadcast.element_side || private.cols() != broadcast.element_side
            {
                return Err(FlError::DimensionMismatch {
                    client: self.id,
                    announced: broadcast.element_side,
                    local: private.rows(),
                });
            }
            self.private = Some(private);
        }
        Ok(self.private.as_ref().expect("just populated"))
    }

    /// Install an externally prepared (for example cache-loaded) shard.
    pub fn with_private(id: usize, shard: PrivateDataset, master_seed: u64) -> Self {
        Self {
            id,
            raw: RawDataset::new(vec![], vec![]).expect("empty dataset is well-formed"),
            seed: derive_seed(master_seed, tags::CLIENT, id as u64),
            private: Some(shard),
        }
    }

    pub fn private(&self) -> Option<&PrivateDataset> {
        self.private.as_ref()
    }
}

/// Seed of the dropout mask for one batch of one epoch of one round.
pub fn dropout_seed(client_seed: u64, round: u32, epoch: u32, batch: usize) -> u64 {
    let per_round = derive_seed(client_seed, tags::ROUND, round as u64);
    let per_epoch = derive_seed(per_round, tags::EPOCH, epoch as u64);
    derive_seed(per_epoch, tags::BATCH, batch as u64)
}

/// Index order a client visits its shard in for one epoch of one round.
pub fn epoch_permutation(client_seed: u64, round: u32, epoch: u32, len: usize) -> Vec<usize> {
    let per_round = derive_seed(client_seed, tags::ROUND, round as u64);
    let per_epoch = derive_seed(per_round, tags::EPOCH, epoch as u64);
    shuffled_indices(len, per_epoch)
}

/// Gather shard images at `indices` into an `[N, 1, S, S]` batch tensor.
pub fn batch_tensor(shard: &PrivateDataset, indices: &[usize]) -> Result<(Tensor, Vec<u8>), FlError> {
    let (rows, cols) = (shard.rows(), shard.cols());
    let mut data = Vec::with_capacity(indices.len() * rows * cols);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(shard.images()[i].entries());
        labels.push(shard.labels()[i]);
    }
    let tensor = Tensor::new(vec![indices.len(), 1, rows, cols], data)?;
    Ok((tensor, labels))
}

/// All shard images as one evaluation tensor.
pub fn dataset_tensor(shard: &PrivateDataset) -> Result<(Tensor, Vec<u8>), FlError> {
    let indices: Vec<usize> = (0..shard.len()).collect();
    batch_tensor(shard, &indices)
}

/// Run `hyper.local_epochs` of mini-batch SGD from the global parameters
/// on the client's private shard and report the pseudo-gradient
/// `(global - local) / lr`. For one epoch over one full batch this equals
/// the loss gradient at the global parameters up to rounding.
pub fn client_round(
    client: &Client,
    global: &ModelParams,
    hyper: &Hyper,
    round: u32,
) -> Result<GradientVector, FlError> {
    let shard = client
        .private
        .as_ref()
        .ok_or(FlError::NotPretrained { client: client.id })?;
    if shard.is_empty() {
        return Err(FlError::EmptyShard { client: client.id });
    }
    let mut local = global.clone();
    for epoch in 0..hyper.local_epochs {
        let order = epoch_permutation(client.seed, round, epoch, shard.len());
        for (batch_index, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let (batch, labels) = batch_tensor(shard, chunk)?;
            let seed = dropout_seed(client.seed, round, epoch, batch_index);
            let (_, gradient) = loss_and_grad(&local, &batch, &labels, seed)?;
            local = sgd_step(&local, &gradient, hyper.learning_rate)?;
        }
    }
    let pseudo = global
        .as_flat()
        .iter()
        .zip(local.as_flat())
        .map(|(g, l)| (g - l) / hyper.learning_rate)
        .collect();
    Ok(GradientVector::new(pseudo))
}

/// Component-wise unweighted mean of the received gradients, summed in
/// input order. Callers pass gradients in client-id order, which keeps the
/// result independent of scheduling; reordering the list can only move the
/// result by floating-point reassociation.
pub fn aggregate(gradients: &[GradientVector]) -> Result<GradientVector, FlError> {
    let first = gradients.first().ok_or(FlError::NothingToAggregate)?;
    let len = first.len();
    for (client, gradient) in gradients.iter().enumerate() {
        if gradient.len() != len {
            return Err(FlError::GradientLengthMismatch {
                client,
                expected: len,
                actual: gradient.len(),
            });
        }
    }
    let mut mean = vec![0.0; len];
    for gradient in gradients {
        for (m, g) in mean.iter_mut().zip(gradient.as_slice()) {
            *m += g;
        }
    }
    let count = gradients.len() as f64;
    for m in &mut mean {
        *m /= count;
    }
    Ok(GradientVector::new(mean))
}

/// Metrics of one completed round.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: u32,
    pub client_grad_norms: Vec<f64>,
    pub aggregated_norm: f64,
    pub accuracy: Option<f64>,
    pub wall_secs: f64,
}

/// One synchronization round: collect every client's pseudo-gradient,
/// average them, apply the global step `server_lr · lr` on the mean, bump
/// the round counter, and optionally evaluate. Any client error aborts the
/// round; there is no partial aggregation.
pub fn run_round(
    server: &mut ServerState,
    clients: &[Client],
    hyper: &Hyper,
    eval: Option<(&Tensor, &[u8])>,
) -> Result<RoundRecord, FlError> {
    let started = Instant::now();
    if clients.is_empty() {
        return Err(FlError::EmptyRoster);
    }
    let round = server.round;
    let gradients: Vec<GradientVector> = clients
        .par_iter()
        .map(|client| client_round(client, &server.global, hyper, round))
        .collect::<Result<_, _>>()?;
    let aggregated = aggregate(&gradients)?;
    let step = hyper.server_lr * hyper.learning_rate;
    server.global = sgd_step(&server.global, &aggregated, step)?;
    server.round += 1;
    let accuracy = match eval {
        Some((images, labels)) => Some(evaluate_accuracy(&server.global, images, labels)?),
        None => None,
    };
    Ok(RoundRecord {
        round: server.round,
        client_grad_norms: gradients.iter().map(GradientVector::norm).collect(),
        aggregated_norm: aggregated.norm(),
        accuracy,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

/// Split a raw dataset into equal IID shards: shuffle the indices with a
/// seed derived from the master seed, then deal them round-robin.
pub fn shard_dataset(
    raw: &RawDataset,
    clients: usize,
    master_seed: u64,
) -> Result<Vec<RawDataset>, FlError> {
    if clients == 0 {
        return Err(FlError::EmptyRoster);
    }
    if raw.len() < clients {
        return Err(FlError::ShardTooSmall {
            images: raw.len(),
            clients,
        });
    }
    let order = shuffled_indices(raw.len(), derive_seed(master_seed, tags::SHARD, 0));
    let mut shards: Vec<Vec<usize>> = vec![Vec::with_capacity(raw.len() / clients + 1); clients];
    for (position, index) in order.into_iter().enumerate() {
        shards[position % clients].push(index);
    }
    shards
        .into_iter()
        .map(|indices| raw.subset(&indices).map_err(FlError::from))
        .collect()
}
