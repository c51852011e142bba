//! Round-based protocol engine for centralized (CFL), decentralized (DFL)
//! and semi-decentralized (SDFL) federated learning.
//!
//! Every round follows the same steps: each participant trains locally,
//! models travel over the [`Bus`] along the round's [`TopologyPlan`], the
//! aggregating node(s) apply FedAvg, and every participant's model is scored
//! on the shared test set.
//!
//! - CFL: participants upload to a dedicated server (node id `N`), which
//!   averages and broadcasts. The server holds no data.
//! - DFL: full mesh. Every participant sends its model to every peer and
//!   averages its own model with whatever it received.
//! - SDFL: one participant, drawn uniformly each round, plays the server's
//!   part. It also trains on its own data.
//!
//! With zero latency and no deadline all three compute the mean of the same
//! locally trained models, in the same order, so they stay bit-identical.
//! With a `round_deadline`, each phase (gather, then distribute) only
//! accepts messages that arrive within the deadline; late models are left
//! out of aggregation, and a node that misses a broadcast keeps its own
//! model.

use std::borrow::Borrow;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kpi::{
    average_over_participants, convergence_round, evaluate, Evaluation, KpiError, KpiSample,
    RoundRecord, RunRecord, RunSummary, SeedRecord,
};
use crate::mnist::{stratified_partition, LabeledDataset, PartitionError, CLASSES};
use crate::netsim::{
    decode_model, encode_model, encoded_size, Bus, BusError, CodecError, LatencyModel, Message,
    MessageKind, NodeId,
};
use crate::nn::{flop_count, init_model, train_local, Hyperparams, MlpModel, NnError};

pub const DEFAULT_LAYER_DIMS: [usize; 4] = [784, 256, 128, 10];

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const ROUND_MIX: u64 = 0xBF58_476D_1CE4_E5B9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtoError {
    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("fedavg needs at least one model")]
    EmptyModels,
    #[error("model {0} does not match the shape of model 0")]
    ShapeMismatch(usize),
    #[error("{weights} weights for {models} models")]
    WeightCount { models: usize, weights: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("a federation needs at least one participant")]
    NoParticipants,
    #[error("SDFL round needs an aggregator")]
    MissingAggregator,
    #[error("{0} has no rotating aggregator")]
    UnexpectedAggregator(ArchitectureKind),
    #[error("aggregator {aggregator} is not one of the {participants} participants")]
    AggregatorOutOfRange {
        aggregator: NodeId,
        participants: usize,
    },
    #[error("all {0} rounds already ran")]
    RoundsExhausted(usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Kpi(#[from] KpiError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    PartialOrd,
    Ord,
    Hash,
    Serialize,
    Deserialize,
    clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureKind {
    Cfl,
    Dfl,
    Sdfl,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 3] = [Self::Cfl, Self::Dfl, Self::Sdfl];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cfl => "cfl",
            Self::Dfl => "dfl",
            Self::Sdfl => "sdfl",
        }
    }

    /// Model transfers per round with `n` participants and no drops.
    pub fn transfers_per_round(self, n: usize) -> usize {
        match self {
            Self::Cfl => 2 * n,
            Self::Dfl => n * n.saturating_sub(1),
            Self::Sdfl => 2 * n.saturating_sub(1),
        }
    }
}

impl fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitectureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cfl" => Ok(Self::Cfl),
            "dfl" => Ok(Self::Dfl),
            "sdfl" => Ok(Self::Sdfl),
            _ => Err(format!(
                "unknown architecture '{s}' (valid: cfl, dfl, sdfl)"
            )),
        }
    }
}

/// How FedAvg weighs each contributed model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Plain parameter-wise arithmetic mean.
    #[default]
    Equal,
    /// Weighted by the contributor's local sample count.
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchitectureKind,
    pub n_participants: usize,
    pub rounds: usize,
    pub master_seed: u64,
    pub hyper: Hyperparams,
    pub layer_dims: Vec<usize>,
    pub latency: LatencyModel,
    /// Per-phase arrival deadline in simulated time units.
    pub round_deadline: Option<u64>,
    pub weighting: Weighting,
    pub convergence_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arch: ArchitectureKind::Dfl,
            n_participants: 3,
            rounds: 10,
            master_seed: 7,
            hyper: Hyperparams::default(),
            layer_dims: DEFAULT_LAYER_DIMS.to_vec(),
            latency: LatencyModel::Zero,
            round_deadline: None,
            weighting: Weighting::Equal,
            convergence_threshold: 0.90,
        }
    }
}

impl ExperimentConfig {
    /// Checks that don't need the data. Every failure is reported.
    pub fn validate(&self) -> Result<(), ProtoError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ProtoError::InvalidConfig(problems))
        }
    }

    pub fn validate_for(
        &self,
        train: &LabeledDataset,
        test: &LabeledDataset,
    ) -> Result<(), ProtoError> {
        let mut problems = self.problems();
        if let Some(&input) = self.layer_dims.first() {
            if input != train.width() {
                problems.push(format!(
                    "layer_dims[0] = {input} but training images have {} values",
                    train.width()
                ));
            }
        }
        if test.width() != train.width() {
            problems.push(format!(
                "test width {} differs from train width {}",
                test.width(),
                train.width()
            ));
        }
        if self.n_participants > train.len() {
            problems.push(format!(
                "{} participants for only {} training samples",
                self.n_participants,
                train.len()
            ));
        }
        if test.is_empty() {
            problems.push("test set is empty".to_owned());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ProtoError::InvalidConfig(problems))
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.n_participants == 0 {
            problems.push("n_participants must be at least 1".to_owned());
        }
        if self.layer_dims.len() < 2 {
            problems.push(format!(
                "layer_dims needs at least 2 entries, got {:?}",
                self.layer_dims
            ));
        } else if self.layer_dims.contains(&0) {
            problems.push(format!(
                "layer_dims must be nonzero, got {:?}",
                self.layer_dims
            ));
        }
        if self.layer_dims.last().is_some_and(|&c| c != CLASSES) {
            problems.push(format!("output layer must have {CLASSES} units"));
        }
        if self.hyper.batch_size == 0 {
            problems.push("hyper.batch_size must be at least 1".to_owned());
        }
        if !(self.hyper.learning_rate.is_finite() && self.hyper.learning_rate >= 0.0) {
            problems.push(format!(
                "hyper.learning_rate must be finite and nonnegative, got {}",
                self.hyper.learning_rate
            ));
        }
        if !(self.convergence_threshold > 0.0 && self.convergence_threshold < 1.0) {
            problems.push(format!(
                "convergence_threshold must lie in (0, 1), got {}",
                self.convergence_threshold
            ));
        }
        if let LatencyModel::Uniform { lo, hi } = self.latency {
            if lo > hi {
                problems.push(format!("uniform latency needs lo <= hi, got {lo}..{hi}"));
            }
        }
        problems
    }

    /// Run directory name: `<arch>_n<N>_s<seed>`.
    pub fn run_name(&self) -> String {
        format!(
            "{}_n{}_s{}",
            self.arch, self.n_participants, self.master_seed
        )
    }
}

/// Parameter-wise weighted mean `sum(w_i * theta_i) / sum(w_i)`, accumulated
/// in `f64`. Without weights every model counts equally.
pub fn fedavg<M: Borrow<MlpModel>>(
    models: &[M],
    weights: Option<&[f64]>,
) -> Result<MlpModel, ProtoError> {
    let first = models.first().ok_or(ProtoError::EmptyModels)?.borrow();
    if let Some(i) = models.iter().position(|m| !m.borrow().same_shape(first)) {
        return Err(ProtoError::ShapeMismatch(i));
    }
    let weights: Vec<f64> = match weights {
        Some(w) if w.len() != models.len() => {
            return Err(ProtoError::WeightCount {
                models: models.len(),
                weights: w.len(),
            })
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; models.len()],
    };
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(ProtoError::InvalidWeights(format!(
            "weight {w} is not a nonnegative real"
        )));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(ProtoError::InvalidWeights("weights sum to zero".to_owned()));
    }

    let mut acc = vec![0.0f64; first.param_count()];
    for (model, &w) in models.iter().zip(&weights) {
        for (a, p) in acc.iter_mut().zip(model.borrow().params()) {
            *a += w * p as f64;
        }
    }
    let mut out = first.clone();
    for (p, a) in out.params_mut().zip(acc) {
        *p = (a / total) as f32;
    }
    Ok(out)
}

/// SplitMix64 finalizer over `master ^ node*golden ^ round*mix`.
pub fn derive_node_seed(master_seed: u64, node_index: u64, round: u64) -> u64 {
    let mut z = master_seed ^ node_index.wrapping_mul(GOLDEN_GAMMA) ^ round.wrapping_mul(ROUND_MIX);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Round-0 slots are free because no training happens there; they seed
/// the experiment-level streams.
fn experiment_seeds(master: u64) -> (u64, u64, u64) {
    (
        derive_node_seed(master, 0, 0),
        derive_node_seed(master, 1, 0),
        derive_node_seed(master, 2, 0),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub kind: MessageKind,
    /// 0 = gather / peer exchange, 1 = distribution of the aggregate.
    pub phase: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyPlan {
    pub arch: ArchitectureKind,
    pub round: usize,
    pub edges: Vec<Edge>,
}

impl TopologyPlan {
    pub fn transfer_count(&self) -> usize {
        self.edges.len()
    }

    pub fn phase(&self, phase: u8) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(move |e| e.phase == phase)
    }
}

/// Message flow for one round. The CFL server is `NodeId(n_participants)`.
pub fn plan_topology(
    arch: ArchitectureKind,
    n_participants: usize,
    round: usize,
    aggregator: Option<NodeId>,
) -> Result<TopologyPlan, ProtoError> {
    if n_participants == 0 {
        return Err(ProtoError::NoParticipants);
    }
    let nodes = || (0..n_participants).map(NodeId);
    let edge = |sender, receiver, kind, phase| Edge {
        sender,
        receiver,
        kind,
        phase,
    };
    let edges = match (arch, aggregator) {
        (ArchitectureKind::Sdfl, None) => return Err(ProtoError::MissingAggregator),
        (ArchitectureKind::Cfl | ArchitectureKind::Dfl, Some(_)) => {
            return Err(ProtoError::UnexpectedAggregator(arch))
        }
        (ArchitectureKind::Cfl, None) => {
            let server = NodeId(n_participants);
            nodes()
                .map(|n| edge(n, server, MessageKind::ModelUpload, 0))
                .chain(nodes().map(|n| edge(server, n, MessageKind::ModelBroadcast, 1)))
                .collect()
        }
        (ArchitectureKind::Dfl, None) => nodes()
            .flat_map(|s| {
                nodes()
                    .filter(move |&r| r != s)
                    .map(move |r| edge(s, r, MessageKind::ModelBroadcast, 0))
            })
            .collect(),
        (ArchitectureKind::Sdfl, Some(agg)) => {
            if agg.0 >= n_participants {
                return Err(ProtoError::AggregatorOutOfRange {
                    aggregator: agg,
                    participants: n_participants,
                });
            }
            nodes()
                .filter(|&n| n != agg)
                .map(|n| edge(n, agg, MessageKind::ModelUpload, 0))
                .chain(
                    nodes()
                        .filter(|&n| n != agg)
                        .map(|n| edge(agg, n, MessageKind::ModelBroadcast, 1)),
                )
                .collect()
        }
    };
    Ok(TopologyPlan { arch, round, edges })
}

/// Uniform draw; repeats across rounds are allowed.
pub fn select_aggregator<R: Rng + ?Sized>(
    participants: &[NodeId],
    rng: &mut R,
) -> Result<NodeId, ProtoError> {
    if participants.is_empty() {
        return Err(ProtoError::NoParticipants);
    }
    Ok(participants[rng.gen_range(0..participants.len())])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Trainer,
    Aggregator,
    Server,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub id: NodeId,
    pub role: Role,
    pub model: MlpModel,
    /// Training sample indices; empty for the CFL server.
    pub part: Vec<usize>,
    /// Seed of the stream used for this node's most recent local training.
    pub rng_seed: u64,
}

fn bitwise_eq(a: &MlpModel, b: &MlpModel) -> bool {
    a.same_shape(b)
        && a.params()
            .zip(b.params())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Decoded `(sender, model)` pairs, late-message count, last arrival time.
type Received = (Vec<(NodeId, MlpModel)>, u64, u64);

/// A running federation: participants, optional server, bus and streams.
pub struct Federation<'a> {
    config: ExperimentConfig,
    train: &'a LabeledDataset,
    test: &'a LabeledDataset,
    participants: Vec<NodeState>,
    server: Option<NodeState>,
    bus: Bus,
    aggregator_rng: ChaCha8Rng,
    round: usize,
    seeds: SeedRecord,
    partition_sizes: Vec<usize>,
}

impl<'a> Federation<'a> {
    /// Shared initial model from `init_model(layer_dims, master_seed)`,
    /// stratified partition of `train`, empty ledger.
    pub fn new(
        config: ExperimentConfig,
        train: &'a LabeledDataset,
        test: &'a LabeledDataset,
    ) -> Result<Self, ProtoError> {
        config.validate_for(train, test)?;
        let master = config.master_seed;
        let (partition_seed, aggregator_seed, latency_seed) = experiment_seeds(master);
        let initial = init_model(&config.layer_dims, master)?;
        let plan = stratified_partition(train, config.n_participants, partition_seed)?;
        let partition_sizes = plan.sizes();
        let participants = plan
            .parts
            .into_iter()
            .enumerate()
            .map(|(i, part)| NodeState {
                id: NodeId(i),
                role: Role::Trainer,
                model: initial.clone(),
                part,
                rng_seed: 0,
            })
            .collect();
        let server = (config.arch == ArchitectureKind::Cfl).then(|| NodeState {
            id: NodeId(config.n_participants),
            role: Role::Server,
            model: initial.clone(),
            part: Vec::new(),
            rng_seed: 0,
        });
        let seeds = SeedRecord {
            derivation:
                "splitmix64(master ^ node * 0x9E3779B97F4A7C15 ^ round * 0xBF58476D1CE4E5B9); \
                         init = master; partition = (0, 0); aggregator = (1, 0); latency = (2, 0); \
                         training = (node, round >= 1)"
                    .to_owned(),
            master,
            init: master,
            partition: partition_seed,
            aggregator: aggregator_seed,
            latency: latency_seed,
            training: Vec::new(),
        };
        Ok(Self {
            bus: Bus::new(config.latency, latency_seed),
            aggregator_rng: ChaCha8Rng::seed_from_u64(aggregator_seed),
            config,
            train,
            test,
            participants,
            server,
            round: 0,
            seeds,
            partition_sizes,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn participants(&self) -> &[NodeState] {
        &self.participants
    }

    pub fn server(&self) -> Option<&NodeState> {
        self.server.as_ref()
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    /// Last completed round (0 before any training).
    pub fn round(&self) -> usize {
        self.round
    }

    /// Scores every participant on the test set. Bitwise-identical models
    /// share one evaluation.
    fn evaluate_participants(&self) -> Result<Vec<Evaluation>, ProtoError> {
        let mut evals: Vec<Evaluation> = Vec::with_capacity(self.participants.len());
        for (i, node) in self.participants.iter().enumerate() {
            let reuse = self.participants[..i]
                .iter()
                .position(|prev| bitwise_eq(&prev.model, &node.model));
            let eval = match reuse {
                Some(j) => evals[j].clone(),
                None => evaluate(&node.model, self.test)?,
            };
            evals.push(eval);
        }
        Ok(evals)
    }

    fn round_record(
        &self,
        aggregator: Option<NodeId>,
        dropped: u64,
        traffic: &[(u64, u64)],
        flops: &[u64],
    ) -> Result<RoundRecord, ProtoError> {
        let evals = self.evaluate_participants()?;
        let nodes: Vec<KpiSample> = self
            .participants
            .iter()
            .zip(&evals)
            .enumerate()
            .map(|(i, (node, eval))| {
                let mut s = KpiSample::from_evaluation(node.id, self.round, eval);
                s.bytes_sent = traffic[i].0;
                s.bytes_received = traffic[i].1;
                s.flops = flops[i];
                s
            })
            .collect();
        let average = average_over_participants(&nodes)?;
        Ok(RoundRecord {
            round: self.round,
            aggregator,
            dropped_messages: dropped,
            nodes,
            average,
        })
    }

    /// Evaluation of the shared initial model.
    pub fn initial_record(&self) -> Result<RoundRecord, ProtoError> {
        let n = self.participants.len();
        self.round_record(None, 0, &vec![(0, 0); n], &vec![0; n])
    }

    fn train_all(&mut self, round: usize) -> Result<Vec<u64>, ProtoError> {
        let master = self.config.master_seed;
        let hyper = &self.config.hyper;
        let train = self.train;
        let jobs: Vec<(u64, &NodeState)> = self
            .participants
            .iter()
            .map(|n| (derive_node_seed(master, n.id.0 as u64, round as u64), n))
            .collect();
        let run = |(seed, node): &(u64, &NodeState)| {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            train_local(&node.model, train, &node.part, hyper, &mut rng).map(|(m, _)| m)
        };
        let parallel =
            std::thread::available_parallelism().map_or(1, |p| p.get()) > 1 && jobs.len() > 1;
        let trained: Vec<Result<MlpModel, NnError>> = if parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = jobs.iter().map(|job| s.spawn(move || run(job))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("local training panicked"))
                    .collect()
            })
        } else {
            jobs.iter().map(run).collect()
        };
        let seeds: Vec<u64> = jobs.iter().map(|(s, _)| *s).collect();
        for ((node, model), &seed) in self.participants.iter_mut().zip(trained).zip(&seeds) {
            node.model = model?;
            node.rng_seed = seed;
        }
        Ok(seeds)
    }

    fn weights_for(&self, ids: &[NodeId]) -> Option<Vec<f64>> {
        match self.config.weighting {
            Weighting::Equal => None,
            Weighting::Samples => Some(
                ids.iter()
                    .map(|id| self.participants[id.0].part.len() as f64)
                    .collect(),
            ),
        }
    }

    /// FedAvg over `(sender, model)` pairs, taken in node-id order.
    fn aggregate(
        &self,
        mut contributions: Vec<(NodeId, MlpModel)>,
    ) -> Result<MlpModel, ProtoError> {
        contributions.sort_by_key(|(id, _)| *id);
        let ids: Vec<NodeId> = contributions.iter().map(|(id, _)| *id).collect();
        let models: Vec<MlpModel> = contributions.into_iter().map(|(_, m)| m).collect();
        fedavg(&models, self.weights_for(&ids).as_deref())
    }

    fn model_of(&self, id: NodeId) -> &MlpModel {
        match &self.server {
            Some(server) if server.id == id => &server.model,
            _ => &self.participants[id.0].model,
        }
    }

    fn send_phase(&mut self, plan: &TopologyPlan, phase: u8, at: u64) -> Result<(), ProtoError> {
        let round = self.round;
        let mut encoded: Vec<(NodeId, Vec<u8>)> = Vec::new();
        for edge in plan.phase(phase) {
            let payload = match encoded.iter().find(|(id, _)| *id == edge.sender) {
                Some((_, bytes)) => bytes.clone(),
                None => {
                    let bytes = encode_model(self.model_of(edge.sender));
                    encoded.push((edge.sender, bytes.clone()));
                    bytes
                }
            };
            self.bus.send(Message::new(
                round,
                edge.sender,
                edge.receiver,
                edge.kind,
                payload,
                at,
            ))?;
        }
        Ok(())
    }

    /// Collects for `receiver`, decoding every delivered model.
    fn receive(&mut self, receiver: NodeId, deadline: Option<u64>) -> Result<Received, ProtoError> {
        let got = self.bus.collect(receiver, deadline)?;
        let last_arrival = got
            .delivered
            .iter()
            .map(|m| m.deliver_time)
            .max()
            .unwrap_or(0);
        let models = got
            .delivered
            .iter()
            .map(|m| Ok((m.sender, decode_model(&m.payload)?)))
            .collect::<Result<Vec<_>, ProtoError>>()?;
        Ok((models, got.dropped as u64, last_arrival))
    }

    /// Gather at one node, average, distribute back. Used by CFL (server)
    /// and SDFL (rotating aggregator).
    fn star_round(
        &mut self,
        plan: &TopologyPlan,
        hub: NodeId,
        hub_trains: bool,
    ) -> Result<u64, ProtoError> {
        let deadline = self.config.round_deadline;
        self.send_phase(plan, 0, 0)?;
        let (mut received, mut dropped, last) = self.receive(hub, deadline)?;
        if hub_trains {
            received.push((hub, self.participants[hub.0].model.clone()));
        }
        if !received.is_empty() {
            let global = self.aggregate(received)?;
            match self.server.as_mut() {
                Some(server) if server.id == hub => server.model = global,
                _ => self.participants[hub.0].model = global,
            }
        }

        let start = deadline.unwrap_or(last);
        self.send_phase(plan, 1, start)?;
        let phase_deadline = deadline.map(|d| start + d);
        let receivers: Vec<NodeId> = plan.phase(1).map(|e| e.receiver).collect();
        for id in receivers {
            let (models, late, _) = self.receive(id, phase_deadline)?;
            dropped += late;
            if let Some((_, global)) = models.into_iter().next_back() {
                self.participants[id.0].model = global;
            }
        }
        Ok(dropped)
    }

    fn mesh_round(&mut self, plan: &TopologyPlan) -> Result<u64, ProtoError> {
        let deadline = self.config.round_deadline;
        self.send_phase(plan, 0, 0)?;
        let mut dropped = 0;
        let mut updated = Vec::with_capacity(self.participants.len());
        for i in 0..self.participants.len() {
            let id = NodeId(i);
            let (mut received, late, _) = self.receive(id, deadline)?;
            dropped += late;
            received.push((id, self.participants[i].model.clone()));
            updated.push(self.aggregate(received)?);
        }
        for (node, model) in self.participants.iter_mut().zip(updated) {
            node.model = model;
        }
        Ok(dropped)
    }

    /// One full round: local training, exchange, aggregation, evaluation.
    pub fn run_round(&mut self) -> Result<RoundRecord, ProtoError> {
        if self.round >= self.config.rounds {
            return Err(ProtoError::RoundsExhausted(self.config.rounds));
        }
        self.round += 1;
        let round = self.round;
        let n = self.participants.len();
        self.bus.begin_round(round);

        let before: Vec<(u64, u64)> = (0..n)
            .map(|i| {
                (
                    self.bus.ledger().sent_by(NodeId(i)),
                    self.bus.ledger().received_by(NodeId(i)),
                )
            })
            .collect();

        let seeds = self.train_all(round)?;
        self.seeds.training.push(seeds);
        let epochs = self.config.hyper.epochs_per_round;
        let flops: Vec<u64> = self
            .participants
            .iter()
            .map(|p| flop_count(&p.model, p.part.len(), epochs))
            .collect();

        let arch = self.config.arch;
        let (aggregator, dropped) = match arch {
            ArchitectureKind::Cfl => {
                let plan = plan_topology(arch, n, round, None)?;
                let hub = NodeId(n);
                (None, self.star_round(&plan, hub, false)?)
            }
            ArchitectureKind::Dfl => {
                let plan = plan_topology(arch, n, round, None)?;
                (None, self.mesh_round(&plan)?)
            }
            ArchitectureKind::Sdfl => {
                let ids: Vec<NodeId> = (0..n).map(NodeId).collect();
                let agg = select_aggregator(&ids, &mut self.aggregator_rng)?;
                for p in &mut self.participants {
                    p.role = if p.id == agg {
                        Role::Aggregator
                    } else {
                        Role::Trainer
                    };
                }
                let plan = plan_topology(arch, n, round, Some(agg))?;
                (Some(agg), self.star_round(&plan, agg, true)?)
            }
        };

        let traffic: Vec<(u64, u64)> = (0..n)
            .map(|i| {
                let ledger = self.bus.ledger();
                (
                    ledger.sent_by(NodeId(i)) - before[i].0,
                    ledger.received_by(NodeId(i)) - before[i].1,
                )
            })
            .collect();
        self.round_record(aggregator, dropped, &traffic, &flops)
    }

    /// Assembles the final record from the per-round records (round 0
    /// first).
    pub fn into_record(self, rounds: Vec<RoundRecord>) -> RunRecord {
        let last = rounds.last().map(|r| r.average.clone());
        let total_flops = rounds.iter().map(|r| r.average.flops).sum();
        let mut record = RunRecord {
            param_count: self.participants[0].model.param_count(),
            encoded_model_bytes: encoded_size(&self.config.layer_dims),
            partition_sizes: self.partition_sizes,
            seeds: self.seeds,
            summary: RunSummary {
                final_accuracy: last.as_ref().map_or(0.0, |s| s.accuracy),
                final_precision: last.as_ref().map_or(0.0, |s| s.precision),
                final_recall: last.as_ref().map_or(0.0, |s| s.recall),
                final_f1: last.as_ref().map_or(0.0, |s| s.f1),
                final_loss: last.as_ref().map_or(0.0, |s| s.loss),
                convergence_threshold: self.config.convergence_threshold,
                convergence_round: None,
                total_bytes: self.bus.ledger().total(),
                total_flops,
            },
            ledger: self.bus.ledger().snapshot(),
            rounds,
            config: self.config,
        };
        record.summary.convergence_round =
            convergence_round(&record, record.summary.convergence_threshold);
        record
    }
}

/// Runs a whole experiment, calling `observer` after round 0 and after
/// every training round.
pub fn run_experiment_observed<F>(
    config: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    mut observer: F,
) -> Result<RunRecord, ProtoError>
where
    F: FnMut(&Federation<'_>, &RoundRecord),
{
    let mut fed = Federation::new(config.clone(), train, test)?;
    let mut rounds = Vec::with_capacity(config.rounds + 1);
    let initial = fed.initial_record()?;
    observer(&fed, &initial);
    rounds.push(initial);
    for _ in 0..config.rounds {
        let record = fed.run_round()?;
        observer(&fed, &record);
        rounds.push(record);
    }
    Ok(fed.into_record(rounds))
}

pub fn run_experiment(
    config: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<RunRecord, ProtoError> {
    run_experiment_observed(config, train, test, |_, _| {})
}
