//! Simulated message bus: model wire codec, seeded link latency, optional
//! per-phase deadlines and a per-link byte ledger.
//!
//! Wire layout of an encoded model (all integers little-endian):
//!
//! ```text
//! "FLM1" | version u32 = 1 | layer_count u32
//! per layer:  in_dim u32, out_dim u32
//! per layer:  weights f32[out_dim * in_dim] (row-major), bias f32[out_dim]
//! ```
//!
//! Time is abstract integer units. Bytes are charged to the ledger when a
//! message is sent, whether or not it later arrives in time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{DenseLayer, DenseMatrix, MlpModel, NnError};

pub const MAGIC: [u8; 4] = *b"FLM1";
pub const VERSION: u32 = 1;
const FIXED_HEADER: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("{extra} unexpected trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("declared dimensions overflow")]
    DimOverflow,
    #[error("invalid model: {0}")]
    Model(#[from] NnError),
}

/// Exact encoded size for a model with these layer dims.
pub fn encoded_size(layer_dims: &[usize]) -> usize {
    let layers = layer_dims.len().saturating_sub(1);
    let params: usize = layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    FIXED_HEADER + 8 * layers + 4 * params
}

pub fn encode_model(model: &MlpModel) -> Vec<u8> {
    let layers = model.layers();
    let mut out = Vec::with_capacity(encoded_size(&model.layer_dims()));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for layer in layers {
        out.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
    }
    for layer in layers {
        for v in layer.weights.values().iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn read_f32s(bytes: &[u8], count: usize) -> Vec<f32> {
    bytes[..count * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn decode_model(bytes: &[u8]) -> Result<MlpModel, CodecError> {
    let truncated = |needed: usize| CodecError::Truncated {
        needed,
        got: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(FIXED_HEADER));
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    if bytes.len() < FIXED_HEADER {
        return Err(truncated(FIXED_HEADER));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(CodecError::UnsupportedVersion(version));
    }
    let layer_count = read_u32(bytes, 8) as usize;
    let dims_end = layer_count
        .checked_mul(8)
        .and_then(|d| d.checked_add(FIXED_HEADER))
        .ok_or(CodecError::DimOverflow)?;
    if bytes.len() < dims_end {
        return Err(truncated(dims_end));
    }
    let shapes: Vec<(usize, usize)> = (0..layer_count)
        .map(|l| {
            let at = FIXED_HEADER + 8 * l;
            (
                read_u32(bytes, at) as usize,
                read_u32(bytes, at + 4) as usize,
            )
        })
        .collect();
    let params = shapes.iter().try_fold(0usize, |acc, &(i, o)| {
        i.checked_mul(o)
            .and_then(|w| w.checked_add(o))
            .and_then(|p| acc.checked_add(p))
    });
    let needed = params
        .and_then(|p| p.checked_mul(4))
        .and_then(|p| p.checked_add(dims_end))
        .ok_or(CodecError::DimOverflow)?;
    if bytes.len() < needed {
        return Err(truncated(needed));
    }
    if bytes.len() > needed {
        return Err(CodecError::TrailingBytes {
            extra: bytes.len() - needed,
        });
    }

    let mut at = dims_end;
    let mut layers = Vec::with_capacity(layer_count);
    for (in_dim, out_dim) in shapes {
        let weights = read_f32s(&bytes[at..], in_dim * out_dim);
        at += 4 * in_dim * out_dim;
        let bias = read_f32s(&bytes[at..], out_dim);
        at += 4 * out_dim;
        layers.push(DenseLayer {
            weights: DenseMatrix::from_vec(out_dim, in_dim, weights)?,
            bias,
        });
    }
    Ok(MlpModel::from_layers(layers)?)
}

/// Per-message link latency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LatencyModel {
    #[default]
    Zero,
    Fixed {
        delay: u64,
    },
    /// Uniform over the inclusive range `lo..=hi`.
    Uniform {
        lo: u64,
        hi: u64,
    },
}

impl LatencyModel {
    pub fn is_zero(&self) -> bool {
        matches!(self, LatencyModel::Zero | LatencyModel::Fixed { delay: 0 })
            || matches!(self, LatencyModel::Uniform { lo: 0, hi: 0 })
    }
}

impl fmt::Display for LatencyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LatencyModel::Zero => write!(f, "zero"),
            LatencyModel::Fixed { delay } => write!(f, "fixed:{delay}"),
            LatencyModel::Uniform { lo, hi } => write!(f, "uniform:{lo}:{hi}"),
        }
    }
}

impl FromStr for LatencyModel {
    type Err = String;

    /// Accepts `zero`, `fixed:D` or `uniform:LO:HI`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let num = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| format!("invalid latency value '{v}' in '{s}'"))
        };
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["zero"] => Ok(LatencyModel::Zero),
            ["fixed", d] => Ok(LatencyModel::Fixed { delay: num(d)? }),
            ["uniform", lo, hi] => {
                let (lo, hi) = (num(lo)?, num(hi)?);
                if lo > hi {
                    return Err(format!("uniform latency needs lo <= hi, got '{s}'"));
                }
                Ok(LatencyModel::Uniform { lo, hi })
            }
            _ => Err(format!(
                "invalid latency '{s}' (expected zero, fixed:D or uniform:LO:HI)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
struct LatencySampler {
    model: LatencyModel,
    rng: ChaCha8Rng,
}

impl LatencySampler {
    fn sample(&mut self) -> u64 {
        match self.model {
            LatencyModel::Zero => 0,
            LatencyModel::Fixed { delay } => delay,
            LatencyModel::Uniform { lo, hi } => self.rng.gen_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    ModelUpload,
    ModelBroadcast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub round: usize,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
    pub send_time: u64,
    /// Filled in by the bus on send.
    pub deliver_time: u64,
}

impl Message {
    pub fn new(
        round: usize,
        sender: NodeId,
        receiver: NodeId,
        kind: MessageKind,
        payload: Vec<u8>,
        send_time: u64,
    ) -> Self {
        Self {
            round,
            sender,
            receiver,
            kind,
            payload,
            send_time,
            deliver_time: send_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("message for round {message} sent during round {current}")]
    WrongRound { message: usize, current: usize },
    #[error("node {0} already collected in round {1}")]
    AlreadyCollected(NodeId, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkBytes {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub bytes: u64,
    pub messages: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeBytes {
    pub node: NodeId,
    pub sent: u64,
    pub received: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LedgerSnapshot {
    pub total: u64,
    pub links: Vec<LinkBytes>,
    pub nodes: Vec<NodeBytes>,
}

/// Cumulative traffic counters.
#[derive(Debug, Clone, Default)]
pub struct ByteLedger {
    links: BTreeMap<(NodeId, NodeId), (u64, u64)>,
    sent: BTreeMap<NodeId, u64>,
    received: BTreeMap<NodeId, u64>,
    total: u64,
}

impl ByteLedger {
    pub fn charge(&mut self, sender: NodeId, receiver: NodeId, bytes: u64) {
        let link = self.links.entry((sender, receiver)).or_default();
        link.0 += bytes;
        link.1 += 1;
        *self.sent.entry(sender).or_default() += bytes;
        *self.received.entry(receiver).or_default() += bytes;
        self.total += bytes;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn link(&self, sender: NodeId, receiver: NodeId) -> u64 {
        self.links.get(&(sender, receiver)).map_or(0, |l| l.0)
    }

    pub fn sent_by(&self, node: NodeId) -> u64 {
        self.sent.get(&node).copied().unwrap_or(0)
    }

    pub fn received_by(&self, node: NodeId) -> u64 {
        self.received.get(&node).copied().unwrap_or(0)
    }

    pub fn message_count(&self) -> u64 {
        self.links.values().map(|l| l.1).sum()
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let nodes: BTreeSet<NodeId> = self
            .sent
            .keys()
            .chain(self.received.keys())
            .copied()
            .collect();
        LedgerSnapshot {
            total: self.total,
            links: self
                .links
                .iter()
                .map(|(&(sender, receiver), &(bytes, messages))| LinkBytes {
                    sender,
                    receiver,
                    bytes,
                    messages,
                })
                .collect(),
            nodes: nodes
                .into_iter()
                .map(|node| NodeBytes {
                    node,
                    sent: self.sent_by(node),
                    received: self.received_by(node),
                })
                .collect(),
        }
    }
}

/// Messages handed to one receiver by [`Bus::collect`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Collected {
    pub delivered: Vec<Message>,
    pub dropped: usize,
}

/// Round-scoped message bus. Each node may collect at most once per round.
#[derive(Debug, Clone)]
pub struct Bus {
    latency: LatencySampler,
    ledger: ByteLedger,
    round: usize,
    inflight: Vec<Message>,
    collected: BTreeSet<NodeId>,
}

impl Bus {
    pub fn new(latency: LatencyModel, seed: u64) -> Self {
        Self {
            latency: LatencySampler {
                model: latency,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            ledger: ByteLedger::default(),
            round: 0,
            inflight: Vec::new(),
            collected: BTreeSet::new(),
        }
    }

    /// Starts `round`. Anything still in flight from the previous round is
    /// discarded.
    pub fn begin_round(&mut self, round: usize) {
        self.round = round;
        self.inflight.clear();
        self.collected.clear();
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn ledger(&self) -> &ByteLedger {
        &self.ledger
    }

    /// Samples a latency, stamps the delivery time and charges the ledger.
    /// Returns the delivery time.
    pub fn send(&mut self, mut message: Message) -> Result<u64, BusError> {
        if message.round != self.round {
            return Err(BusError::WrongRound {
                message: message.round,
                current: self.round,
            });
        }
        message.deliver_time = message.send_time + self.latency.sample();
        self.ledger.charge(
            message.sender,
            message.receiver,
            message.payload.len() as u64,
        );
        let at = message.deliver_time;
        self.inflight.push(message);
        Ok(at)
    }

    /// Hands over everything addressed to `receiver` that arrives by
    /// `deadline` (everything when there is none), ordered by
    /// `(deliver_time, sender)`. Later messages are dropped and counted.
    pub fn collect(
        &mut self,
        receiver: NodeId,
        deadline: Option<u64>,
    ) -> Result<Collected, BusError> {
        if !self.collected.insert(receiver) {
            return Err(BusError::AlreadyCollected(receiver, self.round));
        }
        let (mut mine, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.inflight)
            .into_iter()
            .partition(|m| m.receiver == receiver);
        self.inflight = rest;
        mine.sort_by_key(|m| (m.deliver_time, m.sender));
        let (delivered, late): (Vec<_>, Vec<_>) = mine
            .into_iter()
            .partition(|m| deadline.is_none_or(|d| m.deliver_time <= d));
        Ok(Collected {
            delivered,
            dropped: late.len(),
        })
    }
}
