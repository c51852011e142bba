//! Per-node, per-round performance indicators and the run record that
//! collects them.
//!
//! Classification metrics are macro-averaged over the ten classes. Compute
//! cost is the deterministic flop proxy from [`crate::nn::flop_count`]
//! rather than measured CPU usage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fedproto::ExperimentConfig;
use crate::mnist::{LabeledDataset, CLASSES};
use crate::netsim::{LedgerSnapshot, NodeId};
use crate::nn::{forward_with_loss, DenseMatrix, MlpModel, NnError};

const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KpiError {
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("class {0} out of range")]
    ClassOutOfRange(u8),
    #[error("nothing to evaluate")]
    Empty,
    #[error("samples from rounds {0} and {1} cannot be averaged together")]
    MixedRounds(usize, usize),
    #[error("model has {0} outputs, expected {CLASSES}")]
    OutputDim(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// `counts[t][p]` = samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: [[u64; CLASSES]; CLASSES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; CLASSES]; CLASSES]) -> Self {
        Self { counts }
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn counts(&self) -> &[[u64; CLASSES]; CLASSES] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, other_row) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in row.iter_mut().zip(other_row) {
                *a += b;
            }
        }
    }
}

pub fn confusion(predictions: &[u8], labels: &[u8]) -> Result<ConfusionMatrix, KpiError> {
    if predictions.len() != labels.len() {
        return Err(KpiError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predictions.iter().zip(labels) {
        if p as usize >= CLASSES {
            return Err(KpiError::ClassOutOfRange(p));
        }
        if t as usize >= CLASSES {
            return Err(KpiError::ClassOutOfRange(t));
        }
        cm.counts[t as usize][p as usize] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy plus macro precision, recall and F1. A class whose denominator
/// is empty contributes zero to the macro mean.
pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<ClassMetrics, KpiError> {
    let total = cm.total();
    if total == 0 {
        return Err(KpiError::Empty);
    }
    let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
    for c in 0..CLASSES {
        let tp = cm.counts[c][c];
        let predicted: u64 = (0..CLASSES).map(|t| cm.counts[t][c]).sum();
        let actual: u64 = cm.counts[c].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        precision += p;
        recall += r;
        if p + r > 0.0 {
            f1 += 2.0 * p * r / (p + r);
        }
    }
    let k = CLASSES as f64;
    Ok(ClassMetrics {
        accuracy: ratio(cm.trace(), total),
        precision: precision / k,
        recall: recall / k,
        f1: f1 / k,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub loss: f64,
}

impl Evaluation {
    pub fn metrics(&self) -> ClassMetrics {
        metrics_from_confusion(&self.confusion).expect("evaluation covers at least one sample")
    }
}

fn argmax(row: &[f32]) -> u8 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u8
}

/// Confusion matrix and mean cross-entropy of `model` over `data`.
pub fn evaluate(model: &MlpModel, data: &LabeledDataset) -> Result<Evaluation, KpiError> {
    if data.is_empty() {
        return Err(KpiError::Empty);
    }
    if model.output_dim() != CLASSES {
        return Err(KpiError::OutputDim(model.output_dim()));
    }
    let width = data.width();
    let mut cm = ConfusionMatrix::default();
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(EVAL_CHUNK);
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let inputs = DenseMatrix::from_vec(
            end - start,
            width,
            data.images()[start * width..end * width].to_vec(),
        )?;
        let labels = &data.labels()[start..end];
        let (probs, chunk_loss) = forward_with_loss(model, &inputs, labels)?;
        loss += chunk_loss;
        preds.clear();
        preds.extend((0..probs.rows()).map(|r| argmax(probs.row(r))));
        cm.merge(&confusion(&preds, labels)?);
    }
    Ok(Evaluation {
        confusion: cm,
        loss: loss / data.len() as f64,
    })
}

/// One node's indicators for one round. `node` is `None` for the
/// federation average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiSample {
    pub node: Option<NodeId>,
    pub round: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub loss: f64,
    /// Bytes this node put on the wire during the round.
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Local training cost during the round.
    pub flops: u64,
}

impl KpiSample {
    pub fn from_evaluation(node: NodeId, round: usize, eval: &Evaluation) -> Self {
        let m = eval.metrics();
        Self {
            node: Some(node),
            round,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            loss: eval.loss,
            bytes_sent: 0,
            bytes_received: 0,
            flops: 0,
        }
    }
}

// Sorting first makes the mean independent of node order down to the last bit.
fn order_free_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values.into_iter().sum::<f64>() / n
}

/// Mean of the metric fields; byte and flop counters are summed.
pub fn average_over_participants(samples: &[KpiSample]) -> Result<KpiSample, KpiError> {
    let first = samples.first().ok_or(KpiError::Empty)?;
    if let Some(other) = samples.iter().find(|s| s.round != first.round) {
        return Err(KpiError::MixedRounds(first.round, other.round));
    }
    let mean = |f: fn(&KpiSample) -> f64| order_free_mean(samples.iter().map(f).collect());
    Ok(KpiSample {
        node: None,
        round: first.round,
        accuracy: mean(|s| s.accuracy),
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        f1: mean(|s| s.f1),
        loss: mean(|s| s.loss),
        bytes_sent: samples.iter().map(|s| s.bytes_sent).sum(),
        bytes_received: samples.iter().map(|s| s.bytes_received).sum(),
        flops: samples.iter().map(|s| s.flops).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// SDFL only: the participant that aggregated this round.
    pub aggregator: Option<NodeId>,
    pub dropped_messages: u64,
    pub nodes: Vec<KpiSample>,
    pub average: KpiSample,
}

/// Seeds used by a run. Training seeds are `training[round - 1][node]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub derivation: String,
    pub master: u64,
    pub init: u64,
    pub partition: u64,
    pub aggregator: u64,
    pub latency: u64,
    pub training: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_accuracy: f64,
    pub final_precision: f64,
    pub final_recall: f64,
    pub final_f1: f64,
    pub final_loss: f64,
    pub convergence_threshold: f64,
    pub convergence_round: Option<usize>,
    pub total_bytes: u64,
    pub total_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub seeds: SeedRecord,
    pub param_count: usize,
    pub encoded_model_bytes: usize,
    pub partition_sizes: Vec<usize>,
    /// Round 0 is the shared initial model.
    pub rounds: Vec<RoundRecord>,
    pub summary: RunSummary,
    pub ledger: LedgerSnapshot,
}

impl RunRecord {
    pub fn accuracy_series(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.average.accuracy).collect()
    }
}

/// First index whose value reaches `threshold`.
pub fn first_round_reaching(series: &[f64], threshold: f64) -> Option<usize> {
    series.iter().position(|&v| v >= threshold)
}

/// Smallest round whose federation-average accuracy reaches `threshold`.
pub fn convergence_round(record: &RunRecord, threshold: f64) -> Option<usize> {
    record
        .rounds
        .iter()
        .find(|r| r.average.accuracy >= threshold)
        .map(|r| r.round)
}
