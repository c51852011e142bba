//! Deterministic simulator for comparing centralized, decentralized and
//! semi-decentralized federated learning on MNIST.
//!
//! The pipeline: [`mnist`] loads and partitions the data, [`nn`] trains the
//! local models, [`fedproto`] drives the rounds over the simulated
//! [`netsim`] bus, [`kpi`] scores every node, and [`report`] writes the
//! results. [`cli`] ties it together.

pub mod cli;
pub mod fedproto;
pub mod kpi;
pub mod mnist;
pub mod netsim;
pub mod nn;
pub mod report;

pub use fedproto::{
    derive_node_seed, fedavg, plan_topology, run_experiment, run_experiment_observed,
    select_aggregator, ArchitectureKind, ExperimentConfig, Federation, ProtoError, Weighting,
};
pub use kpi::{KpiSample, RunRecord};
pub use mnist::{load_mnist, stratified_partition, LabeledDataset, PartitionPlan};
pub use netsim::{decode_model, encode_model, encoded_size, LatencyModel, NodeId};
pub use nn::{init_model, Hyperparams, MlpModel};
