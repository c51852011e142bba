//! Browser bindings for the simulator.
//!
//! MNIST is not shipped to the browser, so simulations run on a small
//! synthetic 10-class set of 8x8 images. Every entry point returns a JSON
//! string; the plain Rust functions are also usable natively.

use fedsim::fedproto::{run_experiment, ArchitectureKind, ExperimentConfig, DEFAULT_LAYER_DIMS};
use fedsim::mnist::{stratified_partition, LabeledDataset, CLASSES};
use fedsim::netsim::{encoded_size, LatencyModel};
use fedsim::nn::Hyperparams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

pub const SIDE: usize = 8;
pub const WIDTH: usize = SIDE * SIDE;
pub const DEMO_DIMS: [usize; 3] = [WIDTH, 32, CLASSES];
pub const MAX_NODES: usize = 16;
pub const MAX_ROUNDS: usize = 50;

/// Class `c` is a bright stroke through the 8x8 grid (rows 0-4 for c < 5,
/// columns 0-4 otherwise), with noise of amplitude `noise`; labels cycle
/// through the classes.
pub fn synthetic(n: usize, noise: f32, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * WIDTH);
    let labels: Vec<u8> = (0..n).map(|i| (i % CLASSES) as u8).collect();
    for &c in &labels {
        let c = c as usize;
        for r in 0..SIDE {
            for col in 0..SIDE {
                let on = if c < 5 { r == c + 1 } else { col == c - 4 };
                let base = if on { 0.9 } else { 0.05 };
                let v: f32 = base + noise * rng.gen_range(-1.0..1.0);
                images.push(v.clamp(0.0, 1.0));
            }
        }
    }
    LabeledDataset::new(WIDTH, images, labels).expect("synthetic data is well formed")
}

fn parse_arch(arch: &str) -> Result<ArchitectureKind, String> {
    arch.parse::<ArchitectureKind>().map_err(|e| e.to_string())
}

/// Runs one federation on synthetic data. `latency` uses the CLI syntax
/// (`zero`, `fixed:D`, `uniform:LO:HI`); a negative `deadline` means none.
pub fn simulate_json(
    arch: &str,
    nodes: usize,
    rounds: usize,
    seed: u64,
    latency: &str,
    deadline: i64,
) -> Result<String, String> {
    if !(1..=MAX_NODES).contains(&nodes) {
        return Err(format!("nodes must be in 1..={MAX_NODES}"));
    }
    if rounds > MAX_ROUNDS {
        return Err(format!("rounds must be at most {MAX_ROUNDS}"));
    }
    let config = ExperimentConfig {
        arch: parse_arch(arch)?,
        n_participants: nodes,
        rounds,
        master_seed: seed,
        layer_dims: DEMO_DIMS.to_vec(),
        hyper: Hyperparams {
            learning_rate: 0.1,
            batch_size: 16,
            epochs_per_round: 1,
        },
        latency: latency.parse::<LatencyModel>()?,
        round_deadline: u64::try_from(deadline).ok(),
        ..ExperimentConfig::default()
    };
    let train = synthetic(1200, 0.6, 1);
    let test = synthetic(400, 0.6, 2);
    let record = run_experiment(&config, &train, &test).map_err(|e| e.to_string())?;
    let rounds: Vec<_> = record
        .rounds
        .iter()
        .map(|r| {
            json!({
                "round": r.round,
                "accuracy": r.average.accuracy,
                "f1": r.average.f1,
                "loss": r.average.loss,
                "bytes": r.nodes.iter().map(|s| s.bytes_sent).sum::<u64>(),
                "dropped": r.dropped_messages,
                "aggregator": r.aggregator.map(|a| a.0),
                "node_accuracy": r.nodes.iter().map(|s| s.accuracy).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(json!({
        "run": config.run_name(),
        "param_count": record.param_count,
        "encoded_model_bytes": record.encoded_model_bytes,
        "total_bytes": record.summary.total_bytes,
        "final_accuracy": record.summary.final_accuracy,
        "convergence_round": record.summary.convergence_round,
        "rounds": rounds,
    })
    .to_string())
}

/// Per-round model traffic of each architecture for N = 1..=`max_nodes`,
/// using the full-size MNIST model.
pub fn communication_json(max_nodes: usize) -> Result<String, String> {
    if !(1..=MAX_NODES * 4).contains(&max_nodes) {
        return Err(format!("max_nodes must be in 1..={}", MAX_NODES * 4));
    }
    let size = encoded_size(&DEFAULT_LAYER_DIMS) as u64;
    let rows: Vec<_> = (1..=max_nodes)
        .map(|n| {
            let mut row = json!({ "n": n });
            for arch in ArchitectureKind::ALL {
                let transfers = arch.transfers_per_round(n) as u64;
                row[arch.as_str()] = json!({ "transfers": transfers, "bytes": transfers * size });
            }
            row
        })
        .collect();
    Ok(
        json!({ "encoded_model_bytes": size, "layer_dims": DEFAULT_LAYER_DIMS, "rows": rows })
            .to_string(),
    )
}

/// Class histogram of every part of a stratified split of the synthetic
/// training set.
pub fn partition_json(nodes: usize, samples: usize, seed: u64) -> Result<String, String> {
    if !(1..=MAX_NODES).contains(&nodes) || samples < nodes || samples > 100_000 {
        return Err(format!(
            "need 1 <= nodes <= {MAX_NODES} and nodes <= samples <= 100000"
        ));
    }
    // Unbalanced class counts make the dealing visible.
    let base = synthetic(samples, 0.0, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let keep: Vec<usize> = (0..base.len())
        .filter(|&i| rng.gen_range(0.0..1.0) < 0.4 + 0.06 * base.label(i) as f64)
        .collect();
    let images: Vec<f32> = keep
        .iter()
        .flat_map(|&i| base.image(i).iter().copied())
        .collect();
    let labels: Vec<u8> = keep.iter().map(|&i| base.label(i)).collect();
    let data = LabeledDataset::new(WIDTH, images, labels).map_err(|e| e.to_string())?;
    let plan = stratified_partition(&data, nodes, seed).map_err(|e| e.to_string())?;
    let parts: Vec<Vec<usize>> = plan
        .parts
        .iter()
        .map(|p| {
            let mut h = vec![0usize; CLASSES];
            for &i in p {
                h[data.label(i) as usize] += 1;
            }
            h
        })
        .collect();
    Ok(json!({
        "samples": data.len(),
        "classes": data.class_histogram(),
        "sizes": plan.sizes(),
        "parts": parts,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn simulate(
    arch: &str,
    nodes: usize,
    rounds: usize,
    seed: u32,
    latency: &str,
    deadline: i32,
) -> Result<String, JsError> {
    simulate_json(arch, nodes, rounds, seed as u64, latency, deadline as i64)
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn communication_table(max_nodes: usize) -> Result<String, JsError> {
    communication_json(max_nodes).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn partition_histogram(nodes: usize, samples: usize, seed: u32) -> Result<String, JsError> {
    partition_json(nodes, samples, seed as u64).map_err(|e| JsError::new(&e))
}
