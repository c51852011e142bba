//! Independent reference implementations and fixtures shared by the
//! integration tests and the acceptance runner. Nothing here calls into the
//! code under test except to build inputs or read results.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use fedsim::mnist::{
    serialize_idx, IdxTensor, LabeledDataset, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS,
    UNSIGNED_BYTE,
};
use fedsim::nn::{loss_and_grads, DenseLayer, DenseMatrix, MlpModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Gradient oracle

/// Layer shapes as plain `(in, out, weights row-major out x in, bias)`.
pub type NaiveLayer = (usize, usize, Vec<f64>, Vec<f64>);

pub fn to_naive(model: &MlpModel<f64>) -> Vec<NaiveLayer> {
    model
        .layers()
        .iter()
        .map(|l| {
            (
                l.in_dim(),
                l.out_dim(),
                l.weights.values().to_vec(),
                l.bias.clone(),
            )
        })
        .collect()
}

/// Hidden pre-activations and mean cross-entropy, straight from the
/// definitions with triple loops and a log-sum-exp.
pub fn naive_forward(layers: &[NaiveLayer], xs: &[Vec<f64>], ys: &[usize]) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut pre_hidden = Vec::new();
    for (x, &y) in xs.iter().zip(ys) {
        let mut a = x.clone();
        for (l, (in_dim, out_dim, w, b)) in layers.iter().enumerate() {
            let mut z = vec![0.0; *out_dim];
            for o in 0..*out_dim {
                let mut s = b[o];
                for i in 0..*in_dim {
                    s += w[o * in_dim + i] * a[i];
                }
                z[o] = s;
            }
            if l + 1 < layers.len() {
                pre_hidden.extend_from_slice(&z);
                a = z.into_iter().map(|v| v.max(0.0)).collect();
            } else {
                a = z;
            }
        }
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - a[y];
    }
    (total / xs.len() as f64, pre_hidden)
}

/// Relative error with a floor so entries that are zero up to truncation
/// error do not divide by ~0.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

pub struct GradTrial {
    pub params: usize,
    pub max_rel_error: f64,
}

/// One finite-difference trial on a random model of at most 50 parameters.
/// Inputs (and, if that keeps failing, the model) are redrawn until no
/// hidden unit sits within 0.05 of the ReLU kink, where a central
/// difference with step 1e-3 is not meaningful.
pub fn gradcheck_trial(seed: u64) -> GradTrial {
    const STEP: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = loop {
        let depth = rng.gen_range(1..=3);
        let mut dims = vec![rng.gen_range(1..=5)];
        for _ in 0..depth {
            dims.push(rng.gen_range(2..=5));
        }
        let params: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params <= 50 {
            break dims;
        }
    };
    let classes = *dims.last().unwrap();
    let batch = rng.gen_range(1..=4);
    let (model, naive, xs, ys) = 'draw: loop {
        let layers: Vec<DenseLayer<f64>> = dims
            .windows(2)
            .map(|w| DenseLayer {
                weights: DenseMatrix::from_vec(
                    w[1],
                    w[0],
                    (0..w[0] * w[1]).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
                bias: (0..w[1]).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            })
            .collect();
        let model = MlpModel::from_layers(layers).unwrap();
        let naive = to_naive(&model);
        for _ in 0..100 {
            let xs: Vec<Vec<f64>> = (0..batch)
                .map(|_| (0..dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let ys: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
            let (_, pre) = naive_forward(&naive, &xs, &ys);
            if pre.iter().all(|z| z.abs() > 0.05) {
                break 'draw (model, naive, xs, ys);
            }
        }
    };

    let flat: Vec<f64> = xs.iter().flatten().copied().collect();
    let inputs = DenseMatrix::from_vec(batch, dims[0], flat).unwrap();
    let labels: Vec<u8> = ys.iter().map(|&y| y as u8).collect();
    let (loss, grads) = loss_and_grads(&model, &inputs, &labels).unwrap();
    let reference_loss = naive_forward(&naive, &xs, &ys).0;
    let mut worst = relative_error(loss, reference_loss);

    let analytic = grads.flatten();
    let mut idx = 0;
    for l in 0..naive.len() {
        let n_w = naive[l].2.len();
        let n_b = naive[l].3.len();
        for k in 0..n_w + n_b {
            let bump = |delta: f64| {
                let mut p = naive.clone();
                if k < n_w {
                    p[l].2[k] += delta;
                } else {
                    p[l].3[k - n_w] += delta;
                }
                naive_forward(&p, &xs, &ys).0
            };
            let numeric = (bump(STEP) - bump(-STEP)) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[idx], numeric));
            idx += 1;
        }
    }
    assert_eq!(idx, analytic.len(), "gradient layout");
    GradTrial {
        params: model.param_count(),
        max_rel_error: worst,
    }
}

// ---------------------------------------------------------------------------
// FedAvg oracle

pub fn random_model(rng: &mut ChaCha8Rng, dims: &[usize]) -> MlpModel {
    let layers = dims
        .windows(2)
        .map(|w| DenseLayer {
            weights: DenseMatrix::from_vec(
                w[1],
                w[0],
                (0..w[0] * w[1]).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            )
            .unwrap(),
            bias: (0..w[1]).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        })
        .collect();
    MlpModel::from_layers(layers).unwrap()
}

/// Element-wise mean of flattened parameter vectors, summed in f64.
pub fn brute_mean(models: &[MlpModel]) -> Vec<f64> {
    let flat: Vec<Vec<f32>> = models.iter().map(|m| m.params().collect()).collect();
    (0..flat[0].len())
        .map(|j| flat.iter().map(|v| v[j] as f64).sum::<f64>() / flat.len() as f64)
        .collect()
}

// ---------------------------------------------------------------------------
// Metric oracle

pub struct BruteMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class counting by direct scans over the label vectors, with the
/// convention that an undefined ratio is zero.
pub fn brute_metrics(pred: &[u8], truth: &[u8], classes: usize) -> BruteMetrics {
    let n = truth.len() as f64;
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64;
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..classes as u8 {
        let tp = pred
            .iter()
            .zip(truth)
            .filter(|&(&p, &t)| p == c && t == c)
            .count() as f64;
        let fp = pred
            .iter()
            .zip(truth)
            .filter(|&(&p, &t)| p == c && t != c)
            .count() as f64;
        let fnn = pred
            .iter()
            .zip(truth)
            .filter(|&(&p, &t)| p != c && t == c)
            .count() as f64;
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    let k = classes as f64;
    BruteMetrics {
        accuracy: correct / n,
        precision: p_sum / k,
        recall: r_sum / k,
        f1: f_sum / k,
    }
}

// ---------------------------------------------------------------------------
// Synthetic MNIST-shaped data

pub const SIDE: usize = 28;

/// 28x28 images where class `c` lights a horizontal band at rows
/// `2c..2c+3` over uniform background noise; labels cycle through 0..10
/// with a seeded shuffle.
pub fn synthetic_idx(n: usize, seed: u64) -> (IdxTensor, IdxTensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    for &c in &labels {
        for r in 0..SIDE {
            for _ in 0..SIDE {
                let lit = r >= 2 * c as usize && r < 2 * c as usize + 3;
                pixels.push(if lit {
                    rng.gen_range(180..=255)
                } else {
                    rng.gen_range(0..60)
                });
            }
        }
    }
    (
        IdxTensor {
            element_type: UNSIGNED_BYTE,
            dims: vec![n, SIDE, SIDE],
            data: pixels,
        },
        IdxTensor {
            element_type: UNSIGNED_BYTE,
            dims: vec![n],
            data: labels,
        },
    )
}

pub fn synthetic_dataset(n: usize, seed: u64) -> LabeledDataset {
    let (images, labels) = synthetic_idx(n, seed);
    LabeledDataset::from_idx(&images, &labels).unwrap()
}

/// Writes the four MNIST file names into `dir` with synthetic contents.
pub fn write_synthetic_mnist(dir: &Path, n_train: usize, n_test: usize) {
    fs::create_dir_all(dir).unwrap();
    let (ti, tl) = synthetic_idx(n_train, 1);
    let (vi, vl) = synthetic_idx(n_test, 2);
    fs::write(dir.join(TRAIN_IMAGES), serialize_idx(&ti)).unwrap();
    fs::write(dir.join(TRAIN_LABELS), serialize_idx(&tl)).unwrap();
    fs::write(dir.join(TEST_IMAGES), serialize_idx(&vi)).unwrap();
    fs::write(dir.join(TEST_LABELS), serialize_idx(&vl)).unwrap();
}
