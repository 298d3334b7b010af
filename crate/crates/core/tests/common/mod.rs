#![allow(dead_code)]

use mulki_core::encoder::{DualEncoder, EncoderDims, ModelSnapshot};
use mulki_core::losses::{Components, LossConfig, Weighting};
use mulki_core::rng;
use mulki_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn unit_rows(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut d: Vec<f64> = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
    for row in d.chunks_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::matrix(rows, cols, d).unwrap()
}

pub fn probs(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut d: Vec<f64> = (0..rows * cols).map(|_| r.random_range(0.05..1.0)).collect();
    for row in d.chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::matrix(rows, cols, d).unwrap()
}

/// A student, two teachers and one batch at `d = 8`, `B = 4`, `K = 3`.
pub struct Scenario {
    pub student: DualEncoder,
    pub c0: ModelSnapshot,
    pub prev: ModelSnapshot,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub tokens: Vec<usize>,
    pub protos: Tensor,
    pub theta_prev: Vec<f64>,
}

pub const B: usize = 4;
pub const K: usize = 3;

pub fn dims() -> EncoderDims {
    EncoderDims {
        d_in: 5,
        d_tok: 4,
        hidden: 6,
        embed_dim: 8,
        vocab_size: K + 1,
    }
}

pub fn scenario(seed: u64) -> Scenario {
    let mut r = rng::stream(seed, &[1234]);
    let student = DualEncoder::init(rng::derive(seed, &[1]), dims()).unwrap();
    let c0 = DualEncoder::init(rng::derive(seed, &[2]), dims()).unwrap().snapshot();
    let prev = DualEncoder::init(rng::derive(seed, &[3]), dims()).unwrap().snapshot();
    let theta_prev = prev.params_flat();
    Scenario {
        images: uniform(&mut r, &[B, dims().d_in]),
        labels: (0..B).map(|_| r.random_range(0..K)).collect(),
        tokens: (1..=K).collect(),
        protos: unit_rows(&mut r, K, dims().embed_dim),
        student,
        c0,
        prev,
        theta_prev,
    }
}

pub fn full_config(weighting: Weighting) -> LossConfig {
    LossConfig {
        tau: 2.0,
        tau_ce: 0.07,
        alpha: 1.0,
        beta: 1.0,
        lambda1: 1.0,
        lambda2: 1.0,
        lambda_wc: 1.0,
        weighting,
        enable: Components::default(),
    }
}
