//! Parameter-space knowledge integration over flat parameter vectors:
//! a squared-distance consolidation penalty toward the previous task's
//! weights, a running Weight Ensemble of in-task checkpoints, and the
//! extended variant that periodically writes the ensemble back into the
//! live model.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// `Σᵢ (θᵢ − θ_prevᵢ)²` with `θ` given as the parameter tensors on `g`
/// (in flat order) and `θ_prev` as a constant flat vector.
pub fn wc_loss(g: &mut Graph, params: &[Var], theta_prev: &[f64]) -> Result<Var> {
    let total: usize = params.iter().map(|&p| g.value(p).numel()).sum();
    if total != theta_prev.len() {
        return Err(shape_err("wc_loss", &[total], &[theta_prev.len()]));
    }
    let mut off = 0;
    let mut acc: Option<Var> = None;
    for &p in params {
        let t = g.value(p);
        let n = t.numel();
        let c = Tensor::new(t.shape().to_vec(), theta_prev[off..off + n].to_vec())?;
        off += n;
        let c = g.constant(c);
        let d = g.sub(p, c)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => g.constant(Tensor::scalar(0.0)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeMode {
    Off,
    We,
    Ewe,
}

/// Running weight ensemble for one task.
///
/// After `m` averagings `theta_hat` is the uniform mean of the `m + 1`
/// vectors `θ_{t−1}, θ_I, θ_{2I}, …, θ_{mI}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeState {
    theta_hat: Vec<f64>,
    m: u64,
    interval: u64,
    eta: u64,
    mode: WeMode,
}

impl WeState {
    pub fn init(theta_prev: &[f64], interval: u64, eta: u64, mode: WeMode) -> Result<Self> {
        if interval == 0 || eta == 0 {
            return Err(Error::Config(format!(
                "weight ensemble interval and eta must be >= 1, got {interval} and {eta}"
            )));
        }
        Ok(Self {
            theta_hat: theta_prev.to_vec(),
            m: 0,
            interval,
            eta,
            mode,
        })
    }

    /// Rebuilds a state from its serialized parts.
    pub fn from_parts(theta_hat: Vec<f64>, m: u64, interval: u64, eta: u64, mode: WeMode) -> Result<Self> {
        let mut s = Self::init(&[], interval, eta, mode)?;
        s.theta_hat = theta_hat;
        s.m = m;
        Ok(s)
    }

    pub fn theta_hat(&self) -> &[f64] {
        &self.theta_hat
    }

    pub fn averagings(&self) -> u64 {
        self.m
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }

    pub fn eta(&self) -> u64 {
        self.eta
    }

    pub fn mode(&self) -> WeMode {
        self.mode
    }

    /// Folds `theta` into the ensemble when `k` is a multiple of the
    /// interval. Returns whether an averaging happened.
    pub fn step(&mut self, theta: &[f64], k: u64) -> Result<bool> {
        if k == 0 {
            return Err(Error::Contract("we_step: iteration index starts at 1".into()));
        }
        if theta.len() != self.theta_hat.len() {
            return Err(shape_err("we_step", &[self.theta_hat.len()], &[theta.len()]));
        }
        if self.mode == WeMode::Off || k % self.interval != 0 {
            return Ok(false);
        }
        self.m += 1;
        // θ/(m+1) + m/(m+1)·θ̂ in incremental-mean form
        let w = 1.0 / (self.m as f64 + 1.0);
        for (h, &t) in self.theta_hat.iter_mut().zip(theta) {
            *h += w * (t - *h);
        }
        Ok(true)
    }

    /// In EWE mode, overwrites `student` with the ensemble right after
    /// every `eta`-th averaging (iterations that are multiples of
    /// `eta · interval`). Returns whether a replacement happened.
    pub fn ewe_step(&self, student: &mut [f64], k: u64) -> bool {
        let due = self.mode == WeMode::Ewe
            && k > 0
            && k % self.interval == 0
            && self.m > 0
            && self.m % self.eta == 0;
        if due {
            student.copy_from_slice(&self.theta_hat);
        }
        due
    }

    /// The parameters that represent the finished task.
    pub fn final_params(&self, student: &[f64]) -> Vec<f64> {
        match self.mode {
            WeMode::Off => student.to_vec(),
            WeMode::We | WeMode::Ewe => self.theta_hat.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn wc_hand_values() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let l = wc_loss(&mut g, &[p], &[1.0, 2.0]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let l = wc_loss(&mut g, &[p], &[0.0, 3.0]).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[2.0, -2.0]);
        assert!(wc_loss(&mut g, &[p], &[0.0]).is_err());
    }

    #[test]
    fn init_state() {
        let s = WeState::init(&[1.0, -1.0], 50, 5, WeMode::We).unwrap();
        assert_eq!(s.theta_hat(), &[1.0, -1.0]);
        assert_eq!(s.averagings(), 0);
        assert!(WeState::init(&[1.0], 0, 5, WeMode::We).is_err());
    }

    #[test]
    fn three_point_running_average() {
        let mut s = WeState::init(&[0.0], 2, 100, WeMode::We).unwrap();
        for k in 1..=4u64 {
            let theta = [if k <= 2 { 3.0 } else { 6.0 }];
            s.step(&theta, k).unwrap();
        }
        assert_eq!(s.averagings(), 2);
        assert_eq!(s.theta_hat(), &[3.0]);
    }

    #[test]
    fn constant_stream_is_a_fixed_point() {
        let c = [0.3, -1.7, 2.5];
        let mut s = WeState::init(&c, 3, 2, WeMode::We).unwrap();
        for k in 1..=60 {
            s.step(&c, k).unwrap();
            assert_eq!(s.theta_hat(), &c);
        }
    }

    #[test]
    fn off_mode_never_averages() {
        let mut s = WeState::init(&[0.0], 1, 1, WeMode::Off).unwrap();
        assert!(!s.step(&[5.0], 1).unwrap());
        assert_eq!(s.final_params(&[5.0]), vec![5.0]);
        assert!(s.step(&[5.0], 0).is_err());
    }

    #[test]
    fn ewe_every_averaging_when_eta_is_one() {
        let mut s = WeState::init(&[0.0], 1, 1, WeMode::Ewe).unwrap();
        let mut student = [4.0];
        for k in 1..=5 {
            student[0] += 1.0;
            s.step(&student, k).unwrap();
            assert!(s.ewe_step(&mut student, k));
            assert_eq!(student, [s.theta_hat()[0]]);
        }
    }

    #[test]
    fn we_mode_never_replaces() {
        let mut s = WeState::init(&[0.0], 1, 1, WeMode::We).unwrap();
        let mut student = [4.0];
        s.step(&student, 1).unwrap();
        assert!(!s.ewe_step(&mut student, 1));
        assert_eq!(student, [4.0]);
    }
}
